fn main() {
    std::process::exit(trackgraph::cli::run(std::env::args_os()));
}

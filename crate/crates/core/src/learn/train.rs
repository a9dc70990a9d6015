use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{unroll, LossBreakdown, LossConfig};
use crate::assocgraph::{AssociationMode, GateMode, ModelConfig, ScoringMode};
use crate::error::{Error, Result};
use crate::numcore::{adam_step, AdamConfig, AdamState, ParamGrads, Tape, Tensor};
use crate::synthworld::{LabeledSequence, SuiteConfig};
use crate::trackman::{Model, Thresholds};

/// Named configurations accepted by [`TrainConfig::with_ablation`].
pub const ABLATION_NAMES: [&str; 11] = [
    "full",
    "limited_gnn",
    "association_heuristic",
    "no_appearance",
    "const_variance",
    "scoring_heuristic",
    "simple_gate",
    "mlp_node_updates",
    "blocks_1",
    "blocks_3",
    "no_residual",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub limited_gnn: bool,
    pub association_heuristic: bool,
    pub no_appearance: bool,
    pub const_variance: bool,
    pub scoring_heuristic: bool,
    pub simple_gate: bool,
    pub mlp_node_updates: bool,
    pub no_residual: bool,
    /// Experimental: no gate at all. Known to diverge.
    pub no_gate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Frames per training clip.
    #[serde(rename = "T")]
    pub frames: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambdas: [f64; 4],
    pub seed: u64,
    #[serde(rename = "D")]
    pub d: usize,
    pub blocks: usize,
    pub ablations: Ablations,
    pub iterations: usize,
    /// Size of the training set drawn from `suite`.
    pub train_sequences: usize,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    pub suite: SuiteConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let loss = LossConfig::default();
        Self {
            frames: loss.frames,
            batch_size: 4,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            lambdas: loss.lambdas,
            seed: 0,
            d: 32,
            blocks: 2,
            ablations: Ablations::default(),
            iterations: 2000,
            train_sequences: 256,
            grad_clip: None,
            suite: SuiteConfig::crossing_suite(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.batch_size == 0 || self.train_sequences == 0 {
            return Err(Error::invalid("T, batch_size and train_sequences must be ≥ 1"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || self.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::invalid("lr must be > 0; weight_decay and lambdas ≥ 0"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("grad_clip must be > 0"));
            }
        }
        self.suite.world.validate()?;
        self.suite.noise.validate()?;
        self.model_config().validate()
    }

    /// Applies one of [`ABLATION_NAMES`], or the experimental `no_gate`.
    pub fn with_ablation(mut self, name: &str) -> Result<Self> {
        let a = &mut self.ablations;
        match name {
            "full" => {}
            "limited_gnn" => a.limited_gnn = true,
            "association_heuristic" => a.association_heuristic = true,
            "no_appearance" => a.no_appearance = true,
            "const_variance" => a.const_variance = true,
            "scoring_heuristic" => a.scoring_heuristic = true,
            "simple_gate" => a.simple_gate = true,
            "mlp_node_updates" => a.mlp_node_updates = true,
            "blocks_1" => self.blocks = 1,
            "blocks_3" => self.blocks = 3,
            "no_residual" => a.no_residual = true,
            "no_gate" => a.no_gate = true,
            other => {
                return Err(Error::invalid(format!(
                    "unknown ablation {other:?}; expected one of {}",
                    ABLATION_NAMES.join(", ")
                )))
            }
        }
        Ok(self)
    }

    pub fn model_config(&self) -> ModelConfig {
        let a = &self.ablations;
        let w = &self.suite.world;
        ModelConfig {
            num_classes: w.num_classes,
            appearance_dim: w.appearance_dim,
            grid: w.grid,
            d: self.d,
            blocks: self.blocks,
            interleave_residuals: !a.no_residual,
            gated_aggregation: !a.mlp_node_updates,
            limited_gnn: a.limited_gnn,
            use_appearance: !a.no_appearance,
            const_variance: a.const_variance,
            association: if a.association_heuristic {
                AssociationMode::Heuristic
            } else {
                AssociationMode::Learned
            },
            scoring: if a.scoring_heuristic {
                ScoringMode::Heuristic
            } else {
                ScoringMode::Learned
            },
            gate: if a.no_gate {
                GateMode::None
            } else if a.simple_gate {
                GateMode::Simple
            } else {
                GateMode::Lstm
            },
            ..ModelConfig::default()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambdas: self.lambdas,
            frames: self.frames,
            ..LossConfig::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// Training sequences: suite samples for seeds `seed·2³² + i`.
    pub fn training_set(&self) -> Result<Vec<LabeledSequence>> {
        (0..self.train_sequences as u64)
            .map(|i| self.suite.sample(self.seed.wrapping_shl(32).wrapping_add(i)))
            .collect()
    }

    /// Evaluation sequences disjoint from [`training_set`](Self::training_set):
    /// seeds `seed·2³² + 2³¹ + i`.
    pub fn held_out_set(&self, n: usize) -> Result<Vec<LabeledSequence>> {
        (0..n as u64)
            .map(|i| self.suite.sample(self.seed.wrapping_shl(32).wrapping_add(1 << 31).wrapping_add(i)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: LossBreakdown,
}

pub fn write_loss_csv<W: Write>(curve: &[LossPoint], mut out: W) -> Result<()> {
    writeln!(out, "iteration,total,score,seg,match,init")?;
    for p in curve {
        let l = &p.loss;
        writeln!(out, "{},{},{},{},{},{}", p.iteration, l.total, l.score, l.seg, l.matching, l.init)?;
    }
    Ok(())
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = std::env::var("TRACKGRAPH_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Training state that can be advanced in several calls with the same
/// result as one long call.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub thresholds: Thresholds,
    pub curve: Vec<LossPoint>,
    adam: AdamState,
    data: Vec<LabeledSequence>,
    rng: ChaCha8Rng,
    pool: rayon::ThreadPool,
    iteration: usize,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`, trained on `data`.
    pub fn new(config: TrainConfig, data: Vec<LabeledSequence>) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(), config.seed)?;
        Self::from_model(model, config, data)
    }

    pub fn from_model(model: Model, config: TrainConfig, data: Vec<LabeledSequence>) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        Ok(Self {
            adam: AdamState::new(&model.store),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e),
            model,
            thresholds: Thresholds::default(),
            curve: Vec::new(),
            data,
            pool: worker_pool()?,
            iteration: 0,
            config,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Mean loss and summed, batch-normalized gradients over `batch`.
    /// Per-sequence work runs in parallel; results are combined in batch order.
    pub fn loss_and_grads(&self, batch: &[&LabeledSequence]) -> Result<(LossBreakdown, ParamGrads)> {
        let cfg = self.config.loss_config();
        let model = &self.model;
        let th = &self.thresholds;
        let results: Vec<Result<(LossBreakdown, ParamGrads)>> = self.pool.install(|| {
            batch
                .par_iter()
                .map(|seq| {
                    let u = unroll(model, &model.store, seq, &cfg, th, Tape::new())?;
                    let grads = u.memory.tape.backward(u.total)?.to_param_grads(&model.store);
                    Ok((u.breakdown, grads))
                })
                .collect()
        });
        let mut grads = ParamGrads::zeros(&model.store);
        let mut losses = Vec::with_capacity(batch.len());
        for r in results {
            let (l, g) = r?;
            grads.add_assign(&g);
            losses.push(l);
        }
        grads.scale(1.0 / batch.len() as f64);
        Ok((LossBreakdown::mean(&losses), grads))
    }

    /// Mean loss over `seqs` without updating anything.
    pub fn evaluate(&self, seqs: &[LabeledSequence]) -> Result<LossBreakdown> {
        let cfg = self.config.loss_config();
        let model = &self.model;
        let th = &self.thresholds;
        let losses: Vec<Result<LossBreakdown>> = self.pool.install(|| {
            seqs.par_iter()
                .map(|seq| Ok(unroll(model, &model.store, seq, &cfg, th, Tape::new())?.breakdown))
                .collect()
        });
        Ok(LossBreakdown::mean(&losses.into_iter().collect::<Result<Vec<_>>>()?))
    }

    /// Runs `iterations` optimizer steps. A non-finite loss or gradient
    /// aborts with the 1-based iteration index.
    pub fn run(&mut self, iterations: usize) -> Result<()> {
        let adam = self.config.adam();
        for _ in 0..iterations {
            self.iteration += 1;
            let b = self.config.batch_size.min(self.data.len());
            let mut idx = sample(&mut self.rng, self.data.len(), b).into_vec();
            idx.sort_unstable();
            let batch: Vec<&LabeledSequence> = idx.iter().map(|&i| &self.data[i]).collect();
            let diverged = Error::Divergence {
                iteration: self.iteration,
            };
            let (loss, mut grads) = match self.loss_and_grads(&batch) {
                Ok(r) => r,
                Err(e) if e.is_numeric() => return Err(diverged),
                Err(e) => return Err(e),
            };
            let norm = grads.norm();
            if !loss.total.is_finite() || !norm.is_finite() {
                return Err(diverged);
            }
            if let Some(clip) = self.config.grad_clip {
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            adam_step(&mut self.model.store, &grads, &mut self.adam, &adam)?;
            self.curve.push(LossPoint {
                iteration: self.iteration,
                loss,
            });
        }
        Ok(())
    }

    /// Runs until `config.iterations` steps have been taken in total.
    pub fn run_to_end(&mut self) -> Result<()> {
        let left = self.config.iterations.saturating_sub(self.iteration);
        self.run(left)
    }
}

pub const CHECKPOINT_FORMAT: &str = "trackgraph-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    /// Training configuration the parameters came from, if any.
    pub train: Option<TrainConfig>,
    pub iteration: usize,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, train: Option<&TrainConfig>, iteration: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: model.config.clone(),
            train: train.cloned(),
            iteration,
            params: model
                .store
                .iter()
                .map(|(_, name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = Model::new(self.model, 0)?;
        let mut src = crate::numcore::ParamStore::new();
        for p in self.params {
            src.add(p.name, Tensor::new(p.shape, p.data)?)?;
        }
        if src.len() != model.store.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, model expects {}",
                src.len(),
                model.store.len()
            )));
        }
        model.store.load_from(&src)?;
        Ok(model)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

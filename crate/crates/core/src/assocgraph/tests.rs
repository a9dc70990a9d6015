use super::*;
use crate::appearance::init_model;
use crate::geometry::Mask;
use crate::numcore::{grad_check, GradCheckOptions, Tensor};
use crate::synthworld::Provenance;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn det(scores: Vec<f64>, bbox: BBox, appearance: Vec<f64>) -> Detection {
    Detection {
        mask: Mask::ellipse(&bbox, 8),
        bbox,
        scores,
        appearance,
        source: Provenance::Unknown,
    }
}

fn small_config(d: usize, c: usize) -> ModelConfig {
    ModelConfig {
        d,
        num_classes: c,
        ..ModelConfig::default()
    }
}

#[test]
fn detection_embedding_sizes() {
    let d40 = det(vec![1.0 / 41.0; 41], BBox::new(0.5, 0.5, 1.0, 1.0), vec![0.0]);
    assert_eq!(detection_embedding(&d40).len(), 45);
    let d4 = det(vec![0.2; 5], BBox::new(0.5, 0.5, 1.0, 1.0), vec![0.0]);
    assert_eq!(detection_embedding(&d4), vec![0.2, 0.2, 0.2, 0.2, 0.2, 0.5, 0.5, 1.0, 1.0]);
}

#[test]
fn edge_feature_cases() {
    let x = vec![0.1, -0.3, 0.2];
    let m = init_model(&x, 0.001).unwrap();
    let b = BBox::new(0.4, 0.4, 0.2, 0.2);
    let d = det(vec![0.6, 0.3, 0.1], b, x.clone());
    let f = edge_features(Some(&m), &b, &d).unwrap();
    let max_ll = -0.5 * (2.0 * std::f64::consts::PI * 0.001).ln();
    assert!((f[0] - max_ll).abs() < 1e-12);
    assert_eq!(f[1], 1.0);
    let far = BBox::new(0.9, 0.9, 0.1, 0.1);
    assert_eq!(edge_features(Some(&m), &far, &d).unwrap()[1], 0.0);
    assert_eq!(edge_features(None, &b, &d).unwrap()[0], 0.0);
    assert_eq!(empty_edge_features(&d), [0.0, 0.6]);
}

#[test]
fn corner_boxes_iou() {
    let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
    let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
    assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
}

#[test]
fn layer_shapes_match_reference_architecture() {
    let cfg = ModelConfig {
        d: 128,
        num_classes: 40,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = GnnParams::new(&mut store, &cfg, &mut rng).unwrap();
    let fan_in = |l: &Linear| store.get(l.weight).shape()[1];
    assert_eq!(fan_in(&p.blocks[0].f_edge.first), 175);
    assert_eq!(fan_in(&p.blocks[0].f_track.first), 256);
    assert_eq!(fan_in(&p.blocks[0].f_empty.first), 256);
    assert_eq!(fan_in(&p.blocks[0].f_det.first), 173);
    assert_eq!(fan_in(&p.blocks[1].f_edge.first), 384);
    assert_eq!(fan_in(&p.blocks[1].f_det.first), 256);
    let g = p.blocks[0].g_track.unwrap();
    assert_eq!(store.get(g.first.weight).shape(), &[32, 128]);
    assert_eq!(store.get(g.second.weight).shape(), &[128, 32]);
    let r = p.blocks[0].edge_residual.unwrap();
    assert_eq!(store.get(r.down.weight).shape(), &[32, 128]);
    assert!(p.blocks[1].edge_residual.is_none());
    assert_eq!(p.residuals.len(), 2);
}

/// Random graph with `m` real tracks and `n` detections in the leading slots.
fn random_batch(cfg: &ModelConfig, m: usize, n: usize, rng: &mut ChaCha8Rng) -> GraphBatch {
    let mut b = GraphBatch::new(cfg.d, cfg.det_in(), EDGE_FEATURES);
    let v = |k: usize, rng: &mut ChaCha8Rng| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    for s in 1..=m {
        b.set_track(s, &v(cfg.d, rng)).unwrap();
    }
    for s in 0..n {
        b.set_detection(s, &v(cfg.det_in(), rng)).unwrap();
    }
    for t in 0..=m {
        for s in 0..n {
            b.set_edge(t, s, &v(EDGE_FEATURES, rng)).unwrap();
        }
    }
    b
}

#[test]
fn zero_params_give_zero_embeddings() {
    let cfg = small_config(8, 3);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = GnnParams::new(&mut store, &cfg, &mut rng).unwrap();
    store.set_flat(&vec![0.0; store.num_scalars()]).unwrap();
    let out = gnn_forward(&random_batch(&cfg, 2, 3, &mut rng), &p, &store).unwrap();
    assert!(out.tracks.data().iter().all(|&v| v == 0.0));
    assert!(out.detections.data().iter().all(|&v| v == 0.0));
    assert!(out.edges.data().iter().all(|&v| v == 0.0));
    let mp = match_probabilities(&out, &p, &store).unwrap();
    for s in 0..MAX_TRACKS {
        for n in 0..MAX_DETECTIONS {
            let want = if s < 2 && n < 3 { 0.5 } else { 0.0 };
            assert_eq!(mp.data()[s * MAX_DETECTIONS + n], want);
        }
    }
    let ip = init_probabilities(&out, &p, &store).unwrap();
    assert_eq!(&ip[..4], &[0.5, 0.5, 0.5, 0.0]);
}

#[test]
fn zero_gate_halves_the_sum() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gate = Mlp2::new(&mut store, "g", 4, 1, 4, &mut rng).unwrap();
    store.set_flat(&vec![0.0; store.num_scalars()]).unwrap();
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::matrix(3, 4, (0..12).map(|i| i as f64).collect()));
    let s = gated_sum(&mut tape, &store, Some(&gate), e, vec![0, 1, 0], 2).unwrap();
    assert_eq!(tape.value(s).data(), &[4.0, 5.0, 6.0, 7.0, 2.0, 2.5, 3.0, 3.5]);
}

mod oracle {
    use super::*;

    pub fn lin(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
        let w = store.get(l.weight);
        let b = store.get(l.bias);
        (0..w.rows())
            .map(|o| {
                let mut acc = 0.0;
                for i in 0..x.len() {
                    acc += w.row(o)[i] * x[i];
                }
                acc + b.data()[o]
            })
            .collect()
    }

    pub fn relu(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|x| x.max(0.0)).collect()
    }

    fn sig(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
    }

    fn update(store: &ParamStore, f: &NodeUpdate, x: &[f64]) -> Vec<f64> {
        let h = relu(lin(store, &f.first, x));
        match &f.second {
            Some(s) => relu(lin(store, s, &h)),
            None => h,
        }
    }

    fn residual(store: &ParamStore, r: &Residual, x: &[f64]) -> Vec<f64> {
        let h = relu(lin(store, &r.down, x));
        let h = relu(lin(store, &r.mid, &h));
        let h = lin(store, &r.up, &h);
        relu(x.iter().zip(h).map(|(a, b)| a + b).collect())
    }

    fn gated(store: &ParamStore, g: &Option<Mlp2>, e: &[f64]) -> Vec<f64> {
        match g {
            Some(g) => {
                let a = sig(lin(store, &g.second, &relu(lin(store, &g.first, e))));
                a.iter().zip(e).map(|(a, e)| a * e).collect()
            }
            None => e.to_vec(),
        }
    }

    fn cat(parts: &[&[f64]]) -> Vec<f64> {
        parts.iter().flat_map(|p| p.iter().copied()).collect()
    }

    fn add_into(acc: &mut [f64], v: &[f64]) {
        for (a, b) in acc.iter_mut().zip(v) {
            *a += b;
        }
    }

    /// Direct evaluation with nested loops. `tracks[0]` is the empty track.
    /// Returns (tracks, dets, edges[i][n], match[m][n], init[n]).
    #[allow(clippy::type_complexity)]
    pub fn forward(
        store: &ParamStore,
        p: &GnnParams,
        mut tracks: Vec<Vec<f64>>,
        mut dets: Vec<Vec<f64>>,
        mut edges: Vec<Vec<Vec<f64>>>,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>, Vec<f64>) {
        let m1 = tracks.len();
        let n = dets.len();
        for (k, b) in p.blocks.iter().enumerate() {
            let mut e_new = vec![vec![Vec::new(); n]; m1];
            for i in 0..m1 {
                for j in 0..n {
                    let mut e = update(store, &b.f_edge, &cat(&[&edges[i][j], &tracks[i], &dets[j]]));
                    if let Some(r) = &b.edge_residual {
                        e = residual(store, r, &e);
                    }
                    e_new[i][j] = e;
                }
            }
            let d = e_new.first().and_then(|r| r.first()).map_or(store.get(b.f_track.first.bias).len(), |e| e.len());
            let mut t_new = Vec::new();
            for i in 0..m1 {
                let (g, f) = if i == 0 { (&b.g_empty, &b.f_empty) } else { (&b.g_track, &b.f_track) };
                let mut agg = vec![0.0; d];
                for j in 0..n {
                    add_into(&mut agg, &gated(store, g, &e_new[i][j]));
                }
                t_new.push(update(store, f, &cat(&[&tracks[i], &agg])));
            }
            let mut d_new = Vec::new();
            for j in 0..n {
                let mut agg = vec![0.0; d];
                for i in 0..m1 {
                    add_into(&mut agg, &gated(store, &b.g_det, &e_new[i][j]));
                }
                d_new.push(update(store, &b.f_det, &cat(&[&dets[j], &agg])));
            }
            edges = e_new;
            tracks = t_new;
            dets = d_new;
            if let Some(r) = p.residuals.get(k) {
                edges = edges.iter().map(|row| row.iter().map(|e| residual(store, &r.edges, e)).collect()).collect();
                tracks = tracks.iter().map(|t| residual(store, &r.tracks, t)).collect();
                dets = dets.iter().map(|x| residual(store, &r.dets, x)).collect();
            }
        }
        let matches = (1..m1)
            .map(|i| (0..n).map(|j| sig(lin(store, &p.match_head, &edges[i][j]))[0]).collect())
            .collect();
        let inits = (0..n).map(|j| sig(lin(store, &p.init_head, &edges[0][j]))[0]).collect();
        (tracks, dets, edges, matches, inits)
    }
}

#[test]
fn matches_straight_line_oracle() {
    for gated in [true, false] {
        let cfg = ModelConfig {
            gated_aggregation: gated,
            ..small_config(8, 3)
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = GnnParams::new(&mut store, &cfg, &mut rng).unwrap();
        let (m, n) = (2, 3);
        let batch = random_batch(&cfg, m, n, &mut rng);
        let out = gnn_forward(&batch, &p, &store).unwrap();
        let tracks: Vec<Vec<f64>> = (0..=m).map(|s| batch.tracks.row(s).to_vec()).collect();
        let dets: Vec<Vec<f64>> = (0..n).map(|s| batch.detections.row(s).to_vec()).collect();
        let edges: Vec<Vec<Vec<f64>>> = (0..=m)
            .map(|s| (0..n).map(|j| batch.edges.row(GraphBatch::edge_row(s, j)).to_vec()).collect())
            .collect();
        let (t, d, e, mp, ip) = oracle::forward(&store, &p, tracks, dets, edges);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        for s in 0..=m {
            assert!(close(out.tracks.row(s), &t[s]), "track {s}");
            for j in 0..n {
                assert!(close(out.edges.row(GraphBatch::edge_row(s, j)), &e[s][j]));
            }
        }
        for j in 0..n {
            assert!(close(out.detections.row(j), &d[j]));
        }
        let probs = match_probabilities(&out, &p, &store).unwrap();
        for i in 0..m {
            assert!(close(&probs.row(i)[..n], &mp[i]));
        }
        assert!(close(&init_probabilities(&out, &p, &store).unwrap()[..n], &ip));
        assert!(out.inactive_rows_zero());
    }
}

#[test]
fn padding_slots_do_not_change_outputs() {
    let cfg = small_config(8, 3);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = GnnParams::new(&mut store, &cfg, &mut rng).unwrap();
    let dense = random_batch(&cfg, 3, 4, &mut rng);
    // same content scattered over non-contiguous slots
    let track_slots = [2, 7, 20];
    let det_slots = [1, 5, 6, 15];
    let mut sparse = GraphBatch::new(cfg.d, cfg.det_in(), EDGE_FEATURES);
    for (k, &s) in track_slots.iter().enumerate() {
        sparse.set_track(s, dense.tracks.row(k + 1)).unwrap();
    }
    for (k, &s) in det_slots.iter().enumerate() {
        sparse.set_detection(s, dense.detections.row(k)).unwrap();
    }
    let all_tracks = [0usize, 2, 7, 20];
    for (i, &s) in all_tracks.iter().enumerate() {
        for (j, &d) in det_slots.iter().enumerate() {
            sparse.set_edge(s, d, dense.edges.row(GraphBatch::edge_row(i, j))).unwrap();
        }
    }
    let a = gnn_forward(&dense, &p, &store).unwrap();
    let b = gnn_forward(&sparse, &p, &store).unwrap();
    for (i, &s) in all_tracks.iter().enumerate() {
        assert!(Tensor::row_vector(a.tracks.row(i).to_vec()).bit_eq(&Tensor::row_vector(b.tracks.row(s).to_vec())));
        for (j, &d) in det_slots.iter().enumerate() {
            assert_eq!(
                a.edges.row(GraphBatch::edge_row(i, j)).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.edges.row(GraphBatch::edge_row(s, d)).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
    assert!(b.inactive_rows_zero());
}

#[test]
fn limited_mode_is_well_formed() {
    let cfg = ModelConfig {
        limited_gnn: true,
        ..small_config(8, 3)
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = GnnParams::new(&mut store, &cfg, &mut rng).unwrap();
    let batch = random_batch(&cfg, 3, 2, &mut rng);
    let out = gnn_forward(&batch, &p, &store).unwrap();
    assert!(out.inactive_rows_zero());
    assert_eq!(out.edges, batch.edges);
    let mp = match_probabilities(&out, &p, &store).unwrap();
    assert!(mp.data().iter().all(|&v| (0.0..1.0).contains(&v)));
}

#[test]
fn empty_graph_runs() {
    let cfg = small_config(8, 3);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = GnnParams::new(&mut store, &cfg, &mut rng).unwrap();
    for (m, n) in [(0, 0), (2, 0), (0, 3)] {
        let out = gnn_forward(&random_batch(&cfg, m, n, &mut rng), &p, &store).unwrap();
        assert!(out.inactive_rows_zero());
    }
}

#[test]
fn non_finite_input_names_block() {
    let cfg = small_config(8, 3);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = GnnParams::new(&mut store, &cfg, &mut rng).unwrap();
    let id = p.blocks[0].f_edge.first.bias;
    store.get_mut(id).data_mut()[0] = f64::NAN;
    let err = gnn_forward(&random_batch(&cfg, 1, 1, &mut rng), &p, &store).unwrap_err();
    assert!(err.to_string().contains("block 1"), "{err}");
}

#[test]
fn gnn_gradients_match_finite_differences() {
    let cfg = small_config(4, 2);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let p = GnnParams::new(&mut store, &cfg, &mut rng).unwrap();
    let batch = random_batch(&cfg, 2, 2, &mut rng);
    let rows = |t: &Tensor, r: std::ops::Range<usize>| {
        let c = t.cols();
        Tensor::matrix(r.len(), c, t.data()[r.start * c..r.end * c].to_vec())
    };
    let tracks = rows(&batch.tracks, 0..3);
    let dets = rows(&batch.detections, 0..2);
    let mut edges = Vec::new();
    for s in 0..3 {
        for j in 0..2 {
            edges.extend_from_slice(batch.edges.row(GraphBatch::edge_row(s, j)));
        }
    }
    let edges = Tensor::matrix(6, 2, edges);
    let report = grad_check(&store, &GradCheckOptions::default(), |s, tape| {
        let input = GraphInput {
            tracks: tape.constant(tracks.clone()),
            dets: tape.constant(dets.clone()),
            edges: tape.constant(edges.clone()),
            num_tracks: 2,
            num_dets: 2,
        };
        let out = p.forward(tape, s, &input)?;
        let a = tape.sum(out.match_prob);
        let b = tape.sum(out.init_prob);
        let t = tape.tanh(out.tracks);
        let c = tape.sum(t);
        tape.add_all(&[a, b, c])
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(report.checked > 100);
}

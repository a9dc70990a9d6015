use super::*;
use crate::assocgraph::{gnn_forward, GraphBatch};
use crate::numcore::{grad_check, GradCheckOptions};
use crate::recurrence::gate_step;
use crate::synthworld::Provenance;
use rand::{Rng, SeedableRng};

const GRID: usize = 8;

fn cfg() -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        appearance_dim: 4,
        grid: GRID,
        d: 8,
        ..ModelConfig::default()
    }
}

fn det(cx: f64, cy: f64, class: usize, conf: f64, appearance: Vec<f64>) -> Detection {
    let bbox = BBox::new(cx, cy, 0.3, 0.3);
    let mut scores = vec![0.0; 4];
    scores[class] = conf;
    scores[3] = 1.0 - conf;
    Detection {
        bbox,
        scores,
        mask: Mask::ellipse(&bbox, GRID),
        appearance,
        source: Provenance::Unknown,
    }
}

fn zeroed(model: &mut Model) {
    let n = model.store.num_scalars();
    model.store.set_flat(&vec![0.0; n]).unwrap();
}

fn set(model: &mut Model, name: &str, values: &[f64]) {
    let id = model.store.id(name).unwrap();
    model.store.get_mut(id).data_mut().copy_from_slice(values);
}

#[test]
fn new_track_from_single_detection() {
    let mut model = Model::new(cfg(), 1).unwrap();
    zeroed(&mut model);
    let mut mem = TrackMemory::new();
    let out = step(&mut mem, &[det(0.5, 0.5, 1, 0.9, vec![0.1, 0.2, 0.3, 0.4])], &model, &Thresholds::default(), Mode::Infer).unwrap();
    assert_eq!(out.init_values, vec![0.5]);
    assert_eq!(out.spawned, vec![(0, 0)]);
    assert_eq!(mem.tracks.len(), 1);
    let app = mem.appearance(0).unwrap();
    assert_eq!(app.mu, vec![0.1, 0.2, 0.3, 0.4]);
    assert_eq!(app.sigma, vec![0.001; 4]);
    assert_eq!(mem.tracks[0].birth_frame, 0);
    assert!(mem.tracks[0].records[0].active);
    // zero score head: uniform distribution
    for p in &mem.tracks[0].records[0].scores {
        assert!((p - 0.25).abs() < 1e-15);
    }
    // zero mask head: every logit ties with background
    assert!(out.instance_map.iter().all(Option::is_none));
    assert_eq!(mem.tracks[0].records[0].mask.as_ref().unwrap().count(), 0);
}

#[test]
fn train_threshold_is_stricter() {
    let mut model = Model::new(cfg(), 1).unwrap();
    zeroed(&mut model);
    // init probability σ(−1) ≈ 0.269 lies between the two thresholds
    set(&mut model, "gnn.init.bias", &[-1.0]);
    let frame = [det(0.5, 0.5, 1, 0.9, vec![0.0; 4])];
    let mut mem = TrackMemory::new();
    step(&mut mem, &frame, &model, &Thresholds::default(), Mode::Train).unwrap();
    assert!(mem.tracks.is_empty());
    step(&mut mem, &frame, &model, &Thresholds::default(), Mode::Infer).unwrap();
    assert_eq!(mem.tracks.len(), 1);
}

#[test]
fn track_without_detections_goes_inactive_but_advances() {
    let model = Model::new(cfg(), 2).unwrap();
    let mut mem = TrackMemory::new();
    let th = Thresholds {
        init_infer: 0.0,
        ..Thresholds::default()
    };
    step(&mut mem, &[det(0.4, 0.4, 0, 0.8, vec![0.5, -0.5, 0.2, 0.0])], &model, &th, Mode::Infer).unwrap();
    assert_eq!(mem.tracks.len(), 1);
    let before = mem.recurrent(0);
    let app_before = mem.appearance(0).unwrap();

    // oracle: GNN on the lone track, then one gate step
    let mut batch = GraphBatch::new(8, model.config.det_in(), EDGE_FEATURES);
    batch.set_track(1, &before.y).unwrap();
    let tau = gnn_forward(&batch, &model.gnn, &model.store).unwrap();
    let want = gate_step(model.lstm.as_ref().unwrap(), &model.store, tau.tracks.row(1), &before).unwrap();

    let out = step(&mut mem, &[], &model, &th, Mode::Infer).unwrap();
    assert_eq!(out.matches, vec![None]);
    let after = mem.recurrent(0);
    for (a, b) in after.y.iter().zip(&want.y) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_ne!(after.y, before.y);
    assert_eq!(mem.appearance(0).unwrap(), app_before);
    let rec = &mem.tracks[0].records[1];
    assert!(!rec.active && rec.bbox.is_none() && rec.mask.is_none());
    assert!((rec.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

fn limited_cfg() -> ModelConfig {
    ModelConfig {
        limited_gnn: true,
        use_appearance: false,
        ..cfg()
    }
}

#[test]
fn best_match_wins_and_adopts_box() {
    let mut model = Model::new(limited_cfg(), 3).unwrap();
    // p = σ(w·IoU + b): IoU 1 → 0.9, IoU 0 → 0.2
    let b = (0.2f64 / 0.8).ln();
    let w = (0.9f64 / 0.1).ln() - b;
    set(&mut model, "gnn.match.weight", &[0.0, w]);
    set(&mut model, "gnn.match.bias", &[b]);
    let th = Thresholds {
        init_infer: 0.0,
        ..Thresholds::default()
    };
    let mut mem = TrackMemory::new();
    step(&mut mem, &[det(0.3, 0.3, 0, 0.9, vec![0.0; 4])], &model, &th, Mode::Infer).unwrap();
    let no_init = Thresholds {
        init_infer: 1.1,
        ..th
    };
    let far = det(0.8, 0.8, 0, 0.9, vec![0.0; 4]);
    let moved = det(0.3, 0.3, 0, 0.7, vec![0.0; 4]);
    let out = step(&mut mem, &[moved.clone(), far.clone()], &model, &no_init, Mode::Infer).unwrap();
    assert!((out.match_values[0] - 0.9).abs() < 1e-12);
    assert!((out.match_values[1] - 0.2).abs() < 1e-12);
    assert_eq!(out.matches, vec![Some(0)]);
    assert_eq!(mem.tracks[0].records[1].bbox, Some(moved.bbox));
    assert_eq!(mem.tracks[0].last_box, moved.bbox);

    // identical detections tie; the lower index wins
    let out = step(&mut mem, &[moved.clone(), moved], &model, &no_init, Mode::Infer).unwrap();
    assert_eq!(out.matches, vec![Some(0)]);
}

#[test]
fn detection_overflow_keeps_best_and_tracks_cap_at_capacity() {
    let mut model = Model::new(cfg(), 4).unwrap();
    zeroed(&mut model);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frame: Vec<Detection> = (0..20)
        .map(|i| det(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), 0, 0.3 + 0.02 * i as f64, vec![0.0; 4]))
        .collect();
    let mut mem = TrackMemory::new();
    let out = step(&mut mem, &frame, &model, &Thresholds::default(), Mode::Infer).unwrap();
    assert_eq!(out.kept, (4..20).collect::<Vec<_>>());
    assert_eq!(mem.tracks.len(), 16);
    step(&mut mem, &frame, &model, &Thresholds::default(), Mode::Infer).unwrap();
    assert_eq!(mem.tracks.len(), MAX_TRACKS);
    let out = step(&mut mem, &frame, &model, &Thresholds::default(), Mode::Infer).unwrap();
    assert!(out.spawned.is_empty());
    let ids: Vec<u32> = mem.tracks.iter().map(|t| t.id).collect();
    assert_eq!(ids, (0..MAX_TRACKS as u32).collect::<Vec<_>>());
}

#[test]
fn malformed_detection_is_rejected() {
    let model = Model::new(cfg(), 5).unwrap();
    let mut bad = det(0.5, 0.5, 0, 0.9, vec![0.0; 4]);
    bad.appearance.push(1.0);
    assert!(step(&mut TrackMemory::new(), &[bad], &model, &Thresholds::default(), Mode::Infer).is_err());
    let mut bad = det(0.5, 0.5, 0, 0.9, vec![0.0; 4]);
    bad.mask = Mask::empty(GRID + 1);
    assert!(step(&mut TrackMemory::new(), &[bad], &model, &Thresholds::default(), Mode::Infer).is_err());
}

fn random_frames(rng: &mut ChaCha8Rng, frames: usize) -> Vec<Vec<Detection>> {
    (0..frames)
        .map(|_| {
            (0..rng.gen_range(0..5))
                .map(|_| {
                    let app = (0..4).map(|_| rng.gen_range(-0.1..0.1)).collect();
                    det(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0..3), rng.gen_range(0.2..1.0), app)
                })
                .collect()
        })
        .collect()
}

fn check_structure(mem: &TrackMemory, frames: usize, num_classes: usize) {
    let mut ids: Vec<u32> = mem.tracks.iter().map(|t| t.id).collect();
    ids.dedup();
    assert_eq!(ids.len(), mem.tracks.len());
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    for tr in &mem.tracks {
        assert_eq!(tr.records.len(), frames - tr.birth_frame);
        for r in &tr.records {
            assert_eq!(r.active, r.bbox.is_some());
            assert_eq!(r.active, r.mask.is_some());
            assert_eq!(r.scores.len(), num_classes + 1);
            assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    // each cell owned at most once per frame
    for t in 0..frames {
        let mut owned = vec![0; GRID * GRID];
        for tr in &mem.tracks {
            if let Some(m) = tr.records.iter().find(|r| r.t == t).and_then(|r| r.mask.as_ref()) {
                for (o, &c) in owned.iter_mut().zip(m.cells()) {
                    *o += c as usize;
                }
            }
        }
        assert!(owned.iter().all(|&o| o <= 1));
    }
}

#[test]
fn ablation_configurations_keep_invariants() {
    let variants = [
        cfg(),
        ModelConfig {
            limited_gnn: true,
            association: AssociationMode::Heuristic,
            scoring: ScoringMode::Heuristic,
            ..cfg()
        },
        ModelConfig {
            gate: GateMode::Simple,
            gated_aggregation: false,
            interleave_residuals: false,
            ..cfg()
        },
        ModelConfig {
            use_appearance: false,
            blocks: 1,
            ..cfg()
        },
        ModelConfig {
            const_variance: true,
            blocks: 3,
            ..cfg()
        },
    ];
    for (k, c) in variants.into_iter().enumerate() {
        let model = Model::new(c, 10 + k as u64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let frames = random_frames(&mut rng, 8);
        let mem = track_sequence(&model, &frames, &Thresholds::default()).unwrap();
        check_structure(&mem, 8, 3);
        let again = track_sequence(&model, &frames, &Thresholds::default()).unwrap();
        let recs = |m: &TrackMemory| m.tracks.iter().map(|t| t.records.clone()).collect::<Vec<_>>();
        assert_eq!(recs(&mem), recs(&again), "variant {k} not deterministic");
    }
}

#[test]
fn constant_variance_keeps_sigma() {
    let model = Model::new(
        ModelConfig {
            const_variance: true,
            ..cfg()
        },
        6,
    )
    .unwrap();
    let th = Thresholds {
        init_infer: 0.0,
        match_active: 0.0,
        ..Thresholds::default()
    };
    let mut mem = TrackMemory::new();
    let d = det(0.5, 0.5, 0, 0.9, vec![0.0; 4]);
    step(&mut mem, &[d.clone()], &model, &th, Mode::Infer).unwrap();
    let mut moved = d;
    moved.appearance = vec![0.3; 4];
    let out = step(&mut mem, &[moved], &model, &th, Mode::Infer).unwrap();
    assert_eq!(out.matches, vec![Some(0)]);
    let app = mem.appearance(0).unwrap();
    assert_eq!(app.sigma, vec![0.001; 4]);
    assert!(app.mu.iter().all(|&m| m > 0.0 && m < 0.3));
}

#[test]
fn score_head_gradients_match_finite_differences() {
    let model = Model::new(cfg(), 7).unwrap();
    let head = model.score.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y = Tensor::matrix(3, 8, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let report = grad_check(&model.store, &GradCheckOptions::default(), |s, tape| {
        let y = tape.constant(y.clone());
        let l = head.forward(tape, s, y)?;
        let p = tape.softmax(l);
        let p = tape.ln(p);
        tape.dot_const(p, Tensor::matrix(3, 4, (0..12).map(|i| (i % 5) as f64 - 1.5).collect()))
    })
    .unwrap();
    assert!(report.checked > 0);
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

/// Direct nested-loop evaluation of the mask network for one track.
fn mask_oracle(model: &Model, y: &[f64], mask: &Mask, bbox: &BBox) -> Vec<f64> {
    let s = &model.store;
    let get = |id| s.get(id).data().to_vec();
    let (wp, bp) = (get(model.mask.proj.weight), get(model.mask.proj.bias));
    let (w1, b1) = (get(model.mask.conv1.weight), get(model.mask.conv1.bias));
    let (w2, b2) = (get(model.mask.conv2.weight), get(model.mask.conv2.bias));
    let p: Vec<f64> = (0..16)
        .map(|o| (bp[o] + (0..y.len()).map(|k| wp[o * y.len() + k] * y[k]).sum::<f64>()).max(0.0))
        .collect();
    let rect = Mask::rectangle(bbox, GRID);
    let input = |r: isize, c: isize, ch: usize| -> f64 {
        if r < 0 || c < 0 || r >= GRID as isize || c >= GRID as isize {
            return 0.0;
        }
        let i = r as usize * GRID + c as usize;
        match ch {
            0..=15 => p[ch],
            16 => f64::from(mask.cells()[i]),
            _ => f64::from(rect.cells()[i]),
        }
    };
    let mut hidden = vec![0.0; GRID * GRID * 16];
    for r in 0..GRID as isize {
        for c in 0..GRID as isize {
            for o in 0..16 {
                let mut acc = b1[o];
                for off in 0..9 {
                    for ch in 0..18 {
                        acc += w1[o * 162 + off * 18 + ch] * input(r + off as isize / 3 - 1, c + off as isize % 3 - 1, ch);
                    }
                }
                hidden[(r as usize * GRID + c as usize) * 16 + o] = acc.max(0.0);
            }
        }
    }
    let h = |r: isize, c: isize, ch: usize| -> f64 {
        if r < 0 || c < 0 || r >= GRID as isize || c >= GRID as isize {
            0.0
        } else {
            hidden[(r as usize * GRID + c as usize) * 16 + ch]
        }
    };
    let mut out = Vec::with_capacity(GRID * GRID);
    for r in 0..GRID as isize {
        for c in 0..GRID as isize {
            let mut acc = b2[0];
            for off in 0..9 {
                for ch in 0..16 {
                    acc += w2[off * 16 + ch] * h(r + off as isize / 3 - 1, c + off as isize % 3 - 1, ch);
                }
            }
            out.push(acc);
        }
    }
    out
}

#[test]
fn mask_network_matches_direct_convolution() {
    let model = Model::new(cfg(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tracks: Vec<(Vec<f64>, BBox)> = (0..2)
        .map(|k| {
            let y = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (y, BBox::new(0.4 + 0.2 * k as f64, 0.5, 0.5, 0.4))
        })
        .collect();
    let masks: Vec<Mask> = tracks.iter().map(|(_, b)| Mask::ellipse(b, GRID)).collect();
    let mut tape = Tape::new();
    let inputs: Vec<MaskInput<'_>> = tracks
        .iter()
        .zip(&masks)
        .map(|((y, b), m)| MaskInput {
            embedding: tape.constant(Tensor::matrix(1, 8, y.clone())),
            mask: m,
            bbox: b,
        })
        .collect();
    let logits = model.mask.forward(&mut tape, &model.store, &inputs, GRID).unwrap();
    let got = tape.value(logits).clone();
    assert_eq!(got.shape(), &[GRID * GRID, 2]);
    let want: Vec<Vec<f64>> = tracks.iter().zip(&masks).map(|((y, b), m)| mask_oracle(&model, y, m, b)).collect();
    for cell in 0..GRID * GRID {
        for k in 0..2 {
            assert!((got.row(cell)[k] - want[k][cell]).abs() < 1e-12);
        }
    }
    // contested cells go to the higher logit, background on ties or when all are negative
    let owners = resolve_pixels(&got);
    for cell in 0..GRID * GRID {
        let (a, b) = (want[0][cell], want[1][cell]);
        let expect = if a.max(b) <= 0.0 {
            None
        } else if b > a {
            Some(1)
        } else {
            Some(0)
        };
        assert_eq!(owners[cell], expect);
    }
}

#[test]
fn positive_logits_inside_mask_reproduce_it() {
    let mut model = Model::new(cfg(), 9).unwrap();
    zeroed(&mut model);
    let w1 = model.store.id("mask.conv1.weight").unwrap();
    model.store.get_mut(w1).data_mut()[4 * INPUT_CHANNELS + EMBED_CHANNELS] = 10.0;
    set(&mut model, "mask.conv1.bias", &{
        let mut b = vec![0.0; 16];
        b[0] = -5.0;
        b
    });
    let w2 = model.store.id("mask.conv2.weight").unwrap();
    model.store.get_mut(w2).data_mut()[4 * HIDDEN_CHANNELS] = 1.0;
    set(&mut model, "mask.conv2.bias", &[-1.0]);
    let d = det(0.5, 0.5, 0, 0.9, vec![0.0; 4]);
    let mut mem = TrackMemory::new();
    let out = step(&mut mem, &[d.clone()], &model, &Thresholds::default(), Mode::Infer).unwrap();
    let map: Vec<u8> = out.instance_map.iter().map(|o| u8::from(o.is_some())).collect();
    assert_eq!(map, d.mask.cells());
    assert_eq!(mem.tracks[0].records[0].mask.as_ref(), Some(&d.mask));
}

#[test]
fn tracks_file_round_trip() {
    let model = Model::new(cfg(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let frames = random_frames(&mut rng, 5);
    let mem = track_sequence(&model, &frames, &Thresholds::default()).unwrap();
    let file = TracksFile::from_memory(&mem, GRID);
    let mut buf = Vec::new();
    write_tracks(&file, &mut buf).unwrap();
    let back = read_tracks(buf.as_slice()).unwrap();
    assert_eq!(back, file);
    let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
    assert!(v["tracks"].is_array());
}

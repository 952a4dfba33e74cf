use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{adapter_delta, encoder_forward, head_loss, loss_and_grad, MaskedBatch, Rows};
use super::*;

fn random_windows(rng: &mut ChaCha8Rng, n: usize, len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((n * len, dim), |_| rng.random_range(0.0..1.0))
}

fn tiny_setup(seed: u64) -> (BackboneParams<f64>, AdapterParams<f64>, MaskedBatch<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig::tiny();
    let mut p = BackboneParams::<f64>::init(cfg, &mut rng);
    // non-trivial layer-norm parameters and biases so every path carries gradient
    for t in p.tensors_mut() {
        if t.name.contains(".b") || t.name.contains("ln") || t.name.starts_with("b_") {
            for v in t.data.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let mut a = AdapterParams::<f64>::init(cfg.d_model, &mut rng);
    a.w2 = Array2::from_shape_fn((cfg.d_model, cfg.d_model), |_| rng.random_range(-0.3..0.3));
    a.b1 = Array1::from_shape_fn(cfg.d_model, |_| rng.random_range(-0.3..0.3));
    let x = random_windows(&mut rng, 3, cfg.window_len, cfg.feature_dim);
    let batch = MaskedBatch::new(x, vec![5, 47, 0], cfg.window_len);
    (p, a, batch)
}

#[test]
fn gradients_match_finite_differences() {
    let (p, a, batch) = tiny_setup(7);
    let report = gradient_check(&p, Some(&a), &batch, 1e-4);
    for (name, e) in &report.per_tensor {
        assert!(*e < 1e-4, "{name}: {e}");
    }
    assert!(report.n_checked > 3000);
    let plain = gradient_check(&p, None, &batch, 1e-4);
    assert!(plain.max_rel_error < 1e-4, "{:?}", plain.per_tensor);
}

#[test]
fn reduced_last_layer_matches_full_forward() {
    let (p, _, batch) = tiny_setup(3);
    let mut cfg = ModelConfig::tiny();
    cfg.n_layers = 2;
    let p2 = BackboneParams::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(9));
    for params in [&p, &p2] {
        let (full, _) = encoder_forward(params, &batch.x, 3, Rows::All);
        let (one, _) = encoder_forward(params, &batch.x, 3, Rows::One(batch.mask.clone()));
        for (w, &m) in batch.mask.iter().enumerate() {
            for j in 0..full.ncols() {
                assert!((full[(w * 48 + m, j)] - one[(w, j)]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn degenerate_forward_is_projection_plus_position() {
    let cfg = ModelConfig::default();
    let mut p = BackboneParams::<f32>::zeros(cfg);
    for l in &mut p.layers {
        l.ln1_g.fill(1.0);
        l.ln2_g.fill(1.0);
    }
    for i in 0..cfg.feature_dim {
        p.w_in[(i, i)] = 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array2::from_shape_fn((48, 8), |_| rng.random_range(0.0f32..1.0));
    let h = encode(&p, &x).unwrap();
    for pos in 0..48 {
        for j in 0..64 {
            let expected = if j < 8 { x[(pos, j)] } else { 0.0 } + p.pos[(pos, j)];
            assert!((h[(pos, j)] - expected).abs() < 1e-6);
        }
    }
}

#[test]
fn encoding_is_deterministic_and_position_aware() {
    let p = BackboneParams::<f32>::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(2));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Array2::from_shape_fn((48, 8), |_| rng.random_range(0.0f32..1.0));
    let a = encode(&p, &x).unwrap();
    let b = encode(&p, &x.clone()).unwrap();
    assert_eq!(a, b);
    let mut swapped = x.clone();
    let r3 = x.row(3).to_owned();
    swapped.row_mut(3).assign(&x.row(10));
    swapped.row_mut(10).assign(&r3);
    assert_ne!(encode(&p, &swapped).unwrap(), a);
    assert!(encode(&p, &x.slice(s![..47, ..]).to_owned()).is_err());
    let mut bad = p.clone();
    bad.b_in[0] = f32::NAN;
    assert!(encode(&bad, &x).is_err());
}

#[test]
fn adapter_residual_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = Array2::from_shape_fn((5, 64), |_| rng.random_range(-1.0f32..1.0));
    let zero_tail = AdapterParams::<f32>::init(64, &mut rng);
    assert_eq!(adapt(&h, Some(&zero_tail)), h);
    assert_eq!(adapt(&h, None), h);
    let mut a = zero_tail.clone();
    a.w2 = Array2::from_shape_fn((64, 64), |_| rng.random_range(-0.1f32..0.1));
    let delta = adapt(&h, Some(&a)) - &h;
    let mlp = adapter_delta(&a, &h);
    for (x, y) in delta.iter().zip(mlp.iter()) {
        assert!((x - y).abs() < 1e-6);
    }
    let mut b = a.clone();
    b.b2.fill(0.5);
    assert_ne!(adapt(&h, Some(&a)), adapt(&h, Some(&b)));
}

#[test]
fn masked_loss_arithmetic() {
    let pred = Array2::<f64>::zeros((1, 8));
    let mut t = Array2::<f64>::zeros((1, 8));
    t[(0, 3)] = 1.0;
    assert_eq!(head_loss(&pred, &t).1, 1.0 / 8.0);
    assert_eq!(head_loss(&t, &t).1, 0.0);
}

#[test]
fn masked_row_is_zeroed_and_targets_kept() {
    let x = Array2::from_shape_fn((96, 8), |(i, j)| (i * 8 + j) as f64 + 1.0);
    let b = MaskedBatch::new(x.clone(), vec![4, 47], 48);
    assert!(b.x.row(4).iter().all(|&v| v == 0.0));
    assert!(b.x.row(95).iter().all(|&v| v == 0.0));
    assert_eq!(b.targets.row(0), x.row(4));
    assert_eq!(b.targets.row(1), x.row(95));
    assert_eq!(b.x.row(5), x.row(5));
}

#[test]
fn loss_reads_only_mask_position() {
    let (p, _, batch) = tiny_setup(11);
    let base = loss_and_grad(&p, None, &batch, None, None).loss;
    let (full, _) = encoder_forward(&p, &batch.x, 3, Rows::All);
    let mut pred = full.dot(&p.w_head) + &p.b_head;
    let idx: Vec<usize> = batch.mask.iter().enumerate().map(|(w, &m)| w * 48 + m).collect();
    for i in 0..pred.nrows() {
        if !idx.contains(&i) {
            pred.row_mut(i).fill(123.0);
        }
    }
    let at_mask = pred.select(Axis(0), &idx);
    assert!((head_loss(&at_mask, &batch.targets).1 - base).abs() < 1e-12);
}

#[test]
fn zero_loss_gives_zero_head_bias_gradient() {
    let (mut p, _, mut batch) = tiny_setup(12);
    p.w_head.fill(0.0);
    p.b_head = Array1::from_shape_fn(8, |j| 0.1 * j as f64);
    for mut r in batch.targets.rows_mut() {
        r.assign(&p.b_head);
    }
    let mut g = BackboneParams::<f64>::zeros(p.cfg);
    let out = loss_and_grad(&p, None, &batch, Some(&mut g), None);
    assert_eq!(out.loss, 0.0);
    assert!(g.b_head.iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn doubling_residual_doubles_gradients() {
    let (p, a, batch) = tiny_setup(13);
    let mut g1 = BackboneParams::<f64>::zeros(p.cfg);
    let mut ga1 = AdapterParams::<f64>::zeros(p.cfg.d_model);
    loss_and_grad(&p, Some(&a), &batch, Some(&mut g1), Some(&mut ga1));
    // new targets with residual pred - t doubled
    let pred = super::model::predict_masked(&p, Some(&a), &batch);
    let doubled = MaskedBatch {
        x: batch.x.clone(),
        targets: &pred - &((&pred - &batch.targets) * 2.0),
        mask: batch.mask.clone(),
    };
    let mut g2 = BackboneParams::<f64>::zeros(p.cfg);
    let mut ga2 = AdapterParams::<f64>::zeros(p.cfg.d_model);
    loss_and_grad(&p, Some(&a), &doubled, Some(&mut g2), Some(&mut ga2));
    for (t1, t2) in g1
        .tensors()
        .iter()
        .zip(g2.tensors())
        .chain(ga1.tensors().iter().zip(ga2.tensors()))
    {
        for (x, y) in t1.data.iter().zip(t2.data) {
            assert!((2.0 * x - y).abs() <= 1e-9 * (1.0 + y.abs()), "{}", t1.name);
        }
    }
}

fn diurnal_corpus(users: usize, hours: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Corpus::default();
    for u in 0..users {
        let shift = u as f64;
        let f = Array2::from_shape_fn((hours, 8), |(h, j)| {
            let hod = (h % 24) as f64;
            let ang = 2.0 * std::f64::consts::PI * hod / 24.0;
            let v = match j {
                0..=4 => 0.2 + 0.15 * ((ang + shift + j as f64).sin()),
                5 => 0.5 + 0.4 * (ang - shift * 0.3).sin(),
                6 => ang.sin(),
                _ => ang.cos(),
            };
            (v + 0.02 * rng.random_range(-1.0..1.0)) as f32
        });
        let n_windows = hours - 48;
        let n_train = (n_windows as f64 * 0.7).ceil() as usize;
        c.user_ids.push(format!("u{u}"));
        c.features.push(f);
        c.train.push((0..n_train).collect());
        c.test.push((n_train..n_windows).collect());
    }
    c
}

#[test]
fn single_window_overfits() {
    let mut c = diurnal_corpus(1, 60, 1);
    c.train = vec![vec![0]];
    let cfg = TrainConfig {
        phase1_epochs: 40,
        ..Default::default()
    };
    let out = train_phase1(&c, ModelConfig::tiny(), &cfg).unwrap();
    let first = out.epoch_losses[..5].iter().sum::<f64>();
    let last = out.epoch_losses[35..].iter().sum::<f64>();
    assert!(last < first, "{:?}", out.epoch_losses);
}

#[test]
fn phase1_is_deterministic_and_learns() {
    let c = diurnal_corpus(2, 120, 2);
    let cfg = TrainConfig {
        phase1_epochs: 4,
        ..Default::default()
    };
    let a = train_phase1(&c, ModelConfig::tiny(), &cfg).unwrap();
    let b = train_phase1(&c, ModelConfig::tiny(), &cfg).unwrap();
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(param_checksum(&a.params), param_checksum(&b.params));
    assert!(a.epoch_losses[3] < a.epoch_losses[0]);
}

#[test]
fn phase2_freezes_backbone_and_handles_small_users() {
    let mut c = diurnal_corpus(3, 100, 3);
    c.train[1] = vec![0];
    c.train[2] = vec![];
    let cfg = TrainConfig {
        phase1_epochs: 1,
        phase2_epochs: 2,
        ..Default::default()
    };
    let p1 = train_phase1(&c, ModelConfig::tiny(), &cfg).unwrap();
    let before = param_checksum(&p1.params);
    let out = train_phase2(&p1.params, &c, &cfg).unwrap();
    assert_eq!(param_checksum(&p1.params), before);
    assert_eq!(out.adapters.len(), 2);
    assert_eq!(out.skipped, vec!["u2".to_string()]);
    let evals = train::evaluate_adapters(&p1.params, &out.adapters, &c);
    assert_eq!(evals.len(), 2);
}

#[test]
fn cosine_fixtures() {
    let probe = Array2::from_shape_fn((4, 8), |(i, j)| (i + j) as f32 * 0.1);
    let mut a = AdapterParams::<f32>::zeros(8);
    a.b2[0] = 1.0;
    let mut b = AdapterParams::<f32>::zeros(8);
    b.b2[1] = 2.0;
    let mut map = BTreeMap::new();
    map.insert("a".to_string(), a.clone());
    map.insert("b".to_string(), b);
    map.insert("c".to_string(), a);
    map.insert("z".to_string(), AdapterParams::<f32>::zeros(8));
    let s = adapter_delta_cosines(&map, &probe).unwrap();
    assert_eq!(s.matrix[0][1], 0.0);
    assert_eq!(s.matrix[0][2], 1.0);
    assert_eq!(s.matrix[1][0], s.matrix[0][1]);
    assert_eq!(s.matrix[0][0], 1.0);
    assert_eq!(s.n_pairs, 3);
    assert_eq!(s.skipped_pairs, 3);
    assert!((s.mean - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = BackboneParams::<f32>::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(8));
    let path = dir.path().join("backbone.fst");
    save_backbone(&path, &p, 42, serde_json::json!({"note": "x"})).unwrap();
    let (q, header) = load_backbone(&path).unwrap();
    assert_eq!(param_checksum(&p), param_checksum(&q));
    assert_eq!(header.seed, 42);
    let mut adapters = BTreeMap::new();
    adapters.insert(
        "u1".to_string(),
        AdapterParams::<f32>::init(64, &mut ChaCha8Rng::seed_from_u64(1)),
    );
    let apath = dir.path().join("adapters.fst");
    save_adapters(&apath, p.cfg, &adapters, 42).unwrap();
    assert_eq!(load_adapters(&apath).unwrap(), adapters);
    assert!(load_backbone(&apath).is_err());
    std::fs::write(&path, b"NOTATENSORFILE").unwrap();
    assert!(load_backbone(&path).is_err());
}

#[test]
fn canonical_latents() {
    let c = diurnal_corpus(1, 120, 4);
    let p = BackboneParams::<f32>::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(3));
    let starts: Vec<usize> = (0..72).collect();
    let out = extract_latents(&p, "u0", &c.features[0], &starts).unwrap();
    // hours 0..=118 are covered; hour 119 is in no window
    assert_eq!(out.hour_index, (0..119).collect::<Vec<_>>());
    let w0 = encode(&p, &c.features[0].slice(s![0..48, ..]).to_owned()).unwrap();
    for h in 0..48 {
        for j in 0..64 {
            assert!((out.latents[(h, j)] - w0[(h, j)]).abs() < 1e-5);
        }
    }
    let w10 = encode(&p, &c.features[0].slice(s![10..58, ..]).to_owned()).unwrap();
    for j in 0..64 {
        assert!((out.latents[(57, j)] - w10[(47, j)]).abs() < 1e-5);
    }
}

use super::*;
use crate::dataio::{generate_synthetic, split_dataset, GeneratorConfig, SplitSizes, SynthDataset};
use crate::diffgraph::gradcheck::check_params;
use crate::diffgraph::GammaTarget;
use crate::encoding::TrainingSet;

fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        emb_width: 3,
        cat_width: 4,
        num_width: 2,
        hidden: 8,
        heads: 2,
        cat_dropout: 0.3,
        branch_layers: 2,
    }
}

fn random_trials(n: usize, cfg: &BackboneConfig, rng: &mut RngState) -> Vec<EncodedTrial> {
    (0..n)
        .map(|_| EncodedTrial {
            x_emb: (0..cfg.emb_width).map(|_| rng.standard_normal()).collect(),
            x_cat: (0..cfg.cat_width).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect(),
            x_num: (0..cfg.num_width).map(|_| rng.standard_normal()).collect(),
        })
        .collect()
}

fn dummy_encoder(cfg: &BackboneConfig) -> Encoder {
    use crate::encoding::{FeatureVocab, KeyFeature, MultiLabelVocab, ZScoreState};
    Encoder {
        vocab: MultiLabelVocab {
            features: vec![FeatureVocab {
                feature: KeyFeature::Phase,
                labels: (0..cfg.cat_width).map(|i| format!("P{i}")).collect(),
            }],
        },
        zscore: ZScoreState {
            mean: vec![0.0; cfg.num_width],
            std: vec![1.0; cfg.num_width],
        },
        embedding_dim: cfg.emb_width,
    }
}

fn checkpoint_with(head: HeadKind, cfg: BackboneConfig, params: ParamStore) -> ModelCheckpoint {
    ModelCheckpoint {
        head,
        encoder: dummy_encoder(&cfg),
        backbone: cfg,
        params,
        train_config: TrainConfig::for_head(head, 0),
        meta: TrainingMeta {
            seed: 0,
            epochs_run: 0,
            best_epoch: 0,
            dev_metric: "none".into(),
            best_dev_metric: 0.0,
        },
    }
}

/// Random weights everywhere, including norm gain/bias.
fn random_params(cfg: &BackboneConfig, head: HeadKind, seed: u64) -> ParamStore {
    let mut rng = RngState::new(seed);
    let mut p = init_params(cfg, head, &mut rng).unwrap();
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.standard_normal();
        }
    }
    p
}

/// Constant outputs: zero output weights and the given bias.
fn constant_head(cfg: &BackboneConfig, head: HeadKind, bias: &[f64]) -> ParamStore {
    let mut p = init_params(cfg, head, &mut RngState::new(1)).unwrap();
    p.get_mut("head.out.w").unwrap().data_mut().fill(0.0);
    p.get_mut("head.out.b").unwrap().data_mut().copy_from_slice(bias);
    p
}

mod oracle {
    //! Plain-loop forward pass written independently of the graph code.
    use super::*;

    fn lin(p: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
        let w = p.get(&format!("{name}.w")).unwrap();
        let b = p.get(&format!("{name}.b")).unwrap();
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        (0..n_out)
            .map(|j| b.data()[j] + (0..n_in).map(|i| x[i] * w.data()[i * n_out + j]).sum::<f64>())
            .collect()
    }

    fn leaky(x: Vec<f64>) -> Vec<f64> {
        x.into_iter().map(|v| if v > 0.0 { v } else { 0.01 * v }).collect()
    }

    pub fn forward(p: &ParamStore, cfg: &BackboneConfig, t: &EncodedTrial) -> Vec<f64> {
        let br = |name: &str, x: &[f64]| leaky(lin(p, &format!("{name}.1"), &leaky(lin(p, &format!("{name}.0"), x))));
        let ze = br("emb", &t.x_emb);
        let toks = [br("cat", &t.x_cat), br("num", &t.x_num)];
        let q = lin(p, "att.q", &ze);
        let ks: Vec<_> = toks.iter().map(|z| lin(p, "att.k", z)).collect();
        let vs: Vec<_> = toks.iter().map(|z| lin(p, "att.v", z)).collect();
        let dh = cfg.hidden / cfg.heads;
        let mut cat = vec![0.0; cfg.hidden];
        for h in 0..cfg.heads {
            let r = h * dh..(h + 1) * dh;
            let s: Vec<f64> = ks
                .iter()
                .map(|k| r.clone().map(|i| q[i] * k[i]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for i in r {
                cat[i] = (0..2).map(|tk| e[tk] / z * vs[tk][i]).sum();
            }
        }
        let att = lin(p, "att.o", &cat);
        let res: Vec<f64> = att.iter().zip(&ze).map(|(a, b)| a + b).collect();
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        let var = res.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / res.len() as f64;
        let gain = p.get("norm.gain").unwrap().data();
        let bias = p.get("norm.bias").unwrap().data();
        let h: Vec<f64> = res
            .iter()
            .enumerate()
            .map(|(j, v)| gain[j] * (v - mean) / (var + 1e-5).sqrt() + bias[j])
            .collect();
        lin(p, "head.out", &leaky(lin(p, "head.hidden", &h)))
    }
}

#[test]
fn zero_weights_give_zero_representation() {
    let cfg = tiny_config();
    let mut p = init_params(&cfg, HeadKind::Deterministic, &mut RngState::new(0)).unwrap();
    for (name, t) in p.iter_mut() {
        if !name.starts_with("norm.") {
            t.data_mut().fill(0.0);
        }
    }
    let trials = random_trials(3, &cfg, &mut RngState::new(1));
    let refs: Vec<_> = trials.iter().collect();
    let batch = Batch::from_encoded(&refs, &cfg).unwrap();
    let mut g = Graph::new(Mode::Eval, 0);
    let h = forward_backbone(&mut g, &p, &cfg, &batch).unwrap();
    assert_eq!(g.value(h).shape(), &[3, cfg.hidden]);
    assert!(g.value(h).data().iter().all(|&v| v == 0.0));
}

#[test]
fn backbone_shape_and_eval_determinism() {
    let cfg = BackboneConfig::new(5, 7, 2);
    let p = init_params(&cfg, HeadKind::Gamma, &mut RngState::new(3)).unwrap();
    let trials = random_trials(6, &cfg, &mut RngState::new(4));
    let refs: Vec<_> = trials.iter().collect();
    let batch = Batch::from_encoded(&refs, &cfg).unwrap();
    let run = |mode, seed| {
        let mut g = Graph::new(mode, seed);
        let h = forward_backbone(&mut g, &p, &cfg, &batch).unwrap();
        assert_eq!(g.value(h).shape(), &[6, 64]);
        g.value(h).data().to_vec()
    };
    assert_eq!(run(Mode::Eval, 1), run(Mode::Eval, 2));
    assert_eq!(run(Mode::Train, 9), run(Mode::Train, 9));
    assert_ne!(run(Mode::Train, 9), run(Mode::Eval, 9));
    let bad = BackboneConfig { heads: 3, ..cfg.clone() };
    assert!(init_params(&bad, HeadKind::Gamma, &mut RngState::new(0)).is_err());
}

#[test]
fn point_predictions_invert_the_log_transform() {
    assert!((patients_from_log(101f64.ln()) - 100.0).abs() < 1e-12);
    assert_eq!(patients_from_log(0.0), 0.0);
    assert_eq!(patients_from_log(-0.5), 0.0);
    let cfg = tiny_config();
    let ck = checkpoint_with(HeadKind::Deterministic, cfg.clone(), constant_head(&cfg, HeadKind::Deterministic, &[101f64.ln()]));
    let t = &random_trials(1, &cfg, &mut RngState::new(2))[0];
    assert!((ck.predict_point(t).unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn predictions_match_scripted_forward() {
    let cfg = tiny_config();
    let trials = random_trials(9, &cfg, &mut RngState::new(5));
    for head in [HeadKind::Deterministic, HeadKind::Gamma, HeadKind::PoissonGamma] {
        let ck = checkpoint_with(head, cfg.clone(), random_params(&cfg, head, 6));
        let outs = ck.outputs(&trials).unwrap();
        for (t, o) in trials.iter().zip(&outs) {
            let want = oracle::forward(&ck.params, &cfg, t);
            for (a, b) in o.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()), "{head:?}: {a} vs {b}");
            }
        }
        let want = oracle::forward(&ck.params, &cfg, &trials[0]);
        match head {
            HeadKind::Deterministic => {
                assert!((ck.predict_point(&trials[0]).unwrap() - patients_from_log(want[0])).abs() < 1e-9)
            }
            HeadKind::Gamma => {
                let p = ck.predict_distribution(&trials[0]).unwrap();
                assert!((p.shape - want[0].exp()).abs() < 1e-12 * p.shape);
            }
            HeadKind::PoissonGamma => {
                let p = ck.predict_site_params(&trials[0]).unwrap();
                assert!((p.startup_dist.rate - want[3].exp()).abs() < 1e-12 * p.startup_dist.rate);
            }
        }
    }
}

#[test]
fn distribution_heads_apply_exp() {
    let cfg = tiny_config();
    let t = &random_trials(1, &cfg, &mut RngState::new(2))[0];
    let ck = checkpoint_with(HeadKind::Gamma, cfg.clone(), constant_head(&cfg, HeadKind::Gamma, &[0.0, 0.0]));
    assert_eq!(ck.predict_distribution(t).unwrap(), GammaParams::new(1.0, 1.0).unwrap());
    let ck = checkpoint_with(HeadKind::Gamma, cfg.clone(), constant_head(&cfg, HeadKind::Gamma, &[2f64.ln(), 3f64.ln()]));
    let p = ck.predict_distribution(t).unwrap();
    assert!((p.shape - 2.0).abs() < 1e-12 && (p.rate - 3.0).abs() < 1e-12);
    let ck = checkpoint_with(HeadKind::PoissonGamma, cfg.clone(), constant_head(&cfg, HeadKind::PoissonGamma, &[0.0; 4]));
    let p = ck.predict_site_params(t).unwrap();
    assert_eq!(p.rate_dist, GammaParams::new(1.0, 1.0).unwrap());
    assert_eq!(p.startup_dist, GammaParams::new(1.0, 1.0).unwrap());
    for head in [HeadKind::Gamma, HeadKind::PoissonGamma] {
        let ck = checkpoint_with(head, cfg.clone(), random_params(&cfg, head, 8));
        for o in ck.outputs(&random_trials(50, &cfg, &mut RngState::new(3))).unwrap() {
            assert!(o.iter().all(|v| v.exp() > 0.0));
        }
    }
}

#[test]
fn head_kind_guards() {
    let cfg = tiny_config();
    let t = &random_trials(1, &cfg, &mut RngState::new(2))[0];
    let det = checkpoint_with(HeadKind::Deterministic, cfg.clone(), random_params(&cfg, HeadKind::Deterministic, 1));
    assert!(matches!(det.predict_distribution(t), Err(Error::Usage(_))));
    assert!(matches!(det.predict_interval(t, 0.1), Err(Error::Usage(_))));
    assert!(matches!(det.predict_site_params(t), Err(Error::Usage(_))));
    let pg = checkpoint_with(HeadKind::PoissonGamma, cfg.clone(), random_params(&cfg, HeadKind::PoissonGamma, 1));
    assert!(matches!(pg.predict_point(t), Err(Error::Usage(_))));
}

#[test]
fn interval_examples() {
    let unit = GammaParams::new(1.0, 1.0).unwrap();
    let iv = interval_from_log_gamma(&unit, 0.1).unwrap();
    // Exponential quantiles −ln(1−p), then exp(·) − 1.
    assert!((iv.lower - ((-(0.95f64).ln()).exp() - 1.0)).abs() < 1e-9);
    assert!((iv.upper - 19.0).abs() < 1e-8);
    assert!((iv.lower - 0.0526).abs() < 1e-4);
    assert_eq!(iv.level, 0.9);
    let mut prev = f64::INFINITY;
    for s in [0.01, 0.1, 0.3, 0.5, 0.8, 0.99] {
        let w = interval_from_log_gamma(&unit, s).unwrap();
        assert!(w.width() < prev && w.lower < w.upper);
        prev = w.width();
    }
    let p = GammaParams::new(7.3, 1.9).unwrap();
    let (i50, i90) = (interval_from_log_gamma(&p, 0.5).unwrap(), interval_from_log_gamma(&p, 0.1).unwrap());
    assert!(i90.lower < i50.lower && i50.upper < i90.upper);
    assert!(interval_from_log_gamma(&p, 0.0).is_err());
    assert!(interval_from_log_gamma(&p, 1.0).is_err());
}

fn model_loss(g: &mut Graph, p: &ParamStore, cfg: &BackboneConfig, head: HeadKind, batch: &Batch) -> crate::Result<Var> {
    let out = forward_model(g, p, cfg, batch)?;
    let b = g.value(out).shape()[0];
    match head {
        HeadKind::Deterministic => {
            let c = g.column(out, 0)?;
            let y: Vec<f64> = (0..b).map(|i| 3.0 + 40.0 * i as f64).collect();
            g.l1_log_loss(c, &y)
        }
        HeadKind::Gamma => {
            let (s, r) = (g.column(out, 0)?, g.column(out, 1)?);
            let t: Vec<GammaTarget> = (0..b).map(|i| GammaTarget::single(1.0 + 0.7 * i as f64).unwrap()).collect();
            g.gamma_nll(s, r, &t)
        }
        HeadKind::PoissonGamma => {
            let c: Vec<Var> = (0..4).map(|j| g.column(out, j).unwrap()).collect();
            let t1: Vec<GammaTarget> = (0..b)
                .map(|i| GammaTarget::from_samples(&[0.5 + i as f64, 2.0, 0.3]).unwrap())
                .collect();
            let t2: Vec<GammaTarget> = (0..b).map(|i| GammaTarget::single(1.0 + 0.1 * i as f64).unwrap()).collect();
            let a = g.gamma_nll(c[0], c[1], &t1)?;
            let bb = g.gamma_nll(c[2], c[3], &t2)?;
            g.add(a, bb)
        }
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let trials = random_trials(5, &cfg, &mut RngState::new(12));
    let refs: Vec<_> = trials.iter().collect();
    let batch = Batch::from_encoded(&refs, &cfg).unwrap();
    for head in [HeadKind::Deterministic, HeadKind::Gamma, HeadKind::PoissonGamma] {
        let mut p = random_params(&cfg, head, 13);
        // Keep the Gamma logits moderate.
        p.get_mut("head.out.w").unwrap().data_mut().iter_mut().for_each(|v| *v *= 0.3);
        let mut g = Graph::new(Mode::Train, 21);
        let loss = model_loss(&mut g, &p, &cfg, head, &batch).unwrap();
        let analytic = g.backward(loss).unwrap().into_param_map();
        let report = check_params(&p, &analytic, 1e-6, None, |s| {
            let mut g = Graph::new(Mode::Train, 21);
            let l = model_loss(&mut g, s, &cfg, head, &batch)?;
            Ok(g.value(l).item())
        })
        .unwrap();
        assert_eq!(report.checked, p.num_scalars());
        assert!(report.max_rel_error <= 1e-4, "{head:?}: {} at {}", report.max_rel_error, report.worst);
    }
}

#[test]
fn self_consistent_interval_calibration() {
    let cfg = tiny_config();
    let mut p = random_params(&cfg, HeadKind::Gamma, 31);
    p.get_mut("head.out.w").unwrap().data_mut().iter_mut().for_each(|v| *v *= 0.2);
    p.get_mut("head.out.b").unwrap().data_mut().copy_from_slice(&[2.5, 0.6]);
    let ck = checkpoint_with(HeadKind::Gamma, cfg.clone(), p);
    let mut rng = RngState::new(32);
    let trials = random_trials(6000, &cfg, &mut rng);
    let dists = ck.predict_distribution_many(&trials).unwrap();
    let intervals = ck.predict_interval_many(&trials, 0.1).unwrap();
    let inside = dists
        .iter()
        .zip(&intervals)
        .filter(|(d, iv)| iv.contains(d.sample(&mut rng).exp() - 1.0))
        .count();
    let coverage = inside as f64 / trials.len() as f64;
    assert!((coverage - 0.9).abs() <= 0.02, "{coverage}");
}

struct Fixture {
    encoder: Encoder,
    train: TrainData,
    dev: TrainData,
}

fn fixture(head: HeadKind, n: usize, seed: u64) -> Fixture {
    let cfg = if head == HeadKind::PoissonGamma {
        GeneratorConfig::poisson_gamma()
    } else {
        GeneratorConfig::builtin()
    };
    let SynthDataset {
        trials, sites, embeddings, ..
    } = generate_synthetic(&cfg, n, seed).unwrap();
    let split = split_dataset(&trials, SplitSizes { train: n * 3 / 4, dev: n / 4, test: 0 }, seed).unwrap();
    let encoder = Encoder::fit(TrainingSet::new(&split.train), embeddings.dim()).unwrap();
    let make = |recs: &[crate::dataio::TrialRecord]| {
        let x = encoder.encode_all(recs, &embeddings).unwrap();
        if head == HeadKind::PoissonGamma {
            TrainData::sites(x, recs, &sites).unwrap()
        } else {
            TrainData::enrollment(x, recs).unwrap()
        }
    };
    Fixture {
        train: make(&split.train),
        dev: make(&split.dev),
        encoder,
    }
}

fn quick_config(head: HeadKind, epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: 32,
        ..TrainConfig::for_head(head, 77)
    }
}

#[test]
fn training_descends_for_every_head() {
    for head in [HeadKind::Deterministic, HeadKind::Gamma, HeadKind::PoissonGamma] {
        let f = fixture(head, 200, 3);
        let backbone = BackboneConfig::for_encoder(&f.encoder);
        let (ck, report) = train(head, f.encoder.clone(), backbone, &quick_config(head, 12), &f.train, &f.dev).unwrap();
        assert!(
            report.final_train_loss < report.initial_train_loss,
            "{head:?}: {} -> {}",
            report.initial_train_loss,
            report.final_train_loss
        );
        assert_eq!(ck.head, head);
        assert_eq!(ck.meta.epochs_run, report.epochs.len());
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let f = fixture(HeadKind::Gamma, 120, 5);
    let backbone = BackboneConfig::for_encoder(&f.encoder);
    let cfg = quick_config(HeadKind::Gamma, 3);
    let (a, _) = train(HeadKind::Gamma, f.encoder.clone(), backbone.clone(), &cfg, &f.train, &f.dev).unwrap();
    let (b, _) = train(HeadKind::Gamma, f.encoder.clone(), backbone, &cfg, &f.train, &f.dev).unwrap();
    let bytes = encode_checkpoint(&a).unwrap();
    assert_eq!(bytes, encode_checkpoint(&b).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.enfc");
    save_checkpoint(&path, &a).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, a);
    assert_eq!(encode_checkpoint(&loaded).unwrap(), bytes);
}

#[test]
fn corrupted_checkpoints_fail_distinctly() {
    let cfg = tiny_config();
    let ck = checkpoint_with(HeadKind::Gamma, cfg.clone(), random_params(&cfg, HeadKind::Gamma, 2));
    let bytes = encode_checkpoint(&ck).unwrap();
    assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);

    let mut magic = bytes.clone();
    magic[1] = b'X';
    assert!(matches!(decode_checkpoint(&magic), Err(Error::BadMagic { .. })));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(decode_checkpoint(&version), Err(Error::VersionMismatch { found: 9, .. })));
    for cut in [10, 40, bytes.len() - 100, bytes.len() - 1] {
        assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::SizeMismatch(_))), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    let at = bytes.len() - 20;
    flipped[at] ^= 0x10;
    assert!(matches!(decode_checkpoint(&flipped), Err(Error::Checksum { .. })));
    let mut manifest = bytes.clone();
    manifest[20] ^= 0x01;
    assert!(matches!(decode_checkpoint(&manifest), Err(Error::Checksum { .. })));
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let f = fixture(HeadKind::Deterministic, 160, 9);
    let backbone = BackboneConfig::for_encoder(&f.encoder);
    let cfg = TrainConfig {
        patience: 3,
        ..quick_config(HeadKind::Deterministic, 60)
    };
    let (ck, report) = train(HeadKind::Deterministic, f.encoder.clone(), backbone, &cfg, &f.train, &f.dev).unwrap();
    let best = ck.meta.best_dev_metric;
    for e in &report.epochs {
        assert!(best <= e.dev_metric, "epoch {} dev {} below kept {best}", e.epoch, e.dev_metric);
    }
    if ck.meta.best_epoch > 0 {
        assert_eq!(report.epochs[ck.meta.best_epoch - 1].dev_metric, best);
    }
    // The stored metric is reproducible from the stored weights.
    let preds = ck.predict_point_many(&f.dev.inputs).unwrap();
    let TargetSet::Enrollment(y) = &f.dev.targets else { unreachable!() };
    let mae = preds.iter().zip(y).map(|(p, y)| (p - y).abs()).sum::<f64>() / y.len() as f64;
    assert!((mae - best).abs() < 1e-9 * best.max(1.0));
}

#[test]
fn training_rejects_mismatched_inputs() {
    let f = fixture(HeadKind::Deterministic, 80, 2);
    let backbone = BackboneConfig::for_encoder(&f.encoder);
    let cfg = quick_config(HeadKind::PoissonGamma, 1);
    assert!(matches!(
        train(HeadKind::PoissonGamma, f.encoder.clone(), backbone.clone(), &cfg, &f.train, &f.dev),
        Err(Error::Usage(_))
    ));
    let empty = TrainData {
        inputs: vec![],
        targets: TargetSet::Enrollment(vec![]),
    };
    assert!(train(HeadKind::Deterministic, f.encoder.clone(), backbone, &cfg, &f.train, &empty).is_err());
}

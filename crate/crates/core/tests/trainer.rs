use lagnh::dataset::{synth_dataset, SynthData, SynthParams};
use lagnh::error::Error;
use lagnh::retrieval::{hamming, sign};
use lagnh::trainer::{fit, Trainer};
use lagnh::{ModelConfig, TrainConfig, TrainedModel};
use ndarray::{Array2, Axis};

fn data(n: usize, seed: u64) -> SynthData {
    synth_dataset(&SynthParams {
        n,
        d: 32,
        clusters: 4,
        sep: 10.0,
        label_noise: 0.0,
        seed,
    })
    .unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        d_prime: 64,
        hidden: 128,
        code_len: 16,
        ..ModelConfig::default()
    }
}

fn train(n: usize, epochs: usize, seed: u64) -> (SynthData, TrainedModel, Vec<lagnh::LossBreakdown>) {
    let d = data(n, seed);
    let t = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let (model, log) = fit(&d.features, &d.aux, &small_model(), &t).unwrap();
    (d, model, log)
}

#[test]
fn zero_epochs_rejected() {
    let d = data(32, 0);
    let t = TrainConfig { epochs: 0, ..TrainConfig::default() };
    assert!(matches!(
        fit(&d.features, &d.aux, &small_model(), &t),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn same_seed_same_model() {
    let (_, a, la) = train(64, 5, 3);
    let (_, b, lb) = train(64, 5, 3);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
    let (_, c, _) = train(64, 5, 4);
    assert_ne!(a.params, c.params);
}

#[test]
fn generator_loss_descends() {
    let (_, _, log) = train(512, 300, 0);
    assert_eq!(log.len(), 300);
    assert!(log[299].total_gen < log[0].total_gen, "{} vs {}", log[299].total_gen, log[0].total_gen);
}

#[test]
fn cached_codes_match_a_fresh_forward_pass() {
    let d = data(96, 1);
    let t = TrainConfig { epochs: 7, seed: 1, ..TrainConfig::default() };
    let mut trainer = Trainer::new(&d.features, &d.aux, &small_model(), &t).unwrap();
    trainer.run().unwrap();
    let model = trainer.snapshot().unwrap();
    let again = trainer.snapshot().unwrap();
    assert_eq!(model.z, again.z);
    let codes = model.encode_train();
    let oracle: Array2<f64> = model.z.mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 });
    assert_eq!(codes.unpack(), oracle);
    assert_eq!(sign(0.0), 1.0);
}

#[test]
fn separated_clusters_train_to_separated_codes() {
    let (d, model, _) = train(256, 300, 2);
    let codes = model.encode_train();
    let (mut intra, mut inter, mut ni, mut nx) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            let h = hamming(codes.code(i), codes.code(j)).unwrap() as f64;
            if d.labels[i] == d.labels[j] {
                intra += h;
                ni += 1;
            } else {
                inter += h;
                nx += 1;
            }
        }
    }
    assert!(intra / (ni as f64) < inter / (nx as f64));

    // a query duplicating a training item lands within one bit of it
    let x = d.features.to_f64();
    let y = d.aux.to_f64();
    let probe: Vec<usize> = (0..256).step_by(16).collect();
    let q = model
        .encode_query(
            x.select(Axis(1), &probe).view(),
            y.select(Axis(1), &probe).view(),
            probe.iter().map(|i| i.to_string()).collect(),
        )
        .unwrap();
    for (k, &i) in probe.iter().enumerate() {
        assert!(hamming(q.code(k), codes.code(i)).unwrap() <= 1, "item {i}");
    }

    // no semantics at all: the visual term still defines the code
    let zero_y = Array2::<f64>::zeros((4, 3));
    let z = model.encode_query_real(x.select(Axis(1), &[0, 1, 2]).view(), zero_y.view()).unwrap();
    assert!(z.iter().all(|v| v.is_finite()));
    let b = model.encode_query(x.select(Axis(1), &[0, 1, 2]).view(), zero_y.view(), vec!["a".into(), "b".into(), "c".into()])
        .unwrap()
        .unpack();
    assert!(b.iter().all(|&v| v == 1.0 || v == -1.0));
}

#[test]
fn query_shape_errors() {
    let (_, model, _) = train(32, 2, 0);
    let bad_x = Array2::<f64>::zeros((31, 2));
    let y = Array2::<f64>::zeros((4, 2));
    assert!(matches!(model.encode_query_real(bad_x.view(), y.view()), Err(Error::Shape(_))));
    let x = Array2::<f64>::zeros((32, 2));
    let bad_y = Array2::<f64>::zeros((3, 2));
    assert!(matches!(model.encode_query_real(x.view(), bad_y.view()), Err(Error::Shape(_))));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (_, model, _) = train(48, 3, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let loaded = TrainedModel::load(&path).unwrap();
    assert_eq!(loaded, model);
    let bytes = std::fs::read(&path).unwrap();
    loaded.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn variants_and_joint_attention_train() {
    let d = data(48, 6);
    let t = TrainConfig { epochs: 3, seed: 6, ..TrainConfig::default() };
    for v in lagnh::Variant::ALL {
        let cfg = v.apply(small_model());
        let (m, log) = fit(&d.features, &d.aux, &cfg, &t).unwrap();
        assert_eq!(log.len(), 3, "{v}");
        assert_eq!(m.encode_train().len(), 48);
    }
    let cfg = ModelConfig { joint_attention: true, ..small_model() };
    let (m, _) = fit(&d.features, &d.aux, &cfg, &t).unwrap();
    let (frozen, _) = fit(&d.features, &d.aux, &small_model(), &t).unwrap();
    assert_ne!(m.params.attention, frozen.params.attention);
    assert_eq!(frozen.params.attention.proj_x, lagnh::attention::AttentionParams::init(32, 4, 64, 6).unwrap().proj_x);
}

#[test]
fn adversarial_term_alone_trains() {
    let d = data(48, 7);
    let mut cfg = small_model();
    cfg.hp.lambda1 = 0.0;
    cfg.hp.lambda2 = 0.0;
    cfg.hp.lambda3 = 0.0;
    let t = TrainConfig { epochs: 4, ..TrainConfig::default() };
    let (_, log) = fit(&d.features, &d.aux, &cfg, &t).unwrap();
    assert!(log.iter().all(|l| l.total_gen == l.l_gen_adv));
}

#[test]
fn divergence_aborts_with_the_tensor_name() {
    let d = data(48, 8);
    let t = TrainConfig { epochs: 20, lr: 1e300, ..TrainConfig::default() };
    match fit(&d.features, &d.aux, &small_model(), &t) {
        Err(Error::NonFinite { tensor, epoch }) => {
            assert!(!tensor.is_empty());
            assert!(epoch >= 1);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

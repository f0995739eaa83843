use enhance_core::data::{self, Batcher, DegradeSpec, PatchPair};
use enhance_core::models::{weights, Generator, GeneratorConfig, Model};
use enhance_core::models::{DiscriminatorConfig, FeatureExtractor};
use enhance_core::train::{self, read_manifest, TrainConfig, TrainOptions, Trainer};
use enhance_core::{Error, Parameter, Rng};

fn small_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 2,
        gen: GeneratorConfig::parse_label("strided 3 4-16 1").unwrap(),
        disc: DiscriminatorConfig {
            channels: vec![4, 8],
            strides: vec![2, 2, 2],
            ..DiscriminatorConfig::default()
        },
        seed: 9,
        ..TrainConfig::default()
    }
}

fn pairs(n: usize) -> Vec<PatchPair> {
    data::synthetic_pairs(n, 16, &DegradeSpec::default(), 1).unwrap()
}

fn snapshot(params: Vec<&Parameter>) -> Vec<(String, Vec<f32>)> {
    params.into_iter().map(|p| (p.name().to_string(), p.value().data().to_vec())).collect()
}

#[test]
fn smoke_run_writes_reloadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let set = pairs(4);
    let cfg = small_config(3);
    let out = train::train(
        cfg.clone(),
        FeatureExtractor::tiny_fixed(),
        &set,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            eval_set: Some(&set),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(out.log.len(), 3);
    assert!(out.log.iter().all(|r| r.d_loss.is_some() && r.losses.total.is_finite()));
    assert_eq!(out.evals.len(), 0);
    let ck = out.checkpoints.last().unwrap();
    assert_eq!(ck.iteration, 3);

    let manifest = read_manifest(&ck.manifest).unwrap();
    assert_eq!(manifest["config_hash"], cfg.hash());
    assert_eq!(manifest["iteration"], "3");
    assert_eq!(manifest["seed"], "9");

    let tensors = weights::load(&ck.generator).unwrap();
    let mut g = Generator::new(&GeneratorConfig::infer(&tensors).unwrap(), &mut Rng::new(0)).unwrap();
    g.load(&tensors).unwrap();
    let mut trained = out.trainer.generator;
    for p in &set {
        assert_eq!(g.enhance(&p.phone).unwrap().data(), trained.enhance(&p.phone).unwrap().data());
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn eval_snapshots_follow_cadence() {
    let set = pairs(3);
    let cfg = TrainConfig {
        eval_every: 2,
        ..small_config(5)
    };
    let out = train::train(
        cfg,
        FeatureExtractor::tiny_fixed(),
        &set,
        TrainOptions {
            eval_set: Some(&set),
            ..Default::default()
        },
    )
    .unwrap();
    let at: Vec<usize> = out.evals.iter().map(|(i, _)| *i).collect();
    assert_eq!(at, [2, 4, 5]);
    assert!(out.evals.iter().all(|(_, r)| r.n_images == 3));
}

#[test]
fn steps_touch_only_their_own_network() {
    let set = pairs(4);
    let mut t = Trainer::new(small_config(1), FeatureExtractor::tiny_fixed()).unwrap();
    let features = snapshot(t.features.params());
    let batch = Batcher::new(&set, 2, 0).unwrap().next_batch().unwrap();

    let (g0, d0) = (snapshot(t.generator.params()), snapshot(t.discriminator.params()));
    t.discriminator_step(&batch).unwrap();
    let (g1, d1) = (snapshot(t.generator.params()), snapshot(t.discriminator.params()));
    assert_eq!(g0, g1, "discriminator step moved the generator");
    assert_ne!(d0, d1);

    t.generator_step(&batch).unwrap();
    let (g2, d2) = (snapshot(t.generator.params()), snapshot(t.discriminator.params()));
    assert_eq!(d1, d2, "generator step moved the discriminator");
    assert_ne!(g1, g2);
    assert_eq!(features, snapshot(t.features.params()));
}

#[test]
fn zero_texture_weight_skips_discriminator() {
    let set = pairs(2);
    let mut cfg = small_config(2);
    cfg.weights.texture = 0.0;
    let out = train::train(cfg, FeatureExtractor::tiny_fixed(), &set, TrainOptions::default()).unwrap();
    assert!(out.log.iter().all(|r| r.d_loss.is_none() && r.losses.raw[1] == 0.0));
}

#[test]
fn same_seed_same_weights() {
    let set = pairs(4);
    let run = || {
        let out = train::train(small_config(3), FeatureExtractor::tiny_fixed(), &set, TrainOptions::default()).unwrap();
        snapshot(out.trainer.generator.params())
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_batch_is_dumped() {
    let dir = tempfile::tempdir().unwrap();
    let mut set = pairs(1);
    set[0].phone.data_mut()[0] = f32::NAN;
    let err = train::train(
        small_config(2),
        FeatureExtractor::tiny_fixed(),
        &set,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        },
    )
    .err()
    .unwrap();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let dump = std::fs::read_to_string(dir.path().join("failed_batch.txt")).unwrap();
    assert!(dump.starts_with("iteration 1\n") && dump.contains("00000"));
}

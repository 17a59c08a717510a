use adret::data::{generate_corpus, Corpus, SyntheticCorpusConfig};
use adret::encoder::{encode, RawInstance};
use adret::evaluation::{evaluate, GroundTruth};
use adret::objectives::{LossConfig, LossMode};
use adret::pooling::{Modality, PoolingSpec};
use adret::training::{k_history, train, ModelParams, TrainConfig};
use adret::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_corpus(seed: u64) -> (SyntheticCorpusConfig, Corpus, Corpus) {
    let cfg = SyntheticCorpusConfig { num_groups: 240, val_groups: 40, test_groups: 0, seed, ..Default::default() };
    let (train, val, _) = generate_corpus(&cfg).unwrap().split(40, 0).unwrap();
    (cfg, train, val)
}

fn quick(mode: LossMode, seed: u64) -> TrainConfig {
    TrainConfig { batch_size: 32, epochs: 2, seed, loss: LossConfig { mode, ..Default::default() }, ..TrainConfig::desk() }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (cfg, tr, val) = small_corpus(5);
    let run = || {
        let model = ModelParams::init(&cfg, PoolingSpec::AdPool, PoolingSpec::AdPool, 9);
        train(&tr, Some(&val), model, &quick(LossMode::InfoNceAdaptive, 9)).unwrap()
    };
    let (a_params, a_log) = run();
    let (b_params, b_log) = run();
    assert_eq!(a_params, b_params);
    assert_eq!(a_log.to_csv(), b_log.to_csv());

    let model = ModelParams::init(&cfg, PoolingSpec::AdPool, PoolingSpec::AdPool, 9);
    let (_, other) = train(&tr, Some(&val), model, &quick(LossMode::InfoNceAdaptive, 10)).unwrap();
    assert_ne!(other.to_csv(), a_log.to_csv());
}

#[test]
fn zero_epochs_return_the_initialization() {
    let (cfg, tr, val) = small_corpus(1);
    let model = ModelParams::init(&cfg, PoolingSpec::Mean, PoolingSpec::Max, 3);
    let (out, log) = train(&tr, Some(&val), model.clone(), &TrainConfig { epochs: 0, ..quick(LossMode::HardTriplet, 3) }).unwrap();
    assert_eq!(out, model);
    assert!(log.records.is_empty() && log.validation.is_empty());
}

#[test]
fn logged_k_stays_within_the_batch() {
    let (cfg, tr, val) = small_corpus(2);
    let model = ModelParams::init(&cfg, PoolingSpec::AdPool, PoolingSpec::AdPool, 2);
    let tc = quick(LossMode::InfoNceAdaptive, 2);
    let (_, log) = train(&tr, Some(&val), model, &tc).unwrap();
    let ks = k_history(&log).unwrap();
    assert_eq!(ks.len(), log.records.len());
    assert!(ks.iter().all(|&(_, k)| (1..tc.batch_size).contains(&k)));
    assert_eq!(log.validation.len(), tc.epochs + 1);
    assert!(log.records.iter().enumerate().all(|(i, r)| r.iter == i));

    let model = ModelParams::init(&cfg, PoolingSpec::AdPool, PoolingSpec::AdPool, 2);
    let (_, log) = train(&tr, None, model, &quick(LossMode::HardTriplet, 2)).unwrap();
    assert!(k_history(&log).is_err());
    assert!(log.records.iter().all(|r| r.k.is_none()));
}

#[test]
fn first_epoch_loss_trends_down_on_the_desk_corpus() {
    let cfg = SyntheticCorpusConfig::default();
    let (tr, _, _) = generate_corpus(&cfg).unwrap().split(cfg.val_groups, cfg.test_groups).unwrap();
    for mode in [LossMode::InfoNceAdaptive, LossMode::HardTriplet] {
        let model = ModelParams::init(&cfg, PoolingSpec::AdPool, PoolingSpec::AdPool, 0);
        let tc = TrainConfig { epochs: 1, validate: false, loss: LossConfig { mode, ..Default::default() }, ..TrainConfig::desk() };
        let (_, log) = train(&tr, None, model, &tc).unwrap();
        let ys: Vec<f64> = log.records.iter().map(|r| r.loss).collect();
        let n = ys.len() as f64;
        let mx = (n - 1.0) / 2.0;
        let my = ys.iter().sum::<f64>() / n;
        let slope: f64 = ys.iter().enumerate().map(|(x, y)| (x as f64 - mx) * (y - my)).sum::<f64>()
            / ys.iter().enumerate().map(|(x, _)| (x as f64 - mx).powi(2)).sum::<f64>();
        assert!(slope < 0.0, "{mode}: slope {slope}");
    }
}

#[test]
fn separated_batches_are_a_fixed_point_without_margin() {
    // captions are exact copies of their images and both encoders share weights,
    // so every positive scores 1 and every negative scores below 1
    let cfg = SyntheticCorpusConfig { num_groups: 64, val_groups: 0, test_groups: 0, noise_scale: 0.5, seed: 4, ..Default::default() };
    let base = generate_corpus(&cfg).unwrap();
    let text = base
        .visual
        .iter()
        .map(|v| RawInstance { modality: Modality::Text, ..v.clone() })
        .collect();
    let corpus = Corpus { visual: base.visual.clone(), text };
    let mut model = ModelParams::init(&cfg, PoolingSpec::Mean, PoolingSpec::Mean, 4);
    model.text = model.visual.clone();

    let tc = TrainConfig {
        batch_size: 16,
        epochs: 3,
        validate: false,
        loss: LossConfig { margin: 0.0, mode: LossMode::HardTriplet, ..Default::default() },
        ..TrainConfig::desk()
    };
    let (out, log) = train(&corpus, None, model.clone(), &tc).unwrap();
    assert!(log.records.iter().all(|r| r.loss == 0.0));
    assert_eq!(out, model);
}

#[test]
fn random_embeddings_score_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let images = Matrix::random_normal(200, 32, 1.0, &mut rng);
    let captions = Matrix::random_normal(1000, 32, 1.0, &mut rng);
    let truth = GroundTruth::new((0..1000).map(|q| vec![q / 5]).collect());
    let r = evaluate(&captions, &images, &truth).unwrap();
    assert!(r.cr_r1 < 20.0 && r.ir_r1 < 20.0, "{r:?}");
    assert!(r.rsum < 100.0);
}

#[test]
fn encodings_are_unit_norm_at_any_input_scale() {
    let cfg = SyntheticCorpusConfig { num_groups: 4, val_groups: 0, test_groups: 0, ..Default::default() };
    let corpus = generate_corpus(&cfg).unwrap();
    let model = ModelParams::init(&cfg, PoolingSpec::AdPool, PoolingSpec::AdPool, 1);
    for c in [1e-3, 1.0, 250.0] {
        for inst in &corpus.text {
            let scaled = RawInstance { features: inst.features.scale(c), ..inst.clone() };
            let e = encode(&scaled, &model.text).unwrap();
            assert!((e.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn noiseless_captions_share_their_image_latent() {
    let cfg = SyntheticCorpusConfig {
        num_groups: 6,
        val_groups: 0,
        test_groups: 0,
        noise_scale: 0.0,
        captions_per_image: 2,
        ..Default::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    for g in 0..6 {
        let caps: Vec<&RawInstance> = corpus.text.iter().filter(|t| t.group == g).collect();
        // without noise every token of every caption is the same mixed latent
        let first = caps[0].features.row(0).to_vec();
        for cap in caps {
            for r in 0..cap.features.rows() {
                assert_eq!(cap.features.row(r), first.as_slice());
            }
        }
    }
}

use std::path::PathBuf;

use osdg::datasets::{make_split, Split};
use osdg::detectors::DetectorKind;
use osdg::error::Error;
use osdg::generator::{synth_ood_batch, GenerativeModel, OracleGenerator};
use osdg::network::Network;
use osdg::numerics::{ParamSet, RngStream, Tape, Tensor};
use osdg::objective::{objective_graph, transfer_batch, IdBatch, LossWeights, RegularizerInputs};
use osdg::runner::{
    evaluate, load_checkpoint, load_generator, random_search, run_experiment, train_network,
    write_checkpoint, Arm, DataSource, ExperimentConfig, GeneratorConfig, RunManifest, RunOptions,
};

fn small_config() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.data = DataSource::Synthetic {
        count: 900,
        seed: 4,
    };
    cfg.split.train_cap = 300;
    cfg.split.val_cap = 60;
    cfg.split.test_cap = 200;
    cfg.network.hidden = vec![32];
    cfg.network.feature_dim = 16;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 32;
    cfg
}

fn oracle() -> GenerativeModel {
    GenerativeModel::Oracle(OracleGenerator)
}

fn split_of(cfg: &ExperimentConfig) -> (osdg::datasets::RawDigitSet, Split) {
    let raw = cfg.data.load().unwrap();
    let split = make_split(&raw, &cfg.split).unwrap();
    (raw, split)
}

fn checkpoint_bytes(network: &Network) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &network.params()).unwrap();
    buf
}

#[test]
fn zero_weights_match_skipped_regularizers_bit_for_bit() {
    let cfg = small_config();
    let (_, split) = split_of(&cfg);
    let members: Vec<_> = split.train.iter().take(16).collect();
    let batch = IdBatch::from_samples(&members).unwrap();
    let g = oracle();
    let mut rng = RngStream::new(8);
    let transferred = transfer_batch(&g, &batch.images, &mut rng).unwrap();
    let ood = synth_ood_batch(&g, &members, &split.train, &cfg.blend, &mut rng).unwrap();
    let ood = Tensor::stack(&ood.iter().collect::<Vec<_>>()).unwrap();
    let weights = LossWeights::new(0.0, 0.0, -5.0, 1.0).unwrap();

    let run = |reg: &RegularizerInputs| {
        let mut net = Network::new(&cfg.network_spec(), &mut RngStream::new(1)).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let graph = objective_graph(&mut tape, &bound, &batch, reg, &weights).unwrap();
        tape.backward_into(graph.total, &mut net).unwrap();
        let grads: Vec<Vec<u64>> = net
            .params()
            .iter()
            .map(|p| p.grad.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        (graph.breakdown.total.to_bits(), grads)
    };
    let skipped = run(&RegularizerInputs::default());
    let weighted = run(&RegularizerInputs {
        transferred: Some(transferred),
        synthetic_ood: Some(ood),
    });
    assert_eq!(skipped, weighted);
}

#[test]
fn training_is_deterministic() {
    let cfg = small_config();
    let (_, split) = split_of(&cfg);
    let a = train_network(&cfg, &split.train, &oracle(), 5, None).unwrap();
    let b = train_network(&cfg, &split.train, &oracle(), 5, None).unwrap();
    assert_eq!(checkpoint_bytes(&a.network), checkpoint_bytes(&b.network));
    assert_eq!(a.trace, b.trace);
    let c = train_network(&cfg, &split.train, &oracle(), 6, None).unwrap();
    assert_ne!(checkpoint_bytes(&a.network), checkpoint_bytes(&c.network));
}

#[test]
fn reloaded_checkpoint_reproduces_manifest_metrics() {
    let cfg = small_config();
    let (raw, split) = split_of(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        with_validation: true,
    };
    let manifest = run_experiment(&cfg, &raw, &split, &oracle(), "fsi-s0", 0, &opts).unwrap();
    assert_eq!(manifest.metrics.len(), cfg.detectors.len());
    assert!(manifest.validation_auroc.is_some());

    let on_disk = RunManifest::load(&dir.path().join("fsi-s0.manifest.json")).unwrap();
    assert_eq!(on_disk.metrics, manifest.metrics);
    assert_eq!(on_disk.input_hash, manifest.input_hash);

    let network =
        Network::from_parameters(load_checkpoint(&dir.path().join("fsi-s0.ckpt")).unwrap())
            .unwrap();
    let rows = evaluate(
        &network,
        &split.test,
        Some(&split.train),
        &cfg.detectors,
        cfg.loss.temperature,
        cfg.ddu_ridge,
        "fsi-s0",
        0,
        &cfg.split.ood_classes,
    )
    .unwrap();
    assert_eq!(rows, manifest.metrics);
}

#[test]
fn untrained_network_is_near_chance() {
    let mut cfg = small_config();
    cfg.data = DataSource::Synthetic {
        count: 3000,
        seed: 12,
    };
    cfg.split.test_cap = 1500;
    let (_, split) = split_of(&cfg);
    let network = Network::new(&cfg.network_spec(), &mut RngStream::new(3)).unwrap();
    let rows = evaluate(
        &network,
        &split.test,
        None,
        &[DetectorKind::Energy],
        1.0,
        1e-3,
        "init",
        3,
        &[7, 8, 9],
    )
    .unwrap();
    assert!(
        (0.35..=0.65).contains(&rows[0].auroc),
        "auroc {}",
        rows[0].auroc
    );
}

#[test]
fn density_detector_requires_training_features() {
    let cfg = small_config();
    let (_, split) = split_of(&cfg);
    let network = Network::new(&cfg.network_spec(), &mut RngStream::new(3)).unwrap();
    let err = evaluate(
        &network,
        &split.test,
        None,
        &[DetectorKind::GaussianDensity],
        1.0,
        1e-3,
        "x",
        0,
        &[7, 8, 9],
    )
    .unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn erm_loss_trend_decreases() {
    let mut cfg = small_config().for_arm(Arm::Erm);
    cfg.train.epochs = 20;
    cfg.train.lr = 0.02;
    let (_, split) = split_of(&cfg);
    let trained = train_network(&cfg, &split.train, &oracle(), 2, None).unwrap();
    let totals: Vec<f64> = trained.trace.iter().map(|b| b.total).collect();
    let averages: Vec<f64> = totals
        .windows(10)
        .map(|w| w.iter().sum::<f64>() / 10.0)
        .collect();
    assert!(averages.windows(2).all(|w| w[1] <= w[0]), "{averages:?}");
    assert!(trained.trace.iter().all(|b| b.r_f == 0.0 && b.r_e == 0.0));
}

#[test]
fn search_with_one_run_per_trial_takes_that_run() {
    let mut cfg = small_config();
    cfg.train.epochs = 1;
    cfg.search.runs_per_trial = 1;
    cfg.search.trials = 1;
    let (raw, _) = split_of(&cfg);
    let outcome = random_search(&cfg, Arm::Fsi, &raw, &oracle(), None).unwrap();
    assert!(!outcome.trials.is_empty());
    for t in &outcome.trials {
        assert_eq!(t.runs.len(), 1);
        assert_eq!(t.best, Some(0));
        assert!(!t.failed);
    }
}

#[test]
fn search_is_reproducible_and_picks_by_validation() {
    let mut cfg = small_config();
    cfg.train.epochs = 1;
    cfg.search.runs_per_trial = 3;
    cfg.search.trials = 1;
    let (raw, _) = split_of(&cfg);
    let a = random_search(&cfg, Arm::Fsi, &raw, &oracle(), None).unwrap();
    let b = random_search(&cfg, Arm::Fsi, &raw, &oracle(), None).unwrap();
    assert_eq!(a.trials.len(), b.trials.len());
    for (ta, tb) in a.trials.iter().zip(&b.trials) {
        let pa: Vec<_> = ta
            .runs
            .iter()
            .map(|r| (r.params, r.validation_auroc))
            .collect();
        let pb: Vec<_> = tb
            .runs
            .iter()
            .map(|r| (r.params, r.validation_auroc))
            .collect();
        assert_eq!(pa, pb);
        assert_eq!(ta.best, tb.best);

        let mut scores: Vec<f64> = ta.runs.iter().filter_map(|r| r.validation_auroc).collect();
        scores.sort_by(f64::total_cmp);
        let best = ta.runs[ta.best.unwrap()].validation_auroc.unwrap();
        assert!(best >= scores[scores.len() / 2]);
        assert_eq!(
            ta.best_manifest.as_ref().unwrap().run_id,
            ta.runs[ta.best.unwrap()].run_id
        );
    }
}

#[test]
fn search_marks_trials_without_validation_data_failed() {
    let mut cfg = small_config();
    cfg.train.epochs = 1;
    cfg.split.val_cap = 0;
    cfg.search.runs_per_trial = 1;
    cfg.search.trials = 1;
    let (raw, _) = split_of(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let outcome = random_search(&cfg, Arm::Fsi, &raw, &oracle(), Some(dir.path())).unwrap();
    assert!(outcome
        .trials
        .iter()
        .all(|t| t.failed && t.best_manifest.is_none()));
    assert!(outcome.trials.iter().all(|t| t.runs[0].error.is_some()));
    assert!(outcome.best_manifests().is_empty());
    assert!(dir.path().join("search-fsi.json").exists());
}

#[test]
fn missing_learned_generator_is_a_config_error() {
    let mut cfg = small_config();
    cfg.generator = GeneratorConfig::Learned {
        checkpoint: PathBuf::from("/nonexistent/learned-g.ckpt"),
        train: Default::default(),
    };
    assert!(matches!(load_generator(&cfg), Err(Error::Config(_))));
}

#[test]
fn config_rejects_unknown_fields_and_bad_values() {
    let cfg = small_config();
    let mut value: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
    value["learning_rate"] = serde_json::json!(0.1);
    assert!(ExperimentConfig::from_json(&value.to_string()).is_err());

    let mut bad = cfg.clone();
    bad.loss.zeta1 = -1.0;
    assert!(bad.validate().is_err());
    let mut bad = cfg.clone();
    bad.split.ood_classes = vec![0];
    assert!(bad.validate().is_err());
    let mut bad = cfg;
    bad.train.batch_size = 0;
    assert!(bad.validate().is_err());
}

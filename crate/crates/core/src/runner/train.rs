use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{make_split, ColoredSample, Label, RawDigitSet, Split};
use crate::detectors::{Detector, DetectorKind, FitData};
use crate::error::{Error, Result};
use crate::eval::{auroc, MetricsRow, ScoredEntry, ScoredTestSet};
use crate::generator::{synth_ood_batch, GenerativeModel, LearnedGenerator, OracleGenerator};
use crate::network::Network;
use crate::numerics::{Momentum, ParamSet, RngStream, Tape, Tensor};
use crate::objective::{
    energy, objective_graph, transfer_batch, IdBatch, LossBreakdown, RegularizerInputs,
};
use crate::runner::checkpoint::{load_checkpoint, save_checkpoint};
use crate::runner::config::{predict, Arm, ExperimentConfig, GeneratorConfig};

const EVAL_CHUNK: usize = 256;

/// Loads the generator named by the config.
pub fn load_generator(cfg: &ExperimentConfig) -> Result<GenerativeModel> {
    match &cfg.generator {
        GeneratorConfig::Oracle => Ok(GenerativeModel::Oracle(OracleGenerator)),
        GeneratorConfig::Learned { checkpoint, .. } => {
            if !checkpoint.exists() {
                return Err(Error::Config(format!(
                    "learned generator checkpoint {} not found; run train-g first",
                    checkpoint.display()
                )));
            }
            Ok(GenerativeModel::Learned(LearnedGenerator::from_parameters(
                load_checkpoint(checkpoint)?,
            )?))
        }
    }
}

/// Network weights plus the per-epoch mean loss components.
#[derive(Clone, Debug)]
pub struct TrainedNetwork {
    pub network: Network,
    pub trace: Vec<LossBreakdown>,
}

/// Mini-batch training of `g ∘ h` on the ID training split.
///
/// Random streams are split by role (`init`, `shuffle`, `augment`), so
/// switching a regularizer off leaves initialization and batch order untouched.
/// A regularizer with zero weight is not computed at all. When `last_good` is
/// set and the loss turns non-finite, the weights from before the failing step
/// are written there before the error is returned.
pub fn train_network(
    cfg: &ExperimentConfig,
    train: &[ColoredSample],
    generator: &GenerativeModel,
    seed: u64,
    last_good: Option<&Path>,
) -> Result<TrainedNetwork> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    let root = RngStream::new(seed);
    let mut network = Network::new(&cfg.network_spec(), &mut root.child("init"))?;
    let mut shuffle = root.child("shuffle");
    let mut augment = root.child("augment");
    let mut opt = Momentum::new(cfg.train.momentum);
    let weights = &cfg.loss;
    let mut trace = Vec::with_capacity(cfg.train.epochs);

    for epoch in 0..cfg.train.epochs {
        let order = shuffle.permutation(train.len());
        let mut sum = LossBreakdown::default();
        let mut steps = 0usize;
        for idx in order.chunks(cfg.train.batch_size) {
            let members: Vec<&ColoredSample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = IdBatch::from_samples(&members)?;
            let reg = RegularizerInputs {
                transferred: if weights.zeta1 > 0.0 {
                    Some(transfer_batch(generator, &batch.images, &mut augment)?)
                } else {
                    None
                },
                synthetic_ood: if weights.zeta2 > 0.0 {
                    let ood =
                        synth_ood_batch(generator, &members, train, &cfg.blend, &mut augment)?;
                    let refs: Vec<&Tensor> = ood.iter().collect();
                    Some(Tensor::stack(&refs)?)
                } else {
                    None
                },
            };

            let mut tape = Tape::new();
            let bound = network.bind(&mut tape);
            let graph = objective_graph(&mut tape, &bound, &batch, &reg, weights)?;
            let b = graph.breakdown;
            if !b.total.is_finite() {
                if let Some(path) = last_good {
                    save_checkpoint(path, &network.params())?;
                }
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, step {steps}: {b:?}"
                )));
            }
            network.zero_grad();
            tape.backward_into(graph.total, &mut network)?;
            opt.step(&mut network, cfg.train.lr).inspect_err(|_| {
                if let Some(path) = last_good {
                    let _ = save_checkpoint(path, &network.params());
                }
            })?;
            sum.ce += b.ce;
            sum.r_f += b.r_f;
            sum.r_e += b.r_e;
            sum.total += b.total;
            steps += 1;
        }
        let n = steps as f64;
        let mean = LossBreakdown {
            ce: sum.ce / n,
            r_f: sum.r_f / n,
            r_e: sum.r_e / n,
            total: sum.total / n,
        };
        log::info!(
            "epoch {epoch}: total {:.4} ce {:.4} r_f {:.4} r_e {:.4}",
            mean.total,
            mean.ce,
            mean.r_f,
            mean.r_e
        );
        trace.push(mean);
    }
    network.zero_grad();
    Ok(TrainedNetwork { network, trace })
}

/// Per-sample rows, one `Vec` per sample.
pub type Rows = Vec<Vec<f64>>;

/// Features and logits for every sample, row-aligned with `samples`.
pub fn network_outputs(network: &Network, samples: &[ColoredSample]) -> Result<(Rows, Rows)> {
    let mut features = Vec::with_capacity(samples.len());
    let mut logits = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let out = network.forward(&Tensor::stack(&refs)?)?;
        for i in 0..chunk.len() {
            features.push(out.features.row(i).to_vec());
            logits.push(out.logits.row(i).to_vec());
        }
    }
    Ok((features, logits))
}

/// Builds the requested detectors; density detectors are fitted on `train` features.
pub fn build_detectors(
    network: &Network,
    kinds: &[DetectorKind],
    train: Option<&[ColoredSample]>,
    temperature: f64,
    ridge: f64,
) -> Result<Vec<Detector>> {
    let fit_inputs = match train {
        Some(train) if kinds.iter().any(|k| k.needs_fit()) => {
            let (features, _) = network_outputs(network, train)?;
            let labels = train
                .iter()
                .map(|s| {
                    s.label
                        .id()
                        .ok_or_else(|| Error::Contract("OOD sample in detector fit data".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            Some((features, labels))
        }
        _ => None,
    };
    let fit = fit_inputs.as_ref().map(|(features, labels)| FitData {
        features,
        labels,
        num_classes: network.num_classes(),
        ridge,
    });
    kinds
        .iter()
        .map(|&k| Detector::build(k, temperature, fit.as_ref()))
        .collect()
}

/// One metrics row per detector over a single pass of the network.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    network: &Network,
    test: &[ColoredSample],
    train: Option<&[ColoredSample]>,
    kinds: &[DetectorKind],
    temperature: f64,
    ridge: f64,
    run_id: &str,
    seed: u64,
    ood_classes: &[u8],
) -> Result<Vec<MetricsRow>> {
    let detectors = build_detectors(network, kinds, train, temperature, ridge)?;
    let (features, logits) = network_outputs(network, test)?;
    let predicted: Vec<usize> = logits.iter().map(|z| predict(z)).collect();
    detectors
        .iter()
        .map(|d| {
            let entries = test
                .iter()
                .enumerate()
                .map(|(i, s)| ScoredEntry {
                    score: d.score(&features[i], &logits[i]),
                    is_ood: s.label.is_ood(),
                    true_label: s.label.id().unwrap_or(0),
                    predicted: predicted[i],
                })
                .collect();
            MetricsRow::compute(
                run_id,
                seed,
                ood_classes,
                d.kind().name(),
                &ScoredTestSet::new(entries),
            )
        })
        .collect()
}

/// Energy-detector AUROC of validation ID samples against synthetic outliers
/// made from them. Uses no test-domain data and no real OOD classes.
pub fn validation_auroc(
    network: &Network,
    val: &[ColoredSample],
    generator: &GenerativeModel,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Contract("validation split is empty".into()));
    }
    let mut rng = RngStream::new(seed).child("validation");
    let refs: Vec<&ColoredSample> = val.iter().collect();
    let mut outliers = Vec::with_capacity(val.len());
    for chunk in refs.chunks(cfg.train.batch_size) {
        for image in synth_ood_batch(generator, chunk, val, &cfg.blend, &mut rng)? {
            outliers.push(ColoredSample {
                image,
                label: Label::Ood,
                domain_id: u8::MAX,
            });
        }
    }
    let (_, id_logits) = network_outputs(network, val)?;
    let (_, ood_logits) = network_outputs(network, &outliers)?;
    let t = cfg.loss.temperature;
    let id: Vec<f64> = id_logits.iter().map(|z| energy(z, t)).collect();
    let ood: Vec<f64> = ood_logits.iter().map(|z| energy(z, t)).collect();
    auroc(&ScoredTestSet::from_scores(&id, &ood))
}

/// Content hash over the configuration and the raw digits.
pub fn input_hash(cfg: &ExperimentConfig, raw: &RawDigitSet) -> String {
    let mut h = Sha256::new();
    h.update(cfg.to_json().as_bytes());
    for v in raw.images.data() {
        h.update(v.to_le_bytes());
    }
    h.update(&raw.labels);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to reproduce and audit one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub arm: Arm,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub input_hash: String,
    pub wall_clock_secs: f64,
    pub trace: Vec<LossBreakdown>,
    pub validation_auroc: Option<f64>,
    pub metrics: Vec<MetricsRow>,
    pub checkpoint: Option<PathBuf>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Options for [`run_experiment`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for the checkpoint and manifest; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Also score the network on the validation criterion.
    pub with_validation: bool,
}

/// Trains on `split`, evaluates every configured detector on its test set,
/// and optionally persists checkpoint and manifest.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment(
    cfg: &ExperimentConfig,
    raw: &RawDigitSet,
    split: &Split,
    generator: &GenerativeModel,
    run_id: &str,
    seed: u64,
    opts: &RunOptions,
) -> Result<RunManifest> {
    let start = Instant::now();
    let ckpt = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            Some(dir.join(format!("{run_id}.ckpt")))
        }
        None => None,
    };
    let trained = train_network(cfg, &split.train, generator, seed, ckpt.as_deref())?;
    if let Some(path) = &ckpt {
        save_checkpoint(path, &trained.network.params())?;
    }
    let metrics = evaluate(
        &trained.network,
        &split.test,
        Some(&split.train),
        &cfg.detectors,
        cfg.loss.temperature,
        cfg.ddu_ridge,
        run_id,
        seed,
        &cfg.split.ood_classes,
    )?;
    let validation_auroc = if opts.with_validation {
        Some(validation_auroc(
            &trained.network,
            &split.val,
            generator,
            cfg,
            seed,
        )?)
    } else {
        None
    };
    let manifest = RunManifest {
        run_id: run_id.to_string(),
        arm: cfg.arm(),
        seed,
        config: cfg.clone(),
        input_hash: input_hash(cfg, raw),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        trace: trained.trace,
        validation_auroc,
        metrics,
        checkpoint: ckpt,
    };
    if let Some(dir) = &opts.out_dir {
        manifest.save(&dir.join(format!("{run_id}.manifest.json")))?;
    }
    Ok(manifest)
}

/// Loads data, builds the split, and runs one arm with the config's seed.
pub fn train_from_config(cfg: &ExperimentConfig, out_dir: Option<PathBuf>) -> Result<RunManifest> {
    let raw = cfg.data.load()?;
    let split = make_split(&raw, &cfg.split)?;
    let generator = load_generator(cfg)?;
    let run_id = format!("{}-s{}", cfg.arm().name(), cfg.seed);
    run_experiment(
        cfg,
        &raw,
        &split,
        &generator,
        &run_id,
        cfg.seed,
        &RunOptions {
            out_dir,
            with_validation: !split.val.is_empty(),
        },
    )
}

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{coverage, enumerate_ood_selections, make_split, OodSelection, RawDigitSet};
use crate::error::{Error, Result};
use crate::eval::ood_classes_label;
use crate::generator::GenerativeModel;
use crate::numerics::{derive_seed, RngStream};
use crate::runner::config::{Arm, ExperimentConfig, SearchSpace};
use crate::runner::train::{run_experiment, RunManifest, RunOptions};

/// Digit classes the OOD schedule is drawn from.
pub const DIGIT_CLASSES: usize = 10;

/// One drawn hyperparameter setting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledParams {
    pub lr: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    pub gamma: f64,
}

fn log_uniform(rng: &mut RngStream, range: [f64; 2]) -> f64 {
    rng.uniform_in(range[0].ln(), range[1].ln())
        .exp()
        .clamp(range[0], range[1])
}

impl SampledParams {
    pub fn draw(space: &SearchSpace, rng: &mut RngStream) -> Self {
        SampledParams {
            lr: log_uniform(rng, space.lr),
            zeta1: log_uniform(rng, space.zeta1),
            zeta2: log_uniform(rng, space.zeta2),
            gamma: rng
                .uniform_in(space.gamma[0], space.gamma[1])
                .min(space.gamma[1]),
        }
    }

    /// `base` with these values applied for `arm`; ERM keeps both weights at zero.
    pub fn apply(&self, base: &ExperimentConfig, arm: Arm) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.train.lr = self.lr;
        cfg.loss.zeta1 = self.zeta1;
        cfg.loss.zeta2 = self.zeta2;
        cfg.loss.gamma = self.gamma;
        cfg.for_arm(arm)
    }
}

/// One search run inside a trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRun {
    pub run_index: usize,
    pub run_id: String,
    pub seed: u64,
    pub params: SampledParams,
    pub validation_auroc: Option<f64>,
    pub error: Option<String>,
    /// Kept so the winner's test metrics need no retraining.
    #[serde(skip)]
    pub manifest: Option<RunManifest>,
}

/// All runs of one (OOD selection, trial) pair and the selected winner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub selection: OodSelection,
    pub arm: Arm,
    pub runs: Vec<SearchRun>,
    /// Index into `runs` of the best validation score.
    pub best: Option<usize>,
    pub best_manifest: Option<RunManifest>,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub arm: Arm,
    pub master_seed: u64,
    pub coverage: f64,
    pub trials: Vec<TrialResult>,
}

impl SearchOutcome {
    /// Winning manifests of every successful trial.
    pub fn best_manifests(&self) -> Vec<&RunManifest> {
        self.trials
            .iter()
            .filter_map(|t| t.best_manifest.as_ref())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Random hyperparameter search over the OOD selection schedule.
///
/// Each (selection, trial) pair gets its own split seed and `runs_per_trial`
/// configurations. Run `k` overall uses the stream `derive_seed(master, k)`
/// for both its draw and its training, so results do not depend on how runs
/// are scheduled across threads. The winner by validation AUROC is reported
/// with its test-domain metrics.
pub fn random_search(
    base: &ExperimentConfig,
    arm: Arm,
    raw: &RawDigitSet,
    generator: &GenerativeModel,
    out_dir: Option<&Path>,
) -> Result<SearchOutcome> {
    base.validate()?;
    let space = &base.search;
    let master = base.seed;
    let selections = enumerate_ood_selections(DIGIT_CLASSES, space.min_ood_coverage, space.trials)?;
    let mut trials = Vec::with_capacity(selections.len());

    for (trial_index, selection) in selections.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.split.ood_classes = selection.classes.clone();
        cfg.split.id_classes = (0..DIGIT_CLASSES as u8)
            .filter(|c| !selection.classes.contains(c))
            .collect();
        cfg.split.seed = derive_seed(master ^ 0x5EED_5EED, trial_index as u64);
        cfg.validate()?;
        let split = make_split(raw, &cfg.split)?;
        let trial_dir: Option<PathBuf> = out_dir.map(|d| {
            d.join(format!(
                "{}-ood{}-t{}",
                arm.name(),
                ood_classes_label(&selection.classes),
                selection.trial
            ))
        });

        let first = trial_index * space.runs_per_trial;
        let runs: Vec<SearchRun> = (0..space.runs_per_trial)
            .into_par_iter()
            .map(|k| {
                let run_index = first + k;
                let seed = derive_seed(master, run_index as u64);
                let params = SampledParams::draw(space, &mut RngStream::new(seed).child("search"));
                let run_cfg = params.apply(&cfg, arm);
                let run_id = format!("{}-r{run_index}", arm.name());
                let opts = RunOptions {
                    out_dir: trial_dir.clone(),
                    with_validation: true,
                };
                match run_experiment(&run_cfg, raw, &split, generator, &run_id, seed, &opts) {
                    Ok(m) => SearchRun {
                        run_index,
                        run_id,
                        seed,
                        params,
                        validation_auroc: m.validation_auroc,
                        error: None,
                        manifest: Some(m),
                    },
                    Err(e) => {
                        log::warn!("search run {run_id} failed: {e}");
                        SearchRun {
                            run_index,
                            run_id,
                            seed,
                            params,
                            validation_auroc: None,
                            error: Some(e.to_string()),
                            manifest: None,
                        }
                    }
                }
            })
            .collect();

        let best = runs
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.validation_auroc.filter(|v| v.is_finite()).map(|v| (i, v)))
            // ties keep the earliest run
            .fold(None::<(usize, f64)>, |acc, (i, v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((i, v)),
            })
            .map(|(i, _)| i);
        if best.is_none() {
            log::warn!(
                "trial {} for OOD {:?} has no successful run; marking it failed",
                selection.trial,
                selection.classes
            );
        }
        let best_manifest = best.and_then(|i| runs[i].manifest.clone());
        trials.push(TrialResult {
            selection: selection.clone(),
            arm,
            runs,
            best,
            best_manifest,
            failed: best.is_none(),
        });
    }

    let outcome = SearchOutcome {
        arm,
        master_seed: master,
        coverage: coverage(&selections, DIGIT_CLASSES),
        trials,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        outcome.save(&dir.join(format!("search-{}.json", arm.name())))?;
    }
    Ok(outcome)
}

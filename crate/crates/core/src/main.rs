use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use osdg::datasets::{
    idx, make_split, synthetic_digits, write_dump, ColoredSample, GlyphStyle, Label,
};
use osdg::detectors::{DetectorKind, FeatureDump};
use osdg::eval::{write_metrics_csv, MetricsRow};
use osdg::generator::{synth_ood_batch, train_generator, GenerativeModel};
use osdg::network::Network;
use osdg::numerics::{ParamSet, RngStream};
use osdg::runner::{
    evaluate, load_checkpoint, load_generator, network_outputs, random_search, render_text,
    save_checkpoint, summarize, train_from_config, write_report_csv, Arm, ExperimentConfig,
    GeneratorConfig, RunManifest, SearchOutcome,
};

#[derive(Parser)]
#[command(
    name = "osdg",
    version,
    about = "Open-set domain generalization experiments on colored digits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed and the split seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated detectors, e.g. `energy,msp,ddu`.
    #[arg(long, value_delimiter = ',')]
    detectors: Option<Vec<DetectorKind>>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.split.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(d) = &self.detectors {
            cfg.detectors = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render procedural digits to IDX files, optionally dumping blended outliers.
    PrepareData {
        /// Directory receiving `digits-images.idx3-ubyte` and `digits-labels.idx1-ubyte`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12_000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// With `--ood-grid`, the experiment whose split and generator are used.
        #[arg(long, requires = "ood_grid")]
        config: Option<PathBuf>,
        /// Writes synthetic outliers from the training split in the raw dump format.
        #[arg(long, requires = "config")]
        ood_grid: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        grid_size: usize,
    },
    /// Train the learned generator and save its checkpoint.
    TrainG {
        #[command(flatten)]
        common: Common,
    },
    /// Train one arm, evaluate every detector, write checkpoint, manifest, and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "fsi")]
        arm: Arm,
    },
    /// Score a saved network on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write per-sample features and logits.
        #[arg(long)]
        dump_features: Option<PathBuf>,
    },
    /// Random hyperparameter search over the OOD selection schedule.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "fsi")]
        arm: Arm,
    },
    /// Summarize manifests or search outputs into CSV and text tables.
    Report {
        /// Manifest (`*.manifest.json`) or search (`search-*.json`) files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_metrics_csv(BufWriter::new(f), rows)?;
    Ok(())
}

fn print_rows(rows: &[MetricsRow]) {
    for r in rows {
        println!(
            "{:<12} {:<6} auroc {:.4}  aupr {:.4}  id_acc {:.4}  (n_id {}, n_ood {})",
            r.run_id, r.detector, r.auroc, r.aupr, r.id_accuracy, r.n_id, r.n_ood
        );
    }
}

fn prepare_data(
    out: &Path,
    count: usize,
    seed: u64,
    config: Option<&Path>,
    ood_grid: Option<&Path>,
    grid_size: usize,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let raw = synthetic_digits(count, seed, &GlyphStyle::default())?;
    let images = out.join("digits-images.idx3-ubyte");
    let labels = out.join("digits-labels.idx1-ubyte");
    idx::write_idx(&raw, &images, &labels)?;
    println!(
        "wrote {count} digits to {} and {}",
        images.display(),
        labels.display()
    );

    if let (Some(config), Some(grid)) = (config, ood_grid) {
        let cfg = ExperimentConfig::load(config)?;
        let split = make_split(&cfg.data.load()?, &cfg.split)?;
        let generator = load_generator(&cfg)?;
        let n = grid_size.min(split.train.len());
        let members: Vec<&ColoredSample> = split.train[..n].iter().collect();
        let mut rng = RngStream::new(cfg.seed).child("ood-grid");
        let samples: Vec<ColoredSample> =
            synth_ood_batch(&generator, &members, &split.train, &cfg.blend, &mut rng)?
                .into_iter()
                .map(|image| ColoredSample {
                    image,
                    label: Label::Ood,
                    domain_id: u8::MAX,
                })
                .collect();
        write_dump(BufWriter::new(File::create(grid)?), &samples)?;
        println!(
            "wrote {} synthetic outliers to {}",
            samples.len(),
            grid.display()
        );
    }
    Ok(())
}

fn train_g(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let GeneratorConfig::Learned { checkpoint, train } = &cfg.generator else {
        bail!("train-g needs a config with generator mode \"learned\"");
    };
    let split = make_split(&cfg.data.load()?, &cfg.split)?;
    let g = train_generator(&split.train, train)?;
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(checkpoint, &g.params())?;
    let held_out = if split.val.is_empty() {
        &split.train
    } else {
        &split.val
    };
    println!(
        "generator saved to {}; held-out reconstruction l1 {:.4}",
        checkpoint.display(),
        g.reconstruction_l1(held_out)?
    );
    Ok(())
}

fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    dump: Option<&Path>,
) -> anyhow::Result<()> {
    let network = Network::from_parameters(load_checkpoint(checkpoint)?)?;
    if network.spec() != cfg.network_spec() {
        bail!(
            "checkpoint network {:?} does not match the config {:?}",
            network.spec(),
            cfg.network_spec()
        );
    }
    let split = make_split(&cfg.data.load()?, &cfg.split)?;
    let run_id = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "eval".into());
    let rows = evaluate(
        &network,
        &split.test,
        Some(&split.train),
        &cfg.detectors,
        cfg.loss.temperature,
        cfg.ddu_ridge,
        &run_id,
        cfg.seed,
        &cfg.split.ood_classes,
    )?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_metrics(&cfg.output_dir.join(format!("{run_id}.metrics.csv")), &rows)?;
    print_rows(&rows);
    if let Some(path) = dump {
        let (features, logits) = network_outputs(&network, &split.test)?;
        let dump = FeatureDump {
            feature_dim: network.feature_dim(),
            num_classes: network.num_classes(),
            labels: split
                .test
                .iter()
                .map(|s| s.label.id().map_or(-1, |k| k as i32))
                .collect(),
            features,
            logits,
        };
        dump.write(BufWriter::new(File::create(path)?))?;
    }
    Ok(())
}

fn search(cfg: &ExperimentConfig, arm: Arm) -> anyhow::Result<()> {
    let raw = cfg.data.load()?;
    let generator: GenerativeModel = load_generator(cfg)?;
    let out = cfg.output_dir.clone();
    let outcome = random_search(cfg, arm, &raw, &generator, Some(&out))?;
    let rows: Vec<MetricsRow> = outcome
        .best_manifests()
        .iter()
        .flat_map(|m| m.metrics.clone())
        .collect();
    write_metrics(
        &out.join(format!("search-{}.metrics.csv", arm.name())),
        &rows,
    )?;
    let failed = outcome.trials.iter().filter(|t| t.failed).count();
    println!(
        "{} trials ({} failed), {} runs, OOD coverage {:.0}%",
        outcome.trials.len(),
        failed,
        outcome.trials.iter().map(|t| t.runs.len()).sum::<usize>(),
        100.0 * outcome.coverage
    );
    if !outcome.best_manifests().is_empty() {
        print!("{}", render_text(&summarize(&outcome.best_manifests())?));
    }
    Ok(())
}

fn report(inputs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let mut manifests = Vec::new();
    for path in inputs {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if let Ok(m) = serde_json::from_str::<RunManifest>(&text) {
            manifests.push(m);
        } else {
            let outcome: SearchOutcome = serde_json::from_str(&text).with_context(|| {
                format!(
                    "{} is neither a manifest nor a search outcome",
                    path.display()
                )
            })?;
            manifests.extend(outcome.best_manifests().into_iter().cloned());
        }
    }
    let refs: Vec<&RunManifest> = manifests.iter().collect();
    let rows = summarize(&refs)?;
    std::fs::create_dir_all(out)?;
    write_report_csv(BufWriter::new(File::create(out.join("report.csv"))?), &rows)?;
    let text = render_text(&rows);
    std::fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::PrepareData {
            out,
            count,
            seed,
            config,
            ood_grid,
            grid_size,
        } => prepare_data(
            &out,
            count,
            seed,
            config.as_deref(),
            ood_grid.as_deref(),
            grid_size,
        ),
        Command::TrainG { common } => train_g(&common.load()?),
        Command::Train { common, arm } => {
            let cfg = common.load()?.for_arm(arm);
            let out = cfg.output_dir.clone();
            let manifest = train_from_config(&cfg, Some(out.clone()))?;
            write_metrics(
                &out.join(format!("{}.metrics.csv", manifest.run_id)),
                &manifest.metrics,
            )?;
            print_rows(&manifest.metrics);
            if let Some(v) = manifest.validation_auroc {
                println!("validation auroc (synthetic outliers) {v:.4}");
            }
            Ok(())
        }
        Command::Evaluate {
            common,
            checkpoint,
            dump_features,
        } => evaluate_checkpoint(&common.load()?, &checkpoint, dump_features.as_deref()),
        Command::Search { common, arm } => search(&common.load()?, arm),
        Command::Report { inputs, out } => report(&inputs, &out),
    }
}

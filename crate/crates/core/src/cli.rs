//! The `rskt` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::ablation::{ablation_table, AblationSetup};
use crate::bench::report::overlap_table;
use crate::bench::speed::{speed_benchmark, WallClock};
use crate::bench::{evaluate, vocab_overlap, BenchmarkReport, DatasetManifest, GroundTruthCopy, Segmenter, Split};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::sample::ImageSample;
use crate::synth;
use crate::training::{load_checkpoint, loss_csv, save_checkpoint, train};
use crate::viz::{viz_cost, Stage};

#[derive(Parser, Debug)]
#[command(name = "rskt", version, about = "Open-vocabulary remote sensing segmentation toolkit")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set fusion.num_layers=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Predictor {
    Model,
    GroundTruth,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on `data.manifest`, writing a checkpoint and `loss.csv`.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate on one or more datasets (default: `data.eval`).
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        json: PathBuf,
        #[arg(long, value_enum, default_value = "model")]
        predictor: Predictor,
        manifests: Vec<PathBuf>,
    },
    /// Measure per-image inference latency and FPS.
    BenchSpeed {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long)]
        json: Option<PathBuf>,
        manifests: Vec<PathBuf>,
    },
    /// Count class names shared between a training set and test sets.
    VocabOverlap {
        train: PathBuf,
        tests: Vec<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write one heatmap per class for a pipeline stage.
    VizCost {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated class names.
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<String>,
        #[arg(long)]
        stage: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic labelled dataset and its manifest.
    SynthFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "fixture")]
        name: String,
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<String>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train and evaluate every fusion strategy and layer count.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
        layers: Vec<usize>,
    },
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value).expect("report serializes") + "\n"))
}

fn load_manifests(paths: &[PathBuf]) -> Result<Vec<DatasetManifest>> {
    if paths.is_empty() {
        return Err(Error::Config("no dataset manifests given".into()));
    }
    paths.iter().map(|p| DatasetManifest::load(p)).collect()
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    log::info!("resolved configuration:\n{}", cfg.to_toml());
    Ok(cfg)
}

fn model_for(cli: &Cli, checkpoint: Option<&Path>) -> Result<crate::model::RsktModel> {
    match checkpoint {
        Some(dir) => load_checkpoint(dir),
        None => config(cli)?.build_model(),
    }
}

#[derive(Serialize)]
struct OverlapRow {
    test: String,
    overlap: usize,
}

#[derive(Serialize)]
struct OverlapReport {
    train: String,
    rows: Vec<OverlapRow>,
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { out, seed } => {
            let mut overrides = cli.overrides.clone();
            if let Some(s) = seed {
                overrides.push(format!("train.seed={s}"));
                overrides.push(format!("model.seed={s}"));
            }
            let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
            log::info!("resolved configuration:\n{}", cfg.to_toml());
            let manifest = DatasetManifest::load(&cfg.train_manifest()?)?;
            let data: Vec<ImageSample> = manifest.samples()?.iter().map(crate::model::prepare).collect();
            let mut model = cfg.build_model()?;
            let vocab = model.vocabulary(manifest.classes.iter().cloned())?;
            let outcome = train(&mut model, &data, &vocab, &cfg.train)?;
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            save_checkpoint(&model, &outcome.groups, &out.join("checkpoint"))?;
            write(&out.join("loss.csv"), &loss_csv(&outcome.losses))?;
            write(&out.join("config.toml"), &cfg.to_toml())?;
            println!(
                "trained {} steps, final loss {:.6}",
                outcome.losses.len(),
                outcome.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Eval { checkpoint, json, predictor, manifests } => {
            let paths = if manifests.is_empty() {
                config(cli)?.data.eval.iter().map(PathBuf::from).collect()
            } else {
                manifests.clone()
            };
            let sets = load_manifests(&paths)?;
            let model;
            let seg: &dyn Segmenter = match predictor {
                Predictor::GroundTruth => &GroundTruthCopy,
                Predictor::Model => {
                    model = model_for(cli, checkpoint.as_deref())?;
                    &model
                }
            };
            let mut results = Vec::new();
            for m in &sets {
                results.push((m.name.clone(), evaluate(seg, m)?));
            }
            let report = BenchmarkReport::new(results)?;
            write_json(json, &report)?;
            print!("{}", report.markdown());
        }
        Command::BenchSpeed { checkpoint, warmup, iters, json, manifests } => {
            if *iters < 1 {
                return Err(Error::Config("--iters must be at least 1".into()));
            }
            let sets = load_manifests(manifests)?;
            let model = model_for(cli, checkpoint.as_deref())?;
            let mut inputs = Vec::new();
            for m in &sets {
                let vocab = model.vocabulary(m.classes.iter().cloned())?;
                inputs.push((m.name.clone(), m.samples()?, vocab));
            }
            let report = speed_benchmark(&model, &inputs, *warmup, *iters, &mut WallClock)?;
            if let Some(p) = json {
                write_json(p, &report)?;
            }
            print!("{}", report.markdown());
        }
        Command::VocabOverlap { train, tests, json } => {
            let t = DatasetManifest::load(train)?;
            let others = load_manifests(tests)?;
            let rows: Vec<(String, Vec<String>)> =
                others.iter().map(|m| (m.name.clone(), m.classes.clone())).collect();
            print!("{}", overlap_table(&t.name, &t.classes, &rows));
            if let Some(p) = json {
                let report = OverlapReport {
                    train: t.name.clone(),
                    rows: others
                        .iter()
                        .map(|m| OverlapRow {
                            test: m.name.clone(),
                            overlap: vocab_overlap(&t.classes, &m.classes),
                        })
                        .collect(),
                };
                write_json(p, &report)?;
            }
        }
        Command::VizCost { checkpoint, image, classes, stage, out } => {
            let stage: Stage = stage.parse()?;
            let model = model_for(cli, checkpoint.as_deref())?;
            let sample = ImageSample::load(image, None, crate::sample::DEFAULT_IGNORE)?;
            let vocab = model.vocabulary(classes.iter().map(|c| c.trim().to_string()))?;
            let files = viz_cost(&model, &sample, &vocab, stage, out)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::SynthFixture { out, name, classes, count, size, seed, noise, split } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                other => return Err(Error::Config(format!("unknown split {other:?}"))),
            };
            if *size == 0 || size % synth::BLOCK != 0 {
                return Err(Error::Config(format!("--size must be a positive multiple of {}", synth::BLOCK)));
            }
            let data = synth::dataset(*seed, *count, *size, classes.len(), *noise);
            let names: Vec<&str> = classes.iter().map(String::as_str).collect();
            let path = DatasetManifest::write_fixture(out, name, &names, split, &data)?;
            println!("{}", path.display());
        }
        Command::Ablate { out, layers } => {
            let cfg = config(cli)?;
            let manifest = DatasetManifest::load(&cfg.train_manifest()?)?;
            let train_set = manifest.samples()?;
            let eval_paths: Vec<PathBuf> = if cfg.data.eval.is_empty() {
                vec![cfg.train_manifest()?]
            } else {
                cfg.data.eval.iter().map(PathBuf::from).collect()
            };
            let mut eval_sets = Vec::new();
            for m in load_manifests(&eval_paths)? {
                eval_sets.push((m.name.clone(), m.classes.clone(), m.samples()?));
            }
            let setup = AblationSetup {
                model: cfg.model.clone(),
                fusion: cfg.fusion.clone(),
                decoder: cfg.decoder.clone(),
                train: cfg.train.clone(),
                classes: manifest.classes.clone(),
                train_set: &train_set,
                eval_sets,
            };
            let rows = setup.sweep(layers)?;
            let table = ablation_table(&rows);
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            write(&out.join("ablation.md"), &table)?;
            write_json(&out.join("ablation.json"), &rows)?;
            print!("{table}");
        }
    }
    Ok(())
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

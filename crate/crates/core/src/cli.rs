//! Command-line interface behind the `lfr` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analysis::{anchor_similarity_map, layer_report, similarity_pgm};
use crate::backbone::{dump_features, load_features, FeatureStack};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gradsuite::run_suite;
use crate::head::depth_pgm16;
use crate::image::DepthMap;
use crate::lfr::{SelectionHistogram, SelectionStrategy};
use crate::model::{Mode, Model};
use crate::parallel::worker_count;
use crate::synth::{encode_depth, generate_split, Sample, SceneSpec};
use crate::train::{constant_baseline, evaluate, mean_depth, model_from_checkpoint, train, Dataset, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "lfr", version, about = "Layer recombination for monocular depth on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic train/val split.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        no_hn: bool,
        #[arg(long)]
        no_multilevel: bool,
        /// Keep gates at zero.
        #[arg(long)]
        pin_gates: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Layer-wise statistics and anchor similarity maps.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of feature dumps, one per sample of the split.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long)]
        limit: Option<usize>,
        /// Anchor token index; the grid center by default.
        #[arg(long)]
        anchor: Option<usize>,
        /// Also write the feature dump of every sample here.
        #[arg(long)]
        dump_features: Option<PathBuf>,
    },
    /// Selection frequencies of each layer.
    SelectStats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Metrics of a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        /// Write predicted depth maps.
        #[arg(long)]
        save_depth: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub spec: SceneSpec,
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            spec: SceneSpec::default(),
            n_train: 8,
            n_val: 2,
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn pick(data: &Dataset, split: Split) -> &[Sample] {
    match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
    }
}

/// Run config from `--config` and `--seed`, with the seed applied to the
/// backbone as well.
pub fn run_config(common: &Common) -> Result<RunConfig> {
    let cfg: RunConfig = read_json(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

/// Model from a checkpoint, or freshly initialized from the run config.
fn load_model(checkpoint: Option<&Path>, common: &Common) -> Result<Model> {
    match checkpoint {
        Some(p) => model_from_checkpoint(&Checkpoint::load(p)?),
        None => {
            let cfg = run_config(common)?;
            cfg.validate()?;
            Model::init(&cfg.model)
        }
    }
}

pub fn cmd_generate(common: &Common, n_train: Option<usize>, n_val: Option<usize>) -> Result<()> {
    let mut cfg: GenerateConfig = read_json(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.spec.seed = s;
    }
    let manifest = generate_split(
        &cfg.spec,
        n_train.unwrap_or(cfg.n_train),
        n_val.unwrap_or(cfg.n_val),
        &common.out,
    )?;
    log::info!(
        "wrote {} train and {} val scenes to {}",
        manifest.train.len(),
        manifest.val.len(),
        common.out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    common: &Common,
    data: Option<&Path>,
    mode: Option<&str>,
    strategy: Option<&str>,
    no_hn: bool,
    no_multilevel: bool,
    pin_gates: bool,
    epochs: Option<usize>,
) -> Result<()> {
    let mut cfg = run_config(common)?;
    if let Some(d) = data {
        cfg.data = Some(d.to_path_buf());
    }
    if let Some(m) = mode {
        cfg.model.mode = m.parse::<Mode>()?;
    }
    if let Some(s) = strategy {
        cfg.model.strategy = s.parse::<SelectionStrategy>()?;
    }
    if no_hn {
        cfg.use_hn = false;
    }
    if no_multilevel {
        cfg.model.multilevel = false;
    }
    if pin_gates {
        cfg.pin_gates = true;
    }
    if let Some(e) = epochs {
        cfg.optim.epochs = e;
    }
    let data_path = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Config("no dataset given (--data or \"data\" in config)".into()))?;
    let data = Dataset::load(&data_path)?;
    let start = std::time::Instant::now();
    let out = train(&cfg, &data, &common.out, worker_count())?;
    log::info!(
        "trained {} epochs in {:.1?}; final val abs_rel {:.4}",
        out.log.len(),
        start.elapsed(),
        out.final_val.abs_rel
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_analyze(
    common: &Common,
    data: &Path,
    checkpoint: Option<&Path>,
    features: Option<&Path>,
    split: Split,
    limit: Option<usize>,
    anchor: Option<usize>,
    dump: Option<&Path>,
) -> Result<()> {
    let dataset = Dataset::load(data)?;
    let mut samples = pick(&dataset, split);
    if let Some(n) = limit {
        samples = &samples[..n.min(samples.len())];
    }
    let stacks: Vec<FeatureStack> = match features {
        Some(dir) => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "lfrd"))
                .collect();
            files.sort();
            if files.len() != samples.len() {
                return Err(Error::Config(format!(
                    "{} feature dumps for {} samples",
                    files.len(),
                    samples.len()
                )));
            }
            files.iter().map(|p| load_features(p)).collect::<Result<_>>()?
        }
        None => {
            let model = load_model(checkpoint, common)?;
            let workers = worker_count();
            crate::parallel::par_map(samples, workers, |_, s| model.features(&s.rgb))
                .into_iter()
                .collect::<Result<_>>()?
        }
    };
    if let Some(dir) = dump {
        ensure_dir(dir)?;
        for (s, st) in samples.iter().zip(&stacks) {
            dump_features(st, &dir.join(format!("sample_{:05}.lfrd", s.index)))?;
        }
    }
    let depths: Vec<DepthMap> = samples.iter().map(|s| s.depth.clone()).collect();
    let report = layer_report(&stacks, &depths, worker_count())?;
    ensure_dir(&common.out)?;
    write_bytes(&common.out.join("stats.json"), report.to_json()?.as_bytes())?;
    if let Some(first) = stacks.first() {
        let (rows, cols) = first.grid();
        let anchor = anchor.unwrap_or((rows / 2) * cols + cols / 2);
        for l in 1..=first.depth() {
            let map = anchor_similarity_map(first.tokens(l), anchor, (rows, cols))?;
            write_bytes(
                &common.out.join(format!("anchor_layer{l:02}.pgm")),
                &similarity_pgm(&map, rows, cols),
            )?;
        }
    }
    match report.r2_trend_spearman {
        Some(v) => log::info!("r2 trend spearman {v:.4}"),
        None => log::info!("r2 trend spearman undefined (constant R² profile)"),
    }
    Ok(())
}

pub fn cmd_select_stats(
    common: &Common,
    data: &Path,
    checkpoint: Option<&Path>,
    strategy: Option<&str>,
    split: Split,
) -> Result<()> {
    let model = load_model(checkpoint, common)?;
    let strategy = match strategy {
        Some(s) => s.parse::<SelectionStrategy>()?,
        None => model.cfg.strategy,
    };
    let dataset = Dataset::load(data)?;
    let samples = pick(&dataset, split);
    let selections: Vec<Vec<usize>> = crate::parallel::par_map(samples, worker_count(), |_, s| {
        let stack = model.features(&s.rgb)?;
        model.lfr.select_with(&model.store, &stack, strategy)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let hist = SelectionHistogram::from_selections(strategy, model.cfg.k, model.cfg.backbone.depth, &selections);
    ensure_dir(&common.out)?;
    write_json(&common.out.join("selection_hist.json"), &hist)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    pub index: u64,
    pub weights: Vec<f64>,
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    /// Mean training depth predicted everywhere.
    pub constant_depth: f64,
    pub abs_rel: f64,
    pub model_abs_rel: f64,
}

pub fn cmd_eval(common: &Common, data: &Path, checkpoint: &Path, split: Split, save_depth: bool) -> Result<()> {
    let model = model_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let caps = Checkpoint::load(checkpoint)?.config.caps;
    let dataset = Dataset::load(data)?;
    let samples = pick(&dataset, split);
    let (report, preds) = evaluate(&model, samples, caps, worker_count())?;
    ensure_dir(&common.out)?;
    write_json(&common.out.join("metrics.json"), &report)?;
    let weights: Vec<SampleWeights> = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| SampleWeights {
            index: s.index,
            weights: p.level_weights.clone(),
            selected: p.selected.clone(),
        })
        .collect();
    write_json(&common.out.join("level_weights.json"), &weights)?;
    let md = mean_depth(&dataset.train);
    let base = constant_baseline(md, samples, caps)?;
    write_json(
        &common.out.join("baseline.json"),
        &BaselineReport {
            constant_depth: md,
            abs_rel: base.abs_rel,
            model_abs_rel: report.abs_rel,
        },
    )?;
    if save_depth {
        for (s, p) in samples.iter().zip(&preds) {
            let (h, w) = (s.depth.height, s.depth.width);
            write_bytes(&common.out.join(format!("pred_{:05}.pgm", s.index)), &depth_pgm16(&p.depth, h, w))?;
            let dm = DepthMap::new(h, w, p.depth.clone())?;
            write_bytes(&common.out.join(format!("pred_{:05}.depth", s.index)), &encode_depth(&dm))?;
        }
    }
    log::info!("abs_rel {:.4} (constant baseline {:.4})", report.abs_rel, base.abs_rel);
    Ok(())
}

/// Runs the suite, prints one line per check, and returns whether all passed.
pub fn cmd_gradcheck(out: Option<&Path>) -> Result<bool> {
    let start = std::time::Instant::now();
    let results = run_suite()?;
    for r in &results {
        println!(
            "{} {:<16} max_rel_err {:.3e} (tol {:.0e}){}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.tolerance,
            r.detail.as_ref().map(|d| format!(": {d}")).unwrap_or_default()
        );
    }
    log::info!("gradient suite finished in {:.1?}", start.elapsed());
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_json(&dir.join("gradcheck.json"), &results)?;
    }
    Ok(results.iter().all(|r| r.passed))
}

pub fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Generate { common, train, val } => cmd_generate(&common, train, val)?,
        Command::Train {
            common,
            data,
            mode,
            strategy,
            no_hn,
            no_multilevel,
            pin_gates,
            epochs,
        } => cmd_train(
            &common,
            data.as_deref(),
            mode.as_deref(),
            strategy.as_deref(),
            no_hn,
            no_multilevel,
            pin_gates,
            epochs,
        )?,
        Command::Analyze {
            common,
            data,
            checkpoint,
            features,
            split,
            limit,
            anchor,
            dump_features,
        } => cmd_analyze(
            &common,
            &data,
            checkpoint.as_deref(),
            features.as_deref(),
            split,
            limit,
            anchor,
            dump_features.as_deref(),
        )?,
        Command::SelectStats {
            common,
            data,
            checkpoint,
            strategy,
            split,
        } => cmd_select_stats(&common, &data, checkpoint.as_deref(), strategy.as_deref(), split)?,
        Command::Eval {
            common,
            data,
            checkpoint,
            split,
            save_depth,
        } => cmd_eval(&common, &data, &checkpoint, split, save_depth)?,
        Command::Gradcheck { out } => {
            if !cmd_gradcheck(out.as_deref())? {
                return Ok(3);
            }
        }
    }
    Ok(0)
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 success, 1 usage, 2 data error, 3 numeric failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

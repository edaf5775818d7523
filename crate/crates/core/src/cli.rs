// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `slcbm` command line tool.
//!
//! Exit status is 0 on success, 1 for invalid input (bad flags, configs,
//! datasets or vocabularies) and 2 for runtime failures. Every output file is
//! written through a temp file and a rename. Set `SLCBM_LOG` to `debug`,
//! `info` or `warn` (default) to control log output on stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::dataset::{generate_dataset, load_dataset, save_dataset, Dataset, SynthSpec};
use crate::error::{ensure, Error, Result};
use crate::intervention::{
    intervention_curve, InterventionPolicy, PolicyKind, ReplacementCalibration,
};
use crate::metrics::Level;
use crate::model::HeadKind;
use crate::numeric::{argmax, order_descending, write_atomic};
use crate::render::{overlay, plot_curves, save_png};
use crate::trainer::{
    ablate, evaluate, log_to_jsonl, model_for, train, AblationCell, Checkpoint, TrainConfig,
};

const TOP_CONCEPTS: usize = 5;

#[derive(Debug, Parser)]
#[command(
    name = "slcbm",
    version,
    about = "Concept bottleneck classifier with concept and class saliency maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset.
    GenerateData(GenerateArgs),
    /// Train a head and write a checkpoint plus a JSON-lines training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split and write a JSON report.
    Evaluate(EvaluateArgs),
    /// Task error against the number of corrected concepts.
    Intervene(InterveneArgs),
    /// Train and evaluate over a grid of loss weights and data fractions.
    Ablate(AblateArgs),
    /// Write saliency overlays for test samples.
    RenderSaliency(RenderArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Samples per class (80% train, 20% test).
    #[arg(long, default_value_t = 300)]
    samples_per_class: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

#[derive(Debug, Args)]
struct TrainOverrides {
    /// TOML training config; flags below override its values [default: built-in settings].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed [default: from config, else 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Head to train [default: from config, else slcbm].
    #[arg(long, value_enum)]
    head: Option<HeadKind>,
    /// Weight of the saliency entropy loss [default: from config, else 5].
    #[arg(long)]
    lambda_e: Option<f64>,
    /// Weight of the contrastive loss [default: from config, else 0].
    #[arg(long)]
    lambda_c: Option<f64>,
    /// Fraction of the training split to use [default: from config, else 1].
    #[arg(long)]
    fraction: Option<f64>,
}

impl TrainOverrides {
    fn resolve(&self, data: Option<&Path>) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.head {
            cfg.head = v;
        }
        if let Some(v) = self.lambda_e {
            cfg.loss.lambda_e = v;
        }
        if let Some(v) = self.lambda_c {
            cfg.loss.lambda_c = v;
        }
        if let Some(v) = self.fraction {
            cfg.data_fraction = v;
        }
        if let Some(d) = data {
            cfg.dataset = Some(d.to_path_buf());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Dataset directory [default: `dataset` from config].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output checkpoint file; the log goes to `<out>.log.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Report file [default: print to stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InterveneArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Concept selection policy.
    #[arg(long, value_enum, default_value_t = PolicyKind::Rand)]
    policy: PolicyKind,
    /// Intervention counts as start:stop:step, meaning start, start+step, ...
    /// below stop, then stop itself [default: 0:C:1].
    #[arg(long)]
    counts: Option<String>,
    /// Repeats for the random policy.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Seed for the random policy.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Table file [default: print to stdout]; a `.png` path writes a plot instead.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// TOML base config [default: built-in settings].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory [default: `dataset` from config].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Base seed [default: from config, else 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Head to train [default: from config, else slcbm].
    #[arg(long, value_enum)]
    head: Option<HeadKind>,
    /// Comma-separated entropy weights.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.5,1,1.5,2,5,10")]
    lambda_e: Vec<f64>,
    /// Comma-separated contrastive weights.
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    lambda_c: Vec<f64>,
    /// Comma-separated training-data fractions.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    fraction: Vec<f64>,
    /// Output JSON file with one entry per grid cell.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Sample ids to render [default: the first `--samples` test samples].
    #[arg(long = "id")]
    ids: Vec<String>,
    /// Number of test samples when no `--id` is given.
    #[arg(long, default_value_t = 4)]
    samples: usize,
    /// Render only concept or only class maps [default: both].
    #[arg(long, value_enum)]
    level: Option<Level>,
}

/// Parses `start:stop:step`.
pub fn parse_counts(spec: &str) -> Result<Vec<usize>> {
    let parts: Vec<&str> = spec.split(':').collect();
    ensure!(
        parts.len() == 3,
        "counts must look like start:stop:step, got `{spec}`"
    );
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Validation(format!("bad count `{p}` in `{spec}`")))
        })
        .collect::<Result<_>>()?;
    let (start, stop, step) = (nums[0], nums[1], nums[2]);
    ensure!(step > 0, "count step must be positive");
    ensure!(start <= stop, "count start {start} exceeds stop {stop}");
    let mut out: Vec<usize> = (start..stop).step_by(step).collect();
    out.push(stop);
    Ok(out)
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("SLCBM_LOG", "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

/// Runs the tool on `argv` (program name first) and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Intervene(a) => run_intervene(a),
        Command::Ablate(a) => run_ablate(a),
        Command::RenderSaliency(a) => run_render(a),
    }
}

fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dataset_path(data: Option<&Path>, cfg: &TrainConfig) -> Result<PathBuf> {
    data.map(Path::to_path_buf)
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| {
            Error::Validation("no dataset given: pass --data or set `dataset` in the config".into())
        })
}

fn generate(a: GenerateArgs) -> Result<()> {
    let spec = SynthSpec {
        image_size: a.image_size,
        samples_per_class: a.samples_per_class,
        seed: a.seed,
        ..Default::default()
    };
    let d = generate_dataset(&spec)?;
    save_dataset(&d, &a.out)?;
    info!(
        "wrote {} train / {} test samples to {}",
        d.train.len(),
        d.test.len(),
        a.out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = a.overrides.resolve(a.data.as_deref())?;
    let data = load_dataset(&dataset_path(a.data.as_deref(), &cfg)?)?;
    let (ckpt, log) = train(&cfg, &data)?;
    ckpt.save(&a.out)?;
    let mut log_path = a.out.clone().into_os_string();
    log_path.push(".log.jsonl");
    write_atomic(Path::new(&log_path), log_to_jsonl(&log).as_bytes())
}

fn load_pair(ckpt: &Path, data: &Path) -> Result<(Checkpoint, Dataset)> {
    Ok((Checkpoint::load(ckpt)?, load_dataset(data)?))
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let (ckpt, data) = load_pair(&a.ckpt, &a.data)?;
    let report = evaluate(&ckpt, &data)?;
    write_text(a.out.as_deref(), &report.to_json())
}

fn run_intervene(a: InterveneArgs) -> Result<()> {
    let (ckpt, data) = load_pair(&a.ckpt, &a.data)?;
    let model = model_for(&ckpt, &data)?;
    let c = data.num_concepts();
    let counts = match &a.counts {
        Some(spec) => parse_counts(spec)?,
        None => (0..=c).collect(),
    };
    let calib = ReplacementCalibration::from_model(&model, &data.train)?;
    let policy = InterventionPolicy::new(a.policy, a.seed);
    let curve = intervention_curve(&model, &data.test, &calib, &policy, &counts, a.repeats)?;
    match a.out.as_deref() {
        Some(path) if path.extension().is_some_and(|e| e == "png") => {
            save_png(&plot_curves(&[curve], 480, 320), path)
        }
        out => write_text(out, &curve.to_table()),
    }
}

#[derive(Serialize)]
struct AblationOutput<'a> {
    base: &'a TrainConfig,
    cells: &'a [AblationCell],
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let overrides = TrainOverrides {
        config: a.config.clone(),
        seed: a.seed,
        head: a.head,
        lambda_e: None,
        lambda_c: None,
        fraction: None,
    };
    let base = overrides.resolve(a.data.as_deref())?;
    let data = load_dataset(&dataset_path(a.data.as_deref(), &base)?)?;
    let cells = ablate(&base, &data, &a.lambda_e, &a.lambda_c, &a.fraction)?;
    let mut json = serde_json::to_string_pretty(&AblationOutput {
        base: &base,
        cells: &cells,
    })
    .expect("ablation output serializes");
    json.push('\n');
    write_atomic(&a.out, json.as_bytes())
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn run_render(a: RenderArgs) -> Result<()> {
    let (ckpt, data) = load_pair(&a.ckpt, &a.data)?;
    let model = model_for(&ckpt, &data)?;
    let samples: Vec<_> = if a.ids.is_empty() {
        data.test.iter().take(a.samples).collect()
    } else {
        a.ids
            .iter()
            .map(|id| {
                data.test
                    .iter()
                    .chain(&data.train)
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::Validation(format!("no sample with id `{id}`")))
            })
            .collect::<Result<_>>()?
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for s in samples {
        let features = model.encode(&s.image)?;
        let trace = model.trace(&features);
        save_png(&s.image, &a.out.join(format!("{}_original.png", s.id)))?;
        if a.level != Some(Level::Class) {
            let ranked = order_descending(&trace.f);
            for (rank, &i) in ranked.iter().take(TOP_CONCEPTS).enumerate() {
                let name = sanitize(data.vocab.name(i));
                let img = overlay(&s.image, &trace.saliency.map(i));
                save_png(
                    &img,
                    &a.out
                        .join(format!("{}_concept{}_{name}.png", s.id, rank + 1)),
                )?;
            }
        }
        if a.level != Some(Level::Concept) {
            let predicted = argmax(&trace.logits);
            let map = model.class_map(&trace, &features, predicted)?;
            let name = sanitize(&data.class_names[predicted]);
            save_png(
                &overlay(&s.image, &map),
                &a.out.join(format!("{}_class_{name}.png", s.id)),
            )?;
        }
    }
    Ok(())
}

//! Command-line front end for the `dln` library.
//!
//! Every subcommand is a plain function writing its report to the given
//! sink, so the binary and the tests share one code path.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dln::data::{
    cluster_purity, export_summaries, gen_synthetic, load_dataset, modal_frequency, save_dataset, write_summaries,
    Batch, SyntheticSpec, Utterance,
};
use dln::gradcheck::grad_check;
use dln::params::ParamVars;
use dln::recurrent::{checkpoint, count_params, format_millions, format_thousands};
use dln::train::{batch_loss, frame_error_rate, init_model, train, EpochMetrics};
use dln::{StackConfig, Tensor, TrainConfig};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name of the per-epoch log written next to a trained checkpoint.
pub const LOG_FILE: &str = "train_log.tsv";
/// Split directories created by `gen-data`.
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Parser, Debug)]
#[command(name = "dln", version, about = "Dynamic layer normalization for bidirectional LSTMP acoustic models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-speaker corpus as train/dev/test containers.
    GenData(GenDataArgs),
    /// Train a model and write the best-dev checkpoint plus the epoch log.
    Train(TrainArgs),
    /// Print the frame error rate of a checkpoint on each data split.
    Eval(EvalArgs),
    /// Print the exact trainable parameter count of a configuration.
    CountParams(CountParamsArgs),
    /// Check analytic gradients of a tiny random model against finite differences.
    GradCheck(GradCheckArgs),
    /// Write per-utterance summary vectors and report their speaker cluster purity.
    ExportSummaries(ExportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Total number of speakers, held-out speakers included.
    #[arg(long, default_value_t = 16)]
    pub speakers: usize,
    /// Utterances generated per speaker.
    #[arg(long, default_value_t = 167)]
    pub utts_per_speaker: usize,
    /// Frame dimension.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Number of frame classes.
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    /// Shortest utterance, in frames.
    #[arg(long, default_value_t = 20)]
    pub len_min: usize,
    /// Longest utterance, in frames.
    #[arg(long, default_value_t = 40)]
    pub len_max: usize,
    /// Standard deviation of the additive frame noise.
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    /// Speakers whose utterances form the dev split.
    #[arg(long, default_value_t = 2)]
    pub dev_speakers: usize,
    /// Speakers whose utterances form the test split.
    #[arg(long, default_value_t = 2)]
    pub test_speakers: usize,
    /// Random seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output directory; receives train/, dev/ and test/.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run configuration (`stack`, `train`, `data`); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory with train/ and optionally dev/ containers [default: paths from the config].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generate gate LN parameters per utterance [default: from the config, off].
    #[arg(long, value_enum)]
    pub dln: Option<Switch>,
    /// Weight of the summary variance penalty [default: from the config, 0].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Training epochs [default: from the config, 10].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed for initialization and shuffling [default: from the config, 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    /// A dataset container, or a corpus directory whose train/dev/test splits are all scored.
    #[arg(long)]
    pub data: PathBuf,
    /// Utterances per evaluation batch.
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct CountParamsArgs {
    /// Preset name (wsj-baseline, wsj-dln, ted-baseline, ted-dln) or JSON run configuration.
    #[arg(long, default_value = "wsj-baseline")]
    pub config: String,
    /// Override whether LN parameters are generated [default: from the config].
    #[arg(long, value_enum)]
    pub dln: Option<Switch>,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    /// JSON run configuration whose `stack` replaces the built-in tiny model
    /// (2 layers, 8 cells, 4 projections, 3-dim summary, 5 inputs, 4 classes).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generate gate LN parameters [default: on for the built-in model, else from the config].
    #[arg(long, value_enum)]
    pub dln: Option<Switch>,
    /// Variance penalty weight [default: 10 for the built-in model, else from the config].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Seed for the random model and batch.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// DLN checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    /// A dataset container, or a corpus directory whose splits are concatenated.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated 1-based layers [default: all layers].
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    /// Output TSV file.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for k-means.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// Dataset container locations of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

/// The JSON configuration document accepted by `train`, `count-params`
/// and `grad-check`. Missing sections and fields take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub stack: StackConfig,
    pub train: TrainConfig,
    pub data: DataPaths,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Runs one command. `Ok(false)` means the command completed but its check
/// failed (only `grad-check` reports this).
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<bool> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a, out).map(|_| true),
        Command::Train(a) => cmd_train(&a, out).map(|_| true),
        Command::Eval(a) => cmd_eval(&a, out).map(|_| true),
        Command::CountParams(a) => cmd_count_params(&a, out).map(|_| true),
        Command::GradCheck(a) => cmd_grad_check(&a, out),
        Command::ExportSummaries(a) => cmd_export_summaries(&a, out).map(|_| true),
    }
}

/// Parses `args` (without the program name) and runs the command.
pub fn run_args<I, S>(args: I, out: &mut dyn Write) -> anyhow::Result<bool>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(std::iter::once("dln".into()).chain(args.into_iter().map(Into::into)))?;
    run(cli, out)
}

fn split_stats(name: &str, data: &[Utterance]) -> String {
    let speakers: BTreeSet<&str> = data.iter().map(|u| u.speaker.as_str()).collect();
    let frames: usize = data.iter().map(Utterance::len).sum();
    format!(
        "{name}: {} speakers, {} utterances, {} frames",
        speakers.len(),
        data.len(),
        format_thousands(frames as u64)
    )
}

pub fn cmd_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        num_speakers: a.speakers,
        utterances_per_speaker: a.utts_per_speaker,
        frame_dim: a.dim,
        num_classes: a.classes,
        min_len: a.len_min,
        max_len: a.len_max,
        noise: a.noise,
        dev_speakers: a.dev_speakers,
        test_speakers: a.test_speakers,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    let corpus = gen_synthetic(&spec)?;
    for (name, data) in SPLITS.iter().zip([&corpus.train, &corpus.dev, &corpus.test]) {
        let dir = a.out.join(name);
        save_dataset(data, &dir).with_context(|| format!("writing {}", dir.display()))?;
        writeln!(out, "{}", split_stats(name, data))?;
    }
    Ok(())
}

/// Loads `path` as a single container (named after the directory) or as a
/// corpus directory holding any of the standard splits.
pub fn load_splits(path: &Path) -> anyhow::Result<Vec<(String, Vec<Utterance>)>> {
    if path.join(checkpoint::MANIFEST_FILE).is_file() {
        let name = path
            .file_name()
            .map_or_else(|| "data".to_string(), |n| n.to_string_lossy().into_owned());
        return Ok(vec![(name, load_dataset(path)?)]);
    }
    let mut splits = Vec::new();
    for name in SPLITS {
        let dir = path.join(name);
        if dir.is_dir() {
            let data = load_dataset(&dir).with_context(|| format!("reading {}", dir.display()))?;
            splits.push((name.to_string(), data));
        }
    }
    ensure!(!splits.is_empty(), "{} is neither a dataset container nor a corpus directory", path.display());
    Ok(splits)
}

/// Rejects data whose frame dimension or labels do not fit `cfg`.
pub fn check_compatible(cfg: &StackConfig, data: &[Utterance], what: &str) -> anyhow::Result<()> {
    for u in data {
        ensure!(
            u.dim() == cfg.input_dim,
            "{what}: utterance {} has {}-dim frames but the model expects {}",
            u.id,
            u.dim(),
            cfg.input_dim
        );
        if let Some(&l) = u.labels.iter().find(|&&l| l >= cfg.num_classes) {
            bail!(
                "{what}: utterance {} has label {l} but the model has {} classes",
                u.id,
                cfg.num_classes
            );
        }
    }
    Ok(())
}

fn log_text(log: &[EpochMetrics]) -> String {
    let mut s = String::from(EpochMetrics::HEADER);
    s.push('\n');
    for m in log {
        s.push_str(&m.log_line(false));
        s.push('\n');
    }
    s
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.dln {
        rc.stack.dln = s.is_on();
    }
    if let Some(l) = a.lambda {
        rc.stack.lambda = l;
    }
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    if let Some(root) = &a.data {
        rc.data.train = Some(root.join("train"));
        let dev = root.join("dev");
        rc.data.dev = dev.is_dir().then_some(dev);
    }
    rc.stack.validate()?;
    rc.train.validate()?;

    let train_path = rc.data.train.as_ref().context("no training data: pass --data or set data.train")?;
    let train_set = load_dataset(train_path).with_context(|| format!("reading {}", train_path.display()))?;
    ensure!(!train_set.is_empty(), "training set {} is empty", train_path.display());
    let dev_set = match &rc.data.dev {
        Some(p) => load_dataset(p).with_context(|| format!("reading {}", p.display()))?,
        None => Vec::new(),
    };
    check_compatible(&rc.stack, &train_set, "train")?;
    check_compatible(&rc.stack, &dev_set, "dev")?;

    writeln!(out, "{}", split_stats("train", &train_set))?;
    if !dev_set.is_empty() {
        writeln!(out, "{}", split_stats("dev", &dev_set))?;
    }
    let model = init_model(rc.stack.clone(), rc.train.seed)?;
    writeln!(out, "parameters: {}", format_thousands(model.num_params() as u64))?;
    writeln!(out, "{}\twall_secs", EpochMetrics::HEADER)?;
    let mut write_err = None;
    let outcome = train(model, &train_set, &dev_set, &rc.train, |m| {
        if let Err(e) = writeln!(out, "{}", m.log_line(true)) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    checkpoint::save(&outcome.best, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    fs::write(a.out.join(LOG_FILE), log_text(&outcome.log))?;
    writeln!(
        out,
        "best epoch {} written to {}",
        outcome.best_epoch,
        a.out.display()
    )?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    ensure!(a.batch_size > 0, "--batch-size must be positive");
    let model = checkpoint::load(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    for (name, data) in load_splits(&a.data)? {
        check_compatible(model.config(), &data, &name)?;
        if data.is_empty() {
            writeln!(out, "{name} FER -")?;
            continue;
        }
        let fer = frame_error_rate(&model, &data, a.batch_size)?;
        writeln!(out, "{name} FER {fer:.2}%")?;
    }
    Ok(())
}

/// Resolves a preset name or a run-configuration path to a stack config.
pub fn resolve_stack(spec: &str) -> anyhow::Result<StackConfig> {
    if let Some(cfg) = StackConfig::preset(spec) {
        return Ok(cfg);
    }
    let path = Path::new(spec);
    ensure!(
        path.is_file(),
        "{spec} is neither a preset ({}) nor a configuration file",
        dln::config::PRESETS.join(", ")
    );
    Ok(RunConfig::load(path)?.stack)
}

pub fn cmd_count_params(a: &CountParamsArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg = resolve_stack(&a.config)?;
    if let Some(s) = a.dln {
        cfg.dln = s.is_on();
    }
    cfg.validate()?;
    let n = count_params(&cfg);
    writeln!(out, "{} ({})", format_thousands(n), format_millions(n))?;
    Ok(())
}

/// The model used by `grad-check` when no configuration is given.
pub fn grad_check_default_stack() -> StackConfig {
    StackConfig {
        num_layers: 2,
        cell_size: 8,
        proj_size: 4,
        input_dim: 5,
        num_classes: 4,
        dln: true,
        summary_size: 3,
        lambda: 10.0,
        ..StackConfig::default()
    }
}

/// Lengths of the random utterances in the grad-check batch.
pub const GRAD_CHECK_LENGTHS: [usize; 2] = [5, 4];

pub fn cmd_grad_check(a: &GradCheckArgs, out: &mut dyn Write) -> anyhow::Result<bool> {
    ensure!(a.tolerance > 0.0, "--tolerance must be positive");
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?.stack,
        None => grad_check_default_stack(),
    };
    if let Some(s) = a.dln {
        cfg.dln = s.is_on();
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    cfg.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut model = init_model(cfg.clone(), a.seed)?;
    // move away from the symmetric initial point (zero shifts, unit scales)
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let utts: Vec<Utterance> = GRAD_CHECK_LENGTHS
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let frames: Vec<f64> = (0..len * cfg.input_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            let labels = (0..len).map(|_| rng.random_range(0..cfg.num_classes)).collect();
            Utterance::new(
                format!("u{i}"),
                format!("s{i}"),
                Tensor::matrix(len, cfg.input_dim, frames)?,
                labels,
            )
        })
        .collect::<dln::Result<_>>()?;
    let refs: Vec<&Utterance> = utts.iter().collect();
    let batch = Batch::from_utterances(&refs)?;

    let report = grad_check(
        |g, vars| {
            let vars = ParamVars::from_vars(vars.to_vec());
            Ok(batch_loss(&model, g, &vars, &batch)?.total)
        },
        model.params().tensors(),
        a.step,
    )?;
    let (name, _) = model.params().iter().nth(report.worst_param).expect("worst parameter exists");
    let passed = report.max_rel_error <= a.tolerance;
    writeln!(
        out,
        "{} max relative error {:.3e} (tolerance {:.1e}) over {} coordinates",
        if passed { "PASS" } else { "FAIL" },
        report.max_rel_error,
        a.tolerance,
        report.coordinates
    )?;
    writeln!(
        out,
        "worst coordinate {name}[{}]: analytic {:.12e}, numeric {:.12e}",
        report.worst_index, report.analytic, report.numeric
    )?;
    Ok(passed)
}

/// Purity of one layer/direction group of exported summaries.
#[derive(Clone, Debug, PartialEq)]
pub struct PurityLine {
    pub layer: usize,
    pub direction: String,
    pub purity: f64,
}

pub fn cmd_export_summaries(a: &ExportArgs, out: &mut dyn Write) -> anyhow::Result<Vec<PurityLine>> {
    let model = checkpoint::load(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let data: Vec<Utterance> = load_splits(&a.data)?.into_iter().flat_map(|(_, d)| d).collect();
    ensure!(!data.is_empty(), "no utterances in {}", a.data.display());
    check_compatible(model.config(), &data, "data")?;
    let layers: Vec<usize> = if a.layers.is_empty() {
        (1..=model.config().num_layers).collect()
    } else {
        a.layers.clone()
    };
    let records = export_summaries(&model, &data, &layers)?;
    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_summaries(&records, std::io::BufWriter::new(file))?;

    let labels: Vec<&str> = data.iter().map(|u| u.speaker.as_str()).collect();
    let k = labels.iter().collect::<BTreeSet<_>>().len();
    writeln!(out, "{} records written to {}", records.len(), a.out.display())?;
    writeln!(out, "speakers {k}, chance purity {:.4}", modal_frequency(&labels))?;
    let mut lines = Vec::new();
    for &l in &layers {
        for dir in ["fwd", "bwd"] {
            let pts: Vec<Vec<f64>> = records
                .iter()
                .filter(|r| r.layer == l && r.direction.tag() == dir)
                .map(|r| r.values.clone())
                .collect();
            let purity = cluster_purity(&pts, &labels, k, a.seed)?;
            writeln!(out, "layer {l} {dir} purity {purity:.4}")?;
            lines.push(PurityLine {
                layer: l,
                direction: dir.to_string(),
                purity,
            });
        }
    }
    Ok(lines)
}

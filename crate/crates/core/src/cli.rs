//! Command-line front end. `run` returns the process exit status: 0 on
//! success, 1 on a runtime error, 2 on a usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::attack::{default_stop_accuracy, run_attack, AttackConfig};
use crate::baseline::{
    float_exponent_flip, layer_restricted_attack, random_quantized_flips, BaselineMode,
    TOP_EXPONENT_BIT,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{detect_format, load_dataset, save_idx_split, write_csv, Dataset, Split};
use crate::eval::TestSetValidator;
use crate::model::{ModelGraph, ParamMode};
use crate::report::{
    flips_to_threshold, median, read_trace_csv, write_trace_csv, Summary, TrialSummary,
};
use crate::sample::draw_attack_sample;
use crate::train::{desk_cnn, linear, train_victim, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "bfa",
    version,
    about = "Bit-flip attacks on quantized neural networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic digit dataset into a data directory.
    Synth(SynthArgs),
    /// Train a float victim model and save its checkpoint.
    Train(TrainArgs),
    /// Quantize a float checkpoint layer-wise.
    Quantize(QuantizeArgs),
    /// Run progressive bit search and write trace CSVs plus a summary.
    Attack(AttackArgs),
    /// Run a control experiment: random flips, an exponent flip, or PBS on a layer subset.
    Baseline(BaselineArgs),
    /// Print summaries or recompute statistics from trace CSVs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum FileFormat {
    Idx,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Arch {
    /// Two conv blocks and two fully-connected layers, for 28x28 inputs.
    Cnn,
    /// A single fully-connected layer.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ModeArg {
    /// Uniform random bit flips on the quantized model.
    Random,
    /// One exponent-bit flip on a float weight.
    FloatExponent,
    /// PBS restricted to --layers with a fixed flip budget.
    LayerRestricted,
}

impl From<ModeArg> for BaselineMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Random => BaselineMode::RandomQuantized,
            ModeArg::FloatExponent => BaselineMode::FloatExponent,
            ModeArg::LayerRestricted => BaselineMode::LayerRestricted,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Output data directory.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    /// Training images.
    #[arg(long, default_value_t = 6000)]
    pub train: usize,
    /// Test images.
    #[arg(long, default_value_t = 1000)]
    pub test: usize,
    /// Seed of the training split; the test split uses seed + 1.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "idx")]
    pub format: FileFormat,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Output checkpoint.
    pub out: PathBuf,
    /// Data directory holding the train and test splits.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "cnn")]
    pub arch: Arch,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.02)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Seed for weight initialisation and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct QuantizeArgs {
    /// Float checkpoint to read.
    pub input: PathBuf,
    /// Quantized checkpoint to write.
    pub output: PathBuf,
    /// Bit width of the weight codes.
    #[arg(long, default_value_t = 8)]
    pub nq: u32,
}

#[derive(Debug, Args, Serialize)]
pub struct AttackArgs {
    /// Victim checkpoint. Float checkpoints are quantized with --nq first.
    pub model: PathBuf,
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Output directory for trace CSVs and summary.json.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Base seed; trial t draws its sample with seed + t.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bit width used when the victim is a float checkpoint.
    #[arg(long, default_value_t = 8)]
    pub nq: u32,
    /// Bits committed per iteration.
    #[arg(long, default_value_t = 1)]
    pub nb: usize,
    /// Attack sample size drawn from the test split.
    #[arg(long, default_value_t = 128)]
    pub sample_size: usize,
    /// Stop once test top-1 is at or below this; defaults to random guess + 0.01.
    #[arg(long)]
    pub stop_acc: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Largest Hamming distance from the clean bits.
    #[arg(long)]
    pub budget: Option<u64>,
    /// Comma-separated weighted-layer indices open to the attack.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct BaselineArgs {
    /// Victim checkpoint. Quantized modes quantize float checkpoints with --nq;
    /// float-exponent mode needs a float checkpoint.
    pub model: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Base seed; trial t uses seed + t.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub nq: u32,
    /// Bits committed per iteration in layer-restricted mode.
    #[arg(long, default_value_t = 1)]
    pub nb: usize,
    /// Attack sample size in layer-restricted mode.
    #[arg(long, default_value_t = 128)]
    pub sample_size: usize,
    /// Number of flips.
    #[arg(long, default_value_t = 100)]
    pub budget: usize,
    /// Comma-separated weighted-layer indices for layer-restricted mode.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Float bit flipped in float-exponent mode (31 is the sign).
    #[arg(long, default_value_t = TOP_EXPONENT_BIT)]
    pub exp_bit: u32,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// summary.json files or trace CSVs.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    /// Accuracy threshold for N_flip-to-threshold over CSVs.
    #[arg(long, default_value_t = 0.11)]
    pub threshold: f64,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Quantize(a) => quantize(a),
        Command::Attack(a) => attack(a),
        Command::Baseline(a) => baseline(a),
        Command::Report(a) => report(a),
    }
}

fn load_split(dir: &Path, split: Split, shape: Option<&[usize]>) -> anyhow::Result<Dataset> {
    let Some(format) = detect_format(dir, split) else {
        bail!("no {split:?} split found in {}", dir.display());
    };
    let data = load_dataset(dir, split, format)
        .with_context(|| format!("loading {split:?} split from {}", dir.display()))?;
    Ok(match shape {
        Some(s) => data.with_sample_shape(s)?,
        None => data,
    })
}

fn load_model(path: &Path) -> anyhow::Result<ModelGraph> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn quantized_victim(path: &Path, n_q: u32) -> anyhow::Result<ModelGraph> {
    let model = load_model(path)?;
    Ok(match model.mode() {
        ParamMode::Quantized => model,
        ParamMode::Float => model.quantize(n_q)?,
    })
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    fs::create_dir_all(&a.out)?;
    for (split, n, seed) in [
        (Split::Train, a.train, a.seed),
        (Split::Test, a.test, a.seed + 1),
    ] {
        let data = crate::synth::digits(n, seed)?;
        match a.format {
            FileFormat::Idx => save_idx_split(&a.out, split, &data)?,
            FileFormat::Csv => {
                let name = if split == Split::Train {
                    "train.csv"
                } else {
                    "test.csv"
                };
                write_csv(&a.out.join(name), &data)?
            }
        }
    }
    println!(
        "wrote {} train / {} test images to {}",
        a.train,
        a.test,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let train = load_split(&a.data, Split::Train, None)?;
    let test = load_split(&a.data, Split::Test, None)?;
    let (shape, specs) = match a.arch {
        Arch::Cnn => desk_cnn(),
        Arch::Linear => linear(train.sample_shape().iter().product(), train.num_classes()),
    };
    let train = train.with_sample_shape(&shape)?;
    let test = test.with_sample_shape(&shape)?;
    let model = ModelGraph::init(shape, &specs, a.seed)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        momentum: a.momentum,
        seed: a.seed,
    };
    let out = train_victim(&model, &train, &test, &config)?;
    save_checkpoint(&out.model, &a.out)?;
    println!(
        "train top-1 {:.4}  test top-1 {:.4}  weights {}  -> {}",
        out.train_accuracy,
        out.test_accuracy,
        out.model.num_weights(),
        a.out.display()
    );
    Ok(())
}

fn quantize(a: QuantizeArgs) -> anyhow::Result<()> {
    let model = load_model(&a.input)?;
    model.require_mode(ParamMode::Float)?;
    let q = model.quantize(a.nq)?;
    save_checkpoint(&q, &a.output)?;
    println!(
        "quantized {} weights to {} bits -> {}",
        q.num_weights(),
        a.nq,
        a.output.display()
    );
    Ok(())
}

fn trial_csv(out: &Path, prefix: &str, trial: usize) -> PathBuf {
    out.join(format!("{prefix}-trial{trial}.csv"))
}

fn attack(a: AttackArgs) -> anyhow::Result<()> {
    if a.trials == 0 {
        bail!("--trials must be at least 1");
    }
    let victim = quantized_victim(&a.model, a.nq)?;
    let test = load_split(&a.data, Split::Test, Some(victim.input_shape()))?;
    let stop = a
        .stop_acc
        .unwrap_or_else(|| default_stop_accuracy(victim.num_classes()));
    let validator = TestSetValidator::new(&test);
    fs::create_dir_all(&a.out)?;
    let mut trials = Vec::with_capacity(a.trials);
    for t in 0..a.trials {
        let seed = a.seed + t as u64;
        let config = AttackConfig {
            n_b: a.nb,
            sample_size: a.sample_size,
            max_iterations: a.max_iters,
            stop_accuracy: Some(stop),
            hamming_budget: a.budget,
            seed,
            allowed_layers: a.layers.clone(),
        };
        config.validate()?;
        let sample = draw_attack_sample(&test, a.sample_size, &victim, seed)?;
        let mut model = victim.clone();
        let trace = run_attack(&mut model, &sample, &validator, &config)?;
        let csv = trial_csv(&a.out, "attack", t);
        write_trace_csv(&trace, &csv)?;
        println!(
            "trial {t} seed {seed}: {:?} after N_flip {} (D_B {}), top-1 {:.4} -> {:.4}",
            trace.status,
            trace.n_flip(),
            trace.hamming(),
            trace.clean.top1,
            trace.final_eval().top1
        );
        trials.push(TrialSummary::new(t, seed, csv, &trace, Some(stop)));
    }
    let notes = vec![
        format!(
            "one attack sample of {} test images per trial, seed = base seed + trial",
            a.sample_size
        ),
        "pseudo-targets are the clean model's predictions".into(),
        "validation runs on the full test split, attack sample included".into(),
    ];
    let summary = Summary::new("pbs", serde_json::to_value(&a)?, notes, Some(stop), trials);
    summary.write(&a.out.join("summary.json"))?;
    print_medians(&summary);
    Ok(())
}

fn baseline(a: BaselineArgs) -> anyhow::Result<()> {
    if a.trials == 0 {
        bail!("--trials must be at least 1");
    }
    let mode = BaselineMode::from(a.mode);
    let loaded = load_model(&a.model)?;
    let test = load_split(&a.data, Split::Test, Some(loaded.input_shape()))?;
    let validator = TestSetValidator::new(&test);
    let classes = loaded.num_classes();
    fs::create_dir_all(&a.out)?;
    let victim = match mode {
        BaselineMode::FloatExponent => {
            loaded.require_mode(ParamMode::Float)?;
            loaded
        }
        _ if loaded.mode() == ParamMode::Float => loaded.quantize(a.nq)?,
        _ => loaded,
    };
    let layers = match (mode, &a.layers) {
        (BaselineMode::LayerRestricted, None) => bail!("layer-restricted mode needs --layers"),
        (_, l) => l.clone().unwrap_or_default(),
    };
    let prefix = mode.to_string();
    let mut trials = Vec::with_capacity(a.trials);
    for t in 0..a.trials {
        let seed = a.seed + t as u64;
        let mut model = victim.clone();
        let trace = match mode {
            BaselineMode::RandomQuantized => {
                random_quantized_flips(&mut model, a.budget, seed, &validator)?
            }
            BaselineMode::FloatExponent => {
                let out = float_exponent_flip(&mut model, seed, a.exp_bit, &validator)?;
                println!(
                    "trial {t}: layer {} weight {} bit {}: {:e} -> {:e}",
                    out.flip.layer, out.flip.weight, out.flip.bit, out.flip.before, out.flip.after
                );
                out.trace
            }
            BaselineMode::LayerRestricted => {
                let sample = draw_attack_sample(&test, a.sample_size, &victim, seed)?;
                layer_restricted_attack(&mut model, &layers, a.budget, &sample, a.nb, &validator)?
            }
        };
        let csv = trial_csv(&a.out, &prefix, t);
        write_trace_csv(&trace, &csv)?;
        let last = trace.final_eval();
        println!(
            "trial {t} seed {seed}: N_flip {} D_B {}, top-1 {:.4} -> {:.4}{}",
            trace.n_flip(),
            trace.hamming(),
            trace.clean.top1,
            last.top1,
            if last.loss_is_finite() {
                ""
            } else {
                " (non-finite loss)"
            }
        );
        let threshold = (mode == BaselineMode::FloatExponent).then(|| 2.0 / classes as f64);
        trials.push(TrialSummary::new(t, seed, csv, &trace, threshold));
    }
    let notes = match mode {
        BaselineMode::RandomQuantized => vec![
            "bit positions drawn uniformly over all weighted layers without replacement".into(),
            "trial seed = base seed + trial".into(),
        ],
        BaselineMode::FloatExponent => vec![
            "weights rounded to single precision before the flip".into(),
            "flipped weight drawn uniformly among nonzero weights whose target bit is 0".into(),
            "threshold is twice random-guess accuracy".into(),
        ],
        BaselineMode::LayerRestricted => {
            vec!["PBS limited to the listed layers for a fixed flip budget, no early stop".into()]
        }
    };
    let threshold = (mode == BaselineMode::FloatExponent).then(|| 2.0 / classes as f64);
    let summary = Summary::new(&prefix, serde_json::to_value(&a)?, notes, threshold, trials);
    summary.write(&a.out.join("summary.json"))?;
    print_medians(&summary);
    Ok(())
}

fn print_medians(s: &Summary) {
    if let Some(m) = s.median_flips_to_threshold {
        println!("median N_flip to threshold: {m}");
    }
    if let Some(m) = s.median_final_top1 {
        println!("median final top-1: {m:.4}");
    }
    if let Some(m) = s.median_degradation {
        println!("median degradation: {m:.2} points");
    }
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let mut reached = Vec::new();
    let mut csvs = 0;
    for p in &a.paths {
        if p.extension().is_some_and(|e| e == "json") {
            let s = Summary::read(p).with_context(|| format!("reading {}", p.display()))?;
            println!("{} ({}, {} trials)", p.display(), s.kind, s.trials.len());
            for t in &s.trials {
                println!(
                    "  trial {} seed {}: N_flip {} D_B {} top-1 {:.4} -> {:.4}",
                    t.trial, t.seed, t.n_flip, t.hamming, t.clean_top1, t.final_top1
                );
            }
            print_medians(&s);
        } else {
            let rows = read_trace_csv(p).with_context(|| format!("reading {}", p.display()))?;
            let last = rows.last().context("trace has no rows")?;
            let hit = flips_to_threshold(&rows, a.threshold);
            csvs += 1;
            if let Some(n) = hit {
                reached.push(n as f64);
            }
            println!(
                "{}: {} rows, final N_flip {} D_B {} top-1 {:.4}, N_flip to {}: {}",
                p.display(),
                rows.len(),
                last.n_flip,
                last.hamming,
                last.val_top1,
                a.threshold,
                hit.map_or("-".to_string(), |n| n.to_string())
            );
        }
    }
    if csvs > 0 {
        match median(&reached) {
            Some(m) if reached.len() == csvs => println!("median N_flip to {}: {m}", a.threshold),
            _ => println!("{} of {csvs} traces reached {}", reached.len(), a.threshold),
        }
    }
    Ok(())
}

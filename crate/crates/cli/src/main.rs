use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use attnprune::apply::validate_masks;
use attnprune::bench::{bench_sweep, sweep_tsv, BatchSpec, SweepConfig};
use attnprune::planner;
use attnprune::train::{score_model, STEP_HEADER};
use attnprune::{
    apply_plan, iterative_prune_finetune, sparsity_report, train, Checkpoint, DataConfig, ErrorClass, Execution,
    Granularity, Matrix, Metric, ModelConfig, Pattern, PruneConfig, PrunePlan, ScoreTable, SynthDataset, Threshold,
    ToyModel, TrainConfig,
};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

/// Structured pruning of toy multi-head attention models.
#[derive(Parser)]
#[command(name = "attnprune", version)]
struct Cli {
    /// Run per-sample loops sequentially instead of on the thread pool.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create and save a freshly initialised model.
    Init(InitArgs),
    /// Synthetic dataset utilities.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Score every prunable group of a checkpoint.
    Score(ScoreArgs),
    /// Turn a score table into a validated pruning plan.
    Plan(PlanArgs),
    /// Apply a plan to a checkpoint.
    Prune(PruneArgs),
    /// Fine-tune a checkpoint on the training split.
    Train(TrainArgs),
    /// Iterative prune and fine-tune loop.
    Run(RunArgs),
    /// Time forward passes across sparsity levels.
    Bench(BenchArgs),
    /// Consolidate the reports of one or more runs.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum DataCmd {
    /// Generate train/val/test splits labelled by a frozen teacher.
    Gen(DataGenArgs),
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    d_in: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataGenArgs {
    #[arg(long, default_value_t = 3)]
    seed: u64,
    /// Total sample count, split 80/10/10 into train/val/test.
    #[arg(long, default_value_t = 2560)]
    samples: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    #[arg(long, default_value_t = 16)]
    d_in: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Fisher,
    L1,
    L2,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Fisher => Metric::Fisher,
            MetricArg::L1 => Metric::L1,
            MetricArg::L2 => Metric::L2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Head,
    Channel,
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternArg {
    EntireHead,
    PerHead,
    SameChannel,
}

impl From<PatternArg> for Pattern {
    fn from(p: PatternArg) -> Self {
        match p {
            PatternArg::EntireHead => Pattern::EntireHead,
            PatternArg::PerHead => Pattern::PerHead,
            PatternArg::SameChannel => Pattern::SameChannel,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ThresholdArg {
    Global,
    Local,
}

impl From<ThresholdArg> for Threshold {
    fn from(t: ThresholdArg) -> Self {
        match t {
            ThresholdArg::Global => Threshold::Global,
            ThresholdArg::Local => Threshold::Local,
        }
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    metric: MetricArg,
    #[arg(long, value_enum, default_value = "channel")]
    granularity: GranularityArg,
    /// Dataset directory; Fisher scores use its validation split.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, value_enum)]
    pattern: PatternArg,
    #[arg(long, value_enum, default_value = "global")]
    threshold: ThresholdArg,
    /// Cumulative fraction of the original attention parameters to remove.
    #[arg(long)]
    sparsity: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seed of the random input used to check pruned against masked output.
    #[arg(long, default_value_t = 0)]
    verify_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "entire-head")]
    pattern: PatternArg,
    #[arg(long, value_enum, default_value = "fisher")]
    metric: MetricArg,
    #[arg(long, value_enum, default_value = "global")]
    threshold: ThresholdArg,
    /// Sparsity added per step.
    #[arg(long, default_value_t = 0.10)]
    step: f64,
    #[arg(long, default_value_t = 6)]
    steps: usize,
    #[arg(long, default_value_t = 3)]
    ft_epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6")]
    levels: Vec<f64>,
    #[arg(long, value_enum, default_value = "entire-head")]
    pattern: PatternArg,
    #[arg(long, value_enum, default_value = "l2")]
    metric: MetricArg,
    #[arg(long, value_enum, default_value = "global")]
    threshold: ThresholdArg,
    /// Dataset directory, needed for Fisher scores.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 15)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Time the parallel forward instead of the single-threaded one.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// A run directory, or a directory whose subdirectories are runs.
    #[arg(long)]
    run_dir: PathBuf,
}

/// A CLI-level failure carrying its own exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: String) -> Self {
        Failure { code: 2, msg }
    }

    fn numeric(msg: String) -> Self {
        Failure { code: 5, msg }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<attnprune::Error>() {
            return match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Validation => 3,
                ErrorClass::Io => 4,
                ErrorClass::Numeric => 5,
            };
        }
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.code;
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match dispatch(cli.cmd, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Cmd, exec: Execution) -> Result<()> {
    match cmd {
        Cmd::Init(a) => init(a),
        Cmd::Data { cmd: DataCmd::Gen(a) } => data_gen(a),
        Cmd::Score(a) => score(a, exec),
        Cmd::Plan(a) => plan(a),
        Cmd::Prune(a) => prune(a),
        Cmd::Train(a) => train_cmd(a, exec),
        Cmd::Run(a) => run(a, exec),
        Cmd::Bench(a) => bench(a),
        Cmd::Report(a) => report(a),
    }
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_data(path: &Path) -> Result<SynthDataset> {
    SynthDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Exits with clap's usage text when Fisher scoring lacks a dataset.
fn require_data_for_fisher(metric: MetricArg, data: &Option<PathBuf>, sub: &str) {
    if matches!(metric, MetricArg::Fisher) && data.is_none() {
        let mut cmd = Cli::command();
        let sub = cmd.find_subcommand_mut(sub).expect("known subcommand").clone();
        let name = format!("attnprune {}", sub.get_name());
        sub.bin_name(name)
            .error(ErrorKind::MissingRequiredArgument, "--metric fisher requires --data <DIR>")
            .exit();
    }
}

fn init(a: InitArgs) -> Result<()> {
    let cfg = ModelConfig {
        d_in: a.d_in,
        d: a.d,
        heads: a.heads,
        channels: a.channels,
        layers: a.layers,
        n_classes: a.classes,
    };
    let model = ToyModel::init(&cfg, a.seed)?;
    let params = model.total_params();
    Checkpoint::new(model).with_seed("init", a.seed).save(&a.out)?;
    println!("wrote {} ({params} parameters)", a.out.display());
    Ok(())
}

fn data_gen(a: DataGenArgs) -> Result<()> {
    let cfg = DataConfig {
        tokens: a.tokens,
        d_in: a.d_in,
        ..DataConfig::with_total(a.seed, a.samples, a.classes)
    };
    let ds = attnprune::generate_dataset(&cfg)?;
    ds.save(&a.out)?;
    println!("split\tsamples\tclass_histogram");
    for split in attnprune::Split::ALL {
        let hist: Vec<String> = ds.class_histogram(split).iter().map(usize::to_string).collect();
        println!("{}\t{}\t{}", split.as_str(), ds.split(split).len(), hist.join(","));
    }
    Ok(())
}

fn score(a: ScoreArgs, exec: Execution) -> Result<()> {
    require_data_for_fisher(a.metric, &a.data, "score");
    let ckpt = load_ckpt(&a.ckpt)?;
    let val = match &a.data {
        Some(p) => load_data(p)?.val,
        None => Vec::new(),
    };
    let granularity = match a.granularity {
        GranularityArg::Head => Granularity::Head,
        GranularityArg::Channel => Granularity::Channel,
    };
    let table = score_model(&ckpt.model, a.metric.into(), granularity, &val, exec)?;
    match a.out {
        Some(p) => write(&p, &table.to_tsv()),
        None => {
            print!("{}", table.to_tsv());
            Ok(())
        }
    }
}

fn plan(a: PlanArgs) -> Result<()> {
    let text = fs::read_to_string(&a.scores).with_context(|| format!("reading {}", a.scores.display()))?;
    let scores = ScoreTable::from_tsv(&text)?;
    let p = planner::plan(&scores, a.pattern.into(), a.threshold.into(), a.sparsity)?;
    let violations = validate_masks(p.pattern, &p.masks, &planner::layouts(&scores));
    if !violations.is_empty() {
        return Err(attnprune::Error::InvalidPlan(violations).into());
    }
    write(&a.out, &p.to_text())?;
    println!(
        "declared {:.4} achieved {:.6} removed_score {}",
        p.declared_sparsity, p.achieved_sparsity, p.removed_score
    );
    for note in &p.notes {
        println!("note: {note}");
    }
    Ok(())
}

/// Deterministic single-sample input for the masked-equivalence check.
fn verify_input(seed: u64, d_in: usize) -> Matrix {
    BatchSpec {
        samples: 1,
        tokens: 16,
        seed,
    }
    .inputs(d_in)
    .remove(0)
}

fn prune(a: PruneArgs) -> Result<()> {
    let ckpt = load_ckpt(&a.ckpt)?;
    let text = fs::read_to_string(&a.plan).with_context(|| format!("reading {}", a.plan.display()))?;
    let plan = PrunePlan::from_text(&text)?;
    let pruned = apply_plan(&ckpt.model, &plan)?;

    let x = verify_input(a.verify_seed, ckpt.model.d_in());
    let gap = pruned.logits(&x)?.max_abs_diff(&ckpt.model.logits_masked(&plan.masks, &x)?)?;
    if gap.is_nan() || gap > 1e-10 {
        return Err(Failure::numeric(format!("pruned and masked outputs differ by {gap:e}")).into());
    }

    let report = sparsity_report(&ckpt.model, &pruned)?;
    let mut out = ckpt.clone();
    if !plan.is_empty() {
        out.model = pruned;
        out.history.push(plan);
    }
    out.save(&a.out)?;
    println!("masked-equivalence gap {gap:e} on seed {}", a.verify_seed);
    print!("{}", report.to_tsv());
    println!("# attention sparsity vs original model: {:.6}", out.model.attention_sparsity());
    println!();
    print!("{}", report.plot_data());
    Ok(())
}

fn train_cmd(a: TrainArgs, exec: Execution) -> Result<()> {
    let mut ckpt = load_ckpt(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let stats = train(&mut ckpt.model, &data.train, &cfg, exec)?;
    println!("epoch\tloss\taccuracy");
    for s in &stats {
        println!("{}\t{:.6}\t{:.6}", s.epoch, s.loss, s.accuracy);
    }
    ckpt.seeds.insert("train".into(), a.seed);
    ckpt.save(&a.out)?;
    Ok(())
}

fn run(a: RunArgs, exec: Execution) -> Result<()> {
    let ckpt = load_ckpt(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let cfg = PruneConfig {
        pattern: a.pattern.into(),
        metric: a.metric.into(),
        threshold: a.threshold.into(),
        step_sparsity: a.step,
        steps: a.steps,
        ft_epochs: a.ft_epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let report = iterative_prune_finetune(&ckpt.model, &data, &cfg, exec)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let tsv = report.to_tsv();
    write(&a.out_dir.join("report.tsv"), &tsv)?;
    write(&a.out_dir.join("layers.tsv"), &report.layers_tsv())?;
    let mut out = ckpt.clone();
    out.model = report.final_model.clone();
    out.history.extend(report.steps.iter().filter_map(|s| s.plan.clone()));
    out.seeds.insert("run".into(), a.seed);
    out.seeds.insert("data".into(), data.config.seed);
    out.save(&a.out_dir.join("final.ckpt"))?;
    print!("{tsv}");
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    require_data_for_fisher(a.metric, &a.data, "bench");
    let ckpt = load_ckpt(&a.ckpt)?;
    let val = match &a.data {
        Some(p) => load_data(p)?.val,
        None => Vec::new(),
    };
    let cfg = SweepConfig {
        pattern: a.pattern.into(),
        metric: a.metric.into(),
        threshold: a.threshold.into(),
        batch: BatchSpec {
            samples: a.batch,
            tokens: a.tokens,
            seed: a.seed,
        },
        warmup_reps: a.warmup,
        measured_reps: a.reps,
        exec: if a.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        },
    };
    let rows = bench_sweep(&ckpt.model, &cfg, &a.levels, &val)?;
    print!("{}", sweep_tsv(&rows));
    println!(
        "# batch={} tokens={} warmup={} reps={} seed={} threads={}",
        a.batch,
        a.tokens,
        a.warmup,
        a.reps,
        a.seed,
        if a.parallel { "pool" } else { "1" }
    );
    Ok(())
}

/// One parsed `report.tsv` plus its final per-layer sparsity.
struct RunSummary {
    label: (String, String, String),
    /// Post-fine-tune test accuracy and rounding flag, keyed by target in percent.
    cells: BTreeMap<u32, (String, bool)>,
    layers: Vec<(usize, String)>,
}

fn parse_run(dir: &Path) -> Result<RunSummary> {
    let text = fs::read_to_string(dir.join("report.tsv")).with_context(|| format!("reading {}/report.tsv", dir.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(STEP_HEADER) {
        bail!(attnprune::Error::Parse(format!("{}/report.tsv: unexpected header", dir.display())));
    }
    let mut meta = BTreeMap::new();
    let mut cells = BTreeMap::new();
    let mut last_step = 0usize;
    for line in lines {
        if let Some(m) = line.strip_prefix("# ") {
            for kv in m.split_whitespace() {
                if let Some((k, v)) = kv.split_once('=') {
                    meta.entry(k.to_string()).or_insert_with(|| v.to_string());
                }
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 9 {
            bail!(attnprune::Error::Parse(format!("{}/report.tsv: bad row '{line}'", dir.display())));
        }
        let target: f64 = cols[1].parse().map_err(|_| anyhow!(attnprune::Error::Parse(format!("bad target '{}'", cols[1]))))?;
        last_step = cols[0].parse().unwrap_or(last_step);
        cells.insert((target * 100.0).round() as u32, (cols[6].to_string(), cols[8] == "rounding"));
    }
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| anyhow!(attnprune::Error::Parse(format!("{}/report.tsv: missing {k}", dir.display()))))
    };
    let layers_text = fs::read_to_string(dir.join("layers.tsv")).with_context(|| format!("reading {}/layers.tsv", dir.display()))?;
    let layers = layers_text
        .lines()
        .skip(1)
        .filter_map(|l| {
            let c: Vec<&str> = l.split('\t').collect();
            (c.len() == 3 && c[0].parse() == Ok(last_step)).then(|| (c[1].parse().unwrap_or(0), c[2].to_string()))
        })
        .collect();
    Ok(RunSummary {
        label: (field("pattern")?, field("threshold")?, field("metric")?),
        cells,
        layers,
    })
}

fn report(a: ReportArgs) -> Result<()> {
    let mut dirs = Vec::new();
    if a.run_dir.join("report.tsv").exists() {
        dirs.push(a.run_dir.clone());
    } else {
        let entries = fs::read_dir(&a.run_dir).with_context(|| format!("reading {}", a.run_dir.display()))?;
        for e in entries {
            let p = e?.path();
            if p.join("report.tsv").exists() {
                dirs.push(p);
            }
        }
        dirs.sort();
    }
    if dirs.is_empty() {
        return Err(Failure::usage(format!("no report.tsv under {}", a.run_dir.display())).into());
    }
    let runs = dirs.iter().map(|d| parse_run(d)).collect::<Result<Vec<_>>>()?;
    let columns: Vec<u32> = runs
        .iter()
        .flat_map(|r| r.cells.keys().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();

    print!("pattern\tthreshold\tmetric");
    for c in &columns {
        print!("\t{c}%");
    }
    println!();
    for r in &runs {
        print!("{}\t{}\t{}", r.label.0, r.label.1, r.label.2);
        for c in &columns {
            match r.cells.get(c) {
                Some((acc, true)) => print!("\t{acc}*"),
                Some((acc, false)) => print!("\t{acc}"),
                None => print!("\t-"),
            }
        }
        println!();
    }
    println!("# cells are post-fine-tune test accuracy; * marks a step whose achieved sparsity missed the target");
    println!();
    println!("pattern\tthreshold\tmetric\tlayer\tfinal_sparsity");
    for r in &runs {
        for (l, s) in &r.layers {
            println!("{}\t{}\t{}\t{l}\t{s}", r.label.0, r.label.1, r.label.2);
        }
    }
    Ok(())
}

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use streamseg::eval::{average_precision, per_instance_report, read_predictions, write_predictions, GroundTruth};
use streamseg::frame::{read_sequence, SequenceReader};
use streamseg::model::{DecoderWeights, ModelConfig};
use streamseg::objectives::{grad_check, LossKind, ParamGroup, ToyInstance};
use streamseg::pipeline::{run_sequence, write_event_log, write_ply, AssocMode, LatencyReport, RunConfig};
use streamseg::synth::{generate, SceneSpec, GT_FILE};
use streamseg::train::{toy_train, TrainConfig};

#[derive(Parser)]
#[command(name = "streamseg", version, about = "Online zero-shot 3D instance segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment a frame sequence online.
    Run(RunArgs),
    /// Render a synthetic sequence with ground truth.
    Synth(SynthArgs),
    /// Fit decoder weights on one or more sequences.
    Train(TrainArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Compare analytic and numeric loss gradients on a random toy problem.
    Gradcheck(GradcheckArgs),
    /// Time the fusion stage on a generated scene.
    Bench(BenchArgs),
}

/// Pipeline settings. Each flag overrides the value from `--config`.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML file with pipeline settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    intra_threshold: Option<f64>,
    #[arg(long)]
    prune_threshold: Option<f64>,
    /// Query dimension for seeded weights.
    #[arg(long)]
    d: Option<usize>,
    /// Decoder depth for seeded weights.
    #[arg(long)]
    layers: Option<usize>,
    /// Reject frames whose patch size differs.
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    voxel: Option<f64>,
    #[arg(long, value_enum)]
    assoc: Option<AssocArg>,
    /// Use the state-token descriptor when matching.
    #[arg(long, value_name = "BOOL")]
    sdt: Option<bool>,
    /// Inject memory context into the decoder.
    #[arg(long, value_name = "BOOL")]
    qim: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    /// Abort once the memory holds more queries than this.
    #[arg(long)]
    max_bank: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AssocArg {
    Refined,
    Raw,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                RunConfig::from_toml(&text)?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field { cfg.$field = v; }
            )*};
        }
        set!(intra_threshold, prune_threshold, d, layers, voxel, sdt, qim, seed);
        if self.patch_size.is_some() {
            cfg.patch_size = self.patch_size;
        }
        if self.max_bank.is_some() {
            cfg.max_bank = self.max_bank;
        }
        if let Some(a) = self.assoc {
            cfg.assoc = match a {
                AssocArg::Refined => AssocMode::Refined,
                AssocArg::Raw => AssocMode::Raw,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Sequence directory (frames plus manifest).
    #[arg(long)]
    seq: PathBuf,
    /// Decoder weights; seeded initialisation when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Per-frame fusion timings as CSV.
    #[arg(long)]
    latency_log: Option<PathBuf>,
    /// Predicted instances as CSV.
    #[arg(long)]
    pred_out: Option<PathBuf>,
    /// Labelled point cloud.
    #[arg(long)]
    ply: Option<PathBuf>,
    /// Fusion decisions as JSON lines.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Key/query associations as CSV.
    #[arg(long)]
    dump_memory: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Acceptance,
    Partial,
    Latency,
}

impl Preset {
    fn spec(self, seed: u64) -> SceneSpec {
        match self {
            Preset::Acceptance => SceneSpec::acceptance(seed),
            Preset::Partial => SceneSpec::partial_visibility(seed),
            Preset::Latency => SceneSpec::latency(seed),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description in TOML.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Seed for the preset.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Voxel size of the ground-truth cloud.
    #[arg(long, default_value_t = 0.05)]
    voxel: f64,
    /// Also write the scene description used.
    #[arg(long)]
    save_spec: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training sequence; repeat for several.
    #[arg(long, required = true)]
    seq: Vec<PathBuf>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    /// Train without memory context and the cross-frame term.
    #[arg(long)]
    no_memory: bool,
    /// Start from these weights instead of a seeded init.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out_weights: PathBuf,
    /// Loss curve as CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Sequence directory; supplies the ground truth when `--gt` is absent.
    #[arg(long)]
    seq: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    pred: PathBuf,
    /// Per-instance CSV report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// seg, dist, xseg, total or all.
    #[arg(long, default_value = "all")]
    loss: String,
    /// psi, eta, layerN or all.
    #[arg(long, default_value = "all")]
    group: String,
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Patch grid side; N = side².
    #[arg(long, default_value_t = 4)]
    grid: usize,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "latency")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
    /// Only summarise frames with at least this many bank queries.
    #[arg(long, default_value_t = 0)]
    min_bank: usize,
    /// Only summarise frames with at least this many instances.
    #[arg(long, default_value_t = 0)]
    min_instances: usize,
    #[arg(long)]
    latency_log: Option<PathBuf>,
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn print_latency(latency: &LatencyReport) {
    println!("frames={}", latency.frames.len());
    if let (Some(p50), Some(p95)) = (latency.p50(), latency.p95()) {
        println!("fusion_p50_ms={p50:.3}");
        println!("fusion_p95_ms={p95:.3}");
    }
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let cfg = args.config.resolve()?;
    if args.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let weights = args
        .weights
        .as_deref()
        .map(|p| DecoderWeights::load(p).with_context(|| format!("loading weights {}", p.display())))
        .transpose()?;
    let reader = SequenceReader::open(&args.seq).with_context(|| format!("opening {}", args.seq.display()))?;
    info!("running {} frames from {}", reader.len(), args.seq.display());
    let out = run_sequence(reader, &cfg, weights)?;

    print_latency(&out.latency);
    println!("instances={}", out.predictions.len());
    println!("bank_queries={}", out.memory.bank.len());
    if let Some(path) = &args.latency_log {
        out.latency.write_csv(create(path)?)?;
    }
    if let Some(path) = &args.pred_out {
        write_predictions(create(path)?, &out.predictions)?;
    }
    if let Some(path) = &args.ply {
        write_ply(create(path)?, &out.cloud)?;
    }
    if let Some(path) = &args.events {
        write_event_log(create(path)?, &out.events)?;
    }
    if let Some(path) = &args.dump_memory {
        out.memory.dump_csv(create(path)?)?;
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let spec = match (&args.spec, args.preset) {
        (Some(path), _) => SceneSpec::from_toml(&fs::read_to_string(path)?)?,
        (None, Some(p)) => p.spec(args.seed),
        (None, None) => bail!("one of --spec or --preset is required"),
    };
    let seq = generate(&spec)?;
    seq.write(&args.out, args.voxel)?;
    if args.save_spec {
        fs::write(args.out.join("scene.toml"), spec.to_toml()?)?;
    }
    println!("frames={}", seq.frames.len());
    println!("objects={}", seq.n_objects);
    println!("gt={}", args.out.join(GT_FILE).display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let seqs = args
        .seq
        .iter()
        .map(|p| read_sequence(p).with_context(|| format!("reading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let init = args.init.as_deref().map(DecoderWeights::load).transpose()?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        lr: args.lr,
        seed: args.seed,
        d: args.d,
        layers: args.layers,
        use_memory: !args.no_memory,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let report = toy_train(&seqs, &cfg, init)?;
    report.weights.save(&args.out_weights)?;
    if let Some(path) = &args.curve {
        report.write_curve_csv(create(path)?)?;
    }
    if let (Some(a), Some(b)) = (report.initial_total(), report.final_total()) {
        println!("l_total_initial={a:.6}");
        println!("l_total_final={b:.6}");
    }
    println!("seconds={:.2}", start.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let gt_path = match (&args.gt, &args.seq) {
        (Some(p), _) => p.clone(),
        (None, Some(seq)) => seq.join(GT_FILE),
        (None, None) => bail!("one of --gt or --seq is required"),
    };
    let gt = GroundTruth::read_csv(File::open(&gt_path).with_context(|| format!("opening {}", gt_path.display()))?)?;
    let preds = read_predictions(File::open(&args.pred).with_context(|| format!("opening {}", args.pred.display()))?)?;
    let ap = average_precision(&preds, &gt)?;
    println!("ap={:.6}", ap.ap);
    println!("ap50={:.6}", ap.ap50);
    println!("ap25={:.6}", ap.ap25);
    println!("n_pred={}", preds.len());
    println!("n_gt={}", gt.instances().len());
    if let Some(path) = &args.report {
        per_instance_report(create(path)?, &preds, &gt)?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<bool> {
    let losses: Vec<LossKind> = match args.loss.as_str() {
        "all" => vec![LossKind::Seg, LossKind::Dist, LossKind::Xseg],
        s => vec![s.parse()?],
    };
    let groups: Vec<ParamGroup> = match args.group.as_str() {
        "all" => vec![ParamGroup::Psi, ParamGroup::Eta, ParamGroup::Layer(0)],
        s => vec![s.parse()?],
    };
    let (d2, d3) = (6, 4);
    let instance = ToyInstance::random(args.seed, args.grid, args.grid, d2, d3, args.d, 3, 5);
    let weights = DecoderWeights::init(ModelConfig::toy(d2 + d3, args.d), args.seed)?;
    let mut ok = true;
    for &loss in &losses {
        for group in &groups {
            let r = grad_check(&weights, &instance, loss, group, args.eps)?;
            let pass = r.max_rel_error < args.tol;
            ok &= pass;
            println!(
                "{} loss={:?} group={} params={} max_rel_error={:.3e}",
                if pass { "PASS" } else { "FAIL" },
                loss,
                group.prefix().trim_end_matches('.'),
                r.n_checked,
                r.max_rel_error
            );
        }
    }
    Ok(ok)
}

fn cmd_bench(args: BenchArgs) -> anyhow::Result<()> {
    let cfg = args.config.resolve()?;
    let seq = generate(&args.preset.spec(args.seed))?;
    let out = run_sequence(seq.frames.into_iter().map(Ok), &cfg, None)?;
    let selected = LatencyReport {
        frames: out
            .latency
            .frames
            .iter()
            .filter(|f| f.bank >= args.min_bank && f.instances >= args.min_instances)
            .copied()
            .collect(),
    };
    print_latency(&selected);
    if let Some(last) = out.latency.frames.last() {
        println!("final_bank_queries={}", last.bank);
        println!("final_instances={}", last.instances);
    }
    if let Some(path) = &args.latency_log {
        out.latency.write_csv(create(path)?)?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<streamseg::Error>()) {
        Some(e) if e.is_validation() => 2,
        Some(e) if e.is_consistency() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => {
            let _ = io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

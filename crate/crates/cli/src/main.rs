use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use vbcdhmm::classifier::{train_bank, BankConfig, ScoreOptions};
use vbcdhmm::data::{self, generate, mask_missing, GeneratorSpec, PcaTarget};
use vbcdhmm::{Error, PredictiveParams, TrainConfig};

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(name = "vbcdhmm", version, about = "Variational Bayesian conditional-dependence HMMs")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per class label and write a model bank.
    Train(TrainArgs),
    /// Classify a labelled dataset and report accuracy.
    Evaluate(EvaluateArgs),
    /// Sample sequences from a generator spec.
    Synth(SynthArgs),
    /// Replace a fraction of frames with missing markers.
    Mask(MaskArgs),
    /// Print a class's inferred lag transition matrix.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Emitting states; repeat to add grid points.
    #[arg(long = "states", required = true)]
    states: Vec<usize>,
    /// Mixture components per state; repeat to add grid points.
    #[arg(long = "mixtures", required = true)]
    mixtures: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    max_lag: usize,
    /// Target PCA dimension, or `none`.
    #[arg(long, default_value = "none")]
    pca_dim: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 3)]
    min_iters: usize,
    /// Relative ELBO change that stops training.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamsArg {
    Starred,
    Mean,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    json: bool,
    #[arg(long, value_enum, default_value = "starred")]
    predictive_params: ParamsArg,
    /// Divide scores by sequence length before comparing classes.
    #[arg(long)]
    per_frame: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    frames: usize,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    emit_latents: Option<PathBuf>,
    /// Label attached to every generated record.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    label: String,
    /// Write the matrix as a plain PGM image (darker is more probable).
    #[arg(long)]
    pgm: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_pca(s: &str) -> Result<Option<PcaTarget>> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    match s.parse::<usize>() {
        Ok(d) if d >= 1 => Ok(Some(PcaTarget::Dim(d))),
        _ => Err(invalid(format!("--pca-dim must be a positive integer or `none`, got `{s}`"))),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let pca = parse_pca(&args.pca_dim)?;
    if args.states.contains(&0) || args.mixtures.contains(&0) {
        return Err(invalid("--states and --mixtures must be at least 1"));
    }
    if args.max_lag == 0 {
        return Err(invalid("--max-lag must be at least 1"));
    }
    let train = TrainConfig {
        max_iters: args.max_iters,
        rel_tol: args.tol,
        seed: args.seed,
        min_iters: args.min_iters.min(args.max_iters),
    };
    train.validate()?;
    let mut grid = Vec::new();
    for &n in &args.states {
        for &m in &args.mixtures {
            if !grid.contains(&(n, m)) {
                grid.push((n, m));
            }
        }
    }

    let records = data::load_dataset(&args.data)?;
    if records.is_empty() {
        return Err(invalid(format!("{} contains no sequences", args.data.display())));
    }
    if let Some(r) = records.iter().find(|r| r.label.is_none()) {
        return Err(invalid(format!("sequence `{}` has no label; training needs labels", r.id)));
    }
    let config = BankConfig { grid, max_lag: args.max_lag, pca, train };
    let (bank, report) = train_bank(&records, &config)?;
    data::save_bank(&args.out, &bank)?;

    if args.json {
        let classes: Vec<_> = report
            .classes
            .iter()
            .map(|c| {
                json!({
                    "label": c.label,
                    "candidates": c.candidates,
                    "selected": c.selected,
                    "elbo_trace": bank.models[&c.label].elbo_trace,
                })
            })
            .collect();
        return print_json(&json!({ "bank": args.out, "classes": classes }));
    }
    println!("{:<16} {:>6} {:>8} {:>18} {:>6} {:>9}", "label", "states", "mixtures", "final ELBO", "iters", "converged");
    for c in &report.classes {
        for (i, cand) in c.candidates.iter().enumerate() {
            println!(
                "{:<16} {:>6} {:>8} {:>18.6} {:>6} {:>9}{}",
                c.label,
                cand.n_states,
                cand.n_components,
                cand.elbo,
                cand.iterations,
                cand.converged,
                if i == c.selected { "  *" } else { "" }
            );
        }
    }
    println!("wrote {} ({} classes)", args.out.display(), bank.models.len());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let bank = data::load_bank(&args.bank)?;
    let records = data::load_dataset(&args.data)?;
    let params = match args.predictive_params {
        ParamsArg::Starred => PredictiveParams::Starred,
        ParamsArg::Mean => PredictiveParams::Mean,
    };
    let ev = bank.evaluate(&records, &ScoreOptions { params, per_frame: args.per_frame })?;
    if args.json {
        return print_json(&serde_json::to_value(&ev)?);
    }
    println!("accuracy: {:.2}% ({} sequences)", 100.0 * ev.accuracy, records.len());
    let width = ev.labels.iter().map(String::len).max().unwrap_or(4).max(9);
    print!("{:<width$}", "true\\pred");
    for l in &ev.labels {
        print!(" {l:>width$}");
    }
    println!();
    for (l, row) in ev.labels.iter().zip(&ev.confusion) {
        print!("{l:<width$}");
        for c in row {
            print!(" {c:>width$}");
        }
        println!();
    }
    for (l, a) in &ev.per_class_accuracy {
        println!("{l}: {:.2}%", 100.0 * a);
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    if args.frames == 0 {
        return Err(invalid("--frames must be at least 1"));
    }
    let text = std::fs::read_to_string(&args.spec).map_err(|e| io_err(&args.spec, e))?;
    let spec: GeneratorSpec = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("{}: {e}", args.spec.display())))?;
    let (mut records, traces) = generate(&spec, args.frames, args.count, args.seed)?;
    if let Some(label) = &args.label {
        for r in records.iter_mut() {
            r.label = Some(label.clone());
        }
    }
    data::save_dataset(&args.out, &records)?;
    if let Some(path) = &args.emit_latents {
        let mut w = create(path)?;
        for t in &traces {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n").map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn mask(args: MaskArgs) -> Result<()> {
    if !(0.0..1.0).contains(&args.fraction) {
        return Err(invalid(format!("--fraction must be in [0, 1), got {}", args.fraction)));
    }
    let records = data::load_dataset(&args.data)?;
    let masked = mask_missing(&records, args.fraction, args.seed)?;
    data::save_dataset(&args.out, &masked)
}

fn pgm(matrix: &[Vec<f64>]) -> String {
    let k = matrix.len();
    let mut s = format!("P2\n{k} {k}\n255\n");
    for row in matrix {
        let px: Vec<String> =
            row.iter().map(|p| ((255.0 * (1.0 - p)).round() as u8).to_string()).collect();
        s.push_str(&px.join(" "));
        s.push('\n');
    }
    s
}

fn inspect(args: InspectArgs) -> Result<()> {
    let bank = data::load_bank(&args.bank)?;
    let model = bank.models.get(&args.label).ok_or_else(|| Error::UnknownLabel(args.label.clone()))?;
    let matrix = model.posteriors.dependence_matrix();
    if let Some(path) = &args.pgm {
        std::fs::write(path, pgm(&matrix)).map_err(|e| io_err(path, e))?;
    }
    if args.json {
        return print_json(&json!({ "label": args.label, "dependence": matrix }));
    }
    println!("E[lag transition] for `{}` (row = previous lag, column = next lag)", args.label);
    print!("{:>6}", "");
    for j in 1..=matrix.len() {
        print!(" {:>8}", format!("z={j}"));
    }
    println!();
    for (i, row) in matrix.iter().enumerate() {
        print!("{:>6}", format!("z={}", i + 1));
        for p in row {
            print!(" {p:>8.4}");
        }
        println!();
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Synth(a) => synth(a),
        Command::Mask(a) => mask(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}

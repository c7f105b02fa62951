use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use spectral_pe::graph::read_edge_list;
use spectral_pe::lab::append_jsonl;
use spectral_pe::pe::{PeConfig, PeMethod};
use spectral_pe::peg::PegConfig;
use spectral_pe::reports::{
    error_json, exit_code, run_encode, run_linkpred, run_verify, spectrum_report, threads_from_env, write_json,
    Bound, LinkpredConfig, Perturbation, VerifyConfig,
};
use spectral_pe::Error;

#[derive(Parser)]
#[command(name = "spectral-pe", version, about = "Stable graph positional encodings and their perturbation bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Laplacian spectrum and eigengap ratio at p.
    Spectrum {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        p: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a perturbation-bound sweep. Exits 1 if any trial violates it.
    Verify(VerifyArgs),
    /// Train a PEG link predictor.
    Linkpred(LinkpredArgs),
    /// Write a positional encoding as CSV.
    Encode {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value = "le")]
        method: String,
        #[arg(long)]
        p: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ascent steps for line and deepwalk.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// CSV path; metadata goes to `<out>.meta.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    bound: String,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    p: usize,
    #[arg(long, default_value_t = 4)]
    d: usize,
    /// Edge list or `sbm:n1,n2:p_in:p_out`; random graphs when absent.
    #[arg(long)]
    graph: Option<String>,
    /// `add=F drop=F`.
    #[arg(long, num_args = 1..)]
    perturb: Vec<String>,
    /// JSONL log of every report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Curve CSV for the instability bound.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct LinkpredArgs {
    /// Edge list or `sbm:n1,n2:p_in:p_out`.
    #[arg(long)]
    graph: String,
    /// JSON model and training configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    /// Perturb the test graph at inference: `add=F drop=F`.
    #[arg(long, num_args = 1..)]
    perturb: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(value: &Value, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(path) => write_json(path, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
            Ok(())
        }
    }
}

fn spectrum(graph: &Path, p: usize, out: Option<&Path>) -> Result<u8, Error> {
    let report = spectrum_report(&read_edge_list(graph)?, p)?;
    if report["rho_infinite"] == true {
        eprintln!("warning: rho_{p} is infinite (repeated eigenvalue among the first {p})");
    }
    emit(&report, out)?;
    Ok(0)
}

fn verify(args: &VerifyArgs) -> Result<u8, Error> {
    let bound: Bound = args.bound.parse()?;
    let mut cfg = VerifyConfig {
        bound,
        trials: args.trials,
        seed: args.seed,
        p: args.p,
        d: args.d,
        graph: args.graph.as_deref().map(str::parse).transpose()?,
        threads: threads_from_env(),
        ..Default::default()
    };
    if !args.perturb.is_empty() {
        cfg.perturb = Perturbation::parse(&args.perturb)?;
    }
    let outcome = run_verify(&cfg)?;
    if let Some(path) = &args.out {
        append_jsonl(path, &outcome.reports)?;
    }
    if let (Some(path), Some(csv)) = (&args.csv, &outcome.curve_csv) {
        std::fs::write(path, csv)?;
    }
    println!("{}", serde_json::to_string(&outcome.summary(bound)).expect("serializable"));
    Ok(if outcome.all_pass() { 0 } else { 1 })
}

fn linkpred(args: &LinkpredArgs) -> Result<u8, Error> {
    let mut peg: PegConfig = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::InvalidArgument(format!("config: {e}")))?,
        None => PegConfig::default(),
    };
    if let Some(p) = args.p {
        peg.pe.p = p;
    }
    if let Some(s) = args.seed {
        peg.seed = s;
    }
    if let Some(e) = args.epochs {
        peg.epochs = e;
    }
    if let Some(lr) = args.lr {
        peg.lr = lr;
    }
    if let Some(m) = &args.method {
        peg.pe.method = m.parse()?;
    }
    if args.folds.is_some() {
        peg.folds = args.folds;
    }
    let perturb = if args.perturb.is_empty() { None } else { Some(Perturbation::parse(&args.perturb)?) };
    let cfg = LinkpredConfig { graph: args.graph.parse()?, peg, perturb };
    emit(&run_linkpred(&cfg)?, args.out.as_deref())?;
    Ok(0)
}

fn encode(
    graph: &Path,
    method: &str,
    p: usize,
    seed: u64,
    steps: Option<usize>,
    lr: Option<f64>,
    out: Option<&Path>,
) -> Result<u8, Error> {
    let method: PeMethod = method.parse()?;
    let mut pe = PeConfig { method, p, ..Default::default() };
    if let Some(s) = steps {
        pe.steps = s;
    }
    if let Some(lr) = lr {
        pe.lr = lr;
    }
    let (csv, meta) = run_encode(&read_edge_list(graph)?, &pe, seed)?;
    match out {
        Some(path) => {
            std::fs::write(path, csv)?;
            let mut meta_path = path.as_os_str().to_owned();
            meta_path.push(".meta.json");
            write_json(Path::new(&meta_path), &meta)?;
        }
        None => {
            print!("{csv}");
            eprintln!("{}", serde_json::to_string(&meta).expect("serializable"));
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Spectrum { graph, p, out } => spectrum(graph, *p, out.as_deref()),
        Command::Verify(args) => verify(args),
        Command::Linkpred(args) => linkpred(args),
        Command::Encode { graph, method, p, seed, steps, lr, out } => {
            encode(graph, method, *p, *seed, *steps, *lr, out.as_deref())
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&error_json(&e)).expect("serializable"));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

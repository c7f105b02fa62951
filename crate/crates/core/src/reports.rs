//! Experiment orchestration behind the command-line tool. Every entry point
//! returns JSON values (with `"schema": 1`) or CSV text and never prints.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::graph::{block_labels, normalized_laplacian, perturb_edges, read_edge_list, sbm_generate, Graph, SymMatrix};
use crate::lab::{
    davis_kahan_sweep, eigvalue_sweep, equivariance_suite, instability_curve, le_stability_sweep, peg_sweep,
    spe_sweep, stable_peg_layer, verify_peg_stability, PegSweepConfig, StabilityReport, Subject,
};
use crate::linalg::Mat;
use crate::pe::{encode, PeConfig, PeMethod, PositionalEncoding};
use crate::peg::{evaluate_auc, model_for, prepare_stage, split_links, train_link_predictor, PegConfig};
use crate::spe::SpeConfig;
use crate::spectral::{eigengap_report, sym_eig, GapReport};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable capping the number of sweep workers.
pub const THREADS_ENV: &str = "SPECTRAL_PE_THREADS";

/// Process exit status for a library error: 2 for usage and parse
/// problems, 3 for inputs that violate a precondition.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse { .. } | Error::InvalidArgument(_) | Error::Io(_) | Error::Empty(_) => 2,
        _ => 3,
    }
}

/// Stable snake_case name of an error variant.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::IsolatedNode(_) => "isolated_node",
        Error::SizeMismatch(_) => "size_mismatch",
        Error::ShapeMismatch(_) => "shape_mismatch",
        Error::DimMismatch(_) => "dim_mismatch",
        Error::NoConvergence(..) => "no_convergence",
        Error::Infeasible(_) => "infeasible",
        Error::RankDeficient { .. } => "rank_deficient",
        Error::NonFinite(_) => "non_finite",
        Error::InfiniteDelta => "infinite_delta",
        Error::MultipleEigenvalues(_) => "multiple_eigenvalues",
        Error::ZeroDenominator(..) => "zero_denominator",
        Error::TooLarge(_) => "too_large",
        Error::Empty(_) => "empty",
        Error::EmptySplit(_) => "empty_split",
        Error::NonOrthonormal(_) => "non_orthonormal",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Parse { .. } => "parse_error",
        Error::Io(_) => "io_error",
    }
}

pub fn error_json(e: &Error) -> Value {
    let mut v = json!({ "schema": SCHEMA_VERSION, "error": error_kind(e), "message": e.to_string() });
    if let Error::Parse { line, .. } = e {
        v["line"] = json!(line);
    }
    v
}

/// A graph named on the command line: an edge-list path or an inline
/// `sbm:n1,n2,...:p_in:p_out` model.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphSource {
    File(std::path::PathBuf),
    Sbm { blocks: Vec<usize>, p_in: f64, p_out: f64 },
}

impl std::str::FromStr for GraphSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let Some(rest) = s.strip_prefix("sbm:") else {
            return Ok(GraphSource::File(s.into()));
        };
        let bad = || Error::InvalidArgument(format!("'{s}' is not of the form sbm:n1,n2:p_in:p_out"));
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let blocks = parts[0]
            .split(',')
            .map(|b| b.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let p_in = parts[1].parse::<f64>().map_err(|_| bad())?;
        let p_out = parts[2].parse::<f64>().map_err(|_| bad())?;
        if blocks.is_empty() || blocks.contains(&0) {
            return Err(bad());
        }
        Ok(GraphSource::Sbm { blocks, p_in, p_out })
    }
}

impl GraphSource {
    /// The graph and, for block models, the block of every node.
    pub fn load(&self, seed: u64) -> Result<(Graph, Option<Vec<usize>>)> {
        match self {
            GraphSource::File(path) => Ok((read_edge_list(path)?, None)),
            GraphSource::Sbm { blocks, p_in, p_out } => {
                Ok((sbm_generate(blocks, *p_in, *p_out, seed)?, Some(block_labels(blocks))))
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            GraphSource::File(p) => p.display().to_string(),
            GraphSource::Sbm { blocks, p_in, p_out } => {
                let b: Vec<String> = blocks.iter().map(|x| x.to_string()).collect();
                format!("sbm:{}:{p_in}:{p_out}", b.join(","))
            }
        }
    }
}

/// Edge perturbation ratios parsed from `add=F drop=F` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Perturbation {
    pub add: f64,
    pub drop: f64,
}

impl Perturbation {
    pub fn parse<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let mut p = Perturbation::default();
        for t in tokens {
            for part in t.as_ref().split([',', ' ']).filter(|s| !s.is_empty()) {
                let (key, val) = part
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument(format!("perturbation '{part}' is not key=value")))?;
                let val: f64 = val
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("perturbation value '{val}' is not a number")))?;
                match key {
                    "add" => p.add = val,
                    "drop" => p.drop = val,
                    other => return Err(Error::InvalidArgument(format!("unknown perturbation '{other}'"))),
                }
            }
        }
        Ok(p)
    }

    pub fn is_none(&self) -> bool {
        self.add == 0.0 && self.drop == 0.0
    }
}

/// Spectrum of the normalized Laplacian and the eigengap ratio at `p`.
pub fn spectrum_report(g: &Graph, p: usize) -> Result<Value> {
    let eig = sym_eig(&normalized_laplacian(g)?)?;
    let gap: GapReport = eigengap_report(&eig.values, p)?;
    let mut v = serde_json::to_value(&gap).map_err(|e| Error::Io(e.to_string()))?;
    v["schema"] = json!(SCHEMA_VERSION);
    v["n"] = json!(g.n());
    v["connected"] = json!(g.is_connected());
    if gap.rho_infinite {
        v["flag"] = json!("rho_infinite: repeated eigenvalue among the first p");
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    DavisKahan,
    LeStability,
    Eigenvalue,
    PegTheorem,
    SpeTheorem,
    Instability,
    Equivariance,
}

impl std::str::FromStr for Bound {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::InvalidArgument(format!("unknown bound '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub bound: Bound,
    pub trials: usize,
    pub seed: u64,
    pub p: usize,
    pub d: usize,
    /// Replaces the default random graphs for the graph-based bounds.
    pub graph: Option<GraphSource>,
    pub perturb: Perturbation,
    pub threads: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            bound: Bound::DavisKahan,
            trials: 100,
            seed: 0,
            p: 4,
            d: 4,
            graph: None,
            perturb: Perturbation { add: 0.0, drop: 0.1 },
            threads: 1,
        }
    }
}

/// Available parallelism, capped by `SPECTRAL_PE_THREADS` when set.
pub fn threads_from_env() -> usize {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var(THREADS_ENV).ok().and_then(|s| s.parse::<usize>().ok()) {
        Some(k) if k >= 1 => k.min(avail),
        _ => avail,
    }
}

/// Runs `f(i)` for every trial on up to `threads` workers. Each trial owns
/// its seed, so results do not depend on the worker count.
fn par_trials<T: Send>(trials: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, trials.max(1));
    let mut slots: Vec<Option<Result<T>>> = (0..trials).map(|_| None).collect();
    std::thread::scope(|s| {
        for (w, chunk) in slots.chunks_mut(trials.div_ceil(threads).max(1)).enumerate() {
            let f = &f;
            let start = w * trials.div_ceil(threads).max(1);
            s.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(start + j));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every trial ran")).collect()
}

fn trial_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64)
}

fn equivariance_report(subject: Subject, g: &Graph, p: usize, seed: u64) -> Result<StabilityReport> {
    let r = equivariance_suite(subject, g, p, &[seed])?;
    let mut constants = std::collections::BTreeMap::new();
    for c in &r.checks {
        constants.insert(c.test.clone(), c.deviation);
    }
    let name = match subject {
        Subject::Le => "equivariance_le",
        Subject::Peg => "equivariance_peg",
        Subject::Spe => "equivariance_spe",
    };
    Ok(StabilityReport::new(name, r.max_deviation, 1e-6, constants, &[g.adjacency().as_mat()]))
}

/// Lower-bound check of the instability construction: the sign-matched
/// distance must reach `0.99 ‖ΔB‖_F / gap`.
fn instability_reports(p: usize) -> Result<(Vec<StabilityReport>, String)> {
    let b = SymMatrix::diag(&[0.0, 0.01, 1.0, 2.0]);
    let p = p.clamp(1, 3);
    let curve = instability_curve(&b, p, &[1e-2, 1e-3, 1e-4])?;
    let reports = curve
        .iter()
        .map(|pt| {
            let mut c = std::collections::BTreeMap::new();
            c.insert("eps".to_string(), pt.eps);
            c.insert("gap".to_string(), pt.gap);
            c.insert("delta_b_f".to_string(), pt.delta_b_f);
            c.insert("residual_over_eps2".to_string(), pt.residual_over_eps2);
            StabilityReport::new(
                "instability_lower_bound",
                0.99 * pt.delta_b_f / pt.gap,
                pt.sign_distance,
                c,
                &[b.as_mat()],
            )
        })
        .collect();
    Ok((reports, crate::lab::curve_csv(&curve)))
}

#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub reports: Vec<StabilityReport>,
    /// `(ε, lhs, rhs)` rows for the instability curve.
    pub curve_csv: Option<String>,
}

impl VerifyOutcome {
    pub fn all_pass(&self) -> bool {
        self.reports.iter().all(StabilityReport::passes)
    }

    pub fn summary(&self, bound: Bound) -> Value {
        let violated = self.reports.iter().filter(|r| !r.passes()).count();
        let na = self.reports.iter().filter(|r| r.status == crate::lab::Status::NotApplicable).count();
        let worst = self
            .reports
            .iter()
            .filter(|r| r.rhs.is_finite() && r.rhs > 0.0)
            .map(|r| r.lhs / r.rhs)
            .fold(0.0, f64::max);
        json!({
            "schema": SCHEMA_VERSION,
            "bound": bound,
            "trials": self.reports.len(),
            "violated": violated,
            "not_applicable": na,
            "max_lhs_over_rhs": worst,
            "holds": violated == 0,
        })
    }
}

pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyOutcome> {
    let loaded = match &cfg.graph {
        Some(src) => Some(src.load(cfg.seed)?.0),
        None => None,
    };
    let t = cfg.trials;
    let reports: Vec<StabilityReport> = match cfg.bound {
        Bound::DavisKahan => flatten(par_trials(t, cfg.threads, |i| davis_kahan_sweep(1, trial_seed(cfg.seed, i)))?),
        Bound::LeStability => match &loaded {
            None => flatten(par_trials(t, cfg.threads, |i| le_stability_sweep(1, trial_seed(cfg.seed, i)))?),
            Some(g) => par_trials(t, cfg.threads, |i| {
                let g2 = perturb_edges(g, cfg.perturb.add, cfg.perturb.drop, trial_seed(cfg.seed, i))?;
                crate::lab::le_stability_verify(&normalized_laplacian(g)?, &normalized_laplacian(&g2)?, cfg.p)
            })?,
        },
        Bound::Eigenvalue => flatten(par_trials(t, cfg.threads, |i| eigvalue_sweep(1, trial_seed(cfg.seed, i)))?),
        Bound::PegTheorem => match &loaded {
            None => {
                let sweep = PegSweepConfig { p: cfg.p, add_ratio: cfg.perturb.add, drop_ratio: cfg.perturb.drop, ..Default::default() };
                flatten(par_trials(t, cfg.threads, |i| peg_sweep(1, trial_seed(cfg.seed, i), &sweep))?)
            }
            Some(g) => par_trials(t, cfg.threads, |i| {
                let s = trial_seed(cfg.seed, i);
                let g2 = perturb_edges(g, cfg.perturb.add, cfg.perturb.drop, s)?;
                let layer = stable_peg_layer(4, 8, 8, s);
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(s);
                let x = Mat::random_gaussian(g.n(), 4, &mut rng).scale(1.0 / (g.n() as f64).sqrt());
                verify_peg_stability(&layer, g, &g2, &x, cfg.p)
            })?,
        },
        Bound::SpeTheorem => {
            let spe = SpeConfig { d: cfg.d, ..Default::default() };
            match &loaded {
                None => flatten(par_trials(t, cfg.threads, |i| spe_sweep(1, trial_seed(cfg.seed, i), 24, &spe))?),
                Some(g) => par_trials(t, cfg.threads, |i| {
                    let s = trial_seed(cfg.seed, i);
                    let g2 = perturb_edges(g, cfg.perturb.add, cfg.perturb.drop, s)?;
                    let params = crate::spe::SpeParams::random(&spe, s)?;
                    crate::lab::verify_spe_stability(&params, g, &g2, cfg.d)
                })?,
            }
        }
        Bound::Instability => {
            let (reports, csv) = instability_reports(cfg.p)?;
            return Ok(VerifyOutcome { reports, curve_csv: Some(csv) });
        }
        Bound::Equivariance => {
            let g = match &loaded {
                Some(g) => g.clone(),
                None => crate::graph::random_connected_graph(16, 0.3, cfg.seed)?,
            };
            let mut out = Vec::new();
            for subject in [Subject::Le, Subject::Peg, Subject::Spe] {
                out.extend(par_trials(t, cfg.threads, |i| {
                    equivariance_report(subject, &g, cfg.p, trial_seed(cfg.seed, i))
                })?);
            }
            out
        }
    };
    Ok(VerifyOutcome { reports, curve_csv: None })
}

fn flatten<T>(v: Vec<Vec<T>>) -> Vec<T> {
    v.into_iter().flatten().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkpredConfig {
    pub graph: GraphSource,
    pub peg: PegConfig,
    /// Applied to the test graph at inference, with the encoding recomputed.
    pub perturb: Option<Perturbation>,
}

/// Trains a PEG link predictor and scores it, optionally again on a
/// perturbed test graph.
pub fn run_linkpred(cfg: &LinkpredConfig) -> Result<Value> {
    let peg = &cfg.peg;
    let (g, labels) = cfg.graph.load(peg.seed)?;
    let split = split_links(&g, peg.val_frac, peg.test_frac, labels.as_deref(), peg.seed)?;
    let stage = prepare_stage(&split.train_graph, peg)?;
    let model = model_for(peg, &stage)?;
    let test_stage = prepare_stage(&split.test_graph, peg)?;
    let baseline = evaluate_auc(&model, &test_stage, &split.test_pos, &split.test_neg)?;
    let trained = train_link_predictor(model, &split, peg)?;
    let m = &trained.metrics;
    let mut v = json!({
        "schema": SCHEMA_VERSION,
        "graph": cfg.graph.describe(),
        "n": g.n(),
        "edges": g.num_edges(),
        "seed": m.seed,
        "epochs": peg.epochs,
        "lr": peg.lr,
        "p": peg.pe.p,
        "method": peg.pe.method,
        "train_loss": m.train_loss,
        "val_auc": m.val_auc,
        "test_auc": m.test_auc,
        "best_epoch": m.best_epoch,
        "baseline_auc": baseline,
        "split": {
            "train": split.train_pos.len(),
            "val": split.val_pos.len(),
            "test": split.test_pos.len(),
        },
    });
    if let Some(p) = cfg.perturb.filter(|p| !p.is_none()) {
        let pg = perturb_edges(&split.test_graph, p.add, p.drop, peg.seed)?;
        let ps = prepare_stage(&pg, peg)?;
        v["perturb"] = json!(p);
        v["auc_perturbed"] = json!(evaluate_auc(&trained.model, &ps, &split.test_pos, &split.test_neg)?);
    }
    Ok(v)
}

/// Encoding of `g` as CSV plus its metadata.
pub fn run_encode(g: &Graph, pe: &PeConfig, seed: u64) -> Result<(String, Value)> {
    let enc: PositionalEncoding = encode(g, pe, seed)?;
    let mut meta = enc.metadata_json();
    meta["seed"] = json!(seed);
    if pe.method != PeMethod::Le {
        meta["steps"] = json!(pe.steps);
    }
    Ok((enc.to_csv(), meta))
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

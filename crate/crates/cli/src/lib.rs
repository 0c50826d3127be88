//! Config parsing and subcommands for the `refproto` binary.
//!
//! Configs are flat `key = value` files. `#` starts a comment, blank lines
//! are ignored, and values may be wrapped in double quotes. Unknown keys are
//! rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use refproto::orchestrator::{
    embeddings, run_ablation, run_experiment, write_ablation_csv, write_embeddings_csv, write_metrics,
    BackboneInit, ExperimentConfig, ExperimentResult, KBudget, PublicCoverage,
};
use refproto::trace::{privacy_scan, verify, Finding, Trace};
use refproto::Mode;
use serde_json::Value;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Every key the config file accepts.
pub const CONFIG_KEYS: &[&str] = &[
    "input_dim",
    "hidden_dim",
    "embed_dim",
    "num_classes",
    "num_clients",
    "client_fraction",
    "rounds",
    "local_epochs",
    "batch_size",
    "lr",
    "momentum",
    "weight_decay",
    "lambda",
    "k_budget",
    "k_fraction",
    "k_budget_per_client",
    "alpha",
    "public_fraction",
    "public_classes",
    "public_per_class",
    "train_per_class",
    "test_per_class",
    "center_radius",
    "noise_std",
    "backbone_init",
    "mode",
    "seed",
];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("kind=config path={path:?}{}{}: {reason}", key.as_ref().map(|k| format!(" key={k}")).unwrap_or_default(), line.map(|l| format!(" line={l}")).unwrap_or_default())]
    Config {
        path: PathBuf,
        key: Option<String>,
        line: Option<usize>,
        reason: String,
    },

    #[error("kind=io path={path:?}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("kind=run: {0}")]
    Core(#[from] refproto::Error),

    #[error("kind=check findings={}: {}", .0.len(), .0.first().map(|f| f.to_string()).unwrap_or_default())]
    Check(Vec<Finding>),
}

impl CliError {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn strip_value(raw: &str) -> &str {
    let v = raw.trim();
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    if v.trim().is_empty() {
        return Some(Vec::new());
    }
    v.split(',').map(|s| s.trim().parse().ok()).collect()
}

/// Parses config text. `path` only labels errors.
pub fn parse_config_str(text: &str, path: &Path) -> CliResult<ExperimentConfig> {
    let err = |key: Option<&str>, line: Option<usize>, reason: String| CliError::Config {
        path: path.to_path_buf(),
        key: key.map(str::to_string),
        line,
        reason,
    };
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(err(None, Some(line), format!("expected key = value, got {content:?}")));
        };
        let key = key.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(err(Some(key), Some(line), "unknown key".into()));
        }
        if let Some((first, _)) = entries.insert(key.to_string(), (line, strip_value(value).to_string())) {
            return Err(err(Some(key), Some(line), format!("duplicate key, first set on line {first}")));
        }
    }

    let mut c = ExperimentConfig::default();
    for (key, (line, v)) in &entries {
        let bad = |what: &str| err(Some(key), Some(*line), format!("{v:?} is not {what}"));
        let usize_of = || v.parse::<usize>().map_err(|_| bad("a nonnegative integer"));
        let f64_of = || v.parse::<f64>().map_err(|_| bad("a number"));
        match key.as_str() {
            "input_dim" => c.shape.input_dim = usize_of()?,
            "hidden_dim" => c.shape.hidden_dim = usize_of()?,
            "embed_dim" => c.shape.embed_dim = usize_of()?,
            "num_classes" => c.shape.num_classes = usize_of()?,
            "num_clients" => c.num_clients = usize_of()?,
            "client_fraction" => c.client_fraction = f64_of()?,
            "rounds" => c.rounds = usize_of()?,
            "local_epochs" => c.local_epochs = usize_of()?,
            "batch_size" => c.batch_size = usize_of()?,
            "lr" => c.lr = f64_of()?,
            "momentum" => c.momentum = f64_of()?,
            "weight_decay" => c.weight_decay = f64_of()?,
            "lambda" => c.lambda = f64_of()?,
            "k_budget" => c.k_budget = KBudget::Count(usize_of()?),
            "k_fraction" => c.k_budget = KBudget::Fraction(f64_of()?),
            "k_budget_per_client" => {
                c.k_budget = KBudget::PerClient(parse_list(v).ok_or_else(|| bad("a comma-separated integer list"))?)
            }
            "alpha" => c.alpha = f64_of()?,
            "public_fraction" => c.public_coverage = PublicCoverage::Fraction(f64_of()?),
            "public_classes" => {
                let classes: Vec<usize> = parse_list(v).ok_or_else(|| bad("a comma-separated class list"))?;
                c.public_coverage = PublicCoverage::Classes(classes.into_iter().collect::<BTreeSet<_>>());
            }
            "public_per_class" => c.public_per_class = usize_of()?,
            "train_per_class" => c.train_per_class = usize_of()?,
            "test_per_class" => c.test_per_class = usize_of()?,
            "center_radius" => c.center_radius = f64_of()?,
            "noise_std" => c.noise_std = f64_of()?,
            "backbone_init" => {
                c.backbone_init = match v.as_str() {
                    "shared" => BackboneInit::Shared,
                    "per_client" => BackboneInit::PerClient,
                    _ => return Err(bad("shared or per_client")),
                }
            }
            "mode" => c.mode = v.parse().map_err(|_| bad("a known mode"))?,
            "seed" => c.seed = v.parse().map_err(|_| bad("a 64-bit unsigned integer"))?,
            _ => unreachable!("key list and match arms agree"),
        }
    }
    for group in [&["k_budget", "k_fraction", "k_budget_per_client"][..], &["public_fraction", "public_classes"]] {
        let set: Vec<_> = group.iter().filter(|k| entries.contains_key(**k)).collect();
        if set.len() > 1 {
            let (line, _) = &entries[*set[1]];
            return Err(err(Some(set[1]), Some(*line), format!("conflicts with {}", set[0])));
        }
    }
    validate_config(&c, path, &entries)?;
    Ok(c)
}

fn validate_config(
    c: &ExperimentConfig,
    path: &Path,
    entries: &BTreeMap<String, (usize, String)>,
) -> CliResult<()> {
    c.validate().map_err(|e| match e {
        refproto::Error::InvalidArgument { name, reason } => CliError::Config {
            path: path.to_path_buf(),
            key: Some(name.to_string()),
            line: entries.get(name).map(|(l, _)| *l),
            reason,
        },
        other => CliError::Core(other),
    })
}

/// Reads and parses a config file.
pub fn parse_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_config_str(&text, path)
}

/// A resolved subcommand invocation.
#[derive(Debug, Clone, Default)]
pub struct Invocation {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub rounds: Option<usize>,
}

impl Invocation {
    /// The config file (or defaults) with command-line overrides applied.
    pub fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => parse_config(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(m) = self.mode {
            c.mode = m;
        }
        if let Some(r) = self.rounds {
            c.rounds = r;
        }
        let label = self.config.clone().unwrap_or_else(|| PathBuf::from("<defaults>"));
        validate_config(&c, &label, &BTreeMap::new())?;
        Ok(c)
    }

    fn out_dir(&self) -> CliResult<&Path> {
        fs::create_dir_all(&self.out).map_err(CliError::io(&self.out))?;
        Ok(&self.out)
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(CliError::io(path))
}

fn write_trace(result: &ExperimentResult, path: &Path) -> CliResult<()> {
    let findings = verify(&result.trace);
    if !findings.is_empty() {
        return Err(CliError::Check(findings));
    }
    let mut w = create(path)?;
    result.trace.write_jsonl(&mut w)?;
    w.flush().map_err(CliError::io(path))
}

/// Runs one experiment and writes `metrics.csv` and `trace.jsonl`.
pub fn cmd_run(inv: &Invocation) -> CliResult<ExperimentResult> {
    let config = inv.resolve()?;
    let out = inv.out_dir()?;
    let result = run_experiment(&config)?;
    let metrics = out.join(METRICS_FILE);
    let mut w = create(&metrics)?;
    result.write_metrics_csv(&mut w)?;
    w.flush().map_err(CliError::io(&metrics))?;
    write_trace(&result, &out.join(TRACE_FILE))?;
    Ok(result)
}

/// Runs all four modes. Writes a combined `metrics.csv`, `ablation.csv`, and
/// one `<mode>/trace.jsonl` per mode.
pub fn cmd_ablate(inv: &Invocation) -> CliResult<Vec<refproto::orchestrator::AblationRow>> {
    let config = inv.resolve()?;
    let out = inv.out_dir()?;
    let runs = run_ablation(&config)?;
    for (row, result) in &runs {
        let dir = out.join(row.mode.as_str());
        fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
        write_trace(result, &dir.join(TRACE_FILE))?;
    }
    let metrics = out.join(METRICS_FILE);
    let mut w = create(&metrics)?;
    write_metrics(&mut w, &runs.iter().map(|(_, r)| r).collect::<Vec<_>>())?;
    w.flush().map_err(CliError::io(&metrics))?;
    let rows: Vec<_> = runs.into_iter().map(|(row, _)| row).collect();
    let table = out.join(ABLATION_FILE);
    let mut w = create(&table)?;
    write_ablation_csv(&mut w, &rows)?;
    w.flush().map_err(CliError::io(&table))?;
    Ok(rows)
}

/// Replays the run to its final state and writes `embeddings.csv`.
pub fn cmd_dump_embeddings(inv: &Invocation) -> CliResult<usize> {
    let config = inv.resolve()?;
    let out = inv.out_dir()?;
    let result = run_experiment(&config)?;
    let test = refproto::Federation::build(&config)?.env.test;
    let rows = embeddings(&result.snapshot, &test)?;
    let path = out.join(EMBEDDINGS_FILE);
    let mut w = create(&path)?;
    write_embeddings_csv(&mut w, &rows)?;
    w.flush().map_err(CliError::io(&path))?;
    Ok(rows.len())
}

/// Checks an existing trace: ledgers, ordering, mode algebra, and the uplink
/// field allowlist. `path` may be the trace file or a directory holding one.
pub fn cmd_verify_trace(path: &Path) -> CliResult<()> {
    let file = if path.is_dir() { path.join(TRACE_FILE) } else { path.to_path_buf() };
    let f = File::open(&file).map_err(CliError::io(&file))?;
    let mut lines = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(CliError::io(&file))?;
        if !line.trim().is_empty() {
            lines.push(serde_json::from_str::<Value>(&line).map_err(refproto::Error::from)?);
        }
    }
    let mut findings = privacy_scan(&lines);
    let f = File::open(&file).map_err(CliError::io(&file))?;
    let trace = Trace::read_jsonl(BufReader::new(f))?;
    findings.extend(verify(&trace));
    if findings.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(findings))
    }
}

impl fmt::Display for Invocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "out={}", self.out.display())
    }
}

//! Experiment harness behind the `invalign` binary.
//!
//! Every command reads a JSON [`ExperimentConfig`]. Command-line flags override
//! the file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use invalign::encoder::Checkpoint;
use invalign::metrics::MetricRecord;
use invalign::trainer::{
    correlation_study, evaluate, sweep, train_with, Axis, Correlation, MeanStd, Method, RunRecord, SweepRow,
    TrainConfig,
};
use invalign::worldgen::{generate_world, leave_one_out, read_csv, write_csv, DomainDataset, LeaveOneOutSplit, WorldSpec};
use serde::{Deserialize, Serialize};

pub const RECORD_FILE: &str = "record.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RUN_META_FILE: &str = "run.json";
pub const WORLD_FILE: &str = "world.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] invalign::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 0 success, 1 usage or validation, 2 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(invalign::Error::Diverged { .. } | invalign::Error::NonFinite(_)) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Held-out domain selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    HeldOut(usize),
    All,
}

impl Serialize for Protocol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Protocol::HeldOut(k) => s.serialize_u64(*k as u64),
            Protocol::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for Protocol {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(k) => Ok(Protocol::HeldOut(k)),
            Raw::Word(w) if w == "all" => Ok(Protocol::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "protocol must be a domain index or \"all\", got {w:?}"
            ))),
        }
    }
}

/// A world given either in full or by the parameters of
/// [`WorldSpec::with_random_offsets`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorldConfig {
    Explicit(WorldSpec),
    Random(RandomWorld),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomWorld {
    pub input_dim: usize,
    pub num_domains: usize,
    pub n_per_domain_per_class: usize,
    pub class_gap: f64,
    pub noise_sigma: f64,
    pub offset_scale: f64,
    pub seed: u64,
    #[serde(default)]
    pub spurious_strength: Option<f64>,
    #[serde(default)]
    pub spurious_flip_domain: Option<usize>,
}

impl WorldConfig {
    pub fn resolve(&self) -> CliResult<WorldSpec> {
        let spec = match self {
            WorldConfig::Explicit(s) => s.clone(),
            WorldConfig::Random(r) => {
                let base = WorldSpec::with_random_offsets(
                    r.input_dim,
                    r.num_domains,
                    r.n_per_domain_per_class,
                    r.class_gap,
                    r.noise_sigma,
                    r.offset_scale,
                    r.seed,
                );
                match (r.spurious_strength, r.spurious_flip_domain) {
                    (Some(_), Some(_)) if r.input_dim < 2 => {
                        return Err(usage("a spurious coordinate needs input_dim >= 2"))
                    }
                    (Some(s), Some(f)) => base.with_spurious(s, f, r.offset_scale),
                    (None, None) => base,
                    _ => {
                        return Err(usage(
                            "spurious_strength and spurious_flip_domain must be given together",
                        ))
                    }
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Replicate seeds; defaults to `train.seed`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// CSV dataset to use instead of generating `world`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
}

fn default_protocol() -> Protocol {
    Protocol::All
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Flag values that override the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads the config; relative paths inside it resolve against its
    /// directory.
    pub fn load(path: &Path, ov: &Overrides) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        if let Some(d) = &cfg.dataset {
            if d.is_relative() {
                cfg.dataset = Some(base.join(d));
            }
        }
        cfg.apply(ov)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) -> CliResult<()> {
        if let Some(s) = ov.seed {
            self.train.seed = s;
            self.seeds = vec![s];
        }
        if let Some(o) = &ov.out {
            self.out = o.clone();
        }
        if self.seeds.is_empty() {
            self.seeds = vec![self.train.seed];
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(usage("replicate seeds must be distinct"));
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn dataset(&self) -> CliResult<DomainDataset> {
        match &self.dataset {
            Some(p) => Ok(read_csv(p)?),
            None => Ok(generate_world(&self.world.resolve()?)?),
        }
    }

    pub fn held_out_domains(&self, num_domains: usize) -> CliResult<Vec<usize>> {
        match self.protocol {
            Protocol::All => Ok((0..num_domains).collect()),
            Protocol::HeldOut(k) if k < num_domains => Ok(vec![k]),
            Protocol::HeldOut(k) => Err(usage(format!(
                "held-out domain {k} out of range for {num_domains} domains"
            ))),
        }
    }

    pub fn splits(&self) -> CliResult<Vec<LeaveOneOutSplit>> {
        let data = self.dataset()?;
        self.held_out_domains(data.num_domains())?
            .into_iter()
            .map(|h| Ok(leave_one_out(&data, h)?))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: WorldSpec,
    pub rows: usize,
    pub csv: String,
}

/// Writes `world.csv` and `manifest.json` into the output directory.
pub fn cmd_generate(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let spec = cfg.world.resolve()?;
    let data = generate_world(&spec)?;
    fs::create_dir_all(&cfg.out).map_err(io_at(&cfg.out))?;
    let csv_path = cfg.out.join(WORLD_FILE);
    write_csv(&data, &csv_path)?;
    let manifest = Manifest {
        spec,
        rows: data.len(),
        csv: WORLD_FILE.into(),
    };
    let mpath = cfg.out.join(MANIFEST_FILE);
    let body = serde_json::to_string_pretty(&manifest).map_err(invalign::Error::from)?;
    fs::write(&mpath, body + "\n").map_err(io_at(&mpath))?;
    Ok(csv_path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub method: Method,
    pub held_out: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

pub fn run_dir_name(method: Method, held_out: usize, seed: u64) -> String {
    format!("{}_heldout{held_out}_seed{seed}", method.name().to_ascii_lowercase())
}

/// Outcome of one training run inside `cmd_train`.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub record: RunRecord,
}

fn write_run(dir: &Path, meta: &RunMeta, record: &RunRecord) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let rpath = dir.join(RECORD_FILE);
    fs::write(&rpath, record.to_jsonl()?).map_err(io_at(&rpath))?;
    let mpath = dir.join(RUN_META_FILE);
    let body = serde_json::to_string_pretty(meta).map_err(invalign::Error::from)?;
    fs::write(&mpath, body + "\n").map_err(io_at(&mpath))?;
    Ok(())
}

/// Trains every (held-out domain, seed) pair. Per-epoch lines go to `log`.
/// A diverged run still writes its record before the error is returned.
pub fn cmd_train<W: Write>(cfg: &ExperimentConfig, log: &mut W) -> CliResult<Vec<RunOutcome>> {
    let splits = cfg.splits()?;
    let mut outcomes = Vec::new();
    for split in &splits {
        for &seed in &cfg.seeds {
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let meta = RunMeta {
                method: tc.method,
                held_out: split.held_out,
                seed,
                train: tc.clone(),
            };
            let dir = cfg.out.join(run_dir_name(tc.method, split.held_out, seed));
            let _ = writeln!(log, "# {} held-out {} seed {}", tc.method, split.held_out, seed);
            let result = train_with(split, &tc, |s| {
                let e = s.entry;
                let cos = e.s_cos.map_or("-".to_string(), |c| format!("{c:.6}"));
                let _ = writeln!(
                    log,
                    "epoch {:>3} loss {:.5} auc {:.4} hter {:.4} tpr {:.4} s_cos {cos}",
                    e.epoch, e.loss_all, e.auc, e.hter, e.tpr_at_fpr05
                );
            });
            match result {
                Ok(out) => {
                    write_run(&dir, &meta, &out.record)?;
                    let ck = Checkpoint {
                        dims: tc.encoder_dims(split.train.dim()),
                        seed,
                        epoch: tc.epochs,
                        encoder: out.encoder,
                        hyperplanes: out.hyperplanes,
                    };
                    ck.save(&dir.join(CHECKPOINT_FILE))?;
                    if let Some(s) = &out.record.summary {
                        let _ = writeln!(log, "{}", format_summary(s));
                    }
                    outcomes.push(RunOutcome { dir, record: out.record });
                }
                Err(invalign::Error::Diverged { epoch, reason, record }) => {
                    write_run(&dir, &meta, &record)?;
                    return Err(invalign::Error::Diverged { epoch, reason, record }.into());
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(outcomes)
}

fn format_summary(s: &invalign::trainer::Summary) -> String {
    let cos = s.final_s_cos.map_or("-".to_string(), |c| format!("{c:.6}"));
    format!(
        "last {} epochs: HTER {:.4} ± {:.4}  AUC {:.4} ± {:.4}  TPR@FPR5% {:.4} ± {:.4}  final S_cos {cos}",
        s.k, s.hter.mean, s.hter.std, s.auc.mean, s.auc.std, s.tpr_at_fpr05.mean, s.tpr_at_fpr05.std
    )
}

pub fn parse_values(text: &str) -> CliResult<Vec<f64>> {
    let values: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| usage(format!("bad sweep value {v:?}"))))
        .collect::<CliResult<_>>()?;
    if values.is_empty() {
        return Err(usage("no sweep values given"));
    }
    Ok(values)
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn sweep_csv(axis: Axis, rows: &[SweepRow]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Core(e.into());
    w.write_record([
        axis.name(),
        "runs",
        "auc_mean",
        "auc_std",
        "hter_mean",
        "hter_std",
        "tpr_mean",
        "tpr_std",
        "final_s_cos",
    ])
    .map_err(io)?;
    for r in rows {
        w.write_record([
            r.value.to_string(),
            r.runs.to_string(),
            r.auc.mean.to_string(),
            r.auc.std.to_string(),
            r.hter.mean.to_string(),
            r.hter.std.to_string(),
            r.tpr_at_fpr05.mean.to_string(),
            r.tpr_at_fpr05.std.to_string(),
            opt(r.final_s_cos),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| usage(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Runs the sweep and writes `sweep_<axis>.csv` into the output directory.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: Axis, values: &[f64]) -> CliResult<(PathBuf, String)> {
    let splits = cfg.splits()?;
    let rows = sweep(&splits, &cfg.train, axis, values, &cfg.seeds)?;
    let table = sweep_csv(axis, &rows)?;
    fs::create_dir_all(&cfg.out).map_err(io_at(&cfg.out))?;
    let path = cfg.out.join(format!("sweep_{}.csv", axis.name()));
    fs::write(&path, &table).map_err(io_at(&path))?;
    Ok((path, table))
}

/// Reads a completed run directory.
pub fn load_run(dir: &Path) -> CliResult<(RunMeta, RunRecord)> {
    let incomplete = |why: String| usage(format!("incomplete run directory {}: {why}", dir.display()));
    let mpath = dir.join(RUN_META_FILE);
    let meta_text = fs::read_to_string(&mpath).map_err(|e| incomplete(format!("{RUN_META_FILE}: {e}")))?;
    let meta: RunMeta = serde_json::from_str(&meta_text).map_err(|e| incomplete(format!("{RUN_META_FILE}: {e}")))?;
    let rpath = dir.join(RECORD_FILE);
    let text = fs::read_to_string(&rpath).map_err(|e| incomplete(format!("{RECORD_FILE}: {e}")))?;
    let record = RunRecord::from_jsonl(&text).map_err(|e| incomplete(format!("{RECORD_FILE}: {e}")))?;
    if record.failure.is_some() || record.summary.is_none() {
        return Err(incomplete("the run did not finish".into()));
    }
    Ok((meta, record))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub runs: usize,
    /// Mean and population std across runs of each run's last-k mean.
    pub hter: MeanStd,
    pub auc: MeanStd,
    pub tpr_at_fpr05: MeanStd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub correlation: Option<Correlation>,
}

pub fn build_report(dirs: &[PathBuf], correlate: bool) -> CliResult<Report> {
    if dirs.is_empty() {
        return Err(usage("report needs at least one run directory"));
    }
    let runs: Vec<(RunMeta, RunRecord)> = dirs.iter().map(|d| load_run(d)).collect::<CliResult<_>>()?;
    let mut methods: Vec<Method> = runs.iter().map(|(m, _)| m.method).collect();
    methods.sort();
    methods.dedup();
    let rows = methods
        .into_iter()
        .map(|method| {
            let sums: Vec<&invalign::trainer::Summary> = runs
                .iter()
                .filter(|(m, _)| m.method == method)
                .map(|(_, r)| r.summary.as_ref().expect("checked in load_run"))
                .collect();
            let col = |f: fn(&invalign::trainer::Summary) -> f64| {
                MeanStd::of(&sums.iter().map(|s| f(s)).collect::<Vec<_>>())
            };
            ReportRow {
                method,
                runs: sums.len(),
                hter: col(|s| s.hter.mean),
                auc: col(|s| s.auc.mean),
                tpr_at_fpr05: col(|s| s.tpr_at_fpr05.mean),
            }
        })
        .collect();
    let correlation = if correlate {
        let records: Vec<RunRecord> = runs.into_iter().map(|(_, r)| r).collect();
        Some(correlation_study(&records)?)
    } else {
        None
    };
    Ok(Report { rows, correlation })
}

pub fn report_csv(report: &Report) -> CliResult<String> {
    let io = |e: csv::Error| CliError::Core(e.into());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method", "runs", "hter_mean", "hter_std", "auc_mean", "auc_std", "tpr_mean", "tpr_std",
    ])
    .map_err(io)?;
    for r in &report.rows {
        w.write_record([
            r.method.name().to_string(),
            r.runs.to_string(),
            r.hter.mean.to_string(),
            r.hter.std.to_string(),
            r.auc.mean.to_string(),
            r.auc.std.to_string(),
            r.tpr_at_fpr05.mean.to_string(),
            r.tpr_at_fpr05.std.to_string(),
        ])
        .map_err(io)?;
    }
    let mut out = String::from_utf8(w.into_inner().map_err(|e| usage(e.to_string()))?).expect("utf-8");
    if let Some(c) = &report.correlation {
        out.push_str("\nsnapshots,spearman_s_align_auc,spearman_s_sep_auc\n");
        out.push_str(&format!("{},{},{}\n", c.snapshots, c.s_align_vs_auc, c.s_sep_vs_auc));
    }
    Ok(out)
}

/// Evaluates a saved checkpoint on one held-out domain of the configured
/// dataset.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path, held_out: Option<usize>) -> CliResult<MetricRecord> {
    let ck = Checkpoint::load(checkpoint)?;
    let data = cfg.dataset()?;
    let h = match (held_out, cfg.protocol) {
        (Some(h), _) | (None, Protocol::HeldOut(h)) => h,
        (None, Protocol::All) => {
            return Err(usage("pass --held-out when the config protocol is \"all\""));
        }
    };
    let split = leave_one_out(&data, h)?;
    Ok(evaluate(&ck.encoder, &ck.hyperplanes, &split.test)?)
}

/// Caps the rayon pool at `INVALIGN_THREADS` when set.
pub fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("INVALIGN_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("INVALIGN_THREADS must be a positive integer, got {v:?}")))?;
        // a pool may already exist in tests; the first setting wins
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

//! Training loop, ablation arms, evaluation and sweeps.
//!
//! Every method shares one pipeline: stratified mini-batches (equal numbers of
//! live and spoof samples from each training domain), two jittered views per
//! sample, forward pass, method-specific loss, backward pass, head update and
//! encoder update. Single-head methods keep a one-element [`HyperplaneSet`], so
//! the head update is always [`pg_irm_update`] (which reduces to SGD when there
//! is nothing to align against).

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::MlpEncoder;
use crate::losses::{erm_loss, irm_v1_loss, sa_fas_loss, supcon_loss, AugmentedBatch, LossOutput};
use crate::metrics::{auc, hter, s_align, s_sep, spearman, tpr_at_fpr, MetricRecord, ScoredSet};
use crate::numkit::{Matrix, Rng, Stream};
use crate::pgirm::{mean_hyperplane_score, pg_irm_update, s_cos, HyperplaneSet};
use crate::worldgen::{DomainDataset, Label, LeaveOneOutSplit};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Erm,
    ErmSupcon,
    IrmV1,
    PgIrm,
    SaFas,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Erm,
        Method::ErmSupcon,
        Method::IrmV1,
        Method::PgIrm,
        Method::SaFas,
    ];

    /// One head per training domain, updated by PG-IRM.
    pub fn per_domain_heads(self) -> bool {
        matches!(self, Method::PgIrm | Method::SaFas)
    }

    pub fn uses_supcon(self) -> bool {
        matches!(self, Method::ErmSupcon | Method::SaFas)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "ERM",
            Method::ErmSupcon => "ERM_SUPCON",
            Method::IrmV1 => "IRM_V1",
            Method::PgIrm => "PG_IRM",
            Method::SaFas => "SA_FAS",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Initial learning rate γ.
    pub lr: f64,
    pub alpha: f64,
    /// SupCon weight.
    pub lambda: f64,
    pub lambda_irm: f64,
    pub tau: f64,
    /// Last epoch of plain gradient descent on the heads.
    pub t_a: usize,
    pub epochs: usize,
    /// The learning rate is halved after each of these epochs.
    pub lr_decay_epochs: Vec<usize>,
    pub weight_decay: f64,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    /// Append a bias entry to every head.
    pub bias: bool,
    /// Samples drawn from each training domain per step, half per class.
    pub batch_per_domain: Option<usize>,
    /// Standard deviation of the view jitter; estimated from the data if unset.
    pub aug_sigma: Option<f64>,
    pub beta_init_std: f64,
    /// Trailing epochs averaged in the summary.
    pub last_k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::SaFas,
            lr: 5e-3,
            alpha: 0.995,
            lambda: 0.1,
            lambda_irm: 1.0,
            tau: 0.1,
            t_a: 20,
            epochs: 100,
            lr_decay_epochs: vec![40, 80],
            weight_decay: 5e-4,
            hidden_dims: vec![64, 64],
            embed_dim: 16,
            bias: false,
            batch_per_domain: None,
            aug_sigma: None,
            beta_init_std: 0.01,
            last_k: 10,
            seed: 0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be non-negative, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("lr", self.lr)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        non_negative("lambda", self.lambda)?;
        non_negative("lambda_irm", self.lambda_irm)?;
        positive("tau", self.tau)?;
        non_negative("weight_decay", self.weight_decay)?;
        positive("beta_init_std", self.beta_init_std)?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.t_a >= self.epochs {
            return Err(Error::invalid(format!(
                "t_a ({}) must be smaller than epochs ({})",
                self.t_a, self.epochs
            )));
        }
        if self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if let Some(b) = self.batch_per_domain {
            if b < 2 {
                return Err(Error::invalid("batch_per_domain must be at least 2"));
            }
        }
        if let Some(s) = self.aug_sigma {
            non_negative("aug_sigma", s)?;
        }
        if self.last_k == 0 {
            return Err(Error::invalid("last_k must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate in effect during 1-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = self.lr_decay_epochs.iter().filter(|&&d| epoch > d).count();
        self.lr * 0.5f64.powi(halvings as i32)
    }

    pub fn encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's steps.
    pub loss_all: f64,
    /// Mean per-domain risk.
    pub loss_align: f64,
    /// Mean contrastive loss (0 for methods without it).
    pub loss_sep: f64,
    /// Mean IRM-v1 penalty (0 for other methods).
    pub loss_penalty: f64,
    pub s_cos: Option<f64>,
    /// Held-out metrics after the epoch.
    pub auc: f64,
    pub hter: f64,
    pub tpr_at_fpr05: f64,
    pub s_sep: f64,
    pub s_align: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> MeanStd {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Number of trailing epochs averaged.
    pub k: usize,
    pub auc: MeanStd,
    pub hter: MeanStd,
    pub tpr_at_fpr05: MeanStd,
    pub s_sep: MeanStd,
    pub s_align: MeanStd,
    pub s_cos: Option<MeanStd>,
    pub final_s_cos: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    /// Original index of the held-out domain, when known.
    pub held_out: Option<usize>,
    pub entries: Vec<EpochEntry>,
    pub summary: Option<Summary>,
    pub failure: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum RecordLine {
    Epoch(EpochEntry),
    Summary {
        method: Method,
        seed: u64,
        held_out: Option<usize>,
        summary: Option<Summary>,
        failure: Option<String>,
    },
}

impl RunRecord {
    pub fn new(method: Method, seed: u64, held_out: Option<usize>) -> Self {
        RunRecord {
            method,
            seed,
            held_out,
            entries: Vec::new(),
            summary: None,
            failure: None,
        }
    }

    /// One epoch per line followed by a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(&RecordLine::Epoch(e.clone()))?);
            out.push('\n');
        }
        let tail = RecordLine::Summary {
            method: self.method,
            seed: self.seed,
            held_out: self.held_out,
            summary: self.summary.clone(),
            failure: self.failure.clone(),
        };
        out.push_str(&serde_json::to_string(&tail)?);
        out.push('\n');
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut tail = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i as u64 + 1;
            if tail.is_some() {
                return Err(Error::Parse {
                    line: lineno,
                    message: "content after the summary line".into(),
                });
            }
            let parsed: RecordLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            match parsed {
                RecordLine::Epoch(e) => entries.push(e),
                RecordLine::Summary {
                    method,
                    seed,
                    held_out,
                    summary,
                    failure,
                } => tail = Some((method, seed, held_out, summary, failure)),
            }
        }
        let (method, seed, held_out, summary, failure) = tail.ok_or_else(|| Error::Parse {
            line: text.lines().count() as u64,
            message: "missing summary line; the run did not complete".into(),
        })?;
        Ok(RunRecord {
            method,
            seed,
            held_out,
            entries,
            summary,
            failure,
        })
    }
}

/// Mean and population std of each metric over the last `min(k, epochs)`
/// entries.
pub fn summarize_last_k(record: &RunRecord, k: usize) -> Result<Summary> {
    if record.entries.is_empty() {
        return Err(Error::Empty("run record".into()));
    }
    let k = k.clamp(1, record.entries.len());
    let tail = &record.entries[record.entries.len() - k..];
    let col = |f: fn(&EpochEntry) -> f64| MeanStd::of(&tail.iter().map(f).collect::<Vec<_>>());
    let cos: Option<Vec<f64>> = tail.iter().map(|e| e.s_cos).collect();
    Ok(Summary {
        k,
        auc: col(|e| e.auc),
        hter: col(|e| e.hter),
        tpr_at_fpr05: col(|e| e.tpr_at_fpr05),
        s_sep: col(|e| e.s_sep),
        s_align: col(|e| e.s_align),
        s_cos: cos.map(|c| MeanStd::of(&c)),
        final_s_cos: record.entries.last().and_then(|e| e.s_cos),
    })
}

/// Embeds `test`, scores it under the mean hyperplane and computes every
/// metric.
pub fn evaluate(enc: &MlpEncoder, set: &HyperplaneSet, test: &DomainDataset) -> Result<MetricRecord> {
    if test.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    let z = enc.embed(&test.features())?;
    let labels = test.labels();
    let scored = ScoredSet::new(mean_hyperplane_score(set, &z)?, labels.clone())?;
    Ok(MetricRecord {
        auc: auc(&scored)?,
        hter: hter(&scored)?,
        tpr_at_fpr05: tpr_at_fpr(&scored, 0.05)?,
        s_sep: s_sep(&z, &labels)?,
        s_align: s_align(set, &z, &labels)?,
        s_cos: s_cos(set)?,
    })
}

/// State handed to the per-epoch observer.
pub struct EpochState<'a> {
    pub entry: &'a EpochEntry,
    pub encoder: &'a MlpEncoder,
    pub hyperplanes: &'a HyperplaneSet,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub encoder: MlpEncoder,
    pub hyperplanes: HyperplaneSet,
    pub record: RunRecord,
}

/// Default per-domain batch: a sixteenth of the smallest domain per class,
/// between 16 and 96 samples, even, and no larger than the domain allows.
pub fn default_batch_per_domain(min_pool: usize) -> usize {
    let smallest_domain = 2 * min_pool;
    let b = (smallest_domain / 8).clamp(16, 96);
    let b = b - b % 2;
    b.min(smallest_domain)
}

/// Square root of the mean within-(domain, class) coordinate variance.
pub fn pooled_within_std(data: &DomainDataset) -> f64 {
    let d = data.dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for e in 0..data.num_domains() {
        for label in Label::BOTH {
            let idx = data.indices_of(e, label);
            let n = idx.len() as f64;
            for j in 0..d {
                let mean = idx.iter().map(|&i| data.samples()[i].x[j]).sum::<f64>() / n;
                total += idx
                    .iter()
                    .map(|&i| (data.samples()[i].x[j] - mean).powi(2))
                    .sum::<f64>();
            }
            count += idx.len() * d;
        }
    }
    (total / count as f64).sqrt()
}

/// Shuffled index pool that reshuffles itself whenever it runs dry.
struct Pool {
    indices: Vec<usize>,
    cursor: usize,
}

impl Pool {
    fn new(mut indices: Vec<usize>, rng: &mut Rng) -> Self {
        rng.shuffle(&mut indices);
        Pool { indices, cursor: 0 }
    }

    fn take(&mut self, n: usize, rng: &mut Rng, out: &mut Vec<usize>) {
        for _ in 0..n {
            if self.cursor == self.indices.len() {
                rng.shuffle(&mut self.indices);
                self.cursor = 0;
            }
            out.push(self.indices[self.cursor]);
            self.cursor += 1;
        }
    }
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    train: &'a DomainDataset,
    /// `pools[e][class code]`
    pools: Vec<[Pool; 2]>,
    per_class: usize,
    steps_per_epoch: usize,
    aug_sigma: f64,
    batch_rng: Rng,
    aug_rng: Rng,
}

#[derive(Default)]
struct StepTotals {
    all: f64,
    risk: f64,
    sep: f64,
    penalty: f64,
}

impl<'a> Loop<'a> {
    fn new(split: &'a LeaveOneOutSplit, cfg: &'a TrainConfig) -> Result<Self> {
        let train = &split.train;
        let num_domains = train.num_domains();
        if cfg.method.per_domain_heads() && num_domains < 2 {
            return Err(Error::invalid(format!(
                "{} needs at least two training domains, got {num_domains}",
                cfg.method
            )));
        }
        let mut batch_rng = Rng::derive(cfg.seed, Stream::Batching, 0);
        let mut pools = Vec::with_capacity(num_domains);
        let mut min_pool = usize::MAX;
        let mut max_pool = 0;
        for e in 0..num_domains {
            let live = train.indices_of(e, Label::Live);
            let spoof = train.indices_of(e, Label::Spoof);
            if live.is_empty() || spoof.is_empty() {
                return Err(Error::invalid(format!("training domain {e} lacks one of the classes")));
            }
            for n in [live.len(), spoof.len()] {
                min_pool = min_pool.min(n);
                max_pool = max_pool.max(n);
            }
            pools.push([Pool::new(live, &mut batch_rng), Pool::new(spoof, &mut batch_rng)]);
        }
        let per_domain = cfg
            .batch_per_domain
            .unwrap_or_else(|| default_batch_per_domain(min_pool));
        let per_class = (per_domain / 2).clamp(1, min_pool);
        let aug_sigma = match cfg.aug_sigma {
            Some(s) => s,
            None => 0.05 * pooled_within_std(train),
        };
        Ok(Loop {
            cfg,
            train,
            pools,
            per_class,
            steps_per_epoch: max_pool.div_ceil(per_class),
            aug_sigma,
            batch_rng,
            aug_rng: Rng::derive(cfg.seed, Stream::Augmentation, 0),
        })
    }

    /// Two jittered views per drawn sample, interleaved.
    fn next_batch(&mut self) -> (Matrix, Vec<Label>, Vec<usize>) {
        let mut picked = Vec::with_capacity(self.pools.len() * 2 * self.per_class);
        for pools in &mut self.pools {
            for pool in pools.iter_mut() {
                pool.take(self.per_class, &mut self.batch_rng, &mut picked);
            }
        }
        let d = self.train.dim();
        let mut data = Vec::with_capacity(2 * picked.len() * d);
        let mut labels = Vec::with_capacity(2 * picked.len());
        let mut domains = Vec::with_capacity(2 * picked.len());
        for &i in &picked {
            let s = &self.train.samples()[i];
            for _ in 0..2 {
                data.extend(s.x.iter().map(|&v| v + self.aug_sigma * self.aug_rng.normal()));
                labels.push(s.label);
                domains.push(s.domain);
            }
        }
        let x = Matrix::from_vec(2 * picked.len(), d, data).expect("finite features");
        (x, labels, domains)
    }

    fn loss(&self, batch: &AugmentedBatch, heads: &HyperplaneSet) -> Result<LossOutput> {
        let cfg = self.cfg;
        match cfg.method {
            Method::Erm => erm_loss(batch.domain_batches(), &heads.betas[0]),
            Method::IrmV1 => irm_v1_loss(batch.domain_batches(), &heads.betas[0], cfg.lambda_irm),
            Method::ErmSupcon => {
                let mut out = erm_loss(batch.domain_batches(), &heads.betas[0])?;
                if cfg.lambda != 0.0 {
                    let con = supcon_loss(batch, cfg.tau)?;
                    out.value += cfg.lambda * con.value;
                    out.terms.sep = con.value;
                    out.dl_dz.add_scaled(&con.dl_dz, cfg.lambda)?;
                }
                Ok(out)
            }
            Method::PgIrm => sa_fas_loss(batch, &heads.betas, 0.0, cfg.tau),
            Method::SaFas => sa_fas_loss(batch, &heads.betas, cfg.lambda, cfg.tau),
        }
    }

    fn step(
        &mut self,
        enc: &mut MlpEncoder,
        heads: &mut HyperplaneSet,
        epoch: usize,
        lr: f64,
        totals: &mut StepTotals,
    ) -> Result<()> {
        let (x, labels, domains) = self.next_batch();
        let (z, cache) = enc.forward(&x)?;
        let batch = AugmentedBatch::new(z, labels, domains, self.pools.len())?;
        let out = self.loss(&batch, heads)?;
        if !out.value.is_finite() {
            return Err(Error::NonFinite(format!("loss value {}", out.value)));
        }
        let grads = enc.backward(&cache, &out.dl_dz)?;
        *heads = pg_irm_update(heads, &out.dl_dbeta, lr, self.cfg.weight_decay, epoch)?;
        enc.sgd_step(&grads, lr, self.cfg.weight_decay)?;
        totals.all += out.value;
        totals.risk += out.terms.risk;
        totals.sep += out.terms.sep;
        totals.penalty += out.terms.penalty;
        Ok(())
    }
}

pub fn train(split: &LeaveOneOutSplit, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(split, cfg, |_| {})
}

/// [`train`] with a callback after each completed epoch.
pub fn train_with<F>(split: &LeaveOneOutSplit, cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainOutput>
where
    F: FnMut(&EpochState<'_>),
{
    cfg.validate()?;
    let mut lp = Loop::new(split, cfg)?;
    let input_dim = split.train.dim();
    let mut enc = MlpEncoder::new(&cfg.encoder_dims(input_dim), cfg.seed)?;
    let head_dim = cfg.embed_dim + usize::from(cfg.bias);
    let num_heads = if cfg.method.per_domain_heads() {
        split.train.num_domains()
    } else {
        1
    };
    let mut heads = HyperplaneSet::random(num_heads, head_dim, cfg.beta_init_std, cfg.alpha, cfg.t_a, cfg.seed)?;
    let mut record = RunRecord::new(cfg.method, cfg.seed, Some(split.held_out));

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut totals = StepTotals::default();
        let mut outcome = Ok(());
        for _ in 0..lp.steps_per_epoch {
            outcome = lp.step(&mut enc, &mut heads, epoch, lr, &mut totals);
            if outcome.is_err() {
                break;
            }
        }
        let metrics = outcome.and_then(|_| evaluate(&enc, &heads, &split.test));
        let metrics = match metrics {
            Ok(m) => m,
            Err(err) => return Err(diverged(record, epoch, err, cfg.last_k)),
        };
        let n = lp.steps_per_epoch as f64;
        let entry = EpochEntry {
            epoch,
            lr,
            loss_all: totals.all / n,
            loss_align: totals.risk / n,
            loss_sep: totals.sep / n,
            loss_penalty: totals.penalty / n,
            s_cos: metrics.s_cos,
            auc: metrics.auc,
            hter: metrics.hter,
            tpr_at_fpr05: metrics.tpr_at_fpr05,
            s_sep: metrics.s_sep,
            s_align: metrics.s_align,
        };
        on_epoch(&EpochState {
            entry: &entry,
            encoder: &enc,
            hyperplanes: &heads,
        });
        record.entries.push(entry);
    }
    record.summary = Some(summarize_last_k(&record, cfg.last_k)?);
    Ok(TrainOutput {
        encoder: enc,
        hyperplanes: heads,
        record,
    })
}

fn diverged(mut record: RunRecord, epoch: usize, err: Error, k: usize) -> Error {
    let reason = err.to_string();
    record.failure = Some(format!("epoch {epoch}: {reason}"));
    record.summary = summarize_last_k(&record, k).ok();
    Error::Diverged {
        epoch,
        reason,
        record: Box::new(record),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Alpha,
    Gamma,
    Ta,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Alpha => "alpha",
            Axis::Gamma => "gamma",
            Axis::Ta => "ta",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            Axis::Alpha => cfg.alpha = value,
            Axis::Gamma => cfg.lr = value,
            Axis::Ta => {
                if value < 0.0 || value.fract() != 0.0 || !value.is_finite() {
                    return Err(Error::invalid(format!("t_a must be a non-negative integer, got {value}")));
                }
                cfg.t_a = value as usize;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alpha" => Ok(Axis::Alpha),
            "gamma" | "lr" => Ok(Axis::Gamma),
            "ta" | "t_a" => Ok(Axis::Ta),
            _ => Err(Error::invalid(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub runs: usize,
    /// Mean over runs of the last-k mean; std is the mean over runs of the
    /// last-k std.
    pub auc: MeanStd,
    pub hter: MeanStd,
    pub tpr_at_fpr05: MeanStd,
    pub final_s_cos: Option<f64>,
}

fn aggregate(value: f64, summaries: &[Summary]) -> SweepRow {
    let n = summaries.len() as f64;
    let avg = |f: fn(&Summary) -> MeanStd| {
        let (m, s) = summaries
            .iter()
            .map(f)
            .fold((0.0, 0.0), |(m, s), x| (m + x.mean, s + x.std));
        MeanStd { mean: m / n, std: s / n }
    };
    let cos: Option<Vec<f64>> = summaries.iter().map(|s| s.final_s_cos).collect();
    SweepRow {
        value,
        runs: summaries.len(),
        auc: avg(|s| s.auc),
        hter: avg(|s| s.hter),
        tpr_at_fpr05: avg(|s| s.tpr_at_fpr05),
        final_s_cos: cos.map(|c| c.iter().sum::<f64>() / n),
    }
}

/// Trains every (value, split, seed) combination independently and returns
/// one row per value, sorted by value.
pub fn sweep(
    splits: &[LeaveOneOutSplit],
    base: &TrainConfig,
    axis: Axis,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || splits.is_empty() || seeds.is_empty() {
        return Err(Error::Empty("sweep values, splits or seeds".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let configs: Vec<TrainConfig> = sorted.iter().map(|&v| axis.apply(base, v)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize, u64)> = (0..configs.len())
        .flat_map(|c| (0..splits.len()).flat_map(move |s| seeds.iter().map(move |&seed| (c, s, seed))))
        .collect();
    let summaries: Vec<(usize, Summary)> = jobs
        .par_iter()
        .map(|&(c, s, seed)| {
            let cfg = TrainConfig { seed, ..configs[c].clone() };
            let out = train(&splits[s], &cfg)?;
            Ok((c, out.record.summary.expect("completed run has a summary")))
        })
        .collect::<Result<_>>()?;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(c, &v)| {
            let group: Vec<Summary> = summaries.iter().filter(|(k, _)| *k == c).map(|(_, s)| s.clone()).collect();
            aggregate(v, &group)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub snapshots: usize,
    pub s_align_vs_auc: f64,
    pub s_sep_vs_auc: f64,
}

/// Spearman correlations between the diagnostic scores and held-out AUC over
/// every epoch snapshot of every run.
pub fn correlation_study(records: &[RunRecord]) -> Result<Correlation> {
    let entries: Vec<&EpochEntry> = records.iter().flat_map(|r| &r.entries).collect();
    if entries.len() < 10 {
        return Err(Error::invalid(format!(
            "correlation study needs at least 10 snapshots, got {}",
            entries.len()
        )));
    }
    let aucs: Vec<f64> = entries.iter().map(|e| e.auc).collect();
    let align: Vec<f64> = entries.iter().map(|e| e.s_align).collect();
    let sep: Vec<f64> = entries.iter().map(|e| e.s_sep).collect();
    Ok(Correlation {
        snapshots: entries.len(),
        s_align_vs_auc: spearman(&align, &aucs)?,
        s_sep_vs_auc: spearman(&sep, &aucs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{generate_world, leave_one_out, WorldSpec};

    fn small_split(domains: usize, seed: u64) -> LeaveOneOutSplit {
        let spec = WorldSpec::with_random_offsets(4, domains, 40, 2.0, 0.5, 0.5, seed);
        leave_one_out(&generate_world(&spec).unwrap(), domains - 1).unwrap()
    }

    fn quick(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            epochs: 4,
            t_a: 1,
            lr: 0.05,
            lr_decay_epochs: vec![2],
            hidden_dims: vec![8],
            embed_dim: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { alpha: 1.5, ..TrainConfig::default() },
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { tau: 0.0, ..TrainConfig::default() },
            TrainConfig { t_a: 100, ..TrainConfig::default() },
            TrainConfig { lambda: -1.0, ..TrainConfig::default() },
            TrainConfig { batch_per_domain: Some(1), ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn lr_schedule_halves_after_decay_epochs() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(1), 5e-3);
        assert_eq!(cfg.lr_at(40), 5e-3);
        assert_eq!(cfg.lr_at(41), 2.5e-3);
        assert_eq!(cfg.lr_at(81), 1.25e-3);
    }

    #[test]
    fn default_batch_sizes() {
        assert_eq!(default_batch_per_domain(500), 96);
        assert_eq!(default_batch_per_domain(100), 24);
        assert_eq!(default_batch_per_domain(20), 16);
        assert_eq!(default_batch_per_domain(4), 8);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("SGD".parse::<Method>().is_err());
    }

    #[test]
    fn train_produces_one_entry_per_epoch() {
        let split = small_split(3, 1);
        let out = train(&split, &quick(Method::SaFas)).unwrap();
        assert_eq!(out.record.entries.len(), 4);
        assert_eq!(out.hyperplanes.num_domains(), 2);
        for e in &out.record.entries {
            let c = e.s_cos.unwrap();
            assert!((-1.0..=1.0).contains(&c));
            assert!(e.loss_sep > 0.0);
        }
        let s = out.record.summary.unwrap();
        assert_eq!(s.k, 4);
    }

    #[test]
    fn same_seed_is_deterministic() {
        let split = small_split(3, 2);
        let cfg = quick(Method::SaFas);
        let a = train(&split, &cfg).unwrap().record;
        let b = train(&split, &cfg).unwrap().record;
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
    }

    #[test]
    fn alignment_methods_need_two_domains() {
        let split = small_split(2, 3);
        assert!(train(&split, &quick(Method::PgIrm)).is_err());
        assert!(train(&split, &quick(Method::Erm)).is_ok());
    }

    #[test]
    fn summary_examples() {
        let mut rec = RunRecord::new(Method::Erm, 0, None);
        for (i, a) in [0.5, 0.7, 0.9, 0.9].iter().enumerate() {
            rec.entries.push(EpochEntry {
                epoch: i + 1,
                lr: 0.1,
                loss_all: 0.0,
                loss_align: 0.0,
                loss_sep: 0.0,
                loss_penalty: 0.0,
                s_cos: None,
                auc: *a,
                hter: 0.1,
                tpr_at_fpr05: 0.3,
                s_sep: 1.0,
                s_align: 0.2,
            });
        }
        let last = summarize_last_k(&rec, 1).unwrap();
        assert_eq!(last.auc.mean, 0.9);
        assert_eq!(last.hter.std, 0.0);
        let two = summarize_last_k(&rec, 2).unwrap();
        assert_eq!(two.auc, MeanStd { mean: 0.9, std: 0.0 });
        let all = summarize_last_k(&rec, 50).unwrap();
        assert_eq!(all.k, 4);
        assert!((all.auc.mean - 0.75).abs() < 1e-15);
        assert!(all.s_cos.is_none());
        assert!(summarize_last_k(&RunRecord::new(Method::Erm, 0, None), 10).is_err());
    }

    #[test]
    fn record_jsonl_round_trips() {
        let split = small_split(3, 4);
        let rec = train(&split, &quick(Method::IrmV1)).unwrap().record;
        let text = rec.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), rec.entries.len() + 1);
        assert_eq!(RunRecord::from_jsonl(&text).unwrap(), rec);
    }

    #[test]
    fn truncated_record_is_rejected() {
        let split = small_split(3, 5);
        let text = train(&split, &quick(Method::Erm)).unwrap().record.to_jsonl().unwrap();
        let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(RunRecord::from_jsonl(&truncated).is_err());
    }

    #[test]
    fn axis_apply() {
        let base = TrainConfig::default();
        assert_eq!(Axis::Alpha.apply(&base, 0.9).unwrap().alpha, 0.9);
        assert_eq!(Axis::Gamma.apply(&base, 0.1).unwrap().lr, 0.1);
        assert_eq!(Axis::Ta.apply(&base, 5.0).unwrap().t_a, 5);
        assert!(Axis::Ta.apply(&base, 2.5).is_err());
        assert!(Axis::Alpha.apply(&base, 2.0).is_err());
        assert_eq!("T_A".parse::<Axis>().unwrap(), Axis::Ta);
    }

    #[test]
    fn correlation_needs_ten_snapshots() {
        let split = small_split(3, 6);
        let rec = train(&split, &quick(Method::Erm)).unwrap().record;
        assert!(correlation_study(&[rec]).is_err());
    }
}

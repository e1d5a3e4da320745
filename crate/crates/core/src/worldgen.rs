//! Synthetic multi-domain live/spoof worlds.
//!
//! A world is a mixture of isotropic Gaussians. Every domain shares one
//! live→spoof transition direction; domains differ by an offset. Optionally one
//! coordinate carries a label-correlated signal whose sign is reversed in a
//! single domain, which makes it a trap for classifiers that pool domains.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::numkit::{dot, norm, Matrix, Rng, Stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Live,
    Spoof,
}

impl Label {
    pub const BOTH: [Label; 2] = [Label::Live, Label::Spoof];

    /// `0.0` for live, `1.0` for spoof (spoof is the positive class).
    #[inline]
    pub fn target(self) -> f64 {
        match self {
            Label::Live => 0.0,
            Label::Spoof => 1.0,
        }
    }

    #[inline]
    pub fn code(self) -> u8 {
        match self {
            Label::Live => 0,
            Label::Spoof => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Live),
            1 => Some(Label::Spoof),
            _ => None,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Live => Label::Spoof,
            Label::Spoof => Label::Live,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub input_dim: usize,
    pub num_domains: usize,
    pub n_per_domain_per_class: usize,
    /// Unit vector shared by all domains.
    pub transition_dir: Vec<f64>,
    pub domain_offsets: Vec<Vec<f64>>,
    /// Distance between class means along `transition_dir`.
    pub class_gap: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub spurious_dim: Option<usize>,
    #[serde(default)]
    pub spurious_strength: f64,
    #[serde(default)]
    pub spurious_flip_domain: Option<usize>,
    pub seed: u64,
}

impl WorldSpec {
    /// A world with `transition_dir = e₀` and Gaussian domain offsets of
    /// scale `offset_scale` that vanish on coordinate 0 and on the spurious
    /// coordinate (if any). Offsets are drawn from the spec's own seed.
    pub fn with_random_offsets(
        input_dim: usize,
        num_domains: usize,
        n_per_domain_per_class: usize,
        class_gap: f64,
        noise_sigma: f64,
        offset_scale: f64,
        seed: u64,
    ) -> WorldSpec {
        let mut transition_dir = vec![0.0; input_dim];
        if input_dim > 0 {
            transition_dir[0] = 1.0;
        }
        let mut spec = WorldSpec {
            input_dim,
            num_domains,
            n_per_domain_per_class,
            transition_dir,
            domain_offsets: Vec::new(),
            class_gap,
            noise_sigma,
            spurious_dim: None,
            spurious_strength: 0.0,
            spurious_flip_domain: None,
            seed,
        };
        spec.redraw_offsets(offset_scale);
        spec
    }

    /// Adds a spurious coordinate (the last one) and redraws offsets so they
    /// leave it untouched.
    pub fn with_spurious(mut self, strength: f64, flip_domain: usize, offset_scale: f64) -> Self {
        self.spurious_dim = Some(self.input_dim - 1);
        self.spurious_strength = strength;
        self.spurious_flip_domain = Some(flip_domain);
        self.redraw_offsets(offset_scale);
        self
    }

    fn redraw_offsets(&mut self, scale: f64) {
        let mut rng = Rng::derive(self.seed, Stream::Data, u64::MAX);
        self.domain_offsets = (0..self.num_domains)
            .map(|_| {
                (0..self.input_dim)
                    .map(|j| {
                        let v = scale * rng.normal();
                        if j == 0 || Some(j) == self.spurious_dim {
                            0.0
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.input_dim;
        if d == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if self.num_domains < 2 {
            return Err(Error::invalid("a world needs at least 2 domains"));
        }
        if self.n_per_domain_per_class == 0 {
            return Err(Error::invalid(
                "every domain must contain both live and spoof samples (n_per_domain_per_class = 0)",
            ));
        }
        if self.transition_dir.len() != d {
            return Err(Error::invalid(format!(
                "transition_dir has length {}, expected {d}",
                self.transition_dir.len()
            )));
        }
        if (norm(&self.transition_dir) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("transition_dir must have unit norm"));
        }
        if self.domain_offsets.len() != self.num_domains {
            return Err(Error::invalid(format!(
                "{} domain offsets for {} domains",
                self.domain_offsets.len(),
                self.num_domains
            )));
        }
        if let Some(e) = self.domain_offsets.iter().position(|o| o.len() != d) {
            return Err(Error::invalid(format!("offset of domain {e} has wrong length")));
        }
        if !(self.class_gap > 0.0) || !self.class_gap.is_finite() {
            return Err(Error::invalid("class_gap must be positive"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        let all_finite = self
            .transition_dir
            .iter()
            .chain(self.domain_offsets.iter().flatten())
            .all(|v| v.is_finite())
            && self.spurious_strength.is_finite();
        if !all_finite {
            return Err(Error::NonFinite("world spec".into()));
        }
        if let Some(s) = self.spurious_dim {
            if s >= d {
                return Err(Error::invalid(format!("spurious_dim {s} >= input_dim {d}")));
            }
            if self.transition_dir[s].abs() > 1e-12 {
                return Err(Error::invalid(
                    "transition_dir must vanish on the spurious coordinate",
                ));
            }
        }
        if let Some(f) = self.spurious_flip_domain {
            if f >= self.num_domains {
                return Err(Error::invalid(format!(
                    "spurious_flip_domain {f} >= num_domains {}",
                    self.num_domains
                )));
            }
        }
        Ok(())
    }

    /// Analytic class mean of `(domain, label)`, before the spurious overwrite.
    pub fn class_mean(&self, domain: usize, label: Label) -> Vec<f64> {
        self.domain_offsets[domain]
            .iter()
            .zip(&self.transition_dir)
            .map(|(o, t)| o + label.target() * self.class_gap * t)
            .collect()
    }

    fn spurious_sign(&self, domain: usize) -> f64 {
        if self.spurious_flip_domain == Some(domain) {
            -1.0
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    pub x: Vec<f64>,
    pub label: Label,
    pub domain: usize,
}

/// Labelled multi-domain data with every domain holding both classes.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    dim: usize,
    num_domains: usize,
    samples: Vec<DomainSample>,
}

impl DomainDataset {
    pub fn new(samples: Vec<DomainSample>, num_domains: usize) -> Result<Self> {
        let dim = samples.first().map_or(0, |s| s.x.len());
        let mut seen = vec![[false; 2]; num_domains];
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != dim {
                return Err(Error::invalid(format!(
                    "sample {i} has dimension {}, expected {dim}",
                    s.x.len()
                )));
            }
            if s.domain >= num_domains {
                return Err(Error::invalid(format!(
                    "sample {i} has domain {} but only {num_domains} domains exist",
                    s.domain
                )));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("features of sample {i}")));
            }
            seen[s.domain][s.label.code() as usize] = true;
        }
        if let Some(e) = seen.iter().position(|c| !(c[0] && c[1])) {
            return Err(Error::invalid(format!(
                "domain {e} must contain both live and spoof samples"
            )));
        }
        Ok(DomainDataset {
            dim,
            num_domains,
            samples,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[DomainSample] {
        &self.samples
    }

    pub fn features(&self) -> Matrix {
        let data = self.samples.iter().flat_map(|s| s.x.iter().copied()).collect();
        Matrix::from_vec(self.samples.len(), self.dim, data).expect("validated at construction")
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn domains(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.domain).collect()
    }

    /// Indices of samples with the given domain and label, in dataset order.
    pub fn indices_of(&self, domain: usize, label: Label) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.domain == domain && s.label == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// Same samples with every label flipped.
    pub fn with_flipped_labels(&self) -> DomainDataset {
        let samples = self
            .samples
            .iter()
            .map(|s| DomainSample {
                label: s.label.flipped(),
                ..s.clone()
            })
            .collect();
        DomainDataset {
            samples,
            ..self.clone()
        }
    }
}

/// Draws a dataset from the world: domain-major, then live before spoof.
pub fn generate_world(spec: &WorldSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let mut rng = Rng::derive(spec.seed, Stream::Data, 0);
    let n = spec.n_per_domain_per_class;
    let mut samples = Vec::with_capacity(spec.num_domains * 2 * n);
    for domain in 0..spec.num_domains {
        for label in Label::BOTH {
            let mean = spec.class_mean(domain, label);
            for _ in 0..n {
                let mut x: Vec<f64> = mean
                    .iter()
                    .map(|m| m + spec.noise_sigma * rng.normal())
                    .collect();
                if let Some(s) = spec.spurious_dim {
                    let sign = spec.spurious_sign(domain) * (2.0 * label.target() - 1.0);
                    x[s] = spec.spurious_strength * sign + spec.noise_sigma * rng.normal();
                }
                samples.push(DomainSample { x, label, domain });
            }
        }
    }
    DomainDataset::new(samples, spec.num_domains)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// AUC of the scorer `x ↦ transition_dir · x` on the world:
/// `Φ(class_gap / (σ√2))`.
pub fn bayes_auc_invariant(spec: &WorldSpec) -> f64 {
    if spec.class_gap == 0.0 {
        return 0.5;
    }
    if spec.noise_sigma == 0.0 {
        return 1.0;
    }
    std_normal_cdf(spec.class_gap / (spec.noise_sigma * std::f64::consts::SQRT_2))
}

/// Scores of the invariant oracle `x ↦ transition_dir · x`.
pub fn invariant_scores(spec: &WorldSpec, data: &DomainDataset) -> Vec<f64> {
    data.samples()
        .iter()
        .map(|s| dot(&spec.transition_dir, &s.x))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeaveOneOutSplit {
    pub train: DomainDataset,
    /// Single-domain dataset; its samples carry domain index 0.
    pub test: DomainDataset,
    pub held_out: usize,
    /// `train_domains[k]` is the original index of training domain `k`.
    pub train_domains: Vec<usize>,
}

pub fn leave_one_out(data: &DomainDataset, held_out: usize) -> Result<LeaveOneOutSplit> {
    let e = data.num_domains();
    if e < 2 {
        return Err(Error::invalid("leave-one-out needs at least 2 domains"));
    }
    if held_out >= e {
        return Err(Error::invalid(format!(
            "held-out domain {held_out} out of range (0..{e})"
        )));
    }
    let train_domains: Vec<usize> = (0..e).filter(|&d| d != held_out).collect();
    let mut dense = vec![usize::MAX; e];
    for (k, &d) in train_domains.iter().enumerate() {
        dense[d] = k;
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in data.samples() {
        if s.domain == held_out {
            test.push(DomainSample {
                domain: 0,
                ..s.clone()
            });
        } else {
            train.push(DomainSample {
                domain: dense[s.domain],
                ..s.clone()
            });
        }
    }
    Ok(LeaveOneOutSplit {
        train: DomainDataset::new(train, e - 1)?,
        test: DomainDataset::new(test, 1)?,
        held_out,
        train_domains,
    })
}

/// Writes `domain,label,x0,...` rows with 17 significant digits.
pub fn write_csv(data: &DomainDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_csv_to(data, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_csv_to<W: Write>(data: &DomainDataset, w: &mut W) -> Result<()> {
    let mut header = String::from("domain,label");
    for j in 0..data.dim() {
        header.push_str(&format!(",x{j}"));
    }
    writeln!(w, "{header}")?;
    let mut line = String::new();
    for s in data.samples() {
        line.clear();
        line.push_str(&format!("{},{}", s.domain, s.label.code()));
        for v in &s.x {
            line.push_str(&format!(",{v:.16e}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<DomainDataset> {
    read_csv_from(File::open(path)?)
}

pub fn read_csv_from<R: std::io::Read>(reader: R) -> Result<DomainDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 3 || &header[0] != "domain" || &header[1] != "label" {
        return Err(Error::Parse {
            line: 1,
            message: "header must be `domain,label,x0,...`".into(),
        });
    }
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("x{j}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("column {} should be named x{j}, found `{name}`", j + 2),
            });
        }
    }
    let dim = header.len() - 2;
    let mut samples = Vec::new();
    let mut max_domain = 0usize;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| Error::Parse { line, message };
        if record.len() != header.len() {
            return Err(parse_err(format!(
                "expected {} columns, found {}",
                header.len(),
                record.len()
            )));
        }
        let domain: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad domain `{}`", &record[0])))?;
        let label = record[1]
            .trim()
            .parse::<u8>()
            .ok()
            .and_then(Label::from_code)
            .ok_or_else(|| parse_err(format!("label must be 0 or 1, found `{}`", &record[1])))?;
        let mut x = Vec::with_capacity(dim);
        for (j, field) in record.iter().skip(2).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad value `{field}` in column x{j}")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite value in column x{j}")));
            }
            x.push(v);
        }
        max_domain = max_domain.max(domain);
        samples.push(DomainSample { x, label, domain });
    }
    if samples.is_empty() {
        return Err(Error::Empty("dataset file has no rows".into()));
    }
    let num_domains = max_domain + 1;
    let mut present = vec![false; num_domains];
    for s in &samples {
        present[s.domain] = true;
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(Error::invalid(format!(
            "domain indices must be dense from 0; domain {missing} is missing"
        )));
    }
    DomainDataset::new(samples, num_domains)
}

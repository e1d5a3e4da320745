//! Per-domain hyperplanes and the projected-gradient alignment update.
//!
//! Each training domain owns a head `β_e`. After an ordinary gradient step
//! produces a candidate `β̃_e`, the candidate is pulled toward the hyperplane
//! of the domain farthest from it:
//!
//! ```text
//! ē      = argmax_{e' ≠ e} ‖β̃_e − β_e'‖
//! α'     = 1 if t ≤ T_a else α
//! β_e   ← α'·β̃_e + (1 − α')·β_ē
//! ```
//!
//! All candidates are computed first and then interpolated against the
//! pre-update snapshot, so the result does not depend on domain order.
//!
//! The α-adjacency test treats each domain's current hyperplane as the only
//! representative of its optimal set.

use serde::{Deserialize, Serialize};

use crate::numkit::{cosine, distance, dot, Matrix, Rng, Stream};
use crate::{Error, Result};

/// Hyperplanes live on a separate index range of the init stream so they
/// never collide with encoder layers.
const BETA_STREAM_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperplaneSet {
    pub betas: Vec<Vec<f64>>,
    pub alpha: f64,
    pub t_a: usize,
    /// 1-based epoch of the most recent update, 0 before training.
    pub epoch: usize,
}

impl HyperplaneSet {
    pub fn new(betas: Vec<Vec<f64>>, alpha: f64, t_a: usize) -> Result<Self> {
        let set = HyperplaneSet {
            betas,
            alpha,
            t_a,
            epoch: 0,
        };
        set.validate()?;
        Ok(set)
    }

    /// One independent Gaussian draw per domain.
    pub fn random(num_domains: usize, dim: usize, std: f64, alpha: f64, t_a: usize, seed: u64) -> Result<Self> {
        let betas = (0..num_domains)
            .map(|e| {
                let mut rng = Rng::derive(seed, Stream::Init, BETA_STREAM_BASE + e as u64);
                (0..dim).map(|_| std * rng.normal()).collect()
            })
            .collect();
        HyperplaneSet::new(betas, alpha, t_a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.betas.is_empty() {
            return Err(Error::Empty("hyperplane set".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        let m = self.betas[0].len();
        if m == 0 {
            return Err(Error::Empty("hyperplane".into()));
        }
        for (e, b) in self.betas.iter().enumerate() {
            if b.len() != m {
                return Err(Error::invalid(format!(
                    "hyperplane {e} has length {}, expected {m}",
                    b.len()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("hyperplane {e}")));
            }
        }
        Ok(())
    }

    pub fn num_domains(&self) -> usize {
        self.betas.len()
    }

    pub fn dim(&self) -> usize {
        self.betas[0].len()
    }

    /// Interpolation weight α' for epoch `t`.
    pub fn alpha_prime(&self, t: usize) -> f64 {
        if t <= self.t_a {
            1.0
        } else {
            self.alpha
        }
    }

    /// Elementwise mean of the hyperplanes.
    pub fn mean_beta(&self) -> Vec<f64> {
        let inv = 1.0 / self.betas.len() as f64;
        let mut mean = vec![0.0; self.dim()];
        for b in &self.betas {
            for (m, v) in mean.iter_mut().zip(b) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }

    /// Largest pairwise distance between hyperplanes.
    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..self.betas.len() {
            for j in i + 1..self.betas.len() {
                d = d.max(distance(&self.betas[i], &self.betas[j]));
            }
        }
        d
    }
}

/// Index and distance of the hyperplane `e' ≠ e` farthest from `candidate`.
/// Ties go to the smallest index.
pub fn farthest(set: &HyperplaneSet, e: usize, candidate: &[f64]) -> Result<(usize, f64)> {
    let n = set.num_domains();
    if n < 2 {
        return Err(Error::invalid("farthest hyperplane needs at least two domains"));
    }
    if e >= n {
        return Err(Error::invalid(format!("domain {e} out of range for {n} hyperplanes")));
    }
    if candidate.len() != set.dim() {
        return Err(Error::invalid(format!(
            "candidate has length {}, hyperplanes have {}",
            candidate.len(),
            set.dim()
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    for (k, b) in set.betas.iter().enumerate() {
        if k == e {
            continue;
        }
        let d = distance(candidate, b);
        if best.map_or(true, |(_, bd)| d > bd) {
            best = Some((k, d));
        }
    }
    Ok(best.expect("at least one other domain"))
}

/// `α'·candidate + (1 − α')·other`.
pub fn project_interpolate(candidate: &[f64], other: &[f64], alpha_prime: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha_prime) {
        return Err(Error::invalid(format!("alpha' must lie in [0, 1], got {alpha_prime}")));
    }
    if candidate.len() != other.len() {
        return Err(Error::invalid("interpolation endpoints differ in length"));
    }
    if alpha_prime == 1.0 {
        return Ok(candidate.to_vec());
    }
    let w = 1.0 - alpha_prime;
    Ok(candidate
        .iter()
        .zip(other)
        .map(|(c, o)| alpha_prime * c + w * o)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyReport {
    /// Domain farthest from the tested point.
    pub farthest: usize,
    /// Distance from the tested point to that domain.
    pub distance: f64,
    /// `α · max_{e'≠e} ‖β_e − β_e'‖`.
    pub radius: f64,
    pub member: bool,
}

impl AdjacencyReport {
    /// `radius − distance`; non-negative exactly when the point is a member.
    pub fn slack(&self) -> f64 {
        self.radius - self.distance
    }
}

/// Tests whether `v` lies in the α-adjacency set of domain `e`:
/// `max_{e'≠e} ‖v − β_e'‖ ≤ α · max_{e'≠e} ‖β_e − β_e'‖`.
pub fn adjacency_membership(set: &HyperplaneSet, e: usize, v: &[f64]) -> Result<AdjacencyReport> {
    let (far, dist) = farthest(set, e, v)?;
    let (_, own) = farthest(set, e, &set.betas[e])?;
    let radius = set.alpha * own;
    Ok(AdjacencyReport {
        farthest: far,
        distance: dist,
        radius,
        member: dist <= radius,
    })
}

/// Plain SGD step with weight decay: `β − γ(∇ + wd·β)`.
pub fn sgd_candidate(beta: &[f64], grad: &[f64], lr: f64, weight_decay: f64) -> Vec<f64> {
    beta.iter()
        .zip(grad)
        .map(|(b, g)| b - lr * (g + weight_decay * b))
        .collect()
}

/// One PG-IRM step at 1-based epoch `t`.
///
/// With a single domain there is nothing to align against and the update is
/// plain SGD.
pub fn pg_irm_update(
    set: &HyperplaneSet,
    grads: &[Vec<f64>],
    lr: f64,
    weight_decay: f64,
    t: usize,
) -> Result<HyperplaneSet> {
    if grads.len() != set.num_domains() {
        return Err(Error::invalid(format!(
            "{} gradients for {} hyperplanes",
            grads.len(),
            set.num_domains()
        )));
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    for (e, g) in grads.iter().enumerate() {
        if g.len() != set.dim() {
            return Err(Error::invalid(format!("gradient {e} has length {}", g.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient for hyperplane {e}")));
        }
    }
    let candidates: Vec<Vec<f64>> = set
        .betas
        .iter()
        .zip(grads)
        .map(|(b, g)| sgd_candidate(b, g, lr, weight_decay))
        .collect();
    let alpha_prime = set.alpha_prime(t);
    let betas = if alpha_prime == 1.0 || set.num_domains() < 2 {
        candidates
    } else {
        candidates
            .iter()
            .enumerate()
            .map(|(e, c)| {
                let (far, _) = farthest(set, e, c)?;
                project_interpolate(c, &set.betas[far], alpha_prime)
            })
            .collect::<Result<_>>()?
    };
    if betas.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("updated hyperplanes".into()));
    }
    Ok(HyperplaneSet {
        betas,
        alpha: set.alpha,
        t_a: set.t_a,
        epoch: t,
    })
}

/// Mean cosine over unordered pairs of distinct hyperplanes; `None` with a
/// single domain.
pub fn s_cos(set: &HyperplaneSet) -> Result<Option<f64>> {
    let n = set.num_domains();
    if n < 2 {
        return Ok(None);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            sum += cosine(&set.betas[i], &set.betas[j])?;
            count += 1;
        }
    }
    Ok(Some(sum / count as f64))
}

/// Scores under the mean hyperplane: `z · mean_e β_e` (plus mean bias when the
/// heads carry one).
pub fn mean_hyperplane_score(set: &HyperplaneSet, z: &Matrix) -> Result<Vec<f64>> {
    let mean = set.mean_beta();
    let m = z.cols();
    if mean.len() != m && mean.len() != m + 1 {
        return Err(Error::invalid(format!(
            "hyperplanes have length {}, embeddings have width {m}",
            mean.len()
        )));
    }
    let bias = if mean.len() > m { mean[m] } else { 0.0 };
    Ok(z.row_iter().map(|r| dot(&mean[..m], r) + bias).collect())
}

//! Differentiable objectives on embeddings and linear heads.
//!
//! A head `β` has length `m` (no bias) or `m + 1` (last entry is the bias),
//! where `m` is the embedding width. Scores are `β[..m]·z (+ β[m])` and spoof is
//! the positive class.

use crate::encoder::rows_are_unit;
use crate::numkit::{dot, matmul, sigmoid, softplus, stable_logsumexp, Matrix};
use crate::worldgen::Label;
use crate::{Error, Result};

/// Value and gradients of a loss. `dl_dz` mirrors the embedding matrix the
/// loss was evaluated on; `dl_dbeta` holds one gradient per head.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub dl_dz: Matrix,
    pub dl_dbeta: Vec<Vec<f64>>,
    pub terms: LossTerms,
}

/// Unweighted components, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    /// Mean per-domain classification risk.
    pub risk: f64,
    /// Mean squared norm of per-domain head gradients (IRM-v1 penalty).
    pub penalty: f64,
    /// Supervised contrastive loss.
    pub sep: f64,
}

fn head_has_bias(m: usize, beta: &[f64]) -> Result<bool> {
    match beta.len() {
        l if l == m => Ok(false),
        l if l == m + 1 => Ok(true),
        l => Err(Error::invalid(format!(
            "hyperplane has length {l}, expected {m} or {}",
            m + 1
        ))),
    }
}

#[inline]
pub(crate) fn head_score(beta: &[f64], z: &[f64]) -> f64 {
    let m = z.len();
    let s = dot(&beta[..m], z);
    if beta.len() > m {
        s + beta[m]
    } else {
        s
    }
}

/// Embeddings with per-row labels and domains. The rows of domain `e` form
/// that domain's batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatches {
    z: Matrix,
    labels: Vec<Label>,
    domains: Vec<usize>,
    groups: Vec<Vec<usize>>,
}

impl DomainBatches {
    /// Every domain in `0..num_domains` must own at least one row.
    pub fn new(z: Matrix, labels: Vec<Label>, domains: Vec<usize>, num_domains: usize) -> Result<Self> {
        if labels.len() != z.rows() || domains.len() != z.rows() {
            return Err(Error::invalid(format!(
                "{} embeddings but {} labels and {} domains",
                z.rows(),
                labels.len(),
                domains.len()
            )));
        }
        let mut groups = vec![Vec::new(); num_domains];
        for (i, &e) in domains.iter().enumerate() {
            let g = groups.get_mut(e).ok_or_else(|| {
                Error::invalid(format!("row {i} has domain {e} but only {num_domains} domains exist"))
            })?;
            g.push(i);
        }
        if let Some(e) = groups.iter().position(Vec::is_empty) {
            return Err(Error::Empty(format!("batch for domain {e}")));
        }
        Ok(DomainBatches {
            z,
            labels,
            domains,
            groups,
        })
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn domains(&self) -> &[usize] {
        &self.domains
    }

    pub fn num_domains(&self) -> usize {
        self.groups.len()
    }

    /// Row indices belonging to domain `e`.
    pub fn rows_of(&self, e: usize) -> &[usize] {
        &self.groups[e]
    }

    fn domain_labels(&self, e: usize) -> Vec<Label> {
        self.groups[e].iter().map(|&i| self.labels[i]).collect()
    }
}

/// Two views per source sample, interleaved: rows `2i` and `2i + 1` are views
/// of sample `i` and share its label and domain. Rows are unit-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    inner: DomainBatches,
}

impl AugmentedBatch {
    pub fn new(z: Matrix, labels: Vec<Label>, domains: Vec<usize>, num_domains: usize) -> Result<Self> {
        if z.rows() % 2 != 0 {
            return Err(Error::invalid("augmented batch must have an even number of rows"));
        }
        let inner = DomainBatches::new(z, labels, domains, num_domains)?;
        for i in 0..inner.z.rows() / 2 {
            let (a, b) = (2 * i, 2 * i + 1);
            if inner.labels[a] != inner.labels[b] || inner.domains[a] != inner.domains[b] {
                return Err(Error::invalid(format!(
                    "rows {a} and {b} are views of one sample but disagree on label or domain"
                )));
            }
        }
        if !rows_are_unit(&inner.z, 1e-9) {
            return Err(Error::invalid("augmented batch embeddings must be unit-norm"));
        }
        Ok(AugmentedBatch { inner })
    }

    pub fn domain_batches(&self) -> &DomainBatches {
        &self.inner
    }

    pub fn z(&self) -> &Matrix {
        &self.inner.z
    }

    pub fn labels(&self) -> &[Label] {
        &self.inner.labels
    }

    pub fn domains(&self) -> &[usize] {
        &self.inner.domains
    }

    pub fn num_domains(&self) -> usize {
        self.inner.num_domains()
    }

    /// Index of the source sample behind row `row`.
    pub fn source_of(row: usize) -> usize {
        row / 2
    }
}

/// Mean binary cross-entropy of `σ(β·z)` against the labels of one domain.
pub fn env_risk(z: &Matrix, labels: &[Label], beta: &[f64]) -> Result<LossOutput> {
    let n = z.rows();
    if n == 0 {
        return Err(Error::Empty("env_risk batch".into()));
    }
    if labels.len() != n {
        return Err(Error::invalid(format!("{n} embeddings but {} labels", labels.len())));
    }
    let m = z.cols();
    let bias = head_has_bias(m, beta)?;
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut dl_dz = Matrix::zeros(n, m);
    let mut dl_dbeta = vec![0.0; beta.len()];
    for i in 0..n {
        let zi = z.row(i);
        let s = head_score(beta, zi);
        let y = labels[i].target();
        value += softplus(s) - y * s;
        let r = (sigmoid(s) - y) * inv_n;
        for (g, &zv) in dl_dbeta.iter_mut().zip(zi) {
            *g += r * zv;
        }
        if bias {
            dl_dbeta[m] += r;
        }
        for (g, &b) in dl_dz.row_mut(i).iter_mut().zip(&beta[..m]) {
            *g = r * b;
        }
    }
    value *= inv_n;
    Ok(LossOutput {
        value,
        dl_dz,
        dl_dbeta: vec![dl_dbeta],
        terms: LossTerms {
            risk: value,
            ..LossTerms::default()
        },
    })
}

/// Supervised contrastive loss summed over anchors. Positives of anchor `i`
/// share both its label and its domain; all other rows are negatives.
///
/// Works on arbitrary (not necessarily unit-norm) rows so it can be probed
/// directly; [`supcon_loss`] is the entry point for training batches.
pub fn supcon_on_rows(
    z: &Matrix,
    labels: &[Label],
    domains: &[usize],
    tau: f64,
) -> Result<(f64, Matrix)> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let n = z.rows();
    if labels.len() != n || domains.len() != n {
        return Err(Error::invalid("labels and domains must have one entry per row"));
    }
    if n < 2 {
        return Err(Error::invalid("contrastive loss needs at least two rows"));
    }
    let inv_tau = 1.0 / tau;
    // coefficient matrix C with ∂L/∂l_it = C_it, where l_it = z_i·z_t/τ
    let mut coef = Matrix::zeros(n, n);
    let mut value = 0.0;
    let mut logits = vec![0.0; n - 1];
    let mut positives = Vec::with_capacity(n);
    for i in 0..n {
        let zi = z.row(i);
        positives.clear();
        let mut k = 0;
        for t in 0..n {
            if t == i {
                continue;
            }
            logits[k] = dot(zi, z.row(t)) * inv_tau;
            k += 1;
            if labels[t] == labels[i] && domains[t] == domains[i] {
                positives.push(t);
            }
        }
        if positives.is_empty() {
            return Err(Error::invalid(format!(
                "anchor {i} has no positive (same label and domain); use stratified batches with two views per sample"
            )));
        }
        let lse = stable_logsumexp(&logits)?;
        let inv_pos = 1.0 / positives.len() as f64;
        let logit_at = |t: usize| if t < i { logits[t] } else { logits[t - 1] };
        let pos_mean: f64 = positives.iter().map(|&j| logit_at(j)).sum::<f64>() * inv_pos;
        value += lse - pos_mean;
        let row = coef.row_mut(i);
        for t in 0..n {
            if t != i {
                row[t] = (logit_at(t) - lse).exp();
            }
        }
        for &j in &positives {
            row[j] -= inv_pos;
        }
    }
    let sym = {
        let mut s = coef.transpose();
        s.add_scaled(&coef, 1.0)?;
        s
    };
    let mut grad = matmul(&sym, z)?;
    grad.scale(inv_tau);
    if !value.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    Ok((value, grad))
}

pub fn supcon_loss(batch: &AugmentedBatch, tau: f64) -> Result<LossOutput> {
    let (value, dl_dz) = supcon_on_rows(batch.z(), batch.labels(), batch.domains(), tau)?;
    Ok(LossOutput {
        value,
        dl_dz,
        dl_dbeta: Vec::new(),
        terms: LossTerms {
            sep: value,
            ..LossTerms::default()
        },
    })
}

/// `(1/|E|) Σ_e [R^e(β) + λ_irm ‖∇_β R^e(β)‖²]` with one shared head.
///
/// The penalty's gradients use the closed-form Hessian of the sigmoid-linear
/// head; when `lambda_irm == 0` the penalty is skipped entirely and the result
/// is pooled ERM.
pub fn irm_v1_loss(batches: &DomainBatches, beta: &[f64], lambda_irm: f64) -> Result<LossOutput> {
    if !(lambda_irm >= 0.0) || !lambda_irm.is_finite() {
        return Err(Error::invalid(format!("lambda_irm must be non-negative, got {lambda_irm}")));
    }
    let z = &batches.z;
    let m = z.cols();
    let bias = head_has_bias(m, beta)?;
    let num_domains = batches.num_domains();
    let inv_e = 1.0 / num_domains as f64;
    let mut dl_dz = Matrix::zeros(z.rows(), m);
    let mut dl_dbeta = vec![0.0; beta.len()];
    let mut risk_sum = 0.0;
    let mut penalty_sum = 0.0;
    for e in 0..num_domains {
        let rows = batches.rows_of(e);
        let n = rows.len();
        let inv_n = 1.0 / n as f64;
        let mut risk = 0.0;
        let mut resid = Vec::with_capacity(n);
        let mut g = vec![0.0; beta.len()];
        for &i in rows {
            let zi = z.row(i);
            let s = head_score(beta, zi);
            let y = batches.labels[i].target();
            risk += softplus(s) - y * s;
            let sig = sigmoid(s);
            let r = sig - y;
            resid.push((r, sig * (1.0 - sig)));
            for (gv, &zv) in g.iter_mut().zip(zi) {
                *gv += r * inv_n * zv;
            }
            if bias {
                g[m] += r * inv_n;
            }
        }
        risk *= inv_n;
        risk_sum += risk;
        for (d, gv) in dl_dbeta.iter_mut().zip(&g) {
            *d += inv_e * gv;
        }
        for (&i, &(r, _)) in rows.iter().zip(&resid) {
            for (d, &b) in dl_dz.row_mut(i).iter_mut().zip(&beta[..m]) {
                *d += inv_e * r * inv_n * b;
            }
        }
        if lambda_irm == 0.0 {
            continue;
        }
        let penalty = dot(&g, &g);
        penalty_sum += penalty;
        let scale = inv_e * lambda_irm * 2.0 * inv_n;
        for (&i, &(r, sp)) in rows.iter().zip(&resid) {
            let zi = z.row(i);
            // z̃ᵢ·g with z̃ = [z, 1] when the head has a bias
            let zg = dot(zi, &g[..m]) + if bias { g[m] } else { 0.0 };
            for (d, &zv) in dl_dbeta.iter_mut().zip(zi) {
                *d += scale * sp * zg * zv;
            }
            if bias {
                dl_dbeta[m] += scale * sp * zg;
            }
            for ((d, &gv), &b) in dl_dz.row_mut(i).iter_mut().zip(&g[..m]).zip(&beta[..m]) {
                *d += scale * (r * gv + sp * zg * b);
            }
        }
    }
    let risk = risk_sum * inv_e;
    let penalty = penalty_sum * inv_e;
    let value = if lambda_irm == 0.0 {
        risk
    } else {
        risk + lambda_irm * penalty
    };
    Ok(LossOutput {
        value,
        dl_dz,
        dl_dbeta: vec![dl_dbeta],
        terms: LossTerms {
            risk,
            penalty,
            sep: 0.0,
        },
    })
}

/// Pooled empirical risk with a single head: the mean of per-domain risks.
pub fn erm_loss(batches: &DomainBatches, beta: &[f64]) -> Result<LossOutput> {
    irm_v1_loss(batches, beta, 0.0)
}

/// `(1/|E|) Σ_e R^e(β_e) + λ·SupCon`, one head per domain.
///
/// The contrastive term is evaluated on the whole augmented batch and is
/// skipped when `lambda == 0`.
pub fn sa_fas_loss(batch: &AugmentedBatch, betas: &[Vec<f64>], lambda: f64, tau: f64) -> Result<LossOutput> {
    let num_domains = batch.num_domains();
    if betas.len() != num_domains {
        return Err(Error::invalid(format!(
            "{} hyperplanes for {num_domains} domain batches",
            betas.len()
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let z = batch.z();
    let inv_e = 1.0 / num_domains as f64;
    let mut dl_dz = Matrix::zeros(z.rows(), z.cols());
    let mut dl_dbeta = Vec::with_capacity(num_domains);
    let mut risk = 0.0;
    let db = batch.domain_batches();
    for (e, beta) in betas.iter().enumerate() {
        let rows = db.rows_of(e);
        let out = env_risk(&z.select_rows(rows), &db.domain_labels(e), beta)?;
        risk += out.value;
        for (k, &i) in rows.iter().enumerate() {
            for (d, g) in dl_dz.row_mut(i).iter_mut().zip(out.dl_dz.row(k)) {
                *d += inv_e * g;
            }
        }
        let mut gb = out.dl_dbeta.into_iter().next().unwrap();
        gb.iter_mut().for_each(|v| *v *= inv_e);
        dl_dbeta.push(gb);
    }
    risk *= inv_e;
    let mut value = risk;
    let mut sep = 0.0;
    if lambda != 0.0 {
        let con = supcon_loss(batch, tau)?;
        sep = con.value;
        value += lambda * sep;
        dl_dz.add_scaled(&con.dl_dz, lambda)?;
    }
    Ok(LossOutput {
        value,
        dl_dz,
        dl_dbeta,
        terms: LossTerms {
            risk,
            penalty: 0.0,
            sep,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_diff_grad, l2_normalize_rows, relative_error, Rng};

    fn random_labels(n: usize, rng: &mut Rng) -> Vec<Label> {
        (0..n)
            .map(|_| if rng.uniform() < 0.5 { Label::Live } else { Label::Spoof })
            .collect()
    }

    #[test]
    fn env_risk_zero_head_is_ln2() {
        let mut rng = Rng::new(1);
        let z = Matrix::random_normal(7, 3, 1.0, &mut rng);
        let y = random_labels(7, &mut rng);
        let out = env_risk(&z, &y, &[0.0; 3]).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn env_risk_saturates_on_scaled_separation() {
        let z = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let out = env_risk(&z, &[Label::Spoof, Label::Live], &[20.0, 0.0]).unwrap();
        assert!(out.value < 1e-8);
    }

    #[test]
    fn env_risk_rejects_empty_and_bad_head() {
        assert!(env_risk(&Matrix::zeros(0, 2), &[], &[0.0, 0.0]).is_err());
        let z = Matrix::zeros(1, 2);
        assert!(env_risk(&z, &[Label::Live], &[0.0; 4]).is_err());
    }

    #[test]
    fn env_risk_gradients_match_finite_differences() {
        let mut rng = Rng::new(2);
        for bias in [false, true] {
            let z = Matrix::random_normal(9, 4, 1.0, &mut rng);
            let y = random_labels(9, &mut rng);
            let k = if bias { 5 } else { 4 };
            let beta = Matrix::random_normal(1, k, 1.0, &mut rng);
            let out = env_risk(&z, &y, beta.as_slice()).unwrap();
            let fb = finite_diff_grad(|b| env_risk(&z, &y, b.as_slice()).unwrap().value, &beta, 1e-6).unwrap();
            assert!(relative_error(&out.dl_dbeta[0], fb.as_slice()) < 1e-5);
            let fz = finite_diff_grad(|zz| env_risk(zz, &y, beta.as_slice()).unwrap().value, &z, 1e-6).unwrap();
            assert!(relative_error(out.dl_dz.as_slice(), fz.as_slice()) < 1e-5);
        }
    }

    #[test]
    fn env_risk_is_convex_in_beta() {
        let mut rng = Rng::new(3);
        let z = Matrix::random_normal(12, 3, 1.0, &mut rng);
        let y = random_labels(12, &mut rng);
        for _ in 0..20 {
            let beta: Vec<f64> = (0..3).map(|_| 2.0 * rng.normal()).collect();
            let v: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let h = 1e-4;
            let at = |t: f64| {
                let b: Vec<f64> = beta.iter().zip(&v).map(|(b, d)| b + t * d).collect();
                env_risk(&z, &y, &b).unwrap().value
            };
            let curvature = (at(h) - 2.0 * at(0.0) + at(-h)) / (h * h);
            assert!(curvature >= -1e-6, "vᵀHv = {curvature}");
        }
    }

    fn unit_batch(n_pairs: usize, m: usize, num_domains: usize, rng: &mut Rng) -> AugmentedBatch {
        let raw = Matrix::random_normal(2 * n_pairs, m, 1.0, rng);
        let z = l2_normalize_rows(&raw).unwrap().into_output();
        let mut labels = Vec::new();
        let mut domains = Vec::new();
        for i in 0..n_pairs {
            let l = if i % 2 == 0 { Label::Live } else { Label::Spoof };
            let e = (i / 2) % num_domains;
            labels.extend([l, l]);
            domains.extend([e, e]);
        }
        AugmentedBatch::new(z, labels, domains, num_domains).unwrap()
    }

    #[test]
    fn supcon_single_pair_is_zero() {
        let z = Matrix::from_rows(&[[0.6, 0.8], [1.0, 0.0]]).unwrap();
        let b = AugmentedBatch::new(z, vec![Label::Live; 2], vec![0, 0], 1).unwrap();
        assert_eq!(supcon_loss(&b, 0.1).unwrap().value, 0.0);
    }

    #[test]
    fn supcon_identical_embeddings_give_4ln3() {
        let z = Matrix::from_rows(&[[1.0, 0.0]; 4]).unwrap();
        let b = AugmentedBatch::new(z, vec![Label::Spoof; 4], vec![0; 4], 1).unwrap();
        let v = supcon_loss(&b, 0.5).unwrap().value;
        assert!((v - 4.0 * 3f64.ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn supcon_matches_term_by_term_enumeration() {
        let mut rng = Rng::new(4);
        let b = unit_batch(3, 4, 2, &mut rng);
        let tau = 1.0;
        let (z, y, e) = (b.z(), b.labels(), b.domains());
        let n = z.rows();
        let mut expected = 0.0;
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&j| j != i && y[j] == y[i] && e[j] == e[i]).collect();
            let denom: f64 = (0..n).filter(|&t| t != i).map(|t| (dot(z.row(i), z.row(t)) / tau).exp()).sum();
            let mut s = 0.0;
            for &j in &pos {
                s += ((dot(z.row(i), z.row(j)) / tau).exp() / denom).ln();
            }
            expected += -s / pos.len() as f64;
        }
        let got = supcon_loss(&b, tau).unwrap().value;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn supcon_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        for &tau in &[0.05, 0.1, 0.5] {
            let b = unit_batch(5, 3, 2, &mut rng);
            let (v, g) = supcon_on_rows(b.z(), b.labels(), b.domains(), tau).unwrap();
            assert!(v.is_finite());
            let f = |zz: &Matrix| supcon_on_rows(zz, b.labels(), b.domains(), tau).unwrap().0;
            let fd = finite_diff_grad(f, b.z(), 1e-6).unwrap();
            assert!(relative_error(g.as_slice(), fd.as_slice()) < 1e-5, "tau {tau}");
        }
    }

    #[test]
    fn supcon_errors() {
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let err = supcon_on_rows(&z, &[Label::Live, Label::Spoof], &[0, 0], 0.1).unwrap_err();
        assert!(err.to_string().contains("stratified"), "{err}");
        assert!(supcon_on_rows(&z, &[Label::Live; 2], &[0, 0], 0.0).is_err());
        assert!(supcon_on_rows(&z, &[Label::Live; 2], &[0, 0], -1.0).is_err());
    }

    #[test]
    fn augmented_batch_checks_pairing() {
        let z = Matrix::from_rows(&[[1.0, 0.0]; 2]).unwrap();
        assert!(AugmentedBatch::new(z.clone(), vec![Label::Live, Label::Spoof], vec![0, 0], 1).is_err());
        assert!(AugmentedBatch::new(z, vec![Label::Live; 2], vec![0, 1], 2).is_err());
        let z = Matrix::from_rows(&[[2.0, 0.0]; 2]).unwrap();
        assert!(AugmentedBatch::new(z, vec![Label::Live; 2], vec![0, 0], 1).is_err());
    }

    fn random_domain_batches(rng: &mut Rng, num_domains: usize, per: usize, m: usize) -> DomainBatches {
        let n = num_domains * per;
        let z = Matrix::random_normal(n, m, 1.0, rng);
        let labels = random_labels(n, rng);
        let domains = (0..n).map(|i| i % num_domains).collect();
        DomainBatches::new(z, labels, domains, num_domains).unwrap()
    }

    #[test]
    fn irm_with_zero_lambda_is_erm() {
        let mut rng = Rng::new(6);
        let b = random_domain_batches(&mut rng, 3, 5, 4);
        let beta: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let irm = irm_v1_loss(&b, &beta, 0.0).unwrap();
        let mean_risk: f64 = (0..3)
            .map(|e| {
                let rows = b.rows_of(e);
                env_risk(&b.z().select_rows(rows), &b.domain_labels(e), &beta).unwrap().value
            })
            .sum::<f64>()
            / 3.0;
        assert!((irm.value - mean_risk).abs() < 1e-15);
        assert_eq!(irm, erm_loss(&b, &beta).unwrap());
    }

    #[test]
    fn irm_penalty_vanishes_at_shared_stationary_point() {
        // symmetric domain: z and −z with opposite labels, β = 0 is stationary
        let z = Matrix::from_rows(&[[1.0, 0.5], [1.0, 0.5], [-0.3, 2.0], [-0.3, 2.0]]).unwrap();
        let labels = vec![Label::Live, Label::Spoof, Label::Live, Label::Spoof];
        let b = DomainBatches::new(z, labels, vec![0, 0, 1, 1], 2).unwrap();
        let out = irm_v1_loss(&b, &[0.0, 0.0], 10.0).unwrap();
        assert_eq!(out.terms.penalty, 0.0);
        assert!((out.value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn irm_gradients_match_finite_differences() {
        let mut rng = Rng::new(7);
        for bias in [false, true] {
            let b = random_domain_batches(&mut rng, 3, 6, 4);
            let k = if bias { 5 } else { 4 };
            let beta = Matrix::random_normal(1, k, 1.0, &mut rng);
            let lam = 2.5;
            let out = irm_v1_loss(&b, beta.as_slice(), lam).unwrap();
            let fb = finite_diff_grad(|bb| irm_v1_loss(&b, bb.as_slice(), lam).unwrap().value, &beta, 1e-6).unwrap();
            assert!(relative_error(&out.dl_dbeta[0], fb.as_slice()) < 1e-5);
            let fz = finite_diff_grad(
                |zz| {
                    let bb = DomainBatches::new(zz.clone(), b.labels().to_vec(), b.domains().to_vec(), 3).unwrap();
                    irm_v1_loss(&bb, beta.as_slice(), lam).unwrap().value
                },
                b.z(),
                1e-6,
            )
            .unwrap();
            assert!(relative_error(out.dl_dz.as_slice(), fz.as_slice()) < 1e-5);
        }
    }

    #[test]
    fn sa_fas_lambda_zero_is_mean_env_risk() {
        let mut rng = Rng::new(8);
        let b = unit_batch(6, 3, 3, &mut rng);
        let betas: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let out = sa_fas_loss(&b, &betas, 0.0, 0.1).unwrap();
        let db = b.domain_batches();
        let expected: f64 = (0..3)
            .map(|e| env_risk(&b.z().select_rows(db.rows_of(e)), &db.domain_labels(e), &betas[e]).unwrap().value)
            .sum::<f64>()
            / 3.0;
        assert!((out.value - expected).abs() < 1e-15);
    }

    #[test]
    fn sa_fas_single_domain_lambda_zero_is_erm() {
        let mut rng = Rng::new(9);
        let b = unit_batch(4, 3, 1, &mut rng);
        let beta: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let sa = sa_fas_loss(&b, &[beta.clone()], 0.0, 0.1).unwrap();
        let erm = erm_loss(b.domain_batches(), &beta).unwrap();
        assert!((sa.value - erm.value).abs() < 1e-15);
        assert!(relative_error(sa.dl_dz.as_slice(), erm.dl_dz.as_slice()) < 1e-14);
        assert!(relative_error(&sa.dl_dbeta[0], &erm.dl_dbeta[0]) < 1e-14);
    }

    #[test]
    fn sa_fas_rejects_domain_count_mismatch() {
        let mut rng = Rng::new(10);
        let b = unit_batch(4, 3, 2, &mut rng);
        assert!(sa_fas_loss(&b, &[vec![0.0; 3]], 0.1, 0.1).is_err());
    }

    #[test]
    fn sa_fas_beta_gradient_is_scaled_domain_risk_gradient() {
        let mut rng = Rng::new(11);
        let b = unit_batch(8, 4, 2, &mut rng);
        let betas: Vec<Vec<f64>> = (0..2).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let out = sa_fas_loss(&b, &betas, 0.7, 0.1).unwrap();
        let db = b.domain_batches();
        for e in 0..2 {
            let r = env_risk(&b.z().select_rows(db.rows_of(e)), &db.domain_labels(e), &betas[e]).unwrap();
            let expected: Vec<f64> = r.dl_dbeta[0].iter().map(|g| g * 0.5).collect();
            assert_eq!(out.dl_dbeta[e], expected);
        }
    }
}

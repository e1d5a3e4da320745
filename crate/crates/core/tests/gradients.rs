use invalign::encoder::MlpEncoder;
use invalign::losses::{env_risk, irm_v1_loss, sa_fas_loss, supcon_on_rows, AugmentedBatch, DomainBatches};
use invalign::numkit::{dot, finite_diff_grad, l2_normalize_rows, relative_error, Matrix, Rng};
use invalign::worldgen::Label;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn labels(n: usize, rng: &mut Rng) -> Vec<Label> {
    (0..n)
        .map(|_| if rng.uniform() < 0.5 { Label::Live } else { Label::Spoof })
        .collect()
}

/// Paired rows with labels and domains that give every anchor a positive.
fn paired(n_pairs: usize, num_domains: usize, rng: &mut Rng) -> (Vec<Label>, Vec<usize>) {
    let mut y = Vec::new();
    let mut e = Vec::new();
    for _ in 0..n_pairs {
        let l = if rng.uniform() < 0.5 { Label::Live } else { Label::Spoof };
        let d = rng.below(num_domains);
        y.extend([l, l]);
        e.extend([d, d]);
    }
    (y, e)
}

#[test]
fn env_risk_at_twenty_points() {
    let mut rng = Rng::new(100);
    for _ in 0..20 {
        let n = 2 + rng.below(10);
        let m = 1 + rng.below(6);
        let z = Matrix::random_normal(n, m, 1.0, &mut rng);
        let y = labels(n, &mut rng);
        let beta = Matrix::random_normal(1, m, 1.5, &mut rng);
        let out = env_risk(&z, &y, beta.as_slice()).unwrap();
        let fb = finite_diff_grad(|b| env_risk(&z, &y, b.as_slice()).unwrap().value, &beta, H).unwrap();
        let fz = finite_diff_grad(|zz| env_risk(zz, &y, beta.as_slice()).unwrap().value, &z, H).unwrap();
        assert!(relative_error(&out.dl_dbeta[0], fb.as_slice()) < TOL);
        assert!(relative_error(out.dl_dz.as_slice(), fz.as_slice()) < TOL);
    }
}

#[test]
fn supcon_at_twenty_points() {
    let mut rng = Rng::new(101);
    for i in 0..20 {
        let tau = [0.05, 0.1, 0.5][i % 3];
        let n_pairs = 2 + rng.below(5);
        let m = 2 + rng.below(5);
        let (y, e) = paired(n_pairs, 2, &mut rng);
        let z = l2_normalize_rows(&Matrix::random_normal(2 * n_pairs, m, 1.0, &mut rng))
            .unwrap()
            .into_output();
        let (_, g) = supcon_on_rows(&z, &y, &e, tau).unwrap();
        let fd = finite_diff_grad(|zz| supcon_on_rows(zz, &y, &e, tau).unwrap().0, &z, H).unwrap();
        assert!(relative_error(g.as_slice(), fd.as_slice()) < TOL, "tau {tau}");
    }
}

#[test]
fn irm_v1_at_twenty_points() {
    let mut rng = Rng::new(102);
    for _ in 0..20 {
        let num_domains = 1 + rng.below(3);
        let per = 2 + rng.below(5);
        let m = 1 + rng.below(5);
        let n = num_domains * per;
        let z = Matrix::random_normal(n, m, 1.0, &mut rng);
        let y = labels(n, &mut rng);
        let d: Vec<usize> = (0..n).map(|i| i % num_domains).collect();
        let lam = 0.1 + 3.0 * rng.uniform();
        let beta = Matrix::random_normal(1, m + 1, 1.0, &mut rng);
        let batches = DomainBatches::new(z.clone(), y.clone(), d.clone(), num_domains).unwrap();
        let out = irm_v1_loss(&batches, beta.as_slice(), lam).unwrap();
        let fb = finite_diff_grad(|b| irm_v1_loss(&batches, b.as_slice(), lam).unwrap().value, &beta, H).unwrap();
        let fz = finite_diff_grad(
            |zz| {
                let b = DomainBatches::new(zz.clone(), y.clone(), d.clone(), num_domains).unwrap();
                irm_v1_loss(&b, beta.as_slice(), lam).unwrap().value
            },
            &z,
            H,
        )
        .unwrap();
        assert!(relative_error(&out.dl_dbeta[0], fb.as_slice()) < TOL);
        assert!(relative_error(out.dl_dz.as_slice(), fz.as_slice()) < TOL);
    }
}

#[test]
fn encoder_chain_at_twenty_points() {
    let mut rng = Rng::new(103);
    for trial in 0..20 {
        let enc = MlpEncoder::new(&[3, 12, 12, 4], 500 + trial).unwrap();
        let x = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let c = Matrix::random_normal(5, 4, 1.0, &mut rng);
        let (_, cache) = enc.forward(&x).unwrap();
        let g = enc.backward(&cache, &c).unwrap();
        let theta = Matrix::from_vec(1, enc.param_count(), enc.flat_params()).unwrap();
        let fd = finite_diff_grad(
            |p| {
                let mut e = enc.clone();
                e.set_flat_params(p.as_slice()).unwrap();
                dot(e.embed(&x).unwrap().as_slice(), c.as_slice())
            },
            &theta,
            H,
        )
        .unwrap();
        assert!(relative_error(&g.flatten(), fd.as_slice()) < TOL);
    }
}

#[test]
fn full_objective_through_encoder() {
    let mut rng = Rng::new(104);
    for trial in 0..5 {
        let enc = MlpEncoder::new(&[3, 10, 4], 900 + trial).unwrap();
        let (y, e) = paired(6, 2, &mut rng);
        let mut e = e;
        // both domains present
        e[0] = 0;
        e[1] = 0;
        e[2] = 1;
        e[3] = 1;
        let x = Matrix::random_normal(12, 3, 1.0, &mut rng);
        let betas: Vec<Vec<f64>> = (0..2).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let loss = |enc: &MlpEncoder| {
            let z = enc.embed(&x).unwrap();
            let b = AugmentedBatch::new(z, y.clone(), e.clone(), 2).unwrap();
            sa_fas_loss(&b, &betas, 0.3, 0.2).unwrap()
        };
        let (z, cache) = enc.forward(&x).unwrap();
        let out = sa_fas_loss(&AugmentedBatch::new(z, y.clone(), e.clone(), 2).unwrap(), &betas, 0.3, 0.2).unwrap();
        let g = enc.backward(&cache, &out.dl_dz).unwrap();
        let theta = Matrix::from_vec(1, enc.param_count(), enc.flat_params()).unwrap();
        let fd = finite_diff_grad(
            |p| {
                let mut en = enc.clone();
                en.set_flat_params(p.as_slice()).unwrap();
                loss(&en).value
            },
            &theta,
            H,
        )
        .unwrap();
        assert!(relative_error(&g.flatten(), fd.as_slice()) < TOL);
    }
}

#[test]
fn combined_objective_matches_sum_of_parts() {
    let mut rng = Rng::new(105);
    let (y, mut e) = paired(9, 3, &mut rng);
    for k in 0..3 {
        e[2 * k] = k;
        e[2 * k + 1] = k;
    }
    let z = l2_normalize_rows(&Matrix::random_normal(18, 5, 1.0, &mut rng)).unwrap().into_output();
    let betas: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
    let (lam, tau) = (0.1, 0.1);
    let batch = AugmentedBatch::new(z.clone(), y.clone(), e.clone(), 3).unwrap();
    let out = sa_fas_loss(&batch, &betas, lam, tau).unwrap();

    let mut value = 0.0;
    let mut dz = Matrix::zeros(18, 5);
    for (k, beta) in betas.iter().enumerate() {
        let rows: Vec<usize> = (0..18).filter(|&i| e[i] == k).collect();
        let yk: Vec<Label> = rows.iter().map(|&i| y[i]).collect();
        let r = env_risk(&z.select_rows(&rows), &yk, beta).unwrap();
        value += r.value / 3.0;
        for (j, &i) in rows.iter().enumerate() {
            for c in 0..5 {
                dz.set(i, c, dz.get(i, c) + r.dl_dz.get(j, c) / 3.0);
            }
        }
        let expected: Vec<f64> = r.dl_dbeta[0].iter().map(|g| g / 3.0).collect();
        assert!(relative_error(&out.dl_dbeta[k], &expected) < 1e-14);
    }
    let (sep, dsep) = supcon_on_rows(&z, &y, &e, tau).unwrap();
    value += lam * sep;
    dz.add_scaled(&dsep, lam).unwrap();
    assert!((out.value - value).abs() < 1e-12);
    assert!(relative_error(out.dl_dz.as_slice(), dz.as_slice()) < 1e-12);
}

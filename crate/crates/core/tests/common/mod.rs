//! Shared test oracles.
//!
//! Everything here takes the dense, direct route: full n x n covariance
//! matrices, explicit determinants, quadrature, and textbook IRLS. The
//! oracles deliberately avoid the per-area Woodbury factorizations and
//! profile tricks used by the library so the two paths stay independent.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use sae_ipw::design::{covariate_design, outcome_design, treatment_vector};
use sae_ipw::frames::{PopulationFrame, SampleView};
use sae_ipw::lmm::VarianceComponents;

/// Build a fully-sampled frame from per-unit columns (p covariates).
pub fn frame(
    labels: Vec<&str>,
    x: Vec<f64>,
    p: usize,
    w: Vec<u8>,
    y: Vec<f64>,
) -> PopulationFrame {
    let n = labels.len();
    PopulationFrame::from_parts(
        labels.into_iter().map(str::to_string).collect(),
        x,
        p,
        w,
        y.into_iter().map(Some).collect(),
        vec![true; n],
    )
    .unwrap()
}

/// Sampled units flattened in area order: mirrors the ordering every dense
/// matrix below uses.
pub fn sample_units(sample: &SampleView) -> Vec<usize> {
    sample.units().collect()
}

/// Dense sample design pieces: X (n x k incl. intercept and w), the
/// treatment incidence W-tilde (n x m), the area incidence Z (n x m), y.
pub struct DenseDesign {
    pub x: DMatrix<f64>,
    pub wt: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
    pub units: Vec<usize>,
}

pub fn dense_design(sample: &SampleView) -> DenseDesign {
    let pop = sample.frame();
    let units = sample_units(sample);
    let n = units.len();
    let m = pop.n_areas();
    let x = outcome_design(pop, &units);
    let mut wt = DMatrix::zeros(n, m);
    let mut z = DMatrix::zeros(n, m);
    for (r, &i) in units.iter().enumerate() {
        let j = pop.area_of(i);
        wt[(r, j)] = pop.treatment(i);
        z[(r, j)] = 1.0;
    }
    let y = DVector::from_iterator(n, units.iter().map(|&i| sample.outcome(i)));
    DenseDesign { x, wt, z, y, units }
}

/// Dense marginal covariance V = s2_g W W' + s2_u Z Z' + s2_e I.
pub fn dense_v(d: &DenseDesign, theta: &VarianceComponents) -> DMatrix<f64> {
    let n = d.y.len();
    &d.wt * d.wt.transpose() * theta.sigma2_gamma
        + &d.z * d.z.transpose() * theta.sigma2_u
        + DMatrix::identity(n, n) * theta.sigma2_eps
}

/// Restricted log likelihood via explicit determinants and solves,
/// up to the same additive constant as the library.
pub fn dense_restricted_loglik(d: &DenseDesign, theta: &VarianceComponents) -> f64 {
    let v = dense_v(d, theta);
    let chol = v.clone().cholesky().expect("V positive definite");
    let logdet_v = 2.0 * chol.l().diagonal().map(|x| x.ln()).sum();
    let vinv_x = chol.solve(&d.x);
    let vinv_y = chol.solve(&d.y);
    let a = d.x.transpose() * &vinv_x;
    let a_chol = a.clone().cholesky().expect("X'V^{-1}X positive definite");
    let logdet_a = 2.0 * a_chol.l().diagonal().map(|x| x.ln()).sum();
    let beta = a_chol.solve(&(d.x.transpose() * &vinv_y));
    let r = &d.y - &d.x * &beta;
    let quad = r.dot(&chol.solve(&r));
    -0.5 * (logdet_v + logdet_a + quad)
}

/// Dense GLS estimate of the fixed effects at a given theta.
pub fn dense_gls_beta(d: &DenseDesign, theta: &VarianceComponents) -> DVector<f64> {
    let v = dense_v(d, theta);
    let chol = v.cholesky().unwrap();
    let a = d.x.transpose() * chol.solve(&d.x);
    a.cholesky()
        .unwrap()
        .solve(&(d.x.transpose() * chol.solve(&d.y)))
}

/// Dense REML projection P = V^{-1} - V^{-1} X (X'V^{-1}X)^{-1} X'V^{-1}.
pub fn dense_p(d: &DenseDesign, theta: &VarianceComponents) -> DMatrix<f64> {
    let v = dense_v(d, theta);
    let v_inv = v.try_inverse().expect("V invertible");
    let a = d.x.transpose() * &v_inv * &d.x;
    let a_inv = a.try_inverse().expect("A invertible");
    &v_inv - &v_inv * &d.x * a_inv * d.x.transpose() * &v_inv
}

/// The three dV/dtheta blocks: (WW', ZZ', I).
pub fn dense_dv(d: &DenseDesign) -> [DMatrix<f64>; 3] {
    let n = d.y.len();
    [
        &d.wt * d.wt.transpose(),
        &d.z * d.z.transpose(),
        DMatrix::identity(n, n),
    ]
}

/// Expected information over the variance components via dense traces.
pub fn dense_fisher(d: &DenseDesign, theta: &VarianceComponents) -> DMatrix<f64> {
    let p = dense_p(d, theta);
    let dv = dense_dv(d);
    let mut info = DMatrix::zeros(3, 3);
    for s in 0..3 {
        for t in 0..3 {
            info[(s, t)] = 0.5 * (&p * &dv[s] * &p * &dv[t]).trace();
        }
    }
    info
}

/// Population-side dense pieces for one area: the full-area design, the
/// area's columns of the random-effect incidence, and the D-weight vector.
pub struct DenseAreaPop {
    pub x: DMatrix<f64>,  // N_j x k
    pub zt: DMatrix<f64>, // N_j x 2m: [W-part | Z-part]
    pub d: DVector<f64>,
}

pub fn dense_area_pop(pop: &PopulationFrame, area: usize, d_weights: &[f64]) -> DenseAreaPop {
    let units = pop.units_in_area(area).to_vec();
    let m = pop.n_areas();
    let x = outcome_design(pop, &units);
    let mut zt = DMatrix::zeros(units.len(), 2 * m);
    for (r, &i) in units.iter().enumerate() {
        zt[(r, area)] = pop.treatment(i);
        zt[(r, m + area)] = 1.0;
    }
    let d = DVector::from_iterator(units.len(), units.iter().map(|&i| d_weights[i]));
    DenseAreaPop { x, zt, d }
}

/// Dense sample-side random-effect incidence Z-tilde = [W | Z] (n x 2m).
pub fn dense_ztilde(d: &DenseDesign) -> DMatrix<f64> {
    let n = d.y.len();
    let m = d.wt.ncols();
    let mut zt = DMatrix::zeros(n, 2 * m);
    zt.view_mut((0, 0), (n, m)).copy_from(&d.wt);
    zt.view_mut((0, m), (n, m)).copy_from(&d.z);
    zt
}

/// Dense Sigma_omega = diag(s2_g I_m, s2_u I_m).
pub fn dense_sigma_omega(m: usize, theta: &VarianceComponents) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(2 * m, 2 * m);
    for i in 0..m {
        s[(i, i)] = theta.sigma2_gamma;
        s[(m + i, m + i)] = theta.sigma2_u;
    }
    s
}

// ---------------------------------------------------------------------------
// Logistic oracles.

/// Plain logistic regression by textbook IRLS on design (1, x).
pub fn logistic_irls(x: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
    let k = x.ncols();
    let mut beta = DVector::zeros(k);
    for _ in 0..100 {
        let eta = x * &beta;
        let p = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let s = p.map(|pi| (pi * (1.0 - pi)).max(1e-12));
        let mut xtsx = DMatrix::zeros(k, k);
        let mut g = DVector::zeros(k);
        for i in 0..x.nrows() {
            let xi = x.row(i).transpose();
            xtsx += &xi * xi.transpose() * s[i];
            g += xi * (w[i] - p[i]);
        }
        let step = xtsx.cholesky().expect("information PD").solve(&g);
        beta += &step;
        if step.amax() < 1e-12 {
            break;
        }
    }
    beta
}

/// Gauss-Hermite nodes and weights (Golub-Welsch via Newton refinement).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Roots of H_n via Newton from asymptotic starts, weights
    // w_i = 2^{n-1} n! sqrt(pi) / (n^2 H_{n-1}(x_i)^2).
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => ((2 * n + 1) as f64).sqrt() - 1.85575 * ((2 * n + 1) as f64).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            // Recurrence for orthonormal Hermite values.
            let mut p1 = std::f64::consts::PI.powf(-0.25);
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2
                    - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    // Ascending order.
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| nodes[a].partial_cmp(&nodes[b]).unwrap());
    let nodes_sorted: Vec<f64> = idx.iter().map(|&i| nodes[i]).collect();
    let weights_sorted: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
    (nodes_sorted, weights_sorted)
}

/// Adaptive Gauss-Hermite marginal log likelihood of the random-intercept
/// logistic model, centered and scaled at the per-area posterior mode.
pub fn aghq_logit_marginal_loglik(
    sample: &SampleView,
    alpha: &DVector<f64>,
    sigma2: f64,
    n_nodes: usize,
) -> f64 {
    let pop = sample.frame();
    let (nodes, weights) = gauss_hermite(n_nodes);
    let mut total = 0.0;
    for j in 0..pop.n_areas() {
        let units = sample.units_in_area(j);
        if units.is_empty() {
            continue;
        }
        let x = covariate_design(pop, units);
        let w = treatment_vector(pop, units);
        let eta0 = &x * alpha;
        // Joint log density of (data_j, nu).
        let g = |nu: f64| -> f64 {
            let mut val = -0.5 * nu * nu / sigma2 - 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln();
            for i in 0..units.len() {
                let eta = eta0[i] + nu;
                val += w[i] * eta - ln1pexp(eta);
            }
            val
        };
        // Mode and curvature by Newton.
        let mut nu = 0.0;
        for _ in 0..100 {
            let mut grad = -nu / sigma2;
            let mut hess = -1.0 / sigma2;
            for i in 0..units.len() {
                let p = 1.0 / (1.0 + (-(eta0[i] + nu)).exp());
                grad += w[i] - p;
                hess -= p * (1.0 - p);
            }
            let step = grad / hess;
            nu -= step;
            if step.abs() < 1e-13 {
                break;
            }
        }
        let mut hess = -1.0 / sigma2;
        for i in 0..units.len() {
            let p = 1.0 / (1.0 + (-(eta0[i] + nu)).exp());
            hess -= p * (1.0 - p);
        }
        let s = (-1.0 / hess).sqrt();
        // log Int exp(g) = log sum_k w_k exp(g(nu + sqrt2 s z_k) + z_k^2) + log(sqrt2 s)
        let mut terms: Vec<f64> = Vec::with_capacity(n_nodes);
        for k in 0..n_nodes {
            let zk = nodes[k];
            terms.push(g(nu + std::f64::consts::SQRT_2 * s * zk) + zk * zk + weights[k].ln());
        }
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
        total += max + sum.ln() + (std::f64::consts::SQRT_2 * s).ln();
    }
    total
}

pub fn ln1pexp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

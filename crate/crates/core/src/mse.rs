//! Analytic MSE estimators for the model-based area-effect predictors,
//! plus the plus-or-minus two root-MSE interval.
//!
//! The EBLUP-side estimator carries the random-effect prediction variance
//! g1, the fixed-effect estimation variance g2, and the variance-estimation
//! correction g3 built from the information matrix of the variance
//! components. The M-quantile side carries a sandwich-based prediction
//! variance, a squared area bias, and the variance contribution of the
//! estimated area quantile order.
//!
//! Both breakdowns add a `design` component: those linearizations measure
//! the error against the census IPW value of the area (the D-weighted sum
//! of all outcomes), while the reported target is the area effect itself.
//! The gap is the D-weighted covariate imbalance carried through the fitted
//! outcome coefficients, plus the residual mass sitting on the sampled
//! units' weights; both are estimable per area and enter the total.
//! Propensities are treated as known throughout; the bootstrap module
//! supplies that extra variability.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3};

use crate::design::{outcome_design, outcome_row};
use crate::error::{Error, Result};
use crate::estimators::IpwWeights;
use crate::frames::PopulationFrame;
use crate::lmm::{self, LmmFit};
use crate::mquantile::{irls_weight_dq, irls_weights, tilted_psi, tilted_psi_prime, MqEnsemble};
use crate::numeric::mad_scale;

/// Machine-readable notes attached to an area's MSE breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MseWarning {
    /// The leading (random-effect) term evaluated negative and was clipped.
    NegativeTermClipped,
    /// The information matrix was singular; a pseudo-inverse was used.
    FisherPseudoInverse,
    /// A residual-scale estimate collapsed and was floored.
    DegenerateScale,
}

impl MseWarning {
    pub fn as_str(&self) -> &'static str {
        match self {
            MseWarning::NegativeTermClipped => "negative-term-clipped",
            MseWarning::FisherPseudoInverse => "fisher-pseudo-inverse",
            MseWarning::DegenerateScale => "degenerate-scale",
        }
    }
}

/// Per-area MSE components. `total` always equals the sum of the parts.
#[derive(Debug, Clone)]
pub enum MseParts {
    Eblup {
        g1: f64,
        g2: f64,
        g3: f64,
        design: f64,
    },
    Mq {
        var: f64,
        bias2: f64,
        qvar: f64,
        design: f64,
    },
}

#[derive(Debug, Clone)]
pub struct AreaMse {
    pub area: usize,
    pub parts: MseParts,
    pub total: f64,
    pub warnings: Vec<MseWarning>,
}

impl AreaMse {
    pub fn rmse(&self) -> f64 {
        self.total.max(0.0).sqrt()
    }
}

/// `[estimate - 2 rmse, estimate + 2 rmse]`.
pub fn confidence_interval(estimate: f64, rmse: f64) -> Result<(f64, f64)> {
    if rmse < 0.0 {
        return Err(Error::Contract("rmse must be nonnegative".into()));
    }
    Ok((estimate - 2.0 * rmse, estimate + 2.0 * rmse))
}

// ---------------------------------------------------------------------------
// EBLUP-side analytic MSE.

/// Analytic MSE of the EBLUP-backed predictor, one entry per area
/// (`None` for inestimable areas).
pub fn mse_eblup_analytic(
    pop: &PopulationFrame,
    fit: &LmmFit,
    weights: &IpwWeights,
) -> Result<Vec<Option<AreaMse>>> {
    let sample = pop.sample_view();
    let support = lmm::mse_support(&sample, fit)?;
    let g_omega = Matrix2::new(fit.theta.sigma2_gamma, 0.0, 0.0, fit.theta.sigma2_u);
    // Directions whose estimation variability enters g3: estimated
    // components only (boundary-pinned components are not estimated).
    let active: Vec<usize> = (0..3).filter(|&t| !fit.boundary[t]).collect();
    let fisher_active = restrict_matrix(&support.fisher, &active);
    let fisher_inv = pseudo_inverse(&fisher_active);

    // Census-deviation variance: the D-weighted covariate imbalance under
    // the fitted coefficients has mean zero over areas (the signed weight
    // parts each sum to one, balancing covariates in expectation), so its
    // variance is estimated by pooling the squared realizations across
    // estimable areas, like any other variance component.
    let imbalance2_pooled = pooled_imbalance2(pop, weights, |c| fit.beta[c + 1]);

    let mut out: Vec<Option<AreaMse>> = Vec::with_capacity(pop.n_areas());
    for j in 0..pop.n_areas() {
        if weights.inestimable[j] {
            out.push(None);
            continue;
        }
        let mut warnings = Vec::new();
        if support.fisher_singular {
            warnings.push(MseWarning::FisherPseudoInverse);
        }
        // Population aggregates for the area: a_j = sum D w, b_j = sum D,
        // and the D-weighted full-design row.
        let mut a_j = 0.0;
        let mut b_j = 0.0;
        let mut dx = DVector::zeros(support.k);
        for &i in pop.units_in_area(j) {
            let di = weights.d[i];
            a_j += di * pop.treatment(i);
            b_j += di;
            let row_full = outcome_row(pop, i, pop.treatment(i));
            for c in 0..support.k {
                dx[c] += di * row_full[c];
            }
        }
        let d_j = Vector2::new(a_j, b_j);

        let (f, utvx, kappa_w, kappa_1, p1tv, p2tv) = match &support.areas[j] {
            Some(s) => (s.f, s.utvx.clone(), s.kappa_w, s.kappa_1, s.p1tv, s.p2tv),
            None => (
                Matrix2::zeros(),
                DMatrix::zeros(2, support.k),
                0.0,
                0.0,
                0.0,
                0.0,
            ),
        };

        // g1 = d' G (I - F G) d.
        let mut g1 = (g_omega * (Matrix2::identity() - f * g_omega) * d_j).dot(&d_j);
        if g1 < 0.0 {
            g1 = 0.0;
            warnings.push(MseWarning::NegativeTermClipped);
        }

        // g2 = c A^{-1} c' with c = D'X_pop - d' G (U'V^{-1}X).
        let gd = g_omega * d_j;
        let mut c_row = dx.clone();
        for cidx in 0..support.k {
            c_row[cidx] -= gd[0] * utvx[(0, cidx)] + gd[1] * utvx[(1, cidx)];
        }
        let g2 = (c_row.transpose() * &support.a_inv * &c_row)[(0, 0)];

        // g3 = 2 (S r)' I^{-1} (S r) over the active directions.
        let sg = fit.theta.sigma2_gamma;
        let su = fit.theta.sigma2_u;
        let sr_full = Vector3::new(
            kappa_w * (a_j - sg * a_j * f[(0, 0)] - su * b_j * f[(0, 1)]),
            kappa_1 * (b_j - sg * a_j * f[(0, 1)] - su * b_j * f[(1, 1)]),
            -(sg * a_j * p1tv + su * b_j * p2tv),
        );
        let sr: Vec<f64> = active.iter().map(|&t| sr_full[t]).collect();
        let sr = DVector::from_vec(sr);
        let g3 = 2.0 * (sr.transpose() * &fisher_inv * &sr)[(0, 0)];

        // Census-deviation term: pooled imbalance variance plus the
        // residual mass on the sampled units' weights.
        let d2_sampled: f64 = pop
            .units_in_area(j)
            .iter()
            .filter(|&&i| pop.is_sampled(i))
            .map(|&i| weights.d[i] * weights.d[i])
            .sum();
        let design = imbalance2_pooled + fit.theta.sigma2_eps * d2_sampled;

        out.push(Some(AreaMse {
            area: j,
            parts: MseParts::Eblup { g1, g2, g3, design },
            total: g1 + g2 + g3 + design,
            warnings,
        }));
    }
    Ok(out)
}

/// Mean squared D-weighted covariate imbalance over the estimable areas,
/// with per-area coefficients supplied by the caller.
fn pooled_imbalance2<F: Fn(usize) -> f64>(
    pop: &PopulationFrame,
    weights: &IpwWeights,
    beta_of_col: F,
) -> f64 {
    let p = pop.n_covariates();
    let mut total = 0.0;
    let mut count = 0usize;
    for j in 0..pop.n_areas() {
        if weights.inestimable[j] {
            continue;
        }
        let mut imbalance = 0.0;
        for c in 0..p {
            let dx_c: f64 = pop
                .units_in_area(j)
                .iter()
                .map(|&i| weights.d[i] * pop.covariates(i)[c])
                .sum();
            imbalance += dx_c * beta_of_col(c);
        }
        total += imbalance * imbalance;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn restrict_matrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let d = idx.len();
    let mut out = DMatrix::zeros(d, d);
    for (a, &ia) in idx.iter().enumerate() {
        for (b, &ib) in idx.iter().enumerate() {
            out[(a, b)] = m[(ia, ib)];
        }
    }
    out
}

fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let tol = 1e-12 * m.amax().max(1e-300);
    m.clone()
        .svd(true, true)
        .pseudo_inverse(tol)
        .unwrap_or_else(|_| DMatrix::zeros(m.nrows(), m.ncols()))
}

// ---------------------------------------------------------------------------
// M-quantile-side analytic MSE.

const SCALE_FLOOR: f64 = 1e-12;

struct MqSampleState {
    units: Vec<usize>,
    design: DMatrix<f64>,  // n x k rows (1, x, w)
    y: Vec<f64>,
    area_of: Vec<usize>,
    /// Residual of each sampled unit under its own area's refit.
    resid_own: Vec<f64>,
    /// Per-area robust scale of those residuals.
    scale: Vec<f64>,
}

fn mq_sample_state(pop: &PopulationFrame, ensemble: &MqEnsemble) -> MqSampleState {
    let sample = pop.sample_view();
    let units: Vec<usize> = sample.units().collect();
    let design = outcome_design(pop, &units);
    let y: Vec<f64> = units.iter().map(|&i| sample.outcome(i)).collect();
    let area_of: Vec<usize> = units.iter().map(|&i| pop.area_of(i)).collect();
    let resid_own: Vec<f64> = units
        .iter()
        .zip(&y)
        .map(|(&i, &yi)| yi - ensemble.area_fits[pop.area_of(i)].predict_unit(pop, i))
        .collect();
    let mut scale = vec![SCALE_FLOOR; pop.n_areas()];
    for j in 0..pop.n_areas() {
        let rs: Vec<f64> = resid_own
            .iter()
            .zip(&area_of)
            .filter(|(_, &a)| a == j)
            .map(|(&r, _)| r)
            .collect();
        if !rs.is_empty() {
            scale[j] = mad_scale(&rs).max(SCALE_FLOOR);
        }
    }
    MqSampleState {
        units,
        design,
        y,
        area_of,
        resid_own,
        scale,
    }
}

/// Sandwich covariance of the M-quantile coefficient vector: tilted-Huber
/// score outer moments around the weighted Gram inverse.
fn mq_sandwich_cov(state: &MqSampleState, ensemble: &MqEnsemble) -> Result<(DMatrix<f64>, bool)> {
    let n = state.units.len();
    let k = state.design.ncols();
    let c = ensemble.psi_tuning;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        let j = state.area_of[i];
        let q = ensemble.area[j].qbar;
        let w = state.scale[j];
        let u = state.resid_own[i] / w;
        num += w * w * tilted_psi(u, q, c).powi(2);
        den += tilted_psi_prime(u, q, c);
    }
    if den == 0.0 {
        return Err(Error::Degenerate(
            "all residuals fall in the rejection region; the sandwich denominator is zero".into(),
        ));
    }
    let gram = state.design.transpose() * &state.design;
    let (gram_inv, degenerate) = match gram.clone().cholesky() {
        Some(ch) => (ch.inverse(), false),
        None => (pseudo_inverse(&gram), true),
    };
    let nf = n as f64;
    let factor = nf / (nf - k as f64) * num * nf / (den * den);
    Ok((gram_inv * factor, degenerate))
}

/// Analytic MSE of the M-quantile-backed predictor, one entry per area.
pub fn mse_mq_analytic(
    pop: &PopulationFrame,
    ensemble: &MqEnsemble,
    weights: &IpwWeights,
) -> Result<Vec<Option<AreaMse>>> {
    let sample = pop.sample_view();
    let state = mq_sample_state(pop, ensemble);
    let n = state.units.len();
    let k = state.design.ncols();
    let (cov, gram_degenerate) = mq_sandwich_cov(&state, ensemble)?;

    // Residual variance of the outcome around the area fits.
    let var_y =
        state.resid_own.iter().map(|r| r * r).sum::<f64>() / ((n as f64 - 1.0).max(1.0));

    // Census-deviation variance pooled across areas, under the median-fit
    // coefficients (the stable common plane).
    let median_coef = ensemble.median_fit().coef.clone();
    let imbalance2_pooled = pooled_imbalance2(pop, weights, |c| median_coef[c + 1]);

    let mut out: Vec<Option<AreaMse>> = Vec::with_capacity(pop.n_areas());
    for j in 0..pop.n_areas() {
        if weights.inestimable[j] {
            out.push(None);
            continue;
        }
        let mut warnings = Vec::new();
        if gram_degenerate {
            warnings.push(MseWarning::FisherPseudoInverse);
        }
        if state.scale[j] <= SCALE_FLOOR {
            warnings.push(MseWarning::DegenerateScale);
        }

        // Non-sampled aggregates: t_j = sum_{r_j} D (1, x, w) and sum D^2.
        let mut t_j = DVector::zeros(k);
        let mut d2 = 0.0;
        for &i in pop.units_in_area(j) {
            if pop.is_sampled(i) {
                continue;
            }
            let di = weights.d[i];
            let row = outcome_row(pop, i, pop.treatment(i));
            for c in 0..k {
                t_j[c] += di * row[c];
            }
            d2 += di * di;
        }

        // Prediction variance.
        let mut var = 0.0;
        for &i in pop.units_in_area(j) {
            if pop.is_sampled(i) {
                continue;
            }
            let row = outcome_row(pop, i, pop.treatment(i));
            var += weights.d[i] * weights.d[i] * (row.transpose() * &cov * &row)[(0, 0)];
        }
        var += var_y * d2;

        // Area bias: hat-matrix weights of the area-j refit applied to the
        // samplewide fitted values, minus the non-sampled D-weighted fit.
        let fit_j = &ensemble.area_fits[j];
        let wdiag = irls_weights(fit_j, &sample);
        let mut h = DMatrix::zeros(k, k);
        for i in 0..n {
            let row = state.design.row(i).transpose();
            h += &row * row.transpose() * wdiag[i];
        }
        let h_inv = pseudo_inverse(&h);
        // b = t' H^+ A' W as a length-n vector of sample weights.
        let lhs = (t_j.transpose() * &h_inv).transpose(); // k-vector
        let mut bias = 0.0;
        for i in 0..n {
            let row = state.design.row(i).transpose();
            let b_i = lhs.dot(&row) * wdiag[i];
            // Fitted value under the unit's own area coefficients.
            let own = state.y[i] - state.resid_own[i];
            bias += b_i * own;
        }
        for &i in pop.units_in_area(j) {
            if pop.is_sampled(i) {
                continue;
            }
            bias -= weights.d[i] * fit_j.predict_unit(pop, i);
        }
        let bias2 = bias * bias;

        // Quantile-order variance: (t_j' G_j)^2 v2_j with G_j assembled
        // from per-area weighted normal equations and their q-derivative.
        let v2 = ensemble.area[j].v2;
        let qvar = if v2 > 0.0 && t_j.amax() > 0.0 {
            let g = q_sensitivity(&state, ensemble, j);
            let s = t_j.dot(&g);
            s * s * v2
        } else {
            0.0
        };

        // Census-deviation term, as on the EBLUP side.
        let d2_sampled: f64 = pop
            .units_in_area(j)
            .iter()
            .filter(|&&i| pop.is_sampled(i))
            .map(|&i| weights.d[i] * weights.d[i])
            .sum();
        let design = imbalance2_pooled + var_y * d2_sampled;

        let total = var + bias2 + qvar + design;
        out.push(Some(AreaMse {
            area: j,
            parts: MseParts::Mq {
                var,
                bias2,
                qvar,
                design,
            },
            total,
            warnings,
        }));
    }
    Ok(out)
}

/// dBeta/dq at the area's average order: averaged per-area contributions
/// H_k^+ (dL_k - dH_k H_k^+ L_k) under the area-j refit.
fn q_sensitivity(state: &MqSampleState, ensemble: &MqEnsemble, j: usize) -> DVector<f64> {
    let k = state.design.ncols();
    let n = state.units.len();
    let fit_j = &ensemble.area_fits[j];
    let q = fit_j.q;
    let c = fit_j.psi_tuning;
    let n_areas = state.scale.len();
    let mut g = DVector::zeros(k);
    for area in 0..n_areas {
        let rows: Vec<usize> = (0..n).filter(|&i| state.area_of[i] == area).collect();
        if rows.is_empty() {
            continue;
        }
        // Residuals of this area's units under the area-j coefficients.
        let resid: Vec<f64> = rows
            .iter()
            .map(|&i| state.y[i] - state.design.row(i).transpose().dot(&fit_j.coef))
            .collect();
        let scale = mad_scale(&resid).max(SCALE_FLOOR);
        let mut h = DMatrix::zeros(k, k);
        let mut l = DVector::zeros(k);
        let mut dh = DMatrix::zeros(k, k);
        let mut dl = DVector::zeros(k);
        for (pos, &i) in rows.iter().enumerate() {
            let u = resid[pos] / scale;
            let wt = if u.abs() < 1e-10 {
                2.0 * if u > 0.0 { q } else { 1.0 - q }
            } else {
                tilted_psi(u, q, c) / u
            };
            let dwt = irls_weight_dq(u, c);
            let row = state.design.row(i).transpose();
            let outer = &row * row.transpose();
            h += &outer * wt;
            dh += &outer * dwt;
            l += &row * (wt * state.y[i]);
            dl += &row * (dwt * state.y[i]);
        }
        let h_inv = pseudo_inverse(&h);
        g += &h_inv * (&dl - &dh * (&h_inv * &l));
    }
    g / n as f64
}

//! M-quantile regression: asymmetric-Huber fits for the continuous outcome
//! on the design `(1, x, w)` and robustified logistic fits for the binary
//! treatment on `(1, x)`, plus unit-level quantile coefficients, their area
//! averages, and area-level prediction by refitting at each area's average
//! quantile.

use nalgebra::{DMatrix, DVector};

use crate::design::{covariate_design_subset, covariate_row_subset, outcome_design, outcome_row};
use crate::error::{Error, Result};
use crate::frames::{PopulationFrame, SampleView};
use crate::numeric::mad_scale;

/// Default Huber tuning constant (95% efficiency under normality).
pub const DEFAULT_HUBER_C: f64 = 1.345;

/// Default quantile grid: 0.02, 0.04, ..., 0.98.
pub fn default_grid() -> Vec<f64> {
    (1..=49).map(|i| 0.02 * i as f64).collect()
}

/// Huber influence `psi(u) = clamp(u, -c, c)`.
pub fn huber_psi(u: f64, c: f64) -> f64 {
    u.clamp(-c, c)
}

/// Asymmetric (tilted) Huber influence
/// `psi_q(u) = 2 psi(u) [q 1(u>0) + (1-q) 1(u<=0)]`.
pub fn tilted_psi(u: f64, q: f64, c: f64) -> f64 {
    let tilt = if u > 0.0 { q } else { 1.0 - q };
    2.0 * huber_psi(u, c) * tilt
}

/// Derivative of the tilted influence where it exists:
/// `2 [q 1(u>0) + (1-q) 1(u<=0)] 1(|u| <= c)`.
pub fn tilted_psi_prime(u: f64, q: f64, c: f64) -> f64 {
    if u.abs() > c {
        0.0
    } else {
        let tilt = if u > 0.0 { q } else { 1.0 - q };
        2.0 * tilt
    }
}

/// One linear M-quantile fit.
#[derive(Debug, Clone)]
pub struct MqFit {
    pub q: f64,
    /// Coefficients for `(1, x, w)`; the last entry is the treatment
    /// coefficient gamma_q (0 when the sample has no treatment variation).
    pub coef: DVector<f64>,
    /// Robust residual scale (median absolute residual / 0.6745).
    pub scale: f64,
    pub psi_tuning: f64,
    pub converged: bool,
    /// Set when the residual MAD collapsed and the scale was floored.
    pub zero_scale: bool,
    pub treatment_identified: bool,
}

impl MqFit {
    /// Fitted value at one population unit under this fit.
    pub fn predict_unit(&self, pop: &PopulationFrame, unit: usize) -> f64 {
        outcome_row(pop, unit, pop.treatment(unit)).dot(&self.coef)
    }
}

const SCALE_FLOOR: f64 = 1e-12;

fn mq_design(sample: &SampleView) -> (DMatrix<f64>, DVector<f64>, Vec<usize>, bool) {
    let pop = sample.frame();
    let units: Vec<usize> = sample.units().collect();
    let mut any_treated = false;
    let mut any_control = false;
    for &i in &units {
        if pop.is_treated(i) {
            any_treated = true;
        } else {
            any_control = true;
        }
    }
    let with_treatment = any_treated && any_control;
    let x_full = outcome_design(pop, &units);
    let x = if with_treatment {
        x_full
    } else {
        let k = x_full.ncols() - 1;
        x_full.columns(0, k).into_owned()
    };
    let y = DVector::from_iterator(units.len(), units.iter().map(|&i| sample.outcome(i)));
    (x, y, units, with_treatment)
}

/// Fit a linear M-quantile at order `q` with Huber constant `c` by
/// iteratively reweighted least squares; the scale refreshes each iteration.
pub fn fit_mq_linear(sample: &SampleView, q: f64, c: f64) -> Result<MqFit> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Contract(format!("quantile order {q} outside (0,1)")));
    }
    if !(c > 0.0) {
        return Err(Error::Contract("Huber constant must be positive".into()));
    }
    let (x, y, _, with_treatment) = mq_design(sample);
    let (coef_red, scale, converged, zero_scale) = irls_mq(&x, &y, q, c)?;
    if !converged {
        return Err(Error::Convergence {
            context: format!("fit_mq_linear at q = {q}"),
            iterations: 200,
            best: coef_red.iter().cloned().collect(),
        });
    }
    let full_k = sample.frame().n_covariates() + 2;
    let coef = if with_treatment {
        coef_red
    } else {
        let mut b = DVector::zeros(full_k);
        for i in 0..coef_red.len() {
            b[i] = coef_red[i];
        }
        b
    };
    Ok(MqFit {
        q,
        coef,
        scale,
        psi_tuning: c,
        converged: true,
        zero_scale,
        treatment_identified: with_treatment,
    })
}

fn irls_mq(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    q: f64,
    c: f64,
) -> Result<(DVector<f64>, f64, bool, bool)> {
    let k = x.ncols();
    // OLS start.
    let xtx = x.transpose() * x;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Rank("M-quantile design is rank deficient".into()))?;
    let mut coef = chol.solve(&(x.transpose() * y));
    let mut scale = 1.0;
    let mut zero_scale = false;
    let mut converged = false;
    for _ in 0..200 {
        let r = y - x * &coef;
        let resid: Vec<f64> = r.iter().cloned().collect();
        scale = mad_scale(&resid);
        if scale < SCALE_FLOOR {
            scale = SCALE_FLOOR;
            zero_scale = true;
        }
        // Weighted least squares with w_i = psi_q(u_i) / u_i, u_i = r_i / scale.
        let mut xtwx = DMatrix::zeros(k, k);
        let mut xtwy = DVector::zeros(k);
        for i in 0..y.len() {
            let u = r[i] / scale;
            let wt = if u.abs() < 1e-10 {
                2.0 * if u > 0.0 { q } else { 1.0 - q }
            } else {
                tilted_psi(u, q, c) / u
            };
            let xi = x.row(i).transpose();
            xtwx += &xi * xi.transpose() * wt;
            xtwy += xi * (wt * y[i]);
        }
        let new = xtwx
            .cholesky()
            .ok_or_else(|| Error::Rank("weighted design is rank deficient".into()))?
            .solve(&xtwy);
        let delta = (&new - &coef).amax();
        coef = new;
        if delta < 1e-10 * (1.0 + coef.amax()) {
            converged = true;
            break;
        }
    }
    Ok((coef, scale, converged, zero_scale))
}

/// IRLS weights of a converged fit on the sampled units (diagonal of W^MQ).
pub fn irls_weights(fit: &MqFit, sample: &SampleView) -> Vec<f64> {
    let pop = sample.frame();
    sample
        .units()
        .map(|i| {
            let r = sample.outcome(i) - fit.predict_unit(pop, i);
            let u = r / fit.scale;
            if u.abs() < 1e-10 {
                2.0 * if u > 0.0 { fit.q } else { 1.0 - fit.q }
            } else {
                tilted_psi(u, fit.q, fit.psi_tuning) / u
            }
        })
        .collect()
}

/// Derivative of the IRLS weight with respect to the quantile order:
/// `2 |psi(u)| / u` (0 at u = 0).
pub fn irls_weight_dq(u: f64, c: f64) -> f64 {
    if u.abs() < 1e-10 {
        0.0
    } else {
        2.0 * huber_psi(u, c).abs() / u
    }
}

/// Pool-adjacent-violators: smallest non-decreasing sequence repair in the
/// least-squares sense.
fn isotonic(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut level: Vec<f64> = Vec::with_capacity(n);
    let mut weight: Vec<f64> = Vec::with_capacity(n);
    let mut count: Vec<usize> = Vec::with_capacity(n);
    for &v in values {
        level.push(v);
        weight.push(1.0);
        count.push(1);
        while level.len() > 1 && level[level.len() - 2] > level[level.len() - 1] {
            let (l2, w2, c2) = (level.pop().unwrap(), weight.pop().unwrap(), count.pop().unwrap());
            let last = level.len() - 1;
            let merged_w = weight[last] + w2;
            level[last] = (level[last] * weight[last] + l2 * w2) / merged_w;
            weight[last] = merged_w;
            count[last] += c2;
        }
    }
    let mut out = Vec::with_capacity(n);
    for (l, c) in level.iter().zip(&count) {
        out.extend(std::iter::repeat_n(*l, *c));
    }
    out
}

/// Invert a non-decreasing fitted-value sequence over the grid at `y`,
/// interpolating linearly and clamping at the grid ends.
fn invert_monotone(grid: &[f64], fitted: &[f64], y: f64) -> f64 {
    let k = grid.len();
    if y <= fitted[0] {
        return grid[0];
    }
    if y >= fitted[k - 1] {
        return grid[k - 1];
    }
    for i in 0..k - 1 {
        if y >= fitted[i] && y <= fitted[i + 1] {
            let span = fitted[i + 1] - fitted[i];
            if span <= 0.0 {
                return 0.5 * (grid[i] + grid[i + 1]);
            }
            return grid[i] + (grid[i + 1] - grid[i]) * (y - fitted[i]) / span;
        }
    }
    grid[k - 1]
}

/// Unit-level quantile coefficients: the order at which the fitted
/// M-quantile surface interpolates each sampled outcome. Returns the
/// coefficients in `sample.units()` order and the number of units whose
/// fitted-value sequence needed an isotonic repair.
pub fn unit_q_coefficients(sample: &SampleView, grid: &[f64], fits: &[MqFit]) -> (Vec<f64>, usize) {
    assert_eq!(grid.len(), fits.len(), "one fit per grid point");
    let pop = sample.frame();
    let mut out = Vec::with_capacity(sample.n());
    let mut repaired = 0usize;
    for i in sample.units() {
        let fitted: Vec<f64> = fits.iter().map(|f| f.predict_unit(pop, i)).collect();
        let monotone = fitted.windows(2).all(|p| p[0] <= p[1]);
        let seq = if monotone {
            fitted
        } else {
            repaired += 1;
            isotonic(&fitted)
        };
        out.push(invert_monotone(grid, &seq, sample.outcome(i)));
    }
    (out, repaired)
}

/// Area summary of unit quantile coefficients.
#[derive(Debug, Clone, Copy)]
pub struct AreaQ {
    pub qbar: f64,
    /// Dispersion `v^2 = n_j^{-1} sum (q_ij - qbar_j)^2`.
    pub v2: f64,
    /// True when the area had no sampled units and the 0.5 convention applies.
    pub synthetic: bool,
}

/// Average quantile coefficient and dispersion for one area's units.
pub fn area_q(q_ij: &[f64]) -> AreaQ {
    if q_ij.is_empty() {
        return AreaQ {
            qbar: 0.5,
            v2: 0.0,
            synthetic: true,
        };
    }
    let n = q_ij.len() as f64;
    let qbar = q_ij.iter().sum::<f64>() / n;
    let v2 = q_ij.iter().map(|v| (v - qbar).powi(2)).sum::<f64>() / n;
    AreaQ {
        qbar,
        v2,
        synthetic: false,
    }
}

/// Grid fits, unit and area quantile coefficients, and per-area refits for
/// the continuous outcome.
#[derive(Debug, Clone)]
pub struct MqEnsemble {
    pub grid: Vec<f64>,
    pub fits: Vec<MqFit>,
    /// Unit coefficients in `sample.units()` order.
    pub q_unit: Vec<f64>,
    /// Sampled unit indices matching `q_unit`.
    pub units: Vec<usize>,
    pub area: Vec<AreaQ>,
    /// Refit at each area's average quantile (the prediction fits).
    pub area_fits: Vec<MqFit>,
    pub crossing_repairs: usize,
    pub psi_tuning: f64,
}

impl MqEnsemble {
    /// The fit whose order is exactly 0.5 (always on the default grid).
    pub fn median_fit(&self) -> &MqFit {
        let idx = self
            .grid
            .iter()
            .position(|&g| (g - 0.5).abs() < 1e-12)
            .expect("grid contains the median");
        &self.fits[idx]
    }
}

/// Fit the full continuous-outcome ensemble.
pub fn fit_mq_ensemble(sample: &SampleView, grid: &[f64], c: f64) -> Result<MqEnsemble> {
    for pair in grid.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Contract("quantile grid must be increasing".into()));
        }
    }
    let fits: Vec<MqFit> = grid
        .iter()
        .map(|&q| fit_mq_linear(sample, q, c))
        .collect::<Result<_>>()?;
    let (q_unit, crossing_repairs) = unit_q_coefficients(sample, grid, &fits);
    let units: Vec<usize> = sample.units().collect();
    let pop = sample.frame();
    let mut area = Vec::with_capacity(pop.n_areas());
    let mut area_fits = Vec::with_capacity(pop.n_areas());
    for j in 0..pop.n_areas() {
        let qs: Vec<f64> = units
            .iter()
            .zip(&q_unit)
            .filter(|(&i, _)| pop.area_of(i) == j)
            .map(|(_, &q)| q)
            .collect();
        let aq = area_q(&qs);
        // Exact refit at the area's average quantile; reuse a grid fit when
        // the average lands on a grid point.
        let fit = match grid.iter().position(|&g| (g - aq.qbar).abs() < 1e-12) {
            Some(idx) => fits[idx].clone(),
            None => fit_mq_linear(sample, aq.qbar, c)?,
        };
        area.push(aq);
        area_fits.push(fit);
    }
    Ok(MqEnsemble {
        grid: grid.to_vec(),
        fits,
        q_unit,
        units,
        area,
        area_fits,
        crossing_repairs,
        psi_tuning: c,
    })
}

/// Predictions for every population unit from each area's refit:
/// `yhat_ij = (1, x_ij, w_ij)' coef(qbar_j)`.
pub fn mq_predict_outcomes(ensemble: &MqEnsemble, pop: &PopulationFrame) -> Vec<f64> {
    let mut yhat = vec![0.0; pop.n_units()];
    for j in 0..pop.n_areas() {
        let fit = &ensemble.area_fits[j];
        for &i in pop.units_in_area(j) {
            yhat[i] = fit.predict_unit(pop, i);
        }
    }
    yhat
}

// ---------------------------------------------------------------------------
// Binary (propensity) M-quantile.

/// One robust binary M-quantile fit on the design `(1, x)`.
#[derive(Debug, Clone)]
pub struct MqBinFit {
    pub q: f64,
    pub alpha: DVector<f64>,
    /// Covariate columns in the design; `None` means all.
    pub cols: Option<Vec<usize>>,
    pub psi_tuning: f64,
    pub converged: bool,
}

impl MqBinFit {
    pub fn predict_unit(&self, pop: &PopulationFrame, unit: usize) -> f64 {
        let eta = covariate_row_subset(pop, unit, self.cols.as_deref()).dot(&self.alpha);
        (1.0 / (1.0 + (-eta).exp())).clamp(1e-12, 1.0 - 1e-12)
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Robust estimating function for the binary fit: Huberized Pearson
/// residuals with the asymmetric tilt and the Fisher-consistency correction.
fn binary_score(
    x: &DMatrix<f64>,
    w: &DVector<f64>,
    alpha: &DVector<f64>,
    q: f64,
    c: f64,
) -> DVector<f64> {
    let k = x.ncols();
    let mut g = DVector::zeros(k);
    for i in 0..w.len() {
        let eta = x.row(i).dot(&alpha.transpose());
        let p = logistic(eta).clamp(1e-9, 1.0 - 1e-9);
        let v = p * (1.0 - p);
        let sv = v.sqrt();
        let r = (w[i] - p) / sv;
        // E[psi_q(R)] under the binary distribution at p.
        let r_one = (1.0 - p) / sv;
        let r_zero = -p / sv;
        let mean_psi = p * tilted_psi(r_one, q, c) + (1.0 - p) * tilted_psi(r_zero, q, c);
        let contrib = (tilted_psi(r, q, c) - mean_psi) * sv;
        for a in 0..k {
            g[a] += contrib * x[(i, a)];
        }
    }
    g
}

/// Fit the binary M-quantile at order `q` by damped Newton on the robust
/// estimating equations (central-difference Jacobian).
pub fn fit_mq_binary(sample: &SampleView, q: f64, c: f64) -> Result<MqBinFit> {
    fit_mq_binary_subset(sample, q, c, None)
}

/// Binary fit with the design restricted to the given covariate columns.
pub fn fit_mq_binary_subset(
    sample: &SampleView,
    q: f64,
    c: f64,
    cols: Option<&[usize]>,
) -> Result<MqBinFit> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Contract(format!("quantile order {q} outside (0,1)")));
    }
    let pop = sample.frame();
    let units: Vec<usize> = sample.units().collect();
    let w = DVector::from_iterator(units.len(), units.iter().map(|&i| pop.treatment(i)));
    let treated = w.iter().filter(|&&v| v == 1.0).count();
    if treated == 0 || treated == units.len() {
        return Err(Error::Separation(
            "treatment status is constant across the sample".into(),
        ));
    }
    let x = covariate_design_subset(pop, &units, cols);
    let k = x.ncols();

    // Plain logistic start.
    let mut alpha = plain_logistic(&x, &w)?;
    let mut g = binary_score(&x, &w, &alpha, q, c);
    let mut gnorm = g.amax();
    let tol = 1e-10 * (units.len() as f64);
    let mut converged = gnorm < tol;
    for _ in 0..200 {
        if converged {
            break;
        }
        // Central-difference Jacobian of the estimating function.
        let mut jac = DMatrix::zeros(k, k);
        for a in 0..k {
            let h = 1e-6 * (1.0 + alpha[a].abs());
            let mut up = alpha.clone();
            up[a] += h;
            let mut dn = alpha.clone();
            dn[a] -= h;
            let gu = binary_score(&x, &w, &up, q, c);
            let gd = binary_score(&x, &w, &dn, q, c);
            for b in 0..k {
                jac[(b, a)] = (gu[b] - gd[b]) / (2.0 * h);
            }
        }
        let step = jac
            .lu()
            .solve(&(-&g))
            .ok_or_else(|| Error::Rank("singular Jacobian in binary M-quantile fit".into()))?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &alpha + &step * t;
            let gc = binary_score(&x, &w, &cand, q, c);
            let gcn = gc.amax();
            if gcn.is_finite() && gcn < gnorm {
                alpha = cand;
                g = gc;
                gnorm = gcn;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        if gnorm < tol {
            converged = true;
        }
    }
    if !converged && gnorm >= 1e-6 * (units.len() as f64) {
        return Err(Error::Convergence {
            context: format!("fit_mq_binary at q = {q}"),
            iterations: 200,
            best: alpha.iter().cloned().collect(),
        });
    }
    for i in 0..units.len() {
        let eta = x.row(i).dot(&alpha.transpose());
        if eta.abs() > 30.0 {
            return Err(Error::Separation(format!(
                "fitted linear predictor {eta:.1} in the binary M-quantile fit"
            )));
        }
    }
    Ok(MqBinFit {
        q,
        alpha,
        cols: cols.map(<[usize]>::to_vec),
        psi_tuning: c,
        converged: true,
    })
}

fn plain_logistic(x: &DMatrix<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    let k = x.ncols();
    let mut alpha = DVector::zeros(k);
    let share = w.sum() / w.len() as f64;
    alpha[0] = (share / (1.0 - share)).ln();
    for _ in 0..100 {
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        for i in 0..w.len() {
            let p = logistic(x.row(i).dot(&alpha.transpose()));
            let s = (p * (1.0 - p)).max(1e-12);
            let xi = x.row(i).transpose();
            grad += &xi * (w[i] - p);
            hess += &xi * xi.transpose() * s;
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::Rank("propensity design is rank deficient".into()))?
            .solve(&grad);
        alpha += &step;
        if step.amax() < 1e-12 {
            break;
        }
    }
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::Separation("plain logistic start diverged".into()));
    }
    Ok(alpha)
}

/// Binary ensemble: grid fits, per-area average quantile (computed from the
/// grid order whose fitted probability is closest to each unit's observed
/// treatment, ties broken toward 0.5), and per-area refits.
#[derive(Debug, Clone)]
pub struct MqBinEnsemble {
    pub grid: Vec<f64>,
    pub fits: Vec<MqBinFit>,
    pub q_unit: Vec<f64>,
    pub units: Vec<usize>,
    pub area: Vec<AreaQ>,
    pub area_fits: Vec<MqBinFit>,
}

pub fn fit_mq_bin_ensemble(sample: &SampleView, grid: &[f64], c: f64) -> Result<MqBinEnsemble> {
    fit_mq_bin_ensemble_subset(sample, grid, c, None)
}

/// Binary ensemble with the design restricted to the given columns.
pub fn fit_mq_bin_ensemble_subset(
    sample: &SampleView,
    grid: &[f64],
    c: f64,
    cols: Option<&[usize]>,
) -> Result<MqBinEnsemble> {
    let pop = sample.frame();
    let fits: Vec<MqBinFit> = grid
        .iter()
        .map(|&q| fit_mq_binary_subset(sample, q, c, cols))
        .collect::<Result<_>>()?;
    let units: Vec<usize> = sample.units().collect();
    let mut q_unit = Vec::with_capacity(units.len());
    for &i in &units {
        let w = pop.treatment(i);
        let mut best_q = grid[0];
        let mut best_gap = f64::INFINITY;
        for (g, fit) in grid.iter().zip(&fits) {
            let gap = (fit.predict_unit(pop, i) - w).abs();
            let better = gap < best_gap - 1e-12
                || ((gap - best_gap).abs() <= 1e-12
                    && (g - 0.5).abs() < (best_q - 0.5).abs());
            if better {
                best_gap = gap;
                best_q = *g;
            }
        }
        q_unit.push(best_q);
    }
    let mut area = Vec::with_capacity(pop.n_areas());
    let mut area_fits = Vec::with_capacity(pop.n_areas());
    for j in 0..pop.n_areas() {
        let qs: Vec<f64> = units
            .iter()
            .zip(&q_unit)
            .filter(|(&i, _)| pop.area_of(i) == j)
            .map(|(_, &q)| q)
            .collect();
        let aq = area_q(&qs);
        let fit = match grid.iter().position(|&g| (g - aq.qbar).abs() < 1e-12) {
            Some(idx) => fits[idx].clone(),
            None => fit_mq_binary_subset(sample, aq.qbar, c, cols)?,
        };
        area.push(aq);
        area_fits.push(fit);
    }
    Ok(MqBinEnsemble {
        grid: grid.to_vec(),
        fits,
        q_unit,
        units,
        area,
        area_fits,
    })
}

/// Propensities for every population unit from the area refits:
/// `e_ij = logistic((1, x_ij)' alpha(qbar_j))`.
pub fn mq_predict_propensity(ensemble: &MqBinEnsemble, pop: &PopulationFrame) -> Vec<f64> {
    let mut e = vec![0.0; pop.n_units()];
    for j in 0..pop.n_areas() {
        let fit = &ensemble.area_fits[j];
        for &i in pop.units_in_area(j) {
            e[i] = fit.predict_unit(pop, i);
        }
    }
    e
}

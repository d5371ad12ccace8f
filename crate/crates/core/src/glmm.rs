//! Random-intercept logistic model for the propensity scores:
//! `logit(e_ij) = (1, x_ij)' alpha + nu_j`, `nu_j ~ N(0, s2_nu)`.
//!
//! Fitting maximizes the Laplace-approximated marginal likelihood: an inner
//! penalized Newton solve for `(alpha, nu)` at fixed `s2_nu`, and an outer
//! one-dimensional search over `log s2_nu` with an explicit zero-variance
//! boundary candidate. Deterministic throughout, so results are
//! reproducible and verifiable against adaptive quadrature.

use nalgebra::{DMatrix, DVector};

use crate::design::{covariate_design_subset, covariate_row_subset};
use crate::error::{Error, Result};
use crate::frames::{PopulationFrame, SampleView};
use crate::numeric::golden_section;

/// Linear predictors beyond this magnitude indicate separation: the working
/// weight at such a unit is numerically zero.
const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct GlmmFit {
    /// Coefficients for the design `(1, x)` (restricted to `cols` when set).
    pub alpha: DVector<f64>,
    /// Covariate columns in the design; `None` means all.
    pub cols: Option<Vec<usize>>,
    /// Posterior modes of the area intercepts (0 for unsampled areas).
    pub nu_hat: Vec<f64>,
    pub sigma2_nu: f64,
    pub converged: bool,
    /// True when the variance estimate sits on the zero boundary.
    pub boundary: bool,
    /// Laplace-approximated marginal log likelihood at the optimum.
    pub laplace_loglik: f64,
    pub area_in_sample: Vec<bool>,
}

fn ln1pexp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct GlmmData {
    x: DMatrix<f64>,           // n x k design (1, x)
    w: DVector<f64>,           // treatment indicators (the response here)
    area_of_row: Vec<usize>,   // dense area index per row
    sampled_areas: Vec<usize>, // dense area indices with sampled units
    area_slot: Vec<Option<usize>>, // area index -> position in sampled_areas
    n_areas: usize,
}

fn build_data(sample: &SampleView, cols: Option<&[usize]>) -> Result<GlmmData> {
    let pop = sample.frame();
    let units: Vec<usize> = sample.units().collect();
    if units.is_empty() {
        return Err(Error::Contract("empty sample".into()));
    }
    let w = DVector::from_iterator(units.len(), units.iter().map(|&i| pop.treatment(i)));
    let n_treated = w.iter().filter(|&&v| v == 1.0).count();
    if n_treated == 0 || n_treated == units.len() {
        return Err(Error::Separation(
            "treatment status is constant across the sample".into(),
        ));
    }
    let x = covariate_design_subset(pop, &units, cols);
    let area_of_row: Vec<usize> = units.iter().map(|&i| pop.area_of(i)).collect();
    let mut area_slot = vec![None; pop.n_areas()];
    let mut sampled_areas = Vec::new();
    for &j in &area_of_row {
        if area_slot[j].is_none() {
            area_slot[j] = Some(sampled_areas.len());
            sampled_areas.push(j);
        }
    }
    Ok(GlmmData {
        x,
        w,
        area_of_row,
        sampled_areas,
        area_slot,
        n_areas: pop.n_areas(),
    })
}

struct InnerFit {
    alpha: DVector<f64>,
    nu: Vec<f64>, // one entry per sampled area slot
    laplace: f64,
}

/// Penalized joint log likelihood of (alpha, nu) at fixed s2.
fn penalized_loglik(data: &GlmmData, eta: &DVector<f64>, nu: &[f64], sigma2: f64) -> f64 {
    let mut val = 0.0;
    for i in 0..data.w.len() {
        val += data.w[i] * eta[i] - ln1pexp(eta[i]);
    }
    if sigma2 > 0.0 {
        val -= nu.iter().map(|v| v * v).sum::<f64>() / (2.0 * sigma2);
    }
    val
}

/// Inner Newton solve for (alpha, nu) at fixed s2, plus the Laplace
/// criterion at the mode. `sigma2 == 0` reduces to plain logistic IRLS.
fn inner_fit(data: &GlmmData, sigma2: f64, max_iter: usize) -> Result<InnerFit> {
    let n = data.w.len();
    let k = data.x.ncols();
    let q = if sigma2 > 0.0 {
        data.sampled_areas.len()
    } else {
        0
    };
    let dim = k + q;
    let mut alpha = DVector::zeros(k);
    // Start the intercept at the logit of the treated share.
    let share = data.w.sum() / n as f64;
    alpha[0] = (share / (1.0 - share)).ln();
    let mut nu = vec![0.0f64; data.sampled_areas.len()];

    let eta_of = |alpha: &DVector<f64>, nu: &[f64]| -> DVector<f64> {
        let mut eta = &data.x * alpha;
        if sigma2 > 0.0 {
            for i in 0..n {
                eta[i] += nu[data.area_slot[data.area_of_row[i]].unwrap()];
            }
        }
        eta
    };

    let mut eta = eta_of(&alpha, &nu);
    let mut obj = penalized_loglik(data, &eta, &nu, sigma2);
    let mut converged = false;
    for _ in 0..max_iter {
        let p = eta.map(logistic);
        // Gradient and Hessian of the penalized log likelihood.
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for i in 0..n {
            let s = (p[i] * (1.0 - p[i])).max(1e-12);
            let resid = data.w[i] - p[i];
            let slot = data.area_slot[data.area_of_row[i]].unwrap();
            for a in 0..k {
                grad[a] += data.x[(i, a)] * resid;
                for b in 0..k {
                    hess[(a, b)] += data.x[(i, a)] * data.x[(i, b)] * s;
                }
                if sigma2 > 0.0 {
                    hess[(a, k + slot)] += data.x[(i, a)] * s;
                    hess[(k + slot, a)] += data.x[(i, a)] * s;
                }
            }
            if sigma2 > 0.0 {
                grad[k + slot] += resid;
                hess[(k + slot, k + slot)] += s;
            }
        }
        if sigma2 > 0.0 {
            for j in 0..q {
                grad[k + j] -= nu[j] / sigma2;
                hess[(k + j, k + j)] += 1.0 / sigma2;
            }
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::Rank("propensity design is rank deficient".into()))?
            .solve(&grad);
        if !step.iter().all(|v: &f64| v.is_finite()) {
            return Err(Error::Separation(
                "propensity fit diverged (non-finite Newton step)".into(),
            ));
        }
        // Step halving on the penalized objective.
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut alpha_c = alpha.clone();
            for a in 0..k {
                alpha_c[a] += t * step[a];
            }
            let mut nu_c = nu.clone();
            for (j, nu_j) in nu_c.iter_mut().enumerate().take(q) {
                *nu_j += t * step[k + j];
            }
            let eta_c = eta_of(&alpha_c, &nu_c);
            let obj_c = penalized_loglik(data, &eta_c, &nu_c, sigma2);
            if obj_c.is_finite() && obj_c >= obj - 1e-12 {
                let delta = (obj_c - obj).abs();
                alpha = alpha_c;
                nu = nu_c;
                eta = eta_c;
                obj = obj_c;
                accepted = true;
                if delta < 1e-12 * (1.0 + obj.abs()) && step.amax() * t < 1e-10 {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            converged = true; // cannot improve further at this scale
            break;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            context: "fit_logit_laplace inner solve".into(),
            iterations: max_iter,
            best: alpha.iter().cloned().collect(),
        });
    }
    for i in 0..n {
        if eta[i].abs() > SEPARATION_ETA {
            let area = data.area_of_row[i];
            return Err(Error::Separation(format!(
                "fitted linear predictor {:.1} at a unit in area index {area}; \
                 the working weight there is zero",
                eta[i]
            )));
        }
    }

    // Laplace criterion: joint log likelihood at the mode plus the
    // curvature correction, written as -1/2 log(1 + s2 * B_j) so the
    // zero-variance limit is exact.
    let p = eta.map(logistic);
    let mut laplace = penalized_loglik(data, &eta, &nu, sigma2);
    if sigma2 > 0.0 {
        let mut b = vec![0.0f64; q];
        for i in 0..n {
            let slot = data.area_slot[data.area_of_row[i]].unwrap();
            b[slot] += p[i] * (1.0 - p[i]);
        }
        for bj in b {
            laplace -= 0.5 * (1.0 + sigma2 * bj).ln();
        }
    }
    Ok(InnerFit { alpha, nu, laplace })
}

/// Fit the random-intercept logistic propensity model on the full
/// covariate design.
pub fn fit_logit_laplace(sample: &SampleView) -> Result<GlmmFit> {
    fit_logit_laplace_subset(sample, None)
}

/// Fit with the propensity design restricted to the given covariate
/// columns (`None` keeps all).
pub fn fit_logit_laplace_subset(
    sample: &SampleView,
    cols: Option<&[usize]>,
) -> Result<GlmmFit> {
    let data = build_data(sample, cols)?;
    let max_inner = 200;

    // Zero-variance boundary candidate.
    let base = inner_fit(&data, 0.0, max_inner)?;

    // Coarse profile over log s2, then golden-section refinement.
    let lo = -14.0f64;
    let hi = 6.0f64;
    let mut best_z = lo;
    let mut best_val = f64::NEG_INFINITY;
    let coarse_steps = 33;
    for s in 0..=coarse_steps {
        let z = lo + (hi - lo) * s as f64 / coarse_steps as f64;
        if let Ok(f) = inner_fit(&data, z.exp(), max_inner) {
            if f.laplace > best_val {
                best_val = f.laplace;
                best_z = z;
            }
        }
    }
    let width = (hi - lo) / coarse_steps as f64;
    let (z_opt, neg) = golden_section(
        |z| match inner_fit(&data, z.exp(), max_inner) {
            Ok(f) => -f.laplace,
            Err(_) => f64::INFINITY,
        },
        best_z - width,
        best_z + width,
        1e-9,
    );
    let refined = -neg;

    let (sigma2, fit, boundary) = if base.laplace >= refined {
        (0.0, base, true)
    } else {
        let f = inner_fit(&data, z_opt.exp(), max_inner)?;
        let b = z_opt.exp() < 1e-10;
        (if b { 0.0 } else { z_opt.exp() }, f, b)
    };

    let mut nu_hat = vec![0.0; data.n_areas];
    let mut area_in_sample = vec![false; data.n_areas];
    for (slot, &j) in data.sampled_areas.iter().enumerate() {
        nu_hat[j] = if sigma2 > 0.0 { fit.nu[slot] } else { 0.0 };
        area_in_sample[j] = true;
    }
    Ok(GlmmFit {
        alpha: fit.alpha,
        cols: cols.map(<[usize]>::to_vec),
        nu_hat,
        sigma2_nu: sigma2,
        converged: true,
        boundary,
        laplace_loglik: fit.laplace,
        area_in_sample,
    })
}

/// Inner fit at an externally fixed variance (used by tests and by the
/// shrinkage diagnostics).
pub fn fit_logit_fixed_variance(sample: &SampleView, sigma2: f64) -> Result<GlmmFit> {
    let data = build_data(sample, None)?;
    let fit = inner_fit(&data, sigma2, 200)?;
    let mut nu_hat = vec![0.0; data.n_areas];
    let mut area_in_sample = vec![false; data.n_areas];
    for (slot, &j) in data.sampled_areas.iter().enumerate() {
        nu_hat[j] = if sigma2 > 0.0 { fit.nu[slot] } else { 0.0 };
        area_in_sample[j] = true;
    }
    Ok(GlmmFit {
        alpha: fit.alpha,
        cols: None,
        nu_hat,
        sigma2_nu: sigma2,
        converged: true,
        boundary: sigma2 == 0.0,
        laplace_loglik: fit.laplace,
        area_in_sample,
    })
}

/// Per-unit estimated propensities over the whole population. Areas unseen
/// in the fit use `nu = 0` (population-average prediction).
pub fn predict_propensity(fit: &GlmmFit, pop: &PopulationFrame) -> Vec<f64> {
    let mut e = vec![0.0; pop.n_units()];
    for i in 0..pop.n_units() {
        let j = pop.area_of(i);
        let nu = if fit.area_in_sample.get(j).copied().unwrap_or(false) {
            fit.nu_hat[j]
        } else {
            0.0
        };
        let eta = covariate_row_subset(pop, i, fit.cols.as_deref()).dot(&fit.alpha) + nu;
        e[i] = logistic(eta).clamp(1e-12, 1.0 - 1e-12);
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::PopulationFrame;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn logit_population(m: usize, n_j: usize, sigma2_nu: f64, seed: u64) -> PopulationFrame {
        let mut rng = crate::rng::substream(seed, &[2]);
        let stdn = Normal::new(0.0, 1.0).unwrap();
        let n = m * n_j;
        let mut labels = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        for j in 0..m {
            let nu = sigma2_nu.sqrt() * stdn.sample(&mut rng);
            for _ in 0..n_j {
                let x2: f64 = rng.random::<f64>();
                let e = logistic(-1.0 + 0.5 * x2 + nu);
                labels.push(format!("a{j}"));
                x.push(x2);
                w.push(u8::from(rng.random::<f64>() < e));
            }
        }
        PopulationFrame::from_parts(labels, x, 1, w, vec![Some(0.0); n], vec![true; n]).unwrap()
    }

    #[test]
    fn zero_variance_data_matches_plain_logistic() {
        let pop = logit_population(10, 60, 0.0, 3);
        let sample = pop.sample_view();
        let fit = fit_logit_laplace(&sample).unwrap();
        assert!(fit.sigma2_nu < 0.05, "sigma2_nu = {}", fit.sigma2_nu);
        let plain = fit_logit_fixed_variance(&sample, 0.0).unwrap();
        if fit.boundary {
            for a in 0..fit.alpha.len() {
                assert!((fit.alpha[a] - plain.alpha[a]).abs() < 1e-4);
            }
        } else {
            // Near-boundary estimate: coefficients still agree closely.
            for a in 0..fit.alpha.len() {
                assert!((fit.alpha[a] - plain.alpha[a]).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn constant_treatment_is_separation() {
        let n = 20;
        let labels: Vec<String> = (0..n).map(|i| format!("a{}", i % 2)).collect();
        let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let pop = PopulationFrame::from_parts(
            labels,
            x,
            1,
            vec![1; n],
            vec![Some(0.0); n],
            vec![true; n],
        )
        .unwrap();
        assert!(matches!(
            fit_logit_laplace(&pop.sample_view()),
            Err(Error::Separation(_))
        ));
    }

    #[test]
    fn laplace_objective_nests_plain_logistic() {
        let pop = logit_population(10, 30, 0.25, 5);
        let sample = pop.sample_view();
        let fit = fit_logit_laplace(&sample).unwrap();
        let plain = fit_logit_fixed_variance(&sample, 0.0).unwrap();
        assert!(fit.laplace_loglik >= plain.laplace_loglik - 1e-9);
    }

    #[test]
    fn propensity_prediction_matches_hand_logistic() {
        let pop = logit_population(2, 4, 0.0, 7);
        let sample = pop.sample_view();
        let mut fit = fit_logit_laplace(&sample).unwrap();
        fit.alpha = DVector::from_vec(vec![-1.0, 0.5]);
        fit.nu_hat = vec![0.0; 2];
        let e = predict_propensity(&fit, &pop);
        for i in 0..pop.n_units() {
            let eta = -1.0 + 0.5 * pop.covariates(i)[0];
            let want = 1.0 / (1.0 + (-eta).exp());
            assert!((e[i] - want).abs() < 1e-12);
            assert!(e[i] > 0.0 && e[i] < 1.0);
        }
        // Symmetry: eta = 0 gives exactly one half.
        fit.alpha = DVector::from_vec(vec![0.0, 0.0]);
        let e = predict_propensity(&fit, &pop);
        assert!(e.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn propensity_is_monotone_in_positive_coefficient() {
        let labels = vec!["a".to_string(); 3];
        let x = vec![0.1, 0.5, 0.9];
        let pop = PopulationFrame::from_parts(
            labels,
            x,
            1,
            vec![0, 1, 0],
            vec![Some(0.0); 3],
            vec![true; 3],
        )
        .unwrap();
        let fit = GlmmFit {
            alpha: DVector::from_vec(vec![-1.0, 2.0]),
            cols: None,
            nu_hat: vec![0.0],
            sigma2_nu: 0.0,
            converged: true,
            boundary: true,
            laplace_loglik: 0.0,
            area_in_sample: vec![true],
        };
        let e = predict_propensity(&fit, &pop);
        assert!(e[0] < e[1] && e[1] < e[2]);
    }

    #[test]
    fn nu_shrinks_with_externally_fixed_variance() {
        let pop = logit_population(8, 40, 0.5, 9);
        let sample = pop.sample_view();
        let mut prev = f64::INFINITY;
        for &s2 in &[1.0, 0.3, 0.1, 0.01] {
            let fit = fit_logit_fixed_variance(&sample, s2).unwrap();
            let ssq: f64 = fit.nu_hat.iter().map(|v| v * v).sum();
            assert!(ssq < prev + 1e-12, "ssq {ssq} at sigma2 {s2}");
            prev = ssq;
        }
    }

    #[test]
    fn prediction_invariant_to_area_relabeling() {
        let pop = logit_population(5, 30, 0.25, 13);
        let sample = pop.sample_view();
        let fit = fit_logit_laplace(&sample).unwrap();
        let e = predict_propensity(&fit, &pop);
        let n = pop.n_units();
        let labels: Vec<String> = (0..n).map(|i| format!("zone-{}", pop.area_of(i))).collect();
        let x: Vec<f64> = (0..n).flat_map(|i| pop.covariates(i).to_vec()).collect();
        let w: Vec<u8> = (0..n).map(|i| pop.is_treated(i) as u8).collect();
        let relabeled =
            PopulationFrame::from_parts(labels, x, 1, w, vec![Some(0.0); n], vec![true; n])
                .unwrap();
        let fit2 = fit_logit_laplace(&relabeled.sample_view()).unwrap();
        let e2 = predict_propensity(&fit2, &relabeled);
        for i in 0..n {
            assert!((e[i] - e2[i]).abs() < 1e-9);
        }
    }
}

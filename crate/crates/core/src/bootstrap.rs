//! Resampling add-ons that capture the variability from estimating the
//! propensity scores, which the analytic MSE estimators hold fixed.
//!
//! Two procedures: a parametric bootstrap around the EBLUP pipeline
//! (normal draws at the estimated variance components, treatment redrawn
//! from the estimated propensity model) and a modified random-effect block
//! bootstrap around the M-quantile pipeline (centered and rescaled
//! empirical residuals resampled with replacement, with a donor-area
//! scheme for unit errors). Each replication compares the estimate built
//! on re-estimated propensities against the one built on the replication's
//! true propensities; the averaged squared gap is the add-on variance.

use rand::Rng;
use rayon::prelude::*;

use crate::design::{covariate_row_subset, outcome_row};
use crate::error::{Error, Result};
use crate::estimators::{
    clip_propensity, d_weights, estimate_ipw_eblup, estimate_ipw_mq, ipw_pate, EstimatorOptions,
    Method,
};
use crate::frames::{draw_sample, PopulationFrame, SampleView};
use crate::glmm::GlmmFit;
use crate::lmm::LmmFit;
use crate::mquantile::{MqBinEnsemble, MqEnsemble};
use crate::rng::{child_seed, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootstrapMethod {
    Parametric,
    Block,
}

#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    /// Replication count (at least 1).
    pub b: usize,
    pub seed: u64,
    pub method: BootstrapMethod,
}

/// One replication-area record for the serialized log.
#[derive(Debug, Clone)]
pub struct RepRecord {
    pub rep: usize,
    pub area: Option<usize>,
    pub tau_star: Option<f64>,
    pub tau_hat_star: Option<f64>,
    pub status: &'static str,
}

/// Per-area add-on variances plus the replication log.
#[derive(Debug, Clone)]
pub struct BootstrapVariance {
    /// `None` where no replication produced a defined error for the area.
    pub var: Vec<Option<f64>>,
    /// Number of replications contributing to each area.
    pub used: Vec<usize>,
    pub failed_reps: usize,
    pub log: Vec<RepRecord>,
}

fn reduce_replications(
    m: usize,
    b: usize,
    reps: Vec<Option<Vec<Option<(f64, f64)>>>>,
) -> Result<BootstrapVariance> {
    let failed = reps.iter().filter(|r| r.is_none()).count();
    if failed * 10 > b {
        return Err(Error::Bootstrap(format!(
            "{failed} of {b} replications failed to refit"
        )));
    }
    let mut sums = vec![0.0f64; m];
    let mut used = vec![0usize; m];
    let mut log = Vec::new();
    for (rep, outcome) in reps.iter().enumerate() {
        match outcome {
            None => log.push(RepRecord {
                rep,
                area: None,
                tau_star: None,
                tau_hat_star: None,
                status: "refit-failed",
            }),
            Some(areas) => {
                for (j, pair) in areas.iter().enumerate() {
                    match pair {
                        Some((tau_star, tau_hat_star)) => {
                            let err = tau_hat_star - tau_star;
                            sums[j] += err * err;
                            used[j] += 1;
                            log.push(RepRecord {
                                rep,
                                area: Some(j),
                                tau_star: Some(*tau_star),
                                tau_hat_star: Some(*tau_hat_star),
                                status: "ok",
                            });
                        }
                        None => log.push(RepRecord {
                            rep,
                            area: Some(j),
                            tau_star: None,
                            tau_hat_star: None,
                            status: "area-inestimable",
                        }),
                    }
                }
            }
        }
    }
    let var = (0..m)
        .map(|j| {
            if used[j] > 0 {
                Some(sums[j] / used[j] as f64)
            } else {
                None
            }
        })
        .collect();
    Ok(BootstrapVariance {
        var,
        used,
        failed_reps: failed,
        log,
    })
}

fn pair_tables(
    truth: &crate::estimators::AreaEffectTable,
    est: &crate::estimators::AreaEffectTable,
) -> Vec<Option<(f64, f64)>> {
    truth
        .rows
        .iter()
        .zip(&est.rows)
        .map(|(t, e)| match (t.estimate, e.estimate) {
            (Some(ts), Some(es)) => Some((ts, es)),
            _ => None,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Parametric bootstrap around the EBLUP pipeline.

/// Parametric bootstrap: redraws outcomes and treatment from the fitted
/// models, refits both models on a fresh within-area sample of the original
/// sizes, and averages the squared gap between the re-estimated and
/// true-propensity effects.
pub fn parametric_bootstrap_eblup(
    lmm_fit: &LmmFit,
    glmm_fit: &GlmmFit,
    pop: &PopulationFrame,
    cfg: &BootstrapConfig,
    opts: &EstimatorOptions,
) -> Result<BootstrapVariance> {
    if cfg.b == 0 {
        return Err(Error::Contract("bootstrap needs at least one replication".into()));
    }
    if !lmm_fit.converged || !glmm_fit.converged {
        return Err(Error::Contract("bootstrap requires converged fits".into()));
    }
    let sizes = pop.sample_sizes();
    let m = pop.n_areas();
    let reps: Vec<Option<Vec<Option<(f64, f64)>>>> = (0..cfg.b)
        .into_par_iter()
        .map(|b| parametric_rep(lmm_fit, glmm_fit, pop, &sizes, cfg.seed, b as u64, opts).ok())
        .collect();
    reduce_replications(m, cfg.b, reps)
}

fn parametric_rep(
    lmm_fit: &LmmFit,
    glmm_fit: &GlmmFit,
    pop: &PopulationFrame,
    sizes: &[usize],
    seed: u64,
    b: u64,
    opts: &EstimatorOptions,
) -> Result<Vec<Option<(f64, f64)>>> {
    let mut rng = substream(seed, &[b, 1]);
    let m = pop.n_areas();
    let n = pop.n_units();
    let draw_normal = |rng: &mut rand_chacha::ChaCha8Rng, sd: f64| -> f64 {
        if sd > 0.0 {
            sd * rand_distr::StandardNormal.sample_into(rng)
        } else {
            0.0
        }
    };
    let sd_gamma = lmm_fit.theta.sigma2_gamma.sqrt();
    let sd_u = lmm_fit.theta.sigma2_u.sqrt();
    let sd_eps = lmm_fit.theta.sigma2_eps.sqrt();
    let sd_nu = glmm_fit.sigma2_nu.sqrt();
    let gamma_star: Vec<f64> = (0..m).map(|_| draw_normal(&mut rng, sd_gamma)).collect();
    let u_star: Vec<f64> = (0..m).map(|_| draw_normal(&mut rng, sd_u)).collect();
    let nu_star: Vec<f64> = (0..m).map(|_| draw_normal(&mut rng, sd_nu)).collect();

    let mut p_star = vec![0.0f64; n];
    let mut w_star = vec![0u8; n];
    let mut y_star = vec![0.0f64; n];
    for i in 0..n {
        let j = pop.area_of(i);
        let eta =
            covariate_row_subset(pop, i, glmm_fit.cols.as_deref()).dot(&glmm_fit.alpha)
                + nu_star[j];
        let p = 1.0 / (1.0 + (-eta).exp());
        p_star[i] = p;
        let w = u8::from(rng.random::<f64>() < p);
        w_star[i] = w;
        let eps = draw_normal(&mut rng, sd_eps);
        y_star[i] = outcome_row(pop, i, w as f64).dot(&lmm_fit.beta)
            + w as f64 * gamma_star[j]
            + u_star[j]
            + eps;
    }
    let boot_pop = pop.with_outcomes_and_treatment(y_star, w_star)?;
    let boot_pop = draw_sample(&boot_pop, sizes, child_seed(seed, b.wrapping_add(0x5eed)))?;

    // Refit both models and estimate with estimated propensities.
    let est = estimate_ipw_eblup(&boot_pop, opts)?;
    // True-propensity version with the same predictions.
    let p_clipped = clip_propensity(&p_star, opts.clip);
    let true_weights = d_weights(&boot_pop, &p_clipped);
    let truth = ipw_pate(&boot_pop, &est.yhat, &true_weights, Method::Eblup);
    Ok(pair_tables(&truth, &est.table))
}

trait SampleInto {
    fn sample_into(self, rng: &mut rand_chacha::ChaCha8Rng) -> f64;
}

impl SampleInto for rand_distr::StandardNormal {
    fn sample_into(self, rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
        rand_distr::Distribution::<f64>::sample(&self, rng)
    }
}

// ---------------------------------------------------------------------------
// Modified random-effect block bootstrap around the M-quantile pipeline.

/// Slope/intercept/unit-error decomposition of the median-fit marginal
/// residuals, with the zero-treated rule applied per area, plus moment
/// variance estimates.
#[derive(Debug, Clone)]
pub struct ResidualDecomposition {
    /// Per-area slope residuals (zero where the area sample has no
    /// treatment variation).
    pub gamma: Vec<f64>,
    /// Per-area intercept residuals.
    pub u: Vec<f64>,
    /// Per-sampled-unit errors, in `sample.units()` order.
    pub eps: Vec<f64>,
    /// Areas where the zero-slope restriction applied.
    pub gamma_restricted: Vec<bool>,
    /// Moment estimates (s2_gamma, s2_u, s2_eps).
    pub theta: (f64, f64, f64),
}

/// Decompose marginal residuals from the median M-quantile fit into area
/// slopes, area intercepts, and unit errors, and estimate their variances
/// by the method of moments.
pub fn residual_decomposition(
    sample: &SampleView,
    ensemble: &MqEnsemble,
) -> ResidualDecomposition {
    let pop = sample.frame();
    let m = pop.n_areas();
    let median = ensemble.median_fit();
    let mut gamma = vec![0.0; m];
    let mut u = vec![0.0; m];
    let mut gamma_restricted = vec![false; m];
    let mut eps = Vec::with_capacity(sample.n());
    let mut sxx = vec![0.0; m];
    let mut nj = vec![0usize; m];
    let mut wbar = vec![0.0; m];

    for j in 0..m {
        let units = sample.units_in_area(j);
        nj[j] = units.len();
        if units.is_empty() {
            gamma_restricted[j] = true;
            continue;
        }
        let r: Vec<f64> = units
            .iter()
            .map(|&i| sample.outcome(i) - median.predict_unit(pop, i))
            .collect();
        let w: Vec<f64> = units.iter().map(|&i| pop.treatment(i)).collect();
        let rbar = r.iter().sum::<f64>() / r.len() as f64;
        let wb = w.iter().sum::<f64>() / w.len() as f64;
        wbar[j] = wb;
        let sxx_j: f64 = w.iter().map(|v| (v - wb).powi(2)).sum();
        sxx[j] = sxx_j;
        if sxx_j > 0.0 {
            let sxy: f64 = w
                .iter()
                .zip(&r)
                .map(|(v, ri)| (v - wb) * (ri - rbar))
                .sum();
            gamma[j] = sxy / sxx_j;
            u[j] = rbar - gamma[j] * wb;
        } else {
            // No within-area treatment variation: force a zero slope.
            gamma_restricted[j] = true;
            gamma[j] = 0.0;
            u[j] = rbar;
        }
        for (&i, ri) in units.iter().zip(&r) {
            eps.push(ri - u[j] - pop.treatment(i) * gamma[j]);
        }
    }

    // Method-of-moments variance estimates from the decomposition.
    let n: usize = nj.iter().sum();
    let fitted_params: usize = (0..m)
        .map(|j| if sxx[j] > 0.0 { 2 } else { usize::from(nj[j] > 0) })
        .sum();
    let df = (n.saturating_sub(fitted_params)).max(1);
    let s2_eps = eps.iter().map(|e| e * e).sum::<f64>() / df as f64;

    let active: Vec<usize> = (0..m).filter(|&j| sxx[j] > 0.0).collect();
    let s2_gamma = if active.len() >= 2 {
        let mean = active.iter().map(|&j| gamma[j]).sum::<f64>() / active.len() as f64;
        let raw = active
            .iter()
            .map(|&j| (gamma[j] - mean).powi(2))
            .sum::<f64>()
            / (active.len() - 1) as f64;
        let noise =
            active.iter().map(|&j| s2_eps / sxx[j]).sum::<f64>() / active.len() as f64;
        (raw - noise).max(0.0)
    } else {
        0.0
    };

    let with_units: Vec<usize> = (0..m).filter(|&j| nj[j] > 0).collect();
    let s2_u = if with_units.len() >= 2 {
        let mean = with_units.iter().map(|&j| u[j]).sum::<f64>() / with_units.len() as f64;
        let raw = with_units
            .iter()
            .map(|&j| (u[j] - mean).powi(2))
            .sum::<f64>()
            / (with_units.len() - 1) as f64;
        let noise = with_units
            .iter()
            .map(|&j| {
                let base = s2_eps / nj[j] as f64;
                if sxx[j] > 0.0 {
                    base + s2_eps * wbar[j] * wbar[j] / sxx[j]
                } else {
                    base
                }
            })
            .sum::<f64>()
            / with_units.len() as f64;
        (raw - noise).max(0.0)
    } else {
        0.0
    };

    ResidualDecomposition {
        gamma,
        u,
        eps,
        gamma_restricted,
        theta: (s2_gamma, s2_u, s2_eps),
    }
}

/// Center a vector to zero mean and rescale so its mean square equals
/// `target_var`. A zero-dispersion vector maps to all zeros.
pub fn center_rescale(values: &[f64], target_var: f64) -> Vec<f64> {
    let n = values.len() as f64;
    if values.is_empty() {
        return Vec::new();
    }
    let mean = values.iter().sum::<f64>() / n;
    let centered: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let msq = centered.iter().map(|v| v * v).sum::<f64>() / n;
    if msq <= 0.0 || target_var <= 0.0 {
        return vec![0.0; values.len()];
    }
    let scale = (target_var / msq).sqrt();
    centered.into_iter().map(|v| v * scale).collect()
}

/// Modified random-effect block bootstrap around the M-quantile pipeline.
pub fn block_bootstrap_mq(
    pop: &PopulationFrame,
    ensemble: &MqEnsemble,
    binary: &MqBinEnsemble,
    cfg: &BootstrapConfig,
    opts: &EstimatorOptions,
) -> Result<BootstrapVariance> {
    if cfg.b == 0 {
        return Err(Error::Contract("bootstrap needs at least one replication".into()));
    }
    let sample = pop.sample_view();
    let m = pop.n_areas();
    let decomp = residual_decomposition(&sample, ensemble);
    let (s2_gamma, s2_u, s2_eps) = decomp.theta;
    let gamma_cs = center_rescale(&decomp.gamma, s2_gamma);
    let u_cs = center_rescale(&decomp.u, s2_u);
    let eps_cs = center_rescale(&decomp.eps, s2_eps);

    // Per-area pools of rescaled unit errors, in sample order.
    let mut eps_pool: Vec<Vec<f64>> = vec![Vec::new(); m];
    for (pos, i) in sample.units().enumerate() {
        eps_pool[pop.area_of(i)].push(eps_cs[pos]);
    }
    let donor_areas: Vec<usize> = (0..m).filter(|&j| !eps_pool[j].is_empty()).collect();
    if donor_areas.is_empty() {
        return Err(Error::Contract("no sampled residuals to resample".into()));
    }

    // Pseudo-random propensity effects from the binary quantile fits:
    // average-covariate contrast between each area's fit and the median fit,
    // centered around zero.
    let median_idx = binary
        .grid
        .iter()
        .position(|&g| (g - 0.5).abs() < 1e-12)
        .ok_or_else(|| Error::Contract("binary grid must contain the median".into()))?;
    let median_fit_bin = &binary.fits[median_idx];
    let alpha_med = &median_fit_bin.alpha;
    let bin_cols = median_fit_bin.cols.as_deref();
    let mut g_hat = vec![0.0; m];
    for j in 0..m {
        let units = sample.units_in_area(j);
        if units.is_empty() {
            continue;
        }
        let mut xbar = covariate_row_subset(pop, units[0], bin_cols);
        for &i in &units[1..] {
            xbar += covariate_row_subset(pop, i, bin_cols);
        }
        xbar /= units.len() as f64;
        g_hat[j] = xbar.dot(&binary.area_fits[j].alpha) - xbar.dot(alpha_med);
    }
    let g_mean = g_hat.iter().sum::<f64>() / m as f64;
    let g_cs: Vec<f64> = g_hat.iter().map(|v| v - g_mean).collect();

    let median = ensemble.median_fit().clone();
    let sizes = pop.sample_sizes();
    let alpha_med = alpha_med.clone();
    let bin_cols_owned = bin_cols.map(<[usize]>::to_vec);
    let reps: Vec<Option<Vec<Option<(f64, f64)>>>> = (0..cfg.b)
        .into_par_iter()
        .map(|b| {
            block_rep(
                pop,
                &median,
                &alpha_med,
                bin_cols_owned.as_deref(),
                &gamma_cs,
                &u_cs,
                &eps_pool,
                &donor_areas,
                &g_cs,
                &sizes,
                cfg.seed,
                b as u64,
                opts,
            )
            .ok()
        })
        .collect();
    reduce_replications(m, cfg.b, reps)
}

#[allow(clippy::too_many_arguments)]
fn block_rep(
    pop: &PopulationFrame,
    median: &crate::mquantile::MqFit,
    alpha_med: &nalgebra::DVector<f64>,
    bin_cols: Option<&[usize]>,
    gamma_cs: &[f64],
    u_cs: &[f64],
    eps_pool: &[Vec<f64>],
    donor_areas: &[usize],
    g_cs: &[f64],
    sizes: &[usize],
    seed: u64,
    b: u64,
    opts: &EstimatorOptions,
) -> Result<Vec<Option<(f64, f64)>>> {
    let mut rng = substream(seed, &[b, 2]);
    let m = pop.n_areas();
    let n = pop.n_units();
    // Area-level draws with replacement.
    let gamma_star: Vec<f64> = (0..m)
        .map(|_| gamma_cs[rng.random_range(0..gamma_cs.len())])
        .collect();
    let u_star: Vec<f64> = (0..m)
        .map(|_| u_cs[rng.random_range(0..u_cs.len())])
        .collect();
    let g_star: Vec<f64> = (0..m)
        .map(|_| g_cs[rng.random_range(0..g_cs.len())])
        .collect();
    // Unit errors: donor area per area, then within-donor resampling.
    let mut p_star = vec![0.0f64; n];
    let mut w_star = vec![0u8; n];
    let mut y_star = vec![0.0f64; n];
    for j in 0..m {
        let donor = donor_areas[rng.random_range(0..donor_areas.len())];
        let pool = &eps_pool[donor];
        for &i in pop.units_in_area(j) {
            let eta = covariate_row_subset(pop, i, bin_cols).dot(alpha_med) + g_star[j];
            let p = 1.0 / (1.0 + (-eta).exp());
            p_star[i] = p;
            let w = u8::from(rng.random::<f64>() < p);
            w_star[i] = w;
            let eps = pool[rng.random_range(0..pool.len())];
            y_star[i] = outcome_row(pop, i, w as f64).dot(&median.coef)
                + w as f64 * gamma_star[j]
                + u_star[j]
                + eps;
        }
    }
    let boot_pop = pop.with_outcomes_and_treatment(y_star, w_star)?;
    let boot_pop = draw_sample(&boot_pop, sizes, child_seed(seed, b.wrapping_add(0xb10c)))?;

    let est = estimate_ipw_mq(&boot_pop, opts)?;
    let p_clipped = clip_propensity(&p_star, opts.clip);
    let true_weights = d_weights(&boot_pop, &p_clipped);
    let truth = ipw_pate(&boot_pop, &est.yhat, &true_weights, Method::Mq);
    Ok(pair_tables(&truth, &est.table))
}

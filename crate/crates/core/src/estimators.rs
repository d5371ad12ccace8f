//! Area-effect estimators: the per-area IPW-Direct contrast on the sample,
//! the population-level IPW predictor combining observed outcomes with
//! model predictions, the EBLUP- and M-quantile-backed pipelines, and the
//! benchmarking weights that aggregate area effects to the national effect
//! exactly.

use crate::error::{Error, Result};
use crate::frames::{PopulationFrame, SampleView};
use crate::glmm::{self, GlmmFit};
use crate::lmm::{self, LmmFit, LmmOptions};
use crate::mquantile::{self, MqBinEnsemble, MqEnsemble};

/// Estimator family tags used across tables and serialized outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Direct,
    Eblup,
    Mq,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Eblup => "eblup",
            Method::Mq => "mq",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Method::Direct),
            "eblup" => Ok(Method::Eblup),
            "mq" => Ok(Method::Mq),
            other => Err(Error::Contract(format!("unknown method '{other}'"))),
        }
    }
}

/// Per-area diagnostic flags attached to estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AreaFlag {
    /// No treated units among the area's sampled units.
    NoSampledTreated,
    /// No control units among the area's sampled units.
    NoSampledControl,
    /// The area contributed no sampled units at all.
    NoSampledUnits,
    /// No treated units in the area's population (K_j = 0).
    NoPopulationTreated,
    /// No control units in the area's population (T_j = 0).
    NoPopulationControl,
    /// Outcome predictions used zero random effects (area unseen in fit).
    SyntheticPrediction,
}

impl AreaFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            AreaFlag::NoSampledTreated => "no-sampled-treated",
            AreaFlag::NoSampledControl => "no-sampled-control",
            AreaFlag::NoSampledUnits => "no-sampled-units",
            AreaFlag::NoPopulationTreated => "no-population-treated",
            AreaFlag::NoPopulationControl => "no-population-control",
            AreaFlag::SyntheticPrediction => "synthetic-prediction",
        }
    }
}

/// One area's effect estimate. `estimate` is `None` when the estimator is
/// undefined for the area (never a placeholder number). The treated/control
/// terms hold the two normalized halves of the contrast so benchmarking can
/// reweight them exactly.
#[derive(Debug, Clone)]
pub struct AreaEffect {
    pub area: usize,
    pub estimate: Option<f64>,
    pub treated_term: Option<f64>,
    pub control_term: Option<f64>,
    pub flags: Vec<AreaFlag>,
}

/// Effects for every area of a population, tagged with the method.
#[derive(Debug, Clone)]
pub struct AreaEffectTable {
    pub method: Method,
    pub rows: Vec<AreaEffect>,
}

impl AreaEffectTable {
    pub fn estimate(&self, area: usize) -> Option<f64> {
        self.rows[area].estimate
    }
}

/// Per-unit D-weights and per-area normalizers over the population.
#[derive(Debug, Clone)]
pub struct IpwWeights {
    /// Signed per-unit weight: positive for treated, negative for controls.
    pub d: Vec<f64>,
    /// K_j = sum over the area's population of w / e.
    pub k: Vec<f64>,
    /// T_j = sum over the area's population of (1-w) / (1-e).
    pub t: Vec<f64>,
    /// The clipped propensities the weights were built from.
    pub ehat: Vec<f64>,
    /// Areas where K_j = 0 or T_j = 0 (no treated or no control units).
    pub inestimable: Vec<bool>,
}

/// Benchmarking weights. `a` is defined only where the treated and control
/// shares agree; `b` and `c` always exist and sum to one.
#[derive(Debug, Clone)]
pub struct BenchmarkWeights {
    pub a: Vec<Option<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub k_total: f64,
    pub t_total: f64,
}

/// Clip propensities into `[eps, 1 - eps]`.
pub fn clip_propensity(e: &[f64], eps: f64) -> Vec<f64> {
    e.iter().map(|&v| v.clamp(eps, 1.0 - eps)).collect()
}

fn sample_flags(pop: &PopulationFrame, sample: &SampleView, area: usize) -> Vec<AreaFlag> {
    let units = sample.units_in_area(area);
    let mut flags = Vec::new();
    if units.is_empty() {
        flags.push(AreaFlag::NoSampledUnits);
        return flags;
    }
    if !units.iter().any(|&i| pop.is_treated(i)) {
        flags.push(AreaFlag::NoSampledTreated);
    }
    if units.iter().all(|&i| pop.is_treated(i)) {
        flags.push(AreaFlag::NoSampledControl);
    }
    flags
}

/// Per-area Hajek IPW contrast on the sample. Areas without both sampled
/// treated and sampled control units are flagged undefined.
pub fn ipw_direct(sample: &SampleView, ehat: &[f64]) -> AreaEffectTable {
    let pop = sample.frame();
    let mut rows = Vec::with_capacity(pop.n_areas());
    for j in 0..pop.n_areas() {
        let flags = sample_flags(pop, sample, j);
        let defined = !flags.iter().any(|f| {
            matches!(
                f,
                AreaFlag::NoSampledTreated | AreaFlag::NoSampledControl | AreaFlag::NoSampledUnits
            )
        });
        if !defined {
            rows.push(AreaEffect {
                area: j,
                estimate: None,
                treated_term: None,
                control_term: None,
                flags,
            });
            continue;
        }
        let mut t_num = 0.0;
        let mut t_den = 0.0;
        let mut c_num = 0.0;
        let mut c_den = 0.0;
        for &i in sample.units_in_area(j) {
            let e = ehat[i];
            let y = sample.outcome(i);
            if pop.is_treated(i) {
                t_num += y / e;
                t_den += 1.0 / e;
            } else {
                c_num += y / (1.0 - e);
                c_den += 1.0 / (1.0 - e);
            }
        }
        let treated = t_num / t_den;
        let control = c_num / c_den;
        rows.push(AreaEffect {
            area: j,
            estimate: Some(treated - control),
            treated_term: Some(treated),
            control_term: Some(control),
            flags,
        });
    }
    AreaEffectTable {
        method: Method::Direct,
        rows,
    }
}

/// Population D-weights: `D_ij = K_j^{-1} w/e - T_j^{-1} (1-w)/(1-e)`.
pub fn d_weights(pop: &PopulationFrame, ehat: &[f64]) -> IpwWeights {
    let m = pop.n_areas();
    let mut k = vec![0.0; m];
    let mut t = vec![0.0; m];
    for i in 0..pop.n_units() {
        let j = pop.area_of(i);
        if pop.is_treated(i) {
            k[j] += 1.0 / ehat[i];
        } else {
            t[j] += 1.0 / (1.0 - ehat[i]);
        }
    }
    let inestimable: Vec<bool> = (0..m).map(|j| k[j] == 0.0 || t[j] == 0.0).collect();
    let mut d = vec![0.0; pop.n_units()];
    for i in 0..pop.n_units() {
        let j = pop.area_of(i);
        if inestimable[j] {
            continue;
        }
        d[i] = if pop.is_treated(i) {
            1.0 / (ehat[i] * k[j])
        } else {
            -1.0 / ((1.0 - ehat[i]) * t[j])
        };
    }
    IpwWeights {
        d,
        k,
        t,
        ehat: ehat.to_vec(),
        inestimable,
    }
}

/// Population-level IPW effect: observed outcomes for sampled units,
/// predictions elsewhere, weighted by the population normalizers.
pub fn ipw_pate(
    pop: &PopulationFrame,
    yhat: &[f64],
    weights: &IpwWeights,
    method: Method,
) -> AreaEffectTable {
    let sample = pop.sample_view();
    let mut rows = Vec::with_capacity(pop.n_areas());
    for j in 0..pop.n_areas() {
        let mut flags = sample_flags(pop, &sample, j);
        if weights.inestimable[j] {
            if weights.k[j] == 0.0 {
                flags.push(AreaFlag::NoPopulationTreated);
            }
            if weights.t[j] == 0.0 {
                flags.push(AreaFlag::NoPopulationControl);
            }
            rows.push(AreaEffect {
                area: j,
                estimate: None,
                treated_term: None,
                control_term: None,
                flags,
            });
            continue;
        }
        let mut treated = 0.0;
        let mut control = 0.0;
        for &i in pop.units_in_area(j) {
            let y = if pop.is_sampled(i) {
                pop.outcome(i).expect("sampled outcome present")
            } else {
                yhat[i]
            };
            let e = weights.ehat[i];
            if pop.is_treated(i) {
                treated += y / (e * weights.k[j]);
            } else {
                control += y / ((1.0 - e) * weights.t[j]);
            }
        }
        rows.push(AreaEffect {
            area: j,
            estimate: Some(treated - control),
            treated_term: Some(treated),
            control_term: Some(control),
            flags,
        });
    }
    AreaEffectTable { method, rows }
}

/// Knobs shared by the model-based pipelines.
#[derive(Debug, Clone)]
pub struct EstimatorOptions {
    /// Propensity clipping bound (applied as `[clip, 1 - clip]`).
    pub clip: f64,
    pub lmm: LmmOptions,
    /// Huber tuning constant for the M-quantile fits.
    pub huber_c: f64,
    /// Quantile grid for the M-quantile ensembles.
    pub grid: Vec<f64>,
    /// Covariate columns entering the propensity models (`None` = all).
    pub propensity_cols: Option<Vec<usize>>,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            clip: 0.005,
            lmm: LmmOptions::default(),
            huber_c: mquantile::DEFAULT_HUBER_C,
            grid: mquantile::default_grid(),
            propensity_cols: None,
        }
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Pipeline {
        stage: name,
        source: Box::new(e),
    })
}

/// Everything the EBLUP-based pipeline produced, kept for MSE estimation
/// and bootstrapping.
#[derive(Debug, Clone)]
pub struct EblupEstimate {
    pub table: AreaEffectTable,
    pub lmm: LmmFit,
    pub glmm: GlmmFit,
    pub weights: IpwWeights,
    /// Clipped propensities used in the weights.
    pub ehat: Vec<f64>,
    pub yhat: Vec<f64>,
}

/// Full EBLUP pipeline: propensity GLMM, clipping, D-weights, REML outcome
/// model, predictions, population IPW.
pub fn estimate_ipw_eblup(pop: &PopulationFrame, opts: &EstimatorOptions) -> Result<EblupEstimate> {
    let sample = pop.sample_view();
    let glmm_fit = stage(
        "propensity-glmm",
        glmm::fit_logit_laplace_subset(&sample, opts.propensity_cols.as_deref()),
    )?;
    let ehat_raw = glmm::predict_propensity(&glmm_fit, pop);
    let ehat = clip_propensity(&ehat_raw, opts.clip);
    let weights = d_weights(pop, &ehat);
    let lmm_fit = stage("outcome-reml", lmm::fit_reml(&sample, &opts.lmm))?;
    let (yhat, synthetic) = lmm::predict_outcomes(&lmm_fit, pop);
    let mut table = ipw_pate(pop, &yhat, &weights, Method::Eblup);
    for j in synthetic {
        table.rows[j].flags.push(AreaFlag::SyntheticPrediction);
    }
    Ok(EblupEstimate {
        table,
        lmm: lmm_fit,
        glmm: glmm_fit,
        weights,
        ehat,
        yhat,
    })
}

/// Everything the M-quantile pipeline produced.
#[derive(Debug, Clone)]
pub struct MqEstimate {
    pub table: AreaEffectTable,
    pub ensemble: MqEnsemble,
    pub binary: MqBinEnsemble,
    pub weights: IpwWeights,
    pub ehat: Vec<f64>,
    pub yhat: Vec<f64>,
}

/// Full M-quantile pipeline: binary ensemble for propensities, clipping,
/// D-weights, continuous ensemble for outcomes, population IPW.
pub fn estimate_ipw_mq(pop: &PopulationFrame, opts: &EstimatorOptions) -> Result<MqEstimate> {
    let sample = pop.sample_view();
    let binary = stage(
        "propensity-mq",
        mquantile::fit_mq_bin_ensemble_subset(
            &sample,
            &opts.grid,
            opts.huber_c,
            opts.propensity_cols.as_deref(),
        ),
    )?;
    let ehat_raw = mquantile::mq_predict_propensity(&binary, pop);
    let ehat = clip_propensity(&ehat_raw, opts.clip);
    let weights = d_weights(pop, &ehat);
    let ensemble = stage(
        "outcome-mq",
        mquantile::fit_mq_ensemble(&sample, &opts.grid, opts.huber_c),
    )?;
    let yhat = mquantile::mq_predict_outcomes(&ensemble, pop);
    let mut table = ipw_pate(pop, &yhat, &weights, Method::Mq);
    for (j, aq) in ensemble.area.iter().enumerate() {
        if aq.synthetic {
            table.rows[j].flags.push(AreaFlag::SyntheticPrediction);
        }
    }
    Ok(MqEstimate {
        table,
        ensemble,
        binary,
        weights,
        ehat,
        yhat,
    })
}

/// Benchmarking weights from the population normalizers.
pub fn benchmark_weights(weights: &IpwWeights) -> BenchmarkWeights {
    let k_total: f64 = weights.k.iter().sum();
    let t_total: f64 = weights.t.iter().sum();
    let b: Vec<f64> = weights.k.iter().map(|&k| k / k_total).collect();
    let c: Vec<f64> = weights.t.iter().map(|&t| t / t_total).collect();
    let a: Vec<Option<f64>> = b
        .iter()
        .zip(&c)
        .map(|(&bj, &cj)| if (bj - cj).abs() < 1e-9 { Some(bj) } else { None })
        .collect();
    BenchmarkWeights {
        a,
        b,
        c,
        k_total,
        t_total,
    }
}

/// National effect through the benchmarking weights: the treated terms are
/// combined with `b`, the control terms with `c`. Exact by construction.
pub fn national_effect(table: &AreaEffectTable, bench: &BenchmarkWeights) -> Result<f64> {
    let mut total = 0.0;
    for row in &table.rows {
        let (tt, ct) = match (row.treated_term, row.control_term) {
            (Some(tt), Some(ct)) => (tt, ct),
            _ => {
                return Err(Error::Contract(format!(
                    "area index {} carries no treated/control decomposition",
                    row.area
                )))
            }
        };
        total += bench.b[row.area] * tt - bench.c[row.area] * ct;
    }
    Ok(total)
}

/// Direct evaluation of the national effect from global normalizers,
/// bypassing the per-area decomposition. Used to verify benchmarking.
pub fn national_effect_direct(pop: &PopulationFrame, yhat: &[f64], weights: &IpwWeights) -> f64 {
    let k_total: f64 = weights.k.iter().sum();
    let t_total: f64 = weights.t.iter().sum();
    let mut total = 0.0;
    for i in 0..pop.n_units() {
        let y = if pop.is_sampled(i) {
            pop.outcome(i).expect("sampled outcome present")
        } else {
            yhat[i]
        };
        let e = weights.ehat[i];
        total += if pop.is_treated(i) {
            y / (e * k_total)
        } else {
            -y / ((1.0 - e) * t_total)
        };
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::PopulationFrame;

    fn pop_from(labels: Vec<&str>, x: Vec<f64>, w: Vec<u8>, y: Vec<f64>, s: Vec<bool>) -> PopulationFrame {
        let yo = y
            .iter()
            .zip(&s)
            .map(|(&v, &sampled)| if sampled || v.is_finite() { Some(v) } else { None })
            .collect();
        PopulationFrame::from_parts(
            labels.into_iter().map(str::to_string).collect(),
            x,
            1,
            w,
            yo,
            s,
        )
        .unwrap()
    }

    #[test]
    fn direct_uniform_weights_single_area() {
        let pop = pop_from(
            vec!["a", "a"],
            vec![0.0, 0.0],
            vec![1, 0],
            vec![3.0, 1.0],
            vec![true, true],
        );
        let table = ipw_direct(&pop.sample_view(), &[0.5, 0.5]);
        assert_eq!(table.rows[0].estimate, Some(2.0));
    }

    #[test]
    fn direct_identical_outcomes_give_zero() {
        let pop = pop_from(
            vec!["a"; 6],
            vec![0.0; 6],
            vec![1, 0, 1, 0, 1, 0],
            vec![4.2; 6],
            vec![true; 6],
        );
        let e = [0.3, 0.6, 0.8, 0.2, 0.5, 0.9];
        let table = ipw_direct(&pop.sample_view(), &e);
        assert!(table.rows[0].estimate.unwrap().abs() < 1e-12);
    }

    #[test]
    fn direct_matches_hand_summation() {
        let y = [2.0, 5.0, 1.0, 3.0, 4.0, 0.5];
        let w = [1u8, 1, 0, 0, 1, 0];
        let e = [0.4, 0.7, 0.3, 0.5, 0.6, 0.2];
        let pop = pop_from(
            vec!["a"; 6],
            vec![0.0; 6],
            w.to_vec(),
            y.to_vec(),
            vec![true; 6],
        );
        let table = ipw_direct(&pop.sample_view(), &e);
        let t_num = 2.0 / 0.4 + 5.0 / 0.7 + 4.0 / 0.6;
        let t_den = 1.0 / 0.4 + 1.0 / 0.7 + 1.0 / 0.6;
        let c_num = 1.0 / 0.7 + 3.0 / 0.5 + 0.5 / 0.8;
        let c_den = 1.0 / 0.7 + 1.0 / 0.5 + 1.0 / 0.8;
        let want = t_num / t_den - c_num / c_den;
        assert!((table.rows[0].estimate.unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn direct_undefined_without_sampled_treated() {
        let pop = pop_from(
            vec!["a", "a", "b", "b"],
            vec![0.0; 4],
            vec![0, 0, 1, 0],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![true; 4],
        );
        let table = ipw_direct(&pop.sample_view(), &[0.5; 4]);
        assert_eq!(table.rows[0].estimate, None);
        assert!(table.rows[0].flags.contains(&AreaFlag::NoSampledTreated));
        assert!(table.rows[1].estimate.is_some());
    }

    #[test]
    fn d_weights_two_unit_hand_case() {
        // Hand computation: K = T = 1/0.5 = 2, and the lone treated unit
        // carries the full positive mass K^{-1} w/e = (1/2)(1/0.5) = 1, so
        // D = (+1, -1); each signed part sums to one as required.
        let pop = pop_from(
            vec!["a", "a"],
            vec![0.0, 0.0],
            vec![1, 0],
            vec![0.0, 0.0],
            vec![true, true],
        );
        let w = d_weights(&pop, &[0.5, 0.5]);
        assert!((w.k[0] - 2.0).abs() < 1e-15);
        assert!((w.t[0] - 2.0).abs() < 1e-15);
        assert!((w.d[0] - 1.0).abs() < 1e-15);
        assert!((w.d[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn d_weights_sum_to_zero_per_area() {
        let labels = vec!["a", "a", "a", "b", "b", "b", "b"];
        let w = vec![1, 0, 1, 0, 1, 1, 0];
        let e = [0.31, 0.62, 0.55, 0.4, 0.8, 0.25, 0.5];
        let pop = pop_from(labels, vec![0.0; 7], w, vec![0.0; 7], vec![true; 7]);
        let iw = d_weights(&pop, &e);
        for j in 0..2 {
            let sum: f64 = pop.units_in_area(j).iter().map(|&i| iw.d[i]).sum();
            assert!(sum.abs() < 1e-12, "area {j} sum {sum}");
            let pos: f64 = pop
                .units_in_area(j)
                .iter()
                .filter(|&&i| pop.is_treated(i))
                .map(|&i| iw.d[i])
                .sum();
            assert!((pos - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn all_control_area_is_inestimable() {
        let pop = pop_from(
            vec!["a", "a", "b", "b"],
            vec![0.0; 4],
            vec![0, 0, 1, 0],
            vec![0.0; 4],
            vec![true; 4],
        );
        let w = d_weights(&pop, &[0.5; 4]);
        assert!(w.inestimable[0]);
        assert!(!w.inestimable[1]);
    }

    #[test]
    fn pate_census_equals_full_population_ipw() {
        let y = [2.0, 5.0, 1.0, 3.0];
        let w = [1u8, 0, 1, 0];
        let e = [0.4, 0.6, 0.3, 0.7];
        let pop = pop_from(
            vec!["a"; 4],
            vec![0.0; 4],
            w.to_vec(),
            y.to_vec(),
            vec![true; 4],
        );
        let iw = d_weights(&pop, &e);
        // Census: predictions are unused; pass an obviously wrong yhat.
        let table = ipw_pate(&pop, &[9e9; 4], &iw, Method::Eblup);
        let want: f64 = (0..4)
            .map(|i| iw.d[i] * y[i])
            .sum();
        assert!((table.rows[0].estimate.unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn pate_with_perfect_predictions_recovers_population_value() {
        let y = [2.0, 5.0, 1.0, 3.0, 7.0, 2.5];
        let w = [1u8, 0, 1, 0, 1, 0];
        let e = [0.4, 0.6, 0.3, 0.7, 0.5, 0.45];
        let sampled = vec![true, true, false, false, true, false];
        let pop = pop_from(
            vec!["a"; 6],
            vec![0.0; 6],
            w.to_vec(),
            y.to_vec(),
            sampled,
        );
        let iw = d_weights(&pop, &e);
        let table = ipw_pate(&pop, &y, &iw, Method::Eblup);
        let want: f64 = (0..6).map(|i| iw.d[i] * y[i]).sum();
        assert!((table.rows[0].estimate.unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn pate_hand_summation_with_predictions() {
        let y_obs = [2.0, 5.0];
        let yhat = [0.0, 0.0, 1.5, 2.5];
        let w = [1u8, 0, 1, 0];
        let e = [0.4, 0.6, 0.3, 0.7];
        let pop = pop_from(
            vec!["a"; 4],
            vec![0.0; 4],
            w.to_vec(),
            vec![y_obs[0], y_obs[1], f64::NAN, f64::NAN],
            vec![true, true, false, false],
        );
        let iw = d_weights(&pop, &e);
        let table = ipw_pate(&pop, &yhat, &iw, Method::Mq);
        let want = iw.d[0] * 2.0 + iw.d[1] * 5.0 + iw.d[2] * 1.5 + iw.d[3] * 2.5;
        assert!((table.rows[0].estimate.unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn location_shift_leaves_estimates_unchanged() {
        let y = [2.0, 5.0, 1.0, 3.0, 7.0, 2.5];
        let w = [1u8, 0, 1, 0, 1, 0];
        let e = [0.4, 0.6, 0.3, 0.7, 0.5, 0.45];
        let sampled = [true, true, false, false, true, false];
        let pop = pop_from(
            vec!["a", "a", "a", "b", "b", "b"],
            vec![0.0; 6],
            w.to_vec(),
            y.to_vec(),
            sampled.to_vec(),
        );
        let iw = d_weights(&pop, &e);
        let yhat = [1.1, 2.2, 3.3, 4.4, 5.5, 6.6];
        let base = ipw_pate(&pop, &yhat, &iw, Method::Eblup);
        let shift = 123.456;
        let y2: Vec<f64> = y.iter().map(|v| v + shift).collect();
        let pop2 = pop_from(
            vec!["a", "a", "a", "b", "b", "b"],
            vec![0.0; 6],
            w.to_vec(),
            y2,
            sampled.to_vec(),
        );
        let yhat2: Vec<f64> = yhat.iter().map(|v| v + shift).collect();
        let shifted = ipw_pate(&pop2, &yhat2, &iw, Method::Eblup);
        for j in 0..2 {
            let a = base.rows[j].estimate.unwrap();
            let b = shifted.rows[j].estimate.unwrap();
            assert!((a - b).abs() < 1e-10, "area {j}: {a} vs {b}");
        }
    }

    #[test]
    fn benchmark_weights_single_area_and_sums() {
        let pop = pop_from(
            vec!["a", "a"],
            vec![0.0; 2],
            vec![1, 0],
            vec![0.0; 2],
            vec![true; 2],
        );
        let iw = d_weights(&pop, &[0.5, 0.5]);
        let bw = benchmark_weights(&iw);
        assert_eq!(bw.b, vec![1.0]);
        assert_eq!(bw.c, vec![1.0]);
        assert_eq!(bw.a[0], Some(1.0));

        let labels = vec!["a", "a", "b", "b", "b", "c"];
        let w = vec![1, 0, 1, 0, 1, 0];
        let e = [0.3, 0.4, 0.5, 0.6, 0.7, 0.2];
        let pop = pop_from(labels, vec![0.0; 6], w, vec![0.0; 6], vec![true; 6]);
        let bw = benchmark_weights(&d_weights(&pop, &e));
        assert!((bw.b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((bw.c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn proportional_normalizers_make_a_available() {
        // Two areas constructed so K_j / K = T_j / T exactly: identical
        // composition, duplicated twice in area b.
        let labels = vec!["a", "a", "b", "b", "b", "b"];
        let w = vec![1, 0, 1, 0, 1, 0];
        let e = [0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
        let pop = pop_from(labels, vec![0.0; 6], w, vec![0.0; 6], vec![true; 6]);
        let bw = benchmark_weights(&d_weights(&pop, &e));
        for j in 0..2 {
            assert_eq!(bw.a[j], Some(bw.b[j]));
        }
        assert!((bw.a[0].unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn national_effect_identities() {
        let labels = vec!["a", "a", "a", "b", "b", "b"];
        let w = vec![1, 0, 1, 1, 0, 0];
        let e = [0.4, 0.6, 0.3, 0.7, 0.5, 0.45];
        let y = [2.0, 5.0, 1.0, 3.0, 7.0, 2.5];
        let sampled = vec![true, true, false, true, true, false];
        let pop = pop_from(labels, vec![0.0; 6], w, y.to_vec(), sampled);
        let iw = d_weights(&pop, &e);
        let yhat = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let table = ipw_pate(&pop, &yhat, &iw, Method::Eblup);
        let bench = benchmark_weights(&iw);
        let national = national_effect(&table, &bench).unwrap();
        let direct = national_effect_direct(&pop, &yhat, &iw);
        assert!(
            (national - direct).abs() < 1e-10,
            "benchmarked {national} vs direct {direct}"
        );

        // Single area: the national effect equals the area estimate.
        let pop1 = pop_from(
            vec!["a", "a"],
            vec![0.0; 2],
            vec![1, 0],
            vec![3.0, 1.0],
            vec![true, true],
        );
        let iw1 = d_weights(&pop1, &[0.5, 0.5]);
        let t1 = ipw_pate(&pop1, &[0.0, 0.0], &iw1, Method::Eblup);
        let b1 = benchmark_weights(&iw1);
        let nat1 = national_effect(&t1, &b1).unwrap();
        assert!((nat1 - t1.rows[0].estimate.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn identical_areas_yield_common_national_value() {
        let labels = vec!["a", "a", "b", "b"];
        let w = vec![1, 0, 1, 0];
        let e = [0.5; 4];
        let y = [3.0, 1.0, 3.0, 1.0];
        let pop = pop_from(labels, vec![0.0; 4], w, y.to_vec(), vec![true; 4]);
        let iw = d_weights(&pop, &e);
        let table = ipw_pate(&pop, &[0.0; 4], &iw, Method::Eblup);
        let bench = benchmark_weights(&iw);
        let nat = national_effect(&table, &bench).unwrap();
        assert!((nat - 2.0).abs() < 1e-12);
    }

    #[test]
    fn missing_decomposition_is_an_error() {
        let table = AreaEffectTable {
            method: Method::Direct,
            rows: vec![AreaEffect {
                area: 0,
                estimate: Some(1.0),
                treated_term: None,
                control_term: None,
                flags: vec![],
            }],
        };
        let bench = BenchmarkWeights {
            a: vec![Some(1.0)],
            b: vec![1.0],
            c: vec![1.0],
            k_total: 1.0,
            t_total: 1.0,
        };
        assert!(national_effect(&table, &bench).is_err());
    }
}

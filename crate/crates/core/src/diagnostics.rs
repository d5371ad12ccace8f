//! Assumption checking: within-area covariate balance through the
//! linearized propensity score, and common-support filtering.

use crate::error::{Error, Result};
use crate::frames::PopulationFrame;
use crate::numeric::{sample_variance, student_t_two_sided};

/// Log odds of treatment: `l = ln(e / (1 - e))`.
pub fn linearized_propensity(e: &[f64]) -> Result<Vec<f64>> {
    e.iter()
        .map(|&v| {
            if v > 0.0 && v < 1.0 {
                Ok((v / (1.0 - v)).ln())
            } else {
                Err(Error::Contract(format!(
                    "propensity {v} outside (0,1); clip upstream"
                )))
            }
        })
        .collect()
}

/// One area's balance-test row.
#[derive(Debug, Clone)]
pub struct AreaBalance {
    pub area: usize,
    /// Standardized mean difference of linearized propensities, or `None`
    /// when a group has fewer than two units.
    pub delta: Option<f64>,
    /// Welch-Satterthwaite degrees of freedom.
    pub df: Option<f64>,
    pub p_value: Option<f64>,
    pub n_treated: usize,
    pub n_control: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct BalanceReport {
    pub rows: Vec<AreaBalance>,
}

/// Per-area two-sample balance test on linearized propensities: the
/// statistic standardizes the group-mean difference by the average of the
/// two group variances, with Welch-Satterthwaite degrees of freedom and a
/// two-sided Student-t p-value. Areas with fewer than two units in either
/// group are skipped with a flag.
pub fn balance_test(pop: &PopulationFrame, e: &[f64]) -> Result<BalanceReport> {
    let l = linearized_propensity(e)?;
    let mut rows = Vec::with_capacity(pop.n_areas());
    for j in 0..pop.n_areas() {
        let mut lt = Vec::new();
        let mut lc = Vec::new();
        for &i in pop.units_in_area(j) {
            if pop.is_treated(i) {
                lt.push(l[i]);
            } else {
                lc.push(l[i]);
            }
        }
        let (nt, nc) = (lt.len(), lc.len());
        if nt < 2 || nc < 2 {
            rows.push(AreaBalance {
                area: j,
                delta: None,
                df: None,
                p_value: None,
                n_treated: nt,
                n_control: nc,
                skipped: true,
            });
            continue;
        }
        let mean_t = lt.iter().sum::<f64>() / nt as f64;
        let mean_c = lc.iter().sum::<f64>() / nc as f64;
        let var_t = sample_variance(&lt);
        let var_c = sample_variance(&lc);
        let pooled = 0.5 * (var_c + var_t);
        let delta = if pooled > 0.0 {
            (mean_t - mean_c) / pooled.sqrt()
        } else {
            0.0
        };
        let (ntf, ncf) = (nt as f64, nc as f64);
        let se_t = var_t / ntf;
        let se_c = var_c / ncf;
        let denom = se_c * se_c / (ncf - 1.0) + se_t * se_t / (ntf - 1.0);
        let df = if denom > 0.0 {
            (se_c + se_t).powi(2) / denom
        } else {
            (ntf + ncf - 2.0).max(1.0)
        };
        let p = student_t_two_sided(delta, df);
        rows.push(AreaBalance {
            area: j,
            delta: Some(delta),
            df: Some(df),
            p_value: Some(p),
            n_treated: nt,
            n_control: nc,
            skipped: false,
        });
    }
    Ok(BalanceReport { rows })
}

/// How the overlap region is determined per area.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupportBounds {
    /// Intersection of the treated and control propensity ranges.
    MinMax,
    /// Same, after trimming each group to its 1%/99% quantiles.
    QuantileTrimmed,
}

/// Per-area outcome of the common-support filter.
#[derive(Debug, Clone)]
pub struct AreaSupportReport {
    pub area: usize,
    pub dropped: usize,
    pub retained: usize,
    /// The ranges were disjoint; nothing was dropped, the area is flagged.
    pub non_overlapping: bool,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SupportReport {
    pub rows: Vec<AreaSupportReport>,
}

fn group_bounds(values: &mut Vec<f64>, bounds: SupportBounds) -> (f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    match bounds {
        SupportBounds::MinMax => (values[0], values[values.len() - 1]),
        SupportBounds::QuantileTrimmed => {
            let n = values.len();
            let lo_idx = ((0.01 * n as f64).floor() as usize).min(n - 1);
            let hi_idx = ((0.99 * n as f64).ceil() as usize).max(1).min(n) - 1;
            (values[lo_idx], values[hi_idx])
        }
    }
}

/// Drop units whose propensity lies outside the overlap of the treated and
/// control ranges within their area (closed interval, one pass). Disjoint
/// ranges flag the area and retain every unit (no silent deletion). Areas
/// missing one of the groups are flagged non-overlapping as well.
///
/// The pass is idempotent whenever the post-filter group ranges coincide
/// with the overlap interval; iterating the rule on generic continuous
/// scores would keep shaving the group minima against each other, so a
/// single pass is the operational definition here.
pub fn common_support_filter(
    pop: &PopulationFrame,
    e: &[f64],
    bounds: SupportBounds,
) -> (PopulationFrame, SupportReport) {
    let mut keep: Vec<bool> = vec![true; pop.n_units()];
    let mut rows = Vec::with_capacity(pop.n_areas());
    for j in 0..pop.n_areas() {
        let units = pop.units_in_area(j);
        let mut et: Vec<f64> = units
            .iter()
            .filter(|&&i| pop.is_treated(i))
            .map(|&i| e[i])
            .collect();
        let mut ec: Vec<f64> = units
            .iter()
            .filter(|&&i| !pop.is_treated(i))
            .map(|&i| e[i])
            .collect();
        if et.is_empty() || ec.is_empty() {
            rows.push(AreaSupportReport {
                area: j,
                dropped: 0,
                retained: units.len(),
                non_overlapping: true,
                lo: None,
                hi: None,
            });
            continue;
        }
        let (t_lo, t_hi) = group_bounds(&mut et, bounds);
        let (c_lo, c_hi) = group_bounds(&mut ec, bounds);
        let lo = t_lo.max(c_lo);
        let hi = t_hi.min(c_hi);
        if lo > hi {
            rows.push(AreaSupportReport {
                area: j,
                dropped: 0,
                retained: units.len(),
                non_overlapping: true,
                lo: Some(lo),
                hi: Some(hi),
            });
            continue;
        }
        let mut dropped = 0;
        for &i in units {
            if e[i] < lo || e[i] > hi {
                keep[i] = false;
                dropped += 1;
            }
        }
        rows.push(AreaSupportReport {
            area: j,
            dropped,
            retained: units.len() - dropped,
            non_overlapping: false,
            lo: Some(lo),
            hi: Some(hi),
        });
    }

    // Rebuild the frame with the retained units.
    let mut labels = Vec::new();
    let mut x = Vec::new();
    let mut w = Vec::new();
    let mut y = Vec::new();
    let mut s = Vec::new();
    for i in 0..pop.n_units() {
        if !keep[i] {
            continue;
        }
        labels.push(pop.area_label(pop.area_of(i)).to_string());
        x.extend_from_slice(pop.covariates(i));
        w.push(pop.is_treated(i) as u8);
        y.push(pop.outcome(i));
        s.push(pop.is_sampled(i));
    }
    let filtered =
        PopulationFrame::from_parts(labels, x, pop.n_covariates(), w, y, s)
            .expect("filtered frame preserves invariants");
    (filtered, SupportReport { rows })
}

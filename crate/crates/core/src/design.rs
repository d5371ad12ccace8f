//! Design-matrix builders shared by the outcome and propensity models.
//!
//! The outcome design is `(1, x_1..x_p, w)`; the propensity design is
//! `(1, x_1..x_p)`. An intercept column is always prepended, so loaded
//! covariates never need a constant column.

use nalgebra::{DMatrix, DVector};

use crate::frames::PopulationFrame;

/// Outcome-model design rows `(1, x, w)` for the given units.
pub fn outcome_design(pop: &PopulationFrame, units: &[usize]) -> DMatrix<f64> {
    let p = pop.n_covariates();
    let k = p + 2;
    let mut m = DMatrix::zeros(units.len(), k);
    for (r, &i) in units.iter().enumerate() {
        m[(r, 0)] = 1.0;
        for (c, &v) in pop.covariates(i).iter().enumerate() {
            m[(r, c + 1)] = v;
        }
        m[(r, k - 1)] = pop.treatment(i);
    }
    m
}

/// One outcome-design row `(1, x, w)`, with an explicit treatment value.
pub fn outcome_row(pop: &PopulationFrame, unit: usize, w: f64) -> DVector<f64> {
    let p = pop.n_covariates();
    let mut row = DVector::zeros(p + 2);
    row[0] = 1.0;
    for (c, &v) in pop.covariates(unit).iter().enumerate() {
        row[c + 1] = v;
    }
    row[p + 1] = w;
    row
}

/// Propensity-model design rows `(1, x)` for the given units.
pub fn covariate_design(pop: &PopulationFrame, units: &[usize]) -> DMatrix<f64> {
    covariate_design_subset(pop, units, None)
}

/// Propensity-model design restricted to a subset of covariate columns
/// (`None` keeps them all). The intercept is always present.
pub fn covariate_design_subset(
    pop: &PopulationFrame,
    units: &[usize],
    cols: Option<&[usize]>,
) -> DMatrix<f64> {
    let all: Vec<usize> = (0..pop.n_covariates()).collect();
    let cols = cols.unwrap_or(&all);
    let mut m = DMatrix::zeros(units.len(), cols.len() + 1);
    for (r, &i) in units.iter().enumerate() {
        m[(r, 0)] = 1.0;
        let x = pop.covariates(i);
        for (c, &col) in cols.iter().enumerate() {
            m[(r, c + 1)] = x[col];
        }
    }
    m
}

/// One propensity-design row `(1, x)`.
pub fn covariate_row(pop: &PopulationFrame, unit: usize) -> DVector<f64> {
    covariate_row_subset(pop, unit, None)
}

/// One propensity-design row over a covariate subset.
pub fn covariate_row_subset(
    pop: &PopulationFrame,
    unit: usize,
    cols: Option<&[usize]>,
) -> DVector<f64> {
    let all: Vec<usize> = (0..pop.n_covariates()).collect();
    let cols = cols.unwrap_or(&all);
    let mut row = DVector::zeros(cols.len() + 1);
    row[0] = 1.0;
    let x = pop.covariates(unit);
    for (c, &col) in cols.iter().enumerate() {
        row[c + 1] = x[col];
    }
    row
}

/// Treatment indicators for the given units as a vector.
pub fn treatment_vector(pop: &PopulationFrame, units: &[usize]) -> DVector<f64> {
    DVector::from_iterator(units.len(), units.iter().map(|&i| pop.treatment(i)))
}

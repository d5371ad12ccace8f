//! Finite-population data model: areas, covariates, treatment status,
//! outcomes, and sample membership, plus CSV ingestion and within-area
//! simple random sampling without replacement.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::substream;

/// Column-name mapping from a user CSV onto the canonical roles.
///
/// Canonical columns are `area`, `x1..xp`, `w`, `y`, `in_sample`. Any file
/// layout loads as long as the schema names the right columns. When
/// `in_sample` is `None` and the file has no `in_sample` column, sample
/// membership is inferred from outcome availability: rows with a non-missing
/// `y` are sampled.
#[derive(Debug, Clone)]
pub struct Schema {
    pub area: String,
    pub x: Vec<String>,
    pub w: String,
    pub y: String,
    pub in_sample: Option<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            area: "area".into(),
            x: Vec::new(), // empty means: autodetect x1, x2, ... from the header
            w: "w".into(),
            y: "y".into(),
            in_sample: Some("in_sample".into()),
        }
    }
}

/// A finite population partitioned into areas.
///
/// Immutable after construction; every accessor borrows. Unit order is the
/// input order. Area labels are arbitrary strings mapped to dense indices
/// `0..m` in first-appearance order; all outputs echo the original labels.
#[derive(Debug, Clone)]
pub struct PopulationFrame {
    labels: Vec<String>,
    area: Vec<usize>,
    /// Row-major covariates, `n_units x p` (without intercept or treatment).
    x: Vec<f64>,
    p: usize,
    w: Vec<u8>,
    y: Vec<Option<f64>>,
    in_sample: Vec<bool>,
    units_by_area: Vec<Vec<usize>>,
}

impl PopulationFrame {
    /// Assemble a frame from columns. `area_labels` holds one label per unit.
    pub fn from_parts(
        area_labels: Vec<String>,
        x: Vec<f64>,
        p: usize,
        w: Vec<u8>,
        y: Vec<Option<f64>>,
        in_sample: Vec<bool>,
    ) -> Result<Self> {
        let n = area_labels.len();
        if w.len() != n || y.len() != n || in_sample.len() != n || x.len() != n * p {
            return Err(Error::Validation(format!(
                "column lengths disagree: {n} areas, {} w, {} y, {} in_sample, {} x values for p={p}",
                w.len(),
                y.len(),
                in_sample.len(),
                x.len()
            )));
        }
        let mut labels: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut area = Vec::with_capacity(n);
        for label in &area_labels {
            let next = labels.len();
            let j = *index.entry(label.clone()).or_insert_with(|| {
                labels.push(label.clone());
                next
            });
            area.push(j);
        }
        let mut units_by_area = vec![Vec::new(); labels.len()];
        for (i, &j) in area.iter().enumerate() {
            units_by_area[j].push(i);
        }
        for (i, (&w_i, y_i)) in w.iter().zip(&y).enumerate() {
            if w_i > 1 {
                return Err(Error::Validation(format!(
                    "treatment indicator must be 0/1, unit {i} has {w_i}"
                )));
            }
            if in_sample[i] && y_i.is_none() {
                return Err(Error::Validation(format!(
                    "sampled unit {i} has no outcome value"
                )));
            }
        }
        Ok(PopulationFrame {
            labels,
            area,
            x,
            p,
            w,
            y,
            in_sample,
            units_by_area,
        })
    }

    pub fn n_units(&self) -> usize {
        self.area.len()
    }

    /// Number of areas m.
    pub fn n_areas(&self) -> usize {
        self.labels.len()
    }

    /// Number of covariate columns (excluding intercept and treatment).
    pub fn n_covariates(&self) -> usize {
        self.p
    }

    pub fn area_label(&self, j: usize) -> &str {
        &self.labels[j]
    }

    pub fn area_of(&self, unit: usize) -> usize {
        self.area[unit]
    }

    pub fn units_in_area(&self, j: usize) -> &[usize] {
        &self.units_by_area[j]
    }

    /// Per-area population counts N_j.
    pub fn population_sizes(&self) -> Vec<usize> {
        self.units_by_area.iter().map(Vec::len).collect()
    }

    /// Per-area sample counts n_j.
    pub fn sample_sizes(&self) -> Vec<usize> {
        let mut n = vec![0usize; self.n_areas()];
        for (i, &s) in self.in_sample.iter().enumerate() {
            if s {
                n[self.area[i]] += 1;
            }
        }
        n
    }

    pub fn covariates(&self, unit: usize) -> &[f64] {
        &self.x[unit * self.p..(unit + 1) * self.p]
    }

    pub fn treatment(&self, unit: usize) -> f64 {
        self.w[unit] as f64
    }

    pub fn is_treated(&self, unit: usize) -> bool {
        self.w[unit] == 1
    }

    pub fn outcome(&self, unit: usize) -> Option<f64> {
        self.y[unit]
    }

    pub fn is_sampled(&self, unit: usize) -> bool {
        self.in_sample[unit]
    }

    /// A copy with new sample membership (used by the bootstrap resamplers).
    pub fn with_sample_mask(&self, in_sample: Vec<bool>) -> Result<Self> {
        let mut f = self.clone();
        if in_sample.len() != f.n_units() {
            return Err(Error::Validation("sample mask length mismatch".into()));
        }
        f.in_sample = in_sample;
        Ok(f)
    }

    /// A copy with replaced outcomes and treatment (bootstrap populations).
    pub fn with_outcomes_and_treatment(&self, y: Vec<f64>, w: Vec<u8>) -> Result<Self> {
        if y.len() != self.n_units() || w.len() != self.n_units() {
            return Err(Error::Validation("replacement column length mismatch".into()));
        }
        let mut f = self.clone();
        f.y = y.into_iter().map(Some).collect();
        f.w = w;
        Ok(f)
    }

    pub fn sample_view(&self) -> SampleView<'_> {
        SampleView::new(self)
    }
}

/// The in-sample subset of a frame, indexed by area.
#[derive(Debug, Clone)]
pub struct SampleView<'a> {
    frame: &'a PopulationFrame,
    by_area: Vec<Vec<usize>>,
    n: usize,
}

impl<'a> SampleView<'a> {
    pub fn new(frame: &'a PopulationFrame) -> Self {
        let mut by_area = vec![Vec::new(); frame.n_areas()];
        let mut n = 0;
        for j in 0..frame.n_areas() {
            for &i in frame.units_in_area(j) {
                if frame.is_sampled(i) {
                    by_area[j].push(i);
                    n += 1;
                }
            }
        }
        SampleView { frame, by_area, n }
    }

    pub fn frame(&self) -> &'a PopulationFrame {
        self.frame
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_areas(&self) -> usize {
        self.by_area.len()
    }

    pub fn units_in_area(&self, j: usize) -> &[usize] {
        &self.by_area[j]
    }

    /// All sampled unit indices in area order.
    pub fn units(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_area.iter().flatten().copied()
    }

    /// Outcome of a sampled unit (guaranteed present by frame invariants).
    pub fn outcome(&self, unit: usize) -> f64 {
        self.frame
            .outcome(unit)
            .expect("sampled unit has an outcome by construction")
    }
}

/// Load a population from a CSV file. See [`Schema`] for column mapping.
pub fn load_population(path: impl AsRef<Path>, schema: &Schema) -> Result<PopulationFrame> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema {
                column: name.to_string(),
            })
    };

    let area_col = col(&schema.area)?;
    let w_col = col(&schema.w)?;
    let y_col = col(&schema.y)?;
    let x_names: Vec<String> = if schema.x.is_empty() {
        // Autodetect x1, x2, ... in numeric order.
        let mut xs = Vec::new();
        for k in 1.. {
            let name = format!("x{k}");
            if headers.iter().any(|h| *h == name) {
                xs.push(name);
            } else {
                break;
            }
        }
        xs
    } else {
        schema.x.clone()
    };
    let x_cols: Vec<usize> = x_names
        .iter()
        .map(|n| col(n))
        .collect::<Result<Vec<_>>>()?;
    let in_sample_col = match &schema.in_sample {
        Some(name) if headers.iter().any(|h| h == name) => Some(col(name)?),
        Some(name) if name == "in_sample" => None, // default name, tolerate absence
        Some(name) => {
            return Err(Error::Schema {
                column: name.clone(),
            })
        }
        None => None,
    };

    let p = x_cols.len();
    let mut area_labels = Vec::new();
    let mut x = Vec::new();
    let mut w = Vec::new();
    let mut y = Vec::new();
    let mut in_sample = Vec::new();

    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 1; // 1-based data row for error messages
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("");

        area_labels.push(field(area_col).to_string());
        for &c in &x_cols {
            let v: f64 = field(c).parse().map_err(|_| Error::Parse {
                row,
                message: format!("covariate '{}' is not a number: '{}'", headers[c], field(c)),
            })?;
            x.push(v);
        }
        let w_val = match field(w_col) {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(Error::Parse {
                    row,
                    message: format!("treatment column must be 0 or 1, found '{other}'"),
                })
            }
        };
        w.push(w_val);
        let y_val = match field(y_col) {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|_| Error::Parse {
                row,
                message: format!("outcome is not a number: '{s}'"),
            })?),
        };
        y.push(y_val);
        let sampled = match in_sample_col {
            Some(c) => match field(c) {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse {
                        row,
                        message: format!("in_sample column must be 0 or 1, found '{other}'"),
                    })
                }
            },
            None => y_val.is_some(),
        };
        in_sample.push(sampled);
    }

    PopulationFrame::from_parts(area_labels, x, p, w, y, in_sample)
}

/// Draw a within-area simple random sample without replacement.
///
/// Returns a copy of `pop` with `in_sample` set for exactly `sizes[j]` units
/// in area j. Sampling ignores treatment status. Each area draws from the
/// substream `(seed, j)`, so the result does not depend on area order or on
/// any parallel execution of the caller.
pub fn draw_sample(pop: &PopulationFrame, sizes: &[usize], seed: u64) -> Result<PopulationFrame> {
    if sizes.len() != pop.n_areas() {
        return Err(Error::Bounds(format!(
            "expected {} per-area sizes, got {}",
            pop.n_areas(),
            sizes.len()
        )));
    }
    let mut in_sample = vec![false; pop.n_units()];
    for (j, &size) in sizes.iter().enumerate() {
        let units = pop.units_in_area(j);
        if size > units.len() {
            return Err(Error::Bounds(format!(
                "area '{}': requested {} of {} units",
                pop.area_label(j),
                size,
                units.len()
            )));
        }
        let mut rng = substream(seed, &[j as u64]);
        let mut pool: Vec<usize> = units.to_vec();
        pool.shuffle(&mut rng);
        for &i in pool.iter().take(size) {
            in_sample[i] = true;
        }
    }
    let mut out = pop.clone();
    out.in_sample = in_sample;
    Ok(out)
}

/// One finding from [`validate_frame`].
#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    /// Area has no treated units in the population, so K_j degenerates.
    NoTreatedInPopulation { area: String },
    /// Area has no control units in the population, so T_j degenerates.
    NoControlInPopulation { area: String },
    /// A sampled unit is missing its outcome (0-based unit index).
    SampledOutcomeMissing { unit: usize },
    /// A covariate is NaN or infinite (0-based unit index).
    NonFiniteCovariate { unit: usize, column: usize },
    /// An outcome is NaN or infinite.
    NonFiniteOutcome { unit: usize },
}

/// Advisory report; an empty `issues` list means the frame is clean.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Scan a frame for degenerate areas and non-finite values. Never fails;
/// the report is advisory and callers decide what is fatal.
pub fn validate_frame(pop: &PopulationFrame) -> ValidationReport {
    let mut issues = Vec::new();
    for j in 0..pop.n_areas() {
        let units = pop.units_in_area(j);
        if !units.iter().any(|&i| pop.is_treated(i)) {
            issues.push(ValidationIssue::NoTreatedInPopulation {
                area: pop.area_label(j).to_string(),
            });
        }
        if units.iter().all(|&i| pop.is_treated(i)) {
            issues.push(ValidationIssue::NoControlInPopulation {
                area: pop.area_label(j).to_string(),
            });
        }
    }
    for i in 0..pop.n_units() {
        for (c, v) in pop.covariates(i).iter().enumerate() {
            if !v.is_finite() {
                issues.push(ValidationIssue::NonFiniteCovariate { unit: i, column: c });
            }
        }
        match pop.outcome(i) {
            Some(y) if !y.is_finite() => issues.push(ValidationIssue::NonFiniteOutcome { unit: i }),
            None if pop.is_sampled(i) => {
                issues.push(ValidationIssue::SampledOutcomeMissing { unit: i })
            }
            _ => {}
        }
    }
    ValidationReport { issues }
}

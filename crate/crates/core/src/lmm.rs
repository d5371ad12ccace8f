//! Random-slope linear mixed model for the outcome:
//! `y_ij = (1, x_ij, w_ij)' beta + w_ij * gamma_j + u_j + eps_ij`,
//! with independent area slopes `gamma_j ~ N(0, s2_gamma)`, area intercepts
//! `u_j ~ N(0, s2_u)`, and unit errors `eps_ij ~ N(0, s2_eps)`.
//!
//! Variance components are estimated by REML (ML behind a flag), maximised
//! over log variances with a simplex search and polished with Fisher
//! scoring. The marginal covariance V is block diagonal over areas, and each
//! block has a rank-2 random-effect structure, so all likelihood, BLUP and
//! information quantities are computed per area through the Woodbury
//! identity. The dense n x n formulation exists only in the test oracles.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::design::{outcome_design, outcome_row};
use crate::error::{Error, Result};
use crate::frames::{PopulationFrame, SampleView};
use crate::numeric::nelder_mead;

/// Variance components `(s2_gamma, s2_u, s2_eps)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComponents {
    pub sigma2_gamma: f64,
    pub sigma2_u: f64,
    pub sigma2_eps: f64,
}

impl VarianceComponents {
    pub fn new(sigma2_gamma: f64, sigma2_u: f64, sigma2_eps: f64) -> Self {
        VarianceComponents {
            sigma2_gamma,
            sigma2_u,
            sigma2_eps,
        }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.sigma2_gamma, self.sigma2_u, self.sigma2_eps]
    }

    fn from_array(a: [f64; 3]) -> Self {
        VarianceComponents::new(a[0], a[1], a[2])
    }
}

/// Fitting options. REML is the default; `reml = false` switches to ML.
#[derive(Debug, Clone)]
pub struct LmmOptions {
    pub reml: bool,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub param_tol: f64,
}

impl Default for LmmOptions {
    fn default() -> Self {
        LmmOptions {
            reml: true,
            max_iter: 500,
            rel_tol: 1e-10,
            param_tol: 1e-8,
        }
    }
}

/// Absolute threshold under which a variance component counts as pinned to
/// the zero boundary.
const BOUNDARY_TOL: f64 = 1e-10;

/// A fitted mixed model.
#[derive(Debug, Clone)]
pub struct LmmFit {
    /// Fixed effects for the full design `(1, x, w)`. When the sample has no
    /// treatment variation the `w` coefficient is 0 and
    /// `treatment_identified` is false.
    pub beta: DVector<f64>,
    pub theta: VarianceComponents,
    /// Predicted random slopes per area (0 for areas absent from the sample).
    pub gamma_hat: Vec<f64>,
    /// Predicted random intercepts per area.
    pub u_hat: Vec<f64>,
    /// Expected information of the variance components at the optimum.
    pub fisher: DMatrix<f64>,
    pub fisher_singular: bool,
    pub converged: bool,
    /// Per-component boundary flags for `(s2_gamma, s2_u, s2_eps)`.
    pub boundary: [bool; 3],
    /// False when the sample cannot identify the treatment effect.
    pub treatment_identified: bool,
    /// Criterion (restricted or full log likelihood, up to a constant).
    pub criterion: f64,
    /// Whether each area contributed sampled units to the fit.
    pub area_in_sample: Vec<bool>,
    pub reml: bool,
}

impl LmmFit {
    pub fn any_boundary(&self) -> bool {
        self.boundary.iter().any(|&b| b)
    }
}

// ---------------------------------------------------------------------------
// Per-area blocks with data-only precomputations.

struct Block {
    area: usize,
    x: DMatrix<f64>, // n_j x k design (may exclude the treatment column)
    w: DVector<f64>,
    y: DVector<f64>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    utx: DMatrix<f64>,  // 2 x k: rows (w'X, 1'X)
    uty: Vector2<f64>,  // (w'y, 1'y)
    utu: Matrix2<f64>,  // [[w'w, w'1], [1'w, n_j]]
    yty: f64,
}

struct Blocks {
    k: usize,
    blocks: Vec<Block>,
    /// True when the fitted design includes the treatment column.
    treatment_in_design: bool,
    /// True when s2_gamma is estimable from this sample.
    gamma_estimable: bool,
    n_areas: usize,
}

fn build_blocks(sample: &SampleView) -> Result<Blocks> {
    let pop = sample.frame();
    if sample.n() == 0 {
        return Err(Error::Contract("empty sample".into()));
    }
    let mut any_treated = false;
    let mut any_control = false;
    for i in sample.units() {
        if pop.is_treated(i) {
            any_treated = true;
        } else {
            any_control = true;
        }
    }
    let treatment_in_design = any_treated && any_control;
    let gamma_estimable = treatment_in_design;

    let full_k = pop.n_covariates() + 2;
    let k = if treatment_in_design { full_k } else { full_k - 1 };
    let mut blocks = Vec::new();
    for j in 0..pop.n_areas() {
        let units = sample.units_in_area(j);
        if units.is_empty() {
            continue;
        }
        let x_full = outcome_design(pop, units);
        let x = if treatment_in_design {
            x_full.clone()
        } else {
            x_full.columns(0, k).into_owned()
        };
        let w = DVector::from_iterator(units.len(), units.iter().map(|&i| pop.treatment(i)));
        let y = DVector::from_iterator(units.len(), units.iter().map(|&i| sample.outcome(i)));
        let ones = DVector::from_element(units.len(), 1.0);
        let utx = DMatrix::from_rows(&[
            (w.transpose() * &x).row(0).into_owned(),
            (ones.transpose() * &x).row(0).into_owned(),
        ]);
        let uty = Vector2::new(w.dot(&y), y.sum());
        let utu = Matrix2::new(w.dot(&w), w.sum(), w.sum(), units.len() as f64);
        blocks.push(Block {
            area: j,
            xtx: x.transpose() * &x,
            xty: x.transpose() * &y,
            utx,
            uty,
            utu,
            yty: y.dot(&y),
            x,
            w,
            y,
        });
    }
    Ok(Blocks {
        k,
        blocks,
        treatment_in_design,
        gamma_estimable,
        n_areas: pop.n_areas(),
    })
}

/// Woodbury core for one block at fixed theta:
/// `V^{-1} = (I - U T U') / s2_eps` with `T = G^{1/2} C^{-1} G^{1/2}`,
/// `C = s2_eps I + G^{1/2} U'U G^{1/2}`, `U = [w 1]`, `G = diag(sg, su)`.
struct Core {
    t: Matrix2<f64>,
    logdet_v: f64,
}

fn core(block: &Block, theta: &VarianceComponents) -> Option<Core> {
    let se = theta.sigma2_eps;
    if !(se > 0.0) || !theta.sigma2_gamma.is_finite() || !theta.sigma2_u.is_finite() {
        return None;
    }
    let g_half = Matrix2::new(theta.sigma2_gamma.sqrt(), 0.0, 0.0, theta.sigma2_u.sqrt());
    let c = Matrix2::identity() * se + g_half * block.utu * g_half;
    let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
    if !(det > 0.0) {
        return None;
    }
    let c_inv = Matrix2::new(c[(1, 1)], -c[(0, 1)], -c[(1, 0)], c[(0, 0)]) / det;
    let t = g_half * c_inv * g_half;
    let n_j = block.y.len() as f64;
    let logdet_v = (n_j - 2.0) * se.ln() + det.ln();
    Some(Core { t, logdet_v })
}

/// Likelihood pieces at a given theta.
struct Eval {
    loglik: f64,
    beta: DVector<f64>,
    a: DMatrix<f64>,
}

impl Blocks {
    fn evaluate(&self, theta: &VarianceComponents, reml: bool) -> Result<Eval> {
        let se = theta.sigma2_eps;
        let k = self.k;
        let mut a = DMatrix::zeros(k, k);
        let mut b = DVector::zeros(k);
        let mut ytvy = 0.0;
        let mut logdet_v = 0.0;
        for block in &self.blocks {
            let core = core(block, theta).ok_or_else(|| {
                Error::Degenerate(format!(
                    "variance components not admissible: {:?}",
                    theta.as_array()
                ))
            })?;
            logdet_v += core.logdet_v;
            // X'V^{-1}X = (X'X - (U'X)' T (U'X)) / s2_eps, and similarly for
            // the other cross products.
            a += (&block.xtx - block.utx.transpose() * core.t * &block.utx) / se;
            b += (&block.xty - block.utx.transpose() * (core.t * block.uty)) / se;
            ytvy += (block.yty - (core.t * block.uty).dot(&block.uty)) / se;
        }
        let chol = a.clone().cholesky().ok_or_else(|| {
            Error::Rank("X'V^{-1}X is singular; the fixed design is rank deficient".into())
        })?;
        let beta = chol.solve(&b);
        let logdet_a = 2.0 * (0..k).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
        let quad = ytvy - b.dot(&beta);
        let mut loglik = -0.5 * (logdet_v + quad);
        if reml {
            loglik -= 0.5 * logdet_a;
        }
        if !loglik.is_finite() {
            return Err(Error::Degenerate("non-finite likelihood".into()));
        }
        Ok(Eval { loglik, beta, a })
    }

    /// REML score and expected information at theta, all blockwise.
    ///
    /// Returns `(score, info)` over `(s2_gamma, s2_u, s2_eps)`.
    fn score_and_information(
        &self,
        theta: &VarianceComponents,
        beta: &DVector<f64>,
        a_inv: &DMatrix<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let se = theta.sigma2_eps;
        let k = self.k;
        // Accumulators: tr(V^{-1} dV_s), E_s = X'V^{-1} dV_s V^{-1} X,
        // r'P dV_s P r pieces, tr(M_s M_t), and the mixed trace terms.
        let mut tr_vinv_dv = [0.0f64; 3];
        let mut e: Vec<DMatrix<f64>> = (0..3).map(|_| DMatrix::zeros(k, k)).collect();
        let mut quad = [0.0f64; 3];
        let mut tr_mm = [[0.0f64; 3]; 3];
        // f2[t][s] accumulates C_t' M_s R with R = V^{-1}X, C_t = dV_t V^{-1} X.
        let mut f2: Vec<Vec<DMatrix<f64>>> = (0..3)
            .map(|_| (0..3).map(|_| DMatrix::zeros(k, k)).collect())
            .collect();

        for block in &self.blocks {
            let core = core(block, theta).expect("admissible theta at optimum");
            let vinv = |m: &DMatrix<f64>| -> DMatrix<f64> {
                let u = u_matrix(block);
                (m - &u * (core.t * (u.transpose() * m))) / se
            };
            let u = u_matrix(block);
            let vinv_vec = |v: &DVector<f64>| -> DVector<f64> {
                (v - &u * (core.t * (u.transpose() * v))) / se
            };
            let rx = vinv(&block.x); // V^{-1} X
            let p1 = vinv_vec(&block.w); // V^{-1} w
            let ones = DVector::from_element(block.y.len(), 1.0);
            let p2 = vinv_vec(&ones); // V^{-1} 1
            let r = &block.y - &block.x * beta;
            let v = vinv_vec(&r); // V^{-1} r

            let ww = block.w.dot(&p1); // w'V^{-1}w
            let w1 = block.w.dot(&p2); // w'V^{-1}1
            let oo = ones.dot(&p2); // 1'V^{-1}1
            let kw = block.w.dot(&v); // w'V^{-1}r
            let k1 = ones.dot(&v);

            tr_vinv_dv[0] += ww;
            tr_vinv_dv[1] += oo;
            // tr(V^{-1}) via the Woodbury core.
            let n_j = block.y.len() as f64;
            let tr_vinv = (n_j - (core.t * block.utu).trace()) / se;
            tr_vinv_dv[2] += tr_vinv;

            let s_g = block.w.transpose() * &rx; // 1 x k
            let s_u = ones.transpose() * &rx;
            e[0] += s_g.transpose() * &s_g;
            e[1] += s_u.transpose() * &s_u;
            e[2] += rx.transpose() * &rx;

            quad[0] += kw * kw;
            quad[1] += k1 * k1;
            quad[2] += v.dot(&v);

            // tr(M_s M_t) for the six unordered pairs.
            tr_mm[0][0] += ww * ww;
            tr_mm[0][1] += w1 * w1;
            tr_mm[1][1] += oo * oo;
            tr_mm[0][2] += p1.dot(&p1);
            tr_mm[1][2] += p2.dot(&p2);
            // tr(V^{-2}) from 2x2 quantities.
            let tu = core.t * block.utu;
            let tr_v2 = (n_j - 2.0 * tu.trace() + (tu * tu).trace()) / (se * se);
            tr_mm[2][2] += tr_v2;

            // Mixed terms C_t' M_s R.
            let qx = vinv(&rx); // V^{-2} X
            let q1 = vinv_vec(&p1);
            let q2 = vinv_vec(&p2);
            let rxt_p1 = rx.transpose() * &p1; // k-vector
            let rxt_p2 = rx.transpose() * &p2;
            for s in 0..3 {
                for t in 0..3 {
                    // C_t' M_s R with
                    //   C_g = w s_g, C_u = 1 s_u, C_e = R X
                    //   M_g = p1 w', M_u = p2 1', M_e = V^{-1}
                    let val: DMatrix<f64> = match (t, s) {
                        (0, 0) => s_g.transpose() * (block.w.dot(&p1) * &s_g),
                        (0, 1) => s_g.transpose() * (block.w.dot(&p2) * &s_u),
                        (0, 2) => s_g.transpose() * (p1.transpose() * &rx),
                        (1, 0) => s_u.transpose() * (ones.dot(&p1) * &s_g),
                        (1, 1) => s_u.transpose() * (ones.dot(&p2) * &s_u),
                        (1, 2) => s_u.transpose() * (p2.transpose() * &rx),
                        (2, 0) => rxt_p1.clone() * &s_g,
                        (2, 1) => rxt_p2.clone() * &s_u,
                        (2, 2) => rx.transpose() * &qx,
                        _ => unreachable!(),
                    };
                    f2[t][s] += val;
                }
            }
            // Unused but cheap sanity anchors for the ML case.
            let _ = (q1, q2);
        }
        tr_mm[1][0] = tr_mm[0][1];
        tr_mm[2][0] = tr_mm[0][2];
        tr_mm[2][1] = tr_mm[1][2];

        // tr(P dV_s) = tr(V^{-1} dV_s) - tr(A^{-1} E_s).
        let mut score = DVector::zeros(3);
        for s in 0..3 {
            let tr_p_dv = tr_vinv_dv[s] - (a_inv * &e[s]).trace();
            score[s] = -0.5 * (tr_p_dv - quad[s]);
        }
        // I_st = 0.5 [ tr(M_s M_t) - tr(A^{-1} C_t'M_s R) - tr(A^{-1} C_s'M_t R)
        //              + tr(A^{-1} E_s A^{-1} E_t) ].
        let mut info = DMatrix::zeros(3, 3);
        for s in 0..3 {
            for t in 0..3 {
                let term2 = (a_inv * &f2[t][s]).trace();
                let term3 = (a_inv * &f2[s][t]).trace();
                let term4 = (a_inv * &e[s] * a_inv * &e[t]).trace();
                info[(s, t)] = 0.5 * (tr_mm[s][t] - term2 - term3 + term4);
            }
        }
        (score, info)
    }
}

fn u_matrix(block: &Block) -> DMatrix<f64> {
    let n_j = block.y.len();
    let mut u = DMatrix::zeros(n_j, 2);
    for i in 0..n_j {
        u[(i, 0)] = block.w[i];
        u[(i, 1)] = 1.0;
    }
    u
}

// ---------------------------------------------------------------------------
// Public operations.

/// Restricted (or full, with `reml = false`) log likelihood at `theta`, up
/// to an additive constant.
pub fn restricted_loglik(
    theta: &VarianceComponents,
    sample: &SampleView,
    opts: &LmmOptions,
) -> Result<f64> {
    if theta.sigma2_gamma < 0.0 || theta.sigma2_u < 0.0 || !(theta.sigma2_eps > 0.0) {
        return Err(Error::Contract(
            "variance components must be nonnegative with positive residual variance".into(),
        ));
    }
    let blocks = build_blocks(sample)?;
    Ok(blocks.evaluate(theta, opts.reml)?.loglik)
}

/// Fit the mixed model by REML (or ML).
pub fn fit_reml(sample: &SampleView, opts: &LmmOptions) -> Result<LmmFit> {
    let blocks = build_blocks(sample)?;
    let pop = sample.frame();

    // OLS pre-fit for starting values.
    let s2_start = ols_residual_variance(&blocks)?;
    let eps_floor = 1e-12 * s2_start.max(1.0);
    let start = [0.1 * s2_start.max(eps_floor), 0.1 * s2_start.max(eps_floor), s2_start.max(eps_floor)];

    // Free components: s2_gamma only when estimable.
    let free: Vec<usize> = if blocks.gamma_estimable {
        vec![0, 1, 2]
    } else {
        vec![1, 2]
    };

    let theta_of = |z: &[f64]| -> VarianceComponents {
        let mut th = [0.0, 0.0, eps_floor];
        for (slot, &zi) in free.iter().zip(z) {
            th[*slot] = zi.clamp(-700.0, 700.0).exp();
        }
        th[2] = th[2].max(eps_floor);
        VarianceComponents::from_array(th)
    };

    // Simplex stage on log variances.
    let z0: Vec<f64> = free.iter().map(|&s| start[s].ln()).collect();
    let objective = |z: &[f64]| -> f64 {
        match blocks.evaluate(&theta_of(z), opts.reml) {
            Ok(e) => -e.loglik,
            Err(_) => f64::INFINITY,
        }
    };
    let budget = opts.max_iter.saturating_mul(4).max(400);
    let (z_best, _, simplex_converged) = nelder_mead(objective, &z0, 0.7, 1e-12, budget);
    let mut theta = theta_of(&z_best);
    let mut eval = blocks.evaluate(&theta, opts.reml)?;

    // Fisher-scoring polish with step halving, projected onto the
    // nonnegative orthant. Components sitting on the zero boundary stay
    // there when the score points outward; a failed first step simply
    // keeps the simplex optimum.
    let mut polished = false;
    for _ in 0..60 {
        let a_inv = invert_spd(&eval.a)?;
        let (score, info) = blocks.score_and_information(&theta, &eval.beta, &a_inv);
        let (score_f, info_f) = restrict(&score, &info, &free);
        let step_f = match info_f.clone().cholesky() {
            Some(ch) => ch.solve(&score_f),
            None => break, // singular information: accept the simplex optimum
        };
        let mut improved = false;
        let mut t_step = 1.0;
        for _ in 0..30 {
            let mut cand = theta.as_array();
            for (idx, &slot) in free.iter().enumerate() {
                cand[slot] = (cand[slot] + t_step * step_f[idx]).max(0.0);
            }
            cand[2] = cand[2].max(eps_floor);
            let cand = VarianceComponents::from_array(cand);
            if let Ok(e) = blocks.evaluate(&cand, opts.reml) {
                if e.loglik > eval.loglik + 1e-15 * (1.0 + eval.loglik.abs()) {
                    let df = (e.loglik - eval.loglik).abs();
                    let dp = free
                        .iter()
                        .map(|&s| (cand.as_array()[s] - theta.as_array()[s]).abs())
                        .fold(0.0f64, f64::max);
                    theta = cand;
                    eval = e;
                    improved = true;
                    if df < opts.rel_tol * (1.0 + eval.loglik.abs()) && dp < opts.param_tol {
                        polished = true;
                    }
                    break;
                }
            }
            t_step *= 0.5;
        }
        if !improved || polished {
            break;
        }
    }
    if !simplex_converged && !polished {
        // Direct optimality check before declaring failure: probe small
        // log-space perturbations of every free component. Near-degenerate
        // data can stall the simplex while the iterate is already optimal
        // to working precision.
        let mut improvable = false;
        for &slot in &free {
            for step in [1e-4, -1e-4, 1e-2, -1e-2] {
                let mut cand = theta.as_array();
                cand[slot] = (cand[slot].max(eps_floor) * f64::exp(step)).max(0.0);
                cand[2] = cand[2].max(eps_floor);
                if let Ok(e) = blocks.evaluate(&VarianceComponents::from_array(cand), opts.reml) {
                    if e.loglik > eval.loglik + 1e-7 * (1.0 + eval.loglik.abs()) {
                        improvable = true;
                    }
                }
            }
        }
        if improvable {
            return Err(Error::Convergence {
                context: "fit_reml".into(),
                iterations: opts.max_iter,
                best: theta.as_array().to_vec(),
            });
        }
    }

    // Pin boundary estimates to exact zero (residual variance to its floor).
    let mut th = theta.as_array();
    let mut boundary = [false; 3];
    for s in 0..2 {
        if th[s] < BOUNDARY_TOL {
            th[s] = 0.0;
            boundary[s] = true;
        }
    }
    if th[2] <= eps_floor * 1.01 || th[2] < BOUNDARY_TOL {
        th[2] = eps_floor.max(th[2]);
        boundary[2] = true;
    }
    if !blocks.gamma_estimable {
        boundary[0] = true;
    }
    let theta = VarianceComponents::from_array(th);
    let eval = blocks.evaluate(&theta, opts.reml)?;

    // BLUPs at the estimated theta.
    let mut gamma_hat = vec![0.0; blocks.n_areas];
    let mut u_hat = vec![0.0; blocks.n_areas];
    let mut area_in_sample = vec![false; blocks.n_areas];
    for block in &blocks.blocks {
        let core = core(block, &theta).expect("admissible theta");
        let u = u_matrix(block);
        let r = &block.y - &block.x * &eval.beta;
        let vr = (&r - &u * (core.t * (u.transpose() * &r))) / theta.sigma2_eps;
        gamma_hat[block.area] = theta.sigma2_gamma * block.w.dot(&vr);
        u_hat[block.area] = theta.sigma2_u * vr.sum();
        area_in_sample[block.area] = true;
    }

    let a_inv = invert_spd(&eval.a)?;
    let (_, fisher) = blocks.score_and_information(&theta, &eval.beta, &a_inv);
    let fisher_singular = is_singular(&fisher);

    // Expand beta to the full design when the treatment column was dropped.
    let full_k = pop.n_covariates() + 2;
    let beta = if blocks.treatment_in_design {
        eval.beta.clone()
    } else {
        let mut b = DVector::zeros(full_k);
        for i in 0..blocks.k {
            b[i] = eval.beta[i];
        }
        b
    };

    Ok(LmmFit {
        beta,
        theta,
        gamma_hat,
        u_hat,
        fisher,
        fisher_singular,
        converged: true,
        boundary,
        treatment_identified: blocks.treatment_in_design,
        criterion: eval.loglik,
        area_in_sample,
        reml: opts.reml,
    })
}

fn restrict(
    score: &DVector<f64>,
    info: &DMatrix<f64>,
    free: &[usize],
) -> (DVector<f64>, DMatrix<f64>) {
    let d = free.len();
    let mut s = DVector::zeros(d);
    let mut i = DMatrix::zeros(d, d);
    for (a, &fa) in free.iter().enumerate() {
        s[a] = score[fa];
        for (b, &fb) in free.iter().enumerate() {
            i[(a, b)] = info[(fa, fb)];
        }
    }
    (s, i)
}

fn invert_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Rank("X'V^{-1}X is singular".into()))
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    !(max > 0.0) || min / max < 1e-10
}

fn ols_residual_variance(blocks: &Blocks) -> Result<f64> {
    let k = blocks.k;
    let mut xtx = DMatrix::zeros(k, k);
    let mut xty = DVector::zeros(k);
    let mut yty = 0.0;
    let mut n = 0usize;
    for b in &blocks.blocks {
        xtx += &b.xtx;
        xty += &b.xty;
        yty += b.yty;
        n += b.y.len();
    }
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Rank("fixed design is rank deficient on the sample".into()))?;
    let beta = chol.solve(&xty);
    let rss = (yty - xty.dot(&beta)).max(0.0);
    let df = n.saturating_sub(k).max(1);
    Ok((rss / df as f64).max(0.0))
}

/// Plug-in predictions for every population unit:
/// `yhat = (1, x, w)' beta + w * gamma_hat_j + u_hat_j`.
///
/// Areas absent from the fit predict with zero random effects; their indices
/// are returned as `synthetic_areas`.
pub fn predict_outcomes(fit: &LmmFit, pop: &PopulationFrame) -> (Vec<f64>, Vec<usize>) {
    let mut yhat = vec![0.0; pop.n_units()];
    let mut synthetic = Vec::new();
    for j in 0..pop.n_areas() {
        let in_fit = fit.area_in_sample.get(j).copied().unwrap_or(false);
        if !in_fit {
            synthetic.push(j);
        }
        let (g, u) = if in_fit {
            (fit.gamma_hat[j], fit.u_hat[j])
        } else {
            (0.0, 0.0)
        };
        for &i in pop.units_in_area(j) {
            let w = pop.treatment(i);
            let row = outcome_row(pop, i, w);
            yhat[i] = row.dot(&fit.beta) + w * g + u;
        }
    }
    (yhat, synthetic)
}

/// GLS fit and BLUPs at externally fixed variance components (no variance
/// estimation). Useful when the covariance structure is known and as an
/// oracle in diagnostics.
pub fn fit_at_theta(
    sample: &SampleView,
    theta: &VarianceComponents,
    opts: &LmmOptions,
) -> Result<LmmFit> {
    let blocks = build_blocks(sample)?;
    let pop_k = sample.frame().n_covariates() + 2;
    let eval = blocks.evaluate(theta, opts.reml)?;
    let mut gamma_hat = vec![0.0; blocks.n_areas];
    let mut u_hat = vec![0.0; blocks.n_areas];
    let mut area_in_sample = vec![false; blocks.n_areas];
    for block in &blocks.blocks {
        let core = core(block, theta).expect("admissible theta");
        let u = u_matrix(block);
        let r = &block.y - &block.x * &eval.beta;
        let vr = (&r - &u * (core.t * (u.transpose() * &r))) / theta.sigma2_eps;
        gamma_hat[block.area] = theta.sigma2_gamma * block.w.dot(&vr);
        u_hat[block.area] = theta.sigma2_u * vr.sum();
        area_in_sample[block.area] = true;
    }
    let a_inv = invert_spd(&eval.a)?;
    let (_, fisher) = blocks.score_and_information(theta, &eval.beta, &a_inv);
    let fisher_singular = is_singular(&fisher);
    let beta = if blocks.treatment_in_design {
        eval.beta.clone()
    } else {
        let mut b = DVector::zeros(pop_k);
        for i in 0..blocks.k {
            b[i] = eval.beta[i];
        }
        b
    };
    Ok(LmmFit {
        beta,
        theta: *theta,
        gamma_hat,
        u_hat,
        fisher,
        fisher_singular,
        converged: true,
        boundary: [
            theta.sigma2_gamma == 0.0,
            theta.sigma2_u == 0.0,
            false,
        ],
        treatment_identified: blocks.treatment_in_design,
        criterion: eval.loglik,
        area_in_sample,
        reml: opts.reml,
    })
}

/// Expected information of the variance components at `theta`, with a
/// singularity flag. This recomputes from the sample so it can be evaluated
/// away from the fitted optimum.
pub fn fisher_information(
    sample: &SampleView,
    theta: &VarianceComponents,
    opts: &LmmOptions,
) -> Result<(DMatrix<f64>, bool)> {
    let blocks = build_blocks(sample)?;
    let eval = blocks.evaluate(theta, opts.reml)?;
    let a_inv = invert_spd(&eval.a)?;
    let (_, info) = blocks.score_and_information(theta, &eval.beta, &a_inv);
    let singular = is_singular(&info);
    Ok((info, singular))
}

/// REML score at `theta` (used by tests to cross-check the information).
pub fn reml_score(sample: &SampleView, theta: &VarianceComponents) -> Result<DVector<f64>> {
    let blocks = build_blocks(sample)?;
    let eval = blocks.evaluate(theta, true)?;
    let a_inv = invert_spd(&eval.a)?;
    let (score, _) = blocks.score_and_information(theta, &eval.beta, &a_inv);
    Ok(score)
}

// ---------------------------------------------------------------------------
// Support bundle consumed by the analytic MSE of the EBLUP-based estimator.

/// Per-area sample quantities at the fitted theta.
pub struct AreaSupport {
    /// `U' V^{-1} U` with `U = [w 1]` on the area's sampled units.
    pub f: Matrix2<f64>,
    /// `U' V^{-1} X` (2 x k).
    pub utvx: DMatrix<f64>,
    /// `w' V^{-1} r` with `r = y - X beta`.
    pub kappa_w: f64,
    /// `1' V^{-1} r`.
    pub kappa_1: f64,
    /// `w' V^{-2} r`.
    pub p1tv: f64,
    /// `1' V^{-2} r`.
    pub p2tv: f64,
}

/// Fit-level quantities shared by all per-area MSE computations.
pub struct MseSupport {
    pub k: usize,
    pub a_inv: DMatrix<f64>,
    pub fisher: DMatrix<f64>,
    pub fisher_pinv: DMatrix<f64>,
    pub fisher_singular: bool,
    /// Indexed by area; `None` for areas without sampled units.
    pub areas: Vec<Option<AreaSupport>>,
    pub treatment_in_design: bool,
}

pub fn mse_support(sample: &SampleView, fit: &LmmFit) -> Result<MseSupport> {
    let blocks = build_blocks(sample)?;
    let theta = &fit.theta;
    let eval = blocks.evaluate(theta, fit.reml)?;
    let a_inv = invert_spd(&eval.a)?;
    let beta_used = if blocks.treatment_in_design {
        fit.beta.clone()
    } else {
        fit.beta.rows(0, blocks.k).into_owned()
    };

    let mut areas: Vec<Option<AreaSupport>> = (0..blocks.n_areas).map(|_| None).collect();
    for block in &blocks.blocks {
        let core = core(block, theta).expect("admissible theta");
        let u = u_matrix(block);
        let se = theta.sigma2_eps;
        let vinv_vec = |v: &DVector<f64>| -> DVector<f64> {
            (v - &u * (core.t * (u.transpose() * v))) / se
        };
        let p1 = vinv_vec(&block.w);
        let ones = DVector::from_element(block.y.len(), 1.0);
        let p2 = vinv_vec(&ones);
        let f = Matrix2::new(
            block.w.dot(&p1),
            block.w.dot(&p2),
            ones.dot(&p1),
            ones.dot(&p2),
        );
        let mut utvx = DMatrix::zeros(2, blocks.k);
        for c in 0..blocks.k {
            let col = block.x.column(c).into_owned();
            let vc = vinv_vec(&col);
            utvx[(0, c)] = block.w.dot(&vc);
            utvx[(1, c)] = ones.dot(&vc);
        }
        let r = &block.y - &block.x * &beta_used;
        let v = vinv_vec(&r);
        areas[block.area] = Some(AreaSupport {
            f,
            utvx,
            kappa_w: block.w.dot(&v),
            kappa_1: ones.dot(&v),
            p1tv: p1.dot(&v),
            p2tv: p2.dot(&v),
        });
    }

    let (_, fisher) = blocks.score_and_information(theta, &eval.beta, &a_inv);
    let fisher_singular = is_singular(&fisher);
    let fisher_pinv = fisher
        .clone()
        .svd(true, true)
        .pseudo_inverse(1e-12 * fisher.amax().max(1e-300))
        .unwrap_or_else(|_| DMatrix::zeros(3, 3));
    Ok(MseSupport {
        k: blocks.k,
        a_inv,
        fisher,
        fisher_pinv,
        fisher_singular,
        areas,
        treatment_in_design: blocks.treatment_in_design,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::PopulationFrame;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn simulate(
        m: usize,
        n_j: usize,
        sg: f64,
        su: f64,
        se: f64,
        treated_share: f64,
        seed: u64,
    ) -> PopulationFrame {
        let mut rng = crate::rng::substream(seed, &[0]);
        let stdn = Normal::new(0.0, 1.0).unwrap();
        let n = m * n_j;
        let mut labels = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for j in 0..m {
            let u_j = su.sqrt() * stdn.sample(&mut rng);
            let g_j = sg.sqrt() * stdn.sample(&mut rng);
            for _ in 0..n_j {
                let xv: f64 = stdn.sample(&mut rng);
                let wv = if rng.random::<f64>() < treated_share { 1u8 } else { 0 };
                let eps = se.sqrt() * stdn.sample(&mut rng);
                let yv = 2.0 + 1.5 * xv + 3.0 * wv as f64 + wv as f64 * g_j + u_j + eps;
                labels.push(format!("a{j}"));
                x.push(xv);
                w.push(wv);
                y.push(Some(yv));
            }
        }
        PopulationFrame::from_parts(labels, x, 1, w, y, vec![true; n]).unwrap()
    }

    #[test]
    fn variance_collapse_matches_ols_restricted_likelihood() {
        let pop = simulate(3, 6, 0.5, 1.0, 2.0, 0.4, 11);
        let sample = pop.sample_view();
        let theta = VarianceComponents::new(0.0, 0.0, 2.3);
        let got = restricted_loglik(&theta, &sample, &LmmOptions::default()).unwrap();
        // Direct fixed-effects restricted likelihood with V = s2 I.
        let units: Vec<usize> = sample.units().collect();
        let x = outcome_design(&pop, &units);
        let y = DVector::from_iterator(units.len(), units.iter().map(|&i| sample.outcome(i)));
        let s2: f64 = 2.3;
        let n = units.len() as f64;
        let k = x.ncols() as f64;
        let xtx = x.transpose() * &x;
        let beta = xtx.clone().cholesky().unwrap().solve(&(x.transpose() * &y));
        let rss = (&y - &x * &beta).norm_squared();
        let logdet_a = xtx.cholesky().unwrap().l().diagonal().map(|d| d.ln()).sum() * 2.0;
        let want = -0.5 * ((n - k) * s2.ln() + logdet_a + rss / s2);
        assert!((got - want).abs() < 1e-8, "got {got}, want {want}");
    }

    #[test]
    fn translation_invariance_of_criterion() {
        let pop = simulate(4, 5, 0.5, 1.0, 2.0, 0.4, 12);
        let sample = pop.sample_view();
        let theta = VarianceComponents::new(0.4, 0.9, 1.7);
        let base = restricted_loglik(&theta, &sample, &LmmOptions::default()).unwrap();
        let shifted_y: Vec<Option<f64>> =
            (0..pop.n_units()).map(|i| pop.outcome(i).map(|v| v + 57.0)).collect();
        let labels: Vec<String> =
            (0..pop.n_units()).map(|i| pop.area_label(pop.area_of(i)).to_string()).collect();
        let x: Vec<f64> = (0..pop.n_units()).flat_map(|i| pop.covariates(i).to_vec()).collect();
        let w: Vec<u8> = (0..pop.n_units()).map(|i| pop.is_treated(i) as u8).collect();
        let shifted = PopulationFrame::from_parts(labels, x, 1, w, shifted_y, vec![true; pop.n_units()])
            .unwrap();
        let shifted_val =
            restricted_loglik(&theta, &shifted.sample_view(), &LmmOptions::default()).unwrap();
        assert!((base - shifted_val).abs() < 1e-7);
    }

    #[test]
    fn perfect_linear_outcome_hits_zero_boundary() {
        // y depends on the design only; all variances collapse.
        let n = 60;
        let labels: Vec<String> = (0..n).map(|i| format!("a{}", i % 5)).collect();
        let x: Vec<f64> = (0..n).map(|i| (i as f64) * 0.1).collect();
        let w: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        let y: Vec<Option<f64>> = (0..n)
            .map(|i| Some(1.0 + 2.0 * x[i] + 0.5 * w[i] as f64))
            .collect();
        let pop = PopulationFrame::from_parts(labels, x, 1, w, y, vec![true; n]).unwrap();
        let fit = fit_reml(&pop.sample_view(), &LmmOptions::default()).unwrap();
        assert!(fit.boundary.iter().all(|&b| b), "boundary = {:?}", fit.boundary);
        assert!(fit.theta.sigma2_gamma == 0.0 && fit.theta.sigma2_u == 0.0);
        assert!(fit.theta.sigma2_eps > 0.0);
    }

    #[test]
    fn balanced_random_intercept_matches_anova_closed_form() {
        // No treatment, no covariates: REML equals the one-way balanced
        // ANOVA estimator when the optimum is interior.
        let m = 50;
        let n_j = 20;
        let mut rng = crate::rng::substream(77, &[1]);
        let stdn = Normal::new(0.0, 1.0).unwrap();
        let mut labels = Vec::new();
        let mut y = Vec::new();
        for j in 0..m {
            let u_j = 3.0f64.sqrt() * stdn.sample(&mut rng);
            for _ in 0..n_j {
                labels.push(format!("a{j}"));
                y.push(Some(5.0 + u_j + 6.0f64.sqrt() * stdn.sample(&mut rng)));
            }
        }
        let n = m * n_j;
        let pop = PopulationFrame::from_parts(labels, vec![], 0, vec![0; n], y, vec![true; n])
            .unwrap();
        let sample = pop.sample_view();
        let fit = fit_reml(&sample, &LmmOptions::default()).unwrap();
        assert!(!fit.treatment_identified);

        // Closed-form balanced one-way ANOVA.
        let ys: Vec<f64> = sample.units().map(|i| sample.outcome(i)).collect();
        let grand = ys.iter().sum::<f64>() / ys.len() as f64;
        let mut ssw = 0.0;
        let mut ssb = 0.0;
        for j in 0..m {
            let area: Vec<f64> = sample.units_in_area(j).iter().map(|&i| sample.outcome(i)).collect();
            let mean = area.iter().sum::<f64>() / area.len() as f64;
            ssw += area.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            ssb += area.len() as f64 * (mean - grand).powi(2);
        }
        let s2_eps = ssw / ((m * n_j - m) as f64);
        let msb = ssb / ((m - 1) as f64);
        let s2_u = ((msb - s2_eps) / n_j as f64).max(0.0);
        assert!(
            (fit.theta.sigma2_eps - s2_eps).abs() < 1e-5 * s2_eps,
            "eps {} vs {}",
            fit.theta.sigma2_eps,
            s2_eps
        );
        assert!(
            (fit.theta.sigma2_u - s2_u).abs() < 1e-4 * s2_u.max(1.0),
            "u {} vs {}",
            fit.theta.sigma2_u,
            s2_u
        );
    }

    #[test]
    fn gls_residuals_orthogonal_to_design() {
        let pop = simulate(8, 7, 0.7, 1.2, 2.0, 0.35, 21);
        let sample = pop.sample_view();
        let fit = fit_reml(&sample, &LmmOptions::default()).unwrap();
        let blocks = build_blocks(&sample).unwrap();
        let eval = blocks.evaluate(&fit.theta, true).unwrap();
        let mut resid = DVector::zeros(blocks.k);
        for block in &blocks.blocks {
            let c = core(block, &fit.theta).unwrap();
            let u = u_matrix(block);
            let r = &block.y - &block.x * &eval.beta;
            let vr = (&r - &u * (c.t * (u.transpose() * &r))) / fit.theta.sigma2_eps;
            resid += block.x.transpose() * vr;
        }
        assert!(resid.amax() < 1e-8, "X'V^{{-1}}r = {resid:?}");
    }

    #[test]
    fn prediction_uses_plugin_formula() {
        let pop = simulate(3, 4, 0.5, 1.0, 2.0, 0.5, 31);
        let sample = pop.sample_view();
        let mut fit = fit_reml(&sample, &LmmOptions::default()).unwrap();
        // Hand-set parameters: prediction must reproduce the plug-in exactly.
        fit.beta = DVector::from_vec(vec![1.0, 2.0, 0.0]);
        fit.gamma_hat = vec![0.5, 0.0, 0.0];
        fit.u_hat = vec![-1.0, 0.0, 0.0];
        let (yhat, synthetic) = predict_outcomes(&fit, &pop);
        assert!(synthetic.is_empty());
        let unit = pop.units_in_area(0)[0];
        let x = pop.covariates(unit)[0];
        let w = pop.treatment(unit);
        let want = 1.0 + 2.0 * x + 0.0 * w + w * 0.5 - 1.0;
        assert!((yhat[unit] - want).abs() < 1e-12);
    }

    #[test]
    fn zero_random_effects_leave_fixed_part_only() {
        let pop = simulate(2, 5, 0.5, 1.0, 2.0, 0.4, 41);
        let sample = pop.sample_view();
        let mut fit = fit_reml(&sample, &LmmOptions::default()).unwrap();
        fit.gamma_hat = vec![0.0; 2];
        fit.u_hat = vec![0.0; 2];
        let (yhat, _) = predict_outcomes(&fit, &pop);
        for i in 0..pop.n_units() {
            if !pop.is_treated(i) {
                let row = outcome_row(&pop, i, 0.0);
                assert!((yhat[i] - row.dot(&fit.beta)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fisher_is_symmetric_and_flags_unidentified_gamma() {
        let pop = simulate(6, 6, 0.5, 1.0, 2.0, 0.4, 51);
        let sample = pop.sample_view();
        let fit = fit_reml(&sample, &LmmOptions::default()).unwrap();
        let (info, _) = fisher_information(&sample, &fit.theta, &LmmOptions::default()).unwrap();
        for s in 0..3 {
            for t in 0..3 {
                assert!((info[(s, t)] - info[(t, s)]).abs() < 1e-12);
            }
        }
        // All-control sample: the slope-variance direction carries no
        // information and the matrix is flagged singular.
        let pop0 = simulate(6, 6, 0.5, 1.0, 2.0, 0.0, 52);
        let sample0 = pop0.sample_view();
        let fit0 = fit_reml(&sample0, &LmmOptions::default()).unwrap();
        let (info0, singular) =
            fisher_information(&sample0, &fit0.theta, &LmmOptions::default()).unwrap();
        assert!(singular);
        assert!(info0.row(0).amax() < 1e-12);
    }

    #[test]
    fn scale_equivariance() {
        let pop = simulate(6, 8, 0.6, 1.1, 2.2, 0.4, 61);
        let sample = pop.sample_view();
        let fit = fit_reml(&sample, &LmmOptions::default()).unwrap();
        let c = 3.5;
        let scaled_y: Vec<Option<f64>> =
            (0..pop.n_units()).map(|i| pop.outcome(i).map(|v| c * v)).collect();
        let labels: Vec<String> =
            (0..pop.n_units()).map(|i| pop.area_label(pop.area_of(i)).to_string()).collect();
        let x: Vec<f64> = (0..pop.n_units()).flat_map(|i| pop.covariates(i).to_vec()).collect();
        let w: Vec<u8> = (0..pop.n_units()).map(|i| pop.is_treated(i) as u8).collect();
        let scaled =
            PopulationFrame::from_parts(labels, x, 1, w, scaled_y, vec![true; pop.n_units()])
                .unwrap();
        let fit_c = fit_reml(&scaled.sample_view(), &LmmOptions::default()).unwrap();
        for i in 0..fit.beta.len() {
            assert!((fit_c.beta[i] - c * fit.beta[i]).abs() < 1e-4 * (1.0 + fit.beta[i].abs()));
        }
        assert!((fit_c.theta.sigma2_eps - c * c * fit.theta.sigma2_eps).abs()
            < 1e-3 * fit.theta.sigma2_eps);
        assert!((fit_c.theta.sigma2_u - c * c * fit.theta.sigma2_u).abs()
            < 1e-3 * (1.0 + fit.theta.sigma2_u));
    }

    #[test]
    fn gamma_shrinks_as_slope_variance_vanishes() {
        let pop = simulate(5, 8, 1.0, 1.0, 2.0, 0.5, 71);
        let sample = pop.sample_view();
        let blocks = build_blocks(&sample).unwrap();
        let mut prev_sup = f64::INFINITY;
        for &sg in &[1.0, 0.1, 0.01, 0.001] {
            let theta = VarianceComponents::new(sg, 1.0, 2.0);
            let eval = blocks.evaluate(&theta, true).unwrap();
            let mut sup: f64 = 0.0;
            for block in &blocks.blocks {
                let c = core(block, &theta).unwrap();
                let u = u_matrix(block);
                let r = &block.y - &block.x * &eval.beta;
                let vr = (&r - &u * (c.t * (u.transpose() * &r))) / theta.sigma2_eps;
                sup = sup.max((theta.sigma2_gamma * block.w.dot(&vr)).abs());
            }
            assert!(sup < prev_sup + 1e-12);
            prev_sup = sup;
        }
        assert!(prev_sup < 0.05);
    }
}

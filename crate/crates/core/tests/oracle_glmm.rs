//! Adaptive-quadrature oracle for the Laplace propensity fit.

mod common;

use common::aghq_logit_marginal_loglik;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sae_ipw::frames::PopulationFrame;
use sae_ipw::glmm::fit_logit_laplace;

fn propensity_population(m: usize, n_j: usize, sigma2_nu: f64, seed: u64) -> PopulationFrame {
    let mut rng = sae_ipw::rng::substream(seed, &[8]);
    let stdn = Normal::new(0.0, 1.0).unwrap();
    let n = m * n_j;
    let mut labels = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for j in 0..m {
        let nu = sigma2_nu.sqrt() * stdn.sample(&mut rng);
        for _ in 0..n_j {
            let x2: f64 = rng.random::<f64>();
            let eta = -1.0 + 0.5 * x2 + nu;
            let e = 1.0 / (1.0 + (-eta).exp());
            labels.push(format!("a{j}"));
            x.push(x2);
            w.push(u8::from(rng.random::<f64>() < e));
        }
    }
    PopulationFrame::from_parts(labels, x, 1, w, vec![Some(0.0); n], vec![true; n]).unwrap()
}

/// The Laplace criterion at the fitted optimum agrees with a 20-node
/// adaptive Gauss-Hermite evaluation of the true marginal likelihood at the
/// same parameter values, within half a percent.
#[test]
fn laplace_marginal_likelihood_matches_quadrature() {
    let pop = propensity_population(10, 30, 0.25, 3);
    let sample = pop.sample_view();
    let fit = fit_logit_laplace(&sample).unwrap();
    assert!(fit.sigma2_nu >= 0.0);
    if fit.sigma2_nu == 0.0 {
        // Boundary fit: the criterion is the exact logistic likelihood and
        // quadrature is unnecessary. Still require finiteness.
        assert!(fit.laplace_loglik.is_finite());
        return;
    }
    let exact = aghq_logit_marginal_loglik(&sample, &fit.alpha, fit.sigma2_nu, 20);
    let rel = (fit.laplace_loglik - exact).abs() / exact.abs();
    assert!(
        rel < 0.005,
        "Laplace {} vs quadrature {exact} (relative gap {rel})",
        fit.laplace_loglik
    );
}

/// The fitted optimum also maximizes the quadrature-evaluated marginal over
/// nearby variance values: its quadrature likelihood is within quadrature
/// noise of the best across a local sigma2 sweep.
#[test]
fn fitted_variance_is_near_quadrature_optimum() {
    let pop = propensity_population(12, 40, 0.4, 7);
    let sample = pop.sample_view();
    let fit = fit_logit_laplace(&sample).unwrap();
    if fit.sigma2_nu == 0.0 {
        return;
    }
    let at = |s2: f64| aghq_logit_marginal_loglik(&sample, &fit.alpha, s2, 20);
    let fitted = at(fit.sigma2_nu);
    let mut best = f64::NEG_INFINITY;
    for mult in [0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 4.0] {
        best = best.max(at(fit.sigma2_nu * mult));
    }
    assert!(
        fitted > best - 0.35,
        "fitted sigma2 {} scores {fitted}, sweep best {best}",
        fit.sigma2_nu
    );
}

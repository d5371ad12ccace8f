// scratch probe: component decomposition with correctly specified propensity
use sae_ipw::estimators::*;
use sae_ipw::frames::draw_sample;
use sae_ipw::lmm::{fit_at_theta, LmmOptions, VarianceComponents, predict_outcomes};
use sae_ipw::mse::*;
use sae_ipw::simgen::*;
use sae_ipw::rng::child_seed;

fn main() {
    let s: usize = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(150);
    let mut spec = ScenarioSpec::parse_id("1a").unwrap();
    spec.seed = 7;
    let opts = EstimatorOptions { propensity_cols: Some(vec![1]), ..EstimatorOptions::default() };
    let m = spec.areas;
    let true_theta = VarianceComponents::new(1.0, 3.0, 6.0);
    let (mut a_mse, mut b_mse, mut c_mse) = (0.0, 0.0, 0.0);
    let mut tg = [0.0; 3];
    let mut eps_term = 0.0;
    let mut sg_sum = 0.0; let mut sg_zero = 0usize;
    let mut n_ok = 0usize;
    for rep in 0..s as u64 {
        let (pop, truths, e_true) = generate_population_with_propensity(&spec, rep);
        let sampled = draw_sample(&pop, &vec![spec.samp_per_area; m], child_seed(spec.seed, rep + 99991)).unwrap();
        let est = match estimate_ipw_eblup(&sampled, &opts) { Ok(v) => v, Err(_) => continue };
        n_ok += 1;
        sg_sum += est.lmm.theta.sigma2_gamma;
        if est.lmm.theta.sigma2_gamma < 1e-6 { sg_zero += 1; }
        let e_clip = clip_propensity(&e_true, opts.clip);
        let w_true = d_weights(&sampled, &e_clip);
        let t_true = ipw_pate(&sampled, &est.yhat, &w_true, Method::Eblup);
        // oracle model at true theta + true e
        let oracle_fit = fit_at_theta(&sampled.sample_view(), &true_theta, &LmmOptions::default()).unwrap();
        let (yhat_o, _) = predict_outcomes(&oracle_fit, &sampled);
        let t_oracle = ipw_pate(&sampled, &yhat_o, &w_true, Method::Eblup);
        let mse = mse_eblup_analytic(&sampled, &est.lmm, &est.weights).unwrap();
        for j in 0..m {
            let tr = truths[j];
            a_mse += (est.table.rows[j].estimate.unwrap() - tr).powi(2) / (m * s) as f64;
            b_mse += (t_true.rows[j].estimate.unwrap() - tr).powi(2) / (m * s) as f64;
            c_mse += (t_oracle.rows[j].estimate.unwrap() - tr).powi(2) / (m * s) as f64;
            if let Some(am) = &mse[j] {
                if let MseParts::Eblup { g1, g2, g3, design: _ } = am.parts {
                    tg[0] += g1 / (m * s) as f64; tg[1] += g2 / (m * s) as f64; tg[2] += g3 / (m * s) as f64;
                }
            }
            // epsilon term with estimated weights and sigma2_eps
            let se = est.lmm.theta.sigma2_eps;
            let d2: f64 = sampled.units_in_area(j).iter().filter(|&&i| !sampled.is_sampled(i)).map(|&i| est.weights.d[i] * est.weights.d[i]).sum();
            eps_term += se * d2 / (m * s) as f64;
        }
    }
    println!("reps ok {n_ok}/{s}; mean sigma2_gamma {:.3}, boundary fraction {:.2}", sg_sum / n_ok as f64, sg_zero as f64 / n_ok as f64);
    println!("empirical MSE full pipeline:   {a_mse:.4}");
    println!("empirical MSE true-e weights:  {b_mse:.4}");
    println!("empirical MSE true-e + true-theta: {c_mse:.4}");
    println!("analytic g1 {:.4} g2 {:.4} g3 {:.4} total {:.4}; eps-term {eps_term:.4}", tg[0], tg[1], tg[2], tg[0]+tg[1]+tg[2]);
}

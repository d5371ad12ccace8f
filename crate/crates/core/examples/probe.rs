// scratch probe: timing + metric snapshots for scenario studies
use sae_ipw::estimators::Method;
use sae_ipw::simgen::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let id = args.get(1).map(String::as_str).unwrap_or("1a");
    let s: usize = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(50);
    let mut spec = ScenarioSpec::parse_id(id).unwrap();
    spec.seed = 20260810;
    let cfg = StudyConfig::default();
    let methods = [Method::Direct, Method::Eblup, Method::Mq];
    let t0 = Instant::now();
    let result = run_study(&spec, &methods, s, &cfg).unwrap();
    let dt = t0.elapsed();
    println!("scenario {id} S={s}: {:.1}s total, {:.1} ms/rep", dt.as_secs_f64(), dt.as_secs_f64()*1000.0/s as f64);
    for m in methods {
        let med_rrmse = result.median_over_areas(m, |a| a.rrmse);
        let med_rb = result.median_over_areas(m, |a| a.rb.map(f64::abs));
        let med_cr = result.median_over_areas(m, |a| a.cr);
        let med_rmse_rb = result.median_over_areas(m, |a| a.rmse_rb);
        let fails = result.series(m).failures;
        println!("{:>7}: med|RB|={:?} medRRMSE={:?} medCR={:?} medRMSE-RB={:?} failures={}",
            m.as_str(), med_rb, med_rrmse, med_cr, med_rmse_rb, fails);
    }
    // conditional RB (direct-defined reps)
    for m in methods {
        let rb = result.rb_conditional(m, Method::Direct);
        let vals: Vec<f64> = rb.iter().filter_map(|v| v.map(f64::abs)).collect();
        let mut v = vals.clone(); v.sort_by(|a,b| a.partial_cmp(b).unwrap());
        let med = if v.is_empty() { f64::NAN } else { v[v.len()/2] };
        println!("{:>7}: conditional med|RB| = {med:.3}", m.as_str());
    }
}

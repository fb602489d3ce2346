//! End-to-end probe on 2D heat data.

use std::time::Instant;

use pdediscover::basis::{make_bspline, BasisEvaluations, OperatorSpec, SpatialBasis, TemporalBasis};
use pdediscover::diagnostics::equation_summary;
use pdediscover::library::{heat_library, CovariateField};
use pdediscover::sampler::{run_chain_with_plan, ModelConfig, ObservationSet};
use pdediscover::simulate::{add_noise, simulate_heat2d, HeatSpec, NoiseSpec};

fn main() {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let iterations: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let noise: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let beta_arg: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.0);

    let t0 = Instant::now();
    let sim = simulate_heat2d(&HeatSpec::default()).unwrap();
    println!("simulated in {:.2?}", t0.elapsed());

    let tensor = if noise > 0.0 {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        add_noise(&sim.tensor, &NoiseSpec::fraction(noise), &mut rng)
    } else {
        sim.tensor.clone()
    };
    let obs = ObservationSet::complete(tensor);

    let lib = heat_library();
    let bx = make_bspline((0.0, 20.0), 10, 3).unwrap();
    let by = make_bspline((0.0, 20.0), 10, 3).unwrap();
    let bt = make_bspline((0.0, 2.0), 80, 3).unwrap();
    let sb = SpatialBasis::new_2d(bx, by, sim.xs.clone(), sim.ys.clone()).unwrap();
    let tb = TemporalBasis::new(bt, sim.times.clone()).unwrap();
    let ev = BasisEvaluations::build(
        &sb,
        &tb,
        1,
        &lib.required_spatial(),
        &lib.required_temporal(),
        &OperatorSpec::identity(),
        1,
    )
    .unwrap();
    let cov = CovariateField::empty(sb.n_locations(), sim.times.len());

    let mut cfg = ModelConfig::new(1);
    cfg.iterations = iterations;
    cfg.burn_in = iterations / 2;
    cfg.minibatch = 100;
    cfg.kappa = vec![1e-4];
    cfg.seed = 1;
    if beta_arg > 0.0 {
        cfg.beta_rss = Some(beta_arg);
    }
    if let Some(sm) = args.get(4).and_then(|s| s.parse::<f64>().ok()) {
        cfg.init_smooth = sm;
    }
    if let Some(k) = args.get(5).and_then(|s| s.parse::<f64>().ok()) {
        cfg.kappa = vec![k];
    }

    let t1 = Instant::now();
    let (chain, plan) = run_chain_with_plan(&obs, &ev, &lib, &cov, &cfg).unwrap();
    let elapsed = t1.elapsed();
    println!(
        "chain: {} iterations in {:.2?} ({:.2} ms/iter)",
        iterations,
        elapsed,
        elapsed.as_secs_f64() * 1e3 / iterations as f64
    );
    println!(
        "plan: beta = {}, subsample = {}, condition number = {:?}",
        plan.beta, plan.size, plan.condition_number
    );
    let last = chain.records.last().unwrap();
    println!("last sigma2_u = {:?}, sigma2_v = {:?}", last.sigma2_u, last.sigma2_v);

    let summary = equation_summary(&chain, &OperatorSpec::identity(), 1, 0.5).unwrap();
    println!("equation: {}", summary.equations[0]);
    for t in &summary.terms {
        if t.inclusion > 0.05 {
            println!(
                "  {} inclusion {:.3} mean {:?} hpd ({:?}, {:?})",
                t.term_name, t.inclusion, t.mean, t.hpd_lower, t.hpd_upper
            );
        }
    }
}

//! Quick end-to-end probe on Burgers' data; prints the subsample plan,
//! timings, inclusion probabilities, and the discovered equation.

use std::time::Instant;

use pdediscover::basis::{make_bspline, BasisEvaluations, OperatorSpec, SpatialBasis, TemporalBasis};
use pdediscover::diagnostics::equation_summary;
use pdediscover::library::{burgers_library, CovariateField};
use pdediscover::sampler::{run_chain_with_plan, ModelConfig, ObservationSet};
use pdediscover::simulate::{simulate_burgers, BurgersSpec};

fn main() {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let iterations: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let noise: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.0);

    let t0 = Instant::now();
    let sim = simulate_burgers(&BurgersSpec::default()).unwrap();
    println!("simulated in {:.2?}", t0.elapsed());

    let tensor = if noise > 0.0 {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        pdediscover::simulate::add_noise(
            &sim.tensor,
            &pdediscover::simulate::NoiseSpec::fraction(noise),
            &mut rng,
        )
    } else {
        sim.tensor.clone()
    };
    let obs = ObservationSet::complete(tensor);

    let lib = burgers_library();
    let sdeg: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(4);
    let bx = make_bspline((sim.xs[0], *sim.xs.last().unwrap()), 50, sdeg).unwrap();
    let bt = make_bspline((0.0, 10.0), 20, 3).unwrap();
    let sb = SpatialBasis::new_1d(bx, sim.xs.clone()).unwrap();
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
    cfg.kappa = vec![args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-4)];
    cfg.seed = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    if let Some(gv) = args.get(4).and_then(|s| s.parse::<f64>().ok()) {
        if gv > 0.0 {
            cfg.g = Some(gv);
        }
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

    // Windowed diagnostics: variance trace and u_xxx inclusion per window.
    let window = (iterations / 10).max(1);
    let d_uxxx = lib.index_of("u_xxx").unwrap();
    let d_uxx = lib.index_of("u_xx").unwrap();
    for w in 0..10 {
        let lo = w * window;
        let hi = ((w + 1) * window).min(chain.records.len());
        if lo >= hi { break; }
        let recs = &chain.records[lo..hi];
        let s2u: f64 = recs.iter().map(|r| r.sigma2_u[0]).sum::<f64>() / recs.len() as f64;
        let s2v: f64 = recs.iter().map(|r| r.sigma2_v[0]).sum::<f64>() / recs.len() as f64;
        let inc_xxx: f64 = recs.iter().filter(|r| r.gamma[d_uxxx]).count() as f64 / recs.len() as f64;
        let m_xx: f64 = {
            let v: Vec<f64> = recs.iter().filter(|r| r.gamma[d_uxx]).map(|r| r.m[d_uxx]).collect();
            if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
        };
        println!(
            "window {lo:>5}..{hi:<5} s2u {s2u:.3e} s2v {s2v:.3e} p(u_xxx) {inc_xxx:.3} m(u_xx) {m_xx:.4}"
        );
    }

    let summary = equation_summary(&chain, &OperatorSpec::identity(), 1, 0.5).unwrap();
    println!("equation: {}", summary.equations[0]);
    for t in &summary.terms {
        if t.inclusion > 0.01 {
            println!(
                "  {} inclusion {:.3} mean {:?} hpd ({:?}, {:?})",
                t.term_name, t.inclusion, t.mean, t.hpd_lower, t.hpd_upper
            );
        }
    }
}

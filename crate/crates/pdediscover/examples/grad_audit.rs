//! Inspects loss-gradient magnitudes and one SGD step on heat data.

use pdediscover::basis::{make_bspline, BasisEvaluations, OperatorSpec, SpatialBasis, TemporalBasis};
use pdediscover::library::{heat_library, CovariateField};
use pdediscover::sampler::{
    component_quads, init_state, loss_grad, update_m, FieldCache, ModelConfig, ObservationSet,
    SamplerContext,
};
use pdediscover::simulate::{simulate_heat2d, HeatSpec};
use rand::SeedableRng;

fn main() {
    let sim = simulate_heat2d(&HeatSpec::default()).unwrap();
    let obs = ObservationSet::complete(sim.tensor.clone());
    let lib = heat_library();
    let bx = make_bspline((0.0, 20.0), 10, 3).unwrap();
    let by = make_bspline((0.0, 20.0), 10, 3).unwrap();
    let bt = make_bspline((0.0, 2.0), 80, 3).unwrap();
    let sb = SpatialBasis::new_2d(bx, by, sim.xs.clone(), sim.ys.clone()).unwrap();
    let tb = TemporalBasis::new(bt, sim.times.clone()).unwrap();
    let ev = BasisEvaluations::build(
        &sb, &tb, 1,
        &lib.required_spatial(), &lib.required_temporal(),
        &OperatorSpec::identity(), 1,
    ).unwrap();
    let cov = CovariateField::empty(sb.n_locations(), sim.times.len());
    let ctx = SamplerContext::new(&obs, &ev, &lib, &cov).unwrap();
    let cfg = ModelConfig::new(1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut state = init_state(&ctx, &cfg, &mut rng).unwrap();
    let mut cache = FieldCache::new(&ctx);
    cache.recompute(&state.a, &ev).unwrap();
    let quads = component_quads(&state, &ctx, &cache, ctx.st() as f64).unwrap();
    update_m(&mut state, &quads, &mut rng);
    println!("sigma2_v init {:.3e}, sigma2_u init {:.3e}", state.sigma2_v[0], state.sigma2_u[0]);
    println!("A rms {:.3e}", (state.a.values().iter().map(|v| v * v).sum::<f64>() / state.a.values().len() as f64).sqrt());

    // Gradient at a few points; split by zeroing variances alternately.
    for &flat in &[5000usize, 100_000, 200_000, 300_000] {
        let (s, t) = (flat % 1681, flat / 1681);
        let g = loss_grad(&state, &ctx, &cfg, (s, t)).unwrap();
        let rms = (g.values().iter().map(|v| v * v).sum::<f64>() / g.values().len() as f64).sqrt();
        let max = g.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // Data-only gradient: crank sigma2_u huge.
        let mut s_data = state.clone();
        s_data.sigma2_u[0] = 1e30;
        let gd = loss_grad(&s_data, &ctx, &cfg, (s, t)).unwrap();
        let rms_d = (gd.values().iter().map(|v| v * v).sum::<f64>() / gd.values().len() as f64).sqrt();
        // Process-only gradient.
        let mut s_proc = state.clone();
        s_proc.sigma2_v[0] = 1e30;
        let gp = loss_grad(&s_proc, &ctx, &cfg, (s, t)).unwrap();
        let rms_p = (gp.values().iter().map(|v| v * v).sum::<f64>() / gp.values().len() as f64).sqrt();
        println!(
            "point {flat:>6}: grad rms {rms:.3e} max {max:.3e} | data part {rms_d:.3e} process part {rms_p:.3e}"
        );
    }

    // Effective step scale: kappa * grad / |Z| accumulated over a batch of 100.
    let kappa = 1e-4;
    println!("kappa * data-part rms ~ {:.3e} per point (A rms for scale)", kappa * 1e0);
}

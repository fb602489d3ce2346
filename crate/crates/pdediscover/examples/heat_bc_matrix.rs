//! Compares heat-data boundary treatments end to end (optionally frozen A).

use pdediscover::basis::{make_bspline, BasisEvaluations, OperatorSpec, SpatialBasis, TemporalBasis};
use pdediscover::diagnostics::equation_summary;
use pdediscover::library::{heat_library, CovariateField};
use pdediscover::sampler::{run_chain_with_plan, ModelConfig, ObservationSet};
use pdediscover::tensor::Tensor3;

fn simulate(bc: &str) -> (Tensor3, Vec<f64>, Vec<f64>) {
    let n = 41usize;
    let dx = 0.5f64;
    let alpha = 1.0f64;
    let dt = 0.0025f64;
    let n_times = 201usize;
    let dt_out = 0.01f64;
    let substeps = (dt_out / dt).round() as usize;
    let k = 2.0 * std::f64::consts::PI / 40.0;
    let xs: Vec<f64> = (0..n).map(|i| dx * i as f64).collect();
    let times: Vec<f64> = (0..n_times).map(|i| dt_out * i as f64).collect();

    // Extended grid for the doubled-domain variant.
    if bc == "doubled" {
        let ne = 2 * (n - 1);
        let idx = |i: usize, j: usize| j * ne + i;
        let mut u = vec![0.0; ne * ne];
        for j in 0..ne {
            for i in 0..ne {
                u[idx(i, j)] = (k * dx * i as f64).sin() * (k * dx * j as f64).cos();
            }
        }
        let mut tensor = Tensor3::zeros(n * n, n_times, 1);
        let store = |tensor: &mut Tensor3, u: &Vec<f64>, ti: usize| {
            for j in 0..n {
                for i in 0..n {
                    tensor.set(j * n + i, ti, 0, u[idx(i % ne, j % ne)]);
                }
            }
        };
        store(&mut tensor, &u, 0);
        let lap = |s: &Vec<f64>, i: usize, j: usize| {
            let im = (i + ne - 1) % ne;
            let ip = (i + 1) % ne;
            let jm = (j + ne - 1) % ne;
            let jp = (j + 1) % ne;
            (s[idx(ip, j)] + s[idx(im, j)] + s[idx(i, jp)] + s[idx(i, jm)] - 4.0 * s[idx(i, j)])
                / (dx * dx)
        };
        for ti in 1..n_times {
            for _ in 0..substeps {
                let mut k1 = vec![0.0; ne * ne];
                for j in 0..ne {
                    for i in 0..ne {
                        k1[idx(i, j)] = alpha * lap(&u, i, j);
                    }
                }
                // Forward Euler is fine for the exact mode check here.
                for (uu, kk) in u.iter_mut().zip(&k1) {
                    *uu += dt * kk;
                }
            }
            store(&mut tensor, &u, ti);
        }
        return (tensor, xs, times);
    }

    let idx = |i: usize, j: usize| j * n + i;
    let mut u = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            u[idx(i, j)] = (k * xs[i]).sin() * (k * xs[j]).cos();
        }
    }
    let mut tensor = Tensor3::zeros(n * n, n_times, 1);
    for (kk, &v) in u.iter().enumerate() {
        tensor.set(kk, 0, 0, v);
    }
    for ti in 1..n_times {
        for _ in 0..substeps {
            let mut rate = vec![0.0; n * n];
            match bc {
                "frozen" => {
                    for j in 1..n - 1 {
                        for i in 1..n - 1 {
                            rate[idx(i, j)] = alpha
                                * (u[idx(i + 1, j)] + u[idx(i - 1, j)] + u[idx(i, j + 1)]
                                    + u[idx(i, j - 1)]
                                    - 4.0 * u[idx(i, j)])
                                / (dx * dx);
                        }
                    }
                }
                "neumann" => {
                    let refl = |q: isize| -> usize {
                        if q < 0 {
                            (-q) as usize
                        } else if q as usize >= n {
                            2 * (n - 1) - q as usize
                        } else {
                            q as usize
                        }
                    };
                    for j in 0..n {
                        for i in 0..n {
                            rate[idx(i, j)] = alpha
                                * (u[idx(refl(i as isize + 1), j)]
                                    + u[idx(refl(i as isize - 1), j)]
                                    + u[idx(i, refl(j as isize + 1))]
                                    + u[idx(i, refl(j as isize - 1))]
                                    - 4.0 * u[idx(i, j)])
                                / (dx * dx);
                        }
                    }
                }
                "wrap" => {
                    for j in 0..n {
                        let jm = (j + n - 1) % n;
                        let jp = (j + 1) % n;
                        for i in 0..n {
                            let im = (i + n - 1) % n;
                            let ip = (i + 1) % n;
                            rate[idx(i, j)] = alpha
                                * (u[idx(ip, j)] + u[idx(im, j)] + u[idx(i, jp)] + u[idx(i, jm)]
                                    - 4.0 * u[idx(i, j)])
                                / (dx * dx);
                        }
                    }
                }
                "mixed" => {
                    // Neumann in x (mirror), boundary values frozen in y.
                    let refl = |q: isize| -> usize {
                        if q < 0 {
                            (-q) as usize
                        } else if q as usize >= n {
                            2 * (n - 1) - q as usize
                        } else {
                            q as usize
                        }
                    };
                    for j in 1..n - 1 {
                        for i in 0..n {
                            rate[idx(i, j)] = alpha
                                * (u[idx(refl(i as isize + 1), j)]
                                    + u[idx(refl(i as isize - 1), j)]
                                    + u[idx(i, j + 1)]
                                    + u[idx(i, j - 1)]
                                    - 4.0 * u[idx(i, j)])
                                / (dx * dx);
                        }
                    }
                }
                other => panic!("unknown bc {other}"),
            }
            for (uu, kk) in u.iter_mut().zip(&rate) {
                *uu += dt * kk;
            }
        }
        for (kk, &v) in u.iter().enumerate() {
            tensor.set(kk, ti, 0, v);
        }
    }
    (tensor, xs, times)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let bc = args.get(1).map(|s| s.as_str()).unwrap_or("frozen").to_string();
    let iterations: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let kappa: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let beta: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.0);

    let (tensor, xs, times) = simulate(&bc);
    let noise: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let tensor = if noise > 0.0 {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        pdediscover::simulate::add_noise(
            &tensor,
            &pdediscover::simulate::NoiseSpec::fraction(noise),
            &mut rng,
        )
    } else {
        tensor
    };
    let obs = ObservationSet::complete(tensor);
    let lib = heat_library();
    let bx = make_bspline((0.0, 20.0), 10, 3).unwrap();
    let by = make_bspline((0.0, 20.0), 10, 3).unwrap();
    let bt = make_bspline((0.0, 2.0), 80, 3).unwrap();
    let sb = SpatialBasis::new_2d(bx, by, xs.clone(), xs.clone()).unwrap();
    let tb = TemporalBasis::new(bt, times.clone()).unwrap();
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
    let cov = CovariateField::empty(sb.n_locations(), times.len());
    let mut cfg = ModelConfig::new(1);
    cfg.iterations = iterations;
    cfg.burn_in = iterations / 2;
    cfg.kappa = vec![kappa];
    cfg.seed = 1;
    if beta > 0.0 {
        cfg.beta_rss = Some(beta);
    }
    if let Some(l2) = args.get(5).and_then(|s| s.parse::<f64>().ok()) {
        cfg.lambda2 = l2;
    }
    let (chain, plan) = run_chain_with_plan(&obs, &ev, &lib, &cov, &cfg).unwrap();
    let last = chain.records.last().unwrap();
    println!(
        "bc {bc}: kappa_cond {:?} beta {} n* {} | s2u {:.3e} s2v {:.3e}",
        plan.condition_number, plan.beta, plan.size, last.sigma2_u[0], last.sigma2_v[0]
    );
    let summary = equation_summary(&chain, &OperatorSpec::identity(), 1, 0.5).unwrap();
    println!("  {}", summary.equations[0]);
    for t in &summary.terms {
        if t.inclusion > 0.3 {
            println!("    {} p={:.3} mean={:?}", t.term_name, t.inclusion, t.mean);
        }
    }
}

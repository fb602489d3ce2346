//! Measures how far the heat field drifts from the separable mode.

use pdediscover::simulate::{simulate_heat2d, HeatSpec};

fn main() {
    let sim = simulate_heat2d(&HeatSpec::default()).unwrap();
    let (s, t, _) = sim.tensor.dims();
    let u0: Vec<f64> = (0..s).map(|k| sim.tensor.get(k, 0, 0)).collect();
    let norm0: f64 = u0.iter().map(|v| v * v).sum();
    for ti in [0, 20, 50, 100, 200] {
        if ti >= t {
            break;
        }
        let ut: Vec<f64> = (0..s).map(|k| sim.tensor.get(k, ti, 0)).collect();
        let c: f64 = ut.iter().zip(&u0).map(|(a, b)| a * b).sum::<f64>() / norm0;
        let dev: f64 = ut
            .iter()
            .zip(&u0)
            .map(|(a, b)| (a - c * b) * (a - c * b))
            .sum::<f64>()
            .sqrt();
        let amp: f64 = ut.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "t index {ti:>3}: mode coeff {c:.5}, deviation/amplitude {:.5}",
            dev / amp
        );
    }
}

//! Reference data generators: viscous Burgers' flow on a periodic line, heat
//! diffusion on a square, and a two-species reaction-diffusion system, plus
//! measurement noise and missing-at-random masking.
//!
//! Solvers integrate with classical RK4 on an internal step decoupled from
//! the output grid, so stability never constrains the observation times.

use rand::{Rng, RngExt};
use rand_distr::Distribution;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::sampler::ObservationSet;
use crate::tensor::Tensor3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation parameter: {0}")]
    BadParameter(String),
    #[error("solver became unstable at internal step {step} (t = {time:.4})")]
    Unstable { step: usize, time: f64 },
    #[error("negative density at internal step {step} (t = {time:.4})")]
    NegativeDensity { step: usize, time: f64 },
}

/// Simulator output: the field tensor plus the grid it lives on and a
/// human-readable statement of the generating equation.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub tensor: Tensor3,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub times: Vec<f64>,
    pub equation: String,
}

fn output_times(t_end: f64, n_times: usize) -> Vec<f64> {
    (0..n_times).map(|i| t_end * i as f64 / (n_times - 1) as f64).collect()
}

// ---------------------------------------------------------------------------
// Burgers' equation
// ---------------------------------------------------------------------------

/// Periodic viscous Burgers' flow, pseudo-spectral in space.
#[derive(Debug, Clone)]
pub struct BurgersSpec {
    pub nx: usize,
    pub domain: (f64, f64),
    pub t_end: f64,
    pub n_times: usize,
    pub viscosity: f64,
    /// Upper bound on the internal RK4 step.
    pub max_dt: f64,
}

impl Default for BurgersSpec {
    fn default() -> Self {
        Self {
            nx: 256,
            domain: (-8.0, 8.0),
            t_end: 10.0,
            n_times: 101,
            viscosity: 0.1,
            max_dt: 1e-3,
        }
    }
}

pub fn simulate_burgers(spec: &BurgersSpec) -> Result<SimOutput, SimError> {
    if spec.nx < 8 || spec.n_times < 2 || !(spec.max_dt > 0.0) || !(spec.viscosity >= 0.0) {
        return Err(SimError::BadParameter("burgers spec out of range".into()));
    }
    let n = spec.nx;
    let (lo, hi) = spec.domain;
    let len = hi - lo;
    let xs: Vec<f64> = (0..n).map(|i| lo + len * i as f64 / n as f64).collect();
    let times = output_times(spec.t_end, spec.n_times);

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let wavenumbers: Vec<f64> = (0..n)
        .map(|m| {
            let m = if m <= n / 2 - 1 { m as isize } else { m as isize - n as isize };
            2.0 * std::f64::consts::PI * m as f64 / len
        })
        .collect();

    let mut u: Vec<f64> = xs.iter().map(|&x| (-(x + 2.0) * (x + 2.0)).exp()).collect();
    let mut spectrum = vec![Complex::new(0.0, 0.0); n];
    let mut dx_buf = vec![Complex::new(0.0, 0.0); n];
    let mut dxx_buf = vec![Complex::new(0.0, 0.0); n];

    let mut rhs = |state: &[f64], out: &mut [f64]| {
        for (c, &v) in spectrum.iter_mut().zip(state) {
            *c = Complex::new(v, 0.0);
        }
        fft.process(&mut spectrum);
        for i in 0..n {
            let k = wavenumbers[i];
            dx_buf[i] = spectrum[i] * Complex::new(0.0, k);
            dxx_buf[i] = spectrum[i] * (-k * k);
        }
        ifft.process(&mut dx_buf);
        ifft.process(&mut dxx_buf);
        let scale = 1.0 / n as f64;
        for i in 0..n {
            let ux = dx_buf[i].re * scale;
            let uxx = dxx_buf[i].re * scale;
            out[i] = -state[i] * ux + spec.viscosity * uxx;
        }
    };

    let dt_out = spec.t_end / (spec.n_times - 1) as f64;
    let substeps = (dt_out / spec.max_dt).ceil() as usize;
    let dt = dt_out / substeps as f64;

    let mut tensor = Tensor3::zeros(n, spec.n_times, 1);
    for (i, &v) in u.iter().enumerate() {
        tensor.set(i, 0, 0, v);
    }
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut step_count = 0usize;
    for ti in 1..spec.n_times {
        for _ in 0..substeps {
            rhs(&u, &mut k1);
            for i in 0..n {
                stage[i] = u[i] + 0.5 * dt * k1[i];
            }
            rhs(&stage, &mut k2);
            for i in 0..n {
                stage[i] = u[i] + 0.5 * dt * k2[i];
            }
            rhs(&stage, &mut k3);
            for i in 0..n {
                stage[i] = u[i] + dt * k3[i];
            }
            rhs(&stage, &mut k4);
            for i in 0..n {
                u[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            step_count += 1;
        }
        if u.iter().any(|v| !v.is_finite() || v.abs() > 1e3) {
            return Err(SimError::Unstable { step: step_count, time: times[ti] });
        }
        for (i, &v) in u.iter().enumerate() {
            tensor.set(i, ti, 0, v);
        }
    }
    Ok(SimOutput {
        tensor,
        xs,
        ys: Vec::new(),
        times,
        equation: format!("u_t = -u*u_x + {} u_xx", spec.viscosity),
    })
}

// ---------------------------------------------------------------------------
// Heat equation
// ---------------------------------------------------------------------------

/// Heat diffusion of the separable trigonometric mode on `[0, L]^2`. The
/// solve runs on a margin-extended grid with zero-flux mirror handling in x
/// and boundary values held at their initial trace in y, and the output
/// window is the inner `[0, L]^2` block. The mode is neither flux-free in x
/// nor steady in y at the outer edge, so both axes acquire smooth deviation
/// fields that separate the derivative terms in the candidate library, while
/// the interior keeps decaying like the mode.
#[derive(Debug, Clone)]
pub struct HeatSpec {
    pub n_per_axis: usize,
    pub domain: (f64, f64),
    pub t_end: f64,
    pub n_times: usize,
    pub alpha: f64,
    pub internal_dt: f64,
    /// Extra solver cells beyond each edge of the observation window.
    pub margin_cells: usize,
}

impl Default for HeatSpec {
    fn default() -> Self {
        Self {
            n_per_axis: 41,
            domain: (0.0, 20.0),
            t_end: 2.0,
            n_times: 201,
            alpha: 1.0,
            internal_dt: 0.0025,
            margin_cells: 3,
        }
    }
}

pub fn simulate_heat2d(spec: &HeatSpec) -> Result<SimOutput, SimError> {
    if spec.n_per_axis < 3 || spec.n_times < 2 || !(spec.internal_dt > 0.0) {
        return Err(SimError::BadParameter("heat spec out of range".into()));
    }
    let n_out = spec.n_per_axis;
    let (lo, hi) = spec.domain;
    let dx = (hi - lo) / (n_out - 1) as f64;
    // Diffusive stability for RK4 with the 5-point Laplacian.
    if spec.internal_dt > 0.34 * dx * dx / spec.alpha {
        return Err(SimError::BadParameter(format!(
            "internal_dt {} violates the diffusive stability bound {:.4}",
            spec.internal_dt,
            0.34 * dx * dx / spec.alpha
        )));
    }
    let m = spec.margin_cells;
    let n = n_out + 2 * m;
    let k_mode = 2.0 * std::f64::consts::PI / (2.0 * (hi - lo));
    let coord = |i: usize| lo + dx * (i as f64 - m as f64);

    let xs: Vec<f64> = (0..n_out).map(|i| lo + dx * i as f64).collect();
    let times = output_times(spec.t_end, spec.n_times);
    let size = n * n;
    let idx = |i: usize, j: usize| j * n + i;

    let mut u = vec![0.0; size];
    for j in 0..n {
        for i in 0..n {
            u[idx(i, j)] = (k_mode * coord(i)).sin() * (k_mode * coord(j)).cos();
        }
    }
    let initial = u.clone();

    let inv_dx2 = spec.alpha / (dx * dx);
    // Mirror index for the zero-flux x-edges.
    let reflect = |k: isize| -> usize {
        if k < 0 {
            (-k) as usize
        } else if k as usize >= n {
            2 * (n - 1) - k as usize
        } else {
            k as usize
        }
    };
    let rhs = |state: &[f64], out: &mut [f64]| {
        for j in 0..n {
            for i in 0..n {
                if j == 0 || j == n - 1 {
                    // Values held at the initial trace in y.
                    out[idx(i, j)] = 0.0;
                    continue;
                }
                let im = reflect(i as isize - 1);
                let ip = reflect(i as isize + 1);
                out[idx(i, j)] = inv_dx2
                    * (state[idx(ip, j)] + state[idx(im, j)] + state[idx(i, j + 1)]
                        + state[idx(i, j - 1)]
                        - 4.0 * state[idx(i, j)]);
            }
        }
    };

    let dt_out = spec.t_end / (spec.n_times - 1) as f64;
    let substeps = (dt_out / spec.internal_dt).ceil() as usize;
    let dt = dt_out / substeps as f64;

    let s_out = n_out * n_out;
    let mut tensor = Tensor3::zeros(s_out, spec.n_times, 1);
    let store = |tensor: &mut Tensor3, u: &[f64], ti: usize| {
        for j in 0..n_out {
            for i in 0..n_out {
                tensor.set(j * n_out + i, ti, 0, u[idx(i + m, j + m)]);
            }
        }
    };
    store(&mut tensor, &u, 0);

    let mut k1 = vec![0.0; size];
    let mut k2 = vec![0.0; size];
    let mut k3 = vec![0.0; size];
    let mut k4 = vec![0.0; size];
    let mut stage = vec![0.0; size];
    let mut step_count = 0usize;
    for ti in 1..spec.n_times {
        for _ in 0..substeps {
            rhs(&u, &mut k1);
            for i in 0..size {
                stage[i] = u[i] + 0.5 * dt * k1[i];
            }
            rhs(&stage, &mut k2);
            for i in 0..size {
                stage[i] = u[i] + 0.5 * dt * k2[i];
            }
            rhs(&stage, &mut k3);
            for i in 0..size {
                stage[i] = u[i] + dt * k3[i];
            }
            rhs(&stage, &mut k4);
            for i in 0..size {
                u[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            step_count += 1;
        }
        // Re-pin the held rows exactly (guards against drift in the summed
        // stages; their rates are zero so this is a no-op in exact arithmetic).
        for i in 0..n {
            u[idx(i, 0)] = initial[idx(i, 0)];
            u[idx(i, n - 1)] = initial[idx(i, n - 1)];
        }
        if u.iter().any(|v| !v.is_finite() || v.abs() > 1e3) {
            return Err(SimError::Unstable { step: step_count, time: times[ti] });
        }
        store(&mut tensor, &u, ti);
    }
    Ok(SimOutput {
        tensor,
        xs: xs.clone(),
        ys: xs,
        times,
        equation: format!("u_t = {} u_xx + {} u_yy", spec.alpha, spec.alpha),
    })
}

// ---------------------------------------------------------------------------
// Reaction-diffusion (predator-prey)
// ---------------------------------------------------------------------------

/// Two-species reaction-diffusion on a square grid with periodic index
/// wrapping, classic prey/predator kinetics with a prey carrying capacity.
#[derive(Debug, Clone)]
pub struct ReactionDiffusionSpec {
    pub n_per_axis: usize,
    pub domain: (f64, f64),
    pub t_end: f64,
    pub n_times: usize,
    pub d_u: f64,
    pub d_v: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub beta: f64,
    pub mu: f64,
    pub eta: f64,
    pub internal_dt: f64,
}

impl Default for ReactionDiffusionSpec {
    fn default() -> Self {
        Self {
            n_per_axis: 41,
            domain: (-10.0, 10.0),
            t_end: 10.0,
            n_times: 101,
            d_u: 0.1,
            d_v: 0.1,
            gamma0: 0.4,
            gamma1: 1.5,
            beta: 0.5,
            mu: 0.3,
            eta: 0.1,
            internal_dt: 0.01,
        }
    }
}

pub fn simulate_reaction_diffusion(spec: &ReactionDiffusionSpec) -> Result<SimOutput, SimError> {
    if spec.n_per_axis < 3 || spec.n_times < 2 || !(spec.internal_dt > 0.0) {
        return Err(SimError::BadParameter("reaction-diffusion spec out of range".into()));
    }
    let n = spec.n_per_axis;
    let (lo, hi) = spec.domain;
    let dx = (hi - lo) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| lo + dx * i as f64).collect();
    let times = output_times(spec.t_end, spec.n_times);
    let size = n * n;
    let idx = |i: usize, j: usize| j * n + i;

    let pi = std::f64::consts::PI;
    let mut u = vec![0.0; size];
    let mut v = vec![0.0; size];
    for j in 0..n {
        for i in 0..n {
            let x = xs[i];
            let y = xs[j];
            u[idx(i, j)] = ((2.0 * pi * x / 15.0).cos() * (2.0 * pi * y / 15.0).sin()).exp();
            v[idx(i, j)] = 0.1 * ((2.0 * pi * y / 30.0).cos() * (2.0 * pi * x / 30.0 - 5.0).sin()).exp();
        }
    }

    let inv_dx2 = 1.0 / (dx * dx);
    let lap = |state: &[f64], i: usize, j: usize| {
        let im = (i + n - 1) % n;
        let ip = (i + 1) % n;
        let jm = (j + n - 1) % n;
        let jp = (j + 1) % n;
        inv_dx2
            * (state[idx(ip, j)] + state[idx(im, j)] + state[idx(i, jp)] + state[idx(i, jm)]
                - 4.0 * state[idx(i, j)])
    };
    let rhs = |us: &[f64], vs: &[f64], out_u: &mut [f64], out_v: &mut [f64]| {
        for j in 0..n {
            for i in 0..n {
                let k = idx(i, j);
                let uu = us[k];
                let vv = vs[k];
                out_u[k] = spec.d_u * lap(us, i, j) + spec.gamma0 * uu
                    - (spec.gamma0 / spec.gamma1) * uu * uu
                    - spec.beta * uu * vv;
                out_v[k] = spec.d_v * lap(vs, i, j) + spec.mu * uu * vv - spec.eta * vv;
            }
        }
    };

    let dt_out = spec.t_end / (spec.n_times - 1) as f64;
    let substeps = (dt_out / spec.internal_dt).ceil() as usize;
    let dt = dt_out / substeps as f64;

    let mut tensor = Tensor3::zeros(size, spec.n_times, 2);
    for k in 0..size {
        tensor.values_mut()[k] = u[k];
        let off = size * spec.n_times;
        tensor.values_mut()[off + k] = v[k];
    }

    let mut ku = [vec![0.0; size], vec![0.0; size], vec![0.0; size], vec![0.0; size]];
    let mut kv = [vec![0.0; size], vec![0.0; size], vec![0.0; size], vec![0.0; size]];
    let mut su = vec![0.0; size];
    let mut sv = vec![0.0; size];
    let mut step_count = 0usize;
    for ti in 1..spec.n_times {
        for _ in 0..substeps {
            {
                let (k1u, rest_u) = ku.split_at_mut(1);
                let (k1v, rest_v) = kv.split_at_mut(1);
                rhs(&u, &v, &mut k1u[0], &mut k1v[0]);
                for i in 0..size {
                    su[i] = u[i] + 0.5 * dt * k1u[0][i];
                    sv[i] = v[i] + 0.5 * dt * k1v[0][i];
                }
                rhs(&su, &sv, &mut rest_u[0], &mut rest_v[0]);
                for i in 0..size {
                    su[i] = u[i] + 0.5 * dt * rest_u[0][i];
                    sv[i] = v[i] + 0.5 * dt * rest_v[0][i];
                }
                rhs(&su, &sv, &mut rest_u[1], &mut rest_v[1]);
                for i in 0..size {
                    su[i] = u[i] + dt * rest_u[1][i];
                    sv[i] = v[i] + dt * rest_v[1][i];
                }
                rhs(&su, &sv, &mut rest_u[2], &mut rest_v[2]);
            }
            for i in 0..size {
                u[i] += dt / 6.0 * (ku[0][i] + 2.0 * ku[1][i] + 2.0 * ku[2][i] + ku[3][i]);
                v[i] += dt / 6.0 * (kv[0][i] + 2.0 * kv[1][i] + 2.0 * kv[2][i] + kv[3][i]);
            }
            step_count += 1;
        }
        let time = times[ti];
        if u.iter().chain(v.iter()).any(|w| !w.is_finite() || w.abs() > 1e4) {
            return Err(SimError::Unstable { step: step_count, time });
        }
        if u.iter().chain(v.iter()).any(|w| *w < -1e-9) {
            return Err(SimError::NegativeDensity { step: step_count, time });
        }
        for k in 0..size {
            tensor.set(k, ti, 0, u[k]);
            tensor.set(k, ti, 1, v[k]);
        }
    }
    Ok(SimOutput {
        tensor,
        xs: xs.clone(),
        ys: xs,
        times,
        equation: format!(
            "u_t = {} u - {:.4} u^2 - {} u*v + {} u_xx + {} u_yy; v_t = {} u*v - {} v + {} v_xx + {} v_yy",
            spec.gamma0,
            spec.gamma0 / spec.gamma1,
            spec.beta,
            spec.d_u,
            spec.d_u,
            spec.mu,
            spec.eta,
            spec.d_v,
            spec.d_v
        ),
    })
}

// ---------------------------------------------------------------------------
// Noise and missingness
// ---------------------------------------------------------------------------

/// Additive Gaussian noise scaled to a fraction of the simulated process
/// standard deviation.
#[derive(Debug, Clone)]
pub struct NoiseSpec {
    pub zeta: f64,
    pub per_component: bool,
}

impl NoiseSpec {
    pub fn fraction(zeta: f64) -> Self {
        Self { zeta, per_component: true }
    }
}

fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let count = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / count;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count).sqrt()
}

/// `v = u + zeta * sigma * eps` with `sigma` the empirical standard deviation
/// of the simulated component (or of the whole tensor when not
/// per-component).
pub fn add_noise<R: Rng>(u: &Tensor3, spec: &NoiseSpec, rng: &mut R) -> Tensor3 {
    let (s, t, n) = u.dims();
    if spec.zeta == 0.0 {
        return u.clone();
    }
    let normal = rand_distr::StandardNormal;
    let mut out = u.clone();
    if spec.per_component {
        for comp in 0..n {
            let sigma = std_dev(u.component(comp).iter().copied());
            let st = s * t;
            for flat in 0..st {
                let eps: f64 = normal.sample(rng);
                out.values_mut()[comp * st + flat] += spec.zeta * sigma * eps;
            }
        }
    } else {
        let sigma = std_dev(u.values().iter().copied());
        for v in out.values_mut() {
            let eps: f64 = normal.sample(rng);
            *v += spec.zeta * sigma * eps;
        }
    }
    out
}

/// Missing-completely-at-random masking of individual entries.
#[derive(Debug, Clone)]
pub struct MissingSpec {
    pub fraction: f64,
}

pub fn apply_missingness<R: Rng>(
    u: &Tensor3,
    spec: &MissingSpec,
    rng: &mut R,
) -> Result<ObservationSet, SimError> {
    if !(0.0..1.0).contains(&spec.fraction) {
        return Err(SimError::BadParameter(format!(
            "missing fraction must lie in [0, 1), got {}",
            spec.fraction
        )));
    }
    let mask: Vec<bool> = (0..u.values().len()).map(|_| !rng.random_bool(spec.fraction)).collect();
    ObservationSet::with_mask(u.clone(), mask)
        .map_err(|e| SimError::BadParameter(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn burgers_initial_condition_exact() {
        let spec = BurgersSpec { n_times: 3, t_end: 0.2, ..Default::default() };
        let out = simulate_burgers(&spec).unwrap();
        for (i, &x) in out.xs.iter().enumerate() {
            let expect = (-(x + 2.0) * (x + 2.0)).exp();
            assert_eq!(out.tensor.get(i, 0, 0), expect);
        }
    }

    #[test]
    fn burgers_conserves_mass() {
        let spec = BurgersSpec::default();
        let out = simulate_burgers(&spec).unwrap();
        let dx = (spec.domain.1 - spec.domain.0) / spec.nx as f64;
        let mass0: f64 = (0..spec.nx).map(|i| out.tensor.get(i, 0, 0)).sum::<f64>() * dx;
        for ti in [25, 50, 100] {
            let mass: f64 = (0..spec.nx).map(|i| out.tensor.get(i, ti, 0)).sum::<f64>() * dx;
            assert!(
                (mass - mass0).abs() / mass0.abs() < 1e-6,
                "mass at output {ti}: {mass} vs {mass0}"
            );
        }
    }

    #[test]
    fn burgers_step_halving_converges() {
        let coarse = BurgersSpec { t_end: 1.0, n_times: 11, ..Default::default() };
        let fine = BurgersSpec { max_dt: coarse.max_dt / 2.0, ..coarse.clone() };
        let a = simulate_burgers(&coarse).unwrap();
        let b = simulate_burgers(&fine).unwrap();
        let n = coarse.nx;
        let last = coarse.n_times - 1;
        let rms = (0..n)
            .map(|i| {
                let d = a.tensor.get(i, last, 0) - b.tensor.get(i, last, 0);
                d * d
            })
            .sum::<f64>()
            .sqrt()
            / (n as f64).sqrt();
        assert!(rms < 1e-6, "step-halving RMS {rms}");
    }

    #[test]
    fn heat_initial_and_eigenmode_decay() {
        let spec = HeatSpec { t_end: 0.2, n_times: 21, ..Default::default() };
        let out = simulate_heat2d(&spec).unwrap();
        let k = 2.0 * std::f64::consts::PI / 40.0;
        let n = spec.n_per_axis;
        for j in 0..n {
            for i in 0..n {
                let expect = (k * out.xs[i]).sin() * (k * out.ys[j]).cos();
                let got = out.tensor.get(j * n + i, 0, 0);
                assert!((got - expect).abs() < 1e-14);
            }
        }
        // Interior decay follows exp(-2 alpha k^2 t) within 1%.
        let decay = (-2.0 * spec.alpha * k * k * 0.2).exp();
        for j in (5..n - 5).step_by(7) {
            for i in (5..n - 5).step_by(7) {
                let initial = out.tensor.get(j * n + i, 0, 0);
                if initial.abs() < 0.2 {
                    continue;
                }
                let ratio = out.tensor.get(j * n + i, 20, 0) / initial;
                assert!(
                    (ratio - decay).abs() / decay < 0.01,
                    "decay at ({i},{j}): {ratio} vs {decay}"
                );
            }
        }
    }

    #[test]
    fn heat_mean_zero_and_max_principle() {
        let spec = HeatSpec { t_end: 0.5, n_times: 51, ..Default::default() };
        let out = simulate_heat2d(&spec).unwrap();
        let n = spec.n_per_axis;
        let s = n * n;
        let initial_max = (0..s).map(|k| out.tensor.get(k, 0, 0).abs()).fold(0.0f64, f64::max);
        for ti in 0..spec.n_times {
            let mean: f64 = (0..s).map(|k| out.tensor.get(k, ti, 0)).sum::<f64>() / s as f64;
            assert!(mean.abs() < 1e-10, "mean at {ti}: {mean}");
            let max = (0..s).map(|k| out.tensor.get(k, ti, 0).abs()).fold(0.0f64, f64::max);
            assert!(max <= initial_max + 1e-10);
        }
    }

    #[test]
    fn reaction_diffusion_initial_fields() {
        let spec = ReactionDiffusionSpec { t_end: 0.2, n_times: 3, ..Default::default() };
        let out = simulate_reaction_diffusion(&spec).unwrap();
        let pi = std::f64::consts::PI;
        let n = spec.n_per_axis;
        for j in 0..n {
            for i in 0..n {
                let (x, y) = (out.xs[i], out.ys[j]);
                let eu = ((2.0 * pi * x / 15.0).cos() * (2.0 * pi * y / 15.0).sin()).exp();
                let ev = 0.1 * ((2.0 * pi * y / 30.0).cos() * (2.0 * pi * x / 30.0 - 5.0).sin()).exp();
                assert_eq!(out.tensor.get(j * n + i, 0, 0), eu);
                assert_eq!(out.tensor.get(j * n + i, 0, 1), ev);
            }
        }
    }

    #[test]
    fn reaction_diffusion_matches_ode_when_diffusion_free() {
        // Spatially constant initials and no diffusion reduce to the
        // two-species ODE; compare against a fine-step reference integration.
        let spec = ReactionDiffusionSpec {
            n_per_axis: 5,
            d_u: 0.0,
            d_v: 0.0,
            t_end: 5.0,
            n_times: 11,
            ..Default::default()
        };
        // Constant initial conditions via a custom run: emulate by overriding
        // after construction is not possible, so integrate the ODE from the
        // same initial value the grid takes at one node where fields are flat.
        // Instead check the PDE run against the ODE started from each node.
        let out = simulate_reaction_diffusion(&spec).unwrap();
        let n = spec.n_per_axis;
        let node = 2 * n + 2;
        let (mut ou, mut ov) = (out.tensor.get(node, 0, 0), out.tensor.get(node, 0, 1));
        let f = |u: f64, v: f64| {
            (
                spec.gamma0 * u - (spec.gamma0 / spec.gamma1) * u * u - spec.beta * u * v,
                spec.mu * u * v - spec.eta * v,
            )
        };
        let dt = 1e-4;
        let steps_per_output = (spec.t_end / (spec.n_times - 1) as f64 / dt).round() as usize;
        for ti in 1..spec.n_times {
            for _ in 0..steps_per_output {
                let (k1u, k1v) = f(ou, ov);
                let (k2u, k2v) = f(ou + 0.5 * dt * k1u, ov + 0.5 * dt * k1v);
                let (k3u, k3v) = f(ou + 0.5 * dt * k2u, ov + 0.5 * dt * k2v);
                let (k4u, k4v) = f(ou + dt * k3u, ov + dt * k3v);
                ou += dt / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u);
                ov += dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
            }
            // With zero diffusion every node evolves independently.
            let du = (out.tensor.get(node, ti, 0) - ou).abs();
            let dv = (out.tensor.get(node, ti, 1) - ov).abs();
            assert!(du < 1e-5 && dv < 1e-5, "t index {ti}: du {du}, dv {dv}");
        }
    }

    #[test]
    fn reaction_diffusion_step_halving() {
        let coarse = ReactionDiffusionSpec { t_end: 2.0, n_times: 21, ..Default::default() };
        let fine =
            ReactionDiffusionSpec { internal_dt: coarse.internal_dt / 2.0, ..coarse.clone() };
        let a = simulate_reaction_diffusion(&coarse).unwrap();
        let b = simulate_reaction_diffusion(&fine).unwrap();
        let len = a.tensor.values().len();
        let rms = a
            .tensor
            .values()
            .iter()
            .zip(b.tensor.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
            / (len as f64).sqrt();
        assert!(rms < 1e-5, "step-halving RMS {rms}");
    }

    #[test]
    fn noise_scale_and_reproducibility() {
        let spec = BurgersSpec { t_end: 1.0, n_times: 11, ..Default::default() };
        let out = simulate_burgers(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noisy = add_noise(&out.tensor, &NoiseSpec::fraction(0.02), &mut rng);
        let sigma = std_dev(out.tensor.values().iter().copied());
        let noise_sd = std_dev(
            noisy
                .values()
                .iter()
                .zip(out.tensor.values())
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>()
                .into_iter(),
        );
        let rel = (noise_sd - 0.02 * sigma).abs() / (0.02 * sigma);
        assert!(rel < 0.02, "noise sd off by {rel}");

        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let noisy2 = add_noise(&out.tensor, &NoiseSpec::fraction(0.02), &mut rng2);
        assert_eq!(noisy, noisy2);

        let clean = add_noise(&out.tensor, &NoiseSpec::fraction(0.0), &mut rng);
        assert_eq!(clean, out.tensor);
    }

    #[test]
    fn missingness_share_and_edge_cases() {
        let spec = BurgersSpec { t_end: 1.0, n_times: 101, ..Default::default() };
        let out = simulate_burgers(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let obs = apply_missingness(&out.tensor, &MissingSpec { fraction: 0.05 }, &mut rng).unwrap();
        let total = obs.mask().len();
        let missing = obs.mask().iter().filter(|m| !**m).count();
        let share = missing as f64 / total as f64;
        assert!((share - 0.05).abs() < 0.005, "missing share {share}");

        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let full = apply_missingness(&out.tensor, &MissingSpec { fraction: 0.0 }, &mut rng2).unwrap();
        assert!(full.mask().iter().all(|m| *m));
        assert!(apply_missingness(&out.tensor, &MissingSpec { fraction: 1.0 }, &mut rng2).is_err());
    }
}

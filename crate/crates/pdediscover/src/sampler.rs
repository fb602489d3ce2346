//! The hierarchical model and its MCMC: spike-and-slab selection of the
//! coefficient matrix M via marginalized g-prior ratios on a fresh subsample,
//! conjugate draws for the inclusion rate and both variance vectors, and a
//! constant-rate stochastic gradient step for the basis coefficients A.
//!
//! One sweep is: draw minibatch, update gamma, pi, M, the process variances,
//! the measurement variances, then A. A single seeded RNG stream drives every
//! draw in that fixed order, so chains are bit-reproducible.

use rand::seq::SliceRandom;
use rand::RngExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use thiserror::Error;

use crate::basis::{
    for_each_kron, reconstruct_component, BasisError, BasisEvaluations, DerivSpec, SpatialSel,
};
use crate::diagnostics;
use crate::library::{
    accumulate_term_gradient, condition_number, CovariateField, FeatureLibrary, LibraryError,
};
use crate::parallel;
use crate::tensor::{Matrix, Tensor3, TensorError};

/// Variance draws never fall below this.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("ridge system is numerically singular (smallest eigenvalue {min_eig:.3e}); increase lambda2 above {penalty:.3e}")]
    SingularRidge { min_eig: f64, penalty: f64 },
    #[error("conjugate-gradient ridge solve did not converge (relative residual {residual:.3e})")]
    RidgeNotConverged { residual: f64 },
    #[error("sampler aborted at iteration {iteration}: {reason}")]
    Abort { iteration: usize, reason: String },
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Observations with a presence mask. Masked entries are never read; the mask
/// plays the role of the per-point incidence matrix.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    data: Tensor3,
    mask: Vec<bool>,
}

impl ObservationSet {
    pub fn complete(data: Tensor3) -> Self {
        let len = data.values().len();
        Self { data, mask: vec![true; len] }
    }

    pub fn with_mask(data: Tensor3, mask: Vec<bool>) -> Result<Self, SamplerError> {
        if mask.len() != data.values().len() {
            return Err(SamplerError::Config(format!(
                "mask length {} does not match data length {}",
                mask.len(),
                data.values().len()
            )));
        }
        for (i, (&v, &m)) in data.values().iter().zip(&mask).enumerate() {
            if m && !v.is_finite() {
                return Err(SamplerError::Config(format!(
                    "observed entry at linear index {i} is not finite"
                )));
            }
        }
        Ok(Self { data, mask })
    }

    pub fn data(&self) -> &Tensor3 {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dims()
    }

    #[inline]
    pub fn present(&self, s: usize, t: usize, n: usize) -> bool {
        self.mask[self.data.index(s, t, n)]
    }

    #[inline]
    pub fn value(&self, s: usize, t: usize, n: usize) -> f64 {
        self.data.get(s, t, n)
    }

    /// Number of observed components at one space-time point.
    pub fn l_count(&self, s: usize, t: usize) -> usize {
        let (_, _, n) = self.dims();
        (0..n).filter(|&c| self.present(s, t, c)).count()
    }

    /// Number of observed points for one component.
    pub fn observed_count(&self, n: usize) -> usize {
        let (s, t, _) = self.dims();
        let st = s * t;
        self.mask[n * st..(n + 1) * st].iter().filter(|m| **m).count()
    }
}

/// Sampler configuration. `g`, `beta_rss`, and `subsample` default to the
/// data-driven conventions when unset: g matches the number of points
/// entering each step, beta comes from the library condition number, and the
/// subsample size from the closed-form calculation.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub g: Option<f64>,
    pub prior_a: f64,
    pub prior_b: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub kappa: Vec<f64>,
    pub minibatch: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub beta_rss: Option<f64>,
    pub subsample: Option<usize>,
    pub nu_v: f64,
    pub a_v: f64,
    pub seed: u64,
    pub inclusion_threshold: f64,
    pub thin_a: usize,
    /// Roughness weight for the coefficient initialization: each axis Gram
    /// gets `init_smooth * scale * D2'D2` added before the ridge solve, which
    /// keeps the initial latent field from chasing sub-knot wiggle.
    pub init_smooth: f64,
}

impl ModelConfig {
    pub fn new(n_components: usize) -> Self {
        Self {
            g: None,
            prior_a: 1.0,
            prior_b: 1.0,
            lambda1: 0.01,
            lambda2: 0.01,
            kappa: vec![1e-4; n_components],
            minibatch: 100,
            iterations: 5000,
            burn_in: 2500,
            beta_rss: None,
            subsample: None,
            nu_v: 2.0,
            a_v: 1e5,
            seed: 0,
            inclusion_threshold: 0.5,
            thin_a: 0,
            init_smooth: 1.0,
        }
    }

    pub fn validate(&self, n_components: usize) -> Result<(), SamplerError> {
        let err = |m: String| Err(SamplerError::Config(m));
        if self.kappa.len() != n_components {
            return err(format!(
                "kappa has {} entries, expected one per component ({n_components})",
                self.kappa.len()
            ));
        }
        if self.kappa.iter().any(|k| !(*k > 0.0)) {
            return err("kappa entries must be positive".into());
        }
        if let Some(b) = self.beta_rss {
            if !(b > 0.0 && b < 1.0) {
                return err(format!("beta_rss must lie in (0, 1), got {b}"));
            }
        }
        if self.iterations > 0 && self.burn_in >= self.iterations {
            return err(format!(
                "burn_in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            ));
        }
        if self.minibatch == 0 {
            return err("minibatch size must be positive".into());
        }
        if !(self.prior_a > 0.0 && self.prior_b > 0.0) {
            return err("Beta hyperparameters must be positive".into());
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return err("elastic-net penalties must be nonnegative".into());
        }
        if !(self.nu_v > 0.0 && self.a_v > 0.0) {
            return err("Half-t hyperparameters must be positive".into());
        }
        if !(self.inclusion_threshold > 0.0 && self.inclusion_threshold < 1.0) {
            return err("inclusion threshold must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// All sampled unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub a: Matrix,
    pub m: Matrix,
    pub gamma: Vec<bool>,
    pub pi: Vec<f64>,
    pub sigma2_u: Vec<f64>,
    pub sigma2_v: Vec<f64>,
    pub a_v: Vec<f64>,
}

impl ModelState {
    pub fn n_components(&self) -> usize {
        self.m.rows()
    }

    pub fn n_terms(&self) -> usize {
        self.m.cols()
    }

    #[inline]
    pub fn gamma_at(&self, n: usize, d: usize) -> bool {
        self.gamma[n * self.n_terms() + d]
    }

    fn set_gamma(&mut self, n: usize, d: usize, v: bool) {
        let d_count = self.n_terms();
        self.gamma[n * d_count + d] = v;
    }

    pub fn active_terms(&self, n: usize) -> Vec<usize> {
        (0..self.n_terms()).filter(|&d| self.gamma_at(n, d)).collect()
    }
}

/// One recorded sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub m: Vec<f64>,
    pub gamma: Vec<bool>,
    pub pi: Vec<f64>,
    pub sigma2_u: Vec<f64>,
    pub sigma2_v: Vec<f64>,
}

/// Full chain output.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSamples {
    pub n_components: usize,
    pub n_terms: usize,
    pub burn_in: usize,
    pub component_names: Vec<String>,
    pub term_names: Vec<String>,
    pub records: Vec<SweepRecord>,
    /// Thinned coefficient snapshots (iteration, flattened A).
    pub a_draws: Vec<(usize, Vec<f64>)>,
}

impl ChainSamples {
    pub fn post_burn_in(&self) -> &[SweepRecord] {
        &self.records[self.burn_in.min(self.records.len())..]
    }
}

/// Immutable inputs shared by every update.
pub struct SamplerContext<'a> {
    pub obs: &'a ObservationSet,
    pub ev: &'a BasisEvaluations,
    pub lib: &'a FeatureLibrary,
    pub cov: &'a CovariateField,
}

impl<'a> SamplerContext<'a> {
    pub fn new(
        obs: &'a ObservationSet,
        ev: &'a BasisEvaluations,
        lib: &'a FeatureLibrary,
        cov: &'a CovariateField,
    ) -> Result<Self, SamplerError> {
        let (s, t, n) = obs.dims();
        let (es, et) = ev.dims();
        if (s, t) != (es, et) {
            return Err(SamplerError::Config(format!(
                "observations are {s}x{t} but the bases were evaluated on {es}x{et}"
            )));
        }
        if n != ev.n_components || n != lib.n_components() {
            return Err(SamplerError::Config(format!(
                "component counts disagree: data {n}, basis {}, library {}",
                ev.n_components,
                lib.n_components()
            )));
        }
        Ok(Self { obs, ev, lib, cov })
    }

    pub fn st(&self) -> usize {
        let (s, t, _) = self.obs.dims();
        s * t
    }

    pub fn n_components(&self) -> usize {
        self.obs.dims().2
    }
}

// ---------------------------------------------------------------------------
// Field cache
// ---------------------------------------------------------------------------

/// Per-iteration reconstructions: every derivative field the library needs,
/// the order-0 field of each component, and the LHS response. Entries are
/// indexed `t*S + s`.
pub struct FieldCache {
    entries: Vec<(usize, DerivSpec)>,
    fields: Vec<Vec<f64>>,
    plan_to_entry: Vec<usize>,
    value_entry: Vec<usize>,
    response: Matrix,
}

impl FieldCache {
    pub fn new(ctx: &SamplerContext) -> Self {
        let n = ctx.n_components();
        let mut entries: Vec<(usize, DerivSpec)> = Vec::new();
        for comp in 0..n {
            entries.push((comp, DerivSpec::default()));
        }
        for sf in &ctx.lib.plan().state_factors {
            if !entries.contains(sf) {
                entries.push(*sf);
            }
        }
        let plan_to_entry = ctx
            .lib
            .plan()
            .state_factors
            .iter()
            .map(|sf| entries.iter().position(|e| e == sf).unwrap())
            .collect();
        let value_entry = (0..n)
            .map(|comp| entries.iter().position(|e| *e == (comp, DerivSpec::default())).unwrap())
            .collect();
        let st = ctx.st();
        let fields = vec![vec![0.0; st]; entries.len()];
        Self { entries, fields, plan_to_entry, value_entry, response: Matrix::zeros(n, st) }
    }

    pub fn recompute(&mut self, a: &Matrix, ev: &BasisEvaluations) -> Result<(), BasisError> {
        for (k, (comp, d)) in self.entries.iter().enumerate() {
            reconstruct_component(
                a.row(*comp),
                ev,
                SpatialSel::Deriv(d.dx, d.dy),
                d.dt,
                &mut self.fields[k],
            )?;
        }
        let mut scratch = vec![0.0; self.response.cols()];
        for comp in 0..self.response.rows() {
            reconstruct_component(a.row(comp), ev, SpatialSel::Operator, ev.j_order, &mut scratch)?;
            self.response.row_mut(comp).copy_from_slice(&scratch);
        }
        Ok(())
    }

    /// Order-0 field of one component.
    pub fn value_field(&self, comp: usize) -> &[f64] {
        &self.fields[self.value_entry[comp]]
    }

    /// LHS response row of one component.
    pub fn response_row(&self, comp: usize) -> &[f64] {
        self.response.row(comp)
    }

    /// Library factor values at one flat point, aligned with the plan.
    pub fn factor_values(&self, flat: usize, buf: &mut [f64]) {
        for (k, e) in self.plan_to_entry.iter().enumerate() {
            buf[k] = self.fields[*e][flat];
        }
    }
}

/// LHS response `Theta A (phi^(J)(t) (x) g(psi(s)))'` at a list of points,
/// one column per point.
pub fn build_response(
    a: &Matrix,
    ev: &BasisEvaluations,
    points: &[(usize, usize)],
) -> Result<Matrix, BasisError> {
    let mut out = Matrix::zeros(a.rows(), points.len());
    for (col, &(s, t)) in points.iter().enumerate() {
        for n in 0..a.rows() {
            out.set(n, col, ev.point_response(a.row(n), s, t)?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Small numeric helpers
// ---------------------------------------------------------------------------

fn draw_inverse_gamma<R: Rng>(rng: &mut R, shape: f64, scale: f64) -> f64 {
    let g: f64 = rand_distr::Gamma::new(shape, 1.0)
        .expect("inverse-gamma shape must be positive")
        .sample(rng);
    (scale.max(1e-300) / g.max(1e-300)).max(VARIANCE_FLOOR)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Solution of the symmetric system restricted to the selected columns of the
/// Gram matrix, with an SVD pseudo-inverse fallback for rank deficiency.
struct QuadSolve {
    /// `(F'F)^{-1} h` over the selected columns.
    solution: Vec<f64>,
    /// `h' (F'F)^{-1} h`.
    quad_form: f64,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

fn solve_selected(gram: &Matrix, h: &[f64], sel: &[usize]) -> QuadSolve {
    let k = sel.len();
    if k == 0 {
        return QuadSolve { solution: Vec::new(), quad_form: 0.0, chol: None };
    }
    let mut sub = nalgebra::DMatrix::zeros(k, k);
    for (i, &di) in sel.iter().enumerate() {
        for (j, &dj) in sel.iter().enumerate() {
            sub[(i, j)] = gram.get(di, dj);
        }
    }
    let rhs = nalgebra::DVector::from_iterator(k, sel.iter().map(|&d| h[d]));
    match nalgebra::Cholesky::new(sub.clone()) {
        Some(chol) => {
            let sol = chol.solve(&rhs);
            let quad = rhs.dot(&sol);
            QuadSolve { solution: sol.iter().copied().collect(), quad_form: quad, chol: Some(chol) }
        }
        None => {
            log::warn!("rank-deficient design over {k} active terms; using pseudo-inverse");
            let svd = sub.svd(true, true);
            let sol = svd.solve(&rhs, 1e-12).unwrap_or_else(|_| nalgebra::DVector::zeros(k));
            let quad = rhs.dot(&sol);
            QuadSolve { solution: sol.iter().copied().collect(), quad_form: quad, chol: None }
        }
    }
}

// ---------------------------------------------------------------------------
// Gibbs steps
// ---------------------------------------------------------------------------

/// The g-prior residual statistic `y_gamma = (y'y - (g/(g+1)) h'(F'F)^{-1}h)/2`
/// for one active set, floored away from zero for the log ratio.
fn quad_scale(gram: &Matrix, h: &[f64], yy: f64, sel: &[usize], g: f64) -> f64 {
    let shrink = g / (g + 1.0);
    let q = solve_selected(gram, h, sel).quad_form;
    (0.5 * (yy - shrink * q)).max(1e-300)
}

fn log_inclusion_ratio(y1: f64, y0: f64, g: f64, m: f64) -> f64 {
    0.5 * (g + 1.0).ln() + (m / 2.0 - 1.0) * (y1.ln() - y0.ln())
}

/// Spike-and-slab update of the inclusion matrix over a fresh subsample.
/// Sites are visited in a random scan order; each site draws from the
/// marginalized conditional with `R* = sqrt(g+1) (y_1/y_0)^(m/2-1)`.
pub fn update_gamma<R: Rng>(
    state: &mut ModelState,
    ctx: &SamplerContext,
    cache: &FieldCache,
    subsample: &[usize],
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<(), SamplerError> {
    let m = subsample.len();
    let d_count = ctx.lib.len();
    let n_count = ctx.n_components();
    if m < d_count + 2 {
        return Err(SamplerError::Config(format!(
            "subsample size {m} is too small for {d_count} candidate terms"
        )));
    }
    let g = cfg.g.unwrap_or(m as f64);
    let (s_count, _, _) = ctx.obs.dims();

    // Library design on the subsample.
    let mut factor_buf = vec![0.0; ctx.lib.plan().state_factors.len()];
    let mut design: Vec<Vec<f64>> = vec![vec![0.0; m]; d_count];
    for (j, &flat) in subsample.iter().enumerate() {
        cache.factor_values(flat, &mut factor_buf);
        let (s, t) = (flat % s_count, flat / s_count);
        for (d, col) in design.iter_mut().enumerate() {
            col[j] = ctx.lib.term_value_from_factors(d, &factor_buf, ctx.cov, s, t);
        }
    }
    let mut gram = Matrix::zeros(d_count, d_count);
    for i in 0..d_count {
        for j in i..d_count {
            let dot: f64 = design[i].iter().zip(&design[j]).map(|(a, b)| a * b).sum();
            gram.set(i, j, dot);
            gram.set(j, i, dot);
        }
    }
    let mut h_all = vec![vec![0.0; d_count]; n_count];
    let mut yy_all = vec![0.0; n_count];
    for n in 0..n_count {
        let resp = cache.response_row(n);
        let y: Vec<f64> = subsample.iter().map(|&flat| resp[flat]).collect();
        yy_all[n] = y.iter().map(|v| v * v).sum();
        for d in 0..d_count {
            h_all[n][d] = design[d].iter().zip(&y).map(|(a, b)| a * b).sum();
        }
    }

    let mut sites: Vec<(usize, usize)> =
        (0..n_count).flat_map(|n| (0..d_count).map(move |d| (n, d))).collect();
    sites.shuffle(rng);
    for (n, d) in sites {
        let mut active: Vec<usize> =
            state.active_terms(n).into_iter().filter(|&x| x != d).collect();
        let y0 = quad_scale(&gram, &h_all[n], yy_all[n], &active, g);
        active.push(d);
        active.sort_unstable();
        let y1 = quad_scale(&gram, &h_all[n], yy_all[n], &active, g);
        let ln_r = log_inclusion_ratio(y1, y0, g, m as f64);
        let pi = state.pi[n].clamp(1e-15, 1.0 - 1e-15);
        let p = sigmoid(-(ln_r + ((1.0 - pi) / pi).ln()));
        let u: f64 = rng.random();
        state.set_gamma(n, d, u < p);
    }
    Ok(())
}

/// Conditional inclusion probability for one site given an explicit design;
/// the quantity the random-scan update draws from. Exposed for the
/// enumeration oracle tests.
pub fn gamma_site_probability(
    design: &[Vec<f64>],
    response: &[f64],
    active_others: &[usize],
    site: usize,
    g: f64,
    pi: f64,
) -> f64 {
    let d_count = design.len();
    let mut gram = Matrix::zeros(d_count, d_count);
    for i in 0..d_count {
        for j in i..d_count {
            let dot: f64 = design[i].iter().zip(&design[j]).map(|(a, b)| a * b).sum();
            gram.set(i, j, dot);
            gram.set(j, i, dot);
        }
    }
    let h: Vec<f64> = design
        .iter()
        .map(|col| col.iter().zip(response).map(|(a, b)| a * b).sum())
        .collect();
    let yy: f64 = response.iter().map(|v| v * v).sum();
    let m = response.len() as f64;
    let mut without: Vec<usize> = active_others.iter().copied().filter(|&x| x != site).collect();
    let y0 = quad_scale(&gram, &h, yy, &without, g);
    without.push(site);
    without.sort_unstable();
    let y1 = quad_scale(&gram, &h, yy, &without, g);
    let ln_r = log_inclusion_ratio(y1, y0, g, m);
    let pi = pi.clamp(1e-15, 1.0 - 1e-15);
    sigmoid(-(ln_r + ((1.0 - pi) / pi).ln()))
}

/// Conjugate Beta update of the per-component inclusion rates.
pub fn update_pi<R: Rng>(state: &mut ModelState, cfg: &ModelConfig, rng: &mut R) {
    let d_count = state.n_terms();
    for n in 0..state.n_components() {
        let k = state.active_terms(n).len();
        let beta =
            rand_distr::Beta::new(cfg.prior_a + k as f64, cfg.prior_b + (d_count - k) as f64)
                .expect("Beta parameters are positive");
        state.pi[n] = beta.sample(rng);
    }
}

/// Full-data sufficient statistics for the M and sigma_U draws of one
/// component.
pub struct ComponentQuad {
    pub active: Vec<usize>,
    /// Posterior mean `(g/(g+1)) (F'F)^{-1} F'y` over the active terms.
    pub mean: Vec<f64>,
    /// `y_gamma`, the g-prior residual scale.
    pub quad_scale: f64,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    shrink: f64,
}

/// Evaluate the active library columns over the full grid and reduce the
/// per-component statistics. `g` follows the full-data convention.
pub fn component_quads(
    state: &ModelState,
    ctx: &SamplerContext,
    cache: &FieldCache,
    g: f64,
) -> Result<Vec<ComponentQuad>, SamplerError> {
    let st = ctx.st();
    let (s_count, _, _) = ctx.obs.dims();
    let n_count = ctx.n_components();

    let mut union: Vec<usize> = Vec::new();
    for n in 0..n_count {
        for d in state.active_terms(n) {
            if !union.contains(&d) {
                union.push(d);
            }
        }
    }
    union.sort_unstable();

    // Term values over the grid for every active term.
    let n_factors = ctx.lib.plan().state_factors.len();
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(union.len());
    for &d in &union {
        let mut v = vec![0.0; st];
        parallel::fill_chunks(&mut v, |range, slice| {
            let mut buf = vec![0.0; n_factors];
            for (k, flat) in range.enumerate() {
                cache.factor_values(flat, &mut buf);
                let (s, t) = (flat % s_count, flat / s_count);
                slice[k] = ctx.lib.term_value_from_factors(d, &buf, ctx.cov, s, t);
            }
        });
        values.push(v);
    }

    let u = union.len();
    let mut gram_union = Matrix::zeros(u, u);
    for i in 0..u {
        for j in i..u {
            let dot = parallel::dot(&values[i], &values[j]);
            gram_union.set(i, j, dot);
            gram_union.set(j, i, dot);
        }
    }

    let shrink = g / (g + 1.0);
    let mut out = Vec::with_capacity(n_count);
    for n in 0..n_count {
        let active = state.active_terms(n);
        let resp = cache.response_row(n);
        let yy = parallel::dot(resp, resp);
        let h_union: Vec<f64> = (0..u).map(|i| parallel::dot(&values[i], resp)).collect();
        let sel: Vec<usize> =
            active.iter().map(|d| union.iter().position(|x| x == d).unwrap()).collect();
        let solve = solve_selected(&gram_union, &h_union, &sel);
        let mean: Vec<f64> = solve.solution.iter().map(|v| shrink * v).collect();
        let quad = (0.5 * (yy - shrink * solve.quad_form)).max(1e-300);
        out.push(ComponentQuad { active, mean, quad_scale: quad, chol: solve.chol, shrink });
    }
    Ok(out)
}

/// Draw M given gamma: zeros on inactive sites, `N(g_gamma, sigma2_U G_gamma)`
/// on the active block.
pub fn update_m<R: Rng>(state: &mut ModelState, quads: &[ComponentQuad], rng: &mut R) {
    for (n, quad) in quads.iter().enumerate() {
        for d in 0..state.n_terms() {
            state.m.set(n, d, 0.0);
        }
        let k = quad.active.len();
        if k == 0 {
            continue;
        }
        let z = nalgebra::DVector::from_iterator(
            k,
            (0..k).map(|_| {
                let v: f64 = rand_distr::StandardNormal.sample(rng);
                v
            }),
        );
        // Covariance is sigma2 * shrink * (F'F)^{-1}: solve L'w = z.
        let w = match &quad.chol {
            Some(chol) => chol
                .l()
                .transpose()
                .solve_upper_triangular(&z)
                .unwrap_or_else(|| nalgebra::DVector::zeros(k)),
            None => nalgebra::DVector::zeros(k),
        };
        let sd_scale = (state.sigma2_u[n] * quad.shrink).sqrt();
        for (i, &d) in quad.active.iter().enumerate() {
            state.m.set(n, d, quad.mean[i] + sd_scale * w[i]);
        }
    }
}

/// Inverse-Gamma draw of the process variances with shape `(S*T)/2` and the
/// g-prior residual scale.
pub fn update_sigma_u<R: Rng>(
    state: &mut ModelState,
    quads: &[ComponentQuad],
    st: usize,
    rng: &mut R,
) {
    for (n, quad) in quads.iter().enumerate() {
        if quad.quad_scale <= 1e-300 {
            log::warn!("near-zero sigma_U scale for component {n}; draws are floored");
        }
        state.sigma2_u[n] = draw_inverse_gamma(rng, st as f64 / 2.0, quad.quad_scale);
    }
}

/// Inverse-Gamma draw of the measurement variances over observed residuals,
/// then the Half-t auxiliaries.
pub fn update_sigma_v<R: Rng>(
    state: &mut ModelState,
    ctx: &SamplerContext,
    cache: &FieldCache,
    cfg: &ModelConfig,
    rng: &mut R,
) {
    let (s_count, t_count, n_count) = ctx.obs.dims();
    let st = s_count * t_count;
    for n in 0..n_count {
        let field = cache.value_field(n);
        let data = ctx.obs.data().component(n);
        let mask = &ctx.obs.mask()[n * st..(n + 1) * st];
        let rss = parallel::sum_by(st, |flat| {
            if mask[flat] {
                let r = data[flat] - field[flat];
                r * r
            } else {
                0.0
            }
        });
        let m_n = mask.iter().filter(|m| **m).count();
        let shape = (m_n as f64 + cfg.nu_v) / 2.0;
        let scale = cfg.nu_v / state.a_v[n] + 0.5 * rss;
        state.sigma2_v[n] = draw_inverse_gamma(rng, shape, scale);
        let aux_scale = cfg.nu_v / state.sigma2_v[n] + 1.0 / (cfg.a_v * cfg.a_v);
        state.a_v[n] = draw_inverse_gamma(rng, (cfg.nu_v + 1.0) / 2.0, aux_scale);
    }
    let _ = t_count;
}

// ---------------------------------------------------------------------------
// Loss gradient and the A update
// ---------------------------------------------------------------------------

/// Accumulate the gradient of the per-point negative log posterior into
/// `grad`: the data misfit over observed components, the process misfit
/// between the LHS response and `M f` (including the chain rule through the
/// library), and `1/(S T)` of the elastic-net penalty.
#[allow(clippy::too_many_arguments)]
fn loss_grad_into(
    state: &ModelState,
    ctx: &SamplerContext,
    cache: Option<&FieldCache>,
    lambda1: f64,
    lambda2: f64,
    s: usize,
    t: usize,
    grad: &mut Matrix,
    factor_buf: &mut [f64],
) -> Result<(), SamplerError> {
    let (s_count, _, n_count) = ctx.obs.dims();
    let st = ctx.st();
    let flat = t * s_count + s;
    let d_count = ctx.lib.len();

    match cache {
        Some(c) => c.factor_values(flat, factor_buf),
        None => ctx.lib.factor_values_at(&state.a, ctx.ev, s, t, factor_buf)?,
    }

    // Data misfit rows: ((A b0)_n - v_n) / sigma2_V(n) * b0.
    let psi0 = &ctx.ev.psi_rows(0, 0)?[s];
    let phi0 = &ctx.ev.phi_rows(0)?[t];
    for n in 0..n_count {
        if !ctx.obs.present(s, t, n) {
            continue;
        }
        let u0 = match cache {
            Some(c) => c.value_field(n)[flat],
            None => ctx.ev.point_value(state.a.row(n), s, t, DerivSpec::default())?,
        };
        let coeff = (u0 - ctx.obs.value(s, t, n)) / state.sigma2_v[n];
        let row = grad.row_mut(n);
        for_each_kron(phi0, psi0, ctx.ev.p(), |idx, v| row[idx] += coeff * v);
    }

    // Process misfit: (response - M f) / sigma2_U rows against b_J.
    let mut f_vals = vec![0.0; d_count];
    for (d, fv) in f_vals.iter_mut().enumerate() {
        *fv = ctx.lib.term_value_from_factors(d, factor_buf, ctx.cov, s, t);
    }
    let phi_j = &ctx.ev.phi_rows(ctx.ev.j_order)?[t];
    let psi_g = &ctx.ev.operator_rows()[s];
    let mut resid = vec![0.0; n_count];
    for n in 0..n_count {
        let resp = match cache {
            Some(c) => c.response_row(n)[flat],
            None => ctx.ev.point_response(state.a.row(n), s, t)?,
        };
        let mf: f64 = (0..d_count).map(|d| state.m.get(n, d) * f_vals[d]).sum();
        resid[n] = resp - mf;
        let coeff = resid[n] / state.sigma2_u[n];
        let row = grad.row_mut(n);
        for_each_kron(phi_j, psi_g, ctx.ev.p(), |idx, v| row[idx] += coeff * v);
    }

    // Chain rule through the library: weight_d = -(M' Sigma_U^{-1} resid)_d.
    for d in 0..d_count {
        let mut w = 0.0;
        for n in 0..n_count {
            w -= state.m.get(n, d) * resid[n] / state.sigma2_u[n];
        }
        if w != 0.0 {
            accumulate_term_gradient(ctx.lib, d, factor_buf, ctx.cov, ctx.ev, s, t, w, grad)?;
        }
    }

    // Elastic-net share for one point.
    let inv_st = 1.0 / st as f64;
    for n in 0..n_count {
        let a_row = state.a.row(n);
        let g_row = grad.row_mut(n);
        for (gv, av) in g_row.iter_mut().zip(a_row) {
            let sign = if *av > 0.0 {
                1.0
            } else if *av < 0.0 {
                -1.0
            } else {
                0.0
            };
            *gv += inv_st * (lambda1 * sign + 2.0 * lambda2 * av);
        }
    }
    Ok(())
}

/// Gradient of the per-point loss with respect to `A`.
pub fn loss_grad(
    state: &ModelState,
    ctx: &SamplerContext,
    cfg: &ModelConfig,
    point: (usize, usize),
) -> Result<Matrix, SamplerError> {
    let mut grad = Matrix::zeros(state.a.rows(), state.a.cols());
    let mut factor_buf = vec![0.0; ctx.lib.plan().state_factors.len()];
    loss_grad_into(
        state,
        ctx,
        None,
        cfg.lambda1,
        cfg.lambda2,
        point.0,
        point.1,
        &mut grad,
        &mut factor_buf,
    )?;
    Ok(grad)
}

/// Stochastic gradient step: draw a uniform minibatch without replacement and
/// move `A` against the averaged per-point gradient, row-scaled by kappa.
pub fn update_a<R: Rng>(
    state: &mut ModelState,
    ctx: &SamplerContext,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<(), SamplerError> {
    let st = ctx.st();
    let batch_size = cfg.minibatch.min(st);
    let batch: Vec<usize> = rand::seq::index::sample(rng, st, batch_size).into_iter().collect();
    update_a_with_batch(state, ctx, None, &batch, cfg)
}

pub(crate) fn update_a_with_batch(
    state: &mut ModelState,
    ctx: &SamplerContext,
    cache: Option<&FieldCache>,
    batch: &[usize],
    cfg: &ModelConfig,
) -> Result<(), SamplerError> {
    let (s_count, _, _) = ctx.obs.dims();
    let mut grad = Matrix::zeros(state.a.rows(), state.a.cols());
    let mut factor_buf = vec![0.0; ctx.lib.plan().state_factors.len()];
    for &flat in batch {
        let (s, t) = (flat % s_count, flat / s_count);
        loss_grad_into(
            state,
            ctx,
            cache,
            cfg.lambda1,
            cfg.lambda2,
            s,
            t,
            &mut grad,
            &mut factor_buf,
        )?;
    }
    let scale = 1.0 / batch.len().max(1) as f64;
    for n in 0..state.a.rows() {
        let kappa = cfg.kappa[n] * scale;
        let g_row = grad.row(n).to_vec();
        let a_row = state.a.row_mut(n);
        for (av, gv) in a_row.iter_mut().zip(&g_row) {
            *av -= kappa * gv;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Ridge fit of the observed data onto the order-0 design, per component.
/// Complete components solve exactly through the Kronecker eigendecomposition
/// of the design Gram; masked components run preconditioned CG with the
/// complete-data solve as the preconditioner.
/// Second-difference roughness Gram `D2'D2` over `n` coefficients, scaled so
/// `weight` is comparable across axis sizes.
fn roughness_gram(n: usize, weight: f64) -> nalgebra::DMatrix<f64> {
    let mut r = nalgebra::DMatrix::zeros(n, n);
    if weight <= 0.0 || n < 3 {
        return r;
    }
    for row in 0..n - 2 {
        let pattern = [(row, 1.0), (row + 1, -2.0), (row + 2, 1.0)];
        for (i, vi) in pattern {
            for (j, vj) in pattern {
                r[(i, j)] += weight * vi * vj;
            }
        }
    }
    r
}

fn ridge_fit(ctx: &SamplerContext, lambda2: f64, init_smooth: f64) -> Result<Matrix, SamplerError> {
    let ev = ctx.ev;
    let (s_count, t_count, n_count) = ctx.obs.dims();
    let st = s_count * t_count;
    let (p, q) = (ev.p(), ev.q());
    let pq = p * q;

    let psi = ev.psi(0, 0)?;
    let phi = ev.phi(0)?;

    // Per-factor Grams with P-spline roughness penalties. For product grids
    // the spatial Gram factors per axis, so each axis is penalized inside the
    // product; weights scale with the data mass per coefficient so
    // `init_smooth` behaves uniformly across problems.
    let axis_gram = |m: &Matrix, weight: f64| -> nalgebra::DMatrix<f64> {
        let (rows, cols) = (m.rows(), m.cols());
        let mut g = nalgebra::DMatrix::zeros(cols, cols);
        for a in 0..cols {
            for b in a..cols {
                let mut acc = 0.0;
                for r in 0..rows {
                    acc += m.get(r, a) * m.get(r, b);
                }
                g[(a, b)] = acc;
                g[(b, a)] = acc;
            }
        }
        g + roughness_gram(cols, weight * rows as f64 / cols as f64)
    };
    let spatial_gram = |smooth: f64| -> nalgebra::DMatrix<f64> {
        match ev.axis_matrices() {
            (mx, None) => axis_gram(mx, smooth),
            (mx, Some(my)) => {
                let gx = axis_gram(mx, smooth);
                let gy = axis_gram(my, smooth);
                let (px, py) = (gx.nrows(), gy.nrows());
                let mut out = nalgebra::DMatrix::zeros(p, p);
                for ay in 0..py {
                    for by in 0..py {
                        for ax in 0..px {
                            for bx in 0..px {
                                out[(ay * px + ax, by * px + bx)] = gy[(ay, by)] * gx[(ax, bx)];
                            }
                        }
                    }
                }
                out
            }
        }
    };
    let gram_s = spatial_gram(init_smooth);
    let gram_t = axis_gram(ev.time_matrix(), init_smooth);
    let gram_s_plain = spatial_gram(0.0);
    let gram_t_plain = axis_gram(ev.time_matrix(), 0.0);
    let _ = (psi, phi);
    let eig_s = gram_s.clone().symmetric_eigen();
    let eig_t = gram_t.clone().symmetric_eigen();

    let penalty = lambda2.max(0.0);
    let mut min_denom = f64::INFINITY;
    let mut max_denom = 0.0f64;
    for qq in 0..q {
        for pp in 0..p {
            let d = eig_t.eigenvalues[qq].max(0.0) * eig_s.eigenvalues[pp].max(0.0) + penalty;
            min_denom = min_denom.min(d);
            max_denom = max_denom.max(d);
        }
    }
    if min_denom <= 1e-14 * max_denom {
        return Err(SamplerError::SingularRidge { min_eig: min_denom, penalty });
    }

    // rhs[q*P+p] = sum over observed points of psi(s,p) phi(t,q) v(s,t).
    let masked_adjoint = |values: &[f64], mask: &[bool]| -> Vec<f64> {
        let psi_rows = ev.psi_rows(0, 0).expect("order-0 rows exist");
        let phi_rows = ev.phi_rows(0).expect("order-0 rows exist");
        let mut w = vec![0.0; p * t_count];
        for t in 0..t_count {
            for s in 0..s_count {
                let flat = t * s_count + s;
                if !mask[flat] {
                    continue;
                }
                let v = values[flat];
                let row = &psi_rows[s];
                for (pi, pv) in row.idx.iter().zip(&row.val) {
                    w[*pi as usize * t_count + t] += pv * v;
                }
            }
        }
        let mut rhs = vec![0.0; pq];
        for t in 0..t_count {
            let row = &phi_rows[t];
            for (qi, qv) in row.idx.iter().zip(&row.val) {
                let base = *qi as usize * p;
                for pp in 0..p {
                    rhs[base + pp] += qv * w[pp * t_count + t];
                }
            }
        }
        rhs
    };

    // Exact solve of (complete Gram + lambda I) x = rhs via the spectral form.
    let precond = |rhs: &[f64]| -> Vec<f64> {
        let mut r = nalgebra::DMatrix::zeros(p, q);
        for qq in 0..q {
            for pp in 0..p {
                r[(pp, qq)] = rhs[qq * p + pp];
            }
        }
        let mut z = eig_s.eigenvectors.transpose() * r * &eig_t.eigenvectors;
        for qq in 0..q {
            for pp in 0..p {
                let d = eig_t.eigenvalues[qq].max(0.0) * eig_s.eigenvalues[pp].max(0.0) + penalty;
                z[(pp, qq)] /= d;
            }
        }
        let back = &eig_s.eigenvectors * z * eig_t.eigenvectors.transpose();
        let mut out = vec![0.0; pq];
        for qq in 0..q {
            for pp in 0..p {
                out[qq * p + pp] = back[(pp, qq)];
            }
        }
        out
    };

    let mut a = Matrix::zeros(n_count, pq);
    let mut field_buf = vec![0.0; st];
    for n in 0..n_count {
        let data = ctx.obs.data().component(n);
        let mask = &ctx.obs.mask()[n * st..(n + 1) * st];
        let rhs = masked_adjoint(data, mask);
        if mask.iter().all(|m| *m) {
            a.row_mut(n).copy_from_slice(&precond(&rhs));
            continue;
        }
        // Masked normal equations via preconditioned CG. The operator carries
        // the same roughness penalty as the complete-data system: the penalty
        // part is (penalized Gram - plain Gram) applied through the Kronecker
        // factors.
        let kron_apply = |gs: &nalgebra::DMatrix<f64>, gt: &nalgebra::DMatrix<f64>, x: &[f64]| {
            let mut xm = nalgebra::DMatrix::zeros(p, q);
            for qq in 0..q {
                for pp in 0..p {
                    xm[(pp, qq)] = x[qq * p + pp];
                }
            }
            let ym = gs * xm * gt.transpose();
            let mut out = vec![0.0; pq];
            for qq in 0..q {
                for pp in 0..p {
                    out[qq * p + pp] = ym[(pp, qq)];
                }
            }
            out
        };
        let apply = |x: &[f64], field_buf: &mut Vec<f64>| -> Vec<f64> {
            reconstruct_component(x, ev, SpatialSel::Deriv(0, 0), 0, field_buf)
                .expect("order-0 reconstruction");
            let mut out = masked_adjoint(field_buf, mask);
            let pen_full = kron_apply(&gram_s, &gram_t, x);
            let plain = kron_apply(&gram_s_plain, &gram_t_plain, x);
            for ((o, xv), (pf, pl)) in
                out.iter_mut().zip(x).zip(pen_full.iter().zip(&plain))
            {
                *o += penalty * xv + (pf - pl);
            }
            out
        };
        let mut x = precond(&rhs);
        let mut r: Vec<f64> = {
            let ax = apply(&x, &mut field_buf);
            rhs.iter().zip(&ax).map(|(b, v)| b - v).collect()
        };
        let mut z = precond(&r);
        let mut p_dir = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let mut converged = false;
        for _ in 0..500 {
            let r_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r_norm <= 1e-12 * rhs_norm {
                converged = true;
                break;
            }
            let ap = apply(&p_dir, &mut field_buf);
            let pap: f64 = p_dir.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for i in 0..pq {
                x[i] += alpha * p_dir[i];
                r[i] -= alpha * ap[i];
            }
            z = precond(&r);
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..pq {
                p_dir[i] = z[i] + beta * p_dir[i];
            }
        }
        if !converged {
            let r_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r_norm > 1e-6 * rhs_norm {
                return Err(SamplerError::RidgeNotConverged { residual: r_norm / rhs_norm });
            }
            log::warn!("ridge CG stopped early at relative residual {:.2e}", r_norm / rhs_norm);
        }
        a.row_mut(n).copy_from_slice(&x);
    }
    Ok(a)
}

/// Initial state: ridge-fit coefficients, all-active gamma, one conditional M
/// draw, and variances from residual moments.
pub fn init_state<R: Rng>(
    ctx: &SamplerContext,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<ModelState, SamplerError> {
    let n_count = ctx.n_components();
    let d_count = ctx.lib.len();
    let st = ctx.st();
    let a = ridge_fit(ctx, cfg.lambda2, cfg.init_smooth)?;
    let mut state = ModelState {
        a,
        m: Matrix::zeros(n_count, d_count),
        gamma: vec![true; n_count * d_count],
        pi: vec![cfg.prior_a / (cfg.prior_a + cfg.prior_b); n_count],
        sigma2_u: vec![1.0; n_count],
        sigma2_v: vec![1.0; n_count],
        a_v: vec![1.0; n_count],
    };
    let mut cache = FieldCache::new(ctx);
    cache.recompute(&state.a, ctx.ev)?;

    // Measurement variances from observed residual moments.
    for n in 0..n_count {
        let field = cache.value_field(n);
        let data = ctx.obs.data().component(n);
        let mask = &ctx.obs.mask()[n * st..(n + 1) * st];
        let mut rss = 0.0;
        let mut count = 0usize;
        for flat in 0..st {
            if mask[flat] {
                let r = data[flat] - field[flat];
                rss += r * r;
                count += 1;
            }
        }
        state.sigma2_v[n] = (rss / count.max(1) as f64).max(VARIANCE_FLOOR);
        state.a_v[n] = draw_inverse_gamma(
            rng,
            (cfg.nu_v + 1.0) / 2.0,
            cfg.nu_v / state.sigma2_v[n] + 1.0 / (cfg.a_v * cfg.a_v),
        );
    }

    // Process variances from the all-active g-prior residual, then one M draw.
    let g_full = cfg.g.unwrap_or(st as f64);
    let quads = component_quads(&state, ctx, &cache, g_full)?;
    for (n, quad) in quads.iter().enumerate() {
        state.sigma2_u[n] = (2.0 * quad.quad_scale / st as f64).max(VARIANCE_FLOOR);
    }
    update_m(&mut state, &quads, rng);
    Ok(state)
}

// ---------------------------------------------------------------------------
// Chain driver
// ---------------------------------------------------------------------------

fn check_finite(state: &ModelState, iteration: usize) -> Result<(), SamplerError> {
    let bad = |name: &str| {
        Err(SamplerError::Abort { iteration, reason: format!("{name} contains a non-finite value") })
    };
    if state.a.values().iter().any(|v| !v.is_finite()) {
        return bad("A");
    }
    if state.m.values().iter().any(|v| !v.is_finite()) {
        return bad("M");
    }
    if state.sigma2_u.iter().chain(&state.sigma2_v).any(|v| !v.is_finite() || *v <= 0.0) {
        return bad("variance vector");
    }
    Ok(())
}

/// Resolved subsampling plan for a run.
#[derive(Debug, Clone)]
pub struct SubsamplePlan {
    pub condition_number: Option<f64>,
    pub beta: f64,
    pub size: usize,
}

/// Resolve beta and the gamma-step subsample size, computing the library
/// condition number on the initial fit when the config does not pin them.
pub fn resolve_subsample(
    ctx: &SamplerContext,
    state: &ModelState,
    cfg: &ModelConfig,
) -> Result<SubsamplePlan, SamplerError> {
    let st = ctx.st();
    let d_count = ctx.lib.len();
    let floor = (d_count + 2).min(st);
    if let Some(size) = cfg.subsample {
        return Ok(SubsamplePlan {
            condition_number: None,
            beta: cfg.beta_rss.unwrap_or(0.9),
            size: size.clamp(floor, st),
        });
    }
    let (beta, kappa) = match cfg.beta_rss {
        Some(b) => (b, None),
        None => {
            let (s_count, _, _) = ctx.obs.dims();
            let points: Vec<(usize, usize)> =
                (0..st).map(|flat| (flat % s_count, flat / s_count)).collect();
            let report = condition_number(ctx.lib, &state.a, ctx.ev, ctx.cov, &points)?;
            for name in &report.zero_variance_terms {
                log::warn!("library term `{name}` has zero variance over the grid");
            }
            (diagnostics::choose_beta(report.value), Some(report.value))
        }
    };
    let g = cfg.g.unwrap_or(st as f64);
    let size = diagnostics::subsample_size(g, beta, 1.0, floor)
        .map_err(|e| SamplerError::Config(e.to_string()))?;
    Ok(SubsamplePlan { condition_number: kappa, beta, size: size.min(st) })
}

/// Run the full Gibbs/SGD chain: per iteration, draw the minibatch, then
/// update gamma on a fresh subsample, pi, M, sigma_U, sigma_V, and A.
pub fn run_chain(
    obs: &ObservationSet,
    ev: &BasisEvaluations,
    lib: &FeatureLibrary,
    cov: &CovariateField,
    cfg: &ModelConfig,
) -> Result<ChainSamples, SamplerError> {
    run_chain_with_plan(obs, ev, lib, cov, cfg).map(|(chain, _)| chain)
}

/// [`run_chain`] plus the resolved subsample plan, for logging and manifests.
pub fn run_chain_with_plan(
    obs: &ObservationSet,
    ev: &BasisEvaluations,
    lib: &FeatureLibrary,
    cov: &CovariateField,
    cfg: &ModelConfig,
) -> Result<(ChainSamples, SubsamplePlan), SamplerError> {
    let ctx = SamplerContext::new(obs, ev, lib, cov)?;
    cfg.validate(ctx.n_components())?;
    let st = ctx.st();
    let n_count = ctx.n_components();
    let d_count = lib.len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut chain = ChainSamples {
        n_components: n_count,
        n_terms: d_count,
        burn_in: cfg.burn_in,
        component_names: lib.component_names().to_vec(),
        term_names: lib.term_names().iter().map(|s| s.to_string()).collect(),
        records: Vec::with_capacity(cfg.iterations),
        a_draws: Vec::new(),
    };
    if cfg.iterations == 0 {
        let plan = SubsamplePlan { condition_number: None, beta: cfg.beta_rss.unwrap_or(0.9), size: 0 };
        return Ok((chain, plan));
    }

    let mut state = init_state(&ctx, cfg, &mut rng)?;
    let plan = resolve_subsample(&ctx, &state, cfg)?;
    log::info!(
        "subsample plan: beta = {}, size = {}{}",
        plan.beta,
        plan.size,
        plan.condition_number
            .map(|k| format!(", condition number = {k:.4e}"))
            .unwrap_or_default()
    );
    let g_full = cfg.g.unwrap_or(st as f64);
    let batch_size = cfg.minibatch.min(st);
    let mut cache = FieldCache::new(&ctx);

    for iter in 0..cfg.iterations {
        cache
            .recompute(&state.a, ev)
            .map_err(|e| SamplerError::Abort { iteration: iter, reason: e.to_string() })?;

        // 1: minibatch for the A step.
        let batch: Vec<usize> =
            rand::seq::index::sample(&mut rng, st, batch_size).into_iter().collect();
        // 2: inclusion indicators on a fresh subsample.
        let subsample: Vec<usize> =
            rand::seq::index::sample(&mut rng, st, plan.size).into_iter().collect();
        update_gamma(&mut state, &ctx, &cache, &subsample, cfg, &mut rng)?;
        // 3: inclusion rates.
        update_pi(&mut state, cfg, &mut rng);
        // 4 and 5: coefficients and process variances share the full-data stats.
        let quads = component_quads(&state, &ctx, &cache, g_full)?;
        update_m(&mut state, &quads, &mut rng);
        update_sigma_u(&mut state, &quads, st, &mut rng);
        // 6: measurement variances.
        update_sigma_v(&mut state, &ctx, &cache, cfg, &mut rng);
        // 7: coefficient step on the minibatch.
        update_a_with_batch(&mut state, &ctx, Some(&cache), &batch, cfg)?;

        check_finite(&state, iter)?;
        chain.records.push(SweepRecord {
            m: state.m.values().to_vec(),
            gamma: state.gamma.clone(),
            pi: state.pi.clone(),
            sigma2_u: state.sigma2_u.clone(),
            sigma2_v: state.sigma2_v.clone(),
        });
        if cfg.thin_a > 0 && iter % cfg.thin_a == 0 {
            chain.a_draws.push((iter, state.a.values().to_vec()));
        }
        if (iter + 1) % 500 == 0 {
            log::info!("iteration {}/{}", iter + 1, cfg.iterations);
        }
    }
    Ok((chain, plan))
}

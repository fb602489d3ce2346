//! The candidate feature library: declarative term definitions, evaluation of
//! every term at space-time points through the basis expansion, and the
//! analytic gradient of each term with respect to the basis coefficients.
//!
//! A term is a product of factors; powers are stored as repeated factors so a
//! single product rule covers the whole gradient. Covariate factors are
//! constants with respect to the coefficients and contribute no gradient.

use thiserror::Error;

use crate::basis::{for_each_kron, BasisError, BasisEvaluations, DerivSpec};
use crate::tensor::{Matrix, Tensor3};

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("term has no factors")]
    EmptyTerm,
    #[error("duplicate library term `{0}`")]
    DuplicateTerm(String),
    #[error("component index {0} out of range ({1} components)")]
    ComponentOutOfRange(usize, usize),
    #[error("covariate index {0} out of range ({1} covariates)")]
    CovariateOutOfRange(usize, usize),
    #[error("library must contain at least one term")]
    EmptyLibrary,
    #[error("condition number needs more evaluation points than terms ({points} <= {terms})")]
    InsufficientPoints { points: usize, terms: usize },
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("parse error at byte {position}: {message}")]
    Parse { position: usize, message: String },
}

/// One multiplicative factor of a library term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Factor {
    /// A derivative of one state component, evaluated through the basis.
    StateDeriv { component: usize, d: DerivSpec },
    /// A known covariate field value.
    Covariate { index: usize },
}

/// Known covariate fields, stored as an `S x T x K` tensor.
#[derive(Debug, Clone)]
pub struct CovariateField {
    values: Tensor3,
}

impl CovariateField {
    pub fn new(values: Tensor3) -> Result<Self, LibraryError> {
        Ok(Self { values })
    }

    pub fn empty(s: usize, t: usize) -> Self {
        Self { values: Tensor3::zeros(s, t, 0) }
    }

    pub fn count(&self) -> usize {
        self.values.dims().2
    }

    pub fn value(&self, s: usize, t: usize, k: usize) -> f64 {
        self.values.get(s, t, k)
    }
}

/// A canonical product of factors.
#[derive(Debug, Clone, PartialEq)]
pub struct TermSpec {
    factors: Vec<Factor>,
    name: String,
}

fn factor_name(f: &Factor, components: &[String], covariates: &[String]) -> String {
    match f {
        Factor::StateDeriv { component, d } => {
            let mut s = components[*component].clone();
            if d.dx + d.dy + d.dt > 0 {
                s.push('_');
                s.push_str(&"x".repeat(d.dx));
                s.push_str(&"y".repeat(d.dy));
                s.push_str(&"t".repeat(d.dt));
            }
            s
        }
        Factor::Covariate { index } => covariates[*index].clone(),
    }
}

impl TermSpec {
    /// Sorts the factors into canonical order and renders the display name,
    /// with repeated factors collapsed to `^k`.
    pub fn new(
        mut factors: Vec<Factor>,
        components: &[String],
        covariates: &[String],
    ) -> Result<Self, LibraryError> {
        if factors.is_empty() {
            return Err(LibraryError::EmptyTerm);
        }
        for f in &factors {
            match f {
                Factor::StateDeriv { component, .. } if *component >= components.len() => {
                    return Err(LibraryError::ComponentOutOfRange(*component, components.len()))
                }
                Factor::Covariate { index } if *index >= covariates.len() => {
                    return Err(LibraryError::CovariateOutOfRange(*index, covariates.len()))
                }
                _ => {}
            }
        }
        factors.sort();
        let mut pieces: Vec<String> = Vec::new();
        let mut i = 0;
        while i < factors.len() {
            let mut j = i + 1;
            while j < factors.len() && factors[j] == factors[i] {
                j += 1;
            }
            let base = factor_name(&factors[i], components, covariates);
            if j - i > 1 {
                pieces.push(format!("{base}^{}", j - i));
            } else {
                pieces.push(base);
            }
            i = j;
        }
        let name = pieces.join("*");
        Ok(Self { factors, name })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum FactorRef {
    /// Index into the plan's unique state-factor list.
    State(usize),
    /// Covariate index.
    Cov(usize),
}

/// Precomputed evaluation plan: the unique state factors the library touches
/// and, per term, references into that list.
#[derive(Debug, Clone)]
pub(crate) struct LibraryPlan {
    pub state_factors: Vec<(usize, DerivSpec)>,
    pub term_factors: Vec<Vec<FactorRef>>,
}

/// The candidate term set f(.).
#[derive(Debug, Clone)]
pub struct FeatureLibrary {
    terms: Vec<TermSpec>,
    component_names: Vec<String>,
    covariate_names: Vec<String>,
    plan: LibraryPlan,
}

impl FeatureLibrary {
    pub fn new(
        terms: Vec<TermSpec>,
        component_names: Vec<String>,
        covariate_names: Vec<String>,
    ) -> Result<Self, LibraryError> {
        if terms.is_empty() {
            return Err(LibraryError::EmptyLibrary);
        }
        for (i, t) in terms.iter().enumerate() {
            if terms[..i].iter().any(|u| u.name == t.name) {
                return Err(LibraryError::DuplicateTerm(t.name.clone()));
            }
        }
        let plan = build_plan(&terms);
        Ok(Self { terms, component_names, covariate_names, plan })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[TermSpec] {
        &self.terms
    }

    pub fn term(&self, d: usize) -> &TermSpec {
        &self.terms[d]
    }

    pub fn term_names(&self) -> Vec<&str> {
        self.terms.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.terms.iter().position(|t| t.name == name)
    }

    pub fn component_names(&self) -> &[String] {
        &self.component_names
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_components(&self) -> usize {
        self.component_names.len()
    }

    pub(crate) fn plan(&self) -> &LibraryPlan {
        &self.plan
    }

    /// Spatial derivative orders the basis must provide.
    pub fn required_spatial(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> =
            self.plan.state_factors.iter().map(|(_, d)| (d.dx, d.dy)).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Temporal derivative orders the basis must provide.
    pub fn required_temporal(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.plan.state_factors.iter().map(|(_, d)| d.dt).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Highest (dx, dy, dt) orders over all terms, for degree validation.
    pub fn max_orders(&self) -> DerivSpec {
        let mut m = DerivSpec::default();
        for (_, d) in &self.plan.state_factors {
            m.dx = m.dx.max(d.dx);
            m.dy = m.dy.max(d.dy);
            m.dt = m.dt.max(d.dt);
        }
        m
    }

    /// Evaluate the unique state factors at one point into `buf`
    /// (aligned with the plan's `state_factors`).
    pub(crate) fn factor_values_at(
        &self,
        a: &Matrix,
        ev: &BasisEvaluations,
        s: usize,
        t: usize,
        buf: &mut [f64],
    ) -> Result<(), BasisError> {
        for (k, (comp, d)) in self.plan.state_factors.iter().enumerate() {
            buf[k] = ev.point_value(a.row(*comp), s, t, *d)?;
        }
        Ok(())
    }

    /// Term value from precomputed factor values.
    pub(crate) fn term_value_from_factors(
        &self,
        d: usize,
        factor_vals: &[f64],
        cov: &CovariateField,
        s: usize,
        t: usize,
    ) -> f64 {
        let mut acc = 1.0;
        for f in &self.plan.term_factors[d] {
            acc *= match f {
                FactorRef::State(k) => factor_vals[*k],
                FactorRef::Cov(k) => cov.value(s, t, *k),
            };
        }
        acc
    }
}

fn build_plan(terms: &[TermSpec]) -> LibraryPlan {
    let mut state_factors: Vec<(usize, DerivSpec)> = Vec::new();
    for t in terms {
        for f in &t.factors {
            if let Factor::StateDeriv { component, d } = f {
                if !state_factors.contains(&(*component, *d)) {
                    state_factors.push((*component, *d));
                }
            }
        }
    }
    state_factors.sort_unstable();
    let term_factors = terms
        .iter()
        .map(|t| {
            t.factors
                .iter()
                .map(|f| match f {
                    Factor::StateDeriv { component, d } => FactorRef::State(
                        state_factors.iter().position(|sf| sf == &(*component, *d)).unwrap(),
                    ),
                    Factor::Covariate { index } => FactorRef::Cov(*index),
                })
                .collect()
        })
        .collect();
    LibraryPlan { state_factors, term_factors }
}

/// Evaluate one term at a point: the product of its factor values, where a
/// state factor is `(Theta A (phi^(dt)(t) (x) psi^(dx,dy)(s))')_n`.
pub fn eval_term(
    term: &TermSpec,
    a: &Matrix,
    ev: &BasisEvaluations,
    cov: &CovariateField,
    s: usize,
    t: usize,
) -> Result<f64, LibraryError> {
    let mut acc = 1.0;
    for f in &term.factors {
        acc *= match f {
            Factor::StateDeriv { component, d } => ev.point_value(a.row(*component), s, t, *d)?,
            Factor::Covariate { index } => {
                if *index >= cov.count() {
                    return Err(LibraryError::CovariateOutOfRange(*index, cov.count()));
                }
                cov.value(s, t, *index)
            }
        };
    }
    Ok(acc)
}

/// Evaluate the whole library at a list of points; column order follows
/// `points`, rows follow the library term order.
pub fn eval_library(
    lib: &FeatureLibrary,
    a: &Matrix,
    ev: &BasisEvaluations,
    cov: &CovariateField,
    points: &[(usize, usize)],
) -> Result<Matrix, LibraryError> {
    let d_count = lib.len();
    let mut out = Matrix::zeros(d_count, points.len());
    let mut factor_vals = vec![0.0; lib.plan().state_factors.len()];
    for (col, &(s, t)) in points.iter().enumerate() {
        lib.factor_values_at(a, ev, s, t, &mut factor_vals)?;
        for d in 0..d_count {
            out.set(d, col, lib.term_value_from_factors(d, &factor_vals, cov, s, t));
        }
    }
    Ok(out)
}

/// Accumulate `weight * d(term)/dA` into `grad` (same shape as `A`), given the
/// term's factor values at the point. Product rule over the state factors;
/// covariate factors are constants.
pub(crate) fn accumulate_term_gradient(
    lib: &FeatureLibrary,
    term_idx: usize,
    factor_vals: &[f64],
    cov: &CovariateField,
    ev: &BasisEvaluations,
    s: usize,
    t: usize,
    weight: f64,
    grad: &mut Matrix,
) -> Result<(), LibraryError> {
    let refs = &lib.plan().term_factors[term_idx];
    for (i, fr) in refs.iter().enumerate() {
        let FactorRef::State(k) = fr else { continue };
        let (component, d) = lib.plan().state_factors[*k];
        let mut coeff = weight;
        for (j, other) in refs.iter().enumerate() {
            if j == i {
                continue;
            }
            coeff *= match other {
                FactorRef::State(k2) => factor_vals[*k2],
                FactorRef::Cov(c) => cov.value(s, t, *c),
            };
        }
        if coeff == 0.0 {
            continue;
        }
        let psi = &ev.psi_rows(d.dx, d.dy)?[s];
        let phi = &ev.phi_rows(d.dt)?[t];
        let row = grad.row_mut(component);
        for_each_kron(phi, psi, ev.p(), |idx, v| row[idx] += coeff * v);
    }
    Ok(())
}

/// Gradient of one term with respect to every entry of `A`.
pub fn grad_term(
    term: &TermSpec,
    lib: &FeatureLibrary,
    a: &Matrix,
    ev: &BasisEvaluations,
    cov: &CovariateField,
    s: usize,
    t: usize,
) -> Result<Matrix, LibraryError> {
    let term_idx = lib
        .terms
        .iter()
        .position(|t2| t2.name == term.name)
        .ok_or_else(|| LibraryError::DuplicateTerm(term.name.clone()))?;
    let mut factor_vals = vec![0.0; lib.plan().state_factors.len()];
    lib.factor_values_at(a, ev, s, t, &mut factor_vals)?;
    let mut grad = Matrix::zeros(a.rows(), a.cols());
    accumulate_term_gradient(lib, term_idx, &factor_vals, cov, ev, s, t, 1.0, &mut grad)?;
    Ok(grad)
}

/// Report from [`condition_number`]: zero-variance terms are dropped from the
/// correlation matrix and listed.
#[derive(Debug, Clone)]
pub struct ConditionReport {
    pub value: f64,
    pub zero_variance_terms: Vec<String>,
}

/// Condition number of the correlation matrix of the library evaluated at
/// `points`: the ratio of the largest to smallest singular value of `F*'F*`
/// after each term's values are standardized.
pub fn condition_number(
    lib: &FeatureLibrary,
    a: &Matrix,
    ev: &BasisEvaluations,
    cov: &CovariateField,
    points: &[(usize, usize)],
) -> Result<ConditionReport, LibraryError> {
    let m = points.len();
    if m <= lib.len() {
        return Err(LibraryError::InsufficientPoints { points: m, terms: lib.len() });
    }
    let f = eval_library(lib, a, ev, cov, points)?;
    let mut standardized: Vec<Vec<f64>> = Vec::new();
    let mut zero_variance = Vec::new();
    for d in 0..lib.len() {
        let row = f.row(d);
        let mean = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let sd = var.sqrt();
        if sd <= 1e-12 * mean.abs().max(1.0) {
            zero_variance.push(lib.term(d).name().to_string());
            continue;
        }
        standardized.push(row.iter().map(|v| (v - mean) / sd).collect());
    }
    let k = standardized.len();
    if k == 0 {
        return Ok(ConditionReport { value: f64::INFINITY, zero_variance_terms: zero_variance });
    }
    let mut corr = nalgebra::DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let dot: f64 =
                standardized[i].iter().zip(&standardized[j]).map(|(x, y)| x * y).sum::<f64>()
                    / m as f64;
            corr[(i, j)] = dot;
            corr[(j, i)] = dot;
        }
    }
    let eig = corr.symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for &v in eig.eigenvalues.iter() {
        let v = v.max(0.0);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let value = if lo <= hi * 1e-15 { f64::INFINITY } else { hi / lo };
    Ok(ConditionReport { value, zero_variance_terms: zero_variance })
}

// ---------------------------------------------------------------------------
// Construction helpers
// ---------------------------------------------------------------------------

/// Default polynomial/derivative library: all monomials in the components up
/// to `max_power` (ordered by total degree), each listed derivative alone and
/// multiplied by every monomial, then covariates alone and interacted with
/// every monomial and derivative. Duplicates collapse to one entry.
pub fn standard_poly_deriv_library(
    components: &[String],
    max_power: usize,
    derivs: &[DerivSpec],
    covariates: &[String],
) -> Result<FeatureLibrary, LibraryError> {
    assert!(max_power >= 1, "max_power must be at least 1");
    let n = components.len();
    let mut monomials: Vec<Vec<Factor>> = Vec::new();
    fn gen(
        n: usize,
        degree: usize,
        start: usize,
        current: &mut Vec<usize>,
        out: &mut Vec<Vec<Factor>>,
    ) {
        if current.len() == degree {
            out.push(
                current
                    .iter()
                    .map(|&c| Factor::StateDeriv { component: c, d: DerivSpec::default() })
                    .collect(),
            );
            return;
        }
        for c in start..n {
            current.push(c);
            gen(n, degree, c, current, out);
            current.pop();
        }
    }
    let mut current: Vec<usize> = Vec::new();
    for degree in 1..=max_power {
        gen(n, degree, 0, &mut current, &mut monomials);
    }

    let mut factors_list: Vec<Vec<Factor>> = monomials.clone();
    for d in derivs {
        for comp in 0..n {
            let df = Factor::StateDeriv { component: comp, d: *d };
            factors_list.push(vec![df]);
            for m in &monomials {
                let mut f = m.clone();
                f.push(df);
                factors_list.push(f);
            }
        }
    }
    for (k, _) in covariates.iter().enumerate() {
        let cf = Factor::Covariate { index: k };
        factors_list.push(vec![cf]);
        for m in &monomials {
            let mut f = m.clone();
            f.push(cf);
            factors_list.push(f);
        }
        for d in derivs {
            for comp in 0..n {
                factors_list.push(vec![Factor::StateDeriv { component: comp, d: *d }, cf]);
            }
        }
    }

    let mut terms: Vec<TermSpec> = Vec::new();
    for f in factors_list {
        let t = TermSpec::new(f, components, covariates)?;
        if !terms.iter().any(|u| u.name == t.name) {
            terms.push(t);
        }
    }
    FeatureLibrary::new(terms, components.to_vec(), covariates.to_vec())
}

/// The 15-term single-component Burgers' candidate set.
pub fn burgers_library() -> FeatureLibrary {
    standard_poly_deriv_library(
        &["u".to_string()],
        3,
        &[DerivSpec::new(1, 0, 0), DerivSpec::new(2, 0, 0), DerivSpec::new(3, 0, 0)],
        &[],
    )
    .expect("static library")
}

/// The 23-term single-component heat-equation candidate set.
pub fn heat_library() -> FeatureLibrary {
    standard_poly_deriv_library(
        &["u".to_string()],
        3,
        &[
            DerivSpec::new(1, 0, 0),
            DerivSpec::new(2, 0, 0),
            DerivSpec::new(0, 1, 0),
            DerivSpec::new(1, 1, 0),
            DerivSpec::new(0, 2, 0),
        ],
        &[],
    )
    .expect("static library")
}

/// The 23-term two-component predator-prey candidate set: monomials to third
/// order, first and second derivatives of both components, and each
/// component's own first-derivative advection products.
pub fn predator_prey_library() -> FeatureLibrary {
    let comps = vec!["u".to_string(), "v".to_string()];
    let parse = |s: &str| parse_term(s, &comps, &[]).expect("static term");
    let names = [
        "u", "u^2", "u^3", "v", "v^2", "v^3", "u*v", "u^2*v", "u*v^2", "u*u_x", "u*u_y", "v*v_x",
        "v*v_y", "u_x", "u_y", "u_xx", "u_yy", "u_xy", "v_x", "v_y", "v_xx", "v_yy", "v_xy",
    ];
    let terms = names.iter().map(|s| parse(s)).collect();
    FeatureLibrary::new(terms, comps, Vec::new()).expect("static library")
}

// ---------------------------------------------------------------------------
// Term grammar
// ---------------------------------------------------------------------------

/// Parse one term over the config grammar: component symbols with optional
/// derivative suffixes (`u_xx`, `v_xy`), covariate names, `^k` powers, and
/// `*` products. Errors carry the byte position.
pub fn parse_term(
    input: &str,
    components: &[String],
    covariates: &[String],
) -> Result<TermSpec, LibraryError> {
    let bytes = input.as_bytes();
    let mut pos = 0usize;
    let mut factors: Vec<Factor> = Vec::new();
    let err = |pos: usize, message: String| LibraryError::Parse { position: pos, message };

    let skip_ws = |pos: &mut usize| {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
    };

    loop {
        skip_ws(&mut pos);
        if pos >= bytes.len() {
            return Err(err(pos, "expected a factor".into()));
        }
        let start = pos;
        if !bytes[pos].is_ascii_alphabetic() {
            return Err(err(pos, format!("expected a name, found `{}`", bytes[pos] as char)));
        }
        while pos < bytes.len() && (bytes[pos].is_ascii_alphanumeric() || bytes[pos] == b'_') {
            pos += 1;
        }
        let word = &input[start..pos];

        let factor = if let Some(k) = covariates.iter().position(|c| c == word) {
            Factor::Covariate { index: k }
        } else if let Some(c) = components.iter().position(|c| c == word) {
            Factor::StateDeriv { component: c, d: DerivSpec::default() }
        } else if let Some(us) = word.rfind('_') {
            let (base, suffix) = (&word[..us], &word[us + 1..]);
            let Some(c) = components.iter().position(|c| c == base) else {
                return Err(err(start, format!("unknown symbol `{word}`")));
            };
            if suffix.is_empty() || !suffix.chars().all(|ch| matches!(ch, 'x' | 'y' | 't')) {
                return Err(err(
                    start + us + 1,
                    format!("derivative suffix `{suffix}` may only contain x, y, t"),
                ));
            }
            let d = DerivSpec::new(
                suffix.chars().filter(|&c| c == 'x').count(),
                suffix.chars().filter(|&c| c == 'y').count(),
                suffix.chars().filter(|&c| c == 't').count(),
            );
            Factor::StateDeriv { component: c, d }
        } else {
            return Err(err(start, format!("unknown symbol `{word}`")));
        };

        // Optional power.
        let mut power = 1usize;
        skip_ws(&mut pos);
        if pos < bytes.len() && bytes[pos] == b'^' {
            pos += 1;
            skip_ws(&mut pos);
            let dstart = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            if dstart == pos {
                return Err(err(pos, "expected an integer exponent after `^`".into()));
            }
            power = input[dstart..pos]
                .parse()
                .map_err(|_| err(dstart, "exponent out of range".into()))?;
            if power == 0 {
                return Err(err(dstart, "exponent must be at least 1".into()));
            }
        }
        for _ in 0..power {
            factors.push(factor);
        }

        skip_ws(&mut pos);
        if pos >= bytes.len() {
            break;
        }
        if bytes[pos] != b'*' {
            return Err(err(
                pos,
                format!("expected `*` or end of term, found `{}`", bytes[pos] as char),
            ));
        }
        pos += 1;
    }
    TermSpec::new(factors, components, covariates)
}

/// Parse a full term list into a library.
pub fn parse_library(
    term_strings: &[String],
    components: &[String],
    covariates: &[String],
) -> Result<FeatureLibrary, LibraryError> {
    let terms = term_strings
        .iter()
        .map(|s| parse_term(s, components, covariates))
        .collect::<Result<Vec<_>, _>>()?;
    FeatureLibrary::new(terms, components.to_vec(), covariates.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{make_bspline, reconstruct_field, OperatorSpec, SpatialBasis, TemporalBasis};

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64)
    }

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn test_setup(n_components: usize) -> (BasisEvaluations, Matrix, CovariateField) {
        let bx = make_bspline((0.0, 1.0), 6, 3).unwrap();
        let bt = make_bspline((0.0, 1.0), 5, 3).unwrap();
        let sb = SpatialBasis::new_1d(bx, grid(0.0, 1.0, 12)).unwrap();
        let tb = TemporalBasis::new(bt, grid(0.0, 1.0, 9)).unwrap();
        let ev = BasisEvaluations::build(
            &sb,
            &tb,
            n_components,
            &[(0, 0), (1, 0), (2, 0), (3, 0)],
            &[0],
            &OperatorSpec::identity(),
            1,
        )
        .unwrap();
        let mut seed = 4242u64;
        let a = Matrix::from_fn(n_components, ev.pq(), |_, _| lcg(&mut seed) - 0.5);
        let (s, t) = ev.dims();
        let mut seed2 = 7u64;
        let cov_vals = Tensor3::from_fn(s, t, 1, |_, _, _| lcg(&mut seed2) + 0.5);
        (ev, a, CovariateField::new(cov_vals).unwrap())
    }

    #[test]
    fn zero_coefficients_give_zero_product_terms() {
        let (ev, _, cov) = test_setup(1);
        let comps = names(&["u"]);
        let term = parse_term("u*u_x", &comps, &[]).unwrap();
        let a = Matrix::zeros(1, ev.pq());
        assert_eq!(eval_term(&term, &a, &ev, &cov, 3, 2).unwrap(), 0.0);
    }

    #[test]
    fn squared_term_matches_reconstruction_oracle() {
        let (ev, a, cov) = test_setup(1);
        let comps = names(&["u"]);
        let term = parse_term("u^2", &comps, &[]).unwrap();
        let field = reconstruct_field(&a, &ev, DerivSpec::default()).unwrap();
        let (s, t) = ev.dims();
        for tt in 0..t {
            for ss in 0..s {
                let direct = field.get(ss, tt, 0) * field.get(ss, tt, 0);
                let got = eval_term(&term, &a, &ev, &cov, ss, tt).unwrap();
                assert!((got - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covariate_term_passes_through() {
        let (ev, a, cov) = test_setup(1);
        let comps = names(&["u"]);
        let term = parse_term("f_y", &comps, &names(&["f_y"])).unwrap();
        assert_eq!(eval_term(&term, &a, &ev, &cov, 5, 3).unwrap(), cov.value(5, 3, 0));
    }

    #[test]
    fn library_columns_match_field_products() {
        let (ev, a, cov) = test_setup(1);
        let lib = burgers_library();
        assert_eq!(lib.len(), 15);
        let u = reconstruct_field(&a, &ev, DerivSpec::default()).unwrap();
        let ux = reconstruct_field(&a, &ev, DerivSpec::new(1, 0, 0)).unwrap();
        let uxx = reconstruct_field(&a, &ev, DerivSpec::new(2, 0, 0)).unwrap();
        let uxxx = reconstruct_field(&a, &ev, DerivSpec::new(3, 0, 0)).unwrap();
        let points: Vec<(usize, usize)> = vec![(0, 0), (3, 4), (7, 2), (11, 8)];
        let f = eval_library(&lib, &a, &ev, &cov, &points).unwrap();
        for (col, &(s, t)) in points.iter().enumerate() {
            let vals = [
                u.get(s, t, 0),
                u.get(s, t, 0).powi(2),
                u.get(s, t, 0).powi(3),
                ux.get(s, t, 0),
                u.get(s, t, 0) * ux.get(s, t, 0),
                u.get(s, t, 0).powi(2) * ux.get(s, t, 0),
                u.get(s, t, 0).powi(3) * ux.get(s, t, 0),
                uxx.get(s, t, 0),
                u.get(s, t, 0) * uxx.get(s, t, 0),
                u.get(s, t, 0).powi(2) * uxx.get(s, t, 0),
                u.get(s, t, 0).powi(3) * uxx.get(s, t, 0),
                uxxx.get(s, t, 0),
                u.get(s, t, 0) * uxxx.get(s, t, 0),
                u.get(s, t, 0).powi(2) * uxxx.get(s, t, 0),
                u.get(s, t, 0).powi(3) * uxxx.get(s, t, 0),
            ];
            for (d, expect) in vals.iter().enumerate() {
                let rel = (f.get(d, col) - expect).abs() / expect.abs().max(1e-10);
                assert!(rel < 1e-10, "term {} at point {col}", lib.term(d).name());
            }
        }
    }

    #[test]
    fn empty_points_and_duplicate_points() {
        let (ev, a, cov) = test_setup(1);
        let lib = burgers_library();
        let f = eval_library(&lib, &a, &ev, &cov, &[]).unwrap();
        assert_eq!((f.rows(), f.cols()), (15, 0));
        let f2 = eval_library(&lib, &a, &ev, &cov, &[(2, 3), (2, 3)]).unwrap();
        for d in 0..15 {
            assert_eq!(f2.get(d, 0), f2.get(d, 1));
        }
    }

    #[test]
    fn burgers_library_terms_exact() {
        let lib = burgers_library();
        let expected = [
            "u", "u^2", "u^3", "u_x", "u*u_x", "u^2*u_x", "u^3*u_x", "u_xx", "u*u_xx", "u^2*u_xx",
            "u^3*u_xx", "u_xxx", "u*u_xxx", "u^2*u_xxx", "u^3*u_xxx",
        ];
        assert_eq!(lib.term_names(), expected);
    }

    #[test]
    fn heat_library_terms_exact() {
        let lib = heat_library();
        let expected = [
            "u", "u^2", "u^3", "u_x", "u*u_x", "u^2*u_x", "u^3*u_x", "u_xx", "u*u_xx", "u^2*u_xx",
            "u^3*u_xx", "u_y", "u*u_y", "u^2*u_y", "u^3*u_y", "u_xy", "u*u_xy", "u^2*u_xy",
            "u^3*u_xy", "u_yy", "u*u_yy", "u^2*u_yy", "u^3*u_yy",
        ];
        assert_eq!(lib.term_names(), expected);
    }

    #[test]
    fn predator_prey_library_terms_exact() {
        let lib = predator_prey_library();
        assert_eq!(lib.len(), 23);
        let expected = [
            "u", "u^2", "u^3", "v", "v^2", "v^3", "u*v", "u^2*v", "u*v^2", "u*u_x", "u*u_y",
            "v*v_x", "v*v_y", "u_x", "u_y", "u_xx", "u_yy", "u_xy", "v_x", "v_y", "v_xx", "v_yy",
            "v_xy",
        ];
        assert_eq!(lib.term_names(), expected);
    }

    #[test]
    fn canonical_naming_dedups_permutations() {
        let comps = names(&["u", "v"]);
        let t1 = parse_term("u*v*u", &comps, &[]).unwrap();
        let t2 = parse_term("v*u^2", &comps, &[]).unwrap();
        assert_eq!(t1.name(), t2.name());
        assert_eq!(t1.name(), "u^2*v");
        let lib = FeatureLibrary::new(vec![t1, t2], comps, vec![]);
        assert!(matches!(lib, Err(LibraryError::DuplicateTerm(_))));
    }

    #[test]
    fn parse_errors_carry_position() {
        let comps = names(&["u"]);
        let e = parse_term("u * w_x", &comps, &[]).unwrap_err();
        match e {
            LibraryError::Parse { position, .. } => assert_eq!(position, 4),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(parse_term("u^0", &comps, &[]).is_err());
        assert!(parse_term("u_z", &comps, &[]).is_err());
        assert!(parse_term("u u", &comps, &[]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (ev, a, cov) = test_setup(2);
        let comps = names(&["u", "v"]);
        let covs = names(&["f_y"]);
        let cases =
            ["u", "u^3", "u*v", "u*u_x", "v*u_xx", "u^2*u_x", "f_y*u_x", "f_y", "u*v^2*u_x"];
        let lib = parse_library(
            &cases.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            &comps,
            &covs,
        )
        .unwrap();
        let h = 1e-6;
        let (s, t) = (5usize, 4usize);
        for term in lib.terms() {
            let g = grad_term(term, &lib, &a, &ev, &cov, s, t).unwrap();
            let mut seed = 2024u64;
            for _ in 0..20 {
                let n = (lcg(&mut seed) * a.rows() as f64) as usize;
                let c = (lcg(&mut seed) * a.cols() as f64) as usize;
                let mut ap = a.clone();
                ap.set(n, c, a.get(n, c) + h);
                let mut am = a.clone();
                am.set(n, c, a.get(n, c) - h);
                let fp = eval_term(term, &ap, &ev, &cov, s, t).unwrap();
                let fm = eval_term(term, &am, &ev, &cov, s, t).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let scale = g.get(n, c).abs().max(1e-4);
                assert!(
                    (g.get(n, c) - fd).abs() / scale < 1e-5,
                    "term {} entry ({n},{c}): analytic {} vs fd {fd}",
                    term.name(),
                    g.get(n, c)
                );
            }
        }
        // Covariate-only term: zero gradient.
        let fy = parse_term("f_y", &comps, &covs).unwrap();
        let lib2 = FeatureLibrary::new(vec![fy.clone()], comps.clone(), covs.clone()).unwrap();
        let g = grad_term(&fy, &lib2, &a, &ev, &cov, s, t).unwrap();
        assert!(g.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_term_gradient_is_rank_one_and_state_free() {
        let (ev, a, cov) = test_setup(2);
        let comps = names(&["u", "v"]);
        let term = parse_term("v", &comps, &[]).unwrap();
        let lib = FeatureLibrary::new(vec![term.clone()], comps, vec![]).unwrap();
        let g1 = grad_term(&term, &lib, &a, &ev, &cov, 3, 2).unwrap();
        let zero = Matrix::zeros(2, ev.pq());
        let g2 = grad_term(&term, &lib, &zero, &ev, &cov, 3, 2).unwrap();
        assert_eq!(g1, g2);
        assert!(g1.row(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn condition_number_cases() {
        let (ev, a, _) = test_setup(1);
        let (s, t) = ev.dims();
        let comps = names(&["u"]);
        // Orthogonal synthetic design: two sinusoids at different frequencies
        // are uncorrelated after standardization.
        let cov_vals = Tensor3::from_fn(s, t, 2, |ss, tt, k| {
            let x = (ss as f64 + s as f64 * tt as f64) / (s * t) as f64;
            if k == 0 {
                (2.0 * std::f64::consts::PI * x).sin()
            } else {
                (2.0 * std::f64::consts::PI * 2.0 * x).sin()
            }
        });
        let cov = CovariateField::new(cov_vals).unwrap();
        let covs = names(&["c1", "c2"]);
        let lib = parse_library(&[String::from("c1"), String::from("c2")], &comps, &covs).unwrap();
        let points: Vec<(usize, usize)> =
            (0..t).flat_map(|tt| (0..s).map(move |ss| (ss, tt))).collect();
        let rep = condition_number(&lib, &a, &ev, &cov, &points).unwrap();
        assert!((rep.value - 1.0).abs() < 0.05, "orthogonal design: {}", rep.value);

        // Exactly collinear columns blow up.
        let cov_dup = CovariateField::new(Tensor3::from_fn(s, t, 2, |ss, tt, _| {
            ((ss + 2) as f64 * 0.37 + tt as f64).sin()
        }))
        .unwrap();
        let rep3 = condition_number(&lib, &a, &ev, &cov_dup, &points).unwrap();
        assert!(rep3.value.is_infinite(), "duplicated column: {}", rep3.value);

        // Zero-variance column is reported, not fatal.
        let cov_const = CovariateField::new(Tensor3::from_fn(s, t, 2, |ss, tt, k| {
            if k == 0 {
                2.5
            } else {
                ((ss * 3 + tt) as f64).sin()
            }
        }))
        .unwrap();
        let rep4 = condition_number(&lib, &a, &ev, &cov_const, &points).unwrap();
        assert_eq!(rep4.zero_variance_terms, vec!["c1".to_string()]);
    }
}

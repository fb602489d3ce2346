//! Clamped B-spline bases in space (1D or tensor-product 2D) and time,
//! evaluation of the basis functions and their derivatives on grids, the
//! left-hand-side linear differential operator, and reconstruction of latent
//! fields from basis coefficients.
//!
//! Derivatives are computed analytically with the de Boor recursion and the
//! standard derivative recurrence, so the latent field and every derivative
//! the feature library needs share one set of coefficients.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::parallel;
use crate::tensor::{refold_mode3, Matrix, Tensor3};

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("spline degree must be at least 1, got {0}")]
    InvalidDegree(usize),
    #[error("basis count {count} too small for degree {degree} (need at least degree+1)")]
    CountTooSmall { count: usize, degree: usize },
    #[error("degenerate domain [{lo}, {hi}]")]
    DegenerateDomain { lo: f64, hi: f64 },
    #[error("derivative order {order} exceeds spline degree {degree}")]
    OrderExceedsDegree { order: usize, degree: usize },
    #[error("evaluation point {x} outside domain [{lo}, {hi}]")]
    PointOutsideDomain { x: f64, lo: f64, hi: f64 },
    #[error("spatial derivative {0} not precomputed in BasisEvaluations")]
    MissingDerivative(DerivSpec),
    #[error("temporal derivative order {0} not precomputed in BasisEvaluations")]
    MissingTemporal(usize),
    #[error("derivative spec {0} has a component this basis lacks")]
    UnsupportedDerivative(DerivSpec),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Partial-derivative order in x, y, and t.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct DerivSpec {
    pub dx: usize,
    pub dy: usize,
    pub dt: usize,
}

impl DerivSpec {
    pub const fn new(dx: usize, dy: usize, dt: usize) -> Self {
        Self { dx, dy, dt }
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.dx, self.dy)
    }

    pub fn is_value(&self) -> bool {
        self.dx == 0 && self.dy == 0 && self.dt == 0
    }
}

impl fmt::Display for DerivSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_value() {
            return write!(f, "(value)");
        }
        write!(
            f,
            "d{}{}{}",
            "x".repeat(self.dx),
            "y".repeat(self.dy),
            "t".repeat(self.dt)
        )
    }
}

/// Clamped univariate B-spline basis with uniformly spaced interior knots.
#[derive(Debug, Clone)]
pub struct BSplineBasis1D {
    degree: usize,
    knots: Vec<f64>,
    count: usize,
    lo: f64,
    hi: f64,
}

/// Build a clamped basis: `count` functions of the given degree on
/// `[lo, hi]`, with `count - degree - 1` equally spaced interior knots.
pub fn make_bspline(domain: (f64, f64), count: usize, degree: usize) -> Result<BSplineBasis1D, BasisError> {
    let (lo, hi) = domain;
    if degree < 1 {
        return Err(BasisError::InvalidDegree(degree));
    }
    if count < degree + 1 {
        return Err(BasisError::CountTooSmall { count, degree });
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(BasisError::DegenerateDomain { lo, hi });
    }
    let spans = count - degree;
    let mut knots = Vec::with_capacity(count + degree + 1);
    for _ in 0..=degree {
        knots.push(lo);
    }
    for k in 1..spans {
        knots.push(lo + (hi - lo) * k as f64 / spans as f64);
    }
    for _ in 0..=degree {
        knots.push(hi);
    }
    debug_assert_eq!(knots.len(), count + degree + 1);
    Ok(BSplineBasis1D { degree, knots, count, lo, hi })
}

impl BSplineBasis1D {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    fn check_point(&self, x: f64) -> Result<f64, BasisError> {
        let tol = 1e-9 * (self.hi - self.lo);
        if x < self.lo - tol || x > self.hi + tol || !x.is_finite() {
            return Err(BasisError::PointOutsideDomain { x, lo: self.lo, hi: self.hi });
        }
        Ok(x.clamp(self.lo, self.hi))
    }

    /// Index `i` with `knots[i] <= x < knots[i+1]`, clamped so the right
    /// endpoint lands in the last non-empty span.
    fn find_span(&self, x: f64) -> usize {
        let p = self.degree;
        let n = self.count;
        if x >= self.knots[n] {
            return n - 1;
        }
        let mut lo = p;
        let mut hi = n;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// All non-vanishing basis functions and their derivatives up to
    /// `max_order` at `x`. Returns `(first, ders)` where `ders[k][j]` is the
    /// k-th derivative of function `first + j` (j in `0..=degree`).
    pub fn eval_all(&self, x: f64, max_order: usize) -> Result<(usize, Vec<Vec<f64>>), BasisError> {
        if max_order > self.degree {
            return Err(BasisError::OrderExceedsDegree { order: max_order, degree: self.degree });
        }
        let x = self.check_point(x)?;
        let p = self.degree;
        let span = self.find_span(x);
        let u = &self.knots;

        // Triangular table of basis values and knot differences (de Boor).
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - u[span + 1 - j];
            right[j] = u[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }

        let mut ders = vec![vec![0.0; p + 1]; max_order + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }

        // Derivative recurrence over alternating rows of `a`.
        let mut a = [vec![0.0; p + 1], vec![0.0; p + 1]];
        for r in 0..=p {
            let mut s1 = 0;
            let mut s2 = 1;
            a[0].iter_mut().for_each(|v| *v = 0.0);
            a[1].iter_mut().for_each(|v| *v = 0.0);
            a[0][0] = 1.0;
            for k in 1..=max_order {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    let v = a[s1][0] / ndu[pk + 1][rk as usize];
                    a[s2][0] = v;
                    d = v * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if r as isize - 1 <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let v = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][(rk + j as isize) as usize];
                    a[s2][j] = v;
                    d += v * ndu[(rk + j as isize) as usize][pk];
                }
                if r <= pk {
                    let v = -a[s1][k - 1] / ndu[pk + 1][r];
                    a[s2][k] = v;
                    d += v * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }

        // Scale by p! / (p-k)!.
        let mut factor = p as f64;
        for k in 1..=max_order {
            for v in ders[k].iter_mut() {
                *v *= factor;
            }
            factor *= (p - k) as f64;
        }
        Ok((span - p, ders))
    }

    /// Evaluate the `order`-th derivative of every basis function at `points`.
    pub fn eval1d(&self, points: &[f64], order: usize) -> Result<Matrix, BasisError> {
        let mut out = Matrix::zeros(points.len(), self.count);
        for (i, &x) in points.iter().enumerate() {
            let (first, ders) = self.eval_all(x, order)?;
            let row = out.row_mut(i);
            for (j, &v) in ders[order].iter().enumerate() {
                row[first + j] = v;
            }
        }
        Ok(out)
    }
}

/// Sparse evaluation row: the non-vanishing basis values at one point.
#[derive(Debug, Clone)]
pub struct SparseVec {
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
}

impl SparseVec {
    pub fn dot(&self, dense: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, v) in self.idx.iter().zip(&self.val) {
            acc += dense[*i as usize] * v;
        }
        acc
    }
}

/// Spatial basis: a single 1D spline or a tensor product of two, evaluated on
/// an axis-product grid ordered x-fastest.
#[derive(Debug, Clone)]
pub struct SpatialBasis {
    bx: BSplineBasis1D,
    by: Option<BSplineBasis1D>,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl SpatialBasis {
    pub fn new_1d(bx: BSplineBasis1D, xs: Vec<f64>) -> Result<Self, BasisError> {
        for &x in &xs {
            bx.check_point(x)?;
        }
        Ok(Self { bx, by: None, xs, ys: Vec::new() })
    }

    pub fn new_2d(
        bx: BSplineBasis1D,
        by: BSplineBasis1D,
        xs: Vec<f64>,
        ys: Vec<f64>,
    ) -> Result<Self, BasisError> {
        for &x in &xs {
            bx.check_point(x)?;
        }
        for &y in &ys {
            by.check_point(y)?;
        }
        Ok(Self { bx, by: Some(by), xs, ys })
    }

    pub fn is_2d(&self) -> bool {
        self.by.is_some()
    }

    pub fn bx(&self) -> &BSplineBasis1D {
        &self.bx
    }

    pub fn by(&self) -> Option<&BSplineBasis1D> {
        self.by.as_ref()
    }

    /// Number of grid locations S (x fastest, then y).
    pub fn n_locations(&self) -> usize {
        if self.is_2d() {
            self.xs.len() * self.ys.len()
        } else {
            self.xs.len()
        }
    }

    /// Total basis count P (`Px * Py` for 2D, column index `qy*Px + qx`).
    pub fn p_total(&self) -> usize {
        match &self.by {
            Some(by) => self.bx.count() * by.count(),
            None => self.bx.count(),
        }
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    fn check_spec(&self, dx: usize, dy: usize) -> Result<(), BasisError> {
        if dx > self.bx.degree() {
            return Err(BasisError::OrderExceedsDegree { order: dx, degree: self.bx.degree() });
        }
        match &self.by {
            Some(by) => {
                if dy > by.degree() {
                    return Err(BasisError::OrderExceedsDegree { order: dy, degree: by.degree() });
                }
            }
            None => {
                if dy > 0 {
                    return Err(BasisError::UnsupportedDerivative(DerivSpec::new(dx, dy, 0)));
                }
            }
        }
        Ok(())
    }

    /// Dense `S x P` evaluation of the (dx, dy) spatial derivative.
    pub fn eval_spatial(&self, d: DerivSpec) -> Result<Matrix, BasisError> {
        if d.dt != 0 {
            return Err(BasisError::UnsupportedDerivative(d));
        }
        self.check_spec(d.dx, d.dy)?;
        match &self.by {
            None => self.bx.eval1d(&self.xs, d.dx),
            Some(by) => {
                let mx = self.bx.eval1d(&self.xs, d.dx)?;
                let my = by.eval1d(&self.ys, d.dy)?;
                let px = self.bx.count();
                let py = by.count();
                let nx = self.xs.len();
                let ny = self.ys.len();
                let mut out = Matrix::zeros(nx * ny, px * py);
                for jy in 0..ny {
                    for jx in 0..nx {
                        let row = out.row_mut(jy * nx + jx);
                        for qy in 0..py {
                            let w = my.get(jy, qy);
                            if w == 0.0 {
                                continue;
                            }
                            for qx in 0..px {
                                row[qy * px + qx] = w * mx.get(jx, qx);
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    fn sparse_rows(&self, dx: usize, dy: usize) -> Result<Vec<SparseVec>, BasisError> {
        self.check_spec(dx, dy)?;
        match &self.by {
            None => {
                let mut rows = Vec::with_capacity(self.xs.len());
                for &x in &self.xs {
                    let (first, ders) = self.bx.eval_all(x, dx)?;
                    let idx = (first..first + self.bx.degree() + 1).map(|i| i as u32).collect();
                    rows.push(SparseVec { idx, val: ders[dx].clone() });
                }
                Ok(rows)
            }
            Some(by) => {
                let px = self.bx.count();
                let x_rows: Vec<(usize, Vec<f64>)> = self
                    .xs
                    .iter()
                    .map(|&x| self.bx.eval_all(x, dx).map(|(f, d)| (f, d[dx].clone())))
                    .collect::<Result<_, _>>()?;
                let y_rows: Vec<(usize, Vec<f64>)> = self
                    .ys
                    .iter()
                    .map(|&y| by.eval_all(y, dy).map(|(f, d)| (f, d[dy].clone())))
                    .collect::<Result<_, _>>()?;
                let mut rows = Vec::with_capacity(x_rows.len() * y_rows.len());
                for (fy, vy) in &y_rows {
                    for (fx, vx) in &x_rows {
                        let mut idx = Vec::with_capacity(vx.len() * vy.len());
                        let mut val = Vec::with_capacity(vx.len() * vy.len());
                        for (ky, wy) in vy.iter().enumerate() {
                            for (kx, wx) in vx.iter().enumerate() {
                                idx.push(((fy + ky) * px + (fx + kx)) as u32);
                                val.push(wy * wx);
                            }
                        }
                        rows.push(SparseVec { idx, val });
                    }
                }
                Ok(rows)
            }
        }
    }
}

/// Temporal basis over the observation times.
#[derive(Debug, Clone)]
pub struct TemporalBasis {
    bt: BSplineBasis1D,
    times: Vec<f64>,
}

impl TemporalBasis {
    pub fn new(bt: BSplineBasis1D, times: Vec<f64>) -> Result<Self, BasisError> {
        for &t in &times {
            bt.check_point(t)?;
        }
        Ok(Self { bt, times })
    }

    pub fn bt(&self) -> &BSplineBasis1D {
        &self.bt
    }

    pub fn q_total(&self) -> usize {
        self.bt.count()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn eval(&self, order: usize) -> Result<Matrix, BasisError> {
        self.bt.eval1d(&self.times, order)
    }

    fn sparse_rows(&self, order: usize) -> Result<Vec<SparseVec>, BasisError> {
        let mut rows = Vec::with_capacity(self.times.len());
        for &t in &self.times {
            let (first, ders) = self.bt.eval_all(t, order)?;
            let idx = (first..first + self.bt.degree() + 1).map(|i| i as u32).collect();
            rows.push(SparseVec { idx, val: ders[order].clone() });
        }
        Ok(rows)
    }
}

/// The LHS linear differential operator `g`: a finite linear combination of
/// pure spatial derivatives applied to the response.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSpec {
    pub terms: Vec<(f64, DerivSpec)>,
}

impl OperatorSpec {
    pub fn identity() -> Self {
        Self { terms: vec![(1.0, DerivSpec::new(0, 0, 0))] }
    }

    pub fn laplacian() -> Self {
        Self { terms: vec![(1.0, DerivSpec::new(2, 0, 0)), (1.0, DerivSpec::new(0, 2, 0))] }
    }

    pub fn is_identity(&self) -> bool {
        self.terms.len() == 1 && self.terms[0].0 == 1.0 && self.terms[0].1.is_value()
    }
}

/// `sum_k c_k * eval_spatial(d_k)`: the operator applied to the spatial basis.
pub fn apply_operator(sb: &SpatialBasis, g: &OperatorSpec) -> Result<Matrix, BasisError> {
    let mut out = Matrix::zeros(sb.n_locations(), sb.p_total());
    for (coeff, d) in &g.terms {
        if d.dt != 0 {
            return Err(BasisError::UnsupportedDerivative(*d));
        }
        let m = sb.eval_spatial(*d)?;
        out.add_scaled(&m, *coeff)
            .map_err(|e| BasisError::DimensionMismatch(e.to_string()))?;
    }
    Ok(out)
}

/// All evaluation matrices the model needs, computed once: spatial derivative
/// matrices for every required (dx, dy), temporal derivative matrices for
/// every required order, the operator-applied spatial matrix, and sparse rows
/// of each for the per-point hot paths. Theta is fixed to the identity.
pub struct BasisEvaluations {
    pub n_components: usize,
    pub j_order: usize,
    s: usize,
    t: usize,
    p: usize,
    q: usize,
    theta: Matrix,
    axis_x: Matrix,
    axis_y: Option<Matrix>,
    spatial: BTreeMap<(usize, usize), Matrix>,
    temporal: BTreeMap<usize, Matrix>,
    operator_matrix: Matrix,
    spatial_rows: BTreeMap<(usize, usize), Vec<SparseVec>>,
    temporal_rows: BTreeMap<usize, Vec<SparseVec>>,
    operator_rows: Vec<SparseVec>,
}

impl BasisEvaluations {
    /// Precompute every matrix needed by a library with `spatial_specs` and
    /// `temporal_orders`, plus the LHS operator `g` at temporal order `j`.
    /// The order-0 matrices are always included.
    pub fn build(
        sb: &SpatialBasis,
        tb: &TemporalBasis,
        n_components: usize,
        spatial_specs: &[(usize, usize)],
        temporal_orders: &[usize],
        g: &OperatorSpec,
        j_order: usize,
    ) -> Result<Self, BasisError> {
        let mut spatial_set: Vec<(usize, usize)> = vec![(0, 0)];
        spatial_set.extend_from_slice(spatial_specs);
        for (_, d) in &g.terms {
            spatial_set.push(d.spatial());
        }
        spatial_set.sort_unstable();
        spatial_set.dedup();

        let mut temporal_set: Vec<usize> = vec![0, j_order];
        temporal_set.extend_from_slice(temporal_orders);
        temporal_set.sort_unstable();
        temporal_set.dedup();

        let mut spatial = BTreeMap::new();
        let mut spatial_rows = BTreeMap::new();
        for &(dx, dy) in &spatial_set {
            spatial.insert((dx, dy), sb.eval_spatial(DerivSpec::new(dx, dy, 0))?);
            spatial_rows.insert((dx, dy), sb.sparse_rows(dx, dy)?);
        }
        let mut temporal = BTreeMap::new();
        let mut temporal_rows = BTreeMap::new();
        for &dt in &temporal_set {
            if dt > tb.bt().degree() {
                return Err(BasisError::OrderExceedsDegree { order: dt, degree: tb.bt().degree() });
            }
            temporal.insert(dt, tb.eval(dt)?);
            temporal_rows.insert(dt, tb.sparse_rows(dt)?);
        }
        let axis_x = sb.bx().eval1d(sb.xs(), 0)?;
        let axis_y = match sb.by() {
            Some(by) => Some(by.eval1d(sb.ys(), 0)?),
            None => None,
        };
        let operator_matrix = apply_operator(sb, g)?;
        let operator_rows = {
            let mut rows: Vec<SparseVec> = Vec::with_capacity(sb.n_locations());
            for s in 0..sb.n_locations() {
                // Union of the per-term sparse rows.
                let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
                for (coeff, d) in &g.terms {
                    let term_rows = &spatial_rows[&d.spatial()];
                    let row = &term_rows[s];
                    for (i, v) in row.idx.iter().zip(&row.val) {
                        *acc.entry(*i).or_insert(0.0) += coeff * v;
                    }
                }
                let idx: Vec<u32> = acc.keys().copied().collect();
                let val: Vec<f64> = acc.values().copied().collect();
                rows.push(SparseVec { idx, val });
            }
            rows
        };

        Ok(Self {
            n_components,
            j_order,
            s: sb.n_locations(),
            t: tb.times().len(),
            p: sb.p_total(),
            q: tb.q_total(),
            theta: Matrix::identity(n_components),
            axis_x,
            axis_y,
            spatial,
            temporal,
            operator_matrix,
            spatial_rows,
            temporal_rows,
            operator_rows,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.s, self.t)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn pq(&self) -> usize {
        self.p * self.q
    }

    pub fn theta(&self) -> &Matrix {
        &self.theta
    }

    pub fn psi(&self, dx: usize, dy: usize) -> Result<&Matrix, BasisError> {
        self.spatial
            .get(&(dx, dy))
            .ok_or(BasisError::MissingDerivative(DerivSpec::new(dx, dy, 0)))
    }

    pub fn phi(&self, dt: usize) -> Result<&Matrix, BasisError> {
        self.temporal.get(&dt).ok_or(BasisError::MissingTemporal(dt))
    }

    pub fn operator_psi(&self) -> &Matrix {
        &self.operator_matrix
    }

    /// Order-0 evaluation matrices of the spatial axes (x, optional y).
    pub fn axis_matrices(&self) -> (&Matrix, Option<&Matrix>) {
        (&self.axis_x, self.axis_y.as_ref())
    }

    /// Order-0 evaluation matrix of the temporal basis.
    pub fn time_matrix(&self) -> &Matrix {
        self.temporal.get(&0).expect("order-0 temporal matrix always built")
    }

    pub fn psi_rows(&self, dx: usize, dy: usize) -> Result<&[SparseVec], BasisError> {
        self.spatial_rows
            .get(&(dx, dy))
            .map(|v| v.as_slice())
            .ok_or(BasisError::MissingDerivative(DerivSpec::new(dx, dy, 0)))
    }

    pub fn phi_rows(&self, dt: usize) -> Result<&[SparseVec], BasisError> {
        self.temporal_rows
            .get(&dt)
            .map(|v| v.as_slice())
            .ok_or(BasisError::MissingTemporal(dt))
    }

    pub fn operator_rows(&self) -> &[SparseVec] {
        &self.operator_rows
    }

    /// Value of `a_row * (phi_dt(t) (x) psi_dxdy(s))'` for one coefficient row.
    pub fn point_value(
        &self,
        a_row: &[f64],
        s: usize,
        t: usize,
        d: DerivSpec,
    ) -> Result<f64, BasisError> {
        let psi = &self.psi_rows(d.dx, d.dy)?[s];
        let phi = &self.phi_rows(d.dt)?[t];
        Ok(kron_dot(a_row, phi, psi, self.p))
    }

    /// Like [`Self::point_value`] but with the LHS operator applied spatially
    /// and the temporal derivative of order J.
    pub fn point_response(&self, a_row: &[f64], s: usize, t: usize) -> Result<f64, BasisError> {
        let psi = &self.operator_rows[s];
        let phi = &self.phi_rows(self.j_order)?[t];
        Ok(kron_dot(a_row, phi, psi, self.p))
    }

    fn spatial_rows_for(&self, sel: SpatialSel) -> Result<&[SparseVec], BasisError> {
        match sel {
            SpatialSel::Deriv(dx, dy) => self.psi_rows(dx, dy),
            SpatialSel::Operator => Ok(&self.operator_rows),
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) enum SpatialSel {
    Deriv(usize, usize),
    Operator,
}

/// `sum_q phi_q sum_p psi_p a[q*P + p]` over the sparse rows.
#[inline]
pub fn kron_dot(a_row: &[f64], phi: &SparseVec, psi: &SparseVec, p: usize) -> f64 {
    let mut acc = 0.0;
    for (qi, qv) in phi.idx.iter().zip(&phi.val) {
        let base = *qi as usize * p;
        let mut inner = 0.0;
        for (pi, pv) in psi.idx.iter().zip(&psi.val) {
            inner += a_row[base + *pi as usize] * pv;
        }
        acc += qv * inner;
    }
    acc
}

/// Visit the nonzero entries of `phi (x) psi` as (column index, value).
#[inline]
pub fn for_each_kron(phi: &SparseVec, psi: &SparseVec, p: usize, mut f: impl FnMut(usize, f64)) {
    for (qi, qv) in phi.idx.iter().zip(&phi.val) {
        let base = *qi as usize * p;
        for (pi, pv) in psi.idx.iter().zip(&psi.val) {
            f(base + *pi as usize, qv * pv);
        }
    }
}

pub(crate) fn reconstruct_component(
    a_row: &[f64],
    ev: &BasisEvaluations,
    sel: SpatialSel,
    dt: usize,
    out: &mut [f64],
) -> Result<(), BasisError> {
    let (s_count, t_count) = ev.dims();
    debug_assert_eq!(out.len(), s_count * t_count);
    let psi_rows = ev.spatial_rows_for(sel)?;
    let phi_rows = ev.phi_rows(dt)?;
    let (p, q) = (ev.p(), ev.q());

    // Stage 1: Y[s*Q + q] = sum_p psi_p(s) a[q*P + p].
    let mut stage = vec![0.0; s_count * q];
    parallel::fill_chunks(&mut stage, |range, slice| {
        let s0 = range.start / q;
        let s1 = (range.end - 1) / q;
        for s in s0..=s1 {
            let row = &psi_rows[s];
            for qq in 0..q {
                let flat = s * q + qq;
                if flat < range.start || flat >= range.end {
                    continue;
                }
                let mut acc = 0.0;
                for (pi, pv) in row.idx.iter().zip(&row.val) {
                    acc += a_row[qq * p + *pi as usize] * pv;
                }
                slice[flat - range.start] = acc;
            }
        }
    });

    // Stage 2: out[t*S + s] = sum_q phi_q(t) Y[s*Q + q].
    parallel::fill_chunks(out, |range, slice| {
        let t0 = range.start / s_count;
        let t1 = (range.end - 1) / s_count;
        for t in t0..=t1 {
            let phi = &phi_rows[t];
            let lo = range.start.max(t * s_count);
            let hi = range.end.min((t + 1) * s_count);
            for flat in lo..hi {
                let s = flat - t * s_count;
                let mut acc = 0.0;
                for (qi, qv) in phi.idx.iter().zip(&phi.val) {
                    acc += qv * stage[s * q + *qi as usize];
                }
                slice[flat - range.start] = acc;
            }
        }
    });
    Ok(())
}

/// Reconstruct the latent field derivative `d` for every component: the
/// refold of `Theta A (Phi^(dt) (x) Psi^(dx,dy))'`.
pub fn reconstruct_field(
    a: &Matrix,
    ev: &BasisEvaluations,
    d: DerivSpec,
) -> Result<Tensor3, BasisError> {
    let (s, t) = ev.dims();
    let n = a.rows();
    if a.cols() != ev.pq() {
        return Err(BasisError::DimensionMismatch(format!(
            "coefficient matrix has {} cols, basis has P*Q = {}",
            a.cols(),
            ev.pq()
        )));
    }
    let mut m = Matrix::zeros(n, s * t);
    for comp in 0..n {
        let mut row = vec![0.0; s * t];
        reconstruct_component(a.row(comp), ev, SpatialSel::Deriv(d.dx, d.dy), d.dt, &mut row)?;
        m.row_mut(comp).copy_from_slice(&row);
    }
    refold_mode3(&m, s, t).map_err(|e| BasisError::DimensionMismatch(e.to_string()))
}

/// The LHS response `Theta A (Phi^(J) (x) g(Psi))'` over the whole grid,
/// returned mode-3 style: row n holds component n indexed by `t*S + s`.
pub fn reconstruct_response(a: &Matrix, ev: &BasisEvaluations) -> Result<Matrix, BasisError> {
    let (s, t) = ev.dims();
    let n = a.rows();
    let mut m = Matrix::zeros(n, s * t);
    for comp in 0..n {
        let mut row = vec![0.0; s * t];
        reconstruct_component(a.row(comp), ev, SpatialSel::Operator, ev.j_order, &mut row)?;
        m.row_mut(comp).copy_from_slice(&row);
    }
    Ok(m)
}

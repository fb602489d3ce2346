//! Order-3 tensor storage and the small amount of multilinear algebra the
//! model needs: mode-n products, mode-3 matricization, Kronecker products,
//! and Tucker-style reconstruction from a core tensor and factor matrices.
//!
//! Layout convention, fixed once for the whole crate: a `Tensor3` with
//! dimensions `(S, T, N)` stores entry `(s, t, n)` at linear index
//! `n*S*T + t*S + s` (space fastest, then time, then component). Under this
//! convention the mode-3 matricization is a plain reshape to an `N x (S*T)`
//! row-major matrix whose column `(s, t)` sits at index `t*S + s`, which is
//! exactly the column order of the Kronecker product `Phi (x) Psi`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("value length {found} does not match dims {s}x{t}x{n}")]
    BadLength { found: usize, s: usize, t: usize, n: usize },
}

/// Dense order-3 tensor over (space, time, component).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    s: usize,
    t: usize,
    n: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(s: usize, t: usize, n: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != s * t * n {
            return Err(TensorError::BadLength { found: data.len(), s, t, n });
        }
        Ok(Self { s, t, n, data })
    }

    pub fn zeros(s: usize, t: usize, n: usize) -> Self {
        Self { s, t, n, data: vec![0.0; s * t * n] }
    }

    pub fn from_fn(s: usize, t: usize, n: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(s, t, n);
        for cn in 0..n {
            for ct in 0..t {
                for cs in 0..s {
                    out.data[cn * s * t + ct * s + cs] = f(cs, ct, cn);
                }
            }
        }
        out
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.s, self.t, self.n)
    }

    #[inline]
    pub fn index(&self, s: usize, t: usize, n: usize) -> usize {
        debug_assert!(s < self.s && t < self.t && n < self.n);
        n * self.s * self.t + t * self.s + s
    }

    #[inline]
    pub fn get(&self, s: usize, t: usize, n: usize) -> f64 {
        self.data[self.index(s, t, n)]
    }

    #[inline]
    pub fn set(&mut self, s: usize, t: usize, n: usize, v: f64) {
        let i = self.index(s, t, n);
        self.data[i] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Slice holding component `n` over all (s, t), indexed by `t*S + s`.
    pub fn component(&self, n: usize) -> &[f64] {
        let st = self.s * self.t;
        &self.data[n * st..(n + 1) * st]
    }

    /// Mode-3 matricization: an `N x (S*T)` matrix with column `(s,t)` at
    /// index `t*S + s`. Because of the layout convention this is a reshape and
    /// round-trips bit-exactly through [`refold_mode3`].
    pub fn mode3_matricize(&self) -> Matrix {
        Matrix { rows: self.n, cols: self.s * self.t, data: self.data.clone() }
    }

    /// n-mode product with a matrix: `m.cols` must equal the extent along
    /// `mode`; the result swaps that extent for `m.rows`. Satisfies
    /// `Z_(n) = M * X_(n)` on matricized tensors.
    pub fn n_mode_product(&self, m: &Matrix, mode: Mode) -> Result<Tensor3, TensorError> {
        let (s, t, n) = (self.s, self.t, self.n);
        let extent = match mode {
            Mode::One => s,
            Mode::Two => t,
            Mode::Three => n,
        };
        if m.cols != extent {
            return Err(TensorError::DimensionMismatch(format!(
                "n-mode product along mode {mode:?}: matrix has {} cols, tensor extent is {extent}",
                m.cols
            )));
        }
        let out = match mode {
            Mode::One => {
                let mut out = Tensor3::zeros(m.rows, t, n);
                for cn in 0..n {
                    for ct in 0..t {
                        for r in 0..m.rows {
                            let mut acc = 0.0;
                            for cs in 0..s {
                                acc += m.get(r, cs) * self.data[cn * s * t + ct * s + cs];
                            }
                            out.data[cn * m.rows * t + ct * m.rows + r] = acc;
                        }
                    }
                }
                out
            }
            Mode::Two => {
                let mut out = Tensor3::zeros(s, m.rows, n);
                for cn in 0..n {
                    for r in 0..m.rows {
                        for cs in 0..s {
                            let mut acc = 0.0;
                            for ct in 0..t {
                                acc += m.get(r, ct) * self.data[cn * s * t + ct * s + cs];
                            }
                            out.data[cn * s * m.rows + r * s + cs] = acc;
                        }
                    }
                }
                out
            }
            Mode::Three => {
                let mut out = Tensor3::zeros(s, t, m.rows);
                let st = s * t;
                for r in 0..m.rows {
                    for c in 0..st {
                        let mut acc = 0.0;
                        for cn in 0..n {
                            acc += m.get(r, cn) * self.data[cn * st + c];
                        }
                        out.data[r * st + c] = acc;
                    }
                }
                out
            }
        };
        Ok(out)
    }
}

/// Inverse of [`Tensor3::mode3_matricize`].
pub fn refold_mode3(m: &Matrix, s: usize, t: usize) -> Result<Tensor3, TensorError> {
    if m.cols != s * t {
        return Err(TensorError::DimensionMismatch(format!(
            "refold: matrix has {} cols, expected S*T = {}",
            m.cols,
            s * t
        )));
    }
    Tensor3::new(s, t, m.rows, m.data.clone())
}

/// Which tensor mode an operation acts along (1 = space, 2 = time, 3 = component).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    One,
    Two,
    Three,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::BadLength { found: data.len(), s: rows, t: cols, n: 1 });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != rhs.rows {
            return Err(TensorError::DimensionMismatch(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
                for c in 0..rhs.cols {
                    out_row[c] += a * rhs_row[c];
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) -> Result<(), TensorError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(TensorError::DimensionMismatch(format!(
                "add: {}x{} plus {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }
}

/// Standard Kronecker product: `(a (x) b)(i*p + k, j*q + l) = a(i,j) * b(k,l)`
/// where `b` is `p x q`.
pub fn kronecker(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows * b.rows, a.cols * b.cols);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let aij = a.get(i, j);
            if aij == 0.0 {
                continue;
            }
            for k in 0..b.rows {
                for l in 0..b.cols {
                    out.set(i * b.rows + k, j * b.cols + l, aij * b.get(k, l));
                }
            }
        }
    }
    out
}

/// Reconstruct `core x_1 psi x_2 phi x_3 theta`. The mode-3 unfolding of the
/// result equals `theta * G_(3) * (phi (x) psi)'`.
pub fn tucker_reconstruct(
    core: &Tensor3,
    psi: &Matrix,
    phi: &Matrix,
    theta: &Matrix,
) -> Result<Tensor3, TensorError> {
    core.n_mode_product(psi, Mode::One)?
        .n_mode_product(phi, Mode::Two)?
        .n_mode_product(theta, Mode::Three)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rand_tensor(s: usize, t: usize, n: usize, seed: u64) -> Tensor3 {
        // Small deterministic LCG keeps the oracle tests self-contained.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Tensor3::from_fn(s, t, n, |_, _, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn rand_matrix(r: usize, c: usize, seed: u64) -> Matrix {
        let mut state = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
        Matrix::from_fn(r, c, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn mode3_degenerate_dims() {
        let t = Tensor3::new(1, 1, 1, vec![4.25]).unwrap();
        let m = t.mode3_matricize();
        assert_eq!((m.rows(), m.cols()), (1, 1));
        assert_eq!(m.get(0, 0), 4.25);
    }

    #[test]
    fn mode3_matches_loop_oracle() {
        let t = Tensor3::from_fn(2, 2, 2, |s, tt, n| (n * 4 + tt * 2 + s) as f64 + 1.0);
        let m = t.mode3_matricize();
        assert_eq!((m.rows(), m.cols()), (2, 4));
        // Naive unfolding: row n, column t*S + s.
        for n in 0..2 {
            for tt in 0..2 {
                for s in 0..2 {
                    assert_eq!(m.get(n, tt * 2 + s), t.get(s, tt, n));
                }
            }
        }
    }

    #[test]
    fn mode3_round_trip_exact() {
        let t = rand_tensor(3, 4, 2, 7);
        let back = refold_mode3(&t.mode3_matricize(), 3, 4).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn n_mode_identity_is_identity() {
        let t = rand_tensor(3, 4, 2, 1);
        for (mode, dim) in [(Mode::One, 3), (Mode::Two, 4), (Mode::Three, 2)] {
            let out = t.n_mode_product(&Matrix::identity(dim), mode).unwrap();
            assert_eq!(out, t);
        }
    }

    #[test]
    fn n_mode_product_matches_summation_oracle() {
        let t = rand_tensor(2, 3, 2, 11);
        let m = rand_matrix(4, 2, 3);
        let out = t.n_mode_product(&m, Mode::One).unwrap();
        assert_eq!(out.dims(), (4, 3, 2));
        for n in 0..2 {
            for tt in 0..3 {
                for r in 0..4 {
                    let mut acc = 0.0;
                    for s in 0..2 {
                        acc += m.get(r, s) * t.get(s, tt, n);
                    }
                    assert!((out.get(r, tt, n) - acc).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn mode3_product_equals_matricized_identity() {
        let t = rand_tensor(3, 2, 3, 5);
        let m = rand_matrix(2, 3, 9);
        let prod = t.n_mode_product(&m, Mode::Three).unwrap();
        let lhs = prod.mode3_matricize();
        let rhs = m.matmul(&t.mode3_matricize()).unwrap();
        for r in 0..lhs.rows() {
            for c in 0..lhs.cols() {
                assert!((lhs.get(r, c) - rhs.get(r, c)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn n_mode_dimension_mismatch_errors() {
        let t = rand_tensor(3, 2, 2, 2);
        let m = rand_matrix(2, 4, 1);
        assert!(t.n_mode_product(&m, Mode::One).is_err());
    }

    #[test]
    fn kronecker_scalar_identity() {
        let one = Matrix::new(1, 1, vec![1.0]).unwrap();
        let b = rand_matrix(3, 2, 17);
        assert_eq!(kronecker(&one, &b), b);
    }

    #[test]
    fn kronecker_matches_definition_oracle() {
        let a = rand_matrix(2, 2, 21);
        let b = rand_matrix(2, 2, 22);
        let k = kronecker(&a, &b);
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..2 {
                    for q in 0..2 {
                        assert_eq!(k.get(i * 2 + p, j * 2 + q), a.get(i, j) * b.get(p, q));
                    }
                }
            }
        }
    }

    #[test]
    fn tucker_identity_factors_return_core() {
        let core = rand_tensor(3, 2, 2, 31);
        let out = tucker_reconstruct(
            &core,
            &Matrix::identity(3),
            &Matrix::identity(2),
            &Matrix::identity(2),
        )
        .unwrap();
        assert_eq!(out, core);
    }

    #[test]
    fn tucker_rank_one_outer_product() {
        let core = Tensor3::new(1, 1, 1, vec![2.5]).unwrap();
        let psi = Matrix::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let phi = Matrix::new(2, 1, vec![0.5, -1.0]).unwrap();
        let theta = Matrix::new(2, 1, vec![1.0, 4.0]).unwrap();
        let out = tucker_reconstruct(&core, &psi, &phi, &theta).unwrap();
        for s in 0..3 {
            for t in 0..2 {
                for n in 0..2 {
                    let expect = 2.5 * psi.get(s, 0) * phi.get(t, 0) * theta.get(n, 0);
                    assert!((out.get(s, t, n) - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn tucker_matches_triple_sum_oracle() {
        let core = rand_tensor(2, 2, 2, 41);
        let psi = rand_matrix(4, 2, 42);
        let phi = rand_matrix(3, 2, 43);
        let theta = rand_matrix(2, 2, 44);
        let out = tucker_reconstruct(&core, &psi, &phi, &theta).unwrap();
        for s in 0..4 {
            for t in 0..3 {
                for n in 0..2 {
                    let mut acc = 0.0;
                    for p in 0..2 {
                        for q in 0..2 {
                            for r in 0..2 {
                                acc += core.get(p, q, r) * psi.get(s, p) * phi.get(t, q) * theta.get(n, r);
                            }
                        }
                    }
                    let rel = (out.get(s, t, n) - acc).abs() / acc.abs().max(1e-12);
                    assert!(rel < 1e-12, "rel error {rel}");
                }
            }
        }
    }

    #[test]
    fn kron_vec_pattern_consistent_with_tucker() {
        // 2x2x1 case: mode-3 unfolding of the reconstruction must equal
        // theta * G * (phi (x) psi)'.
        let core = rand_tensor(2, 2, 1, 51);
        let psi = rand_matrix(2, 2, 52);
        let phi = rand_matrix(2, 2, 53);
        let theta = rand_matrix(1, 1, 54);
        let rec = tucker_reconstruct(&core, &psi, &phi, &theta).unwrap();
        let lhs = rec.mode3_matricize();
        let rhs = theta
            .matmul(&core.mode3_matricize())
            .unwrap()
            .matmul(&kronecker(&phi, &psi).transpose())
            .unwrap();
        for c in 0..lhs.cols() {
            assert!((lhs.get(0, c) - rhs.get(0, c)).abs() < 1e-13);
        }
    }

    proptest! {
        #[test]
        fn prop_mode3_tucker_consistency(seed in 0u64..500) {
            // Random sizes up to 5x5x3.
            let s = 2 + (seed % 4) as usize;
            let t = 2 + ((seed / 4) % 4) as usize;
            let n = 1 + ((seed / 16) % 3) as usize;
            let p = 1 + (seed % 3) as usize;
            let q = 1 + ((seed / 3) % 3) as usize;
            let r = 1 + ((seed / 9) % 2) as usize;
            let core = rand_tensor(p, q, r, seed);
            let psi = rand_matrix(s, p, seed + 1);
            let phi = rand_matrix(t, q, seed + 2);
            let theta = rand_matrix(n, r, seed + 3);
            let rec = tucker_reconstruct(&core, &psi, &phi, &theta).unwrap();
            let lhs = rec.mode3_matricize();
            let rhs = theta
                .matmul(&core.mode3_matricize())
                .unwrap()
                .matmul(&kronecker(&phi, &psi).transpose())
                .unwrap();
            for rr in 0..lhs.rows() {
                for cc in 0..lhs.cols() {
                    let diff = (lhs.get(rr, cc) - rhs.get(rr, cc)).abs();
                    let scale = rhs.get(rr, cc).abs().max(1.0);
                    prop_assert!(diff / scale < 1e-12);
                }
            }
        }

        #[test]
        fn prop_refold_round_trip(seed in 0u64..200) {
            let s = 1 + (seed % 5) as usize;
            let t = 1 + ((seed / 5) % 5) as usize;
            let n = 1 + ((seed / 25) % 3) as usize;
            let tens = rand_tensor(s, t, n, seed);
            let back = refold_mode3(&tens.mode3_matricize(), s, t).unwrap();
            prop_assert_eq!(tens, back);
        }
    }
}

//! Largest singular value of a linear operator given only as an
//! apply/adjoint pair: plain power iteration for the persistent training
//! mode, Lanczos bidiagonalization when a converged value is wanted.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_adjoint_raw, conv2d_raw, ConvGeometry, KernelShape};
use crate::error::{shape_err, Result};
use crate::rng::Rng;
use crate::tensor::{axpy, dot, matvec, matvec_t, normalize, Tensor};

/// A linear map `R^input_len → R^output_len` together with its adjoint.
pub trait LinearOperator {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn adjoint(&self, y: &[f64]) -> Vec<f64>;
}

/// Row-major dense matrix viewed as an operator.
#[derive(Debug, Clone, Copy)]
pub struct DenseOp<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
}

impl<'a> DenseOp<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "{} entries for a {rows}×{cols} operator",
                data.len()
            )));
        }
        Ok(Self { data, rows, cols })
    }

    pub fn from_matrix(m: &'a Tensor) -> Result<Self> {
        let (rows, cols) = m.dims2()?;
        Self::new(m.data(), rows, cols)
    }
}

impl LinearOperator for DenseOp<'_> {
    fn input_len(&self) -> usize {
        self.cols
    }
    fn output_len(&self) -> usize {
        self.rows
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        matvec(self.data, self.rows, self.cols, x)
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        matvec_t(self.data, self.rows, self.cols, y)
    }
}

/// Convolution with a fixed kernel over a fixed input geometry.
#[derive(Debug, Clone, Copy)]
pub struct ConvOp<'a> {
    kernel: &'a [f64],
    shape: KernelShape,
    geom: ConvGeometry,
    out_len: usize,
}

impl<'a> ConvOp<'a> {
    pub fn new(kernel: &'a [f64], shape: KernelShape, geom: ConvGeometry) -> Result<Self> {
        shape.validate()?;
        geom.check(&shape)?;
        if kernel.len() != shape.numel() {
            return Err(shape_err("kernel data does not match its shape"));
        }
        let out_len = geom.output_shape(&shape)?.iter().product();
        Ok(Self {
            kernel,
            shape,
            geom,
            out_len,
        })
    }
}

impl LinearOperator for ConvOp<'_> {
    fn input_len(&self) -> usize {
        self.geom.input_len()
    }
    fn output_len(&self) -> usize {
        self.out_len
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        conv2d_raw(x, self.kernel, &self.shape, &self.geom)
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        conv2d_adjoint_raw(y, self.kernel, &self.shape, &self.geom)
    }
}

/// Left/right singular-vector estimates carried between calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerIterState {
    /// Left estimate, length `output_len`.
    pub u: Vec<f64>,
    /// Right estimate, length `input_len`.
    pub v: Vec<f64>,
    pub last_sigma: f64,
}

impl PowerIterState {
    pub fn random(input_len: usize, output_len: usize, rng: &mut Rng) -> Self {
        Self {
            u: rng.unit_vec(output_len),
            v: rng.unit_vec(input_len),
            last_sigma: 0.0,
        }
    }

    pub fn seeded(input_len: usize, output_len: usize, seed: u64) -> Self {
        Self::random(input_len, output_len, &mut Rng::new(seed))
    }

    pub fn for_op(op: &impl LinearOperator, rng: &mut Rng) -> Self {
        Self::random(op.input_len(), op.output_len(), rng)
    }

    pub fn fits(&self, op: &impl LinearOperator) -> bool {
        self.u.len() == op.output_len() && self.v.len() == op.input_len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterMode {
    /// Exactly `steps` update pairs, state carried to the next call.
    Persistent { steps: usize },
    /// Krylov iteration until successive estimates differ by less than
    /// `tol·max(1, σ)` or `max_iters` operator applications.
    Converge { tol: f64, max_iters: usize },
}

impl IterMode {
    /// Setting used by the verification suites.
    pub const VERIFY: IterMode = IterMode::Converge {
        tol: 1e-10,
        max_iters: 1000,
    };

    /// Tighter setting for oracle comparisons.
    pub const EXACT: IterMode = IterMode::Converge {
        tol: 1e-14,
        max_iters: 20_000,
    };

    pub fn persistent(steps: usize) -> Self {
        IterMode::Persistent { steps }
    }
}

impl Default for IterMode {
    fn default() -> Self {
        IterMode::Persistent { steps: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerResult {
    pub sigma: f64,
    pub iterations: usize,
    /// False only when converge mode hit `max_iters`.
    pub converged: bool,
    /// The operator annihilated every probe vector; `sigma` is 0 and the
    /// state was reset to a fixed unit vector.
    pub reset: bool,
}

/// Fixed probe directions tried when the carried `u` lies in the adjoint's
/// null space.
fn probes(n: usize) -> [Vec<f64>; 2] {
    let mut ones = vec![1.0; n];
    normalize(&mut ones);
    let mut wave: Vec<f64> = (0..n)
        .map(|i| ((i as f64 + 1.0) * 0.618_033_988_749_894_9).fract() - 0.5)
        .collect();
    normalize(&mut wave);
    [ones, wave]
}

/// One update pair `v ← normalize(Aᵀu)`, `u ← normalize(Av)`, returning
/// `σ = uᵀAv`, or `None` if the operator maps every probe to zero.
fn step(op: &impl LinearOperator, state: &mut PowerIterState) -> Option<f64> {
    let mut v = op.adjoint(&state.u);
    if normalize(&mut v) == 0.0 {
        // u is orthogonal to range(A); restart from fixed probes.
        let mut found = None;
        for p in probes(op.input_len()) {
            if op.apply(&p).iter().any(|&x| x != 0.0) {
                found = Some(p);
                break;
            }
        }
        v = found?;
    }
    let mut u = op.apply(&v);
    let sigma = normalize(&mut u);
    if sigma == 0.0 {
        return None;
    }
    state.u = u;
    state.v = v;
    Some(sigma.max(0.0))
}

/// Estimates the largest singular value of `op`, updating `state` in place.
///
/// The returned `σ = uᵀ·apply(v)` is non-negative. A state whose vectors do
/// not match the operator's dimensions is a shape error.
pub fn power_iteration(op: &impl LinearOperator, mode: IterMode, state: &mut PowerIterState) -> Result<PowerResult> {
    if !state.fits(op) {
        return Err(shape_err(format!(
            "power-iteration state ({}, {}) does not fit operator ({}, {})",
            state.u.len(),
            state.v.len(),
            op.output_len(),
            op.input_len()
        )));
    }
    let zero = |state: &mut PowerIterState, iterations| {
        let [u, _] = probes(op.output_len());
        let [v, _] = probes(op.input_len());
        *state = PowerIterState {
            u,
            v,
            last_sigma: 0.0,
        };
        PowerResult {
            sigma: 0.0,
            iterations,
            converged: true,
            reset: true,
        }
    };
    match mode {
        IterMode::Persistent { steps } => {
            let mut sigma = state.last_sigma;
            for i in 0..steps {
                match step(op, state) {
                    Some(s) => sigma = s,
                    None => return Ok(zero(state, i + 1)),
                }
            }
            state.last_sigma = sigma;
            Ok(PowerResult {
                sigma,
                iterations: steps,
                converged: true,
                reset: false,
            })
        }
        IterMode::Converge { tol, max_iters } => {
            let Some(first) = step(op, state) else {
                return Ok(zero(state, 1));
            };
            let r = lanczos(op, tol, max_iters.max(1), first, state);
            state.last_sigma = r.sigma;
            Ok(r)
        }
    }
}

const KRYLOV_CAP: usize = 256;

/// Orthogonalizes `x` against the unit columns in `basis`, twice.
fn reorthogonalize(x: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let c = dot(x, b);
            axpy(-c, b, x);
        }
    }
}

/// Top singular value and right singular vector of the upper-bidiagonal
/// matrix with diagonal `alpha` and superdiagonal `beta`. With `k − 1`
/// superdiagonal entries it is square, with `k` it has one extra column.
fn bidiagonal_top(alpha: &[f64], beta: &[f64]) -> (f64, Vec<f64>) {
    let k = alpha.len();
    let mut b = DMatrix::<f64>::zeros(k, beta.len().max(k - 1) + 1);
    for j in 0..k {
        b[(j, j)] = alpha[j];
        if let Some(&bj) = beta.get(j) {
            b[(j, j + 1)] = bj;
        }
    }
    // right singular vectors of B are eigenvectors of BᵀB
    let eig = (b.transpose() * &b).symmetric_eigen();
    let (i, &l) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    (l.max(0.0).sqrt(), eig.eigenvectors.column(i).iter().copied().collect())
}

/// Golub–Kahan–Lanczos bidiagonalization started from `state.v`, with full
/// reorthogonalization and restarts from the top Ritz vector. Stops when
/// the top Ritz value settles between checks, when the Krylov
/// space is exhausted, or after `max_iters` operator applications.
fn lanczos(op: &impl LinearOperator, tol: f64, max_iters: usize, first: f64, state: &mut PowerIterState) -> PowerResult {
    let cap = op.input_len().min(op.output_len()).min(KRYLOV_CAP);
    let mut used = 1;
    let mut prev = first;
    let mut best = first;
    let mut converged = false;
    while used < max_iters && !converged {
        let mut vs = vec![state.v.clone()];
        let mut us: Vec<Vec<f64>> = Vec::new();
        let (mut alpha, mut beta): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
        let mut exhausted = false;
        loop {
            let j = us.len();
            let mut u = op.apply(&vs[j]);
            if j > 0 {
                axpy(-beta[j - 1], &us[j - 1], &mut u);
            }
            reorthogonalize(&mut u, &us);
            let a = normalize(&mut u);
            used += 1;
            if a <= 1e-13 * best {
                exhausted = true;
            } else {
                alpha.push(a);
                us.push(u);
                best = best.max(a);
            }
            let k = alpha.len();
            if !exhausted && k < cap {
                let mut v = op.adjoint(&us[k - 1]);
                axpy(-alpha[k - 1], &vs[k - 1], &mut v);
                reorthogonalize(&mut v, &vs);
                let b = normalize(&mut v);
                if b <= 1e-13 * best {
                    exhausted = true;
                } else {
                    beta.push(b);
                    vs.push(v);
                }
            }
            let last = exhausted || k >= cap || used >= max_iters;
            if k > 0 && (last || k % 8 == 0) {
                let (s, _) = bidiagonal_top(&alpha, &beta);
                if exhausted || (s - prev).abs() < tol * s.max(1.0) {
                    converged = true;
                }
                prev = s;
            }
            if last || converged {
                break;
            }
        }
        let k = alpha.len();
        if k == 0 {
            break;
        }
        // top Ritz pair becomes the new state and restart vector
        let (_, q) = bidiagonal_top(&alpha, &beta);
        let mut v = vec![0.0; vs[0].len()];
        for (qi, vi) in q.iter().zip(&vs) {
            axpy(*qi, vi, &mut v);
        }
        normalize(&mut v);
        state.v = v;
        if exhausted {
            converged = true;
        }
    }
    let mut u = op.apply(&state.v);
    let sigma = normalize(&mut u);
    if sigma > 0.0 {
        state.u = u;
    }
    PowerResult {
        sigma,
        iterations: used,
        converged,
        reset: false,
    }
}

/// Converged largest singular value from a seeded fresh state.
pub fn spectral_norm(op: &impl LinearOperator, mode: IterMode, seed: u64) -> Result<f64> {
    let mut state = PowerIterState::random(op.input_len(), op.output_len(), &mut Rng::new(seed));
    Ok(power_iteration(op, mode, &mut state)?.sigma)
}

/// `uᵀ·apply(v)` for the current state, without updating it.
pub fn rayleigh(op: &impl LinearOperator, state: &PowerIterState) -> f64 {
    dot(&state.u, &op.apply(&state.v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::norm;

    #[test]
    fn diagonal() {
        let m = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 0.5]).unwrap();
        let op = DenseOp::from_matrix(&m).unwrap();
        let s = spectral_norm(&op, IterMode::VERIFY, 0).unwrap();
        assert!((s - 2.0).abs() < 1e-10);
    }

    #[test]
    fn identity_any_dims() {
        for n in [1, 3, 17] {
            let m = Tensor::identity(n);
            let op = DenseOp::from_matrix(&m).unwrap();
            let s = spectral_norm(&op, IterMode::VERIFY, n as u64).unwrap();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn persistent_runs_exact_steps_and_keeps_unit_vectors() {
        let mut rng = Rng::new(1);
        let m = Tensor::from_fn(&[6, 4], || rng.gaussian());
        let op = DenseOp::from_matrix(&m).unwrap();
        let mut st = PowerIterState::for_op(&op, &mut rng);
        let r = power_iteration(&op, IterMode::persistent(3), &mut st).unwrap();
        assert_eq!(r.iterations, 3);
        assert!((norm(&st.u) - 1.0).abs() < 1e-12);
        assert!((norm(&st.v) - 1.0).abs() < 1e-12);
        assert!((rayleigh(&op, &st) - r.sigma).abs() < 1e-12);
        assert_eq!(st.last_sigma, r.sigma);
    }

    #[test]
    fn zero_operator_resets() {
        let m = Tensor::zeros(&[3, 2]);
        let op = DenseOp::from_matrix(&m).unwrap();
        let mut st = PowerIterState::seeded(2, 3, 0);
        let r = power_iteration(&op, IterMode::VERIFY, &mut st).unwrap();
        assert_eq!(r.sigma, 0.0);
        assert!(r.reset);
        assert!((norm(&st.u) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_when_u_in_null_space_of_adjoint() {
        // A = e1 e1ᵀ on R²; u = e2 gives Aᵀu = 0 although A ≠ 0.
        let m = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 0.0]).unwrap();
        let op = DenseOp::from_matrix(&m).unwrap();
        let mut st = PowerIterState {
            u: vec![0.0, 1.0],
            v: vec![1.0, 0.0],
            last_sigma: 0.0,
        };
        let r = power_iteration(&op, IterMode::VERIFY, &mut st).unwrap();
        assert!(!r.reset);
        assert!((r.sigma - 3.0).abs() < 1e-12);
    }

    #[test]
    fn converge_mode_is_monotone() {
        let mut rng = Rng::new(11);
        let m = Tensor::from_fn(&[9, 7], || rng.gaussian());
        let op = DenseOp::from_matrix(&m).unwrap();
        let mut st = PowerIterState::for_op(&op, &mut rng);
        let mut prev = 0.0;
        for _ in 0..60 {
            let s = power_iteration(&op, IterMode::persistent(1), &mut st).unwrap().sigma;
            assert!(s >= prev - 1e-12, "{s} < {prev}");
            prev = s;
        }
    }

    #[test]
    fn converge_mode_resolves_clustered_top_values() {
        // 300 > KRYLOV_CAP forces a restart; the top gap is 1e-7
        let n = 300;
        let mut m = Tensor::zeros(&[n, n]);
        for i in 0..n {
            m.data_mut()[i * n + i] = 1.0 - 1e-7 * (i as f64) - if i > 1 { 0.3 } else { 0.0 };
        }
        let op = DenseOp::from_matrix(&m).unwrap();
        let mut st = PowerIterState::seeded(n, n, 5);
        let r = power_iteration(&op, IterMode::EXACT, &mut st).unwrap();
        assert!(r.converged);
        assert!((r.sigma - 1.0).abs() < 1e-12, "{}", r.sigma);
        assert!((norm(&st.v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_state_is_shape_error() {
        let m = Tensor::identity(3);
        let op = DenseOp::from_matrix(&m).unwrap();
        let mut st = PowerIterState::seeded(2, 3, 0);
        assert!(power_iteration(&op, IterMode::VERIFY, &mut st).is_err());
    }
}

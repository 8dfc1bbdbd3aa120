//! Dense row-major f64 tensors and the small piece of linear algebra the
//! transfer math needs: matrix multiply, a cyclic Jacobi eigensolver for
//! symmetric matrices, and SPD matrix powers built on top of it.
//!
//! Everything here is deterministic: no threading, no hashing, fixed
//! reduction orders. Calling the same op on the same bits twice yields the
//! same bits.

use crate::error::{CoreError, Result};

/// Relative tolerance for the symmetry pre-check in [`Tensor::sym_eig`].
const SYM_CHECK_REL_TOL: f64 = 1e-8;
/// Relative off-diagonal threshold at which the Jacobi iteration stops.
const JACOBI_REL_TOL: f64 = 1e-12;
/// Hard cap on Jacobi sweeps before giving up.
const JACOBI_MAX_SWEEPS: usize = 100;
/// Components smaller than this are skipped when fixing eigenvector signs.
const SIGN_FIX_TOL: f64 = 1e-12;

/// Dense tensor of `f64` values in row-major order.
///
/// Invariants: `data.len()` equals the product of `shape`, and every element
/// is finite. Constructors that accept caller data enforce both.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from explicit shape and data, validating length and
    /// finiteness.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(CoreError::ShapeMismatch(format!(
                "tensor data length {} does not match shape {:?} (needs {})",
                data.len(),
                shape,
                expect
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("tensor construction".into()));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Internal constructor for values produced by our own kernels. Skips
    /// the finiteness scan; callers must only feed it outputs of arithmetic
    /// on already-validated tensors.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    /// n x n identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Convenience for tests and small fixtures: build a matrix from rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(CoreError::ShapeMismatch(
                    "from_rows: ragged row lengths".into(),
                ));
            }
            data.extend_from_slice(row);
        }
        Self::new(&[r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row count of a rank-2 tensor. Panics on other ranks: calling this on
    /// a non-matrix is a bug in the caller, not a data error.
    pub fn rows(&self) -> usize {
        assert!(self.rank() == 2, "rows() on rank-{} tensor", self.rank());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert!(self.rank() == 2, "cols() on rank-{} tensor", self.rank());
        self.shape[1]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert!(self.rank() == 2);
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn set2(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(self.rank() == 2);
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    /// Matrix product of two rank-2 tensors. The reduction over the inner
    /// dimension always runs in ascending index order, so results are
    /// bit-reproducible.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(CoreError::ShapeMismatch(format!(
                "matmul needs two matrices, got ranks {} and {}",
                self.rank(),
                other.rank()
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(CoreError::ShapeMismatch(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        // i-k-j loop order streams rows of `other`; per output element the
        // additions still happen in ascending k, same as the textbook loop.
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    // Skipping adds of exact zero products keeps bits
                    // identical (x + 0.0 == x for finite x) and matters for
                    // sparse operands like permutation-ish matrices.
                    continue;
                }
                let brow = &other.data[kk * n..(kk + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::from_raw(vec![m, n], out))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Tensor {
        assert!(self.rank() == 2, "transpose on rank-{} tensor", self.rank());
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_raw(vec![c, r], out)
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch(format!(
                "sub: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    /// Every element multiplied by `s`.
    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data.iter().map(|v| v * s).collect();
        Tensor::from_raw(self.shape.clone(), data)
    }

    /// Sum of the main diagonal of a square matrix.
    pub fn trace(&self) -> f64 {
        assert!(
            self.rank() == 2 && self.shape[0] == self.shape[1],
            "trace on non-square tensor {:?}",
            self.shape
        );
        let n = self.shape[0];
        (0..n).map(|i| self.data[i * n + i]).sum()
    }

    /// Sum of squared elements over the whole tensor.
    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_norm_sq().sqrt()
    }

    /// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
    ///
    /// The input must be square and symmetric up to a relative Frobenius
    /// tolerance of 1e-8; it is then symmetrized exactly as (A + At)/2
    /// before iterating, so tiny asymmetries cannot leak into the result.
    /// Sweeps run until the off-diagonal Frobenius norm drops below
    /// 1e-12 * ||A||_F (at most 100 sweeps, else an error).
    ///
    /// Output conventions, relied on by callers and tests:
    /// - eigenvalues sorted in descending order, ties keeping their
    ///   pre-sort relative order;
    /// - eigenvectors are the corresponding *columns* of `vectors`;
    /// - each column is sign-fixed so its first component with magnitude
    ///   above 1e-12 is positive.
    pub fn sym_eig(&self) -> Result<EigenDecomp> {
        if self.rank() != 2 || self.shape[0] != self.shape[1] {
            return Err(CoreError::ShapeMismatch(format!(
                "sym_eig needs a square matrix, got {:?}",
                self.shape
            )));
        }
        let n = self.shape[0];
        let norm = self.frob_norm();

        let mut asym_sq = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = self.at2(i, j) - self.at2(j, i);
                asym_sq += 2.0 * d * d;
            }
        }
        let asym = asym_sq.sqrt();
        let tolerance = SYM_CHECK_REL_TOL * norm;
        if asym > tolerance {
            return Err(CoreError::NotSymmetric { asymmetry: asym, tolerance });
        }

        // Work on the exactly symmetrized copy.
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = 0.5 * (self.at2(i, j) + self.at2(j, i));
            }
        }
        let mut v = Tensor::identity(n).into_data();

        let off_norm = |a: &[f64]| -> f64 {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        s += a[i * n + j] * a[i * n + j];
                    }
                }
            }
            s.sqrt()
        };

        let stop = JACOBI_REL_TOL * norm;
        let mut converged = off_norm(&a) <= stop;
        let mut sweeps = 0;
        while !converged && sweeps < JACOBI_MAX_SWEEPS {
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[p * n + q];
                    if apq == 0.0 {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    // Stable rotation angle: t = sign(theta)/(|theta| + sqrt(theta^2+1)).
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = if theta >= 0.0 {
                        1.0 / (theta + (theta * theta + 1.0).sqrt())
                    } else {
                        -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                    };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;

                    for k in 0..n {
                        if k == p || k == q {
                            continue;
                        }
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        let np = c * akp - s * akq;
                        let nq = s * akp + c * akq;
                        a[k * n + p] = np;
                        a[p * n + k] = np;
                        a[k * n + q] = nq;
                        a[q * n + k] = nq;
                    }
                    a[p * n + p] = app - t * apq;
                    a[q * n + q] = aqq + t * apq;
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;

                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
            sweeps += 1;
            converged = off_norm(&a) <= stop;
        }
        if !converged {
            return Err(CoreError::NoConvergence {
                sweeps,
                offdiag: off_norm(&a),
            });
        }

        // Sort eigenpairs descending by value; std's stable sort preserves
        // the pre-sort order of ties.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            let (vi, vj) = (a[i * n + i], a[j * n + j]);
            vj.partial_cmp(&vi).expect("eigenvalues are finite")
        });

        let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
        let mut vectors = vec![0.0; n * n];
        for (dst, &src) in order.iter().enumerate() {
            // Sign fix: first component of the column with usable magnitude
            // decides the overall sign.
            let mut sign = 1.0;
            for k in 0..n {
                let x = v[k * n + src];
                if x.abs() > SIGN_FIX_TOL {
                    if x < 0.0 {
                        sign = -1.0;
                    }
                    break;
                }
            }
            for k in 0..n {
                vectors[k * n + dst] = sign * v[k * n + src];
            }
        }

        Ok(EigenDecomp {
            vectors: Tensor::from_raw(vec![n, n], vectors),
            values,
        })
    }

    /// Symmetric matrix power `A^exponent` through the eigendecomposition,
    /// with eigenvalues clamped from below to the *absolute* floor `eps`
    /// before the power is applied. The clamp makes the op total on inputs
    /// that are only positive semi-definite (or slightly indefinite from
    /// roundoff), which is exactly how near-singular covariance matrices
    /// get regularized.
    pub fn spd_power(&self, exponent: f64, eps: f64) -> Result<Tensor> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(CoreError::InvalidArgument(format!(
                "spd_power eps must be a positive finite number, got {eps}"
            )));
        }
        if !exponent.is_finite() {
            return Err(CoreError::InvalidArgument(format!(
                "spd_power exponent must be finite, got {exponent}"
            )));
        }
        let eig = self.sym_eig()?;
        let n = self.shape[0];
        let powed: Vec<f64> = eig
            .values
            .iter()
            .map(|&l| l.max(eps).powf(exponent))
            .collect();
        // out = V diag(powed) Vt, then mirror-averaged so the result is
        // symmetric in exact bits, not just up to roundoff.
        let v = &eig.vectors;
        let mut scaled = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                scaled[i * n + j] = v.at2(i, j) * powed[j];
            }
        }
        let out = Tensor::from_raw(vec![n, n], scaled).matmul(&v.transpose())?;
        let mut data = out.into_data();
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (data[i * n + j] + data[j * n + i]);
                data[i * n + j] = m;
                data[j * n + i] = m;
            }
        }
        Ok(Tensor::from_raw(vec![n, n], data))
    }
}

/// Seeded random orthogonal matrix: QR (modified Gram-Schmidt with one
/// re-orthogonalization pass) of a matrix of Box-Muller Gaussians.
pub fn random_orthogonal(n: usize, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = || {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    // Columns of `q`, orthonormalized in order.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| gaussian()).collect()).collect();
    for j in 0..n {
        for _pass in 0..2 {
            for k in 0..j {
                let dot: f64 = (0..n).map(|i| cols[j][i] * cols[k][i]).sum();
                for i in 0..n {
                    cols[j][i] -= dot * cols[k][i];
                }
            }
        }
        let norm: f64 = (0..n).map(|i| cols[j][i] * cols[j][i]).sum::<f64>().sqrt();
        // A freshly drawn Gaussian column is linearly independent of the
        // previous ones with probability 1; a zero norm here would mean a
        // broken RNG, so failing loudly is right.
        assert!(norm > 0.0, "degenerate random matrix in QR");
        for i in 0..n {
            cols[j][i] /= norm;
        }
    }
    let mut data = vec![0.0; n * n];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..n {
            data[i * n + j] = col[i];
        }
    }
    Tensor::from_raw(vec![n, n], data)
}

/// Result of [`Tensor::sym_eig`]: `values[k]` pairs with column `k` of
/// `vectors`.
#[derive(Debug, Clone)]
pub struct EigenDecomp {
    pub vectors: Tensor,
    pub values: Vec<f64>,
}

impl EigenDecomp {
    /// Reassembles V diag(f(values)) Vt. Shared by tests and callers that
    /// need a function of the spectrum other than a plain power.
    pub fn reassemble(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let n = self.vectors.rows();
        let mut scaled = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                scaled[i * n + j] = self.vectors.at2(i, j) * f(self.values[j]);
            }
        }
        Tensor::from_raw(vec![n, n], scaled).matmul(&self.vectors.transpose())
    }
}

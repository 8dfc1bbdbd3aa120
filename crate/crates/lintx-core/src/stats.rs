//! Feature maps and the statistics computed on them: channel means,
//! centering, covariance, Gram matrix, and the normalized pixel affinity.
//!
//! A feature map is stored channels-by-pixels (C x N with N = H*W), so a
//! C x C transform applies by left multiplication. Covariance and Gram are
//! both normalized by N (population convention); this keeps statistics
//! comparable across image sizes and does not change any transform built
//! from ratios of them.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Pixel-count cap for [`affinity`]: the N x N output is a verification
/// tool for small inputs, not a production path.
pub const AFFINITY_MAX_PIXELS: usize = 4096;

/// C x N feature map with its spatial extent carried along so it can be
/// reshaped back into an image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Tensor,
}

impl FeatureMap {
    /// `data` is channel-major: all N pixels of channel 0, then channel 1, ...
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "feature map extents must be positive, got {channels}x{height}x{width}"
            )));
        }
        let tensor = Tensor::new(&[channels, height * width], data)?;
        Ok(Self { channels, height, width, data: tensor })
    }

    /// Wraps an existing C x N tensor, checking N == height * width.
    pub fn from_tensor(tensor: Tensor, height: usize, width: usize) -> Result<Self> {
        if tensor.rank() != 2 || tensor.cols() != height * width {
            return Err(CoreError::ShapeMismatch(format!(
                "feature tensor {:?} does not match spatial extent {height}x{width}",
                tensor.shape()
            )));
        }
        if height == 0 || width == 0 || tensor.rows() == 0 {
            return Err(CoreError::InvalidArgument(
                "feature map extents must be positive".into(),
            ));
        }
        Ok(Self { channels: tensor.rows(), height, width, data: tensor })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// N = H * W.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Value of channel `c` at flat pixel index `p` (row-major spatially).
    #[inline]
    pub fn at(&self, c: usize, p: usize) -> f64 {
        self.data.at2(c, p)
    }

    /// Channel `c` as a contiguous slice of N values.
    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data.data()[c * n..(c + 1) * n]
    }
}

/// C x C symmetric positive semi-definite matrix. The constructor checks
/// symmetry (relative Frobenius 1e-10) and stores the exactly symmetrized
/// matrix; positive semi-definiteness is a property of how these are
/// produced, enforced by tests rather than an eigendecomposition per call.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    matrix: Tensor,
}

impl CovarianceMatrix {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 || matrix.rows() != matrix.cols() {
            return Err(CoreError::ShapeMismatch(format!(
                "covariance must be square, got {:?}",
                matrix.shape()
            )));
        }
        let n = matrix.rows();
        let norm = matrix.frob_norm();
        let mut asym_sq = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = matrix.at2(i, j) - matrix.at2(j, i);
                asym_sq += 2.0 * d * d;
            }
        }
        let tolerance = 1e-10 * norm;
        if asym_sq.sqrt() > tolerance {
            return Err(CoreError::NotSymmetric { asymmetry: asym_sq.sqrt(), tolerance });
        }
        let mut data = matrix.into_data();
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (data[i * n + j] + data[j * n + i]);
                data[i * n + j] = m;
                data[j * n + i] = m;
            }
        }
        Ok(Self { matrix: Tensor::from_raw(vec![n, n], data) })
    }

    /// Internal constructor for matrices that are symmetric by construction.
    pub(crate) fn from_symmetric(matrix: Tensor) -> Self {
        Self { matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.matrix
    }
}

/// N x N normalized affinity, symmetric by construction.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    matrix: Tensor,
}

impl AffinityMatrix {
    pub fn pixel_count(&self) -> usize {
        self.matrix.rows()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.matrix
    }
}

/// Subtracts each channel's mean. Returns the centered map and the means.
pub fn center(f: &FeatureMap) -> (FeatureMap, Vec<f64>) {
    let n = f.pixels();
    let inv_n = 1.0 / n as f64;
    let mut means = Vec::with_capacity(f.channels());
    let mut data = Vec::with_capacity(f.channels() * n);
    for c in 0..f.channels() {
        let row = f.channel(c);
        let mean = row.iter().sum::<f64>() * inv_n;
        means.push(mean);
        data.extend(row.iter().map(|v| v - mean));
    }
    let centered = FeatureMap {
        channels: f.channels(),
        height: f.height(),
        width: f.width(),
        data: Tensor::from_raw(vec![f.channels(), n], data),
    };
    (centered, means)
}

/// Uncentered second moment (1/N) * F * Ft, exactly symmetric.
pub fn gram(f: &FeatureMap) -> Tensor {
    let c = f.channels();
    let n = f.pixels();
    let inv_n = 1.0 / n as f64;
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        let ri = f.channel(i);
        for j in i..c {
            let rj = f.channel(j);
            let mut acc = 0.0;
            for p in 0..n {
                acc += ri[p] * rj[p];
            }
            let v = acc * inv_n;
            out[i * c + j] = v;
            out[j * c + i] = v;
        }
    }
    Tensor::from_raw(vec![c, c], out)
}

/// Centered covariance (1/N) * centered * centered_t. Same code path as
/// `gram` applied to the centered map, so the two agree exactly on
/// zero-mean input.
pub fn covariance(f: &FeatureMap) -> CovarianceMatrix {
    let (centered, _) = center(f);
    CovarianceMatrix::from_symmetric(gram(&centered))
}

/// Normalized affinity: centered_t * cov^-1 * centered, with the inverse
/// regularized through the absolute eigenvalue floor `eps`. The output is
/// invariant under any invertible linear mixing of the channels, which is
/// what makes it useful as a structure-preservation check.
pub fn affinity(f: &FeatureMap, eps: f64) -> Result<AffinityMatrix> {
    let n = f.pixels();
    if n > AFFINITY_MAX_PIXELS {
        return Err(CoreError::InvalidArgument(format!(
            "affinity needs N <= {AFFINITY_MAX_PIXELS} pixels, got {n}"
        )));
    }
    let (centered, _) = center(f);
    let cov = covariance(f);
    let inv = cov.tensor().spd_power(-1.0, eps)?;
    let m = inv.matmul(centered.tensor())?;
    let aff = centered.tensor().transpose().matmul(&m)?;
    let mut data = aff.into_data();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (data[i * n + j] + data[j * n + i]);
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    Ok(AffinityMatrix { matrix: Tensor::from_raw(vec![n, n], data) })
}

/// Per-channel mean and std, population variance, std = sqrt(var + eps).
pub fn channel_mean_std(f: &FeatureMap, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = f.pixels();
    let inv_n = 1.0 / n as f64;
    let mut means = Vec::with_capacity(f.channels());
    let mut stds = Vec::with_capacity(f.channels());
    for c in 0..f.channels() {
        let row = f.channel(c);
        let mean = row.iter().sum::<f64>() * inv_n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_n;
        means.push(mean);
        stds.push((var + eps).sqrt());
    }
    (means, stds)
}

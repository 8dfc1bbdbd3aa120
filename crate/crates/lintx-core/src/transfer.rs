//! Closed-form linear style transfer on feature maps.
//!
//! The transform T for a content/style pair is built from the two feature
//! covariances alone: whiten the content channels, then color them with the
//! style covariance's square root. Means are handled separately: the
//! content mean is removed before T and the style mean added after. An
//! optional orthogonal factor U sits between whitening and coloring; every
//! choice of U satisfies the covariance-matching condition, identity is the
//! default.
//!
//! The module also carries the cheap per-channel (AdaIN) variant, residual
//! verifiers for covariance matching and affinity preservation, masked
//! region-wise transfer, and content/result blending.

use crate::error::{CoreError, Result};
use crate::stats::{center, channel_mean_std, covariance, AffinityMatrix, CovarianceMatrix, FeatureMap};
use crate::stats::affinity;
use crate::tensor::Tensor;

/// Floor for the absolute eigenvalue clamp after scaling the relative
/// `eps` by the mean eigenvalue; keeps the clamp positive for zero
/// covariance (constant features).
const EPS_ABS_FLOOR: f64 = 1e-12;

/// General C x C linear map applied to centered feature channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformMatrix {
    matrix: Tensor,
}

impl TransformMatrix {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 || matrix.rows() != matrix.cols() {
            return Err(CoreError::ShapeMismatch(format!(
                "transform must be square, got {:?}",
                matrix.shape()
            )));
        }
        Ok(Self { matrix })
    }

    pub fn identity(dim: usize) -> Self {
        Self { matrix: Tensor::identity(dim) }
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.matrix
    }
}

/// Parameters of the closed-form construction.
///
/// `eps` is a *relative* eigenvalue clamp: before each matrix power the
/// floor is scaled by the operand's mean eigenvalue (trace/C), so the same
/// config works across covariances of any magnitude. `orthogonal_u`, when
/// set, is inserted between whitening and coloring and must be orthogonal
/// within Frobenius 1e-10.
#[derive(Debug, Clone)]
pub struct ClosedFormConfig {
    pub eps: f64,
    pub orthogonal_u: Option<Tensor>,
}

impl Default for ClosedFormConfig {
    fn default() -> Self {
        Self { eps: 1e-5, orthogonal_u: None }
    }
}

impl ClosedFormConfig {
    fn validate(&self, dim: usize) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(CoreError::InvalidArgument(format!(
                "closed-form eps must be positive and finite, got {}",
                self.eps
            )));
        }
        if let Some(u) = &self.orthogonal_u {
            if u.rank() != 2 || u.rows() != dim || u.cols() != dim {
                return Err(CoreError::ShapeMismatch(format!(
                    "orthogonal factor {:?} does not match channel count {dim}",
                    u.shape()
                )));
            }
            let dev = u
                .transpose()
                .matmul(u)?
                .sub(&Tensor::identity(dim))?
                .frob_norm();
            if dev > 1e-10 {
                return Err(CoreError::InvalidArgument(format!(
                    "orthogonal factor deviates from orthogonality by {dev:.3e}"
                )));
            }
        }
        Ok(())
    }
}

/// Relative clamp -> absolute clamp for one covariance: eps * mean
/// eigenvalue, floored so it stays positive for zero matrices.
fn eps_abs(cov: &Tensor, rel: f64) -> f64 {
    let dim = cov.rows() as f64;
    (rel * cov.trace() / dim).max(EPS_ABS_FLOOR)
}

/// Style-side factor: cov_s^(1/2). Cacheable per style image; the video
/// path computes it once and reuses it for every frame.
pub fn style_coloring_factor(cov_s: &CovarianceMatrix, cfg: &ClosedFormConfig) -> Result<Tensor> {
    cfg.validate(cov_s.dim())?;
    cov_s.tensor().spd_power(0.5, eps_abs(cov_s.tensor(), cfg.eps))
}

/// Content-side factor: cov_c^(-1/2).
pub fn content_whitening_factor(cov_c: &CovarianceMatrix, cfg: &ClosedFormConfig) -> Result<Tensor> {
    cfg.validate(cov_c.dim())?;
    cov_c.tensor().spd_power(-0.5, eps_abs(cov_c.tensor(), cfg.eps))
}

/// coloring * U * whitening. Split out so cached-style callers compose the
/// exact same arithmetic as [`closed_form_t`].
pub fn compose_transform(
    coloring: &Tensor,
    cfg: &ClosedFormConfig,
    whitening: &Tensor,
) -> Result<TransformMatrix> {
    let matrix = match &cfg.orthogonal_u {
        Some(u) => coloring.matmul(u)?.matmul(whitening)?,
        None => coloring.matmul(whitening)?,
    };
    TransformMatrix::new(matrix)
}

/// The closed-form transform: T = cov_s^(1/2) * U * cov_c^(-1/2).
/// For full-rank inputs (clamp inactive) T * cov_c * T_t reproduces cov_s.
pub fn closed_form_t(
    cov_c: &CovarianceMatrix,
    cov_s: &CovarianceMatrix,
    cfg: &ClosedFormConfig,
) -> Result<TransformMatrix> {
    if cov_c.dim() != cov_s.dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "covariance dims disagree: {} vs {}",
            cov_c.dim(),
            cov_s.dim()
        )));
    }
    let coloring = style_coloring_factor(cov_s, cfg)?;
    let whitening = content_whitening_factor(cov_c, cfg)?;
    compose_transform(&coloring, cfg, &whitening)
}

/// Applies T to the centered content and re-injects the style mean:
/// out = T * (f_c - mean(f_c)) + style_mean.
pub fn apply_transform(
    f_c: &FeatureMap,
    t: &TransformMatrix,
    style_mean: &[f64],
) -> Result<FeatureMap> {
    let c = f_c.channels();
    if t.dim() != c || style_mean.len() != c {
        return Err(CoreError::ShapeMismatch(format!(
            "transform dim {} / mean length {} vs {} channels",
            t.dim(),
            style_mean.len(),
            c
        )));
    }
    let (centered, _) = center(f_c);
    let mut out = t.tensor().matmul(centered.tensor())?.into_data();
    let n = f_c.pixels();
    for (ch, &m) in style_mean.iter().enumerate() {
        for v in &mut out[ch * n..(ch + 1) * n] {
            *v += m;
        }
    }
    FeatureMap::new(c, f_c.height(), f_c.width(), out)
}

/// Per-channel mean/variance matching. The content std in the divisor is
/// clamped from below by `eps`; style std is used as-is.
pub fn adain_transform(f_c: &FeatureMap, f_s: &FeatureMap, eps: f64) -> Result<FeatureMap> {
    if f_c.channels() != f_s.channels() {
        return Err(CoreError::ShapeMismatch(format!(
            "channel counts disagree: {} vs {}",
            f_c.channels(),
            f_s.channels()
        )));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(CoreError::InvalidArgument(format!(
            "adain eps must be positive and finite, got {eps}"
        )));
    }
    let (mean_c, std_c) = channel_mean_std(f_c, 0.0);
    let (mean_s, std_s) = channel_mean_std(f_s, 0.0);
    let n = f_c.pixels();
    let mut out = Vec::with_capacity(f_c.channels() * n);
    for ch in 0..f_c.channels() {
        let scale = std_s[ch] / std_c[ch].max(eps);
        let (mc, ms) = (mean_c[ch], mean_s[ch]);
        out.extend(f_c.channel(ch).iter().map(|&v| scale * (v - mc) + ms));
    }
    FeatureMap::new(f_c.channels(), f_c.height(), f_c.width(), out)
}

/// Residual of the covariance-matching condition for a candidate T:
/// ||T cov_c T_t - cov_s||_F / max(||cov_s||_F, 1e-12).
pub fn covariance_match_residual(
    t: &TransformMatrix,
    cov_c: &CovarianceMatrix,
    cov_s: &CovarianceMatrix,
) -> Result<f64> {
    let mapped = t
        .tensor()
        .matmul(cov_c.tensor())?
        .matmul(&t.tensor().transpose())?;
    let diff = mapped.sub(cov_s.tensor())?;
    Ok(diff.frob_norm() / cov_s.tensor().frob_norm().max(1e-12))
}

/// Covariance residual of an already-transformed map against its target.
pub fn verify_covariance_match(f_d: &FeatureMap, cov_target: &CovarianceMatrix) -> Result<f64> {
    if f_d.channels() != cov_target.dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} channels vs covariance dim {}",
            f_d.channels(),
            cov_target.dim()
        )));
    }
    let cov = covariance(f_d);
    let diff = cov.tensor().sub(cov_target.tensor())?;
    Ok(diff.frob_norm() / cov_target.tensor().frob_norm().max(1e-12))
}

/// Relative change of the normalized affinity from f_c to f_d. Invertible
/// linear channel transforms leave it near zero; nonlinearities do not.
pub fn verify_affinity_preserved(f_c: &FeatureMap, f_d: &FeatureMap, eps: f64) -> Result<f64> {
    if f_c.pixels() != f_d.pixels() {
        return Err(CoreError::ShapeMismatch(format!(
            "pixel counts disagree: {} vs {}",
            f_c.pixels(),
            f_d.pixels()
        )));
    }
    let a_c: AffinityMatrix = affinity(f_c, eps)?;
    let a_d: AffinityMatrix = affinity(f_d, eps)?;
    let diff = a_d.tensor().sub(a_c.tensor())?;
    Ok(diff.frob_norm() / a_c.tensor().frob_norm().max(1e-12))
}

/// Per-pixel region labels at some spatial resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    labels: Vec<usize>,
    region_count: usize,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, labels: Vec<usize>, region_count: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::InvalidArgument("mask extents must be positive".into()));
        }
        if labels.len() != height * width {
            return Err(CoreError::ShapeMismatch(format!(
                "mask has {} labels for {}x{} pixels",
                labels.len(),
                height,
                width
            )));
        }
        if region_count == 0 {
            return Err(CoreError::InvalidArgument("mask needs at least one region".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= region_count) {
            return Err(CoreError::InvalidArgument(format!(
                "mask label {bad} out of range for {region_count} regions"
            )));
        }
        Ok(Self { height, width, labels, region_count })
    }

    /// One region covering the whole extent.
    pub fn single(height: usize, width: usize) -> Self {
        Self { height, width, labels: vec![0; height * width], region_count: 1 }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Nearest-neighbor resample of the label grid (center sampling:
    /// target cell (i,j) reads the source pixel under its center).
    pub fn downsample(&self, height: usize, width: usize) -> Result<RegionMask> {
        if height == 0 || width == 0 {
            return Err(CoreError::InvalidArgument("mask extents must be positive".into()));
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut labels = Vec::with_capacity(height * width);
        for i in 0..height {
            let src_i = (((i as f64 + 0.5) * sy) as usize).min(self.height - 1);
            for j in 0..width {
                let src_j = (((j as f64 + 0.5) * sx) as usize).min(self.width - 1);
                labels.push(self.labels[src_i * self.width + src_j]);
            }
        }
        Ok(RegionMask { height, width, labels, region_count: self.region_count })
    }
}

/// Per-region style target: the covariance to match and the mean to
/// re-inject.
pub type RegionStyle = (CovarianceMatrix, Vec<f64>);

/// Applies an independent closed-form transform inside each mask region.
///
/// Pixels of region r are gathered in ascending order, transformed with
/// T_r built from that region's content covariance and `style_stats[r]`,
/// and scattered back. A single all-covering region therefore reproduces
/// the unmasked path bit for bit. Regions with fewer pixels than channels
/// have rank-deficient covariance; they fall back to a per-channel
/// (diagonal) transform instead of a heavily clamped full T. Empty regions
/// are skipped.
pub fn masked_transfer(
    f_c: &FeatureMap,
    mask: &RegionMask,
    style_stats: &[RegionStyle],
    cfg: &ClosedFormConfig,
) -> Result<FeatureMap> {
    if mask.height() != f_c.height() || mask.width() != f_c.width() {
        return Err(CoreError::ShapeMismatch(format!(
            "mask {}x{} vs feature map {}x{}",
            mask.height(),
            mask.width(),
            f_c.height(),
            f_c.width()
        )));
    }
    if style_stats.len() != mask.region_count() {
        return Err(CoreError::InvalidArgument(format!(
            "mask has {} regions but {} style stats were provided",
            mask.region_count(),
            style_stats.len()
        )));
    }
    let c = f_c.channels();
    for (r, (cov, mean)) in style_stats.iter().enumerate() {
        if cov.dim() != c || mean.len() != c {
            return Err(CoreError::ShapeMismatch(format!(
                "style stats for region {r} have dim {}/{} but the map has {c} channels",
                cov.dim(),
                mean.len()
            )));
        }
    }

    let n = f_c.pixels();
    let mut out = vec![0.0; c * n];
    for (r, (style_cov, style_mean)) in style_stats.iter().enumerate() {
        let pixels: Vec<usize> = (0..n).filter(|&p| mask.labels()[p] == r).collect();
        if pixels.is_empty() {
            continue;
        }
        let nr = pixels.len();
        let mut gathered = Vec::with_capacity(c * nr);
        for ch in 0..c {
            let row = f_c.channel(ch);
            gathered.extend(pixels.iter().map(|&p| row[p]));
        }
        let sub = FeatureMap::new(c, 1, nr, gathered)?;

        let transformed = if nr < c {
            diagonal_region_transform(&sub, style_cov, style_mean, cfg)?
        } else {
            let cov_r = covariance(&sub);
            let t = closed_form_t(&cov_r, style_cov, cfg)?;
            apply_transform(&sub, &t, style_mean)?
        };

        for ch in 0..c {
            let row = transformed.channel(ch);
            for (k, &p) in pixels.iter().enumerate() {
                out[ch * n + p] = row[k];
            }
        }
    }
    FeatureMap::new(c, f_c.height(), f_c.width(), out)
}

/// AdaIN-style fallback for rank-deficient regions: match per-channel mean
/// and std, with the style std taken from the target covariance diagonal.
fn diagonal_region_transform(
    sub: &FeatureMap,
    style_cov: &CovarianceMatrix,
    style_mean: &[f64],
    cfg: &ClosedFormConfig,
) -> Result<FeatureMap> {
    let c = sub.channels();
    let (mean_c, std_c) = channel_mean_std(sub, 0.0);
    // Clamp the divisor like the full path clamps eigenvalues: relative to
    // the mean content variance.
    let mean_var = std_c.iter().map(|s| s * s).sum::<f64>() / c as f64;
    let floor = (cfg.eps * mean_var).max(EPS_ABS_FLOOR).sqrt();
    let n = sub.pixels();
    let mut out = Vec::with_capacity(c * n);
    for ch in 0..c {
        let std_s = style_cov.tensor().at2(ch, ch).max(0.0).sqrt();
        let scale = std_s / std_c[ch].max(floor);
        let (mc, ms) = (mean_c[ch], style_mean[ch]);
        out.extend(sub.channel(ch).iter().map(|&v| scale * (v - mc) + ms));
    }
    FeatureMap::new(c, sub.height(), sub.width(), out)
}

/// alpha * f_d + (1 - alpha) * f_c. The endpoints return exact copies so
/// alpha 0/1 are bit-transparent.
pub fn blend(f_c: &FeatureMap, f_d: &FeatureMap, alpha: f64) -> Result<FeatureMap> {
    if f_c.channels() != f_d.channels()
        || f_c.height() != f_d.height()
        || f_c.width() != f_d.width()
    {
        return Err(CoreError::ShapeMismatch("blend operands differ in shape".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::InvalidArgument(format!(
            "blend alpha must be in [0, 1], got {alpha}"
        )));
    }
    if alpha == 0.0 {
        return Ok(f_c.clone());
    }
    if alpha == 1.0 {
        return Ok(f_d.clone());
    }
    let data = f_c
        .tensor()
        .data()
        .iter()
        .zip(f_d.tensor().data())
        .map(|(&c, &d)| alpha * d + (1.0 - alpha) * c)
        .collect();
    FeatureMap::new(f_c.channels(), f_c.height(), f_c.width(), data)
}

//! Shared stylization plumbing for the image and video commands.
//!
//! The style image is reduced to a per-kind recipe exactly once; every
//! frame then runs the identical per-content arithmetic. Because the
//! per-image command uses the same two stages, a cached-style video run
//! is byte-identical to stylizing each frame independently.

use crate::{Kind, Resolved};
use lintx_cli::{ppm, Fail};
use lintx_core::model::{
    self, init_weights, validate_store, ModelSpec, StyleFactors,
};
use lintx_core::stats::{self, covariance, CovarianceMatrix, FeatureMap, AFFINITY_MAX_PIXELS};
use lintx_core::tensor::Tensor;
use lintx_core::transfer::{
    adain_transform, apply_transform, blend, compose_transform, content_whitening_factor,
    masked_transfer, style_coloring_factor, verify_affinity_preserved, verify_covariance_match,
    ClosedFormConfig, RegionMask, RegionStyle,
};
use lintx_core::weights::WeightStore;
use std::path::Path;

/// Content-std clamp for the per-channel transform.
pub const ADAIN_EPS: f64 = 1e-8;
/// Covariance-inverse regularizer for affinity reports.
pub const AFFINITY_EPS: f64 = 1e-10;

pub struct Engine {
    pub spec: ModelSpec,
    pub store: WeightStore,
}

/// Weights from `--weights`, or a seed-derived untrained store so every
/// command works self-contained.
pub fn load_engine(r: &Resolved) -> Result<Engine, Fail> {
    let spec = r.depth.spec();
    let store = match &r.weights {
        Some(path) => {
            let store = WeightStore::load(path)
                .map_err(|e| Fail::Io(format!("{}: {e}", path.display())))?;
            validate_store(&spec, &store).map_err(|e| {
                Fail::Io(format!(
                    "{}: weights do not fit the {} preset: {e}",
                    path.display(),
                    r.depth.name()
                ))
            })?;
            store
        }
        None => init_weights(&spec, r.seed),
    };
    Ok(Engine { spec, store })
}

/// The style-dependent factor, computed once per style image. Holds the
/// style covariance too, for `--report`.
pub struct StyleRecipe {
    kind: RecipeKind,
    style_cov: CovarianceMatrix,
}

enum RecipeKind {
    ClosedForm { coloring: Tensor, mean: Vec<f64> },
    Adain { style_bottleneck: FeatureMap },
    Learned { factors: StyleFactors },
}

pub fn style_recipe(eng: &Engine, style_img: &Tensor, kind: Kind) -> Result<StyleRecipe, Fail> {
    let enc = model::encode(style_img, &eng.spec.encoder, &eng.store)?;
    let style_cov = covariance(enc.bottleneck());
    let cfg = ClosedFormConfig::default();
    let kind = match kind {
        Kind::ClosedForm => {
            let mean = stats::center(enc.bottleneck()).1;
            let coloring = style_coloring_factor(&style_cov, &cfg)?;
            RecipeKind::ClosedForm { coloring, mean }
        }
        Kind::Adain => RecipeKind::Adain { style_bottleneck: enc.into_bottleneck() },
        Kind::Learned => RecipeKind::Learned {
            factors: model::style_factors(enc.bottleneck(), &eng.spec.transform, &eng.store)?,
        },
    };
    Ok(StyleRecipe { kind, style_cov })
}

/// Per-region style statistics under the mask, taken at the style image's
/// bottleneck resolution.
pub fn region_styles(
    eng: &Engine,
    style_img: &Tensor,
    mask: &RegionMask,
) -> Result<Vec<RegionStyle>, Fail> {
    let enc = model::encode(style_img, &eng.spec.encoder, &eng.store)?;
    let f_s = enc.bottleneck();
    let small = mask.downsample(f_s.height(), f_s.width())?;
    let c = f_s.channels();
    let mut stats = Vec::with_capacity(small.region_count());
    for r in 0..small.region_count() {
        let picked: Vec<usize> = small
            .labels()
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == r)
            .map(|(p, _)| p)
            .collect();
        if picked.is_empty() {
            return Err(Fail::Io(format!(
                "mask region {r} covers no pixels of the style image"
            )));
        }
        let mut data = Vec::with_capacity(c * picked.len());
        for ch in 0..c {
            let row = f_s.channel(ch);
            data.extend(picked.iter().map(|&p| row[p]));
        }
        let gathered = FeatureMap::new(c, 1, picked.len(), data)?;
        let mean = stats::center(&gathered).1;
        stats.push((covariance(&gathered), mean));
    }
    Ok(stats)
}

/// Residuals printed by `--report`.
pub struct Report {
    pub covariance_residual: f64,
    /// Absent when the bottleneck has more pixels than the affinity cap.
    pub affinity_residual: Option<f64>,
}

pub struct Stylized {
    pub image: Tensor,
    pub report: Option<Report>,
}

/// The per-content half of stylization: encode, transform the bottleneck
/// with the cached recipe, blend, decode.
pub fn stylize_image(
    eng: &Engine,
    recipe: &StyleRecipe,
    content_img: &Tensor,
    alpha: f64,
    want_report: bool,
) -> Result<Stylized, Fail> {
    let enc = model::encode(content_img, &eng.spec.encoder, &eng.store)?;
    let f_c = enc.bottleneck();
    let f_d = match &recipe.kind {
        RecipeKind::ClosedForm { coloring, mean } => {
            let cfg = ClosedFormConfig::default();
            let whitening = content_whitening_factor(&covariance(f_c), &cfg)?;
            let t = compose_transform(coloring, &cfg, &whitening)?;
            apply_transform(f_c, &t, mean)?
        }
        RecipeKind::Adain { style_bottleneck } => adain_transform(f_c, style_bottleneck, ADAIN_EPS)?,
        RecipeKind::Learned { factors } => {
            model::stylize_with_factors(f_c, factors, &eng.spec.transform, &eng.store)?
        }
    };
    let blended = blend(f_c, &f_d, alpha)?;
    let report = if want_report {
        Some(Report {
            covariance_residual: verify_covariance_match(&blended, &recipe.style_cov)?,
            affinity_residual: if blended.pixels() <= AFFINITY_MAX_PIXELS {
                Some(verify_affinity_preserved(f_c, &blended, AFFINITY_EPS)?)
            } else {
                None
            },
        })
    } else {
        None
    };
    let image = model::decode(&blended, &eng.spec.encoder, &eng.store)?;
    Ok(Stylized { image, report })
}

/// Region-wise closed-form stylization. Reports the worst per-region
/// covariance residual when asked.
pub fn stylize_masked(
    eng: &Engine,
    content_img: &Tensor,
    style_img: &Tensor,
    mask: &RegionMask,
    alpha: f64,
    want_report: bool,
) -> Result<Stylized, Fail> {
    let enc = model::encode(content_img, &eng.spec.encoder, &eng.store)?;
    let f_c = enc.bottleneck();
    if mask.height() != content_img.shape()[1] || mask.width() != content_img.shape()[2] {
        return Err(Fail::Io(format!(
            "mask is {}x{} but the content image is {}x{}",
            mask.height(),
            mask.width(),
            content_img.shape()[1],
            content_img.shape()[2]
        )));
    }
    let small = mask.downsample(f_c.height(), f_c.width())?;
    let styles = region_styles(eng, style_img, mask)?;
    let cfg = ClosedFormConfig::default();
    let f_d = masked_transfer(f_c, &small, &styles, &cfg)?;
    let blended = blend(f_c, &f_d, alpha)?;
    let report = if want_report {
        let mut worst = 0.0f64;
        for (r, (cov, _)) in styles.iter().enumerate() {
            let picked: Vec<usize> = small
                .labels()
                .iter()
                .enumerate()
                .filter(|&(_, &l)| l == r)
                .map(|(p, _)| p)
                .collect();
            if picked.len() < blended.channels() {
                continue;
            }
            let mut data = Vec::with_capacity(blended.channels() * picked.len());
            for ch in 0..blended.channels() {
                let row = blended.channel(ch);
                data.extend(picked.iter().map(|&p| row[p]));
            }
            let region = FeatureMap::new(blended.channels(), 1, picked.len(), data)?;
            worst = worst.max(verify_covariance_match(&region, cov)?);
        }
        Some(Report { covariance_residual: worst, affinity_residual: None })
    } else {
        None
    };
    let image = model::decode(&blended, &eng.spec.encoder, &eng.store)?;
    Ok(Stylized { image, report })
}

fn print_report(report: &Report) {
    println!("REPORT covariance_residual {:.6e}", report.covariance_residual);
    if let Some(a) = report.affinity_residual {
        println!("REPORT affinity_residual {a:.6e}");
    }
}

pub fn cmd_stylize(r: &Resolved) -> Result<(), Fail> {
    let content_path = r.require_path("content")?;
    let style_path = r.require_path("style")?;
    let out = r.require_path("out")?;
    if r.mask.is_some() && r.kind != Kind::ClosedForm {
        return Err(Fail::Usage("--mask requires --kind closed_form".into()));
    }
    let eng = load_engine(r)?;
    let content = ppm::read_image(content_path)?;
    let style = ppm::read_image(style_path)?;
    let result = match &r.mask {
        Some(mask_path) => {
            let mask = ppm::read_mask(mask_path)?;
            stylize_masked(&eng, &content, &style, &mask, r.alpha, r.report)?
        }
        None => {
            let recipe = style_recipe(&eng, &style, r.kind)?;
            stylize_image(&eng, &recipe, &content, r.alpha, r.report)?
        }
    };
    ppm::write_image(&result.image, out)?;
    if let Some(rep) = &result.report {
        print_report(rep);
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Lexicographically ordered .ppm frames of a directory.
pub fn list_frames(dir: &Path) -> Result<Vec<(String, std::path::PathBuf)>, Fail> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Fail::Io(format!("{}: {e}", dir.display())))?;
    let mut frames = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Fail::Io(format!("{}: {e}", dir.display())))?;
        if !entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
            continue;
        }
        let name = entry
            .file_name()
            .into_string()
            .map_err(|n| Fail::Io(format!("frame name {n:?} is not valid UTF-8")))?;
        if name.ends_with(".ppm") {
            frames.push((name, entry.path()));
        }
    }
    if frames.is_empty() {
        return Err(Fail::Io(format!("{}: no .ppm frames found", dir.display())));
    }
    frames.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(frames)
}

pub fn cmd_stylize_video(r: &Resolved) -> Result<(), Fail> {
    let frames_dir = r.require_path("content")?;
    let style_path = r.require_path("style")?;
    let out_dir = r.require_path("out")?;
    if r.mask.is_some() {
        return Err(Fail::Usage("--mask is not supported for video".into()));
    }
    let eng = load_engine(r)?;
    let style = ppm::read_image(style_path)?;
    let recipe = style_recipe(&eng, &style, r.kind)?;
    let frames = list_frames(frames_dir)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Fail::Io(format!("{}: {e}", out_dir.display())))?;

    let mut dims: Option<(usize, usize)> = None;
    for (name, path) in &frames {
        let frame = ppm::read_image(path)?;
        let hw = (frame.shape()[1], frame.shape()[2]);
        match dims {
            None => dims = Some(hw),
            Some(d) if d != hw => {
                return Err(Fail::Io(format!(
                    "{name}: frame is {}x{} but earlier frames are {}x{}",
                    hw.0, hw.1, d.0, d.1
                )));
            }
            _ => {}
        }
        let result = stylize_image(&eng, &recipe, &frame, r.alpha, false)?;
        ppm::write_image(&result.image, &out_dir.join(name))?;
    }
    println!("wrote {} frames to {}", frames.len(), out_dir.display());
    Ok(())
}

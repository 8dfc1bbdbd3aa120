//! Timing grid for the three transform kinds.
//!
//! Each cell times the style-transform module at the 64-channel bottleneck
//! a size x size image would produce under the shallow preset: the
//! style-side setup (the factor a video run would cache) and the
//! per-content application are measured separately. Encoding and decoding
//! are deliberately outside the timed region; the table compares transform
//! kinds, not the fixed autoencoder around them.

use crate::{Kind, Resolved};
use lintx_cli::Fail;
use lintx_core::model::{self, init_weights, ModelSpec};
use lintx_core::stats::{center, channel_mean_std, covariance, FeatureMap};
use lintx_core::transfer::{
    adain_transform, apply_transform, compose_transform, content_whitening_factor,
    style_coloring_factor, ClosedFormConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use std::time::Instant;

const WARMUPS: usize = 3;
const RUNS: usize = 20;

fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeatureMap::new(c, h, w, data).expect("valid extents")
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    let n = samples.len();
    (samples[n / 2 - 1] + samples[n / 2]) / 2.0
}

/// One warmup-then-measure cell. `setup` produces the cacheable style
/// factor; `apply` consumes it for one content map.
fn time_cell<S>(
    mut setup: impl FnMut() -> Result<S, Fail>,
    mut apply: impl FnMut(&S) -> Result<(), Fail>,
) -> Result<(f64, f64, f64), Fail> {
    for _ in 0..WARMUPS {
        let s = setup()?;
        apply(&s)?;
    }
    let mut setup_ms = Vec::with_capacity(RUNS);
    let mut apply_ms = Vec::with_capacity(RUNS);
    let mut total_ms = Vec::with_capacity(RUNS);
    for _ in 0..RUNS {
        let t0 = Instant::now();
        let s = setup()?;
        let t1 = Instant::now();
        apply(&s)?;
        let t2 = Instant::now();
        let su = (t1 - t0).as_secs_f64() * 1e3;
        let ap = (t2 - t1).as_secs_f64() * 1e3;
        setup_ms.push(su);
        apply_ms.push(ap);
        total_ms.push(su + ap);
    }
    Ok((median(&mut setup_ms), median(&mut apply_ms), median(&mut total_ms)))
}

pub fn cmd_bench(r: &Resolved) -> Result<(), Fail> {
    let spec = ModelSpec::shallow();
    let factor = spec.encoder.downsample_factor();
    for &size in &r.sizes {
        if size < 2 * factor || size % factor != 0 {
            return Err(Fail::Usage(format!(
                "bench size {size} must be a multiple of {factor} and at least {}",
                2 * factor
            )));
        }
    }
    let store = init_weights(&spec, r.seed);
    let c = spec.encoder.bottleneck_channels();
    let cfg = ClosedFormConfig::default();

    println!("# style-transform timings at the {c}-channel bottleneck of a size x size image");
    println!("# setup = style-side factor (cacheable); apply = per-content transform");
    println!("# medians of {RUNS} runs after {WARMUPS} warmups, in milliseconds");
    println!("# absolute values depend on this machine and build; they are not comparable to any published timing table");
    println!("size,kind,setup_ms,apply_ms,total_ms");

    for &size in &r.sizes {
        let side = size / factor;
        let f_c = random_map(c, side, side, r.seed ^ (size as u64) << 1);
        let f_s = random_map(c, side, side, r.seed ^ (size as u64) << 1 ^ 1);
        for kind in [Kind::ClosedForm, Kind::Adain, Kind::Learned] {
            let cell = match kind {
                Kind::ClosedForm => time_cell(
                    || {
                        let cov_s = covariance(&f_s);
                        let coloring = style_coloring_factor(&cov_s, &cfg)?;
                        Ok(black_box((coloring, center(&f_s).1)))
                    },
                    |(coloring, mean)| {
                        let whitening = content_whitening_factor(&covariance(&f_c), &cfg)?;
                        let t = compose_transform(coloring, &cfg, &whitening)?;
                        black_box(apply_transform(&f_c, &t, mean)?);
                        Ok(())
                    },
                )?,
                Kind::Adain => time_cell(
                    || Ok(black_box(channel_mean_std(&f_s, 0.0))),
                    |_| {
                        black_box(adain_transform(&f_c, &f_s, crate::stylize::ADAIN_EPS)?);
                        Ok(())
                    },
                )?,
                Kind::Learned => time_cell(
                    || Ok(black_box(model::style_factors(&f_s, &spec.transform, &store)?)),
                    |factors| {
                        black_box(model::stylize_with_factors(
                            &f_c,
                            factors,
                            &spec.transform,
                            &store,
                        )?);
                        Ok(())
                    },
                )?,
            };
            println!(
                "{size},{},{:.3},{:.3},{:.3}",
                kind.flag_name(),
                cell.0,
                cell.1,
                cell.2
            );
        }
    }
    Ok(())
}

//! Self-contained invariant suite behind `lintx verify`.
//!
//! Every check builds its own seeded random instance, so the command
//! needs no inputs and is deterministic per seed. One line per check:
//! `CHECK <name> <residual> <threshold> PASS|FAIL`. Most checks pass when
//! the residual is under the threshold; the relu control passes when it
//! is above, since it exists to prove the affinity test can discriminate.

use crate::Resolved;
use lintx_cli::Fail;
use lintx_core::autodiff::checks::op_gradient_checks;
use lintx_core::stats::{center, channel_mean_std, covariance, FeatureMap};
use lintx_core::tensor::Tensor;
use lintx_core::trainer::composite_gradient_check;
use lintx_core::transfer::{
    adain_transform, apply_transform, closed_form_t, masked_transfer, verify_affinity_preserved,
    verify_covariance_match, ClosedFormConfig, RegionMask, TransformMatrix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-5;

pub struct CheckRow {
    pub name: String,
    pub residual: f64,
    pub threshold: f64,
    pub pass: bool,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    let data = (0..c * h * w).map(|_| gaussian(rng)).collect();
    FeatureMap::new(c, h, w, data).expect("valid extents")
}

/// Random orthogonal matrix: Gram-Schmidt over Gaussian rows, run twice
/// for numerical tightness.
fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut rows: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| gaussian(rng)).collect())
        .collect();
    for _ in 0..2 {
        for i in 0..dim {
            for j in 0..i {
                let dot: f64 = (0..dim).map(|k| rows[i][k] * rows[j][k]).sum();
                for k in 0..dim {
                    rows[i][k] -= dot * rows[j][k];
                }
            }
            let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut rows[i] {
                *v /= norm;
            }
        }
    }
    Tensor::new(&[dim, dim], rows.concat()).expect("square by construction")
}

fn below(name: impl Into<String>, residual: f64, threshold: f64) -> CheckRow {
    let name = name.into();
    CheckRow { name, residual, threshold, pass: residual < threshold }
}

/// The default invariant suite. `sabotage_identity` swaps the closed-form
/// transform for the identity in the covariance checks, as a negative
/// control proving the checks can fail.
pub fn run_checks(seed: u64, sabotage_identity: bool, grad: bool) -> Result<Vec<CheckRow>, Fail> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ClosedFormConfig::default();
    let mut rows = Vec::new();

    for c in [4usize, 16, 64] {
        let f_c = random_map(c, 1, 8 * c, &mut rng);
        let f_s = random_map(c, 1, 8 * c, &mut rng);
        let (cov_c, cov_s) = (covariance(&f_c), covariance(&f_s));
        let t = if sabotage_identity {
            TransformMatrix::identity(c)
        } else {
            closed_form_t(&cov_c, &cov_s, &cfg)?
        };
        let f_d = apply_transform(&f_c, &t, &center(&f_s).1)?;
        let residual = verify_covariance_match(&f_d, &cov_s)?;
        rows.push(below(format!("covariance_match_c{c}"), residual, 1e-6));
    }

    {
        let c = 8;
        let f_c = random_map(c, 1, 8 * c, &mut rng);
        let f_s = random_map(c, 1, 8 * c, &mut rng);
        let (cov_c, cov_s) = (covariance(&f_c), covariance(&f_s));
        let u_cfg =
            ClosedFormConfig { orthogonal_u: Some(random_orthogonal(c, &mut rng)), ..cfg.clone() };
        let t = if sabotage_identity {
            TransformMatrix::identity(c)
        } else {
            closed_form_t(&cov_c, &cov_s, &u_cfg)?
        };
        let f_d = apply_transform(&f_c, &t, &center(&f_s).1)?;
        let residual = verify_covariance_match(&f_d, &cov_s)?;
        rows.push(below("covariance_match_orthogonal_u", residual, 1e-6));
    }

    {
        let c = 8;
        let f_c = random_map(c, 16, 16, &mut rng);
        let f_a = random_map(c, 1, 8 * c, &mut rng);
        let f_b = random_map(c, 1, 8 * c, &mut rng);
        let t = closed_form_t(&covariance(&f_a), &covariance(&f_b), &cfg)?;
        let mean: Vec<f64> = (0..c).map(|_| gaussian(&mut rng)).collect();
        let f_d = apply_transform(&f_c, &t, &mean)?;
        let residual = verify_affinity_preserved(&f_c, &f_d, crate::stylize::AFFINITY_EPS)?;
        rows.push(below("affinity_linear_invariance", residual, 1e-6));

        let rectified = FeatureMap::new(
            c,
            16,
            16,
            f_c.tensor().data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        )?;
        let control =
            verify_affinity_preserved(&f_c, &rectified, crate::stylize::AFFINITY_EPS)?;
        rows.push(CheckRow {
            name: "affinity_relu_control".into(),
            residual: control,
            threshold: 1e-3,
            pass: control > 1e-3,
        });
    }

    {
        let c = 8;
        let f_c = random_map(c, 8, 8, &mut rng);
        let f_s = random_map(c, 8, 8, &mut rng);
        let out = adain_transform(&f_c, &f_s, crate::stylize::ADAIN_EPS)?;
        let (mean_s, std_s) = channel_mean_std(&f_s, 0.0);
        let (mean_d, std_d) = channel_mean_std(&out, 0.0);
        let mut residual = 0.0f64;
        for ch in 0..c {
            residual = residual
                .max((mean_d[ch] - mean_s[ch]).abs())
                .max((std_d[ch] - std_s[ch]).abs());
        }
        rows.push(below("adain_channel_stats", residual, 1e-8));
    }

    {
        let c = 8;
        let f_c = random_map(c, 16, 16, &mut rng);
        let f_s = random_map(c, 1, 8 * c, &mut rng);
        let (cov_c, cov_s) = (covariance(&f_c), covariance(&f_s));
        let mean_s = center(&f_s).1;
        let whole = apply_transform(&f_c, &closed_form_t(&cov_c, &cov_s, &cfg)?, &mean_s)?;
        let masked = masked_transfer(
            &f_c,
            &RegionMask::single(16, 16),
            &[(cov_s.clone(), mean_s.clone())],
            &cfg,
        )?;
        let residual = whole
            .tensor()
            .data()
            .iter()
            .zip(masked.tensor().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        rows.push(CheckRow {
            name: "masked_single_region_exact".into(),
            residual,
            threshold: 0.0,
            pass: residual <= 0.0,
        });
    }

    {
        let c = 4;
        let f_c = random_map(c, 16, 16, &mut rng);
        let s0 = random_map(c, 1, 8 * c, &mut rng);
        let s1 = random_map(c, 1, 8 * c, &mut rng);
        let styles = [
            (covariance(&s0), center(&s0).1),
            (covariance(&s1), center(&s1).1),
        ];
        // left half region 0, right half region 1: 128 px each, >= 4C
        let labels: Vec<usize> =
            (0..256).map(|p| if p % 16 < 8 { 0 } else { 1 }).collect();
        let mask = RegionMask::new(16, 16, labels.clone(), 2).map_err(Fail::from)?;
        let out = masked_transfer(&f_c, &mask, &styles, &cfg)?;
        let mut residual = 0.0f64;
        for (r, (cov, _)) in styles.iter().enumerate() {
            let picked: Vec<usize> =
                (0..256).filter(|p| labels[*p] == r).collect();
            let mut data = Vec::with_capacity(c * picked.len());
            for ch in 0..c {
                let row = out.channel(ch);
                data.extend(picked.iter().map(|&p| row[p]));
            }
            let region = FeatureMap::new(c, 1, picked.len(), data)?;
            residual = residual.max(verify_covariance_match(&region, cov)?);
        }
        rows.push(below("masked_two_region_covariance", residual, 1e-5));
    }

    if grad {
        for check in op_gradient_checks(seed)? {
            rows.push(below(format!("grad_{}", check.name), check.max_rel_err, GRAD_TOL));
        }
        let composite = composite_gradient_check(seed)?;
        rows.push(below("grad_composite", composite, GRAD_TOL));
    }

    Ok(rows)
}

pub fn cmd_verify(r: &Resolved, sabotage: Option<&str>, grad: bool) -> Result<(), Fail> {
    let sabotage_identity = match sabotage {
        None => false,
        Some("identityT") => true,
        Some(other) => {
            return Err(Fail::Usage(format!(
                "unknown sabotage mode '{other}' (expected: identityT)"
            )));
        }
    };
    let rows = run_checks(r.seed, sabotage_identity, grad)?;
    let mut failed = 0usize;
    for row in &rows {
        println!(
            "CHECK {} {:.6e} {:.1e} {}",
            row.name,
            row.residual,
            row.threshold,
            if row.pass { "PASS" } else { "FAIL" }
        );
        if !row.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Fail::Check(format!("{failed} of {} checks failed", rows.len())));
    }
    Ok(())
}

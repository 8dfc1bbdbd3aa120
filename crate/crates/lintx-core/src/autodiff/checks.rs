//! Finite-difference coverage of the whole op set.
//!
//! Each differentiable op gets a tiny graph whose every input is a
//! parameter, a scalar loss on top, and a central-difference comparison
//! per parameter. The per-op result is the worst relative error over all
//! of its parameters, so a broken backward rule for any input slot shows
//! up. Inputs that sit near a kink (relu's zero, pooling ties) are kept
//! away from it by construction, since finite differences are meaningless
//! exactly on the kink.

use super::{grad_check, Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One op's worst-case relative gradient error.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

const H: f64 = 1e-5;
const SAMPLES: usize = 16;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

fn param(g: &mut Graph, shape: &[usize], rng: &mut ChaCha8Rng) -> NodeId {
    let data = (0..shape.iter().product()).map(|_| gaussian(rng)).collect();
    g.parameter(Tensor::from_raw(shape.to_vec(), data))
}

/// Gaussian magnitudes pushed away from zero, for ops with a kink there.
fn kink_safe_param(g: &mut Graph, shape: &[usize], rng: &mut ChaCha8Rng) -> NodeId {
    let data = (0..shape.iter().product())
        .map(|_| {
            let v = gaussian(rng);
            v.signum() * (v.abs() + 0.2)
        })
        .collect();
    g.parameter(Tensor::from_raw(shape.to_vec(), data))
}

fn target(g: &mut Graph, out: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let shape = g.shape(out).to_vec();
    let data = (0..shape.iter().product()).map(|_| gaussian(rng)).collect();
    let t = g.input(&shape);
    g.bind(t, Tensor::from_raw(shape, data))?;
    g.frobenius_sq_diff(out, t)
}

fn worst(g: &mut Graph, loss: NodeId, params: &[NodeId], seed: u64) -> Result<f64> {
    let mut max = 0.0f64;
    for (k, &p) in params.iter().enumerate() {
        max = max.max(grad_check(g, loss, p, H, SAMPLES, seed ^ (k as u64 + 1))?);
    }
    Ok(max)
}

/// Runs the per-op finite-difference suite. Deterministic in `seed`.
pub fn op_gradient_checks(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &'static str, err: f64| out.push(OpCheck { name, max_rel_err: err });

    {
        let mut g = Graph::new();
        let x = param(&mut g, &[2, 4, 4], &mut rng);
        let w = param(&mut g, &[3, 2, 3, 3], &mut rng);
        let b = param(&mut g, &[3], &mut rng);
        let y = g.conv2d(x, w, b)?;
        let loss = target(&mut g, y, &mut rng)?;
        push("conv2d", worst(&mut g, loss, &[x, w, b], seed)?);
    }
    {
        let mut g = Graph::new();
        let x = kink_safe_param(&mut g, &[3, 5], &mut rng);
        let y = g.relu(x)?;
        let loss = target(&mut g, y, &mut rng)?;
        push("relu", worst(&mut g, loss, &[x], seed)?);
    }
    {
        let mut g = Graph::new();
        let x = kink_safe_param(&mut g, &[2, 4, 4], &mut rng);
        let y = g.maxpool2(x)?;
        let loss = target(&mut g, y, &mut rng)?;
        push("maxpool2", worst(&mut g, loss, &[x], seed)?);
    }
    {
        let mut g = Graph::new();
        let x = param(&mut g, &[2, 3, 3], &mut rng);
        let y = g.upsample2_nearest(x)?;
        let loss = target(&mut g, y, &mut rng)?;
        push("upsample2_nearest", worst(&mut g, loss, &[x], seed)?);
    }
    {
        let mut g = Graph::new();
        let x = param(&mut g, &[4], &mut rng);
        let w = param(&mut g, &[3, 4], &mut rng);
        let b = param(&mut g, &[3], &mut rng);
        let y = g.linear(x, w, b)?;
        let loss = target(&mut g, y, &mut rng)?;
        push("linear", worst(&mut g, loss, &[x, w, b], seed)?);
    }
    {
        let mut g = Graph::new();
        let a = param(&mut g, &[3, 4], &mut rng);
        let b = param(&mut g, &[4, 2], &mut rng);
        let y = g.matmul(a, b)?;
        let loss = target(&mut g, y, &mut rng)?;
        push("matmul", worst(&mut g, loss, &[a, b], seed)?);
    }
    {
        let mut g = Graph::new();
        let a = param(&mut g, &[3, 4], &mut rng);
        let b = param(&mut g, &[3, 4], &mut rng);
        let y = g.add(a, b)?;
        let loss = target(&mut g, y, &mut rng)?;
        push("add", worst(&mut g, loss, &[a, b], seed)?);
    }
    {
        let mut g = Graph::new();
        let x = param(&mut g, &[3, 4], &mut rng);
        let y = g.scale(x, -0.7)?;
        let loss = target(&mut g, y, &mut rng)?;
        push("scale", worst(&mut g, loss, &[x], seed)?);
    }
    {
        let mut g = Graph::new();
        let x = param(&mut g, &[3, 4], &mut rng);
        let y = g.reshape(x, &[2, 6])?;
        let loss = target(&mut g, y, &mut rng)?;
        push("reshape", worst(&mut g, loss, &[x], seed)?);
    }
    {
        let mut g = Graph::new();
        let x = param(&mut g, &[3, 8], &mut rng);
        let y = g.subtract_channel_mean(x)?;
        let loss = target(&mut g, y, &mut rng)?;
        push("subtract_channel_mean", worst(&mut g, loss, &[x], seed)?);
    }
    {
        let mut g = Graph::new();
        let x = param(&mut g, &[3, 8], &mut rng);
        let y = g.covariance(x)?;
        let loss = target(&mut g, y, &mut rng)?;
        push("covariance", worst(&mut g, loss, &[x], seed)?);
    }
    {
        let mut g = Graph::new();
        let x = param(&mut g, &[3, 8], &mut rng);
        let y = g.gram(x)?;
        let loss = target(&mut g, y, &mut rng)?;
        push("gram", worst(&mut g, loss, &[x], seed)?);
    }
    {
        let mut g = Graph::new();
        let a = param(&mut g, &[3, 4], &mut rng);
        let b = param(&mut g, &[3, 4], &mut rng);
        let loss = g.frobenius_sq_diff(a, b)?;
        push("frobenius_sq_diff", worst(&mut g, loss, &[a, b], seed)?);
    }
    {
        let mut g = Graph::new();
        let a = param(&mut g, &[3, 4], &mut rng);
        let b = param(&mut g, &[3, 4], &mut rng);
        let c = param(&mut g, &[3, 4], &mut rng);
        let y = g.weighted_sum(&[(a, 0.5), (b, -1.25), (c, 2.0)])?;
        let loss = target(&mut g, y, &mut rng)?;
        push("weighted_sum", worst(&mut g, loss, &[a, b, c], seed)?);
    }

    Ok(out)
}

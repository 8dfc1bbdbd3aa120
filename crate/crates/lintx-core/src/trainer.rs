//! Losses and the two training loops.
//!
//! Training happens in two frozen-boundary phases. First the decoder is
//! fit to invert the (random, then permanently frozen) encoder under pixel
//! MSE. Then the transform module alone is trained: encode a content and a
//! style image, stylize the bottleneck, decode, re-encode the decoded
//! image, and compare its taps against the content features (content loss)
//! and the style image's second-moment statistics (style loss). Gradients
//! reach only the transform-module weights; everything frozen is bound as
//! no-grad graph inputs, which the byte-equality tests pin down.
//!
//! Both loops are bit-deterministic for a fixed seed: pair selection comes
//! from a seeded generator and every kernel is serial with a fixed
//! reduction order.

use crate::autodiff::{grad_check, Graph, NodeId};
use crate::error::{CoreError, Result};
use crate::model::{
    bind_weights, graph_decode, graph_encode, graph_stylize, init_weights, EncoderSpec, ModelSpec,
    WeightRole,
};
use crate::optim::{Adam, AdamConfig};
use crate::stats::{covariance, gram, FeatureMap};
use crate::tensor::Tensor;
use crate::weights::WeightStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which second-moment statistic the style loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleForm {
    Gram,
    CenteredCovariance,
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Tap index the content loss compares at.
    pub content_tap: usize,
    /// (tap index, weight) pairs the style loss sums over.
    pub style_taps: Vec<(usize, f64)>,
    /// Style weight in total = content + lambda * style.
    pub lambda: f64,
    pub style_form: StyleForm,
}

impl LossConfig {
    /// Content at the bottleneck, style at every tap with weight 1, gram
    /// statistic, lambda 1.
    pub fn default_for(enc: &EncoderSpec) -> Self {
        Self {
            content_tap: enc.stages().len() - 1,
            style_taps: (0..enc.stages().len()).map(|i| (i, 1.0)).collect(),
            lambda: 1.0,
            style_form: StyleForm::Gram,
        }
    }

    pub fn validate(&self, enc: &EncoderSpec) -> Result<()> {
        let taps = enc.stages().len();
        if self.content_tap >= taps {
            return Err(CoreError::InvalidArgument(format!(
                "content tap {} out of range ({taps} taps)",
                self.content_tap
            )));
        }
        if self.style_taps.is_empty() {
            return Err(CoreError::InvalidArgument("style_taps must not be empty".into()));
        }
        for &(tap, w) in &self.style_taps {
            if tap >= taps {
                return Err(CoreError::InvalidArgument(format!(
                    "style tap {tap} out of range ({taps} taps)"
                )));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(CoreError::InvalidArgument(format!("style weight {w} invalid")));
            }
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(CoreError::InvalidArgument(format!("lambda {} invalid", self.lambda)));
        }
        Ok(())
    }
}

/// Sum over configured taps of weight/C^2 * ||S(f_d) - S(f_s)||_F^2,
/// S per `style_form`. Normalizing the statistic by N and the norm by C^2
/// keeps the value per-element scaled, so tap weights compose sanely.
pub fn style_loss(
    f_d_taps: &[FeatureMap],
    f_s_taps: &[FeatureMap],
    cfg: &LossConfig,
) -> Result<f64> {
    if f_d_taps.len() != f_s_taps.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "tap counts differ: {} vs {}",
            f_d_taps.len(),
            f_s_taps.len()
        )));
    }
    let mut acc = 0.0;
    for &(tap, weight) in &cfg.style_taps {
        let (fd, fs) = match (f_d_taps.get(tap), f_s_taps.get(tap)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(CoreError::InvalidArgument(format!(
                    "style tap {tap} out of range ({} taps)",
                    f_d_taps.len()
                )));
            }
        };
        if fd.channels() != fs.channels() {
            return Err(CoreError::ShapeMismatch(format!(
                "tap {tap}: {} vs {} channels",
                fd.channels(),
                fs.channels()
            )));
        }
        let (sd, ss) = match cfg.style_form {
            StyleForm::Gram => (gram(fd), gram(fs)),
            StyleForm::CenteredCovariance => {
                (covariance(fd).tensor().clone(), covariance(fs).tensor().clone())
            }
        };
        let mut sq = 0.0;
        for (a, b) in sd.data().iter().zip(ss.data()) {
            let d = a - b;
            sq += d * d;
        }
        let c = fd.channels() as f64;
        acc += weight / (c * c) * sq;
    }
    Ok(acc)
}

/// Mean squared feature difference, (1/(N*C)) * ||f_d - f_c||_F^2.
pub fn content_loss(f_d: &FeatureMap, f_c: &FeatureMap) -> Result<f64> {
    if f_d.channels() != f_c.channels()
        || f_d.height() != f_c.height()
        || f_d.width() != f_c.width()
    {
        return Err(CoreError::ShapeMismatch(format!(
            "content loss shapes: {}x{}x{} vs {}x{}x{}",
            f_d.channels(),
            f_d.height(),
            f_d.width(),
            f_c.channels(),
            f_c.height(),
            f_c.width()
        )));
    }
    let mut sq = 0.0;
    for (a, b) in f_d.tensor().data().iter().zip(f_c.tensor().data()) {
        let d = a - b;
        sq += d * d;
    }
    Ok(sq * (1.0 / (f_d.channels() * f_d.pixels()) as f64))
}

/// Paired training pool. All images share one shape; a training step draws
/// `batch_size` pairs from here.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    content: Vec<Tensor>,
    style: Vec<Tensor>,
}

impl TrainBatch {
    pub fn new(content: Vec<Tensor>, style: Vec<Tensor>) -> Result<Self> {
        if content.is_empty() || content.len() != style.len() {
            return Err(CoreError::InvalidArgument(format!(
                "need equal nonzero image counts, got {} content / {} style",
                content.len(),
                style.len()
            )));
        }
        let shape = content[0].shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(CoreError::ShapeMismatch(format!(
                "training images must be [3, H, W], got {shape:?}"
            )));
        }
        for img in content.iter().chain(&style) {
            if img.shape() != shape {
                return Err(CoreError::ShapeMismatch(format!(
                    "all training images must share {shape:?}, got {:?}",
                    img.shape()
                )));
            }
        }
        Ok(Self { content, style })
    }

    pub fn pairs(&self) -> usize {
        self.content.len()
    }

    pub fn side(&self) -> (usize, usize) {
        (self.content[0].shape()[1], self.content[0].shape()[2])
    }
}

/// One row of the transform-training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub step: usize,
    pub content: f64,
    pub style: f64,
    pub total: f64,
}

fn abort_if_bad(value: f64, what: &str, step: usize) -> Result<()> {
    if !value.is_finite() {
        return Err(CoreError::TrainingAborted {
            step,
            reason: format!("{what} became non-finite ({value})"),
        });
    }
    Ok(())
}

/// Fits the decoder to invert the frozen encoder under pixel MSE, updating
/// the decoder entries of `store` in place. Returns the per-step loss,
/// measured before each update. Aborts if the loss goes non-finite or
/// exceeds 10x its initial value.
pub fn pretrain_decoder(
    spec: &ModelSpec,
    store: &mut WeightStore,
    images: &[Tensor],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(CoreError::InvalidArgument("no training images".into()));
    }
    let shape = images[0].shape().to_vec();
    for img in images {
        if img.shape() != shape {
            return Err(CoreError::ShapeMismatch(format!(
                "all images must share {shape:?}, got {:?}",
                img.shape()
            )));
        }
    }

    let mut g = Graph::new();
    let wb = bind_weights(&mut g, spec, store, |name| {
        if name.starts_with("decoder.") {
            WeightRole::Trainable
        } else {
            WeightRole::Frozen
        }
    })?;
    let img_node = g.input(&shape);
    g.set_no_grad(img_node)?;
    let taps = graph_encode(&mut g, &spec.encoder, img_node, &wb)?;
    let out = graph_decode(&mut g, &spec.encoder, *taps.last().expect("at least one tap"), &wb)?;
    let target = g.input(&shape);
    g.set_no_grad(target)?;
    let raw = g.frobenius_sq_diff(out, target)?;
    let loss = g.scale(raw, 1.0 / shape.iter().product::<usize>() as f64)?;

    let params = wb.trainable();
    let mut values: Vec<Tensor> =
        params.iter().map(|(name, _)| store.get(name).expect("validated").clone()).collect();
    let shapes: Vec<Vec<usize>> = values.iter().map(|t| t.shape().to_vec()).collect();
    let mut adam = Adam::new(AdamConfig { lr, ..AdamConfig::default() }, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut history = Vec::with_capacity(steps);
    let mut initial = f64::NAN;
    for step in 0..steps {
        let img = &images[rng.gen_range(0..images.len())];
        g.bind(img_node, img.clone())?;
        g.bind(target, img.clone())?;
        g.forward()?;
        let l = g.scalar_value(loss).expect("loss evaluated");
        abort_if_bad(l, "reconstruction loss", step)?;
        if step == 0 {
            initial = l;
        } else if l > 10.0 * initial {
            return Err(CoreError::TrainingAborted {
                step,
                reason: format!("reconstruction loss {l:.3e} exceeded 10x initial {initial:.3e}"),
            });
        }
        history.push(l);

        g.backward(loss)?;
        let grads: Vec<Tensor> = params
            .iter()
            .map(|&(_, id)| g.grad(id).expect("trainable parameter gradient").clone())
            .collect();
        adam.step(&mut values, &grads)?;
        for (&(_, id), v) in params.iter().zip(&values) {
            g.set_param(id, v.clone())?;
        }
    }
    for (&(name, _), v) in params.iter().zip(&values) {
        store.replace(name, v.clone())?;
    }
    Ok(history)
}

/// The full transform-training graph: encode both images, stylize the
/// bottleneck, decode, re-encode, and assemble the three loss scalars.
/// Only `transform.*` weights are trainable.
struct TrainGraph {
    g: Graph,
    wb: crate::model::BoundWeights,
    ic: NodeId,
    is: NodeId,
    content: NodeId,
    style: NodeId,
    total: NodeId,
}

fn build_train_graph(
    spec: &ModelSpec,
    store: &WeightStore,
    cfg: &LossConfig,
    h: usize,
    w: usize,
) -> Result<TrainGraph> {
    let mut g = Graph::new();
    let wb = bind_weights(&mut g, spec, store, |name| {
        if name.starts_with("transform.") {
            WeightRole::Trainable
        } else {
            WeightRole::Frozen
        }
    })?;
    let ic = g.input(&[3, h, w]);
    let is = g.input(&[3, h, w]);
    g.set_no_grad(ic)?;
    g.set_no_grad(is)?;
    let taps_c = graph_encode(&mut g, &spec.encoder, ic, &wb)?;
    let taps_s = graph_encode(&mut g, &spec.encoder, is, &wb)?;
    let stylized = graph_stylize(
        &mut g,
        &spec.transform,
        *taps_c.last().expect("taps"),
        *taps_s.last().expect("taps"),
        &wb,
    )?;
    let decoded = graph_decode(&mut g, &spec.encoder, stylized, &wb)?;
    let taps_d = graph_encode(&mut g, &spec.encoder, decoded, &wb)?;

    let ct = cfg.content_tap;
    let ct_shape = g.shape(taps_c[ct]).to_vec();
    let content_raw = g.frobenius_sq_diff(taps_d[ct], taps_c[ct])?;
    let content = g.scale(content_raw, 1.0 / ct_shape.iter().product::<usize>() as f64)?;

    let mut style_terms = Vec::with_capacity(cfg.style_taps.len());
    for &(tap, weight) in &cfg.style_taps {
        let s = g.shape(taps_d[tap]).to_vec();
        let (c, n) = (s[0], s[1] * s[2]);
        let rd = g.reshape(taps_d[tap], &[c, n])?;
        let rs = g.reshape(taps_s[tap], &[c, n])?;
        let (sd, ss) = match cfg.style_form {
            StyleForm::Gram => (g.gram(rd)?, g.gram(rs)?),
            StyleForm::CenteredCovariance => (g.covariance(rd)?, g.covariance(rs)?),
        };
        let term = g.frobenius_sq_diff(sd, ss)?;
        style_terms.push((term, weight / (c * c) as f64));
    }
    let style = g.weighted_sum(&style_terms)?;
    let total = g.weighted_sum(&[(content, 1.0), (style, cfg.lambda)])?;
    Ok(TrainGraph { g, wb, ic, is, content, style, total })
}

/// Trains the transform module (branches, fc layers, compress/uncompress)
/// with Adam at the fixed transform learning rate, leaving every encoder
/// and decoder byte untouched. Losses are evaluated on the re-encoded
/// decoded image and recorded before each update, averaged over the
/// drawn batch.
pub fn train_transform(
    spec: &ModelSpec,
    store: &mut WeightStore,
    batch: &TrainBatch,
    cfg: &LossConfig,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<StepLosses>> {
    cfg.validate(&spec.encoder)?;
    if batch_size == 0 {
        return Err(CoreError::InvalidArgument("batch size must be positive".into()));
    }
    let (h, w) = batch.side();
    let f = spec.encoder.downsample_factor();
    if h % f != 0 || w % f != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "image sides {h}x{w} must be multiples of {f}"
        )));
    }

    let TrainGraph { mut g, wb, ic, is, content, style, total } =
        build_train_graph(spec, store, cfg, h, w)?;
    let params = wb.trainable();
    let mut values: Vec<Tensor> =
        params.iter().map(|(name, _)| store.get(name).expect("validated").clone()).collect();
    let shapes: Vec<Vec<usize>> = values.iter().map(|t| t.shape().to_vec()).collect();
    let mut adam = Adam::new(AdamConfig::default(), &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let inv_bs = 1.0 / batch_size as f64;
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut acc: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let (mut csum, mut ssum, mut tsum) = (0.0, 0.0, 0.0);
        for _ in 0..batch_size {
            let k = rng.gen_range(0..batch.pairs());
            g.bind(ic, batch.content[k].clone())?;
            g.bind(is, batch.style[k].clone())?;
            g.forward()?;
            let (lc, ls, lt) = (
                g.scalar_value(content).expect("content loss"),
                g.scalar_value(style).expect("style loss"),
                g.scalar_value(total).expect("total loss"),
            );
            abort_if_bad(lc, "content loss", step)?;
            abort_if_bad(ls, "style loss", step)?;
            abort_if_bad(lt, "total loss", step)?;
            csum += lc;
            ssum += ls;
            tsum += lt;

            g.backward(total)?;
            for (j, &(_, id)) in params.iter().enumerate() {
                let grad = g.grad(id).expect("trainable parameter gradient");
                acc[j] = acc[j].add(grad)?;
            }
        }
        history.push(StepLosses {
            step,
            content: csum * inv_bs,
            style: ssum * inv_bs,
            total: tsum * inv_bs,
        });
        for a in &mut acc {
            *a = a.scale(inv_bs);
        }
        adam.step(&mut values, &acc)?;
        for (&(_, id), v) in params.iter().zip(&values) {
            g.set_param(id, v.clone())?;
        }
    }
    for (&(name, _), v) in params.iter().zip(&values) {
        store.replace(name, v.clone())?;
    }
    Ok(history)
}

/// Central-difference check of the whole stylize-then-loss composite:
/// freshly initialized weights, one procedural image pair, total loss
/// differentiated with respect to transform weights picked from every
/// stage of the module (branch conv, fc, compress, uncompress). Returns
/// the worst relative error over 16 sampled coordinates per weight.
pub fn composite_gradient_check(seed: u64) -> Result<f64> {
    let spec = ModelSpec::from_encoder(EncoderSpec::new(vec![4, 8])?)?;
    let store = init_weights(&spec, seed);
    let cfg = LossConfig::default_for(&spec.encoder);
    let TrainGraph { mut g, wb, ic, is, total, .. } = build_train_graph(&spec, &store, &cfg, 8, 8)?;
    g.bind(ic, crate::data::content_image(8, seed))?;
    g.bind(is, crate::data::style_image(8, seed + 1))?;

    let checked = [
        "transform.content.conv0.weight",
        "transform.style.conv1.bias",
        "transform.content.fc.weight",
        "transform.style.fc.bias",
        "transform.compress.weight",
        "transform.uncompress.bias",
    ];
    // Wider step than the per-op checks: the composite loss is O(1), so
    // h = 1e-5 sits at the subtraction-cancellation floor for the weakly
    // coupled coordinates.
    let mut max = 0.0f64;
    for (k, name) in checked.iter().enumerate() {
        let p = wb.node(name)?;
        max = max.max(grad_check(&mut g, total, p, 1e-4, 16, seed ^ (k as u64 + 1))?);
    }
    Ok(max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{content_image, style_image};
    use crate::model::{
        decode, encode, init_weights, stylize_features, EncoderSpec, ModelSpec,
    };

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(c, h, w, data).unwrap()
    }

    fn small_spec() -> ModelSpec {
        ModelSpec::from_encoder(EncoderSpec::new(vec![4, 8]).unwrap()).unwrap()
    }

    fn tiny_batch(side: usize, pairs: usize) -> TrainBatch {
        let content = (0..pairs).map(|i| content_image(side, i as u64)).collect();
        let style = (0..pairs).map(|i| style_image(side, 100 + i as u64)).collect();
        TrainBatch::new(content, style).unwrap()
    }

    #[test]
    fn content_loss_examples() {
        let f = random_map(3, 4, 4, 1);
        assert_eq!(content_loss(&f, &f).unwrap(), 0.0);

        let shifted = FeatureMap::new(
            3,
            4,
            4,
            f.tensor().data().iter().map(|v| v + 1.0).collect(),
        )
        .unwrap();
        assert!((content_loss(&shifted, &f).unwrap() - 1.0).abs() < 1e-12);

        let other = random_map(3, 4, 4, 2);
        let mut oracle = 0.0;
        for (a, b) in other.tensor().data().iter().zip(f.tensor().data()) {
            oracle += (a - b) * (a - b);
        }
        oracle /= 48.0;
        assert!((content_loss(&other, &f).unwrap() - oracle).abs() < 1e-12);

        let bad = random_map(3, 2, 8, 3);
        assert!(content_loss(&bad, &f).is_err());
    }

    #[test]
    fn style_loss_single_channel_hand_example() {
        let f_d = FeatureMap::new(1, 1, 2, vec![0.0, 2.0]).unwrap();
        let f_s = FeatureMap::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        let cfg = LossConfig {
            content_tap: 0,
            style_taps: vec![(0, 1.0)],
            lambda: 1.0,
            style_form: StyleForm::Gram,
        };
        // gram(f_d) = (0 + 4)/2 = 2, gram(f_s) = 0, squared diff 4, C^2 = 1.
        assert_eq!(style_loss(&[f_d.clone()], &[f_s], &cfg).unwrap(), 4.0);
        assert_eq!(style_loss(&[f_d.clone()], &[f_d], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn style_loss_matches_statistic_oracle() {
        // Independent oracle: naive mean/statistic loops, then the norm.
        let f_d = random_map(3, 4, 5, 7);
        let f_s = random_map(3, 6, 2, 8);
        for form in [StyleForm::Gram, StyleForm::CenteredCovariance] {
            let cfg = LossConfig {
                content_tap: 0,
                style_taps: vec![(0, 1.0)],
                lambda: 1.0,
                style_form: form,
            };
            let got = style_loss(&[f_d.clone()], &[f_s.clone()], &cfg).unwrap();

            let stat = |f: &FeatureMap| -> Vec<f64> {
                let (c, n) = (f.channels(), f.pixels());
                let centered = matches!(form, StyleForm::CenteredCovariance);
                let mut rows: Vec<Vec<f64>> = Vec::new();
                for ch in 0..c {
                    let mut row = f.channel(ch).to_vec();
                    if centered {
                        let m = row.iter().sum::<f64>() / n as f64;
                        for v in &mut row {
                            *v -= m;
                        }
                    }
                    rows.push(row);
                }
                let mut s = vec![0.0; c * c];
                for i in 0..c {
                    for j in 0..c {
                        let mut acc = 0.0;
                        for p in 0..n {
                            acc += rows[i][p] * rows[j][p];
                        }
                        s[i * c + j] = acc / n as f64;
                    }
                }
                s
            };
            let (sd, ss) = (stat(&f_d), stat(&f_s));
            let oracle: f64 =
                sd.iter().zip(&ss).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 9.0;
            assert!(
                (got - oracle).abs() <= 1e-10 * oracle.abs().max(1.0),
                "{form:?}: {got} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn multi_tap_style_loss_is_linear_in_taps() {
        let d = [random_map(2, 4, 4, 10), random_map(3, 2, 2, 11)];
        let s = [random_map(2, 3, 3, 12), random_map(3, 4, 2, 13)];
        let single = |tap: usize, w: f64| LossConfig {
            content_tap: 0,
            style_taps: vec![(tap, w)],
            lambda: 1.0,
            style_form: StyleForm::Gram,
        };
        let multi = LossConfig {
            content_tap: 0,
            style_taps: vec![(0, 0.7), (1, 1.3)],
            lambda: 1.0,
            style_form: StyleForm::Gram,
        };
        let parts = style_loss(&d, &s, &single(0, 0.7)).unwrap()
            + style_loss(&d, &s, &single(1, 1.3)).unwrap();
        let whole = style_loss(&d, &s, &multi).unwrap();
        assert!((whole - parts).abs() < 1e-12, "{whole} vs {parts}");
    }

    #[test]
    fn loss_config_validation() {
        let enc = EncoderSpec::new(vec![4, 8]).unwrap();
        let mut cfg = LossConfig::default_for(&enc);
        assert_eq!(cfg.content_tap, 1);
        cfg.validate(&enc).unwrap();
        cfg.content_tap = 2;
        assert!(cfg.validate(&enc).is_err());
        cfg.content_tap = 0;
        cfg.style_taps = vec![(0, -1.0)];
        assert!(cfg.validate(&enc).is_err());
        cfg.style_taps = vec![];
        assert!(cfg.validate(&enc).is_err());
        cfg.style_taps = vec![(0, 1.0)];
        cfg.lambda = f64::NAN;
        assert!(cfg.validate(&enc).is_err());
    }

    #[test]
    fn decoder_pretraining_halves_reconstruction_loss() {
        let spec = small_spec();
        let mut store = init_weights(&spec, 7);
        let images: Vec<Tensor> = (0..8).map(|i| content_image(16, i)).collect();
        let history = pretrain_decoder(&spec, &mut store, &images, 50, 1e-2, 1).unwrap();
        assert_eq!(history.len(), 50);
        let initial = history[0];
        let last = *history.last().unwrap();
        assert!(
            last < 0.5 * initial,
            "reconstruction barely improved: {initial} -> {last}"
        );
        // Smoothed trend sanity: late window no worse than the early one.
        let early: f64 = history[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = history[40..].iter().sum::<f64>() / 10.0;
        assert!(late <= early);
    }

    #[test]
    fn decoder_pretraining_on_zero_images_starts_at_zero_loss() {
        let spec = small_spec();
        let mut store = init_weights(&spec, 7);
        let images = vec![Tensor::zeros(&[3, 8, 8])];
        let history = pretrain_decoder(&spec, &mut store, &images, 3, 1e-2, 1).unwrap();
        // Zero input, zero biases: encode and decode are identically zero.
        assert_eq!(history[0], 0.0);
    }

    #[test]
    fn decoder_pretraining_aborts_on_divergence() {
        let spec = small_spec();
        let mut store = init_weights(&spec, 7);
        let images: Vec<Tensor> = (0..2).map(|i| content_image(8, i)).collect();
        let err = pretrain_decoder(&spec, &mut store, &images, 20, 1e6, 1).unwrap_err();
        assert!(matches!(err, CoreError::TrainingAborted { .. }), "got {err:?}");
    }

    #[test]
    fn transform_training_leaves_frozen_bytes_untouched_and_moves_transform() {
        let spec = small_spec();
        let mut store = init_weights(&spec, 3);
        let frozen_before: Vec<(String, Vec<u64>)> = store
            .iter()
            .filter(|(n, _)| !n.starts_with("transform."))
            .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect();

        let batch = tiny_batch(8, 3);
        let cfg = LossConfig::default_for(&spec.encoder);
        let history =
            train_transform(&spec, &mut store, &batch, &cfg, 5, 2, 42).unwrap();
        assert_eq!(history.len(), 5);

        for (name, bits_before) in &frozen_before {
            let now: Vec<u64> = store.get(name).unwrap().data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(&now, bits_before, "frozen weight '{name}' changed");
        }
        let moved = expected_transform_movement(&spec, &store);
        assert!(moved, "no transform weight changed at all");
    }

    fn expected_transform_movement(spec: &ModelSpec, store: &WeightStore) -> bool {
        let fresh = init_weights(spec, 3);
        store
            .iter()
            .filter(|(n, _)| n.starts_with("transform."))
            .any(|(n, t)| t.data() != fresh.get(n).unwrap().data())
    }

    #[test]
    fn transform_training_histories_are_bit_identical_across_runs() {
        let spec = small_spec();
        let batch = tiny_batch(8, 2);
        let cfg = LossConfig::default_for(&spec.encoder);
        let run = || {
            let mut store = init_weights(&spec, 3);
            train_transform(&spec, &mut store, &batch, &cfg, 4, 2, 9).unwrap()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
            assert_eq!(x.content.to_bits(), y.content.to_bits());
            assert_eq!(x.style.to_bits(), y.style.to_bits());
        }
    }

    #[test]
    fn first_recorded_loss_matches_inference_oracle_exactly() {
        // The graph-built loss must agree with the straight-line pipeline
        // plus the standalone loss functions, bit for bit.
        let spec = small_spec();
        let mut store = init_weights(&spec, 5);
        let batch = tiny_batch(8, 1);
        let cfg = LossConfig::default_for(&spec.encoder);
        let history =
            train_transform(&spec, &mut store, &batch, &cfg, 1, 1, 77).unwrap();

        let fresh = init_weights(&spec, 5);
        let img_c = content_image(8, 0);
        let img_s = style_image(8, 100);
        let enc_c = encode(&img_c, &spec.encoder, &fresh).unwrap();
        let enc_s = encode(&img_s, &spec.encoder, &fresh).unwrap();
        let styl =
            stylize_features(enc_c.bottleneck(), enc_s.bottleneck(), &spec.transform, &fresh)
                .unwrap();
        let decoded = decode(&styl, &spec.encoder, &fresh).unwrap();
        let enc_d = encode(&decoded, &spec.encoder, &fresh).unwrap();

        let lc = content_loss(&enc_d.taps()[cfg.content_tap], &enc_c.taps()[cfg.content_tap])
            .unwrap();
        let ls = style_loss(enc_d.taps(), enc_s.taps(), &cfg).unwrap();
        let lt = lc + cfg.lambda * ls;
        assert_eq!(history[0].content.to_bits(), lc.to_bits());
        assert_eq!(history[0].style.to_bits(), ls.to_bits());
        assert_eq!(history[0].total.to_bits(), lt.to_bits());
    }

    #[test]
    fn content_only_training_from_near_identity_does_not_climb() {
        let spec = small_spec();
        let mut store = init_weights(&spec, 6);
        let images: Vec<Tensor> = (0..4).map(|i| content_image(8, i)).collect();
        pretrain_decoder(&spec, &mut store, &images, 60, 1e-2, 2).unwrap();

        let batch = tiny_batch(8, 4);
        let cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default_for(&spec.encoder)
        };
        let history =
            train_transform(&spec, &mut store, &batch, &cfg, 120, 2, 11).unwrap();
        let early: f64 = history[..20].iter().map(|h| h.total).sum::<f64>() / 20.0;
        let late: f64 = history[100..].iter().map(|h| h.total).sum::<f64>() / 20.0;
        assert!(
            late <= early * 1.05,
            "content-only loss climbed: early {early}, late {late}"
        );
        // Style is still measured, it just carries zero weight.
        for h in &history {
            assert_eq!(h.total.to_bits(), h.content.to_bits());
        }
    }

    #[test]
    fn composite_gradient_check_stays_under_tolerance() {
        let worst = composite_gradient_check(11).unwrap();
        assert!(worst < 1e-5, "composite gradient off by {worst:.3e}");
    }

    #[test]
    fn train_batch_validation() {
        let img = content_image(8, 0);
        assert!(TrainBatch::new(vec![], vec![]).is_err());
        assert!(TrainBatch::new(vec![img.clone()], vec![]).is_err());
        assert!(
            TrainBatch::new(vec![img.clone()], vec![content_image(16, 1)]).is_err()
        );
        assert!(TrainBatch::new(vec![img.clone()], vec![content_image(8, 1)]).is_ok());
        let cfg = LossConfig::default_for(&EncoderSpec::new(vec![4, 8]).unwrap());
        let spec = small_spec();
        let mut store = init_weights(&spec, 1);
        let batch = TrainBatch::new(vec![content_image(7, 0)], vec![content_image(7, 1)]).unwrap();
        assert!(train_transform(&spec, &mut store, &batch, &cfg, 1, 1, 0).is_err());
    }
}

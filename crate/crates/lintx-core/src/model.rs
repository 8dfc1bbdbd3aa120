//! Encoder/decoder and the learned transform module.
//!
//! The encoder is a stack of conv3x3+relu stages with 2x2 max pooling
//! between them; the per-stage post-relu activations are the feature taps
//! and the last tap is the bottleneck. The decoder mirrors the encoder
//! with nearest-neighbor upsampling, ending in a linear conv back to RGB.
//!
//! The transform module predicts a d x d matrix from feature statistics:
//! each branch runs a small CNN over a feature map, takes the covariance
//! of the result, and maps its flattened entries through a fully connected
//! layer whose bias starts as the identity matrix. The content and style
//! halves multiply to the applied transform. Features are moved through a
//! 1x1-conv channel compression on the way in and back out on the way out.
//!
//! Everything exists twice: a straight-line inference path on raw buffers
//! (used by the CLI) and a graph construction path (used for training).
//! Both call the same kernels in the same order, so their outputs agree
//! exactly, which the tests pin down.

use crate::autodiff::{Graph, NodeId};
use crate::autodiff::kernels;
use crate::error::{CoreError, Result};
use crate::stats::{center, covariance, FeatureMap};
use crate::tensor::Tensor;
use crate::transfer::{apply_transform, TransformMatrix};
use crate::weights::{fnv1a, WeightStore};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scale of the fully connected weights at init. Small enough that the
/// identity bias dominates and training starts near the plain identity
/// transform.
pub const FC_INIT_SCALE: f64 = 1e-3;

/// Conv stack: stage k is conv3x3(prev -> stages[k]) + relu, with a 2x2
/// max pool between consecutive stages (not after the last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    stages: Vec<usize>,
}

impl EncoderSpec {
    pub fn new(stages: Vec<usize>) -> Result<Self> {
        if stages.is_empty() || stages.iter().any(|&c| c == 0) {
            return Err(CoreError::InvalidArgument(format!(
                "encoder stages must be nonempty and positive, got {stages:?}"
            )));
        }
        Ok(Self { stages })
    }

    pub fn shallow() -> Self {
        Self { stages: vec![16, 32, 64] }
    }

    pub fn deep() -> Self {
        Self { stages: vec![16, 32, 64, 128] }
    }

    pub fn stages(&self) -> &[usize] {
        &self.stages
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.stages.last().expect("stages nonempty")
    }

    pub fn pool_count(&self) -> usize {
        self.stages.len() - 1
    }

    /// Spatial shrink factor from image to bottleneck; input sides must be
    /// divisible by this.
    pub fn downsample_factor(&self) -> usize {
        1 << self.pool_count()
    }

    /// Decoder channel chain in application order, bottleneck to RGB.
    fn decoder_chain(&self) -> Vec<usize> {
        let mut chain: Vec<usize> = self.stages.iter().rev().copied().collect();
        chain.push(3);
        chain
    }
}

/// Channel-compressed transform head over bottleneck features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformModuleSpec {
    input_channels: usize,
    compressed_dim: usize,
}

impl TransformModuleSpec {
    pub fn new(input_channels: usize, compressed_dim: usize) -> Result<Self> {
        if input_channels == 0 || compressed_dim == 0 || compressed_dim > input_channels {
            return Err(CoreError::InvalidArgument(format!(
                "need 0 < compressed dim <= channels, got {compressed_dim} of {input_channels}"
            )));
        }
        Ok(Self { input_channels, compressed_dim })
    }

    /// Default compression: a quarter of the channels, at least 8, never
    /// more than the channel count itself.
    pub fn for_channels(c: usize) -> Result<Self> {
        Self::new(c, (c / 4).max(8).min(c))
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn compressed_dim(&self) -> usize {
        self.compressed_dim
    }

    /// (in, out) channel pairs of the three branch convolutions:
    /// C -> C/2 -> C/4 -> d.
    pub fn branch_pairs(&self) -> [(usize, usize); 3] {
        let c = self.input_channels;
        let m1 = (c / 2).max(1);
        let m2 = (c / 4).max(1);
        [(c, m1), (m1, m2), (m2, self.compressed_dim)]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub transform: TransformModuleSpec,
}

impl ModelSpec {
    pub fn shallow() -> Self {
        Self::from_encoder(EncoderSpec::shallow()).expect("preset is valid")
    }

    pub fn deep() -> Self {
        Self::from_encoder(EncoderSpec::deep()).expect("preset is valid")
    }

    pub fn from_encoder(encoder: EncoderSpec) -> Result<Self> {
        let transform = TransformModuleSpec::for_channels(encoder.bottleneck_channels())?;
        Ok(Self { encoder, transform })
    }

    /// Canonical architecture string; its hash names the weight format.
    pub fn describe(&self) -> String {
        let stages: Vec<String> = self.encoder.stages.iter().map(|c| c.to_string()).collect();
        format!(
            "encoder=conv3x3relu:{};pools={};decoder=mirror-nearest;transform={}->{};fc={}",
            stages.join(","),
            self.encoder.pool_count(),
            self.transform.input_channels,
            self.transform.compressed_dim,
            self.transform.compressed_dim * self.transform.compressed_dim,
        )
    }

    pub fn spec_hash(&self) -> u64 {
        fnv1a(self.describe().as_bytes())
    }
}

/// Every weight the architecture owns, as (name, shape), in canonical
/// order. Init, store validation, and graph binding all walk this list.
pub fn expected_weights(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let push_conv = |out: &mut Vec<(String, Vec<usize>)>, prefix: String, cin, cout, k| {
        out.push((format!("{prefix}.weight"), vec![cout, cin, k, k]));
        out.push((format!("{prefix}.bias"), vec![cout]));
    };

    let mut cin = 3;
    for (k, &cout) in spec.encoder.stages.iter().enumerate() {
        push_conv(&mut out, format!("encoder.stage{k}.conv"), cin, cout, 3);
        cin = cout;
    }
    let chain = spec.encoder.decoder_chain();
    for k in 0..chain.len() - 1 {
        push_conv(&mut out, format!("decoder.stage{k}.conv"), chain[k], chain[k + 1], 3);
    }
    let d = spec.transform.compressed_dim;
    for side in ["content", "style"] {
        for (i, (bin, bout)) in spec.transform.branch_pairs().into_iter().enumerate() {
            push_conv(&mut out, format!("transform.{side}.conv{i}"), bin, bout, 3);
        }
        out.push((format!("transform.{side}.fc.weight"), vec![d * d, d * d]));
        out.push((format!("transform.{side}.fc.bias"), vec![d * d]));
    }
    push_conv(&mut out, "transform.compress".into(), spec.transform.input_channels, d, 1);
    push_conv(&mut out, "transform.uncompress".into(), d, spec.transform.input_channels, 1);
    out
}

fn gaussians(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = (-2.0 * u1.ln()).sqrt();
        out.push(r * u2.cos());
        out.push(r * u2.sin());
    }
    out.truncate(n);
    out
}

/// Random matrix with orthonormal rows (rows <= cols) or columns
/// (otherwise), times `gain`. Keeps activation scale roughly constant
/// through a layer regardless of its aspect ratio.
fn semi_orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (m, n, transposed) = if rows <= cols { (rows, cols, false) } else { (cols, rows, true) };
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(m);
    while q.len() < m {
        let mut v = gaussians(n, rng);
        // Two Gram-Schmidt passes for numerical orthogonality.
        for _ in 0..2 {
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // essentially impossible; redraw
        }
        for x in &mut v {
            *x /= norm;
        }
        q.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = gain * if transposed { q[j][i] } else { q[i][j] };
        }
    }
    out
}

/// Seeded initial weights. Convs are semi-orthogonal (gain sqrt(2) when a
/// relu follows, 1 otherwise), biases zero; the fc layers start at the
/// identity matrix plus near-zero weights so the initial learned transform
/// is close to identity. Per-tensor seeding makes every tensor independent
/// of the walk order.
pub fn init_weights(spec: &ModelSpec, seed: u64) -> WeightStore {
    let mut store = WeightStore::new(spec.spec_hash());
    let d = spec.transform.compressed_dim;
    let final_decoder = format!("decoder.stage{}.conv.weight", spec.encoder.stages.len() - 1);
    for (name, shape) in expected_weights(spec) {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(name.as_bytes()) ^ seed.wrapping_mul(0x9e3779b97f4a7c15));
        let len: usize = shape.iter().product();
        let data = if name.ends_with(".fc.bias") {
            let mut v = vec![0.0; len];
            for i in 0..d {
                v[i * d + i] = 1.0;
            }
            v
        } else if name.ends_with(".bias") {
            vec![0.0; len]
        } else if name.ends_with(".fc.weight") {
            gaussians(len, &mut rng).into_iter().map(|g| g * FC_INIT_SCALE).collect()
        } else {
            // Conv weight [cout, cin, kh, kw], flattened filters as rows.
            let relu_follows = !(name.starts_with("transform.compress")
                || name.starts_with("transform.uncompress")
                || name == final_decoder);
            let gain = if relu_follows { std::f64::consts::SQRT_2 } else { 1.0 };
            semi_orthogonal(shape[0], shape[1] * shape[2] * shape[3], gain, &mut rng)
        };
        store
            .insert(&name, Tensor::new(&shape, data).expect("init values are finite"))
            .expect("expected_weights yields unique names");
    }
    store
}

/// Checks that `store` holds exactly the weights of `spec`: matching
/// architecture hash, every expected name present with the right shape,
/// and nothing extra.
pub fn validate_store(spec: &ModelSpec, store: &WeightStore) -> Result<()> {
    if store.spec_hash() != spec.spec_hash() {
        return Err(CoreError::WeightFormat(format!(
            "architecture hash mismatch: store has {:016x}, model needs {:016x}",
            store.spec_hash(),
            spec.spec_hash()
        )));
    }
    let expected = expected_weights(spec);
    for (name, shape) in &expected {
        match store.get(name) {
            None => {
                return Err(CoreError::WeightFormat(format!("missing weight '{name}'")));
            }
            Some(t) if t.shape() != &shape[..] => {
                return Err(CoreError::WeightFormat(format!(
                    "weight '{name}' has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Some(_) => {}
        }
    }
    if store.len() != expected.len() {
        let known: std::collections::HashSet<&str> =
            expected.iter().map(|(n, _)| n.as_str()).collect();
        let extra: Vec<&str> = store.names().filter(|n| !known.contains(n)).collect();
        return Err(CoreError::WeightFormat(format!(
            "store holds weights the architecture does not define: {extra:?}"
        )));
    }
    Ok(())
}

fn get<'a>(store: &'a WeightStore, name: &str) -> Result<&'a Tensor> {
    store
        .get(name)
        .ok_or_else(|| CoreError::WeightFormat(format!("missing weight '{name}'")))
}

/// Applies a stored conv to a [cin, h, w] buffer; returns (data, cout).
fn conv_apply(
    x: &[f64],
    cin: usize,
    h: usize,
    wd: usize,
    weight: &Tensor,
    bias: &Tensor,
    name: &str,
) -> Result<(Vec<f64>, usize)> {
    let ws = weight.shape();
    if ws.len() != 4 || ws[1] != cin || ws[2] % 2 == 0 || ws[3] % 2 == 0 {
        return Err(CoreError::ShapeMismatch(format!(
            "conv '{name}': weight {ws:?} does not apply to {cin} input channels"
        )));
    }
    if bias.shape() != [ws[0]] {
        return Err(CoreError::ShapeMismatch(format!(
            "conv '{name}': bias {:?} vs {} output channels",
            bias.shape(),
            ws[0]
        )));
    }
    let out = kernels::conv2d_forward(x, weight.data(), bias.data(), cin, ws[0], h, wd, ws[2], ws[3]);
    Ok((out, ws[0]))
}

fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if !(*x > 0.0) {
            *x = 0.0;
        }
    }
}

/// Per-stage feature maps of one encode; the last tap is the bottleneck.
#[derive(Debug, Clone)]
pub struct Encoding {
    taps: Vec<FeatureMap>,
}

impl Encoding {
    pub fn taps(&self) -> &[FeatureMap] {
        &self.taps
    }

    pub fn bottleneck(&self) -> &FeatureMap {
        self.taps.last().expect("encoder has at least one stage")
    }

    pub fn into_bottleneck(mut self) -> FeatureMap {
        self.taps.pop().expect("encoder has at least one stage")
    }
}

pub fn encode(img: &Tensor, enc: &EncoderSpec, store: &WeightStore) -> Result<Encoding> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(CoreError::ShapeMismatch(format!("encode needs a [3, H, W] image, got {s:?}")));
    }
    let (mut h, mut wd) = (s[1], s[2]);
    let f = enc.downsample_factor();
    if h == 0 || wd == 0 || h % f != 0 || wd % f != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "image sides {h}x{wd} must be positive multiples of {f}"
        )));
    }
    let mut x = img.data().to_vec();
    let mut cin = 3;
    let mut taps = Vec::with_capacity(enc.stages.len());
    for (k, &cout) in enc.stages.iter().enumerate() {
        let w = get(store, &format!("encoder.stage{k}.conv.weight"))?;
        let b = get(store, &format!("encoder.stage{k}.conv.bias"))?;
        let (mut y, got) = conv_apply(&x, cin, h, wd, w, b, &format!("encoder.stage{k}"))?;
        if got != cout {
            return Err(CoreError::WeightFormat(format!(
                "encoder.stage{k} produces {got} channels, architecture says {cout}"
            )));
        }
        relu_inplace(&mut y);
        taps.push(FeatureMap::new(cout, h, wd, y.clone())?);
        if k + 1 < enc.stages.len() {
            let (pooled, _) = kernels::maxpool2_forward(&y, cout, h, wd);
            x = pooled;
            h /= 2;
            wd /= 2;
        } else {
            x = y;
        }
        cin = cout;
    }
    Ok(Encoding { taps })
}

pub fn decode(f: &FeatureMap, enc: &EncoderSpec, store: &WeightStore) -> Result<Tensor> {
    let chain = enc.decoder_chain();
    if f.channels() != chain[0] {
        return Err(CoreError::ShapeMismatch(format!(
            "decode needs {} channels, got {}",
            chain[0],
            f.channels()
        )));
    }
    let mut x = f.tensor().data().to_vec();
    let (mut h, mut wd) = (f.height(), f.width());
    for k in 0..chain.len() - 1 {
        let w = get(store, &format!("decoder.stage{k}.conv.weight"))?;
        let b = get(store, &format!("decoder.stage{k}.conv.bias"))?;
        let (mut y, got) = conv_apply(&x, chain[k], h, wd, w, b, &format!("decoder.stage{k}"))?;
        if got != chain[k + 1] {
            return Err(CoreError::WeightFormat(format!(
                "decoder.stage{k} produces {got} channels, architecture says {}",
                chain[k + 1]
            )));
        }
        if k + 1 < chain.len() - 1 {
            relu_inplace(&mut y);
            x = kernels::upsample2_forward(&y, got, h, wd);
            h *= 2;
            wd *= 2;
        } else {
            x = y;
        }
    }
    Tensor::new(&[3, h, wd], x)
}

/// Branch CNN + covariance + fc, producing one d x d half of the
/// transform.
fn branch_matrix(
    f: &FeatureMap,
    side: &str,
    t: &TransformModuleSpec,
    store: &WeightStore,
) -> Result<Tensor> {
    if f.channels() != t.input_channels {
        return Err(CoreError::ShapeMismatch(format!(
            "transform {side} branch expects {} channels, got {}",
            t.input_channels,
            f.channels()
        )));
    }
    let (h, wd) = (f.height(), f.width());
    let mut x = f.tensor().data().to_vec();
    let mut cin = t.input_channels;
    for (i, (bin, bout)) in t.branch_pairs().into_iter().enumerate() {
        debug_assert_eq!(bin, cin);
        let w = get(store, &format!("transform.{side}.conv{i}.weight"))?;
        let b = get(store, &format!("transform.{side}.conv{i}.bias"))?;
        let (mut y, got) = conv_apply(&x, cin, h, wd, w, b, &format!("transform.{side}.conv{i}"))?;
        if got != bout {
            return Err(CoreError::WeightFormat(format!(
                "transform.{side}.conv{i} produces {got} channels, architecture says {bout}"
            )));
        }
        relu_inplace(&mut y);
        x = y;
        cin = got;
    }
    let d = t.compressed_dim;
    let encoded = FeatureMap::new(d, h, wd, x)?;
    let cov = covariance(&encoded);
    let flat = cov.tensor().data();

    let fw = get(store, &format!("transform.{side}.fc.weight"))?;
    let fb = get(store, &format!("transform.{side}.fc.bias"))?;
    if fw.shape() != [d * d, d * d] || fb.shape() != [d * d] {
        return Err(CoreError::ShapeMismatch(format!(
            "transform.{side}.fc shapes {:?}/{:?} vs dim {}",
            fw.shape(),
            fb.shape(),
            d * d
        )));
    }
    let n = d * d;
    let mut out = Vec::with_capacity(n);
    for o in 0..n {
        let row = &fw.data()[o * n..(o + 1) * n];
        let mut acc = fb.data()[o];
        for (wi, xi) in row.iter().zip(flat) {
            acc += wi * xi;
        }
        out.push(acc);
    }
    Ok(Tensor::from_raw(vec![d, d], out))
}

/// 1x1 conv through the named compression layer.
fn conv1x1(f: &FeatureMap, name: &str, store: &WeightStore) -> Result<FeatureMap> {
    let w = get(store, &format!("{name}.weight"))?;
    let b = get(store, &format!("{name}.bias"))?;
    let (y, cout) = conv_apply(f.tensor().data(), f.channels(), f.height(), f.width(), w, b, name)?;
    FeatureMap::new(cout, f.height(), f.width(), y)
}

fn channel_means(f: &FeatureMap) -> Vec<f64> {
    center(f).1
}

/// Predicted transform plus the compressed-space means:
/// (t, mean of compressed content, mean of compressed style).
pub fn learned_t(
    f_c: &FeatureMap,
    f_s: &FeatureMap,
    t: &TransformModuleSpec,
    store: &WeightStore,
) -> Result<(TransformMatrix, Vec<f64>, Vec<f64>)> {
    let m_c = branch_matrix(f_c, "content", t, store)?;
    let m_s = branch_matrix(f_s, "style", t, store)?;
    let tmat = m_s.matmul(&m_c)?;
    let mean_c = channel_means(&conv1x1(f_c, "transform.compress", store)?);
    let mean_s = channel_means(&conv1x1(f_s, "transform.compress", store)?);
    Ok((TransformMatrix::new(tmat)?, mean_c, mean_s))
}

/// Everything the style image contributes to stylization. Computing this
/// once and reusing it across many content frames gives outputs identical
/// to the one-shot path, because the one-shot path is itself built on it.
#[derive(Debug, Clone)]
pub struct StyleFactors {
    m_s: Tensor,
    mean_s: Vec<f64>,
}

impl StyleFactors {
    pub fn matrix(&self) -> &Tensor {
        &self.m_s
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean_s
    }
}

pub fn style_factors(
    f_s: &FeatureMap,
    t: &TransformModuleSpec,
    store: &WeightStore,
) -> Result<StyleFactors> {
    let m_s = branch_matrix(f_s, "style", t, store)?;
    let mean_s = channel_means(&conv1x1(f_s, "transform.compress", store)?);
    Ok(StyleFactors { m_s, mean_s })
}

pub fn stylize_with_factors(
    f_c: &FeatureMap,
    factors: &StyleFactors,
    t: &TransformModuleSpec,
    store: &WeightStore,
) -> Result<FeatureMap> {
    let m_c = branch_matrix(f_c, "content", t, store)?;
    let tmat = TransformMatrix::new(factors.m_s.matmul(&m_c)?)?;
    let compressed = conv1x1(f_c, "transform.compress", store)?;
    let moved = apply_transform(&compressed, &tmat, &factors.mean_s)?;
    conv1x1(&moved, "transform.uncompress", store)
}

pub fn stylize_features(
    f_c: &FeatureMap,
    f_s: &FeatureMap,
    t: &TransformModuleSpec,
    store: &WeightStore,
) -> Result<FeatureMap> {
    let factors = style_factors(f_s, t, store)?;
    stylize_with_factors(f_c, &factors, t, store)
}

// ---- graph construction (training path) ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRole {
    Frozen,
    Trainable,
}

/// Weight nodes of one training graph, keyed by store name.
#[derive(Debug)]
pub struct BoundWeights {
    ids: IndexMap<String, (NodeId, WeightRole)>,
}

impl BoundWeights {
    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .map(|&(id, _)| id)
            .ok_or_else(|| CoreError::WeightFormat(format!("no graph node for weight '{name}'")))
    }

    /// (name, node) pairs of the trainable subset, in canonical order.
    pub fn trainable(&self) -> Vec<(&str, NodeId)> {
        self.ids
            .iter()
            .filter(|(_, &(_, role))| role == WeightRole::Trainable)
            .map(|(n, &(id, _))| (n.as_str(), id))
            .collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, NodeId, WeightRole)> {
        self.ids.iter().map(|(n, &(id, role))| (n.as_str(), id, role))
    }
}

/// Puts every architecture weight into the graph, frozen ones as no-grad
/// inputs and trainable ones as parameters, all initialized from `store`.
pub fn bind_weights(
    g: &mut Graph,
    spec: &ModelSpec,
    store: &WeightStore,
    mut role: impl FnMut(&str) -> WeightRole,
) -> Result<BoundWeights> {
    validate_store(spec, store)?;
    let mut ids = IndexMap::new();
    for (name, _shape) in expected_weights(spec) {
        let tensor = store.get(&name).expect("validated above").clone();
        let r = role(&name);
        let id = match r {
            WeightRole::Trainable => g.parameter(tensor),
            WeightRole::Frozen => {
                let id = g.input(tensor.shape());
                g.bind(id, tensor)?;
                g.set_no_grad(id)?;
                id
            }
        };
        ids.insert(name, (id, r));
    }
    Ok(BoundWeights { ids })
}

/// Encoder stack over an already-created [3, H, W] image node; returns the
/// per-stage post-relu taps, bottleneck last.
pub fn graph_encode(
    g: &mut Graph,
    enc: &EncoderSpec,
    img: NodeId,
    wb: &BoundWeights,
) -> Result<Vec<NodeId>> {
    let s = g.shape(img).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(CoreError::ShapeMismatch(format!("encoder input must be [3, H, W], got {s:?}")));
    }
    let f = enc.downsample_factor();
    if s[1] == 0 || s[2] == 0 || s[1] % f != 0 || s[2] % f != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "image sides {}x{} must be positive multiples of {f}",
            s[1], s[2]
        )));
    }
    let mut x = img;
    let mut taps = Vec::with_capacity(enc.stages.len());
    for k in 0..enc.stages.len() {
        let w = wb.node(&format!("encoder.stage{k}.conv.weight"))?;
        let b = wb.node(&format!("encoder.stage{k}.conv.bias"))?;
        let y = g.conv2d(x, w, b)?;
        let r = g.relu(y)?;
        taps.push(r);
        x = if k + 1 < enc.stages.len() { g.maxpool2(r)? } else { r };
    }
    Ok(taps)
}

/// Mirror decoder over a bottleneck-shaped node; returns the image node.
pub fn graph_decode(
    g: &mut Graph,
    enc: &EncoderSpec,
    feat: NodeId,
    wb: &BoundWeights,
) -> Result<NodeId> {
    let chain = enc.decoder_chain();
    let s = g.shape(feat).to_vec();
    if s.len() != 3 || s[0] != chain[0] {
        return Err(CoreError::ShapeMismatch(format!(
            "decoder input must be [{}, h, w], got {s:?}",
            chain[0]
        )));
    }
    let mut x = feat;
    for k in 0..chain.len() - 1 {
        let w = wb.node(&format!("decoder.stage{k}.conv.weight"))?;
        let b = wb.node(&format!("decoder.stage{k}.conv.bias"))?;
        let y = g.conv2d(x, w, b)?;
        x = if k + 1 < chain.len() - 1 {
            let r = g.relu(y)?;
            g.upsample2_nearest(r)?
        } else {
            y
        };
    }
    Ok(x)
}

fn graph_branch(
    g: &mut Graph,
    t: &TransformModuleSpec,
    x: NodeId,
    side: &str,
    wb: &BoundWeights,
) -> Result<NodeId> {
    let mut cur = x;
    for i in 0..3 {
        let w = wb.node(&format!("transform.{side}.conv{i}.weight"))?;
        let b = wb.node(&format!("transform.{side}.conv{i}.bias"))?;
        let y = g.conv2d(cur, w, b)?;
        cur = g.relu(y)?;
    }
    let d = t.compressed_dim;
    let s = g.shape(cur).to_vec();
    let flat = g.reshape(cur, &[d, s[1] * s[2]])?;
    let cov = g.covariance(flat)?;
    let vec = g.reshape(cov, &[d * d])?;
    let fw = wb.node(&format!("transform.{side}.fc.weight"))?;
    let fb = wb.node(&format!("transform.{side}.fc.bias"))?;
    let fc = g.linear(vec, fw, fb)?;
    g.reshape(fc, &[d, d])
}

fn graph_conv1x1(g: &mut Graph, x: NodeId, name: &str, wb: &BoundWeights) -> Result<NodeId> {
    let w = wb.node(&format!("{name}.weight"))?;
    let b = wb.node(&format!("{name}.bias"))?;
    g.conv2d(x, w, b)
}

fn ones_constant(g: &mut Graph, shape: &[usize]) -> Result<NodeId> {
    let id = g.input(shape);
    g.bind(id, Tensor::new(shape, vec![1.0; shape.iter().product()])?)?;
    g.set_no_grad(id)?;
    Ok(id)
}

/// Full transform-module application on feature nodes: compress, center,
/// multiply by the predicted matrix, re-inject the compressed style mean,
/// uncompress. Returns a node shaped like `fc`.
pub fn graph_stylize(
    g: &mut Graph,
    t: &TransformModuleSpec,
    fc: NodeId,
    fs: NodeId,
    wb: &BoundWeights,
) -> Result<NodeId> {
    for (id, tag) in [(fc, "content"), (fs, "style")] {
        let s = g.shape(id);
        if s.len() != 3 || s[0] != t.input_channels {
            return Err(CoreError::ShapeMismatch(format!(
                "{tag} features must be [{}, h, w], got {s:?}",
                t.input_channels
            )));
        }
    }
    let d = t.compressed_dim;
    let (h, wd) = {
        let s = g.shape(fc);
        (s[1], s[2])
    };
    let n = h * wd;
    let ns = {
        let s = g.shape(fs);
        s[1] * s[2]
    };

    let m_c = graph_branch(g, t, fc, "content", wb)?;
    let m_s = graph_branch(g, t, fs, "style", wb)?;
    let tmat = g.matmul(m_s, m_c)?;

    let cc3 = graph_conv1x1(g, fc, "transform.compress", wb)?;
    let cc = g.reshape(cc3, &[d, n])?;
    let centered = g.subtract_channel_mean(cc)?;
    let mixed = g.matmul(tmat, centered)?;

    let cs3 = graph_conv1x1(g, fs, "transform.compress", wb)?;
    let cs = g.reshape(cs3, &[d, ns])?;
    let ones_s = ones_constant(g, &[ns, 1])?;
    let sum_s = g.matmul(cs, ones_s)?;
    let mean_s = g.scale(sum_s, 1.0 / ns as f64)?;
    let ones_n = ones_constant(g, &[1, n])?;
    let mean_bcast = g.matmul(mean_s, ones_n)?;

    let moved = g.add(mixed, mean_bcast)?;
    let moved3 = g.reshape(moved, &[d, h, wd])?;
    graph_conv1x1(g, moved3, "transform.uncompress", wb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{content_image, style_image};

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.5)).collect();
        FeatureMap::new(c, h, w, data).unwrap()
    }

    /// Deterministic store for a spec, optionally with one entry's first
    /// element shifted. fc layers get exact zero weights and identity bias
    /// unless `fc_noise` asks for the trained-style near-zero init.
    fn build_store(
        spec: &ModelSpec,
        seed: u64,
        fc_noise: bool,
        perturb: Option<(&str, f64)>,
    ) -> WeightStore {
        let d = spec.transform.compressed_dim();
        let mut store = WeightStore::new(spec.spec_hash());
        for (name, shape) in expected_weights(spec) {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(name.as_bytes()) ^ seed);
            let len: usize = shape.iter().product();
            let mut data: Vec<f64> = if name.ends_with(".fc.bias") {
                let mut v = vec![0.0; len];
                for i in 0..d {
                    v[i * d + i] = 1.0;
                }
                v
            } else if name.ends_with(".bias") {
                vec![0.0; len]
            } else if name.ends_with(".fc.weight") {
                if fc_noise {
                    (0..len).map(|_| rng.gen_range(-1e-3..1e-3)).collect()
                } else {
                    vec![0.0; len]
                }
            } else {
                (0..len).map(|_| rng.gen_range(-0.4..0.4)).collect()
            };
            if let Some((target, delta)) = perturb {
                if name == target {
                    // Shift the whole first output slice, not one element:
                    // a lone tap can vanish behind a relu that never fires.
                    let stride = len / shape[0];
                    for v in &mut data[..stride] {
                        *v += delta;
                    }
                }
            }
            store.insert(&name, Tensor::new(&shape, data).unwrap()).unwrap();
        }
        store
    }

    #[test]
    fn presets_have_documented_shapes() {
        let s = ModelSpec::shallow();
        assert_eq!(s.encoder.stages(), &[16, 32, 64]);
        assert_eq!(s.encoder.downsample_factor(), 4);
        assert_eq!(s.transform.compressed_dim(), 16);
        let d = ModelSpec::deep();
        assert_eq!(d.encoder.stages(), &[16, 32, 64, 128]);
        assert_eq!(d.encoder.downsample_factor(), 8);
        assert_eq!(d.transform.compressed_dim(), 32);
        assert_ne!(s.spec_hash(), d.spec_hash());
    }

    #[test]
    fn compression_dim_clamps_to_channel_count() {
        assert_eq!(TransformModuleSpec::for_channels(64).unwrap().compressed_dim(), 16);
        assert_eq!(TransformModuleSpec::for_channels(8).unwrap().compressed_dim(), 8);
        assert_eq!(TransformModuleSpec::for_channels(5).unwrap().compressed_dim(), 5);
        assert!(TransformModuleSpec::new(4, 5).is_err());
    }

    #[test]
    fn zero_image_encodes_to_zero_taps() {
        let spec = ModelSpec::shallow();
        let store = init_weights(&spec, 1);
        let enc = encode(&Tensor::zeros(&[3, 8, 8]), &spec.encoder, &store).unwrap();
        assert_eq!(enc.taps().len(), 3);
        for tap in enc.taps() {
            assert!(tap.tensor().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_kernel_single_stage_replicates_input() {
        let enc = EncoderSpec::new(vec![3]).unwrap();
        let spec = ModelSpec::from_encoder(enc.clone()).unwrap();
        let mut store = WeightStore::new(spec.spec_hash());
        let mut w = vec![0.0; 3 * 3 * 9];
        for co in 0..3 {
            w[(co * 3 + co) * 9 + 4] = 1.0; // center tap of the matching channel
        }
        store.insert("encoder.stage0.conv.weight", Tensor::new(&[3, 3, 3, 3], w).unwrap()).unwrap();
        store.insert("encoder.stage0.conv.bias", Tensor::zeros(&[3])).unwrap();
        let img = content_image(8, 0);
        let out = encode(&img, &enc, &store).unwrap();
        assert_eq!(out.bottleneck().tensor().data(), img.data());
    }

    #[test]
    fn encode_matches_naive_oracle() {
        let enc = EncoderSpec::new(vec![4, 6]).unwrap();
        let spec = ModelSpec::from_encoder(enc.clone()).unwrap();
        let store = init_weights(&spec, 11);
        let img = content_image(8, 3);
        let got = encode(&img, &enc, &store).unwrap();

        let w0 = store.get("encoder.stage0.conv.weight").unwrap();
        let b0 = store.get("encoder.stage0.conv.bias").unwrap();
        let mut t0 = naive_conv(img.data(), 3, 8, 8, w0.data(), b0.data(), 4, 3);
        for v in &mut t0 {
            *v = v.max(0.0);
        }
        let p0 = naive_pool(&t0, 4, 8, 8);
        let w1 = store.get("encoder.stage1.conv.weight").unwrap();
        let b1 = store.get("encoder.stage1.conv.bias").unwrap();
        let mut t1 = naive_conv(&p0, 4, 4, 4, w1.data(), b1.data(), 6, 3);
        for v in &mut t1 {
            *v = v.max(0.0);
        }

        assert_close(got.taps()[0].tensor().data(), &t0, 1e-10);
        assert_close(got.taps()[1].tensor().data(), &t1, 1e-10);
    }

    #[test]
    fn decode_matches_naive_oracle() {
        let enc = EncoderSpec::new(vec![4, 6]).unwrap();
        let spec = ModelSpec::from_encoder(enc.clone()).unwrap();
        let store = init_weights(&spec, 12);
        let f = random_map(6, 3, 5, 40);
        let got = decode(&f, &enc, &store).unwrap();
        assert_eq!(got.shape(), &[3, 6, 10]);

        let w0 = store.get("decoder.stage0.conv.weight").unwrap();
        let b0 = store.get("decoder.stage0.conv.bias").unwrap();
        let mut y = naive_conv(f.tensor().data(), 6, 3, 5, w0.data(), b0.data(), 4, 3);
        for v in &mut y {
            *v = v.max(0.0);
        }
        let up = naive_upsample(&y, 4, 3, 5);
        let w1 = store.get("decoder.stage1.conv.weight").unwrap();
        let b1 = store.get("decoder.stage1.conv.bias").unwrap();
        let fin = naive_conv(&up, 4, 6, 10, w1.data(), b1.data(), 3, 3);
        assert_close(got.data(), &fin, 1e-10);
    }

    #[test]
    fn zero_fc_weights_and_identity_bias_give_identity_transform() {
        let enc = EncoderSpec::new(vec![8]).unwrap();
        let spec = ModelSpec::from_encoder(enc).unwrap();
        let store = build_store(&spec, 5, false, None);
        let f_c = random_map(8, 4, 4, 1);
        let f_s = random_map(8, 4, 4, 2);
        let (t, _, _) = learned_t(&f_c, &f_s, &spec.transform, &store).unwrap();
        assert_eq!(t.tensor().data(), Tensor::identity(8).data());
    }

    #[test]
    fn square_compression_with_inverse_pair_reconstructs_content() {
        // d == C, compress orthogonal, uncompress its transpose, t = I and
        // f_s = f_c: the whole pipeline collapses to a near-exact identity.
        let enc = EncoderSpec::new(vec![8]).unwrap();
        let spec = ModelSpec::from_encoder(enc).unwrap();
        assert_eq!(spec.transform.compressed_dim(), 8);
        let q = crate::tensor::random_orthogonal(8, 77);
        let mut store = WeightStore::new(spec.spec_hash());
        for (name, shape) in expected_weights(&spec) {
            let d = 8;
            let data: Vec<f64> = if name == "transform.compress.weight" {
                q.data().to_vec()
            } else if name == "transform.uncompress.weight" {
                q.transpose().into_data()
            } else if name.ends_with(".fc.bias") {
                let mut v = vec![0.0; d * d];
                for i in 0..d {
                    v[i * d + i] = 1.0;
                }
                v
            } else if name.ends_with(".bias") || name.ends_with(".fc.weight") {
                vec![0.0; shape.iter().product()]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(name.as_bytes()));
                (0..shape.iter().product()).map(|_| rng.gen_range(-0.4..0.4)).collect()
            };
            store.insert(&name, Tensor::new(&shape, data).unwrap()).unwrap();
        }
        let f_c = random_map(8, 5, 6, 9);
        let out = stylize_features(&f_c, &f_c, &spec.transform, &store).unwrap();
        let worst = out
            .tensor()
            .data()
            .iter()
            .zip(f_c.tensor().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-9, "identity pipeline drifted by {worst}");
    }

    #[test]
    fn swapping_content_and_style_changes_the_transform() {
        let enc = EncoderSpec::new(vec![4, 8]).unwrap();
        let spec = ModelSpec::from_encoder(enc).unwrap();
        let store = build_store(&spec, 21, true, None);
        let f_a = random_map(8, 4, 4, 31);
        let f_b = random_map(8, 4, 4, 32);
        let (t_ab, _, _) = learned_t(&f_a, &f_b, &spec.transform, &store).unwrap();
        let (t_ba, _, _) = learned_t(&f_b, &f_a, &spec.transform, &store).unwrap();
        let diff = t_ab.tensor().sub(t_ba.tensor()).unwrap().frob_norm();
        assert!(diff > 1e-12, "swapped transform identical (diff {diff})");
    }

    #[test]
    fn cached_style_factors_reproduce_one_shot_path_exactly() {
        let enc = EncoderSpec::new(vec![4, 8]).unwrap();
        let spec = ModelSpec::from_encoder(enc).unwrap();
        let store = build_store(&spec, 22, true, None);
        let f_s = random_map(8, 4, 6, 50);
        let factors = style_factors(&f_s, &spec.transform, &store).unwrap();
        for seed in 60..64 {
            let f_c = random_map(8, 6, 4, seed);
            let one_shot = stylize_features(&f_c, &f_s, &spec.transform, &store).unwrap();
            let cached = stylize_with_factors(&f_c, &factors, &spec.transform, &store).unwrap();
            assert_eq!(one_shot.tensor().data(), cached.tensor().data());
        }
    }

    #[test]
    fn transform_accepts_mismatched_content_and_style_sizes() {
        let enc = EncoderSpec::new(vec![4, 8]).unwrap();
        let spec = ModelSpec::from_encoder(enc).unwrap();
        let store = build_store(&spec, 23, true, None);
        let f_c = random_map(8, 4, 6, 70);
        let f_s = random_map(8, 10, 3, 71);
        let (t, mean_c, mean_s) = learned_t(&f_c, &f_s, &spec.transform, &store).unwrap();
        assert_eq!(t.dim(), 8);
        assert_eq!((mean_c.len(), mean_s.len()), (8, 8));
        let out = stylize_features(&f_c, &f_s, &spec.transform, &store).unwrap();
        assert_eq!((out.channels(), out.height(), out.width()), (8, 4, 6));
    }

    #[test]
    fn every_weight_influences_some_output() {
        let enc = EncoderSpec::new(vec![4, 8]).unwrap();
        let spec = ModelSpec::from_encoder(enc).unwrap();
        let img_c = content_image(8, 1);
        let img_s = style_image(8, 2);

        let probe = |store: &WeightStore| -> Vec<f64> {
            let enc_c = encode(&img_c, &spec.encoder, store).unwrap();
            let enc_s = encode(&img_s, &spec.encoder, store).unwrap();
            let styl =
                stylize_features(enc_c.bottleneck(), enc_s.bottleneck(), &spec.transform, store)
                    .unwrap();
            let img = decode(&styl, &spec.encoder, store).unwrap();
            let mut v = Vec::new();
            for tap in enc_c.taps() {
                v.extend_from_slice(tap.tensor().data());
            }
            v.extend_from_slice(styl.tensor().data());
            v.extend_from_slice(img.data());
            v
        };

        let base = probe(&build_store(&spec, 33, true, None));
        for (name, _) in expected_weights(&spec) {
            let poked = probe(&build_store(&spec, 33, true, Some((name.as_str(), 25.0))));
            let moved = base
                .iter()
                .zip(&poked)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(moved > 1e-12, "weight '{name}' is dead (max delta {moved:e})");
        }
    }

    #[test]
    fn validate_store_rejects_mismatches() {
        let spec = ModelSpec::from_encoder(EncoderSpec::new(vec![4, 8]).unwrap()).unwrap();
        let good = init_weights(&spec, 3);
        validate_store(&spec, &good).unwrap();

        let mut wrong_hash = WeightStore::new(spec.spec_hash() ^ 1);
        for (name, t) in good.iter() {
            wrong_hash.insert(name, t.clone()).unwrap();
        }
        assert!(matches!(validate_store(&spec, &wrong_hash), Err(CoreError::WeightFormat(_))));

        let mut missing = WeightStore::new(spec.spec_hash());
        for (name, t) in good.iter().skip(1) {
            missing.insert(name, t.clone()).unwrap();
        }
        assert!(matches!(validate_store(&spec, &missing), Err(CoreError::WeightFormat(_))));

        let mut extra = WeightStore::new(spec.spec_hash());
        for (name, t) in good.iter() {
            extra.insert(name, t.clone()).unwrap();
        }
        extra.insert("stowaway", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(validate_store(&spec, &extra), Err(CoreError::WeightFormat(_))));

        let mut bad_shape = WeightStore::new(spec.spec_hash());
        for (name, t) in good.iter() {
            if name == "encoder.stage0.conv.bias" {
                bad_shape.insert(name, Tensor::zeros(&[5])).unwrap();
            } else {
                bad_shape.insert(name, t.clone()).unwrap();
            }
        }
        assert!(matches!(validate_store(&spec, &bad_shape), Err(CoreError::WeightFormat(_))));
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let spec = ModelSpec::from_encoder(EncoderSpec::new(vec![4, 8]).unwrap()).unwrap();
        let store = init_weights(&spec, 3);
        assert!(encode(&Tensor::zeros(&[1, 8, 8]), &spec.encoder, &store).is_err());
        assert!(encode(&Tensor::zeros(&[3, 7, 8]), &spec.encoder, &store).is_err());
        assert!(encode(&Tensor::zeros(&[3, 8, 8]), &spec.encoder, &store).is_ok());
    }

    #[test]
    fn graph_encode_and_decode_match_inference() {
        let enc = EncoderSpec::new(vec![4, 6]).unwrap();
        let spec = ModelSpec::from_encoder(enc.clone()).unwrap();
        let store = init_weights(&spec, 44);
        let img = content_image(8, 9);

        let inference = encode(&img, &enc, &store).unwrap();
        let decoded = decode(inference.bottleneck(), &enc, &store).unwrap();

        let mut g = Graph::new();
        let wb = bind_weights(&mut g, &spec, &store, |_| WeightRole::Frozen).unwrap();
        let img_node = g.input(&[3, 8, 8]);
        g.set_no_grad(img_node).unwrap();
        let taps = graph_encode(&mut g, &enc, img_node, &wb).unwrap();
        let out = graph_decode(&mut g, &enc, *taps.last().unwrap(), &wb).unwrap();
        g.bind(img_node, img.clone()).unwrap();
        g.forward().unwrap();

        for (tap_node, tap) in taps.iter().zip(inference.taps()) {
            assert_eq!(g.value(*tap_node).unwrap().data(), tap.tensor().data());
        }
        assert_eq!(g.value(out).unwrap().data(), decoded.data());
    }

    #[test]
    fn graph_stylize_matches_inference() {
        let enc = EncoderSpec::new(vec![4, 8]).unwrap();
        let spec = ModelSpec::from_encoder(enc).unwrap();
        let store = build_store(&spec, 55, true, None);
        let f_c = random_map(8, 4, 6, 80);
        let f_s = random_map(8, 6, 4, 81);
        let want = stylize_features(&f_c, &f_s, &spec.transform, &store).unwrap();

        let mut g = Graph::new();
        let wb = bind_weights(&mut g, &spec, &store, |name| {
            if name.starts_with("transform.") {
                WeightRole::Trainable
            } else {
                WeightRole::Frozen
            }
        })
        .unwrap();
        let fc = g.input(&[8, 4, 6]);
        let fs = g.input(&[8, 6, 4]);
        for id in [fc, fs] {
            g.set_no_grad(id).unwrap();
        }
        let out = graph_stylize(&mut g, &spec.transform, fc, fs, &wb).unwrap();
        g.bind(fc, Tensor::new(&[8, 4, 6], f_c.tensor().data().to_vec()).unwrap()).unwrap();
        g.bind(fs, Tensor::new(&[8, 6, 4], f_s.tensor().data().to_vec()).unwrap()).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(out).unwrap().data(), want.tensor().data());

        // Gradients reach every trainable transform weight.
        let target = g.input(&[8, 4, 6]);
        g.set_no_grad(target).unwrap();
        let loss = g.frobenius_sq_diff(out, target).unwrap();
        g.bind(target, Tensor::zeros(&[8, 4, 6])).unwrap();
        g.forward().unwrap();
        g.backward(loss).unwrap();
        for (name, id) in wb.trainable() {
            let grad = g.grad(id);
            assert!(grad.is_some(), "no gradient for {name}");
        }
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        let worst = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);
        assert!(worst <= tol, "max abs diff {worst} > {tol}");
    }

    fn naive_conv(
        x: &[f64],
        cin: usize,
        h: usize,
        w: usize,
        wt: &[f64],
        b: &[f64],
        cout: usize,
        k: usize,
    ) -> Vec<f64> {
        let p = k / 2;
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for u in 0..k {
                            for v in 0..k {
                                let (si, sj) = (i + u, j + v);
                                if si >= p && sj >= p && si - p < h && sj - p < w {
                                    acc += x[(ci * h + si - p) * w + sj - p]
                                        * wt[((co * cin + ci) * k + u) * k + v];
                                }
                            }
                        }
                    }
                    out[(co * h + i) * w + j] = acc;
                }
            }
        }
        out
    }

    fn naive_pool(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..2 {
                            m = m.max(x[(ch * h + 2 * i + di) * w + 2 * j + dj]);
                        }
                    }
                    out[(ch * oh + i) * ow + j] = m;
                }
            }
        }
        out
    }

    fn naive_upsample(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = (h * 2, w * 2);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out[(ch * oh + i) * ow + j] = x[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        out
    }
}

//! Lightweight promptable encoder-decoder backbone.
//!
//! A small U-style stack stands in for a foundation segmentation model: the
//! encoder emits a multi-scale feature pyramid (strides 4, 8, 16, ... by
//! level), prompts are encoded as learned tokens rasterized into an additive
//! bias on the coarsest level, and the decoder fuses the pyramid back to
//! per-pixel class logits at input resolution. Everything runs through the
//! autodiff graph, so training and inference share one forward definition.

use std::collections::{BTreeMap, VecDeque};

use ndarray::{Array, Array1, Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::pcsw::Prompt;

/// Architecture hyperparameters. `level_channels[i]` is the width of pyramid
/// level `i`, which sits at stride `4 * 2^i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub level_channels: Vec<usize>,
    pub leak: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { in_channels: 1, num_classes: 2, level_channels: vec![8, 16, 24], leak: 0.1 }
    }
}

impl BackboneConfig {
    pub fn levels(&self) -> usize {
        self.level_channels.len()
    }

    /// Stride of pyramid level `i` relative to the input.
    pub fn stride(&self, level: usize) -> usize {
        4 << level
    }

    /// Total downsampling factor; input dims must be divisible by this.
    pub fn downsample_factor(&self) -> usize {
        self.stride(self.levels() - 1)
    }

    pub fn prompt_dim(&self) -> usize {
        *self.level_channels.last().expect("at least one level")
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels() < 2 {
            return Err(Error::Config("backbone needs at least 2 pyramid levels".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("backbone needs at least 2 classes".into()));
        }
        if self.in_channels == 0 || self.level_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Multi-scale feature maps, one `(C_i, H_i, W_i)` tensor per level with
/// strictly decreasing spatial dims.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Array3<f64>>,
}

impl FeaturePyramid {
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(Error::shape("feature pyramid needs at least 2 levels"));
        }
        for pair in self.levels.windows(2) {
            let (_, h0, w0) = pair[0].dim();
            let (_, h1, w1) = pair[1].dim();
            if h1 >= h0 || w1 >= w0 {
                return Err(Error::shape("pyramid spatial dims must strictly decrease"));
            }
        }
        if self.levels.iter().any(|l| l.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite value in feature pyramid".into()));
        }
        Ok(())
    }
}

/// Role tag of one prompt token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptRole {
    PointPositive,
    PointNegative,
    BoxCorner,
}

/// A prompt token: its role, embedding vector, and raster position on the
/// coarsest pyramid level.
#[derive(Debug, Clone)]
pub struct PromptToken {
    pub role: PromptRole,
    pub vector: Array1<f64>,
    pub position: (usize, usize),
}

/// Encoded prompt set. Empty means unprompted decoding.
#[derive(Debug, Clone, Default)]
pub struct PromptEmbedding {
    pub tokens: Vec<PromptToken>,
}

/// Bounded list of past frame embeddings. The decoder does not attend over
/// it; the type exists so the two-frame training regime has somewhere to
/// park history.
#[derive(Debug, Clone)]
pub struct MemoryStub {
    capacity: usize,
    past: VecDeque<Array3<f64>>,
}

impl MemoryStub {
    pub fn new(capacity: usize) -> Self {
        MemoryStub { capacity, past: VecDeque::new() }
    }

    pub fn push(&mut self, embedding: Array3<f64>) {
        if self.capacity == 0 {
            return;
        }
        if self.past.len() == self.capacity {
            self.past.pop_front();
        }
        self.past.push_back(embedding);
    }

    pub fn len(&self) -> usize {
        self.past.len()
    }

    pub fn is_empty(&self) -> bool {
        self.past.is_empty()
    }
}

/// All learnable tensors, addressable by stable names. The name set is fixed
/// at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ModelParams {
    /// Seeded initialization of every tensor the forward pass uses.
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        let chans = &cfg.level_channels;
        let c0 = chans[0];

        let mut conv = |t: &mut BTreeMap<String, ArrayD<f64>>, name: &str, co: usize, ci: usize, k: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / (ci * k * k) as f64).sqrt();
            t.insert(
                format!("{name}.w"),
                Array::from_shape_fn(IxDyn(&[co, ci, k, k]), |_| rng.random_range(-bound..bound)),
            );
            t.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[co])));
        };

        conv(&mut tensors, "enc.stem1", c0, cfg.in_channels, 3, &mut rng);
        conv(&mut tensors, "enc.stem2", c0, c0, 3, &mut rng);
        conv(&mut tensors, "enc.refine0", c0, c0, 3, &mut rng);
        for i in 1..cfg.levels() {
            conv(&mut tensors, &format!("enc.down{i}"), chans[i], chans[i - 1], 3, &mut rng);
            conv(&mut tensors, &format!("enc.refine{i}"), chans[i], chans[i], 3, &mut rng);
        }
        for i in 1..cfg.levels() {
            conv(&mut tensors, &format!("dec.up{i}"), chans[i - 1], chans[i], 3, &mut rng);
        }
        conv(&mut tensors, "dec.final1", c0, c0, 3, &mut rng);
        conv(&mut tensors, "dec.logits", cfg.num_classes, c0, 1, &mut rng);
        conv(&mut tensors, "head", cfg.num_classes, c0, 3, &mut rng);

        for (i, &c) in chans.iter().enumerate() {
            conv(&mut tensors, &format!("dfe.mlp{i}.l1"), c, c, 1, &mut rng);
            conv(&mut tensors, &format!("dfe.mlp{i}.l2"), c, c, 1, &mut rng);
            // Fusion projection starts as identity on the original features
            // and near-zero on the fused half, so an untrained DFE path stays
            // close to the plain decoder.
            let mut proj = Array::from_shape_fn(IxDyn(&[c, 2 * c, 1, 1]), |_| rng.random_range(-0.02..0.02));
            for o in 0..c {
                proj[[o, o, 0, 0]] = 1.0;
            }
            tensors.insert(format!("dfe.proj{i}.w"), proj);
            tensors.insert(format!("dfe.proj{i}.b"), ArrayD::zeros(IxDyn(&[c])));
        }

        let cp = cfg.prompt_dim();
        tensors.insert(
            "prompt.role_emb".to_string(),
            Array::from_shape_fn(IxDyn(&[3, cp]), |_| rng.random_range(-0.2..0.2)),
        );
        tensors.insert(
            "prompt.class_emb".to_string(),
            Array::from_shape_fn(IxDyn(&[cfg.num_classes, cp]), |_| rng.random_range(-0.2..0.2)),
        );

        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn tensor_map(&self) -> &BTreeMap<String, ArrayD<f64>> {
        &self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, ArrayD<f64>>) -> Self {
        ModelParams { tensors }
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn same_schema(&self, other: &ModelParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn reg(g: &mut Graph, params: &ModelParams, name: &str) -> NodeId {
    g.param(name, params.get(name).clone())
}

fn conv_block(
    g: &mut Graph,
    params: &ModelParams,
    name: &str,
    x: NodeId,
    stride: usize,
    leak: f64,
) -> Result<NodeId> {
    let w = reg(g, params, &format!("{name}.w"));
    let b = reg(g, params, &format!("{name}.b"));
    let y = g.conv2d(x, w, b, stride)?;
    Ok(g.leaky_relu(y, leak))
}

/// Builds the encoder on the graph; returns one node per pyramid level.
pub(crate) fn encode_into(
    g: &mut Graph,
    image: &Array2<f64>,
    params: &ModelParams,
    cfg: &BackboneConfig,
) -> Result<Vec<NodeId>> {
    let (h, w) = image.dim();
    let f = cfg.downsample_factor();
    if h % f != 0 || w % f != 0 {
        return Err(Error::shape(format!(
            "image dims {h}x{w} not divisible by the total downsampling factor {f}; pad to ({}x{})",
            h.div_ceil(f) * f,
            w.div_ceil(f) * f,
        )));
    }
    let x = g.constant(image.clone().into_shape_with_order(IxDyn(&[1, h, w])).expect("reshape"));
    let x = conv_block(g, params, "enc.stem1", x, 2, cfg.leak)?;
    let x = conv_block(g, params, "enc.stem2", x, 2, cfg.leak)?;
    let mut level = conv_block(g, params, "enc.refine0", x, 1, cfg.leak)?;
    let mut levels = vec![level];
    for i in 1..cfg.levels() {
        level = conv_block(g, params, &format!("enc.down{i}"), level, 2, cfg.leak)?;
        level = conv_block(g, params, &format!("enc.refine{i}"), level, 1, cfg.leak)?;
        levels.push(level);
    }
    Ok(levels)
}

fn role_index(role: PromptRole) -> usize {
    match role {
        PromptRole::PointPositive => 0,
        PromptRole::PointNegative => 1,
        PromptRole::BoxCorner => 2,
    }
}

fn prompt_tokens(prompts: &[Prompt], dims: (usize, usize), num_classes: usize) -> Result<Vec<(PromptRole, u8, usize, usize)>> {
    let (h, w) = dims;
    let mut out = Vec::new();
    for p in prompts {
        if p.class_id() as usize >= num_classes {
            return Err(Error::invalid(format!("prompt class {} out of range", p.class_id())));
        }
        match *p {
            Prompt::Point { class_id, y, x, positive } => {
                if y >= h || x >= w {
                    return Err(Error::invalid(format!("prompt point ({y},{x}) outside {h}x{w}")));
                }
                let role = if positive { PromptRole::PointPositive } else { PromptRole::PointNegative };
                out.push((role, class_id, y, x));
            }
            Prompt::Box { class_id, y0, x0, y1, x1 } => {
                if y1 >= h || x1 >= w || y0 > y1 || x0 > x1 {
                    return Err(Error::invalid(format!(
                        "prompt box ({y0},{x0})-({y1},{x1}) invalid for {h}x{w}"
                    )));
                }
                for (cy, cx) in [(y0, x0), (y0, x1), (y1, x0), (y1, x1)] {
                    out.push((PromptRole::BoxCorner, class_id, cy, cx));
                }
            }
        }
    }
    Ok(out)
}

/// Builds the prompt bias map on the coarsest level; `None` when the prompt
/// set is empty (unprompted mode).
pub(crate) fn prompt_bias_into(
    g: &mut Graph,
    prompts: &[Prompt],
    image_dims: (usize, usize),
    params: &ModelParams,
    cfg: &BackboneConfig,
) -> Result<Option<NodeId>> {
    let tokens = prompt_tokens(prompts, image_dims, cfg.num_classes)?;
    if tokens.is_empty() {
        return Ok(None);
    }
    let stride = cfg.downsample_factor();
    let (hc, wc) = (image_dims.0 / stride, image_dims.1 / stride);
    let role_emb = reg(g, params, "prompt.role_emb");
    let class_emb = reg(g, params, "prompt.class_emb");
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    for (role, class_id, y, x) in tokens {
        let r = g.embed_row(role_emb, role_index(role))?;
        let c = g.embed_row(class_emb, class_id as usize)?;
        ids.push(g.add(r, c)?);
        positions.push(((y / stride).min(hc - 1), (x / stride).min(wc - 1)));
    }
    Ok(Some(g.prompt_raster(&ids, &positions, (cfg.prompt_dim(), hc, wc))?))
}

/// Builds the decoder on the graph: coarsest-to-finest fusion with skip
/// connections, then upsampling back to input resolution.
pub(crate) fn decode_into(
    g: &mut Graph,
    levels: &[NodeId],
    prompt_bias: Option<NodeId>,
    params: &ModelParams,
    cfg: &BackboneConfig,
) -> Result<NodeId> {
    if levels.len() != cfg.levels() {
        return Err(Error::shape(format!(
            "pyramid has {} levels but the decoder expects {}",
            levels.len(),
            cfg.levels()
        )));
    }
    for (i, &lvl) in levels.iter().enumerate() {
        let c = g.value(lvl).shape()[0];
        if c != cfg.level_channels[i] {
            return Err(Error::shape(format!(
                "pyramid level {i} has {c} channels, decoder expects {}",
                cfg.level_channels[i]
            )));
        }
    }
    let mut x = *levels.last().unwrap();
    if let Some(bias) = prompt_bias {
        x = g.add(x, bias)?;
    }
    for i in (1..cfg.levels()).rev() {
        x = conv_block(g, params, &format!("dec.up{i}"), x, 1, cfg.leak)?;
        x = g.upsample_nearest(x, 2)?;
        x = g.add(x, levels[i - 1])?;
    }
    x = g.upsample_nearest(x, 2)?;
    x = conv_block(g, params, "dec.final1", x, 1, cfg.leak)?;
    x = g.upsample_nearest(x, 2)?;
    let w = reg(g, params, "dec.logits.w");
    let b = reg(g, params, "dec.logits.b");
    g.conv2d(x, w, b, 1)
}

/// Conv head for pseudo-mask prediction, applied to the finest level and
/// upsampled to input resolution.
pub(crate) fn head_into(
    g: &mut Graph,
    level0: NodeId,
    params: &ModelParams,
    _cfg: &BackboneConfig,
) -> Result<NodeId> {
    let w = reg(g, params, "head.w");
    let b = reg(g, params, "head.b");
    let y = g.conv2d(level0, w, b, 1)?;
    g.upsample_nearest(y, 4)
}

fn to_array3(v: &ArrayD<f64>) -> Array3<f64> {
    let s = v.shape();
    Array3::from_shape_fn((s[0], s[1], s[2]), |(a, b, c)| v[[a, b, c]])
}

/// Encodes one image into its feature pyramid.
pub fn encode(image: &Array2<f64>, params: &ModelParams, cfg: &BackboneConfig) -> Result<FeaturePyramid> {
    let mut g = Graph::new();
    let levels = encode_into(&mut g, image, params, cfg)?;
    let pyramid = FeaturePyramid { levels: levels.iter().map(|&l| to_array3(g.value(l))).collect() };
    pyramid.validate()?;
    Ok(pyramid)
}

/// Encodes a prompt set for an image of the given dims. One token per point,
/// four per box corner; an empty prompt set yields an empty embedding.
pub fn encode_prompt(
    prompts: &[Prompt],
    image_dims: (usize, usize),
    params: &ModelParams,
    cfg: &BackboneConfig,
) -> Result<PromptEmbedding> {
    let tokens = prompt_tokens(prompts, image_dims, cfg.num_classes)?;
    let stride = cfg.downsample_factor();
    let (hc, wc) = (image_dims.0 / stride, image_dims.1 / stride);
    let role_emb = params.get("prompt.role_emb");
    let class_emb = params.get("prompt.class_emb");
    let cp = cfg.prompt_dim();
    let mut out = Vec::new();
    for (role, class_id, y, x) in tokens {
        let ri = role_index(role);
        let vector = Array1::from_shape_fn(cp, |c| role_emb[[ri, c]] + class_emb[[class_id as usize, c]]);
        out.push(PromptToken { role, vector, position: ((y / stride).min(hc - 1), (x / stride).min(wc - 1)) });
    }
    Ok(PromptEmbedding { tokens: out })
}

/// Full forward pass to per-pixel class logits `(K, H, W)`.
pub fn decode_logits(
    image: &Array2<f64>,
    prompts: &[Prompt],
    params: &ModelParams,
    cfg: &BackboneConfig,
) -> Result<Array3<f64>> {
    let mut g = Graph::new();
    let levels = encode_into(&mut g, image, params, cfg)?;
    let bias = prompt_bias_into(&mut g, prompts, image.dim(), params, cfg)?;
    let logits = decode_into(&mut g, &levels, bias, params, cfg)?;
    Ok(to_array3(g.value(logits)))
}

/// Pseudo-mask head logits `(K, H, W)` for one image.
pub fn head_logits(image: &Array2<f64>, params: &ModelParams, cfg: &BackboneConfig) -> Result<Array3<f64>> {
    let mut g = Graph::new();
    let levels = encode_into(&mut g, image, params, cfg)?;
    let logits = head_into(&mut g, levels[0], params, cfg)?;
    Ok(to_array3(g.value(logits)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcsw::Prompt;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig { in_channels: 1, num_classes: 3, level_channels: vec![4, 6, 8], leak: 0.1 }
    }

    fn image(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn pyramid_shapes_follow_the_stride_schedule() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let pyr = encode(&image(64, 64, 2), &params, &cfg).unwrap();
        let dims: Vec<(usize, usize, usize)> = pyr.levels.iter().map(|l| l.dim()).collect();
        assert_eq!(dims, vec![(4, 16, 16), (6, 8, 8), (8, 4, 4)]);
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let img = image(32, 32, 3);
        let a = encode(&img, &params, &cfg).unwrap();
        let b = encode(&img, &params, &cfg).unwrap();
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn zero_image_with_zero_biases_gives_zero_pyramid() {
        let cfg = small_cfg();
        let mut params = ModelParams::init(&cfg, 1).unwrap();
        let names: Vec<String> = params.names().cloned().collect();
        for n in names {
            if n.ends_with(".b") {
                params.get_mut(&n).fill(0.0);
            }
        }
        let pyr = encode(&Array2::zeros((32, 32)), &params, &cfg).unwrap();
        for l in &pyr.levels {
            assert!(l.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn indivisible_dims_rejected_with_hint() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let err = encode(&image(40, 40, 4), &params, &cfg).unwrap_err();
        assert!(err.to_string().contains("pad to"), "{err}");
    }

    #[test]
    fn empty_prompt_set_encodes_to_zero_tokens() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let emb = encode_prompt(&[], (32, 32), &params, &cfg).unwrap();
        assert!(emb.tokens.is_empty());
    }

    #[test]
    fn one_point_one_token_one_box_four_corner_tokens() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let point = encode_prompt(
            &[Prompt::Point { class_id: 1, y: 5, x: 9, positive: true }],
            (32, 32),
            &params,
            &cfg,
        )
        .unwrap();
        assert_eq!(point.tokens.len(), 1);
        assert_eq!(point.tokens[0].role, PromptRole::PointPositive);

        let boxed = encode_prompt(
            &[Prompt::Box { class_id: 2, y0: 2, x0: 3, y1: 10, x1: 12 }],
            (32, 32),
            &params,
            &cfg,
        )
        .unwrap();
        assert_eq!(boxed.tokens.len(), 4);
        assert!(boxed.tokens.iter().all(|t| t.role == PromptRole::BoxCorner));
    }

    #[test]
    fn out_of_bounds_prompt_rejected() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, 1).unwrap();
        assert!(encode_prompt(
            &[Prompt::Point { class_id: 1, y: 40, x: 9, positive: true }],
            (32, 32),
            &params,
            &cfg,
        )
        .is_err());
    }

    #[test]
    fn decode_shapes_and_softmax_normalization() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let img = image(32, 32, 5);
        let logits = decode_logits(&img, &[], &params, &cfg).unwrap();
        assert_eq!(logits.dim(), (3, 32, 32));
        for y in 0..32 {
            for x in 0..32 {
                let mx = (0..3).map(|c| logits[[c, y, x]]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..3).map(|c| (logits[[c, y, x]] - mx).exp()).sum();
                let total: f64 = (0..3).map(|c| (logits[[c, y, x]] - mx).exp() / z).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn prompts_causally_affect_the_mask() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let img = image(32, 32, 6);
        let plain = decode_logits(&img, &[], &params, &cfg).unwrap();
        let prompted = decode_logits(
            &img,
            &[Prompt::Point { class_id: 1, y: 16, x: 16, positive: true }],
            &params,
            &cfg,
        )
        .unwrap();
        assert_ne!(plain, prompted);
    }

    #[test]
    fn parameter_count_within_desk_budget() {
        let cfg = BackboneConfig::default();
        let params = ModelParams::init(&cfg, 1).unwrap();
        assert!(params.param_count() <= 2_000_000, "params: {}", params.param_count());
    }

    #[test]
    fn memory_stub_respects_capacity() {
        let mut m = MemoryStub::new(2);
        for i in 0..5 {
            m.push(Array3::from_elem((1, 1, 1), i as f64));
        }
        assert_eq!(m.len(), 2);
    }
}

//! Discriminative feature enhancement.
//!
//! For each pyramid scale the two augmented views are pooled, compared by
//! cosine similarity, and fused as a sigmoid-weighted convex combination of
//! their (shared) MLP outputs. A similarity-gated residual difference is
//! added on top, and the adjusted features are re-injected per view by
//! concatenation with the originals followed by a learned 1x1 projection back
//! to the decoder's channel count.

use ndarray::{Array1, Array3, ArrayD, IxDyn};
use serde::Serialize;

use crate::autodiff::{self, Graph, NodeId};
use crate::backbone::{BackboneConfig, FeaturePyramid, ModelParams};
use crate::error::{Error, Result};

/// Per-scale pooled vectors, their cosine similarity, and the fusion weight.
#[derive(Debug, Clone)]
pub struct ScaleStats {
    pub pooled_1: Array1<f64>,
    pub pooled_2: Array1<f64>,
    pub similarity: f64,
    pub weight: f64,
}

impl ScaleStats {
    fn new(pooled_1: Array1<f64>, pooled_2: Array1<f64>, similarity: f64) -> Self {
        ScaleStats { pooled_1, pooled_2, similarity, weight: fusion_weight(similarity) }
    }
}

/// Compact per-scale diagnostics for the metrics stream.
#[derive(Debug, Clone, Serialize)]
pub struct ScaleStatsSummary {
    pub similarity: f64,
    pub weight: f64,
}

/// Fused, residual, and adjusted maps per scale.
#[derive(Debug, Clone)]
pub struct FusedPyramid {
    pub fused: Vec<Array3<f64>>,
    pub delta: Vec<Array3<f64>>,
    pub adjusted: Vec<Array3<f64>>,
}

/// Channel-wise spatial mean: `(C, H, W) -> (C)`.
pub fn global_average_pool(feature: &Array3<f64>) -> Result<Array1<f64>> {
    let (c, h, w) = feature.dim();
    if h == 0 || w == 0 {
        return Err(Error::shape("global average pool over empty spatial extent"));
    }
    let inv = 1.0 / (h * w) as f64;
    Ok(Array1::from_shape_fn(c, |ci| {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                acc += feature[[ci, y, x]];
            }
        }
        acc * inv
    }))
}

/// Cosine similarity in `[-1, 1]`; vectors with norm below 1e-12 compare as 0.
pub fn cosine_similarity(u: &Array1<f64>, v: &Array1<f64>) -> f64 {
    autodiff::cosine_value(&u.clone().into_dyn(), &v.clone().into_dyn())
}

/// Sigmoid of the similarity, strictly increasing.
pub fn fusion_weight(similarity: f64) -> f64 {
    1.0 / (1.0 + (-similarity).exp())
}

fn mlp_into(g: &mut Graph, params: &ModelParams, scale: usize, x: NodeId, leak: f64) -> Result<NodeId> {
    let w1 = g.param(&format!("dfe.mlp{scale}.l1.w"), params.get(&format!("dfe.mlp{scale}.l1.w")).clone());
    let b1 = g.param(&format!("dfe.mlp{scale}.l1.b"), params.get(&format!("dfe.mlp{scale}.l1.b")).clone());
    let w2 = g.param(&format!("dfe.mlp{scale}.l2.w"), params.get(&format!("dfe.mlp{scale}.l2.w")).clone());
    let b2 = g.param(&format!("dfe.mlp{scale}.l2.b"), params.get(&format!("dfe.mlp{scale}.l2.b")).clone());
    let h = g.conv2d(x, w1, b1, 1)?;
    let h = g.leaky_relu(h, leak);
    g.conv2d(h, w2, b2, 1)
}

pub(crate) struct DfeScaleNodes {
    pub fused: NodeId,
    pub delta: NodeId,
    pub adjusted: NodeId,
    pub view1: NodeId,
    pub view2: NodeId,
}

pub(crate) struct DfeGraphOutput {
    pub scales: Vec<DfeScaleNodes>,
    pub stats: Vec<ScaleStats>,
}

/// Builds DFE for every scale on the graph. The convex combination is
/// computed as `MLP(F2) + w * (MLP(F1) - MLP(F2))`, which is exact when the
/// two views coincide.
pub(crate) fn dfe_into(
    g: &mut Graph,
    levels1: &[NodeId],
    levels2: &[NodeId],
    params: &ModelParams,
    cfg: &BackboneConfig,
) -> Result<DfeGraphOutput> {
    if levels1.len() != levels2.len() {
        return Err(Error::shape(format!(
            "pyramids have {} vs {} levels",
            levels1.len(),
            levels2.len()
        )));
    }
    let mut scales = Vec::new();
    let mut stats = Vec::new();
    for (i, (&f1, &f2)) in levels1.iter().zip(levels2).enumerate() {
        if g.value(f1).shape() != g.value(f2).shape() {
            return Err(Error::shape(format!("scale {i} maps have different shapes")));
        }
        let p1 = g.global_avg_pool(f1)?;
        let p2 = g.global_avg_pool(f2)?;
        let s = g.cosine(p1, p2)?;
        let w = g.sigmoid(s);

        let m1 = mlp_into(g, params, i, f1, cfg.leak)?;
        let m2 = mlp_into(g, params, i, f2, cfg.leak)?;
        let mdiff = g.sub(m1, m2)?;
        let scaled = g.scale_by(mdiff, w);
        let fused = g.add(m2, scaled)?;

        let one_minus_s = g.scalar_affine(s, 1.0, -1.0);
        let fdiff = g.sub(f2, f1)?;
        let delta = g.scale_by(fdiff, one_minus_s);
        let adjusted = g.add(fused, delta)?;

        let proj_w = g.param(&format!("dfe.proj{i}.w"), params.get(&format!("dfe.proj{i}.w")).clone());
        let proj_b = g.param(&format!("dfe.proj{i}.b"), params.get(&format!("dfe.proj{i}.b")).clone());
        let cat1 = g.concat_channels(f1, adjusted)?;
        let view1 = g.conv2d(cat1, proj_w, proj_b, 1)?;
        let cat2 = g.concat_channels(f2, adjusted)?;
        let view2 = g.conv2d(cat2, proj_w, proj_b, 1)?;

        let pooled_1 = Array1::from_iter(g.value(p1).iter().copied());
        let pooled_2 = Array1::from_iter(g.value(p2).iter().copied());
        stats.push(ScaleStats::new(pooled_1, pooled_2, g.scalar_value(s)));
        scales.push(DfeScaleNodes { fused, delta, adjusted, view1, view2 });
    }
    Ok(DfeGraphOutput { scales, stats })
}

fn to_array3(v: &ArrayD<f64>) -> Array3<f64> {
    let s = v.shape();
    Array3::from_shape_fn((s[0], s[1], s[2]), |(a, b, c)| v[[a, b, c]])
}

/// Fuses two equal-shape maps with the scale-`i` MLP shared between views:
/// a `w`-weighted convex combination of the MLP outputs.
pub fn fuse(
    f1: &Array3<f64>,
    f2: &Array3<f64>,
    w: f64,
    params: &ModelParams,
    cfg: &BackboneConfig,
    scale: usize,
) -> Result<Array3<f64>> {
    if f1.dim() != f2.dim() {
        return Err(Error::shape("fuse inputs must share shape"));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("fusion weight {w} outside [0,1]")));
    }
    let mut g = Graph::new();
    let n1 = g.constant(f1.clone().into_dyn());
    let n2 = g.constant(f2.clone().into_dyn());
    let m1 = mlp_into(&mut g, params, scale, n1, cfg.leak)?;
    let m2 = mlp_into(&mut g, params, scale, n2, cfg.leak)?;
    let wq = g.scalar_constant(w);
    let d = g.sub(m1, m2)?;
    let sd = g.scale_by(d, wq);
    let fused = g.add(m2, sd)?;
    Ok(to_array3(g.value(fused)))
}

/// `(1 - s) * (F2 - F1)` elementwise.
pub fn residual_delta(f1: &Array3<f64>, f2: &Array3<f64>, similarity: f64) -> Result<Array3<f64>> {
    if f1.dim() != f2.dim() {
        return Err(Error::shape("residual delta inputs must share shape"));
    }
    let coeff = 1.0 - similarity;
    Ok(Array3::from_shape_fn(f1.dim(), |idx| coeff * (f2[idx] - f1[idx])))
}

/// Runs DFE over two pyramids and returns the fused/delta/adjusted maps plus
/// per-scale statistics.
pub fn dfe_forward(
    pyr1: &FeaturePyramid,
    pyr2: &FeaturePyramid,
    params: &ModelParams,
    cfg: &BackboneConfig,
) -> Result<(FusedPyramid, Vec<ScaleStats>)> {
    if pyr1.levels.len() != pyr2.levels.len() {
        return Err(Error::shape("pyramids have different level counts"));
    }
    let mut g = Graph::new();
    let l1: Vec<NodeId> = pyr1.levels.iter().map(|l| g.constant(l.clone().into_dyn())).collect();
    let l2: Vec<NodeId> = pyr2.levels.iter().map(|l| g.constant(l.clone().into_dyn())).collect();
    let out = dfe_into(&mut g, &l1, &l2, params, cfg)?;
    let fused = FusedPyramid {
        fused: out.scales.iter().map(|s| to_array3(g.value(s.fused))).collect(),
        delta: out.scales.iter().map(|s| to_array3(g.value(s.delta))).collect(),
        adjusted: out.scales.iter().map(|s| to_array3(g.value(s.adjusted))).collect(),
    };
    Ok((fused, out.stats))
}

/// Reference MLP evaluation used by tests and the identity-collapse checks:
/// the shared two-layer 1x1 MLP applied at one spatial location at a time.
pub fn mlp_reference(x: &Array3<f64>, params: &ModelParams, cfg: &BackboneConfig, scale: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let w1 = params.get(&format!("dfe.mlp{scale}.l1.w"));
    let b1 = params.get(&format!("dfe.mlp{scale}.l1.b"));
    let w2 = params.get(&format!("dfe.mlp{scale}.l2.w"));
    let b2 = params.get(&format!("dfe.mlp{scale}.l2.b"));
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for xx in 0..w {
            let mut hid = vec![0.0; c];
            for o in 0..c {
                let mut acc = b1[[o]];
                for ci in 0..c {
                    acc += w1[[o, ci, 0, 0]] * x[[ci, y, xx]];
                }
                hid[o] = if acc >= 0.0 { acc } else { cfg.leak * acc };
            }
            for o in 0..c {
                let mut acc = b2[[o]];
                for ci in 0..c {
                    acc += w2[[o, ci, 0, 0]] * hid[ci];
                }
                out[[o, y, xx]] = acc;
            }
        }
    }
    out
}

/// Sets every DFE projection to identity-on-original / zero-on-fused, which
/// makes the DFE path reproduce the plain decoder exactly.
pub fn zero_dfe_contribution(params: &mut ModelParams, cfg: &BackboneConfig) {
    for (i, &c) in cfg.level_channels.iter().enumerate() {
        let w = params.get_mut(&format!("dfe.proj{i}.w"));
        *w = ArrayD::zeros(IxDyn(&[c, 2 * c, 1, 1]));
        for o in 0..c {
            w[[o, o, 0, 0]] = 1.0;
        }
        params.get_mut(&format!("dfe.proj{i}.b")).fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> BackboneConfig {
        BackboneConfig { in_channels: 1, num_classes: 2, level_channels: vec![4, 6], leak: 0.1 }
    }

    fn rand_map(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gap_of_constant_map() {
        let m = Array3::from_elem((3, 4, 5), 3.5);
        let p = global_average_pool(&m).unwrap();
        for v in p.iter() {
            assert_eq!(*v, 3.5);
        }
    }

    #[test]
    fn gap_of_1x1_map_is_the_pixel_vector() {
        let mut m = Array3::zeros((3, 1, 1));
        m[[0, 0, 0]] = 1.0;
        m[[1, 0, 0]] = -2.0;
        m[[2, 0, 0]] = 0.25;
        let p = global_average_pool(&m).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 0.25]);
    }

    #[test]
    fn gap_matches_naive_triple_loop() {
        let m = rand_map(16, 7, 5, 3);
        let p = global_average_pool(&m).unwrap();
        for c in 0..16 {
            let mut acc = 0.0;
            for y in 0..7 {
                for x in 0..5 {
                    acc += m[[c, y, x]];
                }
            }
            assert!((p[c] - acc / 35.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_self_orthogonal_antipodal() {
        let u = Array1::from(vec![0.3, -1.2, 2.0]);
        assert!((cosine_similarity(&u, &u) - 1.0).abs() < 1e-12);
        let e0 = Array1::from(vec![1.0, 0.0]);
        let e1 = Array1::from(vec![0.0, 1.0]);
        assert_eq!(cosine_similarity(&e0, &e1), 0.0);
        let neg = u.mapv(|v| -v);
        assert!((cosine_similarity(&u, &neg) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_near_zero_vector_is_zero() {
        let z = Array1::from(vec![0.0, 1e-15]);
        let u = Array1::from(vec![1.0, 1.0]);
        assert_eq!(cosine_similarity(&z, &u), 0.0);
    }

    #[test]
    fn fusion_weight_values() {
        assert_eq!(fusion_weight(0.0), 0.5);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((fusion_weight(1.0) - expected).abs() < 1e-15);
        // Bounded by sigmoid of the cosine range.
        for s in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            let w = fusion_weight(s);
            assert!(w >= fusion_weight(-1.0) && w <= fusion_weight(1.0));
        }
        assert!(fusion_weight(-1.0) > 0.268 && fusion_weight(1.0) < 0.732);
    }

    #[test]
    fn fuse_equal_inputs_is_mlp_exactly() {
        let c = cfg();
        let params = ModelParams::init(&c, 5).unwrap();
        let f = rand_map(4, 3, 3, 11);
        for w in [0.1, 0.5, 0.9] {
            let fused = fuse(&f, &f, w, &params, &c, 0).unwrap();
            let mlp = mlp_reference(&f, &params, &c, 0);
            assert_eq!(fused, mlp, "fuse must collapse exactly for equal inputs at w={w}");
        }
    }

    #[test]
    fn fuse_limit_w_to_one_approaches_mlp_f1() {
        let c = cfg();
        let params = ModelParams::init(&c, 5).unwrap();
        let f1 = rand_map(4, 3, 3, 12);
        let f2 = rand_map(4, 3, 3, 13);
        let fused = fuse(&f1, &f2, 1.0, &params, &c, 0).unwrap();
        let mlp1 = mlp_reference(&f1, &params, &c, 0);
        for (a, b) in fused.iter().zip(mlp1.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_matches_naive_per_pixel_oracle() {
        let c = cfg();
        let params = ModelParams::init(&c, 6).unwrap();
        let f1 = rand_map(4, 5, 4, 21);
        let f2 = rand_map(4, 5, 4, 22);
        let w = 0.37;
        let fused = fuse(&f1, &f2, w, &params, &c, 0).unwrap();
        let m1 = mlp_reference(&f1, &params, &c, 0);
        let m2 = mlp_reference(&f2, &params, &c, 0);
        for idx in 0..fused.len() {
            let expect = w * m1.as_slice().unwrap()[idx] + (1.0 - w) * m2.as_slice().unwrap()[idx];
            assert!((fused.as_slice().unwrap()[idx] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn residual_delta_cases() {
        let f1 = rand_map(4, 3, 3, 31);
        let f2 = rand_map(4, 3, 3, 32);
        let zero = residual_delta(&f1, &f1, 0.3).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let s1 = residual_delta(&f1, &f2, 1.0).unwrap();
        assert!(s1.iter().all(|&v| v == 0.0));
        let s0 = residual_delta(&f1, &f2, 0.0).unwrap();
        for (d, (a, b)) in s0.iter().zip(f1.iter().zip(f2.iter())) {
            assert_eq!(*d, b - a);
        }
    }

    #[test]
    fn dfe_forward_identical_pyramids_collapse_to_mlp() {
        let c = cfg();
        let params = ModelParams::init(&c, 7).unwrap();
        let pyr = FeaturePyramid { levels: vec![rand_map(4, 8, 8, 41), rand_map(6, 4, 4, 42)] };
        let (out, stats) = dfe_forward(&pyr, &pyr, &params, &c).unwrap();
        for (i, adj) in out.adjusted.iter().enumerate() {
            let mlp = mlp_reference(&pyr.levels[i], &params, &c, i);
            assert_eq!(*adj, mlp, "scale {i} did not collapse to MLP");
        }
        for s in &stats {
            assert!((s.similarity - 1.0).abs() < 1e-12);
            assert_eq!(s.weight, fusion_weight(s.similarity));
        }
    }

    #[test]
    fn adjusted_equals_fused_plus_delta_elementwise() {
        let c = cfg();
        let params = ModelParams::init(&c, 8).unwrap();
        let p1 = FeaturePyramid { levels: vec![rand_map(4, 8, 8, 51), rand_map(6, 4, 4, 52)] };
        let p2 = FeaturePyramid { levels: vec![rand_map(4, 8, 8, 53), rand_map(6, 4, 4, 54)] };
        let (out, stats) = dfe_forward(&p1, &p2, &params, &c).unwrap();
        for i in 0..2 {
            for idx in 0..out.adjusted[i].len() {
                let a = out.adjusted[i].as_slice().unwrap()[idx];
                let f = out.fused[i].as_slice().unwrap()[idx];
                let d = out.delta[i].as_slice().unwrap()[idx];
                assert_eq!(a, f + d);
            }
            let w = stats[i].weight;
            assert!(w > fusion_weight(-1.0) - 1e-15 && w < fusion_weight(1.0) + 1e-15);
        }
    }

    #[test]
    fn swap_symmetry() {
        let c = cfg();
        let params = ModelParams::init(&c, 9).unwrap();
        let p1 = FeaturePyramid { levels: vec![rand_map(4, 8, 8, 61), rand_map(6, 4, 4, 62)] };
        let p2 = FeaturePyramid { levels: vec![rand_map(4, 8, 8, 63), rand_map(6, 4, 4, 64)] };
        let (fwd, sf) = dfe_forward(&p1, &p2, &params, &c).unwrap();
        let (rev, sr) = dfe_forward(&p2, &p1, &params, &c).unwrap();
        for i in 0..2 {
            assert!((sf[i].similarity - sr[i].similarity).abs() < 1e-12);
            for (a, b) in fwd.delta[i].iter().zip(rev.delta[i].iter()) {
                assert!((a + b).abs() < 1e-10, "delta must flip sign under swap");
            }
        }
    }

    #[test]
    fn level_count_mismatch_rejected() {
        let c = cfg();
        let params = ModelParams::init(&c, 10).unwrap();
        let p1 = FeaturePyramid { levels: vec![rand_map(4, 8, 8, 71), rand_map(6, 4, 4, 72)] };
        let p2 = FeaturePyramid { levels: vec![rand_map(4, 8, 8, 73)] };
        assert!(dfe_forward(&p1, &p2, &params, &c).is_err());
    }
}

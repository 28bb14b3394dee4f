//! Weak and strong augmentation pools plus feature-level complementary
//! dropout.
//!
//! Weak augmentation is geometric (random resize, crop with zero padding,
//! horizontal flip) and records its transform so labels, pseudo-labels, and
//! prompt coordinates can be replayed through the same geometry with
//! nearest-neighbor semantics. Strong augmentation is photometric
//! (brightness/contrast/gamma jitter, grayscaling, Gaussian blur) plus
//! CutMix, and never moves pixels of the underlying weak view.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};

/// Weak (geometric) augmentation parameters.
#[derive(Debug, Clone)]
pub struct WeakAugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub crop_size: usize,
    pub flip_prob: f64,
}

impl Default for WeakAugmentConfig {
    fn default() -> Self {
        WeakAugmentConfig { scale_min: 0.5, scale_max: 2.0, crop_size: 64, flip_prob: 0.5 }
    }
}

/// Strong (photometric + CutMix) augmentation parameters.
#[derive(Debug, Clone)]
pub struct StrongAugmentConfig {
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub gamma: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub cutmix_prob: f64,
    pub cutmix_frac_min: f64,
    pub cutmix_frac_max: f64,
}

impl Default for StrongAugmentConfig {
    fn default() -> Self {
        StrongAugmentConfig {
            jitter_prob: 0.8,
            brightness: 0.15,
            contrast: 0.2,
            gamma: 0.2,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma_min: 0.3,
            blur_sigma_max: 1.2,
            cutmix_prob: 0.5,
            cutmix_frac_min: 0.25,
            cutmix_frac_max: 0.5,
        }
    }
}

/// The sampled geometry of one weak augmentation, replayable on labels and
/// coordinates.
#[derive(Debug, Clone)]
pub struct WeakTransform {
    orig: (usize, usize),
    resized: (usize, usize),
    pad_top: usize,
    pad_left: usize,
    crop_y: usize,
    crop_x: usize,
    crop_size: usize,
    flip: bool,
    pub scale: f64,
}

impl WeakTransform {
    pub fn sample<R: Rng>(rng: &mut R, dims: (usize, usize), cfg: &WeakAugmentConfig) -> Self {
        let (h, w) = dims;
        let scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
        let rh = ((h as f64 * scale).round() as usize).max(1);
        let rw = ((w as f64 * scale).round() as usize).max(1);
        let pad_h = cfg.crop_size.saturating_sub(rh);
        let pad_w = cfg.crop_size.saturating_sub(rw);
        let pad_top = pad_h / 2;
        let pad_left = pad_w / 2;
        let max_y = rh + pad_h - cfg.crop_size;
        let max_x = rw + pad_w - cfg.crop_size;
        let crop_y = if max_y > 0 { rng.random_range(0..=max_y) } else { 0 };
        let crop_x = if max_x > 0 { rng.random_range(0..=max_x) } else { 0 };
        let flip = rng.random_range(0.0..1.0) < cfg.flip_prob;
        WeakTransform {
            orig: dims,
            resized: (rh, rw),
            pad_top,
            pad_left,
            crop_y,
            crop_x,
            crop_size: cfg.crop_size,
            flip,
            scale,
        }
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (self.crop_size, self.crop_size)
    }

    /// Bilinear resample, zero padding, crop, flip.
    pub fn apply_image(&self, image: &Array2<f64>) -> Array2<f64> {
        let (h, w) = self.orig;
        let (rh, rw) = self.resized;
        let sy = rh as f64 / h as f64;
        let sx = rw as f64 / w as f64;
        let c = self.crop_size;
        Array2::from_shape_fn((c, c), |(oy, ox)| {
            let ox = if self.flip { c - 1 - ox } else { ox };
            let ry = oy as isize + self.crop_y as isize - self.pad_top as isize;
            let rx = ox as isize + self.crop_x as isize - self.pad_left as isize;
            if ry < 0 || rx < 0 || ry >= rh as isize || rx >= rw as isize {
                return 0.0;
            }
            let fy = ((ry as f64 + 0.5) / sy - 0.5).clamp(0.0, (h - 1) as f64);
            let fx = ((rx as f64 + 0.5) / sx - 0.5).clamp(0.0, (w - 1) as f64);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let ty = fy - y0 as f64;
            let tx = fx - x0 as f64;
            image[[y0, x0]] * (1.0 - ty) * (1.0 - tx)
                + image[[y0, x1]] * (1.0 - ty) * tx
                + image[[y1, x0]] * ty * (1.0 - tx)
                + image[[y1, x1]] * ty * tx
        })
    }

    /// Nearest-neighbor replay for integer label maps; padding is background.
    pub fn apply_labels(&self, labels: &Array2<u8>) -> Array2<u8> {
        let (h, w) = self.orig;
        let (rh, rw) = self.resized;
        let sy = rh as f64 / h as f64;
        let sx = rw as f64 / w as f64;
        let c = self.crop_size;
        Array2::from_shape_fn((c, c), |(oy, ox)| {
            let ox = if self.flip { c - 1 - ox } else { ox };
            let ry = oy as isize + self.crop_y as isize - self.pad_top as isize;
            let rx = ox as isize + self.crop_x as isize - self.pad_left as isize;
            if ry < 0 || rx < 0 || ry >= rh as isize || rx >= rw as isize {
                return 0;
            }
            let fy = ((ry as f64 + 0.5) / sy - 0.5).round().clamp(0.0, (h - 1) as f64) as usize;
            let fx = ((rx as f64 + 0.5) / sx - 0.5).round().clamp(0.0, (w - 1) as f64) as usize;
            labels[[fy, fx]]
        })
    }

    /// Maps an original-image point into (possibly out-of-range) crop
    /// coordinates, flip included.
    pub fn map_point_unclamped(&self, y: usize, x: usize) -> (isize, isize) {
        let (h, w) = self.orig;
        let (rh, rw) = self.resized;
        let sy = rh as f64 / h as f64;
        let sx = rw as f64 / w as f64;
        let ry = ((y as f64 + 0.5) * sy - 0.5).round() as isize;
        let rx = ((x as f64 + 0.5) * sx - 0.5).round() as isize;
        let cy = ry + self.pad_top as isize - self.crop_y as isize;
        let cx = rx + self.pad_left as isize - self.crop_x as isize;
        let cx = if self.flip { self.crop_size as isize - 1 - cx } else { cx };
        (cy, cx)
    }

    /// Maps an original-image point into crop coordinates; `None` when the
    /// point falls outside the crop.
    pub fn map_point(&self, y: usize, x: usize) -> Option<(usize, usize)> {
        let (cy, cx) = self.map_point_unclamped(y, x);
        if cy < 0 || cx < 0 || cy >= self.crop_size as isize || cx >= self.crop_size as isize {
            return None;
        }
        Some((cy as usize, cx as usize))
    }
}

/// Draws a weak transform and applies it. The transform is returned so the
/// caller can replay the identical geometry on labels and prompts.
pub fn weak_augment<R: Rng>(
    image: &Array2<f64>,
    rng: &mut R,
    cfg: &WeakAugmentConfig,
) -> (Array2<f64>, WeakTransform) {
    let t = WeakTransform::sample(rng, image.dim(), cfg);
    (t.apply_image(image), t)
}

pub fn flip_horizontal(image: &Array2<f64>) -> Array2<f64> {
    let (h, w) = image.dim();
    Array2::from_shape_fn((h, w), |(y, x)| image[[y, w - 1 - x]])
}

/// Channel mean; the identity on single-channel data.
pub fn grayscale(image: &Array2<f64>) -> Array2<f64> {
    image.clone()
}

/// Separable Gaussian blur with half-sample symmetric padding, which
/// preserves the global mean exactly for the symmetric normalized kernel.
pub fn gaussian_blur(image: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (2.5 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut total = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        total += v;
    }
    for v in &mut kernel {
        *v /= total;
    }
    let reflect = |mut i: isize, n: isize| -> usize {
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    let (h, w) = image.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + ki as isize - radius, w as isize);
                acc += kv * image[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + ki as isize - radius, h as isize);
                acc += kv * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Pastes the box region of `donor` into `image`. The returned mask is true
/// where pixels come from the donor; a zero-area box gives an all-source
/// mask.
pub fn cutmix(
    image: &Array2<f64>,
    donor: &Array2<f64>,
    box_: (usize, usize, usize, usize),
) -> Result<(Array2<f64>, Array2<bool>)> {
    if image.dim() != donor.dim() {
        return Err(Error::shape(format!(
            "cutmix donor dims {:?} do not match image dims {:?}",
            donor.dim(),
            image.dim()
        )));
    }
    let (y0, x0, bh, bw) = box_;
    let (h, w) = image.dim();
    if y0 + bh > h || x0 + bw > w {
        return Err(Error::invalid("cutmix box outside the image"));
    }
    let mut out = image.clone();
    let mut mask = Array2::from_elem((h, w), false);
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            out[[y, x]] = donor[[y, x]];
            mask[[y, x]] = true;
        }
    }
    Ok((out, mask))
}

/// Mixes two label maps with a CutMix provenance mask (true selects donor).
pub fn mix_labels(labels: &Array2<u8>, donor: &Array2<u8>, mask: &Array2<bool>) -> Array2<u8> {
    Array2::from_shape_fn(labels.dim(), |idx| if mask[idx] { donor[idx] } else { labels[idx] })
}

/// Photometric strong augmentation followed by optional CutMix with the
/// donor. Returns the augmented image and the CutMix provenance mask.
pub fn strong_augment<R: Rng>(
    image: &Array2<f64>,
    rng: &mut R,
    donor: Option<&Array2<f64>>,
    cfg: &StrongAugmentConfig,
) -> Result<(Array2<f64>, Array2<bool>)> {
    if let Some(d) = donor {
        if d.dim() != image.dim() {
            return Err(Error::shape("strong augment donor dims do not match image"));
        }
    }
    let mut out = image.clone();
    if rng.random_range(0.0..1.0) < cfg.jitter_prob {
        let b = rng.random_range(-cfg.brightness..=cfg.brightness);
        out.mapv_inplace(|v| v + b);
        let c = rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast);
        let mean = out.mean().unwrap_or(0.0);
        out.mapv_inplace(|v| (v - mean) * c + mean);
        let g = rng.random_range(1.0 - cfg.gamma..=1.0 + cfg.gamma);
        out.mapv_inplace(|v| v.clamp(0.0, 1.0).powf(g));
    }
    if rng.random_range(0.0..1.0) < cfg.grayscale_prob {
        out = grayscale(&out);
    }
    if rng.random_range(0.0..1.0) < cfg.blur_prob {
        let sigma = rng.random_range(cfg.blur_sigma_min..=cfg.blur_sigma_max);
        out = gaussian_blur(&out, sigma);
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));

    let (h, w) = out.dim();
    let mut mask = Array2::from_elem((h, w), false);
    if let Some(d) = donor {
        if rng.random_range(0.0..1.0) < cfg.cutmix_prob {
            let fh = rng.random_range(cfg.cutmix_frac_min..=cfg.cutmix_frac_max);
            let fw = rng.random_range(cfg.cutmix_frac_min..=cfg.cutmix_frac_max);
            let bh = ((h as f64 * fh).round() as usize).min(h);
            let bw = ((w as f64 * fw).round() as usize).min(w);
            let y0 = if h > bh { rng.random_range(0..=h - bh) } else { 0 };
            let x0 = if w > bw { rng.random_range(0..=w - bw) } else { 0 };
            let (mixed, m) = cutmix(&out, d, (y0, x0, bh, bw))?;
            out = mixed;
            mask = m;
        }
    }
    Ok((out, mask))
}

/// A weak view with its two strong views and their CutMix provenance masks.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub x_w: Array2<f64>,
    pub x_s1: Array2<f64>,
    pub x_s2: Array2<f64>,
    pub mix_masks: [Option<Array2<bool>>; 2],
}

/// Per-level channel scale factors for the two views: 0 for dropped
/// channels, `1/(1-p_view)` for survivors. The dropped sets are disjoint.
#[derive(Debug, Clone)]
pub struct DropoutMasks {
    pub view1: Vec<Array1<f64>>,
    pub view2: Vec<Array1<f64>>,
}

/// Samples disjoint dropped-channel sets for each pyramid level. With
/// `p = 0.5` the two sets partition the channels of every level.
pub fn sample_complementary_masks<R: Rng>(
    level_channels: &[usize],
    p: f64,
    rng: &mut R,
) -> Result<DropoutMasks> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0,1]")));
    }
    if p >= 1.0 {
        return Err(Error::invalid("dropout p = 1 would zero a view entirely"));
    }
    let mut view1 = Vec::new();
    let mut view2 = Vec::new();
    for &c in level_channels {
        if p == 0.0 {
            view1.push(Array1::ones(c));
            view2.push(Array1::ones(c));
            continue;
        }
        let want = (p * c as f64).round() as usize;
        let k1 = want.min(c.saturating_sub(1));
        let k2 = want.min(c - k1);
        let mut idx: Vec<usize> = (0..c).collect();
        idx.shuffle(rng);
        let mut m1 = Array1::zeros(c);
        let mut m2 = Array1::zeros(c);
        let s1 = 1.0 / (1.0 - k1 as f64 / c as f64);
        let s2 = 1.0 / (1.0 - k2 as f64 / c as f64);
        for (pos, &ch) in idx.iter().enumerate() {
            m1[ch] = if pos < k1 { 0.0 } else { s1 };
            m2[ch] = if pos >= k1 && pos < k1 + k2 { 0.0 } else { s2 };
        }
        view1.push(m1);
        view2.push(m2);
    }
    Ok(DropoutMasks { view1, view2 })
}

fn apply_channel_scales(level: &Array3<f64>, scales: &Array1<f64>) -> Array3<f64> {
    let (c, h, w) = level.dim();
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| level[[ci, y, x]] * scales[ci])
}

/// Complementary dropout over two feature pyramids: disjoint channel sets are
/// dropped per view and survivors are rescaled. `p = 0` returns both views
/// unchanged.
pub fn complementary_dropout<R: Rng>(
    pyr1: &FeaturePyramid,
    pyr2: &FeaturePyramid,
    p: f64,
    rng: &mut R,
) -> Result<(FeaturePyramid, FeaturePyramid)> {
    if pyr1.levels.len() != pyr2.levels.len() {
        return Err(Error::shape("pyramids have different level counts"));
    }
    for (a, b) in pyr1.levels.iter().zip(&pyr2.levels) {
        if a.dim() != b.dim() {
            return Err(Error::shape("pyramid level shapes differ"));
        }
    }
    if p == 0.0 {
        return Ok((pyr1.clone(), pyr2.clone()));
    }
    let channels: Vec<usize> = pyr1.levels.iter().map(|l| l.dim().0).collect();
    let masks = sample_complementary_masks(&channels, p, rng)?;
    let v1 = pyr1
        .levels
        .iter()
        .zip(&masks.view1)
        .map(|(l, m)| apply_channel_scales(l, m))
        .collect();
    let v2 = pyr2
        .levels
        .iter()
        .zip(&masks.view2)
        .map(|(l, m)| apply_channel_scales(l, m))
        .collect();
    Ok((FeaturePyramid { levels: v1 }, FeaturePyramid { levels: v2 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn flip_is_an_involution() {
        let img = image(9, 13, 1);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn scale_range_stays_within_bounds() {
        let cfg = WeakAugmentConfig { crop_size: 16, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for _ in 0..1000 {
            let t = WeakTransform::sample(&mut rng, (32, 32), &cfg);
            lo = lo.min(t.scale);
            hi = hi.max(t.scale);
        }
        assert!(lo >= 0.5 && hi <= 2.0, "scales [{lo}, {hi}] escape [0.5, 2.0]");
        assert!(lo < 0.6 && hi > 1.9, "draws should cover the range, got [{lo}, {hi}]");
    }

    #[test]
    fn unit_scale_no_flip_is_identity_up_to_crop() {
        let cfg = WeakAugmentConfig { scale_min: 1.0, scale_max: 1.0, crop_size: 16, flip_prob: 0.0 };
        let img = image(16, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, t) = weak_augment(&img, &mut rng, &cfg);
        assert_eq!(t.scale, 1.0);
        for y in 0..16 {
            for x in 0..16 {
                assert!((out[[y, x]] - img[[y, x]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn small_scale_pads_instead_of_failing() {
        let cfg = WeakAugmentConfig { scale_min: 0.5, scale_max: 0.5, crop_size: 32, flip_prob: 0.0 };
        let img = image(32, 32, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (out, _) = weak_augment(&img, &mut rng, &cfg);
        assert_eq!(out.dim(), (32, 32));
        // Padding ring must be zero.
        assert_eq!(out[[0, 0]], 0.0);
    }

    #[test]
    fn labels_follow_image_geometry() {
        let cfg = WeakAugmentConfig { scale_min: 0.8, scale_max: 1.6, crop_size: 24, flip_prob: 1.0 };
        let mut labels = Array2::<u8>::zeros((32, 32));
        for y in 10..20 {
            for x in 12..22 {
                labels[[y, x]] = 1;
            }
        }
        let img = labels.mapv(|l| l as f64 * 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = WeakTransform::sample(&mut rng, (32, 32), &cfg);
        let ti = t.apply_image(&img);
        let tl = t.apply_labels(&labels);
        // Lesion pixels in label space should coincide with bright pixels.
        let mut agree = 0;
        let mut total = 0;
        for y in 0..24 {
            for x in 0..24 {
                if tl[[y, x]] == 1 {
                    total += 1;
                    if ti[[y, x]] > 0.45 {
                        agree += 1;
                    }
                }
            }
        }
        assert!(total > 0);
        assert!(agree as f64 / total as f64 > 0.9);
    }

    #[test]
    fn map_point_lands_on_the_transformed_lesion() {
        let cfg = WeakAugmentConfig { scale_min: 0.7, scale_max: 1.8, crop_size: 24, flip_prob: 0.5 };
        let mut labels = Array2::<u8>::zeros((32, 32));
        labels[[15, 18]] = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..40 {
            let t = WeakTransform::sample(&mut rng, (32, 32), &cfg);
            let tl = t.apply_labels(&labels);
            if let Some((cy, cx)) = t.map_point(15, 18) {
                // The mapped point must land on or next to the transformed
                // pixel (rounding can shift by one).
                let mut found = false;
                for dy in -2isize..=2 {
                    for dx in -2isize..=2 {
                        let y = cy as isize + dy;
                        let x = cx as isize + dx;
                        if y >= 0 && x >= 0 && y < 24 && x < 24 && tl[[y as usize, x as usize]] == 1 {
                            found = true;
                        }
                    }
                }
                assert!(found || tl.iter().all(|&l| l == 0), "mapped point strayed from the lesion");
            }
        }
    }

    #[test]
    fn grayscale_is_idempotent() {
        let img = image(8, 8, 9);
        assert_eq!(grayscale(&grayscale(&img)), grayscale(&img));
    }

    #[test]
    fn blur_preserves_global_mean() {
        for seed in 0..5 {
            let img = image(17, 23, 100 + seed);
            let blurred = gaussian_blur(&img, 0.8 + seed as f64 * 0.2);
            let m0 = img.mean().unwrap();
            let m1 = blurred.mean().unwrap();
            assert!((m0 - m1).abs() < 1e-6, "mean drifted {m0} -> {m1}");
        }
    }

    #[test]
    fn cutmix_zero_area_box_is_all_source() {
        let img = image(8, 8, 10);
        let donor = image(8, 8, 11);
        let (out, mask) = cutmix(&img, &donor, (3, 3, 0, 0)).unwrap();
        assert_eq!(out, img);
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn cutmix_pixels_come_from_exactly_one_parent() {
        let img = Array2::from_elem((8, 8), 0.25);
        let donor = Array2::from_elem((8, 8), 0.75);
        let (out, mask) = cutmix(&img, &donor, (2, 3, 4, 2)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if mask[[y, x]] {
                    assert_eq!(out[[y, x]], 0.75);
                } else {
                    assert_eq!(out[[y, x]], 0.25);
                }
            }
        }
    }

    #[test]
    fn strong_augment_rejects_mismatched_donor() {
        let img = image(8, 8, 12);
        let donor = image(10, 8, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(strong_augment(&img, &mut rng, Some(&donor), &StrongAugmentConfig::default()).is_err());
    }

    #[test]
    fn strong_augment_is_deterministic_in_rng_state() {
        let img = image(16, 16, 14);
        let donor = image(16, 16, 15);
        let cfg = StrongAugmentConfig::default();
        let a = strong_augment(&img, &mut ChaCha8Rng::seed_from_u64(77), Some(&donor), &cfg).unwrap();
        let b = strong_augment(&img, &mut ChaCha8Rng::seed_from_u64(77), Some(&donor), &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn dropout_p_zero_is_identity() {
        let pyr = FeaturePyramid { levels: vec![Array3::from_elem((4, 4, 4), 1.5), Array3::from_elem((6, 2, 2), -0.5)] };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = complementary_dropout(&pyr, &pyr, 0.0, &mut rng).unwrap();
        for i in 0..2 {
            assert_eq!(a.levels[i], pyr.levels[i]);
            assert_eq!(b.levels[i], pyr.levels[i]);
        }
    }

    #[test]
    fn dropout_p_one_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_complementary_masks(&[8], 1.0, &mut rng).is_err());
    }

    #[test]
    fn dropped_channel_sets_are_disjoint_for_any_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
            for _ in 0..20 {
                let masks = sample_complementary_masks(&[16, 7], p, &mut rng).unwrap();
                for (m1, m2) in masks.view1.iter().zip(&masks.view2) {
                    for c in 0..m1.len() {
                        assert!(
                            m1[c] != 0.0 || m2[c] != 0.0,
                            "channel {c} dropped in both views at p={p}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn half_dropout_partitions_the_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let masks = sample_complementary_masks(&[64], 0.5, &mut rng).unwrap();
        let d1 = masks.view1[0].iter().filter(|&&v| v == 0.0).count();
        let d2 = masks.view2[0].iter().filter(|&&v| v == 0.0).count();
        assert_eq!(d1 + d2, 64);
        // Survivors are rescaled by 1/(1-p).
        for v in masks.view1[0].iter().chain(masks.view2[0].iter()) {
            assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-12);
        }
    }
}

//! Segmentation metrics: Dice, Jaccard, 95th-percentile Hausdorff distance,
//! and average surface distance.
//!
//! Overlap scores are percentages. Surface distances are Euclidean in voxel
//! units (spacing-aware) over the pooled directed distance sets of both
//! directions; the 95th percentile is computed by linear interpolation on the
//! sorted pooled multiset. Surfaces are border voxels: face adjacency for 3D
//! volumes, 8-connectivity in-slice for single-slice (2D) masks. Masks that
//! are both empty agree perfectly (Dice/Jaccard 100) and have undefined
//! distances; one-empty scores 0 with undefined distances.

use ndarray::Array3;
use serde::Serialize;

use crate::error::{Error, Result};

const INF: f64 = 1e20;

fn counts(pred: &Array3<u8>, truth: &Array3<u8>, class_id: u8) -> Result<(usize, usize, usize)> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape(format!(
            "mask dims {:?} vs {:?} differ",
            pred.dim(),
            truth.dim()
        )));
    }
    let mut p = 0;
    let mut t = 0;
    let mut both = 0;
    for (a, b) in pred.iter().zip(truth.iter()) {
        let ap = *a == class_id;
        let bt = *b == class_id;
        p += ap as usize;
        t += bt as usize;
        both += (ap && bt) as usize;
    }
    Ok((p, t, both))
}

/// Dice overlap percentage: `100 * 2|P n T| / (|P| + |T|)`.
pub fn dice(pred: &Array3<u8>, truth: &Array3<u8>, class_id: u8) -> Result<f64> {
    let (p, t, both) = counts(pred, truth, class_id)?;
    if p + t == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (p + t) as f64)
}

/// Jaccard percentage: `100 * |P n T| / |P u T|`.
pub fn jaccard(pred: &Array3<u8>, truth: &Array3<u8>, class_id: u8) -> Result<f64> {
    let (p, t, both) = counts(pred, truth, class_id)?;
    let union = p + t - both;
    if union == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * both as f64 / union as f64)
}

/// Border voxels of `class_id`. A voxel is on the surface when any
/// face-adjacent neighbor (or, for single-slice masks, any 8-neighbor in the
/// slice) is background or out of bounds.
pub fn surface_voxels(mask: &Array3<u8>, class_id: u8) -> Vec<(usize, usize, usize)> {
    let (s, h, w) = mask.dim();
    let neighbors_3d: &[(isize, isize, isize)] =
        &[(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
    let neighbors_2d: &[(isize, isize, isize)] = &[
        (0, -1, -1),
        (0, -1, 0),
        (0, -1, 1),
        (0, 0, -1),
        (0, 0, 1),
        (0, 1, -1),
        (0, 1, 0),
        (0, 1, 1),
    ];
    let neighbors = if s == 1 { neighbors_2d } else { neighbors_3d };
    let mut out = Vec::new();
    for z in 0..s {
        for y in 0..h {
            for x in 0..w {
                if mask[[z, y, x]] != class_id {
                    continue;
                }
                let mut border = false;
                for &(dz, dy, dx) in neighbors {
                    let nz = z as isize + dz;
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if nz < 0
                        || ny < 0
                        || nx < 0
                        || nz >= s as isize
                        || ny >= h as isize
                        || nx >= w as isize
                        || mask[[nz as usize, ny as usize, nx as usize]] != class_id
                    {
                        border = true;
                        break;
                    }
                }
                if border {
                    out.push((z, y, x));
                }
            }
        }
    }
    out
}

/// 1D squared-distance transform of a sampled function (Felzenszwalb &
/// Huttenlocher), with sample positions spaced `step` apart.
fn dt1d(f: &[f64], step: f64) -> Vec<f64> {
    let n = f.len();
    if n == 1 {
        return f.to_vec();
    }
    let x = |i: usize| i as f64 * step;
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * x(q) - 2.0 * x(p));
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] {
            // q dominates everything so far
            v[k] = q;
        } else {
            k += 1;
            v[k] = q;
        }
        z[k] = s.max(-INF);
        z[k + 1] = INF;
    }
    let mut out = vec![0.0; n];
    let mut j = 0usize;
    for q in 0..n {
        while z[j + 1] < x(q) {
            j += 1;
        }
        let p = v[j];
        let d = x(q) - x(p);
        out[q] = d * d + f[p];
    }
    out
}

/// Exact squared Euclidean distance field to the given feature voxels, with
/// anisotropic spacing.
fn distance_field(
    dims: (usize, usize, usize),
    features: &[(usize, usize, usize)],
    spacing: [f64; 3],
) -> Array3<f64> {
    let (s, h, w) = dims;
    let mut field = Array3::from_elem(dims, INF);
    for &(z, y, x) in features {
        field[[z, y, x]] = 0.0;
    }
    // Pass along x
    for z in 0..s {
        for y in 0..h {
            let line: Vec<f64> = (0..w).map(|x| field[[z, y, x]]).collect();
            for (x, v) in dt1d(&line, spacing[2]).into_iter().enumerate() {
                field[[z, y, x]] = v;
            }
        }
    }
    // Pass along y
    for z in 0..s {
        for x in 0..w {
            let line: Vec<f64> = (0..h).map(|y| field[[z, y, x]]).collect();
            for (y, v) in dt1d(&line, spacing[1]).into_iter().enumerate() {
                field[[z, y, x]] = v;
            }
        }
    }
    // Pass along z
    if s > 1 {
        for y in 0..h {
            for x in 0..w {
                let line: Vec<f64> = (0..s).map(|z| field[[z, y, x]]).collect();
                for (z, v) in dt1d(&line, spacing[0]).into_iter().enumerate() {
                    field[[z, y, x]] = v;
                }
            }
        }
    }
    field
}

/// Pooled surface-to-surface distances of both directions, or `None` when
/// either mask has no voxel of the class.
pub fn surface_distances(
    pred: &Array3<u8>,
    truth: &Array3<u8>,
    class_id: u8,
    spacing: [f64; 3],
) -> Result<Option<Vec<f64>>> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape("mask dims differ"));
    }
    let ps = surface_voxels(pred, class_id);
    let ts = surface_voxels(truth, class_id);
    if ps.is_empty() || ts.is_empty() {
        return Ok(None);
    }
    let to_t = distance_field(pred.dim(), &ts, spacing);
    let to_p = distance_field(pred.dim(), &ps, spacing);
    let mut pooled = Vec::with_capacity(ps.len() + ts.len());
    for &(z, y, x) in &ps {
        pooled.push(to_t[[z, y, x]].sqrt());
    }
    for &(z, y, x) in &ts {
        pooled.push(to_p[[z, y, x]].sqrt());
    }
    Ok(Some(pooled))
}

/// Linear-interpolation percentile of an unsorted sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let t = rank - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// 95th percentile of the pooled surface distances, in voxel units.
pub fn hd95(pred: &Array3<u8>, truth: &Array3<u8>, class_id: u8, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(surface_distances(pred, truth, class_id, spacing)?.map(|d| percentile(&d, 95.0)))
}

/// Mean of the pooled surface distances, in voxel units.
pub fn asd(pred: &Array3<u8>, truth: &Array3<u8>, class_id: u8, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(surface_distances(pred, truth, class_id, spacing)?
        .map(|d| d.iter().sum::<f64>() / d.len() as f64))
}

/// Scores for one class of one volume. `hd95`/`asd` are `None` when either
/// mask is empty for the class (undefined, excluded from means).
#[derive(Debug, Clone, Serialize)]
pub struct ClassScore {
    pub class_id: u8,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

/// Per-class breakdown for one volume, foreground classes only.
#[derive(Debug, Clone, Serialize)]
pub struct SegScore {
    pub per_class: Vec<ClassScore>,
}

impl SegScore {
    /// Mean foreground Dice of this volume.
    pub fn mean_dice(&self) -> f64 {
        let n = self.per_class.len().max(1);
        self.per_class.iter().map(|c| c.dice).sum::<f64>() / n as f64
    }
}

/// Evaluates every foreground class of one volume.
pub fn score_volume(
    pred: &Array3<u8>,
    truth: &Array3<u8>,
    num_classes: usize,
    spacing: [f64; 3],
) -> Result<SegScore> {
    let mut per_class = Vec::new();
    for class_id in 1..num_classes as u8 {
        per_class.push(ClassScore {
            class_id,
            dice: dice(pred, truth, class_id)?,
            jaccard: jaccard(pred, truth, class_id)?,
            hd95: hd95(pred, truth, class_id, spacing)?,
            asd: asd(pred, truth, class_id, spacing)?,
        });
    }
    Ok(SegScore { per_class })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const UNIT: [f64; 3] = [1.0, 1.0, 1.0];

    fn random_mask(dims: (usize, usize, usize), density: f64, seed: u64) -> Array3<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(dims, |_| if rng.random_range(0.0..1.0) < density { 1 } else { 0 })
    }

    #[test]
    fn identical_masks_score_perfectly() {
        let m = random_mask((3, 10, 10), 0.3, 1);
        assert_eq!(dice(&m, &m, 1).unwrap(), 100.0);
        assert_eq!(jaccard(&m, &m, 1).unwrap(), 100.0);
        assert_eq!(hd95(&m, &m, 1, UNIT).unwrap(), Some(0.0));
        assert_eq!(asd(&m, &m, 1, UNIT).unwrap(), Some(0.0));
    }

    #[test]
    fn disjoint_masks_score_zero_overlap() {
        let mut a = Array3::<u8>::zeros((2, 8, 8));
        let mut b = Array3::<u8>::zeros((2, 8, 8));
        a[[0, 1, 1]] = 1;
        b[[1, 6, 6]] = 1;
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        assert_eq!(jaccard(&a, &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice_from_set_counts() {
        // |P| = |T| = 4, |P n T| = 2 -> Dice 50
        let mut p = Array3::<u8>::zeros((1, 4, 4));
        let mut t = Array3::<u8>::zeros((1, 4, 4));
        for i in 0..4 {
            p[[0, 0, i]] = 1;
            t[[0, 0, i + (i >= 2) as usize * 0]] = 0; // keep shape; filled below
        }
        t.fill(0);
        t[[0, 0, 2]] = 1;
        t[[0, 0, 3]] = 1;
        t[[0, 1, 0]] = 1;
        t[[0, 1, 1]] = 1;
        assert_eq!(dice(&p, &t, 1).unwrap(), 50.0);
    }

    #[test]
    fn jaccard_from_set_counts() {
        // |P n T| = 2, |P u T| = 6 -> 33.33..
        let mut p = Array3::<u8>::zeros((1, 4, 4));
        let mut t = Array3::<u8>::zeros((1, 4, 4));
        for i in 0..4 {
            p[[0, 0, i]] = 1;
        }
        t[[0, 0, 0]] = 1;
        t[[0, 0, 1]] = 1;
        t[[0, 1, 0]] = 1;
        t[[0, 1, 1]] = 1;
        let j = jaccard(&p, &t, 1).unwrap();
        assert!((j - 100.0 * 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn both_empty_convention() {
        let a = Array3::<u8>::zeros((2, 6, 6));
        assert_eq!(dice(&a, &a, 1).unwrap(), 100.0);
        assert_eq!(jaccard(&a, &a, 1).unwrap(), 100.0);
        assert_eq!(hd95(&a, &a, 1, UNIT).unwrap(), None);
    }

    #[test]
    fn one_empty_is_zero_overlap_and_undefined_distance() {
        let a = Array3::<u8>::zeros((2, 6, 6));
        let mut b = Array3::<u8>::zeros((2, 6, 6));
        b[[0, 2, 2]] = 1;
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        assert_eq!(asd(&a, &b, 1, UNIT).unwrap(), None);
    }

    #[test]
    fn two_single_voxels_three_apart() {
        let mut a = Array3::<u8>::zeros((1, 8, 8));
        let mut b = Array3::<u8>::zeros((1, 8, 8));
        a[[0, 2, 2]] = 1;
        b[[0, 2, 5]] = 1;
        assert_eq!(hd95(&a, &b, 1, UNIT).unwrap(), Some(3.0));
        assert_eq!(asd(&a, &b, 1, UNIT).unwrap(), Some(3.0));
    }

    #[test]
    fn jaccard_dice_identity_on_random_pairs() {
        for seed in 0..50 {
            let p = random_mask((2, 9, 9), 0.35, seed);
            let t = random_mask((2, 9, 9), 0.35, seed + 1000);
            let d = dice(&p, &t, 1).unwrap() / 100.0;
            let j = jaccard(&p, &t, 1).unwrap() / 100.0;
            if d == 1.0 && j == 1.0 {
                continue;
            }
            assert!((j - d / (2.0 - d)).abs() < 1e-12, "J = D/(2-D) failed: d={d}, j={j}");
        }
    }

    #[test]
    fn symmetry_of_all_metrics() {
        let p = random_mask((3, 8, 8), 0.3, 7);
        let t = random_mask((3, 8, 8), 0.3, 8);
        assert_eq!(dice(&p, &t, 1).unwrap(), dice(&t, &p, 1).unwrap());
        assert_eq!(jaccard(&p, &t, 1).unwrap(), jaccard(&t, &p, 1).unwrap());
        let ab = hd95(&p, &t, 1, UNIT).unwrap();
        let ba = hd95(&t, &p, 1, UNIT).unwrap();
        match (ab, ba) {
            (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
            (a, b) => assert_eq!(a, b),
        }
    }

    #[test]
    fn adding_a_correct_voxel_never_decreases_dice() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let t = random_mask((2, 8, 8), 0.4, rng.random_range(0..10_000));
            let mut p = random_mask((2, 8, 8), 0.3, rng.random_range(0..10_000));
            let before = dice(&p, &t, 1).unwrap();
            // Find a truth voxel the prediction misses.
            let mut added = false;
            'outer: for z in 0..2 {
                for y in 0..8 {
                    for x in 0..8 {
                        if t[[z, y, x]] == 1 && p[[z, y, x]] != 1 {
                            p[[z, y, x]] = 1;
                            added = true;
                            break 'outer;
                        }
                    }
                }
            }
            if added {
                assert!(dice(&p, &t, 1).unwrap() >= before);
            }
        }
    }

    #[test]
    fn spacing_scales_distances() {
        let mut a = Array3::<u8>::zeros((1, 8, 8));
        let mut b = Array3::<u8>::zeros((1, 8, 8));
        a[[0, 2, 2]] = 1;
        b[[0, 2, 5]] = 1;
        let d = hd95(&a, &b, 1, [1.0, 1.0, 0.5]).unwrap().unwrap();
        assert!((d - 1.5).abs() < 1e-12);
    }
}

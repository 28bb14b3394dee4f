//! 3D volumes, masks, dataset splits, and frame-pair sampling.
//!
//! A volume is a stack of `S` 2D slices. Intensities live in `[0, 1]`,
//! labels are integer class ids below `num_classes`, class 0 is background.

mod io;
mod synth;

pub use io::{load_mask, load_volume, read_manifest, save_mask, save_volume, write_manifest, ManifestRecord};
pub use synth::{generate_synthetic_dataset, SynthConfig};

use ndarray::{Array3, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};

/// Stack of `S` intensity slices of shape `H x W`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    slices: Array3<f64>,
    voxel_spacing: [f64; 3],
}

impl Volume3D {
    /// Validates shape and intensity range. Requires `S >= 2`, `H, W >= 8`.
    pub fn new(slices: Array3<f64>, voxel_spacing: [f64; 3]) -> Result<Self> {
        let (s, h, w) = slices.dim();
        if s < 2 {
            return Err(Error::invalid(format!("volume needs at least 2 slices, got {s}")));
        }
        if h < 8 || w < 8 {
            return Err(Error::invalid(format!("slice dims must be >= 8, got {h}x{w}")));
        }
        if let Some(v) = slices.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("intensity {v} outside [0,1]")));
        }
        if voxel_spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::invalid("voxel spacing must be positive and finite"));
        }
        Ok(Volume3D { slices, voxel_spacing })
    }

    pub fn with_unit_spacing(slices: Array3<f64>) -> Result<Self> {
        Self::new(slices, [1.0; 3])
    }

    pub fn slices(&self) -> &Array3<f64> {
        &self.slices
    }

    pub fn slice(&self, index: usize) -> ArrayView2<'_, f64> {
        self.slices.index_axis(ndarray::Axis(0), index)
    }

    pub fn voxel_spacing(&self) -> [f64; 3] {
        self.voxel_spacing
    }

    /// `(S, H, W)`
    pub fn dims(&self) -> (usize, usize, usize) {
        self.slices.dim()
    }

    pub fn num_slices(&self) -> usize {
        self.slices.dim().0
    }
}

/// Per-voxel integer class labels matching a [`Volume3D`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    labels: Array3<u8>,
    num_classes: usize,
}

impl MaskVolume {
    pub fn new(labels: Array3<u8>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!(
                "num_classes must be >= 2 (class 0 is background), got {num_classes}"
            )));
        }
        if num_classes > u8::MAX as usize + 1 {
            return Err(Error::invalid(format!("num_classes {num_classes} exceeds label dtype")));
        }
        if let Some(l) = labels.iter().find(|l| **l as usize >= num_classes) {
            return Err(Error::invalid(format!("label {l} >= num_classes {num_classes}")));
        }
        Ok(MaskVolume { labels, num_classes })
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn slice(&self, index: usize) -> ArrayView2<'_, u8> {
        self.labels.index_axis(ndarray::Axis(0), index)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    /// True when the slice at `index` has any non-background voxel.
    pub fn slice_has_target(&self, index: usize) -> bool {
        self.slice(index).iter().any(|&l| l != 0)
    }

    pub fn matches_volume(&self, volume: &Volume3D) -> bool {
        self.labels.dim() == volume.slices.dim()
    }
}

/// One labeled training case.
#[derive(Debug, Clone)]
pub struct LabeledCase {
    pub id: u32,
    pub volume: Volume3D,
    pub mask: MaskVolume,
}

/// One unlabeled training case (the mask is never materialized).
#[derive(Debug, Clone)]
pub struct UnlabeledCase {
    pub id: u32,
    pub volume: Volume3D,
}

/// Disjoint labeled/unlabeled pools plus the default batch sizes.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub labeled: Vec<LabeledCase>,
    pub unlabeled: Vec<UnlabeledCase>,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        if self.labeled.is_empty() {
            return Err(Error::data("dataset has no labeled volumes"));
        }
        if self.batch_labeled < 1 || self.batch_unlabeled < 1 {
            return Err(Error::invalid("batch sizes must be >= 1"));
        }
        let mut ids: Vec<u32> = self
            .labeled
            .iter()
            .map(|c| c.id)
            .chain(self.unlabeled.iter().map(|c| c.id))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.labeled.len() + self.unlabeled.len() {
            return Err(Error::data("labeled and unlabeled ids are not disjoint"));
        }
        Ok(())
    }
}

/// Picks a random pair of consecutive slices `(t, t+1)` that both contain a
/// non-background label. Fails with a "no target pair" error when the mask
/// has no qualifying pair.
pub fn extract_frame_pair<R: Rng>(mask: &MaskVolume, rng: &mut R) -> Result<(usize, usize)> {
    let pairs = qualifying_frame_pairs(mask);
    if pairs.is_empty() {
        return Err(Error::data("no target pair: mask has no two consecutive slices with targets"));
    }
    let pick = pairs[rng.random_range(0..pairs.len())];
    Ok(pick)
}

/// All `(t, t+1)` pairs where both slices contain a target class.
pub fn qualifying_frame_pairs(mask: &MaskVolume) -> Vec<(usize, usize)> {
    let s = mask.dims().0;
    let has: Vec<bool> = (0..s).map(|i| mask.slice_has_target(i)).collect();
    (0..s.saturating_sub(1))
        .filter(|&t| has[t] && has[t + 1])
        .map(|t| (t, t + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask_with_lesion_on(slices: &[usize], s: usize) -> MaskVolume {
        let mut labels = Array3::<u8>::zeros((s, 8, 8));
        for &i in slices {
            labels[[i, 4, 4]] = 1;
        }
        MaskVolume::new(labels, 2).unwrap()
    }

    #[test]
    fn volume_rejects_out_of_range_intensity() {
        let mut a = Array3::<f64>::zeros((2, 8, 8));
        a[[0, 0, 0]] = 1.5;
        assert!(Volume3D::with_unit_spacing(a).is_err());
    }

    #[test]
    fn volume_rejects_single_slice() {
        let a = Array3::<f64>::zeros((1, 8, 8));
        assert!(Volume3D::with_unit_spacing(a).is_err());
    }

    #[test]
    fn mask_rejects_label_at_num_classes() {
        let mut labels = Array3::<u8>::zeros((2, 8, 8));
        labels[[0, 0, 0]] = 2;
        assert!(MaskVolume::new(labels, 2).is_err());
    }

    #[test]
    fn mask_rejects_background_only_class_count() {
        let labels = Array3::<u8>::zeros((2, 8, 8));
        assert!(MaskVolume::new(labels, 1).is_err());
    }

    #[test]
    fn frame_pair_on_lesion_3_to_6() {
        let mask = mask_with_lesion_on(&[3, 4, 5, 6], 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (t, u) = extract_frame_pair(&mask, &mut rng).unwrap();
            assert_eq!(u, t + 1);
            assert!(matches!(t, 3 | 4 | 5), "pair start {t} outside lesion");
        }
    }

    #[test]
    fn frame_pair_fails_on_background_only_mask() {
        let mask = MaskVolume::new(Array3::<u8>::zeros((4, 8, 8)), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = extract_frame_pair(&mask, &mut rng).unwrap_err();
        assert!(err.to_string().contains("no target pair"));
    }

    #[test]
    fn seeded_draws_cover_every_qualifying_pair() {
        // Enumerate the qualifying pairs directly, then check the sampler
        // reaches all of them.
        let mask = mask_with_lesion_on(&[2, 3, 4, 5, 6, 7], 12);
        let expected = qualifying_frame_pairs(&mask);
        assert_eq!(expected, vec![(2, 3), (3, 4), (4, 5), (5, 6), (6, 7)]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            seen.insert(extract_frame_pair(&mask, &mut rng).unwrap());
        }
        for p in &expected {
            assert!(seen.contains(p), "pair {p:?} never drawn in 1000 tries");
        }
        assert_eq!(seen.len(), expected.len());
    }

    #[test]
    fn disjoint_id_check() {
        let vol = || {
            Volume3D::with_unit_spacing(Array3::from_elem((2, 8, 8), 0.5)).unwrap()
        };
        let mask = || MaskVolume::new(Array3::zeros((2, 8, 8)), 2).unwrap();
        let split = DatasetSplit {
            labeled: vec![LabeledCase { id: 0, volume: vol(), mask: mask() }],
            unlabeled: vec![UnlabeledCase { id: 0, volume: vol() }],
            batch_labeled: 1,
            batch_unlabeled: 1,
        };
        assert!(split.validate().is_err());
    }
}

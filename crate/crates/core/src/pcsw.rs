//! Prompt generation with physical constraints and a sliding window.
//!
//! Pseudo-mask volumes are scanned with windows of consecutive slices. A
//! window is adopted when, for every foreground class it contains, the class
//! mass is concentrated in a single 8-connected in-slice component
//! (connectivity ratio >= tau) and the set of classes present is identical
//! across consecutive slices. Prompts (centroid points and bounding boxes)
//! are extracted from the first valid window only.

use std::collections::BTreeSet;

use ndarray::{Array3, Array4, ArrayView2, Axis};
use serde::Serialize;

use crate::backbone::{BackboneConfig, ModelParams};
use crate::error::{Error, Result};

/// Per-slice class-probability maps plus their hard argmax labels.
///
/// `probs` is laid out `(S, K, H, W)`; every pixel's probabilities sum to 1.
#[derive(Debug, Clone)]
pub struct PseudoMaskVolume {
    probs: Array4<f64>,
    hard: Array3<u8>,
}

impl PseudoMaskVolume {
    /// Builds the volume from probability maps, deriving hard labels by
    /// per-pixel argmax (ties break to the lowest class index).
    pub fn from_probs(probs: Array4<f64>) -> Result<Self> {
        let (s, k, h, w) = probs.dim();
        if k < 2 {
            return Err(Error::invalid("pseudo-mask volume needs >= 2 classes"));
        }
        if k > u8::MAX as usize + 1 {
            return Err(Error::invalid("class count exceeds label dtype"));
        }
        let mut hard = Array3::<u8>::zeros((s, h, w));
        for si in 0..s {
            for y in 0..h {
                for x in 0..w {
                    let mut sum = 0.0;
                    let mut best = 0usize;
                    let mut best_p = f64::NEG_INFINITY;
                    for c in 0..k {
                        let p = probs[[si, c, y, x]];
                        if !p.is_finite() {
                            return Err(Error::Numeric(format!(
                                "non-finite probability at slice {si}, pixel ({y},{x})"
                            )));
                        }
                        sum += p;
                        if p > best_p {
                            best_p = p;
                            best = c;
                        }
                    }
                    if (sum - 1.0).abs() > 1e-6 {
                        return Err(Error::invalid(format!(
                            "probabilities at slice {si}, pixel ({y},{x}) sum to {sum}"
                        )));
                    }
                    hard[[si, y, x]] = best as u8;
                }
            }
        }
        Ok(PseudoMaskVolume { probs, hard })
    }

    pub fn probs(&self) -> &Array4<f64> {
        &self.probs
    }

    pub fn hard(&self) -> &Array3<u8> {
        &self.hard
    }

    pub fn num_classes(&self) -> usize {
        self.probs.dim().1
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.hard.dim()
    }
}

/// Runs the pseudo-mask conv head on every slice of a volume.
///
/// The gradient never flows through this path: it is plain inference on the
/// given parameters.
pub fn predict_pseudo_masks(
    volume_slices: &Array3<f64>,
    params: &ModelParams,
    cfg: &BackboneConfig,
    num_classes: usize,
) -> Result<PseudoMaskVolume> {
    if num_classes != cfg.num_classes {
        return Err(Error::shape(format!(
            "dataset has {num_classes} classes but the conv head emits {}",
            cfg.num_classes
        )));
    }
    let (s, h, w) = volume_slices.dim();
    let mut probs = Array4::<f64>::zeros((s, num_classes, h, w));
    for si in 0..s {
        let image = volume_slices.index_axis(Axis(0), si).to_owned();
        let logits = crate::backbone::head_logits(&image, params, cfg)?;
        for y in 0..h {
            for x in 0..w {
                let mut mx = f64::NEG_INFINITY;
                for c in 0..num_classes {
                    mx = mx.max(logits[[c, y, x]]);
                }
                let mut z = 0.0;
                for c in 0..num_classes {
                    z += (logits[[c, y, x]] - mx).exp();
                }
                for c in 0..num_classes {
                    probs[[si, c, y, x]] = (logits[[c, y, x]] - mx).exp() / z;
                }
            }
        }
    }
    PseudoMaskVolume::from_probs(probs)
}

/// How the integer window-length band is derived from the slice count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WindowBand {
    /// `[ceil(S/3), floor(S/2)]` -- the default; non-empty for every `S >= 3`.
    Closed,
    /// Strictly inside `(S/3, S/2)`; empty for short volumes.
    Open,
}

/// All `(start, len)` windows for a volume of `s` slices, ordered by
/// increasing length, then increasing start. Starts are 0-based.
pub fn enumerate_windows(s: usize, band: WindowBand) -> Result<Vec<(usize, usize)>> {
    if s < 3 {
        return Err(Error::data(format!("volume too short for window analysis: {s} slices")));
    }
    let (lo, hi) = match band {
        WindowBand::Closed => (s.div_ceil(3), s / 2),
        WindowBand::Open => {
            let lo = s / 3 + 1;
            let hi = s.div_ceil(2).saturating_sub(1);
            (lo, hi)
        }
    };
    if lo > hi || lo == 0 {
        return Err(Error::data(format!(
            "volume too short: window band empty for {s} slices"
        )));
    }
    let mut out = Vec::new();
    for n in lo..=hi {
        for i in 0..=(s - n) {
            out.push((i, n));
        }
    }
    Ok(out)
}

const NEIGHBORS_8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// One 8-connected component of a single class on one slice.
#[derive(Debug, Clone)]
pub struct Component {
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    pub fn size(&self) -> usize {
        self.pixels.len()
    }

    /// Integer centroid snapped to the nearest pixel of the component, so the
    /// point is guaranteed to lie inside it.
    pub fn interior_centroid(&self) -> (usize, usize) {
        let n = self.pixels.len() as f64;
        let cy = self.pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let cx = self.pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        let mut best = self.pixels[0];
        let mut best_d = f64::INFINITY;
        for &(y, x) in &self.pixels {
            let d = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            if d < best_d {
                best_d = d;
                best = (y, x);
            }
        }
        best
    }

    /// Tight bounding box `(y0, x0, y1, x1)`, inclusive.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        let mut y0 = usize::MAX;
        let mut x0 = usize::MAX;
        let mut y1 = 0;
        let mut x1 = 0;
        for &(y, x) in &self.pixels {
            y0 = y0.min(y);
            x0 = x0.min(x);
            y1 = y1.max(y);
            x1 = x1.max(x);
        }
        (y0, x0, y1, x1)
    }
}

/// 8-connected components of `class_id` on one slice, largest first.
///
/// Iterative depth-first search with an explicit stack; recursion depth on a
/// grid is otherwise unbounded.
pub fn connected_components(slice: ArrayView2<'_, u8>, class_id: u8) -> Vec<Component> {
    let (h, w) = slice.dim();
    let mut visited = vec![false; h * w];
    let mut out: Vec<Component> = Vec::new();
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if visited[y * w + x] || slice[[y, x]] != class_id {
                continue;
            }
            let mut pixels = Vec::new();
            visited[y * w + x] = true;
            stack.push((y, x));
            while let Some((py, px)) = stack.pop() {
                pixels.push((py, px));
                for (dy, dx) in NEIGHBORS_8 {
                    let ny = py as isize + dy;
                    let nx = px as isize + dx;
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if !visited[ny * w + nx] && slice[[ny, nx]] == class_id {
                        visited[ny * w + nx] = true;
                        stack.push((ny, nx));
                    }
                }
            }
            out.push(Component { pixels });
        }
    }
    out.sort_by(|a, b| b.size().cmp(&a.size()));
    out
}

/// Component sizes of `class_id` on one slice, sorted descending.
pub fn connected_component_sizes(slice: ArrayView2<'_, u8>, class_id: u8) -> Vec<usize> {
    connected_components(slice, class_id).iter().map(|c| c.size()).collect()
}

/// Per-slice connectivity statistics shared by all windows of one volume.
#[derive(Debug, Clone)]
struct SliceStats {
    present: BTreeSet<u8>,
    /// class -> descending component sizes on this slice
    sizes: Vec<(u8, Vec<usize>)>,
}

fn analyze_slices(labels: &Array3<u8>) -> Vec<SliceStats> {
    let s = labels.dim().0;
    (0..s)
        .map(|si| {
            let slice = labels.index_axis(Axis(0), si);
            let present: BTreeSet<u8> = slice.iter().copied().filter(|&l| l != 0).collect();
            let sizes = present
                .iter()
                .map(|&c| (c, connected_component_sizes(slice, c)))
                .collect();
            SliceStats { present, sizes }
        })
        .collect()
}

/// Whether ratios pool all foreground classes or score each class separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RatioMode {
    PerClass,
    UnionForeground,
}

/// One window of consecutive slices with its validation statistics.
#[derive(Debug, Clone, Serialize)]
pub struct WindowCandidate {
    /// 0-based index of the first slice.
    pub start: usize,
    pub len: usize,
    /// class -> per-slice descending component-size lists
    pub per_slice_sizes: Vec<(u8, Vec<Vec<usize>>)>,
    /// class -> connectivity ratio (largest single component across the
    /// window over the total class mass in the window)
    pub ratios: Vec<(u8, f64)>,
    /// foreground classes present, per slice in the window
    pub class_sets: Vec<BTreeSet<u8>>,
}

impl WindowCandidate {
    /// Exclusive end slice index.
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains_slice(&self, t: usize) -> bool {
        t >= self.start && t < self.end()
    }

    /// A window is valid when it contains at least one foreground class, the
    /// class set is identical across all consecutive slice pairs, and every
    /// scored class reaches the threshold.
    pub fn is_valid(&self, tau: f64) -> bool {
        if self.ratios.is_empty() {
            return false;
        }
        for pair in self.class_sets.windows(2) {
            if pair[0] != pair[1] {
                return false;
            }
        }
        self.ratios.iter().all(|(_, r)| *r >= tau)
    }
}

fn window_candidate(
    stats: &[SliceStats],
    union_stats: Option<&[SliceStats]>,
    start: usize,
    len: usize,
) -> WindowCandidate {
    let scored = union_stats.unwrap_or(stats);
    let mut classes: BTreeSet<u8> = BTreeSet::new();
    for st in &scored[start..start + len] {
        classes.extend(st.present.iter().copied());
    }
    let mut per_slice_sizes = Vec::new();
    let mut ratios = Vec::new();
    for &c in &classes {
        let lists: Vec<Vec<usize>> = scored[start..start + len]
            .iter()
            .map(|st| {
                st.sizes
                    .iter()
                    .find(|(cc, _)| *cc == c)
                    .map(|(_, v)| v.clone())
                    .unwrap_or_default()
            })
            .collect();
        let max_comp = lists.iter().filter_map(|l| l.first().copied()).max().unwrap_or(0);
        let total: usize = lists.iter().map(|l| l.iter().sum::<usize>()).sum();
        if total > 0 {
            ratios.push((c, max_comp as f64 / total as f64));
        }
        per_slice_sizes.push((c, lists));
    }
    let class_sets = stats[start..start + len].iter().map(|st| st.present.clone()).collect();
    WindowCandidate { start, len, per_slice_sizes, ratios, class_sets }
}

/// Connectivity ratio of one class over the window `[start, start+len)`.
///
/// Returns `None` when the class has no pixel inside the window.
pub fn connectivity_ratio(labels: &Array3<u8>, start: usize, len: usize, class_id: u8) -> Option<f64> {
    let mut max_comp = 0usize;
    let mut total = 0usize;
    for si in start..start + len {
        let sizes = connected_component_sizes(labels.index_axis(Axis(0), si), class_id);
        max_comp = max_comp.max(sizes.first().copied().unwrap_or(0));
        total += sizes.iter().sum::<usize>();
    }
    if total == 0 {
        None
    } else {
        Some(max_comp as f64 / total as f64)
    }
}

/// Options for window selection.
#[derive(Debug, Clone, Copy)]
pub struct SelectOptions {
    pub band: WindowBand,
    pub ratio_mode: RatioMode,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions { band: WindowBand::Closed, ratio_mode: RatioMode::PerClass }
    }
}

fn union_labels(labels: &Array3<u8>) -> Array3<u8> {
    labels.mapv(|l| if l != 0 { 1 } else { 0 })
}

/// Evaluates every window of the volume in enumeration order.
pub fn evaluate_windows(labels: &Array3<u8>, opts: SelectOptions) -> Result<Vec<WindowCandidate>> {
    let s = labels.dim().0;
    let windows = enumerate_windows(s, opts.band)?;
    let stats = analyze_slices(labels);
    let union;
    let union_stats: Option<&[SliceStats]> = match opts.ratio_mode {
        RatioMode::PerClass => None,
        RatioMode::UnionForeground => {
            union = analyze_slices(&union_labels(labels));
            Some(&union)
        }
    };
    Ok(windows
        .into_iter()
        .map(|(start, len)| window_candidate(&stats, union_stats, start, len))
        .collect())
}

/// The first valid window in enumeration order, or `None` when no window
/// qualifies. Absence is a normal outcome: the volume simply contributes no
/// prompt.
pub fn select_valid_window(
    labels: &Array3<u8>,
    tau: f64,
    opts: SelectOptions,
) -> Result<Option<WindowCandidate>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must be in [0,1], got {tau}")));
    }
    for cand in evaluate_windows(labels, opts)? {
        if cand.is_valid(tau) {
            return Ok(Some(cand));
        }
    }
    Ok(None)
}

/// A single point or box hint, in voxel coordinates of one slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Prompt {
    Point { class_id: u8, y: usize, x: usize, positive: bool },
    /// Inclusive corners.
    Box { class_id: u8, y0: usize, x0: usize, y1: usize, x1: usize },
}

impl Prompt {
    pub fn class_id(&self) -> u8 {
        match self {
            Prompt::Point { class_id, .. } | Prompt::Box { class_id, .. } => *class_id,
        }
    }
}

/// Prompts grouped by slice index.
#[derive(Debug, Clone, Default, Serialize)]
pub struct PromptSet {
    pub slices: Vec<(usize, Vec<Prompt>)>,
}

impl PromptSet {
    pub fn for_slice(&self, t: usize) -> &[Prompt] {
        self.slices
            .iter()
            .find(|(si, _)| *si == t)
            .map(|(_, p)| p.as_slice())
            .unwrap_or(&[])
    }

    pub fn is_empty(&self) -> bool {
        self.slices.iter().all(|(_, p)| p.is_empty())
    }
}

/// Largest-component prompts for one slice: per class present, a positive
/// point at the interior centroid plus the tight bounding box (point only
/// for 1-pixel components).
pub fn slice_prompts(slice: ArrayView2<'_, u8>) -> Vec<Prompt> {
    let present: BTreeSet<u8> = slice.iter().copied().filter(|&l| l != 0).collect();
    let mut prompts = Vec::new();
    for c in present {
        let comps = connected_components(slice, c);
        let Some(largest) = comps.first() else { continue };
        let (y, x) = largest.interior_centroid();
        prompts.push(Prompt::Point { class_id: c, y, x, positive: true });
        if largest.size() > 1 {
            let (y0, x0, y1, x1) = largest.bbox();
            prompts.push(Prompt::Box { class_id: c, y0, x0, y1, x1 });
        }
    }
    prompts
}

/// Extracts prompts from the validated window: per slice, per class, one
/// positive point at the largest component's interior centroid plus that
/// component's tight bounding box. A 1-pixel component yields the point only.
pub fn prompts_from_window(window: &WindowCandidate, labels: &Array3<u8>) -> PromptSet {
    let mut slices = Vec::new();
    for si in window.start..window.end() {
        slices.push((si, slice_prompts(labels.index_axis(Axis(0), si))));
    }
    PromptSet { slices }
}

/// Unvalidated prompt extraction: every slice, largest component per class,
/// no window analysis. This is the ablation path that feeds raw pseudo-mask
/// prompts straight through.
pub fn raw_prompts(labels: &Array3<u8>) -> PromptSet {
    let s = labels.dim().0;
    let mut slices = Vec::new();
    for si in 0..s {
        slices.push((si, slice_prompts(labels.index_axis(Axis(0), si))));
    }
    PromptSet { slices }
}

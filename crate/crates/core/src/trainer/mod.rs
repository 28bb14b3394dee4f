//! Semi-supervised training loop: weak/strong augmentation, teacher
//! pseudo-labels, complementary dropout, DFE, prompt injection, AdamW, and
//! the EMA teacher.
//!
//! Determinism contract: every stochastic choice in a step is drawn from a
//! stream keyed by `(run seed, step index, salt)`, so replaying a run from a
//! checkpointed state reproduces the remaining steps bit-identically.

mod losses;
mod optim;

pub use losses::{make_pseudo_labels, supervised_loss, unsupervised_loss, unsupervised_loss_mixed};
pub use optim::{adamw_step, ema_momentum, ema_update, lr_schedule, AdamWConfig, Moments};

use std::collections::HashMap;

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::{
    mix_labels, sample_complementary_masks, strong_augment, weak_augment, StrongAugmentConfig,
    WeakAugmentConfig, WeakTransform,
};
use crate::autodiff::{Graph, NodeId};
use crate::backbone::{self, BackboneConfig, ModelParams};
use crate::dfe::{self, ScaleStatsSummary};
use crate::error::{Error, Result};
use crate::pcsw::{self, Prompt, PromptSet, RatioMode, WindowBand};
use crate::volumes::{extract_frame_pair, DatasetSplit, Volume3D};

const SALT_AUGMENT: u64 = 0xA1;
const SALT_BATCH: u64 = 0xB2;

fn step_rng(seed: u64, step: u64, salt: u64) -> ChaCha8Rng {
    let mixed = seed
        ^ (step.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// How prompts are produced at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// Plain unprompted decoding.
    None,
    /// Unvalidated largest-component prompts from the pseudo-mask head.
    Raw,
    /// Window-validated prompts.
    Pcsw,
}

/// Full training configuration consumed by the loop.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub adamw: AdamWConfig,
    /// Labeled frame pairs per step (each pair contributes two slices).
    pub batch_labeled: usize,
    /// Unlabeled frame pairs per step.
    pub batch_unlabeled: usize,
    pub ema_max: f64,
    pub pseudo_from_teacher: bool,
    pub head_loss_weight: f64,
    pub supervised_only: bool,
    pub prompt_labeled: bool,
    pub dropout_p: f64,
    pub dfe_enabled: bool,
    pub checkpoint_interval: u64,
    pub weak: WeakAugmentConfig,
    pub strong: StrongAugmentConfig,
    pub pcsw_enabled: bool,
    pub tau: f64,
    pub refresh_interval: u64,
    pub band: WindowBand,
    pub ratio_mode: RatioMode,
    pub eval_prompt_mode: PromptMode,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            steps: 400,
            warmup_steps: 40,
            peak_lr: 1e-4,
            adamw: AdamWConfig::default(),
            batch_labeled: 2,
            batch_unlabeled: 2,
            ema_max: 0.999,
            pseudo_from_teacher: true,
            head_loss_weight: 1.0,
            supervised_only: false,
            prompt_labeled: true,
            dropout_p: 0.5,
            dfe_enabled: true,
            checkpoint_interval: 200,
            weak: WeakAugmentConfig::default(),
            strong: StrongAugmentConfig::default(),
            pcsw_enabled: true,
            tau: 0.8,
            refresh_interval: 50,
            band: WindowBand::Closed,
            ratio_mode: RatioMode::PerClass,
            eval_prompt_mode: PromptMode::Pcsw,
        }
    }
}

/// Student/teacher parameters, optimizer moments, step counter, and the run
/// seed: the full unit of deterministic replay.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub moments: Moments,
    pub step: u64,
    pub seed: u64,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(bb: &BackboneConfig, seed: u64) -> Result<Self> {
        let student = ModelParams::init(bb, seed)?;
        let teacher = student.clone();
        Ok(TrainState { student, teacher, moments: Moments::default(), step: 0, seed, loss_history: Vec::new() })
    }
}

/// Scalar losses of one step. `l_total` is computed as `l_sup + l_unsup` in
/// one addition, so the identity holds exactly.
#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_total: f64,
    pub sup_decoder: f64,
    pub sup_head: f64,
    pub unsup_view1: f64,
    pub unsup_view2: f64,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: LossReport,
    pub lr: f64,
    pub ema_momentum: f64,
    pub dfe: Vec<ScaleStatsSummary>,
    pub skipped: bool,
}

/// One labeled training sample: a raw slice and its labels.
#[derive(Debug, Clone)]
pub struct LabeledItem {
    pub image: Array2<f64>,
    pub labels: Array2<u8>,
}

/// One unlabeled training sample: a raw slice plus any cached prompts for it
/// (in raw-volume coordinates).
#[derive(Debug, Clone)]
pub struct UnlabeledItem {
    pub image: Array2<f64>,
    pub prompts: Vec<Prompt>,
}

fn map_prompts(prompts: &[Prompt], t: &WeakTransform) -> Vec<Prompt> {
    let (ch, cw) = t.output_dims();
    let mut out = Vec::new();
    for p in prompts {
        match *p {
            Prompt::Point { class_id, y, x, positive } => {
                if let Some((cy, cx)) = t.map_point(y, x) {
                    out.push(Prompt::Point { class_id, y: cy, x: cx, positive });
                }
            }
            Prompt::Box { class_id, y0, x0, y1, x1 } => {
                let corners = [
                    t.map_point_unclamped(y0, x0),
                    t.map_point_unclamped(y0, x1),
                    t.map_point_unclamped(y1, x0),
                    t.map_point_unclamped(y1, x1),
                ];
                let ys: Vec<isize> = corners.iter().map(|c| c.0).collect();
                let xs: Vec<isize> = corners.iter().map(|c| c.1).collect();
                let ny0 = (*ys.iter().min().unwrap()).max(0);
                let nx0 = (*xs.iter().min().unwrap()).max(0);
                let ny1 = (*ys.iter().max().unwrap()).min(ch as isize - 1);
                let nx1 = (*xs.iter().max().unwrap()).min(cw as isize - 1);
                if ny0 <= ny1 && nx0 <= nx1 {
                    out.push(Prompt::Box {
                        class_id,
                        y0: ny0 as usize,
                        x0: nx0 as usize,
                        y1: ny1 as usize,
                        x1: nx1 as usize,
                    });
                }
            }
        }
    }
    out
}

fn labels_to_usize(labels: &Array2<u8>) -> Array2<usize> {
    labels.mapv(|l| l as usize)
}

fn mask_node(g: &mut Graph, level: NodeId, scales: &ndarray::Array1<f64>) -> Result<NodeId> {
    let shape = g.value(level).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut m = ArrayD::zeros(IxDyn(&[c, h, w]));
    for ci in 0..c {
        let s = scales[ci];
        for y in 0..h {
            for x in 0..w {
                m[[ci, y, x]] = s;
            }
        }
    }
    let mc = g.constant(m);
    g.mul(level, mc)
}

fn mean_of(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    if terms.is_empty() {
        return Ok(g.scalar_constant(0.0));
    }
    let sum = g.add_n(terms)?;
    Ok(g.scalar_affine(sum, 0.0, 1.0 / terms.len() as f64))
}

/// Executes one optimization step in place. Rolls the state back (by not
/// applying anything) and reports `skipped` when a loss or gradient is
/// non-finite.
pub fn train_step(
    state: &mut TrainState,
    labeled: &[LabeledItem],
    unlabeled: &[UnlabeledItem],
    cfg: &TrainerConfig,
    bb: &BackboneConfig,
) -> Result<StepReport> {
    let mut rng = step_rng(state.seed, state.step, SALT_AUGMENT);

    // Weak views (geometry) for everything first.
    let labeled_aug: Vec<(Array2<f64>, Array2<u8>, Vec<Prompt>)> = labeled
        .iter()
        .map(|item| {
            let (img, t) = weak_augment(&item.image, &mut rng, &cfg.weak);
            let lab = t.apply_labels(&item.labels);
            let prompts = if cfg.prompt_labeled {
                pcsw::slice_prompts(lab.view())
            } else {
                Vec::new()
            };
            (img, lab, prompts)
        })
        .collect();

    let unlabeled_weak: Vec<(Array2<f64>, Vec<Prompt>)> = unlabeled
        .iter()
        .map(|item| {
            let (img, t) = weak_augment(&item.image, &mut rng, &cfg.weak);
            let prompts = map_prompts(&item.prompts, &t);
            (img, prompts)
        })
        .collect();

    // Strong views, CutMix donors taken from the next weak view in the batch.
    let n_u = unlabeled_weak.len();
    let mut strong_views: Vec<((Array2<f64>, Array2<bool>), (Array2<f64>, Array2<bool>))> =
        Vec::with_capacity(n_u);
    for i in 0..n_u {
        let donor_idx = (i + 1) % n_u;
        let donor = if n_u > 1 { Some(&unlabeled_weak[donor_idx].0) } else { None };
        let s1 = strong_augment(&unlabeled_weak[i].0, &mut rng, donor, &cfg.strong)?;
        let s2 = strong_augment(&unlabeled_weak[i].0, &mut rng, donor, &cfg.strong)?;
        strong_views.push((s1, s2));
    }

    // Pseudo-labels from the teacher (or the student, when configured) on the
    // weak views. Plain inference: no gradient flows through this path.
    let pseudo_src = if cfg.pseudo_from_teacher { &state.teacher } else { &state.student };
    let mut pseudo: Vec<Array2<u8>> = Vec::with_capacity(n_u);
    for (img, prompts) in &unlabeled_weak {
        let logits = backbone::decode_logits(img, prompts, pseudo_src, bb)?;
        pseudo.push(make_pseudo_labels(&logits));
    }

    // CutMix-consistent pseudo-labels per view.
    let mut pseudo_v1: Vec<Array2<u8>> = Vec::with_capacity(n_u);
    let mut pseudo_v2: Vec<Array2<u8>> = Vec::with_capacity(n_u);
    for i in 0..n_u {
        let donor_idx = (i + 1) % n_u;
        pseudo_v1.push(mix_labels(&pseudo[i], &pseudo[donor_idx], &strong_views[i].0 .1));
        pseudo_v2.push(mix_labels(&pseudo[i], &pseudo[donor_idx], &strong_views[i].1 .1));
    }

    // Student graph.
    let mut g = Graph::new();
    let mut sup_dec_terms = Vec::new();
    let mut sup_head_terms = Vec::new();
    for (img, lab, prompts) in &labeled_aug {
        let levels = backbone::encode_into(&mut g, img, &state.student, bb)?;
        let bias = backbone::prompt_bias_into(&mut g, prompts, img.dim(), &state.student, bb)?;
        let logits = backbone::decode_into(&mut g, &levels, bias, &state.student, bb)?;
        sup_dec_terms.push(g.softmax_ce_mean(logits, labels_to_usize(lab))?);
        let head = backbone::head_into(&mut g, levels[0], &state.student, bb)?;
        sup_head_terms.push(g.softmax_ce_mean(head, labels_to_usize(lab))?);
    }
    let sup_dec = mean_of(&mut g, &sup_dec_terms)?;
    let sup_head = mean_of(&mut g, &sup_head_terms)?;
    let sup_head_scaled = g.scalar_affine(sup_head, 0.0, cfg.head_loss_weight);
    let l_sup = g.add(sup_dec, sup_head_scaled)?;

    let mut unsup_v1_terms = Vec::new();
    let mut unsup_v2_terms = Vec::new();
    let mut dfe_acc: Vec<(f64, f64)> = vec![(0.0, 0.0); bb.levels()];
    for i in 0..n_u {
        let ((s1, _), (s2, _)) = &strong_views[i];
        let enc1 = backbone::encode_into(&mut g, s1, &state.student, bb)?;
        let enc2 = backbone::encode_into(&mut g, s2, &state.student, bb)?;
        let (drop1, drop2) = if cfg.dropout_p > 0.0 {
            let masks = sample_complementary_masks(&bb.level_channels, cfg.dropout_p, &mut rng)?;
            let mut d1 = Vec::new();
            let mut d2 = Vec::new();
            for (li, (&l1, &l2)) in enc1.iter().zip(&enc2).enumerate() {
                d1.push(mask_node(&mut g, l1, &masks.view1[li])?);
                d2.push(mask_node(&mut g, l2, &masks.view2[li])?);
            }
            (d1, d2)
        } else {
            (enc1, enc2)
        };
        let (v1_levels, v2_levels) = if cfg.dfe_enabled {
            let out = dfe::dfe_into(&mut g, &drop1, &drop2, &state.student, bb)?;
            for (li, s) in out.stats.iter().enumerate() {
                dfe_acc[li].0 += s.similarity;
                dfe_acc[li].1 += s.weight;
            }
            (
                out.scales.iter().map(|s| s.view1).collect::<Vec<_>>(),
                out.scales.iter().map(|s| s.view2).collect::<Vec<_>>(),
            )
        } else {
            (drop1, drop2)
        };
        let logits1 = backbone::decode_into(&mut g, &v1_levels, None, &state.student, bb)?;
        let logits2 = backbone::decode_into(&mut g, &v2_levels, None, &state.student, bb)?;
        unsup_v1_terms.push(g.softmax_ce_mean(logits1, labels_to_usize(&pseudo_v1[i]))?);
        unsup_v2_terms.push(g.softmax_ce_mean(logits2, labels_to_usize(&pseudo_v2[i]))?);
    }
    let unsup_v1 = mean_of(&mut g, &unsup_v1_terms)?;
    let unsup_v2 = mean_of(&mut g, &unsup_v2_terms)?;
    let unsup_sum = g.add(unsup_v1, unsup_v2)?;
    let l_unsup = g.scalar_affine(unsup_sum, 0.0, 0.5);
    let l_total = g.add(l_sup, l_unsup)?;

    let loss = LossReport {
        l_sup: g.scalar_value(l_sup),
        l_unsup: g.scalar_value(l_unsup),
        l_total: g.scalar_value(l_total),
        sup_decoder: g.scalar_value(sup_dec),
        sup_head: g.scalar_value(sup_head),
        unsup_view1: g.scalar_value(unsup_v1),
        unsup_view2: g.scalar_value(unsup_v2),
    };

    let lr = lr_schedule(state.step + 1, cfg.steps, cfg.warmup_steps, cfg.peak_lr);
    let momentum = ema_momentum(state.step, cfg.ema_max);
    let dfe_stats: Vec<ScaleStatsSummary> = if cfg.dfe_enabled && n_u > 0 {
        dfe_acc
            .iter()
            .map(|&(s, w)| ScaleStatsSummary { similarity: s / n_u as f64, weight: w / n_u as f64 })
            .collect()
    } else {
        Vec::new()
    };

    if !loss.l_total.is_finite() {
        return Ok(StepReport { loss, lr, ema_momentum: momentum, dfe: dfe_stats, skipped: true });
    }
    let grads = g.backward(l_total)?;
    if !grads.all_finite() {
        return Ok(StepReport { loss, lr, ema_momentum: momentum, dfe: dfe_stats, skipped: true });
    }

    adamw_step(&mut state.student, &mut state.moments, &grads, lr, state.step + 1, &cfg.adamw)?;
    ema_update(&mut state.teacher, &state.student, momentum)?;
    state.step += 1;
    state.loss_history.push(loss.l_total);

    Ok(StepReport { loss, lr, ema_momentum: momentum, dfe: dfe_stats, skipped: false })
}

/// Lazily refreshed per-volume prompt cache. Entries are recomputed with the
/// current teacher when older than the refresh interval.
#[derive(Debug, Default)]
pub struct PromptCache {
    entries: HashMap<u32, (u64, Option<PromptSet>, Option<(usize, usize)>)>,
}

impl PromptCache {
    #[allow(clippy::type_complexity)]
    fn get(
        &mut self,
        id: u32,
        volume: &Volume3D,
        state: &TrainState,
        cfg: &TrainerConfig,
        bb: &BackboneConfig,
        num_classes: usize,
    ) -> Result<(Option<PromptSet>, Option<(usize, usize)>)> {
        let stale = match self.entries.get(&id) {
            Some((at, _, _)) => state.step.saturating_sub(*at) >= cfg.refresh_interval,
            None => true,
        };
        if stale {
            let pm = pcsw::predict_pseudo_masks(volume.slices(), &state.teacher, bb, num_classes)?;
            let (prompts, window) = if cfg.pcsw_enabled {
                let opts = pcsw::SelectOptions { band: cfg.band, ratio_mode: cfg.ratio_mode };
                match pcsw::select_valid_window(pm.hard(), cfg.tau, opts)? {
                    Some(w) => {
                        let p = pcsw::prompts_from_window(&w, pm.hard());
                        (Some(p), Some((w.start, w.len)))
                    }
                    None => (None, None),
                }
            } else {
                (Some(pcsw::raw_prompts(pm.hard())), None)
            };
            self.entries.insert(id, (state.step, prompts, window));
        }
        let (_, prompts, window) = self.entries.get(&id).unwrap();
        Ok((prompts.clone(), *window))
    }
}

/// Per-step record for the JSON-lines metrics stream.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_total: f64,
    pub lr: f64,
    pub ema_momentum: f64,
    pub dfe_similarity: Vec<f64>,
    pub dfe_weight: Vec<f64>,
    pub skipped: bool,
}

impl StepRecord {
    pub fn from_report(step: u64, r: &StepReport) -> Self {
        StepRecord {
            step,
            l_sup: r.loss.l_sup,
            l_unsup: r.loss.l_unsup,
            l_total: r.loss.l_total,
            lr: r.lr,
            ema_momentum: r.ema_momentum,
            dfe_similarity: r.dfe.iter().map(|s| s.similarity).collect(),
            dfe_weight: r.dfe.iter().map(|s| s.weight).collect(),
            skipped: r.skipped,
        }
    }
}

fn slice_image(volume: &Volume3D, t: usize) -> Array2<f64> {
    volume.slices().index_axis(Axis(0), t).to_owned()
}

fn slice_labels(mask: &crate::volumes::MaskVolume, t: usize) -> Array2<u8> {
    mask.labels().index_axis(Axis(0), t).to_owned()
}

/// Samples the step's batches and advances the state by one step.
pub fn run_one_step(
    state: &mut TrainState,
    data: &DatasetSplit,
    cache: &mut PromptCache,
    cfg: &TrainerConfig,
    bb: &BackboneConfig,
) -> Result<StepReport> {
    let mut rng = step_rng(state.seed, state.step, SALT_BATCH);

    let mut labeled_items = Vec::new();
    for _ in 0..cfg.batch_labeled {
        let case = &data.labeled[rng.random_range(0..data.labeled.len())];
        let (t, u) = extract_frame_pair(&case.mask, &mut rng)?;
        labeled_items.push(LabeledItem { image: slice_image(&case.volume, t), labels: slice_labels(&case.mask, t) });
        labeled_items.push(LabeledItem { image: slice_image(&case.volume, u), labels: slice_labels(&case.mask, u) });
    }

    let mut unlabeled_items = Vec::new();
    if !cfg.supervised_only && !data.unlabeled.is_empty() {
        let num_classes = bb.num_classes;
        for _ in 0..cfg.batch_unlabeled {
            let case = &data.unlabeled[rng.random_range(0..data.unlabeled.len())];
            let s = case.volume.num_slices();
            let (prompts, window) = cache.get(case.id, &case.volume, state, cfg, bb, num_classes)?;
            let t = match window {
                Some((start, len)) if len >= 2 => start + rng.random_range(0..=len.saturating_sub(2)),
                Some((start, _)) => start.min(s - 2),
                None => rng.random_range(0..s - 1),
            };
            for idx in [t, t + 1] {
                let p = prompts.as_ref().map(|ps| ps.for_slice(idx).to_vec()).unwrap_or_default();
                unlabeled_items.push(UnlabeledItem { image: slice_image(&case.volume, idx), prompts: p });
            }
        }
    }

    train_step(state, &labeled_items, &unlabeled_items, cfg, bb)
}

/// Runs the loop from the state's current step to `cfg.steps`, invoking the
/// callback after every step (including skipped ones).
pub fn run_training(
    state: &mut TrainState,
    data: &DatasetSplit,
    cfg: &TrainerConfig,
    bb: &BackboneConfig,
    mut on_step: impl FnMut(&TrainState, &StepReport) -> Result<()>,
) -> Result<()> {
    data.validate()?;
    let mut cache = PromptCache::default();
    while state.step < cfg.steps {
        let report = run_one_step(state, data, &mut cache, cfg, bb)?;
        on_step(state, &report)?;
        if report.skipped {
            // The step consumed its RNG draws but must still advance, or the
            // loop would spin on the same batch forever.
            state.step += 1;
        }
    }
    Ok(())
}

/// Predicts the hard mask of a full volume slice-by-slice, optionally
/// self-prompting via the pseudo-mask head.
pub fn predict_volume(
    params: &ModelParams,
    bb: &BackboneConfig,
    volume: &Volume3D,
    mode: PromptMode,
    tau: f64,
    band: WindowBand,
    ratio_mode: RatioMode,
) -> Result<Array3<u8>> {
    let (s, h, w) = volume.dims();
    let prompts: Option<PromptSet> = match mode {
        PromptMode::None => None,
        PromptMode::Raw => {
            let pm = pcsw::predict_pseudo_masks(volume.slices(), params, bb, bb.num_classes)?;
            Some(pcsw::raw_prompts(pm.hard()))
        }
        PromptMode::Pcsw => {
            let pm = pcsw::predict_pseudo_masks(volume.slices(), params, bb, bb.num_classes)?;
            let opts = pcsw::SelectOptions { band, ratio_mode };
            pcsw::select_valid_window(pm.hard(), tau, opts)?
                .map(|win| pcsw::prompts_from_window(&win, pm.hard()))
        }
    };
    let mut out = Array3::<u8>::zeros((s, h, w));
    for t in 0..s {
        let img = slice_image(volume, t);
        let slice_prompts: &[Prompt] = prompts.as_ref().map(|p| p.for_slice(t)).unwrap_or(&[]);
        let logits = backbone::decode_logits(&img, slice_prompts, params, bb)?;
        let hard = make_pseudo_labels(&logits);
        for y in 0..h {
            for x in 0..w {
                out[[t, y, x]] = hard[[y, x]];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::{generate_synthetic_dataset, SynthConfig};

    fn tiny_bb() -> BackboneConfig {
        BackboneConfig { in_channels: 1, num_classes: 2, level_channels: vec![3, 4], leak: 0.1 }
    }

    fn tiny_cfg(steps: u64) -> TrainerConfig {
        TrainerConfig {
            steps,
            warmup_steps: 2,
            peak_lr: 1e-3,
            batch_labeled: 1,
            batch_unlabeled: 1,
            refresh_interval: 4,
            weak: WeakAugmentConfig { crop_size: 16, ..Default::default() },
            ..Default::default()
        }
    }

    fn tiny_data() -> DatasetSplit {
        generate_synthetic_dataset(3, 4, (6, 16, 16), 2, 0.5, &SynthConfig::default()).unwrap()
    }

    #[test]
    fn two_runs_from_identical_state_produce_identical_reports() {
        let bb = tiny_bb();
        let cfg = tiny_cfg(3);
        let data = tiny_data();
        let run = || {
            let mut state = TrainState::new(&bb, 11).unwrap();
            let mut cache = PromptCache::default();
            let mut reports = Vec::new();
            for _ in 0..3 {
                reports.push(run_one_step(&mut state, &data, &mut cache, &cfg, &bb).unwrap());
            }
            reports
        };
        let a = run();
        let b = run();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.loss.l_total.to_bits(), rb.loss.l_total.to_bits());
            assert_eq!(ra.loss.l_sup.to_bits(), rb.loss.l_sup.to_bits());
            assert_eq!(ra.loss.l_unsup.to_bits(), rb.loss.l_unsup.to_bits());
        }
    }

    #[test]
    fn empty_unlabeled_batch_zeroes_the_unsupervised_loss() {
        let bb = tiny_bb();
        let cfg = tiny_cfg(2);
        let data = tiny_data();
        let mut state = TrainState::new(&bb, 5).unwrap();
        let case = &data.labeled[0];
        let items = vec![LabeledItem {
            image: slice_image(&case.volume, 2),
            labels: slice_labels(&case.mask, 2),
        }];
        let report = train_step(&mut state, &items, &[], &cfg, &bb).unwrap();
        assert_eq!(report.loss.l_unsup, 0.0);
        assert_eq!(report.loss.l_total, report.loss.l_sup);
    }

    #[test]
    fn total_is_exactly_sup_plus_unsup() {
        let bb = tiny_bb();
        let cfg = tiny_cfg(2);
        let data = tiny_data();
        let mut state = TrainState::new(&bb, 6).unwrap();
        let mut cache = PromptCache::default();
        let r = run_one_step(&mut state, &data, &mut cache, &cfg, &bb).unwrap();
        assert_eq!(r.loss.l_total.to_bits(), (r.loss.l_sup + r.loss.l_unsup).to_bits());
    }

    #[test]
    fn teacher_tracks_student_after_first_step() {
        let bb = tiny_bb();
        let cfg = tiny_cfg(1);
        let data = tiny_data();
        let mut state = TrainState::new(&bb, 7).unwrap();
        let mut cache = PromptCache::default();
        run_one_step(&mut state, &data, &mut cache, &cfg, &bb).unwrap();
        // momentum at step 0 is 0, so the teacher must equal the student.
        assert_eq!(state.teacher, state.student);
    }

    #[test]
    fn gradients_only_touch_student_parameters() {
        let bb = tiny_bb();
        let cfg = tiny_cfg(2);
        let data = tiny_data();
        let mut state = TrainState::new(&bb, 8).unwrap();
        // Perturb the teacher so its predictions differ from the student's.
        for (_, t) in state.teacher.iter_mut() {
            t.mapv_inplace(|v| v + 0.05);
        }
        let before_teacher = state.teacher.clone();
        let case = &data.labeled[0];
        let labeled = vec![LabeledItem {
            image: slice_image(&case.volume, 2),
            labels: slice_labels(&case.mask, 2),
        }];
        let unlabeled = vec![UnlabeledItem { image: slice_image(&data.unlabeled[0].volume, 2), prompts: vec![] }];
        let mut cfg2 = cfg.clone();
        cfg2.ema_max = 1.0; // freeze the teacher at momentum... min(1-1/(t+1), 1) = 0 at t=0, so check step > 0 path instead
        state.step = 10;
        let report = train_step(&mut state, &labeled, &unlabeled, &cfg2, &bb).unwrap();
        assert!(!report.skipped);
        // EMA mixes at momentum 10/11, so the teacher moves toward the
        // student but is never replaced by graph gradients. Verify the
        // pseudo-label path contributed no gradient by checking the moments
        // only cover student-registered names.
        for name in state.moments.m.keys() {
            assert!(before_teacher.tensor_map().contains_key(name));
        }
    }
}

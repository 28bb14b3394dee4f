//! Experiment orchestration: dataset generation, training runs, evaluation,
//! standalone PCSW analysis, the tau sweep, and plot emission. Every artifact
//! embeds the config hash and seed.

mod plot;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::Serialize;

use crate::backbone::BackboneConfig;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{score_volume, SegScore};
use crate::pcsw::{self, PromptSet, SelectOptions, WindowCandidate};
use crate::trainer::{
    run_one_step, PromptCache, PromptMode, StepRecord, TrainState, TrainerConfig,
};
use crate::volumes::{
    generate_synthetic_dataset, load_mask, load_volume, read_manifest, save_mask, save_volume,
    write_manifest, DatasetSplit, LabeledCase, ManifestRecord, MaskVolume, UnlabeledCase, Volume3D,
};

/// Test-split ids start here so they can never collide with training ids.
const TEST_ID_BASE: u32 = 1_000_000;
/// The test pool is generated from a shifted seed so it is disjoint from the
/// training pool by construction.
const TEST_SEED_OFFSET: u64 = 0x5EED_7E57;

fn mask_path_for(volume_path: &Path) -> PathBuf {
    let stem = volume_path.file_stem().unwrap_or_default().to_string_lossy();
    volume_path.with_file_name(format!("{stem}.mask.sssvol"))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

/// Generates the training and test pools, writes every volume to disk, and
/// emits the manifest. Refuses to clobber a non-empty output directory unless
/// `force` is set.
pub fn run_generate(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out_dir);
    if out.exists() && out.read_dir()?.next().is_some() && !force {
        return Err(Error::data(format!(
            "output directory {} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    ensure_dir(&out)?;
    let vol_dir = out.join("volumes");
    ensure_dir(&vol_dir)?;

    let synth = cfg.synth();
    let split = generate_synthetic_dataset(
        cfg.seed,
        cfg.data_count,
        cfg.dims(),
        cfg.data_num_classes,
        cfg.data_labeled_fraction,
        &synth,
    )?;
    let test = generate_synthetic_dataset(
        cfg.seed.wrapping_add(TEST_SEED_OFFSET),
        cfg.data_test_count,
        cfg.dims(),
        cfg.data_num_classes,
        1.0,
        &synth,
    )?;

    let mut records = Vec::new();
    for case in &split.labeled {
        let name = format!("volumes/l{:03}.sssvol", case.id);
        save_volume(out.join(&name), &case.volume)?;
        save_mask(mask_path_for(&out.join(&name)), &case.mask)?;
        records.push(ManifestRecord { path: name, split: "labeled".into(), id: case.id });
    }
    for case in &split.unlabeled {
        let name = format!("volumes/u{:03}.sssvol", case.id);
        save_volume(out.join(&name), &case.volume)?;
        records.push(ManifestRecord { path: name, split: "unlabeled".into(), id: case.id });
    }
    for case in &test.labeled {
        let id = TEST_ID_BASE + case.id;
        let name = format!("volumes/t{:03}.sssvol", case.id);
        save_volume(out.join(&name), &case.volume)?;
        save_mask(mask_path_for(&out.join(&name)), &case.mask)?;
        records.push(ManifestRecord { path: name, split: "test".into(), id });
    }
    let manifest = out.join("manifest.txt");
    write_manifest(&manifest, &records)?;
    fs::write(
        out.join("config.txt"),
        format!("# hash = {}\n{}", cfg.hash(), cfg.to_canonical_string()),
    )?;
    Ok(manifest)
}

/// Loads the training pools and the held-out test cases from a manifest.
pub fn load_dataset(cfg: &RunConfig) -> Result<(DatasetSplit, Vec<LabeledCase>)> {
    if cfg.data_manifest.is_empty() {
        return Err(Error::Config("`data.manifest` is not set; run generate-data first".into()));
    }
    let manifest_path = PathBuf::from(&cfg.data_manifest);
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let records = read_manifest(&manifest_path)?;
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut test = Vec::new();
    for rec in records {
        let vp = base.join(&rec.path);
        match rec.split.as_str() {
            "labeled" => {
                let volume = load_volume(&vp)?;
                let mask = load_mask(mask_path_for(&vp))?;
                labeled.push(LabeledCase { id: rec.id, volume, mask });
            }
            "unlabeled" => {
                let volume = load_volume(&vp)?;
                unlabeled.push(UnlabeledCase { id: rec.id, volume });
            }
            "test" => {
                let volume = load_volume(&vp)?;
                let mask = load_mask(mask_path_for(&vp))?;
                test.push(LabeledCase { id: rec.id, volume, mask });
            }
            other => {
                return Err(Error::data(format!("manifest split `{other}` is not one of labeled|unlabeled|test")));
            }
        }
    }
    let split = DatasetSplit {
        labeled,
        unlabeled,
        batch_labeled: cfg.trainer_batch_labeled.max(1),
        batch_unlabeled: cfg.trainer_batch_unlabeled.max(1),
    };
    split.validate()?;
    Ok((split, test))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub config_hash: String,
    pub seed: u64,
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub final_loss: Option<f64>,
}

/// Trains from scratch or resumes from a checkpoint, streaming JSON-lines
/// metrics and saving periodic checkpoints. `stop_after` simulates an
/// interruption: the loop halts at that step without altering the schedule.
pub fn run_train(cfg: &RunConfig, resume: Option<&Path>, stop_after: Option<u64>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let bb = cfg.backbone()?;
    let tcfg = cfg.trainer();
    let (data, _test) = load_dataset(cfg)?;
    let hash = cfg.hash();

    let out = PathBuf::from(&cfg.out_dir);
    ensure_dir(&out)?;
    let ckpt_dir = out.join("checkpoints");
    ensure_dir(&ckpt_dir)?;
    let metrics_path = out.join("metrics.jsonl");

    let mut state = match resume {
        Some(path) => load_checkpoint(path, &hash)?,
        None => TrainState::new(&bb, cfg.seed)?,
    };
    let fresh = state.step == 0;
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .truncate(false)
        .open(&metrics_path)?;
    if fresh {
        // Fresh runs truncate any stale stream before the header.
        metrics = fs::File::create(&metrics_path)?;
        writeln!(metrics, "{}", serde_json::json!({ "config_hash": hash, "seed": cfg.seed }))?;
    }

    let stop_at = stop_after.unwrap_or(tcfg.steps).min(tcfg.steps);
    let mut cache = PromptCache::default();
    data.validate()?;
    while state.step < stop_at {
        let report = run_one_step(&mut state, &data, &mut cache, &tcfg, &bb)?;
        if report.skipped {
            state.step += 1;
        }
        let record = StepRecord::from_report(state.step - 1, &report);
        writeln!(metrics, "{}", serde_json::to_string(&record).map_err(|e| Error::data(e.to_string()))?)?;
        if tcfg.checkpoint_interval > 0 && state.step % tcfg.checkpoint_interval == 0 && state.step < tcfg.steps {
            save_checkpoint(ckpt_dir.join(format!("step{:06}.sssckpt", state.step)), &state, &hash)?;
        }
    }
    metrics.flush()?;
    let final_path = if state.step >= tcfg.steps {
        let p = ckpt_dir.join("final.sssckpt");
        save_checkpoint(&p, &state, &hash)?;
        p
    } else {
        let p = ckpt_dir.join(format!("step{:06}.sssckpt", state.step));
        save_checkpoint(&p, &state, &hash)?;
        p
    };
    let outcome = TrainOutcome {
        config_hash: hash,
        seed: cfg.seed,
        steps: state.step,
        final_checkpoint: final_path,
        metrics_path,
        final_loss: state.loss_history.last().copied(),
    };
    fs::write(
        out.join("run.json"),
        serde_json::to_string_pretty(&outcome).map_err(|e| Error::data(e.to_string()))?,
    )?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct VolumeScore {
    pub id: u32,
    pub score: SegScore,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub config_hash: String,
    pub seed: u64,
    pub split: String,
    pub volumes: Vec<VolumeScore>,
    /// Per-class means over volumes: (class, dice, jaccard, hd95, asd).
    /// Undefined distances are excluded from their means.
    pub per_class_means: Vec<(u8, f64, f64, Option<f64>, Option<f64>)>,
    pub mean_dice: f64,
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Evaluates a checkpoint's EMA teacher on a split, writing JSON records and
/// a CSV table (Dice up, Jaccard up, 95HD down, ASD down).
pub fn run_evaluate(cfg: &RunConfig, checkpoint: &Path, split: &str) -> Result<EvalOutcome> {
    cfg.validate()?;
    let bb = cfg.backbone()?;
    let hash = cfg.hash();
    let state = load_checkpoint(checkpoint, &hash)?;
    let (data, test) = load_dataset(cfg)?;
    let cases: Vec<&LabeledCase> = match split {
        "test" => test.iter().collect(),
        "labeled" => data.labeled.iter().collect(),
        other => return Err(Error::Config(format!("unknown split `{other}`; use test|labeled"))),
    };
    if cases.is_empty() {
        return Err(Error::data(format!("split `{split}` has no cases")));
    }
    let mode = cfg.prompt_mode();
    let mut volumes = Vec::new();
    for case in cases {
        let pred = crate::trainer::predict_volume(
            &state.teacher,
            &bb,
            &case.volume,
            mode,
            cfg.pcsw_tau,
            cfg.band(),
            cfg.ratio_mode(),
        )?;
        let score = score_volume(&pred, case.mask.labels(), bb.num_classes, case.volume.voxel_spacing())?;
        let mean_dice = score.mean_dice();
        volumes.push(VolumeScore { id: case.id, score, mean_dice });
    }

    let mut per_class_means = Vec::new();
    for class_id in 1..bb.num_classes as u8 {
        let of_class = |f: &dyn Fn(&crate::metrics::ClassScore) -> f64| -> f64 {
            let values: Vec<f64> = volumes
                .iter()
                .flat_map(|v| v.score.per_class.iter().filter(|c| c.class_id == class_id).map(f))
                .collect();
            values.iter().sum::<f64>() / values.len().max(1) as f64
        };
        let hd: Vec<Option<f64>> = volumes
            .iter()
            .flat_map(|v| v.score.per_class.iter().filter(|c| c.class_id == class_id).map(|c| c.hd95))
            .collect();
        let as_: Vec<Option<f64>> = volumes
            .iter()
            .flat_map(|v| v.score.per_class.iter().filter(|c| c.class_id == class_id).map(|c| c.asd))
            .collect();
        per_class_means.push((
            class_id,
            of_class(&|c| c.dice),
            of_class(&|c| c.jaccard),
            mean_opt(&hd),
            mean_opt(&as_),
        ));
    }
    let mean_dice = volumes.iter().map(|v| v.mean_dice).sum::<f64>() / volumes.len() as f64;

    let outcome = EvalOutcome {
        config_hash: hash,
        seed: cfg.seed,
        split: split.to_string(),
        volumes,
        per_class_means,
        mean_dice,
    };

    let out = PathBuf::from(&cfg.out_dir);
    ensure_dir(&out)?;
    fs::write(
        out.join(format!("scores_{split}.json")),
        serde_json::to_string_pretty(&outcome).map_err(|e| Error::data(e.to_string()))?,
    )?;
    let mut csv = String::new();
    csv.push_str(&format!("# config_hash={} seed={}\n", outcome.config_hash, outcome.seed));
    csv.push_str("class,dice,jaccard,hd95,asd\n");
    let fmt_opt = |o: Option<f64>| o.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into());
    for (c, d, j, h, a) in &outcome.per_class_means {
        csv.push_str(&format!("{c},{d:.4},{j:.4},{},{}\n", fmt_opt(*h), fmt_opt(*a)));
    }
    csv.push_str(&format!("mean,{:.4},,,\n", outcome.mean_dice));
    fs::write(out.join(format!("scores_{split}.csv")), csv)?;
    Ok(outcome)
}

#[derive(Debug, Serialize)]
struct WindowReport {
    start: usize,
    len: usize,
    ratios: Vec<(u8, f64)>,
    valid: bool,
}

#[derive(Debug, Serialize)]
struct PcswReport {
    config_hash: String,
    seed: u64,
    tau: f64,
    slices: usize,
    windows: Vec<WindowReport>,
    selected: Option<WindowCandidate>,
    prompts: Option<PromptSet>,
}

/// Runs PCSW analysis over one volume file. The pseudo-mask source is either
/// a mask file used verbatim or a checkpoint whose head predicts it.
pub fn run_pcsw(
    cfg: &RunConfig,
    mask_path: Option<&Path>,
    volume_path: Option<&Path>,
    checkpoint: Option<&Path>,
    overlays: bool,
) -> Result<PathBuf> {
    cfg.validate()?;
    let opts = SelectOptions { band: cfg.band(), ratio_mode: cfg.ratio_mode() };
    let (labels, volume): (MaskVolume, Option<Volume3D>) = match (mask_path, volume_path, checkpoint) {
        (Some(mp), vp, _) => {
            let mask = load_mask(mp)?;
            let vol = vp.map(load_volume).transpose()?;
            (mask, vol)
        }
        (None, Some(vp), Some(cp)) => {
            let bb = cfg.backbone()?;
            let state = load_checkpoint(cp, &cfg.hash())?;
            let vol = load_volume(vp)?;
            let pm = pcsw::predict_pseudo_masks(vol.slices(), &state.teacher, &bb, bb.num_classes)?;
            let mask = MaskVolume::new(pm.hard().clone(), bb.num_classes)?;
            (mask, Some(vol))
        }
        _ => {
            return Err(Error::Config(
                "pcsw-run needs either --mask, or --volume together with --checkpoint".into(),
            ))
        }
    };

    let candidates = pcsw::evaluate_windows(labels.labels(), opts)?;
    let selected = candidates.iter().find(|c| c.is_valid(cfg.pcsw_tau)).cloned();
    let prompts = selected.as_ref().map(|w| pcsw::prompts_from_window(w, labels.labels()));
    let report = PcswReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        tau: cfg.pcsw_tau,
        slices: labels.dims().0,
        windows: candidates
            .iter()
            .map(|c| WindowReport {
                start: c.start,
                len: c.len,
                ratios: c.ratios.clone(),
                valid: c.is_valid(cfg.pcsw_tau),
            })
            .collect(),
        selected,
        prompts: prompts.clone(),
    };

    let out = PathBuf::from(&cfg.out_dir);
    ensure_dir(&out)?;
    let report_path = out.join("pcsw_report.json");
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).map_err(|e| Error::data(e.to_string()))?,
    )?;
    if overlays {
        let overlay_dir = out.join("overlays");
        ensure_dir(&overlay_dir)?;
        write_overlays(&overlay_dir, &labels, volume.as_ref(), prompts.as_ref())?;
    }
    Ok(report_path)
}

const CLASS_COLORS: [[u8; 3]; 6] =
    [[255, 80, 80], [80, 200, 120], [90, 140, 255], [240, 200, 60], [200, 90, 220], [70, 220, 220]];

fn write_overlays(
    dir: &Path,
    labels: &MaskVolume,
    volume: Option<&Volume3D>,
    prompts: Option<&PromptSet>,
) -> Result<()> {
    let (s, h, w) = labels.dims();
    for t in 0..s {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let base = volume
                    .map(|v| (v.slices()[[t, y, x]] * 255.0) as u8)
                    .unwrap_or(0);
                let mut px = [base, base, base];
                let l = labels.labels()[[t, y, x]];
                if l > 0 {
                    let c = CLASS_COLORS[(l as usize - 1) % CLASS_COLORS.len()];
                    for (p, cc) in px.iter_mut().zip(c) {
                        *p = ((*p as u16 + cc as u16 * 2) / 3) as u8;
                    }
                }
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        if let Some(ps) = prompts {
            for p in ps.for_slice(t) {
                match *p {
                    pcsw::Prompt::Point { y, x, .. } => {
                        for d in -2isize..=2 {
                            let yy = y as isize + d;
                            let xx = x as isize + d;
                            if yy >= 0 && yy < h as isize {
                                img.put_pixel(x as u32, yy as u32, image::Rgb([255, 255, 255]));
                            }
                            if xx >= 0 && xx < w as isize {
                                img.put_pixel(xx as u32, y as u32, image::Rgb([255, 255, 255]));
                            }
                        }
                    }
                    pcsw::Prompt::Box { y0, x0, y1, x1, .. } => {
                        for x in x0..=x1 {
                            img.put_pixel(x as u32, y0 as u32, image::Rgb([255, 255, 0]));
                            img.put_pixel(x as u32, y1 as u32, image::Rgb([255, 255, 0]));
                        }
                        for y in y0..=y1 {
                            img.put_pixel(x0 as u32, y as u32, image::Rgb([255, 255, 0]));
                            img.put_pixel(x1 as u32, y as u32, image::Rgb([255, 255, 0]));
                        }
                    }
                }
            }
        }
        img.save(dir.join(format!("slice{t:03}.png")))
            .map_err(|e| Error::data(format!("overlay write failed: {e}")))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub tau: f64,
    pub seed: u64,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutcome {
    pub config_hash: String,
    pub cells: Vec<SweepCell>,
    /// (tau, mean over seeds)
    pub mean_by_tau: Vec<(f64, f64)>,
}

/// One full train + evaluate per (tau, seed) cell. Each seed gets its own
/// generated dataset; every cell is an ordinary training run with
/// `pcsw.tau` overridden.
pub fn run_sweep(cfg: &RunConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let taus = cfg.sweep_taus()?;
    let seeds = cfg.sweep_seeds()?;
    let out = PathBuf::from(&cfg.out_dir);
    ensure_dir(&out)?;

    let mut cells = Vec::new();
    for &seed in &seeds {
        let data_dir = out.join(format!("data_s{seed}"));
        let mut data_cfg = cfg.clone();
        data_cfg.seed = seed;
        data_cfg.out_dir = data_dir.to_string_lossy().into_owned();
        let manifest = run_generate(&data_cfg, true)?;
        for &tau in &taus {
            let cell_dir = out.join(format!("cell_t{tau:.2}_s{seed}"));
            let mut cell_cfg = cfg.clone();
            cell_cfg.seed = seed;
            cell_cfg.pcsw_tau = tau;
            cell_cfg.data_manifest = manifest.to_string_lossy().into_owned();
            cell_cfg.out_dir = cell_dir.to_string_lossy().into_owned();
            let train = run_train(&cell_cfg, None, None)?;
            let eval = run_evaluate(&cell_cfg, &train.final_checkpoint, "test")?;
            cells.push(SweepCell { tau, seed, mean_dice: eval.mean_dice });
        }
    }

    let mut mean_by_tau = Vec::new();
    for &tau in &taus {
        let vals: Vec<f64> = cells.iter().filter(|c| c.tau == tau).map(|c| c.mean_dice).collect();
        mean_by_tau.push((tau, vals.iter().sum::<f64>() / vals.len() as f64));
    }
    let outcome = SweepOutcome { config_hash: cfg.hash(), cells, mean_by_tau };

    let mut csv = String::new();
    csv.push_str(&format!("# config_hash={}\n", outcome.config_hash));
    csv.push_str("tau,seed,dice\n");
    for c in &outcome.cells {
        csv.push_str(&format!("{},{},{:.4}\n", c.tau, c.seed, c.mean_dice));
    }
    for (tau, dice) in &outcome.mean_by_tau {
        csv.push_str(&format!("{tau},mean,{dice:.4}\n"));
    }
    fs::write(out.join("sweep.csv"), &csv)?;
    fs::write(
        out.join("sweep.json"),
        serde_json::to_string_pretty(&outcome).map_err(|e| Error::data(e.to_string()))?,
    )?;
    plot::line_plot(
        &out.join("sweep.svg"),
        "mean test Dice vs connectivity threshold",
        "tau",
        "Dice (%)",
        &[plot::Series {
            label: "mean over seeds".into(),
            color: "#1f6fd0",
            points: outcome.mean_by_tau.clone(),
        }],
    )?;
    Ok(outcome)
}

/// Loss curves from a metrics stream.
pub fn run_plot_metrics(metrics: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(metrics)?;
    let mut sup = Vec::new();
    let mut unsup = Vec::new();
    let mut total = Vec::new();
    for line in text.lines() {
        let Ok(v) = serde_json::from_str::<serde_json::Value>(line) else { continue };
        let Some(step) = v.get("step").and_then(|s| s.as_u64()) else { continue };
        let x = step as f64;
        if let Some(y) = v.get("l_sup").and_then(|y| y.as_f64()) {
            sup.push((x, y));
        }
        if let Some(y) = v.get("l_unsup").and_then(|y| y.as_f64()) {
            unsup.push((x, y));
        }
        if let Some(y) = v.get("l_total").and_then(|y| y.as_f64()) {
            total.push((x, y));
        }
    }
    plot::line_plot(
        out,
        "training losses",
        "step",
        "loss",
        &[
            plot::Series { label: "l_total".into(), color: "#222222", points: total },
            plot::Series { label: "l_sup".into(), color: "#1f6fd0", points: sup },
            plot::Series { label: "l_unsup".into(), color: "#d07a1f", points: unsup },
        ],
    )
}

/// Dice-vs-tau curve from a sweep table.
pub fn run_plot_sweep(csv_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(csv_path)?;
    let mut points = Vec::new();
    for line in text.lines() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() == 3 && parts[1] == "mean" {
            let tau: f64 = parts[0].parse().map_err(|_| Error::data("bad tau in sweep csv"))?;
            let dice: f64 = parts[2].parse().map_err(|_| Error::data("bad dice in sweep csv"))?;
            points.push((tau, dice));
        }
    }
    plot::line_plot(
        out,
        "mean test Dice vs connectivity threshold",
        "tau",
        "Dice (%)",
        &[plot::Series { label: "mean over seeds".into(), color: "#1f6fd0", points }],
    )
}

/// Renders a mask volume to per-slice PNGs (used by tests and debugging).
pub fn dump_mask_pngs(dir: &Path, mask: &MaskVolume) -> Result<()> {
    ensure_dir(dir)?;
    let (s, _, _) = mask.dims();
    for t in 0..s {
        let slice = mask.labels().index_axis(Axis(0), t);
        let (h, w) = slice.dim();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let l = slice[[y, x]];
                let px = if l == 0 { [0, 0, 0] } else { CLASS_COLORS[(l as usize - 1) % CLASS_COLORS.len()] };
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(dir.join(format!("mask{t:03}.png")))
            .map_err(|e| Error::data(format!("mask png write failed: {e}")))?;
    }
    Ok(())
}

/// Resolves a CLI invocation into a validated `RunConfig`.
pub fn resolve_config(
    config_path: Option<&Path>,
    sets: &[String],
    out_override: Option<&Path>,
) -> Result<RunConfig> {
    let mut cfg = match config_path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for s in sets {
        cfg.apply_set(s)?;
    }
    if let Some(out) = out_override {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

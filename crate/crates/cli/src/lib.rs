//! Subcommand implementations for the `voxdiff` binary. Each command
//! resolves the run configuration, writes it next to its outputs and then
//! delegates to `voxdiff-core`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use voxdiff_core::config::{Preset, RunConfig};
use voxdiff_core::data::{label_path, load_dataset, read_labels_v3d, read_manifest, write_case, write_manifest, write_phantom_dataset, Case};
use voxdiff_core::diffusion::sample_batch;
use voxdiff_core::metrics::{
    equalized_features, frechet_distance, intra_set_ms_ssim, mmd, mse, FeatureExtractor, MetricReport, RandomProjection,
};
use voxdiff_core::seg::{evaluate_mixtures, train_mixtures, write_sources, ExperimentSpec, SOURCES};
use voxdiff_core::training::{load_denoiser, train, TrainOutput, TrainState};
use voxdiff_core::volume::one_hot_encode;
use voxdiff_core::{Error, LabelVolume, Rng, Volume};
use voxdiff_tensor::TensorError;

/// Process exit codes.
pub mod exit {
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

/// Samples advanced together in one batched network call. Fixed so the
/// output does not depend on the thread count.
const SAMPLE_CHUNK: usize = 8;

/// Losses kept in the checkpoint's rolling history.
const LOSS_HISTORY: usize = 1000;

/// A check that ran but did not hold, such as a schedule property.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

/// Maps the first library error in the chain to an exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<NumericFailure>() {
            return exit::NUMERIC;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Geometry { .. } => exit::CONFIG,
                Error::Io { .. } | Error::Format { .. } | Error::Shape { .. } | Error::LabelOutOfRange { .. } | Error::NotOneHot { .. } => {
                    exit::DATA
                }
                Error::NonFinite(_) | Error::Tensor(TensorError::NonFinite(_)) => exit::NUMERIC,
                _ => exit::OTHER,
            };
        }
    }
    exit::OTHER
}

/// Preset, optional config file and optional seed override, in that order.
pub fn resolve_config(preset: Preset, file: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::load(p, preset)?,
        None => RunConfig::preset(preset),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn record(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.write(dir)?;
    Ok(())
}

pub fn gen_phantoms(cfg: &RunConfig, count: usize, first: usize, out: &Path) -> Result<PathBuf> {
    write_phantom_dataset(out, &cfg.phantom_params(), first, count)?;
    record(cfg, out)?;
    log::info!("wrote {count} phantoms to {}", out.display());
    Ok(out.join(voxdiff_core::data::MANIFEST))
}

fn conditioning(labels: &LabelVolume, mask_channels: usize) -> Result<Volume> {
    Ok(one_hot_encode(labels, mask_channels + 1, true)?)
}

pub struct TrainReport {
    pub checkpoint: PathBuf,
    /// Mean loss over the last 100 steps of this run.
    pub final_loss: f64,
    pub steps_run: usize,
}

/// Trains the denoiser on `data`. With `resume`, an existing checkpoint in
/// `out` is continued up to the configured step count.
pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path, resume: bool) -> Result<TrainReport> {
    let cases = load_dataset(data).with_context(|| format!("loading training set {}", data.display()))?;
    if cases.is_empty() {
        return Err(Error::format(data.join(voxdiff_core::data::MANIFEST), "training manifest lists no cases").into());
    }
    let dc = &cfg.denoiser;
    let pairs: Vec<(Volume, Volume)> = cases
        .iter()
        .map(|c| {
            if c.image.channels() != dc.image_channels || c.image.dims() != dc.size {
                return Err(Error::Shape {
                    op: "train",
                    left: format!("case {} {}", c.id, c.image.shape_string()),
                    right: format!("denoiser ({}, {})", dc.image_channels, dc.size),
                }
                .into());
            }
            Ok((c.image.clone(), conditioning(&c.labels, dc.mask_channels)?))
        })
        .collect::<Result<_>>()?;

    let output = TrainOutput { dir: out.to_path_buf() };
    let mut tc = cfg.train_config();
    let (mut state, sch) = if output.checkpoint().exists() {
        if !resume {
            bail!("{} already exists; pass --resume to continue it", output.checkpoint().display());
        }
        let ck = voxdiff_core::checkpoint::Checkpoint::load(&output.checkpoint())?;
        let (state, recorded, sch) = TrainState::from_checkpoint(ck)?;
        if recorded.total_steps != tc.total_steps {
            log::info!("resuming at step {} with the recorded settings, running to step {}", state.step, tc.total_steps);
        }
        tc = voxdiff_core::training::TrainConfig { total_steps: tc.total_steps, ..recorded };
        (state, sch)
    } else {
        (TrainState::new(dc.clone(), cfg.seed, LOSS_HISTORY)?, tc.build_schedule()?)
    };
    record(cfg, out)?;
    let summary = train(&mut state, &tc, &sch, &pairs, Some(&output))?;
    let recent = &summary.losses[summary.losses.len().saturating_sub(100)..];
    let final_loss = if recent.is_empty() { f64::NAN } else { recent.iter().sum::<f64>() / recent.len() as f64 };
    Ok(TrainReport { checkpoint: output.checkpoint(), final_loss, steps_run: summary.losses.len() })
}

/// Conditioning masks from a dataset directory or a single label file.
fn load_masks(path: &Path) -> Result<(Vec<(String, LabelVolume)>, bool)> {
    if path.is_dir() {
        let ids = read_manifest(path)?;
        let masks = ids.into_iter().map(|id| Ok((id.clone(), read_labels_v3d(&label_path(path, &id))?))).collect::<Result<_>>()?;
        Ok((masks, true))
    } else {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .map(|s| s.trim_start_matches("case_").trim_end_matches("_lbl").to_string())
            .filter(|s| !s.is_empty() && !s.contains(char::is_whitespace))
            .with_context(|| format!("cannot derive a case id from {}", path.display()))?;
        Ok((vec![(id, read_labels_v3d(path)?)], false))
    }
}

/// Draws `count` samples per mask. Sample `k` of mask `j` uses random stream
/// `j * count + k` of the run seed; the pairs are listed in the manifest.
pub fn sample_cmd(cfg: &RunConfig, checkpoint: &Path, masks: &Path, count: usize, out: &Path) -> Result<PathBuf> {
    let (denoiser, sch) = load_denoiser(checkpoint)?;
    let (sources, from_dataset) = load_masks(masks)?;
    let mask_channels = denoiser.config().mask_channels;
    let conds: Vec<Volume> = sources.iter().map(|(_, l)| conditioning(l, mask_channels)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..sources.len()).flat_map(|j| (0..count).map(move |k| (j, k))).collect();
    let seed = cfg.seed;
    let chunks: Vec<&[(usize, usize)]> = jobs.chunks(SAMPLE_CHUNK).collect();
    let samples: Vec<Vec<Volume>> = chunks
        .par_iter()
        .map(|chunk| {
            let ms: Vec<Volume> = chunk.iter().map(|&(j, _)| conds[j].clone()).collect();
            let mut rngs: Vec<Rng> = chunk.iter().map(|&(j, k)| Rng::with_stream(seed, (j * count + k) as u64)).collect();
            sample_batch(&denoiser, &ms, &sch, &mut rngs, cfg.sample)
        })
        .collect::<voxdiff_core::Result<_>>()?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut ids = Vec::with_capacity(jobs.len());
    let mut notes = vec![format!("samples from {} conditioned on {}", checkpoint.display(), masks.display())];
    let mut rows = Vec::new();
    for (&(j, k), image) in jobs.iter().zip(samples.into_iter().flatten()) {
        let (mask_id, labels) = &sources[j];
        let id = format!("{mask_id}_s{k:03}");
        write_case(out, &Case { id: id.clone(), image, labels: labels.clone() })?;
        notes.push(format!("seed {id} {seed}:{}", j * count + k));
        if from_dataset {
            rows.push((id.clone(), masks.to_path_buf(), mask_id.clone()));
        }
        ids.push(id);
    }
    write_manifest(out, &ids, &notes)?;
    if from_dataset {
        write_sources(out, &rows)?;
    }
    record(cfg, out)?;
    Ok(out.join(voxdiff_core::data::MANIFEST))
}

/// Real case paired with a synthetic one: the same id, or the mask the
/// synthetic case was sampled from when that mask belongs to the real set.
fn pairing(real_dir: &Path, real_ids: &[String], synth_dir: &Path, synth_id: &str) -> Result<Option<String>> {
    if real_ids.iter().any(|r| r == synth_id) {
        return Ok(Some(synth_id.to_string()));
    }
    let p = synth_dir.join(SOURCES);
    if !p.exists() {
        return Ok(None);
    }
    let real = real_dir.canonicalize().map_err(|e| Error::io(real_dir, e))?;
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    for line in text.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() == 3 && f[0] == synth_id && Path::new(f[1]).canonicalize().ok().as_deref() == Some(real.as_path()) {
            return Ok(real_ids.iter().find(|r| *r == f[2]).cloned());
        }
    }
    Ok(None)
}

/// Compares a synthetic set with a real one: paired MSE per case, MMD,
/// intra-set MS-SSIM of both sets and the Fréchet distance of equalised
/// features.
pub fn evaluate_cmd(cfg: &RunConfig, real_dir: &Path, synth_dir: &Path, out: &Path) -> Result<MetricReport> {
    let real = load_dataset(real_dir)?;
    let synth = load_dataset(synth_dir)?;
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Invalid("both datasets need at least one case".into()).into());
    }
    let real_ids: Vec<String> = real.iter().map(|c| c.id.clone()).collect();
    let real_images: Vec<Volume> = real.iter().map(|c| c.image.clone()).collect();
    let synth_images: Vec<Volume> = synth.iter().map(|c| c.image.clone()).collect();
    let m = &cfg.metrics;

    let mut report = MetricReport::new(format!("{} vs {}", synth_dir.display(), real_dir.display()));
    report.note("real cases", real.len());
    report.note("synthetic cases", synth.len());
    for c in &synth {
        if let Some(rid) = pairing(real_dir, &real_ids, synth_dir, &c.id)? {
            let r = &real[real_ids.iter().position(|x| *x == rid).expect("paired id is in the real set")];
            report.add_case(c.id.clone(), [("mse".to_string(), mse(&c.image, &r.image)?)]);
        }
    }
    let d = mmd(&real_images, &synth_images, &m.mmd)?;
    report.note("mmd kernel", d.kernel_label(&m.mmd));
    report.set_metrics.insert("mmd".into(), d.value);

    let ss_real = intra_set_ms_ssim(&real_images, &m.ssim)?;
    let ss_synth = intra_set_ms_ssim(&synth_images, &m.ssim)?;
    report.note("ms-ssim scales", ss_real.scales);
    report.set_metrics.insert("ms_ssim_real".into(), ss_real.value);
    report.set_metrics.insert("ms_ssim_synthetic".into(), ss_synth.value);

    if real.len() >= 2 && synth.len() >= 2 {
        let ex = RandomProjection::new(m.feature_seed, m.feature_dim);
        let fa = equalized_features(&ex, &real_images, m.equalize_bins)?;
        let fb = equalized_features(&ex, &synth_images, m.equalize_bins)?;
        let f = frechet_distance(&fa, &fb)?;
        report.note("feature extractor", ex.name());
        report.note("equalization bins", m.equalize_bins);
        report.note("frechet eigenvalues clamped", f.clamped);
        report.set_metrics.insert("frechet".into(), f.value);
    } else {
        log::warn!("Fréchet distance skipped: each set needs at least 2 cases");
    }
    report.write(out, "evaluation")?;
    record(cfg, out)?;
    Ok(report)
}

fn load_experiment(cfg: &RunConfig, path: &Path, out: &Path) -> Result<(ExperimentSpec, voxdiff_core::seg::SegConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let spec = ExperimentSpec::parse(&text, base)?;
    let mut seg = spec.seg.clone().unwrap_or_else(|| cfg.seg_config());
    seg.seed = cfg.seed;
    seg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let copy = out.join("experiment.toml");
    std::fs::write(&copy, &text).map_err(|e| Error::io(&copy, e))?;
    record(cfg, out)?;
    Ok((spec, seg))
}

/// Trains one segmentation model per mixture of the experiment.
pub fn seg_train_cmd(cfg: &RunConfig, experiment: &Path, out: &Path) -> Result<Vec<(String, f64)>> {
    let (spec, seg) = load_experiment(cfg, experiment, out)?;
    let trained = train_mixtures(&spec, &seg, out)?;
    Ok(trained.into_iter().map(|(name, t)| (name, t.losses.last().copied().unwrap_or(f64::NAN))).collect())
}

/// Evaluates the models written by [`seg_train_cmd`]; returns the
/// comparison table.
pub fn seg_eval_cmd(cfg: &RunConfig, experiment: &Path, out: &Path) -> Result<String> {
    let (spec, seg) = load_experiment(cfg, experiment, out)?;
    Ok(evaluate_mixtures(&spec, seg.threshold, out)?.1)
}

/// Schedule check report; the error carries the first violation.
pub fn validate_schedule(cfg: &RunConfig, table: bool) -> Result<String> {
    let sch = cfg.schedule.build()?;
    let report = sch.validate();
    let mut s = format!("T={} s={}: {report}\n", sch.steps(), sch.offset());
    if table {
        s.push_str("t\talpha_bar\talpha\tbeta\tsigma\n");
        for t in 1..=sch.steps() {
            s.push_str(&format!("{t}\t{}\t{}\t{}\t{}\n", sch.alpha_bar(t), sch.alpha(t), sch.beta(t), sch.sigma(t)));
        }
    }
    if !report.passed() {
        return Err(NumericFailure(format!("schedule check failed: {report}")).into());
    }
    Ok(s)
}

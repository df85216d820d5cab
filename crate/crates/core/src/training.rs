//! Noise-prediction training: losses, Adam, learning-rate stages, the
//! per-step update and the outer loop with checkpoints and a loss curve.

use std::collections::VecDeque;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxdiff_tensor::ParamStore;

use crate::checkpoint::Checkpoint;
use crate::denoiser::{Denoiser, DenoiserConfig, LossKind};
use crate::diffusion::forward_sample;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::{Schedule, ScheduleConfig};
use crate::volume::{concat_channels, Volume};

fn check_pair(op: &'static str, a: &Volume, b: &Volume) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape { op, left: a.shape_string(), right: b.shape_string() });
    }
    Ok(())
}

/// Mean absolute difference over all channels and voxels.
pub fn l1_loss(eps: &Volume, eps_pred: &Volume) -> Result<f64> {
    check_pair("l1_loss", eps, eps_pred)?;
    let sum: f64 = eps.voxels().iter().zip(eps_pred.voxels()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
    Ok(sum / eps.len() as f64)
}

/// Mean squared difference over all channels and voxels.
pub fn l2_loss(eps: &Volume, eps_pred: &Volume) -> Result<f64> {
    check_pair("l2_loss", eps, eps_pred)?;
    let sum: f64 = eps.voxels().iter().zip(eps_pred.voxels()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(sum / eps.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Bias-corrected Adam update for step `step` (1-based), applied in place.
pub fn adam_update(
    params: &mut ParamStore<f32>,
    grads: &ParamStore<f32>,
    m: &mut ParamStore<f32>,
    v: &mut ParamStore<f32>,
    step: u64,
    rate: f64,
    cfg: AdamConfig,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Invalid("Adam steps are counted from 1".into()));
    }
    if !params.same_layout(grads) || !params.same_layout(m) || !params.same_layout(v) {
        return Err(Error::Invalid("parameter, gradient and moment layouts differ".into()));
    }
    let c1 = 1.0 - cfg.beta1.powf(step as f64);
    let c2 = 1.0 - cfg.beta2.powf(step as f64);
    for (((_, p), (_, g)), ((_, mt), (_, vt))) in
        params.iter_mut().zip(grads.iter()).zip(m.iter_mut().zip(v.iter_mut()))
    {
        for (((p, &g), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(mt.data_mut()).zip(vt.data_mut()) {
            let g = g as f64;
            let m_new = cfg.beta1 * *mv as f64 + (1.0 - cfg.beta1) * g;
            let v_new = cfg.beta2 * *vv as f64 + (1.0 - cfg.beta2) * g * g;
            *mv = m_new as f32;
            *vv = v_new as f32;
            let update = rate * (m_new / c1) / ((v_new / c2).sqrt() + cfg.epsilon);
            *p = (*p as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Learning rate `rate` applies from optimisation step `start_step` (1-based)
/// until the next stage begins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStage {
    pub start_step: u64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub learning_rate_stages: Vec<LrStage>,
    pub adam: AdamConfig,
    pub loss: LossKind,
    /// Supplied by the run configuration's `[schedule]` section.
    #[serde(skip)]
    pub schedule: ScheduleConfig,
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    pub loss_history: usize,
    /// Supplied by the run configuration's top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            total_steps: 5000,
            batch_size: 1,
            learning_rate_stages: vec![LrStage { start_step: 1, rate: 1e-4 }],
            adam: AdamConfig::default(),
            loss: LossKind::L1,
            schedule: ScheduleConfig::default(),
            checkpoint_every: 1000,
            grad_clip: None,
            loss_history: 1000,
            seed: 0,
        }
    }

    /// 100k steps at batch 1: 1e-5 for the first 50k, 1e-6 afterwards.
    pub fn paper() -> Self {
        Self {
            total_steps: 100_000,
            learning_rate_stages: vec![
                LrStage { start_step: 1, rate: 1e-5 },
                LrStage { start_step: 50_001, rate: 1e-6 },
            ],
            checkpoint_every: 5000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let stages = &self.learning_rate_stages;
        if stages.is_empty() || stages[0].start_step > 1 {
            return Err(Error::Config("learning-rate stages must start at step 1".into()));
        }
        if stages.windows(2).any(|w| w[0].start_step >= w[1].start_step) {
            return Err(Error::Config("learning-rate stages must be sorted by start step".into()));
        }
        if stages.iter().any(|s| !(s.rate >= 0.0) || !s.rate.is_finite()) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if self.loss_history == 0 {
            return Err(Error::Config("loss_history must be positive".into()));
        }
        self.schedule.build()?;
        Ok(())
    }

    /// Rate in force at optimisation step `step` (1-based).
    pub fn learning_rate(&self, step: u64) -> f64 {
        self.learning_rate_stages.iter().rev().find(|s| s.start_step <= step).map_or(0.0, |s| s.rate)
    }

    pub fn build_schedule(&self) -> Result<Schedule> {
        self.schedule.build()
    }
}

/// Everything needed to continue training exactly where it stopped.
pub struct TrainState {
    pub denoiser: Denoiser,
    pub first_moments: ParamStore<f32>,
    pub second_moments: ParamStore<f32>,
    pub step: u64,
    pub rng: Rng,
    pub losses: VecDeque<f64>,
    pub loss_capacity: usize,
}

impl TrainState {
    /// Fresh model; parameters come from stream 0 of `seed`, training draws
    /// from stream 1.
    pub fn new(config: DenoiserConfig, seed: u64, loss_capacity: usize) -> Result<Self> {
        let denoiser = Denoiser::build(config, &mut Rng::new(seed))?;
        let first_moments = denoiser.params().zeros_like();
        let second_moments = denoiser.params().zeros_like();
        Ok(Self {
            denoiser,
            first_moments,
            second_moments,
            step: 0,
            rng: Rng::with_stream(seed, 1),
            losses: VecDeque::new(),
            loss_capacity,
        })
    }

    fn record_loss(&mut self, loss: f64) {
        if self.losses.len() == self.loss_capacity {
            self.losses.pop_front();
        }
        self.losses.push_back(loss);
    }

    pub fn to_checkpoint(&self, train: &TrainConfig, schedule: &Schedule) -> Result<Checkpoint> {
        let record = ModelRecord::new(self.denoiser.config(), train);
        Ok(Checkpoint {
            config_text: record.to_text()?,
            schedule: Some(schedule.clone()),
            params: self.denoiser.params().clone(),
            first_moments: self.first_moments.clone(),
            second_moments: self.second_moments.clone(),
            step: self.step,
            rng: self.rng.state(),
            loss_capacity: self.loss_capacity,
            losses: self.losses.iter().copied().collect(),
        })
    }

    /// Restores the state and returns the recorded training configuration
    /// and schedule.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Self, TrainConfig, Schedule)> {
        let record = ModelRecord::from_text(&ck.config_text)?;
        let schedule = ck.schedule.ok_or_else(|| Error::Invalid("denoiser checkpoint lacks a schedule".into()))?;
        let denoiser = Denoiser::from_params(record.denoiser.clone(), ck.params)?;
        let state = Self {
            denoiser,
            first_moments: ck.first_moments,
            second_moments: ck.second_moments,
            step: ck.step,
            rng: Rng::from_state(ck.rng),
            losses: ck.losses.into(),
            loss_capacity: ck.loss_capacity,
        };
        Ok((state, record.train_config(), schedule))
    }
}

/// Configuration text stored inside denoiser checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
}

impl ModelRecord {
    pub fn new(denoiser: &DenoiserConfig, train: &TrainConfig) -> Self {
        Self { seed: train.seed, schedule: train.schedule, denoiser: denoiser.clone(), train: train.clone() }
    }

    /// Training configuration with the seed and schedule folded back in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, schedule: self.schedule, ..self.train.clone() }
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("checkpoint config: {e}")))
    }
}

/// Loads a trained denoiser and its schedule from a checkpoint file.
pub fn load_denoiser(path: &Path) -> Result<(Denoiser, Schedule)> {
    let (state, _, schedule) = TrainState::from_checkpoint(Checkpoint::load(path)?)?;
    Ok((state.denoiser, schedule))
}

fn clip_gradients(grads: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, t) in grads.iter_mut() {
            t.scale(s);
        }
    }
    norm
}

/// One optimisation step on a batch of `(x0, mask)` pairs: draw `t` and the
/// noise for each item, form the noisy input, and apply one Adam update.
pub fn train_step(state: &mut TrainState, batch: &[(&Volume, &Volume)], sch: &Schedule, cfg: &TrainConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty training batch".into()));
    }
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut ts = Vec::with_capacity(batch.len());
    for (x0, mask) in batch {
        let t = state.rng.int_inclusive(1, sch.steps());
        let eps = Volume::new(x0.channels(), x0.dims(), state.rng.normals(x0.len()))?;
        let xt = forward_sample(x0, t, &eps, sch)?;
        inputs.push(concat_channels(&xt, mask)?);
        targets.push(eps);
        ts.push(t);
    }
    let (loss, mut grads) = state
        .denoiser
        .loss_and_gradients(&inputs, &ts, &targets, cfg.loss)
        .map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {}", state.step + 1)),
            other => other,
        })?;
    if let Some(max_norm) = cfg.grad_clip {
        let norm = clip_gradients(&mut grads, max_norm);
        if norm > max_norm {
            log::debug!("step {}: gradient norm {norm:.4} clipped to {max_norm}", state.step + 1);
        }
    }
    let step = state.step + 1;
    adam_update(
        state.denoiser.params_mut(),
        &grads,
        &mut state.first_moments,
        &mut state.second_moments,
        step,
        cfg.learning_rate(step),
        cfg.adam,
    )?;
    state.step = step;
    state.record_loss(loss);
    Ok(loss)
}

/// Case index for global sample position `pos`: each pass over the data is
/// a fresh permutation derived from `(seed, pass)`, so the order is a pure
/// function of the position and survives resumption.
pub fn case_order(seed: u64, n: usize, pos: u64) -> usize {
    let pass = pos / n as u64;
    let mut perm: Vec<usize> = (0..n).collect();
    Rng::with_stream(seed, 1 << 32 | pass).shuffle(&mut perm);
    perm[(pos % n as u64) as usize]
}

/// Output locations of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.mdck")
    }

    pub fn loss_curve(&self) -> PathBuf {
        self.dir.join("loss.tsv")
    }
}

pub struct TrainSummary {
    /// Loss of every step run in this call, in order.
    pub losses: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

/// Run training from `state` until `cfg.total_steps`. With `output`, a
/// checkpoint is written every `checkpoint_every` steps and at the end, and
/// each step's loss is appended to the loss curve.
pub fn train(
    state: &mut TrainState,
    cfg: &TrainConfig,
    sch: &Schedule,
    data: &[(Volume, Volume)],
    output: Option<&TrainOutput>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let first = &data[0];
    for (x, m) in data {
        if !x.same_shape(&first.0) || !m.same_shape(&first.1) {
            return Err(Error::Shape { op: "train", left: first.0.shape_string(), right: x.shape_string() });
        }
    }
    let mut curve = match output {
        Some(out) => {
            std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
            let p = out.loss_curve();
            Some((OpenOptions::new().create(true).append(true).open(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut losses = Vec::new();
    let mut checkpoint = None;
    let bs = cfg.batch_size as u64;
    while state.step < cfg.total_steps {
        let batch: Vec<(&Volume, &Volume)> = (0..bs)
            .map(|i| {
                let (x, m) = &data[case_order(cfg.seed, data.len(), state.step * bs + i)];
                (x, m)
            })
            .collect();
        let loss = train_step(state, &batch, sch, cfg)?;
        losses.push(loss);
        if let Some((f, p)) = curve.as_mut() {
            writeln!(f, "{}\t{loss}", state.step).map_err(|e| Error::io(p.as_path(), e))?;
        }
        let at_end = state.step == cfg.total_steps;
        if let Some(out) = output {
            if at_end || (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) {
                let path = out.checkpoint();
                state.to_checkpoint(cfg, sch)?.save(&path)?;
                checkpoint = Some(path);
            }
        }
        if state.step % 100 == 0 {
            let recent = &losses[losses.len().saturating_sub(100)..];
            log::info!("step {}: mean loss {:.5}", state.step, recent.iter().sum::<f64>() / recent.len() as f64);
        }
    }
    Ok(TrainSummary { losses, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use voxdiff_tensor::Tensor;

    fn vol(v: Vec<f32>) -> Volume {
        let n = v.len();
        Volume::new(1, Dims::new(n, 1, 1), v).unwrap()
    }

    #[test]
    fn loss_examples() {
        assert_eq!(l1_loss(&vol(vec![1.0, -1.0]), &vol(vec![0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(l1_loss(&vol(vec![0.5, 0.5, 0.0, 0.0]), &vol(vec![0.0; 4])).unwrap(), 0.25);
        assert_eq!(l2_loss(&vol(vec![1.0, -1.0]), &vol(vec![0.0, 0.0])).unwrap(), 1.0);
        let a = vol(vec![0.3, -0.7, 2.0]);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l2_loss(&a, &a).unwrap(), 0.0);
        assert!(l1_loss(&a, &vol(vec![0.0; 2])).is_err());
    }

    fn scalar_store(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_vec(&[1], vec![v]).unwrap());
        s
    }

    #[test]
    fn adam_first_step_closed_form() {
        for g in [0.3f32, -2.0, 1e-3] {
            let mut p = scalar_store(1.0);
            let mut m = scalar_store(0.0);
            let mut v = scalar_store(0.0);
            let rate = 0.01;
            adam_update(&mut p, &scalar_store(g), &mut m, &mut v, 1, rate, AdamConfig::default()).unwrap();
            // m_hat = g, v_hat = g^2 at step 1
            let expect = 1.0 - rate * g as f64 / ((g as f64).abs() + 1e-8);
            assert!((p.get("p").unwrap().data()[0] as f64 - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_zero_gradient_and_zero_rate() {
        let mut p = scalar_store(0.5);
        let mut m = scalar_store(0.2);
        let mut v = scalar_store(0.04);
        adam_update(&mut p, &scalar_store(0.0), &mut m, &mut v, 3, 0.0, AdamConfig::default()).unwrap();
        assert_eq!(p.get("p").unwrap().data()[0], 0.5);
        assert!((m.get("p").unwrap().data()[0] - 0.18).abs() < 1e-7);
        assert!((v.get("p").unwrap().data()[0] - 0.04 * 0.999).abs() < 1e-8);
    }

    #[test]
    fn adam_sign_flip_is_odd() {
        let run = |g: f32| {
            let mut p = scalar_store(0.0);
            let (mut m, mut v) = (scalar_store(0.0), scalar_store(0.0));
            adam_update(&mut p, &scalar_store(g), &mut m, &mut v, 1, 0.1, AdamConfig::default()).unwrap();
            p.get("p").unwrap().data()[0]
        };
        assert_eq!(run(0.7), -run(-0.7));
    }

    #[test]
    fn learning_rate_stages() {
        let p = TrainConfig::paper();
        p.validate().unwrap();
        assert_eq!(p.learning_rate(1), 1e-5);
        assert_eq!(p.learning_rate(50_000), 1e-5);
        assert_eq!(p.learning_rate(50_001), 1e-6);
        assert_eq!(TrainConfig::desk().learning_rate(4000), 1e-4);
        let unsorted = TrainConfig {
            learning_rate_stages: vec![LrStage { start_step: 1, rate: 1e-3 }, LrStage { start_step: 1, rate: 1e-4 }],
            ..TrainConfig::desk()
        };
        assert!(unsorted.validate().is_err());
    }

    #[test]
    fn case_order_visits_each_case_once_per_pass() {
        for pass in 0..3u64 {
            let mut seen: Vec<usize> = (0..7).map(|i| case_order(5, 7, pass * 7 + i)).collect();
            seen.sort();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
    }

    fn tiny_data(n: usize) -> Vec<(Volume, Volume)> {
        let c = DenoiserConfig::tiny();
        (0..n)
            .map(|i| {
                let mut r = Rng::new(100 + i as u64);
                let x = Volume::new(1, c.size, r.normals(512).iter().map(|v| (v * 0.3).clamp(-1.0, 1.0)).collect()).unwrap();
                let m = Volume::new(2, c.size, (0..1024).map(|j| ((j + i) % 5 == 0) as u8 as f32).collect()).unwrap();
                (x, m)
            })
            .collect()
    }

    #[test]
    fn step_contract() {
        let data = tiny_data(1);
        let cfg = TrainConfig { schedule: ScheduleConfig { steps: 20, ..ScheduleConfig::default() }, ..TrainConfig::desk() };
        let sch = cfg.build_schedule().unwrap();
        let mut s = TrainState::new(DenoiserConfig::tiny(), 3, 10).unwrap();
        let before = s.rng.state();
        let loss = train_step(&mut s, &[(&data[0].0, &data[0].1)], &sch, &cfg).unwrap();
        assert_eq!(s.step, 1);
        assert!(loss > 0.0);
        // one timestep draw then one normal per voxel
        let mut replay = Rng::from_state(before);
        replay.int_inclusive(1, 20);
        replay.normals(512);
        assert_eq!(replay.state(), s.rng.state());

        let zero = TrainConfig { learning_rate_stages: vec![LrStage { start_step: 1, rate: 0.0 }], ..cfg.clone() };
        let params = s.denoiser.params().clone();
        train_step(&mut s, &[(&data[0].0, &data[0].1)], &sch, &zero).unwrap();
        assert_eq!(s.denoiser.params(), &params);
        assert!(s.first_moments.iter().any(|(_, t)| t.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let data = tiny_data(3);
        let cfg = TrainConfig { total_steps: 6, batch_size: 2, schedule: ScheduleConfig { steps: 20, ..ScheduleConfig::default() }, seed: 4, ..TrainConfig::desk() };
        let sch = cfg.build_schedule().unwrap();
        let dir = tempfile::tempdir().unwrap();

        let mut full = TrainState::new(DenoiserConfig::tiny(), 4, 16).unwrap();
        let all = train(&mut full, &cfg, &sch, &data, None).unwrap().losses;

        let out = TrainOutput { dir: dir.path().to_path_buf() };
        let half = TrainConfig { total_steps: 3, ..cfg.clone() };
        let mut first = TrainState::new(DenoiserConfig::tiny(), 4, 16).unwrap();
        train(&mut first, &half, &sch, &data, Some(&out)).unwrap();
        let (mut resumed, recorded, sch2) = TrainState::from_checkpoint(Checkpoint::load(&out.checkpoint()).unwrap()).unwrap();
        assert_eq!(recorded, half);
        assert_eq!(sch2, sch);
        let rest = train(&mut resumed, &cfg, &sch2, &data, None).unwrap().losses;
        assert_eq!(&all[3..], &rest[..]);
        assert_eq!(resumed.denoiser.params(), full.denoiser.params());

        let curve = std::fs::read_to_string(out.loss_curve()).unwrap();
        let lines: Vec<&str> = curve.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("3\t"));
    }
}

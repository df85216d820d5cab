//! Forward noising, the single reverse step, and the conditional sampling loop.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::Schedule;
use crate::volume::{concat_channels, Dims, Volume};

/// Anything that predicts the noise component of a mask-concatenated input.
pub trait NoisePredictor {
    fn image_channels(&self) -> usize;
    fn mask_channels(&self) -> usize;
    fn dims(&self) -> Dims;

    /// `x_tilde` has `image + mask` channels; the result has `image` channels.
    fn predict_noise(&self, x_tilde: &Volume, t: usize) -> Result<Volume>;

    /// Batched prediction with one timestep per input. Results must equal
    /// per-item [`NoisePredictor::predict_noise`] calls.
    fn predict_noise_batch(&self, inputs: &[Volume], ts: &[usize]) -> Result<Vec<Volume>> {
        inputs.iter().zip(ts).map(|(x, &t)| self.predict_noise(x, t)).collect()
    }
}

fn check_same(op: &'static str, a: &Volume, b: &Volume) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape { op, left: a.shape_string(), right: b.shape_string() });
    }
    Ok(())
}

/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
pub fn forward_sample(x0: &Volume, t: usize, eps: &Volume, sch: &Schedule) -> Result<Volume> {
    check_same("forward_sample", x0, eps)?;
    sch.check_timestep(t)?;
    let ab = sch.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let voxels = x0.voxels().iter().zip(eps.voxels()).map(|(&x, &e)| a * x + b * e).collect();
    Volume::new(x0.channels(), x0.dims(), voxels)
}

/// Coefficients of one reverse step:
/// `x_{t-1} = scale * (x_t - eps_coef * eps_pred) + sigma * z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverseCoefficients {
    pub scale: f64,
    pub eps_coef: f64,
    pub sigma: f64,
}

impl ReverseCoefficients {
    pub fn from_terms(alpha: f64, alpha_bar: f64, sigma: f64) -> Self {
        Self { scale: 1.0 / alpha.sqrt(), eps_coef: (1.0 - alpha) / (1.0 - alpha_bar).sqrt(), sigma }
    }

    pub fn at(sch: &Schedule, t: usize) -> Self {
        Self::from_terms(sch.alpha(t), sch.alpha_bar(t), sch.sigma(t))
    }

    pub fn apply(&self, xt: f32, eps_pred: f32, z: f32) -> f32 {
        (self.scale * (xt as f64 - self.eps_coef * eps_pred as f64) + self.sigma * z as f64) as f32
    }
}

/// One ancestral step from `t` to `t - 1`. `z` must be zero at `t = 1`.
pub fn reverse_step(xt: &Volume, eps_pred: &Volume, t: usize, z: &Volume, sch: &Schedule) -> Result<Volume> {
    check_same("reverse_step", xt, eps_pred)?;
    check_same("reverse_step", xt, z)?;
    sch.check_timestep(t)?;
    if t == 1 && z.voxels().iter().any(|&v| v != 0.0) {
        return Err(Error::Invalid("noise term must be zero at t = 1".into()));
    }
    let c = ReverseCoefficients::at(sch, t);
    let voxels = xt
        .voxels()
        .iter()
        .zip(eps_pred.voxels())
        .zip(z.voxels())
        .map(|((&x, &e), &n)| c.apply(x, e, n))
        .collect();
    Volume::new(xt.channels(), xt.dims(), voxels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleOptions {
    /// Clamp the final sample to `[-1, 1]`; intermediate states are never clamped.
    pub clamp: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { clamp: true }
    }
}

fn check_mask<D: NoisePredictor + ?Sized>(denoiser: &D, mask: &Volume) -> Result<()> {
    if mask.channels() != denoiser.mask_channels() || mask.dims() != denoiser.dims() {
        return Err(Error::Shape {
            op: "sample",
            left: format!("mask {}", mask.shape_string()),
            right: format!("denoiser expects ({}, {})", denoiser.mask_channels(), denoiser.dims()),
        });
    }
    Ok(())
}

/// Draw one conditional sample: start from `x_T ~ N(0, I)` and apply the
/// reverse step for `t = T..1`, re-concatenating the mask each step.
pub fn sample<D: NoisePredictor + ?Sized>(
    denoiser: &D,
    mask: &Volume,
    sch: &Schedule,
    rng: &mut Rng,
    opts: SampleOptions,
) -> Result<Volume> {
    let mut out = sample_batch(denoiser, std::slice::from_ref(mask), sch, std::slice::from_mut(rng), opts)?;
    Ok(out.remove(0))
}

/// Several independent samples advanced in lockstep so each timestep is one
/// batched network call. Item `i` uses `rngs[i]` exactly as [`sample`] would.
pub fn sample_batch<D: NoisePredictor + ?Sized>(
    denoiser: &D,
    masks: &[Volume],
    sch: &Schedule,
    rngs: &mut [Rng],
    opts: SampleOptions,
) -> Result<Vec<Volume>> {
    if masks.len() != rngs.len() {
        return Err(Error::Invalid(format!("{} masks but {} random streams", masks.len(), rngs.len())));
    }
    for m in masks {
        check_mask(denoiser, m)?;
    }
    let (m, dims) = (denoiser.image_channels(), denoiser.dims());
    let n = m * dims.voxels();
    let mut xs: Vec<Volume> =
        rngs.iter_mut().map(|r| Volume::new(m, dims, r.normals(n))).collect::<Result<_>>()?;
    for t in (1..=sch.steps()).rev() {
        let inputs: Vec<Volume> = xs.iter().zip(masks).map(|(x, c)| concat_channels(x, c)).collect::<Result<_>>()?;
        let eps = denoiser.predict_noise_batch(&inputs, &vec![t; xs.len()])?;
        let c = ReverseCoefficients::at(sch, t);
        for ((x, e), r) in xs.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
            if e.channels() != m || e.dims() != dims {
                return Err(Error::Shape { op: "sample", left: e.shape_string(), right: x.shape_string() });
            }
            let z = if t > 1 { r.normals(n) } else { vec![0.0; n] };
            let next: Vec<f32> =
                x.voxels().iter().zip(e.voxels()).zip(&z).map(|((&xv, &ev), &zv)| c.apply(xv, ev, zv)).collect();
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sampling state at timestep {t}")));
            }
            *x = Volume::new(m, dims, next)?;
        }
    }
    if opts.clamp {
        xs = xs.iter().map(|x| x.map(|v| v.clamp(-1.0, 1.0))).collect::<Result<_>>()?;
    }
    Ok(xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::cosine_schedule;
    use std::cell::RefCell;

    fn single(alpha: f64, alpha_bar: f64) -> Schedule {
        Schedule::from_arrays(0.008, &[alpha_bar], &[alpha], &[1.0 - alpha], &[(1.0 - alpha).sqrt()]).unwrap()
    }

    fn scalar(v: f32) -> Volume {
        Volume::new(1, Dims::cube(1), vec![v]).unwrap()
    }

    #[test]
    fn zero_signal_forward_sample() {
        let sch = Schedule::from_arrays(0.008, &[0.25], &[0.25], &[0.75], &[0.75f64.sqrt()]).unwrap();
        let d = Dims::cube(2);
        let x = forward_sample(&Volume::zeros(1, d), 1, &Volume::filled(1, d, 1.0), &sch).unwrap();
        assert!(x.voxels().iter().all(|&v| (v - 0.8660254).abs() < 1e-6));
        let x0 = Volume::new(1, d, (0..8).map(|i| i as f32 / 8.0).collect()).unwrap();
        let xt = forward_sample(&x0, 1, &Volume::zeros(1, d), &sch).unwrap();
        assert_eq!(xt.voxels(), x0.map(|v| 0.5 * v).unwrap().voxels());
    }

    #[test]
    fn forward_sample_checks_inputs() {
        let sch = cosine_schedule(10, 0.008).unwrap();
        let a = Volume::zeros(1, Dims::cube(2));
        assert!(forward_sample(&a, 0, &a, &sch).is_err());
        assert!(forward_sample(&a, 11, &a, &sch).is_err());
        assert!(forward_sample(&a, 3, &Volume::zeros(1, Dims::cube(3)), &sch).is_err());
    }

    #[test]
    fn hand_computed_reverse_step() {
        let sch = single(0.99, 0.99);
        let out = reverse_step(&scalar(1.0), &scalar(0.5), 1, &scalar(0.0), &sch).unwrap();
        let expect = (1.0 - 0.1 * 0.5) / 0.99f64.sqrt();
        assert!((out.voxels()[0] as f64 - expect).abs() < 1e-6);
        assert!((out.voxels()[0] - 0.95479).abs() < 1e-5);
    }

    #[test]
    fn nonzero_noise_at_final_step_is_rejected() {
        let sch = single(0.99, 0.99);
        assert!(reverse_step(&scalar(1.0), &scalar(0.5), 1, &scalar(0.1), &sch).is_err());
    }

    #[test]
    fn noise_enters_with_sigma() {
        let sch = cosine_schedule(50, 0.008).unwrap();
        let t = 20;
        let a = reverse_step(&scalar(0.3), &scalar(-0.2), t, &scalar(0.0), &sch).unwrap();
        let b = reverse_step(&scalar(0.3), &scalar(-0.2), t, &scalar(1.7), &sch).unwrap();
        let diff = (b.voxels()[0] - a.voxels()[0]) as f64;
        assert!((diff - sch.sigma(t) * 1.7).abs() < 1e-6);
        let plain = reverse_step(&scalar(0.8), &scalar(0.0), t, &scalar(0.0), &sch).unwrap();
        assert!((plain.voxels()[0] as f64 - 0.8 / sch.alpha(t).sqrt()).abs() < 1e-6);
    }

    /// Returns zero noise and records every input it sees.
    struct Recorder {
        dims: Dims,
        seen: RefCell<Vec<(Volume, usize)>>,
    }

    impl NoisePredictor for Recorder {
        fn image_channels(&self) -> usize {
            1
        }
        fn mask_channels(&self) -> usize {
            2
        }
        fn dims(&self) -> Dims {
            self.dims
        }
        fn predict_noise(&self, x: &Volume, t: usize) -> Result<Volume> {
            self.seen.borrow_mut().push((x.clone(), t));
            Ok(Volume::zeros(1, self.dims))
        }
    }

    fn mask(d: Dims) -> Volume {
        Volume::new(2, d, (0..2 * d.voxels()).map(|i| (i % 3 == 0) as u8 as f32).collect()).unwrap()
    }

    #[test]
    fn zero_predictor_replays_the_recurrence() {
        let d = Dims::cube(2);
        let sch = cosine_schedule(30, 0.008).unwrap();
        let rec = Recorder { dims: d, seen: RefCell::new(Vec::new()) };
        let c = mask(d);
        let out = sample(&rec, &c, &sch, &mut Rng::new(11), SampleOptions { clamp: false }).unwrap();

        // Replay with the same stream: x_T, then one z draw per step above t = 1.
        let mut r = Rng::new(11);
        let mut x: Vec<f64> = r.normals(8).iter().map(|&v| v as f64).collect();
        for t in (1..=30).rev() {
            let z = if t > 1 { r.normals(8) } else { vec![0.0; 8] };
            for (xv, zv) in x.iter_mut().zip(z) {
                *xv = *xv / sch.alpha(t).sqrt() + sch.sigma(t) * zv as f64;
            }
        }
        for (a, b) in out.voxels().iter().zip(&x) {
            assert!(((*a as f64) - b).abs() < 1e-4 * b.abs().max(1.0), "{a} vs {b}");
        }

        let seen = rec.seen.borrow();
        assert_eq!(seen.len(), 30);
        assert_eq!(seen.iter().map(|s| s.1).collect::<Vec<_>>(), (1..=30).rev().collect::<Vec<_>>());
        for (input, _) in seen.iter() {
            assert_eq!(input.slice_channels(1..3).unwrap(), c);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_clamped() {
        let d = Dims::cube(2);
        let sch = cosine_schedule(10, 0.008).unwrap();
        let rec = Recorder { dims: d, seen: RefCell::new(Vec::new()) };
        let a = sample(&rec, &mask(d), &sch, &mut Rng::new(3), SampleOptions::default()).unwrap();
        let b = sample(&rec, &mask(d), &sch, &mut Rng::new(3), SampleOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.voxels().iter().all(|v| (-1.0..=1.0).contains(v)));
        let wrong = Volume::zeros(1, d);
        assert!(sample(&rec, &wrong, &sch, &mut Rng::new(3), SampleOptions::default()).is_err());
    }

    #[test]
    fn batch_matches_individual_samples() {
        let d = Dims::cube(2);
        let sch = cosine_schedule(12, 0.008).unwrap();
        let rec = Recorder { dims: d, seen: RefCell::new(Vec::new()) };
        let masks = vec![mask(d), Volume::zeros(2, d)];
        let mut rngs = vec![Rng::new(1), Rng::new(2)];
        let batch = sample_batch(&rec, &masks, &sch, &mut rngs, SampleOptions::default()).unwrap();
        for (i, m) in masks.iter().enumerate() {
            let one = sample(&rec, m, &sch, &mut Rng::new(i as u64 + 1), SampleOptions::default()).unwrap();
            assert_eq!(one, batch[i]);
        }
    }
}

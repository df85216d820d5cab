//! Acceptance suite. Each criterion runs in order and prints one pass/fail
//! line; the process fails if any criterion does. Arguments select criteria
//! by number or by a substring of their name, e.g.
//! `cargo test -p voxdiff-core --test acceptance -- 3 metric`.

use std::panic::AssertUnwindSafe;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use voxdiff_core::checkpoint::Checkpoint;
use voxdiff_core::config::RunConfig;
use voxdiff_core::data::phantom::{shift_tumor, TUMOR};
use voxdiff_core::data::{generate_phantom, read_labels_v3d, read_v3d, write_labels_v3d, write_v3d, Case, PhantomParams};
use voxdiff_core::denoiser::{stack, Denoiser, DenoiserConfig, LossKind};
use voxdiff_core::diffusion::{forward_sample, reverse_step, sample_batch, NoisePredictor, SampleOptions};
use voxdiff_core::metrics::{
    equalized_features, frechet_distance, frechet_from_moments, mmd, ms_ssim_3d, mse, seg_metrics, Bandwidth, MetricReport,
    MmdOptions, RandomProjection, SsimOptions,
};
use voxdiff_core::schedule::ScheduleConfig;
use voxdiff_core::seg::{bce_loss, seg_evaluate, seg_train, SegCase};
use voxdiff_core::training::{train, TrainConfig, TrainOutput, TrainState};
use voxdiff_core::volume::{concat_channels, one_hot_encode};
use voxdiff_core::{cosine_schedule, Dims, LabelVolume, Rng, Schedule, Volume};
use voxdiff_tensor::{conv3d_fast, conv3d_reference, ParamStore, Tensor};

type Check = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

const fn minutes(m: u64) -> Duration {
    Duration::from_secs(m * 60)
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "schedule correctness", limit: Duration::from_secs(1), run: schedule_correctness },
    Criterion { id: 2, name: "forward-process moments", limit: Duration::from_secs(30), run: forward_moments },
    Criterion { id: 3, name: "reverse-step closed form", limit: Duration::from_secs(1), run: reverse_closed_form },
    Criterion { id: 4, name: "gradient oracle", limit: minutes(5), run: gradient_oracle_tiny },
    Criterion { id: 5, name: "convolution oracle", limit: minutes(2), run: convolution_oracle },
    Criterion { id: 6, name: "conditioning efficacy", limit: minutes(60), run: conditioning_efficacy },
    Criterion { id: 7, name: "metric identities", limit: minutes(1), run: metric_identities },
    Criterion { id: 8, name: "segmentation harness", limit: minutes(45), run: segmentation_harness },
    Criterion { id: 9, name: "determinism and formats", limit: minutes(1), run: determinism_and_formats },
    Criterion { id: 10, name: "multimodal configuration", limit: minutes(5), run: multimodal_configuration },
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |c: &Criterion| {
        filters.is_empty() || filters.iter().any(|f| f.parse() == Ok(c.id) || c.name.contains(f.as_str()))
    };
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| selected(c)) {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.limit => Err(format!("{detail}; over the {}s limit", c.limit.as_secs())),
            o => o,
        };
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += outcome.is_err() as usize;
        println!("criterion {:2} {}: {status} ({detail}; {:.1}s)", c.id, c.name, elapsed.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_volume(rng: &mut Rng, channels: usize, dims: Dims) -> Volume {
    Volume::new(channels, dims, (0..channels * dims.voxels()).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Schedule

/// Cosine schedule evaluated directly from its definition, with the same
/// 0.999 cap on beta; independent of the library's construction.
fn oracle_alpha_bar(steps: usize, s: f64) -> Vec<f64> {
    let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let mut out = vec![1.0];
    for t in 1..=steps {
        let beta = (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(0.999);
        out.push(out[t - 1] * (1.0 - beta));
    }
    out
}

fn schedule_correctness() -> Check {
    let sch = cosine_schedule(250, 0.008).map_err(err)?;
    let oracle = oracle_alpha_bar(250, 0.008);
    let ab = sch.alpha_bar(125);
    ensure((oracle[125] - 0.4939).abs() <= 1e-3, || format!("oracle alpha_bar[125] = {}", oracle[125]))?;
    ensure((ab - 0.4939).abs() <= 1e-3, || format!("alpha_bar[125] = {ab}"))?;
    let worst = (1..=250).map(|t| ((sch.alpha_bar(t) - oracle[t]) / oracle[t]).abs()).fold(0.0, f64::max);
    ensure(worst <= 1e-12, || format!("alpha_bar deviates from the oracle by {worst:e} relative"))?;
    ensure((1..=250).all(|t| sch.alpha_bar(t) < sch.alpha_bar(t - 1)), || "alpha_bar not strictly decreasing".into())?;
    let mut product = 1.0;
    let mut consistency: f64 = 0.0;
    for t in 1..=250 {
        product *= sch.alpha(t);
        consistency = consistency.max(((product - sch.alpha_bar(t)) / sch.alpha_bar(t)).abs());
    }
    ensure(consistency <= 1e-6, || format!("product of alphas off by {consistency:e}"))?;
    ensure((1..=250).all(|t| sch.beta(t) > 0.0 && sch.beta(t) <= 0.999), || "beta outside (0, 0.999]".into())?;
    ensure(sch.validate().passed(), || sch.validate().to_string())?;
    Ok(format!("alpha_bar[125] = {ab:.6}, oracle {:.6}, product consistency {consistency:.1e}", oracle[125]))
}

// ---------------------------------------------------------------------------
// 2. Forward moments

/// Two-sided standard normal tail `P(|Z| > z)`, by Simpson's rule on the
/// density out to 12 sigma.
fn normal_two_sided_tail(z: f64) -> f64 {
    let density = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (hi, n) = (12.0, 20_000);
    let h = (hi - z) / n as f64;
    let inner: f64 = (1..n).map(|i| density(z + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    2.0 * h / 3.0 * (density(z) + inner + density(hi))
}

/// Largest exceedance count that `voxels` independent checks, each failing
/// by chance with probability `p`, stay under with probability 0.999.
fn chance_allowance(voxels: usize, p: f64) -> usize {
    let mut pmf = (1.0 - p).powi(voxels as i32);
    let mut cdf = pmf;
    let mut k = 0;
    while cdf < 0.999 {
        pmf *= (voxels - k) as f64 / (k + 1) as f64 * p / (1.0 - p);
        cdf += pmf;
        k += 1;
    }
    k
}

fn forward_moments() -> Check {
    const DRAWS: usize = 10_000;
    let sch = cosine_schedule(250, 0.008).map_err(err)?;
    let dims = Dims::cube(8);
    let n = dims.voxels();
    let x0 = random_volume(&mut Rng::new(21), 1, dims);
    // Chance rates of the per-voxel bounds at this sample size.
    let p_mean = normal_two_sided_tail(3.0);
    let var_rel_se = (2.0 / (DRAWS as f64 - 1.0)).sqrt();
    let p_var = normal_two_sided_tail(0.05 / var_rel_se);
    let (allow_mean, allow_var) = (chance_allowance(n, p_mean), chance_allowance(n, p_var));
    let mut parts = Vec::new();
    for (k, &t) in [10usize, 125, 240].iter().enumerate() {
        let mut rng = Rng::with_stream(22, k as u64);
        let mut sum = vec![0.0f64; n];
        let mut sq = vec![0.0f64; n];
        for _ in 0..DRAWS {
            let eps = Volume::new(1, dims, rng.normals(n)).unwrap();
            let xt = forward_sample(&x0, t, &eps, &sch).map_err(err)?;
            for (i, &v) in xt.voxels().iter().enumerate() {
                sum[i] += v as f64;
                sq[i] += (v as f64) * (v as f64);
            }
        }
        let ab = sch.alpha_bar(t);
        let var_expected = 1.0 - ab;
        let (mut mean_out, mut var_out, mut worst_z, mut pooled) = (0usize, 0usize, 0.0f64, 0.0);
        for i in 0..n {
            let mean = sum[i] / DRAWS as f64;
            let var = (sq[i] - DRAWS as f64 * mean * mean) / (DRAWS as f64 - 1.0);
            let z = (mean - ab.sqrt() * x0.voxels()[i] as f64).abs() / (var / DRAWS as f64).sqrt();
            worst_z = worst_z.max(z);
            mean_out += (z > 3.0) as usize;
            var_out += ((var - var_expected).abs() > 0.05 * var_expected) as usize;
            pooled += var / n as f64;
        }
        ensure(mean_out <= allow_mean, || {
            format!("t={t}: {mean_out} voxel means beyond 3 SE, chance allows {allow_mean}")
        })?;
        ensure(var_out <= allow_var, || format!("t={t}: {var_out} voxel variances beyond 5%, chance allows {allow_var}"))?;
        ensure((pooled - var_expected).abs() <= 0.05 * var_expected, || format!("t={t}: pooled variance {pooled}"))?;
        parts.push(format!("t={t}: {mean_out}/{n} means >3SE (max {worst_z:.2}), {var_out} variances >5%"));
    }
    Ok(format!("{}; chance allowance {allow_mean} and {allow_var} per timestep", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// 3. Reverse step

fn scalar(v: f32) -> Volume {
    Volume::new(1, Dims::cube(1), vec![v]).unwrap()
}

fn reverse_closed_form() -> Check {
    // alpha = alpha_bar = 0.99: (1 - 0.01 / sqrt(0.01) * 0.5) / sqrt(0.99)
    let single = Schedule::from_arrays(0.008, &[0.99], &[0.99], &[0.01], &[0.1]).map_err(err)?;
    let hand = reverse_step(&scalar(1.0), &scalar(0.5), 1, &scalar(0.0), &single).map_err(err)?.voxels()[0];
    ensure((hand - 0.95479).abs() <= 1e-5, || format!("hand case gives {hand}"))?;

    let sch = cosine_schedule(250, 0.008).map_err(err)?;
    let step = |t: usize, x: f32, e: f32, z: f32| reverse_step(&scalar(x), &scalar(e), t, &scalar(z), &sch).unwrap().voxels()[0];
    let mut rng = Rng::new(31);
    for t in 1..=250 {
        let (a, ab, b) = (sch.alpha(t), sch.alpha_bar(t), sch.beta(t));
        let x_coef = (1.0 / a.sqrt()) as f32;
        let e_coef = (-(1.0 - a) / ((1.0 - ab).sqrt() * a.sqrt())) as f32;
        let z_coef = if t > 1 { b.sqrt() as f32 } else { 0.0 };
        let zp = if t > 1 { 1.0 } else { 0.0 };
        ensure(step(t, 0.0, 0.0, 0.0) == 0.0, || format!("t={t}: nonzero offset"))?;
        ensure(step(t, 1.0, 0.0, 0.0) == x_coef, || format!("t={t}: x coefficient {} vs {x_coef}", step(t, 1.0, 0.0, 0.0)))?;
        ensure(step(t, 0.0, 1.0, 0.0) == e_coef, || format!("t={t}: eps coefficient {} vs {e_coef}", step(t, 0.0, 1.0, 0.0)))?;
        ensure(step(t, 0.0, 0.0, zp) == z_coef, || format!("t={t}: noise coefficient {} vs {z_coef}", step(t, 0.0, 0.0, zp)))?;
        // affine in all three arguments at once
        let (x, e) = (rng.normal(), rng.normal());
        let z = if t > 1 { rng.normal() } else { 0.0 };
        let expect = x_coef as f64 * x as f64 + e_coef as f64 * e as f64 + z_coef as f64 * z as f64;
        let got = step(t, x, e, z) as f64;
        ensure((got - expect).abs() <= 1e-5 * (1.0 + expect.abs()), || format!("t={t}: combined probe {got} vs {expect}"))?;
        if t > 1 {
            let dz = step(t, x, e, z + 1.0) as f64 - got;
            ensure((dz - b.sqrt()).abs() <= 1e-5 * (1.0 + got.abs()), || format!("t={t}: noise increment {dz}"))?;
        }
    }
    Ok(format!("hand case {hand:.6}; coefficients exact at all 250 timesteps"))
}

// ---------------------------------------------------------------------------
// 4 and 10. Gradient oracle

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-6f64.max(1e-3 * analytic.abs().max(numeric.abs()))
}

/// Initial parameters plus Gaussian jitter, so the zero-initialised output
/// layer and unit norms do not make any gradient trivial.
fn jittered(config: DenoiserConfig, seed: u64) -> Denoiser {
    let mut rng = Rng::new(seed);
    let mut den = Denoiser::build(config, &mut rng).unwrap();
    for (_, t) in den.params_mut().iter_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    den
}

struct GradProblem {
    inputs: Vec<Volume>,
    ts: Vec<usize>,
    targets: Vec<Volume>,
}

/// Random mask-concatenated inputs; each target sits 0.5 to 1.5 away from
/// the current prediction, so no L1 residual can change sign under a
/// finite-difference step.
fn grad_problem(den: &Denoiser, batch: usize, rng: &mut Rng) -> GradProblem {
    let cfg = den.config();
    let inputs: Vec<Volume> = (0..batch)
        .map(|_| {
            let x = Volume::new(cfg.image_channels, cfg.size, rng.normals(cfg.image_channels * cfg.size.voxels())).unwrap();
            let labels: Vec<u8> = (0..cfg.size.voxels()).map(|_| rng.int_inclusive(0, cfg.mask_channels) as u8).collect();
            let mask = one_hot_encode(&LabelVolume::new(cfg.size, labels).unwrap(), cfg.mask_channels + 1, true).unwrap();
            concat_channels(&x, &mask).unwrap()
        })
        .collect();
    let ts: Vec<usize> = (0..batch).map(|_| rng.int_inclusive(1, 250)).collect();
    let preds = den.predict_noise_batch(&inputs, &ts).unwrap();
    let targets = preds
        .iter()
        .map(|p| {
            let vox = p.voxels().iter().map(|&v| {
                let gap = rng.uniform(0.5, 1.5) as f32;
                if rng.uniform(0.0, 1.0) < 0.5 { v - gap } else { v + gap }
            });
            Volume::new(p.channels(), p.dims(), vox.collect()).unwrap()
        })
        .collect();
    GradProblem { inputs, ts, targets }
}

/// Both losses computed here from the raw prediction, as an oracle for the
/// library's loss nodes.
fn oracle_losses(den: &Denoiser, params: &ParamStore<f64>, p: &GradProblem) -> (f64, f64) {
    let pred = den.predict_with(params, &p.inputs, &p.ts).unwrap();
    let target = stack::<f64>(&p.targets).unwrap();
    let n = target.len() as f64;
    let (mut l1, mut l2) = (0.0, 0.0);
    for (a, b) in pred.data().iter().zip(target.data()) {
        l1 += (a - b).abs();
        l2 += (a - b) * (a - b);
    }
    (l1 / n, l2 / n)
}

/// Checks the analytic gradients of both losses at the listed parameter
/// entries against central differences. Returns the number of checks.
fn check_gradients(den: &Denoiser, p: &GradProblem, entries: &[(String, usize)]) -> Result<usize, String> {
    let mut params: ParamStore<f64> = den.params().cast();
    let (l1, g1) = den.loss_and_gradients_with(&params, &p.inputs, &p.ts, &p.targets, LossKind::L1).map_err(err)?;
    let (l2, g2) = den.loss_and_gradients_with(&params, &p.inputs, &p.ts, &p.targets, LossKind::L2).map_err(err)?;
    let (o1, o2) = oracle_losses(den, &params, p);
    ensure((l1 - o1).abs() <= 1e-12 && (l2 - o2).abs() <= 1e-12, || format!("loss {l1} {l2} vs oracle {o1} {o2}"))?;
    let h = 1e-5;
    for (name, i) in entries {
        let orig = params.get(name).unwrap().data()[*i];
        params.get_mut(name).unwrap().data_mut()[*i] = orig + h;
        let plus = oracle_losses(den, &params, p);
        params.get_mut(name).unwrap().data_mut()[*i] = orig - h;
        let minus = oracle_losses(den, &params, p);
        params.get_mut(name).unwrap().data_mut()[*i] = orig;
        let fd = ((plus.0 - minus.0) / (2.0 * h), (plus.1 - minus.1) / (2.0 * h));
        let an = (g1.get(name).unwrap().data()[*i], g2.get(name).unwrap().data()[*i]);
        ensure(close(an.0, fd.0), || format!("L1 {name}[{i}]: analytic {} vs finite difference {}", an.0, fd.0))?;
        ensure(close(an.1, fd.1), || format!("L2 {name}[{i}]: analytic {} vs finite difference {}", an.1, fd.1))?;
    }
    Ok(2 * entries.len())
}

fn gradient_oracle_tiny() -> Check {
    let cfg = DenoiserConfig::tiny();
    ensure(cfg.size == Dims::cube(8) && cfg.base_channels == 4, || format!("tiny config is {cfg:?}"))?;
    let den = jittered(cfg, 41);
    let problem = grad_problem(&den, 1, &mut Rng::new(42));
    let entries: Vec<(String, usize)> =
        den.params().iter().flat_map(|(name, t)| (0..t.len()).map(move |i| (name.to_string(), i))).collect();
    let checks = check_gradients(&den, &problem, &entries)?;
    Ok(format!("{checks} gradients over {} parameters, L1 and L2", entries.len()))
}

// ---------------------------------------------------------------------------
// 5. Convolution

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap()
}

/// Max absolute difference relative to the reference output's max magnitude.
fn rel_err(reference: &Tensor<f32>, fast: &Tensor<f32>) -> f64 {
    let scale = reference.data().iter().fold(0.0f64, |m, &v| m.max(v.abs() as f64)).max(1e-30);
    let diff = reference.data().iter().zip(fast.data()).fold(0.0f64, |m, (&a, &b)| m.max((a as f64 - b as f64).abs()));
    diff / scale
}

fn convolution_oracle() -> Check {
    let mut rng = Rng::new(51);
    let mut shapes = 0;
    let mut worst: f64 = 0.0;
    while shapes < 120 {
        let (batch, cin, cout) = (rng.int_inclusive(1, 2), rng.int_inclusive(1, 6), rng.int_inclusive(1, 6));
        let (d, h, w) = (rng.int_inclusive(1, 9), rng.int_inclusive(1, 9), rng.int_inclusive(1, 9));
        let (k, stride, pad) = (rng.int_inclusive(1, 3), rng.int_inclusive(1, 2), rng.int_inclusive(0, 1));
        if d.min(h).min(w) + 2 * pad < k {
            continue;
        }
        let x = random_tensor(&[batch, cin, d, h, w], &mut rng);
        let wt = random_tensor(&[cout, cin, k, k, k], &mut rng);
        let b = random_tensor(&[cout], &mut rng);
        let r = conv3d_reference(&x, &wt, Some(&b), stride, pad).map_err(err)?;
        let f = conv3d_fast(&x, &wt, Some(&b), stride, pad).map_err(err)?;
        ensure(r.shape() == f.shape(), || format!("shape {:?} vs {:?}", r.shape(), f.shape()))?;
        let e = rel_err(&r, &f);
        ensure(e <= 1e-5, || format!("x {:?} w {:?} stride {stride} pad {pad}: relative error {e:e}", x.shape(), wt.shape()))?;
        worst = worst.max(e);
        shapes += 1;
    }
    // The 3^3 convolutions of the desk network: stem, level 0, level-1
    // input and body, the strided downsample, and the skip concatenations.
    let mut speedups = Vec::new();
    for (cin, cout, side, stride) in [(3, 8, 16, 1), (8, 8, 16, 1), (24, 8, 16, 1), (8, 8, 16, 2), (16, 16, 8, 1), (32, 16, 8, 1)] {
        let x = random_tensor(&[1, cin, side, side, side], &mut rng);
        let w = random_tensor(&[cout, cin, 3, 3, 3], &mut rng);
        let time = |f: &dyn Fn()| {
            (0..3)
                .map(|_| {
                    let t = Instant::now();
                    f();
                    t.elapsed().as_secs_f64()
                })
                .fold(f64::INFINITY, f64::min)
        };
        let tr = time(&|| {
            conv3d_reference(&x, &w, None, stride, 1).unwrap();
        });
        let tf = time(&|| {
            conv3d_fast(&x, &w, None, stride, 1).unwrap();
        });
        speedups.push(((cin, cout, side, stride), tr / tf));
    }
    let slowest = speedups.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let listing = speedups.iter().map(|(s, v)| format!("{}->{}@{}^3/{}: {v:.1}x", s.0, s.1, s.2, s.3)).collect::<Vec<_>>();
    ensure(slowest >= 3.0, || format!("speedups {}", listing.join(", ")))?;
    Ok(format!("{shapes} shapes, worst relative error {worst:.1e}; speedups {}", listing.join(", ")))
}

// ---------------------------------------------------------------------------
// 6. Conditioning efficacy

/// Random streams for sampling, far from the ones training uses.
const SAMPLE_STREAM: u64 = 1 << 48;
const SHIFT_STREAM: u64 = 1 << 47;
const CONDITIONING_TRAIN: usize = 200;
const CONDITIONING_HELD_OUT: usize = 20;

struct Conditioned {
    run: RunConfig,
    denoiser: Denoiser,
    schedule: Schedule,
    losses: Vec<f64>,
    /// Midpoint between the mean head and mean tumor intensity of the
    /// training images.
    threshold: f64,
    train_time: Duration,
}

static CONDITIONED: OnceLock<Result<Conditioned, String>> = OnceLock::new();

fn phantoms(params: &PhantomParams, range: std::ops::Range<usize>) -> Result<Vec<Case>, String> {
    range.map(|i| generate_phantom(params, i).map_err(err)).collect()
}

fn mask_of(labels: &LabelVolume, den: &Denoiser) -> Volume {
    one_hot_encode(labels, den.config().mask_channels + 1, true).unwrap()
}

fn train_conditioned() -> Result<Conditioned, String> {
    let run = RunConfig::desk();
    let cases = phantoms(&run.phantom_params(), 0..CONDITIONING_TRAIN)?;
    let tcfg = run.train_config();
    let schedule = tcfg.build_schedule().map_err(err)?;
    let mut state = TrainState::new(run.denoiser.clone(), run.seed, tcfg.loss_history).map_err(err)?;
    let data: Vec<(Volume, Volume)> =
        cases.iter().map(|c| (c.image.clone(), mask_of(&c.labels, &state.denoiser))).collect();
    let start = Instant::now();
    let summary = train(&mut state, &tcfg, &schedule, &data, None).map_err(err)?;
    let train_time = start.elapsed();
    let (mut head, mut tumor) = ((0.0, 0usize), (0.0, 0usize));
    for c in &cases {
        for (&v, &l) in c.image.voxels().iter().zip(c.labels.labels()) {
            let slot = match l {
                TUMOR => &mut tumor,
                0 => continue,
                _ => &mut head,
            };
            slot.0 += v as f64;
            slot.1 += 1;
        }
    }
    let threshold = (head.0 / head.1 as f64 + tumor.0 / tumor.1 as f64) / 2.0;
    Ok(Conditioned { run, denoiser: state.denoiser, schedule, losses: summary.losses, threshold, train_time })
}

fn conditioned() -> Result<&'static Conditioned, String> {
    CONDITIONED.get_or_init(train_conditioned).as_ref().map_err(Clone::clone)
}

/// One sample per mask; mask `i` draws from stream `SAMPLE_STREAM + streams[i]`.
fn sample_masks(m: &Conditioned, masks: &[Volume], streams: &[u64]) -> Result<Vec<Volume>, String> {
    let mut out = Vec::with_capacity(masks.len());
    for (chunk, ids) in masks.chunks(10).zip(streams.chunks(10)) {
        let mut rngs: Vec<Rng> = ids.iter().map(|&s| Rng::with_stream(m.run.seed, SAMPLE_STREAM + s)).collect();
        out.extend(sample_batch(&m.denoiser, chunk, &m.schedule, &mut rngs, m.run.sample).map_err(err)?);
    }
    Ok(out)
}

fn bright_region(sample: &Volume, threshold: f64) -> LabelVolume {
    LabelVolume::new(sample.dims(), sample.channel(0).iter().map(|&v| (v as f64 > threshold) as u8).collect()).unwrap()
}

fn tumor_region(labels: &LabelVolume) -> LabelVolume {
    LabelVolume::new(labels.dims(), labels.labels().iter().map(|&l| (l == TUMOR) as u8).collect()).unwrap()
}

fn centroid(region: &LabelVolume) -> Option<[f64; 3]> {
    let d = region.dims();
    let (mut c, mut n) = ([0.0; 3], 0usize);
    for (i, _) in region.labels().iter().enumerate().filter(|(_, &l)| l == 1) {
        let (x, y, z) = d.coords(i);
        c[0] += x as f64;
        c[1] += y as f64;
        c[2] += z as f64;
        n += 1;
    }
    (n > 0).then(|| c.map(|v| v / n as f64))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// A nonzero shift of up to 3 voxels per axis that keeps the tumor inside
/// the head.
fn shifted_labels(labels: &LabelVolume, rng: &mut Rng) -> Option<([isize; 3], LabelVolume)> {
    (0..200).find_map(|_| {
        let s = [0, 0, 0].map(|_: isize| rng.int_inclusive(0, 6) as isize - 3);
        if s.iter().map(|v| v * v).sum::<isize>() < 4 {
            return None;
        }
        shift_tumor(labels, s).map(|l| (s, l))
    })
}

fn conditioning_efficacy() -> Check {
    let m = conditioned()?;
    let losses = &m.losses;
    ensure(losses.len() >= 200, || format!("only {} training steps", losses.len()))?;
    let first = losses[..100].iter().sum::<f64>() / 100.0;
    let last = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
    let ratio = last / first;

    let held = phantoms(&m.run.phantom_params(), CONDITIONING_TRAIN..CONDITIONING_TRAIN + CONDITIONING_HELD_OUT)?;
    let mut shift_rng = Rng::with_stream(m.run.seed, SHIFT_STREAM);
    let mut shifted = Vec::new();
    for c in &held {
        shifted.push(shifted_labels(&c.labels, &mut shift_rng).ok_or_else(|| format!("no valid shift for case {}", c.id))?);
    }
    let streams: Vec<u64> = (0..held.len() as u64).collect();
    let masks: Vec<Volume> = held.iter().map(|c| mask_of(&c.labels, &m.denoiser)).collect();
    let moved: Vec<Volume> = shifted.iter().map(|(_, l)| mask_of(l, &m.denoiser)).collect();
    let samples = sample_masks(m, &masks, &streams)?;
    let moved_samples = sample_masks(m, &moved, &streams)?;

    let mut dices = Vec::new();
    let (mut predicted, mut actual) = (Vec::new(), Vec::new());
    for (i, c) in held.iter().enumerate() {
        let bright = bright_region(&samples[i], m.threshold);
        dices.push(seg_metrics(&bright, &tumor_region(&c.labels)).map_err(err)?.dice);
        let before = centroid(&bright);
        let after = centroid(&bright_region(&moved_samples[i], m.threshold));
        // an empty bright region counts as no movement
        let shift = match (before, after) {
            (Some(b), Some(a)) => [a[0] - b[0], a[1] - b[1], a[2] - b[2]],
            _ => [0.0; 3],
        };
        predicted.extend(shift);
        actual.extend(shifted[i].0.map(|v| v as f64));
    }
    let dice = dices.iter().sum::<f64>() / dices.len() as f64;
    let corr = pearson(&predicted, &actual);
    let detail = format!(
        "{} steps in {:.0}s, loss ratio {ratio:.3}; threshold {:.3}; mean Dice {dice:.3}; centroid correlation {corr:.3}",
        losses.len(),
        m.train_time.as_secs_f64(),
        m.threshold
    );
    ensure(ratio <= 0.5 && dice >= 0.5 && corr > 0.9, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 7. Metrics

fn metric_identities() -> Check {
    let mut rng = Rng::new(71);
    let set: Vec<Volume> = (0..6).map(|_| random_volume(&mut rng, 1, Dims::cube(16))).collect();
    let self_mmd = mmd(&set, &set, &MmdOptions::default()).map_err(err)?.value;
    ensure(self_mmd.abs() <= 1e-6, || format!("mmd(A, A) = {self_mmd}"))?;
    let self_ssim = ms_ssim_3d(&set[0], &set[0], &SsimOptions::default()).map_err(err)?.value;
    ensure((self_ssim - 1.0).abs() <= 1e-6, || format!("ms_ssim(v, v) = {self_ssim}"))?;

    let feats: Vec<Vec<f64>> = (0..200).map(|_| (0..8).map(|_| rng.normal() as f64).collect()).collect();
    let self_fd = frechet_distance(&feats, &feats).map_err(err)?.value;
    ensure(self_fd.abs() <= 1e-6, || format!("frechet(F, F) = {self_fd}"))?;
    let vols: Vec<Volume> = (0..40).map(|_| random_volume(&mut rng, 1, Dims::cube(8))).collect();
    let projected = equalized_features(&RandomProjection::new(7, 16), &vols, 256).map_err(err)?;
    let self_fd_projected = frechet_distance(&projected, &projected).map_err(err)?.value;
    ensure(self_fd_projected.abs() <= 1e-6, || format!("frechet of projected features = {self_fd_projected}"))?;

    use nalgebra::{DMatrix, DVector};
    let scalar_fd = frechet_from_moments(
        &DVector::from_vec(vec![0.0]),
        &DMatrix::from_vec(1, 1, vec![1.0]),
        &DVector::from_vec(vec![3.0]),
        &DMatrix::from_vec(1, 1, vec![4.0]),
    )
    .map_err(err)?
    .value;
    ensure(scalar_fd == 10.0, || format!("scalar Frechet case = {scalar_fd}"))?;

    let point = |v: f32| Volume::new(1, Dims::new(1, 1, 1), vec![v]).unwrap();
    let opts = MmdOptions { bandwidth: Bandwidth::Fixed(1.0), unbiased: false };
    let singleton = mmd(&[point(0.0)], &[point(1.0)], &opts).map_err(err)?.value;
    // 2 - 2 exp(-1/2) by hand
    ensure((singleton - 0.78694).abs() <= 1e-5, || format!("MMD singleton case = {singleton}"))?;

    let dims = Dims::new(7, 6, 5);
    for pair in 0..1000 {
        let (pa, pb) = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0));
        let draw = |rng: &mut Rng, p: f64| {
            LabelVolume::new(dims, (0..dims.voxels()).map(|_| (rng.uniform(0.0, 1.0) < p) as u8).collect()).unwrap()
        };
        let (pred, truth) = (draw(&mut rng, pa), draw(&mut rng, pb));
        let s = seg_metrics(&pred, &truth).map_err(err)?;
        ensure(s.dice == 2.0 * s.iou / (1.0 + s.iou), || format!("pair {pair}: dice {} iou {}", s.dice, s.iou))?;
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            match (p, t) {
                (1, 1) => tp += 1.0,
                (1, 0) => fp += 1.0,
                (0, 1) => fneg += 1.0,
                _ => {}
            }
        }
        let counted = if tp + fp + fneg == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
        ensure((s.dice - counted).abs() <= 1e-12, || format!("pair {pair}: dice {} vs counted {counted}", s.dice))?;
    }
    Ok(format!("mmd {self_mmd:.1e}, ms_ssim {self_ssim}, frechet {self_fd:.1e}, scalar {scalar_fd}, singleton {singleton:.6}"))
}

// ---------------------------------------------------------------------------
// 8. Segmentation

fn seg_cases(cases: &[Case]) -> Result<Vec<SegCase>, String> {
    cases.iter().map(|c| SegCase::from_case(c).map_err(err)).collect()
}

fn mean_dice(report: &MetricReport) -> f64 {
    report.aggregates()["dice"].mean
}

fn segmentation_harness() -> Check {
    let dims = Dims::cube(8);
    let mut rng = Rng::new(81);
    let truth = Volume::new(1, dims, (0..dims.voxels()).map(|_| (rng.uniform(0.0, 1.0) < 0.3) as u8 as f32).collect()).unwrap();
    let bce = bce_loss(&Volume::filled(1, dims, 0.5), &truth).map_err(err)?;
    ensure((bce - std::f64::consts::LN_2).abs() <= 1e-6, || format!("BCE at 0.5 = {bce}"))?;

    let m = conditioned()?;
    let start = Instant::now();
    let params = m.run.phantom_params();
    let mut seg = m.run.seg_config();
    seg.seed = m.run.seed;
    let real = seg_cases(&phantoms(&params, 300..400)?)?;
    let test = seg_cases(&phantoms(&params, 400..440)?)?;
    let real_model = seg_train(&seg, &real, None).map_err(err)?.model;
    let real_dice = mean_dice(&seg_evaluate(&real_model, &test, seg.threshold).map_err(err)?);

    // Synthetic images conditioned on phantom masks, labelled by those masks.
    let mask_cases = phantoms(&params, 500..600)?;
    let masks: Vec<Volume> = mask_cases.iter().map(|c| mask_of(&c.labels, &m.denoiser)).collect();
    let streams: Vec<u64> = (1000..1000 + masks.len() as u64).collect();
    let images = sample_masks(m, &masks, &streams)?;
    let synthetic: Vec<SegCase> = mask_cases
        .iter()
        .zip(images)
        .map(|(c, image)| SegCase { id: format!("synth_{}", c.id), image, truth: tumor_region(&c.labels) })
        .collect();
    let synth_model = seg_train(&seg, &synthetic, None).map_err(err)?.model;
    let synth_dice = mean_dice(&seg_evaluate(&synth_model, &test, seg.threshold).map_err(err)?);
    let gap = real_dice - synth_dice;
    let elapsed = start.elapsed();
    let detail = format!(
        "BCE {bce:.7}; real-trained Dice {real_dice:.3}; synthetic-trained Dice {synth_dice:.3}, gap {gap:.3} ({}, reported); {:.0}s after the shared model",
        if gap <= 0.15 { "within 0.15" } else { "beyond 0.15" },
        elapsed.as_secs_f64()
    );
    ensure(real_dice >= 0.6 && elapsed <= minutes(45), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 9. Determinism and formats

fn tiny_phantoms() -> PhantomParams {
    PhantomParams {
        dims: Dims::cube(8),
        head_axes: (0.9, 0.95),
        tumor_radius: (0.14, 0.18),
        tumor_fraction: (0.002, 0.3),
        ..PhantomParams::default()
    }
}

fn tiny_train(steps: u64) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        checkpoint_every: 2,
        schedule: ScheduleConfig { steps: 20, ..ScheduleConfig::default() },
        seed: 5,
        ..TrainConfig::desk()
    }
}

fn read(path: &std::path::Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn determinism_and_formats() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let d = dir.path();
    let cases = phantoms(&tiny_phantoms(), 0..3)?;
    let config = DenoiserConfig::tiny();
    let data: Vec<(Volume, Volume)> =
        cases.iter().map(|c| (c.image.clone(), one_hot_encode(&c.labels, config.mask_channels + 1, true).unwrap())).collect();

    // checkpoints: two straight runs and one resumed run
    let full = tiny_train(4);
    let sch = full.build_schedule().map_err(err)?;
    let mut states = Vec::new();
    for name in ["a", "b"] {
        let mut st = TrainState::new(config.clone(), 5, 100).map_err(err)?;
        train(&mut st, &full, &sch, &data, Some(&TrainOutput { dir: d.join(name) })).map_err(err)?;
        states.push(st);
    }
    let mut st = TrainState::new(config.clone(), 5, 100).map_err(err)?;
    train(&mut st, &tiny_train(2), &sch, &data, Some(&TrainOutput { dir: d.join("r") })).map_err(err)?;
    let (mut resumed, _, _) = TrainState::from_checkpoint(Checkpoint::load(&d.join("r/checkpoint.mdck")).map_err(err)?).map_err(err)?;
    train(&mut resumed, &full, &sch, &data, Some(&TrainOutput { dir: d.join("r") })).map_err(err)?;
    let ck = read(&d.join("a/checkpoint.mdck"))?;
    ensure(ck == read(&d.join("b/checkpoint.mdck"))?, || "checkpoints of identical runs differ".into())?;
    ensure(ck == read(&d.join("r/checkpoint.mdck"))?, || "resumed checkpoint differs from the straight run".into())?;
    ensure(read(&d.join("a/loss.tsv"))? == read(&d.join("r/loss.tsv"))?, || "resumed loss curve differs".into())?;

    // samples
    let den = &states[0].denoiser;
    let masks: Vec<Volume> = data.iter().map(|(_, m)| m.clone()).collect();
    let draw = |streams: &[u64]| {
        let mut rngs: Vec<Rng> = streams.iter().map(|&s| Rng::with_stream(9, s)).collect();
        sample_batch(den, &masks, &sch, &mut rngs, SampleOptions::default()).unwrap()
    };
    let (s1, s2, s3) = (draw(&[0, 1, 2]), draw(&[0, 1, 2]), draw(&[3, 4, 5]));
    ensure(s1 == s2, || "samples with the same seed differ".into())?;
    ensure(s1 != s3, || "samples with different streams agree".into())?;

    // reports
    let report = || {
        let mut r = MetricReport::new("determinism");
        r.note("cases", s1.len());
        for (i, (a, b)) in s1.iter().zip(&s3).enumerate() {
            r.add_case(format!("{i}"), [("mse".to_string(), mse(a, b).unwrap())]);
        }
        r
    };
    let (r1, r2) = (report(), report());
    r1.write(&d.join("rep1"), "report").map_err(err)?;
    r2.write(&d.join("rep2"), "report").map_err(err)?;
    for f in ["report.txt", "report.kv"] {
        ensure(read(&d.join("rep1").join(f))? == read(&d.join("rep2").join(f))?, || format!("{f} differs"))?;
    }

    // formats
    let vpath = d.join("v.v3d");
    write_v3d(&s1[0], &vpath).map_err(err)?;
    let back = read_v3d(&vpath).map_err(err)?;
    ensure(back == s1[0], || "volume changed in a V3D round trip".into())?;
    write_v3d(&back, &d.join("v2.v3d")).map_err(err)?;
    ensure(read(&vpath)? == read(&d.join("v2.v3d"))?, || "V3D bytes differ after a round trip".into())?;
    let lpath = d.join("l.v3d");
    write_labels_v3d(&cases[0].labels, &lpath).map_err(err)?;
    ensure(read_labels_v3d(&lpath).map_err(err)? == cases[0].labels, || "labels changed in a V3D round trip".into())?;
    let loaded = Checkpoint::load(&d.join("a/checkpoint.mdck")).map_err(err)?;
    ensure(loaded.to_bytes() == ck, || "checkpoint bytes differ after a round trip".into())?;
    Ok(format!("{} checkpoint bytes, {} samples and reports identical across runs", ck.len(), s1.len()))
}

// ---------------------------------------------------------------------------
// 10. Multimodal

fn multimodal_configuration() -> Check {
    let cfg = DenoiserConfig::multimodal();
    ensure(cfg.image_channels == 4 && cfg.mask_channels == 4, || format!("{cfg:?}"))?;
    ensure(cfg.input_channels() == 8, || format!("{} input channels", cfg.input_channels()))?;
    let den = jittered(cfg.clone(), 101);
    let mut rng = Rng::new(102);
    let x = random_volume(&mut rng, 8, cfg.size);
    let out = den.predict_noise(&x, 100).map_err(err)?;
    ensure(out.channels() == 4 && out.dims() == cfg.size, || format!("output {}", out.shape_string()))?;
    ensure(den.predict_noise(&random_volume(&mut rng, 3, cfg.size), 100).is_err(), || "accepted a 3-channel input".into())?;

    let problem = grad_problem(&den, 1, &mut rng);
    // one random entry of every parameter tensor
    let entries: Vec<(String, usize)> =
        den.params().iter().map(|(name, t)| (name.to_string(), rng.int_inclusive(0, t.len() - 1))).collect();
    let checks = check_gradients(&den, &problem, &entries)?;
    Ok(format!("8 -> 4 channels at {}; {checks} spot gradients across {} tensors", cfg.size, entries.len()))
}

//! Synthesis-quality and segmentation metrics, plus the report type that
//! collects per-case rows and mean ± std aggregates.

use std::fmt::Write as _;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::{LabelVolume, Volume};

fn shape_check(op: &'static str, a: &Volume, b: &Volume) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape { op, left: a.shape_string(), right: b.shape_string() })
    }
}

/// Mean squared voxel difference.
pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    shape_check("mse", a, b)?;
    let sum: f64 = a.voxels().iter().zip(b.voxels()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

// ---------------------------------------------------------------------------
// MMD

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Median of the pooled pairwise Euclidean distances.
    Median,
    Fixed(f64),
}

/// Gaussian kernel `exp(-|a-b|^2 / (2 h^2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmdOptions {
    pub bandwidth: Bandwidth,
    pub unbiased: bool,
}

impl Default for MmdOptions {
    fn default() -> Self {
        Self { bandwidth: Bandwidth::Median, unbiased: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmdResult {
    /// Squared MMD estimate.
    pub value: f64,
    /// Bandwidth actually used.
    pub bandwidth: f64,
}

impl MmdResult {
    pub fn kernel_label(&self, opts: &MmdOptions) -> String {
        let how = match opts.bandwidth {
            Bandwidth::Median => "median heuristic",
            Bandwidth::Fixed(_) => "fixed",
        };
        let est = if opts.unbiased { "unbiased" } else { "biased" };
        format!("gaussian, h={} ({how}), {est} estimator", self.bandwidth)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Squared maximum mean discrepancy between two sets of volumes, each
/// flattened to a vector.
pub fn mmd(set_a: &[Volume], set_b: &[Volume], opts: &MmdOptions) -> Result<MmdResult> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::Invalid("mmd needs two non-empty sets".into()));
    }
    if opts.unbiased && (set_a.len() < 2 || set_b.len() < 2) {
        return Err(Error::Invalid("the unbiased mmd estimator needs at least two volumes per set".into()));
    }
    let first = &set_a[0];
    for v in set_a.iter().chain(set_b) {
        shape_check("mmd", first, v)?;
    }
    let pooled: Vec<&Volume> = set_a.iter().chain(set_b).collect();
    let n = pooled.len();
    let mut d2 = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = pooled[i]
                .voxels()
                .iter()
                .zip(pooled[j].voxels())
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum();
            d2[i * n + j] = s;
            d2[j * n + i] = s;
        }
    }
    let bandwidth = match opts.bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(Error::Invalid(format!("mmd bandwidth must be positive, got {h}"))),
        Bandwidth::Median => {
            let mut dists: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| d2[i * n + j].sqrt()).collect();
            let h = if dists.is_empty() { 0.0 } else { median(&mut dists) };
            if h > 0.0 {
                h
            } else {
                log::warn!("median pairwise distance is zero; falling back to mmd bandwidth 1");
                1.0
            }
        }
    };
    let k = |i: usize, j: usize| (-d2[i * n + j] / (2.0 * bandwidth * bandwidth)).exp();
    let na = set_a.len();
    let block_mean = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, skip_diag: bool| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in rows {
            for j in cols.clone() {
                if skip_diag && i == j {
                    continue;
                }
                sum += k(i, j);
                count += 1;
            }
        }
        sum / count as f64
    };
    let u = opts.unbiased;
    let value = block_mean(0..na, 0..na, u) + block_mean(na..n, na..n, u) - 2.0 * block_mean(0..na, na..n, false);
    Ok(MmdResult { value, bandwidth })
}

// ---------------------------------------------------------------------------
// MS-SSIM

/// Exponent weights of the standard five-scale form.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimOptions {
    pub window: usize,
    pub sigma: f64,
    pub max_scales: usize,
    pub k1: f64,
    pub k2: f64,
    /// Input intensity range mapped onto [0, 1] before comparison.
    pub input_range: (f64, f64),
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, max_scales: 5, k1: 0.01, k2: 0.03, input_range: (-1.0, 1.0) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimResult {
    pub value: f64,
    pub scales: usize,
}

struct Grid {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Grid {
    fn pool2(&self) -> Grid {
        let [w, h, d] = self.dims.map(|n| n / 2);
        let [sw, sh, _] = self.dims;
        let mut data = Vec::with_capacity(w * h * d);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                s += self.data[((2 * z + dz) * sh + 2 * y + dy) * sw + 2 * x + dx];
                            }
                        }
                    }
                    data.push(s / 8.0);
                }
            }
        }
        Grid { dims: [w, h, d], data }
    }

    /// Separable "valid" filtering along x, then y, then z.
    fn filter(&self, taps: &[f64]) -> Grid {
        let k = taps.len();
        let mut cur = self.data.clone();
        let mut dims = self.dims;
        for axis in 0..3 {
            let mut out_dims = dims;
            out_dims[axis] = dims[axis] + 1 - k;
            let stride = match axis {
                0 => 1,
                1 => dims[0],
                _ => dims[0] * dims[1],
            };
            let [ow, oh, od] = out_dims;
            let mut out = Vec::with_capacity(ow * oh * od);
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let base = (z * dims[1] + y) * dims[0] + x;
                        out.push(taps.iter().enumerate().map(|(i, t)| t * cur[base + i * stride]).sum());
                    }
                }
            }
            cur = out;
            dims = out_dims;
        }
        Grid { dims, data: cur }
    }
}

fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Number of scales usable for `dims`: each scale halves the extent and the
/// smallest must still hold a full window.
pub fn ms_ssim_scales(dims: [usize; 3], window: usize, max_scales: usize) -> usize {
    let mut n = 0;
    let mut d = dims;
    while n < max_scales && d.iter().all(|&e| e >= window) {
        n += 1;
        d = d.map(|e| e / 2);
    }
    n
}

/// Returns (mean SSIM map, mean contrast-structure map).
fn ssim_terms(a: &Grid, b: &Grid, taps: &[f64], c1: f64, c2: f64) -> (f64, f64) {
    let prod = |f: fn(f64, f64) -> f64| Grid {
        dims: a.dims,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    };
    let mu_a = a.filter(taps);
    let mu_b = b.filter(taps);
    let aa = prod(|x, _| x * x).filter(taps);
    let bb = prod(|_, y| y * y).filter(taps);
    let ab = prod(|x, y| x * y).filter(taps);
    let n = mu_a.data.len() as f64;
    let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.data.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = aa.data[i] - ma * ma;
        let vb = bb.data[i] - mb * mb;
        let cov = ab.data[i] - ma * mb;
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        ssim_sum += l * cs;
        cs_sum += cs;
    }
    (ssim_sum / n, cs_sum / n)
}

/// Multi-scale structural similarity of two single-channel volumes with a
/// separable 3D Gaussian window. Weights are renormalised over the scales
/// that fit.
pub fn ms_ssim_3d(a: &Volume, b: &Volume, opts: &SsimOptions) -> Result<SsimResult> {
    shape_check("ms_ssim_3d", a, b)?;
    if a.channels() != 1 {
        return Err(Error::Invalid(format!("ms_ssim_3d expects one channel, got {}", a.channels())));
    }
    let (lo, hi) = opts.input_range;
    if !(hi > lo) {
        return Err(Error::Invalid(format!("invalid ms_ssim input range {lo}..{hi}")));
    }
    if opts.window == 0 || opts.sigma <= 0.0 || opts.max_scales == 0 || opts.max_scales > MS_SSIM_WEIGHTS.len() {
        return Err(Error::Invalid(format!("invalid ms_ssim options {opts:?}")));
    }
    let d = a.dims();
    let dims = [d.width, d.height, d.depth];
    let scales = ms_ssim_scales(dims, opts.window, opts.max_scales);
    if scales == 0 {
        return Err(Error::Invalid(format!("volume {d} is smaller than the {}-voxel ms_ssim window", opts.window)));
    }
    let to_unit = |v: &Volume| Grid {
        dims,
        data: v.voxels().iter().map(|&x| ((x as f64 - lo) / (hi - lo)).clamp(0.0, 1.0)).collect(),
    };
    let taps = gaussian_taps(opts.window, opts.sigma);
    let c1 = opts.k1 * opts.k1;
    let c2 = opts.k2 * opts.k2;
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = weights.iter().sum();
    let (mut ga, mut gb) = (to_unit(a), to_unit(b));
    let mut value = 1.0;
    for (s, w) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&ga, &gb, &taps, c1, c2);
        let term = if s + 1 == scales { ssim } else { cs };
        value *= term.max(0.0).powf(w / total);
        if s + 1 < scales {
            ga = ga.pool2();
            gb = gb.pool2();
        }
    }
    Ok(SsimResult { value, scales })
}

/// Mean pairwise MS-SSIM within one set; higher means less diverse.
pub fn intra_set_ms_ssim(set: &[Volume], opts: &SsimOptions) -> Result<SsimResult> {
    if set.len() < 2 {
        return Err(Error::Invalid("intra-set ms_ssim needs at least two volumes".into()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    let mut scales = 0;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            let r = ms_ssim_3d(&set[i], &set[j], opts)?;
            sum += r.value;
            scales = r.scales;
            pairs += 1;
        }
    }
    Ok(SsimResult { value: sum / pairs as f64, scales })
}

// ---------------------------------------------------------------------------
// Histogram equalisation and Fréchet distance

/// Maps each channel through its empirical CDF onto [0, 1].
pub fn histogram_equalize(v: &Volume, bins: usize) -> Result<Volume> {
    if bins < 2 {
        return Err(Error::Invalid(format!("histogram equalisation needs at least 2 bins, got {bins}")));
    }
    let n = v.dims().voxels();
    let mut out = Vec::with_capacity(v.len());
    for c in 0..v.channels() {
        let data = v.channel(c);
        let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x as f64), h.max(x as f64)));
        let span = hi - lo;
        let bin = |x: f32| {
            if span > 0.0 {
                (((x as f64 - lo) / span * bins as f64) as usize).min(bins - 1)
            } else {
                0
            }
        };
        let mut cdf = vec![0usize; bins];
        for &x in data {
            cdf[bin(x)] += 1;
        }
        for i in 1..bins {
            cdf[i] += cdf[i - 1];
        }
        let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
        let denom = (n - cdf_min) as f64;
        out.extend(data.iter().map(|&x| if denom > 0.0 { ((cdf[bin(x)] - cdf_min) as f64 / denom) as f32 } else { 0.0 }));
    }
    Volume::new(v.channels(), v.dims(), out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrechetResult {
    pub value: f64,
    /// Total magnitude of negative eigenvalues clamped to zero in the matrix
    /// square roots.
    pub clamped: f64,
}

fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut clamped = 0.0;
    let roots = eig.eigenvalues.map(|l| {
        if l < 0.0 {
            clamped += -l;
            0.0
        } else {
            l.sqrt()
        }
    });
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&roots) * q.transpose(), clamped)
}

/// Fréchet distance between two Gaussians given by mean and covariance.
/// `tr((Σa Σb)^½)` is evaluated as `tr((Σa^½ Σb Σa^½)^½)`, which keeps every
/// square root symmetric.
pub fn frechet_from_moments(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<FrechetResult> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::Invalid("frechet moments have inconsistent dimensions".into()));
    }
    let (sa, c1) = psd_sqrt(cov_a);
    let (cross, c2) = psd_sqrt(&(&sa * cov_b * &sa));
    if c1 + c2 > 0.0 {
        log::debug!("frechet: clamped negative eigenvalues of total magnitude {:e}", c1 + c2);
    }
    let diff = mu_a - mu_b;
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(FrechetResult { value: value.max(0.0), clamped: c1 + c2 })
}

/// Sample mean and unbiased covariance.
pub fn mean_and_covariance(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = feats.len();
    if n < 2 {
        return Err(Error::Invalid(format!("covariance needs at least 2 feature vectors, got {n}")));
    }
    let d = feats[0].len();
    if d == 0 || feats.iter().any(|f| f.len() != d) {
        return Err(Error::Invalid("feature vectors must share a positive dimension".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| feats[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    Ok((mean, cov))
}

pub fn frechet_distance(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<FrechetResult> {
    let (ma, ca) = mean_and_covariance(feats_a)?;
    let (mb, cb) = mean_and_covariance(feats_b)?;
    if ma.len() != mb.len() {
        return Err(Error::Invalid(format!("feature dimensions differ: {} vs {}", ma.len(), mb.len())));
    }
    frechet_from_moments(&ma, &ca, &mb, &cb)
}

/// Maps a volume to a fixed-length feature vector.
pub trait FeatureExtractor {
    /// Identifies the extractor, its version and seed in reports.
    fn name(&self) -> String;
    fn extract(&self, v: &Volume) -> Result<Vec<f64>>;
}

/// A fixed random linear map: feature `j` is the dot product of the voxels
/// with a Gaussian vector drawn from stream `j` of the seed, scaled by
/// `1/sqrt(n)`. Weights are regenerated on the fly so memory stays flat.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    pub seed: u64,
    pub dim: usize,
}

impl RandomProjection {
    pub const VERSION: u32 = 1;

    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }
}

impl FeatureExtractor for RandomProjection {
    fn name(&self) -> String {
        format!("random-projection v{} dim={} seed={}", Self::VERSION, self.dim, self.seed)
    }

    fn extract(&self, v: &Volume) -> Result<Vec<f64>> {
        let scale = 1.0 / (v.len() as f64).sqrt();
        Ok((0..self.dim)
            .map(|j| {
                let mut rng = Rng::with_stream(self.seed, j as u64);
                v.voxels().iter().map(|&x| x as f64 * rng.normal() as f64).sum::<f64>() * scale
            })
            .collect())
    }
}

/// Histogram-equalises each volume and extracts its features.
pub fn equalized_features(extractor: &dyn FeatureExtractor, set: &[Volume], bins: usize) -> Result<Vec<Vec<f64>>> {
    set.iter().map(|v| extractor.extract(&histogram_equalize(v, bins)?)).collect()
}

// ---------------------------------------------------------------------------
// Segmentation metrics

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegScores {
    pub dice: f64,
    pub iou: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
}

impl SegScores {
    pub const NAMES: [&'static str; 5] = ["dice", "iou", "accuracy", "recall", "precision"];

    pub fn values(&self) -> [f64; 5] {
        [self.dice, self.iou, self.accuracy, self.recall, self.precision]
    }
}

/// Confusion-matrix scores of a binary prediction. Empty prediction against
/// empty truth scores 1 everywhere.
pub fn seg_metrics(pred: &LabelVolume, truth: &LabelVolume) -> Result<SegScores> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape { op: "seg_metrics", left: pred.dims().to_string(), right: truth.dims().to_string() });
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (i, (&p, &t)) in pred.labels().iter().zip(truth.labels()).enumerate() {
        if p > 1 || t > 1 {
            return Err(Error::Invalid(format!("non-binary label at voxel {i}")));
        }
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            _ => tn += 1,
        }
    }
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let iou = ratio(tp, tp + fp + fneg);
    Ok(SegScores {
        // Derived from IoU so that dice = 2 iou / (1 + iou) holds exactly.
        dice: 2.0 * iou / (1.0 + iou),
        iou,
        accuracy: ratio(tp + tn, tp + tn + fp + fneg),
        recall: ratio(tp, tp + fneg),
        precision: ratio(tp, tp + fp),
    })
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len();
    if n == 0 {
        return Aggregate { mean: f64::NAN, std: f64::NAN, count: 0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Aggregate { mean, std: var.sqrt(), count: n }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub title: String,
    /// Configuration labels (kernel, scales, extractor, threshold, ...).
    pub notes: IndexMap<String, String>,
    pub cases: Vec<(String, IndexMap<String, f64>)>,
    /// Set-level values such as MMD or Fréchet distance.
    pub set_metrics: IndexMap<String, f64>,
}

impl MetricReport {
    pub fn new(title: impl Into<String>) -> Self {
        Self { title: title.into(), ..Self::default() }
    }

    pub fn note(&mut self, key: impl Into<String>, value: impl ToString) {
        self.notes.insert(key.into(), value.to_string());
    }

    pub fn add_case(&mut self, id: impl Into<String>, values: impl IntoIterator<Item = (String, f64)>) {
        self.cases.push((id.into(), values.into_iter().collect()));
    }

    /// Metric names in first-seen order across cases.
    pub fn metric_names(&self) -> Vec<String> {
        let mut names: IndexMap<String, ()> = IndexMap::new();
        for (_, row) in &self.cases {
            for k in row.keys() {
                names.insert(k.clone(), ());
            }
        }
        names.into_keys().collect()
    }

    pub fn aggregates(&self) -> IndexMap<String, Aggregate> {
        self.metric_names()
            .into_iter()
            .map(|name| {
                let vals: Vec<f64> = self.cases.iter().filter_map(|(_, r)| r.get(&name).copied()).collect();
                let agg = aggregate(&vals);
                (name, agg)
            })
            .collect()
    }

    /// Human-readable table with `mean±std` aggregate rows.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.title);
        for (k, v) in &self.notes {
            let _ = writeln!(s, "# {k}: {v}");
        }
        let names = self.metric_names();
        if !names.is_empty() {
            let id_w = self.cases.iter().map(|(id, _)| id.len()).max().unwrap_or(4).max(4);
            let _ = write!(s, "{:<id_w$}", "case");
            for n in &names {
                let _ = write!(s, "  {n:>15}");
            }
            s.push('\n');
            for (id, row) in &self.cases {
                let _ = write!(s, "{id:<id_w$}");
                for n in &names {
                    match row.get(n) {
                        Some(v) => {
                            let _ = write!(s, "  {v:>15.4}");
                        }
                        None => {
                            let _ = write!(s, "  {:>15}", "-");
                        }
                    }
                }
                s.push('\n');
            }
            let _ = write!(s, "{:<id_w$}", "mean±std");
            for a in self.aggregates().values() {
                let _ = write!(s, "  {:>15}", format!("{:.4}±{:.4}", a.mean, a.std));
            }
            s.push('\n');
        }
        for (k, v) in &self.set_metrics {
            let _ = writeln!(s, "{k}: {v:.6}");
        }
        s
    }

    /// Machine-readable `key = value` lines; numbers use the shortest
    /// representation that round-trips.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "title = {}", self.title);
        for (k, v) in &self.notes {
            let _ = writeln!(s, "note.{k} = {v}");
        }
        for (id, row) in &self.cases {
            for (k, v) in row {
                let _ = writeln!(s, "case.{id}.{k} = {v}");
            }
        }
        for (k, a) in self.aggregates() {
            let _ = writeln!(s, "mean.{k} = {}", a.mean);
            let _ = writeln!(s, "std.{k} = {}", a.std);
        }
        for (k, v) in &self.set_metrics {
            let _ = writeln!(s, "set.{k} = {v}");
        }
        s
    }

    pub fn write(&self, dir: &std::path::Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("txt", self.to_text()), ("kv", self.to_kv())] {
            let p = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

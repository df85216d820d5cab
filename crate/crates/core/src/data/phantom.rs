//! Procedural head phantoms: an ellipsoidal head with smooth texture and a
//! spherical tumor with ring enhancement and a darker peritumoral shell.
//! Labels follow the 0 background / 1 head / 2 tumor scheme.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::{Dims, LabelVolume, Volume};

pub const BACKGROUND: u8 = 0;
pub const HEAD: u8 = 1;
pub const TUMOR: u8 = 2;

const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomParams {
    pub dims: Dims,
    /// Head semi-axes as fractions of the half extent per axis.
    pub head_axes: (f64, f64),
    /// Tumor radius as a fraction of the smallest grid extent.
    pub tumor_radius: (f64, f64),
    pub tumor_count: (usize, usize),
    /// Accepted tumor voxel fraction of the whole grid.
    pub tumor_fraction: (f64, f64),
    pub texture_amplitude: f64,
    /// Extra brightness of the tumor rim over its core.
    pub ring_contrast: f64,
    /// Required gap between mean tumor and mean head intensity.
    pub tumor_margin: f64,
    pub modalities: usize,
    /// Supplied by the run configuration's top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            dims: Dims::cube(16),
            head_axes: (0.7, 0.9),
            tumor_radius: (0.15, 0.24),
            tumor_count: (1, 1),
            tumor_fraction: (0.005, 0.12),
            texture_amplitude: 0.05,
            ring_contrast: 0.45,
            tumor_margin: 0.3,
            modalities: 1,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("phantom {what} is invalid: {self:?}")));
        let range_ok = |(lo, hi): (f64, f64), max: f64| lo > 0.0 && lo <= hi && hi <= max;
        if !self.dims.is_positive() || self.dims.width.min(self.dims.height).min(self.dims.depth) < 4 {
            return bad("grid");
        }
        if !range_ok(self.head_axes, 1.0) {
            return bad("head_axes range");
        }
        if !range_ok(self.tumor_radius, 0.5) {
            return bad("tumor_radius range");
        }
        if !range_ok(self.tumor_fraction, 1.0) {
            return bad("tumor_fraction range");
        }
        if self.tumor_count.0 == 0 || self.tumor_count.0 > self.tumor_count.1 {
            return bad("tumor_count range");
        }
        if !(0.0..=0.5).contains(&self.texture_amplitude) || !(0.0..=1.0).contains(&self.ring_contrast) || self.tumor_margin < 0.0 {
            return bad("contrast setting");
        }
        if !(1..=4).contains(&self.modalities) {
            return bad("modality count");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub labels: LabelVolume,
}

/// Per-modality intensity levels.
struct Contrast {
    head_centre: f32,
    head_edge: f32,
    core: f32,
    rim_boost: f32,
    shell: f32,
}

fn contrast(modality: usize, ring: f32) -> Contrast {
    match modality {
        // contrast-enhanced: bright rim, dark oedema
        0 => Contrast { head_centre: 0.0, head_edge: -0.25, core: 0.35, rim_boost: ring, shell: -0.15 },
        // plain: hypointense tumor
        1 => Contrast { head_centre: 0.1, head_edge: -0.1, core: -0.45, rim_boost: 0.1, shell: -0.1 },
        // fluid-weighted: bright tumor and bright oedema
        2 => Contrast { head_centre: -0.2, head_edge: -0.3, core: 0.6, rim_boost: 0.0, shell: 0.25 },
        _ => Contrast { head_centre: -0.1, head_edge: -0.3, core: 0.4, rim_boost: -0.1, shell: 0.35 },
    }
}

struct Tumor {
    centre: [f64; 3],
    radius: f64,
}

struct Geometry {
    centre: [f64; 3],
    axes: [f64; 3],
    tumors: Vec<Tumor>,
}

fn voxel_centre(d: Dims, i: usize) -> [f64; 3] {
    let (x, y, z) = d.coords(i);
    [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]
}

impl Geometry {
    fn head_radius(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.centre[a]) / self.axes[a]).powi(2)).sum::<f64>().sqrt()
    }

    /// Distance to the nearest tumor surface measured as `dist / radius`.
    fn tumor_ratio(&self, p: [f64; 3]) -> f64 {
        self.tumors
            .iter()
            .map(|t| (0..3).map(|a| (p[a] - t.centre[a]).powi(2)).sum::<f64>().sqrt() / t.radius)
            .fold(f64::INFINITY, f64::min)
    }

    fn draw(params: &PhantomParams, rng: &mut Rng) -> Self {
        let d = params.dims;
        let ext = [d.width as f64, d.height as f64, d.depth as f64];
        let centre = ext.map(|e| e / 2.0 + rng.uniform(-0.5, 0.5));
        let axes = ext.map(|e| e / 2.0 * rng.uniform(params.head_axes.0, params.head_axes.1));
        let count = rng.int_inclusive(params.tumor_count.0, params.tumor_count.1);
        let min_ext = ext.iter().copied().fold(f64::INFINITY, f64::min);
        let tumors = (0..count)
            .map(|_| {
                let radius = min_ext * rng.uniform(params.tumor_radius.0, params.tumor_radius.1);
                // uniform inside the head shrunk by the tumor and its margin
                let dir: [f64; 3] = [rng.normal() as f64, rng.normal() as f64, rng.normal() as f64];
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let r = rng.uniform(0.0, 1.0).cbrt();
                let c = [0, 1, 2].map(|a| centre[a] + (axes[a] - radius - 1.0).max(0.0) * r * dir[a] / norm);
                Tumor { centre: c, radius }
            })
            .collect();
        Self { centre, axes, tumors }
    }

    /// Tumor plus a one-voxel margin must lie inside the head.
    fn check(&self, params: &PhantomParams, labels: &[u8]) -> std::result::Result<(), String> {
        let d = params.dims;
        for i in 0..d.voxels() {
            let p = voxel_centre(d, i);
            let near_tumor = self.tumors.iter().any(|t| {
                (0..3).map(|a| (p[a] - t.centre[a]).powi(2)).sum::<f64>().sqrt() <= t.radius + 1.0
            });
            if near_tumor && self.head_radius(p) > 1.0 {
                return Err("tumor reaches outside the head".into());
            }
        }
        let n_tumor = labels.iter().filter(|&&l| l == TUMOR).count();
        let frac = n_tumor as f64 / d.voxels() as f64;
        if !(params.tumor_fraction.0..=params.tumor_fraction.1).contains(&frac) {
            return Err(format!("tumor fraction {frac:.4} outside {:?}", params.tumor_fraction));
        }
        if !labels.contains(&HEAD) {
            return Err("no head voxels remain".into());
        }
        Ok(())
    }
}

fn labels_for(g: &Geometry, d: Dims) -> Vec<u8> {
    (0..d.voxels())
        .map(|i| {
            let p = voxel_centre(d, i);
            if g.tumor_ratio(p) <= 1.0 {
                TUMOR
            } else if g.head_radius(p) <= 1.0 {
                HEAD
            } else {
                BACKGROUND
            }
        })
        .collect()
}

/// Smooth zero-mean texture with roughly unit standard deviation: white
/// noise averaged over a 3x3x3 box.
fn texture(d: Dims, rng: &mut Rng) -> Vec<f32> {
    let noise = rng.normals(d.voxels());
    let mut cur: Vec<f32> = noise;
    for axis in 0..3 {
        let mut next = vec![0.0f32; cur.len()];
        for i in 0..d.voxels() {
            let (x, y, z) = d.coords(i);
            let (pos, len) = match axis {
                0 => (x, d.width),
                1 => (y, d.height),
                _ => (z, d.depth),
            };
            let stride = match axis {
                0 => 1,
                1 => d.width,
                _ => d.width * d.height,
            };
            let mut s = cur[i];
            if pos > 0 {
                s += cur[i - stride];
            }
            if pos + 1 < len {
                s += cur[i + stride];
            }
            next[i] = s / 3.0;
        }
        cur = next;
    }
    let scale = 27f32.sqrt();
    cur.into_iter().map(|v| v * scale).collect()
}

fn render(g: &Geometry, params: &PhantomParams, labels: &[u8], rng: &mut Rng) -> Vec<f32> {
    let d = params.dims;
    let n = d.voxels();
    let mut out = Vec::with_capacity(params.modalities * n);
    for m in 0..params.modalities {
        let c = contrast(m, params.ring_contrast as f32);
        let tex = texture(d, rng);
        for i in 0..n {
            let p = voxel_centre(d, i);
            let noise = params.texture_amplitude as f32 * tex[i];
            let v = match labels[i] {
                BACKGROUND => -1.0,
                HEAD => {
                    let r = g.head_radius(p).min(1.0) as f32;
                    let mut v = c.head_centre + (c.head_edge - c.head_centre) * r * r + noise;
                    let t = g.tumor_ratio(p) as f32;
                    if t < 1.5 {
                        v += c.shell * (1.5 - t) / 0.5;
                    }
                    v
                }
                _ => {
                    let t = g.tumor_ratio(p) as f32;
                    let rim = ((t - 0.55) / 0.3).clamp(0.0, 1.0);
                    c.core + c.rim_boost * rim + 0.5 * noise
                }
            };
            out.push(v.clamp(-1.0, 1.0));
        }
    }
    out
}

fn mean_where(img: &[f32], labels: &[u8], class: u8) -> f64 {
    let (s, n) = img
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == class)
        .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
    s / n.max(1) as f64
}

/// Generates case `index`; the result depends only on `(params, index)`.
pub fn generate_phantom(params: &PhantomParams, index: usize) -> Result<Case> {
    params.validate()?;
    let mut rng = Rng::with_stream(params.seed, index as u64);
    let d = params.dims;
    let mut last = String::new();
    for _ in 0..MAX_ATTEMPTS {
        let g = Geometry::draw(params, &mut rng);
        let labels = labels_for(&g, d);
        if let Err(reason) = g.check(params, &labels) {
            last = reason;
            continue;
        }
        let image = render(&g, params, &labels, &mut rng);
        let gap = mean_where(&image[..d.voxels()], &labels, TUMOR) - mean_where(&image[..d.voxels()], &labels, HEAD);
        if gap < params.tumor_margin {
            last = format!("tumor/head contrast {gap:.3} below margin {}", params.tumor_margin);
            continue;
        }
        return Ok(Case {
            id: format!("{index:05}"),
            image: Volume::new(params.modalities, d, image)?,
            labels: LabelVolume::new(d, labels)?,
        });
    }
    Err(Error::Geometry { dims: d, attempts: MAX_ATTEMPTS, reason: format!("{last}; params {params:?}") })
}

/// Moves every tumor voxel of `labels` by `shift` voxels, filling the vacated
/// region with head and keeping the result inside the head support. Returns
/// `None` if the moved tumor would leave the head.
pub fn shift_tumor(labels: &LabelVolume, shift: [isize; 3]) -> Option<LabelVolume> {
    let d = labels.dims();
    let mut out: Vec<u8> = labels.labels().iter().map(|&l| if l == TUMOR { HEAD } else { l }).collect();
    for (i, &l) in labels.labels().iter().enumerate() {
        if l != TUMOR {
            continue;
        }
        let (x, y, z) = d.coords(i);
        let nx = x as isize + shift[0];
        let ny = y as isize + shift[1];
        let nz = z as isize + shift[2];
        if nx < 0 || ny < 0 || nz < 0 || nx >= d.width as isize || ny >= d.height as isize || nz >= d.depth as isize {
            return None;
        }
        let j = d.index(nx as usize, ny as usize, nz as usize);
        if out[j] == BACKGROUND {
            return None;
        }
        out[j] = TUMOR;
    }
    LabelVolume::new(d, out).ok()
}

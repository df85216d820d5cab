//! Volume files, phantom datasets on disk, preprocessing and label remapping.

pub mod phantom;
pub mod v3d;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{crop_or_pad, crop_or_pad_labels, rescale_intensity, resize, resize_labels, Dims, Interpolation, LabelVolume, Volume};

pub use phantom::{generate_phantom, Case, PhantomParams};
pub use v3d::{read_labels_v3d, read_v3d, write_labels_v3d, write_v3d};

pub const MANIFEST: &str = "manifest.txt";

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("case_{id}_img.v3d"))
}

pub fn label_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("case_{id}_lbl.v3d"))
}

pub fn write_case(dir: &Path, case: &Case) -> Result<()> {
    write_v3d(&case.image, &image_path(dir, &case.id))?;
    write_labels_v3d(&case.labels, &label_path(dir, &case.id))
}

pub fn read_case(dir: &Path, id: &str) -> Result<Case> {
    let image = read_v3d(&image_path(dir, id))?;
    let labels = read_labels_v3d(&label_path(dir, id))?;
    if image.dims() != labels.dims() {
        return Err(Error::format(
            image_path(dir, id),
            format!("image {} and labels {} are not aligned", image.dims(), labels.dims()),
        ));
    }
    Ok(Case { id: id.to_string(), image, labels })
}

/// Manifest: one case id per line; `#` starts an annotation line.
pub fn write_manifest(dir: &Path, ids: &[String], annotations: &[String]) -> Result<()> {
    let mut text = String::new();
    for a in annotations {
        text.push_str(&format!("# {a}\n"));
    }
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    let p = dir.join(MANIFEST);
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<String>> {
    let p = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let ids: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect();
    if let Some(bad) = ids.iter().find(|id| id.contains(char::is_whitespace) || id.contains('/')) {
        return Err(Error::format(&p, format!("invalid case id {bad:?}")));
    }
    Ok(ids)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Case>> {
    read_manifest(dir)?.iter().map(|id| read_case(dir, id)).collect()
}

/// Writes phantoms `first..first + count` and a manifest listing them.
pub fn write_phantom_dataset(dir: &Path, params: &PhantomParams, first: usize, count: usize) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::with_capacity(count);
    for i in first..first + count {
        let case = generate_phantom(params, i)?;
        write_case(dir, &case)?;
        ids.push(case.id);
    }
    write_manifest(dir, &ids, &[format!("phantoms seed={} dims={}", params.seed, params.dims)])?;
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessOptions {
    /// Cube the input is centre-cropped or padded to before resizing.
    pub intermediate: Option<Dims>,
    pub target: Dims,
    /// Percentiles (in percent) mapped onto -1 and 1.
    pub percentiles: (f64, f64),
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self { intermediate: None, target: Dims::cube(16), percentiles: (0.5, 99.5) }
    }
}

impl PreprocessOptions {
    pub fn paper() -> Self {
        Self { intermediate: Some(Dims::cube(192)), target: Dims::cube(128), percentiles: (0.5, 99.5) }
    }
}

/// Linear-interpolated percentile of `values` (`q` in percent).
pub fn percentile(values: &[f32], q: f64) -> f32 {
    let mut v: Vec<f32> = values.to_vec();
    v.sort_by(f32::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let f = pos - lo as f64;
    (v[lo] as f64 * (1.0 - f) + v[hi] as f64 * f) as f32
}

/// Crop/pad, resize (trilinear image, nearest labels) and map each channel's
/// percentile range onto [-1, 1].
pub fn preprocess(image: &Volume, labels: &LabelVolume, opts: &PreprocessOptions) -> Result<(Volume, LabelVolume)> {
    if image.dims() != labels.dims() {
        return Err(Error::Shape { op: "preprocess", left: image.shape_string(), right: labels.dims().to_string() });
    }
    let (lo_q, hi_q) = opts.percentiles;
    if !(0.0..hi_q).contains(&lo_q) || hi_q > 100.0 {
        return Err(Error::Config(format!("invalid percentiles {:?}", opts.percentiles)));
    }
    let (mut img, mut lbl) = (image.clone(), labels.clone());
    if let Some(mid) = opts.intermediate {
        let fill = img.min_max().0;
        img = crop_or_pad(&img, mid, fill)?;
        lbl = crop_or_pad_labels(&lbl, mid)?;
    }
    img = resize(&img, opts.target, Interpolation::Trilinear)?;
    lbl = resize_labels(&lbl, opts.target)?;
    let mut channels = Vec::with_capacity(img.channels());
    for c in 0..img.channels() {
        let ch = img.slice_channels(c..c + 1)?;
        let lo = percentile(ch.voxels(), lo_q);
        let hi = percentile(ch.voxels(), hi_q);
        channels.push(if hi > lo { rescale_intensity(&ch, lo, hi)? } else { Volume::filled(1, ch.dims(), -1.0) });
    }
    let voxels = channels.into_iter().flat_map(Volume::into_voxels).collect();
    Ok((Volume::new(img.channels(), img.dims(), voxels)?, lbl))
}

/// Adds a brain label from an intensity threshold on a reference channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BrainThreshold<'a> {
    pub reference: &'a Volume,
    pub channel: usize,
    pub threshold: f32,
    pub label: u8,
    /// Labels (after mapping) that are never overwritten.
    pub tumor_labels: Vec<u8>,
}

/// Applies `mapping` to every voxel, then optionally assigns the brain label
/// where the reference channel exceeds the threshold. The head support is
/// where the reference exceeds its own minimum, so background stays put.
pub fn remap_labels(labels: &LabelVolume, mapping: &BTreeMap<u8, u8>, brain: Option<&BrainThreshold>) -> Result<LabelVolume> {
    let mut out = Vec::with_capacity(labels.labels().len());
    for (i, l) in labels.labels().iter().enumerate() {
        match mapping.get(l) {
            Some(&m) => out.push(m),
            None => return Err(Error::Invalid(format!("label {l} at voxel {i} has no mapping"))),
        }
    }
    if let Some(b) = brain {
        if b.reference.dims() != labels.dims() || b.channel >= b.reference.channels() {
            return Err(Error::Shape { op: "remap_labels", left: b.reference.shape_string(), right: labels.dims().to_string() });
        }
        let reference = b.reference.channel(b.channel);
        let floor = reference.iter().copied().fold(f32::INFINITY, f32::min);
        for (l, &r) in out.iter_mut().zip(reference) {
            if r > b.threshold && r > floor && !b.tumor_labels.contains(l) {
                *l = b.label;
            }
        }
    }
    LabelVolume::new(labels.dims(), out)
}

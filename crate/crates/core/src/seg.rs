//! Downstream tumor segmentation: a time-free U-Net trained with binary
//! cross-entropy on real, synthetic or mixed phantom sets, evaluated with
//! Dice / IoU / accuracy / recall / precision.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxdiff_tensor::{Graph, ParamStore, UNet, UNetSpec};

use crate::checkpoint::Checkpoint;
use crate::data::phantom::TUMOR;
use crate::data::{read_case, read_manifest, Case};
use crate::denoiser::{stack, unstack};
use crate::error::{Error, Result};
use crate::metrics::{seg_metrics, MetricReport, SegScores};
use crate::rng::Rng;
use crate::training::{adam_update, AdamConfig};
use crate::volume::{Dims, LabelVolume, Volume};

/// Probability clamp inside the BCE logarithms.
pub const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy of probabilities against a 0/1 target.
pub fn bce_loss(pred_prob: &Volume, truth: &Volume) -> Result<f64> {
    if !pred_prob.same_shape(truth) {
        return Err(Error::Shape { op: "bce_loss", left: pred_prob.shape_string(), right: truth.shape_string() });
    }
    let sum: f64 = pred_prob
        .voxels()
        .iter()
        .zip(truth.voxels())
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let y = y as f64;
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred_prob.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegModelConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks: usize,
    pub groupnorm_groups: usize,
    pub size: Dims,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self { base_channels: 8, channel_multipliers: vec![1, 2], num_res_blocks: 1, groupnorm_groups: 4, size: Dims::cube(16) }
    }
}

impl SegModelConfig {
    pub fn unet_spec(&self) -> UNetSpec {
        UNetSpec {
            in_channels: 1,
            out_channels: 1,
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            num_res_blocks: self.num_res_blocks,
            attention_levels: vec![],
            middle_attention: false,
            attention_heads: 1,
            max_groups: self.groupnorm_groups,
            time_embed_dim: None,
            zero_output: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub model: SegModelConfig,
    pub epochs: u64,
    /// Overrides `epochs * ceil(cases / batch_size)` when set.
    pub steps: Option<u64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub threshold: f64,
    /// Supplied by the run configuration's top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            model: SegModelConfig::default(),
            epochs: 100,
            steps: None,
            batch_size: 4,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl SegConfig {
    pub fn total_steps(&self, cases: usize) -> u64 {
        self.steps.unwrap_or(self.epochs * cases.div_ceil(self.batch_size) as u64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("invalid segmentation settings: {self:?}")));
        }
        let d = self.model.size;
        self.model.unet_spec().check_size(&[d.depth, d.height, d.width])?;
        Ok(())
    }
}

/// One training or test example: a single-channel image and its binary
/// tumor mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegCase {
    pub id: String,
    pub image: Volume,
    pub truth: LabelVolume,
}

impl SegCase {
    /// Uses image channel 0 and the tumor class of the labels.
    pub fn from_case(case: &Case) -> Result<Self> {
        let image = case.image.slice_channels(0..1)?;
        let truth = LabelVolume::new(case.labels.dims(), case.labels.labels().iter().map(|&l| (l == TUMOR) as u8).collect())?;
        Ok(Self { id: case.id.clone(), image, truth })
    }
}

pub struct SegModel {
    pub config: SegConfig,
    net: UNet,
    pub params: ParamStore<f32>,
}

impl SegModel {
    pub fn build(config: SegConfig) -> Result<Self> {
        config.validate()?;
        let net = UNet::new(config.model.unet_spec())?;
        let params = net.init(Rng::new(config.seed).as_rand());
        Ok(Self { config, net, params })
    }

    fn logits(&self, g: &mut Graph<f32>, images: &[Volume]) -> Result<voxdiff_tensor::NodeId> {
        let x = g.input(stack::<f32>(images)?);
        Ok(self.net.forward(g, &self.params, x, &[])?.0)
    }

    /// Foreground probabilities.
    pub fn predict(&self, images: &[Volume]) -> Result<Vec<Volume>> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, images)?;
        let p = g.sigmoid(logits);
        unstack(g.value(p))
    }

    pub fn segment(&self, image: &Volume, threshold: f64) -> Result<LabelVolume> {
        let p = self.predict(std::slice::from_ref(image))?.remove(0);
        LabelVolume::new(p.dims(), p.voxels().iter().map(|&v| (v as f64 > threshold) as u8).collect())
    }

    fn loss_and_gradients(&self, images: &[Volume], truths: &[Volume]) -> Result<(f64, ParamStore<f32>)> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, images)?;
        let p = g.sigmoid(logits);
        let target = stack::<f32>(truths)?;
        let loss = g.bce_loss(p, &target, BCE_CLAMP as f32)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite("segmentation loss".into()));
        }
        let grads = g.backward(loss)?;
        Ok((value, g.param_grads(&grads, &self.params)))
    }

    pub fn to_checkpoint(&self, m: &ParamStore<f32>, v: &ParamStore<f32>, step: u64, rng: &Rng, losses: &[f64]) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config_text: toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?,
            schedule: None,
            params: self.params.clone(),
            first_moments: m.clone(),
            second_moments: v.clone(),
            step,
            rng: rng.state(),
            loss_capacity: losses.len(),
            losses: losses.to_vec(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let config: SegConfig = toml::from_str(&ck.config_text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut model = Self::build(config)?;
        if !model.params.same_layout(&ck.params) {
            return Err(Error::format(path, "parameters do not match the recorded segmentation model"));
        }
        model.params = ck.params;
        Ok(model)
    }
}

pub struct SegTrainResult {
    pub model: SegModel,
    pub losses: Vec<f64>,
}

/// Trains with Adam and BCE. Each batch item is drawn with replacement as
/// `floor(u * n)` for a uniform `u`, so duplicating every case in place
/// leaves the trajectory unchanged.
pub fn seg_train(config: &SegConfig, cases: &[SegCase], checkpoint: Option<&Path>) -> Result<SegTrainResult> {
    if cases.is_empty() {
        return Err(Error::Invalid("segmentation training set is empty".into()));
    }
    let mut model = SegModel::build(config.clone())?;
    let size = config.model.size;
    if let Some(c) = cases.iter().find(|c| c.image.dims() != size || c.image.channels() != 1 || c.truth.dims() != size) {
        return Err(Error::Shape { op: "seg_train", left: c.image.shape_string(), right: format!("1x{size}") });
    }
    let truths: Vec<Volume> = cases.iter().map(|c| c.truth.binary(1)).collect();
    let mut m = model.params.zeros_like();
    let mut v = model.params.zeros_like();
    let mut rng = Rng::with_stream(config.seed, 1);
    let steps = config.total_steps(cases.len());
    let mut losses = Vec::with_capacity(steps as usize);
    let n = cases.len() as f64;
    for step in 1..=steps {
        let picks: Vec<usize> = (0..config.batch_size).map(|_| (rng.uniform(0.0, 1.0) * n).floor() as usize).collect();
        let images: Vec<Volume> = picks.iter().map(|&i| cases[i].image.clone()).collect();
        let targets: Vec<Volume> = picks.iter().map(|&i| truths[i].clone()).collect();
        let (loss, grads) = model.loss_and_gradients(&images, &targets)?;
        adam_update(&mut model.params, &grads, &mut m, &mut v, step, config.learning_rate, config.adam)?;
        losses.push(loss);
        if step % 100 == 0 {
            log::info!("seg step {step}/{steps}: loss {loss:.5}");
        }
    }
    if let Some(path) = checkpoint {
        model.to_checkpoint(&m, &v, steps, &rng, &losses)?.save(path)?;
    }
    Ok(SegTrainResult { model, losses })
}

/// Per-case scores at `threshold` with mean ± std aggregates.
pub fn seg_evaluate(model: &SegModel, cases: &[SegCase], threshold: f64) -> Result<MetricReport> {
    if cases.is_empty() {
        return Err(Error::Invalid("segmentation test set is empty".into()));
    }
    let mut report = MetricReport::new("segmentation");
    report.note("threshold", threshold);
    report.note("cases", cases.len());
    for c in cases {
        let pred = model.segment(&c.image, threshold)?;
        report.add_case(c.id.clone(), scores_row(&seg_metrics(&pred, &c.truth)?));
    }
    Ok(report)
}

pub fn scores_row(s: &SegScores) -> Vec<(String, f64)> {
    SegScores::NAMES.iter().map(|n| n.to_string()).zip(s.values()).collect()
}

// ---------------------------------------------------------------------------
// Experiment specification

/// A case identity that survives copying between datasets: the dataset
/// directory and the case id.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CaseKey {
    pub dataset: PathBuf,
    pub id: String,
}

pub const SOURCES: &str = "sources.txt";

/// Synthetic datasets record the mask each case was sampled from as
/// `id<TAB>mask dataset<TAB>mask id` lines.
pub fn write_sources(dir: &Path, rows: &[(String, PathBuf, String)]) -> Result<()> {
    let text: String = rows.iter().map(|(id, d, m)| format!("{id}\t{}\t{m}\n", d.display())).collect();
    let p = dir.join(SOURCES);
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn canonical(dir: &Path) -> Result<PathBuf> {
    dir.canonicalize().map_err(|e| Error::io(dir, e))
}

/// Keys a case stands for: itself and, for synthetic cases, its source mask.
pub fn case_keys(dir: &Path, id: &str) -> Result<Vec<CaseKey>> {
    let mut keys = vec![CaseKey { dataset: canonical(dir)?, id: id.to_string() }];
    let p = dir.join(SOURCES);
    if p.exists() {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        for line in text.lines() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() == 3 && f[0] == id {
                keys.push(CaseKey { dataset: canonical(Path::new(f[1]))?, id: f[2].to_string() });
            }
        }
    }
    Ok(keys)
}

/// Hard error if any training case, or the mask it was synthesised from, is
/// in the test set.
pub fn check_disjoint(train: &[CaseKey], test: &[CaseKey]) -> Result<()> {
    let test: BTreeSet<&CaseKey> = test.iter().collect();
    match train.iter().find(|k| test.contains(k)) {
        Some(k) => Err(Error::Invalid(format!("test case {} of {} leaks into the training mixture", k.id, k.dataset.display()))),
        None => Ok(()),
    }
}

/// TOML experiment description: named dataset directories, a test set,
/// mixtures and the segmentation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub datasets: std::collections::BTreeMap<String, PathBuf>,
    pub test: String,
    #[serde(rename = "mixture")]
    pub mixtures: Vec<MixtureSpec>,
    /// Segmentation settings; the run configuration's apply when absent.
    #[serde(default)]
    pub seg: Option<SegConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub name: String,
    #[serde(rename = "use")]
    pub sources: Vec<String>,
}

impl ExperimentSpec {
    /// Relative dataset paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut spec: Self = toml::from_str(text).map_err(|e| Error::Config(format!("experiment spec: {e}")))?;
        for p in spec.datasets.values_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if !spec.datasets.contains_key(&spec.test) {
            return Err(Error::Config(format!("test dataset {:?} is not declared", spec.test)));
        }
        if spec.mixtures.is_empty() {
            return Err(Error::Config("experiment declares no mixtures".into()));
        }
        Ok(spec)
    }

    fn dataset(&self, name: &str) -> Result<&Path> {
        self.datasets.get(name).map(PathBuf::as_path).ok_or_else(|| Error::Config(format!("unknown dataset {name:?}")))
    }
}

/// Parses `dataset:count`.
pub fn parse_source(s: &str) -> Result<(&str, usize)> {
    let (name, count) = s.split_once(':').ok_or_else(|| Error::Config(format!("mixture entry {s:?} is not dataset:count")))?;
    let count = count.trim().parse().map_err(|_| Error::Config(format!("mixture entry {s:?} has a bad count")))?;
    Ok((name.trim(), count))
}

/// Resolves a mixture to `(dataset dir, id)` pairs. Ids repeated within one
/// dataset are kept once.
pub fn resolve_mixture(spec: &ExperimentSpec, mixture: &MixtureSpec) -> Result<Vec<(PathBuf, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for entry in &mixture.sources {
        let (name, count) = parse_source(entry)?;
        let dir = spec.dataset(name)?;
        let ids = read_manifest(dir)?;
        if count > ids.len() {
            return Err(Error::Config(format!("mixture {} wants {count} cases from {name} but only {} exist", mixture.name, ids.len())));
        }
        for id in &ids[..count] {
            if seen.insert((dir.to_path_buf(), id.clone())) {
                out.push((dir.to_path_buf(), id.clone()));
            }
        }
    }
    Ok(out)
}

pub fn load_seg_cases(items: &[(PathBuf, String)]) -> Result<Vec<SegCase>> {
    items.iter().map(|(d, id)| SegCase::from_case(&read_case(d, id)?)).collect()
}

/// Checkpoint path of a mixture's segmentation model.
pub fn mixture_checkpoint(out_dir: &Path, mixture: &str) -> PathBuf {
    out_dir.join(format!("{mixture}.mdck"))
}

fn test_items(spec: &ExperimentSpec) -> Result<Vec<(PathBuf, String)>> {
    let test_dir = spec.dataset(&spec.test)?;
    Ok(read_manifest(test_dir)?.into_iter().map(|id| (test_dir.to_path_buf(), id)).collect())
}

/// Trains one model per mixture after checking it is disjoint from the test
/// set, writing `<mixture>.mdck` under `out_dir`.
pub fn train_mixtures(spec: &ExperimentSpec, config: &SegConfig, out_dir: &Path) -> Result<Vec<(String, SegTrainResult)>> {
    let mut test_keys = Vec::new();
    for (d, id) in &test_items(spec)? {
        test_keys.extend(case_keys(d, id)?);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = Vec::new();
    for mixture in &spec.mixtures {
        let items = resolve_mixture(spec, mixture)?;
        let mut keys = Vec::new();
        for (d, id) in &items {
            keys.extend(case_keys(d, id)?);
        }
        check_disjoint(&keys, &test_keys)?;
        let cases = load_seg_cases(&items)?;
        log::info!("mixture {}: {} training cases", mixture.name, cases.len());
        let trained = seg_train(config, &cases, Some(&mixture_checkpoint(out_dir, &mixture.name)))?;
        out.push((mixture.name.clone(), trained));
    }
    Ok(out)
}

/// Evaluates every mixture's saved model on the test set; writes one report
/// per mixture and `comparison.txt`.
pub fn evaluate_mixtures(spec: &ExperimentSpec, threshold: f64, out_dir: &Path) -> Result<(Vec<(String, MetricReport)>, String)> {
    let test = load_seg_cases(&test_items(spec)?)?;
    let mut reports = Vec::new();
    for mixture in &spec.mixtures {
        let model = SegModel::load(&mixture_checkpoint(out_dir, &mixture.name))?;
        let mut report = seg_evaluate(&model, &test, threshold)?;
        report.title = format!("segmentation: {}", mixture.name);
        report.note("training mixture", mixture.sources.join(" + "));
        report.write(out_dir, &mixture.name)?;
        reports.push((mixture.name.clone(), report));
    }
    let table = comparison_table(&reports, threshold);
    let p = out_dir.join("comparison.txt");
    std::fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
    Ok((reports, table))
}

/// Trains one model per mixture, evaluates each on the test set and returns
/// the per-mixture reports plus a comparison table.
pub fn run_experiment(spec: &ExperimentSpec, config: &SegConfig, out_dir: &Path) -> Result<(Vec<(String, MetricReport)>, String)> {
    train_mixtures(spec, config, out_dir)?;
    evaluate_mixtures(spec, config.threshold, out_dir)
}

/// One `mean±std` row per mixture.
pub fn comparison_table(reports: &[(String, MetricReport)], threshold: f64) -> String {
    let mut s = format!("# threshold {threshold}\n{:<16}", "mixture");
    for n in SegScores::NAMES {
        s.push_str(&format!("  {n:>15}"));
    }
    s.push('\n');
    for (name, r) in reports {
        s.push_str(&format!("{name:<16}"));
        let agg = r.aggregates();
        for n in SegScores::NAMES {
            let a = agg[n];
            s.push_str(&format!("  {:>15}", format!("{:.4}±{:.4}", a.mean, a.std)));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, write_phantom_dataset, PhantomParams};

    #[test]
    fn bce_examples() {
        let d = Dims::cube(2);
        let half = Volume::filled(1, d, 0.5);
        let y = Volume::new(1, d, vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((bce_loss(&half, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&y, &y).unwrap() <= 1e-6);
        assert!(bce_loss(&half, &Volume::zeros(1, Dims::cube(3))).is_err());
    }

    #[test]
    fn graph_bce_matches_plain_function() {
        let d = Dims::cube(3);
        let mut rng = Rng::new(2);
        let p = Volume::new(1, d, (0..27).map(|_| rng.uniform(0.01, 0.99) as f32).collect()).unwrap();
        let y = Volume::new(1, d, (0..27).map(|i| (i % 3 == 0) as u8 as f32).collect()).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let node = g.input(stack::<f64>(std::slice::from_ref(&p)).unwrap());
        let loss = g.bce_loss(node, &stack::<f64>(std::slice::from_ref(&y)).unwrap(), BCE_CLAMP).unwrap();
        assert!((g.value(loss).data()[0] - bce_loss(&p, &y).unwrap()).abs() < 1e-12);
    }

    fn tiny_phantoms() -> PhantomParams {
        PhantomParams {
            dims: Dims::cube(8),
            head_axes: (0.9, 0.95),
            tumor_radius: (0.14, 0.18),
            tumor_fraction: (0.002, 0.3),
            ..PhantomParams::default()
        }
    }

    fn small_cases(n: usize) -> Vec<SegCase> {
        let p = tiny_phantoms();
        (0..n).map(|i| SegCase::from_case(&generate_phantom(&p, i).unwrap()).unwrap()).collect()
    }

    fn small_config(steps: u64) -> SegConfig {
        SegConfig {
            model: SegModelConfig { base_channels: 4, size: Dims::cube(8), ..SegModelConfig::default() },
            steps: Some(steps),
            batch_size: 2,
            ..SegConfig::default()
        }
    }

    #[test]
    fn duplicated_cases_give_the_same_trajectory() {
        let cases = small_cases(3);
        let doubled: Vec<SegCase> = cases.iter().flat_map(|c| [c.clone(), c.clone()]).collect();
        let cfg = small_config(4);
        let a = seg_train(&cfg, &cases, None).unwrap();
        let b = seg_train(&cfg, &doubled, None).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let c = &small_cases(1)[0];
        assert_eq!(seg_metrics(&c.truth, &c.truth).unwrap().values(), [1.0; 5]);
    }

    #[test]
    fn checkpoint_round_trip_and_report_consistency() {
        let dir = tempfile::tempdir().unwrap();
        let cases = small_cases(2);
        let cfg = small_config(2);
        let ck = dir.path().join("seg.mdck");
        let trained = seg_train(&cfg, &cases, Some(&ck)).unwrap();
        let loaded = SegModel::load(&ck).unwrap();
        assert_eq!(loaded.params, trained.model.params);
        let r = seg_evaluate(&loaded, &cases, 0.5).unwrap();
        assert_eq!(r, seg_evaluate(&trained.model, &cases, 0.5).unwrap());
        for (_, row) in &r.cases {
            assert_eq!(row["dice"], 2.0 * row["iou"] / (1.0 + row["iou"]));
        }
        let agg = r.aggregates();
        let dice: Vec<f64> = r.cases.iter().map(|(_, row)| row["dice"]).collect();
        assert_eq!(agg["dice"].mean, dice.iter().sum::<f64>() / dice.len() as f64);
    }

    #[test]
    fn mixtures_and_leakage() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path();
        let p = tiny_phantoms();
        write_phantom_dataset(&base.join("real"), &p, 0, 4).unwrap();
        write_phantom_dataset(&base.join("test"), &p, 100, 2).unwrap();
        write_phantom_dataset(&base.join("synth"), &p, 200, 5).unwrap();
        let text = r#"
test = "test"
[datasets]
real = "real"
test = "test"
synth = "synth"
[[mixture]]
name = "real"
use = ["real:4"]
[[mixture]]
name = "synth3"
use = ["synth:3", "synth:2"]
"#;
        let spec = ExperimentSpec::parse(text, base).unwrap();
        assert_eq!(resolve_mixture(&spec, &spec.mixtures[0]).unwrap().len(), 4);
        assert_eq!(resolve_mixture(&spec, &spec.mixtures[1]).unwrap().len(), 3);
        let too_many = MixtureSpec { name: "x".into(), sources: vec!["real:5".into()] };
        assert!(resolve_mixture(&spec, &too_many).is_err());

        let out = base.join("out");
        let (reports, table) = run_experiment(&spec, &small_config(2), &out).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(table.lines().count(), 4, "{table}");
        assert!(table.contains('±'));
        assert!(out.join("synth3.kv").exists() && out.join("real.mdck").exists());
        let (again, _) = evaluate_mixtures(&spec, 0.5, &out).unwrap();
        assert_eq!(again, reports);

        let test_keys = case_keys(&base.join("test"), "00100").unwrap();
        // synthetic case sampled from a test mask leaks
        write_sources(&base.join("synth"), &[("00200".into(), base.join("test"), "00100".into())]).unwrap();
        let leak = case_keys(&base.join("synth"), "00200").unwrap();
        assert!(check_disjoint(&leak, &test_keys).is_err());
        assert!(check_disjoint(&case_keys(&base.join("real"), "00000").unwrap(), &test_keys).is_ok());
        assert!(ExperimentSpec::parse("test = \"nope\"\n[datasets]\n[[mixture]]\nname=\"a\"\nuse=[]\n", base).is_err());
    }
}

//! Supervised training: loss, parameter groups, AdamW, gradient checking
//! and checkpoints.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::Trainability;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::{ModelConfig, RsktModel};
use crate::params::{GradMask, ModuleKind, ParamStore, Session};
use crate::sample::{ImageSample, LabelMap};
use crate::tensor::Tensor;
use crate::tensor_io;
use crate::transfer::{DecoderConfig, SegLogits};
use crate::vocab::ClassVocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub clip_mode: Trainability,
    pub dino_mode: Trainability,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            weight_decay: 1e-4,
            batch_size: 8,
            max_iters: 200,
            seed: 0,
            clip_mode: Trainability::Attention,
            dino_mode: Trainability::Frozen,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("train.lr = {} must be finite and non-negative", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "train.weight_decay = {} must be finite and non-negative",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `[N_t, H, W]` logits against a mask. Returns the
/// loss and the number of non-ignored pixels (the loss is 0 when that is 0).
pub fn cross_entropy_loss(logits: &SegLogits, mask: &LabelMap, ignore_value: i64) -> Result<(f64, usize)> {
    let s = logits.values.shape();
    let (n, h, w) = (s[0], s[1], s[2]);
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs logits {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let targets = mask.targets(n, ignore_value)?;
    let hw = h * w;
    let pixel_major = Tensor::from_fn(&[hw, n], |i| logits.values.data()[i[1] * hw + i[0]]);
    let mut g = Graph::new();
    let x = g.constant(pixel_major);
    let (l, count) = g.cross_entropy(x, targets)?;
    Ok((g.value(l).data()[0], count))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamGroup {
    pub name: String,
    /// Parameter name to shape.
    pub tensors: BTreeMap<String, Vec<usize>>,
    pub trainable: bool,
}

fn mode_for(kind: ModuleKind, clip: Trainability, dino: Trainability) -> Option<Trainability> {
    match kind {
        ModuleKind::Clip => Some(clip),
        ModuleKind::Dino => Some(dino),
        ModuleKind::RemoteClip => Some(Trainability::Frozen),
        _ => None,
    }
}

/// Splits every parameter into exactly one group. Encoders in attention
/// mode produce a frozen group and a trainable `<module>/attention` group;
/// RemoteCLIP is always frozen; everything else is trainable.
pub fn build_param_groups(params: &ParamStore, clip_mode: Trainability, dino_mode: Trainability) -> Vec<ParamGroup> {
    let mut groups: BTreeMap<(ModuleKind, bool), ParamGroup> = BTreeMap::new();
    for (name, p) in params.iter() {
        let kind = ModuleKind::of(name);
        let (label, trainable, attn_split) = match mode_for(kind, clip_mode, dino_mode) {
            None => (kind.label().to_string(), true, false),
            Some(Trainability::Frozen) => (kind.label().to_string(), false, false),
            Some(Trainability::Full) => (kind.label().to_string(), true, false),
            Some(Trainability::Attention) if p.attention => {
                (format!("{}/attention", kind.label()), true, true)
            }
            Some(Trainability::Attention) => (kind.label().to_string(), false, false),
        };
        groups
            .entry((kind, attn_split))
            .or_insert_with(|| ParamGroup {
                name: label,
                tensors: BTreeMap::new(),
                trainable,
            })
            .tensors
            .insert(name.to_string(), p.value.shape().to_vec());
    }
    groups.into_values().collect()
}

pub fn trainable_names(groups: &[ParamGroup]) -> HashSet<String> {
    groups
        .iter()
        .filter(|g| g.trainable)
        .flat_map(|g| g.tensors.keys().cloned())
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
}

pub fn count_params(groups: &[ParamGroup]) -> ParamCount {
    let mut c = ParamCount::default();
    for g in groups {
        let n: usize = g.tensors.values().map(|s| s.iter().product::<usize>()).sum();
        c.total += n;
        if g.trainable {
            c.trainable += n;
        }
    }
    c
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Applies one update to every parameter with a gradient in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (name, grad) in grads {
            let p = params.tensor_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.numel()], vec![0.0; grad.numel()]));
            for (((x, &gr), mi), vi) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *x -= self.lr * self.weight_decay * *x;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub groups: Vec<ParamGroup>,
}

/// Seeded sample order: shuffled epochs concatenated.
pub fn batch_schedule(n: usize, batch: usize, iters: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = Vec::new();
    let b = batch.min(n);
    (0..iters)
        .map(|_| {
            (0..b)
                .map(|_| {
                    if pool.is_empty() {
                        pool = (0..n).collect();
                        pool.shuffle(&mut rng);
                        pool.reverse();
                    }
                    pool.pop().expect("refilled")
                })
                .collect()
        })
        .collect()
}

/// One forward and backward over `batch`, returning the batch-mean loss and
/// gradients of the parameters in `trainable`.
pub fn loss_and_grads(
    model: &RsktModel,
    batch: &[&ImageSample],
    text: &Tensor,
    trainable: &HashSet<String>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let mut s = Session::new(&model.params, GradMask::Only(trainable.clone()));
    let mut total: Option<Var> = None;
    for sample in batch {
        let (l, _) = model.loss_on_graph(&mut g, &mut s, sample, text)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Empty("empty batch".into()))?;
    let loss = g.scale(total, 1.0 / batch.len() as f64);
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss);
    let mut out = BTreeMap::new();
    for (name, &v) in s.bound() {
        if trainable.contains(name) {
            if let Some(t) = grads.get(v) {
                out.insert(name.clone(), t);
            }
        }
    }
    Ok((value, out))
}

/// Trains `model` in place on labelled `data`; the vocabulary names the
/// label indices.
pub fn train(model: &mut RsktModel, data: &[ImageSample], vocab: &ClassVocabulary, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set has no samples".into()));
    }
    let text = model.text_embeddings(vocab)?;
    let groups = build_param_groups(&model.params, cfg.clip_mode, cfg.dino_mode);
    let trainable = trainable_names(&groups);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.max_iters);
    for (step, idx) in batch_schedule(data.len(), cfg.batch_size, cfg.max_iters, cfg.seed)
        .into_iter()
        .enumerate()
    {
        let batch: Vec<&ImageSample> = idx.iter().map(|&i| &data[i]).collect();
        let (loss, grads) = loss_and_grads(model, &batch, &text, &trainable).map_err(|e| match e {
            Error::NonFinite(m) | Error::Degenerate(m) => Error::NonFinite(format!("step {step}: {m}")),
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step} is {loss}")));
        }
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name} at step {step}")));
        }
        log::debug!("step {step} loss {loss}");
        losses.push(loss);
        opt.step(&mut model.params, &grads)?;
    }
    Ok(TrainOutcome { losses, groups })
}

/// `step,loss` rows.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn modules(&self) -> HashSet<ModuleKind> {
        self.entries.iter().map(|e| ModuleKind::of(&e.name)).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub min_coords: usize,
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            min_coords: 50,
            step: 1e-5,
            floor: 1e-6,
            seed: 0,
        }
    }
}

/// Compares reverse-mode gradients of a scalar `objective` with central
/// differences on sampled coordinates: one per tensor, then random extra
/// coordinates up to `min_coords`.
pub fn gradient_check<F>(params: &ParamStore, objective: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &mut Session) -> Result<Var>,
{
    if params.is_empty() {
        return Ok(GradCheckReport::default());
    }
    let mut g = Graph::new();
    let mut s = Session::new(params, GradMask::All);
    let root = objective(&mut g, &mut s)?;
    let grads = g.backward(root);
    let bound = s.bound().clone();

    let names: Vec<String> = params.names().map(String::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords: Vec<(String, usize)> = names
        .iter()
        .map(|n| (n.clone(), rng.random_range(0..params.tensor(n).unwrap().numel())))
        .collect();
    while coords.len() < opts.min_coords {
        let n = &names[rng.random_range(0..names.len())];
        coords.push((n.clone(), rng.random_range(0..params.tensor(n).unwrap().numel())));
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let mut s = Session::new(store, GradMask::None);
        let r = objective(&mut g, &mut s)?;
        Ok(g.value(r).data()[0])
    };
    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for (name, index) in coords {
        let analytic = match bound.get(&name).and_then(|&v| grads.get(v)) {
            Some(t) => t.data()[index],
            None => 0.0,
        };
        let orig = work.tensor(&name)?.data()[index];
        work.tensor_mut(&name)?.data_mut()[index] = orig + opts.step;
        let plus = eval(&work)?;
        work.tensor_mut(&name)?.data_mut()[index] = orig - opts.step;
        let minus = eval(&work)?;
        work.tensor_mut(&name)?.data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
        report.max_rel_err = report.max_rel_err.max(rel_err);
        report.entries.push(GradCheckEntry {
            name,
            index,
            analytic,
            numeric,
            rel_err,
        });
    }
    Ok(report)
}

/// Gradient check of the full model's training loss on one sample, over
/// every parameter whatever its trainability.
pub fn model_gradient_check(
    model: &RsktModel,
    sample: &ImageSample,
    vocab: &ClassVocabulary,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let text = model.text_embeddings(vocab)?;
    gradient_check(
        &model.params,
        |g, s| Ok(model.loss_on_graph(g, s, sample, &text)?.0),
        opts,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub attention: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub params: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one tensor file per parameter plus `manifest.json`.
pub fn save_checkpoint(model: &RsktModel, groups: &[ParamGroup], dir: &Path) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let trainable = trainable_names(groups);
    let mut entries = Vec::with_capacity(model.params.len());
    for (name, p) in model.params.iter() {
        let file = format!("{name}.rskt");
        tensor_io::write(&dir.join(&file), &p.value)?;
        entries.push(ManifestEntry {
            name: name.to_string(),
            file,
            shape: p.value.shape().to_vec(),
            trainable: trainable.contains(name),
            attention: p.attention,
        });
    }
    let manifest = CheckpointManifest {
        model: model.model.clone(),
        fusion: model.fusion.clone(),
        decoder: model.decoder.clone(),
        params: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<RsktModel> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.clone(), source })?;
    let mut model = RsktModel::new(manifest.model, manifest.fusion, manifest.decoder)?;
    let mut params = ParamStore::new();
    for e in &manifest.params {
        let t = tensor_io::read(&dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::TensorFile {
                path: dir.join(&e.file),
                reason: format!("shape {:?} but manifest says {:?}", t.shape(), e.shape),
            });
        }
        params.insert(e.name.clone(), t, e.attention);
    }
    let expected: Vec<&str> = model.params.names().collect();
    let got: Vec<&str> = params.names().collect();
    if expected != got {
        return Err(Error::Config(format!(
            "checkpoint {} does not match its configuration's parameter set",
            dir.display()
        )));
    }
    model.params = params;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderKind, EncoderSpec};
    use crate::model::tests::small;
    use crate::synth;

    fn seg(n: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> SegLogits {
        SegLogits {
            values: Tensor::from_fn(&[n, h, w], |i| f(i[0], i[1], i[2])),
        }
    }

    #[test]
    fn cross_entropy_values() {
        let mask = LabelMap::from_fn(3, 3, |y, x| ((y + x) % 4) as i64);
        let (l, c) = cross_entropy_loss(&seg(4, 3, 3, |_, _, _| 0.7), &mask, 255).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert_eq!(c, 9);

        let (l, _) = cross_entropy_loss(
            &seg(4, 3, 3, |n, y, x| if n as i64 == mask.at(y, x) { 20.0 } else { 0.0 }),
            &mask,
            255,
        )
        .unwrap();
        assert!(l < 1e-6);

        let one = LabelMap::new(1, 1, vec![0]).unwrap();
        let (l, _) = cross_entropy_loss(&seg(2, 1, 1, |n, _, _| if n == 0 { 1.0 } else { 0.0 }), &one, 255).unwrap();
        let oracle = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_ignores_and_rejects() {
        let all = LabelMap::new(1, 2, vec![255, 255]).unwrap();
        assert_eq!(cross_entropy_loss(&seg(2, 1, 2, |_, _, _| 1.0), &all, 255).unwrap(), (0.0, 0));
        let bad = LabelMap::new(1, 2, vec![0, 5]).unwrap();
        match cross_entropy_loss(&seg(2, 1, 2, |_, _, _| 1.0), &bad, 255) {
            Err(Error::LabelOutOfRange { row, col, value, .. }) => assert_eq!((row, col, value), (0, 1, 5)),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn toy_clip_store(layers: usize) -> ParamStore {
        EncoderSpec {
            num_layers: layers,
            ..EncoderSpec::toy(EncoderKind::ToyClipVisual, 1)
        }
        .init_params("clip")
    }

    fn trainable_in(groups: &[ParamGroup], module: &str) -> usize {
        groups
            .iter()
            .filter(|g| g.trainable && g.name.starts_with(module))
            .map(|g| g.tensors.len())
            .sum()
    }

    #[test]
    fn finetuning_modes() {
        let store = toy_clip_store(2);
        let frozen = build_param_groups(&store, Trainability::Frozen, Trainability::Frozen);
        assert_eq!(trainable_in(&frozen, "clip"), 0);
        let full = build_param_groups(&store, Trainability::Full, Trainability::Frozen);
        assert_eq!(trainable_in(&full, "clip"), store.len());
        let attn = build_param_groups(&store, Trainability::Attention, Trainability::Frozen);
        let oracle: BTreeMap<String, Vec<usize>> = (0..2)
            .map(|i| (format!("clip.blocks.{i}.attn_proj.weight"), vec![64, 64]))
            .collect();
        let trainable: Vec<_> = attn.iter().filter(|g| g.trainable).collect();
        assert_eq!(trainable.len(), 1);
        assert_eq!(trainable[0].tensors, oracle);
    }

    #[test]
    fn every_parameter_in_exactly_one_group() {
        let m = small();
        for (c, d) in [(Trainability::Attention, Trainability::Frozen), (Trainability::Full, Trainability::Attention)] {
            let groups = build_param_groups(&m.params, c, d);
            let mut seen = HashSet::new();
            for g in &groups {
                for n in g.tensors.keys() {
                    assert!(seen.insert(n.clone()), "{n} in two groups");
                }
            }
            assert_eq!(seen.len(), m.params.len());
            assert!(groups.iter().any(|g| g.name == "remoteclip" && !g.trainable));
        }
    }

    #[test]
    fn param_counts() {
        assert_eq!(count_params(&[]), ParamCount::default());
        let mut s = ParamStore::new();
        s.insert("head.weight", Tensor::zeros(&[3, 4]), false);
        let g = build_param_groups(&s, Trainability::Frozen, Trainability::Frozen);
        assert_eq!(count_params(&g), ParamCount { total: 12, trainable: 12 });
        s.insert("clip.a", Tensor::zeros(&[5]), false);
        s.insert("fusion.b", Tensor::zeros(&[2, 2]), false);
        let g = build_param_groups(&s, Trainability::Frozen, Trainability::Frozen);
        assert_eq!(count_params(&g), ParamCount { total: 21, trainable: 16 });
    }

    #[test]
    fn adamw_first_step_and_zero_lr() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), false);
        let grads: BTreeMap<_, _> = [("w".to_string(), Tensor::new(vec![2], vec![0.5, -3.0]).unwrap())].into();
        let mut zero = s.clone();
        let mut opt = AdamW::new(0.0, 1e-4);
        for _ in 0..5 {
            opt.step(&mut zero, &grads).unwrap();
        }
        assert_eq!(zero, s);

        // First step: bias-corrected m/sqrt(v) = sign(g).
        let mut opt = AdamW::new(0.1, 0.01);
        opt.step(&mut s, &grads).unwrap();
        let w = s.tensor("w").unwrap().data();
        let expect = |x: f64, g: f64| x * (1.0 - 0.1 * 0.01) - 0.1 * g / (g.abs() + 1e-8);
        assert!((w[0] - expect(1.0, 0.5)).abs() < 1e-12);
        assert!((w[1] - expect(-2.0, -3.0)).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_seeded_and_covers_epochs() {
        let a = batch_schedule(5, 2, 5, 7);
        assert_eq!(a, batch_schedule(5, 2, 5, 7));
        let flat: Vec<usize> = a.concat();
        let mut first: Vec<usize> = flat[..5].to_vec();
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert!(batch_schedule(3, 8, 2, 0).iter().all(|b| b.len() == 3));
    }

    fn tiny_model() -> RsktModel {
        RsktModel::new(
            ModelConfig { encoder_layers: 2, guidance_layer: 1, ..ModelConfig::default() },
            FusionConfig { d_c: 8, heads: 2, num_layers: 1, ..FusionConfig::default() },
            DecoderConfig { num_layers: 1, clip_layers: vec![1], dino_layers: vec![1], remoteclip_layers: vec![0] },
        )
        .unwrap()
    }

    fn tiny_setup() -> (RsktModel, Vec<ImageSample>, ClassVocabulary) {
        let m = tiny_model();
        let data = synth::dataset(3, 2, 64, 2, 0.05);
        let v = m.vocabulary(["a", "b"]).unwrap();
        (m, data, v)
    }

    #[test]
    fn training_is_deterministic_and_respects_freezing() {
        let (m, data, v) = tiny_setup();
        let cfg = TrainConfig { max_iters: 3, batch_size: 2, ..TrainConfig::default() };
        let mut a = m.clone();
        let mut b = m.clone();
        let ra = train(&mut a, &data, &v, &cfg).unwrap();
        let rb = train(&mut b, &data, &v, &cfg).unwrap();
        assert_eq!(ra.losses, rb.losses);
        for (name, p) in m.params.iter() {
            let after = &a.params.tensor(name).unwrap();
            let trainable = trainable_names(&ra.groups).contains(name);
            if !trainable {
                assert_eq!(*after, &p.value, "{name} changed");
            }
        }
        assert_ne!(a.params.tensor("head.weight").unwrap(), m.params.tensor("head.weight").unwrap());
        assert_ne!(
            a.params.tensor("clip.blocks.0.attn_proj.weight").unwrap(),
            m.params.tensor("clip.blocks.0.attn_proj.weight").unwrap()
        );
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (m, data, v) = tiny_setup();
        let mut a = m.clone();
        train(&mut a, &data, &v, &TrainConfig { lr: 0.0, max_iters: 2, ..TrainConfig::default() }).unwrap();
        assert_eq!(a.params, m.params);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (mut m, _, v) = tiny_setup();
        assert!(matches!(train(&mut m, &[], &v, &TrainConfig::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn gradient_check_cases() {
        let empty = gradient_check(&ParamStore::new(), |g, _| Ok(g.constant(Tensor::scalar(0.0))), &GradCheckOptions::default()).unwrap();
        assert!(empty.entries.is_empty());

        let mut s = ParamStore::new();
        s.insert_normal("head.weight", "hw", &[4, 1], 1.0, 1, false);
        s.insert("head.bias", Tensor::zeros(&[1]), false);
        let x = Tensor::from_fn(&[6, 4], |i| (i[0] as f64 - i[1] as f64) * 0.3);
        let r = gradient_check(
            &s,
            |g, sess| {
                let xv = g.constant(x.clone());
                let y = sess.linear(g, "head", xv)?;
                g.weighted_sum(y, vec![1.0, -0.5, 2.0, 0.3, 0.1, 1.0])
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.entries.len() >= 50);
        assert!(r.max_rel_err < 1e-8, "{}", r.max_rel_err);
    }

    #[test]
    fn tiny_model_gradients() {
        let (m, data, v) = tiny_setup();
        let r = model_gradient_check(&m, &data[0], &v, &GradCheckOptions::default()).unwrap();
        assert_eq!(r.modules().len(), 7);
        assert!(r.max_rel_err < 1e-3, "{:?}", r.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (m, _, _) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let groups = build_param_groups(&m.params, Trainability::Attention, Trainability::Frozen);
        let manifest = save_checkpoint(&m, &groups, dir.path()).unwrap();
        assert_eq!(manifest.params.len(), m.params.len());
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.model, m.model);
        for (name, p) in m.params.iter() {
            let b = back.params.get(name).unwrap();
            assert_eq!(b.attention, p.attention);
            let rounded = p.value.map(|v| v as f32 as f64);
            assert_eq!(b.value, rounded, "{name}");
        }
    }
}

//! Deterministic toy encoders standing in for CLIP, DINO and RemoteCLIP,
//! the hashed text encoder, and the adapter for precomputed features.
//!
//! The visual encoders patchify without positional embeddings and then run
//! purely per-token blocks, so a spatially constant image always yields a
//! spatially constant feature grid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{named_rng, GradMask, ParamStore, Session};
use crate::resample;
use crate::tensor::Tensor;
use crate::tensor_io;
use crate::vocab::ClassVocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trainability {
    Frozen,
    Attention,
    Full,
}

impl std::str::FromStr for Trainability {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Trainability::Frozen),
            "attention" => Ok(Trainability::Attention),
            "full" => Ok(Trainability::Full),
            other => Err(Error::Config(format!(
                "unknown finetuning mode {other:?} (expected frozen, attention or full)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    ToyClipVisual,
    ToyDino,
    ToyRemoteClip,
    ToyText,
    /// Precomputed features read from a directory of tensor files.
    External(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub seed: u64,
    pub trainability: Trainability,
}

impl EncoderSpec {
    pub fn toy(kind: EncoderKind, seed: u64) -> Self {
        EncoderSpec {
            kind,
            patch_size: 16,
            embed_dim: 64,
            num_layers: 8,
            seed,
            trainability: Trainability::Frozen,
        }
    }

    pub fn is_visual_toy(&self) -> bool {
        matches!(
            self.kind,
            EncoderKind::ToyClipVisual | EncoderKind::ToyDino | EncoderKind::ToyRemoteClip
        )
    }

    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(Error::Shape(format!(
                "image {h}x{w} is not divisible by patch size {p}"
            )));
        }
        Ok((h / p, w / p))
    }

    /// Seeded parameters for a toy visual encoder, names prefixed by
    /// `prefix.`. The seed stream ignores the prefix, so identical specs give
    /// identical tensors whatever role they are registered under.
    pub fn init_params(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        if !self.is_visual_toy() {
            return store;
        }
        let c = self.embed_dim;
        let pin = self.patch_size * self.patch_size * 3;
        let mut add = |local: String, shape: &[usize], std: f64, attention: bool| {
            store.insert_normal(
                &format!("{prefix}.{local}"),
                &local,
                shape,
                std,
                self.seed,
                attention,
            );
        };
        add("patch_embed.weight".into(), &[pin, c], 1.0 / (pin as f64).sqrt(), false);
        let block_std = 0.3 / (c as f64).sqrt();
        for i in 0..self.num_layers {
            add(format!("blocks.{i}.attn_proj.weight"), &[c, c], block_std, true);
            add(format!("blocks.{i}.mlp.weight"), &[c, c], block_std, false);
        }
        store.insert(format!("{prefix}.patch_embed.bias"), Tensor::zeros(&[c]), false);
        for i in 0..self.num_layers {
            store.insert(
                format!("{prefix}.blocks.{i}.mlp.bias"),
                Tensor::zeros(&[c]),
                false,
            );
        }
        store
    }
}

/// Final feature grid plus the grid after every block, keyed by block index.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub final_grid: Tensor,
    pub intermediates: BTreeMap<usize, Tensor>,
}

impl EncoderOutput {
    pub fn layer(&self, index: usize) -> Result<&Tensor> {
        self.intermediates
            .get(&index)
            .ok_or_else(|| Error::Config(format!("encoder has no intermediate layer {index}")))
    }
}

/// Graph-side encoder output.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub final_grid: Var,
    pub intermediates: BTreeMap<usize, Var>,
}

impl EncoderVars {
    pub fn layer(&self, index: usize) -> Result<Var> {
        self.intermediates
            .get(&index)
            .copied()
            .ok_or_else(|| Error::Config(format!("encoder has no intermediate layer {index}")))
    }
}

/// Runs a toy visual encoder on `image` (`[H, W, 3]`) recorded on `g`, with
/// parameters bound from `session` under `prefix`.
///
/// External encoders ignore `image` and read the precomputed features for
/// `rotation` instead.
pub fn encode_on_graph(
    g: &mut Graph,
    session: &mut Session,
    prefix: &str,
    spec: &EncoderSpec,
    image: Var,
    rotation: usize,
) -> Result<EncoderVars> {
    if let EncoderKind::External(dir) = &spec.kind {
        let out = ExternalFeatures::load(dir, rotation)?;
        return Ok(EncoderVars {
            final_grid: g.constant(out.final_grid),
            intermediates: out
                .intermediates
                .into_iter()
                .map(|(k, t)| (k, g.constant(t)))
                .collect(),
        });
    }
    if !spec.is_visual_toy() {
        return Err(Error::Config(format!("{:?} is not a visual encoder", spec.kind)));
    }
    let shape = g.shape(image).to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Shape(format!("image must be H x W x 3, got {shape:?}")));
    }
    let (hf, wf) = spec.grid(shape[0], shape[1])?;
    let p = spec.patch_size;
    let c = spec.embed_dim;
    let patches = g.row_map(
        image,
        Arc::new(resample::patchify(shape[0], shape[1], p)),
        &[hf, wf, p * p * 3],
    )?;
    let mut x = session.linear(g, &format!("{prefix}.patch_embed"), patches)?;
    let mut intermediates = BTreeMap::new();
    for i in 0..spec.num_layers {
        let attn = session.linear(g, &format!("{prefix}.blocks.{i}.attn_proj"), x)?;
        let a = g.add(x, attn)?;
        let m = session.linear(g, &format!("{prefix}.blocks.{i}.mlp"), a)?;
        let m = g.gelu(m);
        x = g.add(a, m)?;
        intermediates.insert(i, x);
    }
    debug_assert_eq!(g.shape(x), &[hf, wf, c]);
    Ok(EncoderVars {
        final_grid: x,
        intermediates,
    })
}

/// Encodes a single image with freshly initialized parameters for `spec`.
pub fn encode_image(spec: &EncoderSpec, image: &Tensor) -> Result<EncoderOutput> {
    if let EncoderKind::External(dir) = &spec.kind {
        return ExternalFeatures::load(dir, 0);
    }
    let store = spec.init_params("enc");
    let mut g = Graph::new();
    let mut s = Session::new(&store, GradMask::None);
    let img = g.constant(image.clone());
    let vars = encode_on_graph(&mut g, &mut s, "enc", spec, img, 0)?;
    Ok(EncoderOutput {
        final_grid: g.value(vars.final_grid).clone(),
        intermediates: vars
            .intermediates
            .iter()
            .map(|(&k, &v)| (k, g.value(v).clone()))
            .collect(),
    })
}

/// Hashed prompt embeddings, `[N_t, P, C_f]`, every vector unit norm.
pub fn encode_text(spec: &EncoderSpec, vocab: &ClassVocabulary) -> Result<Tensor> {
    if spec.kind != EncoderKind::ToyText {
        return Err(Error::Config(format!("{:?} is not a text encoder", spec.kind)));
    }
    let (n, p, c) = (vocab.num_classes(), vocab.num_templates(), spec.embed_dim);
    let mut data = Vec::with_capacity(n * p * c);
    for ni in 0..n {
        for pi in 0..p {
            let mut rng = named_rng(spec.seed, &vocab.prompt(ni, pi));
            let v: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(v.into_iter().map(|x| x / norm));
        }
    }
    Tensor::new(vec![n, p, c], data)
}

/// Mean over the template axis: `[N_t, P, C] -> [N_t, C]`.
pub fn template_mean(text: &Tensor) -> Tensor {
    let (n, p, c) = (text.shape()[0], text.shape()[1], text.shape()[2]);
    Tensor::from_fn(&[n, c], |i| {
        (0..p).map(|pi| text.at(&[i[0], pi, i[1]])).sum::<f64>() / p as f64
    })
}

/// Adapter for features computed elsewhere (for example by a real CLIP).
///
/// Directory layout: `final.rskt` and `layer_<k>.rskt` for the unrotated
/// image; rotated variants live in `rot<i>/` subdirectories with the same
/// file names.
pub struct ExternalFeatures;

impl ExternalFeatures {
    pub fn dir_for(root: &Path, rotation: usize) -> PathBuf {
        if rotation == 0 {
            root.to_path_buf()
        } else {
            root.join(format!("rot{rotation}"))
        }
    }

    pub fn load(root: &Path, rotation: usize) -> Result<EncoderOutput> {
        let dir = Self::dir_for(root, rotation);
        let final_grid = tensor_io::read(&dir.join("final.rskt"))?;
        let mut intermediates = BTreeMap::new();
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(k) = name
                .strip_prefix("layer_")
                .and_then(|s| s.strip_suffix(".rskt"))
                .and_then(|s| s.parse::<usize>().ok())
            {
                let t = tensor_io::read(&entry.path())?;
                if t.shape()[..2] != final_grid.shape()[..2] {
                    return Err(Error::Shape(format!(
                        "{name}: grid {:?} differs from final {:?}",
                        t.shape(),
                        final_grid.shape()
                    )));
                }
                intermediates.insert(k, t);
            }
        }
        Ok(EncoderOutput {
            final_grid,
            intermediates,
        })
    }

    pub fn save(root: &Path, rotation: usize, out: &EncoderOutput) -> Result<()> {
        let dir = Self::dir_for(root, rotation);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        tensor_io::write(&dir.join("final.rskt"), &out.final_grid)?;
        for (k, t) in &out.intermediates {
            tensor_io::write(&dir.join(format!("layer_{k}.rskt")), t)?;
        }
        Ok(())
    }
}

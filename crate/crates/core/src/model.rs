//! Full segmentation model: encoders, cost aggregation, fusion, decoder and
//! head, with all parameters in one named store.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::cma::{
    cosine_cost_on_graph, fuse_on_graph, project_on_graph, rotated_costs_on_graph,
    FusionStrategy,
};
use crate::encoder::{encode_on_graph, encode_text, template_mean, EncoderKind, EncoderSpec};
use crate::error::{Error, Result};
use crate::fusion::{self, aggregate_on_graph, FusionConfig, GuidanceVars};
use crate::params::{GradMask, Init, ParamStore, Session};
use crate::sample::{ImageSample, LabelMap};
use crate::tensor::Tensor;
use crate::transfer::{self, class_major, head_on_graph, transfer_upsample_layer, DecoderConfig, SegLogits, TransferFeats};
use crate::vocab::{ClassVocabulary, DEFAULT_TEMPLATES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Side length the positional embedding is sized for.
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub seed: u64,
    pub strategy: FusionStrategy,
    /// Encoder block whose output guides the fusion layers.
    pub guidance_layer: usize,
    pub templates: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 16,
            embed_dim: 64,
            encoder_layers: 8,
            seed: 0,
            strategy: FusionStrategy::Cat,
            guidance_layer: 3,
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ModelConfig {
    fn spec(&self, kind: EncoderKind, offset: u64) -> EncoderSpec {
        EncoderSpec {
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            num_layers: self.encoder_layers,
            ..EncoderSpec::toy(kind, self.seed.wrapping_add(offset))
        }
    }

    pub fn clip_spec(&self) -> EncoderSpec {
        self.spec(EncoderKind::ToyClipVisual, 0)
    }

    pub fn dino_spec(&self) -> EncoderSpec {
        self.spec(EncoderKind::ToyDino, 1)
    }

    pub fn remoteclip_spec(&self) -> EncoderSpec {
        self.spec(EncoderKind::ToyRemoteClip, 2)
    }

    pub fn text_spec(&self) -> EncoderSpec {
        self.spec(EncoderKind::ToyText, 3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "model.image_size = {} is not a multiple of model.patch_size = {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("model.embed_dim must be positive".into()));
        }
        if self.guidance_layer >= self.encoder_layers {
            return Err(Error::Config(format!(
                "model.guidance_layer = {} but the encoders have {} layers",
                self.guidance_layer, self.encoder_layers
            )));
        }
        if self.templates.is_empty() {
            return Err(Error::Config("model.templates is empty".into()));
        }
        Ok(())
    }
}

/// Graph handles for every stage of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub clip_costs: [Var; 4],
    pub dino_cost: Var,
    pub fused: Var,
    pub projected: Var,
    pub aggregated: Var,
    pub decoded: Var,
    /// `[H * W, N_t]`
    pub logits: Var,
}

/// Class-major `[N_t, H_f, W_f]` maps of the intermediate stages.
#[derive(Clone, Debug, PartialEq)]
pub struct StageMaps {
    pub clip: Tensor,
    pub dino: Tensor,
    pub fused: Tensor,
    pub aggregated: Tensor,
}

#[derive(Clone, Debug)]
pub struct RsktModel {
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub params: ParamStore,
}

/// Center-crops non-square samples so the rotation branch can run.
pub fn prepare(sample: &ImageSample) -> ImageSample {
    if sample.is_square() {
        return sample.clone();
    }
    log::warn!(
        "center-cropping {}x{} image to a square for rotation aggregation",
        sample.height(),
        sample.width()
    );
    sample.center_square()
}

/// Mean over the last axis, then classes to the front:
/// `[H, W, N, K] -> [N, H, W]`.
fn class_plane_mean(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (h, w, n, k) = (s[0], s[1], s[2], s[3]);
    Tensor::from_fn(&[n, h, w], |i| {
        (0..k).map(|c| t.at(&[i[1], i[2], i[0], c])).sum::<f64>() / k as f64
    })
}

impl RsktModel {
    pub fn new(model: ModelConfig, fusion_cfg: FusionConfig, decoder: DecoderConfig) -> Result<Self> {
        model.validate()?;
        let grid = model.image_size / model.patch_size;
        fusion_cfg.validate(grid, grid)?;
        decoder.validate(model.encoder_layers)?;
        let (c_f, seed) = (model.embed_dim, model.seed);
        let mut params = ParamStore::new();
        params.extend(model.clip_spec().init_params("clip"));
        params.extend(model.dino_spec().init_params("dino"));
        params.extend(model.remoteclip_spec().init_params("rclip"));
        let k = model.strategy.channels(model.templates.len());
        Init { store: &mut params, seed }.linear("cma.proj", k, c_f, true);
        fusion::init_params(&mut params, seed, &fusion_cfg, c_f, grid, grid);
        transfer::init_params(&mut params, seed, &decoder, fusion_cfg.d_c, c_f);
        Ok(RsktModel {
            model,
            fusion: fusion_cfg,
            decoder,
            params,
        })
    }

    /// Vocabulary over `names` with this model's prompt templates.
    pub fn vocabulary<S: Into<String>>(&self, names: impl IntoIterator<Item = S>) -> Result<ClassVocabulary> {
        ClassVocabulary::new(names, self.model.templates.iter().cloned())
    }

    /// `[N_t, P, C_f]` prompt embeddings.
    pub fn text_embeddings(&self, vocab: &ClassVocabulary) -> Result<Tensor> {
        if vocab.templates() != self.model.templates.as_slice() {
            return Err(Error::Config(format!(
                "vocabulary templates {:?} differ from the model's {:?}",
                vocab.templates(),
                self.model.templates
            )));
        }
        encode_text(&self.model.text_spec(), vocab)
    }

    /// Records a forward pass of `image` (`[H, W, 3]`, square) against
    /// prompt embeddings `text` (`[N_t, P, C_f]`).
    pub fn forward_on_graph(
        &self,
        g: &mut Graph,
        s: &mut Session,
        image: &Tensor,
        text: &Tensor,
    ) -> Result<ForwardVars> {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let img = g.constant(image.clone());
        let tv = g.constant(text.clone());
        let tmean = g.constant(template_mean(text));
        let (clip_costs, clip_enc) =
            rotated_costs_on_graph(g, s, "clip", &self.model.clip_spec(), img, tv)?;
        let dino_enc = encode_on_graph(g, s, "dino", &self.model.dino_spec(), img, 0)?;
        let rclip_enc = encode_on_graph(g, s, "rclip", &self.model.remoteclip_spec(), img, 0)?;
        let dino_cost = cosine_cost_on_graph(g, dino_enc.final_grid, tv)?;
        let fused = fuse_on_graph(g, &clip_costs, dino_cost, self.model.strategy)?;
        let projected = project_on_graph(g, s, "cma.proj", fused)?;
        let guidance = GuidanceVars {
            clip_mid: clip_enc.layer(self.model.guidance_layer)?,
            dino_mid: dino_enc.layer(self.model.guidance_layer)?,
        };
        let aggregated = aggregate_on_graph(g, s, projected, guidance, tmean, &self.fusion)?;
        let mut x = aggregated;
        for j in 0..self.decoder.num_layers {
            let (lr, lc, ld) = self.decoder.layers_for(j);
            let feats = TransferFeats {
                rclip: rclip_enc.layer(lr)?,
                clip: clip_enc.layer(lc)?,
                dino: dino_enc.layer(ld)?,
            };
            x = transfer_upsample_layer(g, s, j, x, feats)?;
        }
        let logits = head_on_graph(g, s, x, h, w)?;
        Ok(ForwardVars {
            clip_costs,
            dino_cost,
            fused,
            projected,
            aggregated,
            decoded: x,
            logits,
        })
    }

    /// Mean cross-entropy of one labelled sample, plus the number of
    /// contributing pixels.
    pub fn loss_on_graph(
        &self,
        g: &mut Graph,
        s: &mut Session,
        sample: &ImageSample,
        text: &Tensor,
    ) -> Result<(Var, usize)> {
        let label = sample
            .label
            .as_ref()
            .ok_or_else(|| Error::Config("training sample has no label".into()))?;
        let targets = label.targets(text.shape()[0], sample.ignore_value)?;
        let f = self.forward_on_graph(g, s, &sample.image, text)?;
        g.cross_entropy(f.logits, targets)
    }

    pub fn forward(&self, sample: &ImageSample, vocab: &ClassVocabulary) -> Result<SegLogits> {
        let text = self.text_embeddings(vocab)?;
        self.forward_with_text(&sample.image, &text)
    }

    pub fn forward_with_text(&self, image: &Tensor, text: &Tensor) -> Result<SegLogits> {
        let mut g = Graph::new();
        let mut s = Session::new(&self.params, GradMask::None);
        let f = self.forward_on_graph(&mut g, &mut s, image, text)?;
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let cm = class_major(&mut g, f.logits, h, w)?;
        let values = g.value(cm).clone();
        values.ensure_finite("logits")?;
        Ok(SegLogits { values })
    }

    /// Argmax prediction as a label map.
    pub fn predict(&self, sample: &ImageSample, vocab: &ClassVocabulary) -> Result<LabelMap> {
        let logits = self.forward(sample, vocab)?;
        let idx = logits.argmax();
        LabelMap::new(
            sample.height(),
            sample.width(),
            idx.into_iter().map(|v| v as i64).collect(),
        )
    }

    /// Per-class maps after the CLIP branch, the DINO branch, fusion, and
    /// the fusion stack (scored by the head's linear map).
    pub fn stage_maps(&self, sample: &ImageSample, vocab: &ClassVocabulary) -> Result<StageMaps> {
        let text = self.text_embeddings(vocab)?;
        let mut g = Graph::new();
        let mut s = Session::new(&self.params, GradMask::None);
        let f = self.forward_on_graph(&mut g, &mut s, &sample.image, &text)?;
        let clip_mean = g.mean_of(&f.clip_costs)?;
        let scored = s.linear(&mut g, "head", f.aggregated)?;
        Ok(StageMaps {
            clip: class_plane_mean(g.value(clip_mean)),
            dino: class_plane_mean(g.value(f.dino_cost)),
            fused: class_plane_mean(g.value(f.fused)),
            aggregated: class_plane_mean(g.value(scored)),
        })
    }
}

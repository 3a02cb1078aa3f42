//! Knowledge-transfer upsampling decoder and the segmentation head.
//!
//! Each decoder layer doubles the cost grid bilinearly, resizes one
//! intermediate grid from each of RemoteCLIP, CLIP and DINO to the new
//! resolution, and applies a 3x3 convolution, layer norm and GELU to the
//! per-class concatenation `[cost; rclip; clip; dino]`. The convolution is
//! split into its cost part and its guidance part; the guidance part does
//! not depend on the class and is computed once.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{Init, ParamStore, Session};
use crate::resample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub clip_layers: Vec<usize>,
    pub dino_layers: Vec<usize>,
    pub remoteclip_layers: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_layers: 2,
            clip_layers: vec![3, 7],
            dino_layers: vec![3, 7],
            remoteclip_layers: vec![3, 7],
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, encoder_layers: usize) -> Result<()> {
        for (key, list) in [
            ("decoder.clip_layers", &self.clip_layers),
            ("decoder.dino_layers", &self.dino_layers),
            ("decoder.remoteclip_layers", &self.remoteclip_layers),
        ] {
            if self.num_layers > 0 && list.is_empty() {
                return Err(Error::Config(format!("{key} is empty")));
            }
            if let Some(&bad) = list.iter().find(|&&l| l >= encoder_layers) {
                return Err(Error::Config(format!(
                    "{key} requests layer {bad} but the encoders have {encoder_layers} layers"
                )));
            }
        }
        Ok(())
    }

    /// Encoder layer used by decoder pass `j`: lists are walked from the
    /// deepest index down and recycled when shorter than `num_layers`.
    pub fn pick(list: &[usize], j: usize) -> usize {
        let mut sorted = list.to_vec();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        sorted[j % sorted.len()]
    }

    /// `(rclip, clip, dino)` layer indices for pass `j`.
    pub fn layers_for(&self, j: usize) -> (usize, usize, usize) {
        (
            Self::pick(&self.remoteclip_layers, j),
            Self::pick(&self.clip_layers, j),
            Self::pick(&self.dino_layers, j),
        )
    }
}

/// Final logits, `[N_t, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLogits {
    pub values: Tensor,
}

impl SegLogits {
    pub fn num_classes(&self) -> usize {
        self.values.shape()[0]
    }

    /// Per-pixel argmax over classes, row-major `H x W`.
    pub fn argmax(&self) -> Vec<usize> {
        let s = self.values.shape();
        let (n, hw) = (s[0], s[1] * s[2]);
        let d = self.values.data();
        (0..hw)
            .map(|p| {
                (0..n)
                    .max_by(|&a, &b| d[a * hw + p].total_cmp(&d[b * hw + p]).then(b.cmp(&a)))
                    .unwrap_or(0)
            })
            .collect()
    }
}

pub fn init_params(store: &mut ParamStore, seed: u64, cfg: &DecoderConfig, d_c: usize, c_f: usize) {
    let mut init = Init { store, seed };
    for j in 0..cfg.num_layers {
        let p = format!("decoder.layers.{j}");
        init.linear(&format!("{p}.cost_conv"), 9 * d_c, d_c, false);
        init.linear(&format!("{p}.guide_conv"), 9 * 3 * c_f, d_c, true);
        init.layer_norm(&format!("{p}.norm"), d_c);
    }
    init.linear("head", d_c, 1, true);
}

/// Intermediate encoder grids injected by one decoder pass, each
/// `[H_f, W_f, C]`.
#[derive(Clone, Copy, Debug)]
pub struct TransferFeats {
    pub rclip: Var,
    pub clip: Var,
    pub dino: Var,
}

fn resize(g: &mut Graph, x: Var, oh: usize, ow: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(shape_err!("guidance grid must be [H, W, C], got {s:?}"));
    }
    if (s[0], s[1]) == (oh, ow) {
        return Ok(x);
    }
    g.row_map(x, Arc::new(resample::bilinear(s[0], s[1], oh, ow, 1)), &[oh, ow, s[2]])
}

/// One decoder pass `j`: `[h, w, N, d] -> [2h, 2w, N, d]`.
pub fn transfer_upsample_layer(
    g: &mut Graph,
    s: &mut Session,
    j: usize,
    cost: Var,
    feats: TransferFeats,
) -> Result<Var> {
    let cs = g.shape(cost).to_vec();
    if cs.len() != 4 {
        return Err(shape_err!("decoder: cost must be [H, W, N, C], got {cs:?}"));
    }
    let (h, w, n, d) = (cs[0], cs[1], cs[2], cs[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let p = format!("decoder.layers.{j}");
    let up = g.row_map(cost, Arc::new(resample::bilinear(h, w, oh, ow, n)), &[oh, ow, n, d])?;
    let cols = g.row_map(up, Arc::new(resample::im2col3(oh, ow, n)), &[oh, ow, n, 9 * d])?;
    let cost_part = s.linear(g, &format!("{p}.cost_conv"), cols)?;

    let r = resize(g, feats.rclip, oh, ow)?;
    let c = resize(g, feats.clip, oh, ow)?;
    let dn = resize(g, feats.dino, oh, ow)?;
    let guide = g.concat(&[r, c, dn])?;
    let gw = *g.shape(guide).last().unwrap();
    let gcols = g.row_map(guide, Arc::new(resample::im2col3(oh, ow, 1)), &[oh, ow, 9 * gw])?;
    let guide_part = s.linear(g, &format!("{p}.guide_conv"), gcols)?;
    let guide_part = g.row_map(
        guide_part,
        Arc::new(resample::repeat_rows(oh * ow, n)),
        &[oh, ow, n, d],
    )?;

    let x = g.add(cost_part, guide_part)?;
    let x = s.layer_norm(g, &format!("{p}.norm"), x)?;
    Ok(g.gelu(x))
}

/// Linear `d -> 1` per token, bilinear resize to `out_h x out_w`. Returns
/// the pixel-major `[H * W, N]` layout used by the loss.
pub fn head_on_graph(g: &mut Graph, s: &mut Session, cost: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let cs = g.shape(cost).to_vec();
    if cs.len() != 4 {
        return Err(shape_err!("head: cost must be [H, W, N, C], got {cs:?}"));
    }
    let (h, w, n) = (cs[0], cs[1], cs[2]);
    let scores = s.linear(g, "head", cost)?;
    let up = if (h, w) == (out_h, out_w) {
        scores
    } else {
        g.row_map(
            scores,
            Arc::new(resample::bilinear(h, w, out_h, out_w, n)),
            &[out_h, out_w, n, 1],
        )?
    };
    g.reshape(up, &[out_h * out_w, n])
}

/// `[H * W, N]` pixel-major logits to `[N, H, W]`.
pub fn class_major(g: &mut Graph, pixel_major: Var, h: usize, w: usize) -> Result<Var> {
    let n = g.shape(pixel_major)[1];
    g.row_map(pixel_major, Arc::new(resample::transpose_rows(h * w, n)), &[n, h, w])
}

/// Runs the head outside of training.
pub fn head(cost: &Tensor, params: &ParamStore, out_h: usize, out_w: usize) -> Result<SegLogits> {
    let mut g = Graph::new();
    let mut s = Session::inference(params);
    let c = g.constant(cost.clone());
    let pm = head_on_graph(&mut g, &mut s, c, out_h, out_w)?;
    let cm = class_major(&mut g, pm, out_h, out_w)?;
    Ok(SegLogits {
        values: g.value(cm).clone(),
    })
}

/// Runs decoder pass `j` outside of training.
pub fn upsample(cost: &Tensor, rclip: &Tensor, clip: &Tensor, dino: &Tensor, params: &ParamStore, j: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut s = Session::inference(params);
    let c = g.constant(cost.clone());
    let feats = TransferFeats {
        rclip: g.constant(rclip.clone()),
        clip: g.constant(clip.clone()),
        dino: g.constant(dino.clone()),
    };
    let out = transfer_upsample_layer(&mut g, &mut s, j, c, feats)?;
    Ok(g.value(out).clone())
}

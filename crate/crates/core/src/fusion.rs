//! Cost map fusion: stacked spatial and class enhancement layers.
//!
//! Each layer runs
//!
//! 1. `spatial_reduce`: concatenate the cost stream with the CLIP and DINO
//!    guidance grids and apply a strided `r1 x r1` convolution;
//! 2. `set_layer`: per class, full-resolution cost tokens attend to the
//!    reduced tokens (pre-norm cross-attention plus feed-forward);
//! 3. `class_reduce`: append the class text embedding, project, and
//!    average-pool the grid by `r2`;
//! 4. `cet_layer`: at every pooled location, self-attention across classes,
//!    then bilinear upsampling back to the full grid as a residual.
//!
//! The class axis is only ever a batch axis or an unordered token set, so
//! the whole stack commutes with any permutation of the vocabulary.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{Init, ParamStore, Session};
use crate::resample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub num_layers: usize,
    pub d_c: usize,
    pub heads: usize,
    pub r1: usize,
    pub r2: usize,
    pub positional_embedding: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            num_layers: 2,
            d_c: 128,
            heads: 4,
            r1: 2,
            r2: 2,
            positional_embedding: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, hf: usize, wf: usize) -> Result<()> {
        if self.d_c == 0 || self.heads == 0 || !self.d_c.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "fusion.d_c = {} must be a positive multiple of fusion.heads = {}",
                self.d_c, self.heads
            )));
        }
        for (key, r) in [("fusion.r1", self.r1), ("fusion.r2", self.r2)] {
            if r == 0 || !hf.is_multiple_of(r) || !wf.is_multiple_of(r) {
                return Err(Error::Config(format!(
                    "{key} = {r} must divide the {hf}x{wf} feature grid"
                )));
            }
        }
        Ok(())
    }
}

/// Intermediate CLIP and DINO grids, each `[H_f, W_f, C_f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceFeatures {
    pub clip_mid: Tensor,
    pub dino_mid: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct GuidanceVars {
    pub clip_mid: Var,
    pub dino_mid: Var,
}

/// Registers all fusion parameters for a `hf x wf` grid, cost and guidance
/// width `c_f`.
pub fn init_params(store: &mut ParamStore, seed: u64, cfg: &FusionConfig, c_f: usize, hf: usize, wf: usize) {
    let d = cfg.d_c;
    let mut init = Init { store, seed };
    init.linear("fusion.input_proj", c_f, d, true);
    for l in 0..cfg.num_layers {
        let p = format!("fusion.layers.{l}");
        if cfg.positional_embedding {
            let name = format!("{p}.pos");
            init.store
                .insert_normal(&name, &name, &[hf * wf, d], 0.02, seed, false);
        }
        init.linear(&format!("{p}.reduce"), cfg.r1 * cfg.r1 * (d + 2 * c_f), d, true);
        attention_block_params(&mut init, &format!("{p}.set"), d, true);
        init.linear(&format!("{p}.class_reduce"), d + c_f, d, true);
        attention_block_params(&mut init, &format!("{p}.cet"), d, false);
    }
}

pub(crate) fn attention_block_params(init: &mut Init, p: &str, d: usize, cross: bool) {
    init.layer_norm(&format!("{p}.norm_q"), d);
    if cross {
        init.layer_norm(&format!("{p}.norm_kv"), d);
    }
    for proj in ["q", "k", "v", "o"] {
        init.linear(&format!("{p}.{proj}"), d, d, true);
    }
    init.layer_norm(&format!("{p}.norm_ffn"), d);
    init.linear(&format!("{p}.ffn1"), d, 4 * d, true);
    init.linear_scaled(&format!("{p}.ffn2"), 4 * d, d, true, 0.5);
}

fn feed_forward(g: &mut Graph, s: &mut Session, p: &str, x: Var) -> Result<Var> {
    let h = s.layer_norm(g, &format!("{p}.norm_ffn"), x)?;
    let h = s.linear(g, &format!("{p}.ffn1"), h)?;
    let h = g.gelu(h);
    let h = s.linear(g, &format!("{p}.ffn2"), h)?;
    g.add(x, h)
}

fn add_opt(g: &mut Graph, x: Var, pos: Option<Var>) -> Result<Var> {
    match pos {
        Some(p) => g.add(x, p),
        None => Ok(x),
    }
}

/// Pre-norm cross-attention block. `x: [b, lq, d]` attends to
/// `kv: [b, lk, d]`; optional positional terms are added to queries and
/// keys only.
pub fn cross_attention_block(
    g: &mut Graph,
    s: &mut Session,
    p: &str,
    x: Var,
    kv: Var,
    pos_q: Option<Var>,
    pos_k: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let qn = s.layer_norm(g, &format!("{p}.norm_q"), x)?;
    let kvn = s.layer_norm(g, &format!("{p}.norm_kv"), kv)?;
    let qin = add_opt(g, qn, pos_q)?;
    let kin = add_opt(g, kvn, pos_k)?;
    let q = s.linear(g, &format!("{p}.q"), qin)?;
    let k = s.linear(g, &format!("{p}.k"), kin)?;
    let v = s.linear(g, &format!("{p}.v"), kvn)?;
    let a = g.attention(q, k, v, heads)?;
    let o = s.linear(g, &format!("{p}.o"), a)?;
    let x = g.add(x, o)?;
    feed_forward(g, s, p, x)
}

/// Pre-norm self-attention block over `x: [b, l, d]`.
pub fn self_attention_block(
    g: &mut Graph,
    s: &mut Session,
    p: &str,
    x: Var,
    pos: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let xn = s.layer_norm(g, &format!("{p}.norm_q"), x)?;
    let xin = add_opt(g, xn, pos)?;
    let q = s.linear(g, &format!("{p}.q"), xin)?;
    let k = s.linear(g, &format!("{p}.k"), xin)?;
    let v = s.linear(g, &format!("{p}.v"), xn)?;
    let a = g.attention(q, k, v, heads)?;
    let o = s.linear(g, &format!("{p}.o"), a)?;
    let x = g.add(x, o)?;
    feed_forward(g, s, p, x)
}

fn dims4(g: &Graph, x: Var, what: &str) -> Result<[usize; 4]> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(shape_err!("{what}: expected [H, W, N, C], got {s:?}"));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Strided `r1 x r1` convolution over `[cost; clip_mid; dino_mid]`.
pub fn spatial_reduce(
    g: &mut Graph,
    s: &mut Session,
    p: &str,
    cost: Var,
    guidance: GuidanceVars,
    r1: usize,
) -> Result<Var> {
    let [h, w, n, _] = dims4(g, cost, "spatial_reduce")?;
    if r1 == 0 || h % r1 != 0 || w % r1 != 0 {
        return Err(shape_err!("spatial_reduce: {h}x{w} grid not divisible by r1 = {r1}"));
    }
    let mut parts = vec![cost];
    for gv in [guidance.clip_mid, guidance.dino_mid] {
        let gs = g.shape(gv).to_vec();
        if gs.len() != 3 || gs[0] != h || gs[1] != w {
            return Err(shape_err!("spatial_reduce: guidance {gs:?} vs grid {h}x{w}"));
        }
        let b = g.row_map(gv, Arc::new(resample::repeat_rows(h * w, n)), &[h, w, n, gs[2]])?;
        parts.push(b);
    }
    let cat = g.concat(&parts)?;
    let width = *g.shape(cat).last().unwrap();
    let win = g.row_map(
        cat,
        Arc::new(resample::windows(h, w, r1, n)),
        &[h / r1, w / r1, n, r1 * r1 * width],
    )?;
    s.linear(g, &format!("{p}.reduce"), win)
}

/// Spatial enhancement: per class, the full grid attends to the reduced grid.
pub fn set_layer(
    g: &mut Graph,
    s: &mut Session,
    p: &str,
    cost: Var,
    reduced: Var,
    cfg: &FusionConfig,
) -> Result<Var> {
    let [h, w, n, d] = dims4(g, cost, "set_layer")?;
    let [rh, rw, rn, rd] = dims4(g, reduced, "set_layer")?;
    if rn != n || rd != d {
        return Err(shape_err!("set_layer: reduced [{rh}, {rw}, {rn}, {rd}] vs cost [{h}, {w}, {n}, {d}]"));
    }
    if d % cfg.heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {} heads", cfg.heads)));
    }
    let q = g.row_map(cost, Arc::new(resample::transpose_rows(h * w, n)), &[n, h * w, d])?;
    let kv = g.row_map(reduced, Arc::new(resample::transpose_rows(rh * rw, n)), &[n, rh * rw, d])?;
    let (pos_q, pos_k) = if cfg.positional_embedding {
        let pos = s.var(g, &format!("{p}.pos"))?;
        let pos = fit_positional(g, pos, h, w, d)?;
        let pos_r = if (rh, rw) == (h, w) {
            pos
        } else {
            g.row_map(pos, Arc::new(resample::avg_pool(h, w, h / rh, 1)), &[rh * rw, d])?
        };
        let pq = g.row_map(pos, Arc::new(resample::tile_rows(h * w, n)), &[n, h * w, d])?;
        let pk = g.row_map(pos_r, Arc::new(resample::tile_rows(rh * rw, n)), &[n, rh * rw, d])?;
        (Some(pq), Some(pk))
    } else {
        (None, None)
    };
    let out = cross_attention_block(g, s, &format!("{p}.set"), q, kv, pos_q, pos_k, cfg.heads)?;
    g.row_map(out, Arc::new(resample::transpose_rows(n, h * w)), &[h, w, n, d])
}

/// Resizes a learned `[H0*W0, d]` embedding to the current grid when the
/// grid differs from the one it was created for.
fn fit_positional(g: &mut Graph, pos: Var, h: usize, w: usize, d: usize) -> Result<Var> {
    let rows = g.shape(pos)[0];
    if rows == h * w {
        return Ok(pos);
    }
    let side = (rows as f64).sqrt().round() as usize;
    if side * side != rows {
        return Err(shape_err!("positional embedding with {rows} rows is not square"));
    }
    g.row_map(pos, Arc::new(resample::bilinear(side, side, h, w, 1)), &[h * w, d])
}

/// Appends the per-class text embedding, projects to `d_c`, and
/// average-pools the grid by `r2`.
pub fn class_reduce(
    g: &mut Graph,
    s: &mut Session,
    p: &str,
    cost: Var,
    text: Var,
    r2: usize,
) -> Result<Var> {
    let [h, w, n, _] = dims4(g, cost, "class_reduce")?;
    let ts = g.shape(text).to_vec();
    if ts.len() != 2 || ts[0] != n {
        return Err(shape_err!("class_reduce: text {ts:?} for {n} classes"));
    }
    if r2 == 0 || h % r2 != 0 || w % r2 != 0 {
        return Err(shape_err!("class_reduce: {h}x{w} grid not divisible by r2 = {r2}"));
    }
    let tb = g.row_map(text, Arc::new(resample::tile_rows(n, h * w)), &[h, w, n, ts[1]])?;
    let cat = g.concat(&[cost, tb])?;
    let proj = s.linear(g, &format!("{p}.class_reduce"), cat)?;
    let d = *g.shape(proj).last().unwrap();
    g.row_map(proj, Arc::new(resample::avg_pool(h, w, r2, n)), &[h / r2, w / r2, n, d])
}

/// Class enhancement: self-attention across classes at each pooled
/// location, upsampled back onto `stream` as a residual.
pub fn cet_layer(
    g: &mut Graph,
    s: &mut Session,
    p: &str,
    reduced: Var,
    stream: Var,
    heads: usize,
) -> Result<Var> {
    let [rh, rw, n, d] = dims4(g, reduced, "cet_layer")?;
    let [h, w, sn, sd] = dims4(g, stream, "cet_layer")?;
    if sn != n || sd != d {
        return Err(shape_err!("cet_layer: stream classes/width {sn}/{sd} vs {n}/{d}"));
    }
    let tokens = g.reshape(reduced, &[rh * rw, n, d])?;
    let out = self_attention_block(g, s, &format!("{p}.cet"), tokens, None, heads)?;
    let up = g.row_map(out, Arc::new(resample::bilinear(rh, rw, h, w, n)), &[h, w, n, d])?;
    g.add(stream, up)
}

/// One fusion layer: reduce, spatial attention, class reduce, class attention.
pub fn fusion_layer(
    g: &mut Graph,
    s: &mut Session,
    layer: usize,
    x: Var,
    guidance: GuidanceVars,
    text: Var,
    cfg: &FusionConfig,
) -> Result<Var> {
    let p = format!("fusion.layers.{layer}");
    let reduced = spatial_reduce(g, s, &p, x, guidance, cfg.r1)?;
    let x = set_layer(g, s, &p, x, reduced, cfg)?;
    let pooled = class_reduce(g, s, &p, x, text, cfg.r2)?;
    cet_layer(g, s, &p, pooled, x, cfg.heads)
}

/// Projects `C_s` to `d_c` and runs `cfg.num_layers` fusion layers.
pub fn aggregate_on_graph(
    g: &mut Graph,
    s: &mut Session,
    cost: Var,
    guidance: GuidanceVars,
    text: Var,
    cfg: &FusionConfig,
) -> Result<Var> {
    let [h, w, _, _] = dims4(g, cost, "aggregate")?;
    cfg.validate(h, w)?;
    let mut x = s.linear(g, "fusion.input_proj", cost)?;
    for l in 0..cfg.num_layers {
        x = fusion_layer(g, s, l, x, guidance, text, cfg)?;
    }
    Ok(x)
}

/// Runs the fusion stack outside of training.
pub fn aggregate(
    cost: &Tensor,
    guidance: &GuidanceFeatures,
    text: &Tensor,
    cfg: &FusionConfig,
    params: &ParamStore,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut s = Session::inference(params);
    let c = g.constant(cost.clone());
    let gv = GuidanceVars {
        clip_mid: g.constant(guidance.clip_mid.clone()),
        dino_mid: g.constant(guidance.dino_mid.clone()),
    };
    let t = g.constant(text.clone());
    let out = aggregate_on_graph(&mut g, &mut s, c, gv, t, cfg)?;
    Ok(g.value(out).clone())
}

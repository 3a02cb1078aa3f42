//! Multi-direction cost map aggregation.
//!
//! The image is encoded under the four 90° rotations. Each rotation's cosine
//! cost volume is rotated back onto the unrotated grid before fusion. A
//! DINO-style cost volume on the unrotated image joins them, and a linear
//! layer lifts the fused template axis to the working embedding.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{encode_on_graph, EncoderSpec, EncoderVars};
use crate::error::{shape_err, Error, Result};
use crate::params::{GradMask, ParamStore, Session};
use crate::resample;
use crate::sample::ImageSample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CostSource {
    ClipRot(u8),
    Dino,
}

impl CostSource {
    pub fn tag(self) -> String {
        match self {
            CostSource::ClipRot(i) => format!("clip-rot{i}"),
            CostSource::Dino => "dino".to_string(),
        }
    }
}

/// Cosine cost volume `[H_f, W_f, N_t, P]` already aligned to the
/// unrotated grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub values: Tensor,
    pub source: CostSource,
}

/// Projected cost embedding `[H_f, W_f, N_t, C_f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedCost {
    pub values: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Mean,
    #[default]
    Cat,
    Separate,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [
        FusionStrategy::Mean,
        FusionStrategy::Cat,
        FusionStrategy::Separate,
    ];

    /// Size of the fused template axis for `p` templates.
    pub fn channels(self, p: usize) -> usize {
        match self {
            FusionStrategy::Mean => p,
            FusionStrategy::Cat => 5 * p,
            FusionStrategy::Separate => 2 * p,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Mean => "mean",
            FusionStrategy::Cat => "cat",
            FusionStrategy::Separate => "separate",
        }
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(FusionStrategy::Mean),
            "cat" => Ok(FusionStrategy::Cat),
            "separate" => Ok(FusionStrategy::Separate),
            other => Err(Error::Config(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

/// `out[y, x, n, p] = <F(y, x), T(n, p)> / (|F(y, x)| |T(n, p)|)` on the
/// graph. `visual: [H_f, W_f, C]`, `text: [N_t, P, C]`.
pub fn cosine_cost_on_graph(g: &mut Graph, visual: Var, text: Var) -> Result<Var> {
    let (vs, ts) = (g.shape(visual).to_vec(), g.shape(text).to_vec());
    if vs.len() != 3 || ts.len() != 3 || vs[2] != ts[2] {
        return Err(shape_err!("cosine_cost: visual {vs:?} vs text {ts:?}"));
    }
    check_norms(g.value(visual), |r| {
        format!("visual cell ({}, {})", r / vs[1], r % vs[1])
    })?;
    check_norms(g.value(text), |r| {
        format!("text vector (class {}, template {})", r / ts[1], r % ts[1])
    })?;
    let c = vs[2];
    let v2 = g.reshape(visual, &[vs[0] * vs[1], c])?;
    let t2 = g.reshape(text, &[ts[0] * ts[1], c])?;
    let vn = g.l2_normalize(v2)?;
    let tn = g.l2_normalize(t2)?;
    let cost = g.matmul_nt(vn, tn)?;
    g.reshape(cost, &[vs[0], vs[1], ts[0], ts[1]])
}

fn check_norms(t: &Tensor, name: impl Fn(usize) -> String) -> Result<()> {
    for (r, row) in t.data().chunks(t.last_dim()).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n >= 1e-12) {
            return Err(Error::Degenerate(format!("{} has norm {n:e}", name(r))));
        }
    }
    Ok(())
}

pub fn cosine_cost(visual: &Tensor, text: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(visual.clone());
    let t = g.constant(text.clone());
    let c = cosine_cost_on_graph(&mut g, v, t)?;
    Ok(g.value(c).clone())
}

/// Rotates the leading `h x w` grid of `x` by `90 * k` degrees.
pub fn rot90_on_graph(g: &mut Graph, x: Var, k: i64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let inner = 1; // rows are whole trailing blocks
    let (map, oh, ow) = resample::rot90(shape[0], shape[1], inner, k);
    let mut out = shape.clone();
    out[0] = oh;
    out[1] = ow;
    g.row_map(x, Arc::new(map), &out)
}

/// Encodes the four rotations of `image` and returns their aligned cost
/// volumes together with the encoder outputs of the unrotated pass.
pub fn rotated_costs_on_graph(
    g: &mut Graph,
    session: &mut Session,
    prefix: &str,
    spec: &EncoderSpec,
    image: Var,
    text: Var,
) -> Result<([Var; 4], EncoderVars)> {
    let s = g.shape(image).to_vec();
    if s[0] != s[1] {
        return Err(Error::NonSquare {
            height: s[0],
            width: s[1],
        });
    }
    let mut costs = Vec::with_capacity(4);
    let mut base = None;
    for i in 0..4 {
        let rotated = if i == 0 { image } else { rot90_on_graph(g, image, i)? };
        let enc = encode_on_graph(g, session, prefix, spec, rotated, i as usize)?;
        let cost = cosine_cost_on_graph(g, enc.final_grid, text)?;
        let aligned = if i == 0 { cost } else { rot90_on_graph(g, cost, -i)? };
        costs.push(aligned);
        if i == 0 {
            base = Some(enc);
        }
    }
    Ok((costs.try_into().expect("four rotations"), base.expect("rotation 0")))
}

/// Fuses four aligned CLIP volumes and the DINO volume along the template
/// axis. Source order is fixed: clip-rot0..3, dino.
pub fn fuse_on_graph(
    g: &mut Graph,
    clip: &[Var; 4],
    dino: Var,
    strategy: FusionStrategy,
) -> Result<Var> {
    let shape = g.shape(dino).to_vec();
    for &c in clip {
        if g.shape(c) != shape.as_slice() {
            return Err(shape_err!(
                "fuse: clip volume {:?} vs dino {:?}",
                g.shape(c),
                shape
            ));
        }
    }
    match strategy {
        FusionStrategy::Mean => {
            let all = [clip[0], clip[1], clip[2], clip[3], dino];
            g.mean_of(&all)
        }
        FusionStrategy::Cat => g.concat(&[clip[0], clip[1], clip[2], clip[3], dino]),
        FusionStrategy::Separate => {
            let m = g.mean_of(clip)?;
            g.concat(&[m, dino])
        }
    }
}

/// Linear lift of the fused template axis, parameters `{prefix}.weight`
/// (`[K, C_f]`) and `{prefix}.bias`.
pub fn project_on_graph(
    g: &mut Graph,
    session: &mut Session,
    prefix: &str,
    fused: Var,
) -> Result<Var> {
    let k = *g.shape(fused).last().unwrap();
    let w = session.store().tensor(&format!("{prefix}.weight"))?;
    if w.shape()[0] != k {
        return Err(shape_err!(
            "project_cost: fused template axis {k} but projection expects {}",
            w.shape()[0]
        ));
    }
    session.linear(g, prefix, fused)
}

pub fn multi_rotation_costs(
    image: &ImageSample,
    clip: &EncoderSpec,
    text: &Tensor,
) -> Result<[CostVolume; 4]> {
    let store = clip.init_params("clip");
    let mut g = Graph::new();
    let mut s = Session::new(&store, GradMask::None);
    let img = g.constant(image.image.clone());
    let t = g.constant(text.clone());
    let (costs, _) = rotated_costs_on_graph(&mut g, &mut s, "clip", clip, img, t)?;
    Ok(std::array::from_fn(|i| CostVolume {
        values: g.value(costs[i]).clone(),
        source: CostSource::ClipRot(i as u8),
    }))
}

pub fn dino_cost(image: &ImageSample, dino: &EncoderSpec, text: &Tensor) -> Result<CostVolume> {
    let store = dino.init_params("dino");
    let mut g = Graph::new();
    let mut s = Session::new(&store, GradMask::None);
    let img = g.constant(image.image.clone());
    let t = g.constant(text.clone());
    let enc = encode_on_graph(&mut g, &mut s, "dino", dino, img, 0)?;
    let c = cosine_cost_on_graph(&mut g, enc.final_grid, t)?;
    Ok(CostVolume {
        values: g.value(c).clone(),
        source: CostSource::Dino,
    })
}

pub fn fuse_costs(
    clip_volumes: &[CostVolume; 4],
    dino_volume: &CostVolume,
    strategy: FusionStrategy,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let clip: [Var; 4] = std::array::from_fn(|i| g.constant(clip_volumes[i].values.clone()));
    let dino = g.constant(dino_volume.values.clone());
    let f = fuse_on_graph(&mut g, &clip, dino, strategy)?;
    Ok(g.value(f).clone())
}

pub fn project_cost(fused: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<FusedCost> {
    let mut store = ParamStore::new();
    store.insert("proj.weight", weight.clone(), false);
    store.insert("proj.bias", bias.clone(), false);
    let mut g = Graph::new();
    let mut s = Session::inference(&store);
    let x = g.constant(fused.clone());
    let y = project_on_graph(&mut g, &mut s, "proj", x)?;
    Ok(FusedCost {
        values: g.value(y).clone(),
    })
}

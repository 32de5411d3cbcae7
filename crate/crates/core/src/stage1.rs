//! Phase-shift stage: per-node lift, feature augmentation with four
//! attention operators, stacked edge-based attention layers with zero-padded
//! residuals, and the phase output MLP.

use std::f64::consts::PI;

use rand::Rng;

use crate::attention::{att, eatt, AttentionWeights};
use crate::hetgraph::{psi_bi, psi_fc, psi_fc_each, psi_uni, Stage1Graph, BS_EVE, BS_LU, BS_RIS};
use crate::model::{glorot, spec, ModelDims, Result};
use crate::numerics::{ModelParams, NumericsError, ParamBinder, Tensor, LEAKY_SLOPE};

/// Edge feature width (real and imaginary part of one RIS coefficient).
const EDGE_DIM: usize = 2;

const AUGMENT_OPS: [&str; 4] = ["bi_lu", "bi_eve", "fc_joint", "fc_each"];
const LAYER_OPS: [&str; 4] = ["to_lu", "to_eve", "from_lu", "from_eve"];

pub fn init_params(params: &mut ModelParams, n_t: usize, dims: &ModelDims, rng: &mut impl Rng) -> std::result::Result<(), NumericsError> {
    params.insert_uniform("s1.lift.w", &[2 * n_t, dims.lift], glorot(2 * n_t, dims.lift), rng)?;
    for (i, op) in AUGMENT_OPS.iter().enumerate() {
        let edge = if i < 2 { Some(EDGE_DIM) } else { None };
        spec(dims.lift, edge, dims.augment).init(params, &format!("s1.aug.{op}"), rng)?;
    }
    let mut width = dims.augment_out();
    for (t, layer) in dims.stage1_layers.iter().enumerate() {
        for op in LAYER_OPS {
            spec(width, Some(EDGE_DIM), *layer).init(params, &format!("s1.gl{}.{op}", t + 1), rng)?;
        }
        width = layer.out();
    }
    let [h1, h2] = dims.phase_hidden;
    params.insert_uniform("s1.out.w3", &[width, h1], glorot(width, h1), rng)?;
    params.insert_uniform("s1.out.w2", &[h1, h2], glorot(h1, h2), rng)?;
    params.insert_uniform("s1.out.c1", &[h2, 1], glorot(h2, 1), rng)?;
    Ok(())
}

/// Final first-stage features per node type and the phases.
#[derive(Clone, Debug)]
pub struct Stage1Output {
    /// `[b, l]` in `(0, 2 pi)`.
    pub phi: Tensor,
    pub x_br: Tensor,
    pub x_bu: Tensor,
    pub x_be: Tensor,
}

/// Lift plus the four augmentation operators; returns `[X_BR, X_BU, X_BE]`
/// each of width `3 * heads * head_dim`.
pub fn feature_augmentation(g: &Stage1Graph, binder: &ParamBinder, dims: &ModelDims) -> Result<[Tensor; 3]> {
    let w1 = binder.get("s1.lift.w")?;
    let lift = |x: &Tensor| -> Result<Tensor> { Ok(x.matmul(&w1)?.leaky_relu(LEAKY_SLOPE)) };
    let feats = vec![lift(g.x_br())?, lift(g.x_bu())?, lift(g.x_be())?];
    let graph = &g.graph;
    let bind = |op: &str, edge: Option<usize>| {
        AttentionWeights::bind(binder, &format!("s1.aug.{op}"), spec(dims.lift, edge, dims.augment))
    };

    // RIS-LU and RIS-Eve bidirectional views update both of their ends.
    let lu = eatt(&psi_bi(graph, BS_RIS, BS_LU)?, &bind("bi_lu", Some(EDGE_DIM))?, &feats)?;
    // Without Eves the RIS side of this view keeps only its self term.
    let eve = eatt(&psi_bi(graph, BS_RIS, BS_EVE)?.with_zero_fill(), &bind("bi_eve", Some(EDGE_DIM))?, &feats)?;
    // Receivers attend to each other across types; single nodes get zeros.
    let joint = att(&psi_fc(graph, &[BS_LU, BS_EVE])?.with_zero_fill(), &bind("fc_joint", None)?, &feats)?;
    let each = att(&psi_fc_each(graph, &[BS_RIS, BS_LU, BS_EVE])?.with_zero_fill(), &bind("fc_each", None)?, &feats)?;

    let x_br = Tensor::concat(&[lu.outputs[0].clone(), eve.outputs[0].clone(), each.outputs[0].clone()], 1)?;
    let x_bu = Tensor::concat(&[lu.outputs[1].clone(), joint.outputs[0].clone(), each.outputs[1].clone()], 1)?;
    let x_be = Tensor::concat(&[eve.outputs[1].clone(), joint.outputs[1].clone(), each.outputs[2].clone()], 1)?;
    Ok([x_br, x_bu, x_be])
}

/// One attention layer (`tau` counts from 1). All three updates read the
/// previous layer's features.
pub fn gnn_layer(
    g: &Stage1Graph,
    binder: &ParamBinder,
    dims: &ModelDims,
    tau: usize,
    prev: &[Tensor; 3],
    residual: bool,
) -> Result<[Tensor; 3]> {
    let layer = dims.stage1_layers[tau - 1];
    let in_dim = prev[0].shape()[1];
    let graph = &g.graph;
    let feats = prev.to_vec();
    let bind = |op: &str| AttentionWeights::bind(binder, &format!("s1.gl{tau}.{op}"), spec(in_dim, Some(EDGE_DIM), layer));

    let x_bu = eatt(&psi_uni(graph, BS_RIS, BS_LU)?, &bind("to_lu")?, &feats)?.outputs.remove(0);
    let x_be = eatt(&psi_uni(graph, BS_RIS, BS_EVE)?, &bind("to_eve")?, &feats)?.outputs.remove(0);
    let from_lu = eatt(&psi_uni(graph, BS_LU, BS_RIS)?, &bind("from_lu")?, &feats)?.outputs.remove(0);
    let from_eve = eatt(&psi_uni(graph, BS_EVE, BS_RIS)?.with_zero_fill(), &bind("from_eve")?, &feats)?
        .outputs
        .remove(0);
    let mut out = [from_lu.add(&from_eve)?, x_bu, x_be];
    if residual {
        let width = layer.out();
        let raw = [g.x_br(), g.x_bu(), g.x_be()];
        for i in 0..3 {
            out[i] = out[i].add(&raw[i].zero_pad(width)?)?.add(&prev[i].zero_pad(width)?)?;
        }
    }
    Ok(out)
}

/// `phi_l = 2 pi sigmoid(c1 lrelu(W2 lrelu(W3 x_l)))`, returned as `[b, l]`.
pub fn phase_output(x_br: &Tensor, binder: &ParamBinder, batch: usize, l: usize) -> Result<Tensor> {
    let h = x_br.matmul(&binder.get("s1.out.w3")?)?.leaky_relu(LEAKY_SLOPE);
    let h = h.matmul(&binder.get("s1.out.w2")?)?.leaky_relu(LEAKY_SLOPE);
    let pre = h.matmul(&binder.get("s1.out.c1")?)?;
    Ok(pre.sigmoid().scale(2.0 * PI).reshape(&[batch, l])?)
}

pub fn forward(g: &Stage1Graph, binder: &ParamBinder, dims: &ModelDims, residual: bool) -> Result<Stage1Output> {
    let mut x = feature_augmentation(g, binder, dims)?;
    for tau in 1..=dims.stage1_layers.len() {
        x = gnn_layer(g, binder, dims, tau, &x, residual)?;
    }
    let phi = phase_output(&x[0], binder, g.graph.batch, g.l)?;
    let [x_br, x_bu, x_be] = x;
    Ok(Stage1Output { phi, x_br, x_bu, x_be })
}

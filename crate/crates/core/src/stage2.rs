//! Beamforming and AN stage: feature initialization from effective channels
//! and first-stage features, edge-free attention layers, and the two output
//! heads with their power-budget projections.

use log::warn;
use rand::Rng;

use crate::attention::{att, AttentionWeights};
use crate::channel::PowerBudget;
use crate::hetgraph::{psi_fc, psi_uni, Stage2Graph, EVE, LU};
use crate::model::{add_bias, glorot, spec, HeadKind, ModelDims, ModelError, Result};
use crate::numerics::{pivot_ratio, ComplexPair, ModelParams, NumericsError, ParamBinder, Tensor, LEAKY_SLOPE};

const LAYER_OPS: [&str; 4] = ["cross_lu", "fc_lu", "cross_eve", "fc_eve"];

/// Relative pivot size below which a Gram matrix is treated as singular.
const SINGULAR_PIVOT_RATIO: f64 = 1e-12;
/// Diagonal loading relative to the mean Gram diagonal.
const GRAM_LOADING: f64 = 1e-10;
/// Mixed directions shorter than this fall back to the MRT direction.
const MIX_FLOOR: f64 = 1e-9;
/// Initial power per stream (W). The power row of the output weights starts
/// at zero, so every stream begins active and well inside the budget, where
/// the total power still receives gradient.
const POWER_LOGIT_BIAS: f64 = 0.02;
/// Shrinks the initial beam-direct outputs so the starting total power lies
/// well inside the budget (about 0.1 W at desk widths); above the budget the
/// projection leaves no gradient on the total power.
const BEAM_OUTPUT_GAIN: f64 = 0.01;

pub fn init_params(
    params: &mut ModelParams,
    n_t: usize,
    dims: &ModelDims,
    head: HeadKind,
    rng: &mut impl Rng,
) -> std::result::Result<(), NumericsError> {
    let raw = 2 * n_t;
    let init_w = dims.stage1_out();
    params.insert_uniform("s2.init.w4", &[raw, init_w], glorot(raw, init_w), rng)?;
    params.insert_uniform("s2.init.w5", &[raw, init_w], glorot(raw, init_w), rng)?;
    let mut width = init_w;
    for (t, layer) in dims.stage2_layers.iter().enumerate() {
        for op in LAYER_OPS {
            spec(width, None, *layer).init(params, &format!("s2.gl{}.{op}", t + 1), rng)?;
        }
        width = layer.out();
    }
    let h = dims.head_hidden;
    match head {
        HeadKind::BeamDirect => {
            for (node, [w_in, b_in, w_out, b_out]) in [("lu", ["w7", "eta1", "w6", "eta2"]), ("eve", ["w9", "eta3", "w8", "eta4"])] {
                params.insert_uniform(format!("s2.bd.{node}.{w_in}"), &[width, h], glorot(width, h), rng)?;
                params.insert(format!("s2.bd.{node}.{b_in}"), &[h], vec![0.0; h])?;
                params.insert_uniform(format!("s2.bd.{node}.{w_out}"), &[h, raw], BEAM_OUTPUT_GAIN * glorot(h, raw), rng)?;
                params.insert(format!("s2.bd.{node}.{b_out}"), &[raw], vec![0.0; raw])?;
            }
        }
        HeadKind::ModelBased => {
            for node in ["lu", "eve"] {
                params.insert_uniform(format!("s2.mb.{node}.w_hidden"), &[width, h], glorot(width, h), rng)?;
                params.insert(format!("s2.mb.{node}.b_hidden"), &[h], vec![0.0; h])?;
                let bound = glorot(h, 2);
                let w_out = (0..h)
                    .flat_map(|_| [rng.random_range(-bound..=bound), 0.0])
                    .collect();
                params.insert(format!("s2.mb.{node}.w_out"), &[h, 2], w_out)?;
                params.insert(format!("s2.mb.{node}.b_out"), &[2], vec![0.0, POWER_LOGIT_BIAS])?;
            }
        }
    }
    Ok(())
}

/// Final node embeddings: `x_lu [b k, W]`, `x_eve [b m, W]`.
#[derive(Clone, Debug)]
pub struct Stage2Embedding {
    pub x_lu: Tensor,
    pub x_eve: Tensor,
}

/// `lrelu(W4 h~_k) + aug_k` and `lrelu(W5 f~_m) + aug_m`.
pub fn feature_init(g: &Stage2Graph, binder: &ParamBinder) -> Result<[Tensor; 2]> {
    let w4 = binder.get("s2.init.w4")?;
    let w5 = binder.get("s2.init.w5")?;
    let lu = g.x_lu().matmul(&w4)?.leaky_relu(LEAKY_SLOPE);
    let eve = g.x_eve().matmul(&w5)?.leaky_relu(LEAKY_SLOPE);
    if lu.shape() != g.aug_lu.shape() || eve.shape() != g.aug_eve.shape() {
        return Err(ModelError::Config(format!(
            "initial width {:?} does not match augmentation {:?}",
            lu.shape(),
            g.aug_lu.shape()
        )));
    }
    Ok([lu.add(&g.aug_lu)?, eve.add(&g.aug_eve)?])
}

/// One layer (`tau` from 1): each node type sums a cross-type and a
/// same-type edge-free attention output.
pub fn gnn_layer(
    g: &Stage2Graph,
    binder: &ParamBinder,
    dims: &ModelDims,
    tau: usize,
    prev: &[Tensor; 2],
    residual: bool,
) -> Result<[Tensor; 2]> {
    let layer = dims.stage2_layers[tau - 1];
    let in_dim = prev[0].shape()[1];
    let graph = &g.graph;
    let feats = prev.to_vec();
    let bind = |op: &str| AttentionWeights::bind(binder, &format!("s2.gl{tau}.{op}"), spec(in_dim, None, layer));
    let first = |out: crate::attention::AttentionOutput| out.outputs.into_iter().next().expect("one target type");

    let cross_lu = first(att(&psi_uni(graph, EVE, LU)?.with_zero_fill(), &bind("cross_lu")?, &feats)?);
    let fc_lu = first(att(&psi_fc(graph, &[LU])?.with_zero_fill(), &bind("fc_lu")?, &feats)?);
    let lu = cross_lu.add(&fc_lu)?;
    let eve = if g.m > 0 {
        let cross_eve = first(att(&psi_uni(graph, LU, EVE)?.with_zero_fill(), &bind("cross_eve")?, &feats)?);
        let fc_eve = first(att(&psi_fc(graph, &[EVE])?.with_zero_fill(), &bind("fc_eve")?, &feats)?);
        cross_eve.add(&fc_eve)?
    } else {
        Tensor::zeros(&[0, layer.out()])
    };
    let mut out = [lu, eve];
    if residual {
        let width = layer.out();
        let raw = [g.x_lu(), g.x_eve()];
        for i in 0..2 {
            out[i] = out[i].add(&raw[i].zero_pad(width)?)?.add(&prev[i].zero_pad(width)?)?;
        }
    }
    Ok(out)
}

pub fn embed(g: &Stage2Graph, binder: &ParamBinder, dims: &ModelDims, residual: bool) -> Result<Stage2Embedding> {
    let mut x = feature_init(g, binder)?;
    for tau in 1..=dims.stage2_layers.len() {
        x = gnn_layer(g, binder, dims, tau, &x, residual)?;
    }
    let [x_lu, x_eve] = x;
    Ok(Stage2Embedding { x_lu, x_eve })
}

fn mlp2(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor> {
    let h = add_bias(&x.matmul(w1)?, b1)?.leaky_relu(LEAKY_SLOPE);
    add_bias(&h.matmul(w2)?, b2)
}

/// `[rows, 2n]` real outputs to a `[b, count, n]` complex tensor; the first
/// `n` columns are real parts.
fn to_complex(x: &Tensor, b: usize, count: usize, n: usize) -> Result<ComplexPair> {
    Ok(ComplexPair::new(
        x.narrow(1, 0, n)?.reshape(&[b, count, n])?,
        x.narrow(1, n, n)?.reshape(&[b, count, n])?,
    )?)
}

/// Per-sample squared norm of `[b, rows, n]`, as `[b]`.
fn power_per_sample(v: &ComplexPair) -> Result<Tensor> {
    Ok(v.abs2()?.sum_axis(2)?.sum_axis(1)?)
}

/// `[b]` to `[b, rows, n]`.
fn broadcast(s: &Tensor, rows: usize, n: usize) -> Result<Tensor> {
    Ok(s.expand(1, rows)?.expand(2, n)?)
}

/// Scales every sample's vectors by `sqrt(P / max(P, sum ||v||^2))`.
pub fn project_power(w: &ComplexPair, z: &ComplexPair, p_max: f64) -> Result<(ComplexPair, ComplexPair)> {
    let total = power_per_sample(w)?.add(&power_per_sample(z)?)?;
    let factor = total.max_scalar(p_max).reciprocal()?.scale(p_max).sqrt()?;
    let (k, m, n) = (w.shape()[1], z.shape()[1], w.shape()[2]);
    Ok((w.scale_by(&broadcast(&factor, k, n)?)?, z.scale_by(&broadcast(&factor, m, n)?)?))
}

/// Vectors regressed directly by shared per-type MLPs, then projected onto
/// the power budget.
pub fn beam_direct(
    emb: &Stage2Embedding,
    binder: &ParamBinder,
    g: &Stage2Graph,
    budget: &PowerBudget,
) -> Result<(ComplexPair, ComplexPair)> {
    let b = g.graph.batch;
    let n = g.n_t;
    let p = |s: &str| binder.get(&format!("s2.bd.{s}"));
    let raw_w = mlp2(&emb.x_lu, &p("lu.w7")?, &p("lu.eta1")?, &p("lu.w6")?, &p("lu.eta2")?)?;
    let raw_z = if g.m > 0 {
        mlp2(&emb.x_eve, &p("eve.w9")?, &p("eve.eta3")?, &p("eve.w8")?, &p("eve.eta4")?)?
    } else {
        Tensor::zeros(&[0, 2 * n])
    };
    let w = to_complex(&raw_w, b, g.k, n)?;
    let z = to_complex(&raw_z, b, g.m, n)?;
    project_power(&w, &z, budget.p_max)
}

fn unit_rows(v: &ComplexPair) -> Result<ComplexPair> {
    let n = v.shape()[2];
    let inv = v.norm_last()?.reciprocal()?.expand(2, n)?;
    Ok(v.scale_by(&inv)?)
}

/// Solves `conj(G G^H) X = R` for row-stacked channels `r [batch, rows, n]`
/// (rows of `X` are the columns of `G^H (G G^H)^{-1}` with `G = R^*`).
/// Near-singular Gram matrices get a small diagonal loading.
fn pseudo_inverse_rows(r: &ComplexPair) -> Result<ComplexPair> {
    let (b, rows) = (r.shape()[0], r.shape()[1]);
    let gram = r.cbmm(r, false, true)?;
    let (gr, gi) = (gram.re.values(), gram.im.values());
    let mut loading = vec![0.0; b * rows * rows];
    let mut any = false;
    for s in 0..b {
        let base = s * rows * rows;
        let n2 = 2 * rows;
        let mut block = vec![0.0; n2 * n2];
        for i in 0..rows {
            for j in 0..rows {
                let (re, im) = (gr[base + i * rows + j], gi[base + i * rows + j]);
                block[i * n2 + j] = re;
                block[i * n2 + rows + j] = -im;
                block[(rows + i) * n2 + j] = im;
                block[(rows + i) * n2 + rows + j] = re;
            }
        }
        if pivot_ratio(&block, n2) < SINGULAR_PIVOT_RATIO {
            let trace: f64 = (0..rows).map(|i| gr[base + i * rows + i]).sum();
            let eps = GRAM_LOADING * trace / rows as f64;
            let eps = if eps > 0.0 { eps } else { GRAM_LOADING };
            warn!("sample {s}: channel Gram matrix is singular, adding diagonal loading {eps:e}");
            for i in 0..rows {
                loading[base + i * rows + i] = eps;
            }
            any = true;
        }
    }
    let gram = if any {
        ComplexPair::new(gram.re.add(&Tensor::constant(loading, &[b, rows, rows])?)?, gram.im)?
    } else {
        gram
    };
    Ok(ComplexPair::csolve(&gram, r)?)
}

/// Zero-forcing directions for every LU (`[b, k, n]`) and the AN nulling
/// direction for every Eve (`[b, m, n]`), the latter being the last row of
/// the pseudo-inverse of `[h~_1 .. h~_K, f~_m]`.
pub fn zf_directions(h_eff: &ComplexPair, f_eff: &ComplexPair) -> Result<(ComplexPair, ComplexPair)> {
    let (b, k, n) = (h_eff.shape()[0], h_eff.shape()[1], h_eff.shape()[2]);
    let m = f_eff.shape()[1];
    let v = pseudo_inverse_rows(h_eff)?;
    if m == 0 {
        return Ok((v, f_eff.clone()));
    }
    let stacked = |hp: &Tensor, fp: &Tensor| -> Result<Tensor> {
        let h = hp.expand(1, m)?;
        let f = fp.reshape(&[b, m, 1, n])?;
        Ok(Tensor::concat(&[h, f], 2)?.reshape(&[b * m, k + 1, n])?)
    };
    let r = ComplexPair::new(stacked(&h_eff.re, &f_eff.re)?, stacked(&h_eff.im, &f_eff.im)?)?;
    let x = pseudo_inverse_rows(&r)?;
    let v_eve = x.map(|t| t.narrow(1, k, 1)?.reshape(&[b, m, n]))?;
    Ok((v, v_eve))
}

/// Unit directions `normalize(a v^ + (1 - a) c^)` with per-row weights
/// `a [b, rows]`; rows whose mixture collapses use `c^`.
pub fn hybrid_directions(v: &ComplexPair, c: &ComplexPair, a: &Tensor) -> Result<ComplexPair> {
    let n = v.shape()[2];
    let v_hat = unit_rows(v)?;
    let c_hat = unit_rows(c)?;
    let a_full = a.expand(2, n)?;
    let one_minus = a_full.neg().add_scalar(1.0);
    let mix = v_hat.scale_by(&a_full)?.add(&c_hat.scale_by(&one_minus)?)?;
    let norms = mix.norm_last()?;
    let collapsed: Vec<bool> = norms.values().iter().map(|x| !(*x > MIX_FLOOR)).collect();
    let mix = if collapsed.iter().any(|x| *x) {
        warn!("hybrid direction collapsed for {} stream(s), using the MRT direction", collapsed.iter().filter(|x| **x).count());
        let mask: Vec<bool> = collapsed.iter().flat_map(|c| std::iter::repeat_n(*c, n)).collect();
        ComplexPair::new(
            Tensor::select(&mask, &c_hat.re, &mix.re)?,
            Tensor::select(&mask, &c_hat.im, &mix.im)?,
        )?
    } else {
        mix
    };
    unit_rows(&mix)
}

/// Hybrid ZF/MRT head: per node `(mixing logit, power logit)`, mixing via
/// sigmoid, power via ReLU then the budget projection.
pub fn model_based(
    emb: &Stage2Embedding,
    binder: &ParamBinder,
    g: &Stage2Graph,
    budget: &PowerBudget,
) -> Result<(ComplexPair, ComplexPair)> {
    let (b, k, m, n) = (g.graph.batch, g.k, g.m, g.n_t);
    let p = |s: &str| binder.get(&format!("s2.mb.{s}"));
    let head = |x: &Tensor, node: &str| -> Result<Tensor> {
        mlp2(
            x,
            &p(&format!("{node}.w_hidden"))?,
            &p(&format!("{node}.b_hidden"))?,
            &p(&format!("{node}.w_out"))?,
            &p(&format!("{node}.b_out"))?,
        )
    };
    let out_lu = head(&emb.x_lu, "lu")?;
    let alpha = out_lu.narrow(1, 0, 1)?.sigmoid().reshape(&[b, k])?;
    let p_lu = out_lu.narrow(1, 1, 1)?.relu().reshape(&[b, k])?;
    let (beta, p_eve) = if m > 0 {
        let out_eve = head(&emb.x_eve, "eve")?;
        (
            out_eve.narrow(1, 0, 1)?.sigmoid().reshape(&[b, m])?,
            out_eve.narrow(1, 1, 1)?.relu().reshape(&[b, m])?,
        )
    } else {
        (Tensor::zeros(&[b, 0]), Tensor::zeros(&[b, 0]))
    };

    // Powers: p_i P / max(P, sum p)
    let total = p_lu.sum_axis(1)?.add(&p_eve.sum_axis(1)?)?;
    let scale = total.max_scalar(budget.p_max).reciprocal()?.scale(budget.p_max);
    let amp_lu = p_lu.mul(&scale.expand(1, k)?)?.sqrt()?;
    let amp_eve = p_eve.mul(&scale.expand(1, m)?)?.sqrt()?;

    let (v, v_eve) = zf_directions(&g.h_eff, &g.f_eff)?;
    let w_dir = hybrid_directions(&v, &g.h_eff, &alpha)?;
    let w = w_dir.scale_by(&amp_lu.expand(2, n)?)?;
    let z = if m > 0 {
        let z_dir = hybrid_directions(&v_eve, &g.f_eff, &beta)?;
        z_dir.scale_by(&amp_eve.expand(2, n)?)?
    } else {
        ComplexPair::new(Tensor::zeros(&[b, 0, n]), Tensor::zeros(&[b, 0, n]))?
    };
    Ok((w, z))
}

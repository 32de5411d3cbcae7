//! Multi-head graph attention over [`GraphView`]s: an edge-based operator
//! (with a target self term and edge-feature projections) and an edge-free
//! operator.
//!
//! Both operators run over all arcs of a view at once: projections are
//! dense matrix products, per-target softmax and aggregation are segment
//! sums keyed by the arc target.

use rand::Rng;
use thiserror::Error;

use crate::hetgraph::{GraphView, TypeId};
use crate::numerics::{ModelParams, NumericsError, ParamBinder, Tensor, LEAKY_SLOPE};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("node {index} of type {node_type} has no in-neighbors")]
    IsolatedNode { node_type: TypeId, index: usize },
    #[error("attention dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, AttentionError>;

/// Shape of one operator instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub in_dim: usize,
    /// Edge feature width; `None` for the edge-free operator.
    pub edge_dim: Option<usize>,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionSpec {
    pub fn out_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Registers `w_s`, `w_n`, `a` (and `w_e`) under `prefix` with uniform
    /// variance-preserving initialization.
    pub fn init(&self, params: &mut ModelParams, prefix: &str, rng: &mut impl Rng) -> std::result::Result<(), NumericsError> {
        let out = self.out_dim();
        let bound = |fan_in: usize| (6.0 / (fan_in + self.head_dim) as f64).sqrt();
        params.insert_uniform(format!("{prefix}.w_s"), &[self.in_dim, out], bound(self.in_dim), rng)?;
        params.insert_uniform(format!("{prefix}.w_n"), &[self.in_dim, out], bound(self.in_dim), rng)?;
        if let Some(fe) = self.edge_dim {
            params.insert_uniform(format!("{prefix}.w_e"), &[fe, out], bound(fe), rng)?;
        }
        params.insert_uniform(format!("{prefix}.a"), &[self.heads, self.head_dim], bound(self.head_dim), rng)?;
        Ok(())
    }
}

/// Bound parameter tensors of one operator instance.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub spec: AttentionSpec,
    /// `[in_dim, heads * head_dim]`; head `d` owns columns `d*B..(d+1)*B`.
    pub w_s: Tensor,
    pub w_n: Tensor,
    pub w_e: Option<Tensor>,
    /// `[heads, head_dim]`.
    pub a: Tensor,
}

impl AttentionWeights {
    pub fn bind(binder: &ParamBinder, prefix: &str, spec: AttentionSpec) -> std::result::Result<Self, NumericsError> {
        Ok(AttentionWeights {
            spec,
            w_s: binder.get(&format!("{prefix}.w_s"))?,
            w_n: binder.get(&format!("{prefix}.w_n"))?,
            w_e: match spec.edge_dim {
                Some(_) => Some(binder.get(&format!("{prefix}.w_e"))?),
                None => None,
            },
            a: binder.get(&format!("{prefix}.a"))?,
        })
    }
}

/// Updated target features (one tensor per target type, in view order)
/// and the attention coefficients `[arcs, heads]`.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub outputs: Vec<Tensor>,
    pub alpha: Tensor,
}

fn stack(features: &[Tensor], types: &[TypeId], counts: &[usize], width: usize) -> Result<Tensor> {
    let mut parts = Vec::with_capacity(types.len());
    for (&t, &n) in types.iter().zip(counts) {
        let f = features
            .get(t)
            .ok_or_else(|| AttentionError::Dimension(format!("no features for node type {t}")))?;
        if f.shape() != [n, width] {
            return Err(AttentionError::Dimension(format!(
                "node type {t} features {:?}, expected [{n}, {width}]",
                f.shape()
            )));
        }
        parts.push(f.clone());
    }
    Ok(Tensor::concat(&parts, 0)?)
}

fn run(view: &GraphView, w: &AttentionWeights, features: &[Tensor], with_edges: bool) -> Result<AttentionOutput> {
    let spec = w.spec;
    let (d, b) = (spec.heads, spec.head_dim);
    let width = d * b;
    let isolated = view.isolated_targets();
    if let Some(&(t, i)) = isolated.first() {
        if !view.zero_fill_isolated {
            return Err(AttentionError::IsolatedNode { node_type: t, index: i });
        }
    }
    let n_t = view.total_targets();
    let e = view.arc_count();

    let x_src = stack(features, &view.source_types, &view.source_counts, spec.in_dim)?;
    let x_tgt = stack(features, &view.target_types, &view.target_counts, spec.in_dim)?;
    let s = x_tgt.matmul(&w.w_s)?;
    let n_proj = x_src.matmul(&w.w_n)?;

    let mut msg = n_proj.gather_rows(&view.arc_src)?;
    if with_edges {
        let (w_e, y, rows) = match (&w.w_e, &view.edge_features, &view.edge_rows) {
            (Some(w_e), Some(y), Some(rows)) => (w_e, y, rows),
            _ => {
                return Err(AttentionError::Dimension(
                    "edge-based attention needs edge features and an edge projection".into(),
                ))
            }
        };
        let e_proj = y.matmul(w_e)?;
        msg = msg.add(&e_proj.gather_rows(rows)?)?;
    }
    let z = s.gather_rows(&view.arc_dst)?.add(&msg)?.leaky_relu(LEAKY_SLOPE);
    let a = w.a.reshape(&[width])?.expand(0, e)?;
    let logits = z.mul(&a)?.reshape(&[e, d, b])?.sum_axis(2)?;

    // Per-target maxima are constants: the softmax is shift invariant.
    let mut maxes = vec![f64::NEG_INFINITY; n_t * d];
    for (arc, &t) in view.arc_dst.iter().enumerate() {
        for h in 0..d {
            let v = logits.values()[arc * d + h];
            if v > maxes[t * d + h] {
                maxes[t * d + h] = v;
            }
        }
    }
    let shift: Vec<f64> = view
        .arc_dst
        .iter()
        .flat_map(|&t| maxes[t * d..(t + 1) * d].to_vec())
        .collect();
    let ex = logits.sub(&Tensor::constant(shift, &[e, d])?)?.exp();
    let mut denom = ex.segment_sum(&view.arc_dst, n_t)?;
    if !isolated.is_empty() {
        // Isolated rows have no numerators; a unit denominator keeps them at 0.
        let mut pad = vec![0.0; n_t * d];
        let mut indeg = vec![0usize; n_t];
        for &t in &view.arc_dst {
            indeg[t] += 1;
        }
        for (t, deg) in indeg.iter().enumerate() {
            if *deg == 0 {
                pad[t * d..(t + 1) * d].iter_mut().for_each(|x| *x = 1.0);
            }
        }
        denom = denom.add(&Tensor::constant(pad, &[n_t, d])?)?;
    }
    let alpha = ex.mul(&denom.reciprocal()?.gather_rows(&view.arc_dst)?)?;

    let weighted = msg
        .reshape(&[e, d, b])?
        .mul(&alpha.expand(2, b)?)?
        .reshape(&[e, width])?;
    let mut out = weighted.segment_sum(&view.arc_dst, n_t)?;
    if with_edges {
        out = out.add(&s)?;
    }

    let mut outputs = Vec::with_capacity(view.target_types.len());
    let mut base = 0;
    for &n in &view.target_counts {
        outputs.push(out.narrow(0, base, n)?);
        base += n;
    }
    Ok(AttentionOutput { outputs, alpha })
}

/// Edge-based attention: `W_S x_i + sum_j alpha_ij (W_N x_j + W_E y_ij)`
/// per head, heads concatenated. `features` is indexed by node type.
pub fn eatt(view: &GraphView, w: &AttentionWeights, features: &[Tensor]) -> Result<AttentionOutput> {
    run(view, w, features, true)
}

/// Edge-free attention: `sum_j alpha_ij W_N x_j` per head, heads
/// concatenated (no self term).
pub fn att(view: &GraphView, w: &AttentionWeights, features: &[Tensor]) -> Result<AttentionOutput> {
    run(view, w, features, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetgraph::{EdgeSet, HeteroGraph, NodeSet, psi_fc, psi_uni};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn star(sources: usize, src_feats: Vec<f64>, edge_feats: Vec<f64>) -> HeteroGraph {
        HeteroGraph {
            batch: 1,
            node_sets: vec![
                NodeSet {
                    name: "src",
                    per_sample: sources,
                    features: Tensor::constant(src_feats, &[sources, 2]).unwrap(),
                },
                NodeSet {
                    name: "dst",
                    per_sample: 1,
                    features: Tensor::constant(vec![0.3, -0.7], &[1, 2]).unwrap(),
                },
            ],
            edge_sets: vec![EdgeSet {
                name: "e",
                a: 0,
                b: 1,
                pairs: (0..sources).map(|i| (i, 0)).collect(),
                features: Some(Tensor::constant(edge_feats, &[sources, 1]).unwrap()),
                directed: false,
            }],
        }
    }

    fn weights(spec: AttentionSpec, seed: u64) -> (ModelParams, AttentionWeights) {
        let mut p = ModelParams::new();
        spec.init(&mut p, "op", &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let w = AttentionWeights::bind(&ParamBinder::frozen(&p), "op", spec).unwrap();
        (p, w)
    }

    fn feats(g: &HeteroGraph) -> Vec<Tensor> {
        g.node_sets.iter().map(|n| n.features.clone()).collect()
    }

    #[test]
    fn single_neighbor_gets_unit_weight() {
        let g = star(1, vec![1.0, 2.0], vec![0.5]);
        let spec = AttentionSpec { in_dim: 2, edge_dim: Some(1), heads: 3, head_dim: 2 };
        let (_, w) = weights(spec, 1);
        let v = psi_uni(&g, 0, 1).unwrap();
        let out = eatt(&v, &w, &feats(&g)).unwrap();
        assert!(out.alpha.values().iter().all(|a| (a - 1.0).abs() < 1e-15));
        assert_eq!(out.outputs[0].shape(), &[1, 6]);

        let spec = AttentionSpec { in_dim: 2, edge_dim: None, heads: 2, head_dim: 2 };
        let (_, w) = weights(spec, 2);
        let out = att(&v, &w, &feats(&g)).unwrap();
        let direct = Tensor::constant(vec![1.0, 2.0], &[1, 2]).unwrap().matmul(&w.w_n).unwrap();
        for (a, b) in out.outputs[0].values().iter().zip(direct.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_neighbors_share_weight() {
        let g = star(2, vec![1.0, 2.0, 1.0, 2.0], vec![0.5, 0.5]);
        let spec = AttentionSpec { in_dim: 2, edge_dim: Some(1), heads: 2, head_dim: 3 };
        let (_, w) = weights(spec, 3);
        let out = eatt(&psi_uni(&g, 0, 1).unwrap(), &w, &feats(&g)).unwrap();
        assert!(out.alpha.values().iter().all(|a| (a - 0.5).abs() < 1e-15));
    }

    #[test]
    fn isolated_target_is_reported_or_zero_filled() {
        let mut g = star(2, vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 0.5]);
        g.node_sets[1].per_sample = 1;
        let spec = AttentionSpec { in_dim: 2, edge_dim: None, heads: 1, head_dim: 2 };
        let (_, w) = weights(spec, 4);
        let fc = psi_fc(&g, &[1]).unwrap();
        match att(&fc, &w, &feats(&g)) {
            Err(AttentionError::IsolatedNode { node_type, index }) => assert_eq!((node_type, index), (1, 0)),
            other => panic!("expected isolated-node error, got {other:?}"),
        }
        let out = att(&fc.with_zero_fill(), &w, &feats(&g)).unwrap();
        assert_eq!(out.outputs[0].values(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_projections_leave_only_self_term() {
        let g = star(3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0.1, 0.2, 0.3]);
        let spec = AttentionSpec { in_dim: 2, edge_dim: Some(1), heads: 2, head_dim: 2 };
        let (mut p, _) = weights(spec, 5);
        for path in ["op.w_n", "op.w_e"] {
            let prm = p.get_mut(path).unwrap();
            prm.value = std::sync::Arc::new(vec![0.0; prm.value.len()]);
        }
        let w = AttentionWeights::bind(&ParamBinder::frozen(&p), "op", spec).unwrap();
        let out = eatt(&psi_uni(&g, 0, 1).unwrap(), &w, &feats(&g)).unwrap();
        let s = g.node_sets[1].features.matmul(&w.w_s).unwrap();
        assert_eq!(out.outputs[0].values(), s.values());
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let g = star(2, vec![1e4, -1e4, -1e4, 1e4], vec![0.0, 0.0]);
        let spec = AttentionSpec { in_dim: 2, edge_dim: Some(1), heads: 2, head_dim: 4 };
        let (_, w) = weights(spec, 6);
        let out = eatt(&psi_uni(&g, 0, 1).unwrap(), &w, &feats(&g)).unwrap();
        assert!(out.alpha.values().iter().all(|a| a.is_finite()));
        assert!(out.outputs[0].values().iter().all(|a| a.is_finite()));
    }
}

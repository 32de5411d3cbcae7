//! Heterogeneous graph representations of the system and the subgraph
//! extraction operators used by the attention layers.
//!
//! A graph may hold a whole batch: every node set stacks the nodes of all
//! samples (sample-major), and edges never cross sample boundaries. Views
//! produced by [`psi_uni`], [`psi_bi`], [`psi_fc`] and [`psi_fc_each`] index
//! into the parent node sets, so node `i` of a view is node `i` of its type.

use thiserror::Error;

use crate::channel::{path_amplitude, ChannelBatch, ChannelError, ChannelRealization, ScenarioConfig};
use crate::numerics::{ComplexPair, NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph usage error: {0}")]
    Usage(String),
    #[error("graph dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, GraphError>;

pub type TypeId = usize;

/// BS-RIS link nodes (one per reflecting element).
pub const BS_RIS: TypeId = 0;
/// BS-LU link nodes.
pub const BS_LU: TypeId = 1;
/// BS-Eve link nodes.
pub const BS_EVE: TypeId = 2;

/// BS-RIS-LU nodes of the second graph.
pub const LU: TypeId = 0;
/// BS-RIS-Eve nodes of the second graph.
pub const EVE: TypeId = 1;

#[derive(Clone, Debug)]
pub struct NodeSet {
    pub name: &'static str,
    /// Nodes per sample.
    pub per_sample: usize,
    /// `[batch * per_sample, width]`, sample-major.
    pub features: Tensor,
}

/// Undirected (or directed `a -> b`) edges between two node sets.
#[derive(Clone, Debug)]
pub struct EdgeSet {
    pub name: &'static str,
    pub a: TypeId,
    pub b: TypeId,
    /// Global row indices `(row in a, row in b)`.
    pub pairs: Vec<(usize, usize)>,
    /// One feature row per pair.
    pub features: Option<Tensor>,
    pub directed: bool,
}

#[derive(Clone, Debug)]
pub struct HeteroGraph {
    pub batch: usize,
    pub node_sets: Vec<NodeSet>,
    pub edge_sets: Vec<EdgeSet>,
}

impl HeteroGraph {
    pub fn node_count(&self, t: TypeId) -> Result<usize> {
        self.node_sets
            .get(t)
            .map(|n| n.per_sample * self.batch)
            .ok_or_else(|| GraphError::Usage(format!("unknown node type {t}")))
    }

    pub fn total_nodes(&self) -> usize {
        self.node_sets.iter().map(|n| n.per_sample * self.batch).sum()
    }

    pub fn total_edges(&self) -> usize {
        self.edge_sets.iter().map(|e| e.pairs.len()).sum()
    }

    /// Checks index ranges and feature row counts.
    pub fn validate(&self) -> Result<()> {
        for n in &self.node_sets {
            let rows = n.features.shape().first().copied().unwrap_or(0);
            if rows != n.per_sample * self.batch {
                return Err(GraphError::Dimension(format!(
                    "node set {} has {rows} feature rows for {} nodes",
                    n.name,
                    n.per_sample * self.batch
                )));
            }
        }
        for e in &self.edge_sets {
            let (na, nb) = (self.node_count(e.a)?, self.node_count(e.b)?);
            if e.pairs.iter().any(|&(i, j)| i >= na || j >= nb) {
                return Err(GraphError::Dimension(format!("edge set {} has an endpoint out of range", e.name)));
            }
            if let Some(f) = &e.features {
                if f.shape()[0] != e.pairs.len() {
                    return Err(GraphError::Dimension(format!("edge set {} feature rows mismatch", e.name)));
                }
            }
        }
        Ok(())
    }

    fn sample_of(&self, t: TypeId, row: usize) -> usize {
        row / self.node_sets[t].per_sample
    }

    fn edge_set_between(&self, x: TypeId, y: TypeId) -> Result<(&EdgeSet, bool)> {
        for e in &self.edge_sets {
            if e.a == x && e.b == y {
                return Ok((e, false));
            }
            if e.a == y && e.b == x && !e.directed {
                return Ok((e, true));
            }
        }
        Err(GraphError::Usage(format!("no edge set connects node types {x} and {y}")))
    }

    fn check_type(&self, t: TypeId) -> Result<()> {
        self.node_count(t).map(|_| ())
    }
}

/// A directed subgraph used by one attention call. Sources and targets are
/// stacked by type in the listed order; arcs index into those stacks.
#[derive(Clone, Debug)]
pub struct GraphView {
    pub source_types: Vec<TypeId>,
    pub target_types: Vec<TypeId>,
    /// Rows per entry of `source_types`.
    pub source_counts: Vec<usize>,
    /// Rows per entry of `target_types`.
    pub target_counts: Vec<usize>,
    pub arc_src: Vec<usize>,
    pub arc_dst: Vec<usize>,
    /// Row of `edge_features` carried by each arc.
    pub edge_rows: Option<Vec<usize>>,
    pub edge_features: Option<Tensor>,
    /// Targets without in-arcs produce zero rows instead of an error.
    pub zero_fill_isolated: bool,
}

impl GraphView {
    pub fn arc_count(&self) -> usize {
        self.arc_src.len()
    }

    pub fn total_sources(&self) -> usize {
        self.source_counts.iter().sum()
    }

    pub fn total_targets(&self) -> usize {
        self.target_counts.iter().sum()
    }

    pub fn with_zero_fill(mut self) -> Self {
        self.zero_fill_isolated = true;
        self
    }

    /// Targets with no incoming arc, as `(type, row)`.
    pub fn isolated_targets(&self) -> Vec<(TypeId, usize)> {
        let mut indeg = vec![0usize; self.total_targets()];
        for &d in &self.arc_dst {
            indeg[d] += 1;
        }
        let mut out = Vec::new();
        let mut base = 0;
        for (t, &n) in self.target_types.iter().zip(&self.target_counts) {
            for r in 0..n {
                if indeg[base + r] == 0 {
                    out.push((*t, r));
                }
            }
            base += n;
        }
        out
    }

    /// Arcs as `((src_type, src_row), (dst_type, dst_row))`.
    pub fn typed_arcs(&self) -> Vec<((TypeId, usize), (TypeId, usize))> {
        let locate = |types: &[TypeId], counts: &[usize], mut i: usize| {
            for (t, &n) in types.iter().zip(counts) {
                if i < n {
                    return (*t, i);
                }
                i -= n;
            }
            unreachable!("arc index out of range")
        };
        self.arc_src
            .iter()
            .zip(&self.arc_dst)
            .map(|(&s, &d)| {
                (
                    locate(&self.source_types, &self.source_counts, s),
                    locate(&self.target_types, &self.target_counts, d),
                )
            })
            .collect()
    }
}

/// Directed bipartite view `src -> dst` with inherited edge features.
pub fn psi_uni(g: &HeteroGraph, src: TypeId, dst: TypeId) -> Result<GraphView> {
    g.check_type(src)?;
    g.check_type(dst)?;
    let (es, flipped) = g.edge_set_between(src, dst)?;
    let mut arc_src = Vec::with_capacity(es.pairs.len());
    let mut arc_dst = Vec::with_capacity(es.pairs.len());
    for &(a, b) in &es.pairs {
        let (s, d) = if flipped { (b, a) } else { (a, b) };
        arc_src.push(s);
        arc_dst.push(d);
    }
    Ok(GraphView {
        source_types: vec![src],
        target_types: vec![dst],
        source_counts: vec![g.node_count(src)?],
        target_counts: vec![g.node_count(dst)?],
        arc_src,
        arc_dst,
        edge_rows: es.features.as_ref().map(|_| (0..es.pairs.len()).collect()),
        edge_features: es.features.clone(),
        zero_fill_isolated: false,
    })
}

/// Bidirectional bipartite view: every edge becomes two arcs sharing one
/// feature row. Both types are sources and targets, stacked `[a, b]`.
pub fn psi_bi(g: &HeteroGraph, a: TypeId, b: TypeId) -> Result<GraphView> {
    g.check_type(a)?;
    g.check_type(b)?;
    let (es, flipped) = g.edge_set_between(a, b)?;
    let na = g.node_count(a)?;
    let nb = g.node_count(b)?;
    let n = es.pairs.len();
    let mut arc_src = Vec::with_capacity(2 * n);
    let mut arc_dst = Vec::with_capacity(2 * n);
    let mut rows = Vec::with_capacity(2 * n);
    for (e, &(x, y)) in es.pairs.iter().enumerate() {
        let (ia, ib) = if flipped { (y, x) } else { (x, y) };
        arc_src.push(ia);
        arc_dst.push(na + ib);
        rows.push(e);
        arc_src.push(na + ib);
        arc_dst.push(ia);
        rows.push(e);
    }
    Ok(GraphView {
        source_types: vec![a, b],
        target_types: vec![a, b],
        source_counts: vec![na, nb],
        target_counts: vec![na, nb],
        arc_src,
        arc_dst,
        edge_rows: es.features.as_ref().map(|_| rows),
        edge_features: es.features.clone(),
        zero_fill_isolated: false,
    })
}

fn fc_view(g: &HeteroGraph, types: &[TypeId], cross_type: bool) -> Result<GraphView> {
    if types.is_empty() {
        return Err(GraphError::Usage("fully-connected view needs at least one node set".into()));
    }
    let mut counts = Vec::with_capacity(types.len());
    for &t in types {
        counts.push(g.node_count(t)?);
    }
    if counts.iter().sum::<usize>() == 0 {
        return Err(GraphError::Usage("fully-connected view over empty node sets".into()));
    }
    // (stacked index, type position, sample) per node
    let mut nodes = Vec::new();
    let mut base = 0;
    for (pos, (&t, &n)) in types.iter().zip(&counts).enumerate() {
        for r in 0..n {
            nodes.push((base + r, pos, g.sample_of(t, r)));
        }
        base += n;
    }
    let mut arc_src = Vec::new();
    let mut arc_dst = Vec::new();
    for &(i, pi, si) in &nodes {
        for &(j, pj, sj) in &nodes {
            if i != j && si == sj && (cross_type || pi == pj) {
                arc_src.push(j);
                arc_dst.push(i);
            }
        }
    }
    Ok(GraphView {
        source_types: types.to_vec(),
        target_types: types.to_vec(),
        source_counts: counts.clone(),
        target_counts: counts,
        arc_src,
        arc_dst,
        edge_rows: None,
        edge_features: None,
        zero_fill_isolated: false,
    })
}

/// Complete feature-free graph over the union of the given node sets
/// (within each sample). Each undirected edge is two arcs.
pub fn psi_fc(g: &HeteroGraph, types: &[TypeId]) -> Result<GraphView> {
    fc_view(g, types, true)
}

/// Disjoint union of per-type complete graphs, processed as one view
/// without cross-type arcs.
pub fn psi_fc_each(g: &HeteroGraph, types: &[TypeId]) -> Result<GraphView> {
    fc_view(g, types, false)
}

/// Fixed per-block feature multipliers that bring raw CSI entries to order
/// one. Derived from the nominal deployment geometry, not from data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputScaling {
    pub bs_ris: f64,
    pub lu_direct: f64,
    pub eve_direct: f64,
    pub lu_ris: f64,
    pub eve_ris: f64,
}

impl InputScaling {
    pub fn unit() -> Self {
        InputScaling {
            bs_ris: 1.0,
            lu_direct: 1.0,
            eve_direct: 1.0,
            lu_ris: 1.0,
            eve_ris: 1.0,
        }
    }

    /// Inverse large-scale amplitude at the nominal link distances (disk
    /// centers).
    pub fn from_scenario(cfg: &ScenarioConfig) -> Self {
        let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt().max(1.0);
        let inv = |dist: f64| 1.0 / path_amplitude(cfg.rho_db, cfg.alpha, dist);
        InputScaling {
            bs_ris: inv(d(cfg.bs_pos, cfg.ris_pos)),
            lu_direct: inv(d(cfg.bs_pos, cfg.lu_center)),
            eve_direct: inv(d(cfg.bs_pos, cfg.eve_center)),
            lu_ris: inv(d(cfg.ris_pos, cfg.lu_center)),
            eve_ris: inv(d(cfg.ris_pos, cfg.eve_center)),
        }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.bs_ris, self.lu_direct, self.eve_direct, self.lu_ris, self.eve_ris]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        InputScaling {
            bs_ris: a[0],
            lu_direct: a[1],
            eve_direct: a[2],
            lu_ris: a[3],
            eve_ris: a[4],
        }
    }
}

/// `Concat(Re v, Im v)` rows, scaled.
fn real_rows<'a>(vs: impl Iterator<Item = &'a [num_complex::Complex64]>, scale: f64) -> (Vec<f64>, usize) {
    let mut out = Vec::new();
    let mut rows = 0;
    for v in vs {
        out.extend(v.iter().map(|c| c.re * scale));
        out.extend(v.iter().map(|c| c.im * scale));
        rows += 1;
    }
    (out, rows)
}

/// Graph of BS-RIS, BS-LU and BS-Eve link nodes with RIS-receiver edge
/// features, for a batch of realizations.
#[derive(Clone, Debug)]
pub struct Stage1Graph {
    pub graph: HeteroGraph,
    pub n_t: usize,
    pub l: usize,
    pub k: usize,
    pub m: usize,
}

impl Stage1Graph {
    pub fn x_br(&self) -> &Tensor {
        &self.graph.node_sets[BS_RIS].features
    }

    pub fn x_bu(&self) -> &Tensor {
        &self.graph.node_sets[BS_LU].features
    }

    pub fn x_be(&self) -> &Tensor {
        &self.graph.node_sets[BS_EVE].features
    }

    /// LU edge features, one row per `(sample, l, k)`.
    pub fn y1(&self) -> Option<&Tensor> {
        self.graph.edge_sets[0].features.as_ref()
    }

    pub fn y2(&self) -> Option<&Tensor> {
        self.graph.edge_sets[1].features.as_ref()
    }
}

fn dims_of(chs: &[&ChannelRealization]) -> Result<(usize, usize, usize, usize)> {
    let first = chs.first().ok_or_else(|| GraphError::Usage("empty batch".into()))?;
    let d = first.dims();
    for c in chs {
        c.validate()?;
        if c.dims() != d {
            return Err(GraphError::Dimension(format!("batch mixes dimensions {d:?} and {:?}", c.dims())));
        }
    }
    Ok(d)
}

/// Builds the link-level graph for a batch.
pub fn build_stage1_batch(chs: &[&ChannelRealization], scaling: &InputScaling) -> Result<Stage1Graph> {
    let (n_t, l, k, m) = dims_of(chs)?;
    let b = chs.len();
    let w = 2 * n_t;
    let (br, _) = real_rows(chs.iter().flat_map(|c| c.h.chunks(n_t.max(1)).take(l)), scaling.bs_ris);
    let (bu, _) = real_rows(chs.iter().flat_map(|c| c.h_b.iter().map(|v| v.as_slice())), scaling.lu_direct);
    let (be, _) = real_rows(chs.iter().flat_map(|c| c.f_b.iter().map(|v| v.as_slice())), scaling.eve_direct);

    let mut pairs_u = Vec::with_capacity(b * l * k);
    let mut y1 = Vec::with_capacity(2 * b * l * k);
    let mut pairs_e = Vec::with_capacity(b * l * m);
    let mut y2 = Vec::with_capacity(2 * b * l * m);
    for (s, c) in chs.iter().enumerate() {
        for li in 0..l {
            for ki in 0..k {
                pairs_u.push((s * l + li, s * k + ki));
                let v = c.h_r[ki][li] * scaling.lu_ris;
                y1.extend([v.re, v.im]);
            }
            for mi in 0..m {
                pairs_e.push((s * l + li, s * m + mi));
                let v = c.f_r[mi][li] * scaling.eve_ris;
                y2.extend([v.re, v.im]);
            }
        }
    }
    let graph = HeteroGraph {
        batch: b,
        node_sets: vec![
            NodeSet {
                name: "bs_ris",
                per_sample: l,
                features: Tensor::constant(br, &[b * l, w])?,
            },
            NodeSet {
                name: "bs_lu",
                per_sample: k,
                features: Tensor::constant(bu, &[b * k, w])?,
            },
            NodeSet {
                name: "bs_eve",
                per_sample: m,
                features: Tensor::constant(be, &[b * m, w])?,
            },
        ],
        edge_sets: vec![
            EdgeSet {
                name: "ris_lu",
                a: BS_RIS,
                b: BS_LU,
                features: Some(Tensor::constant(y1, &[pairs_u.len(), 2])?),
                pairs: pairs_u,
                directed: false,
            },
            EdgeSet {
                name: "ris_eve",
                a: BS_RIS,
                b: BS_EVE,
                features: Some(Tensor::constant(y2, &[pairs_e.len(), 2])?),
                pairs: pairs_e,
                directed: false,
            },
        ],
    };
    graph.validate()?;
    Ok(Stage1Graph { graph, n_t, l, k, m })
}

pub fn build_stage1(ch: &ChannelRealization, scaling: &InputScaling) -> Result<Stage1Graph> {
    build_stage1_batch(&[ch], scaling)
}

/// Receiver-level graph: effective-channel nodes for LUs and Eves, fully
/// connected within and across the two types.
#[derive(Clone, Debug)]
pub struct Stage2Graph {
    pub graph: HeteroGraph,
    /// `[b, k, n_t]` effective LU channels.
    pub h_eff: ComplexPair,
    /// `[b, m, n_t]` effective Eve channels.
    pub f_eff: ComplexPair,
    /// Augmentation rows handed over from the first graph.
    pub aug_lu: Tensor,
    pub aug_eve: Tensor,
    pub n_t: usize,
    pub k: usize,
    pub m: usize,
}

impl Stage2Graph {
    /// Scaled `Concat(Re, Im)` effective-channel rows, `[b * k, 2 n_t]`.
    pub fn x_lu(&self) -> &Tensor {
        &self.graph.node_sets[LU].features
    }

    pub fn x_eve(&self) -> &Tensor {
        &self.graph.node_sets[EVE].features
    }
}

fn flatten_rows(p: &ComplexPair, rows: usize, n: usize, scale: f64) -> Result<Tensor> {
    let re = p.re.reshape(&[rows, n])?;
    let im = p.im.reshape(&[rows, n])?;
    Ok(Tensor::concat(&[re, im], 1)?.scale(scale))
}

fn complete_pairs(b: usize, na: usize, nb: usize, same: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for s in 0..b {
        for i in 0..na {
            for j in 0..nb {
                if !same || i < j {
                    out.push((s * na + i, s * nb + j));
                }
            }
        }
    }
    out
}

/// Builds the receiver graph from the phase vector `phi: [b, l]` and the
/// augmentation rows `aug_lu: [b k, F]`, `aug_eve: [b m, F]`.
pub fn build_stage2(
    ch: &ChannelBatch,
    phi: &Tensor,
    aug_lu: &Tensor,
    aug_eve: &Tensor,
    scaling: &InputScaling,
) -> Result<Stage2Graph> {
    let (b, k, m, n) = (ch.batch, ch.k, ch.m, ch.n_t);
    let ok_rows = |t: &Tensor, rows: usize| t.shape().len() == 2 && t.shape()[0] == rows;
    if !ok_rows(aug_lu, b * k) || !ok_rows(aug_eve, b * m) || aug_lu.shape()[1] != aug_eve.shape()[1] {
        return Err(GraphError::Dimension(format!(
            "augmentation rows {:?} / {:?} for {} LU and {} Eve nodes",
            aug_lu.shape(),
            aug_eve.shape(),
            b * k,
            b * m
        )));
    }
    let (h_eff, f_eff) = ch.effective_csi(phi)?;
    let x_lu = flatten_rows(&h_eff, b * k, n, scaling.lu_direct)?;
    let x_eve = flatten_rows(&f_eff, b * m, n, scaling.eve_direct)?;
    let graph = HeteroGraph {
        batch: b,
        node_sets: vec![
            NodeSet {
                name: "bs_ris_lu",
                per_sample: k,
                features: x_lu,
            },
            NodeSet {
                name: "bs_ris_eve",
                per_sample: m,
                features: x_eve,
            },
        ],
        edge_sets: vec![
            EdgeSet {
                name: "lu_lu",
                a: LU,
                b: LU,
                pairs: complete_pairs(b, k, k, true),
                features: None,
                directed: false,
            },
            EdgeSet {
                name: "lu_eve",
                a: LU,
                b: EVE,
                pairs: complete_pairs(b, k, m, false),
                features: None,
                directed: false,
            },
            EdgeSet {
                name: "eve_eve",
                a: EVE,
                b: EVE,
                pairs: complete_pairs(b, m, m, true),
                features: None,
                directed: false,
            },
        ],
    };
    graph.validate()?;
    Ok(Stage2Graph {
        graph,
        h_eff,
        f_eff,
        aug_lu: aug_lu.clone(),
        aug_eve: aug_eve.clone(),
        n_t: n,
        k,
        m,
    })
}

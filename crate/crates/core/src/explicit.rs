//! Relation-updated GCN over one-hop typed edges.
//!
//! Relation embeddings are linear combinations of a small set of shared basis
//! vectors. A node's update sums, over its incoming `(neighbor, relation)`
//! pairs, the relation-specific projection of the circular correlation of
//! the neighbor's state with the relation's embedding; the sum is divided by
//! the node's total in-degree, a self term is added, and `tanh` is applied.
//! Relation embeddings are carried through a linear map at every layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hin::Hin;
use crate::tensor::{xavier, DenseMatrix, ParamId, ParamStore, SparseMatrix, Tape, Var};

/// Basis vectors (`B × d₀`) and per-relation mixing weights (`R × B`).
#[derive(Clone, Debug, PartialEq)]
pub struct RelationBasis {
    pub bases: ParamId,
    pub coefficients: ParamId,
    pub relations: usize,
    pub basis_count: usize,
    pub dim: usize,
}

impl RelationBasis {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        relations: usize,
        basis_count: usize,
        dim: usize,
    ) -> Result<Self> {
        if basis_count == 0 || relations == 0 {
            return Err(Error::Config("relation basis needs B >= 1 and at least one relation".into()));
        }
        let bases = store.add("er.basis", xavier(rng, basis_count, dim));
        let coefficients = store.add("er.coefficients", xavier(rng, relations, basis_count));
        Ok(Self {
            bases,
            coefficients,
            relations,
            basis_count,
            dim,
        })
    }

    /// Scalars spent on relation embeddings: `B·d₀ + R·B`.
    pub fn parameter_count(&self) -> usize {
        self.basis_count * self.dim + self.relations * self.basis_count
    }

    /// `z_r = Σ_b α_br · c_b` as a `1 × d₀` row.
    pub fn relation_embed<'a>(&self, tape: &mut Tape<'a>, store: &ParamStore, r: usize) -> Result<Var> {
        if r >= self.relations {
            return Err(Error::Usage(format!(
                "relation {r} out of range ({} relations)",
                self.relations
            )));
        }
        let coeffs = tape.param(store, self.coefficients);
        let row = tape.slice_rows(coeffs, r, 1)?;
        let bases = tape.param(store, self.bases);
        tape.matmul(row, bases)
    }

    /// All relation embeddings as an `R × d₀` matrix.
    pub fn embed_all<'a>(&self, tape: &mut Tape<'a>, store: &ParamStore) -> Result<Var> {
        let coeffs = tape.param(store, self.coefficients);
        let bases = tape.param(store, self.bases);
        tape.matmul(coeffs, bases)
    }
}

/// Entity–relation composition: circular correlation of `x` with `z`.
pub fn compose<'a>(tape: &mut Tape<'a>, x: Var, z: Var) -> Result<Var> {
    tape.circ_corr(x, z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitLayer {
    /// One `d_in × d_out` projection per relation.
    pub relation_weights: Vec<ParamId>,
    pub self_weight: ParamId,
    /// Absent on the last layer, whose relation output is never consumed.
    pub relation_transform: Option<ParamId>,
    pub bias: ParamId,
    pub dim_in: usize,
    pub dim_out: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitParams {
    pub layers: Vec<ExplicitLayer>,
}

impl ExplicitParams {
    /// `L` layers: `d₀ → d₁`, then `d₁ → d₁`.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        relations: usize,
        dim_in: usize,
        dim_out: usize,
        layers: usize,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("explicit module needs at least one layer".into()));
        }
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let d_in = if l == 0 { dim_in } else { dim_out };
            let relation_weights = (0..relations)
                .map(|r| store.add(format!("er.l{l}.w_r{r}"), xavier(rng, d_in, dim_out)))
                .collect();
            out.push(ExplicitLayer {
                relation_weights,
                self_weight: store.add(format!("er.l{l}.w_self"), xavier(rng, d_in, dim_out)),
                relation_transform: (l + 1 < layers)
                    .then(|| store.add(format!("er.l{l}.w_rel"), xavier(rng, d_in, dim_out))),
                bias: store.add(format!("er.l{l}.bias"), DenseMatrix::zeros(1, dim_out)),
                dim_in: d_in,
                dim_out,
            });
        }
        Ok(Self { layers: out })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| {
            l.relation_weights
                .iter()
                .copied()
                .chain([l.self_weight, l.bias])
                .chain(l.relation_transform)
        })
    }
}

/// Message-passing relations with each row scaled by the node's total
/// in-degree across all relations.
#[derive(Clone, Debug)]
pub struct ExplicitGraph {
    pub relations: Vec<SparseMatrix>,
}

impl ExplicitGraph {
    pub fn new(hin: &Hin) -> Result<Self> {
        Self::from_relations(hin.relations())
    }

    pub fn from_relations(relations: &[SparseMatrix]) -> Result<Self> {
        let n = relations.first().map_or(0, SparseMatrix::rows);
        let mut degree = vec![0.0; n];
        for a in relations {
            for (d, s) in degree.iter_mut().zip(a.row_sums()) {
                *d += s;
            }
        }
        let inv: Vec<f64> = degree
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 })
            .collect();
        Ok(Self {
            relations: relations
                .iter()
                .map(|a| a.scale_rows(&inv))
                .collect::<Result<_>>()?,
        })
    }
}

/// One layer: returns the updated node states and relation embeddings.
pub fn explicit_layer<'a>(
    tape: &mut Tape<'a>,
    store: &ParamStore,
    graph: &'a ExplicitGraph,
    nodes: Var,
    relations: Var,
    layer: &ExplicitLayer,
) -> Result<(Var, Var)> {
    let (n, d_in) = tape.shape(nodes);
    let (r_count, d_rel) = tape.shape(relations);
    if d_in != layer.dim_in || d_rel != layer.dim_in {
        return Err(Error::shape(format!(
            "layer expects width {}, got nodes {d_in} and relations {d_rel}",
            layer.dim_in
        )));
    }
    if r_count != graph.relations.len() || r_count != layer.relation_weights.len() {
        return Err(Error::shape(format!(
            "{r_count} relation embeddings for {} relations",
            graph.relations.len()
        )));
    }
    if graph.relations.first().is_some_and(|a| a.rows() != n) {
        return Err(Error::shape("node count differs from graph size"));
    }
    let w_self = tape.param(store, layer.self_weight);
    let mut total = tape.matmul(nodes, w_self)?;
    for (r, a) in graph.relations.iter().enumerate() {
        if a.nnz() == 0 {
            continue;
        }
        let z = tape.slice_rows(relations, r, 1)?;
        let circ = tape.circulant(z)?;
        let gathered = tape.spmm(a, nodes)?;
        let composed = tape.matmul(gathered, circ)?;
        let w = tape.param(store, layer.relation_weights[r]);
        let msg = tape.matmul(composed, w)?;
        total = tape.add(total, msg)?;
    }
    let bias = tape.param(store, layer.bias);
    let pre = tape.add(total, bias)?;
    let out = tape.tanh(pre);
    let next_relations = match layer.relation_transform {
        Some(id) => {
            let w_rel = tape.param(store, id);
            tape.matmul(relations, w_rel)?
        }
        None => relations,
    };
    Ok((out, next_relations))
}

/// Stacks every layer, starting from the node features and the basis
/// relation embeddings.
pub fn explicit_forward<'a>(
    tape: &mut Tape<'a>,
    store: &ParamStore,
    graph: &'a ExplicitGraph,
    features: Var,
    basis: &RelationBasis,
    params: &ExplicitParams,
) -> Result<Var> {
    let mut relations = basis.embed_all(tape, store)?;
    let mut nodes = features;
    for layer in &params.layers {
        (nodes, relations) = explicit_layer(tape, store, graph, nodes, relations, layer)?;
    }
    Ok(nodes)
}

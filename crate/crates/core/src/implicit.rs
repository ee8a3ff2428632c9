//! Multi-hop relations from soft-selected adjacency products.
//!
//! Each stack level mixes the adjacency collection with a softmax over
//! learned logits. Levels are chained by matrix product with row
//! normalization after every product, giving a soft meta-path graph per
//! channel. Node states are then propagated over each channel's graph (plus
//! self-loops) and the channels are merged by a learned projection.
//!
//! Training never materializes the chained product: it is applied to dense
//! blocks right to left, carrying one extra column per level that tracks the
//! row sums needed for normalization.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hin::{degree_normalize, Hin};
use crate::tensor::{softmax, xavier, DenseMatrix, ParamId, ParamStore, SparseMatrix, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitParams {
    /// `selection[t][c]` holds the `1 × |𝔸|` logits of level `t`, channel `c`.
    pub selection: Vec<Vec<ParamId>>,
    /// GNN weights, shared across channels.
    pub layers: Vec<ParamId>,
    /// Channel merge `(C·d) × d` and its bias.
    pub aggregate: ParamId,
    pub aggregate_bias: ParamId,
    pub relations: usize,
}

impl ImplicitParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        relations: usize,
        hops: usize,
        channels: usize,
        dim_in: usize,
        dim_out: usize,
        layers: usize,
    ) -> Result<Self> {
        if hops == 0 || channels == 0 || layers == 0 || relations == 0 {
            return Err(Error::Config(
                "implicit module needs hops, channels, layers and relations >= 1".into(),
            ));
        }
        let selection = (0..hops)
            .map(|t| {
                (0..channels)
                    .map(|c| {
                        let logits = DenseMatrix::from_fn(1, relations, |_, _| rng.random_range(-0.1..0.1));
                        store.add(format!("ir.select.t{t}.c{c}"), logits)
                    })
                    .collect()
            })
            .collect();
        let layers = (0..layers)
            .map(|l| {
                let d_in = if l == 0 { dim_in } else { dim_out };
                store.add(format!("ir.l{l}.w"), xavier(rng, d_in, dim_out))
            })
            .collect();
        Ok(Self {
            selection,
            layers,
            aggregate: store.add("ir.aggregate", xavier(rng, channels * dim_out, dim_out)),
            aggregate_bias: store.add("ir.aggregate_bias", DenseMatrix::zeros(1, dim_out)),
            relations,
        })
    }

    pub fn hops(&self) -> usize {
        self.selection.len()
    }

    pub fn channels(&self) -> usize {
        self.selection[0].len()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.selection
            .iter()
            .flatten()
            .copied()
            .chain(self.layers.iter().copied())
            .chain([self.aggregate, self.aggregate_bias])
    }

    /// Softmax selection weights of one level and channel.
    pub fn selection_weights(&self, store: &ParamStore, level: usize, channel: usize) -> Result<Vec<f64>> {
        softmax(store.get(self.selection[level][channel]).values())
    }

    /// Materialized `A^(T-1)` of one channel.
    pub fn stack(&self, store: &ParamStore, adjacency: &[SparseMatrix], channel: usize) -> Result<SparseMatrix> {
        if channel >= self.channels() {
            return Err(Error::Usage(format!("channel {channel} of {}", self.channels())));
        }
        let logits: Vec<Vec<f64>> = (0..self.hops())
            .map(|t| store.get(self.selection[t][channel]).values().to_vec())
            .collect();
        stack_hops(adjacency, &logits)
    }
}

/// `Σ_i softmax(logits)_i · A_i`.
pub fn soft_select(adjacency: &[SparseMatrix], logits: &[f64]) -> Result<SparseMatrix> {
    if logits.len() != adjacency.len() {
        return Err(Error::shape(format!(
            "{} logits for {} adjacency matrices",
            logits.len(),
            adjacency.len()
        )));
    }
    let alpha = softmax(logits)?;
    let mats: Vec<&SparseMatrix> = adjacency.iter().collect();
    SparseMatrix::linear_combination(&mats, &alpha)
}

/// Chains one soft selection per level: `A⁽⁰⁾ = F₀`, then
/// `A⁽ᵗ⁾ = rownorm(A⁽ᵗ⁻¹⁾ · F_t)`.
pub fn stack_hops(adjacency: &[SparseMatrix], level_logits: &[Vec<f64>]) -> Result<SparseMatrix> {
    let (first, rest) = level_logits
        .split_first()
        .ok_or_else(|| Error::Usage("at least one stack level is required".into()))?;
    let mut acc = soft_select(adjacency, first)?;
    for logits in rest {
        let f = soft_select(adjacency, logits)?;
        acc = degree_normalize(&acc.matmul(&f)?)?;
    }
    Ok(acc)
}

/// Adjacency collection plus the per-matrix row sums, kept alive for a tape.
#[derive(Clone, Debug)]
pub struct ImplicitGraph {
    pub adjacency: Vec<SparseMatrix>,
    row_sums: DenseMatrix,
}

impl ImplicitGraph {
    pub fn new(hin: &Hin) -> Self {
        Self::from_adjacency(hin.adjacency().to_vec())
    }

    pub fn from_adjacency(adjacency: Vec<SparseMatrix>) -> Self {
        let n = adjacency.first().map_or(0, SparseMatrix::rows);
        let mut row_sums = DenseMatrix::zeros(n, adjacency.len());
        for (i, a) in adjacency.iter().enumerate() {
            for (r, s) in a.row_sums().into_iter().enumerate() {
                row_sums.set(r, i, s);
            }
        }
        Self { adjacency, row_sums }
    }

    pub fn nodes(&self) -> usize {
        self.row_sums.rows()
    }
}

/// Softmaxed selection weights of every level for one channel.
fn channel_weights<'a>(
    tape: &mut Tape<'a>,
    store: &ParamStore,
    params: &ImplicitParams,
    channel: usize,
) -> Vec<Var> {
    (0..params.hops())
        .map(|t| {
            let logits = tape.param(store, params.selection[t][channel]);
            tape.softmax_rows(logits)
        })
        .collect()
}

/// `A⁽ˡᵉᵛᵉˡ⁾ · x` without forming the product.
fn apply_stack<'a>(
    tape: &mut Tape<'a>,
    graph: &'a ImplicitGraph,
    weights: &[Var],
    level: usize,
    x: Var,
) -> Result<Var> {
    let fx = tape.spmm_mix(&graph.adjacency, weights[level], x)?;
    if level == 0 {
        return Ok(fx);
    }
    // F_t·1 = Σ_i α_i rowsum(A_i)
    let sums = tape.constant(graph.row_sums.clone());
    let w = tape.transpose(weights[level]);
    let ones = tape.matmul(sums, w)?;
    let cols = tape.shape(fx).1;
    let joint = tape.concat_cols(fx, ones)?;
    let out = apply_stack(tape, graph, weights, level - 1, joint)?;
    let y = tape.slice_cols(out, 0, cols)?;
    let r = tape.slice_cols(out, cols, 1)?;
    tape.div_rows_safe(y, r)
}

/// One propagation step over a channel graph with self-loops:
/// `tanh(D̂⁻¹ (A + I) h W)` where `D̂ = rowsum(A) + 1`.
fn channel_layer<'a>(
    tape: &mut Tape<'a>,
    graph: &'a ImplicitGraph,
    weights: &[Var],
    h: Var,
    w: Var,
) -> Result<Var> {
    let hw = tape.matmul(h, w)?;
    let (n, cols) = tape.shape(hw);
    let ones = tape.constant(DenseMatrix::filled(n, 1, 1.0));
    let joint = tape.concat_cols(hw, ones)?;
    let top = weights.len() - 1;
    let out = apply_stack(tape, graph, weights, top, joint)?;
    let joint_self = tape.add(out, joint)?;
    let num = tape.slice_cols(joint_self, 0, cols)?;
    let den = tape.slice_cols(joint_self, cols, 1)?;
    let pre = tape.div_rows_safe(num, den)?;
    Ok(tape.tanh(pre))
}

/// Node states from every channel, merged to `|V| × d`.
pub fn multichannel_forward<'a>(
    tape: &mut Tape<'a>,
    store: &ParamStore,
    graph: &'a ImplicitGraph,
    features: Var,
    params: &ImplicitParams,
) -> Result<Var> {
    if params.relations != graph.adjacency.len() {
        return Err(Error::shape(format!(
            "parameters built for {} relations, graph has {}",
            params.relations,
            graph.adjacency.len()
        )));
    }
    let mut merged: Option<Var> = None;
    for c in 0..params.channels() {
        let weights = channel_weights(tape, store, params, c);
        let mut h = features;
        for &wl in &params.layers {
            let w = tape.param(store, wl);
            h = channel_layer(tape, graph, &weights, h, w)?;
        }
        merged = Some(match merged {
            None => h,
            Some(m) => tape.concat_cols(m, h)?,
        });
    }
    let merged = merged.expect("at least one channel");
    let agg = tape.param(store, params.aggregate);
    let lin = tape.matmul(merged, agg)?;
    let bias = tape.param(store, params.aggregate_bias);
    let pre = tape.add(lin, bias)?;
    Ok(tape.tanh(pre))
}

/// A soft meta-path: one relation index per stack level.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaPath {
    pub relations: Vec<usize>,
    pub weight: f64,
}

/// Highest-weight relation sequences per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaPathReport {
    pub channels: Vec<Vec<MetaPath>>,
}

impl MetaPathReport {
    /// Tab-separated `channel rank weight type_1 … type_T`, one row per path.
    pub fn to_text(&self, names: &[String]) -> String {
        let mut s = String::from("# channel\trank\tweight\tpath\n");
        for (c, paths) in self.channels.iter().enumerate() {
            for (rank, p) in paths.iter().enumerate() {
                write!(s, "{c}\t{}\t{:.12e}", rank + 1, p.weight).expect("string write");
                for &r in &p.relations {
                    let name = names.get(r).map_or("?", String::as_str);
                    write!(s, "\t{name}").expect("string write");
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Ranks relation sequences by the product of per-level selection weights
/// and keeps the `top_k` best per channel; equal weights are ordered
/// lexicographically by sequence.
pub fn explain_metapaths(store: &ParamStore, params: &ImplicitParams, top_k: usize) -> Result<MetaPathReport> {
    if top_k == 0 {
        return Err(Error::Usage("top_k must be at least 1".into()));
    }
    let mut channels = Vec::with_capacity(params.channels());
    for c in 0..params.channels() {
        let mut beam = vec![MetaPath {
            relations: Vec::new(),
            weight: 1.0,
        }];
        for t in 0..params.hops() {
            let alpha = params.selection_weights(store, t, c)?;
            let mut next = Vec::with_capacity(beam.len() * alpha.len());
            for p in &beam {
                for (i, &a) in alpha.iter().enumerate() {
                    let mut relations = p.relations.clone();
                    relations.push(i);
                    next.push(MetaPath {
                        relations,
                        weight: p.weight * a,
                    });
                }
            }
            next.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.relations.cmp(&b.relations)));
            // keep near-ties at the cut so rounding cannot evict a prefix of
            // a final winner
            if next.len() > top_k {
                let cut = next[top_k - 1].weight * (1.0 - 1e-9);
                let keep = next.iter().take_while(|p| p.weight >= cut).count().max(top_k);
                next.truncate(keep);
            }
            beam = next;
        }
        beam.truncate(top_k);
        channels.push(beam);
    }
    Ok(MetaPathReport { channels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};
    use crate::tensor::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_adjacency(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<SparseMatrix> {
        let mut mats: Vec<SparseMatrix> = (0..m)
            .map(|_| {
                let mut t = Vec::new();
                for r in 0..n {
                    for c in 0..n {
                        if rng.random::<f64>() < 0.25 {
                            t.push((r, c, 1.0));
                        }
                    }
                }
                SparseMatrix::from_triplets(n, n, t).unwrap()
            })
            .collect();
        mats.push(SparseMatrix::identity(n));
        mats
    }

    /// Chain product on plain nested vectors.
    fn dense_chain(adj: &[SparseMatrix], logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = adj[0].rows();
        let select = |l: &[f64]| {
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut out = vec![vec![0.0; n]; n];
            for (a, w) in adj.iter().zip(&e) {
                let d = a.to_dense();
                for r in 0..n {
                    for c in 0..n {
                        out[r][c] += w / z * d.get(r, c);
                    }
                }
            }
            out
        };
        let mut acc = select(&logits[0]);
        for l in &logits[1..] {
            let f = select(l);
            let mut prod = vec![vec![0.0; n]; n];
            for r in 0..n {
                for k in 0..n {
                    for c in 0..n {
                        prod[r][c] += acc[r][k] * f[k][c];
                    }
                }
            }
            for row in &mut prod {
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    row.iter_mut().for_each(|v| *v /= s);
                }
            }
            acc = prod;
        }
        acc
    }

    #[test]
    fn stack_matches_dense_chain() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(4..=20);
            let adj = random_adjacency(&mut rng, n, 4);
            for hops in 1..=3 {
                let logits: Vec<Vec<f64>> = (0..hops)
                    .map(|_| (0..adj.len()).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .collect();
                let got = stack_hops(&adj, &logits).unwrap().to_dense();
                let want = dense_chain(&adj, &logits);
                for r in 0..n {
                    for c in 0..n {
                        assert!((got.get(r, c) - want[r][c]).abs() <= 1e-10, "seed {seed} hops {hops}");
                    }
                    if hops > 1 {
                        let s: f64 = got.row(r).iter().sum();
                        assert!((0.0..=1.0 + 1e-12).contains(&s));
                    }
                }
            }
        }
    }

    #[test]
    fn soft_select_cases() {
        let a = SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0)]).unwrap();
        let b = SparseMatrix::from_triplets(2, 2, vec![(1, 0, 1.0), (0, 1, 1.0)]).unwrap();
        let mean = soft_select(&[a.clone(), b.clone()], &[0.3, 0.3]).unwrap();
        assert_eq!(mean.get(0, 1), 1.0);
        assert_eq!(mean.get(1, 0), 0.5);
        let same = soft_select(&[a.clone(), a.clone()], &[4.0, -3.0]).unwrap();
        assert!(same.to_dense().max_abs_diff(&a.to_dense()) < 1e-15);
        assert!(soft_select(&[a], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn soft_select_is_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let adj = random_adjacency(&mut rng, 6, 3);
        let logits: Vec<f64> = (0..adj.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let out = soft_select(&adj, &logits).unwrap().to_dense();
        let dense: Vec<DenseMatrix> = adj.iter().map(SparseMatrix::to_dense).collect();
        for r in 0..6 {
            for c in 0..6 {
                let vals: Vec<f64> = dense.iter().map(|d| d.get(r, c)).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(out.get(r, c) >= lo - 1e-15 && out.get(r, c) <= hi + 1e-15);
            }
        }
    }

    fn setup(seed: u64, n: usize, hops: usize, channels: usize, d: usize) -> (ImplicitGraph, ParamStore, ImplicitParams, DenseMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = ImplicitGraph::from_adjacency(random_adjacency(&mut rng, n, 3));
        let mut store = ParamStore::new();
        let mut init = rng::stream(seed, Stream::Init);
        let params = ImplicitParams::init(&mut store, &mut init, 4, hops, channels, d, d, 2).unwrap();
        // spread the logits so levels differ noticeably
        for id in params.selection.iter().flatten() {
            let m = DenseMatrix::from_fn(1, 4, |_, _| rng.random_range(-1.5..1.5));
            *store.get_mut(*id) = m;
        }
        let x = DenseMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        (graph, store, params, x)
    }

    #[test]
    fn operator_matches_materialized_stack() {
        let (graph, store, params, x) = setup(4, 9, 3, 1, 3);
        let mut tape = Tape::new();
        let weights = channel_weights(&mut tape, &store, &params, 0);
        let xv = tape.constant(x.clone());
        let got = apply_stack(&mut tape, &graph, &weights, 2, xv).unwrap();
        let a = params.stack(&store, &graph.adjacency, 0).unwrap();
        let want = a.matmul_dense(&x).unwrap();
        assert!(tape.value(got).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn forward_shape_and_gradients() {
        for (seed, channels) in [(0u64, 1usize), (1, 2), (2, 3)] {
            let (graph, store, params, x) = setup(seed, 7, 3, channels, 3);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = multichannel_forward(&mut tape, &store, &graph, xv, &params).unwrap();
            assert_eq!(tape.shape(out), (7, 3));
            drop(tape);
            let report = check_gradients(&store, &[], 1e-5, |tape, s| {
                let xv = tape.constant(x.clone());
                let out = multichannel_forward(tape, s, &graph, xv, &params)?;
                Ok(tape.sum_squares(out))
            })
            .unwrap();
            assert!(report.max_rel_error() <= 1e-4, "{:?}", report.worst());
        }
    }

    #[test]
    fn channel_permutation_invariance() {
        let (graph, store, params, x) = setup(6, 8, 2, 2, 3);
        let forward = |s: &ParamStore| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = multichannel_forward(&mut tape, s, &graph, xv, &params).unwrap();
            tape.value(out).clone()
        };
        let base = forward(&store);
        let mut swapped = store.clone();
        for level in &params.selection {
            let (a, b) = (store.get(level[0]).clone(), store.get(level[1]).clone());
            *swapped.get_mut(level[0]) = b;
            *swapped.get_mut(level[1]) = a;
        }
        let agg = store.get(params.aggregate);
        let d = agg.cols();
        let mut rows: Vec<usize> = (d..2 * d).collect();
        rows.extend(0..d);
        *swapped.get_mut(params.aggregate) = agg.select_rows(&rows);
        assert!(forward(&swapped).max_abs_diff(&base) <= 1e-10);
    }

    #[test]
    fn explain_recovers_dominant_path() {
        let mut store = ParamStore::new();
        let mut rng = rng::stream(0, Stream::Init);
        let params = ImplicitParams::init(&mut store, &mut rng, 5, 3, 1, 2, 2, 1).unwrap();
        let argmax = [3usize, 0, 4];
        for (t, &k) in argmax.iter().enumerate() {
            let logits = DenseMatrix::from_fn(1, 5, |_, i| if i == k { 12.0 } else { 0.0 });
            *store.get_mut(params.selection[t][0]) = logits;
        }
        let report = explain_metapaths(&store, &params, 4).unwrap();
        let top = &report.channels[0][0];
        assert_eq!(top.relations, argmax);
        assert!(top.weight >= 0.9);
        assert!(report.channels[0].iter().all(|p| p.relations.len() == 3));
    }

    #[test]
    fn explain_uniform_ties_are_lexicographic() {
        let mut store = ParamStore::new();
        let mut rng = rng::stream(0, Stream::Init);
        let params = ImplicitParams::init(&mut store, &mut rng, 3, 2, 2, 2, 2, 1).unwrap();
        for id in params.selection.iter().flatten() {
            *store.get_mut(*id) = DenseMatrix::zeros(1, 3);
        }
        let report = explain_metapaths(&store, &params, 9).unwrap();
        for paths in &report.channels {
            let seqs: Vec<Vec<usize>> = paths.iter().map(|p| p.relations.clone()).collect();
            let mut sorted = seqs.clone();
            sorted.sort();
            assert_eq!(seqs, sorted);
            assert_eq!(seqs[0], vec![0, 0]);
            assert!(paths.iter().all(|p| (p.weight - 1.0 / 9.0).abs() < 1e-15));
            let total: f64 = paths.iter().map(|p| p.weight).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
        assert!(matches!(explain_metapaths(&store, &params, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn report_text_rows() {
        let mut store = ParamStore::new();
        let mut rng = rng::stream(2, Stream::Init);
        let params = ImplicitParams::init(&mut store, &mut rng, 3, 2, 2, 2, 2, 1).unwrap();
        let report = explain_metapaths(&store, &params, 4).unwrap();
        let names: Vec<String> = ["a", "b", "self"].iter().map(|s| s.to_string()).collect();
        let text = report.to_text(&names);
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 2 * 4);
        for r in rows {
            let f: Vec<&str> = r.split('\t').collect();
            assert_eq!(f.len(), 3 + 2);
            assert!(f[3..].iter().all(|n| names.iter().any(|m| m == n)));
        }
    }
}

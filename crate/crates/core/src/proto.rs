//! Prototype-based contrastive enhancement.
//!
//! Embeddings of one node type are clustered into prototypes. Each target
//! node is joined to every prototype in a small complete graph, a one-layer
//! attention network reads out the target's updated embedding, and an
//! InfoNCE objective pulls a node's original representation towards its
//! same-view enhanced one and away from the other view's.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{xavier, DenseMatrix, ParamId, ParamStore, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Cluster centers with the assignment that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: DenseMatrix,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
}

const MAX_ITERATIONS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center per point (lowest index on ties) and the total squared
/// distance.
fn assign(points: &DenseMatrix, centers: &DenseMatrix) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let assignment = (0..points.rows())
        .map(|i| {
            let p = points.row(i);
            let (best, d) = (0..centers.rows())
                .map(|k| (k, sq_dist(p, centers.row(k))))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            inertia += d;
            best
        })
        .collect();
    (assignment, inertia)
}

/// Lloyd's k-means from a farthest-point initialization.
///
/// The first center is a seeded random point; each further center is the
/// point farthest from those chosen so far. Iteration stops when the
/// assignment repeats or after 100 rounds. A cluster left empty is moved to
/// the point currently farthest from its own center.
pub fn kmeans_prototypes(points: &DenseMatrix, n: usize, seed: u64) -> Result<PrototypeSet> {
    let count = points.rows();
    if n == 0 || count < n {
        return Err(Error::Usage(format!(
            "cannot form {n} prototypes from {count} points"
        )));
    }
    let d = points.cols();
    let mut rng = rng::stream(seed, Stream::Clustering);
    let mut chosen = vec![rng.random_range(0..count)];
    let mut nearest: Vec<f64> = (0..count)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < n {
        let far = (0..count)
            .filter(|i| !chosen.contains(i))
            .fold(None::<(usize, f64)>, |acc, i| match acc {
                Some((_, best)) if nearest[i] <= best => acc,
                _ => Some((i, nearest[i])),
            })
            .map(|(i, _)| i)
            .expect("count >= n leaves an unchosen point");
        chosen.push(far);
        for (i, slot) in nearest.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(points.row(i), points.row(far)));
        }
    }
    let mut centers = points.select_rows(&chosen);
    let mut history = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    for _ in 0..MAX_ITERATIONS {
        let (assignment, inertia) = assign(points, &centers);
        history.push(inertia);
        if previous.as_ref() == Some(&assignment) {
            break;
        }
        // means are accumulated as offsets from each cluster's first member,
        // which keeps identical points exact
        let mut anchor = vec![usize::MAX; n];
        let mut sums = DenseMatrix::zeros(n, d);
        let mut sizes = vec![0usize; n];
        for (i, &k) in assignment.iter().enumerate() {
            if sizes[k] == 0 {
                anchor[k] = i;
            }
            sizes[k] += 1;
            let base = points.row(anchor[k]);
            for ((s, v), b) in sums.row_mut(k).iter_mut().zip(points.row(i)).zip(base) {
                *s += v - b;
            }
        }
        for k in 0..n {
            if sizes[k] > 0 {
                let size = sizes[k] as f64;
                let base = points.row(anchor[k]);
                for ((c, s), b) in centers.row_mut(k).iter_mut().zip(sums.row(k)).zip(base) {
                    *c = b + s / size;
                }
            }
        }
        // empty clusters take the worst-served point
        for k in 0..n {
            if sizes[k] == 0 {
                let worst = (0..count)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), centers.row(assignment[a]));
                        let db = sq_dist(points.row(b), centers.row(assignment[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("nonempty");
                let p = points.row(worst).to_vec();
                centers.row_mut(k).copy_from_slice(&p);
            }
        }
        previous = Some(assignment);
    }
    let (assignment, inertia) = assign(points, &centers);
    Ok(PrototypeSet {
        prototypes: centers,
        assignment,
        inertia,
        history,
    })
}

/// A target embedding fully connected to `n` prototypes; row 0 is the target.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypicalGraph {
    pub features: DenseMatrix,
    pub adjacency: DenseMatrix,
}

impl PrototypicalGraph {
    pub fn node_count(&self) -> usize {
        self.features.rows()
    }

    pub fn edge_count(&self) -> usize {
        let n = self.node_count();
        n * (n - 1) / 2
    }
}

pub fn build_prototypical_graph(target: &[f64], protos: &PrototypeSet) -> Result<PrototypicalGraph> {
    let p = &protos.prototypes;
    if target.len() != p.cols() {
        return Err(Error::shape(format!(
            "target width {} against prototypes of width {}",
            target.len(),
            p.cols()
        )));
    }
    let n = p.rows() + 1;
    let mut features = DenseMatrix::zeros(n, p.cols());
    features.row_mut(0).copy_from_slice(target);
    for k in 0..p.rows() {
        features.row_mut(k + 1).copy_from_slice(p.row(k));
    }
    let adjacency = DenseMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });
    Ok(PrototypicalGraph { features, adjacency })
}

/// Single-head attention layer: projection `d × d` and attention vector `2d × 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatParams {
    pub weight: ParamId,
    pub attention: ParamId,
    pub dim: usize,
}

impl GatParams {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, dim: usize) -> Self {
        Self {
            weight: store.add(format!("{prefix}.w"), xavier(rng, dim, dim)),
            attention: store.add(format!("{prefix}.a"), xavier(rng, 2 * dim, 1)),
            dim,
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.attention]
    }
}

/// Attention layer over an arbitrary masked graph; returns every node's
/// output and the attention matrix.
pub fn gat_layer<'a>(
    tape: &mut Tape<'a>,
    store: &ParamStore,
    features: Var,
    adjacency: &DenseMatrix,
    params: &GatParams,
) -> Result<(Var, Var)> {
    let w = tape.param(store, params.weight);
    let wh = tape.matmul(features, w)?;
    let a = tape.param(store, params.attention);
    let a_src = tape.slice_rows(a, 0, params.dim)?;
    let a_dst = tape.slice_rows(a, params.dim, params.dim)?;
    let s_src = tape.matmul(wh, a_src)?;
    let s_dst = tape.matmul(wh, a_dst)?;
    let s_dst_t = tape.transpose(s_dst);
    let logits = tape.add(s_src, s_dst_t)?;
    let logits = tape.leaky_relu(logits, LEAKY_SLOPE);
    let attn = tape.softmax_rows_masked(logits, adjacency.clone())?;
    let out = tape.matmul(attn, wh)?;
    Ok((out, attn))
}

/// The target's updated embedding (row 0 of the layer output).
pub fn gat_encode<'a>(
    tape: &mut Tape<'a>,
    store: &ParamStore,
    graph: &PrototypicalGraph,
    params: &GatParams,
) -> Result<Var> {
    let x = tape.constant(graph.features.clone());
    let (out, _) = gat_layer(tape, store, x, &graph.adjacency, params)?;
    tape.slice_rows(out, 0, 1)
}

/// Row-wise [`gat_encode`] for a batch of targets sharing one prototype
/// set. Prototypes enter as constants, so no gradient reaches them.
/// Returns the encodings (`B × d`) and the attention over prototypes (`B × n`).
pub fn gat_encode_batch<'a>(
    tape: &mut Tape<'a>,
    store: &ParamStore,
    targets: Var,
    prototypes: &DenseMatrix,
    params: &GatParams,
) -> Result<(Var, Var)> {
    let w = tape.param(store, params.weight);
    let wh = tape.matmul(targets, w)?;
    let c = tape.constant(prototypes.clone());
    let wc = tape.matmul(c, w)?;
    let a = tape.param(store, params.attention);
    let a_src = tape.slice_rows(a, 0, params.dim)?;
    let a_dst = tape.slice_rows(a, params.dim, params.dim)?;
    let s_src = tape.matmul(wh, a_src)?;
    let s_dst = tape.matmul(wc, a_dst)?;
    let s_dst_t = tape.transpose(s_dst);
    let logits = tape.add(s_src, s_dst_t)?;
    let logits = tape.leaky_relu(logits, LEAKY_SLOPE);
    let attn = tape.softmax_rows(logits);
    Ok((tape.matmul(attn, wc)?, attn))
}

/// Contrastive weights and clustering settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClConfig {
    pub tau: f64,
    pub alpha_user: f64,
    pub alpha_concept: f64,
    pub prototypes_user: usize,
    pub prototypes_concept: usize,
    /// Split anchors into chunks of this size, each with its own in-chunk
    /// negatives. `None` uses the whole batch.
    pub sub_batch: Option<usize>,
}

impl Default for ClConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            alpha_user: 0.5,
            alpha_concept: 0.5,
            prototypes_user: 10,
            prototypes_concept: 10,
            sub_batch: None,
        }
    }
}

impl ClConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.alpha_user < 0.0 || self.alpha_concept < 0.0 {
            return Err(Error::Config("contrastive weights must be nonnegative".into()));
        }
        if self.prototypes_user == 0 || self.prototypes_concept == 0 {
            return Err(Error::Config("prototype counts must be at least 1".into()));
        }
        if self.sub_batch == Some(0) || self.sub_batch == Some(1) {
            return Err(Error::Config("contrastive sub-batch must be at least 2".into()));
        }
        Ok(())
    }
}

/// Per-anchor InfoNCE terms as a `B × 1` column:
/// `log Σ_j exp(cos(h_i, neg_j)/τ) − cos(h_i, pos_i)/τ`.
/// The positive pair is not part of the denominator.
pub fn infonce_per_anchor<'a>(
    tape: &mut Tape<'a>,
    anchor: Var,
    positive: Var,
    negative: Var,
    tau: f64,
) -> Result<Var> {
    let (b, d) = tape.shape(anchor);
    if tape.shape(positive) != (b, d) || tape.shape(negative) != (b, d) {
        return Err(Error::shape(format!(
            "anchor {:?}, positive {:?}, negative {:?}",
            (b, d),
            tape.shape(positive),
            tape.shape(negative)
        )));
    }
    if b < 2 {
        return Err(Error::shape("contrastive batch needs at least 2 rows"));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let na = tape.normalize_rows(anchor)?;
    let np = tape.normalize_rows(positive)?;
    let nn = tape.normalize_rows(negative)?;
    let pp = tape.mul(na, np)?;
    let pos = tape.row_sums(pp);
    let pos = tape.scale(pos, 1.0 / tau);
    let sims = tape.matmul_bt(na, nn)?;
    let sims = tape.scale(sims, 1.0 / tau);
    let lse = tape.logsumexp_rows(sims);
    tape.sub(lse, pos)
}

/// Sum of the per-anchor InfoNCE terms.
pub fn infonce_pair_loss<'a>(
    tape: &mut Tape<'a>,
    anchor: Var,
    positive: Var,
    negative: Var,
    tau: f64,
) -> Result<Var> {
    let per = infonce_per_anchor(tape, anchor, positive, negative, tau)?;
    Ok(tape.sum(per))
}

/// `α_u·L_u + α_k·L_k`.
pub fn combined_cl_loss<'a>(tape: &mut Tape<'a>, user: Var, concept: Var, cfg: &ClConfig) -> Result<Var> {
    let u = tape.scale(user, cfg.alpha_user);
    let k = tape.scale(concept, cfg.alpha_concept);
    tape.add(u, k)
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use super::schema::Schema;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{DenseMatrix, SparseMatrix};

/// Edge of one declared type, by per-type local ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub timestamp: Option<i64>,
}

/// Typed graph plus its adjacency collection.
///
/// Nodes are indexed globally in type blocks, in schema order. The adjacency
/// collection holds, for each declared edge type, the forward matrix
/// (`A[dst, src] = 1`, a message from `src` to `dst`), then every inverse
/// (the transpose), then the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Hin {
    schema: Schema,
    counts: Vec<usize>,
    offsets: Vec<usize>,
    edges: Vec<Vec<Edge>>,
    adjacency: Vec<SparseMatrix>,
    relation_names: Vec<String>,
}

/// Loader bookkeeping.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub duplicate_edges: usize,
    pub edges: usize,
}

impl Hin {
    /// Builds from per-type edge lists. Counts come from the schema when
    /// declared, otherwise from the largest id seen.
    pub fn new(schema: Schema, edges: Vec<Vec<Edge>>) -> Result<Self> {
        Self::with_counts(schema, edges, None)
    }

    pub fn with_counts(
        schema: Schema,
        mut edges: Vec<Vec<Edge>>,
        counts: Option<Vec<usize>>,
    ) -> Result<Self> {
        if edges.len() != schema.edge_types.len() {
            return Err(Error::shape(format!(
                "{} edge lists for {} edge types",
                edges.len(),
                schema.edge_types.len()
            )));
        }
        let mut counts = counts.unwrap_or_else(|| {
            schema
                .node_types
                .iter()
                .map(|n| n.count.unwrap_or(0))
                .collect()
        });
        for (t, list) in edges.iter().enumerate() {
            let et = &schema.edge_types[t];
            for e in list {
                for (ty, id) in [(et.src, e.src), (et.dst, e.dst)] {
                    match schema.node_types[ty].count {
                        Some(c) if id >= c => {
                            return Err(Error::Domain(format!(
                                "{} id {id} outside declared count {c}",
                                schema.node_types[ty].name
                            )))
                        }
                        _ => counts[ty] = counts[ty].max(id + 1),
                    }
                }
            }
        }
        for list in &mut edges {
            list.sort();
            list.dedup_by(|a, b| (a.src, a.dst) == (b.src, b.dst));
        }
        let mut offsets = Vec::with_capacity(counts.len());
        let mut total = 0;
        for &c in &counts {
            offsets.push(total);
            total += c;
        }
        let mut forward = Vec::with_capacity(edges.len());
        let mut names = Vec::with_capacity(2 * edges.len() + 1);
        for (t, list) in edges.iter().enumerate() {
            let et = &schema.edge_types[t];
            let entries = list
                .iter()
                .map(|e| (offsets[et.dst] + e.dst, offsets[et.src] + e.src, 1.0))
                .collect();
            forward.push(SparseMatrix::from_triplets(total, total, entries)?);
            names.push(et.name.clone());
        }
        let mut adjacency = forward.clone();
        for (m, et) in forward.iter().zip(&schema.edge_types) {
            adjacency.push(m.transpose());
            names.push(format!("{}_inv", et.name));
        }
        adjacency.push(SparseMatrix::identity(total));
        names.push("self".into());
        Ok(Self {
            schema,
            counts,
            offsets,
            edges,
            adjacency,
            relation_names: names,
        })
    }

    /// Parses an edge file against `schema`. Duplicate edges collapse to one
    /// (the first timestamp wins) and are counted in the report.
    pub fn parse(schema: Schema, edge_text: &str) -> Result<(Self, LoadReport)> {
        let mut edges: Vec<Vec<Edge>> = vec![Vec::new(); schema.edge_types.len()];
        let mut seen: Vec<BTreeMap<(usize, usize), ()>> =
            vec![BTreeMap::new(); schema.edge_types.len()];
        let mut report = LoadReport::default();
        for (i, raw) in edge_text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Schema { line: line_no, msg };
            let f: Vec<&str> = line.split('\t').map(str::trim).collect();
            if f.len() != 3 && f.len() != 4 {
                return Err(err(format!(
                    "expected `edge_type<TAB>src<TAB>dst[<TAB>timestamp]`, got `{line}`"
                )));
            }
            let t = schema
                .edge_index(f[0])
                .ok_or_else(|| err(format!("unknown edge type `{}`", f[0])))?;
            let id = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| err(format!("bad node id `{s}`")))
            };
            let (src, dst) = (id(f[1])?, id(f[2])?);
            let et = &schema.edge_types[t];
            for (ty, v) in [(et.src, src), (et.dst, dst)] {
                if let Some(c) = schema.node_types[ty].count {
                    if v >= c {
                        return Err(err(format!(
                            "{} id {v} outside declared count {c}",
                            schema.node_types[ty].name
                        )));
                    }
                }
            }
            let timestamp = match f.get(3) {
                Some(s) if !s.is_empty() => Some(
                    s.parse::<i64>()
                        .map_err(|_| err(format!("bad timestamp `{s}`")))?,
                ),
                _ => None,
            };
            if seen[t].insert((src, dst), ()).is_some() {
                report.duplicate_edges += 1;
                continue;
            }
            edges[t].push(Edge {
                src,
                dst,
                timestamp,
            });
            report.edges += 1;
        }
        Ok((Self::new(schema, edges)?, report))
    }

    /// Canonical edge-file text: declared type order, then (src, dst).
    pub fn edges_to_text(&self) -> String {
        let mut s = String::new();
        for (t, list) in self.edges.iter().enumerate() {
            let name = &self.schema.edge_types[t].name;
            for e in list {
                match e.timestamp {
                    Some(ts) => writeln!(s, "{name}\t{}\t{}\t{ts}", e.src, e.dst),
                    None => writeln!(s, "{name}\t{}\t{}", e.src, e.dst),
                }
                .expect("string write");
            }
        }
        s
    }

    /// Schema text with the realized node counts filled in.
    pub fn schema_to_text(&self) -> String {
        let mut schema = self.schema.clone();
        for (n, &c) in schema.node_types.iter_mut().zip(&self.counts) {
            n.count = Some(c);
        }
        schema.to_text()
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn node_count(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn count(&self, node_type: usize) -> usize {
        self.counts[node_type]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn offset(&self, node_type: usize) -> usize {
        self.offsets[node_type]
    }

    pub fn global(&self, node_type: usize, local: usize) -> usize {
        self.offsets[node_type] + local
    }

    /// Global index range of one node type.
    pub fn block(&self, node_type: usize) -> std::ops::Range<usize> {
        self.offsets[node_type]..self.offsets[node_type] + self.counts[node_type]
    }

    /// Type of a global node index.
    pub fn type_of(&self, global: usize) -> usize {
        self.offsets
            .iter()
            .rposition(|&o| o <= global && global < self.node_count())
            .expect("global index in range")
    }

    pub fn edges(&self, edge_type: usize) -> &[Edge] {
        &self.edges[edge_type]
    }

    /// The full adjacency collection: forward, inverse, identity.
    pub fn adjacency(&self) -> &[SparseMatrix] {
        &self.adjacency
    }

    /// Relations that carry messages between distinct nodes (everything but
    /// the trailing identity).
    pub fn relations(&self) -> &[SparseMatrix] {
        &self.adjacency[..self.adjacency.len() - 1]
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    /// The same graph with one edge type's edges replaced.
    pub fn with_edges(&self, edge_type: usize, edges: Vec<Edge>) -> Result<Self> {
        let mut all = self.edges.clone();
        all[edge_type] = edges;
        Self::with_counts(self.schema.clone(), all, Some(self.counts.clone()))
    }

    /// A stable description of node types, counts and relations; two graphs
    /// a model can be moved between share it.
    pub fn shape_signature(&self) -> String {
        let mut s = String::new();
        for (n, c) in self.schema.node_types.iter().zip(&self.counts) {
            let _ = write!(s, "{}={};", n.name, c);
        }
        let _ = write!(s, "relations={}", self.relation_names.join(","));
        s
    }
}

/// Loads schema and edges from disk, plus initial features: from the feature
/// file when given, otherwise seeded uniform in `[-scale, scale]`.
pub fn load_hin(
    edge_path: &Path,
    schema_path: &Path,
    feature_path: Option<&Path>,
    dim: usize,
    scale: f64,
    seed: u64,
) -> Result<(Hin, DenseMatrix, LoadReport)> {
    let schema_text =
        std::fs::read_to_string(schema_path).map_err(|e| Error::io(schema_path, e))?;
    let schema = Schema::parse(&schema_text)?;
    let edge_text = std::fs::read_to_string(edge_path).map_err(|e| Error::io(edge_path, e))?;
    let (hin, report) = Hin::parse(schema, &edge_text)?;
    let mut features = random_features(hin.node_count(), dim, scale, seed);
    if let Some(path) = feature_path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        apply_feature_file(&hin, &mut features, &text)?;
    }
    Ok((hin, features, report))
}

pub fn random_features(nodes: usize, dim: usize, scale: f64, seed: u64) -> DenseMatrix {
    let mut rng = rng::stream(seed, Stream::Features);
    DenseMatrix::from_fn(nodes, dim, |_, _| rng.random_range(-scale..=scale))
}

/// Overwrites rows named in a `node_type<TAB>node_id<TAB>v1 … vd` file.
pub fn apply_feature_file(hin: &Hin, features: &mut DenseMatrix, text: &str) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Schema { line: line_no, msg };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != features.cols() + 2 {
            return Err(err(format!(
                "expected {} feature values, found {}",
                features.cols(),
                f.len().saturating_sub(2)
            )));
        }
        let ty = hin
            .schema()
            .node_index(f[0])
            .ok_or_else(|| err(format!("unknown node type `{}`", f[0])))?;
        let id: usize = f[1]
            .parse()
            .map_err(|_| err(format!("bad node id `{}`", f[1])))?;
        if id >= hin.count(ty) {
            return Err(err(format!("{} id {id} out of range", f[0])));
        }
        let row = features.row_mut(hin.global(ty, id));
        for (slot, s) in row.iter_mut().zip(&f[2..]) {
            *slot = s
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad feature value `{s}`")))?;
        }
    }
    Ok(())
}

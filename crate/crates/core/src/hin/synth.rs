use std::path::Path;

use rand::Rng;

use super::graph::{Edge, Hin};
use super::schema::Schema;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const SCHEMA_FILE: &str = "schema.txt";
pub const EDGE_FILE: &str = "edges.tsv";

/// Planted-group dataset parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub groups: usize,
    pub users_per_group: usize,
    pub concepts_per_group: usize,
    pub courses: usize,
    pub videos: usize,
    pub teachers: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            groups: 5,
            users_per_group: 40,
            concepts_per_group: 20,
            courses: 10,
            videos: 20,
            teachers: 5,
            p_in: 0.3,
            p_out: 0.01,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("groups", self.groups),
            ("users_per_group", self.users_per_group),
            ("concepts_per_group", self.concepts_per_group),
            ("courses", self.courses),
            ("videos", self.videos),
            ("teachers", self.teachers),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, c)| *c == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_in) || !prob(self.p_out) || self.p_in <= self.p_out {
            return Err(Error::Config(format!(
                "need 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            )));
        }
        Ok(())
    }

    pub fn users(&self) -> usize {
        self.groups * self.users_per_group
    }

    pub fn concepts(&self) -> usize {
        self.groups * self.concepts_per_group
    }

    pub fn user_group(&self, user: usize) -> usize {
        user / self.users_per_group
    }

    pub fn concept_group(&self, concept: usize) -> usize {
        concept / self.concepts_per_group
    }
}

/// Builds the planted-group graph in memory.
///
/// Users and concepts are split into contiguous groups; courses, videos and
/// teachers are assigned to groups round-robin. Clicks occur with `p_in`
/// inside a group and `p_out` across; the other relations are wired mostly
/// within groups so that multi-hop paths through courses and videos carry
/// the same structure.
pub fn synth_graph(cfg: &SynthConfig) -> Result<Hin> {
    cfg.validate()?;
    let g = cfg.groups;
    let mut rng = rng::stream(cfg.seed, Stream::Synth);
    let mut schema = Schema::mooc();
    let counts = [cfg.users(), cfg.concepts(), cfg.courses, cfg.videos, cfg.teachers];
    for (n, c) in schema.node_types.iter_mut().zip(counts) {
        n.count = Some(c);
    }
    let course_group = |c: usize| c % g;
    let video_group = |v: usize| v % g;
    let teacher_group = |t: usize| t % g;
    let base_ts: i64 = 1_514_764_800;
    let span: i64 = 540 * 86_400;

    let mut click = Vec::new();
    for u in 0..cfg.users() {
        for k in 0..cfg.concepts() {
            let p = if cfg.user_group(u) == cfg.concept_group(k) {
                cfg.p_in
            } else {
                cfg.p_out
            };
            if rng.random::<f64>() < p {
                let timestamp = Some(base_ts + rng.random_range(0..span));
                click.push(Edge { src: u, dst: k, timestamp });
            }
        }
    }
    let mut bernoulli = |n_src: usize,
                         n_dst: usize,
                         src_group: &dyn Fn(usize) -> usize,
                         dst_group: &dyn Fn(usize) -> usize,
                         p_same: f64,
                         p_cross: f64| {
        let mut out = Vec::new();
        for s in 0..n_src {
            for d in 0..n_dst {
                let p = if src_group(s) == dst_group(d) { p_same } else { p_cross };
                if rng.random::<f64>() < p {
                    out.push(Edge { src: s, dst: d, timestamp: None });
                }
            }
        }
        out
    };
    let user_group = |u: usize| cfg.user_group(u);
    let concept_group = |k: usize| cfg.concept_group(k);
    let watch = bernoulli(cfg.users(), cfg.videos, &user_group, &video_group, 0.3, 0.01);
    let learn = bernoulli(cfg.users(), cfg.courses, &user_group, &course_group, 0.5, 0.02);
    let video_has = bernoulli(cfg.videos, cfg.concepts(), &video_group, &concept_group, 0.3, 0.0);
    let course_has = bernoulli(cfg.courses, cfg.concepts(), &course_group, &concept_group, 0.5, 0.0);

    // every video sits in one course, every course has one teacher; both
    // prefer a partner from the same group when the group has one
    let mut pick = |n: usize, group_of: &dyn Fn(usize) -> usize, want: usize| {
        let same: Vec<usize> = (0..n).filter(|&i| group_of(i) == want).collect();
        if same.is_empty() {
            rng.random_range(0..n)
        } else {
            same[rng.random_range(0..same.len())]
        }
    };
    let course_video: Vec<Edge> = (0..cfg.videos)
        .map(|v| Edge {
            src: pick(cfg.courses, &course_group, video_group(v)),
            dst: v,
            timestamp: None,
        })
        .collect();
    let taught_by: Vec<Edge> = (0..cfg.courses)
        .map(|c| Edge {
            src: c,
            dst: pick(cfg.teachers, &teacher_group, course_group(c)),
            timestamp: None,
        })
        .collect();

    Hin::new(
        schema,
        vec![click, watch, learn, video_has, course_has, course_video, taught_by],
    )
}

/// Writes `schema.txt` and `edges.tsv` into an existing directory.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Hin> {
    if !out_dir.is_dir() {
        return Err(Error::io(
            out_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let hin = synth_graph(cfg)?;
    let schema_path = out_dir.join(SCHEMA_FILE);
    std::fs::write(&schema_path, hin.schema_to_text()).map_err(|e| Error::io(&schema_path, e))?;
    let edge_path = out_dir.join(EDGE_FILE);
    std::fs::write(&edge_path, hin.edges_to_text()).map_err(|e| Error::io(&edge_path, e))?;
    Ok(hin)
}

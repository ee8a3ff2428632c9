//! End-to-end runs: split, features, training, evaluation, ablations.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::{graph_digest, Checkpoint};
use crate::config::{RunConfig, ABLATIONS};
use crate::error::{Error, Result};
use crate::eval::{evaluate_with, RankingReport};
use crate::hin::{
    apply_feature_file, load_hin, random_features, split_interactions, Hin, InteractionSplit, LoadReport, EDGE_FILE,
    SCHEMA_FILE,
};
use crate::model::{GraphInputs, Model, PrototypeBank};
use crate::tensor::DenseMatrix;
use crate::train::{train, TrainOutcome};

/// Initial node features: seeded uniform, with rows from a feature file
/// overriding when one is given.
pub fn initial_features(hin: &Hin, cfg: &RunConfig, feature_text: Option<&str>) -> Result<DenseMatrix> {
    let mut f = random_features(hin.node_count(), cfg.dim_input, cfg.feature_scale, cfg.seed);
    if let Some(text) = feature_text {
        apply_feature_file(hin, &mut f, text)?;
    }
    Ok(f)
}

/// Reads `schema.txt` and `edges.tsv` from `dir`.
pub fn load_graph(dir: &Path) -> Result<(Hin, LoadReport)> {
    let schema_path = dir.join(SCHEMA_FILE);
    let text = std::fs::read_to_string(&schema_path).map_err(|e| Error::io(&schema_path, e))?;
    let schema = crate::hin::Schema::parse(&text)?;
    let edge_path = dir.join(EDGE_FILE);
    let text = std::fs::read_to_string(&edge_path).map_err(|e| Error::io(&edge_path, e))?;
    Hin::parse(schema, &text)
}

/// Reads `schema.txt` and `edges.tsv` from `dir`, with features from the
/// configured feature file or seeded noise.
pub fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<(Hin, DenseMatrix, LoadReport)> {
    load_hin(
        &dir.join(EDGE_FILE),
        &dir.join(SCHEMA_FILE),
        cfg.features.as_deref(),
        cfg.dim_input,
        cfg.feature_scale,
        cfg.seed,
    )
}

/// The split and the training-only graph inputs for a run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: InteractionSplit,
    pub inputs: GraphInputs,
}

pub fn interaction_type(hin: &Hin, cfg: &RunConfig) -> Result<usize> {
    hin.schema()
        .edge_index(&cfg.interaction)
        .ok_or_else(|| Error::Config(format!("interaction edge type `{}` is not in the schema", cfg.interaction)))
}

pub fn prepare(hin: &Hin, features: DenseMatrix, cfg: &RunConfig) -> Result<Prepared> {
    let et = interaction_type(hin, cfg)?;
    let split = split_interactions(hin, et, cfg.split, cfg.seed)?;
    let graph = split.training_graph(hin)?;
    let inputs = GraphInputs::new(&graph, features, split.user_type, split.item_type)?;
    Ok(Prepared { split, inputs })
}

/// Ranks the split's test cases with a trained model.
pub fn evaluate_model(model: &Model, bank: &PrototypeBank, prepared: &Prepared) -> Result<RankingReport> {
    let scores = model.score_matrix(&prepared.inputs, bank)?;
    let cfg = &model.config;
    evaluate_with(
        &prepared.split,
        cfg.eval_negatives,
        &cfg.ks,
        cfg.seed,
        &cfg.digest(),
        |u, items| Ok(items.iter().map(|&i| scores.get(u, i)).collect()),
    )
}

/// `n` highest-scoring items the user has not trained on, ties by id.
pub fn recommend(scores: &DenseMatrix, split: &InteractionSplit, user: usize, n: usize) -> Result<Vec<(usize, f64)>> {
    if user >= split.n_users {
        return Err(Error::Usage(format!("user {user} out of range (0..{})", split.n_users)));
    }
    let seen = split.train_positives(user);
    let mut list: Vec<(usize, f64)> = (0..split.n_items)
        .filter(|i| !seen.contains(i))
        .map(|i| (i, scores.get(user, i)))
        .collect();
    list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    list.truncate(n);
    Ok(list)
}

pub struct TrainedRun {
    pub model: Model,
    pub outcome: TrainOutcome,
    pub prepared: Prepared,
}

impl TrainedRun {
    pub fn checkpoint(&self, hin: &Hin) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            prototypes: self.outcome.prototypes.clone(),
            features: self.prepared.inputs.features.clone(),
            graph_digest: graph_digest(hin),
            relation_names: hin.relation_names().to_vec(),
        }
    }

    pub fn evaluate(&self) -> Result<RankingReport> {
        evaluate_model(&self.model, &self.outcome.prototypes, &self.prepared)
    }
}

pub fn train_run(hin: &Hin, features: DenseMatrix, cfg: &RunConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    let prepared = prepare(hin, features, cfg)?;
    let mut model = Model::new(cfg, prepared.inputs.implicit.adjacency.len())?;
    let outcome = train(&mut model, &prepared.inputs, &prepared.split)?;
    Ok(TrainedRun {
        model,
        outcome,
        prepared,
    })
}

/// Rebuilds the split and graph inputs a checkpoint was trained on.
pub fn restore(ckpt: &Checkpoint, hin: &Hin) -> Result<Prepared> {
    ckpt.check_graph(hin)?;
    prepare(hin, ckpt.features.clone(), &ckpt.model.config)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    /// One report per seed, in seed order.
    pub reports: Vec<RankingReport>,
}

impl AblationRow {
    pub fn mean(&self, f: impl Fn(&RankingReport) -> f64) -> f64 {
        self.reports.iter().map(f).sum::<f64>() / self.reports.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Tab-separated table of seed-averaged metrics, one row per variant.
    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let mut s = format!("# kcrec-ablation v1 seeds={}\nvariant", seeds.join(","));
        for k in &self.ks {
            let _ = write!(s, "\tHR@{k}");
        }
        for k in &self.ks {
            let _ = write!(s, "\tNDCG@{k}");
        }
        s.push_str("\tMRR\n");
        for row in &self.rows {
            s.push_str(&row.variant);
            for &k in &self.ks {
                let _ = write!(s, "\t{:.6}", row.mean(|r| r.hr(k)));
            }
            for &k in &self.ks {
                let _ = write!(s, "\t{:.6}", row.mean(|r| r.ndcg(k)));
            }
            let _ = writeln!(s, "\t{:.6}", row.mean(RankingReport::mrr));
        }
        s
    }
}

/// Trains and evaluates `variants` (all six when empty) under each seed.
pub fn ablation_suite(
    hin: &Hin,
    feature_text: Option<&str>,
    base: &RunConfig,
    seeds: &[u64],
    variants: &[&str],
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one seed".into()));
    }
    let names: Vec<&str> = if variants.is_empty() { ABLATIONS.to_vec() } else { variants.to_vec() };
    let mut rows = Vec::with_capacity(names.len());
    for name in names {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.apply_ablation(name)?;
            let features = initial_features(hin, &cfg, feature_text)?;
            reports.push(train_run(hin, features, &cfg)?.evaluate()?);
        }
        rows.push(AblationRow {
            variant: RunConfig::canonical_ablation(name)?.to_string(),
            reports,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        ks: base.ks.clone(),
        rows,
    })
}

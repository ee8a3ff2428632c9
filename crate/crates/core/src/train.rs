//! Pairwise ranking training with the contrastive side objective.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::score_rows;
use crate::hin::InteractionSplit;
use crate::model::{GraphInputs, Model, PrototypeBank};
use crate::rng::{self, Stream};
use crate::tensor::{AdamState, Tape, Var};

/// Relative loss improvement below which an epoch counts as a plateau.
pub const PLATEAU_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub positive: usize,
    pub negative: usize,
}

/// One epoch's worth of training triples.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochTriples {
    pub triples: Vec<Triple>,
    /// Users skipped because they interacted with every item.
    pub excluded_users: Vec<usize>,
}

/// Every train positive once, shuffled, each with a uniform negative drawn
/// from the items the user never touched (train or test).
pub fn sample_triples(split: &InteractionSplit, seed: u64, epoch: u64) -> EpochTriples {
    let mut order: Vec<(usize, usize)> = split.train.iter().map(|i| (i.user, i.item)).collect();
    order.shuffle(&mut rng::derived(seed, Stream::Sampling, &[epoch]));
    let mut neg_rng = rng::derived(seed, Stream::Negatives, &[epoch]);
    let mut excluded_users = Vec::new();
    let mut triples = Vec::with_capacity(order.len());
    for (user, positive) in order {
        let seen = split.positives(user);
        if seen.len() >= split.n_items {
            if !excluded_users.contains(&user) {
                excluded_users.push(user);
            }
            continue;
        }
        let negative = loop {
            let k = neg_rng.random_range(0..split.n_items);
            if !seen.contains(&k) {
                break k;
            }
        };
        triples.push(Triple {
            user,
            positive,
            negative,
        });
    }
    excluded_users.sort_unstable();
    EpochTriples {
        triples,
        excluded_users,
    }
}

/// `Σ softplus(ŷ⁻ − ŷ⁺) + λ·reg`; `pos` and `neg` are score columns.
pub fn bpr_loss<'a>(tape: &mut Tape<'a>, pos: Var, neg: Var, reg: Option<Var>, lambda: f64) -> Result<Var> {
    let margin = tape.sub(neg, pos)?;
    let terms = tape.softplus(margin);
    let loss = tape.sum(terms);
    match reg {
        Some(r) if lambda != 0.0 => {
            let r = tape.scale(r, lambda);
            tape.add(loss, r)
        }
        _ => Ok(loss),
    }
}

/// `bpr + β·cl`.
pub fn total_loss<'a>(tape: &mut Tape<'a>, bpr: Var, cl: Option<Var>, beta: f64) -> Result<Var> {
    match cl {
        Some(c) if beta != 0.0 => {
            let c = tape.scale(c, beta);
            tape.add(bpr, c)
        }
        _ => Ok(bpr),
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Mean batch loss per epoch.
    pub trace: Vec<f64>,
    pub stopped_early: bool,
    /// Prototypes clustered from the final parameters.
    pub prototypes: PrototypeBank,
}

impl TrainOutcome {
    /// Two columns, `epoch<TAB>loss`, epochs counted from 1.
    pub fn trace_text(&self) -> String {
        let mut s = String::from("# epoch\tloss\n");
        for (e, l) in self.trace.iter().enumerate() {
            s.push_str(&format!("{}\t{l:?}\n", e + 1));
        }
        s
    }
}

/// Dedups ids, returning the unique list and each input's position in it.
fn compact(ids: impl Iterator<Item = usize>) -> (Vec<usize>, Vec<usize>) {
    let ids: Vec<usize> = ids.collect();
    let mut slot = BTreeMap::new();
    for &i in &ids {
        let next = slot.len();
        slot.entry(i).or_insert(next);
    }
    let mut unique = vec![0; slot.len()];
    for (&id, &s) in &slot {
        unique[s] = id;
    }
    (unique, ids.iter().map(|i| slot[i]).collect())
}

/// Loss of one batch of triples, recorded on `tape`.
pub fn batch_loss<'a>(
    model: &Model,
    tape: &mut Tape<'a>,
    inputs: &'a GraphInputs,
    bank: &PrototypeBank,
    batch: &[Triple],
) -> Result<Var> {
    let cfg = &model.config;
    let (users, user_pos) = compact(batch.iter().map(|t| t.user));
    let (items, item_pos) = compact(batch.iter().flat_map(|t| [t.positive, t.negative]));
    let with_contrast = model.variant().has_contrast() && cfg.beta > 0.0;
    let out = model.forward_batch(tape, inputs, bank, &users, &items, with_contrast)?;
    let u = tape.gather_rows(out.users, &user_pos)?;
    let pos_idx: Vec<usize> = item_pos.iter().step_by(2).copied().collect();
    let neg_idx: Vec<usize> = item_pos.iter().skip(1).step_by(2).copied().collect();
    let kp = tape.gather_rows(out.concepts, &pos_idx)?;
    let kn = tape.gather_rows(out.concepts, &neg_idx)?;
    let sp = score_rows(tape, u, kp)?;
    let sn = score_rows(tape, u, kn)?;
    let reg = if cfg.lambda != 0.0 { Some(model.l2(tape)?) } else { None };
    let bpr = bpr_loss(tape, sp, sn, reg, cfg.lambda)?;
    total_loss(tape, bpr, out.contrast, cfg.beta)
}

/// Runs Adam over shuffled epochs until the epoch budget or a loss plateau
/// of `patience` epochs.
pub fn train(model: &mut Model, inputs: &GraphInputs, split: &InteractionSplit) -> Result<TrainOutcome> {
    let cfg = model.config.clone();
    let mut adam = AdamState::new(&model.store, cfg.lr);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let bank = model.refresh_prototypes(inputs, rng::derive_seed(cfg.seed, &[Stream::Clustering as u64, epoch as u64]))?;
        let sampled = sample_triples(split, cfg.seed, epoch as u64);
        if sampled.triples.is_empty() {
            return Err(Error::Degenerate("no training triples".into()));
        }
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in sampled.triples.chunks(cfg.batch).enumerate() {
            let mut tape = Tape::new();
            let loss = batch_loss(model, &mut tape, inputs, &bank, chunk)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss {value} at epoch {} batch {}; parameter norms: {}",
                    epoch + 1,
                    b + 1,
                    model.norm_snapshot()
                )));
            }
            let grads = tape.backward(loss, &model.store)?;
            let active: Vec<bool> = model.store.ids().map(|id| model.is_active(id)).collect();
            adam.step(&mut model.store, &grads, |id| active[id.0])?;
            total += value;
            batches += 1;
        }
        let mean = total / batches as f64;
        trace.push(mean);
        if !best.is_finite() || mean < best - PLATEAU_TOLERANCE * best.abs() {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let prototypes = model.refresh_prototypes(inputs, final_cluster_seed(cfg.seed))?;
    Ok(TrainOutcome {
        trace,
        stopped_early,
        prototypes,
    })
}

/// Clustering seed for the prototypes stored with a trained model.
pub fn final_cluster_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, &[Stream::Clustering as u64, u64::MAX])
}

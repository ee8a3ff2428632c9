use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::graph::{Edge, Hin};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitPolicy {
    /// Shuffle all interactions; the first `ratio` share trains.
    Ratio(f64),
    /// One random positive per user is held out.
    LeaveOneOut,
    /// Interactions stamped at or after the cutoff are held out.
    Temporal(i64),
}

impl std::str::FromStr for SplitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("split policy `{s}` (expected loo, ratio:<r>, temporal:<t>)"));
        match s.split_once(':') {
            None if s == "loo" || s == "leave-one-out" => Ok(SplitPolicy::LeaveOneOut),
            Some(("ratio", r)) => {
                let r: f64 = r.parse().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&r) {
                    return Err(bad());
                }
                Ok(SplitPolicy::Ratio(r))
            }
            Some(("temporal", t)) => Ok(SplitPolicy::Temporal(t.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for SplitPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitPolicy::Ratio(r) => write!(f, "ratio:{r}"),
            SplitPolicy::LeaveOneOut => write!(f, "loo"),
            SplitPolicy::Temporal(t) => write!(f, "temporal:{t}"),
        }
    }
}

/// One user–item interaction, by local ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: Option<i64>,
}

/// Train/test partition of the interaction edges.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionSplit {
    pub edge_type: usize,
    pub user_type: usize,
    pub item_type: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub train: Vec<Interaction>,
    pub test: Vec<Interaction>,
    /// Users left out of the test side (leave-one-out with < 2 positives).
    pub excluded_users: usize,
    positives: Vec<BTreeSet<usize>>,
    train_positives: Vec<BTreeSet<usize>>,
}

impl InteractionSplit {
    /// All of a user's positives, train and test.
    pub fn positives(&self, user: usize) -> &BTreeSet<usize> {
        &self.positives[user]
    }

    pub fn train_positives(&self, user: usize) -> &BTreeSet<usize> {
        &self.train_positives[user]
    }

    /// Items a user never interacted with: the candidate pool for negatives.
    pub fn negative_pool(&self, user: usize) -> Vec<usize> {
        (0..self.n_items)
            .filter(|i| !self.positives[user].contains(i))
            .collect()
    }

    /// The graph with only training interactions left on the interaction
    /// edge type.
    pub fn training_graph(&self, hin: &Hin) -> Result<Hin> {
        let edges = self
            .train
            .iter()
            .map(|i| Edge {
                src: i.user,
                dst: i.item,
                timestamp: i.timestamp,
            })
            .collect();
        hin.with_edges(self.edge_type, edges)
    }
}

/// Splits the interactions of `edge_type` (which must run user → item).
pub fn split_interactions(
    hin: &Hin,
    edge_type: usize,
    policy: SplitPolicy,
    seed: u64,
) -> Result<InteractionSplit> {
    let et = hin
        .schema()
        .edge_types
        .get(edge_type)
        .ok_or_else(|| Error::Usage(format!("edge type {edge_type} does not exist")))?;
    let (user_type, item_type) = (et.src, et.dst);
    let n_users = hin.count(user_type);
    let n_items = hin.count(item_type);
    let all: Vec<Interaction> = hin
        .edges(edge_type)
        .iter()
        .map(|e| Interaction {
            user: e.src,
            item: e.dst,
            timestamp: e.timestamp,
        })
        .collect();
    let mut rng = rng::stream(seed, Stream::Split);
    let mut excluded_users = 0;
    let (mut train, mut test) = match policy {
        SplitPolicy::Ratio(r) => {
            let mut shuffled = all;
            shuffled.shuffle(&mut rng);
            let n_train = (r * shuffled.len() as f64).round() as usize;
            let test = shuffled.split_off(n_train);
            (shuffled, test)
        }
        SplitPolicy::LeaveOneOut => {
            let mut by_user: Vec<Vec<Interaction>> = vec![Vec::new(); n_users];
            for i in all {
                by_user[i.user].push(i);
            }
            let mut train = Vec::new();
            let mut test = Vec::new();
            for mut list in by_user {
                if list.is_empty() {
                    continue;
                }
                if list.len() < 2 {
                    excluded_users += 1;
                    train.extend(list);
                    continue;
                }
                let k = rng.random_range(0..list.len());
                test.push(list.swap_remove(k));
                train.extend(list);
            }
            (train, test)
        }
        SplitPolicy::Temporal(cutoff) => {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for i in all {
                match i.timestamp {
                    Some(ts) if ts >= cutoff => test.push(i),
                    Some(_) => train.push(i),
                    None => {
                        return Err(Error::Config(format!(
                            "temporal split needs timestamps; interaction ({}, {}) has none",
                            i.user, i.item
                        )))
                    }
                }
            }
            (train, test)
        }
    };
    train.sort();
    test.sort();
    let mut positives = vec![BTreeSet::new(); n_users];
    let mut train_positives = vec![BTreeSet::new(); n_users];
    for i in &train {
        positives[i.user].insert(i.item);
        train_positives[i.user].insert(i.item);
    }
    for i in &test {
        positives[i.user].insert(i.item);
    }
    Ok(InteractionSplit {
        edge_type,
        user_type,
        item_type,
        n_users,
        n_items,
        train,
        test,
        excluded_users,
        positives,
        train_positives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hin::Schema;

    fn graph(n_users: usize, per_user: usize) -> Hin {
        let schema = Schema::parse("node user\nnode concept\nedge click user concept\n").unwrap();
        let mut text = String::new();
        for u in 0..n_users {
            for k in 0..per_user {
                text.push_str(&format!("click\t{u}\t{}\t{}\n", (u + k) % 40, 1000 + u * 10 + k));
            }
        }
        Hin::parse(schema, &text).unwrap().0
    }

    #[test]
    fn ratio_split_sizes() {
        let hin = graph(20, 5);
        let s = split_interactions(&hin, 0, SplitPolicy::Ratio(0.8), 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (80, 20));
        let train: BTreeSet<_> = s.train.iter().map(|i| (i.user, i.item)).collect();
        assert!(s.test.iter().all(|i| !train.contains(&(i.user, i.item))));
    }

    #[test]
    fn leave_one_out_one_per_user() {
        let mut hin = graph(10, 3);
        // user 10 with a single positive is excluded from test
        let mut edges = hin.edges(0).to_vec();
        edges.push(Edge {
            src: 10,
            dst: 0,
            timestamp: Some(1),
        });
        hin = hin.with_edges(0, edges).unwrap();
        let s = split_interactions(&hin, 0, SplitPolicy::LeaveOneOut, 1).unwrap();
        assert_eq!(s.excluded_users, 1);
        let mut per_user = vec![0; s.n_users];
        for i in &s.test {
            per_user[i.user] += 1;
        }
        assert!(per_user[..10].iter().all(|&c| c == 1));
        assert_eq!(per_user[10], 0);
    }

    #[test]
    fn temporal_cutoff() {
        let hin = graph(10, 4);
        let s = split_interactions(&hin, 0, SplitPolicy::Temporal(1052), 0).unwrap();
        assert!(s.test.iter().all(|i| i.timestamp.unwrap() >= 1052));
        assert!(s.train.iter().all(|i| i.timestamp.unwrap() < 1052));
        assert_eq!(s.train.len() + s.test.len(), 40);
    }

    #[test]
    fn negative_pool_excludes_all_positives() {
        let hin = graph(5, 3);
        let s = split_interactions(&hin, 0, SplitPolicy::LeaveOneOut, 0).unwrap();
        for u in 0..5 {
            let pool = s.negative_pool(u);
            assert!(pool.iter().all(|k| !s.positives(u).contains(k)));
            assert_eq!(pool.len(), s.n_items - 3);
        }
    }

    #[test]
    fn training_graph_drops_test_edges() {
        let hin = graph(6, 3);
        let s = split_interactions(&hin, 0, SplitPolicy::LeaveOneOut, 0).unwrap();
        let g = s.training_graph(&hin).unwrap();
        assert_eq!(g.edges(0).len(), s.train.len());
        assert_eq!(g.counts(), hin.counts());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("loo".parse::<SplitPolicy>().unwrap(), SplitPolicy::LeaveOneOut);
        assert_eq!("ratio:0.8".parse::<SplitPolicy>().unwrap(), SplitPolicy::Ratio(0.8));
        assert_eq!("temporal:5".parse::<SplitPolicy>().unwrap(), SplitPolicy::Temporal(5));
        assert!("ratio:2".parse::<SplitPolicy>().is_err());
    }
}

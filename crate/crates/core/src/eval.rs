//! Leave-out ranking evaluation: each held-out positive against sampled
//! negatives, scored by hit ratio, NDCG and reciprocal rank.

use std::fmt::Write as _;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::hin::InteractionSplit;
use crate::rng::{self, Stream};

pub const REPORT_HEADER: &str = "kcrec-ranking-report";
pub const REPORT_VERSION: u32 = 1;
/// Separates evaluation draws from training negatives on the same stream.
const EVAL_KEY: u64 = 0x6576_616c;

pub fn hit_ratio(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn reciprocal_rank(rank: usize) -> f64 {
    1.0 / rank as f64
}

/// 1-based position of `target` when candidates are ordered by descending
/// score, ties going to the smaller id.
pub fn rank_of(target: (usize, f64), others: &[(usize, f64)]) -> usize {
    let (id, s) = target;
    1 + others
        .iter()
        .filter(|&&(o, so)| so > s || (so == s && o < id))
        .count()
}

/// The negatives ranked against one held-out pair: up to `n` items the user
/// never interacted with, drawn without replacement from a stream keyed by
/// the pair alone.
pub fn sample_eval_negatives(split: &InteractionSplit, user: usize, item: usize, n: usize, seed: u64) -> Vec<usize> {
    let pool = split.negative_pool(user);
    let take = n.min(pool.len());
    let mut rng = rng::derived(seed, Stream::Negatives, &[EVAL_KEY, user as u64, item as u64]);
    let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), take).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaseRank {
    pub user: usize,
    pub item: usize,
    pub rank: usize,
    pub candidates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingReport {
    pub seed: u64,
    pub config_digest: String,
    pub negatives: usize,
    pub ks: Vec<usize>,
    pub cases: Vec<CaseRank>,
    /// Test cases whose user has no training interactions.
    pub skipped: usize,
}

impl RankingReport {
    fn mean(&self, f: impl Fn(usize) -> f64) -> f64 {
        if self.cases.is_empty() {
            return 0.0;
        }
        self.cases.iter().map(|c| f(c.rank)).sum::<f64>() / self.cases.len() as f64
    }

    pub fn hr(&self, k: usize) -> f64 {
        self.mean(|r| hit_ratio(r, k))
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.mean(|r| ndcg(r, k))
    }

    pub fn mrr(&self) -> f64 {
        self.mean(reciprocal_rank)
    }

    /// One line: `HR@5=… NDCG@5=… … MRR=…`.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for &k in &self.ks {
            let _ = write!(s, "HR@{k}={:.4} NDCG@{k}={:.4} ", self.hr(k), self.ndcg(k));
        }
        let _ = write!(s, "MRR={:.4} cases={}", self.mrr(), self.cases.len());
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{REPORT_HEADER} v{REPORT_VERSION}\n");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "config_digest = {}", self.config_digest);
        let _ = writeln!(s, "negatives = {}", self.negatives);
        let ks: Vec<String> = self.ks.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(s, "ks = {}", ks.join(","));
        let _ = writeln!(s, "cases = {}", self.cases.len());
        let _ = writeln!(s, "skipped = {}", self.skipped);
        for &k in &self.ks {
            let _ = writeln!(s, "hr@{k} = {:?}", self.hr(k));
        }
        for &k in &self.ks {
            let _ = writeln!(s, "ndcg@{k} = {:?}", self.ndcg(k));
        }
        let _ = writeln!(s, "mrr = {:?}", self.mrr());
        for c in &self.cases {
            let _ = writeln!(s, "case = {} {} {} {}", c.user, c.item, c.rank, c.candidates);
        }
        s
    }

    /// Reads back [`RankingReport::to_text`]; aggregate lines are recomputed
    /// from the cases and checked.
    pub fn parse(text: &str) -> Result<Self> {
        let mut offset = 0;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let expected = format!("{REPORT_HEADER} v{REPORT_VERSION}");
        if header != expected {
            return Err(Error::Format {
                offset: 0,
                msg: format!("expected header `{expected}`, found `{header}`"),
            });
        }
        offset += header.len() + 1;
        let mut report = RankingReport {
            seed: 0,
            config_digest: String::new(),
            negatives: 0,
            ks: Vec::new(),
            cases: Vec::new(),
            skipped: 0,
        };
        let mut aggregates = Vec::new();
        for line in lines {
            let bad = |msg: String| Error::Format { offset, msg };
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad number `{v}` for `{key}`")));
            match key {
                "seed" => report.seed = value.parse().map_err(|_| bad(format!("bad seed `{value}`")))?,
                "config_digest" => report.config_digest = value.to_string(),
                "negatives" => report.negatives = num(value)?,
                "ks" => report.ks = value.split(',').map(num).collect::<Result<_>>()?,
                "skipped" => report.skipped = num(value)?,
                "cases" => {}
                "case" => {
                    let f: Vec<usize> = value.split(' ').map(num).collect::<Result<_>>()?;
                    if f.len() != 4 {
                        return Err(bad(format!("case line needs 4 fields, found {}", f.len())));
                    }
                    report.cases.push(CaseRank {
                        user: f[0],
                        item: f[1],
                        rank: f[2],
                        candidates: f[3],
                    });
                }
                _ => {
                    let v: f64 = value.parse().map_err(|_| bad(format!("bad value `{value}` for `{key}`")))?;
                    aggregates.push((key.to_string(), v, offset));
                }
            }
            offset += line.len() + 1;
        }
        for (key, v, at) in aggregates {
            let want = if key == "mrr" {
                Some(report.mrr())
            } else if let Some(k) = key.strip_prefix("hr@") {
                k.parse().ok().map(|k| report.hr(k))
            } else if let Some(k) = key.strip_prefix("ndcg@") {
                k.parse().ok().map(|k| report.ndcg(k))
            } else {
                None
            };
            match want {
                Some(w) if w == v => {}
                Some(w) => {
                    return Err(Error::Format {
                        offset: at,
                        msg: format!("`{key}` is {v:?} but the cases give {w:?}"),
                    })
                }
                None => {
                    return Err(Error::Format {
                        offset: at,
                        msg: format!("unknown key `{key}`"),
                    })
                }
            }
        }
        Ok(report)
    }
}

/// Ranks every test positive of `split`. `score(user, items)` returns one
/// score per item.
pub fn evaluate_with(
    split: &InteractionSplit,
    negatives: usize,
    ks: &[usize],
    seed: u64,
    config_digest: &str,
    mut score: impl FnMut(usize, &[usize]) -> Result<Vec<f64>>,
) -> Result<RankingReport> {
    if split.test.is_empty() {
        return Err(Error::Degenerate("split has no test cases".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("cutoffs must be a non-empty list of positive integers".into()));
    }
    let mut cases = Vec::with_capacity(split.test.len());
    let mut skipped = 0;
    for case in &split.test {
        if split.train_positives(case.user).is_empty() {
            skipped += 1;
            continue;
        }
        let mut items = vec![case.item];
        items.extend(sample_eval_negatives(split, case.user, case.item, negatives, seed));
        let scores = score(case.user, &items)?;
        if scores.len() != items.len() {
            return Err(Error::shape(format!("{} scores for {} candidates", scores.len(), items.len())));
        }
        let others: Vec<(usize, f64)> = items[1..].iter().copied().zip(scores[1..].iter().copied()).collect();
        cases.push(CaseRank {
            user: case.user,
            item: case.item,
            rank: rank_of((case.item, scores[0]), &others),
            candidates: items.len(),
        });
    }
    Ok(RankingReport {
        seed,
        config_digest: config_digest.to_string(),
        negatives,
        ks: ks.to_vec(),
        cases,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hin::{split_interactions, synth_graph, SplitPolicy, SynthConfig};

    fn split() -> InteractionSplit {
        let hin = synth_graph(&SynthConfig {
            seed: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        split_interactions(&hin, 0, SplitPolicy::LeaveOneOut, 2).unwrap()
    }

    #[test]
    fn rank_ties_go_to_smaller_id() {
        assert_eq!(rank_of((5, 1.0), &[(3, 1.0), (7, 1.0), (9, 0.5)]), 2);
        assert_eq!(rank_of((2, 1.0), &[(3, 1.0), (7, 2.0)]), 2);
        assert_eq!(rank_of((2, 3.0), &[]), 1);
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!((hit_ratio(1, 5), ndcg(1, 5), reciprocal_rank(1)), (1.0, 1.0, 1.0));
        assert_eq!(ndcg(3, 5), 0.5);
        assert_eq!(reciprocal_rank(3), 1.0 / 3.0);
        assert_eq!(hit_ratio(6, 5), 0.0);
    }

    #[test]
    fn negatives_exclude_positives_and_are_stable() {
        let s = split();
        let c = s.test[0];
        let a = sample_eval_negatives(&s, c.user, c.item, 99, 4);
        assert_eq!(a, sample_eval_negatives(&s, c.user, c.item, 99, 4));
        assert_eq!(a.len(), 99.min(s.negative_pool(c.user).len()));
        let mut d = a.clone();
        d.dedup();
        assert_eq!(d.len(), a.len());
        assert!(a.iter().all(|i| !s.positives(c.user).contains(i)));
    }

    #[test]
    fn report_round_trips() {
        let s = split();
        let r = evaluate_with(&s, 99, &[5, 10, 20], 1, "abc", |u, items| {
            Ok(items.iter().map(|&i| ((u * 31 + i * 17) % 23) as f64).collect())
        })
        .unwrap();
        let text = r.to_text();
        assert_eq!(RankingReport::parse(&text).unwrap(), r);
        let tampered = text.replace("mrr = ", "mrr = 9");
        assert!(matches!(RankingReport::parse(&tampered), Err(Error::Format { .. })));
    }
}

//! Leave-one-out ranking metrics.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{SplitDataset, UserSplit};
use crate::{Error, Result};

/// 1 if `target` is among the first `k` items.
pub fn hit_rate(ranked: &[u32], target: u32, k: usize) -> f64 {
    if ranked.iter().take(k).any(|&i| i == target) {
        1.0
    } else {
        0.0
    }
}

/// `1 / log2(rank + 1)` for a 1-based rank within the first `k`, else 0.
pub fn ndcg(ranked: &[u32], target: u32, k: usize) -> f64 {
    match ranked.iter().take(k).position(|&i| i == target) {
        Some(p) => 1.0 / ((p + 2) as f64).log2(),
        None => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub slice: String,
    pub hr: BTreeMap<String, f64>,
    pub ndcg: BTreeMap<String, f64>,
    pub n_users: u64,
}

impl EvalResult {
    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.hr.get(&k.to_string()).copied()
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.get(&k.to_string()).copied()
    }
}

/// Mean metrics over `(ranking, target)` pairs.
pub fn aggregate(slice: &str, rankings: &[(Vec<u32>, u32)], ks: &[usize]) -> Result<EvalResult> {
    if rankings.is_empty() {
        return Err(Error::EmptyDataset(format!("no evaluable users in slice `{slice}`")));
    }
    let n = rankings.len() as f64;
    let mut hr = BTreeMap::new();
    let mut nd = BTreeMap::new();
    for &k in ks {
        let h: f64 = rankings.iter().map(|(r, t)| hit_rate(r, *t, k)).sum();
        let g: f64 = rankings.iter().map(|(r, t)| ndcg(r, *t, k)).sum();
        hr.insert(k.to_string(), h / n);
        nd.insert(k.to_string(), g / n);
    }
    Ok(EvalResult {
        slice: slice.to_string(),
        hr,
        ndcg: nd,
        n_users: rankings.len() as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Target = test item, history = train ++ valid.
    Test,
    /// Target = valid item, history = train.
    Valid,
}

impl EvalMode {
    pub fn target(&self, u: &UserSplit) -> u32 {
        match self {
            EvalMode::Test => u.test,
            EvalMode::Valid => u.valid,
        }
    }

    pub fn history(&self, u: &UserSplit) -> Vec<u32> {
        match self {
            EvalMode::Test => u.test_history(),
            EvalMode::Valid => u.train.clone(),
        }
    }
}

/// Items with at most `threshold` training interactions and the users whose
/// target is one of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColdStartSlice {
    pub threshold: u64,
    pub cold_items: BTreeSet<u32>,
    pub users: Vec<u32>,
}

impl ColdStartSlice {
    pub fn new(split: &SplitDataset, threshold: u64, mode: EvalMode) -> Self {
        let counts = split.train_item_counts();
        let cold_items: BTreeSet<u32> = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c <= threshold)
            .map(|(i, _)| i as u32)
            .collect();
        let users = split
            .users
            .iter()
            .filter(|u| cold_items.contains(&mode.target(u)))
            .map(|u| u.user)
            .collect();
        Self {
            threshold,
            cold_items,
            users,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub all: EvalResult,
    pub cold: Option<EvalResult>,
    /// Users whose ranking came back shorter than `max(Ks)`.
    pub shortfall_users: u64,
}

/// Rank for every user (in split order) with `recommend(history, k)` and
/// score the targets. `cold` restricts a second result to its users.
pub fn evaluate<F>(
    split: &SplitDataset,
    mode: EvalMode,
    ks: &[usize],
    cold: Option<&ColdStartSlice>,
    mut recommend: F,
) -> Result<EvalReport>
where
    F: FnMut(&UserSplit, &[u32], usize) -> Result<(Vec<u32>, bool)>,
{
    let kmax = ks.iter().copied().max().ok_or_else(|| Error::config("no cutoffs K given"))?;
    let mut all = Vec::with_capacity(split.users.len());
    let mut shortfall = 0;
    let cold_users: HashSet<u32> = cold.map(|c| c.users.iter().copied().collect()).unwrap_or_default();
    let mut cold_rankings = Vec::new();
    for u in &split.users {
        let history = mode.history(u);
        let (ranked, short) = recommend(u, &history, kmax)?;
        shortfall += u64::from(short);
        let pair = (ranked, mode.target(u));
        if cold_users.contains(&u.user) {
            cold_rankings.push(pair.clone());
        }
        all.push(pair);
    }
    let all = aggregate("all", &all, ks)?;
    let cold = match cold {
        Some(_) => Some(aggregate("cold", &cold_rankings, ks)?),
        None => None,
    };
    Ok(EvalReport {
        all,
        cold,
        shortfall_users: shortfall,
    })
}

/// Items by descending training count, ties by ascending id.
pub fn popularity_ranking(split: &SplitDataset) -> Vec<u32> {
    let counts = split.train_item_counts();
    let mut items: Vec<u32> = (0..counts.len() as u32).collect();
    items.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    items
}

/// Most popular unseen items.
pub fn popularity_recommend(order: &[u32], history: &[u32], k: usize, exclude_seen: bool) -> (Vec<u32>, bool) {
    let seen: HashSet<u32> = if exclude_seen { history.iter().copied().collect() } else { HashSet::new() };
    let out: Vec<u32> = order.iter().copied().filter(|i| !seen.contains(i)).take(k).collect();
    let short = out.len() < k;
    (out, short)
}

/// Expected HR@K of a uniformly random ranking of `n_items`.
pub fn random_hit_rate(k: usize, n_items: usize) -> f64 {
    if n_items == 0 {
        0.0
    } else {
        (k.min(n_items)) as f64 / n_items as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hit_rate_cases() {
        let ranked: Vec<u32> = (0..20).collect();
        assert_eq!(hit_rate(&ranked, 0, 10), 1.0);
        assert_eq!(hit_rate(&ranked, 10, 10), 0.0);
        assert_eq!(hit_rate(&ranked, 99, 10), 0.0);
    }

    #[test]
    fn ndcg_cases() {
        let ranked: Vec<u32> = (0..20).collect();
        assert_eq!(ndcg(&ranked, 0, 10), 1.0);
        assert_eq!(ndcg(&ranked, 2, 10), 0.5);
        assert_eq!(ndcg(&ranked, 12, 10), 0.0);
    }

    #[test]
    fn perfect_recommender_scores_one() {
        let r = aggregate("all", &[(vec![3, 1], 3), (vec![7], 7)], &[1, 10, 20]).unwrap();
        assert!(r.hr.values().chain(r.ndcg.values()).all(|&v| v == 1.0));
        assert_eq!(r.n_users, 2);
    }

    #[test]
    fn empty_slice_is_an_error() {
        assert!(matches!(aggregate("cold", &[], &[10]), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn json_layout() {
        let r = aggregate("all", &[(vec![1, 2, 3], 3)], &[10, 20]).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["slice"], "all");
        assert_eq!(v["hr"]["10"], 1.0);
        assert_eq!(v["ndcg"]["20"], 0.5);
        assert_eq!(v["n_users"], 1);
    }

    proptest! {
        #[test]
        fn ndcg_never_exceeds_hit_rate(perm in Just((0u32..30).collect::<Vec<_>>()).prop_shuffle(), target in 0u32..35, k in 1usize..31) {
            prop_assert!(ndcg(&perm, target, k) <= hit_rate(&perm, target, k));
            prop_assert!(ndcg(&perm, target, k) >= 0.0);
        }

        #[test]
        fn permuting_below_k_changes_nothing(perm in Just((0u32..30).collect::<Vec<_>>()).prop_shuffle(), target in 0u32..30, k in 1usize..29, seed in 0u64..100) {
            use rand::seq::SliceRandom;
            let mut other = perm.clone();
            let mut rng = crate::optim::rng_from_seed(seed);
            other[k..].shuffle(&mut rng);
            prop_assert_eq!(hit_rate(&perm, target, k), hit_rate(&other, target, k));
            prop_assert_eq!(ndcg(&perm, target, k), ndcg(&other, target, k));
        }
    }
}

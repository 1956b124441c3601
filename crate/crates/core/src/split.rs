//! Membership splits: the target's training set, the held-out pool, the
//! evaluation challenge sets and the shadow-model manifests.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed;

/// Training ids of one shadow model and the ids known to be excluded from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowSplit {
    pub in_ids: Vec<String>,
    pub out_ids: Vec<String>,
}

impl ShadowSplit {
    pub fn contains(&self, id: &str) -> bool {
        self.in_ids.binary_search_by(|p| p.as_str().cmp(id)).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub n_shadow: usize,
    pub seed: u64,
}

/// Role assignment of every example id.
///
/// `eval_members ⊆ train_members`, `eval_nonmembers ⊆ nonmember_pool`, and
/// `shadow_filler = nonmember_pool \ eval_nonmembers`. Shadow models train on a
/// Bernoulli(1/2) draw over the evaluation pool plus filler; they never see
/// target members outside the evaluation pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipSplit {
    pub train_members: Vec<String>,
    pub nonmember_pool: Vec<String>,
    pub eval_members: Vec<String>,
    pub eval_nonmembers: Vec<String>,
    pub shadow_filler: Vec<String>,
    pub shadow_splits: Vec<ShadowSplit>,
}

fn sorted(mut v: Vec<String>) -> Vec<String> {
    v.sort();
    v
}

/// Draw a membership split from `dataset`.
pub fn make_membership_splits(dataset: &Dataset, cfg: &SplitConfig) -> Result<MembershipSplit> {
    let n = dataset.len();
    if cfg.n_train == 0 || n < 2 * cfg.n_train {
        return Err(Error::InsufficientData(format!(
            "{n} examples cannot hold {} members and as many disjoint nonmembers",
            cfg.n_train
        )));
    }
    if cfg.n_eval > cfg.n_train {
        return Err(Error::InsufficientData(format!(
            "n_eval {} exceeds n_train {}",
            cfg.n_eval, cfg.n_train
        )));
    }
    let mut ids: Vec<String> = dataset.examples.iter().map(|e| e.id.clone()).collect();
    ids.sort();
    let mut rng = seed::rng(cfg.seed, "split", 0);
    ids.shuffle(&mut rng);
    let (train, pool) = ids.split_at(cfg.n_train);
    let eval_members = sorted(train[..cfg.n_eval].to_vec());
    let eval_nonmembers = sorted(pool[..cfg.n_eval].to_vec());
    let filler = pool[cfg.n_eval..].to_vec();

    let mut eval_pool: Vec<String> = eval_members.iter().chain(&eval_nonmembers).cloned().collect();
    eval_pool.sort();
    let shadow_splits = (0..cfg.n_shadow)
        .map(|s| {
            let mut r = seed::rng(cfg.seed, "shadow-split", s as u64);
            let mut in_ids = Vec::new();
            let mut out_ids = Vec::new();
            for id in &eval_pool {
                if r.gen_bool(0.5) {
                    in_ids.push(id.clone());
                } else {
                    out_ids.push(id.clone());
                }
            }
            let want = cfg.n_train.saturating_sub(in_ids.len()).min(filler.len());
            let mut f = filler.clone();
            f.shuffle(&mut r);
            in_ids.extend_from_slice(&f[..want]);
            out_ids.extend_from_slice(&f[want..]);
            ShadowSplit { in_ids: sorted(in_ids), out_ids: sorted(out_ids) }
        })
        .collect();

    let split = MembershipSplit {
        train_members: sorted(train.to_vec()),
        nonmember_pool: sorted(pool.to_vec()),
        eval_members,
        eval_nonmembers,
        shadow_filler: sorted(filler),
        shadow_splits,
    };
    split.validate()?;
    Ok(split)
}

impl MembershipSplit {
    /// Check every set-disjointness and containment invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("split invariant violated: {m}")));
        let train: HashSet<&str> = self.train_members.iter().map(String::as_str).collect();
        let pool: HashSet<&str> = self.nonmember_pool.iter().map(String::as_str).collect();
        if train.iter().any(|id| pool.contains(id)) {
            return bad("train_members ∩ nonmember_pool ≠ ∅");
        }
        if !self.eval_members.iter().all(|id| train.contains(id.as_str())) {
            return bad("eval_members ⊄ train_members");
        }
        if !self.eval_nonmembers.iter().all(|id| pool.contains(id.as_str())) {
            return bad("eval_nonmembers ⊄ nonmember_pool");
        }
        let eval: HashSet<&str> =
            self.eval_members.iter().chain(&self.eval_nonmembers).map(String::as_str).collect();
        if self.shadow_filler.iter().any(|id| eval.contains(id.as_str()) || !pool.contains(id.as_str())) {
            return bad("shadow filler must come from the nonmember pool outside the eval sets");
        }
        let filler: HashSet<&str> = self.shadow_filler.iter().map(String::as_str).collect();
        for (i, s) in self.shadow_splits.iter().enumerate() {
            for id in &s.in_ids {
                if !(eval.contains(id.as_str()) || filler.contains(id.as_str())) {
                    return Err(Error::InvalidConfig(format!(
                        "shadow {i} trains on `{id}`, which is neither an eval example nor filler"
                    )));
                }
            }
            if s.in_ids.iter().any(|id| s.out_ids.binary_search(id).is_ok()) {
                return Err(Error::InvalidConfig(format!("shadow {i} lists an id as both IN and OUT")));
            }
        }
        Ok(())
    }

    /// Evaluation pool: members then nonmembers.
    pub fn eval_pool(&self) -> Vec<String> {
        self.eval_members.iter().chain(&self.eval_nonmembers).cloned().collect()
    }

    /// (IN count, OUT count) of each evaluation example over the shadow manifest.
    pub fn in_out_counts(&self) -> BTreeMap<String, (usize, usize)> {
        let mut counts: BTreeMap<String, (usize, usize)> =
            self.eval_pool().into_iter().map(|id| (id, (0, 0))).collect();
        for s in &self.shadow_splits {
            for (id, c) in counts.iter_mut() {
                if s.contains(id) {
                    c.0 += 1;
                } else {
                    c.1 += 1;
                }
            }
        }
        counts
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        s.validate()?;
        Ok(s)
    }
}

//! Leave-one-out splitting and ranking metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{BehaviorSequence, MIN_SEQUENCE_LEN};
use crate::error::{Error, Result};

/// One user's leave-one-out partition of a sequence `[x1..xn]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub user_id: String,
    /// `x1..x(n-2)`.
    pub train: Vec<String>,
    /// History `x1..x(n-2)`, target `x(n-1)`.
    pub valid_target: String,
    /// History `x1..x(n-1)`, target `xn`.
    pub test_target: String,
    items: Vec<String>,
}

impl UserSplit {
    pub fn valid_history(&self) -> &[String] {
        &self.items[..self.items.len() - 2]
    }

    pub fn test_history(&self) -> &[String] {
        &self.items[..self.items.len() - 1]
    }

    /// `(history, next)` for every target inside the training region that has
    /// a non-empty history.
    pub fn train_pairs(&self) -> impl Iterator<Item = (&[String], &str)> {
        (1..self.train.len()).map(move |t| (&self.train[..t], self.train[t].as_str()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalSplit {
    pub users: Vec<UserSplit>,
    /// Sequences shorter than three items, left out of every partition.
    pub rejected_short: usize,
}

pub fn split(sequences: &[BehaviorSequence]) -> EvalSplit {
    let mut out = EvalSplit::default();
    for s in sequences {
        let n = s.items.len();
        if n < MIN_SEQUENCE_LEN {
            out.rejected_short += 1;
            continue;
        }
        out.users.push(UserSplit {
            user_id: s.user_id.clone(),
            train: s.items[..n - 2].to_vec(),
            valid_target: s.items[n - 2].clone(),
            test_target: s.items[n - 1].clone(),
            items: s.items.clone(),
        });
    }
    if out.rejected_short > 0 {
        log::warn!("split: rejected {} sequences shorter than {}", out.rejected_short, MIN_SEQUENCE_LEN);
    }
    out
}

/// 1-based position of `target` in `ranked`, if present.
pub fn rank_of(ranked: &[String], target: &str) -> Option<usize> {
    ranked.iter().position(|r| r == target).map(|p| p + 1)
}

pub fn recall_at_k(ranked: &[String], target: &str, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// Single relevant item, so the ideal DCG is 1.
pub fn ndcg_at_k(ranked: &[String], target: &str, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// A user's retrieved ranking together with the held-out target.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCase {
    pub user_id: String,
    pub ranked: Vec<String>,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users: usize,
    /// Share of users with at least one retrieved item.
    pub coverage: f64,
    /// Users whose retrieval returned nothing; they score zero.
    pub empty: usize,
}

impl EvalReport {
    /// Means in user order, so the result does not depend on how rankings were produced.
    pub fn from_cases(cases: &[RankedCase], ks: &[usize]) -> Self {
        let n = cases.len();
        let mean = |f: &dyn Fn(&RankedCase) -> f64| {
            if n == 0 {
                0.0
            } else {
                cases.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let recall = ks.iter().map(|&k| mean(&|c| recall_at_k(&c.ranked, &c.target, k))).collect();
        let ndcg = ks.iter().map(|&k| mean(&|c| ndcg_at_k(&c.ranked, &c.target, k))).collect();
        let empty = cases.iter().filter(|c| c.ranked.is_empty()).count();
        EvalReport {
            ks: ks.to_vec(),
            recall,
            ndcg,
            users: n,
            coverage: if n == 0 { 0.0 } else { (n - empty) as f64 / n as f64 },
            empty,
        }
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }

    /// Metrics as rows, cut-offs as columns.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<8}", "metric");
        for k in &self.ks {
            out.push_str(&format!(" {:>9}", format!("@{}", k)));
        }
        out.push('\n');
        for (name, values) in [("Recall", &self.recall), ("NDCG", &self.ndcg)] {
            let _ = write!(out, "{:<8}", name);
            for v in values {
                let _ = write!(out, " {:>9.4}", v);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "users={} coverage={:.4} empty={}", self.users, self.coverage, self.empty);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

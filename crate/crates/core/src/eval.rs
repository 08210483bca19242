//! Dummy click-rate baseline, rank-based AUC and macro averaging over
//! (user, app category) groups.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("only one class present")]
    SingleClass,
    #[error("no group has both classes")]
    NoValidGroups,
    #[error("scores and labels differ in length ({0} vs {1})")]
    Length(usize, usize),
}

/// One scored, labeled notification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub user_id: String,
    pub category: String,
    pub score: f64,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickCount {
    pub clicked: usize,
    pub total: usize,
}

impl ClickCount {
    fn add(&mut self, label: u8) {
        self.total += 1;
        self.clicked += usize::from(label == 1);
    }

    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.clicked as f64 / self.total as f64)
    }
}

pub const GLOBAL_PRIOR: f64 = 0.5;

/// Empirical click rates with a (user, category) → user → global fallback.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineTable {
    pub groups: BTreeMap<String, BTreeMap<String, ClickCount>>,
    pub users: BTreeMap<String, ClickCount>,
    pub global: ClickCount,
}

impl BaselineTable {
    pub fn fit<'a, I>(labels: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str, u8)>,
    {
        let mut t = Self::default();
        for (user, category, y) in labels {
            t.groups
                .entry(user.to_string())
                .or_default()
                .entry(category.to_string())
                .or_default()
                .add(y);
            t.users.entry(user.to_string()).or_default().add(y);
            t.global.add(y);
        }
        t
    }

    pub fn probability(&self, user: &str, category: &str) -> f64 {
        self.groups
            .get(user)
            .and_then(|g| g.get(category))
            .and_then(ClickCount::rate)
            .or_else(|| self.users.get(user).and_then(ClickCount::rate))
            .or_else(|| self.global.rate())
            .unwrap_or(GLOBAL_PRIOR)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("user_id\tcategory\tclicked\ttotal\tp\n");
        for (u, cats) in &self.groups {
            for (c, n) in cats {
                let _ = writeln!(s, "{u}\t{c}\t{}\t{}\t{:.6}", n.clicked, n.total, n.rate().unwrap_or(0.0));
            }
        }
        s
    }
}

/// Draws `u ~ U(0,1)` and predicts 1 iff `u < p`.
pub fn baseline_predict<R: Rng + ?Sized>(user: &str, category: &str, table: &BaselineTable, rng: &mut R) -> u8 {
    let p = table.probability(user, category);
    u8::from(rng.random::<f64>() < p)
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|y| **y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC with midranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let (pos, neg) = check(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1
        let mid = (i + j + 2) as f64 / 2.0;
        for k in &idx[i..=j] {
            if labels[*k] == 1 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve from the highest threshold down; starts at (0,0), ends at (1,1).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>, EvalError> {
    let (pos, neg) = check(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut out = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAuc {
    pub user_id: String,
    pub category: String,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub groups: Vec<GroupAuc>,
    pub macro_auc: f64,
    pub pooled_auc: Option<f64>,
    pub roc: Vec<RocPoint>,
    pub skipped: usize,
    pub labels: usize,
}

impl EvalReport {
    pub fn groups_text(&self) -> String {
        let mut s = String::from("user_id\tcategory\tpositives\tnegatives\tauc\n");
        for g in &self.groups {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{:.6}", g.user_id, g.category, g.positives, g.negatives, g.auc);
        }
        let _ = writeln!(s, "# macro_auc={:.6} groups={} skipped={} labels={}", self.macro_auc, self.groups.len(), self.skipped, self.labels);
        s
    }

    pub fn roc_text(&self) -> String {
        let mut s = String::from("threshold\tfpr\ttpr\n");
        for p in &self.roc {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}", p.threshold, p.fpr, p.tpr);
        }
        s
    }
}

/// Unweighted mean of per-(user, category) AUCs; single-class groups are
/// skipped and counted.
pub fn macro_auc(predictions: &[Prediction]) -> Result<EvalReport, EvalError> {
    let mut grouped: BTreeMap<(&str, &str), (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for p in predictions {
        let e = grouped.entry((&p.user_id, &p.category)).or_default();
        e.0.push(p.score);
        e.1.push(p.label);
    }
    let mut groups = Vec::new();
    let mut skipped = 0;
    for ((u, c), (s, y)) in &grouped {
        match auc(s, y) {
            Ok(a) => {
                let positives = y.iter().filter(|v| **v == 1).count();
                groups.push(GroupAuc {
                    user_id: u.to_string(),
                    category: c.to_string(),
                    auc: a,
                    positives,
                    negatives: y.len() - positives,
                });
            }
            Err(_) => skipped += 1,
        }
    }
    if groups.is_empty() {
        return Err(EvalError::NoValidGroups);
    }
    let macro_auc = groups.iter().map(|g| g.auc).sum::<f64>() / groups.len() as f64;
    let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
    let labels: Vec<u8> = predictions.iter().map(|p| p.label).collect();
    Ok(EvalReport {
        groups,
        macro_auc,
        pooled_auc: auc(&scores, &labels).ok(),
        roc: roc_curve(&scores, &labels).unwrap_or_default(),
        skipped,
        labels: predictions.len(),
    })
}

pub const SPLIT_COLUMNS: [&str; 3] = ["Valid", "Test", "Unknown Test"];

/// Rows of AUCs per split, rendered as a tab-separated table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AucTable {
    pub title: String,
    pub rows: Vec<(String, [Option<f64>; 3])>,
}

impl AucTable {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, values: [Option<f64>; 3]) {
        self.rows.push((name.into(), values));
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {}\n\t{}\n", self.title, SPLIT_COLUMNS.join("\t"));
        for (name, vals) in &self.rows {
            let cells: Vec<String> = vals
                .iter()
                .map(|v| v.map_or_else(|| "-".to_string(), |a| format!("{a:.3}")))
                .collect();
            let _ = writeln!(s, "{name}\t{}", cells.join("\t"));
        }
        s
    }
}

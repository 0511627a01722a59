//! Selective-prediction metrics.
//!
//! Correct predictions are the positive class throughout: AUROC is the
//! probability that a correct prediction outscores an incorrect one, and
//! FPR95 is the fraction of incorrect predictions accepted at the threshold
//! that keeps 95% of the correct ones.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorers::ScoredPrediction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskCoveragePoint {
    pub coverage: f64,
    pub risk: f64,
}

pub fn accuracy(correct: &[bool]) -> Result<f64> {
    if correct.is_empty() {
        return Err(Error::Metric("accuracy of an empty set is undefined".into()));
    }
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

fn check_lengths(scores: &[f64], correct: &[bool]) -> Result<()> {
    if scores.len() != correct.len() {
        return Err(Error::Metric(format!(
            "length mismatch: {} scores, {} correctness flags",
            scores.len(),
            correct.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Metric("no samples".into()));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {i} is NaN")));
    }
    Ok(())
}

/// Sample indices ordered by descending score; ties keep input order.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Risk at every coverage `k / n`, accepting the `k` most confident samples.
pub fn risk_coverage_curve(scores: &[f64], correct: &[bool]) -> Result<Vec<RiskCoveragePoint>> {
    check_lengths(scores, correct)?;
    let n = scores.len() as f64;
    let mut errors = 0usize;
    Ok(descending_order(scores)
        .into_iter()
        .enumerate()
        .map(|(k, i)| {
            if !correct[i] {
                errors += 1;
            }
            let covered = (k + 1) as f64;
            RiskCoveragePoint {
                coverage: covered / n,
                risk: errors as f64 / covered,
            }
        })
        .collect())
}

/// Area under the risk-coverage curve as the plain mean of the prefix risks.
/// Multiply by 1000 for the conventional reporting scale.
pub fn aurc(curve: &[RiskCoveragePoint]) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::Metric("AURC of an empty curve is undefined".into()));
    }
    Ok(curve.iter().map(|p| p.risk).sum::<f64>() / curve.len() as f64)
}

fn check_both_outcomes(correct: &[bool], metric: &str) -> Result<(usize, usize)> {
    let positives = correct.iter().filter(|&&c| c).count();
    let negatives = correct.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric(format!(
            "{metric} undefined: needs both correct and incorrect predictions ({positives} correct, {negatives} incorrect)"
        )));
    }
    Ok((positives, negatives))
}

/// Probability that a correct prediction scores above an incorrect one, with
/// ties counted as one half. Computed in O(n log n) over tie groups.
pub fn auroc(scores: &[f64], correct: &[bool]) -> Result<f64> {
    check_lengths(scores, correct)?;
    let (positives, negatives) = check_both_outcomes(correct, "AUROC")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // twice the number of (correct, wrong) pairs won, so ties stay integral
    let mut doubled_wins: u128 = 0;
    let mut wrong_below: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let value = scores[order[start]];
        let mut end = start;
        let (mut pos, mut neg) = (0u128, 0u128);
        while end < order.len() && scores[order[end]] == value {
            if correct[order[end]] {
                pos += 1;
            } else {
                neg += 1;
            }
            end += 1;
        }
        doubled_wins += pos * (2 * wrong_below + neg);
        wrong_below += neg;
        start = end;
    }
    Ok(doubled_wins as f64 / (2 * positives as u128 * negatives as u128) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FprAtTpr {
    pub fpr: f64,
    pub tpr: f64,
    /// Acceptance threshold: samples with score `>= threshold` are accepted.
    pub threshold: f64,
}

/// False-positive rate at the largest threshold whose true-positive rate
/// reaches `target_tpr`.
pub fn fpr_at_tpr(scores: &[f64], correct: &[bool], target_tpr: f64) -> Result<FprAtTpr> {
    check_lengths(scores, correct)?;
    let (positives, negatives) = check_both_outcomes(correct, "FPR at TPR")?;
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::Metric(format!(
            "target TPR must be in (0, 1], got {target_tpr}"
        )));
    }
    let order = descending_order(scores);
    let mut accepted_pos = 0usize;
    let mut accepted_neg = 0usize;
    let mut k = 0;
    while k < order.len() {
        let value = scores[order[k]];
        while k < order.len() && scores[order[k]] == value {
            if correct[order[k]] {
                accepted_pos += 1;
            } else {
                accepted_neg += 1;
            }
            k += 1;
        }
        let tpr = accepted_pos as f64 / positives as f64;
        if tpr >= target_tpr {
            return Ok(FprAtTpr {
                fpr: accepted_neg as f64 / negatives as f64,
                tpr,
                threshold: value,
            });
        }
    }
    unreachable!("accepting every sample gives TPR 1")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreName {
    Msp,
    Maxlogit,
    Energy,
    Entropy,
    Mcm,
    Doctor,
    /// Zero-shot confidence plus weighted prototype similarity.
    Kappa,
    /// Ensemble confidence plus prototype similarity; judged against the
    /// ensemble prediction.
    KappaStar,
}

impl ScoreName {
    pub const ALL: [ScoreName; 8] = [
        ScoreName::Msp,
        ScoreName::Maxlogit,
        ScoreName::Energy,
        ScoreName::Entropy,
        ScoreName::Mcm,
        ScoreName::Doctor,
        ScoreName::Kappa,
        ScoreName::KappaStar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreName::Msp => "msp",
            ScoreName::Maxlogit => "maxlogit",
            ScoreName::Energy => "energy",
            ScoreName::Entropy => "entropy",
            ScoreName::Mcm => "mcm",
            ScoreName::Doctor => "doctor",
            ScoreName::Kappa => "kappa",
            ScoreName::KappaStar => "kappa_star",
        }
    }

    fn valid_names() -> String {
        Self::ALL.map(Self::as_str).join(", ")
    }

    /// Score value and correctness flag for one prediction, if present.
    pub fn extract(self, p: &ScoredPrediction) -> Option<(f64, bool)> {
        let b = &p.baselines;
        match self {
            ScoreName::Msp => Some(b.msp).zip(p.correct),
            ScoreName::Maxlogit => Some(b.maxlogit).zip(p.correct),
            ScoreName::Energy => Some(b.energy).zip(p.correct),
            ScoreName::Entropy => Some(b.entropy).zip(p.correct),
            ScoreName::Mcm => Some(b.mcm).zip(p.correct),
            ScoreName::Doctor => Some(b.doctor).zip(p.correct),
            ScoreName::Kappa => p.kappa.zip(p.correct),
            ScoreName::KappaStar => p.kappa_star.zip(p.correct_ens),
        }
    }
}

impl fmt::Display for ScoreName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::UnknownScore {
                name: s.to_owned(),
                valid: Self::valid_names(),
            })
    }
}

/// Metrics of one confidence score. AUROC and FPR95 are `None` when all
/// predictions are correct (or all wrong).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBlock {
    pub score: ScoreName,
    pub n: usize,
    pub acc: f64,
    pub aurc_x1000: f64,
    /// AUROC scaled to percent.
    pub auroc: Option<f64>,
    /// FPR at 95% TPR scaled to percent.
    pub fpr95: Option<f64>,
    pub curve: Vec<RiskCoveragePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub acc: f64,
    pub scores: Vec<ScoreBlock>,
    pub config: BTreeMap<String, String>,
}

fn score_block(name: ScoreName, predictions: &[ScoredPrediction]) -> Result<ScoreBlock> {
    let (scores, correct): (Vec<f64>, Vec<bool>) = predictions
        .iter()
        .map(|p| name.extract(p))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| {
            Error::Metric(format!(
                "score {name} is missing from at least one prediction"
            ))
        })?
        .into_iter()
        .unzip();
    let curve = risk_coverage_curve(&scores, &correct)?;
    let both = check_both_outcomes(&correct, "").is_ok();
    Ok(ScoreBlock {
        score: name,
        n: scores.len(),
        acc: accuracy(&correct)?,
        aurc_x1000: aurc(&curve)? * 1000.0,
        auroc: both
            .then(|| auroc(&scores, &correct).map(|a| a * 100.0))
            .transpose()?,
        fpr95: both
            .then(|| fpr_at_tpr(&scores, &correct, 0.95).map(|f| f.fpr * 100.0))
            .transpose()?,
        curve,
    })
}

/// One metric block per requested score, in request order.
pub fn evaluate(
    predictions: &[ScoredPrediction],
    names: &[ScoreName],
    config: BTreeMap<String, String>,
) -> Result<EvalReport> {
    if names.is_empty() {
        return Err(Error::Config(format!(
            "no scores requested; valid names: {}",
            ScoreName::valid_names()
        )));
    }
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Config(format!("score {n} requested twice")));
        }
    }
    let correct: Vec<bool> = predictions
        .iter()
        .map(|p| p.correct)
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Metric("predictions lack correctness flags".into()))?;
    let acc = accuracy(&correct)?;
    let scores = names
        .iter()
        .map(|&n| score_block(n, predictions))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        n: predictions.len(),
        acc,
        scores,
        config,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Flat table, one row per score: AURC (x1000), AUROC (%), FPR95 (%), ACC (%).
    pub fn to_table(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_default();
        let mut out = String::from("score,aurc,auroc,fpr95,acc\n");
        for b in &self.scores {
            out.push_str(&format!(
                "{},{:.2},{},{},{:.2}\n",
                b.score,
                b.aurc_x1000,
                fmt_opt(b.auroc),
                fmt_opt(b.fpr95),
                b.acc * 100.0
            ));
        }
        out
    }

    pub fn write(&self, json_path: impl AsRef<Path>, table_path: impl AsRef<Path>) -> Result<()> {
        let (json_path, table_path) = (json_path.as_ref(), table_path.as_ref());
        fs::write(json_path, self.to_json()).map_err(|e| Error::io(json_path, e))?;
        fs::write(table_path, self.to_table()).map_err(|e| Error::io(table_path, e))
    }
}

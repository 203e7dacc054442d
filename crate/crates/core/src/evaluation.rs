//! Quadratic weighted kappa and evaluation reports.
//!
//! Categories always span the full declared rubric range, not only the values
//! that happen to occur; this changes results relative to observed-only
//! indexing.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{EssayRecord, Genre, PromptTable, ScoreRange};
use crate::scoring::{score_record, write_model, ModelState, ScoreReport, ScoringError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("rating vectors differ in length: {human} vs {machine}")]
    LengthMismatch { human: usize, machine: usize },
    #[error("no ratings")]
    Empty,
    #[error("rating {value} outside range {range}")]
    OutOfRange { value: i32, range: ScoreRange },
    #[error("evaluation set is empty")]
    EmptySet,
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

/// Paired human and machine ratings on one rubric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingPair {
    human: Vec<i32>,
    machine: Vec<i32>,
    range: ScoreRange,
}

impl RatingPair {
    pub fn new(human: Vec<i32>, machine: Vec<i32>, range: ScoreRange) -> Result<Self, EvalError> {
        if human.len() != machine.len() {
            return Err(EvalError::LengthMismatch {
                human: human.len(),
                machine: machine.len(),
            });
        }
        if human.is_empty() {
            return Err(EvalError::Empty);
        }
        if let Some(&value) = human.iter().chain(&machine).find(|v| !range.contains(**v)) {
            return Err(EvalError::OutOfRange { value, range });
        }
        Ok(Self {
            human,
            machine,
            range,
        })
    }

    pub fn human(&self) -> &[i32] {
        &self.human
    }

    pub fn machine(&self) -> &[i32] {
        &self.machine
    }

    pub fn range(&self) -> ScoreRange {
        self.range
    }

    fn histograms(&self) -> (Vec<f64>, Vec<f64>) {
        let n_cat = self.range.categories();
        let mut h = vec![0.0; n_cat];
        let mut m = vec![0.0; n_cat];
        for (&a, &b) in self.human.iter().zip(&self.machine) {
            h[(a - self.range.min()) as usize] += 1.0;
            m[(b - self.range.min()) as usize] += 1.0;
        }
        (h, m)
    }

    /// True when both raters give one identical constant rating, which makes
    /// the expected disagreement zero.
    pub fn is_degenerate(&self) -> bool {
        let first = self.human[0];
        self.human.iter().chain(&self.machine).all(|&v| v == first)
    }
}

/// Cohen's kappa with quadratic weights `(i - j)^2 / (N - 1)^2`:
/// `1 - sum(w * observed) / sum(w * expected)`, where `expected` is the outer
/// product of the two marginals scaled to the item count.
///
/// When both raters give the same constant rating the expected term is zero;
/// that perfect-agreement case returns 1.0.
pub fn qwk(pair: &RatingPair) -> f64 {
    let n = pair.human.len() as f64;
    // The common 1 / (N - 1)^2 weight factor cancels in the ratio.
    let observed: f64 = pair
        .human
        .iter()
        .zip(&pair.machine)
        .map(|(&a, &b)| f64::from(a - b).powi(2))
        .sum();
    let (h, m) = pair.histograms();
    let mut expected = 0.0;
    for (i, &hi) in h.iter().enumerate() {
        if hi == 0.0 {
            continue;
        }
        for (j, &mj) in m.iter().enumerate() {
            let d = i as f64 - j as f64;
            expected += d * d * hi * mj;
        }
    }
    expected /= n;
    if expected == 0.0 {
        return 1.0;
    }
    1.0 - observed / expected
}

/// Validates and computes QWK in one call.
pub fn qwk_of(human: &[i32], machine: &[i32], range: ScoreRange) -> Result<f64, EvalError> {
    Ok(qwk(&RatingPair::new(human.to_vec(), machine.to_vec(), range)?))
}

/// QWK of two rating vectors drawn uniformly and independently from `range`.
pub fn random_ratings_qwk(
    n: usize,
    range: ScoreRange,
    human_seed: u64,
    machine_seed: u64,
) -> Result<f64, EvalError> {
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| rng.random_range(range.min()..=range.max()))
            .collect::<Vec<_>>()
    };
    Ok(qwk(&RatingPair::new(draw(human_seed), draw(machine_seed), range)?))
}

/// Null-model sanity check: the machine rater uses a seed derived from
/// `seed`, so the two vectors are independent.
pub fn random_baseline_qwk(n: usize, range: ScoreRange, seed: u64) -> Result<f64, EvalError> {
    random_ratings_qwk(n, range, seed, seed ^ 0x9E37_79B9_7F4A_7C15)
}

/// Published QWK values of the compared systems, for context in reports.
/// Never used as an expected value for this implementation.
pub fn reference_table() -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("MHMLW", 0.732),
        ("NFA", 0.741),
        ("LC-A", 0.752),
        ("SKIP-LSTM", 0.753),
        ("CCXLNET", 0.761),
        ("BERT-DOC-TOK-SEG", 0.762),
        ("Tran-BERT-MS-ML-R", 0.793),
        ("Ours", 0.803),
    ])
}

/// Collections reported per genre: one argumentative, one question-answering
/// and one narrative collection.
pub const REFERENCE_COLLECTIONS: [u32; 3] = [2, 3, 8];

/// Published per-collection QWK row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceRow {
    /// Row number in the overall comparison ("3", "4", "6", or "Ours").
    pub label: &'static str,
    /// Short model name from the overall comparison.
    pub short_name: &'static str,
    /// Long-form model name used in the per-collection discussion.
    pub described_as: &'static str,
    /// QWK for collections 2, 3 and 8.
    pub collections: [f64; 3],
    pub average: f64,
}

pub fn reference_collection_table() -> Vec<ReferenceRow> {
    vec![
        ReferenceRow {
            label: "3",
            short_name: "LC-A",
            described_as: "Hierarchical LSTM-CNN-Attention",
            collections: [0.683, 0.692, 0.732],
            average: 0.702,
        },
        ReferenceRow {
            label: "4",
            short_name: "SKIP-LSTM",
            described_as: "SKIPFLOW LSTM",
            collections: [0.687, 0.695, 0.754],
            average: 0.712,
        },
        ReferenceRow {
            label: "6",
            short_name: "BERT-DOC-TOK-SEG",
            described_as: "BERT-DOC-TOK-SEG",
            collections: [0.691, 0.699, 0.776],
            average: 0.722,
        },
        ReferenceRow {
            label: "Ours",
            short_name: "Ours",
            described_as: "genre-aware BERT scorer (reported)",
            collections: [0.701, 0.703, 0.804],
            average: 0.736,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEval {
    pub prompt_id: u32,
    pub genre: Genre,
    pub essays: usize,
    pub overall_qwk: f64,
    /// Trait name to QWK, in the prompt's declared trait order.
    pub trait_qwk: Vec<(String, f64)>,
}

impl PromptEval {
    pub fn mean_trait_qwk(&self) -> Option<f64> {
        if self.trait_qwk.is_empty() {
            None
        } else {
            Some(self.trait_qwk.iter().map(|(_, q)| q).sum::<f64>() / self.trait_qwk.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// SHA-256 of the checkpoint bytes of the evaluated model.
    pub model_hash: String,
    pub prompts: Vec<PromptEval>,
    /// Overall-score QWK over all essays after mapping every score onto a
    /// common 0..=10 scale by its prompt's range.
    pub pooled_overall_qwk: f64,
    /// Mean of the per-prompt overall QWK values.
    pub macro_average: f64,
    /// Mean over every (prompt, trait) QWK.
    pub mean_trait_qwk: f64,
    pub reference_baselines: BTreeMap<String, f64>,
}

impl EvalReport {
    /// Model-selection score: mean of the overall macro average and the mean
    /// trait QWK.
    pub fn selection_metric(&self) -> f64 {
        if self.prompts.iter().all(|p| p.trait_qwk.is_empty()) {
            self.macro_average
        } else {
            0.5 * (self.macro_average + self.mean_trait_qwk)
        }
    }

    pub fn prompt(&self, prompt_id: u32) -> Option<&PromptEval> {
        self.prompts.iter().find(|p| p.prompt_id == prompt_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Collection comparison: one row per reference model plus this model,
    /// one column per requested collection and an average column.
    pub fn comparison_table(&self, collections: &[u32]) -> String {
        let mut out = String::new();
        let _ = write!(out, "| Model |");
        for c in collections {
            let _ = write!(out, " Collection {c} |");
        }
        out.push_str(" Average |\n|---|");
        for _ in collections {
            out.push_str("---|");
        }
        out.push_str("---|\n");

        for row in reference_collection_table() {
            let _ = write!(out, "| {} ({}) |", row.label, row.described_as);
            let mut vals = Vec::new();
            for c in collections {
                match REFERENCE_COLLECTIONS.iter().position(|r| r == c) {
                    Some(i) => {
                        vals.push(row.collections[i]);
                        let _ = write!(out, " {:.3} |", row.collections[i]);
                    }
                    None => out.push_str(" - |"),
                }
            }
            if vals.len() == collections.len() && collections == REFERENCE_COLLECTIONS {
                let _ = writeln!(out, " {:.3} |", row.average);
            } else if vals.is_empty() {
                out.push_str(" - |\n");
            } else {
                let _ = writeln!(out, " {:.3} |", vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }

        let _ = write!(out, "| This model ({}) |", &self.model_hash[..self.model_hash.len().min(12)]);
        let mut vals = Vec::new();
        for c in collections {
            match self.prompt(*c) {
                Some(p) => {
                    vals.push(p.overall_qwk);
                    let _ = write!(out, " {:.3} |", p.overall_qwk);
                }
                None => out.push_str(" - |"),
            }
        }
        if vals.is_empty() {
            out.push_str(" - |\n");
        } else {
            let _ = writeln!(out, " {:.3} |", vals.iter().sum::<f64>() / vals.len() as f64);
        }
        out
    }

    /// Per-prompt and per-trait detail rows.
    pub fn detail_table(&self) -> String {
        let mut out = String::from("| Prompt | Genre | Essays | Target | QWK |\n|---|---|---|---|---|\n");
        for p in &self.prompts {
            let _ = writeln!(
                out,
                "| {} | {} | {} | overall | {:.4} |",
                p.prompt_id, p.genre, p.essays, p.overall_qwk
            );
            for (name, q) in &p.trait_qwk {
                let _ = writeln!(out, "| {} | {} | {} | {} | {:.4} |", p.prompt_id, p.genre, p.essays, name, q);
            }
        }
        let _ = writeln!(out, "| all | - | - | overall (pooled) | {:.4} |", self.pooled_overall_qwk);
        let _ = writeln!(out, "| all | - | - | overall (macro average) | {:.4} |", self.macro_average);
        let _ = writeln!(out, "| all | - | - | traits (mean) | {:.4} |", self.mean_trait_qwk);
        out
    }

    /// Both tables with the model hash, as printed by the CLI.
    pub fn render(&self, collections: &[u32]) -> String {
        format!(
            "model: {}\n\n{}\n{}",
            self.model_hash,
            self.comparison_table(collections),
            self.detail_table()
        )
    }
}

/// Rescales a rubric score to 0..=10, rounding half up.
pub fn common_scale(score: i32, range: ScoreRange) -> i32 {
    let frac = f64::from(score - range.min()) / f64::from(range.max() - range.min());
    (frac * 10.0 + 0.5).floor() as i32
}

/// Aggregates already-computed reports against gold records.
pub fn evaluate_reports(
    reports: &[ScoreReport],
    records: &[EssayRecord],
    table: &PromptTable,
    model_hash: String,
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut by_prompt: BTreeMap<u32, Vec<(&ScoreReport, &EssayRecord)>> = BTreeMap::new();
    for (rep, rec) in reports.iter().zip(records) {
        by_prompt.entry(rec.prompt_id).or_default().push((rep, rec));
    }

    let mut prompts = Vec::new();
    let mut pooled_h = Vec::new();
    let mut pooled_m = Vec::new();
    for (&prompt_id, items) in &by_prompt {
        let spec = table
            .get(prompt_id)
            .ok_or(ScoringError::UnknownPrompt(prompt_id))?;
        let human: Vec<i32> = items.iter().map(|(_, r)| r.overall_score).collect();
        let machine: Vec<i32> = items.iter().map(|(p, _)| p.overall_rubric).collect();
        let overall_qwk = qwk_of(&human, &machine, spec.overall_range)?;
        pooled_h.extend(human.iter().map(|&v| common_scale(v, spec.overall_range)));
        pooled_m.extend(machine.iter().map(|&v| common_scale(v, spec.overall_range)));

        let mut trait_qwk = Vec::new();
        for t in &spec.traits {
            let h: Vec<i32> = items
                .iter()
                .map(|(_, r)| r.trait_scores.get(&t.name).copied().unwrap_or(t.range.min()))
                .collect();
            let m: Vec<i32> = items
                .iter()
                .map(|(p, _)| p.traits.get(&t.name).map_or(t.range.min(), |s| s.rubric))
                .collect();
            trait_qwk.push((t.name.clone(), qwk_of(&h, &m, t.range)?));
        }
        prompts.push(PromptEval {
            prompt_id,
            genre: spec.genre,
            essays: items.len(),
            overall_qwk,
            trait_qwk,
        });
    }

    let pooled_overall_qwk = qwk_of(&pooled_h, &pooled_m, ScoreRange::new(0, 10).expect("valid range"))?;
    let macro_average = prompts.iter().map(|p| p.overall_qwk).sum::<f64>() / prompts.len() as f64;
    let all_traits: Vec<f64> = prompts
        .iter()
        .flat_map(|p| p.trait_qwk.iter().map(|(_, q)| *q))
        .collect();
    let mean_trait_qwk = if all_traits.is_empty() {
        0.0
    } else {
        all_traits.iter().sum::<f64>() / all_traits.len() as f64
    };

    Ok(EvalReport {
        model_hash,
        prompts,
        pooled_overall_qwk,
        macro_average,
        mean_trait_qwk,
        reference_baselines: reference_table()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
    })
}

/// Scores every record and reports QWK per prompt, per trait and pooled.
pub fn evaluate(model: &ModelState, records: &[EssayRecord], table: &PromptTable) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let reports = records
        .par_iter()
        .map(|r| score_record(r, table, model))
        .collect::<Result<Vec<_>, _>>()?;
    let hash = hex::encode(Sha256::digest(write_model(model)));
    evaluate_reports(&reports, records, table, hash)
}

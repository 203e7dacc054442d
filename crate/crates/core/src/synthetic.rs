//! Planted-keyword corpus with constructed gold scores.
//!
//! Every trait of every prompt owns one pseudo-word. An essay plants each
//! trait keyword `c` times (`c` uniform in `0..=max_count`) among filler
//! pseudo-words; the trait score is the affine map of `c` onto the trait
//! range, rounded, and the overall score is the same map applied to the mean
//! count over the prompt's traits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, DatasetSplit, EssayRecord, PromptTable, ScoreRange};

const SYLLABLES: [&str; 12] = ["ba", "ke", "mi", "no", "ru", "sa", "te", "vo", "zu", "li", "po", "ga"];
const KEYWORD_OFFSET: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub prompts: Vec<u32>,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub sentences: usize,
    pub words_per_sentence: usize,
    pub filler_vocabulary: usize,
    pub max_count: u32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            prompts: vec![2, 3, 8],
            train: 800,
            dev: 100,
            test: 100,
            sentences: 5,
            words_per_sentence: 7,
            filler_vocabulary: 60,
            max_count: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub records: Vec<EssayRecord>,
    pub split: DatasetSplit,
    /// Keyword planted for each (prompt, trait).
    pub keywords: BTreeMap<(u32, String), String>,
}

/// Deterministic pronounceable pseudo-word for an index.
pub fn pseudo_word(mut index: usize) -> String {
    let mut out = String::new();
    for _ in 0..3 {
        out.push_str(SYLLABLES[index % SYLLABLES.len()]);
        index /= SYLLABLES.len();
    }
    while index > 0 {
        out.push_str(SYLLABLES[index % SYLLABLES.len()]);
        index /= SYLLABLES.len();
    }
    out
}

/// `min + round(fraction * span)` with half-up rounding.
pub fn affine_score(fraction: f64, range: ScoreRange) -> i32 {
    let span = f64::from(range.max() - range.min());
    range.min() + (fraction * span + 0.5).floor() as i32
}

pub fn generate(cfg: &SyntheticConfig, table: &PromptTable) -> Result<SyntheticCorpus, CorpusError> {
    if cfg.prompts.is_empty() || cfg.max_count == 0 || cfg.filler_vocabulary == 0 {
        return Err(CorpusError::Synthetic(
            "synthetic corpus needs prompts, a positive max_count and filler words".into(),
        ));
    }
    let mut specs = Vec::new();
    for &id in &cfg.prompts {
        specs.push(table.get(id).ok_or_else(|| CorpusError::Synthetic(format!("unknown prompt {id}")))?);
    }
    let slots = cfg.sentences * cfg.words_per_sentence;
    let widest = specs.iter().map(|s| s.trait_count()).max().unwrap_or(0);
    if widest * cfg.max_count as usize > slots {
        return Err(CorpusError::Synthetic(format!(
            "{slots} word slots cannot hold {widest} traits x {} keywords",
            cfg.max_count
        )));
    }

    let mut keywords = BTreeMap::new();
    let mut next = KEYWORD_OFFSET;
    for spec in &specs {
        for t in &spec.traits {
            keywords.insert((spec.prompt_id, t.name.clone()), pseudo_word(next));
            next += 1;
        }
    }
    let fillers: Vec<String> = (0..cfg.filler_vocabulary).map(pseudo_word).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.train + cfg.dev + cfg.test;
    let mut records = Vec::with_capacity(total);
    for i in 0..total {
        let spec = specs[i % specs.len()];
        let counts: Vec<u32> = spec.traits.iter().map(|_| rng.random_range(0..=cfg.max_count)).collect();
        let mut words: Vec<&str> = Vec::with_capacity(slots);
        for (t, &c) in spec.traits.iter().zip(&counts) {
            let kw = &keywords[&(spec.prompt_id, t.name.clone())];
            words.extend(std::iter::repeat_n(kw.as_str(), c as usize));
        }
        while words.len() < slots {
            words.push(&fillers[rng.random_range(0..fillers.len())]);
        }
        words.shuffle(&mut rng);
        let text = words
            .chunks(cfg.words_per_sentence)
            .map(|s| format!("{}.", s.join(" ")))
            .collect::<Vec<_>>()
            .join(" ");

        let max = f64::from(cfg.max_count);
        let trait_scores = spec
            .traits
            .iter()
            .zip(&counts)
            .map(|(t, &c)| (t.name.clone(), affine_score(f64::from(c) / max, t.range)))
            .collect();
        let mean = counts.iter().map(|&c| f64::from(c)).sum::<f64>() / counts.len().max(1) as f64;
        records.push(EssayRecord {
            essay_id: format!("syn-{i:05}"),
            prompt_id: spec.prompt_id,
            text,
            overall_score: affine_score(mean / max, spec.overall_range),
            trait_scores,
        });
    }

    let ids: Vec<String> = records.iter().map(|r| r.essay_id.clone()).collect();
    let split = DatasetSplit {
        seed: cfg.seed,
        train: ids[..cfg.train].to_vec(),
        dev: ids[cfg.train..cfg.train + cfg.dev].to_vec(),
        test: ids[cfg.train + cfg.dev..].to_vec(),
    };
    Ok(SyntheticCorpus {
        records,
        split,
        keywords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::builtin_prompt_table;
    use crate::tokenizer::basic_words;

    #[test]
    fn pseudo_words_are_distinct() {
        let words: std::collections::HashSet<String> = (0..2000).map(pseudo_word).collect();
        assert_eq!(words.len(), 2000);
    }

    #[test]
    fn gold_scores_follow_keyword_counts() {
        let table = builtin_prompt_table();
        let cfg = SyntheticConfig {
            train: 30,
            dev: 3,
            test: 3,
            ..SyntheticConfig::default()
        };
        let corpus = generate(&cfg, &table).unwrap();
        assert_eq!(corpus.records.len(), 36);
        assert_eq!(corpus.split.train.len(), 30);
        for r in &corpus.records {
            let spec = table.get(r.prompt_id).unwrap();
            r.validate(&table).unwrap();
            let words = basic_words(&r.text);
            assert_eq!(words.iter().filter(|w| *w == ".").count(), cfg.sentences);
            for t in &spec.traits {
                let kw = &corpus.keywords[&(r.prompt_id, t.name.clone())];
                let c = words.iter().filter(|w| *w == kw).count() as f64;
                assert_eq!(r.trait_scores[&t.name], affine_score(c / 4.0, t.range));
            }
        }
        let traits: Vec<usize> = [2, 3, 8]
            .iter()
            .map(|p| corpus.keywords.keys().filter(|(id, _)| id == p).count())
            .collect();
        assert_eq!(traits, vec![5, 4, 6]);
    }

    #[test]
    fn generation_is_seeded() {
        let table = builtin_prompt_table();
        let cfg = SyntheticConfig {
            train: 10,
            dev: 2,
            test: 2,
            ..SyntheticConfig::default()
        };
        let a = generate(&cfg, &table).unwrap();
        let b = generate(&cfg, &table).unwrap();
        assert_eq!(a.records, b.records);
        let c = generate(&SyntheticConfig { seed: 1, ..cfg }, &table).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn affine_endpoints() {
        let r = ScoreRange::new(10, 60).unwrap();
        assert_eq!(affine_score(0.0, r), 10);
        assert_eq!(affine_score(1.0, r), 60);
        assert_eq!(affine_score(0.5, r), 35);
    }
}

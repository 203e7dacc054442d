//! Essay collections: prompt metadata, TSV ingest, seeded splits and
//! rubric score normalization.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Bundled default prompt metadata.
pub const BUILTIN_PROMPTS_TOML: &str = include_str!("../data/prompts.toml");

/// Schema version understood by [`PromptTable::from_toml_str`].
pub const PROMPT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("line {line}: unknown prompt id {prompt_id}")]
    UnknownPrompt { line: u64, prompt_id: i64 },
    #[error("line {line}: {field} score {value} outside range {range}")]
    ScoreOutOfRange {
        line: u64,
        field: String,
        value: i32,
        range: ScoreRange,
    },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("value {value} outside range {range}")]
    ValueOutOfRange { value: i32, range: ScoreRange },
    #[error("invalid score range [{min}, {max}]: min must be below max")]
    InvalidRange { min: i32, max: i32 },
    #[error("prompt metadata: {0}")]
    Metadata(String),
    #[error("synthetic corpus: {0}")]
    Synthetic(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Genre {
    Argumentative,
    QuestionAnswering,
    Narrative,
}

impl Genre {
    pub const ALL: [Genre; 3] = [
        Genre::Argumentative,
        Genre::QuestionAnswering,
        Genre::Narrative,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Genre::Argumentative => "argumentative",
            Genre::QuestionAnswering => "question_answering",
            Genre::Narrative => "narrative",
        }
    }
}

impl fmt::Display for Genre {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inclusive integer rubric interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i32; 2]", into = "[i32; 2]")]
pub struct ScoreRange {
    min: i32,
    max: i32,
}

impl ScoreRange {
    pub fn new(min: i32, max: i32) -> Result<Self, CorpusError> {
        if min < max {
            Ok(Self { min, max })
        } else {
            Err(CorpusError::InvalidRange { min, max })
        }
    }

    pub fn min(&self) -> i32 {
        self.min
    }

    pub fn max(&self) -> i32 {
        self.max
    }

    /// Number of rubric categories (max - min + 1).
    pub fn categories(&self) -> usize {
        (self.max - self.min) as usize + 1
    }

    pub fn contains(&self, value: i32) -> bool {
        (self.min..=self.max).contains(&value)
    }

    pub fn values(&self) -> impl Iterator<Item = i32> {
        self.min..=self.max
    }
}

impl TryFrom<[i32; 2]> for ScoreRange {
    type Error = CorpusError;

    fn try_from(v: [i32; 2]) -> Result<Self, Self::Error> {
        ScoreRange::new(v[0], v[1])
    }
}

impl From<ScoreRange> for [i32; 2] {
    fn from(r: ScoreRange) -> Self {
        [r.min, r.max]
    }
}

impl fmt::Display for ScoreRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.min, self.max)
    }
}

/// Maps a rubric integer linearly onto [0, 1].
pub fn normalize_score(value: i32, range: ScoreRange) -> Result<f64, CorpusError> {
    if !range.contains(value) {
        return Err(CorpusError::ValueOutOfRange { value, range });
    }
    Ok(f64::from(value - range.min) / f64::from(range.max - range.min))
}

/// Maps a real in [0, 1] back to the nearest rubric integer, rounding half up
/// and clamping into the range. NaN maps to the range minimum.
pub fn denormalize_score(value: f64, range: ScoreRange) -> i32 {
    if value.is_nan() {
        return range.min;
    }
    let raw = f64::from(range.min) + value * f64::from(range.max - range.min);
    let rounded = (raw + 0.5).floor();
    rounded.clamp(f64::from(range.min), f64::from(range.max)) as i32
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraitSpec {
    pub name: String,
    pub range: ScoreRange,
}

/// Metadata for one essay collection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub prompt_id: u32,
    pub genre: Genre,
    pub avg_word_count: u32,
    pub overall_range: ScoreRange,
    pub traits: Vec<TraitSpec>,
}

impl PromptSpec {
    pub fn trait_count(&self) -> usize {
        self.traits.len()
    }

    pub fn trait_names(&self) -> impl Iterator<Item = &str> {
        self.traits.iter().map(|t| t.name.as_str())
    }

    pub fn trait_range(&self, name: &str) -> Option<ScoreRange> {
        self.traits.iter().find(|t| t.name == name).map(|t| t.range)
    }
}

#[derive(Debug, Deserialize)]
struct PromptFile {
    schema_version: u32,
    #[serde(rename = "prompt")]
    prompts: Vec<PromptSpec>,
}

/// Validated, ordered set of prompt specs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptTable {
    prompts: Vec<PromptSpec>,
}

impl PromptTable {
    pub fn new(mut prompts: Vec<PromptSpec>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for p in &prompts {
            if !seen.insert(p.prompt_id) {
                return Err(CorpusError::Metadata(format!(
                    "duplicate prompt_id {}",
                    p.prompt_id
                )));
            }
            if p.traits.is_empty() {
                return Err(CorpusError::Metadata(format!(
                    "prompt {} declares no traits",
                    p.prompt_id
                )));
            }
            let mut names = HashSet::new();
            for t in &p.traits {
                if t.name.trim().is_empty() || !names.insert(t.name.as_str()) {
                    return Err(CorpusError::Metadata(format!(
                        "prompt {}: empty or duplicate trait name {:?}",
                        p.prompt_id, t.name
                    )));
                }
            }
        }
        prompts.sort_by_key(|p| p.prompt_id);
        Ok(Self { prompts })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CorpusError> {
        let file: PromptFile =
            toml::from_str(text).map_err(|e| CorpusError::Metadata(e.to_string()))?;
        if file.schema_version != PROMPT_SCHEMA_VERSION {
            return Err(CorpusError::Metadata(format!(
                "unsupported schema_version {} (expected {})",
                file.schema_version, PROMPT_SCHEMA_VERSION
            )));
        }
        Self::new(file.prompts)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn get(&self, prompt_id: u32) -> Option<&PromptSpec> {
        self.prompts.iter().find(|p| p.prompt_id == prompt_id)
    }

    pub fn prompts(&self) -> &[PromptSpec] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// SHA-256 over the canonical JSON form; checkpoints bind to it.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(&self.prompts).expect("prompt table serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

/// The eight built-in collections.
pub fn builtin_prompt_table() -> PromptTable {
    PromptTable::from_toml_str(BUILTIN_PROMPTS_TOML).expect("bundled prompt metadata is valid")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EssayRecord {
    pub essay_id: String,
    pub prompt_id: u32,
    pub text: String,
    pub overall_score: i32,
    pub trait_scores: BTreeMap<String, i32>,
}

impl EssayRecord {
    /// Checks prompt membership, trait coverage and score ranges.
    pub fn validate(&self, table: &PromptTable) -> Result<(), CorpusError> {
        let spec = table
            .get(self.prompt_id)
            .ok_or(CorpusError::UnknownPrompt {
                line: 0,
                prompt_id: i64::from(self.prompt_id),
            })?;
        check_range(0, "overall", self.overall_score, spec.overall_range)?;
        if self.trait_scores.len() != spec.trait_count() {
            return Err(CorpusError::MalformedRow {
                line: 0,
                reason: format!(
                    "essay {} has {} trait scores, prompt {} declares {}",
                    self.essay_id,
                    self.trait_scores.len(),
                    spec.prompt_id,
                    spec.trait_count()
                ),
            });
        }
        for t in &spec.traits {
            let value = self
                .trait_scores
                .get(&t.name)
                .ok_or_else(|| CorpusError::MalformedRow {
                    line: 0,
                    reason: format!("essay {} missing trait {}", self.essay_id, t.name),
                })?;
            check_range(0, &t.name, *value, t.range)?;
        }
        Ok(())
    }
}

fn check_range(line: u64, field: &str, value: i32, range: ScoreRange) -> Result<(), CorpusError> {
    if range.contains(value) {
        Ok(())
    } else {
        Err(CorpusError::ScoreOutOfRange {
            line,
            field: field.to_string(),
            value,
            range,
        })
    }
}

/// Header names used to read a TSV file. Trait columns default to the trait
/// name itself; `trait_columns` overrides individual traits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub essay_id: String,
    pub prompt_id: String,
    pub text: String,
    pub overall: String,
    pub trait_columns: BTreeMap<String, String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            essay_id: "essay_id".into(),
            prompt_id: "essay_set".into(),
            text: "essay".into(),
            overall: "domain1_score".into(),
            trait_columns: BTreeMap::new(),
        }
    }
}

impl ColumnMap {
    fn trait_column<'a>(&'a self, trait_name: &'a str) -> &'a str {
        self.trait_columns
            .get(trait_name)
            .map(String::as_str)
            .unwrap_or(trait_name)
    }
}

/// Loads a tab-separated dataset using the default column names.
pub fn load_dataset(path: &Path, table: &PromptTable) -> Result<Vec<EssayRecord>, CorpusError> {
    load_dataset_with(path, table, &ColumnMap::default())
}

pub fn load_dataset_with(
    path: &Path,
    table: &PromptTable,
    columns: &ColumnMap,
) -> Result<Vec<EssayRecord>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let records = read_dataset(file, table, columns)?;
    tracing::info!(path = %path.display(), rows = records.len(), "loaded dataset");
    Ok(records)
}

/// Parses TSV from any reader. Line numbers in errors are 1-based and count
/// the header as line 1.
pub fn read_dataset<R: std::io::Read>(
    reader: R,
    table: &PromptTable,
    columns: &ColumnMap,
) -> Result<Vec<EssayRecord>, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);

    let header = rdr
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    let index_of = |name: &str| -> Result<usize, CorpusError> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CorpusError::MalformedRow {
                line: 1,
                reason: format!("missing header column {name:?}"),
            })
    };
    let id_col = index_of(&columns.essay_id)?;
    let prompt_col = index_of(&columns.prompt_id)?;
    let text_col = index_of(&columns.text)?;
    let overall_col = index_of(&columns.overall)?;

    let mut out = Vec::new();
    for result in rdr.records() {
        let row = result.map_err(|e| csv_error(e, 0))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |idx: usize| row.get(idx).unwrap_or("");

        let prompt_raw = field(prompt_col).trim();
        let prompt_id: i64 = prompt_raw.parse().map_err(|_| CorpusError::MalformedRow {
            line,
            reason: format!("non-integer prompt id {prompt_raw:?}"),
        })?;
        let spec = u32::try_from(prompt_id)
            .ok()
            .and_then(|id| table.get(id))
            .ok_or(CorpusError::UnknownPrompt { line, prompt_id })?;

        let overall_score = parse_score(line, &columns.overall, field(overall_col))?;
        check_range(line, "overall", overall_score, spec.overall_range)?;

        let mut trait_scores = BTreeMap::new();
        for t in &spec.traits {
            let col_name = columns.trait_column(&t.name);
            let idx = header.iter().position(|h| h == col_name).ok_or_else(|| {
                CorpusError::MalformedRow {
                    line,
                    reason: format!("missing column {col_name:?} for trait {}", t.name),
                }
            })?;
            let value = parse_score(line, col_name, field(idx))?;
            check_range(line, &t.name, value, t.range)?;
            trait_scores.insert(t.name.clone(), value);
        }

        out.push(EssayRecord {
            essay_id: field(id_col).trim().to_string(),
            prompt_id: spec.prompt_id,
            text: field(text_col).to_string(),
            overall_score,
            trait_scores,
        });
    }
    Ok(out)
}

fn parse_score(line: u64, column: &str, raw: &str) -> Result<i32, CorpusError> {
    raw.trim().parse().map_err(|_| CorpusError::MalformedRow {
        line,
        reason: format!("column {column:?}: non-integer score {raw:?}"),
    })
}

fn csv_error(err: csv::Error, fallback_line: u64) -> CorpusError {
    let line = err
        .position()
        .map(|p| p.line())
        .unwrap_or(fallback_line);
    match err.kind() {
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => CorpusError::MalformedRow {
            line,
            reason: format!("expected {expected_len} columns, found {len}"),
        },
        csv::ErrorKind::Io(_) => CorpusError::MalformedRow {
            line,
            reason: err.to_string(),
        },
        _ => CorpusError::MalformedRow {
            line,
            reason: err.to_string(),
        },
    }
}

/// Writes records as TSV with the default column layout. Trait columns are the
/// union of all prompts' traits; cells for traits a prompt lacks are empty.
pub fn write_dataset<W: std::io::Write>(
    writer: W,
    table: &PromptTable,
    records: &[EssayRecord],
) -> Result<(), CorpusError> {
    let cols = ColumnMap::default();
    let mut trait_cols: Vec<&str> = Vec::new();
    for p in table.prompts() {
        for name in p.trait_names() {
            if !trait_cols.contains(&name) {
                trait_cols.push(name);
            }
        }
    }
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_writer(writer);
    let io = |e: csv::Error| CorpusError::Metadata(format!("tsv write failed: {e}"));
    let mut header = vec![
        cols.essay_id.as_str(),
        cols.prompt_id.as_str(),
        cols.text.as_str(),
        cols.overall.as_str(),
    ];
    header.extend(trait_cols.iter().copied());
    w.write_record(&header).map_err(io)?;
    for r in records {
        let mut row = vec![
            r.essay_id.clone(),
            r.prompt_id.to_string(),
            r.text.clone(),
            r.overall_score.to_string(),
        ];
        for name in &trait_cols {
            row.push(
                r.trait_scores
                    .get(*name)
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            );
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| CorpusError::Metadata(format!("tsv write failed: {e}")))?;
    Ok(())
}

/// Disjoint train/dev/test essay id lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    /// Selects the records of one split, preserving the split's order.
    pub fn select<'a>(&self, records: &'a [EssayRecord], part: SplitPart) -> Vec<&'a EssayRecord> {
        let by_id: BTreeMap<&str, &EssayRecord> =
            records.iter().map(|r| (r.essay_id.as_str(), r)).collect();
        let ids = match part {
            SplitPart::Train => &self.train,
            SplitPart::Dev => &self.dev,
            SplitPart::Test => &self.test,
        };
        ids.iter()
            .filter_map(|id| by_id.get(id.as_str()).copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Dev,
    Test,
}

/// Seeded split stratified by prompt: every prompt with at least three essays
/// lands in all three parts, and global part sizes follow the ratios by
/// largest-remainder apportionment.
pub fn split_dataset(
    records: &[EssayRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    if records.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|x| !x.is_finite() || *x <= 0.0) {
        return Err(CorpusError::InvalidRatios(format!(
            "{ratios:?}: every ratio must be positive"
        )));
    }
    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidRatios(format!(
            "{ratios:?}: ratios must sum to 1"
        )));
    }
    let mut seen = HashSet::new();
    for rec in records {
        if !seen.insert(rec.essay_id.as_str()) {
            return Err(CorpusError::MalformedRow {
                line: 0,
                reason: format!("duplicate essay_id {:?}", rec.essay_id),
            });
        }
    }

    let mut groups: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
    for rec in records {
        groups
            .entry(rec.prompt_id)
            .or_default()
            .push(rec.essay_id.as_str());
    }

    let targets = apportion(records.len(), &r);
    let group_sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let quotas = stratified_quotas(&group_sizes, &r, &targets);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<String>; 3] = Default::default();
    for (ids, quota) in groups.values().zip(&quotas) {
        let mut ids: Vec<&str> = ids.clone();
        ids.shuffle(&mut rng);
        let mut it = ids.into_iter();
        for (k, part) in parts.iter_mut().enumerate() {
            part.extend(it.by_ref().take(quota[k]).map(str::to_string));
        }
    }
    let [train, dev, test] = parts;
    Ok(DatasetSplit {
        seed,
        train,
        dev,
        test,
    })
}

fn apportion(total: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut out = [0usize; 3];
    for k in 0..3 {
        out[k] = exact[k].floor() as usize;
    }
    let mut rest = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for k in order.into_iter().cycle() {
        if rest == 0 {
            break;
        }
        out[k] += 1;
        rest -= 1;
    }
    out
}

fn stratified_quotas(sizes: &[usize], ratios: &[f64; 3], targets: &[usize; 3]) -> Vec<[usize; 3]> {
    let mut quotas: Vec<[usize; 3]> = Vec::with_capacity(sizes.len());
    let mut fracs: Vec<(f64, usize, usize)> = Vec::new();
    for (g, &m) in sizes.iter().enumerate() {
        let mut q = [0usize; 3];
        for k in 0..3 {
            let exact = ratios[k] * m as f64;
            q[k] = exact.floor() as usize;
            fracs.push((exact - exact.floor(), g, k));
        }
        if m >= 3 {
            for k in 0..3 {
                if q[k] == 0 {
                    // borrow from the largest part so every split sees the prompt
                    let donor = (0..3).max_by_key(|&j| (q[j], usize::MAX - j)).unwrap();
                    if q[donor] > 1 {
                        q[donor] -= 1;
                        q[k] = 1;
                    }
                }
            }
        }
        quotas.push(q);
    }

    let mut group_left: Vec<usize> = sizes
        .iter()
        .zip(&quotas)
        .map(|(m, q)| m - q.iter().sum::<usize>())
        .collect();
    let mut deficit = [0isize; 3];
    for k in 0..3 {
        let assigned: usize = quotas.iter().map(|q| q[k]).sum();
        deficit[k] = targets[k] as isize - assigned as isize;
    }

    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    for &(_, g, k) in &fracs {
        if group_left[g] > 0 && deficit[k] > 0 {
            quotas[g][k] += 1;
            group_left[g] -= 1;
            deficit[k] -= 1;
        }
    }
    // Anything still unplaced goes to the part furthest below target.
    for g in 0..sizes.len() {
        while group_left[g] > 0 {
            let k = (0..3).max_by_key(|&k| (deficit[k], -(k as isize))).unwrap();
            quotas[g][k] += 1;
            group_left[g] -= 1;
            deficit[k] -= 1;
        }
    }
    quotas
}

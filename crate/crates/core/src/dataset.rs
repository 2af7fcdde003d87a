//! Interaction logs: ingestion, degenerate-student filtering, user-level
//! splits and a synthetic BKT generator.
//!
//! Raw user/item/skill identifiers are interned into dense `u32` ids at load
//! time. The dense form is what prompts render and what models index by; the
//! raw strings stay available through the dataset's vocabularies.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::{IndexMap, IndexSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bkt::BktParams;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed input at row {row}: {message}")]
    Csv { row: u64, message: String },
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: correctness value `{value}` is not 0 or 1")]
    BadCorrect { row: u64, value: String },
    #[error("row {row}: timestamp `{value}` is not numeric")]
    BadTimestamp { row: u64, value: String },
    #[error("row {row}: empty value in column `{column}`")]
    EmptyValue { row: u64, column: String },
    #[error("input contains no interactions")]
    Empty,
    #[error("every student is degenerate (all-correct or all-wrong); nothing left to model")]
    AllDegenerate,
    #[error("split references unknown user `{0}`")]
    UnknownUser(String),
    #[error("user `{0}` is listed in both train and test splits")]
    OverlappingSplit(String),
    #[error("split leaves the {0} half empty")]
    EmptySplit(&'static str),
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("invalid synthetic configuration: {0}")]
    InvalidSynthetic(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UserId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SkillId(pub u32);

impl SkillId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SkillId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bidirectional map between raw identifiers and dense ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    names: IndexSet<String>,
}

impl Vocab {
    pub fn intern(&mut self, raw: &str) -> u32 {
        if let Some(idx) = self.names.get_index_of(raw) {
            return idx as u32;
        }
        self.names.insert(raw.to_string());
        (self.names.len() - 1) as u32
    }

    pub fn get(&self, raw: &str) -> Option<u32> {
        self.names.get_index_of(raw).map(|i| i as u32)
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get_index(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.names.iter().enumerate().map(|(i, s)| (i as u32, s.as_str()))
    }

    /// Writes `dense_id<TAB>raw_id` lines.
    pub fn write_mapping<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (id, name) in self.iter() {
            writeln!(out, "{id}\t{name}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub skill_id: SkillId,
    pub correct: bool,
    pub position: usize,
}

impl InteractionRecord {
    pub fn label(&self) -> f64 {
        if self.correct {
            1.0
        } else {
            0.0
        }
    }
}

/// One student's interactions in answer order.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentSequence {
    pub user_id: UserId,
    pub records: Vec<InteractionRecord>,
}

impl StudentSequence {
    /// Builds a sequence from `(item, skill, correct)` triples, assigning
    /// consecutive positions.
    pub fn from_triples(user_id: UserId, triples: impl IntoIterator<Item = (ItemId, SkillId, bool)>) -> Self {
        let records = triples
            .into_iter()
            .enumerate()
            .map(|(position, (item_id, skill_id, correct))| InteractionRecord {
                user_id,
                item_id,
                skill_id,
                correct,
                position,
            })
            .collect();
        StudentSequence { user_id, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = bool> + '_ {
        self.records.iter().map(|r| r.correct)
    }

    fn is_degenerate(&self) -> bool {
        let any_correct = self.records.iter().any(|r| r.correct);
        let any_wrong = self.records.iter().any(|r| !r.correct);
        !(any_correct && any_wrong)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub sequences: Vec<StudentSequence>,
    pub users: Vocab,
    pub items: Vocab,
    pub skills: Vocab,
}

impl Dataset {
    pub fn n_records(&self) -> usize {
        self.sequences.iter().map(StudentSequence::len).sum()
    }

    pub fn n_skills(&self) -> usize {
        self.skills.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn records(&self) -> impl Iterator<Item = &InteractionRecord> {
        self.sequences.iter().flat_map(|s| s.records.iter())
    }

    pub fn correct_rate(&self) -> Option<f64> {
        let n = self.n_records();
        if n == 0 {
            return None;
        }
        Some(self.records().filter(|r| r.correct).count() as f64 / n as f64)
    }

    pub fn user_name(&self, id: UserId) -> &str {
        self.users.name(id.0).unwrap_or("?")
    }

    /// Raw ids of the users present in this dataset.
    pub fn user_names(&self) -> Vec<String> {
        self.sequences
            .iter()
            .map(|s| self.user_name(s.user_id).to_string())
            .collect()
    }

    /// Skill and item ids that actually occur in the records.
    pub fn observed_ids(&self) -> (HashSet<ItemId>, HashSet<SkillId>) {
        let mut items = HashSet::new();
        let mut skills = HashSet::new();
        for r in self.records() {
            items.insert(r.item_id);
            skills.insert(r.skill_id);
        }
        (items, skills)
    }

    fn with_sequences(&self, sequences: Vec<StudentSequence>) -> Dataset {
        Dataset {
            name: self.name.clone(),
            sequences,
            users: self.users.clone(),
            items: self.items.clone(),
            skills: self.skills.clone(),
        }
    }

    /// Writes the dense-id mappings next to exported artifacts.
    pub fn write_id_mappings(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        self.users.write_mapping(fs::File::create(dir.join("user_ids.tsv"))?)?;
        self.items.write_mapping(fs::File::create(dir.join("item_ids.tsv"))?)?;
        self.skills
            .write_mapping(fs::File::create(dir.join("skill_ids.tsv"))?)?;
        Ok(())
    }
}

fn default_delimiter() -> char {
    ','
}
fn default_user() -> String {
    "user_id".into()
}
fn default_item() -> String {
    "item_id".into()
}
fn default_skill() -> String {
    "skill_id".into()
}
fn default_correct() -> String {
    "correct".into()
}

/// Which header names hold which field.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnMapping {
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_user")]
    pub user: String,
    #[serde(default = "default_item")]
    pub item: String,
    #[serde(default = "default_skill")]
    pub skill: String,
    #[serde(default = "default_correct")]
    pub correct: String,
    #[serde(default)]
    pub timestamp: Option<String>,
    /// Separator for items tagged with several skills; the lowest id wins.
    #[serde(default)]
    pub multi_skill_separator: Option<char>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            delimiter: default_delimiter(),
            user: default_user(),
            item: default_item(),
            skill: default_skill(),
            correct: default_correct(),
            timestamp: None,
            multi_skill_separator: None,
        }
    }
}

fn parse_correct(raw: &str, row: u64) -> Result<bool> {
    match raw {
        "1" | "1.0" => Ok(true),
        "0" | "0.0" => Ok(false),
        _ => Err(DatasetError::BadCorrect {
            row,
            value: raw.to_string(),
        }),
    }
}

fn pick_skill(raw: &str, sep: Option<char>) -> &str {
    let Some(sep) = sep else { return raw };
    if !raw.contains(sep) {
        return raw;
    }
    let parts: Vec<&str> = raw.split(sep).map(str::trim).filter(|s| !s.is_empty()).collect();
    let numeric: Option<Vec<i64>> = parts.iter().map(|p| p.parse::<i64>().ok()).collect();
    match numeric {
        Some(nums) => {
            let (idx, _) = nums
                .iter()
                .enumerate()
                .min_by_key(|(_, v)| **v)
                .expect("split of a non-empty field");
            parts[idx]
        }
        None => parts.iter().min().copied().unwrap_or(raw),
    }
}

/// Reads a delimiter-separated interaction log.
///
/// Records are grouped per user in file order (or by timestamp when a
/// timestamp column is mapped). Row numbers in errors are 1-based and count
/// the header as row 1.
pub fn load_interactions(path: &Path, mapping: &ColumnMapping) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_interactions(&name, text.as_bytes(), mapping)
}

pub fn parse_interactions(name: &str, input: &[u8], mapping: &ColumnMapping) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(mapping.delimiter as u8)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| DatasetError::Csv {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(DatasetError::Empty);
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let user_col = col(&mapping.user)?;
    let item_col = col(&mapping.item)?;
    let skill_col = col(&mapping.skill)?;
    let correct_col = col(&mapping.correct)?;
    let ts_col = mapping.timestamp.as_deref().map(col).transpose()?;

    let mut users = Vocab::default();
    let mut items = Vocab::default();
    let mut skills = Vocab::default();
    let mut grouped: IndexMap<u32, Vec<(f64, ItemId, SkillId, bool)>> = IndexMap::new();

    for (i, rec) in reader.records().enumerate() {
        let row = i as u64 + 2;
        let rec = rec.map_err(|e| DatasetError::Csv {
            row,
            message: e.to_string(),
        })?;
        let field = |idx: usize, column: &str| -> Result<&str> {
            match rec.get(idx) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(DatasetError::EmptyValue {
                    row,
                    column: column.to_string(),
                }),
            }
        };
        let user = field(user_col, &mapping.user)?;
        let item = field(item_col, &mapping.item)?;
        let skill = pick_skill(field(skill_col, &mapping.skill)?, mapping.multi_skill_separator);
        let correct = parse_correct(field(correct_col, &mapping.correct)?, row)?;
        let ts = match ts_col {
            Some(c) => {
                let raw = field(c, "timestamp")?;
                raw.parse::<f64>().map_err(|_| DatasetError::BadTimestamp {
                    row,
                    value: raw.to_string(),
                })?
            }
            None => 0.0,
        };
        let uid = users.intern(user);
        let item = ItemId(items.intern(item));
        let skill = SkillId(skills.intern(skill));
        grouped.entry(uid).or_default().push((ts, item, skill, correct));
    }
    if grouped.is_empty() {
        return Err(DatasetError::Empty);
    }

    let sequences = grouped
        .into_iter()
        .map(|(uid, mut rows)| {
            if ts_col.is_some() {
                // stable: equal timestamps keep file order
                rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            }
            StudentSequence::from_triples(UserId(uid), rows.into_iter().map(|(_, it, sk, c)| (it, sk, c)))
        })
        .collect();

    Ok(Dataset {
        name: name.to_string(),
        sequences,
        users,
        items,
        skills,
    })
}

/// Counts from [`filter_degenerate_students`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub students_before: usize,
    pub students_removed: usize,
    pub removed_fraction: f64,
    #[serde(skip)]
    pub removed_users: Vec<String>,
}

impl FilterReport {
    /// `key=value` lines for the run log.
    pub fn log_lines(&self) -> String {
        format!(
            "filter.students_before={}\nfilter.students_removed={}\nfilter.removed_fraction={:.6}\n",
            self.students_before, self.students_removed, self.removed_fraction
        )
    }
}

/// Drops every student whose answers are all correct or all wrong.
pub fn filter_degenerate_students(d: &Dataset) -> Result<(Dataset, FilterReport)> {
    if d.sequences.is_empty() {
        return Err(DatasetError::Empty);
    }
    let (removed, kept): (Vec<&StudentSequence>, Vec<&StudentSequence>) =
        d.sequences.iter().partition(|s| s.is_degenerate());
    if kept.is_empty() {
        return Err(DatasetError::AllDegenerate);
    }
    let report = FilterReport {
        students_before: d.sequences.len(),
        students_removed: removed.len(),
        removed_fraction: removed.len() as f64 / d.sequences.len() as f64,
        removed_users: removed.iter().map(|s| d.user_name(s.user_id).to_string()).collect(),
    };
    let filtered = d.with_sequences(kept.into_iter().cloned().collect());
    Ok((filtered, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SplitSpec {
    External {
        train_users: Vec<String>,
        test_users: Vec<String>,
    },
    SeededUserSplit {
        train_fraction: f64,
        seed: u64,
    },
}

fn read_user_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

impl SplitSpec {
    /// Reads two files holding one user id per line.
    pub fn from_files(train: &Path, test: &Path) -> Result<SplitSpec> {
        Ok(SplitSpec::External {
            train_users: read_user_list(train)?,
            test_users: read_user_list(test)?,
        })
    }

    /// Drops users that were removed upstream (e.g. by filtering) from an
    /// external split. Seeded splits are returned unchanged.
    pub fn without_users(&self, removed: &[String]) -> SplitSpec {
        match self {
            SplitSpec::External {
                train_users,
                test_users,
            } => {
                let removed: HashSet<&str> = removed.iter().map(String::as_str).collect();
                let keep = |v: &Vec<String>| v.iter().filter(|u| !removed.contains(u.as_str())).cloned().collect();
                SplitSpec::External {
                    train_users: keep(train_users),
                    test_users: keep(test_users),
                }
            }
            other => other.clone(),
        }
    }

    pub fn write_files(train: &[String], test: &[String], dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("train_users.txt"), train.join("\n") + "\n")?;
        fs::write(dir.join("test_users.txt"), test.join("\n") + "\n")?;
        Ok(())
    }
}

/// Partitions users into train and test halves.
///
/// External splits use the listed users only; users of `d` that neither list
/// mentions are left out of both halves. Seeded splits sort user ids before
/// shuffling, so the partition does not depend on input order.
pub fn apply_split(d: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train_names, test_names): (HashSet<String>, HashSet<String>) = match spec {
        SplitSpec::External {
            train_users,
            test_users,
        } => {
            let present: HashSet<&str> = d.sequences.iter().map(|s| d.user_name(s.user_id)).collect();
            for u in train_users.iter().chain(test_users) {
                if !present.contains(u.as_str()) {
                    return Err(DatasetError::UnknownUser(u.clone()));
                }
            }
            let train: HashSet<String> = train_users.iter().cloned().collect();
            let test: HashSet<String> = test_users.iter().cloned().collect();
            if let Some(u) = train.intersection(&test).next() {
                return Err(DatasetError::OverlappingSplit(u.clone()));
            }
            (train, test)
        }
        SplitSpec::SeededUserSplit { train_fraction, seed } => {
            if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
                return Err(DatasetError::BadFraction(*train_fraction));
            }
            let mut names = d.user_names();
            names.sort();
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            names.shuffle(&mut rng);
            let n_train = (names.len() as f64 * train_fraction).round() as usize;
            let test = names.split_off(n_train.min(names.len()));
            (names.into_iter().collect(), test.into_iter().collect())
        }
    };

    let pick = |set: &HashSet<String>| -> Vec<StudentSequence> {
        d.sequences
            .iter()
            .filter(|s| set.contains(d.user_name(s.user_id)))
            .cloned()
            .collect()
    };
    let train = pick(&train_names);
    let test = pick(&test_names);
    if train.is_empty() {
        return Err(DatasetError::EmptySplit("train"));
    }
    if test.is_empty() {
        return Err(DatasetError::EmptySplit("test"));
    }
    Ok((d.with_sequences(train), d.with_sequences(test)))
}

/// How synthetic students pick the skill of each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkillSampling {
    /// Every step draws uniformly from all skills.
    Uniform,
    /// Each student draws this many distinct skills up front, then each step
    /// draws uniformly among them.
    PerStudent(usize),
}

/// Samples students from the BKT generative process.
///
/// Skill `k` of `params` becomes dense skill id `i` where `i` is its rank in
/// key order; each skill has one item with the same raw id.
pub fn generate_synthetic(
    params: &BTreeMap<u32, BktParams>,
    n_students: usize,
    seq_len: usize,
    sampling: SkillSampling,
    seed: u64,
) -> Result<Dataset> {
    if params.is_empty() {
        return Err(DatasetError::InvalidSynthetic("no skills given".into()));
    }
    if n_students == 0 || seq_len == 0 {
        return Err(DatasetError::InvalidSynthetic(
            "n_students and seq_len must be at least 1".into(),
        ));
    }
    for (k, p) in params {
        p.validate()
            .map_err(|e| DatasetError::InvalidSynthetic(format!("skill {k}: {e}")))?;
    }
    if let SkillSampling::PerStudent(n) = sampling {
        if n == 0 || n > params.len() {
            return Err(DatasetError::InvalidSynthetic(format!(
                "cannot draw {n} skills per student from {}",
                params.len()
            )));
        }
    }

    let mut skills = Vocab::default();
    let mut items = Vocab::default();
    let skill_params: Vec<BktParams> = params
        .iter()
        .map(|(k, p)| {
            skills.intern(&k.to_string());
            items.intern(&k.to_string());
            *p
        })
        .collect();
    let mut users = Vocab::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..skill_params.len()).collect();

    let mut sequences = Vec::with_capacity(n_students);
    for s in 0..n_students {
        let uid = UserId(users.intern(&format!("u{s:05}")));
        let pool: Vec<usize> = match sampling {
            SkillSampling::Uniform => all.clone(),
            SkillSampling::PerStudent(n) => {
                let mut v = all.clone();
                v.shuffle(&mut rng);
                v.truncate(n);
                v
            }
        };
        let mut known: Vec<bool> = skill_params.iter().map(|p| rng.random::<f64>() < p.p_init).collect();
        let mut triples = Vec::with_capacity(seq_len);
        for _ in 0..seq_len {
            let k = pool[rng.random_range(0..pool.len())];
            let p = &skill_params[k];
            let u: f64 = rng.random();
            let correct = if known[k] { u >= p.p_slip } else { u < p.p_guess };
            if !known[k] && rng.random::<f64>() < p.p_learn {
                known[k] = true;
            }
            triples.push((ItemId(k as u32), SkillId(k as u32), correct));
        }
        sequences.push(StudentSequence::from_triples(uid, triples));
    }

    Ok(Dataset {
        name: "synthetic".into(),
        sequences,
        users,
        items,
        skills,
    })
}

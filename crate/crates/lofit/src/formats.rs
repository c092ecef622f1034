// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON and JSONL artifacts: intervention and head-set files, datasets,
//! preference pairs and training logs, plus SHA-256 content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use lofit_core::localize::HeadScoreTable;
use lofit_core::tasks::ExampleMeta;
use lofit_core::{HeadId, InterventionSet, ModelConfig, PreferencePair, StepRecord, TaskExample, TaskKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Creates parent directories as needed.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Json { path: path.into(), source: e })?;
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

/// Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

// --------------------------------------------------------------------------
// Intervention file
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionTarget {
    pub layer: usize,
    pub head: usize,
    pub offset: Vec<f32>,
}

/// `{alpha, targets: [{layer, head, offset}]}`, targets in `(layer, head)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionFile {
    pub alpha: f32,
    pub targets: Vec<InterventionTarget>,
}

impl InterventionFile {
    pub fn from_set(set: &InterventionSet) -> Self {
        let targets = set
            .offsets()
            .iter()
            .map(|(h, v)| InterventionTarget { layer: h.layer, head: h.head, offset: v.clone() })
            .collect();
        Self { alpha: set.alpha, targets }
    }

    pub fn to_set(&self) -> Result<InterventionSet> {
        let mut offsets = BTreeMap::new();
        for t in &self.targets {
            if offsets.insert(HeadId::new(t.layer, t.head), t.offset.clone()).is_some() {
                return Err(Error::Config(format!("intervention lists head ({}, {}) twice", t.layer, t.head)));
            }
        }
        Ok(InterventionSet::new(offsets, self.alpha)?)
    }

    pub fn load(path: &Path) -> Result<InterventionSet> {
        read_json::<Self>(path)?.to_set()
    }
}

// --------------------------------------------------------------------------
// Head-set file
// --------------------------------------------------------------------------

/// Score-map key for a head, e.g. `"2.5"` for layer 2, head 5.
pub fn head_key(h: HeadId) -> String {
    format!("{}.{}", h.layer, h.head)
}

pub fn parse_head_key(key: &str) -> Option<HeadId> {
    let (l, h) = key.split_once('.')?;
    Some(HeadId::new(l.parse().ok()?, h.parse().ok()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSetFile {
    pub method: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda: f32,
    pub seed: u64,
    /// Initialization scale of the scaling factors; lofit selection only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_a: Option<f32>,
    /// Task the heads were selected on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub heads: Vec<[usize; 2]>,
    pub scores: BTreeMap<String, f64>,
}

impl HeadSetFile {
    pub fn new(heads: &[HeadId], table: Option<&HeadScoreTable>, method: &str, lambda: f32, seed: u64) -> Self {
        let scores = table.map(|t| t.scores.iter().map(|(&h, &s)| (head_key(h), s)).collect()).unwrap_or_default();
        Self {
            method: method.to_string(),
            k: heads.len(),
            lambda,
            seed,
            sigma_a: None,
            task: None,
            heads: heads.iter().map(|h| [h.layer, h.head]).collect(),
            scores,
        }
    }

    pub fn head_ids(&self) -> Vec<HeadId> {
        self.heads.iter().map(|&[l, h]| HeadId::new(l, h)).collect()
    }

    /// Checks `K`, duplicates and that every head exists in `config`.
    pub fn validate_for(&self, config: &ModelConfig, path: &Path) -> Result<()> {
        if self.heads.len() != self.k {
            return Err(Error::format(path, format!("K = {} but {} heads are listed", self.k, self.heads.len())));
        }
        let mut seen = std::collections::BTreeSet::new();
        for h in self.head_ids() {
            config
                .check_head(h)
                .map_err(|e| Error::format(path, format!("head set does not fit the model: {e}")))?;
            if !seen.insert(h) {
                return Err(Error::format(path, format!("head ({}, {}) listed twice", h.layer, h.head)));
            }
        }
        for key in self.scores.keys() {
            let ok = parse_head_key(key).is_some_and(|h| config.check_head(h).is_ok());
            if !ok {
                return Err(Error::format(path, format!("score key {key:?} is not a head of the model")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self> {
        let file: Self = read_json(path)?;
        file.validate_for(config, path)?;
        Ok(file)
    }
}

// --------------------------------------------------------------------------
// Datasets, preferences and logs
// --------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub task: String,
    pub hop: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub prompt: Vec<usize>,
    pub gold: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negatives: Option<Vec<Vec<usize>>>,
    pub meta: MetaRecord,
}

impl From<&TaskExample> for ExampleRecord {
    fn from(e: &TaskExample) -> Self {
        Self {
            prompt: e.prompt.clone(),
            gold: e.gold.clone(),
            negatives: (!e.negatives.is_empty()).then(|| e.negatives.clone()),
            meta: MetaRecord { task: e.meta.task.name().to_string(), hop: e.meta.hop, seed: e.meta.seed },
        }
    }
}

impl ExampleRecord {
    pub fn to_example(&self) -> Result<TaskExample> {
        let task: TaskKind = self.meta.task.parse()?;
        let e = TaskExample {
            prompt: self.prompt.clone(),
            gold: self.gold.clone(),
            negatives: self.negatives.clone().unwrap_or_default(),
            meta: ExampleMeta { task, hop: self.meta.hop, seed: self.meta.seed },
        };
        e.validate()?;
        Ok(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

impl From<&PreferencePair> for PreferenceRecord {
    fn from(p: &PreferencePair) -> Self {
        Self { prompt: p.prompt.clone(), chosen: p.chosen.clone(), rejected: p.rejected.clone() }
    }
}

impl From<PreferenceRecord> for PreferencePair {
    fn from(p: PreferenceRecord) -> Self {
        Self { prompt: p.prompt, chosen: p.chosen, rejected: p.rejected }
    }
}

pub fn write_dataset(path: &Path, examples: &[TaskExample]) -> Result<()> {
    let recs: Vec<ExampleRecord> = examples.iter().map(ExampleRecord::from).collect();
    write_jsonl(path, &recs)
}

pub fn read_dataset(path: &Path) -> Result<Vec<TaskExample>> {
    read_jsonl::<ExampleRecord>(path)?
        .iter()
        .map(|r| r.to_example().map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

pub fn write_preferences(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let recs: Vec<PreferenceRecord> = pairs.iter().map(PreferenceRecord::from).collect();
    write_jsonl(path, &recs)
}

pub fn read_preferences(path: &Path) -> Result<Vec<PreferencePair>> {
    Ok(read_jsonl::<PreferenceRecord>(path)?.into_iter().map(PreferencePair::from).collect())
}

/// One optimizer step: `{step, epoch, loss, l1_penalty, lr}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f32,
    pub l1_penalty: f32,
    pub lr: f32,
}

impl From<&StepRecord> for LogRecord {
    fn from(r: &StepRecord) -> Self {
        Self { step: r.step, epoch: r.epoch, loss: r.loss, l1_penalty: r.l1_penalty, lr: r.lr }
    }
}

/// Append-only training log.
pub struct TrainingLog {
    path: std::path::PathBuf,
    file: fs::File,
}

impl TrainingLog {
    /// Truncates any existing log at `path`.
    pub fn create(path: &Path) -> Result<Self> {
        write_bytes(path, b"")?;
        let file = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.into(), file })
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        let mut line = serde_json::to_vec(&LogRecord::from(r)).map_err(|e| Error::Json { path: self.path.clone(), source: e })?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))
    }
}

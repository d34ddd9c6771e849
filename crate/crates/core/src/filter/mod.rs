//! Similarity-threshold filtering of caption manifests.
//!
//! A manifest is JSONL, one [`CaptionRecord`] per line. Records are scored by
//! a pluggable [`Scorer`] (audio-text similarity in `[-1, 1]`) and then split
//! at a threshold: records scoring at least `tau` are kept.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::parallel::{try_map_indexed, Exec};
use crate::{Error, Result};

/// Where a caption came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    AutoAcd,
    AsQwenCaps,
    AsSlGpt4Caps,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub id: String,
    pub caption: String,
    pub source: CaptionSource,
    /// Absent until scored; never serialised as `null`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Deterministic audio-caption similarity.
pub trait Scorer: Sync {
    fn score(&self, id: &str, caption: &str) -> Result<f64>;
}

/// Hash-based stand-in for a pretrained similarity model.
///
/// The score is the first 53 bits of `sha256(id || 0x00 || caption)` mapped
/// uniformly onto `[-1, 1)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockScorer;

impl Scorer for MockScorer {
    fn score(&self, id: &str, caption: &str) -> Result<f64> {
        let mut h = Sha256::new();
        h.update(id.as_bytes());
        h.update([0u8]);
        h.update(caption.as_bytes());
        let digest = h.finalize();
        let bits = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes")) >> 11;
        Ok(2.0 * (bits as f64 / (1u64 << 53) as f64) - 1.0)
    }
}

/// Same score for everything.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score(&self, _id: &str, _caption: &str) -> Result<f64> {
        Ok(self.0)
    }
}

/// Scores computed elsewhere, loaded from a JSON object `{"<id>": score, ...}`.
#[derive(Debug, Clone, Default)]
pub struct FileScorer {
    scores: BTreeMap<String, f64>,
}

impl FileScorer {
    pub fn new(scores: BTreeMap<String, f64>) -> Self {
        Self { scores }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::new(serde_json::from_str(&text)?))
    }
}

impl Scorer for FileScorer {
    fn score(&self, id: &str, _caption: &str) -> Result<f64> {
        self.scores
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("score file has no entry for record `{id}`")))
    }
}

fn check_threshold(tau: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("threshold {tau} outside [-1, 1]")));
    }
    Ok(())
}

/// Returns `records` with every score (re)computed by `scorer`, in input order.
pub fn score_manifest(records: &[CaptionRecord], scorer: &dyn Scorer, exec: Exec) -> Result<Vec<CaptionRecord>> {
    try_map_indexed(exec, records.len(), |i| {
        let r = &records[i];
        let score = scorer.score(&r.id, &r.caption)?;
        if !(-1.0..=1.0).contains(&score) {
            return Err(Error::ScoreOutOfRange { id: r.id.clone(), score });
        }
        Ok(CaptionRecord {
            score: Some(score),
            ..r.clone()
        })
    })
}

/// Splits scored records into `(kept, dropped)`; a record is kept when `score >= tau`.
pub fn filter_threshold(records: &[CaptionRecord], tau: f64) -> Result<(Vec<CaptionRecord>, Vec<CaptionRecord>)> {
    check_threshold(tau)?;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for r in records {
        let s = r.score.ok_or_else(|| Error::Unscored(r.id.clone()))?;
        if s >= tau {
            kept.push(r.clone());
        } else {
            dropped.push(r.clone());
        }
    }
    Ok((kept, dropped))
}

/// Parses a JSONL manifest. Blank lines are ignored; line numbers in errors are 1-based.
pub fn read_manifest(reader: impl BufRead) -> Result<Vec<CaptionRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: CaptionRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(r.id.clone()) {
            return Err(Error::Manifest {
                line: i + 1,
                message: format!("duplicate id `{}`", r.id),
            });
        }
        records.push(r);
    }
    Ok(records)
}

pub fn write_manifest(mut writer: impl Write, records: &[CaptionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    read_manifest(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_manifest(path: impl AsRef<Path>, records: &[CaptionRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_manifest(&mut w, records)?;
    w.flush()?;
    Ok(())
}

//! The token-record schema and its JSONL reader/writer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::TokenLossResult;
use crate::probstats::{NormMode, TokenDistribution};
use crate::toylm::{forward, Corpus, ToyModelParams};

/// One scored token. Field names are the JSONL wire names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub source_id: String,
    pub position: u64,
    pub token_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_text: Option<String>,
    pub p_target: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_full: Option<f64>,
    pub entropy_topk: f64,
    pub gate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
}

fn unit(name: &str, v: f64) -> Result<(), String> {
    if v.is_finite() && (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(format!("{name} = {v} outside [0, 1]"))
    }
}

fn non_negative(name: &str, v: f64) -> Result<(), String> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(format!("{name} = {v} must be finite and >= 0"))
    }
}

impl TokenRecord {
    /// Record for a scored distribution; no objective applied.
    pub fn from_distribution(source_id: String, position: usize, dist: &TokenDistribution) -> Self {
        Self {
            source_id,
            position: position as u64,
            token_id: dist.target_id as u64,
            token_text: None,
            p_target: dist.p_target,
            entropy_full: Some(dist.entropy_full),
            entropy_topk: dist.entropy_topk,
            gate: dist.gate,
            weight: None,
            grad_norm: None,
            step: None,
        }
    }

    /// Record for one objective evaluation, including the applied weight and gradient norm.
    pub fn from_loss(source_id: String, position: usize, res: &TokenLossResult, step: Option<u64>) -> Self {
        Self {
            weight: Some(res.weight),
            grad_norm: Some(res.grad_norm),
            step,
            ..Self::from_distribution(source_id, position, &res.stats)
        }
    }

    /// Cross-entropy `−ln p_target`.
    pub fn cross_entropy(&self) -> f64 {
        -self.p_target.ln()
    }

    pub fn validate(&self) -> Result<(), String> {
        unit("p_target", self.p_target)?;
        unit("gate", self.gate)?;
        if let Some(w) = self.weight {
            unit("weight", w)?;
        }
        non_negative("entropy_topk", self.entropy_topk)?;
        if let Some(h) = self.entropy_full {
            non_negative("entropy_full", h)?;
        }
        if let Some(g) = self.grad_norm {
            non_negative("grad_norm", g)?;
        }
        Ok(())
    }
}

/// Parses and validates JSONL records. Unknown fields are ignored; blank lines skipped.
pub fn read_records(reader: impl BufRead) -> Result<Vec<TokenRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TokenRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        rec.validate().map_err(|message| Error::Validation { line: i + 1, message })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn ingest_records(path: &Path) -> Result<Vec<TokenRecord>> {
    read_records(BufReader::new(File::open(path)?))
}

pub fn write_records(records: &[TokenRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_records_jsonl(records: &[TokenRecord], path: &Path) -> Result<()> {
    write_records(records, BufWriter::new(File::create(path)?))
}

/// Scores every predicted position of `corpus`, sequence-major.
pub fn score_corpus(params: &ToyModelParams, corpus: &Corpus, k: usize) -> Result<Vec<TokenRecord>> {
    score_corpus_with(params, corpus, k, NormMode::ExactLn)
}

pub fn score_corpus_with(
    params: &ToyModelParams,
    corpus: &Corpus,
    k: usize,
    norm: NormMode,
) -> Result<Vec<TokenRecord>> {
    let n = params.config.context_len;
    corpus
        .examples(n)
        .iter()
        .map(|ex| {
            let logits = forward(params, &ex.context)?;
            let dist = TokenDistribution::from_logits(&logits, ex.target, k, norm)?;
            Ok(TokenRecord::from_distribution(format!("seq{}", ex.sequence), ex.position, &dist))
        })
        .collect()
}

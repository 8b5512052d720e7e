use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{invalid_arg, Error, Result};

pub type TokenId = usize;

/// A set of token sequences.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub sequences: Vec<Vec<TokenId>>,
}

/// One `(context, target)` training pair with its provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub sequence: usize,
    pub position: usize,
    pub context: Vec<TokenId>,
    pub target: TokenId,
}

impl Corpus {
    pub fn new(sequences: Vec<Vec<TokenId>>) -> Self {
        Self { sequences }
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    /// Number of predicted positions for a model with the given context length.
    pub fn num_positions(&self, context_len: usize) -> usize {
        self.sequences.iter().map(|s| s.len().saturating_sub(context_len)).sum()
    }

    /// Every position `t ≥ context_len`, sequence-major.
    pub fn examples(&self, context_len: usize) -> Vec<Example> {
        let mut out = Vec::with_capacity(self.num_positions(context_len));
        for (si, seq) in self.sequences.iter().enumerate() {
            for t in context_len..seq.len() {
                out.push(Example {
                    sequence: si,
                    position: t,
                    context: seq[t - context_len..t].to_vec(),
                    target: seq[t],
                });
            }
        }
        out
    }

    pub fn max_token(&self) -> Option<TokenId> {
        self.sequences.iter().flatten().copied().max()
    }

    /// Reads one JSON array of token ids per line; blank lines are skipped.
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut sequences = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let seq: Vec<TokenId> =
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
            sequences.push(seq);
        }
        Ok(Self { sequences })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for seq in &self.sequences {
            serde_json::to_writer(&mut w, seq)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.max_token() {
            Some(t) if t >= vocab_size => {
                Err(invalid_arg(format!("corpus token {t} out of range for vocab {vocab_size}")))
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples_are_sequence_major() {
        let c = Corpus::new(vec![vec![1, 2, 3, 4], vec![5, 6], vec![7, 8, 9]]);
        let ex = c.examples(2);
        assert_eq!(ex.len(), c.num_positions(2));
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[0], Example { sequence: 0, position: 2, context: vec![1, 2], target: 3 });
        assert_eq!(ex[2].sequence, 2);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let c = Corpus::new(vec![vec![0, 1, 2], vec![3]]);
        c.write_jsonl(&path).unwrap();
        assert_eq!(Corpus::read_jsonl(&path).unwrap(), c);
        std::fs::write(&path, "[1,2]\n[x]\n").unwrap();
        assert!(matches!(Corpus::read_jsonl(&path), Err(Error::Parse { line: 2, .. })));
    }
}

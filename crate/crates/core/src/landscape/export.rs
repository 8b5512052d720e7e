//! CSV tables. Reals are written with 17 significant digits so every `f64` parses back exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::dynamics::DynamicsRow;
use super::fidelity::FidelityRow;
use super::histogram::Histogram2D;
use super::quadrant::{Quadrant, QuadrantStats, RankingRow};
use super::records::TokenRecord;
use crate::error::{Error, Result};

pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn fmt_opt_real(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

fn fmt_opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Header plus string cells; empty cells stand for absent values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            out.write_record(r).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("csv: {other:?}")),
    }
}

pub const RECORD_COLUMNS: [&str; 11] = [
    "source_id",
    "position",
    "token_id",
    "token_text",
    "p_target",
    "entropy_full",
    "entropy_topk",
    "gate",
    "weight",
    "grad_norm",
    "step",
];

pub fn records_table(records: &[TokenRecord]) -> CsvTable {
    let mut t = CsvTable::new(&RECORD_COLUMNS);
    for r in records {
        t.push(vec![
            r.source_id.clone(),
            r.position.to_string(),
            r.token_id.to_string(),
            r.token_text.clone().unwrap_or_default(),
            fmt_real(r.p_target),
            fmt_opt_real(r.entropy_full),
            fmt_real(r.entropy_topk),
            fmt_real(r.gate),
            fmt_opt_real(r.weight),
            fmt_opt_real(r.grad_norm),
            fmt_opt(r.step),
        ]);
    }
    t
}

/// One row per cell, x-major. `overlay_mean` is empty without an overlay or for empty cells.
pub fn histogram_table(h: &Histogram2D) -> CsvTable {
    let mut t = CsvTable::new(&["x_axis", "y_axis", "x_lo", "x_hi", "y_lo", "y_hi", "count", "overlay_mean"]);
    for i in 0..h.counts.len() {
        for j in 0..h.counts[i].len() {
            t.push(vec![
                h.x_axis.name().to_string(),
                h.y_axis.name().to_string(),
                fmt_real(h.x_edges[i]),
                fmt_real(h.x_edges[i + 1]),
                fmt_real(h.y_edges[j]),
                fmt_real(h.y_edges[j + 1]),
                h.counts[i][j].to_string(),
                fmt_opt_real(h.cell_mean(i, j)),
            ]);
        }
    }
    t
}

pub fn quadrants_table(s: &QuadrantStats) -> CsvTable {
    let mut t = CsvTable::new(&["quadrant", "count", "share", "tau_entropy", "tau_prob"]);
    for q in Quadrant::ALL {
        t.push(vec![
            q.name().to_string(),
            s.count(q).to_string(),
            fmt_real(s.share(q)),
            fmt_real(s.thresholds.tau_entropy),
            fmt_real(s.thresholds.tau_prob),
        ]);
    }
    t
}

pub fn ranking_table(quadrant: Quadrant, rows: &[RankingRow]) -> CsvTable {
    let mut t = CsvTable::new(&["quadrant", "rank", "token_id", "token_text", "count", "mean_gate"]);
    for (i, r) in rows.iter().enumerate() {
        t.push(vec![
            quadrant.name().to_string(),
            (i + 1).to_string(),
            r.token_id.to_string(),
            r.token_text.clone().unwrap_or_default(),
            r.count.to_string(),
            fmt_real(r.mean_gate),
        ]);
    }
    t
}

pub fn fidelity_table(rows: &[FidelityRow]) -> CsvTable {
    let mut t = CsvTable::new(&["k", "pearson_r", "extra_bytes_per_token"]);
    for r in rows {
        t.push(vec![r.k.to_string(), fmt_opt_real(r.pearson_r), r.extra_bytes_per_token.to_string()]);
    }
    t
}

pub fn dynamics_table(rows: &[DynamicsRow]) -> CsvTable {
    let mut t = CsvTable::new(&["step", "high_mean_ce", "high_count", "low_mean_ce", "low_count"]);
    for r in rows {
        t.push(vec![
            r.step.to_string(),
            fmt_opt_real(r.high_mean_ce),
            r.high_count.to_string(),
            fmt_opt_real(r.low_mean_ce),
            r.low_count.to_string(),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_input_is_header_only() {
        let bytes = records_table(&[]).to_bytes().unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), format!("{}\n", RECORD_COLUMNS.join(",")));
    }

    #[test]
    fn absent_values_are_empty_and_text_is_quoted() {
        let r = TokenRecord {
            source_id: "a,b".into(),
            position: 1,
            token_id: 2,
            token_text: Some("say \"hi\"".into()),
            p_target: 0.5,
            entropy_full: None,
            entropy_topk: 0.25,
            gate: 0.125,
            weight: None,
            grad_norm: None,
            step: None,
        };
        let s = String::from_utf8(records_table(&[r]).to_bytes().unwrap()).unwrap();
        let line = s.lines().nth(1).unwrap();
        assert!(line.starts_with("\"a,b\",1,2,\"say \"\"hi\"\"\",5.0000000000000000e-1,,"));
        assert!(line.ends_with(",,,"));
    }

    #[test]
    fn extreme_values_round_trip() {
        for x in [f64::MAX, f64::MIN_POSITIVE, 5e-324, 0.1 + 0.2, -1.0 / 3.0, 0.0] {
            assert_eq!(fmt_real(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    proptest! {
        #[test]
        fn real_rendering_round_trips(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            prop_assert_eq!(fmt_real(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }
}

//! Per-round traces, their summary table, and the comparison table built
//! from several runs.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::domain::ClientId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientTrace {
    pub id: ClientId,
    /// Trust after the round closed.
    pub trust: f64,
    /// Expelled clients keep appearing with their final trust.
    #[serde(default)]
    pub expelled: bool,
    pub deployed: bool,
    pub delivered: bool,
    pub probed: bool,
    /// Ground truth from the scenario, never visible to the orchestrators.
    pub malicious: bool,
    pub tr1: Option<f64>,
    pub tr2_norm: Option<f64>,
    pub tr3_norm: Option<f64>,
    pub tr4_norm: Option<f64>,
    pub local_accuracy: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: u32,
    pub selected_ids: Vec<ClientId>,
    pub received: usize,
    pub dismissed: bool,
    pub dismiss_cause: Option<String>,
    /// Accuracy of the global model on the evaluation set after the round.
    pub global_accuracy: f64,
    pub requested_areas: Vec<usize>,
    pub per_client: Vec<ClientTrace>,
}

impl RoundTrace {
    fn mean_trust(&self, malicious: bool) -> Option<f64> {
        let v: Vec<f64> = self.per_client.iter().filter(|c| c.malicious == malicious).map(|c| c.trust).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub round: u32,
    pub global_accuracy: f64,
    pub mean_trust_honest: Option<f64>,
    pub mean_trust_malicious: Option<f64>,
    pub selected_count: usize,
    pub dismissed: bool,
}

pub fn summarize(traces: &[RoundTrace]) -> Vec<SummaryRow> {
    traces
        .iter()
        .map(|t| SummaryRow {
            round: t.round,
            global_accuracy: t.global_accuracy,
            mean_trust_honest: t.mean_trust(false),
            mean_trust_malicious: t.mean_trust(true),
            selected_count: t.selected_ids.len(),
            dismissed: t.dismissed,
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_summary_csv<R: Read>(r: R) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// One JSON document per line.
pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: Read, T: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedRow { line: i as u64 + 1, message: e.to_string() })?);
    }
    Ok(out)
}

/// Headline numbers of one run, as used in the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    /// First round whose accuracy reaches 95% of the run's best, if any round ran.
    pub rounds_to_95pct_best: Option<u32>,
    pub dismissed_rounds: usize,
    pub final_trust_honest: Option<f64>,
    pub final_trust_malicious: Option<f64>,
    pub mean_selected: f64,
}

pub fn summarize_run(run: &str, traces: &[RoundTrace]) -> RunSummary {
    let best = traces.iter().map(|t| t.global_accuracy).fold(0.0, f64::max);
    let last = traces.last();
    RunSummary {
        run: run.to_string(),
        rounds: traces.len(),
        final_accuracy: last.map_or(0.0, |t| t.global_accuracy),
        best_accuracy: best,
        rounds_to_95pct_best: traces.iter().find(|t| t.global_accuracy >= 0.95 * best).map(|t| t.round),
        dismissed_rounds: traces.iter().filter(|t| t.dismissed).count(),
        final_trust_honest: last.and_then(|t| t.mean_trust(false)),
        final_trust_malicious: last.and_then(|t| t.mean_trust(true)),
        mean_selected: if traces.is_empty() {
            0.0
        } else {
            traces.iter().map(|t| t.selected_ids.len()).sum::<usize>() as f64 / traces.len() as f64
        },
    }
}

pub fn write_comparison_csv<W: Write>(w: W, rows: &[RunSummary]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn client(id: u32, trust: f64, malicious: bool) -> ClientTrace {
        ClientTrace {
            id: ClientId(id),
            trust,
            expelled: false,
            deployed: false,
            delivered: false,
            probed: false,
            malicious,
            tr1: None,
            tr2_norm: None,
            tr3_norm: None,
            tr4_norm: None,
            local_accuracy: None,
            flagged: false,
        }
    }

    fn round(r: u32, acc: f64, clients: Vec<ClientTrace>) -> RoundTrace {
        RoundTrace {
            round: r,
            selected_ids: vec![ClientId(0)],
            received: 1,
            dismissed: false,
            dismiss_cause: None,
            global_accuracy: acc,
            requested_areas: vec![],
            per_client: clients,
        }
    }

    #[test]
    fn summary_splits_honest_and_malicious() {
        let t = round(1, 0.5, vec![client(0, 0.8, false), client(1, 0.6, false), client(2, 0.1, true)]);
        let s = &summarize(&[t])[0];
        assert!((s.mean_trust_honest.unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(s.mean_trust_malicious, Some(0.1));
    }

    #[test]
    fn summary_csv_leaves_malicious_blank_without_attackers() {
        let rows = summarize(&[round(1, 0.5, vec![client(0, 0.8, false)])]);
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "1,0.5,0.8,,1,false");
        assert_eq!(read_summary_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn jsonl_round_trip() {
        let traces = vec![round(1, 0.3, vec![client(0, 0.5, false)]), round(2, 0.4, vec![])];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &traces).unwrap();
        assert_eq!(buf.iter().filter(|b| **b == b'\n').count(), 2);
        let back: Vec<RoundTrace> = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, traces);
    }

    #[test]
    fn malformed_jsonl_reports_line() {
        let err = read_jsonl::<_, RoundTrace>("\n{\"round\": 1}\n".as_bytes()).unwrap_err();
        assert!(err.to_string().starts_with("malformed-row: line 2"), "{err}");
    }

    #[test]
    fn run_summary_counts_rounds_to_target() {
        let traces: Vec<_> = [0.2, 0.5, 0.78, 0.8].iter().enumerate().map(|(i, a)| round(i as u32 + 1, *a, vec![])).collect();
        let s = summarize_run("x", &traces);
        assert_eq!(s.rounds_to_95pct_best, Some(3));
        assert_eq!(s.final_accuracy, 0.8);
        assert_eq!(s.mean_selected, 1.0);
    }
}

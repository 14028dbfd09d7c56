//! `rounds.csv`: one row per round, fixed columns.

use std::fs::File;
use std::path::Path;

use fedlm_core::aggregator::RoundRecord;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const COLUMNS: [&str; 9] = [
    "round",
    "sampled_ids",
    "mean_client_loss",
    "eval_ppl",
    "t_local_s",
    "t_comm_s",
    "t_agg_s",
    "t_cum_s",
    "bytes_round",
];

/// A row of `rounds.csv`. `sampled_ids` is a `;`-separated list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: u64,
    pub sampled_ids: String,
    pub mean_client_loss: f64,
    pub eval_ppl: f64,
    pub t_local_s: f64,
    pub t_comm_s: f64,
    pub t_agg_s: f64,
    pub t_cum_s: f64,
    pub bytes_round: u64,
}

impl RoundRow {
    pub fn sampled(&self) -> Vec<usize> {
        self.sampled_ids
            .split(';')
            .filter(|s| !s.is_empty())
            .filter_map(|s| s.parse().ok())
            .collect()
    }
}

pub fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

impl From<&RoundRecord> for RoundRow {
    fn from(r: &RoundRecord) -> Self {
        Self {
            round: r.round,
            sampled_ids: join_ids(&r.sampled),
            mean_client_loss: r.mean_client_loss,
            eval_ppl: r.eval_ppl,
            t_local_s: r.t_local_s,
            t_comm_s: r.t_comm_s,
            t_agg_s: r.t_agg_s,
            t_cum_s: r.t_cum_s,
            bytes_round: r.bytes_round,
        }
    }
}

pub fn read_rounds(path: &Path) -> Result<Vec<RoundRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| HarnessError::parse(path, e))?;
    let headers = reader.headers().map_err(|e| HarnessError::parse(path, e))?;
    if headers.iter().ne(COLUMNS) {
        return Err(HarnessError::parse(
            path,
            format!("expected columns {}", COLUMNS.join(",")),
        ));
    }
    reader
        .deserialize()
        .map(|row| row.map_err(|e| HarnessError::parse(path, e)))
        .collect()
}

/// Appends rows to `rounds.csv`, flushing after each one so a crash leaves
/// every completed round on disk.
pub struct RoundsWriter {
    inner: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl RoundsWriter {
    /// Starts a fresh file containing only the header.
    pub fn create(path: &Path) -> Result<Self> {
        Self::with_rows(path, &[])
    }

    /// Rewrites the file with `rows` and leaves it open for appending.
    pub fn with_rows(path: &Path, rows: &[RoundRow]) -> Result<Self> {
        let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        let mut w = Self {
            inner: csv::WriterBuilder::new().has_headers(false).from_writer(file),
            path: path.to_path_buf(),
        };
        w.inner.write_record(COLUMNS).map_err(|e| w.csv_err(e))?;
        for row in rows {
            w.append(row)?;
        }
        w.flush()?;
        Ok(w)
    }

    /// Keeps the rows with `round <= last_round` and reopens for appending.
    pub fn resume(path: &Path, last_round: u64) -> Result<Self> {
        let rows: Vec<RoundRow> = read_rounds(path)?
            .into_iter()
            .filter(|r| r.round <= last_round)
            .collect();
        if rows.len() as u64 != last_round {
            return Err(HarnessError::parse(
                path,
                format!("{} rows recorded for a checkpoint at round {last_round}", rows.len()),
            ));
        }
        Self::with_rows(path, &rows)
    }

    pub fn append(&mut self, row: &RoundRow) -> Result<()> {
        self.inner.serialize(row).map_err(|e| self.csv_err(e))?;
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        let path = self.path.clone();
        self.inner.flush().map_err(|e| HarnessError::io(&path, e))
    }

    fn csv_err(&self, e: csv::Error) -> HarnessError {
        HarnessError::parse(&self.path, e)
    }
}

/// Simulated seconds until the first round whose evaluation perplexity is at
/// or below `target`; `None` if no round gets there.
pub fn time_to_target(path: &Path, target: f64) -> Result<Option<f64>> {
    Ok(first_reaching(&read_rounds(path)?, target).map(|r| r.t_cum_s))
}

pub fn first_reaching(rows: &[RoundRow], target: f64) -> Option<&RoundRow> {
    rows.iter().find(|r| r.eval_ppl <= target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(round: u64, ppl: f64) -> RoundRow {
        RoundRow {
            round,
            sampled_ids: "0;2".into(),
            mean_client_loss: ppl.ln(),
            eval_ppl: ppl,
            t_local_s: 32.0,
            t_comm_s: 0.5,
            t_agg_s: 1e-3,
            t_cum_s: 32.5 * round as f64,
            bytes_round: 1 << 20,
        }
    }

    #[test]
    fn rows_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rounds.csv");
        let mut rows: Vec<RoundRow> = (1..=4).map(|r| row(r, 50.0 / r as f64)).collect();
        rows[2].eval_ppl = 0.1 + 0.2;
        let mut w = RoundsWriter::create(&path).unwrap();
        for r in &rows {
            w.append(r).unwrap();
        }
        drop(w);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&COLUMNS.join(",")));
        let back = read_rounds(&path).unwrap();
        assert_eq!(back, rows);
        assert_eq!(back[0].sampled(), vec![0, 2]);
    }

    #[test]
    fn resume_truncates_to_the_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rounds.csv");
        RoundsWriter::with_rows(&path, &(1..=5).map(|r| row(r, 10.0)).collect::<Vec<_>>()).unwrap();
        let mut w = RoundsWriter::resume(&path, 3).unwrap();
        w.append(&row(4, 9.0)).unwrap();
        let back = read_rounds(&path).unwrap();
        assert_eq!(back.iter().map(|r| r.round).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(back[3].eval_ppl, 9.0);
        assert!(RoundsWriter::resume(&path, 7).is_err());
    }

    #[test]
    fn first_reaching_picks_the_earliest_round() {
        let rows: Vec<RoundRow> = [40.0, 30.0, 20.0, 25.0, 10.0].iter().enumerate().map(|(i, &p)| row(i as u64 + 1, p)).collect();
        assert_eq!(first_reaching(&rows, 22.0).unwrap().round, 3);
        assert_eq!(first_reaching(&rows, 20.0).unwrap().round, 3);
        assert!(first_reaching(&rows, 5.0).is_none());
    }

    proptest! {
        #[test]
        fn any_finite_row_roundtrips_bitwise(
            ids in proptest::collection::vec(0usize..64, 0..8),
            values in proptest::array::uniform6(-1e300f64..1e300),
            round in 1u64..10_000,
            bytes in any::<u64>(),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rounds.csv");
            let row = RoundRow {
                round,
                sampled_ids: join_ids(&ids),
                mean_client_loss: values[0],
                eval_ppl: values[1],
                t_local_s: values[2],
                t_comm_s: values[3],
                t_agg_s: values[4],
                t_cum_s: values[5],
                bytes_round: bytes,
            };
            RoundsWriter::with_rows(&path, std::slice::from_ref(&row)).unwrap();
            let back = read_rounds(&path).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(back[0].sampled(), ids);
            prop_assert_eq!(&back[0], &row);
        }
    }
}

//! CSV rows written by every run kind. Optional cells are left empty.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: u64,
    /// FL run index; a run restarts after `fl.rounds` rounds.
    pub run: u64,
    pub round: usize,
    pub episode_in_round: u64,
    pub reward_total: f64,
    pub reward_convergence: f64,
    pub reward_transmission: f64,
    /// Mean TD loss of the learning steps taken during the episode.
    pub loss_mean: Option<f64>,
    pub learn_steps: u64,
    pub epsilon: f64,
    pub success_rate: f64,
    pub success_count: usize,
    /// Test accuracy after the global update; only on a round's last episode.
    pub accuracy: Option<f64>,
    pub test_loss: Option<f64>,
}

/// One row per FL round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub run: u64,
    pub round: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub success_count: usize,
    /// `1` for each client whose upload completed, in client order.
    pub success_bitmap: String,
    /// No upload completed, so the model was left unchanged.
    pub wasted: bool,
    /// No aggregate existed yet, so the deviations used a zero reference.
    pub zero_reference: bool,
}

impl MetricsRow {
    pub fn check_finite(&self) -> Result<()> {
        let values = [
            Some(self.reward_total),
            Some(self.reward_convergence),
            Some(self.reward_transmission),
            self.loss_mean,
            Some(self.epsilon),
            Some(self.success_rate),
            self.accuracy,
            self.test_loss,
        ];
        if values.iter().flatten().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("metrics row for episode {}", self.episode)))
        }
    }
}

pub fn bitmap(success: &[usize], clients: usize) -> String {
    (0..clients).map(|n| if success.contains(&n) { '1' } else { '0' }).collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(episode: u64) -> MetricsRow {
        MetricsRow {
            episode,
            run: 0,
            round: 0,
            episode_in_round: episode,
            reward_total: 1.5,
            reward_convergence: 1.0,
            reward_transmission: 2e6,
            loss_mean: None,
            learn_steps: 0,
            epsilon: 1.0,
            success_rate: 0.25,
            success_count: 1,
            accuracy: if episode == 1 { Some(0.5) } else { None },
            test_loss: None,
        }
    }

    #[test]
    fn csv_round_trips_with_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![row(0), row(1)];
        write_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("episode,run,round,episode_in_round,reward_total"));
        assert_eq!(read_csv::<MetricsRow>(&path).unwrap(), rows);
    }

    #[test]
    fn bitmap_marks_successes() {
        assert_eq!(bitmap(&[0, 2], 4), "1010");
        assert_eq!(bitmap(&[], 2), "00");
    }

    #[test]
    fn non_finite_rows_are_rejected() {
        let mut r = row(0);
        r.loss_mean = Some(f64::NAN);
        assert!(r.check_finite().is_err());
        assert!(row(0).check_finite().is_ok());
    }
}

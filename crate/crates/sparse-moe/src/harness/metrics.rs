//! Training metrics rows and their CSV rendering.

use crate::error::{Error, Result};
use std::path::Path;

pub const CSV_HEADER: &str =
    "step,train_loss,eval_perplexity,cv_importance,cv_load,max_over_mean_load,lr,expert_row_evals";

/// One metrics row. `expert_row_evals` is cumulative: k rows per token in
/// flat mode, summed over every training step so far.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    /// Total training loss in nats per token (task term plus balance terms).
    pub train_loss: f64,
    pub eval_perplexity: f64,
    pub cv_importance: f64,
    pub cv_load: f64,
    pub max_over_mean_load: f64,
    pub lr: f64,
    pub expert_row_evals: u64,
}

impl TrainRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.train_loss,
            self.eval_perplexity,
            self.cv_importance,
            self.cv_load,
            self.max_over_mean_load,
            self.lr,
            self.expert_row_evals
        )
    }
}

pub fn write_csv(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_one_row_per_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rec = TrainRecord {
            step: 10,
            train_loss: 3.25,
            eval_perplexity: 25.5,
            cv_importance: 0.5,
            cv_load: 0.25,
            max_over_mean_load: 1.5,
            lr: 0.001,
            expert_row_evals: 2560,
        };
        write_csv(&path, &[rec]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "10,3.25,25.5,0.5,0.25,1.5,0.001,2560");
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    }
}

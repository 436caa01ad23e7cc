use std::io::Write;
use std::path::Path;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptLogRow {
    pub step: usize,
    /// Objective before this step's update: the summed multitask loss, or
    /// the full bound in Bayesian mode.
    pub loss: f64,
    /// KL term; zero in deterministic mode.
    pub kl: f64,
    pub lr: f64,
}

/// Per-step adaptation trace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdaptLog {
    pub speaker_id: String,
    pub rows: Vec<AdaptLogRow>,
    /// Set when the loss diverged and the parameters were rolled back.
    pub diverged: bool,
}

impl AdaptLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub const CSV_HEADER: &'static str = "speaker_id,step,loss,kl,lr";

    pub fn write_csv_rows(&self, mut w: impl Write) -> Result<()> {
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", self.speaker_id, r.step, r.loss, r.kl, r.lr)?;
        }
        Ok(())
    }

    /// Writes several logs into one CSV file.
    pub fn save_all(path: &Path, logs: &[AdaptLog]) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for l in logs {
            l.write_csv_rows(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }
}

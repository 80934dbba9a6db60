//! Point predictions with 95% intervals.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::TargetScale;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction<T> {
    pub id: String,
    pub point: T,
    pub lower95: T,
    pub upper95: T,
}

/// Per-unit predictions, tagged with the scale they live on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet<T> {
    entries: Vec<Prediction<T>>,
    scale: TargetScale,
}

impl<T: Real> PredictionSet<T> {
    pub fn new(entries: Vec<Prediction<T>>, scale: TargetScale) -> Result<Self> {
        for e in &entries {
            if !(e.lower95 <= e.upper95) {
                return Err(Error::Validation(format!(
                    "prediction for unit {:?} has an inverted interval [{}, {}]",
                    e.id, e.lower95, e.upper95
                )));
            }
        }
        Ok(PredictionSet { entries, scale })
    }

    pub fn entries(&self) -> &[Prediction<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scale(&self) -> TargetScale {
        self.scale
    }

    pub fn points(&self) -> Vec<T> {
        self.entries.iter().map(|e| e.point).collect()
    }

    pub fn intervals(&self) -> Vec<(T, T)> {
        self.entries.iter().map(|e| (e.lower95, e.upper95)).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }

    /// CSV export: `id, point, lower95, upper95`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "id,point,lower95,upper95")?;
        for e in &self.entries {
            writeln!(w, "{},{},{},{}", e.id, e.point, e.lower95, e.upper95)?;
        }
        Ok(())
    }
}

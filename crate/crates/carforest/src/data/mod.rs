//! Areal-unit datasets: loading, validation, preprocessing, splitting,
//! and synthetic generation.

mod csv_io;
mod preprocess;
mod simulate;
mod split;

pub use csv_io::{load_csv, load_csv_default, write_csv, CsvSchema};
pub use preprocess::{
    knn_impute, log_target, pca_reduce, standardize, PcaBlock, PreprocessModel, DEFAULT_IMPUTE_K,
};
pub use simulate::{simulate, simulate_with_truth, Layout, MeanFunction, SimulationScenario, SimulationTruth};
pub use split::train_test_split;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Real;

/// Scale the target variable is expressed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetScale {
    Original,
    Log,
}

/// One areal unit: identifier, centroid in projected metres, `p` feature
/// values (NaN marks a missing cell before imputation), and an optionally
/// missing target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArealUnit<T> {
    pub id: String,
    pub centroid: (T, T),
    pub features: Vec<T>,
    pub target: Option<T>,
    /// Optional grouping label (e.g. an administrative region) used for
    /// per-group metric breakdowns.
    pub group: Option<String>,
}

/// An ordered collection of areal units with named features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArealDataset<T> {
    units: Vec<ArealUnit<T>>,
    feature_names: Vec<String>,
    target_scale: TargetScale,
}

impl<T: Real> ArealDataset<T> {
    pub fn new(
        units: Vec<ArealUnit<T>>,
        feature_names: Vec<String>,
        target_scale: TargetScale,
    ) -> Result<Self> {
        let p = feature_names.len();
        let mut seen = std::collections::HashSet::new();
        for u in &units {
            if !seen.insert(u.id.clone()) {
                return Err(Error::DuplicateId { id: u.id.clone() });
            }
            if u.features.len() != p {
                return Err(Error::Shape(format!(
                    "unit {:?} has {} features, expected {}",
                    u.id,
                    u.features.len(),
                    p
                )));
            }
            if !u.centroid.0.is_finite() || !u.centroid.1.is_finite() {
                return Err(Error::Validation(format!("unit {:?} has a non-finite centroid", u.id)));
            }
        }
        Ok(ArealDataset { units, feature_names, target_scale })
    }

    pub fn units(&self) -> &[ArealUnit<T>] {
        &self.units
    }

    pub fn unit(&self, i: usize) -> &ArealUnit<T> {
        &self.units[i]
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn target_scale(&self) -> TargetScale {
        self.target_scale
    }

    pub fn n_total(&self) -> usize {
        self.units.len()
    }

    pub fn n_observed(&self) -> usize {
        self.units.iter().filter(|u| u.target.is_some()).count()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.units.len()).filter(|&i| self.units[i].target.is_some()).collect()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.units.len()).filter(|&i| self.units[i].target.is_none()).collect()
    }

    pub fn centroids(&self) -> Vec<(T, T)> {
        self.units.iter().map(|u| u.centroid).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.units.iter().map(|u| u.id.clone()).collect()
    }

    /// Feature matrix (n × p).
    pub fn feature_matrix(&self) -> Mat<T> {
        let rows: Vec<Vec<T>> = self.units.iter().map(|u| u.features.clone()).collect();
        Mat::from_rows(&rows)
    }

    /// Observed targets in unit order; errors if any is missing.
    pub fn targets(&self) -> Result<Vec<T>> {
        self.units
            .iter()
            .map(|u| {
                u.target.ok_or_else(|| {
                    Error::Validation(format!("unit {:?} has a missing target", u.id))
                })
            })
            .collect()
    }

    pub fn has_missing_features(&self) -> bool {
        self.units.iter().any(|u| u.features.iter().any(|v| v.is_nan()))
    }

    /// Errors if any feature cell is missing, naming the first offender.
    pub fn require_complete_features(&self) -> Result<()> {
        for u in &self.units {
            if let Some(j) = u.features.iter().position(|v| v.is_nan()) {
                return Err(Error::Validation(format!(
                    "unit {:?} has a missing value in feature {:?}",
                    u.id, self.feature_names[j]
                )));
            }
        }
        Ok(())
    }

    /// New dataset holding the selected units (clones, original order given
    /// by `indices`).
    pub fn subset(&self, indices: &[usize]) -> Self {
        let units = indices.iter().map(|&i| self.units[i].clone()).collect();
        ArealDataset {
            units,
            feature_names: self.feature_names.clone(),
            target_scale: self.target_scale,
        }
    }

    /// Concatenate two datasets over the same feature schema.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.feature_names != other.feature_names {
            return Err(Error::Shape("feature schemas differ".into()));
        }
        if self.target_scale != other.target_scale {
            return Err(Error::Shape("target scales differ".into()));
        }
        let mut units = self.units.clone();
        units.extend(other.units.iter().cloned());
        ArealDataset::new(units, self.feature_names.clone(), self.target_scale)
    }

    /// Append easting/northing as two extra feature columns. The linear and
    /// forest models receive coordinates this way; the CAR-based models use
    /// spatial random effects instead.
    pub fn with_coordinate_features(&self) -> Self {
        let mut names = self.feature_names.clone();
        names.push("easting".into());
        names.push("northing".into());
        let units = self
            .units
            .iter()
            .map(|u| {
                let mut f = u.features.clone();
                f.push(u.centroid.0);
                f.push(u.centroid.1);
                ArealUnit { features: f, ..u.clone() }
            })
            .collect();
        ArealDataset { units, feature_names: names, target_scale: self.target_scale }
    }

    /// Mask a fraction of observed targets at random (deterministic in the
    /// seed); used to create prediction problems from complete data.
    pub fn mask_targets(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Validation(format!(
                "mask fraction must lie in [0, 1), got {fraction}"
            )));
        }
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let observed = self.observed_indices();
        let n_mask = (fraction * observed.len() as f64).round() as usize;
        let mut shuffled = observed;
        shuffled.shuffle(&mut rng);
        let masked: std::collections::HashSet<usize> = shuffled.into_iter().take(n_mask).collect();
        let mut out = self.clone();
        for (i, u) in out.units.iter_mut().enumerate() {
            if masked.contains(&i) {
                u.target = None;
            }
        }
        Ok(out)
    }

    pub(crate) fn set_target_scale(&mut self, scale: TargetScale) {
        self.target_scale = scale;
    }

    pub(crate) fn units_mut(&mut self) -> &mut [ArealUnit<T>] {
        &mut self.units
    }

    pub(crate) fn replace_features(&mut self, names: Vec<String>, per_unit: Vec<Vec<T>>) {
        assert_eq!(per_unit.len(), self.units.len());
        for (u, f) in self.units.iter_mut().zip(per_unit) {
            debug_assert_eq!(f.len(), names.len());
            u.features = f;
        }
        self.feature_names = names;
    }
}

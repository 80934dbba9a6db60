//! CSV reader/writer for areal datasets.
//!
//! Expected layout: a header row naming `id, easting, northing,
//! <features...>, target` (an optional group column may be declared in the
//! schema). Empty cells and the literal `NA` mark missing values. The writer
//! mirrors the reader so a load/write cycle reproduces the file's values
//! bit-exactly (floats are printed in shortest round-trip form).

use std::path::Path;

use crate::data::{ArealDataset, ArealUnit, TargetScale};
use crate::error::{Error, Result};
use crate::scalar::{real, Real};

/// Column roles for [`load_csv`].
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub id: String,
    pub easting: String,
    pub northing: String,
    pub target: String,
    pub group: Option<String>,
    /// Feature columns; `None` means every remaining column.
    pub features: Option<Vec<String>>,
    pub target_scale: TargetScale,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            id: "id".into(),
            easting: "easting".into(),
            northing: "northing".into(),
            target: "target".into(),
            group: None,
            features: None,
            target_scale: TargetScale::Original,
        }
    }
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == "NA"
}

fn parse_cell<T: Real>(cell: &str, line: u64, column: &str) -> Result<T> {
    cell.trim().parse::<f64>().map(real).map_err(|_| Error::Parse {
        line,
        message: format!("non-numeric value {cell:?} in column {column:?}"),
    })
}

pub fn load_csv<T: Real>(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<ArealDataset<T>> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();

    let find = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Validation(format!("column {name:?} not found in header {headers:?}"))
        })
    };
    let id_col = find(&schema.id)?;
    let east_col = find(&schema.easting)?;
    let north_col = find(&schema.northing)?;
    let target_col = find(&schema.target)?;
    let group_col = match &schema.group {
        Some(g) => Some(find(g)?),
        None => None,
    };

    let mut reserved = vec![id_col, east_col, north_col, target_col];
    reserved.extend(group_col);
    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|c| !reserved.contains(c)).collect(),
    };
    let feature_names: Vec<String> = feature_cols.iter().map(|&c| headers[c].clone()).collect();

    let mut units = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |c: usize| -> Result<&str> {
            record.get(c).ok_or(Error::Parse { line, message: "short row".into() })
        };
        let id = cell(id_col)?.to_string();
        let easting: T = parse_cell(cell(east_col)?, line, &schema.easting)?;
        let northing: T = parse_cell(cell(north_col)?, line, &schema.northing)?;
        let target_cell = cell(target_col)?;
        let target = if is_missing(target_cell) {
            None
        } else {
            Some(parse_cell(target_cell, line, &schema.target)?)
        };
        let mut features = Vec::with_capacity(feature_cols.len());
        for (&c, name) in feature_cols.iter().zip(&feature_names) {
            let raw = cell(c)?;
            if is_missing(raw) {
                features.push(T::nan());
            } else {
                features.push(parse_cell(raw, line, name)?);
            }
        }
        let group = group_col.map(|c| record.get(c).unwrap_or("").to_string());
        units.push(ArealUnit { id, centroid: (easting, northing), features, target, group });
    }

    ArealDataset::new(units, feature_names, schema.target_scale)
}

/// [`load_csv`] with the default schema.
pub fn load_csv_default<T: Real>(path: impl AsRef<Path>) -> Result<ArealDataset<T>> {
    load_csv(path, &CsvSchema::default())
}

fn fmt_value<T: Real>(v: T) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn write_csv<T: Real>(ds: &ArealDataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let has_group = ds.units().iter().any(|u| u.group.is_some());
    let mut header = vec!["id".to_string(), "easting".into(), "northing".into()];
    header.extend(ds.feature_names().iter().cloned());
    if has_group {
        header.push("group".into());
    }
    header.push("target".into());
    writer.write_record(&header)?;
    for u in ds.units() {
        let mut row = vec![u.id.clone(), fmt_value(u.centroid.0), fmt_value(u.centroid.1)];
        row.extend(u.features.iter().map(|&v| fmt_value(v)));
        if has_group {
            row.push(u.group.clone().unwrap_or_default());
        }
        row.push(u.target.map_or(String::new(), |t| fmt_value(t)));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_missing_targets_and_counts() {
        let f = write_temp("id,easting,northing,f1,target\na,0,0,1.5,2.0\nb,1,0,2.5,\nc,2,0,3.5,4.0\n");
        let ds: ArealDataset<f64> = load_csv_default(f.path()).unwrap();
        assert_eq!(ds.n_total(), 3);
        assert_eq!(ds.n_observed(), 2);
        assert_eq!(ds.unit(1).target, None);
        assert_eq!(ds.unit(0).features, vec![1.5]);
    }

    #[test]
    fn duplicate_id_is_named() {
        let f = write_temp("id,easting,northing,f1,target\nDZ001,0,0,1,2\nDZ001,1,0,2,3\n");
        match load_csv_default::<f64>(f.path()) {
            Err(Error::DuplicateId { id }) => assert_eq!(id, "DZ001"),
            other => panic!("expected duplicate-id error, got {other:?}"),
        }
    }

    #[test]
    fn bad_feature_cell_reports_line() {
        let f = write_temp("id,easting,northing,f1,target\na,0,0,1,2\nb,1,0,oops,3\n");
        match load_csv_default::<f64>(f.path()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("oops"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn na_token_means_missing_feature() {
        let f = write_temp("id,easting,northing,f1,target\na,0,0,NA,2\n");
        let ds: ArealDataset<f64> = load_csv_default(f.path()).unwrap();
        assert!(ds.unit(0).features[0].is_nan());
    }

    #[test]
    fn group_column_round_trips() {
        let f = write_temp("id,easting,northing,f1,group,target\na,0,0,1,north,2\n");
        let schema = CsvSchema { group: Some("group".into()), ..Default::default() };
        let ds: ArealDataset<f64> = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.unit(0).group.as_deref(), Some("north"));
        let out = tempfile::NamedTempFile::new().unwrap();
        write_csv(&ds, out.path()).unwrap();
        let back: ArealDataset<f64> = load_csv(out.path(), &schema).unwrap();
        assert_eq!(ds, back);
    }

    proptest! {
        // write → load reproduces the dataset exactly, including missing cells
        #[test]
        fn round_trip_random_datasets(
            n in 1usize..20,
            p in 1usize..4,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
            let units: Vec<ArealUnit<f64>> = (0..n).map(|i| {
                let features = (0..p).map(|_| {
                    if rng.gen_bool(0.1) { f64::NAN } else { rng.gen_range(-1e6..1e6) }
                }).collect();
                ArealUnit {
                    id: format!("u{i}"),
                    centroid: (rng.gen_range(-1e5..1e5), rng.gen_range(-1e5..1e5)),
                    features,
                    target: if rng.gen_bool(0.2) { None } else { Some(rng.gen_range(0.0..1e6)) },
                    group: None,
                }
            }).collect();
            let ds = ArealDataset::new(units, names, TargetScale::Original).unwrap();
            let out = tempfile::NamedTempFile::new().unwrap();
            write_csv(&ds, out.path()).unwrap();
            let back: ArealDataset<f64> = load_csv_default(out.path()).unwrap();
            // NaN != NaN, so compare with missing cells normalized
            prop_assert_eq!(ds.n_total(), back.n_total());
            for (a, b) in ds.units().iter().zip(back.units()) {
                prop_assert_eq!(&a.id, &b.id);
                prop_assert_eq!(a.centroid, b.centroid);
                prop_assert_eq!(a.target, b.target);
                for (x, y) in a.features.iter().zip(&b.features) {
                    prop_assert!( (x.is_nan() && y.is_nan()) || x == y );
                }
            }
        }
    }
}

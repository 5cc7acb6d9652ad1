//! CSV and JSON input/output.
//!
//! Two input layouts are accepted for pairs:
//! - long: `unit_id,variable,value` rows of raw observations, `variable` in {f, g};
//! - wide: an `omega` column followed by density columns `f_<unit>` and `g_<unit>`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::RegressionData;
use crate::grid_density::{
    rescale_to_unit, AffineParams, BandwidthRule, Grid, GridDensity, SampleSet, VariableTag,
};

const LONG_COLUMNS: [&str; 3] = ["unit_id", "variable", "value"];

/// Layout of a pairs file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairsFormat {
    Long,
    Wide,
}

/// Pairs read from disk together with how they were obtained.
#[derive(Debug, Clone)]
pub struct PairsInput {
    pub data: RegressionData,
    pub unit_ids: Vec<String>,
    pub format: PairsFormat,
    /// Map from [0, 1] back to the raw scale when long-format values were rescaled.
    pub rescale: Option<AffineParams>,
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn parse_value(text: &str, row: usize, column: &str) -> Result<f64> {
    text.parse::<f64>().map_err(|_| {
        Error::Input(format!("row {row}, column {column}: cannot parse {text:?} as a number"))
    })
}

fn record_row(record: &csv::StringRecord, fallback: usize) -> usize {
    record.position().map(|p| p.line() as usize).unwrap_or(fallback)
}

/// Read pairs in either layout; the layout is detected from the header.
pub fn read_pairs(path: &Path, grid_points: usize, bandwidth: BandwidthRule) -> Result<PairsInput> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.first() == Some(&"omega") {
        let columns = read_wide(reader, &names)?;
        return pairs_from_columns(columns);
    }
    if names.iter().any(|n| LONG_COLUMNS.contains(n)) {
        for required in LONG_COLUMNS {
            if !names.contains(&required) {
                return Err(Error::Input(format!(
                    "{}: missing column `{required}` (long format needs unit_id,variable,value)",
                    path.display()
                )));
            }
        }
        return read_long(reader, &names, grid_points, bandwidth);
    }
    Err(Error::Input(format!(
        "{}: unrecognised header; expected `unit_id,variable,value` or `omega,...`",
        path.display()
    )))
}

fn read_long(
    mut reader: csv::Reader<File>,
    names: &[&str],
    grid_points: usize,
    bandwidth: BandwidthRule,
) -> Result<PairsInput> {
    let index = |name: &str| names.iter().position(|n| *n == name).expect("checked");
    let (iu, iv, ix) = (index("unit_id"), index("variable"), index("value"));
    let mut order: Vec<String> = Vec::new();
    let mut samples: HashMap<(String, VariableTag), Vec<f64>> = HashMap::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let row = record_row(&record, k + 2);
        let field = |i: usize, name: &str| {
            record
                .get(i)
                .ok_or_else(|| Error::Input(format!("row {row}: missing field `{name}`")))
        };
        let unit = field(iu, "unit_id")?.to_string();
        let tag_text = field(iv, "variable")?;
        let tag = VariableTag::from_label(tag_text).ok_or_else(|| {
            Error::Input(format!(
                "row {row}, column variable: expected f or g, got {tag_text:?}"
            ))
        })?;
        let value = parse_value(field(ix, "value")?, row, "value")?;
        if !value.is_finite() {
            return Err(Error::Input(format!("row {row}, column value: non-finite value")));
        }
        if !order.contains(&unit) {
            order.push(unit.clone());
        }
        samples.entry((unit, tag)).or_default().push(value);
    }
    if order.is_empty() {
        return Err(Error::Input("no data rows".into()));
    }
    for unit in &order {
        for tag in [VariableTag::Predictor, VariableTag::Outcome] {
            if !samples.contains_key(&(unit.clone(), tag)) {
                return Err(Error::Input(format!(
                    "unit {unit} has no `{}` observations",
                    tag.label()
                )));
            }
        }
    }

    // one common affine map keeps all units on the same scale
    let all: Vec<f64> = samples.values().flatten().copied().collect();
    let rescale = if all.iter().all(|x| (0.0..=1.0).contains(x)) {
        None
    } else {
        Some(rescale_to_unit(&all)?.1)
    };
    let to_unit = |x: f64| match rescale {
        Some(p) => p.to_unit(x).clamp(0.0, 1.0),
        None => x,
    };

    let grid = Grid::uniform(grid_points)?;
    let n_units = order.len();
    let estimate = |unit: &str, tag: VariableTag| -> Result<GridDensity> {
        let values = samples[&(unit.to_string(), tag)].iter().map(|&x| to_unit(x)).collect();
        let set = SampleSet::new(unit, tag, values)?;
        bandwidth.estimate(&set, &grid, n_units)
    };
    let pairs = order
        .iter()
        .map(|u| Ok((estimate(u, VariableTag::Predictor)?, estimate(u, VariableTag::Outcome)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PairsInput {
        data: RegressionData::new(pairs)?,
        unit_ids: order,
        format: PairsFormat::Long,
        rescale,
    })
}

/// Named density columns of a wide file.
#[derive(Debug, Clone)]
pub struct DensityColumns {
    pub grid: Grid,
    pub columns: Vec<(String, GridDensity)>,
}

fn read_wide(mut reader: csv::Reader<File>, names: &[&str]) -> Result<DensityColumns> {
    if names.len() < 2 {
        return Err(Error::Input("wide format needs at least one density column after omega".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for name in &names[1..] {
        if !seen.insert(*name) {
            return Err(Error::Input(format!("duplicate column `{name}`")));
        }
    }
    let mut omega = Vec::new();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); names.len() - 1];
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let row = record_row(&record, k + 2);
        if record.len() != names.len() {
            return Err(Error::Input(format!(
                "row {row}: expected {} fields, found {}",
                names.len(),
                record.len()
            )));
        }
        omega.push(parse_value(&record[0], row, "omega")?);
        for (c, column) in values.iter_mut().enumerate() {
            column.push(parse_value(&record[c + 1], row, names[c + 1])?);
        }
    }
    let grid = Grid::from_points(&omega)?;
    let columns = names[1..]
        .iter()
        .zip(values)
        .map(|(name, v)| {
            GridDensity::new(grid.clone(), v)
                .map(|d| (name.to_string(), d))
                .map_err(|e| Error::Input(format!("column `{name}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DensityColumns { grid, columns })
}

/// Read a wide density file: `omega` followed by one column per density.
pub fn read_densities(path: &Path) -> Result<DensityColumns> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.first() != Some(&"omega") {
        return Err(Error::Input(format!(
            "{}: missing column `omega` as the first column",
            path.display()
        )));
    }
    read_wide(reader, &names)
}

fn pairs_from_columns(columns: DensityColumns) -> Result<PairsInput> {
    let mut order: Vec<String> = Vec::new();
    let mut found: HashMap<(String, VariableTag), GridDensity> = HashMap::new();
    for (name, density) in columns.columns {
        let (tag, unit) = if let Some(u) = name.strip_prefix("f_") {
            (VariableTag::Predictor, u)
        } else if let Some(u) = name.strip_prefix("g_") {
            (VariableTag::Outcome, u)
        } else {
            return Err(Error::Input(format!(
                "column `{name}` must be named f_<unit> or g_<unit>"
            )));
        };
        if !order.iter().any(|o| o == unit) {
            order.push(unit.to_string());
        }
        found.insert((unit.to_string(), tag), density);
    }
    let pairs = order
        .iter()
        .map(|u| {
            let mut take = |tag: VariableTag| {
                found.remove(&(u.clone(), tag)).ok_or_else(|| {
                    Error::Input(format!("missing column `{}_{u}`", tag.label()))
                })
            };
            Ok((take(VariableTag::Predictor)?, take(VariableTag::Outcome)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairsInput {
        data: RegressionData::new(pairs)?,
        unit_ids: order,
        format: PairsFormat::Wide,
        rescale: None,
    })
}

/// Write grid-valued columns as CSV with `omega` first.
pub fn write_columns(path: &Path, grid: &Grid, columns: &[(String, &[f64])]) -> Result<()> {
    for (name, values) in columns {
        if values.len() != grid.n_points() {
            return Err(Error::Input(format!(
                "column `{name}` has {} values for a {}-point grid",
                values.len(),
                grid.n_points()
            )));
        }
    }
    let mut writer = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["omega".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.clone()));
    writer.write_record(&header)?;
    for (j, w) in grid.points().iter().enumerate() {
        let mut row = vec![w.to_string()];
        row.extend(columns.iter().map(|(_, v)| v[j].to_string()));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Write pairs in the wide layout read by [`read_pairs`].
pub fn write_pairs(path: &Path, unit_ids: &[String], data: &RegressionData) -> Result<()> {
    let mut columns: Vec<(String, &[f64])> = Vec::with_capacity(2 * data.n());
    for (id, (f, g)) in unit_ids.iter().zip(data.pairs()) {
        columns.push((format!("f_{id}"), f.values()));
        columns.push((format!("g_{id}"), g.values()));
    }
    write_columns(path, data.grid(), &columns)
}

/// Write tidy rows with a header.
pub fn write_rows<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row.iter().map(|s| s.as_ref()))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

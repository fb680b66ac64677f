//! Artifact formats: tidy CSV with `# key=value` metadata lines, and JSON
//! documents wrapped in a versioned envelope.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analyze::{Column, ColumnKind, FluxTable, RowSource};
use crate::error::{Error, Result};
use crate::model::{MeasurementDataset, PiecewiseConstantProfile, TimeGrid, TimeUnit, VarInfo, WeightModel};

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

/// Provenance stamped into every artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    fn lines(&self) -> Vec<(String, String)> {
        vec![
            ("config_hash".into(), self.config_hash.clone()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub body: T,
}

/// Shortest decimal that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    ryu::Buffer::new().format(v).to_string()
}

fn parse_num(s: &str, path: &Path) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse(path, format!("`{s}` is not a number")))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads an upstream artifact; a missing file names the stage that writes it.
pub fn read_upstream(path: &Path, stage: &str) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Dependency {
            path: path.to_path_buf(),
            stage: stage.into(),
        },
        _ => Error::io(path, e),
    })
}

pub fn write_json<T: Serialize>(path: &Path, stage: &str, stamp: &Stamp, body: &T) -> Result<()> {
    let env = Envelope {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        stage: stage.into(),
        config_hash: stamp.config_hash.clone(),
        seed: stamp.seed,
        body,
    };
    let text = serde_json::to_string_pretty(&env).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    write_text(path, &(text + "\n"))
}

pub fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Envelope<T>> {
    let env: Envelope<T> = serde_json::from_str(text).map_err(|e| Error::parse(path, e.to_string()))?;
    if env.schema_version != ARTIFACT_SCHEMA_VERSION {
        return Err(Error::parse(
            path,
            format!("unsupported schema version {}", env.schema_version),
        ));
    }
    Ok(env)
}

/// Reads the body of an enveloped upstream artifact written by `stage`.
pub fn read_json<T: DeserializeOwned>(path: &Path, stage: &str) -> Result<T> {
    let text = read_upstream(path, stage)?;
    Ok(parse_json(&text, path)?.body)
}

/// A CSV file split into metadata, header and string cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvDoc {
    pub meta: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvDoc {
    pub fn new(stamp: &Stamp, header: Vec<String>) -> Self {
        Self {
            meta: stamp.lines(),
            header,
            rows: Vec::new(),
        }
    }

    pub fn meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.push((key.into(), value.into()));
        self
    }

    pub fn push_nums(&mut self, row: impl IntoIterator<Item = f64>) {
        self.rows.push(row.into_iter().map(num).collect());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::parse(path, format!("missing metadata `{key}`")))
    }

    pub fn render(&self) -> Result<String> {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k}={v}\n"));
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Config(format!("CSV encoding failed: {e}"));
        w.write_record(&self.header).map_err(fail)?;
        for r in &self.rows {
            w.write_record(r).map_err(fail)?;
        }
        let body = w.into_inner().map_err(|e| Error::Config(format!("CSV encoding failed: {e}")))?;
        out.push_str(std::str::from_utf8(&body).expect("CSV cells are UTF-8"));
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.render()?)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut meta = Vec::new();
        let mut body_start = 0;
        for line in text.split_inclusive('\n') {
            let Some(rest) = line.strip_prefix('#') else { break };
            body_start += line.len();
            let rest = rest.trim();
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| Error::parse(path, format!("malformed metadata line `{rest}`")))?;
            meta.push((k.trim().to_string(), v.to_string()));
        }
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(&text.as_bytes()[body_start..]);
        let header = r
            .headers()
            .map_err(|e| Error::parse(path, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = r
            .records()
            .map(|rec| {
                rec.map(|rec| rec.iter().map(str::to_string).collect())
                    .map_err(|e| Error::parse(path, e.to_string()))
            })
            .collect::<Result<Vec<Vec<String>>>>()?;
        Ok(Self { meta, header, rows })
    }

    pub fn read(path: &Path, stage: &str) -> Result<Self> {
        Self::parse(&read_upstream(path, stage)?, path)
    }
}

/// Splits `name[unit]` into its parts.
pub fn split_header(h: &str) -> (String, String) {
    match h.strip_suffix(']').and_then(|s| s.split_once('[')) {
        Some((n, u)) => (n.to_string(), u.to_string()),
        None => (h.to_string(), String::new()),
    }
}

fn time_header(unit: TimeUnit) -> String {
    format!("t[{}]", unit.suffix())
}

fn parse_time_header(h: &str, path: &Path) -> Result<TimeUnit> {
    let (n, u) = split_header(h);
    if n != "t" {
        return Err(Error::parse(path, format!("first column must be time, got `{h}`")));
    }
    TimeUnit::from_suffix(&u).ok_or_else(|| Error::parse(path, format!("unknown time unit `{u}`")))
}

/// Paths of a dataset file and its MV knot sidecar inside `dir`.
pub fn dataset_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.csv")), dir.join(format!("{name}.knots.csv")))
}

/// Dataset as `t, z.., u..` rows plus the MV knots: one row per grid point,
/// the last row repeating the final interval's value.
pub fn dataset_to_csv(
    ds: &MeasurementDataset,
    outputs: &[VarInfo],
    inputs: &[VarInfo],
    stamp: &Stamp,
) -> Result<(CsvDoc, CsvDoc)> {
    if matches!(ds.weight_model, WeightModel::Explicit) {
        return Err(Error::invalid("dataset", "explicit weights have no CSV form"));
    }
    let unit = ds.meas_grid.unit();
    let labelled = |names: &[String], vars: &[VarInfo]| -> Vec<String> {
        names
            .iter()
            .map(|n| match vars.iter().find(|v| &v.name == n) {
                Some(v) => v.header(),
                None => n.clone(),
            })
            .collect()
    };
    let z_cols = labelled(&ds.output_labels, outputs);
    let u_cols = labelled(&ds.mv_labels, inputs);
    let mut header = vec![time_header(unit)];
    header.extend(z_cols);
    header.extend(u_cols.iter().cloned());
    let weight_model = serde_json::to_string(&ds.weight_model).expect("weight model serializes");
    let x0 = serde_json::to_string(&ds.x0_guess).expect("x0 serializes");
    let mut data = CsvDoc::new(stamp, header)
        .meta("dataset", ds.name.clone())
        .meta("n_outputs", ds.n_z().to_string())
        .meta("weight_model", weight_model)
        .meta("x0_guess", x0);
    for (t, z) in ds.meas_grid.points().iter().zip(&ds.z_meas) {
        let u = ds.mv.eval(*t)?;
        data.push_nums(std::iter::once(*t).chain(z.iter().copied()).chain(u.iter().copied()));
    }
    let mut header = vec![time_header(ds.mv.unit())];
    header.extend(u_cols);
    let mut knots = CsvDoc::new(stamp, header).meta("dataset", ds.name.clone());
    let values = ds.mv.values();
    for (k, t) in ds.mv.grid().points().iter().enumerate() {
        let v = &values[k.min(values.len() - 1)];
        knots.push_nums(std::iter::once(*t).chain(v.iter().copied()));
    }
    Ok((data, knots))
}

fn numeric_rows(doc: &CsvDoc, path: &Path) -> Result<Vec<Vec<f64>>> {
    doc.rows
        .iter()
        .map(|r| {
            if r.len() != doc.header.len() {
                return Err(Error::parse(
                    path,
                    format!("row has {} cells, header has {}", r.len(), doc.header.len()),
                ));
            }
            r.iter().map(|c| parse_num(c, path)).collect()
        })
        .collect()
}

pub fn dataset_from_csv(data: &CsvDoc, data_path: &Path, knots: &CsvDoc, knots_path: &Path) -> Result<MeasurementDataset> {
    let name = data.require("dataset", data_path)?.to_string();
    let n_z: usize = data
        .require("n_outputs", data_path)?
        .parse()
        .map_err(|_| Error::parse(data_path, "n_outputs is not an integer"))?;
    let weight_model: WeightModel = serde_json::from_str(data.require("weight_model", data_path)?)
        .map_err(|e| Error::parse(data_path, format!("weight_model: {e}")))?;
    let x0_guess: Vec<f64> = serde_json::from_str(data.require("x0_guess", data_path)?)
        .map_err(|e| Error::parse(data_path, format!("x0_guess: {e}")))?;
    if data.header.len() < 1 + n_z {
        return Err(Error::parse(data_path, "fewer columns than outputs"));
    }
    let unit = parse_time_header(&data.header[0], data_path)?;
    let rows = numeric_rows(data, data_path)?;
    let output_labels = data.header[1..1 + n_z].iter().map(|h| split_header(h).0).collect();
    let mv_labels: Vec<String> = data.header[1 + n_z..].iter().map(|h| split_header(h).0).collect();
    let meas_grid = TimeGrid::new(rows.iter().map(|r| r[0]).collect(), unit).map_err(|e| Error::parse(data_path, e.to_string()))?;
    let z_meas = rows.iter().map(|r| r[1..1 + n_z].to_vec()).collect();

    let k_unit = parse_time_header(&knots.header[0], knots_path)?;
    let k_labels: Vec<String> = knots.header[1..].iter().map(|h| split_header(h).0).collect();
    if k_labels != mv_labels {
        return Err(Error::parse(knots_path, "MV columns differ from the dataset file"));
    }
    let k_rows = numeric_rows(knots, knots_path)?;
    if k_rows.len() < 2 {
        return Err(Error::parse(knots_path, "need at least two knots"));
    }
    let grid = TimeGrid::new(k_rows.iter().map(|r| r[0]).collect(), k_unit).map_err(|e| Error::parse(knots_path, e.to_string()))?;
    let values = k_rows[..k_rows.len() - 1].iter().map(|r| r[1..].to_vec()).collect();
    let mv = PiecewiseConstantProfile::new(grid, values)?;
    MeasurementDataset::new(name, meas_grid, z_meas, weight_model, mv, x0_guess, output_labels, mv_labels)
}

pub fn write_dataset(dir: &Path, ds: &MeasurementDataset, outputs: &[VarInfo], inputs: &[VarInfo], stamp: &Stamp) -> Result<()> {
    let (data, knots) = dataset_to_csv(ds, outputs, inputs, stamp)?;
    let (dp, kp) = dataset_paths(dir, &ds.name);
    data.write(&dp)?;
    knots.write(&kp)
}

pub fn read_dataset(dir: &Path, name: &str, stage: &str) -> Result<MeasurementDataset> {
    let (dp, kp) = dataset_paths(dir, name);
    let data = CsvDoc::read(&dp, stage)?;
    let knots = CsvDoc::read(&kp, stage)?;
    dataset_from_csv(&data, &dp, &knots, &kp)
}

fn kind_str(k: ColumnKind) -> &'static str {
    match k {
        ColumnKind::State => "state",
        ColumnKind::Input => "input",
        ColumnKind::Flux => "flux",
    }
}

pub fn flux_table_to_csv(table: &FluxTable, unit: TimeUnit, stamp: &Stamp) -> CsvDoc {
    let mut header = vec!["dataset".to_string(), "interval".to_string(), time_header(unit)];
    header.extend(table.columns.iter().map(|c| format!("{}[{}]", c.name, c.unit)));
    let kinds: Vec<&str> = table.columns.iter().map(|c| kind_str(c.kind)).collect();
    let mut doc = CsvDoc::new(stamp, header)
        .meta("kinds", kinds.join(","))
        .meta("dropped", table.dropped.to_string());
    for (src, row) in table.provenance.iter().zip(&table.rows) {
        let mut cells = vec![src.dataset.clone(), src.interval.to_string(), num(src.t)];
        cells.extend(row.iter().map(|v| num(*v)));
        doc.rows.push(cells);
    }
    doc
}

pub fn flux_table_from_csv(doc: &CsvDoc, path: &Path) -> Result<FluxTable> {
    let kinds: Vec<ColumnKind> = doc
        .require("kinds", path)?
        .split(',')
        .map(|k| match k {
            "state" => Ok(ColumnKind::State),
            "input" => Ok(ColumnKind::Input),
            "flux" => Ok(ColumnKind::Flux),
            other => Err(Error::parse(path, format!("unknown column kind `{other}`"))),
        })
        .collect::<Result<_>>()?;
    if doc.header.len() != 3 + kinds.len() {
        return Err(Error::parse(path, "column kinds do not match the header"));
    }
    let columns = doc.header[3..]
        .iter()
        .zip(kinds)
        .map(|(h, kind)| {
            let (name, unit) = split_header(h);
            Column { name, unit, kind }
        })
        .collect();
    let mut rows = Vec::with_capacity(doc.rows.len());
    let mut provenance = Vec::with_capacity(doc.rows.len());
    for r in &doc.rows {
        if r.len() != doc.header.len() {
            return Err(Error::parse(path, "ragged flux table row"));
        }
        provenance.push(RowSource {
            dataset: r[0].clone(),
            interval: r[1].parse().map_err(|_| Error::parse(path, "interval is not an integer"))?,
            t: parse_num(&r[2], path)?,
        });
        rows.push(r[3..].iter().map(|c| parse_num(c, path)).collect::<Result<Vec<f64>>>()?);
    }
    let mut table = FluxTable::new(columns, rows, provenance)?;
    table.dropped = doc
        .get("dropped")
        .and_then(|d| d.parse().ok())
        .unwrap_or(0);
    Ok(table)
}

//! Flux table assembly and Pearson screening of candidate flux inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::EstimateResult;
use crate::model::ModelStructure;

/// Where a table row came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSource {
    pub dataset: String,
    pub interval: usize,
    pub t: f64,
}

/// Column role in a [`FluxTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    State,
    Input,
    Flux,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub unit: String,
    pub kind: ColumnKind,
}

/// `(x*, u, p*)` records at flux interval midpoints, all datasets stacked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxTable {
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<f64>>,
    pub provenance: Vec<RowSource>,
    /// Rows discarded because they held non-finite values.
    pub dropped: usize,
}

impl FluxTable {
    pub fn new(columns: Vec<Column>, rows: Vec<Vec<f64>>, provenance: Vec<RowSource>) -> Result<Self> {
        if rows.len() != provenance.len() {
            return Err(Error::dimension("table provenance", rows.len(), provenance.len()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != columns.len()) {
            return Err(Error::dimension("table row", columns.len(), r.len()));
        }
        Ok(Self {
            columns,
            rows,
            provenance,
            dropped: 0,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[i]).collect()
    }

    pub fn column_by_name(&self, name: &str) -> Option<Vec<f64>> {
        self.index_of(name).map(|i| self.column(i))
    }

    pub fn labels(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    fn indices(&self, kind: ColumnKind) -> impl Iterator<Item = usize> + '_ {
        self.columns
            .iter()
            .enumerate()
            .filter(move |(_, c)| c.kind == kind)
            .map(|(i, _)| i)
    }
}

/// One row per flux interval of every result: the optimal state and the MV at
/// the interval midpoint next to that interval's flux value.
pub fn build_flux_table(results: &[EstimateResult], model: &dyn ModelStructure) -> Result<FluxTable> {
    let names = model.names();
    let mut columns = Vec::new();
    for (vars, kind) in [
        (&names.states, ColumnKind::State),
        (&names.inputs, ColumnKind::Input),
        (&names.fluxes, ColumnKind::Flux),
    ] {
        columns.extend(vars.iter().map(|v| Column {
            name: v.name.clone(),
            unit: v.unit.clone(),
            kind,
        }));
    }
    let mut rows = Vec::new();
    let mut provenance = Vec::new();
    let mut dropped = 0;
    for res in results {
        if res.p_star.dim() != model.n_p() || res.mv.dim() != model.n_u() {
            return Err(Error::Consistency(format!(
                "result {} does not match model {}",
                res.dataset,
                model.id()
            )));
        }
        for (k, t) in res.p_star.grid().midpoints().into_iter().enumerate() {
            let x = res.trajectory.state_at(t)?;
            let u = res.mv.eval(t)?;
            let row: Vec<f64> = x.iter().chain(u).chain(&res.p_star.values()[k]).copied().collect();
            if row.iter().all(|v| v.is_finite()) {
                rows.push(row);
                provenance.push(RowSource {
                    dataset: res.dataset.clone(),
                    interval: k,
                    t,
                });
            } else {
                dropped += 1;
            }
        }
    }
    let mut table = FluxTable::new(columns, rows, provenance)?;
    table.dropped = dropped;
    Ok(table)
}

/// Sample standard deviation below which a column counts as constant.
pub const CONSTANT_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub constant: Vec<bool>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        Some(self.values[i][j])
    }
}

/// Two-pass Pearson coefficients between all table columns. Constant columns
/// correlate 0 with everything, themselves included.
pub fn pearson_matrix(table: &FluxTable) -> Result<CorrelationMatrix> {
    let n = table.n_rows();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} table rows, need at least 2")));
    }
    let m = table.columns.len();
    let cols: Vec<Vec<f64>> = (0..m).map(|j| table.column(j)).collect();
    let centered: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| {
            let mean = c.iter().sum::<f64>() / n as f64;
            c.iter().map(|v| v - mean).collect()
        })
        .collect();
    let ss: Vec<f64> = centered.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
    let constant: Vec<bool> = ss.iter().map(|s| (s / (n - 1) as f64).sqrt() < CONSTANT_STD).collect();
    let mut values = vec![vec![0.0; m]; m];
    for i in 0..m {
        if constant[i] {
            continue;
        }
        values[i][i] = 1.0;
        for j in i + 1..m {
            if constant[j] {
                continue;
            }
            let s: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            let r = (s / (ss[i] * ss[j]).sqrt()).clamp(-1.0, 1.0);
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        labels: table.labels(),
        values,
        constant,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Correlation threshold `τ` on `|r|`.
    pub tau: f64,
    /// A constant recommendation whose magnitude is at most this is set to 0.
    pub zero_tol: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            zero_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxSelection {
    pub flux: String,
    pub inputs: Vec<String>,
    /// `r` of each selected input, same order.
    pub correlations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantFlux {
    pub flux: String,
    pub mean: f64,
    /// Value to bind: the mean, or 0 when the mean is negligible.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub matrix: CorrelationMatrix,
    pub tau: f64,
    pub selected_inputs: Vec<FluxSelection>,
    pub constant_flux_flags: Vec<ConstantFlux>,
}

impl CorrelationReport {
    pub fn selection(&self, flux: &str) -> Option<&FluxSelection> {
        self.selected_inputs.iter().find(|s| s.flux == flux)
    }

    pub fn constant(&self, flux: &str) -> Option<&ConstantFlux> {
        self.constant_flux_flags.iter().find(|c| c.flux == flux)
    }
}

/// For each flux, the state and MV columns with `|r| ≥ τ`; fluxes without any
/// get a constant recommendation instead.
pub fn select_inputs(matrix: &CorrelationMatrix, table: &FluxTable, cfg: &AnalysisConfig) -> Result<CorrelationReport> {
    if !(cfg.tau > 0.0 && cfg.tau <= 1.0) {
        return Err(Error::invalid("tau", format!("{} not in (0, 1]", cfg.tau)));
    }
    if !(cfg.zero_tol >= 0.0) {
        return Err(Error::invalid("zero_tol", "must be >= 0"));
    }
    if matrix.labels != table.labels() {
        return Err(Error::Consistency("correlation matrix does not belong to this table".into()));
    }
    let candidates: Vec<usize> = table
        .indices(ColumnKind::State)
        .chain(table.indices(ColumnKind::Input))
        .collect();
    let mut selected_inputs = Vec::new();
    let mut constant_flux_flags = Vec::new();
    for f in table.indices(ColumnKind::Flux) {
        let name = table.columns[f].name.clone();
        let (inputs, correlations): (Vec<String>, Vec<f64>) = candidates
            .iter()
            .filter(|&&c| matrix.values[f][c].abs() >= cfg.tau)
            .map(|&c| (table.columns[c].name.clone(), matrix.values[f][c]))
            .unzip();
        if inputs.is_empty() {
            let col = table.column(f);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let value = if mean.abs() <= cfg.zero_tol { 0.0 } else { mean };
            constant_flux_flags.push(ConstantFlux {
                flux: name.clone(),
                mean,
                value,
            });
        }
        selected_inputs.push(FluxSelection {
            flux: name,
            inputs,
            correlations,
        });
    }
    Ok(CorrelationReport {
        matrix: matrix.clone(),
        tau: cfg.tau,
        selected_inputs,
        constant_flux_flags,
    })
}

/// [`pearson_matrix`] followed by [`select_inputs`].
pub fn correlate(table: &FluxTable, cfg: &AnalysisConfig) -> Result<CorrelationReport> {
    let m = pearson_matrix(table)?;
    select_inputs(&m, table, cfg)
}

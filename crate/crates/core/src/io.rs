//! File formats: session logs, fitted models, fit traces, reports and plot
//! data.
//!
//! Session logs are UTF-8 JSON lines. The first line is a header
//!
//! ```text
//! {"format":"gcm-sessions","version":1,"list_size":10,"covariates":["loc_x","loc_y"]}
//! ```
//!
//! and every further non-blank line is one session
//!
//! ```text
//! {"id":"u0-s0","items":["item3",...],"clicks":[0,1,...],"covariates":[[0.1,0.7],...]}
//! ```
//!
//! `covariates` holds one row per position and may be omitted when the header
//! declares no columns.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::compiler::Weights;
use crate::data::{ItemInterner, Session, SessionLog};
use crate::em::{FitReport, FittedModel};
use crate::error::{GcmError, Result};
use crate::evaluation::PerplexityReport;
use crate::models::{parse_definition, write_definition};
use crate::state_space::StateRecord;

pub const SESSION_FORMAT: &str = "gcm-sessions";
pub const SESSION_VERSION: u32 = 1;
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    list_size: usize,
    #[serde(default)]
    covariates: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    items: Vec<String>,
    clicks: Vec<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    covariates: Vec<Vec<f64>>,
}

fn parse_err(line: usize, message: impl Into<String>) -> GcmError {
    GcmError::Parse {
        line,
        message: message.into(),
    }
}

pub fn read_sessions(reader: impl Read) -> Result<SessionLog> {
    let mut lines = BufReader::new(reader).lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => return Err(parse_err(1, "missing header line")),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| parse_err(i + 1, format!("bad header: {e}")))?;
            }
        }
    };
    if header.format != SESSION_FORMAT || header.version != SESSION_VERSION {
        return Err(GcmError::schema(format!(
            "unsupported log format `{}` version {}",
            header.format, header.version
        )));
    }
    if header.list_size == 0 {
        return Err(GcmError::schema("list size must be at least 1"));
    }
    let t_len = header.list_size;
    let n_cov = header.covariates.len();
    let mut interner = ItemInterner::default();
    let mut sessions = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| parse_err(ln, e.to_string()))?;
        if r.items.len() != t_len || r.clicks.len() != t_len {
            return Err(GcmError::schema(format!(
                "line {ln}: session `{}` has {} items and {} clicks, the header declares list size {t_len}",
                r.id,
                r.items.len(),
                r.clicks.len()
            )));
        }
        if let Some(c) = r.clicks.iter().find(|&&c| c > 1) {
            return Err(parse_err(ln, format!("click value {c} is not 0 or 1")));
        }
        let expected_rows = if n_cov == 0 { 0 } else { t_len };
        if r.covariates.len() != expected_rows || r.covariates.iter().any(|row| row.len() != n_cov) {
            return Err(GcmError::schema(format!(
                "line {ln}: covariates must be {expected_rows} rows of {n_cov} values"
            )));
        }
        sessions.push(Session {
            id: r.id,
            items: r.items.iter().map(|n| interner.intern(n)).collect(),
            clicks: r.clicks.iter().map(|&c| c == 1).collect(),
            covariates: r.covariates,
        });
    }
    Ok(SessionLog {
        list_size: t_len,
        covariate_names: header.covariates,
        item_names: interner.into_names(),
        sessions,
    })
}

pub fn write_sessions(log: &SessionLog, writer: impl Write) -> Result<()> {
    log.validate()?;
    let mut w = BufWriter::new(writer);
    let header = Header {
        format: SESSION_FORMAT.into(),
        version: SESSION_VERSION,
        list_size: log.list_size,
        covariates: log.covariate_names.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for s in &log.sessions {
        let r = Record {
            id: s.id.clone(),
            items: s.items.iter().map(|&v| log.item_names[v].clone()).collect(),
            clicks: s.clicks.iter().map(|&c| c as u8).collect(),
            covariates: s.covariates.clone(),
        };
        serde_json::to_writer(&mut w, &r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_sessions(path: &Path) -> Result<SessionLog> {
    read_sessions(fs::File::open(path)?)
}

pub fn save_sessions(log: &SessionLog, path: &Path) -> Result<()> {
    write_sessions(log, fs::File::create(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotWeights {
    pub label: String,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterBlock {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<String>,
    #[serde(default)]
    pub bias: bool,
    pub slots: Vec<SlotWeights>,
}

/// Persisted fitted model. The definition is stored in the text format; the
/// state descriptor is informational.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModelFile {
    pub format_version: u32,
    pub model: String,
    pub list_size: usize,
    pub items: Vec<String>,
    pub covariates: Vec<String>,
    pub definition: String,
    pub state_space: Vec<StateRecord>,
    pub parameters: Vec<ParameterBlock>,
    pub report: FitReport,
}

impl FittedModelFile {
    pub fn from_model(m: &FittedModel) -> Result<Self> {
        let parameters = m
            .definition
            .params
            .iter()
            .zip(&m.weights.blocks)
            .map(|(spec, block)| {
                let (columns, bias) = match &spec.activation {
                    ActivationKind::LogisticLinear { columns, bias } => (columns.clone(), *bias),
                    other => (other.columns().to_vec(), false),
                };
                ParameterBlock {
                    name: spec.name.clone(),
                    kind: spec.activation.label().to_string(),
                    columns,
                    bias,
                    slots: block
                        .iter()
                        .enumerate()
                        .map(|(i, w)| SlotWeights {
                            label: spec.slot_label(i),
                            weights: w.clone(),
                        })
                        .collect(),
                }
            })
            .collect();
        Ok(FittedModelFile {
            format_version: MODEL_FORMAT_VERSION,
            model: m.definition.name.clone(),
            list_size: m.definition.list_size,
            items: m.item_names.clone(),
            covariates: m.covariate_names.clone(),
            definition: write_definition(&m.definition)?,
            state_space: m.definition.space.descriptor(),
            parameters,
            report: m.report.clone(),
        })
    }

    pub fn into_model(self) -> Result<FittedModel> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(GcmError::schema(format!(
                "unsupported model file version {}",
                self.format_version
            )));
        }
        let def = parse_definition(&self.definition)?;
        if def.params.len() != self.parameters.len() {
            return Err(GcmError::schema(format!(
                "definition declares {} parameters, the file stores {}",
                def.params.len(),
                self.parameters.len()
            )));
        }
        let mut blocks = Vec::with_capacity(def.params.len());
        for (spec, p) in def.params.iter().zip(self.parameters) {
            if spec.name != p.name || spec.activation.label() != p.kind {
                return Err(GcmError::schema(format!(
                    "stored parameter `{}` ({}) does not match definition `{}` ({})",
                    p.name,
                    p.kind,
                    spec.name,
                    spec.activation.label()
                )));
            }
            blocks.push(p.slots.into_iter().map(|s| s.weights).collect());
        }
        let mut m = FittedModel::from_weights(def, Weights { blocks }, self.items, self.covariates)?;
        m.report = self.report;
        Ok(m)
    }
}

pub fn save_model(m: &FittedModel, path: &Path) -> Result<()> {
    let file = FittedModelFile::from_model(m)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &file)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FittedModel> {
    let file: FittedModelFile = serde_json::from_reader(BufReader::new(fs::File::open(path)?))?;
    file.into_model()
}

/// One JSON record per line.
pub fn write_json_lines<T: Serialize>(records: &[T], writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(report: &FitReport, writer: impl Write) -> Result<()> {
    write_json_lines(&report.records(), writer)
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(fs::File::open(path)?))?)
}

/// Tab-separated `rank  perplexity  model` rows; rank `overall` carries the
/// mean over ranks.
pub fn plot_data(series: &[(&str, &PerplexityReport)]) -> String {
    let mut out = String::from("rank\tperplexity\tmodel\n");
    for (name, r) in series {
        for (t, p) in r.per_rank.iter().enumerate() {
            out.push_str(&format!("{}\t{p}\t{name}\n", t + 1));
        }
        out.push_str(&format!("overall\t{}\t{name}\n", r.overall));
    }
    out
}

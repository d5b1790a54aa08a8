//! On-disk formats: stream files, checkpoints and CSV tables.
//!
//! Every float is written with 17 significant digits (`{:.16e}`), which
//! round-trips `f64` exactly and makes outputs byte-comparable.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stream_ttt_core::models::{ModelFamily, ModelState, ParamBlocks};
use stream_ttt_core::streamgen::{Frame, LabeledFrame, Stream, StreamHeader};

use crate::error::{CliError, Result};

pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn join(values: &[f64]) -> String {
    values.iter().map(|&v| num(v)).collect::<Vec<_>>().join(" ")
}

/// Line 1 is the JSON header; each following line is one frame:
/// `t v₁ … v_n | y₁ … y_m`.
pub fn stream_to_string(stream: &Stream) -> String {
    let mut out = serde_json::to_string(&stream.header).expect("header serialises");
    out.push('\n');
    for f in &stream.frames {
        let _ = writeln!(out, "{} {} | {}", f.index(), join(f.values()), join(&f.label));
    }
    out
}

pub fn write_stream(path: &Path, stream: &Stream) -> Result<()> {
    fs::write(path, stream_to_string(stream)).map_err(CliError::io(path))
}

pub fn parse_stream(text: &str, path: &Path) -> Result<Stream> {
    let bad = |message: String| CliError::Format { what: "stream", path: path.to_path_buf(), message };
    let mut lines = text.lines();
    let header: StreamHeader = serde_json::from_str(lines.next().ok_or_else(|| bad("empty file".into()))?)
        .map_err(|e| bad(format!("header: {e}")))?;
    let dim: usize = header.dims.iter().product();
    let mut frames = Vec::with_capacity(header.length);
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let lineno = i + 2;
        let (lhs, rhs) = line.split_once('|').ok_or_else(|| bad(format!("line {lineno}: missing `|`")))?;
        let mut lhs = lhs.split_whitespace();
        let index: usize = lhs
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(format!("line {lineno}: bad frame index")))?;
        let parse = |it: std::str::SplitWhitespace| -> Result<Vec<f64>> {
            it.map(|v| v.parse::<f64>().map_err(|e| bad(format!("line {lineno}: {e}")))).collect()
        };
        let values = parse(lhs)?;
        let label = parse(rhs.split_whitespace())?;
        if index != frames.len() + 1 {
            return Err(bad(format!("line {lineno}: expected frame {}, found {index}", frames.len() + 1)));
        }
        if values.len() != dim || label.len() != dim {
            return Err(bad(format!("line {lineno}: expected {dim} values and labels")));
        }
        if values.iter().chain(&label).any(|v| !v.is_finite()) {
            return Err(bad(format!("line {lineno}: non-finite value")));
        }
        frames.push(LabeledFrame { frame: Frame { index, values }, label });
    }
    if frames.len() != header.length {
        return Err(bad(format!("header says T = {}, found {} frames", header.length, frames.len())));
    }
    Ok(Stream { header, frames })
}

pub fn read_stream(path: &Path) -> Result<Stream> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_stream(&text, path)
}

const CHECKPOINT_FORMAT: &str = "stream-ttt-checkpoint/1";

/// A frozen model: the family and its spec, then the flat parameter blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelFamily,
    pub param_count: usize,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: &ModelFamily, params: &ParamBlocks) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model: model.clone(),
            param_count: params.len(),
            f: params.f.clone(),
            g: params.g.clone(),
            h: params.h.clone(),
        }
    }

    pub fn params(&self) -> ParamBlocks {
        ParamBlocks { f: self.f.clone(), g: self.g.clone(), h: self.h.clone() }
    }
}

pub fn write_checkpoint(path: &Path, model: &ModelFamily, state: &ModelState) -> Result<()> {
    let params = state.frozen_init().map_err(|e| CliError::core("checkpoint", e))?;
    let text = serde_json::to_string(&Checkpoint::new(model, params)).expect("checkpoint serialises");
    fs::write(path, text).map_err(CliError::io(path))
}

/// Loads a checkpoint and checks it was written for `model`.
pub fn read_checkpoint(path: &Path, model: &ModelFamily) -> Result<ModelState> {
    let bad = |message: String| CliError::Format { what: "checkpoint", path: path.to_path_buf(), message };
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unknown format `{}`", ck.format)));
    }
    if &ck.model != model {
        return Err(bad("the checkpoint was written for a different model spec".into()));
    }
    let params = ck.params();
    if params.len() != ck.param_count {
        return Err(bad(format!("param_count is {} but {} values are stored", ck.param_count, params.len())));
    }
    model.check_state(&params).map_err(|e| bad(e.to_string()))?;
    if !params.is_finite() {
        return Err(bad("non-finite parameter".into()));
    }
    Ok(ModelState::frozen(params))
}

/// A CSV table built row by row.
#[derive(Debug, Clone)]
pub struct Table {
    text: String,
    columns: usize,
}

impl Table {
    pub fn new(header: &[&str]) -> Table {
        Table { text: format!("{}\n", header.join(",")), columns: header.len() }
    }

    pub fn row(&mut self, cells: &[String]) {
        debug_assert_eq!(cells.len(), self.columns);
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

/// Splits CSV text into a header and rows. Cells hold no commas or quotes.
pub fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let split = |l: &str| l.split(',').map(str::to_string).collect::<Vec<_>>();
    let header = lines.next().map(split).unwrap_or_default();
    (header, lines.map(split).collect())
}

//! Datasets, model files, PCA, masking and synthetic generation.

pub mod mask;
pub mod pca;
pub mod synth;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ModelBank;
use crate::emission::Frame;
use crate::error::{Error, Result};
use crate::trainer::TrainedModel;

pub use mask::mask_missing;
pub use pca::{PcaTarget, PcaTransform};
pub use synth::{generate, GeneratorSpec, LatentTrace};

/// Current version written into model and bank files.
pub const SCHEMA_VERSION: u32 = 1;

/// One labelled (or unlabelled) sequence of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    pub label: Option<String>,
    pub frames: Vec<Frame>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Present frame values in order.
    pub fn present(&self) -> impl Iterator<Item = &[f64]> {
        self.frames.iter().filter_map(Frame::values)
    }

    /// Dimension shared by the present frames, or `None` if all are missing.
    pub fn dim(&self) -> Result<Option<usize>> {
        let mut dim = None;
        for (t, v) in self.frames.iter().enumerate() {
            let Some(v) = v.values() else { continue };
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::Shape(format!(
                        "record `{}`: frame {t} has {} values, expected {d}",
                        self.id,
                        v.len()
                    )))
                }
                _ => {}
            }
        }
        Ok(dim)
    }
}

impl AsRef<[Frame]> for SequenceRecord {
    fn as_ref(&self) -> &[Frame] {
        &self.frames
    }
}

/// Checks per-record invariants and a shared dimension; returns it.
pub fn validate_dataset(records: &[SequenceRecord]) -> Result<Option<usize>> {
    let mut dim: Option<usize> = None;
    for r in records {
        if r.frames.is_empty() {
            return Err(Error::InvalidArgument(format!("record `{}` has no frames", r.id)));
        }
        if let Some(v) = r.present().flatten().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "record `{}` contains non-finite value {v}",
                r.id
            )));
        }
        match (dim, r.dim()?) {
            (None, d) => dim = d,
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Shape(format!(
                    "record `{}` has dimension {b}, dataset has {a}",
                    r.id
                )))
            }
            _ => {}
        }
    }
    Ok(dim)
}

/// Reads a JSON Lines dataset. Blank lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<SequenceRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let rec: SequenceRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let d = validate_dataset(std::slice::from_ref(&rec)).map_err(|e| parse_err(e.to_string()))?;
        match (dim, d) {
            (None, d) => dim = d,
            (Some(a), Some(b)) if a != b => {
                return Err(parse_err(format!(
                    "record `{}` has dimension {b}, earlier records have {a}",
                    rec.id
                )))
            }
            _ => {}
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_dataset<W: Write>(mut w: W, records: &[SequenceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[SequenceRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(&mut w, records)?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct VersionedRef<'a, T> {
    schema_version: u32,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<u32>,
}

fn check_version(text: &str) -> Result<()> {
    let probe: VersionProbe = serde_json::from_str(text)?;
    match probe.schema_version {
        Some(SCHEMA_VERSION) => Ok(()),
        Some(found) => Err(Error::SchemaVersion { found, expected: SCHEMA_VERSION }),
        None => Err(Error::InvalidArgument("file has no schema_version".into())),
    }
}

fn write_json<T: Serialize>(path: &Path, body: &T) -> Result<()> {
    let mut text = serde_json::to_string(&VersionedRef { schema_version: SCHEMA_VERSION, body })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn model_to_string(model: &TrainedModel) -> Result<String> {
    Ok(serde_json::to_string(&VersionedRef { schema_version: SCHEMA_VERSION, body: model })?)
}

pub fn model_from_str(text: &str) -> Result<TrainedModel> {
    check_version(text)?;
    let model: TrainedModel = serde_json::from_str(text)?;
    model.validate()?;
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &TrainedModel) -> Result<()> {
    write_json(path.as_ref(), model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    model_from_str(&read_text(path.as_ref())?)
}

pub fn bank_to_string(bank: &ModelBank) -> Result<String> {
    Ok(serde_json::to_string(&VersionedRef { schema_version: SCHEMA_VERSION, body: bank })?)
}

pub fn bank_from_str(text: &str) -> Result<ModelBank> {
    check_version(text)?;
    let bank: ModelBank = serde_json::from_str(text)?;
    bank.validate()?;
    Ok(bank)
}

pub fn save_bank(path: impl AsRef<Path>, bank: &ModelBank) -> Result<()> {
    write_json(path.as_ref(), bank)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<ModelBank> {
    bank_from_str(&read_text(path.as_ref())?)
}

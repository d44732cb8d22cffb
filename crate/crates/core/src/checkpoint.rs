//! Model checkpoints: magic line, header length line, JSON header, then
//! every parameter as little-endian f64 in header order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Scaler;
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::model::{LeapTs, ModelConfig};

pub const MAGIC: &str = "LEAPTS1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub clusters: Vec<usize>,
    pub gumbel_temperature: f64,
    /// Dataset-level scaling the model was trained under.
    pub scaler: Option<Scaler>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: LeapTs,
    pub scaler: Option<Scaler>,
}

pub fn write_checkpoint<W: Write>(mut out: W, model: &LeapTs, scaler: Option<&Scaler>) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        clusters: model.clusters.clone(),
        gumbel_temperature: model.gumbel_temperature,
        scaler: scaler.cloned(),
        params: model
            .params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "{}", json.len())?;
    out.write_all(&json)?;
    for (_, t) in model.params.iter() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    let mut r = BufReader::new(input);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {:?}, expected {MAGIC}", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line)?;
    let len: usize = line
        .trim()
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad header length {:?}", line.trim())))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;

    let mut model = LeapTs::new(header.config.clone())?;
    model.set_clusters(header.clusters.clone())?;
    model.gumbel_temperature = header.gumbel_temperature;
    if header.params.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, configuration expects {}",
            header.params.len(),
            model.params.len()
        )));
    }
    let mut buf = [0u8; 8];
    for entry in &header.params {
        let slot = model
            .params
            .get_mut(&entry.name)
            .map_err(|_| Error::Checkpoint(format!("unexpected parameter `{}`", entry.name)))?;
        if slot.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?}, configuration expects {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let mut data = Vec::with_capacity(slot.len());
        for _ in 0..slot.len() {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated data for `{}`", entry.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        *slot = Tensor::new(entry.shape.clone(), data)?;
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
    }
    Ok(Checkpoint {
        model,
        scaler: header.scaler,
    })
}

pub fn save(path: &Path, model: &LeapTs, scaler: Option<&Scaler>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), model, scaler)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(std::fs::File::open(path)?)
}

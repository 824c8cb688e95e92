use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::param::ParamSet;
use crate::{Result, Tensor, TensorError};

/// Arbitrary JSON carried alongside the tensors (model config, seeds, hashes).
pub type CheckpointExtra = serde_json::Value;

const FORMAT: &str = "lifeseq-params-v1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset_bytes: u64,
    decay_eligible: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    tensors: Vec<TensorEntry>,
    extra: CheckpointExtra,
}

/// Writes `params` as little-endian f64 into `<dir>/params.bin` with a JSON
/// manifest `<dir>/manifest.json` recording name, shape, byte offset, and
/// decay eligibility per tensor, in parameter order.
pub fn save_params(params: &ParamSet, dir: &Path, extra: &CheckpointExtra) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(params.len());
    let mut blob: Vec<u8> = Vec::with_capacity(params.coord_count() * 8);
    for (_, p) in params.iter() {
        let (rows, cols) = p.value.shape();
        entries.push(TensorEntry {
            name: p.name.clone(),
            rows,
            cols,
            offset_bytes: blob.len() as u64,
            decay_eligible: p.decay_eligible,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest { format: FORMAT.to_string(), tensors: entries, extra: extra.clone() };
    let mut bin = fs::File::create(dir.join("params.bin"))?;
    bin.write_all(&blob)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| TensorError::Checkpoint(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_params`]. The returned set preserves
/// the saved parameter order, names, and decay flags bit-exactly.
pub fn load_params(dir: &Path) -> Result<(ParamSet, CheckpointExtra)> {
    let manifest_text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| TensorError::Checkpoint(format!("manifest parse: {e}")))?;
    if manifest.format != FORMAT {
        return Err(TensorError::Checkpoint(format!("unknown format {:?}", manifest.format)));
    }
    let mut blob = Vec::new();
    fs::File::open(dir.join("params.bin"))?.read_to_end(&mut blob)?;

    let mut params = ParamSet::new();
    for e in &manifest.tensors {
        let n = e.rows * e.cols;
        let start = e.offset_bytes as usize;
        let end = start + n * 8;
        if end > blob.len() {
            return Err(TensorError::Checkpoint(format!(
                "tensor {} spans {start}..{end} but blob has {} bytes",
                e.name,
                blob.len()
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in blob[start..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().expect("chunk is 8 bytes")));
        }
        let t = Tensor::from_vec(e.rows, e.cols, data)?;
        params.add(e.name.clone(), t, e.decay_eligible);
    }
    Ok((params, manifest.extra))
}

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::ClientModel;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub client: usize,
    pub name: String,
    pub shape: (usize, usize),
    /// Offset into the blob, counted in f64 values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub blob: String,
    pub clients: usize,
    pub tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `<stem>.bin` (little-endian f64) and `<stem>.json` (index) into `dir`.
/// Returns the index path.
pub fn save_checkpoint(dir: &Path, stem: &str, models: &[ClientModel]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let blob_name = format!("{stem}.bin");
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (client, model) in models.iter().enumerate() {
        for (name, t) in model.param_names().into_iter().zip(model.params()) {
            tensors.push(TensorEntry {
                client,
                name,
                shape: t.shape(),
                offset,
            });
            offset += t.data().len();
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let blob_path = dir.join(&blob_name);
    fs::write(&blob_path, bytes).map_err(io_err(&blob_path))?;
    let index = CheckpointIndex {
        blob: blob_name,
        clients: models.len(),
        tensors,
    };
    let index_path = dir.join(format!("{stem}.json"));
    fs::write(&index_path, serde_json::to_string_pretty(&index)?).map_err(io_err(&index_path))?;
    Ok(index_path)
}

pub fn load_checkpoint(index_path: &Path) -> Result<Vec<ClientModel>> {
    let text = fs::read_to_string(index_path).map_err(io_err(index_path))?;
    let index: CheckpointIndex = serde_json::from_str(&text)?;
    let blob_path = index_path.parent().unwrap_or(Path::new(".")).join(&index.blob);
    let bytes = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Config(format!("{} is not a whole number of f64 values", blob_path.display())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut per_client: Vec<Vec<(String, Tensor)>> = vec![Vec::new(); index.clients];
    for e in index.tensors {
        let len = e.shape.0 * e.shape.1;
        let slice = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::Config(format!("tensor {} of client {} runs past the blob", e.name, e.client)))?;
        let t = Tensor::new(e.shape.0, e.shape.1, slice.to_vec())?;
        per_client
            .get_mut(e.client)
            .ok_or_else(|| Error::Config(format!("client {} out of range", e.client)))?
            .push((e.name, t));
    }
    per_client
        .into_iter()
        .map(|named| Ok(ClientModel::from_named(named)?))
        .collect()
}

//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0..8    magic "SWSEGCK1"
//! bytes 8..16   header length (u64)
//! header        JSON: version, model config, vocabularies, task names,
//!               best dev metric, tensor manifest (name, rows, cols,
//!               offset, len, dtype)
//! payload       the tensors' raw f64 little-endian values, in manifest
//!               order (the model's visit order)
//! ```
//!
//! A vector tensor is recorded with cols = 0. Saving a freshly loaded
//! checkpoint reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::{TaskTable, VocabData};
use crate::model::{Model, ModelConfig, TensorViewMut};
use crate::numerics::rng_from_seed;
use crate::trainer::Vocabs;
use crate::embeddings::Vocab;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SWSEGCK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    /// 0 marks a vector.
    pub cols: usize,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Element count.
    pub len: u64,
    pub dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub registered_tasks: usize,
    pub task_names: Vec<String>,
    pub char_vocab: VocabData,
    pub bigram_vocab: Option<VocabData>,
    pub best_metric: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything a checkpoint restores.
pub struct LoadedCheckpoint {
    pub model: Model,
    pub vocabs: Vocabs,
    pub task_names: Vec<String>,
    pub best_metric: Option<f64>,
}

pub fn save(
    path: &Path,
    model: &Model,
    vocabs: &Vocabs,
    task_names: &[String],
    best_metric: Option<f64>,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    model.visit(&mut |name, view| {
        let (rows, cols) = view.shape();
        let offset = payload.len() as u64;
        let mut len = 0u64;
        for v in view.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
            len += 1;
        }
        tensors.push(TensorEntry { name, rows, cols, offset, len, dtype: "f64le".to_string() });
    });

    let header = CheckpointHeader {
        version: VERSION,
        model: model.cfg.clone(),
        registered_tasks: model.task_table.as_ref().map_or(0, |t| t.registered()),
        task_names: task_names.to_vec(),
        char_vocab: vocabs.chars.to_data(),
        bigram_vocab: vocabs.bigrams.as_ref().map(|v| v.to_data()),
        best_metric,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let chars = Vocab::from_data(&header.char_vocab)?;
    let bigrams = header.bigram_vocab.as_ref().map(Vocab::from_data).transpose()?;

    // Rebuild a model with matching shapes, then overwrite every tensor
    // from the payload.
    let task_capacity = header
        .tensors
        .iter()
        .find(|t| t.name == "embeddings.task")
        .map(|t| t.rows)
        .unwrap_or(0);
    let mut scratch_rng = rng_from_seed(0);
    let mut model = Model::new(
        header.model.clone(),
        chars.len(),
        bigrams.as_ref().map(|v| v.len()),
        task_capacity.max(1),
        &mut scratch_rng,
    )?;
    if let Some(table) = model.task_table.take() {
        // Match the stored capacity exactly, then mark registered rows.
        let dim = table.dim();
        let mut weights = table.weights;
        if weights.nrows() != task_capacity {
            weights = crate::numerics::Tensor2::zeros((task_capacity, dim));
        }
        model.task_table = Some(TaskTable::from_weights(weights, header.registered_tasks)?);
    }

    let entries: std::collections::HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut failure: Option<String> = None;
    let mut seen = 0usize;
    model.visit_mut(&mut |name, view| {
        let entry = match entries.get(name.as_str()) {
            Some(e) => *e,
            None => {
                failure.get_or_insert(format!("checkpoint is missing tensor '{name}'"));
                return;
            }
        };
        seen += 1;
        let start = entry.offset as usize;
        let mut read_into = |len: usize, write: &mut dyn FnMut(usize, f64)| {
            if entry.len as usize != len {
                failure.get_or_insert(format!(
                    "tensor '{name}': expected {len} values, checkpoint has {}",
                    entry.len
                ));
                return;
            }
            for i in 0..len {
                let o = start + i * 8;
                if o + 8 > payload.len() {
                    failure.get_or_insert(format!("tensor '{name}': payload truncated"));
                    return;
                }
                let bytes: [u8; 8] = payload[o..o + 8].try_into().unwrap();
                write(i, f64::from_le_bytes(bytes));
            }
        };
        match view {
            TensorViewMut::One(t) => {
                let len = t.len();
                read_into(len, &mut |i, v| t[i] = v);
            }
            TensorViewMut::Two(t) => {
                let (rows, cols) = (t.nrows(), t.ncols());
                if (entry.rows, entry.cols) != (rows, cols) {
                    failure.get_or_insert(format!(
                        "tensor '{name}': shape ({rows}, {cols}) does not match checkpoint ({}, {})",
                        entry.rows, entry.cols
                    ));
                    return;
                }
                read_into(rows * cols, &mut |i, v| {
                    t[[i / cols, i % cols]] = v;
                });
            }
        }
    });
    if let Some(msg) = failure {
        return Err(Error::Checkpoint(msg));
    }
    if seen != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {seen}",
            header.tensors.len()
        )));
    }

    Ok(LoadedCheckpoint {
        model,
        vocabs: Vocabs { chars, bigrams },
        task_names: header.task_names,
        best_metric: header.best_metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SegmentedSentence;
    use crate::trainer::{TaskSpec, Trainer, TrainConfig};

    fn sent(words: &[&str]) -> SegmentedSentence {
        SegmentedSentence::new(words.iter().map(|w| w.to_string()).collect()).unwrap()
    }

    fn small_trained_model() -> (Model, Vocabs, Vec<String>) {
        let specs = vec![
            TaskSpec {
                name: "t0".into(),
                train: vec![sent(&["ab", "c"]), sent(&["de", "fg"]), sent(&["a", "bc"])],
                dev: Some(vec![sent(&["ab", "c"])]),
            },
            TaskSpec {
                name: "t1".into(),
                train: vec![sent(&["a", "b", "c"]), sent(&["def", "g"]), sent(&["ab"])],
                dev: Some(vec![sent(&["a", "b"])]),
            },
        ];
        let config = TrainConfig {
            k: 2,
            d_embed: 5,
            d_bigram: 3,
            d_hidden: 4,
            d_task: 4,
            batch_size: 2,
            tasks_per_step: 2,
            dropout: 0.0,
            seed: 3,
            ..Default::default()
        };
        let mut trainer = Trainer::new(config, &specs).unwrap();
        for _ in 0..2 {
            trainer.train_step().unwrap();
        }
        let names = trainer.tasks.iter().map(|t| t.name.clone()).collect();
        (trainer.model.clone(), trainer.vocabs.clone(), names)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (model, vocabs, names) = small_trained_model();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.swseg");
        let p2 = dir.path().join("b.swseg");
        save(&p1, &model, &vocabs, &names, Some(0.5)).unwrap();
        let loaded = load(&p1).unwrap();
        save(&p2, &loaded.model, &loaded.vocabs, &loaded.task_names, loaded.best_metric).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_restores_parameters_and_vocab_exactly() {
        let (model, vocabs, names) = small_trained_model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.swseg");
        save(&p, &model, &vocabs, &names, None).unwrap();
        let loaded = load(&p).unwrap();
        let (a, _) = model.flat_params();
        let (b, _) = loaded.model.flat_params();
        assert_eq!(a, b);
        assert_eq!(loaded.task_names, names);
        assert_eq!(loaded.vocabs.chars.len(), vocabs.chars.len());
        assert_eq!(
            loaded.model.task_table.as_ref().unwrap().registered(),
            model.task_table.as_ref().unwrap().registered()
        );
    }

    #[test]
    fn refuses_non_checkpoint_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk");
        std::fs::write(&p, b"definitely not a checkpoint").unwrap();
        assert!(load(&p).is_err());
    }
}

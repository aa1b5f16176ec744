//! Pretraining samples, datasets, and their line-oriented JSON file format.
//!
//! A dataset file starts with one `{"header": ...}` line followed by one JSON
//! object per sample. Floats are written in shortest round-trip form, so a
//! load after a save reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatagenConfig, DatagenError, Method};
use crate::env::{ActionId, EnvSpec, Split, StateVec, Transition};

/// Ordered transitions conditioning the model. Not necessarily episodic.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Context {
    pub transitions: Vec<Transition>,
}

impl Context {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn prefix(&self, n: usize) -> &[Transition] {
        &self.transitions[..n.min(self.len())]
    }
}

impl From<Vec<Transition>> for Context {
    fn from(transitions: Vec<Transition>) -> Self {
        Self { transitions }
    }
}

/// One supervised example: predict `action_label` from `context` and `query_state`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSample {
    pub context: Context,
    pub query_state: StateVec,
    pub action_label: ActionId,
    pub weight: f64,
    /// Resolvable to the hidden task via [`crate::env::EnvInstance::from_tag`].
    pub env_tag: String,
    pub method: Method,
    /// Index of the random stream that produced the sample.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub family: String,
    pub split: Split,
    pub master_seed: u64,
    pub config: DatagenConfig,
    pub env_spec: EnvSpec,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<PretrainSample>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: DatasetHeader,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.header.env_spec
    }

    /// Longest context among the samples.
    pub fn max_context_len(&self) -> usize {
        self.samples.iter().map(|s| s.context.len()).max().unwrap_or(0)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), DatagenError> {
        serde_json::to_writer(&mut w, &HeaderLine { header: self.header.clone() })?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, DatagenError> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| DatagenError::Format("empty dataset file".into()))??;
        let HeaderLine { header } = serde_json::from_str(&first)?;
        let mut samples = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                samples.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { header, samples })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatagenError> {
        self.write_jsonl(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, DatagenError> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }
}

//! Feature logs: every tapped block output of a run, indexed by (step, block).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use blockdance_core::diffusion::SampleOutput;
use blockdance_core::dit::BlockFeature;
use blockdance_core::dump;
use blockdance_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

pub const FEATURE_LOG_FORMAT: &str = "feature-log-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLog {
    depth: usize,
    records: BTreeMap<(usize, usize), BlockFeature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub step_index: usize,
    pub timestep: usize,
    pub block_index: usize,
}

/// JSON side-car describing the rows of `features.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureLogManifest {
    pub format: String,
    pub depth: usize,
    pub tokens: usize,
    pub width: usize,
    pub records: Vec<RecordMeta>,
}

impl FeatureLog {
    pub fn new(depth: usize) -> Self {
        Self {
            depth,
            records: BTreeMap::new(),
        }
    }

    /// Collects the taps of a sampling run.
    pub fn from_run(depth: usize, run: &SampleOutput) -> Result<Self> {
        let mut log = Self::new(depth);
        for (step, f) in &run.features {
            log.insert(*step, f.clone())?;
        }
        if log.is_empty() {
            return Err(Error::Config("run carried no taps".into()));
        }
        Ok(log)
    }

    pub fn insert(&mut self, step_index: usize, feature: BlockFeature) -> Result<()> {
        if feature.block_index == 0 || feature.block_index > self.depth {
            return Err(Error::Index(format!(
                "block {} outside 1..={}",
                feature.block_index, self.depth
            )));
        }
        if let Some(first) = self.records.values().next() {
            if first.values.shape() != feature.values.shape() {
                return Err(Error::Dimension(format!(
                    "feature shape {:?} differs from {:?}",
                    feature.values.shape(),
                    first.values.shape()
                )));
            }
        }
        self.records.insert((step_index, feature.block_index), feature);
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, step_index: usize, block_index: usize) -> Option<&BlockFeature> {
        self.records.get(&(step_index, block_index))
    }

    /// Like [`get`](Self::get) but a missing record is a completeness error.
    pub fn require(&self, step_index: usize, block_index: usize) -> Result<&BlockFeature> {
        self.get(step_index, block_index).ok_or_else(|| {
            Error::Completeness(format!("no record for step {step_index}, block {block_index}"))
        })
    }

    /// Distinct step indices present, ascending.
    pub fn steps(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.records.keys().map(|&(s, _)| s).collect();
        out.dedup();
        out
    }

    /// Records in (step, block) order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &BlockFeature)> {
        self.records.iter().map(|(&(s, _), f)| (s, f))
    }

    /// Writes `<stem>.bin` (one rank-3 dump, records × T × d) and
    /// `<stem>.json` (per-row step, timestep and block).
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let first = self
            .records
            .values()
            .next()
            .ok_or_else(|| Error::Config("cannot write an empty feature log".into()))?;
        let (t, d) = first.values.dims2()?;
        let mut data = Vec::with_capacity(self.len() * t * d);
        let mut records = Vec::with_capacity(self.len());
        for (&(step_index, block_index), f) in &self.records {
            data.extend_from_slice(f.values.data());
            records.push(RecordMeta {
                step_index,
                timestep: f.timestep,
                block_index,
            });
        }
        let stacked = Tensor::new(vec![self.len(), t, d], data)?;
        let bin = dir.join(format!("{stem}.bin"));
        let json = dir.join(format!("{stem}.json"));
        dump::write_tensor(&bin, &stacked)?;
        let manifest = FeatureLogManifest {
            format: FEATURE_LOG_FORMAT.into(),
            depth: self.depth,
            tokens: t,
            width: d,
            records,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        Ok((bin, json))
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let json = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: FeatureLogManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
        if manifest.format != FEATURE_LOG_FORMAT {
            return Err(Error::Format(format!("unknown feature log format {}", manifest.format)));
        }
        let stacked = dump::read_tensor(&dir.join(format!("{stem}.bin")))?;
        let (t, d) = (manifest.tokens, manifest.width);
        if stacked.shape() != [manifest.records.len(), t, d] {
            return Err(Error::Format(format!(
                "feature dump shape {:?} does not match manifest",
                stacked.shape()
            )));
        }
        let mut log = Self::new(manifest.depth);
        for (row, meta) in stacked.data().chunks_exact(t * d).zip(&manifest.records) {
            log.insert(
                meta.step_index,
                BlockFeature {
                    block_index: meta.block_index,
                    timestep: meta.timestep,
                    values: Tensor::new(vec![t, d], row.to_vec())?,
                },
            )?;
        }
        Ok(log)
    }
}

//! Session descriptors, benchmark reports and the commands behind the
//! `sparse-edit` binary.

mod commands;

pub use commands::{
    cmd_edit, cmd_generate, cmd_sweep, load_config, EditArgs, EditSummary, GenerateArgs, Manifest, SweepArgs,
};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::StoreConfig;
use crate::error::{Error, Result};
use crate::mask::{pgm, BinaryMask, MaskWindow};
use crate::tensor::io as ft4;
use crate::unet::{EditSession, PromptTokens, UNetConfig};

fn default_t1() -> usize {
    MaskWindow::default().t1
}

fn default_t2() -> usize {
    MaskWindow::default().t2
}

fn default_radius() -> usize {
    1
}

/// JSON edit session. Relative paths are resolved against the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionFile {
    #[serde(default)]
    pub config: UNetConfig,
    pub old_tokens: Vec<u32>,
    pub new_tokens: Vec<u32>,
    #[serde(default = "default_t1")]
    pub t1: usize,
    #[serde(default = "default_t2")]
    pub t2: usize,
    #[serde(default = "default_radius")]
    pub dilation_radius: usize,
    /// PGM or FT4 mask replacing detection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hot_budget_bytes: Option<u64>,
    /// Spill file from `generate` holding the previous generation. When
    /// absent the old prompt is generated in memory first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_spill: Option<PathBuf>,
}

impl SessionFile {
    /// Reads the file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::path_io(path, e))?;
        let mut s: SessionFile = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut s.user_mask, &mut s.cache_spill].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        s.config.validate()?;
        Ok(s)
    }

    pub fn window(&self) -> Result<MaskWindow> {
        MaskWindow::new(self.t1, self.t2).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn old_prompt(&self) -> PromptTokens {
        PromptTokens::new(self.old_tokens.clone())
    }

    pub fn new_prompt(&self) -> PromptTokens {
        PromptTokens::new(self.new_tokens.clone())
    }

    /// Edit session with the file's window, radius and user mask.
    pub fn session(&self) -> Result<EditSession> {
        let mut s = EditSession::new(self.old_prompt(), self.new_prompt()).with_window(self.window()?);
        s.dilation_radius = self.dilation_radius;
        if let Some(p) = &self.user_mask {
            s.user_mask = Some(load_mask(p)?);
        }
        s.validate(&self.config)?;
        Ok(s)
    }

    pub fn store_config(&self) -> StoreConfig {
        StoreConfig {
            hot_budget: self.hot_budget_bytes,
            ..Default::default()
        }
    }
}

/// Loads a `.pgm` mask, or an FT4 `1×1×h×w` tensor otherwise.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let is_pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        pgm::load(path)
    } else {
        BinaryMask::from_tensor(&ft4::load(path)?)
    }
}

/// Hex SHA-256 of the configuration's JSON form.
pub fn config_hash(config: &UNetConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// Centered square mask covering about `size` of an `h × w` plane.
pub fn square_mask(h: usize, w: usize, size: f64) -> Result<BinaryMask> {
    if !(size > 0.0 && size <= 1.0) {
        return Err(Error::Config(format!("edit size {size} must lie in (0, 1]")));
    }
    if size == 1.0 {
        return Ok(BinaryMask::full(h, w));
    }
    let side = ((size * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w));
    Ok(BinaryMask::rect(h, w, (h - side) / 2, (w - side) / 2, side, side))
}

pub fn median(samples: &mut [f64]) -> f64 {
    assert!(!samples.is_empty());
    samples.sort_by(f64::total_cmp);
    let m = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[m]
    } else {
        0.5 * (samples[m - 1] + samples[m])
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

/// One benchmark run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub config_hash: String,
    /// Fraction of latent pixels inside the mask.
    pub edit_size: f64,
    pub dense_macs: u64,
    pub sparse_macs: u64,
    pub macs_ratio: Option<f64>,
    pub dense_ms: Option<f64>,
    pub sparse_ms: f64,
    pub speedup: Option<f64>,
    pub cached_bytes_before: u64,
    pub cached_bytes_after: u64,
    pub transfer_bytes: u64,
    pub blocking_loads: u64,
}

impl BenchRecord {
    /// Fills in the derived ratio fields.
    pub fn finish(mut self) -> Self {
        self.macs_ratio = ratio(self.dense_macs as f64, self.sparse_macs as f64);
        self.speedup = self.dense_ms.and_then(|d| ratio(d, self.sparse_ms));
        self
    }

    fn check(&self, i: usize) -> Result<()> {
        let close = |stored: Option<f64>, expect: Option<f64>| match (stored, expect) {
            (None, None) => true,
            (Some(a), Some(b)) => (a - b).abs() <= 1e-9 * b.abs().max(1.0),
            _ => false,
        };
        if !close(self.macs_ratio, ratio(self.dense_macs as f64, self.sparse_macs as f64)) {
            return Err(Error::Format(format!("record {i}: macs_ratio disagrees with the MAC counts")));
        }
        if !close(self.speedup, self.dense_ms.and_then(|d| ratio(d, self.sparse_ms))) {
            return Err(Error::Format(format!("record {i}: speedup disagrees with the timings")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
}

/// CSV row of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub edit_size: f64,
    pub dense_macs: u64,
    pub sparse_macs: u64,
    pub macs_ratio: Option<f64>,
    pub dense_ms: Option<f64>,
    pub sparse_ms: f64,
    pub speedup: Option<f64>,
    pub cached_bytes: u64,
    pub transfer_bytes: u64,
}

impl From<&BenchRecord> for SweepRow {
    fn from(r: &BenchRecord) -> Self {
        SweepRow {
            edit_size: r.edit_size,
            dense_macs: r.dense_macs,
            sparse_macs: r.sparse_macs,
            macs_ratio: r.macs_ratio,
            dense_ms: r.dense_ms,
            sparse_ms: r.sparse_ms,
            speedup: r.speedup,
            cached_bytes: r.cached_bytes_after,
            transfer_bytes: r.transfer_bytes,
        }
    }
}

impl BenchReport {
    /// Derived ratios must match their inputs within 1e-9.
    pub fn validate(&self) -> Result<()> {
        self.records.iter().enumerate().try_for_each(|(i, r)| r.check(i))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::path_io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::path_io(path, e))?;
        let r: BenchReport = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        r.validate()?;
        Ok(r)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.records {
            w.serialize(SweepRow::from(r)).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::path_io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<SweepRow>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::path_io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

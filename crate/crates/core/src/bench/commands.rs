use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{config_hash, median, square_mask, BenchRecord, BenchReport, SessionFile};
use crate::cache::{CacheStats, CacheStore, CompactionReport};
use crate::error::{Error, Result};
use crate::mask::{pgm, BinaryMask, MaskStatus};
use crate::tensor::{io as ft4, MacsReport, Tensor4};
use crate::unet::{latent_key, MaskSource, Pipeline, PromptTokens, UNetConfig};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::path_io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json).map_err(|e| Error::path_io(path, e))
}

fn tensor_sha256(t: &Tensor4) -> String {
    hex::encode(Sha256::digest(ft4::to_bytes(t)))
}

fn ms_since(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1e3
}

pub fn load_config(path: &Path) -> Result<UNetConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::path_io(path, e))?;
    let c: UNetConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug)]
pub struct GenerateArgs {
    pub config: PathBuf,
    pub prompt: Vec<u32>,
    pub out: PathBuf,
}

/// Written next to the outputs of `generate`; paths are relative to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: UNetConfig,
    pub config_hash: String,
    pub prompt: Vec<u32>,
    pub steps: u32,
    pub initial_latent: String,
    /// Latents after steps `1..=T`.
    pub step_latents: Vec<String>,
    pub final_latent: String,
    pub final_latent_sha256: String,
    pub cache_spill: String,
    pub cache_entries: u64,
    pub cache_bytes: u64,
    pub dense_macs: u64,
}

/// Dense generation recording the full cache, saved as a spill file.
pub fn cmd_generate(args: &GenerateArgs) -> Result<Manifest> {
    let config = load_config(&args.config)?;
    let pipeline = Pipeline::new(config.clone())?;
    let prompt = PromptTokens::new(args.prompt.clone());
    if prompt.is_empty() {
        return Err(Error::Config("--prompt needs at least one token id".into()));
    }
    ensure_dir(&args.out)?;
    ensure_dir(&args.out.join("latents"))?;
    let store = CacheStore::unbounded()?;
    let g = pipeline.generate_dense(&prompt, Some(&store))?;

    let latent_name = |t: u32| format!("latents/step_{t:03}.ft4");
    for t in 0..=config.steps {
        ft4::save(args.out.join(latent_name(t)), &store.get_tensor(latent_key(t))?)?;
    }
    ft4::save(args.out.join("final_latent.ft4"), &g.latent)?;
    store.save_spill(&args.out.join("cache.spill"))?;
    let stats = store.stats();
    let manifest = Manifest {
        config_hash: config_hash(&config),
        prompt: args.prompt.clone(),
        steps: config.steps,
        initial_latent: latent_name(0),
        step_latents: (1..=config.steps).map(latent_name).collect(),
        final_latent: "final_latent.ft4".into(),
        final_latent_sha256: tensor_sha256(&g.latent),
        cache_spill: "cache.spill".into(),
        cache_entries: stats.entries,
        cache_bytes: stats.total_bytes,
        dense_macs: g.macs.dense_total(),
        config,
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Previous generation for a session: its spill file, or a fresh dense run.
fn base_store(s: &SessionFile, pipeline: &Pipeline) -> Result<CacheStore> {
    match &s.cache_spill {
        Some(p) => CacheStore::load_spill(p, s.store_config()),
        None => {
            let store = CacheStore::new(s.store_config())?;
            pipeline.generate_dense(&s.old_prompt(), Some(&store))?;
            Ok(store)
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct EditArgs {
    pub session: PathBuf,
    pub out: PathBuf,
    pub user_mask: Option<PathBuf>,
    pub hot_budget: Option<u64>,
    pub no_sparse: bool,
}

/// Written as `outcome.json` by `edit`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditSummary {
    pub status: MaskStatus,
    pub mask_source: Option<MaskSource>,
    pub epsilon: Option<f32>,
    pub edit_size: f64,
    pub phase1_macs: u64,
    pub phase2_macs: u64,
    pub latent_sha256: String,
    pub macs: MacsReport,
    pub compaction: Option<CompactionReport>,
    pub stats: Option<CacheStats>,
}

/// Edits the session's cached generation, or with `no_sparse` regenerates
/// the new prompt densely as a baseline.
pub fn cmd_edit(args: &EditArgs) -> Result<EditSummary> {
    let mut s = SessionFile::load(&args.session)?;
    if let Some(m) = &args.user_mask {
        s.user_mask = Some(m.clone());
    }
    if args.hot_budget.is_some() {
        s.hot_budget_bytes = args.hot_budget;
    }
    let session = s.session()?;
    let pipeline = Pipeline::new(s.config.clone())?;
    let hash = config_hash(&s.config);
    ensure_dir(&args.out)?;

    let (summary, latent, mask, record) = if args.no_sparse {
        let t0 = Instant::now();
        let g = pipeline.generate_dense(&session.new, None)?;
        let ms = ms_since(t0);
        let record = BenchRecord {
            config_hash: hash,
            edit_size: 1.0,
            dense_macs: g.macs.dense_total(),
            sparse_macs: g.macs.sparse_total(),
            macs_ratio: None,
            dense_ms: Some(ms),
            sparse_ms: ms,
            speedup: None,
            cached_bytes_before: 0,
            cached_bytes_after: 0,
            transfer_bytes: 0,
            blocking_loads: 0,
        };
        let summary = EditSummary {
            status: MaskStatus::Edit,
            mask_source: None,
            epsilon: None,
            edit_size: 1.0,
            phase1_macs: g.macs.sparse_total(),
            phase2_macs: 0,
            latent_sha256: tensor_sha256(&g.latent),
            macs: g.macs,
            compaction: None,
            stats: None,
        };
        let (h, w) = (s.config.latent[0], s.config.latent[1]);
        (summary, g.latent, BinaryMask::full(h, w), record)
    } else {
        let store = base_store(&s, &pipeline)?;
        let t0 = Instant::now();
        let o = pipeline.edit(&session, &store)?;
        let ms = ms_since(t0);
        let record = BenchRecord {
            config_hash: hash,
            edit_size: o.edit_size(),
            dense_macs: o.macs.dense_total(),
            sparse_macs: o.macs.sparse_total(),
            macs_ratio: None,
            dense_ms: None,
            sparse_ms: ms,
            speedup: None,
            cached_bytes_before: o.compaction.bytes_before,
            cached_bytes_after: o.compaction.bytes_after,
            transfer_bytes: o.stats.transfer_bytes,
            blocking_loads: o.stats.blocking_loads,
        };
        let summary = EditSummary {
            status: o.status,
            mask_source: Some(o.mask_source),
            epsilon: o.epsilon,
            edit_size: o.edit_size(),
            phase1_macs: o.phase1_macs,
            phase2_macs: o.phase2_macs,
            latent_sha256: tensor_sha256(&o.latent),
            macs: o.macs.clone(),
            compaction: Some(o.compaction),
            stats: Some(o.stats.clone()),
        };
        (summary, o.latent, o.mask, record)
    };
    ft4::save(args.out.join("edited_latent.ft4"), &latent)?;
    pgm::save(args.out.join("mask.pgm"), &mask)?;
    BenchReport {
        records: vec![record.finish()],
    }
    .save(&args.out.join("report.json"))?;
    write_json(&args.out.join("outcome.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct SweepArgs {
    pub session: PathBuf,
    pub sizes: Vec<f64>,
    pub out: PathBuf,
    pub repeats: usize,
    pub warmup: usize,
}

impl SweepArgs {
    pub fn new(session: PathBuf, sizes: Vec<f64>, out: PathBuf) -> Self {
        SweepArgs {
            session,
            sizes,
            out,
            repeats: 5,
            warmup: 1,
        }
    }
}

/// Runs a user-mask edit per edit size with centered square masks and
/// writes one CSV row per size, plus the full report as JSON next to it.
/// The dense baseline is timed once for the whole sweep.
pub fn cmd_sweep(args: &SweepArgs) -> Result<BenchReport> {
    if args.sizes.is_empty() {
        return Err(Error::Config("--sizes needs at least one edit size".into()));
    }
    if args.repeats == 0 {
        return Err(Error::Config("--repeats must be at least 1".into()));
    }
    let s = SessionFile::load(&args.session)?;
    let (h, w) = (s.config.latent[0], s.config.latent[1]);
    let masks = args
        .sizes
        .iter()
        .map(|&size| square_mask(h, w, size))
        .collect::<Result<Vec<_>>>()?;
    let pipeline = Pipeline::new(s.config.clone())?;
    let base = base_store(&s, &pipeline)?;
    let hash = config_hash(&s.config);
    let new_prompt = s.new_prompt();

    let mut dense_ms = Vec::with_capacity(args.repeats);
    for i in 0..args.warmup + args.repeats {
        let t0 = Instant::now();
        pipeline.generate_dense(&new_prompt, None)?;
        if i >= args.warmup {
            dense_ms.push(ms_since(t0));
        }
    }
    let dense_ms = median(&mut dense_ms);

    let mut report = BenchReport::default();
    for mask in masks {
        let mut session = s.session()?;
        session.user_mask = Some(mask);
        let mut times = Vec::with_capacity(args.repeats);
        let mut last = None;
        for i in 0..args.warmup + args.repeats {
            let store = base.duplicate()?;
            let t0 = Instant::now();
            let o = pipeline.edit(&session, &store)?;
            if i >= args.warmup {
                times.push(ms_since(t0));
            }
            last = Some(o);
        }
        let o = last.expect("at least one run");
        report.records.push(
            BenchRecord {
                config_hash: hash.clone(),
                edit_size: o.edit_size(),
                dense_macs: o.macs.dense_total(),
                sparse_macs: o.macs.sparse_total(),
                macs_ratio: None,
                dense_ms: Some(dense_ms),
                sparse_ms: median(&mut times),
                speedup: None,
                cached_bytes_before: o.compaction.bytes_before,
                cached_bytes_after: o.compaction.bytes_after,
                transfer_bytes: o.stats.transfer_bytes,
                blocking_loads: o.stats.blocking_loads,
            }
            .finish(),
        );
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    report.write_csv(&args.out)?;
    report.save(&args.out.with_extension("json"))?;
    Ok(report)
}

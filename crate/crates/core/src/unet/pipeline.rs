use serde::{Deserialize, Serialize};

use super::config::UNetConfig;
use super::exec::{ControlledExec, DenseExec, SparseExec, SparseSchedule};
use super::model::{LayerExec, LayerKind, ToyUNet};
use super::prompt::{PromptTokens, SharedTokenMap};
use crate::cache::{CacheKey, CacheStats, CacheStore, CompactionReport, Payload, Role};
use crate::error::{Error, Result};
use crate::mask::{difference_mask, BinaryMask, MaskStatus, MaskWindow};
use crate::tensor::{MacsReport, Matrix, Tensor4};

/// Layer id under which per-step latents are stored.
pub const LATENT_LAYER: u32 = 0;

pub fn latent_key(step: u32) -> CacheKey {
    CacheKey::new(step, LATENT_LAYER, Role::StepLatent)
}

/// Old/new prompt pair plus the detection parameters of one edit.
#[derive(Clone, Debug, PartialEq)]
pub struct EditSession {
    pub old: PromptTokens,
    pub new: PromptTokens,
    pub shared: SharedTokenMap,
    pub window: MaskWindow,
    pub dilation_radius: usize,
    /// Replaces detection when set; used verbatim.
    pub user_mask: Option<BinaryMask>,
}

impl EditSession {
    pub fn new(old: PromptTokens, new: PromptTokens) -> Self {
        let shared = SharedTokenMap::lcs(&old, &new);
        EditSession {
            old,
            new,
            shared,
            window: MaskWindow::default(),
            dilation_radius: 1,
            user_mask: None,
        }
    }

    pub fn with_window(mut self, window: MaskWindow) -> Self {
        self.window = window;
        self
    }

    pub fn with_user_mask(mut self, mask: BinaryMask) -> Self {
        self.user_mask = Some(mask);
        self
    }

    pub fn validate(&self, config: &UNetConfig) -> Result<()> {
        self.window.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.window.t2 > config.steps as usize {
            return Err(Error::Config(format!(
                "mask window ends at step {} but only {} steps run",
                self.window.t2, config.steps
            )));
        }
        if let Some(m) = &self.user_mask {
            if m.dims() != (config.latent[0], config.latent[1]) {
                return Err(Error::Config(format!(
                    "user mask is {:?}, latent is {:?}",
                    m.dims(),
                    config.latent
                )));
            }
        }
        if self.old.is_empty() || self.new.is_empty() {
            return Err(Error::Config("prompts must have at least one token".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Detected,
    User,
}

#[derive(Clone, Debug)]
pub struct Detection {
    pub status: MaskStatus,
    pub mask: BinaryMask,
    pub epsilon: f32,
    pub objective: f64,
    /// New-prompt latents of steps `1..=t2`.
    pub latents: Vec<Tensor4>,
    pub macs: MacsReport,
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub latent: Tensor4,
    pub macs: MacsReport,
}

#[derive(Clone, Debug)]
pub struct EditOutcome {
    pub latent: Tensor4,
    pub status: MaskStatus,
    pub mask: BinaryMask,
    pub mask_source: MaskSource,
    pub epsilon: Option<f32>,
    /// Dense column: `T` dense calls. Sparse column: MACs actually executed.
    pub macs: MacsReport,
    pub phase1_macs: u64,
    pub phase2_macs: u64,
    pub compaction: CompactionReport,
    pub stats: CacheStats,
}

impl EditOutcome {
    pub fn edit_size(&self) -> f64 {
        self.mask.sparsity()
    }
}

/// Forward-pass strategy for [`Pipeline::unet_forward`].
pub enum ForwardMode<'a> {
    Dense { record: Option<&'a CacheStore> },
    Controlled { store: &'a CacheStore, shared: &'a SharedTokenMap, old_len: usize },
    Sparse { store: &'a CacheStore, schedule: &'a SparseSchedule },
}

pub struct Pipeline {
    config: UNetConfig,
    model: ToyUNet,
}

impl Pipeline {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let model = ToyUNet::new(&config);
        Ok(Pipeline { config, model })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn model(&self) -> &ToyUNet {
        &self.model
    }

    /// Seeded starting latent, uniform in `[-1, 1)`.
    pub fn initial_latent(&self) -> Tensor4 {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x6c61_7465_6e74);
        let shape = self.model.latent_shape();
        Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0f32..1.0))
    }

    pub fn text(&self, prompt: &PromptTokens) -> Result<Matrix> {
        prompt.embeddings(self.config.seed, self.config.text_dim)
    }

    /// `latent − delta / T`.
    pub fn apply_step(&self, latent: &Tensor4, delta: &Tensor4) -> Result<Tensor4> {
        delta.check_shape("step update", latent.shape())?;
        let inv_t = 1.0f32 / self.config.steps as f32;
        let data = latent.data().iter().zip(delta.data()).map(|(&l, &d)| l - inv_t * d).collect();
        Tensor4::new(latent.shape(), data)
    }

    /// One denoiser call. Returns the latent update and the MACs executed.
    pub fn unet_forward(&self, latent: &Tensor4, t: u32, text: &Matrix, mode: ForwardMode<'_>) -> Result<(Tensor4, MacsReport)> {
        fn run(model: &ToyUNet, exec: &mut dyn LayerExec, latent: &Tensor4, t: u32, text: &Matrix) -> Result<Tensor4> {
            model.forward(exec, latent, t, text)
        }
        match mode {
            ForwardMode::Dense { record } => {
                let mut e = DenseExec::new(t, record);
                let d = run(&self.model, &mut e, latent, t, text)?;
                Ok((d, e.macs))
            }
            ForwardMode::Controlled { store, shared, old_len } => {
                let mut e = ControlledExec {
                    step: t,
                    store,
                    shared,
                    complete: shared.is_complete(old_len, text.rows),
                    macs: MacsReport::default(),
                };
                let d = run(&self.model, &mut e, latent, t, text)?;
                Ok((d, e.macs))
            }
            ForwardMode::Sparse { store, schedule } => {
                let mut e = SparseExec {
                    step: t,
                    store,
                    schedule,
                    macs: MacsReport::default(),
                };
                let d = run(&self.model, &mut e, latent, t, text)?;
                Ok((d, e.macs))
            }
        }
    }

    /// Full dense generation. With a store, every layer output, statistic,
    /// attention map and step latent (including step 0) is recorded,
    /// replacing any previous entries.
    pub fn generate_dense(&self, prompt: &PromptTokens, store: Option<&CacheStore>) -> Result<Generation> {
        let text = self.text(prompt)?;
        let mut latent = self.initial_latent();
        if let Some(s) = store {
            s.overwrite(latent_key(0), Payload::Tensor(latent.clone()))?;
        }
        let mut macs = MacsReport::default();
        for t in 1..=self.config.steps {
            let (delta, m) = self.unet_forward(&latent, t, &text, ForwardMode::Dense { record: store })?;
            latent = self.apply_step(&latent, &delta)?;
            if let Some(s) = store {
                s.overwrite(latent_key(t), Payload::Tensor(latent.clone()))?;
            }
            macs.merge(&m);
        }
        let mut report = self.dense_report(prompt.len(), self.config.steps);
        for l in &mut report.layers {
            l.sparse_macs = macs.layers.iter().find(|m| m.layer_id == l.layer_id).map_or(0, |m| m.sparse_macs);
        }
        Ok(Generation { latent, macs: report })
    }

    /// `steps` dense calls' worth of MACs per layer in the dense column.
    fn dense_report(&self, text_len: usize, steps: u32) -> MacsReport {
        let mut r = self.model.dense_macs(text_len);
        for l in &mut r.layers {
            l.dense_macs *= steps as u64;
        }
        r
    }

    /// Keys an edit will read, in ascending order.
    pub fn required_keys(&self, session: &EditSession) -> Vec<CacheKey> {
        let cfg = &self.config;
        let mut keys: Vec<CacheKey> = (0..=cfg.steps).map(latent_key).collect();
        let detect = session.user_mask.is_none();
        let first_sparse = if detect { session.window.t2 as u32 + 1 } else { 1 };
        for l in self.model.layers() {
            let gated = cfg.level_gated(l.level);
            for t in 1..=cfg.steps {
                if detect && t <= session.window.t2 as u32 && l.kind == LayerKind::CrossAttn {
                    keys.push(CacheKey::new(t, l.id, Role::CrossAttnMap));
                }
                if gated && t >= first_sparse {
                    keys.push(CacheKey::new(t, l.id, Role::LayerOutput));
                    if l.kind == LayerKind::Norm {
                        keys.push(CacheKey::new(t, l.id, Role::NormMean));
                        keys.push(CacheKey::new(t, l.id, Role::NormVar));
                    }
                }
            }
        }
        keys.sort();
        keys
    }

    fn check_complete(&self, session: &EditSession, store: &CacheStore) -> Result<()> {
        match self.required_keys(session).into_iter().find(|k| !store.contains(*k)) {
            Some(k) => Err(Error::CacheMiss(k)),
            None => Ok(()),
        }
    }

    /// Runs steps `1..=t2` with the new prompt under cross-attention control
    /// and thresholds the accumulated difference to the cached latents.
    pub fn detect_mask(&self, session: &EditSession, store: &CacheStore) -> Result<Detection> {
        session.validate(&self.config)?;
        let text = self.text(&session.new)?;
        let t2 = session.window.t2;
        let mut latent = store.get_tensor(latent_key(0))?;
        let mut ys = Vec::with_capacity(t2);
        let mut macs = MacsReport::default();
        for t in 1..=t2 as u32 {
            let mode = ForwardMode::Controlled {
                store,
                shared: &session.shared,
                old_len: session.old.len(),
            };
            let (delta, m) = self.unet_forward(&latent, t, &text, mode)?;
            latent = self.apply_step(&latent, &delta)?;
            ys.push(latent.clone());
            macs.merge(&m);
        }
        let xs = (1..=t2 as u32)
            .map(|t| store.get_tensor(latent_key(t)))
            .collect::<Result<Vec<_>>>()?;
        let r = difference_mask(&xs, &ys, session.window, session.dilation_radius)?;
        Ok(Detection {
            status: r.status,
            mask: r.mask,
            epsilon: r.epsilon,
            objective: r.objective,
            latents: ys,
            macs,
        })
    }

    fn compose(mask: &BinaryMask, inside: &Tensor4, outside: &Tensor4) -> Result<Tensor4> {
        inside.check_shape("compose", outside.shape())?;
        let mut out = outside.clone();
        let pixels = mask.active_indices();
        let s = inside.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                let src = inside.plane(n, c);
                let dst = out.plane_mut(n, c);
                for &p in &pixels {
                    dst[p] = src[p];
                }
            }
        }
        Ok(out)
    }

    /// Edits the cached generation in `store` toward `session.new`.
    ///
    /// Without a user mask, steps `1..=t2` run densely under attention
    /// control to detect the mask and the remaining steps run sparsely from
    /// the merged latent. A user mask skips detection and runs every step
    /// sparsely from the shared initial latent. The store is compacted to the
    /// mask, so it should not be reused for an edit with a different mask.
    pub fn edit(&self, session: &EditSession, store: &CacheStore) -> Result<EditOutcome> {
        session.validate(&self.config)?;
        self.check_complete(session, store)?;
        let cfg = &self.config;
        let text = self.text(&session.new)?;
        let mut macs = self.dense_report(session.new.len(), cfg.steps);

        let (mask, source, epsilon, start, mut latent, phase1) = match &session.user_mask {
            Some(m) => (m.clone(), MaskSource::User, None, 1u32, store.get_tensor(latent_key(0))?, MacsReport::default()),
            None => {
                let det = self.detect_mask(session, store)?;
                let t2 = session.window.t2 as u32;
                let start_latent = match det.status {
                    MaskStatus::Edit => Self::compose(&det.mask, &det.latents[t2 as usize - 1], &store.get_tensor(latent_key(t2))?)?,
                    MaskStatus::NoEdit => Tensor4::zeros(self.model.latent_shape()),
                };
                (det.mask, MaskSource::Detected, Some(det.epsilon), t2 + 1, start_latent, det.macs)
            }
        };
        macs.merge(&phase1);
        let phase1_macs = phase1.sparse_total();

        if mask.is_empty() {
            return Ok(EditOutcome {
                latent: store.get_tensor(latent_key(cfg.steps))?,
                status: MaskStatus::NoEdit,
                mask,
                mask_source: source,
                epsilon,
                macs,
                phase1_macs,
                phase2_macs: 0,
                compaction: CompactionReport {
                    bytes_before: store.total_bytes(),
                    bytes_after: store.total_bytes(),
                    entries_compacted: 0,
                },
                stats: store.stats(),
            });
        }

        let compaction = store.compact(&mask)?;
        let schedule = SparseSchedule::build(cfg, &mask)?;
        let mut phase2 = MacsReport::default();
        if start <= cfg.steps {
            store.prefetch(start);
        }
        for t in start..=cfg.steps {
            store.set_current_step(t);
            store.prefetch_ahead(t);
            let (delta, m) = self.unet_forward(&latent, t, &text, ForwardMode::Sparse { store, schedule: &schedule })?;
            let stepped = self.apply_step(&latent, &delta)?;
            latent = Self::compose(&mask, &stepped, &store.get_tensor(latent_key(t))?)?;
            phase2.merge(&m);
        }
        macs.merge(&phase2);
        Ok(EditOutcome {
            latent,
            status: MaskStatus::Edit,
            mask,
            mask_source: source,
            epsilon,
            macs,
            phase1_macs,
            phase2_macs: phase2.sparse_total(),
            compaction,
            stats: store.stats(),
        })
    }
}

/// [`Pipeline::generate_dense`] for a one-off configuration.
pub fn generate_dense(prompt: &PromptTokens, config: &UNetConfig, store: &CacheStore) -> Result<Tensor4> {
    Ok(Pipeline::new(config.clone())?.generate_dense(prompt, Some(store))?.latent)
}

/// [`Pipeline::edit`] for a one-off configuration.
pub fn edit(session: &EditSession, config: &UNetConfig, store: &CacheStore) -> Result<EditOutcome> {
    Pipeline::new(config.clone())?.edit(session, store)
}

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::key::{CacheKey, Role};
use super::payload::{CompactTensor, Payload};
use super::pool::BufferPool;
use super::spill::{self, ColdTier, SpillSlot};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Hot,
    Cold,
}

#[derive(Clone, Debug)]
pub struct StoreConfig {
    /// Hot-tier byte budget; `None` never evicts.
    pub hot_budget: Option<u64>,
    /// Steps ahead of the current one that [`CacheStore::prefetch_ahead`] schedules.
    pub prefetch_horizon: u32,
    /// Load prefetched entries on a background thread instead of inline.
    pub background: bool,
    /// Artificial delay added to every cold-tier read.
    pub cold_latency: Option<Duration>,
    /// Directory for the cold-tier temp file; the system default if unset.
    pub spill_dir: Option<PathBuf>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            hot_budget: None,
            prefetch_horizon: 1,
            background: true,
            cold_latency: None,
            spill_dir: None,
        }
    }
}

/// Snapshot of store occupancy and transfer counters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: u64,
    pub hot_entries: u64,
    pub cold_entries: u64,
    pub hot_bytes: u64,
    pub cold_bytes: u64,
    pub total_bytes: u64,
    /// Hot→cold spills plus cold→hot loads.
    pub transfers: u64,
    pub transfer_bytes: u64,
    pub transfer_ms: f64,
    pub prefetch_hits: u64,
    pub blocking_loads: u64,
    pub evictions: u64,
    pub oversize_warnings: u64,
    pub pool_reuses: u64,
    pub pool_allocations: u64,
    pub pool_peak: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompactionReport {
    pub entries_compacted: u64,
    pub bytes_before: u64,
    pub bytes_after: u64,
}

enum Residence {
    Hot(Arc<Payload>),
    Cold,
    /// Prefetch requested; waits for hot-tier room before loading.
    Queued,
    Loading,
}

struct Slot {
    res: Residence,
    bytes: u64,
    /// Promoted by a prefetch and not read since.
    prefetched: bool,
    generation: u64,
    /// Up-to-date copy in the cold file, if any.
    spill: Option<SpillSlot>,
    /// Current step at the last read.
    read_at: Option<u32>,
}

#[derive(Default)]
struct Counters {
    transfers: u64,
    transfer_bytes: u64,
    transfer_nanos: u128,
    prefetch_hits: u64,
    blocking_loads: u64,
    evictions: u64,
    oversize_warnings: u64,
}

struct State {
    slots: HashMap<CacheKey, Slot>,
    hot_bytes: u64,
    cold_bytes: u64,
    budget: Option<u64>,
    current_step: u32,
    next_generation: u64,
    counters: Counters,
    /// Prefetch requests in issue order; stale keys are skipped.
    queue: VecDeque<CacheKey>,
    /// Bytes of admitted prefetches not yet installed.
    inflight_bytes: u64,
}

/// Admitted prefetch: key, cold copy, generation, reserved bytes.
type LoadJob = (CacheKey, SpillSlot, u64, u64);

struct Shared {
    state: Mutex<State>,
    loaded: Condvar,
    // lock order: state, then cold
    cold: Mutex<ColdTier>,
    pool: Mutex<BufferPool>,
    latency: Option<Duration>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Larger sorts first for eviction: past steps, entries already read this
/// step, then the farthest future.
fn distance_rank(key: CacheKey, slot: &Slot, current: u32) -> (bool, u32) {
    if key.step < current {
        (true, current - key.step)
    } else if key.step == current && slot.read_at == Some(current) {
        (true, 0)
    } else {
        (false, key.step - current)
    }
}

impl Shared {
    fn evict_locked(&self, st: &mut State, pin: Option<CacheKey>) -> Result<()> {
        let Some(budget) = st.budget else {
            return Ok(());
        };
        while st.hot_bytes > budget {
            let cur = st.current_step;
            let victim = st
                .slots
                .iter()
                .filter(|(k, s)| matches!(s.res, Residence::Hot(_)) && Some(**k) != pin && s.bytes <= budget)
                .max_by_key(|(k, s)| (!s.prefetched, distance_rank(**k, s, cur), s.bytes, **k))
                .map(|(k, _)| *k);
            let Some(key) = victim else {
                st.counters.oversize_warnings += 1;
                log::warn!(
                    "hot tier holds {} bytes over a {budget}-byte budget; remaining entries are pinned or oversized",
                    st.hot_bytes
                );
                break;
            };
            let t0 = Instant::now();
            let slot = st.slots.get_mut(&key).expect("victim exists");
            if slot.spill.is_none() {
                let Residence::Hot(p) = &slot.res else { unreachable!() };
                slot.spill = Some(lock(&self.cold).append(key, p)?);
            }
            slot.res = Residence::Cold;
            slot.prefetched = false;
            let bytes = slot.bytes;
            st.hot_bytes -= bytes;
            st.cold_bytes += bytes;
            let c = &mut st.counters;
            c.transfers += 1;
            c.transfer_bytes += bytes;
            c.evictions += 1;
            c.transfer_nanos += t0.elapsed().as_nanos();
        }
        Ok(())
    }

    /// Moves queued prefetches to `Loading` while the hot tier has room for
    /// them without evicting anything needed sooner.
    fn admit_locked(&self, st: &mut State) -> Vec<LoadJob> {
        let cur = st.current_step;
        let mut jobs = Vec::new();
        while let Some(&key) = st.queue.front() {
            let Some(slot) = st.slots.get(&key).filter(|s| matches!(s.res, Residence::Queued)) else {
                st.queue.pop_front();
                continue;
            };
            let (bytes, generation) = (slot.bytes, slot.generation);
            if let Some(budget) = st.budget.filter(|&b| bytes <= b) {
                let rank = distance_rank(key, slot, cur);
                let free: u64 = st
                    .slots
                    .iter()
                    .filter(|(k, s)| {
                        matches!(s.res, Residence::Hot(_)) && !s.prefetched && distance_rank(**k, s, cur) > rank
                    })
                    .map(|(_, s)| s.bytes)
                    .sum();
                if st.hot_bytes + st.inflight_bytes + bytes > budget + free {
                    break;
                }
            }
            st.queue.pop_front();
            let slot = st.slots.get_mut(&key).expect("queued slot exists");
            slot.res = Residence::Loading;
            let spill = slot.spill.expect("cold slot has a spill copy");
            st.inflight_bytes += bytes;
            jobs.push((key, spill, generation, bytes));
        }
        jobs
    }

    /// Reads a `Loading` slot from the cold file and installs it hot.
    /// `reserved` releases an admission reservation.
    fn finish_load(&self, key: CacheKey, spill: SpillSlot, generation: u64, reserved: u64) -> Result<Arc<Payload>> {
        let t0 = Instant::now();
        let read = lock(&self.cold).read(spill);
        if let Some(d) = self.latency {
            thread::sleep(d);
        }
        let elapsed = t0.elapsed().as_nanos();
        let mut st = lock(&self.state);
        st.inflight_bytes -= reserved;
        let payload = match read {
            Ok(p) => Arc::new(p),
            Err(e) => {
                if let Some(s) = st.slots.get_mut(&key).filter(|s| s.generation == generation) {
                    s.res = Residence::Cold;
                }
                self.loaded.notify_all();
                return Err(e);
            }
        };
        let c = &mut st.counters;
        c.transfers += 1;
        c.transfer_bytes += spill.len;
        c.transfer_nanos += elapsed;
        let mut installed = false;
        if let Some(s) = st.slots.get_mut(&key).filter(|s| s.generation == generation) {
            s.res = Residence::Hot(Arc::clone(&payload));
            let b = s.bytes;
            st.hot_bytes += b;
            st.cold_bytes -= b;
            installed = true;
        }
        let res = if installed { self.evict_locked(&mut st, Some(key)) } else { Ok(()) };
        self.loaded.notify_all();
        res.map(|_| payload)
    }

    /// Payload without touching tiers or counters.
    fn peek(&self, st: &State, key: CacheKey) -> Result<Arc<Payload>> {
        let slot = st.slots.get(&key).ok_or(Error::CacheMiss(key))?;
        match &slot.res {
            Residence::Hot(p) => Ok(Arc::clone(p)),
            _ => Ok(Arc::new(lock(&self.cold).read(slot.spill.expect("cold slot has a spill copy"))?)),
        }
    }
}

struct Worker {
    tx: Option<mpsc::Sender<LoadJob>>,
    handle: Option<JoinHandle<()>>,
}

/// Two-tier activation cache.
///
/// Entries are immutable once stored; the hot tier is memory, the cold tier a
/// temporary file. Eviction moves the entries farthest from the current step
/// to the cold tier; prefetch promotes a step's entries on a background
/// thread so the compute thread finds them hot.
pub struct CacheStore {
    shared: Arc<Shared>,
    config: StoreConfig,
    worker: Option<Worker>,
}

impl CacheStore {
    pub fn new(config: StoreConfig) -> Result<Self> {
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                slots: HashMap::new(),
                hot_bytes: 0,
                cold_bytes: 0,
                budget: config.hot_budget,
                current_step: 0,
                next_generation: 0,
                counters: Counters::default(),
                queue: VecDeque::new(),
                inflight_bytes: 0,
            }),
            loaded: Condvar::new(),
            cold: Mutex::new(ColdTier::new(config.spill_dir.as_deref())?),
            pool: Mutex::new(BufferPool::default()),
            latency: config.cold_latency,
        });
        let worker = if config.background {
            let (tx, rx) = mpsc::channel::<LoadJob>();
            let sh = Arc::clone(&shared);
            let handle = thread::Builder::new()
                .name("cache-transfer".into())
                .spawn(move || {
                    for (key, spill, generation, reserved) in rx {
                        if let Err(e) = sh.finish_load(key, spill, generation, reserved) {
                            log::error!("background load of {key} failed: {e}");
                        }
                    }
                })?;
            Some(Worker {
                tx: Some(tx),
                handle: Some(handle),
            })
        } else {
            None
        };
        Ok(CacheStore { shared, config, worker })
    }

    pub fn unbounded() -> Result<Self> {
        Self::new(StoreConfig::default())
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn put(&self, key: CacheKey, payload: Payload) -> Result<()> {
        self.insert(key, payload, false)
    }

    /// Like [`put`](Self::put) but replaces an existing entry.
    pub fn overwrite(&self, key: CacheKey, payload: Payload) -> Result<()> {
        self.insert(key, payload, true)
    }

    fn insert(&self, key: CacheKey, payload: Payload, overwrite: bool) -> Result<()> {
        self.insert_shared(key, Arc::new(payload), overwrite)
    }

    fn insert_shared(&self, key: CacheKey, payload: Arc<Payload>, overwrite: bool) -> Result<()> {
        let bytes = payload.byte_len();
        let mut st = lock(&self.shared.state);
        if let Some(old) = st.slots.get(&key) {
            if !overwrite {
                return Err(Error::DuplicateKey(key));
            }
            let b = old.bytes;
            match old.res {
                Residence::Hot(_) => st.hot_bytes -= b,
                _ => st.cold_bytes -= b,
            }
        }
        let generation = st.next_generation;
        st.next_generation += 1;
        st.slots.insert(
            key,
            Slot {
                res: Residence::Hot(payload),
                bytes,
                prefetched: false,
                generation,
                spill: None,
                read_at: None,
            },
        );
        st.hot_bytes += bytes;
        let res = self.shared.evict_locked(&mut st, Some(key));
        self.shared.loaded.notify_all();
        res
    }

    pub fn put_tensor(&self, key: CacheKey, t: Tensor4) -> Result<()> {
        self.put(key, Payload::Tensor(t))
    }

    pub fn put_stats(&self, key: CacheKey, v: Vec<f32>) -> Result<()> {
        self.put(key, Payload::Stats(v))
    }

    /// Returns the payload, loading it from the cold tier if necessary.
    ///
    /// A get on an entry being prefetched waits for that load instead of
    /// issuing a second one.
    pub fn get(&self, key: CacheKey) -> Result<Arc<Payload>> {
        let p = self.get_inner(key)?;
        // a read of the current step may free room for queued prefetches
        self.kick();
        Ok(p)
    }

    fn get_inner(&self, key: CacheKey) -> Result<Arc<Payload>> {
        let mut st = lock(&self.shared.state);
        let cur = st.current_step;
        loop {
            let slot = st.slots.get_mut(&key).ok_or(Error::CacheMiss(key))?;
            match &slot.res {
                Residence::Hot(p) => {
                    let p = Arc::clone(p);
                    slot.read_at = Some(cur);
                    if slot.prefetched {
                        slot.prefetched = false;
                        st.counters.prefetch_hits += 1;
                    }
                    return Ok(p);
                }
                Residence::Loading => {
                    st = self.shared.loaded.wait(st).unwrap_or_else(|e| e.into_inner());
                }
                Residence::Cold | Residence::Queued => {
                    let spill = slot.spill.expect("cold slot has a spill copy");
                    let generation = slot.generation;
                    slot.res = Residence::Loading;
                    slot.prefetched = false;
                    slot.read_at = Some(cur);
                    st.counters.blocking_loads += 1;
                    drop(st);
                    return self.shared.finish_load(key, spill, generation, 0);
                }
            }
        }
    }

    /// Starts queued prefetches that now fit.
    fn kick(&self) {
        let jobs = {
            let mut st = lock(&self.shared.state);
            if st.queue.is_empty() {
                return;
            }
            self.shared.admit_locked(&mut st)
        };
        self.dispatch(jobs);
    }

    fn dispatch(&self, jobs: Vec<LoadJob>) {
        for job in jobs {
            let job = match self.worker.as_ref().and_then(|w| w.tx.as_ref()) {
                Some(tx) => match tx.send(job) {
                    Ok(()) => continue,
                    Err(mpsc::SendError(job)) => job,
                },
                None => job,
            };
            let (key, spill, generation, reserved) = job;
            if let Err(e) = self.shared.finish_load(key, spill, generation, reserved) {
                log::error!("prefetch of {key} failed: {e}");
            }
        }
    }

    /// Dense tensor view of an entry; compacted entries are zero where dropped.
    pub fn get_tensor(&self, key: CacheKey) -> Result<Tensor4> {
        self.get(key)?.to_tensor()
    }

    pub fn get_stats(&self, key: CacheKey) -> Result<Vec<f32>> {
        Ok(self.get(key)?.as_stats()?.to_vec())
    }

    /// Schedules every cold entry of `step` for promotion and returns.
    ///
    /// Loads start once the hot tier can take them without evicting an
    /// entry that is needed sooner and not yet read.
    pub fn prefetch(&self, step: u32) {
        let jobs = {
            let mut st = lock(&self.shared.state);
            let mut keys: Vec<CacheKey> = st
                .slots
                .iter_mut()
                .filter(|(k, s)| k.step == step && matches!(s.res, Residence::Cold))
                .map(|(k, s)| {
                    s.res = Residence::Queued;
                    s.prefetched = true;
                    *k
                })
                .collect();
            keys.sort();
            st.queue.extend(keys);
            self.shared.admit_locked(&mut st)
        };
        self.dispatch(jobs);
    }

    /// Prefetches the `prefetch_horizon` steps after `step`.
    pub fn prefetch_ahead(&self, step: u32) {
        for s in 1..=self.config.prefetch_horizon {
            self.prefetch(step.saturating_add(s));
        }
    }

    /// Step used as the origin of eviction distances.
    pub fn set_current_step(&self, step: u32) {
        lock(&self.shared.state).current_step = step;
        self.kick();
    }

    pub fn current_step(&self) -> u32 {
        lock(&self.shared.state).current_step
    }

    pub fn set_budget(&self, budget: Option<u64>) -> Result<()> {
        {
            let mut st = lock(&self.shared.state);
            st.budget = budget;
            self.shared.evict_locked(&mut st, None)?;
        }
        self.kick();
        Ok(())
    }

    pub fn budget(&self) -> Option<u64> {
        lock(&self.shared.state).budget
    }

    /// Spills until the hot tier fits the budget. Entries larger than the
    /// budget stay hot and raise an oversize warning.
    pub fn evict(&self) -> Result<()> {
        let mut st = lock(&self.shared.state);
        self.shared.evict_locked(&mut st, None)
    }

    pub fn contains(&self, key: CacheKey) -> bool {
        lock(&self.shared.state).slots.contains_key(&key)
    }

    pub fn tier(&self, key: CacheKey) -> Option<Tier> {
        lock(&self.shared.state).slots.get(&key).map(|s| match s.res {
            Residence::Hot(_) => Tier::Hot,
            _ => Tier::Cold,
        })
    }

    pub fn entry_bytes(&self, key: CacheKey) -> Option<u64> {
        lock(&self.shared.state).slots.get(&key).map(|s| s.bytes)
    }

    pub fn is_compacted(&self, key: CacheKey) -> Result<bool> {
        let st = lock(&self.shared.state);
        Ok(matches!(*self.shared.peek(&st, key)?, Payload::Compacted(_)))
    }

    /// All keys in ascending order.
    pub fn keys(&self) -> Vec<CacheKey> {
        let mut k: Vec<_> = lock(&self.shared.state).slots.keys().copied().collect();
        k.sort();
        k
    }

    pub fn len(&self) -> usize {
        lock(&self.shared.state).slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_bytes(&self) -> u64 {
        let st = lock(&self.shared.state);
        st.hot_bytes + st.cold_bytes
    }

    fn wait_idle<'a>(&'a self, mut st: MutexGuard<'a, State>) -> MutexGuard<'a, State> {
        while st.slots.values().any(|s| matches!(s.res, Residence::Loading)) {
            st = self.shared.loaded.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st
    }

    /// Rewrites spatial activations to keep only pixels outside `mask`.
    ///
    /// `mask` is OR-pooled to each entry's resolution. An entry is replaced
    /// only when the compact form is strictly smaller; statistics, attention
    /// maps and latents stay whole. Tiers and counters are unchanged.
    pub fn compact(&self, mask: &BinaryMask) -> Result<CompactionReport> {
        let st = lock(&self.shared.state);
        let mut st = self.wait_idle(st);
        let mut report = CompactionReport {
            bytes_before: st.hot_bytes + st.cold_bytes,
            ..Default::default()
        };
        let mut keys: Vec<CacheKey> = st.slots.keys().filter(|k| k.role.is_spatial_activation()).copied().collect();
        keys.sort();
        for key in keys {
            let payload = self.shared.peek(&st, key)?;
            let Payload::Tensor(t) = &*payload else { continue };
            let s = t.shape();
            let Ok(pooled) = mask.pooled_to(s.h, s.w) else { continue };
            if pooled.is_empty() {
                continue;
            }
            let compact = Payload::Compacted(CompactTensor::from_tensor(t, &pooled.complement())?);
            let nb = compact.byte_len();
            let slot = st.slots.get_mut(&key).expect("key listed");
            if nb >= slot.bytes {
                continue;
            }
            let ob = slot.bytes;
            slot.bytes = nb;
            let hot = match slot.res {
                Residence::Hot(_) => {
                    slot.res = Residence::Hot(Arc::new(compact));
                    slot.spill = None;
                    true
                }
                _ => {
                    slot.spill = Some(lock(&self.shared.cold).append(key, &compact)?);
                    false
                }
            };
            if hot {
                st.hot_bytes = st.hot_bytes - ob + nb;
            } else {
                st.cold_bytes = st.cold_bytes - ob + nb;
            }
            report.entries_compacted += 1;
        }
        report.bytes_after = st.hot_bytes + st.cold_bytes;
        Ok(report)
    }

    pub fn stats(&self) -> CacheStats {
        let st = lock(&self.shared.state);
        let pool = lock(&self.shared.pool).stats();
        let hot_entries = st.slots.values().filter(|s| matches!(s.res, Residence::Hot(_))).count() as u64;
        let c = &st.counters;
        CacheStats {
            entries: st.slots.len() as u64,
            hot_entries,
            cold_entries: st.slots.len() as u64 - hot_entries,
            hot_bytes: st.hot_bytes,
            cold_bytes: st.cold_bytes,
            total_bytes: st.hot_bytes + st.cold_bytes,
            transfers: c.transfers,
            transfer_bytes: c.transfer_bytes,
            transfer_ms: c.transfer_nanos as f64 / 1e6,
            prefetch_hits: c.prefetch_hits,
            blocking_loads: c.blocking_loads,
            evictions: c.evictions,
            oversize_warnings: c.oversize_warnings,
            pool_reuses: pool.reuses,
            pool_allocations: pool.allocations,
            pool_peak: pool.peak_outstanding,
        }
    }

    /// Zeroed buffer of `shape` from the shape-keyed pool.
    pub fn acquire_buffer(&self, shape: Shape4) -> Tensor4 {
        lock(&self.shared.pool).acquire(shape)
    }

    pub fn release_buffer(&self, t: Tensor4) {
        lock(&self.shared.pool).release(t)
    }

    fn snapshot(&self) -> Result<Vec<(CacheKey, Arc<Payload>)>> {
        let st = lock(&self.shared.state);
        let st = self.wait_idle(st);
        let mut keys: Vec<CacheKey> = st.slots.keys().copied().collect();
        keys.sort();
        keys.into_iter().map(|k| Ok((k, self.shared.peek(&st, k)?))).collect()
    }

    /// Independent store with the same configuration and entries; counters
    /// start from zero. Payloads are shared, not copied.
    pub fn duplicate(&self) -> Result<CacheStore> {
        let copy = CacheStore::new(self.config.clone())?;
        copy.set_current_step(self.current_step());
        copy.set_budget(self.budget())?;
        for (k, p) in self.snapshot()? {
            copy.insert_shared(k, p, false)?;
        }
        Ok(copy)
    }

    /// Persists every entry, hot or cold, to a standalone spill file.
    pub fn save_spill(&self, path: &Path) -> Result<()> {
        let snap = self.snapshot()?;
        spill::save_spill(path, snap.iter().map(|(k, p)| (*k, &**p)))
    }

    /// Opens a store populated from a file written by [`save_spill`](Self::save_spill).
    pub fn load_spill(path: &Path, config: StoreConfig) -> Result<CacheStore> {
        let store = CacheStore::new(config)?;
        for (k, p) in spill::load_spill(path)? {
            store.put(k, p)?;
        }
        Ok(store)
    }

    /// Keys of one step with the given role, ascending by layer.
    pub fn keys_for(&self, step: u32, role: Role) -> Vec<CacheKey> {
        self.keys().into_iter().filter(|k| k.step == step && k.role == role).collect()
    }
}

impl Drop for CacheStore {
    fn drop(&mut self) {
        if let Some(w) = self.worker.as_mut() {
            w.tx.take();
            if let Some(h) = w.handle.take() {
                let _ = h.join();
            }
        }
    }
}

impl std::fmt::Debug for CacheStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CacheStore")
            .field("config", &self.config)
            .field("stats", &self.stats())
            .finish()
    }
}

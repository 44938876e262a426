//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use sha2::{Digest, Sha256};
use sparse_edit_core::bench::{median, square_mask};
use sparse_edit_core::cache::{CacheKey, CacheStore, Payload, Role, StoreConfig, Tier};
use sparse_edit_core::mask::{difference_mask, otsu_threshold, BinaryMask, DiffMap, MaskStatus, MaskWindow};
use sparse_edit_core::sparse::{
    apsc_select, sparse_conv, sparse_cross_attention, sparse_self_attention, SparseLayerContext,
    DEFAULT_BLOCK_CANDIDATES,
};
use sparse_edit_core::tensor::{
    conv2d, cross_attention_block, group_norm, io as ft4, self_attention_block, Shape4, Tensor4,
};
use sparse_edit_core::unet::{latent_key, EditOutcome, EditSession, Pipeline, PromptTokens, UNetConfig};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(
        elapsed < Duration::from_secs(limit_s),
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn oracle_suite() -> Check {
    let t0 = Instant::now();
    let mut r = rng(0xacce);
    let (mut conv_err, mut gn_err, mut attn_err) = (0f64, 0f64, 0f64);
    for _ in 0..100 {
        let (h, w) = (r.random_range(1..=32), r.random_range(1..=32));
        let (ci, co) = (r.random_range(1..=16), r.random_range(1..=16));
        let k = [1, 3, 5][r.random_range(0..3)];
        let x = rand_tensor(&mut r, Shape4::new(1, ci, h, w), 1.0);
        let wts = rand_conv(&mut r, ci, co, k);
        conv_err = conv_err.max(max_diff_f64(conv2d(&x, &wts).unwrap().data(), &naive_conv(&x, &wts)));

        let groups = [1, 2, 4, 8, 16][r.random_range(0..5)];
        let c = groups * r.random_range(1..=16 / groups);
        let x = rand_tensor(&mut r, Shape4::new(1, c, h, w), 2.0);
        let gamma: Vec<f32> = (0..c).map(|_| r.random_range(0.5..1.5)).collect();
        let beta: Vec<f32> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
        let got = group_norm(&x, groups, &gamma, &beta, 1e-5).unwrap().output;
        gn_err = gn_err.max(max_diff_f64(got.data(), &naive_group_norm(&x, groups, &gamma, &beta, 1e-5)));

        let c = r.random_range(1..=16);
        let (ah, aw) = (r.random_range(1..=16), r.random_range(1..=16));
        let x = rand_tensor(&mut r, Shape4::new(1, c, ah, aw), 1.0);
        let sa = rand_attention(&mut r, c, c);
        let toks = tokens_f64(&x, 0);
        let want: Vec<f64> = naive_residual_attention(&sa, &toks, &toks).into_iter().flatten().collect();
        let got: Vec<f64> = tokens_f64(&self_attention_block(&x, &sa).unwrap(), 0).into_iter().flatten().collect();
        let td = r.random_range(1..=16);
        let nt = r.random_range(1..=8);
        let text = rand_matrix(&mut r, nt, td, 1.0);
        let ca = rand_attention(&mut r, c, td);
        let want_ca: Vec<f64> = naive_residual_attention(&ca, &toks, &rows_f64(&text)).into_iter().flatten().collect();
        let got_ca: Vec<f64> = tokens_f64(&cross_attention_block(&x, &ca, &text, None).unwrap(), 0).into_iter().flatten().collect();
        for (a, b) in got.iter().zip(&want).chain(got_ca.iter().zip(&want_ca)) {
            attn_err = attn_err.max((a - b).abs());
        }
    }
    let worst = conv_err.max(gn_err).max(attn_err);
    ensure(worst <= 1e-5, format!("max error conv {conv_err:.2e}, norm {gn_err:.2e}, attention {attn_err:.2e}"))?;
    within(t0.elapsed(), 60)?;
    Ok(format!(
        "100 instances per op; max error conv {conv_err:.1e}, norm {gn_err:.1e}, attention {attn_err:.1e}; {:.1}s",
        t0.elapsed().as_secs_f64()
    ))
}

fn otsu() -> Check {
    let t0 = Instant::now();
    let mut r = rng(0x0750);
    for i in 0..1000 {
        let (h, w) = (r.random_range(1..=32), r.random_range(1..=32));
        let values: Vec<f32> = match i % 3 {
            0 => (0..h * w).map(|_| r.random_range(0.0..=1.0)).collect(),
            // quantized values put many pixels exactly on candidate boundaries
            1 => (0..h * w).map(|_| r.random_range(0..=16) as f32 / 16.0).collect(),
            _ => (0..h * w).map(|_| if r.random_bool(0.2) { r.random_range(0.6..=1.0) } else { r.random_range(0.0..0.3) }).collect(),
        };
        let d = DiffMap::from_values(h, w, values.clone()).unwrap();
        let got = otsu_threshold(&d);
        match exhaustive_otsu(&values) {
            Some((eps, obj, bits)) if !d.is_degenerate() => {
                ensure(got.epsilon == eps, format!("map {i}: epsilon {} vs {eps}", got.epsilon))?;
                ensure((got.objective - obj).abs() <= 1e-12 * obj.max(1.0), format!("map {i}: objective"))?;
                ensure(got.mask.bits() == &bits[..], format!("map {i}: mask"))?;
            }
            _ => ensure(got.status == MaskStatus::NoEdit, format!("map {i}: expected no edit"))?,
        }
    }
    let d = DiffMap::from_values(1, 4, vec![0.1, 0.2, 0.8, 0.9]).unwrap();
    let ex = otsu_threshold(&d);
    // 0.1225 up to the f32 representation of the inputs
    ensure((ex.objective - 0.1225).abs() < 1e-7, format!("worked example objective {}", ex.objective))?;
    ensure(ex.mask.active_indices() == vec![2, 3], "worked example mask")?;
    within(t0.elapsed(), 10)?;
    Ok(format!(
        "1000 maps match the 256-candidate search; worked example objective {:.7}, mask {{2,3}}; {:.1}s",
        ex.objective,
        t0.elapsed().as_secs_f64()
    ))
}

fn apsc() -> Check {
    let t0 = Instant::now();
    let mut r = rng(0xa95c);
    for i in 0..500 {
        let (h, w) = (r.random_range(1..=64), r.random_range(1..=64));
        let p = [0.001, 0.01, 0.05, 0.2, 0.6][i % 5];
        let m = rand_mask(&mut r, h, w, p);
        let plan = apsc_select(&m, (3, 3), &DEFAULT_BLOCK_CANDIDATES).map_err(|e| e.to_string())?;
        let (f, block) = exhaustive_apsc(&m, 3, &DEFAULT_BLOCK_CANDIDATES);
        ensure(plan.cost == f, format!("mask {i}: cost {} vs exhaustive {f}", plan.cost))?;
        ensure(plan.block == block, format!("mask {i}: block {:?} vs {block:?}", plan.block))?;
    }
    let full = apsc_select(&BinaryMask::full(32, 32), (3, 3), &DEFAULT_BLOCK_CANDIDATES).unwrap();
    ensure(full.block == (4, 4) && full.cost == 1024, format!("full mask gave {:?}, f={}", full.block, full.cost))?;
    within(t0.elapsed(), 30)?;
    Ok(format!("500 masks match exhaustive f; full 32x32 -> block (4,4), f=1024; {:.1}s", t0.elapsed().as_secs_f64()))
}

fn sparse_equivalence() -> Check {
    let mut r = rng(0x5e);
    let shape = Shape4::new(1, 16, 64, 64);
    let mut notes = Vec::new();
    for frac in [0.05, 0.15, 0.30] {
        let x = rand_tensor(&mut r, shape, 1.0);
        let cached = rand_tensor(&mut r, shape, 1.0);
        let mask = mask_with_fraction(&mut r, 64, 64, frac);
        let ctx = SparseLayerContext::new(1, 0).with_output(cached.clone());

        let wts = rand_conv(&mut r, 16, 16, 3);
        let plan = apsc_select(&mask, (3, 3), &DEFAULT_BLOCK_CANDIDATES).unwrap();
        let y = sparse_conv(&x, &wts, &plan, &ctx, &mask).map_err(|e| e.to_string())?;
        let (conv_in, conv_out) = split_compare(&y, &conv2d(&x, &wts).unwrap(), &cached, &mask);

        let ca = rand_attention(&mut r, 16, 8);
        let text = rand_matrix(&mut r, 6, 8, 1.0);
        let y = sparse_cross_attention(&x, &ca, &text, &ctx, &mask).map_err(|e| e.to_string())?;
        let (ca_in, ca_out) = split_compare(&y, &cross_attention_block(&x, &ca, &text, None).unwrap(), &cached, &mask);

        ensure(conv_in <= 1e-5 && conv_out, format!("{frac}: conv inside {conv_in:e}, outside identical {conv_out}"))?;
        ensure(ca_in <= 1e-5 && ca_out, format!("{frac}: cross-attn inside {ca_in:e}, outside identical {ca_out}"))?;
        notes.push(format!("{:.0}%: conv {conv_in:.0e}, ca {ca_in:.0e}", frac * 100.0));
    }
    let x = rand_tensor(&mut r, shape, 1.0);
    let cached = rand_tensor(&mut r, shape, 1.0);
    let ctx = SparseLayerContext::new(1, 0).with_output(cached.clone());
    let sa = rand_attention(&mut r, 16, 16);
    let full = sparse_self_attention(&x, &sa, &ctx, &BinaryMask::full(64, 64)).unwrap();
    let full_err = full.max_abs_diff(&self_attention_block(&x, &sa).unwrap());
    ensure(full_err <= 1e-5, format!("self-attn full mask error {full_err:e}"))?;
    let empty = sparse_self_attention(&x, &sa, &ctx, &BinaryMask::empty(64, 64)).unwrap();
    ensure(empty.bit_eq(&cached), "self-attn empty mask changed the cache")?;
    let (py, px) = (17, 40);
    let one = sparse_self_attention(&x, &sa, &ctx, &BinaryMask::rect(64, 64, py, px, 1, 1)).unwrap();
    let tok: Vec<f64> = (0..16).map(|c| x.at(0, c, py, px) as f64).collect();
    let want: Vec<f64> = linear_f64(&sa.to_out, &linear_f64(&sa.to_v, &tok)).iter().zip(&tok).map(|(a, b)| a + b).collect();
    let single_err = (0..16).map(|c| (one.at(0, c, py, px) as f64 - want[c]).abs()).fold(0.0, f64::max);
    ensure(single_err <= 1e-5, format!("singleton token error {single_err:e}"))?;
    Ok(format!("{}; self-attn full {full_err:.0e}, empty exact, singleton {single_err:.0e}", notes.join(", ")))
}

fn sha(t: &Tensor4) -> String {
    hex::encode(Sha256::digest(ft4::to_bytes(t)))
}

fn outside_identical(a: &Tensor4, b: &Tensor4, mask: &BinaryMask) -> bool {
    let s = a.shape();
    (0..s.c).all(|c| (0..s.plane()).all(|p| mask.get_index(p) || a.plane(0, c)[p].to_bits() == b.plane(0, c)[p].to_bits()))
}

struct Shared {
    pipeline: Pipeline,
    base: CacheStore,
    old: PromptTokens,
    new: PromptTokens,
}

fn setup() -> (Shared, Duration) {
    let t0 = Instant::now();
    let pipeline = Pipeline::new(UNetConfig::default()).unwrap();
    let base = CacheStore::unbounded().unwrap();
    let old = PromptTokens::new(vec![2, 7, 4, 1, 8]);
    let new = PromptTokens::new(vec![2, 7, 9, 1, 8]);
    pipeline.generate_dense(&old, Some(&base)).unwrap();
    (Shared { pipeline, base, old, new }, t0.elapsed())
}

fn user_edit(s: &Shared, mask: BinaryMask, store: &CacheStore) -> EditOutcome {
    let session = EditSession::new(s.old.clone(), s.new.clone()).with_user_mask(mask);
    s.pipeline.edit(&session, store).unwrap()
}

fn end_to_end(s: &Shared, gen_time: Duration) -> Check {
    let t0 = Instant::now();
    let cached = s.base.get_tensor(latent_key(20)).unwrap();

    let same = EditSession::new(s.old.clone(), s.old.clone());
    let a = s.pipeline.edit(&same, &s.base.duplicate().unwrap()).map_err(|e| e.to_string())?;
    ensure(a.latent.bit_eq(&cached), "(a) identical prompts did not return the cached latent")?;
    ensure(a.phase2_macs == 0, format!("(a) phase-2 MACs {}", a.phase2_macs))?;

    let b = user_edit(s, BinaryMask::full(64, 64), &s.base.duplicate().unwrap());
    let dense = s.pipeline.generate_dense(&s.new, None).unwrap().latent;
    let b_err = b.latent.max_abs_diff(&dense);
    ensure(b_err <= 1e-3, format!("(b) full mask differs from dense by {b_err:e}"))?;

    let user_mask = square_mask(64, 64, 0.15).unwrap();
    let c1 = user_edit(s, user_mask.clone(), &s.base.duplicate().unwrap());
    ensure(outside_identical(&c1.latent, &cached, &user_mask), "(c) user-mask edit changed outside pixels")?;
    let detected = EditSession::new(s.old.clone(), s.new.clone());
    let c2 = s.pipeline.edit(&detected, &s.base.duplicate().unwrap()).map_err(|e| e.to_string())?;
    ensure(outside_identical(&c2.latent, &cached, &c2.mask), "(c) detected edit changed outside pixels")?;

    let total = gen_time + t0.elapsed();
    within(total, 120)?;
    Ok(format!(
        "(a) exact, phase-2 MACs 0; (b) max diff {b_err:.1e}; (c) outside identical for user mask and detected mask ({:.0}% of latent); {:.1}s",
        c2.edit_size() * 100.0,
        total.as_secs_f64()
    ))
}

struct SweepPoint {
    size: f64,
    ratio: f64,
    speedup: f64,
    bytes_after: u64,
}

fn run_sweep(s: &Shared) -> Vec<SweepPoint> {
    let repeats = 3;
    let mut dense_ms: Vec<f64> = (0..repeats)
        .map(|_| {
            let t0 = Instant::now();
            s.pipeline.generate_dense(&s.new, None).unwrap();
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    let dense_ms = median(&mut dense_ms);
    [0.05, 0.15, 0.30]
        .into_iter()
        .map(|size| {
            let mask = square_mask(64, 64, size).unwrap();
            // warm-up run, not timed
            let mut last = user_edit(s, mask.clone(), &s.base.duplicate().unwrap());
            let mut times = Vec::new();
            for _ in 0..repeats {
                let store = s.base.duplicate().unwrap();
                let t0 = Instant::now();
                last = user_edit(s, mask.clone(), &store);
                times.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            SweepPoint {
                size,
                ratio: last.macs.ratio().unwrap(),
                speedup: dense_ms / median(&mut times),
                bytes_after: last.compaction.bytes_after,
            }
        })
        .collect()
}

fn sweep_check(points: &[SweepPoint]) -> Check {
    let desc = points
        .iter()
        .map(|p| format!("{:.0}%: {:.2}x MACs, {:.2}x time", p.size * 100.0, p.ratio, p.speedup))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(points.windows(2).all(|w| w[0].ratio > w[1].ratio), format!("MACs ratio not decreasing: {desc}"))?;
    ensure(points[0].ratio >= 2.0, format!("MACs ratio at 5% below 2: {desc}"))?;
    ensure(points[0].speedup > 1.5, format!("speedup at 5% not above 1.5: {desc}"))?;
    Ok(desc)
}

fn scripted_prefetch() -> Result<u64, String> {
    let layers = 6u32;
    let tensor = |seed: u32| rand_tensor(&mut rng(seed as u64), Shape4::new(1, 8, 16, 16), 1.0);
    let e = Payload::Tensor(tensor(0)).byte_len();
    let store = CacheStore::new(StoreConfig {
        hot_budget: None,
        prefetch_horizon: 1,
        background: true,
        cold_latency: None,
        spill_dir: None,
    })
    .map_err(|e| e.to_string())?;
    let key = |t: u32, l: u32| CacheKey::new(t, l, Role::LayerOutput);
    store.set_current_step(1);
    for t in 1..=2 {
        for l in 0..layers {
            store.put_tensor(key(t, l), tensor(t * 100 + l)).unwrap();
        }
    }
    store.set_budget(Some(layers as u64 * e)).unwrap();
    ensure((0..layers).all(|l| store.tier(key(2, l)) == Some(Tier::Cold)), "step 2 did not start cold")?;
    for t in 1..=2 {
        store.set_current_step(t);
        store.prefetch_ahead(t);
        for l in 0..layers {
            ensure(store.get_tensor(key(t, l)).unwrap().bit_eq(&tensor(t * 100 + l)), "payload changed")?;
        }
    }
    Ok(store.stats().blocking_loads)
}

fn cache_checks(s: &Shared, points: &[SweepPoint]) -> Check {
    let mask = square_mask(64, 64, 0.05).unwrap();
    let unlimited = user_edit(s, mask.clone(), &s.base.duplicate().unwrap());
    let limited_store = s.base.duplicate().unwrap();
    limited_store.set_budget(Some(s.base.total_bytes() / 4)).unwrap();
    let limited = user_edit(s, mask, &limited_store);
    let (ha, hb) = (sha(&unlimited.latent), sha(&limited.latent));
    ensure(ha == hb, format!("(a) hash differs: {ha} vs {hb}"))?;
    ensure(limited.stats.transfers > 0, "(a) 25% budget caused no transfers")?;

    let bytes: Vec<u64> = points.iter().map(|p| p.bytes_after).collect();
    ensure(bytes.windows(2).all(|w| w[0] > w[1]), format!("(b) bytes not decreasing: {bytes:?}"))?;

    let blocking = scripted_prefetch()?;
    ensure(blocking == 0, format!("(c) blocking loads {blocking}"))?;
    Ok(format!(
        "(a) hash {}.. equal, {} transfers under 25% budget; (b) bytes {bytes:?}; (c) blocking_loads 0",
        &ha[..12],
        limited.stats.transfers
    ))
}

fn mask_fixture() -> Check {
    let mut r = rng(0xf1);
    let shape = Shape4::new(1, 4, 64, 64);
    let xs: Vec<Tensor4> = (0..10).map(|_| rand_tensor(&mut r, shape, 1.0)).collect();
    let (py, px) = (20, 33);
    let ys: Vec<Tensor4> = xs
        .iter()
        .map(|x| {
            let mut y = x.clone();
            for c in 0..4 {
                for dy in 0..8 {
                    for dx in 0..8 {
                        let v = y.at(0, c, py + dy, px + dx) + r.random_range(0.5..1.5);
                        y.set(0, c, py + dy, px + dx, v);
                    }
                }
            }
            y
        })
        .collect();
    let window = MaskWindow::new(5, 10).unwrap();
    let res = difference_mask(&xs, &ys, window, 1).map_err(|e| e.to_string())?;
    let want = BinaryMask::rect(64, 64, py - 1, px - 1, 10, 10);
    ensure(res.status == MaskStatus::Edit && res.mask == want, format!("mask has {} pixels, expected 100", res.mask.active_count()))?;
    let same = difference_mask(&xs, &xs, window, 1).map_err(|e| e.to_string())?;
    ensure(same.status == MaskStatus::NoEdit && same.mask.is_empty(), "identical sequences were not a no-edit")?;
    Ok("8x8 patch -> 10x10 mask (patch plus rim); identical -> no edit".into())
}

fn main() {
    let mut results: Vec<(u32, &str, Check)> = Vec::new();
    let mut record = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Check| {
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let (tag, detail) = match &res {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n} [{name}]: {tag} - {detail}");
        results.push((n, name, res));
    };
    record(1, "kernel oracles", &mut oracle_suite);
    record(2, "otsu threshold", &mut otsu);
    record(3, "apsc block selection", &mut apsc);
    record(4, "sparse/dense equivalence", &mut sparse_equivalence);
    let (shared, gen_time) = setup();
    record(5, "end-to-end edit", &mut || end_to_end(&shared, gen_time));
    let points = run_sweep(&shared);
    record(6, "edit-size sweep", &mut || sweep_check(&points));
    record(7, "cache store", &mut || cache_checks(&shared, &points));
    record(8, "mask fixture", &mut mask_fixture);

    let failed: Vec<_> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

mod common;

use common::*;
use proptest::prelude::*;
use sparse_edit_core::mask::BinaryMask;
use sparse_edit_core::sparse::{
    apsc_select, approx_group_norm, gather, sparse_conv, sparse_cross_attention, sparse_self_attention,
    SparseLayerContext, DEFAULT_BLOCK_CANDIDATES,
};
use sparse_edit_core::tensor::{conv2d, cross_attention_block, group_norm, self_attention_block, Shape4};
use sparse_edit_core::Error;

proptest! {
    #[test]
    fn apsc_is_optimal(seed in any::<u64>(), h in 1usize..48, w in 1usize..48, p in 0.0f64..0.2) {
        let m = rand_mask(&mut rng(seed), h, w, p);
        let plan = apsc_select(&m, (3, 3), &DEFAULT_BLOCK_CANDIDATES).unwrap();
        let (f, block) = exhaustive_apsc(&m, 3, &DEFAULT_BLOCK_CANDIDATES);
        prop_assert_eq!(plan.cost, f);
        prop_assert_eq!(plan.block, block);
        // every active pixel lies in some planned tile
        for i in m.active_indices() {
            let (y, x) = (i / w, i % w);
            prop_assert!(plan.origins.iter().any(|&(oy, ox)| y >= oy && y < oy + plan.tile.0 && x >= ox && x < ox + plan.tile.1));
        }
    }

    #[test]
    fn sparse_conv_equals_dense_inside_and_cache_outside(seed in any::<u64>(), h in 3usize..24, w in 3usize..24,
                                                         c_in in 1usize..6, c_out in 1usize..6, p in 0.0f64..0.5) {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, Shape4::new(1, c_in, h, w), 1.0);
        let wts = rand_conv(&mut r, c_in, c_out, 3);
        let cached = rand_tensor(&mut r, Shape4::new(1, c_out, h, w), 1.0);
        let mask = rand_mask(&mut r, h, w, p);
        let plan = apsc_select(&mask, (3, 3), &DEFAULT_BLOCK_CANDIDATES).unwrap();
        let ctx = SparseLayerContext::new(1, 0).with_output(cached.clone());
        let y = sparse_conv(&x, &wts, &plan, &ctx, &mask).unwrap();
        let dense = conv2d(&x, &wts).unwrap();
        let (inside, outside_eq) = split_compare(&y, &dense, &cached, &mask);
        prop_assert_eq!(inside, 0.0);
        prop_assert!(outside_eq);
    }
}

#[test]
fn full_32_mask_plan() {
    let plan = apsc_select(&BinaryMask::full(32, 32), (3, 3), &DEFAULT_BLOCK_CANDIDATES).unwrap();
    assert_eq!(plan.block, (4, 4));
    assert_eq!(plan.cost, 1024);
}

#[test]
fn empty_mask_plan_skips_conv() {
    let mask = BinaryMask::empty(16, 16);
    let plan = apsc_select(&mask, (3, 3), &DEFAULT_BLOCK_CANDIDATES).unwrap();
    assert!(plan.origins.is_empty());
    assert_eq!(plan.cost, 0);
    let mut r = rng(1);
    let x = rand_tensor(&mut r, Shape4::new(1, 2, 16, 16), 1.0);
    let cached = rand_tensor(&mut r, Shape4::new(1, 2, 16, 16), 1.0);
    let y = sparse_conv(&x, &rand_conv(&mut r, 2, 2, 3), &plan, &SparseLayerContext::new(0, 0).with_output(cached.clone()), &mask).unwrap();
    assert!(y.bit_eq(&cached));
}

#[test]
fn gather_pads_with_zeros_at_the_border() {
    let mut r = rng(2);
    let x = rand_tensor(&mut r, Shape4::new(1, 1, 8, 8), 1.0);
    let mask = BinaryMask::rect(8, 8, 0, 0, 1, 1);
    let plan = apsc_select(&mask, (3, 3), &DEFAULT_BLOCK_CANDIDATES).unwrap();
    let g = gather(&x, &plan).unwrap();
    let (bh, bw) = plan.block;
    for by in 0..bh {
        for bx in 0..bw {
            let v = g.at(0, 0, by, bx);
            if by == 0 || bx == 0 {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, x.at(0, 0, by - 1, bx - 1));
            }
        }
    }
}

#[test]
fn approx_norm_with_current_stats_equals_dense() {
    let mut r = rng(5);
    let x = rand_tensor(&mut r, Shape4::new(1, 8, 16, 16), 2.0);
    let gamma = vec![1.2; 8];
    let beta = vec![0.1; 8];
    let dense = group_norm(&x, 4, &gamma, &beta, 1e-5).unwrap();
    let cached = rand_tensor(&mut r, x.shape(), 1.0);
    let mask = rand_mask(&mut r, 16, 16, 0.3);
    let ctx = SparseLayerContext::new(1, 2).with_output(cached.clone()).with_stats(dense.stats.clone());
    let y = approx_group_norm(&x, &ctx, &gamma, &beta, 1e-5, &mask).unwrap();
    let (inside, outside_eq) = split_compare(&y, &dense.output, &cached, &mask);
    assert_eq!(inside, 0.0);
    assert!(outside_eq);
}

#[test]
fn approx_norm_uses_cached_not_current_stats() {
    let mut r = rng(6);
    let x = rand_tensor(&mut r, Shape4::new(1, 4, 8, 8), 1.0);
    let old = rand_tensor(&mut r, x.shape(), 3.0);
    let stats = group_norm(&old, 2, &[1.0; 4], &[0.0; 4], 1e-5).unwrap().stats;
    let mask = BinaryMask::full(8, 8);
    let ctx = SparseLayerContext::new(1, 2).with_stats(stats.clone());
    let y = approx_group_norm(&x, &ctx, &[1.0; 4], &[0.0; 4], 1e-5, &mask).unwrap();
    let (m, v) = (stats.mean[0] as f64, stats.var[0] as f64);
    let want = (x.at(0, 0, 3, 3) as f64 - m) / (v + 1e-5).sqrt();
    assert!((y.at(0, 0, 3, 3) as f64 - want).abs() < 1e-5);
}

#[test]
fn missing_cache_entries_are_cache_misses() {
    let mut r = rng(7);
    let x = rand_tensor(&mut r, Shape4::new(1, 4, 8, 8), 1.0);
    let mask = BinaryMask::rect(8, 8, 0, 0, 2, 2);
    let ctx = SparseLayerContext::new(3, 9);
    assert!(matches!(approx_group_norm(&x, &ctx, &[1.0; 4], &[0.0; 4], 1e-5, &mask), Err(Error::CacheMiss(_))));
    let w = rand_attention(&mut r, 4, 4);
    assert!(matches!(sparse_self_attention(&x, &w, &ctx, &mask), Err(Error::CacheMiss(k)) if k.step == 3 && k.layer_id == 9));
}

#[test]
fn attention_below_gate_is_rejected() {
    let mut r = rng(8);
    let x = rand_tensor(&mut r, Shape4::new(1, 4, 4, 4), 1.0);
    let w = rand_attention(&mut r, 4, 4);
    let mut ctx = SparseLayerContext::new(0, 0);
    ctx.gated = false;
    assert!(matches!(sparse_self_attention(&x, &w, &ctx, &BinaryMask::full(4, 4)), Err(Error::Contract(_))));
}

#[test]
fn cross_attention_rows_equal_dense() {
    let mut r = rng(9);
    let x = rand_tensor(&mut r, Shape4::new(1, 8, 16, 16), 1.0);
    let w = rand_attention(&mut r, 8, 6);
    let text = rand_matrix(&mut r, 5, 6, 1.0);
    let cached = rand_tensor(&mut r, x.shape(), 1.0);
    let mask = rand_mask(&mut r, 16, 16, 0.2);
    let ctx = SparseLayerContext::new(1, 0).with_output(cached.clone());
    let y = sparse_cross_attention(&x, &w, &text, &ctx, &mask).unwrap();
    let dense = cross_attention_block(&x, &w, &text, None).unwrap();
    let (inside, outside_eq) = split_compare(&y, &dense, &cached, &mask);
    assert!(inside <= 1e-5);
    assert!(outside_eq);
}

#[test]
fn self_attention_full_empty_and_singleton() {
    let mut r = rng(10);
    let x = rand_tensor(&mut r, Shape4::new(1, 8, 12, 12), 1.0);
    let w = rand_attention(&mut r, 8, 8);
    let cached = rand_tensor(&mut r, x.shape(), 1.0);
    let ctx = SparseLayerContext::new(1, 0).with_output(cached.clone());

    let full = sparse_self_attention(&x, &w, &ctx, &BinaryMask::full(12, 12)).unwrap();
    assert!(full.max_abs_diff(&self_attention_block(&x, &w).unwrap()) <= 1e-5);

    let empty = sparse_self_attention(&x, &w, &ctx, &BinaryMask::empty(12, 12)).unwrap();
    assert!(empty.bit_eq(&cached));

    // one active token attends only to itself: x + to_out(to_v(x))
    let (py, px) = (5, 7);
    let one = sparse_self_attention(&x, &w, &ctx, &BinaryMask::rect(12, 12, py, px, 1, 1)).unwrap();
    let tok: Vec<f64> = (0..8).map(|c| x.at(0, c, py, px) as f64).collect();
    let want: Vec<f64> = linear_f64(&w.to_out, &linear_f64(&w.to_v, &tok)).iter().zip(&tok).map(|(a, b)| a + b).collect();
    for c in 0..8 {
        assert!((one.at(0, c, py, px) as f64 - want[c]).abs() <= 1e-5);
    }
    let single = BinaryMask::rect(12, 12, py, px, 1, 1);
    let (_, outside_eq) = split_compare(&one, &one, &cached, &single);
    assert!(outside_eq);
}

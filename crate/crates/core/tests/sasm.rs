mod common;

use common::{max_abs, random_cube, rng};
use cst_core::nn::ParamStore;
use cst_core::optics::HsiCube;
use cst_core::sasm::{
    pool_mask_for_stage, reference_mask, select_patches, selection_count, sparsity_loss, total_loss, total_loss_var,
    BinaryPatchMask, EstimatorConfig, SparsityEstimator, SparsityMask,
};
use cst_core::tensor::grad_check_many;
use cst_core::{Graph, Tensor};

fn random_mask(r: &mut cst_core::rng::Stream, h: usize, w: usize) -> SparsityMask {
    SparsityMask::new(h, w, (0..h * w).map(|_| r.uniform()).collect()).unwrap()
}

#[test]
fn reference_mask_and_losses_match_loop_oracles() {
    let mut r = rng(20);
    for _ in 0..120 {
        let (h, w, nb) = (1 + r.below(5), 1 + r.below(5), 1 + r.below(4));
        let (a, b) = (random_cube(&mut r, h, w, nb), random_cube(&mut r, h, w, nb));
        let mref = reference_mask(&a, &b).unwrap();
        assert!(max_abs(&mref.values, &common::reference_mask(&a.data, &b.data, h, w, nb)) <= 1e-10);

        let pred = random_mask(&mut r, h, w);
        let ls = sparsity_loss(&pred, &mref).unwrap();
        assert!((ls - common::mean_sq_diff(&pred.values, &mref.values)).abs() <= 1e-10);

        let lambda = r.uniform_range(0.0, 3.0);
        let t = total_loss(&a, &b, &pred, &mref, lambda).unwrap();
        let want = common::mean_sq_diff(&a.data, &b.data) + lambda * ls;
        assert!((t.total - want).abs() <= 1e-10);
        assert_eq!(t.total, t.l2 + lambda * t.sparsity);
    }
}

#[test]
fn loss_edge_cases() {
    let x = HsiCube::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let shifted = HsiCube::new(2, 2, 1, x.data.iter().map(|v| v + 0.2).collect()).unwrap();
    let m = reference_mask(&shifted, &x).unwrap();
    assert!(m.values.iter().all(|v| (v - 0.2).abs() < 1e-15));
    assert!(reference_mask(&x, &x).unwrap().values.iter().all(|&v| v == 0.0));
    let zero = SparsityMask::new(2, 2, vec![0.0; 4]).unwrap();
    let one = SparsityMask::new(2, 2, vec![1.0; 4]).unwrap();
    assert_eq!(sparsity_loss(&zero, &one).unwrap(), 1.0);
    let perfect = total_loss(&x, &x, &zero, &zero, 2.0).unwrap();
    assert_eq!(perfect.total, 0.0);
    let l2_only = total_loss(&shifted, &x, &zero, &one, 0.0).unwrap();
    assert_eq!(l2_only.total, l2_only.l2);
}

#[test]
fn selection_matches_argmax_oracle_on_a_sweep() {
    let mut r = rng(21);
    for (h, w, patch) in [(8, 8, 2), (16, 8, 4), (12, 12, 3), (32, 32, 8), (6, 9, 3)] {
        for sigma in [0.0, 0.1, 0.25, 0.3, 0.5, 0.75, 0.9, 1.0] {
            let m = random_mask(&mut r, h, w);
            let sel = select_patches(&m, patch, sigma).unwrap();
            let cells = (h / patch) * (w / patch);
            let k = ((1.0 - sigma) * cells as f64 + 1e-9).floor() as usize;
            assert_eq!(sel.selected(), k);
            assert_eq!(sel.grid, common::select(&m.values, h, w, patch, k));
        }
    }
    let big = SparsityMask::new(256, 256, vec![0.0; 256 * 256]).unwrap();
    let sel = select_patches(&big, 16, 0.5).unwrap();
    assert_eq!(selection_count(256, 0.5), 128);
    assert_eq!(sel.selected(), 128);
    assert_eq!(sel.selected_indices(), (0..128).collect::<Vec<_>>());
}

#[test]
fn selection_is_permutation_equivariant() {
    let mut r = rng(22);
    let (patch, rows, cols) = (2, 3, 4);
    let m = random_mask(&mut r, rows * patch, cols * patch);
    let perm: Vec<usize> = vec![5, 2, 11, 0, 7, 9, 1, 10, 3, 8, 4, 6];
    let mut moved = vec![0.0; m.values.len()];
    for (dst, &src) in perm.iter().enumerate() {
        let (dr, dc, sr, sc) = (dst / cols, dst % cols, src / cols, src % cols);
        for y in 0..patch {
            for x in 0..patch {
                moved[(dr * patch + y) * cols * patch + dc * patch + x] =
                    m.values[(sr * patch + y) * cols * patch + sc * patch + x];
            }
        }
    }
    let moved = SparsityMask::new(m.height, m.width, moved).unwrap();
    for sigma in [0.25, 0.5, 0.75] {
        let a = select_patches(&m, patch, sigma).unwrap();
        let b = select_patches(&moved, patch, sigma).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(b.grid[dst], a.grid[src]);
        }
    }
}

#[test]
fn stage_pooling_matches_oracle() {
    let mut r = rng(23);
    for _ in 0..100 {
        let (rows, cols) = (4 * (1 + r.below(3)), 4 * (1 + r.below(3)));
        let grid: Vec<u8> = (0..rows * cols).map(|_| r.bernoulli(0.5) as u8).collect();
        let md = BinaryPatchMask {
            rows,
            cols,
            patch: 4,
            grid: grid.clone(),
        };
        assert_eq!(pool_mask_for_stage(&md, 1).unwrap(), md);
        for (stage, f) in [(2, 2), (3, 4)] {
            let p = pool_mask_for_stage(&md, stage).unwrap();
            assert_eq!((p.rows, p.cols), (rows / f, cols / f));
            assert_eq!(p.grid, common::pool(&grid, rows, cols, f));
        }
    }
    let empty = BinaryPatchMask::all(4, 4, 8, false);
    assert_eq!(pool_mask_for_stage(&empty, 3).unwrap().selected(), 0);
}

#[test]
fn estimator_shapes_and_gradients() {
    let mut store = ParamStore::new();
    let mut r = rng(24);
    let est = SparsityEstimator::new(&mut store, &mut r, "e", EstimatorConfig::new(3, 2));
    let x = Tensor::uniform(&[8, 8, 3], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let xv = g.constant(x.clone());
    let (x0, ms) = est.forward(&mut g, &b, xv).unwrap();
    assert_eq!(g.shape(x0), &[8, 8, 2]);
    assert_eq!(g.shape(ms), &[8, 8]);
    assert!(g.value(ms).data().iter().all(|&v| v >= 0.0));

    let head_b = est.head.bias.unwrap();
    let mut r2 = rng(25);
    let wx0 = Tensor::uniform(&[8, 8, 2], -1.0, 1.0, &mut r2);
    let wms = Tensor::uniform(&[8, 8], -1.0, 1.0, &mut r2);
    let mut shifted = store.clone();
    // Keep the mask logits away from the ReLU kink.
    shifted.get_mut(head_b).data_mut()[2] = 5.0;
    let err = grad_check_many(
        |g, v| {
            let b = shifted.bind_with(g, &[(est.head.weight, v[1])]);
            let (x0, ms) = est.forward(g, &b, v[0])?;
            let (a, c) = (g.constant(wx0.clone()), g.constant(wms.clone()));
            let p = g.mul(x0, a)?;
            let q = g.mul(ms, c)?;
            let (p, q) = (g.sum(p)?, g.sum(q)?);
            g.add(p, q)
        },
        &[x, shifted.get(est.head.weight).clone()],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn total_loss_gradients_and_detached_target() {
    let mut r = rng(26);
    let gt = random_cube(&mut r, 4, 4, 3);
    let rec = Tensor::uniform(&[4, 4, 3], 0.0, 1.0, &mut r);
    let pred = Tensor::uniform(&[4, 4], 0.0, 1.0, &mut r);
    let err = grad_check_many(
        |g, v| Ok(total_loss_var(g, v[0], &gt, v[1], 0.0)?.total),
        &[rec.clone(), pred.clone()],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
    let fixed = rec.clone();
    let err = grad_check_many(
        |g, v| {
            let rv = g.constant(fixed.clone());
            Ok(total_loss_var(g, rv, &gt, v[0], 2.0)?.total)
        },
        std::slice::from_ref(&pred),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");

    // The reconstruction gradient is exactly the L2 gradient: the target mask
    // contributes nothing.
    let mut g = Graph::new();
    let (rv, pv) = (g.param(rec.clone()), g.param(pred));
    let loss = total_loss_var(&mut g, rv, &gt, pv, 2.0).unwrap();
    g.backward(loss.total).unwrap();
    let n = rec.len() as f64;
    let want: Vec<f64> = rec
        .data()
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| 2.0 * (a - b) / n)
        .collect();
    assert!(max_abs(g.grad(rv).unwrap().data(), &want) < 1e-15);
}

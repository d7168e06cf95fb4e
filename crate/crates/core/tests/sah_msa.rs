mod common;

use std::cell::RefCell;

use common::{max_abs, rng, rows_of};
use cst_core::sah_msa::{
    bucket_attention, bucketize, hash_codes, multi_round_attention, patch_token_indices, sah_msa_forward,
    AttentionWeights, HashParams, Projections, RoundWeighting, Routing, WindowAttention,
};
use cst_core::sasm::BinaryPatchMask;
use cst_core::tensor::grad_check_many;
use cst_core::{Graph, Tensor};

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

#[test]
fn hash_codes_and_buckets_match_oracles() {
    let mut r = rng(30);
    for _ in 0..100 {
        let (n, c) = (4 * (1 + r.below(8)), 1 + r.below(6));
        let x = Tensor::uniform(&[n, c], -2.0, 2.0, &mut r);
        let hp = HashParams::sample(c, r.uniform_range(0.2, 2.0), &mut r);
        let codes = hash_codes(&x, &hp).unwrap();
        let want: Vec<i64> = rows_of(&x).iter().map(|row| common::hash(row, &hp)).collect();
        assert_eq!(codes, want);
        let ba = bucketize(&codes, 4).unwrap();
        assert_eq!(ba.order, common::sorted_order(&codes));
    }
}

#[test]
fn bucketing_is_a_stable_partition() {
    let mut r = rng(31);
    for _ in 0..1000 {
        let codes: Vec<i64> = (0..256).map(|_| r.below(12) as i64 - 6).collect();
        let ba = bucketize(&codes, 64).unwrap();
        assert_eq!(ba.buckets(), 4);
        let mut seen = vec![false; 256];
        for b in 0..4 {
            assert_eq!(ba.bucket(b).len(), 64);
            for &t in ba.bucket(b) {
                assert!(!seen[t]);
                seen[t] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        for pair in ba.order.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            assert!(codes[a] < codes[b] || (codes[a] == codes[b] && a < b));
        }
    }
    assert!(bucketize(&[0; 10], 4).is_err());
}

#[test]
fn bucket_attention_matches_brute_force() {
    let mut r = rng(32);
    for _ in 0..30 {
        let (n, heads, hd) = (16, 1 + r.below(3), 1 + r.below(3));
        let c = heads * hd;
        let w = AttentionWeights::random(c, heads, &mut r).unwrap();
        let x = Tensor::uniform(&[n, c], -1.5, 1.5, &mut r);
        let hp = HashParams::sample(c, 0.5, &mut r);
        let ba = bucketize(&hash_codes(&x, &hp).unwrap(), 4).unwrap();
        let got = bucket_attention(&x, &ba, &w).unwrap();
        let want = common::masked_attention(&rows_of(&x), &ba.bucket_of(), &w);
        assert!(max_abs(got.heads.data(), &flat(&want.heads)) <= 1e-10);
        assert!(got.mass.data().iter().all(|&m| (m - 1.0).abs() <= 1e-12));
    }
}

#[test]
fn merged_rounds_match_oracle_for_both_weightings() {
    let mut r = rng(33);
    for logit_mass in [false, true] {
        let weighting = if logit_mass {
            RoundWeighting::LogitMass
        } else {
            RoundWeighting::Normalized
        };
        for _ in 0..20 {
            let (n, heads, hd, rounds) = (16, 2, 2, 1 + r.below(3));
            let w = AttentionWeights::random(heads * hd, heads, &mut r).unwrap();
            let x = Tensor::uniform(&[n, heads * hd], -1.5, 1.5, &mut r);
            let bas: Vec<_> = (0..rounds)
                .map(|_| {
                    let hp = HashParams::sample(heads * hd, 0.7, &mut r);
                    bucketize(&hash_codes(&x, &hp).unwrap(), 8).unwrap()
                })
                .collect();
            let got = multi_round_attention(&x, &bas, &w, weighting).unwrap();
            let oracles: Vec<_> = bas
                .iter()
                .map(|ba| common::masked_attention(&rows_of(&x), &ba.bucket_of(), &w))
                .collect();
            let want = common::merge_rounds(&oracles, &w, logit_mass);
            assert!(max_abs(got.data(), &flat(&want)) <= 1e-10);
        }
    }
}

#[test]
fn duplicated_round_equals_single_round() {
    let mut r = rng(34);
    let w = AttentionWeights::random(4, 2, &mut r).unwrap();
    let x = Tensor::uniform(&[16, 4], -1.0, 1.0, &mut r);
    let ba = bucketize(&hash_codes(&x, &HashParams::sample(4, 0.5, &mut r)).unwrap(), 4).unwrap();
    for weighting in [RoundWeighting::Normalized, RoundWeighting::LogitMass] {
        let one = multi_round_attention(&x, std::slice::from_ref(&ba), &w, weighting).unwrap();
        let three = multi_round_attention(&x, &[ba.clone(), ba.clone(), ba.clone()], &w, weighting).unwrap();
        assert!(max_abs(one.data(), three.data()) <= 1e-12);
    }
}

#[test]
fn collision_rate_falls_with_distance() {
    let mut r = rng(35);
    let c = 4;
    let base: Vec<f64> = (0..c).map(|_| r.uniform_range(-1.0, 1.0)).collect();
    let dir: Vec<f64> = (0..c).map(|_| r.normal()).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rates: Vec<f64> = [0.05, 0.3, 1.0, 3.0]
        .iter()
        .map(|&delta| {
            let far: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + delta * d / norm).collect();
            let pair = Tensor::new(&[2, c], [base.clone(), far].concat()).unwrap();
            let hits = (0..4000)
                .filter(|_| {
                    let codes = hash_codes(&pair, &HashParams::sample(c, 1.0, &mut r)).unwrap();
                    codes[0] == codes[1]
                })
                .count();
            hits as f64 / 4000.0
        })
        .collect();
    assert!(rates.windows(2).all(|p| p[1] < p[0]), "{rates:?}");
    assert!(rates[0] > 0.9 && rates[3] < 0.5, "{rates:?}");
}

struct Layer {
    w: AttentionWeights,
    geom: WindowAttention,
}

fn layer(seed: u64, channels: usize, heads: usize, patch: usize, m: usize, rounds: usize) -> Layer {
    let mut r = rng(seed);
    let w = AttentionWeights::random(channels, heads, &mut r).unwrap();
    let hash = (0..rounds).map(|_| HashParams::sample(channels, 0.5, &mut r)).collect();
    Layer {
        w,
        geom: WindowAttention {
            channels,
            patch,
            bucket_size: m,
            weighting: RoundWeighting::Normalized,
            hash,
        },
    }
}

fn bind(g: &mut Graph, w: &AttentionWeights) -> Projections {
    Projections {
        u: g.constant(w.u.clone()),
        v: g.constant(w.v.clone()),
        w_val: g.constant(w.w_val.clone()),
        w_out: g.constant(w.w_out.clone()),
        heads: w.heads,
        head_dim: w.head_dim,
    }
}

#[test]
fn checkerboard_mask_attends_only_selected_windows() {
    let l = layer(36, 4, 2, 4, 4, 2);
    let x = Tensor::uniform(&[8, 8, 4], -1.0, 1.0, &mut rng(37));
    let mask = BinaryPatchMask {
        rows: 2,
        cols: 2,
        patch: 4,
        grid: vec![1, 0, 0, 1],
    };
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let p = bind(&mut g, &l.w);
    let y = sah_msa_forward(&mut g, xv, &mask, p, &l.geom, &mut Routing::record()).unwrap();
    let y = g.value(y).clone();

    let idx = patch_token_indices(&mask, 8);
    let rows = rows_of(&x.clone().reshape(&[64, 4]).unwrap());
    for (cell, window) in idx.chunks(16).enumerate() {
        let tokens = Tensor::new(&[16, 4], window.iter().flat_map(|&i| rows[i].clone()).collect()).unwrap();
        let bas: Vec<_> = l
            .geom
            .hash
            .iter()
            .map(|hp| bucketize(&hash_codes(&tokens, hp).unwrap(), 4).unwrap())
            .collect();
        let want = multi_round_attention(&tokens, &bas, &l.w, RoundWeighting::Normalized).unwrap();
        for (t, &i) in window.iter().enumerate() {
            assert!(
                max_abs(&y.data()[i * 4..][..4], &want.data()[t * 4..][..4]) <= 1e-12,
                "cell {cell}"
            );
        }
    }
    for i in 0..64 {
        let (py, px) = ((i / 8) / 4, (i % 8) / 4);
        if mask.grid[py * 2 + px] == 0 {
            assert!(y.data()[i * 4..][..4].iter().all(|&v| v == 0.0));
        }
    }

    let none = BinaryPatchMask::all(2, 2, 4, false);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let p = bind(&mut g, &l.w);
    let y = sah_msa_forward(&mut g, xv, &none, p, &l.geom, &mut Routing::record()).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gradients_with_fixed_buckets() {
    let l = layer(38, 4, 2, 2, 2, 2);
    let mut r = rng(39);
    let x = Tensor::uniform(&[4, 4, 4], -1.0, 1.0, &mut r);
    let weight = Tensor::uniform(&[4, 4, 4], -1.0, 1.0, &mut r);
    let mask = BinaryPatchMask {
        rows: 2,
        cols: 2,
        patch: 2,
        grid: vec![1, 1, 0, 1],
    };
    let routing = RefCell::new(Routing::record());
    let f = |g: &mut Graph, v: &[cst_core::Var]| {
        let mut rt = routing.borrow_mut();
        rt.rewind();
        let p = Projections {
            u: v[1],
            v: v[2],
            w_val: v[3],
            w_out: v[4],
            heads: l.w.heads,
            head_dim: l.w.head_dim,
        };
        let y = sah_msa_forward(g, v[0], &mask, p, &l.geom, &mut rt)?;
        let c = g.constant(weight.clone());
        let yw = g.mul(y, c)?;
        g.sum(yw)
    };
    let inputs = [x, l.w.u.clone(), l.w.v.clone(), l.w.w_val.clone(), l.w.w_out.clone()];
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    f(&mut g, &vars).unwrap();
    let rec = routing.replace(Routing::record());
    routing.replace(rec.into_replay());
    let err = grad_check_many(f, &inputs, 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");
}

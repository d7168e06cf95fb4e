use std::cell::RefCell;

use cst_core::model::{count_params, CstConfig, CstModel, Sahab};
use cst_core::nn::ParamStore;
use cst_core::optics::{forward_measure, shift_back, CodedAperture, HsiCube, Measurement, NoiseSpec};
use cst_core::rng::{streams, Stream};
use cst_core::sah_msa::Routing;
use cst_core::sasm::BinaryPatchMask;
use cst_core::tensor::grad_check_many;
use cst_core::{Graph, Result, Tensor, Var};

fn scene(h: usize, w: usize, bands: usize, seed: u64) -> HsiCube {
    let mut r = Stream::new(seed, streams::TEST);
    HsiCube::new(h, w, bands, (0..h * w * bands).map(|_| r.uniform()).collect()).unwrap()
}

fn micro_measurement(seed: u64) -> (Measurement, CodedAperture) {
    let cfg = CstConfig::micro();
    let ap = CodedAperture::random(32, 32, seed);
    let y = forward_measure(&scene(32, 32, cfg.bands, seed), &ap, cfg.shift, NoiseSpec::none()).unwrap();
    (y, ap)
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut r = Stream::new(seed, streams::TEST);
    let w = g.constant(Tensor::uniform(g.shape(y), -1.0, 1.0, &mut r));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn randomize(store: &mut ParamStore, names: &[&str], seed: u64) {
    let mut r = Stream::new(seed, streams::TEST);
    for e in names {
        let id = store.find(e).unwrap();
        let t = store.get_mut(id);
        for v in t.data_mut() {
            *v = r.uniform_range(-0.3, 0.3);
        }
    }
}

#[test]
fn analytic_param_count_matches_built_shapes() {
    for cfg in [CstConfig::micro(), CstConfig::cst_s(), CstConfig::cst_m()] {
        let (_, store) = CstModel::new(cfg.clone(), 0).unwrap();
        assert_eq!(count_params(&cfg), store.trainable_count(), "{:?}", cfg.blocks);
    }
}

#[test]
fn preset_sizes_are_ordered() {
    let s = count_params(&CstConfig::cst_s());
    let m = count_params(&CstConfig::cst_m());
    let l = count_params(&CstConfig::cst_l());
    assert!(s < m && m < l, "{s} {m} {l}");
    assert_eq!(count_params(&CstConfig::cst_l_star()), l);
}

#[test]
fn untrained_model_returns_shift_back_estimate() {
    let (model, store) = CstModel::new(CstConfig::micro(), 5).unwrap();
    let (y, ap) = micro_measurement(1);
    let out = model.reconstruct(&store, &y, &ap).unwrap();
    let h = shift_back(&y, 4).unwrap();
    assert_eq!(out.cube.dims(), [32, 32, 4]);
    assert_eq!((out.sparsity.height, out.sparsity.width), (32, 32));
    assert_eq!(out.initial.data, h.data);
    assert_eq!(out.cube.data, h.data);
}

#[test]
fn forward_is_bit_deterministic() {
    let (model, mut store) = CstModel::new(CstConfig::micro(), 5).unwrap();
    randomize(&mut store, &["head.weight"], 2);
    let (y, ap) = micro_measurement(2);
    let a = model.reconstruct(&store, &y, &ap).unwrap();
    let b = model.reconstruct(&store, &y, &ap).unwrap();
    assert_eq!(a.cube.data, b.cube.data);
    assert_eq!(a.sparsity.values, b.sparsity.values);
}

#[test]
fn full_selection_ignores_mask_values() {
    let mut cfg = CstConfig::micro();
    cfg.sigma = 0.0;
    let (model, mut store) = CstModel::new(cfg, 9).unwrap();
    randomize(&mut store, &["head.weight", "head.bias"], 3);
    let (y, ap) = micro_measurement(3);
    let a = model.reconstruct(&store, &y, &ap).unwrap();
    assert_eq!(a.selection.selected(), 16);
    let bias = store.find("estimator.dec2.head.bias").unwrap();
    store.get_mut(bias).data_mut()[4] += 5.0;
    let b = model.reconstruct(&store, &y, &ap).unwrap();
    assert_ne!(a.sparsity.values, b.sparsity.values);
    assert_eq!(a.cube.data, b.cube.data);
}

#[test]
fn mismatched_aperture_is_rejected() {
    let (model, store) = CstModel::new(CstConfig::micro(), 0).unwrap();
    let (y, _) = micro_measurement(0);
    assert!(model.reconstruct(&store, &y, &CodedAperture::ones(32, 24)).is_err());
    let small = forward_measure(&scene(24, 24, 4, 0), &CodedAperture::ones(24, 24), 2, NoiseSpec::none()).unwrap();
    assert!(model.reconstruct(&store, &small, &CodedAperture::ones(24, 24)).is_err());
}

#[test]
fn zeroed_block_is_identity() {
    let cfg = CstConfig::micro();
    let mut store = ParamStore::new();
    let mut r = Stream::new(0, streams::TEST);
    let mut hr = Stream::new(1, streams::TEST);
    let blk = Sahab::new(&mut store, &mut r, &mut hr, "b", 4, &cfg).unwrap();
    blk.zero_outputs(&mut store);
    let x = scene(16, 16, 4, 4).to_tensor();
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let xv = g.constant(x.clone());
    let mask = BinaryPatchMask::all(2, 2, 8, true);
    let y = blk.forward(&mut g, &b, xv, &mask, &mut Routing::record()).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn block_gradients_match_finite_differences() {
    let cfg = CstConfig {
        head_dim: 4,
        ..CstConfig::micro()
    };
    let c = 8;
    let mut store = ParamStore::new();
    let mut r = Stream::new(0, streams::TEST);
    let mut hr = Stream::new(1, streams::TEST);
    let blk = Sahab::new(&mut store, &mut r, &mut hr, "b", c, &cfg).unwrap();
    let x = Tensor::uniform(&[16, 16, c], -1.0, 1.0, &mut r);
    let mut mask = BinaryPatchMask::all(2, 2, 8, true);
    mask.grid[2] = 0;
    let w_out = store.find("b.attn.w_out").unwrap();
    let u = store.find("b.attn.u").unwrap();

    let routing = RefCell::new(Routing::record());
    let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let b = store.bind_with(g, &[(u, v[1]), (w_out, v[2])]);
        let mut rt = routing.borrow_mut();
        rt.rewind();
        let y = blk.forward(g, &b, v[0], &mask, &mut rt)?;
        weighted_sum(g, y, 7)
    };
    {
        let mut g = Graph::new();
        let vs: Vec<Var> = [&x, store.get(u), store.get(w_out)]
            .iter()
            .map(|t| g.constant((*t).clone()))
            .collect();
        f(&mut g, &vs).unwrap();
    }
    let rec = routing.replace(Routing::record());
    routing.replace(rec.into_replay());
    let err = grad_check_many(f, &[x.clone(), store.get(u).clone(), store.get(w_out).clone()], 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let (model, mut store) = CstModel::new(CstConfig::micro(), 11).unwrap();
    randomize(&mut store, &["head.weight", "head.bias"], 4);
    let (y, ap) = micro_measurement(4);
    let head_b = store.find("head.bias").unwrap();
    let embed_w = store.find("embed.weight").unwrap();

    let routing = RefCell::new(Routing::record());
    let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let b = store.bind_with(g, &[(head_b, v[1]), (embed_w, v[2])]);
        let mut rt = routing.borrow_mut();
        rt.rewind();
        let out = model.forward(g, &b, v[0], &ap, &mut rt)?;
        weighted_sum(g, out.reconstruction, 8)
    };
    let inputs = [y.to_tensor(), store.get(head_b).clone(), store.get(embed_w).clone()];
    {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        f(&mut g, &vs).unwrap();
    }
    let rec = routing.replace(Routing::record());
    assert_eq!(rec.selections().len(), 1);
    routing.replace(rec.into_replay());
    let err = grad_check_many(f, &inputs, 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");
}

//! Shared fixtures for the criterion benches.

use cst_core::model::{CstConfig, CstModel};
use cst_core::nn::ParamStore;
use cst_core::optics::{forward_measure, CodedAperture, Measurement, NoiseSpec};
use cst_core::rng::{streams, Stream};
use cst_core::sah_msa::{bucketize, hash_codes, AttentionWeights, BucketAssignment, HashParams};
use cst_core::synth::{synth_scene, SparsityProfile};
use cst_core::{Result, Tensor};

pub struct ForwardFixture {
    pub model: CstModel,
    pub store: ParamStore,
    pub measurement: Measurement,
    pub aperture: CodedAperture,
}

/// Untrained model plus one clean measurement of a synthetic scene.
pub fn forward_fixture(config: CstConfig, size: usize, seed: u64) -> Result<ForwardFixture> {
    let (model, store) = CstModel::new(config, seed)?;
    let c = &model.config;
    let scene = synth_scene(seed, size, size, c.bands, SparsityProfile::default())?;
    let aperture = CodedAperture::random(size, size, seed);
    let measurement = forward_measure(&scene, &aperture, c.shift, NoiseSpec::none())?;
    Ok(ForwardFixture {
        model,
        store,
        measurement,
        aperture,
    })
}

pub struct AttentionFixture {
    pub tokens: Tensor,
    pub weights: AttentionWeights,
    pub rounds: Vec<BucketAssignment>,
}

/// `n` random tokens of width `channels` hashed into buckets of `m`.
pub fn attention_fixture(n: usize, channels: usize, heads: usize, m: usize, rounds: usize) -> Result<AttentionFixture> {
    let mut rng = Stream::new(0, streams::TEST);
    let tokens = Tensor::randn(&[n, channels], &mut rng);
    let weights = AttentionWeights::random(channels, heads, &mut rng)?;
    let rounds = (0..rounds)
        .map(|_| bucketize(&hash_codes(&tokens, &HashParams::sample(channels, 1.0, &mut rng))?, m))
        .collect::<Result<_>>()?;
    Ok(AttentionFixture {
        tokens,
        weights,
        rounds,
    })
}

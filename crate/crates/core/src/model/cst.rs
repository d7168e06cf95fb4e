//! SAHAB blocks and the three-stage encoder-decoder.

use super::CstConfig;
use crate::error::{CstError, Result};
use crate::nn::{Bound, Conv2d, Deconv2x2, LayerNorm, ParamStore};
use crate::optics::{shift_back_var, CodedAperture};
use crate::rng::{streams, Stream};
use crate::sah_msa::{Routing, SahMsa};
use crate::sasm::{
    pool_mask_for_stage, select_patches, BinaryPatchMask, EstimatorConfig, SparsityEstimator, SparsityMask,
};
use crate::tensor::{ConvParams, Graph, Var};

/// conv1x1 (C -> 4C), GELU, depthwise 3x3, GELU, conv1x1 (4C -> C).
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub expand: Conv2d,
    pub depthwise: Conv2d,
    pub project: Conv2d,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut Stream, name: &str, c: usize) -> Self {
        FeedForward {
            expand: Conv2d::pointwise(store, rng, &format!("{name}.expand"), c, 4 * c),
            depthwise: Conv2d::depthwise(store, rng, &format!("{name}.dw"), 4 * c, 3, 1),
            project: Conv2d::pointwise(store, rng, &format!("{name}.project"), 4 * c, c),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let t = self.expand.forward(g, b, x)?;
        let t = g.gelu(t)?;
        let t = self.depthwise.forward(g, b, t)?;
        let t = g.gelu(t)?;
        self.project.forward(g, b, t)
    }
}

/// Pre-norm block: `x + SAH-MSA(LN(x))`, then `+ FFN(LN(.))`.
#[derive(Clone, Debug)]
pub struct Sahab {
    pub norm1: LayerNorm,
    pub attn: SahMsa,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl Sahab {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Stream,
        hash_rng: &mut Stream,
        name: &str,
        channels: usize,
        cfg: &CstConfig,
    ) -> Result<Self> {
        Ok(Sahab {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), channels),
            attn: SahMsa::new(
                store,
                rng,
                hash_rng,
                &format!("{name}.attn"),
                channels,
                cfg.head_dim,
                cfg.patch,
                cfg.bucket,
                cfg.rounds,
                cfg.hash_width,
                cfg.weighting,
            )?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), channels),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), channels),
        })
    }

    /// Zeroes both residual-branch output projections, making the block the identity.
    pub fn zero_outputs(&self, store: &mut ParamStore) {
        store.get_mut(self.attn.w_out).data_mut().fill(0.0);
        self.ffn.project.zero(store);
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        mask: &BinaryPatchMask,
        routing: &mut Routing,
    ) -> Result<Var> {
        let n = self.norm1.forward(g, b, x)?;
        let a = self.attn.forward(g, b, n, mask, routing)?;
        let x = g.add(x, a)?;
        let n = self.norm2.forward(g, b, x)?;
        let f = self.ffn.forward(g, b, n)?;
        g.add(x, f)
    }
}

/// Recorded outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Reconstruction `X' = X + R`, `[H, W, bands]`.
    pub reconstruction: Var,
    /// Predicted sparsity mask `M_s`, `[H, W]`.
    pub sparsity: Var,
    /// Initialized feature `X`, `[H, W, bands]`.
    pub initial: Var,
    /// Patch selection at full resolution.
    pub selection: BinaryPatchMask,
}

/// The full reconstruction network.
#[derive(Clone, Debug)]
pub struct CstModel {
    pub config: CstConfig,
    pub embed: Conv2d,
    pub estimator: SparsityEstimator,
    pub enc1: Vec<Sahab>,
    pub down1: Conv2d,
    pub enc2: Vec<Sahab>,
    pub down2: Conv2d,
    pub bottleneck: Vec<Sahab>,
    pub up2: Deconv2x2,
    pub dec2: Vec<Sahab>,
    pub up1: Deconv2x2,
    pub dec1: Vec<Sahab>,
    pub head: Conv2d,
}

impl CstModel {
    /// Builds the model and its parameters from `seed`.
    ///
    /// The embedding conv starts as `[I | 0]` so the initialized feature equals
    /// the shift-back estimate, and the residual head starts at zero, so an
    /// untrained model returns the shift-back estimate unchanged.
    pub fn new(config: CstConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Stream::new(seed, streams::WEIGHT_INIT);
        let mut hash_rng = Stream::new(seed, streams::HASH_PARAMS);
        let (c, nb) = (config.channels, config.bands);

        let embed = Conv2d::pointwise(&mut store, &mut rng, "embed", 2 * nb, nb);
        {
            let w = store.get_mut(embed.weight).data_mut();
            w.fill(0.0);
            for i in 0..nb {
                w[i * 2 * nb + i] = 1.0;
            }
        }
        store.get_mut(embed.bias.expect("bias")).data_mut().fill(0.0);

        let estimator = SparsityEstimator::new(&mut store, &mut rng, "estimator", EstimatorConfig::new(nb, c));

        let down_p = ConvParams {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        let mut stage = |store: &mut ParamStore, rng: &mut Stream, name: &str, count: usize, ch: usize| {
            (0..count)
                .map(|i| Sahab::new(store, rng, &mut hash_rng, &format!("{name}.{i}"), ch, &config))
                .collect::<Result<Vec<_>>>()
        };
        let [n1, n2, n3] = config.blocks;
        let enc1 = stage(&mut store, &mut rng, "enc1", n1, c)?;
        let down1 = Conv2d::new(&mut store, &mut rng, "down1", c, 2 * c, 4, down_p, true);
        let enc2 = stage(&mut store, &mut rng, "enc2", n2, 2 * c)?;
        let down2 = Conv2d::new(&mut store, &mut rng, "down2", 2 * c, 4 * c, 4, down_p, true);
        let bottleneck = stage(&mut store, &mut rng, "bottleneck", n3, 4 * c)?;
        let up2 = Deconv2x2::new(&mut store, &mut rng, "up2", 4 * c, 2 * c);
        let dec2 = stage(&mut store, &mut rng, "dec2", n2, 2 * c)?;
        let up1 = Deconv2x2::new(&mut store, &mut rng, "up1", 2 * c, c);
        let dec1 = stage(&mut store, &mut rng, "dec1", n1, c)?;
        let same3 = ConvParams {
            padding: 1,
            ..Default::default()
        };
        let head = Conv2d::new(&mut store, &mut rng, "head", c, nb, 3, same3, true);
        head.zero(&mut store);

        Ok((
            CstModel {
                config,
                embed,
                estimator,
                enc1,
                down1,
                enc2,
                down2,
                bottleneck,
                up2,
                dec2,
                up1,
                dec1,
                head,
            },
            store,
        ))
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Sahab> {
        self.enc1
            .iter()
            .chain(&self.enc2)
            .chain(&self.bottleneck)
            .chain(&self.dec2)
            .chain(&self.dec1)
    }

    /// Redraws every block's hash projections from `(seed, step)`.
    pub fn resample_hash(&self, store: &mut ParamStore, seed: u64, step: u64) -> Result<()> {
        let mut rng = Stream::new(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15), streams::HASH_PARAMS);
        for b in self.blocks() {
            b.attn.resample_hash(store, &mut rng)?;
        }
        Ok(())
    }

    /// Measurement `[H, W + shift*(bands-1)]` to reconstruction and sparsity mask.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        measurement: Var,
        aperture: &CodedAperture,
        routing: &mut Routing,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let init = shift_back_var(g, measurement, cfg.shift, cfg.bands)?;
        let (h, w) = (g.shape(init)[0], g.shape(init)[1]);
        if (h, w) != (aperture.height, aperture.width) {
            return Err(CstError::Config(format!(
                "measurement implies a {h}x{w} scene but the aperture is {}x{}",
                aperture.height, aperture.width
            )));
        }
        cfg.validate_geometry(h, w)?;

        let mask3d = g.constant(aperture.mask3d(cfg.bands).to_tensor());
        let cat = g.concat(&[init, mask3d], 2)?;
        let x = self.embed.forward(g, b, cat)?;

        let (x0, ms) = self.estimator.forward(g, b, x)?;
        let selection = routing.selection(|| {
            let m = SparsityMask::from_tensor(g.value(ms))?;
            select_patches(&m, cfg.patch, cfg.sigma)
        })?;
        let masks = [
            selection.clone(),
            pool_mask_for_stage(&selection, 2)?,
            pool_mask_for_stage(&selection, 3)?,
        ];

        let mut t = x0;
        for blk in &self.enc1 {
            t = blk.forward(g, b, t, &masks[0], routing)?;
        }
        let skip1 = t;
        t = self.down1.forward(g, b, t)?;
        for blk in &self.enc2 {
            t = blk.forward(g, b, t, &masks[1], routing)?;
        }
        let skip2 = t;
        t = self.down2.forward(g, b, t)?;
        for blk in &self.bottleneck {
            t = blk.forward(g, b, t, &masks[2], routing)?;
        }
        t = self.up2.forward(g, b, t)?;
        t = g.add(t, skip2)?;
        for blk in &self.dec2 {
            t = blk.forward(g, b, t, &masks[1], routing)?;
        }
        t = self.up1.forward(g, b, t)?;
        t = g.add(t, skip1)?;
        for blk in &self.dec1 {
            t = blk.forward(g, b, t, &masks[0], routing)?;
        }
        let residual = self.head.forward(g, b, t)?;
        let reconstruction = g.add(x, residual)?;
        Ok(ForwardOutput {
            reconstruction,
            sparsity: ms,
            initial: x,
            selection,
        })
    }

    /// Inference helper on plain values.
    pub fn reconstruct(
        &self,
        store: &ParamStore,
        measurement: &crate::optics::Measurement,
        aperture: &CodedAperture,
    ) -> Result<Reconstruction> {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let y = g.constant(measurement.to_tensor());
        let mut routing = Routing::record();
        let out = self.forward(&mut g, &b, y, aperture, &mut routing)?;
        Ok(Reconstruction {
            cube: crate::optics::HsiCube::from_tensor(g.value(out.reconstruction))?,
            sparsity: SparsityMask::from_tensor(g.value(out.sparsity))?,
            initial: crate::optics::HsiCube::from_tensor(g.value(out.initial))?,
            selection: out.selection,
        })
    }
}

/// Plain-value result of [`CstModel::reconstruct`].
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub cube: crate::optics::HsiCube,
    pub sparsity: SparsityMask,
    pub initial: crate::optics::HsiCube,
    pub selection: BinaryPatchMask,
}

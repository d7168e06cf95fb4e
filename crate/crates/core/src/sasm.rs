//! Spectra-aware screening: the sparsity estimator network, the sparsity
//! supervision losses, top-k patch selection and per-stage mask pooling.

use serde::{Deserialize, Serialize};

use crate::error::{CstError, Result};
use crate::nn::{Bound, Conv2d, Deconv2x2, ParamStore};
use crate::optics::HsiCube;
use crate::rng::Stream;
use crate::tensor::{ConvParams, Graph, Tensor, Var};

/// Continuous, nonnegative `H x W` sparsity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SparsityMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(CstError::dims("sparsity_mask", &[height, width], &[values.len()]));
        }
        Ok(SparsityMask { height, width, values })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[h, w] => SparsityMask::new(h, w, t.data().to_vec()),
            &[h, w, 1] => SparsityMask::new(h, w, t.data().to_vec()),
            s => Err(CstError::dims("sparsity_mask", s, &[0, 0])),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.values.clone()).expect("mask dims")
    }
}

/// 0/1 patch grid; each cell governs a `patch x patch` window of the feature
/// map it is applied to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryPatchMask {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub grid: Vec<u8>,
}

impl BinaryPatchMask {
    pub fn all(rows: usize, cols: usize, patch: usize, value: bool) -> Self {
        BinaryPatchMask {
            rows,
            cols,
            patch,
            grid: vec![value as u8; rows * cols],
        }
    }

    pub fn selected(&self) -> usize {
        self.grid.iter().map(|&v| v as usize).sum()
    }

    /// Row-major indices of selected cells.
    pub fn selected_indices(&self) -> Vec<usize> {
        (0..self.grid.len()).filter(|&i| self.grid[i] != 0).collect()
    }

    pub fn is_selected(&self, row: usize, col: usize) -> bool {
        self.grid[row * self.cols + col] != 0
    }
}

/// `k = floor((1 - sigma) * cells)`. A 1e-9 guard absorbs representation
/// error in `1 - sigma` (e.g. `1 - 0.9`).
pub fn selection_count(cells: usize, sigma: f64) -> usize {
    (((1.0 - sigma) * cells as f64) + 1e-9).floor() as usize
}

/// Marks the `k` patches with the largest average-pooled mask value.
/// Ties go to the smaller row-major patch index.
pub fn select_patches(m: &SparsityMask, patch: usize, sigma: f64) -> Result<BinaryPatchMask> {
    if patch == 0 || !m.height.is_multiple_of(patch) || !m.width.is_multiple_of(patch) {
        return Err(CstError::Config(format!(
            "mask {}x{} not divisible by patch size {patch}",
            m.height, m.width
        )));
    }
    if !(0.0..=1.0).contains(&sigma) {
        return Err(CstError::Config(format!("sparsity ratio {sigma} outside [0, 1]")));
    }
    let (rows, cols) = (m.height / patch, m.width / patch);
    let mut pooled = vec![0.0; rows * cols];
    for y in 0..m.height {
        for x in 0..m.width {
            pooled[(y / patch) * cols + x / patch] += m.values[y * m.width + x];
        }
    }
    let norm = (patch * patch) as f64;
    pooled.iter_mut().for_each(|v| *v /= norm);
    let k = selection_count(rows * cols, sigma);
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[b].total_cmp(&pooled[a]).then(a.cmp(&b)));
    let mut grid = vec![0u8; rows * cols];
    for &i in &order[..k] {
        grid[i] = 1;
    }
    Ok(BinaryPatchMask {
        rows,
        cols,
        patch,
        grid,
    })
}

/// Average-pools the grid by `2^(stage-1)` and re-binarizes at `>= 0.5`.
pub fn pool_mask_for_stage(md: &BinaryPatchMask, stage: usize) -> Result<BinaryPatchMask> {
    if stage == 0 {
        return Err(CstError::Config("stages are numbered from 1".into()));
    }
    let f = 1usize << (stage - 1);
    if !md.rows.is_multiple_of(f) || !md.cols.is_multiple_of(f) {
        return Err(CstError::Config(format!(
            "patch grid {}x{} not divisible by {f} for stage {stage}",
            md.rows, md.cols
        )));
    }
    let (rows, cols) = (md.rows / f, md.cols / f);
    let mut counts = vec![0usize; rows * cols];
    for r in 0..md.rows {
        for c in 0..md.cols {
            counts[(r / f) * cols + c / f] += md.grid[r * md.cols + c] as usize;
        }
    }
    // pooled >= 0.5  <=>  2 * count >= f^2
    let grid = counts.iter().map(|&n| (2 * n >= f * f) as u8).collect();
    Ok(BinaryPatchMask {
        rows,
        cols,
        patch: md.patch,
        grid,
    })
}

/// Band-averaged absolute reconstruction error; a constant target.
pub fn reference_mask(x_rec: &HsiCube, x_gt: &HsiCube) -> Result<SparsityMask> {
    if x_rec.dims() != x_gt.dims() {
        return Err(CstError::dims("reference_mask", &x_rec.dims(), &x_gt.dims()));
    }
    let n = x_rec.bands as f64;
    let values = x_rec
        .data
        .chunks(x_rec.bands)
        .zip(x_gt.data.chunks(x_gt.bands))
        .map(|(a, b)| a.iter().zip(b).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
        .collect();
    SparsityMask::new(x_rec.height, x_rec.width, values)
}

/// Mean squared difference between predicted and reference masks.
pub fn sparsity_loss(m_pred: &SparsityMask, m_ref: &SparsityMask) -> Result<f64> {
    if (m_pred.height, m_pred.width) != (m_ref.height, m_ref.width) {
        return Err(CstError::dims(
            "sparsity_loss",
            &[m_pred.height, m_pred.width],
            &[m_ref.height, m_ref.width],
        ));
    }
    let n = m_pred.values.len() as f64;
    Ok(m_pred
        .values
        .iter()
        .zip(&m_ref.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Loss terms of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub l2: f64,
    pub sparsity: f64,
    pub total: f64,
}

/// `L2(x_rec, x_gt) + lambda * Ls(m_pred, m_ref)`, both as mean squared errors.
pub fn total_loss(
    x_rec: &HsiCube,
    x_gt: &HsiCube,
    m_pred: &SparsityMask,
    m_ref: &SparsityMask,
    lambda: f64,
) -> Result<LossTerms> {
    if x_rec.dims() != x_gt.dims() {
        return Err(CstError::dims("total_loss", &x_rec.dims(), &x_gt.dims()));
    }
    let n = x_rec.data.len() as f64;
    let l2 = x_rec
        .data
        .iter()
        .zip(&x_gt.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let sparsity = sparsity_loss(m_pred, m_ref)?;
    Ok(LossTerms {
        l2,
        sparsity,
        total: l2 + lambda * sparsity,
    })
}

/// Recorded loss: the reference mask is recomputed from the current
/// reconstruction values and enters the graph as a constant.
pub struct RecordedLoss {
    pub total: Var,
    pub l2: Var,
    pub sparsity: Var,
    pub reference: SparsityMask,
}

pub fn total_loss_var(g: &mut Graph, x_rec: Var, x_gt: &HsiCube, m_pred: Var, lambda: f64) -> Result<RecordedLoss> {
    let rec = HsiCube::from_tensor(g.value(x_rec))?;
    let reference = reference_mask(&rec, x_gt)?;
    let gt = g.constant(x_gt.to_tensor());
    let target = g.constant(reference.to_tensor());
    let l2 = g.mse(x_rec, gt)?;
    let sparsity = g.mse(m_pred, target)?;
    let weighted = g.scale(sparsity, lambda)?;
    let total = g.add(l2, weighted)?;
    Ok(RecordedLoss {
        total,
        l2,
        sparsity,
        reference,
    })
}

/// Widths of the sparsity estimator. Topology is fixed: two encoder stages,
/// an ASPP bottleneck and two decoder stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub aspp_rates: Vec<usize>,
}

impl EstimatorConfig {
    pub fn new(in_channels: usize, channels: usize) -> Self {
        EstimatorConfig {
            in_channels,
            channels,
            aspp_rates: vec![1, 2, 4],
        }
    }
}

/// U-shaped estimator producing the shallow feature `X_0` and mask `M_s`.
#[derive(Clone, Debug)]
pub struct SparsityEstimator {
    pub config: EstimatorConfig,
    enc1: [Conv2d; 3],
    enc2: [Conv2d; 3],
    aspp: Vec<Conv2d>,
    aspp_fuse: Conv2d,
    dec1_up: Deconv2x2,
    dec1: [Conv2d; 3],
    dec2_up: Deconv2x2,
    dec2: [Conv2d; 2],
    /// Final 1x1 conv to `C + 1` channels; the last channel is the mask.
    pub head: Conv2d,
}

impl SparsityEstimator {
    pub fn new(store: &mut ParamStore, rng: &mut Stream, name: &str, config: EstimatorConfig) -> Self {
        let c = config.channels;
        let cin = config.in_channels;
        let n = |s: &str| format!("{name}.{s}");
        let enc1 = [
            Conv2d::pointwise(store, rng, &n("enc1.pw1"), cin, c),
            Conv2d::pointwise(store, rng, &n("enc1.pw2"), c, 2 * c),
            Conv2d::depthwise(store, rng, &n("enc1.dw"), 2 * c, 3, 2),
        ];
        let enc2 = [
            Conv2d::pointwise(store, rng, &n("enc2.pw1"), 2 * c, 2 * c),
            Conv2d::pointwise(store, rng, &n("enc2.pw2"), 2 * c, 4 * c),
            Conv2d::depthwise(store, rng, &n("enc2.dw"), 4 * c, 3, 2),
        ];
        let aspp = config
            .aspp_rates
            .iter()
            .map(|&r| {
                let p = ConvParams {
                    padding: r,
                    dilation: r,
                    ..Default::default()
                };
                Conv2d::new(store, rng, &n(&format!("aspp.rate{r}")), 4 * c, 4 * c, 3, p, true)
            })
            .collect::<Vec<_>>();
        let aspp_fuse = Conv2d::pointwise(store, rng, &n("aspp.fuse"), 4 * c * aspp.len(), 4 * c);
        let dec1_up = Deconv2x2::new(store, rng, &n("dec1.up"), 4 * c, 2 * c);
        let dec1 = [
            Conv2d::pointwise(store, rng, &n("dec1.pw1"), 2 * c, 2 * c),
            Conv2d::depthwise(store, rng, &n("dec1.dw"), 2 * c, 3, 1),
            Conv2d::pointwise(store, rng, &n("dec1.pw2"), 2 * c, 2 * c),
        ];
        let dec2_up = Deconv2x2::new(store, rng, &n("dec2.up"), 2 * c, c);
        let dec2 = [
            Conv2d::pointwise(store, rng, &n("dec2.pw1"), c, c),
            Conv2d::depthwise(store, rng, &n("dec2.dw"), c, 3, 1),
        ];
        let head = Conv2d::pointwise(store, rng, &n("dec2.head"), c, c + 1);
        SparsityEstimator {
            config,
            enc1,
            enc2,
            aspp,
            aspp_fuse,
            dec1_up,
            dec1,
            dec2_up,
            dec2,
            head,
        }
    }

    /// `x: [H, W, in_channels]` -> `(X_0: [H, W, C], M_s: [H, W])`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || !s[0].is_multiple_of(4) || !s[1].is_multiple_of(4) || s[2] != self.config.in_channels {
            return Err(CstError::Config(format!(
                "estimator input {s:?} must be [H, W, {}] with H, W divisible by 4",
                self.config.in_channels
            )));
        }
        let (h, w, c) = (s[0], s[1], self.config.channels);

        let t = self.enc1[0].forward(g, b, x)?;
        let skip0 = g.gelu(t)?;
        let t = self.enc1[1].forward(g, b, skip0)?;
        let skip1 = self.enc1[2].forward(g, b, t)?;

        let t = self.enc2[0].forward(g, b, skip1)?;
        let t = g.gelu(t)?;
        let t = self.enc2[1].forward(g, b, t)?;
        let deep = self.enc2[2].forward(g, b, t)?;

        let mut branches = Vec::with_capacity(self.aspp.len());
        for conv in &self.aspp {
            let br = conv.forward(g, b, deep)?;
            branches.push(g.gelu(br)?);
        }
        let cat = g.concat(&branches, 2)?;
        let deep = self.aspp_fuse.forward(g, b, cat)?;

        let up = self.dec1_up.forward(g, b, deep)?;
        let t = g.add(up, skip1)?;
        let t = self.dec1[0].forward(g, b, t)?;
        let t = g.gelu(t)?;
        let t = self.dec1[1].forward(g, b, t)?;
        let t = self.dec1[2].forward(g, b, t)?;

        let up = self.dec2_up.forward(g, b, t)?;
        let t = g.add(up, skip0)?;
        let t = self.dec2[0].forward(g, b, t)?;
        let t = g.gelu(t)?;
        let t = self.dec2[1].forward(g, b, t)?;
        let out = self.head.forward(g, b, t)?;

        let x0 = g.slice(out, 2, 0, c)?;
        let raw = g.slice(out, 2, c, 1)?;
        let ms = g.relu(raw)?;
        let ms = g.reshape(ms, &[h, w])?;
        Ok((x0, ms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::streams;

    #[test]
    fn full_scale_selection_count() {
        let m = SparsityMask::new(256, 256, vec![0.0; 256 * 256]).unwrap();
        let md = select_patches(&m, 16, 0.5).unwrap();
        assert_eq!((md.rows, md.cols), (16, 16));
        assert_eq!(md.selected(), 128);
    }

    #[test]
    fn sigma_extremes() {
        let m = SparsityMask::new(8, 8, (0..64).map(|i| i as f64).collect()).unwrap();
        assert_eq!(select_patches(&m, 4, 0.0).unwrap().selected(), 4);
        assert_eq!(select_patches(&m, 4, 1.0).unwrap().selected(), 0);
        assert!(select_patches(&m, 3, 0.5).is_err());
        assert!(select_patches(&m, 4, 1.5).is_err());
    }

    #[test]
    fn single_hot_patch_is_chosen() {
        let mut v = vec![0.0; 16 * 16];
        for y in 8..12 {
            for x in 4..8 {
                v[y * 16 + x] = 1.0;
            }
        }
        let m = SparsityMask::new(16, 16, v).unwrap();
        // 16 patches, sigma chosen so k = 1
        let md = select_patches(&m, 4, 0.9375).unwrap();
        assert_eq!(md.selected_indices(), vec![2 * 4 + 1]);
    }

    #[test]
    fn ties_prefer_low_indices() {
        let m = SparsityMask::new(4, 4, vec![1.0; 16]).unwrap();
        let md = select_patches(&m, 2, 0.5).unwrap();
        assert_eq!(md.selected_indices(), vec![0, 1]);
    }

    #[test]
    fn stage_pooling() {
        let md = BinaryPatchMask {
            rows: 2,
            cols: 2,
            patch: 4,
            grid: vec![1, 1, 0, 0],
        };
        assert_eq!(pool_mask_for_stage(&md, 1).unwrap(), md);
        assert_eq!(pool_mask_for_stage(&md, 2).unwrap().grid, vec![1]);
        let z = BinaryPatchMask::all(4, 4, 4, false);
        for s in 1..=3 {
            assert_eq!(pool_mask_for_stage(&z, s).unwrap().selected(), 0);
        }
        assert!(pool_mask_for_stage(&md, 3).is_err());
    }

    #[test]
    fn reference_mask_cases() {
        let gt = HsiCube::new(2, 2, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        assert!(reference_mask(&gt, &gt).unwrap().values.iter().all(|&v| v == 0.0));
        let mut off = gt.clone();
        off.data.iter_mut().for_each(|v| *v += 0.2);
        for v in reference_mask(&off, &gt).unwrap().values {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_values() {
        let z = SparsityMask::new(2, 2, vec![0.0; 4]).unwrap();
        let o = SparsityMask::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(sparsity_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(sparsity_loss(&z, &o).unwrap(), 1.0);
        let x = HsiCube::new(1, 2, 1, vec![0.5, 0.5]).unwrap();
        let t = total_loss(&x, &x, &z, &z, 2.0).unwrap();
        assert_eq!(t.total, 0.0);
    }

    #[test]
    fn estimator_shapes_and_zero_head() {
        let mut store = ParamStore::new();
        let mut rng = Stream::new(1, streams::WEIGHT_INIT);
        let est = SparsityEstimator::new(&mut store, &mut rng, "est", EstimatorConfig::new(28, 28));
        est.head.zero(&mut store);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[32, 32, 28]));
        let (x0, ms) = est.forward(&mut g, &b, x).unwrap();
        assert_eq!(g.shape(x0), &[32, 32, 28]);
        assert_eq!(g.shape(ms), &[32, 32]);
        assert!(g.value(ms).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn estimator_rejects_indivisible_input() {
        let mut store = ParamStore::new();
        let mut rng = Stream::new(1, streams::WEIGHT_INIT);
        let est = SparsityEstimator::new(&mut store, &mut rng, "est", EstimatorConfig::new(2, 2));
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[6, 8, 2]));
        assert!(est.forward(&mut g, &b, x).is_err());
    }
}

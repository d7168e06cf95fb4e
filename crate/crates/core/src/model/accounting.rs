//! Analytic parameter and FLOP counts. FLOPs are twice the multiply-accumulates
//! of convolutions, projections and bucket attention; normalization, activations
//! and elementwise adds are not counted.

use super::CstConfig;
use crate::error::{CstError, Result};
use crate::sasm::selection_count;

/// FLOPs split into the attention part and everything.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlopReport {
    pub total: f64,
    pub attention: f64,
}

#[derive(Default)]
struct Tally {
    params: usize,
    flops: f64,
    attention: f64,
}

impl Tally {
    fn conv(&mut self, hw_out: usize, cin: usize, cout: usize, k: usize, groups: usize) {
        self.params += cout * (cin / groups) * k * k + cout;
        self.flops += 2.0 * (hw_out * cout * (cin / groups) * k * k) as f64;
    }

    fn deconv2x2(&mut self, hw_in: usize, cin: usize, cout: usize) {
        self.params += cin * cout * 4 + cout;
        self.flops += 2.0 * (hw_in * cin * cout * 4) as f64;
    }

    fn layer_norm(&mut self, c: usize) {
        self.params += 2 * c;
    }

    fn attention(&mut self, cfg: &CstConfig, c: usize, selected: usize) {
        self.params += 4 * c * c;
        let n = (cfg.patch * cfg.patch) as f64;
        let (c, m, r) = (c as f64, cfg.bucket as f64, cfg.rounds as f64);
        let per_patch = 8.0 * n * c * c + r * (4.0 * n * m * c + 2.0 * n * c + 2.0 * n * c);
        let f = per_patch * selected as f64;
        self.flops += f;
        self.attention += f;
    }

    fn sahab(&mut self, cfg: &CstConfig, hw: usize, c: usize, selected: usize) {
        self.layer_norm(c);
        self.attention(cfg, c, selected);
        self.layer_norm(c);
        self.conv(hw, c, 4 * c, 1, 1);
        self.conv(hw, 4 * c, 4 * c, 3, 4 * c);
        self.conv(hw, 4 * c, c, 1, 1);
    }

    fn estimator(&mut self, hw: usize, cin: usize, c: usize) {
        let (hw2, hw4) = (hw / 4, hw / 16);
        self.conv(hw, cin, c, 1, 1);
        self.conv(hw, c, 2 * c, 1, 1);
        self.conv(hw2, 2 * c, 2 * c, 3, 2 * c);
        self.conv(hw2, 2 * c, 2 * c, 1, 1);
        self.conv(hw2, 2 * c, 4 * c, 1, 1);
        self.conv(hw4, 4 * c, 4 * c, 3, 4 * c);
        for _ in 0..3 {
            self.conv(hw4, 4 * c, 4 * c, 3, 1);
        }
        self.conv(hw4, 12 * c, 4 * c, 1, 1);
        self.deconv2x2(hw4, 4 * c, 2 * c);
        self.conv(hw2, 2 * c, 2 * c, 1, 1);
        self.conv(hw2, 2 * c, 2 * c, 3, 2 * c);
        self.conv(hw2, 2 * c, 2 * c, 1, 1);
        self.deconv2x2(hw2, 2 * c, c);
        self.conv(hw, c, c, 1, 1);
        self.conv(hw, c, c, 3, c);
        self.conv(hw, c, c + 1, 1, 1);
    }

    fn model(&mut self, cfg: &CstConfig, h: usize, w: usize, sel: [usize; 3]) {
        let (c, nb) = (cfg.channels, cfg.bands);
        let hw = [h * w, h * w / 4, h * w / 16];
        let [n1, n2, n3] = cfg.blocks;
        self.conv(hw[0], 2 * nb, nb, 1, 1);
        self.estimator(hw[0], nb, c);
        for _ in 0..n1 {
            self.sahab(cfg, hw[0], c, sel[0]);
        }
        self.conv(hw[1], c, 2 * c, 4, 1);
        for _ in 0..n2 {
            self.sahab(cfg, hw[1], 2 * c, sel[1]);
        }
        self.conv(hw[2], 2 * c, 4 * c, 4, 1);
        for _ in 0..n3 {
            self.sahab(cfg, hw[2], 4 * c, sel[2]);
        }
        self.deconv2x2(hw[2], 4 * c, 2 * c);
        for _ in 0..n2 {
            self.sahab(cfg, hw[1], 2 * c, sel[1]);
        }
        self.deconv2x2(hw[1], 2 * c, c);
        for _ in 0..n1 {
            self.sahab(cfg, hw[0], c, sel[0]);
        }
        self.conv(hw[0], c, nb, 3, 1);
    }
}

/// Learnable scalars of the model built from `cfg`.
pub fn count_params(cfg: &CstConfig) -> usize {
    let mut t = Tally::default();
    t.model(cfg, 0, 0, [0; 3]);
    t.params
}

/// Per-stage patch counts `floor((1 - sigma) * cells)` for an `h x w` scene.
pub fn nominal_selection(cfg: &CstConfig, h: usize, w: usize) -> Result<[usize; 3]> {
    cfg.validate_geometry(h, w)?;
    let cells = (h / cfg.patch) * (w / cfg.patch);
    Ok([
        selection_count(cells, cfg.sigma),
        selection_count(cells / 4, cfg.sigma),
        selection_count(cells / 16, cfg.sigma),
    ])
}

/// FLOPs of one forward pass on an `h x w` scene with `selected[i]` patches
/// attended at stage `i + 1`.
pub fn count_flops(cfg: &CstConfig, h: usize, w: usize, selected: [usize; 3]) -> Result<FlopReport> {
    cfg.validate_geometry(h, w)?;
    let cells = (h / cfg.patch) * (w / cfg.patch);
    for (i, (&s, grid)) in selected.iter().zip([cells, cells / 4, cells / 16]).enumerate() {
        if s > grid {
            return Err(CstError::Config(format!(
                "stage {} selects {s} of {grid} patches",
                i + 1
            )));
        }
    }
    let mut t = Tally::default();
    t.model(cfg, h, w, selected);
    Ok(FlopReport {
        total: t.flops,
        attention: t.attention,
    })
}

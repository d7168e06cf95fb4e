//! Parameter storage and the small set of layers the models are built from.

use crate::error::{CstError, Result};
use crate::rng::Stream;
use crate::tensor::{ConvParams, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of named tensors. Order is construction order and is
/// what checkpoints and optimizer buffers key on.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total learnable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Replaces values from `(name, tensor)` pairs; every entry must be present
    /// with a matching shape.
    pub fn load(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(CstError::Data(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                values.len()
            )));
        }
        for (entry, (name, t)) in self.entries.iter_mut().zip(values) {
            if entry.name != name || entry.value.shape() != t.shape() {
                return Err(CstError::Data(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    t.shape(),
                    entry.name,
                    entry.value.shape()
                )));
            }
            entry.value = t;
        }
        Ok(())
    }

    /// Registers every tensor as a leaf; trainable ones record gradients.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| g.leaf(e.value.clone(), e.trainable))
                .collect(),
        }
    }

    /// Like [`ParamStore::bind`] but substitutes the given graph variables.
    pub fn bind_with(&self, g: &mut Graph, overrides: &[(ParamId, Var)]) -> Bound {
        let mut b = self.bind(g);
        for &(id, v) in overrides {
            b.vars[id.0] = v;
        }
        b
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Conv2d with `[Cout, Cin/groups, k, k]` weights.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub params: ConvParams,
}

impl Conv2d {
    /// Uniform init in `+-1/sqrt(fan_in)` for weight and bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Stream,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        params: ConvParams,
        bias: bool,
    ) -> Self {
        let cin_g = cin / params.groups;
        let bound = 1.0 / ((cin_g * kernel * kernel) as f64).sqrt();
        let w = Tensor::uniform(&[cout, cin_g, kernel, kernel], -bound, bound, rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = bias.then(|| {
            let b = Tensor::uniform(&[cout], -bound, bound, rng);
            store.add(format!("{name}.bias"), b, true)
        });
        Conv2d { weight, bias, params }
    }

    pub fn pointwise(store: &mut ParamStore, rng: &mut Stream, name: &str, cin: usize, cout: usize) -> Self {
        Conv2d::new(store, rng, name, cin, cout, 1, ConvParams::default(), true)
    }

    /// Depthwise `k x k`, same padding.
    pub fn depthwise(
        store: &mut ParamStore,
        rng: &mut Stream,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let params = ConvParams {
            stride,
            padding: kernel / 2,
            dilation: 1,
            groups: channels,
        };
        Conv2d::new(store, rng, name, channels, channels, kernel, params, true)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, b.var(self.weight), self.bias.map(|p| b.var(p)), self.params)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Stride-2 `2 x 2` transposed convolution (exact 2x upsampling).
#[derive(Clone, Debug)]
pub struct Deconv2x2 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Deconv2x2 {
    pub fn new(store: &mut ParamStore, rng: &mut Stream, name: &str, cin: usize, cout: usize) -> Self {
        let bound = 1.0 / ((cout * 4) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[cin, cout, 2, 2], -bound, bound, rng),
            true,
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::uniform(&[cout], -bound, bound, rng),
            true,
        );
        Deconv2x2 { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let p = ConvParams {
            stride: 2,
            ..Default::default()
        };
        g.conv_transpose2d(x, b.var(self.weight), Some(b.var(self.bias)), p)
    }
}

/// Channel layer norm with learnable affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, b.var(self.gamma), b.var(self.beta))
    }
}

//! Spectra-aggregation hashing multi-head self-attention.
//!
//! Tokens of a selected `M x M` patch are hashed with a random projection
//! `floor((a.x + b) / r)`, stably sorted by code and cut into equal buckets of
//! `m` tokens. Attention runs only inside a bucket; several independent hash
//! rounds are merged per head with weights proportional to each round's
//! attention mass.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CstError, Result};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::rng::Stream;
use crate::sasm::BinaryPatchMask;
use crate::tensor::{Graph, Tensor, Var};

/// One hash round: `h(x) = floor((a.x + b) / r)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashParams {
    pub a: Vec<f64>,
    pub b: f64,
    pub r: f64,
}

impl HashParams {
    /// Packs as `[a..., b, r]`.
    pub fn to_tensor(&self) -> Tensor {
        let mut v = self.a.clone();
        v.push(self.b);
        v.push(self.r);
        Tensor::new(&[v.len()], v).expect("hash dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if t.shape().len() != 1 || d.len() < 3 {
            return Err(CstError::dims("hash_params", t.shape(), &[3]));
        }
        let c = d.len() - 2;
        Ok(HashParams {
            a: d[..c].to_vec(),
            b: d[c],
            r: d[c + 1],
        })
    }

    /// `a ~ N(0, 1)^channels`, `b ~ U(0, r)`.
    pub fn sample(channels: usize, r: f64, rng: &mut Stream) -> Self {
        let a = (0..channels).map(|_| rng.normal()).collect();
        let b = rng.uniform_range(0.0, r);
        HashParams { a, b, r }
    }
}

/// Integer hash code of every row of a `[N, C]` token matrix.
pub fn hash_codes(tokens: &Tensor, hp: &HashParams) -> Result<Vec<i64>> {
    let s = tokens.shape();
    if s.len() != 2 || s[1] != hp.a.len() {
        return Err(CstError::dims("hash_codes", s, &[hp.a.len()]));
    }
    if !(hp.r > 0.0) {
        return Err(CstError::Config(format!("hash width r must be positive, got {}", hp.r)));
    }
    hash_rows(tokens.data(), s[1], hp)
}

fn hash_rows(data: &[f64], channels: usize, hp: &HashParams) -> Result<Vec<i64>> {
    data.chunks(channels)
        .map(|x| {
            if x.iter().any(|v| !v.is_finite()) {
                return Err(CstError::Numeric { op: "hash_codes" });
            }
            let proj: f64 = x.iter().zip(&hp.a).map(|(x, a)| x * a).sum();
            Ok(((proj + hp.b) / hp.r).floor() as i64)
        })
        .collect()
}

/// Sorted-hash order of one round. `order[j]` is the original index of the
/// `j`-th sorted token; bucket `i` is `order[i*m .. (i+1)*m]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketAssignment {
    pub order: Vec<usize>,
    pub bucket_size: usize,
}

impl BucketAssignment {
    pub fn tokens(&self) -> usize {
        self.order.len()
    }

    pub fn buckets(&self) -> usize {
        self.order.len() / self.bucket_size
    }

    pub fn bucket(&self, i: usize) -> &[usize] {
        &self.order[i * self.bucket_size..][..self.bucket_size]
    }

    /// Bucket index of every original token.
    pub fn bucket_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.order.len()];
        for (pos, &t) in self.order.iter().enumerate() {
            out[t] = pos / self.bucket_size;
        }
        out
    }

    /// `round,bucket,position,token` rows (no header).
    pub fn write_csv(&self, round: usize, out: &mut String) {
        for (pos, &t) in self.order.iter().enumerate() {
            let _ = writeln!(out, "{round},{},{},{t}", pos / self.bucket_size, pos % self.bucket_size);
        }
    }
}

/// Stable sort by `(code, index)`, then equal chunks of `m`.
pub fn bucketize(codes: &[i64], m: usize) -> Result<BucketAssignment> {
    if m == 0 || !codes.len().is_multiple_of(m) {
        return Err(CstError::Config(format!(
            "{} tokens cannot be split into buckets of {m}",
            codes.len()
        )));
    }
    let mut order: Vec<usize> = (0..codes.len()).collect();
    order.sort_by_key(|&i| (codes[i], i));
    Ok(BucketAssignment { order, bucket_size: m })
}

/// How per-round outputs are merged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundWeighting {
    /// Ratio of post-softmax attention mass. Each round's mass is 1, so every
    /// round gets `1/R`.
    #[default]
    Normalized,
    /// Ratio of unnormalized mass `sum exp(logit)`, i.e. a softmax over rounds
    /// of the per-round log-sum-exp.
    LogitMass,
}

/// Dense attention weights: `u`, `v`, `w_val` are `[heads*head_dim, C]`,
/// `w_out` is `[C, heads*head_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub heads: usize,
    pub head_dim: usize,
    pub u: Tensor,
    pub v: Tensor,
    pub w_val: Tensor,
    pub w_out: Tensor,
}

impl AttentionWeights {
    pub fn random(channels: usize, heads: usize, rng: &mut Stream) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(CstError::Config(format!(
                "{heads} heads do not divide {channels} channels"
            )));
        }
        let bound = 1.0 / (channels as f64).sqrt();
        let inner = channels;
        Ok(AttentionWeights {
            heads,
            head_dim: channels / heads,
            u: Tensor::uniform(&[inner, channels], -bound, bound, rng),
            v: Tensor::uniform(&[inner, channels], -bound, bound, rng),
            w_val: Tensor::uniform(&[inner, channels], -bound, bound, rng),
            w_out: Tensor::uniform(&[channels, inner], -bound, bound, rng),
        })
    }

    fn bind(&self, g: &mut Graph) -> Projections {
        Projections {
            u: g.constant(self.u.clone()),
            v: g.constant(self.v.clone()),
            w_val: g.constant(self.w_val.clone()),
            w_out: g.constant(self.w_out.clone()),
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }
}

/// Graph handles of the four projections.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub u: Var,
    pub v: Var,
    pub w_val: Var,
    pub w_out: Var,
    pub heads: usize,
    pub head_dim: usize,
}

struct RoundResult {
    /// `[T, heads*head_dim]` in original token order.
    heads: Var,
    /// Post-softmax mass per `(token, head)`, `[T, heads]`.
    mass: Tensor,
    /// Log-sum-exp of the scaled logits per `(token, head)`, `[T, heads]`.
    lse: Option<Var>,
}

/// One round over pre-projected `q`, `k`, `val` (`[T, heads*head_dim]`),
/// with `order` a permutation of `0..T` grouping buckets contiguously.
#[allow(clippy::too_many_arguments)]
fn attend_round(
    g: &mut Graph,
    q: Var,
    k: Var,
    val: Var,
    order: &[usize],
    m: usize,
    heads: usize,
    head_dim: usize,
    want_lse: bool,
) -> Result<RoundResult> {
    let t = order.len();
    let nb = t / m;
    let split = |g: &mut Graph, x: Var| -> Result<Var> {
        let xs = g.gather(x, order)?;
        let xs = g.reshape(xs, &[nb, m, heads, head_dim])?;
        let xs = g.permute(xs, &[0, 2, 1, 3])?;
        g.reshape(xs, &[nb * heads, m, head_dim])
    };
    let qs = split(g, q)?;
    let ks = split(g, k)?;
    let vs = split(g, val)?;
    let logits = g.bmm_nt(qs, ks)?;
    let logits = g.scale(logits, 1.0 / (head_dim as f64).sqrt())?;
    let attn = g.softmax(logits, 2)?;

    // [nb*heads, m] -> [T, heads] in token order.
    let unsplit_rows = |g: &mut Graph, x: Var| -> Result<Var> {
        let x = g.reshape(x, &[nb, heads, m])?;
        let x = g.permute(x, &[0, 2, 1])?;
        let x = g.reshape(x, &[t, heads])?;
        g.scatter(x, order, t)
    };

    let a = g.value(attn).data();
    let mut mass = vec![0.0; t * heads];
    for bi in 0..nb {
        for h in 0..heads {
            for i in 0..m {
                let row = &a[((bi * heads + h) * m + i) * m..][..m];
                mass[order[bi * m + i] * heads + h] = row.iter().sum();
            }
        }
    }
    let mass = Tensor::new(&[t, heads], mass)?;

    let lse = if want_lse {
        let l = g.logsumexp(logits, 2)?;
        Some(unsplit_rows(g, l)?)
    } else {
        None
    };

    let out = g.bmm(attn, vs)?;
    let out = g.reshape(out, &[nb, heads, m, head_dim])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[t, heads * head_dim])?;
    let out = g.scatter(out, order, t)?;
    Ok(RoundResult { heads: out, mass, lse })
}

/// Multi-round attention over `[T, C]` tokens. `rounds[r]` is a global
/// permutation of `0..T` whose consecutive `m`-chunks are buckets.
fn attend_tokens(
    g: &mut Graph,
    tokens: Var,
    rounds: &[Vec<usize>],
    m: usize,
    p: Projections,
    weighting: RoundWeighting,
) -> Result<Var> {
    if rounds.is_empty() {
        return Err(CstError::Config("at least one hash round is required".into()));
    }
    let t = g.shape(tokens)[0];
    let inner = p.heads * p.head_dim;
    let q = g.matmul_nt(tokens, p.u)?;
    let k = g.matmul_nt(tokens, p.v)?;
    let val = g.matmul_nt(tokens, p.w_val)?;
    let want_lse = weighting == RoundWeighting::LogitMass && rounds.len() > 1;
    let mut results = Vec::with_capacity(rounds.len());
    for order in rounds {
        if order.len() != t {
            return Err(CstError::dims("sah_msa rounds", &[order.len()], &[t]));
        }
        results.push(attend_round(g, q, k, val, order, m, p.heads, p.head_dim, want_lse)?);
    }

    let merged = if rounds.len() == 1 {
        results[0].heads
    } else {
        let weights: Vec<Var> = match weighting {
            RoundWeighting::Normalized => {
                let mut denom = vec![0.0; t * p.heads];
                for r in &results {
                    denom.iter_mut().zip(r.mass.data()).for_each(|(d, m)| *d += m);
                }
                if denom.iter().any(|&d| d <= 0.0) {
                    return Err(CstError::Numeric { op: "round_weights" });
                }
                results
                    .iter()
                    .map(|r| {
                        let w = Tensor::from_fn(&[t, inner], |i| {
                            let (tok, h) = (i / inner, (i % inner) / p.head_dim);
                            r.mass.data()[tok * p.heads + h] / denom[tok * p.heads + h]
                        });
                        g.constant(w)
                    })
                    .collect()
            }
            RoundWeighting::LogitMass => {
                let mut cols = Vec::with_capacity(results.len());
                for r in &results {
                    let l = r.lse.expect("lse requested");
                    cols.push(g.reshape(l, &[t, p.heads, 1])?);
                }
                let stacked = g.concat(&cols, 2)?;
                let w = g.softmax(stacked, 2)?;
                let mut out = Vec::with_capacity(results.len());
                for ri in 0..results.len() {
                    let wr = g.slice(w, 2, ri, 1)?;
                    let wr = g.expand(wr, &[t, p.heads, p.head_dim])?;
                    out.push(g.reshape(wr, &[t, inner])?);
                }
                out
            }
        };
        let mut acc: Option<Var> = None;
        for (r, w) in results.iter().zip(weights) {
            let term = g.mul(r.heads, w)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        acc.expect("non-empty")
    };
    g.matmul_nt(merged, p.w_out)
}

/// Output of one round on a single token set.
#[derive(Clone, Debug)]
pub struct RoundOutput {
    /// `[N, heads*head_dim]`, head `n` in columns `n*d .. (n+1)*d`.
    pub heads: Tensor,
    /// `sum_k A_nqk` per `(query, head)`, `[N, heads]`.
    pub mass: Tensor,
}

fn check_tokens(tokens: &Tensor, w: &AttentionWeights) -> Result<usize> {
    let s = tokens.shape();
    if s.len() != 2 || w.u.shape() != [w.heads * w.head_dim, s[1]] {
        return Err(CstError::dims("sah_msa tokens", s, w.u.shape()));
    }
    Ok(s[0])
}

/// Per-bucket attention of one round (no output projection).
pub fn bucket_attention(tokens: &Tensor, ba: &BucketAssignment, w: &AttentionWeights) -> Result<RoundOutput> {
    let n = check_tokens(tokens, w)?;
    if ba.tokens() != n {
        return Err(CstError::dims("bucket_attention", &[ba.tokens()], &[n]));
    }
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let p = w.bind(&mut g);
    let q = g.matmul_nt(x, p.u)?;
    let k = g.matmul_nt(x, p.v)?;
    let val = g.matmul_nt(x, p.w_val)?;
    let r = attend_round(&mut g, q, k, val, &ba.order, ba.bucket_size, w.heads, w.head_dim, false)?;
    Ok(RoundOutput {
        heads: g.value(r.heads).clone(),
        mass: r.mass,
    })
}

/// All rounds merged and projected back to `[N, C]`.
pub fn multi_round_attention(
    tokens: &Tensor,
    rounds: &[BucketAssignment],
    w: &AttentionWeights,
    weighting: RoundWeighting,
) -> Result<Tensor> {
    let n = check_tokens(tokens, w)?;
    let m = rounds.first().map(|r| r.bucket_size).unwrap_or(1);
    if rounds.iter().any(|r| r.tokens() != n || r.bucket_size != m) {
        return Err(CstError::Config("rounds disagree on token count or bucket size".into()));
    }
    let orders: Vec<Vec<usize>> = rounds.iter().map(|r| r.order.clone()).collect();
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let p = w.bind(&mut g);
    let out = attend_tokens(&mut g, x, &orders, m, p, weighting)?;
    Ok(g.value(out).clone())
}

/// Record/replay log of data-dependent discrete decisions (patch selections
/// and bucket assignments) so a forward pass can be repeated with identical
/// routing, e.g. under finite-difference probing.
#[derive(Clone, Debug, Default)]
pub struct Routing {
    selections: Vec<BinaryPatchMask>,
    buckets: Vec<Vec<Vec<usize>>>,
    replay: bool,
    sel_cursor: usize,
    bucket_cursor: usize,
}

impl Routing {
    pub fn record() -> Self {
        Routing::default()
    }

    /// Rewinds and switches to replay mode.
    pub fn into_replay(mut self) -> Self {
        self.replay = true;
        self.sel_cursor = 0;
        self.bucket_cursor = 0;
        self
    }

    pub fn rewind(&mut self) {
        self.sel_cursor = 0;
        self.bucket_cursor = 0;
    }

    pub fn is_replay(&self) -> bool {
        self.replay
    }

    pub fn selections(&self) -> &[BinaryPatchMask] {
        &self.selections
    }

    pub fn buckets(&self) -> &[Vec<Vec<usize>>] {
        &self.buckets
    }

    pub fn selection(&mut self, compute: impl FnOnce() -> Result<BinaryPatchMask>) -> Result<BinaryPatchMask> {
        if self.replay {
            let s = self
                .selections
                .get(self.sel_cursor)
                .cloned()
                .ok_or_else(|| CstError::Graph("routing replay ran out of selections".into()))?;
            self.sel_cursor += 1;
            Ok(s)
        } else {
            let s = compute()?;
            self.selections.push(s.clone());
            Ok(s)
        }
    }

    fn rounds(&mut self, compute: impl FnOnce() -> Result<Vec<Vec<usize>>>) -> Result<Vec<Vec<usize>>> {
        if self.replay {
            let r = self
                .buckets
                .get(self.bucket_cursor)
                .cloned()
                .ok_or_else(|| CstError::Graph("routing replay ran out of bucket assignments".into()))?;
            self.bucket_cursor += 1;
            Ok(r)
        } else {
            let r = compute()?;
            self.buckets.push(r.clone());
            Ok(r)
        }
    }
}

/// SAH-MSA layer: learnable projections plus fixed hash rounds.
#[derive(Clone, Debug)]
pub struct SahMsa {
    pub channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub patch: usize,
    pub bucket_size: usize,
    pub weighting: RoundWeighting,
    pub u: ParamId,
    pub v: ParamId,
    pub w_val: ParamId,
    pub w_out: ParamId,
    /// Non-trainable `[C + 2]` tensors holding `(a, b, r)` per round.
    pub hash: Vec<ParamId>,
}

impl SahMsa {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Stream,
        hash_rng: &mut Stream,
        name: &str,
        channels: usize,
        head_dim: usize,
        patch: usize,
        bucket_size: usize,
        rounds: usize,
        hash_width: f64,
        weighting: RoundWeighting,
    ) -> Result<Self> {
        if head_dim == 0 || !channels.is_multiple_of(head_dim) {
            return Err(CstError::Config(format!(
                "head dim {head_dim} does not divide {channels} channels"
            )));
        }
        if rounds == 0 {
            return Err(CstError::Config("at least one hash round is required".into()));
        }
        if bucket_size == 0 || !(patch * patch).is_multiple_of(bucket_size) {
            return Err(CstError::Config(format!(
                "patch of {} tokens cannot be split into buckets of {bucket_size}",
                patch * patch
            )));
        }
        let heads = channels / head_dim;
        let w = AttentionWeights::random(channels, heads, rng)?;
        let u = store.add(format!("{name}.u"), w.u, true);
        let v = store.add(format!("{name}.v"), w.v, true);
        let w_val = store.add(format!("{name}.w_val"), w.w_val, true);
        let w_out = store.add(format!("{name}.w_out"), w.w_out, true);
        let hash = (0..rounds)
            .map(|r| {
                let hp = HashParams::sample(channels, hash_width, hash_rng);
                store.add(format!("{name}.hash{r}"), hp.to_tensor(), false)
            })
            .collect();
        Ok(SahMsa {
            channels,
            heads,
            head_dim,
            patch,
            bucket_size,
            weighting,
            u,
            v,
            w_val,
            w_out,
            hash,
        })
    }

    pub fn hash_params(&self, store: &ParamStore) -> Result<Vec<HashParams>> {
        self.hash
            .iter()
            .map(|&id| HashParams::from_tensor(store.get(id)))
            .collect()
    }

    /// Redraws every round's `(a, b)` keeping `r`.
    pub fn resample_hash(&self, store: &mut ParamStore, rng: &mut Stream) -> Result<()> {
        for &id in &self.hash {
            let r = HashParams::from_tensor(store.get(id))?.r;
            *store.get_mut(id) = HashParams::sample(self.channels, r, rng).to_tensor();
        }
        Ok(())
    }

    pub fn weights(&self, store: &ParamStore) -> AttentionWeights {
        AttentionWeights {
            heads: self.heads,
            head_dim: self.head_dim,
            u: store.get(self.u).clone(),
            v: store.get(self.v).clone(),
            w_val: store.get(self.w_val).clone(),
            w_out: store.get(self.w_out).clone(),
        }
    }

    fn projections(&self, b: &Bound) -> Projections {
        Projections {
            u: b.var(self.u),
            v: b.var(self.v),
            w_val: b.var(self.w_val),
            w_out: b.var(self.w_out),
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }

    /// Attention contribution on `[Hs, Ws, C]`: selected patches get
    /// multi-round hashed attention, unselected positions are zero.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        mask: &BinaryPatchMask,
        routing: &mut Routing,
    ) -> Result<Var> {
        let hash = self
            .hash
            .iter()
            .map(|&id| HashParams::from_tensor(g.value(b.var(id))))
            .collect::<Result<Vec<_>>>()?;
        sah_msa_forward(g, x, mask, self.projections(b), &self.geometry(hash), routing)
    }

    fn geometry(&self, hash: Vec<HashParams>) -> WindowAttention {
        WindowAttention {
            channels: self.channels,
            patch: self.patch,
            bucket_size: self.bucket_size,
            weighting: self.weighting,
            hash,
        }
    }
}

/// Window geometry and hash rounds of one SAH-MSA application.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub channels: usize,
    pub patch: usize,
    pub bucket_size: usize,
    pub weighting: RoundWeighting,
    pub hash: Vec<HashParams>,
}

/// Row-major feature-map indices of the tokens in each selected patch.
pub fn patch_token_indices(mask: &BinaryPatchMask, width: usize) -> Vec<usize> {
    let p = mask.patch;
    let mut idx = Vec::with_capacity(mask.selected() * p * p);
    for cell in mask.selected_indices() {
        let (pr, pc) = (cell / mask.cols, cell % mask.cols);
        for ty in 0..p {
            for tx in 0..p {
                idx.push((pr * p + ty) * width + pc * p + tx);
            }
        }
    }
    idx
}

/// Hashes, buckets and attends every selected window of `x`.
pub fn sah_msa_forward(
    g: &mut Graph,
    x: Var,
    mask: &BinaryPatchMask,
    p: Projections,
    layer: &WindowAttention,
    routing: &mut Routing,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let patch = layer.patch;
    if s.len() != 3
        || mask.patch != patch
        || s[0] != mask.rows * patch
        || s[1] != mask.cols * patch
        || s[2] != layer.channels
    {
        return Err(CstError::dims(
            "sah_msa",
            &s,
            &[mask.rows * patch, mask.cols * patch, layer.channels],
        ));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if mask.selected() == 0 {
        return Ok(g.constant(Tensor::zeros(&[h, w, c])));
    }
    let idx = patch_token_indices(mask, w);
    let flat = g.reshape(x, &[h * w, c])?;
    let tokens = g.gather(flat, &idx)?;
    let n = patch * patch;
    let t = idx.len();

    let rounds = routing.rounds(|| {
        let data = g.value(tokens).data();
        layer
            .hash
            .iter()
            .map(|hp| {
                let mut order = Vec::with_capacity(t);
                for (pi, chunk) in data.chunks(n * c).enumerate() {
                    let codes = hash_rows(chunk, c, hp)?;
                    let ba = bucketize(&codes, layer.bucket_size)?;
                    order.extend(ba.order.iter().map(|&j| pi * n + j));
                }
                Ok(order)
            })
            .collect()
    })?;

    let out = attend_tokens(g, tokens, &rounds, layer.bucket_size, p, layer.weighting)?;
    let placed = g.scatter(out, &idx, h * w)?;
    g.reshape(placed, &[h, w, c])
}

//! Masked multi-head attention and the windowed transformer block.

use std::rc::Rc;

use crate::autograd::{ResampleMap, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Activation, Bound, LayerNorm, Linear, Mlp, ParamBuilder, ParamId, Init};
use crate::tensor::{Real, Tensor};

/// Additive mask values accepted by [`AttentionConfig`].
pub const MASK_VALUES: [f64; 4] = [-10.0, -100.0, -1000.0, -10000.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub window: usize,
    pub mask_value: f64,
}

impl AttentionConfig {
    pub fn new(embed_dim: usize, num_heads: usize, window: usize, mask_value: f64) -> Result<Self> {
        let cfg = Self {
            embed_dim,
            num_heads,
            window,
            mask_value,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible into {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("attention window must be positive".into()));
        }
        check_mask_value(self.mask_value)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

pub fn check_mask_value(v: f64) -> Result<()> {
    if MASK_VALUES.contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "mask value {v} is not one of {MASK_VALUES:?}"
        )))
    }
}

/// Square additive attention mask with entries `0` or `mask_value`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    size: usize,
    mask_value: f64,
    data: Vec<f64>,
}

impl MaskMatrix {
    pub fn zeros(size: usize, mask_value: f64) -> Self {
        Self {
            size,
            mask_value,
            data: vec![0.0; size * size],
        }
    }

    /// Mask with `mask_value` wherever `masked(row, col)` holds.
    pub fn from_fn(size: usize, mask_value: f64, masked: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(size, mask_value);
        for r in 0..size {
            for c in 0..size {
                if masked(r, c) {
                    m.data[r * size + c] = mask_value;
                }
            }
        }
        m
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask_value(&self) -> f64 {
        self.mask_value
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.get(row, col) != 0.0
    }

    pub fn count_masked(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn([self.size, self.size], |i| T::of(self.data[i]))
    }
}

/// Query/key/value and output projections of one attention layer.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub num_heads: usize,
}

impl MultiHeadAttention {
    pub fn build(b: &mut ParamBuilder<'_>, name: &str, dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || !dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {dim} is not divisible into {num_heads} heads"
            )));
        }
        let mut s = b.scope(name);
        Ok(Self {
            q: s.linear("q", dim, dim, true)?,
            k: s.linear("k", dim, dim, true)?,
            v: s.linear("v", dim, dim, true)?,
            proj: s.linear("proj", dim, dim, true)?,
            num_heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.in_dim
    }
}

/// Splits `[B,L,c]` into heads `[B·n,L,d]`.
fn split_heads<'t, T: Real>(x: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (b, l, c) = (s[0], s[1], s[2]);
    let d = c / heads;
    if heads == 1 {
        return Ok(x);
    }
    x.reshape(&[b, l, heads, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * heads, l, d])
}

fn merge_heads<'t, T: Real>(x: Var<'t, T>, batch: usize, heads: usize) -> Result<Var<'t, T>> {
    if heads == 1 {
        return Ok(x);
    }
    let s = x.shape();
    let (l, d) = (s[1], s[2]);
    x.reshape(&[batch, heads, l, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[batch, l, heads * d])
}

/// Attention output together with the post-softmax weights `[B·n,L,Lk]`.
pub struct Attended<'t, T: Real> {
    pub output: Var<'t, T>,
    pub weights: Var<'t, T>,
}

/// Batched multi-head attention.
///
/// `q_in` is `[B,L,c]` and `kv_in` is `[B,Lk,c]`. `bias` is added to the
/// scaled scores and must broadcast to `[B,n,L,Lk]`.
pub fn attend<'t, T: Real>(
    p: &Bound<'t, T>,
    mha: &MultiHeadAttention,
    q_in: Var<'t, T>,
    kv_in: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<Attended<'t, T>> {
    attend_qkv(p, mha, q_in, kv_in, kv_in, bias)
}

/// [`attend`] with separate key and value inputs.
pub fn attend_qkv<'t, T: Real>(
    p: &Bound<'t, T>,
    mha: &MultiHeadAttention,
    q_in: Var<'t, T>,
    k_in: Var<'t, T>,
    v_in: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<Attended<'t, T>> {
    let qs = q_in.shape();
    let ks = k_in.shape();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || v_in.shape() != ks {
        return Err(shape_err(
            "attention",
            format!("query {qs:?} and key/value {ks:?} must be [B,L,c] with equal B"),
        ));
    }
    let q = mha.q.forward(p, q_in)?;
    let k = mha.k.forward(p, k_in)?;
    let v = mha.v.forward(p, v_in)?;
    let a = multi_head(q, k, v, mha.num_heads, bias)?;
    Ok(Attended {
        output: mha.proj.forward(p, a.output)?,
        weights: a.weights,
    })
}

/// `softmax(Q·Kᵀ/√d + bias)·V` per head on projected `[B,L,c]` inputs, with
/// the head outputs concatenated back to `[B,L,c]`.
pub fn multi_head<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
    bias: Option<Var<'t, T>>,
) -> Result<Attended<'t, T>> {
    let qs = q.shape();
    let ks = k.shape();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || v.shape() != ks {
        return Err(shape_err(
            "attention",
            format!("projected query {qs:?} and key/value {ks:?} disagree"),
        ));
    }
    if heads == 0 || !qs[2].is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "width {} is not divisible into {heads} heads",
            qs[2]
        )));
    }
    let (batch, l, lk) = (qs[0], qs[1], ks[1]);
    let d = qs[2] / heads;
    let q = split_heads(q, heads)?;
    let k = split_heads(k, heads)?;
    let v = split_heads(v, heads)?;
    let mut scores = q.matmul_t(k, false, true)?.scale(1.0 / (d as f64).sqrt());
    if let Some(bias) = bias {
        scores = scores
            .reshape(&[batch, heads, l, lk])?
            .add(bias)?
            .reshape(&[batch * heads, l, lk])?;
    }
    let weights = scores.softmax();
    let output = merge_heads(weights.matmul(v)?, batch, heads)?;
    Ok(Attended { output, weights })
}

/// Single-sequence masked attention of `[L,c]` inputs.
pub fn masked_attention<'t, T: Real>(
    p: &Bound<'t, T>,
    mha: &MultiHeadAttention,
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    mask: &MaskMatrix,
) -> Result<Attended<'t, T>> {
    let l = q.shape()[0];
    if mask.size() != l || k.shape()[0] != l {
        return Err(shape_err(
            "masked_attention",
            format!("mask of size {} for {l} tokens", mask.size()),
        ));
    }
    let c = q.shape()[1];
    let m = p.tape().constant(mask.to_tensor());
    let a = attend_qkv(
        p,
        mha,
        q.reshape(&[1, l, c])?,
        k.reshape(&[1, l, c])?,
        v.reshape(&[1, l, c])?,
        Some(m),
    )?;
    Ok(Attended {
        output: a.output.reshape(&[l, c])?,
        weights: a.weights,
    })
}

/// Token gather/scatter plan for one window partition of an `H×W` grid.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub grid: (usize, usize),
    pub window: usize,
    pub shift: usize,
    pub padded: (usize, usize),
    /// Source token of each windowed slot, `None` for padding.
    pub slots: Vec<Option<usize>>,
    /// Windowed slot of each grid token.
    pub inverse: Vec<usize>,
    /// Additive mask per window, `[nW, w², w²]`.
    pub mask: Vec<f64>,
}

impl WindowPlan {
    /// Partitions the grid into `window×window` windows after zero-padding
    /// to a multiple and rolling by `window/2` when `shift` is set.
    ///
    /// A grid no larger than the window in either dimension uses a single
    /// window of the smaller side and is never shifted.
    pub fn new(h: usize, w: usize, window: usize, shift: bool, mask_value: f64) -> Self {
        let mut win = window;
        let mut shift = shift;
        if h.min(w) <= window {
            win = h.min(w);
            shift = false;
        }
        let hp = h.div_ceil(win) * win;
        let wp = w.div_ceil(win) * win;
        if hp == win && wp == win {
            shift = false;
        }
        let s = if shift { win / 2 } else { 0 };
        let (nh, nw) = (hp / win, wp / win);
        let area = win * win;
        let n_win = nh * nw;
        let region = |pos: usize, len: usize| -> usize {
            if s == 0 || pos < len - win {
                0
            } else if pos < len - s {
                1
            } else {
                2
            }
        };
        let mut slots = vec![None; n_win * area];
        let mut labels = vec![0usize; n_win * area];
        let mut inverse = vec![0usize; h * w];
        for wy in 0..nh {
            for wx in 0..nw {
                for py in 0..win {
                    for px in 0..win {
                        let (ry, rx) = (wy * win + py, wx * win + px);
                        let sy = (ry + s) % hp;
                        let sx = (rx + s) % wp;
                        let slot = (wy * nw + wx) * area + py * win + px;
                        labels[slot] = region(ry, hp) * 3 + region(rx, wp);
                        if sy < h && sx < w {
                            slots[slot] = Some(sy * w + sx);
                            inverse[sy * w + sx] = slot;
                        }
                    }
                }
            }
        }
        let mut mask = vec![0.0; n_win * area * area];
        for wi in 0..n_win {
            for i in 0..area {
                for j in 0..area {
                    let (a, b) = (wi * area + i, wi * area + j);
                    if slots[b].is_none() || labels[a] != labels[b] {
                        mask[(wi * area + i) * area + j] = mask_value;
                    }
                }
            }
        }
        Self {
            grid: (h, w),
            window: win,
            shift: s,
            padded: (hp, wp),
            slots,
            inverse,
            mask,
        }
    }

    pub fn num_windows(&self) -> usize {
        self.slots.len() / (self.window * self.window)
    }

    pub fn has_mask(&self) -> bool {
        self.mask.iter().any(|&v| v != 0.0)
    }

    /// `[H·W,c]` tokens to `[nW,w²,c]` windows.
    pub fn partition_map<T: Real>(&self, c: usize) -> Result<ResampleMap<T>> {
        let area = self.window * self.window;
        let mut index = Vec::with_capacity(self.slots.len() * c);
        for slot in &self.slots {
            match slot {
                Some(t) => index.extend((0..c).map(|ch| t * c + ch)),
                None => index.extend(std::iter::repeat_n(ResampleMap::<T>::ZERO, c)),
            }
        }
        ResampleMap::gather(
            &[self.grid.0 * self.grid.1, c],
            &[self.num_windows(), area, c],
            index,
        )
    }

    /// `[nW,w²,c]` windows back to `[H·W,c]` tokens, dropping padding.
    pub fn merge_map<T: Real>(&self, c: usize) -> Result<ResampleMap<T>> {
        let area = self.window * self.window;
        let index = self
            .inverse
            .iter()
            .flat_map(|&slot| (0..c).map(move |ch| slot * c + ch))
            .collect();
        ResampleMap::gather(
            &[self.num_windows(), area, c],
            &[self.grid.0 * self.grid.1, c],
            index,
        )
    }
}

/// Pre-norm windowed attention block followed by a pre-norm MLP.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub window: usize,
    pub shift: bool,
    pub mask_value: f64,
    /// Learned relative position bias table `[(2w-1)², n]`.
    pub rel_bias: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct SwinOptions {
    pub activation: Activation,
    pub relative_bias: bool,
}

impl Default for SwinOptions {
    fn default() -> Self {
        Self {
            activation: Activation::Relu,
            relative_bias: false,
        }
    }
}

impl SwinBlock {
    pub fn build(
        b: &mut ParamBuilder<'_>,
        name: &str,
        cfg: &AttentionConfig,
        shift: bool,
        opts: SwinOptions,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let mut s = b.scope(name);
        let norm1 = s.layernorm("norm1", c)?;
        let attn = MultiHeadAttention::build(&mut s, "attn", c, cfg.num_heads)?;
        let rel_bias = if opts.relative_bias {
            let side = 2 * cfg.window - 1;
            Some(s.tensor(
                "rel_bias",
                &[side * side, cfg.num_heads],
                Init::TruncNormal(0.02),
            )?)
        } else {
            None
        };
        let norm2 = s.layernorm("norm2", c)?;
        let mlp = s.mlp("mlp", c, 4 * c, opts.activation)?;
        Ok(Self {
            norm1,
            attn,
            norm2,
            mlp,
            window: cfg.window,
            shift,
            mask_value: cfg.mask_value,
            rel_bias,
        })
    }

    /// Applies the block to `[H·W,c]` tokens laid out row-major on `grid`.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        grid: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 2 || s[0] != grid.0 * grid.1 {
            return Err(shape_err(
                "swin_block",
                format!("{s:?} tokens for a {}x{} grid", grid.0, grid.1),
            ));
        }
        let c = s[1];
        let plan = WindowPlan::new(grid.0, grid.1, self.window, self.shift, self.mask_value);
        let tape = p.tape();
        let area = plan.window * plan.window;
        let n_win = plan.num_windows();
        let h = self.norm1.forward(p, x)?;
        let windows = h.resample(&Rc::new(plan.partition_map(c)?))?;
        let mut bias = if plan.has_mask() {
            let m = Tensor::from_fn([n_win, 1, area, area], |i| T::of(plan.mask[i]));
            Some(tape.constant(m))
        } else {
            None
        };
        if let Some(table) = self.rel_bias {
            let rb = self.relative_bias(p.get(table), plan.window)?;
            bias = Some(match bias {
                Some(m) => m.add(rb)?,
                None => rb,
            });
        }
        let a = attend(p, &self.attn, windows, windows, bias)?;
        let back = a.output.resample(&Rc::new(plan.merge_map(c)?))?;
        let x = x.add(back)?;
        let y = self.mlp.forward(p, self.norm2.forward(p, x)?)?;
        x.add(y)
    }

    /// Gathers the bias table into `[1,n,w²,w²]` for an effective window
    /// `win ≤ self.window`.
    fn relative_bias<'t, T: Real>(&self, table: Var<'t, T>, win: usize) -> Result<Var<'t, T>> {
        let n = table.shape()[1];
        let side = 2 * self.window - 1;
        let area = win * win;
        let mut index = Vec::with_capacity(n * area * area);
        for head in 0..n {
            for i in 0..area {
                for j in 0..area {
                    let dy = (i / win) as isize - (j / win) as isize + self.window as isize - 1;
                    let dx = (i % win) as isize - (j % win) as isize + self.window as isize - 1;
                    let row = dy as usize * side + dx as usize;
                    index.push(row * n + head);
                }
            }
        }
        let map = ResampleMap::gather(&table.shape(), &[1, n, area, area], index)?;
        table.resample(&Rc::new(map))
    }
}

/// Two blocks, unshifted then shifted.
#[derive(Clone, Debug)]
pub struct SwinPair {
    pub blocks: [SwinBlock; 2],
}

impl SwinPair {
    pub fn build(
        b: &mut ParamBuilder<'_>,
        name: &str,
        cfg: &AttentionConfig,
        shifted: bool,
        opts: SwinOptions,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            blocks: [
                SwinBlock::build(&mut s, "0", cfg, false, opts)?,
                SwinBlock::build(&mut s, "1", cfg, shifted, opts)?,
            ],
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        grid: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let x = self.blocks[0].forward(p, x, grid)?;
        self.blocks[1].forward(p, x, grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
    }

    fn mha_store(c: usize, heads: usize) -> (ParamStore<f64>, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mha = MultiHeadAttention::build(&mut ParamBuilder::new(&mut store, &mut rng), "a", c, heads)
            .unwrap();
        (store.cast(), mha)
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::new(16, 3, 4, -100.0).is_err());
        assert!(AttentionConfig::new(16, 4, 4, -50.0).is_err());
        assert_eq!(AttentionConfig::new(16, 4, 4, -100.0).unwrap().head_dim(), 4);
    }

    #[test]
    fn single_token_returns_projected_value() {
        let (store, mha) = mha_store(4, 2);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(random(&[1, 4], 1, 1.0));
        let out = masked_attention(&p, &mha, x, x, x, &MaskMatrix::zeros(1, -100.0))
            .unwrap()
            .output;
        let v = mha.v.forward(&p, x).unwrap();
        let expect = mha.proj.forward(&p, v).unwrap();
        assert!(out.value().max_abs_diff(&expect.value()) < 1e-12);
    }

    #[test]
    fn masked_weight_is_suppressed() {
        let (store, mha) = mha_store(4, 1);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(random(&[4, 4], 2, 1.0));
        let mask = MaskMatrix::from_fn(4, -100.0, |r, c| r == 0 && c == 3);
        let w = masked_attention(&p, &mha, x, x, x, &mask).unwrap().weights;
        assert!(w.value().at(&[0, 0, 3]) < 1e-30);
        assert!(w.value().at(&[0, 1, 3]) > 1e-3);
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let (store, mha) = mha_store(4, 2);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let row = random(&[1, 4], 3, 1.0);
        let x = tape.constant(Tensor::from_fn([3, 4], |i| row.data()[i % 4]));
        let out = masked_attention(&p, &mha, x, x, x, &MaskMatrix::zeros(3, -100.0))
            .unwrap()
            .output
            .value();
        for r in 1..3 {
            for c in 0..4 {
                assert!((out.at(&[r, c]) - out.at(&[0, c])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mask_size_mismatch_errors() {
        let (store, mha) = mha_store(4, 1);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(random(&[3, 4], 2, 1.0));
        assert!(masked_attention(&p, &mha, x, x, x, &MaskMatrix::zeros(4, -100.0)).is_err());
    }

    #[test]
    fn plan_round_trip_is_identity() {
        for &(h, w, win, shift) in &[(8, 8, 4, true), (7, 7, 4, true), (6, 10, 3, true), (2, 2, 4, true)] {
            let plan = WindowPlan::new(h, w, win, shift, -100.0);
            let x = Tensor::<f64>::from_fn([h * w, 3], |i| i as f64);
            let fwd = plan.partition_map::<f64>(3).unwrap().apply(&x).unwrap();
            let back = plan.merge_map::<f64>(3).unwrap().apply(&fwd).unwrap();
            assert_eq!(back.data(), x.data());
        }
    }

    #[test]
    fn plan_masks() {
        let plain = WindowPlan::new(8, 8, 4, false, -100.0);
        assert!(!plain.has_mask());
        let shifted = WindowPlan::new(8, 8, 4, true, -100.0);
        assert_eq!(shifted.shift, 2);
        assert!(shifted.has_mask());
        // The top-left window never wraps.
        assert!(shifted.mask[..256].iter().all(|&v| v == 0.0));
        let padded = WindowPlan::new(6, 6, 4, false, -100.0);
        assert_eq!(padded.padded, (8, 8));
        assert!(padded.has_mask());
        let small = WindowPlan::new(2, 2, 4, true, -100.0);
        assert_eq!((small.window, small.shift), (2, 0));
        assert!(!small.has_mask());
    }

    fn swin(c: usize, heads: usize, window: usize, shift: bool, bias: bool) -> (ParamStore<f64>, SwinBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AttentionConfig::new(c, heads, window, -100.0).unwrap();
        let opts = SwinOptions {
            relative_bias: bias,
            ..Default::default()
        };
        let blk = SwinBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), "b", &cfg, shift, opts)
            .unwrap();
        (store.cast(), blk)
    }

    #[test]
    fn zero_projections_give_identity() {
        let (mut store, blk) = swin(8, 2, 2, true, false);
        for id in [blk.attn.proj.weight, blk.mlp.fc2.weight] {
            *store.value_mut(id) = Tensor::zeros(store.get(id).value.shape().to_vec());
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(random(&[16, 8], 4, 1.0));
        let y = blk.forward(&p, x, (4, 4)).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn full_window_matches_global_attention() {
        let (store, blk) = swin(8, 2, 4, false, false);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(random(&[16, 8], 6, 1.0));
        let y = blk.forward(&p, x, (4, 4)).unwrap();
        let h = blk.norm1.forward(&p, x).unwrap();
        let a = masked_attention(&p, &blk.attn, h, h, h, &MaskMatrix::zeros(16, -100.0))
            .unwrap()
            .output;
        let x1 = x.add(a).unwrap();
        let expect = x1
            .add(blk.mlp.forward(&p, blk.norm2.forward(&p, x1).unwrap()).unwrap())
            .unwrap();
        assert!(y.value().max_abs_diff(&expect.value()) < 1e-12);
    }

    #[test]
    fn shapes_and_errors() {
        for bias in [false, true] {
            let (store, blk) = swin(8, 2, 4, true, bias);
            let tape = Tape::new();
            let p = store.bind(&tape);
            for &(h, w) in &[(8, 8), (7, 7), (2, 2), (4, 12)] {
                let x = tape.constant(random(&[h * w, 8], 7, 1.0));
                let y = blk.forward(&p, x, (h, w)).unwrap();
                assert_eq!(y.shape(), vec![h * w, 8]);
                assert!(y.value().is_finite());
            }
            let x = tape.constant(random(&[15, 8], 7, 1.0));
            assert!(blk.forward(&p, x, (4, 4)).is_err());
        }
    }

    #[test]
    fn head_count_changes_output() {
        let x = random(&[16, 8], 9, 1.0);
        let outs: Vec<Tensor<f64>> = [1, 2]
            .iter()
            .map(|&heads| {
                let (store, blk) = swin(8, heads, 4, false, false);
                let tape = Tape::new();
                let p = store.bind(&tape);
                let y = blk.forward(&p, tape.constant(x.clone()), (4, 4)).unwrap();
                let v = (*y.value()).clone();
                assert!(v.is_finite());
                v
            })
            .collect();
        assert!(outs[0].max_abs_diff(&outs[1]) > 1e-9);
    }
}

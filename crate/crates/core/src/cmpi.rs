//! Cross-modality point-aware interaction.
//!
//! At every grid location the RGB and depth feature vectors (or their `k×k`
//! neighbourhoods) are stacked with two global guidance vectors into a small
//! group, and a two-step masked attention runs inside each group only. All
//! groups are processed as one batch, so the cost is linear in the number of
//! locations.

use std::rc::Rc;

use crate::attention::{attend, multi_head, MaskMatrix, MultiHeadAttention};
use crate::autograd::{ResampleMap, Var};
use crate::config::{Interaction, ModelConfig};
use crate::encoder::FeatureMap;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Activation, Bound, LayerNorm, Linear, Mlp, ParamBuilder};
use crate::tensor::{Real, Tensor};

/// Row layout of one point group: RGB locals, depth locals, then `g_r` and
/// `g_d` when guidance is used. Within each local block the centre location
/// comes first, followed by the remaining neighbours in raster order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupLayout {
    pub k: usize,
    pub guidance: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RowKind {
    RgbLocal,
    DepthLocal,
    RgbGlobal,
    DepthGlobal,
}

impl RowKind {
    fn is_rgb(self) -> bool {
        matches!(self, Self::RgbLocal | Self::RgbGlobal)
    }
}

impl GroupLayout {
    pub fn new(k: usize, guidance: bool) -> Result<Self> {
        if ![1, 3, 5].contains(&k) {
            return Err(Error::Config(format!("group window {k} must be 1, 3 or 5")));
        }
        Ok(Self { k, guidance })
    }

    pub fn locals(&self) -> usize {
        self.k * self.k
    }

    pub fn rows(&self) -> usize {
        2 * self.locals() + if self.guidance { 2 } else { 0 }
    }

    /// Row of the centre RGB and depth vectors.
    pub fn centre_rows(&self) -> (usize, usize) {
        (0, self.locals())
    }

    fn kind(&self, row: usize) -> RowKind {
        let l = self.locals();
        match row {
            r if r < l => RowKind::RgbLocal,
            r if r < 2 * l => RowKind::DepthLocal,
            r if r == 2 * l => RowKind::RgbGlobal,
            _ => RowKind::DepthGlobal,
        }
    }

    /// Neighbour offsets, centre first.
    fn offsets(&self) -> Vec<(isize, isize)> {
        let r = (self.k / 2) as isize;
        let mut out = vec![(0, 0)];
        for dy in -r..=r {
            for dx in -r..=r {
                if (dy, dx) != (0, 0) {
                    out.push((dy, dx));
                }
            }
        }
        out
    }

    /// Step-one mask: blocks RGB locals from `g_d` and depth locals from
    /// `g_r`, in both directions.
    pub fn m1(&self, mask_value: f64) -> MaskMatrix {
        use RowKind::*;
        MaskMatrix::from_fn(self.rows(), mask_value, |a, b| {
            matches!(
                (self.kind(a), self.kind(b)),
                (RgbLocal, DepthGlobal)
                    | (DepthGlobal, RgbLocal)
                    | (DepthLocal, RgbGlobal)
                    | (RgbGlobal, DepthLocal)
            )
        })
    }

    /// Step-two mask: blocks every cross-modality pair.
    pub fn m2(&self, mask_value: f64) -> MaskMatrix {
        MaskMatrix::from_fn(self.rows(), mask_value, |a, b| {
            self.kind(a).is_rgb() != self.kind(b).is_rgb()
        })
    }

    /// Gather building `[N, rows, c]` groups from the stacked source
    /// `[f_r; f_d; g_r; g_d]` of shape `[2N(+2), c]`. Out-of-grid neighbours
    /// read as zero.
    fn gather_map<T: Real>(&self, h: usize, w: usize, c: usize) -> Result<ResampleMap<T>> {
        let n = h * w;
        let src_rows = 2 * n + if self.guidance { 2 } else { 0 };
        let rows = self.rows();
        let offsets = self.offsets();
        let mut index = Vec::with_capacity(n * rows * c);
        let push_row = |index: &mut Vec<usize>, src: Option<usize>| match src {
            Some(r) => index.extend((0..c).map(|ch| r * c + ch)),
            None => index.extend(std::iter::repeat_n(ResampleMap::<T>::ZERO, c)),
        };
        for y in 0..h {
            for x in 0..w {
                for base in [0, n] {
                    for &(dy, dx) in &offsets {
                        let (sy, sx) = (y as isize + dy, x as isize + dx);
                        let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                        let src = inside.then(|| base + sy as usize * w + sx as usize);
                        push_row(&mut index, src);
                    }
                }
                if self.guidance {
                    push_row(&mut index, Some(2 * n));
                    push_row(&mut index, Some(2 * n + 1));
                }
            }
        }
        ResampleMap::gather(&[src_rows, c], &[n, rows, c], index)
    }
}

/// The two masks for window `k` with guidance rows.
pub fn build_masks(k: usize, mask_value: f64) -> Result<(MaskMatrix, MaskMatrix)> {
    crate::attention::check_mask_value(mask_value)?;
    let layout = GroupLayout::new(k, true)?;
    Ok((layout.m1(mask_value), layout.m2(mask_value)))
}

/// Saliency-weighted mean of `[N,c]` tokens, `Σ f·S / (Σ S + 1e-6)`, as
/// `[1,c]`. `None` weights every location equally.
pub fn masked_average_pool<'t, T: Real>(
    f: &FeatureMap<'t, T>,
    s: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let (h, w) = f.grid;
    let n = h * w;
    let weights = match s {
        Some(s) => {
            let shape = s.shape();
            let n_s: usize = shape.iter().product();
            let spatial = &shape[shape.len().saturating_sub(2)..];
            if n_s != n || spatial != [h, w] {
                return Err(shape_err(
                    "masked_average_pool",
                    format!("mask {shape:?} for a {h}x{w} feature grid"),
                ));
            }
            s.reshape(&[1, n])?
        }
        None => f.tokens.tape().constant(Tensor::ones([1, n])),
    };
    let num = weights.matmul(f.tokens)?;
    let den = weights.sum().add_scalar(1e-6).reshape(&[1, 1])?;
    num.div(den)
}

/// Query, key and value projections.
#[derive(Clone, Debug)]
pub struct Projections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl Projections {
    fn build(b: &mut ParamBuilder<'_>, name: &str, c: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            q: s.linear("q", c, c, true)?,
            k: s.linear("k", c, c, true)?,
            v: s.linear("v", c, c, true)?,
        })
    }

    fn apply<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        Ok((self.q.forward(p, x)?, self.k.forward(p, x)?, self.v.forward(p, x)?))
    }
}

/// Two-step masked attention over point groups.
#[derive(Clone, Debug)]
pub struct RelationModel {
    pub norm: Option<LayerNorm>,
    pub step1: Projections,
    /// `None` when step two is skipped or reuses `step1`.
    pub step2: Option<Projections>,
    pub two_step: bool,
    pub out: Linear,
    pub heads: usize,
}

/// Per-location output of [`RelationModel::relation_modeling`].
pub struct RmOutput<'t, T: Real> {
    pub f_r: Var<'t, T>,
    pub f_d: Var<'t, T>,
    /// Step-one attention weights, one `[rows,rows]` matrix per head.
    pub step1_weights: Vec<Var<'t, T>>,
}

impl RelationModel {
    fn step2(&self) -> &Projections {
        self.step2.as_ref().unwrap_or(&self.step1)
    }

    /// Batched form on `[N,rows,c]` groups. Returns all rows after the
    /// residual connection.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        groups: Var<'t, T>,
        m1: Option<Var<'t, T>>,
        m2: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let x = match &self.norm {
            Some(n) => n.forward(p, groups)?,
            None => groups,
        };
        let (q, k, v) = self.step1.apply(p, x)?;
        let mut h = multi_head(q, k, v, self.heads, m1)?.output;
        if self.two_step {
            let (q, k, v) = self.step2().apply(p, h)?;
            h = multi_head(q, k, v, self.heads, m2)?.output;
        }
        let y = self.out.forward(p, h)?;
        if self.norm.is_some() {
            groups.add(y)
        } else {
            Ok(y)
        }
    }

    /// Single-group form on a `[rows,c]` matrix, computed head by head with
    /// plain matrix products.
    pub fn relation_modeling<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        group: Var<'t, T>,
        layout: GroupLayout,
        m1: &MaskMatrix,
        m2: &MaskMatrix,
    ) -> Result<RmOutput<'t, T>> {
        let s = group.shape();
        let rows = layout.rows();
        if s.len() != 2 || s[0] != rows || m1.size() != rows || m2.size() != rows {
            return Err(shape_err(
                "relation_modeling",
                format!("group {s:?} with {}-row masks for layout {layout:?}", m1.size()),
            ));
        }
        let c = s[1];
        if !c.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {c} is not divisible into {} heads", self.heads)));
        }
        let tape = p.tape();
        let d = c / self.heads;
        let columns = |x: Var<'t, T>, j: usize| -> Result<Var<'t, T>> {
            let index = (0..rows).flat_map(|r| (0..d).map(move |i| r * c + j * d + i)).collect();
            x.resample(&Rc::new(ResampleMap::gather(&[rows, c], &[rows, d], index)?))
        };
        let step = |x: Var<'t, T>, proj: &Projections, mask: &MaskMatrix| -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
            let (q, k, v) = proj.apply(p, x)?;
            let m = tape.constant(mask.to_tensor());
            let mut heads = Vec::with_capacity(self.heads);
            let mut weights = Vec::with_capacity(self.heads);
            for j in 0..self.heads {
                let scores = columns(q, j)?
                    .matmul_t(columns(k, j)?, false, true)?
                    .scale(1.0 / (d as f64).sqrt())
                    .add(m)?;
                let w = scores.softmax();
                heads.push(w.matmul(columns(v, j)?)?);
                weights.push(w);
            }
            Ok((tape.concat(&heads, 1)?, weights))
        };
        let x = match &self.norm {
            Some(n) => n.forward(p, group)?,
            None => group,
        };
        let (mut h, step1_weights) = step(x, &self.step1, m1)?;
        if self.two_step {
            h = step(h, self.step2(), m2)?.0;
        }
        let mut y = self.out.forward(p, h)?;
        if self.norm.is_some() {
            y = group.add(y)?;
        }
        let (r, dr) = layout.centre_rows();
        let row = |i: usize| -> Result<Var<'t, T>> {
            let map = ResampleMap::gather(&[rows, c], &[1, c], (0..c).map(|ch| i * c + ch).collect())?;
            y.resample(&Rc::new(map))
        };
        Ok(RmOutput {
            f_r: row(r)?,
            f_d: row(dr)?,
            step1_weights,
        })
    }
}

/// Per-modality MLPs followed by a linear merge of their concatenation.
#[derive(Clone, Debug)]
pub struct Fuse {
    pub mlp_r: Mlp,
    pub mlp_d: Mlp,
    pub out: Linear,
}

impl Fuse {
    fn build(b: &mut ParamBuilder<'_>, c: usize) -> Result<Self> {
        let mut s = b.scope("fuse");
        Ok(Self {
            mlp_r: s.mlp("mlp_r", c, 2 * c, Activation::Relu)?,
            mlp_d: s.mlp("mlp_d", c, 2 * c, Activation::Relu)?,
            out: s.linear("out", 2 * c, c, true)?,
        })
    }

    /// `[N,c]` pair to `[N,c]`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, f_r: Var<'t, T>, f_d: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.mlp_r.forward(p, f_r)?;
        let b = self.mlp_d.forward(p, f_d)?;
        let axis = a.shape().len() - 1;
        self.out.forward(p, p.tape().concat(&[a, b], axis)?)
    }
}

#[derive(Clone, Debug)]
pub enum InteractionParams {
    Add,
    Mul,
    Concat(Linear),
    CrossAttention {
        norm_r: LayerNorm,
        norm_d: LayerNorm,
        r_from_d: MultiHeadAttention,
        d_from_r: MultiHeadAttention,
        fuse: Fuse,
    },
    Conv1x1(Linear),
    Point {
        rm: Option<RelationModel>,
        fuse: Fuse,
    },
}

/// One stage of cross-modality interaction.
#[derive(Clone, Debug)]
pub struct CmpiStage {
    pub width: usize,
    pub layout: GroupLayout,
    pub mask_value: f64,
    pub use_m1: bool,
    pub use_m2: bool,
    pub params: InteractionParams,
}

impl CmpiStage {
    pub fn build(b: &mut ParamBuilder<'_>, name: &str, cfg: &ModelConfig, stage: usize) -> Result<Self> {
        let c = cfg.width(stage);
        let heads = cfg.heads[stage];
        let mut s = b.scope(name);
        let params = match cfg.interaction {
            Interaction::Add => InteractionParams::Add,
            Interaction::Mul => InteractionParams::Mul,
            Interaction::Concat => InteractionParams::Concat(s.linear("concat", 2 * c, c, true)?),
            Interaction::Conv1x1 => InteractionParams::Conv1x1(s.linear("conv1x1", 4 * c, c, true)?),
            Interaction::CrossAttention => InteractionParams::CrossAttention {
                norm_r: s.layernorm("norm_r", c)?,
                norm_d: s.layernorm("norm_d", c)?,
                r_from_d: MultiHeadAttention::build(&mut s, "r_from_d", c, heads)?,
                d_from_r: MultiHeadAttention::build(&mut s, "d_from_r", c, heads)?,
                fuse: Fuse::build(&mut s, c)?,
            },
            Interaction::Cmpi => {
                let rm = if cfg.rm_enabled {
                    let mut r = s.scope("rm");
                    let norm = if cfg.rm_residual {
                        Some(r.layernorm("norm", c)?)
                    } else {
                        None
                    };
                    let step1 = Projections::build(&mut r, "step1", c)?;
                    let two_step = !cfg.single_step;
                    let step2 = if two_step && !cfg.rm_share_step_weights {
                        Some(Projections::build(&mut r, "step2", c)?)
                    } else {
                        None
                    };
                    let out = r.linear("out", c, c, true)?;
                    if !c.is_multiple_of(heads) {
                        return Err(Error::Config(format!("width {c} is not divisible into {heads} heads")));
                    }
                    Some(RelationModel {
                        norm,
                        step1,
                        step2,
                        two_step,
                        out,
                        heads,
                    })
                } else {
                    None
                };
                InteractionParams::Point {
                    rm,
                    fuse: Fuse::build(&mut s, c)?,
                }
            }
        };
        Ok(Self {
            width: c,
            layout: GroupLayout::new(cfg.cmpi_window, cfg.use_guidance)?,
            mask_value: cfg.mask_value,
            use_m1: cfg.use_m1,
            use_m2: cfg.use_m2,
            params,
        })
    }

    fn masks(&self) -> (MaskMatrix, MaskMatrix) {
        let rows = self.layout.rows();
        let m1 = if self.use_m1 {
            self.layout.m1(self.mask_value)
        } else {
            MaskMatrix::zeros(rows, self.mask_value)
        };
        let m2 = if self.use_m2 {
            self.layout.m2(self.mask_value)
        } else {
            MaskMatrix::zeros(rows, self.mask_value)
        };
        (m1, m2)
    }

    fn check<'t, T: Real>(&self, f_r: &FeatureMap<'t, T>, f_d: &FeatureMap<'t, T>) -> Result<()> {
        if f_r.grid != f_d.grid || f_r.tokens.shape() != f_d.tokens.shape() || f_r.channels() != self.width {
            return Err(shape_err(
                "cmpi",
                format!(
                    "rgb {:?} on {:?} and depth {:?} on {:?} for width {}",
                    f_r.tokens.shape(),
                    f_r.grid,
                    f_d.tokens.shape(),
                    f_d.grid,
                    self.width
                ),
            ));
        }
        Ok(())
    }

    /// Guidance vectors `[1,c]` for both modalities.
    pub fn guidance<'t, T: Real>(
        &self,
        f_r: &FeatureMap<'t, T>,
        f_d: &FeatureMap<'t, T>,
        s_next: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        Ok((masked_average_pool(f_r, s_next)?, masked_average_pool(f_d, s_next)?))
    }

    /// Fuses the two streams. `s_next` is the coarser side output already
    /// resized to this stage's grid.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        f_r: FeatureMap<'t, T>,
        f_d: FeatureMap<'t, T>,
        s_next: Option<Var<'t, T>>,
    ) -> Result<FeatureMap<'t, T>> {
        self.check(&f_r, &f_d)?;
        let tape = p.tape();
        let (h, w) = f_r.grid;
        let n = h * w;
        let c = self.width;
        let (r, d) = (f_r.tokens, f_d.tokens);
        let tokens = match &self.params {
            InteractionParams::Add => r.add(d)?,
            InteractionParams::Mul => r.mul(d)?,
            InteractionParams::Concat(lin) => lin.forward(p, tape.concat(&[r, d], 1)?)?,
            InteractionParams::Conv1x1(lin) => {
                let (g_r, g_d) = self.guidance(&f_r, &f_d, s_next)?;
                let g_r = g_r.broadcast_to(&[n, c])?;
                let g_d = g_d.broadcast_to(&[n, c])?;
                lin.forward(p, tape.concat(&[r, d, g_r, g_d], 1)?)?
            }
            InteractionParams::CrossAttention {
                norm_r,
                norm_d,
                r_from_d,
                d_from_r,
                fuse,
            } => {
                let nr = norm_r.forward(p, r)?.reshape(&[1, n, c])?;
                let nd = norm_d.forward(p, d)?.reshape(&[1, n, c])?;
                let r2 = r.add(attend(p, r_from_d, nr, nd, None)?.output.reshape(&[n, c])?)?;
                let d2 = d.add(attend(p, d_from_r, nd, nr, None)?.output.reshape(&[n, c])?)?;
                fuse.forward(p, r2, d2)?
            }
            InteractionParams::Point { rm: None, fuse } => fuse.forward(p, r, d)?,
            InteractionParams::Point { rm: Some(_), .. } => {
                let g = if self.layout.guidance {
                    Some(self.guidance(&f_r, &f_d, s_next)?)
                } else {
                    None
                };
                self.relate_points(p, &f_r, &f_d, g)?
            }
        };
        Ok(FeatureMap {
            tokens,
            grid: (h, w),
        })
    }

    /// Batched relation modeling and fusion with explicit guidance vectors.
    pub fn relate_points<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        f_r: &FeatureMap<'t, T>,
        f_d: &FeatureMap<'t, T>,
        guidance: Option<(Var<'t, T>, Var<'t, T>)>,
    ) -> Result<Var<'t, T>> {
        self.check(f_r, f_d)?;
        let InteractionParams::Point { rm: Some(rm), fuse } = &self.params else {
            return Err(Error::Config("stage has no relation model".into()));
        };
        if guidance.is_some() != self.layout.guidance {
            return Err(Error::Config("guidance vectors do not match the group layout".into()));
        }
        let tape = p.tape();
        let (h, w) = f_r.grid;
        let n = h * w;
        let c = self.width;
        let mut parts = vec![f_r.tokens, f_d.tokens];
        if let Some((g_r, g_d)) = guidance {
            parts.extend([g_r, g_d]);
        }
        let source = tape.concat(&parts, 0)?;
        let groups = source.resample(&Rc::new(self.layout.gather_map(h, w, c)?))?;
        let (m1, m2) = self.masks();
        let rows = self.layout.rows();
        let as_bias = |m: &MaskMatrix| -> Result<Option<Var<'t, T>>> {
            if m.count_masked() == 0 {
                return Ok(None);
            }
            Ok(Some(tape.constant(m.to_tensor::<T>().reshape([1, 1, rows, rows])?)))
        };
        let out = rm.forward(p, groups, as_bias(&m1)?, as_bias(&m2)?)?;
        let (cr, cd) = self.layout.centre_rows();
        let pick = |row: usize| -> Result<Var<'t, T>> {
            let index = (0..n)
                .flat_map(|i| (0..c).map(move |ch| (i * rows + row) * c + ch))
                .collect();
            out.resample(&Rc::new(ResampleMap::gather(&[n, rows, c], &[n, c], index)?))
        };
        fuse.forward(p, pick(cr)?, pick(cd)?)
    }

    /// Location-by-location evaluation of [`CmpiStage::forward`] for the
    /// point interaction, used as a reference.
    pub fn forward_sequential<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        f_r: FeatureMap<'t, T>,
        f_d: FeatureMap<'t, T>,
        s_next: Option<Var<'t, T>>,
    ) -> Result<FeatureMap<'t, T>> {
        self.check(&f_r, &f_d)?;
        let InteractionParams::Point { rm, fuse } = &self.params else {
            return self.forward(p, f_r, f_d, s_next);
        };
        let tape = p.tape();
        let (h, w) = f_r.grid;
        let n = h * w;
        let c = self.width;
        let token = |x: Var<'t, T>, y: isize, xx: isize| -> Result<Var<'t, T>> {
            if y < 0 || xx < 0 || y as usize >= h || xx as usize >= w {
                return Ok(tape.constant(Tensor::zeros([1, c])));
            }
            let t = y as usize * w + xx as usize;
            let map = ResampleMap::gather(&[n, c], &[1, c], (0..c).map(|ch| t * c + ch).collect())?;
            x.resample(&Rc::new(map))
        };
        let guidance = if self.layout.guidance && rm.is_some() {
            Some(self.guidance(&f_r, &f_d, s_next)?)
        } else {
            None
        };
        let (m1, m2) = self.masks();
        let offsets = self.layout.offsets();
        let mut out = Vec::with_capacity(n);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (a, b) = match rm {
                    None => (token(f_r.tokens, y, x)?, token(f_d.tokens, y, x)?),
                    Some(rm) => {
                        let mut rows = Vec::with_capacity(self.layout.rows());
                        for src in [f_r.tokens, f_d.tokens] {
                            for &(dy, dx) in &offsets {
                                rows.push(token(src, y + dy, x + dx)?);
                            }
                        }
                        if let Some((g_r, g_d)) = guidance {
                            rows.extend([g_r, g_d]);
                        }
                        let group = tape.concat(&rows, 0)?;
                        let o = rm.relation_modeling(p, group, self.layout, &m1, &m2)?;
                        (o.f_r, o.f_d)
                    }
                };
                out.push(fuse.forward(p, a, b)?);
            }
        }
        Ok(FeatureMap {
            tokens: tape.concat(&out, 0)?,
            grid: (h, w),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::config::Config;
    use crate::nn::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn stage(cfg: &ModelConfig, idx: usize, seed: u64) -> (ParamStore<f64>, CmpiStage) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let st = CmpiStage::build(&mut ParamBuilder::new(&mut store, &mut rng), "cmpi", cfg, idx).unwrap();
        // Larger weights than the default init so that every path matters.
        let mut store: ParamStore<f64> = store.cast();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let v = store.value_mut(id);
            if v.rank() == 2 {
                for x in v.data_mut() {
                    *x *= 10.0;
                }
            }
        }
        (store, st)
    }

    #[test]
    fn k1_masks_match_the_anti_diagonal() {
        let (m1, m2) = build_masks(1, -100.0).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expect = if r + c == 3 { -100.0 } else { 0.0 };
                assert_eq!(m1.get(r, c), expect, "M1[{r},{c}]");
            }
        }
        let allowed: Vec<(usize, usize)> = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .filter(|&(r, c)| !m2.is_masked(r, c))
            .collect();
        assert_eq!(
            allowed,
            [(0, 0), (0, 2), (1, 1), (1, 3), (2, 0), (2, 2), (3, 1), (3, 3)]
        );
    }

    #[test]
    fn k3_masks() {
        let (m1, m2) = build_masks(3, -10.0).unwrap();
        assert_eq!(m1.size(), 20);
        assert_eq!(m1.count_masked(), 36);
        assert_eq!(m2.count_masked(), 2 * 10 * 10);
        assert!(m1.values().iter().chain(m2.values()).all(|&v| v == 0.0 || v == -10.0));
        assert!(build_masks(2, -100.0).is_err());
        assert!(build_masks(1, -1.0).is_err());
    }

    #[test]
    fn masked_average_pool_examples() {
        let tape = Tape::<f64>::new();
        let fm = FeatureMap {
            tokens: tape.constant(random(&[6, 3], 1)),
            grid: (2, 3),
        };
        let ones = FeatureMap {
            tokens: tape.constant(Tensor::ones([6, 3])),
            grid: (2, 3),
        };
        let s = tape.constant(random(&[2, 3], 2).map(|v| v.abs() + 0.1));
        let g = masked_average_pool(&ones, Some(s)).unwrap();
        assert!(g.value().data().iter().all(|v| (v - 1.0).abs() < 1e-5));

        let half = tape.constant(Tensor::full([2, 3], 0.5));
        let g = masked_average_pool(&fm, Some(half)).unwrap();
        let mean = fm.tokens.mean_axis(0).unwrap();
        assert!(g.value().data().iter().zip(mean.value().data()).all(|(a, b)| (a - b).abs() < 1e-5));

        let onehot = tape.constant(Tensor::from_fn([2, 3], |i| if i == 4 { 1.0 } else { 0.0 }));
        let g = masked_average_pool(&fm, Some(onehot)).unwrap();
        for ch in 0..3 {
            assert!((g.value().at(&[0, ch]) - fm.tokens.value().at(&[4, ch])).abs() < 1e-5);
        }
        let wrong = tape.constant(Tensor::ones([3, 2]));
        assert!(masked_average_pool(&fm, Some(wrong)).is_err());
    }

    #[test]
    fn batched_equals_sequential() {
        for (k, guidance, single) in [(1, true, false), (3, true, false), (1, false, false), (1, true, true)] {
            let mut cfg = Config::toy().model;
            cfg.cmpi_window = k;
            cfg.use_guidance = guidance;
            cfg.single_step = single;
            let (store, st) = stage(&cfg, 1, k as u64);
            let tape = Tape::new();
            let p = store.bind(&tape);
            let fr = FeatureMap { tokens: tape.constant(random(&[16, 32], 3)), grid: (4, 4) };
            let fd = FeatureMap { tokens: tape.constant(random(&[16, 32], 4)), grid: (4, 4) };
            let s = tape.constant(random(&[4, 4], 5).map(f64::abs));
            let a = st.forward(&p, fr, fd, Some(s)).unwrap().tokens.value();
            let b = st.forward_sequential(&p, fr, fd, Some(s)).unwrap().tokens.value();
            assert!(a.max_abs_diff(&b) < 1e-10, "k={k} diff {}", a.max_abs_diff(&b));
        }
    }

    #[test]
    fn location_independence() {
        let cfg = Config::toy().model;
        let (store, st) = stage(&cfg, 0, 9);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let g_r = tape.constant(random(&[1, 16], 5));
        let g_d = tape.constant(random(&[1, 16], 6));
        let fr = random(&[9, 16], 1);
        let fd = random(&[9, 16], 2);
        let run = |fr: &Tensor<f64>| {
            let a = FeatureMap { tokens: tape.constant(fr.clone()), grid: (3, 3) };
            let b = FeatureMap { tokens: tape.constant(fd.clone()), grid: (3, 3) };
            st.relate_points(&p, &a, &b, Some((g_r, g_d))).unwrap().value()
        };
        let before = run(&fr);
        let mut changed = fr.clone();
        changed.data_mut()[4 * 16..5 * 16].iter_mut().for_each(|v| *v += 3.0);
        let after = run(&changed);
        for loc in 0..9 {
            let same = before.data()[loc * 16..][..16] == after.data()[loc * 16..][..16];
            assert_eq!(same, loc != 4, "location {loc}");
        }
    }

    #[test]
    fn step_one_suppresses_cross_guidance() {
        let cfg = Config::toy().model;
        let (store, st) = stage(&cfg, 0, 2);
        let InteractionParams::Point { rm: Some(rm), .. } = &st.params else { unreachable!() };
        let (m1, m2) = build_masks(1, -100.0).unwrap();
        for seed in 0..5 {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let group = tape.constant(random(&[4, 16], seed).map(|v| v * 0.3));
            let o = rm.relation_modeling(&p, group, st.layout, &m1, &m2).unwrap();
            for w in &o.step1_weights {
                assert!(w.value().at(&[0, 3]) < 1e-30);
                assert!(w.value().at(&[1, 2]) < 1e-30);
            }
        }
    }

    #[test]
    fn zero_group_gives_zero_output() {
        let mut cfg = Config::toy().model;
        cfg.rm_residual = false;
        let (store, st) = stage(&cfg, 0, 3);
        let InteractionParams::Point { rm: Some(rm), .. } = &st.params else { unreachable!() };
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (m1, m2) = build_masks(1, -100.0).unwrap();
        let o = rm
            .relation_modeling(&p, tape.constant(Tensor::zeros([4, 16])), st.layout, &m1, &m2)
            .unwrap();
        assert!(o.f_r.value().data().iter().chain(o.f_d.value().data()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_changes_output() {
        let x = random(&[16, 16], 7);
        let y = random(&[16, 16], 8);
        let run = |single: bool| {
            let mut cfg = Config::toy().model;
            cfg.single_step = single;
            cfg.rm_share_step_weights = true;
            let (store, st) = stage(&cfg, 0, 4);
            let tape = Tape::new();
            let p = store.bind(&tape);
            let fr = FeatureMap { tokens: tape.constant(x.clone()), grid: (4, 4) };
            let fd = FeatureMap { tokens: tape.constant(y.clone()), grid: (4, 4) };
            (*st.forward(&p, fr, fd, None).unwrap().tokens.value()).clone()
        };
        assert!(run(true).max_abs_diff(&run(false)) > 1e-6);
    }

    #[test]
    fn fuse_is_asymmetric() {
        let cfg = Config::toy().model;
        let (store, st) = stage(&cfg, 0, 5);
        let InteractionParams::Point { fuse, .. } = &st.params else { unreachable!() };
        let tape = Tape::new();
        let p = store.bind(&tape);
        let a = tape.constant(random(&[1, 16], 1));
        let b = tape.constant(random(&[1, 16], 2));
        let ab = fuse.forward(&p, a, b).unwrap().value();
        let ba = fuse.forward(&p, b, a).unwrap().value();
        assert_eq!(ab.shape(), &[1, 16]);
        assert!(ab.max_abs_diff(&ba) > 1e-6);
    }

    #[test]
    fn every_interaction_preserves_shape() {
        for mode in Interaction::ALL {
            let mut cfg = Config::toy().model;
            cfg.interaction = *mode;
            let (store, st) = stage(&cfg, 2, 6);
            let tape = Tape::new();
            let p = store.bind(&tape);
            let fr = FeatureMap { tokens: tape.constant(random(&[16, 64], 1)), grid: (4, 4) };
            let fd = FeatureMap { tokens: tape.constant(random(&[16, 64], 2)), grid: (4, 4) };
            let out = st.forward(&p, fr, fd, None).unwrap();
            assert_eq!(out.tokens.shape(), vec![16, 64], "{mode}");
            assert!(out.tokens.value().is_finite());
        }
    }

    #[test]
    fn flops_scale_linearly() {
        let cfg = Config::toy().model;
        let (store, st) = stage(&cfg, 0, 7);
        let count = |h: usize| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let fr = FeatureMap { tokens: tape.constant(random(&[h * 8, 16], 1)), grid: (h, 8) };
            let fd = FeatureMap { tokens: tape.constant(random(&[h * 8, 16], 2)), grid: (h, 8) };
            let before = tape.flops();
            st.forward(&p, fr, fd, None).unwrap();
            (tape.flops() - before) as f64
        };
        let ratio = count(8) / count(4);
        assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
    }
}

//! Embedding of the raw 4D cost volume into a K-channel cost feature volume,
//! plus differentiable quadlinear lookup into it.
//!
//! The embedder combines local and global aggregation: two stages of
//! separable 3x3 plane convolutions spread local matching evidence, then each
//! source cell's target slice is pooled and projected to a token, one
//! pre-norm multi-head self-attention block with a feed-forward refines the
//! tokens across all source cells, and the refined token is broadcast back
//! onto every target position of its source cell.

use std::sync::Arc;

use rand::Rng;

use crate::error::{NemfError, NemfResult};
use crate::features::CostVolume;
use crate::tensor::{Plane, Scalar, Tape, Tensor, Var};

/// Maps between continuous image pixel coordinates and (coarse) grid
/// coordinates, align-corners convention: g = p * (grid - 1) / (image - 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VolumeGeometry {
    /// [src_rows, src_cols, tgt_rows, tgt_cols] of the coarse grid.
    pub grid: [usize; 4],
    /// [src_h, src_w, tgt_h, tgt_w] of the image pair.
    pub image: [usize; 4],
}

impl VolumeGeometry {
    pub fn new(grid: [usize; 4], image: [usize; 4]) -> Self {
        VolumeGeometry { grid, image }
    }

    /// Grid units per image pixel along one axis.
    pub fn to_grid_scale(&self, axis: usize) -> f64 {
        if self.image[axis] <= 1 {
            return 0.0;
        }
        (self.grid[axis] - 1) as f64 / (self.image[axis] - 1) as f64
    }

    /// Image pixel coordinate of a grid index along one axis.
    pub fn to_image(&self, axis: usize, grid_idx: f64) -> f64 {
        if self.grid[axis] <= 1 {
            return 0.0;
        }
        grid_idx * (self.image[axis] - 1) as f64 / (self.grid[axis] - 1) as f64
    }
}

/// The embedded 5D volume C' with K channels.
#[derive(Clone, Debug)]
pub struct CostFeatureVolume<T> {
    pub grid: [usize; 4],
    pub k_channels: usize,
    /// [src_rows, src_cols, tgt_rows, tgt_cols, K]
    pub data: Tensor<T>,
}

/// Channel-wise average of C'.
#[derive(Clone, Debug)]
pub struct PooledCostVolume<T> {
    pub grid: [usize; 4],
    /// [src_rows, src_cols, tgt_rows, tgt_cols]
    pub data: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbedderConfig {
    pub grid: [usize; 4],
    /// Channels of the output volume (and of the attention tokens).
    pub k_channels: usize,
    /// Channels between the two convolution stages.
    pub conv_channels: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `k_channels`.
    pub ffn_mult: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            grid: [16, 16, 16, 16],
            k_channels: 16,
            conv_channels: 16,
            heads: 4,
            ffn_mult: 4,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> NemfResult<()> {
        if self.k_channels == 0 || self.k_channels % self.heads != 0 {
            return Err(NemfError::Config(format!(
                "k_channels {} must be a positive multiple of heads {}",
                self.k_channels, self.heads
            )));
        }
        if self.grid.iter().any(|&g| g == 0) {
            return Err(NemfError::Config("zero grid extent".into()));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.grid[2] * self.grid[3]
    }

    pub fn source_cells(&self) -> usize {
        self.grid[0] * self.grid[1]
    }
}

macro_rules! embedder_tensors {
    ($op:ident, $self:ident) => {
        [
            ("embed.conv_s1.kernel", $op!(conv_s1_k)),
            ("embed.conv_s1.bias", $op!(conv_s1_b)),
            ("embed.conv_t1.kernel", $op!(conv_t1_k)),
            ("embed.conv_t1.bias", $op!(conv_t1_b)),
            ("embed.conv_s2.kernel", $op!(conv_s2_k)),
            ("embed.conv_s2.bias", $op!(conv_s2_b)),
            ("embed.conv_t2.kernel", $op!(conv_t2_k)),
            ("embed.conv_t2.bias", $op!(conv_t2_b)),
            ("embed.token.weight", $op!(w_token)),
            ("embed.token.bias", $op!(b_token)),
            ("embed.ln1.gain", $op!(ln1_g)),
            ("embed.ln1.bias", $op!(ln1_b)),
            ("embed.attn.q.weight", $op!(w_q)),
            ("embed.attn.q.bias", $op!(b_q)),
            ("embed.attn.k.weight", $op!(w_k)),
            ("embed.attn.k.bias", $op!(b_k)),
            ("embed.attn.v.weight", $op!(w_v)),
            ("embed.attn.v.bias", $op!(b_v)),
            ("embed.attn.out.weight", $op!(w_o)),
            ("embed.attn.out.bias", $op!(b_o)),
            ("embed.ln2.gain", $op!(ln2_g)),
            ("embed.ln2.bias", $op!(ln2_b)),
            ("embed.ffn.w1", $op!(ffn_w1)),
            ("embed.ffn.b1", $op!(ffn_b1)),
            ("embed.ffn.w2", $op!(ffn_w2)),
            ("embed.ffn.b2", $op!(ffn_b2)),
        ]
    };
}

/// Learned parameters of the cost embedding network.
#[derive(Clone, Debug)]
pub struct EmbedderParams<T> {
    pub cfg: EmbedderConfig,
    pub conv_s1_k: Tensor<T>,
    pub conv_s1_b: Tensor<T>,
    pub conv_t1_k: Tensor<T>,
    pub conv_t1_b: Tensor<T>,
    pub conv_s2_k: Tensor<T>,
    pub conv_s2_b: Tensor<T>,
    pub conv_t2_k: Tensor<T>,
    pub conv_t2_b: Tensor<T>,
    pub w_token: Tensor<T>,
    pub b_token: Tensor<T>,
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
}

impl<T: Scalar> EmbedderParams<T> {
    pub fn init<R: Rng>(cfg: EmbedderConfig, rng: &mut R) -> NemfResult<Self> {
        cfg.validate()?;
        let k = cfg.k_channels;
        let mid = cfg.conv_channels;
        let tok = cfg.token_dim();
        let ffn = cfg.ffn_mult * k;
        let he = |rng: &mut R, shape: &[usize], fan_in: usize| {
            Tensor::he_uniform(rng, shape, fan_in).with_grad()
        };
        let zeros = |shape: &[usize]| Tensor::zeros(shape).with_grad();
        let ones = |shape: &[usize]| Tensor::full(shape, T::one()).with_grad();
        Ok(EmbedderParams {
            cfg,
            conv_s1_k: he(rng, &[3, 3, 1, mid], 9),
            conv_s1_b: zeros(&[mid]),
            conv_t1_k: he(rng, &[3, 3, mid, mid], 9 * mid),
            conv_t1_b: zeros(&[mid]),
            conv_s2_k: he(rng, &[3, 3, mid, k], 9 * mid),
            conv_s2_b: zeros(&[k]),
            conv_t2_k: he(rng, &[3, 3, k, k], 9 * k),
            conv_t2_b: zeros(&[k]),
            w_token: he(rng, &[tok, k], tok),
            b_token: zeros(&[k]),
            ln1_g: ones(&[k]),
            ln1_b: zeros(&[k]),
            w_q: he(rng, &[k, k], k),
            b_q: zeros(&[k]),
            w_k: he(rng, &[k, k], k),
            b_k: zeros(&[k]),
            w_v: he(rng, &[k, k], k),
            b_v: zeros(&[k]),
            w_o: he(rng, &[k, k], k),
            b_o: zeros(&[k]),
            ln2_g: ones(&[k]),
            ln2_b: zeros(&[k]),
            ffn_w1: he(rng, &[k, ffn], k),
            ffn_b1: zeros(&[ffn]),
            ffn_w2: he(rng, &[ffn, k], ffn),
            ffn_b2: zeros(&[k]),
        })
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        macro_rules! r {
            ($f:ident) => {
                &self.$f
            };
        }
        embedder_tensors!(r, self).to_vec()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        macro_rules! m {
            ($f:ident) => {
                &mut self.$f
            };
        }
        Vec::from(embedder_tensors!(m, self).map(|(_, t)| t))
    }

    /// Total learned parameter count; deterministic for a given config.
    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn leaves(&self, tape: &mut Tape<T>) -> EmbedderVars {
        macro_rules! l {
            ($f:ident) => {
                tape.leaf(self.$f.clone())
            };
        }
        let vars = embedder_tensors!(l, self).map(|(_, v)| v);
        EmbedderVars { vars }
    }
}

/// Tape handles for the embedder parameters, in `named()` order.
#[derive(Clone, Copy)]
pub struct EmbedderVars {
    vars: [Var; 26],
}

impl EmbedderVars {
    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    fn at(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

// Indices into EmbedderVars::vars, matching embedder_tensors! order.
const CONV_S1_K: usize = 0;
const CONV_S1_B: usize = 1;
const CONV_T1_K: usize = 2;
const CONV_T1_B: usize = 3;
const CONV_S2_K: usize = 4;
const CONV_S2_B: usize = 5;
const CONV_T2_K: usize = 6;
const CONV_T2_B: usize = 7;
const W_TOKEN: usize = 8;
const B_TOKEN: usize = 9;
const LN1_G: usize = 10;
const LN1_B: usize = 11;
const W_Q: usize = 12;
const B_Q: usize = 13;
const W_K: usize = 14;
const B_K: usize = 15;
const W_V: usize = 16;
const B_V: usize = 17;
const W_O: usize = 18;
const B_O: usize = 19;
const LN2_G: usize = 20;
const LN2_B: usize = 21;
const FFN_W1: usize = 22;
const FFN_B1: usize = 23;
const FFN_W2: usize = 24;
const FFN_B2: usize = 25;

/// One pre-norm self-attention + feed-forward block over source-cell tokens
/// [n, k]. Permutation-equivariant: permuting token rows permutes the output
/// rows identically.
pub fn attention_refine<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    vars: &EmbedderVars,
    cfg: &EmbedderConfig,
) -> NemfResult<Var> {
    let k = cfg.k_channels;
    let dk = k / cfg.heads;
    let scale = T::of(1.0 / (dk as f64).sqrt());

    let normed = tape.layer_norm(tokens, vars.at(LN1_G), vars.at(LN1_B))?;
    let project = |tape: &mut Tape<T>, w, b| -> NemfResult<Var> {
        let p = tape.matmul(normed, w)?;
        tape.add(p, b)
    };
    let q = project(tape, vars.at(W_Q), vars.at(B_Q))?;
    let key = project(tape, vars.at(W_K), vars.at(B_K))?;
    let v = project(tape, vars.at(W_V), vars.at(B_V))?;

    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(key, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores);
        heads.push(tape.matmul(attn, vh)?);
    }
    let ctx = tape.concat(&heads, 1)?;
    let out = tape.matmul(ctx, vars.at(W_O))?;
    let out = tape.add(out, vars.at(B_O))?;
    let t1 = tape.add(tokens, out)?;

    let normed2 = tape.layer_norm(t1, vars.at(LN2_G), vars.at(LN2_B))?;
    let f = tape.matmul(normed2, vars.at(FFN_W1))?;
    let f = tape.add(f, vars.at(FFN_B1))?;
    let f = tape.relu(f);
    let f = tape.matmul(f, vars.at(FFN_W2))?;
    let f = tape.add(f, vars.at(FFN_B2))?;
    tape.add(t1, f)
}

/// Full embedder forward on the tape. `cost` is the raw 4D volume
/// [hs, ws, ht, wt]; the result is the 5D volume [hs, ws, ht, wt, K].
pub fn embed_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &EmbedderVars,
    cfg: &EmbedderConfig,
    cost: Var,
) -> NemfResult<Var> {
    let [hs, ws, ht, wt] = cfg.grid;
    let k = cfg.k_channels;

    let x = tape.reshape(cost, &[hs, ws, ht, wt, 1])?;
    let x = tape.conv_plane(x, vars.at(CONV_S1_K), vars.at(CONV_S1_B), Plane::Source)?;
    let x = tape.relu(x);
    let x = tape.conv_plane(x, vars.at(CONV_T1_K), vars.at(CONV_T1_B), Plane::Target)?;
    let x = tape.relu(x);
    let x = tape.conv_plane(x, vars.at(CONV_S2_K), vars.at(CONV_S2_B), Plane::Source)?;
    let x = tape.relu(x);
    let x = tape.conv_plane(x, vars.at(CONV_T2_K), vars.at(CONV_T2_B), Plane::Target)?;

    // one token per source cell from its pooled target slice
    let pooled = tape.mean_last(x); // [hs, ws, ht, wt]
    let slices = tape.reshape(pooled, &[hs * ws, ht * wt])?;
    let tokens = tape.matmul(slices, vars.at(W_TOKEN))?;
    let tokens = tape.add(tokens, vars.at(B_TOKEN))?;

    let refined = attention_refine(tape, tokens, vars, cfg)?;

    // broadcast each refined token over its source cell's target positions
    let spread = tape.repeat_rows(refined, ht * wt)?;
    let flat = tape.reshape(x, &[hs * ws * ht * wt, k])?;
    let summed = tape.add(flat, spread)?;
    tape.reshape(summed, &[hs, ws, ht, wt, k])
}

/// Host-side embedding of a cost volume with fixed parameters.
pub fn embed<T: Scalar>(
    params: &EmbedderParams<T>,
    cost: &CostVolume<T>,
) -> NemfResult<CostFeatureVolume<T>> {
    if cost.grid != params.cfg.grid {
        return Err(NemfError::ShapeMismatch {
            op: "embed",
            lhs: cost.grid.to_vec(),
            rhs: params.cfg.grid.to_vec(),
        });
    }
    let mut tape = Tape::new();
    let mut frozen = params.clone();
    for t in frozen.tensors_mut() {
        t.set_requires_grad(false);
    }
    let vars = frozen.leaves(&mut tape);
    let cost_var = tape.constant(cost.data.clone());
    let out = embed_tape(&mut tape, &vars, &params.cfg, cost_var)?;
    Ok(CostFeatureVolume {
        grid: params.cfg.grid,
        k_channels: params.cfg.k_channels,
        data: tape.value(out).clone(),
    })
}

/// Channel-wise mean over K: the pooled volume used for initialization and
/// the end-point-error objective.
pub fn pool<T: Scalar>(vol: &CostFeatureVolume<T>) -> PooledCostVolume<T> {
    let k = vol.k_channels;
    let cells = vol.data.numel() / k;
    let inv = T::one() / T::of(k as f64);
    let mut out = Vec::with_capacity(cells);
    for chunk in vol.data.data().chunks(k) {
        let mut acc = T::zero();
        for &v in chunk {
            acc += v;
        }
        out.push(acc * inv);
    }
    PooledCostVolume {
        grid: vol.grid,
        data: Tensor::from_vec(vol.grid.to_vec(), out).expect("pool shape"),
    }
}

/// Quadlinear interpolation of the 5D volume at a batch of continuous image
/// coordinates, differentiable w.r.t. both the volume and the coordinates.
///
/// `coords` are [B, 1] tape nodes in image pixel coordinates, ordered
/// (src_row, src_col, tgt_row, tgt_col). Coordinates are clamped to the grid;
/// the gradient is zero in clamped directions.
pub fn interpolate_batch<T: Scalar>(
    tape: &mut Tape<T>,
    vol: Var,
    geom: &VolumeGeometry,
    coords: &[Var; 4],
) -> NemfResult<Var> {
    let vshape = tape.value(vol).shape().to_vec();
    if vshape.len() != 5 || vshape[..4] != geom.grid.map(|g| g) {
        return Err(NemfError::ShapeMismatch {
            op: "interpolate",
            lhs: vshape,
            rhs: geom.grid.to_vec(),
        });
    }
    let k = vshape[4];
    let cells: usize = geom.grid.iter().product();
    let rows = tape.value(coords[0]).shape()[0];

    // per-axis grid coordinates, lower corner indices and fractional offsets
    let mut lo_idx: Vec<Vec<usize>> = Vec::with_capacity(4);
    let mut hi_idx: Vec<Vec<usize>> = Vec::with_capacity(4);
    let mut w_lo: Vec<Var> = Vec::with_capacity(4);
    let mut w_hi: Vec<Var> = Vec::with_capacity(4);
    for axis in 0..4 {
        let extent = geom.grid[axis];
        let scaled = tape.scale(coords[axis], T::of(geom.to_grid_scale(axis)));
        let g = tape.clamp(scaled, T::zero(), T::of((extent - 1) as f64));
        let gv = tape.value(g).data().to_vec();
        let mut lo = Vec::with_capacity(rows);
        let mut hi = Vec::with_capacity(rows);
        let mut base = Vec::with_capacity(rows);
        for &v in &gv {
            let mut i0 = v.to_f64().floor() as usize;
            if extent >= 2 && i0 > extent - 2 {
                i0 = extent - 2;
            }
            let i1 = (i0 + 1).min(extent - 1);
            lo.push(i0);
            hi.push(i1);
            base.push(T::of(i0 as f64));
        }
        let base_t = tape.constant(Tensor::from_vec(vec![rows, 1], base)?);
        let frac = tape.sub(g, base_t)?;
        let neg = tape.neg(frac);
        let one_minus = tape.add_scalar(neg, T::one());
        lo_idx.push(lo);
        hi_idx.push(hi);
        w_lo.push(one_minus);
        w_hi.push(frac);
    }

    let vol2d = tape.reshape(vol, &[cells, k])?;
    let strides = [
        geom.grid[1] * geom.grid[2] * geom.grid[3],
        geom.grid[2] * geom.grid[3],
        geom.grid[3],
        1,
    ];

    let mut acc: Option<Var> = None;
    for corner in 0..16usize {
        let mut idx = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut flat = 0usize;
            for axis in 0..4 {
                let i = if corner >> axis & 1 == 1 {
                    hi_idx[axis][r]
                } else {
                    lo_idx[axis][r]
                };
                flat += i * strides[axis];
            }
            idx.push(flat);
        }
        let gathered = tape.gather_rows(vol2d, Arc::new(idx))?;
        let mut w = if corner & 1 == 1 { w_hi[0] } else { w_lo[0] };
        for axis in 1..4 {
            let wa = if corner >> axis & 1 == 1 {
                w_hi[axis]
            } else {
                w_lo[axis]
            };
            w = tape.mul(w, wa)?;
        }
        let contrib = tape.row_scale(gathered, w)?;
        acc = Some(match acc {
            None => contrib,
            Some(prev) => tape.add(prev, contrib)?,
        });
    }
    Ok(acc.expect("sixteen corners"))
}

/// Convenience single-point lookup; `p` is (src_row, src_col, tgt_row,
/// tgt_col) in image pixel coordinates.
pub fn interpolate<T: Scalar>(
    vol: &CostFeatureVolume<T>,
    geom: &VolumeGeometry,
    p: [f64; 4],
) -> NemfResult<Vec<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(vol.data.clone());
    let coords: Vec<Var> = p
        .iter()
        .map(|&c| tape.constant(Tensor::from_vec(vec![1, 1], vec![T::of(c)]).unwrap()))
        .collect();
    let out = interpolate_batch(
        &mut tape,
        v,
        geom,
        &[coords[0], coords[1], coords[2], coords[3]],
    )?;
    Ok(tape.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EmbedderConfig {
        EmbedderConfig {
            grid: [3, 3, 2, 2],
            k_channels: 4,
            conv_channels: 4,
            heads: 2,
            ffn_mult: 2,
        }
    }

    fn rand_cost(seed: u64, grid: [usize; 4]) -> CostVolume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Tensor::uniform(&mut rng, &grid, -1.0, 1.0);
        CostVolume { grid, data }
    }

    fn rand_volume(seed: u64, grid: [usize; 4], k: usize) -> CostFeatureVolume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = grid.to_vec();
        shape.push(k);
        CostFeatureVolume {
            grid,
            k_channels: k,
            data: Tensor::uniform(&mut rng, &shape, -1.0, 1.0),
        }
    }

    #[test]
    fn zero_cost_zero_bias_output_is_finite_and_deterministic() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = EmbedderParams::<f64>::init(cfg, &mut rng).unwrap();
        let cost = CostVolume {
            grid: cfg.grid,
            data: Tensor::zeros(&cfg.grid),
        };
        let a = embed(&params, &cost).unwrap();
        let b = embed(&params, &cost).unwrap();
        assert!(a.data.first_non_finite().is_none());
        assert_eq!(a.data.data(), b.data.data());
    }

    #[test]
    fn embed_rejects_resolution_mismatch() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = EmbedderParams::<f64>::init(cfg, &mut rng).unwrap();
        let cost = rand_cost(2, [3, 3, 3, 2]);
        assert!(embed(&params, &cost).is_err());
    }

    #[test]
    fn embedder_param_count_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = EmbedderParams::<f64>::init(tiny_cfg(), &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = EmbedderParams::<f64>::init(tiny_cfg(), &mut rng).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_eq!(a.named().len(), 26);
    }

    #[test]
    fn embed_gradients_match_finite_differences_for_every_parameter() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = EmbedderParams::<f64>::init(cfg, &mut rng).unwrap();
        let cost = rand_cost(4, cfg.grid);

        let forward = |p: &EmbedderParams<f64>| -> f64 {
            let mut tape = Tape::new();
            let vars = p.leaves(&mut tape);
            let c = tape.constant(cost.data.clone());
            let out = embed_tape(&mut tape, &vars, &cfg, c).unwrap();
            let m = tape.mean(out);
            tape.value(m).item()
        };

        let mut tape = Tape::new();
        let vars = params.leaves(&mut tape);
        let c = tape.constant(cost.data.clone());
        let out = embed_tape(&mut tape, &vars, &cfg, c).unwrap();
        let loss = tape.mean(out);
        let grads = tape.backward(loss).unwrap();

        let names: Vec<&str> = params.named().iter().map(|(n, _)| *n).collect();
        for (pi, (&v, name)) in vars.all().iter().zip(&names).enumerate() {
            let analytic = grads.get(v).expect(name).data().to_vec();
            let base = params.named()[pi].1.data().to_vec();
            let f = |x: &[f64]| -> f64 {
                let mut probe = params.clone();
                let t = &mut probe.tensors_mut()[pi];
                t.data_mut().copy_from_slice(x);
                forward(&probe)
            };
            let numeric = finite_diff(f, &base, 1e-5);
            let err = max_rel_err(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "{name}: rel err {err:.3e}");
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let cfg = tiny_cfg();
        let n = cfg.source_cells();
        let k = cfg.k_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = EmbedderParams::<f64>::init(cfg, &mut rng).unwrap();
        let tokens = Tensor::<f64>::uniform(&mut rng, &[n, k], -1.0, 1.0);

        // a fixed random permutation of the source cells
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            use rand::Rng;
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }

        let run = |input: &Tensor<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let vars = params.leaves(&mut tape);
            let t = tape.constant(input.clone());
            let out = attention_refine(&mut tape, t, &vars, &cfg).unwrap();
            tape.value(out).data().to_vec()
        };

        let base = run(&tokens);
        let mut permuted = vec![0.0; n * k];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * k..(dst + 1) * k]
                .copy_from_slice(&tokens.data()[src * k..(src + 1) * k]);
        }
        let out_perm = run(&Tensor::from_vec(vec![n, k], permuted).unwrap());
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..k {
                let a = out_perm[dst * k + j];
                let b = base[src * k + j];
                assert!((a - b).abs() < 1e-9, "row {dst} ch {j}");
            }
        }
    }

    #[test]
    fn interpolation_is_exact_on_every_grid_point() {
        let grid = [4, 4, 4, 4];
        let k = 3;
        let vol = rand_volume(21, grid, k);
        let geom = VolumeGeometry::new(grid, [32, 32, 32, 32]);
        for cell in 0..256usize {
            let gi = [cell / 64, cell / 16 % 4, cell / 4 % 4, cell % 4];
            let p: Vec<f64> = (0..4).map(|a| geom.to_image(a, gi[a] as f64)).collect();
            let phi = interpolate(&vol, &geom, [p[0], p[1], p[2], p[3]]).unwrap();
            let base = cell * k;
            for j in 0..k {
                let stored = vol.data.data()[base + j];
                assert!(
                    (phi[j] - stored).abs() < 1e-6,
                    "cell {gi:?} ch {j}: {} vs {stored}",
                    phi[j]
                );
            }
        }
    }

    #[test]
    fn interpolation_midpoint_averages_neighbors() {
        let grid = [2, 2, 2, 2];
        let vol = rand_volume(22, grid, 2);
        let geom = VolumeGeometry::new(grid, [17, 17, 17, 17]);
        // midpoint along the target column axis, all other axes on-grid
        let p = [0.0, 0.0, 0.0, 8.0];
        let phi = interpolate(&vol, &geom, p).unwrap();
        let k = 2;
        let v0 = &vol.data.data()[0..k]; // (0,0,0,0)
        let v1 = &vol.data.data()[k..2 * k]; // (0,0,0,1)
        for j in 0..k {
            let expect = 0.5 * (v0[j] + v1[j]);
            assert!((phi[j] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn interpolation_is_affine_along_a_single_axis() {
        let grid = [3, 3, 3, 3];
        let vol = rand_volume(23, grid, 2);
        let geom = VolumeGeometry::new(grid, [33, 33, 33, 33]);
        // within one cell along axis 2, endpoints a and b
        let pa = [16.0, 16.0, 0.0, 16.0];
        let pb = [16.0, 16.0, 15.9, 16.0];
        let fa = interpolate(&vol, &geom, pa).unwrap();
        let fb = interpolate(&vol, &geom, pb).unwrap();
        for lambda in [0.25, 0.5, 0.75] {
            let p = [16.0, 16.0, pa[2] + lambda * (pb[2] - pa[2]), 16.0];
            let f = interpolate(&vol, &geom, p).unwrap();
            for j in 0..2 {
                let expect = fa[j] + lambda * (fb[j] - fa[j]);
                assert!((f[j] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn interpolation_gradients_match_finite_differences() {
        let grid = [4, 4, 4, 4];
        let vol = rand_volume(24, grid, 3);
        let geom = VolumeGeometry::new(grid, [32, 32, 32, 32]);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        use rand::Rng;
        for _ in 0..100 {
            // interior points away from cell boundaries
            let p: Vec<f64> = (0..4)
                .map(|a| {
                    let cellf: f64 = rng.gen_range(0.0..(grid[a] - 1) as f64);
                    let frac = 0.1 + 0.8 * (cellf - cellf.floor());
                    geom.to_image(a, cellf.floor() + frac)
                })
                .collect();

            let forward = |x: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let v = tape.constant(vol.data.clone());
                let coords: Vec<Var> = x
                    .iter()
                    .map(|&c| {
                        tape.leaf(
                            Tensor::from_vec(vec![1, 1], vec![c]).unwrap().with_grad(),
                        )
                    })
                    .collect();
                let out = interpolate_batch(
                    &mut tape,
                    v,
                    &geom,
                    &[coords[0], coords[1], coords[2], coords[3]],
                )
                .unwrap();
                let s = tape.sum(out);
                tape.value(s).item()
            };

            let mut tape = Tape::new();
            let v = tape.constant(vol.data.clone());
            let coords: Vec<Var> = p
                .iter()
                .map(|&c| {
                    tape.leaf(Tensor::from_vec(vec![1, 1], vec![c]).unwrap().with_grad())
                })
                .collect();
            let out = interpolate_batch(
                &mut tape,
                v,
                &geom,
                &[coords[0], coords[1], coords[2], coords[3]],
            )
            .unwrap();
            let s = tape.sum(out);
            let grads = tape.backward(s).unwrap();
            let analytic: Vec<f64> = coords
                .iter()
                .map(|&c| grads.get(c).unwrap().item())
                .collect();
            let numeric = finite_diff(forward, &p, 1e-5);
            let err = max_rel_err(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "p {p:?}: rel err {err:.3e}");
        }
    }

    #[test]
    fn clamped_coordinates_have_zero_gradient() {
        let grid = [4, 4, 4, 4];
        let vol = rand_volume(25, grid, 2);
        let geom = VolumeGeometry::new(grid, [32, 32, 32, 32]);
        // target row far outside the image
        let p = [10.0, 10.0, 500.0, 10.0];
        let mut tape = Tape::new();
        let v = tape.constant(vol.data.clone());
        let coords: Vec<Var> = p
            .iter()
            .map(|&c| tape.leaf(Tensor::from_vec(vec![1, 1], vec![c]).unwrap().with_grad()))
            .collect();
        let out = interpolate_batch(
            &mut tape,
            v,
            &geom,
            &[coords[0], coords[1], coords[2], coords[3]],
        )
        .unwrap();
        let s = tape.sum(out);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(coords[2]).unwrap().item(), 0.0);
        assert_ne!(grads.get(coords[0]).unwrap().item(), 0.0);
    }

    #[test]
    fn pool_is_the_channel_mean() {
        // identical channels: pooled equals any channel
        let grid = [2, 2, 2, 2];
        let cells = 16;
        let k = 3;
        let mut data = Vec::new();
        for cell in 0..cells {
            for _ in 0..k {
                data.push(cell as f64 * 0.5);
            }
        }
        let mut shape = grid.to_vec();
        shape.push(k);
        let vol = CostFeatureVolume {
            grid,
            k_channels: k,
            data: Tensor::from_vec(shape, data).unwrap(),
        };
        let v = pool(&vol);
        for (cell, &p) in v.data.data().iter().enumerate() {
            assert!((p - cell as f64 * 0.5).abs() < 1e-12);
        }

        // channels {0, 2} pool to 1
        let vol2 = CostFeatureVolume {
            grid,
            k_channels: 2,
            data: Tensor::from_vec(
                vec![2, 2, 2, 2, 2],
                (0..32).map(|i| if i % 2 == 0 { 0.0 } else { 2.0 }).collect(),
            )
            .unwrap(),
        };
        for &p in pool(&vol2).data.data() {
            assert_eq!(p, 1.0);
        }

        // random volume vs scalar-loop oracle
        let vol3 = rand_volume(29, grid, 5);
        let pooled = pool(&vol3);
        for cell in 0..cells {
            let mut acc = 0.0;
            for j in 0..5 {
                acc += vol3.data.data()[cell * 5 + j];
            }
            let expect = acc / 5.0;
            assert!((pooled.data.data()[cell] - expect).abs() < 1e-6);
        }
    }
}

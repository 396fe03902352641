//! The implicit matching field: sinusoidal coordinate encoding, a residual
//! MLP conditioned on the interpolated cost feature vector, and a sigmoid
//! head. Also owns checkpoint persistence for the field and embedder
//! parameters together.
//!
//! A query is a 4D point [x, y]: source pixel x and target pixel y, both in
//! continuous image coordinates (row, col). Coordinates are normalized to
//! [-1, 1] per axis before encoding.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::cost_embed::{
    interpolate_batch, CostFeatureVolume, EmbedderConfig, EmbedderParams, VolumeGeometry,
};
use crate::error::{NemfError, NemfResult};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"NMFW";
pub const WEIGHTS_VERSION: u16 = 1;

/// 4D query point in image pixel coordinates, (row, col) order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryPoint {
    pub src: [f64; 2],
    pub tgt: [f64; 2],
}

impl QueryPoint {
    pub fn new(src: [f64; 2], tgt: [f64; 2]) -> Self {
        QueryPoint { src, tgt }
    }
}

/// Field score, strictly inside (0, 1) for finite inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchScore<T>(pub T);

/// Sinusoidal encoder configuration: L is the number of frequency octaves;
/// each scalar expands to 2(L+1) values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub frequencies: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { frequencies: 10 }
    }
}

impl EncoderConfig {
    pub fn per_scalar(&self) -> usize {
        2 * (self.frequencies + 1)
    }

    /// Encoded dimension of a 4D query.
    pub fn query_dim(&self) -> usize {
        4 * self.per_scalar()
    }
}

/// Encode one normalized scalar t in [-1, 1]:
/// [sin(2^0 t pi), cos(2^0 t pi), ..., sin(2^L t pi), cos(2^L t pi)].
pub fn encode_scalar<T: Scalar>(t: T, cfg: &EncoderConfig) -> Vec<T> {
    let mut out = Vec::with_capacity(cfg.per_scalar());
    for j in 0..=cfg.frequencies {
        let arg = t * T::of((1u64 << j) as f64 * std::f64::consts::PI);
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Encode a normalized 4D point, scalar-major.
pub fn encode<T: Scalar>(p_norm: [T; 4], cfg: &EncoderConfig) -> Vec<T> {
    let mut out = Vec::with_capacity(cfg.query_dim());
    for t in p_norm {
        out.extend(encode_scalar(t, cfg));
    }
    out
}

/// Tape version of [`encode`] over a batch: `coords` are [B, 1] nodes in
/// image pixel coordinates; normalization to [-1, 1] happens inside using
/// the geometry's image extents. Output is [B, 4 * 2(L+1)].
pub fn encode_batch<T: Scalar>(
    tape: &mut Tape<T>,
    coords: &[Var; 4],
    geom: &VolumeGeometry,
    cfg: &EncoderConfig,
) -> NemfResult<Var> {
    let mut columns = Vec::with_capacity(cfg.query_dim());
    for axis in 0..4 {
        let extent = geom.image[axis];
        let scale = if extent > 1 {
            2.0 / (extent - 1) as f64
        } else {
            0.0
        };
        let scaled = tape.scale(coords[axis], T::of(scale));
        let t = tape.add_scalar(scaled, T::of(-1.0));
        for j in 0..=cfg.frequencies {
            let arg = tape.scale(t, T::of((1u64 << j) as f64 * std::f64::consts::PI));
            columns.push(tape.sin(arg));
            columns.push(tape.cos(arg));
        }
    }
    tape.concat(&columns, 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FieldConfig {
    pub encoder: EncoderConfig,
    pub hidden: usize,
    pub blocks: usize,
    pub k_channels: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            encoder: EncoderConfig::default(),
            hidden: 256,
            blocks: 3,
            k_channels: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FieldBlock<T> {
    pub w_cond: Tensor<T>,
    pub b_cond: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// Parameters of the conditioned residual MLP.
#[derive(Clone, Debug)]
pub struct FieldModel<T> {
    pub cfg: FieldConfig,
    pub w_in: Tensor<T>,
    pub b_in: Tensor<T>,
    pub blocks: Vec<FieldBlock<T>>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

impl<T: Scalar> FieldModel<T> {
    /// He-uniform weights, zero biases. With a zero output bias the initial
    /// scores sit near 0.5.
    pub fn init<R: Rng>(cfg: FieldConfig, rng: &mut R) -> Self {
        let enc = cfg.encoder.query_dim();
        let h = cfg.hidden;
        let k = cfg.k_channels;
        let blocks = (0..cfg.blocks)
            .map(|_| FieldBlock {
                w_cond: Tensor::he_uniform(rng, &[k, h], k).with_grad(),
                b_cond: Tensor::zeros(&[h]).with_grad(),
                w1: Tensor::he_uniform(rng, &[h, h], h).with_grad(),
                b1: Tensor::zeros(&[h]).with_grad(),
                w2: Tensor::he_uniform(rng, &[h, h], h).with_grad(),
                b2: Tensor::zeros(&[h]).with_grad(),
            })
            .collect();
        FieldModel {
            cfg,
            w_in: Tensor::he_uniform(rng, &[enc, h], enc).with_grad(),
            b_in: Tensor::zeros(&[h]).with_grad(),
            blocks,
            w_out: Tensor::he_uniform(rng, &[h, 1], h).with_grad(),
            b_out: Tensor::zeros(&[1]).with_grad(),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("field.input.weight".into(), &self.w_in),
            ("field.input.bias".into(), &self.b_in),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("field.block{i}.cond.weight"), &b.w_cond));
            out.push((format!("field.block{i}.cond.bias"), &b.b_cond));
            out.push((format!("field.block{i}.fc1.weight"), &b.w1));
            out.push((format!("field.block{i}.fc1.bias"), &b.b1));
            out.push((format!("field.block{i}.fc2.weight"), &b.w2));
            out.push((format!("field.block{i}.fc2.bias"), &b.b2));
        }
        out.push(("field.out.weight".into(), &self.w_out));
        out.push(("field.out.bias".into(), &self.b_out));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![&mut self.w_in, &mut self.b_in];
        for b in self.blocks.iter_mut() {
            out.push(&mut b.w_cond);
            out.push(&mut b.b_cond);
            out.push(&mut b.w1);
            out.push(&mut b.b1);
            out.push(&mut b.w2);
            out.push(&mut b.b2);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn leaves(&self, tape: &mut Tape<T>) -> FieldVars {
        FieldVars {
            w_in: tape.leaf(self.w_in.clone()),
            b_in: tape.leaf(self.b_in.clone()),
            blocks: self
                .blocks
                .iter()
                .map(|b| FieldBlockVars {
                    w_cond: tape.leaf(b.w_cond.clone()),
                    b_cond: tape.leaf(b.b_cond.clone()),
                    w1: tape.leaf(b.w1.clone()),
                    b1: tape.leaf(b.b1.clone()),
                    w2: tape.leaf(b.w2.clone()),
                    b2: tape.leaf(b.b2.clone()),
                })
                .collect(),
            w_out: tape.leaf(self.w_out.clone()),
            b_out: tape.leaf(self.b_out.clone()),
        }
    }

    /// Score one query. Errors when the volume's channel count does not match
    /// the model configuration.
    pub fn evaluate(
        &self,
        vol: &CostFeatureVolume<T>,
        geom: &VolumeGeometry,
        p: QueryPoint,
    ) -> NemfResult<MatchScore<T>> {
        let scores = self.score_batch(vol, geom, &[p], 1)?;
        Ok(MatchScore(scores[0]))
    }

    /// Score a batch of queries, evaluated in chunks of `batch` rows. Each
    /// row's arithmetic is independent of the chunking, so results are
    /// bitwise identical for any batch size.
    pub fn score_batch(
        &self,
        vol: &CostFeatureVolume<T>,
        geom: &VolumeGeometry,
        queries: &[QueryPoint],
        batch: usize,
    ) -> NemfResult<Vec<T>> {
        self.check_volume(vol)?;
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let vol_var = tape.constant(vol.data.clone());
            let coords = query_leaves(&mut tape, chunk, false);
            let vars = self.leaves_frozen(&mut tape);
            let fwd = forward_batch(&mut tape, &vars, &self.cfg, vol_var, geom, &coords)?;
            out.extend_from_slice(tape.value(fwd.scores).data());
        }
        Ok(out)
    }

    /// Scores plus the gradient of -log M w.r.t. each query's target
    /// coordinates (row, col).
    pub fn score_with_target_grad(
        &self,
        vol: &CostFeatureVolume<T>,
        geom: &VolumeGeometry,
        queries: &[QueryPoint],
        batch: usize,
    ) -> NemfResult<(Vec<T>, Vec<[T; 2]>)> {
        self.check_volume(vol)?;
        let mut scores = Vec::with_capacity(queries.len());
        let mut grads_out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let vol_var = tape.constant(vol.data.clone());
            let coords = query_leaves(&mut tape, chunk, true);
            let vars = self.leaves_frozen(&mut tape);
            let fwd = forward_batch(&mut tape, &vars, &self.cfg, vol_var, geom, &coords)?;
            let nll_rows = tape.log(fwd.scores);
            let nll = tape.sum(nll_rows);
            let loss = tape.neg(nll);
            let grads = tape.backward(loss)?;
            let gr = grads.get(coords[2]).expect("target row grad");
            let gc = grads.get(coords[3]).expect("target col grad");
            scores.extend_from_slice(tape.value(fwd.scores).data());
            grads_out.extend(
                gr.data()
                    .iter()
                    .zip(gc.data())
                    .map(|(&r, &c)| [r, c]),
            );
        }
        Ok((scores, grads_out))
    }

    fn check_volume(&self, vol: &CostFeatureVolume<T>) -> NemfResult<()> {
        if vol.k_channels != self.cfg.k_channels {
            return Err(NemfError::ShapeMismatch {
                op: "evaluate",
                lhs: vec![vol.k_channels],
                rhs: vec![self.cfg.k_channels],
            });
        }
        Ok(())
    }

    fn leaves_frozen(&self, tape: &mut Tape<T>) -> FieldVars {
        let mut frozen = self.clone();
        for t in frozen.tensors_mut() {
            t.set_requires_grad(false);
        }
        frozen.leaves(tape)
    }
}

pub struct FieldBlockVars {
    pub w_cond: Var,
    pub b_cond: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct FieldVars {
    pub w_in: Var,
    pub b_in: Var,
    pub blocks: Vec<FieldBlockVars>,
    pub w_out: Var,
    pub b_out: Var,
}

impl FieldVars {
    /// All parameter handles in `FieldModel::named()` order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.w_in, self.b_in];
        for b in &self.blocks {
            out.extend([b.w_cond, b.b_cond, b.w1, b.b1, b.w2, b.b2]);
        }
        out.extend([self.w_out, self.b_out]);
        out
    }
}

/// Build [B, 1] coordinate leaves from queries; target coordinates get
/// gradients when `grad_targets` is set.
pub fn query_leaves<T: Scalar>(
    tape: &mut Tape<T>,
    queries: &[QueryPoint],
    grad_targets: bool,
) -> [Var; 4] {
    let rows = queries.len();
    let column = |tape: &mut Tape<T>, pick: &dyn Fn(&QueryPoint) -> f64, grad: bool| {
        let data: Vec<T> = queries.iter().map(|q| T::of(pick(q))).collect();
        let mut t = Tensor::from_vec(vec![rows, 1], data).expect("query column");
        t.set_requires_grad(grad);
        tape.leaf(t)
    };
    [
        column(tape, &|q| q.src[0], false),
        column(tape, &|q| q.src[1], false),
        column(tape, &|q| q.tgt[0], grad_targets),
        column(tape, &|q| q.tgt[1], grad_targets),
    ]
}

pub struct FieldForward {
    /// Pre-sigmoid logits [B, 1]: logit(M(p)) exactly.
    pub logits: Var,
    /// Sigmoid scores [B, 1] in (0, 1).
    pub scores: Var,
}

/// The full field forward pass on the tape: encode, interpolate, run the
/// conditioned residual MLP, apply the sigmoid head.
pub fn forward_batch<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &FieldVars,
    cfg: &FieldConfig,
    vol: Var,
    geom: &VolumeGeometry,
    coords: &[Var; 4],
) -> NemfResult<FieldForward> {
    let gamma = encode_batch(tape, coords, geom, &cfg.encoder)?;
    let phi = interpolate_batch(tape, vol, geom, coords)?;

    let h = tape.matmul(gamma, vars.w_in)?;
    let mut h = tape.add(h, vars.b_in)?;
    for b in &vars.blocks {
        let cond = tape.matmul(phi, b.w_cond)?;
        let cond = tape.add(cond, b.b_cond)?;
        h = tape.add(h, cond)?;
        let t = tape.matmul(h, b.w1)?;
        let t = tape.add(t, b.b1)?;
        let t = tape.relu(t);
        let t = tape.matmul(t, b.w2)?;
        let t = tape.add(t, b.b2)?;
        let t = tape.relu(t);
        h = tape.add(h, t)?;
    }
    let logits = tape.matmul(h, vars.w_out)?;
    let logits = tape.add(logits, vars.b_out)?;
    let scores = tape.sigmoid(logits);
    Ok(FieldForward { logits, scores })
}

// ---- persistence ------------------------------------------------------------

fn config_block<T: Scalar>(field: &FieldModel<T>, embed: &EmbedderParams<T>) -> String {
    let e = &embed.cfg;
    format!(
        "l={}\nhidden={}\nblocks={}\nk_channels={}\ngrid={},{},{},{}\nconv_channels={}\nheads={}\nffn_mult={}\n",
        field.cfg.encoder.frequencies,
        field.cfg.hidden,
        field.cfg.blocks,
        field.cfg.k_channels,
        e.grid[0],
        e.grid[1],
        e.grid[2],
        e.grid[3],
        e.conv_channels,
        e.heads,
        e.ffn_mult,
    )
}

fn parse_config_block(path: &str, text: &str) -> NemfResult<(FieldConfig, EmbedderConfig)> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| -> NemfResult<String> {
        map.get(k).cloned().ok_or_else(|| NemfError::Record {
            path: path.to_string(),
            line: 0,
            reason: format!("missing config key {k}"),
        })
    };
    let num = |k: &str| -> NemfResult<usize> {
        get(k)?.parse().map_err(|_| NemfError::Record {
            path: path.to_string(),
            line: 0,
            reason: format!("bad config value for {k}"),
        })
    };
    let grid_s = get("grid")?;
    let grid_v: Vec<usize> = grid_s
        .split(',')
        .filter_map(|s| s.trim().parse().ok())
        .collect();
    if grid_v.len() != 4 {
        return Err(NemfError::Record {
            path: path.to_string(),
            line: 0,
            reason: "grid must have 4 extents".into(),
        });
    }
    let field = FieldConfig {
        encoder: EncoderConfig {
            frequencies: num("l")?,
        },
        hidden: num("hidden")?,
        blocks: num("blocks")?,
        k_channels: num("k_channels")?,
    };
    let embed = EmbedderConfig {
        grid: [grid_v[0], grid_v[1], grid_v[2], grid_v[3]],
        k_channels: field.k_channels,
        conv_channels: num("conv_channels")?,
        heads: num("heads")?,
        ffn_mult: num("ffn_mult")?,
    };
    Ok((field, embed))
}

/// Serialize field + embedder into the NMFW container:
/// magic | version u16 LE | config block (u32 length + UTF-8 key=value lines)
/// | tensor count u32 | per tensor: name (u16 length + bytes), rank u8,
/// dims u32 LE, payload float32 LE. A human-readable sidecar `<path>.txt`
/// echoes the config.
pub fn save_model<T: Scalar>(
    field: &FieldModel<T>,
    embed: &EmbedderParams<T>,
    path: &Path,
) -> NemfResult<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&WEIGHTS_MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let cfg = config_block(field, embed);
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());

    let mut tensors: Vec<(String, &Tensor<T>)> = field.named();
    tensors.extend(embed.named().into_iter().map(|(n, t)| (n.to_string(), t)));
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_f32_le());
        }
    }
    let p = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|e| NemfError::io(p.clone(), e))?;
    f.write_all(&buf).map_err(|e| NemfError::io(p.clone(), e))?;

    let sidecar = format!("{}.txt", path.display());
    let text = format!(
        "{cfg}field_params={}\nembed_params={}\n",
        field.param_count(),
        embed.param_count()
    );
    std::fs::write(&sidecar, text).map_err(|e| NemfError::io(sidecar.clone(), e))
}

struct Reader<'a> {
    path: String,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> NemfResult<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(NemfError::Truncated {
                path: self.path.clone(),
                context: context.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, c: &str) -> NemfResult<u16> {
        Ok(u16::from_le_bytes(self.take(2, c)?.try_into().unwrap()))
    }

    fn u32(&mut self, c: &str) -> NemfResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, c)?.try_into().unwrap()))
    }
}

/// Load a checkpoint saved by [`save_model`]. Shapes are validated against
/// the stored config; a mismatch names the offending tensor.
pub fn load_model<T: Scalar>(path: &Path) -> NemfResult<(FieldModel<T>, EmbedderParams<T>)> {
    let p = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| NemfError::io(p.clone(), e))?;
    let mut r = Reader {
        path: p.clone(),
        bytes: &bytes,
        pos: 0,
    };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != WEIGHTS_MAGIC {
        return Err(NemfError::BadMagic {
            path: p,
            expected: WEIGHTS_MAGIC,
            found: magic,
        });
    }
    let version = r.u16("version")?;
    if version != WEIGHTS_VERSION {
        return Err(NemfError::BadVersion { path: p, found: version });
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config block")?)
        .map_err(|_| NemfError::Record {
            path: p.clone(),
            line: 0,
            reason: "config block is not UTF-8".into(),
        })?
        .to_string();
    let (field_cfg, embed_cfg) = parse_config_block(&p, &cfg_text)?;

    // materialize with the right shapes, then fill from the tensor table
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut field = FieldModel::<T>::init(field_cfg, &mut rng);
    let mut embed = EmbedderParams::<T>::init(embed_cfg, &mut rng)?;

    let count = r.u32("tensor count")? as usize;
    let mut loaded = std::collections::BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| NemfError::Record {
                path: p.clone(),
                line: 0,
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.take(1, "tensor rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("tensor dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = r.take(n * 4, &format!("tensor {name} payload"))?;
        let data: Vec<T> = payload
            .chunks_exact(4)
            .map(|c| T::from_f32_le(c.try_into().unwrap()))
            .collect();
        loaded.insert(name, (dims, data));
    }

    let mut field_names: Vec<String> = field.named().iter().map(|(n, _)| n.clone()).collect();
    let embed_names: Vec<String> = embed.named().iter().map(|(n, _)| n.to_string()).collect();
    field_names.extend(embed_names);

    let mut slots: Vec<&mut Tensor<T>> = field.tensors_mut();
    slots.extend(embed.tensors_mut());
    for (name, slot) in field_names.iter().zip(slots) {
        let (dims, data) = loaded.remove(name).ok_or_else(|| NemfError::MissingTensor {
            path: p.clone(),
            name: name.clone(),
        })?;
        if dims != slot.shape() {
            return Err(NemfError::TensorShape {
                name: name.clone(),
                expected: slot.shape().to_vec(),
                found: dims,
            });
        }
        slot.data_mut().copy_from_slice(&data);
    }
    Ok((field, embed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_field_cfg() -> FieldConfig {
        FieldConfig {
            encoder: EncoderConfig { frequencies: 3 },
            hidden: 16,
            blocks: 2,
            k_channels: 4,
        }
    }

    fn tiny_volume(seed: u64) -> (CostFeatureVolume<f64>, VolumeGeometry) {
        let grid = [4, 4, 4, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vol = CostFeatureVolume {
            grid,
            k_channels: 4,
            data: Tensor::uniform(&mut rng, &[4, 4, 4, 4, 4], -1.0, 1.0),
        };
        (vol, VolumeGeometry::new(grid, [32, 32, 32, 32]))
    }

    #[test]
    fn encode_zero_gives_alternating_zero_one() {
        let cfg = EncoderConfig { frequencies: 1 };
        let e = encode_scalar(0.0f64, &cfg);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn encode_one_at_l0_gives_sin_cos_pi() {
        let cfg = EncoderConfig { frequencies: 0 };
        let e = encode_scalar(1.0f64, &cfg);
        assert!(e[0].abs() < 1e-12); // sin(pi)
        assert!((e[1] + 1.0).abs() < 1e-12); // cos(pi)
    }

    #[test]
    fn encode_derivative_matches_finite_differences() {
        let cfg = EncoderConfig { frequencies: 6 };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        use rand::Rng;
        for _ in 0..100 {
            let t: f64 = rng.gen_range(-1.0..1.0);
            // analytic via the tape through a random weighted sum
            let w: Vec<f64> = (0..cfg.per_scalar()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = |x: &[f64]| -> f64 {
                encode_scalar(x[0], &cfg)
                    .iter()
                    .zip(&w)
                    .map(|(&e, &wv)| e * wv)
                    .sum()
            };
            let numeric = finite_diff(f, &[t], 1e-6)[0];
            let analytic: f64 = (0..=cfg.frequencies)
                .flat_map(|j| {
                    let omega = (1u64 << j) as f64 * std::f64::consts::PI;
                    let arg = t * omega;
                    [
                        (w[2 * j], arg.cos() * omega),
                        (w[2 * j + 1], -arg.sin() * omega),
                    ]
                })
                .map(|(wv, d)| wv * d)
                .sum();
            let err = max_rel_err(&[analytic], &[numeric], 1e-6);
            assert!(err < 1e-4, "t={t}: {err:.3e}");
        }
    }

    #[test]
    fn zeroed_output_layer_scores_half_everywhere() {
        let cfg = tiny_field_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = FieldModel::<f64>::init(cfg, &mut rng);
        model.w_out = Tensor::zeros(&[cfg.hidden, 1]).with_grad();
        model.b_out = Tensor::zeros(&[1]).with_grad();
        let (vol, geom) = tiny_volume(3);
        for p in [
            QueryPoint::new([0.0, 0.0], [0.0, 0.0]),
            QueryPoint::new([13.0, 4.5], [22.2, 8.8]),
        ] {
            let m = model.evaluate(&vol, &geom, p).unwrap();
            assert_eq!(m.0, 0.5);
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_in_open_interval() {
        let cfg = tiny_field_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = FieldModel::<f64>::init(cfg, &mut rng);
        let (vol, geom) = tiny_volume(5);
        let p = QueryPoint::new([10.0, 20.0], [5.0, 7.0]);
        let a = model.evaluate(&vol, &geom, p).unwrap();
        let b = model.evaluate(&vol, &geom, p).unwrap();
        assert_eq!(a.0, b.0);
        assert!(a.0 > 0.0 && a.0 < 1.0);
    }

    #[test]
    fn evaluate_rejects_channel_mismatch() {
        let cfg = tiny_field_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = FieldModel::<f64>::init(cfg, &mut rng);
        let grid = [4, 4, 4, 4];
        let vol = CostFeatureVolume {
            grid,
            k_channels: 8,
            data: Tensor::zeros(&[4, 4, 4, 4, 8]),
        };
        let geom = VolumeGeometry::new(grid, [32, 32, 32, 32]);
        assert!(model
            .evaluate(&vol, &geom, QueryPoint::new([0.0, 0.0], [0.0, 0.0]))
            .is_err());
    }

    #[test]
    fn batched_scores_equal_single_scores() {
        let cfg = tiny_field_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = FieldModel::<f64>::init(cfg, &mut rng);
        let (vol, geom) = tiny_volume(7);
        use rand::Rng;
        let queries: Vec<QueryPoint> = (0..23)
            .map(|_| {
                QueryPoint::new(
                    [rng.gen_range(0.0..31.0), rng.gen_range(0.0..31.0)],
                    [rng.gen_range(0.0..31.0), rng.gen_range(0.0..31.0)],
                )
            })
            .collect();
        let batched = model.score_batch(&vol, &geom, &queries, 7).unwrap();
        for (i, q) in queries.iter().enumerate() {
            let single = model.evaluate(&vol, &geom, *q).unwrap();
            assert!((batched[i] - single.0).abs() < 1e-6);
        }
    }

    #[test]
    fn score_gradient_wrt_target_matches_finite_differences() {
        let cfg = tiny_field_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = FieldModel::<f64>::init(cfg, &mut rng);
        let (vol, geom) = tiny_volume(9);
        use rand::Rng;
        for _ in 0..30 {
            // interior target coordinates away from interpolation cell edges
            let cell = |rng: &mut ChaCha8Rng| -> f64 {
                let c: f64 = rng.gen_range(0.0..3.0);
                let frac = 0.15 + 0.7 * (c - c.floor());
                (c.floor() + frac) * 31.0 / 3.0
            };
            let q = QueryPoint::new(
                [rng.gen_range(1.0..30.0), rng.gen_range(1.0..30.0)],
                [cell(&mut rng), cell(&mut rng)],
            );
            let (_, grads) = model
                .score_with_target_grad(&vol, &geom, &[q], 8)
                .unwrap();
            let f = |t: &[f64]| -> f64 {
                let q2 = QueryPoint::new(q.src, [t[0], t[1]]);
                -model.evaluate(&vol, &geom, q2).unwrap().0.ln()
            };
            let numeric = finite_diff(f, &q.tgt, 1e-5);
            let err = max_rel_err(&grads[0], &numeric, 1e-6);
            assert!(err < 1e-4, "q {q:?}: rel err {err:.3e}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let cfg = tiny_field_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = FieldModel::<f64>::init(cfg, &mut rng);
        let ecfg = EmbedderConfig {
            grid: [4, 4, 4, 4],
            k_channels: 4,
            conv_channels: 4,
            heads: 2,
            ffn_mult: 2,
        };
        let embed = EmbedderParams::<f64>::init(ecfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.nmfw");
        let p2 = dir.path().join("b.nmfw");
        save_model(&model, &embed, &p1).unwrap();
        let (m2, e2) = load_model::<f64>(&p1).unwrap();
        save_model(&m2, &e2, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        assert!(p1.with_extension("nmfw.txt").exists() || {
            // sidecar is `<path>.txt`
            std::path::Path::new(&format!("{}.txt", p1.display())).exists()
        });
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let cfg = tiny_field_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = FieldModel::<f64>::init(cfg, &mut rng);
        let ecfg = EmbedderConfig {
            grid: [4, 4, 4, 4],
            k_channels: 4,
            conv_channels: 4,
            heads: 2,
            ffn_mult: 2,
        };
        let embed = EmbedderParams::<f64>::init(ecfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.nmfw");
        save_model(&model, &embed, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(
            load_model::<f64>(&path).unwrap_err(),
            NemfError::Truncated { .. }
        ));
    }

    #[test]
    fn config_tamper_names_the_mismatched_tensor() {
        let cfg = tiny_field_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = FieldModel::<f64>::init(cfg, &mut rng);
        let ecfg = EmbedderConfig {
            grid: [4, 4, 4, 4],
            k_channels: 4,
            conv_channels: 4,
            heads: 2,
            ffn_mult: 2,
        };
        let embed = EmbedderParams::<f64>::init(ecfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tampered.nmfw");
        save_model(&model, &embed, &path).unwrap();

        // rewrite the config block with a different L; tensors stay as saved
        let bytes = std::fs::read(&path).unwrap();
        let cfg_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let cfg_text = std::str::from_utf8(&bytes[10..10 + cfg_len]).unwrap();
        let new_cfg = cfg_text.replace("l=3", "l=5");
        let mut out = bytes[..6].to_vec();
        out.extend_from_slice(&(new_cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(new_cfg.as_bytes());
        out.extend_from_slice(&bytes[10 + cfg_len..]);
        std::fs::write(&path, out).unwrap();

        match load_model::<f64>(&path).unwrap_err() {
            NemfError::TensorShape { name, .. } => {
                assert_eq!(name, "field.input.weight");
            }
            other => panic!("unexpected error {other}"),
        }
    }
}

//! Dense correspondence extraction from a trained field.
//!
//! Three strategies, sharing one batched evaluator:
//! - the exhaustive oracle scores every lattice target per source pixel and
//!   is guarded against infeasible geometry,
//! - PatchMatch rounds propagate neighbor flows plus uniform random probes
//!   with a synchronous (Jacobi) update: every pixel reads the previous
//!   round's flow and writes its own slot, so rounds are order-free and
//!   deterministic for a fixed seed,
//! - coordinate optimization runs guarded gradient descent on each target
//!   coordinate, reverting any pixel whose final score dropped.
//!
//! Per-pixel best scores are therefore non-decreasing across rounds: the
//! argmax set always contains the incumbent and descent cannot lose score.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cost_embed::{pool, CostFeatureVolume, VolumeGeometry};
use crate::error::{NemfError, NemfResult};
use crate::field_model::{FieldModel, QueryPoint};
use crate::flow::FlowField;
use crate::tensor::Scalar;

/// Refusal threshold for exhaustive evaluation, in field evaluations.
pub const EVALUATION_GUARD: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Neighborhood {
    Four,
    Eight,
}

impl Neighborhood {
    fn offsets(&self) -> &'static [(isize, isize)] {
        match self {
            Neighborhood::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Neighborhood::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferenceConfig {
    /// Alternation rounds N.
    pub iterations: usize,
    /// Step size of the coordinate descent.
    pub step_size: f64,
    /// Gradient steps per pixel per round.
    pub inner_steps: usize,
    /// Uniform random candidates per pixel per round (R).
    pub rand_candidates: usize,
    pub neighborhood: Neighborhood,
    /// Evaluation batch size B; affects memory and runtime, never results.
    pub batch_size: usize,
    /// When set, coordinate optimization touches only the listed pixels.
    pub keypoints_only: bool,
    pub seed: u64,
    /// Lattice the random probes and the exhaustive oracle enumerate;
    /// defaults to the full target image resolution.
    pub target_lattice: Option<(usize, usize)>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            iterations: 10,
            step_size: 3e-4,
            inner_steps: 10,
            rand_candidates: 4,
            neighborhood: Neighborhood::Eight,
            batch_size: 2048,
            keypoints_only: false,
            seed: 0,
            target_lattice: None,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> NemfResult<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.step_size < 0.0 {
            return Err(NemfError::Config(
                "inference needs iterations >= 1, batch_size >= 1, step_size >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Read-only bundle of everything needed to score queries.
pub struct FieldEvaluator<'a, T: Scalar> {
    pub model: &'a FieldModel<T>,
    pub vol: &'a CostFeatureVolume<T>,
    pub geom: VolumeGeometry,
}

impl<'a, T: Scalar> FieldEvaluator<'a, T> {
    pub fn new(
        model: &'a FieldModel<T>,
        vol: &'a CostFeatureVolume<T>,
        geom: VolumeGeometry,
    ) -> NemfResult<Self> {
        if vol.k_channels != model.cfg.k_channels || vol.grid != geom.grid {
            return Err(NemfError::ShapeMismatch {
                op: "evaluator",
                lhs: vol.grid.to_vec(),
                rhs: geom.grid.to_vec(),
            });
        }
        Ok(FieldEvaluator { model, vol, geom })
    }

    pub fn scores(&self, queries: &[QueryPoint], batch: usize) -> NemfResult<Vec<T>> {
        self.model.score_batch(self.vol, &self.geom, queries, batch)
    }

    pub fn scores_with_grad(
        &self,
        queries: &[QueryPoint],
        batch: usize,
    ) -> NemfResult<(Vec<T>, Vec<[T; 2]>)> {
        self.model
            .score_with_target_grad(self.vol, &self.geom, queries, batch)
    }

    /// Target image bounds as the inclusive clamp range.
    fn tgt_max(&self) -> [f64; 2] {
        [
            (self.geom.image[2] - 1) as f64,
            (self.geom.image[3] - 1) as f64,
        ]
    }

    /// (rows, cols) of the candidate lattice for random probes / exhaustion.
    fn lattice(&self, cfg: &InferenceConfig) -> (usize, usize) {
        cfg.target_lattice
            .unwrap_or((self.geom.image[2], self.geom.image[3]))
    }

    fn lattice_coord(&self, lattice: (usize, usize), r: usize, c: usize) -> [f64; 2] {
        let map = |i: usize, n: usize, extent: usize| -> f64 {
            if n <= 1 {
                0.0
            } else {
                i as f64 * (extent - 1) as f64 / (n - 1) as f64
            }
        };
        [
            map(r, lattice.0, self.geom.image[2]),
            map(c, lattice.1, self.geom.image[3]),
        ]
    }

    /// Current field score of every lattice pixel of a flow.
    pub fn flow_scores(&self, flow: &FlowField<T>, batch: usize) -> NemfResult<Vec<T>> {
        let queries: Vec<QueryPoint> = (0..flow.rows * flow.cols)
            .map(|i| {
                let (r, c) = (i / flow.cols, i % flow.cols);
                QueryPoint::new(flow.src_coord(r, c), flow.target_of(r, c))
            })
            .collect();
        self.scores(&queries, batch)
    }
}

/// Hard argmax of the pooled volume per source cell, mapped to image
/// coordinates; ties break toward the lowest row-major target index. The
/// result is resampled (nearest) onto the requested flow lattice.
pub fn initialize_flow<T: Scalar>(
    eval: &FieldEvaluator<'_, T>,
    rows: usize,
    cols: usize,
) -> FlowField<T> {
    let pooled = pool(eval.vol);
    let [hs, ws, ht, wt] = eval.geom.grid;
    let slice_len = ht * wt;
    // per source cell: displacement of its best target, in image coords
    let mut cell_flow = vec![[0.0f64; 2]; hs * ws];
    for cell in 0..hs * ws {
        let slice = &pooled.data.data()[cell * slice_len..(cell + 1) * slice_len];
        let mut best = 0usize;
        for (j, &v) in slice.iter().enumerate() {
            if v > slice[best] {
                best = j;
            }
        }
        let (tr, tc) = (best / wt, best % wt);
        let tgt = [
            eval.geom.to_image(2, tr as f64),
            eval.geom.to_image(3, tc as f64),
        ];
        let src = [
            eval.geom.to_image(0, (cell / ws) as f64),
            eval.geom.to_image(1, (cell % ws) as f64),
        ];
        cell_flow[cell] = [tgt[0] - src[0], tgt[1] - src[1]];
    }

    let mut flow = FlowField::zeros(
        rows,
        cols,
        (eval.geom.image[0], eval.geom.image[1]),
        (eval.geom.image[2], eval.geom.image[3]),
    );
    let tgt_max = eval.tgt_max();
    for r in 0..rows {
        for c in 0..cols {
            let src = flow.src_coord(r, c);
            let to_cell = |p: f64, axis: usize| -> usize {
                let scale = eval.geom.to_grid_scale(axis);
                ((p * scale).round().max(0.0) as usize).min(eval.geom.grid[axis] - 1)
            };
            let cell = to_cell(src[0], 0) * ws + to_cell(src[1], 1);
            let f = cell_flow[cell];
            let ty = (src[0] + f[0]).clamp(0.0, tgt_max[0]);
            let tx = (src[1] + f[1]).clamp(0.0, tgt_max[1]);
            flow.set(r, c, [T::of(ty - src[0]), T::of(tx - src[1])]);
        }
    }
    flow.provenance = "init:pooled-argmax".into();
    flow
}

/// One synchronous PatchMatch round (Eq.-style argmax over the candidate
/// set). Candidates per pixel: its own current match, every neighbor's flow
/// applied at this pixel, and R uniform lattice probes. All pixels read the
/// incoming flow and write a fresh one.
pub fn patchmatch_round<T: Scalar>(
    eval: &FieldEvaluator<'_, T>,
    flow: &FlowField<T>,
    cfg: &InferenceConfig,
    rng: &mut ChaCha8Rng,
) -> NemfResult<FlowField<T>> {
    let (rows, cols) = (flow.rows, flow.cols);
    let lattice = eval.lattice(cfg);
    let tgt_max = eval.tgt_max();
    let offsets = cfg.neighborhood.offsets();

    // random probes drawn in row-major pixel order so scheduling never
    // affects the stream
    let mut queries: Vec<QueryPoint> = Vec::new();
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(rows * cols);
    let mut candidates: Vec<[f64; 2]> = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let src = flow.src_coord(r, c);
            let start = candidates.len();
            let clamp_push = |candidates: &mut Vec<[f64; 2]>, t: [f64; 2]| {
                candidates.push([t[0].clamp(0.0, tgt_max[0]), t[1].clamp(0.0, tgt_max[1])]);
            };
            // self-propagation first: the incumbent is always in the set
            clamp_push(&mut candidates, flow.target_of(r, c));
            for (dr, dc) in offsets {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nr >= rows as isize || nc < 0 || nc >= cols as isize {
                    continue;
                }
                let nf = flow.get(nr as usize, nc as usize);
                clamp_push(
                    &mut candidates,
                    [src[0] + nf[0].to_f64(), src[1] + nf[1].to_f64()],
                );
            }
            for _ in 0..cfg.rand_candidates {
                let lr = rng.gen_range(0..lattice.0);
                let lc = rng.gen_range(0..lattice.1);
                clamp_push(&mut candidates, eval.lattice_coord(lattice, lr, lc));
            }
            spans.push((start, candidates.len()));
            for t in &candidates[start..] {
                queries.push(QueryPoint::new(src, *t));
            }
        }
    }

    let scores = eval.scores(&queries, cfg.batch_size)?;

    let mut next = flow.clone();
    for (pix, &(start, end)) in spans.iter().enumerate() {
        let (r, c) = (pix / cols, pix % cols);
        let mut best = start;
        for i in start + 1..end {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        let src = flow.src_coord(r, c);
        let t = candidates[best];
        next.set(r, c, [T::of(t[0] - src[0]), T::of(t[1] - src[1])]);
    }
    next.provenance = "patchmatch".into();
    Ok(next)
}

/// Guarded gradient descent on the target coordinates of the selected flow
/// pixels (all pixels when `pixels` is `None`). Each pixel descends
/// -log M([x, y]) in y for `inner_steps` steps of size `step_size`; the final
/// position is kept only if its score did not drop below the incumbent's.
pub fn coordinate_optimize<T: Scalar>(
    eval: &FieldEvaluator<'_, T>,
    flow: &FlowField<T>,
    pixels: Option<&[(usize, usize)]>,
    cfg: &InferenceConfig,
) -> NemfResult<FlowField<T>> {
    let all: Vec<(usize, usize)>;
    let selected: &[(usize, usize)] = match pixels {
        Some(p) => p,
        None => {
            all = (0..flow.rows * flow.cols)
                .map(|i| (i / flow.cols, i % flow.cols))
                .collect();
            &all
        }
    };
    let sources: Vec<[f64; 2]> = selected
        .iter()
        .map(|&(r, c)| flow.src_coord(r, c))
        .collect();
    let init: Vec<[f64; 2]> = selected
        .iter()
        .map(|&(r, c)| flow.target_of(r, c))
        .collect();

    let finals = optimize_targets(eval, &sources, &init, cfg)?;

    let mut next = flow.clone();
    for (i, &(r, c)) in selected.iter().enumerate() {
        let src = sources[i];
        next.set(
            r,
            c,
            [T::of(finals[i][0] - src[0]), T::of(finals[i][1] - src[1])],
        );
    }
    next.provenance = "coordinate-opt".into();
    Ok(next)
}

/// Core of the coordinate optimization: descend each target independently,
/// then keep the better of {initial, final} per query.
pub fn optimize_targets<T: Scalar>(
    eval: &FieldEvaluator<'_, T>,
    sources: &[[f64; 2]],
    init_targets: &[[f64; 2]],
    cfg: &InferenceConfig,
) -> NemfResult<Vec<[f64; 2]>> {
    let tgt_max = eval.tgt_max();
    let make_queries = |targets: &[[f64; 2]]| -> Vec<QueryPoint> {
        sources
            .iter()
            .zip(targets)
            .map(|(&s, &t)| QueryPoint::new(s, t))
            .collect()
    };
    let s0 = eval.scores(&make_queries(init_targets), cfg.batch_size)?;

    let mut targets = init_targets.to_vec();
    let alpha = cfg.step_size;
    if alpha > 0.0 {
        for _ in 0..cfg.inner_steps {
            let (_, grads) = eval.scores_with_grad(&make_queries(&targets), cfg.batch_size)?;
            for (t, g) in targets.iter_mut().zip(&grads) {
                t[0] = (t[0] - alpha * g[0].to_f64()).clamp(0.0, tgt_max[0]);
                t[1] = (t[1] - alpha * g[1].to_f64()).clamp(0.0, tgt_max[1]);
            }
        }
    }

    let s1 = eval.scores(&make_queries(&targets), cfg.batch_size)?;
    for i in 0..targets.len() {
        if s1[i] < s0[i] {
            targets[i] = init_targets[i];
        }
    }
    Ok(targets)
}

/// Full alternation: pooled-argmax initialization, then N rounds of
/// (PatchMatch round; coordinate optimization). With `keypoints_only`,
/// coordinate optimization touches only `keypoint_pixels`.
pub fn infer_dense<T: Scalar>(
    eval: &FieldEvaluator<'_, T>,
    rows: usize,
    cols: usize,
    cfg: &InferenceConfig,
    keypoint_pixels: Option<&[(usize, usize)]>,
) -> NemfResult<FlowField<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    use rand::SeedableRng;
    let mut flow = initialize_flow(eval, rows, cols);
    for _ in 0..cfg.iterations {
        flow = patchmatch_round(eval, &flow, cfg, &mut rng)?;
        let pixels = if cfg.keypoints_only {
            keypoint_pixels
        } else {
            None
        };
        if !cfg.keypoints_only || keypoint_pixels.is_some() {
            flow = coordinate_optimize(eval, &flow, pixels, cfg)?;
        }
    }
    flow.provenance = format!(
        "patchmatch+coordopt N={} R={} seed={}",
        cfg.iterations, cfg.rand_candidates, cfg.seed
    );
    Ok(flow)
}

/// True argmax of the field over every lattice target per source pixel.
/// Refuses geometries whose evaluation count exceeds [`EVALUATION_GUARD`].
pub fn infer_exhaustive<T: Scalar>(
    eval: &FieldEvaluator<'_, T>,
    rows: usize,
    cols: usize,
    cfg: &InferenceConfig,
) -> NemfResult<FlowField<T>> {
    let lattice = eval.lattice(cfg);
    let evaluations = (rows * cols) as u64 * (lattice.0 * lattice.1) as u64;
    if evaluations > EVALUATION_GUARD {
        return Err(NemfError::EvaluationGuard {
            evaluations,
            limit: EVALUATION_GUARD,
        });
    }
    let mut flow = FlowField::zeros(
        rows,
        cols,
        (eval.geom.image[0], eval.geom.image[1]),
        (eval.geom.image[2], eval.geom.image[3]),
    );
    let per_pixel = lattice.0 * lattice.1;
    let mut queries = Vec::with_capacity(per_pixel);
    for r in 0..rows {
        for c in 0..cols {
            let src = flow.src_coord(r, c);
            queries.clear();
            for lr in 0..lattice.0 {
                for lc in 0..lattice.1 {
                    queries.push(QueryPoint::new(src, eval.lattice_coord(lattice, lr, lc)));
                }
            }
            let scores = eval.scores(&queries, cfg.batch_size)?;
            let mut best = 0usize;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = i;
                }
            }
            let t = eval.lattice_coord(lattice, best / lattice.1, best % lattice.1);
            flow.set(r, c, [T::of(t[0] - src[0]), T::of(t[1] - src[1])]);
        }
    }
    flow.provenance = "exhaustive".into();
    Ok(flow)
}

/// Predict target keypoints for continuous source keypoints: seed each from
/// the nearest flow pixel, then optionally refine with coordinate descent.
pub fn transfer_keypoints<T: Scalar>(
    eval: &FieldEvaluator<'_, T>,
    flow: &FlowField<T>,
    keypoints_rc: &[[f64; 2]],
    refine: bool,
    cfg: &InferenceConfig,
) -> NemfResult<Vec<[f64; 2]>> {
    let tgt_max = eval.tgt_max();
    let init: Vec<[f64; 2]> = keypoints_rc
        .iter()
        .map(|&kp| {
            let (r, c) = flow.nearest_pixel(kp);
            let f = flow.get(r, c);
            [
                (kp[0] + f[0].to_f64()).clamp(0.0, tgt_max[0]),
                (kp[1] + f[1].to_f64()).clamp(0.0, tgt_max[1]),
            ]
        })
        .collect();
    if !refine {
        return Ok(init);
    }
    optimize_targets(eval, keypoints_rc, &init, cfg)
}

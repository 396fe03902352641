//! Hot numeric kernels shared by the tape operations.
//!
//! Every kernel computes each output element through a fixed sequential
//! accumulation order that depends only on that element's own index, so
//! results are bitwise identical regardless of thread count or how a batch
//! is chunked.

use rayon::prelude::*;

use super::Scalar;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_MIN_WORK: usize = 1 << 15;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [T]| {
        out_row.fill(T::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN_WORK {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
}

/// C[m,k] = A[m,n] * B[k,n]^T
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    let row = |i: usize, out_row: &mut [T]| {
        let a_row = &a[i * n..(i + 1) * n];
        for (kk, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if m * n * k >= PAR_MIN_WORK {
        out.par_chunks_mut(k).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(k).enumerate() {
            row(i, r);
        }
    }
}

/// C[k,n] = A[m,k]^T * B[m,n]
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let row = |kk: usize, out_row: &mut [T]| {
        out_row.fill(T::zero());
        for i in 0..m {
            let a_ik = a[i * k + kk];
            let b_row = &b[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN_WORK {
        out.par_chunks_mut(n).enumerate().for_each(|(kk, r)| row(kk, r));
    } else {
        for (kk, r) in out.chunks_mut(n).enumerate() {
            row(kk, r);
        }
    }
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// 3x3 convolution over one 2D factor of a rank-5 volume laid out as
/// [d0, d1, d2, d3, channels] with channels innermost. `axes` selects the
/// convolved plane — (0, 1) or (2, 3) — and the other pair acts as batch.
/// Zero padding, stride 1, output extents match the input.
#[derive(Clone, Copy, Debug)]
pub struct PlaneGeom {
    pub dims: [usize; 4],
    pub axes: (usize, usize),
}

impl PlaneGeom {
    pub fn cells(&self) -> usize {
        self.dims.iter().product()
    }

    /// Channel-unit strides of the four spatial axes.
    fn strides(&self) -> [usize; 4] {
        let d = self.dims;
        [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1]
    }

    /// Plane coordinates, plane extents and plane strides for a flat cell.
    fn plane_at(&self, cell: usize) -> (isize, isize) {
        let d = self.dims;
        let c3 = cell % d[3];
        let c2 = (cell / d[3]) % d[2];
        let c1 = (cell / (d[3] * d[2])) % d[1];
        let c0 = cell / (d[3] * d[2] * d[1]);
        let coords = [c0, c1, c2, c3];
        (coords[self.axes.0] as isize, coords[self.axes.1] as isize)
    }

    fn plane_dims(&self) -> (isize, isize) {
        (
            self.dims[self.axes.0] as isize,
            self.dims[self.axes.1] as isize,
        )
    }

    fn plane_strides(&self) -> (isize, isize) {
        let s = self.strides();
        (s[self.axes.0] as isize, s[self.axes.1] as isize)
    }
}

/// out[cell, co] = bias[co] + sum_{dr,dc,ci} k[dr,dc,ci,co] * in[cell + (dr-1,dc-1), ci]
///
/// `kernel` is laid out [3, 3, cin, cout].
pub fn conv_plane_fwd<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bias: &[T],
    geom: PlaneGeom,
    cin: usize,
    cout: usize,
    out: &mut [T],
) {
    debug_assert_eq!(input.len(), geom.cells() * cin);
    debug_assert_eq!(kernel.len(), 9 * cin * cout);
    debug_assert_eq!(bias.len(), cout);
    debug_assert_eq!(out.len(), geom.cells() * cout);
    let (p0, p1) = geom.plane_dims();
    let (s0, s1) = geom.plane_strides();
    let cell_work = |cell: usize, acc: &mut [T]| {
        acc.copy_from_slice(bias);
        let (q0, q1) = geom.plane_at(cell);
        for dr in 0..3isize {
            let r = q0 + dr - 1;
            if r < 0 || r >= p0 {
                continue;
            }
            for dc in 0..3isize {
                let c = q1 + dc - 1;
                if c < 0 || c >= p1 {
                    continue;
                }
                let src = (cell as isize + (dr - 1) * s0 + (dc - 1) * s1) as usize;
                let in_cell = &input[src * cin..src * cin + cin];
                let ktap = &kernel[((dr * 3 + dc) as usize) * cin * cout..];
                for (ci, &iv) in in_cell.iter().enumerate() {
                    let krow = &ktap[ci * cout..ci * cout + cout];
                    for (o, &kv) in acc.iter_mut().zip(krow) {
                        *o += iv * kv;
                    }
                }
            }
        }
    };
    if geom.cells() * 9 * cin * cout >= PAR_MIN_WORK {
        out.par_chunks_mut(cout)
            .enumerate()
            .for_each(|(cell, acc)| cell_work(cell, acc));
    } else {
        for (cell, acc) in out.chunks_mut(cout).enumerate() {
            cell_work(cell, acc);
        }
    }
}

/// Gradient w.r.t. the convolution input (correlation with the kernel).
pub fn conv_plane_grad_input<T: Scalar>(
    grad_out: &[T],
    kernel: &[T],
    geom: PlaneGeom,
    cin: usize,
    cout: usize,
    grad_in: &mut [T],
) {
    debug_assert_eq!(grad_in.len(), geom.cells() * cin);
    let (p0, p1) = geom.plane_dims();
    let (s0, s1) = geom.plane_strides();
    let cell_work = |cell: usize, acc: &mut [T]| {
        acc.fill(T::zero());
        let (q0, q1) = geom.plane_at(cell);
        // Output cell (q0 - (dr-1), q1 - (dc-1)) reads this input cell via tap (dr, dc).
        for dr in 0..3isize {
            let r = q0 - (dr - 1);
            if r < 0 || r >= p0 {
                continue;
            }
            for dc in 0..3isize {
                let c = q1 - (dc - 1);
                if c < 0 || c >= p1 {
                    continue;
                }
                let dst = (cell as isize - (dr - 1) * s0 - (dc - 1) * s1) as usize;
                let g_cell = &grad_out[dst * cout..dst * cout + cout];
                let ktap = &kernel[((dr * 3 + dc) as usize) * cin * cout..];
                for (ci, o) in acc.iter_mut().enumerate() {
                    let krow = &ktap[ci * cout..ci * cout + cout];
                    let mut s = T::zero();
                    for (&gv, &kv) in g_cell.iter().zip(krow) {
                        s += gv * kv;
                    }
                    *o += s;
                }
            }
        }
    };
    if geom.cells() * 9 * cin * cout >= PAR_MIN_WORK {
        grad_in
            .par_chunks_mut(cin)
            .enumerate()
            .for_each(|(cell, acc)| cell_work(cell, acc));
    } else {
        for (cell, acc) in grad_in.chunks_mut(cin).enumerate() {
            cell_work(cell, acc);
        }
    }
}

/// Gradients w.r.t. kernel and bias. Each (tap, ci) kernel slice accumulates
/// over all cells sequentially; parallelism is across slices.
pub fn conv_plane_grad_params<T: Scalar>(
    input: &[T],
    grad_out: &[T],
    geom: PlaneGeom,
    cin: usize,
    cout: usize,
    grad_kernel: &mut [T],
    grad_bias: &mut [T],
) {
    debug_assert_eq!(grad_kernel.len(), 9 * cin * cout);
    debug_assert_eq!(grad_bias.len(), cout);
    let (p0, p1) = geom.plane_dims();
    let (s0, s1) = geom.plane_strides();
    let slice_work = |slice: usize, acc: &mut [T]| {
        acc.fill(T::zero());
        let tap = slice / cin;
        let ci = slice % cin;
        let (dr, dc) = ((tap / 3) as isize, (tap % 3) as isize);
        for cell in 0..geom.cells() {
            let (q0, q1) = geom.plane_at(cell);
            let r = q0 + dr - 1;
            let c = q1 + dc - 1;
            if r < 0 || r >= p0 || c < 0 || c >= p1 {
                continue;
            }
            let src = (cell as isize + (dr - 1) * s0 + (dc - 1) * s1) as usize;
            let iv = input[src * cin + ci];
            let g_cell = &grad_out[cell * cout..cell * cout + cout];
            for (o, &gv) in acc.iter_mut().zip(g_cell) {
                *o += iv * gv;
            }
        }
    };
    if geom.cells() * 9 * cin * cout >= PAR_MIN_WORK {
        grad_kernel
            .par_chunks_mut(cout)
            .enumerate()
            .for_each(|(slice, acc)| slice_work(slice, acc));
    } else {
        for (slice, acc) in grad_kernel.chunks_mut(cout).enumerate() {
            slice_work(slice, acc);
        }
    }
    grad_bias.fill(T::zero());
    for cell in 0..geom.cells() {
        let g_cell = &grad_out[cell * cout..cell * cout + cout];
        for (o, &gv) in grad_bias.iter_mut().zip(g_cell) {
            *o += gv;
        }
    }
}

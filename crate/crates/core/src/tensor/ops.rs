//! Structured tensor operations: affine maps, convolution, pooling, losses,
//! and the reverse rules for all of them.
//!
//! Reductions accumulate in f64 with a fixed traversal order. Parallel
//! sections split work so that each output element is produced by exactly
//! one task with a deterministic inner order, keeping results bit-identical
//! for any thread count.

use super::{NodeId, Op, Scalar, Tape};
use crate::error::{GhostError, Result};
use rayon::prelude::*;
use std::sync::Arc;

/// Below this many output elements an op stays single-threaded; the spawn
/// overhead would dominate.
const PAR_MIN: usize = 4096;

impl<T: Scalar> Tape<T> {
    // ── dense (affine map) ──────────────────────────────────────────

    /// weight [m, n] · input [n] + bias [m], or row-wise for input [batch, n].
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let wshape = &self.nodes[weight.0].shape;
        if wshape.len() != 2 {
            return Err(GhostError::ShapeMismatch {
                op: "dense",
                axis: "rank",
                expected: 2,
                got: wshape.len(),
            });
        }
        let (m, n) = (wshape[0], wshape[1]);
        let ishape = &self.nodes[input.0].shape;
        let (batch, in_features, batched) = match ishape.len() {
            1 => (1, ishape[0], false),
            2 => (ishape[0], ishape[1], true),
            r => {
                return Err(GhostError::ShapeMismatch {
                    op: "dense",
                    axis: "rank",
                    expected: 2,
                    got: r,
                })
            }
        };
        if in_features != n {
            return Err(GhostError::ShapeMismatch {
                op: "dense",
                axis: "features",
                expected: n,
                got: in_features,
            });
        }
        if self.nodes[bias.0].values.len() != m {
            return Err(GhostError::ShapeMismatch {
                op: "dense",
                axis: "bias",
                expected: m,
                got: self.nodes[bias.0].values.len(),
            });
        }

        let x = &self.nodes[input.0].values;
        let w = &self.nodes[weight.0].values;
        let b = &self.nodes[bias.0].values;
        let mut out = vec![T::from_f64(0.0); batch * m];
        let run_rows = |rows: &mut [T], xr: &[T]| {
            for (j, slot) in rows.iter_mut().enumerate() {
                let wrow = &w[j * n..(j + 1) * n];
                let mut acc = b[j].to_f64();
                for i in 0..n {
                    acc += wrow[i].to_f64() * xr[i].to_f64();
                }
                *slot = T::from_f64(acc);
            }
        };
        if batch * m >= PAR_MIN && batch > 1 {
            out.par_chunks_mut(m)
                .zip(x.par_chunks(n))
                .for_each(|(rows, xr)| run_rows(rows, xr));
        } else {
            for (rows, xr) in out.chunks_mut(m).zip(x.chunks(n)) {
                run_rows(rows, xr);
            }
        }
        let shape = if batched { vec![batch, m] } else { vec![m] };
        Ok(self.push(shape, out, Op::Dense { input, weight, bias }))
    }

    /// matrix [rows, cols] · input, with the matrix held outside the tape
    /// (no gradient flows into it). Input is [cols] or [batch, cols].
    pub fn matmul_const(
        &mut self,
        input: NodeId,
        matrix: Arc<Vec<f64>>,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        if matrix.len() != rows * cols {
            return Err(GhostError::ShapeMismatch {
                op: "matmul_const",
                axis: "elements",
                expected: rows * cols,
                got: matrix.len(),
            });
        }
        let ishape = &self.nodes[input.0].shape;
        let (batch, in_features, batched) = match ishape.len() {
            1 => (1, ishape[0], false),
            2 => (ishape[0], ishape[1], true),
            r => {
                return Err(GhostError::ShapeMismatch {
                    op: "matmul_const",
                    axis: "rank",
                    expected: 2,
                    got: r,
                })
            }
        };
        if in_features != cols {
            return Err(GhostError::ShapeMismatch {
                op: "matmul_const",
                axis: "features",
                expected: cols,
                got: in_features,
            });
        }
        let x = &self.nodes[input.0].values;
        let mut out = vec![T::from_f64(0.0); batch * rows];
        for (orow, xr) in out.chunks_mut(rows).zip(x.chunks(cols)) {
            let fill = |j_slot: (usize, &mut T)| {
                let (j, slot) = j_slot;
                let mrow = &matrix[j * cols..(j + 1) * cols];
                let mut acc = 0.0f64;
                for i in 0..cols {
                    acc += mrow[i] * xr[i].to_f64();
                }
                *slot = T::from_f64(acc);
            };
            if rows * cols >= PAR_MIN * 16 {
                orow.par_iter_mut().enumerate().for_each(fill);
            } else {
                orow.iter_mut().enumerate().for_each(fill);
            }
        }
        let shape = if batched { vec![batch, rows] } else { vec![rows] };
        Ok(self.push(
            shape,
            out,
            Op::MatMulConst {
                input,
                matrix,
                rows,
                cols,
            },
        ))
    }

    // ── convolution ─────────────────────────────────────────────────

    /// 2D convolution, stride 1, zero padding (k-1)/2 so spatial size is
    /// preserved. input [c_in, h, w], kernel [c_out, c_in, k, k], bias [c_out].
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let ishape = self.nodes[input.0].shape.clone();
        let kshape = self.nodes[kernel.0].shape.clone();
        if ishape.len() != 3 {
            return Err(GhostError::ShapeMismatch {
                op: "conv2d",
                axis: "rank",
                expected: 3,
                got: ishape.len(),
            });
        }
        if kshape.len() != 4 {
            return Err(GhostError::ShapeMismatch {
                op: "conv2d",
                axis: "rank",
                expected: 4,
                got: kshape.len(),
            });
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, kc_in, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc_in != c_in {
            return Err(GhostError::ShapeMismatch {
                op: "conv2d",
                axis: "in_channels",
                expected: c_in,
                got: kc_in,
            });
        }
        if kh != kw {
            return Err(GhostError::ShapeMismatch {
                op: "conv2d",
                axis: "kernel",
                expected: kh,
                got: kw,
            });
        }
        if kh % 2 == 0 {
            return Err(GhostError::invalid(format!(
                "conv2d kernel size must be odd, got {kh}"
            )));
        }
        if self.nodes[bias.0].values.len() != c_out {
            return Err(GhostError::ShapeMismatch {
                op: "conv2d",
                axis: "bias",
                expected: c_out,
                got: self.nodes[bias.0].values.len(),
            });
        }
        let pad = (kh - 1) / 2;
        let x = &self.nodes[input.0].values;
        let kv = &self.nodes[kernel.0].values;
        let bv = &self.nodes[bias.0].values;

        let mut out = vec![T::from_f64(0.0); c_out * h * w];
        let plane = h * w;
        let conv_channel = |co: usize, out_plane: &mut [T]| {
            let mut acc = vec![bv[co].to_f64(); plane];
            for ci in 0..c_in {
                let xin = &x[ci * plane..(ci + 1) * plane];
                let kbase = (co * c_in + ci) * kh * kw;
                for ky in 0..kh {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..kw {
                        let dx = kx as isize - pad as isize;
                        let wv = kv[kbase + ky * kw + kx].to_f64();
                        accumulate_shifted(&mut acc, xin, wv, h, w, dy, dx);
                    }
                }
            }
            for (o, a) in out_plane.iter_mut().zip(acc.iter()) {
                *o = T::from_f64(*a);
            }
        };
        if c_out * plane >= PAR_MIN && c_out > 1 {
            out.par_chunks_mut(plane)
                .enumerate()
                .for_each(|(co, out_plane)| conv_channel(co, out_plane));
        } else {
            for (co, out_plane) in out.chunks_mut(plane).enumerate() {
                conv_channel(co, out_plane);
            }
        }
        Ok(self.push(
            vec![c_out, h, w],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                pad,
            },
        ))
    }

    // ── pooling / resampling / concat ───────────────────────────────

    /// 2x2 max pooling, stride 2. Odd spatial dims are handled by
    /// replicating the last row/column; gradient goes to the first maximal
    /// element in row-major order.
    pub fn maxpool2x2(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = self.nodes[input.0].shape.clone();
        if ishape.len() != 3 {
            return Err(GhostError::ShapeMismatch {
                op: "maxpool2x2",
                axis: "rank",
                expected: 3,
                got: ishape.len(),
            });
        }
        let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let x = &self.nodes[input.0].values;
        let mut out = vec![T::from_f64(0.0); c * oh * ow];
        let mut argmax = vec![0u32; c * oh * ow];
        for ci in 0..c {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for sy in 0..2 {
                        let y = (2 * oy + sy).min(h - 1);
                        for sx in 0..2 {
                            let xcol = (2 * ox + sx).min(w - 1);
                            let idx = y * w + xcol;
                            let v = xin[idx].to_f64();
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ci * oh + oy) * ow + ox;
                    out[o] = T::from_f64(best);
                    argmax[o] = best_idx as u32;
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], out, Op::MaxPool2x2 { input, argmax }))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2x(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = self.nodes[input.0].shape.clone();
        if ishape.len() != 3 {
            return Err(GhostError::ShapeMismatch {
                op: "upsample_nearest2x",
                axis: "rank",
                expected: 3,
                got: ishape.len(),
            });
        }
        let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
        let x = &self.nodes[input.0].values;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::from_f64(0.0); c * oh * ow];
        for ci in 0..c {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            let oplane = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
            for y in 0..oh {
                let sy = y / 2;
                for xcol in 0..ow {
                    oplane[y * ow + xcol] = xin[sy * w + xcol / 2];
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], out, Op::UpsampleNearest2x(input)))
    }

    /// Keep the top-left [c, h, w] region of a [c, H, W] tensor.
    pub fn crop_spatial(&mut self, input: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let ishape = self.nodes[input.0].shape.clone();
        if ishape.len() != 3 {
            return Err(GhostError::ShapeMismatch {
                op: "crop_spatial",
                axis: "rank",
                expected: 3,
                got: ishape.len(),
            });
        }
        let (c, ih, iw) = (ishape[0], ishape[1], ishape[2]);
        if h > ih {
            return Err(GhostError::ShapeMismatch {
                op: "crop_spatial",
                axis: "height",
                expected: ih,
                got: h,
            });
        }
        if w > iw {
            return Err(GhostError::ShapeMismatch {
                op: "crop_spatial",
                axis: "width",
                expected: iw,
                got: w,
            });
        }
        let x = &self.nodes[input.0].values;
        let mut out = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                let base = ci * ih * iw + y * iw;
                out.extend_from_slice(&x[base..base + w]);
            }
        }
        Ok(self.push(vec![c, h, w], out, Op::Crop2d { input, h, w }))
    }

    /// Stack two [c, h, w] tensors along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 3 || sb.len() != 3 {
            return Err(GhostError::ShapeMismatch {
                op: "concat_channels",
                axis: "rank",
                expected: 3,
                got: sa.len().max(sb.len()),
            });
        }
        if sa[1] != sb[1] {
            return Err(GhostError::ShapeMismatch {
                op: "concat_channels",
                axis: "height",
                expected: sa[1],
                got: sb[1],
            });
        }
        if sa[2] != sb[2] {
            return Err(GhostError::ShapeMismatch {
                op: "concat_channels",
                axis: "width",
                expected: sa[2],
                got: sb[2],
            });
        }
        let mut values = Vec::with_capacity((sa[0] + sb[0]) * sa[1] * sa[2]);
        values.extend_from_slice(&self.nodes[a.0].values);
        values.extend_from_slice(&self.nodes[b.0].values);
        Ok(self.push(
            vec![sa[0] + sb[0], sa[1], sa[2]],
            values,
            Op::ConcatChannels(a, b),
        ))
    }

    // ── losses ──────────────────────────────────────────────────────

    /// Mean squared error between two equally shaped tensors.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.check_same_shape("mse_loss", pred, target)?;
        let a = &self.nodes[pred.0].values;
        let b = &self.nodes[target.0].values;
        let mut acc = 0.0f64;
        for (x, y) in a.iter().zip(b.iter()) {
            let d = x.to_f64() - y.to_f64();
            acc += d * d;
        }
        let mean = acc / a.len() as f64;
        Ok(self.push(vec![1], vec![T::from_f64(mean)], Op::MseLoss(pred, target)))
    }

    /// sum((x - target)^2) against a constant target held outside the tape.
    pub fn sum_sq_diff_const(&mut self, input: NodeId, target: Arc<Vec<f64>>) -> Result<NodeId> {
        let x = &self.nodes[input.0].values;
        if x.len() != target.len() {
            return Err(GhostError::ShapeMismatch {
                op: "sum_sq_diff_const",
                axis: "elements",
                expected: target.len(),
                got: x.len(),
            });
        }
        let mut acc = 0.0f64;
        for (v, t) in x.iter().zip(target.iter()) {
            let d = v.to_f64() - t;
            acc += d * d;
        }
        Ok(self.push(
            vec![1],
            vec![T::from_f64(acc)],
            Op::SumSqDiffConst { input, target },
        ))
    }

    /// Smoothed isotropic total variation with forward differences and
    /// Neumann boundary: sum over pixels of sqrt(dx^2 + dy^2 + eps^2).
    /// Input is [h, w] or [c, h, w] (channels summed).
    pub fn tv_loss(&mut self, input: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.nodes[input.0].shape.clone();
        let (c, h, w) = match shape.len() {
            2 => (1, shape[0], shape[1]),
            3 => (shape[0], shape[1], shape[2]),
            r => {
                return Err(GhostError::ShapeMismatch {
                    op: "tv_loss",
                    axis: "rank",
                    expected: 2,
                    got: r,
                })
            }
        };
        let x = &self.nodes[input.0].values;
        let mut acc = 0.0f64;
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for y in 0..h {
                for xc in 0..w {
                    let v = plane[y * w + xc].to_f64();
                    let dx = if xc + 1 < w {
                        plane[y * w + xc + 1].to_f64() - v
                    } else {
                        0.0
                    };
                    let dy = if y + 1 < h {
                        plane[(y + 1) * w + xc].to_f64() - v
                    } else {
                        0.0
                    };
                    acc += (dx * dx + dy * dy + eps * eps).sqrt();
                }
            }
        }
        Ok(self.push(
            vec![1],
            vec![T::from_f64(acc)],
            Op::TvLoss { input, eps },
        ))
    }

    // ── reverse rules ───────────────────────────────────────────────

    pub(crate) fn backward_op(&self, id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf | Op::Phantom(_) => {}
            Op::Add(a, b) => {
                for (&n, sign) in [(*a, 1.0), (*b, 1.0)].iter().map(|(n, s)| (n, *s)) {
                    let _ = sign;
                    if self.wants_grad(n) {
                        let g = self.ensure_grad(grads, n);
                        for (gi, go) in g.iter_mut().zip(gout.iter()) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants_grad(*a) {
                    let g = self.ensure_grad(grads, *a);
                    for (gi, go) in g.iter_mut().zip(gout.iter()) {
                        *gi += go;
                    }
                }
                if self.wants_grad(*b) {
                    let g = self.ensure_grad(grads, *b);
                    for (gi, go) in g.iter_mut().zip(gout.iter()) {
                        *gi -= go;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
                if self.wants_grad(*a) {
                    let g = self.ensure_grad(grads, *a);
                    for i in 0..g.len() {
                        g[i] += gout[i] * vb[i].to_f64();
                    }
                }
                if self.wants_grad(*b) {
                    let g = self.ensure_grad(grads, *b);
                    for i in 0..g.len() {
                        g[i] += gout[i] * va[i].to_f64();
                    }
                }
            }
            Op::Affine { input, mul } => {
                if self.wants_grad(*input) {
                    let mul = *mul;
                    let g = self.ensure_grad(grads, *input);
                    for (gi, go) in g.iter_mut().zip(gout.iter()) {
                        *gi += mul * go;
                    }
                }
            }
            Op::Relu(input) => {
                if self.wants_grad(*input) {
                    let x = &self.nodes[input.0].values;
                    let g = self.ensure_grad(grads, *input);
                    for i in 0..g.len() {
                        if x[i].to_f64() > 0.0 {
                            g[i] += gout[i];
                        }
                    }
                }
            }
            Op::LeakyRelu { input, slope } => {
                if self.wants_grad(*input) {
                    let slope = *slope;
                    let x = &self.nodes[input.0].values;
                    let g = self.ensure_grad(grads, *input);
                    for i in 0..g.len() {
                        g[i] += if x[i].to_f64() > 0.0 {
                            gout[i]
                        } else {
                            slope * gout[i]
                        };
                    }
                }
            }
            Op::Sin(input) => {
                if self.wants_grad(*input) {
                    let x = &self.nodes[input.0].values;
                    let g = self.ensure_grad(grads, *input);
                    for i in 0..g.len() {
                        g[i] += gout[i] * x[i].to_f64().cos();
                    }
                }
            }
            Op::Cos(input) => {
                if self.wants_grad(*input) {
                    let x = &self.nodes[input.0].values;
                    let g = self.ensure_grad(grads, *input);
                    for i in 0..g.len() {
                        g[i] -= gout[i] * x[i].to_f64().sin();
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => self.backward_dense(*input, *weight, *bias, gout, grads),
            Op::MatMulConst {
                input,
                matrix,
                rows,
                cols,
            } => {
                if self.wants_grad(*input) {
                    let batch = self.nodes[input.0].values.len() / cols;
                    let g = self.ensure_grad(grads, *input);
                    for bi in 0..batch {
                        let gr = &gout[bi * rows..(bi + 1) * rows];
                        let gi = &mut g[bi * cols..(bi + 1) * cols];
                        for (j, gj) in gr.iter().enumerate() {
                            if *gj == 0.0 {
                                continue;
                            }
                            let mrow = &matrix[j * cols..(j + 1) * cols];
                            for i in 0..*cols {
                                gi[i] += gj * mrow[i];
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                pad,
            } => self.backward_conv2d(*input, *kernel, *bias, *pad, gout, grads),
            Op::MaxPool2x2 { input, argmax } => {
                if self.wants_grad(*input) {
                    let ishape = &self.nodes[input.0].shape;
                    let plane_in = ishape[1] * ishape[2];
                    let oshape = &self.nodes[id].shape;
                    let plane_out = oshape[1] * oshape[2];
                    let g = self.ensure_grad(grads, *input);
                    for (o, &am) in argmax.iter().enumerate() {
                        let ci = o / plane_out;
                        g[ci * plane_in + am as usize] += gout[o];
                    }
                }
            }
            Op::UpsampleNearest2x(input) => {
                if self.wants_grad(*input) {
                    let ishape = &self.nodes[input.0].shape;
                    let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let g = self.ensure_grad(grads, *input);
                    for ci in 0..c {
                        let gp = &mut g[ci * h * w..(ci + 1) * h * w];
                        let op = &gout[ci * oh * ow..(ci + 1) * oh * ow];
                        for y in 0..oh {
                            for xc in 0..ow {
                                gp[(y / 2) * w + xc / 2] += op[y * ow + xc];
                            }
                        }
                    }
                }
            }
            Op::Crop2d { input, h, w } => {
                if self.wants_grad(*input) {
                    let ishape = &self.nodes[input.0].shape;
                    let (c, ih, iw) = (ishape[0], ishape[1], ishape[2]);
                    let (h, w) = (*h, *w);
                    let g = self.ensure_grad(grads, *input);
                    for ci in 0..c {
                        for y in 0..h {
                            let src = &gout[(ci * h + y) * w..(ci * h + y) * w + w];
                            let dst = &mut g[ci * ih * iw + y * iw..ci * ih * iw + y * iw + w];
                            for (d, s) in dst.iter_mut().zip(src.iter()) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let na = self.nodes[a.0].values.len();
                if self.wants_grad(*a) {
                    let g = self.ensure_grad(grads, *a);
                    for i in 0..na {
                        g[i] += gout[i];
                    }
                }
                if self.wants_grad(*b) {
                    let g = self.ensure_grad(grads, *b);
                    for (i, gi) in g.iter_mut().enumerate() {
                        *gi += gout[na + i];
                    }
                }
            }
            Op::Reshape(input) => {
                if self.wants_grad(*input) {
                    let g = self.ensure_grad(grads, *input);
                    for (gi, go) in g.iter_mut().zip(gout.iter()) {
                        *gi += go;
                    }
                }
            }
            Op::MseLoss(a, b) => {
                let va = &self.nodes[a.0].values;
                let vb = &self.nodes[b.0].values;
                let scale = 2.0 * gout[0] / va.len() as f64;
                if self.wants_grad(*a) {
                    let g = self.ensure_grad(grads, *a);
                    for i in 0..g.len() {
                        g[i] += scale * (va[i].to_f64() - vb[i].to_f64());
                    }
                }
                if self.wants_grad(*b) {
                    let g = self.ensure_grad(grads, *b);
                    for i in 0..g.len() {
                        g[i] -= scale * (va[i].to_f64() - vb[i].to_f64());
                    }
                }
            }
            Op::SumSqDiffConst { input, target } => {
                if self.wants_grad(*input) {
                    let x = &self.nodes[input.0].values;
                    let scale = 2.0 * gout[0];
                    let g = self.ensure_grad(grads, *input);
                    for i in 0..g.len() {
                        g[i] += scale * (x[i].to_f64() - target[i]);
                    }
                }
            }
            Op::TvLoss { input, eps } => self.backward_tv(*input, *eps, gout[0], grads),
        }
    }

    fn backward_dense(
        &self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (m, n) = {
            let ws = &self.nodes[weight.0].shape;
            (ws[0], ws[1])
        };
        let batch = self.nodes[input.0].values.len() / n;
        let x = &self.nodes[input.0].values;
        let w = &self.nodes[weight.0].values;

        if self.wants_grad(input) {
            let g = self.ensure_grad(grads, input);
            let run = |(gi, gr): (&mut [f64], &[f64])| {
                for (j, gj) in gr.iter().enumerate() {
                    if *gj == 0.0 {
                        continue;
                    }
                    let wrow = &w[j * n..(j + 1) * n];
                    for i in 0..n {
                        gi[i] += gj * wrow[i].to_f64();
                    }
                }
            };
            if batch * n >= PAR_MIN && batch > 1 {
                g.par_chunks_mut(n)
                    .zip(gout.par_chunks(m))
                    .for_each(run);
            } else {
                g.chunks_mut(n).zip(gout.chunks(m)).for_each(run);
            }
        }
        if self.wants_grad(weight) {
            let g = self.ensure_grad(grads, weight);
            let run = |(j, wrow_g): (usize, &mut [f64])| {
                for bi in 0..batch {
                    let gj = gout[bi * m + j];
                    if gj == 0.0 {
                        continue;
                    }
                    let xr = &x[bi * n..(bi + 1) * n];
                    for i in 0..n {
                        wrow_g[i] += gj * xr[i].to_f64();
                    }
                }
            };
            if m * n >= PAR_MIN && m > 1 {
                g.par_chunks_mut(n).enumerate().for_each(run);
            } else {
                g.chunks_mut(n).enumerate().for_each(run);
            }
        }
        if self.wants_grad(bias) {
            let g = self.ensure_grad(grads, bias);
            for bi in 0..batch {
                for j in 0..m {
                    g[j] += gout[bi * m + j];
                }
            }
        }
    }

    fn backward_conv2d(
        &self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        pad: usize,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let ishape = &self.nodes[input.0].shape;
        let kshape = &self.nodes[kernel.0].shape;
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, kh, kw) = (kshape[0], kshape[2], kshape[3]);
        let plane = h * w;
        let x = &self.nodes[input.0].values;
        let kv = &self.nodes[kernel.0].values;

        if self.wants_grad(input) {
            let g = self.ensure_grad(grads, input);
            // grad_in[ci][y+dy][x+dx] += k[co][ci][ky][kx] * gout[co][y][x]
            let run = |(ci, gplane): (usize, &mut [f64])| {
                for co in 0..c_out {
                    let gop = &gout[co * plane..(co + 1) * plane];
                    let kbase = (co * c_in + ci) * kh * kw;
                    for ky in 0..kh {
                        let dy = ky as isize - pad as isize;
                        for kx in 0..kw {
                            let dx = kx as isize - pad as isize;
                            let wv = kv[kbase + ky * kw + kx].to_f64();
                            accumulate_shifted_rev(gplane, gop, wv, h, w, dy, dx);
                        }
                    }
                }
            };
            if c_in * plane >= PAR_MIN && c_in > 1 {
                g.par_chunks_mut(plane).enumerate().for_each(run);
            } else {
                g.chunks_mut(plane).enumerate().for_each(run);
            }
        }
        if self.wants_grad(kernel) {
            let g = self.ensure_grad(grads, kernel);
            let kstride = c_in * kh * kw;
            let run = |(co, gk): (usize, &mut [f64])| {
                let gop = &gout[co * plane..(co + 1) * plane];
                for ci in 0..c_in {
                    let xin = &x[ci * plane..(ci + 1) * plane];
                    for ky in 0..kh {
                        let dy = ky as isize - pad as isize;
                        for kx in 0..kw {
                            let dx = kx as isize - pad as isize;
                            let mut acc = 0.0f64;
                            let (y0, y1) = shift_range(h, dy);
                            let (x0, x1) = shift_range(w, dx);
                            for y in y0..y1 {
                                let src = &xin[((y as isize + dy) as usize * w
                                    + (x0 as isize + dx) as usize)
                                    ..((y as isize + dy) as usize * w
                                        + (x1 as isize + dx) as usize)];
                                let go = &gop[y * w + x0..y * w + x1];
                                for (s, gv) in src.iter().zip(go.iter()) {
                                    acc += s.to_f64() * gv;
                                }
                            }
                            gk[(ci * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            };
            if c_out > 1 && c_out * kstride >= 64 {
                g.par_chunks_mut(kstride).enumerate().for_each(run);
            } else {
                g.chunks_mut(kstride).enumerate().for_each(run);
            }
        }
        if self.wants_grad(bias) {
            let g = self.ensure_grad(grads, bias);
            for co in 0..c_out {
                let mut acc = 0.0f64;
                for v in &gout[co * plane..(co + 1) * plane] {
                    acc += v;
                }
                g[co] += acc;
            }
        }
    }

    fn backward_tv(&self, input: NodeId, eps: f64, gscale: f64, grads: &mut [Option<Vec<f64>>]) {
        if !self.wants_grad(input) {
            return;
        }
        let shape = &self.nodes[input.0].shape;
        let (c, h, w) = match shape.len() {
            2 => (1, shape[0], shape[1]),
            _ => (shape[0], shape[1], shape[2]),
        };
        let x = &self.nodes[input.0].values;
        let g = self.ensure_grad(grads, input);
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            let gplane = &mut g[ci * h * w..(ci + 1) * h * w];
            for y in 0..h {
                for xc in 0..w {
                    let v = plane[y * w + xc].to_f64();
                    let dx = if xc + 1 < w {
                        plane[y * w + xc + 1].to_f64() - v
                    } else {
                        0.0
                    };
                    let dy = if y + 1 < h {
                        plane[(y + 1) * w + xc].to_f64() - v
                    } else {
                        0.0
                    };
                    let r = (dx * dx + dy * dy + eps * eps).sqrt();
                    if r == 0.0 {
                        continue; // flat at eps = 0: subgradient 0
                    }
                    let inv = gscale / r;
                    gplane[y * w + xc] -= (dx + dy) * inv;
                    if xc + 1 < w {
                        gplane[y * w + xc + 1] += dx * inv;
                    }
                    if y + 1 < h {
                        gplane[(y + 1) * w + xc] += dy * inv;
                    }
                }
            }
        }
    }
}

/// (start, end) of output rows/cols for which `index + shift` stays in
/// bounds, for a plane of extent `n`.
#[inline]
fn shift_range(n: usize, shift: isize) -> (usize, usize) {
    let start = if shift < 0 { (-shift) as usize } else { 0 };
    let end = if shift > 0 {
        n - shift as usize
    } else {
        n
    };
    (start, end)
}

/// acc[y][x] += wv * src[y+dy][x+dx] over the valid region.
#[inline]
fn accumulate_shifted<T: Scalar>(
    acc: &mut [f64],
    src: &[T],
    wv: f64,
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
) {
    let (y0, y1) = shift_range(h, dy);
    let (x0, x1) = shift_range(w, dx);
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx0 = (x0 as isize + dx) as usize;
        let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        let arow = &mut acc[y * w + x0..y * w + x1];
        for (a, s) in arow.iter_mut().zip(srow.iter()) {
            *a += wv * s.to_f64();
        }
    }
}

/// Same as `accumulate_shifted` but with f64 source (gradient planes).
#[inline]
fn accumulate_shifted_rev(
    acc: &mut [f64],
    src: &[f64],
    wv: f64,
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
) {
    // dst[y+dy][x+dx] += wv * src[y][x]  ==  dst[u][v] += wv * src[u-dy][v-dx]
    let (y0, y1) = shift_range(h, dy);
    let (x0, x1) = shift_range(w, dx);
    for y in y0..y1 {
        let ty = (y as isize + dy) as usize;
        let tx0 = (x0 as isize + dx) as usize;
        let arow = &mut acc[ty * w + tx0..ty * w + tx0 + (x1 - x0)];
        let srow = &src[y * w + x0..y * w + x1];
        for (a, s) in arow.iter_mut().zip(srow.iter()) {
            *a += wv * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[1, 3, 3], (1..=9).map(|v| v as f64).collect(), false);
        let k = tape.leaf(&[1, 1, 1, 1], vec![1.0], false);
        let b = tape.leaf(&[1], vec![0.0], false);
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.values(y), tape.values(x));
    }

    #[test]
    fn conv2d_box_kernel_counts_neighbors() {
        // all-ones input, all-ones 3x3 kernel: center 9, corners 4
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[1, 3, 3], vec![1.0; 9], false);
        let k = tape.leaf(&[1, 1, 3, 3], vec![1.0; 9], false);
        let b = tape.leaf(&[1], vec![0.0], false);
        let y = tape.conv2d(x, k, b).unwrap();
        let v = tape.values(y);
        assert_eq!(v[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(v[corner], 4.0);
        }
        for edge in [1, 3, 5, 7] {
            assert_eq!(v[edge], 6.0);
        }
    }

    #[test]
    fn dense_identity_and_hand_case() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[2], vec![5.0, -3.0], false);
        let eye = tape.leaf(&[2, 2], vec![1.0, 0.0, 0.0, 1.0], false);
        let zero = tape.leaf(&[2], vec![0.0, 0.0], false);
        let y = tape.dense(x, eye, zero).unwrap();
        assert_eq!(tape.values(y), tape.values(x));

        let x2 = tape.leaf(&[2], vec![1.0, 1.0], false);
        let w = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false);
        let y2 = tape.dense(x2, w, zero).unwrap();
        assert_eq!(tape.values(y2), &[3.0, 7.0]);
    }

    #[test]
    fn maxpool_and_upsample_tiny() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], false);
        let p = tape.maxpool2x2(x).unwrap();
        assert_eq!(tape.values(p), &[4.0]);
        assert_eq!(tape.shape(p), &[1, 1, 1]);

        let u = tape.leaf(&[1, 1, 1], vec![5.0], false);
        let up = tape.upsample_nearest2x(u).unwrap();
        assert_eq!(tape.values(up), &[5.0; 4]);
    }

    #[test]
    fn mse_of_identical_is_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[3], vec![1.0, 2.0, 3.0], false);
        let y = tape.leaf(&[3], vec![1.0, 2.0, 3.0], false);
        let l = tape.mse_loss(x, y).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn tv_loss_hand_cases() {
        let mut tape: Tape<f64> = Tape::new();
        // constant image, eps = 0: exactly zero
        let c = tape.leaf(&[2, 2], vec![3.0; 4], false);
        let l = tape.tv_loss(c, 0.0).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        // [[0,1],[0,1]]: two horizontal unit steps
        let x = tape.leaf(&[2, 2], vec![0.0, 1.0, 0.0, 1.0], false);
        let l2 = tape.tv_loss(x, 0.0).unwrap();
        assert!((tape.scalar(l2) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn maxpool_odd_dims_replicate() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[1, 3, 3], (1..=9).map(|v| v as f64).collect(), false);
        let p = tape.maxpool2x2(x).unwrap();
        assert_eq!(tape.shape(p), &[1, 2, 2]);
        assert_eq!(tape.values(p), &[5.0, 6.0, 8.0, 9.0]);
    }
}

//! Value-level kernels. No tape bookkeeping here; `tape.rs` pairs each
//! forward with its adjoint.

use super::value::{strides, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// `[.., m, k] x [k, n]`, leading axes of the left operand flattened.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let k = b.shape()[0];
    let n = b.shape()[1];
    let m = a.numel() / k;
    let mut out = vec![0.0; m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out).unwrap()
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
fn gemm_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
fn gemm_at(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let k = b.shape()[0];
    let n = b.shape()[1];
    let m = a.numel() / k;
    let mut ga = vec![0.0; m * k];
    gemm_bt(g.data(), b.data(), &mut ga, m, n, k);
    let mut gb = vec![0.0; k * n];
    gemm_at(a.data(), g.data(), &mut gb, m, k, n);
    (
        Tensor::new(a.shape().to_vec(), ga).unwrap(),
        Tensor::new(b.shape().to_vec(), gb).unwrap(),
    )
}

/// `[B, m, k] x [B, k, n]`
pub fn bmm(a: &Tensor, b: &Tensor) -> Tensor {
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = b.shape()[2];
    let mut out = vec![0.0; bs * m * n];
    for t in 0..bs {
        gemm(
            &a.data()[t * m * k..(t + 1) * m * k],
            &b.data()[t * k * n..(t + 1) * k * n],
            &mut out[t * m * n..(t + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Tensor::new([bs, m, n], out).unwrap()
}

pub fn bmm_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = b.shape()[2];
    let mut ga = vec![0.0; bs * m * k];
    let mut gb = vec![0.0; bs * k * n];
    for t in 0..bs {
        let gt = &g.data()[t * m * n..(t + 1) * m * n];
        gemm_bt(
            gt,
            &b.data()[t * k * n..(t + 1) * k * n],
            &mut ga[t * m * k..(t + 1) * m * k],
            m,
            n,
            k,
        );
        gemm_at(
            &a.data()[t * m * k..(t + 1) * m * k],
            gt,
            &mut gb[t * k * n..(t + 1) * k * n],
            m,
            k,
            n,
        );
    }
    (
        Tensor::new(a.shape().to_vec(), ga).unwrap(),
        Tensor::new(b.shape().to_vec(), gb).unwrap(),
    )
}

pub fn softmax_last(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn softmax_last_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap();
    let mut out = vec![0.0; y.numel()];
    for ((o, yr), gr) in out
        .chunks_mut(n)
        .zip(y.data().chunks(n))
        .zip(g.data().chunks(n))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for i in 0..n {
            o[i] = yr[i] * (gr[i] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), out).unwrap()
}

/// Normalization over the last axis. Returns `(y, inv_std per row)`.
pub fn layernorm_last(x: &Tensor) -> (Tensor, Vec<f64>) {
    let n = *x.shape().last().unwrap();
    let rows = x.numel() / n;
    let mut out = vec![0.0; x.numel()];
    let mut inv = vec![0.0; rows];
    for (r, (o, xr)) in out.chunks_mut(n).zip(x.data().chunks(n)).enumerate() {
        let mean = xr.iter().sum::<f64>() / n as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv[r] = is;
        for (ov, xv) in o.iter_mut().zip(xr) {
            *ov = (xv - mean) * is;
        }
    }
    (Tensor::new(x.shape().to_vec(), out).unwrap(), inv)
}

pub fn layernorm_last_backward(y: &Tensor, inv: &[f64], g: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap();
    let mut out = vec![0.0; y.numel()];
    for (r, ((o, yr), gr)) in out
        .chunks_mut(n)
        .zip(y.data().chunks(n))
        .zip(g.data().chunks(n))
        .enumerate()
    {
        let mg = gr.iter().sum::<f64>() / n as f64;
        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for i in 0..n {
            o[i] = inv[r] * (gr[i] - mg - yr[i] * mgy);
        }
    }
    Tensor::new(y.shape().to_vec(), out).unwrap()
}

/// Per-channel normalization over all leading (spatial) axes of a
/// channel-last tensor. Returns `(y, inv_std per channel)`.
pub fn instance_norm(x: &Tensor) -> (Tensor, Vec<f64>) {
    let c = *x.shape().last().unwrap();
    let n = x.numel() / c;
    let mut mean = vec![0.0; c];
    for row in x.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for row in x.data().chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv: Vec<f64> = var
        .iter()
        .map(|s| 1.0 / (s / n as f64 + NORM_EPS).sqrt())
        .collect();
    let mut out = vec![0.0; x.numel()];
    for (o, row) in out.chunks_mut(c).zip(x.data().chunks(c)) {
        for ch in 0..c {
            o[ch] = (row[ch] - mean[ch]) * inv[ch];
        }
    }
    (Tensor::new(x.shape().to_vec(), out).unwrap(), inv)
}

pub fn instance_norm_backward(y: &Tensor, inv: &[f64], g: &Tensor) -> Tensor {
    let c = *y.shape().last().unwrap();
    let n = (y.numel() / c) as f64;
    let mut mg = vec![0.0; c];
    let mut mgy = vec![0.0; c];
    for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
        for ch in 0..c {
            mg[ch] += gr[ch];
            mgy[ch] += gr[ch] * yr[ch];
        }
    }
    for ch in 0..c {
        mg[ch] /= n;
        mgy[ch] /= n;
    }
    let mut out = vec![0.0; y.numel()];
    for ((o, yr), gr) in out
        .chunks_mut(c)
        .zip(y.data().chunks(c))
        .zip(g.data().chunks(c))
    {
        for ch in 0..c {
            o[ch] = inv[ch] * (gr[ch] - mg[ch] - yr[ch] * mgy[ch]);
        }
    }
    Tensor::new(y.shape().to_vec(), out).unwrap()
}

/// Geometry of a cubic-kernel 3D convolution on channel-last volumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(
        input: [usize; 3],
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * padding;
            if padded < kernel || stride == 0 {
                return None;
            }
            output[a] = (padded - kernel) / stride + 1;
        }
        Some(Self {
            input,
            output,
            cin,
            cout,
            kernel,
            stride,
            padding,
        })
    }

    /// Calls `f(out_voxel, in_voxel, tap)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [id, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let ov = (z * oh + y) * ow + x;
                    for kz in 0..k {
                        let iz = z as isize * s + kz as isize - p;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for ky in 0..k {
                            let iy = y as isize * s + ky as isize - p;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = x as isize * s + kx as isize - p;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                let iv = (iz as usize * ih + iy as usize) * iw + ix as usize;
                                f(ov, iv, (kz * k + ky) * k + kx);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `x: [D,H,W,Cin]`, `w: [k,k,k,Cin,Cout]` -> `[D',H',W',Cout]`.
pub fn conv3d(x: &Tensor, w: &Tensor, g: &ConvGeom) -> Tensor {
    let (ci, co) = (g.cin, g.cout);
    let nout: usize = g.output.iter().product();
    let mut out = vec![0.0; nout * co];
    let xd = x.data();
    let wd = w.data();
    g.for_each_tap(|ov, iv, tap| {
        let orow = &mut out[ov * co..(ov + 1) * co];
        let xrow = &xd[iv * ci..(iv + 1) * ci];
        let wtap = &wd[tap * ci * co..(tap + 1) * ci * co];
        for (c, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &wtap[c * co..(c + 1) * co];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    });
    let [a, b, c] = g.output;
    Tensor::new(vec![a, b, c, co], out).unwrap()
}

pub fn conv3d_backward_input(w: &Tensor, gout: &Tensor, g: &ConvGeom) -> Tensor {
    let (ci, co) = (g.cin, g.cout);
    let nin: usize = g.input.iter().product();
    let mut gx = vec![0.0; nin * ci];
    let wd = w.data();
    let gd = gout.data();
    g.for_each_tap(|ov, iv, tap| {
        let grow = &gd[ov * co..(ov + 1) * co];
        let wtap = &wd[tap * ci * co..(tap + 1) * ci * co];
        let xrow = &mut gx[iv * ci..(iv + 1) * ci];
        for (c, xg) in xrow.iter_mut().enumerate() {
            let wrow = &wtap[c * co..(c + 1) * co];
            *xg += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
        }
    });
    let [a, b, c] = g.input;
    Tensor::new(vec![a, b, c, ci], gx).unwrap()
}

pub fn conv3d_backward_weight(x: &Tensor, gout: &Tensor, g: &ConvGeom) -> Tensor {
    let (ci, co) = (g.cin, g.cout);
    let k = g.kernel;
    let mut gw = vec![0.0; k * k * k * ci * co];
    let xd = x.data();
    let gd = gout.data();
    g.for_each_tap(|ov, iv, tap| {
        let grow = &gd[ov * co..(ov + 1) * co];
        let xrow = &xd[iv * ci..(iv + 1) * ci];
        let wtap = &mut gw[tap * ci * co..(tap + 1) * ci * co];
        for (c, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &mut wtap[c * co..(c + 1) * co];
            for (w, &gv) in wrow.iter_mut().zip(grow) {
                *w += xv * gv;
            }
        }
    });
    Tensor::new(vec![k, k, k, ci, co], gw).unwrap()
}

pub fn transpose(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    let xd = x.data();
    for _ in 0..x.numel() {
        out.push(xd[offset]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += eff[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= eff[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn concat(xs: &[&Tensor], axis: usize) -> Tensor {
    let mut shape = xs[0].shape().to_vec();
    shape[axis] = xs.iter().map(|t| t.shape()[axis]).sum();
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in xs {
            let block = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(shape, out).unwrap()
}

pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, extent, inner) = axis_split(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::new(shape, out).unwrap()
}

/// Adjoint of `slice`: embeds `g` into zeros of `full` shape.
pub fn slice_backward(g: &Tensor, full: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, extent, inner) = axis_split(full, axis);
    let len = g.shape()[axis];
    let mut out = vec![0.0; full.iter().product()];
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        out[base..base + len * inner]
            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(full.to_vec(), out).unwrap()
}

/// Mean over `axis`, keeping the axis with extent 1.
pub fn mean_axis(x: &Tensor, axis: usize) -> Tensor {
    let (outer, extent, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for e in 0..extent {
            let src = &x.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= extent as f64);
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Tensor::new(shape, out).unwrap()
}

/// Sum over `axis`, removing it (rank-1 inputs give shape `[1]`).
pub fn sum_axis(x: &Tensor, axis: usize) -> Tensor {
    let (outer, extent, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for e in 0..extent {
            let src = &x.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(shape, out).unwrap()
}

/// Repeats `g` (shaped as `x` with `axis` removed or kept as 1) along `axis`.
pub fn repeat_axis(g: &[f64], full: &[usize], axis: usize) -> Tensor {
    let (outer, extent, inner) = axis_split(full, axis);
    let mut out = Vec::with_capacity(full.iter().product());
    for o in 0..outer {
        let row = &g[o * inner..(o + 1) * inner];
        for _ in 0..extent {
            out.extend_from_slice(row);
        }
    }
    Tensor::new(full.to_vec(), out).unwrap()
}

/// Nearest-neighbour 2x upsampling of `[D,H,W,C]`.
pub fn upsample2x(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (d, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![0.0; d2 * h2 * w2 * c];
    let xd = x.data();
    for z in 0..d2 {
        for y in 0..h2 {
            for xx in 0..w2 {
                let src = ((z / 2 * h + y / 2) * w + xx / 2) * c;
                let dst = ((z * h2 + y) * w2 + xx) * c;
                out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
    }
    Tensor::new(vec![d2, h2, w2, c], out).unwrap()
}

pub fn upsample2x_backward(g: &Tensor) -> Tensor {
    let s = g.shape();
    let (d2, h2, w2, c) = (s[0], s[1], s[2], s[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0; d2 / 2 * h * w * c];
    let gd = g.data();
    for z in 0..d2 {
        for y in 0..h2 {
            for xx in 0..w2 {
                let dst = ((z / 2 * h + y / 2) * w + xx / 2) * c;
                let src = ((z * h2 + y) * w2 + xx) * c;
                for ch in 0..c {
                    out[dst + ch] += gd[src + ch];
                }
            }
        }
    }
    Tensor::new(vec![d2 / 2, h, w, c], out).unwrap()
}

/// `out[.., j, ..] = x[.., index[j], ..]` along `axis`.
pub fn gather(x: &Tensor, axis: usize, index: &[usize]) -> Tensor {
    let (outer, extent, inner) = axis_split(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = index.len();
    let mut out = Vec::with_capacity(outer * index.len() * inner);
    for o in 0..outer {
        for &i in index {
            let base = (o * extent + i) * inner;
            out.extend_from_slice(&x.data()[base..base + inner]);
        }
    }
    Tensor::new(shape, out).unwrap()
}

/// `out[.., index[j], ..] += x[.., j, ..]` into zeros with `extent` slots.
pub fn scatter_add(x: &Tensor, axis: usize, index: &[usize], extent: usize) -> Tensor {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = extent;
    let mut out = vec![0.0; outer * extent * inner];
    for o in 0..outer {
        for (j, &i) in index.iter().enumerate().take(n) {
            let src = &x.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
            let dst = &mut out[(o * extent + i) * inner..(o * extent + i + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Tensor::new(shape, out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_uniform_logits() {
        let y = softmax_last(&Tensor::zeros([1, 3]));
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_center_of_ones() {
        let x = Tensor::ones([3, 3, 3, 1]);
        let w = Tensor::ones([3, 3, 3, 1, 1]);
        let g = ConvGeom::new([3, 3, 3], 1, 1, 3, 1, 1).unwrap();
        let y = conv3d(&x, &w, &g);
        assert_eq!(y.shape(), &[3, 3, 3, 1]);
        assert_eq!(y.data()[13], 27.0);
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn strided_conv_geometry() {
        let g = ConvGeom::new([8, 8, 8], 1, 1, 3, 2, 1).unwrap();
        assert_eq!(g.output, [4, 4, 4]);
        let g = ConvGeom::new([5, 5, 5], 1, 1, 1, 1, 0).unwrap();
        assert_eq!(g.output, [5, 5, 5]);
    }

    #[test]
    fn transpose_roundtrip() {
        let x = Tensor::from_fn([2, 3, 4], |i| i as f64);
        let p = [2, 0, 1];
        let y = transpose(&x, &p);
        assert_eq!(y.shape(), &[4, 2, 3]);
        // y[k,i,j] = x[i,j,k]
        assert_eq!(y.data()[1 * 6 + 0 * 3 + 2], x.data()[0 * 12 + 2 * 4 + 1]);
        let back = transpose(&y, &inverse_perm(&p));
        assert_eq!(back, x);
    }

    #[test]
    fn concat_then_slice() {
        let a = Tensor::from_fn([2, 2], |i| i as f64);
        let b = Tensor::from_fn([2, 3], |i| 10.0 + i as f64);
        let c = concat(&[&a, &b], 1);
        assert_eq!(c.data(), &[0., 1., 10., 11., 12., 2., 3., 13., 14., 15.]);
        assert_eq!(slice(&c, 1, 2, 3), b);
        assert_eq!(slice(&c, 1, 0, 2), a);
    }

    #[test]
    fn gather_scatter_inverse_on_permutation() {
        let x = Tensor::from_fn([4, 2], |i| i as f64);
        let perm = [2, 0, 3, 1];
        let y = gather(&x, 0, &perm);
        let back = scatter_add(&y, 0, &perm, 4);
        assert_eq!(back, x);
    }

    #[test]
    fn upsample_replicates() {
        let x = Tensor::from_fn([1, 1, 1, 2], |i| i as f64 + 1.0);
        let y = upsample2x(&x);
        assert_eq!(y.shape(), &[2, 2, 2, 2]);
        assert!(y.data().chunks(2).all(|c| c == [1.0, 2.0]));
        let g = upsample2x_backward(&Tensor::ones([2, 2, 2, 2]));
        assert_eq!(g.data(), &[8.0, 8.0]);
    }
}

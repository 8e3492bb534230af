//! Tensor operations with recorded backward closures.
//!
//! Shapes are explicit: elementwise ops demand identical dims, matmul allows
//! equal leading batch dims (or a 2-d rhs shared across the batch), nothing
//! else broadcasts. Every op validates its output for finiteness.

use crate::error::{Error, Result};
use crate::tensor::tape::record;
use crate::tensor::{ensure_finite, numel, Tensor};

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err(op, format!("lhs dims {:?} vs rhs dims {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn finish(op: &'static str, out: &Tensor) -> Result<()> {
    ensure_finite(op, out.data())
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_dims("add", self, rhs)?;
        let data = self.data().iter().zip(rhs.data()).map(|(a, b)| a + b).collect();
        let mut out = Tensor::from_op(self.dims().to_vec(), data);
        finish("add", &out)?;
        record(&mut out, &[self, rhs], |ids| {
            Box::new(move |g, sink| {
                if let Some(a) = ids[0] {
                    for (d, gv) in sink.buf(a).iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                if let Some(b) = ids[1] {
                    for (d, gv) in sink.buf(b).iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
            })
        });
        Ok(out)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_dims("sub", self, rhs)?;
        let data = self.data().iter().zip(rhs.data()).map(|(a, b)| a - b).collect();
        let mut out = Tensor::from_op(self.dims().to_vec(), data);
        finish("sub", &out)?;
        record(&mut out, &[self, rhs], |ids| {
            Box::new(move |g, sink| {
                if let Some(a) = ids[0] {
                    for (d, gv) in sink.buf(a).iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                if let Some(b) = ids[1] {
                    for (d, gv) in sink.buf(b).iter_mut().zip(&g) {
                        *d -= gv;
                    }
                }
            })
        });
        Ok(out)
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_dims("mul", self, rhs)?;
        let data = self.data().iter().zip(rhs.data()).map(|(a, b)| a * b).collect();
        let mut out = Tensor::from_op(self.dims().to_vec(), data);
        finish("mul", &out)?;
        let (a_data, b_data) = (self.share_data(), rhs.share_data());
        record(&mut out, &[self, rhs], |ids| {
            Box::new(move |g, sink| {
                if let Some(a) = ids[0] {
                    let buf = sink.buf(a);
                    for i in 0..g.len() {
                        buf[i] += g[i] * b_data[i];
                    }
                }
                if let Some(b) = ids[1] {
                    let buf = sink.buf(b);
                    for i in 0..g.len() {
                        buf[i] += g[i] * a_data[i];
                    }
                }
            })
        });
        Ok(out)
    }

    pub fn scale(&self, c: f32) -> Result<Tensor> {
        let data = self.data().iter().map(|a| a * c).collect();
        let mut out = Tensor::from_op(self.dims().to_vec(), data);
        finish("scale", &out)?;
        record(&mut out, &[self], |ids| {
            Box::new(move |g, sink| {
                if let Some(a) = ids[0] {
                    let buf = sink.buf(a);
                    for i in 0..g.len() {
                        buf[i] += c * g[i];
                    }
                }
            })
        });
        Ok(out)
    }

    /// Contraction over the last axis of `self` and first matrix axis of
    /// `rhs`: `[..., m, n] x [..., n, p] -> [..., m, p]`. Leading batch dims
    /// must match exactly; a 2-d `rhs` is shared across the batch.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ad, bd) = (self.dims(), rhs.dims());
        if ad.len() < 2 || bd.len() < 2 {
            return Err(shape_err("matmul", format!("need rank >= 2, got {ad:?} x {bd:?}")));
        }
        let (m, n) = (ad[ad.len() - 2], ad[ad.len() - 1]);
        let (n2, p) = (bd[bd.len() - 2], bd[bd.len() - 1]);
        let batch_a = &ad[..ad.len() - 2];
        let batch_b = &bd[..bd.len() - 2];
        let rhs_shared = batch_b.is_empty() && !batch_a.is_empty();
        if n != n2 || (!rhs_shared && batch_a != batch_b) {
            return Err(shape_err("matmul", format!("lhs dims {ad:?} vs rhs dims {bd:?}")));
        }
        let batch = numel(batch_a);
        let (a, b) = (self.data(), rhs.data());
        let mut data = vec![0.0f32; batch * m * p];
        for bi in 0..batch {
            let ab = &a[bi * m * n..(bi + 1) * m * n];
            let bb = if rhs_shared { b } else { &b[bi * n * p..(bi + 1) * n * p] };
            let cb = &mut data[bi * m * p..(bi + 1) * m * p];
            for i in 0..m {
                for k in 0..n {
                    let av = ab[i * n + k];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bb[k * p..k * p + p];
                    let crow = &mut cb[i * p..i * p + p];
                    for j in 0..p {
                        crow[j] += av * brow[j];
                    }
                }
            }
        }
        let mut out_dims = batch_a.to_vec();
        out_dims.push(m);
        out_dims.push(p);
        let mut out = Tensor::from_op(out_dims, data);
        finish("matmul", &out)?;
        let (a_data, b_data) = (self.share_data(), rhs.share_data());
        record(&mut out, &[self, rhs], |ids| {
            Box::new(move |g, sink| {
                if let Some(aid) = ids[0] {
                    let da = sink.buf(aid);
                    for bi in 0..batch {
                        let gb = &g[bi * m * p..(bi + 1) * m * p];
                        let bb = if rhs_shared {
                            &b_data[..]
                        } else {
                            &b_data[bi * n * p..(bi + 1) * n * p]
                        };
                        let dab = &mut da[bi * m * n..(bi + 1) * m * n];
                        for i in 0..m {
                            for k in 0..n {
                                let mut acc = 0.0f32;
                                let grow = &gb[i * p..i * p + p];
                                let brow = &bb[k * p..k * p + p];
                                for j in 0..p {
                                    acc += grow[j] * brow[j];
                                }
                                dab[i * n + k] += acc;
                            }
                        }
                    }
                }
                if let Some(bid) = ids[1] {
                    let db = sink.buf(bid);
                    for bi in 0..batch {
                        let gb = &g[bi * m * p..(bi + 1) * m * p];
                        let ab = &a_data[bi * m * n..(bi + 1) * m * n];
                        let dbb = if rhs_shared {
                            &mut db[..]
                        } else {
                            &mut db[bi * n * p..(bi + 1) * n * p]
                        };
                        for i in 0..m {
                            for k in 0..n {
                                let av = ab[i * n + k];
                                if av == 0.0 {
                                    continue;
                                }
                                let grow = &gb[i * p..i * p + p];
                                let drow = &mut dbb[k * p..k * p + p];
                                for j in 0..p {
                                    drow[j] += av * grow[j];
                                }
                            }
                        }
                    }
                }
            })
        });
        Ok(out)
    }

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let dims = self.dims();
        if dims.is_empty() {
            return Err(shape_err("softmax_last", format!("need rank >= 1, got {dims:?}")));
        }
        // Output can be finite even for infinite logits, so check the input.
        ensure_finite("softmax_last input", self.data())?;
        let f = dims[dims.len() - 1];
        let rows = self.len() / f;
        let x = self.data();
        let mut data = vec![0.0f32; self.len()];
        for r in 0..rows {
            let row = &x[r * f..(r + 1) * f];
            let out_row = &mut data[r * f..(r + 1) * f];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (o, &v) in out_row.iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e as f64;
            }
            let inv = (1.0 / sum) as f32;
            for o in out_row.iter_mut() {
                *o *= inv;
            }
        }
        let mut out = Tensor::from_op(dims.to_vec(), data);
        finish("softmax_last", &out)?;
        let y = out.share_data();
        record(&mut out, &[self], |ids| {
            Box::new(move |g, sink| {
                if let Some(a) = ids[0] {
                    let buf = sink.buf(a);
                    for r in 0..rows {
                        let yr = &y[r * f..(r + 1) * f];
                        let gr = &g[r * f..(r + 1) * f];
                        let mut dot = 0.0f64;
                        for j in 0..f {
                            dot += (gr[j] * yr[j]) as f64;
                        }
                        let dot = dot as f32;
                        let br = &mut buf[r * f..(r + 1) * f];
                        for j in 0..f {
                            br[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            })
        });
        Ok(out)
    }

    /// Mean squared difference, as a scalar tensor.
    pub fn mse(&self, rhs: &Tensor) -> Result<Tensor> {
        same_dims("mse", self, rhs)?;
        let n = self.len();
        let mut acc = 0.0f64;
        for (a, b) in self.data().iter().zip(rhs.data()) {
            let d = (a - b) as f64;
            acc += d * d;
        }
        let mut out = Tensor::from_op(vec![], vec![(acc / n as f64) as f32]);
        finish("mse", &out)?;
        let (a_data, b_data) = (self.share_data(), rhs.share_data());
        record(&mut out, &[self, rhs], |ids| {
            Box::new(move |g, sink| {
                let scale = 2.0 * g[0] / n as f32;
                if let Some(a) = ids[0] {
                    let buf = sink.buf(a);
                    for i in 0..n {
                        buf[i] += scale * (a_data[i] - b_data[i]);
                    }
                }
                if let Some(b) = ids[1] {
                    let buf = sink.buf(b);
                    for i in 0..n {
                        buf[i] -= scale * (a_data[i] - b_data[i]);
                    }
                }
            })
        });
        Ok(out)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Result<Tensor> {
        let mut acc = 0.0f64;
        for v in self.data() {
            acc += *v as f64;
        }
        let mut out = Tensor::from_op(vec![], vec![acc as f32]);
        finish("sum_all", &out)?;
        let n = self.len();
        record(&mut out, &[self], |ids| {
            Box::new(move |g, sink| {
                if let Some(a) = ids[0] {
                    let buf = sink.buf(a);
                    for d in buf.iter_mut().take(n) {
                        *d += g[0];
                    }
                }
            })
        });
        Ok(out)
    }

    pub fn silu(&self) -> Result<Tensor> {
        let data = self
            .data()
            .iter()
            .map(|&v| {
                let s = 1.0 / (1.0 + (-v).exp());
                v * s
            })
            .collect();
        let mut out = Tensor::from_op(self.dims().to_vec(), data);
        finish("silu", &out)?;
        let x = self.share_data();
        record(&mut out, &[self], |ids| {
            Box::new(move |g, sink| {
                if let Some(a) = ids[0] {
                    let buf = sink.buf(a);
                    for i in 0..g.len() {
                        let v = x[i];
                        let s = 1.0 / (1.0 + (-v).exp());
                        buf[i] += g[i] * (s * (1.0 + v * (1.0 - s)));
                    }
                }
            })
        });
        Ok(out)
    }

    /// 2-d convolution, stride 1, zero padding. `self` is `(N, C, H, W)`,
    /// `weight` is `(O, C, kh, kw)`, `bias` is `(O)`.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, pad: usize) -> Result<Tensor> {
        let xd = self.dims();
        let wd = weight.dims();
        if xd.len() != 4 || wd.len() != 4 || xd[1] != wd[1] {
            return Err(shape_err("conv2d", format!("input dims {xd:?} vs weight dims {wd:?}")));
        }
        let (nb, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (o, kh, kw) = (wd[0], wd[2], wd[3]);
        if bias.dims() != [o] {
            return Err(shape_err(
                "conv2d",
                format!("bias dims {:?} vs out channels {o}", bias.dims()),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err("conv2d", format!("kernel {kh}x{kw} exceeds padded input")));
        }
        let (oh, ow) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
        let x = self.data();
        let wt = weight.data();
        let bs = bias.data();
        let mut data = vec![0.0f32; nb * o * oh * ow];
        for n in 0..nb {
            for co in 0..o {
                let out_base = (n * o + co) * oh * ow;
                data[out_base..out_base + oh * ow].fill(bs[co]);
                for ci in 0..c {
                    let in_base = (n * c + ci) * h * w;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wt[((co * c + ci) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            // valid output rows/cols for this kernel offset
                            let y0 = pad.saturating_sub(ky);
                            let y1 = (h + pad - ky).min(oh);
                            let x0 = pad.saturating_sub(kx);
                            let x1 = (w + pad - kx).min(ow);
                            for oy in y0..y1 {
                                let iy = oy + ky - pad;
                                let in_row = in_base + iy * w;
                                let out_row = out_base + oy * ow;
                                for ox in x0..x1 {
                                    data[out_row + ox] += wv * x[in_row + ox + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut out = Tensor::from_op(vec![nb, o, oh, ow], data);
        finish("conv2d", &out)?;
        let x_data = self.share_data();
        let w_data = weight.share_data();
        record(&mut out, &[self, weight, bias], |ids| {
            Box::new(move |g, sink| {
                if let Some(xid) = ids[0] {
                    let dx = sink.buf(xid);
                    for n in 0..nb {
                        for co in 0..o {
                            let g_base = (n * o + co) * oh * ow;
                            for ci in 0..c {
                                let dx_base = (n * c + ci) * h * w;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let wv = w_data[((co * c + ci) * kh + ky) * kw + kx];
                                        if wv == 0.0 {
                                            continue;
                                        }
                                        let y0 = pad.saturating_sub(ky);
                                        let y1 = (h + pad - ky).min(oh);
                                        let x0 = pad.saturating_sub(kx);
                                        let x1 = (w + pad - kx).min(ow);
                                        for oy in y0..y1 {
                                            let iy = oy + ky - pad;
                                            let dx_row = dx_base + iy * w;
                                            let g_row = g_base + oy * ow;
                                            for ox in x0..x1 {
                                                dx[dx_row + ox + kx - pad] += wv * g[g_row + ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(wid) = ids[1] {
                    let dw = sink.buf(wid);
                    for n in 0..nb {
                        for co in 0..o {
                            let g_base = (n * o + co) * oh * ow;
                            for ci in 0..c {
                                let in_base = (n * c + ci) * h * w;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let y0 = pad.saturating_sub(ky);
                                        let y1 = (h + pad - ky).min(oh);
                                        let x0 = pad.saturating_sub(kx);
                                        let x1 = (w + pad - kx).min(ow);
                                        let mut acc = 0.0f32;
                                        for oy in y0..y1 {
                                            let iy = oy + ky - pad;
                                            let in_row = in_base + iy * w;
                                            let g_row = g_base + oy * ow;
                                            for ox in x0..x1 {
                                                acc += g[g_row + ox] * x_data[in_row + ox + kx - pad];
                                            }
                                        }
                                        dw[((co * c + ci) * kh + ky) * kw + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(bid) = ids[2] {
                    let db = sink.buf(bid);
                    for n in 0..nb {
                        for co in 0..o {
                            let g_base = (n * o + co) * oh * ow;
                            let mut acc = 0.0f32;
                            for v in &g[g_base..g_base + oh * ow] {
                                acc += v;
                            }
                            db[co] += acc;
                        }
                    }
                }
            })
        });
        Ok(out)
    }

    /// Group normalization over `(N, C, H, W)` with per-channel affine.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let xd = self.dims();
        if xd.len() != 4 {
            return Err(shape_err("group_norm", format!("need (N,C,H,W), got {xd:?}")));
        }
        let (nb, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        if groups == 0 || c % groups != 0 {
            return Err(shape_err("group_norm", format!("{c} channels not divisible by {groups} groups")));
        }
        if gamma.dims() != [c] || beta.dims() != [c] {
            return Err(shape_err(
                "group_norm",
                format!("affine dims {:?}/{:?} vs {c} channels", gamma.dims(), beta.dims()),
            ));
        }
        let gsize = c / groups;
        let m = gsize * h * w;
        let x = self.data();
        let gam = gamma.data();
        let bet = beta.data();
        let mut data = vec![0.0f32; self.len()];
        let mut means = vec![0.0f32; nb * groups];
        let mut inv_stds = vec![0.0f32; nb * groups];
        for n in 0..nb {
            for gi in 0..groups {
                let mut sum = 0.0f64;
                let mut sq = 0.0f64;
                for cc in 0..gsize {
                    let base = (n * c + gi * gsize + cc) * h * w;
                    for v in &x[base..base + h * w] {
                        let v = *v as f64;
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / m as f64;
                let var = (sq / m as f64 - mean * mean).max(0.0);
                let inv_std = 1.0 / (var + EPS).sqrt();
                means[n * groups + gi] = mean as f32;
                inv_stds[n * groups + gi] = inv_std as f32;
                for cc in 0..gsize {
                    let ch = gi * gsize + cc;
                    let base = (n * c + ch) * h * w;
                    for i in 0..h * w {
                        let xh = (x[base + i] - mean as f32) * inv_std as f32;
                        data[base + i] = gam[ch] * xh + bet[ch];
                    }
                }
            }
        }
        let mut out = Tensor::from_op(xd.to_vec(), data);
        finish("group_norm", &out)?;
        let x_data = self.share_data();
        let gam_data = gamma.share_data();
        record(&mut out, &[self, gamma, beta], |ids| {
            Box::new(move |g, sink| {
                // dgamma / dbeta first: per channel sums over (n, h, w)
                if let Some(gid) = ids[1] {
                    let dg = sink.buf(gid);
                    for n in 0..nb {
                        for ch in 0..c {
                            let gi = ch / gsize;
                            let mean = means[n * groups + gi];
                            let inv_std = inv_stds[n * groups + gi];
                            let base = (n * c + ch) * h * w;
                            let mut acc = 0.0f64;
                            for i in 0..h * w {
                                let xh = (x_data[base + i] - mean) * inv_std;
                                acc += (g[base + i] * xh) as f64;
                            }
                            dg[ch] += acc as f32;
                        }
                    }
                }
                if let Some(bid) = ids[2] {
                    let db = sink.buf(bid);
                    for n in 0..nb {
                        for ch in 0..c {
                            let base = (n * c + ch) * h * w;
                            let mut acc = 0.0f64;
                            for i in 0..h * w {
                                acc += g[base + i] as f64;
                            }
                            db[ch] += acc as f32;
                        }
                    }
                }
                if let Some(xid) = ids[0] {
                    let dx = sink.buf(xid);
                    for n in 0..nb {
                        for gi in 0..groups {
                            let mean = means[n * groups + gi] as f64;
                            let inv_std = inv_stds[n * groups + gi] as f64;
                            // sums of dxhat and dxhat*xhat over the group
                            let mut s1 = 0.0f64;
                            let mut s2 = 0.0f64;
                            for cc in 0..gsize {
                                let ch = gi * gsize + cc;
                                let base = (n * c + ch) * h * w;
                                for i in 0..h * w {
                                    let dxh = (g[base + i] * gam_data[ch]) as f64;
                                    let xh = (x_data[base + i] as f64 - mean) * inv_std;
                                    s1 += dxh;
                                    s2 += dxh * xh;
                                }
                            }
                            for cc in 0..gsize {
                                let ch = gi * gsize + cc;
                                let base = (n * c + ch) * h * w;
                                for i in 0..h * w {
                                    let dxh = (g[base + i] * gam_data[ch]) as f64;
                                    let xh = (x_data[base + i] as f64 - mean) * inv_std;
                                    let d = inv_std * (dxh - s1 / m as f64 - xh * s2 / m as f64);
                                    dx[base + i] += d as f32;
                                }
                            }
                        }
                    }
                }
            })
        });
        Ok(out)
    }

    /// Layer normalization over the last axis with per-feature affine.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let dims = self.dims();
        if dims.is_empty() {
            return Err(shape_err("layer_norm", "need rank >= 1".into()));
        }
        let d = dims[dims.len() - 1];
        if gamma.dims() != [d] || beta.dims() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("affine dims {:?}/{:?} vs feature dim {d}", gamma.dims(), beta.dims()),
            ));
        }
        let rows = self.len() / d;
        let x = self.data();
        let gam = gamma.data();
        let bet = beta.data();
        let mut data = vec![0.0f32; self.len()];
        let mut means = vec![0.0f32; rows];
        let mut inv_stds = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for &v in row {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
            let mean = sum / d as f64;
            let var = (sq / d as f64 - mean * mean).max(0.0);
            let inv_std = 1.0 / (var + EPS).sqrt();
            means[r] = mean as f32;
            inv_stds[r] = inv_std as f32;
            for j in 0..d {
                let xh = (row[j] - mean as f32) * inv_std as f32;
                data[r * d + j] = gam[j] * xh + bet[j];
            }
        }
        let mut out = Tensor::from_op(dims.to_vec(), data);
        finish("layer_norm", &out)?;
        let x_data = self.share_data();
        let gam_data = gamma.share_data();
        record(&mut out, &[self, gamma, beta], |ids| {
            Box::new(move |g, sink| {
                if let Some(gid) = ids[1] {
                    let dg = sink.buf(gid);
                    for r in 0..rows {
                        for j in 0..d {
                            let xh = (x_data[r * d + j] - means[r]) * inv_stds[r];
                            dg[j] += g[r * d + j] * xh;
                        }
                    }
                }
                if let Some(bid) = ids[2] {
                    let db = sink.buf(bid);
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(xid) = ids[0] {
                    let dx = sink.buf(xid);
                    for r in 0..rows {
                        let mean = means[r] as f64;
                        let inv_std = inv_stds[r] as f64;
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for j in 0..d {
                            let dxh = (g[r * d + j] * gam_data[j]) as f64;
                            let xh = (x_data[r * d + j] as f64 - mean) * inv_std;
                            s1 += dxh;
                            s2 += dxh * xh;
                        }
                        for j in 0..d {
                            let dxh = (g[r * d + j] * gam_data[j]) as f64;
                            let xh = (x_data[r * d + j] as f64 - mean) * inv_std;
                            let dv = inv_std * (dxh - s1 / d as f64 - xh * s2 / d as f64);
                            dx[r * d + j] += dv as f32;
                        }
                    }
                }
            })
        });
        Ok(out)
    }

    /// 2x2 average pooling with stride 2 on `(N, C, H, W)`.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let xd = self.dims();
        if xd.len() != 4 || xd[2] % 2 != 0 || xd[3] % 2 != 0 {
            return Err(shape_err("avg_pool2", format!("need even (N,C,H,W), got {xd:?}")));
        }
        let (nb, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data();
        let mut data = vec![0.0f32; nb * c * oh * ow];
        for nc in 0..nb * c {
            let in_base = nc * h * w;
            let out_base = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = in_base + 2 * oy * w + 2 * ox;
                    data[out_base + oy * ow + ox] =
                        0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
                }
            }
        }
        let mut out = Tensor::from_op(vec![nb, c, oh, ow], data);
        finish("avg_pool2", &out)?;
        record(&mut out, &[self], |ids| {
            Box::new(move |g, sink| {
                if let Some(a) = ids[0] {
                    let dx = sink.buf(a);
                    for nc in 0..nb * c {
                        let in_base = nc * h * w;
                        let out_base = nc * oh * ow;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = 0.25 * g[out_base + oy * ow + ox];
                                let i = in_base + 2 * oy * w + 2 * ox;
                                dx[i] += gv;
                                dx[i + 1] += gv;
                                dx[i + w] += gv;
                                dx[i + w + 1] += gv;
                            }
                        }
                    }
                }
            })
        });
        Ok(out)
    }

    /// Nearest-neighbor 2x upsampling on `(N, C, H, W)`.
    pub fn upsample2(&self) -> Result<Tensor> {
        let xd = self.dims();
        if xd.len() != 4 {
            return Err(shape_err("upsample2", format!("need (N,C,H,W), got {xd:?}")));
        }
        let (nb, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.data();
        let mut data = vec![0.0f32; nb * c * oh * ow];
        for nc in 0..nb * c {
            let in_base = nc * h * w;
            let out_base = nc * oh * ow;
            for y in 0..h {
                for xx in 0..w {
                    let v = x[in_base + y * w + xx];
                    let o = out_base + 2 * y * ow + 2 * xx;
                    data[o] = v;
                    data[o + 1] = v;
                    data[o + ow] = v;
                    data[o + ow + 1] = v;
                }
            }
        }
        let mut out = Tensor::from_op(vec![nb, c, oh, ow], data);
        finish("upsample2", &out)?;
        record(&mut out, &[self], |ids| {
            Box::new(move |g, sink| {
                if let Some(a) = ids[0] {
                    let dx = sink.buf(a);
                    for nc in 0..nb * c {
                        let in_base = nc * h * w;
                        let out_base = nc * oh * ow;
                        for y in 0..h {
                            for xx in 0..w {
                                let o = out_base + 2 * y * ow + 2 * xx;
                                dx[in_base + y * w + xx] +=
                                    g[o] + g[o + 1] + g[o + ow] + g[o + ow + 1];
                            }
                        }
                    }
                }
            })
        });
        Ok(out)
    }

    /// Axis permutation; `axes` lists source axes in output order.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let dims = self.dims();
        let rank = dims.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} invalid for dims {dims:?}")));
        }
        let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
        let fwd = permutation_map(dims, axes);
        let x = self.data();
        let mut data = vec![0.0f32; self.len()];
        for (o, &src) in fwd.iter().enumerate() {
            data[o] = x[src];
        }
        let mut out = Tensor::from_op(out_dims, data);
        finish("permute", &out)?;
        record(&mut out, &[self], |ids| {
            Box::new(move |g, sink| {
                if let Some(a) = ids[0] {
                    let dx = sink.buf(a);
                    for (o, &src) in fwd.iter().enumerate() {
                        dx[src] += g[o];
                    }
                }
            })
        });
        Ok(out)
    }

    /// Concatenation along axis 1 of two `(N, C, H, W)` tensors.
    pub fn concat_ch(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ad, bd) = (self.dims(), rhs.dims());
        if ad.len() != 4
            || bd.len() != 4
            || ad[0] != bd[0]
            || ad[2] != bd[2]
            || ad[3] != bd[3]
        {
            return Err(shape_err("concat_ch", format!("lhs dims {ad:?} vs rhs dims {bd:?}")));
        }
        let (nb, c1, c2, h, w) = (ad[0], ad[1], bd[1], ad[2], ad[3]);
        let plane = h * w;
        let (a, b) = (self.data(), rhs.data());
        let mut data = vec![0.0f32; nb * (c1 + c2) * plane];
        for n in 0..nb {
            let out_base = n * (c1 + c2) * plane;
            data[out_base..out_base + c1 * plane]
                .copy_from_slice(&a[n * c1 * plane..(n + 1) * c1 * plane]);
            data[out_base + c1 * plane..out_base + (c1 + c2) * plane]
                .copy_from_slice(&b[n * c2 * plane..(n + 1) * c2 * plane]);
        }
        let mut out = Tensor::from_op(vec![nb, c1 + c2, h, w], data);
        finish("concat_ch", &out)?;
        record(&mut out, &[self, rhs], |ids| {
            Box::new(move |g, sink| {
                if let Some(aid) = ids[0] {
                    let da = sink.buf(aid);
                    for n in 0..nb {
                        let out_base = n * (c1 + c2) * plane;
                        for i in 0..c1 * plane {
                            da[n * c1 * plane + i] += g[out_base + i];
                        }
                    }
                }
                if let Some(bid) = ids[1] {
                    let db = sink.buf(bid);
                    for n in 0..nb {
                        let out_base = n * (c1 + c2) * plane + c1 * plane;
                        for i in 0..c2 * plane {
                            db[n * c2 * plane + i] += g[out_base + i];
                        }
                    }
                }
            })
        });
        Ok(out)
    }

    /// Row lookup into an embedding table `(V, D)`; gradients scatter back.
    pub fn embed(&self, ids: &[u32]) -> Result<Tensor> {
        let td = self.dims();
        if td.len() != 2 {
            return Err(shape_err("embed", format!("table must be (V,D), got {td:?}")));
        }
        let (v, d) = (td[0], td[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::Config(format!("embedding id {bad} out of range (vocabulary {v})")));
        }
        let table = self.data();
        let mut data = vec![0.0f32; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&table[id as usize * d..(id as usize + 1) * d]);
        }
        let mut out = Tensor::from_op(vec![ids.len(), d], data);
        finish("embed", &out)?;
        let ids_owned: Vec<u32> = ids.to_vec();
        record(&mut out, &[self], |pids| {
            Box::new(move |g, sink| {
                if let Some(tid) = pids[0] {
                    let dt = sink.buf(tid);
                    for (r, &id) in ids_owned.iter().enumerate() {
                        for j in 0..d {
                            dt[id as usize * d + j] += g[r * d + j];
                        }
                    }
                }
            })
        });
        Ok(out)
    }

    /// Adds a per-channel bias `(C)` to `(N, C, H, W)`.
    pub fn add_chan_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let xd = self.dims();
        if xd.len() != 4 || bias.dims() != [xd[1]] {
            return Err(shape_err(
                "add_chan_bias",
                format!("input dims {xd:?} vs bias dims {:?}", bias.dims()),
            ));
        }
        let (nb, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let plane = h * w;
        let x = self.data();
        let b = bias.data();
        let mut data = vec![0.0f32; self.len()];
        for n in 0..nb {
            for ch in 0..c {
                let base = (n * c + ch) * plane;
                let bv = b[ch];
                for i in 0..plane {
                    data[base + i] = x[base + i] + bv;
                }
            }
        }
        let mut out = Tensor::from_op(xd.to_vec(), data);
        finish("add_chan_bias", &out)?;
        record(&mut out, &[self, bias], |ids| {
            Box::new(move |g, sink| {
                if let Some(a) = ids[0] {
                    let dx = sink.buf(a);
                    for i in 0..g.len() {
                        dx[i] += g[i];
                    }
                }
                if let Some(bid) = ids[1] {
                    let db = sink.buf(bid);
                    for n in 0..nb {
                        for ch in 0..c {
                            let base = (n * c + ch) * plane;
                            let mut acc = 0.0f32;
                            for i in 0..plane {
                                acc += g[base + i];
                            }
                            db[ch] += acc;
                        }
                    }
                }
            })
        });
        Ok(out)
    }

    /// Adds a per-feature bias `(D)` to `(N, D)`.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let xd = self.dims();
        if xd.len() != 2 || bias.dims() != [xd[1]] {
            return Err(shape_err(
                "add_row_bias",
                format!("input dims {xd:?} vs bias dims {:?}", bias.dims()),
            ));
        }
        let (n, d) = (xd[0], xd[1]);
        let x = self.data();
        let b = bias.data();
        let data = (0..n * d).map(|i| x[i] + b[i % d]).collect();
        let mut out = Tensor::from_op(xd.to_vec(), data);
        finish("add_row_bias", &out)?;
        record(&mut out, &[self, bias], |ids| {
            Box::new(move |g, sink| {
                if let Some(a) = ids[0] {
                    let dx = sink.buf(a);
                    for i in 0..g.len() {
                        dx[i] += g[i];
                    }
                }
                if let Some(bid) = ids[1] {
                    let db = sink.buf(bid);
                    for r in 0..n {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
            })
        });
        Ok(out)
    }
}

/// Flat source index for every flat destination index of a permutation.
fn permutation_map(dims: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = dims.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * dims[i + 1];
    }
    let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    let n = numel(dims);
    let mut map = vec![0usize; n];
    let mut idx = vec![0usize; rank];
    for slot in map.iter_mut() {
        let mut src = 0;
        for (k, &a) in axes.iter().enumerate() {
            src += idx[k] * in_strides[a];
        }
        *slot = src;
        // odometer increment over out_dims
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < out_dims[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    map
}

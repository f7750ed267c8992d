//! Convolution, normalization and loss operations for `C×H×W` feature maps.

use crate::error::{Error, Result};
use crate::numerics::ops::sigmoid;
use crate::numerics::tensor::{gemm_nn, gemm_nt, gemm_tn};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

fn im2col(x: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = geo.out_hw();
    let k = geo.kernel;
    let mut cols = vec![0.0; geo.col_rows() * ho * wo];
    for c in 0..geo.channels {
        let plane = &x[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for ox in 0..wo {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < geo.width as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = geo.out_hw();
    let k = geo.kernel;
    let mut x = vec![0.0; geo.channels * geo.height * geo.width];
    for c in 0..geo.channels {
        let plane = &mut x[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < geo.width as isize {
                            plane[iy as usize * geo.width + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Tape {
    /// 2-D convolution. `x`: C×H×W, `weight`: O×C×k×k, `bias`: O.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (value, geo, cols) = self.with_values(&[x, weight, bias], |v| {
            let (xs, ws) = (v[0].shape(), v[1].shape());
            if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
                return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}")));
            }
            if v[2].numel() != ws[0] {
                return Err(Error::shape("conv2d", "bias length != output channels"));
            }
            if xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[2] || stride == 0 {
                return Err(Error::shape("conv2d", "kernel larger than padded input"));
            }
            let geo = ConvGeometry {
                channels: xs[0],
                height: xs[1],
                width: xs[2],
                kernel: ws[2],
                stride,
                pad,
            };
            let (ho, wo) = geo.out_hw();
            let out_c = ws[0];
            let cols = im2col(v[0].data(), &geo);
            let mut out = vec![0.0; out_c * ho * wo];
            for (o, chunk) in out.chunks_mut(ho * wo).enumerate() {
                chunk.fill(v[2].data()[o]);
            }
            gemm_nn(out_c, geo.col_rows(), ho * wo, v[1].data(), &cols, &mut out);
            Ok((Tensor::new(&[out_c, ho, wo], out)?, geo, cols))
        })?;
        self.push_op(
            "conv2d",
            &[x, weight, bias],
            value,
            Some(Box::new(move |g, v, _| {
                let (ho, wo) = geo.out_hw();
                let p = ho * wo;
                let out_c = v[1].shape()[0];
                let kk = geo.col_rows();
                let mut gw = vec![0.0; out_c * kk];
                gemm_nt(out_c, p, kk, g.data(), &cols, &mut gw);
                let mut gcols = vec![0.0; kk * p];
                gemm_tn(kk, out_c, p, v[1].data(), g.data(), &mut gcols);
                let gx = col2im(&gcols, &geo);
                let gb: Vec<f64> = g.data().chunks(p).map(|c| c.iter().sum()).collect();
                vec![
                    Some(Tensor::new(v[0].shape(), gx).expect("shape")),
                    Some(Tensor::new(v[1].shape(), gw).expect("shape")),
                    Some(Tensor::new(v[2].shape(), gb).expect("shape")),
                ]
            })),
        )
    }

    /// Transposed convolution with kernel 2 and stride 2 (exact 2× upsampling).
    /// `x`: C×H×W, `weight`: C×O×2×2, `bias`: O.
    pub fn conv_transpose2x2(&self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let value = self.with_values(&[x, weight, bias], |v| {
            let (xs, ws) = (v[0].shape(), v[1].shape());
            if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] || ws[2] != 2 || ws[3] != 2 {
                return Err(Error::shape(
                    "conv_transpose2x2",
                    format!("input {xs:?}, weight {ws:?}"),
                ));
            }
            if v[2].numel() != ws[1] {
                return Err(Error::shape("conv_transpose2x2", "bias length != output channels"));
            }
            let (c, h, w, o) = (xs[0], xs[1], xs[2], ws[1]);
            // cols (O·4 × HW) = Wᵀ (O·4 × C) · x (C × HW)
            let mut cols = vec![0.0; o * 4 * h * w];
            gemm_tn(o * 4, c, h * w, v[1].data(), v[0].data(), &mut cols);
            let mut out = vec![0.0; o * 4 * h * w];
            for oc in 0..o {
                let b = v[2].data()[oc];
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    let src = &cols[(oc * 4 + d) * h * w..(oc * 4 + d + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            out[(oc * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx] =
                                src[y * w + xx] + b;
                        }
                    }
                }
            }
            Tensor::new(&[o, 2 * h, 2 * w], out)
        })?;
        self.push_op(
            "conv_transpose2x2",
            &[x, weight, bias],
            value,
            Some(Box::new(|g, v, _| {
                let (c, h, w) = (v[0].shape()[0], v[0].shape()[1], v[0].shape()[2]);
                let o = v[1].shape()[1];
                let mut gcols = vec![0.0; o * 4 * h * w];
                let mut gb = vec![0.0; o];
                for oc in 0..o {
                    for d in 0..4 {
                        let (dy, dx) = (d / 2, d % 2);
                        let dst = &mut gcols[(oc * 4 + d) * h * w..(oc * 4 + d + 1) * h * w];
                        for y in 0..h {
                            for xx in 0..w {
                                let gv = g.data()[(oc * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx];
                                dst[y * w + xx] = gv;
                                gb[oc] += gv;
                            }
                        }
                    }
                }
                let mut gx = vec![0.0; c * h * w];
                gemm_nn(c, o * 4, h * w, v[1].data(), &gcols, &mut gx);
                let mut gw = vec![0.0; c * o * 4];
                gemm_nt(c, h * w, o * 4, v[0].data(), &gcols, &mut gw);
                vec![
                    Some(Tensor::new(v[0].shape(), gx).expect("shape")),
                    Some(Tensor::new(v[1].shape(), gw).expect("shape")),
                    Some(Tensor::new(v[2].shape(), gb).expect("shape")),
                ]
            })),
        )
    }

    /// Group normalization over a C×H×W map followed by a per-channel affine.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (value, xhat, inv_std) = self.with_values(&[x, gamma, beta], |v| {
            let xs = v[0].shape();
            if xs.len() != 3 || groups == 0 || xs[0] % groups != 0 {
                return Err(Error::shape(
                    "group_norm",
                    format!("{xs:?} with {groups} groups"),
                ));
            }
            if v[1].numel() != xs[0] || v[2].numel() != xs[0] {
                return Err(Error::shape("group_norm", "affine length != channels"));
            }
            let hw = xs[1] * xs[2];
            let m = xs[0] / groups * hw;
            let mut xhat = vec![0.0; v[0].numel()];
            let mut inv_std = vec![0.0; groups];
            let mut out = vec![0.0; v[0].numel()];
            for gi in 0..groups {
                let seg = &v[0].data()[gi * m..(gi + 1) * m];
                let mean = seg.iter().sum::<f64>() / m as f64;
                let var = seg.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / m as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[gi] = is;
                for (k, &a) in seg.iter().enumerate() {
                    let idx = gi * m + k;
                    let c = idx / hw;
                    xhat[idx] = (a - mean) * is;
                    out[idx] = v[1].data()[c] * xhat[idx] + v[2].data()[c];
                }
            }
            Ok((Tensor::new(xs, out)?, xhat, inv_std))
        })?;
        self.push_op(
            "group_norm",
            &[x, gamma, beta],
            value,
            Some(Box::new(move |g, v, _| {
                let xs = v[0].shape();
                let (ch, hw) = (xs[0], xs[1] * xs[2]);
                let m = ch / groups * hw;
                let mut gx = vec![0.0; v[0].numel()];
                let mut gg = vec![0.0; ch];
                let mut gbeta = vec![0.0; ch];
                for (idx, &gv) in g.data().iter().enumerate() {
                    let c = idx / hw;
                    gg[c] += gv * xhat[idx];
                    gbeta[c] += gv;
                }
                for gi in 0..groups {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for idx in gi * m..(gi + 1) * m {
                        let gxh = g.data()[idx] * v[1].data()[idx / hw];
                        s1 += gxh;
                        s2 += gxh * xhat[idx];
                    }
                    let mf = m as f64;
                    for idx in gi * m..(gi + 1) * m {
                        let gxh = g.data()[idx] * v[1].data()[idx / hw];
                        gx[idx] = inv_std[gi] / mf * (mf * gxh - s1 - xhat[idx] * s2);
                    }
                }
                vec![
                    Some(Tensor::new(xs, gx).expect("shape")),
                    Some(Tensor::new(v[1].shape(), gg).expect("shape")),
                    Some(Tensor::new(v[2].shape(), gbeta).expect("shape")),
                ]
            })),
        )
    }

    /// Softmax over the leading (class) axis of a classes×P matrix.
    pub fn softmax_classes(&self, logits: Var) -> Result<Var> {
        let value = self.with_values(&[logits], |v| softmax_classes(v[0]))?;
        self.push_op(
            "softmax_classes",
            &[logits],
            value,
            Some(Box::new(|g, _, p| {
                let (c, n) = (p.rows(), p.cols());
                let mut gx = vec![0.0; c * n];
                for k in 0..n {
                    let dot: f64 = (0..c).map(|j| g.data()[j * n + k] * p.data()[j * n + k]).sum();
                    for j in 0..c {
                        gx[j * n + k] = p.data()[j * n + k] * (g.data()[j * n + k] - dot);
                    }
                }
                vec![Some(Tensor::new(p.shape(), gx).expect("shape"))]
            })),
        )
    }

    /// Mean softmax cross-entropy over the columns of a classes×P logit matrix.
    pub fn cross_entropy(&self, logits: Var, labels: &[u8]) -> Result<Var> {
        let (value, probs) = self.with_values(&[logits], |v| {
            check_labels("cross_entropy", v[0], labels)?;
            let probs = softmax_classes(v[0])?;
            let n = v[0].cols();
            let mut loss = 0.0;
            for (k, &y) in labels.iter().enumerate() {
                loss -= log_softmax_at(v[0], y as usize, k);
            }
            Ok::<_, Error>((Tensor::scalar(loss / n as f64), probs))
        })?;
        let labels = labels.to_vec();
        self.push_op(
            "cross_entropy",
            &[logits],
            value,
            Some(Box::new(move |g, _, _| {
                let n = probs.cols();
                let s = g.item() / n as f64;
                let mut gx = probs.scale(s);
                for (k, &y) in labels.iter().enumerate() {
                    gx.data_mut()[y as usize * n + k] -= s;
                }
                vec![Some(gx)]
            })),
        )
    }

    /// Mean one-vs-rest binary cross-entropy with logits against one-hot labels.
    pub fn binary_cross_entropy(&self, logits: Var, labels: &[u8]) -> Result<Var> {
        let value = self.with_values(&[logits], |v| {
            check_labels("binary_cross_entropy", v[0], labels)?;
            let (c, n) = (v[0].rows(), v[0].cols());
            let mut loss = 0.0;
            for j in 0..c {
                for (k, &y) in labels.iter().enumerate() {
                    let x = v[0].data()[j * n + k];
                    let t = if y as usize == j { 1.0 } else { 0.0 };
                    loss += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
                }
            }
            Ok::<_, Error>(Tensor::scalar(loss / (c * n) as f64))
        })?;
        let labels = labels.to_vec();
        self.push_op(
            "binary_cross_entropy",
            &[logits],
            value,
            Some(Box::new(move |g, v, _| {
                let (c, n) = (v[0].rows(), v[0].cols());
                let s = g.item() / (c * n) as f64;
                let mut gx = v[0].map(|x| sigmoid(x) * s);
                for (k, &y) in labels.iter().enumerate() {
                    gx.data_mut()[y as usize * n + k] -= s;
                }
                vec![Some(gx)]
            })),
        )
    }

    /// `1 − mean_c Dice_c` over classes `1..C` of a classes×P probability matrix,
    /// with `Dice_c = (2 Σ p y + s) / (Σ p + Σ y + s)`.
    pub fn soft_dice_loss(&self, probs: Var, labels: &[u8], smooth: f64) -> Result<Var> {
        let (value, stats) = self.with_values(&[probs], |v| {
            check_labels("soft_dice_loss", v[0], labels)?;
            let c = v[0].rows();
            if c < 2 {
                return Err(Error::invalid("soft dice needs at least one foreground class"));
            }
            let stats = dice_stats(v[0], labels, smooth);
            let mean: f64 = stats.iter().map(|s| s.dice()).sum::<f64>() / (c - 1) as f64;
            Ok((Tensor::scalar(1.0 - mean), stats))
        })?;
        let labels = labels.to_vec();
        self.push_op(
            "soft_dice_loss",
            &[probs],
            value,
            Some(Box::new(move |g, v, _| {
                let (c, n) = (v[0].rows(), v[0].cols());
                let f = (c - 1) as f64;
                let mut gx = Tensor::zeros(v[0].shape());
                for (ci, st) in stats.iter().enumerate() {
                    let cls = ci + 1;
                    let num = 2.0 * st.intersection + smooth;
                    let den = st.pred + st.truth + smooth;
                    for (k, &y) in labels.iter().enumerate() {
                        let yk = if y as usize == cls { 1.0 } else { 0.0 };
                        let dd = (2.0 * yk * den - num) / (den * den);
                        gx.data_mut()[cls * n + k] = -g.item() * dd / f;
                    }
                }
                vec![Some(gx)]
            })),
        )
    }
}

struct DiceStats {
    intersection: f64,
    pred: f64,
    truth: f64,
    smooth: f64,
}

impl DiceStats {
    fn dice(&self) -> f64 {
        (2.0 * self.intersection + self.smooth) / (self.pred + self.truth + self.smooth)
    }
}

fn dice_stats(probs: &Tensor, labels: &[u8], smooth: f64) -> Vec<DiceStats> {
    let (c, n) = (probs.rows(), probs.cols());
    (1..c)
        .map(|cls| {
            let row = &probs.data()[cls * n..(cls + 1) * n];
            let mut st = DiceStats {
                intersection: 0.0,
                pred: 0.0,
                truth: 0.0,
                smooth,
            };
            for (p, &y) in row.iter().zip(labels) {
                st.pred += p;
                if y as usize == cls {
                    st.intersection += p;
                    st.truth += 1.0;
                }
            }
            st
        })
        .collect()
}

fn check_labels(op: &'static str, logits: &Tensor, labels: &[u8]) -> Result<()> {
    if !logits.is_matrix() || logits.cols() != labels.len() {
        return Err(Error::shape(
            op,
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= logits.rows()) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            logits.rows()
        )));
    }
    Ok(())
}

fn log_softmax_at(logits: &Tensor, class: usize, col: usize) -> f64 {
    let (c, n) = (logits.rows(), logits.cols());
    let max = (0..c).map(|j| logits.data()[j * n + col]).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + (0..c).map(|j| (logits.data()[j * n + col] - max).exp()).sum::<f64>().ln();
    logits.data()[class * n + col] - lse
}

pub fn softmax_classes(logits: &Tensor) -> Result<Tensor> {
    if !logits.is_matrix() {
        return Err(Error::shape("softmax_classes", format!("{:?}", logits.shape())));
    }
    let (c, n) = (logits.rows(), logits.cols());
    let mut out = vec![0.0; c * n];
    for k in 0..n {
        let max = (0..c).map(|j| logits.data()[j * n + k]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for j in 0..c {
            let e = (logits.data()[j * n + k] - max).exp();
            out[j * n + k] = e;
            s += e;
        }
        for j in 0..c {
            out[j * n + k] /= s;
        }
    }
    Tensor::new(logits.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[o, ho, wo]);
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.data()[(ic * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out.data_mut()[(oc * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    fn seq(shape: &[usize], f: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i as f64 + 1.0) * f).sin()).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_loop() {
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let tape = Tape::new();
            let x = seq(&[2, 6, 5], 0.7);
            let w = seq(&[3, 2, 3, 3], 1.3);
            let b = seq(&[3], 0.4);
            let want = direct_conv(&x, &w, &b, stride, pad);
            let (xv, wv, bv) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
            let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
            assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_places_each_input_in_its_block() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::new(&[1], vec![0.5]).unwrap());
        let y = tape.conv_transpose2x2(x, w, b).unwrap();
        assert_eq!(tape.shape(y), vec![1, 2, 4]);
        assert_eq!(
            tape.value(y).data(),
            &[1.5, 2.5, 2.5, 4.5, 3.5, 4.5, 6.5, 8.5]
        );
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let tape = Tape::new();
        let x = tape.leaf(seq(&[4, 3, 3], 2.1));
        let g = tape.leaf(Tensor::ones(&[4]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.group_norm(x, g, b, 2, 1e-5).unwrap();
        let v = tape.value(y);
        for grp in v.data().chunks(18) {
            let m: f64 = grp.iter().sum::<f64>() / 18.0;
            let var: f64 = grp.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn uniform_logits_give_ln2_cross_entropy() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 5]));
        let ce = tape.cross_entropy(logits, &[0, 1, 1, 0, 1]).unwrap();
        assert!((tape.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.cross_entropy(logits, &[0, 2]).is_err());
    }
}

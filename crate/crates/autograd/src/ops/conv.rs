use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn depthwise_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (t_len, c) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[0];
    let pad = (k / 2) as isize;
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for t in 0..t_len {
        for kk in 0..k {
            let src = t as isize + kk as isize - pad;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let s = src as usize;
            for ch in 0..c {
                let gv = gd[t * c + ch];
                dx[s * c + ch] = dx[s * c + ch] + gv * wd[kk * c + ch];
                dw[kk * c + ch] = dw[kk * c + ch] + gv * xd[s * c + ch];
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dw conv dx"),
        Tensor::new(w.shape().to_vec(), dw).expect("dw conv dw"),
    )
}

struct Conv2dDims {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv2d_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: (usize, usize), pad: (usize, usize)) -> Option<Conv2dDims> {
    if x.ndim() != 3 || w.ndim() != 4 || x.shape()[2] != w.shape()[3] || stride.0 == 0 || stride.1 == 0 {
        return None;
    }
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if h + 2 * pad.0 < kh || wd + 2 * pad.1 < kw {
        return None;
    }
    let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let ow = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    Some(Conv2dDims { h, w: wd, cin, cout, kh, kw, oh, ow })
}

/// Visits every (output index, input index, weight index) triple with a valid
/// input position.
fn conv2d_for_each(d: &Conv2dDims, stride: (usize, usize), pad: (usize, usize), mut f: impl FnMut(usize, usize, usize)) {
    for i in 0..d.oh {
        for j in 0..d.ow {
            for o in 0..d.cout {
                let out_idx = (i * d.ow + j) * d.cout + o;
                for a in 0..d.kh {
                    let y = (i * stride.0 + a) as isize - pad.0 as isize;
                    if y < 0 || y >= d.h as isize {
                        continue;
                    }
                    for b in 0..d.kw {
                        let x = (j * stride.1 + b) as isize - pad.1 as isize;
                        if x < 0 || x >= d.w as isize {
                            continue;
                        }
                        let in_base = (y as usize * d.w + x as usize) * d.cin;
                        let w_base = ((o * d.kh + a) * d.kw + b) * d.cin;
                        for c in 0..d.cin {
                            f(out_idx, in_base + c, w_base + c);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let d = conv2d_dims(x, w, stride, pad).expect("conv2d dims validated in forward");
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    conv2d_for_each(&d, stride, pad, |o, i, k| {
        dx[i] = dx[i] + gd[o] * wd[k];
        dw[k] = dw[k] + gd[o] * xd[i];
    });
    (
        Tensor::new(x.shape().to_vec(), dx).expect("conv2d dx"),
        Tensor::new(w.shape().to_vec(), dw).expect("conv2d dw"),
    )
}

impl<T: Scalar> Graph<T> {
    /// Depthwise 1-D convolution of `x[frames, c]` with `w[k, c]`, odd `k`,
    /// zero "same" padding so the frame count is preserved.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ndim() != 2 || wv.ndim() != 2 || xv.shape()[1] != wv.shape()[1] || wv.shape()[0] % 2 == 0 {
            return Err(Error::ShapeMismatch {
                kind: "depthwise_conv1d",
                shapes: vec![xv.shape().to_vec(), wv.shape().to_vec()],
            });
        }
        let (t_len, c) = (xv.shape()[0], xv.shape()[1]);
        let k = wv.shape()[0];
        let pad = (k / 2) as isize;
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![T::zero(); t_len * c];
        for t in 0..t_len {
            for kk in 0..k {
                let src = t as isize + kk as isize - pad;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let s = src as usize;
                for ch in 0..c {
                    out[t * c + ch] = out[t * c + ch] + wd[kk * c + ch] * xd[s * c + ch];
                }
            }
        }
        let out = Tensor::new(vec![t_len, c], out)?;
        self.push("depthwise_conv1d", out, Op::DepthwiseConv1d { x, w })
    }

    /// Strided 2-D convolution, channels-last: `x[h, w, c_in]`,
    /// `weight[c_out, kh, kw, c_in]` -> `[h', w', c_out]` with zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weight));
        let Some(d) = conv2d_dims(xv, wv, stride, pad) else {
            return Err(Error::ShapeMismatch { kind: "conv2d", shapes: vec![xv.shape().to_vec(), wv.shape().to_vec()] });
        };
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![T::zero(); d.oh * d.ow * d.cout];
        conv2d_for_each(&d, stride, pad, |o, i, k| out[o] = out[o] + wd[k] * xd[i]);
        let out = Tensor::new(vec![d.oh, d.ow, d.cout], out)?;
        self.push("conv2d", out, Op::Conv2d { x, w: weight, stride, pad })
    }
}

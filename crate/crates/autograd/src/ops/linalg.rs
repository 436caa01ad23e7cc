use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `a[m,k] @ b[k,n]`.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let src = x.data();
    let mut data = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data).expect("transpose shape")
}

pub(crate) fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let bt = transpose(b);
    let at = transpose(a);
    let da = matmul_raw(g.data(), bt.data(), m, n, k);
    let db = matmul_raw(at.data(), g.data(), k, m, n);
    (
        Tensor::new(vec![m, k], da).expect("matmul da"),
        Tensor::new(vec![k, n], db).expect("matmul db"),
    )
}

impl<T: Scalar> Graph<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_named("matmul", a, b)
    }

    /// 1-D pointwise convolution over a `[frames, c_in]` sequence with
    /// `w[c_in, c_out]`; a per-frame matmul.
    pub fn pointwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_named("pointwise_conv1d", x, w)
    }

    fn matmul_named(&mut self, kind: &'static str, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::ShapeMismatch { kind, shapes: vec![av.shape().to_vec(), bv.shape().to_vec()] });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let data = matmul_raw(av.data(), bv.data(), m, k, n);
        self.push(kind, Tensor::new(vec![m, n], data)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 {
            return Err(Error::ShapeMismatch { kind: "transpose", shapes: vec![xv.shape().to_vec()] });
        }
        let out = transpose(xv);
        self.push("transpose", out, Op::Transpose(x))
    }
}

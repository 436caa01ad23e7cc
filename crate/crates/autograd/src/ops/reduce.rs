use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::{logsumexp, Scalar};
use crate::tensor::Tensor;

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.rows().zip(g.rows()) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::new(y.shape().to_vec(), out).expect("softmax grad")
}

pub(crate) fn log_softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.rows().zip(g.rows()) {
        let s: T = gr.iter().copied().sum();
        out.extend(yr.iter().zip(gr).map(|(&a, &b)| b - a.exp() * s));
    }
    Tensor::new(y.shape().to_vec(), out).expect("log_softmax grad")
}

pub(crate) fn logsumexp_backward<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let mut out = Vec::with_capacity(x.len());
    for ((xr, &lse), &gv) in x.rows().zip(y.data()).zip(g.data()) {
        out.extend(xr.iter().map(|&v| gv * (v - lse).exp()));
    }
    Tensor::new(x.shape().to_vec(), out).expect("logsumexp grad")
}

pub(crate) fn sum_axis0_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let n = g.len();
    let data = (0..x.len()).map(|i| g.data()[i % n]).collect();
    Tensor::new(x.shape().to_vec(), data).expect("sum_axis0 grad")
}

fn require_last_axis<T: Scalar>(kind: &'static str, x: &Tensor<T>) -> Result<()> {
    if x.ndim() == 0 || x.last_dim() == 0 {
        return Err(Error::ShapeMismatch { kind, shapes: vec![x.shape().to_vec()] });
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        require_last_axis("softmax", xv)?;
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.rows() {
            let lse = logsumexp(row);
            data.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("softmax", out, Op::Softmax(x))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        require_last_axis("log_softmax", xv)?;
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.rows() {
            let lse = logsumexp(row);
            data.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("log_softmax", out, Op::LogSoftmax(x))
    }

    /// `ln Σ exp` over the last axis; the axis is removed from the shape.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        require_last_axis("logsumexp", xv)?;
        let data: Vec<T> = xv.rows().map(logsumexp).collect();
        let shape = xv.shape()[..xv.ndim() - 1].to_vec();
        let out = Tensor::new(shape, data)?;
        self.push("logsumexp", out, Op::LogSumExp(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::ShapeMismatch { kind: "mean", shapes: vec![xv.shape().to_vec()] });
        }
        let s: T = xv.data().iter().copied().sum();
        let m = s / T::lit(xv.len() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x))
    }

    /// Sum over the first axis: `[n, ...] -> [...]`.
    pub fn sum_axis0(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() == 0 {
            return Err(Error::ShapeMismatch { kind: "sum_axis0", shapes: vec![vec![]] });
        }
        let shape = xv.shape()[1..].to_vec();
        let inner: usize = shape.iter().product();
        let mut data = vec![T::zero(); inner];
        for (i, &v) in xv.data().iter().enumerate() {
            data[i % inner] = data[i % inner] + v;
        }
        self.push("sum_axis0", Tensor::new(shape, data)?, Op::SumAxis0(x))
    }
}

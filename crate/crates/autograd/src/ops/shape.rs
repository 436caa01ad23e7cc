use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn embedding_backward<T: Scalar>(table: &Tensor<T>, ids: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let d = table.last_dim();
    let mut out = Tensor::zeros(table.shape().to_vec());
    let od = out.data_mut();
    for (r, &id) in ids.iter().enumerate() {
        for j in 0..d {
            od[id * d + j] = od[id * d + j] + g.data()[r * d + j];
        }
    }
    out
}

pub(crate) fn concat_backward<T: Scalar>(shapes: &[&[usize]], axis: usize, g: &Tensor<T>) -> Vec<Tensor<T>> {
    let (outer, total, inner) = split_at_axis(g.shape(), axis);
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let len = s[axis];
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * total + offset) * inner;
                data.extend_from_slice(&g.data()[base..base + len * inner]);
            }
            offset += len;
            Tensor::new(s.to_vec(), data).expect("concat grad")
        })
        .collect()
}

pub(crate) fn slice_backward<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, g: &Tensor<T>) -> Tensor<T> {
    let (outer, total, inner) = split_at_axis(x.shape(), axis);
    let len = g.shape()[axis];
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        let dst = (o * total + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    Tensor::new(x.shape().to_vec(), out).expect("slice grad")
}

impl<T: Scalar> Graph<T> {
    /// Gathers rows of `table[vocab, d]` -> `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(Error::ShapeMismatch { kind: "embedding", shapes: vec![tv.shape().to_vec()] });
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidAttr { kind: "embedding", detail: format!("id {bad} >= vocab {v}") });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push("embedding", out, Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|&v| self.value(v).shape().to_vec()).collect();
        let bad = || Error::ShapeMismatch { kind: "concat", shapes: shapes.clone() };
        let first = shapes.first().ok_or_else(bad)?;
        if axis >= first.len() {
            return Err(bad());
        }
        for s in &shapes {
            if s.len() != first.len() || s.iter().zip(first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(bad());
            }
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let (outer, _, inner) = split_at_axis(first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, s) in inputs.iter().zip(&shapes) {
                let chunk = s[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() || start >= end || end > xv.shape()[axis] {
            return Err(Error::ShapeMismatch { kind: "slice", shapes: vec![xv.shape().to_vec(), vec![axis, start, end]] });
        }
        let (outer, total, inner) = split_at_axis(xv.shape(), axis);
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        self.push("slice", out, Op::Slice { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x))
    }
}

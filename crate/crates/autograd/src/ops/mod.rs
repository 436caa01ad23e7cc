//! Forward ops (as `Graph` methods) and their backward rules.

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod reduce;
mod shape;
mod stochastic;

pub use norm::{BatchStats, BATCH_NORM_EPS, LAYER_NORM_EPS};

use crate::graph::{Graph, Op};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradients w.r.t. the inputs of node `i`, in `Op::inputs` order.
pub(crate) fn backward<T: Scalar>(g: &Graph<T>, i: usize, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
    let node = &g.nodes[i];
    let out = &node.value;
    let val = |v: &crate::Var| &g.nodes[v.0].value;
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (da, db) = linalg::matmul_backward(val(a), val(b), grad);
            vec![Some(da), Some(db)]
        }
        Op::Transpose(_) => vec![Some(linalg::transpose(grad))],
        Op::Add(_, b) => {
            let (da, db) = elementwise::add_backward(val(b), grad, T::one());
            vec![Some(da), Some(db)]
        }
        Op::Sub(_, b) => {
            let (da, db) = elementwise::add_backward(val(b), grad, -T::one());
            vec![Some(da), Some(db)]
        }
        Op::Mul(a, b) => {
            let (da, db) = elementwise::mul_backward(val(a), val(b), grad);
            vec![Some(da), Some(db)]
        }
        Op::Scale(_, c) => vec![Some(grad.map(|x| x * *c))],
        Op::Unary(x, kind) => vec![Some(elementwise::unary_backward(*kind, val(x), out, grad))],
        Op::Glu(x) => vec![Some(elementwise::glu_backward(val(x), grad))],
        Op::Softmax(_) => vec![Some(reduce::softmax_backward(out, grad))],
        Op::LogSoftmax(_) => vec![Some(reduce::log_softmax_backward(out, grad))],
        Op::LogSumExp(x) => vec![Some(reduce::logsumexp_backward(val(x), out, grad))],
        Op::LayerNorm { inv_std, .. } => vec![Some(norm::layer_norm_backward(out, inv_std, grad))],
        Op::BatchNorm { inv_std, .. } => vec![Some(norm::batch_norm_backward(out, inv_std, grad))],
        Op::DepthwiseConv1d { x, w } => {
            let (dx, dw) = conv::depthwise_backward(val(x), val(w), grad);
            vec![Some(dx), Some(dw)]
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (dx, dw) = conv::conv2d_backward(val(x), val(w), *stride, *pad, grad);
            vec![Some(dx), Some(dw)]
        }
        Op::Dropout { mask, .. } => {
            let data = grad.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
            vec![Some(Tensor::new(grad.shape().to_vec(), data).expect("dropout grad shape"))]
        }
        Op::Embedding { table, ids } => vec![Some(shape::embedding_backward(val(table), ids, grad))],
        Op::Concat { inputs, axis } => {
            let shapes: Vec<&[usize]> = inputs.iter().map(|v| val(v).shape()).collect();
            shape::concat_backward(&shapes, *axis, grad).into_iter().map(Some).collect()
        }
        Op::Slice { x, axis, start } => vec![Some(shape::slice_backward(val(x), *axis, *start, grad))],
        Op::Reshape(x) => vec![Some(grad.clone().reshape(val(x).shape().to_vec()).expect("reshape grad"))],
        Op::Sum(x) => vec![Some(Tensor::full(val(x).shape().to_vec(), grad.data()[0]))],
        Op::Mean(x) => {
            let n = T::lit(val(x).len() as f64);
            vec![Some(Tensor::full(val(x).shape().to_vec(), grad.data()[0] / n))]
        }
        Op::SumAxis0(x) => vec![Some(reduce::sum_axis0_backward(val(x), grad))],
        Op::Reparameterize { eps, .. } => {
            let dsigma = grad.data().iter().zip(eps).map(|(&g, &e)| g * e).collect();
            vec![
                Some(grad.clone()),
                Some(Tensor::new(grad.shape().to_vec(), dsigma).expect("reparam grad shape")),
            ]
        }
        Op::Custom { inputs, rule } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(val).collect();
            rule.backward(&ins, out, grad)
        }
    }
}

#[cfg(test)]
mod tests;

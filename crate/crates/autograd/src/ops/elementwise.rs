use crate::error::{Error, Result};
use crate::graph::{Graph, Op, UnaryKind, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `small` broadcasts against `big` when its shape is a suffix of `big`'s,
/// i.e. only leading (batch) axes are repeated.
fn broadcasts<T: Scalar>(big: &Tensor<T>, small: &Tensor<T>) -> bool {
    big.shape().ends_with(small.shape())
}

fn reduce_to<T: Scalar>(g: &Tensor<T>, target: &Tensor<T>, f: impl Fn(usize, T) -> T) -> Tensor<T> {
    let nb = target.len();
    let mut out = vec![T::zero(); nb];
    for (i, &gv) in g.data().iter().enumerate() {
        let j = i % nb;
        out[j] = out[j] + f(i, gv);
    }
    Tensor::new(target.shape().to_vec(), out).expect("reduce shape")
}

pub(crate) fn add_backward<T: Scalar>(b: &Tensor<T>, g: &Tensor<T>, sign: T) -> (Tensor<T>, Tensor<T>) {
    let db = if b.len() == g.len() {
        g.map(|x| x * sign)
    } else {
        reduce_to(g, b, |_, x| x * sign)
    };
    (g.clone(), db)
}

pub(crate) fn mul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let nb = b.len();
    let bd = b.data();
    let da: Vec<T> = g.data().iter().enumerate().map(|(i, &gv)| gv * bd[i % nb]).collect();
    let ad = a.data();
    let db = reduce_to(g, b, |i, gv| gv * ad[i]);
    (Tensor::new(a.shape().to_vec(), da).expect("mul da"), db)
}

pub(crate) fn unary_backward<T: Scalar>(kind: UnaryKind, x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let one = T::one();
    let two = T::lit(2.0);
    let d: Vec<T> = x
        .data()
        .iter()
        .zip(y.data())
        .zip(g.data())
        .map(|((&x, &y), &g)| {
            let dydx = match kind {
                UnaryKind::Sigmoid => y * (one - y),
                UnaryKind::TwoSigmoid => y * (one - y / two),
                UnaryKind::Swish => {
                    let s = x.sigmoid();
                    s + x * s * (one - s)
                }
                UnaryKind::Relu => {
                    if x > T::zero() {
                        one
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Exp => y,
                UnaryKind::Ln => one / x,
                UnaryKind::Tanh => one - y * y,
            };
            g * dydx
        })
        .collect();
    Tensor::new(x.shape().to_vec(), d).expect("unary grad shape")
}

pub(crate) fn glu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let d = x.last_dim() / 2;
    let mut out = vec![T::zero(); x.len()];
    for (r, (xr, gr)) in x.rows().zip(g.rows()).enumerate() {
        let o = &mut out[r * 2 * d..(r + 1) * 2 * d];
        for j in 0..d {
            let (a, b) = (xr[j], xr[d + j]);
            let s = b.sigmoid();
            o[j] = gr[j] * s;
            o[d + j] = gr[j] * a * s * (T::one() - s);
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("glu grad shape")
}

impl<T: Scalar> Graph<T> {
    fn binary(
        &mut self,
        kind: &'static str,
        a: Var,
        b: Var,
        commutative: bool,
        f: impl Fn(T, T) -> T,
        op: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (mut a, mut b) = (a, b);
        if commutative && !broadcasts(self.value(a), self.value(b)) && broadcasts(self.value(b), self.value(a)) {
            std::mem::swap(&mut a, &mut b);
        }
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcasts(av, bv) {
            return Err(Error::ShapeMismatch { kind, shapes: vec![av.shape().to_vec(), bv.shape().to_vec()] });
        }
        let nb = bv.len().max(1);
        let bd = bv.data();
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(kind, out, op(a, b))
    }

    /// Elementwise sum; the smaller operand may broadcast over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, true, |x, y| x + y, Op::Add)
    }

    /// `a - b`; only `b` may broadcast.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, false, |x, y| x - y, Op::Sub)
    }

    /// Elementwise (Hadamard) product with leading-axis broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, true, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale(x, c))
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let two = T::lit(2.0);
        let xv = self.value(x);
        if kind == UnaryKind::Ln && xv.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::NonFinite("ln"));
        }
        let out = xv.map(|v| match kind {
            UnaryKind::Sigmoid => v.sigmoid(),
            UnaryKind::TwoSigmoid => two * v.sigmoid(),
            UnaryKind::Swish => v * v.sigmoid(),
            UnaryKind::Relu => v.max(T::zero()),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Ln => v.ln(),
            UnaryKind::Tanh => v.tanh(),
        });
        let name = match kind {
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::TwoSigmoid => "two_sigmoid",
            UnaryKind::Swish => "swish",
            UnaryKind::Relu => "relu",
            UnaryKind::Exp => "exp",
            UnaryKind::Ln => "ln",
            UnaryKind::Tanh => "tanh",
        };
        self.push(name, out, Op::Unary(x, kind))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    /// LHUC scaling function `2 * sigmoid(x)`.
    pub fn two_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::TwoSigmoid, x)
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Swish, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    /// Natural log; errors with `NonFinite` on any non-positive input.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Ln, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    /// Gated linear unit over the last axis: `a * sigmoid(b)` where `[a | b]`
    /// are the two halves of the input.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d2 = xv.last_dim();
        if xv.ndim() == 0 || d2 % 2 != 0 {
            return Err(Error::ShapeMismatch { kind: "glu", shapes: vec![xv.shape().to_vec()] });
        }
        let d = d2 / 2;
        let mut data = Vec::with_capacity(xv.len() / 2);
        for row in xv.rows() {
            for j in 0..d {
                data.push(row[j] * row[d + j].sigmoid());
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = d;
        self.push("glu", Tensor::new(shape, data)?, Op::Glu(x))
    }
}

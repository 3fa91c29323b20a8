use std::sync::Arc;

use super::{check_len, DualTensor, Op, Tape};
use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow for large x
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `C = A · B` for an `m×k` by `k×n` product with arbitrary strides;
/// `c` is row-major `m×n` and is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a`, `b` and `c`, which
    // the callers size as m×k, k×n and m×n respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output shape for an elementwise binary op: equal shapes, or one side a
/// single element broadcast over the other.
fn binary_shape(op: &'static str, a: &DualTensor, b: &DualTensor) -> Result<Vec<usize>> {
    if a.shape == b.shape {
        Ok(a.shape.clone())
    } else if b.len() == 1 {
        Ok(a.shape.clone())
    } else if a.len() == 1 {
        Ok(b.shape.clone())
    } else {
        Err(Error::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.shape, b.shape),
        })
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.len(), b.len()) {
        (1, _) => b.iter().map(|&y| f(a[0], y)).collect(),
        (_, 1) => a.iter().map(|&x| f(x, b[0])).collect(),
        _ => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
    }
}

impl Tape {
    fn binary(
        &self,
        name: &'static str,
        a: &DualTensor,
        b: &DualTensor,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(&DualTensor, &DualTensor, &Arc<Vec<f64>>) -> Op,
    ) -> Result<DualTensor> {
        let shape = binary_shape(name, a, b)?;
        let values = Arc::new(zip_map(&a.values, &b.values, f));
        if a.is_constant() && b.is_constant() {
            return Ok(DualTensor {
                shape,
                values,
                node: None,
            });
        }
        let op = op(a, b, &values);
        Ok(self.push_shared(op, shape, values))
    }

    fn unary(
        &self,
        x: &DualTensor,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(&DualTensor, &Arc<Vec<f64>>) -> Op,
    ) -> DualTensor {
        let values = Arc::new(x.values.iter().map(|&v| f(v)).collect::<Vec<_>>());
        if x.is_constant() {
            return DualTensor {
                shape: x.shape.clone(),
                values,
                node: None,
            };
        }
        let op = op(x, &values);
        self.push_shared(op, x.shape.clone(), values)
    }

    pub fn add(&self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        self.binary("add", a, b, |x, y| x + y, |a, b, _| Op::Add(a.operand(), b.operand()))
    }

    pub fn sub(&self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        self.binary("sub", a, b, |x, y| x - y, |a, b, _| Op::Sub(a.operand(), b.operand()))
    }

    pub fn mul(&self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        self.binary("mul", a, b, |x, y| x * y, |a, b, _| Op::Mul(a.operand(), b.operand()))
    }

    /// Elementwise quotient; a zero or non-finite denominator is a domain error.
    pub fn div(&self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        if let Some(bad) = b.values.iter().find(|v| **v == 0.0 || !v.is_finite()) {
            return Err(Error::Domain {
                op: "div",
                detail: format!("denominator {bad}"),
            });
        }
        self.binary(
            "div",
            a,
            b,
            |x, y| x / y,
            |a, b, out| Op::Div {
                num: a.operand(),
                den: b.operand(),
                out: Arc::clone(out),
            },
        )
    }

    pub fn neg(&self, x: &DualTensor) -> DualTensor {
        self.unary(x, |v| -v, |x, _| Op::Neg(x.node.unwrap()))
    }

    pub fn add_scalar(&self, x: &DualTensor, c: f64) -> DualTensor {
        self.unary(x, |v| v + c, |x, _| Op::AddScalar(x.node.unwrap()))
    }

    pub fn mul_scalar(&self, x: &DualTensor, c: f64) -> DualTensor {
        self.unary(x, |v| v * c, |x, _| Op::MulScalar(x.node.unwrap(), c))
    }

    /// `c - x`
    pub fn rsub_scalar(&self, c: f64, x: &DualTensor) -> DualTensor {
        let n = self.neg(x);
        self.add_scalar(&n, c)
    }

    pub fn pow_scalar(&self, x: &DualTensor, p: f64) -> DualTensor {
        self.unary(x, |v| v.powf(p), |x, _| Op::PowScalar(x.operand(), p))
    }

    pub fn exp(&self, x: &DualTensor) -> DualTensor {
        self.unary(x, f64::exp, |x, out| Op::Exp(x.node.unwrap(), Arc::clone(out)))
    }

    /// Natural log; values at or below zero are a domain error.
    pub fn log(&self, x: &DualTensor) -> Result<DualTensor> {
        if let Some(bad) = x.values.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {bad}"),
            });
        }
        Ok(self.unary(x, f64::ln, |x, _| Op::Log(x.operand())))
    }

    pub fn sigmoid(&self, x: &DualTensor) -> DualTensor {
        self.unary(x, sigmoid, |x, out| Op::Sigmoid(x.node.unwrap(), Arc::clone(out)))
    }

    pub fn softplus(&self, x: &DualTensor) -> DualTensor {
        self.unary(x, softplus, |x, _| Op::Softplus(x.operand()))
    }

    pub fn tanh(&self, x: &DualTensor) -> DualTensor {
        self.unary(x, f64::tanh, |x, out| Op::Tanh(x.node.unwrap(), Arc::clone(out)))
    }

    /// `max(x, lo)`; gradient passes only where `x > lo`.
    pub fn clamp_min(&self, x: &DualTensor, lo: f64) -> DualTensor {
        self.unary(x, |v| v.max(lo), |x, _| Op::ClampMin(x.operand(), lo))
    }

    /// `min(x, hi)`, built from `clamp_min` so the same subgradient rule applies.
    pub fn clamp_max(&self, x: &DualTensor, hi: f64) -> DualTensor {
        let n = self.neg(x);
        let c = self.clamp_min(&n, -hi);
        self.neg(&c)
    }

    pub fn relu(&self, x: &DualTensor) -> DualTensor {
        self.clamp_min(x, 0.0)
    }

    pub fn sum(&self, x: &DualTensor) -> DualTensor {
        let total: f64 = x.values.iter().sum();
        match x.node {
            None => DualTensor::scalar(total),
            Some(id) => self.push(Op::Sum(id), vec![], vec![total]),
        }
    }

    pub fn mean(&self, x: &DualTensor) -> Result<DualTensor> {
        if x.is_empty() {
            return Err(Error::Shape {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let mean = x.values.iter().sum::<f64>() / x.len() as f64;
        Ok(match x.node {
            None => DualTensor::scalar(mean),
            Some(id) => self.push(Op::Mean(id, x.len()), vec![], vec![mean]),
        })
    }

    /// Matrix product of `[m, k]` and `[k, n]` tensors.
    pub fn matmul(&self, a: &DualTensor, b: &DualTensor) -> Result<DualTensor> {
        let (m, k, n) = match (a.shape.as_slice(), b.shape.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => {
                return Err(Error::Shape {
                    op: "matmul",
                    detail: format!("{:?} x {:?}", a.shape, b.shape),
                })
            }
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &a.values, (k as isize, 1), &b.values, (n as isize, 1), &mut out);
        if a.is_constant() && b.is_constant() {
            return DualTensor::constant(vec![m, n], out);
        }
        let op = Op::Matmul {
            a: a.operand(),
            b: b.operand(),
            m,
            k,
            n,
        };
        Ok(self.push(op, vec![m, n], out))
    }

    /// Add a `[n]` bias to every row of a `[m, n]` tensor.
    pub fn add_bias(&self, x: &DualTensor, bias: &DualTensor) -> Result<DualTensor> {
        let cols = match x.shape.as_slice() {
            &[_, n] if bias.len() == n => n,
            _ => {
                return Err(Error::Shape {
                    op: "add_bias",
                    detail: format!("{:?} + {:?}", x.shape, bias.shape),
                })
            }
        };
        let mut out = x.values.to_vec();
        if cols > 0 {
            for row in out.chunks_exact_mut(cols) {
                for (v, b) in row.iter_mut().zip(bias.values.iter()) {
                    *v += b;
                }
            }
        }
        if x.is_constant() && bias.is_constant() {
            return DualTensor::constant(x.shape.clone(), out);
        }
        let op = Op::AddBias {
            x: x.node,
            bias: bias.node,
            cols,
        };
        Ok(self.push(op, x.shape.clone(), out))
    }

    /// Matrix-vector product of `[m, k]` and `[k]`, giving `[m]`.
    pub fn matvec(&self, a: &DualTensor, x: &DualTensor) -> Result<DualTensor> {
        let col = self.reshape(x, vec![x.len(), 1])?;
        let out = self.matmul(a, &col)?;
        self.reshape(&out, vec![out.len()])
    }

    /// `out[g] = Σ x[i]` over all `i` with `groups[i] == g`.
    pub fn segment_sum(&self, x: &DualTensor, groups: &Arc<Vec<usize>>, n_groups: usize) -> Result<DualTensor> {
        if groups.len() != x.len() {
            return Err(Error::Shape {
                op: "segment_sum",
                detail: format!("{} values but {} group ids", x.len(), groups.len()),
            });
        }
        let mut out = vec![0.0; n_groups];
        for (&v, &g) in x.values.iter().zip(groups.iter()) {
            let slot = out.get_mut(g).ok_or_else(|| Error::Shape {
                op: "segment_sum",
                detail: format!("group id {g} >= {n_groups}"),
            })?;
            *slot += v;
        }
        Ok(match x.node {
            None => DualTensor::vector(out),
            Some(id) => self.push(Op::SegmentSum(id, Arc::clone(groups)), vec![n_groups], out),
        })
    }

    /// Gather `out[j] = x[index[j]]` over the flattened input, shaped `shape`.
    pub fn index_select(&self, x: &DualTensor, index: &Arc<Vec<usize>>, shape: Vec<usize>) -> Result<DualTensor> {
        check_len("index_select", &shape, index.len())?;
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            let v = x.values.get(i).ok_or_else(|| Error::Shape {
                op: "index_select",
                detail: format!("index {i} out of bounds for {} values", x.len()),
            })?;
            out.push(*v);
        }
        Ok(match x.node {
            None => DualTensor::constant(shape, out)?,
            Some(id) => self.push(
                Op::IndexSelect {
                    input: id,
                    input_len: x.len(),
                    index: Arc::clone(index),
                },
                shape,
                out,
            ),
        })
    }

    /// Contiguous slice `[start, start + len)` of the flattened input.
    pub fn slice(&self, x: &DualTensor, start: usize, shape: Vec<usize>) -> Result<DualTensor> {
        let len: usize = shape.iter().product();
        let index = Arc::new((start..start + len).collect());
        self.index_select(x, &index, shape)
    }

    /// Concatenate flattened inputs into a 1-d tensor.
    pub fn concat(&self, parts: &[&DualTensor]) -> DualTensor {
        let values: Vec<f64> = parts.iter().flat_map(|p| p.values.iter().copied()).collect();
        if parts.iter().all(|p| p.is_constant()) {
            return DualTensor::vector(values);
        }
        let meta = parts.iter().map(|p| (p.node, p.len())).collect();
        let len = values.len();
        self.push(Op::Concat(meta), vec![len], values)
    }

    pub fn reshape(&self, x: &DualTensor, shape: Vec<usize>) -> Result<DualTensor> {
        check_len("reshape", &shape, x.len())?;
        Ok(match x.node {
            None => DualTensor {
                shape,
                values: Arc::clone(&x.values),
                node: None,
            },
            Some(id) => self.push_shared(Op::Reshape(id), shape, Arc::clone(&x.values)),
        })
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&self, soft: &DualTensor, hard: Vec<f64>) -> Result<DualTensor> {
        check_len("straight_through", &soft.shape, hard.len())?;
        Ok(match soft.node {
            None => DualTensor::constant(soft.shape.clone(), hard)?,
            Some(id) => self.push(Op::StraightThrough(id), soft.shape.clone(), hard),
        })
    }

    /// Scalar node with a precomputed value and gradient with respect to
    /// `input`; used to splice in a sub-computation differentiated on another
    /// tape.
    pub fn splice(&self, input: &DualTensor, value: f64, grad: Vec<f64>) -> Result<DualTensor> {
        if grad.len() != input.len() {
            return Err(Error::Shape {
                op: "splice",
                detail: format!("{} gradient entries for {} inputs", grad.len(), input.len()),
            });
        }
        Ok(match input.node {
            None => DualTensor::scalar(value),
            Some(id) => self.push(Op::Splice(id, Arc::new(grad)), vec![], vec![value]),
        })
    }
}

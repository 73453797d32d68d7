//! Differentiable operations on [`Var`].

use super::kernels::{self, binary, sum_to};
use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

impl<'t, T: Scalar> Var<'t, T> {
    fn unary_op(
        &self,
        value: Tensor<T>,
        rule: impl Fn(&Tensor<T>) -> Result<Tensor<T>> + 'static,
    ) -> Var<'t, T> {
        self.tape
            .record(value, &[self], Box::new(move |g, _| Ok(vec![Some(rule(g)?)])))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let value = binary("add", &self.value, &other.value, |a, b| a + b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(self.tape.record(
            value,
            &[self, other],
            Box::new(move |g, needs| {
                Ok(vec![
                    needs[0].then(|| sum_to(g, &sa)),
                    needs[1].then(|| sum_to(g, &sb)),
                ])
            }),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let value = binary("sub", &self.value, &other.value, |a, b| a - b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(self.tape.record(
            value,
            &[self, other],
            Box::new(move |g, needs| {
                Ok(vec![
                    needs[0].then(|| sum_to(g, &sa)),
                    needs[1].then(|| sum_to(g, &sb).map(|v| -v)),
                ])
            }),
        ))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        let value = binary("mul", &self.value, &other.value, |a, b| a * b)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(self.tape.record(
            value,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = if needs[0] {
                    Some(sum_to(&binary("mul_bwd", g, &b, |x, y| x * y)?, a.shape()))
                } else {
                    None
                };
                let gb = if needs[1] {
                    Some(sum_to(&binary("mul_bwd", g, &a, |x, y| x * y)?, b.shape()))
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        ))
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        let value = binary("div", &self.value, &other.value, |a, b| a / b)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        let out = value.clone();
        Ok(self.tape.record(
            value,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = if needs[0] {
                    Some(sum_to(&binary("div_bwd", g, &b, |x, y| x / y)?, a.shape()))
                } else {
                    None
                };
                let gb = if needs[1] {
                    // d(a/b)/db = -(a/b)/b
                    let q = binary("div_bwd", &out, &b, |x, y| x / y)?;
                    Some(sum_to(&binary("div_bwd", g, &q, |x, y| -x * y)?, b.shape()))
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        ))
    }

    pub fn neg(&self) -> Self {
        self.unary_op(self.value.map(|v| -v), |g| Ok(g.map(|v| -v)))
    }

    pub fn scale(&self, c: f64) -> Self {
        let c = T::lit(c);
        self.unary_op(self.value.map(|v| v * c), move |g| Ok(g.map(|v| v * c)))
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        let c = T::lit(c);
        self.unary_op(self.value.map(|v| v + c), |g| Ok(g.clone()))
    }

    /// `c - x`.
    pub fn rsub_scalar(&self, c: f64) -> Self {
        let c = T::lit(c);
        self.unary_op(self.value.map(|v| c - v), |g| Ok(g.map(|v| -v)))
    }

    pub fn exp(&self) -> Self {
        let y = self.value.map(|v| v.exp());
        let saved = y.clone();
        self.unary_op(y, move |g| g.zip_map(&saved, |a, b| a * b))
    }

    pub fn sqrt(&self) -> Self {
        let y = self.value.map(|v| v.sqrt());
        let saved = y.clone();
        let half = T::lit(0.5);
        self.unary_op(y, move |g| g.zip_map(&saved, |a, b| a * half / b))
    }

    pub fn square(&self) -> Self {
        let x = self.value.clone();
        let two = T::lit(2.0);
        self.unary_op(self.value.map(|v| v * v), move |g| {
            g.zip_map(&x, |a, b| a * two * b)
        })
    }

    pub fn sigmoid(&self) -> Self {
        let y = self.value.map(kernels::sigmoid);
        let saved = y.clone();
        self.unary_op(y, move |g| {
            g.zip_map(&saved, |a, s| a * s * (T::one() - s))
        })
    }

    pub fn gelu(&self) -> Self {
        let x = self.value.clone();
        self.unary_op(self.value.map(kernels::gelu), move |g| {
            g.zip_map(&x, |a, v| a * kernels::gelu_grad(v))
        })
    }

    pub fn softplus(&self) -> Self {
        let x = self.value.clone();
        self.unary_op(self.value.map(kernels::softplus), move |g| {
            g.zip_map(&x, |a, v| a * kernels::sigmoid(v))
        })
    }

    /// `1/x` where `x ≥ eps`, and `0` elsewhere (a dead entry contributes nothing).
    pub fn safe_recip(&self, eps: f64) -> Self {
        let eps = T::lit(eps);
        let y = self
            .value
            .map(|v| if v >= eps { T::one() / v } else { T::zero() });
        let saved = y.clone();
        self.unary_op(y, move |g| g.zip_map(&saved, |a, r| -a * r * r))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let value = kernels::matmul(&self.value, &other.value)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(self.tape.record(
            value,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = if needs[0] {
                    let bt = kernels::transpose(&b)?;
                    Some(sum_to(&kernels::matmul(g, &bt)?, a.shape()))
                } else {
                    None
                };
                let gb = if needs[1] {
                    let at = kernels::transpose(&a)?;
                    Some(sum_to(&kernels::matmul(&at, g)?, b.shape()))
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// Swaps the last two axes.
    pub fn t(&self) -> Result<Self> {
        let value = kernels::transpose(&self.value)?;
        Ok(self.unary_op(value, kernels::transpose))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let value = kernels::permute(&self.value, axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.unary_op(value, move |g| kernels::permute(g, &inverse)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let value = self.value.reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(self.unary_op(value, move |g| g.reshape(&orig)))
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let y = kernels::softmax(&self.value, axis)?;
        let saved = y.clone();
        Ok(self.unary_op(y, move |g| Ok(kernels::softmax_backward(&saved, g, axis))))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: f64) -> Result<Self> {
        let (y, xhat, inv_std) =
            kernels::layer_norm(&self.value, &gain.value, &bias.value, T::lit(eps))?;
        let gain_value = gain.value.clone();
        Ok(self.tape.record(
            y,
            &[self, gain, bias],
            Box::new(move |g, needs| {
                let (dx, dg, db) = kernels::layer_norm_backward(g, &xhat, &inv_std, &gain_value);
                Ok(vec![
                    needs[0].then_some(dx),
                    needs[1].then_some(dg),
                    needs[2].then_some(db),
                ])
            }),
        ))
    }

    pub fn sum(&self) -> Self {
        let shape = self.shape().to_vec();
        self.unary_op(Tensor::scalar(self.value.sum_all()), move |g| {
            Ok(Tensor::full(&shape, g.data()[0]))
        })
    }

    pub fn mean(&self) -> Self {
        let n = self.value.len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Self> {
        let value = kernels::sum_axis(&self.value, axis, keepdim)?;
        let shape = self.shape().to_vec();
        let mut kept = shape.clone();
        kept[axis] = 1;
        Ok(self.unary_op(value, move |g| {
            let g = g.reshape(&kept)?;
            binary("expand", &Tensor::zeros(&shape), &g, |_, b| b)
        }))
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of zero tensors".into()))?;
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| &p.value).collect();
        let value = kernels::concat(&values, axis)?;
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(first.tape.record(
            value,
            parts,
            Box::new(move |g, needs| {
                let mut start = 0;
                let mut out = Vec::with_capacity(widths.len());
                for (&w, &need) in widths.iter().zip(needs) {
                    out.push(if need {
                        Some(kernels::slice(g, axis, start, w)?)
                    } else {
                        None
                    });
                    start += w;
                }
                Ok(out)
            }),
        ))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let value = kernels::slice(&self.value, axis, start, len)?;
        let shape = self.shape().to_vec();
        Ok(self.unary_op(value, move |g| Ok(kernels::unslice(g, &shape, axis, start))))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is zero.
    pub fn dropout(&self, rate: f64, rng: &mut Rng, training: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask = Tensor::from_fn(self.shape(), |_| {
            if rng.uniform() < rate {
                T::zero()
            } else {
                keep
            }
        });
        let value = self.value.zip_map(&mask, |a, m| a * m)?;
        Ok(self.unary_op(value, move |g| g.zip_map(&mask, |a, m| a * m)))
    }

    /// `Aᵀ·V` with permutation-invariant summation over the point axis; see
    /// [`kernels::point_pool`].
    pub fn point_pool(&self, values: &Self) -> Result<Self> {
        let out = kernels::point_pool(&self.value, &values.value)?;
        let (a, v) = (self.value.clone(), values.value.clone());
        Ok(self.tape.record(
            out,
            &[self, values],
            Box::new(move |g, needs| {
                let ga = if needs[0] {
                    Some(kernels::matmul(&v, &kernels::transpose(g)?)?)
                } else {
                    None
                };
                let gv = if needs[1] {
                    Some(kernels::matmul(&a, g)?)
                } else {
                    None
                };
                Ok(vec![ga, gv])
            }),
        ))
    }
}

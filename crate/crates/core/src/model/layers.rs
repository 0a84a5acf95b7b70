//! Minimal differentiable building blocks over candle tensors.
//!
//! Everything here is composed from primitive ops with backward support so
//! the full model can be gradient-checked in f64.

use candle_core::{DType, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamStore};
use crate::Result;

/// Per-call forward state: dropout is active only when an RNG is present.
pub struct Ctx<'a> {
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl Ctx<'_> {
    pub fn eval() -> Ctx<'static> {
        Ctx { dropout_rng: None }
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

pub fn dropout(x: &Tensor, p: f64, ctx: &mut Ctx) -> Result<Tensor> {
    let Some(rng) = ctx.dropout_rng.as_deref_mut() else {
        return Ok(x.clone());
    };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_scale(ps, name, d_in, d_out, 1.0)
    }

    pub fn with_scale(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, scale: f64) -> Result<Self> {
        let bound = scale / (d_in as f64).sqrt();
        Ok(Linear {
            weight: ps.create(&format!("{name}.weight"), &[d_out, d_in], Init::Uniform(bound))?,
            bias: ps.create(&format!("{name}.bias"), &[d_out], Init::Uniform(bound))?,
        })
    }

    /// Applies over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.t()?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            _ => {
                let dims = x.dims().to_vec();
                let last = dims[dims.len() - 1];
                let lead: usize = dims[..dims.len() - 1].iter().product();
                let y = x.reshape((lead, last))?.matmul(&w)?;
                let mut out_dims = dims;
                *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
                y.reshape(out_dims)?
            }
        };
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// 1-D convolution over `(B, C, T)` with "same" padding.
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl Conv1d {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::with_scale(ps, name, c_in, c_out, kernel, 1.0)
    }

    pub fn with_scale(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, scale: f64) -> Result<Self> {
        let bound = scale / ((c_in * kernel) as f64).sqrt();
        Ok(Conv1d {
            weight: ps.create(&format!("{name}.weight"), &[c_out, c_in, kernel], Init::Uniform(bound))?,
            bias: ps.create(&format!("{name}.bias"), &[c_out], Init::Uniform(bound))?,
            padding: kernel / 2,
        })
    }

    /// Unfold-and-matmul; the library conv kernel's weight gradient is
    /// unreliable for batched input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c_in, t) = x.dims3()?;
        let (c_out, _, k) = self.weight.dims3()?;
        let cols = if k == 1 {
            x.clone()
        } else {
            let xp = x.pad_with_zeros(2, self.padding, self.padding)?;
            let shifted = (0..k).map(|j| xp.narrow(2, j, t)).collect::<candle_core::Result<Vec<_>>>()?;
            Tensor::cat(&shifted, 1)? // (B, K·C_in, T), tap-major
        };
        let w = self.weight.transpose(1, 2)?.reshape((1, c_out, k * c_in))?.broadcast_as((b, c_out, k * c_in))?;
        let y = w.contiguous()?.matmul(&cols.contiguous()?)?;
        Ok(y.broadcast_add(&self.bias.unsqueeze(0)?.unsqueeze(2)?)?)
    }
}

pub struct Embedding {
    table: Tensor,
    dim: usize,
}

impl Embedding {
    pub fn new(ps: &mut ParamStore, name: &str, n: usize, dim: usize) -> Result<Self> {
        Ok(Embedding {
            table: ps.create(&format!("{name}.weight"), &[n, dim], Init::Normal((dim as f64).powf(-0.5)))?,
            dim,
        })
    }

    /// `ids` of any shape → `ids.shape + [dim]`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut dims = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let out = self.table.index_select(&flat, 0)?;
        dims.push(self.dim);
        Ok(out.reshape(dims)?)
    }
}

/// Layer normalization over the last dimension.
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: ps.create(&format!("{name}.gamma"), &[dim], Init::Const(1.0))?,
            beta: ps.create(&format!("{name}.beta"), &[dim], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Sinusoidal features of shape `(n, dim)` for positions or times.
pub fn sinusoidal(positions: &[f64], dim: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let scale = if half > 1 { (10000f64).ln() / (half - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..half {
            data.push((p * (-scale * i as f64).exp()).sin());
        }
        for i in 0..half {
            data.push((p * (-scale * i as f64).exp()).cos());
        }
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(data, (positions.len(), dim), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn naive_conv(x: &[f64], w: &[f64], bias: &[f64], (b, c_in, t): (usize, usize, usize), (c_out, k): (usize, usize)) -> Vec<f64> {
        let pad = (k / 2) as isize;
        let mut y = vec![0.0; b * c_out * t];
        for bi in 0..b {
            for o in 0..c_out {
                for ti in 0..t {
                    let mut acc = bias[o];
                    for c in 0..c_in {
                        for j in 0..k {
                            let src = ti as isize + j as isize - pad;
                            if (0..t as isize).contains(&src) {
                                acc += w[(o * c_in + c) * k + j] * x[(bi * c_in + c) * t + src as usize];
                            }
                        }
                    }
                    y[(bi * c_out + o) * t + ti] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loop_and_finite_differences() {
        for k in [1, 3, 5] {
            let mut ps = ParamStore::new(k as u64, DType::F64);
            let conv = Conv1d::new(&mut ps, "c", 2, 3, k).unwrap();
            let x_data: Vec<f64> = (0..2 * 2 * 6).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect();
            let x = Tensor::from_vec(x_data.clone(), (2, 2, 6), &Device::Cpu).unwrap();
            let w = ps.get("c.weight").unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let bias = ps.get("c.bias").unwrap().to_vec1::<f64>().unwrap();
            let y = conv.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let expected = naive_conv(&x_data, &w, &bias, (2, 2, 6), (3, k));
            for (a, e) in y.iter().zip(&expected) {
                assert!((a - e).abs() < 1e-12);
            }

            let loss = || conv.forward(&x).unwrap().sqr().unwrap().sum_all().unwrap();
            let grads = loss().backward().unwrap();
            let g = grads.get(ps.get("c.weight").unwrap().as_tensor()).unwrap();
            let g = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in 0..w.len() {
                ps.set_value_at("c.weight", i, w[i] + 1e-5).unwrap();
                let up = loss().to_scalar::<f64>().unwrap();
                ps.set_value_at("c.weight", i, w[i] - 1e-5).unwrap();
                let down = loss().to_scalar::<f64>().unwrap();
                ps.set_value_at("c.weight", i, w[i]).unwrap();
                let numeric = (up - down) / 2e-5;
                assert!((g[i] - numeric).abs() < 1e-6 * numeric.abs().max(1.0), "k={k} i={i}");
            }
        }
    }
}

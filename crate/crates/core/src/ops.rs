//! Differentiable tensor helpers missing from the tensor backend.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, D};

use crate::imaging::LUMA_WEIGHTS;

fn contiguous_slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("custom op expects contiguous input".into()))?;
    Ok(&v[start..end])
}

/// `sqrt(x)` whose derivative is taken as 0 at `x = 0` instead of infinity.
struct SafeSqrt;

impl CustomOp1 for SafeSqrt {
    fn name(&self) -> &'static str {
        "safe-sqrt"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => {
                CpuStorage::F32(contiguous_slice(v, l)?.iter().map(|x| x.max(0.0).sqrt()).collect())
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(contiguous_slice(v, l)?.iter().map(|x| x.max(0.0).sqrt()).collect())
            }
            _ => candle_core::bail!("safe-sqrt: unsupported dtype"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let positive = res.gt(0.0)?;
        let denom = positive.where_cond(&(res * 2.0)?, &res.ones_like()?)?;
        let g = positive.where_cond(&(grad / denom)?, &grad.zeros_like()?)?;
        Ok(Some(g))
    }
}

pub fn safe_sqrt(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(SafeSqrt)
}

/// Elementwise `atan2(y, x)`.
struct Atan2;

impl CustomOp2 for Atan2 {
    fn name(&self) -> &'static str {
        "atan2"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        if l1.shape() != l2.shape() {
            candle_core::bail!("atan2: shape mismatch {:?} vs {:?}", l1.shape(), l2.shape());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(x)) => CpuStorage::F32(
                contiguous_slice(y, l1)?
                    .iter()
                    .zip(contiguous_slice(x, l2)?)
                    .map(|(y, x)| y.atan2(*x))
                    .collect(),
            ),
            (CpuStorage::F64(y), CpuStorage::F64(x)) => CpuStorage::F64(
                contiguous_slice(y, l1)?
                    .iter()
                    .zip(contiguous_slice(x, l2)?)
                    .map(|(y, x)| y.atan2(*x))
                    .collect(),
            ),
            _ => candle_core::bail!("atan2: unsupported or mixed dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        y: &Tensor,
        x: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let r2 = (y.sqr()? + x.sqr()?)?;
        let nonzero = r2.gt(0.0)?;
        let safe = nonzero.where_cond(&r2, &r2.ones_like()?)?;
        let zero = grad.zeros_like()?;
        let gy = nonzero.where_cond(&((grad * x)? / &safe)?, &zero)?;
        let gx = nonzero.where_cond(&((grad * y)?.neg()? / &safe)?, &zero)?;
        Ok((Some(gy), Some(gx)))
    }
}

pub fn atan2(y: &Tensor, x: &Tensor) -> candle_core::Result<Tensor> {
    y.contiguous()?.apply_op2(&x.contiguous()?, Atan2)
}

/// BT.601 luma of an `(N, 3, H, W)` tensor, shape `(N, 1, H, W)`.
pub fn luma(x: &Tensor) -> candle_core::Result<Tensor> {
    let w = Tensor::new(&LUMA_WEIGHTS, x.device())?
        .to_dtype(x.dtype())?
        .reshape((1, 3, 1, 1))?;
    x.broadcast_mul(&w)?.sum_keepdim(1)
}

/// Keeps every `stride`-th entry along `dim`, starting at `offset`, `count` entries.
fn subsample(x: &Tensor, dim: usize, offset: usize, stride: usize, count: usize) -> candle_core::Result<Tensor> {
    let span = stride * (count - 1) + 1;
    let x = x.narrow(dim, offset, span)?;
    if stride == 1 {
        return Ok(x);
    }
    let x = x.pad_with_same(dim, 0, stride - 1)?;
    let mut dims = x.dims().to_vec();
    dims[dim] = count;
    dims.insert(dim + 1, stride);
    x.reshape(dims)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)
}

/// Max pooling with overlapping windows, built from slices and elementwise maxima
/// so that it stays differentiable.
pub fn max_pool_overlapping(x: &Tensor, kernel: usize, stride: usize) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h < kernel || w < kernel {
        candle_core::bail!("max pool window {kernel} larger than input {h}x{w}");
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut rows = subsample(x, 2, 0, stride, oh)?;
    for k in 1..kernel {
        rows = rows.maximum(&subsample(x, 2, k, stride, oh)?)?;
    }
    let mut out = subsample(&rows, 3, 0, stride, ow)?;
    for k in 1..kernel {
        out = out.maximum(&subsample(&rows, 3, k, stride, ow)?)?;
    }
    Ok(out)
}

/// Mean over every dimension except the first: `(N, ...) -> (N,)`.
pub fn mean_per_sample(x: &Tensor) -> candle_core::Result<Tensor> {
    let n = x.dim(0)?;
    x.reshape((n, ()))?.mean(D::Minus1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn atan2_matches_std() {
        let y = Tensor::new(&[0.0f64, 1.0, -1.0, 2.0], &Device::Cpu).unwrap();
        let x = Tensor::new(&[1.0f64, 0.0, 1.0, -3.0], &Device::Cpu).unwrap();
        let out = atan2(&y, &x).unwrap().to_vec1::<f64>().unwrap();
        for (i, (yy, xx)) in [(0.0f64, 1.0f64), (1.0, 0.0), (-1.0, 1.0), (2.0, -3.0)].iter().enumerate() {
            assert_eq!(out[i], yy.atan2(*xx));
        }
    }

    #[test]
    fn atan2_gradient_matches_finite_difference() {
        let y = Var::new(&[0.3f64, -0.7], &Device::Cpu).unwrap();
        let x = Var::new(&[0.9f64, 0.2], &Device::Cpu).unwrap();
        let out = atan2(y.as_tensor(), x.as_tensor()).unwrap().sum_all().unwrap();
        let g = out.backward().unwrap();
        let gy = g.get(y.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let gx = g.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for (i, (yy, xx)) in [(0.3f64, 0.9f64), (-0.7, 0.2)].iter().enumerate() {
            let dy = ((yy + h).atan2(*xx) - (yy - h).atan2(*xx)) / (2.0 * h);
            let dx = (yy.atan2(xx + h) - yy.atan2(xx - h)) / (2.0 * h);
            assert!((gy[i] - dy).abs() < 1e-6 && (gx[i] - dx).abs() < 1e-6);
        }
    }

    #[test]
    fn safe_sqrt_has_zero_gradient_at_zero() {
        let x = Var::new(&[0.0f64, 4.0], &Device::Cpu).unwrap();
        let out = safe_sqrt(x.as_tensor()).unwrap();
        assert_eq!(out.to_vec1::<f64>().unwrap(), vec![0.0, 2.0]);
        let g = out.sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap(), vec![0.0, 0.25]);
    }

    #[test]
    fn overlapping_pool_matches_brute_force() {
        let (h, w) = (7usize, 9usize);
        let data: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 23) as f64).collect();
        let x = Tensor::from_vec(data.clone(), (1, 1, h, w), &Device::Cpu).unwrap();
        let out = max_pool_overlapping(&x, 3, 2).unwrap();
        assert_eq!(out.dims(), &[1, 1, 3, 4]);
        let got = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut want = Vec::new();
        for oy in 0..3 {
            for ox in 0..4 {
                let mut m = f64::MIN;
                for dy in 0..3 {
                    for dx in 0..3 {
                        m = m.max(data[(oy * 2 + dy) * w + ox * 2 + dx]);
                    }
                }
                want.push(m);
            }
        }
        assert_eq!(got, want);
    }
}

//! Five-stage AlexNet-topology feature extractor for the perceptual loss.
//!
//! Weights either come from a safetensors file using the torchvision layout
//! (`features.{0,3,6,8,10}.{weight,bias}`) or are drawn from a fixed seed,
//! which keeps the loss deterministic and usable offline.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::max_pool_overlapping;
use crate::rng;

/// `(in, out, kernel, stride, padding, pool_after)` per stage.
const STAGES: [(usize, usize, usize, usize, usize, bool); 5] = [
    (3, 64, 11, 4, 2, true),
    (64, 192, 5, 1, 2, true),
    (192, 384, 3, 1, 1, false),
    (384, 256, 3, 1, 1, false),
    (256, 256, 3, 1, 1, false),
];

/// torchvision indices of the conv layers inside `features`.
const TORCHVISION_INDICES: [usize; 5] = [0, 3, 6, 8, 10];

/// Input normalization applied before the first stage.
const SHIFT: [f32; 3] = [-0.030, -0.088, -0.188];
const SCALE: [f32; 3] = [0.458, 0.448, 0.450];

/// Smallest square input for which every stage produces at least one pixel.
pub const MIN_INPUT_SIDE: usize = 31;

struct Stage {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    pool: bool,
}

pub struct FeatureExtractor {
    stages: Vec<Stage>,
    pretrained: bool,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("stages", &self.stages.len())
            .field("pretrained", &self.pretrained)
            .finish()
    }
}

impl FeatureExtractor {
    /// Randomly initialized extractor (Kaiming-uniform, zero bias) from `seed`.
    pub fn random_alexnet(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let stages = STAGES
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, k, stride, padding, pool))| {
                let fan_in = cin * k * k;
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut r = rng::stream(seed, i as u64);
                let w: Vec<f32> = (0..cout * fan_in)
                    .map(|_| r.random_range(-bound..bound) as f32)
                    .collect();
                Ok(Stage {
                    weight: Tensor::from_vec(w, (cout, cin, k, k), device)?.to_dtype(dtype)?,
                    bias: Tensor::zeros(cout, dtype, device)?,
                    stride,
                    padding,
                    pool,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stages,
            pretrained: false,
        })
    }

    /// Loads pretrained weights stored with torchvision parameter names.
    pub fn from_safetensors(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ExtractorUnavailable(format!(
                "{} does not exist",
                path.display()
            )));
        }
        let tensors = candle_core::safetensors::load(path, device)
            .map_err(|e| Error::ExtractorUnavailable(format!("{}: {e}", path.display())))?;
        let mut stages = Vec::with_capacity(STAGES.len());
        for (&idx, &(cin, cout, k, stride, padding, pool)) in TORCHVISION_INDICES.iter().zip(&STAGES) {
            let get = |suffix: &str| {
                let name = format!("features.{idx}.{suffix}");
                tensors
                    .get(&name)
                    .cloned()
                    .ok_or_else(|| Error::ExtractorUnavailable(format!("missing tensor {name}")))
            };
            let weight = get("weight")?;
            if weight.dims() != [cout, cin, k, k] {
                return Err(Error::ExtractorUnavailable(format!(
                    "features.{idx}.weight has shape {:?}, expected {:?}",
                    weight.dims(),
                    [cout, cin, k, k]
                )));
            }
            stages.push(Stage {
                weight: weight.to_dtype(dtype)?,
                bias: get("bias")?.to_dtype(dtype)?,
                stride,
                padding,
                pool,
            });
        }
        Ok(Self {
            stages,
            pretrained: true,
        })
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    /// Activations after each stage's ReLU for an `(N, 3, H, W)` batch in `[0, 1]`.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
            return Err(Error::ShapeMismatch(format!(
                "perceptual features need (N, 3, H, W) with H, W >= {MIN_INPUT_SIDE}, got {:?}",
                x.dims()
            )));
        }
        let dev = x.device();
        let shift = Tensor::new(&SHIFT, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        let scale = Tensor::new(&SCALE, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        let mut h = (x * 2.0)?
            .affine(1.0, -1.0)?
            .broadcast_sub(&shift)?
            .broadcast_div(&scale)?;
        let mut taps = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 && self.stages[i - 1].pool {
                h = max_pool_overlapping(&h, 3, 2)?;
            }
            let bias = s.bias.reshape((1, s.bias.dim(0)?, 1, 1))?;
            h = h
                .conv2d(&s.weight, s.padding, s.stride, 1, 1)?
                .broadcast_add(&bias)?
                .relu()?;
            taps.push(h.clone());
        }
        Ok(taps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_shapes_for_32() {
        let fx = FeatureExtractor::random_alexnet(0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let taps = fx.features(&x).unwrap();
        let dims: Vec<Vec<usize>> = taps.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(
            dims,
            vec![
                vec![2, 64, 7, 7],
                vec![2, 192, 3, 3],
                vec![2, 384, 1, 1],
                vec![2, 256, 1, 1],
                vec![2, 256, 1, 1]
            ]
        );
    }

    #[test]
    fn too_small_input_is_rejected() {
        let fx = FeatureExtractor::random_alexnet(0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(fx.features(&x).is_err());
    }

    #[test]
    fn missing_weights_point_to_fallback() {
        let err = FeatureExtractor::from_safetensors(Path::new("/nonexistent/alexnet.safetensors"), DType::F32, &Device::Cpu)
            .unwrap_err();
        assert!(err.to_string().contains("random_alexnet"), "{err}");
    }
}

//! Adam with decoupled weight decay. The moment buffers are exposed so that
//! checkpoints can persist and restore them.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

pub struct AdamW {
    params: AdamWParams,
    vars: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, params: AdamWParams) -> Result<Self> {
        let first = vars
            .iter()
            .map(|(_, v)| v.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let second = first.clone();
        Ok(Self {
            params,
            vars,
            first,
            second,
            step: 0,
        })
    }

    pub fn params(&self) -> &AdamWParams {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let p = self.params;
        let bias1 = 1.0 - p.beta1.powi(self.step as i32);
        let bias2 = 1.0 - p.beta2.powi(self.step as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = ((&self.first[i] * p.beta1)? + (&g * (1.0 - p.beta1))?)?;
            let v = ((&self.second[i] * p.beta2)? + (g.sqr()? * (1.0 - p.beta2))?)?;
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            // Detached so the update does not record an op on the variable.
            let decayed = (var.as_tensor().detach() * (1.0 - p.lr * p.weight_decay))?;
            let update = ((m_hat / (v_hat.sqrt()? + p.eps)?)? * p.lr)?;
            var.set(&(decayed - update)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    /// `(name, first moment, second moment)` per parameter.
    pub fn state(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.vars
            .iter()
            .zip(self.first.iter().zip(&self.second))
            .map(|((n, _), (m, v))| (n.as_str(), m, v))
    }

    pub fn restore(&mut self, step: u64, mut lookup: impl FnMut(&str) -> Option<(Tensor, Tensor)>) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            if let Some((m, v)) = lookup(name) {
                self.first[i] = m.reshape(var.shape())?.to_dtype(var.dtype())?;
                self.second[i] = v.reshape(var.shape())?.to_dtype(var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr() {
        let var = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let mut opt = AdamW::new(
            vec![("w".into(), var.clone())],
            AdamWParams {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let v = var.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let var = Var::new(&[2.0f64], &Device::Cpu).unwrap();
        let mut opt = AdamW::new(
            vec![("w".into(), var.clone())],
            AdamWParams {
                lr: 0.1,
                weight_decay: 0.5,
                ..Default::default()
            },
        )
        .unwrap();
        // Unit gradient: the first bias-corrected Adam step is exactly lr/(1+eps),
        // and decay scales the old weight rather than entering the moments.
        let loss = var.as_tensor().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let v = var.as_tensor().to_vec1::<f64>().unwrap()[0];
        let expected = 2.0 * (1.0 - 0.1 * 0.5) - 0.1 / (1.0 + 1e-8);
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        assert_eq!(var.dtype(), DType::F64);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let var = Var::new(&[3.0f32, -1.0, 0.5], &Device::Cpu).unwrap();
        let mut opt = AdamW::new(
            vec![("w".into(), var.clone())],
            AdamWParams {
                lr: 0.05,
                ..Default::default()
            },
        )
        .unwrap();
        for _ in 0..500 {
            let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let v = var.as_tensor().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 0.05), "{v:?}");
    }
}

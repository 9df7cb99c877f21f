//! The noise schedule and DDIM sampler driven by an oracle that knows the
//! clean image: every step count reconstructs it.

use candle_core::{DType, Device, Tensor};
use uwbright::diffusion::{
    ddim_loop, gaussian_noise, make_schedule, predict_x0, sample_xt, NoisePredictor, NoiseSchedule,
};
use uwbright::rng;

struct Oracle<'a> {
    x0: Tensor,
    sched: &'a NoiseSchedule,
}

impl NoisePredictor for Oracle<'_> {
    fn predict(&self, x_t: &Tensor, t: usize, _cond: &Tensor, _lambda: f64) -> uwbright::Result<Tensor> {
        let ab = self.sched.alpha_bar(t)?;
        Ok(((x_t - (&self.x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
    }
}

fn max_abs(a: &Tensor, b: &Tensor) -> uwbright::Result<f64> {
    Ok((a - b)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f64>()?)
}

fn main() -> uwbright::Result<()> {
    let sched = make_schedule(1000, 1e-4, 0.02)?;
    for t in [1, 10, 100, 500, 1000] {
        println!("t={t:4}  beta {:.5}  alpha_bar {:.6}", sched.beta(t)?, sched.alpha_bar(t)?);
    }

    let dev = Device::Cpu;
    let mut r = rng::seeded(0);
    let x0 = (gaussian_noise(&mut r, (1, 3, 16, 16), DType::F64, &dev)? * 0.3)?;
    let eps = gaussian_noise(&mut r, (1, 3, 16, 16), DType::F64, &dev)?;
    let x_t = sample_xt(&x0, 600, &sched, &eps)?;
    println!("inversion error at t=600: {:.2e}", max_abs(&predict_x0(&x_t, 600, &eps, &sched)?, &x0)?);

    let oracle = Oracle { x0: x0.clone(), sched: &sched };
    let cond = Tensor::zeros((1, 4, 16, 16), DType::F64, &dev)?;
    let start = gaussian_noise(&mut r, (1, 3, 16, 16), DType::F64, &dev)?;
    for steps in [1, 5, 50, 1000] {
        let out = ddim_loop(&oracle, start.clone(), &cond, 0.5, steps, &sched)?;
        println!("DDIM {steps:4} steps: max error {:.2e}", max_abs(&out, &x0)?);
    }
    Ok(())
}

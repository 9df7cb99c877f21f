//! A conditional U-Net forward pass and its two conditioning inputs.

use candle_core::{DType, Device};
use uwbright::denoiser::{brightness_of, BrightnessLevel, Denoiser, DenoiserConfig};
use uwbright::preprocess::{fusion_for, SnrParams};
use uwbright::synth::underwater_scene;

fn main() -> uwbright::Result<()> {
    let dev = Device::Cpu;
    for (name, cfg) in [("tiny", DenoiserConfig::tiny()), ("default", DenoiserConfig::default())] {
        let model = Denoiser::new(cfg, 0, DType::F32, &dev)?;
        println!("{name:>8}: {} parameters", model.num_parameters());
    }

    let model = Denoiser::new(DenoiserConfig::tiny(), 0, DType::F32, &dev)?;
    let scene = underwater_scene(32, 32, 3);
    let cond = fusion_for(&scene, &SnrParams::default()).to_tensor(DType::F32, &dev)?;
    let x_t = scene.to_tensor(DType::F32, &dev)?;
    println!("scene brightness {:.3}", brightness_of(&scene).value());

    let mut outputs = Vec::new();
    for lambda in [0.0, 0.5, 1.0] {
        let eps = model.predict_noise(&x_t, 250, Some(&cond), BrightnessLevel::new(lambda)?)?;
        println!("lambda {lambda}: output {:?}, mean {:+.5}", eps.dims(), eps.mean_all()?.to_scalar::<f32>()?);
        outputs.push(eps);
    }
    let uncond = model.predict_noise(&x_t, 250, None, BrightnessLevel::new(0.5)?)?;
    let gap = (&outputs[1] - &uncond)?.abs()?.mean_all()?.to_scalar::<f32>()?;
    println!("conditional vs unconditional mean |difference|: {gap:.5}");
    Ok(())
}

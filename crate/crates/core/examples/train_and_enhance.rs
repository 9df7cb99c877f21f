//! Overfits a tiny denoiser on synthetic underwater scenes, then brightens a
//! darkened scene it has never seen.
//!
//!     cargo run --release --example train_and_enhance -- [epochs] [image_size]

use candle_core::Device;
use uwbright::denoiser::{BrightnessLevel, DenoiserConfig};
use uwbright::pipeline::{Enhancer, TrainConfig, Trainer};
use uwbright::preprocess::{make_triple, TrainingTriple};
use uwbright::synth::underwater_scene;

fn main() -> uwbright::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let epochs = args.first().copied().unwrap_or(50);
    let size = args.get(1).copied().unwrap_or(32);

    // The toy model needs a much larger step than the default 5e-5 to move in 200 updates.
    let config = TrainConfig {
        image_size: size,
        batch_size: 2,
        epochs,
        lr: 2e-3,
        denoiser: DenoiserConfig::tiny(),
        ddim_steps: 20,
        ..TrainConfig::default()
    };
    let device = Device::Cpu;
    let triples: Vec<TrainingTriple> = (0..8)
        .map(|i| make_triple(&underwater_scene(size, size, i), 100 + i, &config.snr))
        .collect();

    let mut trainer = Trainer::new(config.clone(), &device)?;
    // Fixed probe batch, scored with every loss term active so values are comparable.
    let refs: Vec<&TrainingTriple> = triples.iter().collect();
    let probe = trainer.draw_samples(&refs)?;
    let all_terms = config.stage_switch_epoch;
    let mut at_step_10 = None;
    while trainer.epoch < epochs {
        let record = trainer.run_epoch(&triples)?;
        if at_step_10.is_none() && trainer.global_step >= 10 {
            at_step_10 = Some(trainer.evaluate(&probe, all_terms)?.total);
        }
        println!(
            "epoch {:3}  train {:10.4}  probe {:10.4}  ({:.1}s)",
            record.epoch,
            record.total,
            trainer.evaluate(&probe, all_terms)?.total,
            record.wall_time_s
        );
    }
    let last = trainer.evaluate(&probe, all_terms)?;
    for (term, v) in &last.per_term {
        println!("  {:>10} {v:.5}", term.name());
    }
    println!(
        "probe loss: step 10 {:.4} -> final {:.4}",
        at_step_10.unwrap_or(f64::NAN),
        last.total
    );

    let held_out = underwater_scene(size, size, 999).map_clipped(|v| v * 0.5);
    let enhancer = Enhancer::new(trainer.model, config.clone())?;
    let lambda = 0.6;
    let out = enhancer.enhance_image(&held_out, BrightnessLevel::new(lambda)?, config.ddim_steps, 7)?;
    println!(
        "held-out mean luma {:.3} -> {:.3} (target {lambda})",
        held_out.mean_luma(),
        out.mean_luma()
    );
    Ok(())
}

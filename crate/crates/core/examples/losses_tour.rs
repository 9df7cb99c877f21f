//! Every training loss on one prediction/reference pair, then the staged
//! weighted composite before and after the stage switch.

use candle_core::{DType, Device};
use uwbright::losses::{composite_loss, term_loss, LossTerm, LossWeights};
use uwbright::perceptual::FeatureExtractor;
use uwbright::synth::underwater_scene;

fn main() -> uwbright::Result<()> {
    let dev = Device::Cpu;
    let extractor = FeatureExtractor::random_alexnet(0, DType::F32, &dev)?;
    let reference = underwater_scene(64, 64, 1);
    // A dimmer, slightly red-shifted guess.
    let pred = uwbright::RawImage::from_fn(64, 64, "pred", |y, x| {
        let p = [reference.get(y, x, 0), reference.get(y, x, 1), reference.get(y, x, 2)];
        [(p[0] * 0.8 + 0.05).min(1.0), p[1] * 0.7, p[2] * 0.7]
    })?;
    let (p, r) = (pred.to_tensor(DType::F32, &dev)?, reference.to_tensor(DType::F32, &dev)?);

    for term in [LossTerm::Lpips, LossTerm::Ssim, LossTerm::Mse, LossTerm::Brightness, LossTerm::Color] {
        let v = term_loss(term, &p, &r, &extractor)?.to_scalar::<f32>()?;
        println!("{:>10}: {v:.5}", term.name());
    }
    let weights = LossWeights::default();
    for epoch in [0, 25] {
        let c = composite_loss(&p, &r, epoch, 20, &weights, &extractor)?;
        let active: Vec<&str> = c.report.active_terms.iter().map(|t| t.name()).collect();
        println!("epoch {epoch:2}: total {:.4} from {active:?}", c.report.total);
    }
    Ok(())
}

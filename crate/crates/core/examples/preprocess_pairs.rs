//! Builds low/high brightness pairs and their conditioning maps.
//!
//!     cargo run --example preprocess_pairs -- [image_dir] [out_dir]
//!
//! Without arguments a few synthetic scenes are generated first.

use std::path::PathBuf;

use uwbright::preprocess::{build_training_set, save_triples, SnrParams};
use uwbright::synth::underwater_scene;
use uwbright::RawImage;

fn main() -> uwbright::Result<()> {
    let mut args = std::env::args().skip(1);
    let scratch = tempfile::tempdir().expect("temp dir");
    let input = match args.next() {
        Some(dir) => PathBuf::from(dir),
        None => {
            let dir = scratch.path().join("raw");
            std::fs::create_dir_all(&dir).expect("create dir");
            for i in 0..4 {
                underwater_scene(96, 128, i).save_png(&dir.join(format!("scene{i}.png")))?;
            }
            dir
        }
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| scratch.path().join("triples"));

    let params = SnrParams::default();
    let triples = build_training_set(&input, 42, 64, &params)?;
    for t in &triples {
        println!(
            "{:>10}  +{:3}/-{:3}  luma low {:.3} high {:.3}  snr channel mean {:.3}",
            t.source_id,
            t.shift_high,
            t.shift_low,
            t.low.mean_luma(),
            t.high.mean_luma(),
            (0..64 * 64).map(|i| t.fusion.values[i * 4 + 3] as f64).sum::<f64>() / 4096.0,
        );
    }
    let entries = save_triples(&triples, &out)?;
    println!("{} triples written to {}", entries.len(), out.display());

    // The SNR channel as a grayscale picture, handy for eyeballing the prior.
    let first = &triples[0].fusion;
    let snr = RawImage::from_fn(first.height, first.width, "snr", |y, x| [first.get(y, x, 3); 3])?;
    snr.save_png(&out.join("snr_preview.png"))?;
    Ok(())
}

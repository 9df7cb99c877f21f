//! Full-reference and no-reference quality metrics, singly and for a directory.

use uwbright::imaging::gaussian_blur;
use uwbright::metrics::{evaluate_dir, psnr, ssim_metric, uiqm_breakdown, UiqmParams};
use uwbright::synth::underwater_scene;
use uwbright::RawImage;

fn blurred(img: &RawImage) -> uwbright::Result<RawImage> {
    let (h, w) = (img.height(), img.width());
    let planes: Vec<Vec<f32>> = (0..3).map(|c| gaussian_blur(&img.channel(c), h, w, 7, 2.0)).collect();
    RawImage::from_fn(h, w, format!("{}_blur", img.source_id), |y, x| {
        [0, 1, 2].map(|c| planes[c][y * w + x])
    })
}

fn main() -> uwbright::Result<()> {
    let sharp = underwater_scene(64, 64, 5);
    let soft = blurred(&sharp)?;
    println!("blurred vs sharp: PSNR {:.2} dB, SSIM {:.4}", psnr(&soft, &sharp)?, ssim_metric(&soft, &sharp)?);
    for (name, img) in [("sharp", &sharp), ("blurred", &soft)] {
        let b = uiqm_breakdown(img, &UiqmParams::default())?;
        println!("{name:>8}: {b:?}");
    }

    let dir = tempfile::tempdir().expect("temp dir");
    let (pred, refs) = (dir.path().join("pred"), dir.path().join("ref"));
    std::fs::create_dir_all(&pred).expect("mkdir");
    std::fs::create_dir_all(&refs).expect("mkdir");
    for i in 0..3 {
        let img = underwater_scene(64, 64, 10 + i);
        img.save_png(&refs.join(format!("img{i}.png")))?;
        blurred(&img)?.save_png(&pred.join(format!("img{i}_enhanced.png")))?;
    }
    let report = evaluate_dir(&pred, Some(&refs))?;
    print!("{}", report.to_csv());
    Ok(())
}

//! Image metrics and the report format.

use avatar_core::image::Image;
use avatar_core::metrics::{psnr, ssim, MetricReport, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let clean = Image::new(32, 32, 3, (0..32 * 32 * 3).map(|_| rng.gen()).collect())?;

    let mut report = MetricReport::new();
    for (i, sigma) in [0.01, 0.05, 0.1].into_iter().enumerate() {
        let noisy = Image::new(32, 32, 3, clean.data().iter().map(|v| (v + rng.gen_range(-sigma..sigma)).clamp(0.0, 1.0)).collect())?;
        let frame = format!("f{i:04}c1");
        report.insert(Task::NovelView, "psnr", &frame, psnr(&clean, &noisy, 1.0)?.db);
        report.insert(Task::NovelView, "ssim", &frame, ssim(&clean, &noisy)?);
    }
    report.add_means();
    print!("{report}");
    Ok(())
}

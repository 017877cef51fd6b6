//! Projects a handful of 3D Gaussians and composites them with the tiled
//! rasterizer, then compares against the per-pixel reference.

use avatar_core::image::write_png;
use avatar_core::kernels::covariance_matrix;
use avatar_core::model::random_quaternion;
use avatar_core::raster::{project_all, rasterize, rasterize_bruteforce, Camera};
use avatar_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cam = Camera::look_at([0.0, -3.0, 0.5], [0.0; 3], [0.0, 0.0, 1.0], 80.0, 64, 64)?;
    let n = 60;
    let mut means = Vec::new();
    let mut covs = Vec::new();
    for _ in 0..n {
        means.push([0; 3].map(|_| rng.gen_range(-0.6..0.6)));
        let sigma = covariance_matrix(random_quaternion(&mut rng), [0; 3].map(|_| rng.gen_range(0.02..0.12)));
        covs.push([sigma[0], sigma[1], sigma[2]].concat());
    }
    let means = Tensor::from_rows(&means);
    let covs = Tensor::matrix(n, 9, covs.concat())?;
    let opacity = Tensor::matrix(n, 1, (0..n).map(|_| rng.gen_range(0.3..0.9)).collect())?;
    let colors = Tensor::matrix(n, 3, (0..3 * n).map(|_| rng.gen()).collect())?;

    let splats = project_all(&cam, &means, &covs, &opacity, &colors);
    let fast = rasterize(&splats, &cam)?;
    let slow = rasterize_bruteforce(&splats, &cam)?;
    let diff = fast.color.data().iter().zip(slow.color.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("{} visible splats, tiled vs reference max diff {diff:.2e}", splats.len());

    let out = std::env::temp_dir().join("splats.png");
    write_png(&out, &fast.color)?;
    println!("wrote {}", out.display());
    Ok(())
}

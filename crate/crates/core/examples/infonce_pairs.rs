//! Contrastive matching of feature pairs and the co-visibility mask that
//! gates it.

use avatar_core::objectives::{covisibility_mask, infonce, GaussianSet};
use avatar_core::raster::Camera;
use avatar_tensor::geometry::normalize3;
use avatar_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 16;
    let dim = 8;
    let y = Tensor::matrix(n, dim, (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let noisy = Tensor::matrix(n, dim, y.data().iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect())?;
    let shuffled = Tensor::matrix(n, dim, (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    for (name, other) in [("matched", &noisy), ("unrelated", &shuffled)] {
        let mut tape = Tape::new();
        let a = tape.constant(y.clone());
        let b = tape.constant(other.clone());
        let l = infonce(&mut tape, a, b)?;
        println!("{name}: infonce per pair = {:.4} (ln N = {:.4})", tape.value(l).data()[0] / n as f64, (n as f64).ln());
    }

    // Points on a sphere, seen from two cameras 90 degrees apart.
    let mut means = Vec::new();
    let mut normals = Vec::new();
    for i in 0..400 {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / 400.0;
        let phi = i as f64 * 2.399_963;
        let r = (1.0 - z * z).sqrt();
        let p = [0.5 * r * phi.cos(), 0.5 * r * phi.sin(), 0.5 * z];
        means.push(p);
        normals.push(normalize3(p).unwrap());
    }
    let set = GaussianSet {
        means: Tensor::from_rows(&means),
        covariances: Tensor::matrix(400, 9, [0.002, 0.0, 0.0, 0.0, 0.002, 0.0, 0.0, 0.0, 0.002].repeat(400))?,
        opacity: Tensor::full([400, 1], 0.9),
        normals: Tensor::from_rows(&normals),
    };
    let cam_a = Camera::look_at([0.0, -3.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], 50.0, 40, 40)?;
    let cam_b = Camera::look_at([3.0, 0.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], 50.0, 40, 40)?;
    let mask = covisibility_mask(&set, &cam_a, &cam_b, 5.0)?;
    let facing = mask.gaussians.iter().filter(|&&v| v).count();
    println!("{facing} of 400 Gaussians face camera b, {} covisible pixels in camera a", mask.count());
    Ok(())
}

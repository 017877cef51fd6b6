//! Spherical harmonics on the environment probe: project a sky onto the
//! degree-3 basis and reconstruct it.

use avatar_core::sh::{probe_directions, sh_basis, sh_reconstruct, EnvLightProbe, SH_COEFFS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Brighter towards the zenith, with a warm patch to the east.
    let probe = EnvLightProbe::from_fn(|d| [0.55 + 0.45 * d[2] + 0.3 * d[0] * d[0], 0.5 + 0.4 * d[2], 0.4])?;

    let mut coeffs = [0.0; SH_COEFFS];
    for d in probe_directions() {
        let y = sh_basis(d.direction)?;
        let r = probe.sample(d.direction)[0];
        for k in 0..SH_COEFFS {
            coeffs[k] += r * y[k] * d.solid_angle;
        }
    }
    println!("red channel coefficients: {coeffs:.4?}");
    for dir in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]] {
        println!("{dir:?}: probe {:.3} reconstructed {:.3}", probe.sample(dir)[0], sh_reconstruct(&coeffs, dir)?);
    }

    let out = std::env::temp_dir().join("sky.pfm");
    probe.save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

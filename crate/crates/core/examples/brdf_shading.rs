//! Shading a single surface point under environment light with the
//! diffuse plus microfacet BRDF.

use std::f64::consts::PI;

use avatar_core::pbr::{shade, BrdfParams, ShadePoint};
use avatar_core::sh::{EnvLightProbe, SH_COEFFS};
use avatar_tensor::geometry::normalize3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut open = [0.0; SH_COEFFS];
    open[0] = 2.0 * PI.sqrt();
    let point = ShadePoint { normal: [0.0, 0.0, 1.0], wo: normalize3([0.4, 0.0, 1.0]).unwrap(), visibility: open };

    let white = EnvLightProbe::constant([1.0; 3]);
    let sunset = EnvLightProbe::from_fn(|d| [1.0 + d[0].max(0.0), 0.6, 0.3 + 0.5 * d[2].max(0.0)])?;

    for roughness in [0.1, 0.4, 0.9] {
        let p = BrdfParams::new([0.6, 0.4, 0.3], roughness);
        println!("roughness {roughness}: white {:.4?} sunset {:.4?}", shade(&point, &p, &white), shade(&point, &p, &sunset));
    }
    // A pure diffuse surface under a white probe returns its albedo.
    let diffuse = BrdfParams { albedo: [0.6, 0.4, 0.3], roughness: 0.5, f0: 0.0 };
    println!("diffuse under white: {:.4?}", shade(&point, &diffuse, &white));
    Ok(())
}

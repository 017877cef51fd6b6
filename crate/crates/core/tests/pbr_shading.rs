use std::f64::consts::PI;

use avatar_core::pbr::{brdf_eval, shade, visibility, BrdfParams, ShadePoint};
use avatar_core::sh::{probe_directions, sh_basis, EnvLightProbe, SH_COEFFS};
use avatar_tensor::geometry::{dot3, normalize3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const UP: [f64; 3] = [0.0, 0.0, 1.0];

fn full_visibility() -> [f64; SH_COEFFS] {
    let mut v = [0.0; SH_COEFFS];
    v[0] = 2.0 * PI.sqrt();
    v
}

fn diffuse(albedo: [f64; 3]) -> BrdfParams {
    BrdfParams { albedo, roughness: 0.5, f0: 0.0 }
}

fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        if let Some(n) = normalize3(v) {
            return n;
        }
    }
}

fn upper(rng: &mut impl Rng, n: [f64; 3]) -> [f64; 3] {
    loop {
        let v = random_unit(rng);
        if dot3(v, n) > 0.05 {
            return v;
        }
    }
}

#[test]
fn visibility_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let w = random_unit(&mut rng);
        assert!((visibility(&full_visibility(), w) - 1.0).abs() < 1e-12);
        assert_eq!(visibility(&[0.0; SH_COEFFS], w), 0.0);
    }
}

#[test]
fn hemisphere_mask_projection() {
    let mut v = [0.0; SH_COEFFS];
    for d in probe_directions() {
        if d.direction[2] > 0.0 {
            let y = sh_basis(d.direction).unwrap();
            for k in 0..SH_COEFFS {
                v[k] += y[k] * d.solid_angle;
            }
        }
    }
    assert!(visibility(&v, UP) > 0.8);
    assert!(visibility(&v, [0.0, 0.0, -1.0]) < 0.2);
}

#[test]
fn pure_diffuse_brdf() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = diffuse([0.2, 0.5, 0.9]);
    for _ in 0..100 {
        let (wi, wo) = (upper(&mut rng, UP), upper(&mut rng, UP));
        let f = brdf_eval(&p, UP, wi, wo);
        for k in 0..3 {
            assert_eq!(f[k], p.albedo[k] / PI);
        }
    }
    assert_eq!(brdf_eval(&p, UP, [0.0, 0.0, -1.0], UP), [0.0; 3]);
}

#[test]
fn brdf_reciprocity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let n = random_unit(&mut rng);
        let (wi, wo) = (upper(&mut rng, n), upper(&mut rng, n));
        let p = BrdfParams::new([rng.gen(), rng.gen(), rng.gen()], rng.gen_range(0.05..0.95));
        let (a, b) = (brdf_eval(&p, n, wi, wo), brdf_eval(&p, n, wo, wi));
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-12 * a[k].abs().max(1.0));
            assert!(a[k].is_finite() && a[k] >= 0.0);
        }
    }
}

#[test]
fn diffuse_albedo_integral() {
    let p = diffuse([1.0; 3]);
    let wo = normalize3([0.3, 0.1, 1.0]).unwrap();
    let v: f64 = probe_directions()
        .iter()
        .map(|d| brdf_eval(&p, UP, d.direction, wo)[0] * d.direction[2].max(0.0) * d.solid_angle)
        .sum();
    assert!((v - 1.0).abs() < 0.01, "{v}");
}

#[test]
fn shade_closed_forms() {
    let point = ShadePoint { normal: UP, wo: normalize3([0.2, 0.0, 1.0]).unwrap(), visibility: full_visibility() };
    let albedo = [0.3, 0.6, 0.9];
    let white = shade(&point, &diffuse(albedo), &EnvLightProbe::constant([1.0; 3]));
    for k in 0..3 {
        assert!((white[k] - albedo[k]).abs() / albedo[k] < 0.01, "{white:?}");
    }
    let black = shade(&point, &BrdfParams::new(albedo, 0.4), &EnvLightProbe::constant([0.0; 3]));
    assert_eq!(black, [0.0; 3]);
    let hidden = ShadePoint { visibility: [0.0; SH_COEFFS], ..point };
    assert_eq!(shade(&hidden, &BrdfParams::new(albedo, 0.4), &EnvLightProbe::constant([3.0; 3])), [0.0; 3]);
}

fn random_probe(rng: &mut impl Rng) -> EnvLightProbe {
    let mut radiance = Vec::new();
    for _ in probe_directions() {
        radiance.push([rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)]);
    }
    EnvLightProbe::new(radiance).unwrap()
}

#[test]
fn diffuse_energy_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let probe = random_probe(&mut rng);
        let n = random_unit(&mut rng);
        let point = ShadePoint { normal: n, wo: upper(&mut rng, n), visibility: full_visibility() };
        let out = shade(&point, &diffuse([rng.gen(), rng.gen(), rng.gen()]), &probe);
        for v in out {
            assert!(v <= probe.max_radiance() * (1.0 + 1e-9));
        }
    }
}

#[test]
fn shade_is_linear_in_the_probe() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (random_probe(&mut rng), random_probe(&mut rng));
    let sum = EnvLightProbe::new(a.radiance().iter().zip(b.radiance()).map(|(x, y)| [x[0] + y[0], x[1] + y[1], x[2] + y[2]]).collect())
        .unwrap();
    let mut vis = [0.0; SH_COEFFS];
    for v in vis.iter_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    vis[0] = 2.5;
    let n = random_unit(&mut rng);
    let point = ShadePoint { normal: n, wo: upper(&mut rng, n), visibility: vis };
    let p = BrdfParams::new([0.4, 0.5, 0.6], 0.35);
    let (sa, sb, ss) = (shade(&point, &p, &a), shade(&point, &p, &b), shade(&point, &p, &sum));
    for k in 0..3 {
        assert!((ss[k] - sa[k] - sb[k]).abs() < 1e-12 * ss[k].abs().max(1.0));
    }
}

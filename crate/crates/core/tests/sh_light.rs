use std::f64::consts::PI;

use avatar_core::sh::{
    direction_texel, probe_directions, sh_basis, sh_reconstruct, texel_direction, texel_solid_angle, EnvLightProbe,
    PROBE_COLS, PROBE_ROWS, SH_COEFFS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform_sphere(rng: &mut impl Rng) -> [f64; 3] {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(-PI..PI);
    let r = (1.0 - z * z).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

#[test]
fn dc_term_is_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let y = sh_basis(uniform_sphere(&mut rng)).unwrap();
        assert!((y[0] - 0.282_094_79).abs() < 1e-8);
    }
    let y = sh_basis([0.0, 0.0, 1.0]).unwrap();
    assert!((y[2] - 0.488_602_51).abs() < 1e-8);
}

#[test]
fn zero_direction_is_rejected() {
    assert!(sh_basis([0.0; 3]).is_err());
}

#[test]
fn monte_carlo_orthonormality() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 1_000_000;
    let mut gram = [[0.0; SH_COEFFS]; SH_COEFFS];
    for _ in 0..n {
        let y = sh_basis(uniform_sphere(&mut rng)).unwrap();
        for i in 0..SH_COEFFS {
            for j in i..SH_COEFFS {
                gram[i][j] += y[i] * y[j];
            }
        }
    }
    for i in 0..SH_COEFFS {
        for j in i..SH_COEFFS {
            let v = 4.0 * PI * gram[i][j] / n as f64;
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 0.02, "<Y{i}, Y{j}> = {v}");
        }
    }
}

#[test]
fn solid_angles_cover_the_sphere() {
    let dirs = probe_directions();
    assert_eq!(dirs.len(), PROBE_ROWS * PROBE_COLS);
    let total: f64 = dirs.iter().map(|d| d.solid_angle).sum();
    assert!((total - 4.0 * PI).abs() < 1e-9, "{total}");
    assert!(texel_solid_angle(PROBE_ROWS / 2) > texel_solid_angle(0));
    assert!(texel_solid_angle(PROBE_ROWS / 2) > texel_solid_angle(PROBE_ROWS - 1));
}

#[test]
fn cosine_lobe_quadrature() {
    let v: f64 = probe_directions().iter().map(|d| d.direction[2].max(0.0) * d.solid_angle).sum();
    assert!((v - PI).abs() / PI < 0.005, "{v}");
}

#[test]
fn constant_probe_samples_constant() {
    let probe = EnvLightProbe::constant([0.2, 0.4, 0.6]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        assert_eq!(probe.sample(uniform_sphere(&mut rng)), [0.2, 0.4, 0.6]);
    }
}

#[test]
fn single_lit_texel() {
    let mut probe = EnvLightProbe::constant([0.0; 3]);
    probe.set_texel(7, 40, [1.0, 1.0, 1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20_000 {
        let d = uniform_sphere(&mut rng);
        let lit = probe.sample(d)[0] > 0.0;
        assert_eq!(lit, direction_texel(d) == (7, 40));
    }
    assert_eq!(probe.sample(texel_direction(7, 40)), [1.0; 3]);
}

#[test]
fn texel_directions_round_trip() {
    for i in 0..PROBE_ROWS {
        for j in 0..PROBE_COLS {
            assert_eq!(direction_texel(texel_direction(i, j)), (i, j));
        }
    }
}

#[test]
fn reconstruct_dc_and_zero() {
    let mut c = [0.0; SH_COEFFS];
    let d = [0.3, -0.4, 0.5];
    assert_eq!(sh_reconstruct(&c, d).unwrap(), 0.0);
    c[0] = 2.0 * PI.sqrt();
    assert!((sh_reconstruct(&c, d).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn reconstruct_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let a: [f64; SH_COEFFS] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let b: [f64; SH_COEFFS] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let s: [f64; SH_COEFFS] = std::array::from_fn(|k| a[k] + b[k]);
        let d = uniform_sphere(&mut rng);
        let lhs = sh_reconstruct(&s, d).unwrap();
        let rhs = sh_reconstruct(&a, d).unwrap() + sh_reconstruct(&b, d).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

// Degree-3 projection of max(0, z) evaluated at +z. The band-limited value is
// 1/4 + 1/2 + 5/16 = 1.0625 (the l = 3 band vanishes).
#[test]
fn clamped_cosine_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 400_000;
    let mut c = [0.0; SH_COEFFS];
    for _ in 0..n {
        let d = uniform_sphere(&mut rng);
        let f = d[2].max(0.0);
        let y = sh_basis(d).unwrap();
        for k in 0..SH_COEFFS {
            c[k] += 4.0 * PI * f * y[k] / n as f64;
        }
    }
    let v = sh_reconstruct(&c, [0.0, 0.0, 1.0]).unwrap();
    assert!((v - 1.0625).abs() < 0.01, "{v}");
}

#[test]
fn probe_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("probe.pfm");
    let probe = EnvLightProbe::from_fn(|d| [d[0].abs() as f32 as f64, 0.5, (1.0 + d[2]) as f32 as f64]).unwrap();
    probe.save(&path).unwrap();
    assert_eq!(EnvLightProbe::load(&path).unwrap(), probe);
    assert!(EnvLightProbe::new(vec![[0.0; 3]; 10]).is_err());
    assert!(EnvLightProbe::new(vec![[-1.0, 0.0, 0.0]; PROBE_ROWS * PROBE_COLS]).is_err());
}

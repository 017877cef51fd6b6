use avatar_core::kernels::{covariance_matrix, KernelTape};
use avatar_core::model::{random_quaternion, GaussianAvatar, ModelConfig, Template, GEO_OUT};
use avatar_core::params::ParamSet;
use avatar_core::sh::SH_COEFFS;
use avatar_core::skinning::Skeleton;
use avatar_core::synth::generate_figure_with;
use avatar_tensor::check_leaf;
use avatar_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig { octaves: 3, encoder_width: 16, encoder_layers: 3, visibility_width: 8, skin_width: 8, window: 3, ..Default::default() }
}

fn two_joints() -> Skeleton {
    Skeleton::new(vec![None, Some(0)], vec![[0.0; 3], [0.0, 0.0, 1.0]]).unwrap()
}

fn random_cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0)]).collect()
}

#[test]
fn init_counts() {
    let one = GaussianAvatar::init_from_template(&Template::from_vertices(vec![[0.1, 0.2, 0.3]]), two_joints(), small_config(), 0).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one.positions().data(), &[0.1, 0.2, 0.3]);

    let dup = vec![[0.5, 0.5, 0.5], [0.5, 0.5, 0.5], [0.0, 0.0, 1.0]];
    let a = GaussianAvatar::init_from_template(&Template::from_vertices(dup), two_joints(), small_config(), 0).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a.positions().row(0), a.positions().row(1));

    assert!(GaussianAvatar::init_from_template(&Template::default(), two_joints(), small_config(), 0).is_err());
}

#[test]
fn invalid_templates_are_rejected() {
    let nan = Template::from_vertices(vec![[f64::NAN, 0.0, 0.0]]);
    assert!(GaussianAvatar::init_from_template(&nan, two_joints(), small_config(), 0).is_err());
    let t = Template { vertices: vec![[0.0; 3]; 2], normals: Some(vec![[0.0, 0.0, 1.0]]), weights: None };
    assert!(GaussianAvatar::init_from_template(&t, two_joints(), small_config(), 0).is_err());
    let t = Template { vertices: vec![[0.0; 3]; 2], normals: None, weights: Some(vec![vec![1.0]; 2]) };
    assert!(GaussianAvatar::init_from_template(&t, two_joints(), small_config(), 0).is_err());
    let bad = ModelConfig { window: 1, ..small_config() };
    assert!(GaussianAvatar::init_from_template(&Template::from_vertices(vec![[0.0; 3]]), two_joints(), bad, 0).is_err());
}

fn check_invariants(a: &GaussianAvatar) {
    let d = a.decode().unwrap();
    let limit = a.scale_limit();
    for i in 0..a.len() {
        assert!(d.opacity[i] > 0.0 && d.opacity[i] < 1.0);
        let qn: f64 = d.rotation[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((qn - 1.0).abs() < 1e-9);
        for k in 0..3 {
            assert!(d.scale[i][k] > 0.0 && d.scale[i][k] <= limit, "{:?} vs {limit}", d.scale[i]);
            assert!(d.albedo[i][k] > 0.0 && d.albedo[i][k] < 1.0);
        }
        let nn: f64 = d.normal[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((nn - 1.0).abs() < 1e-9);
        assert!(d.roughness[i] > 0.0 && d.roughness[i] < 1.0);
    }
}

#[test]
fn invariants_on_a_figure() {
    let fig = generate_figure_with(3, 4, 500).unwrap();
    let a = GaussianAvatar::init_from_template(&fig.template(), fig.skeleton(), small_config(), 7).unwrap();
    assert_eq!(a.len(), fig.vertices.len());
    check_invariants(&a);
}

#[test]
fn invariants_under_random_weights() {
    let mut a = GaussianAvatar::init_from_template(&Template::from_vertices(random_cloud(10_000, 1)), two_joints(), small_config(), 2)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let names: Vec<String> = a.params.names().cloned().collect();
    for name in names {
        let t = a.params.get_mut(&name).unwrap();
        for v in t.data_mut() {
            *v = rng.gen_range(-3.0..3.0);
        }
    }
    check_invariants(&a);
}

#[test]
fn zero_encoders_give_neutral_attributes() {
    let mut a = GaussianAvatar::init_from_template(&Template::from_vertices(random_cloud(20, 4)), two_joints(), small_config(), 5)
        .unwrap();
    for mlp in [a.geometry_mlp().clone(), a.material_mlp().clone(), a.color_mlp().clone()] {
        mlp.zero(&mut a.params);
    }
    let d = a.decode().unwrap();
    let s = 1.0 / (1.0 + 1.0 / a.scale_limit());
    for i in 0..a.len() {
        assert_eq!(d.opacity[i], 0.5);
        assert_eq!(d.rotation[i], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(d.albedo[i], [0.5; 3]);
        assert_eq!(d.roughness[i], 0.5);
        for k in 0..3 {
            assert!((d.scale[i][k] - s).abs() < 1e-15);
        }
    }
    assert!(d.color.unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn covariance_closed_forms() {
    let c = covariance_matrix([1.0, 0.0, 0.0, 0.0], [1.0, 2.0, 3.0]);
    assert_eq!(c, [[1.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 9.0]]);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let q = random_quaternion(&mut rng);
        let iso = covariance_matrix(q, [0.7; 3]);
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 0.49 } else { 0.0 };
                assert!((iso[a][b] - want).abs() < 1e-12);
            }
        }
        let s = [rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0)];
        let c = covariance_matrix(q, s);
        for a in 0..3 {
            for b in 0..3 {
                assert!((c[a][b] - c[b][a]).abs() < 1e-15);
            }
        }
        // Trace and determinant fix the eigenvalues at s².
        let tr = c[0][0] + c[1][1] + c[2][2];
        let det = c[0][0] * (c[1][1] * c[2][2] - c[1][2] * c[2][1]) - c[0][1] * (c[1][0] * c[2][2] - c[1][2] * c[2][0])
            + c[0][2] * (c[1][0] * c[2][1] - c[1][1] * c[2][0]);
        let s2: Vec<f64> = s.iter().map(|v| v * v).collect();
        assert!((tr - s2.iter().sum::<f64>()).abs() < 1e-12);
        assert!((det - s2.iter().product::<f64>()).abs() < 1e-12);
        for _ in 0..5 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let quad: f64 = (0..3).map(|a| (0..3).map(|b| x[a] * c[a][b] * x[b]).sum::<f64>()).sum();
            assert!(quad >= -1e-12);
        }
    }
}

#[test]
fn covariance_tape_matches_plain() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = random_quaternion(&mut rng);
    let s = [0.2, 0.3, 0.4];
    let mut tape = Tape::new();
    let qv = tape.param(Tensor::matrix(1, 4, q.to_vec()).unwrap());
    let sv = tape.param(Tensor::matrix(1, 3, s.to_vec()).unwrap());
    let c = tape.covariance(qv, sv).unwrap();
    let want: Vec<f64> = covariance_matrix(q, s).iter().flatten().copied().collect();
    for (a, b) in tape.value(c).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
    let zero = tape.constant(Tensor::zeros(vec![1, 4]));
    assert!(tape.covariance(zero, sv).is_err());
}

#[test]
fn dc_color_is_view_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut coeffs = vec![0.0; 3 * SH_COEFFS];
    coeffs[..3].copy_from_slice(&[0.4, 1.1, -0.3]);
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::matrix(1, 3 * SH_COEFFS, coeffs).unwrap());
    let mut first: Option<Vec<f64>> = None;
    for _ in 0..20 {
        let d = loop {
            let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            if let Some(n) = avatar_tensor::geometry::normalize3(v) {
                break n;
            }
        };
        let dv = tape.constant(Tensor::matrix(1, 3, d.to_vec()).unwrap());
        let out = tape.sh_eval(dv, c, 3).unwrap();
        let v = tape.value(out).data().to_vec();
        match &first {
            None => first = Some(v),
            Some(f) => assert_eq!(f, &v),
        }
    }
}

#[test]
fn opacity_gradient_matches_differences() {
    let a = GaussianAvatar::init_from_template(&Template::from_vertices(random_cloud(12, 11)), two_joints(), small_config(), 12)
        .unwrap();
    let mut tape = Tape::new();
    let bound = a.params.bind(&mut tape, |n| n.starts_with("geo."));
    let pe = tape.constant(a.encoding().clone());
    let g = a.encode_geometry(&mut tape, &bound, pe).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let r = tape.constant(Tensor::matrix(a.len(), 1, (0..a.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    let prod = tape.mul(g.opacity, r).unwrap();
    let out = tape.sum(prod).unwrap();
    let w = bound.var("geo.0.w").unwrap();
    let coords: Vec<usize> = (0..40).map(|k| k * 7).collect();
    let rep = check_leaf(&mut tape, out, w, Some(&coords), 1e-6).unwrap();
    assert!(rep.max_rel_error < 1e-6, "{}", rep.max_rel_error);
    assert_eq!(a.geometry_mlp().output_width(), GEO_OUT);
}

#[test]
fn checkpoint_round_trip() {
    let a = GaussianAvatar::init_from_template(&Template::from_vertices(random_cloud(30, 14)), two_joints(), small_config(), 15)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    a.params.save(&path).unwrap();
    let back = ParamSet::load(&path).unwrap();
    assert_eq!(back.len(), a.params.len());
    for (name, t) in a.params.iter() {
        let b = back.get(name).unwrap();
        assert_eq!(b.shape(), t.shape());
        assert!(b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
    }
    assert!(ParamSet::from_bytes(&[1, 2, 3]).is_err());
}

#[test]
fn removing_color_keeps_other_encoders() {
    let mut a = GaussianAvatar::init_from_template(&Template::from_vertices(random_cloud(5, 16)), two_joints(), small_config(), 17)
        .unwrap();
    assert!(a.has_color());
    let before = a.params.len();
    a.remove_color();
    assert!(!a.has_color());
    assert_eq!(a.params.len(), before - 2 * a.color_mlp().layers());
    assert!(a.decode().unwrap().color.is_none());
}

proptest::proptest! {
    #[test]
    fn covariance_is_symmetric_with_eigenvalues_s2(
        q in proptest::array::uniform4(-1.0f64..1.0),
        s in proptest::array::uniform3(0.01f64..2.0),
    ) {
        proptest::prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let c = covariance_matrix(q, s);
        for i in 0..3 {
            for j in 0..3 {
                proptest::prop_assert!((c[i][j] - c[j][i]).abs() < 1e-12);
            }
        }
        // trace and determinant of R S² Rᵀ
        let trace = c[0][0] + c[1][1] + c[2][2];
        let det = c[0][0] * (c[1][1] * c[2][2] - c[1][2] * c[2][1]) - c[0][1] * (c[1][0] * c[2][2] - c[1][2] * c[2][0])
            + c[0][2] * (c[1][0] * c[2][1] - c[1][1] * c[2][0]);
        let s2: f64 = s.iter().map(|v| v * v).sum();
        let p2: f64 = s.iter().map(|v| v * v).product();
        proptest::prop_assert!((trace - s2).abs() < 1e-10 * s2.max(1.0));
        proptest::prop_assert!((det - p2).abs() < 1e-9 * p2.max(1e-3));
    }
}

use avatar_core::eval::{evaluate_ground_truth, EvalProtocol};
use avatar_core::image::Image;
use avatar_core::metrics::{psnr, psnr_masked, ssim, MetricReport, Task, SSIM_WINDOW};
use avatar_core::synth::{generate_sequence, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut impl Rng, w: usize, h: usize, c: usize) -> Image {
    Image::new(w, h, c, (0..w * h * c).map(|_| rng.gen()).collect()).unwrap()
}

#[test]
fn psnr_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_image(&mut rng, 20, 10, 3);
    let p = psnr(&a, &a, 1.0).unwrap();
    assert!(p.infinite && p.db.is_infinite());

    let z = Image::zeros(20, 10, 3);
    let b = z.map(|_| 0.1);
    let p = psnr(&z, &b, 1.0).unwrap();
    assert!(!p.infinite);
    assert!((p.db - 20.0).abs() < 1e-9, "{}", p.db);
    assert!(psnr(&a, &Image::zeros(10, 10, 3), 1.0).is_err());
}

#[test]
fn psnr_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (w, h) = (rng.gen_range(1..30), rng.gen_range(1..30));
        let a = random_image(&mut rng, w, h, 3);
        let b = random_image(&mut rng, w, h, 3);
        let mut se = 0.0;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let d = a.pixel(x, y)[c] - b.pixel(x, y)[c];
                    se += d * d;
                }
            }
        }
        let want = 10.0 * (1.0 / (se / (w * h * 3) as f64)).log10();
        assert!((psnr(&a, &b, 1.0).unwrap().db - want).abs() < 1e-9);
    }
}

#[test]
fn masked_psnr_ignores_background() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_image(&mut rng, 8, 8, 3);
    let mut b = a.clone();
    let mut mask = Image::zeros(8, 8, 1);
    for x in 0..8 {
        mask.pixel_mut(x, 0)[0] = 1.0;
        b.pixel_mut(x, 5)[1] += 0.5;
    }
    assert!(psnr_masked(&a, &b, &mask, 1.0).unwrap().infinite);
    assert!(psnr_masked(&a, &b, &Image::zeros(8, 8, 1), 1.0).is_err());
}

fn gauss() -> Vec<f64> {
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

// Direct 2D-window reference, no separability.
fn ssim_reference(a: &Image, b: &Image) -> f64 {
    let g = gauss();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let mut total = 0.0;
    for c in 0..ch {
        let mut sum = 0.0;
        let mut count = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let wt = g[i] * g[j];
                        let (p, q) = (a.pixel(x0 + i, y0 + j)[c], b.pixel(x0 + i, y0 + j)[c]);
                        mx += wt * p;
                        my += wt * q;
                        sxx += wt * p * p;
                        syy += wt * q * q;
                        sxy += wt * p * q;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                sum += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    total / ch as f64
}

#[test]
fn ssim_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let a = random_image(&mut rng, 24, 19, 3);
        let b = Image::new(24, 19, 3, a.data().iter().map(|v| (v + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0)).collect())
            .unwrap();
        let (got, want) = (ssim(&a, &b).unwrap(), ssim_reference(&a, &b));
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert!((-1.0..=1.0).contains(&got));
    }
}

#[test]
fn ssim_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_image(&mut rng, 16, 16, 1);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);

    let (c1v, c2v) = (0.3, 0.7);
    let x = Image::zeros(16, 16, 1).map(|_| c1v);
    let y = Image::zeros(16, 16, 1).map(|_| c2v);
    let k1 = 0.01f64.powi(2);
    let want = (2.0 * c1v * c2v + k1) / (c1v * c1v + c2v * c2v + k1);
    assert!((ssim(&x, &y).unwrap() - want).abs() < 1e-12);

    let checker = Image::new(16, 16, 1, (0..256).map(|i| ((i % 16 + i / 16) % 2) as f64).collect()).unwrap();
    let inv = checker.map(|v| 1.0 - v);
    let s = ssim(&checker, &inv).unwrap();
    assert!(s < -0.95, "{s}");

    let small = Image::zeros(SSIM_WINDOW - 1, 20, 1);
    assert!(ssim(&small, &small).is_err());
}

#[test]
fn report_text_round_trip() {
    let mut r = MetricReport::new();
    r.insert(Task::NovelView, "psnr", "f0001c1", 31.5);
    r.insert(Task::NovelView, "psnr", "f0003c2", 29.5);
    r.insert(Task::Relight, "ssim", "f0000c0", 0.9);
    r.insert(Task::NovelPose, "psnr", "f0190c0", f64::INFINITY);
    r.add_means();
    assert_eq!(r.get(Task::NovelView, "psnr", "mean"), Some(30.5));
    let text = r.to_string();
    assert!(text.lines().any(|l| l == "novel_view.psnr.mean = 30.5"));
    assert!(text.lines().any(|l| l == "novel_pose.psnr.f0190c0 = inf"));
    let back = MetricReport::parse(&text).unwrap();
    assert_eq!(back, r);
    assert!(MetricReport::parse("novel_view.psnr = 3").is_err());
    assert!(MetricReport::parse("bogus.psnr.x = 3").is_err());
    assert!(MetricReport::parse("relight.psnr.x = abc").is_err());
}

#[test]
fn ground_truth_scores_perfectly() {
    let spec = SceneSpec { frames: 10, cameras: 2, samples: 120, image_size: 24, focal: 36.0, ..Default::default() };
    let data = generate_sequence(&spec).unwrap();
    let protocol = EvalProtocol::standard(&data);
    assert!(protocol.novel_view.iter().all(|&(t, c)| t < data.training_frames() && c != data.training_camera()));
    assert!(protocol.novel_pose.iter().all(|&(t, c)| t >= data.training_frames() && c == data.training_camera()));
    let r = evaluate_ground_truth(&data, &protocol).unwrap();
    for task in [Task::NovelView, Task::NovelPose, Task::Relight] {
        assert!(r.mean(task, "psnr").unwrap().is_infinite());
        assert!((r.mean(task, "ssim").unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.mean(task, "perceptual_proxy").unwrap(), 0.0);
    }
}

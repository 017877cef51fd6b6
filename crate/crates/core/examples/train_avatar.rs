//! Two-stage training on a small synthetic scene, followed by relighting
//! under a new probe.

use avatar_core::eval::{evaluate, render_avatar, EvalProtocol, Lighting};
use avatar_core::image::write_png;
use avatar_core::metrics::Task;
use avatar_core::sh::EnvLightProbe;
use avatar_core::synth::{generate_sequence, SceneSpec};
use avatar_core::trainer::{Stage, TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec { frames: 30, cameras: 3, samples: 300, image_size: 48, focal: 70.0, ..SceneSpec::default() };
    let data = generate_sequence(&spec)?;
    let config = TrainConfig { stage1_iters: 300, stage2_iters: 150, ..TrainConfig::default() };
    let mut trainer = Trainer::new(&data, config)?;

    for stage in [Stage::One, Stage::Two] {
        trainer.run_stage(&data, stage, None, |r| {
            if r.iteration % 50 == 0 {
                println!("stage {} iter {:4} loss {:.5}", r.stage, r.iteration, r.total);
            }
        })?;
    }

    let report = evaluate(&trainer.avatar, &data, &EvalProtocol::standard(&data))?;
    for task in [Task::NovelView, Task::NovelPose, Task::Relight] {
        println!("{task:?}: psnr {:.2}", report.mean(task, "psnr").unwrap_or(f64::NAN));
    }

    let dusk = EnvLightProbe::from_fn(|d| [0.9 + 0.6 * d[0].max(0.0), 0.5, 0.4 + 0.4 * d[2].max(0.0)])?;
    let t = data.poses.len() - 1;
    let img = render_avatar(&trainer.avatar, &data.poses, t, &data.cameras[1], Lighting::Probe(&dusk), [1.0; 3])?;
    let out = std::env::temp_dir().join("relit.png");
    write_png(&out, &img.color)?;
    println!("wrote {}", out.display());
    Ok(())
}

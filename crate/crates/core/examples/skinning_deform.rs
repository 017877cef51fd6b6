//! Forward kinematics, linear blend skinning, and pose-dependent weights
//! predicted from a window of recent poses.

use avatar_core::model::{GaussianAvatar, ModelConfig, Template};
use avatar_core::skinning::{blend_transforms, PoseSequence};
use avatar_core::synth::{generate_figure, generate_poses};
use avatar_tensor::Tape;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let figure = generate_figure(3, 4)?;
    let skeleton = figure.skeleton();
    let poses = generate_poses(4, 30, 3);

    // Blend the joint transforms of frame 20 with the generator's weights.
    let set = skeleton.forward_kinematics(&poses[20])?;
    let x = figure.vertices[0];
    let b = blend_transforms(&figure.weights[0], &set)?;
    let mut y = b.translation;
    for r in 0..3 {
        for c in 0..3 {
            y[r] += b.rotation[r][c] * x[c];
        }
    }
    println!("vertex 0 rest {x:.3?} posed {y:.3?}");

    let config = ModelConfig { window: 5, ..ModelConfig::default() };
    let avatar = GaussianAvatar::init_from_template(&Template::from_vertices(figure.vertices.clone()), skeleton, config, 0)?;
    for t in [5, 20] {
        let seq = PoseSequence::window(&poses, t, 5)?;
        let mut tape = Tape::new();
        let bound = avatar.params.bind(&mut tape, |_| false);
        let pe = tape.constant(avatar.encoding().clone());
        let w = avatar.skinning_weights(&mut tape, &bound, pe, &seq)?;
        println!("frame {t}: predicted weights of Gaussian 0 = {:.4?}", tape.value(w).row(0));
    }
    Ok(())
}

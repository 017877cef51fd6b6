//! Generates a small synthetic capture and writes it to disk.

use avatar_core::synth::{generate_sequence, SceneDataset, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec { frames: 12, cameras: 3, samples: 300, image_size: 48, focal: 70.0, ..SceneSpec::default() };
    let data = generate_sequence(&spec)?;
    println!(
        "{} frames x {} cameras, {} Gaussians, {} training frames from camera {}",
        data.poses.len(),
        data.cameras.len(),
        data.figure.vertices.len(),
        data.training_frames(),
        data.training_camera()
    );

    let dir = std::env::temp_dir().join("avatar-synth");
    data.export(&dir)?;
    let back = SceneDataset::import(&dir)?;
    println!("exported to {}, checksum {}", dir.display(), back.checksum());
    Ok(())
}

//! Rebuilds the checkpoints under `tests/fixtures/` and records the values
//! the CLI tests compare against.

use std::path::Path;

use pointssm::checkpoint::{load_checkpoint, save_checkpoint};
use pointssm::commands::{cmd_pretrain, cmd_train, TrainArgs};
use pointssm_core::data::generate_named;
use pointssm_core::geometry::chamfer_distance;
use pointssm_core::model::{init_model, prepare, reconstruct, Stage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn args(dir: &Path, out: &str, pretrained: Option<&Path>) -> TrainArgs {
    TrainArgs {
        config: Some(dir.join("tiny.toml")),
        sets: vec![],
        epochs: None,
        seed: Some(0),
        block_kind: None,
        pretrained: pretrained.map(Path::to_path_buf),
        freeze_encoder: false,
        out: dir.join(out),
        quiet: true,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    cmd_pretrain(&args(&dir, "tiny_pretrain", None))?;
    let pre_path = dir.join("tiny_pretrain/pretrain.ckpt");

    // Reconstruction error of the shipped sample before and after training.
    let mut ck = load_checkpoint(&pre_path)?;
    let cloud = generate_named("sphere", ck.model.num_points, 0.0, 0)?;
    let prep = prepare(&cloud, &ck.model, None)?;
    let untrained = init_model(
        &ck.model,
        Stage::Pretrain,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let before = reconstruct(&prep, &ck.model, &untrained, 0, 0)?;
    let after = reconstruct(&prep, &ck.model, &ck.params, 0, 0)?;
    let bound = chamfer_distance(&before.reconstructed_points, cloud.points())?;
    let trained = chamfer_distance(&after.reconstructed_points, cloud.points())?;
    ck.metrics
        .insert("sphere_0_untrained_chamfer".into(), bound);
    ck.metrics.insert("sphere_0_chamfer".into(), trained);
    save_checkpoint(&pre_path, &ck)?;
    println!("sphere:0 chamfer {trained} (untrained {bound})");

    cmd_train(&args(&dir, "tiny_train", Some(&pre_path)))?;
    Ok(())
}

//! Central-difference check of the analytic gradient of the joint
//! contrastive + captioning objective, on a random subset of the parameters
//! of a freshly initialized toy model.

use pathvl::coca::{joint_loss_at, Pair, ToyConfig, ToyModel, Vocab};
use pathvl::numerics::{finite_diff_check_coords, SeededRng};
use pathvl::pipeline::{training_pairs, training_rois, PipelineConfig};
use pathvl::Result;

fn main() -> Result<()> {
    let config = PipelineConfig::quick(0);
    let samples = training_rois(&config)?;
    let (vocab, pairs): (Vocab, Vec<Pair>) = training_pairs(&config, &samples[..4])?;
    let model_cfg = ToyConfig {
        vocab_size: vocab.len(),
        ..config.model.clone()
    };
    let mut rng = SeededRng::new(1);
    let model = ToyModel::new(model_cfg, &mut rng)?;
    let params = model.params().to_vec();
    println!("{} parameters, batch of {}", params.len(), pairs.len());

    for (name, cap, con) in [
        ("contrastive", 0.0, 1.0),
        ("captioning", 1.0, 0.0),
        ("joint", 2.0, 1.0),
    ] {
        let out = joint_loss_at(&model, &params, &pairs, cap, con)?;
        let coords: Vec<usize> = (0..40).map(|_| rng.below(params.len())).collect();
        let err = finite_diff_check_coords(
            |p| joint_loss_at(&model, p, &pairs, cap, con).map_or(f64::NAN, |o| o.loss),
            &out.grad,
            &params,
            1e-5,
            &coords,
        )?;
        println!(
            "{name:<12} loss {:>8.4}  max relative error over 40 coordinates {err:.2e}",
            out.loss
        );
    }
    for (name, start, len) in model.param_names().into_iter().take(6) {
        println!("  {name:<28} offset {start:>6}, {len} values");
    }
    Ok(())
}

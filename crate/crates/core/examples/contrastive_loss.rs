//! Symmetric image-text contrastive loss on random unit embeddings, with a
//! finite-difference check of its gradient.

use pathvl::coca::{contrastive_loss, ContrastiveOutputs};
use pathvl::numerics::{finite_diff_check, SeededRng};
use pathvl::{Embedding, Result};

fn random_unit(rng: &mut SeededRng, dim: usize) -> Result<Embedding> {
    Embedding::normalize((0..dim).map(|_| rng.normal()).collect())
}

fn main() -> Result<()> {
    let mut rng = SeededRng::new(7);
    let (batch, dim, tau) = (6, 16, 10.0);
    let u: Vec<Embedding> = (0..batch)
        .map(|_| random_unit(&mut rng, dim))
        .collect::<Result<_>>()?;
    let v: Vec<Embedding> = (0..batch)
        .map(|_| random_unit(&mut rng, dim))
        .collect::<Result<_>>()?;

    let out = ContrastiveOutputs::new(&u, &v, tau)?;
    let loss = contrastive_loss(&out)?;
    println!(
        "random pairs:  loss {:.4}  (ln {batch} = {:.4})",
        loss.loss,
        (batch as f64).ln()
    );

    // matched pairs drive the loss toward zero
    let aligned = ContrastiveOutputs::new(&u, &u, tau)?;
    println!(
        "aligned pairs: loss {:.4}",
        contrastive_loss(&aligned)?.loss
    );

    let point = out.u.data().to_vec();
    let err = finite_diff_check(
        |p| {
            let mut o = out.clone();
            o.u.data_mut().copy_from_slice(p);
            contrastive_loss(&o).map_or(f64::NAN, |l| l.loss)
        },
        loss.du.data(),
        &point,
        1e-5,
    )?;
    println!("max relative gradient error over U: {err:.2e}");
    Ok(())
}

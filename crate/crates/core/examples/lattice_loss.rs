//! Transducer loss on a single random lattice: forward-backward against brute-force
//! alignment enumeration, plus a finite-difference probe of the logit gradient.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnnt_mwer::lattice::{
    enumerate_alignments, log_sum_exp, normalize, rnnt_loss_and_grad, sequence_log_prob, LogitLattice,
};

fn main() -> rnnt_mwer::Result<()> {
    let (t, k) = (4, 4);
    let y = vec![2, 1, 3];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let values = Array3::from_shape_fn((t, y.len() + 1, k), |_| rng.gen_range(-2.0..2.0));
    let lattice = LogitLattice::new(values, 0)?;

    let post = normalize(&lattice, 1.0)?;
    let fast = sequence_log_prob(&post, &y)?;
    let paths = enumerate_alignments(t, y.len())?;
    let brute = log_sum_exp(&paths.iter().map(|p| p.log_prob(&post, &y)).collect::<Vec<_>>());
    println!("log P(y|x) forward-backward {fast:.12}");
    println!("log P(y|x) over {} alignments {brute:.12}", paths.len());

    let (loss, grad) = rnnt_loss_and_grad(&lattice, &y, 1.0)?;
    println!("loss {loss:.6}");

    let h = 1e-5;
    let idx = (1, 1, 1);
    let shifted = |d: f64| {
        let mut v = lattice.values().clone();
        v[idx] += d;
        rnnt_loss_and_grad(&LogitLattice::new(v, 0).unwrap(), &y, 1.0).unwrap().0
    };
    let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
    println!("dL/dz{idx:?} analytic {:.8} finite difference {fd:.8}", grad[idx]);

    for temp in [0.8, 1.2] {
        let (l, _) = rnnt_loss_and_grad(&lattice, &y, temp)?;
        println!("temperature {temp}: loss {l:.6}");
    }
    Ok(())
}

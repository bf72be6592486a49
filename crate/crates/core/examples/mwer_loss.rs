//! MWER loss on a hand-written N-best list, then the full gradient through a
//! small model where every hypothesis is rescored over all of its alignments.

use ndarray::Array2;
use rnnt_mwer::model::{ModelDims, ModelParams};
use rnnt_mwer::mwer::{mwer_full_grad, mwer_loss, mwer_score_grads, Hypothesis, MwerConfig, NBestList, ScoreSource};

fn main() -> rnnt_mwer::Result<()> {
    let reference = vec![1, 2, 3];
    let hyps = vec![
        Hypothesis::new(vec![1, 2, 3], -2.0, ScoreSource::Beam),
        Hypothesis::new(vec![1, 3], -1.5, ScoreSource::Beam),
        Hypothesis::new(vec![1, 2, 2, 3], -3.0, ScoreSource::Beam),
    ];
    let list = NBestList::new("demo", hyps, reference)?;
    let (loss, expected) = mwer_loss(&list)?;
    println!("errors {:?}", list.errors());
    println!("loss {loss:.6}  expected errors {expected:.6}");
    for (h, g) in list.hypotheses.iter().zip(mwer_score_grads(&list)?) {
        println!("  {:?} dL/dscore {g:+.6}", h.tokens);
    }

    let dims = ModelDims {
        input_dim: 3,
        enc_hidden: 6,
        embed_dim: 4,
        pred_hidden: 6,
        joint_dim: 8,
        vocab_size: 4,
        blank_id: 0,
    };
    let params = ModelParams::init(3, dims)?;
    let features = Array2::from_shape_fn((6, 3), |(t, d)| ((t * 3 + d) as f64 * 0.7).sin());
    let enc = params.encode(&features)?;
    let full = mwer_full_grad(&enc, &list, &MwerConfig::default())?;
    println!("with exact scores: loss {:.6}", full.loss);
    for (h, g) in full.hypotheses.iter().zip(&full.lattice_grads) {
        println!("  {:?} exact log P {:.4}  |dL/dlogits| {:.3e}", h.tokens, h.log_score, g.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok(())
}

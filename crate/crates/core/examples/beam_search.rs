//! Beam search with hypothesis merging on a small random model, compared with
//! exhaustive enumeration of every short label sequence.

use ndarray::Array2;
use rnnt_mwer::decoder::{beam_search, exhaustive_decode, DecodeConfig};
use rnnt_mwer::model::{ModelDims, ModelParams};

fn main() -> rnnt_mwer::Result<()> {
    let dims = ModelDims {
        input_dim: 2,
        enc_hidden: 4,
        embed_dim: 2,
        pred_hidden: 4,
        joint_dim: 6,
        vocab_size: 4,
        blank_id: 0,
    };
    let mut params = ModelParams::init(3, dims)?;
    params.out_w.mapv_inplace(|v| 3.0 * v);
    params.out_b[0] -= 1.0;
    let features = Array2::from_shape_fn((4, 2), |(t, d)| if (t + d) % 2 == 0 { 0.8 } else { -0.5 });
    let enc = params.encode(&features)?;

    let oracle = exhaustive_decode(&enc, 6, 1.0, 3)?;
    println!("exhaustive top 3:");
    for h in &oracle {
        println!("  {:?} {:.6}", h.tokens, h.log_score);
    }
    for beam in [1, 4, 16] {
        for temperature in [1.0, 1.2] {
            let cfg = DecodeConfig { beam_size: beam, temperature, ..Default::default() };
            let hyps = beam_search(&enc, &cfg)?;
            println!("beam {beam:>2} temp {temperature}: top {:?} {:.6} ({} hypotheses)", hyps[0].tokens, hyps[0].log_score, hyps.len());
        }
    }
    Ok(())
}

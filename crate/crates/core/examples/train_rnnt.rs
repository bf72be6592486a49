//! Generate a synthetic task and train a transducer with maximum likelihood.
//!
//! `cargo run --release --example train_rnnt -- [seed]`

use rnnt_mwer::data::{compute_wer, reference_map, top1_map};
use rnnt_mwer::model::{ModelDims, ModelParams};
use rnnt_mwer::synth::{gen_synth, SynthConfig};
use rnnt_mwer::trainer::{decode_nbest, train_rnnt, MwerTrainConfig, RnntTrainConfig, TrainSchedule};

fn main() -> rnnt_mwer::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let cfg = SynthConfig { num_train: 1000, num_dev: 200, num_test: 0, noise: 0.4, ..Default::default() };
    let task = gen_synth(seed, &cfg)?;
    let dims = ModelDims {
        input_dim: cfg.feature_dim,
        enc_hidden: 12,
        embed_dim: 8,
        pred_hidden: 12,
        joint_dim: 12,
        vocab_size: task.vocab.len(),
        blank_id: task.vocab.blank_id(),
    };
    let train = RnntTrainConfig {
        steps: 2000,
        schedule: TrainSchedule { warmup_steps: 100, constant_steps: 1000, decay_steps: 900, lr_constant: 5e-3, lr_final: 1e-4 },
        seed,
        log_every: 0,
        ..Default::default()
    };
    let init = ModelParams::init(seed, dims)?;
    println!("{} parameters, {} training utterances", init.num_params(), task.train.len());
    let result = train_rnnt(&task.train, init, &train, None)?;
    for (i, chunk) in result.losses.chunks(250).enumerate() {
        println!("steps {:>4}..{:>4}  mean loss {:.4}", i * 250, i * 250 + chunk.len(), chunk.iter().sum::<f64>() / chunk.len() as f64);
    }

    let decode = MwerTrainConfig { use_eos: false, ..Default::default() }.decode_config(&task.vocab);
    let utts: Vec<_> = task.dev.iter().collect();
    let lists: Vec<_> = decode_nbest(&result.params, &utts, &decode, 4, false, &task.vocab, 1)?.into_iter().flatten().collect();
    println!("{}", compute_wer(&top1_map(&lists)?, &reference_map(&task.dev))?);
    Ok(())
}

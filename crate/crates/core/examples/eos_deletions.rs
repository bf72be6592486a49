//! Training with an end-of-sentence token raises deletions on utterances with
//! pauses; MWER fine-tuning wins most of them back.

use rnnt_mwer::model::{ModelDims, ModelParams};
use rnnt_mwer::synth::{gen_synth, SynthConfig, SynthTask};
use rnnt_mwer::trainer::{evaluate, train_mwer_on_the_fly, train_rnnt, DevPoint, MwerTrainConfig, RnntTrainConfig, TrainSchedule};

fn seed_model(task: &SynthTask, use_eos: bool) -> rnnt_mwer::Result<ModelParams> {
    let dims = ModelDims {
        input_dim: 8,
        enc_hidden: 12,
        embed_dim: 8,
        pred_hidden: 12,
        joint_dim: 12,
        vocab_size: task.vocab.len(),
        blank_id: task.vocab.blank_id(),
    };
    let cfg = RnntTrainConfig {
        steps: 3000,
        schedule: TrainSchedule { warmup_steps: 100, constant_steps: 1500, decay_steps: 1400, lr_constant: 5e-3, lr_final: 1e-4 },
        seed: 1,
        use_eos,
        log_every: 0,
        ..Default::default()
    };
    Ok(train_rnnt(&task.train, ModelParams::init(1, dims)?, &cfg, task.vocab.eos_id())?.params)
}

fn show(name: &str, p: &DevPoint) {
    println!("{name:<16} WER {:.4}  deletions {}", p.wer, p.deletions);
}

fn main() -> rnnt_mwer::Result<()> {
    let cfg = SynthConfig { num_train: 2000, num_dev: 600, num_test: 0, noise: 0.6, confusability: 0.3, pause_prob: 0.3, ..Default::default() };
    let task = gen_synth(1, &cfg)?;
    let total = (2 * task.train.len().div_ceil(8)) as u64;
    let mwer = |use_eos| MwerTrainConfig {
        epochs: 2,
        schedule: TrainSchedule { warmup_steps: 10, constant_steps: total / 2, decay_steps: total / 2, lr_constant: 1e-3, lr_final: 1e-4 },
        use_eos,
        dev_every: 0,
        ..Default::default()
    };

    show("no EOS", &evaluate(&seed_model(&task, false)?, &task.dev, &mwer(false), &task.vocab, 1, 0)?);
    let eos = seed_model(&task, true)?;
    show("EOS", &evaluate(&eos, &task.dev, &mwer(true), &task.vocab, 1, 0)?);
    let tuned = train_mwer_on_the_fly(&task.train, &task.dev, eos, &mwer(true), &task.vocab)?;
    show("EOS + MWER", tuned.dev_history.last().unwrap());
    Ok(())
}

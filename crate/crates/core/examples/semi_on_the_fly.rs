//! MWER fine-tuning with N-best lists regenerated every batch versus once per
//! split, with the split files, checkpoints and manifest written to disk.

use rnnt_mwer::model::{ModelDims, ModelParams};
use rnnt_mwer::synth::{gen_synth, SynthConfig};
use rnnt_mwer::trainer::{
    train_mwer_on_the_fly, train_mwer_semi, train_rnnt, MwerTrainConfig, MwerTrainResult, RnntTrainConfig,
    SemiOnTheFlyPlan, TrainSchedule,
};

fn report(name: &str, r: &MwerTrainResult) {
    let (first, last) = (&r.dev_history[0], r.dev_history.last().unwrap());
    println!(
        "{name:<14} steps {:>4}  dev WER {:.4} -> {:.4}  expected errors {:.4} -> {:.4}  decode {:.1}s",
        r.steps, first.wer, last.wer, first.expected_errors, last.expected_errors, r.decode_seconds
    );
}

fn main() -> rnnt_mwer::Result<()> {
    let cfg = SynthConfig {
        num_train: 2000,
        num_dev: 600,
        num_test: 0,
        noise: 0.6,
        group_size: 4,
        confusability: 0.7,
        ..Default::default()
    };
    let task = gen_synth(1, &cfg)?;
    let dims = ModelDims {
        input_dim: cfg.feature_dim,
        enc_hidden: 12,
        embed_dim: 8,
        pred_hidden: 12,
        joint_dim: 12,
        vocab_size: task.vocab.len(),
        blank_id: task.vocab.blank_id(),
    };
    let rnnt = RnntTrainConfig {
        steps: 3000,
        schedule: TrainSchedule { warmup_steps: 100, constant_steps: 1500, decay_steps: 1400, lr_constant: 5e-3, lr_final: 1e-4 },
        seed: 1,
        log_every: 0,
        ..Default::default()
    };
    let seed = train_rnnt(&task.train, ModelParams::init(1, dims)?, &rnnt, None)?.params;

    let epochs = 4;
    let total = (epochs * task.train.len().div_ceil(8)) as u64;
    let mwer = MwerTrainConfig {
        epochs,
        schedule: TrainSchedule { warmup_steps: 10, constant_steps: total / 2, decay_steps: total / 2, lr_constant: 1e-3, lr_final: 1e-4 },
        use_eos: false,
        dev_every: 0,
        ..Default::default()
    };
    report("on-the-fly", &train_mwer_on_the_fly(&task.train, &task.dev, seed.clone(), &mwer, &task.vocab)?);

    let ids: Vec<String> = task.train.iter().map(|u| u.id.clone()).collect();
    let out = std::env::temp_dir().join("rnnt-mwer-semi");
    let mut plan = SemiOnTheFlyPlan::contiguous(&ids, 8, epochs, 2)?;
    plan.out_dir = Some(out.clone());
    report("semi K=8", &train_mwer_semi(&task.train, &task.dev, seed, &plan, &mwer, &task.vocab)?);
    println!("split N-best lists and checkpoints in {}", out.display());
    Ok(())
}

use rnnt_mwer::data::Utterance;
use rnnt_mwer::model::{ModelDims, ModelParams};
use rnnt_mwer::mwer::edit_distance;
use rnnt_mwer::synth::{gen_synth, SynthConfig, SynthTask};
use rnnt_mwer::trainer::{decode_nbest, train_rnnt, MwerTrainConfig, RnntTrainConfig, TrainSchedule};

fn train(task: &SynthTask, steps: u64) -> ModelParams {
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
        steps,
        schedule: TrainSchedule {
            warmup_steps: 100,
            constant_steps: steps / 2,
            decay_steps: steps / 2 - 100,
            lr_constant: 5e-3,
            lr_final: 1e-4,
        },
        log_every: 0,
        ..Default::default()
    };
    train_rnnt(&task.train, ModelParams::init(1, dims).unwrap(), &cfg, None).unwrap().params
}

/// (top-1 errors, oracle errors, reference words) over the dev set.
fn dev_errors(task: &SynthTask, params: &ModelParams) -> (usize, usize, usize) {
    let cfg = MwerTrainConfig { use_eos: false, ..Default::default() };
    let utts: Vec<&Utterance> = task.dev.iter().collect();
    let lists = decode_nbest(params, &utts, &cfg.decode_config(&task.vocab), 4, false, &task.vocab, 1).unwrap();
    let (mut top, mut oracle, mut words) = (0, 0, 0);
    for (u, l) in task.dev.iter().zip(&lists) {
        let l = l.as_ref().expect("non-empty N-best");
        let errs: Vec<usize> = l.hypotheses.iter().map(|h| edit_distance(&h.tokens, &u.reference).total()).collect();
        top += errs[0];
        oracle += errs.iter().min().unwrap();
        words += u.reference.len();
    }
    (top, oracle, words)
}

#[test]
fn noiseless_task_is_learned_perfectly() {
    let cfg = SynthConfig { num_train: 300, num_dev: 50, num_test: 0, noise: 0.0, ..Default::default() };
    let task = gen_synth(5, &cfg).unwrap();
    let (top, _, words) = dev_errors(&task, &train(&task, 2000));
    assert_eq!(top, 0, "{top} errors over {words} dev words");
}

#[test]
fn confusable_task_leaves_room_below_top1() {
    let cfg = SynthConfig {
        num_train: 300,
        num_dev: 100,
        num_test: 0,
        noise: 0.6,
        group_size: 4,
        confusability: 0.7,
        ..Default::default()
    };
    let task = gen_synth(5, &cfg).unwrap();
    let (top, oracle, words) = dev_errors(&task, &train(&task, 1000));
    assert!(oracle < top, "oracle {oracle} vs top-1 {top} errors over {words} words");
}

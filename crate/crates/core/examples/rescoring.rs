//! Second-pass rescoring: exact transducer scores, then an add-delta n-gram LM.

use rnnt_mwer::data::{compute_wer, reference_map, top1_map};
use rnnt_mwer::model::{ModelDims, ModelParams};
use rnnt_mwer::rescore::{lm_rescore, rnnt_rescore, NGramLM, RescoreConfig};
use rnnt_mwer::synth::{gen_synth, SynthConfig};
use rnnt_mwer::trainer::{decode_nbest, train_rnnt, MwerTrainConfig, RnntTrainConfig, TrainSchedule};

fn main() -> rnnt_mwer::Result<()> {
    let cfg = SynthConfig { num_train: 400, num_dev: 100, num_test: 0, noise: 0.6, group_size: 3, confusability: 0.6, ..Default::default() };
    let task = gen_synth(2, &cfg)?;
    let vocab = &task.vocab;
    let dims = ModelDims {
        input_dim: 8,
        enc_hidden: 12,
        embed_dim: 8,
        pred_hidden: 12,
        joint_dim: 12,
        vocab_size: vocab.len(),
        blank_id: vocab.blank_id(),
    };
    let train = RnntTrainConfig {
        steps: 800,
        schedule: TrainSchedule { warmup_steps: 50, constant_steps: 400, decay_steps: 350, lr_constant: 5e-3, lr_final: 1e-4 },
        log_every: 0,
        ..Default::default()
    };
    let params = train_rnnt(&task.train, ModelParams::init(2, dims)?, &train, None)?.params;

    let decode = MwerTrainConfig { use_eos: false, ..Default::default() }.decode_config(vocab);
    let utts: Vec<_> = task.dev.iter().collect();
    let lists: Vec<_> = decode_nbest(&params, &utts, &decode, 4, false, vocab, 1)?.into_iter().flatten().collect();
    let refs = reference_map(&task.dev);
    println!("beam scores      WER {:.4}", compute_wer(&top1_map(&lists)?, &refs)?.wer);

    let mut exact = Vec::new();
    for (u, l) in task.dev.iter().zip(&lists) {
        exact.push(rnnt_rescore(l, &params.encode(&u.features)?, 1.0)?);
    }
    println!("exact scores     WER {:.4}", compute_wer(&top1_map(&exact)?, &refs)?.wer);

    let sentences: Vec<Vec<String>> = task.train.iter().map(|u| vocab.names(&u.reference)).collect();
    let lm = NGramLM::train(&sentences, vocab.real_tokens().map(String::from), 3, 0.1)?;
    for lambda in [0.1, 0.3, 1.0] {
        let rescored = exact
            .iter()
            .map(|l| lm_rescore(l, &lm, |k| vocab.word(k), &RescoreConfig { lambda, length_normalize: true }))
            .collect::<rnnt_mwer::Result<Vec<_>>>()?;
        println!("exact + LM {lambda:<4}  WER {:.4}", compute_wer(&top1_map(&rescored)?, &refs)?.wer);
    }
    Ok(())
}

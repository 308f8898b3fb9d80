use iada_core::checkpoint::AdamState;
use iada_core::corpus::{self, GeneratorConfig};
use iada_core::eval::{self, Protocol};
use iada_core::objective::{self, LossTerms};
use iada_core::trainer::{self, TrainConfig};
use iada_core::{Corpus, Measure, Model, ModelConfig, Tape, Tensor};

fn small_corpus(n_docs: usize) -> Corpus {
    corpus::generate(&GeneratorConfig {
        n_docs,
        n_valid_docs: 1,
        n_test_docs: 1,
        seed: 31,
        ..GeneratorConfig::default()
    })
    .unwrap()
    .train
}

fn tiny(cfg: &mut TrainConfig) {
    cfg.model = ModelConfig {
        d_model: 16,
        d_ffn: 32,
        n_heads: 2,
        n_layers: 1,
        max_len: 64,
        ..ModelConfig::default()
    };
    cfg.batch_tokens = 300;
    cfg.optimizer.warmup = 10;
}

#[test]
fn resume_reproduces_the_next_steps_bit_exactly() {
    let corpus = small_corpus(6);
    let mut cfg = TrainConfig::default();
    tiny(&mut cfg);
    cfg.max_steps = Some(9);
    let full = trainer::train(&cfg, &corpus, None, None).unwrap();

    cfg.max_steps = Some(5);
    let first = trainer::train(&cfg, &corpus, None, None).unwrap();
    // Round-trip through the text format, as the CLI does.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    iada_core::checkpoint::save(&first.resume, &path).unwrap();
    let loaded = iada_core::checkpoint::load(&path).unwrap();
    cfg.max_steps = Some(9);
    let resumed = trainer::train(&cfg, &corpus, None, Some(loaded)).unwrap();

    assert_eq!(resumed.model.params().checksum(), full.model.params().checksum());
    assert_eq!(resumed.log, full.log[5..]);
    assert_eq!(resumed.resume.optimizer, full.resume.optimizer);
}

#[test]
fn zero_probability_uniform_view_equals_doubled_plain_training() {
    let corpus = small_corpus(4);
    let mut cfg = TrainConfig::default();
    tiny(&mut cfg);
    cfg.terms = LossTerms::default();
    cfg.augment.schedule.measure = Measure::Uniform;
    cfg.augment.schedule.p_ctx = 0.0;
    cfg.augment.schedule.p_cur = 0.0;
    cfg.max_steps = Some(6);
    let augmented = trainer::train(&cfg, &corpus, None, None).unwrap();

    // Reference: plain document-level training whose loss is twice the NLL.
    let mut model = Model::new(cfg.model.clone()).unwrap();
    let mut adam = AdamState::zeros_like(model.params());
    let pairs: Vec<_> = corpus.pairs().collect();
    let mut step = 0;
    'outer: for epoch in 0.. {
        for batch in trainer::batches(&pairs, cfg.batch_tokens, cfg.seed, epoch) {
            if step == 6 {
                break 'outer;
            }
            step += 1;
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in &batch {
                let mut tape = Tape::new(&model);
                let (_, loss, _) = objective::original_loss(&mut tape, pairs[i], cfg.terms.reduction).unwrap();
                let mut grads = tape.graph.backward(loss).unwrap();
                let g = tape.param_grads(&mut grads);
                let doubled: Vec<Tensor> = g
                    .into_iter()
                    .map(|mut t| {
                        t.data_mut().iter_mut().for_each(|v| *v += *v);
                        t
                    })
                    .collect();
                trainer::accumulate(&mut acc, doubled);
            }
            let mut grads = acc.unwrap();
            trainer::average(&mut grads, batch.len());
            trainer::adam_step(model.params_mut(), &grads, &mut adam, trainer::lr_at(step, &cfg.optimizer), &cfg.optimizer).unwrap();
        }
    }
    assert_eq!(augmented.model.params().checksum(), model.params().checksum());
    assert!(augmented.breakdowns.iter().all(|b| b.agreement == 0.0 && b.nll_original == b.nll_perturbed));
}

#[test]
fn default_model_memorizes_the_copy_corpus() {
    let splits = corpus::generate(&GeneratorConfig::default()).unwrap();
    assert_eq!(splits.train.len(), 200);
    let mut cfg = TrainConfig::doc2doc();
    cfg.max_steps = Some(2000);
    let out = trainer::train(&cfg, &splits.train, None, None).unwrap();
    assert!(out.breakdowns.len() <= 2000);
    let nll = out.recent_nll(10);
    assert!(nll < 0.2, "training nll {nll}");

    // The planted tokens can only come from context, so a model that has
    // learned them must lose recall when the context is corrupted.
    let noisy = eval::noisy_context_eval(&out.model, &splits.train, 3, Protocol::default()).unwrap();
    assert!(noisy.delta().planted_recovery > 0.0, "{:?}", noisy.delta());
}

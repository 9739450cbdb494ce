mod common;

use common::{camrest_micro, randomize, toks};
use fsdm::corpus::{build_vocab, make_turn_examples, BeliefState, SlotSchema, TurnExample, Vocab};
use fsdm::model::{DecodeOptions, Dropout, Fsdm, LossWeights, ModelConfig};
use fsdm::numcore::Tape;
use fsdm::trainer::{
    build_model, example_loss, mean_loss, run_inference, BeliefFeed, LogRecord, TrainConfig, TrainError, Trainer,
};

fn small_config() -> TrainConfig {
    TrainConfig {
        embed_dim: 12,
        hidden_dim: 10,
        attn_dim: 8,
        dropout_rate: 0.0,
        learning_rate: 5e-3,
        batch_size: 4,
        epochs: 3,
        min_count: 1,
        seed: 3,
        ..TrainConfig::camrest()
    }
}

fn f64_model(seed: u64) -> (Fsdm<f64>, Vec<TurnExample>) {
    let corpus = camrest_micro();
    let examples = make_turn_examples(&corpus.train, &corpus.schema);
    let vocab = build_vocab(&examples, &corpus.schema, 1).unwrap();
    let config = ModelConfig { embed_dim: 5, hidden_dim: 4, attn_dim: 3, dropout: 0.0, ..ModelConfig::default() };
    let mut m = Fsdm::<f64>::new(config, corpus.schema, vocab, seed).unwrap();
    randomize(&mut m.params, seed, 0.5);
    (m, examples)
}

#[test]
fn total_is_the_weighted_sum_and_terms_are_nonnegative() {
    let (m, examples) = f64_model(1);
    let w = LossWeights::camrest();
    for ex in &examples {
        let b = example_loss(&m, ex, &w).unwrap();
        let expected = 0.0 + w.inf * b.inf + w.req * b.req + w.resp_slot * b.resp_slot + w.resp * b.resp;
        assert_eq!(b.total, expected);
        assert!(b.inf >= 0.0 && b.req >= 0.0 && b.resp_slot >= 0.0 && b.resp >= 0.0);
    }
}

#[test]
fn losses_match_recomputation_from_step_distributions() {
    let (m, examples) = f64_model(2);
    let w = LossWeights::kvret();
    for ex in examples.iter().take(6) {
        let mut tape = Tape::new(&m.params);
        let f = m.forward_example(&mut tape, ex, &w, &mut Dropout::eval(), true).unwrap();
        let nll = |dist: &[f64], token: &str| -> f64 {
            let id = m.vocab.get(token).unwrap_or(fsdm::corpus::UNK_ID);
            -dist[id].ln()
        };
        let mut inf = 0.0;
        for (k, slot) in m.schema.informable_slots.iter().enumerate() {
            let mut targets = ex.gold_belief.value(slot).to_vec();
            targets.push(format!("end_{slot}"));
            let steps = &f.inf_dists[k];
            assert_eq!(steps.len(), targets.len());
            inf += steps.iter().zip(&targets).map(|(d, t)| nll(d, t)).sum::<f64>() / targets.len() as f64;
        }
        inf /= m.schema.informable_slots.len() as f64;
        let bce = |p: f64, z: bool| if z { -p.ln() } else { -(1.0 - p).ln() };
        let req = m.schema.requestable_slots.iter().zip(&f.req_probs).map(|(s, &p)| bce(p, ex.gold_belief.requestable().contains(s))).sum::<f64>()
            / m.schema.requestable_slots.len() as f64;
        let rs = m.schema.response_slots.iter().zip(&f.resp_slot_probs).map(|(s, &p)| bce(p, ex.gold_response_slots.contains(s))).sum::<f64>()
            / m.schema.response_slots.len() as f64;
        let mut targets = ex.gold_response.clone();
        targets.push("<eos>".into());
        let resp = f.resp_dists.iter().zip(&targets).map(|(d, t)| nll(d, t)).sum::<f64>() / targets.len() as f64;
        let got = |v| tape.scalar(v);
        for (a, b) in [(got(f.losses.inf), inf), (got(f.losses.req), req), (got(f.losses.resp_slot), rs), (got(f.losses.resp), resp)] {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let total = w.inf * inf + w.req * req + w.resp_slot * rs + w.resp * resp;
        assert!((got(f.losses.total) - total).abs() < 1e-9);
    }
}

fn zero(m: &mut Fsdm<f64>, name: &str) {
    let id = m.params.id(name).unwrap();
    m.params.get_mut(id).data_mut().fill(0.0);
}

#[test]
fn uniform_outputs_give_log_of_support_size() {
    let (mut m, _) = f64_model(3);
    for name in ["response.generate", "response.copy", "requestable.out", "response_slot.out"] {
        zero(&mut m, name);
    }
    // no informable value, no copy candidate among the targets
    let ex = TurnExample {
        dialogue_id: "u".into(),
        turn_index: 0,
        prev_response: Vec::new(),
        prev_belief: BeliefState::new(),
        user_utterance: toks("thank you goodbye"),
        gold_belief: BeliefState::new(),
        gold_response: toks("thank you for using our system ."),
        gold_response_slots: Default::default(),
        gold_match_count: 0,
    };
    let b = example_loss(&m, &ex, &LossWeights::camrest()).unwrap();
    let structural = |t: &str| t == "<pad>" || t == "<go>" || t == "end_belief" || t.starts_with("<go_") || t.starts_with("end_");
    let generable = m.vocab.tokens().iter().filter(|t| !structural(t)).count();
    // copy candidates: 7 requestable names and 7 placeholders, gates at 0.5
    let support = generable + 14;
    assert!((b.resp - (support as f64).ln()).abs() < 1e-12, "{} vs ln {support}", b.resp);
    assert!((b.req - 2f64.ln()).abs() < 1e-12);
    assert!((b.resp_slot - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn repeated_steps_on_one_example_reduce_its_loss() {
    let corpus = camrest_micro();
    let examples = make_turn_examples(&corpus.train, &corpus.schema);
    let config = small_config();
    let model = build_model(&config, &corpus.schema, &examples).unwrap();
    let mut trainer = Trainer::new(model, config.clone()).unwrap();
    let ex = &examples[1];
    let before = example_loss(&trainer.model, ex, &config.loss_weights).unwrap().total;
    for _ in 0..10 {
        trainer.step(&[ex], &[0], 1).unwrap();
    }
    let after = example_loss(&trainer.model, ex, &config.loss_weights).unwrap().total;
    assert!(after < before, "{after} !< {before}");
    assert_eq!(trainer.steps(), 10);
}

fn train_curve(config: &TrainConfig) -> (Vec<f64>, Vec<u8>) {
    let corpus = camrest_micro();
    let examples = make_turn_examples(&corpus.train, &corpus.schema);
    let model = build_model(config, &corpus.schema, &examples).unwrap();
    let mut trainer = Trainer::new(model, config.clone()).unwrap();
    let curve = (1..=config.epochs).map(|e| trainer.epoch(&examples, e).unwrap().total).collect();
    let dir = tempfile::tempdir().unwrap();
    trainer.save(dir.path(), config.epochs, None).unwrap();
    (curve, std::fs::read(dir.path().join("weights.bin")).unwrap())
}

#[test]
fn seeded_training_is_reproducible_with_dropout() {
    let config = TrainConfig { dropout_rate: 0.3, ..small_config() };
    let (a, wa) = train_curve(&config);
    let (b, wb) = train_curve(&config);
    assert_eq!(a, b);
    assert_eq!(wa, wb);
    let (c, _) = train_curve(&TrainConfig { seed: 4, ..config });
    assert_ne!(a, c);
}

#[test]
fn batch_loss_equals_mean_of_single_example_losses() {
    let (m, examples) = f64_model(5);
    let w = LossWeights::camrest();
    let batched = mean_loss(&m, &examples, &w).unwrap();
    let singles: Vec<f64> = examples.iter().map(|e| example_loss(&m, e, &w).unwrap().total).collect();
    let mean = singles.iter().sum::<f64>() / singles.len() as f64;
    assert!((batched.total - mean).abs() < 1e-5);
}

#[test]
fn inference_covers_every_turn_in_both_feed_modes() {
    let corpus = camrest_micro();
    let (m, _) = f64_model(6);
    let opts = DecodeOptions::default();
    assert!(run_inference(&m, &[], &corpus.kb, BeliefFeed::Predicted, &opts).unwrap().is_empty());
    for feed in [BeliefFeed::Predicted, BeliefFeed::Gold] {
        let out = run_inference(&m, &corpus.train, &corpus.kb, feed, &opts).unwrap();
        assert_eq!(out.len(), corpus.train.len());
        for (o, d) in out.iter().zip(&corpus.train) {
            assert_eq!(o.id, d.id);
            assert_eq!(o.turns.len(), d.turns.len());
            for t in &o.turns {
                assert!(t.pred_belief.is_valid(&corpus.schema));
            }
        }
    }
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_good_weights() {
    let corpus = camrest_micro();
    let examples = make_turn_examples(&corpus.train, &corpus.schema);
    let config = small_config();
    let mut model = build_model(&config, &corpus.schema, &examples).unwrap();
    let id = model.params.id("response.generate").unwrap();
    model.params.get_mut(id).data_mut()[0] = f32::NAN;
    let mut trainer = Trainer::new(model, config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = trainer.fit(&examples, None, Some(dir.path()), &mut Vec::new()).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { epoch: 1, step: 0, .. }), "{err}");
    assert!(dir.path().join("last_good/manifest.json").exists());
}

#[test]
fn fit_writes_log_and_best_checkpoint() {
    let corpus = camrest_micro();
    let examples = make_turn_examples(&corpus.train, &corpus.schema);
    let config = TrainConfig { epochs: 2, patience: 1, ..small_config() };
    let model = build_model(&config, &corpus.schema, &examples).unwrap();
    let mut trainer = Trainer::new(model, config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut log = Vec::new();
    let dev = fsdm::trainer::DevSet { dialogues: &corpus.train[..2], kb: &corpus.kb };
    let outcome = trainer.fit(&examples, Some(dev), Some(dir.path()), &mut log).unwrap();
    assert!(outcome.epochs_run >= 1 && outcome.best_epoch >= 1);
    let records: Vec<LogRecord> = String::from_utf8(log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(records.iter().any(|r| r.split == "train" && r.loss.is_some()));
    assert!(records.iter().any(|r| r.split == "dev" && r.metrics.is_some_and(|m| m.bleu.is_some())));
    let (back, extra) = Fsdm::<f32>::load(&dir.path().join("best")).unwrap();
    assert_eq!(back.vocab, trainer.model.vocab);
    assert!(extra["train_config"]["learning_rate"].as_f64().is_some());
}

#[test]
fn build_model_keeps_schema_tokens_even_when_rare() {
    let schema = SlotSchema::camrest();
    let examples: Vec<TurnExample> = Vec::new();
    let config = TrainConfig { min_count: 5, ..small_config() };
    let m = build_model(&config, &schema, &examples).unwrap();
    let v: &Vocab = &m.vocab;
    for t in ["<go_price>", "end_area", "end_belief", "phone", "phone_SLOT"] {
        assert!(v.contains(t), "{t}");
    }
}

#![allow(dead_code)]

use fsdm::numcore::{ParamStore, Tape, Var};

/// Central-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares tape gradients of `loss` against central finite differences for
/// every scalar of every parameter in `store`.
pub fn check_all_params(store: &ParamStore<f64>, loss: impl Fn(&mut Tape<'_, f64>) -> Var) -> GradReport {
    let analytic = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape);
        tape.backward(l).expect("backward")
    };
    let eval = |s: &ParamStore<f64>| {
        let mut tape = Tape::new(s);
        let l = loss(&mut tape);
        tape.scalar(l)
    };
    let mut report = GradReport { max_rel_err: 0.0, worst: String::new(), checked: 0 };
    let mut probe = store.clone();
    for id in store.ids() {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{}[{i}]: analytic {a:e}, numeric {numeric:e}", store.name(id));
            }
        }
    }
    report
}

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Overwrites every parameter with uniform values in ±`range`.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, range: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-range..range));
    }
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

/// The five-dialogue restaurant corpus, all in the training split.
pub fn camrest_micro() -> fsdm::corpus::Corpus {
    use fsdm::corpus::{load_corpus, CorpusConfig, CorpusFormat, SplitManifest};
    load_corpus(&CorpusConfig {
        format: CorpusFormat::Camrest,
        train: fixture("camrest_micro.json"),
        dev: None,
        test: None,
        kb: Some(fixture("camrest_micro_db.json")),
        schema: None,
        manifest: Some(SplitManifest { train: 5, dev: 0, test: 0, kb_records: Some(6) }),
    })
    .expect("micro corpus")
}

/// Small configuration that memorizes the micro corpus in a few seconds.
pub fn quick_overfit_config() -> fsdm::trainer::TrainConfig {
    fsdm::trainer::TrainConfig {
        embed_dim: 32,
        hidden_dim: 32,
        attn_dim: 32,
        learning_rate: 5e-3,
        batch_size: 2,
        dropout_rate: 0.0,
        min_count: 1,
        epochs: 150,
        ..fsdm::trainer::TrainConfig::camrest()
    }
}

/// A model trained on the micro corpus until its evaluation loss is below 0.05.
pub fn quick_overfit_model() -> fsdm::model::Fsdm<f32> {
    use fsdm::trainer::{build_model, mean_loss, Trainer};
    let corpus = camrest_micro();
    let examples = fsdm::corpus::make_turn_examples(&corpus.train, &corpus.schema);
    let config = quick_overfit_config();
    let model = build_model(&config, &corpus.schema, &examples).unwrap();
    let mut trainer = Trainer::new(model, config.clone()).unwrap();
    for epoch in 1..=config.epochs {
        trainer.epoch(&examples, epoch).unwrap();
        if epoch % 10 == 0 && mean_loss(&trainer.model, &examples, &config.loss_weights).unwrap().total < 0.05 {
            break;
        }
    }
    trainer.model
}

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fsdm::corpus::{BeliefState, SlotSchema};
use fsdm::kb::{Kb, KbTable, Record};
use fsdm::metrics::{bleu, entity_match_rate, evaluate, slot_prf, success_f1, DialogueOutcome, TurnOutcome};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn toy_kb() -> Kb {
    let rec = |name: &str, food: &str, area: &str| -> Record {
        [("name", name), ("food", food), ("area", area)].iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect()
    };
    Kb::new(vec![KbTable::new(
        "restaurant",
        vec![rec("a", "thai", "north"), rec("b", "thai", "south"), rec("c", "indian", "north"), rec("d", "indian", "centre")],
    )])
}

fn belief(food: Option<&str>, area: Option<&str>) -> BeliefState {
    let mut b = BeliefState::new();
    if let Some(f) = food {
        b.set_value("food", toks(f));
    }
    if let Some(a) = area {
        b.set_value("area", toks(a));
    }
    b
}

#[test]
fn emr_extremes() {
    let kb = toy_kb();
    let same: Vec<_> = [belief(Some("thai"), None), belief(None, Some("north"))].into_iter().map(|b| (b.clone(), b)).collect();
    assert_eq!(entity_match_rate(&same, &kb), Some(1.0));
    let differ = vec![(belief(Some("indian"), None), belief(Some("thai"), None)), (belief(None, None), belief(None, Some("south")))];
    assert_eq!(entity_match_rate(&differ, &kb), Some(0.0));
    assert_eq!(entity_match_rate(&[(belief(Some("thai"), None), BeliefState::new())], &kb), None);
}

#[test]
fn emr_matches_set_oracle() {
    let kb = toy_kb();
    let records: Vec<&Record> = kb.records().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pick = |rng: &mut ChaCha8Rng| {
        let food = [None, Some("thai"), Some("indian"), Some("dontcare"), Some("Thai")];
        let area = [None, Some("north"), Some("south"), Some("centre"), Some("east")];
        belief(*food.choose(rng).unwrap(), *area.choose(rng).unwrap())
    };
    let finals: Vec<(BeliefState, BeliefState)> = (0..20).map(|_| (pick(&mut rng), pick(&mut rng))).collect();
    let retrieve = |b: &BeliefState| -> BTreeSet<usize> {
        (0..records.len())
            .filter(|&i| {
                b.informable().iter().all(|(slot, v)| {
                    let v = v.join(" ").to_lowercase();
                    v == "dontcare" || records[i][slot] == v
                })
            })
            .collect()
    };
    let scored: Vec<bool> = finals.iter().filter(|(_, g)| !g.informable().is_empty()).map(|(p, g)| retrieve(p) == retrieve(g)).collect();
    let want = scored.iter().filter(|&&x| x).count() as f64 / scored.len() as f64;
    assert_eq!(entity_match_rate(&finals, &kb), Some(want));
    assert!(want > 0.0 && want < 1.0);
}

#[test]
fn success_f1_examples() {
    let schema = SlotSchema::camrest();
    let gold = vec![toks("name_SLOT is at address_SLOT"), toks("the phone is phone_SLOT")];
    assert_eq!(success_f1(&[(gold.clone(), gold.clone())], &schema), 1.0);
    assert_eq!(success_f1(&[(vec![toks("sorry"), toks("bye")], gold.clone())], &schema), 0.0);
    // one dialogue finds 2 of 3, another adds a spurious slot
    let partial = vec![
        (vec![toks("name_SLOT address_SLOT")], gold),
        (vec![toks("postcode_SLOT")], vec![toks("goodbye")]),
    ];
    let (p, r) = (2.0 / 3.0, 2.0 / 3.0);
    assert!((success_f1(&partial, &schema) - 2.0 * p * r / (p + r)).abs() < 1e-15);
}

#[test]
fn identical_sequences_score_one() {
    let x = vec![toks("the phone of name_SLOT is phone_SLOT"), toks("a b c d")];
    assert_eq!(bleu(&x, &x), 1.0);
    assert_eq!(bleu(&[toks("a b c")], &[toks("a b c")]), 0.0);
    assert_eq!(bleu(&[toks("a b c d")], &[toks("w x y z")]), 0.0);
}

fn outcome(rng: &mut ChaCha8Rng, schema: &SlotSchema, id: usize) -> DialogueOutcome {
    let words = |rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..rng.gen_range(0..7))
            .map(|_| if rng.gen_bool(0.3) { schema.response_slots.choose(rng).unwrap().clone() } else { ["a", "b", "c"].choose(rng).unwrap().to_string() })
            .collect()
    };
    let b = |rng: &mut ChaCha8Rng| {
        let mut b = belief([None, Some("thai"), Some("indian")][rng.gen_range(0..3)], [None, Some("north")][rng.gen_range(0..2)]);
        if rng.gen_bool(0.5) {
            b.request("phone");
        }
        b
    };
    DialogueOutcome {
        id: id.to_string(),
        turns: (0..rng.gen_range(1..4))
            .map(|_| TurnOutcome {
                user: String::new(),
                gold_belief: b(rng),
                pred_belief: b(rng),
                gold_response: words(rng),
                pred_response: words(rng),
                match_count: 0,
                lexicalized: String::new(),
            })
            .collect(),
    }
}

fn arb_sets() -> impl Strategy<Value = Vec<(BTreeSet<u8>, BTreeSet<u8>)>> {
    prop::collection::vec((prop::collection::btree_set(0u8..6, 0..4), prop::collection::btree_set(0u8..6, 0..4)), 0..20)
}

proptest! {
    #[test]
    fn prf_swaps_under_exchanged_roles(pairs in arb_sets()) {
        let (p, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let a = slot_prf(&p, &g);
        let b = slot_prf(&g, &p);
        prop_assert_eq!((a.precision, a.recall), (b.recall, b.precision));
        prop_assert!((a.f1 - b.f1).abs() < 1e-15);
        for x in [a.precision, a.recall, a.f1] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn metrics_ignore_dialogue_order(seed in any::<u64>()) {
        let schema = SlotSchema::camrest();
        let kb = toy_kb();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dialogues: Vec<DialogueOutcome> = (0..8).map(|i| outcome(&mut rng, &schema, i)).collect();
        let a = evaluate(&dialogues, &kb, &schema);
        dialogues.shuffle(&mut rng);
        let b = evaluate(&dialogues, &kb, &schema);
        let close = |x: Option<f64>, y: Option<f64>| match (x, y) {
            (Some(x), Some(y)) => (x - y).abs() < 1e-12 && (0.0..=1.0).contains(&x),
            (None, None) => true,
            _ => false,
        };
        prop_assert!(close(a.inf.map(|p| p.f1), b.inf.map(|p| p.f1)));
        prop_assert!(close(a.req.map(|p| p.f1), b.req.map(|p| p.f1)));
        prop_assert!(close(a.bleu, b.bleu));
        prop_assert!(close(a.emr, b.emr));
        prop_assert!(close(a.succ_f1, b.succ_f1));
    }
}

#[test]
fn report_uses_fixed_field_names() {
    let schema = SlotSchema::camrest();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dialogues: Vec<_> = (0..3).map(|i| outcome(&mut rng, &schema, i)).collect();
    let json = serde_json::to_value(evaluate(&dialogues, &toy_kb(), &schema)).unwrap();
    for k in ["inf", "req", "bleu", "emr", "succ_f1", "per_dialogue"] {
        assert!(json.get(k).is_some(), "{k}");
    }
    assert_eq!(json["per_dialogue"].as_array().unwrap().len(), 3);
    assert!(json["inf"]["f1"].is_number());
}

use std::collections::BTreeMap;

use cmr_core::data::{
    evaluate, format_instance, generate_corpus, parse_prediction, Argument, Corpus, Event, EventInstance,
    EventSchema, GeneratorConfig, Ontology, Prediction, Span, Vocab, ABSENT, EOS,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

fn small_cfg(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        n_train: 120,
        n_dev: 20,
        n_test: 20,
        ..Default::default()
    }
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn same_seed_writes_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_corpus(&small_cfg(7), None).unwrap().write(a.path()).unwrap();
    generate_corpus(&small_cfg(7), None).unwrap().write(b.path()).unwrap();
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "ontology.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    let back = Corpus::load(a.path()).unwrap();
    assert_eq!(back, generate_corpus(&small_cfg(7), None).unwrap());
    assert_ne!(generate_corpus(&small_cfg(8), None).unwrap().train, back.train);
}

#[test]
fn default_corpus_shape() {
    let c = generate_corpus(&GeneratorConfig::default(), None).unwrap();
    assert_eq!((c.train.len(), c.dev.len(), c.test.len()), (2000, 300, 300));
    assert_eq!(c.ontology.types.len(), 6);
    c.ontology.validate().unwrap();
    let mut ids = std::collections::BTreeSet::new();
    for d in c.train.iter().chain(&c.dev).chain(&c.test) {
        d.validate(&c.ontology).unwrap();
        assert!(ids.insert(d.doc_id.clone()), "duplicate id {}", d.doc_id);
        assert!((30..=80).contains(&d.tokens.len()), "{} tokens", d.tokens.len());
        assert!((1..=2).contains(&d.events.len()));
        for ev in &d.events {
            let roles = &c.ontology.schema(&ev.event_type).unwrap().roles;
            assert!((3..=4).contains(&roles.len()));
        }
    }
}

#[test]
fn gold_spans_round_trip_through_format_and_parse() {
    let c = generate_corpus(&small_cfg(3), None).unwrap();
    for d in c.train.iter().chain(&c.test) {
        for (i, ev) in d.events.iter().enumerate() {
            let f = format_instance(d, i, &c.ontology).unwrap();
            let parsed = parse_prediction(&f.target, &c.ontology, &ev.event_type);
            let gold = d.gold(i).unwrap();
            for (role, text) in &parsed {
                assert_eq!(text, gold.get(role).map_or("", String::as_str), "{} {role}", d.doc_id);
            }
            for a in &ev.arguments {
                let first = d
                    .tokens
                    .windows(a.end - a.start)
                    .position(|w| w == &d.tokens[a.start..a.end])
                    .unwrap();
                assert_eq!(first, a.start, "{}: {} is not at its first occurrence", d.doc_id, a.role);
            }
        }
    }
}

#[test]
fn more_types_and_custom_ontology() {
    let cfg = GeneratorConfig {
        num_types: 9,
        ..small_cfg(1)
    };
    let c = generate_corpus(&cfg, None).unwrap();
    assert_eq!(c.ontology.types.len(), 9);
    for d in &c.train {
        d.validate(&c.ontology).unwrap();
    }

    let mut ont = Ontology::default();
    ont.types.insert(
        "launch".into(),
        EventSchema {
            roles: toks("agency rocket site"),
            template: "{agency} launched {rocket} from {site}".into(),
        },
    );
    ont.types.insert(
        "storm".into(),
        EventSchema {
            roles: toks("area"),
            template: "storm hit {area}".into(),
        },
    );
    let c = generate_corpus(&small_cfg(2), Some(&ont)).unwrap();
    assert_eq!(c.ontology, ont);
    for d in &c.train {
        d.validate(&ont).unwrap();
    }
}

#[test]
fn zero_split_is_rejected() {
    let cfg = GeneratorConfig {
        n_train: 0,
        ..small_cfg(1)
    };
    assert!(generate_corpus(&cfg, None).is_err());
}

// Oracle parser: leftmost non-overlapping regex matches over the joined text.
fn regex_parse(tokens: &[String], roles: &[String]) -> BTreeMap<String, String> {
    let end = tokens.iter().position(|t| t == EOS).unwrap_or(tokens.len());
    let text = format!(" {} ", tokens[..end].join(" "));
    let alt = roles.iter().map(|r| regex::escape(r)).collect::<Vec<_>>().join("|");
    let re = Regex::new(&format!(r" ({alt}) :((?: [^ ]+)*?) ;")).unwrap();
    let mut out: BTreeMap<String, String> = roles.iter().map(|r| (r.clone(), String::new())).collect();
    let mut seen = Vec::new();
    for cap in re.captures_iter(&text) {
        let role = cap[1].to_string();
        if seen.contains(&role) {
            continue;
        }
        seen.push(role.clone());
        let value = cap[2].trim();
        if value != ABSENT {
            out.insert(role, value.to_string());
        }
    }
    out
}

fn attack_ontology() -> Ontology {
    let mut ont = Ontology::default();
    ont.types.insert(
        "attack".into(),
        EventSchema {
            roles: toks("attacker target instrument place"),
            template: "{attacker} attacked {target} using {instrument} at {place}".into(),
        },
    );
    ont
}

#[test]
fn parser_agrees_with_regex_oracle_on_fuzz() {
    let ont = attack_ontology();
    let roles = ont.schema("attack").unwrap().roles.clone();
    let alphabet = toks("attacker target instrument place : ; ∅ kovac knife harbor attacked using at [EOS] big");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3000 {
        let len = rng.gen_range(0..24);
        let seq: Vec<String> = (0..len)
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())].clone())
            .collect();
        assert_eq!(parse_prediction(&seq, &ont, "attack"), regex_parse(&seq, &roles), "{seq:?}");
    }
    // garbled middle slot: earlier slots survive, later ones are lost
    let seq = toks("attacker : kovac ; attacked target : bemir using instrument : knife at place : harbor");
    let p = parse_prediction(&seq, &ont, "attack");
    assert_eq!(p, regex_parse(&seq, &roles));
    assert_eq!(p["attacker"], "kovac");
    assert_eq!(p["target"], "");
    assert_eq!(p["place"], "");
}

fn hand_gold() -> Vec<EventInstance> {
    let arg = |role: &str, start, end| Argument {
        role: role.into(),
        start,
        end,
    };
    vec![
        EventInstance {
            doc_id: "a".into(),
            tokens: toks("x1 kovac stabbed bemir with knife in harbor ."),
            events: vec![Event {
                event_type: "attack".into(),
                trigger: Span::new(2, 3),
                arguments: vec![
                    arg("attacker", 1, 2),
                    arg("target", 3, 4),
                    arg("instrument", 5, 6),
                    arg("place", 7, 8),
                ],
            }],
        },
        EventInstance {
            doc_id: "b".into(),
            tokens: toks("ana shot bo in plaza ."),
            events: vec![Event {
                event_type: "attack".into(),
                trigger: Span::new(1, 2),
                arguments: vec![arg("attacker", 0, 1), arg("target", 2, 3), arg("place", 4, 5)],
            }],
        },
        EventInstance {
            doc_id: "c".into(),
            tokens: toks("nothing happened here ."),
            events: vec![Event {
                event_type: "attack".into(),
                trigger: Span::new(1, 2),
                arguments: vec![],
            }],
        },
    ]
}

fn pred(doc: &str, pairs: &[(&str, &str)]) -> Prediction {
    Prediction {
        doc_id: doc.into(),
        event_index: 0,
        event_type: "attack".into(),
        arguments: pairs.iter().map(|(r, v)| (r.to_string(), v.to_string())).collect(),
    }
}

#[test]
fn hand_case_with_boundary_and_role_errors() {
    let preds = vec![
        pred(
            "a",
            &[("attacker", "kovac"), ("target", "bemir"), ("instrument", "knife in"), ("place", "harbor")],
        ),
        pred(
            "b",
            &[("attacker", "bo"), ("target", "ana"), ("instrument", ""), ("place", "plaza")],
        ),
        pred("c", &[("attacker", "ghost")]),
    ];
    let r = evaluate(&preds, &hand_gold()).unwrap();
    // hand tally: 8 predicted, 7 gold
    let f1 = |c: usize| 2.0 * c as f64 / 15.0;
    assert!((r.arg_i.f1() - f1(6)).abs() < 1e-12);
    assert!((r.arg_c.f1() - f1(4)).abs() < 1e-12);
    assert!((r.strict.f1() - f1(4)).abs() < 1e-12);
    assert!((r.relaxed.f1() - f1(5)).abs() < 1e-12);
    assert!(r.arg_i.f1() > r.arg_c.f1());
}

#[test]
fn perfect_and_empty_predictions() {
    let ont = attack_ontology();
    let gold = hand_gold();
    let perfect: Vec<Prediction> = gold
        .iter()
        .map(|d| {
            let f = format_instance(d, 0, &ont).unwrap();
            Prediction {
                doc_id: d.doc_id.clone(),
                event_index: 0,
                event_type: "attack".into(),
                arguments: parse_prediction(&f.target, &ont, "attack"),
            }
        })
        .collect();
    let r = evaluate(&perfect, &gold).unwrap();
    for c in [r.arg_i, r.arg_c, r.strict, r.relaxed] {
        assert_eq!(c.f1(), 1.0);
    }
    let empty: Vec<Prediction> = gold.iter().map(|d| pred(&d.doc_id, &[])).collect();
    let r = evaluate(&empty, &gold).unwrap();
    assert_eq!(r.strict.recall(), 0.0);
    assert_eq!(r.arg_i.f1(), 0.0);
}

#[test]
fn misaligned_predictions_are_rejected() {
    let gold = hand_gold();
    let mut preds: Vec<Prediction> = gold.iter().map(|d| pred(&d.doc_id, &[])).collect();
    preds[2].doc_id = "zzz".into();
    assert!(evaluate(&preds, &gold).is_err());
    assert!(evaluate(&preds[..2], &gold).is_err());
}

#[test]
fn vocab_covers_formatted_corpus() {
    let c = generate_corpus(&small_cfg(4), None).unwrap();
    let mut words: Vec<String> = Vec::new();
    for d in &c.train {
        for i in 0..d.events.len() {
            let f = format_instance(d, i, &c.ontology).unwrap();
            words.extend(f.input);
            words.extend(f.target);
        }
    }
    let v = Vocab::build(words.iter().map(String::as_str));
    let d = &c.train[0];
    let f = format_instance(d, 0, &c.ontology).unwrap();
    assert_eq!(v.decode(&v.encode(&f.input)), f.input);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_orderings_hold(seed in 0u64..1000) {
        let gold = hand_gold();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = toks("kovac bemir knife harbor ana bo plaza in with x1 ghost");
        let roles = toks("attacker target instrument place");
        let preds: Vec<Prediction> = gold
            .iter()
            .map(|d| {
                let mut p = pred(&d.doc_id, &[]);
                for r in &roles {
                    let n = rng.gen_range(0..3);
                    let v: Vec<&str> = (0..n).map(|_| pool[rng.gen_range(0..pool.len())].as_str()).collect();
                    p.arguments.insert(r.clone(), v.join(" "));
                }
                p
            })
            .collect();
        let r = evaluate(&preds, &gold).unwrap();
        prop_assert!(r.relaxed.f1() >= r.strict.f1());
        prop_assert!(r.arg_i.f1() >= r.arg_c.f1());
        for c in [r.arg_i, r.arg_c, r.strict, r.relaxed] {
            prop_assert!((0.0..=1.0).contains(&c.f1()));
        }
    }
}

/// Distinct values of the last role per (type, first two arguments) group.
fn last_role_values(c: &Corpus) -> BTreeMap<(String, String, String), std::collections::BTreeSet<String>> {
    let mut groups: BTreeMap<_, std::collections::BTreeSet<String>> = BTreeMap::new();
    for d in c.train.iter().chain(&c.test) {
        let ev = &d.events[0];
        let roles = &c.ontology.types[&ev.event_type].roles;
        let gold = d.gold(0).unwrap();
        let (Some(a), Some(b), Some(last)) = (gold.get(&roles[0]), gold.get(&roles[1]), gold.get(roles.last().unwrap())) else {
            continue;
        };
        if last.is_empty() {
            continue;
        }
        groups.entry((ev.event_type.clone(), a.clone(), b.clone())).or_default().insert(last.clone());
    }
    groups
}

#[test]
fn story_details_switch() {
    let fixed = generate_corpus(&small_cfg(3), None).unwrap();
    assert!(last_role_values(&fixed).values().all(|v| v.len() == 1));
    let loose = generate_corpus(
        &GeneratorConfig {
            story_details: false,
            ..small_cfg(3)
        },
        None,
    )
    .unwrap();
    assert!(last_role_values(&loose).values().any(|v| v.len() > 1));
}

use std::collections::BTreeSet;
use std::io::Write;

use cmr_core::data::{generate_corpus, Event, EventInstance, GeneratorConfig, Span};
use cmr_core::retrieval::{hash_bucket, hashed_bow, Embedder, RetrievalIndex};
use proptest::prelude::*;

// Reference FNV-1a 64 from its published constants.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn doc(id: &str, text: &str, ty: &str) -> EventInstance {
    EventInstance {
        doc_id: id.into(),
        tokens: text.split_whitespace().map(String::from).collect(),
        events: vec![Event {
            event_type: ty.into(),
            trigger: Span::new(0, 1),
            arguments: vec![],
        }],
    }
}

#[test]
fn hash_matches_reference_fnv() {
    for t in ["a", "b", "kovac", "∅", "", "[EOS]"] {
        assert_eq!(hash_bucket(t, 256), (fnv1a(t.as_bytes()) % 256) as usize, "{t}");
    }
    assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
}

#[test]
fn hand_example_a_b_a() {
    // "a" lands in bucket 0 and "b" in bucket 1 for D = 4
    assert_eq!(fnv1a(b"a") % 4, 0);
    assert_eq!(fnv1a(b"b") % 4, 1);
    let v = hashed_bow(&["a", "b", "a"], 4).unwrap();
    let s5 = 5f64.sqrt();
    assert!((v[0] - 2.0 / s5).abs() < 1e-15);
    assert!((v[1] - 1.0 / s5).abs() < 1e-15);
    assert_eq!((v[2], v[3]), (0.0, 0.0));
    assert!(hashed_bow::<&str>(&[], 4).is_err());
}

#[test]
fn disjoint_buckets_are_orthogonal() {
    let a = hashed_bow(&["a"], 4).unwrap();
    let b = hashed_bow(&["b"], 4).unwrap();
    assert_eq!(a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>(), 0.0);
    assert_eq!(hashed_bow(&["x", "y"], 64).unwrap(), hashed_bow(&["x", "y"], 64).unwrap());
}

fn hand_index() -> RetrievalIndex {
    let docs = vec![
        doc("c1", "red red blue", "x"),
        doc("c2", "green blue", "y"),
        doc("c3", "red green", "x"),
    ];
    RetrievalIndex::build(Embedder::default(), &docs).unwrap()
}

#[test]
fn topk_hand_corpus() {
    let idx = hand_index();
    let q = hashed_bow(&["red"], 256).unwrap();
    // brute force: f = (2/√5, 0, 1/√2) assuming no collisions among 4 words
    let words = ["red", "blue", "green"];
    let buckets: BTreeSet<usize> = words.iter().map(|w| hash_bucket(w, 256)).collect();
    assert_eq!(buckets.len(), 3);
    let f = [2.0 / 5f64.sqrt(), 0.0, 1.0 / 2f64.sqrt()];
    let sims = idx.similarities(&q).unwrap();
    for (a, b) in sims.iter().zip(f) {
        assert!((a - b).abs() < 1e-15);
    }
    let order: Vec<&str> = idx
        .top_k(&q, 3, None)
        .unwrap()
        .iter()
        .map(|h| idx.entries()[h.index].id.as_str())
        .collect();
    assert_eq!(order, ["c1", "c3", "c2"]);
    assert!(idx.top_k(&q, 0, None).unwrap().is_empty());
    assert_eq!(idx.top_k(&q, 10, None).unwrap().len(), 3);
    let ex: Vec<usize> = idx.top_k(&q, 3, Some("c1")).unwrap().iter().map(|h| h.index).collect();
    assert_eq!(ex, [2, 1]);
}

#[test]
fn identical_candidates_give_uniform_scores_and_id_ties() {
    let docs = vec![doc("b", "same words", "x"), doc("a", "same words", "x"), doc("c", "same words", "x")];
    let idx = RetrievalIndex::build(Embedder::default(), &docs).unwrap();
    let q = hashed_bow(&["same"], 256).unwrap();
    for s in idx.score_all(&q).unwrap() {
        assert!((s - 1.0 / 3.0).abs() < 1e-15);
    }
    let ids: Vec<&str> = idx.top_k(&q, 3, None).unwrap().iter().map(|h| idx.entries()[h.index].id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
}

#[test]
fn score_all_two_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, r#"{{"id": "p", "embedding": [0.0, 0.0]}}"#).unwrap();
    writeln!(f, r#"{{"id": "q", "embedding": [{}, 0.0]}}"#, 2f64.ln()).unwrap();
    writeln!(f, r#"{{"id": "query", "embedding": [1.0, 0.0]}}"#).unwrap();
    drop(f);
    let emb = Embedder::load_external(&path).unwrap();
    let idx = RetrievalIndex::build(emb.clone(), &[doc("p", "x", "t"), doc("q", "y", "t")]).unwrap();
    let query = emb.embed::<&str>("query", &[]).unwrap();
    let s = idx.score_all(&query).unwrap();
    assert!((s[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((s[1] - 2.0 / 3.0).abs() < 1e-15);
    assert!(emb.embed::<&str>("missing", &[]).is_err());
    let empty = RetrievalIndex::build(emb, &[]).unwrap();
    assert!(empty.score_all(&query).is_err());
    assert!(idx.score_all(&[1.0]).is_err());
}

#[test]
fn random_retrieval() {
    let docs: Vec<EventInstance> = (0..5).map(|i| doc(&format!("d{i}"), "w", "t")).collect();
    let idx = RetrievalIndex::build(Embedder::default(), &docs).unwrap();
    let mut all = idx.random(5, 9, None).unwrap();
    all.sort();
    assert_eq!(all, [0, 1, 2, 3, 4]);
    assert_eq!(idx.random(3, 4, None).unwrap(), idx.random(3, 4, None).unwrap());
    assert!(idx.random(5, 4, Some("d2")).is_err());
    let mut hit = BTreeSet::new();
    for seed in 0..200 {
        let s = idx.random(1, seed, Some("d0")).unwrap();
        assert_ne!(s[0], 0);
        hit.insert(s[0]);
    }
    assert_eq!(hit.len(), 4);
}

#[test]
fn default_corpus_top1_is_same_type() {
    let c = generate_corpus(&GeneratorConfig::default(), None).unwrap();
    let idx = RetrievalIndex::build(Embedder::default(), &c.train).unwrap();
    let mut same = 0;
    for d in &c.test {
        let q = hashed_bow(&d.tokens, 256).unwrap();
        // oracle: brute-force argmax of the dot product, first index wins ties after id sort
        let best = idx
            .entries()
            .iter()
            .map(|e| (e.embedding.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>(), &e.id, &e.event_type))
            .fold(None::<(f64, &String, &String)>, |acc, x| match acc {
                Some(a) if a.0 > x.0 || (a.0 == x.0 && a.1 < x.1) => Some(a),
                _ => Some(x),
            })
            .unwrap();
        let hit = idx.top_k(&q, 1, Some(&d.doc_id)).unwrap()[0];
        assert_eq!(&idx.entries()[hit.index].id, best.1);
        if *best.2 == d.events[0].event_type {
            same += 1;
        }
    }
    let rate = same as f64 / c.test.len() as f64;
    assert!(rate >= 0.9, "same-type top-1 rate {rate}");
}

proptest! {
    #[test]
    fn shift_and_softmax_properties(seed in 0u64..500, shift in -5.0f64..5.0) {
        let docs: Vec<EventInstance> = (0..6)
            .map(|i| doc(&format!("d{i}"), &format!("w{} w{} w{}", seed % 7, i, (seed + i as u64) % 5), "t"))
            .collect();
        let idx = RetrievalIndex::build(Embedder::default(), &docs).unwrap();
        let q = hashed_bow(&[format!("w{}", seed % 5)], 256).unwrap();
        let s = idx.score_all(&q).unwrap();
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let f = idx.similarities(&q).unwrap();
        let arg = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
        prop_assert_eq!(arg(&s), arg(&f));
        let top = idx.top_k(&q, 6, None).unwrap();
        for w in top.windows(2) {
            prop_assert!(w[0].similarity >= w[1].similarity);
        }
        // adding a constant to every f leaves the ranking unchanged
        let mut shifted: Vec<(f64, &str)> = f.iter().zip(idx.entries()).map(|(x, e)| (x + shift, e.id.as_str())).collect();
        shifted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        let ids: Vec<&str> = top.iter().map(|h| idx.entries()[h.index].id.as_str()).collect();
        let sids: Vec<&str> = shifted.iter().map(|x| x.1).collect();
        prop_assert_eq!(ids, sids);
    }
}

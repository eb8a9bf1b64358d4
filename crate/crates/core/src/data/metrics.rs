use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use super::instance::{DataError, EventInstance, EventRef, Prediction, Span};

/// Micro-averaged tallies for one metric.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub predicted: usize,
    pub gold: usize,
    pub correct: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p == 0.0 || r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, predicted: usize, gold: usize, correct: usize) {
        self.predicted += predicted;
        self.gold += gold;
        self.correct += correct;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MetricReport {
    pub arg_i: Counts,
    pub arg_c: Counts,
    pub strict: Counts,
    pub relaxed: Counts,
}

fn find(haystack: &[String], needle: &[&str]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack
        .windows(needle.len())
        .position(|w| w.iter().zip(needle).all(|(a, b)| a == b))
}

/// Scores predictions against every event of `golds`. Predictions may come in
/// any order but must cover exactly the gold events.
pub fn evaluate(predictions: &[Prediction], golds: &[EventInstance]) -> Result<MetricReport, DataError> {
    let mut by_key: HashMap<EventRef, &Prediction> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_key.insert(p.key(), p).is_some() {
            return Err(DataError::IdMismatch(format!(
                "duplicate prediction for {} event {}",
                p.doc_id, p.event_index
            )));
        }
    }
    let mut report = MetricReport::default();
    let mut seen = 0;
    for inst in golds {
        for (ei, ev) in inst.events.iter().enumerate() {
            let key = EventRef {
                doc_id: inst.doc_id.clone(),
                event_index: ei,
            };
            let pred = by_key.get(&key).ok_or_else(|| {
                DataError::IdMismatch(format!("no prediction for {} event {}", inst.doc_id, ei))
            })?;
            seen += 1;

            let mut gold_text: BTreeMap<&str, String> = BTreeMap::new();
            for a in &ev.arguments {
                gold_text.entry(a.role.as_str()).or_insert_with(|| inst.text(a.span()));
            }
            let filled: Vec<(&str, Vec<&str>)> = pred
                .arguments
                .iter()
                .filter(|(_, v)| !v.trim().is_empty())
                .map(|(r, v)| (r.as_str(), v.split_whitespace().collect()))
                .collect();

            let mut strict = 0;
            let mut relaxed = 0;
            for (role, words) in &filled {
                if let Some(g) = gold_text.get(role) {
                    let g: Vec<&str> = g.split_whitespace().collect();
                    if *words == g {
                        strict += 1;
                    }
                    let hay: Vec<String> = words.iter().map(|w| w.to_string()).collect();
                    if find(&hay, &g).is_some() {
                        relaxed += 1;
                    }
                }
            }
            report.strict.add(filled.len(), gold_text.len(), strict);
            report.relaxed.add(filled.len(), gold_text.len(), relaxed);

            let mut pred_spans: HashMap<Span, usize> = HashMap::new();
            let mut pred_labeled: HashMap<(&str, Span), usize> = HashMap::new();
            for (role, words) in &filled {
                if let Some(start) = find(&inst.tokens, words) {
                    let span = Span::new(start, start + words.len());
                    *pred_spans.entry(span).or_default() += 1;
                    *pred_labeled.entry((role, span)).or_default() += 1;
                }
            }
            let mut gold_spans: HashMap<Span, usize> = HashMap::new();
            let mut gold_labeled: HashMap<(&str, Span), usize> = HashMap::new();
            for a in &ev.arguments {
                *gold_spans.entry(a.span()).or_default() += 1;
                *gold_labeled.entry((a.role.as_str(), a.span())).or_default() += 1;
            }
            let arg_i: usize = gold_spans
                .iter()
                .map(|(s, &g)| g.min(pred_spans.get(s).copied().unwrap_or(0)))
                .sum();
            let arg_c: usize = gold_labeled
                .iter()
                .map(|(k, &g)| g.min(pred_labeled.get(k).copied().unwrap_or(0)))
                .sum();
            report.arg_i.add(filled.len(), ev.arguments.len(), arg_i);
            report.arg_c.add(filled.len(), ev.arguments.len(), arg_c);
        }
    }
    if seen != predictions.len() {
        return Err(DataError::IdMismatch(format!(
            "{} predictions for {} gold events",
            predictions.len(),
            seen
        )));
    }
    Ok(report)
}

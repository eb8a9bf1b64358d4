use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Orders instance indices for one epoch. `types[i]` is the event type of
/// instance `i`. After a seeded shuffle, batches are assembled so that
/// `ceil((1 − mix)·batch_size)` members share one event type and the other
/// slots come from other types picked uniformly, skipping any type whose
/// draw would leave too few same-type groups for the batches still to come.
/// The dominant type of each batch is the one with the most instances left.
/// Once no type can fill the same-type quota, the remainder is emitted in
/// shuffled order. A corpus with a single type is just shuffled.
pub fn shuffle_rerank<S: AsRef<str>>(types: &[S], seed: u64, mix_fraction: f64, batch_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..types.len()).collect();
    order.shuffle(&mut rng);
    let batch_size = batch_size.max(1);
    let same = (((1.0 - mix_fraction.clamp(0.0, 1.0)) * batch_size as f64).ceil() as usize).clamp(1, batch_size);

    // queues in order of first appearance after the shuffle
    let mut rank: BTreeMap<&str, usize> = BTreeMap::new();
    let mut queues: Vec<Vec<usize>> = Vec::new();
    for &i in &order {
        let t = types[i].as_ref();
        let q = *rank.entry(t).or_insert_with(|| {
            queues.push(Vec::new());
            queues.len() - 1
        });
        queues[q].push(i);
    }
    if queues.len() < 2 {
        return order;
    }
    for q in &mut queues {
        q.reverse();
    }

    let mut out = Vec::with_capacity(types.len());
    loop {
        let remaining: usize = queues.iter().map(Vec::len).sum();
        if remaining == 0 {
            break;
        }
        let major = (0..queues.len()).fold(0, |best, q| if queues[q].len() > queues[best].len() { q } else { best });
        if queues[major].len() < same || remaining < batch_size {
            let set: std::collections::HashSet<usize> = queues.iter().flatten().copied().collect();
            let mut rest: Vec<usize> = order.iter().copied().filter(|i| set.contains(i)).collect();
            rest.shuffle(&mut rng);
            out.extend(rest);
            break;
        }
        let mut batch: Vec<usize> = (0..same).filter_map(|_| queues[major].pop()).collect();
        let later = (remaining - batch_size) / batch_size;
        while batch.len() < batch_size {
            let others: Vec<usize> = (0..queues.len()).filter(|&q| q != major && !queues[q].is_empty()).collect();
            let groups = |queues: &[Vec<usize>]| queues.iter().map(|q| q.len() / same).sum::<usize>();
            let keeps = |q: usize| {
                let left = queues[q].len() - 1;
                groups(&queues) - queues[q].len() / same + left / same >= later
            };
            let safe: Vec<usize> = others.iter().copied().filter(|&q| keeps(q)).collect();
            let q = if !safe.is_empty() {
                safe[rng.gen_range(0..safe.len())]
            } else if others.is_empty() || (!queues[major].is_empty() && keeps(major)) {
                major
            } else {
                others[rng.gen_range(0..others.len())]
            };
            match queues[q].pop() {
                Some(i) => batch.push(i),
                None => break,
            }
        }
        batch.shuffle(&mut rng);
        out.extend(batch);
    }
    out
}

//! First-order Markov interaction logs for experiments and tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::InteractionLog;

/// Every item has a fixed, small set of likely successors; with probability
/// `noise` the next item is drawn uniformly instead.
#[derive(Clone, Debug)]
pub struct MarkovConfig {
    pub num_items: usize,
    pub num_users: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Successor weights, most likely first.
    pub successor_weights: Vec<f64>,
    pub noise: f64,
}

impl Default for MarkovConfig {
    fn default() -> Self {
        Self {
            num_items: 200,
            num_users: 2000,
            min_len: 20,
            max_len: 50,
            successor_weights: vec![0.6, 0.25, 0.15],
            noise: 0.2,
        }
    }
}

impl MarkovConfig {
    /// `(user, item, timestamp)` events, one user after another.
    pub fn events(&self, seed: u64) -> Vec<(String, String, i64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<usize> = (0..self.num_items).collect();
        let successors: Vec<Vec<usize>> = (0..self.num_items)
            .map(|i| {
                let mut others: Vec<usize> = items.iter().copied().filter(|&j| j != i).collect();
                others.shuffle(&mut rng);
                others.truncate(self.successor_weights.len());
                others
            })
            .collect();
        let total: f64 = self.successor_weights.iter().sum();
        let mut events = Vec::new();
        for u in 0..self.num_users {
            let len = rng.gen_range(self.min_len..=self.max_len);
            let mut cur = rng.gen_range(0..self.num_items);
            for t in 0..len {
                events.push((format!("u{u}"), format!("i{cur}"), t as i64));
                cur = if rng.gen::<f64>() < self.noise {
                    rng.gen_range(0..self.num_items)
                } else {
                    let mut x = rng.gen::<f64>() * total;
                    let mut next = successors[cur][0];
                    for (k, &w) in self.successor_weights.iter().enumerate() {
                        if x < w {
                            next = successors[cur][k];
                            break;
                        }
                        x -= w;
                    }
                    next
                };
            }
        }
        events
    }

    pub fn log(&self, seed: u64) -> InteractionLog {
        InteractionLog::from_events(self.events(seed))
    }

    /// The events as tab-separated lines.
    pub fn tsv(&self, seed: u64) -> String {
        self.events(seed)
            .into_iter()
            .map(|(u, i, t)| format!("{u}\t{i}\t{t}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_determinism() {
        let cfg = MarkovConfig {
            num_items: 30,
            num_users: 40,
            ..Default::default()
        };
        let log = cfg.log(3);
        assert_eq!(log.num_users(), 40);
        assert!(log.num_items() <= 30);
        for u in 1..=40 {
            let n = log.history(u).len();
            assert!((20..=50).contains(&n));
        }
        assert_eq!(cfg.tsv(3), cfg.tsv(3));
        assert_ne!(cfg.tsv(3), cfg.tsv(4));
    }
}

//! Delivery-order policies over the in-flight pool.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Envelope;
use crate::NodeId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum SchedulerPolicy {
    /// Uniformly random choice among all in-flight envelopes.
    RandomAsync,
    /// Destinations take turns; each destination's envelopes arrive FIFO.
    RoundRobin,
    /// Until `budget` steps have elapsed, only envelopes whose source and
    /// destination are both in `favored` are delivered (uniformly among
    /// them); everything else is starved. Random afterwards.
    Adversarial { favored: Vec<NodeId>, budget: u64 },
}

pub(crate) enum Pool<M> {
    Random { rng: ChaCha8Rng, items: Vec<Envelope<M>> },
    RoundRobin { queues: Vec<VecDeque<Envelope<M>>>, cursor: usize, len: usize },
    Adversarial {
        rng: ChaCha8Rng,
        favored: Vec<bool>,
        budget: u64,
        eligible: Vec<Envelope<M>>,
        starved: Vec<Envelope<M>>,
        released: bool,
        fast_forwarded_at: Option<u64>,
    },
}

impl<M> Pool<M> {
    pub(crate) fn new(policy: SchedulerPolicy, n: usize, seed: u64) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(seed);
        match policy {
            SchedulerPolicy::RandomAsync => Pool::Random { rng, items: Vec::new() },
            SchedulerPolicy::RoundRobin => {
                Pool::RoundRobin { queues: (0..n).map(|_| VecDeque::new()).collect(), cursor: 0, len: 0 }
            }
            SchedulerPolicy::Adversarial { favored, budget } => {
                let mut mask = vec![false; n];
                for id in favored {
                    mask[id.index()] = true;
                }
                Pool::Adversarial {
                    rng,
                    favored: mask,
                    budget,
                    eligible: Vec::new(),
                    starved: Vec::new(),
                    released: budget == 0,
                    fast_forwarded_at: None,
                }
            }
        }
    }

    pub(crate) fn push(&mut self, env: Envelope<M>) {
        match self {
            Pool::Random { items, .. } => items.push(env),
            Pool::RoundRobin { queues, len, .. } => {
                queues[env.to.index()].push_back(env);
                *len += 1;
            }
            Pool::Adversarial { favored, eligible, starved, released, .. } => {
                if *released || (favored[env.from.index()] && favored[env.to.index()]) {
                    eligible.push(env);
                } else {
                    starved.push(env);
                }
            }
        }
    }

    /// Removes the next envelope to deliver. `step` is the number of
    /// deliveries so far; the adversarial pool may advance it.
    pub(crate) fn pop(&mut self, step: &mut u64) -> Option<Envelope<M>> {
        match self {
            Pool::Random { rng, items } => {
                if items.is_empty() {
                    return None;
                }
                let i = rng.gen_range(0..items.len());
                Some(items.swap_remove(i))
            }
            Pool::RoundRobin { queues, cursor, len } => {
                if *len == 0 {
                    return None;
                }
                let n = queues.len();
                for _ in 0..n {
                    let q = *cursor;
                    *cursor = (*cursor + 1) % n;
                    if let Some(env) = queues[q].pop_front() {
                        *len -= 1;
                        return Some(env);
                    }
                }
                unreachable!("len counts queued envelopes")
            }
            Pool::Adversarial { rng, budget, eligible, starved, released, fast_forwarded_at, .. } => {
                if !*released && *step >= *budget {
                    *released = true;
                    eligible.append(starved);
                }
                if eligible.is_empty() && !*released && !starved.is_empty() {
                    *fast_forwarded_at = Some(*step);
                    *step = *budget;
                    *released = true;
                    eligible.append(starved);
                }
                if eligible.is_empty() {
                    return None;
                }
                let i = rng.gen_range(0..eligible.len());
                Some(eligible.swap_remove(i))
            }
        }
    }

    pub(crate) fn len(&self) -> usize {
        match self {
            Pool::Random { items, .. } => items.len(),
            Pool::RoundRobin { len, .. } => *len,
            Pool::Adversarial { eligible, starved, .. } => eligible.len() + starved.len(),
        }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn fast_forwarded_at(&self) -> Option<u64> {
        match self {
            Pool::Adversarial { fast_forwarded_at, .. } => *fast_forwarded_at,
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{CostKind, CostTag};

    fn env(from: u32, to: u32, msg: u32) -> Envelope<u32> {
        Envelope {
            from: NodeId(from),
            to: NodeId(to),
            msg,
            bytes: 1,
            tag: CostTag { kind: CostKind::Share, sender: NodeId(from), round: 1 },
            sent_step: 0,
        }
    }

    #[test]
    fn random_pool_drains_everything() {
        let mut pool = Pool::new(SchedulerPolicy::RandomAsync, 4, 1);
        for i in 0..100_000u32 {
            pool.push(env(1 + i % 4, 1 + (i / 4) % 4, i));
        }
        let mut step = 0;
        let mut seen = vec![false; 100_000];
        while let Some(e) = pool.pop(&mut step) {
            assert!(!seen[e.msg as usize]);
            seen[e.msg as usize] = true;
            step += 1;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn round_robin_rotates_destinations() {
        let mut pool = Pool::new(SchedulerPolicy::RoundRobin, 3, 0);
        for (to, m) in [(1, 0), (1, 1), (2, 2), (3, 3)] {
            pool.push(env(1, to, m));
        }
        let mut step = 0;
        let order: Vec<u32> = std::iter::from_fn(|| pool.pop(&mut step).map(|e| e.msg)).collect();
        assert_eq!(order, vec![0, 2, 3, 1]);
    }

    #[test]
    fn adversarial_starves_until_budget() {
        let policy = SchedulerPolicy::Adversarial { favored: vec![NodeId(1), NodeId(2)], budget: 3 };
        let mut pool = Pool::new(policy, 3, 5);
        pool.push(env(1, 3, 100));
        for m in 0..5 {
            pool.push(env(1, 2, m));
        }
        let mut step = 0;
        for _ in 0..3 {
            let e = pool.pop(&mut step).unwrap();
            assert_ne!(e.msg, 100);
            step += 1;
        }
        let rest: Vec<u32> = std::iter::from_fn(|| {
            let e = pool.pop(&mut step);
            step += 1;
            e.map(|e| e.msg)
        })
        .collect();
        assert_eq!(rest.len(), 3);
        assert!(rest.contains(&100));
    }

    #[test]
    fn adversarial_fast_forwards_when_only_starved_remain() {
        let policy = SchedulerPolicy::Adversarial { favored: vec![NodeId(1)], budget: 1000 };
        let mut pool = Pool::new(policy, 2, 5);
        pool.push(env(1, 2, 7));
        let mut step = 4;
        assert_eq!(pool.pop(&mut step).unwrap().msg, 7);
        assert_eq!(step, 1000);
        assert_eq!(pool.fast_forwarded_at(), Some(4));
    }

    #[test]
    fn empty_favored_set_releases_nothing_relevant() {
        let policy = SchedulerPolicy::Adversarial { favored: vec![], budget: 10 };
        let mut pool = Pool::new(policy, 2, 5);
        pool.push(env(1, 2, 7));
        let mut step = 0;
        assert_eq!(pool.pop(&mut step).unwrap().msg, 7);
    }
}

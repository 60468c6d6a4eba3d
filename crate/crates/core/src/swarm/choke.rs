//! Unchoke decisions for leechers and seeds.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::ids::PeerId;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub peer: PeerId,
    /// Bytes received from this neighbor over the last rate window.
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Unchoke {
    pub regular: Vec<PeerId>,
    pub optimistic: Option<PeerId>,
}

impl Unchoke {
    pub fn contains(&self, p: PeerId) -> bool {
        self.optimistic == Some(p) || self.regular.contains(&p)
    }

    pub fn len(&self) -> usize {
        self.regular.len() + usize::from(self.optimistic.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Leecher round over the interested neighbors: the `slots − 1` best
/// uploaders to us plus one optimistic unchoke. The optimistic slot is kept
/// between rotations as long as it stays eligible.
pub fn leecher_unchoke<R: Rng>(
    interested: &[Candidate],
    slots: usize,
    current_optimistic: Option<PeerId>,
    rotate: bool,
    rng: &mut R,
) -> Unchoke {
    let mut order: Vec<Candidate> = interested.to_vec();
    order.shuffle(rng);
    order.sort_by(|a, b| b.rate.total_cmp(&a.rate));
    let regular: Vec<PeerId> = order.iter().take(slots.saturating_sub(1)).map(|c| c.peer).collect();
    let rest: Vec<PeerId> = order.iter().map(|c| c.peer).filter(|p| !regular.contains(p)).collect();
    let keep = current_optimistic.filter(|p| !rotate && rest.contains(p));
    let optimistic = if slots == 0 {
        None
    } else {
        keep.or_else(|| rest.choose(rng).copied())
    };
    Unchoke { regular, optimistic }
}

/// Seed round. `current` lists unchoked neighbors with their unchoke time;
/// `interested` lists interested neighbors in ascending id order. Keeps the
/// interested ones, drops the longest-served one when rotating, and refills
/// round-robin after `cursor`.
pub fn seed_unchoke(
    interested: &[PeerId],
    current: &[(PeerId, f64)],
    slots: usize,
    rotate: bool,
    cursor: &mut Option<PeerId>,
) -> Vec<PeerId> {
    let mut kept: Vec<(PeerId, f64)> = current
        .iter()
        .copied()
        .filter(|(p, _)| interested.contains(p))
        .collect();
    let waiting = interested.iter().any(|p| !kept.iter().any(|k| k.0 == *p));
    if rotate && waiting && kept.len() >= slots && !kept.is_empty() {
        let oldest = kept
            .iter()
            .enumerate()
            .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(a.1 .0.cmp(&b.1 .0)))
            .map(|(i, _)| i)
            .unwrap();
        kept.remove(oldest);
    }
    kept.truncate(slots);
    let mut out: Vec<PeerId> = kept.into_iter().map(|k| k.0).collect();
    if interested.is_empty() {
        return out;
    }
    let start = cursor.map_or(0, |c| interested.partition_point(|p| *p <= c));
    for k in 0..interested.len() {
        if out.len() >= slots {
            break;
        }
        let p = interested[(start + k) % interested.len()];
        if !out.contains(&p) {
            out.push(p);
            *cursor = Some(p);
        }
    }
    out
}

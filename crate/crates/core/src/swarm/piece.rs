//! Rarest-first piece selection.

use rand::Rng;

use super::bitfield::{bits, Bitfield};

/// Piece to request from a neighbor holding `from`.
///
/// Candidates are the pieces `from` has, `have` lacks and that are not
/// already being fetched. Partially held pieces win over fresh ones; within a
/// tier the piece with the fewest copies in the neighborhood (`avail`) is
/// chosen, ties broken uniformly.
pub fn select_piece<R: Rng>(
    have: &Bitfield,
    from: &Bitfield,
    in_flight: &Bitfield,
    partial: &[u32],
    avail: &[u16],
    rng: &mut R,
) -> Option<u32> {
    let eligible = |p: u32| from.get(p) && !have.get(p) && !in_flight.get(p);
    if let Some(p) = rarest(partial.iter().copied().filter(|&p| eligible(p)), avail, rng) {
        return Some(p);
    }
    let words = have
        .words()
        .iter()
        .zip(from.words())
        .zip(in_flight.words())
        .enumerate()
        .flat_map(|(i, ((h, f), b))| bits(f & !h & !b).map(move |k| i as u32 * 64 + k));
    rarest(words, avail, rng)
}

fn rarest<R: Rng>(candidates: impl Iterator<Item = u32>, avail: &[u16], rng: &mut R) -> Option<u32> {
    let mut best = None;
    let mut best_count = u16::MAX;
    let mut ties = 0u32;
    for p in candidates {
        let c = avail[p as usize];
        if c < best_count {
            best = Some(p);
            best_count = c;
            ties = 1;
        } else if c == best_count {
            ties += 1;
            if rng.gen_range(0..ties) == 0 {
                best = Some(p);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn bf(n: u32, ones: &[u32]) -> Bitfield {
        let mut b = Bitfield::new(n);
        for &i in ones {
            b.set(i);
        }
        b
    }

    #[test]
    fn nothing_new_gives_none() {
        let mut rng = stream(1, Stream::Swarm);
        let have = bf(10, &[1, 2]);
        let from = bf(10, &[1, 2]);
        assert_eq!(select_piece(&have, &from, &Bitfield::new(10), &[], &[1; 10], &mut rng), None);
        // the only new piece is already in flight
        let from = bf(10, &[1, 2, 5]);
        let flight = bf(10, &[5]);
        assert_eq!(select_piece(&have, &from, &flight, &[], &[1; 10], &mut rng), None);
    }

    #[test]
    fn picks_brute_force_minimum() {
        let mut rng = stream(2, Stream::Swarm);
        for trial in 0..200u32 {
            let n = 100;
            let avail: Vec<u16> = (0..n).map(|i| ((i * 7 + trial * 13) % 11) as u16).collect();
            let from = bf(n, &(0..n).filter(|i| (i + trial) % 3 != 0).collect::<Vec<_>>());
            let have = bf(n, &(0..n).filter(|i| i % 5 == 0).collect::<Vec<_>>());
            let p = select_piece(&have, &from, &Bitfield::new(n), &[], &avail, &mut rng).unwrap();
            let min = (0..n)
                .filter(|&i| from.get(i) && !have.get(i))
                .map(|i| avail[i as usize])
                .min()
                .unwrap();
            assert_eq!(avail[p as usize], min);
            assert!(from.get(p) && !have.get(p));
        }
        let mut avail = vec![5u16; 4];
        avail[1] = 1;
        avail[3] = 3;
        assert_eq!(
            select_piece(&bf(4, &[]), &bf(4, &[1, 3]), &Bitfield::new(4), &[], &avail, &mut rng),
            Some(1)
        );
    }

    #[test]
    fn partial_pieces_first() {
        let mut rng = stream(3, Stream::Swarm);
        let mut avail = vec![1u16; 8];
        avail[6] = 9;
        let p = select_piece(&bf(8, &[]), &Bitfield::full(8), &Bitfield::new(8), &[6], &avail, &mut rng);
        assert_eq!(p, Some(6));
    }

    #[test]
    fn fresh_swarm_spreads_requests() {
        // every neighbor sees only the seed: all counts equal, so picks are uniform
        let n = 391;
        let mut distinct = 0;
        for seed in 0..50 {
            let mut rng = stream(seed, Stream::Swarm);
            let mut flight = Bitfield::new(n);
            for _ in 0..4 {
                let p = select_piece(&Bitfield::new(n), &Bitfield::full(n), &flight, &[], &vec![1; n as usize], &mut rng)
                    .unwrap();
                flight.set(p);
            }
            distinct += flight.count_ones();
        }
        assert_eq!(distinct, 200);
        let firsts: std::collections::BTreeSet<u32> = (0..200)
            .map(|s| {
                let mut rng = stream(s, Stream::Swarm);
                select_piece(&Bitfield::new(n), &Bitfield::full(n), &Bitfield::new(n), &[], &vec![1; n as usize], &mut rng).unwrap()
            })
            .collect();
        // 200 uniform draws over 391 pieces hit well over 100 distinct pieces
        assert!(firsts.len() > 120, "{}", firsts.len());
    }
}

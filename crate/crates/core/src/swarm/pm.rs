//! Client side starvation timer.

use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct PmTimer {
    t0: f64,
    t: f64,
    deadline: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PmOutcome {
    /// A needed piece was visible: the window was reset.
    Satisfied,
    /// Nothing needed was visible: announce with the PM flag.
    Announce,
}

impl PmTimer {
    pub fn new<R: Rng>(t0: f64, now: f64, rng: &mut R) -> Self {
        PmTimer {
            t0,
            t: t0,
            deadline: now + rng.gen_range(0.0..=t0),
        }
    }

    pub fn period(&self) -> f64 {
        self.t
    }

    pub fn deadline(&self) -> f64 {
        self.deadline
    }

    /// A neighbor revealed a needed piece.
    pub fn observe_needed(&mut self) {
        self.t = self.t0;
    }

    /// Runs the check due at the deadline.
    pub fn check<R: Rng>(&mut self, now: f64, needed_visible: bool, rng: &mut R) -> PmOutcome {
        let outcome = if needed_visible {
            self.t = self.t0;
            PmOutcome::Satisfied
        } else {
            self.t *= 2.0;
            PmOutcome::Announce
        };
        self.deadline = now + rng.gen_range(0.0..=self.t);
        outcome
    }
}

//! Fluid rate sharing.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ordered_float::OrderedFloat;

use crate::ids::{IspId, PeerId};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Flow {
    pub uploader: PeerId,
    pub src_isp: IspId,
    pub dst_isp: IspId,
}

impl Flow {
    pub fn is_external(&self) -> bool {
        self.src_isp != self.dst_isp
    }
}

/// Rate of every flow. Each uploader splits its capacity evenly over its
/// flows; then each ISP whose outbound inter-ISP total exceeds `egress_cap`
/// has all its inter-ISP flows scaled by the same factor. The initial seed's
/// pseudo-ISP is never capped.
pub fn allocate_rates(flows: &[Flow], capacity: impl Fn(PeerId) -> f64, egress_cap: Option<f64>) -> Vec<f64> {
    use std::collections::BTreeMap;
    let mut per_uploader: BTreeMap<PeerId, usize> = BTreeMap::new();
    for f in flows {
        *per_uploader.entry(f.uploader).or_default() += 1;
    }
    let mut rates: Vec<f64> = flows
        .iter()
        .map(|f| capacity(f.uploader) / per_uploader[&f.uploader] as f64)
        .collect();
    if let Some(cap) = egress_cap {
        let mut external: BTreeMap<IspId, f64> = BTreeMap::new();
        for (f, r) in flows.iter().zip(&rates) {
            if f.is_external() && !f.src_isp.is_seed_pseudo() {
                *external.entry(f.src_isp).or_default() += r;
            }
        }
        for (f, r) in flows.iter().zip(rates.iter_mut()) {
            if f.is_external() && !f.src_isp.is_seed_pseudo() {
                *r *= scale(external[&f.src_isp], cap);
            }
        }
    }
    rates
}

/// Factor applied to a group of flows with total nominal rate `demand`.
pub fn scale(demand: f64, cap: f64) -> f64 {
    if demand > cap {
        cap / demand
    } else {
        1.0
    }
}

/// Flows sharing one egress cap progress on a common virtual clock whose
/// speed is the group's scale factor, so a change of factor only moves the
/// group's head event.
#[derive(Clone, Debug)]
pub(crate) struct ClockGroup {
    pub v: f64,
    pub t: f64,
    pub factor: f64,
    pub cap: f64,
    pub nominal: f64,
    pub members: u32,
    /// (virtual finish, transfer slot, transfer generation)
    pub heap: BinaryHeap<Reverse<(OrderedFloat<f64>, u32, u64)>>,
    pub head_gen: u64,
}

impl ClockGroup {
    pub fn new(cap: f64) -> Self {
        ClockGroup {
            v: 0.0,
            t: 0.0,
            factor: 1.0,
            cap,
            nominal: 0.0,
            members: 0,
            heap: BinaryHeap::new(),
            head_gen: 0,
        }
    }

    pub fn advance(&mut self, now: f64) {
        if now > self.t {
            self.v += self.factor * (now - self.t);
            self.t = now;
        }
    }

    pub fn virtual_at(&self, now: f64) -> f64 {
        self.v + self.factor * (now - self.t).max(0.0)
    }

    pub fn add(&mut self, rate: f64) {
        self.members += 1;
        self.nominal += rate;
    }

    pub fn remove(&mut self, rate: f64) {
        self.members -= 1;
        self.nominal = if self.members == 0 { 0.0 } else { (self.nominal - rate).max(0.0) };
    }

    /// Must follow `advance(now)`.
    pub fn refresh_factor(&mut self) {
        self.factor = scale(self.nominal, self.cap);
    }

    /// Real time at which virtual time `vkey` is reached.
    pub fn real_time_of(&self, vkey: f64) -> f64 {
        self.t + (vkey - self.v).max(0.0) / self.factor
    }
}

//! Fluid bandwidth model over the active block transfers.
//!
//! Rates follow a two-stage rule. Stage one: every sender divides its upload
//! capacity equally over its busy upload slots. Stage two: every receiver
//! whose offered inflow exceeds its download capacity scales all of its
//! inflows down proportionally. Capacity a sender loses to stage two is not
//! handed to its other receivers, so the result is generally below the
//! max-min fair allocation; the trade is that rates are a closed-form
//! function of the topology and can be recomputed exactly after every change.
//!
//! Transfers progress linearly between topology changes. On each change the
//! affected transfers are settled up to the current instant and their
//! completion events rescheduled from the bytes they still owe.

use crate::engine::{EventId, EventKind, EventQueue};
use crate::model::PeerId;

/// Handle to an active transfer. The generation guards against slab reuse.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TransferId {
    index: u32,
    generation: u32,
}

/// One block moving from `sender` to `receiver`.
#[derive(Clone, Debug)]
pub struct Transfer {
    pub sender: PeerId,
    pub receiver: PeerId,
    pub piece: usize,
    pub block: usize,
    pub size_bytes: f64,
    remaining_bytes: f64,
    rate_bps: f64,
    last_settled: f64,
    completion: Option<EventId>,
    generation: u32,
}

impl Transfer {
    pub fn rate_bps(&self) -> f64 {
        self.rate_bps
    }

    /// Bytes still owed as of `now`, assuming the current rate held since the
    /// last settlement.
    pub fn remaining_at(&self, now: f64) -> f64 {
        (self.remaining_bytes - self.rate_bps / 8.0 * (now - self.last_settled)).max(0.0)
    }
}

#[derive(Clone, Debug, Default)]
struct Endpoint {
    up_bps: f64,
    down_bps: f64,
    outgoing: Vec<TransferId>,
    incoming: Vec<TransferId>,
    // Scratch for reallocation, valid only within one pass.
    inflow_acc: f64,
    scale: f64,
    epoch: u64,
}

/// Numerical health counters, checked by the invariant test suite.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlowStats {
    /// Reallocations where a receiver's scaled inflow exceeded its capacity
    /// or a sender's outflow exceeded its capacity beyond tolerance.
    pub cap_violations: u64,
    /// Completed blocks whose integrated bytes missed the block size by more
    /// than one part in a million.
    pub conservation_violations: u64,
    /// Worst relative conservation error seen.
    pub worst_conservation_error: f64,
}

const CAP_TOLERANCE: f64 = 1e-9;
const CONSERVATION_TOLERANCE: f64 = 1e-6;

/// All active transfers plus per-peer capacities.
#[derive(Debug, Default)]
pub struct FlowNetwork {
    transfers: Vec<Option<Transfer>>,
    free: Vec<u32>,
    generations: Vec<u32>,
    endpoints: Vec<Option<Endpoint>>,
    epoch: u64,
    dirty: bool,
    pub stats: FlowStats,
}

impl FlowNetwork {
    pub fn new() -> FlowNetwork {
        FlowNetwork::default()
    }

    pub fn add_peer(&mut self, peer: PeerId, up_bps: f64, down_bps: f64) {
        let idx = peer.0 as usize;
        if self.endpoints.len() <= idx {
            self.endpoints.resize(idx + 1, None);
        }
        assert!(self.endpoints[idx].is_none(), "peer {peer} already present");
        self.endpoints[idx] = Some(Endpoint {
            up_bps,
            down_bps,
            ..Endpoint::default()
        });
    }

    /// Removes a departed peer. All of its transfers must already be gone.
    pub fn remove_peer(&mut self, peer: PeerId) {
        let ep = self.endpoints[peer.0 as usize]
            .take()
            .expect("removing unknown peer");
        assert!(
            ep.outgoing.is_empty() && ep.incoming.is_empty(),
            "peer {peer} removed with live transfers"
        );
    }

    fn endpoint(&self, peer: PeerId) -> &Endpoint {
        self.endpoints[peer.0 as usize]
            .as_ref()
            .expect("unknown peer")
    }

    fn endpoint_mut(&mut self, peer: PeerId) -> &mut Endpoint {
        self.endpoints[peer.0 as usize]
            .as_mut()
            .expect("unknown peer")
    }

    /// Active outbound transfer count; these are the busy upload slots.
    pub fn busy_out(&self, peer: PeerId) -> usize {
        self.endpoint(peer).outgoing.len()
    }

    pub fn busy_in(&self, peer: PeerId) -> usize {
        self.endpoint(peer).incoming.len()
    }

    pub fn get(&self, id: TransferId) -> Option<&Transfer> {
        match self.transfers.get(id.index as usize) {
            Some(Some(t)) if t.generation == id.generation => Some(t),
            _ => None,
        }
    }

    /// Begins a transfer. Its rate is zero until the next [`reallocate`];
    /// callers batch all topology changes of one event first.
    ///
    /// [`reallocate`]: FlowNetwork::reallocate
    pub fn start(
        &mut self,
        sender: PeerId,
        receiver: PeerId,
        piece: usize,
        block: usize,
        size_bytes: f64,
        now: f64,
    ) -> TransferId {
        let index = match self.free.pop() {
            Some(i) => i,
            None => {
                self.transfers.push(None);
                self.generations.push(0);
                (self.transfers.len() - 1) as u32
            }
        };
        let generation = self.generations[index as usize];
        let id = TransferId { index, generation };
        self.transfers[index as usize] = Some(Transfer {
            sender,
            receiver,
            piece,
            block,
            size_bytes,
            remaining_bytes: size_bytes,
            rate_bps: 0.0,
            last_settled: now,
            completion: None,
            generation,
        });
        self.endpoint_mut(sender).outgoing.push(id);
        self.endpoint_mut(receiver).incoming.push(id);
        self.dirty = true;
        id
    }

    fn unlink(&mut self, id: TransferId, queue: &mut EventQueue) -> Transfer {
        let t = self.transfers[id.index as usize]
            .take()
            .expect("unlinking dead transfer");
        assert_eq!(t.generation, id.generation, "stale transfer handle");
        if let Some(ev) = t.completion {
            queue.cancel(ev);
        }
        self.generations[id.index as usize] += 1;
        self.free.push(id.index);
        let out = &mut self.endpoint_mut(t.sender).outgoing;
        out.retain(|x| *x != id);
        let inc = &mut self.endpoint_mut(t.receiver).incoming;
        inc.retain(|x| *x != id);
        self.dirty = true;
        t
    }

    /// Tears down a transfer mid-flight (choke, departure). The partial block
    /// is discarded.
    pub fn abort(&mut self, id: TransferId, queue: &mut EventQueue) -> Transfer {
        self.unlink(id, queue)
    }

    /// Finalizes a transfer whose completion event just fired and returns it.
    /// The integrated byte count is checked against the block size.
    pub fn complete(&mut self, id: TransferId, now: f64, queue: &mut EventQueue) -> Transfer {
        {
            let t = self.transfers[id.index as usize]
                .as_mut()
                .expect("completing dead transfer");
            assert_eq!(t.generation, id.generation, "stale transfer handle");
            let drained = t.rate_bps / 8.0 * (now - t.last_settled);
            let leftover = (t.remaining_bytes - drained).abs();
            let rel = leftover / t.size_bytes;
            if rel > CONSERVATION_TOLERANCE {
                self.stats.conservation_violations += 1;
            }
            if rel > self.stats.worst_conservation_error {
                self.stats.worst_conservation_error = rel;
            }
        }
        self.unlink(id, queue)
    }

    /// Aborts every transfer touching `peer` and returns them (for the swarm
    /// to release the in-flight blocks).
    pub fn abort_all_for(&mut self, peer: PeerId, queue: &mut EventQueue) -> Vec<Transfer> {
        let ep = self.endpoint(peer);
        let mut ids: Vec<TransferId> = Vec::with_capacity(ep.outgoing.len() + ep.incoming.len());
        ids.extend_from_slice(&ep.outgoing);
        ids.extend_from_slice(&ep.incoming);
        ids.into_iter().map(|id| self.unlink(id, queue)).collect()
    }

    /// Outbound transfer of `sender` headed to `receiver`, if any.
    pub fn outgoing_to(&self, sender: PeerId, receiver: PeerId) -> Option<TransferId> {
        self.endpoint(sender)
            .outgoing
            .iter()
            .copied()
            .find(|id| self.get(*id).map(|t| t.receiver) == Some(receiver))
    }

    pub fn mark_dirty(&mut self) {
        self.dirty = true;
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    /// Recomputes every rate from the current topology; transfers whose rate
    /// changed are settled at `now` and their completions rescheduled.
    pub fn reallocate(&mut self, now: f64, queue: &mut EventQueue) {
        self.dirty = false;
        self.epoch += 1;
        let epoch = self.epoch;

        // Stage one: equal split of each sender's capacity, accumulated into
        // each receiver's offered inflow.
        for slot in 0..self.transfers.len() {
            let (sender, receiver) = match &self.transfers[slot] {
                Some(t) => (t.sender, t.receiver),
                None => continue,
            };
            let offered = {
                let ep = self.endpoint(sender);
                ep.up_bps / ep.outgoing.len() as f64
            };
            let recv = self.endpoint_mut(receiver);
            if recv.epoch != epoch {
                recv.epoch = epoch;
                recv.inflow_acc = 0.0;
            }
            recv.inflow_acc += offered;
        }

        // Stage two: proportional scale-down at overloaded receivers.
        for ep in self.endpoints.iter_mut().flatten() {
            if ep.epoch == epoch {
                ep.scale = if ep.inflow_acc > ep.down_bps {
                    ep.down_bps / ep.inflow_acc
                } else {
                    1.0
                };
            }
        }

        // Apply, settling and rescheduling only where the rate moved.
        for slot in 0..self.transfers.len() {
            let (rate, stale) = match &self.transfers[slot] {
                Some(t) => {
                    let offered = {
                        let ep = self.endpoint(t.sender);
                        ep.up_bps / ep.outgoing.len() as f64
                    };
                    let rate = offered * self.endpoint(t.receiver).scale;
                    (rate, rate != t.rate_bps || t.completion.is_none())
                }
                None => continue,
            };
            if !stale {
                continue;
            }
            let t = self.transfers[slot].as_mut().unwrap();
            t.remaining_bytes =
                (t.remaining_bytes - t.rate_bps / 8.0 * (now - t.last_settled)).max(0.0);
            t.last_settled = now;
            t.rate_bps = rate;
            if let Some(ev) = t.completion.take() {
                queue.cancel(ev);
            }
            debug_assert!(rate > 0.0, "active transfer allocated zero rate");
            let eta = now + t.remaining_bytes * 8.0 / rate;
            let id = TransferId {
                index: slot as u32,
                generation: t.generation,
            };
            t.completion = Some(queue.schedule(eta, EventKind::BlockComplete { transfer: id }));
        }

        self.check_caps();
    }

    fn check_caps(&mut self) {
        let epoch = self.epoch;
        for ep in self.endpoints.iter().flatten() {
            if ep.epoch == epoch && ep.inflow_acc > ep.down_bps {
                let after = ep.inflow_acc * ep.scale;
                if after > ep.down_bps * (1.0 + CAP_TOLERANCE) {
                    self.stats.cap_violations += 1;
                }
            }
            // Sender side: scale factors only shrink the equal split, so the
            // outflow bound holds whenever each edge got at most its offer.
            if !ep.outgoing.is_empty() {
                let outflow: f64 = ep
                    .outgoing
                    .iter()
                    .filter_map(|id| self.get(*id))
                    .map(|t| t.rate_bps)
                    .sum();
                if outflow > ep.up_bps * (1.0 + CAP_TOLERANCE) {
                    self.stats.cap_violations += 1;
                }
            }
        }
    }

    /// Compact copy of the live topology for cross-checking against the pure
    /// allocator.
    pub fn snapshot(&self) -> (RateInstance, Vec<f64>) {
        let mut ids: Vec<PeerId> = Vec::new();
        for (i, ep) in self.endpoints.iter().enumerate() {
            if ep.is_some() {
                ids.push(PeerId(i as u32));
            }
        }
        let dense: std::collections::BTreeMap<PeerId, usize> =
            ids.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        let mut inst = RateInstance {
            up_bps: ids.iter().map(|p| self.endpoint(*p).up_bps).collect(),
            down_bps: ids.iter().map(|p| self.endpoint(*p).down_bps).collect(),
            edges: Vec::new(),
        };
        let mut live = Vec::new();
        for t in self.transfers.iter().flatten() {
            inst.edges.push((dense[&t.sender], dense[&t.receiver]));
            live.push(t.rate_bps);
        }
        (inst, live)
    }
}

/// Standalone allocation instance: peers by dense index, one entry per
/// active transfer.
#[derive(Clone, Debug, PartialEq)]
pub struct RateInstance {
    pub up_bps: Vec<f64>,
    pub down_bps: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
}

/// Pure two-stage allocation. Returns one rate per edge, in edge order.
pub fn allocate_rates(inst: &RateInstance) -> Vec<f64> {
    let peers = inst.up_bps.len();
    let mut busy = vec![0usize; peers];
    for (s, _) in &inst.edges {
        busy[*s] += 1;
    }
    let mut inflow = vec![0.0f64; peers];
    for (s, r) in &inst.edges {
        inflow[*r] += inst.up_bps[*s] / busy[*s] as f64;
    }
    let scale: Vec<f64> = (0..peers)
        .map(|r| {
            if inflow[r] > inst.down_bps[r] {
                inst.down_bps[r] / inflow[r]
            } else {
                1.0
            }
        })
        .collect();
    inst.edges
        .iter()
        .map(|(s, r)| inst.up_bps[*s] / busy[*s] as f64 * scale[*r])
        .collect()
}

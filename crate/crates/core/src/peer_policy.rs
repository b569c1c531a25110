//! Upload slot selection: who gets unchoked, and when.
//!
//! All three policies share the same skeleton: a tick fires every `delta_s`
//! seconds, the policy ranks the interested remotes, and the difference
//! between the new and old slot sets becomes choke/unchoke messages. They
//! differ in how the slots are filled:
//!
//! * `original`: leechers give `x1` slots to their fastest uploaders plus one
//!   optimistic slot rotated every k-th tick; seeders rank by their own send
//!   rate instead.
//! * `sbnp`: leechers split slots evenly between fastest uploaders and
//!   randomly drawn remotes; seeders keep serving whoever they unchoked most
//!   recently, which makes their slot set sticky.
//! * `qbps`: leechers reserve up to `max_quota` slots for remotes currently
//!   downloading slower than themselves, nearest playback position first;
//!   the rest go to the fastest uploaders. Seeders behave like `original`.

use std::collections::BTreeSet;
use std::collections::{BTreeMap, VecDeque};

use rand::Rng;

use crate::model::{PeerId, PolicyKind, PolicyParams};

/// Rolling-window rate estimation horizon in seconds.
pub const RATE_HORIZON_S: f64 = 20.0;

/// Byte counter over a sliding window.
#[derive(Clone, Debug, Default)]
struct RollingRate {
    samples: VecDeque<(f64, u64)>,
    total_bytes: u64,
}

impl RollingRate {
    fn prune(&mut self, now: f64) {
        while let Some((t, bytes)) = self.samples.front() {
            if *t < now - RATE_HORIZON_S {
                self.total_bytes -= bytes;
                self.samples.pop_front();
            } else {
                break;
            }
        }
    }

    fn record(&mut self, now: f64, bytes: u64) {
        self.prune(now);
        self.samples.push_back((now, bytes));
        self.total_bytes += bytes;
    }

    fn bps(&mut self, now: f64) -> f64 {
        self.prune(now);
        self.total_bytes as f64 * 8.0 / RATE_HORIZON_S
    }
}

/// Per-peer traffic history: delivery rates per remote in both directions
/// plus the local aggregate download rate. Remotes that never exchanged a
/// byte report exactly zero.
#[derive(Clone, Debug, Default)]
pub struct RateEstimator {
    received: BTreeMap<PeerId, RollingRate>,
    sent: BTreeMap<PeerId, RollingRate>,
    aggregate_in: RollingRate,
}

impl RateEstimator {
    pub fn new() -> RateEstimator {
        RateEstimator::default()
    }

    pub fn record_received(&mut self, remote: PeerId, bytes: u64, now: f64) {
        self.received.entry(remote).or_default().record(now, bytes);
        self.aggregate_in.record(now, bytes);
    }

    pub fn record_sent(&mut self, remote: PeerId, bytes: u64, now: f64) {
        self.sent.entry(remote).or_default().record(now, bytes);
    }

    /// Rate at which `remote` has been delivering to us.
    pub fn received_from_bps(&mut self, remote: PeerId, now: f64) -> f64 {
        self.received.get_mut(&remote).map_or(0.0, |r| r.bps(now))
    }

    /// Rate at which we have been delivering to `remote`.
    pub fn sent_to_bps(&mut self, remote: PeerId, now: f64) -> f64 {
        self.sent.get_mut(&remote).map_or(0.0, |r| r.bps(now))
    }

    /// Aggregate local download rate across all remotes.
    pub fn download_bps(&mut self, now: f64) -> f64 {
        self.aggregate_in.bps(now)
    }

    pub fn forget(&mut self, remote: PeerId) {
        self.received.remove(&remote);
        self.sent.remove(&remote);
    }
}

/// Whether the peer still wants pieces or serves from a complete copy.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Role {
    Leecher,
    Seeder,
}

/// Regular ticks re-rank the rate-based slots; every k-th tick is optimistic
/// and also rotates the altruistic ones.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TickKind {
    Regular,
    Optimistic,
}

/// Snapshot of one interested remote at tick time.
#[derive(Clone, Copy, Debug)]
pub struct Candidate {
    pub peer: PeerId,
    /// Their 20 s delivery rate to us.
    pub received_from_bps: f64,
    /// Our 20 s delivery rate to them.
    pub sent_to_bps: f64,
    /// |remote playback piece - local playback piece|.
    pub playback_distance: u64,
    /// When we last unchoked them; `None` means never.
    pub last_unchoked_at: Option<f64>,
}

/// The upload slots a peer currently offers. `regular` holds the rate-ranked
/// slots, `altruistic` the optimistic/random/quota ones. The split is
/// internal: a remote moving between the two groups is not re-notified.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlotAssignment {
    pub regular: Vec<PeerId>,
    pub altruistic: Vec<PeerId>,
}

impl SlotAssignment {
    pub fn contains(&self, peer: PeerId) -> bool {
        self.regular.contains(&peer) || self.altruistic.contains(&peer)
    }

    pub fn len(&self) -> usize {
        self.regular.len() + self.altruistic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = PeerId> + '_ {
        self.regular.iter().chain(self.altruistic.iter()).copied()
    }

    /// Drops remotes that disconnected or lost interest mid-cycle.
    pub fn retain<F: Fn(PeerId) -> bool>(&mut self, keep: F) {
        self.regular.retain(|p| keep(*p));
        self.altruistic.retain(|p| keep(*p));
    }
}

/// Messages produced by a slot change, sorted by peer id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlotDiff {
    pub choke: Vec<PeerId>,
    pub unchoke: Vec<PeerId>,
}

/// Set difference over the slot union; slot-group moves produce no message.
pub fn diff(old: &SlotAssignment, new: &SlotAssignment) -> SlotDiff {
    let before: BTreeSet<PeerId> = old.iter().collect();
    let after: BTreeSet<PeerId> = new.iter().collect();
    SlotDiff {
        choke: before.difference(&after).copied().collect(),
        unchoke: after.difference(&before).copied().collect(),
    }
}

/// Top `k` candidates by `key` descending, ties broken uniformly at random,
/// skipping `exclude`.
fn ranked<R: Rng, F: Fn(&Candidate) -> f64>(
    candidates: &[Candidate],
    exclude: &BTreeSet<PeerId>,
    k: usize,
    key: F,
    rng: &mut R,
) -> Vec<PeerId> {
    let mut pool: Vec<(f64, u64, PeerId)> = candidates
        .iter()
        .filter(|c| !exclude.contains(&c.peer))
        .map(|c| (key(c), rng.gen::<u64>(), c.peer))
        .collect();
    pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    pool.truncate(k);
    pool.into_iter().map(|(_, _, p)| p).collect()
}

/// Uniform draw of up to `k` distinct peers.
fn draw<R: Rng>(mut pool: Vec<PeerId>, k: usize, rng: &mut R) -> Vec<PeerId> {
    let mut out = Vec::with_capacity(k.min(pool.len()));
    while out.len() < k && !pool.is_empty() {
        out.push(pool.swap_remove(rng.gen_range(0..pool.len())));
    }
    out
}

/// Fills `want` altruistic slots from `eligible` (already excludes the
/// regular slots). Regular ticks keep current occupants and only refill
/// vacancies; optimistic ticks rotate, preferring remotes not already in the
/// slot and falling back to occupants when nobody else is interested.
fn rotate_fill<R: Rng>(
    eligible: &[PeerId],
    current: &[PeerId],
    want: usize,
    tick: TickKind,
    rng: &mut R,
) -> Vec<PeerId> {
    let mut out: Vec<PeerId> = Vec::with_capacity(want);
    match tick {
        TickKind::Regular => {
            out.extend(current.iter().filter(|p| eligible.contains(p)).take(want));
        }
        TickKind::Optimistic => {}
    }
    let fresh: Vec<PeerId> = eligible
        .iter()
        .filter(|p| !out.contains(p) && !current.contains(p))
        .copied()
        .collect();
    out.extend(draw(fresh, want - out.len(), rng));
    if out.len() < want {
        // Not enough new blood; previous occupants may stay.
        let rest: Vec<PeerId> = eligible
            .iter()
            .filter(|p| !out.contains(p))
            .copied()
            .collect();
        out.extend(draw(rest, want - out.len(), rng));
    }
    out
}

fn seeder_by_rate<R: Rng>(
    params: &PolicyParams,
    candidates: &[Candidate],
    current: &SlotAssignment,
    tick: TickKind,
    rng: &mut R,
) -> SlotAssignment {
    let regular = ranked(
        candidates,
        &BTreeSet::new(),
        params.x.saturating_sub(1),
        |c| c.sent_to_bps,
        rng,
    );
    let taken: BTreeSet<PeerId> = regular.iter().copied().collect();
    let eligible: Vec<PeerId> = candidates
        .iter()
        .map(|c| c.peer)
        .filter(|p| !taken.contains(p))
        .collect();
    let altruistic = rotate_fill(&eligible, &current.altruistic, 1, tick, rng);
    SlotAssignment {
        regular,
        altruistic,
    }
}

/// Fastest-uploader slots plus one rotating optimistic slot; seeders rank by
/// what they send rather than what they receive.
pub fn original_unchoke<R: Rng>(
    params: &PolicyParams,
    role: Role,
    candidates: &[Candidate],
    current: &SlotAssignment,
    tick: TickKind,
    rng: &mut R,
) -> SlotAssignment {
    if role == Role::Seeder {
        return seeder_by_rate(params, candidates, current, tick, rng);
    }
    let regular = ranked(
        candidates,
        &BTreeSet::new(),
        params.x1,
        |c| c.received_from_bps,
        rng,
    );
    let taken: BTreeSet<PeerId> = regular.iter().copied().collect();
    let eligible: Vec<PeerId> = candidates
        .iter()
        .map(|c| c.peer)
        .filter(|p| !taken.contains(p))
        .collect();
    let altruistic = rotate_fill(&eligible, &current.altruistic, params.x2, tick, rng);
    SlotAssignment {
        regular,
        altruistic,
    }
}

/// Even split between fastest uploaders and random picks; the seeder side
/// ranks purely by unchoke recency (never-unchoked ranks last) and has no
/// optimistic slot.
pub fn sbnp_unchoke<R: Rng>(
    params: &PolicyParams,
    role: Role,
    candidates: &[Candidate],
    current: &SlotAssignment,
    tick: TickKind,
    rng: &mut R,
) -> SlotAssignment {
    if role == Role::Seeder {
        let regular = ranked(
            candidates,
            &BTreeSet::new(),
            params.x,
            |c| c.last_unchoked_at.unwrap_or(f64::NEG_INFINITY),
            rng,
        );
        return SlotAssignment {
            regular,
            altruistic: Vec::new(),
        };
    }
    let regular = ranked(
        candidates,
        &BTreeSet::new(),
        params.x1,
        |c| c.received_from_bps,
        rng,
    );
    let taken: BTreeSet<PeerId> = regular.iter().copied().collect();
    let eligible: Vec<PeerId> = candidates
        .iter()
        .map(|c| c.peer)
        .filter(|p| !taken.contains(p))
        .collect();
    let altruistic = rotate_fill(&eligible, &current.altruistic, params.x2, tick, rng);
    SlotAssignment {
        regular,
        altruistic,
    }
}

/// Quota slots go to interested remotes downloading slower than this peer,
/// nearest playback position first (ties to the smaller id), capped at
/// `max_quota`. They are re-drawn only on optimistic ticks; regular ticks
/// keep the quota set and re-rank the remaining slots by delivery rate.
/// Seeders behave exactly like `original` seeders.
pub fn qbps_unchoke<R: Rng>(
    params: &PolicyParams,
    role: Role,
    candidates: &[Candidate],
    current: &SlotAssignment,
    tick: TickKind,
    local_download_bps: f64,
    rng: &mut R,
) -> SlotAssignment {
    if role == Role::Seeder {
        return seeder_by_rate(params, candidates, current, tick, rng);
    }
    let quota: Vec<PeerId> = match tick {
        TickKind::Optimistic => {
            let mut eligible: Vec<&Candidate> = candidates
                .iter()
                .filter(|c| c.received_from_bps < local_download_bps)
                .collect();
            eligible.sort_by(|a, b| {
                a.playback_distance
                    .cmp(&b.playback_distance)
                    .then(a.peer.cmp(&b.peer))
            });
            eligible
                .iter()
                .take(params.max_quota)
                .map(|c| c.peer)
                .collect()
        }
        TickKind::Regular => {
            let present: BTreeSet<PeerId> = candidates.iter().map(|c| c.peer).collect();
            current
                .altruistic
                .iter()
                .filter(|p| present.contains(p))
                .copied()
                .collect()
        }
    };
    let taken: BTreeSet<PeerId> = quota.iter().copied().collect();
    let x1 = params.x - quota.len();
    let regular = ranked(candidates, &taken, x1, |c| c.received_from_bps, rng);
    SlotAssignment {
        regular,
        altruistic: quota,
    }
}

/// Policy dispatch used by the tick handler.
#[allow(clippy::too_many_arguments)]
pub fn select_slots<R: Rng>(
    params: &PolicyParams,
    role: Role,
    candidates: &[Candidate],
    current: &SlotAssignment,
    tick: TickKind,
    local_download_bps: f64,
    rng: &mut R,
) -> SlotAssignment {
    let next = match params.kind {
        PolicyKind::Original => original_unchoke(params, role, candidates, current, tick, rng),
        PolicyKind::Sbnp => sbnp_unchoke(params, role, candidates, current, tick, rng),
        PolicyKind::Qbps => qbps_unchoke(
            params,
            role,
            candidates,
            current,
            tick,
            local_download_bps,
            rng,
        ),
    };
    debug_assert!(next.len() <= params.x, "slot cap exceeded");
    next
}

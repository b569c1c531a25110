//! Swarm assembly: the event loop gluing peers, connections, transfers, and
//! sessions together.
//!
//! Message passing is instantaneous and synchronous: a Have, Interested, or
//! Unchoke takes effect inside the event that produced it, in sorted peer-id
//! order, so runs are reproducible for a given seed. Each directed peer pair
//! carries at most one block transfer at a time; a request is issued the
//! moment a slot opens (unchoke, block completion, Have) rather than on a
//! polling cycle.
//!
//! Departed leechers are immediately replaced by a fresh peer of the same
//! capacity class, keeping the population and the class mix constant. The
//! initial seeders have no session and never leave.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{self, Event, EventHandler, EventId, EventKind, EventQueue};
use crate::flow::{FlowNetwork, Transfer, TransferId};
use crate::model::{CapacityClass, InteractiveProfile, PolicyKind, PolicyParams, Scenario, SessionStateKind};
use crate::peer_policy::{
    diff, select_slots, Candidate, RateEstimator, Role, SlotAssignment, TickKind,
};
use crate::piece_policy::{
    next_request, remote_is_useful, AdwisWindow, Bitfield, BlockRef, PieceSet, RarityMap,
    WindowEvent,
};
use crate::playback::{jump_target, next_action, sample_dwell, Phase, Session};

/// Why a peer left the swarm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepartReason {
    /// The session drew a Stop action.
    Stopped,
    /// Playback reached the end of the media.
    PlayedOut,
}

/// Ledger of one peer whose session ended during the run. Only these peers
/// enter the metric means; peers still present when the run is cut off are
/// not reported.
#[derive(Clone, Debug, PartialEq)]
pub struct ServedPeer {
    pub peer: PeerId,
    pub class: CapacityClass,
    pub join_time: f64,
    pub depart_time: f64,
    /// When the full download finished, if it did before departure.
    pub completion_time: Option<f64>,
    pub bytes_downloaded: u64,
    pub startup_delay_s: f64,
    pub stall_count: u32,
    /// Sum of all stall waits; the per-stall mean is `total / count`.
    pub stall_total_s: f64,
    /// Integral of (idle upload slots / x) over the peer's residence.
    pub idle_slot_s: f64,
    pub reason: DepartReason,
}

/// Counters for invariants checked while the simulation runs. All zeros on
/// a healthy run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Violations {
    /// A policy handed out more than x upload slots.
    pub slot_cap: u64,
    /// A quota slot went to an ineligible remote or out of playback order.
    pub quota: u64,
    /// A link carried more than its capacity (from the flow network).
    pub bandwidth_cap: u64,
    /// A block completed with unaccounted bytes (from the flow network).
    pub conservation: u64,
    /// Population drifted from m + n between events.
    pub population: u64,
    /// Startup/stall bookkeeping broke (missing SD, dangling stall).
    pub session_accounting: u64,
}

impl Violations {
    pub fn total(&self) -> u64 {
        self.slot_cap
            + self.quota
            + self.bandwidth_cap
            + self.conservation
            + self.population
            + self.session_accounting
    }
}

/// Everything a run leaves behind for the metrics stage.
#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub duration_s: f64,
    pub served: Vec<ServedPeer>,
    pub violations: Violations,
    /// Human-readable event log; filled only when requested.
    pub log: Vec<String>,
}

use crate::model::PeerId;

/// One end of an established connection, as seen by the local peer.
#[derive(Clone, Debug)]
struct ConnState {
    /// Pieces the remote has announced (handshake bitfield plus Haves).
    remote_holds: PieceSet,
    i_am_interested: bool,
    remote_interested: bool,
    i_unchoke_remote: bool,
    remote_unchokes_me: bool,
    /// Last time we granted this remote an unchoke edge.
    last_unchoked_at: Option<f64>,
    /// Remote's announced playback piece; 0 until first announcement.
    remote_playback: usize,
    /// The block transfer currently flowing remote -> us, if any.
    inbound: Option<TransferId>,
}

struct PeerState {
    class: CapacityClass,
    join_time: f64,
    origin_seeder: bool,
    bitfield: Bitfield,
    window: AdwisWindow,
    rarity: RarityMap,
    estimator: RateEstimator,
    session: Session,
    conns: BTreeMap<PeerId, ConnState>,
    slots: SlotAssignment,
    tick_index: u64,
    tick_event: Option<EventId>,
    /// The single pending session event: a dwell expiry, a piece boundary,
    /// or the departure itself.
    session_event: Option<EventId>,
    /// When the current playing segment began (for elapsed-time accounting).
    segment_start: f64,
    /// Set when the dwell in progress is a jump seek, whose resume must
    /// re-satisfy the startup buffer rule.
    resume_needs_buffer: bool,
    depart_reason: Option<DepartReason>,
    completed_at: Option<f64>,
    announced_piece: usize,
    bytes_in: u64,
    startup_wait: Option<f64>,
    stall_count: u32,
    stall_total_s: f64,
    stall_started_at: Option<f64>,
    /// Set while post-jump rebuffering is in progress (log bookkeeping only).
    buffering_since: Option<f64>,
    idle_acc_s: f64,
    idle_settled_at: f64,
}

/// Connection invitations a newcomer sends out.
const TRACKER_INVITES: usize = 40;
/// Hard cap on connections per peer.
const CONN_CAP: usize = 80;

/// The simulation state for one run. Drives all event kinds and accumulates
/// the run trace.
pub struct Simulation {
    params: PolicyParams,
    profile: InteractiveProfile,
    media_rate_bps: f64,
    block_bytes: u64,
    piece_count: usize,
    blocks_per_piece: usize,
    ppd: f64,
    rng: ChaCha8Rng,
    flow: FlowNetwork,
    peers: BTreeMap<PeerId, PeerState>,
    next_id: u32,
    target_population: usize,
    pending_arrivals: usize,
    trace: RunTrace,
    log_on: bool,
}

impl Simulation {
    fn new(scenario: &Scenario, log_on: bool) -> Simulation {
        Simulation {
            params: scenario.params,
            profile: scenario.profile,
            media_rate_bps: scenario.media.media_rate_bps,
            block_bytes: scenario.media.block_size_bytes,
            piece_count: scenario.geometry.piece_count,
            blocks_per_piece: scenario.geometry.blocks_per_piece,
            ppd: scenario.geometry.piece_play_duration_s,
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            flow: FlowNetwork::new(),
            peers: BTreeMap::new(),
            next_id: 0,
            target_population: 0,
            pending_arrivals: 0,
            trace: RunTrace {
                duration_s: scenario.duration_s,
                served: Vec::new(),
                violations: Violations::default(),
                log: Vec::new(),
            },
            log_on,
        }
    }

    fn log<F: FnOnce() -> String>(&mut self, now: f64, line: F) {
        if self.log_on {
            self.trace.log.push(format!("t={now:<12.6} {}", line()));
        }
    }

    /// Accumulates the idle-slot integral of `pid` up to `now`. Must run
    /// before anything changes the peer's busy upload-slot count.
    fn settle_idle(&mut self, pid: PeerId, now: f64) {
        let busy = self.flow.busy_out(pid).min(self.params.x);
        if let Some(p) = self.peers.get_mut(&pid) {
            let dt = now - p.idle_settled_at;
            if dt > 0.0 {
                p.idle_acc_s += dt * (self.params.x - busy) as f64 / self.params.x as f64;
            }
            p.idle_settled_at = now;
        }
    }

    /// Brings a new peer into the swarm: flow endpoint, tracker contact,
    /// bidirectional handshakes, and the first (optimistic) slot tick.
    fn spawn_peer(
        &mut self,
        pid: PeerId,
        class: CapacityClass,
        origin_seeder: bool,
        now: f64,
        queue: &mut EventQueue,
    ) {
        let r = self.media_rate_bps;
        self.flow.add_peer(pid, class.up_bps(r), class.down_bps(r));

        // Tracker contact: a uniform sample of the existing population.
        let mut pool: Vec<PeerId> = self.peers.keys().copied().collect();
        let want = pool.len().min(TRACKER_INVITES);
        for i in 0..want {
            let j = self.rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut chosen = pool[..want].to_vec();
        chosen.sort();

        let bitfield = if origin_seeder {
            Bitfield::full(self.piece_count, self.blocks_per_piece)
        } else {
            Bitfield::new(self.piece_count, self.blocks_per_piece)
        };
        let own_pieces = bitfield.pieces().clone();
        let mut state = PeerState {
            class,
            join_time: now,
            origin_seeder,
            bitfield,
            window: AdwisWindow::new(self.params.window_init, self.params.theta),
            rarity: RarityMap::new(self.piece_count),
            estimator: RateEstimator::new(),
            session: Session::new(),
            conns: BTreeMap::new(),
            slots: SlotAssignment::default(),
            tick_index: 0,
            tick_event: None,
            session_event: None,
            segment_start: now,
            resume_needs_buffer: false,
            depart_reason: None,
            completed_at: if origin_seeder { Some(now) } else { None },
            announced_piece: 0,
            bytes_in: 0,
            startup_wait: None,
            stall_count: 0,
            stall_total_s: 0.0,
            stall_started_at: None,
            buffering_since: None,
            idle_acc_s: 0.0,
            idle_settled_at: now,
        };

        for q in chosen {
            let qs = self.peers.get_mut(&q).expect("tracker listed a live peer");
            if qs.conns.len() >= CONN_CAP {
                continue;
            }
            // Handshake: both sides exchange bitfields and initial interest.
            let q_pieces = qs.bitfield.pieces().clone();
            let my_interest = remote_is_useful(&state.bitfield, &q_pieces);
            let their_interest = remote_is_useful(&qs.bitfield, &own_pieces);
            qs.conns.insert(
                pid,
                ConnState {
                    remote_holds: own_pieces.clone(),
                    i_am_interested: their_interest,
                    remote_interested: my_interest,
                    i_unchoke_remote: false,
                    remote_unchokes_me: false,
                    last_unchoked_at: None,
                    remote_playback: 0,
                    inbound: None,
                },
            );
            qs.rarity.on_connect(&own_pieces);
            state.rarity.on_connect(&q_pieces);
            state.conns.insert(
                q,
                ConnState {
                    remote_holds: q_pieces,
                    i_am_interested: my_interest,
                    remote_interested: their_interest,
                    i_unchoke_remote: false,
                    remote_unchokes_me: false,
                    last_unchoked_at: None,
                    remote_playback: 0,
                    inbound: None,
                },
            );
        }

        self.peers.insert(pid, state);
        let ev = queue.schedule(now, EventKind::OptimisticTick { peer: pid });
        self.peers.get_mut(&pid).unwrap().tick_event = Some(ev);
        self.log(now, || format!("{pid} joined ({})", class.label()));
    }

    /// Issues a request from `receiver` toward `sender` if the edge is open,
    /// idle, and something useful is available.
    fn refill_pair(&mut self, receiver: PeerId, sender: PeerId, now: f64, queue: &mut EventQueue) {
        let pick = {
            let Some(peer) = self.peers.get_mut(&receiver) else {
                return;
            };
            let Some(c) = peer.conns.get(&sender) else {
                return;
            };
            if !c.remote_unchokes_me || !c.i_am_interested || c.inbound.is_some() {
                return;
            }
            let pick = next_request(
                &peer.bitfield,
                &peer.window,
                &c.remote_holds,
                &peer.rarity,
                &mut self.rng,
            );
            if let Some(b) = pick {
                peer.bitfield.mark_inflight(b);
            }
            pick
        };
        let Some(b) = pick else { return };
        self.settle_idle(sender, now);
        let tid = self.flow.start(
            sender,
            receiver,
            b.piece,
            b.block,
            self.block_bytes as f64,
            now,
        );
        self.peers
            .get_mut(&receiver)
            .unwrap()
            .conns
            .get_mut(&sender)
            .unwrap()
            .inbound = Some(tid);
        let _ = queue;
    }

    /// Tries to issue a request on every open idle edge of `receiver`.
    fn refill(&mut self, receiver: PeerId, now: f64, queue: &mut EventQueue) {
        let targets: Vec<PeerId> = match self.peers.get(&receiver) {
            Some(p) if !p.bitfield.is_complete() => p
                .conns
                .iter()
                .filter(|(_, c)| c.remote_unchokes_me && c.i_am_interested && c.inbound.is_none())
                .map(|(q, _)| *q)
                .collect(),
            _ => return,
        };
        for q in targets {
            self.refill_pair(receiver, q, now, queue);
        }
    }

    /// Re-derives this peer's interest in every remote and pushes the diffs
    /// to the remotes' books.
    fn reeval_own_interest(&mut self, pid: PeerId, now: f64) {
        let changes: Vec<(PeerId, bool)> = {
            let Some(peer) = self.peers.get_mut(&pid) else {
                return;
            };
            let bitfield = &peer.bitfield;
            let mut out = Vec::new();
            for (&q, c) in peer.conns.iter_mut() {
                let is = remote_is_useful(bitfield, &c.remote_holds);
                if is != c.i_am_interested {
                    debug_assert!(
                        is || c.inbound.is_none(),
                        "interest lost with a block in flight"
                    );
                    c.i_am_interested = is;
                    out.push((q, is));
                }
            }
            out
        };
        for (q, is) in changes {
            if let Some(qs) = self.peers.get_mut(&q) {
                if let Some(c) = qs.conns.get_mut(&pid) {
                    c.remote_interested = is;
                }
            }
            self.log(now, || {
                let what = if is { "interested in" } else { "done with" };
                format!("{pid} {what} {q}")
            });
        }
    }

    /// Broadcasts the current playback piece to every connection.
    fn announce_playback(&mut self, pid: PeerId, _now: f64) {
        let (cur, neighbors): (usize, Vec<PeerId>) = {
            let Some(peer) = self.peers.get_mut(&pid) else {
                return;
            };
            let cur = peer.session.piece;
            if cur == peer.announced_piece {
                return;
            }
            peer.announced_piece = cur;
            (cur, peer.conns.keys().copied().collect())
        };
        for q in neighbors {
            if let Some(qs) = self.peers.get_mut(&q) {
                if let Some(c) = qs.conns.get_mut(&pid) {
                    c.remote_playback = cur;
                }
            }
        }
    }

    /// Schedules the single pending event of a playing session: the dwell
    /// expiry or the piece boundary, whichever comes first (dwell wins ties).
    fn start_segment(&mut self, pid: PeerId, now: f64, queue: &mut EventQueue) {
        let ppd = self.ppd;
        let peer = self.peers.get_mut(&pid).unwrap();
        debug_assert_eq!(peer.session.phase, Phase::Playing);
        debug_assert!(peer.session_event.is_none(), "double session event");
        peer.segment_start = now;
        let ev = if peer.session.action_first(ppd) {
            queue.schedule(
                now + peer.session.play_dwell_s,
                EventKind::InteractiveAction { peer: pid },
            )
        } else {
            queue.schedule(
                now + peer.session.time_to_boundary(ppd),
                EventKind::PlaybackBoundary { peer: pid },
            )
        };
        peer.session_event = Some(ev);
    }

    /// Enters Play with a freshly sampled dwell and schedules the segment.
    fn begin_play(&mut self, pid: PeerId, now: f64, queue: &mut EventQueue) {
        let dwell = sample_dwell(&self.profile, SessionStateKind::Play, &mut self.rng);
        let peer = self.peers.get_mut(&pid).unwrap();
        peer.session.phase = Phase::Playing;
        peer.session.play_dwell_s = dwell;
        self.start_segment(pid, now, queue);
    }

    /// Reacts to a locally completed piece: startup buffering may finish, a
    /// mid-play stall may resolve, or post-jump rebuffering may progress.
    /// Interruption waits always end with the single missing piece the
    /// session is parked on; startup and post-jump rebuffering additionally
    /// hold playback until the full contiguity requirement, but only startup
    /// is observable (as the startup delay).
    fn playback_piece_hook(&mut self, pid: PeerId, piece: usize, now: f64, queue: &mut EventQueue) {
        enum Outcome {
            Nothing,
            Startup(f64),
            Rebuffered(f64),
            Resume(f64),
        }
        let theta = self.params.theta;
        // A buffering session may have an unresolved wait mark from landing
        // on a missing piece; the wait ends the moment that piece arrives,
        // even though playback still needs the rest of the buffer.
        let (target_wait, outcome) = {
            let peer = self.peers.get_mut(&pid).unwrap();
            if peer.origin_seeder {
                (None, Outcome::Nothing)
            } else {
                let target_wait = match peer.session.phase {
                    Phase::Buffering
                        if peer.stall_started_at.is_some()
                            && peer.bitfield.piece_held(peer.session.piece) =>
                    {
                        let start = peer
                            .stall_started_at
                            .take()
                            .expect("buffering wait without a start time");
                        let waited = now - start;
                        peer.stall_total_s += waited;
                        Some(waited)
                    }
                    _ => None,
                };
                let outcome = match peer.session.phase {
                    Phase::Buffering if peer.session.buffer_ready(&peer.bitfield, theta) => {
                        if peer.startup_wait.is_none() {
                            let wait = now - peer.join_time;
                            peer.startup_wait = Some(wait);
                            peer.session.startup_complete = true;
                            Outcome::Startup(wait)
                        } else {
                            let start = peer
                                .buffering_since
                                .take()
                                .expect("rebuffering without a start mark");
                            Outcome::Rebuffered(now - start)
                        }
                    }
                    Phase::Stalled if peer.session.piece == piece => {
                        let start = peer
                            .stall_started_at
                            .take()
                            .expect("stalled without a start time");
                        let waited = now - start;
                        peer.stall_total_s += waited;
                        Outcome::Resume(waited)
                    }
                    _ => Outcome::Nothing,
                };
                (target_wait, outcome)
            }
        };
        if let Some(waited) = target_wait {
            self.log(now, || format!("{pid} jump target arrived after {waited:.3}s"));
        }
        match outcome {
            Outcome::Nothing => {}
            Outcome::Startup(wait) => {
                self.log(now, || format!("{pid} starts playback after {wait:.3}s"));
                self.begin_play(pid, now, queue);
            }
            Outcome::Rebuffered(waited) => {
                self.log(now, || format!("{pid} rebuffered after {waited:.3}s"));
                self.begin_play(pid, now, queue);
            }
            Outcome::Resume(waited) => {
                self.log(now, || format!("{pid} stall resolved after {waited:.3}s"));
                let peer = self.peers.get_mut(&pid).unwrap();
                peer.session.phase = Phase::Playing;
                self.start_segment(pid, now, queue);
            }
        }
    }

    /// Everything that happens when the final block of a piece lands.
    fn on_piece_completed(&mut self, pid: PeerId, piece: usize, now: f64, queue: &mut EventQueue) {
        self.log(now, || format!("{pid} completed piece {piece}"));
        let neighbors: Vec<PeerId> = {
            let peer = self.peers.get_mut(&pid).unwrap();
            peer.window.update(&peer.bitfield, WindowEvent::PieceCompleted);
            peer.conns.keys().copied().collect()
        };
        // Have broadcast, in sorted order: each neighbor updates its view,
        // rarity, and interest, then may immediately request the new piece.
        for q in neighbors {
            let flip = {
                let Some(qs) = self.peers.get_mut(&q) else {
                    continue;
                };
                let c = qs.conns.get_mut(&pid).expect("have sent over a dead link");
                c.remote_holds.insert(piece);
                qs.rarity.on_have(piece);
                let was = c.i_am_interested;
                let is = remote_is_useful(&qs.bitfield, &c.remote_holds);
                c.i_am_interested = is;
                (was != is).then_some(is)
            };
            if let Some(is) = flip {
                let ps = self.peers.get_mut(&pid).unwrap();
                if let Some(c) = ps.conns.get_mut(&q) {
                    c.remote_interested = is;
                }
            }
            self.refill_pair(q, pid, now, queue);
        }
        // The new piece may have made some remotes useless to us.
        self.reeval_own_interest(pid, now);
        let became_seeder = {
            let peer = self.peers.get_mut(&pid).unwrap();
            if peer.bitfield.is_complete() && peer.completed_at.is_none() {
                peer.completed_at = Some(now);
                true
            } else {
                false
            }
        };
        if became_seeder {
            self.log(now, || format!("{pid} finished downloading, seeding on"));
        }
        self.playback_piece_hook(pid, piece, now, queue);
    }

    fn handle_block(&mut self, id: TransferId, now: f64, queue: &mut EventQueue) {
        let (sender, receiver) = {
            let t = self.flow.get(id).expect("completion event for a dead transfer");
            (t.sender, t.receiver)
        };
        self.settle_idle(sender, now);
        let t: Transfer = self.flow.complete(id, now, queue);
        let b = BlockRef {
            piece: t.piece,
            block: t.block,
        };
        let bytes = self.block_bytes;
        let piece_done = {
            let peer = self.peers.get_mut(&receiver).unwrap();
            if let Some(c) = peer.conns.get_mut(&sender) {
                debug_assert_eq!(c.inbound, Some(id));
                c.inbound = None;
            }
            peer.bitfield.clear_inflight(b);
            debug_assert!(!peer.bitfield.has_block(b), "duplicate block delivery");
            peer.bytes_in += bytes;
            peer.estimator.record_received(sender, bytes, now);
            peer.bitfield.mark_held(b)
        };
        if let Some(s) = self.peers.get_mut(&sender) {
            s.estimator.record_sent(receiver, bytes, now);
        }
        if piece_done {
            self.on_piece_completed(receiver, b.piece, now, queue);
        }
        self.refill(receiver, now, queue);
    }

    /// Revokes `target`'s grant from `pid`, killing any transfer on the edge.
    fn apply_choke(&mut self, pid: PeerId, target: PeerId, now: f64, queue: &mut EventQueue) {
        if let Some(peer) = self.peers.get_mut(&pid) {
            if let Some(c) = peer.conns.get_mut(&target) {
                c.i_unchoke_remote = false;
            }
        }
        let aborted = {
            let Some(ts) = self.peers.get_mut(&target) else {
                return;
            };
            let Some(c) = ts.conns.get_mut(&pid) else {
                return;
            };
            c.remote_unchokes_me = false;
            c.inbound.take()
        };
        self.log(now, || format!("{pid} chokes {target}"));
        if let Some(tid) = aborted {
            self.settle_idle(pid, now);
            let t = self.flow.abort(tid, queue);
            if let Some(ts) = self.peers.get_mut(&target) {
                ts.bitfield.clear_inflight(BlockRef {
                    piece: t.piece,
                    block: t.block,
                });
            }
            // The partial block is gone; the receiver may fetch it elsewhere.
            self.refill(target, now, queue);
        }
    }

    fn apply_unchoke(&mut self, pid: PeerId, target: PeerId, now: f64, queue: &mut EventQueue) {
        if let Some(peer) = self.peers.get_mut(&pid) {
            if let Some(c) = peer.conns.get_mut(&target) {
                c.i_unchoke_remote = true;
                c.last_unchoked_at = Some(now);
            }
        }
        if let Some(ts) = self.peers.get_mut(&target) {
            if let Some(c) = ts.conns.get_mut(&pid) {
                c.remote_unchokes_me = true;
            }
        }
        self.log(now, || format!("{pid} unchokes {target}"));
        self.refill_pair(target, pid, now, queue);
    }

    /// Independent re-check of a freshly drawn quota set: every member must
    /// be slower than us and the set must be ordered by playback proximity.
    fn check_quota(&mut self, candidates: &[Candidate], local_dl: f64, new: &SlotAssignment) {
        let quota: Vec<PeerId> = new.altruistic.clone();
        let mut last_key: Option<(u64, PeerId)> = None;
        for q in quota {
            let Some(c) = candidates.iter().find(|c| c.peer == q) else {
                self.trace.violations.quota += 1;
                continue;
            };
            if !(c.received_from_bps < local_dl) {
                self.trace.violations.quota += 1;
            }
            let key = (c.playback_distance, c.peer);
            if let Some(lk) = last_key {
                if key < lk {
                    self.trace.violations.quota += 1;
                }
            }
            last_key = Some(key);
        }
    }

    fn handle_tick(&mut self, pid: PeerId, kind: TickKind, now: f64, queue: &mut EventQueue) {
        let (candidates, local_dl, role, current) = {
            let peer = self.peers.get_mut(&pid).unwrap();
            let local_piece = peer.session.piece as i64;
            let mut cands = Vec::new();
            for (&q, c) in peer.conns.iter() {
                if !c.remote_interested {
                    continue;
                }
                cands.push(Candidate {
                    peer: q,
                    received_from_bps: peer.estimator.received_from_bps(q, now),
                    sent_to_bps: peer.estimator.sent_to_bps(q, now),
                    playback_distance: (c.remote_playback as i64 - local_piece).unsigned_abs(),
                    last_unchoked_at: c.last_unchoked_at,
                });
            }
            let local_dl = peer.estimator.download_bps(now);
            let role = if peer.bitfield.is_complete() {
                Role::Seeder
            } else {
                Role::Leecher
            };
            (cands, local_dl, role, peer.slots.clone())
        };
        let new = select_slots(
            &self.params,
            role,
            &candidates,
            &current,
            kind,
            local_dl,
            &mut self.rng,
        );
        if new.len() > self.params.x {
            self.trace.violations.slot_cap += 1;
        }
        if self.params.kind == PolicyKind::Qbps
            && kind == TickKind::Optimistic
            && role == Role::Leecher
        {
            self.check_quota(&candidates, local_dl, &new);
        }
        let d = diff(&current, &new);
        for q in &d.choke {
            self.apply_choke(pid, *q, now, queue);
        }
        self.peers.get_mut(&pid).unwrap().slots = new;
        for q in &d.unchoke {
            self.apply_unchoke(pid, *q, now, queue);
        }
        let peer = self.peers.get_mut(&pid).unwrap();
        peer.tick_index += 1;
        let next = if peer.tick_index % self.params.k as u64 == 0 {
            EventKind::OptimisticTick { peer: pid }
        } else {
            EventKind::ReevalTick { peer: pid }
        };
        peer.tick_event = Some(queue.schedule(now + self.params.delta_s, next));
    }

    fn handle_boundary(&mut self, pid: PeerId, now: f64, queue: &mut EventQueue) {
        let ppd = self.ppd;
        let piece_count = self.piece_count;
        enum Next {
            EndOfMedia,
            Stalled,
            KeepPlaying,
        }
        let next = {
            let peer = self.peers.get_mut(&pid).unwrap();
            peer.session_event = None;
            let elapsed = now - peer.segment_start;
            peer.session.advance(elapsed, ppd);
            peer.session.piece += 1;
            peer.session.offset_s = 0.0;
            if peer.session.piece == piece_count {
                Next::EndOfMedia
            } else {
                let piece = peer.session.piece;
                peer.window
                    .update(&peer.bitfield, WindowEvent::PlaybackAdvanced { piece });
                if peer.bitfield.piece_held(piece) {
                    Next::KeepPlaying
                } else {
                    peer.session.phase = Phase::Stalled;
                    peer.stall_count += 1;
                    peer.stall_started_at = Some(now);
                    peer.window.update(&peer.bitfield, WindowEvent::Stall);
                    Next::Stalled
                }
            }
        };
        match next {
            Next::EndOfMedia => {
                self.log(now, || format!("{pid} played the media to the end"));
                let ev = queue.schedule(now, EventKind::Departure { peer: pid });
                let peer = self.peers.get_mut(&pid).unwrap();
                peer.session_event = Some(ev);
                peer.depart_reason = Some(DepartReason::PlayedOut);
            }
            Next::Stalled => {
                let piece = self.peers.get(&pid).unwrap().session.piece;
                self.log(now, || format!("{pid} stalled at piece {piece}"));
                self.announce_playback(pid, now);
            }
            Next::KeepPlaying => {
                self.start_segment(pid, now, queue);
                self.announce_playback(pid, now);
            }
        }
    }

    fn handle_action(&mut self, pid: PeerId, now: f64, queue: &mut EventQueue) {
        let ppd = self.ppd;
        let piece_count = self.piece_count;
        let phase = {
            let peer = self.peers.get_mut(&pid).unwrap();
            peer.session_event = None;
            peer.session.phase
        };
        match phase {
            Phase::Playing => {
                {
                    let peer = self.peers.get_mut(&pid).unwrap();
                    let elapsed = now - peer.segment_start;
                    peer.session.advance(elapsed, ppd);
                }
                let act = next_action(&self.profile, &mut self.rng);
                match act.kind {
                    SessionStateKind::Play => {
                        let peer = self.peers.get_mut(&pid).unwrap();
                        peer.session.play_dwell_s = act.dwell_s;
                        self.start_segment(pid, now, queue);
                    }
                    SessionStateKind::Stop => {
                        self.log(now, || format!("{pid} stopped watching"));
                        let ev = queue.schedule(now, EventKind::Departure { peer: pid });
                        let peer = self.peers.get_mut(&pid).unwrap();
                        peer.session_event = Some(ev);
                        peer.depart_reason = Some(DepartReason::Stopped);
                    }
                    SessionStateKind::Pause => {
                        self.log(now, || format!("{pid} pauses for {:.3}s", act.dwell_s));
                        let ev = queue.schedule(
                            now + act.dwell_s,
                            EventKind::InteractiveAction { peer: pid },
                        );
                        let peer = self.peers.get_mut(&pid).unwrap();
                        peer.session.phase = Phase::Dwelling;
                        peer.session_event = Some(ev);
                    }
                    SessionStateKind::JumpBack | SessionStateKind::JumpForward => {
                        let (target, from) = {
                            let peer = self.peers.get_mut(&pid).unwrap();
                            let from = peer.session.piece;
                            let target = jump_target(act.kind, from, piece_count, &mut self.rng);
                            if let Some(t) = target {
                                peer.session.seek(t);
                                peer.window
                                    .update(&peer.bitfield, WindowEvent::Jump { piece: t });
                            }
                            peer.session.phase = Phase::Dwelling;
                            peer.resume_needs_buffer = target.is_some();
                            (target, from)
                        };
                        let ev = queue.schedule(
                            now + act.dwell_s,
                            EventKind::InteractiveAction { peer: pid },
                        );
                        self.peers.get_mut(&pid).unwrap().session_event = Some(ev);
                        match target {
                            Some(t) => {
                                self.log(now, || format!("{pid} jumps {from} -> {t}"));
                                self.announce_playback(pid, now);
                            }
                            None => {
                                self.log(now, || format!("{pid} jump from {from} has nowhere to go"));
                            }
                        }
                    }
                }
            }
            Phase::Dwelling => {
                // A jump landing on a held piece plays straight from cache.
                // Landing on a missing one counts as an interruption whose
                // wait ends when that piece arrives; playback then still
                // refills the contiguity buffer before the session resumes.
                let ready = {
                    let peer = self.peers.get_mut(&pid).unwrap();
                    let needs = peer.resume_needs_buffer;
                    peer.resume_needs_buffer = false;
                    !needs || peer.bitfield.piece_held(peer.session.piece)
                };
                if ready {
                    self.begin_play(pid, now, queue);
                } else {
                    let piece = {
                        let peer = self.peers.get_mut(&pid).unwrap();
                        peer.session.phase = Phase::Buffering;
                        peer.stall_count += 1;
                        peer.stall_started_at = Some(now);
                        peer.buffering_since = Some(now);
                        peer.session.piece
                    };
                    self.log(now, || format!("{pid} stalls buffering piece {piece}"));
                }
            }
            other => panic!("interactive action fired in phase {other:?}"),
        }
    }

    fn handle_departure(&mut self, pid: PeerId, now: f64, queue: &mut EventQueue) {
        self.settle_idle(pid, now);
        // Finalize the ledger.
        let (record, tick_ev, neighbors) = {
            let peer = self.peers.get_mut(&pid).unwrap();
            debug_assert!(!peer.origin_seeder, "an origin seeder tried to leave");
            if peer.stall_started_at.is_some() || peer.startup_wait.is_none() {
                self.trace.violations.session_accounting += 1;
            }
            let record = ServedPeer {
                peer: pid,
                class: peer.class,
                join_time: peer.join_time,
                depart_time: now,
                completion_time: peer.completed_at,
                bytes_downloaded: peer.bytes_in,
                startup_delay_s: peer.startup_wait.unwrap_or(0.0),
                stall_count: peer.stall_count,
                stall_total_s: peer.stall_total_s,
                idle_slot_s: peer.idle_acc_s,
                reason: peer.depart_reason.expect("departure without a reason"),
            };
            (
                record,
                peer.tick_event.take(),
                peer.conns.keys().copied().collect::<Vec<_>>(),
            )
        };
        if let Some(ev) = tick_ev {
            queue.cancel(ev);
        }
        // Tear down transfers. Senders' idle integrals settle first.
        let incoming_senders: Vec<PeerId> = self
            .peers
            .get(&pid)
            .unwrap()
            .conns
            .iter()
            .filter_map(|(q, c)| c.inbound.map(|_| *q))
            .collect();
        for q in incoming_senders {
            self.settle_idle(q, now);
        }
        let aborted = self.flow.abort_all_for(pid, queue);
        let mut orphaned: BTreeSet<PeerId> = BTreeSet::new();
        for t in &aborted {
            if t.receiver != pid {
                if let Some(qs) = self.peers.get_mut(&t.receiver) {
                    qs.bitfield.clear_inflight(BlockRef {
                        piece: t.piece,
                        block: t.block,
                    });
                    if let Some(c) = qs.conns.get_mut(&pid) {
                        c.inbound = None;
                    }
                }
                orphaned.insert(t.receiver);
            }
        }
        // Drop the connections.
        for q in &neighbors {
            if let Some(qs) = self.peers.get_mut(q) {
                if let Some(c) = qs.conns.remove(&pid) {
                    qs.rarity.on_disconnect(&c.remote_holds);
                }
                qs.slots.retain(|r| r != pid);
                qs.estimator.forget(pid);
            }
        }
        let class = record.class;
        self.peers.remove(&pid);
        self.flow.remove_peer(pid);
        self.log(now, || {
            format!(
                "{pid} departed ({}, {:?}, {} bytes)",
                record.class.label(),
                record.reason,
                record.bytes_downloaded
            )
        });
        self.trace.served.push(record);
        // Steady state: the slot is refilled by a same-class newcomer.
        queue.schedule(now, EventKind::Arrival { class });
        self.pending_arrivals += 1;
        // Receivers that lost an in-flight block may re-request elsewhere.
        for q in orphaned {
            self.refill(q, now, queue);
        }
    }

    fn handle_arrival(&mut self, class: CapacityClass, now: f64, queue: &mut EventQueue) {
        self.pending_arrivals -= 1;
        let pid = PeerId(self.next_id);
        self.next_id += 1;
        self.spawn_peer(pid, class, false, now, queue);
    }
}

impl EventHandler for Simulation {
    fn handle(&mut self, event: Event, queue: &mut EventQueue) {
        let now = event.time;
        match event.kind {
            EventKind::BlockComplete { transfer } => self.handle_block(transfer, now, queue),
            EventKind::ReevalTick { peer } => self.handle_tick(peer, TickKind::Regular, now, queue),
            EventKind::OptimisticTick { peer } => {
                self.handle_tick(peer, TickKind::Optimistic, now, queue)
            }
            EventKind::InteractiveAction { peer } => self.handle_action(peer, now, queue),
            EventKind::PlaybackBoundary { peer } => self.handle_boundary(peer, now, queue),
            EventKind::Arrival { class } => self.handle_arrival(class, now, queue),
            EventKind::Departure { peer } => self.handle_departure(peer, now, queue),
        }
        if self.flow.is_dirty() {
            self.flow.reallocate(now, queue);
        }
        if self.peers.len() + self.pending_arrivals != self.target_population {
            self.trace.violations.population += 1;
        }
    }
}

/// Runs one complete simulation and returns its trace. `collect_log` turns
/// on the human-readable event log (off for batch runs; it is large).
pub fn run_scenario(scenario: &Scenario, collect_log: bool) -> RunTrace {
    let mut sim = Simulation::new(scenario, collect_log);
    let mut queue = EventQueue::new();
    // Seeders join an empty swarm first, then the leechers, high capacity
    // class first. With everyone joining at once the graph starts complete
    // (at stock swarm sizes).
    for _ in 0..scenario.seeders {
        let pid = PeerId(sim.next_id);
        sim.next_id += 1;
        sim.spawn_peer(pid, CapacityClass::Seeder, true, 0.0, &mut queue);
    }
    let mut classes = Vec::with_capacity(scenario.leechers);
    classes.extend(std::iter::repeat(CapacityClass::High).take(scenario.class_mix.high));
    classes.extend(std::iter::repeat(CapacityClass::Low).take(scenario.class_mix.low));
    classes.extend(std::iter::repeat(CapacityClass::Regular).take(scenario.class_mix.regular));
    for class in classes {
        let pid = PeerId(sim.next_id);
        sim.next_id += 1;
        sim.spawn_peer(pid, class, false, 0.0, &mut queue);
    }
    sim.target_population = scenario.seeders + scenario.leechers;
    engine::run(&mut queue, &mut sim, scenario.duration_s);
    sim.trace.violations.bandwidth_cap = sim.flow.stats.cap_violations;
    sim.trace.violations.conservation = sim.flow.stats.conservation_violations;
    sim.trace
}

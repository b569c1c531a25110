//! Interactive playback sessions.
//!
//! A session is a five-state user model. `Play` is the resident state; when
//! a play dwell runs out the next state is drawn from the profile's
//! transition probabilities. `Stop` ends the session, `Pause` holds the
//! playhead for one dwell, and the two jump states move it before returning
//! to `Play`. Dwells are exponential with per-state means; a zero mean makes
//! the state instantaneous.
//!
//! Time accounting: play dwells consume only actual playback time, so they
//! freeze with the playhead during stalls and rebuffering. Pause and jump
//! dwells are wall-clock waits. Playback may only (re)start once enough
//! contiguous pieces sit ahead of the playhead: `theta` of them for startup
//! and jumps (clipped at the end of the media), just the missing piece for a
//! mid-stream stall.

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::model::{InteractiveProfile, SessionStateKind};
use crate::piece_policy::Bitfield;

/// Outcome of one transition draw out of `Play`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InteractiveAction {
    pub kind: SessionStateKind,
    pub dwell_s: f64,
}

/// Samples one dwell for `kind`.
pub fn sample_dwell<R: Rng>(
    profile: &InteractiveProfile,
    kind: SessionStateKind,
    rng: &mut R,
) -> f64 {
    let mean = profile.dwell_mean_s[kind.index()];
    if mean == 0.0 {
        return 0.0;
    }
    Exp::new(1.0 / mean).expect("positive rate").sample(rng)
}

/// Draws the state entered when a play period ends, along with that state's
/// dwell.
pub fn next_action<R: Rng>(profile: &InteractiveProfile, rng: &mut R) -> InteractiveAction {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut kind = SessionStateKind::JumpForward;
    for i in 0..SessionStateKind::COUNT {
        acc += profile.action_probs[i];
        if u < acc {
            kind = SessionStateKind::from_index(i);
            break;
        }
    }
    InteractiveAction {
        kind,
        dwell_s: sample_dwell(profile, kind, rng),
    }
}

/// Draws a jump target: forward jumps land uniformly past the current piece,
/// backward jumps uniformly before it. `None` means the range is empty and
/// the jump degenerates to play-in-place.
pub fn jump_target<R: Rng>(
    kind: SessionStateKind,
    current_piece: usize,
    piece_count: usize,
    rng: &mut R,
) -> Option<usize> {
    match kind {
        SessionStateKind::JumpForward => {
            if current_piece + 1 >= piece_count {
                None
            } else {
                Some(rng.gen_range(current_piece + 1..piece_count))
            }
        }
        SessionStateKind::JumpBack => {
            if current_piece == 0 {
                None
            } else {
                Some(rng.gen_range(0..current_piece))
            }
        }
        other => panic!("jump target drawn for non-jump state {other:?}"),
    }
}

/// What the session is doing right now.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Phase {
    /// Waiting for the startup/jump buffer to fill; the playhead does not
    /// move. A jump landing on a missing piece counts an interruption on
    /// entry, resolved once that piece arrives; the remaining buffer wait
    /// is unobserved.
    Buffering,
    /// Consuming media.
    Playing,
    /// Wall-clock dwell of a pause or a jump seek.
    Dwelling,
    /// Mid-stream hit on a missing piece; resumes when that piece lands.
    Stalled,
}

/// Playhead plus dwell bookkeeping for one peer's session.
#[derive(Clone, Debug)]
pub struct Session {
    pub piece: usize,
    /// Seconds into the current piece; meaningful while playing or paused.
    pub offset_s: f64,
    pub phase: Phase,
    /// Seconds of play time left until the next action draw. Persists across
    /// stalls (the user keeps watching the same stretch), refreshed on every
    /// entry into `Play`.
    pub play_dwell_s: f64,
    pub startup_complete: bool,
}

impl Session {
    /// Fresh session: playback pending at piece zero behind the startup
    /// buffer requirement.
    pub fn new() -> Session {
        Session {
            piece: 0,
            offset_s: 0.0,
            phase: Phase::Buffering,
            play_dwell_s: 0.0,
            startup_complete: false,
        }
    }

    /// Contiguous pieces required ahead of the playhead before playback may
    /// start here: `theta`, clipped so a position near the end of the media
    /// is not asked for pieces past the last one.
    pub fn required_buffer(&self, piece_count: usize, theta: usize) -> usize {
        theta.min(piece_count - self.piece).max(1)
    }

    /// True when the buffer requirement at the current position is met.
    pub fn buffer_ready(&self, local: &Bitfield, theta: usize) -> bool {
        local.contiguous_held_from(self.piece) >= self.required_buffer(local.piece_count(), theta)
    }

    /// Consumes `dt` seconds of playback. The caller splits time so no piece
    /// boundary or dwell expiry is crossed inside one call.
    pub fn advance(&mut self, dt: f64, piece_play_duration_s: f64) {
        debug_assert_eq!(self.phase, Phase::Playing);
        debug_assert!(dt >= 0.0);
        self.offset_s += dt;
        self.play_dwell_s -= dt;
        debug_assert!(self.offset_s <= piece_play_duration_s * (1.0 + 1e-9));
        debug_assert!(self.play_dwell_s >= -1e-9);
        self.play_dwell_s = self.play_dwell_s.max(0.0);
    }

    /// Seconds of playback left in the current piece.
    pub fn time_to_boundary(&self, piece_play_duration_s: f64) -> f64 {
        (piece_play_duration_s - self.offset_s).max(0.0)
    }

    /// Whether the pending play dwell expires before the piece boundary.
    /// Ties go to the action: acting exactly on the boundary supersedes the
    /// boundary crossing.
    pub fn action_first(&self, piece_play_duration_s: f64) -> bool {
        self.play_dwell_s <= self.time_to_boundary(piece_play_duration_s)
    }

    /// Moves the playhead to a jump target and resets the intra-piece offset.
    pub fn seek(&mut self, piece: usize) {
        self.piece = piece;
        self.offset_s = 0.0;
    }
}

impl Default for Session {
    fn default() -> Self {
        Session::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Interactivity;
    use crate::piece_policy::BlockRef;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn action_frequencies_match_the_profile() {
        // 1e5 draws per profile; each frequency within 3 sigma of its
        // binomial expectation.
        let n = 100_000usize;
        for level in Interactivity::ALL {
            let profile = level.profile();
            let mut rng = StdRng::seed_from_u64(0xACE0 + level.label().len() as u64);
            let mut counts = [0usize; SessionStateKind::COUNT];
            for _ in 0..n {
                counts[next_action(&profile, &mut rng).kind.index()] += 1;
            }
            for i in 0..SessionStateKind::COUNT {
                let p = profile.action_probs[i];
                let sigma = (p * (1.0 - p) / n as f64).sqrt();
                let freq = counts[i] as f64 / n as f64;
                assert!(
                    (freq - p).abs() <= 3.0 * sigma,
                    "{level}: state {i} frequency {freq} vs prob {p} (3 sigma = {})",
                    3.0 * sigma
                );
            }
        }
    }

    #[test]
    fn dwells_are_exponential_with_the_configured_mean() {
        let profile = Interactivity::High.profile();
        let mut rng = StdRng::seed_from_u64(42);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += sample_dwell(&profile, SessionStateKind::Play, &mut rng);
        }
        let mean = sum / n as f64;
        // Std error of the mean for Exp(mean d) is d / sqrt(n).
        let tol = 3.0 * 1.20 / (n as f64).sqrt();
        assert!((mean - 1.20).abs() < tol, "mean {mean} not within {tol} of 1.20");
    }

    #[test]
    fn stop_dwell_is_instantaneous() {
        let profile = Interactivity::High.profile();
        let mut rng = StdRng::seed_from_u64(1);
        assert_eq!(sample_dwell(&profile, SessionStateKind::Stop, &mut rng), 0.0);
    }

    #[test]
    fn forward_jumps_stay_strictly_ahead_and_in_range() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..10_000 {
            let t = jump_target(SessionStateKind::JumpForward, 10, 80, &mut rng).unwrap();
            assert!(t > 10 && t < 80);
        }
        // One piece before the end: the only legal target is the last piece.
        for _ in 0..100 {
            let t = jump_target(SessionStateKind::JumpForward, 78, 80, &mut rng).unwrap();
            assert_eq!(t, 79);
        }
    }

    #[test]
    fn backward_jumps_stay_strictly_behind() {
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..10_000 {
            let t = jump_target(SessionStateKind::JumpBack, 10, 80, &mut rng).unwrap();
            assert!(t < 10);
        }
    }

    #[test]
    fn empty_jump_ranges_degenerate() {
        let mut rng = StdRng::seed_from_u64(7);
        assert_eq!(
            jump_target(SessionStateKind::JumpBack, 0, 80, &mut rng),
            None
        );
        assert_eq!(
            jump_target(SessionStateKind::JumpForward, 79, 80, &mut rng),
            None
        );
    }

    #[test]
    fn jump_targets_are_uniform_over_the_range() {
        // Chi-squared over the 69 legal forward targets from piece 10 of 80.
        let mut rng = StdRng::seed_from_u64(8);
        let n = 100_000usize;
        let lo = 11usize;
        let hi = 79usize;
        let k = hi - lo + 1;
        let mut counts = vec![0usize; k];
        for _ in 0..n {
            let t = jump_target(SessionStateKind::JumpForward, 10, 80, &mut rng).unwrap();
            counts[t - lo] += 1;
        }
        let expected = n as f64 / k as f64;
        let chi2: f64 = counts
            .iter()
            .map(|c| (*c as f64 - expected).powi(2) / expected)
            .sum();
        // 0.9999 quantile of chi-squared with 68 degrees of freedom.
        assert!(chi2 < 120.124, "chi2 {chi2} rejects uniformity");
    }

    #[test]
    fn buffer_requirement_clips_at_the_end_of_media() {
        let mut s = Session::new();
        assert_eq!(s.required_buffer(80, 3), 3);
        s.piece = 78;
        assert_eq!(s.required_buffer(80, 3), 2);
        s.piece = 79;
        assert_eq!(s.required_buffer(80, 3), 1);
    }

    #[test]
    fn buffer_readiness_needs_contiguous_pieces() {
        let mut local = Bitfield::new(80, 1);
        let s = Session::new();
        for p in [0usize, 1, 3] {
            local.mark_held(BlockRef { piece: p, block: 0 });
        }
        assert!(!s.buffer_ready(&local, 3), "gap at piece 2");
        local.mark_held(BlockRef { piece: 2, block: 0 });
        assert!(s.buffer_ready(&local, 3));
    }

    #[test]
    fn advance_consumes_offset_and_dwell_together() {
        let ppd = 8.738133333333334;
        let mut s = Session::new();
        s.phase = Phase::Playing;
        s.play_dwell_s = 5.0;
        s.advance(2.0, ppd);
        assert_relative_eq!(s.offset_s, 2.0);
        assert_relative_eq!(s.play_dwell_s, 3.0);
        assert!(s.action_first(ppd), "3.0 dwell < 6.74 to boundary");
        s.play_dwell_s = 20.0;
        assert!(!s.action_first(ppd));
        assert_relative_eq!(s.time_to_boundary(ppd), ppd - 2.0);
    }

    #[test]
    fn seek_resets_the_intra_piece_offset() {
        let mut s = Session::new();
        s.phase = Phase::Playing;
        s.play_dwell_s = 9.0;
        s.advance(1.5, 8.7);
        s.seek(40);
        assert_eq!(s.piece, 40);
        assert_eq!(s.offset_s, 0.0);
    }
}

//! Piece bookkeeping and request selection.
//!
//! Download order is driven by an adaptive reproduction window anchored at
//! the playback position: pieces inside the window are fetched rarest-first
//! in index order, pieces outside it rarest-first with random tie-breaking,
//! and partially downloaded pieces always come first so blocks on the wire
//! turn into playable pieces quickly. The window widens while the buffer
//! ahead of the playhead is healthy and snaps back to its initial width on
//! jumps and stalls.

use rand::Rng;

/// One block of one piece.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct BlockRef {
    pub piece: usize,
    pub block: usize,
}

/// Piece-level set, used for the local view of a remote's holdings.
#[derive(Clone, Debug, PartialEq)]
pub struct PieceSet {
    words: Vec<u64>,
    piece_count: usize,
    held: usize,
}

impl PieceSet {
    pub fn empty(piece_count: usize) -> PieceSet {
        PieceSet {
            words: vec![0; piece_count.div_ceil(64)],
            piece_count,
            held: 0,
        }
    }

    pub fn full(piece_count: usize) -> PieceSet {
        let mut s = PieceSet::empty(piece_count);
        for p in 0..piece_count {
            s.insert(p);
        }
        s
    }

    pub fn insert(&mut self, piece: usize) -> bool {
        assert!(piece < self.piece_count);
        let (w, b) = (piece / 64, piece % 64);
        let fresh = self.words[w] & (1 << b) == 0;
        if fresh {
            self.words[w] |= 1 << b;
            self.held += 1;
        }
        fresh
    }

    pub fn contains(&self, piece: usize) -> bool {
        let (w, b) = (piece / 64, piece % 64);
        self.words[w] & (1 << b) != 0
    }

    pub fn len(&self) -> usize {
        self.held
    }

    pub fn is_empty(&self) -> bool {
        self.held == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.piece_count).filter(|p| self.contains(*p))
    }
}

/// Block-granular local state: held blocks plus in-flight reservations, with
/// piece-level rollups kept in sync.
#[derive(Clone, Debug)]
pub struct Bitfield {
    piece_count: usize,
    blocks_per_piece: usize,
    words_per_piece: usize,
    held: Vec<u64>,
    inflight: Vec<u64>,
    held_count: Vec<u16>,
    pieces: PieceSet,
    partial: std::collections::BTreeSet<usize>,
}

impl Bitfield {
    pub fn new(piece_count: usize, blocks_per_piece: usize) -> Bitfield {
        let words_per_piece = blocks_per_piece.div_ceil(64);
        Bitfield {
            piece_count,
            blocks_per_piece,
            words_per_piece,
            held: vec![0; piece_count * words_per_piece],
            inflight: vec![0; piece_count * words_per_piece],
            held_count: vec![0; piece_count],
            pieces: PieceSet::empty(piece_count),
            partial: std::collections::BTreeSet::new(),
        }
    }

    pub fn full(piece_count: usize, blocks_per_piece: usize) -> Bitfield {
        let mut b = Bitfield::new(piece_count, blocks_per_piece);
        for p in 0..piece_count {
            for blk in 0..blocks_per_piece {
                b.mark_held(BlockRef { piece: p, block: blk });
            }
        }
        b
    }

    pub fn piece_count(&self) -> usize {
        self.piece_count
    }

    pub fn blocks_per_piece(&self) -> usize {
        self.blocks_per_piece
    }

    fn word(&self, piece: usize, block: usize) -> (usize, u64) {
        debug_assert!(piece < self.piece_count && block < self.blocks_per_piece);
        (
            piece * self.words_per_piece + block / 64,
            1u64 << (block % 64),
        )
    }

    pub fn has_block(&self, r: BlockRef) -> bool {
        let (w, m) = self.word(r.piece, r.block);
        self.held[w] & m != 0
    }

    pub fn is_inflight(&self, r: BlockRef) -> bool {
        let (w, m) = self.word(r.piece, r.block);
        self.inflight[w] & m != 0
    }

    pub fn mark_inflight(&mut self, r: BlockRef) {
        debug_assert!(!self.has_block(r) && !self.is_inflight(r));
        let (w, m) = self.word(r.piece, r.block);
        self.inflight[w] |= m;
    }

    pub fn clear_inflight(&mut self, r: BlockRef) {
        let (w, m) = self.word(r.piece, r.block);
        self.inflight[w] &= !m;
    }

    /// Stores a received block (clearing any reservation) and reports whether
    /// it completed its piece.
    pub fn mark_held(&mut self, r: BlockRef) -> bool {
        self.clear_inflight(r);
        let (w, m) = self.word(r.piece, r.block);
        if self.held[w] & m != 0 {
            return false;
        }
        self.held[w] |= m;
        self.held_count[r.piece] += 1;
        let n = self.held_count[r.piece] as usize;
        if n == self.blocks_per_piece {
            self.partial.remove(&r.piece);
            self.pieces.insert(r.piece);
            true
        } else {
            if n == 1 {
                self.partial.insert(r.piece);
            }
            false
        }
    }

    pub fn piece_held(&self, piece: usize) -> bool {
        self.held_count[piece] as usize == self.blocks_per_piece
    }

    pub fn blocks_held(&self, piece: usize) -> usize {
        self.held_count[piece] as usize
    }

    pub fn pieces_held(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_complete(&self) -> bool {
        self.pieces.len() == self.piece_count
    }

    /// Piece-level view of this bitfield, e.g. for interest checks.
    pub fn pieces(&self) -> &PieceSet {
        &self.pieces
    }

    /// Pieces with some but not all blocks held, ascending.
    pub fn partial_pieces(&self) -> impl Iterator<Item = usize> + '_ {
        self.partial.iter().copied()
    }

    /// Lowest-index block of `piece` that is neither held nor reserved.
    pub fn first_wanted_block(&self, piece: usize) -> Option<BlockRef> {
        for block in 0..self.blocks_per_piece {
            let r = BlockRef { piece, block };
            if !self.has_block(r) && !self.is_inflight(r) {
                return Some(r);
            }
        }
        None
    }

    /// Length of the run of fully held pieces starting at `from`.
    pub fn contiguous_held_from(&self, from: usize) -> usize {
        let mut n = 0;
        while from + n < self.piece_count && self.piece_held(from + n) {
            n += 1;
        }
        n
    }
}

/// True when the remote holds at least one piece the local peer lacks.
pub fn remote_is_useful(local: &Bitfield, remote: &PieceSet) -> bool {
    remote
        .words()
        .iter()
        .zip(local.pieces.words())
        .any(|(r, l)| r & !l != 0)
}

/// Count of connected remotes holding each piece.
#[derive(Clone, Debug, Default)]
pub struct RarityMap {
    counts: Vec<u32>,
}

impl RarityMap {
    pub fn new(piece_count: usize) -> RarityMap {
        RarityMap {
            counts: vec![0; piece_count],
        }
    }

    pub fn rarity(&self, piece: usize) -> u32 {
        self.counts[piece]
    }

    pub fn on_have(&mut self, piece: usize) {
        self.counts[piece] += 1;
    }

    pub fn on_connect(&mut self, remote: &PieceSet) {
        for p in remote.iter() {
            self.counts[p] += 1;
        }
    }

    pub fn on_disconnect(&mut self, remote: &PieceSet) {
        for p in remote.iter() {
            debug_assert!(self.counts[p] > 0);
            self.counts[p] -= 1;
        }
    }
}

/// Events the reproduction window reacts to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WindowEvent {
    PieceCompleted,
    PlaybackAdvanced { piece: usize },
    Jump { piece: usize },
    Stall,
}

/// Adaptive reproduction window `{base .. base + width - 1}`, clipped to the
/// end of the media.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdwisWindow {
    base: usize,
    width: usize,
    init_width: usize,
    theta: usize,
}

impl AdwisWindow {
    pub fn new(init_width: usize, theta: usize) -> AdwisWindow {
        assert!(init_width >= 1 && theta >= 1);
        AdwisWindow {
            base: 0,
            width: init_width,
            init_width,
            theta,
        }
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn theta(&self) -> usize {
        self.theta
    }

    /// Last piece inside the window for a media of `piece_count` pieces.
    pub fn end(&self, piece_count: usize) -> usize {
        (self.base + self.width - 1).min(piece_count.saturating_sub(1))
    }

    pub fn contains(&self, piece: usize, piece_count: usize) -> bool {
        piece >= self.base && piece <= self.end(piece_count)
    }

    /// Window maintenance. Growth requires a healthy buffer: at least
    /// `theta` contiguous pieces held from the playback point. Jumps and
    /// stalls collapse the window back to its initial width.
    pub fn update(&mut self, local: &Bitfield, event: WindowEvent) {
        let piece_count = local.piece_count();
        match event {
            WindowEvent::PieceCompleted => {
                if local.contiguous_held_from(self.base) >= self.theta {
                    let remaining = piece_count - self.base.min(piece_count);
                    self.width = (self.width + 1).min(remaining.max(1));
                }
            }
            WindowEvent::PlaybackAdvanced { piece } => {
                debug_assert!(piece < piece_count);
                self.base = piece;
            }
            WindowEvent::Jump { piece } => {
                debug_assert!(piece < piece_count);
                self.base = piece;
                self.width = self.init_width;
            }
            WindowEvent::Stall => {
                self.width = self.init_width;
            }
        }
        debug_assert!(self.end(piece_count) < piece_count);
    }
}

/// Picks the next block to request from one remote, or `None` when the
/// remote has nothing useful. Priority order:
///
/// 1. blocks finishing a locally partial piece, lowest piece index first;
/// 2. untouched pieces inside the window, rarest first, then lowest index;
/// 3. untouched pieces outside the window, rarest first, ties broken
///    uniformly at random.
///
/// Held blocks and blocks already on the wire are never returned.
pub fn next_request<R: Rng>(
    local: &Bitfield,
    window: &AdwisWindow,
    remote: &PieceSet,
    rarity: &RarityMap,
    rng: &mut R,
) -> Option<BlockRef> {
    // Finish what is started.
    for piece in local.partial_pieces() {
        if remote.contains(piece) {
            if let Some(r) = local.first_wanted_block(piece) {
                return Some(r);
            }
        }
    }

    let piece_count = local.piece_count();
    let untouched_at_remote = |piece: usize| {
        remote.contains(piece)
            && local.blocks_held(piece) == 0
            && local.first_wanted_block(piece).is_some()
    };

    // Fresh pieces inside the window.
    let mut best: Option<(u32, usize)> = None;
    for piece in window.base()..=window.end(piece_count) {
        if untouched_at_remote(piece) {
            let key = (rarity.rarity(piece), piece);
            if best.map_or(true, |b| key < b) {
                best = Some(key);
            }
        }
    }
    if let Some((_, piece)) = best {
        return local.first_wanted_block(piece);
    }

    // Fresh pieces outside the window, random among the rarest.
    let mut min_rarity = u32::MAX;
    let mut ties: Vec<usize> = Vec::new();
    for piece in 0..piece_count {
        if window.contains(piece, piece_count) || !untouched_at_remote(piece) {
            continue;
        }
        let r = rarity.rarity(piece);
        if r < min_rarity {
            min_rarity = r;
            ties.clear();
        }
        if r == min_rarity {
            ties.push(piece);
        }
    }
    if ties.is_empty() {
        return None;
    }
    let piece = ties[rng.gen_range(0..ties.len())];
    local.first_wanted_block(piece)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn rng() -> StdRng {
        StdRng::seed_from_u64(7)
    }

    fn remote_with(pieces: &[usize], piece_count: usize) -> PieceSet {
        let mut s = PieceSet::empty(piece_count);
        for p in pieces {
            s.insert(*p);
        }
        s
    }

    #[test]
    fn bitfield_tracks_piece_completion_and_partials() {
        let mut b = Bitfield::new(4, 2);
        assert!(!b.mark_held(BlockRef { piece: 1, block: 0 }));
        assert_eq!(b.partial_pieces().collect::<Vec<_>>(), vec![1]);
        assert!(b.mark_held(BlockRef { piece: 1, block: 1 }));
        assert!(b.piece_held(1));
        assert_eq!(b.partial_pieces().count(), 0);
        assert_eq!(b.pieces_held(), 1);
        assert!(!b.is_complete());
        assert_eq!(b.contiguous_held_from(1), 1);
        assert_eq!(b.contiguous_held_from(0), 0);
    }

    #[test]
    fn duplicate_block_is_not_counted_twice() {
        let mut b = Bitfield::new(2, 2);
        let r = BlockRef { piece: 0, block: 0 };
        assert!(!b.mark_held(r));
        assert!(!b.mark_held(r));
        assert_eq!(b.blocks_held(0), 1);
    }

    #[test]
    fn usefulness_is_a_strict_superset_check() {
        let mut local = Bitfield::new(80, 2);
        for blk in 0..2 {
            local.mark_held(BlockRef { piece: 5, block: blk });
        }
        assert!(remote_is_useful(&local, &remote_with(&[5, 9], 80)));
        assert!(!remote_is_useful(&local, &remote_with(&[5], 80)));
        assert!(!remote_is_useful(&local, &remote_with(&[], 80)));
    }

    #[test]
    fn rarity_counts_follow_connects_and_haves() {
        let mut r = RarityMap::new(4);
        r.on_connect(&remote_with(&[0, 2], 4));
        r.on_connect(&remote_with(&[2], 4));
        assert_eq!(r.rarity(2), 2);
        r.on_have(3);
        assert_eq!(r.rarity(3), 1);
        r.on_disconnect(&remote_with(&[0, 2], 4));
        assert_eq!(r.rarity(0), 0);
        assert_eq!(r.rarity(2), 1);
    }

    #[test]
    fn window_grows_only_with_a_healthy_buffer() {
        let mut b = Bitfield::new(80, 1);
        let mut w = AdwisWindow::new(7, 3);
        b.mark_held(BlockRef { piece: 0, block: 0 });
        b.mark_held(BlockRef { piece: 1, block: 0 });
        w.update(&b, WindowEvent::PieceCompleted);
        assert_eq!(w.width(), 7, "two contiguous pieces are not enough");
        b.mark_held(BlockRef { piece: 2, block: 0 });
        w.update(&b, WindowEvent::PieceCompleted);
        assert_eq!(w.width(), 8);
    }

    #[test]
    fn jumps_and_stalls_reset_the_window() {
        let mut b = Bitfield::new(80, 1);
        for p in 0..10 {
            b.mark_held(BlockRef { piece: p, block: 0 });
        }
        let mut w = AdwisWindow::new(7, 3);
        for _ in 0..5 {
            w.update(&b, WindowEvent::PieceCompleted);
        }
        assert_eq!(w.width(), 12);
        w.update(&b, WindowEvent::Jump { piece: 40 });
        assert_eq!((w.base(), w.width()), (40, 7));
        for _ in 0..3 {
            w.update(&b, WindowEvent::PieceCompleted);
        }
        assert_eq!(w.width(), 7, "no contiguous buffer at the jump target");
        w.update(&b, WindowEvent::PlaybackAdvanced { piece: 41 });
        assert_eq!((w.base(), w.width()), (41, 7));
        w.update(&b, WindowEvent::Stall);
        assert_eq!(w.width(), 7);
    }

    #[test]
    fn window_never_extends_past_the_last_piece() {
        let mut b = Bitfield::new(10, 1);
        for p in 5..10 {
            b.mark_held(BlockRef { piece: p, block: 0 });
        }
        let mut w = AdwisWindow::new(7, 3);
        w.update(&b, WindowEvent::Jump { piece: 5 });
        assert_eq!(w.end(10), 9);
        for _ in 0..20 {
            w.update(&b, WindowEvent::PieceCompleted);
        }
        assert_eq!(w.end(10), 9);
        assert!(w.width() <= 5);
    }

    #[test]
    fn rarest_fresh_piece_in_window_wins() {
        let local = Bitfield::new(80, 16);
        let mut w = AdwisWindow::new(7, 3);
        w.update(&local, WindowEvent::Jump { piece: 10 });
        let remote = remote_with(&[11, 12], 80);
        let mut rarity = RarityMap::new(80);
        for _ in 0..3 {
            rarity.on_have(11);
        }
        rarity.on_have(12);
        let got = next_request(&local, &w, &remote, &rarity, &mut rng()).unwrap();
        assert_eq!(got, BlockRef { piece: 12, block: 0 });
    }

    #[test]
    fn partial_pieces_preempt_fresh_ones() {
        let mut local = Bitfield::new(80, 16);
        local.mark_held(BlockRef { piece: 7, block: 0 });
        let w = AdwisWindow::new(7, 3);
        let remote = remote_with(&[7, 8], 80);
        let rarity = RarityMap::new(80);
        let got = next_request(&local, &w, &remote, &rarity, &mut rng()).unwrap();
        assert_eq!(got, BlockRef { piece: 7, block: 1 });
    }

    #[test]
    fn inflight_blocks_are_skipped() {
        let mut local = Bitfield::new(4, 2);
        local.mark_held(BlockRef { piece: 0, block: 0 });
        local.mark_inflight(BlockRef { piece: 0, block: 1 });
        let w = AdwisWindow::new(2, 1);
        let remote = remote_with(&[0, 1], 4);
        let rarity = RarityMap::new(4);
        // Piece 0 is partial but fully covered; fall through to piece 1.
        let got = next_request(&local, &w, &remote, &rarity, &mut rng()).unwrap();
        assert_eq!(got, BlockRef { piece: 1, block: 0 });
    }

    #[test]
    fn nothing_useful_yields_none() {
        let mut local = Bitfield::new(4, 1);
        local.mark_held(BlockRef { piece: 2, block: 0 });
        let w = AdwisWindow::new(2, 1);
        let rarity = RarityMap::new(4);
        assert_eq!(
            next_request(&local, &w, &remote_with(&[], 4), &rarity, &mut rng()),
            None
        );
        assert_eq!(
            next_request(&local, &w, &remote_with(&[2], 4), &rarity, &mut rng()),
            None
        );
    }

    #[test]
    fn out_of_window_ties_cover_all_rarest_pieces() {
        let local = Bitfield::new(40, 1);
        let w = AdwisWindow::new(4, 3);
        let remote = remote_with(&[20, 25, 30], 40);
        let rarity = RarityMap::new(40);
        let mut seen = std::collections::BTreeSet::new();
        let mut r = rng();
        for _ in 0..200 {
            let got = next_request(&local, &w, &remote, &rarity, &mut r).unwrap();
            seen.insert(got.piece);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![20, 25, 30]);
    }

    proptest! {
        #[test]
        fn next_request_is_always_wanted_and_available(
            held in proptest::collection::vec(any::<bool>(), 64),
            inflight in proptest::collection::vec(any::<bool>(), 64),
            remote_mask in proptest::collection::vec(any::<bool>(), 8),
            base in 0usize..8,
            seed in any::<u64>(),
        ) {
            let mut local = Bitfield::new(8, 8);
            for p in 0..8 {
                for blk in 0..8 {
                    if held[p * 8 + blk] {
                        local.mark_held(BlockRef { piece: p, block: blk });
                    } else if inflight[p * 8 + blk] {
                        local.mark_inflight(BlockRef { piece: p, block: blk });
                    }
                }
            }
            let mut w = AdwisWindow::new(3, 2);
            w.update(&local, WindowEvent::Jump { piece: base });
            let remote = remote_with(
                &(0..8).filter(|p| remote_mask[*p]).collect::<Vec<_>>(),
                8,
            );
            let rarity = RarityMap::new(8);
            let mut r = StdRng::seed_from_u64(seed);
            match next_request(&local, &w, &remote, &rarity, &mut r) {
                Some(b) => {
                    prop_assert!(remote.contains(b.piece));
                    prop_assert!(!local.has_block(b));
                    prop_assert!(!local.is_inflight(b));
                }
                None => {
                    // Exhaustive: no wanted block exists at this remote.
                    for p in 0..8 {
                        if remote.contains(p) {
                            prop_assert!(local.first_wanted_block(p).is_none());
                        }
                    }
                }
            }
        }
    }
}

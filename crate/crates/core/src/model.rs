//! Scenario vocabulary: media geometry, capacity classes, interactivity
//! profiles, policy parameters, and scenario construction.
//!
//! Unit conventions: sizes are binary (MiB = 2^20, KiB = 2^10 bytes), rates
//! are decimal bits per second. The default 20 MiB file with 256 KiB pieces
//! and a 240 kbps media rate therefore splits into exactly 80 pieces of 16
//! blocks each.

use thiserror::Error;

/// Identifies a peer for the lifetime of a run. Ids are allocated
/// monotonically and never reused, so churn replacements are distinguishable
/// from the peers they replace.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct PeerId(pub u32);

impl std::fmt::Display for PeerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error("content size {content} bytes is not a whole number of {piece}-byte pieces")]
    RaggedPieces { content: u64, piece: u64 },
    #[error("piece size {piece} bytes is not a whole number of {block}-byte blocks")]
    RaggedBlocks { piece: u64, block: u64 },
    #[error("{0} must be positive")]
    ZeroDimension(&'static str),
    #[error("invalid interactivity profile: {0}")]
    BadProfile(String),
    #[error("invalid policy parameters: {0}")]
    BadParams(String),
    #[error("invalid scenario: {0}")]
    BadScenario(String),
}

/// The single shared media file all peers download and play back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MediaFile {
    pub content_size_bytes: u64,
    pub piece_size_bytes: u64,
    pub block_size_bytes: u64,
    /// Playback consumption rate in bits per second.
    pub media_rate_bps: f64,
}

impl Default for MediaFile {
    fn default() -> Self {
        MediaFile {
            content_size_bytes: 20 * 1024 * 1024,
            piece_size_bytes: 256 * 1024,
            block_size_bytes: 16 * 1024,
            media_rate_bps: 240_000.0,
        }
    }
}

/// Derived piece/block layout of a media file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MediaGeometry {
    pub piece_count: usize,
    pub blocks_per_piece: usize,
    /// Wall-clock seconds one piece lasts when played at the media rate.
    pub piece_play_duration_s: f64,
}

/// Splits a media file into pieces and blocks. Geometry that does not divide
/// evenly is rejected rather than padded.
pub fn media_geometry(media: &MediaFile) -> Result<MediaGeometry, ModelError> {
    if media.content_size_bytes == 0 {
        return Err(ModelError::ZeroDimension("content size"));
    }
    if media.piece_size_bytes == 0 {
        return Err(ModelError::ZeroDimension("piece size"));
    }
    if media.block_size_bytes == 0 {
        return Err(ModelError::ZeroDimension("block size"));
    }
    if !(media.media_rate_bps > 0.0) {
        return Err(ModelError::ZeroDimension("media rate"));
    }
    if media.content_size_bytes % media.piece_size_bytes != 0 {
        return Err(ModelError::RaggedPieces {
            content: media.content_size_bytes,
            piece: media.piece_size_bytes,
        });
    }
    if media.piece_size_bytes % media.block_size_bytes != 0 {
        return Err(ModelError::RaggedBlocks {
            piece: media.piece_size_bytes,
            block: media.block_size_bytes,
        });
    }
    Ok(MediaGeometry {
        piece_count: (media.content_size_bytes / media.piece_size_bytes) as usize,
        blocks_per_piece: (media.piece_size_bytes / media.block_size_bytes) as usize,
        piece_play_duration_s: media.piece_size_bytes as f64 * 8.0 / media.media_rate_bps,
    })
}

impl MediaFile {
    pub fn geometry(&self) -> Result<MediaGeometry, ModelError> {
        media_geometry(self)
    }

    /// Total playback length in seconds.
    pub fn duration_s(&self) -> f64 {
        self.content_size_bytes as f64 * 8.0 / self.media_rate_bps
    }
}

/// Bandwidth class of a peer. Class rates are multiples of the media rate R:
/// seeders and regular leechers run at R symmetric, high-capacity leechers at
/// 2R, low-capacity leechers at R/2.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum CapacityClass {
    Seeder,
    High,
    Low,
    Regular,
}

impl CapacityClass {
    pub fn up_bps(self, media_rate_bps: f64) -> f64 {
        match self {
            CapacityClass::Seeder | CapacityClass::Regular => media_rate_bps,
            CapacityClass::High => 2.0 * media_rate_bps,
            CapacityClass::Low => 0.5 * media_rate_bps,
        }
    }

    pub fn down_bps(self, media_rate_bps: f64) -> f64 {
        // Access links are symmetric in every class.
        self.up_bps(media_rate_bps)
    }

    pub fn label(self) -> &'static str {
        match self {
            CapacityClass::Seeder => "seeder",
            CapacityClass::High => "high",
            CapacityClass::Low => "low",
            CapacityClass::Regular => "regular",
        }
    }
}

/// Leecher bandwidth provisioning relative to the media rate.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Provision {
    /// Half the leechers high-capacity, half low: mean 1.25R for even counts.
    Over,
    /// A fifth high-capacity, the rest low: mean 0.8R.
    Low,
    /// Everyone at exactly the media rate.
    Balanced,
}

impl Provision {
    pub const ALL: [Provision; 3] = [Provision::Over, Provision::Low, Provision::Balanced];

    pub fn label(self) -> &'static str {
        match self {
            Provision::Over => "op",
            Provision::Low => "lp",
            Provision::Balanced => "bp",
        }
    }

    /// Leecher class mix (high, low, regular) for a swarm of `m` leechers.
    pub fn class_mix(self, m: usize) -> (usize, usize, usize) {
        match self {
            Provision::Over => {
                let high = m.div_ceil(2);
                (high, m - high, 0)
            }
            Provision::Low => {
                let high = (0.2 * m as f64).round() as usize;
                (high, m - high, 0)
            }
            Provision::Balanced => (0, 0, m),
        }
    }
}

impl std::fmt::Display for Provision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Interactive session state. `Play` is the only state transitions are drawn
/// from; the other four are entered for one dwell and fall back to `Play`
/// (or, for `Stop`, end the session).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum SessionStateKind {
    Play,
    Stop,
    Pause,
    JumpBack,
    JumpForward,
}

impl SessionStateKind {
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        match self {
            SessionStateKind::Play => 0,
            SessionStateKind::Stop => 1,
            SessionStateKind::Pause => 2,
            SessionStateKind::JumpBack => 3,
            SessionStateKind::JumpForward => 4,
        }
    }

    pub fn from_index(i: usize) -> SessionStateKind {
        match i {
            0 => SessionStateKind::Play,
            1 => SessionStateKind::Stop,
            2 => SessionStateKind::Pause,
            3 => SessionStateKind::JumpBack,
            4 => SessionStateKind::JumpForward,
            _ => panic!("session state index {i} out of range"),
        }
    }
}

/// User behavior model: exponential dwell means per state and the transition
/// probabilities out of `Play`. The probability of staying in `Play` plus the
/// four leave probabilities must sum to one; the last entry is derived.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InteractiveProfile {
    /// Mean dwell in seconds, indexed by `SessionStateKind::index()`.
    /// A zero mean makes the state instantaneous.
    pub dwell_mean_s: [f64; SessionStateKind::COUNT],
    /// Transition probabilities out of `Play`, same indexing.
    pub action_probs: [f64; SessionStateKind::COUNT],
}

impl InteractiveProfile {
    /// Builds a profile from the four explicit leave probabilities
    /// (stay-in-play, stop, pause, jump-back); the jump-forward probability
    /// absorbs the remainder.
    pub fn new(
        dwell_mean_s: [f64; 5],
        head_probs: [f64; 4],
    ) -> Result<InteractiveProfile, ModelError> {
        let sum: f64 = head_probs.iter().sum();
        if head_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(ModelError::BadProfile(format!(
                "transition probabilities must lie in [0, 1], got {head_probs:?}"
            )));
        }
        if sum > 1.0 + 1e-12 {
            return Err(ModelError::BadProfile(format!(
                "transition probabilities sum to {sum}, which exceeds 1"
            )));
        }
        if dwell_mean_s.iter().any(|d| *d < 0.0 || !d.is_finite()) {
            return Err(ModelError::BadProfile(format!(
                "dwell means must be finite and non-negative, got {dwell_mean_s:?}"
            )));
        }
        let mut action_probs = [0.0; 5];
        action_probs[..4].copy_from_slice(&head_probs);
        action_probs[4] = (1.0 - sum).max(0.0);
        Ok(InteractiveProfile {
            dwell_mean_s,
            action_probs,
        })
    }
}

/// Named interactivity level selecting one of the three stock profiles.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Interactivity {
    High,
    Medium,
    Low,
}

impl Interactivity {
    pub const ALL: [Interactivity; 3] = [
        Interactivity::High,
        Interactivity::Medium,
        Interactivity::Low,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Interactivity::High => "hi",
            Interactivity::Medium => "mi",
            Interactivity::Low => "li",
        }
    }

    /// Stock profile for this level. Higher interactivity means shorter play
    /// dwells and a larger share of stops, pauses, and jumps.
    pub fn profile(self) -> InteractiveProfile {
        let (d0, probs) = match self {
            Interactivity::High => (1.20, [0.35, 0.05, 0.20, 0.20]),
            Interactivity::Medium => (1.70, [0.60, 0.04, 0.12, 0.12]),
            Interactivity::Low => (2.20, [0.85, 0.02, 0.04, 0.04]),
        };
        InteractiveProfile::new([d0, 0.0, 1.00, 0.75, 0.75], probs)
            .expect("stock profiles are valid")
    }
}

impl std::fmt::Display for Interactivity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Peer selection policy.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum PolicyKind {
    /// Rate-ranked regular slots plus one rotating optimistic slot.
    Original,
    /// Two rate-ranked slots plus two rotating random slots; seeders favor
    /// the remotes they unchoked most recently.
    Sbnp,
    /// Rate-ranked slots plus up to `max_quota` slots reserved for slower
    /// remotes closest in playback position.
    Qbps,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Original, PolicyKind::Sbnp, PolicyKind::Qbps];

    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::Original => "original",
            PolicyKind::Sbnp => "sbnp",
            PolicyKind::Qbps => "qbps",
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Tunable parameters shared by the peer selection policies and the
/// reproduction window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyParams {
    pub kind: PolicyKind,
    /// Total upload slots per peer.
    pub x: usize,
    /// Rate-ranked slot count. For the quota policy this is the nominal
    /// split; the live split moves as quota candidates come and go.
    pub x1: usize,
    /// Randomly or altruistically filled slot count (nominal for quota).
    pub x2: usize,
    /// Upper bound on simultaneously held quota slots.
    pub max_quota: usize,
    /// Altruistic slots are re-drawn every `k` ticks.
    pub k: u32,
    /// Slot re-evaluation period in seconds.
    pub delta_s: f64,
    /// Initial reproduction window width in pieces.
    pub window_init: usize,
    /// Contiguous pieces required ahead of the playback point before
    /// playback may start or restart after a jump.
    pub theta: usize,
}

impl PolicyParams {
    pub fn original() -> PolicyParams {
        PolicyParams {
            kind: PolicyKind::Original,
            x: 4,
            x1: 3,
            x2: 1,
            max_quota: 0,
            k: 3,
            delta_s: 10.0,
            window_init: 7,
            theta: 3,
        }
    }

    pub fn sbnp() -> PolicyParams {
        PolicyParams {
            kind: PolicyKind::Sbnp,
            x1: 2,
            x2: 2,
            ..PolicyParams::original()
        }
    }

    pub fn qbps() -> PolicyParams {
        PolicyParams {
            kind: PolicyKind::Qbps,
            x1: 2,
            x2: 2,
            max_quota: 2,
            ..PolicyParams::original()
        }
    }

    pub fn for_kind(kind: PolicyKind) -> PolicyParams {
        match kind {
            PolicyKind::Original => PolicyParams::original(),
            PolicyKind::Sbnp => PolicyParams::sbnp(),
            PolicyKind::Qbps => PolicyParams::qbps(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.x == 0 {
            return Err(ModelError::BadParams("slot count x must be positive".into()));
        }
        if self.x1 + self.x2 != self.x {
            return Err(ModelError::BadParams(format!(
                "slot split {} + {} does not equal x = {}",
                self.x1, self.x2, self.x
            )));
        }
        if self.kind == PolicyKind::Qbps && self.max_quota > self.x {
            return Err(ModelError::BadParams(format!(
                "max_quota {} exceeds slot count {}",
                self.max_quota, self.x
            )));
        }
        if self.k == 0 {
            return Err(ModelError::BadParams("k must be at least 1".into()));
        }
        if !(self.delta_s > 0.0) {
            return Err(ModelError::BadParams("delta must be positive".into()));
        }
        if self.window_init == 0 {
            return Err(ModelError::BadParams("window width must be positive".into()));
        }
        if self.theta == 0 {
            return Err(ModelError::BadParams("theta must be at least 1".into()));
        }
        Ok(())
    }
}

/// Leecher count per capacity class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassMix {
    pub high: usize,
    pub low: usize,
    pub regular: usize,
}

impl ClassMix {
    pub fn total(&self) -> usize {
        self.high + self.low + self.regular
    }

    /// Mean leecher upload capacity in bps, zero for an empty swarm.
    pub fn mean_up_bps(&self, media_rate_bps: f64) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        let sum = self.high as f64 * CapacityClass::High.up_bps(media_rate_bps)
            + self.low as f64 * CapacityClass::Low.up_bps(media_rate_bps)
            + self.regular as f64 * CapacityClass::Regular.up_bps(media_rate_bps);
        sum / self.total() as f64
    }
}

/// Everything a single simulation run needs, with defaults for the standard
/// configuration; see `config` for the file format and override rules.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub media: MediaFile,
    pub seeders: usize,
    pub leechers: usize,
    pub provision: Provision,
    pub interactivity: Interactivity,
    pub policy: PolicyKind,
    pub max_quota: Option<usize>,
    pub x: Option<usize>,
    pub k: Option<u32>,
    pub delta_s: Option<f64>,
    pub window_init: Option<usize>,
    pub theta: Option<usize>,
    pub duration_s: f64,
    pub seed: u64,
    pub replications: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            media: MediaFile::default(),
            seeders: 1,
            leechers: 20,
            provision: Provision::Balanced,
            interactivity: Interactivity::Medium,
            policy: PolicyKind::Original,
            max_quota: None,
            x: None,
            k: None,
            delta_s: None,
            window_init: None,
            theta: None,
            duration_s: 7200.0,
            seed: 1,
            replications: 30,
        }
    }
}

/// A fully validated run description.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub media: MediaFile,
    pub geometry: MediaGeometry,
    pub seeders: usize,
    pub leechers: usize,
    pub provision: Provision,
    pub class_mix: ClassMix,
    pub interactivity: Interactivity,
    pub profile: InteractiveProfile,
    pub params: PolicyParams,
    pub duration_s: f64,
    pub seed: u64,
}

/// Validates a configuration and expands it into a runnable scenario:
/// geometry is derived, the provisioning rule is turned into concrete class
/// counts, and policy parameter overrides are folded in.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario, ModelError> {
    let geometry = media_geometry(&cfg.media)?;
    let mut params = PolicyParams::for_kind(cfg.policy);
    if let Some(x) = cfg.x {
        // Keep the nominal split anchored to the altruistic side.
        params.x = x;
        params.x1 = x.saturating_sub(params.x2);
    }
    if let Some(q) = cfg.max_quota {
        params.max_quota = q;
    }
    if let Some(k) = cfg.k {
        params.k = k;
    }
    if let Some(d) = cfg.delta_s {
        params.delta_s = d;
    }
    if let Some(w) = cfg.window_init {
        params.window_init = w;
    }
    if let Some(t) = cfg.theta {
        params.theta = t;
    }
    params.validate()?;
    if params.theta > geometry.piece_count {
        return Err(ModelError::BadScenario(format!(
            "theta {} exceeds the piece count {}",
            params.theta, geometry.piece_count
        )));
    }
    if !(cfg.duration_s > 0.0) {
        return Err(ModelError::BadScenario("duration must be positive".into()));
    }
    let (high, low, regular) = cfg.provision.class_mix(cfg.leechers);
    let class_mix = ClassMix { high, low, regular };
    debug_assert_eq!(class_mix.total(), cfg.leechers);
    Ok(Scenario {
        media: cfg.media,
        geometry,
        seeders: cfg.seeders,
        leechers: cfg.leechers,
        provision: cfg.provision,
        class_mix,
        interactivity: cfg.interactivity,
        profile: cfg.interactivity.profile(),
        params,
        duration_s: cfg.duration_s,
        seed: cfg.seed,
    })
}

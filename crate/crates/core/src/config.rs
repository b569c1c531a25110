//! Key/value configuration files.
//!
//! A config file is plain text: one `key = value` pair per line, `#` starts a
//! comment, blank lines are ignored. Keys are dotted and drawn from a closed
//! set; anything else is an error so typos cannot silently fall back to
//! defaults. Sizes take an optional binary suffix (`B`, `KiB`, `MiB`, `GiB`),
//! rates an optional decimal one (`bps`, `kbps`, `mbps`).
//!
//! ```text
//! media.content_size = 20MiB
//! media.rate = 240kbps
//! swarm.provision = lp
//! policy.kind = qbps
//! run.seed = 7
//! ```

use std::path::Path;

use thiserror::Error;

use crate::model::{Interactivity, PolicyKind, Provision, ScenarioConfig};

pub const CONFIG_KEYS: [&str; 18] = [
    "media.content_size",
    "media.piece_size",
    "media.block_size",
    "media.rate",
    "swarm.seeders",
    "swarm.leechers",
    "swarm.provision",
    "workload.profile",
    "policy.kind",
    "policy.max_quota",
    "policy.x",
    "policy.k",
    "policy.delta",
    "adwis.window",
    "adwis.theta",
    "run.duration",
    "run.seed",
    "run.replications",
];

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: bad value `{value}` for `{key}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A parsed config: the merged scenario plus which of the three grid axes the
/// file pinned to a single value. The command line uses the pin flags to
/// narrow its run matrix and to reject contradictory selections.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub base: ScenarioConfig,
    pub pinned_provision: bool,
    pub pinned_profile: bool,
    pub pinned_policy: bool,
}

impl Default for LoadedConfig {
    fn default() -> Self {
        LoadedConfig {
            base: ScenarioConfig::default(),
            pinned_provision: false,
            pinned_profile: false,
            pinned_policy: false,
        }
    }
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<LoadedConfig, ConfigError> {
    let mut out = LoadedConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if stripped.is_empty() {
            continue;
        }
        let (key, value) = match stripped.split_once('=') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => {
                return Err(ConfigError::Syntax {
                    line,
                    text: stripped.to_string(),
                })
            }
        };
        apply_key(&mut out, key, value, line)?;
    }
    Ok(out)
}

fn apply_key(out: &mut LoadedConfig, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
    let bad = |reason: String| ConfigError::BadValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
        reason,
    };
    let cfg = &mut out.base;
    match key {
        "media.content_size" => cfg.media.content_size_bytes = parse_size(value).map_err(bad)?,
        "media.piece_size" => cfg.media.piece_size_bytes = parse_size(value).map_err(bad)?,
        "media.block_size" => cfg.media.block_size_bytes = parse_size(value).map_err(bad)?,
        "media.rate" => cfg.media.media_rate_bps = parse_rate(value).map_err(bad)?,
        "swarm.seeders" => cfg.seeders = parse_int(value).map_err(bad)? as usize,
        "swarm.leechers" => cfg.leechers = parse_int(value).map_err(bad)? as usize,
        "swarm.provision" => {
            cfg.provision = parse_provision(value).map_err(bad)?;
            out.pinned_provision = true;
        }
        "workload.profile" => {
            cfg.interactivity = parse_profile(value).map_err(bad)?;
            out.pinned_profile = true;
        }
        "policy.kind" => {
            cfg.policy = parse_policy(value).map_err(bad)?;
            out.pinned_policy = true;
        }
        "policy.max_quota" => cfg.max_quota = Some(parse_int(value).map_err(bad)? as usize),
        "policy.x" => cfg.x = Some(parse_int(value).map_err(bad)? as usize),
        "policy.k" => cfg.k = Some(parse_int(value).map_err(bad)? as u32),
        "policy.delta" => cfg.delta_s = Some(parse_seconds(value).map_err(bad)?),
        "adwis.window" => cfg.window_init = Some(parse_int(value).map_err(bad)? as usize),
        "adwis.theta" => cfg.theta = Some(parse_int(value).map_err(bad)? as usize),
        "run.duration" => cfg.duration_s = parse_seconds(value).map_err(bad)?,
        "run.seed" => cfg.seed = parse_int(value).map_err(bad)?,
        "run.replications" => cfg.replications = parse_int(value).map_err(bad)? as usize,
        _ => {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            })
        }
    }
    Ok(())
}

pub fn parse_provision(value: &str) -> Result<Provision, String> {
    match value.to_ascii_lowercase().as_str() {
        "op" => Ok(Provision::Over),
        "lp" => Ok(Provision::Low),
        "bp" => Ok(Provision::Balanced),
        _ => Err("expected one of op, lp, bp".into()),
    }
}

pub fn parse_profile(value: &str) -> Result<Interactivity, String> {
    match value.to_ascii_lowercase().as_str() {
        "hi" => Ok(Interactivity::High),
        "mi" => Ok(Interactivity::Medium),
        "li" => Ok(Interactivity::Low),
        _ => Err("expected one of hi, mi, li".into()),
    }
}

pub fn parse_policy(value: &str) -> Result<PolicyKind, String> {
    match value.to_ascii_lowercase().as_str() {
        "original" => Ok(PolicyKind::Original),
        "sbnp" => Ok(PolicyKind::Sbnp),
        "qbps" => Ok(PolicyKind::Qbps),
        _ => Err("expected one of original, sbnp, qbps".into()),
    }
}

fn parse_int(value: &str) -> Result<u64, String> {
    value
        .parse::<u64>()
        .map_err(|e| format!("not a non-negative integer ({e})"))
}

fn parse_seconds(value: &str) -> Result<f64, String> {
    let trimmed = value.strip_suffix('s').unwrap_or(value).trim();
    let secs = trimmed
        .parse::<f64>()
        .map_err(|e| format!("not a duration in seconds ({e})"))?;
    if !secs.is_finite() || secs < 0.0 {
        return Err("duration must be finite and non-negative".into());
    }
    Ok(secs)
}

/// Sizes use binary multiples: `16KiB` is 16384 bytes.
fn parse_size(value: &str) -> Result<u64, String> {
    let (digits, multiplier) = if let Some(d) = value.strip_suffix("GiB") {
        (d, 1u64 << 30)
    } else if let Some(d) = value.strip_suffix("MiB") {
        (d, 1u64 << 20)
    } else if let Some(d) = value.strip_suffix("KiB") {
        (d, 1u64 << 10)
    } else if let Some(d) = value.strip_suffix('B') {
        (d, 1)
    } else {
        (value, 1)
    };
    let n = digits
        .trim()
        .parse::<u64>()
        .map_err(|e| format!("not a size in bytes ({e})"))?;
    n.checked_mul(multiplier)
        .ok_or_else(|| "size overflows".into())
}

/// Rates use decimal multiples: `240kbps` is 240000 bits per second.
fn parse_rate(value: &str) -> Result<f64, String> {
    let lower = value.to_ascii_lowercase();
    let (digits, multiplier) = if let Some(d) = lower.strip_suffix("mbps") {
        (d, 1e6)
    } else if let Some(d) = lower.strip_suffix("kbps") {
        (d, 1e3)
    } else if let Some(d) = lower.strip_suffix("bps") {
        (d, 1.0)
    } else {
        (lower.as_str(), 1.0)
    };
    let n = digits
        .trim()
        .parse::<f64>()
        .map_err(|e| format!("not a rate in bits per second ({e})"))?;
    if !n.is_finite() || n <= 0.0 {
        return Err("rate must be finite and positive".into());
    }
    Ok(n * multiplier)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_scenario;

    #[test]
    fn full_file_round_trips_through_the_scenario_builder() {
        let text = "\
# scenario under test
media.content_size = 20MiB
media.piece_size = 256KiB
media.block_size = 16KiB
media.rate = 240kbps

swarm.seeders = 1
swarm.leechers = 20
swarm.provision = lp
workload.profile = hi
policy.kind = qbps
policy.max_quota = 2
policy.x = 4
policy.k = 3
policy.delta = 10
adwis.window = 7
adwis.theta = 3
run.duration = 7200  # two hours
run.seed = 42
run.replications = 30
";
        let loaded = parse_config(text).unwrap();
        assert!(loaded.pinned_provision && loaded.pinned_profile && loaded.pinned_policy);
        assert_eq!(loaded.base.seed, 42);
        let s = build_scenario(&loaded.base).unwrap();
        assert_eq!(s.geometry.piece_count, 80);
        assert_eq!(s.class_mix.high, 4);
        assert_eq!(s.class_mix.low, 16);
        assert_eq!(s.params.kind, PolicyKind::Qbps);
        assert_eq!(s.params.max_quota, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config("media.contnet_size = 20MiB").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 1, .. }), "{err}");
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(matches!(
            parse_config("media.rate").unwrap_err(),
            ConfigError::Syntax { .. }
        ));
        assert!(matches!(
            parse_config("media.rate = fast").unwrap_err(),
            ConfigError::BadValue { .. }
        ));
        assert!(matches!(
            parse_config("swarm.provision = mid").unwrap_err(),
            ConfigError::BadValue { .. }
        ));
    }

    #[test]
    fn sizes_and_rates_accept_plain_and_suffixed_forms() {
        assert_eq!(parse_size("20971520").unwrap(), 20 * 1024 * 1024);
        assert_eq!(parse_size("20MiB").unwrap(), 20 * 1024 * 1024);
        assert_eq!(parse_size("16KiB").unwrap(), 16_384);
        assert_eq!(parse_size("512B").unwrap(), 512);
        assert_eq!(parse_rate("240kbps").unwrap(), 240_000.0);
        assert_eq!(parse_rate("240000").unwrap(), 240_000.0);
        assert_eq!(parse_rate("1mbps").unwrap(), 1_000_000.0);
        assert!(parse_rate("-3").is_err());
        assert!(parse_size("1.5MiB").is_err(), "sizes are whole bytes");
    }

    #[test]
    fn defaults_survive_an_empty_file() {
        let loaded = parse_config("\n# nothing here\n").unwrap();
        assert_eq!(loaded, LoadedConfig::default());
        assert!(!loaded.pinned_provision);
    }
}

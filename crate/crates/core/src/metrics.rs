//! The six run metrics and cross-replication statistics.
//!
//! A peer enters the metrics only if its session ended during the run; peers
//! cut off by the end of the simulation are ignored. All six metrics are
//! computed per run, then replications are combined into Student-t 95%
//! confidence intervals.
//!
//! Metric semantics:
//! - ERC: per peer, dedicated-channel download time at the peer's own
//!   downlink capacity divided by its actual downloading residence (join to
//!   download completion, or to departure if it never finished). 1.0 means
//!   the swarm served the peer as well as a private channel. Peers that
//!   never received a byte are excluded and counted separately.
//! - PS: number of peers whose sessions ended (each one triggered a
//!   same-class replacement).
//! - EST: time-integral of (idle upload slots / x), averaged over served
//!   peers. Seconds; fractional idleness counts.
//! - SD: mean startup delay.
//! - NI: mean number of playback interruptions per served peer.
//! - TR: mean interruption length, pooled over every stall of every served
//!   peer (not a per-peer mean of means).

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::swarm::{RunTrace, ServedPeer, Violations};

/// Point estimates for one run. Metrics with an empty basis (no served
/// peers, no stalls) are absent rather than zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunReport {
    pub erc: Option<f64>,
    pub ps: u32,
    pub est_s: Option<f64>,
    pub sd_s: Option<f64>,
    pub ni: Option<f64>,
    pub tr_s: Option<f64>,
    /// Served peers that never downloaded a byte (excluded from ERC).
    pub zero_byte_peers: u32,
    pub violations: Violations,
}

/// Stable metric order used by reports and CSV files.
pub const METRIC_NAMES: [&str; 6] = ["erc", "ps", "est", "sd", "ni", "tr"];

impl RunReport {
    /// The six metrics in [`METRIC_NAMES`] order.
    pub fn metrics(&self) -> [Option<f64>; 6] {
        [
            self.erc,
            Some(self.ps as f64),
            self.est_s,
            self.sd_s,
            self.ni,
            self.tr_s,
        ]
    }
}

fn erc_of(peer: &ServedPeer, down_bps: f64) -> f64 {
    let dedicated_s = peer.bytes_downloaded as f64 * 8.0 / down_bps;
    let active_s = peer.completion_time.unwrap_or(peer.depart_time) - peer.join_time;
    dedicated_s / active_s
}

/// Reduces a finished run to its six point estimates. `media_rate_bps`
/// anchors the per-class downlink capacities; peers departing before
/// `warmup_s` are dropped (0 disables the cutoff).
pub fn finalize_run(trace: &RunTrace, media_rate_bps: f64, warmup_s: f64) -> RunReport {
    let served: Vec<&ServedPeer> = trace
        .served
        .iter()
        .filter(|p| p.depart_time >= warmup_s)
        .collect();
    let n = served.len();
    if n == 0 {
        return RunReport {
            erc: None,
            ps: 0,
            est_s: None,
            sd_s: None,
            ni: None,
            tr_s: None,
            zero_byte_peers: 0,
            violations: trace.violations,
        };
    }
    let mut erc_sum = 0.0;
    let mut erc_n = 0usize;
    let mut zero_bytes = 0u32;
    let mut est_sum = 0.0;
    let mut sd_sum = 0.0;
    let mut stall_count = 0u64;
    let mut stall_time = 0.0;
    for p in &served {
        if p.bytes_downloaded == 0 {
            zero_bytes += 1;
        } else {
            erc_sum += erc_of(p, p.class.down_bps(media_rate_bps));
            erc_n += 1;
        }
        est_sum += p.idle_slot_s;
        sd_sum += p.startup_delay_s;
        stall_count += p.stall_count as u64;
        stall_time += p.stall_total_s;
    }
    RunReport {
        erc: (erc_n > 0).then(|| erc_sum / erc_n as f64),
        ps: n as u32,
        est_s: Some(est_sum / n as f64),
        sd_s: Some(sd_sum / n as f64),
        ni: Some(stall_count as f64 / n as f64),
        tr_s: (stall_count > 0).then(|| stall_time / stall_count as f64),
        zero_byte_peers: zero_bytes,
        violations: trace.violations,
    }
}

/// Mean and 95% confidence interval of one metric across replications.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub half_width: f64,
    /// `half_width / |mean|`; infinite for a single replication.
    pub rel_half_width: f64,
    pub n: usize,
}

impl MetricSummary {
    /// True when the interval is wider than the 5% relative target.
    pub fn flagged(&self) -> bool {
        !(self.rel_half_width <= 0.05)
    }
}

fn t_quantile_975(df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df)
        .expect("valid t distribution")
        .inverse_cdf(0.975)
}

/// Combines per-run samples of one metric. Returns `None` for an empty
/// sample; a single run yields its point estimate with an infinite width.
pub fn aggregate(samples: &[f64]) -> Option<MetricSummary> {
    let n = samples.len();
    if n == 0 {
        return None;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some(MetricSummary {
            mean,
            ci_low: f64::NEG_INFINITY,
            ci_high: f64::INFINITY,
            half_width: f64::INFINITY,
            rel_half_width: f64::INFINITY,
            n,
        });
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let s = var.sqrt();
    let hw = t_quantile_975((n - 1) as f64) * s / (n as f64).sqrt();
    let rel = if hw == 0.0 {
        0.0
    } else if mean == 0.0 {
        f64::INFINITY
    } else {
        hw / mean.abs()
    };
    Some(MetricSummary {
        mean,
        ci_low: mean - hw,
        ci_high: mean + hw,
        half_width: hw,
        rel_half_width: rel,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CapacityClass;
    use crate::swarm::DepartReason;
    use approx::assert_relative_eq;

    fn peer(bytes: u64, completion: Option<f64>, depart: f64) -> ServedPeer {
        ServedPeer {
            peer: crate::model::PeerId(1),
            class: CapacityClass::Regular,
            join_time: 0.0,
            depart_time: depart,
            completion_time: completion,
            bytes_downloaded: bytes,
            startup_delay_s: 10.0,
            stall_count: 0,
            stall_total_s: 0.0,
            idle_slot_s: 0.0,
            reason: DepartReason::Stopped,
        }
    }

    fn trace_of(served: Vec<ServedPeer>) -> RunTrace {
        RunTrace {
            duration_s: 7200.0,
            served,
            violations: Violations::default(),
            log: Vec::new(),
        }
    }

    const R: f64 = 240_000.0;

    #[test]
    fn dedicated_channel_pace_scores_one() {
        let t = trace_of(vec![peer(
            20 * 1024 * 1024,
            Some(699.0506666666666),
            800.0,
        )]);
        let rep = finalize_run(&t, R, 0.0);
        assert_relative_eq!(rep.erc.unwrap(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn half_pace_scores_a_half() {
        let t = trace_of(vec![peer(
            20 * 1024 * 1024,
            Some(1398.1013333333333),
            1500.0,
        )]);
        let rep = finalize_run(&t, R, 0.0);
        assert_relative_eq!(rep.erc.unwrap(), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn unfinished_downloads_count_time_to_departure() {
        let t = trace_of(vec![peer(10 * 1024 * 1024, None, 699.0506666666666)]);
        let rep = finalize_run(&t, R, 0.0);
        assert_relative_eq!(rep.erc.unwrap(), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn zero_byte_peers_are_excluded_but_counted() {
        let mut quitter = peer(0, None, 5.0);
        quitter.startup_delay_s = 0.0;
        let t = trace_of(vec![
            quitter,
            peer(20 * 1024 * 1024, Some(699.0506666666666), 800.0),
        ]);
        let rep = finalize_run(&t, R, 0.0);
        assert_eq!(rep.zero_byte_peers, 1);
        assert_eq!(rep.ps, 2);
        assert_relative_eq!(rep.erc.unwrap(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn idle_slot_integral_feeds_est_directly() {
        let mut a = peer(1024, None, 100.0);
        a.idle_slot_s = 100.0;
        let t = trace_of(vec![a]);
        let rep = finalize_run(&t, R, 0.0);
        assert_relative_eq!(rep.est_s.unwrap(), 100.0, max_relative = 1e-12);
    }

    #[test]
    fn startup_delays_average_over_served_peers() {
        let mut a = peer(1024, None, 100.0);
        a.startup_delay_s = 10.0;
        let mut b = peer(1024, None, 100.0);
        b.startup_delay_s = 30.0;
        let rep = finalize_run(&trace_of(vec![a, b]), R, 0.0);
        assert_relative_eq!(rep.sd_s.unwrap(), 20.0, max_relative = 1e-12);
    }

    #[test]
    fn stall_means_split_into_ni_and_pooled_tr() {
        let mut a = peer(1024, None, 100.0);
        a.stall_count = 2;
        a.stall_total_s = 6.0;
        let b = peer(1024, None, 100.0);
        let rep = finalize_run(&trace_of(vec![a, b]), R, 0.0);
        assert_relative_eq!(rep.ni.unwrap(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(rep.tr_s.unwrap(), 3.0, max_relative = 1e-12);
    }

    #[test]
    fn stall_free_runs_have_no_tr() {
        let rep = finalize_run(&trace_of(vec![peer(1024, None, 100.0)]), R, 0.0);
        assert_eq!(rep.tr_s, None);
        assert_relative_eq!(rep.ni.unwrap(), 0.0);
    }

    #[test]
    fn empty_runs_yield_absent_metrics() {
        let rep = finalize_run(&trace_of(vec![]), R, 0.0);
        assert_eq!(rep.ps, 0);
        assert_eq!(rep.erc, None);
        assert_eq!(rep.est_s, None);
        assert_eq!(rep.sd_s, None);
    }

    #[test]
    fn warmup_cutoff_drops_early_departures() {
        let early = peer(1024, None, 50.0);
        let late = peer(2048, None, 150.0);
        let rep = finalize_run(&trace_of(vec![early, late]), R, 100.0);
        assert_eq!(rep.ps, 1);
    }

    #[test]
    fn t_quantile_matches_the_textbook_value() {
        // 0.975 quantile of Student's t with 4 degrees of freedom.
        assert_relative_eq!(
            t_quantile_975(4.0),
            2.7764451051977987,
            max_relative = 1e-9
        );
    }

    #[test]
    fn aggregate_reproduces_the_hand_computed_interval() {
        let s = aggregate(&[10.0, 12.0, 11.0, 13.0, 9.0]).unwrap();
        assert_relative_eq!(s.mean, 11.0, max_relative = 1e-12);
        assert_relative_eq!(s.half_width, 1.9632431614775607, max_relative = 1e-9);
        assert_relative_eq!(s.ci_low, 11.0 - 1.9632431614775607, max_relative = 1e-9);
        assert_relative_eq!(s.ci_high, 11.0 + 1.9632431614775607, max_relative = 1e-9);
        assert_relative_eq!(s.rel_half_width, 1.9632431614775607 / 11.0, max_relative = 1e-9);
        assert!(s.flagged(), "17.8% relative width exceeds the 5% target");
    }

    #[test]
    fn identical_replications_collapse_to_a_point() {
        let s = aggregate(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(s.half_width, 0.0);
        assert_eq!(s.rel_half_width, 0.0);
        assert!(!s.flagged());
    }

    #[test]
    fn single_replications_are_flagged_infinitely_wide() {
        let s = aggregate(&[7.0]).unwrap();
        assert_eq!(s.mean, 7.0);
        assert!(s.half_width.is_infinite());
        assert!(s.flagged());
        assert_eq!(aggregate(&[]), None);
    }
}

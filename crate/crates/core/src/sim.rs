//! Synthetic 5G-uplink delay traces and trace-file ingestion.
//!
//! The simulator composes four delay sources per packet: waiting for the next
//! uplink-eligible TDD slot (frame alignment), a FIFO queue shared by
//! consecutive packets, HARQ retransmissions and RLC restarts. A constant
//! per-packet clock drift between the application and the radio frame makes
//! the frame-alignment term sweep through the frame, which shows up as a
//! sawtooth in the delay series.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdn::MixtureParams;

/// Inter-arrival times of the 100-byte stable high-gain measurement set.
pub const HIGH_GAIN_100B_PERIODS_MS: [f64; 4] = [10.0, 20.0, 50.0, 100.0];
/// Inter-arrival times of the 200-byte stable high-gain measurement set.
pub const HIGH_GAIN_200B_PERIODS_MS: [f64; 6] = [10.0, 15.0, 20.0, 25.0, 50.0, 100.0];

pub const MAX_MCS: u32 = 28;
const REDUCED_MCS_RANGE: (u32, u32) = (12, 18);
const STABLE_MCS: u32 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainProfile {
    /// MCS pinned at 20.
    StableHigh,
    /// MCS wandering in `[12, 18]`.
    Reduced,
}

fn default_frame_period() -> f64 {
    10.0
}
fn default_slots() -> u32 {
    10
}
fn default_uplink_slots() -> Vec<u32> {
    vec![4, 9]
}
fn default_harq_penalty() -> f64 {
    7.5
}
fn default_rlc_penalty() -> f64 {
    25.0
}
fn default_harq_attempts() -> u32 {
    4
}
fn default_rlc_max() -> u32 {
    7
}
fn default_rate_base() -> f64 {
    10.0
}
fn default_rate_per_mcs() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub packet_size_bytes: u32,
    pub inter_arrival_ms: f64,
    pub n_packets: usize,
    pub gain_profile: GainProfile,
    #[serde(default = "default_frame_period")]
    pub frame_period_ms: f64,
    #[serde(default = "default_slots")]
    pub slots_per_frame: u32,
    /// Slots within a frame in which uplink transmission may start.
    #[serde(default = "default_uplink_slots")]
    pub uplink_slots: Vec<u32>,
    pub base_delay_ms: f64,
    #[serde(default = "default_harq_penalty")]
    pub harq_penalty_ms: f64,
    #[serde(default = "default_rlc_penalty")]
    pub rlc_penalty_ms: f64,
    #[serde(default = "default_harq_attempts")]
    pub harq_max_attempts: u32,
    /// RLC restarts after which the packet is delivered regardless.
    #[serde(default = "default_rlc_max")]
    pub rlc_max_retx: u32,
    #[serde(default)]
    pub clock_offset_drift_ms_per_packet: f64,
    /// Radio-clock phase of the first arrival.
    #[serde(default)]
    pub phase_offset_ms: f64,
    /// Per-attempt block error rate at MCS 15 (or at the pinned MCS).
    #[serde(default)]
    pub bler: f64,
    /// Change in block error rate per MCS step above 15 (Reduced profile).
    #[serde(default)]
    pub bler_mcs_slope: f64,
    #[serde(default = "default_rate_base")]
    pub rate_base_bytes_per_ms: f64,
    #[serde(default = "default_rate_per_mcs")]
    pub rate_per_mcs_bytes_per_ms: f64,
    /// Standard deviation of Gaussian processing jitter added to every delay.
    #[serde(default)]
    pub jitter_std_ms: f64,
    pub seed: u64,
}

impl SimConfig {
    /// Stable high-gain preset: MCS 20, no block errors.
    pub fn stable_high(packet_size_bytes: u32, inter_arrival_ms: f64, n_packets: usize) -> Self {
        SimConfig {
            packet_size_bytes,
            inter_arrival_ms,
            n_packets,
            gain_profile: GainProfile::StableHigh,
            frame_period_ms: default_frame_period(),
            slots_per_frame: default_slots(),
            uplink_slots: default_uplink_slots(),
            base_delay_ms: 4.0,
            harq_penalty_ms: default_harq_penalty(),
            rlc_penalty_ms: default_rlc_penalty(),
            harq_max_attempts: default_harq_attempts(),
            rlc_max_retx: default_rlc_max(),
            clock_offset_drift_ms_per_packet: 0.0,
            phase_offset_ms: 0.0,
            bler: 0.0,
            bler_mcs_slope: 0.0,
            rate_base_bytes_per_ms: default_rate_base(),
            rate_per_mcs_bytes_per_ms: default_rate_per_mcs(),
            jitter_std_ms: 0.0,
            seed: 0,
        }
    }

    /// Reduced-gain preset: 200-byte packets every 50 ms, MCS 12–18, BLER 10%.
    pub fn reduced(n_packets: usize) -> Self {
        SimConfig {
            gain_profile: GainProfile::Reduced,
            bler: 0.10,
            clock_offset_drift_ms_per_packet: 0.1,
            jitter_std_ms: 0.5,
            ..Self::stable_high(200, 50.0, n_packets)
        }
    }

    /// Reduced-gain preset whose delay law has a closed form (see
    /// [`conditional_delay_law`]): a slow sawtooth from the 0.1 ms drift, at
    /// most one HARQ retransmission with an MCS-dependent probability, no RLC
    /// restarts and no queueing.
    pub fn harq_sawtooth(n_packets: usize) -> Self {
        SimConfig {
            phase_offset_ms: 0.5,
            harq_max_attempts: 2,
            rlc_max_retx: 0,
            bler: 0.10,
            bler_mcs_slope: 0.03,
            jitter_std_ms: 0.5,
            ..Self::reduced(n_packets)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("inter_arrival_ms", self.inter_arrival_ms),
            ("frame_period_ms", self.frame_period_ms),
            ("base_delay_ms", self.base_delay_ms),
            ("harq_penalty_ms", self.harq_penalty_ms),
            ("rlc_penalty_ms", self.rlc_penalty_ms),
            ("rate_base_bytes_per_ms", self.rate_base_bytes_per_ms),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.packet_size_bytes == 0 {
            return Err(Error::Config("packet_size_bytes must be > 0".into()));
        }
        if self.harq_max_attempts < 1 {
            return Err(Error::Config("harq_max_attempts must be ≥ 1".into()));
        }
        if self.slots_per_frame < 1 {
            return Err(Error::Config("slots_per_frame must be ≥ 1".into()));
        }
        if self.uplink_slots.is_empty()
            || self.uplink_slots.iter().any(|&s| s >= self.slots_per_frame)
        {
            return Err(Error::Config(format!(
                "uplink_slots {:?} must be a nonempty subset of 0..{}",
                self.uplink_slots, self.slots_per_frame
            )));
        }
        if !(0.0..=1.0).contains(&self.bler) {
            return Err(Error::Config(format!("bler must be in [0, 1], got {}", self.bler)));
        }
        if !(self.jitter_std_ms >= 0.0) || !self.clock_offset_drift_ms_per_packet.is_finite() {
            return Err(Error::Config("jitter must be ≥ 0 and drift finite".into()));
        }
        if self.rate_per_mcs_bytes_per_ms < 0.0 {
            return Err(Error::Config("rate_per_mcs_bytes_per_ms must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn slot_duration_ms(&self) -> f64 {
        self.frame_period_ms / self.slots_per_frame as f64
    }

    /// Block error rate in effect at `mcs`.
    pub fn bler_at(&self, mcs: u32) -> f64 {
        match self.gain_profile {
            GainProfile::StableHigh => self.bler,
            GainProfile::Reduced => {
                (self.bler + self.bler_mcs_slope * (mcs as f64 - 15.0)).clamp(0.0, 1.0)
            }
        }
    }

    /// Air-interface transmission time of one packet at `mcs`.
    pub fn transmission_ms(&self, mcs: u32) -> f64 {
        let rate = self.rate_base_bytes_per_ms + self.rate_per_mcs_bytes_per_ms * mcs as f64;
        self.packet_size_bytes as f64 / rate
    }

    pub fn initial_channel(&self) -> ChannelState {
        let mcs = match self.gain_profile {
            GainProfile::StableHigh => STABLE_MCS,
            GainProfile::Reduced => (REDUCED_MCS_RANGE.0 + REDUCED_MCS_RANGE.1) / 2,
        };
        ChannelState {
            mcs_index: mcs,
            bler: self.bler_at(mcs),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    pub mcs_index: u32,
    pub bler: f64,
}

/// Advances the link-adaptation state by one packet.
///
/// StableHigh is the identity; Reduced takes a uniform step in `{-1, 0, +1}`
/// clamped to `[12, 18]`.
pub fn step_channel<R: Rng>(state: ChannelState, profile: GainProfile, rng: &mut R) -> ChannelState {
    match profile {
        GainProfile::StableHigh => state,
        GainProfile::Reduced => apply_mcs_step(state, profile, rng.gen_range(-1..=1)),
    }
}

/// Applies a given MCS step under the profile's bounds.
pub fn apply_mcs_step(state: ChannelState, profile: GainProfile, step: i32) -> ChannelState {
    match profile {
        GainProfile::StableHigh => state,
        GainProfile::Reduced => {
            let (lo, hi) = REDUCED_MCS_RANGE;
            let mcs = (state.mcs_index as i64 + step as i64).clamp(lo as i64, hi as i64) as u32;
            ChannelState {
                mcs_index: mcs,
                ..state
            }
        }
    }
}

/// Transition matrix of the Reduced-profile MCS walk over `12..=18`.
pub fn reduced_mcs_transition() -> [[f64; 7]; 7] {
    let mut t = [[0.0; 7]; 7];
    for (from, row) in t.iter_mut().enumerate() {
        for step in -1i32..=1 {
            let to = (from as i32 + step).clamp(0, 6) as usize;
            row[to] += 1.0 / 3.0;
        }
    }
    t
}

/// Wait from `arrival_time_ms` until the start of the next uplink-eligible
/// slot. Returns a value in `[0, frame_period_ms)`.
pub fn frame_alignment_delay(arrival_time_ms: f64, cfg: &SimConfig) -> f64 {
    let frame = cfg.frame_period_ms;
    let slot = cfg.slot_duration_ms();
    let phase = arrival_time_ms.rem_euclid(frame);
    let mut best = f64::INFINITY;
    for &s in &cfg.uplink_slots {
        let start = s as f64 * slot;
        let wait = if start >= phase {
            start - phase
        } else {
            start + frame - phase
        };
        best = best.min(wait);
    }
    if best >= frame {
        best - frame
    } else {
        best
    }
}

/// Queueing delay of each packet at a single FIFO server:
/// `departure_n = max(arrival_n, departure_{n-1}) + service_n`, and the wait is
/// the time between arrival and start of service.
pub fn queue_waits(arrivals: &[f64], services: &[f64]) -> Vec<f64> {
    let mut departure = f64::NEG_INFINITY;
    arrivals
        .iter()
        .zip(services)
        .map(|(&a, &s)| {
            let start = a.max(departure);
            departure = start + s;
            start - a
        })
        .collect()
}

/// One packet's delay context and observed delay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketRecord {
    pub seq: u64,
    pub arrival_time_ms: f64,
    pub size_bytes: u32,
    pub inter_arrival_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harq_retx: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rlc_retx: Option<u32>,
    pub delay_ms: f64,
}

/// Outcome of the HARQ/RLC retransmission process for one packet.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Retransmissions {
    pub harq: u32,
    pub rlc: u32,
}

/// Draws HARQ attempt failures i.i.d. with probability `bler`. A round that
/// fails all `max_attempts` attempts triggers an RLC restart.
pub fn draw_retransmissions<R: Rng>(
    bler: f64,
    max_attempts: u32,
    rlc_max: u32,
    rng: &mut R,
) -> Retransmissions {
    let mut out = Retransmissions::default();
    loop {
        let mut failures = 0;
        while failures < max_attempts && rng.gen::<f64>() < bler {
            failures += 1;
        }
        if failures < max_attempts {
            out.harq += failures;
            return out;
        }
        out.harq += max_attempts - 1;
        if out.rlc == rlc_max {
            return out;
        }
        out.rlc += 1;
    }
}

/// Generates a trace of `cfg.n_packets` records. Deterministic per seed.
pub fn simulate_trace(cfg: &SimConfig) -> Result<Vec<PacketRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = Normal::new(0.0, cfg.jitter_std_ms.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let n = cfg.n_packets;
    let period = cfg.inter_arrival_ms + cfg.clock_offset_drift_ms_per_packet;

    let mut state = cfg.initial_channel();
    let mut arrivals = Vec::with_capacity(n);
    let mut services = Vec::with_capacity(n);
    let mut draws = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            state = step_channel(state, cfg.gain_profile, &mut rng);
            state.bler = cfg.bler_at(state.mcs_index);
        }
        let retx = draw_retransmissions(
            state.bler,
            cfg.harq_max_attempts,
            cfg.rlc_max_retx,
            &mut rng,
        );
        let noise = if cfg.jitter_std_ms > 0.0 {
            jitter.sample(&mut rng)
        } else {
            0.0
        };
        let arrival = cfg.phase_offset_ms + i as f64 * period;
        let penalty = retx.harq as f64 * cfg.harq_penalty_ms + retx.rlc as f64 * cfg.rlc_penalty_ms;
        arrivals.push(arrival);
        services.push(cfg.transmission_ms(state.mcs_index) + penalty);
        draws.push((state.mcs_index, retx, penalty, noise));
    }

    let waits = queue_waits(&arrivals, &services);
    let slot_ms = cfg.slot_duration_ms();
    let records = (0..n)
        .map(|i| {
            let (mcs, retx, penalty, noise) = draws[i];
            let arrival = arrivals[i];
            let align = frame_alignment_delay(arrival, cfg);
            let delay = waits[i] + align + cfg.base_delay_ms + penalty + noise;
            let slot = ((arrival.rem_euclid(cfg.frame_period_ms) / slot_ms).floor() as u32)
                .min(cfg.slots_per_frame - 1);
            PacketRecord {
                seq: i as u64,
                arrival_time_ms: arrival,
                size_bytes: cfg.packet_size_bytes,
                inter_arrival_ms: cfg.inter_arrival_ms,
                slot: Some(slot),
                mcs: Some(mcs),
                harq_retx: Some(retx.harq),
                rlc_retx: Some(retx.rlc),
                delay_ms: delay.max(1e-3),
            }
        })
        .collect();
    Ok(records)
}

/// Law of the delay of packet `last.seq + steps_ahead`, in milliseconds,
/// given the arrival time and MCS of packet `last.seq`.
///
/// Defined for configurations without RLC restarts, with positive jitter and
/// with every service time shorter than the packet period, so that the delay
/// is frame alignment plus base delay plus a HARQ penalty plus Gaussian
/// jitter. Component `k` is `k` HARQ retransmissions.
pub fn conditional_delay_law(cfg: &SimConfig, last: &PacketRecord, steps_ahead: usize) -> Result<MixtureParams> {
    cfg.validate()?;
    if cfg.rlc_max_retx != 0 || !(cfg.jitter_std_ms > 0.0) {
        return Err(Error::Config(
            "closed-form delay law needs rlc_max_retx = 0 and jitter_std_ms > 0".into(),
        ));
    }
    let period = cfg.inter_arrival_ms + cfg.clock_offset_drift_ms_per_packet;
    let attempts = cfg.harq_max_attempts as usize;
    let (lo, hi) = match cfg.gain_profile {
        GainProfile::StableHigh => (STABLE_MCS, STABLE_MCS),
        GainProfile::Reduced => REDUCED_MCS_RANGE,
    };
    let worst_service = cfg.transmission_ms(lo) + (attempts - 1) as f64 * cfg.harq_penalty_ms;
    if worst_service > period {
        return Err(Error::Config(format!(
            "service time up to {worst_service} ms exceeds the {period} ms period; delays queue"
        )));
    }
    let mcs = last
        .mcs
        .ok_or_else(|| Error::Validation(format!("packet {} has no MCS", last.seq)))?;
    if mcs < lo || mcs > hi {
        return Err(Error::Validation(format!("MCS {mcs} outside the profile range {lo}..={hi}")));
    }

    let mut dist = vec![0.0; (hi - lo + 1) as usize];
    dist[(mcs - lo) as usize] = 1.0;
    if cfg.gain_profile == GainProfile::Reduced {
        let t = reduced_mcs_transition();
        for _ in 0..steps_ahead {
            let mut next = [0.0; 7];
            for (from, p) in dist.iter().enumerate() {
                for (to, q) in t[from].iter().enumerate() {
                    next[to] += p * q;
                }
            }
            dist.copy_from_slice(&next);
        }
    }

    let mut weights = vec![0.0; attempts];
    for (j, p) in dist.iter().enumerate() {
        let b = cfg.bler_at(lo + j as u32);
        for (k, w) in weights.iter_mut().enumerate() {
            let pk = if k + 1 < attempts {
                (1.0 - b) * b.powi(k as i32)
            } else {
                b.powi(k as i32)
            };
            *w += p * pk;
        }
    }
    let arrival = cfg.phase_offset_ms + (last.seq + steps_ahead as u64) as f64 * period;
    let centre = frame_alignment_delay(arrival, cfg) + cfg.base_delay_ms;
    let means = (0..attempts).map(|k| centre + k as f64 * cfg.harq_penalty_ms).collect();
    MixtureParams::new(weights, means, vec![cfg.jitter_std_ms; attempts])
}

/// Serialises records as JSON lines.
pub fn records_to_jsonl(records: &[PacketRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[PacketRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines trace. Blank lines are skipped; `seq` must start at 0
/// and increase strictly.
pub fn ingest_records(path: &Path) -> Result<Vec<PacketRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<PacketRecord> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PacketRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let expected_min = out.last().map_or(0, |p| p.seq + 1);
        if out.is_empty() && rec.seq != 0 {
            return Err(Error::Validation(format!(
                "{}:{}: first seq must be 0, got {}",
                path.display(),
                i + 1,
                rec.seq
            )));
        }
        if rec.seq < expected_min {
            return Err(Error::Validation(format!(
                "{}:{}: seq {} not increasing (previous {})",
                path.display(),
                i + 1,
                rec.seq,
                expected_min - 1
            )));
        }
        if !(rec.delay_ms > 0.0 && rec.delay_ms.is_finite()) {
            return Err(Error::Validation(format!(
                "{}:{}: delay_ms must be positive, got {}",
                path.display(),
                i + 1,
                rec.delay_ms
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aligned_cfg(n: usize) -> SimConfig {
        SimConfig {
            uplink_slots: vec![0],
            ..SimConfig::stable_high(100, 50.0, n)
        }
    }

    #[test]
    fn stable_profile_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = ChannelState {
            mcs_index: 20,
            bler: 0.0,
        };
        for _ in 0..100 {
            assert_eq!(step_channel(s, GainProfile::StableHigh, &mut rng), s);
        }
    }

    #[test]
    fn reduced_walk_clamps_at_bounds() {
        let s = ChannelState {
            mcs_index: 12,
            bler: 0.1,
        };
        assert_eq!(apply_mcs_step(s, GainProfile::Reduced, -1).mcs_index, 12);
        let s = ChannelState {
            mcs_index: 18,
            bler: 0.1,
        };
        assert_eq!(apply_mcs_step(s, GainProfile::Reduced, 1).mcs_index, 18);
        assert_eq!(apply_mcs_step(s, GainProfile::Reduced, -1).mcs_index, 17);
    }

    #[test]
    fn reduced_walk_stationary_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = SimConfig::reduced(1).initial_channel();
        let mut total = 0.0;
        let n = 10_000;
        for _ in 0..n {
            s = step_channel(s, GainProfile::Reduced, &mut rng);
            assert!((12..=18).contains(&s.mcs_index));
            total += s.mcs_index as f64;
        }
        assert!((total / n as f64 - 15.0).abs() < 0.5);
    }

    #[test]
    fn alignment_examples() {
        let mut cfg = aligned_cfg(1);
        assert_eq!(frame_alignment_delay(0.0, &cfg), 0.0);
        assert_eq!(frame_alignment_delay(30.0, &cfg), 0.0);
        let eps = 1e-3;
        assert!((frame_alignment_delay(eps, &cfg) - (10.0 - eps)).abs() < 1e-12);

        cfg.uplink_slots = vec![0, 5];
        let got: Vec<f64> = (0..10)
            .map(|t| frame_alignment_delay(t as f64, &cfg))
            .collect();
        assert_eq!(got, vec![0.0, 4.0, 3.0, 2.0, 1.0, 0.0, 4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn alignment_is_periodic_and_bounded() {
        let cfg = SimConfig::stable_high(100, 10.0, 1);
        for k in 0..200 {
            let t = k as f64 * 0.173;
            let d = frame_alignment_delay(t, &cfg);
            assert!((0.0..cfg.frame_period_ms).contains(&d));
            let shifted = frame_alignment_delay(t + 3.0 * cfg.frame_period_ms, &cfg);
            assert!((d - shifted).abs() < 1e-9);
        }
    }

    #[test]
    fn queue_recursion_by_hand() {
        let w = queue_waits(&[0.0, 1.0, 2.0], &[2.0, 2.0, 2.0]);
        assert_eq!(w, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn constant_delay_without_stochastic_terms() {
        let recs = simulate_trace(&aligned_cfg(50)).unwrap();
        assert!(recs.iter().all(|r| r.delay_ms == 4.0));
        assert!(recs.iter().all(|r| r.harq_retx == Some(0) && r.slot == Some(0)));
    }

    #[test]
    fn single_harq_retx_adds_penalty() {
        let cfg = SimConfig {
            bler: 0.2,
            ..aligned_cfg(2000)
        };
        let recs = simulate_trace(&cfg).unwrap();
        let one = recs
            .iter()
            .find(|r| r.harq_retx == Some(1) && r.rlc_retx == Some(0))
            .expect("a packet with one retransmission");
        assert!((one.delay_ms - (4.0 + 7.5)).abs() < 1e-12);
        for pair in recs.windows(2) {
            if pair[0].rlc_retx != Some(0) {
                continue;
            }
            let r = &pair[1];
            let k = r.harq_retx.unwrap() as f64;
            let j = r.rlc_retx.unwrap() as f64;
            assert!((r.delay_ms - (4.0 + 7.5 * k + 25.0 * j)).abs() < 1e-9);
        }
    }

    #[test]
    fn exhausted_round_triggers_rlc() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = draw_retransmissions(1.0, 4, 2, &mut rng);
        assert_eq!(r, Retransmissions { harq: 9, rlc: 2 });
        let r = draw_retransmissions(0.0, 4, 2, &mut rng);
        assert_eq!(r, Retransmissions::default());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = aligned_cfg(1);
        cfg.inter_arrival_ms = 0.0;
        assert!(matches!(simulate_trace(&cfg), Err(Error::Config(_))));
        let mut cfg = aligned_cfg(1);
        cfg.harq_max_attempts = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = aligned_cfg(1);
        cfg.uplink_slots = vec![10];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn transition_rows_sum_to_one() {
        for row in reduced_mcs_transition() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_law_matches_simulation() {
        let cfg = SimConfig::harq_sawtooth(20_000);
        let recs = simulate_trace(&cfg).unwrap();
        for ahead in [0usize, 7] {
            let pit: Vec<f64> = recs
                .iter()
                .zip(&recs[ahead..])
                .map(|(last, target)| conditional_delay_law(&cfg, last, ahead).unwrap().cdf(target.delay_ms))
                .collect();
            let n = pit.len() as f64;
            let mean = pit.iter().sum::<f64>() / n;
            let below = pit.iter().filter(|&&u| u < 0.25).count() as f64 / n;
            assert!((mean - 0.5).abs() < 0.01, "mean PIT {mean} at {ahead}");
            assert!((below - 0.25).abs() < 0.015, "lower quartile {below} at {ahead}");
        }
    }

    #[test]
    fn closed_form_law_needs_no_rlc() {
        let cfg = SimConfig::reduced(10);
        let recs = simulate_trace(&cfg).unwrap();
        assert!(matches!(conditional_delay_law(&cfg, &recs[0], 1), Err(Error::Config(_))));
    }
}

//! Mobility, the log-distance channel model and link rates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::error::{FrescoError, Result};
use crate::model::{random_point, Mover, ServingPair, WorldState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadioParams {
    pub pathloss_exponent: f64,
    /// Linear channel gain at 1 m.
    pub reference_gain: f64,
    /// mW
    pub noise_power: f64,
    /// mW
    pub tx_power_mu: f64,
    /// mW
    pub tx_power_uav: f64,
    pub shadowing_sigma_db: f64,
    /// Linear SNR below which a serving path is unsustainable.
    pub snr_min: f64,
    /// Sync-link capacity per serving–candidate link (MHz).
    pub b_link: f64,
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.max(1e-300).log10()
}

impl RadioParams {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        let r = &cfg.radio;
        RadioParams {
            pathloss_exponent: r.pathloss_exponent,
            reference_gain: db_to_linear(r.reference_gain_db),
            noise_power: db_to_linear(r.noise_dbm),
            tx_power_mu: db_to_linear(r.tx_power_mu_dbm),
            tx_power_uav: db_to_linear(r.tx_power_uav_dbm),
            shadowing_sigma_db: r.shadowing_sigma_db,
            snr_min: db_to_linear(r.snr_min_db),
            b_link: r.b_link,
        }
    }

    /// Same parameters with shadowing switched off.
    pub fn deterministic(mut self) -> Self {
        self.shadowing_sigma_db = 0.0;
        self
    }
}

/// Channel state of one (mission, serving, candidate) triplet.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkSnapshot {
    pub snr_mu_serving: f64,
    /// γ^cand: MU uplink toward the candidate.
    pub snr_mu_candidate: f64,
    /// γ^syn: serving → candidate context link.
    pub snr_serving_candidate: f64,
    pub d_mu_serving: f64,
    pub d_mu_candidate: f64,
    pub d_serving_candidate: f64,
}

/// Received SNR under log-distance path loss with log-normal shadowing.
///
/// Distances below 1 m are clamped to 1 m. With zero shadowing the result is
/// deterministic and `rng` is not touched.
pub fn snr<R: Rng + ?Sized>(tx_power: f64, distance: f64, radio: &RadioParams, rng: &mut R) -> f64 {
    let d = distance.max(1.0);
    let shadow_db = if radio.shadowing_sigma_db > 0.0 {
        Normal::new(0.0, radio.shadowing_sigma_db)
            .expect("sigma is finite and positive")
            .sample(rng)
    } else {
        0.0
    };
    tx_power * radio.reference_gain * d.powf(-radio.pathloss_exponent) * db_to_linear(shadow_db)
        / radio.noise_power
}

/// Shannon rate `bandwidth * log2(1 + snr)` in Mbps for bandwidth in MHz.
pub fn access_rate(bandwidth: f64, snr: f64) -> Result<f64> {
    if !(bandwidth >= 0.0 && snr >= 0.0) {
        return Err(FrescoError::Argument(format!(
            "rate inputs must be non-negative (bandwidth {bandwidth}, snr {snr})"
        )));
    }
    if bandwidth == 0.0 {
        return Ok(0.0);
    }
    Ok(bandwidth * (1.0 + snr).log2())
}

/// Context-synchronization rate; same law as [`access_rate`].
pub fn sync_rate(b_syn: f64, snr_syn: f64) -> Result<f64> {
    access_rate(b_syn, snr_syn)
}

/// Which link a shadowing draw belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum LinkKind {
    MuToUav = 1,
    UavToUav = 2,
}

/// Seeded shadowing field: the draw for a given link and slot depends only on
/// `(seed, slot, kind, a, b)`, so every policy sees identical channels.
#[derive(Clone, Copy, Debug)]
pub struct ShadowField {
    pub seed: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl ShadowField {
    pub fn rng(&self, t: u32, kind: LinkKind, a: usize, b: usize) -> ChaCha8Rng {
        let mut h = splitmix(self.seed);
        for v in [t as u64, kind as u64, a as u64, b as u64] {
            h = splitmix(h ^ v);
        }
        ChaCha8Rng::seed_from_u64(h)
    }

    pub fn mu_uav(&self, w: &WorldState, radio: &RadioParams, mission: usize, uav: usize) -> (f64, f64) {
        let d = w.missions[mission].mu.distance_to(&w.uavs[uav].mover);
        let mut rng = self.rng(w.t, LinkKind::MuToUav, mission, uav);
        (snr(radio.tx_power_mu, d, radio, &mut rng), d)
    }

    pub fn uav_uav(&self, w: &WorldState, radio: &RadioParams, a: usize, b: usize) -> (f64, f64) {
        let d = w.uavs[a].mover.distance_to(&w.uavs[b].mover);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut rng = self.rng(w.t, LinkKind::UavToUav, lo, hi);
        (snr(radio.tx_power_uav, d, radio, &mut rng), d)
    }

    /// Full snapshot for mission `i`, its serving UAV `j` and candidate `k`.
    pub fn snapshot(&self, w: &WorldState, radio: &RadioParams, i: usize, j: usize, k: usize) -> LinkSnapshot {
        let (snr_mu_serving, d_mu_serving) = self.mu_uav(w, radio, i, j);
        let (snr_mu_candidate, d_mu_candidate) = self.mu_uav(w, radio, i, k);
        let (snr_serving_candidate, d_serving_candidate) = self.uav_uav(w, radio, j, k);
        LinkSnapshot {
            snr_mu_serving,
            snr_mu_candidate,
            snr_serving_candidate,
            d_mu_serving,
            d_mu_candidate,
            d_serving_candidate,
        }
    }
}

fn step_mover(m: &mut Mover, max_speed: f64, tau: f64, side: f64, rng: &mut ChaCha8Rng) {
    let z = m.pos[2];
    let dx = m.waypoint[0] - m.pos[0];
    let dy = m.waypoint[1] - m.pos[1];
    let dist = (dx * dx + dy * dy).sqrt();
    let step = m.speed.min(max_speed) * tau;
    if dist <= step {
        m.pos = m.waypoint;
        m.waypoint = random_point(rng, side, z);
        m.speed = rng.random_range(0.0..=max_speed);
    } else if step > 0.0 {
        m.pos[0] += dx / dist * step;
        m.pos[1] += dy / dist * step;
    }
    m.pos[0] = m.pos[0].clamp(0.0, side);
    m.pos[1] = m.pos[1].clamp(0.0, side);
}

/// Random-waypoint step for every MU and UAV, in id order.
pub fn step_mobility(w: &mut WorldState, cfg: &ScenarioConfig) {
    let sc = &cfg.scenario;
    for m in &mut w.missions {
        step_mover(&mut m.mu, sc.mu_speed_max, sc.tau, sc.area_side, &mut w.rng);
    }
    for u in &mut w.uavs {
        let vmax = sc.uav_speed_max.min(u.v_max);
        step_mover(&mut u.mover, vmax, sc.tau, sc.area_side, &mut w.rng);
    }
}

/// A serving path is sustainable while its MU link clears `snr_min` and the
/// serving UAV is neither below the energy floor nor flagged degraded.
pub fn sustainable(pair: &ServingPair, w: &WorldState, radio: &RadioParams) -> bool {
    let uav = &w.uavs[pair.serving_uav_id];
    let snr_ok = w
        .mu_snr
        .get(&pair.mission_id)
        .is_some_and(|&g| g >= radio.snr_min);
    snr_ok && uav.energy >= w.limits.serving_floor && !uav.degraded
}

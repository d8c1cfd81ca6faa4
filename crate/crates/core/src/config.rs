//! Scenario configuration.
//!
//! The on-disk format is flat TOML: `key = value` pairs grouped under dotted
//! sections (`[radio]`, `[fresco]`, ...). Every section is optional and falls
//! back to the defaults below; unknown keys are rejected by name.

use serde::{Deserialize, Serialize};

use crate::error::{FrescoError, Result};

/// Closed interval `[lo, hi]` used for sampled scenario parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

impl From<[f64; 2]> for Range {
    fn from(v: [f64; 2]) -> Self {
        Range { lo: v[0], hi: v[1] }
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.lo, r.hi]
    }
}

/// Named system-scale settings: (number of MUs, number of UAVs).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scale {
    S1,
    S2,
    S3,
    S4,
}

impl Scale {
    pub const ALL: [Scale; 4] = [Scale::S1, Scale::S2, Scale::S3, Scale::S4];

    pub fn sizes(self) -> (usize, usize) {
        match self {
            Scale::S1 => (48, 12),
            Scale::S2 => (72, 18),
            Scale::S3 => (96, 24),
            Scale::S4 => (120, 30),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::S1 => "S1",
            Scale::S2 => "S2",
            Scale::S3 => "S3",
            Scale::S4 => "S4",
        }
    }

    pub fn parse(s: &str) -> Result<Scale> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S1" => Ok(Scale::S1),
            "S2" => Ok(Scale::S2),
            "S3" => Ok(Scale::S3),
            "S4" => Ok(Scale::S4),
            other => Err(FrescoError::Argument(format!("unknown scale `{other}`"))),
        }
    }

    /// The scale whose sizes match `(mus, uavs)`, if any.
    pub fn of(mus: usize, uavs: usize) -> Option<Scale> {
        Scale::ALL.into_iter().find(|s| s.sizes() == (mus, uavs))
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub num_mus: usize,
    pub num_uavs: usize,
    pub candidate_fraction: f64,
    /// Side of the square service area (m).
    pub area_side: f64,
    /// Fixed flight altitude of every UAV (m); MUs are on the ground.
    pub uav_altitude: f64,
    pub slots: u32,
    /// Slot length (s).
    pub tau: f64,
    pub mu_speed_max: f64,
    pub uav_speed_max: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            num_mus: 48,
            num_uavs: 12,
            candidate_fraction: 1.0 / 3.0,
            area_side: 100.0,
            uav_altitude: 100.0,
            slots: 80,
            tau: 1.0,
            mu_speed_max: 2.0,
            uav_speed_max: 10.0,
        }
    }
}

/// Sampling ranges for the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangeSection {
    /// Initial remaining input data (Mb).
    pub d_rem: Range,
    /// Initial remaining computation (Gcycles).
    pub c_rem: Range,
    /// Service-context size (Mb).
    pub zeta: Range,
    /// Post-takeover completion deadline (s).
    pub t_max: Range,
    /// Candidate access bandwidth (MHz).
    pub b_ava: Range,
    /// Candidate computation (Gcycles/s).
    pub f_ava: Range,
    /// Candidate battery (kJ).
    pub e_candidate: Range,
    /// Serving battery (kJ).
    pub e_serving: Range,
    /// Baseline per-slot drain of every UAV (kJ/slot).
    pub drain_rate: Range,
    /// UAV maximum speed (m/s).
    pub v_max: Range,
    /// Primary access bandwidth pool of a serving UAV (MHz), split over its cap.
    pub serving_bandwidth: Range,
    /// Primary compute pool of a serving UAV (Gcycles/s), split over its cap.
    pub serving_compute: Range,
}

impl Default for RangeSection {
    fn default() -> Self {
        RangeSection {
            d_rem: Range::new(5.0, 15.0),
            c_rem: Range::new(8.0, 20.0),
            zeta: Range::new(2.0, 6.0),
            t_max: Range::new(10.0, 18.0),
            b_ava: Range::new(10.0, 20.0),
            f_ava: Range::new(10.0, 25.0),
            e_candidate: Range::new(60.0, 120.0),
            e_serving: Range::new(15.0, 60.0),
            drain_rate: Range::new(0.4, 0.9),
            v_max: Range::new(6.0, 10.0),
            serving_bandwidth: Range::new(0.12, 0.24),
            serving_compute: Range::new(1.2, 2.4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrescoSection {
    pub xi_th: f64,
    pub xi_alarm: f64,
    pub s_min: f64,
    /// Prediction horizon H (slots).
    pub horizon: usize,
    /// Observation window L (slots).
    pub window: usize,
    pub beta: [f64; 4],
    pub nu: [f64; 3],
    pub eta: [f64; 5],
    pub epsilon: f64,
    /// Consecutive low-risk slots after which a reservation is released.
    pub release_after: u32,
}

impl Default for FrescoSection {
    fn default() -> Self {
        FrescoSection {
            xi_th: 0.08,
            xi_alarm: 0.16,
            s_min: 0.30,
            horizon: 4,
            window: 6,
            beta: [1.0, 1.0, 1.0, 0.5],
            nu: [1.0, 1.0, 1.0],
            eta: [2.0, 0.5, 0.5, 0.5, 0.5],
            epsilon: 1e-6,
            release_after: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergySection {
    /// Reservation energy per reserved MHz per second (kJ).
    pub kappa_b: f64,
    /// Energy per reserved or served Gcycles/s per second (kJ).
    pub kappa_f: f64,
    /// Serving-side energy per synchronized Mb (kJ).
    pub kappa_sync: f64,
    /// Candidate battery floor E_min (kJ).
    pub e_min: f64,
    /// Serving battery below which the UAV is degraded (kJ).
    pub serving_floor: f64,
}

impl Default for EnergySection {
    fn default() -> Self {
        EnergySection {
            kappa_b: 0.01,
            kappa_f: 0.02,
            kappa_sync: 0.01,
            e_min: 10.0,
            serving_floor: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioSection {
    pub pathloss_exponent: f64,
    pub reference_gain_db: f64,
    pub noise_dbm: f64,
    pub tx_power_mu_dbm: f64,
    pub tx_power_uav_dbm: f64,
    pub shadowing_sigma_db: f64,
    pub snr_min_db: f64,
    /// Sync-link capacity of every serving–candidate pair (MHz).
    pub b_link: f64,
}

impl Default for RadioSection {
    fn default() -> Self {
        RadioSection {
            pathloss_exponent: 2.2,
            reference_gain_db: -40.0,
            noise_dbm: -100.0,
            tx_power_mu_dbm: 23.0,
            tx_power_uav_dbm: 30.0,
            shadowing_sigma_db: 4.0,
            snr_min_db: 0.0,
            b_link: 10.0,
        }
    }
}

/// Fixed normalization constants for predictor features and the heuristic
/// risk indicator, so features do not depend on the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub battery_max: f64,
    pub snr_db_max: f64,
    pub battery_margin_scale: f64,
    pub snr_margin_db_scale: f64,
}

impl Default for FeatureSection {
    fn default() -> Self {
        FeatureSection {
            battery_max: 120.0,
            snr_db_max: 60.0,
            battery_margin_scale: 20.0,
            snr_margin_db_scale: 30.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub init_scale: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 20,
            learning_rate: 0.001,
            batch_size: 128,
            hidden: 32,
            init_scale: 0.08,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioSection,
    pub ranges: RangeSection,
    pub fresco: FrescoSection,
    pub energy: EnergySection,
    pub radio: RadioSection,
    pub features: FeatureSection,
    pub train: TrainSection,
}

impl ScenarioConfig {
    /// Default configuration resized to a named scale.
    pub fn for_scale(scale: Scale) -> Self {
        let mut cfg = ScenarioConfig::default();
        cfg.set_scale(scale);
        cfg
    }

    pub fn set_scale(&mut self, scale: Scale) {
        let (mus, uavs) = scale.sizes();
        self.scenario.num_mus = mus;
        self.scenario.num_uavs = uavs;
    }

    pub fn scale(&self) -> Option<Scale> {
        Scale::of(self.scenario.num_mus, self.scenario.num_uavs)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = unknown_key(&msg).unwrap_or_else(|| "<document>".to_string());
            FrescoError::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn num_candidates(&self) -> usize {
        let n = self.scenario.num_uavs as f64 * self.scenario.candidate_fraction;
        // guard against 1/3 * 12 = 4.000000000000001
        (n - 1e-9).ceil().max(0.0) as usize
    }

    pub fn num_serving(&self) -> usize {
        self.scenario.num_uavs - self.num_candidates()
    }

    /// Largest possible MU-to-UAV distance inside the area (m).
    pub fn max_distance(&self) -> f64 {
        let s = self.scenario.area_side;
        (2.0 * s * s + self.scenario.uav_altitude.powi(2)).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let sc = &self.scenario;
        check(sc.num_mus >= 1, "scenario.num_mus", "must be at least 1")?;
        check(sc.num_uavs >= 2, "scenario.num_uavs", "must be at least 2")?;
        check(
            sc.candidate_fraction > 0.0 && sc.candidate_fraction < 1.0,
            "scenario.candidate_fraction",
            "must lie in (0, 1)",
        )?;
        check(
            self.num_candidates() >= 1 && self.num_serving() >= 1,
            "scenario.candidate_fraction",
            "must leave at least one UAV in each role",
        )?;
        check(sc.area_side > 0.0, "scenario.area_side", "must be positive")?;
        check(sc.uav_altitude >= 0.0, "scenario.uav_altitude", "must be non-negative")?;
        check(sc.slots >= 1, "scenario.slots", "must be at least 1")?;
        check(sc.tau > 0.0, "scenario.tau", "must be positive")?;
        check(sc.mu_speed_max >= 0.0, "scenario.mu_speed_max", "must be non-negative")?;
        check(sc.uav_speed_max >= 0.0, "scenario.uav_speed_max", "must be non-negative")?;

        let r = &self.ranges;
        for (key, range, positive) in [
            ("ranges.d_rem", r.d_rem, false),
            ("ranges.c_rem", r.c_rem, false),
            ("ranges.zeta", r.zeta, true),
            ("ranges.t_max", r.t_max, true),
            ("ranges.b_ava", r.b_ava, false),
            ("ranges.f_ava", r.f_ava, false),
            ("ranges.e_candidate", r.e_candidate, false),
            ("ranges.e_serving", r.e_serving, false),
            ("ranges.drain_rate", r.drain_rate, false),
            ("ranges.v_max", r.v_max, true),
            ("ranges.serving_bandwidth", r.serving_bandwidth, false),
            ("ranges.serving_compute", r.serving_compute, false),
        ] {
            check(
                range.lo.is_finite() && range.hi.is_finite() && range.lo <= range.hi,
                key,
                "must be a finite interval with lo <= hi",
            )?;
            if positive {
                check(range.lo > 0.0, key, "lower bound must be positive")?;
            } else {
                check(range.lo >= 0.0, key, "lower bound must be non-negative")?;
            }
        }

        let f = &self.fresco;
        check(
            0.0 < f.xi_th && f.xi_th < f.xi_alarm && f.xi_alarm <= 1.0,
            "fresco.xi_th",
            "need 0 < xi_th < xi_alarm <= 1",
        )?;
        check((0.0..=1.0).contains(&f.s_min), "fresco.s_min", "must lie in [0, 1]")?;
        check(f.horizon >= 1, "fresco.horizon", "must be at least 1")?;
        check(f.window >= 1, "fresco.window", "must be at least 1")?;
        check(f.beta.iter().all(|w| *w >= 0.0), "fresco.beta", "weights must be >= 0")?;
        check(f.nu.iter().all(|w| *w > 0.0), "fresco.nu", "weights must be > 0")?;
        check(f.eta.iter().all(|w| *w >= 0.0), "fresco.eta", "weights must be >= 0")?;
        check(f.epsilon > 0.0, "fresco.epsilon", "must be positive")?;

        let e = &self.energy;
        for (key, v) in [
            ("energy.kappa_b", e.kappa_b),
            ("energy.kappa_f", e.kappa_f),
            ("energy.kappa_sync", e.kappa_sync),
            ("energy.e_min", e.e_min),
            ("energy.serving_floor", e.serving_floor),
        ] {
            check(v.is_finite() && v >= 0.0, key, "must be finite and >= 0")?;
        }

        let rd = &self.radio;
        check(rd.pathloss_exponent >= 2.0, "radio.pathloss_exponent", "must be >= 2")?;
        check(rd.shadowing_sigma_db >= 0.0, "radio.shadowing_sigma_db", "must be >= 0")?;
        check(rd.b_link > 0.0, "radio.b_link", "must be positive")?;
        for (key, v) in [
            ("radio.reference_gain_db", rd.reference_gain_db),
            ("radio.noise_dbm", rd.noise_dbm),
            ("radio.tx_power_mu_dbm", rd.tx_power_mu_dbm),
            ("radio.tx_power_uav_dbm", rd.tx_power_uav_dbm),
            ("radio.snr_min_db", rd.snr_min_db),
        ] {
            check(v.is_finite(), key, "must be finite")?;
        }

        let ft = &self.features;
        for (key, v) in [
            ("features.battery_max", ft.battery_max),
            ("features.snr_db_max", ft.snr_db_max),
            ("features.battery_margin_scale", ft.battery_margin_scale),
            ("features.snr_margin_db_scale", ft.snr_margin_db_scale),
        ] {
            check(v > 0.0, key, "must be positive")?;
        }

        let t = &self.train;
        check(t.batch_size >= 1, "train.batch_size", "must be at least 1")?;
        check(t.hidden >= 1, "train.hidden", "must be at least 1")?;
        check(t.learning_rate >= 0.0, "train.learning_rate", "must be >= 0")?;
        check(t.init_scale >= 0.0, "train.init_scale", "must be >= 0")?;
        Ok(())
    }
}

fn check(ok: bool, key: &str, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(FrescoError::config(key, reason))
    }
}

fn unknown_key(msg: &str) -> Option<String> {
    let rest = msg.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ScenarioConfig::default().validate().unwrap();
        for s in Scale::ALL {
            ScenarioConfig::for_scale(s).validate().unwrap();
        }
    }

    #[test]
    fn s1_role_split() {
        let cfg = ScenarioConfig::for_scale(Scale::S1);
        assert_eq!(cfg.num_candidates(), 4);
        assert_eq!(cfg.num_serving(), 8);
    }

    #[test]
    fn partial_file_falls_back_to_defaults() {
        let cfg = ScenarioConfig::from_toml_str("[fresco]\nxi_th = 0.05\n").unwrap();
        assert_eq!(cfg.fresco.xi_th, 0.05);
        assert_eq!(cfg.fresco.xi_alarm, 0.16);
        assert_eq!(cfg.scenario.num_mus, 48);
    }

    #[test]
    fn dotted_keys_accepted() {
        let cfg = ScenarioConfig::from_toml_str("radio.b_link = 12.0\nscenario.slots = 10\n").unwrap();
        assert_eq!(cfg.radio.b_link, 12.0);
        assert_eq!(cfg.scenario.slots, 10);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ScenarioConfig::from_toml_str("[radio]\nbogus_gain = 3\n").unwrap_err();
        match err {
            FrescoError::Config { key, .. } => assert_eq!(key, "bogus_gain"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn threshold_order_enforced() {
        let err = ScenarioConfig::from_toml_str("[fresco]\nxi_th = 0.3\nxi_alarm = 0.2\n").unwrap_err();
        assert!(matches!(err, FrescoError::Config { ref key, .. } if key == "fresco.xi_th"));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ScenarioConfig::for_scale(Scale::S3);
        let back = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
    }
}

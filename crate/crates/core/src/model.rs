//! Domain records, scenario generation and per-slot mission bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Range, ScenarioConfig};
use crate::error::{FrescoError, Result};
use crate::geo::LinkSnapshot;
use crate::template::ReservationTemplate;

pub type MissionId = usize;
pub type UavId = usize;

/// Number of features per observation row.
pub const FEATURES: usize = 5;
pub type FeatureRow = [f64; FEATURES];

const POLICY_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissionStatus {
    Active,
    Interrupted,
    Completed,
    Failed,
}

/// Position plus random-waypoint state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mover {
    pub pos: [f64; 3],
    pub waypoint: [f64; 3],
    /// Current travel speed toward the waypoint (m/s).
    pub speed: f64,
}

impl Mover {
    pub fn distance_to(&self, other: &Mover) -> f64 {
        distance(&self.pos, &other.pos)
    }
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Resources a serving UAV currently dedicates to a mission.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// Access bandwidth (MHz).
    pub bandwidth: f64,
    /// Computation (Gcycles/s).
    pub compute: f64,
    /// Whether the resources came out of the UAV's spare budget and must be
    /// handed back when the mission ends.
    pub from_budget: bool,
}

/// Reactive re-association in progress for an interrupted mission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub uav: UavId,
    pub template: ReservationTemplate,
    /// Sync rate of the from-scratch context transfer (Mbps).
    pub sync_rate: f64,
    pub s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissionState {
    pub id: MissionId,
    /// Remaining input data (Mb).
    pub d_rem: f64,
    /// Remaining computation (Gcycles).
    pub c_rem: f64,
    pub d_total: f64,
    pub c_total: f64,
    /// Maximum tolerable post-takeover completion delay (s).
    pub t_max: f64,
    /// Service-context size (Mb), constant over the mission's lifetime.
    pub zeta: f64,
    pub status: MissionStatus,
    pub interrupted_slots: u32,
    pub completed_at: Option<u32>,
    pub alloc: Allocation,
    /// Residual context-transfer time still owed after a takeover (s).
    pub pending_sync_s: f64,
    pub recovery: Option<Recovery>,
    /// Slot at which the current interruption began.
    pub interrupted_since: Option<u32>,
    pub mu: Mover,
}

impl MissionState {
    pub fn is_active(&self) -> bool {
        self.status == MissionStatus::Active
    }

    /// Fraction of the workload still outstanding, in [0, 1].
    pub fn remaining_fraction(&self) -> f64 {
        let d = if self.d_total > 0.0 { self.d_rem / self.d_total } else { 0.0 };
        let c = if self.c_total > 0.0 { self.c_rem / self.c_total } else { 0.0 };
        (0.5 * (d + c)).clamp(0.0, 1.0)
    }
}

/// A UAV in either role. Serving UAVs use `served`; candidates expose
/// `b_ava`/`f_ava` for reservations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UavState {
    pub id: UavId,
    /// Residual battery (kJ).
    pub energy: f64,
    pub mover: Mover,
    pub v_max: f64,
    /// Baseline drain (kJ/slot).
    pub drain_rate: f64,
    /// Spare access bandwidth (MHz).
    pub b_ava: f64,
    /// Spare computation (Gcycles/s).
    pub f_ava: f64,
    pub served: BTreeSet<MissionId>,
    pub degraded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServingPair {
    pub mission_id: MissionId,
    pub serving_uav_id: UavId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReservationState {
    pub mission_id: MissionId,
    pub serving_uav_id: UavId,
    pub candidate_uav_id: UavId,
    pub template: ReservationTemplate,
    /// Link conditions the template was sized for.
    pub links: LinkSnapshot,
    /// Context synchronization ratio.
    pub s: f64,
    pub active: bool,
    pub formed_at: u32,
    /// Consecutive slots the mission has spent outside the high-risk set.
    pub low_risk_streak: u32,
    pub welfare: f64,
}

/// Limits copied from the config so a world can be checked on its own.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldLimits {
    pub b_link: f64,
    pub e_min: f64,
    pub serving_floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub t: u32,
    pub seed: u64,
    pub missions: Vec<MissionState>,
    pub uavs: Vec<UavState>,
    pub serving: BTreeSet<UavId>,
    pub candidates: BTreeSet<UavId>,
    /// Current serving association, one entry per active mission.
    pub pairs: BTreeMap<MissionId, UavId>,
    pub reservations: Vec<ReservationState>,
    /// MU→serving SNR observed this slot.
    pub mu_snr: BTreeMap<MissionId, f64>,
    /// Recent feature rows per mission, oldest first.
    pub history: BTreeMap<MissionId, Vec<FeatureRow>>,
    pub limits: WorldLimits,
    /// Drives mobility only, so every policy sees the same trajectories.
    pub rng: ChaCha8Rng,
    /// Drives policy-side randomness (the Random baseline).
    pub policy_rng: ChaCha8Rng,
}

impl WorldState {
    pub fn pairs(&self) -> impl Iterator<Item = ServingPair> + '_ {
        self.pairs.iter().map(|(&m, &u)| ServingPair {
            mission_id: m,
            serving_uav_id: u,
        })
    }

    pub fn active_reservation(&self, mission: MissionId) -> Option<usize> {
        self.reservations
            .iter()
            .position(|r| r.active && r.mission_id == mission)
    }

    /// Sync bandwidth still free on the serving–candidate link.
    pub fn link_residual(&self, serving: UavId, candidate: UavId) -> f64 {
        let used: f64 = self
            .reservations
            .iter()
            .filter(|r| r.active && r.serving_uav_id == serving && r.candidate_uav_id == candidate)
            .map(|r| r.template.b_syn_min)
            .sum();
        self.limits.b_link - used
    }

    /// Reservation energy already committed per slot on a UAV.
    pub fn committed_reservation_energy(&self, uav: UavId) -> f64 {
        self.reservations
            .iter()
            .filter(|r| r.active && r.candidate_uav_id == uav)
            .map(|r| r.template.e_res)
            .sum()
    }

    pub fn to_snapshot(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| FrescoError::parse("world snapshot", e))
    }
}

fn sample(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    if r.lo >= r.hi {
        r.lo
    } else {
        rng.random_range(r.lo..=r.hi)
    }
}

pub(crate) fn random_point(rng: &mut ChaCha8Rng, side: f64, z: f64) -> [f64; 3] {
    [rng.random_range(0.0..=side), rng.random_range(0.0..=side), z]
}

/// Builds the initial world for `(config, seed)`.
///
/// UAV ids `0..num_serving` start in the serving role, the rest are
/// candidates. Missions are associated in id order to the nearest serving UAV
/// that still has room under the per-UAV cap `ceil(num_mus / num_serving)`.
pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<WorldState> {
    config.validate()?;
    let sc = &config.scenario;
    let rg = &config.ranges;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_srv = config.num_serving();
    let cap = sc.num_mus.div_ceil(n_srv);

    let mut uavs = Vec::with_capacity(sc.num_uavs);
    let mut pools = Vec::with_capacity(n_srv);
    for id in 0..sc.num_uavs {
        let serving = id < n_srv;
        let pos = random_point(&mut rng, sc.area_side, sc.uav_altitude);
        let waypoint = random_point(&mut rng, sc.area_side, sc.uav_altitude);
        let v_max = sample(&mut rng, rg.v_max);
        let speed = rng.random_range(0.0..=v_max.min(sc.uav_speed_max));
        let energy = sample(&mut rng, if serving { rg.e_serving } else { rg.e_candidate });
        let drain_rate = sample(&mut rng, rg.drain_rate);
        let (b_ava, f_ava) = if serving {
            pools.push((
                sample(&mut rng, rg.serving_bandwidth),
                sample(&mut rng, rg.serving_compute),
            ));
            (0.0, 0.0)
        } else {
            (sample(&mut rng, rg.b_ava), sample(&mut rng, rg.f_ava))
        };
        uavs.push(UavState {
            id,
            energy,
            mover: Mover { pos, waypoint, speed },
            v_max,
            drain_rate,
            b_ava,
            f_ava,
            served: BTreeSet::new(),
            degraded: false,
        });
    }

    let mut missions = Vec::with_capacity(sc.num_mus);
    let mut pairs = BTreeMap::new();
    for id in 0..sc.num_mus {
        let d = sample(&mut rng, rg.d_rem);
        let c = sample(&mut rng, rg.c_rem);
        let zeta = sample(&mut rng, rg.zeta);
        let t_max = sample(&mut rng, rg.t_max);
        let pos = random_point(&mut rng, sc.area_side, 0.0);
        let waypoint = random_point(&mut rng, sc.area_side, 0.0);
        let speed = rng.random_range(0.0..=sc.mu_speed_max);
        let mu = Mover { pos, waypoint, speed };

        let serving = (0..n_srv)
            .filter(|&j| uavs[j].served.len() < cap)
            .min_by(|&a, &b| {
                let da = distance(&uavs[a].mover.pos, &pos);
                let db = distance(&uavs[b].mover.pos, &pos);
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .ok_or_else(|| FrescoError::Scenario {
                mission: id,
                reason: "no serving UAV has spare capacity".into(),
            })?;
        uavs[serving].served.insert(id);
        pairs.insert(id, serving);
        let (pool_b, pool_f) = pools[serving];
        missions.push(MissionState {
            id,
            d_rem: d,
            c_rem: c,
            d_total: d,
            c_total: c,
            t_max,
            zeta,
            status: if d == 0.0 && c == 0.0 {
                MissionStatus::Completed
            } else {
                MissionStatus::Active
            },
            interrupted_slots: 0,
            completed_at: None,
            alloc: Allocation {
                bandwidth: pool_b / cap as f64,
                compute: pool_f / cap as f64,
                from_budget: false,
            },
            pending_sync_s: 0.0,
            recovery: None,
            interrupted_since: None,
            mu,
        });
    }

    Ok(WorldState {
        t: 0,
        seed,
        missions,
        uavs,
        serving: (0..n_srv).collect(),
        candidates: (n_srv..sc.num_uavs).collect(),
        pairs,
        reservations: Vec::new(),
        mu_snr: BTreeMap::new(),
        history: BTreeMap::new(),
        limits: WorldLimits {
            b_link: config.radio.b_link,
            e_min: config.energy.e_min,
            serving_floor: config.energy.serving_floor,
        },
        rng,
        policy_rng: ChaCha8Rng::seed_from_u64(seed ^ POLICY_STREAM),
    })
}

/// Progresses one mission by one slot of service.
///
/// Computation only runs on data that has already been delivered: the
/// processed amount never exceeds `c_total * delivered / d_total`.
pub fn advance_mission(m: &MissionState, access_rate: f64, compute: f64, tau: f64) -> Result<MissionState> {
    if !(access_rate >= 0.0 && compute >= 0.0 && tau >= 0.0) {
        return Err(FrescoError::Argument(format!(
            "rates must be non-negative (access {access_rate}, compute {compute}, tau {tau})"
        )));
    }
    if m.status != MissionStatus::Active {
        return Err(FrescoError::Argument(format!("mission {} is not active", m.id)));
    }
    let mut next = m.clone();
    next.d_rem = (m.d_rem - access_rate * tau).max(0.0);
    let processable = if next.d_rem == 0.0 || m.d_total <= 0.0 {
        m.c_total
    } else {
        m.c_total * (m.d_total - next.d_rem) / m.d_total
    };
    let processed = (m.c_total - m.c_rem + compute * tau).min(processable);
    next.c_rem = (m.c_total - processed).max(0.0);
    if next.d_rem == 0.0 && next.c_rem <= TOL {
        next.c_rem = 0.0;
        next.status = MissionStatus::Completed;
    }
    Ok(next)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    RolePartition { uav: UavId },
    RoleMissing { uav: UavId },
    MissionField { mission: MissionId, field: &'static str },
    CompletionMismatch { mission: MissionId },
    UavField { uav: UavId, field: &'static str },
    MissingPair { mission: MissionId },
    StalePair { mission: MissionId },
    PairNotServing { mission: MissionId, uav: UavId },
    ServedSetMismatch { uav: UavId },
    DuplicateReservation { mission: MissionId },
    ReservationWithoutPair { mission: MissionId },
    ReservationSelfLoop { mission: MissionId },
    SyncRatio { mission: MissionId },
    LinkCapacity { serving: UavId, candidate: UavId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RolePartition { uav } => write!(f, "UAV {uav} is in both role sets"),
            Violation::RoleMissing { uav } => write!(f, "UAV {uav} is in no role set"),
            Violation::MissionField { mission, field } => {
                write!(f, "mission {mission}: field `{field}` out of range")
            }
            Violation::CompletionMismatch { mission } => {
                write!(f, "mission {mission}: completed status disagrees with remaining work")
            }
            Violation::UavField { uav, field } => write!(f, "UAV {uav}: field `{field}` out of range"),
            Violation::MissingPair { mission } => write!(f, "active mission {mission} has no serving pair"),
            Violation::StalePair { mission } => write!(f, "inactive mission {mission} still has a serving pair"),
            Violation::PairNotServing { mission, uav } => {
                write!(f, "mission {mission} is paired with non-serving UAV {uav}")
            }
            Violation::ServedSetMismatch { uav } => {
                write!(f, "UAV {uav}: served set disagrees with pairs")
            }
            Violation::DuplicateReservation { mission } => {
                write!(f, "mission {mission} holds more than one active reservation (8a)")
            }
            Violation::ReservationWithoutPair { mission } => {
                write!(f, "mission {mission}: reservation does not match its serving pair (8a)")
            }
            Violation::ReservationSelfLoop { mission } => {
                write!(f, "mission {mission}: reservation candidate equals serving UAV")
            }
            Violation::SyncRatio { mission } => write!(f, "mission {mission}: sync ratio outside [0, 1]"),
            Violation::LinkCapacity { serving, candidate } => {
                write!(f, "link {serving}->{candidate} exceeds sync capacity (8d)")
            }
        }
    }
}

/// Checks every structural invariant of a world; never fails, only reports.
pub fn validate_world(w: &WorldState) -> Vec<Violation> {
    let mut out = Vec::new();
    for u in &w.uavs {
        let s = w.serving.contains(&u.id);
        let c = w.candidates.contains(&u.id);
        if s && c {
            out.push(Violation::RolePartition { uav: u.id });
        } else if !s && !c {
            out.push(Violation::RoleMissing { uav: u.id });
        }
        for (field, ok) in [
            ("energy", u.energy >= 0.0),
            ("b_ava", u.b_ava >= -TOL),
            ("f_ava", u.f_ava >= -TOL),
            ("v_max", u.v_max > 0.0),
        ] {
            if !ok {
                out.push(Violation::UavField { uav: u.id, field });
            }
        }
    }

    for m in &w.missions {
        for (field, ok) in [
            ("d_rem", m.d_rem >= 0.0),
            ("c_rem", m.c_rem >= 0.0),
            ("zeta", m.zeta > 0.0),
            ("t_max", m.t_max > 0.0),
        ] {
            if !ok {
                out.push(Violation::MissionField { mission: m.id, field });
            }
        }
        let done = m.d_rem == 0.0 && m.c_rem == 0.0;
        if (m.status == MissionStatus::Completed) != done {
            out.push(Violation::CompletionMismatch { mission: m.id });
        }
        match (m.is_active(), w.pairs.get(&m.id)) {
            (true, None) => out.push(Violation::MissingPair { mission: m.id }),
            (false, Some(_)) => out.push(Violation::StalePair { mission: m.id }),
            (true, Some(&u)) if !w.serving.contains(&u) => {
                out.push(Violation::PairNotServing { mission: m.id, uav: u })
            }
            _ => {}
        }
    }

    for u in &w.uavs {
        let expected: BTreeSet<MissionId> = w
            .pairs
            .iter()
            .filter(|(_, &j)| j == u.id)
            .map(|(&m, _)| m)
            .collect();
        if expected != u.served {
            out.push(Violation::ServedSetMismatch { uav: u.id });
        }
    }

    let mut seen = BTreeSet::new();
    let mut links: BTreeMap<(UavId, UavId), f64> = BTreeMap::new();
    for r in w.reservations.iter().filter(|r| r.active) {
        if !seen.insert(r.mission_id) {
            out.push(Violation::DuplicateReservation { mission: r.mission_id });
        }
        if w.pairs.get(&r.mission_id) != Some(&r.serving_uav_id) {
            out.push(Violation::ReservationWithoutPair { mission: r.mission_id });
        }
        if r.candidate_uav_id == r.serving_uav_id {
            out.push(Violation::ReservationSelfLoop { mission: r.mission_id });
        }
        if !(0.0..=1.0).contains(&r.s) {
            out.push(Violation::SyncRatio { mission: r.mission_id });
        }
        *links.entry((r.serving_uav_id, r.candidate_uav_id)).or_default() += r.template.b_syn_min;
    }
    for ((j, k), used) in links {
        if used > w.limits.b_link * (1.0 + TOL) {
            out.push(Violation::LinkCapacity { serving: j, candidate: k });
        }
    }
    out
}

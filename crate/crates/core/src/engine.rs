//! The per-slot simulation loop and the six policies.
//!
//! Slot order: observe, decide (predict, maintain reservations, select
//! successors), synchronize, recover interrupted missions, handle alarms,
//! then progress missions, drain energy and move.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::ScenarioConfig;
use crate::error::{FrescoError, Result};
use crate::geo::{access_rate, step_mobility, sustainable, sync_rate, RadioParams, ShadowField};
use crate::matching::{run_matching, CandidateCapacity, MatchingInstance, PairEntry};
use crate::model::{
    advance_mission, generate_scenario, validate_world, Allocation, FeatureRow, MissionId, MissionStatus, Recovery,
    ReservationState, ServingPair, UavId, WorldState,
};
use crate::risk::{
    extract_features, heuristic_risk, high_risk_set, labels_from_status, lstm_forward, observe, Dataset, FeatureNorm,
    LstmParams, PathStatus, Sample,
};
use crate::template::{solve_min_template, takeover_delay, ResourceBox, TemplateRequest};
use crate::utility::{feasible_candidates, preference_set, CandidateBudget, CandidateEvaluation, EvalSettings, PairRequest};

const TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Reactive,
    Random,
    BestChannel,
    BestResource,
    FrescoNopred,
    Fresco,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::Reactive,
        Policy::Random,
        Policy::BestChannel,
        Policy::BestResource,
        Policy::FrescoNopred,
        Policy::Fresco,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Reactive => "reactive",
            Policy::Random => "random",
            Policy::BestChannel => "best_channel",
            Policy::BestResource => "best_resource",
            Policy::FrescoNopred => "fresco_nopred",
            Policy::Fresco => "fresco",
        }
    }

    pub fn parse(s: &str) -> Result<Policy> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| FrescoError::Argument(format!("unknown policy `{s}`")))
    }

    pub fn needs_params(self) -> bool {
        self == Policy::Fresco
    }

    pub fn reserves(self) -> bool {
        self != Policy::Reactive
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Slot boundary marker.
    Slot,
    Predict,
    Reserve,
    Sync,
    Alarm,
    Takeover,
    Fallback,
    Interrupt,
    Recover,
    Complete,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Slot => "slot",
            EventKind::Predict => "predict",
            EventKind::Reserve => "reserve",
            EventKind::Sync => "sync",
            EventKind::Alarm => "alarm",
            EventKind::Takeover => "takeover",
            EventKind::Fallback => "fallback",
            EventKind::Interrupt => "interrupt",
            EventKind::Recover => "recover",
            EventKind::Complete => "complete",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotEvent {
    pub t: u32,
    pub kind: EventKind,
    /// `-1` for slot markers.
    pub mission: i64,
    pub serving: Option<UavId>,
    pub candidate: Option<UavId>,
    pub detail: Map<String, Value>,
}

impl SlotEvent {
    fn new(t: u32, kind: EventKind, mission: Option<MissionId>, serving: Option<UavId>, candidate: Option<UavId>, detail: Value) -> Self {
        SlotEvent {
            t,
            kind,
            mission: mission.map_or(-1, |m| m as i64),
            serving,
            candidate,
            detail: match detail {
                Value::Object(m) => m,
                _ => Map::new(),
            },
        }
    }

    pub fn num(&self, key: &str) -> Option<f64> {
        self.detail.get(key).and_then(Value::as_f64)
    }

    pub fn text(&self, key: &str) -> Option<&str> {
        self.detail.get(key).and_then(Value::as_str)
    }

    pub fn mission_id(&self) -> Option<MissionId> {
        usize::try_from(self.mission).ok()
    }
}

/// Context-sync update: `s' = min(1, s + z·R·τ/ζ)` with `z = r.active`.
pub fn update_sync(r: &ReservationState, rate: f64, tau: f64, zeta: f64) -> ReservationState {
    let mut next = r.clone();
    if r.active {
        next.s = (r.s + rate * tau / zeta).min(1.0);
    }
    next
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOptions {
    /// Measure decision-round wall-clock time. Off keeps outputs byte-stable.
    pub timing: bool,
    /// Keep per-slot feature windows and path status for label generation.
    pub record_windows: bool,
    /// Run the conservation checker after every slot.
    pub check_invariants: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub events: Vec<SlotEvent>,
    pub world: WorldState,
    /// Decision-round wall-clock per slot (ms); zeros with timing off.
    pub decision_ms: Vec<f64>,
    /// Path status per mission per slot.
    pub path_status: BTreeMap<MissionId, Vec<PathStatus>>,
    /// Feature window per (slot, mission), when recorded.
    pub windows: BTreeMap<(u32, MissionId), Vec<FeatureRow>>,
    /// Conservation violations, when checked.
    pub violations: Vec<String>,
}

impl Episode {
    pub fn new(world: WorldState) -> Self {
        Episode {
            events: Vec::new(),
            world,
            decision_ms: Vec::new(),
            path_status: BTreeMap::new(),
            windows: BTreeMap::new(),
            violations: Vec::new(),
        }
    }
}

/// Per-UAV starting budgets, used by the conservation check.
#[derive(Clone, Debug)]
struct BudgetLedger {
    b: Vec<f64>,
    f: Vec<f64>,
}

pub struct Engine<'a> {
    pub cfg: &'a ScenarioConfig,
    pub policy: Policy,
    pub lstm: Option<&'a LstmParams>,
    pub radio: RadioParams,
    pub norm: FeatureNorm,
    pub shadow: ShadowField,
    pub settings: EvalSettings,
    pub opts: EpisodeOptions,
}

fn recovery_bandwidth(r: &Recovery) -> f64 {
    r.template.b_syn_min.max(r.template.b_acc_min)
}

impl<'a> Engine<'a> {
    pub fn new(cfg: &'a ScenarioConfig, seed: u64, policy: Policy, lstm: Option<&'a LstmParams>, opts: EpisodeOptions) -> Result<Self> {
        if policy.needs_params() && lstm.is_none() {
            return Err(FrescoError::Argument(format!("policy `{policy}` requires predictor parameters")));
        }
        if let Some(p) = lstm {
            p.check_shape()?;
        }
        Ok(Engine {
            cfg,
            policy,
            lstm,
            radio: RadioParams::from_config(cfg),
            norm: FeatureNorm::from_config(cfg),
            shadow: ShadowField { seed },
            settings: EvalSettings::from_config(cfg),
            opts,
        })
    }

    fn tau(&self) -> f64 {
        self.cfg.scenario.tau
    }

    /// Refreshes MU-link SNRs, degradation flags and feature histories.
    fn observe_slot(&self, w: &mut WorldState) {
        w.mu_snr.clear();
        let pairs: Vec<(MissionId, UavId)> = w.pairs.iter().map(|(&m, &u)| (m, u)).collect();
        for &(m, u) in &pairs {
            let (g, _) = self.shadow.mu_uav(w, &self.radio, m, u);
            w.mu_snr.insert(m, g);
        }
        for u in &mut w.uavs {
            u.degraded = u.energy < w.limits.serving_floor;
        }
        let window = self.cfg.fresco.window;
        for &(m, _) in &pairs {
            if let Some(row) = observe(w, m, &self.norm) {
                let h = w.history.entry(m).or_default();
                h.push(row);
                if h.len() > window {
                    h.remove(0);
                }
            }
        }
        w.history.retain(|m, _| w.pairs.contains_key(m));
    }

    fn risks(&self, w: &WorldState) -> Result<BTreeMap<MissionId, f64>> {
        let mut out = BTreeMap::new();
        if self.policy == Policy::Reactive {
            return Ok(out);
        }
        for &m in w.pairs.keys() {
            let r = match (self.policy, self.lstm) {
                (Policy::Fresco, Some(p)) => {
                    let x = extract_features(w, m, self.cfg.fresco.window, &self.norm)?;
                    lstm_forward(p, &x)?
                }
                _ => heuristic_risk(w, m, &self.norm),
            };
            out.insert(m, r);
        }
        Ok(out)
    }

    fn release(&self, w: &mut WorldState, idx: usize, reason: &str, events: &mut Vec<SlotEvent>) {
        let r = &mut w.reservations[idx];
        if !r.active {
            return;
        }
        r.active = false;
        let (k, b, f) = (r.candidate_uav_id, r.template.b_acc_min, r.template.f_min);
        events.push(SlotEvent::new(
            w.t,
            EventKind::Reserve,
            Some(r.mission_id),
            Some(r.serving_uav_id),
            Some(k),
            json!({"action": "release", "reason": reason, "s": r.s}),
        ));
        w.uavs[k].b_ava += b;
        w.uavs[k].f_ava += f;
    }

    fn release_hosted(&self, w: &mut WorldState, uav: UavId, keep: &BTreeSet<MissionId>, reason: &str, events: &mut Vec<SlotEvent>) {
        for idx in 0..w.reservations.len() {
            let r = &w.reservations[idx];
            if r.active && r.candidate_uav_id == uav && !keep.contains(&r.mission_id) {
                self.release(w, idx, reason, events);
            }
        }
    }

    fn release_mission(&self, w: &mut WorldState, m: MissionId, reason: &str, events: &mut Vec<SlotEvent>) {
        if let Some(idx) = w.active_reservation(m) {
            self.release(w, idx, reason, events);
        }
    }

    /// Moves a candidate into the serving role, dropping what it hosted
    /// except the reservations in `keep`.
    fn promote(&self, w: &mut WorldState, uav: UavId, keep: &BTreeSet<MissionId>, events: &mut Vec<SlotEvent>) {
        if w.candidates.remove(&uav) {
            w.serving.insert(uav);
            self.release_hosted(w, uav, keep, "role_change", events);
        }
    }

    fn maintain_reservations(&self, w: &mut WorldState, high: &BTreeSet<MissionId>, events: &mut Vec<SlotEvent>) {
        let k_release = self.cfg.fresco.release_after;
        for idx in 0..w.reservations.len() {
            let r = &w.reservations[idx];
            if !r.active {
                continue;
            }
            let (m, j, k) = (r.mission_id, r.serving_uav_id, r.candidate_uav_id);
            let stale = !w.missions[m].is_active() || w.pairs.get(&m) != Some(&j) || !w.candidates.contains(&k);
            let energy_short = w.uavs[k].energy - w.committed_reservation_energy(k) < w.limits.e_min;
            let reason = if stale {
                Some("stale")
            } else if energy_short {
                Some("energy")
            } else {
                let r = &mut w.reservations[idx];
                r.low_risk_streak = if high.contains(&m) { 0 } else { r.low_risk_streak + 1 };
                (r.low_risk_streak >= k_release).then_some("low_risk")
            };
            if let Some(reason) = reason {
                self.release(w, idx, reason, events);
            }
        }
    }

    fn pair_request(&self, w: &WorldState, m: MissionId, risk: f64) -> PairRequest {
        let ms = &w.missions[m];
        PairRequest {
            mission_id: m,
            serving_id: w.pairs[&m],
            risk,
            s: 0.0,
            zeta: ms.zeta,
            d_rem: ms.d_rem,
            c_rem: ms.c_rem,
            t_max: ms.t_max,
        }
    }

    fn budgets(&self, w: &WorldState, j: UavId) -> Vec<CandidateBudget> {
        w.candidates
            .iter()
            .filter(|&&k| k != j)
            .map(|&k| {
                let u = &w.uavs[k];
                CandidateBudget {
                    id: k,
                    b_ava: u.b_ava,
                    f_ava: u.f_ava,
                    energy: u.energy,
                    committed_energy: w.committed_reservation_energy(k),
                    link_residual: w.link_residual(j, k),
                }
            })
            .collect()
    }

    fn evaluate(&self, w: &WorldState, req: &PairRequest, budgets: &[CandidateBudget]) -> Result<Vec<CandidateEvaluation>> {
        let with_links: Vec<_> = budgets
            .iter()
            .map(|b| (*b, self.shadow.snapshot(w, &self.radio, req.mission_id, req.serving_id, b.id)))
            .collect();
        feasible_candidates(req, &with_links, &self.settings)
    }

    fn form(&self, w: &mut WorldState, e: &CandidateEvaluation, events: &mut Vec<SlotEvent>) {
        let k = e.candidate_id;
        w.uavs[k].b_ava -= e.template.b_acc_min;
        w.uavs[k].f_ava -= e.template.f_min;
        w.reservations.push(ReservationState {
            mission_id: e.mission_id,
            serving_uav_id: e.serving_id,
            candidate_uav_id: k,
            template: e.template,
            links: e.links,
            s: 0.0,
            active: true,
            formed_at: w.t,
            low_risk_streak: 0,
            welfare: e.welfare,
        });
        events.push(SlotEvent::new(
            w.t,
            EventKind::Reserve,
            Some(e.mission_id),
            Some(e.serving_id),
            Some(k),
            json!({
                "action": "form",
                "risk": e.risk,
                "u_mission": e.u_mission,
                "u_uav": e.u_uav,
                "welfare": e.welfare,
                "b_syn": e.template.b_syn_min,
                "b_acc": e.template.b_acc_min,
                "f": e.template.f_min,
                "e_res": e.template.e_res,
                "d_tk": e.template.d_tk_min,
            }),
        ));
    }

    fn select_by_matching(&self, w: &mut WorldState, reqs: &[PairRequest], events: &mut Vec<SlotEvent>) -> Result<()> {
        let mut inst = MatchingInstance::default();
        let mut servers = BTreeSet::new();
        for req in reqs {
            let evals = self.evaluate(w, req, &self.budgets(w, req.serving_id))?;
            servers.insert(req.serving_id);
            inst.pairs.push(PairEntry { mission_id: req.mission_id, serving_id: req.serving_id, prefs: preference_set(&evals) });
        }
        for &k in &w.candidates {
            let u = &w.uavs[k];
            inst.candidates.push(CandidateCapacity {
                id: k,
                b_ava: u.b_ava,
                f_ava: u.f_ava,
                energy_headroom: u.energy - w.committed_reservation_energy(k) - w.limits.e_min,
                link_residual: servers.iter().map(|&j| (j, w.link_residual(j, k))).collect(),
            });
        }
        let st = run_matching(&inst)?;
        for p in &inst.pairs {
            if let Some(k) = st.mu[&p.mission_id] {
                let e = *p.eval_for(k).expect("matched within preferences");
                self.form(w, &e, events);
            }
        }
        Ok(())
    }

    fn select_greedy(&self, w: &mut WorldState, reqs: &[PairRequest], events: &mut Vec<SlotEvent>) -> Result<()> {
        let mut order: Vec<&PairRequest> = reqs.iter().collect();
        order.sort_by(|a, b| b.risk.total_cmp(&a.risk).then(a.mission_id.cmp(&b.mission_id)));
        let b_hi = self.cfg.ranges.b_ava.hi.max(TOL);
        let f_hi = self.cfg.ranges.f_ava.hi.max(TOL);
        for req in order {
            // budgets are read fresh, so earlier picks this slot are already deducted
            let budgets = self.budgets(w, req.serving_id);
            let evals = self.evaluate(w, req, &budgets)?;
            if evals.is_empty() {
                continue;
            }
            let pick = match self.policy {
                Policy::BestChannel => evals
                    .iter()
                    .max_by(|a, b| {
                        a.links.snr_mu_candidate.total_cmp(&b.links.snr_mu_candidate).then(b.candidate_id.cmp(&a.candidate_id))
                    })
                    .copied(),
                Policy::BestResource => {
                    let score = |e: &CandidateEvaluation| {
                        let u = &w.uavs[e.candidate_id];
                        u.b_ava / b_hi + u.f_ava / f_hi
                    };
                    evals
                        .iter()
                        .max_by(|a, b| score(a).total_cmp(&score(b)).then(b.candidate_id.cmp(&a.candidate_id)))
                        .copied()
                }
                _ => {
                    let i = w.policy_rng.random_range(0..evals.len());
                    Some(evals[i])
                }
            };
            if let Some(e) = pick {
                self.form(w, &e, events);
            }
        }
        Ok(())
    }

    fn decide(&self, w: &mut WorldState, events: &mut Vec<SlotEvent>) -> Result<BTreeMap<MissionId, f64>> {
        let risks = self.risks(w)?;
        for (&m, &r) in &risks {
            events.push(SlotEvent::new(w.t, EventKind::Predict, Some(m), w.pairs.get(&m).copied(), None, json!({"risk": r})));
        }
        if !self.policy.reserves() {
            return Ok(risks);
        }
        let high = high_risk_set(&risks, self.cfg.fresco.xi_th);
        self.maintain_reservations(w, &high, events);
        let reqs: Vec<PairRequest> = high
            .iter()
            .filter(|&&m| w.active_reservation(m).is_none())
            .map(|&m| self.pair_request(w, m, risks[&m]))
            .collect();
        if reqs.is_empty() {
            return Ok(risks);
        }
        match self.policy {
            Policy::Fresco | Policy::FrescoNopred => self.select_by_matching(w, &reqs, events)?,
            _ => self.select_greedy(w, &reqs, events)?,
        }
        Ok(risks)
    }

    fn sync_reservations(&self, w: &mut WorldState, events: &mut Vec<SlotEvent>) -> Result<()> {
        let tau = self.tau();
        for idx in 0..w.reservations.len() {
            let r = &w.reservations[idx];
            if !r.active {
                continue;
            }
            let zeta = w.missions[r.mission_id].zeta;
            let rate = sync_rate(r.template.b_syn_min, r.links.snr_serving_candidate)?;
            let next = update_sync(r, rate, tau, zeta);
            let ds = next.s - r.s;
            let (j, k, m, e_res) = (r.serving_uav_id, r.candidate_uav_id, r.mission_id, r.template.e_res);
            let sync_energy = self.cfg.energy.kappa_sync * zeta * ds;
            w.uavs[k].energy = (w.uavs[k].energy - e_res).max(0.0);
            w.uavs[j].energy = (w.uavs[j].energy - sync_energy).max(0.0);
            w.reservations[idx] = next;
            events.push(SlotEvent::new(
                w.t,
                EventKind::Sync,
                Some(m),
                Some(j),
                Some(k),
                json!({"s": w.reservations[idx].s, "rate": rate, "energy": e_res + sync_energy}),
            ));
        }
        Ok(())
    }

    fn activate_recovered(&self, w: &mut WorldState, m: MissionId, events: &mut Vec<SlotEvent>) {
        let rec = w.missions[m].recovery.take().expect("recovering");
        let u = rec.uav;
        let since = w.missions[m].interrupted_since.take().unwrap_or(w.t);
        let ms = &mut w.missions[m];
        ms.status = MissionStatus::Active;
        ms.alloc = Allocation { bandwidth: recovery_bandwidth(&rec), compute: rec.template.f_min, from_budget: true };
        ms.pending_sync_s = 0.0;
        let interrupted_s = f64::from(w.t - since) * self.tau();
        w.pairs.insert(m, u);
        w.uavs[u].served.insert(m);
        let (g, _) = self.shadow.mu_uav(w, &self.radio, m, u);
        w.mu_snr.insert(m, g);
        let ms = &w.missions[m];
        let service = rec.template.d_tk_min.max(
            ms.d_rem / access_rate(ms.alloc.bandwidth, g).unwrap_or(0.0).max(TOL) + ms.c_rem / ms.alloc.compute.max(TOL),
        );
        events.push(SlotEvent::new(
            w.t,
            EventKind::Recover,
            Some(m),
            Some(u),
            None,
            json!({"interrupted_s": interrupted_s, "delay": interrupted_s + service}),
        ));
    }

    fn recover(&self, w: &mut WorldState, events: &mut Vec<SlotEvent>) -> Result<()> {
        let tau = self.tau();
        for m in 0..w.missions.len() {
            let ms = &w.missions[m];
            if ms.status != MissionStatus::Interrupted || ms.interrupted_since.is_some_and(|s| s >= w.t) {
                continue;
            }
            if ms.recovery.is_none() {
                let mut best: Option<(f64, UavId, Recovery)> = None;
                for u in 0..w.uavs.len() {
                    let uav = &w.uavs[u];
                    if uav.energy - w.committed_reservation_energy(u) < w.limits.e_min || uav.degraded {
                        continue;
                    }
                    let (g, _) = self.shadow.mu_uav(w, &self.radio, m, u);
                    if g < self.radio.snr_min || best.as_ref().is_some_and(|b| g <= b.0) {
                        continue;
                    }
                    let req = TemplateRequest {
                        s: 0.0,
                        zeta: ms.zeta,
                        d_rem: ms.d_rem,
                        c_rem: ms.c_rem,
                        t_max: ms.t_max,
                        snr_syn: g,
                        snr_cand: g,
                    };
                    let boxes = ResourceBox { b_link: uav.b_ava.max(0.0), b_ava: uav.b_ava.max(0.0), f_ava: uav.f_ava.max(0.0) };
                    if let Some(t) = solve_min_template(&req, self.settings.weights.nu, &boxes, &self.settings.coeffs, tau)? {
                        let rate = sync_rate(t.b_syn_min, g)?;
                        best = Some((g, u, Recovery { uav: u, template: t, sync_rate: rate, s: 0.0 }));
                    }
                }
                let Some((_, u, rec)) = best else { continue };
                w.uavs[u].b_ava -= recovery_bandwidth(&rec);
                w.uavs[u].f_ava -= rec.template.f_min;
                self.promote(w, u, &BTreeSet::new(), events);
                w.missions[m].recovery = Some(rec);
            }
            let ms = &mut w.missions[m];
            let rec = ms.recovery.as_mut().expect("set above");
            rec.s = (rec.s + rec.sync_rate * tau / ms.zeta).min(1.0);
            if rec.s >= 1.0 {
                self.activate_recovered(w, m, events);
            }
        }
        Ok(())
    }

    /// Hands a mission to its reserved successor.
    pub fn apply_takeover(&self, w: &mut WorldState, idx: usize, events: &mut Vec<SlotEvent>) -> Result<f64> {
        let keep = BTreeSet::from([w.reservations[idx].mission_id]);
        self.takeover_keeping(w, idx, &keep, events)
    }

    fn takeover_keeping(&self, w: &mut WorldState, idx: usize, keep: &BTreeSet<MissionId>, events: &mut Vec<SlotEvent>) -> Result<f64> {
        let r = w.reservations[idx].clone();
        if !r.active || r.s + TOL < self.cfg.fresco.s_min {
            return Err(FrescoError::Contract(format!(
                "takeover of mission {} without a ready reservation (s = {})",
                r.mission_id, r.s
            )));
        }
        let (m, j, k) = (r.mission_id, r.serving_uav_id, r.candidate_uav_id);
        let t = &r.template;
        let delay = takeover_delay(&w.missions[m], r.s, t.b_syn_min, t.b_acc_min, t.f_min, &r.links);
        let rate = sync_rate(t.b_syn_min, r.links.snr_serving_candidate)?;
        let zeta = w.missions[m].zeta;
        w.reservations[idx].active = false;

        let old = w.missions[m].alloc;
        if old.from_budget {
            w.uavs[j].b_ava += old.bandwidth;
            w.uavs[j].f_ava += old.compute;
        }
        w.uavs[j].served.remove(&m);
        self.promote(w, k, keep, events);
        w.uavs[k].served.insert(m);
        w.pairs.insert(m, k);
        let ms = &mut w.missions[m];
        ms.alloc = Allocation { bandwidth: t.b_acc_min, compute: t.f_min, from_budget: true };
        ms.pending_sync_s = if r.s >= 1.0 { 0.0 } else { (1.0 - r.s) * zeta / rate };
        let (g, _) = self.shadow.mu_uav(w, &self.radio, m, k);
        w.mu_snr.insert(m, g);
        w.history.remove(&m);
        events.push(SlotEvent::new(
            w.t,
            EventKind::Takeover,
            Some(m),
            Some(j),
            Some(k),
            json!({"s": r.s, "delay": delay, "t_max": w.missions[m].t_max}),
        ));
        Ok(delay)
    }

    fn fallback(&self, w: &mut WorldState, m: MissionId, events: &mut Vec<SlotEvent>) {
        let j = w.pairs[&m];
        self.release_mission(w, m, "fallback", events);
        let ms = &mut w.missions[m];
        if ms.alloc.from_budget {
            w.uavs[j].b_ava += ms.alloc.bandwidth;
            w.uavs[j].f_ava += ms.alloc.compute;
        }
        ms.alloc = Allocation::default();
        ms.status = MissionStatus::Interrupted;
        ms.interrupted_since = Some(w.t);
        ms.pending_sync_s = 0.0;
        w.uavs[j].served.remove(&m);
        w.pairs.remove(&m);
        w.mu_snr.remove(&m);
        w.history.remove(&m);
        events.push(SlotEvent::new(w.t, EventKind::Fallback, Some(m), Some(j), None, json!({})));
        events.push(SlotEvent::new(w.t, EventKind::Interrupt, Some(m), Some(j), None, json!({})));
    }

    /// Alarm handling: takeover when ready, otherwise maintain while the
    /// path holds, otherwise fall back to reactive recovery. Outcomes are
    /// fixed for the whole slot before any is applied, so a successor taking
    /// over several missions at once keeps all of their reservations.
    pub fn process_alarms(&self, w: &mut WorldState, risks: &BTreeMap<MissionId, f64>, events: &mut Vec<SlotEvent>) -> Result<()> {
        let pairs: Vec<ServingPair> = w.pairs().collect();
        let mut plan: Vec<(MissionId, Option<usize>, &'static str)> = Vec::new();
        for pair in pairs {
            let m = pair.mission_id;
            let risk = risks.get(&m).copied();
            let ok = sustainable(&pair, w, &self.radio);
            if !(risk.is_some_and(|r| r >= self.cfg.fresco.xi_alarm) || !ok) {
                continue;
            }
            let res = w.active_reservation(m);
            let ready = res.is_some_and(|i| w.reservations[i].s + TOL >= self.cfg.fresco.s_min);
            let viable = res.is_some_and(|i| {
                let k = w.reservations[i].candidate_uav_id;
                let (g, _) = self.shadow.mu_uav(w, &self.radio, m, k);
                g >= self.radio.snr_min && w.uavs[k].energy >= w.limits.serving_floor
            });
            let outcome = if ready && viable {
                "takeover"
            } else if ok {
                "maintain"
            } else {
                "fallback"
            };
            let s = res.map(|i| w.reservations[i].s);
            events.push(SlotEvent::new(
                w.t,
                EventKind::Alarm,
                Some(m),
                Some(pair.serving_uav_id),
                res.map(|i| w.reservations[i].candidate_uav_id),
                json!({"risk": risk, "sustainable": ok, "ready": ready, "s": s, "outcome": outcome}),
            ));
            plan.push((m, res, outcome));
        }
        let mut keep: BTreeMap<UavId, BTreeSet<MissionId>> = BTreeMap::new();
        for &(m, res, outcome) in &plan {
            if outcome == "takeover" {
                let k = w.reservations[res.expect("ready")].candidate_uav_id;
                keep.entry(k).or_default().insert(m);
            }
        }
        for (m, res, outcome) in plan {
            match outcome {
                "takeover" => {
                    let idx = res.expect("ready");
                    let k = w.reservations[idx].candidate_uav_id;
                    self.takeover_keeping(w, idx, &keep[&k], events)?;
                }
                "fallback" => self.fallback(w, m, events),
                _ => {}
            }
        }
        Ok(())
    }

    fn progress(&self, w: &mut WorldState, events: &mut Vec<SlotEvent>) -> Result<()> {
        let tau = self.tau();
        let pairs: Vec<(MissionId, UavId)> = w.pairs.iter().map(|(&m, &u)| (m, u)).collect();
        for (m, j) in pairs {
            let ms = &w.missions[m];
            let busy = ms.pending_sync_s.min(tau);
            let frac = if tau > 0.0 { (tau - busy) / tau } else { 0.0 };
            let g = w.mu_snr.get(&m).copied().unwrap_or(0.0);
            let rate = access_rate(ms.alloc.bandwidth, g)?;
            let mut next = advance_mission(ms, rate * frac, ms.alloc.compute * frac, tau)?;
            next.pending_sync_s = (ms.pending_sync_s - tau).max(0.0);
            w.missions[m] = next;
            if w.missions[m].status == MissionStatus::Completed {
                w.missions[m].completed_at = Some(w.t);
                let alloc = w.missions[m].alloc;
                if alloc.from_budget {
                    w.uavs[j].b_ava += alloc.bandwidth;
                    w.uavs[j].f_ava += alloc.compute;
                }
                w.uavs[j].served.remove(&m);
                w.pairs.remove(&m);
                w.history.remove(&m);
                self.release_mission(w, m, "complete", events);
                events.push(SlotEvent::new(w.t, EventKind::Complete, Some(m), Some(j), None, json!({})));
            }
        }
        let kf = self.cfg.energy.kappa_f;
        for u in 0..w.uavs.len() {
            let serve: f64 = w.uavs[u].served.iter().map(|&m| w.missions[m].alloc.compute).sum();
            let uav = &mut w.uavs[u];
            uav.energy = (uav.energy - (uav.drain_rate + kf * serve) * tau).max(0.0);
        }
        for ms in &mut w.missions {
            if ms.status == MissionStatus::Interrupted {
                ms.interrupted_slots += 1;
            }
        }
        Ok(())
    }

    fn path_status(&self, w: &WorldState) -> Vec<PathStatus> {
        w.missions
            .iter()
            .map(|m| match m.status {
                MissionStatus::Active => {
                    let pair = ServingPair { mission_id: m.id, serving_uav_id: w.pairs[&m.id] };
                    if sustainable(&pair, w, &self.radio) {
                        PathStatus::Sustainable
                    } else {
                        PathStatus::Unsustainable
                    }
                }
                MissionStatus::Interrupted => PathStatus::Unsustainable,
                MissionStatus::Completed | MissionStatus::Failed => PathStatus::Done,
            })
            .collect()
    }

    /// One full slot. Returns the decision-round time in ms (0 with timing off).
    pub fn run_slot(&self, w: &mut WorldState, ep: &mut Episode) -> Result<f64> {
        let events = &mut ep.events;
        events.push(SlotEvent::new(w.t, EventKind::Slot, None, None, None, json!({})));
        self.observe_slot(w);
        for (m, st) in self.path_status(w).into_iter().enumerate() {
            ep.path_status.entry(m).or_default().push(st);
            if self.opts.record_windows && st == PathStatus::Sustainable {
                let x = extract_features(w, m, self.cfg.fresco.window, &self.norm)?;
                ep.windows.insert((w.t, m), x);
            }
        }

        let start = self.opts.timing.then(Instant::now);
        let risks = self.decide(w, events)?;
        let ms = start.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3);

        self.sync_reservations(w, events)?;
        self.recover(w, events)?;
        self.process_alarms(w, &risks, events)?;
        self.progress(w, events)?;
        w.reservations.retain(|r| r.active);
        step_mobility(w, self.cfg);
        w.t += 1;
        Ok(ms)
    }
}

fn ledger(w: &WorldState) -> BudgetLedger {
    BudgetLedger { b: w.uavs.iter().map(|u| u.b_ava).collect(), f: w.uavs.iter().map(|u| u.f_ava).collect() }
}

/// Conservation checks between consecutive slot states.
fn check_transition(prev: &WorldState, next: &WorldState, start: &BudgetLedger) -> Vec<String> {
    let t = prev.t;
    let mut out: Vec<String> = validate_world(next).iter().map(|v| format!("t={t}: {v}")).collect();
    for (a, b) in prev.uavs.iter().zip(&next.uavs) {
        if b.energy > a.energy || b.energy < 0.0 {
            out.push(format!("t={t}: UAV {} energy went {} -> {}", a.id, a.energy, b.energy));
        }
    }
    // budget ledger: what a UAV holds plus what it has handed out equals its start
    let mut b = vec![0.0; next.uavs.len()];
    let mut f = vec![0.0; next.uavs.len()];
    for r in next.reservations.iter().filter(|r| r.active) {
        b[r.candidate_uav_id] += r.template.b_acc_min;
        f[r.candidate_uav_id] += r.template.f_min;
        if !next.candidates.contains(&r.candidate_uav_id) {
            out.push(format!("t={t}: reservation for mission {} sits on non-candidate {}", r.mission_id, r.candidate_uav_id));
        }
    }
    for m in &next.missions {
        if m.alloc.from_budget {
            if let Some(&u) = next.pairs.get(&m.id) {
                b[u] += m.alloc.bandwidth;
                f[u] += m.alloc.compute;
            }
        }
        if let Some(rec) = &m.recovery {
            b[rec.uav] += recovery_bandwidth(rec);
            f[rec.uav] += rec.template.f_min;
        }
    }
    for u in &next.uavs {
        let (bb, ff) = (u.b_ava + b[u.id], u.f_ava + f[u.id]);
        let tol = 1e-7 * (1.0 + start.b[u.id].abs() + start.f[u.id].abs());
        if (bb - start.b[u.id]).abs() > tol || (ff - start.f[u.id]).abs() > tol {
            out.push(format!("t={t}: UAV {} budget ledger off ({bb} vs {}, {ff} vs {})", u.id, start.b[u.id], start.f[u.id]));
        }
        if u.b_ava < -1e-7 || u.f_ava < -1e-7 {
            out.push(format!("t={t}: UAV {} budget negative (8b/8c)", u.id));
        }
    }
    // sync monotonicity for reservations that survive the slot
    for r in next.reservations.iter().filter(|r| r.active) {
        if let Some(p) = prev
            .reservations
            .iter()
            .find(|p| p.active && p.mission_id == r.mission_id && p.candidate_uav_id == r.candidate_uav_id && p.formed_at == r.formed_at)
        {
            if r.s < p.s {
                out.push(format!("t={t}: mission {} sync ratio fell {} -> {}", r.mission_id, p.s, r.s));
            }
        }
    }
    out
}

/// Checks formation-time constraints recorded in the events of one slot.
fn check_formations(prev: &WorldState, events: &[SlotEvent]) -> Vec<String> {
    let mut out = Vec::new();
    let mut b_used: BTreeMap<UavId, f64> = BTreeMap::new();
    let mut f_used: BTreeMap<UavId, f64> = BTreeMap::new();
    let mut e_used: BTreeMap<UavId, f64> = BTreeMap::new();
    let mut released: BTreeMap<UavId, (f64, f64)> = BTreeMap::new();
    let mut missions = BTreeSet::new();
    for e in events {
        if e.kind != EventKind::Reserve {
            continue;
        }
        let k = e.candidate.expect("reserve events carry a candidate");
        match e.text("action") {
            Some("release") => {
                if let Some(r) = prev.reservations.iter().find(|r| r.active && Some(r.mission_id) == e.mission_id() && r.candidate_uav_id == k) {
                    let x = released.entry(k).or_default();
                    x.0 += r.template.b_acc_min;
                    x.1 += r.template.f_min;
                }
            }
            Some("form") => {
                let m = e.mission_id().expect("mission");
                if !missions.insert(m) {
                    out.push(format!("t={}: mission {m} formed two reservations (8a)", e.t));
                }
                *b_used.entry(k).or_default() += e.num("b_acc").unwrap_or(0.0);
                *f_used.entry(k).or_default() += e.num("f").unwrap_or(0.0);
                *e_used.entry(k).or_default() += e.num("e_res").unwrap_or(0.0);
            }
            _ => {}
        }
    }
    for (&k, &b) in &b_used {
        let u = &prev.uavs[k];
        let (rb, rf) = released.get(&k).copied().unwrap_or_default();
        if b > u.b_ava + rb + 1e-7 {
            out.push(format!("t={}: candidate {k} access budget exceeded (8b)", prev.t));
        }
        if f_used[&k] > u.f_ava + rf + 1e-7 {
            out.push(format!("t={}: candidate {k} compute budget exceeded (8c)", prev.t));
        }
        let headroom = u.energy - prev.committed_reservation_energy(k) - prev.limits.e_min;
        if e_used[&k] > headroom + 1e-7 + released_energy(prev, events, k) {
            out.push(format!("t={}: candidate {k} energy headroom exceeded (8e)", prev.t));
        }
    }
    out
}

fn released_energy(prev: &WorldState, events: &[SlotEvent], k: UavId) -> f64 {
    events
        .iter()
        .filter(|e| e.kind == EventKind::Reserve && e.text("action") == Some("release") && e.candidate == Some(k))
        .filter_map(|e| {
            prev.reservations
                .iter()
                .find(|r| r.active && Some(r.mission_id) == e.mission_id() && r.candidate_uav_id == k)
                .map(|r| r.template.e_res)
        })
        .sum()
}

/// Runs `slots` slots from a fresh scenario.
pub fn run_episode(cfg: &ScenarioConfig, seed: u64, policy: Policy, lstm: Option<&LstmParams>, opts: EpisodeOptions) -> Result<Episode> {
    let mut w = generate_scenario(cfg, seed)?;
    let engine = Engine::new(cfg, seed, policy, lstm, opts)?;
    let start = ledger(&w);
    let mut ep = Episode::new(w.clone());
    for _ in 0..cfg.scenario.slots {
        let prev = opts.check_invariants.then(|| w.clone());
        let first = ep.events.len();
        let ms = engine.run_slot(&mut w, &mut ep)?;
        ep.decision_ms.push(ms);
        if let Some(prev) = prev {
            ep.violations.extend(check_transition(&prev, &w, &start));
            ep.violations.extend(check_formations(&prev, &ep.events[first..]));
        }
    }
    for ms in &mut w.missions {
        if ms.status == MissionStatus::Interrupted {
            ms.status = MissionStatus::Failed;
        }
    }
    ep.world = w;
    Ok(ep)
}

/// Shadow runs under the reactive policy, labelled by future unsustainability.
pub fn generate_labels(cfg: &ScenarioConfig, seeds: &[u64]) -> Result<Dataset> {
    if seeds.is_empty() {
        return Err(FrescoError::Argument("label generation needs at least one seed".into()));
    }
    let opts = EpisodeOptions { record_windows: true, ..EpisodeOptions::default() };
    let mut data = Dataset::default();
    for &seed in seeds {
        let ep = run_episode(cfg, seed, Policy::Reactive, None, opts)?;
        for (&m, status) in &ep.path_status {
            for (t, y) in labels_from_status(status, cfg.fresco.horizon) {
                if let Some(x) = ep.windows.get(&(t as u32, m)) {
                    data.samples.push(Sample { x: x.clone(), y: f64::from(y) });
                }
            }
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Scale;
    use crate::geo::LinkSnapshot;
    use crate::template::ReservationTemplate;

    fn cfg() -> ScenarioConfig {
        ScenarioConfig::for_scale(Scale::S1)
    }

    fn checked() -> EpisodeOptions {
        EpisodeOptions { check_invariants: true, ..EpisodeOptions::default() }
    }

    fn res(s: f64, active: bool) -> ReservationState {
        ReservationState {
            mission_id: 0,
            serving_uav_id: 0,
            candidate_uav_id: 1,
            template: ReservationTemplate::default(),
            links: LinkSnapshot::default(),
            s,
            active,
            formed_at: 0,
            low_risk_streak: 0,
            welfare: 0.0,
        }
    }

    #[test]
    fn sync_update_examples() {
        assert_eq!(update_sync(&res(0.9, true), 1.0, 1.0, 4.0).s, 1.0);
        assert_eq!(update_sync(&res(0.4, false), 5.0, 1.0, 1.0).s, 0.4);
        assert!((update_sync(&res(0.3, true), 2.0, 1.0, 10.0).s - 0.5).abs() < 1e-15);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(Policy::parse(p.name()).unwrap(), p);
        }
        assert!(Policy::parse("oracle").is_err());
    }

    #[test]
    fn fresco_requires_params() {
        let c = cfg();
        assert!(matches!(run_episode(&c, 1, Policy::Fresco, None, checked()), Err(FrescoError::Argument(_))));
    }

    #[test]
    fn reactive_never_reserves() {
        let ep = run_episode(&cfg(), 2, Policy::Reactive, None, checked()).unwrap();
        assert!(ep.events.iter().all(|e| !matches!(e.kind, EventKind::Reserve | EventKind::Sync)));
        assert!(ep.violations.is_empty(), "{:?}", &ep.violations[..ep.violations.len().min(5)]);
        let slots = ep.events.iter().filter(|e| e.kind == EventKind::Slot).count();
        assert_eq!(slots, 80);
        assert_eq!(ep.events.first().unwrap().t, 0);
        assert_eq!(ep.events.last().unwrap().t, 79);
    }

    #[test]
    fn heuristic_policies_conserve() {
        for p in [Policy::FrescoNopred, Policy::BestChannel, Policy::BestResource, Policy::Random] {
            let ep = run_episode(&cfg(), 3, p, None, checked()).unwrap();
            assert!(ep.violations.is_empty(), "{p}: {:?}", &ep.violations[..ep.violations.len().min(5)]);
            assert!(ep.events.iter().any(|e| e.kind == EventKind::Reserve), "{p} never reserved");
        }
    }

    #[test]
    fn runs_replay_identically() {
        for p in [Policy::Random, Policy::FrescoNopred] {
            let a = run_episode(&cfg(), 4, p, None, EpisodeOptions::default()).unwrap();
            let b = run_episode(&cfg(), 4, p, None, EpisodeOptions::default()).unwrap();
            assert_eq!(a.events, b.events);
        }
    }

    #[test]
    fn quiet_world_has_no_reservations() {
        let mut c = cfg();
        c.fresco.xi_th = 0.99;
        c.fresco.xi_alarm = 1.0;
        c.ranges.e_serving = crate::config::Range::new(110.0, 110.0);
        let ep = run_episode(&c, 5, Policy::FrescoNopred, None, checked()).unwrap();
        assert!(ep.events.iter().all(|e| e.kind != EventKind::Reserve));
    }

    #[test]
    fn takeover_requires_readiness() {
        let c = cfg();
        let mut w = generate_scenario(&c, 6).unwrap();
        let eng = Engine::new(&c, 6, Policy::FrescoNopred, None, EpisodeOptions::default()).unwrap();
        let k = *w.candidates.iter().next().unwrap();
        let mut r = res(0.1, true);
        r.candidate_uav_id = k;
        r.serving_uav_id = w.pairs[&0];
        w.reservations.push(r);
        let mut ev = Vec::new();
        assert!(matches!(eng.apply_takeover(&mut w, 0, &mut ev), Err(FrescoError::Contract(_))));
    }

    #[test]
    fn takeover_moves_roles_and_respects_deadline() {
        let c = cfg();
        let mut w = generate_scenario(&c, 7).unwrap();
        let eng = Engine::new(&c, 7, Policy::FrescoNopred, None, EpisodeOptions::default()).unwrap();
        eng.observe_slot(&mut w);
        let j = w.pairs[&0];
        let req = eng.pair_request(&w, 0, 0.5);
        let evals = eng.evaluate(&w, &req, &eng.budgets(&w, j)).unwrap();
        let e = evals[0];
        let mut ev = Vec::new();
        eng.form(&mut w, &e, &mut ev);
        let idx = w.active_reservation(0).unwrap();
        w.reservations[idx].s = 1.0;
        let delay = eng.apply_takeover(&mut w, idx, &mut ev).unwrap();
        assert!(delay <= w.missions[0].t_max * (1.0 + 1e-12));
        assert_eq!(w.missions[0].pending_sync_s, 0.0);
        assert_eq!(w.pairs[&0], e.candidate_id);
        assert!(w.serving.contains(&e.candidate_id) && !w.candidates.contains(&e.candidate_id));
        assert!(validate_world(&w).is_empty());
    }

    #[test]
    fn alarm_boundaries() {
        let c = cfg();
        let mut w = generate_scenario(&c, 8).unwrap();
        let eng = Engine::new(&c, 8, Policy::FrescoNopred, None, EpisodeOptions::default()).unwrap();
        eng.observe_slot(&mut w);
        let risks: BTreeMap<MissionId, f64> = [(0, 0.16)].into_iter().collect();
        let mut ev = Vec::new();
        eng.process_alarms(&mut w, &risks, &mut ev).unwrap();
        let alarms: Vec<_> = ev.iter().filter(|e| e.kind == EventKind::Alarm).collect();
        assert_eq!(alarms.len(), 1);
        assert_eq!(alarms[0].text("outcome"), Some("maintain"));

        // ready at exactly s_min
        let j = w.pairs[&0];
        let req = eng.pair_request(&w, 0, 0.5);
        let e = eng.evaluate(&w, &req, &eng.budgets(&w, j)).unwrap()[0];
        eng.form(&mut w, &e, &mut ev);
        let idx = w.active_reservation(0).unwrap();
        w.reservations[idx].s = 0.30;
        let mut ev = Vec::new();
        eng.process_alarms(&mut w, &risks, &mut ev).unwrap();
        assert!(ev.iter().any(|e| e.kind == EventKind::Takeover && e.mission == 0));

        // no reservation and a dead serving UAV
        let m = 1;
        let j = w.pairs[&m];
        w.uavs[j].degraded = true;
        let mut ev = Vec::new();
        eng.process_alarms(&mut w, &BTreeMap::new(), &mut ev).unwrap();
        assert!(ev.iter().any(|e| e.kind == EventKind::Fallback && e.mission == m as i64));
        assert_eq!(w.missions[m].status, MissionStatus::Interrupted);
    }

    #[test]
    fn instant_recovery_costs_one_slot() {
        let mut c = cfg();
        c.ranges.zeta = crate::config::Range::new(1e-6, 1e-6);
        let mut w = generate_scenario(&c, 9).unwrap();
        let eng = Engine::new(&c, 9, Policy::Reactive, None, EpisodeOptions::default()).unwrap();
        let mut ep = Episode::new(w.clone());
        eng.observe_slot(&mut w);
        let j = w.pairs[&0];
        w.uavs[j].energy = 0.0;
        for _ in 0..3 {
            eng.run_slot(&mut w, &mut ep).unwrap();
        }
        let m = &w.missions[0];
        assert_eq!(m.interrupted_slots, 1, "{:?}", m.status);
        assert!(ep.events.iter().any(|e| e.kind == EventKind::Recover && e.mission == 0));
    }

    #[test]
    fn starved_recovery_fails_at_horizon() {
        let mut c = cfg();
        c.ranges.b_ava = crate::config::Range::new(0.0, 0.0);
        c.ranges.e_serving = crate::config::Range::new(3.0, 3.0);
        c.scenario.slots = 20;
        let ep = run_episode(&c, 10, Policy::Reactive, None, checked()).unwrap();
        let failed: Vec<_> = ep.world.missions.iter().filter(|m| m.status == MissionStatus::Failed).collect();
        assert!(!failed.is_empty());
        for m in failed {
            let first = ep
                .events
                .iter()
                .find(|e| e.kind == EventKind::Interrupt && e.mission == m.id as i64)
                .unwrap()
                .t;
            assert_eq!(m.interrupted_slots, 20 - first);
        }
    }

    #[test]
    fn labels_are_reproducible() {
        let mut c = cfg();
        c.scenario.slots = 30;
        let a = generate_labels(&c, &[1, 2]).unwrap();
        let b = generate_labels(&c, &[1, 2]).unwrap();
        assert_eq!(a, b);
        assert!(!a.samples.is_empty());
        assert!(generate_labels(&c, &[]).is_err());
    }
}

//! Randomized stability audit: small matching instances built through the
//! real template and utility pipeline, checked for blocking pairs,
//! individual rationality, proposal count and the brute-force optimum.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Range, ScenarioConfig};
use crate::error::{FrescoError, Result};
use crate::geo::{snr, LinkSnapshot, RadioParams};
use crate::matching::{
    as_assignment, assignment_welfare, audit_blocking_pairs, brute_force_optimum, proposal_bound, rationality_violations,
    run_matching, BlockingPair, CandidateCapacity, MatchingInstance, PairEntry, ORACLE_MAX_CANDIDATES, ORACLE_MAX_PAIRS,
};
use crate::utility::{feasible_candidates, preference_set, CandidateBudget, EvalSettings, PairRequest};

/// Candidate ids start here so they never collide with serving ids.
const CANDIDATE_BASE: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSettings {
    pub instances: usize,
    pub max_pairs: usize,
    pub max_candidates: usize,
    pub seed: u64,
}

impl Default for AuditSettings {
    fn default() -> Self {
        AuditSettings { instances: 500, max_pairs: 5, max_candidates: 4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub index: usize,
    pub pairs: usize,
    pub candidates: usize,
    pub proposals: usize,
    /// Pairs with a non-empty preference list; more proposals than this
    /// means some candidate rejected someone.
    pub proposers: usize,
    pub bound: usize,
    pub blocking: Vec<BlockingPair>,
    pub violations: Vec<String>,
    pub welfare: f64,
    pub optimum: f64,
}

impl InstanceOutcome {
    pub fn exceeds_optimum(&self) -> bool {
        self.welfare > self.optimum + 1e-9 * (1.0 + self.optimum.abs())
    }

    pub fn is_clean(&self) -> bool {
        self.blocking.is_empty() && self.violations.is_empty() && self.proposals <= self.bound && !self.exceeds_optimum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub instances: usize,
    /// Instances where at least one proposal was rejected.
    pub contested_instances: usize,
    pub blocking_pairs: usize,
    pub unstable_instances: usize,
    pub ir_violations: usize,
    pub oracle_violations: usize,
    pub termination_violations: usize,
    /// Mean and minimum of `W / W*` over instances with `W* > 0`.
    pub ratio_mean: f64,
    pub ratio_min: f64,
    pub ratio_samples: usize,
    pub failures: Vec<InstanceOutcome>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.blocking_pairs == 0 && self.ir_violations == 0 && self.oracle_violations == 0 && self.termination_violations == 0
    }
}

fn draw(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    if r.hi > r.lo {
        rng.random_range(r.lo..=r.hi)
    } else {
        r.lo
    }
}

fn point(rng: &mut ChaCha8Rng, side: f64, z: f64) -> [f64; 3] {
    [rng.random_range(0.0..=side), rng.random_range(0.0..=side), z]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// One random instance. Candidate budgets are drawn from the configured
/// ranges and then scaled by a per-candidate scarcity factor in `[0.1, 1]`
/// so that the choice rule actually has to drop pairs; a quarter of the
/// candidates sit just above the battery floor.
pub fn random_instance(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng, max_pairs: usize, max_candidates: usize) -> Result<MatchingInstance> {
    if max_pairs == 0 || max_candidates == 0 {
        return Err(FrescoError::Argument("audit instances need at least one pair and one candidate".into()));
    }
    let radio = RadioParams::from_config(cfg);
    let settings = EvalSettings::from_config(cfg);
    let rg = &cfg.ranges;
    let side = cfg.scenario.area_side;
    let alt = cfg.scenario.uav_altitude;

    let n_pairs = rng.random_range(1..=max_pairs);
    let n_cands = rng.random_range(1..=max_candidates);
    let n_serving = rng.random_range(1..=n_pairs.min(3));
    let serving_pos: Vec<[f64; 3]> = (0..n_serving).map(|_| point(rng, side, alt)).collect();

    let mut budgets = Vec::new();
    let mut cand_pos = Vec::new();
    for c in 0..n_cands {
        let scarcity = rng.random_range(0.1..=1.0);
        let energy = if rng.random_bool(0.25) {
            settings.e_min + rng.random_range(0.0..=1.0)
        } else {
            draw(rng, rg.e_candidate)
        };
        let link: BTreeMap<usize, f64> = (0..n_serving).map(|j| (j, radio.b_link * rng.random_range(0.1..=1.0))).collect();
        budgets.push((
            CandidateBudget {
                id: CANDIDATE_BASE + c,
                b_ava: draw(rng, rg.b_ava) * scarcity,
                f_ava: draw(rng, rg.f_ava) * scarcity,
                energy,
                committed_energy: 0.0,
                link_residual: 0.0,
            },
            link,
        ));
        cand_pos.push(point(rng, side, alt));
    }

    let mut inst = MatchingInstance::default();
    for i in 0..n_pairs {
        let j = rng.random_range(0..n_serving);
        let req = PairRequest {
            mission_id: i,
            serving_id: j,
            risk: rng.random_range(cfg.fresco.xi_th..=1.0),
            s: rng.random_range(0.0..0.95),
            zeta: draw(rng, rg.zeta),
            d_rem: draw(rng, rg.d_rem),
            c_rem: draw(rng, rg.c_rem),
            t_max: draw(rng, rg.t_max),
        };
        let mu = point(rng, side, 0.0);
        let mut with_links = Vec::new();
        for (c, (b, link)) in budgets.iter().enumerate() {
            let d_ms = dist(mu, serving_pos[j]);
            let d_mc = dist(mu, cand_pos[c]);
            let d_sc = dist(serving_pos[j], cand_pos[c]);
            let links = LinkSnapshot {
                snr_mu_serving: snr(radio.tx_power_mu, d_ms, &radio, rng),
                snr_mu_candidate: snr(radio.tx_power_mu, d_mc, &radio, rng),
                snr_serving_candidate: snr(radio.tx_power_uav, d_sc, &radio, rng),
                d_mu_serving: d_ms,
                d_mu_candidate: d_mc,
                d_serving_candidate: d_sc,
            };
            with_links.push((CandidateBudget { link_residual: link[&j], ..*b }, links));
        }
        let evals = feasible_candidates(&req, &with_links, &settings)?;
        inst.pairs.push(PairEntry { mission_id: i, serving_id: j, prefs: preference_set(&evals) });
    }
    for (b, link) in &budgets {
        inst.candidates.push(CandidateCapacity {
            id: b.id,
            b_ava: b.b_ava,
            f_ava: b.f_ava,
            energy_headroom: b.energy - b.committed_energy - settings.e_min,
            link_residual: link.clone(),
        });
    }
    Ok(inst)
}

pub fn audit_instance(index: usize, inst: &MatchingInstance) -> Result<InstanceOutcome> {
    let st = run_matching(inst)?;
    let welfare = assignment_welfare(inst, &as_assignment(inst, &st));
    let (_, optimum) = brute_force_optimum(inst)?;
    Ok(InstanceOutcome {
        index,
        pairs: inst.pairs.len(),
        candidates: inst.candidates.len(),
        proposals: st.proposals,
        proposers: inst.pairs.iter().filter(|p| !p.prefs.is_empty()).count(),
        bound: proposal_bound(inst),
        blocking: audit_blocking_pairs(inst, &st),
        violations: rationality_violations(inst, &st),
        welfare,
        optimum,
    })
}

/// Instance `index` of an audit seeded with `seed`; reproducible on its own.
pub fn instance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn run_audit(cfg: &ScenarioConfig, s: &AuditSettings) -> Result<AuditReport> {
    if s.max_pairs > ORACLE_MAX_PAIRS || s.max_candidates > ORACLE_MAX_CANDIDATES {
        return Err(FrescoError::Argument(format!(
            "audit sizes are limited to {ORACLE_MAX_PAIRS} pairs and {ORACLE_MAX_CANDIDATES} candidates"
        )));
    }
    let mut report = AuditReport {
        instances: s.instances,
        contested_instances: 0,
        blocking_pairs: 0,
        unstable_instances: 0,
        ir_violations: 0,
        oracle_violations: 0,
        termination_violations: 0,
        ratio_mean: 0.0,
        ratio_min: 1.0,
        ratio_samples: 0,
        failures: Vec::new(),
    };
    let mut ratio_sum = 0.0;
    for index in 0..s.instances {
        let inst = random_instance(cfg, &mut instance_rng(s.seed, index), s.max_pairs, s.max_candidates)?;
        let out = audit_instance(index, &inst)?;
        report.contested_instances += usize::from(out.proposals > out.proposers);
        report.blocking_pairs += out.blocking.len();
        report.unstable_instances += usize::from(!out.blocking.is_empty());
        report.ir_violations += out.violations.len();
        report.oracle_violations += usize::from(out.exceeds_optimum());
        report.termination_violations += usize::from(out.proposals > out.bound);
        if out.optimum > 1e-12 {
            let r = out.welfare / out.optimum;
            ratio_sum += r;
            report.ratio_min = report.ratio_min.min(r);
            report.ratio_samples += 1;
        }
        if !out.is_clean() {
            report.failures.push(out);
        }
    }
    if report.ratio_samples > 0 {
        report.ratio_mean = ratio_sum / report.ratio_samples as f64;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_respect_size_limits_and_are_reproducible() {
        let cfg = ScenarioConfig::default();
        for i in 0..50 {
            let a = random_instance(&cfg, &mut instance_rng(7, i), 5, 4).unwrap();
            assert!((1..=5).contains(&a.pairs.len()));
            assert!((1..=4).contains(&a.candidates.len()));
            let b = random_instance(&cfg, &mut instance_rng(7, i), 5, 4).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn instances_exercise_the_matcher() {
        let cfg = ScenarioConfig::default();
        let insts: Vec<MatchingInstance> =
            (0..100).map(|i| random_instance(&cfg, &mut instance_rng(1, i), 5, 4).unwrap()).collect();
        let with_prefs = insts.iter().filter(|i| i.pairs.iter().any(|p| !p.prefs.is_empty())).count();
        assert!(with_prefs > 50, "only {with_prefs} instances have any acceptable candidate");
        let contested = insts
            .iter()
            .enumerate()
            .filter(|(n, i)| audit_instance(*n, i).is_ok_and(|o| o.proposals > o.proposers))
            .count();
        assert!(contested > 0, "no instance ever needed a rejection");
    }

    #[test]
    fn oversize_settings_are_rejected() {
        let s = AuditSettings { max_pairs: 7, ..AuditSettings::default() };
        assert!(run_audit(&ScenarioConfig::default(), &s).is_err());
        assert!(random_instance(&ScenarioConfig::default(), &mut instance_rng(0, 0), 0, 1).is_err());
    }

    #[test]
    fn small_audit_reports_consistent_totals() {
        let s = AuditSettings { instances: 30, ..AuditSettings::default() };
        let r = run_audit(&ScenarioConfig::default(), &s).unwrap();
        assert_eq!(r.instances, 30);
        assert_eq!(r.termination_violations, 0);
        assert_eq!(r.oracle_violations, 0);
        assert_eq!(r.ir_violations, 0);
        assert!(r.ratio_min <= r.ratio_mean + 1e-12 && r.ratio_mean <= 1.0 + 1e-9);
        let counted: usize = r.failures.iter().map(|f| f.blocking.len()).sum();
        assert_eq!(counted, r.blocking_pairs);
    }
}

//! Candidate screening, two-sided utilities, preference sets and welfare.

use serde::{Deserialize, Serialize};

use crate::config::{FrescoSection, ScenarioConfig};
use crate::error::Result;
use crate::geo::LinkSnapshot;
use crate::model::{MissionId, UavId};
use crate::template::{solve_min_template, EnergyCoeffs, ReservationTemplate, ResourceBox, TemplateRequest};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityWeights {
    pub beta: [f64; 4],
    pub nu: [f64; 3],
    pub eta: [f64; 5],
    pub epsilon: f64,
}

impl From<&FrescoSection> for UtilityWeights {
    fn from(f: &FrescoSection) -> Self {
        UtilityWeights {
            beta: f.beta,
            nu: f.nu,
            eta: f.eta,
            epsilon: f.epsilon,
        }
    }
}

/// Normalized reservation cost `C_res` of a template against the budgets it
/// draws from.
pub fn reservation_cost(t: &ReservationTemplate, budgets: &ResourceBox, nu: [f64; 3], eps: f64) -> f64 {
    nu[0] * t.b_syn_min / (budgets.b_link + eps)
        + nu[1] * t.b_acc_min / (budgets.b_ava + eps)
        + nu[2] * t.f_min / (budgets.f_ava + eps)
}

/// Mission-side utility `U^U` of reserving a candidate.
#[allow(clippy::too_many_arguments)]
pub fn mission_utility(
    risk: f64,
    t: &ReservationTemplate,
    s: f64,
    zeta: f64,
    t_max: f64,
    snr_syn: f64,
    tau: f64,
    beta: [f64; 4],
    c_res: f64,
) -> f64 {
    let slack = 1.0 - t.d_tk_min / t_max;
    let sync_gain = t.b_syn_min * (1.0 + snr_syn).log2() * tau / zeta;
    risk * (beta[0] * slack + beta[1] * s + beta[2] * sync_gain) - beta[3] * c_res
}

/// Candidate-side utility `U^N` of accepting a serving pair.
pub fn uav_utility(
    risk: f64,
    t: &ReservationTemplate,
    budgets: &ResourceBox,
    e_c: f64,
    eta: [f64; 5],
    eps: f64,
) -> f64 {
    eta[0] * risk
        - eta[1] * t.b_syn_min / (budgets.b_link + eps)
        - eta[2] * t.b_acc_min / (budgets.b_ava + eps)
        - eta[3] * t.f_min / (budgets.f_ava + eps)
        - eta[4] * t.e_res / (e_c + eps)
}

/// The proposing side: a high-risk serving pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRequest {
    pub mission_id: MissionId,
    pub serving_id: UavId,
    pub risk: f64,
    pub s: f64,
    pub zeta: f64,
    pub d_rem: f64,
    pub c_rem: f64,
    pub t_max: f64,
}

/// Residual state of a candidate as seen by one pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateBudget {
    pub id: UavId,
    pub b_ava: f64,
    pub f_ava: f64,
    /// Residual battery E_k^c (kJ).
    pub energy: f64,
    /// Reservation energy already committed on this candidate (kJ/slot).
    pub committed_energy: f64,
    /// Free sync capacity on the link from the pair's serving UAV.
    pub link_residual: f64,
}

impl CandidateBudget {
    pub fn boxes(&self) -> ResourceBox {
        ResourceBox {
            b_link: self.link_residual.max(0.0),
            b_ava: self.b_ava.max(0.0),
            f_ava: self.f_ava.max(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub weights: UtilityWeights,
    pub coeffs: EnergyCoeffs,
    pub e_min: f64,
    pub tau: f64,
}

impl EvalSettings {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        EvalSettings {
            weights: UtilityWeights::from(&cfg.fresco),
            coeffs: EnergyCoeffs { kappa_b: cfg.energy.kappa_b, kappa_f: cfg.energy.kappa_f },
            e_min: cfg.energy.e_min,
            tau: cfg.scenario.tau,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvaluation {
    pub mission_id: MissionId,
    pub serving_id: UavId,
    pub candidate_id: UavId,
    pub risk: f64,
    pub template: ReservationTemplate,
    pub links: LinkSnapshot,
    pub u_mission: f64,
    pub u_uav: f64,
    pub c_res: f64,
    pub welfare: f64,
    pub feasible: bool,
    pub acceptable: bool,
}

/// Solves the template for one triplet and scores it; `None` when the
/// candidate fails the template or battery screen.
pub fn evaluate_candidate(
    pair: &PairRequest,
    cand: &CandidateBudget,
    links: &LinkSnapshot,
    settings: &EvalSettings,
) -> Result<Option<CandidateEvaluation>> {
    let req = TemplateRequest {
        s: pair.s,
        zeta: pair.zeta,
        d_rem: pair.d_rem,
        c_rem: pair.c_rem,
        t_max: pair.t_max,
        snr_syn: links.snr_serving_candidate,
        snr_cand: links.snr_mu_candidate,
    };
    let boxes = cand.boxes();
    let w = &settings.weights;
    let Some(template) = solve_min_template(&req, w.nu, &boxes, &settings.coeffs, settings.tau)? else {
        return Ok(None);
    };
    if cand.energy - cand.committed_energy < settings.e_min + template.e_res {
        return Ok(None);
    }
    let c_res = reservation_cost(&template, &boxes, w.nu, w.epsilon);
    let u_mission = mission_utility(
        pair.risk,
        &template,
        pair.s,
        pair.zeta,
        pair.t_max,
        links.snr_serving_candidate,
        settings.tau,
        w.beta,
        c_res,
    );
    let u_uav = uav_utility(pair.risk, &template, &boxes, cand.energy, w.eta, w.epsilon);
    Ok(Some(CandidateEvaluation {
        mission_id: pair.mission_id,
        serving_id: pair.serving_id,
        candidate_id: cand.id,
        risk: pair.risk,
        template,
        links: *links,
        u_mission,
        u_uav,
        c_res,
        welfare: u_mission + u_uav,
        feasible: true,
        acceptable: u_mission >= 0.0,
    }))
}

/// Feasible candidate-successor set of a pair, with evaluations.
pub fn feasible_candidates(
    pair: &PairRequest,
    candidates: &[(CandidateBudget, LinkSnapshot)],
    settings: &EvalSettings,
) -> Result<Vec<CandidateEvaluation>> {
    let mut out = Vec::new();
    for (cand, links) in candidates {
        if cand.id == pair.serving_id {
            continue;
        }
        if let Some(e) = evaluate_candidate(pair, cand, links, settings)? {
            out.push(e);
        }
    }
    Ok(out)
}

/// Acceptable candidates (`U^U ≥ 0`) ordered by `U^U` descending, ties by id.
pub fn preference_set(evals: &[CandidateEvaluation]) -> Vec<CandidateEvaluation> {
    let mut prefs: Vec<CandidateEvaluation> = evals
        .iter()
        .filter(|e| e.feasible && e.u_mission >= 0.0)
        .copied()
        .collect();
    prefs.sort_by(|a, b| {
        b.u_mission
            .total_cmp(&a.u_mission)
            .then(a.candidate_id.cmp(&b.candidate_id))
    });
    prefs
}

/// Sum of pairwise welfare over matched triplets.
pub fn total_welfare<'a>(matched: impl IntoIterator<Item = &'a CandidateEvaluation>) -> f64 {
    matched.into_iter().map(|e| e.welfare).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn weights() -> UtilityWeights {
        UtilityWeights::from(&FrescoSection::default())
    }

    fn settings() -> EvalSettings {
        EvalSettings {
            weights: weights(),
            coeffs: EnergyCoeffs { kappa_b: 0.01, kappa_f: 0.02 },
            e_min: 10.0,
            tau: 1.0,
        }
    }

    fn eval(id: UavId, u_mission: f64) -> CandidateEvaluation {
        CandidateEvaluation {
            mission_id: 0,
            serving_id: 0,
            candidate_id: id,
            risk: 0.5,
            template: ReservationTemplate::default(),
            links: LinkSnapshot::default(),
            u_mission,
            u_uav: 0.0,
            c_res: 0.0,
            welfare: u_mission,
            feasible: true,
            acceptable: u_mission >= 0.0,
        }
    }

    fn pair() -> PairRequest {
        PairRequest {
            mission_id: 3,
            serving_id: 1,
            risk: 0.4,
            s: 0.0,
            zeta: 4.0,
            d_rem: 10.0,
            c_rem: 14.0,
            t_max: 12.0,
        }
    }

    fn links() -> LinkSnapshot {
        LinkSnapshot {
            snr_mu_serving: 1e3,
            snr_mu_candidate: 2e3,
            snr_serving_candidate: 1e4,
            ..Default::default()
        }
    }

    #[test]
    fn cost_examples() {
        let b = ResourceBox { b_link: 10.0, b_ava: 10.0, f_ava: 10.0 };
        assert_eq!(reservation_cost(&ReservationTemplate::default(), &b, [1.0; 3], 1e-6), 0.0);
        let t = ReservationTemplate { b_syn_min: 5.0, b_acc_min: 5.0, f_min: 5.0, ..Default::default() };
        assert!((reservation_cost(&t, &b, [1.0; 3], 1e-6) - 1.5).abs() < 1e-6);
        let zero = ResourceBox { b_ava: 0.0, ..b };
        assert!(reservation_cost(&t, &zero, [1.0; 3], 1e-6).is_finite());
    }

    #[test]
    fn zero_risk_leaves_only_cost() {
        let t = ReservationTemplate { b_syn_min: 1.0, d_tk_min: 3.0, ..Default::default() };
        let u = mission_utility(0.0, &t, 0.7, 2.0, 10.0, 3.0, 1.0, [1.0, 1.0, 1.0, 0.5], 0.8);
        assert_eq!(u, -0.4);
    }

    #[test]
    fn mission_utility_term_isolation() {
        // β3 term: b_syn * log2(1+γ) * τ / ζ = 1 * 2 * 1 / 4 = 0.5
        let t = ReservationTemplate { b_syn_min: 1.0, d_tk_min: 10.0, ..Default::default() };
        let xi = 0.6;
        let beta = [1.3, 0.9, 0.7, 0.0];
        let u = mission_utility(xi, &t, 1.0, 4.0, 10.0, 3.0, 1.0, beta, 5.0);
        assert!((u - xi * (beta[1] + 0.5 * beta[2])).abs() < 1e-15);
    }

    #[test]
    fn uav_utility_pure_reward() {
        let b = ResourceBox { b_link: 10.0, b_ava: 10.0, f_ava: 10.0 };
        let u = uav_utility(1.0, &ReservationTemplate::default(), &b, 50.0, [2.0, 0.5, 0.5, 0.5, 0.5], 1e-6);
        assert_eq!(u, 2.0);
    }

    #[test]
    fn battery_boundary_inclusive() {
        let s = settings();
        let p = pair();
        let l = links();
        let mut c = CandidateBudget {
            id: 7,
            b_ava: 15.0,
            f_ava: 20.0,
            energy: 100.0,
            committed_energy: 0.0,
            link_residual: 10.0,
        };
        let e_res = evaluate_candidate(&p, &c, &l, &s).unwrap().unwrap().template.e_res;
        c.energy = s.e_min + e_res;
        assert!(evaluate_candidate(&p, &c, &l, &s).unwrap().is_some());
        c.energy = s.e_min + e_res - 1e-9;
        assert!(evaluate_candidate(&p, &c, &l, &s).unwrap().is_none());
    }

    #[test]
    fn infeasible_template_excluded() {
        let s = settings();
        let starved = CandidateBudget {
            id: 2,
            b_ava: 15.0,
            f_ava: 0.5,
            energy: 100.0,
            committed_energy: 0.0,
            link_residual: 10.0,
        };
        let ok = CandidateBudget { id: 3, f_ava: 20.0, ..starved };
        let out = feasible_candidates(&pair(), &[(starved, links()), (ok, links())], &s).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].candidate_id, 3);
        assert!(feasible_candidates(&pair(), &[], &s).unwrap().is_empty());
    }

    #[test]
    fn preference_filter_and_order() {
        let prefs = preference_set(&[eval(1, 0.3), eval(2, 0.0), eval(3, -0.1)]);
        let ids: Vec<_> = prefs.iter().map(|e| e.candidate_id).collect();
        assert_eq!(ids, vec![1, 2]);
        let tied = preference_set(&[eval(5, 0.2), eval(2, 0.2)]);
        let ids: Vec<_> = tied.iter().map(|e| e.candidate_id).collect();
        assert_eq!(ids, vec![2, 5]);
        assert!(preference_set(&[]).is_empty());
    }

    #[test]
    fn welfare_sums() {
        assert_eq!(total_welfare(&[]), 0.0);
        let mut e = eval(1, 0.0);
        e.welfare = 1.7;
        assert_eq!(total_welfare(&[e]), 1.7);
    }

    /// Straight transcription of both utilities, kept apart from the library code.
    fn reference_utilities(
        xi: f64,
        tpl: [f64; 5],
        s: f64,
        zeta: f64,
        t_max: f64,
        gsyn: f64,
        tau: f64,
        budgets: [f64; 3],
        e_c: f64,
        w: &UtilityWeights,
    ) -> (f64, f64) {
        let [bs, ba, f, d, e] = tpl;
        let [bl, bv, fv] = budgets;
        let eps = w.epsilon;
        let c = w.nu[0] * bs / (bl + eps) + w.nu[1] * ba / (bv + eps) + w.nu[2] * f / (fv + eps);
        let uu = xi
            * (w.beta[0] * (1.0 - d / t_max)
                + w.beta[1] * s
                + w.beta[2] * bs * (1.0 + gsyn).log2() * tau / zeta)
            - w.beta[3] * c;
        let un = w.eta[0] * xi
            - w.eta[1] * bs / (bl + eps)
            - w.eta[2] * ba / (bv + eps)
            - w.eta[3] * f / (fv + eps)
            - w.eta[4] * e / (e_c + eps);
        (uu, un)
    }

    proptest! {
        #[test]
        fn utilities_match_reference(
            xi in 0.0..1.0f64,
            tpl in prop::array::uniform5(0.0..10.0f64),
            s in 0.0..1.0f64,
            zeta in 0.5..8.0f64,
            t_max in 5.0..20.0f64,
            gsyn in 0.0..1e5f64,
            budgets in prop::array::uniform3(0.0..30.0f64),
            e_c in 0.0..150.0f64,
        ) {
            let w = weights();
            let t = ReservationTemplate { b_syn_min: tpl[0], b_acc_min: tpl[1], f_min: tpl[2], d_tk_min: tpl[3], e_res: tpl[4] };
            let b = ResourceBox { b_link: budgets[0], b_ava: budgets[1], f_ava: budgets[2] };
            let c = reservation_cost(&t, &b, w.nu, w.epsilon);
            let uu = mission_utility(xi, &t, s, zeta, t_max, gsyn, 1.0, w.beta, c);
            let un = uav_utility(xi, &t, &b, e_c, w.eta, w.epsilon);
            let (ru, rn) = reference_utilities(xi, tpl, s, zeta, t_max, gsyn, 1.0, budgets, e_c, &w);
            prop_assert!((uu - ru).abs() <= 1e-12 * ru.abs().max(1.0));
            prop_assert!((un - rn).abs() <= 1e-12 * rn.abs().max(1.0));
        }

        #[test]
        fn eta_without_reward_is_nonpositive(
            tpl in prop::array::uniform5(0.0..10.0f64),
            xi in 0.0..1.0f64,
        ) {
            let mut w = weights();
            w.eta[0] = 0.0;
            let t = ReservationTemplate { b_syn_min: tpl[0], b_acc_min: tpl[1], f_min: tpl[2], d_tk_min: tpl[3], e_res: tpl[4] };
            let b = ResourceBox { b_link: 10.0, b_ava: 10.0, f_ava: 10.0 };
            prop_assert!(uav_utility(xi, &t, &b, 50.0, w.eta, w.epsilon) <= 0.0);
        }

        #[test]
        fn uniform_beta_scaling_keeps_order(
            us in prop::collection::vec(0.0..1.0f64, 1..8),
            c in 0.1..10.0f64,
        ) {
            // preference order depends on β only through U^U, which scales linearly
            let evals: Vec<_> = us.iter().enumerate().map(|(i, u)| eval(i, *u)).collect();
            let scaled: Vec<_> = evals.iter().map(|e| CandidateEvaluation { u_mission: e.u_mission * c, ..*e }).collect();
            let a: Vec<_> = preference_set(&evals).iter().map(|e| e.candidate_id).collect();
            let b: Vec<_> = preference_set(&scaled).iter().map(|e| e.candidate_id).collect();
            prop_assert_eq!(a, b);
        }
    }
}

//! Proposal–rejection matching of high-risk serving pairs to candidate
//! successors, the exact local choice rule, a blocking-pair auditor and a
//! brute-force optimum for small instances.
//!
//! Subset sums of `U^N` are always folded in ascending mission-id order so
//! the same subset yields a bit-identical sum wherever it is evaluated.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FrescoError, Result};
use crate::model::{MissionId, UavId};
use crate::utility::CandidateEvaluation;

/// Absolute slack on budget checks, absorbing float accumulation only.
const BUDGET_TOL: f64 = 1e-9;

/// Largest instance the brute-force oracle accepts.
pub const ORACLE_MAX_PAIRS: usize = 6;
pub const ORACLE_MAX_CANDIDATES: usize = 5;

/// A proposing pair with its preference list, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub mission_id: MissionId,
    pub serving_id: UavId,
    pub prefs: Vec<CandidateEvaluation>,
}

impl PairEntry {
    pub fn eval_for(&self, candidate: UavId) -> Option<&CandidateEvaluation> {
        self.prefs.iter().find(|e| e.candidate_id == candidate)
    }
}

/// Residual budgets of a candidate at the start of the round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateCapacity {
    pub id: UavId,
    pub b_ava: f64,
    pub f_ava: f64,
    /// `E_c − committed − E_min`: energy left for new reservations.
    pub energy_headroom: f64,
    /// Free sync bandwidth on the link from each serving UAV.
    pub link_residual: BTreeMap<UavId, f64>,
}

impl CandidateCapacity {
    fn link(&self, serving: UavId) -> f64 {
        self.link_residual.get(&serving).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchingInstance {
    pub pairs: Vec<PairEntry>,
    pub candidates: Vec<CandidateCapacity>,
}

/// What a candidate needs to know about one pair in its pool.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolItem {
    pub mission_id: MissionId,
    pub serving_id: UavId,
    pub b_syn: f64,
    pub b_acc: f64,
    pub f: f64,
    pub e_res: f64,
    pub u_uav: f64,
    pub incumbent: bool,
}

impl PoolItem {
    pub fn from_eval(e: &CandidateEvaluation, incumbent: bool) -> Self {
        PoolItem {
            mission_id: e.mission_id,
            serving_id: e.serving_id,
            b_syn: e.template.b_syn_min,
            b_acc: e.template.b_acc_min,
            f: e.template.f_min,
            e_res: e.template.e_res,
            u_uav: e.u_uav,
            incumbent,
        }
    }
}

/// Running resource usage at one candidate.
#[derive(Clone, Debug, Default)]
struct Usage {
    b_acc: f64,
    f: f64,
    e_res: f64,
    links: BTreeMap<UavId, f64>,
}

impl Usage {
    fn fits_with(&self, cap: &CandidateCapacity, it: &PoolItem) -> bool {
        let link = self.links.get(&it.serving_id).copied().unwrap_or(0.0) + it.b_syn;
        self.b_acc + it.b_acc <= cap.b_ava + BUDGET_TOL
            && self.f + it.f <= cap.f_ava + BUDGET_TOL
            && self.e_res + it.e_res <= cap.energy_headroom + BUDGET_TOL
            && link <= cap.link(it.serving_id) + BUDGET_TOL
    }

    fn add(&mut self, it: &PoolItem) {
        self.b_acc += it.b_acc;
        self.f += it.f;
        self.e_res += it.e_res;
        *self.links.entry(it.serving_id).or_insert(0.0) += it.b_syn;
    }

    fn remove(&mut self, it: &PoolItem) {
        self.b_acc -= it.b_acc;
        self.f -= it.f;
        self.e_res -= it.e_res;
        *self.links.get_mut(&it.serving_id).expect("link was added") -= it.b_syn;
    }
}

/// Whether a set of items jointly fits the candidate's budgets. Items are
/// added in the given order.
pub fn subset_feasible(cap: &CandidateCapacity, items: &[PoolItem]) -> bool {
    let mut u = Usage::default();
    for it in items {
        if !u.fits_with(cap, it) {
            return false;
        }
        u.add(it);
    }
    true
}

/// `Σ U^N` folded in ascending mission-id order.
pub fn subset_value(items: &[PoolItem]) -> f64 {
    let mut sorted: Vec<&PoolItem> = items.iter().collect();
    sorted.sort_by_key(|it| it.mission_id);
    sorted.iter().fold(0.0, |acc, it| acc + it.u_uav)
}

#[derive(Clone, Debug)]
struct Best {
    value: f64,
    incumbents: usize,
    ids: Vec<MissionId>,
}

impl Best {
    fn beaten_by(&self, value: f64, incumbents: usize, ids: &[MissionId]) -> bool {
        value > self.value
            || (value == self.value
                && (incumbents > self.incumbents
                    || (incumbents == self.incumbents && ids < self.ids.as_slice())))
    }
}

struct Search<'a> {
    cap: &'a CandidateCapacity,
    items: Vec<PoolItem>,
    /// suffix sums of positive utilities, for the optimistic bound
    tail: Vec<f64>,
    best: Best,
    chosen: Vec<MissionId>,
    usage: Usage,
}

impl Search<'_> {
    fn dfs(&mut self, idx: usize, value: f64, incumbents: usize) {
        if idx == self.items.len() {
            if self.best.beaten_by(value, incumbents, &self.chosen) {
                self.best = Best { value, incumbents, ids: self.chosen.clone() };
            }
            return;
        }
        // a tie can still win on the tie-break; the margin covers rounding in the bound
        if value + self.tail[idx] < self.best.value - 1e-9 * (1.0 + self.best.value.abs()) {
            return;
        }
        let it = self.items[idx];
        if self.usage.fits_with(self.cap, &it) {
            self.usage.add(&it);
            self.chosen.push(it.mission_id);
            self.dfs(idx + 1, value + it.u_uav, incumbents + usize::from(it.incumbent));
            self.chosen.pop();
            self.usage.remove(&it);
        }
        self.dfs(idx + 1, value, incumbents);
    }
}

/// Exact maximizer of `Σ U^N` over feasible subsets of `pool`.
///
/// Items with `U^N < 0` are never chosen. Ties prefer more incumbents, then
/// the lexicographically smallest mission-id list. Returns sorted ids.
pub fn choose(cap: &CandidateCapacity, pool: &[PoolItem]) -> Vec<MissionId> {
    let mut items: Vec<PoolItem> = pool.iter().copied().filter(|it| it.u_uav >= 0.0).collect();
    items.sort_by_key(|it| it.mission_id);
    let mut tail = vec![0.0; items.len() + 1];
    for i in (0..items.len()).rev() {
        tail[i] = tail[i + 1] + items[i].u_uav;
    }
    let mut s = Search {
        cap,
        items,
        tail,
        best: Best { value: 0.0, incumbents: 0, ids: Vec::new() },
        chosen: Vec::new(),
        usage: Usage::default(),
    };
    s.dfs(0, 0.0, 0);
    s.best.ids
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchingState {
    /// Pair (by mission id) to its matched candidate, `None` if unmatched.
    pub mu: BTreeMap<MissionId, Option<UavId>>,
    /// Candidate to its accepted missions, ascending.
    pub accepted: BTreeMap<UavId, Vec<MissionId>>,
    /// Next preference index per pair; entries before it are struck.
    pub cursor: BTreeMap<MissionId, usize>,
    pub proposals: usize,
    pub rounds: usize,
    /// Chosen-set `U^N` sum per candidate after every re-choice.
    pub value_trace: BTreeMap<UavId, Vec<f64>>,
}

impl MatchingState {
    pub fn matched(&self) -> impl Iterator<Item = (MissionId, UavId)> + '_ {
        self.mu.iter().filter_map(|(&m, k)| k.map(|k| (m, k)))
    }
}

fn pool_items(inst: &MatchingInstance, cand: UavId, missions: &[MissionId], incumbent: bool) -> Vec<PoolItem> {
    missions
        .iter()
        .map(|&m| {
            let p = inst.pairs.iter().find(|p| p.mission_id == m).expect("mission in instance");
            let e = p.eval_for(cand).expect("candidate in preference list");
            PoolItem::from_eval(e, incumbent)
        })
        .collect()
}

fn check_ids(inst: &MatchingInstance) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for p in &inst.pairs {
        if !seen.insert(p.mission_id) {
            return Err(FrescoError::Argument(format!("mission {} appears twice", p.mission_id)));
        }
        for e in &p.prefs {
            if !inst.candidates.iter().any(|c| c.id == e.candidate_id) {
                return Err(FrescoError::Argument(format!(
                    "mission {} prefers unknown candidate {}",
                    p.mission_id, e.candidate_id
                )));
            }
        }
    }
    Ok(())
}

/// Deferred acceptance: unmatched pairs propose down their lists, each
/// candidate re-chooses over incumbents plus newcomers, and rejected pairs
/// strike that candidate for good.
pub fn run_matching(inst: &MatchingInstance) -> Result<MatchingState> {
    check_ids(inst)?;
    let mut st = MatchingState::default();
    for p in &inst.pairs {
        st.mu.insert(p.mission_id, None);
        st.cursor.insert(p.mission_id, 0);
    }
    for c in &inst.candidates {
        st.accepted.insert(c.id, Vec::new());
    }
    loop {
        let mut offers: BTreeMap<UavId, Vec<MissionId>> = BTreeMap::new();
        for p in &inst.pairs {
            let cur = st.cursor[&p.mission_id];
            if st.mu[&p.mission_id].is_none() && cur < p.prefs.len() {
                offers.entry(p.prefs[cur].candidate_id).or_default().push(p.mission_id);
                st.proposals += 1;
            }
        }
        if offers.is_empty() {
            break;
        }
        st.rounds += 1;
        for (k, newcomers) in offers {
            let cap = inst.candidates.iter().find(|c| c.id == k).expect("checked");
            let incumbents = st.accepted[&k].clone();
            let mut pool = pool_items(inst, k, &incumbents, true);
            pool.extend(pool_items(inst, k, &newcomers, false));
            let chosen = choose(cap, &pool);
            let chosen_items: Vec<PoolItem> = pool.iter().copied().filter(|it| chosen.contains(&it.mission_id)).collect();
            st.value_trace.entry(k).or_default().push(subset_value(&chosen_items));
            for it in &pool {
                if chosen.contains(&it.mission_id) {
                    st.mu.insert(it.mission_id, Some(k));
                } else {
                    st.mu.insert(it.mission_id, None);
                    *st.cursor.get_mut(&it.mission_id).expect("pair") += 1;
                }
            }
            st.accepted.insert(k, chosen);
        }
    }
    Ok(st)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockingPair {
    pub mission_id: MissionId,
    pub candidate_id: UavId,
}

/// Reports every (pair, candidate) where the pair strictly prefers the
/// candidate and the candidate could take it in a feasible re-selection
/// whose `U^N` sum is no smaller than its current one.
pub fn audit_blocking_pairs(inst: &MatchingInstance, st: &MatchingState) -> Vec<BlockingPair> {
    let mut out = Vec::new();
    for p in &inst.pairs {
        let current = st.mu.get(&p.mission_id).copied().flatten();
        let current_u = current.and_then(|k| p.eval_for(k)).map(|e| e.u_mission);
        for e in &p.prefs {
            if Some(e.candidate_id) == current {
                continue;
            }
            if let Some(u) = current_u {
                if !(e.u_mission > u) {
                    continue;
                }
            }
            let k = e.candidate_id;
            let Some(cap) = inst.candidates.iter().find(|c| c.id == k) else { continue };
            let held = st.accepted.get(&k).cloned().unwrap_or_default();
            let held_items = pool_items(inst, k, &held, true);
            let baseline = subset_value(&held_items);
            let newcomer = PoolItem::from_eval(e, false);
            let n = held_items.len();
            let hit = (0u64..1 << n).any(|mask| {
                let mut items: Vec<PoolItem> =
                    (0..n).filter(|b| mask >> b & 1 == 1).map(|b| held_items[b]).collect();
                items.push(newcomer);
                items.sort_by_key(|it| it.mission_id);
                subset_feasible(cap, &items) && subset_value(&items) >= baseline
            });
            if hit {
                out.push(BlockingPair { mission_id: p.mission_id, candidate_id: k });
            }
        }
    }
    out
}

/// Welfare of an assignment, summed in pair order.
pub fn assignment_welfare(inst: &MatchingInstance, assign: &[Option<UavId>]) -> f64 {
    inst.pairs
        .iter()
        .zip(assign)
        .filter_map(|(p, k)| k.and_then(|k| p.eval_for(k)))
        .fold(0.0, |acc, e| acc + e.welfare)
}

/// The final matching as an assignment in pair order.
pub fn as_assignment(inst: &MatchingInstance, st: &MatchingState) -> Vec<Option<UavId>> {
    inst.pairs.iter().map(|p| st.mu.get(&p.mission_id).copied().flatten()).collect()
}

/// Whether an assignment satisfies one-per-pair, preference membership and
/// every candidate's budgets.
pub fn assignment_feasible(inst: &MatchingInstance, assign: &[Option<UavId>]) -> bool {
    if assign.len() != inst.pairs.len() {
        return false;
    }
    let mut groups: BTreeMap<UavId, Vec<PoolItem>> = BTreeMap::new();
    for (p, k) in inst.pairs.iter().zip(assign) {
        if let Some(k) = k {
            let Some(e) = p.eval_for(*k) else { return false };
            groups.entry(*k).or_default().push(PoolItem::from_eval(e, false));
        }
    }
    groups.iter().all(|(k, items)| {
        inst.candidates
            .iter()
            .find(|c| c.id == *k)
            .is_some_and(|cap| subset_feasible(cap, items))
    })
}

/// Enumerates all `(|C|+1)^|P|` assignments and returns a welfare maximizer.
/// Earlier assignments in lexicographic order (unmatched first, then
/// candidates by id) win ties.
pub fn brute_force_optimum(inst: &MatchingInstance) -> Result<(Vec<Option<UavId>>, f64)> {
    if inst.pairs.len() > ORACLE_MAX_PAIRS || inst.candidates.len() > ORACLE_MAX_CANDIDATES {
        return Err(FrescoError::Argument(format!(
            "oracle supports at most {ORACLE_MAX_PAIRS} pairs and {ORACLE_MAX_CANDIDATES} candidates, got {}x{}",
            inst.pairs.len(),
            inst.candidates.len()
        )));
    }
    let mut ids: Vec<UavId> = inst.candidates.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    let options: Vec<Option<UavId>> = std::iter::once(None).chain(ids.into_iter().map(Some)).collect();
    let n = inst.pairs.len();
    let mut digits = vec![0usize; n];
    let mut best = (vec![None; n], 0.0);
    loop {
        let assign: Vec<Option<UavId>> = digits.iter().map(|&d| options[d]).collect();
        if assignment_feasible(inst, &assign) {
            let w = assignment_welfare(inst, &assign);
            if w > best.1 {
                best = (assign, w);
            }
        }
        // odometer, first pair most significant
        let mut i = n;
        loop {
            if i == 0 {
                return Ok(best);
            }
            i -= 1;
            digits[i] += 1;
            if digits[i] < options.len() {
                break;
            }
            digits[i] = 0;
        }
    }
}

/// Consistency and constraint checks on a final state; empty when sound.
pub fn check_state(inst: &MatchingInstance, st: &MatchingState) -> Vec<String> {
    let mut out = rationality_violations(inst, st);
    let bound = proposal_bound(inst);
    if st.proposals > bound {
        out.push(format!("{} proposals exceed bound {bound}", st.proposals));
    }
    out
}

pub fn proposal_bound(inst: &MatchingInstance) -> usize {
    inst.pairs.len() * inst.candidates.len()
}

/// Map consistency, budget feasibility and individual rationality on both
/// sides.
pub fn rationality_violations(inst: &MatchingInstance, st: &MatchingState) -> Vec<String> {
    let mut out = Vec::new();
    for (m, k) in &st.mu {
        if let Some(k) = k {
            if !st.accepted.get(k).is_some_and(|a| a.contains(m)) {
                out.push(format!("mission {m} maps to {k} but is not in its accepted set"));
            }
        }
    }
    for (k, acc) in &st.accepted {
        for m in acc {
            if st.mu.get(m).copied().flatten() != Some(*k) {
                out.push(format!("candidate {k} holds mission {m} which maps elsewhere"));
            }
        }
    }
    let assign = as_assignment(inst, st);
    if !assignment_feasible(inst, &assign) {
        out.push("assignment violates a budget or preference constraint".into());
    }
    for (p, k) in inst.pairs.iter().zip(&assign) {
        if let Some(e) = k.and_then(|k| p.eval_for(k)) {
            if e.u_mission < 0.0 {
                out.push(format!("mission {} matched with negative U^U", p.mission_id));
            }
        }
    }
    for (k, acc) in &st.accepted {
        let items = pool_items(inst, *k, acc, true);
        if subset_value(&items) < 0.0 {
            out.push(format!("candidate {k} accepted set has negative U^N sum"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LinkSnapshot;
    use crate::template::ReservationTemplate;
    use proptest::prelude::*;

    fn cap(id: UavId, b: f64, f: f64, e: f64, links: &[(UavId, f64)]) -> CandidateCapacity {
        CandidateCapacity {
            id,
            b_ava: b,
            f_ava: f,
            energy_headroom: e,
            link_residual: links.iter().copied().collect(),
        }
    }

    fn item(m: MissionId, serving: UavId, b_acc: f64, u: f64) -> PoolItem {
        PoolItem { mission_id: m, serving_id: serving, b_syn: 0.0, b_acc, f: 0.0, e_res: 0.0, u_uav: u, incumbent: false }
    }

    fn ev(m: MissionId, k: UavId, b_acc: f64, uu: f64, un: f64) -> CandidateEvaluation {
        CandidateEvaluation {
            mission_id: m,
            serving_id: 100,
            candidate_id: k,
            risk: 0.5,
            template: ReservationTemplate { b_acc_min: b_acc, ..Default::default() },
            links: LinkSnapshot::default(),
            u_mission: uu,
            u_uav: un,
            c_res: 0.0,
            welfare: uu + un,
            feasible: true,
            acceptable: uu >= 0.0,
        }
    }

    fn exhaustive(cap: &CandidateCapacity, pool: &[PoolItem]) -> f64 {
        let n = pool.len();
        (0u32..1 << n)
            .filter_map(|mask| {
                let items: Vec<PoolItem> = (0..n).filter(|b| mask >> b & 1 == 1).map(|b| pool[b]).collect();
                (items.iter().all(|it| it.u_uav >= 0.0) && subset_feasible(cap, &items)).then(|| subset_value(&items))
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn choose_trivial_pools() {
        let c = cap(1, 10.0, 10.0, 10.0, &[(100, 10.0)]);
        assert!(choose(&c, &[]).is_empty());
        assert!(choose(&c, &[item(0, 100, 1.0, -0.1), item(1, 100, 1.0, -2.0)]).is_empty());
    }

    #[test]
    fn choose_binding_bandwidth_matches_exhaustive() {
        let c = cap(1, 10.0, 10.0, 10.0, &[(100, 10.0)]);
        let pool = [
            item(0, 100, 6.0, 5.0),
            item(1, 100, 5.0, 3.0),
            item(2, 100, 5.0, 3.0),
            item(3, 100, 4.0, 3.5),
            item(4, 100, 3.0, 1.0),
            item(5, 100, 2.0, 0.4),
        ];
        let chosen = choose(&c, &pool);
        let items: Vec<_> = pool.iter().copied().filter(|it| chosen.contains(&it.mission_id)).collect();
        assert!(subset_feasible(&c, &items));
        assert_eq!(subset_value(&items), exhaustive(&c, &pool));
    }

    #[test]
    fn choose_prefers_incumbents_on_ties() {
        let c = cap(1, 5.0, 10.0, 10.0, &[(100, 10.0)]);
        let mut a = item(0, 100, 5.0, 1.0);
        let mut b = item(1, 100, 5.0, 1.0);
        assert_eq!(choose(&c, &[a, b]), vec![0]);
        b.incumbent = true;
        assert_eq!(choose(&c, &[a, b]), vec![1]);
        a.incumbent = true;
        assert_eq!(choose(&c, &[a, b]), vec![0]);
    }

    #[test]
    fn choose_respects_per_link_sync_capacity() {
        let c = cap(1, 10.0, 10.0, 10.0, &[(100, 3.0), (200, 3.0)]);
        let mut a = item(0, 100, 1.0, 1.0);
        a.b_syn = 2.0;
        let mut b = item(1, 100, 1.0, 1.0);
        b.b_syn = 2.0;
        let mut d = item(2, 200, 1.0, 1.0);
        d.b_syn = 2.0;
        assert_eq!(choose(&c, &[a, b, d]), vec![0, 2]);
    }

    #[test]
    fn single_pair_single_candidate_matches() {
        let inst = MatchingInstance {
            pairs: vec![PairEntry { mission_id: 0, serving_id: 100, prefs: vec![ev(0, 1, 1.0, 0.5, 0.2)] }],
            candidates: vec![cap(1, 10.0, 10.0, 10.0, &[(100, 10.0)])],
        };
        let st = run_matching(&inst).unwrap();
        assert_eq!(st.mu[&0], Some(1));
        assert_eq!(st.proposals, 1);
        assert!(check_state(&inst, &st).is_empty());
    }

    #[test]
    fn empty_preferences_give_empty_matching() {
        let inst = MatchingInstance {
            pairs: vec![
                PairEntry { mission_id: 0, serving_id: 100, prefs: vec![] },
                PairEntry { mission_id: 1, serving_id: 100, prefs: vec![] },
            ],
            candidates: vec![cap(1, 10.0, 10.0, 10.0, &[])],
        };
        let st = run_matching(&inst).unwrap();
        assert_eq!(st.proposals, 0);
        assert_eq!(st.matched().count(), 0);
        assert!(audit_blocking_pairs(&inst, &st).is_empty());
    }

    #[test]
    fn constructed_unstable_matching_is_reported() {
        // mission 0 likes candidate 1 best; 1 has room and U^N > 0
        let inst = MatchingInstance {
            pairs: vec![PairEntry {
                mission_id: 0,
                serving_id: 100,
                prefs: vec![ev(0, 1, 1.0, 0.9, 0.3), ev(0, 2, 1.0, 0.4, 0.3)],
            }],
            candidates: vec![cap(1, 10.0, 10.0, 10.0, &[(100, 10.0)]), cap(2, 10.0, 10.0, 10.0, &[(100, 10.0)])],
        };
        let mut st = MatchingState::default();
        st.mu.insert(0, Some(2));
        st.accepted.insert(1, vec![]);
        st.accepted.insert(2, vec![0]);
        let report = audit_blocking_pairs(&inst, &st);
        assert_eq!(report, vec![BlockingPair { mission_id: 0, candidate_id: 1 }]);
        let fixed = run_matching(&inst).unwrap();
        assert!(audit_blocking_pairs(&inst, &fixed).is_empty());
    }

    #[test]
    fn oracle_trivial_cases() {
        let inst = MatchingInstance {
            pairs: vec![PairEntry { mission_id: 0, serving_id: 100, prefs: vec![ev(0, 1, 20.0, 0.5, 0.5)] }],
            candidates: vec![cap(1, 10.0, 10.0, 10.0, &[(100, 10.0)])],
        };
        assert_eq!(brute_force_optimum(&inst).unwrap(), (vec![None], 0.0));
        let ok = MatchingInstance {
            pairs: vec![PairEntry { mission_id: 0, serving_id: 100, prefs: vec![ev(0, 1, 2.0, 0.5, 0.7)] }],
            ..inst.clone()
        };
        let (a, w) = brute_force_optimum(&ok).unwrap();
        assert_eq!(a, vec![Some(1)]);
        assert_eq!(w, 1.2);
        assert_eq!(w, assignment_welfare(&ok, &a));
    }

    #[test]
    fn oracle_guard() {
        let inst = MatchingInstance {
            pairs: (0..7).map(|m| PairEntry { mission_id: m, serving_id: 100, prefs: vec![] }).collect(),
            candidates: vec![],
        };
        assert!(matches!(brute_force_optimum(&inst), Err(FrescoError::Argument(_))));
    }

    #[test]
    fn knapsack_choice_can_leave_a_blocking_pair() {
        // p is rejected in favour of {q, r}; s later displaces r, after which {p, s} would do better
        let k = 1;
        let inst = MatchingInstance {
            pairs: vec![
                PairEntry { mission_id: 0, serving_id: 100, prefs: vec![ev(0, k, 6.0, 1.0, 5.0)] },
                PairEntry { mission_id: 1, serving_id: 100, prefs: vec![ev(1, k, 5.0, 1.0, 3.0)] },
                PairEntry { mission_id: 2, serving_id: 100, prefs: vec![ev(2, k, 5.0, 1.0, 3.0)] },
                PairEntry {
                    mission_id: 3,
                    serving_id: 100,
                    prefs: vec![ev(3, 2, 1.0, 2.0, -1.0), ev(3, k, 4.0, 1.0, 3.5)],
                },
            ],
            candidates: vec![cap(k, 10.0, 100.0, 100.0, &[(100, 100.0)]), cap(2, 10.0, 100.0, 100.0, &[(100, 100.0)])],
        };
        let st = run_matching(&inst).unwrap();
        assert!(check_state(&inst, &st).is_empty());
        assert_eq!(st.accepted[&k], vec![1, 3]);
        assert_eq!(
            audit_blocking_pairs(&inst, &st),
            vec![
                BlockingPair { mission_id: 0, candidate_id: k },
                // {2, 3} ties the held value, which counts under weak blocking
                BlockingPair { mission_id: 2, candidate_id: k },
            ]
        );
    }

    fn arb_instance(max_pairs: usize, max_cands: usize) -> impl Strategy<Value = MatchingInstance> {
        (1..=max_pairs, 1..=max_cands).prop_flat_map(|(np, nc)| {
            let evals = prop::collection::vec(
                (prop::bool::weighted(0.8), 0.5..6.0f64, 0.0..1.0f64, -0.3..1.0f64, 0.0..2.0f64, 0.0..1.0f64),
                np * nc,
            );
            let caps = prop::collection::vec((2.0..12.0f64, 2.0..12.0f64, 0.2..3.0f64), nc);
            (Just((np, nc)), evals, caps).prop_map(|((np, nc), evals, caps)| {
                let candidates: Vec<CandidateCapacity> = caps
                    .iter()
                    .enumerate()
                    .map(|(k, &(b, f, e))| cap(10 + k, b, f, e, &[(100, 6.0), (101, 6.0)]))
                    .collect();
                let pairs = (0..np)
                    .map(|m| {
                        let serving = 100 + m % 2;
                        let mut prefs: Vec<CandidateEvaluation> = (0..nc)
                            .filter_map(|k| {
                                let (keep, size, uu, un, bs, er) = evals[m * nc + k];
                                keep.then(|| {
                                    let mut e = ev(m, 10 + k, size, uu, un);
                                    e.serving_id = serving;
                                    e.template.f_min = size * 0.7;
                                    e.template.b_syn_min = bs;
                                    e.template.e_res = er;
                                    e
                                })
                            })
                            .collect();
                        prefs = crate::utility::preference_set(&prefs);
                        PairEntry { mission_id: m, serving_id: serving, prefs }
                    })
                    .collect();
                MatchingInstance { pairs, candidates }
            })
        })
    }

    proptest! {
        #[test]
        fn choose_equals_exhaustive(
            raw in prop::collection::vec((0.5..6.0f64, -1.0..4.0f64, any::<bool>(), 0usize..2), 0..8),
            budget in 2.0..15.0f64,
        ) {
            let c = cap(1, budget, 100.0, 100.0, &[(100, 4.0), (101, 4.0)]);
            let pool: Vec<PoolItem> = raw.iter().enumerate().map(|(m, &(s, u, inc, j))| {
                let mut it = item(m, 100 + j, s, u);
                it.b_syn = s / 3.0;
                it.incumbent = inc;
                it
            }).collect();
            let chosen = choose(&c, &pool);
            let items: Vec<_> = pool.iter().copied().filter(|it| chosen.contains(&it.mission_id)).collect();
            prop_assert!(subset_feasible(&c, &items));
            prop_assert!(items.iter().all(|it| it.u_uav >= 0.0));
            prop_assert_eq!(subset_value(&items), exhaustive(&c, &pool));
        }

        #[test]
        fn matching_is_feasible_bounded_and_monotone(inst in arb_instance(5, 4)) {
            let st = run_matching(&inst).unwrap();
            prop_assert!(check_state(&inst, &st).is_empty(), "{:?}", check_state(&inst, &st));
            prop_assert!(st.proposals <= inst.pairs.len() * inst.candidates.len());
            for trace in st.value_trace.values() {
                for w in trace.windows(2) {
                    prop_assert!(w[1] >= w[0]);
                }
            }
        }

        #[test]
        fn matching_never_beats_oracle(inst in arb_instance(3, 3)) {
            let st = run_matching(&inst).unwrap();
            let w = assignment_welfare(&inst, &as_assignment(&inst, &st));
            let (best, w_star) = brute_force_optimum(&inst).unwrap();
            prop_assert!(assignment_feasible(&inst, &best));
            prop_assert!(w <= w_star);
        }
    }
}

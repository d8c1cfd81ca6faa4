//! Post-takeover delay and the minimum reserved-resource template.
//!
//! With `a = ((1-s)ζ / log2(1+γ_syn), D_rem / log2(1+γ_cand), C_rem)` the
//! takeover delay is `Σ a_m / x_m` over the resources
//! `x = (B_syn, B_acc, F)`. The template minimizes `Σ ν_m x_m` subject to
//! `Σ a_m / x_m ≤ T_max` and `0 ≤ x ≤ upper`. Stationarity gives
//! `x_m = sqrt(λ a_m / ν_m)`; λ has a closed form on the unclamped indices,
//! and any index that overshoots its box is pinned there before re-solving.

use serde::{Deserialize, Serialize};

use crate::error::{FrescoError, Result};
use crate::geo::{access_rate, sync_rate, LinkSnapshot};
use crate::model::MissionState;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReservationTemplate {
    /// MHz
    pub b_syn_min: f64,
    /// MHz
    pub b_acc_min: f64,
    /// Gcycles/s
    pub f_min: f64,
    /// Takeover delay achieved by the template (s).
    pub d_tk_min: f64,
    /// Reservation energy (kJ/slot).
    pub e_res: f64,
}

impl ReservationTemplate {
    pub fn resources(&self) -> [f64; 3] {
        [self.b_syn_min, self.b_acc_min, self.f_min]
    }
}

/// Upper bounds on the three reserved resources.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceBox {
    pub b_link: f64,
    pub b_ava: f64,
    pub f_ava: f64,
}

impl ResourceBox {
    pub fn as_array(&self) -> [f64; 3] {
        [self.b_link, self.b_ava, self.f_ava]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyCoeffs {
    /// kJ per MHz per second
    pub kappa_b: f64,
    /// kJ per Gcycles/s per second
    pub kappa_f: f64,
}

fn term(numerator: f64, rate: f64) -> f64 {
    if numerator <= 0.0 {
        0.0
    } else if rate <= 0.0 {
        f64::INFINITY
    } else {
        numerator / rate
    }
}

/// Post-takeover completion delay. Terms with a zero numerator contribute
/// nothing; a positive numerator over a zero rate yields `f64::INFINITY`.
pub fn takeover_delay(
    m: &MissionState,
    s: f64,
    b_syn: f64,
    b_acc: f64,
    f: f64,
    links: &LinkSnapshot,
) -> f64 {
    delay_from_parts(
        s,
        m.zeta,
        m.d_rem,
        m.c_rem,
        b_syn,
        b_acc,
        f,
        links.snr_serving_candidate,
        links.snr_mu_candidate,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn delay_from_parts(
    s: f64,
    zeta: f64,
    d_rem: f64,
    c_rem: f64,
    b_syn: f64,
    b_acc: f64,
    f: f64,
    snr_syn: f64,
    snr_cand: f64,
) -> f64 {
    let r_syn = sync_rate(b_syn.max(0.0), snr_syn.max(0.0)).unwrap_or(0.0);
    let r_tk = access_rate(b_acc.max(0.0), snr_cand.max(0.0)).unwrap_or(0.0);
    term((1.0 - s).max(0.0) * zeta, r_syn) + term(d_rem, r_tk) + term(c_rem, f)
}

/// Everything the template problem needs about one triplet.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateRequest {
    pub s: f64,
    pub zeta: f64,
    pub d_rem: f64,
    pub c_rem: f64,
    pub t_max: f64,
    pub snr_syn: f64,
    pub snr_cand: f64,
}

impl TemplateRequest {
    pub fn new(m: &MissionState, s: f64, links: &LinkSnapshot) -> Self {
        TemplateRequest {
            s,
            zeta: m.zeta,
            d_rem: m.d_rem,
            c_rem: m.c_rem,
            t_max: m.t_max,
            snr_syn: links.snr_serving_candidate,
            snr_cand: links.snr_mu_candidate,
        }
    }

    /// Coefficients `a` of the delay `Σ a_m / x_m`.
    pub fn coefficients(&self) -> [f64; 3] {
        let per_hz = |num: f64, snr: f64| {
            if num <= 0.0 {
                0.0
            } else {
                let se = (1.0 + snr.max(0.0)).log2();
                if se > 0.0 {
                    num / se
                } else {
                    f64::INFINITY
                }
            }
        };
        [
            per_hz((1.0 - self.s).max(0.0) * self.zeta, self.snr_syn),
            per_hz(self.d_rem, self.snr_cand),
            self.c_rem.max(0.0),
        ]
    }

    pub fn delay(&self, x: [f64; 3]) -> f64 {
        delay_from_parts(
            self.s, self.zeta, self.d_rem, self.c_rem, x[0], x[1], x[2], self.snr_syn, self.snr_cand,
        )
    }
}

fn inverse_sum(a: &[f64; 3], x: &[f64; 3]) -> f64 {
    (0..3).map(|m| term(a[m], x[m])).sum()
}

/// Minimizes `Σ ν_m x_m` subject to `Σ a_m / x_m ≤ budget`, `0 ≤ x ≤ upper`.
///
/// Returns `Ok(None)` when even the upper bounds miss the budget. Indices
/// with `a_m = 0` get `x_m = 0`.
pub fn solve_inverse_budget(
    a: [f64; 3],
    nu: [f64; 3],
    upper: [f64; 3],
    budget: f64,
) -> Result<Option<[f64; 3]>> {
    if nu.iter().any(|w| !(*w > 0.0)) {
        return Err(FrescoError::Argument(format!("template weights must be positive, got {nu:?}")));
    }
    if a.iter().any(|v| v.is_nan() || *v < 0.0) || upper.iter().any(|u| u.is_nan() || *u < 0.0) {
        return Err(FrescoError::Argument("template coefficients and boxes must be >= 0".into()));
    }
    let active: Vec<usize> = (0..3).filter(|&m| a[m] > 0.0).collect();
    if active.is_empty() {
        return Ok(Some([0.0; 3]));
    }
    if active.iter().any(|&m| !a[m].is_finite()) || !(inverse_sum(&a, &upper) <= budget) {
        return Ok(None);
    }

    let mut x = [0.0; 3];
    let mut clamped = [false; 3];
    // every overshooting round pins at least one more index
    for _ in 0..=3 {
        let free: Vec<usize> = active.iter().copied().filter(|&m| !clamped[m]).collect();
        if free.is_empty() {
            break;
        }
        let spent: f64 = active
            .iter()
            .filter(|&&m| clamped[m])
            .map(|&m| a[m] / upper[m])
            .sum();
        let remaining = budget - spent;
        let root_lambda: f64 = free.iter().map(|&m| (a[m] * nu[m]).sqrt()).sum::<f64>() / remaining;
        let mut overshoot = false;
        for &m in &free {
            x[m] = (a[m] / nu[m]).sqrt() * root_lambda;
            if x[m] > upper[m] {
                clamped[m] = true;
                overshoot = true;
            }
        }
        if !overshoot {
            break;
        }
    }
    for m in 0..3 {
        if clamped[m] {
            x[m] = upper[m];
        }
    }
    // rounding can leave the delay a few ulps over budget
    let mut guard = 0;
    while inverse_sum(&a, &x) > budget && guard < 8 {
        for &m in &active {
            if !clamped[m] {
                x[m] = (x[m] * (1.0 + 4.0 * f64::EPSILON)).min(upper[m]);
            }
        }
        guard += 1;
    }
    Ok(Some(x))
}

/// Cheapest template meeting the deadline inside `boxes`, or `None`.
pub fn solve_min_template(
    req: &TemplateRequest,
    nu: [f64; 3],
    boxes: &ResourceBox,
    coeffs: &EnergyCoeffs,
    tau: f64,
) -> Result<Option<ReservationTemplate>> {
    let a = req.coefficients();
    let Some(x) = solve_inverse_budget(a, nu, boxes.as_array(), req.t_max)? else {
        return Ok(None);
    };
    let mut t = ReservationTemplate {
        b_syn_min: x[0],
        b_acc_min: x[1],
        f_min: x[2],
        d_tk_min: inverse_sum(&a, &x),
        e_res: 0.0,
    };
    if !(t.d_tk_min <= req.t_max) {
        return Ok(None);
    }
    t.e_res = reservation_energy(&t, coeffs, tau);
    Ok(Some(t))
}

/// Per-slot energy of holding a reservation, linear in reserved resources.
pub fn reservation_energy(t: &ReservationTemplate, coeffs: &EnergyCoeffs, tau: f64) -> f64 {
    (coeffs.kappa_b * (t.b_syn_min + t.b_acc_min) + coeffs.kappa_f * t.f_min) * tau
}

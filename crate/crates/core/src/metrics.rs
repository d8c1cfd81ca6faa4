//! The nine evaluation metrics, per-group aggregation and CSV encoding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{Episode, EventKind, SlotEvent};
use crate::error::{FrescoError, Result};
use crate::model::{MissionStatus, WorldState};

pub const METRIC_NAMES: [&str; 9] = ["scr", "aid_s", "tcr", "trr", "acstr", "fr", "adt_ms", "peo_kj", "asw"];
pub const METRICS_HEADER: &str = "policy,scale,seed,scr,aid_s,tcr,trr,acstr,fr,adt_ms,peo_kj,asw,aid_defined";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub policy: String,
    pub scale: String,
    pub seed: u64,
    pub scr: f64,
    pub aid_s: f64,
    pub tcr: f64,
    pub trr: f64,
    pub acstr: f64,
    pub fr: f64,
    pub adt_ms: f64,
    pub peo_kj: f64,
    pub asw: f64,
    /// False when no mission was interrupted and `aid_s` is a placeholder 0.
    pub aid_defined: bool,
}

impl MetricsRow {
    pub fn values(&self) -> [f64; 9] {
        [self.scr, self.aid_s, self.tcr, self.trr, self.acstr, self.fr, self.adt_ms, self.peo_kj, self.asw]
    }
}

/// Alarm outcome counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AlarmCounts {
    pub alarms: usize,
    pub ready: usize,
    pub takeover: usize,
    pub maintain: usize,
    pub fallback: usize,
}

pub fn alarm_counts(events: &[SlotEvent]) -> AlarmCounts {
    let mut c = AlarmCounts::default();
    for e in events.iter().filter(|e| e.kind == EventKind::Alarm) {
        c.alarms += 1;
        if e.detail.get("ready").and_then(|v| v.as_bool()) == Some(true) {
            c.ready += 1;
        }
        match e.text("outcome") {
            Some("takeover") => c.takeover += 1,
            Some("maintain") => c.maintain += 1,
            _ => c.fallback += 1,
        }
    }
    c
}

/// Folds a trace and final world into one metrics row.
pub fn compute_metrics(
    policy: &str,
    scale: &str,
    seed: u64,
    events: &[SlotEvent],
    world: &WorldState,
    decision_ms: &[f64],
    tau: f64,
) -> MetricsRow {
    let n = world.missions.len().max(1) as f64;
    let clean = world.missions.iter().filter(|m| m.interrupted_slots == 0).count();
    let hit: Vec<f64> = world
        .missions
        .iter()
        .filter(|m| m.interrupted_slots > 0)
        .map(|m| f64::from(m.interrupted_slots) * tau)
        .collect();
    let aid_defined = !hit.is_empty();
    let aid_s = if aid_defined { hit.iter().sum::<f64>() / hit.len() as f64 } else { 0.0 };

    let mut late = vec![false; world.missions.len()];
    for e in events.iter().filter(|e| e.kind == EventKind::Takeover) {
        if let (Some(m), Some(d), Some(tm)) = (e.mission_id(), e.num("delay"), e.num("t_max")) {
            if d > tm * (1.0 + 1e-9) {
                late[m] = true;
            }
        }
    }
    let on_time = world
        .missions
        .iter()
        .filter(|m| m.status == MissionStatus::Completed && !late[m.id])
        .count();

    let a = alarm_counts(events);
    let (trr, acstr, fr) = if a.alarms == 0 {
        (1.0, 1.0, 0.0)
    } else {
        let d = a.alarms as f64;
        (a.ready as f64 / d, a.takeover as f64 / d, a.fallback as f64 / d)
    };
    let peo: f64 = events
        .iter()
        .filter(|e| e.kind == EventKind::Sync)
        .filter_map(|e| e.num("energy"))
        .fold(0.0, |a, b| a + b);
    let welfare: f64 = events
        .iter()
        .filter(|e| e.kind == EventKind::Reserve && e.text("action") == Some("form"))
        .filter_map(|e| e.num("welfare"))
        .fold(0.0, |a, b| a + b);
    let adt = if decision_ms.is_empty() {
        0.0
    } else {
        decision_ms.iter().sum::<f64>() / decision_ms.len() as f64
    };
    MetricsRow {
        policy: policy.to_string(),
        scale: scale.to_string(),
        seed,
        scr: clean as f64 / n,
        aid_s,
        tcr: on_time as f64 / n,
        trr,
        acstr,
        fr,
        adt_ms: adt,
        peo_kj: peo / n,
        asw: welfare / n,
        aid_defined,
    }
}

pub fn episode_metrics(policy: &str, scale: &str, seed: u64, ep: &Episode, tau: f64) -> MetricsRow {
    compute_metrics(policy, scale, seed, &ep.events, &ep.world, &ep.decision_ms, tau)
}

/// `%g`-style rendering with six significant digits.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mant), exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRICS_HEADER.split(',')).expect("in-memory write");
    for r in rows {
        let mut rec = vec![r.policy.clone(), r.scale.clone(), r.seed.to_string()];
        rec.extend(r.values().iter().map(|v| fmt_sig(*v)));
        rec.push(u8::from(r.aid_defined).to_string());
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    rec.get(i)
        .ok_or_else(|| FrescoError::parse("metrics csv", format!("missing column `{name}`")))?
        .trim()
        .parse()
        .map_err(|_| FrescoError::parse("metrics csv", format!("bad value in column `{name}`")))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| FrescoError::parse("metrics csv", e))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let expected: Vec<&str> = METRICS_HEADER.split(',').collect();
    if cols != expected && cols[..] != expected[..expected.len() - 1] {
        return Err(FrescoError::parse("metrics csv", format!("unexpected header `{}`", cols.join(","))));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| FrescoError::parse("metrics csv", e))?;
        if rec.len() != cols.len() {
            return Err(FrescoError::parse("metrics csv", "row width differs from header"));
        }
        let mut v = [0.0; 9];
        for (i, name) in METRIC_NAMES.iter().enumerate() {
            v[i] = field(&rec, 3 + i, name)?;
        }
        let aid_defined = if cols.len() == 13 { field::<u8>(&rec, 12, "aid_defined")? != 0 } else { v[1] > 0.0 };
        out.push(MetricsRow {
            policy: rec[0].to_string(),
            scale: rec[1].to_string(),
            seed: field(&rec, 2, "seed")?,
            scr: v[0],
            aid_s: v[1],
            tcr: v[2],
            trr: v[3],
            acstr: v[4],
            fr: v[5],
            adt_ms: v[6],
            peo_kj: v[7],
            asw: v[8],
            aid_defined,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub scale: String,
    pub n: usize,
    pub mean: [f64; 9],
    pub std: [f64; 9],
}

/// Sample mean and (n−1) standard deviation per (policy, scale).
pub fn aggregate(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.policy.clone(), r.scale.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((policy, scale), g)| {
            let n = g.len();
            let mut mean = [0.0; 9];
            let mut std = [0.0; 9];
            for i in 0..9 {
                let xs: Vec<f64> = g.iter().map(|r| r.values()[i]).collect();
                let m = xs.iter().sum::<f64>() / n as f64;
                mean[i] = m;
                std[i] = if n > 1 {
                    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
            }
            SummaryRow { policy, scale, n, mean, std }
        })
        .collect()
}

pub fn summary_header() -> String {
    let mut cols = vec!["policy".to_string(), "scale".to_string(), "n".to_string()];
    for m in METRIC_NAMES {
        cols.push(format!("{m}_mean"));
        cols.push(format!("{m}_std"));
    }
    cols.join(",")
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(summary_header().split(',')).expect("in-memory write");
    for r in rows {
        let mut rec = vec![r.policy.clone(), r.scale.clone(), r.n.to_string()];
        for i in 0..9 {
            rec.push(fmt_sig(r.mean[i]));
            rec.push(fmt_sig(r.std[i]));
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

//! Fits the unreported device and row constants to the reported
//! behavioural targets by derivative-free coordinate search.

use serde::{Deserialize, Serialize};

use crate::analysis::{metrics, monte_carlo_with, Metrics, MonteCarloSpec};
use crate::array::multiply;
use crate::device::Temperature;
use crate::error::{Error, Result};
use crate::params::Params;

/// Behavioural targets and their tolerance bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub baseline_saturation: Option<f64>,
    pub baseline_subthreshold: Option<f64>,
    pub cell_fluctuation: Option<f64>,
    pub cell_fluctuation_20_85: Option<f64>,
    pub nmr_full: Option<f64>,
    pub nmr_20_85: Option<f64>,
    pub average_energy: Option<f64>,
    /// Worst Monte Carlo error with 8 and 4 cells per row.
    pub variation_8: Option<f64>,
    pub variation_4: Option<f64>,
}

impl Default for Targets {
    fn default() -> Self {
        Self {
            baseline_saturation: Some(0.206),
            baseline_subthreshold: Some(0.521),
            cell_fluctuation: Some(0.266),
            cell_fluctuation_20_85: Some(0.124),
            nmr_full: Some(0.22),
            nmr_20_85: Some(2.3),
            average_energy: Some(3.14e-15),
            variation_8: None,
            variation_4: None,
        }
    }
}

impl Targets {
    pub fn without_nmr(mut self) -> Self {
        self.nmr_full = None;
        self.nmr_20_85 = None;
        self
    }

    fn is_empty(&self) -> bool {
        [
            self.baseline_saturation,
            self.baseline_subthreshold,
            self.cell_fluctuation,
            self.cell_fluctuation_20_85,
            self.nmr_full,
            self.nmr_20_85,
            self.average_energy,
            self.variation_8,
            self.variation_4,
        ]
        .iter()
        .all(Option::is_none)
    }
}

/// One weighted term of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub value: f64,
    pub target: f64,
    /// Normalized, squared contribution.
    pub cost: f64,
}

fn band(name: &str, value: f64, target: f64, scale: f64) -> Term {
    Term {
        name: name.into(),
        value,
        target,
        cost: ((value - target) / scale).powi(2),
    }
}

/// Penalty for `value` exceeding `limit` (zero below it).
fn ceiling(name: &str, value: f64, limit: f64, scale: f64) -> Term {
    Term {
        name: name.into(),
        value,
        target: limit,
        cost: ((value - limit).max(0.0) / scale).powi(2),
    }
}

/// Scores `m` against `targets`. Structural requirements (argmin levels,
/// baseline overlap, cell beating the subthreshold baseline) are always
/// included as hinge terms.
pub fn score(m: &Metrics, v: Option<&Variation>, targets: &Targets) -> Vec<Term> {
    let mut terms = Vec::new();
    if let Some(t) = targets.baseline_saturation {
        terms.push(band("baseline_saturation", m.baseline_sat_fluctuation, t, 0.01));
    }
    if let Some(t) = targets.baseline_subthreshold {
        terms.push(band("baseline_subthreshold", m.baseline_sub_fluctuation, t, 0.015));
    }
    if let Some(t) = targets.cell_fluctuation {
        terms.push(ceiling("cell_fluctuation", m.cell_fluctuation, t, 0.01));
    }
    if let Some(t) = targets.cell_fluctuation_20_85 {
        terms.push(ceiling("cell_fluctuation_20_85", m.cell_fluctuation_20_85, t, 0.01));
    }
    if let Some(t) = targets.nmr_full {
        let r = &m.nmr_full;
        terms.push(band("nmr_full", r.nmr[0].min(10.0), t, 0.05));
        let others = r.nmr[1..].iter().copied().fold(f64::INFINITY, f64::min);
        terms.push(ceiling("nmr_full_argmin", r.nmr[0] + 0.05, others.min(10.0), 0.05));
    }
    if let Some(t) = targets.nmr_20_85 {
        let r = &m.nmr_20_85;
        let last = r.nmr.len() - 1;
        terms.push(band("nmr_20_85", r.nmr[last].min(10.0), t, 0.25));
        let others = r.nmr[..last].iter().copied().fold(f64::INFINITY, f64::min);
        terms.push(ceiling("nmr_20_85_argmin", r.nmr[last] + 0.02, others.min(20.0), 0.1));
    }
    if let Some(t) = targets.average_energy {
        terms.push(band("average_energy", m.average_energy / t, 1.0, 0.1));
    }
    if let Some(v) = v {
        if let Some(t) = targets.variation_8 {
            terms.push(band("variation_8", v.error_8, t, 0.02));
        }
        if let Some(t) = targets.variation_4 {
            terms.push(band("variation_4", v.error_4, t, 0.02));
        }
    }
    terms.push(ceiling("baseline_row_nmr", m.baseline_row_nmr.nmr_min, -0.05, 0.05));
    let worst_margin = m
        .cell_profile
        .normalized
        .iter()
        .zip(&m.baseline_sub_profile.normalized)
        .map(|(c, b)| (c - 1.0).abs() - 0.9 * (b - 1.0).abs())
        .fold(f64::NEG_INFINITY, f64::max);
    terms.push(ceiling("compensation_margin", worst_margin, 0.0, 0.005));
    terms
}

pub fn total(terms: &[Term]) -> f64 {
    terms.iter().map(|t| t.cost).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scale {
    /// Step multiplies the value.
    Log,
    /// Step adds to the value.
    Linear,
}

/// A tunable key with its search scale, initial step and bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knob {
    pub key: String,
    pub scale: Scale,
    pub step: f64,
    pub min: f64,
    pub max: f64,
}

impl Knob {
    fn new(key: &str, scale: Scale, step: f64, min: f64, max: f64) -> Self {
        Self {
            key: key.into(),
            scale,
            step,
            min,
            max,
        }
    }

    fn moved(&self, value: f64, step: f64, dir: f64) -> f64 {
        let v = match self.scale {
            Scale::Log => value * (dir * step).exp(),
            Scale::Linear => value + dir * step,
        };
        v.clamp(self.min, self.max)
    }
}

/// Knobs searched by default: device constants, W/L, capacitances, read
/// window and the baseline load.
pub fn default_knobs() -> Vec<Knob> {
    use Scale::*;
    vec![
        Knob::new("fefet_i0", Log, 0.3, 1e-9, 1e-3),
        Knob::new("fefet_wl_ratio", Log, 0.3, 0.05, 50.0),
        Knob::new("fefet_n_slope", Linear, 0.05, 1.0, 3.0),
        Knob::new("fefet_vth_low", Linear, 0.02, 0.05, 0.33),
        Knob::new("fefet_kappa_t", Linear, 1e-4, -2e-3, 0.0),
        Knob::new("fefet_i0_t_exponent", Linear, 0.2, -3.0, 1.0),
        Knob::new("m1_wl_ratio", Log, 0.3, 0.05, 50.0),
        Knob::new("m1_n_slope", Linear, 0.05, 1.0, 2.0),
        Knob::new("m1_vth_ref", Linear, 0.02, 0.0, 0.8),
        Knob::new("m1_kappa_t", Linear, 1e-4, -2e-3, 0.0),
        Knob::new("m1_i0_t_exponent", Linear, 0.2, -3.0, 1.0),
        Knob::new("m2_wl_ratio", Log, 0.3, 0.05, 50.0),
        Knob::new("m2_n_slope", Linear, 0.05, 1.0, 2.0),
        Knob::new("m2_vth_ref", Linear, 0.02, 0.0, 0.8),
        Knob::new("m2_kappa_t", Linear, 1e-4, -2e-3, 0.0),
        Knob::new("m2_i0_t_exponent", Linear, 0.2, -3.0, 1.0),
        Knob::new("t_read", Log, 0.2, 1e-9, 6.9e-9),
        Knob::new("v_precharge", Linear, 0.01, 0.2, 0.6),
        Knob::new("baseline_r_load", Log, 0.3, 10.0, 1e8),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub params: Params,
    pub terms: Vec<Term>,
    pub objective: f64,
    pub initial_objective: f64,
    pub improvements: usize,
    pub evaluations: usize,
}

impl CalibrationReport {
    /// Human-readable residual table.
    pub fn render(&self) -> String {
        let mut s = format!(
            "objective {:.6e} (initial {:.6e}), {} improvements in {} evaluations\n",
            self.objective, self.initial_objective, self.improvements, self.evaluations
        );
        s.push_str(&format!(
            "{:<26} {:>14} {:>14} {:>12}\n",
            "term", "value", "target", "cost"
        ));
        for t in &self.terms {
            s.push_str(&format!(
                "{:<26} {:>14.6e} {:>14.6e} {:>12.4e}\n",
                t.name, t.value, t.target, t.cost
            ));
        }
        s
    }
}

/// Residual above which calibration is reported as failed.
pub const CALIBRATION_GATE: f64 = 1.0;

/// Monte Carlo worst-case errors at the default study settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variation {
    pub error_8: f64,
    pub error_4: f64,
}

const VARIATION_NODES: usize = 17;

/// Monte Carlo errors with cell outputs interpolated (Catmull-Rom) from a
/// table over ±4σ instead of one transient per sample. Cheap enough to sit
/// inside the search loop; the exact study is `analysis::monte_carlo`.
pub fn variation_proxy(p: &Params) -> Result<Variation> {
    let spec = MonteCarloSpec::default();
    let temp = Temperature::room();
    let span = 4.0 * spec.sigma;
    let h = 2.0 * span / (VARIATION_NODES - 1) as f64;
    let table: Vec<(f64, f64)> = (0..VARIATION_NODES)
        .map(|k| {
            let off = -span + k as f64 * h;
            let on = multiply(p, true, true, temp, off)?.v_o;
            let inactive = multiply(p, true, false, temp, off)?.v_o;
            Ok((on, inactive))
        })
        .collect::<Result<_>>()?;
    let interp = |x: f64| {
        let u = ((x + span) / h).clamp(0.0, (VARIATION_NODES - 1) as f64 - 1e-9);
        let k = u.floor() as usize;
        let t = u - k as f64;
        let at = |i: isize| table[i.clamp(0, VARIATION_NODES as isize - 1) as usize];
        let (p0, p1, p2, p3) = (
            at(k as isize - 1),
            at(k as isize),
            at(k as isize + 1),
            at(k as isize + 2),
        );
        let cr = |a: f64, b: f64, c: f64, d: f64| {
            b + 0.5 * t * (c - a + t * (2.0 * a - 5.0 * b + 4.0 * c - d + t * (3.0 * (b - c) + d - a)))
        };
        (cr(p0.0, p1.0, p2.0, p3.0), cr(p0.1, p1.1, p2.1, p3.1))
    };
    let error_8 = monte_carlo_with(
        p,
        &MonteCarloSpec {
            cells_per_row: 8,
            ..spec
        },
        interp,
    )?
    .max_error;
    let error_4 = monte_carlo_with(
        p,
        &MonteCarloSpec {
            cells_per_row: 4,
            ..spec
        },
        interp,
    )?
    .max_error;
    Ok(Variation { error_8, error_4 })
}

fn evaluate(p: &Params, targets: &Targets) -> (f64, Vec<Term>) {
    let Ok(m) = metrics(p) else {
        return (f64::INFINITY, Vec::new());
    };
    let v = if targets.variation_8.is_some() || targets.variation_4.is_some() {
        match variation_proxy(p) {
            Ok(v) => Some(v),
            Err(_) => return (f64::INFINITY, Vec::new()),
        }
    } else {
        None
    };
    let terms = score(&m, v.as_ref(), targets);
    (total(&terms), terms)
}

/// Compass search: try ± step on each knob in turn, keep any improvement,
/// halve all steps after a sweep without one. Stops when every step has
/// shrunk below `min_step_fraction` of its start or after `max_sweeps`.
pub fn calibrate(start: &Params, targets: &Targets, knobs: &[Knob], max_sweeps: usize) -> Result<CalibrationReport> {
    if targets.is_empty() {
        return Err(Error::invalid("targets", "target list must be non-empty"));
    }
    let mut best = *start;
    let (mut best_obj, mut best_terms) = evaluate(&best, targets);
    let initial_objective = best_obj;
    let mut steps: Vec<f64> = knobs.iter().map(|k| k.step).collect();
    let mut improvements = 0;
    let mut evaluations = 1;
    for _ in 0..max_sweeps {
        if best_obj == 0.0 {
            break;
        }
        let mut improved = false;
        for (k, knob) in knobs.iter().enumerate() {
            for dir in [1.0, -1.0] {
                let current = best.get(&knob.key)?;
                let trial_value = knob.moved(current, steps[k], dir);
                if trial_value == current {
                    continue;
                }
                let mut trial = best;
                trial.set(&knob.key, trial_value)?;
                if trial.validate().is_err() {
                    continue;
                }
                let (obj, terms) = evaluate(&trial, targets);
                evaluations += 1;
                if obj < best_obj {
                    best = trial;
                    best_obj = obj;
                    best_terms = terms;
                    improvements += 1;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            for s in steps.iter_mut() {
                *s *= 0.5;
            }
            if steps.iter().zip(knobs).all(|(s, k)| *s < 1e-3 * k.step) {
                break;
            }
        }
    }
    Ok(CalibrationReport {
        params: best,
        terms: best_terms,
        objective: best_obj,
        initial_objective,
        improvements,
        evaluations,
    })
}

/// Fails with [`Error::CalibrationFailed`] when the residual exceeds the gate.
pub fn check_gate(report: &CalibrationReport) -> Result<()> {
    if report.objective > CALIBRATION_GATE {
        return Err(Error::CalibrationFailed {
            residual: report.objective,
            gate: CALIBRATION_GATE,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact_targets(m: &Metrics) -> Targets {
        Targets {
            baseline_saturation: Some(m.baseline_sat_fluctuation),
            baseline_subthreshold: Some(m.baseline_sub_fluctuation),
            cell_fluctuation: Some(m.cell_fluctuation),
            cell_fluctuation_20_85: Some(m.cell_fluctuation_20_85),
            nmr_full: Some(m.nmr_full.nmr[0]),
            nmr_20_85: Some(*m.nmr_20_85.nmr.last().unwrap()),
            average_energy: Some(m.average_energy),
            variation_8: None,
            variation_4: None,
        }
    }

    #[test]
    fn optimum_is_a_fixed_point() {
        let p = Params::default();
        let targets = exact_targets(&metrics(&p).unwrap());
        let r = calibrate(&p, &targets, &default_knobs(), 3).unwrap();
        assert_eq!(r.improvements, 0);
        assert_eq!(r.objective, 0.0);
        assert_eq!(r.params.to_toml(), p.to_toml());
        check_gate(&r).unwrap();
    }

    #[test]
    fn committed_defaults_pass_the_gate() {
        let p = Params::default();
        let r = calibrate(&p, &Targets::default(), &default_knobs(), 0).unwrap();
        assert_eq!(r.evaluations, 1);
        assert!(r.objective <= CALIBRATION_GATE, "{}", r.render());
    }

    #[test]
    fn dropping_nmr_targets_keeps_fluctuations_in_band() {
        let p = Params::default();
        let r = calibrate(&p, &Targets::default().without_nmr(), &default_knobs(), 2).unwrap();
        let m = metrics(&r.params).unwrap();
        assert!((m.baseline_sat_fluctuation - 0.206).abs() <= 0.02);
        assert!((m.baseline_sub_fluctuation - 0.521).abs() <= 0.03);
        assert!(m.cell_fluctuation <= 0.286);
        assert!(m.cell_fluctuation_20_85 <= 0.144);
        assert!(r.objective <= r.initial_objective);
    }

    #[test]
    fn empty_targets_are_rejected() {
        let none = Targets {
            baseline_saturation: None,
            baseline_subthreshold: None,
            cell_fluctuation: None,
            cell_fluctuation_20_85: None,
            nmr_full: None,
            nmr_20_85: None,
            average_energy: None,
            variation_8: None,
            variation_4: None,
        };
        assert!(calibrate(&Params::default(), &none, &default_knobs(), 1).is_err());
    }

    #[test]
    fn gate_reports_failure() {
        let r = CalibrationReport {
            params: Params::default(),
            terms: Vec::new(),
            objective: 2.0 * CALIBRATION_GATE,
            initial_objective: 3.0,
            improvements: 0,
            evaluations: 1,
        };
        assert!(matches!(check_gate(&r), Err(Error::CalibrationFailed { .. })));
    }

    #[test]
    fn knobs_stay_in_bounds() {
        for k in default_knobs() {
            let lo = k.moved(k.min, 10.0 * k.step, -1.0);
            let hi = k.moved(k.max, 10.0 * k.step, 1.0);
            assert_eq!((lo, hi), (k.min, k.max), "{}", k.key);
        }
    }
}

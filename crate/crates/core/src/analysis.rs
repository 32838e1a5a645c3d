//! Experiment drivers: temperature fluctuation profiles, Monte Carlo
//! variation, energy accounting and parameter calibration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{
    accumulation_energy, baseline_envelope, charge_share, envelope_from_responses, nmr, responses, CellResponse,
    NmrReport, OutputEnvelope,
};
use crate::cell::{read_transient, solve_baseline, CellKind};
use crate::device::{sample_vth_offsets, Temperature};
use crate::error::{Error, Result};
use crate::params::Params;

/// Temperature grid in °C.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub t_min: f64,
    pub t_max: f64,
    pub t_step: f64,
    pub reference_t: f64,
}

impl Default for SweepSpec {
    /// 0 to 85 °C in 5 °C steps, referenced to 27 °C.
    fn default() -> Self {
        Self {
            t_min: 0.0,
            t_max: 85.0,
            t_step: 5.0,
            reference_t: 27.0,
        }
    }
}

impl SweepSpec {
    pub fn new(t_min: f64, t_max: f64, t_step: f64) -> Result<Self> {
        let s = Self {
            t_min,
            t_max,
            t_step,
            reference_t: 27.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min < self.t_max) {
            return Err(Error::invalid("temp_min", "must be below temp_max"));
        }
        if !(self.t_step > 0.0) {
            return Err(Error::invalid("temp_step", "must be > 0"));
        }
        Temperature::from_celsius(self.t_min)?;
        Temperature::from_celsius(self.t_max)?;
        Temperature::from_celsius(self.reference_t)?;
        Ok(())
    }

    /// Grid points; the last point is `t_max` whenever it is reached within
    /// rounding.
    pub fn grid(&self) -> Result<Vec<Temperature>> {
        self.validate()?;
        let count = ((self.t_max - self.t_min) / self.t_step + 1e-9).floor() as usize;
        (0..=count)
            .map(|k| Temperature::from_celsius(self.t_min + k as f64 * self.t_step))
            .collect()
    }

    pub fn reference(&self) -> Temperature {
        Temperature::from_celsius(self.reference_t).expect("validated")
    }
}

/// Which cell a fluctuation profile measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProfileTarget {
    /// DC current of the 1FeFET-1R cell at this word-line level.
    Baseline { v_read: f64 },
    /// Final output voltage of the 2T-1FeFET cell computing 1·1.
    TwoT1FeFet,
}

impl ProfileTarget {
    pub fn kind(&self) -> CellKind {
        match self {
            ProfileTarget::Baseline { .. } => CellKind::OneFeFetOneR,
            ProfileTarget::TwoT1FeFet => CellKind::TwoT1FeFet,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationProfile {
    pub temps: Vec<f64>,
    pub output: Vec<f64>,
    /// `output / output(reference)`.
    pub normalized: Vec<f64>,
    pub reference_output: f64,
}

impl FluctuationProfile {
    /// max |normalized − 1| over grid points within [t_min, t_max].
    pub fn fluctuation_within(&self, t_min: f64, t_max: f64) -> f64 {
        self.temps
            .iter()
            .zip(&self.normalized)
            .filter(|(t, _)| **t >= t_min && **t <= t_max)
            .map(|(_, n)| (n - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn fluctuation(&self) -> f64 {
        self.fluctuation_within(f64::NEG_INFINITY, f64::INFINITY)
    }
}

fn profile_output(params: &Params, target: ProfileTarget, t: Temperature) -> Result<f64> {
    match target {
        ProfileTarget::Baseline { v_read } => {
            Ok(solve_baseline(&params.cell_baseline(true), &params.baseline_bias(v_read), t)?.i_out)
        }
        ProfileTarget::TwoT1FeFet => Ok(read_transient(
            &params.cell_2t1f(true, 0.0),
            &params.mac_bias(true),
            t,
            params.t_read,
            params.v_precharge,
        )?
        .v_o_final),
    }
}

/// Output normalized to its value at the reference temperature.
pub fn fluctuation_profile(params: &Params, target: ProfileTarget, spec: &SweepSpec) -> Result<FluctuationProfile> {
    let grid = spec.grid()?;
    let reference_output = profile_output(params, target, spec.reference())?;
    let output: Vec<f64> = grid
        .par_iter()
        .map(|&t| profile_output(params, target, t))
        .collect::<Result<_>>()?;
    Ok(FluctuationProfile {
        temps: grid.iter().map(|t| t.celsius()).collect(),
        normalized: output.iter().map(|o| o / reference_output).collect(),
        output,
        reference_output,
    })
}

/// Average energy over every (input, weight) pattern pair at each level.
///
/// Inactive cells are equally likely to be any of the three (input, stored)
/// flavours, so the average is taken over the multinomial split of the
/// `n - i` inactive cells.
pub fn level_energies(params: &Params, resp: &CellResponse) -> Vec<f64> {
    let n = params.n_cells;
    let on = resp.get(true, true);
    let flavours = [resp.get(false, true), resp.get(true, false), resp.get(false, false)];
    (0..=n)
        .map(|i| {
            let m = n - i;
            let mut total = 0.0;
            let mut weight_sum = 0.0;
            for k1 in 0..=m {
                for k2 in 0..=m - k1 {
                    let k3 = m - k1 - k2;
                    let w = multinomial(m, &[k1, k2, k3]);
                    let mut vo = vec![on.v_o; i];
                    let mut e = i as f64 * on.energy;
                    for (f, k) in flavours.iter().zip([k1, k2, k3]) {
                        vo.extend(std::iter::repeat_n(f.v_o, k));
                        e += k as f64 * f.energy;
                    }
                    let v_acc = charge_share(&vo, params.c_o, params.c_acc);
                    total += w * (e + accumulation_energy(v_acc, params));
                    weight_sum += w;
                }
            }
            total / weight_sum
        })
        .collect()
}

fn multinomial(n: usize, parts: &[usize]) -> f64 {
    let ln_fact = |k: usize| (1..=k).map(|v| (v as f64).ln()).sum::<f64>();
    (ln_fact(n) - parts.iter().map(|&k| ln_fact(k)).sum::<f64>()).exp()
}

/// Primitive operations in one row MAC: `n` multiplications plus one
/// accumulation.
pub fn ops_per_mac(n_cells: usize) -> f64 {
    n_cells as f64 + 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// Mean energy per MAC at each output level (J).
    pub per_level: Vec<f64>,
    /// Mean over levels (J per MAC).
    pub average: f64,
    pub ops_per_mac: f64,
    /// ops / J / 1e12.
    pub tops_per_watt: f64,
    /// Read window used as the MAC latency (s).
    pub latency: f64,
}

pub fn energy_report(params: &Params, temp: Temperature) -> Result<EnergyReport> {
    let resp = CellResponse::compute(params, temp, 0.0)?;
    Ok(energy_report_from(params, &resp))
}

fn energy_report_from(params: &Params, resp: &CellResponse) -> EnergyReport {
    let per_level = level_energies(params, resp);
    let average = per_level.iter().sum::<f64>() / per_level.len() as f64;
    let ops = ops_per_mac(params.n_cells);
    EnergyReport {
        per_level,
        average,
        ops_per_mac: ops,
        tops_per_watt: ops / average / 1e12,
        latency: params.t_read,
    }
}

/// Monte Carlo process-variation study configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSpec {
    pub runs: usize,
    /// σ of the FeFET threshold (V).
    pub sigma: f64,
    pub seed: u64,
    pub cells_per_row: usize,
}

impl Default for MonteCarloSpec {
    fn default() -> Self {
        Self {
            runs: 100,
            sigma: 0.054,
            seed: 1,
            cells_per_row: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    /// Worst relative error of each run over the stress patterns.
    pub run_errors: Vec<f64>,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub max_error: f64,
    /// Nominal level-1 step `V_acc(1) - V_acc(0)`, the error unit (V).
    pub unit: f64,
}

/// Histogram bins of the relative error, 2.5 % wide.
pub const MC_BIN_WIDTH: f64 = 0.025;

/// Relative MAC error under FeFET threshold variation.
///
/// Each run draws one offset per cell and evaluates every level with the
/// first `i` cells storing 1 and the rest storing 0, all inputs at 1 (the
/// weight-popcount sweep). The error of a pattern is
/// `|v_acc,varied − v_acc,nominal|` over the nominal level-1 step.
pub fn monte_carlo(params: &Params, spec: &MonteCarloSpec, temp: Temperature) -> Result<MonteCarloResult> {
    if spec.runs == 0 || spec.cells_per_row == 0 {
        return Err(Error::invalid("runs", "runs and cells_per_row must be >= 1"));
    }
    let mut params = *params;
    params.n_cells = spec.cells_per_row;
    let n = params.n_cells;
    let offsets = sample_vth_offsets(spec.sigma, spec.runs * n, spec.seed)?;
    let nominal = CellResponse::compute(&params, temp, 0.0)?;
    let nom_on = nominal.get(true, true).v_o;
    let nom_off = nominal.get(true, false).v_o;

    let per_cell: Vec<(f64, f64)> = offsets
        .par_iter()
        .map(|&off| {
            if off == 0.0 {
                return Ok((nom_on, nom_off));
            }
            let cell_on = crate::array::multiply(&params, true, true, temp, off)?;
            let cell_off = crate::array::multiply(&params, true, false, temp, off)?;
            Ok((cell_on.v_o, cell_off.v_o))
        })
        .collect::<Result<_>>()?;
    Ok(reduce_monte_carlo(&params, (nom_on, nom_off), &per_cell))
}

/// Same study with per-cell outputs taken from `cell_outputs(offset)`
/// instead of a transient per sample.
pub fn monte_carlo_with<F>(params: &Params, spec: &MonteCarloSpec, cell_outputs: F) -> Result<MonteCarloResult>
where
    F: Fn(f64) -> (f64, f64),
{
    if spec.runs == 0 || spec.cells_per_row == 0 {
        return Err(Error::invalid("runs", "runs and cells_per_row must be >= 1"));
    }
    let mut params = *params;
    params.n_cells = spec.cells_per_row;
    let offsets = sample_vth_offsets(spec.sigma, spec.runs * params.n_cells, spec.seed)?;
    let per_cell: Vec<(f64, f64)> = offsets.iter().map(|&o| cell_outputs(o)).collect();
    Ok(reduce_monte_carlo(&params, cell_outputs(0.0), &per_cell))
}

/// `per_cell` holds (on, off) outputs, `n_cells` consecutive entries per run.
fn reduce_monte_carlo(params: &Params, nominal: (f64, f64), per_cell: &[(f64, f64)]) -> MonteCarloResult {
    let n = params.n_cells;
    let (nom_on, nom_off) = nominal;
    let share = |v: &[f64]| charge_share(v, params.c_o, params.c_acc);
    let unit = share(&single(n, nom_on, nom_off, 1)) - share(&vec![nom_off; n]);
    let run_errors: Vec<f64> = per_cell
        .chunks(n)
        .map(|cells| {
            (0..=n)
                .map(|level| {
                    let varied: Vec<f64> = cells
                        .iter()
                        .enumerate()
                        .map(|(j, &(on, off))| if j < level { on } else { off })
                        .collect();
                    (share(&varied) - share(&single(n, nom_on, nom_off, level))).abs() / unit
                })
                .fold(0.0, f64::max)
        })
        .collect();

    let max_error = run_errors.iter().copied().fold(0.0, f64::max);
    let bins = ((max_error / MC_BIN_WIDTH).floor() as usize + 1).max(1);
    let mut counts = vec![0; bins];
    for e in &run_errors {
        counts[((e / MC_BIN_WIDTH).floor() as usize).min(bins - 1)] += 1;
    }
    MonteCarloResult {
        run_errors,
        bin_edges: (0..=bins).map(|k| k as f64 * MC_BIN_WIDTH).collect(),
        counts,
        max_error,
        unit,
    }
}

fn single(n: usize, on: f64, off: f64, level: usize) -> Vec<f64> {
    (0..n).map(|j| if j < level { on } else { off }).collect()
}

/// Everything the calibration and acceptance checks look at, from one pass
/// over the default grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub baseline_sat_fluctuation: f64,
    pub baseline_sub_fluctuation: f64,
    pub cell_fluctuation: f64,
    pub cell_fluctuation_20_85: f64,
    pub nmr_full: NmrReport,
    pub nmr_20_85: NmrReport,
    pub baseline_row_nmr: NmrReport,
    pub average_energy: f64,
    pub envelope: OutputEnvelope,
    pub cell_profile: FluctuationProfile,
    pub baseline_sub_profile: FluctuationProfile,
}

pub const V_READ_SATURATION: f64 = 1.3;

pub fn metrics(params: &Params) -> Result<Metrics> {
    let spec = SweepSpec::default();
    let grid = spec.grid()?;
    let sat = fluctuation_profile(
        params,
        ProfileTarget::Baseline {
            v_read: V_READ_SATURATION,
        },
        &spec,
    )?;
    let sub = fluctuation_profile(params, ProfileTarget::Baseline { v_read: params.v_read }, &spec)?;

    let mut all = grid.clone();
    all.push(spec.reference());
    let resp = responses(params, &all, 0.0)?;
    let (resp_grid, resp_ref) = resp.split_at(grid.len());
    let reference_output = resp_ref[0].get(true, true).v_o;
    let output: Vec<f64> = resp_grid.iter().map(|r| r.get(true, true).v_o).collect();
    let cell_profile = FluctuationProfile {
        temps: grid.iter().map(|t| t.celsius()).collect(),
        normalized: output.iter().map(|o| o / reference_output).collect(),
        output,
        reference_output,
    };
    let envelope = envelope_from_responses(params, &grid, resp_grid);
    let baseline_row = baseline_envelope(params, params.v_read, &grid)?;
    Ok(Metrics {
        baseline_sat_fluctuation: sat.fluctuation(),
        baseline_sub_fluctuation: sub.fluctuation(),
        cell_fluctuation: cell_profile.fluctuation(),
        cell_fluctuation_20_85: cell_profile.fluctuation_within(20.0, 85.0),
        nmr_full: nmr(&envelope)?,
        nmr_20_85: nmr(&envelope.restrict(20.0, 85.0))?,
        baseline_row_nmr: nmr(&baseline_row)?,
        average_energy: energy_report_from(params, &resp_ref[0]).average,
        envelope,
        cell_profile,
        baseline_sub_profile: sub,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::multiply;

    #[test]
    fn sweep_spec_grid_and_validation() {
        let g = SweepSpec::default().grid().unwrap();
        assert_eq!(g.len(), 18);
        assert_eq!(g[17].celsius(), 85.0);
        assert!(SweepSpec::new(10.0, 0.0, 5.0).is_err());
        assert!(SweepSpec::new(0.0, 10.0, 0.0).is_err());
        assert!(SweepSpec::new(0.0, 500.0, 5.0).is_err());
    }

    #[test]
    fn profile_is_one_at_reference() {
        let p = Params::default();
        let spec = SweepSpec::new(17.0, 37.0, 5.0).unwrap();
        for target in [ProfileTarget::TwoT1FeFet, ProfileTarget::Baseline { v_read: 0.35 }] {
            let prof = fluctuation_profile(&p, target, &spec).unwrap();
            let k = prof.temps.iter().position(|&t| t == 27.0).unwrap();
            assert_eq!(prof.normalized[k], 1.0);
        }
    }

    #[test]
    fn compensation_beats_subthreshold_baseline() {
        let m = metrics(&Params::default()).unwrap();
        for (c, b) in m.cell_profile.normalized.iter().zip(&m.baseline_sub_profile.normalized) {
            assert!((c - 1.0).abs() < (b - 1.0).abs());
        }
        assert!(m.baseline_row_nmr.nmr_min < 0.0);
    }

    #[test]
    fn zero_sigma_gives_zero_error() {
        let p = Params::default();
        let spec = MonteCarloSpec {
            runs: 5,
            sigma: 0.0,
            ..Default::default()
        };
        let r = monte_carlo(&p, &spec, Temperature::room()).unwrap();
        assert!(r.run_errors.iter().all(|&e| e == 0.0));
        assert_eq!(r.max_error, 0.0);
        assert_eq!(r.counts, vec![5]);
    }

    #[test]
    fn histogram_mass_and_max() {
        let p = Params::default();
        let spec = MonteCarloSpec {
            runs: 20,
            ..Default::default()
        };
        let r = monte_carlo(&p, &spec, Temperature::room()).unwrap();
        assert_eq!(r.counts.iter().sum::<usize>(), 20);
        assert!(r.run_errors.contains(&r.max_error));
        assert_eq!(r.bin_edges.len(), r.counts.len() + 1);
        assert!(r.unit > 0.0);
        let again = monte_carlo(&p, &spec, Temperature::room()).unwrap();
        assert_eq!(r, again);
        let other = monte_carlo(&p, &MonteCarloSpec { seed: 2, ..spec }, Temperature::room()).unwrap();
        assert_ne!(r.run_errors, other.run_errors);
    }

    #[test]
    fn substituted_cell_outputs_reproduce_the_study() {
        let p = Params::default();
        let spec = MonteCarloSpec {
            runs: 10,
            cells_per_row: 4,
            ..Default::default()
        };
        let temp = Temperature::room();
        let mut q = p;
        q.n_cells = 4;
        let exact = monte_carlo(&p, &spec, temp).unwrap();
        let via = monte_carlo_with(&p, &spec, |o| {
            (
                multiply(&q, true, true, temp, o).unwrap().v_o,
                multiply(&q, true, false, temp, o).unwrap().v_o,
            )
        })
        .unwrap();
        assert_eq!(exact, via);
        assert!(monte_carlo(&p, &MonteCarloSpec { runs: 0, ..spec }, temp).is_err());
    }

    #[test]
    fn energy_report_shape() {
        let p = Params::default();
        let r = energy_report(&p, Temperature::room()).unwrap();
        assert_eq!(r.per_level.len(), 9);
        assert!(r.per_level.iter().all(|&e| e >= 0.0));
        let min = r.per_level.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(r.per_level[0], min);
        assert_eq!(r.ops_per_mac, 9.0);
        assert!((r.tops_per_watt - 9.0 / r.average / 1e12).abs() <= 1e-9 * r.tops_per_watt);
        assert_eq!(r.latency, p.t_read);
    }

    #[test]
    fn multinomial_weights_sum_to_three_to_the_m() {
        let m = 5;
        let mut s = 0.0;
        for a in 0..=m {
            for b in 0..=m - a {
                s += multinomial(m, &[a, b, m - a - b]);
            }
        }
        assert!((s - 243.0).abs() < 1e-9);
    }
}

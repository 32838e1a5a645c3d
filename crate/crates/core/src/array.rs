//! One row of `n` 2T-1FeFET cells summed by charge sharing onto `C_acc`,
//! plus the temperature envelopes, noise-margin rates and threshold decode
//! built on it.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{read_transient, solve_baseline};
use crate::device::Temperature;
use crate::error::{Error, Result};
use crate::params::Params;

/// NMR reported for a zero-width level. Excluded from the minimum unless
/// every level is degenerate.
pub const DEGENERATE_NMR: f64 = f64::INFINITY;
/// Levels narrower than this are flagged degenerate (V).
pub const DEGENERATE_WIDTH: f64 = 1e-6;

/// Row geometry plus the cell physics it is built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowConfig {
    pub params: Params,
    /// `n_cells` boundaries; level `i` decodes when `v_acc` lies between
    /// boundary `i - 1` and boundary `i`.
    pub decode_thresholds: Vec<f64>,
}

impl RowConfig {
    /// A row with thresholds placed from the envelope over `grid`.
    pub fn calibrated(params: Params, grid: &[Temperature]) -> Result<Self> {
        let mut cfg = Self {
            params,
            decode_thresholds: Vec::new(),
        };
        let env = envelope(&cfg, grid)?;
        cfg.decode_thresholds = calibrate_decode_thresholds(&env).thresholds;
        Ok(cfg)
    }

    pub fn n_cells(&self) -> usize {
        self.params.n_cells
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.decode_thresholds.len() != self.n_cells() {
            return Err(Error::LengthMismatch {
                expected: self.n_cells(),
                got: self.decode_thresholds.len(),
            });
        }
        if self.decode_thresholds.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("decode_thresholds", "must be strictly increasing"));
        }
        Ok(())
    }

    /// Counts thresholds below `v_acc`.
    pub fn decode(&self, v_acc: f64) -> usize {
        self.decode_thresholds.partition_point(|&th| th < v_acc)
    }
}

/// Result of one MAC on a row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacResult {
    pub v_acc: f64,
    pub decoded: usize,
    pub energy: f64,
    pub per_cell_vo: Vec<f64>,
}

/// Charge sharing of `n` equal output capacitors onto a discharged `C_acc`:
/// `V_acc = C_o Σ V_Oi / (n C_o + C_acc)`.
pub fn charge_share(per_cell_vo: &[f64], c_o: f64, c_acc: f64) -> f64 {
    let n = per_cell_vo.len() as f64;
    c_o * per_cell_vo.iter().sum::<f64>() / (n * c_o + c_acc)
}

/// Supply energy to restore every `C_o` to the precharge level after
/// sharing. `C_acc` is discharged to ground, which draws nothing.
pub fn accumulation_energy(v_acc: f64, params: &Params) -> f64 {
    params.n_cells as f64 * params.c_o * params.v_precharge * (params.v_precharge - v_acc).max(0.0)
}

/// Output voltage and read energy of one cell for one (input, stored) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellOutput {
    pub v_o: f64,
    pub energy: f64,
}

/// All four products of one physical cell at one temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellResponse {
    /// Indexed by `2 * input + stored`.
    pub outputs: [CellOutput; 4],
}

impl CellResponse {
    pub fn compute(params: &Params, temp: Temperature, vth_offset: f64) -> Result<Self> {
        let mut outputs = [CellOutput { v_o: 0.0, energy: 0.0 }; 4];
        for (k, out) in outputs.iter_mut().enumerate() {
            *out = multiply(params, k >= 2, k % 2 == 1, temp, vth_offset)?;
        }
        Ok(Self { outputs })
    }

    pub fn get(&self, input: bool, stored: bool) -> CellOutput {
        self.outputs[2 * input as usize + stored as usize]
    }
}

/// One cell multiplication: program the FeFET to `stored`, drive WL for
/// `input`, charge `C_o` for `t_read`.
pub fn multiply(params: &Params, input: bool, stored: bool, temp: Temperature, vth_offset: f64) -> Result<CellOutput> {
    let cell = params.cell_2t1f(true, vth_offset).programmed(stored);
    let tr = read_transient(&cell, &params.mac_bias(input), temp, params.t_read, params.v_precharge)?;
    Ok(CellOutput {
        v_o: tr.v_o_final,
        energy: tr.energy,
    })
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::LengthMismatch { expected, got });
    }
    Ok(())
}

/// Evaluates one MAC with per-cell threshold offsets.
pub fn mac_row(
    inputs: &[bool],
    weights: &[bool],
    temp: Temperature,
    cfg: &RowConfig,
    offsets: &[f64],
) -> Result<MacResult> {
    let n = cfg.n_cells();
    check_len(n, inputs.len())?;
    check_len(n, weights.len())?;
    check_len(n, offsets.len())?;
    let mut cache: HashMap<(u64, bool, bool), CellOutput> = HashMap::new();
    let mut outs = Vec::with_capacity(n);
    for j in 0..n {
        let key = (offsets[j].to_bits(), inputs[j], weights[j]);
        let out = match cache.get(&key) {
            Some(o) => *o,
            None => {
                let o = multiply(&cfg.params, inputs[j], weights[j], temp, offsets[j])?;
                cache.insert(key, o);
                o
            }
        };
        outs.push(out);
    }
    Ok(finish_mac(&outs, cfg))
}

/// Charge sharing, decode and energy for already-evaluated cell outputs.
pub fn finish_mac(outs: &[CellOutput], cfg: &RowConfig) -> MacResult {
    let per_cell_vo: Vec<f64> = outs.iter().map(|o| o.v_o).collect();
    let v_acc = charge_share(&per_cell_vo, cfg.params.c_o, cfg.params.c_acc);
    let energy = outs.iter().map(|o| o.energy).sum::<f64>() + accumulation_energy(v_acc, &cfg.params);
    MacResult {
        v_acc,
        decoded: cfg.decode(v_acc),
        energy,
        per_cell_vo,
    }
}

/// Per-level output range over a temperature grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEnvelope {
    pub lv: Vec<f64>,
    pub hv: Vec<f64>,
    pub grid: Vec<f64>,
    /// `samples[level][t]`: every `v_acc` that contributed, for each grid point.
    pub samples: Vec<Vec<Vec<f64>>>,
}

impl OutputEnvelope {
    pub fn levels(&self) -> usize {
        self.lv.len()
    }

    /// Builds an envelope from `values[level][t] = [v, ...]`.
    pub fn from_samples(grid: Vec<f64>, samples: Vec<Vec<Vec<f64>>>) -> Self {
        let lv = samples
            .iter()
            .map(|lvl| lvl.iter().flatten().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let hv = samples
            .iter()
            .map(|lvl| lvl.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Self { lv, hv, grid, samples }
    }

    /// Envelope from explicit ranges (no sample data).
    pub fn from_ranges(lv: Vec<f64>, hv: Vec<f64>) -> Self {
        Self {
            lv,
            hv,
            grid: Vec::new(),
            samples: Vec::new(),
        }
    }

    /// Restricts to grid points with `t_min <= T <= t_max`.
    pub fn restrict(&self, t_min: f64, t_max: f64) -> Self {
        let keep: Vec<usize> = (0..self.grid.len())
            .filter(|&k| self.grid[k] >= t_min && self.grid[k] <= t_max)
            .collect();
        let grid = keep.iter().map(|&k| self.grid[k]).collect();
        let samples = self
            .samples
            .iter()
            .map(|lvl| keep.iter().map(|&k| lvl[k].clone()).collect())
            .collect();
        Self::from_samples(grid, samples)
    }
}

/// The inactive-cell flavours: input 0 on a stored 1, input 1 on a stored
/// 0, and both 0.
const INACTIVE: [(bool, bool); 3] = [(false, true), (true, false), (false, false)];

/// Per-temperature cell responses over a grid, evaluated in parallel and
/// collected in grid order.
pub fn responses(params: &Params, grid: &[Temperature], vth_offset: f64) -> Result<Vec<CellResponse>> {
    grid.par_iter()
        .map(|&t| CellResponse::compute(params, t, vth_offset))
        .collect()
}

/// `v_acc` of the canonical level-`i` patterns: the first `i` cells compute
/// 1·1, the rest are inactive of one flavour. Every mixture of flavours lies
/// between these at each temperature, so the envelope bounds all patterns.
pub fn level_voltages(resp: &CellResponse, level: usize, params: &Params) -> Vec<f64> {
    let n = params.n_cells;
    let on = resp.get(true, true).v_o;
    INACTIVE
        .iter()
        .map(|&(x, w)| {
            let off = resp.get(x, w).v_o;
            let mut vo = vec![off; n];
            vo[..level].fill(on);
            charge_share(&vo, params.c_o, params.c_acc)
        })
        .collect()
}

/// MAC output envelope of the 2T-1FeFET row over `grid` (zero variation).
pub fn envelope(cfg: &RowConfig, grid: &[Temperature]) -> Result<OutputEnvelope> {
    if grid.is_empty() {
        return Err(Error::invalid("grid", "must be non-empty"));
    }
    let resp = responses(&cfg.params, grid, 0.0)?;
    Ok(envelope_from_responses(&cfg.params, grid, &resp))
}

pub fn envelope_from_responses(params: &Params, grid: &[Temperature], resp: &[CellResponse]) -> OutputEnvelope {
    let n = params.n_cells;
    let samples = (0..=n)
        .map(|level| resp.iter().map(|r| level_voltages(r, level, params)).collect())
        .collect();
    OutputEnvelope::from_samples(grid.iter().map(|t| t.celsius()).collect(), samples)
}

/// Envelope of the resistor-summed 1FeFET-1R row read at `v_read`: level
/// `i` is `r_sense (i I_on + (n - i) I_off)`.
pub fn baseline_envelope(params: &Params, v_read: f64, grid: &[Temperature]) -> Result<OutputEnvelope> {
    let n = params.n_cells;
    let bias = params.baseline_bias(v_read);
    let currents: Vec<(f64, f64)> = grid
        .iter()
        .map(|&t| {
            let on = solve_baseline(&params.cell_baseline(true), &bias, t)?.i_out;
            let off = solve_baseline(&params.cell_baseline(false), &bias, t)?.i_out;
            Ok((on, off))
        })
        .collect::<Result<_>>()?;
    let samples = (0..=n)
        .map(|i| {
            currents
                .iter()
                .map(|&(on, off)| vec![params.baseline_r_sense * (i as f64 * on + (n - i) as f64 * off)])
                .collect()
        })
        .collect();
    Ok(OutputEnvelope::from_samples(
        grid.iter().map(|t| t.celsius()).collect(),
        samples,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmrReport {
    pub nmr: Vec<f64>,
    pub nmr_min: f64,
    pub argmin: usize,
    /// Levels whose width fell below [`DEGENERATE_WIDTH`].
    pub degenerate: Vec<usize>,
}

/// `NMR_i = (LV_{i+1} - HV_i) / (HV_i - LV_i)` for `i` in `0..levels-1`.
pub fn nmr(env: &OutputEnvelope) -> Result<NmrReport> {
    let levels = env.levels();
    if levels < 2 || env.hv.len() != levels {
        return Err(Error::invalid("envelope", "needs at least two levels"));
    }
    let mut values = Vec::with_capacity(levels - 1);
    let mut degenerate = Vec::new();
    for i in 0..levels - 1 {
        let width = env.hv[i] - env.lv[i];
        if width < DEGENERATE_WIDTH {
            degenerate.push(i);
            values.push(DEGENERATE_NMR);
        } else {
            values.push((env.lv[i + 1] - env.hv[i]) / width);
        }
    }
    let (argmin, nmr_min) =
        values.iter().copied().enumerate().fold(
            (0, f64::INFINITY),
            |best, (i, v)| if v < best.1 { (i, v) } else { best },
        );
    Ok(NmrReport {
        nmr: values,
        nmr_min,
        argmin,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeThresholds {
    pub thresholds: Vec<f64>,
    /// Set when some adjacent ranges touch or overlap; decode is then not
    /// guaranteed.
    pub overlap_warning: bool,
}

/// Midpoints between adjacent level ranges: `(HV_i + LV_{i+1}) / 2`.
pub fn calibrate_decode_thresholds(env: &OutputEnvelope) -> DecodeThresholds {
    let thresholds: Vec<f64> = (0..env.levels().saturating_sub(1))
        .map(|i| 0.5 * (env.hv[i] + env.lv[i + 1]))
        .collect();
    let overlap_warning = (0..thresholds.len()).any(|i| env.lv[i + 1] <= env.hv[i]);
    DecodeThresholds {
        thresholds,
        overlap_warning,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charge_share_hand_value() {
        let mut vo = vec![0.5; 8];
        vo[0] = 0.25;
        vo[1] = 0.75;
        let v = charge_share(&vo, 1e-15, 2e-15);
        // Q = 1 fF * 4 V, C = 10 fF.
        assert!((v - 0.4).abs() < 1e-15);
        assert_eq!(charge_share(&[0.0; 8], 1e-15, 2e-15), 0.0);
    }

    #[test]
    fn nmr_hand_values() {
        let env = OutputEnvelope::from_ranges(vec![0.0, 3.0], vec![1.0, 4.0]);
        let r = nmr(&env).unwrap();
        assert_eq!(r.nmr, vec![2.0]);
        assert_eq!(r.nmr_min, 2.0);
        let touching = OutputEnvelope::from_ranges(vec![0.0, 1.0], vec![1.0, 2.0]);
        assert_eq!(nmr(&touching).unwrap().nmr[0], 0.0);
        assert!(nmr(&OutputEnvelope::from_ranges(vec![0.0], vec![1.0])).is_err());
    }

    #[test]
    fn degenerate_levels_use_sentinel() {
        let env = OutputEnvelope::from_ranges(vec![0.0, 1.0, 2.0], vec![0.0, 1.5, 2.5]);
        let r = nmr(&env).unwrap();
        assert_eq!(r.degenerate, vec![0]);
        assert_eq!(r.nmr[0], DEGENERATE_NMR);
        assert_eq!(r.argmin, 1);
        assert!((r.nmr_min - 1.0).abs() < 1e-15);
        let all = OutputEnvelope::from_ranges(vec![0.0, 1.0], vec![0.0, 1.0]);
        assert_eq!(nmr(&all).unwrap().nmr_min, DEGENERATE_NMR);
    }

    #[test]
    fn thresholds_are_midpoints() {
        let env = OutputEnvelope::from_ranges(vec![0.0, 3.0], vec![1.0, 4.0]);
        let d = calibrate_decode_thresholds(&env);
        assert_eq!(d.thresholds, vec![2.0]);
        assert!(!d.overlap_warning);
        let touch = OutputEnvelope::from_ranges(vec![0.0, 1.0], vec![1.0, 2.0]);
        let d = calibrate_decode_thresholds(&touch);
        assert_eq!(d.thresholds, vec![1.0]);
        assert!(d.overlap_warning);
    }

    #[test]
    fn decode_counts_thresholds_below() {
        let cfg = RowConfig {
            params: Params {
                n_cells: 3,
                ..Params::default()
            },
            decode_thresholds: vec![1.0, 2.0, 3.0],
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.decode(0.5), 0);
        assert_eq!(cfg.decode(1.5), 1);
        assert_eq!(cfg.decode(3.5), 3);
    }

    #[test]
    fn restrict_recomputes_ranges() {
        let env = OutputEnvelope::from_samples(vec![0.0, 20.0, 40.0], vec![vec![vec![0.0], vec![0.1], vec![0.2]]]);
        let r = env.restrict(20.0, 40.0);
        assert_eq!(r.grid, vec![20.0, 40.0]);
        assert_eq!((r.lv[0], r.hv[0]), (0.1, 0.2));
    }
}

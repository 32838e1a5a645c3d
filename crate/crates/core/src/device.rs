//! Temperature-dependent compact models for the FeFET and the n-type access
//! transistors.
//!
//! The channel current is a single expression valid from deep subthreshold
//! to strong inversion:
//!
//! ```text
//! x      = (v_gs - vth(T)) / (n U_T)
//! F(x)   = exp(x)              x <  0
//!        = (1 + x/2)^2         x >= 0
//! I_ch   = i0 wl (T/300)^m F(x) (1 - exp(-v_ds/U_T)) (1 + lambda v_ds)
//! ```
//!
//! `F` is C¹ at the seam (value 1, slope 1) and grows quadratically above
//! threshold. A constant leakage floor (scaled by `wl` and by the same drain
//! factor) is added so the off state never produces an exact zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boltzmann constant over elementary charge (V/K).
pub const K_OVER_Q: f64 = 8.617_333_262e-5;
/// Reference temperature for `vth_ref` and the prefactor power law (K).
pub const T_REF_K: f64 = 300.0;
/// Per unit W/L leakage floor (A).
pub const LEAKAGE_FLOOR: f64 = 1e-14;
/// Ratio returned by [`on_off_ratio`] when the off current underflows.
pub const MAX_ON_OFF_RATIO: f64 = 1e12;

pub const T_MIN_C: f64 = -25.0;
pub const T_MAX_C: f64 = 125.0;

/// Operating temperature, validated against the calibration range.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Temperature {
    celsius: f64,
}

impl Temperature {
    pub fn from_celsius(celsius: f64) -> Result<Self> {
        if !(T_MIN_C..=T_MAX_C).contains(&celsius) || !celsius.is_finite() {
            return Err(Error::TemperatureOutOfRange {
                celsius,
                min: T_MIN_C,
                max: T_MAX_C,
            });
        }
        Ok(Self { celsius })
    }

    /// 27 °C, the reference for all normalized fluctuation figures.
    pub fn room() -> Self {
        Self { celsius: 27.0 }
    }

    pub fn celsius(self) -> f64 {
        self.celsius
    }

    pub fn kelvin(self) -> f64 {
        self.celsius + 273.15
    }

    /// kT/q in volts.
    pub fn thermal_voltage(self) -> f64 {
        K_OVER_Q * self.kelvin()
    }
}

/// Compact-model constants for one transistor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams {
    /// Current prefactor at 300 K and W/L = 1 (A).
    pub i0: f64,
    pub wl_ratio: f64,
    /// Subthreshold ideality factor.
    pub n_slope: f64,
    /// Threshold voltage at 300 K (V).
    pub vth_ref: f64,
    /// Threshold temperature coefficient (V/K).
    pub kappa_t: f64,
    /// Power-law exponent of the prefactor in T/300 K.
    pub i0_t_exponent: f64,
    /// Channel-length modulation (1/V).
    pub lambda: f64,
}

impl DeviceParams {
    pub fn validate(&self, name: &str) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::invalid(format!("{name}_{field}"), reason));
        let all = [
            self.i0,
            self.wl_ratio,
            self.n_slope,
            self.vth_ref,
            self.kappa_t,
            self.i0_t_exponent,
            self.lambda,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("*", "must be finite");
        }
        if self.i0 <= 0.0 {
            return bad("i0", "must be > 0");
        }
        if self.wl_ratio <= 0.0 {
            return bad("wl_ratio", "must be > 0");
        }
        if !(1.0..=3.0).contains(&self.n_slope) {
            return bad("n_slope", "must lie in [1, 3]");
        }
        if self.lambda < 0.0 {
            return bad("lambda", "must be >= 0");
        }
        Ok(())
    }

    /// Threshold voltage at `temp` for a device whose 300 K threshold is `vth_ref`.
    pub fn vth_at(&self, vth_ref: f64, temp: Temperature) -> f64 {
        vth_ref + self.kappa_t * (temp.kelvin() - T_REF_K)
    }

    fn prefactor(&self, temp: Temperature) -> f64 {
        self.i0 * self.wl_ratio * (temp.kelvin() / T_REF_K).powf(self.i0_t_exponent)
    }
}

/// Nonvolatile polarization of the ferroelectric gate stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarization {
    /// Logic '1'.
    LowVt,
    /// Logic '0'.
    HighVt,
}

impl Polarization {
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Polarization::LowVt
        } else {
            Polarization::HighVt
        }
    }

    pub fn bit(self) -> bool {
        matches!(self, Polarization::LowVt)
    }
}

/// FeFET model: a MOSFET body plus a second threshold for the high-V_TH state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeFetParams {
    /// `device.vth_ref` is the low-V_TH state threshold.
    pub device: DeviceParams,
    pub vth_high: f64,
}

impl FeFetParams {
    pub fn vth_ref(&self, polarization: Polarization) -> f64 {
        match polarization {
            Polarization::LowVt => self.device.vth_ref,
            Polarization::HighVt => self.vth_high,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.device.validate("fefet")?;
        if !(self.vth_high.is_finite() && self.vth_high > self.device.vth_ref) {
            return Err(Error::invalid("fefet_vth_high", "must exceed fefet_vth_low"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeFetState {
    pub polarization: Polarization,
    /// Process-variation threshold shift, fixed at sampling time (V).
    pub vth_offset: f64,
}

impl FeFetState {
    pub fn new(polarization: Polarization) -> Self {
        Self {
            polarization,
            vth_offset: 0.0,
        }
    }

    pub fn with_offset(polarization: Polarization, vth_offset: f64) -> Self {
        Self {
            polarization,
            vth_offset,
        }
    }
}

/// Gate write pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WritePulse {
    pub amplitude: f64,
    pub duration: f64,
}

impl WritePulse {
    pub const SET_AMPLITUDE: f64 = 4.0;
    pub const SET_DURATION: f64 = 115e-9;
    pub const RESET_AMPLITUDE: f64 = -4.0;
    pub const RESET_DURATION: f64 = 200e-9;

    pub fn new(amplitude: f64, duration: f64) -> Result<Self> {
        if !(duration > 0.0 && duration.is_finite()) || !amplitude.is_finite() {
            return Err(Error::invalid(
                "duration",
                "write pulse must have positive, finite duration",
            ));
        }
        Ok(Self { amplitude, duration })
    }

    /// +4 V / 115 ns, programs the low-V_TH state.
    pub fn set() -> Self {
        Self {
            amplitude: Self::SET_AMPLITUDE,
            duration: Self::SET_DURATION,
        }
    }

    /// −4 V / 200 ns, programs the high-V_TH state.
    pub fn reset() -> Self {
        Self {
            amplitude: Self::RESET_AMPLITUDE,
            duration: Self::RESET_DURATION,
        }
    }

    /// The pulse that writes `bit`.
    pub fn for_bit(bit: bool) -> Self {
        if bit {
            Self::set()
        } else {
            Self::reset()
        }
    }
}

/// Threshold-gated, instantaneous polarization switching.
pub fn program(state: FeFetState, pulse: WritePulse) -> FeFetState {
    let polarization = if pulse.amplitude >= WritePulse::SET_AMPLITUDE && pulse.duration >= WritePulse::SET_DURATION {
        Polarization::LowVt
    } else if pulse.amplitude <= WritePulse::RESET_AMPLITUDE && pulse.duration >= WritePulse::RESET_DURATION {
        Polarization::HighVt
    } else {
        state.polarization
    };
    FeFetState { polarization, ..state }
}

/// Drain current together with its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conductance {
    pub id: f64,
    /// ∂I/∂v_gs (S).
    pub gm: f64,
    /// ∂I/∂v_ds (S).
    pub gds: f64,
}

#[inline]
fn shape(x: f64) -> (f64, f64) {
    if x < 0.0 {
        let e = x.exp();
        (e, e)
    } else {
        let h = 1.0 + 0.5 * x;
        (h * h, h)
    }
}

/// Channel current without the leakage floor. `v_ds` must be ≥ 0.
pub fn channel_current(params: &DeviceParams, vth_eff: f64, v_gs: f64, v_ds: f64, temp: Temperature) -> f64 {
    let ut = temp.thermal_voltage();
    let x = (v_gs - vth_eff) / (params.n_slope * ut);
    let (f, _) = shape(x);
    let sat = -(-v_ds / ut).exp_m1();
    params.prefactor(temp) * f * sat * (1.0 + params.lambda * v_ds)
}

/// Drain current and small-signal conductances for an n-type device.
///
/// Negative `v_ds` is handled by exchanging source and drain, so the result
/// is antisymmetric in the channel direction.
pub fn evaluate(params: &DeviceParams, vth_eff: f64, v_gs: f64, v_ds: f64, temp: Temperature) -> Conductance {
    if v_ds < 0.0 {
        // Swap: new v_gs' = v_gs - v_ds, v_ds' = -v_ds. I = -I'(v_gs', v_ds').
        let c = evaluate(params, vth_eff, v_gs - v_ds, -v_ds, temp);
        return Conductance {
            id: -c.id,
            gm: -c.gm,
            gds: c.gm + c.gds,
        };
    }
    let ut = temp.thermal_voltage();
    let nut = params.n_slope * ut;
    let x = (v_gs - vth_eff) / nut;
    let (f, df) = shape(x);
    let e = (-v_ds / ut).exp();
    let sat = -(-v_ds / ut).exp_m1();
    let dsat = e / ut;
    let clm = 1.0 + params.lambda * v_ds;
    let pre = params.prefactor(temp);
    let floor = LEAKAGE_FLOOR * params.wl_ratio;
    Conductance {
        id: pre * f * sat * clm + floor * sat,
        gm: pre * df / nut * sat * clm,
        gds: pre * f * (dsat * clm + sat * params.lambda) + floor * dsat,
    }
}

/// Drain current (A), including the leakage floor. Exactly zero at `v_ds = 0`.
pub fn drain_current(params: &DeviceParams, vth_eff: f64, v_gs: f64, v_ds: f64, temp: Temperature) -> f64 {
    evaluate(params, vth_eff, v_gs, v_ds, temp).id
}

/// Threshold of a FeFET in `state` at `temp`, including its variation offset.
pub fn effective_vth(params: &FeFetParams, state: FeFetState, temp: Temperature) -> f64 {
    params.device.vth_at(params.vth_ref(state.polarization), temp) + state.vth_offset
}

/// I_ON / I_OFF at the given read bias, saturated at [`MAX_ON_OFF_RATIO`].
pub fn on_off_ratio(params: &FeFetParams, temp: Temperature, v_read: f64, v_ds: f64) -> f64 {
    let on = drain_current(
        &params.device,
        effective_vth(params, FeFetState::new(Polarization::LowVt), temp),
        v_read,
        v_ds,
        temp,
    );
    let off = drain_current(
        &params.device,
        effective_vth(params, FeFetState::new(Polarization::HighVt), temp),
        v_read,
        v_ds,
        temp,
    );
    if off <= 0.0 || on / off > MAX_ON_OFF_RATIO {
        MAX_ON_OFF_RATIO
    } else {
        on / off
    }
}

/// Gaussian threshold offsets, reproducible from `seed`.
pub fn sample_vth_offsets(sigma: f64, count: usize, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", "must be finite and >= 0"));
    }
    if sigma == 0.0 {
        return Ok(vec![0.0; count]);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid("sigma", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| normal.sample(&mut rng)).collect())
}

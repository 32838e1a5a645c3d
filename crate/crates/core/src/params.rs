//! The shared parameter file.
//!
//! A flat `key = value` document (TOML syntax, no tables), decimal SI units.
//! Every key is optional; missing keys take the built-in calibrated default,
//! unknown keys are rejected. See `data/default_params.toml` for the schema
//! with units.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cell::{Bias, CellInstance, CellKind};
use crate::device::{DeviceParams, FeFetParams, FeFetState, Polarization};
use crate::error::{Error, Result};

/// Text of the committed default parameter file.
pub const DEFAULT_PARAMS_TOML: &str = include_str!("../data/default_params.toml");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub fefet: FeFetParams,
    pub m1: DeviceParams,
    pub m2: DeviceParams,
    /// BL, SL and the '1'-input word-line level for the 2T-1FeFET array.
    pub v_bl: f64,
    pub v_sl: f64,
    pub v_read: f64,
    /// Output node voltage at the start of every read.
    pub v_precharge: f64,
    pub c_o: f64,
    pub c_acc: f64,
    pub t_read: f64,
    pub n_cells: usize,
    pub baseline_r_load: f64,
    pub baseline_v_bl: f64,
    pub baseline_v_sl: f64,
    /// Read-out transimpedance used to express summed baseline currents as volts (Ω).
    pub baseline_r_sense: f64,
}

macro_rules! param_table {
    ($( $key:literal => $($field:ident).+ ),* $(,)?) => {
        /// Every recognised key, in file order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl Params {
            /// Reads a key as f64.
            pub fn get(&self, key: &str) -> Result<f64> {
                match key {
                    "n_cells" => Ok(self.n_cells as f64),
                    $($key => Ok(self.$($field).+),)*
                    _ => Err(Error::UnknownKey(key.to_string())),
                }
            }

            /// Overrides one key.
            pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
                if !value.is_finite() {
                    return Err(Error::invalid(key, "must be finite"));
                }
                match key {
                    "n_cells" => {
                        if value < 1.0 || value.fract() != 0.0 {
                            return Err(Error::invalid(key, "must be a positive integer"));
                        }
                        self.n_cells = value as usize;
                    }
                    $($key => self.$($field).+ = value,)*
                    _ => return Err(Error::UnknownKey(key.to_string())),
                }
                Ok(())
            }
        }
    };
}

param_table! {
    "fefet_i0" => fefet.device.i0,
    "fefet_wl_ratio" => fefet.device.wl_ratio,
    "fefet_n_slope" => fefet.device.n_slope,
    "fefet_vth_low" => fefet.device.vth_ref,
    "fefet_vth_high" => fefet.vth_high,
    "fefet_kappa_t" => fefet.device.kappa_t,
    "fefet_i0_t_exponent" => fefet.device.i0_t_exponent,
    "fefet_lambda" => fefet.device.lambda,
    "m1_i0" => m1.i0,
    "m1_wl_ratio" => m1.wl_ratio,
    "m1_n_slope" => m1.n_slope,
    "m1_vth_ref" => m1.vth_ref,
    "m1_kappa_t" => m1.kappa_t,
    "m1_i0_t_exponent" => m1.i0_t_exponent,
    "m1_lambda" => m1.lambda,
    "m2_i0" => m2.i0,
    "m2_wl_ratio" => m2.wl_ratio,
    "m2_n_slope" => m2.n_slope,
    "m2_vth_ref" => m2.vth_ref,
    "m2_kappa_t" => m2.kappa_t,
    "m2_i0_t_exponent" => m2.i0_t_exponent,
    "m2_lambda" => m2.lambda,
    "v_bl" => v_bl,
    "v_sl" => v_sl,
    "v_read" => v_read,
    "v_precharge" => v_precharge,
    "c_o" => c_o,
    "c_acc" => c_acc,
    "t_read" => t_read,
    "baseline_r_load" => baseline_r_load,
    "baseline_v_bl" => baseline_v_bl,
    "baseline_v_sl" => baseline_v_sl,
    "baseline_r_sense" => baseline_r_sense,
}

impl Default for Params {
    fn default() -> Self {
        Self::parse_onto(Self::zeroed(), DEFAULT_PARAMS_TOML, true).expect("committed default parameter file is valid")
    }
}

impl Params {
    /// Parses a parameter document layered over the built-in defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_onto(Self::default(), text, false)
    }

    fn parse_onto(mut p: Self, text: &str, complete: bool) -> Result<Self> {
        let table: BTreeMap<String, toml::Value> =
            toml::from_str(text).map_err(|e| Error::format("parameter file", e.to_string()))?;
        for (key, value) in &table {
            let v = match value {
                toml::Value::Float(f) => *f,
                toml::Value::Integer(i) => *i as f64,
                other => {
                    return Err(Error::format(
                        "parameter file",
                        format!("`{key}` must be a number, got {}", other.type_str()),
                    ))
                }
            };
            p.set(key, v)?;
        }
        if complete && table.len() != KEYS.len() + 1 {
            return Err(Error::format("default parameter file", "must list every key"));
        }
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides.
    pub fn with_overrides<'a>(mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        for kv in overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::format("override", format!("`{kv}` is not key=value")))?;
            let value: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::format("override", format!("`{v}` is not a number")))?;
            self.set(k.trim(), value)?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Serializes every key at full precision, in schema order.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("n_cells = {}\n", self.n_cells));
        for key in KEYS {
            let v = self.get(key).expect("schema key");
            // `{:e}` round-trips f64 exactly and always reads back as a TOML float.
            out.push_str(&format!("{key} = {v:e}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.fefet.validate()?;
        self.m1.validate("m1")?;
        self.m2.validate("m2")?;
        let positive = [
            ("c_o", self.c_o),
            ("c_acc", self.c_acc),
            ("t_read", self.t_read),
            ("baseline_r_load", self.baseline_r_load),
            ("baseline_r_sense", self.baseline_r_sense),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::invalid(name, "must be > 0"));
            }
        }
        if !(self.v_bl > self.v_sl) {
            return Err(Error::invalid("v_bl", "must exceed v_sl"));
        }
        if !(self.baseline_v_bl > self.baseline_v_sl) {
            return Err(Error::invalid("baseline_v_bl", "must exceed baseline_v_sl"));
        }
        if !(self.v_sl..=self.v_bl).contains(&self.v_precharge) {
            return Err(Error::invalid("v_precharge", "must lie in [v_sl, v_bl]"));
        }
        if self.n_cells == 0 {
            return Err(Error::invalid("n_cells", "must be >= 1"));
        }
        Ok(())
    }

    /// A 2T-1FeFET cell storing `bit`, with threshold offset `vth_offset`.
    pub fn cell_2t1f(&self, bit: bool, vth_offset: f64) -> CellInstance {
        CellInstance {
            kind: CellKind::TwoT1FeFet,
            fefet: self.fefet,
            state: FeFetState::with_offset(Polarization::from_bit(bit), vth_offset),
            m1: self.m1,
            m2: self.m2,
            r_load: self.baseline_r_load,
            c_o: self.c_o,
        }
    }

    /// A 1FeFET-1R cell storing `bit`.
    pub fn cell_baseline(&self, bit: bool) -> CellInstance {
        CellInstance {
            kind: CellKind::OneFeFetOneR,
            state: FeFetState::new(Polarization::from_bit(bit)),
            ..self.cell_2t1f(bit, 0.0)
        }
    }

    pub fn mac_bias(&self, input: bool) -> Bias {
        Bias {
            v_wl: if input { self.v_read } else { 0.0 },
            v_bl: self.v_bl,
            v_sl: self.v_sl,
        }
    }

    pub fn baseline_bias(&self, v_read: f64) -> Bias {
        Bias {
            v_wl: v_read,
            v_bl: self.baseline_v_bl,
            v_sl: self.baseline_v_sl,
        }
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let hash = Sha256::digest(self.to_toml().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn zeroed() -> Self {
        let dev = DeviceParams {
            i0: 0.0,
            wl_ratio: 0.0,
            n_slope: 0.0,
            vth_ref: 0.0,
            kappa_t: 0.0,
            i0_t_exponent: 0.0,
            lambda: 0.0,
        };
        Self {
            fefet: FeFetParams {
                device: dev,
                vth_high: 0.0,
            },
            m1: dev,
            m2: dev,
            v_bl: 0.0,
            v_sl: 0.0,
            v_read: 0.0,
            v_precharge: 0.0,
            c_o: 0.0,
            c_acc: 0.0,
            t_read: 0.0,
            n_cells: 0,
            baseline_r_load: 0.0,
            baseline_v_bl: 0.0,
            baseline_v_sl: 0.0,
            baseline_r_sense: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_file_lists_every_key_and_validates() {
        let p = Params::default();
        p.validate().unwrap();
        assert_eq!(p.n_cells, 8);
        assert_eq!(p.v_bl, 1.2);
        assert_eq!(p.v_sl, 0.2);
        assert_eq!(p.v_read, 0.35);
    }

    #[test]
    fn serialization_round_trips() {
        let p = Params::default();
        let q = Params::parse(&p.to_toml()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.digest(), q.digest());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(Params::parse("bogus = 1.0"), Err(Error::UnknownKey(_))));
        assert!(Params::default().with_overrides(["nope=1"]).is_err());
        assert!(Params::parse("c_o = \"x\"").is_err());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let p = Params::default()
            .with_overrides(["c_o=2e-15", " t_read = 5e-9 "])
            .unwrap();
        assert_eq!(p.c_o, 2e-15);
        assert_eq!(p.t_read, 5e-9);
        assert!(Params::default().with_overrides(["c_o=-1"]).is_err());
        assert!(Params::default().with_overrides(["n_cells=2.5"]).is_err());
        assert!(Params::default().with_overrides(["c_o"]).is_err());
    }

    #[test]
    fn partial_file_layers_over_defaults() {
        let p = Params::parse("n_cells = 4\n").unwrap();
        assert_eq!(p.n_cells, 4);
        assert_eq!(p.c_o, Params::default().c_o);
    }
}

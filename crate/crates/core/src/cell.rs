//! Quasi-static node solves and the read transient for the two cell types.
//!
//! Canonical 2T-1FeFET wiring:
//!
//! ```text
//!   BL ──┬──────────────┐
//!        │ FeFET (g=WL)  │ M1 (g=A)
//!        A ─────────────┼──── gate of M1
//!        │ M2 (g=B)      B ── C_o ── GND   (output)
//!   SL ──┘
//! ```
//!
//! M2 pulls node A towards SL with a strength set by the output voltage,
//! which closes the loop: charging B raises V_gs2, lowers A and therefore
//! throttles M1.

use serde::{Deserialize, Serialize};

use crate::device::{self, effective_vth, program, DeviceParams, FeFetParams, FeFetState, Temperature, WritePulse};
use crate::error::{Error, Result};

/// Line voltages during a read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bias {
    pub v_wl: f64,
    pub v_bl: f64,
    pub v_sl: f64,
}

impl Bias {
    pub const V_BL: f64 = 1.2;
    pub const V_SL: f64 = 0.2;
    pub const V_READ: f64 = 0.35;

    /// Default MAC bias for an input bit.
    pub fn for_input(input: bool) -> Self {
        Self {
            v_wl: if input { Self::V_READ } else { 0.0 },
            v_bl: Self::V_BL,
            v_sl: Self::V_SL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    OneFeFetOneR,
    TwoT1FeFet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellInstance {
    pub kind: CellKind,
    pub fefet: FeFetParams,
    pub state: FeFetState,
    pub m1: DeviceParams,
    pub m2: DeviceParams,
    /// Series load of the 1FeFET-1R cell (Ω).
    pub r_load: f64,
    /// Output node capacitance (F).
    pub c_o: f64,
}

impl CellInstance {
    pub fn validate(&self) -> Result<()> {
        self.fefet.validate()?;
        if !(self.c_o > 0.0) {
            return Err(Error::invalid("c_o", "must be > 0"));
        }
        match self.kind {
            CellKind::OneFeFetOneR if !(self.r_load > 0.0) => Err(Error::invalid("baseline_r_load", "must be > 0")),
            CellKind::TwoT1FeFet => {
                self.m1.validate("m1")?;
                self.m2.validate("m2")
            }
            _ => Ok(()),
        }
    }

    pub fn programmed(mut self, bit: bool) -> Self {
        self.state = program(self.state, WritePulse::for_bit(bit));
        self
    }

    fn fefet_vth(&self, temp: Temperature) -> f64 {
        effective_vth(&self.fefet, self.state, temp)
    }
}

/// Solved node voltages and branch currents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub v_a: f64,
    pub v_b: f64,
    pub i_fefet: f64,
    pub i_m1: f64,
    pub i_m2: f64,
    pub i_out: f64,
    /// KCL residual at the solved node (A).
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl OperatingPoint {
    /// Gate-source voltage of M1.
    pub fn v_gs1(&self) -> f64 {
        self.v_a - self.v_b
    }

    /// Gate-source voltage of M2 (gate on B, source on SL).
    pub fn v_gs2(&self, bias: &Bias) -> f64 {
        self.v_b - bias.v_sl
    }
}

pub const KCL_TOLERANCE: f64 = 1e-15;
const BISECT_WIDTH: f64 = 1e-3;
const MAX_ITERATIONS: usize = 200;

struct Root {
    x: f64,
    residual: f64,
    iterations: usize,
}

/// Bracketed bisection down to 1 mV followed by safeguarded Newton.
///
/// `f` returns (value, derivative) and must change sign on [lo, hi]. A warm
/// start `guess` is used to seed a 1 mV bracket when it already straddles
/// the root.
fn find_root<F>(f: F, lo: f64, hi: f64, guess: Option<f64>) -> Result<Root>
where
    F: Fn(f64) -> (f64, f64),
{
    let (f_lo, _) = f(lo);
    let (f_hi, _) = f(hi);
    if f_lo == 0.0 {
        return Ok(Root {
            x: lo,
            residual: 0.0,
            iterations: 0,
        });
    }
    if f_hi == 0.0 {
        return Ok(Root {
            x: hi,
            residual: 0.0,
            iterations: 0,
        });
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::NoBracket { lo, hi, f_lo, f_hi });
    }
    let rising = f_hi > 0.0;
    let (mut a, mut b) = (lo, hi);
    let mut iterations = 0;

    // Narrow a warm-start bracket first.
    if let Some(g) = guess.filter(|g| *g > lo && *g < hi) {
        let ga = (g - 0.5 * BISECT_WIDTH).max(lo);
        let gb = (g + 0.5 * BISECT_WIDTH).min(hi);
        let (fa, _) = f(ga);
        let (fb, _) = f(gb);
        iterations += 2;
        if (fa > 0.0) != rising && (fb > 0.0) == rising {
            a = ga;
            b = gb;
        } else if (fa > 0.0) == rising {
            b = ga;
        } else {
            a = gb;
        }
    }

    while b - a > BISECT_WIDTH && iterations < MAX_ITERATIONS {
        let m = 0.5 * (a + b);
        let (fm, _) = f(m);
        iterations += 1;
        if fm == 0.0 {
            return Ok(Root {
                x: m,
                residual: 0.0,
                iterations,
            });
        }
        if (fm > 0.0) == rising {
            b = m;
        } else {
            a = m;
        }
    }

    let mut x = 0.5 * (a + b);
    let mut best = (x, f64::INFINITY);
    while iterations < MAX_ITERATIONS {
        let (fx, dfx) = f(x);
        iterations += 1;
        if fx.abs() < best.1 {
            best = (x, fx.abs());
        }
        if fx.abs() <= KCL_TOLERANCE {
            return Ok(Root {
                x,
                residual: fx,
                iterations,
            });
        }
        if (fx > 0.0) == rising {
            b = x;
        } else {
            a = x;
        }
        let newton = x - fx / dfx;
        let next = if dfx != 0.0 && newton > a && newton < b {
            newton
        } else {
            0.5 * (a + b)
        };
        if next == x || b <= a {
            // Bracket collapsed to adjacent floats; residual is as small as f64 allows.
            break;
        }
        x = next;
    }
    let (fx, _) = f(best.0);
    if fx.abs() <= KCL_TOLERANCE {
        Ok(Root {
            x: best.0,
            residual: fx,
            iterations,
        })
    } else {
        Err(Error::NoConvergence {
            iterations,
            best_residual: fx.abs(),
        })
    }
}

/// DC operating point of the series FeFET + resistor cell.
pub fn solve_baseline(cell: &CellInstance, bias: &Bias, temp: Temperature) -> Result<OperatingPoint> {
    if cell.kind != CellKind::OneFeFetOneR {
        return Err(Error::invalid("kind", "solve_baseline requires a 1FeFET-1R cell"));
    }
    let vth = cell.fefet_vth(temp);
    let fe = &cell.fefet.device;
    let g_load = 1.0 / cell.r_load;
    let kcl = |v: f64| {
        let c = device::evaluate(fe, vth, bias.v_wl - v, bias.v_bl - v, temp);
        (c.id - (v - bias.v_sl) * g_load, -c.gm - c.gds - g_load)
    };
    let root = find_root(kcl, bias.v_sl, bias.v_bl, None)?;
    let i = device::drain_current(fe, vth, bias.v_wl - root.x, bias.v_bl - root.x, temp);
    Ok(OperatingPoint {
        v_a: root.x,
        v_b: root.x,
        i_fefet: i,
        i_m1: 0.0,
        i_m2: 0.0,
        i_out: i,
        residual: root.residual,
        converged: true,
        iterations: root.iterations,
    })
}

/// Solves node A of the 2T-1FeFET cell with the output node pinned at `v_b`.
pub fn solve_2t1f(cell: &CellInstance, bias: &Bias, temp: Temperature, v_b: f64) -> Result<OperatingPoint> {
    solve_2t1f_from(cell, bias, temp, v_b, None)
}

fn solve_2t1f_from(
    cell: &CellInstance,
    bias: &Bias,
    temp: Temperature,
    v_b: f64,
    guess: Option<f64>,
) -> Result<OperatingPoint> {
    if cell.kind != CellKind::TwoT1FeFet {
        return Err(Error::invalid("kind", "solve_2t1f requires a 2T-1FeFET cell"));
    }
    let vth_fe = cell.fefet_vth(temp);
    let vth_m1 = cell.m1.vth_at(cell.m1.vth_ref, temp);
    let vth_m2 = cell.m2.vth_at(cell.m2.vth_ref, temp);
    let fe = &cell.fefet.device;
    let v_gs2 = v_b - bias.v_sl;
    let kcl = |v_a: f64| {
        let f = device::evaluate(fe, vth_fe, bias.v_wl - v_a, bias.v_bl - v_a, temp);
        let m2 = device::evaluate(&cell.m2, vth_m2, v_gs2, v_a - bias.v_sl, temp);
        (f.id - m2.id, -f.gm - f.gds - m2.gds)
    };
    let root = find_root(kcl, bias.v_sl, bias.v_bl, guess)?;
    let v_a = root.x;
    let i_fefet = device::drain_current(fe, vth_fe, bias.v_wl - v_a, bias.v_bl - v_a, temp);
    let i_m2 = device::drain_current(&cell.m2, vth_m2, v_gs2, v_a - bias.v_sl, temp);
    let i_m1 = device::drain_current(&cell.m1, vth_m1, v_a - v_b, bias.v_bl - v_b, temp);
    Ok(OperatingPoint {
        v_a,
        v_b,
        i_fefet,
        i_m1,
        i_m2,
        i_out: i_m1,
        residual: root.residual,
        converged: true,
        iterations: root.iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransientSample {
    pub t: f64,
    pub v_b: f64,
    pub i_out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadTransient {
    pub samples: Vec<TransientSample>,
    /// Output node voltage at the end of the read window (V).
    pub v_o_final: f64,
    /// Supply energy drawn from BL during the read (J).
    pub energy: f64,
    pub steps_rejected: usize,
}

/// Local error bound per accepted step, relative to BL.
pub const STEP_TOLERANCE: f64 = 1e-6;
const MIN_STEP_FRACTION: f64 = 1e-12;

/// Right-hand side of the charging ODE with a warm-started inner solve.
struct Charging<'a> {
    cell: &'a CellInstance,
    bias: &'a Bias,
    temp: Temperature,
    guess: Option<f64>,
}

#[derive(Clone, Copy)]
struct Slope {
    /// dv_b/dt (V/s).
    dv: f64,
    /// Supply power (W).
    power: f64,
    i_out: f64,
}

impl Charging<'_> {
    fn slope(&mut self, v_b: f64) -> Result<Slope> {
        let v_b = v_b.clamp(self.bias.v_sl, self.bias.v_bl);
        let op = solve_2t1f_from(self.cell, self.bias, self.temp, v_b, self.guess)?;
        self.guess = Some(op.v_a);
        Ok(Slope {
            dv: op.i_m1 / self.cell.c_o,
            power: self.bias.v_bl * op.i_m1 + (self.bias.v_bl - self.bias.v_sl) * op.i_fefet,
            i_out: op.i_out,
        })
    }

    /// One classical RK4 step; returns (v_b, energy increment).
    fn rk4(&mut self, v: f64, h: f64, k1: Slope) -> Result<(f64, f64)> {
        let k2 = self.slope(v + 0.5 * h * k1.dv)?;
        let k3 = self.slope(v + 0.5 * h * k2.dv)?;
        let k4 = self.slope(v + h * k3.dv)?;
        Ok((
            v + h / 6.0 * (k1.dv + 2.0 * k2.dv + 2.0 * k3.dv + k4.dv),
            h / 6.0 * (k1.power + 2.0 * k2.power + 2.0 * k3.power + k4.power),
        ))
    }
}

/// Charges the output capacitor through M1 for `t_read`, starting from
/// `v_b0`.
///
/// The state is (v_b, E) with `c_o dv_b/dt = i_m1` and
/// `dE/dt = v_bl i_m1 + (v_bl - v_sl) i_fefet`, i.e. E is the energy drawn
/// from BL. RK4 with step doubling; a step is accepted when the estimated
/// local error is below `STEP_TOLERANCE * v_bl`, otherwise it is halved.
pub fn read_transient(
    cell: &CellInstance,
    bias: &Bias,
    temp: Temperature,
    t_read: f64,
    v_b0: f64,
) -> Result<ReadTransient> {
    if !(t_read > 0.0 && t_read.is_finite()) {
        return Err(Error::invalid("t_read", "must be > 0"));
    }
    if !(bias.v_sl..=bias.v_bl).contains(&v_b0) {
        return Err(Error::invalid(
            "v_b0",
            "initial output voltage must lie in [v_sl, v_bl]",
        ));
    }
    let tol = STEP_TOLERANCE * bias.v_bl;
    let mut ode = Charging {
        cell,
        bias,
        temp,
        guess: None,
    };

    let mut t = 0.0;
    let mut v = v_b0;
    let mut energy = 0.0;
    let mut h = t_read / 1000.0;
    let mut rejected = 0;
    let mut k1 = ode.slope(v)?;
    let mut samples = vec![TransientSample {
        t,
        v_b: v,
        i_out: k1.i_out,
    }];

    while t < t_read {
        let last = t + h >= t_read;
        let step = if last { t_read - t } else { h };
        let (full, _) = ode.rk4(v, step, k1)?;
        let (half, e1) = ode.rk4(v, 0.5 * step, k1)?;
        let mid = ode.slope(half)?;
        let (two, e2) = ode.rk4(half, 0.5 * step, mid)?;
        let err = (two - full).abs() / 15.0;
        if err > tol {
            h = 0.5 * step;
            rejected += 1;
            if h < MIN_STEP_FRACTION * t_read {
                return Err(Error::StepUnderflow { t, step: h });
            }
            continue;
        }
        t = if last { t_read } else { t + step };
        v = two.clamp(bias.v_sl, bias.v_bl);
        energy += e1 + e2;
        k1 = ode.slope(v)?;
        samples.push(TransientSample {
            t,
            v_b: v,
            i_out: k1.i_out,
        });
        if err < tol / 32.0 && !last {
            h = 2.0 * step;
        }
    }

    Ok(ReadTransient {
        samples,
        v_o_final: v,
        energy,
        steps_rejected: rejected,
    })
}

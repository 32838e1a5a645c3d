//! Command-line front end.
//!
//! Every subcommand computes its tables in memory and only then writes the
//! run directory: one CSV per table plus `manifest.toml` recording the
//! arguments, seed, parameter digest and a SHA-256 of every file. No
//! timestamps are recorded, so identical invocations give identical bytes.
//!
//! Exit codes: 0 success, 1 i/o failure, 2 usage or invalid input,
//! 3 solver failure, 4 calibration gate failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::analysis::{
    energy_report, fluctuation_profile, monte_carlo, MonteCarloSpec, ProfileTarget, SweepSpec, V_READ_SATURATION,
};
use crate::array::{baseline_envelope, calibrate_decode_thresholds, envelope, nmr, OutputEnvelope, RowConfig};
use crate::calibrate::{calibrate, check_gate, default_knobs, Targets};
use crate::device::{drain_current, effective_vth, FeFetState, Polarization, Temperature};
use crate::error::{Error, Result};
use crate::nn_eval::{digits_network, digits_test_set, evaluate, evaluate_software, VariationSpec};
use crate::params::Params;

pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_GATE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "fecim", version, about = "Subthreshold FeFET compute-in-memory simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Parameter file layered over the built-in defaults.
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    /// Run directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    #[arg(long, global = true, default_value_t = 0.0, allow_negative_numbers = true)]
    temp_min: f64,
    #[arg(long, global = true, default_value_t = 85.0, allow_negative_numbers = true)]
    temp_max: f64,
    #[arg(long, global = true, default_value_t = 5.0)]
    temp_step: f64,
    /// Parameter override `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Transfer curves of the FeFET (both states), M1 and M2.
    DeviceIv {
        #[arg(long, default_value_t = 1.0)]
        vds: f64,
        #[arg(long, default_value_t = 0.01)]
        vgs_step: f64,
    },
    /// Cell outputs for every (input, stored) pair and the fluctuation profiles.
    CellSweep,
    /// MAC output envelope of the 2T-1FeFET row and its decode thresholds.
    RowEnvelope,
    /// Noise-margin rates of the 2T-1FeFET row and the 1FeFET-1R baseline.
    Nmr {
        /// Also report the sub-range starting here (°C).
        #[arg(long, default_value_t = 20.0, allow_negative_numbers = true)]
        restrict_min: f64,
    },
    /// Threshold-variation Monte Carlo.
    Montecarlo {
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 0.054)]
        sigma: f64,
        #[arg(long, default_value_t = 8)]
        cells: usize,
        #[arg(long, default_value_t = 27.0, allow_negative_numbers = true)]
        temp: f64,
    },
    /// Energy per MAC level.
    Energy {
        #[arg(long, default_value_t = 27.0, allow_negative_numbers = true)]
        temp: f64,
    },
    /// Digit-classifier inference through the simulated array.
    Infer {
        /// Temperatures to evaluate (°C); repeatable.
        #[arg(long = "temp", default_values_t = [27.0], allow_negative_numbers = true)]
        temps: Vec<f64>,
        /// Threshold variation σ (V); 0 disables variation.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 500)]
        images: usize,
    },
    /// Fit the parameter set to the behavioural targets.
    Calibrate {
        #[arg(long, default_value_t = 40)]
        sweeps: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::DeviceIv { .. } => "device-iv",
            Command::CellSweep => "cell-sweep",
            Command::RowEnvelope => "row-envelope",
            Command::Nmr { .. } => "nmr",
            Command::Montecarlo { .. } => "montecarlo",
            Command::Energy { .. } => "energy",
            Command::Infer { .. } => "infer",
            Command::Calibrate { .. } => "calibrate",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fecim")]
struct Invocation {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// A CSV table with a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&'static str]) -> Self {
        Self {
            name: name.into(),
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

fn f(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-4 {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Output of one subcommand before it is written.
struct RunOutput {
    tables: Vec<Table>,
    /// Extra text files (name, contents).
    files: Vec<(String, String)>,
    /// Scalar results echoed to stdout and the manifest.
    summary: Vec<(String, String)>,
    /// Error raised after outputs were produced (the gate failure).
    deferred: Option<Error>,
}

impl RunOutput {
    fn new() -> Self {
        Self {
            tables: Vec::new(),
            files: Vec::new(),
            summary: Vec::new(),
            deferred: None,
        }
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.into(), value.to_string()));
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let inv = match Invocation::try_parse_from(args) {
        Ok(inv) => inv,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&inv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::CalibrationFailed { .. } => EXIT_GATE,
        e if e.is_solver_failure() => EXIT_SOLVER,
        _ => EXIT_USAGE,
    }
}

fn execute(inv: &Invocation) -> Result<()> {
    let c = &inv.common;
    if let Some(jobs) = c.jobs {
        if jobs == 0 {
            return Err(Error::invalid("jobs", "must be >= 1"));
        }
        // Only the first call in a process takes effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let base = match &c.params {
        Some(p) => Params::load(p)?,
        None => Params::default(),
    };
    let params = base.with_overrides(c.set.iter().map(String::as_str))?;
    let sweep = SweepSpec::new(c.temp_min, c.temp_max, c.temp_step)?;
    let out_dir = c
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("fecim-out").join(inv.command.name()));

    let mut out = match &inv.command {
        Command::DeviceIv { vds, vgs_step } => device_iv(&params, &sweep, *vds, *vgs_step)?,
        Command::CellSweep => cell_sweep(&params, &sweep)?,
        Command::RowEnvelope => row_envelope(&params, &sweep)?,
        Command::Nmr { restrict_min } => nmr_tables(&params, &sweep, *restrict_min)?,
        Command::Montecarlo {
            runs,
            sigma,
            cells,
            temp,
        } => montecarlo(&params, c.seed, *runs, *sigma, *cells, *temp)?,
        Command::Energy { temp } => energy(&params, *temp)?,
        Command::Infer { temps, sigma, images } => infer(&params, &sweep, c.seed, temps, *sigma, *images)?,
        Command::Calibrate { sweeps } => calibrate_run(&params, *sweeps)?,
    };
    write_run(&out_dir, inv, &params, &out)?;
    for (k, v) in &out.summary {
        println!("{k} = {v}");
    }
    println!("wrote {}", out_dir.display());
    match out.deferred.take() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn manifest(inv: &Invocation, params: &Params, out: &RunOutput, files: &[(String, Vec<u8>)]) -> String {
    let c = &inv.common;
    let mut s = String::new();
    let q = |v: &str| format!("{v:?}");
    let _ = writeln!(s, "tool = {}", q(concat!("fecim ", env!("CARGO_PKG_VERSION"))));
    let _ = writeln!(s, "command = {}", q(inv.command.name()));
    let _ = writeln!(s, "arguments = {}", q(&format!("{:?}", inv.command)));
    let _ = writeln!(s, "seed = {}", c.seed);
    let _ = writeln!(s, "temp_min = {:?}", c.temp_min);
    let _ = writeln!(s, "temp_max = {:?}", c.temp_max);
    let _ = writeln!(s, "temp_step = {:?}", c.temp_step);
    let params_path = c.params.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    let _ = writeln!(s, "params_file = {}", q(&params_path));
    let sets: Vec<String> = c.set.iter().map(|v| q(v)).collect();
    let _ = writeln!(s, "overrides = [{}]", sets.join(", "));
    let _ = writeln!(s, "params_sha256 = {}", q(&params.digest()));
    s.push_str("\n[summary]\n");
    for (k, v) in &out.summary {
        let _ = writeln!(s, "{k} = {}", q(v));
    }
    s.push_str("\n[files]\n");
    for (name, bytes) in files {
        let hash: String = Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(s, "{:?} = {}", name, q(&hash));
    }
    s
}

fn write_run(dir: &Path, inv: &Invocation, params: &Params, out: &RunOutput) -> Result<()> {
    let mut files: Vec<(String, Vec<u8>)> = out
        .tables
        .iter()
        .map(|t| (format!("{}.csv", t.name), t.to_csv().into_bytes()))
        .collect();
    files.extend(out.files.iter().map(|(n, c)| (n.clone(), c.clone().into_bytes())));
    files.push(("params.toml".into(), params.to_toml().into_bytes()));
    let m = manifest(inv, params, out, &files);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in files
        .iter()
        .chain(std::iter::once(&("manifest.toml".to_string(), m.into_bytes())))
    {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn device_iv(params: &Params, sweep: &SweepSpec, vds: f64, step: f64) -> Result<RunOutput> {
    if !(step > 0.0) || !(vds.abs() <= 5.0) {
        return Err(Error::invalid("vgs_step", "vgs_step must be > 0 and |vds| <= 5 V"));
    }
    let mut t = Table::new("device_iv", &["device", "t_c", "v_gs", "v_ds", "i_d"]);
    let points = (1.3 / step + 1e-9).floor() as usize;
    for temp in sweep.grid()? {
        let fe = &params.fefet;
        let devices = [
            (
                "fefet_low",
                fe.device,
                effective_vth(fe, FeFetState::new(Polarization::LowVt), temp),
            ),
            (
                "fefet_high",
                fe.device,
                effective_vth(fe, FeFetState::new(Polarization::HighVt), temp),
            ),
            ("m1", params.m1, params.m1.vth_at(params.m1.vth_ref, temp)),
            ("m2", params.m2, params.m2.vth_at(params.m2.vth_ref, temp)),
        ];
        for (name, dev, vth) in devices {
            for k in 0..=points {
                let v_gs = k as f64 * step;
                let i = drain_current(&dev, vth, v_gs, vds, temp);
                t.push(vec![name.into(), f(temp.celsius()), f(v_gs), f(vds), f(i)]);
            }
        }
    }
    let mut out = RunOutput::new();
    out.note("rows", t.rows.len());
    out.tables.push(t);
    Ok(out)
}

fn cell_sweep(params: &Params, sweep: &SweepSpec) -> Result<RunOutput> {
    let grid = sweep.grid()?;
    let resp = crate::array::responses(params, &grid, 0.0)?;
    let mut cells = Table::new("cell_sweep", &["t_c", "input", "stored", "v_o", "energy"]);
    for (temp, r) in grid.iter().zip(&resp) {
        for (x, w) in [(false, false), (false, true), (true, false), (true, true)] {
            let o = r.get(x, w);
            cells.push(vec![
                f(temp.celsius()),
                (x as u8).to_string(),
                (w as u8).to_string(),
                f(o.v_o),
                f(o.energy),
            ]);
        }
    }
    let cell = fluctuation_profile(params, ProfileTarget::TwoT1FeFet, sweep)?;
    let sub = fluctuation_profile(params, ProfileTarget::Baseline { v_read: params.v_read }, sweep)?;
    let sat = fluctuation_profile(
        params,
        ProfileTarget::Baseline {
            v_read: V_READ_SATURATION,
        },
        sweep,
    )?;
    let mut prof = Table::new(
        "fluctuation",
        &[
            "t_c",
            "cell_v_o",
            "cell_normalized",
            "baseline_sub_i",
            "baseline_sub_normalized",
            "baseline_sat_i",
            "baseline_sat_normalized",
        ],
    );
    for k in 0..cell.temps.len() {
        prof.push(vec![
            f(cell.temps[k]),
            f(cell.output[k]),
            f(cell.normalized[k]),
            f(sub.output[k]),
            f(sub.normalized[k]),
            f(sat.output[k]),
            f(sat.normalized[k]),
        ]);
    }
    let mut out = RunOutput::new();
    out.note("cell_fluctuation", cell.fluctuation());
    out.note("cell_fluctuation_20_85", cell.fluctuation_within(20.0, 85.0));
    out.note("baseline_subthreshold_fluctuation", sub.fluctuation());
    out.note("baseline_saturation_fluctuation", sat.fluctuation());
    out.tables.extend([cells, prof]);
    Ok(out)
}

fn envelope_tables(env: &OutputEnvelope, name: &str) -> (Table, Table) {
    let mut samples = Table::new(&format!("{name}_samples"), &["level", "t_c", "v_acc_min", "v_acc_max"]);
    for (level, per_t) in env.samples.iter().enumerate() {
        for (t, vs) in env.grid.iter().zip(per_t) {
            let lo = vs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            samples.push(vec![level.to_string(), f(*t), f(lo), f(hi)]);
        }
    }
    let mut ranges = Table::new(&format!("{name}_ranges"), &["level", "lv", "hv"]);
    for i in 0..env.levels() {
        ranges.push(vec![i.to_string(), f(env.lv[i]), f(env.hv[i])]);
    }
    (samples, ranges)
}

fn row_envelope(params: &Params, sweep: &SweepSpec) -> Result<RunOutput> {
    let grid = sweep.grid()?;
    let cfg = RowConfig::calibrated(*params, &grid)?;
    let env = envelope(&cfg, &grid)?;
    let (samples, ranges) = envelope_tables(&env, "envelope");
    let d = calibrate_decode_thresholds(&env);
    let mut th = Table::new("thresholds", &["boundary", "v_threshold"]);
    for (i, v) in d.thresholds.iter().enumerate() {
        th.push(vec![i.to_string(), f(*v)]);
    }
    let mut out = RunOutput::new();
    out.note("overlap_warning", d.overlap_warning);
    out.tables.extend([samples, ranges, th]);
    Ok(out)
}

fn nmr_table(name: &str, env: &OutputEnvelope, out: &mut RunOutput) -> Result<()> {
    let r = nmr(env)?;
    let mut t = Table::new(name, &["i", "lv_i", "hv_i", "lv_next", "nmr"]);
    for (i, v) in r.nmr.iter().enumerate() {
        t.push(vec![i.to_string(), f(env.lv[i]), f(env.hv[i]), f(env.lv[i + 1]), f(*v)]);
    }
    out.note(&format!("{name}_min"), r.nmr_min);
    out.note(&format!("{name}_argmin"), r.argmin);
    out.tables.push(t);
    Ok(())
}

fn nmr_tables(params: &Params, sweep: &SweepSpec, restrict_min: f64) -> Result<RunOutput> {
    let grid = sweep.grid()?;
    let cfg = RowConfig::calibrated(*params, &grid)?;
    let env = envelope(&cfg, &grid)?;
    let mut out = RunOutput::new();
    nmr_table("nmr", &env, &mut out)?;
    let sub = env.restrict(restrict_min, sweep.t_max);
    if sub.grid.is_empty() {
        return Err(Error::invalid("restrict_min", "no grid point in the restricted range"));
    }
    nmr_table("nmr_restricted", &sub, &mut out)?;
    let base = baseline_envelope(params, params.v_read, &grid)?;
    nmr_table("nmr_baseline", &base, &mut out)?;
    Ok(out)
}

fn montecarlo(params: &Params, seed: u64, runs: usize, sigma: f64, cells: usize, temp: f64) -> Result<RunOutput> {
    let spec = MonteCarloSpec {
        runs,
        sigma,
        seed,
        cells_per_row: cells,
    };
    let r = monte_carlo(params, &spec, Temperature::from_celsius(temp)?)?;
    let mut errors = Table::new("mc_errors", &["run", "max_relative_error"]);
    for (i, e) in r.run_errors.iter().enumerate() {
        errors.push(vec![i.to_string(), f(*e)]);
    }
    let mut hist = Table::new("mc_histogram", &["bin_lo", "bin_hi", "count"]);
    for (k, c) in r.counts.iter().enumerate() {
        hist.push(vec![f(r.bin_edges[k]), f(r.bin_edges[k + 1]), c.to_string()]);
    }
    let mut out = RunOutput::new();
    out.note("max_error", r.max_error);
    out.note("unit_v", r.unit);
    out.tables.extend([errors, hist]);
    Ok(out)
}

fn energy(params: &Params, temp: f64) -> Result<RunOutput> {
    let r = energy_report(params, Temperature::from_celsius(temp)?)?;
    let mut t = Table::new("energy", &["level", "energy_j"]);
    for (i, e) in r.per_level.iter().enumerate() {
        t.push(vec![i.to_string(), f(*e)]);
    }
    let mut out = RunOutput::new();
    out.note("average_energy_j", f(r.average));
    out.note("ops_per_mac", r.ops_per_mac);
    out.note("tops_per_watt", r.tops_per_watt);
    out.note("latency_s", f(r.latency));
    out.tables.push(t);
    Ok(out)
}

fn infer(params: &Params, sweep: &SweepSpec, seed: u64, temps: &[f64], sigma: f64, images: usize) -> Result<RunOutput> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("sigma", "must be >= 0"));
    }
    let net = digits_network()?;
    let data = digits_test_set()?.truncated(images);
    let mut grid = sweep.grid()?;
    for &t in temps {
        grid.push(Temperature::from_celsius(t)?);
    }
    grid.push(Temperature::room());
    let cfg = RowConfig::calibrated(*params, &grid)?;
    let sw = evaluate_software(&net, &data)?;
    let variation = (sigma > 0.0).then_some(VariationSpec { sigma, seed });
    let mut summary = Table::new(
        "infer",
        &[
            "t_c",
            "sigma",
            "images",
            "correct",
            "accuracy",
            "software_accuracy",
            "matches_software",
            "energy_j",
            "row_macs",
            "decode_errors",
        ],
    );
    let mut preds = Table::new("predictions", &["t_c", "image", "label", "predicted", "software"]);
    let mut out = RunOutput::new();
    for &t in temps {
        let r = evaluate(&net, &data, &cfg, Temperature::from_celsius(t)?, variation)?;
        let errors: usize = r.decode_errors.iter().sum();
        summary.push(vec![
            f(t),
            f(sigma),
            r.images.to_string(),
            r.correct.to_string(),
            f(r.accuracy),
            f(sw.accuracy),
            (r.predictions == sw.predictions).to_string(),
            f(r.energy),
            r.row_macs.to_string(),
            errors.to_string(),
        ]);
        for (k, (&p, &s)) in r.predictions.iter().zip(&sw.predictions).enumerate() {
            preds.push(vec![
                f(t),
                k.to_string(),
                data.labels[k].to_string(),
                p.to_string(),
                s.to_string(),
            ]);
        }
        out.note(&format!("accuracy_{t}"), r.accuracy);
    }
    out.note("software_accuracy", sw.accuracy);
    out.tables.extend([summary, preds]);
    Ok(out)
}

fn calibrate_run(params: &Params, sweeps: usize) -> Result<RunOutput> {
    let report = calibrate(params, &Targets::default(), &default_knobs(), sweeps)?;
    let mut t = Table::new("calibration_terms", &["term", "value", "target", "cost"]);
    for term in &report.terms {
        t.push(vec![term.name.clone(), f(term.value), f(term.target), f(term.cost)]);
    }
    let mut out = RunOutput::new();
    out.note("objective", report.objective);
    out.note("improvements", report.improvements);
    out.tables.push(t);
    out.files
        .push(("calibrated_params.toml".into(), report.params.to_toml()));
    out.files.push(("calibration_report.txt".into(), report.render()));
    out.deferred = check_gate(&report).err();
    Ok(out)
}

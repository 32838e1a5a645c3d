//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Hard criteria fail the process. Soft (calibration-band) criteria are
//! reported and counted but do not change the exit status.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fecim::analysis::{fluctuation_profile, metrics, monte_carlo, MonteCarloSpec, ProfileTarget, SweepSpec};
use fecim::array::{charge_share, finish_mac, mac_row, nmr, CellResponse, OutputEnvelope, RowConfig};
use fecim::device::Temperature;
use fecim::nn_eval::{digits_network, digits_test_set, evaluate, evaluate_software, VariationSpec};
use fecim::params::Params;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Accuracy of the bundled network on the 500 test images at 27 °C with
/// σ = 54 mV threshold variation drawn from seed 1.
const SIGMA_54MV_ACCURACY_SEED_1: f64 = 0.38;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn within(v: f64, lo: f64, hi: f64) -> bool {
    v >= lo && v <= hi
}

fn grid() -> Vec<Temperature> {
    SweepSpec::default().grid().unwrap()
}

fn c1_charge_share() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_formula = 0.0_f64;
    let mut worst_charge = 0.0_f64;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=32);
        let vo: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.2)).collect();
        let c_o = rng.random_range(1e-16..1e-13);
        let c_acc = c_o * rng.random_range(0.0..8.0);
        let v = charge_share(&vo, c_o, c_acc);
        let sum: f64 = vo.iter().sum();
        let formula = c_o * sum / (n as f64 * c_o + c_acc);
        // Charge before: each C_o at its own voltage, C_acc discharged. After:
        // all capacitors in parallel at V_acc.
        let q_before: f64 = vo.iter().map(|x| c_o * x).sum();
        let q_after = v * (c_o * n as f64 + c_acc);
        worst_formula = worst_formula.max((v - formula).abs() / formula.abs().max(f64::MIN_POSITIVE));
        worst_charge = worst_charge.max((q_after - q_before).abs() / q_before.abs().max(f64::MIN_POSITIVE));
    }
    Outcome::new(
        worst_formula <= 1e-12 && worst_charge <= 1e-12,
        format!("max rel err formula {worst_formula:.2e}, charge {worst_charge:.2e} over 10000 cases"),
    )
}

type Ranges<'a> = &'a [(f64, f64)];

fn c2_nmr_arithmetic() -> Outcome {
    let cases: [(Ranges, &[f64]); 3] = [
        (&[(0.0, 1.0), (3.0, 4.0)], &[2.0]),
        (&[(0.0, 2.0), (1.0, 3.0), (4.0, 4.5)], &[-0.5, 0.5]),
        (&[(0.0, 0.5), (1.0, 1.25), (1.5, 2.0), (3.0, 4.0)], &[1.0, 1.0, 2.0]),
    ];
    let mut ok = true;
    for (ranges, expect) in cases {
        let env = OutputEnvelope::from_ranges(
            ranges.iter().map(|r| r.0).collect(),
            ranges.iter().map(|r| r.1).collect(),
        );
        let r = nmr(&env).unwrap();
        let min = expect.iter().copied().fold(f64::INFINITY, f64::min);
        ok &= r.nmr == expect && r.nmr_min == min;
    }
    Outcome::new(ok, "hand-computed envelopes, exact equality")
}

fn c3_calibration(params: &Params) -> Outcome {
    let m = metrics(params).unwrap();
    let checks = [
        (
            "baseline sat",
            m.baseline_sat_fluctuation,
            within(m.baseline_sat_fluctuation, 0.186, 0.226),
        ),
        (
            "baseline sub",
            m.baseline_sub_fluctuation,
            within(m.baseline_sub_fluctuation, 0.491, 0.551),
        ),
        ("cell 0-85", m.cell_fluctuation, m.cell_fluctuation <= 0.286),
        (
            "cell 20-85",
            m.cell_fluctuation_20_85,
            m.cell_fluctuation_20_85 <= 0.144,
        ),
        (
            "NMR 0-85",
            m.nmr_full.nmr_min,
            within(m.nmr_full.nmr_min, 0.15, 0.35) && m.nmr_full.argmin == 0,
        ),
        (
            "NMR 20-85",
            m.nmr_20_85.nmr_min,
            within(m.nmr_20_85.nmr_min, 1.8, 2.8) && m.nmr_20_85.argmin == 7,
        ),
        (
            "energy fJ",
            m.average_energy * 1e15,
            within(m.average_energy, 0.7 * 3.14e-15, 1.3 * 3.14e-15),
        ),
    ];
    let detail = checks
        .iter()
        .map(|(n, v, ok)| format!("{n} {v:.4}{}", if *ok { "" } else { " (out of band)" }))
        .collect::<Vec<_>>()
        .join(", ");
    let detail = format!("{detail}, argmins {}/{}", m.nmr_full.argmin, m.nmr_20_85.argmin);
    Outcome::new(checks.iter().all(|c| c.2), detail)
}

fn c4_compensation(params: &Params) -> Outcome {
    let spec = SweepSpec::default();
    let cell = fluctuation_profile(params, ProfileTarget::TwoT1FeFet, &spec).unwrap();
    let sub = fluctuation_profile(params, ProfileTarget::Baseline { v_read: params.v_read }, &spec).unwrap();
    let mut worst = f64::INFINITY;
    let mut ok = true;
    for k in 0..cell.temps.len() {
        let (a, b) = ((cell.normalized[k] - 1.0).abs(), (sub.normalized[k] - 1.0).abs());
        ok &= a < b;
        // Skip points where both coincide with the reference.
        if b > 0.0 {
            worst = worst.min(b - a);
        }
    }
    Outcome::new(
        ok,
        format!("{} grid points, smallest margin {worst:.4}", cell.temps.len()),
    )
}

fn c5_baseline_overlap(params: &Params) -> Outcome {
    let m = metrics(params).unwrap();
    let r = &m.baseline_row_nmr;
    Outcome::new(
        r.nmr_min < 0.0,
        format!("baseline NMR_min {:.4} at i = {}", r.nmr_min, r.argmin),
    )
}

fn c6_decode(params: &Params) -> Outcome {
    let cfg = RowConfig::calibrated(*params, &grid()).unwrap();
    let m = metrics(params).unwrap();
    if m.nmr_full.nmr_min.is_nan() || m.nmr_full.nmr_min <= 0.0 {
        return Outcome::new(false, format!("NMR_min {} is not positive", m.nmr_full.nmr_min));
    }
    let temps = [0.0, 20.0, 45.0, 65.0, 85.0];
    let mut errors = 0usize;
    let mut cases = 0usize;
    for t in temps {
        let temp = Temperature::from_celsius(t).unwrap();
        let resp = CellResponse::compute(params, temp, 0.0).unwrap();
        for xp in 0u32..256 {
            for wp in 0u32..256 {
                let outs: Vec<_> = (0..8)
                    .map(|j| resp.get((xp >> j) & 1 == 1, (wp >> j) & 1 == 1))
                    .collect();
                let r = finish_mac(&outs, &cfg);
                cases += 1;
                if r.decoded != (xp & wp).count_ones() as usize {
                    errors += 1;
                }
            }
        }
        // The cached per-cell responses agree with direct row evaluation.
        for xp in [0u32, 0x5a, 0xff] {
            let x: Vec<bool> = (0..8).map(|j| (xp >> j) & 1 == 1).collect();
            let w: Vec<bool> = (0..8).map(|j| (0xcc >> j) & 1 == 1).collect();
            let direct = mac_row(&x, &w, temp, &cfg, &[0.0; 8]).unwrap();
            if direct.decoded != (xp & 0xcc).count_ones() as usize {
                errors += 1;
            }
        }
    }
    Outcome::new(
        errors == 0,
        format!("{errors} decode errors over {cases} input x weight patterns at {temps:?} °C"),
    )
}

fn c7_monte_carlo(params: &Params) -> Outcome {
    let room = Temperature::room();
    let run = |cells: usize| {
        let spec = MonteCarloSpec {
            cells_per_row: cells,
            ..MonteCarloSpec::default()
        };
        let a = monte_carlo(params, &spec, room).unwrap();
        let b = monte_carlo(params, &spec, room).unwrap();
        (a.max_error, a.run_errors == b.run_errors && a.counts == b.counts)
    };
    let (e8, d8) = run(8);
    let (e4, d4) = run(4);
    let ok = within(e8, 0.15, 0.35) && within(e4, 0.03, 0.15) && d8 && d4;
    Outcome::new(
        ok,
        format!(
            "8 cells {e8:.4} (band 0.15-0.35), 4 cells {e4:.4} (band 0.03-0.15), deterministic {}",
            d8 && d4
        ),
    )
}

fn c8_inference(params: &Params) -> Outcome {
    let net = digits_network().unwrap();
    let data = digits_test_set().unwrap();
    let temps = [0.0, 27.0, 60.0, 85.0];
    let mut g = grid();
    g.push(Temperature::room());
    let cfg = RowConfig::calibrated(*params, &g).unwrap();
    let sw = evaluate_software(&net, &data).unwrap();
    let mut identical = true;
    let mut accs = Vec::new();
    for t in temps {
        let r = evaluate(&net, &data, &cfg, Temperature::from_celsius(t).unwrap(), None).unwrap();
        identical &= r.predictions == sw.predictions && r.decode_errors.iter().all(|&e| e == 0);
        accs.push(r.accuracy);
    }
    let same_acc = accs.iter().all(|&a| a == accs[0]);
    let var = |seed| {
        evaluate(
            &net,
            &data,
            &cfg,
            Temperature::room(),
            Some(VariationSpec { sigma: 0.054, seed }),
        )
        .unwrap()
        .accuracy
    };
    let (v1, v1_again) = (var(1), var(1));
    let ok = data.len() >= 500 && identical && same_acc && v1 == v1_again && v1 == SIGMA_54MV_ACCURACY_SEED_1;
    Outcome::new(
        ok,
        format!(
            "{} images; software {:.3}; hw bit-identical {identical}; acc at {temps:?} °C = {accs:?}; σ=54 mV seed 1 {v1} (committed {SIGMA_54MV_ACCURACY_SEED_1}, rerun {v1_again})",
            data.len(),
            sw.accuracy
        ),
    )
}

fn c9_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let runs: [&[&str]; 8] = [
        &["device-iv"],
        &["cell-sweep"],
        &["row-envelope"],
        &["nmr"],
        &["montecarlo", "--seed", "5"],
        &["energy"],
        &[
            "infer", "--images", "40", "--sigma", "0.054", "--seed", "3", "--temp", "0", "--temp", "85",
        ],
        &["calibrate", "--sweeps", "1"],
    ];
    let mut mismatched = Vec::new();
    for args in runs {
        let dirs: Vec<_> = ["a", "b"]
            .iter()
            .map(|tag| {
                let dir = tmp.path().join(format!("{}-{tag}", args[0]));
                let code = Command::new(env!("CARGO_BIN_EXE_fecim"))
                    .args(args)
                    .arg("--out")
                    .arg(&dir)
                    .output()
                    .unwrap()
                    .status
                    .code();
                (dir, code)
            })
            .collect();
        if dirs[0].1 != dirs[1].1 || !same_tree(&dirs[0].0, &dirs[1].0) {
            mismatched.push(args[0]);
        }
    }
    Outcome::new(
        mismatched.is_empty(),
        format!("{} subcommands run twice, mismatched: {mismatched:?}", runs.len()),
    )
}

fn same_tree(a: &Path, b: &Path) -> bool {
    let list = |d: &Path| -> Vec<_> {
        let mut v: Vec<_> = std::fs::read_dir(d)
            .map(|it| it.map(|e| e.unwrap().file_name()).collect())
            .unwrap_or_default();
        v.sort();
        v
    };
    let (la, lb) = (list(a), list(b));
    !la.is_empty()
        && la == lb
        && la
            .iter()
            .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap())
}

struct Criterion {
    id: u8,
    name: &'static str,
    hard: bool,
    limit: Duration,
    run: Box<dyn Fn(&Params) -> Outcome>,
}

fn main() {
    let params = Params::default();
    let secs = Duration::from_secs;
    let criteria = vec![
        Criterion {
            id: 1,
            name: "charge-share exactness",
            hard: true,
            limit: secs(1),
            run: Box::new(|_| c1_charge_share()),
        },
        Criterion {
            id: 2,
            name: "NMR arithmetic",
            hard: true,
            limit: secs(1),
            run: Box::new(|_| c2_nmr_arithmetic()),
        },
        Criterion {
            id: 3,
            name: "calibration fidelity",
            hard: false,
            limit: secs(300),
            run: Box::new(c3_calibration),
        },
        Criterion {
            id: 4,
            name: "temperature compensation",
            hard: true,
            limit: secs(300),
            run: Box::new(c4_compensation),
        },
        Criterion {
            id: 5,
            name: "baseline overlap",
            hard: true,
            limit: secs(300),
            run: Box::new(c5_baseline_overlap),
        },
        Criterion {
            id: 6,
            name: "decode soundness",
            hard: true,
            limit: secs(120),
            run: Box::new(c6_decode),
        },
        Criterion {
            id: 7,
            name: "Monte Carlo variation",
            hard: false,
            limit: secs(300),
            run: Box::new(c7_monte_carlo),
        },
        Criterion {
            id: 8,
            name: "NN inference",
            hard: true,
            limit: secs(600),
            run: Box::new(c8_inference),
        },
        Criterion {
            id: 9,
            name: "CLI determinism",
            hard: true,
            limit: secs(300),
            run: Box::new(|_| c9_determinism()),
        },
    ];
    let suite = Instant::now();
    let mut hard_failures = 0;
    let mut passed = 0;
    for c in &criteria {
        let start = Instant::now();
        let out = (c.run)(&params);
        let elapsed = start.elapsed();
        let pass = out.pass && elapsed <= c.limit;
        let kind = if c.hard { "hard" } else { "soft" };
        println!(
            "{} criterion {} [{kind}] {}: {} ({:.2} s, limit {} s)",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            out.detail,
            elapsed.as_secs_f64(),
            c.limit.as_secs()
        );
        if pass {
            passed += 1;
        } else if c.hard {
            hard_failures += 1;
        }
    }
    println!(
        "acceptance: {passed}/{} passed, {hard_failures} hard failures, {:.1} s",
        criteria.len(),
        suite.elapsed().as_secs_f64()
    );
    if hard_failures > 0 {
        std::process::exit(1);
    }
}

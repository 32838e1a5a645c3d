use fecim::array::{charge_share, nmr, OutputEnvelope};
use fecim::device::{
    channel_current, drain_current, program, DeviceParams, FeFetState, Polarization, Temperature, WritePulse, K_OVER_Q,
};
use fecim::params::{Params, KEYS};
use proptest::prelude::*;

fn device() -> impl Strategy<Value = DeviceParams> {
    (
        1e-9..1e-5f64,
        0.5..10.0f64,
        1.0..3.0f64,
        0.2..1.5f64,
        -2e-3..0.0f64,
        -2.5..0.0f64,
        0.0..0.2f64,
    )
        .prop_map(
            |(i0, wl_ratio, n_slope, vth_ref, kappa_t, i0_t_exponent, lambda)| DeviceParams {
                i0,
                wl_ratio,
                n_slope,
                vth_ref,
                kappa_t,
                i0_t_exponent,
                lambda,
            },
        )
}

fn temp() -> impl Strategy<Value = Temperature> {
    (-20.0..120.0f64).prop_map(|c| Temperature::from_celsius(c).unwrap())
}

proptest! {
    #[test]
    fn subthreshold_current_matches_closed_form(
        d in device(), t in temp(), below in 0.01..0.5f64, v_ds in 0.0..1.5f64,
    ) {
        let vth = d.vth_at(d.vth_ref, t);
        let v_gs = vth - below;
        let ut = K_OVER_Q * (t.celsius() + 273.15);
        let expect = d.i0 * d.wl_ratio * ((t.celsius() + 273.15) / 300.0).powf(d.i0_t_exponent)
            * ((v_gs - vth) / (d.n_slope * ut)).exp()
            * (1.0 - (-v_ds / ut).exp())
            * (1.0 + d.lambda * v_ds);
        let got = channel_current(&d, vth, v_gs, v_ds, t);
        prop_assert!((got - expect).abs() <= 1e-12 * expect.abs() + 1e-300, "{got} vs {expect}");
    }

    #[test]
    fn one_decade_per_slope_step(d in device(), t in temp(), below in 0.6..1.0f64) {
        let vth = d.vth_at(d.vth_ref, t);
        let step = d.n_slope * t.thermal_voltage() * std::f64::consts::LN_10;
        let lo = channel_current(&d, vth, vth - below, 0.5, t);
        let hi = channel_current(&d, vth, vth - below + step, 0.5, t);
        prop_assume!(step < below);
        prop_assert!((hi / lo - 10.0).abs() < 1e-9);
    }

    #[test]
    fn reversing_the_channel_negates_the_current(
        d in device(), t in temp(), v_gs in -0.5..1.5f64, v_ds in 0.001..1.0f64,
    ) {
        let vth = d.vth_ref;
        let fwd = drain_current(&d, vth, v_gs + v_ds, v_ds, t);
        let rev = drain_current(&d, vth, v_gs, -v_ds, t);
        prop_assert!((fwd + rev).abs() <= 1e-12 * fwd.abs());
    }

    #[test]
    fn current_is_monotone_in_gate_voltage(d in device(), t in temp(), v in -0.5..2.0f64, dv in 1e-4..0.5f64) {
        let a = drain_current(&d, d.vth_ref, v, 0.8, t);
        let b = drain_current(&d, d.vth_ref, v + dv, 0.8, t);
        prop_assert!(b > a);
    }

    #[test]
    fn programming_is_idempotent(
        start in any::<bool>(), offset in -0.1..0.1f64, amp in -6.0..6.0f64, dur in 1e-9..1e-6f64,
    ) {
        let s = FeFetState::with_offset(Polarization::from_bit(start), offset);
        let p = WritePulse::new(amp, dur).unwrap();
        let once = program(s, p);
        prop_assert_eq!(program(once, p), once);
        prop_assert_eq!(once.vth_offset, offset);
    }

    #[test]
    fn full_pulses_set_the_state_regardless_of_history(start in any::<bool>(), bit in any::<bool>()) {
        let s = program(FeFetState::new(Polarization::from_bit(start)), WritePulse::for_bit(bit));
        prop_assert_eq!(s.polarization.bit(), bit);
    }

    #[test]
    fn charge_share_is_bounded_and_order_free(
        mut vo in prop::collection::vec(0.0..1.2f64, 1..16), c_o in 1e-16..1e-14f64, ratio in 0.1..10.0f64,
    ) {
        let c_acc = c_o * ratio;
        let v = charge_share(&vo, c_o, c_acc);
        let n = vo.len() as f64;
        let max = vo.iter().copied().fold(0.0, f64::max);
        prop_assert!(v >= 0.0 && v <= max * n * c_o / (n * c_o + c_acc) + 1e-15);
        vo.reverse();
        prop_assert!((charge_share(&vo, c_o, c_acc) - v).abs() < 1e-15);
    }

    #[test]
    fn nmr_matches_definition(ranges in prop::collection::vec((0.0..1.0f64, 0.001..0.1f64), 2..10)) {
        let lv: Vec<f64> = ranges.iter().map(|r| r.0).collect();
        let hv: Vec<f64> = ranges.iter().map(|r| r.0 + r.1).collect();
        let r = nmr(&OutputEnvelope::from_ranges(lv.clone(), hv.clone())).unwrap();
        for i in 0..lv.len() - 1 {
            let expect = (lv[i + 1] - hv[i]) / (hv[i] - lv[i]);
            prop_assert!((r.nmr[i] - expect).abs() < 1e-12);
            prop_assert!(r.nmr_min <= r.nmr[i]);
        }
    }

    #[test]
    fn parameter_file_round_trips(k in 0..KEYS.len(), scale in 0.9..1.1f64) {
        let key = KEYS[k];
        let mut p = Params::default();
        let v = p.get(key).unwrap() * scale;
        if p.set(key, v).is_ok() && p.validate().is_ok() {
            let back = Params::parse(&p.to_toml()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}

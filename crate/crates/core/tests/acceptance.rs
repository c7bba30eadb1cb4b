//! Acceptance suite: one PASS/FAIL line per criterion with its tolerance.
//!
//! Criteria listed in `KNOWN_RED` fail for documented reasons and do not fail
//! the run; any other failure, or a known-red criterion that starts passing,
//! exits non-zero.

use std::f64::consts::TAU;
use std::process::ExitCode;
use std::time::Instant;
use tlsecho::echo::{
    abundance_rates, echo_curve, one_over_e_time, rabi_asymptote, rabi_pair, stretched_exp_fit, EchoModelConfig,
    FitOptions, RabiConfig,
};
use tlsecho::fit::{closed_loop_specs, global_fit, synthesize_trace, ScanSpec};
use tlsecho::kernels::{
    kernel_crossover, long_time_coefficient, short_time_coefficient, CrossoverShape, DephasingChannel, Exponent,
};
use tlsecho::levels::{clock_field, ring_exchange, ThirdIon};
use tlsecho::oracle::{
    beta_refit, mc_echo, normalized_crossover, ring_shift_exact, Estimator, FluctuatorEnsemble, BOUNDARY_TOLERANCE,
};
use tlsecho::rates::{RateParams, RateTable};
use tlsecho::trace::{EchoTrace, Regime, TraceMeta};
use tlsecho::units::{angular, MHZ, US};
use tlsecho::{Config, HyperfineState};

/// (criterion, reason) pairs expected to fail.
const KNOWN_RED: &[(u32, &str)] = &[
    (2, "gamma = 3 beta' for N >= 2 is not reproduced by an exact fluctuator average"),
    (5, "nnn N = 1 1/e time is 2.98 us against 2.4 us +/- 20%"),
    (7, "the stationary-phase prefactor is 1, not 1/2"),
];

const SEED: u64 = 2024;
const SAMPLES: usize = 100_000;

struct Outcome {
    id: u32,
    pass: bool,
    lines: Vec<String>,
}

impl Outcome {
    fn new(id: u32) -> Self {
        Outcome {
            id,
            pass: true,
            lines: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.pass &= ok;
        self.lines.push(format!("    [{}] {line}", if ok { "ok" } else { "x" }));
    }

    fn note(&mut self, line: String) {
        self.lines.push(format!("    {line}"));
    }
}

fn sig3(x: f64) -> f64 {
    format!("{x:.2e}").parse().unwrap()
}

fn criterion_1() -> Outcome {
    let mut o = Outcome::new(1);
    let cases = [
        ("short, gamma = 6", short_time_coefficient(Exponent::Ring), 2.44),
        ("short, gamma = 3", short_time_coefficient(Exponent::Magnetic), 2.25),
        ("long, gamma = 6", long_time_coefficient(Exponent::Ring), 488.0),
        ("long, gamma = 3", long_time_coefficient(Exponent::Magnetic), 65.3),
    ];
    for (name, v, target) in cases {
        o.check(sig3(v) == target, format!("{name}: {v:.5} -> {} (target {target}, 3 s.f.)", sig3(v)));
    }
    o
}

fn criterion_2() -> Outcome {
    let mut o = Outcome::new(2);
    let published = CrossoverShape::published();
    for e in [Exponent::Ring, Exponent::Magnetic] {
        for n in 1..=5 {
            let target = published.beta(e, n);
            match beta_refit(e, n, SAMPLES, SEED) {
                Ok(f) => o.check(
                    (f.beta - target).abs() <= 0.1,
                    format!(
                        "gamma = {}, N = {n}: beta = {:.3} (target {target} +/- 0.1, rms log residual {:.3})",
                        e.gamma(),
                        f.beta,
                        f.rms_log_residual
                    ),
                ),
                Err(err) => o.check(false, format!("gamma = {}, N = {n}: {err}", e.gamma())),
            }
        }
    }
    o
}

fn criterion_3() -> Outcome {
    let mut o = Outcome::new(3);
    let p = Config::default().material().unwrap();
    for (iz, target) in [(HyperfineState::M3Half, 38.0), (HyperfineState::M1Half, 13.0)] {
        let b = clock_field(&p, iz) * 1e3;
        o.check((b - target).abs() <= 0.5, format!("I^z = {iz}: {b:.3} mT (target {target} +/- 0.5)"));
    }
    o
}

fn criterion_4() -> Outcome {
    let mut o = Outcome::new(4);
    let c = Config::default();
    let rates = RateParams { c1: 0.41, c2: 1.67 };
    let table = |x: f64| {
        let p = c.material().unwrap().with_fraction(x);
        let mut d = c.disorder_at(x);
        d.w_delta_hz = 21e6 * x / 1e-3;
        RateTable::build(&p, &d, &rates, clock_field(&p, HyperfineState::M3Half))
    };
    let (hi, lo) = (table(1e-3), table(1e-4));
    let cases = [
        ("-3/2, x = 0.1%", hi.get(HyperfineState::M3Half).flip_time(), 0.45e-6),
        ("-3/2, x = 0.01%", lo.get(HyperfineState::M3Half).flip_time(), 4.6e-6),
        ("-1/2, x = 0.1%", hi.get(HyperfineState::M1Half).flip_time(), 12e-6),
        ("+1/2, x = 0.1%", hi.get(HyperfineState::P1Half).flip_time(), 0.016),
    ];
    for (name, v, target) in cases {
        let dev = (v / target - 1.0).abs();
        o.check(dev <= 0.15, format!("{name}: {v:.3e} s (target {target:e} s +/- 15%, off {:.1}%)", 100.0 * dev));
    }
    let p12 = hi.get(HyperfineState::P1Half);
    let p32 = hi.get(HyperfineState::P3Half);
    o.check(!p12.quasi_static, format!("+1/2 fluctuating: quasi_static = {}", p12.quasi_static));
    o.check(p32.quasi_static, format!("+3/2 quasi-static: 1/kappa = {:.3e} s", p32.flip_time()));
    o
}

fn log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn criterion_5() -> Outcome {
    let mut o = Outcome::new(5);
    let c = Config::default();
    let p = c.material().unwrap();
    let b = clock_field(&p, HyperfineState::M3Half);
    let m = EchoModelConfig::from_config(&c, Regime::NnnPair, 1e-3, b).unwrap();
    let t_f = m.fluorine.t_f_nnn();
    let kinv = 1.0 / m.fluorine.kappa_f;
    o.check(
        (t_f * 16.0 * m.fluorine.kappa_f - 1.0).abs() < 1e-12 && (t_f / US * 10.0).round() == 38.0,
        format!("T_F,nnn = 1/(16 kappa_F) = {:.4} us from 1/kappa_F = {:.1} us (target 3.8)", t_f / US, kinv / US),
    );
    let mut t_char = Vec::new();
    for n in 1..=5u32 {
        let t1e = match one_over_e_time(&m, n, 1e-8, 1e-4) {
            Ok(t) => t,
            Err(e) => {
                o.check(false, format!("N = {n}: {e}"));
                return o;
            }
        };
        let times: Vec<f64> = (1..=200).map(|k| 3.0 * t1e * k as f64 / 200.0).collect();
        let meta = TraceMeta {
            probe_hz: EchoModelConfig::probe_hz(&c, Regime::NnnPair, b).unwrap(),
            b_z_t: b,
            fraction: 1e-3,
            n_pulses: n,
            regime: Regime::NnnPair,
        };
        let tr = EchoTrace::new(times.clone(), echo_curve(&m, n, &times), None, meta).unwrap();
        let f = stretched_exp_fit(&tr, FitOptions::default()).unwrap();
        o.note(format!("N = {n}: 1/e = {:.3} us, T_char = {:.3} us, beta = {:.2}", t1e / US, f.t_char / US, f.beta));
        if n == 1 {
            let dev = (t1e / 2.4e-6 - 1.0).abs();
            o.check(dev <= 0.2, format!("N = 1 1/e time {:.3} us (target 2.4 +/- 20%, off {:.1}%)", t1e / US, 100.0 * dev));
        }
        t_char.push(f.t_char);
    }
    let dev = (t_char[4] / 7.1e-6 - 1.0).abs();
    o.check(dev <= 0.2, format!("N = 5 T_char {:.3} us (target 7.1 +/- 20%, off {:.1}%)", t_char[4] / US, 100.0 * dev));
    let ns: Vec<f64> = (1..=5).map(f64::from).collect();
    let s = log_slope(&ns, &t_char);
    o.check((0.6..=0.75).contains(&s), format!("d ln T_char / d ln N = {s:.3} (target [0.6, 0.75])"));
    o
}

fn criterion_6() -> Outcome {
    let mut o = Outcome::new(6);
    let refit = CrossoverShape::oracle_refit();
    let published = CrossoverShape::published();
    // κt grid over (0, 20]; ln I is identically zero at t = 0.
    let times: Vec<f64> = std::iter::once(0.5).chain((1..=20).map(f64::from)).collect();
    for e in [Exponent::Ring, Exponent::Magnetic] {
        for n in [1u32, 3, 5] {
            let t0 = Instant::now();
            let beta = refit.beta(e, n);
            // Coupling chosen so −ln I(20/κ) = 2.5.
            let scale = 2.5 / normalized_crossover(e, n, 20.0, beta);
            let mut ch = DephasingChannel {
                exponent: e,
                v0: 1.0,
                kappa: 1.0,
                density: 1.0,
            };
            ch.v0 = scale.powf(1.0 / e.s()) / (TAU * ch.vbar());
            let mc = FluctuatorEnsemble::with_auto_radius(ch, n, &times, SAMPLES, SEED, BOUNDARY_TOLERANCE)
                .and_then(|ens| mc_echo(&ens, n, &times, Estimator::Cumulant));
            let mc = match mc {
                Ok(m) => m,
                Err(err) => {
                    o.check(false, format!("gamma = {}, N = {n}: {err}", e.gamma()));
                    continue;
                }
            };
            let worst = |shape: &CrossoverShape| {
                times
                    .iter()
                    .zip(&mc.ln_intensity)
                    .map(|(t, l)| {
                        let model = kernel_crossover(&ch, n, *t, shape).ln();
                        ((l - model) / model).abs()
                    })
                    .fold(0.0, f64::max)
            };
            let (w_refit, w_pub) = (worst(&refit), worst(&published));
            o.check(
                w_refit <= 0.1,
                format!(
                    "gamma = {}, N = {n}: max |d ln I|/|ln I| = {:.3} (<= 0.10; published-beta shape {:.3}; {:.0} s)",
                    e.gamma(),
                    w_refit,
                    w_pub,
                    t0.elapsed().as_secs_f64()
                ),
            );
        }
    }
    o
}

fn criterion_7() -> Outcome {
    let mut o = Outcome::new(7);
    let rabi_hz = 2.7 * MHZ;
    let w_hz = 17.9 * MHZ;
    let om = angular(rabi_hz);
    let w = angular(w_hz);
    let t_min = 10.0 * om / (w * w);
    let cfg = |t_p| RabiConfig {
        rabi_hz,
        w_pair_hz: w_hz,
        t_p,
    };
    let mut worst_half: f64 = 0.0;
    let mut worst_unit: f64 = 0.0;
    let mut worst_unit_late: f64 = 0.0;
    // Extrema of |I| past t_p = 1/Ω, where the algebraic decay sets in.
    let mut peaks = (Vec::new(), Vec::new());
    let steps = 4000;
    let t_max = 2.0e-6;
    let mut prev = (0.0, 0.0);
    for k in 0..=steps {
        let t = t_min + (t_max - t_min) * k as f64 / steps as f64;
        let q = rabi_pair(&cfg(t)).unwrap();
        let unit = rabi_asymptote(&cfg(t));
        let env = (om / (w * w * t)).sqrt();
        worst_half = worst_half.max((q - 0.5 * unit).abs() / (0.5 * env));
        worst_unit = worst_unit.max((q - unit).abs() / env);
        if om * t >= 1.0 {
            worst_unit_late = worst_unit_late.max((q - unit).abs() / env);
        }
        let a = q.abs();
        if k >= 2 && prev.1 > prev.0 && prev.1 > a && om * t >= 1.0 {
            peaks.0.push(t);
            peaks.1.push(prev.1);
        }
        prev = (prev.1, a);
    }
    o.check(
        worst_half <= 0.05,
        format!("max |I - (1/2) sqrt(Omega/(W^2 t)) sin(Omega t + pi/4)| / envelope = {worst_half:.3} (<= 0.05) for W^2 t/Omega >= 10"),
    );
    o.note(format!(
        "same with prefactor 1: {worst_unit:.3} over W^2 t/Omega >= 10 (Omega t >= {:.2}), {worst_unit_late:.3} over Omega t >= 1",
        om * t_min
    ));
    let power = log_slope(&peaks.0, &peaks.1);
    o.check(
        (power + 0.5).abs() <= 0.05,
        format!("envelope power {power:.3} over {} extrema with Omega t >= 1 (target -0.5 +/- 0.05)", peaks.0.len()),
    );
    o
}

fn criterion_8() -> Outcome {
    let mut o = Outcome::new(8);
    let c = Config::default();
    let truth = RateParams { c1: 0.41, c2: 1.67 };
    let w_true = 21e6;
    let t0 = Instant::now();
    let traces: Vec<EchoTrace> = closed_loop_specs(&c)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(k, s)| synthesize_trace(&c, s, truth, w_true, 0.01, SEED + k as u64).unwrap())
        .collect();
    let spec = ScanSpec::default();
    let fit = match global_fit(&c, &traces, &spec) {
        Ok(f) => f,
        Err(e) => {
            o.check(false, format!("global_fit: {e}"));
            return o;
        }
    };
    let elapsed = t0.elapsed().as_secs_f64();
    let s = &fit.state;
    o.note(format!(
        "{} traces, {}x{} grid; truth (0.41, 1.67, 21 MHz)",
        traces.len(),
        spec.c1.steps,
        spec.c2.steps
    ));
    o.check((s.c1 - truth.c1).abs() <= 0.1, format!("c1 = {:.3} (+/- 0.1)", s.c1));
    o.check((s.c2 - truth.c2).abs() <= 0.3, format!("c2 = {:.3} (+/- 0.3)", s.c2));
    o.check(
        (s.w_delta_at_ref - w_true).abs() <= 3e6,
        format!("W_Delta = {:.2} MHz (+/- 3)", s.w_delta_at_ref / 1e6),
    );
    let surf = &fit.surface;
    let rows = surf.row_minima();
    let global = rows.iter().copied().fold(f64::INFINITY, f64::min);
    let best_row = rows.iter().position(|r| *r == global).unwrap();
    let argmin_c2 = |i: usize| {
        (0..surf.c2.len())
            .filter(|&j| surf.cell(i, j).valid)
            .min_by(|&a, &b| surf.cell(i, a).residual_sum.total_cmp(&surf.cell(i, b).residual_sum))
            .map(|j| surf.c2[j])
            .unwrap_or(f64::NAN)
    };
    // Valley: a neighbouring c1 row reaches nearly the same residual at a shifted c2.
    let valley = [best_row.wrapping_sub(1), best_row + 1]
        .into_iter()
        .filter(|&i| i < rows.len())
        .map(|i| (i, rows[i] / global, argmin_c2(i)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    match valley {
        Some((i, ratio, c2n)) => {
            let dc1 = surf.c1[i] - surf.c1[best_row];
            let dc2 = c2n - argmin_c2(best_row);
            o.check(
                ratio <= 1.1 && dc1 * dc2 < 0.0,
                format!(
                    "valley: row c1 = {:.3} reaches {:.3}x the minimum at c2 = {:.2} (best row c1 = {:.3}, c2 = {:.2}; need <= 1.1x, anticorrelated shift)",
                    surf.c1[i],
                    ratio,
                    c2n,
                    surf.c1[best_row],
                    argmin_c2(best_row)
                ),
            );
        }
        None => o.check(false, "valley: no neighbouring row".into()),
    }
    let high = surf
        .c1
        .iter()
        .zip(&rows)
        .filter(|(c1, _)| **c1 >= 0.6 - 1e-9)
        .map(|(_, r)| *r)
        .fold(f64::INFINITY, f64::min);
    o.check(high >= 3.0 * global, format!("c1 >= 0.6: best residual {:.2}x the minimum (>= 3x)", high / global));
    let invalid = surf.cells.iter().filter(|c| !c.valid).count();
    o.note(format!("{invalid} invalid cells"));
    o.check(elapsed < 600.0, format!("runtime {elapsed:.0} s (< 600 s)"));
    o
}

fn criterion_9() -> Outcome {
    let mut o = Outcome::new(9);
    let c = Config::default();
    let (k1, p1) = abundance_rates(&c, 1e-4).unwrap();
    let (k2, p2) = abundance_rates(&c, 1e-3).unwrap();
    let ks = (k2 / k1).log10();
    let ps = (p2 / p1).log10();
    o.check((ks - 1.0).abs() <= 0.1, format!("kappa_s vs x slope {ks:.3} (1 +/- 0.1)"));
    o.check((ps - 3.0).abs() <= 0.2, format!("pair dephasing rate vs x slope {ps:.3} (3 +/- 0.2)"));
    o
}

fn criterion_10() -> Outcome {
    let mut o = Outcome::new(10);
    let (dp, jp, d3) = (10.0, 0.05, 9.0);
    let mut worst: f64 = 0.0;
    for third in [ThirdIon::Excited, ThirdIon::Ground] {
        for (j13, j23) in [(1.0e-3, 2.0e-3), (-2.0e-3, 1.5e-3), (5e-3, 5e-3), (2e-2, -1e-2)] {
            let a = ring_exchange(j13, j23, dp, jp, d3, third).unwrap();
            let e = ring_shift_exact(j13, j23, dp, jp, d3, third);
            worst = worst.max((a / e - 1.0).abs());
        }
    }
    o.check(worst <= 0.05, format!("ring_exchange vs exact diagonalization: worst {:.2e} relative (<= 0.05)", worst));
    // r → r/2 multiplies every J by 8.
    let f = |l: f64| ring_exchange(l * 1e-3, l * 2e-3, dp, jp, d3, ThirdIon::Excited).unwrap();
    let ratio = f(8.0) / f(1.0);
    o.check((ratio / 64.0 - 1.0).abs() < 1e-12, format!("perturbative shift ratio under r -> r/2: {ratio} (64 exactly)"));
    let e = |l: f64| ring_shift_exact(l * 1e-4, l * 2e-4, dp, jp, d3, ThirdIon::Excited);
    let er = e(8.0) / e(1.0);
    o.check((er / 64.0 - 1.0).abs() < 1e-3, format!("exact shift ratio under r -> r/2: {er:.4} (64 within 0.1%)"));
    o
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "coefficient reproduction", criterion_1),
        (2, "crossover beta refit", criterion_2),
        (3, "clock fields", criterion_3),
        (4, "rate table", criterion_4),
        (5, "nnn CPMG model", criterion_5),
        (6, "oracle equivalence", criterion_6),
        (7, "Rabi asymptotics", criterion_7),
        (8, "closed-loop global fit", criterion_8),
        (9, "scaling laws", criterion_9),
        (10, "exact-diagonalization agreement", criterion_10),
    ];
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        let t0 = Instant::now();
        let out = run();
        let red = KNOWN_RED.iter().find(|(k, _)| *k == id);
        let status = if out.pass { "PASS" } else { "FAIL" };
        let tag = match (out.pass, red) {
            (false, Some((_, why))) => format!(" (known: {why})"),
            (true, Some(_)) => {
                unexpected.push(format!("criterion {id} passes but is listed as known red"));
                " (listed as known red)".into()
            }
            (false, None) => {
                unexpected.push(format!("criterion {id} failed"));
                String::new()
            }
            (true, None) => String::new(),
        };
        println!("{status} {:>2} {name} [{:.1} s]{tag}", out.id, t0.elapsed().as_secs_f64());
        for l in &out.lines {
            println!("{l}");
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        for u in &unexpected {
            eprintln!("acceptance: {u}");
        }
        ExitCode::FAILURE
    }
}

//! Brute-force references: telegraph-fluctuator Monte Carlo and small-system
//! exact diagonalization.
//!
//! Every sample i draws from `ChaCha8Rng::seed_from_u64(seed)` switched to
//! stream `i` (plus a fixed offset for auxiliary runs), so estimates do not
//! depend on the thread count. Samples are reduced in fixed chunks, in chunk
//! order, with compensated sums.

use crate::error::{ensure, Error, Result};
use crate::kernels::{crossover_exponent, DephasingChannel, Exponent};
use crate::levels::ThirdIon;
use crate::units::TWO_PI;
use argmin::core::{CostFunction, Executor, State};
use argmin::solver::brent::BrentOpt;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use rayon::prelude::*;
use std::f64::consts::PI;

const CHUNK: usize = 1024;
/// Stream offset for shell runs; keeps them independent of the ball samples.
const SHELL_STREAM: u64 = 1 << 40;
const PILOT_STREAM: u64 = 1 << 41;

/// Default boundary truncation budget relative to |ln I|.
pub const BOUNDARY_TOLERANCE: f64 = 0.005;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Sum {
    sum: f64,
    c: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn merge(&mut self, other: &Sum) {
        self.add(other.sum);
        self.add(other.c);
    }

    fn value(&self) -> f64 {
        self.sum + self.c
    }
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sign pattern of an N-pulse sequence detected at 2Nτ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterFunction {
    pub n_pulses: u32,
    pub tau: f64,
}

impl FilterFunction {
    pub fn new(n_pulses: u32, total_time: f64) -> Result<Self> {
        ensure(n_pulses >= 1, "n_pulses", || "must be >= 1".into())?;
        ensure(total_time >= 0.0 && total_time.is_finite(), "t", || format!("must be >= 0, got {total_time}"))?;
        Ok(FilterFunction {
            n_pulses,
            tau: total_time / (2.0 * n_pulses as f64),
        })
    }

    pub fn total_time(&self) -> f64 {
        2.0 * self.n_pulses as f64 * self.tau
    }

    /// f(t′) = ±1, flipping sign at each π-pulse (2n − 1)τ.
    pub fn value(&self, t: f64) -> f64 {
        let k = ((t / self.tau + 1.0) / 2.0).floor() as i64;
        if k % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// F(u) = ∫₀ᵘ f, a triangle wave of amplitude τ.
    pub fn integral(&self, u: f64) -> f64 {
        if self.tau == 0.0 {
            return 0.0;
        }
        let y = (u / self.tau + 1.0).rem_euclid(4.0) - 1.0;
        self.tau * if y < 1.0 { y } else { 2.0 - y }
    }
}

/// One ±1 telegraph trajectory on [0, t_max].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TelegraphHistory {
    pub initial: f64,
    pub flips: Vec<f64>,
}

impl TelegraphHistory {
    pub fn sample<R: Rng>(rng: &mut R, kappa: f64, t_max: f64) -> Self {
        let mut h = TelegraphHistory::default();
        h.resample(rng, kappa, t_max);
        h
    }

    /// Trajectory conditioned on at least one flip before `t_max`.
    fn resample_active<R: Rng>(&mut self, rng: &mut R, kappa: f64, t_max: f64, p_active: f64) {
        self.initial = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        self.flips.clear();
        let u: f64 = rng.gen();
        let mut t = -(-u * p_active).ln_1p() / kappa;
        let gaps = Exp::new(kappa).expect("kappa > 0");
        while t < t_max {
            self.flips.push(t);
            t += gaps.sample(rng);
        }
    }

    fn resample<R: Rng>(&mut self, rng: &mut R, kappa: f64, t_max: f64) {
        self.initial = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        self.flips.clear();
        if kappa > 0.0 {
            let gaps = Exp::new(kappa).expect("kappa > 0");
            let mut t = gaps.sample(rng);
            while t < t_max {
                self.flips.push(t);
                t += gaps.sample(rng);
            }
        }
    }

    /// X = ∫₀^{2Nτ} s(t′)f(t′)dt′ from the flip times alone.
    pub fn phase_integral(&self, filter: &FilterFunction) -> f64 {
        let end = filter.total_time();
        let mut acc = 0.0;
        let mut sign = 1.0;
        for &tj in self.flips.iter().take_while(|&&tj| tj < end) {
            acc += sign * filter.integral(tj);
            sign = -sign;
        }
        2.0 * self.initial * acc
    }

    /// Same integral summed segment by segment.
    pub fn phase_integral_segments(&self, filter: &FilterFunction) -> f64 {
        let end = filter.total_time();
        let mut s = self.initial;
        let mut a = 0.0;
        let mut acc = 0.0;
        for &tj in self.flips.iter().take_while(|&&tj| tj < end) {
            acc += s * (filter.integral(tj) - filter.integral(a));
            s = -s;
            a = tj;
        }
        acc + s * (filter.integral(end) - filter.integral(a))
    }
}

/// How ⟨cos φ⟩ is turned into an intensity estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Sample mean of cos(Σᵢ φᵢ).
    Direct,
    /// ln I = −E[Σᵢ (1 − cos φᵢ)], exact for Poisson positions.
    Cumulant,
}

/// Poisson positions in a ball around the probe, each carrying a telegraph spin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluctuatorEnsemble {
    pub seed: u64,
    pub sample_radius: f64,
    pub n_samples: usize,
    pub channel: DephasingChannel,
}

impl FluctuatorEnsemble {
    pub fn mean_spins(&self) -> f64 {
        self.channel.density * 4.0 / 3.0 * PI * self.sample_radius.powi(3)
    }

    /// Ensemble whose radius keeps the weak-coupling tail below
    /// `tolerance`·|ln I| on every grid point, from a pilot history average.
    pub fn with_auto_radius(
        channel: DephasingChannel,
        n_pulses: u32,
        times: &[f64],
        n_samples: usize,
        seed: u64,
        tolerance: f64,
    ) -> Result<Self> {
        channel.validate()?;
        ensure(tolerance > 0.0, "tolerance", || "must be > 0".into())?;
        let spacing = if channel.density > 0.0 { channel.density.powf(-1.0 / 3.0) } else { 1.0 };
        let mut radius = 2.0 * spacing;
        if channel.kappa > 0.0 && channel.v0 != 0.0 && channel.density > 0.0 {
            let scaled: Vec<f64> = times.iter().map(|t| t * channel.kappa).collect();
            let pilot = history_average_stream(channel.exponent, n_pulses, &scaled, 4000, seed, PILOT_STREAM)?;
            let e = channel.exponent;
            let s = e.s();
            let vs = (TWO_PI * channel.vbar()).powf(s);
            for k in 0..times.len() {
                let ln_i = vs * pilot.g[k] / channel.kappa.powf(s);
                if ln_i > 0.0 {
                    let x2 = pilot.x2[k] / channel.kappa.powi(2);
                    let coef = tail_coefficient(&channel, x2);
                    let r = (coef / (tolerance * ln_i)).powf(1.0 / (2.0 * e.gamma() - 3.0));
                    radius = radius.max(1.25 * r);
                }
            }
        }
        Ok(FluctuatorEnsemble {
            seed,
            sample_radius: radius,
            n_samples,
            channel,
        })
    }
}

/// ⟨g²⟩ over uniform cosθ ∈ [0, 1].
fn mean_square_angular(e: Exponent) -> f64 {
    match e {
        Exponent::Magnetic => 0.8,
        // ∫(1 − 3c²)⁴ dc = 1 − 4 + 54/5 − 108/7 + 9.
        Exponent::Ring => 6.0 + 54.0 / 5.0 - 108.0 / 7.0,
    }
}

/// Tail contribution times R^{2γ−3}, from the quadratic expansion of 1 − cos.
fn tail_coefficient(channel: &DephasingChannel, x2: f64) -> f64 {
    let g = channel.exponent.gamma();
    channel.density * 4.0 * PI * mean_square_angular(channel.exponent) * 2.0 * (TWO_PI * channel.v0).powi(2) * x2
        / (2.0 * g - 3.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEcho {
    pub times: Vec<f64>,
    pub intensity: Vec<f64>,
    pub std_err: Vec<f64>,
    pub ln_intensity: Vec<f64>,
    pub ln_std_err: Vec<f64>,
    /// Upper estimate of the neglected −ln I from spins beyond the radius.
    pub tail_bound: Vec<f64>,
    /// Set when any point's standard error on I exceeds the threshold.
    pub undersampled: bool,
}

/// Standard error on I above which a run is flagged.
pub const STD_ERR_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Default)]
struct Moments {
    cos: Vec<Sum>,
    cos2: Vec<Sum>,
    y: Vec<Sum>,
    y2: Vec<Sum>,
    x2: Vec<Sum>,
    spins: f64,
    samples: usize,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments {
            cos: vec![Sum::default(); n],
            cos2: vec![Sum::default(); n],
            y: vec![Sum::default(); n],
            y2: vec![Sum::default(); n],
            x2: vec![Sum::default(); n],
            spins: 0.0,
            samples: 0,
        }
    }

    fn merge(&mut self, o: &Moments) {
        for k in 0..self.cos.len() {
            self.cos[k].merge(&o.cos[k]);
            self.cos2[k].merge(&o.cos2[k]);
            self.y[k].merge(&o.y[k]);
            self.y2[k].merge(&o.y2[k]);
            self.x2[k].merge(&o.x2[k]);
        }
        self.spins += o.spins;
        self.samples += o.samples;
    }
}

fn validate_grid(times: &[f64]) -> Result<()> {
    ensure(!times.is_empty(), "times", || "grid must not be empty".into())?;
    ensure(times.iter().all(|t| *t >= 0.0 && t.is_finite()), "times", || "must be finite and >= 0".into())
}

/// Runs the shell r_in < r < r_out and returns raw moments.
fn shell_moments(
    ens: &FluctuatorEnsemble,
    filters: &[FilterFunction],
    r_in: f64,
    r_out: f64,
    stream_base: u64,
) -> Moments {
    let ch = ens.channel;
    let nt = filters.len();
    let t_max = filters.iter().map(|f| f.total_time()).fold(0.0, f64::max);
    let volume = 4.0 / 3.0 * PI * (r_out.powi(3) - r_in.powi(3));
    let mean = ch.density * volume;
    // Spins that never flip before t_max are refocused exactly; only the
    // thinned Poisson set of active spins is drawn.
    let p_active = if ch.kappa > 0.0 { -(-ch.kappa * t_max).exp_m1() } else { 0.0 };
    let active = mean * p_active;
    let poisson = if active > 0.0 { Poisson::new(active).ok() } else { None };
    let gamma = ch.exponent.gamma();
    let chunks = ens.n_samples.div_ceil(CHUNK);
    let parts: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut m = Moments::new(nt);
            let mut hist = TelegraphHistory::default();
            let mut phase = vec![0.0; nt];
            let mut y = vec![0.0; nt];
            let mut x2 = vec![0.0; nt];
            for i in c * CHUNK..((c + 1) * CHUNK).min(ens.n_samples) {
                let mut rng = sample_rng(ens.seed, stream_base + i as u64);
                let count = poisson.map_or(0, |p| p.sample(&mut rng) as u64);
                phase.iter_mut().for_each(|v| *v = 0.0);
                y.iter_mut().for_each(|v| *v = 0.0);
                for _ in 0..count {
                    hist.resample_active(&mut rng, ch.kappa, t_max, p_active);
                    let u: f64 = rng.gen();
                    let r = (r_in.powi(3) + u * (r_out.powi(3) - r_in.powi(3))).cbrt();
                    let cos_theta: f64 = rng.gen();
                    let v = TWO_PI * ch.v0 * ch.exponent.angular_factor(cos_theta) / r.powf(gamma);
                    for (k, f) in filters.iter().enumerate() {
                        let x = hist.phase_integral(f);
                        let p = 2.0 * v * x;
                        phase[k] += p;
                        // 1 − cos p, accurate for small p.
                        y[k] += 2.0 * (0.5 * p).sin().powi(2);
                        x2[k] += x * x;
                    }
                }
                for k in 0..nt {
                    let c = phase[k].cos();
                    m.cos[k].add(c);
                    m.cos2[k].add(c * c);
                    m.y[k].add(y[k]);
                    m.y2[k].add(y[k] * y[k]);
                }
                m.samples += 1;
                m.spins += mean;
            }
            for k in 0..nt {
                m.x2[k].add(x2[k]);
            }
            m
        })
        .collect();
    let mut total = Moments::new(nt);
    for p in &parts {
        total.merge(p);
    }
    total
}

fn mean_var(s: &Sum, s2: &Sum, n: f64) -> (f64, f64) {
    let mean = s.value() / n;
    let var = (s2.value() / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    (mean, var)
}

/// Echo intensity at the detection times `times` (each a full 2Nτ) for an
/// N-pulse sequence.
pub fn mc_echo(ens: &FluctuatorEnsemble, n_pulses: u32, times: &[f64], estimator: Estimator) -> Result<McEcho> {
    ens.channel.validate()?;
    validate_grid(times)?;
    ensure(ens.n_samples >= 2, "n_samples", || "must be >= 2".into())?;
    ensure(ens.sample_radius > 0.0, "sample_radius", || "must be > 0".into())?;
    let filters = times.iter().map(|&t| FilterFunction::new(n_pulses, t)).collect::<Result<Vec<_>>>()?;
    let m = shell_moments(ens, &filters, 0.0, ens.sample_radius, 0);
    let n = m.samples as f64;
    let mut out = McEcho {
        times: times.to_vec(),
        intensity: Vec::with_capacity(times.len()),
        std_err: Vec::with_capacity(times.len()),
        ln_intensity: Vec::with_capacity(times.len()),
        ln_std_err: Vec::with_capacity(times.len()),
        tail_bound: Vec::with_capacity(times.len()),
        undersampled: false,
    };
    for k in 0..times.len() {
        let (i, se, li, lse) = match estimator {
            Estimator::Direct => {
                let (mean, var) = mean_var(&m.cos[k], &m.cos2[k], n);
                let se = (var / n).sqrt();
                (mean, se, mean.ln(), se / mean.abs())
            }
            Estimator::Cumulant => {
                let (mean, var) = mean_var(&m.y[k], &m.y2[k], n);
                let lse = (var / n).sqrt();
                let i = (-mean).exp();
                (i, i * lse, -mean, lse)
            }
        };
        let x2 = if m.spins > 0.0 { m.x2[k].value() / m.spins } else { 0.0 };
        let tail = tail_coefficient(&ens.channel, x2) / ens.sample_radius.powf(2.0 * ens.channel.exponent.gamma() - 3.0);
        out.undersampled |= se > STD_ERR_THRESHOLD;
        out.intensity.push(i);
        out.std_err.push(se);
        out.ln_intensity.push(li);
        out.ln_std_err.push(lse);
        out.tail_bound.push(tail);
    }
    Ok(out)
}

/// −ln I contributed by spins in r_in < r < r_out, with its standard error,
/// from an independent stream.
pub fn shell_contribution(
    ens: &FluctuatorEnsemble,
    n_pulses: u32,
    times: &[f64],
    r_in: f64,
    r_out: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    validate_grid(times)?;
    ensure(r_out > r_in && r_in >= 0.0, "r_out", || "shell must have r_out > r_in >= 0".into())?;
    let filters = times.iter().map(|&t| FilterFunction::new(n_pulses, t)).collect::<Result<Vec<_>>>()?;
    let m = shell_moments(ens, &filters, r_in, r_out, SHELL_STREAM);
    let n = m.samples as f64;
    Ok((0..times.len())
        .map(|k| {
            let (mean, var) = mean_var(&m.y[k], &m.y2[k], n);
            (mean, (var / n).sqrt())
        })
        .unzip())
}

/// ⟨|X|^{3/γ}⟩ and ⟨X²⟩ over telegraph histories at unit flip rate.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryAverage {
    pub times: Vec<f64>,
    pub g: Vec<f64>,
    pub g_err: Vec<f64>,
    pub x2: Vec<f64>,
}

/// Fluctuator average G_γ(κt) with κ = 1, so that −ln I = (2πV̄)^{3/γ}·G.
pub fn history_average(
    exponent: Exponent,
    n_pulses: u32,
    times: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<HistoryAverage> {
    history_average_stream(exponent, n_pulses, times, n_samples, seed, 0)
}

fn history_average_stream(
    exponent: Exponent,
    n_pulses: u32,
    times: &[f64],
    n_samples: usize,
    seed: u64,
    stream_base: u64,
) -> Result<HistoryAverage> {
    validate_grid(times)?;
    ensure(n_samples >= 2, "n_samples", || "must be >= 2".into())?;
    let filters = times.iter().map(|&t| FilterFunction::new(n_pulses, t)).collect::<Result<Vec<_>>>()?;
    let nt = times.len();
    let t_max = times.iter().copied().fold(0.0, f64::max);
    let s = exponent.s();
    let chunks = n_samples.div_ceil(CHUNK);
    let parts: Vec<[Vec<Sum>; 3]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = [vec![Sum::default(); nt], vec![Sum::default(); nt], vec![Sum::default(); nt]];
            let mut hist = TelegraphHistory::default();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_samples) {
                let mut rng = sample_rng(seed, stream_base + i as u64);
                hist.resample(&mut rng, 1.0, t_max);
                for (k, f) in filters.iter().enumerate() {
                    let x = hist.phase_integral(f);
                    let g = x.abs().powf(s);
                    acc[0][k].add(g);
                    acc[1][k].add(g * g);
                    acc[2][k].add(x * x);
                }
            }
            acc
        })
        .collect();
    let mut total = [vec![Sum::default(); nt], vec![Sum::default(); nt], vec![Sum::default(); nt]];
    for p in &parts {
        for j in 0..3 {
            for k in 0..nt {
                total[j][k].merge(&p[j][k]);
            }
        }
    }
    let n = n_samples as f64;
    let mut out = HistoryAverage {
        times: times.to_vec(),
        g: vec![],
        g_err: vec![],
        x2: vec![],
    };
    for k in 0..nt {
        let (mean, var) = mean_var(&total[0][k], &total[1][k], n);
        out.g.push(mean);
        out.g_err.push((var / n).sqrt());
        out.x2.push(total[2][k].value() / n);
    }
    Ok(out)
}

/// Channel at κ = 1 with 2πV̄ = 1, so its exponents are the normalized
/// short- and long-time forms.
fn unit_channel(exponent: Exponent) -> DephasingChannel {
    let mut ch = DephasingChannel {
        exponent,
        v0: 1.0,
        kappa: 1.0,
        density: 1.0,
    };
    ch.v0 = 1.0 / (TWO_PI * ch.vbar());
    ch
}

/// −ln I of the crossover interpolant normalized to 2πV̄ = κ = 1.
pub fn normalized_crossover(exponent: Exponent, n_pulses: u32, kt: f64, beta: f64) -> f64 {
    let ch = unit_channel(exponent);
    crossover_exponent(ch.short_exponent(n_pulses, kt), ch.long_exponent(kt), beta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaFit {
    pub beta: f64,
    /// RMS of ln(model) − ln(oracle) over the window.
    pub rms_log_residual: f64,
}

/// Refit window: κt = 0.5, 1.0, ..., 20.
pub fn refit_window() -> Vec<f64> {
    (1..=40).map(|k| 0.5 * k as f64).collect()
}

struct LogMisfit<'a> {
    exponent: Exponent,
    n_pulses: u32,
    avg: &'a HistoryAverage,
}

impl LogMisfit<'_> {
    fn eval(&self, beta: f64) -> f64 {
        self.avg
            .times
            .iter()
            .zip(&self.avg.g)
            .filter(|(_, g)| **g > 0.0)
            .map(|(t, g)| (normalized_crossover(self.exponent, self.n_pulses, *t, beta).ln() - g.ln()).powi(2))
            .sum()
    }
}

impl CostFunction for LogMisfit<'_> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, beta: &f64) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval(*beta))
    }
}

/// Least-squares β of the crossover interpolant against the history average
/// over 0 < κt ≤ 20.
pub fn beta_refit(exponent: Exponent, n_pulses: u32, n_samples: usize, seed: u64) -> Result<BetaFit> {
    let avg = history_average(exponent, n_pulses, &refit_window(), n_samples, seed)?;
    beta_refit_from(exponent, n_pulses, &avg)
}

pub fn beta_refit_from(exponent: Exponent, n_pulses: u32, avg: &HistoryAverage) -> Result<BetaFit> {
    let problem = LogMisfit {
        exponent,
        n_pulses,
        avg,
    };
    let res = Executor::new(problem, BrentOpt::new(0.2, 3.0))
        .configure(|s| s.param(1.0).max_iters(200))
        .run()
        .map_err(|e| Error::NonConvergence(format!("beta_refit: {e}")))?;
    let state = res.state();
    let beta = *state
        .get_best_param()
        .ok_or_else(|| Error::NonConvergence("beta_refit: no parameter".into()))?;
    let misfit = LogMisfit {
        exponent,
        n_pulses,
        avg,
    };
    let n = avg.g.iter().filter(|g| **g > 0.0).count().max(1) as f64;
    Ok(BetaFit {
        beta,
        rms_log_residual: (misfit.eval(beta) / n).sqrt(),
    })
}

/// Eigen-decomposition of the three-ion secular Hamiltonian.
#[derive(Debug, Clone)]
pub struct ThreeSiteSpectrum {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Columns match `eigenvalues`; basis index 4n₁ + 2n₂ + n₃ with n = 1 excited.
    pub eigenvectors: DMatrix<f64>,
}

/// ½ΣΔᵢτᶻᵢ + J_pair(τ₁⁺τ₂⁻ + h.c.) + J₁₃(τ₁⁺τ₃⁻ + h.c.) + J₂₃(τ₂⁺τ₃⁻ + h.c.)
/// in the energy eigenbasis of each ion, all in Hz.
pub fn exact_three_site(j13: f64, j23: f64, j_pair: f64, deltas: [f64; 3]) -> ThreeSiteSpectrum {
    let bit = |state: usize, site: usize| (state >> (2 - site)) & 1;
    let mut h = DMatrix::<f64>::zeros(8, 8);
    for a in 0..8 {
        h[(a, a)] = (0..3).map(|i| 0.5 * deltas[i] * (2.0 * bit(a, i) as f64 - 1.0)).sum();
        for (i, j, c) in [(0, 1, j_pair), (0, 2, j13), (1, 2, j23)] {
            if bit(a, i) != bit(a, j) {
                let b = a ^ (1 << (2 - i)) ^ (1 << (2 - j));
                h[(a, b)] += c;
            }
        }
    }
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..8).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors = DMatrix::from_fn(8, 8, |r, c| eig.eigenvectors[(r, order[c])]);
    ThreeSiteSpectrum {
        eigenvalues,
        eigenvectors,
    }
}

/// Energy of the eigenstate with the largest weight on the symmetric pair
/// state times the given third-ion state.
fn symmetric_energy(spectrum: &ThreeSiteSpectrum, third: ThirdIon) -> f64 {
    let n3 = match third {
        ThirdIon::Excited => 1,
        ThirdIon::Ground => 0,
    };
    let (a, b) = (0b100 | n3, 0b010 | n3);
    let weight = |c: usize| (spectrum.eigenvectors[(a, c)] + spectrum.eigenvectors[(b, c)]).powi(2) / 2.0;
    let best = (0..8).max_by(|&x, &y| weight(x).total_cmp(&weight(y))).expect("8 states");
    spectrum.eigenvalues[best]
}

/// Ring-exchange shift from exact diagonalization: the J₂₃-odd part of the
/// symmetric-state energy equals −2V_ring.
pub fn ring_shift_exact(j13: f64, j23: f64, delta_pair: f64, j_pair: f64, delta3: f64, third: ThirdIon) -> f64 {
    let deltas = [delta_pair, delta_pair, delta3];
    let plus = symmetric_energy(&exact_three_site(j13, j23, j_pair, deltas), third);
    let minus = symmetric_energy(&exact_three_site(j13, -j23, j_pair, deltas), third);
    -(plus - minus) / 4.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{kernel_crossover, CrossoverShape};
    use crate::levels::ring_exchange;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn channel(exponent: Exponent, kappa: f64) -> DephasingChannel {
        DephasingChannel {
            exponent,
            v0: 1.0,
            kappa,
            density: 1.0,
        }
    }

    #[test]
    fn filter_integrates_to_zero() {
        for n in 1..=5 {
            let f = FilterFunction::new(n, 3.0).unwrap();
            assert!(f.integral(f.total_time()).abs() < 1e-12);
            // Riemann check of F against f.
            let steps = 200_000;
            let dt = f.total_time() / steps as f64;
            let mut acc = 0.0;
            for k in 0..steps {
                acc += f.value((k as f64 + 0.5) * dt) * dt;
                if k % 40_000 == 39_999 {
                    assert!((acc - f.integral((k + 1) as f64 * dt)).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn filter_signs() {
        let f = FilterFunction::new(2, 4.0).unwrap();
        assert_eq!(f.tau, 1.0);
        assert_eq!(f.value(0.5), 1.0);
        assert_eq!(f.value(1.5), -1.0);
        assert_eq!(f.value(2.9), -1.0);
        assert_eq!(f.value(3.1), 1.0);
        assert!(FilterFunction::new(0, 1.0).is_err());
    }

    #[test]
    fn static_fluctuator_refocused() {
        let h = TelegraphHistory {
            initial: 1.0,
            flips: vec![],
        };
        for n in 1..=5 {
            assert_eq!(h.phase_integral(&FilterFunction::new(n, 2.0).unwrap()), 0.0);
        }
    }

    proptest! {
        #[test]
        fn phase_integral_forms_agree(seed in 0u64..1000, n in 1u32..6, t in 0.1f64..30.0) {
            let mut rng = sample_rng(seed, 0);
            let h = TelegraphHistory::sample(&mut rng, 1.0, t * 1.5);
            let f = FilterFunction::new(n, t).unwrap();
            prop_assert!((h.phase_integral(&f) - h.phase_integral_segments(&f)).abs() < 1e-9 * (1.0 + t));
        }
    }

    #[test]
    fn static_ensemble_gives_unity() {
        let ens = FluctuatorEnsemble {
            seed: 1,
            sample_radius: 3.0,
            n_samples: 2000,
            channel: channel(Exponent::Magnetic, 0.0),
        };
        let r = mc_echo(&ens, 1, &[0.5, 1.0, 5.0], Estimator::Direct).unwrap();
        assert!(r.intensity.iter().all(|i| *i == 1.0));
        let silent = FluctuatorEnsemble {
            channel: DephasingChannel { v0: 0.0, ..channel(Exponent::Ring, 1.0) },
            ..ens
        };
        let r = mc_echo(&silent, 3, &[0.5, 1.0, 5.0], Estimator::Cumulant).unwrap();
        assert!(r.intensity.iter().all(|i| *i == 1.0));
    }

    #[test]
    fn reproducible_across_thread_counts() {
        let ens = FluctuatorEnsemble {
            seed: 7,
            sample_radius: 2.0,
            n_samples: 3000,
            channel: DephasingChannel { v0: 0.02, ..channel(Exponent::Magnetic, 1.0) },
        };
        let times = [1.0, 4.0];
        let a = mc_echo(&ens, 1, &times, Estimator::Direct).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| mc_echo(&ens, 1, &times, Estimator::Direct).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn estimators_agree() {
        let ch = DephasingChannel { v0: 0.05, ..channel(Exponent::Magnetic, 1.0) };
        let times = [2.0, 6.0];
        let ens = FluctuatorEnsemble::with_auto_radius(ch, 1, &times, 20_000, 3, BOUNDARY_TOLERANCE).unwrap();
        let d = mc_echo(&ens, 1, &times, Estimator::Direct).unwrap();
        let c = mc_echo(&ens, 1, &times, Estimator::Cumulant).unwrap();
        for k in 0..times.len() {
            let tol = 3.0 * (d.std_err[k] + c.std_err[k]);
            assert!((d.intensity[k] - c.intensity[k]).abs() < tol, "{k}: {} {}", d.intensity[k], c.intensity[k]);
        }
    }

    #[test]
    fn std_err_shrinks_as_inverse_root() {
        let ch = DephasingChannel { v0: 0.05, ..channel(Exponent::Magnetic, 1.0) };
        let times = [4.0];
        let base = FluctuatorEnsemble::with_auto_radius(ch, 1, &times, 8000, 11, 0.05).unwrap();
        let a = mc_echo(&base, 1, &times, Estimator::Direct).unwrap();
        let b = mc_echo(&FluctuatorEnsemble { n_samples: 32_000, ..base }, 1, &times, Estimator::Direct).unwrap();
        let ratio = a.std_err[0] / b.std_err[0];
        assert!((ratio - 2.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn matches_poisson_average() {
        // The cumulant estimate over positions equals (2πV̄)^s·G.
        let ch = DephasingChannel { v0: 0.05, ..channel(Exponent::Magnetic, 1.0) };
        let times = [1.0, 5.0, 15.0];
        let ens = FluctuatorEnsemble::with_auto_radius(ch, 2, &times, 20_000, 5, BOUNDARY_TOLERANCE).unwrap();
        let mc = mc_echo(&ens, 2, &times, Estimator::Cumulant).unwrap();
        let h = history_average(Exponent::Magnetic, 2, &times, 100_000, 9).unwrap();
        let vs = TWO_PI * ch.vbar();
        for k in 0..times.len() {
            let expect = vs * h.g[k];
            let got = -mc.ln_intensity[k];
            let tol = 4.0 * (mc.ln_std_err[k] + vs * h.g_err[k]) + mc.tail_bound[k] + 0.01 * expect;
            assert!((got - expect).abs() < tol, "{k}: {got} vs {expect}");
        }
    }

    #[test]
    fn boundary_doubling_is_small() {
        let ch = DephasingChannel { v0: 0.05, ..channel(Exponent::Magnetic, 1.0) };
        let times = [5.0, 20.0];
        let ens = FluctuatorEnsemble::with_auto_radius(ch, 1, &times, 2000, 13, BOUNDARY_TOLERANCE).unwrap();
        let r = ens.sample_radius;
        let mc = mc_echo(&FluctuatorEnsemble { n_samples: 20_000, ..ens }, 1, &times, Estimator::Cumulant).unwrap();
        let (shell, err) = shell_contribution(&ens, 1, &times, r, 2.0 * r).unwrap();
        for k in 0..times.len() {
            assert!(shell[k] - 2.0 * err[k] < 0.005 * mc.ln_intensity[k].abs(), "{k}: {}", shell[k]);
            assert!(mc.tail_bound[k] < 0.005 * mc.ln_intensity[k].abs());
        }
    }

    #[test]
    fn hahn_exponents_magnetic() {
        // V₀ is set so that −ln I ≈ 0.3 at the first time; at smaller values
        // the estimate is carried by rare near neighbours.
        let slope = |t1: f64, t2: f64, samples: usize| {
            let e = Exponent::Magnetic;
            let unit = unit_channel(e);
            let a1 = crossover_exponent(unit.short_exponent(1, t1), unit.long_exponent(t1), 1.0);
            let base = channel(e, 1.0);
            let ch = DephasingChannel { v0: 0.3 / a1 / (TWO_PI * base.vbar()), ..base };
            let times = [t1, t2];
            let ens = FluctuatorEnsemble::with_auto_radius(ch, 1, &times, samples, 17, 0.01).unwrap();
            let r = mc_echo(&ens, 1, &times, Estimator::Cumulant).unwrap();
            ((-r.ln_intensity[1]).ln() - (-r.ln_intensity[0]).ln()) / (t2 / t1).ln()
        };
        let short = slope(0.002, 0.02, 20_000);
        assert!((short - 2.0).abs() < 0.05, "{short}");
        let long = slope(30.0, 300.0, 1000);
        assert!((long - 0.5).abs() < 0.05, "{long}");
    }

    #[test]
    fn history_average_reproducible() {
        let a = history_average(Exponent::Ring, 3, &[1.0, 2.0], 5000, 4).unwrap();
        let b = history_average(Exponent::Ring, 3, &[1.0, 2.0], 5000, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn refit_close_to_published_hahn() {
        let fit = beta_refit(Exponent::Ring, 1, 20_000, 1).unwrap();
        assert!((fit.beta - 1.2).abs() < 0.1, "{fit:?}");
    }

    #[test]
    fn normalized_crossover_matches_kernel() {
        let ch = DephasingChannel { v0: 0.3, ..channel(Exponent::Ring, 2.0) };
        let shape = CrossoverShape::published();
        let t = 3.0;
        let beta = shape.beta(Exponent::Ring, 2);
        let vs = (TWO_PI * ch.vbar()).powf(0.5);
        let scaled = normalized_crossover(Exponent::Ring, 2, ch.kappa * t, beta) * vs / ch.kappa.powf(0.5);
        assert_relative_eq!(-kernel_crossover(&ch, 2, t, &shape).ln(), scaled, max_relative = 1e-10);
    }

    #[test]
    fn three_site_uncoupled() {
        let s = exact_three_site(0.0, 0.0, 0.0, [1.0, 2.0, 4.0]);
        let mut expect: Vec<f64> = (0..8)
            .map(|a: usize| {
                (0..3).map(|i| 0.5 * [1.0, 2.0, 4.0][i] * (2.0 * ((a >> (2 - i)) & 1) as f64 - 1.0)).sum()
            })
            .collect();
        expect.sort_by(f64::total_cmp);
        for (a, b) in s.eigenvalues.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn three_site_pair_doublet() {
        let s = exact_three_site(0.0, 0.0, 0.2, [3.0, 3.0, 10.0]);
        // One-excitation pair states with ion 3 in its ground state.
        let base = -5.0;
        let mut found = [false; 2];
        for e in &s.eigenvalues {
            for (k, sign) in [1.0, -1.0].iter().enumerate() {
                if (e - (base + sign * 0.2)).abs() < 1e-12 {
                    found[k] = true;
                }
            }
        }
        assert_eq!(found, [true, true]);
    }

    #[test]
    fn ring_matches_exact_diagonalization() {
        for third in [ThirdIon::Excited, ThirdIon::Ground] {
            for (j13, j23) in [(1.0e-3, 2.0e-3), (-2.0e-3, 1.5e-3)] {
                let (dp, jp, d3) = (10.0, 0.05, 9.0);
                let approx = ring_exchange(j13, j23, dp, jp, d3, third).unwrap();
                let exact = ring_shift_exact(j13, j23, dp, jp, d3, third);
                assert_relative_eq!(approx, exact, max_relative = 0.01);
            }
        }
    }

    #[test]
    fn ring_scaling_under_coupling_rescale() {
        let (dp, jp, d3) = (10.0, 0.05, 9.0);
        let f = |l: f64| ring_exchange(l * 1e-3, l * 2e-3, dp, jp, d3, ThirdIon::Excited).unwrap();
        // J ∝ r⁻³, so halving r multiplies the shift by 2⁶.
        assert_relative_eq!(f(8.0) / f(1.0), 64.0, max_relative = 1e-12);
        let e = |l: f64| ring_shift_exact(l * 1e-4, l * 2e-4, dp, jp, d3, ThirdIon::Excited);
        assert_relative_eq!(e(8.0) / e(1.0), 64.0, max_relative = 1e-3);
    }
}

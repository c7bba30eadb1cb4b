//! Full echo intensity from all dephasing channels, stretched-exponential
//! fits, pair Rabi oscillations and the abundance trade-off.

use crate::config::Config;
use crate::error::{ensure, Error, Result};
use crate::kernels::{
    crossover_exponent, fluorine_loose, fluorine_nnn, mims_couplings, mims_product, CrossoverShape, DephasingChannel,
    Exponent, FluorineInputs, FluorineModel, MimsCouplings,
};
use crate::levels::{clock_field, level_energy, longitudinal_field, matrix_elements};
use crate::material::{HyperfineState, MaterialParams};
use crate::quad::{integrate, Tolerance};
use crate::rates::{
    decay_suppression_pair, decay_suppression_single, golden_rule_t1, pair_t1, tau_s_inv, DisorderModel, RateParams, RateTable,
};
use crate::trace::{EchoTrace, Regime};
use crate::units::angular;
use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{DMatrix, DVector, Dyn, Owned};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub n_pulses: u32,
    /// Detection time 2Nτ, s.
    pub total_time: f64,
    pub probe_hz: f64,
    pub b_z_t: f64,
}

impl PulseSequence {
    pub fn new(n_pulses: u32, total_time: f64, probe_hz: f64, b_z_t: f64) -> Result<Self> {
        ensure(n_pulses >= 1, "n_pulses", || "must be >= 1".into())?;
        ensure(total_time > 0.0 && total_time.is_finite(), "t", || format!("must be > 0, got {total_time}"))?;
        Ok(PulseSequence {
            n_pulses,
            total_time,
            probe_hz,
            b_z_t,
        })
    }

    pub fn tau(&self) -> f64 {
        self.total_time / (2.0 * self.n_pulses as f64)
    }

    /// Times (2n − 1)τ of the π-pulses.
    pub fn pulse_times(&self) -> Vec<f64> {
        (1..=self.n_pulses).map(|n| (2 * n - 1) as f64 * self.tau()).collect()
    }
}

/// Finite lifetime of the probed excitation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Lifetime {
    Single { tau_s: f64, t1: f64 },
    Pair { t1_pair: f64 },
}

impl Lifetime {
    pub fn suppression(&self, t: f64) -> f64 {
        match *self {
            Lifetime::Single { tau_s, t1 } => decay_suppression_single(t, tau_s, t1),
            Lifetime::Pair { t1_pair } => decay_suppression_pair(t, t1_pair),
        }
    }
}

/// Ring-exchange and magnetic channels of one hyperfine species of neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeciesChannels {
    pub iz: HyperfineState,
    pub ring: DephasingChannel,
    pub magn: DephasingChannel,
    pub decay: Option<Lifetime>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EchoModelConfig {
    pub channels: Vec<SpeciesChannels>,
    pub fluorine: FluorineModel,
    pub regime: Regime,
    /// Fluorine-induced nuclear modulation; `None` for a unit envelope.
    pub mims: Option<MimsCouplings>,
    pub shape: CrossoverShape,
    pub i0: f64,
    pub c_off: f64,
}

impl EchoModelConfig {
    pub fn validate(&self) -> Result<()> {
        for iz in HyperfineState::ALL {
            let k = self.channels.iter().filter(|c| c.iz == iz).count();
            ensure(k == 1, "channels", || format!("need exactly one channel set for {iz}, got {k}"))?;
        }
        ensure(self.channels.len() == 4, "channels", || "one set per hyperfine species".into())?;
        for c in &self.channels {
            c.ring.validate()?;
            c.magn.validate()?;
        }
        self.shape.validate()
    }

    /// Model at the configured parameters.
    pub fn from_config(cfg: &Config, regime: Regime, fraction: f64, b_z_t: f64) -> Result<Self> {
        let params = cfg.material()?.with_fraction(fraction);
        let disorder = cfg.disorder_at(fraction);
        ModelBuilder::new(cfg, params, disorder, cfg.rate_params()).build(regime, b_z_t)
    }

    /// Probe frequency of the regime's transition at `b_z_t`, Hz.
    pub fn probe_hz(cfg: &Config, regime: Regime, b_z_t: f64) -> Result<f64> {
        let p = cfg.material()?;
        Ok(level_energy(&p, HyperfineState::M3Half, b_z_t, 0.0) + regime_detuning(cfg, regime))
    }
}

fn regime_detuning(cfg: &Config, regime: Regime) -> f64 {
    match regime {
        Regime::Single => 0.0,
        Regime::LoosePair => cfg.pairs.loose_detuning_hz,
        Regime::NnnPair => cfg.pairs.nnn_detuning_hz,
    }
}

/// Ring-exchange amplitude J₀²m_off²/(2|Δω|), Δω = Δ − Δω_p − ΔE_{I^z}, Hz·m⁶.
pub fn ring_v0(params: &MaterialParams, detuning_hz: f64, iz: HyperfineState, b_z_t: f64) -> f64 {
    let m = matrix_elements(params, iz, b_z_t, 0.0);
    let dw = params.delta_hz - detuning_hz - level_energy(params, iz, b_z_t, 0.0);
    let j0 = params.j0_hz_m3();
    j0 * j0 * m.off * m.off / (2.0 * dw.abs())
}

/// Moment of a neighbour including a residual internal field `dh_hz`.
pub fn typical_moment(params: &MaterialParams, iz: HyperfineState, b_z_t: f64, dh_hz: f64) -> f64 {
    let h = longitudinal_field(params, iz, b_z_t, 0.0).hypot(dh_hz);
    h / params.delta_hz.hypot(h)
}

/// Magnetic amplitude J₀·m_p·m̃(I^z), Hz·m³.
pub fn magnetic_v0(params: &MaterialParams, probe_moment: f64, iz: HyperfineState, b_z_t: f64, dh_hz: f64) -> f64 {
    params.j0_hz_m3() * probe_moment * typical_moment(params, iz, b_z_t, dh_hz)
}

/// Assembles regime-resolved models from material, disorder and rate inputs.
pub struct ModelBuilder<'a> {
    cfg: &'a Config,
    params: MaterialParams,
    disorder: DisorderModel,
    rates: RateParams,
    pub shape: CrossoverShape,
}

impl<'a> ModelBuilder<'a> {
    pub fn new(cfg: &'a Config, params: MaterialParams, disorder: DisorderModel, rates: RateParams) -> Self {
        ModelBuilder {
            cfg,
            params,
            disorder,
            rates,
            shape: CrossoverShape::published(),
        }
    }

    pub fn fluorine(&self) -> FluorineModel {
        let f = &self.cfg.fluorine;
        FluorineModel::from_geometry(
            &self.params,
            &self.cfg.fluorine_geometry(),
            FluorineInputs {
                kappa_f: f.kappa_hz,
                site_moment: f.nnn_site_moment,
                t_f: f.t_f_s,
                beta_f: f.beta_f,
            },
        )
    }

    /// Model probed at the regime's nominal frequency.
    pub fn build(&self, regime: Regime, b_z_t: f64) -> Result<EchoModelConfig> {
        let probe_hz = level_energy(&self.params, HyperfineState::M3Half, b_z_t, 0.0) + regime_detuning(self.cfg, regime);
        self.build_at(regime, b_z_t, probe_hz)
    }

    /// Model probed at `probe_hz`; off-center single ions decay at their own
    /// resonance-counting rate.
    pub fn build_at(&self, regime: Regime, b_z_t: f64, probe_hz: f64) -> Result<EchoModelConfig> {
        let table = RateTable::build(&self.params, &self.disorder, &self.rates, b_z_t);
        self.build_with_rates(regime, b_z_t, probe_hz, &table)
    }

    pub fn build_with_rates(&self, regime: Regime, b_z_t: f64, probe_hz: f64, table: &RateTable) -> Result<EchoModelConfig> {
        let p = &self.params;
        let detuning = regime_detuning(self.cfg, regime);
        let dh_typ = p.zeeman_hz_per_t() * self.disorder.dh_typical_t;
        let probe = HyperfineState::M3Half;
        let probe_moment = match regime {
            Regime::Single => typical_moment(p, probe, b_z_t, dh_typ),
            Regime::LoosePair => self.cfg.pairs.loose_moment,
            Regime::NnnPair => self.cfg.pairs.nnn_moment,
        };
        let density = p.species_density();
        let mut channels = Vec::with_capacity(4);
        for iz in HyperfineState::ALL {
            let kappa = table.kappa(iz);
            let ring_amp = if regime == Regime::Single { 0.0 } else { ring_v0(p, detuning, iz, b_z_t) };
            let own = match regime {
                Regime::Single => tau_s_inv(p, &self.disorder, &self.rates, probe_hz, probe, b_z_t),
                _ => kappa,
            };
            let decay = if iz == probe && own > 0.0 {
                let tau_s = 1.0 / own;
                Some(match regime {
                    Regime::Single => Lifetime::Single {
                        tau_s,
                        t1: golden_rule_t1(p, &self.disorder, probe_hz, tau_s)?,
                    },
                    _ => Lifetime::Pair {
                        t1_pair: pair_t1(p, &self.disorder, probe_hz, tau_s)?,
                    },
                })
            } else {
                None
            };
            channels.push(SpeciesChannels {
                iz,
                ring: DephasingChannel {
                    exponent: Exponent::Ring,
                    v0: ring_amp,
                    kappa,
                    density,
                },
                magn: DephasingChannel {
                    exponent: Exponent::Magnetic,
                    v0: magnetic_v0(p, probe_moment, iz, b_z_t, dh_typ),
                    kappa,
                    density,
                },
                decay,
            });
        }
        let fluorine = self.fluorine();
        let mims = Some(mims_couplings(&fluorine, p, b_z_t, probe));
        let cfg = EchoModelConfig {
            channels,
            fluorine,
            regime,
            mims,
            shape: self.shape.clone(),
            i0: 1.0,
            c_off: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// −ln of one channel's crossover factor.
fn channel_exponent(ch: &DephasingChannel, n: u32, t: f64, shape: &CrossoverShape) -> f64 {
    if t <= 0.0 || ch.kappa == 0.0 || ch.v0 == 0.0 || ch.density == 0.0 {
        return 0.0;
    }
    crossover_exponent(ch.short_exponent(n, t), ch.long_exponent(t), shape.beta(ch.exponent, n))
}

/// min[I_dec, I_ring, I_magn] for the neighbours of species `iz`.
pub fn tb_suppression(config: &EchoModelConfig, n_pulses: u32, iz: HyperfineState, t: f64) -> f64 {
    let Some(c) = config.channels.iter().find(|c| c.iz == iz) else {
        return 1.0;
    };
    let ring = (-channel_exponent(&c.ring, n_pulses, t, &config.shape)).exp();
    let magn = (-channel_exponent(&c.magn, n_pulses, t, &config.shape)).exp();
    let dec = c.decay.map_or(1.0, |d| d.suppression(t));
    dec.min(ring).min(magn)
}

pub fn fluorine_suppression(config: &EchoModelConfig, n_pulses: u32, t: f64) -> f64 {
    match config.regime {
        Regime::NnnPair => fluorine_nnn(&config.fluorine, n_pulses, t),
        Regime::Single | Regime::LoosePair => fluorine_loose(config.fluorine.t_f, config.fluorine.beta_f, t),
    }
}

/// I₀·I_mims·I_F·∏ I_Tb + c_off at the sequence's detection time.
pub fn compose_echo(config: &EchoModelConfig, seq: &PulseSequence) -> f64 {
    compose_at(config, seq.n_pulses, seq.total_time)
}

pub fn compose_at(config: &EchoModelConfig, n_pulses: u32, t: f64) -> f64 {
    if t <= 0.0 {
        return config.i0 + config.c_off;
    }
    let mims = config.mims.as_ref().map_or(1.0, |m| mims_product(m, n_pulses, t));
    let tb: f64 = config.channels.iter().map(|c| tb_suppression(config, n_pulses, c.iz, t)).product();
    config.i0 * mims * fluorine_suppression(config, n_pulses, t) * tb + config.c_off
}

pub fn echo_curve(config: &EchoModelConfig, n_pulses: u32, times: &[f64]) -> Vec<f64> {
    times.par_iter().map(|&t| compose_at(config, n_pulses, t)).collect()
}

/// Time at which (I − c_off)/I₀ first falls to 1/e, searched on [t_lo, t_hi].
pub fn one_over_e_time(config: &EchoModelConfig, n_pulses: u32, t_lo: f64, t_hi: f64) -> Result<f64> {
    let f = |t: f64| (compose_at(config, n_pulses, t) - config.c_off) / config.i0 - (-1.0f64).exp();
    let grid = log_grid(t_lo, t_hi, 64)?;
    let mut prev = grid[0];
    if f(prev) < 0.0 {
        return Err(Error::invalid("t_lo", "already below 1/e"));
    }
    for &t in &grid[1..] {
        if f(t) < 0.0 {
            let (mut a, mut b) = (prev, t);
            for _ in 0..100 {
                let m = (a * b).sqrt();
                if f(m) < 0.0 {
                    b = m;
                } else {
                    a = m;
                }
            }
            return Ok((a * b).sqrt());
        }
        prev = t;
    }
    Err(Error::NonConvergence(format!("no 1/e crossing below {t_hi:e} s")))
}

/// Logarithmic grid from `t_min` to `t_max` inclusive.
pub fn log_grid(t_min: f64, t_max: f64, per_decade: usize) -> Result<Vec<f64>> {
    ensure(t_min > 0.0 && t_max > t_min, "t_max", || "need 0 < t_min < t_max".into())?;
    ensure(per_decade >= 1, "per_decade", || "must be >= 1".into())?;
    let decades = (t_max / t_min).log10();
    let n = (decades * per_decade as f64).ceil() as usize;
    Ok((0..=n).map(|k| t_min * 10f64.powf(decades * k as f64 / n as f64)).collect())
}

/// 64 points per decade over 10 ns – 100 µs.
pub fn default_grid() -> Vec<f64> {
    log_grid(10e-9, 100e-6, 64).expect("static bounds")
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FitOptions {
    /// Holds β at the given value.
    pub fixed_beta: Option<f64>,
    /// Holds c_off at zero.
    pub no_offset: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StretchedFit {
    pub t_char: f64,
    pub beta: f64,
    pub i0: f64,
    pub c_off: f64,
    /// One standard deviation on (I₀, T_char, β, c_off); zero when held.
    pub errors: [f64; 4],
    pub covariance: [[f64; 4]; 4],
    pub rss: f64,
}

pub const BETA_BOUNDS: (f64, f64) = (0.1, 3.0);
const MIN_POINTS: usize = 8;
const MIN_DECAY: f64 = 0.2;

/// Stretched-exponential model I₀exp[−(t/T)^β] + c.
pub fn stretched(t: f64, i0: f64, t_char: f64, beta: f64, c_off: f64) -> f64 {
    i0 * (-(t / t_char).powf(beta)).exp() + c_off
}

struct StretchedProblem<'a> {
    t: &'a [f64],
    y: &'a [f64],
    w: Vec<f64>,
    opts: FitOptions,
    /// Internal (I₀, ln T, u_β, c); β = lo + (hi − lo)/(1 + e^{−u}).
    p: [f64; 4],
    free: Vec<usize>,
}

impl StretchedProblem<'_> {
    fn natural(&self) -> (f64, f64, f64, f64) {
        let beta = match self.opts.fixed_beta {
            Some(b) => b,
            None => {
                let (lo, hi) = BETA_BOUNDS;
                lo + (hi - lo) / (1.0 + (-self.p[2]).exp())
            }
        };
        let c = if self.opts.no_offset { 0.0 } else { self.p[3] };
        (self.p[0], self.p[1].exp(), beta, c)
    }

    /// d model / d natural parameters at one time.
    fn gradient(t: f64, i0: f64, tc: f64, beta: f64) -> [f64; 4] {
        if t <= 0.0 {
            return [1.0, 0.0, 0.0, 1.0];
        }
        let x = t / tc;
        let q = x.powf(beta);
        let e = (-q).exp();
        [e, i0 * e * q * beta / tc, -i0 * e * q * x.ln(), 1.0]
    }
}

impl LeastSquaresProblem<f64, Dyn, Dyn> for StretchedProblem<'_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, Dyn>;
    type ParameterStorage = Owned<f64, Dyn>;

    fn set_params(&mut self, x: &DVector<f64>) {
        for (k, &i) in self.free.iter().enumerate() {
            self.p[i] = x[k];
        }
    }

    fn params(&self) -> DVector<f64> {
        DVector::from_iterator(self.free.len(), self.free.iter().map(|&i| self.p[i]))
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        let (i0, tc, b, c) = self.natural();
        let r = DVector::from_iterator(
            self.t.len(),
            (0..self.t.len()).map(|k| self.w[k] * (self.y[k] - stretched(self.t[k], i0, tc, b, c))),
        );
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    fn jacobian(&self) -> Option<DMatrix<f64>> {
        let (i0, tc, b, _) = self.natural();
        let (lo, hi) = BETA_BOUNDS;
        // Chain factors from natural to internal parameters.
        let chain = [1.0, tc, (b - lo) * (hi - b) / (hi - lo), 1.0];
        let mut j = DMatrix::zeros(self.t.len(), self.free.len());
        for k in 0..self.t.len() {
            let g = Self::gradient(self.t[k], i0, tc, b);
            for (col, &i) in self.free.iter().enumerate() {
                j[(k, col)] = -self.w[k] * g[i] * chain[i];
            }
        }
        j.iter().all(|v| v.is_finite()).then_some(j)
    }
}

/// Starting point from the monotone envelope: T from its 1/e crossing, β
/// from a two-point log-log slope.
fn initial_guess(t: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let i0 = y.iter().take(3).copied().fold(f64::MIN, f64::max);
    let mut env = Vec::with_capacity(y.len());
    let mut m = f64::INFINITY;
    for v in y {
        m = m.min(*v / i0);
        env.push(m);
    }
    let ln_decay: Vec<f64> = env.iter().map(|v| if *v > 0.0 { -v.ln() } else { f64::INFINITY }).collect();
    let a = ln_decay.iter().position(|l| *l >= 0.1);
    let b = ln_decay.iter().rposition(|l| *l <= 2.5 && *l > 0.0);
    let mut beta = 1.0;
    if let (Some(a), Some(b)) = (a, b) {
        if b > a && t[a] > 0.0 {
            let s = (ln_decay[b] / ln_decay[a]).ln() / (t[b] / t[a]).ln();
            if s.is_finite() {
                beta = s.clamp(0.2, 2.5);
            }
        }
    }
    let cross = env.iter().position(|v| *v < (-1.0f64).exp());
    let t_char = match cross {
        Some(k) if k > 0 => {
            let (l0, l1) = (ln_decay[k - 1], ln_decay[k]);
            let f = ((1.0 - l0) / (l1 - l0)).clamp(0.0, 1.0);
            if t[k - 1] > 0.0 {
                (t[k - 1].ln() + f * (t[k] / t[k - 1]).ln()).exp()
            } else {
                t[k]
            }
        }
        Some(_) => t[0].max(t[1] * 0.5),
        None => {
            let k = y.len() - 1;
            t[k] / ln_decay[k].max(1e-3).powf(1.0 / beta)
        }
    };
    (i0, t_char, beta)
}

/// Weighted least squares over (I₀, T_char, β, c_off).
pub fn stretched_exp_fit(trace: &EchoTrace, opts: FitOptions) -> Result<StretchedFit> {
    trace.validate()?;
    ensure(trace.len() >= MIN_POINTS, "trace", || format!("need >= {MIN_POINTS} points, got {}", trace.len()))?;
    let (ymax, ymin) = trace
        .intensities
        .iter()
        .fold((f64::MIN, f64::MAX), |(a, b), v| (a.max(*v), b.min(*v)));
    if !(ymax > 0.0) || (ymax - ymin) / ymax < MIN_DECAY {
        return Err(Error::IllConditioned(format!(
            "decay over the window is {:.1}%, below {:.0}%",
            100.0 * (ymax - ymin) / ymax.abs(),
            100.0 * MIN_DECAY
        )));
    }
    if let Some(b) = opts.fixed_beta {
        ensure(b >= BETA_BOUNDS.0 && b <= BETA_BOUNDS.1, "beta", || format!("fixed beta {b} outside [0.1, 3]"))?;
    }
    let (i0, tc, b0) = initial_guess(&trace.times, &trace.intensities);
    let beta0 = opts.fixed_beta.unwrap_or(b0);
    let mut free = vec![0, 1];
    if opts.fixed_beta.is_none() {
        free.push(2);
    }
    if !opts.no_offset {
        free.push(3);
    }
    let w: Vec<f64> = (0..trace.len()).map(|i| 1.0 / trace.sigma(i)).collect();
    let (lo, hi) = BETA_BOUNDS;
    let u0 = |b: f64| {
        let f = ((b - lo) / (hi - lo)).clamp(1e-6, 1.0 - 1e-6);
        (f / (1.0 - f)).ln()
    };
    let mut best: Option<StretchedProblem> = None;
    for start in [beta0, 1.0, 0.5] {
        let problem = StretchedProblem {
            t: &trace.times,
            y: &trace.intensities,
            w: w.clone(),
            opts,
            p: [i0, tc.ln(), u0(start), 0.0],
            free: free.clone(),
        };
        let (solved, report) = LevenbergMarquardt::new().with_patience(400).minimize(problem);
        if !report.termination.was_successful() {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => rss(&solved) < rss(b),
        };
        if better {
            best = Some(solved);
        }
        if opts.fixed_beta.is_some() {
            break;
        }
    }
    let solved = best.ok_or_else(|| Error::NonConvergence("stretched_exp_fit: no start converged".into()))?;
    let (i0, tc, beta, c_off) = solved.natural();
    let total = rss(&solved);
    let covariance = covariance(&solved, total)?;
    let errors = std::array::from_fn(|i| covariance[i][i].max(0.0).sqrt());
    Ok(StretchedFit {
        t_char: tc,
        beta,
        i0,
        c_off,
        errors,
        covariance,
        rss: total,
    })
}

fn rss(p: &StretchedProblem) -> f64 {
    p.residuals().map_or(f64::INFINITY, |r| r.norm_squared())
}

/// (JᵀWJ)⁻¹ scaled by the reduced χ², in natural parameters.
fn covariance(p: &StretchedProblem, rss: f64) -> Result<[[f64; 4]; 4]> {
    let (i0, tc, b, _) = p.natural();
    let n = p.t.len();
    let k = p.free.len();
    let mut j = DMatrix::zeros(n, k);
    for r in 0..n {
        let g = StretchedProblem::gradient(p.t[r], i0, tc, b);
        for (c, &i) in p.free.iter().enumerate() {
            j[(r, c)] = p.w[r] * g[i];
        }
    }
    let jtj = j.transpose() * &j;
    let inv = jtj
        .try_inverse()
        .ok_or_else(|| Error::IllConditioned("singular normal matrix".into()))?;
    let s2 = if n > k { rss / (n - k) as f64 } else { 1.0 };
    let mut out = [[0.0; 4]; 4];
    for (a, &ia) in p.free.iter().enumerate() {
        for (c, &ic) in p.free.iter().enumerate() {
            out[ia][ic] = inv[(a, c)] * s2;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RabiConfig {
    /// Rabi frequency Ω, Hz.
    pub rabi_hz: f64,
    /// Gaussian standard deviation of pair detunings, Hz.
    pub w_pair_hz: f64,
    /// Pulse length, s.
    pub t_p: f64,
}

/// ∫dδ Ω/√(Ω² + δ²)·sin(√(Ω² + δ²)t_p)·ρ(δ) over a Gaussian ρ.
pub fn rabi_pair(cfg: &RabiConfig) -> Result<f64> {
    ensure(cfg.rabi_hz > 0.0, "rabi_hz", || "must be > 0".into())?;
    ensure(cfg.w_pair_hz > 0.0, "w_pair_hz", || "must be > 0".into())?;
    ensure(cfg.t_p >= 0.0, "t_p", || "must be >= 0".into())?;
    let om = angular(cfg.rabi_hz);
    let w = angular(cfg.w_pair_hz);
    let f = |d: f64| {
        let g = om.hypot(d);
        om / g * (g * cfg.t_p).sin() * (-0.5 * (d / w).powi(2)).exp() / ((2.0 * PI).sqrt() * w)
    };
    // Even integrand; split so each panel holds a bounded number of oscillations.
    let hi = 12.0 * w;
    let panels = ((hi * hi * cfg.t_p / (2.0 * om)).sqrt().ceil() as usize).clamp(1, 4000);
    let tol = Tolerance::relative(1e-8).with_abs(1e-12 / panels as f64);
    let mut total = 0.0;
    for k in 0..panels {
        // Uniform in δ², matching the stationary-phase oscillation spacing.
        let a = hi * (k as f64 / panels as f64).sqrt();
        let b = hi * ((k + 1) as f64 / panels as f64).sqrt();
        total += integrate(f, a, b, tol)?.value;
    }
    Ok(2.0 * total)
}

/// Stationary-phase asymptote of `rabi_pair` for W²t_p ≫ Ω (angular units):
/// √(Ω/(W²t_p))·sin(Ωt_p + π/4).
pub fn rabi_asymptote(cfg: &RabiConfig) -> f64 {
    let om = angular(cfg.rabi_hz);
    let w = angular(cfg.w_pair_hz);
    (om / (w * w * cfg.t_p)).sqrt() * (om * cfg.t_p + PI / 4.0).sin()
}

/// Reference point fixing the scaling laws κ_s ∝ x and 1/τ_pair ∝ x³.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbundanceCalibration {
    pub fraction: f64,
    /// 1/κ_s of clock-state singles at `fraction`, s.
    pub t2_single: f64,
    /// Motionally narrowed ring-exchange time of a loose pair at `fraction`, s.
    pub t2_pair: f64,
    /// Largest fraction the scaling form is trusted at.
    pub max_fraction: f64,
}

impl AbundanceCalibration {
    pub fn from_model(cfg: &Config, fraction: f64) -> Result<Self> {
        let (ks, kp) = abundance_rates(cfg, fraction)?;
        Ok(AbundanceCalibration {
            fraction,
            t2_single: 1.0 / ks,
            t2_pair: 1.0 / kp,
            max_fraction: 1e-2,
        })
    }
}

/// (κ_s, 1/τ_pair) of the clock species at `fraction` from the rate and kernel stack, 1/s.
pub fn abundance_rates(cfg: &Config, fraction: f64) -> Result<(f64, f64)> {
    let params = cfg.material()?.with_fraction(fraction);
    let disorder = cfg.disorder_at(fraction);
    let iz = HyperfineState::M3Half;
    let b = clock_field(&params, iz);
    let table = RateTable::build(&params, &disorder, &cfg.rate_params(), b);
    let kappa = table.kappa(iz);
    let ring = DephasingChannel {
        exponent: Exponent::Ring,
        v0: ring_v0(&params, cfg.pairs.loose_detuning_hz, iz, b),
        kappa,
        density: params.species_density(),
    };
    Ok((kappa, ring.long_rate()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Abundance {
    pub x_single: f64,
    pub x_pair: f64,
    /// Pair-to-single coherent-qubit density, x_pair²/x_single.
    pub density_ratio: f64,
}

pub fn abundance_tradeoff(target_t2: f64, cal: &AbundanceCalibration) -> Result<Abundance> {
    ensure(target_t2 > 0.0 && target_t2.is_finite(), "target_t2", || "must be > 0".into())?;
    let x_single = cal.fraction * cal.t2_single / target_t2;
    let x_pair = cal.fraction * (cal.t2_pair / target_t2).cbrt();
    let worst = x_single.max(x_pair);
    if worst > cal.max_fraction {
        return Err(Error::invalid(
            "target_t2",
            format!(
                "{target_t2:e} s needs x = {worst:e}, beyond the calibrated range (x <= {:e})",
                cal.max_fraction
            ),
        ));
    }
    Ok(Abundance {
        x_single,
        x_pair,
        density_ratio: x_pair * x_pair / x_single,
    })
}

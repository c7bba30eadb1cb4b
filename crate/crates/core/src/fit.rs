//! Fitting pipeline: nuclear-modulation filtering, coupling sweeps and the
//! (c₁, c₂, W_Δ) scan over a set of echo traces.

use crate::config::{Config, FluorineSection};
use crate::echo::{compose_at, stretched_exp_fit, FitOptions, ModelBuilder, BETA_BOUNDS};
use crate::error::{ensure, Error, Result};
use crate::kernels::{mims_frequencies, mims_product, CouplingRatios, MimsCouplings};
use crate::levels::clock_field;
use crate::material::HyperfineState;
use crate::rates::{RateParams, RateTable};
use crate::trace::{EchoTrace, Regime, TraceMeta};
use crate::units::fwhm_to_sigma;
use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{DMatrix, DVector, Dyn, Owned};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Weighted least-squares amplitude and offset of y ≈ a·g + c.
fn linear_nuisance(g: &[f64], y: &[f64], w: &[f64], offset: bool) -> (f64, f64) {
    let (mut sw, mut sg, mut sy, mut sgg, mut sgy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..g.len() {
        let w2 = w[k] * w[k];
        sw += w2;
        sg += w2 * g[k];
        sy += w2 * y[k];
        sgg += w2 * g[k] * g[k];
        sgy += w2 * g[k] * y[k];
    }
    if !offset {
        return if sgg > 0.0 { (sgy / sgg, 0.0) } else { (0.0, 0.0) };
    }
    let det = sw * sgg - sg * sg;
    if det.abs() <= 1e-14 * sw * sgg {
        // Shape is flat: everything goes into the offset.
        return (0.0, sy / sw);
    }
    ((sw * sgy - sg * sy) / det, (sgg * sy - sg * sgy) / det)
}

/// Least squares over nonlinear shape parameters with the amplitude and
/// offset projected out; the Jacobian is taken by central differences.
struct Projected<'a, F> {
    t: &'a [f64],
    y: &'a [f64],
    w: &'a [f64],
    shape: F,
    p: DVector<f64>,
    offset: bool,
}

impl<F: Fn(&[f64], f64) -> f64> Projected<'_, F> {
    fn eval(&self, p: &[f64]) -> (Vec<f64>, f64, f64) {
        let g: Vec<f64> = self.t.iter().map(|&t| (self.shape)(p, t)).collect();
        let (a, c) = linear_nuisance(&g, self.y, self.w, self.offset);
        let r = (0..g.len()).map(|k| self.w[k] * (self.y[k] - a * g[k] - c)).collect();
        (r, a, c)
    }

    fn rss(&self) -> f64 {
        self.eval(self.p.as_slice()).0.iter().map(|r| r * r).sum()
    }
}

impl<F: Fn(&[f64], f64) -> f64> LeastSquaresProblem<f64, Dyn, Dyn> for Projected<'_, F> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, Dyn>;
    type ParameterStorage = Owned<f64, Dyn>;

    fn set_params(&mut self, x: &DVector<f64>) {
        self.p.copy_from(x);
    }

    fn params(&self) -> DVector<f64> {
        self.p.clone()
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        let r = DVector::from_vec(self.eval(self.p.as_slice()).0);
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    fn jacobian(&self) -> Option<DMatrix<f64>> {
        let n = self.t.len();
        let mut j = DMatrix::zeros(n, self.p.len());
        let mut q = self.p.as_slice().to_vec();
        for i in 0..q.len() {
            let h = 1e-6 * q[i].abs().max(1.0);
            let x = q[i];
            q[i] = x + h;
            let up = self.eval(&q).0;
            q[i] = x - h;
            let dn = self.eval(&q).0;
            q[i] = x;
            for k in 0..n {
                j[(k, i)] = (up[k] - dn[k]) / (2.0 * h);
            }
        }
        j.iter().all(|v| v.is_finite()).then_some(j)
    }
}

fn beta_from(u: f64) -> f64 {
    let (lo, hi) = BETA_BOUNDS;
    lo + (hi - lo) / (1.0 + (-u).exp())
}

fn beta_to(b: f64) -> f64 {
    let (lo, hi) = BETA_BOUNDS;
    let f = ((b - lo) / (hi - lo)).clamp(1e-6, 1.0 - 1e-6);
    (f / (1.0 - f)).ln()
}

fn couplings(b_nn: f64, omega_f: f64, ratios: &CouplingRatios) -> MimsCouplings {
    MimsCouplings::from_nn(ratios.a_nn_over_b_nn * b_nn, b_nn, omega_f, ratios)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MimsFilter {
    /// Fitted modulation at each trace time.
    pub envelope: Vec<f64>,
    /// Trace divided by `envelope`.
    pub demodulated: EchoTrace,
    pub couplings: MimsCouplings,
    pub i0: f64,
    pub t_char: f64,
    pub beta: f64,
    pub c_off: f64,
    /// Modulation depth below the residual noise; `envelope` is unity.
    pub degenerate: bool,
}

impl MimsFilter {
    /// Nuclear frequencies (ω₊, ω₋) of the nn shell, Hz.
    pub fn frequencies(&self) -> (f64, f64) {
        mims_frequencies(self.couplings.a_nn, self.couplings.b_nn, self.couplings.omega_f)
    }
}

const OMEGA_SCAN: usize = 61;
const COUPLING_SCAN: usize = 25;
const STARTS: usize = 6;
const DECAY_SCAN: usize = 16;
const SIGNIFICANT_GAIN: f64 = 25.0;

/// Fits I₀·exp[−(t/T)^β]·I_mims(t) + c with the nn/nnn ratios held and returns
/// the envelope together with the demodulated trace. `guess` seeds ω_F and B_nn.
pub fn filter_mims(trace: &EchoTrace, guess: &MimsCouplings, ratios: &CouplingRatios) -> Result<MimsFilter> {
    mims_fit(trace, guess, ratios, false)
}

fn mims_fit(trace: &EchoTrace, guess: &MimsCouplings, ratios: &CouplingRatios, simple: bool) -> Result<MimsFilter> {
    trace.validate()?;
    ensure(guess.omega_f > 0.0, "omega_f", || "guess must be > 0".into())?;
    let n = trace.meta.n_pulses;
    let w: Vec<f64> = (0..trace.len()).map(|i| 1.0 / trace.sigma(i)).collect();
    let opts = FitOptions {
        fixed_beta: simple.then_some(1.0),
        no_offset: simple,
    };
    let base = stretched_exp_fit(trace, opts)?;
    // Shape parameters: ln T, logistic β (skipped when simple), ln B_nn, ln ω_F.
    let shape = move |p: &[f64], t: f64| {
        let (lt, beta, lb, lw) = if simple {
            (p[0], 1.0, p[1], p[2])
        } else {
            (p[0], beta_from(p[1]), p[2], p[3])
        };
        let decay = (-(t / lt.exp()).powf(beta)).exp();
        decay * mims_product(&couplings(lb.exp(), lw.exp(), ratios), n, t)
    };
    let pack = |t: f64, beta: f64, b: f64, om: f64| -> DVector<f64> {
        if simple {
            DVector::from_vec(vec![t.ln(), b.ln(), om.ln()])
        } else {
            DVector::from_vec(vec![t.ln(), beta_to(beta), b.ln(), om.ln()])
        }
    };
    let make = |p: DVector<f64>| Projected {
        t: &trace.times,
        y: &trace.intensities,
        w: &w,
        shape,
        p,
        offset: !simple,
    };
    let unmodulated = {
        let g: Vec<f64> = trace.times.iter().map(|&t| (-(t / base.t_char).powf(base.beta)).exp()).collect();
        let (a, c) = linear_nuisance(&g, &trace.intensities, &w, !simple);
        (0..g.len()).map(|k| (w[k] * (trace.intensities[k] - a * g[k] - c)).powi(2)).sum::<f64>()
    };
    // Coarse scan of (B_nn, ω_F) against a small table of decays, keeping the
    // best few well-separated starts: the surface is multimodal in ω_F and deep
    // modulation hides the decay from a plain stretched fit.
    let t_max = *trace.times.last().unwrap_or(&1.0);
    let betas: &[f64] = if simple { &[1.0] } else { &[0.5, 1.0, 1.5, 2.0] };
    let decays: Vec<(f64, f64, Vec<f64>)> = (0..DECAY_SCAN)
        .flat_map(|i| {
            let tc = t_max * 10f64.powf(-1.5 + 2.5 * i as f64 / (DECAY_SCAN - 1) as f64);
            betas.iter().map(move |&b| (tc, b))
        })
        .chain(std::iter::once((base.t_char, base.beta)))
        .map(|(tc, b)| (tc, b, trace.times.iter().map(|&t| (-(t / tc).powf(b)).exp()).collect()))
        .collect();
    let b_ref = if guess.b_nn > 0.0 { guess.b_nn } else { 0.1 * guess.omega_f };
    let grid: Vec<(f64, f64)> = (0..OMEGA_SCAN)
        .flat_map(|i| {
            let om = guess.omega_f * (0.7 + 0.6 * i as f64 / (OMEGA_SCAN - 1) as f64);
            (0..COUPLING_SCAN).map(move |j| (b_ref * 10f64.powf(-1.5 + 2.5 * j as f64 / (COUPLING_SCAN - 1) as f64), om))
        })
        .collect();
    let mut scan: Vec<(f64, f64, f64, f64, f64)> = grid
        .par_iter()
        .map(|&(b, om)| {
            let c = couplings(b, om, ratios);
            let env: Vec<f64> = trace.times.iter().map(|&t| mims_product(&c, n, t)).collect();
            let mut best = (f64::INFINITY, b, om, base.t_char, base.beta);
            let mut g = vec![0.0; env.len()];
            for (tc, beta, d) in &decays {
                for k in 0..g.len() {
                    g[k] = d[k] * env[k];
                }
                let (a, o) = linear_nuisance(&g, &trace.intensities, &w, !simple);
                let r: f64 = (0..g.len()).map(|k| (w[k] * (trace.intensities[k] - a * g[k] - o)).powi(2)).sum();
                if r < best.0 {
                    best = (r, b, om, *tc, *beta);
                }
            }
            best
        })
        .collect();
    scan.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut starts: Vec<(f64, f64, f64, f64, f64)> = Vec::new();
    for c in &scan {
        if starts.len() == STARTS {
            break;
        }
        if starts.iter().all(|s| (s.2 / c.2 - 1.0).abs() > 0.03 || (s.1 / c.1).ln().abs() > 0.5) {
            starts.push(*c);
        }
    }
    let mut solved = make(pack(base.t_char, base.beta, starts[0].1, starts[0].2));
    let mut best_rss = f64::INFINITY;
    for s in &starts {
        let (cand, _) = LevenbergMarquardt::new()
            .with_patience(200)
            .minimize(make(pack(s.3, s.4, s.1, s.2)));
        let r = cand.rss();
        if r < best_rss {
            best_rss = r;
            solved = cand;
        }
    }
    if !best_rss.is_finite() {
        return Err(Error::NonConvergence("filter_mims: no finite residual".into()));
    }
    let p = solved.p.as_slice().to_vec();
    let (_, i0, c_off) = solved.eval(&p);
    let (t_char, beta, b_nn, omega_f) = if simple {
        (p[0].exp(), 1.0, p[1].exp(), p[2].exp())
    } else {
        (p[0].exp(), beta_from(p[1]), p[2].exp(), p[3].exp())
    };
    let c = couplings(b_nn, omega_f, ratios);
    let env: Vec<f64> = trace.times.iter().map(|&t| mims_product(&c, n, t)).collect();
    let rss = solved.rss();
    let dof = trace.len().saturating_sub(p.len() + 2).max(1) as f64;
    let noise = (rss / dof).sqrt() / w.iter().sum::<f64>() * w.len() as f64;
    let depth = env.iter().fold(0.0f64, |d, e| d.max(1.0 - e));
    // Modulation below the noise, or a χ² gain the two extra parameters
    // could buy from noise alone.
    let gain = (unmodulated - rss) / (rss / dof);
    let degenerate = depth * i0.abs() < noise || gain < SIGNIFICANT_GAIN;
    if degenerate {
        return Ok(MimsFilter {
            envelope: vec![1.0; trace.len()],
            demodulated: trace.clone(),
            couplings: couplings(0.0, omega_f, ratios),
            i0: base.i0,
            t_char: base.t_char,
            beta: base.beta,
            c_off: base.c_off,
            degenerate: true,
        });
    }
    let mut demod = trace.clone();
    // Offset is removed before dividing so the envelope acts on the echo alone.
    for (k, y) in demod.intensities.iter_mut().enumerate() {
        *y = (trace.intensities[k] - c_off) / env[k].max(1e-3) + c_off;
    }
    if let Some(s) = demod.sigmas.as_mut() {
        for (k, v) in s.iter_mut().enumerate() {
            *v /= env[k].max(1e-3);
        }
    }
    Ok(MimsFilter {
        envelope: env,
        demodulated: demod,
        couplings: c,
        i0,
        t_char,
        beta,
        c_off,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MimsPoint {
    pub b_z_t: f64,
    pub a_nn: f64,
    pub b_nn: f64,
    pub omega_f: f64,
    pub t_1e: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimsSweep {
    pub points: Vec<MimsPoint>,
    /// ∂B_nn/∂|B_z − B_clock|, Hz/T.
    pub coupling_slope: f64,
    /// ∂ω_F/∂B_z, Hz/T.
    pub omega_f_slope: f64,
}

/// Per-field fit of I₀·exp(−t/T_1/e)·I_mims(t) over a field sweep, then the
/// coupling slope away from `b_clock_t`. `guess` maps a field to starting couplings.
pub fn fit_mims_coupling(
    traces: &[EchoTrace],
    b_clock_t: f64,
    ratios: &CouplingRatios,
    guess: impl Fn(f64) -> MimsCouplings + Sync,
) -> Result<MimsSweep> {
    ensure(!traces.is_empty(), "traces", || "empty field sweep".into())?;
    let points = traces
        .par_iter()
        .map(|tr| {
            let f = mims_fit(tr, &guess(tr.meta.b_z_t), ratios, true)?;
            Ok(MimsPoint {
                b_z_t: tr.meta.b_z_t,
                a_nn: f.couplings.a_nn,
                b_nn: f.couplings.b_nn,
                omega_f: f.couplings.omega_f,
                t_1e: f.t_char,
                degenerate: f.degenerate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let live: Vec<&MimsPoint> = points.iter().filter(|p| !p.degenerate).collect();
    if live.len() < 2 {
        return Err(Error::IllConditioned(format!(
            "only {} of {} traces show modulation above the noise",
            live.len(),
            points.len()
        )));
    }
    let xs: Vec<f64> = live.iter().map(|p| (p.b_z_t - b_clock_t).abs()).collect();
    let ys: Vec<f64> = live.iter().map(|p| p.b_nn).collect();
    let coupling_slope = ols_slope(&xs, &ys)?;
    let bz: Vec<f64> = live.iter().map(|p| p.b_z_t).collect();
    let om: Vec<f64> = live.iter().map(|p| p.omega_f).collect();
    let omega_f_slope = ols_slope(&bz, &om).unwrap_or(f64::NAN);
    Ok(MimsSweep {
        points,
        coupling_slope,
        omega_f_slope,
    })
}

fn ols_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::IllConditioned("all sweep points at one field".into()));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    /// Both pair sites see the same crystal-field offset.
    Correlated,
    /// Independent offsets; the pair line is narrower by √2.
    Uncorrelated,
}

/// W_Δ from the FWHM of a pair peak, Hz.
pub fn disorder_from_lineshape(peak_fwhm_hz: f64, correlation: Correlation) -> Result<f64> {
    ensure(peak_fwhm_hz > 0.0 && peak_fwhm_hz.is_finite(), "peak_fwhm", || "must be > 0".into())?;
    let w_pair = fwhm_to_sigma(peak_fwhm_hz);
    Ok(match correlation {
        Correlation::Correlated => w_pair,
        Correlation::Uncorrelated => std::f64::consts::SQRT_2 * w_pair,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl AxisSpec {
    pub fn values(&self) -> Vec<f64> {
        if self.steps <= 1 {
            return vec![self.min];
        }
        (0..self.steps)
            .map(|k| self.min + (self.max - self.min) * k as f64 / (self.steps - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanSpec {
    pub c1: AxisSpec,
    pub c2: AxisSpec,
    /// Search interval for W_Δ at the reference fraction, Hz.
    pub w_delta_hz: (f64, f64),
    /// W_Δ ∝ x across concentrations; false holds it fixed.
    pub w_scales_with_x: bool,
    /// Weight residuals by 1/σ instead of equally.
    pub sigma_weighted: bool,
    pub max_iters: u64,
    /// Continue from the best cell with a simplex over (c₁, c₂, W_Δ).
    pub refine: bool,
}

impl Default for ScanSpec {
    fn default() -> Self {
        ScanSpec {
            c1: AxisSpec {
                min: 0.2,
                max: 0.8,
                steps: 10,
            },
            c2: AxisSpec {
                min: 0.5,
                max: 3.2,
                steps: 10,
            },
            w_delta_hz: (5e6, 60e6),
            w_scales_with_x: true,
            sigma_weighted: false,
            max_iters: 60,
            refine: true,
        }
    }
}

impl ScanSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("c1", &self.c1), ("c2", &self.c2)] {
            ensure(a.min > 0.0 && a.max >= a.min && a.steps >= 1, name, || "need 0 < min <= max, steps >= 1".into())?;
        }
        let (lo, hi) = self.w_delta_hz;
        ensure(lo > 0.0 && hi > lo, "w_delta_hz", || "need 0 < lo < hi".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub i0: f64,
    pub c_off: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitState {
    pub c1: f64,
    pub c2: f64,
    pub w_delta_at_ref: f64,
    pub reference_fraction: f64,
    pub fluorine: FluorineSection,
    pub nuisance: Vec<Nuisance>,
    pub residual_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceCell {
    pub c1: f64,
    pub c2: f64,
    /// Best W_Δ at the reference fraction, Hz; NaN when invalid.
    pub w_delta_hz: f64,
    pub residual_sum: f64,
    pub valid: bool,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSurface {
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    /// Row-major over c1, then c2.
    pub cells: Vec<SurfaceCell>,
    pub best: usize,
}

impl ResidualSurface {
    pub fn cell(&self, i: usize, j: usize) -> &SurfaceCell {
        &self.cells[i * self.c2.len() + j]
    }

    pub fn best_cell(&self) -> &SurfaceCell {
        &self.cells[self.best]
    }

    /// Smallest residual over c₂ for each c₁ row.
    pub fn row_minima(&self) -> Vec<f64> {
        (0..self.c1.len())
            .map(|i| {
                (0..self.c2.len())
                    .map(|j| self.cell(i, j))
                    .filter(|c| c.valid)
                    .map(|c| c.residual_sum)
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "c1,c2,w_delta_hz,residual_sum,valid")?;
        for c in &self.cells {
            writeln!(out, "{},{},{:e},{:e},{}", c.c1, c.c2, c.w_delta_hz, c.residual_sum, c.valid)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFit {
    pub state: FitState,
    pub surface: ResidualSurface,
    /// Rates at the optimum, reference fraction and clock field.
    pub rates: RateTable,
    /// Model curve for each trace at the optimum.
    pub curves: Vec<Vec<f64>>,
}

/// Echo shape of one trace (I₀ = 1, c_off = 0) without nuclear modulation.
pub fn trace_shape(cfg: &Config, meta: &TraceMeta, times: &[f64], rates: RateParams, w_ref: f64, scale: bool) -> Result<Vec<f64>> {
    let x = meta.fraction;
    let params = cfg.material()?.with_fraction(x);
    let mut disorder = cfg.disorder_at(x);
    disorder.w_delta_hz = if scale {
        w_ref * x / cfg.disorder.w_delta_reference_fraction
    } else {
        w_ref
    };
    let mut m = ModelBuilder::new(cfg, params, disorder, rates).build_at(meta.regime, meta.b_z_t, meta.probe_hz)?;
    m.mims = None;
    Ok(times.iter().map(|&t| compose_at(&m, meta.n_pulses, t)).collect())
}

struct TraceSet<'a> {
    cfg: &'a Config,
    traces: &'a [EchoTrace],
    weights: Vec<Vec<f64>>,
    scale: bool,
}

impl TraceSet<'_> {
    fn new<'a>(cfg: &'a Config, traces: &'a [EchoTrace], spec: &ScanSpec) -> TraceSet<'a> {
        let weights = traces
            .iter()
            .map(|t| {
                (0..t.len())
                    .map(|i| if spec.sigma_weighted { 1.0 / t.sigma(i) } else { 1.0 })
                    .collect()
            })
            .collect();
        TraceSet {
            cfg,
            traces,
            weights,
            scale: spec.w_scales_with_x,
        }
    }

    fn evaluate(&self, rates: RateParams, w_ref: f64) -> Result<(f64, Vec<Nuisance>, Vec<Vec<f64>>)> {
        let mut total = 0.0;
        let mut nuis = Vec::with_capacity(self.traces.len());
        let mut curves = Vec::with_capacity(self.traces.len());
        for (tr, w) in self.traces.iter().zip(&self.weights) {
            let g = trace_shape(self.cfg, &tr.meta, &tr.times, rates, w_ref, self.scale)?;
            let (a, c) = linear_nuisance(&g, &tr.intensities, w, true);
            for k in 0..g.len() {
                total += (w[k] * (tr.intensities[k] - a * g[k] - c)).powi(2);
            }
            nuis.push(Nuisance { i0: a, c_off: c });
            curves.push(g.iter().map(|v| a * v + c).collect());
        }
        Ok((total, nuis, curves))
    }
}

struct FullCost<'a> {
    set: &'a TraceSet<'a>,
    bounds: (f64, f64),
}

impl CostFunction for FullCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let w = p[2].exp();
        if p[0] <= 0.0 || p[1] <= 0.0 || w < self.bounds.0 || w > self.bounds.1 {
            return Ok(f64::INFINITY);
        }
        let rates = RateParams { c1: p[0], c2: p[1] };
        Ok(self.set.evaluate(rates, w).map_or(f64::INFINITY, |r| r.0))
    }
}

/// Simplex over (c₁, c₂, ln W_Δ) from a grid cell; steps are half a grid spacing.
fn refine_cell(set: &TraceSet, cell: &SurfaceCell, spec: &ScanSpec) -> Option<(RateParams, f64)> {
    let half = |a: &AxisSpec| {
        if a.steps > 1 {
            0.5 * (a.max - a.min) / (a.steps - 1) as f64
        } else {
            0.05 * a.min
        }
    };
    let x0 = vec![cell.c1, cell.c2, cell.w_delta_hz.ln()];
    let mut simplex = vec![x0.clone()];
    for (i, d) in [half(&spec.c1), half(&spec.c2), 0.05].into_iter().enumerate() {
        let mut v = x0.clone();
        v[i] += d;
        simplex.push(v);
    }
    let cost = FullCost {
        set,
        bounds: spec.w_delta_hz,
    };
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-9).ok()?;
    let res = Executor::new(cost, solver).configure(|s| s.max_iters(400)).run().ok()?;
    let st = res.state();
    let p = st.get_best_param()?;
    (st.get_best_cost() < cell.residual_sum).then(|| (RateParams { c1: p[0], c2: p[1] }, p[2].exp()))
}

struct WdeltaCost<'a> {
    set: &'a TraceSet<'a>,
    rates: RateParams,
    bounds: (f64, f64),
}

impl CostFunction for WdeltaCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let w = p[0].exp();
        if w < self.bounds.0 || w > self.bounds.1 {
            return Ok(f64::INFINITY);
        }
        Ok(self.set.evaluate(self.rates, w).map_or(f64::INFINITY, |r| r.0))
    }
}

fn optimize_cell(set: &TraceSet, rates: RateParams, spec: &ScanSpec) -> SurfaceCell {
    let invalid = |msg: String| SurfaceCell {
        c1: rates.c1,
        c2: rates.c2,
        w_delta_hz: f64::NAN,
        residual_sum: f64::NAN,
        valid: false,
        message: Some(msg),
    };
    let (lo, hi) = spec.w_delta_hz;
    // Coarse log scan picks the simplex start; the valley in W_Δ can be narrow.
    let probes = 9;
    let cost = WdeltaCost {
        set,
        rates,
        bounds: spec.w_delta_hz,
    };
    let mut start = (f64::INFINITY, lo);
    for k in 0..probes {
        let w = lo * (hi / lo).powf(k as f64 / (probes - 1) as f64);
        let c = cost.cost(&vec![w.ln()]).unwrap_or(f64::INFINITY);
        if c < start.0 {
            start = (c, w);
        }
    }
    if !start.0.is_finite() {
        return invalid("model could not be evaluated anywhere in the W_Δ range".into());
    }
    let step = (hi / lo).ln() / (probes - 1) as f64;
    let x0 = start.1.ln();
    let simplex = vec![vec![x0], vec![(x0 + 0.5 * step).min(hi.ln())]];
    let solver = match NelderMead::new(simplex).with_sd_tolerance(1e-7) {
        Ok(s) => s,
        Err(e) => return invalid(e.to_string()),
    };
    match Executor::new(cost, solver).configure(|s| s.max_iters(spec.max_iters)).run() {
        Ok(res) => {
            let st = res.state();
            match st.get_best_param() {
                Some(p) if st.get_best_cost().is_finite() => SurfaceCell {
                    c1: rates.c1,
                    c2: rates.c2,
                    w_delta_hz: p[0].exp(),
                    residual_sum: st.get_best_cost(),
                    valid: true,
                    message: None,
                },
                _ => invalid("simplex found no finite residual".into()),
            }
        }
        Err(e) => invalid(e.to_string()),
    }
}

/// Grid scan over (c₁, c₂) with W_Δ optimized per cell and per-trace (I₀, c_off)
/// solved exactly. Traces must already have their nuclear modulation divided out.
pub fn global_fit(cfg: &Config, traces: &[EchoTrace], spec: &ScanSpec) -> Result<GlobalFit> {
    spec.validate()?;
    ensure(!traces.is_empty(), "traces", || "no traces to fit".into())?;
    for t in traces {
        t.validate()?;
    }
    let set = TraceSet::new(cfg, traces, spec);
    let c1 = spec.c1.values();
    let c2 = spec.c2.values();
    let grid: Vec<(f64, f64)> = c1.iter().flat_map(|a| c2.iter().map(move |b| (*a, *b))).collect();
    let cells: Vec<SurfaceCell> = grid
        .par_iter()
        .map(|&(a, b)| optimize_cell(&set, RateParams { c1: a, c2: b }, spec))
        .collect();
    let best = cells
        .iter()
        .enumerate()
        .filter(|(_, c)| c.valid)
        .min_by(|a, b| a.1.residual_sum.total_cmp(&b.1.residual_sum))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::NonConvergence("no valid cell in the scan".into()))?;
    let cell = &cells[best];
    let mut rates = RateParams { c1: cell.c1, c2: cell.c2 };
    let mut w_best = cell.w_delta_hz;
    if spec.refine {
        if let Some((r, w)) = refine_cell(&set, cell, spec) {
            rates = r;
            w_best = w;
        }
    }
    let (residual_sum, nuisance, curves) = set.evaluate(rates, w_best)?;
    let x_ref = cfg.disorder.w_delta_reference_fraction;
    let params = cfg.material()?.with_fraction(x_ref);
    let mut disorder = cfg.disorder_at(x_ref);
    disorder.w_delta_hz = w_best;
    let table = RateTable::build(&params, &disorder, &rates, clock_field(&params, HyperfineState::M3Half));
    Ok(GlobalFit {
        state: FitState {
            c1: rates.c1,
            c2: rates.c2,
            w_delta_at_ref: w_best,
            reference_fraction: x_ref,
            fluorine: cfg.fluorine.clone(),
            nuisance,
            residual_sum,
        },
        surface: ResidualSurface { c1, c2, cells, best },
        rates: table,
        curves,
    })
}

/// Where and how a synthetic trace is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub regime: Regime,
    pub fraction: f64,
    pub n_pulses: u32,
    pub b_z_t: f64,
    /// Probe offset from the regime's nominal frequency, Hz.
    pub probe_offset_hz: f64,
    pub t_max: f64,
    pub points: usize,
}

/// Model trace at the given truth with Gaussian noise of `noise`·I₀.
pub fn synthesize_trace(
    cfg: &Config,
    spec: &TraceSpec,
    rates: RateParams,
    w_ref: f64,
    noise: f64,
    seed: u64,
) -> Result<EchoTrace> {
    ensure(spec.points >= 2, "points", || "need at least two points".into())?;
    let probe_hz = crate::echo::EchoModelConfig::probe_hz(cfg, spec.regime, spec.b_z_t)? + spec.probe_offset_hz;
    let meta = TraceMeta {
        probe_hz,
        b_z_t: spec.b_z_t,
        fraction: spec.fraction,
        n_pulses: spec.n_pulses,
        regime: spec.regime,
    };
    let times: Vec<f64> = (1..=spec.points).map(|k| spec.t_max * k as f64 / spec.points as f64).collect();
    let clean = trace_shape(cfg, &meta, &times, rates, w_ref, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = if noise > 0.0 { noise } else { 1.0 };
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid("noise", e.to_string()))?;
    let y = clean
        .iter()
        .map(|v| if noise > 0.0 { v + normal.sample(&mut rng) } else { *v })
        .collect();
    let sigmas = (noise > 0.0).then(|| vec![noise; times.len()]);
    EchoTrace::new(times, y, sigmas, meta)
}

/// The closed-loop set, all at the clock field: Hahn echoes of singles and
/// loose pairs at two concentrations, singles probed off the line center
/// (these separate W_Δ from c₂) and nnn CPMG at N = 1 and 3.
pub fn closed_loop_specs(cfg: &Config) -> Result<Vec<TraceSpec>> {
    let b = clock_field(&cfg.material()?, HyperfineState::M3Half);
    let mk = |regime, fraction, n_pulses, t_max| TraceSpec {
        regime,
        fraction,
        n_pulses,
        b_z_t: b,
        probe_offset_hz: 0.0,
        t_max,
        points: 500,
    };
    let offset = |fraction: f64, offset_hz: f64, t_max: f64| TraceSpec {
        probe_offset_hz: offset_hz,
        ..mk(Regime::Single, fraction, 1, t_max)
    };
    Ok(vec![
        mk(Regime::Single, 1e-3, 1, 3e-6),
        offset(1e-3, 10e6, 4e-6),
        offset(1e-3, 20e6, 12e-6),
        offset(1e-3, -20e6, 12e-6),
        offset(1e-4, 2e6, 30e-6),
        offset(1e-4, -2e6, 30e-6),
        mk(Regime::Single, 1e-4, 1, 30e-6),
        mk(Regime::LoosePair, 1e-3, 1, 3e-6),
        mk(Regime::LoosePair, 1e-4, 1, 30e-6),
        mk(Regime::NnnPair, 1e-3, 1, 8e-6),
        mk(Regime::NnnPair, 1e-3, 3, 15e-6),
    ])
}

use crate::{Common, Format, Run};
use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};
use tlsecho::echo::{
    abundance_tradeoff, echo_curve, log_grid, one_over_e_time, stretched_exp_fit, AbundanceCalibration, FitOptions,
    ModelBuilder, StretchedFit,
};
use tlsecho::fit::{filter_mims, global_fit, AxisSpec, FitState, ScanSpec};
use tlsecho::kernels::{
    fluorine_loose, fluorine_nnn, kernel_crossover, kernel_long, kernel_short, mims_couplings, mims_site, telegraph,
    telegraph_free_induction, CouplingRatios, CrossoverShape, DephasingChannel, Exponent, MimsCouplings,
};
use tlsecho::levels::{clock_field, level_energy, longitudinal_field, matrix_elements, pair_levels, ring_exchange, ThirdIon};
use tlsecho::oracle::{beta_refit, mc_echo, normalized_crossover, ring_shift_exact, Estimator, FluctuatorEnsemble, BOUNDARY_TOLERANCE};
use tlsecho::rates::RateTable;
use tlsecho::trace::{EchoTrace, Regime, TraceMeta};
use tlsecho::units::{GHZ, MHZ, MT, US};
use tlsecho::material::PairConfig;
use tlsecho::{Config, HyperfineState, MaterialParams};

fn parse_iz(s: &str) -> std::result::Result<HyperfineState, String> {
    s.parse().map_err(|e: tlsecho::Error| e.to_string())
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    s.parse().map_err(|e: tlsecho::Error| e.to_string())
}

fn field_or_clock(params: &MaterialParams, bz_mt: Option<f64>) -> f64 {
    bz_mt.map_or_else(|| clock_field(params, HyperfineState::M3Half), |b| b * MT)
}

/// Config with rate and disorder overrides applied; `w_delta_mhz` is W_Δ at `x`.
fn with_overrides(cfg: &Config, x: f64, c1: Option<f64>, c2: Option<f64>, w_delta_mhz: Option<f64>) -> Config {
    let mut c = cfg.clone();
    if let Some(v) = c1 {
        c.rates.c1 = v;
    }
    if let Some(v) = c2 {
        c.rates.c2 = v;
    }
    if let Some(w) = w_delta_mhz {
        c.disorder.w_delta_hz = w * MHZ * c.disorder.w_delta_reference_fraction / x;
    }
    c
}

fn check_fraction(x: f64) -> Result<()> {
    anyhow::ensure!(x > 0.0 && x < 1.0, "invalid x: dopant fraction must be in (0, 1), got {x}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct LevelsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Nuclear projection I^z (-3/2, -1/2, +1/2, +3/2 or decimal); all four when absent.
    #[arg(long, value_parser = parse_iz, allow_hyphen_values = true)]
    pub iz: Option<HyperfineState>,
    /// Applied field B_z, mT.
    #[arg(long, allow_hyphen_values = true)]
    pub bz_mt: f64,
    /// Extra longitudinal offset delta-h, MHz.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub dh_mhz: f64,
    /// Also list the nnn and loose pair levels.
    #[arg(long)]
    pub pairs: bool,
}

pub fn levels(run: &Run, a: &LevelsArgs) -> Result<()> {
    let p = run.cfg.material()?;
    let b = a.bz_mt * MT;
    let dh = a.dh_mhz * MHZ;
    let states: Vec<HyperfineState> = a.iz.map_or_else(|| HyperfineState::ALL.to_vec(), |s| vec![s]);
    run.out.csv("levels.csv", |w| {
        writeln!(w, "i_z,b_z_mt,h_ghz,delta_e_ghz,m_off,m_diag,clock_field_mt")?;
        for iz in &states {
            let h = longitudinal_field(&p, *iz, b, dh);
            let m = matrix_elements(&p, *iz, b, dh);
            writeln!(
                w,
                "{iz},{:.4},{:.6},{:.6},{:.6},{:.6},{:.4}",
                a.bz_mt,
                h / GHZ,
                level_energy(&p, *iz, b, dh) / GHZ,
                m.off,
                m.diag,
                clock_field(&p, *iz) / MT
            )?;
        }
        Ok(())
    })?;
    if a.pairs {
        let kinds = [
            ("nnn", run.cfg.pairs.nnn_detuning_hz),
            ("loose", run.cfg.pairs.loose_detuning_hz),
        ];
        let mut rows = Vec::new();
        for (kind, det) in kinds {
            let pair = PairConfig::from_detuning(&p, det, HyperfineState::M3Half)?;
            rows.push((kind, pair.coupling_hz(), pair_levels(&p, &pair, b)));
        }
        run.out.csv("pair_levels.csv", |w| {
            writeln!(w, "pair,coupling_mhz,e_ground_ghz,e_anti_ghz,e_sym_ghz,e_doubly_ghz,probed_ghz")?;
            for (kind, k, l) in &rows {
                let e = l.energies.map(|v| v / GHZ);
                writeln!(
                    w,
                    "{kind},{:.4},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    k / MHZ,
                    e[0],
                    e[1],
                    e[2],
                    e[3],
                    l.probed_transition() / GHZ
                )?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct RatesArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dopant fraction x (0.001 = 0.1%); config value when absent.
    #[arg(long)]
    pub x: Option<f64>,
    /// Detuning width W_Delta at this x, MHz; scaled from the config when absent.
    #[arg(long)]
    pub w_delta_mhz: Option<f64>,
    /// Rate coefficient c1 (dimensionless).
    #[arg(long)]
    pub c1: Option<f64>,
    /// Rate coefficient c2 (dimensionless).
    #[arg(long)]
    pub c2: Option<f64>,
    /// Field B_z, mT; the I^z = -3/2 clock field when absent.
    #[arg(long, allow_hyphen_values = true)]
    pub bz_mt: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

pub fn rates(run: &Run, a: &RatesArgs) -> Result<()> {
    let x = a.x.unwrap_or(run.cfg.material.dopant_fraction);
    check_fraction(x)?;
    let cfg = with_overrides(&run.cfg, x, a.c1, a.c2, a.w_delta_mhz);
    cfg.rates.validate()?;
    let p = cfg.material()?.with_fraction(x);
    let d = cfg.disorder_at(x);
    d.validate()?;
    let table = RateTable::build(&p, &d, &cfg.rates, field_or_clock(&p, a.bz_mt));
    match a.format {
        Format::Json => run.out.json("rates.json", &table),
        Format::Csv => run.out.csv("rates.csv", |w| write_rate_table(w, &table)),
    }
}

fn write_rate_table(w: &mut Vec<u8>, table: &RateTable) -> std::io::Result<()> {
    writeln!(w, "i_z,b_z_mt,kappa_per_s,flip_time_s,alpha,w_iz_hz,status")?;
    for (iz, e) in &table.entries {
        let status = if e.quasi_static { "quasi-static" } else { "fluctuating" };
        writeln!(
            w,
            "{iz},{:.4},{:e},{:e},{:e},{:e},{status}",
            table.b_z_t / MT,
            e.kappa,
            e.flip_time(),
            e.alpha,
            e.w_iz_hz
        )?;
    }
    Ok(())
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Short,
    Long,
    Crossover,
    Telegraph,
    TelegraphFid,
    FluorineNnn,
    FluorineLoose,
    Mims,
}

#[derive(Args, Debug)]
pub struct KernelArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub channel: KernelKind,
    /// Interaction power: 3 (magnetic) or 6 (ring exchange).
    #[arg(long, default_value_t = 3)]
    pub gamma: u32,
    /// Number of pi pulses N.
    #[arg(long, default_value_t = 1)]
    pub n_pulses: u32,
    /// Amplitude V0, Hz*m^gamma.
    #[arg(long)]
    pub v0: Option<f64>,
    /// Fluctuator flip rate kappa, 1/s.
    #[arg(long)]
    pub kappa_per_s: Option<f64>,
    /// Fluctuator density, 1/m^3.
    #[arg(long)]
    pub density_per_m3: Option<f64>,
    /// Crossover beta for every N; tabulated values when absent.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Telegraph coupling J_par, MHz.
    #[arg(long)]
    pub j_par_mhz: Option<f64>,
    /// Loose-pair fluorine time T_F, us.
    #[arg(long)]
    pub t_f_us: Option<f64>,
    /// Loose-pair fluorine stretch beta_F.
    #[arg(long)]
    pub beta_f: Option<f64>,
    /// Mims hyperfine A, MHz.
    #[arg(long, allow_hyphen_values = true)]
    pub a_mhz: Option<f64>,
    /// Mims hyperfine B, MHz.
    #[arg(long, allow_hyphen_values = true)]
    pub b_mhz: Option<f64>,
    /// Fluorine Larmor frequency omega_F, MHz.
    #[arg(long)]
    pub omega_f_mhz: Option<f64>,
    /// Grid start, us.
    #[arg(long, default_value_t = 0.01)]
    pub t_min_us: f64,
    /// Grid end, us.
    #[arg(long, default_value_t = 100.0)]
    pub t_max_us: f64,
    /// Points per decade.
    #[arg(long, default_value_t = 64)]
    pub per_decade: usize,
}

fn need(v: Option<f64>, flag: &str) -> Result<f64> {
    v.with_context(|| format!("invalid {flag}: required for this channel"))
}

pub fn kernel(run: &Run, a: &KernelArgs) -> Result<()> {
    let times = log_grid(a.t_min_us * US, a.t_max_us * US, a.per_decade)?;
    let n = a.n_pulses;
    anyhow::ensure!(n >= 1, "invalid n-pulses: must be >= 1");
    let dephasing = || -> Result<DephasingChannel> {
        let ch = DephasingChannel {
            exponent: Exponent::from_gamma(a.gamma)?,
            v0: need(a.v0, "v0")?,
            kappa: need(a.kappa_per_s, "kappa-per-s")?,
            density: need(a.density_per_m3, "density-per-m3")?,
        };
        ch.validate()?;
        Ok(ch)
    };
    let values: Vec<f64> = match a.channel {
        KernelKind::Short => {
            let ch = dephasing()?;
            times.iter().map(|t| kernel_short(&ch, n, *t)).collect()
        }
        KernelKind::Long => {
            let ch = dephasing()?;
            times.iter().map(|t| kernel_long(&ch, *t)).collect()
        }
        KernelKind::Crossover => {
            let ch = dephasing()?;
            let shape = a.beta.map_or_else(CrossoverShape::published, CrossoverShape::uniform);
            shape.validate()?;
            times.iter().map(|t| kernel_crossover(&ch, n, *t, &shape)).collect()
        }
        KernelKind::Telegraph | KernelKind::TelegraphFid => {
            let j = need(a.j_par_mhz, "j-par-mhz")? * MHZ;
            let k = need(a.kappa_per_s, "kappa-per-s")?;
            let f = if a.channel == KernelKind::Telegraph { telegraph } else { telegraph_free_induction };
            times.iter().map(|t| f(j, k, *t)).collect()
        }
        KernelKind::FluorineNnn => {
            let cfg = &run.cfg;
            let b = ModelBuilder::new(cfg, cfg.material()?, cfg.disorder(), cfg.rate_params());
            let model = b.fluorine();
            times.iter().map(|t| fluorine_nnn(&model, n, *t)).collect()
        }
        KernelKind::FluorineLoose => {
            let t_f = a.t_f_us.map_or(run.cfg.fluorine.t_f_s, |v| v * US);
            let beta_f = a.beta_f.unwrap_or(run.cfg.fluorine.beta_f);
            anyhow::ensure!(t_f > 0.0, "invalid t-f-us: must be > 0");
            times.iter().map(|t| fluorine_loose(t_f, beta_f, *t)).collect()
        }
        KernelKind::Mims => {
            let (am, bm) = (need(a.a_mhz, "a-mhz")? * MHZ, need(a.b_mhz, "b-mhz")? * MHZ);
            let w = need(a.omega_f_mhz, "omega-f-mhz")? * MHZ;
            times.iter().map(|t| mims_site(am, bm, w, n, *t)).collect()
        }
    };
    run.out.csv("kernel.csv", |w| {
        writeln!(w, "t_s,suppression")?;
        for (t, v) in times.iter().zip(&values) {
            writeln!(w, "{t:e},{v:e}")?;
        }
        Ok(())
    })
}

#[derive(Args, Debug)]
pub struct EchoArgs {
    #[command(flatten)]
    pub common: Common,
    /// single, loose_pair or nnn_pair.
    #[arg(long, value_parser = parse_regime, default_value = "single")]
    pub regime: Regime,
    /// Dopant fraction x; config value when absent.
    #[arg(long)]
    pub x: Option<f64>,
    /// Number of pi pulses N (1 = Hahn echo).
    #[arg(long, default_value_t = 1)]
    pub n_pulses: u32,
    /// Field B_z, mT; the I^z = -3/2 clock field when absent.
    #[arg(long, allow_hyphen_values = true)]
    pub bz_mt: Option<f64>,
    /// Probe offset from the regime's nominal transition, MHz.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub probe_offset_mhz: f64,
    #[arg(long)]
    pub c1: Option<f64>,
    #[arg(long)]
    pub c2: Option<f64>,
    /// W_Delta at this x, MHz.
    #[arg(long)]
    pub w_delta_mhz: Option<f64>,
    /// Leave out the fluorine nuclear modulation.
    #[arg(long)]
    pub no_mims: bool,
    /// Grid start, us.
    #[arg(long, default_value_t = 0.01)]
    pub t_min_us: f64,
    /// Grid end, us.
    #[arg(long, default_value_t = 100.0)]
    pub t_max_us: f64,
    #[arg(long, default_value_t = 64)]
    pub per_decade: usize,
    /// Gaussian noise standard deviation as a fraction of I0.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct EchoSummary {
    meta: TraceMeta,
    t_1e_s: Option<f64>,
    mims: Option<MimsCouplings>,
}

pub fn echo(run: &Run, a: &EchoArgs) -> Result<()> {
    let x = a.x.unwrap_or(run.cfg.material.dopant_fraction);
    check_fraction(x)?;
    anyhow::ensure!(a.noise >= 0.0 && a.noise.is_finite(), "invalid noise: must be >= 0");
    let cfg = with_overrides(&run.cfg, x, a.c1, a.c2, a.w_delta_mhz);
    cfg.rates.validate()?;
    let p = cfg.material()?.with_fraction(x);
    let b = field_or_clock(&p, a.bz_mt);
    let probe_hz = tlsecho::echo::EchoModelConfig::probe_hz(&cfg, a.regime, b)? + a.probe_offset_mhz * MHZ;
    let builder = ModelBuilder::new(&cfg, p.clone(), cfg.disorder_at(x), cfg.rates);
    let mut model = builder.build_at(a.regime, b, probe_hz)?;
    if a.no_mims {
        model.mims = None;
    }
    let times = log_grid(a.t_min_us * US, a.t_max_us * US, a.per_decade)?;
    let mut y = echo_curve(&model, a.n_pulses, &times);
    let sigmas = (a.noise > 0.0).then(|| vec![a.noise * model.i0; times.len()]);
    if a.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let normal = Normal::new(0.0, a.noise * model.i0)?;
        for v in &mut y {
            *v += normal.sample(&mut rng);
        }
    }
    let meta = TraceMeta {
        probe_hz,
        b_z_t: b,
        fraction: x,
        n_pulses: a.n_pulses,
        regime: a.regime,
    };
    let trace = EchoTrace::new(times.clone(), y, sigmas, meta)?;
    let t_1e = one_over_e_time(&model, a.n_pulses, times[0], *times.last().unwrap()).ok();
    run.out.csv("echo.csv", |w| trace.write_csv(w))?;
    run.out.json(
        "echo.json",
        &EchoSummary {
            meta,
            t_1e_s: t_1e,
            mims: model.mims,
        },
    )
}

#[derive(Args, Debug)]
pub struct TraceMetaArgs {
    /// single, loose_pair or nnn_pair.
    #[arg(long, value_parser = parse_regime, default_value = "single")]
    pub regime: Regime,
    /// Dopant fraction x; config value when absent.
    #[arg(long)]
    pub x: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub n_pulses: u32,
    /// Field B_z, mT; the I^z = -3/2 clock field when absent.
    #[arg(long, allow_hyphen_values = true)]
    pub bz_mt: Option<f64>,
    /// Probe frequency, GHz; the regime's nominal transition when absent.
    #[arg(long)]
    pub probe_ghz: Option<f64>,
}

impl TraceMetaArgs {
    fn meta(&self, cfg: &Config) -> Result<TraceMeta> {
        let x = self.x.unwrap_or(cfg.material.dopant_fraction);
        check_fraction(x)?;
        let b = field_or_clock(&cfg.material()?, self.bz_mt);
        let probe_hz = match self.probe_ghz {
            Some(f) => f * GHZ,
            None => tlsecho::echo::EchoModelConfig::probe_hz(cfg, self.regime, b)?,
        };
        Ok(TraceMeta {
            probe_hz,
            b_z_t: b,
            fraction: x,
            n_pulses: self.n_pulses,
            regime: self.regime,
        })
    }
}

#[derive(Args, Debug)]
pub struct FitTraceArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trace CSV with header t_s,intensity,sigma.
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub meta: TraceMetaArgs,
    /// Hold beta at this value.
    #[arg(long)]
    pub fixed_beta: Option<f64>,
    /// Hold the offset c_off at zero.
    #[arg(long)]
    pub no_offset: bool,
    /// Fit and divide out the fluorine modulation first.
    #[arg(long)]
    pub mims: bool,
}

#[derive(Serialize)]
struct MimsReport {
    couplings: MimsCouplings,
    /// Nuclear frequencies (omega+, omega-), Hz.
    frequencies_hz: (f64, f64),
    degenerate: bool,
}

#[derive(Serialize)]
struct FitTraceReport {
    trace: String,
    points: usize,
    stretched: StretchedFit,
    mims: Option<MimsReport>,
}

pub fn fit_trace(run: &Run, a: &FitTraceArgs) -> Result<()> {
    let meta = a.meta.meta(&run.cfg)?;
    let mut trace = EchoTrace::read_csv(&a.trace, meta)?;
    let opts = FitOptions {
        fixed_beta: a.fixed_beta,
        no_offset: a.no_offset,
    };
    let mut mims = None;
    if a.mims {
        let cfg = &run.cfg;
        let p = cfg.material()?.with_fraction(meta.fraction);
        let builder = ModelBuilder::new(cfg, p.clone(), cfg.disorder_at(meta.fraction), cfg.rates);
        let guess = mims_couplings(&builder.fluorine(), &p, meta.b_z_t, HyperfineState::M3Half);
        let f = filter_mims(&trace, &guess, &CouplingRatios::default())?;
        mims = Some(MimsReport {
            couplings: f.couplings,
            frequencies_hz: f.frequencies(),
            degenerate: f.degenerate,
        });
        run.out.csv("demodulated.csv", |w| f.demodulated.write_csv(w))?;
        trace = f.demodulated;
    }
    let stretched = stretched_exp_fit(&trace, opts)?;
    run.out.json(
        "fit.json",
        &FitTraceReport {
            trace: a.trace.display().to_string(),
            points: trace.len(),
            stretched,
            mims,
        },
    )
}

/// One entry of the `fit --traces` list; paths are relative to the list file.
#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEntry {
    pub path: PathBuf,
    pub regime: Regime,
    pub fraction: f64,
    #[serde(default = "one")]
    pub n_pulses: u32,
    /// Field, mT; I^z = -3/2 clock field when absent.
    pub b_z_mt: Option<f64>,
    /// Probe, GHz; nominal transition when absent.
    pub probe_ghz: Option<f64>,
    #[serde(default)]
    pub probe_offset_mhz: f64,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceList {
    traces: Vec<TraceEntry>,
}

fn read_trace_list(path: &Path, cfg: &Config) -> Result<Vec<(String, EchoTrace)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let list: TraceList = serde_json::from_str(&text).map_err(|e| tlsecho::Error::Parse {
        path: path.display().to_string(),
        line: e.line() as u64,
        column: Some(e.column() as u64),
        message: e.to_string(),
    })?;
    anyhow::ensure!(!list.traces.is_empty(), "{}: invalid traces: list is empty", path.display());
    let base = path.parent().unwrap_or(Path::new("."));
    let p = cfg.material()?;
    list.traces
        .iter()
        .map(|e| {
            check_fraction(e.fraction)?;
            let b = field_or_clock(&p, e.b_z_mt);
            let probe_hz = match e.probe_ghz {
                Some(f) => f * GHZ,
                None => tlsecho::echo::EchoModelConfig::probe_hz(cfg, e.regime, b)?,
            } + e.probe_offset_mhz * MHZ;
            let meta = TraceMeta {
                probe_hz,
                b_z_t: b,
                fraction: e.fraction,
                n_pulses: e.n_pulses,
                regime: e.regime,
            };
            let name = e.path.file_stem().map_or("trace".into(), |s| s.to_string_lossy().into_owned());
            Ok((name, EchoTrace::read_csv(base.join(&e.path), meta)?))
        })
        .collect()
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    /// JSON list {"traces": [{"path", "regime", "fraction", "n_pulses", "b_z_mt", "probe_ghz", "probe_offset_mhz"}]}.
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub c1_min: f64,
    #[arg(long, default_value_t = 0.8)]
    pub c1_max: f64,
    #[arg(long, default_value_t = 10)]
    pub c1_steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub c2_min: f64,
    #[arg(long, default_value_t = 3.2)]
    pub c2_max: f64,
    #[arg(long, default_value_t = 10)]
    pub c2_steps: usize,
    /// Lower W_Delta bound at the reference fraction, MHz.
    #[arg(long, default_value_t = 5.0)]
    pub w_min_mhz: f64,
    /// Upper W_Delta bound at the reference fraction, MHz.
    #[arg(long, default_value_t = 60.0)]
    pub w_max_mhz: f64,
    /// Fit W_Delta independently of x instead of W_Delta proportional to x.
    #[arg(long)]
    pub no_w_scaling: bool,
    /// Weight residuals by 1/sigma^2.
    #[arg(long)]
    pub sigma_weighted: bool,
    /// Skip the continuous refinement after the grid scan.
    #[arg(long)]
    pub no_refine: bool,
    /// Simplex iterations per cell.
    #[arg(long, default_value_t = 60)]
    pub max_iters: u64,
}

#[derive(Serialize)]
struct FitReport<'a> {
    state: &'a FitState,
    traces: Vec<String>,
}

pub fn fit(run: &Run, a: &FitArgs) -> Result<()> {
    let traces = read_trace_list(&a.traces, &run.cfg)?;
    let spec = ScanSpec {
        c1: AxisSpec {
            min: a.c1_min,
            max: a.c1_max,
            steps: a.c1_steps,
        },
        c2: AxisSpec {
            min: a.c2_min,
            max: a.c2_max,
            steps: a.c2_steps,
        },
        w_delta_hz: (a.w_min_mhz * MHZ, a.w_max_mhz * MHZ),
        w_scales_with_x: !a.no_w_scaling,
        sigma_weighted: a.sigma_weighted,
        max_iters: a.max_iters,
        refine: !a.no_refine,
    };
    let only: Vec<EchoTrace> = traces.iter().map(|(_, t)| t.clone()).collect();
    let res = global_fit(&run.cfg, &only, &spec)?;
    run.out.json(
        "fit_state.json",
        &FitReport {
            state: &res.state,
            traces: traces.iter().map(|(n, _)| n.clone()).collect(),
        },
    )?;
    run.out.csv("residual_surface.csv", |w| res.surface.write_csv(w))?;
    run.out.csv("rate_table.csv", |w| write_rate_table(w, &res.rates))?;
    for (k, ((name, tr), curve)) in traces.iter().zip(&res.curves).enumerate() {
        run.out.csv(&format!("curves/{k:02}_{name}.csv"), |w| {
            writeln!(w, "t_s,intensity,model")?;
            for i in 0..tr.len() {
                writeln!(w, "{:e},{:e},{:e}", tr.times[i], tr.intensities[i], curve[i])?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Monte Carlo echo against the crossover kernel.
    Kernels,
    /// Crossover beta refit against the tabulated values.
    Refit,
    /// Perturbative ring exchange against exact three-ion diagonalization.
    Ring,
    All,
}

#[derive(Args, Debug)]
pub struct McValidateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Monte Carlo histories per check.
    #[arg(long, default_value_t = 4000)]
    pub samples: usize,
}

#[derive(Debug, Serialize)]
struct Check {
    name: String,
    pass: bool,
    deviation: f64,
    tolerance: f64,
}

#[derive(Serialize)]
struct ValidationReport {
    suite: String,
    seed: u64,
    samples: usize,
    pass: bool,
    checks: Vec<Check>,
}

struct McCurve {
    name: String,
    kt: Vec<f64>,
    mc: Vec<f64>,
    se: Vec<f64>,
    model: Vec<f64>,
}

fn kernel_suite(seed: u64, samples: usize, checks: &mut Vec<Check>, curves: &mut Vec<McCurve>) -> Result<()> {
    let refit = CrossoverShape::oracle_refit();
    let kt = [0.5, 1.0, 2.0, 5.0, 10.0, 20.0];
    for e in [Exponent::Ring, Exponent::Magnetic] {
        for n in [1u32, 3] {
            // Coupling set so −ln I(20/κ) = 2.5 on the refit shape.
            let scale = 2.5 / normalized_crossover(e, n, 20.0, refit.beta(e, n));
            let mut ch = DephasingChannel {
                exponent: e,
                v0: 1.0,
                kappa: 1.0,
                density: 1.0,
            };
            ch.v0 = scale.powf(1.0 / e.s()) / (TAU * ch.vbar());
            let ens = FluctuatorEnsemble::with_auto_radius(ch, n, &kt, samples, seed, BOUNDARY_TOLERANCE)?;
            let mc = mc_echo(&ens, n, &kt, Estimator::Cumulant)?;
            let model: Vec<f64> = kt.iter().map(|t| kernel_crossover(&ch, n, *t, &refit).ln()).collect();
            let dev = mc
                .ln_intensity
                .iter()
                .zip(&model)
                .map(|(l, m)| ((l - m) / m).abs())
                .fold(0.0, f64::max);
            checks.push(Check {
                name: format!("mc_vs_crossover_gamma{}_n{n}", e.gamma()),
                pass: dev <= 0.1,
                deviation: dev,
                tolerance: 0.1,
            });
            curves.push(McCurve {
                name: format!("mc_gamma{}_n{n}", e.gamma()),
                kt: kt.to_vec(),
                mc: mc.ln_intensity,
                se: mc.ln_std_err,
                model,
            });
        }
    }
    Ok(())
}

fn refit_suite(seed: u64, samples: usize, checks: &mut Vec<Check>) -> Result<()> {
    let published = CrossoverShape::published();
    for e in [Exponent::Ring, Exponent::Magnetic] {
        for n in 1..=5 {
            let f = beta_refit(e, n, samples, seed)?;
            let dev = (f.beta - published.beta(e, n)).abs();
            checks.push(Check {
                name: format!("beta_gamma{}_n{n}", e.gamma()),
                pass: dev <= 0.1,
                deviation: dev,
                tolerance: 0.1,
            });
        }
    }
    Ok(())
}

fn ring_suite(checks: &mut Vec<Check>) -> Result<()> {
    let (dp, jp, d3) = (10.0, 0.05, 9.0);
    for third in [ThirdIon::Excited, ThirdIon::Ground] {
        for (k, (j13, j23)) in [(1.0e-3, 2.0e-3), (-2.0e-3, 1.5e-3), (5e-3, 5e-3)].into_iter().enumerate() {
            let a = ring_exchange(j13, j23, dp, jp, d3, third)?;
            let e = ring_shift_exact(j13, j23, dp, jp, d3, third);
            let dev = (a / e - 1.0).abs();
            checks.push(Check {
                name: format!("ring_tau{}_case{k}", third.tau()),
                pass: dev <= 0.05,
                deviation: dev,
                tolerance: 0.05,
            });
        }
    }
    Ok(())
}

pub fn mc_validate(run: &Run, a: &McValidateArgs) -> Result<()> {
    anyhow::ensure!(a.samples >= 100, "invalid samples: need at least 100");
    let mut checks = Vec::new();
    let mut curves = Vec::new();
    let all = a.suite == Suite::All;
    if all || a.suite == Suite::Kernels {
        kernel_suite(a.seed, a.samples, &mut checks, &mut curves)?;
    }
    if all || a.suite == Suite::Refit {
        refit_suite(a.seed, a.samples, &mut checks)?;
    }
    if all || a.suite == Suite::Ring {
        ring_suite(&mut checks)?;
    }
    let report = ValidationReport {
        suite: format!("{:?}", a.suite).to_lowercase(),
        seed: a.seed,
        samples: a.samples,
        pass: checks.iter().all(|c| c.pass),
        checks,
    };
    run.out.json("validation.json", &report)?;
    for c in &curves {
        run.out.csv(&format!("curves/{}.csv", c.name), |w| {
            writeln!(w, "kappa_t,ln_i_mc,ln_i_std_err,ln_i_model")?;
            for i in 0..c.kt.len() {
                writeln!(w, "{:e},{:e},{:e},{:e}", c.kt[i], c.mc[i], c.se[i], c.model[i])?;
            }
            Ok(())
        })?;
    }
    if !report.pass {
        eprintln!("mc-validate: {} of {} checks failed", report.checks.iter().filter(|c| !c.pass).count(), report.checks.len());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct AbundanceArgs {
    #[command(flatten)]
    pub common: Common,
    /// Target coherence time, us.
    #[arg(long)]
    pub target_t2_us: f64,
    /// Calibration fraction x; config value when absent.
    #[arg(long)]
    pub calib_x: Option<f64>,
    /// Largest fraction the scaling is trusted at.
    #[arg(long, default_value_t = 1e-2)]
    pub max_x: f64,
}

pub fn abundance(run: &Run, a: &AbundanceArgs) -> Result<()> {
    let x = a.calib_x.unwrap_or(run.cfg.material.dopant_fraction);
    check_fraction(x)?;
    let mut cal = AbundanceCalibration::from_model(&run.cfg, x)?;
    cal.max_fraction = a.max_x;
    let res = abundance_tradeoff(a.target_t2_us * US, &cal)?;
    #[derive(Serialize)]
    struct Report {
        target_t2_s: f64,
        calibration: AbundanceCalibration,
        result: tlsecho::echo::Abundance,
    }
    run.out.json(
        "abundance.json",
        &Report {
            target_t2_s: a.target_t2_us * US,
            calibration: cal,
            result: res,
        },
    )
}

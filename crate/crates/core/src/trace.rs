//! Measured or synthesized echo traces and their CSV form.

use crate::error::{ensure, Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Which dephasing picture applies to a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Single,
    LoosePair,
    NnnPair,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Regime::Single),
            "loose_pair" | "loose" => Ok(Regime::LoosePair),
            "nnn_pair" | "nnn" => Ok(Regime::NnnPair),
            _ => Err(Error::invalid("regime", format!("expected single, loose_pair or nnn_pair, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceMeta {
    pub probe_hz: f64,
    pub b_z_t: f64,
    pub fraction: f64,
    pub n_pulses: u32,
    pub regime: Regime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EchoTrace {
    /// Detection times 2Nτ, s.
    pub times: Vec<f64>,
    pub intensities: Vec<f64>,
    pub sigmas: Option<Vec<f64>>,
    pub meta: TraceMeta,
}

impl EchoTrace {
    pub fn new(times: Vec<f64>, intensities: Vec<f64>, sigmas: Option<Vec<f64>>, meta: TraceMeta) -> Result<Self> {
        let t = EchoTrace {
            times,
            intensities,
            sigmas,
            meta,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.times.len() == self.intensities.len(), "intensities", || "length differs from times".into())?;
        ensure(self.times.windows(2).all(|w| w[1] > w[0]), "times", || "must be strictly increasing".into())?;
        ensure(self.times.iter().all(|t| t.is_finite() && *t >= 0.0), "times", || "must be finite and >= 0".into())?;
        ensure(self.intensities.iter().all(|v| v.is_finite()), "intensities", || "must be finite".into())?;
        if let Some(s) = &self.sigmas {
            ensure(s.len() == self.times.len(), "sigmas", || "length differs from times".into())?;
            ensure(s.iter().all(|v| *v > 0.0 && v.is_finite()), "sigmas", || "must be > 0".into())?;
        }
        ensure(self.meta.n_pulses >= 1, "n_pulses", || "must be >= 1".into())?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas.as_ref().map_or(1.0, |s| s[i])
    }

    /// Reads `t_s,intensity,sigma`; the sigma column may be absent or empty.
    pub fn read_csv(path: impl AsRef<Path>, meta: TraceMeta) -> Result<Self> {
        let path = path.as_ref();
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: name.clone(),
            source,
        })?;
        Self::parse_csv(&text, &name, meta)
    }

    pub fn parse_csv(text: &str, name: &str, meta: TraceMeta) -> Result<Self> {
        let parse_err = |line: u64, column: Option<u64>, message: String| Error::Parse {
            path: name.to_string(),
            line,
            column,
            message,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| parse_err(1, None, e.to_string()))?.clone();
        let names: Vec<&str> = headers.iter().collect();
        if names.len() < 2 || names[0] != "t_s" || names[1] != "intensity" || names.get(2).is_some_and(|s| *s != "sigma") {
            let line = headers.position().map_or(1, |p| p.line());
            return Err(parse_err(line, Some(1), format!("expected header t_s,intensity,sigma, got {:?}", names.join(","))));
        }
        let (mut t, mut y, mut s) = (vec![], vec![], vec![]);
        let mut any_sigma = false;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(line, None, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let mut col = 1u64;
            let mut field = |k: usize, required: bool| -> Result<Option<f64>> {
                let raw = rec.get(k).unwrap_or("");
                let at = col;
                col += raw.chars().count() as u64 + 1;
                if raw.is_empty() {
                    return if required {
                        Err(parse_err(line, Some(at), format!("missing {}", ["t_s", "intensity", "sigma"][k])))
                    } else {
                        Ok(None)
                    };
                }
                raw.parse::<f64>()
                    .map(Some)
                    .map_err(|_| parse_err(line, Some(at), format!("not a number: {raw:?}")))
            };
            t.push(field(0, true)?.unwrap_or_default());
            y.push(field(1, true)?.unwrap_or_default());
            match field(2, false)? {
                Some(v) => {
                    any_sigma = true;
                    s.push(v);
                }
                None => s.push(f64::NAN),
            }
        }
        if t.is_empty() {
            return Err(Error::Config {
                path: name.to_string(),
                message: "trace has no data rows".into(),
            });
        }
        let sigmas = if any_sigma {
            if s.iter().any(|v| v.is_nan()) {
                return Err(Error::Config {
                    path: name.to_string(),
                    message: "sigma must be given on every row or on none".into(),
                });
            }
            Some(s)
        } else {
            None
        };
        EchoTrace::new(t, y, sigmas, meta).map_err(|e| Error::Config {
            path: name.to_string(),
            message: e.to_string(),
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t_s,intensity,sigma")?;
        for i in 0..self.len() {
            match &self.sigmas {
                Some(s) => writeln!(out, "{:e},{:e},{:e}", self.times[i], self.intensities[i], s[i])?,
                None => writeln!(out, "{:e},{:e},", self.times[i], self.intensities[i])?,
            }
        }
        Ok(())
    }
}

//! Per-parameter strength bounds: each parameter is swept on its own, with
//! the rest of its perturbation held neutral, until the mean IoU
//! deterioration first exceeds a small target.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::io::write_file;
use crate::harness::Scorer;
use crate::perturb::{
    apply, neutral_params, ParamBound, ParamBounds, PerturbationKind, PerturbationSpec, Registry,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub grid_points: usize,
    pub target: f64,
    /// Extra measurements inside the bracketing grid interval. With 0 the
    /// bound is the plain linear interpolation between the two grid points.
    pub refine_steps: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            grid_points: 16,
            target: 0.01,
            refine_steps: 10,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points < 2 {
            return Err(Error::invalid("grid_points must be at least 2"));
        }
        if !(self.target > 0.0 && self.target < 1.0) {
            return Err(Error::invalid(format!(
                "target {} not in (0, 1)",
                self.target
            )));
        }
        Ok(())
    }
}

/// Stop refining once the kept point is within this fraction of the target.
const REFINE_TOLERANCE: f64 = 0.25;

/// Sweeps from `neutral` to `end` and returns the bound in that direction.
/// `measure` maps a parameter value to mean deterioration.
pub fn sweep<M>(neutral: f64, end: f64, cfg: &CalibrationConfig, measure: &mut M) -> Result<f64>
where
    M: FnMut(f64) -> Result<f64>,
{
    cfg.validate()?;
    if neutral == end {
        return Ok(neutral);
    }
    let steps = (cfg.grid_points - 1) as f64;
    let mut checked = |v: f64| -> Result<f64> {
        let d = measure(v)?;
        if d.is_finite() {
            Ok(d)
        } else {
            Err(Error::NonFinite {
                value: d,
                genome: vec![v],
            })
        }
    };
    let (mut lo, mut dlo) = (neutral, 0.0);
    for i in 1..cfg.grid_points {
        let v = if i + 1 == cfg.grid_points {
            end
        } else {
            neutral + (end - neutral) * (i as f64 / steps)
        };
        let d = checked(v)?;
        if d <= cfg.target {
            (lo, dlo) = (v, d);
            continue;
        }
        let (mut hi, dhi) = (v, d);
        let interp = |lo: f64, dlo: f64, hi: f64, dhi: f64| {
            lo + (cfg.target - dlo) / (dhi - dlo) * (hi - lo)
        };
        if cfg.refine_steps == 0 {
            return Ok(interp(lo, dlo, hi, dhi));
        }
        // Illinois regula falsi on d(v) - target, keeping lo on the safe
        // side; (wlo, whi) are the possibly damped values used for the step
        let (mut wlo, mut whi) = (dlo, dhi);
        let mut last_kept_lo = None;
        for _ in 0..cfg.refine_steps {
            if cfg.target - dlo <= REFINE_TOLERANCE * cfg.target {
                break;
            }
            let v = interp(lo, wlo, hi, whi);
            if v <= lo.min(hi) || v >= lo.max(hi) {
                break;
            }
            let d = checked(v)?;
            let kept_lo = d <= cfg.target;
            if kept_lo {
                (lo, dlo, wlo) = (v, d, d);
                if last_kept_lo == Some(true) {
                    whi = cfg.target + (whi - cfg.target) / 2.0;
                }
            } else {
                (hi, whi) = (v, d);
                if last_kept_lo == Some(false) {
                    wlo = cfg.target - (cfg.target - wlo) / 2.0;
                }
            }
            last_kept_lo = Some(kept_lo);
        }
        return Ok(lo);
    }
    Ok(end)
}

/// Calibrates parameter `index` of `spec` against `measure`, which receives a
/// full parameter vector for the perturbation.
pub fn calibrate_param_with<M>(
    spec: &PerturbationSpec,
    index: usize,
    cfg: &CalibrationConfig,
    mut measure: M,
) -> Result<ParamBound>
where
    M: FnMut(&[f64]) -> Result<f64>,
{
    let p = spec
        .params()
        .get(index)
        .ok_or_else(|| Error::invalid(format!("`{}` has no parameter #{index}", spec.name())))?;
    let mut params = neutral_params(spec);
    let mut at = |v: f64| {
        params[index] = v;
        measure(&params)
    };
    let calibrated_max = sweep(p.neutral, p.hard_max, cfg, &mut at)?;
    let calibrated_min = sweep(p.neutral, p.hard_min, cfg, &mut at)?;
    Ok(ParamBound {
        neutral: p.neutral,
        calibrated_min,
        calibrated_max,
    })
}

/// Mean deterioration over the scorer's samples with a single perturbation.
pub fn measure_single(scorer: &Scorer<'_>, spec: &PerturbationSpec, params: &[f64]) -> Result<f64> {
    scorer.deterioration(|s, seed| apply(spec, params, &s.image, &s.mask, seed))
}

pub fn calibrate_param(
    spec: &PerturbationSpec,
    index: usize,
    cfg: &CalibrationConfig,
    scorer: &Scorer<'_>,
) -> Result<ParamBound> {
    calibrate_param_with(spec, index, cfg, |params| {
        measure_single(scorer, spec, params)
    })
}

/// Calibration output as persisted between runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsFile {
    pub target: f64,
    pub grid_points: usize,
    /// Perturbations disabled at calibration time. They are calibrated
    /// anyway so the file stays usable if they are re-enabled.
    pub disabled: Vec<PerturbationKind>,
    pub bounds: ParamBounds,
}

impl BoundsFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        write_file(path, json)
    }
}

pub fn calibrate_all(
    registry: &Registry,
    cfg: &CalibrationConfig,
    scorer: &Scorer<'_>,
) -> Result<BoundsFile> {
    cfg.validate()?;
    let mut bounds = ParamBounds::default();
    for spec in registry.specs() {
        for (i, p) in spec.params().iter().enumerate() {
            let b = calibrate_param(spec, i, cfg, scorer)?;
            log::debug!(
                "{}.{}: [{}, {}]",
                spec.name(),
                p.name,
                b.calibrated_min,
                b.calibrated_max
            );
            bounds.insert(spec.name(), &p.name, b);
        }
    }
    bounds.validate(registry)?;
    Ok(BoundsFile {
        target: cfg.target,
        grid_points: cfg.grid_points,
        disabled: registry.disabled().collect(),
        bounds,
    })
}

//! Registry of parameterised natural perturbations.
//!
//! Every perturbation maps `(Image, Mask, params, seed)` to a new
//! `(Image, Mask)`. Only the geometric ones (affine, zoom, padding) touch the
//! mask; they resample it nearest-neighbour alongside a bilinear image warp.
//! All randomness comes from a generator seeded with the caller's seed, so an
//! application is a pure function of its inputs.

mod ops;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{Image, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    GaussianBlur,
    MotionBlur,
    GaussianNoise,
    ImpulseNoise,
    Brightness,
    Contrast,
    Fog,
    Rain,
    Snow,
    Affine,
    Zoom,
    Padding,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 12] = [
        PerturbationKind::GaussianBlur,
        PerturbationKind::MotionBlur,
        PerturbationKind::GaussianNoise,
        PerturbationKind::ImpulseNoise,
        PerturbationKind::Brightness,
        PerturbationKind::Contrast,
        PerturbationKind::Fog,
        PerturbationKind::Rain,
        PerturbationKind::Snow,
        PerturbationKind::Affine,
        PerturbationKind::Zoom,
        PerturbationKind::Padding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationKind::GaussianBlur => "gaussian_blur",
            PerturbationKind::MotionBlur => "motion_blur",
            PerturbationKind::GaussianNoise => "gaussian_noise",
            PerturbationKind::ImpulseNoise => "impulse_noise",
            PerturbationKind::Brightness => "brightness",
            PerturbationKind::Contrast => "contrast",
            PerturbationKind::Fog => "fog",
            PerturbationKind::Rain => "rain",
            PerturbationKind::Snow => "snow",
            PerturbationKind::Affine => "affine",
            PerturbationKind::Zoom => "zoom",
            PerturbationKind::Padding => "padding",
        }
    }

    pub fn is_geometric(self) -> bool {
        matches!(
            self,
            PerturbationKind::Affine | PerturbationKind::Zoom | PerturbationKind::Padding
        )
    }

    /// The default schema. Ranges are wide enough that calibration, not the
    /// hard limit, is what normally bounds a parameter.
    pub fn default_schema(self) -> Vec<ParamSpec> {
        use ParamKind::{Continuous as C, Integer as I};
        let p = ParamSpec::new;
        match self {
            PerturbationKind::GaussianBlur => vec![p("radius", C, 0.0, 0.0, 4.0)],
            PerturbationKind::MotionBlur => vec![
                p("length", C, 0.0, 0.0, 16.0),
                p("angle", C, 0.0, 0.0, 180.0),
            ],
            PerturbationKind::GaussianNoise => vec![p("sigma", C, 0.0, 0.0, 0.5)],
            PerturbationKind::ImpulseNoise => vec![p("amount", C, 0.0, 0.0, 0.3)],
            PerturbationKind::Brightness => vec![p("delta", C, 0.0, -0.6, 0.6)],
            PerturbationKind::Contrast => vec![p("factor", C, 1.0, 0.1, 3.0)],
            PerturbationKind::Fog => vec![p("thickness", C, 0.0, 0.0, 1.0)],
            PerturbationKind::Rain => vec![
                p("opaqueness", C, 0.7, 0.0, 1.0),
                p("size", I, 1.0, 1.0, 4.0),
                p("density", C, 0.0, 0.0, 0.05),
                p("blur", C, 0.0, 0.0, 2.0),
                p("angle", C, 0.0, -45.0, 45.0),
                p("speed", C, 6.0, 1.0, 20.0),
            ],
            PerturbationKind::Snow => vec![
                p("density", C, 0.0, 0.0, 0.05),
                p("flake_radius", C, 1.5, 0.5, 3.0),
            ],
            PerturbationKind::Affine => vec![
                p("rotation", C, 0.0, -30.0, 30.0),
                p("scale", C, 1.0, 0.6, 1.4),
                p("shear", C, 0.0, -0.4, 0.4),
                p("dx", C, 0.0, -24.0, 24.0),
                p("dy", C, 0.0, -24.0, 24.0),
            ],
            PerturbationKind::Zoom => vec![
                p("cx", C, 0.5, 0.0, 1.0),
                p("cy", C, 0.5, 0.0, 1.0),
                p("scale", C, 1.0, 1.0, 2.5),
            ],
            PerturbationKind::Padding => {
                vec![p("pad_x", C, 0.0, 0.0, 0.4), p("pad_y", C, 0.0, 0.0, 0.4)]
            }
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownPerturbation(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Continuous,
    Integer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub neutral: f64,
    pub hard_min: f64,
    pub hard_max: f64,
}

impl ParamSpec {
    pub fn new(name: &str, kind: ParamKind, neutral: f64, hard_min: f64, hard_max: f64) -> Self {
        Self {
            name: name.to_string(),
            kind,
            neutral,
            hard_min,
            hard_max,
        }
    }

    /// Value as seen by the kernel: integers are rounded half away from zero.
    #[inline]
    pub fn resolve(&self, v: f64) -> f64 {
        match self.kind {
            ParamKind::Continuous => v,
            ParamKind::Integer => v.round(),
        }
    }

    pub fn neutral_is_interior(&self) -> bool {
        self.hard_min < self.neutral && self.neutral < self.hard_max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct PerturbationSpec {
    kind: PerturbationKind,
    params: Vec<ParamSpec>,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    name: String,
    geometric: bool,
    params: Vec<ParamSpec>,
}

impl PerturbationSpec {
    pub fn builtin(kind: PerturbationKind) -> Self {
        Self {
            kind,
            params: kind.default_schema(),
        }
    }

    /// A spec with a customised schema. Parameter names and kinds must match
    /// the built-in kernel; only neutral values and hard ranges may differ.
    pub fn with_params(kind: PerturbationKind, params: Vec<ParamSpec>) -> Result<Self> {
        let reference = kind.default_schema();
        if reference.len() != params.len()
            || reference
                .iter()
                .zip(&params)
                .any(|(r, p)| r.name != p.name || r.kind != p.kind)
        {
            return Err(Error::invalid(format!(
                "schema for `{kind}` must list parameters {:?}",
                reference.iter().map(|p| &p.name).collect::<Vec<_>>()
            )));
        }
        for p in &params {
            if !(p.hard_min <= p.neutral && p.neutral <= p.hard_max) || !p.neutral.is_finite() {
                return Err(Error::invalid(format!(
                    "`{kind}.{}`: need hard_min <= neutral <= hard_max, got {} <= {} <= {}",
                    p.name, p.hard_min, p.neutral, p.hard_max
                )));
            }
        }
        Ok(Self { kind, params })
    }

    pub fn kind(&self) -> PerturbationKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.as_str()
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn geometric(&self) -> bool {
        self.kind.is_geometric()
    }
}

impl TryFrom<RawSpec> for PerturbationSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        let kind: PerturbationKind = raw.name.parse()?;
        if raw.geometric != kind.is_geometric() {
            return Err(Error::invalid(format!(
                "`{kind}` has geometric = {}, not {}",
                kind.is_geometric(),
                raw.geometric
            )));
        }
        Self::with_params(kind, raw.params)
    }
}

impl From<PerturbationSpec> for RawSpec {
    fn from(s: PerturbationSpec) -> Self {
        RawSpec {
            name: s.name().to_string(),
            geometric: s.geometric(),
            params: s.params,
        }
    }
}

pub fn neutral_params(spec: &PerturbationSpec) -> Vec<f64> {
    spec.params.iter().map(|p| p.neutral).collect()
}

/// Applies one perturbation.
///
/// Parameters outside the hard range are rejected. At neutral parameters
/// the inputs are returned unchanged.
pub fn apply(
    spec: &PerturbationSpec,
    params: &[f64],
    img: &Image,
    mask: &Mask,
    seed: u64,
) -> Result<(Image, Mask)> {
    if img.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: img.dims(),
            actual: mask.dims(),
        });
    }
    if params.len() != spec.params.len() {
        return Err(Error::invalid(format!(
            "`{}` takes {} parameters, got {}",
            spec.name(),
            spec.params.len(),
            params.len()
        )));
    }
    let mut resolved = [0.0f64; 8];
    let mut at_neutral = true;
    for (i, (p, &v)) in spec.params.iter().zip(params).enumerate() {
        if !(p.hard_min..=p.hard_max).contains(&v) {
            return Err(Error::ParamOutOfRange {
                perturbation: spec.name().to_string(),
                param: p.name.clone(),
                value: v,
                min: p.hard_min,
                max: p.hard_max,
            });
        }
        resolved[i] = p.resolve(v);
        at_neutral &= resolved[i] == p.resolve(p.neutral);
    }
    if at_neutral {
        return Ok((img.clone(), mask.clone()));
    }
    let r = &resolved[..params.len()];
    let out = match spec.kind {
        PerturbationKind::GaussianBlur => (ops::gaussian_blur(img, r[0]), mask.clone()),
        PerturbationKind::MotionBlur => (ops::motion_blur(img, r[0], r[1]), mask.clone()),
        PerturbationKind::GaussianNoise => (ops::gaussian_noise(img, r[0], seed), mask.clone()),
        PerturbationKind::ImpulseNoise => (ops::impulse_noise(img, r[0], seed), mask.clone()),
        PerturbationKind::Brightness => (ops::brightness(img, r[0]), mask.clone()),
        PerturbationKind::Contrast => (ops::contrast(img, r[0]), mask.clone()),
        PerturbationKind::Fog => (ops::fog(img, r[0], seed), mask.clone()),
        PerturbationKind::Rain => (
            ops::rain(
                img,
                &ops::RainParams {
                    opaqueness: r[0],
                    size: r[1],
                    density: r[2],
                    blur: r[3],
                    angle_deg: r[4],
                    speed: r[5],
                },
                seed,
            ),
            mask.clone(),
        ),
        PerturbationKind::Snow => (ops::snow(img, r[0], r[1], seed), mask.clone()),
        PerturbationKind::Affine => ops::affine(img, mask, r[0], r[1], r[2], r[3], r[4]),
        PerturbationKind::Zoom => ops::zoom(img, mask, r[0], r[1], r[2]),
        PerturbationKind::Padding => ops::padding(img, mask, r[0], r[1]),
    };
    Ok(out)
}

/// The ordered set of perturbations available to a run, plus the names
/// disabled for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRegistry", into = "RawRegistry")]
pub struct Registry {
    specs: Vec<PerturbationSpec>,
    disabled: BTreeSet<PerturbationKind>,
}

#[derive(Serialize, Deserialize)]
struct RawRegistry {
    perturbations: Vec<PerturbationSpec>,
    #[serde(default)]
    disabled: Vec<String>,
}

impl Registry {
    pub const SIZE: usize = 12;

    pub fn builtin() -> Self {
        Self {
            specs: PerturbationKind::ALL
                .into_iter()
                .map(PerturbationSpec::builtin)
                .collect(),
            disabled: BTreeSet::new(),
        }
    }

    pub fn new(specs: Vec<PerturbationSpec>) -> Result<Self> {
        if specs.len() != Self::SIZE {
            return Err(Error::invalid(format!(
                "registry needs exactly {} perturbations, got {}",
                Self::SIZE,
                specs.len()
            )));
        }
        let names: BTreeSet<_> = specs.iter().map(|s| s.kind).collect();
        if names.len() != specs.len() {
            return Err(Error::invalid("duplicate perturbation in registry"));
        }
        Ok(Self {
            specs,
            disabled: BTreeSet::new(),
        })
    }

    pub fn specs(&self) -> &[PerturbationSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn get(&self, kind: PerturbationKind) -> &PerturbationSpec {
        self.specs
            .iter()
            .find(|s| s.kind == kind)
            .expect("registry holds every perturbation kind")
    }

    pub fn by_name(&self, name: &str) -> Result<&PerturbationSpec> {
        let kind: PerturbationKind = name.parse()?;
        Ok(self.get(kind))
    }

    pub fn index_of(&self, kind: PerturbationKind) -> usize {
        self.specs.iter().position(|s| s.kind == kind).unwrap()
    }

    pub fn disable(&mut self, kind: PerturbationKind) {
        self.disabled.insert(kind);
    }

    pub fn with_disabled(&self, kinds: impl IntoIterator<Item = PerturbationKind>) -> Self {
        let mut r = self.clone();
        r.disabled.extend(kinds);
        r
    }

    pub fn is_disabled(&self, kind: PerturbationKind) -> bool {
        self.disabled.contains(&kind)
    }

    pub fn disabled(&self) -> impl Iterator<Item = PerturbationKind> + '_ {
        self.disabled.iter().copied()
    }

    pub fn enabled_count(&self) -> usize {
        self.specs.len() - self.disabled.len()
    }

    /// Total number of perturbation parameters across the registry.
    pub fn param_count(&self) -> usize {
        self.specs.iter().map(|s| s.params.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TryFrom<RawRegistry> for Registry {
    type Error = Error;

    fn try_from(raw: RawRegistry) -> Result<Self> {
        let mut r = Registry::new(raw.perturbations)?;
        for name in raw.disabled {
            r.disable(name.parse()?);
        }
        Ok(r)
    }
}

impl From<Registry> for RawRegistry {
    fn from(r: Registry) -> Self {
        RawRegistry {
            perturbations: r.specs,
            disabled: r.disabled.iter().map(|k| k.as_str().to_string()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBound {
    pub neutral: f64,
    pub calibrated_min: f64,
    pub calibrated_max: f64,
}

impl ParamBound {
    /// Affine map from `[0, 1]` onto `[calibrated_min, calibrated_max]`,
    /// clamped so rounding never leaves the interval.
    #[inline]
    pub fn denormalize(&self, t: f64) -> f64 {
        let v = self.calibrated_min + t * (self.calibrated_max - self.calibrated_min);
        v.clamp(self.calibrated_min, self.calibrated_max)
    }
}

/// Calibrated limits per perturbation parameter, keyed by perturbation name
/// and then parameter name, both in registry order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamBounds(IndexMap<String, IndexMap<String, ParamBound>>);

impl ParamBounds {
    /// Bounds equal to the hard ranges of `registry`.
    pub fn hard(registry: &Registry) -> Self {
        let mut b = ParamBounds::default();
        for spec in registry.specs() {
            for p in spec.params() {
                b.insert(
                    spec.name(),
                    &p.name,
                    ParamBound {
                        neutral: p.neutral,
                        calibrated_min: p.hard_min,
                        calibrated_max: p.hard_max,
                    },
                );
            }
        }
        b
    }

    pub fn insert(&mut self, perturbation: &str, param: &str, bound: ParamBound) {
        self.0
            .entry(perturbation.to_string())
            .or_default()
            .insert(param.to_string(), bound);
    }

    pub fn get(&self, perturbation: &str, param: &str) -> Option<&ParamBound> {
        self.0.get(perturbation).and_then(|m| m.get(param))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &ParamBound)> {
        self.0.iter().flat_map(|(name, params)| {
            params
                .iter()
                .map(move |(p, b)| (name.as_str(), p.as_str(), b))
        })
    }

    /// Bounds for every parameter of `spec`, in schema order.
    pub fn for_spec(&self, spec: &PerturbationSpec) -> Result<Vec<ParamBound>> {
        spec.params()
            .iter()
            .map(|p| {
                self.get(spec.name(), &p.name).copied().ok_or_else(|| {
                    Error::invalid(format!("no bound for `{}.{}`", spec.name(), p.name))
                })
            })
            .collect()
    }

    /// Checks `neutral ∈ [calibrated_min, calibrated_max] ⊆ [hard_min, hard_max]`
    /// for every parameter in `registry`.
    pub fn validate(&self, registry: &Registry) -> Result<()> {
        for spec in registry.specs() {
            for (p, b) in spec.params().iter().zip(self.for_spec(spec)?) {
                let ok = p.hard_min <= b.calibrated_min
                    && b.calibrated_min <= b.neutral
                    && b.neutral <= b.calibrated_max
                    && b.calibrated_max <= p.hard_max;
                if !ok {
                    return Err(Error::invalid(format!(
                        "bound for `{}.{}` violates hard_min <= min <= neutral <= max <= hard_max: \
                         {} <= {} <= {} <= {} <= {}",
                        spec.name(),
                        p.name,
                        p.hard_min,
                        b.calibrated_min,
                        b.neutral,
                        b.calibrated_max,
                        p.hard_max
                    )));
                }
            }
        }
        Ok(())
    }
}

//! Independent scalar priors for each parameter slot.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Uniform};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::function::gamma::ln_gamma;

use crate::data::{ParameterLayout, ParameterVector};
use crate::error::{Error, Result};

/// One scalar prior.
///
/// `Gamma` uses shape `a` and scale `k`: `x^{a−1} e^{−x/k} / (k^a Γ(a))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorSpec {
    Gaussian { mean: f64, var: f64 },
    Gamma { shape: f64, scale: f64 },
    Unif { lower: f64, upper: f64 },
}

impl PriorSpec {
    pub fn gaussian(mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0 && var.is_finite() && mean.is_finite()) {
            return Err(Error::domain(format!("gaussian prior needs finite m and V > 0, got ({mean}, {var})")));
        }
        Ok(Self::Gaussian { mean, var })
    }

    pub fn gamma(shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()) {
            return Err(Error::domain(format!("gamma prior needs a > 0 and k > 0, got ({shape}, {scale})")));
        }
        Ok(Self::Gamma { shape, scale })
    }

    pub fn unif(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper && lower.is_finite() && upper.is_finite()) {
            return Err(Error::domain(format!("unif prior needs a < b, got ({lower}, {upper})")));
        }
        Ok(Self::Unif { lower, upper })
    }

    pub fn family(&self) -> &'static str {
        match self {
            Self::Gaussian { .. } => "gaussian",
            Self::Gamma { .. } => "gamma",
            Self::Unif { .. } => "unif",
        }
    }

    pub fn params(&self) -> [f64; 2] {
        match *self {
            Self::Gaussian { mean, var } => [mean, var],
            Self::Gamma { shape, scale } => [shape, scale],
            Self::Unif { lower, upper } => [lower, upper],
        }
    }

    pub fn from_parts(family: &str, opt: &[f64]) -> Result<Self> {
        let [a, b] = <[f64; 2]>::try_from(opt).map_err(|_| {
            Error::structural(format!("prior {family:?} takes two parameters, got {}", opt.len()))
        })?;
        match family {
            "gaussian" => Self::gaussian(a, b),
            "gamma" => Self::gamma(a, b),
            "unif" => Self::unif(a, b),
            other => Err(Error::domain(format!(
                "unknown prior family {other:?}; expected gaussian, gamma or unif"
            ))),
        }
    }

    /// Log density; `−∞` outside the support.
    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            Self::Gaussian { mean, var } => -0.5 * (2.0 * PI * var).ln() - 0.5 * (x - mean).powi(2) / var,
            Self::Gamma { shape, scale } => {
                if !(x > 0.0) {
                    return f64::NEG_INFINITY;
                }
                (shape - 1.0) * x.ln() - x / scale - shape * scale.ln() - ln_gamma(shape)
            }
            Self::Unif { lower, upper } => {
                if x >= lower && x <= upper {
                    -(upper - lower).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Gaussian { mean, var } => Normal::new(mean, var.sqrt()).expect("validated").sample(rng),
            Self::Gamma { shape, scale } => Gamma::new(shape, scale).expect("validated").sample(rng),
            Self::Unif { lower, upper } => Uniform::new_inclusive(lower, upper).expect("validated").sample(rng),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Self::Gaussian { mean, .. } => mean,
            Self::Gamma { shape, scale } => shape * scale,
            Self::Unif { lower, upper } => 0.5 * (lower + upper),
        }
    }

    pub fn std_dev(&self) -> f64 {
        match *self {
            Self::Gaussian { var, .. } => var.sqrt(),
            Self::Gamma { shape, scale } => shape.sqrt() * scale,
            Self::Unif { lower, upper } => (upper - lower) / 12f64.sqrt(),
        }
    }

    /// True when the support lies inside `[0, ∞)`.
    pub fn nonnegative_support(&self) -> bool {
        match *self {
            Self::Gaussian { .. } => false,
            Self::Gamma { .. } => true,
            Self::Unif { lower, .. } => lower >= 0.0,
        }
    }

    /// An interval holding essentially all of the mass, for plotting and quadrature.
    pub fn covering_interval(&self) -> (f64, f64) {
        match *self {
            Self::Gaussian { mean, var } => {
                let s = var.sqrt();
                (mean - 8.0 * s, mean + 8.0 * s)
            }
            Self::Gamma { shape, scale } => {
                let hi = shape * scale + 12.0 * shape.sqrt() * scale + 30.0 * scale;
                (0.0, hi)
            }
            Self::Unif { lower, upper } => (lower, upper),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PriorJson {
    #[serde(rename = "type")]
    family: String,
    opt: Vec<f64>,
}

impl Serialize for PriorSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PriorJson {
            family: self.family().into(),
            opt: self.params().to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PriorSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = PriorJson::deserialize(d)?;
        PriorSpec::from_parts(&j.family, &j.opt).map_err(D::Error::custom)
    }
}

/// One prior per parameter slot, validated against a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    priors: Vec<PriorSpec>,
    layout: ParameterLayout,
}

impl PriorSet {
    pub fn new(priors: Vec<PriorSpec>, layout: ParameterLayout) -> Result<Self> {
        let names = layout.names();
        if priors.len() != layout.total() {
            let missing = names.get(priors.len()).map_or(String::new(), |n| format!(" (first missing slot: {n})"));
            return Err(Error::structural(format!(
                "{} priors given for {} parameter slots{missing}",
                priors.len(),
                layout.total()
            )));
        }
        for slot in layout.positive_slots() {
            if !priors[slot].nonnegative_support() {
                return Err(Error::domain(format!(
                    "prior for {} must have nonnegative support (gamma, or unif with a >= 0), got {}",
                    names[slot],
                    priors[slot].family()
                )));
            }
        }
        Ok(Self { priors, layout })
    }

    pub fn priors(&self) -> &[PriorSpec] {
        &self.priors
    }

    pub fn layout(&self) -> ParameterLayout {
        self.layout
    }

    /// Sum of slot log densities of a raw slot vector.
    pub fn log_density(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.priors.len() {
            return Err(Error::structural(format!(
                "{} values for {} priors",
                values.len(),
                self.priors.len()
            )));
        }
        let mut total = 0.0;
        for (p, &x) in self.priors.iter().zip(values) {
            let l = p.log_density(x);
            if l == f64::NEG_INFINITY {
                return Ok(l);
            }
            total += l;
        }
        Ok(total)
    }

    pub fn log_prior_total(&self, v: &ParameterVector) -> Result<f64> {
        if v.layout() != self.layout {
            return Err(Error::structural("parameter vector layout differs from the prior set"));
        }
        self.log_density(v.values())
    }

    /// Independent draws from every slot.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterVector {
        let mut values: Vec<f64> = self.priors.iter().map(|p| p.sample(rng)).collect();
        // A zero draw from unif(0, b) would violate strict positivity.
        for slot in self.layout.positive_slots() {
            if values[slot] <= 0.0 {
                values[slot] = f64::MIN_POSITIVE;
            }
        }
        ParameterVector::new(values, self.layout).expect("draws lie in the prior support")
    }

    pub fn std_devs(&self) -> Vec<f64> {
        self.priors.iter().map(PriorSpec::std_dev).collect()
    }

    pub fn means(&self) -> Vec<f64> {
        self.priors.iter().map(PriorSpec::mean).collect()
    }
}

/// Draws one parameter vector from a prior set using a seeded stream.
pub fn sample_prior(set: &PriorSet, seed: u64) -> ParameterVector {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    set.sample(&mut rng)
}

//! Semantic/variation disentangler.
//!
//! A generator splits an image into a semantic code `s` and a variation code
//! `v` and decodes any `(s, v)` pair back to an image. Swapping in a freshly
//! sampled `v` moves a sample to a random domain; blending the semantic codes
//! of two differently labelled samples yields synthetic outliers.

mod learned;
mod oracle;

pub use learned::{train_generator, GeneratorTrainConfig, LearnedGenerator};
pub use oracle::OracleGenerator;

use serde::{Deserialize, Serialize};

use crate::datasets::{ColoredSample, Label};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticCode(pub Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct VariationCode(pub Tensor);

pub trait Generator: Send + Sync {
    fn encode_semantic(&self, x: &Tensor) -> Result<SemanticCode>;

    fn encode_variation(&self, x: &Tensor) -> Result<VariationCode>;

    /// Decodes to a `[3 × 28 × 28]` image clamped to `[0, 1]`.
    fn decode(&self, s: &SemanticCode, v: &VariationCode) -> Result<Tensor>;

    /// A variation code for a random domain, derived from `v ~ N(0, I)`.
    fn sample_variation(&self, rng: &mut RngStream) -> VariationCode;

    /// `Dec(E_sem(x), v')` with a freshly sampled `v'`.
    fn domain_transfer(&self, x: &Tensor, rng: &mut RngStream) -> Result<Tensor> {
        let s = self.encode_semantic(x)?;
        let v = self.sample_variation(rng);
        self.decode(&s, &v)
    }
}

/// Either generator mode behind one type.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum GenerativeModel {
    Oracle(OracleGenerator),
    Learned(LearnedGenerator),
}

impl GenerativeModel {
    fn inner(&self) -> &dyn Generator {
        match self {
            GenerativeModel::Oracle(g) => g,
            GenerativeModel::Learned(g) => g,
        }
    }
}

impl Generator for GenerativeModel {
    fn encode_semantic(&self, x: &Tensor) -> Result<SemanticCode> {
        self.inner().encode_semantic(x)
    }

    fn encode_variation(&self, x: &Tensor) -> Result<VariationCode> {
        self.inner().encode_variation(x)
    }

    fn decode(&self, s: &SemanticCode, v: &VariationCode) -> Result<Tensor> {
        self.inner().decode(s, v)
    }

    fn sample_variation(&self, rng: &mut RngStream) -> VariationCode {
        self.inner().sample_variation(rng)
    }

    fn domain_transfer(&self, x: &Tensor, rng: &mut RngStream) -> Result<Tensor> {
        self.inner().domain_transfer(x, rng)
    }
}

/// How blend coefficients are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlendLaw {
    /// `|c|` log-uniform in `[min, max]` with an independent random sign.
    LogUniformMagnitude {
        min: f64,
        max: f64,
    },
    /// Uniform over the allowed ranges.
    Uniform,
    Fixed {
        alpha: f64,
        beta: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendSpec {
    pub alpha_range: [f64; 2],
    pub beta_range: [f64; 2],
    pub law: BlendLaw,
}

impl Default for BlendSpec {
    fn default() -> Self {
        BlendSpec {
            alpha_range: [-100.0, 100.0],
            beta_range: [-100.0, 100.0],
            law: BlendLaw::LogUniformMagnitude {
                min: 0.25,
                max: 4.0,
            },
        }
    }
}

impl BlendSpec {
    pub fn fixed(alpha: f64, beta: f64) -> Self {
        BlendSpec {
            law: BlendLaw::Fixed { alpha, beta },
            ..BlendSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for r in [self.alpha_range, self.beta_range] {
            if r[0].is_nan() || r[1].is_nan() || r[0] > r[1] {
                return Err(Error::Config(format!("blend range {r:?} is not ordered")));
            }
        }
        match self.law {
            BlendLaw::LogUniformMagnitude { min, max } if !(min > 0.0 && min <= max) => {
                Err(Error::Config(format!(
                    "log-uniform blend magnitudes need 0 < min <= max, got [{min}, {max}]"
                )))
            }
            BlendLaw::Fixed { alpha, beta }
                if !(self.alpha_range[0]..=self.alpha_range[1]).contains(&alpha)
                    || !(self.beta_range[0]..=self.beta_range[1]).contains(&beta) =>
            {
                Err(Error::Config(format!(
                    "fixed blend ({alpha}, {beta}) outside allowed ranges"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Draws `(α, β)` within the configured ranges.
    pub fn sample(&self, rng: &mut RngStream) -> (f64, f64) {
        let clip = |v: f64, r: [f64; 2]| v.clamp(r[0], r[1]);
        match self.law {
            BlendLaw::Fixed { alpha, beta } => (alpha, beta),
            BlendLaw::Uniform => (
                rng.uniform_in(self.alpha_range[0], self.alpha_range[1]),
                rng.uniform_in(self.beta_range[0], self.beta_range[1]),
            ),
            BlendLaw::LogUniformMagnitude { min, max } => {
                let mut draw = || {
                    let mag = (rng.uniform_in(min.ln(), max.ln())).exp();
                    if rng.coin() {
                        mag
                    } else {
                        -mag
                    }
                };
                let (a, b) = (draw(), draw());
                (clip(a, self.alpha_range), clip(b, self.beta_range))
            }
        }
    }
}

/// `α·s1 + β·s2`.
pub fn blend_semantics(
    s1: &SemanticCode,
    s2: &SemanticCode,
    alpha: f64,
    beta: f64,
) -> Result<SemanticCode> {
    if s1.0.shape() != s2.0.shape() {
        return Err(Error::shape("blend_semantics", s1.0.shape(), s2.0.shape()));
    }
    let data =
        s1.0.data()
            .iter()
            .zip(s2.0.data())
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
    Ok(SemanticCode(Tensor::new(s1.0.shape().to_vec(), data)?))
}

/// Synthetic outlier from two ID samples with different labels.
pub fn synth_ood<G: Generator + ?Sized>(
    generator: &G,
    x1: &ColoredSample,
    x2: &ColoredSample,
    blend: &BlendSpec,
    rng: &mut RngStream,
) -> Result<Tensor> {
    match (x1.label, x2.label) {
        (Label::Id(a), Label::Id(b)) if a != b => {}
        (a, b) => {
            return Err(Error::Contract(format!(
                "synthetic OOD needs two ID samples with different labels, got {a:?} and {b:?}"
            )))
        }
    }
    let s1 = generator.encode_semantic(&x1.image)?;
    let s2 = generator.encode_semantic(&x2.image)?;
    let (alpha, beta) = blend.sample(rng);
    let blended = blend_semantics(&s1, &s2, alpha, beta)?;
    let v = generator.sample_variation(rng);
    generator.decode(&blended, &v)
}

/// One synthetic outlier per batch member, each paired with a differently
/// labelled partner from the batch, or from `pool` when the batch has one class.
pub fn synth_ood_batch<G: Generator + ?Sized>(
    generator: &G,
    batch: &[&ColoredSample],
    pool: &[ColoredSample],
    blend: &BlendSpec,
    rng: &mut RngStream,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(batch.len());
    for x in batch {
        let partners: Vec<&ColoredSample> = batch
            .iter()
            .copied()
            .filter(|y| y.label != x.label)
            .collect();
        let partner = if !partners.is_empty() {
            partners[rng.below(partners.len())]
        } else {
            let others: Vec<&ColoredSample> = pool
                .iter()
                .filter(|y| y.label != x.label && !y.label.is_ood())
                .collect();
            if others.is_empty() {
                return Err(Error::Contract(
                    "synthetic OOD needs at least two ID classes".into(),
                ));
            }
            others[rng.below(others.len())]
        };
        out.push(synth_ood(generator, x, partner, blend, rng)?);
    }
    Ok(out)
}

pub(crate) fn clamp_unit(mut t: Tensor) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    t
}

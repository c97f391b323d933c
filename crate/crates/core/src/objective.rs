//! Training objective: cross-entropy plus the feature-invariance regularizer
//! `R_F` and the energy-bounding regularizer `R_E`.
//!
//! `total = ce + ζ1·R_F + ζ2·R_E`, where
//!
//! - `R_F` is the batch mean of `‖g(x) − g(x')‖₁` with `x'` a domain transfer of `x`,
//! - `R_E` is `mean_ID max(0, E − γ)² + mean_OOD max(0, γ − E)²`,
//! - `E(z) = −T·log Σ_k exp(z_k / T)`.

use serde::{Deserialize, Serialize};

use crate::datasets::{ColoredSample, Label};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::network::{BoundNetwork, Network};
use crate::numerics::tensor::log_sum_exp;
use crate::numerics::{RngStream, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub zeta1: f64,
    pub zeta2: f64,
    pub gamma: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    1.0
}

impl LossWeights {
    pub fn new(zeta1: f64, zeta2: f64, gamma: f64, temperature: f64) -> Result<Self> {
        let w = LossWeights {
            zeta1,
            zeta2,
            gamma,
            temperature,
        };
        w.validate()?;
        Ok(w)
    }

    /// Cross-entropy only.
    pub fn erm(gamma: f64) -> Self {
        LossWeights {
            zeta1: 0.0,
            zeta2: 0.0,
            gamma,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zeta1 >= 0.0 && self.zeta2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got zeta1={} zeta2={}",
                self.zeta1, self.zeta2
            )));
        }
        if self.gamma.is_nan() || self.gamma >= 0.0 {
            return Err(Error::Config(format!(
                "energy margin gamma must be negative, got {}",
                self.gamma
            )));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub r_f: f64,
    pub r_e: f64,
    pub total: f64,
}

pub fn l1_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("l1_distance", a.shape(), b.shape()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum())
}

/// `−T·logsumexp(logits / T)`; lower means more ID-like.
pub fn energy(logits: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    -temperature * log_sum_exp(&scaled)
}

/// Energy hinge on plain values. An empty OOD list leaves only the ID term.
pub fn r_energy(id_energies: &[f64], ood_energies: &[f64], gamma: f64) -> f64 {
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|&e| f(e)).sum::<f64>() / v.len() as f64
        }
    };
    mean(id_energies, &|e| (e - gamma).max(0.0).powi(2))
        + mean(ood_energies, &|e| (gamma - e).max(0.0).powi(2))
}

/// A batch of ID images with their class indices.
#[derive(Clone, Debug)]
pub struct IdBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl IdBatch {
    pub fn from_samples(samples: &[&ColoredSample]) -> Result<Self> {
        let mut labels = Vec::with_capacity(samples.len());
        for s in samples {
            match s.label {
                Label::Id(k) => labels.push(k),
                Label::Ood => {
                    return Err(Error::Contract(
                        "OOD-labelled sample in an ID training batch".into(),
                    ));
                }
            }
        }
        let refs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        Ok(IdBatch {
            images: Tensor::stack(&refs)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Domain-transferred copy of every image in a `[n × d]` batch, one fresh `v'` per sample.
pub fn transfer_batch<G: Generator + ?Sized>(
    generator: &G,
    images: &Tensor,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(images.rows());
    for i in 0..images.rows() {
        let x = Tensor::new(vec![3, 28, 28], images.row(i).to_vec())?;
        rows.push(generator.domain_transfer(&x, rng)?.into_data());
    }
    Tensor::from_rows(&rows)
}

/// Records `R_F` on the tape: mean over the batch of `‖g(x) − g(x')‖₁`.
/// Both branches carry gradient.
pub fn r_feature(
    tape: &mut Tape,
    net: &BoundNetwork,
    images: &Tensor,
    transferred: &Tensor,
) -> Result<Var> {
    if images.rows() == 0 {
        return Err(Error::Contract("R_F over an empty batch".into()));
    }
    if images.shape() != transferred.shape() {
        return Err(Error::shape(
            "r_feature",
            images.shape(),
            transferred.shape(),
        ));
    }
    let x = tape.constant(images.clone());
    let xt = tape.constant(transferred.clone());
    let fx = net.features(tape, x)?;
    let ft = net.features(tape, xt)?;
    r_feature_from(tape, fx, ft, images.rows())
}

fn r_feature_from(tape: &mut Tape, fx: Var, ft: Var, n: usize) -> Result<Var> {
    let d = tape.sub(fx, ft)?;
    let a = tape.abs(d);
    let s = tape.sum(a);
    Ok(tape.scale(s, 1.0 / n as f64))
}

fn r_energy_graph(
    tape: &mut Tape,
    id_logits: Var,
    ood_logits: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let e_id = tape.energy(id_logits, w.temperature)?;
    let over = tape.add_scalar(e_id, -w.gamma);
    let hinge = tape.relu(over);
    let sq = tape.square(hinge);
    let id_term = tape.mean(sq);
    let Some(ood_logits) = ood_logits else {
        return Ok(id_term);
    };
    let e_ood = tape.energy(ood_logits, w.temperature)?;
    let neg = tape.scale(e_ood, -1.0);
    let under = tape.add_scalar(neg, w.gamma);
    let hinge = tape.relu(under);
    let sq = tape.square(hinge);
    let ood_term = tape.mean(sq);
    tape.add(id_term, ood_term)
}

/// Auxiliary inputs for the regularizers. `None` skips a term entirely.
#[derive(Clone, Debug, Default)]
pub struct RegularizerInputs {
    /// Domain-transferred copies of the ID batch, for `R_F`.
    pub transferred: Option<Tensor>,
    /// Synthetic outliers, for `R_E`. An empty batch leaves only the ID term.
    pub synthetic_ood: Option<Tensor>,
}

/// The full objective recorded on a tape.
pub struct LossGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Records `ce + ζ1·R_F + ζ2·R_E` for bound network parameters.
///
/// The generator's outputs enter as constants, so no gradient reaches it.
pub fn objective_graph(
    tape: &mut Tape,
    net: &BoundNetwork,
    batch: &IdBatch,
    reg: &RegularizerInputs,
    weights: &LossWeights,
) -> Result<LossGraph> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(Error::Contract("empty ID batch".into()));
    }
    let x = tape.constant(batch.images.clone());
    let fx = net.features(tape, x)?;
    let logits = net.classify(tape, fx)?;
    let ce_rows = tape.cross_entropy(logits, &batch.labels)?;
    let ce = tape.mean(ce_rows);
    let mut total = ce;
    let mut breakdown = LossBreakdown {
        ce: tape.scalar(ce)?,
        ..LossBreakdown::default()
    };

    if let Some(transferred) = &reg.transferred {
        if transferred.shape() != batch.images.shape() {
            return Err(Error::shape(
                "r_feature",
                batch.images.shape(),
                transferred.shape(),
            ));
        }
        let xt = tape.constant(transferred.clone());
        let ft = net.features(tape, xt)?;
        let rf = r_feature_from(tape, fx, ft, batch.len())?;
        breakdown.r_f = tape.scalar(rf)?;
        let weighted = tape.scale(rf, weights.zeta1);
        total = tape.add(total, weighted)?;
    }

    if let Some(ood) = &reg.synthetic_ood {
        let ood_logits = if ood.is_empty() || ood.rows() == 0 {
            log::warn!("empty synthetic OOD batch; energy regularizer uses the ID term only");
            None
        } else {
            let o = tape.constant(ood.clone());
            let fo = net.features(tape, o)?;
            Some(net.classify(tape, fo)?)
        };
        let re = r_energy_graph(tape, logits, ood_logits, weights)?;
        breakdown.r_e = tape.scalar(re)?;
        let weighted = tape.scale(re, weights.zeta2);
        total = tape.add(total, weighted)?;
    }

    breakdown.total = tape.scalar(total)?;
    Ok(LossGraph { total, breakdown })
}

/// Builds the regularizer inputs and records the objective.
///
/// Transfers draw from `rng` first, then the caller-supplied synthetic batch is used as-is.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<G: Generator + ?Sized>(
    tape: &mut Tape,
    batch: &IdBatch,
    synthetic_ood: &Tensor,
    network: &Network,
    generator: &G,
    weights: &LossWeights,
    rng: &mut RngStream,
) -> Result<LossGraph> {
    let bound = network.bind(tape);
    let reg = RegularizerInputs {
        transferred: Some(transfer_batch(generator, &batch.images, rng)?),
        synthetic_ood: Some(synthetic_ood.clone()),
    };
    objective_graph(tape, &bound, batch, &reg, weights)
}

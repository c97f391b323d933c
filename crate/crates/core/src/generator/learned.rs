use serde::{Deserialize, Serialize};

use crate::datasets::{ColoredSample, CHANNELS, COLOR_PIXELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::generator::{clamp_unit, Generator, SemanticCode, VariationCode};
use crate::network::Linear;
use crate::numerics::tensor::{self, Tensor};
use crate::numerics::{Momentum, ParamSet, Parameter, RngStream, Tape, Var};

/// Fully connected autoencoder with separate semantic and variation heads.
///
/// Encoder: `x → ReLU(hidden) → (s, v)`. Decoder: `(s, v) → ReLU(hidden) →
/// sigmoid(pixels)`. Frozen after training; inference never touches a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedGenerator {
    enc_hidden: Linear,
    enc_sem: Linear,
    enc_var: Linear,
    dec_sem: Linear,
    /// Bias-free in effect: its bias stays zero and is not trained.
    dec_var: Linear,
    dec_out: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorTrainConfig {
    pub hidden: usize,
    pub semantic_dim: usize,
    pub variation_dim: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Leading epochs that fit squared rather than absolute error.
    #[serde(default)]
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Weight of the swap-consistency term relative to reconstruction.
    pub swap_weight: f64,
    pub seed: u64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        GeneratorTrainConfig {
            hidden: 256,
            semantic_dim: 32,
            variation_dim: 8,
            lr: 0.05,
            momentum: 0.9,
            epochs: 10,
            warmup_epochs: 5,
            batch_size: 32,
            swap_weight: 0.1,
            seed: 0,
        }
    }
}

/// Output bias starts near the mostly-black background.
fn dark_output(mut layer: Linear) -> Linear {
    layer.bias.value = layer.bias.value.map(|_| -3.0);
    layer
}

struct Bound {
    enc_hidden: (Var, Var),
    enc_sem: (Var, Var),
    enc_var: (Var, Var),
    dec_sem: (Var, Var),
    dec_var: Var,
    dec_out: (Var, Var),
}

impl LearnedGenerator {
    pub fn new(cfg: &GeneratorTrainConfig, rng: &mut RngStream) -> Result<Self> {
        if cfg.hidden == 0 || cfg.semantic_dim == 0 || cfg.variation_dim == 0 {
            return Err(Error::Config(format!(
                "generator dimensions must be positive: {cfg:?}"
            )));
        }
        Ok(LearnedGenerator {
            enc_hidden: Linear::new("gen.enc.hidden", COLOR_PIXELS, cfg.hidden, rng),
            enc_sem: Linear::new("gen.enc.sem", cfg.hidden, cfg.semantic_dim, rng),
            enc_var: Linear::new("gen.enc.var", cfg.hidden, cfg.variation_dim, rng),
            dec_sem: Linear::new("gen.dec.sem", cfg.semantic_dim, cfg.hidden, rng),
            dec_var: Linear::new("gen.dec.var", cfg.variation_dim, cfg.hidden, rng),
            dec_out: dark_output(Linear::new("gen.dec.out", cfg.hidden, COLOR_PIXELS, rng)),
        })
    }

    pub fn from_parameters(params: Vec<Parameter>) -> Result<Self> {
        let mut map: std::collections::BTreeMap<String, Parameter> =
            params.into_iter().map(|p| (p.name.clone(), p)).collect();
        let mut layer = |prefix: &str| -> Result<Linear> {
            let mut take = |suffix: &str| {
                let name = format!("{prefix}.{suffix}");
                map.remove(&name)
                    .ok_or_else(|| Error::Format(format!("generator checkpoint lacks '{name}'")))
            };
            Ok(Linear {
                weight: take("weight")?,
                bias: take("bias")?,
            })
        };
        let g = LearnedGenerator {
            enc_hidden: layer("gen.enc.hidden")?,
            enc_sem: layer("gen.enc.sem")?,
            enc_var: layer("gen.enc.var")?,
            dec_sem: layer("gen.dec.sem")?,
            dec_var: layer("gen.dec.var")?,
            dec_out: layer("gen.dec.out")?,
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!(
                "unexpected generator parameter '{extra}'"
            )));
        }
        if g.enc_hidden.fan_in() != COLOR_PIXELS
            || g.dec_out.fan_out() != COLOR_PIXELS
            || g.enc_sem.fan_in() != g.enc_hidden.fan_out()
            || g.enc_var.fan_in() != g.enc_hidden.fan_out()
            || g.dec_sem.fan_in() != g.enc_sem.fan_out()
            || g.dec_var.fan_in() != g.enc_var.fan_out()
            || g.dec_out.fan_in() != g.dec_sem.fan_out()
            || g.dec_var.fan_out() != g.dec_sem.fan_out()
        {
            return Err(Error::Format(
                "generator checkpoint has inconsistent layer shapes".into(),
            ));
        }
        Ok(g)
    }

    pub fn semantic_dim(&self) -> usize {
        self.enc_sem.fan_out()
    }

    pub fn variation_dim(&self) -> usize {
        self.enc_var.fan_out()
    }

    /// Batched encoder: `[n × 2352] → ([n × d_s], [n × d_v])`.
    pub fn encode_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = tensor::relu(&self.enc_hidden.forward(x)?);
        Ok((self.enc_sem.forward(&h)?, self.enc_var.forward(&h)?))
    }

    pub fn decode_batch(&self, s: &Tensor, v: &Tensor) -> Result<Tensor> {
        let a = self.dec_sem.forward(s)?;
        let b = tensor::matmul(v, &self.dec_var.weight.value)?;
        if a.shape() != b.shape() {
            return Err(Error::shape("decode", a.shape(), b.shape()));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x + y).max(0.0))
            .collect();
        let h = Tensor::new(a.shape().to_vec(), data)?;
        let out = self.dec_out.forward(&h)?;
        Ok(clamp_unit(out.map(tensor::sigmoid)))
    }

    /// Mean absolute per-pixel reconstruction error.
    pub fn reconstruction_l1(&self, samples: &[ColoredSample]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in samples.chunks(64) {
            let x = batch_images(chunk)?;
            let (s, v) = self.encode_batch(&x)?;
            let y = self.decode_batch(&s, &v)?;
            total += x
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        }
        Ok(total / (samples.len() * COLOR_PIXELS) as f64)
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        let pair = |tape: &mut Tape, l: &Linear| (tape.param(&l.weight), tape.param(&l.bias));
        Bound {
            enc_hidden: pair(tape, &self.enc_hidden),
            enc_sem: pair(tape, &self.enc_sem),
            enc_var: pair(tape, &self.enc_var),
            dec_sem: pair(tape, &self.dec_sem),
            dec_var: tape.param(&self.dec_var.weight),
            dec_out: pair(tape, &self.dec_out),
        }
    }
}

impl Bound {
    fn encode(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let h = tape.affine(x, self.enc_hidden.0, self.enc_hidden.1)?;
        let h = tape.relu(h);
        let s = tape.affine(h, self.enc_sem.0, self.enc_sem.1)?;
        let v = tape.affine(h, self.enc_var.0, self.enc_var.1)?;
        Ok((s, v))
    }

    fn decode(&self, tape: &mut Tape, s: Var, v: Var) -> Result<Var> {
        let a = tape.affine(s, self.dec_sem.0, self.dec_sem.1)?;
        let b = tape.matmul(v, self.dec_var)?;
        let h = tape.add(a, b)?;
        let h = tape.relu(h);
        let o = tape.affine(h, self.dec_out.0, self.dec_out.1)?;
        Ok(tape.sigmoid(o))
    }
}

impl ParamSet for LearnedGenerator {
    fn params(&self) -> Vec<&Parameter> {
        [
            &self.enc_hidden,
            &self.enc_sem,
            &self.enc_var,
            &self.dec_sem,
            &self.dec_var,
            &self.dec_out,
        ]
        .into_iter()
        .flat_map(|l| [&l.weight, &l.bias])
        .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        [
            &mut self.enc_hidden,
            &mut self.enc_sem,
            &mut self.enc_var,
            &mut self.dec_sem,
            &mut self.dec_var,
            &mut self.dec_out,
        ]
        .into_iter()
        .flat_map(|l| [&mut l.weight, &mut l.bias])
        .collect()
    }
}

fn single(x: &Tensor) -> Result<Tensor> {
    if x.len() != COLOR_PIXELS {
        return Err(Error::shape(
            "learned generator",
            x.shape(),
            &[CHANNELS, IMAGE_SIDE, IMAGE_SIDE],
        ));
    }
    Tensor::new(vec![1, COLOR_PIXELS], x.data().to_vec())
}

pub(crate) fn batch_images(samples: &[ColoredSample]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Tensor::stack(&refs)
}

impl Generator for LearnedGenerator {
    fn encode_semantic(&self, x: &Tensor) -> Result<SemanticCode> {
        let (s, _) = self.encode_batch(&single(x)?)?;
        Ok(SemanticCode(s.reshape(vec![self.semantic_dim()])?))
    }

    fn encode_variation(&self, x: &Tensor) -> Result<VariationCode> {
        let (_, v) = self.encode_batch(&single(x)?)?;
        Ok(VariationCode(v.reshape(vec![self.variation_dim()])?))
    }

    fn decode(&self, s: &SemanticCode, v: &VariationCode) -> Result<Tensor> {
        if s.0.len() != self.semantic_dim() || v.0.len() != self.variation_dim() {
            return Err(Error::shape("learned decode", s.0.shape(), v.0.shape()));
        }
        let s = Tensor::new(vec![1, s.0.len()], s.0.data().to_vec())?;
        let v = Tensor::new(vec![1, v.0.len()], v.0.data().to_vec())?;
        self.decode_batch(&s, &v)?
            .reshape(vec![CHANNELS, IMAGE_SIDE, IMAGE_SIDE])
    }

    /// Raw `N(0, I)` draw fed straight to the decoder.
    fn sample_variation(&self, rng: &mut RngStream) -> VariationCode {
        VariationCode(Tensor::vector(
            (0..self.variation_dim()).map(|_| rng.normal()).collect(),
        ))
    }
}

/// Trains the learned generator on ID training samples.
///
/// Per batch the loss is the per-image absolute reconstruction error (squared
/// during the first `warmup_epochs`, which keeps the decoder from collapsing
/// onto the black background) plus
/// `swap_weight` times a swap-consistency term: each sample is decoded with
/// another sample's variation code and re-encoded; the semantic code must
/// match the original sample's and the variation code the donor's.
pub fn train_generator(
    train: &[ColoredSample],
    cfg: &GeneratorTrainConfig,
) -> Result<LearnedGenerator> {
    if train.is_empty() {
        return Err(Error::Config("generator training set is empty".into()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config(
            "generator batch_size must be at least 2".into(),
        ));
    }
    let root = RngStream::new(cfg.seed);
    let mut model = LearnedGenerator::new(cfg, &mut root.child("init"))?;
    let mut order_rng = root.child("order");
    let mut opt = Momentum::new(cfg.momentum);

    for epoch in 0..cfg.epochs {
        let order = order_rng.permutation(train.len());
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Tensor> = idx.iter().map(|&i| &train[i].image).collect();
            let x = Tensor::stack(&batch)?;
            let n = idx.len();
            // donor for sample i is sample i+1 (cyclic)
            let rotate: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();

            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let xv = tape.constant(x);
            let (s, v) = b.encode(&mut tape, xv)?;
            let recon = b.decode(&mut tape, s, v)?;
            let diff = tape.sub(recon, xv)?;
            let err = if epoch < cfg.warmup_epochs {
                tape.square(diff)
            } else {
                tape.abs(diff)
            };
            let recon_loss = tape.sum(err);
            let recon_loss = tape.scale(recon_loss, 1.0 / n as f64);

            let v_donor = tape.constant(permute_rows(tape.value(v), &rotate)?);
            let swapped = b.decode(&mut tape, s, v_donor)?;
            let (s2, v2) = b.encode(&mut tape, swapped)?;
            let ds = tape.sub(s2, s)?;
            let ds = tape.abs(ds);
            let ds = tape.sum(ds);
            let dv = tape.sub(v2, v_donor)?;
            let dv = tape.abs(dv);
            let dv = tape.sum(dv);
            let swap = tape.add(ds, dv)?;
            let swap = tape.scale(swap, cfg.swap_weight / n as f64);
            let loss = tape.add(recon_loss, swap)?;

            let value = tape.scalar(loss)?;
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "generator loss diverged at epoch {epoch}: {value}"
                )));
            }
            model.zero_grad();
            tape.backward_into(loss, &mut model)?;
            // decoder variation bias is folded into dec_sem's bias
            model.dec_var.bias.zero_grad();
            opt.step(&mut model, cfg.lr)?;
            epoch_loss += value;
            batches += 1;
        }
        log::debug!(
            "generator epoch {epoch}: loss {:.5}",
            epoch_loss / batches as f64
        );
    }
    model.zero_grad();
    Ok(model)
}

fn permute_rows(t: &Tensor, order: &[usize]) -> Result<Tensor> {
    let rows: Vec<&[f64]> = order.iter().map(|&i| t.row(i)).collect();
    Tensor::from_rows(&rows)
}

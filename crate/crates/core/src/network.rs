//! The classifier network `f = g ∘ h`.
//!
//! `g` is a stack of ReLU affine layers ending in the feature dimension `r`;
//! `h` is a single affine map from features to `K` logits.

use crate::error::{Error, Result};
use crate::numerics::tensor::{self, Tensor};
use crate::numerics::{ParamSet, Parameter, RngStream, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(prefix: &str, fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        Linear {
            weight: Parameter::glorot(format!("{prefix}.weight"), fan_in, fan_out, rng),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::affine_forward(x, &self.weight.value, &self.bias.value)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.affine(x, self.weight, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    /// Hidden widths of `g` before the feature layer.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    /// Layers of `g`; every one is followed by ReLU.
    pub extractor: Vec<Linear>,
    pub classifier: Linear,
}

/// Network parameters bound to one tape.
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    extractor: Vec<BoundLinear>,
    classifier: BoundLinear,
}

/// Per-sample outputs of a forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub features: Tensor,
    pub logits: Tensor,
}

impl Network {
    pub fn new(spec: &NetworkSpec, rng: &mut RngStream) -> Result<Self> {
        if spec.input_dim == 0 || spec.feature_dim == 0 || spec.num_classes == 0 {
            return Err(Error::Config(format!(
                "network dimensions must be positive: {spec:?}"
            )));
        }
        let mut dims = vec![spec.input_dim];
        dims.extend(&spec.hidden);
        dims.push(spec.feature_dim);
        let extractor = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("g.{i}"), w[0], w[1], rng))
            .collect();
        let classifier = Linear::new("h", spec.feature_dim, spec.num_classes, rng);
        Ok(Network {
            extractor,
            classifier,
        })
    }

    /// Reassembles a network from named parameters, e.g. a loaded checkpoint.
    pub fn from_parameters(params: Vec<Parameter>) -> Result<Self> {
        let mut by_name: std::collections::BTreeMap<String, Parameter> =
            params.into_iter().map(|p| (p.name.clone(), p)).collect();
        let mut take = |name: String| {
            by_name
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter '{name}'")))
        };
        let mut extractor = Vec::new();
        let mut i = 0;
        loop {
            let wname = format!("g.{i}.weight");
            let Ok(weight) = take(wname) else { break };
            let bias = take(format!("g.{i}.bias"))?;
            extractor.push(Linear { weight, bias });
            i += 1;
        }
        let classifier = Linear {
            weight: take("h.weight".into())?,
            bias: take("h.bias".into())?,
        };
        if extractor.is_empty() {
            return Err(Error::Format("network has no feature layers".into()));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("unexpected parameter '{extra}'")));
        }
        let net = Network {
            extractor,
            classifier,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        let mut prev = self.extractor[0].fan_in();
        for l in self
            .extractor
            .iter()
            .chain(std::iter::once(&self.classifier))
        {
            if l.fan_in() != prev || l.bias.value.shape() != [l.fan_out()] {
                return Err(Error::shape(
                    "network",
                    l.weight.value.shape(),
                    l.bias.value.shape(),
                ));
            }
            prev = l.fan_out();
        }
        Ok(())
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.extractor[0].fan_in(),
            hidden: self.extractor[..self.extractor.len() - 1]
                .iter()
                .map(Linear::fan_out)
                .collect(),
            feature_dim: self.feature_dim(),
            num_classes: self.num_classes(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor[0].fan_in()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.fan_out()
    }

    /// `g(x)` for a batch `[n × d]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.extractor {
            h = tensor::relu(&layer.forward(&h)?);
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Outputs> {
        let features = self.features(x)?;
        let logits = self.classifier.forward(&features)?;
        Ok(Outputs { features, logits })
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundNetwork {
        BoundNetwork {
            extractor: self.extractor.iter().map(|l| l.bind(tape)).collect(),
            classifier: self.classifier.bind(tape),
        }
    }
}

impl BoundNetwork {
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.extractor {
            let a = layer.forward(tape, h)?;
            h = tape.relu(a);
        }
        Ok(h)
    }

    pub fn classify(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        self.classifier.forward(tape, features)
    }
}

impl ParamSet for Network {
    fn params(&self) -> Vec<&Parameter> {
        self.extractor
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Network {
        let spec = NetworkSpec {
            input_dim: 6,
            hidden: vec![5],
            feature_dim: 4,
            num_classes: 3,
        };
        Network::new(&spec, &mut RngStream::new(1)).unwrap()
    }

    #[test]
    fn tape_and_plain_forward_agree_bitwise() {
        let net = small();
        let mut rng = RngStream::new(2);
        let x = Tensor::new(vec![3, 6], (0..18).map(|_| rng.normal()).collect()).unwrap();
        let plain = net.forward(&x).unwrap();
        let mut tape = Tape::new();
        let b = net.bind(&mut tape);
        let xv = tape.constant(x);
        let f = b.features(&mut tape, xv).unwrap();
        let l = b.classify(&mut tape, f).unwrap();
        assert_eq!(tape.value(f), &plain.features);
        assert_eq!(tape.value(l), &plain.logits);
    }

    #[test]
    fn parameters_round_trip_through_names() {
        let net = small();
        let params = net.params().into_iter().cloned().collect();
        let back = Network::from_parameters(params).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.spec().hidden, vec![5]);
    }

    #[test]
    fn missing_parameter_is_reported() {
        let net = small();
        let params: Vec<Parameter> = net
            .params()
            .into_iter()
            .filter(|p| p.name != "h.bias")
            .cloned()
            .collect();
        assert!(Network::from_parameters(params).is_err());
    }

    #[test]
    fn forward_is_pure() {
        let net = small();
        let x = Tensor::filled(&[2, 6], 0.3);
        assert_eq!(
            net.forward(&x).unwrap().logits,
            net.forward(&x).unwrap().logits
        );
    }
}

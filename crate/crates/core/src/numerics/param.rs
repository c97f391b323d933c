use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

/// Trainable tensor with an accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    /// Glorot-uniform weight of shape `[fan_in × fan_out]`.
    pub fn glorot(
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngStream,
    ) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_in(-limit, limit))
            .collect();
        Parameter::new(
            name,
            Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape"),
        )
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
}

/// A model exposing its parameters in a fixed order.
pub trait ParamSet {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

impl ParamSet for Vec<Parameter> {
    fn params(&self) -> Vec<&Parameter> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.iter_mut().collect()
    }
}

/// Plain SGD: `value ← value − lr·grad`.
pub fn sgd_step<M: ParamSet + ?Sized>(model: &mut M, lr: f64) -> Result<()> {
    let mut params = model.params_mut();
    if let Some(bad) = params.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::Training(format!(
            "non-finite gradient in parameter '{}'",
            bad.name
        )));
    }
    for p in params.iter_mut() {
        let Parameter { value, grad, .. } = &mut **p;
        for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
            *v -= lr * g;
        }
    }
    Ok(())
}

/// SGD with heavy-ball momentum: `u ← μ·u + grad`, `value ← value − lr·u`.
#[derive(Clone, Debug, Default)]
pub struct Momentum {
    pub mu: f64,
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn new(mu: f64) -> Self {
        Momentum {
            mu,
            velocity: Vec::new(),
        }
    }

    pub fn step<M: ParamSet + ?Sized>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        let mut params = model.params_mut();
        if let Some(bad) = params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in parameter '{}'",
                bad.name
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        for (p, u) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let Parameter { value, grad, .. } = &mut **p;
            for ((v, g), u) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(u.iter_mut())
            {
                *u = self.mu * *u + g;
                *v -= lr * *u;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64, g: f64) -> Vec<Parameter> {
        let mut p = Parameter::new("w", Tensor::scalar(v));
        p.grad = Tensor::scalar(g);
        vec![p]
    }

    #[test]
    fn zero_lr_leaves_values() {
        let mut ps = scalar_param(1.5, 3.0);
        sgd_step(&mut ps, 0.0).unwrap();
        assert_eq!(ps[0].value.data(), &[1.5]);
    }

    #[test]
    fn scalar_step() {
        let mut ps = scalar_param(1.0, 2.0);
        sgd_step(&mut ps, 0.1).unwrap();
        assert!((ps[0].value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn step_decreases_convex_quadratic() {
        // loss = Σ (w − 3)², grad = 2(w − 3)
        let mut ps = vec![Parameter::new("w", Tensor::vector(vec![0.0, 5.0, -2.0]))];
        let loss = |p: &Parameter| {
            p.value
                .data()
                .iter()
                .map(|w| (w - 3.0).powi(2))
                .sum::<f64>()
        };
        let before = loss(&ps[0]);
        ps[0].grad = ps[0].value.map(|w| 2.0 * (w - 3.0));
        sgd_step(&mut ps, 0.1).unwrap();
        assert!(loss(&ps[0]) < before);
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut ps = scalar_param(1.0, f64::NAN);
        ps[0].name = "g.0.weight".into();
        let err = sgd_step(&mut ps, 0.1).unwrap_err().to_string();
        assert!(err.contains("g.0.weight"));
        assert_eq!(ps[0].value.data(), &[1.0]);
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = RngStream::new(0);
        let p = Parameter::glorot("w", 10, 6, &mut rng);
        let lim = (6.0f64 / 16.0).sqrt();
        assert!(p.value.data().iter().all(|v| v.abs() <= lim));
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut ps = scalar_param(1.0, 1.0);
        let mut opt = Momentum::new(0.5);
        opt.step(&mut ps, 0.1).unwrap();
        assert!((ps[0].value.data()[0] - 0.9).abs() < 1e-15);
        opt.step(&mut ps, 0.1).unwrap();
        // velocity 1.5
        assert!((ps[0].value.data()[0] - 0.75).abs() < 1e-15);
        let mut plain = scalar_param(1.0, 1.0);
        Momentum::new(0.0).step(&mut plain, 0.1).unwrap();
        let mut reference = scalar_param(1.0, 1.0);
        sgd_step(&mut reference, 0.1).unwrap();
        assert_eq!(plain, reference);
    }
}

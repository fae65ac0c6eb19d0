//! Named trainable parameters and the Adam optimizer.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    /// Number of gradient accumulations since the last step / reset.
    pub grad_events: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Every trainable tensor of a network, registered once under a unique name.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> usize {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter '{name}': shape does not match data length"
        );
        assert!(
            self.params.iter().all(|p| p.name != name),
            "parameter '{name}' registered twice"
        );
        let n = data.len();
        self.params.push(Parameter {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            grad: vec![0.0; n],
            grad_events: 0,
        });
        self.m.push(vec![0.0; n]);
        self.v.push(vec![0.0; n]);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Parameter {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Parameter {
        &mut self.params[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn slot_by_name(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of scalar learnable values.
    pub fn count_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
            p.grad_events = 0;
        }
    }

    pub fn accumulate_grad(&mut self, slot: usize, grad: &[f64]) {
        let p = &mut self.params[slot];
        debug_assert_eq!(p.grad.len(), grad.len());
        for (g, d) in p.grad.iter_mut().zip(grad) {
            *g += d;
        }
        p.grad_events += 1;
    }

    /// One Adam update with bias correction. Every parameter must have
    /// received at least one gradient since the last `zero_grad`.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for p in &self.params {
            if p.grad_events == 0 {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (slot, p) in self.params.iter_mut().enumerate() {
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..p.data.len() {
                let g = p.grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// True if any parameter or pending gradient is non-finite.
    pub fn any_non_finite(&self) -> bool {
        self.params
            .iter()
            .any(|p| p.data.iter().chain(p.grad.iter()).any(|v| !v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut ps = ParamSet::new();
        let s = ps.register("p", &[1], vec![0.0]);
        ps.accumulate_grad(s, &[1.0]);
        let cfg = AdamConfig {
            lr: 1e-4,
            ..Default::default()
        };
        ps.adam_step(&cfg).unwrap();
        let p = ps.get(s).data[0];
        assert!((p + 1e-4).abs() < 1e-7, "step was {p}");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut ps = ParamSet::new();
        let s = ps.register("p", &[3], vec![1.0, -2.0, 0.5]);
        let cfg = AdamConfig::default();
        for _ in 0..5 {
            ps.zero_grad();
            ps.accumulate_grad(s, &[0.0, 0.0, 0.0]);
            ps.adam_step(&cfg).unwrap();
        }
        assert_eq!(ps.get(s).data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn missing_gradient_is_an_error_naming_the_parameter() {
        let mut ps = ParamSet::new();
        ps.register("first", &[1], vec![0.0]);
        let s = ps.register("lonely", &[1], vec![0.0]);
        ps.accumulate_grad(0, &[1.0]);
        let _ = s;
        let err = ps.adam_step(&AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("lonely"));
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        // 200 steps minimizing (p - 3)^2 from p = 0 at lr 0.1
        let mut ps = ParamSet::new();
        let s = ps.register("p", &[1], vec![0.0]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        for _ in 0..200 {
            ps.zero_grad();
            let p = ps.get(s).data[0];
            ps.accumulate_grad(s, &[2.0 * (p - 3.0)]);
            ps.adam_step(&cfg).unwrap();
        }
        assert!((ps.get(s).data[0] - 3.0).abs() < 0.05);
    }

    #[test]
    fn duplicate_registration_panics() {
        let mut ps = ParamSet::new();
        ps.register("w", &[1], vec![0.0]);
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            ps.register("w", &[1], vec![0.0]);
        }));
        assert!(r.is_err());
    }
}

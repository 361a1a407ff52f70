//! Central-difference verification of tape gradients.

use crate::error::{invalid, Error, Result};

use super::{OpKind, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Finite-difference gradient checker.
///
/// The closure builds a computation on a fresh tape from one leaf per input
/// and returns a single-element output.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    pub fault: Option<OpKind>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            fault: None,
        }
    }
}

impl GradCheck {
    pub fn new(eps: f64) -> Self {
        Self { eps, fault: None }
    }

    pub fn with_fault(mut self, fault: Option<OpKind>) -> Self {
        self.fault = fault;
        self
    }

    fn eval<F>(&self, f: &F, inputs: &[Tensor]) -> Result<f64>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out);
        if value.numel() != 1 {
            return Err(Error::NonScalarOutput(value.shape().to_vec()));
        }
        Ok(value.item())
    }

    /// Max over all input coordinates of
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<f64>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        if !(self.eps > 0.0) {
            return Err(invalid("grad_check", "eps must be positive"));
        }
        let mut tape = Tape::new();
        if let Some(kind) = self.fault {
            tape.inject_fault(kind);
        }
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;

        let mut worst: f64 = 0.0;
        let mut perturbed = inputs.to_vec();
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
            for i in 0..inputs[k].numel() {
                let orig = inputs[k].data()[i];
                perturbed[k].data_mut()[i] = orig + self.eps;
                let plus = self.eval(&f, &perturbed)?;
                perturbed[k].data_mut()[i] = orig - self.eps;
                let minus = self.eval(&f, &perturbed)?;
                perturbed[k].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }
}

/// [`GradCheck::run`] with the default settings and the given `eps`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    GradCheck::new(eps).run(f, inputs)
}

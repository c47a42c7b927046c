//! Small building blocks shared by the attention and model code.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor};

/// Inverted dropout. Inactive when `p == 0` or no generator is attached, in
/// which case `apply` returns its input unchanged.
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(p: f64, rng: ChaCha8Rng) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn disabled() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn is_active(&self) -> bool {
        self.p > 0.0 && self.rng.is_some()
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.apply_with(self.p, tape, x)
    }

    /// Dropout with an explicit rate, sharing this generator.
    pub fn apply_with(&mut self, p: f64, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }
}

/// `x · w + b`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

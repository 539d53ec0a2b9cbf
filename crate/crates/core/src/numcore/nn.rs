//! Layers built on the tape: affine maps, Dice activation and small MLPs.

use rand::Rng;

use super::params::{Group, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DICE_EPSILON: f64 = 1e-8;
pub const DICE_ALPHA_INIT: f64 = 0.25;
pub const DICE_MOMENTUM: f64 = 0.99;

/// `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(
            format!("{name}.weight"),
            group,
            inputs,
            outputs,
            inputs,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), group, 1, outputs, inputs, rng);
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Dice activation on a tape:
/// `p(x) x + (1 - p(x)) alpha x` with `p(x) = sigmoid((x - mean) / sqrt(var + eps))`.
///
/// `alpha`, `mean` and `var` are `1 x n` rows broadcast over the rows of `x`.
pub fn dice(tape: &mut Tape, x: Var, alpha: Var, mean: Var, var: Var) -> Result<Var> {
    tape.dice(x, alpha, mean, var, DICE_EPSILON)
}

/// Where Dice takes its normalization statistics from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    /// Statistics of the current mini-batch (differentiable). Falls back to
    /// running averages for single-row inputs.
    Batch,
    /// Running averages only.
    Running,
}

/// Per-channel batch statistics observed in a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Dice layer with a learnable per-channel `alpha` and running statistics.
#[derive(Debug, Clone)]
pub struct Dice {
    pub alpha: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl Dice {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, channels: usize) -> Self {
        let alpha = store.add(
            format!("{name}.alpha"),
            group,
            Tensor::full(1, channels, DICE_ALPHA_INIT),
        );
        Self {
            alpha,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Applies Dice. Returns the batch statistics when they were used so the
    /// caller can fold them into the running averages with [`Dice::commit`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        norm: Norm,
    ) -> Result<(Var, Option<BatchStats>)> {
        let alpha = tape.param(store, self.alpha);
        if norm == Norm::Batch && tape.shape(x)[0] > 1 {
            let mean = tape.col_mean(x)?;
            let centered = tape.sub_row(x, mean)?;
            let sq = tape.mul(centered, centered)?;
            let var = tape.col_mean(sq)?;
            let stats = BatchStats {
                mean: tape.value(mean).data().to_vec(),
                var: tape.value(var).data().to_vec(),
            };
            Ok((dice(tape, x, alpha, mean, var)?, Some(stats)))
        } else {
            let mean = tape.constant(Tensor::row(self.running_mean.clone())?);
            let var = tape.constant(Tensor::row(self.running_var.clone())?);
            Ok((dice(tape, x, alpha, mean, var)?, None))
        }
    }

    pub fn commit(&mut self, stats: &BatchStats) {
        let m = DICE_MOMENTUM;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Linear layers with Dice between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub dice: Vec<Dice>,
    pub output: OutputActivation,
}

/// Statistics gathered from each Dice layer of an [`Mlp`] forward pass.
pub type MlpStats = Vec<Option<BatchStats>>;

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        widths: &[usize],
        output: OutputActivation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), group, w[0], w[1], rng))
            .collect::<Vec<_>>();
        let dice = widths[1..widths.len() - 1]
            .iter()
            .enumerate()
            .map(|(i, &w)| Dice::new(store, &format!("{name}.dice{i}"), group, w))
            .collect();
        Self {
            layers,
            dice,
            output,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        norm: Norm,
    ) -> Result<(Var, MlpStats)> {
        let mut h = x;
        let mut stats = Vec::with_capacity(self.dice.len());
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if let Some(d) = self.dice.get(i) {
                let (out, s) = d.forward(tape, store, h, norm)?;
                h = out;
                stats.push(s);
            }
        }
        if self.output == OutputActivation::Tanh {
            h = tape.tanh(h)?;
        }
        Ok((h, stats))
    }

    pub fn commit(&mut self, stats: &MlpStats) {
        for (d, s) in self.dice.iter_mut().zip(stats) {
            if let Some(s) = s {
                d.commit(s);
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.layers.iter().flat_map(Linear::params).collect();
        ids.extend(self.dice.iter().map(|d| d.alpha));
        ids
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }
}

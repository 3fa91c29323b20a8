//! Masked autoregressive conditioner: outputs for coordinate `j` depend only
//! on inputs `0..j`.

use rand_distr::Uniform;

use crate::autodiff::{matmul_into, DualTensor, Tape};
use crate::error::Result;

/// Layer shapes and connectivity masks of one conditioner.
#[derive(Clone, Debug)]
pub struct Made {
    dim: usize,
    per_dim: usize,
    /// `(fan_in, fan_out)` per layer.
    shapes: Vec<(usize, usize)>,
    /// Row-major `[fan_in, fan_out]` 0/1 masks.
    masks: Vec<Vec<f64>>,
}

impl Made {
    pub fn new(dim: usize, hidden: &[usize], per_dim: usize) -> Made {
        let input_deg: Vec<usize> = (1..=dim).collect();
        let hidden_deg = |units: usize| -> Vec<usize> {
            (0..units).map(|u| 1 + u % (dim - 1).max(1)).collect()
        };
        let output_deg: Vec<usize> = (0..dim * per_dim).map(|o| o / per_dim + 1).collect();

        let mut shapes = Vec::new();
        let mut masks = Vec::new();
        let mut prev = input_deg;
        for &units in hidden {
            let deg = hidden_deg(units);
            masks.push(mask(&prev, &deg, |i, o| o >= i));
            shapes.push((prev.len(), units));
            prev = deg;
        }
        masks.push(mask(&prev, &output_deg, |i, o| o > i));
        shapes.push((prev.len(), output_deg.len()));
        Made {
            dim,
            per_dim,
            shapes,
            masks,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn per_dim(&self) -> usize {
        self.per_dim
    }

    pub fn n_outputs(&self) -> usize {
        self.dim * self.per_dim
    }

    /// Parameter tensor shapes in storage order: `W₀, b₀, W₁, b₁, …`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.shapes
            .iter()
            .flat_map(|&(i, o)| [vec![i, o], vec![o]])
            .collect()
    }

    /// Uniform `±1/√fan_in` weights and biases for hidden layers; the output
    /// layer starts at zero so the spline starts as the identity.
    pub fn init(&self, rng: &mut impl rand::Rng) -> Vec<Vec<f64>> {
        let last = self.shapes.len() - 1;
        let mut params = Vec::new();
        for (l, &(fan_in, fan_out)) in self.shapes.iter().enumerate() {
            if l == last {
                params.push(vec![0.0; fan_in * fan_out]);
                params.push(vec![0.0; fan_out]);
                continue;
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let mut w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.sample(dist)).collect();
            for (v, m) in w.iter_mut().zip(&self.masks[l]) {
                *v *= m;
            }
            params.push(w);
            params.push((0..fan_out).map(|_| rng.sample(dist)).collect());
        }
        params
    }

    /// Forward on the tape: `x` is `[n, dim]`, `params` holds this
    /// conditioner's tensors; returns `[n, dim · per_dim]`.
    pub fn forward_tape(&self, tape: &Tape, x: &DualTensor, params: &[DualTensor]) -> Result<DualTensor> {
        let last = self.shapes.len() - 1;
        let mut h = x.clone();
        for (l, &(fan_in, fan_out)) in self.shapes.iter().enumerate() {
            let mask = DualTensor::constant(vec![fan_in, fan_out], self.masks[l].clone())?;
            let w = tape.mul(&params[2 * l], &mask)?;
            h = tape.add_bias(&tape.matmul(&h, &w)?, &params[2 * l + 1])?;
            if l != last {
                h = tape.relu(&h);
            }
        }
        Ok(h)
    }

    /// Plain forward for `n` rows of `x` (row-major `[n, dim]`).
    pub fn forward(&self, x: &[f64], n: usize, params: &[Vec<f64>]) -> Vec<f64> {
        let last = self.shapes.len() - 1;
        let mut h = x.to_vec();
        for (l, &(fan_in, fan_out)) in self.shapes.iter().enumerate() {
            let w: Vec<f64> = params[2 * l].iter().zip(&self.masks[l]).map(|(a, m)| a * m).collect();
            let mut out = vec![0.0; n * fan_out];
            matmul_into(n, fan_in, fan_out, &h, &w, &mut out);
            for row in out.chunks_exact_mut(fan_out) {
                for (v, b) in row.iter_mut().zip(&params[2 * l + 1]) {
                    *v += b;
                    if l != last {
                        *v = v.max(0.0);
                    }
                }
            }
            h = out;
        }
        h
    }
}

fn mask(input: &[usize], output: &[usize], connect: impl Fn(usize, usize) -> bool) -> Vec<f64> {
    let mut m = Vec::with_capacity(input.len() * output.len());
    for &i in input {
        for &o in output {
            m.push(if connect(i, o) { 1.0 } else { 0.0 });
        }
    }
    m
}

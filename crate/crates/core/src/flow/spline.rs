//! Monotone rational-quadratic splines on `[−B, B]` with identity tails.
//!
//! Raw parameters per transformed coordinate are laid out as `K` unnormalized
//! widths, `K` unnormalized heights and `K − 1` unconstrained interior
//! derivatives. All-zero raw parameters give the identity map.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, DualTensor, Tape};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplineSpec {
    pub bins: usize,
    pub tail_bound: f64,
    pub min_bin_width: f64,
    pub min_bin_height: f64,
    pub min_derivative: f64,
}

impl Default for SplineSpec {
    fn default() -> Self {
        SplineSpec {
            bins: 8,
            tail_bound: 5.0,
            min_bin_width: 1e-3,
            min_bin_height: 1e-3,
            min_derivative: 1e-3,
        }
    }
}

/// Knot table of one spline: `K + 1` positions, values and derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Knots {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub ds: Vec<f64>,
}

impl Knots {
    fn bin_of(edges: &[f64], v: f64) -> usize {
        let k = edges.len() - 1;
        edges[1..k].partition_point(|&e| e <= v)
    }
}

impl SplineSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str| format!("flow.spline.{name}");
        if self.bins < 2 {
            return Err(Error::config(field("bins"), "need at least 2 bins"));
        }
        if !(self.tail_bound > 0.0 && self.tail_bound.is_finite()) {
            return Err(Error::config(field("tail_bound"), "must be positive and finite"));
        }
        for (name, v) in [("min_bin_width", self.min_bin_width), ("min_bin_height", self.min_bin_height)] {
            if !(v > 0.0 && v * (self.bins as f64) < 1.0) {
                return Err(Error::config(field(name), format!("must lie in (0, 1/bins), got {v}")));
            }
        }
        if !(self.min_derivative > 0.0 && self.min_derivative < 1.0) {
            return Err(Error::config(field("min_derivative"), "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Raw parameters per coordinate.
    pub fn n_params(&self) -> usize {
        3 * self.bins - 1
    }

    /// Shift so that a zero raw derivative maps to exactly 1.
    fn derivative_shift(&self) -> f64 {
        (1.0 - self.min_derivative).exp_m1().ln()
    }

    fn edges(&self, raw: &[f64], min_size: f64) -> Vec<f64> {
        let k = self.bins;
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = raw.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = e.iter().sum();
        let scale = 1.0 - min_size * k as f64;
        let b = self.tail_bound;
        let mut edges = Vec::with_capacity(k + 1);
        let mut acc = 0.0;
        edges.push(-b);
        for v in &e[..k - 1] {
            acc += min_size + scale * (v / total);
            edges.push(2.0 * b * acc - b);
        }
        edges.push(b);
        edges
    }

    pub fn knots(&self, raw: &[f64]) -> Result<Knots> {
        let k = self.bins;
        if raw.len() != self.n_params() {
            return Err(Error::Shape {
                op: "spline",
                detail: format!("expected {} raw parameters, got {}", self.n_params(), raw.len()),
            });
        }
        if let Some(v) = raw.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite spline parameter {v}")));
        }
        let shift = self.derivative_shift();
        let mut ds = Vec::with_capacity(k + 1);
        ds.push(1.0);
        ds.extend(raw[2 * k..].iter().map(|&u| self.min_derivative + softplus(u + shift)));
        ds.push(1.0);
        Ok(Knots {
            xs: self.edges(&raw[..k], self.min_bin_width),
            ys: self.edges(&raw[k..2 * k], self.min_bin_height),
            ds,
        })
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= -self.tail_bound && v < self.tail_bound
    }

    /// `(y, log dy/dx)` at `x`.
    pub fn forward(&self, knots: &Knots, x: f64) -> (f64, f64) {
        if !self.contains(x) {
            return (x, 0.0);
        }
        let k = Knots::bin_of(&knots.xs, x);
        rq_forward(knots, k, x)
    }

    /// `(x, log dy/dx at x)` for `y`.
    pub fn inverse(&self, knots: &Knots, y: f64) -> (f64, f64) {
        if !self.contains(y) {
            return (y, 0.0);
        }
        let k = Knots::bin_of(&knots.ys, y);
        let (x0, x1) = (knots.xs[k], knots.xs[k + 1]);
        let (y0, y1) = (knots.ys[k], knots.ys[k + 1]);
        let (d0, d1) = (knots.ds[k], knots.ds[k + 1]);
        let (w, h) = (x1 - x0, y1 - y0);
        let s = h / w;
        let dy = y - y0;
        let c2 = d1 + d0 - 2.0 * s;
        let a = h * (s - d0) + dy * c2;
        let b = h * d0 - dy * c2;
        let c = -s * dy;
        let disc = (b * b - 4.0 * a * c).max(0.0);
        let xi = (2.0 * c / (-b - disc.sqrt())).clamp(0.0, 1.0);
        let x = x0 + xi * w;
        let t = xi * (1.0 - xi);
        let den = s + c2 * t;
        let dnum = d1 * xi * xi + 2.0 * s * t + d0 * (1.0 - xi) * (1.0 - xi);
        (x, 2.0 * s.ln() + dnum.ln() - 2.0 * den.ln())
    }

    /// Batched forward on the tape. `x` has shape `[n]`, `raw` has shape
    /// `[n, 3K − 1]`; returns `y` and `log dy/dx`, both `[n]`.
    pub fn forward_tape(&self, tape: &Tape, x: &DualTensor, raw: &DualTensor) -> Result<(DualTensor, DualTensor)> {
        let k = self.bins;
        let p = self.n_params();
        let n = x.len();
        if raw.shape() != [n, p] {
            return Err(Error::Shape {
                op: "spline",
                detail: format!("raw parameters {:?} for {n} inputs", raw.shape()),
            });
        }
        if let Some(v) = raw.values().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite spline parameter {v}")));
        }
        let columns = |start: usize, width: usize| -> Result<DualTensor> {
            let idx: Vec<usize> = (0..n).flat_map(|i| (start..start + width).map(move |j| i * p + j)).collect();
            tape.index_select(raw, &Arc::new(idx), vec![n, width])
        };
        let xs = self.edges_tape(tape, &columns(0, k)?, self.min_bin_width)?;
        let ys = self.edges_tape(tape, &columns(k, k)?, self.min_bin_height)?;

        // derivatives: interior from softplus, boundary fixed at 1
        let interior = tape.add_scalar(
            &tape.softplus(&tape.add_scalar(&columns(2 * k, k - 1)?, self.derivative_shift())),
            self.min_derivative,
        );
        let mut embed = vec![0.0; (k - 1) * (k + 1)];
        for j in 0..k - 1 {
            embed[j * (k + 1) + j + 1] = 1.0;
        }
        let mut boundary = vec![0.0; n * (k + 1)];
        for row in boundary.chunks_exact_mut(k + 1) {
            row[0] = 1.0;
            row[k] = 1.0;
        }
        let ds = tape.add(
            &tape.matmul(&interior, &DualTensor::constant(vec![k - 1, k + 1], embed)?)?,
            &DualTensor::constant(vec![n, k + 1], boundary)?,
        )?;

        // bin lookup on forward values; outside rows evaluate a dummy point 0
        let mut mask = vec![0.0; n];
        let mut lo = Vec::with_capacity(n);
        for (i, &v) in x.values().iter().enumerate() {
            let inside = self.contains(v);
            mask[i] = if inside { 1.0 } else { 0.0 };
            let row = &xs.values()[i * (k + 1)..(i + 1) * (k + 1)];
            let bin = Knots::bin_of(row, if inside { v } else { 0.0 });
            lo.push(i * (k + 1) + bin);
        }
        let hi: Vec<usize> = lo.iter().map(|i| i + 1).collect();
        let (lo, hi) = (Arc::new(lo), Arc::new(hi));
        let gather = |t: &DualTensor, idx: &Arc<Vec<usize>>| tape.index_select(t, idx, vec![n]);
        let mask = DualTensor::vector(mask);

        let x0 = gather(&xs, &lo)?;
        let w = tape.sub(&gather(&xs, &hi)?, &x0)?;
        let y0 = gather(&ys, &lo)?;
        let h = tape.sub(&gather(&ys, &hi)?, &y0)?;
        let d0 = gather(&ds, &lo)?;
        let d1 = gather(&ds, &hi)?;

        let xc = tape.mul(x, &mask)?;
        let s = tape.div(&h, &w)?;
        let xi = tape.div(&tape.sub(&xc, &x0)?, &w)?;
        let one_minus = tape.rsub_scalar(1.0, &xi);
        let t = tape.mul(&xi, &one_minus)?;
        let xi2 = tape.mul(&xi, &xi)?;
        let num = tape.mul(&h, &tape.add(&tape.mul(&s, &xi2)?, &tape.mul(&d0, &t)?)?)?;
        let c2 = tape.sub(&tape.add(&d1, &d0)?, &tape.mul_scalar(&s, 2.0))?;
        let den = tape.add(&s, &tape.mul(&c2, &t)?)?;
        let y_in = tape.add(&y0, &tape.div(&num, &den)?)?;
        let dnum = tape.add(
            &tape.add(&tape.mul(&d1, &xi2)?, &tape.mul_scalar(&tape.mul(&s, &t)?, 2.0))?,
            &tape.mul(&d0, &tape.mul(&one_minus, &one_minus)?)?,
        )?;
        let logd = tape.sub(
            &tape.add(&tape.mul_scalar(&tape.log(&s)?, 2.0), &tape.log(&dnum)?)?,
            &tape.mul_scalar(&tape.log(&den)?, 2.0),
        )?;

        let outside = tape.rsub_scalar(1.0, &mask);
        let y = tape.add(&tape.mul(&y_in, &mask)?, &tape.mul(x, &outside)?)?;
        let logdet = tape.mul(&logd, &mask)?;
        Ok((y, logdet))
    }

    /// Knot positions `[n, K + 1]` from unnormalized sizes `[n, K]`.
    fn edges_tape(&self, tape: &Tape, raw: &DualTensor, min_size: f64) -> Result<DualTensor> {
        let k = self.bins;
        let n = raw.shape()[0];
        let b = self.tail_bound;
        let mut shift = Vec::with_capacity(n * k);
        for row in raw.values().chunks_exact(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            shift.extend(std::iter::repeat_n(max, k));
        }
        let e = tape.exp(&tape.sub(raw, &DualTensor::constant(vec![n, k], shift)?)?);
        let totals = tape.matmul(&e, &DualTensor::constant(vec![k, 1], vec![1.0; k])?)?;
        let totals = tape.matmul(&totals, &DualTensor::constant(vec![1, k], vec![1.0; k])?)?;
        let sizes = tape.add_scalar(
            &tape.mul_scalar(&tape.div(&e, &totals)?, 1.0 - min_size * k as f64),
            min_size,
        );
        // cum[j][c] = 1 for j < c: column c is the sum of the first c sizes
        let mut cum = vec![0.0; k * (k + 1)];
        for j in 0..k {
            for c in j + 1..=k {
                cum[j * (k + 1) + c] = 1.0;
            }
        }
        let partial = tape.matmul(&sizes, &DualTensor::constant(vec![k, k + 1], cum)?)?;
        // endpoints pinned to ±B exactly
        let mut keep = vec![1.0; n * (k + 1)];
        let mut pinned = vec![0.0; n * (k + 1)];
        for (kr, pr) in keep.chunks_exact_mut(k + 1).zip(pinned.chunks_exact_mut(k + 1)) {
            kr[0] = 0.0;
            kr[k] = 0.0;
            pr[0] = -b;
            pr[k] = b;
        }
        let interior = tape.mul(
            &tape.add_scalar(&tape.mul_scalar(&partial, 2.0 * b), -b),
            &DualTensor::constant(vec![n, k + 1], keep)?,
        )?;
        tape.add(&interior, &DualTensor::constant(vec![n, k + 1], pinned)?)
    }
}

fn rq_forward(knots: &Knots, k: usize, x: f64) -> (f64, f64) {
    let (x0, x1) = (knots.xs[k], knots.xs[k + 1]);
    let (y0, y1) = (knots.ys[k], knots.ys[k + 1]);
    let (d0, d1) = (knots.ds[k], knots.ds[k + 1]);
    let (w, h) = (x1 - x0, y1 - y0);
    let s = h / w;
    let xi = (x - x0) / w;
    let t = xi * (1.0 - xi);
    let num = h * (s * xi * xi + d0 * t);
    let den = s + (d1 + d0 - 2.0 * s) * t;
    let dnum = d1 * xi * xi + 2.0 * s * t + d0 * (1.0 - xi) * (1.0 - xi);
    (y0 + num / den, 2.0 * s.ln() + dnum.ln() - 2.0 * den.ln())
}

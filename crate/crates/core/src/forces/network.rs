//! Coordinate network mapping (position, time) to force activations.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ForceError;
use crate::geometry::Vec3;

pub const INPUT_DIM: usize = 4;
pub const OUTPUT_DIM: usize = 4;
/// Number of weight layers.
pub const DEPTH: usize = 6;
pub const DEFAULT_HIDDEN: usize = 64;

/// Columns per parallel work item in batched passes. Fixed so that results do
/// not depend on the thread count.
const CHUNK: usize = 512;

fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_inverse(a: f64) -> f64 {
    if a >= 0.0 {
        a
    } else {
        a.ln_1p()
    }
}

/// ELU derivative written in terms of the activation value.
fn elu_slope(a: f64) -> f64 {
    if a >= 0.0 {
        1.0
    } else {
        a + 1.0
    }
}

/// Fully connected network `4 -> H -> H -> H -> H -> H -> 4`, ELU on hidden
/// layers and identity on the output. Output 0 is the normal activation,
/// outputs 1..4 the friction parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceField {
    sizes: Vec<usize>,
    /// Per layer, an `out x in` matrix.
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

/// Activations kept by [`ForceField::forward_batch`].
#[derive(Debug, Clone)]
pub struct BatchTape {
    /// `activations[0]` is the input; the last entry is the output.
    activations: Vec<DMatrix<f64>>,
}

impl BatchTape {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("non-empty tape")
    }
}

impl ForceField {
    fn layer_sizes(hidden: usize) -> Vec<usize> {
        let mut sizes = vec![INPUT_DIM];
        sizes.extend(std::iter::repeat_n(hidden, DEPTH - 1));
        sizes.push(OUTPUT_DIM);
        sizes
    }

    pub fn zeros(hidden: usize) -> Result<Self, ForceError> {
        if hidden == 0 {
            return Err(ForceError::InvalidNetwork("hidden width must be positive".into()));
        }
        let sizes = Self::layer_sizes(hidden);
        let weights = sizes.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect();
        let biases = sizes[1..].iter().map(|&n| DVector::zeros(n)).collect();
        Ok(Self { sizes, weights, biases })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(hidden: usize, seed: u64) -> Result<Self, ForceError> {
        let mut field = Self::zeros(hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut field.weights {
            let limit = (6.0 / (w.nrows() + w.ncols()) as f64).sqrt();
            for x in w.iter_mut() {
                *x = rng.random_range(-limit..=limit);
            }
        }
        Ok(field)
    }

    /// Builds a network from explicit `out x in` layers.
    pub fn from_layers(weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>) -> Result<Self, ForceError> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(ForceError::InvalidNetwork("weight and bias counts differ".into()));
        }
        let mut sizes = vec![weights[0].ncols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.ncols() != *sizes.last().unwrap() || b.len() != w.nrows() {
                return Err(ForceError::InvalidNetwork("layer shapes do not chain".into()));
            }
            sizes.push(w.nrows());
        }
        if sizes[0] != INPUT_DIM || *sizes.last().unwrap() != OUTPUT_DIM {
            return Err(ForceError::InvalidNetwork(format!(
                "expected {INPUT_DIM} inputs and {OUTPUT_DIM} outputs, got {sizes:?}"
            )));
        }
        Ok(Self { sizes, weights, biases })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn hidden(&self) -> usize {
        self.sizes[1]
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Parameters flattened layer by layer: weights in column-major order,
    /// then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), ForceError> {
        if flat.len() != self.param_count() {
            return Err(ForceError::InvalidNetwork(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Single-sample forward pass.
    pub fn evaluate(&self, position: &Vec3, t: f64) -> (f64, Vec3) {
        let mut a = DVector::from_column_slice(&[position.x, position.y, position.z, t]);
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            a = w * a + b;
            if l < last {
                a.apply(|x| *x = elu(*x));
            }
        }
        (a[0], Vec3::new(a[1], a[2], a[3]))
    }

    /// Forward pass over the columns of a `4 x N` input matrix.
    pub fn forward_batch(&self, input: &DMatrix<f64>) -> BatchTape {
        assert_eq!(input.nrows(), INPUT_DIM);
        let last = self.weights.len() - 1;
        let mut activations = Vec::with_capacity(self.weights.len() + 1);
        activations.push(input.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let prev = activations.last().unwrap();
            let mut z = w * prev;
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l < last {
                z.apply(|x| *x = elu(*x));
            }
            activations.push(z);
        }
        BatchTape { activations }
    }

    /// Reverse pass: given the adjoint of the `4 x N` output, returns the
    /// flat parameter gradient and the `4 x N` input adjoint.
    pub fn backward_batch(&self, tape: &BatchTape, output_adjoint: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let nl = self.weights.len();
        let mut grads_w: Vec<DMatrix<f64>> = Vec::with_capacity(nl);
        let mut grads_b: Vec<DVector<f64>> = Vec::with_capacity(nl);
        let mut delta = output_adjoint.clone();
        for l in (0..nl).rev() {
            let a_prev = &tape.activations[l];
            grads_w.push(&delta * a_prev.transpose());
            grads_b.push(delta.column_sum());
            let mut back = self.weights[l].transpose() * &delta;
            if l > 0 {
                back.zip_apply(a_prev, |d, a| *d *= elu_slope(a));
            }
            delta = back;
        }
        grads_w.reverse();
        grads_b.reverse();
        let mut flat = Vec::with_capacity(self.param_count());
        for (w, b) in grads_w.iter().zip(&grads_b) {
            flat.extend_from_slice(w.as_slice());
            flat.extend_from_slice(b.as_slice());
        }
        (flat, delta)
    }

    /// Output of the network on the tape's input with flat parameter `k`
    /// shifted by `delta`. Layers before the perturbed one are reused from
    /// the tape, and the first changed layer is updated row-wise.
    pub fn perturbed_output(&self, tape: &BatchTape, k: usize, delta: f64) -> DMatrix<f64> {
        assert!(k < self.param_count(), "parameter {k} out of range");
        let last = self.weights.len() - 1;
        let mut layer = 0;
        let mut offset = k;
        loop {
            let n = self.weights[layer].len() + self.biases[layer].len();
            if offset < n {
                break;
            }
            offset -= n;
            layer += 1;
        }
        let w = &self.weights[layer];
        // Column-major weights: entry `offset` is (row, col) = (offset % rows, offset / rows).
        let (row, source) = if offset < w.len() {
            (offset % w.nrows(), Some(offset / w.nrows()))
        } else {
            (offset - w.len(), None)
        };
        let prev = &tape.activations[layer];
        let mut current = tape.activations[layer + 1].clone();
        let cols = prev.ncols();
        let old_row: Vec<f64> = current.row(row).iter().copied().collect();
        for c in 0..cols {
            let mut z = self.biases[layer][row] + if source.is_none() { delta } else { 0.0 };
            for j in 0..w.ncols() {
                let wij = w[(row, j)] + if source == Some(j) { delta } else { 0.0 };
                z += wij * prev[(j, c)];
            }
            current[(row, c)] = if layer < last { elu(z) } else { z };
        }
        if layer == last {
            return current;
        }
        // Next layer: rank-one change of its pre-activation, recovered from
        // the stored activation.
        let next = layer + 1;
        let mut pre = tape.activations[next + 1].clone();
        if next < last {
            pre.apply(|x| *x = elu_inverse(*x));
        }
        let wcol = self.weights[next].column(row);
        for c in 0..cols {
            let change = current[(row, c)] - old_row[c];
            if change != 0.0 {
                for r in 0..pre.nrows() {
                    pre[(r, c)] += wcol[r] * change;
                }
            }
        }
        if next < last {
            pre.apply(|x| *x = elu(*x));
        }
        let mut a = pre;
        for l in next + 1..self.weights.len() {
            let mut z = &self.weights[l] * &a;
            for mut col in z.column_iter_mut() {
                col += &self.biases[l];
            }
            if l < last {
                z.apply(|x| *x = elu(*x));
            }
            a = z;
        }
        a
    }

    /// Forward pass split into fixed-size column chunks evaluated in
    /// parallel, keeping every chunk's tape.
    pub fn forward_chunks(&self, input: &DMatrix<f64>) -> Vec<BatchTape> {
        let n = input.ncols();
        let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
        starts
            .par_iter()
            .map(|&s| {
                let e = (s + CHUNK).min(n);
                self.forward_batch(&input.columns(s, e - s).into_owned())
            })
            .collect()
    }

    /// Concatenated outputs of [`ForceField::forward_chunks`].
    pub fn chunk_outputs(tapes: &[BatchTape]) -> DMatrix<f64> {
        let n = tapes.iter().map(|t| t.output().ncols()).sum();
        let mut out = DMatrix::zeros(OUTPUT_DIM, n);
        let mut at = 0;
        for t in tapes {
            let o = t.output();
            out.columns_mut(at, o.ncols()).copy_from(o);
            at += o.ncols();
        }
        out
    }

    /// Reverse pass over chunk tapes. Parameter gradients are summed in chunk
    /// order.
    pub fn backward_chunks(&self, tapes: &[BatchTape], output_adjoint: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let mut starts = Vec::with_capacity(tapes.len());
        let mut at = 0;
        for t in tapes {
            starts.push(at);
            at += t.output().ncols();
        }
        assert_eq!(at, output_adjoint.ncols());
        let parts: Vec<(Vec<f64>, DMatrix<f64>)> = tapes
            .par_iter()
            .zip(starts.par_iter())
            .map(|(tape, &s)| {
                let adj = output_adjoint.columns(s, tape.output().ncols()).into_owned();
                self.backward_batch(tape, &adj)
            })
            .collect();
        let mut grad = vec![0.0; self.param_count()];
        let mut input_adjoint = DMatrix::zeros(INPUT_DIM, at);
        for (&s, (g, in_adj)) in starts.iter().zip(parts) {
            input_adjoint.columns_mut(s, in_adj.ncols()).copy_from(&in_adj);
            for (acc, x) in grad.iter_mut().zip(g) {
                *acc += x;
            }
        }
        (grad, input_adjoint)
    }

    /// Chunked parallel forward pass returning only the outputs.
    pub fn forward_chunked(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let n = input.ncols();
        let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
        let parts: Vec<DMatrix<f64>> = starts
            .par_iter()
            .map(|&s| {
                let e = (s + CHUNK).min(n);
                self.forward_batch(&input.columns(s, e - s).into_owned()).output().clone()
            })
            .collect();
        let mut outputs = DMatrix::zeros(OUTPUT_DIM, n);
        for (&s, out) in starts.iter().zip(parts) {
            outputs.columns_mut(s, out.ncols()).copy_from(&out);
        }
        outputs
    }

    /// Upper bound on the Lipschitz constant: product of layer spectral norms
    /// (ELU is 1-Lipschitz).
    pub fn lipschitz_bound(&self) -> f64 {
        self.weights.iter().map(|w| w.clone().svd(false, false).singular_values.max()).product()
    }
}

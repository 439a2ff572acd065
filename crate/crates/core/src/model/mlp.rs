use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FieldBatch, VelocityField};
use crate::error::{FlashError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let sig = 1.0 / (1.0 + (-z).exp());
                sig * (1.0 + z * (1.0 - sig))
            }
        }
    }
}

/// Layer widths and input layout of a [`Mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// `K + 1`.
    pub coeff_rows: usize,
    /// `d_a`.
    pub dims: usize,
    /// Conditioning vector length.
    pub cond_len: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Sinusoidal flow-time features; must be even.
    pub tau_features: usize,
}

impl Architecture {
    pub fn new(coeff_rows: usize, dims: usize, cond_len: usize) -> Self {
        Self {
            coeff_rows,
            dims,
            cond_len,
            hidden: vec![256, 256, 256],
            activation: Activation::Silu,
            tau_features: 8,
        }
    }

    pub fn coeff_len(&self) -> usize {
        self.coeff_rows * self.dims
    }

    pub fn input_len(&self) -> usize {
        self.coeff_len() + self.tau_features + self.cond_len
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_len()];
        w.extend(&self.hidden);
        w.push(self.coeff_len());
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.coeff_rows < 2 || self.dims == 0 {
            return Err(FlashError::Shape("architecture needs at least 2 coefficient rows and 1 dim".into()));
        }
        if self.tau_features % 2 != 0 {
            return Err(FlashError::Shape("tau_features must be even".into()));
        }
        if self.hidden.iter().any(|h| *h == 0) {
            return Err(FlashError::Shape("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Fully connected velocity-field regressor `f_θ(C_τ, τ, e)`.
///
/// Input column: `[vec(C_τ) | sin/cos(ω_i τ) | e]`. Parameters live in one flat
/// vector, each layer storing its column-major weight matrix then its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: Architecture,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl Mlp {
    /// Hidden layers get `U(±√(6/fan_in))`, biases and the output layer start at zero.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = vec![0.0; arch.param_count()];
        let slots = slots(&arch);
        for slot in &slots[..slots.len() - 1] {
            let bound = (6.0 / slot.fan_in as f64).sqrt();
            for p in &mut params[slot.w..slot.w + slot.fan_in * slot.fan_out] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(FlashError::Shape(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(FlashError::Parameter("parameters must be finite".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    fn assemble_input(&self, batch: &FieldBatch) -> Result<DMatrix<f64>> {
        let a = &self.arch;
        let b = batch.len();
        if batch.x.nrows() != a.coeff_len() || batch.cond.nrows() != a.cond_len || batch.cond.ncols() != b {
            return Err(FlashError::Shape(format!(
                "model expects coefficients {} and conditioning {}, got {} and {}",
                a.coeff_len(),
                a.cond_len,
                batch.x.nrows(),
                batch.cond.nrows()
            )));
        }
        let mut input = DMatrix::zeros(a.input_len(), b);
        input.rows_mut(0, a.coeff_len()).copy_from(&batch.x);
        for (col, &tau) in batch.tau.iter().enumerate() {
            for (i, f) in tau_embedding(tau, a.tau_features).into_iter().enumerate() {
                input[(a.coeff_len() + i, col)] = f;
            }
        }
        input
            .rows_mut(a.coeff_len() + a.tau_features, a.cond_len)
            .copy_from(&batch.cond);
        Ok(input)
    }
}

/// `[sin(πτ), cos(πτ), sin(2πτ), cos(2πτ), …]`.
pub fn tau_embedding(tau: f64, features: usize) -> Vec<f64> {
    (0..features / 2)
        .flat_map(|i| {
            let w = std::f64::consts::PI * (1u64 << i) as f64;
            [(w * tau).sin(), (w * tau).cos()]
        })
        .collect()
}

fn slots(arch: &Architecture) -> Vec<Slot> {
    let mut off = 0;
    arch.widths()
        .windows(2)
        .map(|w| {
            let s = Slot {
                w: off,
                b: off + w[0] * w[1],
                fan_in: w[0],
                fan_out: w[1],
            };
            off += w[0] * w[1] + w[1];
            s
        })
        .collect()
}

impl VelocityField for Mlp {
    type Tape = MlpTape;

    fn coeff_len(&self) -> usize {
        self.arch.coeff_len()
    }

    fn cond_len(&self) -> usize {
        self.arch.cond_len
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, batch: &FieldBatch) -> Result<(DMatrix<f64>, MlpTape)> {
        let slots = slots(&self.arch);
        let last = slots.len() - 1;
        let mut a = self.assemble_input(batch)?;
        let mut inputs = Vec::with_capacity(slots.len());
        let mut pre = Vec::with_capacity(last);
        for (l, slot) in slots.iter().enumerate() {
            let w = DMatrixView::from_slice(&self.params[slot.w..slot.b], slot.fan_out, slot.fan_in);
            let bias = &self.params[slot.b..slot.b + slot.fan_out];
            let mut z = DMatrix::zeros(slot.fan_out, a.ncols());
            z.gemm(1.0, &w, &a, 0.0);
            for mut col in z.column_iter_mut() {
                for (v, b) in col.iter_mut().zip(bias) {
                    *v += b;
                }
            }
            inputs.push(a);
            if l == last {
                return Ok((z, MlpTape { inputs, pre }));
            }
            let act = self.arch.activation;
            a = z.map(|v| act.apply(v));
            pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    fn backward(&self, tape: &MlpTape, upstream: &DMatrix<f64>) -> Vec<f64> {
        let slots = slots(&self.arch);
        let mut grad = vec![0.0; self.params.len()];
        let mut g = upstream.clone();
        for (l, slot) in slots.iter().enumerate().rev() {
            let input = &tape.inputs[l];
            {
                let (wg, bg) = grad[slot.w..slot.b + slot.fan_out].split_at_mut(slot.fan_in * slot.fan_out);
                let mut dw = DMatrixViewMut::from_slice(wg, slot.fan_out, slot.fan_in);
                dw.gemm(1.0, &g, &input.transpose(), 0.0);
                for col in g.column_iter() {
                    for (acc, v) in bg.iter_mut().zip(col.iter()) {
                        *acc += v;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = DMatrixView::from_slice(&self.params[slot.w..slot.b], slot.fan_out, slot.fan_in);
            let mut da = DMatrix::zeros(slot.fan_in, g.ncols());
            da.gemm(1.0, &w.transpose(), &g, 0.0);
            let act = self.arch.activation;
            da.zip_apply(&tape.pre[l - 1], |d, z| *d *= act.derivative(z));
            g = da;
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_arch() -> Architecture {
        Architecture {
            coeff_rows: 2,
            dims: 2,
            cond_len: 3,
            hidden: vec![5, 4],
            activation: Activation::Tanh,
            tau_features: 2,
        }
    }

    fn random_batch(arch: &Architecture, b: usize, rng: &mut ChaCha8Rng) -> FieldBatch {
        FieldBatch {
            x: DMatrix::from_fn(arch.coeff_len(), b, |_, _| rng.random_range(-1.0..1.0)),
            tau: (0..b).map(|_| rng.random_range(0.0..1.0)).collect(),
            cond: DMatrix::from_fn(arch.cond_len, b, |_, _| rng.random_range(-1.0..1.0)),
        }
    }

    fn randomize(m: &mut Mlp, rng: &mut ChaCha8Rng) {
        for p in m.params_mut() {
            *p = rng.random_range(-0.8..0.8);
        }
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = Architecture::new(7, 2, 10);
        let m = Mlp::new(arch.clone(), &mut rng).unwrap();
        let batch = random_batch(&arch, 4, &mut rng);
        let (out, _) = m.forward(&batch).unwrap();
        assert_eq!(out.amax(), 0.0);
        let (again, _) = m.forward(&batch).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn forward_matches_hand_rolled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = toy_arch();
        let mut m = Mlp::new(arch.clone(), &mut rng).unwrap();
        randomize(&mut m, &mut rng);
        let batch = random_batch(&arch, 3, &mut rng);
        let (out, _) = m.forward(&batch).unwrap();

        // independent scalar-loop evaluation over the documented parameter layout
        let p = m.params();
        let widths = [arch.input_len(), 5, 4, arch.coeff_len()];
        for col in 0..3 {
            let mut a: Vec<f64> = batch.x.column(col).iter().copied().collect();
            let t = batch.tau[col];
            a.push((std::f64::consts::PI * t).sin());
            a.push((std::f64::consts::PI * t).cos());
            a.extend(batch.cond.column(col).iter());
            let mut off = 0;
            for l in 0..3 {
                let (fi, fo) = (widths[l], widths[l + 1]);
                let mut z = vec![0.0; fo];
                for (r, zr) in z.iter_mut().enumerate() {
                    let mut acc = p[off + fi * fo + r];
                    for c in 0..fi {
                        acc += p[off + c * fo + r] * a[c];
                    }
                    *zr = if l < 2 { acc.tanh() } else { acc };
                }
                off += fi * fo + fo;
                a = z;
            }
            for (r, v) in a.iter().enumerate() {
                assert!((out[(r, col)] - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn layout_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = toy_arch();
        let m = Mlp::new(arch.clone(), &mut rng).unwrap();
        let mut batch = random_batch(&arch, 2, &mut rng);
        batch.cond = DMatrix::zeros(4, 2);
        assert!(matches!(m.forward(&batch), Err(FlashError::Shape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = toy_arch();
        let mut m = Mlp::new(arch.clone(), &mut rng).unwrap();
        randomize(&mut m, &mut rng);
        let batch = random_batch(&arch, 3, &mut rng);
        let (out, tape) = m.forward(&batch).unwrap();
        let g = m.backward(&tape, &DMatrix::zeros(out.nrows(), out.ncols()));
        assert!(g.iter().all(|v| *v == 0.0));
    }

    fn check_gradients(activation: Activation, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture {
            activation,
            ..toy_arch()
        };
        let mut m = Mlp::new(arch.clone(), &mut rng).unwrap();
        randomize(&mut m, &mut rng);
        let batch = random_batch(&arch, 4, &mut rng);
        let weights = DMatrix::from_fn(arch.coeff_len(), 4, |_, _| rng.random_range(-1.0..1.0));
        // scalar objective L = Σ w ⊙ out, so dL/dout = w
        let objective = |m: &Mlp| m.forward(&batch).unwrap().0.component_mul(&weights).sum();
        let (_, tape) = m.forward(&batch).unwrap();
        let grad = m.backward(&tape, &weights);
        let h = 1e-6;
        for i in 0..m.params().len() {
            let orig = m.params()[i];
            m.params_mut()[i] = orig + h;
            let up = objective(&m);
            m.params_mut()[i] = orig - h;
            let down = objective(&m);
            m.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn gradients_tanh() {
        check_gradients(Activation::Tanh, 5);
    }

    #[test]
    fn gradients_silu() {
        check_gradients(Activation::Silu, 6);
    }

    #[test]
    fn parameter_count_matches_layout() {
        let arch = Architecture::new(7, 2, 10);
        // 32 -> 256 -> 256 -> 256 -> 14
        assert_eq!(arch.input_len(), 32);
        assert_eq!(arch.param_count(), 32 * 256 + 256 + 2 * (256 * 256 + 256) + 256 * 14 + 14);
    }
}

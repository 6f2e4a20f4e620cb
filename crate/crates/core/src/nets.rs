//! Fully connected networks: the spectral encoder, the learned decoder used
//! by the pure autoencoder baseline, the residual bias corrector, and the
//! direct regression baseline. Plain and tape forwards share arithmetic and
//! produce identical values.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{AdResult, Tape, Var};

/// Spectral input width (number of bands).
pub const SPECTRUM_DIM: usize = 11;
/// Latent width (number of inferred variables).
pub const LATENT_DIM: usize = 7;
/// Hidden width shared by all architectures.
pub const HIDDEN_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer {index}: weight matrix has {got} entries, expected {rows}x{cols}")]
    WeightShape {
        index: usize,
        got: usize,
        rows: usize,
        cols: usize,
    },
    #[error("layer {index}: bias has {got} entries, expected {rows}")]
    BiasShape { index: usize, got: usize, rows: usize },
    #[error("layer {index} takes {cols} inputs but previous layer produces {prev}")]
    LayerMismatch { index: usize, cols: usize, prev: usize },
    #[error("residual network needs matching input/output widths, got {input} and {output}")]
    ResidualShape { input: usize, output: usize },
    #[error("input has {got} values, expected {expected}")]
    InputShape { got: usize, expected: usize },
    #[error("network has no layers")]
    Empty,
    #[error("non-finite parameter in layer {index}")]
    NonFiniteParam { index: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => crate::ad::sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn apply_var<'t>(&self, x: Var<'t>) -> AdResult<Var<'t>> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => Ok(x),
        }
    }
}

/// One dense layer: row-major weights, bias, and the activation applied
/// after the affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

/// A feed-forward network; with `residual` set the network computes
/// x + mlp(x) and input/output widths must match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub residual: bool,
}

/// Glorot uniform bound sqrt(6/(fan_in + fan_out)).
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn init_layer(rows: usize, cols: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Layer {
    let s = glorot_bound(cols, rows);
    let weights = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
    Layer {
        rows,
        cols,
        weights,
        biases: vec![0.0; rows],
        activation,
    }
}

fn zero_layer(rows: usize, cols: usize, activation: Activation) -> Layer {
    Layer {
        rows,
        cols,
        weights: vec![0.0; rows * cols],
        biases: vec![0.0; rows],
        activation,
    }
}

impl MlpParams {
    /// Spectral encoder 11 → 64 → 64 → 7 with a sigmoid head, so outputs
    /// live in the open unit interval.
    pub fn encoder(rng: &mut ChaCha8Rng) -> Self {
        Self {
            layers: vec![
                init_layer(HIDDEN_DIM, SPECTRUM_DIM, Activation::Relu, rng),
                init_layer(HIDDEN_DIM, HIDDEN_DIM, Activation::Relu, rng),
                init_layer(LATENT_DIM, HIDDEN_DIM, Activation::Sigmoid, rng),
            ],
            residual: false,
        }
    }

    /// Learned decoder 7 → 64 → 64 → 11 for the pure autoencoder baseline;
    /// linear head because targets live in standardized spectral space.
    pub fn decoder(rng: &mut ChaCha8Rng) -> Self {
        Self {
            layers: vec![
                init_layer(HIDDEN_DIM, LATENT_DIM, Activation::Relu, rng),
                init_layer(HIDDEN_DIM, HIDDEN_DIM, Activation::Relu, rng),
                init_layer(SPECTRUM_DIM, HIDDEN_DIM, Activation::Identity, rng),
            ],
            residual: false,
        }
    }

    /// Residual bias corrector 11 → 64 → 11; the final layer starts at zero
    /// so the untrained corrector is exactly the identity.
    pub fn corrector(rng: &mut ChaCha8Rng) -> Self {
        Self {
            layers: vec![
                init_layer(HIDDEN_DIM, SPECTRUM_DIM, Activation::Relu, rng),
                zero_layer(SPECTRUM_DIM, HIDDEN_DIM, Activation::Identity),
            ],
            residual: true,
        }
    }

    /// Direct regression baseline, same shape as the encoder.
    pub fn regressor(rng: &mut ChaCha8Rng) -> Self {
        Self::encoder(rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cols)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.rows)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.layers.is_empty() {
            return Err(NetError::Empty);
        }
        let mut prev = self.layers[0].cols;
        for (index, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.rows * l.cols {
                return Err(NetError::WeightShape {
                    index,
                    got: l.weights.len(),
                    rows: l.rows,
                    cols: l.cols,
                });
            }
            if l.biases.len() != l.rows {
                return Err(NetError::BiasShape {
                    index,
                    got: l.biases.len(),
                    rows: l.rows,
                });
            }
            if l.cols != prev {
                return Err(NetError::LayerMismatch {
                    index,
                    cols: l.cols,
                    prev,
                });
            }
            if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
                return Err(NetError::NonFiniteParam { index });
            }
            prev = l.rows;
        }
        if self.residual && self.input_dim() != self.output_dim() {
            return Err(NetError::ResidualShape {
                input: self.input_dim(),
                output: self.output_dim(),
            });
        }
        Ok(())
    }

    /// Plain forward pass. Accumulates each row dot product left to right,
    /// matching the tape path bit for bit.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        if x.len() != self.input_dim() {
            return Err(NetError::InputShape {
                got: x.len(),
                expected: self.input_dim(),
            });
        }
        let mut cur = x.to_vec();
        for l in &self.layers {
            let mut next = Vec::with_capacity(l.rows);
            for r in 0..l.rows {
                let mut acc = 0.0;
                for c in 0..l.cols {
                    acc += l.weights[r * l.cols + c] * cur[c];
                }
                next.push(l.activation.apply(acc + l.biases[r]));
            }
            cur = next;
        }
        if self.residual {
            for (o, i) in cur.iter_mut().zip(x) {
                *o += i;
            }
        }
        Ok(cur)
    }

    /// Lifts all parameters onto a tape as leaves, for training.
    pub fn lift<'t>(&self, tape: &'t Tape) -> AdResult<MlpNodes<'t>> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push(LayerNodes {
                weights: tape.vector(&l.weights)?,
                biases: tape.vector(&l.biases)?,
                rows: l.rows,
                cols: l.cols,
                activation: l.activation,
            });
        }
        Ok(MlpNodes {
            layers,
            residual: self.residual,
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<(), NetError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| NetError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| NetError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load_json(path: &Path) -> Result<Self, NetError> {
        let text = std::fs::read_to_string(path).map_err(|e| NetError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let params: Self = serde_json::from_str(&text).map_err(|e| NetError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        params.validate().map_err(|e| NetError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(params)
    }
}

/// Network parameters lifted onto a tape.
pub struct LayerNodes<'t> {
    pub weights: Var<'t>,
    pub biases: Var<'t>,
    pub rows: usize,
    pub cols: usize,
    pub activation: Activation,
}

pub struct MlpNodes<'t> {
    pub layers: Vec<LayerNodes<'t>>,
    pub residual: bool,
}

impl<'t> MlpNodes<'t> {
    /// Tape forward pass on a single input vector node.
    pub fn forward(&self, x: Var<'t>) -> AdResult<Var<'t>> {
        let mut cur = x;
        for l in &self.layers {
            let affine = l.weights.matvec(cur, l.rows, l.cols)?.add(l.biases)?;
            cur = l.activation.apply_var(affine)?;
        }
        if self.residual {
            cur = x.add(cur)?;
        }
        Ok(cur)
    }

    /// Parameter leaves in layer order, paired for an optimizer update.
    pub fn param_vars(&self) -> Vec<Var<'t>> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weights);
            out.push(l.biases);
        }
        out
    }
}

/// Writes gradients for each parameter leaf back into flat per-layer
/// buffers ordered like [`MlpNodes::param_vars`].
pub fn grad_buffers<'t>(
    grads: &crate::ad::Gradients<'t>,
    nodes: &MlpNodes<'t>,
) -> AdResult<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(nodes.layers.len() * 2);
    for v in nodes.param_vars() {
        out.push(grads.wrt(v)?.to_vec());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn init_respects_the_glorot_bound_and_fills_the_interval() {
        let enc = MlpParams::encoder(&mut rng(3));
        for l in &enc.layers {
            let s = glorot_bound(l.cols, l.rows);
            let max = l.weights.iter().cloned().fold(0.0f64, |a, w| a.max(w.abs()));
            assert!(max <= s, "weight magnitude {max} exceeds bound {s}");
            assert!(max >= 0.5 * s, "weights suspiciously small: {max} vs {s}");
            assert!(l.biases.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn same_seed_means_identical_parameters() {
        assert_eq!(MlpParams::encoder(&mut rng(9)), MlpParams::encoder(&mut rng(9)));
        assert_ne!(MlpParams::encoder(&mut rng(9)), MlpParams::encoder(&mut rng(10)));
    }

    #[test]
    fn encoder_output_is_seven_values_inside_the_unit_interval() {
        let enc = MlpParams::encoder(&mut rng(1));
        let out = enc.forward(&[0.3; SPECTRUM_DIM]).unwrap();
        assert_eq!(out.len(), LATENT_DIM);
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
        // Saturating inputs stay inside the closed interval.
        for x in [-10.0, 10.0] {
            let out = enc.forward(&[x; SPECTRUM_DIM]).unwrap();
            assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn plain_and_tape_forwards_agree_bit_for_bit() {
        let enc = MlpParams::encoder(&mut rng(5));
        let x: Vec<f64> = (0..SPECTRUM_DIM).map(|i| (i as f64 - 5.0) * 0.3).collect();
        let plain = enc.forward(&x).unwrap();
        let tape = Tape::new();
        let nodes = enc.lift(&tape).unwrap();
        let xv = tape.vector(&x).unwrap();
        let out = nodes.forward(xv).unwrap();
        assert_eq!(plain, out.value());
    }

    #[test]
    fn untrained_corrector_is_exactly_the_identity() {
        let corr = MlpParams::corrector(&mut rng(2));
        let x: Vec<f64> = (0..SPECTRUM_DIM).map(|i| 0.1 * i as f64 - 0.4).collect();
        let out = corr.forward(&x).unwrap();
        assert_eq!(out, x);
        let tape = Tape::new();
        let nodes = corr.lift(&tape).unwrap();
        let out_t = nodes.forward(tape.vector(&x).unwrap()).unwrap();
        assert_eq!(out_t.value(), x);
    }

    #[test]
    fn gradient_probe_matches_finite_differences() {
        // Small 11 → 8 → 7 network, loss = mean squared output; central
        // differences on sampled weights. The probe point keeps every relu
        // pre-activation away from its kink so the quotient is clean.
        let mut r = rng(17);
        let mut net = MlpParams {
            layers: vec![
                init_layer(8, 11, Activation::Relu, &mut r),
                init_layer(7, 8, Activation::Tanh, &mut r),
            ],
            residual: false,
        };
        let x: Vec<f64> = (0..11).map(|i| 0.25 + 0.05 * i as f64).collect();
        {
            let mut cur = x.clone();
            for l in &net.layers {
                let mut next = Vec::new();
                for row in 0..l.rows {
                    let mut acc = 0.0;
                    for c in 0..l.cols {
                        acc += l.weights[row * l.cols + c] * cur[c];
                    }
                    let pre = acc + l.biases[row];
                    assert!(pre.abs() > 1e-3, "probe point sits on an activation kink");
                    next.push(l.activation.apply(pre));
                }
                cur = next;
            }
        }

        let loss_of = |net: &MlpParams| -> f64 {
            let out = net.forward(&x).unwrap();
            out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64
        };

        let tape = Tape::new();
        let nodes = net.lift(&tape).unwrap();
        let out = nodes.forward(tape.vector(&x).unwrap()).unwrap();
        let loss = out.square().unwrap().mean().unwrap();
        let grads = tape.backward(loss).unwrap();
        let buffers = grad_buffers(&grads, &nodes).unwrap();

        for (layer_idx, entry_idx) in [(0usize, 0usize), (0, 42), (0, 87), (1, 3), (1, 55)] {
            let analytic = buffers[layer_idx * 2][entry_idx];
            let w0 = net.layers[layer_idx].weights[entry_idx];
            let h = 1e-6 * w0.abs().max(1.0);
            net.layers[layer_idx].weights[entry_idx] = w0 + h;
            let up = loss_of(&net);
            net.layers[layer_idx].weights[entry_idx] = w0 - h;
            let down = loss_of(&net);
            net.layers[layer_idx].weights[entry_idx] = w0;
            let fd = (up - down) / (2.0 * h);
            assert_relative_eq!(analytic, fd, max_relative = 1e-6, epsilon = 1e-10);
        }
    }

    #[test]
    fn validation_catches_shape_problems() {
        let mut net = MlpParams::encoder(&mut rng(4));
        net.layers[1].weights.pop();
        assert!(matches!(net.validate(), Err(NetError::WeightShape { .. })));

        let mut net = MlpParams::encoder(&mut rng(4));
        net.layers[1].cols = 63;
        assert!(net.validate().is_err());

        let mut net = MlpParams::corrector(&mut rng(4));
        net.layers[1].rows = 10;
        net.layers[1].weights = vec![0.0; 640];
        net.layers[1].biases = vec![0.0; 10];
        assert!(matches!(net.validate(), Err(NetError::ResidualShape { .. })));

        let mut net = MlpParams::encoder(&mut rng(4));
        net.layers[0].weights[0] = f64::NAN;
        assert!(matches!(net.validate(), Err(NetError::NonFiniteParam { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_lossless_and_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.json");
        let enc = MlpParams::encoder(&mut rng(8));
        enc.save_json(&path).unwrap();
        let back = MlpParams::load_json(&path).unwrap();
        assert_eq!(enc, back);

        let mangled = std::fs::read_to_string(&path)
            .unwrap()
            .replacen("\"rows\": 64", "\"rows\": 63", 1);
        std::fs::write(&path, mangled).unwrap();
        assert!(MlpParams::load_json(&path).is_err());
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let enc = MlpParams::encoder(&mut rng(6));
        assert!(matches!(
            enc.forward(&[0.0; 12]),
            Err(NetError::InputShape { got: 12, expected: 11 })
        ));
    }
}

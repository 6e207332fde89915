//! The two-head loop model: a small dense classifier over shift profiles and
//! the parameter-free soft-argmax regression head (only its temperature is
//! selected during training).

use std::io::{Read, Write};

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{regress_yaw, LoopError};
use crate::geom::normalize_yaw;

const MAGIC: &[u8; 8] = b"LOOPNET1";

/// Classifier output plus training-state metadata.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub probability: f64,
    pub model_trained: bool,
}

/// One labeled example: a shift profile, whether the pair overlaps, and the
/// ground-truth relative yaw (radians; meaningful for overlap pairs).
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub profile: Vec<f64>,
    pub overlap: bool,
    pub yaw: f64,
}

/// Two dense layers (tanh hidden, sigmoid output) over a shift profile, plus
/// the soft-argmax temperature for the regression head.
///
/// Parameters are stored flat in layer order: `w1` (hidden x input,
/// row-major), `b1`, `w2`, `b2` — the same order they serialize in.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    params: Vec<f64>,
    pub temperature: f64,
    pub trained: bool,
}

impl LoopModel {
    pub fn init(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = hidden_dim * input_dim + hidden_dim + hidden_dim + 1;
        let bound1 = (1.0 / input_dim as f64).sqrt();
        let bound2 = (1.0 / hidden_dim as f64).sqrt();
        let mut params = Vec::with_capacity(n);
        for _ in 0..hidden_dim * input_dim {
            params.push(rng.gen_range(-bound1..bound1));
        }
        params.extend(std::iter::repeat(0.0).take(hidden_dim));
        for _ in 0..hidden_dim {
            params.push(rng.gen_range(-bound2..bound2));
        }
        params.push(0.0);
        Self {
            input_dim,
            hidden_dim,
            params,
            temperature: 0.1,
            trained: false,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], f64) {
        let wi = self.hidden_dim * self.input_dim;
        let w1 = &self.params[..wi];
        let b1 = &self.params[wi..wi + self.hidden_dim];
        let w2 = &self.params[wi + self.hidden_dim..wi + 2 * self.hidden_dim];
        let b2 = self.params[wi + 2 * self.hidden_dim];
        (w1, b1, w2, b2)
    }

    /// Sigmoid output of the classification head.
    pub fn forward(&self, x: &[f64]) -> f64 {
        let (w1, b1, w2, b2) = self.split();
        let mut z2 = b2;
        for h in 0..self.hidden_dim {
            let mut z1 = b1[h];
            for (i, xi) in x.iter().enumerate() {
                z1 += w1[h * self.input_dim + i] * xi;
            }
            z2 += w2[h] * z1.tanh();
        }
        sigmoid(z2)
    }

    /// Overlap probability for a shift profile.
    pub fn classify(&self, profile: &[f64]) -> Classification {
        Classification {
            probability: self.forward(profile),
            model_trained: self.trained,
        }
    }

    /// Mean binary cross-entropy over a batch, plus the parameter gradient.
    pub fn loss_and_grad(&self, batch: &[&TrainingPair]) -> (f64, Vec<f64>) {
        let (w1, b1, w2, b2) = self.split();
        let wi = self.hidden_dim * self.input_dim;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let n = batch.len() as f64;
        for pair in batch {
            let x = &pair.profile;
            let y = if pair.overlap { 1.0 } else { 0.0 };
            let mut hidden = vec![0.0; self.hidden_dim];
            let mut z2 = b2;
            for h in 0..self.hidden_dim {
                let mut z1 = b1[h];
                for (i, xi) in x.iter().enumerate() {
                    z1 += w1[h * self.input_dim + i] * xi;
                }
                hidden[h] = z1.tanh();
                z2 += w2[h] * hidden[h];
            }
            let p = sigmoid(z2);
            let eps = 1e-12;
            loss += -(y * (p + eps).ln() + (1.0 - y) * (1.0 - p + eps).ln()) / n;
            let dz2 = (p - y) / n;
            grad[wi + 2 * self.hidden_dim] += dz2;
            for h in 0..self.hidden_dim {
                grad[wi + self.hidden_dim + h] += dz2 * hidden[h];
                let dz1 = dz2 * w2[h] * (1.0 - hidden[h] * hidden[h]);
                grad[wi + h] += dz1;
                for (i, xi) in x.iter().enumerate() {
                    grad[h * self.input_dim + i] += dz1 * xi;
                }
            }
        }
        (loss, grad)
    }

    fn apply_step(&mut self, grad: &[f64], lr: f64) {
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }

    /// Serialize: magic, dimensions, temperature, then float64 parameters in
    /// layer order, all little-endian.
    pub fn save(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.input_dim as u32).to_le_bytes())?;
        w.write_all(&(self.hidden_dim as u32).to_le_bytes())?;
        w.write_all(&self.temperature.to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save_to_path(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)
    }

    pub fn load(mut r: impl Read) -> Result<Self, LoopError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| LoopError::BadModelFile(e.to_string()))?;
        if &magic != MAGIC {
            return Err(LoopError::BadModelFile("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)
            .map_err(|e| LoopError::BadModelFile(e.to_string()))?;
        let input_dim = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)
            .map_err(|e| LoopError::BadModelFile(e.to_string()))?;
        let hidden_dim = u32::from_le_bytes(u32buf) as usize;
        if input_dim == 0 || hidden_dim == 0 || input_dim > 4096 || hidden_dim > 4096 {
            return Err(LoopError::BadModelFile(format!(
                "implausible dimensions {input_dim}x{hidden_dim}"
            )));
        }
        let mut f64buf = [0u8; 8];
        r.read_exact(&mut f64buf)
            .map_err(|e| LoopError::BadModelFile(e.to_string()))?;
        let temperature = f64::from_le_bytes(f64buf);
        let n = hidden_dim * input_dim + 2 * hidden_dim + 1;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut f64buf)
                .map_err(|e| LoopError::BadModelFile(e.to_string()))?;
            params.push(f64::from_le_bytes(f64buf));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            params,
            temperature,
            trained: true,
        })
    }

    pub fn load_from_path(path: &std::path::Path) -> Result<Self, LoopError> {
        let f = std::fs::File::open(path).map_err(|e| LoopError::BadModelFile(e.to_string()))?;
        Self::load(std::io::BufReader::new(f))
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Training result: the model plus the per-epoch loss trace.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LoopModel,
    pub loss_history: Vec<f64>,
    pub validation_yaw_mae: Option<f64>,
}

/// Candidate temperatures for the regression head.
const TEMPERATURES: [f64; 5] = [0.02, 0.05, 0.1, 0.2, 0.5];

/// Train the classification head by full-batch gradient descent on binary
/// cross-entropy, with the learning rate halved (and the step reverted)
/// whenever an epoch would increase the loss. The regression temperature is
/// selected on a held-out validation split. Deterministic given `seed`.
pub fn train(
    pairs: &[TrainingPair],
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<TrainOutcome, LoopError> {
    if pairs.len() < 100 {
        return Err(LoopError::TooFewPairs {
            got: pairs.len(),
            need: 100,
        });
    }
    let positives = pairs.iter().filter(|p| p.overlap).count();
    if positives == 0 || positives == pairs.len() {
        return Err(LoopError::SingleClassTrainingSet);
    }
    let input_dim = pairs[0].profile.len();

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let split = (pairs.len() * 4) / 5;
    let train_set: Vec<&TrainingPair> = order[..split].iter().map(|&i| &pairs[i]).collect();
    let val_set: Vec<&TrainingPair> = order[split..].iter().map(|&i| &pairs[i]).collect();

    let mut model = LoopModel::init(input_dim, 32, seed);
    let mut lr = learning_rate;
    let mut history = Vec::with_capacity(epochs);
    let (mut loss, mut grad) = model.loss_and_grad(&train_set);
    for _ in 0..epochs {
        let saved = model.params.clone();
        model.apply_step(&grad, lr);
        let (new_loss, new_grad) = model.loss_and_grad(&train_set);
        if new_loss > loss {
            model.params = saved;
            lr *= 0.5;
            if lr < 1e-12 {
                break;
            }
        } else {
            loss = new_loss;
            grad = new_grad;
        }
        history.push(loss);
    }

    // Pick the soft-argmax temperature with the lowest validation yaw MAE.
    let val_positives: Vec<&&TrainingPair> = val_set.iter().filter(|p| p.overlap).collect();
    let mut best = (TEMPERATURES[0], f64::INFINITY);
    let mut val_mae = None;
    if !val_positives.is_empty() {
        for tau in TEMPERATURES {
            let mae: f64 = val_positives
                .iter()
                .map(|p| normalize_yaw(regress_yaw(&p.profile, tau) - p.yaw).abs())
                .sum::<f64>()
                / val_positives.len() as f64;
            if mae < best.1 {
                best = (tau, mae);
            }
        }
        val_mae = Some(best.1);
    }
    model.temperature = best.0;
    model.trained = true;
    Ok(TrainOutcome {
        model,
        loss_history: history,
        validation_yaw_mae: val_mae,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable_pairs(n: usize) -> Vec<TrainingPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n)
            .map(|i| {
                let overlap = i % 2 == 0;
                let shift = i % 60;
                let profile: Vec<f64> = (0..60)
                    .map(|k| {
                        let base: f64 = if overlap {
                            if k == shift {
                                0.05
                            } else {
                                0.6
                            }
                        } else {
                            0.85
                        };
                        (base + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0)
                    })
                    .collect();
                TrainingPair {
                    profile,
                    overlap,
                    yaw: std::f64::consts::TAU * shift as f64 / 60.0,
                }
            })
            .collect()
    }

    #[test]
    fn separable_set_reaches_full_training_accuracy() {
        let pairs = separable_pairs(240);
        let out = train(&pairs, 200, 0.5, 7).unwrap();
        let correct = pairs
            .iter()
            .filter(|p| (out.model.forward(&p.profile) > 0.5) == p.overlap)
            .count();
        assert_eq!(correct, pairs.len());
        assert!(out.model.trained);
    }

    #[test]
    fn training_loss_is_non_increasing() {
        let pairs = separable_pairs(150);
        let out = train(&pairs, 120, 0.8, 8).unwrap();
        for w in out.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {:?}", w);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let pairs = separable_pairs(120);
        let refs: Vec<&TrainingPair> = pairs.iter().take(24).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = LoopModel::init(60, 32, 12);
        let eps = 1e-5;
        for _ in 0..10 {
            for p in &mut model.params {
                *p += rng.gen_range(-0.2..0.2);
            }
            let (_, grad) = model.loss_and_grad(&refs);
            for _ in 0..12 {
                let k = rng.gen_range(0..model.params.len());
                let saved = model.params[k];
                model.params[k] = saved + eps;
                let (lp, _) = model.loss_and_grad(&refs);
                model.params[k] = saved - eps;
                let (lm, _) = model.loss_and_grad(&refs);
                model.params[k] = saved;
                let numeric = (lp - lm) / (2.0 * eps);
                let denom = numeric.abs().max(grad[k].abs()).max(1e-8);
                let rel = (grad[k] - numeric).abs() / denom;
                assert!(rel < 1e-4, "param {k}: {} vs fd {}", grad[k], numeric);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let pairs = separable_pairs(160);
        let a = train(&pairs, 60, 0.5, 13).unwrap();
        let b = train(&pairs, 60, 0.5, 13).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn single_class_is_a_data_error() {
        let pairs: Vec<TrainingPair> = separable_pairs(200)
            .into_iter()
            .map(|mut p| {
                p.overlap = true;
                p
            })
            .collect();
        assert!(matches!(
            train(&pairs, 10, 0.5, 1),
            Err(LoopError::SingleClassTrainingSet)
        ));
    }

    #[test]
    fn too_few_pairs_is_an_error() {
        let pairs = separable_pairs(40);
        assert!(matches!(
            train(&pairs, 10, 0.5, 1),
            Err(LoopError::TooFewPairs { .. })
        ));
    }

    #[test]
    fn untrained_output_is_bounded_even_on_degenerate_profiles() {
        let model = LoopModel::init(60, 32, 3);
        let ones = vec![1.0; 60];
        let c = model.classify(&ones);
        assert!(c.probability.is_finite());
        assert!((0.0..=1.0).contains(&c.probability));
        assert!(!c.model_trained);
    }

    #[test]
    fn serialization_round_trip() {
        let pairs = separable_pairs(140);
        let out = train(&pairs, 40, 0.5, 21).unwrap();
        let mut bytes = Vec::new();
        out.model.save(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], b"LOOPNET1");
        let loaded = LoopModel::load(bytes.as_slice()).unwrap();
        assert_eq!(loaded.input_dim, out.model.input_dim);
        assert_eq!(loaded.parameters(), out.model.parameters());
        assert_eq!(loaded.temperature, out.model.temperature);

        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(matches!(
            LoopModel::load(corrupt.as_slice()),
            Err(LoopError::BadModelFile(_))
        ));
    }
}

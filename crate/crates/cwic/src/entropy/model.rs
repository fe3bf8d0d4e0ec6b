//! Bit-probability predictors: a small fully-connected net over context
//! cuboids, and the adaptive frequency-table baseline over the 5-bit
//! small context, plus the `.cwen` entropy-model file format.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::coder::clamp_prob;
use super::context::{ContextCuboid, CTX_CELLS, SMALL_CONTEXTS};
use super::{ContextCorpus, EntropyError};
use crate::tensor::Tape;
use crate::train::PatienceTracker;

pub const ENTROPY_MAGIC: [u8; 4] = *b"CWEN";
pub const ENTROPY_VERSION: u8 = 1;

/// One-hot input width: 3 symbol states per cuboid cell.
const INPUT: usize = 3 * CTX_CELLS;
const HIDDEN1: usize = 128;
const HIDDEN2: usize = 64;

/// Fully connected 300 -> 128 -> 64 -> 1 predictor over one-hot encoded
/// ternary cuboids; sigmoid output is the probability the bit is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyNet {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl EntropyNet {
    pub fn zeros() -> EntropyNet {
        EntropyNet {
            w1: vec![0.0; HIDDEN1 * INPUT],
            b1: vec![0.0; HIDDEN1],
            w2: vec![0.0; HIDDEN2 * HIDDEN1],
            b2: vec![0.0; HIDDEN2],
            w3: vec![0.0; HIDDEN2],
            b3: vec![0.0; 1],
        }
    }

    /// Weights uniform `+-1/sqrt(fan_in)`, biases zero.
    pub fn init(seed: u64) -> EntropyNet {
        let mut net = EntropyNet::zeros();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |w: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.gen_range(-bound..bound) as f32 as f64;
            }
        };
        fill(&mut net.w1, INPUT);
        fill(&mut net.w2, HIDDEN1);
        fill(&mut net.w3, HIDDEN2);
        net
    }

    fn arrays(&self) -> [&Vec<f64>; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn arrays_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    /// Probability that the current bit is 1, clamped for the coder.
    ///
    /// The one-hot first layer is a gather: for cell q with symbol s only
    /// input q*3+s is hot.
    pub fn predict(&self, cuboid: &ContextCuboid) -> f64 {
        let mut h1 = self.b1.clone();
        for (q, &sym) in cuboid.iter().enumerate() {
            let col = q * 3 + sym as usize;
            for (r, h) in h1.iter_mut().enumerate() {
                *h += self.w1[r * INPUT + col];
            }
        }
        for h in h1.iter_mut() {
            if *h < 0.0 {
                *h = 0.0;
            }
        }
        let mut h2 = self.b2.clone();
        for (r, h) in h2.iter_mut().enumerate() {
            let row = &self.w2[r * HIDDEN1..(r + 1) * HIDDEN1];
            *h += row.iter().zip(&h1).map(|(w, a)| w * a).sum::<f64>();
        }
        for h in h2.iter_mut() {
            if *h < 0.0 {
                *h = 0.0;
            }
        }
        let z = self.b3[0] + self.w3.iter().zip(&h2).map(|(w, a)| w * a).sum::<f64>();
        clamp_prob(1.0 / (1.0 + (-z).exp()))
    }
}

/// Adaptive Laplace-smoothed counts per small context key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqTable {
    pub counts: Vec<[u64; 2]>,
}

impl Default for FreqTable {
    fn default() -> Self {
        FreqTable::new()
    }
}

impl FreqTable {
    pub fn new() -> FreqTable {
        FreqTable {
            counts: vec![[0, 0]; SMALL_CONTEXTS],
        }
    }

    /// `(ones + 1) / (total + 2)`.
    pub fn predict(&self, key: usize) -> f64 {
        let [zeros, ones] = self.counts[key];
        clamp_prob((ones + 1) as f64 / (zeros + ones + 2) as f64)
    }

    /// Must be called with every coded bit, identically on the encode and
    /// decode paths.
    pub fn update(&mut self, key: usize, bit: bool) {
        self.counts[key][bit as usize] += 1;
    }

    /// Fold a harvested corpus into the stored counts (used to persist a
    /// trained table).
    pub fn absorb(&mut self, corpus: &ContextCorpus) {
        for (&key, &bit) in corpus.small.iter().zip(&corpus.bits) {
            self.update(key, bit == 1);
        }
    }
}

/// A predictor for one payload kind.
#[derive(Debug, Clone)]
pub enum Predictor {
    Net(EntropyNet),
    Freq(FreqTable),
}

impl Predictor {
    pub fn nll_bits_one(&self, cuboid: &ContextCuboid, small: usize, bit: u8) -> f64 {
        let p1 = match self {
            Predictor::Net(net) => net.predict(cuboid),
            Predictor::Freq(table) => table.predict(small),
        };
        let q = if bit == 1 { p1 } else { 1.0 - p1 };
        -q.log2()
    }
}

/// Mean negative log-likelihood in bits per bit over a corpus.
pub fn nll_bits(pred: &Predictor, corpus: &ContextCorpus) -> f64 {
    if corpus.bits.is_empty() {
        return 0.0;
    }
    let total: f64 = corpus
        .bits
        .iter()
        .enumerate()
        .map(|(idx, &bit)| pred.nll_bits_one(&corpus.cuboids[idx], corpus.small[idx], bit))
        .sum();
    total / corpus.bits.len() as f64
}

/// Both payload predictors of one entropy-model file.
#[derive(Debug, Clone)]
pub struct EntropyModel {
    pub codes: Predictor,
    pub importance: Predictor,
}

impl EntropyModel {
    pub fn net(seed: u64) -> EntropyModel {
        EntropyModel {
            codes: Predictor::Net(EntropyNet::init(seed)),
            importance: Predictor::Net(EntropyNet::init(seed.wrapping_add(1))),
        }
    }

    pub fn freq() -> EntropyModel {
        EntropyModel {
            codes: Predictor::Freq(FreqTable::new()),
            importance: Predictor::Freq(FreqTable::new()),
        }
    }

    pub fn kind(&self) -> u8 {
        match self.codes {
            Predictor::Net(_) => 0,
            Predictor::Freq(_) => 1,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&ENTROPY_MAGIC);
        out.push(ENTROPY_VERSION);
        out.push(self.kind());
        for pred in [&self.codes, &self.importance] {
            match pred {
                Predictor::Net(net) => {
                    for arr in net.arrays() {
                        for &v in arr {
                            out.extend_from_slice(&(v as f32).to_le_bytes());
                        }
                    }
                }
                Predictor::Freq(table) => {
                    for &[zeros, ones] in &table.counts {
                        out.extend_from_slice(&zeros.to_le_bytes());
                        out.extend_from_slice(&ones.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<EntropyModel, EntropyError> {
        let mut offset = 0usize;
        let mut take = |n: usize| -> Result<&[u8], EntropyError> {
            if offset + n > bytes.len() {
                return Err(EntropyError::Truncated {
                    offset: bytes.len(),
                });
            }
            let s = &bytes[offset..offset + n];
            offset += n;
            Ok(s)
        };
        let magic = take(4)?;
        if magic != ENTROPY_MAGIC {
            let mut found = [0u8; 4];
            found[..magic.len()].copy_from_slice(magic);
            return Err(EntropyError::BadMagic { found });
        }
        let version = take(1)?[0];
        if version != ENTROPY_VERSION {
            return Err(EntropyError::BadVersion(version));
        }
        let kind = take(1)?[0];
        let mut read_pred = || -> Result<Predictor, EntropyError> {
            match kind {
                0 => {
                    let mut net = EntropyNet::zeros();
                    for arr in net.arrays_mut() {
                        for v in arr.iter_mut() {
                            let raw = take(4)?;
                            *v = f32::from_le_bytes(raw.try_into().unwrap()) as f64;
                        }
                    }
                    Ok(Predictor::Net(net))
                }
                1 => {
                    let mut table = FreqTable::new();
                    for entry in table.counts.iter_mut() {
                        entry[0] = u64::from_le_bytes(take(8)?.try_into().unwrap());
                        entry[1] = u64::from_le_bytes(take(8)?.try_into().unwrap());
                    }
                    Ok(Predictor::Freq(table))
                }
                other => Err(EntropyError::BadKind(other)),
            }
        };
        let codes = read_pred()?;
        let importance = read_pred()?;
        if offset != bytes.len() {
            return Err(EntropyError::TrailingBytes {
                offset,
                extra: bytes.len() - offset,
            });
        }
        Ok(EntropyModel { codes, importance })
    }

    pub fn save(&self, path: &Path) -> Result<(), EntropyError> {
        std::fs::write(path, self.to_bytes()).map_err(EntropyError::Io)
    }

    pub fn load(path: &Path) -> Result<EntropyModel, EntropyError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(EntropyError::Io)?;
        EntropyModel::from_bytes(&bytes)
    }
}

/// Hyperparameters for predictor-net training.
#[derive(Debug, Clone)]
pub struct EntropyTrainConfig {
    pub lr_ladder: Vec<f64>,
    pub steps_per_stage: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps between full-corpus NLL evaluations for the stopping rule.
    pub eval_every: usize,
    pub ma_window: usize,
    pub patience: usize,
}

impl Default for EntropyTrainConfig {
    fn default() -> Self {
        EntropyTrainConfig {
            lr_ladder: vec![1e-4, 1e-5, 1e-6],
            steps_per_stage: 2000,
            batch_size: 128,
            seed: 0,
            eval_every: 50,
            ma_window: 3,
            patience: 3,
        }
    }
}

/// Masked cross-entropy in bits for a batch of predictions, as a tape
/// node (the harvest step already dropped masked-out bits, so every
/// corpus entry carries weight 1).
fn bce_bits_node(
    tape: &mut Tape,
    q: crate::tensor::TensorId,
    targets: Vec<f64>,
) -> crate::tensor::TensorId {
    let ln2 = std::f64::consts::LN_2;
    let qd = tape.data(q);
    assert_eq!(qd.len(), targets.len());
    let clamp = |v: f64| v.clamp(1e-9, 1.0 - 1e-9);
    let total: f64 = qd
        .iter()
        .zip(&targets)
        .map(|(&qv, &c)| {
            let qv = clamp(qv);
            -(c * qv.ln() + (1.0 - c) * (1.0 - qv).ln()) / ln2
        })
        .sum();
    let out_id = tape.next_id();
    let needs = tape.value(q).requires_grad();
    tape.push_node(
        vec![1],
        vec![total],
        needs.then(|| -> crate::tensor::BackwardFn {
            Box::new(move |tape, store| {
                let Some(g) = store.grad(out_id).map(<[f64]>::to_vec) else {
                    return;
                };
                let qd = tape.data(q);
                let dq: Vec<f64> = qd
                    .iter()
                    .zip(&targets)
                    .map(|(&qv, &c)| {
                        let qv = clamp(qv);
                        g[0] * (-(c / qv) + (1.0 - c) / (1.0 - qv)) / ln2
                    })
                    .collect();
                store.accumulate(q, &dq);
            })
        }),
    )
}

/// Train a predictor net on a harvested corpus with ADAM over the
/// learning-rate ladder. Returns the trained net and its final training
/// NLL (bits per bit).
pub fn train_net(
    start: &EntropyNet,
    corpus: &ContextCorpus,
    cfg: &EntropyTrainConfig,
) -> Result<(EntropyNet, f64), EntropyError> {
    if corpus.bits.is_empty() {
        return Err(EntropyError::EmptyCorpus);
    }
    let mut net = start.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = net.arrays().iter().map(|a| a.len()).collect();
    let mut m: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut v: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut t = 0u64;

    for &lr in &cfg.lr_ladder {
        let mut tracker = PatienceTracker::new(cfg.ma_window, cfg.patience);
        for step in 0..cfg.steps_per_stage {
            let batch: Vec<usize> = (0..cfg.batch_size)
                .map(|_| rng.gen_range(0..corpus.bits.len()))
                .collect();
            let bsz = batch.len();

            let mut tape = Tape::new();
            // Examples ride the spatial axis so each layer is one GEMM:
            // a 1x1 conv over a [1, 300, B, 1] stack is a per-example
            // linear map.
            let mut input = vec![0.0; bsz * INPUT];
            let mut targets = Vec::with_capacity(bsz);
            for (b, &idx) in batch.iter().enumerate() {
                for (q, &sym) in corpus.cuboids[idx].iter().enumerate() {
                    input[(q * 3 + sym as usize) * bsz + b] = 1.0;
                }
                targets.push(corpus.bits[idx] as f64);
            }
            let x = tape.input(&[1, INPUT, bsz, 1], input, false);
            let w1 = tape.input(&[HIDDEN1, INPUT, 1, 1], net.w1.clone(), true);
            let b1 = tape.input(&[HIDDEN1], net.b1.clone(), true);
            let w2 = tape.input(&[HIDDEN2, HIDDEN1, 1, 1], net.w2.clone(), true);
            let b2 = tape.input(&[HIDDEN2], net.b2.clone(), true);
            let w3 = tape.input(&[1, HIDDEN2, 1, 1], net.w3.clone(), true);
            let b3 = tape.input(&[1], net.b3.clone(), true);
            let h1 = tape.conv2d(x, w1, b1, 1, 0)?;
            let h1 = tape.relu(h1);
            let h2 = tape.conv2d(h1, w2, b2, 1, 0)?;
            let h2 = tape.relu(h2);
            let z = tape.conv2d(h2, w3, b3, 1, 0)?;
            let q = tape.sigmoid(z);
            let loss = bce_bits_node(&mut tape, q, targets);
            let _ = bsz;

            let store = tape.backward(loss)?;
            t += 1;
            let grads = [
                store.grad(w1).map(<[f64]>::to_vec),
                store.grad(b1).map(<[f64]>::to_vec),
                store.grad(w2).map(<[f64]>::to_vec),
                store.grad(b2).map(<[f64]>::to_vec),
                store.grad(w3).map(<[f64]>::to_vec),
                store.grad(b3).map(<[f64]>::to_vec),
            ];
            for (i, arr) in net.arrays_mut().into_iter().enumerate() {
                let g = grads[i].clone().unwrap_or_else(|| vec![0.0; arr.len()]);
                crate::train::adam_update(arr, &g, &mut m[i], &mut v[i], lr, t);
            }
            // The stopping rule watches the full-corpus NLL, which is
            // smooth; minibatch losses are too noisy to detect a plateau.
            if (step + 1) % cfg.eval_every == 0 {
                let full = nll_bits(&Predictor::Net(net.clone()), corpus);
                if tracker.observe(full) {
                    break;
                }
            }
        }
    }
    let final_nll = nll_bits(&Predictor::Net(net.clone()), corpus);
    Ok((net, final_nll))
}

//! Hashed word n-gram logistic model.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic     4 bytes  "HNGB"
//! version   u16      currently 1
//! dim       u32      number of hash buckets D
//! k         u8       number of n-gram orders
//! orders    k x u8   e.g. [1, 2]
//! bias      f64
//! weights   D x f64
//! meta_len  u32
//! meta      meta_len bytes of JSON (TrainedOn)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::hash::Hasher;

use super::eval::{evaluate, EvalReport};
use super::{tokenize, ClassifierError};

pub const DEFAULT_DIM: usize = 1 << 18;
pub const DEFAULT_ORDERS: [u8; 2] = [1, 2];

const MAGIC: &[u8; 4] = b"HNGB";
const VERSION: u16 = 1;
const MAX_DIM: usize = 1 << 24;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainedOn {
    pub documents: usize,
    pub positives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    dim: usize,
    orders: Vec<u8>,
    bias: f64,
    weights: Vec<f64>,
    trained_on: TrainedOn,
    model_id: String,
}

impl Default for BaselineModel {
    /// The untrained model. Scoring with it is an error.
    fn default() -> Self {
        BaselineModel {
            dim: 0,
            orders: DEFAULT_ORDERS.to_vec(),
            bias: 0.0,
            weights: Vec::new(),
            trained_on: TrainedOn::default(),
            model_id: "baseline-untrained".into(),
        }
    }
}

/// Sparse feature vector, L2-normalized, sorted by bucket.
pub type Features = Vec<(usize, f64)>;

fn bucket(gram: &str, order: u8, dim: usize) -> usize {
    let mut h = FnvHasher::default();
    h.write_u8(order);
    h.write(gram.as_bytes());
    (h.finish() % dim as u64) as usize
}

pub fn featurize(tokens: &[String], orders: &[u8], dim: usize) -> Features {
    let mut idx = Vec::new();
    for &n in orders {
        let n = n as usize;
        if n == 0 || tokens.len() < n {
            continue;
        }
        for w in tokens.windows(n) {
            idx.push(bucket(&w.join(" "), n as u8, dim));
        }
    }
    idx.sort_unstable();
    let mut out: Features = Vec::new();
    for i in idx {
        match out.last_mut() {
            Some((j, c)) if *j == i => *c += 1.0,
            _ => out.push((i, 1.0)),
        }
    }
    let norm = out.iter().map(|(_, c)| c * c).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, c) in &mut out {
            *c /= norm;
        }
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl BaselineModel {
    /// All-zero weights: every input scores exactly 0.5.
    pub fn zeroed(dim: usize) -> Self {
        Self::from_parts(
            dim,
            DEFAULT_ORDERS.to_vec(),
            0.0,
            vec![0.0; dim],
            TrainedOn::default(),
        )
    }

    fn from_parts(
        dim: usize,
        orders: Vec<u8>,
        bias: f64,
        weights: Vec<f64>,
        trained_on: TrainedOn,
    ) -> Self {
        let mut m = BaselineModel {
            dim,
            orders,
            bias,
            weights,
            trained_on,
            model_id: String::new(),
        };
        m.model_id = m.fingerprint();
        m
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update(&self.orders);
        h.update(self.bias.to_le_bytes());
        for w in &self.weights {
            h.update(w.to_le_bytes());
        }
        format!("baseline-hng-{}", &hex::encode(h.finalize())[..12])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn orders(&self) -> &[u8] {
        &self.orders
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn trained_on(&self) -> &TrainedOn {
        &self.trained_on
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn is_trained(&self) -> bool {
        self.dim > 0 && self.weights.len() == self.dim
    }

    fn margin(&self, x: &Features) -> f64 {
        self.bias + x.iter().map(|&(i, v)| self.weights[i] * v).sum::<f64>()
    }

    pub fn score_tokens(&self, tokens: &[String]) -> Result<f64, ClassifierError> {
        if !self.is_trained() {
            return Err(ClassifierError::Untrained);
        }
        Ok(sigmoid(self.margin(&featurize(
            tokens,
            &self.orders,
            self.dim,
        ))))
    }

    pub fn score_text(&self, text: &str) -> Result<f64, ClassifierError> {
        self.score_tokens(&tokenize(text))
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        let mut buf = Vec::with_capacity(self.dim * 8 + 64);
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| ClassifierError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        let f = std::fs::File::open(path).map_err(|e| ClassifierError::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), ClassifierError> {
        if !self.is_trained() {
            return Err(ClassifierError::Untrained);
        }
        let meta = serde_json::to_vec(&self.trained_on)
            .map_err(|e| ClassifierError::Format(e.to_string()))?;
        let io = |e: std::io::Error| ClassifierError::Format(e.to_string());
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.dim as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&[self.orders.len() as u8]).map_err(io)?;
        w.write_all(&self.orders).map_err(io)?;
        w.write_all(&self.bias.to_le_bytes()).map_err(io)?;
        for x in &self.weights {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
        w.write_all(&(meta.len() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&meta).map_err(io)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ClassifierError> {
        fn exact<R: Read, const N: usize>(
            r: &mut R,
            what: &str,
        ) -> Result<[u8; N], ClassifierError> {
            let mut b = [0u8; N];
            r.read_exact(&mut b)
                .map_err(|_| ClassifierError::Format(format!("truncated model file at {what}")))?;
            Ok(b)
        }
        let magic: [u8; 4] = exact(r, "magic")?;
        if &magic != MAGIC {
            return Err(ClassifierError::Format(
                "bad magic, not a baseline model file".into(),
            ));
        }
        let version = u16::from_le_bytes(exact(r, "version")?);
        if version != VERSION {
            return Err(ClassifierError::Format(format!(
                "unsupported model version {version}"
            )));
        }
        let dim = u32::from_le_bytes(exact(r, "dim")?) as usize;
        if dim == 0 || dim > MAX_DIM {
            return Err(ClassifierError::Format(format!(
                "feature dimension {dim} out of range"
            )));
        }
        let [k] = exact::<_, 1>(r, "order count")?;
        let mut orders = vec![0u8; k as usize];
        r.read_exact(&mut orders)
            .map_err(|_| ClassifierError::Format("truncated model file at orders".into()))?;
        let bias = f64::from_le_bytes(exact(r, "bias")?);
        let mut weights = Vec::with_capacity(dim);
        for _ in 0..dim {
            weights.push(f64::from_le_bytes(exact(r, "weights")?));
        }
        let meta_len = u32::from_le_bytes(exact(r, "metadata length")?) as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)
            .map_err(|_| ClassifierError::Format("truncated model file at metadata".into()))?;
        let trained_on: TrainedOn = serde_json::from_slice(&meta)
            .map_err(|e| ClassifierError::Format(format!("metadata: {e}")))?;
        Ok(Self::from_parts(dim, orders, bias, weights, trained_on))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Fraction of the shuffled corpus held out for evaluation; 0 disables.
    pub validation_fraction: f64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: DEFAULT_DIM,
            epochs: 20,
            learning_rate: 1.0,
            seed: 42,
            validation_fraction: 0.0,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: BaselineModel,
    pub validation: Option<EvalReport>,
}

/// Averaged stochastic gradient descent on logistic loss.
///
/// The average is kept lazily: `acc` collects `step * update`, and the
/// averaged weights are `w - acc / steps`.
pub fn train_baseline(
    corpus: &[(String, bool)],
    config: &TrainConfig,
) -> Result<TrainOutcome, ClassifierError> {
    if corpus.is_empty() {
        return Err(ClassifierError::EmptyCorpus);
    }
    if config.dim == 0 || config.dim > MAX_DIM {
        return Err(ClassifierError::Config(format!(
            "feature dimension {} out of range",
            config.dim
        )));
    }
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(ClassifierError::Config(
            "validation_fraction must be in [0, 1)".into(),
        ));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    order.shuffle(&mut rng);
    let held = (corpus.len() as f64 * config.validation_fraction).round() as usize;
    let held = held.min(corpus.len().saturating_sub(1));
    let (valid_idx, train_idx) = order.split_at(held);
    let mut train_idx = train_idx.to_vec();

    let positives = train_idx.iter().filter(|&&i| corpus[i].1).count();
    if positives == 0 || positives == train_idx.len() {
        return Err(ClassifierError::SingleLabel);
    }

    let orders = DEFAULT_ORDERS.to_vec();
    let feats: Vec<Features> = corpus
        .iter()
        .map(|(t, _)| featurize(&tokenize(t), &orders, config.dim))
        .collect();

    let mut w = vec![0.0f64; config.dim];
    let mut acc = vec![0.0f64; config.dim];
    let (mut b, mut b_acc) = (0.0f64, 0.0f64);
    let mut step = 1.0f64;
    for _ in 0..config.epochs.max(1) {
        train_idx.shuffle(&mut rng);
        for &i in &train_idx {
            let x = &feats[i];
            let y = if corpus[i].1 { 1.0 } else { 0.0 };
            let z = b + x.iter().map(|&(j, v)| w[j] * v).sum::<f64>();
            let g = config.learning_rate * (sigmoid(z) - y);
            if g != 0.0 {
                for &(j, v) in x {
                    w[j] -= g * v;
                    acc[j] -= step * g * v;
                }
                b -= g;
                b_acc -= step * g;
            }
            step += 1.0;
        }
    }
    for (wj, aj) in w.iter_mut().zip(&acc) {
        *wj -= aj / step;
    }
    b -= b_acc / step;

    let trained_on = TrainedOn {
        documents: train_idx.len(),
        positives,
        epochs: config.epochs.max(1),
        learning_rate: config.learning_rate,
        seed: config.seed,
    };
    let model = BaselineModel::from_parts(config.dim, orders, b, w, trained_on);

    let validation = if valid_idx.is_empty() {
        None
    } else {
        let preds: Vec<bool> = valid_idx
            .iter()
            .map(|&i| sigmoid(model.margin(&feats[i])) >= config.threshold)
            .collect();
        let gold: Vec<bool> = valid_idx.iter().map(|&i| corpus[i].1).collect();
        Some(evaluate(&preds, &gold)?)
    };
    Ok(TrainOutcome { model, validation })
}

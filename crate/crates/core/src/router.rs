//! Persona-selection router: a two-layer network mapping a query embedding to
//! a softmax relevance over personas, trained through the entity prediction
//! `relevance^T * (matrix / 3)` against gold label sets.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::EncoderSpec;
use crate::optim::{AdamW, AdamWConfig};
use crate::personas::ConfidenceMatrix;
use crate::text::derive_seed;

pub const BCE_EPS: f64 = 1e-7;
const FORMAT: &str = "querylabel-router-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EntityWeighting {
    #[default]
    Uniform,
    /// Weight each entity by the inverse of its gold prevalence, normalized to mean 1.
    InverseFrequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterTrainConfig {
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub entity_weighting: EntityWeighting,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        RouterTrainConfig {
            hidden_dim: 64,
            dropout_rate: 0.1,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            optimizer: AdamWConfig::default(),
            entity_weighting: EntityWeighting::Uniform,
        }
    }
}

impl RouterTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("epochs, batch_size and hidden_dim must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Weights are row-major: `w1` is `d x h`, `w2` is `h x P`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterModel {
    pub format: String,
    pub d: usize,
    pub h: usize,
    pub persona_ids: Vec<String>,
    pub registry_hash: String,
    pub dropout_rate: f64,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    #[serde(default)]
    pub encoder: Option<EncoderSpec>,
    #[serde(default)]
    pub train_config: Option<RouterTrainConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_history: Vec<LossPoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterGradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl RouterGradients {
    fn zeros(m: &RouterModel) -> Self {
        RouterGradients {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
        }
    }

    fn add_scaled(&mut self, other: &RouterGradients, s: f64) {
        for (a, b) in [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.b2, &other.b2),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }
}

/// One training example: an embedding, its confidence matrix and the gold
/// entity indicator (registry order).
#[derive(Clone, Debug, PartialEq)]
pub struct RouterExample {
    pub embedding: Vec<f64>,
    pub matrix: ConfidenceMatrix,
    pub gold: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

pub fn write_loss_csv(mut writer: impl Write, history: &[LossPoint]) -> Result<()> {
    writeln!(writer, "epoch,batch,loss")?;
    for p in history {
        writeln!(writer, "{},{},{}", p.epoch, p.batch, p.loss)?;
    }
    Ok(())
}

struct Forward {
    z1: Vec<f64>,
    hidden: Vec<f64>,
    mask: Vec<f64>,
    relevance: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn dropout_mask(h: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..h)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

impl RouterModel {
    /// Seeded uniform fan-in initialization, zero biases.
    pub fn init(d: usize, h: usize, persona_ids: Vec<String>, registry_hash: &str, dropout_rate: f64, seed: u64) -> Result<Self> {
        if d == 0 || h == 0 || persona_ids.is_empty() {
            return Err(Error::Shape(format!("router needs d, h, P >= 1 (got {d}, {h}, {})", persona_ids.len())));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        let p = persona_ids.len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "router-init"));
        let a1 = 1.0 / (d as f64).sqrt();
        let a2 = 1.0 / (h as f64).sqrt();
        let w1 = (0..d * h).map(|_| rng.gen_range(-a1..a1)).collect();
        let w2 = (0..h * p).map(|_| rng.gen_range(-a2..a2)).collect();
        Ok(RouterModel {
            format: FORMAT.into(),
            d,
            h,
            persona_ids,
            registry_hash: registry_hash.to_owned(),
            dropout_rate,
            w1,
            b1: vec![0.0; h],
            w2,
            b2: vec![0.0; p],
            encoder: None,
            train_config: None,
            loss_history: Vec::new(),
        })
    }

    pub fn num_personas(&self) -> usize {
        self.persona_ids.len()
    }

    fn check_shapes(&self) -> Result<()> {
        let p = self.num_personas();
        if self.w1.len() != self.d * self.h
            || self.b1.len() != self.h
            || self.w2.len() != self.h * p
            || self.b2.len() != p
        {
            return Err(Error::Shape("router weight arrays do not match d, h, P".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn forward_with_mask(&self, x: &[f64], mask: Option<Vec<f64>>) -> Result<Forward> {
        if x.len() != self.d {
            return Err(Error::Shape(format!("embedding has dimension {}, router expects {}", x.len(), self.d)));
        }
        let h = self.h;
        let mut z1 = self.b1.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.w1[i * h..(i + 1) * h];
            for (z, w) in z1.iter_mut().zip(row) {
                *z += xi * w;
            }
        }
        let mask = mask.unwrap_or_else(|| vec![1.0; h]);
        let hidden: Vec<f64> = z1.iter().zip(&mask).map(|(z, m)| z.max(0.0) * m).collect();
        let p = self.num_personas();
        let mut logits = self.b2.clone();
        for (j, &hj) in hidden.iter().enumerate() {
            if hj == 0.0 {
                continue;
            }
            let row = &self.w2[j * p..(j + 1) * p];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += hj * w;
            }
        }
        Ok(Forward {
            z1,
            hidden,
            mask,
            relevance: softmax(&logits),
        })
    }

    /// Persona relevance (softmax). In train mode a dropout mask drawn from
    /// `seed` is applied to the hidden layer; otherwise `seed` is ignored.
    pub fn forward(&self, embedding: &[f64], train_mode: bool, seed: u64) -> Result<Vec<f64>> {
        let mask = (train_mode && self.dropout_rate > 0.0).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            dropout_mask(self.h, self.dropout_rate, &mut rng)
        });
        Ok(self.forward_with_mask(embedding, mask)?.relevance)
    }

    /// Loss and parameter gradients for one example. `dropout_seed` selects a
    /// train-mode mask; `None` runs in inference mode.
    pub fn loss_and_gradients(
        &self,
        example: &RouterExample,
        dropout_seed: Option<u64>,
        entity_weights: Option<&[f64]>,
    ) -> Result<(f64, RouterGradients)> {
        let mask = match dropout_seed {
            Some(s) if self.dropout_rate > 0.0 => {
                Some(dropout_mask(self.h, self.dropout_rate, &mut ChaCha8Rng::seed_from_u64(s)))
            }
            _ => None,
        };
        self.loss_and_gradients_masked(example, mask, entity_weights)
    }

    fn loss_and_gradients_masked(
        &self,
        example: &RouterExample,
        mask: Option<Vec<f64>>,
        entity_weights: Option<&[f64]>,
    ) -> Result<(f64, RouterGradients)> {
        let fwd = self.forward_with_mask(&example.embedding, mask)?;
        let m = &example.matrix;
        let scores = predict_entities(&fwd.relevance, m)?;
        let e_count = scores.len();
        if example.gold.len() != e_count {
            return Err(Error::Shape(format!("gold has {} entities, matrix has {e_count}", example.gold.len())));
        }
        let (loss, ds) = bce_loss(&scores, &example.gold, entity_weights)?;

        let p = self.num_personas();
        let h = self.h;
        // d loss / d relevance
        let dr: Vec<f64> = (0..p)
            .map(|q| {
                let row = m.row(q);
                (0..e_count).map(|e| ds[e] * row[e] as f64 / 3.0).sum()
            })
            .collect();
        let r = &fwd.relevance;
        let dot: f64 = r.iter().zip(&dr).map(|(a, b)| a * b).sum();
        let dl: Vec<f64> = (0..p).map(|q| r[q] * (dr[q] - dot)).collect();

        let mut g = RouterGradients::zeros(self);
        g.b2.copy_from_slice(&dl);
        let mut dz1 = vec![0.0; h];
        for j in 0..h {
            let row = &self.w2[j * p..(j + 1) * p];
            let mut dh = 0.0;
            for q in 0..p {
                g.w2[j * p + q] = fwd.hidden[j] * dl[q];
                dh += row[q] * dl[q];
            }
            dz1[j] = if fwd.z1[j] > 0.0 { dh * fwd.mask[j] } else { 0.0 };
        }
        g.b1.copy_from_slice(&dz1);
        for (i, &xi) in example.embedding.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for j in 0..h {
                g.w1[i * h + j] = xi * dz1[j];
            }
        }
        Ok((loss, g))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RouterModel = serde_json::from_str(&text)?;
        if m.format != FORMAT {
            return Err(Error::Config(format!("unsupported router format {:?}", m.format)));
        }
        m.check_shapes()?;
        Ok(m)
    }
}

/// Mean (optionally weighted) per-entity binary cross-entropy on clamped
/// scores, with its gradient with respect to the unclamped scores.
pub fn bce_loss(scores: &[f64], gold: &[bool], weights: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
    let n = scores.len();
    if gold.len() != n || weights.is_some_and(|w| w.len() != n) {
        return Err(Error::Shape("scores, gold and weights must have equal length".into()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for e in 0..n {
        let w = weights.map_or(1.0, |w| w[e]);
        let s = scores[e];
        let c = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let inside = s > BCE_EPS && s < 1.0 - BCE_EPS;
        if gold[e] {
            loss -= w * c.ln();
            if inside {
                grad[e] = -w / c / n as f64;
            }
        } else {
            loss -= w * (1.0 - c).ln();
            if inside {
                grad[e] = w / (1.0 - c) / n as f64;
            }
        }
    }
    Ok((loss / n as f64, grad))
}

/// `relevance^T * (values / 3)`: entity scores in [0, 1] when relevance is a
/// probability vector.
pub fn predict_entities(relevance: &[f64], matrix: &ConfidenceMatrix) -> Result<Vec<f64>> {
    if relevance.len() != matrix.num_personas() {
        return Err(Error::Shape(format!(
            "relevance has {} personas, matrix has {}",
            relevance.len(),
            matrix.num_personas()
        )));
    }
    let mut out = vec![0.0; matrix.num_entities()];
    for (p, &r) in relevance.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(matrix.row(p)) {
            *o += r * v as f64 / 3.0;
        }
    }
    Ok(out)
}

/// Checks that the matrix rows and columns line up with the model.
pub fn check_matrix(model: &RouterModel, matrix: &ConfidenceMatrix) -> Result<()> {
    if matrix.registry_hash != model.registry_hash {
        return Err(Error::RegistryMismatch {
            expected: model.registry_hash.clone(),
            found: matrix.registry_hash.clone(),
        });
    }
    if matrix.persona_ids != model.persona_ids {
        return Err(Error::Shape("matrix persona order differs from the router's".into()));
    }
    Ok(())
}

/// Indices of the `k` most relevant personas, by descending relevance with
/// ties broken by persona id.
pub fn top_k_indices(relevance: &[f64], persona_ids: &[String], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > relevance.len() {
        return Err(Error::InvalidArgument(format!("k must be in 1..={}, got {k}", relevance.len())));
    }
    let mut idx: Vec<usize> = (0..relevance.len()).collect();
    idx.sort_by(|&a, &b| {
        relevance[b]
            .total_cmp(&relevance[a])
            .then_with(|| persona_ids[a].cmp(&persona_ids[b]))
    });
    idx.truncate(k);
    Ok(idx)
}

pub fn select_top_k(model: &RouterModel, embedding: &[f64], k: usize) -> Result<Vec<String>> {
    let r = model.forward(embedding, false, 0)?;
    Ok(top_k_indices(&r, &model.persona_ids, k)?
        .into_iter()
        .map(|i| model.persona_ids[i].clone())
        .collect())
}

fn entity_weights(examples: &[RouterExample], weighting: EntityWeighting) -> Option<Vec<f64>> {
    match weighting {
        EntityWeighting::Uniform => None,
        EntityWeighting::InverseFrequency => {
            let e = examples[0].gold.len();
            let mut counts = vec![0usize; e];
            for ex in examples {
                for (c, &g) in counts.iter_mut().zip(&ex.gold) {
                    *c += g as usize;
                }
            }
            let raw: Vec<f64> = counts.iter().map(|&c| 1.0 / (c.max(1) as f64)).collect();
            let mean = raw.iter().sum::<f64>() / e as f64;
            Some(raw.into_iter().map(|w| w / mean).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedRouter {
    pub model: RouterModel,
    pub history: Vec<LossPoint>,
}

/// Mini-batch AdamW training; deterministic given `config.seed`.
pub fn train_router(examples: &[RouterExample], config: &RouterTrainConfig) -> Result<TrainedRouter> {
    config.validate()?;
    let first = examples.first().ok_or(Error::Empty("router training set"))?;
    let d = first.embedding.len();
    let e = first.gold.len();
    for ex in examples {
        if ex.embedding.len() != d || ex.gold.len() != e {
            return Err(Error::Shape("router examples disagree on embedding or entity dimension".into()));
        }
        if ex.matrix.persona_ids != first.matrix.persona_ids || ex.matrix.registry_hash != first.matrix.registry_hash {
            return Err(Error::Shape("router examples disagree on persona order or registry".into()));
        }
        if ex.matrix.num_entities() != e {
            return Err(Error::Shape("matrix width differs from gold length".into()));
        }
        if ex.embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("embedding has non-finite entries".into()));
        }
    }
    let mut model = RouterModel::init(
        d,
        config.hidden_dim,
        first.matrix.persona_ids.clone(),
        &first.matrix.registry_hash,
        config.dropout_rate,
        config.seed,
    )?;
    model.train_config = Some(config.clone());
    let weights = entity_weights(examples, config.entity_weighting);

    let mut opt = [
        AdamW::new(config.optimizer, model.w1.len()),
        AdamW::new(config.optimizer, model.b1.len()),
        AdamW::new(config.optimizer, model.w2.len()),
        AdamW::new(config.optimizer, model.b2.len()),
    ];
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "router-shuffle"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "router-dropout"));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::new();
    let mut last_finite = f64::NAN;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut grad = RouterGradients::zeros(&model);
            let mut loss = 0.0;
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let mask = (model.dropout_rate > 0.0)
                    .then(|| dropout_mask(model.h, model.dropout_rate, &mut dropout_rng));
                let (l, g) = model.loss_and_gradients_masked(&examples[i], mask, weights.as_deref())?;
                loss += l * scale;
                grad.add_scaled(&g, scale);
            }
            if !loss.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch,
                    last_finite,
                });
            }
            last_finite = loss;
            history.push(LossPoint { epoch, batch, loss });
            opt[0].step(&mut model.w1, &grad.w1);
            opt[1].step(&mut model.b1, &grad.b1);
            opt[2].step(&mut model.w2, &grad.w2);
            opt[3].step(&mut model.b2, &grad.b2);
        }
    }
    model.loss_history = history.clone();
    Ok(TrainedRouter { model, history })
}

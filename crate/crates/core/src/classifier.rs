//! The distilled multi-label classifier: a text encoder feeding one small
//! two-layer head per entity, trained with logistic loss on weak labels, and
//! per-entity decision thresholds.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{Annotation, AnnotationStore, Confidence};
use crate::data::QueryRecord;
use crate::error::{Error, Result};
use crate::evaluation::Counts;
use crate::features::{Encoder, EncoderSpec};
use crate::optim::{AdamW, AdamWConfig};
use crate::taxonomy::{EntityId, EntityRegistry};
use crate::text::derive_seed;

const FORMAT: &str = "querylabel-classifier-v1";
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Stored thresholds are kept inside `[THRESHOLD_EPS, 1 - THRESHOLD_EPS]`.
pub const THRESHOLD_EPS: f64 = 1e-9;

/// Per-query entity indicators derived from one annotator's output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeakLabelSet {
    pub annotator: String,
    pub min_confidence: Confidence,
    pub registry_hash: String,
    pub labels: BTreeMap<String, Vec<bool>>,
}

#[derive(Serialize, Deserialize)]
struct WeakLabelLine {
    id: String,
    annotator: String,
    min_confidence: Confidence,
    entities: Vec<String>,
}

/// Indicator is set iff the annotated confidence is at least `min_confidence`.
pub fn weak_labels_from_annotations(
    registry: &EntityRegistry,
    annotations: &AnnotationStore,
    min_confidence: Confidence,
    annotator: &str,
) -> WeakLabelSet {
    WeakLabelSet {
        annotator: annotator.to_owned(),
        min_confidence,
        registry_hash: registry.hash().to_owned(),
        labels: annotations
            .iter()
            .map(|(id, a)| (id.clone(), a.indicator(registry.len(), min_confidence)))
            .collect(),
    }
}

impl WeakLabelSet {
    pub fn write_jsonl(&self, mut w: impl Write, registry: &EntityRegistry) -> Result<()> {
        registry.ensure_hash(&self.registry_hash)?;
        for (id, ind) in &self.labels {
            let line = WeakLabelLine {
                id: id.clone(),
                annotator: self.annotator.clone(),
                min_confidence: self.min_confidence,
                entities: registry
                    .ids()
                    .filter(|e| ind[e.index()])
                    .map(|e| registry.name(e).to_owned())
                    .collect(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(reader: impl Read, registry: &EntityRegistry) -> Result<Self> {
        let mut out = WeakLabelSet {
            annotator: String::new(),
            min_confidence: Confidence::High,
            registry_hash: registry.hash().to_owned(),
            labels: BTreeMap::new(),
        };
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: WeakLabelLine = serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
            let mut ind = vec![false; registry.len()];
            for name in &rec.entities {
                let e = registry.entity(name).map_err(|e| Error::parse(i + 1, e.to_string()))?;
                ind[e.index()] = true;
            }
            out.annotator = rec.annotator;
            out.min_confidence = rec.min_confidence;
            out.labels.insert(rec.id, ind);
        }
        Ok(out)
    }
}

/// A query with its entity indicator in registry order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledQuery {
    pub id: String,
    pub text: String,
    pub labels: Vec<bool>,
}

/// Joins query records with their labels; records without labels are an error.
pub fn join_labels(records: &[QueryRecord], labels: &BTreeMap<String, Vec<bool>>) -> Result<Vec<LabeledQuery>> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| !labels.contains_key(&r.id))
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingAnnotation(missing));
    }
    Ok(records
        .iter()
        .map(|r| LabeledQuery {
            id: r.id.clone(),
            text: r.text.clone(),
            labels: labels[&r.id].clone(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub encoder: EncoderSpec,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            encoder: EncoderSpec::hashed(1024),
            hidden_dim: 32,
            epochs: 30,
            batch_size: 32,
            patience: 5,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("epochs, batch_size and hidden_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// One entity head: `u1` is `D x m` row-major, `u2` has `m` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub u1: Vec<f64>,
    pub c1: Vec<f64>,
    pub u2: Vec<f64>,
    pub c2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradients {
    pub u1: Vec<f64>,
    pub c1: Vec<f64>,
    pub u2: Vec<f64>,
    pub c2: f64,
}

impl HeadGradients {
    fn zeros(d: usize, m: usize) -> Self {
        HeadGradients {
            u1: vec![0.0; d * m],
            c1: vec![0.0; m],
            u2: vec![0.0; m],
            c2: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub format: String,
    pub encoder: EncoderSpec,
    pub registry_hash: String,
    pub entity_ids: Vec<String>,
    pub d: usize,
    pub m: usize,
    pub heads: Vec<Head>,
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub train_config: Option<ClassifierConfig>,
}

/// `-(y ln s(z) + (1 - y) ln(1 - s(z)))` in the overflow-free form.
pub fn bce_with_logits(z: f64, y: bool) -> f64 {
    let y = if y { 1.0 } else { 0.0 };
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sparse input: `(index, value)` pairs.
pub type SparseVec = [(usize, f64)];

impl ClassifierModel {
    /// Seeded uniform fan-in initialization, zero biases, thresholds 0.5.
    pub fn init(registry: &EntityRegistry, encoder: EncoderSpec, m: usize, seed: u64) -> Result<Self> {
        let d = encoder.dim();
        if d == 0 || m == 0 {
            return Err(Error::Shape("classifier needs D, m >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "classifier-init"));
        let a1 = 1.0 / (d as f64).sqrt();
        let a2 = 1.0 / (m as f64).sqrt();
        let heads = registry
            .ids()
            .map(|_| Head {
                u1: (0..d * m).map(|_| rng.gen_range(-a1..a1)).collect(),
                c1: vec![0.0; m],
                u2: (0..m).map(|_| rng.gen_range(-a2..a2)).collect(),
                c2: 0.0,
            })
            .collect();
        Ok(ClassifierModel {
            format: FORMAT.into(),
            encoder,
            registry_hash: registry.hash().to_owned(),
            entity_ids: registry.entities().iter().map(|e| e.id.clone()).collect(),
            d,
            m,
            heads,
            thresholds: vec![DEFAULT_THRESHOLD; registry.len()],
            train_config: None,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.heads.len()
    }

    fn check(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Config(format!("unsupported classifier format {:?}", self.format)));
        }
        if self.encoder.dim() != self.d {
            return Err(Error::Shape("encoder dimension differs from the model's".into()));
        }
        let e = self.entity_ids.len();
        if self.heads.len() != e || self.thresholds.len() != e {
            return Err(Error::Shape("need exactly one head and threshold per entity".into()));
        }
        for h in &self.heads {
            if h.u1.len() != self.d * self.m || h.c1.len() != self.m || h.u2.len() != self.m {
                return Err(Error::Shape("head weights do not match D and m".into()));
            }
        }
        if self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidArgument("thresholds must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Hidden pre-activations and logit of head `e` on a sparse input.
    fn head_forward(&self, e: usize, x: &SparseVec) -> (Vec<f64>, f64) {
        let h = &self.heads[e];
        let m = self.m;
        let mut z1 = h.c1.clone();
        for &(i, xi) in x {
            let row = &h.u1[i * m..(i + 1) * m];
            for (z, w) in z1.iter_mut().zip(row) {
                *z += xi * w;
            }
        }
        let z = h.c2 + z1.iter().zip(&h.u2).map(|(a, w)| a.max(0.0) * w).sum::<f64>();
        (z1, z)
    }

    pub fn logits(&self, x: &SparseVec) -> Result<Vec<f64>> {
        if let Some(&(i, _)) = x.iter().find(|(i, _)| *i >= self.d) {
            return Err(Error::Shape(format!("feature index {i} outside dimension {}", self.d)));
        }
        Ok((0..self.num_entities()).map(|e| self.head_forward(e, x).1).collect())
    }

    pub fn probs(&self, x: &SparseVec) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.into_iter().map(sigmoid).collect())
    }

    /// Mean logistic loss over all (query, entity) pairs of the batch and its
    /// gradient for every head.
    pub fn loss_and_gradients(&self, batch: &[(&SparseVec, &[bool])]) -> Result<(f64, Vec<HeadGradients>)> {
        let ne = self.num_entities();
        let m = self.m;
        let mut grads: Vec<HeadGradients> = (0..ne).map(|_| HeadGradients::zeros(self.d, m)).collect();
        if batch.is_empty() {
            return Ok((0.0, grads));
        }
        let scale = 1.0 / (batch.len() * ne) as f64;
        let mut loss = 0.0;
        for (x, y) in batch {
            if y.len() != ne {
                return Err(Error::Shape(format!("label vector has {} entries, expected {ne}", y.len())));
            }
            if x.iter().any(|(i, _)| *i >= self.d) {
                return Err(Error::Shape("feature index outside encoder dimension".into()));
            }
            for e in 0..ne {
                let (z1, z) = self.head_forward(e, x);
                loss += bce_with_logits(z, y[e]) * scale;
                let dz = (sigmoid(z) - if y[e] { 1.0 } else { 0.0 }) * scale;
                let h = &self.heads[e];
                let g = &mut grads[e];
                g.c2 += dz;
                for j in 0..m {
                    let a = z1[j].max(0.0);
                    g.u2[j] += a * dz;
                    if z1[j] > 0.0 {
                        let dz1 = h.u2[j] * dz;
                        g.c1[j] += dz1;
                        for &(i, xi) in x.iter() {
                            g.u1[i * m + j] += xi * dz1;
                        }
                    }
                }
            }
        }
        Ok((loss, grads))
    }

    pub fn set_thresholds(&mut self, thresholds: &[f64]) -> Result<()> {
        if thresholds.len() != self.num_entities() {
            return Err(Error::Shape(format!(
                "{} thresholds for {} entities",
                thresholds.len(),
                self.num_entities()
            )));
        }
        if thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("thresholds must be finite".into()));
        }
        self.thresholds = thresholds
            .iter()
            .map(|t| t.clamp(THRESHOLD_EPS, 1.0 - THRESHOLD_EPS))
            .collect();
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ClassifierModel = serde_json::from_str(&text)?;
        m.check()?;
        Ok(m)
    }
}

/// Entity selected iff `prob >= threshold`.
pub fn apply_thresholds(thresholds: &[f64], probs: &[f64]) -> Vec<bool> {
    probs.iter().zip(thresholds).map(|(p, t)| p >= t).collect()
}

/// A loaded model bound to its encoder, checked against a registry.
#[derive(Clone, Debug)]
pub struct Classifier {
    model: ClassifierModel,
    encoder: Encoder,
}

impl Classifier {
    pub fn new(model: ClassifierModel, registry: &EntityRegistry) -> Result<Self> {
        registry.ensure_hash(&model.registry_hash)?;
        model.check()?;
        let encoder = Encoder::from_spec(&model.encoder)?;
        Ok(Classifier { model, encoder })
    }

    pub fn model(&self) -> &ClassifierModel {
        &self.model
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn predict_probs(&self, text: &str) -> Result<Vec<f64>> {
        self.model.probs(&self.encoder.encode_sparse(text)?)
    }

    /// Thresholded labels; every selected entity gets `High`.
    pub fn predict(&self, text: &str) -> Result<Annotation> {
        let probs = self.predict_probs(text)?;
        Ok(apply_thresholds(&self.model.thresholds, &probs)
            .into_iter()
            .enumerate()
            .filter(|(_, on)| *on)
            .map(|(i, _)| (EntityId::new(i), Confidence::High))
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_micro_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedClassifier {
    pub model: ClassifierModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

fn encode_all(encoder: &Encoder, data: &[LabeledQuery], ne: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    data.iter()
        .map(|q| {
            if q.labels.len() != ne {
                return Err(Error::Shape(format!("query {} has {} labels, expected {ne}", q.id, q.labels.len())));
            }
            encoder.encode_sparse(&q.text)
        })
        .collect()
}

fn micro_f1(model: &ClassifierModel, xs: &[Vec<(usize, f64)>], data: &[LabeledQuery]) -> Result<f64> {
    let mut c = Counts::default();
    for (x, q) in xs.iter().zip(data) {
        let pred = apply_thresholds(&model.thresholds, &model.probs(x)?);
        for (p, g) in pred.iter().zip(&q.labels) {
            match (*g, *p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                _ => {}
            }
        }
    }
    Ok(c.f1())
}

/// Mini-batch AdamW training with dev-F1 checkpoint selection and early
/// stopping; deterministic given `config.seed`.
pub fn train_classifier(
    registry: &EntityRegistry,
    train: &[LabeledQuery],
    dev: &[LabeledQuery],
    config: &ClassifierConfig,
) -> Result<TrainedClassifier> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("classifier training set"));
    }
    let ne = registry.len();
    let encoder = Encoder::from_spec(&config.encoder)?;
    let train_x = encode_all(&encoder, train, ne)?;
    let dev_x = encode_all(&encoder, dev, ne)?;

    let mut model = ClassifierModel::init(registry, config.encoder.clone(), config.hidden_dim, config.seed)?;
    model.train_config = Some(config.clone());
    let mut opts: Vec<[AdamW; 4]> = (0..ne)
        .map(|_| {
            [
                AdamW::new(config.optimizer, model.d * model.m),
                AdamW::new(config.optimizer, model.m),
                AdamW::new(config.optimizer, model.m),
                AdamW::new(config.optimizer, 1),
            ]
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "classifier-shuffle"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Head>)> = None;
    let mut since_best = 0;
    let mut last_finite = f64::NAN;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(&SparseVec, &[bool])> = chunk
                .iter()
                .map(|&i| (train_x[i].as_slice(), train[i].labels.as_slice()))
                .collect();
            let (loss, grads) = model.loss_and_gradients(&batch)?;
            if !loss.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: batch_no,
                    last_finite,
                });
            }
            last_finite = loss;
            epoch_loss += loss * chunk.len() as f64;
            for ((head, g), opt) in model.heads.iter_mut().zip(&grads).zip(opts.iter_mut()) {
                opt[0].step(&mut head.u1, &g.u1);
                opt[1].step(&mut head.c1, &g.c1);
                opt[2].step(&mut head.u2, &g.u2);
                let mut c2 = [head.c2];
                opt[3].step(&mut c2, &[g.c2]);
                head.c2 = c2[0];
            }
        }
        let dev_f1 = if dev.is_empty() {
            None
        } else {
            Some(micro_f1(&model, &dev_x, dev)?)
        };
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            dev_micro_f1: dev_f1,
        });
        match dev_f1 {
            None => best = Some((0.0, epoch, model.heads.clone())),
            Some(f) => {
                if best.as_ref().is_none_or(|(b, _, _)| f > *b) {
                    best = Some((f, epoch, model.heads.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= config.patience {
                        break;
                    }
                }
            }
        }
    }
    let (_, best_epoch, heads) = best.expect("at least one epoch ran");
    model.heads = heads;
    Ok(TrainedClassifier {
        model,
        history,
        best_epoch,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TuneMode {
    MaxF1,
    /// Largest threshold whose recall reaches the target.
    MatchRecall(f64),
    /// Smallest threshold whose precision reaches the target.
    MatchPrecision(f64),
}

/// Result of tuning one entity. When the target is unattainable the
/// threshold is the closest achievable point (best recall or precision).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub attainable: bool,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Candidates (descending) with the counts obtained when predicting
/// `prob >= candidate`. Candidates are the distinct probabilities plus 0 and 1.
pub fn sweep(points: &[(f64, bool, u64)]) -> Vec<(f64, Counts)> {
    let mut sorted: Vec<&(f64, bool, u64)> = points.iter().collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut cands: Vec<f64> = points.iter().map(|p| p.0).chain([0.0, 1.0]).collect();
    cands.sort_by(|a, b| b.total_cmp(a));
    cands.dedup();
    let positives: u64 = points.iter().filter(|p| p.1).map(|p| p.2).sum();
    let mut c = Counts {
        tp: 0,
        fp: 0,
        fn_: positives,
    };
    let mut k = 0;
    let mut out = Vec::with_capacity(cands.len());
    for t in cands {
        while k < sorted.len() && sorted[k].0 >= t {
            let (_, g, w) = *sorted[k];
            if g {
                c.tp += w;
                c.fn_ -= w;
            } else {
                c.fp += w;
            }
            k += 1;
        }
        out.push((t, c));
    }
    out
}

/// Tunes one entity's threshold over `(prob, gold, weight)` points.
pub fn tune_entity_threshold(points: &[(f64, bool, u64)], mode: TuneMode) -> Result<ThresholdChoice> {
    if points.is_empty() {
        return Err(Error::Empty("dev set"));
    }
    if points.iter().any(|p| !p.0.is_finite()) {
        return Err(Error::InvalidArgument("probabilities must be finite".into()));
    }
    let sw = sweep(points);
    let choice = |(t, c): &(f64, Counts), attainable| ThresholdChoice {
        threshold: *t,
        attainable,
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
    };
    // `sw` is in descending threshold order, so the first maximum found is
    // the largest threshold and the last one is the smallest.
    let pick_max = |key: &dyn Fn(&Counts) -> f64, prefer_larger: bool| {
        let mut best = &sw[0];
        for cand in &sw[1..] {
            let (a, b) = (key(&cand.1), key(&best.1));
            if a > b || (a == b && !prefer_larger) {
                best = cand;
            }
        }
        best
    };
    Ok(match mode {
        TuneMode::MaxF1 => choice(pick_max(&|c| c.f1(), true), true),
        TuneMode::MatchRecall(target) => match sw.iter().find(|(_, c)| c.recall() >= target) {
            Some(hit) => choice(hit, true),
            None => choice(pick_max(&|c| c.recall(), true), false),
        },
        TuneMode::MatchPrecision(target) => match sw.iter().rev().find(|(_, c)| c.precision() >= target) {
            Some(hit) => choice(hit, true),
            None => choice(pick_max(&|c| c.precision(), false), false),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ThresholdObjective {
    MaxF1,
    /// Per-entity recall targets.
    MatchRecall(Vec<f64>),
    /// Per-entity precision targets.
    MatchPrecision(Vec<f64>),
}

/// Tunes every entity on a dev set of per-query probabilities and gold
/// indicators, optionally weighting each query.
pub fn tune_thresholds(
    probs: &[Vec<f64>],
    gold: &[Vec<bool>],
    weights: Option<&[u64]>,
    objective: &ThresholdObjective,
) -> Result<Vec<ThresholdChoice>> {
    if probs.is_empty() {
        return Err(Error::Empty("dev set"));
    }
    let ne = probs[0].len();
    if gold.len() != probs.len() || weights.is_some_and(|w| w.len() != probs.len()) {
        return Err(Error::Shape("probabilities, gold and weights must cover the same queries".into()));
    }
    if probs.iter().zip(gold).any(|(p, g)| p.len() != ne || g.len() != ne) {
        return Err(Error::Shape("ragged probability or gold rows".into()));
    }
    let targets = match objective {
        ThresholdObjective::MaxF1 => None,
        ThresholdObjective::MatchRecall(t) | ThresholdObjective::MatchPrecision(t) => {
            if t.len() != ne {
                return Err(Error::Shape(format!("{} targets for {ne} entities", t.len())));
            }
            Some(t)
        }
    };
    (0..ne)
        .map(|e| {
            let points: Vec<(f64, bool, u64)> = (0..probs.len())
                .map(|q| (probs[q][e], gold[q][e], weights.map_or(1, |w| w[q])))
                .collect();
            let mode = match (objective, targets) {
                (ThresholdObjective::MatchRecall(_), Some(t)) => TuneMode::MatchRecall(t[e]),
                (ThresholdObjective::MatchPrecision(_), Some(t)) => TuneMode::MatchPrecision(t[e]),
                _ => TuneMode::MaxF1,
            };
            tune_entity_threshold(&points, mode)
        })
        .collect()
}

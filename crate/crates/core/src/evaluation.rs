//! Precision, recall and F1 (per entity and micro-averaged), optionally
//! weighted by query frequency, plus relative gains and matched operating
//! points against a reference annotator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::annotation::AnnotationStore;
use crate::classifier::{tune_entity_threshold, ThresholdChoice, TuneMode};
use crate::error::{Error, Result};
use crate::taxonomy::EntityRegistry;

/// Confusion counts; frequency-weighted counts are still integers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `2PR / (P + R)`, zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// Zero when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Zero when there are no gold positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }

    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn predicted(&self) -> u64 {
        self.tp + self.fp
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityCounts {
    pub entity: String,
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reference: String,
    pub candidate: String,
    pub weighted: bool,
    /// One entry per registry entity, in registry order.
    pub entities: Vec<EntityCounts>,
    pub micro: Counts,
}

impl EvalReport {
    pub fn entity(&self, name: &str) -> Option<&Counts> {
        self.entities.iter().find(|e| e.entity == name).map(|e| &e.counts)
    }

    pub fn write_text(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_string().as_bytes())?;
        Ok(())
    }

    /// One JSON line per entity, then a `micro` line.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        let rows = self
            .entities
            .iter()
            .map(|e| (e.entity.as_str(), &e.counts))
            .chain(std::iter::once(("micro", &self.micro)));
        for (name, c) in rows {
            let v = serde_json::json!({
                "reference": self.reference,
                "candidate": self.candidate,
                "weighted": self.weighted,
                "entity": name,
                "tp": c.tp,
                "fp": c.fp,
                "fn": c.fn_,
                "precision": c.precision(),
                "recall": c.recall(),
                "f1": c.f1(),
            });
            serde_json::to_writer(&mut w, &v)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .entities
            .iter()
            .map(|e| e.entity.len())
            .max()
            .unwrap_or(0)
            .max(6);
        writeln!(
            f,
            "{} vs {} ({})",
            self.candidate,
            self.reference,
            if self.weighted { "weighted" } else { "unweighted" }
        )?;
        writeln!(
            f,
            "{:<width$} {:>9} {:>9} {:>9} {:>10} {:>10} {:>10}",
            "entity", "precision", "recall", "f1", "tp", "fp", "fn"
        )?;
        let rows = self
            .entities
            .iter()
            .map(|e| (e.entity.as_str(), &e.counts))
            .chain(std::iter::once(("micro", &self.micro)));
        for (name, c) in rows {
            writeln!(
                f,
                "{:<width$} {:>9.4} {:>9.4} {:>9.4} {:>10} {:>10} {:>10}",
                name,
                c.precision(),
                c.recall(),
                c.f1(),
                c.tp,
                c.fp,
                c.fn_
            )?;
        }
        Ok(())
    }
}

fn check_ids(gold: &AnnotationStore, pred: &AnnotationStore) -> Result<()> {
    let g: BTreeSet<&String> = gold.keys().collect();
    let p: BTreeSet<&String> = pred.keys().collect();
    if g != p {
        return Err(Error::IdMismatch {
            only_gold: g.difference(&p).map(|s| s.to_string()).collect(),
            only_pred: p.difference(&g).map(|s| s.to_string()).collect(),
        });
    }
    Ok(())
}

fn weight_of(id: &str, frequencies: &BTreeMap<String, u64>, weighted: bool) -> Result<u64> {
    if !weighted {
        return Ok(1);
    }
    frequencies
        .get(id)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("no frequency for query {id}")))
}

/// Compares label sets per query (confidence ignored). With `weighted`, each
/// query's counts are multiplied by its frequency before pooling.
pub fn compute_metrics(
    registry: &EntityRegistry,
    gold: &AnnotationStore,
    pred: &AnnotationStore,
    frequencies: &BTreeMap<String, u64>,
    weighted: bool,
) -> Result<EvalReport> {
    check_ids(gold, pred)?;
    let mut per = vec![Counts::default(); registry.len()];
    for (id, g) in gold {
        let w = weight_of(id, frequencies, weighted)?;
        let p = &pred[id];
        for e in registry.ids() {
            let c = &mut per[e.index()];
            match (g.contains(e), p.contains(e)) {
                (true, true) => c.tp += w,
                (false, true) => c.fp += w,
                (true, false) => c.fn_ += w,
                (false, false) => {}
            }
        }
    }
    let mut micro = Counts::default();
    for c in &per {
        micro.add(*c);
    }
    Ok(EvalReport {
        reference: "gold".into(),
        candidate: "prediction".into(),
        weighted,
        entities: registry
            .ids()
            .map(|e| EntityCounts {
                entity: registry.name(e).to_owned(),
                counts: per[e.index()],
            })
            .collect(),
        micro,
    })
}

/// Percentage change; `None` when the baseline value is zero.
pub fn gain(candidate: f64, baseline: f64) -> Option<f64> {
    (baseline != 0.0).then(|| (candidate - baseline) / baseline * 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricGains {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl MetricGains {
    fn of(c: &Counts, b: &Counts) -> Self {
        MetricGains {
            precision: gain(c.precision(), b.precision()),
            recall: gain(c.recall(), b.recall()),
            f1: gain(c.f1(), b.f1()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeGain {
    pub micro: MetricGains,
    pub entities: Vec<(String, MetricGains)>,
}

pub fn format_gain(g: Option<f64>) -> String {
    match g {
        Some(v) => format!("{v:+.2}%"),
        None => "undefined".into(),
    }
}

impl fmt::Display for RelativeGain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.entities.iter().map(|e| e.0.len()).max().unwrap_or(0).max(6);
        writeln!(f, "{:<width$} {:>11} {:>11} {:>11}", "entity", "precision", "recall", "f1")?;
        let rows = self
            .entities
            .iter()
            .map(|(n, g)| (n.as_str(), g))
            .chain(std::iter::once(("micro", &self.micro)));
        for (name, g) in rows {
            writeln!(
                f,
                "{:<width$} {:>11} {:>11} {:>11}",
                name,
                format_gain(g.precision),
                format_gain(g.recall),
                format_gain(g.f1)
            )?;
        }
        Ok(())
    }
}

pub fn relative_gain(candidate: &EvalReport, baseline: &EvalReport) -> Result<RelativeGain> {
    if candidate.entities.len() != baseline.entities.len()
        || candidate
            .entities
            .iter()
            .zip(&baseline.entities)
            .any(|(a, b)| a.entity != b.entity)
    {
        return Err(Error::Shape("reports cover different entities".into()));
    }
    Ok(RelativeGain {
        micro: MetricGains::of(&candidate.micro, &baseline.micro),
        entities: candidate
            .entities
            .iter()
            .zip(&baseline.entities)
            .map(|(c, b)| (c.entity.clone(), MetricGains::of(&c.counts, &b.counts)))
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchTarget {
    /// Match the baseline's recall, report precision.
    Recall,
    /// Match the baseline's precision, report recall.
    Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityMatch {
    pub entity: String,
    /// Baseline value being matched; `None` when the baseline has no
    /// predictions (precision) or no gold positives (recall).
    pub target: Option<f64>,
    pub choice: ThresholdChoice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedReport {
    pub target: MatchTarget,
    pub report: EvalReport,
    pub entities: Vec<EntityMatch>,
}

impl MatchedReport {
    pub fn thresholds(&self) -> Vec<f64> {
        self.entities.iter().map(|e| e.choice.threshold).collect()
    }

    pub fn unattainable(&self) -> impl Iterator<Item = &EntityMatch> {
        self.entities.iter().filter(|e| !e.choice.attainable)
    }

    /// The complementary metric at the matched point: precision when
    /// matching recall, recall when matching precision.
    pub fn reported(&self) -> f64 {
        match self.target {
            MatchTarget::Recall => self.report.micro.precision(),
            MatchTarget::Precision => self.report.micro.recall(),
        }
    }
}

impl fmt::Display for MatchedReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (name, other) = match self.target {
            MatchTarget::Recall => ("Precision@MatchingRecall", "recall"),
            MatchTarget::Precision => ("Recall@MatchingPrecision", "precision"),
        };
        writeln!(f, "{name}: {:.4}", self.reported())?;
        let mut s = String::new();
        for e in &self.entities {
            let _ = write!(s, "  {} threshold {:.6}", e.entity, e.choice.threshold);
            match e.target {
                Some(t) => {
                    let _ = write!(s, " target {other} {t:.4}");
                }
                None => s.push_str(" target undefined"),
            }
            if !e.choice.attainable {
                let _ = write!(
                    s,
                    " unattainable (closest: precision {:.4}, recall {:.4})",
                    e.choice.precision, e.choice.recall
                );
            }
            s.push('\n');
        }
        f.write_str(&s)?;
        write!(f, "{}", self.report)
    }
}

/// Per entity, picks the threshold matching the baseline's recall (or
/// precision) and evaluates the resulting predictions on the same queries.
pub fn matched_operating_point(
    registry: &EntityRegistry,
    probs: &BTreeMap<String, Vec<f64>>,
    gold: &AnnotationStore,
    frequencies: &BTreeMap<String, u64>,
    baseline: &EvalReport,
    target: MatchTarget,
) -> Result<MatchedReport> {
    if probs.is_empty() {
        return Err(Error::Empty("probability set"));
    }
    let n = registry.len();
    if gold.len() != probs.len() || gold.keys().any(|k| !probs.contains_key(k)) {
        let g: BTreeSet<&String> = gold.keys().collect();
        let p: BTreeSet<&String> = probs.keys().collect();
        return Err(Error::IdMismatch {
            only_gold: g.difference(&p).map(|s| s.to_string()).collect(),
            only_pred: p.difference(&g).map(|s| s.to_string()).collect(),
        });
    }
    if baseline.entities.len() != n {
        return Err(Error::Shape("baseline report does not match the registry".into()));
    }
    let mut rows = Vec::with_capacity(probs.len());
    for (id, p) in probs {
        if p.len() != n {
            return Err(Error::Shape(format!("query {id} has {} probabilities, expected {n}", p.len())));
        }
        let w = weight_of(id, frequencies, baseline.weighted)?;
        rows.push((id, p, w));
    }

    let mut entities = Vec::with_capacity(n);
    for e in registry.ids() {
        let b = &baseline.entities[e.index()].counts;
        let points: Vec<(f64, bool, u64)> = rows
            .iter()
            .map(|(id, p, w)| (p[e.index()], gold[*id].contains(e), *w))
            .collect();
        let (target_value, mode) = match target {
            MatchTarget::Recall => ((b.support() > 0).then(|| b.recall()), TuneMode::MatchRecall as fn(f64) -> TuneMode),
            MatchTarget::Precision => ((b.predicted() > 0).then(|| b.precision()), TuneMode::MatchPrecision as fn(f64) -> TuneMode),
        };
        let choice = match target_value {
            Some(t) => tune_entity_threshold(&points, mode(t))?,
            // The baseline never fires (or has nothing to find): mirror it by
            // predicting as little as possible.
            None => tune_entity_threshold(&points, TuneMode::MatchRecall(0.0))?,
        };
        entities.push(EntityMatch {
            entity: registry.name(e).to_owned(),
            target: target_value,
            choice,
        });
    }

    let pred: AnnotationStore = rows
        .iter()
        .map(|(id, p, _)| {
            let mut a = crate::annotation::Annotation::new();
            for e in registry.ids() {
                if p[e.index()] >= entities[e.index()].choice.threshold {
                    a.insert(e, crate::annotation::Confidence::High);
                }
            }
            ((*id).clone(), a)
        })
        .collect();
    let mut report = compute_metrics(registry, gold, &pred, frequencies, baseline.weighted)?;
    report.reference = baseline.reference.clone();
    report.candidate = "classifier".into();
    Ok(MatchedReport {
        target,
        report,
        entities,
    })
}

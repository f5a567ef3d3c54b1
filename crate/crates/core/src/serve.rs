//! Newline-delimited serving: one UTF-8 query per line in, one JSON object
//! per line out, over stdio or TCP.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, ClassifierModel, ThresholdChoice};
use crate::error::{Error, Result};
use crate::taxonomy::EntityRegistry;

/// Per-entity thresholds written by the tuning step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFile {
    pub registry_hash: String,
    pub mode: String,
    pub entities: Vec<EntityThreshold>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityThreshold {
    pub entity: String,
    pub threshold: f64,
    pub attainable: bool,
    pub precision: f64,
    pub recall: f64,
}

impl ThresholdFile {
    pub fn from_choices(registry: &EntityRegistry, mode: &str, choices: &[ThresholdChoice]) -> Self {
        ThresholdFile {
            registry_hash: registry.hash().to_owned(),
            mode: mode.to_owned(),
            entities: registry
                .ids()
                .zip(choices)
                .map(|(id, c)| EntityThreshold {
                    entity: registry.name(id).to_owned(),
                    threshold: c.threshold,
                    attainable: c.attainable,
                    precision: c.precision,
                    recall: c.recall,
                })
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Thresholds in registry order.
    pub fn thresholds(&self, registry: &EntityRegistry) -> Result<Vec<f64>> {
        registry.ensure_hash(&self.registry_hash)?;
        let mut out = vec![None; registry.len()];
        for e in &self.entities {
            let id = registry
                .lookup(&e.entity)
                .ok_or_else(|| Error::UnknownLabel(e.entity.clone()))?;
            out[id.index()] = Some(e.threshold);
        }
        out.into_iter()
            .zip(registry.ids())
            .map(|(t, id)| t.ok_or_else(|| Error::Config(format!("no threshold for {}", registry.name(id)))))
            .collect()
    }
}

/// Loads a model, optionally overrides its thresholds, and binds it to the registry.
pub fn load_classifier(
    model_path: impl AsRef<Path>,
    thresholds: Option<&Path>,
    registry: &EntityRegistry,
) -> Result<Classifier> {
    let mut model = ClassifierModel::load(model_path)?;
    if let Some(p) = thresholds {
        let t = ThresholdFile::load(p)?;
        model.set_thresholds(&t.thresholds(registry)?)?;
    }
    Classifier::new(model, registry)
}

#[derive(Serialize)]
struct LabelOut<'a> {
    entity: &'a str,
    prob: f64,
}

#[derive(Serialize)]
struct Response<'a> {
    labels: Vec<LabelOut<'a>>,
    latency_us: u64,
}

fn error_line(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

/// Answers one request line (without its newline). Never fails: problems are
/// reported as an error object.
pub fn respond(classifier: &Classifier, line: &[u8]) -> String {
    let start = Instant::now();
    let Ok(text) = std::str::from_utf8(line) else {
        return error_line("request is not valid UTF-8");
    };
    let text = text.trim_end_matches('\r');
    if text.trim().is_empty() {
        return error_line("empty query");
    }
    let probs = match classifier.predict_probs(text) {
        Ok(p) => p,
        Err(e) => return error_line(&e.to_string()),
    };
    let model = classifier.model();
    let labels = probs
        .iter()
        .zip(&model.thresholds)
        .zip(&model.entity_ids)
        .filter(|((p, t), _)| p >= t)
        .map(|((p, _), e)| LabelOut { entity: e, prob: *p })
        .collect();
    let resp = Response {
        labels,
        latency_us: start.elapsed().as_micros() as u64,
    };
    serde_json::to_string(&resp).unwrap_or_else(|e| error_line(&e.to_string()))
}

/// Serves requests from `reader` until EOF, one response line per request.
/// Returns the number of requests answered.
pub fn serve_lines(classifier: &Classifier, reader: impl BufRead, mut writer: impl Write) -> Result<usize> {
    let mut n = 0;
    for line in reader.split(b'\n') {
        let line = line?;
        writer.write_all(respond(classifier, &line).as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        n += 1;
    }
    Ok(n)
}

fn handle(classifier: &Classifier, stream: TcpStream) -> Result<usize> {
    let reader = BufReader::new(stream.try_clone()?);
    serve_lines(classifier, reader, BufWriter::new(stream))
}

/// Accepts connections forever (or `max_connections` of them), one thread per
/// connection sharing the read-only model.
pub fn serve_tcp(classifier: Arc<Classifier>, listener: TcpListener, max_connections: Option<usize>) -> Result<()> {
    let mut workers = Vec::new();
    for (i, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let c = Arc::clone(&classifier);
        workers.push(std::thread::spawn(move || {
            if let Err(e) = handle(&c, stream) {
                eprintln!("connection closed with error: {e}");
            }
        }));
        if max_connections.is_some_and(|m| i + 1 >= m) {
            break;
        }
    }
    for w in workers {
        let _ = w.join();
    }
    Ok(())
}

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use querylabel::annotation::{load_annotations, to_store, write_annotations, AnnotatedQuery};
use querylabel::baseline::{lexical_match, Gazetteer};
use querylabel::classifier::{
    join_labels, train_classifier, tune_thresholds, weak_labels_from_annotations, ClassifierConfig,
    ThresholdObjective, WeakLabelSet,
};
use querylabel::data::{load_queries, rebalance_by_entity, split_dataset, write_jsonl, DatasetSplit, QueryRecord};
use querylabel::evaluation::{compute_metrics, matched_operating_point, relative_gain, EvalReport, MatchTarget};
use querylabel::features::{Encoder, EncoderSpec};
use querylabel::llm::{AnnotatorClient, AnnotatorConfig, AnnotatorHandle, ResponseCache};
use querylabel::optim::AdamWConfig;
use querylabel::personas::{aggregate_ensemble, load_personas, read_matrices, shipped_personas, write_matrices, Persona};
use querylabel::pipeline::{
    aggregate_selected, annotate_records, matrices_from_runs, router_examples, run_pipeline, synthetic_prompt_experiment,
    synthetic_routing_experiment, RunConfig,
};
use querylabel::prompting::{PromptBuilder, PromptConfig, PromptTemplate, PromptVariant};
use querylabel::router::{top_k_indices, train_router, write_loss_csv, RouterModel, RouterTrainConfig};
use querylabel::serve::{load_classifier, serve_lines, serve_tcp, ThresholdFile};
use querylabel::synth::{write_dataset, SynthConfig, SynthWorld};
use querylabel::{AnnotationStore, Confidence, EntityRegistry};

use crate::{Cli, Command, Format, TuneModeArg};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn load_split(path: &Path, records: &[QueryRecord]) -> Result<DatasetSplit> {
    Ok(DatasetSplit::read_manifest(open(path)?, records)?)
}

fn frequencies(records: &[QueryRecord]) -> BTreeMap<String, u64> {
    records.iter().map(|r| (r.id.clone(), r.frequency)).collect()
}

fn load_store(path: &Path, registry: &EntityRegistry) -> Result<AnnotationStore> {
    Ok(to_store(&load_annotations(path, registry)?))
}

pub fn run(cli: Cli) -> Result<()> {
    let registry = match &cli.registry {
        Some(p) => EntityRegistry::load(p)?,
        None => EntityRegistry::shipped(),
    };
    let reg = &registry;
    match cli.command {
        Command::Taxonomy { format } => {
            let mut out = io::stdout().lock();
            match format {
                Format::Jsonl => reg.write_jsonl(&mut out)?,
                Format::Text => {
                    for e in reg.entities() {
                        writeln!(out, "{:<18} {}", e.id, e.definition)?;
                    }
                    writeln!(out, "registry hash {}", reg.hash())?;
                }
            }
        }
        Command::Ingest { input, out } => {
            let recs = load_queries(&input)?;
            let mut w = create(&out)?;
            write_jsonl(&mut w, &recs)?;
            w.flush()?;
            eprintln!("{} queries", recs.len());
        }
        Command::Split {
            queries,
            out,
            seed,
            ratios,
        } => {
            let recs = load_queries(&queries)?;
            let s = split_dataset(&recs, [ratios[0], ratios[1], ratios[2]], seed)?;
            let mut w = create(&out)?;
            s.write_manifest(&mut w)?;
            w.flush()?;
            eprintln!("train {} dev {} test {}", s.train.len(), s.dev.len(), s.test.len());
        }
        Command::Annotate(a) => annotate(reg, a)?,
        Command::Matrix {
            annotations,
            queries,
            personas,
            out,
        } => {
            let personas = match personas {
                Some(p) => load_personas(p)?,
                None => shipped_personas(),
            };
            let recs = load_queries(&queries)?;
            let anns = load_annotations(&annotations, reg)?;
            let ms = matrices_from_runs(&recs, &anns, &personas, reg)?;
            let mut w = create(&out)?;
            write_matrices(&mut w, &ms, reg)?;
            w.flush()?;
            eprintln!("{} matrices ({} queries without a full set of persona annotations)", ms.len(), recs.len() - ms.len());
        }
        Command::RouterTrain(a) => router_train(reg, a)?,
        Command::RouterSelect { router, query, queries, k } => {
            let model = RouterModel::load(&router)?;
            reg.ensure_hash(&model.registry_hash)?;
            let spec = model.encoder.clone().context("router model has no encoder spec")?;
            let encoder = Encoder::from_spec(&spec)?;
            let texts: Vec<String> = match (query, queries) {
                (Some(q), _) => vec![q],
                (None, Some(p)) => load_queries(&p)?.into_iter().map(|r| r.text).collect(),
                (None, None) => bail!("give --query or --queries"),
            };
            let mut out = io::stdout().lock();
            for t in texts {
                let rel = model.forward(&encoder.encode(&t)?, false, 0)?;
                let top = top_k_indices(&rel, &model.persona_ids, k)?;
                let chosen: Vec<_> = top
                    .iter()
                    .map(|&i| serde_json::json!({"persona": model.persona_ids[i], "relevance": rel[i]}))
                    .collect();
                serde_json::to_writer(&mut out, &serde_json::json!({"query": t, "personas": chosen}))?;
                writeln!(out)?;
            }
        }
        Command::Aggregate {
            matrices,
            out,
            router,
            queries,
            k,
            threshold,
        } => {
            let ms = read_matrices(open(&matrices)?, reg)?;
            let routed = match (router, queries) {
                (Some(r), Some(q)) => {
                    let model = RouterModel::load(&r)?;
                    reg.ensure_hash(&model.registry_hash)?;
                    let enc = Encoder::from_spec(&model.encoder.clone().context("router model has no encoder spec")?)?;
                    let texts: BTreeMap<String, String> =
                        load_queries(&q)?.into_iter().map(|r| (r.id, r.text)).collect();
                    Some((model, enc, texts))
                }
                _ => None,
            };
            let mut recs = Vec::with_capacity(ms.len());
            for m in &ms {
                let (annotation, annotator) = match &routed {
                    None => (aggregate_ensemble(m, None, threshold)?, "ensemble".to_owned()),
                    Some((model, enc, texts)) => {
                        let text = texts
                            .get(&m.query_id)
                            .with_context(|| format!("no query text for {}", m.query_id))?;
                        if model.persona_ids != m.persona_ids {
                            bail!("router personas {:?} differ from matrix personas {:?}", model.persona_ids, m.persona_ids);
                        }
                        let rel = model.forward(&enc.encode(text)?, false, 0)?;
                        let rows = top_k_indices(&rel, &model.persona_ids, k)?;
                        (aggregate_selected(m, &rows, threshold)?, format!("router-{k}"))
                    }
                };
                recs.push(AnnotatedQuery {
                    id: m.query_id.clone(),
                    text: routed.as_ref().and_then(|(_, _, t)| t.get(&m.query_id).cloned()),
                    annotator,
                    annotation,
                });
            }
            let mut w = create(&out)?;
            write_annotations(&mut w, reg, &recs)?;
            w.flush()?;
        }
        Command::Labels {
            annotations,
            out,
            min_confidence,
            annotator,
        } => {
            let min: Confidence = min_confidence.parse()?;
            let mut anns = load_annotations(&annotations, reg)?;
            if let Some(a) = &annotator {
                anns.retain(|r| &r.annotator == a);
            }
            let names: std::collections::BTreeSet<&str> = anns.iter().map(|r| r.annotator.as_str()).collect();
            if names.len() > 1 {
                bail!("annotations come from several annotators {names:?}; pick one with --annotator");
            }
            let name = names.into_iter().next().unwrap_or("unknown").to_owned();
            let set = weak_labels_from_annotations(reg, &to_store(&anns), min, &name);
            let mut w = create(&out)?;
            set.write_jsonl(&mut w, reg)?;
            w.flush()?;
        }
        Command::Train(a) => {
            let recs = load_queries(&a.queries)?;
            let split = load_split(&a.split, &recs)?;
            let weak = WeakLabelSet::read_jsonl(open(&a.labels)?, reg)?;
            let pick = |part: &[QueryRecord]| {
                let present: Vec<QueryRecord> = part.iter().filter(|r| weak.labels.contains_key(&r.id)).cloned().collect();
                join_labels(&present, &weak.labels)
            };
            let cfg = ClassifierConfig {
                encoder: EncoderSpec::hashed(a.encoder_dim),
                hidden_dim: a.hidden_dim,
                epochs: a.epochs,
                patience: a.patience,
                seed: a.seed,
                optimizer: AdamWConfig {
                    learning_rate: a.learning_rate,
                    ..Default::default()
                },
                ..Default::default()
            };
            let trained = train_classifier(reg, &pick(&split.train)?, &pick(&split.dev)?, &cfg)?;
            for s in &trained.history {
                eprintln!(
                    "epoch {:>3} loss {:.5} dev micro-F1 {}",
                    s.epoch,
                    s.train_loss,
                    s.dev_micro_f1.map_or("-".into(), |f| format!("{f:.4}"))
                );
            }
            eprintln!("kept epoch {}", trained.best_epoch);
            trained.model.save(&a.out)?;
        }
        Command::Tune(a) => {
            let recs = load_queries(&a.queries)?;
            let split = load_split(&a.split, &recs)?;
            let gold = load_store(&a.gold, reg)?;
            let clf = load_classifier(&a.model, None, reg)?;
            let dev: Vec<&QueryRecord> = split.dev.iter().filter(|r| gold.contains_key(&r.id)).collect();
            if dev.is_empty() {
                bail!("no dev query has a reference annotation");
            }
            let probs = dev.iter().map(|r| clf.predict_probs(&r.text)).collect::<Result<Vec<_>, _>>()?;
            let golds: Vec<Vec<bool>> = dev.iter().map(|r| gold[&r.id].indicator(reg.len(), Confidence::Low)).collect();
            let weights: Option<Vec<u64>> = a.weighted.then(|| dev.iter().map(|r| r.frequency).collect());
            let objective = match a.mode {
                TuneModeArg::MaxF1 => ThresholdObjective::MaxF1,
                mode => {
                    let gz = a.baseline_gazetteer.as_ref().context("match modes need --baseline-gazetteer")?;
                    let gz = Gazetteer::load(gz, reg)?;
                    let dev_gold: AnnotationStore = dev.iter().map(|r| (r.id.clone(), gold[&r.id].clone())).collect();
                    let base: AnnotationStore = dev.iter().map(|r| (r.id.clone(), lexical_match(&gz, &r.text))).collect();
                    let rep = compute_metrics(reg, &dev_gold, &base, &frequencies(&recs), a.weighted)?;
                    if mode == TuneModeArg::MatchRecall {
                        ThresholdObjective::MatchRecall(rep.entities.iter().map(|e| e.counts.recall()).collect())
                    } else {
                        ThresholdObjective::MatchPrecision(rep.entities.iter().map(|e| e.counts.precision()).collect())
                    }
                }
            };
            let choices = tune_thresholds(&probs, &golds, weights.as_deref(), &objective)?;
            let mode = match a.mode {
                TuneModeArg::MaxF1 => "max_f1",
                TuneModeArg::MatchRecall => "match_recall",
                TuneModeArg::MatchPrecision => "match_precision",
            };
            let file = ThresholdFile::from_choices(reg, mode, &choices);
            for e in file.entities.iter().filter(|e| !e.attainable) {
                eprintln!(
                    "{}: target unattainable, closest precision {:.4} recall {:.4}",
                    e.entity, e.precision, e.recall
                );
            }
            file.save(&a.out)?;
        }
        Command::Eval(a) => eval(reg, a)?,
        Command::Ablation(a) => {
            let grid = synthetic_prompt_experiment(reg, a.queries, a.seed, a.noise_rate)?;
            let seeds: Vec<u64> = (1..=a.random_draws).collect();
            let routing = synthetic_routing_experiment(
                reg,
                a.queries,
                a.seed,
                &RouterTrainConfig {
                    seed: a.seed,
                    ..Default::default()
                },
                a.k,
                &seeds,
            )?;
            let mut out = io::stdout().lock();
            match a.format {
                Format::Jsonl => {
                    for (v, rep) in &grid {
                        serde_json::to_writer(
                            &mut out,
                            &serde_json::json!({"kind": "prompt_variant", "variant": v, "micro": rep.micro,
                                "precision": rep.micro.precision(), "recall": rep.micro.recall(), "f1": rep.micro.f1()}),
                        )?;
                        writeln!(out)?;
                    }
                    serde_json::to_writer(
                        &mut out,
                        &serde_json::json!({"kind": "persona_selection", "k": a.k,
                            "router_f1": routing.comparison.router.micro.f1(),
                            "random_mean_f1": routing.comparison.random_mean_f1(),
                            "mean_relevance": routing.mean_relevance}),
                    )?;
                    writeln!(out)?;
                }
                Format::Text => {
                    writeln!(out, "{:<20} {:>9} {:>9} {:>9}", "variant", "precision", "recall", "f1")?;
                    for (v, rep) in &grid {
                        let m = &rep.micro;
                        writeln!(out, "{:<20} {:>9.4} {:>9.4} {:>9.4}", v.as_str(), m.precision(), m.recall(), m.f1())?;
                    }
                    writeln!(out)?;
                    writeln!(out, "persona selection, k = {}", a.k)?;
                    writeln!(out, "  router top-k micro-F1   {:.4}", routing.comparison.router.micro.f1())?;
                    writeln!(out, "  random-k micro-F1 (mean) {:.4}", routing.comparison.random_mean_f1())?;
                    for (p, r) in &routing.mean_relevance {
                        writeln!(out, "  mean relevance {p:<12} {r:.4}")?;
                    }
                }
            }
        }
        Command::Serve {
            model,
            thresholds,
            port,
            host,
        } => {
            let clf = load_classifier(&model, thresholds.as_deref(), reg)?;
            match port {
                None => {
                    serve_lines(&clf, io::stdin().lock(), io::stdout().lock())?;
                }
                Some(p) => {
                    let listener = TcpListener::bind((host.as_str(), p)).with_context(|| format!("binding {host}:{p}"))?;
                    eprintln!("listening on {}", listener.local_addr()?);
                    serve_tcp(Arc::new(clf), listener, None)?;
                }
            }
        }
        Command::Run { config, output_dir } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(o) = output_dir {
                cfg.output_dir = std::env::current_dir()?.join(o);
            }
            let outcome = run_pipeline(&cfg)?;
            for f in &outcome.failures {
                eprintln!("annotation failure: {f}");
            }
            eprintln!(
                "{} artifacts, {} annotator calls, {} cache hits, {} queries dropped",
                outcome.manifest.artifacts.len(),
                outcome.llm_calls,
                outcome.cache_hits,
                outcome.dropped_queries
            );
            println!("{}", outcome.manifest_path.display());
        }
        Command::Synth(a) => {
            let cfg = SynthConfig {
                seed: a.seed,
                ..Default::default()
            };
            let world = match &a.gazetteer {
                Some(g) => SynthWorld::from_gazetteer(&Gazetteer::load(g, reg)?, &cfg)?,
                None => SynthWorld::generate(reg, &cfg)?,
            };
            write_dataset(&world, reg, a.queries, a.baseline_fraction, a.seed, &a.out_dir)?;
            eprintln!("{} queries over {} phrases in {}", a.queries, world.num_phrases(), a.out_dir.display());
        }
    }
    Ok(())
}

fn annotate(reg: &EntityRegistry, a: crate::AnnotateArgs) -> Result<()> {
    let variant: PromptVariant = a.variant.parse()?;
    let config: AnnotatorConfig = serde_json::from_reader(open(&a.annotator)?)
        .with_context(|| format!("parsing annotator config {}", a.annotator.display()))?;
    let base = a.annotator.parent().unwrap_or(Path::new("."));
    let handle = AnnotatorHandle::from_config(&config, reg, base)?;
    let cache = a.cache.as_ref().map(ResponseCache::open).transpose()?;
    let client = AnnotatorClient::new(handle, cache);
    let builder = match &a.template {
        Some(t) => PromptBuilder::new(PromptTemplate::load(t)?),
        None => PromptBuilder::default(),
    };
    let all = match &a.personas_file {
        Some(p) => load_personas(p)?,
        None => shipped_personas(),
    };
    let chosen: Vec<&Persona> = if a.personas.iter().any(|p| p == "all") {
        all.iter().collect()
    } else {
        a.personas
            .iter()
            .map(|id| all.iter().find(|p| &p.id == id).with_context(|| format!("unknown persona {id}")))
            .collect::<Result<_>>()?
    };
    let recs = load_queries(&a.queries)?;
    let jobs: Vec<(&QueryRecord, Option<&Persona>)> = if chosen.is_empty() {
        recs.iter().map(|r| (r, None)).collect()
    } else {
        recs.iter().flat_map(|r| chosen.iter().map(move |p| (r, Some(*p)))).collect()
    };
    let cfg = PromptConfig::new(variant, reg);
    let run = annotate_records(&client, &builder, reg, &cfg, &jobs)?;
    let mut w = create(&a.out)?;
    write_annotations(&mut w, reg, &run.records)?;
    w.flush()?;
    for f in &run.failures {
        eprintln!("failure: {f}");
    }
    eprintln!(
        "{} annotations, {} failures, {} annotator calls, {} cache hits",
        run.records.len(),
        run.failures.len(),
        client.calls(),
        client.cache_hits()
    );
    Ok(())
}

fn router_train(reg: &EntityRegistry, a: crate::RouterTrainArgs) -> Result<()> {
    let recs = load_queries(&a.queries)?;
    let train_recs = match &a.split {
        Some(s) => load_split(s, &recs)?.train,
        None => recs.clone(),
    };
    let gold = load_store(&a.gold, reg)?;
    let ms = read_matrices(open(&a.matrices)?, reg)?;
    let by_id = ms.into_iter().map(|m| (m.query_id.clone(), m)).collect();
    let train_recs = match a.rebalance_cap {
        Some(cap) => {
            let with_gold: Vec<QueryRecord> = train_recs.into_iter().filter(|r| gold.contains_key(&r.id)).collect();
            rebalance_by_entity(&with_gold, &gold, cap)?
        }
        None => train_recs,
    };
    let spec = EncoderSpec::hashed(a.encoder_dim);
    let encoder = Encoder::from_spec(&spec)?;
    let examples = router_examples(&train_recs, &by_id, &gold, &encoder, reg)?;
    let cfg = RouterTrainConfig {
        hidden_dim: a.hidden_dim,
        epochs: a.epochs,
        seed: a.seed,
        optimizer: AdamWConfig {
            learning_rate: a.learning_rate,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut trained = train_router(&examples, &cfg)?;
    trained.model.encoder = Some(spec);
    trained.model.save(&a.out)?;
    if let Some(p) = &a.loss_csv {
        let mut w = create(p)?;
        write_loss_csv(&mut w, &trained.history)?;
        w.flush()?;
    }
    eprintln!(
        "{} examples, final batch loss {:.5}",
        examples.len(),
        trained.history.last().map_or(f64::NAN, |p| p.loss)
    );
    Ok(())
}

fn eval(reg: &EntityRegistry, a: crate::EvalArgs) -> Result<()> {
    let gold_all = load_store(&a.gold, reg)?;
    let recs = match &a.queries {
        Some(q) => load_queries(q)?,
        None => Vec::new(),
    };
    let freqs = frequencies(&recs);
    let mut ids: Vec<String> = gold_all.keys().cloned().collect();
    if let Some(s) = &a.split {
        if recs.is_empty() {
            bail!("--split needs --queries");
        }
        let split = load_split(s, &recs)?;
        let test: std::collections::BTreeSet<&str> = split.test.iter().map(|r| r.id.as_str()).collect();
        ids.retain(|id| test.contains(id.as_str()));
    }
    let texts: BTreeMap<&str, &str> = recs.iter().map(|r| (r.id.as_str(), r.text.as_str())).collect();
    let text_of = |id: &str| texts.get(id).copied().with_context(|| format!("no query text for {id}"));
    let gold: AnnotationStore = ids.iter().map(|id| (id.clone(), gold_all[id].clone())).collect();

    let mut probs = BTreeMap::new();
    let (name, pred): (&str, AnnotationStore) = match (&a.pred, &a.model) {
        (Some(p), _) => {
            let all = load_store(p, reg)?;
            ("annotations", ids.iter().map(|id| (id.clone(), all.get(id).cloned().unwrap_or_default())).collect())
        }
        (None, Some(m)) => {
            let clf = load_classifier(m, a.thresholds.as_deref(), reg)?;
            let mut pred = AnnotationStore::new();
            for id in &ids {
                let t = text_of(id)?;
                probs.insert(id.clone(), clf.predict_probs(t)?);
                pred.insert(id.clone(), clf.predict(t)?);
            }
            ("classifier", pred)
        }
        (None, None) => bail!("give --pred or --model"),
    };
    let mut report = compute_metrics(reg, &gold, &pred, &freqs, a.weighted)?;
    report.reference = "gold".into();
    report.candidate = name.into();
    let baseline: Option<EvalReport> = match &a.baseline_gazetteer {
        None => None,
        Some(g) => {
            let gz = Gazetteer::load(g, reg)?;
            let pred = ids
                .iter()
                .map(|id| Ok((id.clone(), lexical_match(&gz, text_of(id)?))))
                .collect::<Result<AnnotationStore>>()?;
            let mut r = compute_metrics(reg, &gold, &pred, &freqs, a.weighted)?;
            r.reference = "gold".into();
            r.candidate = "baseline".into();
            Some(r)
        }
    };
    let mut out = io::stdout().lock();
    match a.format {
        Format::Jsonl => {
            report.write_jsonl(&mut out)?;
            if let Some(b) = &baseline {
                b.write_jsonl(&mut out)?;
                let g = relative_gain(&report, b)?;
                serde_json::to_writer(&mut out, &serde_json::json!({"kind": "relative_gain", "micro": g.micro}))?;
                writeln!(out)?;
            }
        }
        Format::Text => {
            write!(out, "{report}")?;
            if let Some(b) = &baseline {
                writeln!(out)?;
                write!(out, "{b}")?;
                writeln!(out)?;
                write!(out, "{}", relative_gain(&report, b)?)?;
            }
        }
    }
    if let (Some(b), false) = (&baseline, probs.is_empty()) {
        for target in [MatchTarget::Recall, MatchTarget::Precision] {
            let m = matched_operating_point(reg, &probs, &gold, &freqs, b, target)?;
            match a.format {
                Format::Text => {
                    writeln!(out)?;
                    write!(out, "{m}")?;
                }
                Format::Jsonl => {
                    serde_json::to_writer(
                        &mut out,
                        &serde_json::json!({"kind": "matched_operating_point", "target": target, "value": m.reported(),
                            "unattainable": m.unattainable().map(|e| e.entity.clone()).collect::<Vec<_>>()}),
                    )?;
                    writeln!(out)?;
                }
            }
        }
    }
    Ok(())
}

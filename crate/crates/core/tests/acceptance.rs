//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use querylabel::annotation::AnnotatedQuery;
use querylabel::classifier::{
    join_labels, train_classifier, tune_thresholds, weak_labels_from_annotations, Classifier, ClassifierConfig,
    ClassifierModel, ThresholdObjective,
};
use querylabel::data::split_dataset;
use querylabel::evaluation::{compute_metrics, matched_operating_point, MatchTarget};
use querylabel::features::EncoderSpec;
use querylabel::llm::{AnnotatorClient, AnnotatorHandle, HttpAnnotator, HttpConfig, MockAnnotator, ResponseCache};
use querylabel::personas::{build_confidence_matrix, shipped_personas, ConfidenceMatrix};
use querylabel::pipeline::{
    annotate_records, run_pipeline, synthetic_prompt_experiment, synthetic_routing_experiment, RunConfig,
    ADVERSARIAL_PERSONA, ORACLE_PERSONA, RANDOM_PERSONA,
};
use querylabel::prompting::{PromptBuilder, PromptConfig, PromptVariant};
use querylabel::router::{predict_entities, RouterExample, RouterModel, RouterTrainConfig};
use querylabel::synth::{gold_store, records, SynthConfig, SynthWorld};
use querylabel::{Annotation, AnnotationStore, Confidence, EntityDef, EntityId, EntityRegistry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed <= Duration::from_secs(limit_s), || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn small_registry(n: usize) -> EntityRegistry {
    EntityRegistry::from_defs(
        (0..n)
            .map(|i| EntityDef {
                id: format!("E{i}"),
                definition: format!("entity {i}"),
                icl_examples: vec![],
            })
            .collect(),
    )
    .unwrap()
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// 1. metrics against a brute-force recomputation from raw label sets
fn metrics_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let levels = [Confidence::Low, Confidence::Medium, Confidence::High];
    let mut checked = 0;
    for inst in 0..200 {
        let ne = rng.gen_range(1..=4);
        let nq = rng.gen_range(1..=6);
        let reg = small_registry(ne);
        let mut gold_sets = Vec::new();
        let mut pred_sets = Vec::new();
        let mut gold = AnnotationStore::new();
        let mut pred = AnnotationStore::new();
        let mut freqs = BTreeMap::new();
        for q in 0..nq {
            let id = format!("q{q}");
            let g: BTreeSet<usize> = (0..ne).filter(|_| rng.gen_bool(0.4)).collect();
            let p: BTreeSet<usize> = (0..ne).filter(|_| rng.gen_bool(0.4)).collect();
            let mk = |s: &BTreeSet<usize>, rng: &mut ChaCha8Rng| {
                let mut a = Annotation::new();
                for &e in s {
                    a.insert(EntityId::new(e), levels[rng.gen_range(0..3)]);
                }
                a
            };
            gold.insert(id.clone(), mk(&g, &mut rng));
            pred.insert(id.clone(), mk(&p, &mut rng));
            freqs.insert(id, rng.gen_range(1..=5u64));
            gold_sets.push(g);
            pred_sets.push(p);
        }
        for weighted in [false, true] {
            let rep = compute_metrics(&reg, &gold, &pred, &freqs, weighted).map_err(|e| e.to_string())?;
            let (mut mtp, mut mfp, mut mfn) = (0u64, 0u64, 0u64);
            for e in 0..ne {
                let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
                for q in 0..nq {
                    let w = if weighted { freqs[&format!("q{q}")] } else { 1 };
                    match (gold_sets[q].contains(&e), pred_sets[q].contains(&e)) {
                        (true, true) => tp += w,
                        (false, true) => fp += w,
                        (true, false) => fn_ += w,
                        (false, false) => {}
                    }
                }
                mtp += tp;
                mfp += fp;
                mfn += fn_;
                let c = &rep.entities[e].counts;
                ensure((c.tp, c.fp, c.fn_) == (tp, fp, fn_), || {
                    format!("instance {inst} entity {e}: counts {:?} vs oracle {:?}", (c.tp, c.fp, c.fn_), (tp, fp, fn_))
                })?;
                let (p, r) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
                ensure(
                    close(c.precision(), p, 1e-12) && close(c.recall(), r, 1e-12) && close(c.f1(), f1_of(p, r), 1e-12),
                    || format!("instance {inst} entity {e}: ratios differ"),
                )?;
            }
            let m = &rep.micro;
            ensure((m.tp, m.fp, m.fn_) == (mtp, mfp, mfn), || format!("instance {inst}: micro counts differ"))?;
            let (p, r) = (ratio(mtp, mtp + mfp), ratio(mtp, mtp + mfn));
            ensure(
                close(m.precision(), p, 1e-12) && close(m.recall(), r, 1e-12) && close(m.f1(), f1_of(p, r), 1e-12),
                || format!("instance {inst}: micro ratios differ"),
            )?;
            checked += 1;
        }
    }
    within(start.elapsed(), 5)?;
    Ok(format!("{checked} reports matched in {:.2}s", start.elapsed().as_secs_f64()))
}

struct Naive {
    t: f64,
    p: f64,
    r: f64,
    f: f64,
}

/// Every candidate threshold with its metrics, computed point by point.
fn naive_sweep(points: &[(f64, bool, u64)]) -> Vec<Naive> {
    let mut cands: Vec<f64> = points.iter().map(|p| p.0).chain([0.0, 1.0]).collect();
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cands.dedup();
    cands
        .into_iter()
        .map(|t| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for &(s, g, w) in points {
                match (g, s >= t) {
                    (true, true) => tp += w,
                    (false, true) => fp += w,
                    (true, false) => fn_ += w,
                    _ => {}
                }
            }
            let (p, r) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
            Naive { t, p, r, f: f1_of(p, r) }
        })
        .collect()
}

// 2. threshold tuning against an exhaustive sweep
fn threshold_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut compared = 0;
    for set in 0..100 {
        let n = rng.gen_range(1..=50);
        let ne = rng.gen_range(1..=3);
        // coarse grid so that ties occur
        let grid = [10.0, 20.0, 1000.0][set % 3];
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..ne).map(|_| (rng.gen_range(0.0..1.0f64) * grid).round() / grid).collect())
            .collect();
        let gold: Vec<Vec<bool>> = (0..n).map(|_| (0..ne).map(|_| rng.gen_bool(0.35)).collect()).collect();
        let weights: Vec<u64> = (0..n).map(|_| rng.gen_range(1..=5)).collect();
        let weighted = set % 2 == 0;
        let per_entity: Vec<Vec<(f64, bool, u64)>> = (0..ne)
            .map(|e| (0..n).map(|q| (probs[q][e], gold[q][e], if weighted { weights[q] } else { 1 })).collect())
            .collect();
        let sweeps: Vec<Vec<Naive>> = per_entity.iter().map(|pts| naive_sweep(pts)).collect();
        // targets: either an exactly achievable value or a uniform draw
        let target = |rng: &mut ChaCha8Rng, sw: &[Naive], recall: bool| -> f64 {
            if rng.gen_bool(0.5) {
                let c = &sw[rng.gen_range(0..sw.len())];
                if recall {
                    c.r
                } else {
                    c.p
                }
            } else {
                rng.gen_range(0.0..=1.0)
            }
        };
        let rt: Vec<f64> = sweeps.iter().map(|s| target(&mut rng, s, true)).collect();
        let pt: Vec<f64> = sweeps.iter().map(|s| target(&mut rng, s, false)).collect();
        let w = weighted.then_some(weights.as_slice());
        for objective in [
            ThresholdObjective::MaxF1,
            ThresholdObjective::MatchRecall(rt.clone()),
            ThresholdObjective::MatchPrecision(pt.clone()),
        ] {
            let got = tune_thresholds(&probs, &gold, w, &objective).map_err(|e| e.to_string())?;
            for (e, (choice, sw)) in got.iter().zip(&sweeps).enumerate() {
                // sw is ascending in threshold
                let (expected, attainable) = match &objective {
                    ThresholdObjective::MaxF1 => {
                        let best = sw.iter().map(|c| c.f).fold(f64::NEG_INFINITY, f64::max);
                        (sw.iter().rev().find(|c| c.f == best).unwrap(), true)
                    }
                    ThresholdObjective::MatchRecall(t) => match sw.iter().rev().find(|c| c.r >= t[e]) {
                        Some(c) => (c, true),
                        None => {
                            let best = sw.iter().map(|c| c.r).fold(f64::NEG_INFINITY, f64::max);
                            (sw.iter().rev().find(|c| c.r == best).unwrap(), false)
                        }
                    },
                    ThresholdObjective::MatchPrecision(t) => match sw.iter().find(|c| c.p >= t[e]) {
                        Some(c) => (c, true),
                        None => {
                            let best = sw.iter().map(|c| c.p).fold(f64::NEG_INFINITY, f64::max);
                            (sw.iter().find(|c| c.p == best).unwrap(), false)
                        }
                    },
                };
                ensure(
                    choice.threshold == expected.t
                        && choice.attainable == attainable
                        && close(choice.precision, expected.p, 1e-12)
                        && close(choice.recall, expected.r, 1e-12)
                        && close(choice.f1, expected.f, 1e-12),
                    || {
                        format!(
                            "set {set} entity {e} {objective:?}: got t={} ({}) expected t={} ({attainable})",
                            choice.threshold, choice.attainable, expected.t
                        )
                    },
                )?;
                if matches!(objective, ThresholdObjective::MaxF1) {
                    // the best F1 over all midpoints between distinct scores is the same
                    let mut s: Vec<f64> = per_entity[e].iter().map(|p| p.0).collect();
                    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    s.dedup();
                    let mut mids: Vec<f64> = s.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
                    mids.extend([s[0] - 1.0, s[s.len() - 1] + 1.0]);
                    let best_mid = mids
                        .iter()
                        .map(|&m| {
                            let pts: Vec<_> = per_entity[e].iter().map(|&(p, g, w)| (if p >= m { 1.0 } else { 0.0 }, g, w)).collect();
                            naive_sweep(&pts).iter().find(|c| c.t == 1.0).unwrap().f
                        })
                        .fold(f64::NEG_INFINITY, f64::max);
                    ensure(close(best_mid, choice.f1, 1e-12), || format!("set {set} entity {e}: midpoint grid disagrees"))?;
                }
                compared += 1;
            }
        }
    }
    within(start.elapsed(), 10)?;
    Ok(format!("{compared} tuned entities matched in {:.2}s", start.elapsed().as_secs_f64()))
}

fn rel_err(a: f64, n: f64) -> Option<f64> {
    let scale = a.abs().max(n.abs());
    // components that are numerically zero on both sides carry no signal
    if scale < 1e-7 {
        None
    } else {
        Some((a - n).abs() / scale)
    }
}

// 3. analytic gradients against central differences
#[allow(clippy::needless_range_loop)]
fn gradient_check() -> Check {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, h, p, e) = (8, 4, 3, 5);
    let reg = small_registry(e);
    let personas: Vec<String> = (0..p).map(|i| format!("p{i}")).collect();
    let mut worst: f64 = 0.0;
    let mut n_checked = 0;
    for trial in 0..3 {
        let model = RouterModel::init(d, h, personas.clone(), reg.hash(), 0.1, trial).map_err(|e| e.to_string())?;
        let values: Vec<u8> = (0..p * e).map(|_| rng.gen_range(0..=3)).collect();
        let ex = RouterExample {
            embedding: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            matrix: ConfidenceMatrix::new("q", personas.clone(), reg.hash(), e, values).map_err(|e| e.to_string())?,
            gold: (0..e).map(|_| rng.gen_bool(0.5)).collect(),
        };
        let weights: Vec<f64> = (0..e).map(|_| rng.gen_range(0.5..2.0)).collect();
        for (dropout, w) in [(None, None), (Some(11u64), Some(weights.as_slice()))] {
            let (_, g) = model.loss_and_gradients(&ex, dropout, w).map_err(|e| e.to_string())?;
            let loss = |m: &RouterModel| m.loss_and_gradients(&ex, dropout, w).unwrap().0;
            macro_rules! check {
                ($field:ident) => {
                    for i in 0..model.$field.len() {
                        let mut plus = model.clone();
                        plus.$field[i] += H;
                        let mut minus = model.clone();
                        minus.$field[i] -= H;
                        let num = (loss(&plus) - loss(&minus)) / (2.0 * H);
                        if let Some(r) = rel_err(g.$field[i], num) {
                            worst = worst.max(r);
                            ensure(r <= 1e-3, || {
                                format!("router {}[{i}]: analytic {} numeric {num}", stringify!($field), g.$field[i])
                            })?;
                        }
                        n_checked += 1;
                    }
                };
            }
            check!(w1);
            check!(b1);
            check!(w2);
            check!(b2);
        }
    }

    let (dd, m, ec) = (16, 8, 3);
    let creg = small_registry(ec);
    let model = ClassifierModel::init(&creg, EncoderSpec::hashed(dd), m, 5).map_err(|e| e.to_string())?;
    let xs: Vec<Vec<(usize, f64)>> = (0..4)
        .map(|_| {
            let mut idx: Vec<usize> = (0..dd).filter(|_| rng.gen_bool(0.5)).collect();
            idx.dedup();
            idx.into_iter().map(|i| (i, rng.gen_range(-1.0..1.0))).collect()
        })
        .collect();
    let ys: Vec<Vec<bool>> = (0..4).map(|_| (0..ec).map(|_| rng.gen_bool(0.5)).collect()).collect();
    let batch: Vec<(&querylabel::classifier::SparseVec, &[bool])> = xs.iter().zip(&ys).map(|(x, y)| (x.as_slice(), y.as_slice())).collect();
    let (_, grads) = model.loss_and_gradients(&batch).map_err(|e| e.to_string())?;
    let loss = |m: &ClassifierModel| m.loss_and_gradients(&batch).unwrap().0;
    for k in 0..ec {
        macro_rules! check_vec {
            ($field:ident) => {
                for i in 0..model.heads[k].$field.len() {
                    let mut plus = model.clone();
                    plus.heads[k].$field[i] += H;
                    let mut minus = model.clone();
                    minus.heads[k].$field[i] -= H;
                    let num = (loss(&plus) - loss(&minus)) / (2.0 * H);
                    if let Some(r) = rel_err(grads[k].$field[i], num) {
                        worst = worst.max(r);
                        ensure(r <= 1e-3, || {
                            format!("head {k} {}[{i}]: analytic {} numeric {num}", stringify!($field), grads[k].$field[i])
                        })?;
                    }
                    n_checked += 1;
                }
            };
        }
        check_vec!(u1);
        check_vec!(c1);
        check_vec!(u2);
        let mut plus = model.clone();
        plus.heads[k].c2 += H;
        let mut minus = model.clone();
        minus.heads[k].c2 -= H;
        let num = (loss(&plus) - loss(&minus)) / (2.0 * H);
        if let Some(r) = rel_err(grads[k].c2, num) {
            worst = worst.max(r);
            ensure(r <= 1e-3, || format!("head {k} c2: analytic {} numeric {num}", grads[k].c2))?;
        }
        n_checked += 1;
    }
    Ok(format!("{n_checked} parameters, worst relative error {worst:.2e}"))
}

// 4. router learns to trust the persona that agrees with gold
fn router_learning() -> Check {
    let start = Instant::now();
    let reg = EntityRegistry::shipped();
    let cfg = RouterTrainConfig {
        seed: 7,
        ..Default::default()
    };
    let exp = synthetic_routing_experiment(&reg, 1000, 7, &cfg, 1, &[1, 2, 3, 4, 5]).map_err(|e| e.to_string())?;
    let rel = &exp.mean_relevance;
    let (o, a, r) = (rel[ORACLE_PERSONA], rel[ADVERSARIAL_PERSONA], rel[RANDOM_PERSONA]);
    ensure(o - a >= 0.2 && o - r >= 0.2, || format!("mean relevance oracle {o:.3} adversarial {a:.3} random {r:.3}"))?;
    let (rf, rnd) = (exp.comparison.router.micro.f1(), exp.comparison.random_mean_f1());
    ensure(rf > rnd, || format!("router top-1 F1 {rf:.4} not above random-1 {rnd:.4}"))?;
    within(start.elapsed(), 60)?;
    Ok(format!(
        "relevance oracle {o:.3} / adversarial {a:.3} / random {r:.3}; top-1 F1 {rf:.4} vs random-1 {rnd:.4}; {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

/// One seed of the distillation experiment: (classifier recall at matched
/// precision, baseline recall).
fn distill_once(seed: u64) -> Result<(f64, f64), String> {
    let err = |e: querylabel::Error| e.to_string();
    let reg = EntityRegistry::shipped();
    let world = SynthWorld::generate(
        &reg,
        &SynthConfig {
            seed,
            num_entities: 10,
            phrases_per_entity: 10,
            ..Default::default()
        },
    )
    .map_err(err)?;
    assert_eq!(world.num_phrases(), 100);
    let queries = world.queries(5000, seed).map_err(err)?;
    let recs = records(&queries);
    let gold = gold_store(&queries);
    let freqs: BTreeMap<String, u64> = recs.iter().map(|r| (r.id.clone(), r.frequency)).collect();

    let mock = MockAnnotator::new(&reg, world.gazetteer.clone(), seed, 0.1, &BTreeMap::new()).map_err(err)?;
    let client = AnnotatorClient::new(AnnotatorHandle::Mock(mock), None);
    let jobs: Vec<_> = recs.iter().map(|r| (r, None)).collect();
    let pc = PromptConfig::new(PromptVariant::ConfidenceCotIcl, &reg);
    let run = annotate_records(&client, &PromptBuilder::default(), &reg, &pc, &jobs).map_err(err)?;
    let store: AnnotationStore = run.records.iter().map(|a| (a.id.clone(), a.annotation.clone())).collect();
    let weak = weak_labels_from_annotations(&reg, &store, Confidence::High, "mock");

    let split = split_dataset(&recs, [0.7, 0.1, 0.2], seed).map_err(err)?;
    let train = join_labels(&split.train, &weak.labels).map_err(err)?;
    let dev = join_labels(&split.dev, &weak.labels).map_err(err)?;
    let cfg = ClassifierConfig {
        seed,
        ..Default::default()
    };
    let trained = train_classifier(&reg, &train, &dev, &cfg).map_err(err)?;
    let clf = Classifier::new(trained.model, &reg).map_err(err)?;

    let baseline_gz = world.baseline_gazetteer(0.4, seed).map_err(err)?;
    let test_gold: AnnotationStore = split.test.iter().map(|r| (r.id.clone(), gold[&r.id].clone())).collect();
    let base: AnnotationStore = split
        .test
        .iter()
        .map(|r| (r.id.clone(), querylabel::baseline::lexical_match(&baseline_gz, &r.text)))
        .collect();
    let base_rep = compute_metrics(&reg, &test_gold, &base, &freqs, false).map_err(err)?;
    let probs = split
        .test
        .iter()
        .map(|r| Ok((r.id.clone(), clf.predict_probs(&r.text)?)))
        .collect::<querylabel::Result<BTreeMap<_, _>>>()
        .map_err(err)?;
    let matched =
        matched_operating_point(&reg, &probs, &test_gold, &freqs, &base_rep, MatchTarget::Precision).map_err(err)?;
    Ok((matched.reported(), base_rep.micro.recall()))
}

// 5. distilled classifier beats the impoverished lexical baseline at matched precision
fn distillation() -> Check {
    let start = Instant::now();
    let mut gains = Vec::new();
    let mut detail = Vec::new();
    for seed in [1u64, 2, 3] {
        let (c, b) = distill_once(seed)?;
        gains.push((c - b) / b);
        detail.push(format!("seed {seed}: {c:.3} vs {b:.3}"));
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    ensure(mean >= 0.25, || format!("mean relative recall gain {:.1}% ({})", 100.0 * mean, detail.join(", ")))?;
    within(start.elapsed(), 300)?;
    Ok(format!(
        "Recall@MatchingPrecision gain {:.1}% ({}); {:.1}s",
        100.0 * mean,
        detail.join(", "),
        start.elapsed().as_secs_f64()
    ))
}

// 6. in-context examples resolve ambiguous dictionary entries
fn prompt_variants() -> Check {
    let reg = EntityRegistry::shipped();
    let mut out = Vec::new();
    for (seed, noise) in [(6u64, 0.0), (7, 0.1)] {
        let grid = synthetic_prompt_experiment(&reg, 500, seed, noise).map_err(|e| e.to_string())?;
        let f1 = |v: PromptVariant| grid.iter().find(|(x, _)| *x == v).unwrap().1.micro.f1();
        let (icl, base) = (f1(PromptVariant::ConfidenceCotIcl), f1(PromptVariant::Baseline));
        ensure(icl >= base, || format!("noise {noise}: ICL F1 {icl:.4} below baseline {base:.4}"))?;
        out.push(format!("noise {noise}: {icl:.4} vs {base:.4}"));
    }
    Ok(format!("ConfidenceCotIcl vs Baseline micro-F1, {}", out.join("; ")))
}

// 7. reruns are byte-identical and served from the cache
fn determinism() -> Check {
    let err = |e: querylabel::Error| e.to_string();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = common::demo_copy(tmp.path());
    let cfg = RunConfig::load(&cfg_path).map_err(err)?;
    let first = run_pipeline(&cfg).map_err(err)?;
    let bytes1 = std::fs::read(&first.manifest_path).map_err(|e| e.to_string())?;
    let second = run_pipeline(&cfg).map_err(err)?;
    let bytes2 = std::fs::read(&second.manifest_path).map_err(|e| e.to_string())?;
    ensure(bytes1 == bytes2, || "manifests differ between runs".into())?;
    ensure(first.llm_calls > 0 && second.llm_calls == 0, || {
        format!("annotator calls {} then {}", first.llm_calls, second.llm_calls)
    })?;
    // a fresh output directory with the same cache reproduces every artifact;
    // only the config digest moves, since output_dir is a config field
    let mut moved = cfg.clone();
    moved.output_dir = tmp.path().join("out/second");
    let third = run_pipeline(&moved).map_err(err)?;
    ensure(third.manifest.artifacts == first.manifest.artifacts && third.llm_calls == 0, || {
        "relocated rerun produced different artifacts".into()
    })?;
    ensure(third.manifest.config_sha256 != first.manifest.config_sha256, || "config digest ignores output_dir".into())?;

    // over HTTP: the second annotate pass sends nothing
    let server = common::spawn_server(|_, _| (200, "Genre|High".into()));
    let reg = EntityRegistry::shipped();
    let mut http = HttpConfig::new(server.url.clone(), "fake-model");
    http.requests_per_second = 1000.0;
    let cache_dir = tmp.path().join("http-cache");
    let recs = querylabel::data::load_queries(tmp.path().join("queries.jsonl")).map_err(err)?;
    let recs = &recs[..40];
    let personas = shipped_personas();
    let jobs: Vec<_> = recs.iter().map(|r| (r, Some(&personas[0]))).collect();
    let pc = PromptConfig::new(PromptVariant::ConfidenceCotIcl, &reg);
    let mut outputs: Vec<Vec<AnnotatedQuery>> = Vec::new();
    let mut calls = Vec::new();
    for _ in 0..2 {
        let client = AnnotatorClient::new(
            AnnotatorHandle::Http(HttpAnnotator::new(http.clone()).map_err(err)?),
            Some(ResponseCache::open(&cache_dir).map_err(err)?),
        );
        let run = annotate_records(&client, &PromptBuilder::default(), &reg, &pc, &jobs).map_err(err)?;
        outputs.push(run.records);
        calls.push(client.calls());
    }
    ensure(server.hits() == recs.len() && calls == vec![recs.len(), 0], || {
        format!("network requests {} (calls per pass {calls:?})", server.hits())
    })?;
    ensure(outputs[0] == outputs[1], || "cached annotations differ".into())?;
    Ok(format!(
        "{} artifacts, identical manifests, {} then 0 annotator calls; HTTP rerun sent 0 of {} requests",
        first.manifest.artifacts.len(),
        first.llm_calls,
        recs.len()
    ))
}

// 8. predict_entities is linear in the relevance and levels map to 0..3
fn matrix_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let reg = EntityRegistry::shipped();
    let n = reg.len();
    let personas = shipped_personas();
    let level = |c: Option<Confidence>| match c {
        None => 0u8,
        Some(Confidence::Low) => 1,
        Some(Confidence::Medium) => 2,
        Some(Confidence::High) => 3,
    };
    for i in 0..1000 {
        let np = rng.gen_range(1..=personas.len());
        let chosen = &personas[..np];
        let mut per = BTreeMap::new();
        let mut expected = Vec::with_capacity(np * n);
        for p in chosen {
            let mut a = Annotation::new();
            let mut row = vec![None; n];
            for (e, slot) in row.iter_mut().enumerate() {
                let c = match rng.gen_range(0..4) {
                    0 => None,
                    k => Some([Confidence::Low, Confidence::Medium, Confidence::High][k - 1]),
                };
                if let Some(c) = c {
                    a.insert(EntityId::new(e), c);
                }
                *slot = c;
            }
            expected.extend(row.into_iter().map(level));
            per.insert(p.id.clone(), a);
        }
        let m = build_confidence_matrix(&format!("q{i}"), &per, chosen, &reg).map_err(|e| e.to_string())?;
        ensure(m.values() == expected.as_slice(), || format!("matrix {i}: confidence mapping differs"))?;

        let r1: Vec<f64> = (0..np).map(|_| rng.gen_range(0.0..1.0)).collect();
        let r2: Vec<f64> = (0..np).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mix: Vec<f64> = r1.iter().zip(&r2).map(|(x, y)| a * x + b * y).collect();
        let f = |r: &[f64]| predict_entities(r, &m).map_err(|e| e.to_string());
        let (y1, y2, ym) = (f(&r1)?, f(&r2)?, f(&mix)?);
        for e in 0..n {
            let direct: f64 = (0..np).map(|p| r1[p] * expected[p * n + e] as f64 / 3.0).sum();
            ensure(close(y1[e], direct, 1e-12), || format!("matrix {i} entity {e}: product differs"))?;
            ensure(close(ym[e], a * y1[e] + b * y2[e], 1e-9), || format!("matrix {i} entity {e}: not linear"))?;
        }
    }
    Ok("1000 matrices: mapping {absent,L,M,H} -> {0,1,2,3} and linearity hold".into())
}

fn main() {
    // honour `cargo test -- <filter>` loosely: run everything unless asked to list
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let criteria: [Criterion; 8] = [
        ("1 metrics oracle", metrics_oracle),
        ("2 threshold oracle", threshold_oracle),
        ("3 gradient check", gradient_check),
        ("4 router learning", router_learning),
        ("5 distillation", distillation),
        ("6 prompt variants", prompt_variants),
        ("7 determinism", determinism),
        ("8 matrix algebra", matrix_algebra),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(msg) => println!("PASS criterion {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

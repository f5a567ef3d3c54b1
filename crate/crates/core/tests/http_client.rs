mod common;

use std::sync::{Arc, Mutex};

use querylabel::llm::{AnnotatorClient, AnnotatorHandle, HttpAnnotator, HttpConfig, ResponseCache};
use querylabel::prompting::{PromptBuilder, PromptConfig, PromptVariant};
use querylabel::EntityRegistry;

fn fast(url: &str, retries: u32) -> HttpConfig {
    let mut c = HttpConfig::new(url, "fake-model");
    c.max_retries = retries;
    c.backoff_base_ms = 5;
    c.requests_per_second = 1000.0;
    c.timeout_ms = 5_000;
    c
}

fn prompts(n: usize) -> Vec<querylabel::prompting::PromptText> {
    let reg = EntityRegistry::shipped();
    let cfg = PromptConfig::new(PromptVariant::Baseline, &reg);
    (0..n)
        .map(|i| PromptBuilder::default().build(&cfg, &reg, &format!("query number {i}"), None).unwrap())
        .collect()
}

#[test]
fn two_server_errors_then_success_takes_three_attempts() {
    let server = common::spawn_server(|n, _| if n < 2 { (500, "oops".into()) } else { (200, "Genre|High".into()) });
    let client = AnnotatorClient::new(AnnotatorHandle::Http(HttpAnnotator::new(fast(&server.url, 3)).unwrap()), None);
    let out = client.annotate_batch(&prompts(1)).unwrap();
    assert_eq!(out[0].as_deref(), Ok("Genre|High"));
    assert_eq!(server.hits(), 3);
}

#[test]
fn retries_are_bounded_and_failures_are_records() {
    let server = common::spawn_server(|_, _| (503, "busy".into()));
    let client = AnnotatorClient::new(AnnotatorHandle::Http(HttpAnnotator::new(fast(&server.url, 2)).unwrap()), None);
    let out = client.annotate_batch(&prompts(1)).unwrap();
    let f = out[0].as_ref().unwrap_err();
    assert!(f.transient);
    assert_eq!(f.attempts, 3);
    assert_eq!(server.hits(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = common::spawn_server(|_, _| (400, "bad request".into()));
    let client = AnnotatorClient::new(AnnotatorHandle::Http(HttpAnnotator::new(fast(&server.url, 3)).unwrap()), None);
    let out = client.annotate_batch(&prompts(1)).unwrap();
    let f = out[0].as_ref().unwrap_err();
    assert!(!f.transient);
    assert_eq!(f.attempts, 1);
    assert_eq!(server.hits(), 1);
}

#[test]
fn responses_stay_aligned_with_prompts_and_failures_do_not_abort() {
    // answer with the query number found in the prompt; fail query 3 permanently
    let server = common::spawn_server(|_, body| {
        let v: serde_json::Value = serde_json::from_str(body).unwrap();
        let prompt = v["prompt"].as_str().unwrap();
        let n: usize = prompt
            .split("query number ")
            .nth(1)
            .and_then(|s| s.split(|c: char| !c.is_ascii_digit()).next())
            .and_then(|s| s.parse().ok())
            .unwrap();
        if n == 3 {
            (404, "missing".into())
        } else {
            (200, format!("answer {n}"))
        }
    });
    let mut cfg = fast(&server.url, 1);
    cfg.max_in_flight = 4;
    let client = AnnotatorClient::new(AnnotatorHandle::Http(HttpAnnotator::new(cfg).unwrap()), None);
    let out = client.annotate_batch(&prompts(12)).unwrap();
    for (i, o) in out.iter().enumerate() {
        if i == 3 {
            assert_eq!(o.as_ref().unwrap_err().index, 3);
        } else {
            assert_eq!(o.as_deref(), Ok(format!("answer {i}").as_str()));
        }
    }
}

#[test]
fn request_body_carries_model_and_prompt_when_token_is_set() {
    let seen = Arc::new(Mutex::new(String::new()));
    let s2 = Arc::clone(&seen);
    let server = common::spawn_server(move |_, body| {
        *s2.lock().unwrap() = body.to_owned();
        (200, "None".into())
    });
    std::env::set_var("QUERYLABEL_TEST_TOKEN", "secret");
    let mut cfg = fast(&server.url, 0);
    cfg.auth_env = Some("QUERYLABEL_TEST_TOKEN".into());
    let client = AnnotatorClient::new(AnnotatorHandle::Http(HttpAnnotator::new(cfg).unwrap()), None);
    client.annotate_batch(&prompts(1)).unwrap();
    let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()).unwrap();
    assert_eq!(body["model"], "fake-model");
    assert!(body["prompt"].as_str().unwrap().contains("query number 0"));
}

#[test]
fn identical_prompt_is_served_from_cache() {
    let server = common::spawn_server(|_, _| (200, "Sport|Low".into()));
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(dir.path()).unwrap();
    let client = AnnotatorClient::new(AnnotatorHandle::Http(HttpAnnotator::new(fast(&server.url, 0)).unwrap()), Some(cache));
    let p = prompts(1);
    client.annotate_batch(&p).unwrap();
    let again = client.annotate_batch(&p).unwrap();
    assert_eq!(again[0].as_deref(), Ok("Sport|Low"));
    assert_eq!(server.hits(), 1);
    assert_eq!(client.cache_hits(), 1);
}

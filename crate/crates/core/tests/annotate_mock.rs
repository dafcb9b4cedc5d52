// SPDX-License-Identifier: MIT OR Apache-2.0

//! Annotator client against a scripted local HTTP server.

mod common;

use std::time::{Duration, Instant};

use featrace_core::annotate::{annotate, annotate_many, AnnotationRequest, EndpointConfig};
use featrace_core::error::Error;

use common::{chat, serve, Reply};

fn config(url: &str) -> EndpointConfig {
    EndpointConfig {
        base_url: url.into(),
        model_name: "test-model".into(),
        timeout_seconds: 5.0,
        max_retries: 3,
        backoff_initial_ms: 10,
        ..EndpointConfig::default()
    }
}

fn request(feature: usize) -> AnnotationRequest {
    AnnotationRequest {
        feature,
        prompt: format!("describe feature {feature}"),
    }
}

#[test]
fn success_echoes_fields_and_sends_chat_body() {
    let s = serve(vec![Reply::Respond(200, chat(r#"{"summarization":"plural nouns","complexity":2}"#))]);
    let r = annotate(&config(&s.url), &request(3)).unwrap();
    assert_eq!(r.summarization, "plural nouns");
    assert_eq!(r.complexity, 2.0);
    assert_eq!((r.feature, r.retries, r.clamped), (3, 0, false));
    let reqs = s.requests.lock().unwrap();
    assert!(reqs[0].head.starts_with("POST /v1/chat/completions"));
    let body: serde_json::Value = serde_json::from_str(&reqs[0].body).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "describe feature 3");
    assert_eq!(body["temperature"], 0.0);
}

#[test]
fn bare_object_body_is_accepted() {
    let s = serve(vec![Reply::Respond(200, r#" {"summarization":"x","complexity":3.7} "#.into())]);
    assert_eq!(annotate(&config(&s.url), &request(0)).unwrap().complexity, 3.7);
}

#[test]
fn malformed_json_keeps_raw_body() {
    let raw = "{\"choices\": [oops";
    let s = serve(vec![Reply::Respond(200, raw.into())]);
    match annotate(&config(&s.url), &request(0)) {
        Err(Error::Parse { raw: r, .. }) => assert_eq!(r, raw),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn rate_limit_then_success_records_retries() {
    let s = serve(vec![
        Reply::Respond(429, "{}".into()),
        Reply::Respond(429, "{}".into()),
        Reply::Respond(200, chat(r#"{"summarization":"ok","complexity":4}"#)),
    ]);
    let r = annotate(&config(&s.url), &request(1)).unwrap();
    assert_eq!(r.retries, 2);
    assert_eq!(s.requests.lock().unwrap().len(), 3);
}

#[test]
fn out_of_range_complexity_is_clamped() {
    let s = serve(vec![Reply::Respond(200, chat(r#"{"summarization":"z","complexity":7}"#))]);
    let r = annotate(&config(&s.url), &request(0)).unwrap();
    assert_eq!(r.complexity, 5.0);
    assert!(r.clamped);
}

#[test]
fn persistent_server_errors_give_up() {
    let s = serve(vec![Reply::Respond(503, "busy".into())]);
    let cfg = EndpointConfig {
        max_retries: 2,
        ..config(&s.url)
    };
    assert!(matches!(annotate(&cfg, &request(0)), Err(Error::Http(_))));
    assert_eq!(s.requests.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let s = serve(vec![Reply::Respond(400, "bad".into())]);
    assert!(matches!(annotate(&config(&s.url), &request(0)), Err(Error::Http(_))));
    assert_eq!(s.requests.lock().unwrap().len(), 1);
}

#[test]
fn hanging_server_is_bounded_by_timeout_budget() {
    let s = serve(vec![Reply::Hang(Duration::from_secs(30))]);
    let cfg = EndpointConfig {
        timeout_seconds: 0.3,
        max_retries: 1,
        ..config(&s.url)
    };
    let start = Instant::now();
    assert!(annotate(&cfg, &request(0)).is_err());
    assert!(start.elapsed() <= Duration::from_secs_f64(0.3 * 2.0 + 0.5), "{:?}", start.elapsed());
}

#[test]
fn auth_token_comes_from_named_env_var() {
    let s = serve(vec![Reply::Respond(200, chat(r#"{"summarization":"a","complexity":1}"#))]);
    std::env::set_var("FEATRACE_TEST_TOKEN", "sekret");
    let cfg = EndpointConfig {
        auth_token_env_var: Some("FEATRACE_TEST_TOKEN".into()),
        ..config(&s.url)
    };
    annotate(&cfg, &request(0)).unwrap();
    let head = s.requests.lock().unwrap()[0].head.to_lowercase();
    assert!(head.contains("authorization: bearer sekret"));
    let missing = EndpointConfig {
        auth_token_env_var: Some("FEATRACE_TEST_TOKEN_UNSET".into()),
        ..config(&s.url)
    };
    assert!(matches!(annotate(&missing, &request(0)), Err(Error::InvalidInput(_))));
}

#[test]
fn many_requests_come_back_in_feature_order() {
    let s = serve(vec![Reply::Respond(200, chat(r#"{"summarization":"m","complexity":2.5}"#))]);
    let reqs: Vec<_> = [9, 2, 5, 0, 7].into_iter().map(request).collect();
    let out = annotate_many(&config(&s.url), &reqs);
    let ids: Vec<usize> = out.iter().map(|(f, _)| *f).collect();
    assert_eq!(ids, vec![0, 2, 5, 7, 9]);
    assert!(out.iter().all(|(_, r)| r.as_ref().unwrap().complexity == 2.5));
}

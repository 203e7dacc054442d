mod common;

use aes_core::corpus::builtin_prompt_table;
use aes_core::feedback::{FeedbackError, FeedbackSource, LlmClient, LlmConfig};
use aes_core::scoring::{score_essay, ScoreReport};
use common::{fenced_reply, MockLlm, MockReply};

fn report(prompt_id: u32) -> ScoreReport {
    let table = builtin_prompt_table();
    let model = common::small_model(&table);
    score_essay(common::SAMPLE_ESSAY, table.get(prompt_id).unwrap(), &model).unwrap()
}

fn trait_names(r: &ScoreReport) -> Vec<&str> {
    r.traits.keys().map(String::as_str).collect()
}

#[tokio::test]
async fn well_formed_reply_becomes_a_bundle() {
    let r = report(8);
    let mock = MockLlm::start(vec![MockReply::chat(&fenced_reply(&trait_names(&r)))]).await;
    let key_env = "AES_TEST_KEY_WELL_FORMED";
    std::env::set_var(key_env, "secret-token");
    let client = LlmClient::new(LlmConfig {
        api_key_env: key_env.into(),
        ..mock.config()
    })
    .unwrap();
    let bundle = client.request_feedback("prompt text", &r).await.unwrap();
    assert_eq!(bundle.provenance.source, FeedbackSource::Remote);
    assert_eq!(bundle.provenance.model, "mock-model");
    assert_eq!(bundle.commentary.len(), 6);
    assert_eq!(bundle.commentary["voice"], "advice on voice");
    assert_eq!(bundle.overall_summary, "summary");

    let log = mock.log.lock().unwrap();
    let (auth, body) = &log.requests[0];
    assert_eq!(auth.as_deref(), Some("Bearer secret-token"));
    assert_eq!(body["model"], "mock-model");
    assert_eq!(body["temperature"], 0.3);
    let messages = body["messages"].as_array().unwrap();
    assert_eq!(messages[0]["role"], "system");
    assert!(messages[0]["content"].as_str().unwrap().contains("\"ideas_and_content\""));
    assert_eq!(messages[1]["content"], "prompt text");
}

#[tokio::test]
async fn missing_section_is_repaired_once() {
    let r = report(3);
    let names = trait_names(&r);
    let mock = MockLlm::start(vec![
        MockReply::chat(&fenced_reply(&names[1..])),
        MockReply::chat(&fenced_reply(&names)),
    ])
    .await;
    let client = LlmClient::new(mock.config()).unwrap();
    let bundle = client.request_feedback("p", &r).await.unwrap();
    assert_eq!(bundle.commentary.len(), 4);
    assert_eq!(mock.hits(), 2);
    let log = mock.log.lock().unwrap();
    let repair = log.requests[1].1["messages"].as_array().unwrap();
    assert_eq!(repair.len(), 4);
    assert_eq!(repair[2]["role"], "assistant");
    assert!(repair[3]["content"].as_str().unwrap().contains(names[0]));
}

#[tokio::test]
async fn missing_section_after_repair_is_malformed() {
    let r = report(3);
    let names = trait_names(&r);
    let mock = MockLlm::start(vec![MockReply::chat(&fenced_reply(&names[1..]))]).await;
    let client = LlmClient::new(mock.config()).unwrap();
    let err = client.request_feedback("p", &r).await.unwrap_err();
    assert!(matches!(err, FeedbackError::MalformedReply(_)), "{err}");
    assert_eq!(mock.hits(), 2);
}

#[tokio::test]
async fn transient_errors_are_retried() {
    let r = report(1);
    let mock = MockLlm::start(vec![
        MockReply::status(503, "busy"),
        MockReply::status(429, "slow down"),
        MockReply::chat(&fenced_reply(&trait_names(&r))),
    ])
    .await;
    let client = LlmClient::new(mock.config()).unwrap();
    assert!(client.request_feedback("p", &r).await.is_ok());
    assert_eq!(mock.hits(), 3);
}

#[tokio::test]
async fn retries_stop_at_max_retries() {
    let r = report(1);
    let mock = MockLlm::start(vec![MockReply::status(500, "boom")]).await;
    let client = LlmClient::new(mock.config()).unwrap();
    match client.request_feedback("p", &r).await.unwrap_err() {
        FeedbackError::RemoteError { status, body } => {
            assert_eq!(status, Some(500));
            assert_eq!(body, "boom");
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(mock.hits(), 3);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let r = report(1);
    let mock = MockLlm::start(vec![MockReply::status(401, "no key")]).await;
    let client = LlmClient::new(mock.config()).unwrap();
    assert!(matches!(
        client.request_feedback("p", &r).await,
        Err(FeedbackError::RemoteError { status: Some(401), .. })
    ));
    assert_eq!(mock.hits(), 1);
}

#[tokio::test]
async fn slow_server_times_out() {
    let r = report(1);
    let mock = MockLlm::start(vec![MockReply::chat("late").delayed(1500)]).await;
    let client = LlmClient::new(LlmConfig {
        timeout_secs: 0.2,
        max_retries: 1,
        ..mock.config()
    })
    .unwrap();
    assert!(matches!(
        client.request_feedback("p", &r).await,
        Err(FeedbackError::Timeout { attempts: 2 })
    ));
    assert_eq!(mock.hits(), 2);
}

#[tokio::test]
async fn in_flight_calls_are_bounded() {
    let r = report(2);
    let mock = MockLlm::start(vec![MockReply::chat(&fenced_reply(&trait_names(&r))).delayed(50)]).await;
    let client = std::sync::Arc::new(
        LlmClient::new(LlmConfig {
            max_in_flight: 2,
            ..mock.config()
        })
        .unwrap(),
    );
    let tasks: Vec<_> = (0..6)
        .map(|_| {
            let client = std::sync::Arc::clone(&client);
            let r = r.clone();
            tokio::spawn(async move { client.request_feedback("p", &r).await })
        })
        .collect();
    for t in tasks {
        assert!(t.await.unwrap().is_ok());
    }
    assert_eq!(mock.hits(), 6);
    assert!(mock.log.lock().unwrap().max_in_flight <= 2);
}

#[tokio::test]
async fn stub_needs_no_network() {
    let r = report(5);
    let client = LlmClient::new(LlmConfig {
        endpoint: "http://127.0.0.1:9/unreachable".into(),
        model: "m".into(),
        offline_stub: true,
        ..LlmConfig::default()
    })
    .unwrap();
    let a = client.request_feedback("p", &r).await.unwrap();
    let b = client.request_feedback("p", &r).await.unwrap();
    assert_eq!(a, b);
    assert_eq!(a.provenance.source, FeedbackSource::Stub);
    assert_eq!(a.provenance.latency_ms, 0);
}

//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use tesr_core::data::RetrievalDataset;
use tesr_core::synth::{build_benchmark, ChatClient, ChatClientConfig, Describer, DomainSpec, SplitFractions};

/// Serves one scripted `(status, body)` per connection and records each
/// request body. Returns the endpoint URL.
pub fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in script {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                if let Some((k, v)) = l.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut req = vec![0u8; len];
            reader.read_exact(&mut req).unwrap();
            log.lock().unwrap().push(String::from_utf8(req).unwrap());
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1/chat/completions"), seen)
}

pub fn completion(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

pub fn mock_client(endpoint: String) -> ChatClient {
    ChatClient::new(ChatClientConfig {
        endpoint,
        api_key_env: "TESR_TEST_UNSET_KEY".into(),
        timeout_secs: 5.0,
        max_retries: 2,
        backoff_ms: 1,
        ..Default::default()
    })
    .unwrap()
}

/// `H_n / n`: expected reciprocal rank of a uniformly random ranking.
pub fn random_mrr(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum::<f64>() / n as f64
}

pub const SPLITS_80_10_10: SplitFractions = SplitFractions { train: 0.8, valid: 0.1, test: 0.1 };

/// Ten event types with default timing knobs.
pub fn ten_type_spec() -> DomainSpec {
    DomainSpec {
        name: "ten_type".into(),
        event_type_names: "ABCDEFGHIJ".chars().map(|c| format!("Type {c}")).collect(),
        mean_length: 12.0,
        min_length: 4,
        max_length: 24,
        ..Default::default()
    }
}

/// Three magnitude types; sequences differ mostly in their timing.
pub fn time_signature_spec() -> DomainSpec {
    DomainSpec { name: "time_signature".into(), ..DomainSpec::us_earthquake() }
}

/// Twenty-five badge types with plain exponential gaps: the type mix is
/// what tells sequences apart.
pub fn text_signature_spec() -> DomainSpec {
    DomainSpec {
        name: "text_signature".into(),
        clustering: 0.0,
        rate_spread: 0.0,
        trend: 0.0,
        ..DomainSpec::stack_overflow()
    }
}

/// 1000 template-described pairs split 800 / 100 / 100.
pub fn corpus(spec: DomainSpec, seed: u64) -> RetrievalDataset {
    build_benchmark(&[spec], 1000, Describer::Template, SPLITS_80_10_10, seed, None)
        .unwrap()
        .remove(0)
}

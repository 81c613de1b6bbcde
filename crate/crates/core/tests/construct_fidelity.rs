use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use nsft_core::construct::llm::{HttpTransport, LlmConfig, LlmOracle};
use nsft_core::construct::{
    balance_yes_no, construct_conversation, ocrvqa_pairs, scan_clauses, yes_fraction, ConstructionStyle, Conversation,
    ErrorCodebook, ErrorOracle, RuleOracle,
};
use nsft_core::model::TokenId;
use nsft_core::world::vocab::{NO, YES};
use nsft_core::world::{make_preference_dataset, CorruptionKind, ObjectId, Replacement, WorldSample};
use nsft_core::Error;

/// `(kind, object)` for every injected corruption.
fn injected(s: &WorldSample) -> BTreeSet<(CorruptionKind, ObjectId)> {
    s.corruptions
        .iter()
        .map(|c| {
            let object = match c.replacement {
                Replacement::Clause(clause) => clause.object,
                _ => s.scene.objects[c.target].object,
            };
            (c.category, object)
        })
        .collect()
}

fn object_at(tokens: &[TokenId], span: (usize, usize)) -> ObjectId {
    let clause = scan_clauses(tokens)
        .into_iter()
        .find(|c| c.pos <= span.0 && span.0 < c.pos + 4)
        .expect("span inside a clause");
    clause.fact.object
}

/// `(kind, object)` read back from identified spans and evidence.
fn identified(s: &WorldSample, cb: &ErrorCodebook) -> BTreeSet<(CorruptionKind, ObjectId)> {
    RuleOracle
        .identify_errors(&s.rejected_tokens, &s.chosen_tokens, cb)
        .unwrap()
        .into_iter()
        .map(|e| {
            let kind = CorruptionKind::from_codebook_category(&e.category).unwrap();
            let object = match kind {
                CorruptionKind::ObjectSwap | CorruptionKind::ObjectOmission => {
                    object_at(&s.chosen_tokens, e.evidence.unwrap())
                }
                _ => object_at(&s.rejected_tokens, e.span),
            };
            (kind, object)
        })
        .collect()
}

#[test]
fn rule_oracle_has_perfect_precision_and_recall() {
    let cb = ErrorCodebook::builtin();
    let data = make_preference_dataset(500, 0).unwrap();
    let (mut tp, mut found, mut truth) = (0usize, 0usize, 0usize);
    for s in &data {
        let want = injected(s);
        let got = identified(s, &cb);
        tp += got.intersection(&want).count();
        found += got.len();
        truth += want.len();
    }
    assert_eq!(tp, found, "precision {}", tp as f64 / found as f64);
    assert_eq!(tp, truth, "recall {}", tp as f64 / truth as f64);
}

fn counts(c: &Conversation) -> (usize, usize, usize) {
    let body = |t: &nsft_core::construct::Turn| {
        t.answer
            .iter()
            .copied()
            .filter(|&x| x != nsft_core::world::vocab::EOS)
            .collect::<Vec<_>>()
    };
    let yes = c.turns.iter().filter(|t| body(t) == [YES]).count();
    let no = c.turns.iter().filter(|t| body(t) == [NO]).count();
    (yes, no, c.turns.len())
}

/// Whether removing some number of "no" turns reaches the band while
/// keeping at least one turn.
fn achievable(yes: usize, no: usize, total: usize, low: f64, high: f64) -> bool {
    (0..=no).any(|m| {
        let answered = yes + no - m;
        answered > 0 && total - m >= 1 && (low..=high).contains(&(yes as f64 / answered as f64))
    })
}

#[test]
fn balancing_reaches_the_band_when_achievable() {
    let cb = ErrorCodebook::builtin();
    let (low, high) = (0.4, 0.6);
    let mut checked = 0;
    for (i, s) in make_preference_dataset(500, 1).unwrap().iter().enumerate() {
        for (k, style) in [
            (5, ConstructionStyle::Caption),
            (3, ConstructionStyle::Ocrvqa),
            (8, ConstructionStyle::Caption),
        ] {
            let errs = RuleOracle
                .identify_errors(&s.rejected_tokens, &s.chosen_tokens, &cb)
                .unwrap();
            let conv = construct_conversation(&errs, &s.rejected_tokens, &s.chosen_tokens, k, style).unwrap();
            let (yes, no, total) = counts(&conv);
            let out = balance_yes_no(&conv, low, high, i as u64).unwrap();
            assert!(!out.is_empty());
            // only "no" turns are removed
            let (yes2, _, _) = counts(&out);
            assert_eq!(yes, yes2);
            if achievable(yes, no, total, low, high) {
                let f = yes_fraction(&out).unwrap();
                assert!((low..=high).contains(&f), "sample {i}: {f}");
                checked += 1;
            }
        }
    }
    assert!(checked > 100, "only {checked} achievable cases");
}

#[test]
fn ocrvqa_travel_recipe_example() {
    let pairs = ocrvqa_pairs("recipe", "travel").unwrap();
    assert_eq!(pairs[0], ("Is this a travel book?".to_string(), "Yes".to_string()));
    assert_eq!(pairs[1], ("Is this a recipe book?".to_string(), "No".to_string()));
}

struct Served {
    bodies: Vec<String>,
    auth: Vec<Option<String>>,
}

/// Minimal HTTP/1.1 server answering each request with `reply(index, body)`.
fn serve(reply: impl Fn(usize, &str) -> String + Send + Sync + 'static) -> (String, Arc<Mutex<Served>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let log = Arc::new(Mutex::new(Served {
        bodies: vec![],
        auth: vec![],
    }));
    let reply = Arc::new(reply);
    let state = log.clone();
    std::thread::spawn(move || {
        for (n, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { break };
            let (state, reply) = (state.clone(), reply.clone());
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let (mut len, mut auth) = (0usize, None);
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = Some(line["authorization:".len()..].trim().to_string());
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let body = String::from_utf8(body).unwrap();
                let out = reply(n, &body);
                {
                    let mut s = state.lock().unwrap();
                    s.bodies.push(body);
                    s.auth.push(auth);
                }
                let resp = format!(
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    out.len(),
                    out
                );
                stream.write_all(resp.as_bytes()).unwrap();
            });
        }
    });
    (url, log)
}

fn chat(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

const GOOD: &str = r#"{"errors":[{"category":"attribute/color","span":[1,2],"correction":"red","evidence":[1,2]}],"turns":[{"question":"what color is the cup ?","answer":"red"}]}"#;

#[test]
fn http_client_retries_until_schema_valid() {
    let (url, log) = serve(|n, _| {
        if n < 2 {
            chat("Sure! The errors are...")
        } else {
            chat(GOOD)
        }
    });
    let dir = tempfile::tempdir().unwrap();
    let audit = dir.path().join("audit.jsonl");
    let oracle = LlmOracle::new(
        HttpTransport::new(url, Some("test-token".into()), Duration::from_secs(10)),
        LlmConfig {
            concurrency: 1,
            ..LlmConfig::default()
        },
    )
    .with_audit_file(&audit)
    .unwrap();
    let cb = ErrorCodebook::builtin();
    let r = oracle
        .query("two blue cup . <eos>", "two red cup . <eos>", &cb)
        .unwrap();
    assert_eq!(r.errors[0].category, "attribute/color");
    assert_eq!(r.turns[0].answer, "red");
    let served = log.lock().unwrap();
    assert_eq!(served.bodies.len(), 3);
    assert!(served.auth.iter().all(|a| a.as_deref() == Some("Bearer test-token")));
    let request: serde_json::Value = serde_json::from_str(&served.bodies[0]).unwrap();
    let prompt = request["messages"][0]["content"].as_str().unwrap();
    assert!(prompt.contains("two blue cup") && prompt.contains("attribute/color"));
    let lines = std::fs::read_to_string(&audit).unwrap();
    assert_eq!(lines.lines().count(), 3);
}

#[test]
fn http_client_gives_up_after_three_retries() {
    let (url, log) = serve(|_, _| chat("{\"errors\": \"none\"}"));
    let oracle = LlmOracle::new(
        HttpTransport::new(url, None, Duration::from_secs(10)),
        LlmConfig::default(),
    );
    let err = oracle
        .query("two blue cup . <eos>", "two red cup . <eos>", &ErrorCodebook::builtin())
        .unwrap_err();
    match err {
        Error::OracleSchema { attempts, raw, .. } => {
            assert_eq!(attempts, 4);
            assert!(raw.contains("none"));
        }
        e => panic!("unexpected {e:?}"),
    }
    let served = log.lock().unwrap();
    assert_eq!(served.bodies.len(), 4);
    assert!(served.auth.iter().all(Option::is_none));
}

#[test]
fn batch_results_keep_input_order() {
    let (url, _) = serve(|_, body| {
        let at = body.find("item").expect("tagged request");
        let digits: String = body[at + 4..].chars().take_while(char::is_ascii_digit).collect();
        let tag = format!("item{digits}");
        // later items answer faster
        let n: u64 = digits.parse().unwrap();
        std::thread::sleep(Duration::from_millis(5 * (8 - n.min(8))));
        chat(&format!(
            r#"{{"errors":[],"turns":[{{"question":"q","answer":"{tag}"}}]}}"#
        ))
    });
    let oracle = LlmOracle::new(
        HttpTransport::new(url, None, Duration::from_secs(10)),
        LlmConfig {
            concurrency: 3,
            ..LlmConfig::default()
        },
    );
    let items: Vec<(String, String)> = (0..8)
        .map(|i| (format!("item{i} cup . <eos>"), "one cup . <eos>".to_string()))
        .collect();
    let out = oracle.query_batch(&items, &ErrorCodebook::builtin());
    for (i, r) in out.into_iter().enumerate() {
        assert_eq!(r.unwrap().turns[0].answer, format!("item{i}"));
    }
}

#[test]
fn llava_records_round_trip_constructed_conversations() {
    use nsft_core::construct::llava::LlavaRecord;
    use nsft_core::construct::Provenance;
    use nsft_core::train::{prepare_examples, ConstructOptions};
    use nsft_core::world::vocab::{detokenize, tokenize};

    let data = make_preference_dataset(100, 4).unwrap();
    for (i, ex) in prepare_examples(&data, &ConstructOptions::default())
        .unwrap()
        .iter()
        .enumerate()
    {
        let conv = ex.constructed.as_ref().unwrap();
        let rec = LlavaRecord::from_conversation(i.to_string(), format!("scene-{i}"), conv, detokenize);
        let text = serde_json::to_string(&rec).unwrap();
        let back: LlavaRecord = serde_json::from_str(&text).unwrap();
        let conv2 = back.to_conversation(Provenance::Constructed, tokenize).unwrap();
        assert_eq!(conv2.turns.len(), conv.turns.len());
        for (a, b) in conv.turns.iter().zip(&conv2.turns) {
            assert_eq!((&a.question, &a.answer), (&b.question, &b.answer));
        }
    }
}

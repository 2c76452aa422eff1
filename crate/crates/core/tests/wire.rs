//! Wire protocols against local fixture servers: remote classify and NER,
//! the bulk index endpoint, the post stream, reputation lookups and the
//! page fetcher.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use chrono::{TimeZone, Utc};
use parking_lot::Mutex;
use serde_json::{json, Value};

use ctiflow::bus::{Bus, BusConfig, Durability, TOPIC_TWEET_RAW};
use ctiflow::classifier::{remote_score, RemoteScorer, Scorer};
use ctiflow::clock;
use ctiflow::enrichment::{Found, LiveProvider, Provider, Verifier};
use ctiflow::fetcher::{FetchConfig, FetchError, Fetcher};
use ctiflow::frontier::CrawlTask;
use ctiflow::model::{
    Document, EntityLabel, Granularity, Indicator, IndicatorType, SourceKind, Spider,
};
use ctiflow::ner::{tag_remote, RemoteTagger, Tagger};
use ctiflow::remote::{RemoteClient, RemoteConfig};
use ctiflow::sink::{IndicatorSighting, RemoteSinkConfig, Sink, SinkConfig, SinkRecord};
use ctiflow::stream_source::{connect_http_stream, HttpStreamConfig, PostRecord, StreamError};

#[derive(Debug, Clone)]
struct Seen {
    method: String,
    url: String,
    headers: Vec<(String, String)>,
    body: String,
}

impl Seen {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

type Reply = (u16, String);

/// Serves `handler` on an ephemeral port and records every request.
fn serve<F>(handler: F) -> (String, Arc<Mutex<Vec<Seen>>>)
where
    F: Fn(&Seen) -> Reply + Send + 'static,
{
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let base = format!("http://{}", server.server_addr().to_ip().unwrap());
    let log: Arc<Mutex<Vec<Seen>>> = Arc::default();
    let l = log.clone();
    thread::spawn(move || {
        for mut req in server.incoming_requests() {
            let mut body = String::new();
            let _ = req.as_reader().read_to_string(&mut body);
            let seen = Seen {
                method: req.method().to_string(),
                url: req.url().to_string(),
                headers: req
                    .headers()
                    .iter()
                    .map(|h| (h.field.as_str().to_string(), h.value.to_string()))
                    .collect(),
                body,
            };
            let (status, text) = handler(&seen);
            l.lock().push(seen.clone());
            let ct = if text.starts_with('{') || text.starts_with('[') {
                "application/json"
            } else {
                "text/html"
            };
            let resp = tiny_http::Response::from_string(text)
                .with_status_code(status)
                .with_header(
                    format!("Content-Type: {ct}")
                        .parse::<tiny_http::Header>()
                        .unwrap(),
                );
            let _ = req.respond(resp);
        }
    });
    (base, log)
}

fn client(base: &str) -> RemoteClient {
    let mut cfg = RemoteConfig::new(base);
    cfg.timeout = Duration::from_secs(5);
    RemoteClient::new(&cfg).unwrap()
}

fn t0() -> chrono::DateTime<Utc> {
    Utc.with_ymd_and_hms(2023, 3, 1, 0, 0, 0).unwrap()
}

#[test]
fn classify_request_and_response_shape() {
    let (base, log) = serve(|s| {
        let body: Value = serde_json::from_str(&s.body).unwrap();
        match body["text"].as_str().unwrap() {
            "ok" => (
                200,
                json!({ "score": 0.75, "model_id": "bert-x" }).to_string(),
            ),
            "bare" => (200, json!({ "score": 0.2 }).to_string()),
            "high" => (200, json!({ "score": 1.5 }).to_string()),
            "none" => (200, json!({ "label": 1 }).to_string()),
            "text" => (200, json!({ "score": "0.5" }).to_string()),
            _ => (503, "busy".into()),
        }
    });
    let c = client(&base);
    let v = remote_score(&c, "ok", Granularity::Sentence, 0.5).unwrap();
    assert_eq!(
        (v.score, v.relevant, v.model_id.as_str()),
        (0.75, true, "bert-x")
    );
    assert_eq!(v.granularity, Granularity::Sentence);

    let v = remote_score(&c, "bare", Granularity::Page, 0.5).unwrap();
    assert!(!v.relevant);
    assert_eq!(v.model_id, format!("remote:{base}"));

    for bad in ["high", "none", "text", "down"] {
        assert!(
            remote_score(&c, bad, Granularity::Page, 0.5).is_err(),
            "{bad}"
        );
    }

    let seen = log.lock();
    assert!(seen
        .iter()
        .all(|s| s.method == "POST" && s.url == "/v1/classify"));
    let first: Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(first, json!({ "text": "ok", "granularity": "sentence" }));
    let second: Value = serde_json::from_str(&seen[1].body).unwrap();
    assert_eq!(second["granularity"], "page");
}

#[test]
fn remote_scorer_threshold_is_inclusive() {
    let (base, _log) = serve(|_| (200, json!({ "score": 0.5, "model_id": "m" }).to_string()));
    let s = RemoteScorer::new(client(&base), 0.5);
    assert!(s.score("x", Granularity::Page).unwrap().relevant);
}

#[test]
fn ner_spans_are_validated_against_host_text() {
    // Offsets count characters: "Ωmega" starts at 6 even though it starts
    // at byte 7.
    let text = "Ωmega Ωmega loader hits Acme Corp";
    let (base, log) = serve(|_| {
        (
            200,
            json!({ "spans": [
                { "label": "Malware", "start": 6, "end": 18 },
                { "label": "Organization", "start": 24, "end": 33 },
                // Cuts "Acme" in half.
                { "label": "Organization", "start": 26, "end": 33 },
                // Overlaps the first span.
                { "label": "System", "start": 12, "end": 18 },
                // Past the end of the text.
                { "label": "System", "start": 30, "end": 90 },
                { "label": "Weapon", "start": 0, "end": 5 },
                { "label": "Malware", "start": 3 },
            ]})
            .to_string(),
        )
    });
    let c = client(&base);
    let tagged = tag_remote(&c, text).unwrap();
    let got: Vec<(EntityLabel, &str)> = tagged
        .spans
        .iter()
        .map(|s| (s.label, s.text.as_str()))
        .collect();
    assert_eq!(
        got,
        vec![
            (EntityLabel::Malware, "Ωmega loader"),
            (EntityLabel::Organization, "Acme Corp")
        ]
    );
    assert_eq!(tagged.dropped, 5);
    let req: Value = serde_json::from_str(&log.lock()[0].body).unwrap();
    assert_eq!(req, json!({ "text": text }));
    assert_eq!(log.lock()[0].url, "/v1/ner");

    // Empty text never reaches the server.
    assert!(tag_remote(&c, "").unwrap().spans.is_empty());
    assert_eq!(log.lock().len(), 1);
}

#[test]
fn ner_missing_spans_field_is_an_error() {
    let (base, _log) = serve(|_| (200, json!({ "entities": [] }).to_string()));
    assert!(tag_remote(&client(&base), "x").is_err());
    let tagger = RemoteTagger::new(client(&base));
    assert!(tagger.tag("x").is_err());
}

fn sighting(i: usize) -> SinkRecord {
    let doc = Document::new(
        SourceKind::Twitter,
        format!("p{i}"),
        format!("post {i}"),
        t0(),
    );
    let ind = Indicator::new(
        &format!("10.1.{}.{}", i / 250, i % 250 + 1),
        IndicatorType::Ipv4,
        t0(),
    )
    .unwrap();
    SinkRecord::Indicator(IndicatorSighting::from_document(&doc, ind, t0()))
}

fn bulk_sink(dir: &std::path::Path, url: &str, key_env: Option<&str>) -> Sink {
    let mut cfg = SinkConfig::at(dir.join("archive.ndjson"));
    cfg.sync = false;
    cfg.remote = Some(RemoteSinkConfig {
        url: url.into(),
        batch_size: 50,
        flush_interval: Duration::from_secs(60),
        max_queue: 1000,
        timeout: Duration::from_secs(5),
        api_key_env: key_env.map(str::to_string),
    });
    Sink::open(&cfg).unwrap()
}

fn bulk_ids(body: &str) -> Vec<String> {
    body.lines()
        .step_by(2)
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            v["index"]["_id"].as_str().unwrap().to_string()
        })
        .collect()
}

#[test]
fn bulk_sink_sends_full_batches_with_api_key() {
    std::env::set_var("CTIFLOW_WIRE_TEST_SINK_KEY", "s3cret");
    let (base, log) = serve(|_| (200, json!({ "errors": false, "items": [] }).to_string()));
    let dir = tempfile::tempdir().unwrap();
    let sink = bulk_sink(dir.path(), &base, Some("CTIFLOW_WIRE_TEST_SINK_KEY"));
    for i in 0..100 {
        assert!(sink.index(&sighting(i)).unwrap().new);
    }
    // A duplicate is acknowledged but never forwarded.
    assert!(!sink.index(&sighting(0)).unwrap().new);
    sink.close();

    let stats = sink.stats().remote.unwrap();
    assert_eq!(
        (
            stats.requests,
            stats.sent,
            stats.failed_requests,
            stats.dropped
        ),
        (2, 100, 0, 0)
    );
    let seen = log.lock();
    assert_eq!(seen.len(), 2);
    let mut ids = HashSet::new();
    for s in seen.iter() {
        assert_eq!((s.method.as_str(), s.url.as_str()), ("POST", "/_bulk"));
        assert_eq!(s.header("Authorization"), Some("ApiKey s3cret"));
        assert_eq!(s.header("Content-Type"), Some("application/x-ndjson"));
        assert!(s.body.ends_with('\n'));
        let batch = bulk_ids(&s.body);
        assert_eq!(batch.len(), 50);
        ids.extend(batch);
    }
    assert_eq!(ids.len(), 100);
}

#[test]
fn bulk_sink_retries_failed_batch() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let (base, log) = serve(move |_| match c.fetch_add(1, Ordering::SeqCst) {
        0 => (500, "down".into()),
        1 => (200, json!({ "errors": true }).to_string()),
        _ => (200, json!({ "errors": false }).to_string()),
    });
    let dir = tempfile::tempdir().unwrap();
    let sink = bulk_sink(dir.path(), &base, None);
    for i in 0..50 {
        sink.index(&sighting(i)).unwrap();
    }
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    while sink.stats().remote.unwrap().sent < 50 && std::time::Instant::now() < deadline {
        thread::sleep(Duration::from_millis(10));
    }
    sink.close();
    let stats = sink.stats().remote.unwrap();
    assert_eq!(
        (stats.requests, stats.failed_requests, stats.sent),
        (3, 2, 50)
    );
    let seen = log.lock();
    assert!(seen.iter().all(|s| s.header("Authorization").is_none()));
    // The same batch is resent in the same order.
    assert_eq!(bulk_ids(&seen[0].body), bulk_ids(&seen[2].body));
}

fn post_line(id: &str) -> String {
    let p = PostRecord {
        id: id.into(),
        text: format!("text of {id}"),
        created_at: t0(),
    };
    serde_json::to_string(&p).unwrap() + "\n"
}

fn test_bus(dir: &std::path::Path) -> Arc<Bus> {
    Bus::open(BusConfig {
        durability: Durability::Buffered,
        ..BusConfig::at(dir.join("bus"))
    })
    .unwrap()
}

#[test]
fn http_stream_reconnects_after_drop_without_duplicates() {
    std::env::set_var("CTIFLOW_WIRE_TEST_STREAM_TOKEN", "tok");
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let auth: Arc<Mutex<Vec<String>>> = Arc::default();
    let a = auth.clone();
    thread::spawn(move || {
        for (n, conn) in listener.incoming().enumerate() {
            let mut conn = conn.unwrap();
            let mut buf = [0u8; 4096];
            let len = conn.read(&mut buf).unwrap();
            let head = String::from_utf8_lossy(&buf[..len]).to_string();
            a.lock().extend(
                head.lines()
                    .filter(|l| l.to_ascii_lowercase().starts_with("authorization:"))
                    .map(|l| l.to_string()),
            );
            let body = if n == 0 {
                // Promise more than is sent and hang up inside a record.
                let mut b = String::from("HTTP/1.1 200 OK\r\nContent-Length: 100000\r\n\r\n");
                for id in ["r1", "r2", "r3"] {
                    b.push_str(&post_line(id));
                }
                b.push_str("{\"id\":\"r4\",\"te");
                b
            } else {
                let mut b = String::from("HTTP/1.1 200 OK\r\nConnection: close\r\n\r\n");
                for id in ["r3", "r4", "r5", "r6"] {
                    b.push_str(&post_line(id));
                }
                b
            };
            conn.write_all(body.as_bytes()).unwrap();
            let _ = conn.flush();
        }
    });
    let dir = tempfile::tempdir().unwrap();
    let bus = test_bus(dir.path());
    let cfg = HttpStreamConfig {
        endpoint: format!("http://{addr}/stream"),
        token_env: Some("CTIFLOW_WIRE_TEST_STREAM_TOKEN".into()),
        backoff_base: Duration::from_millis(5),
        backoff_max: Duration::from_millis(20),
        limit: Some(5),
        max_reconnects: Some(5),
        ..HttpStreamConfig::default()
    };
    let stop = AtomicBool::new(false);
    let report = connect_http_stream(&cfg, &bus, clock::system().as_ref(), &stop).unwrap();
    assert_eq!(report.published, 5);
    assert_eq!(report.skipped_duplicate, 1);
    assert_eq!(report.reconnects, 1);
    let ids: Vec<String> = bus
        .read_all(TOPIC_TWEET_RAW)
        .unwrap()
        .iter()
        .map(|r| serde_json::from_slice::<PostRecord>(&r.payload).unwrap().id)
        .collect();
    assert_eq!(ids, ["r1", "r2", "r3", "r4", "r5"]);
    assert!(auth.lock().iter().all(|h| h.ends_with("Bearer tok")));
    assert_eq!(auth.lock().len(), 2);
}

#[test]
fn http_stream_auth_failure_is_permanent() {
    let (base, log) = serve(|_| (401, "no".into()));
    let dir = tempfile::tempdir().unwrap();
    let bus = test_bus(dir.path());
    let cfg = HttpStreamConfig {
        endpoint: format!("{base}/stream"),
        backoff_base: Duration::from_millis(1),
        ..HttpStreamConfig::default()
    };
    let stop = AtomicBool::new(false);
    match connect_http_stream(&cfg, &bus, clock::system().as_ref(), &stop) {
        Err(StreamError::Auth(401)) => {}
        other => panic!("expected auth error, got {other:?}"),
    }
    assert_eq!(log.lock().len(), 1);
}

#[test]
fn live_provider_maps_status_codes() {
    std::env::set_var("CTIFLOW_WIRE_TEST_REP_KEY", "k-123");
    let (base, log) = serve(|s| match s.url.as_str() {
        "/api/md5/d282e137db2d55ae8fd3a299136f277e" => (200, "{}".into()),
        "/api/domain/down.example.com" => (502, "bad gateway".into()),
        _ => (404, "{}".into()),
    });
    let p = LiveProvider::from_env(
        "vt",
        format!("{base}/api"),
        "CTIFLOW_WIRE_TEST_REP_KEY",
        Duration::from_secs(5),
    )
    .unwrap();
    assert!(!format!("{p:?}").contains("k-123"));
    let ind = |v: &str, k| Indicator::new(v, k, t0()).unwrap();
    let v = Verifier::new(
        vec![Arc::new(p) as Arc<dyn Provider>],
        Duration::from_secs(3600),
    );
    let hash = ind("d282e137db2d55ae8fd3a299136f277e", IndicatorType::Md5);
    assert_eq!(v.verify(&hash)[0].found, Found::Found);
    assert_eq!(
        v.verify(&ind("8.8.4.4", IndicatorType::Ipv4))[0].found,
        Found::NotFound
    );
    assert_eq!(
        v.verify(&ind("down.example.com", IndicatorType::Domain))[0].found,
        Found::Unknown
    );
    // Cached within the TTL.
    assert_eq!(v.verify(&hash)[0].found, Found::Found);
    let seen = log.lock();
    assert_eq!(seen.len(), 3);
    assert!(seen
        .iter()
        .all(|s| s.method == "GET" && s.header("x-apikey") == Some("k-123")));
    assert_eq!(seen[1].url, "/api/ipv4/8.8.4.4");
}

fn site_fetcher() -> Fetcher {
    Fetcher::new(FetchConfig {
        timeout: Duration::from_secs(5),
        retries: 3,
        backoff_base: Duration::from_millis(1),
        ..FetchConfig::default()
    })
    .unwrap()
}

#[test]
fn fetcher_follows_redirects_and_classifies_failures() {
    let flaky = Arc::new(AtomicUsize::new(0));
    let f = flaky.clone();
    let (base, log) = serve(move |s| match s.url.as_str() {
        "/robots.txt" => (200, "User-agent: *\nDisallow: /private\n".into()),
        "/page" => (200, "<html><body><p>hello</p></body></html>".into()),
        "/flaky" if f.fetch_add(1, Ordering::SeqCst) < 2 => (503, String::new()),
        "/flaky" => (200, "<p>ok</p>".into()),
        "/down" => (503, String::new()),
        _ => (404, String::new()),
    });
    let fetcher = site_fetcher();
    let task = |p: &str| CrawlTask::seed(format!("{base}{p}"), Spider::Ache, t0());

    let ok = fetcher.fetch(&task("/page")).unwrap();
    assert_eq!(ok.status, 200);
    assert!(String::from_utf8_lossy(&ok.body).contains("hello"));
    assert!(ok.content_type.unwrap().starts_with("text/html"));

    let ok = fetcher.fetch(&task("/flaky")).unwrap();
    assert_eq!(ok.status, 200);
    assert_eq!(flaky.load(Ordering::SeqCst), 3);

    match fetcher.fetch(&task("/missing")) {
        Err(FetchError::Permanent { status: 404, .. }) => {}
        other => panic!("{other:?}"),
    }
    match fetcher.fetch(&task("/down")) {
        Err(FetchError::Transient { attempts: 4, .. }) => {}
        other => panic!("{other:?}"),
    }
    let robots = fetcher.fetch_robots(&format!("{base}/any")).unwrap();
    assert!(robots.contains("Disallow: /private"));
    let seen = log.lock();
    assert_eq!(seen.iter().filter(|s| s.url == "/down").count(), 4);
    assert!(seen.iter().all(|s| s
        .header("User-Agent")
        .is_some_and(|u| u.starts_with("ctiflow/"))));
}

/// Answers each path with a fixed raw HTTP response.
fn raw_server(routes: Vec<(&'static str, String)>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    thread::spawn(move || {
        for conn in listener.incoming() {
            let mut conn = conn.unwrap();
            let mut buf = [0u8; 4096];
            let len = conn.read(&mut buf).unwrap_or(0);
            let head = String::from_utf8_lossy(&buf[..len]).to_string();
            let path = head.split_whitespace().nth(1).unwrap_or("/").to_string();
            let resp = routes
                .iter()
                .find(|(p, _)| *p == path)
                .map(|(_, r)| r.clone())
                .unwrap_or_else(|| {
                    "HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\nConnection: close\r\n\r\n"
                        .into()
                });
            let _ = conn.write_all(resp.as_bytes());
        }
    });
    base
}

fn redirect(to: &str) -> String {
    format!(
        "HTTP/1.1 302 Found\r\nLocation: {to}\r\nContent-Length: 0\r\nConnection: close\r\n\r\n"
    )
}

#[test]
fn fetcher_redirect_rules() {
    let page = "HTTP/1.1 200 OK\r\nContent-Type: text/html\r\nContent-Length: 9\r\nConnection: close\r\n\r\n<p>hi</p>";
    let base = raw_server(vec![
        ("/start", redirect("/hop1")),
        ("/hop1", redirect("/page")),
        ("/page", page.to_string()),
        ("/loop", redirect("/loop")),
        ("/hidden", redirect("http://abcdefghij234567.onion/")),
    ]);
    let fetcher = site_fetcher();
    let task = |p: &str| CrawlTask::seed(format!("{base}{p}"), Spider::Ache, t0());

    let ok = fetcher.fetch(&task("/start")).unwrap();
    assert_eq!(ok.final_url, format!("{base}/page"));
    assert_eq!(ok.body, b"<p>hi</p>");

    match fetcher.fetch(&task("/loop")) {
        Err(FetchError::TooManyRedirects(5)) => {}
        other => panic!("{other:?}"),
    }
    // A hop onto an onion host still needs the SOCKS route; without one it
    // fails before any connection is attempted.
    match fetcher.fetch(&task("/hidden")) {
        Err(FetchError::Config(_)) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn ner_span_cutting_an_indicator_is_dropped() {
    let text = "198.51.100.7 seen";
    let (base, _log) = serve(|s| {
        let end = if s.body.contains("seen") { 9 } else { 12 };
        (200, json!({ "spans": [{ "label": "Indicator", "start": 0, "end": end }] }).to_string())
    });
    let c = client(&base);
    let cut = tag_remote(&c, text).unwrap();
    assert!(cut.spans.is_empty());
    assert_eq!(cut.dropped, 1);

    let whole = tag_remote(&c, "198.51.100.7").unwrap();
    assert_eq!(whole.dropped, 0);
    assert_eq!(whole.spans.len(), 1);
    assert_eq!((whole.spans[0].label, whole.spans[0].text.as_str()), (EntityLabel::Indicator, "198.51.100.7"));
}

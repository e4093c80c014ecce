use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Duration;

use fedchain_core::harness::{load_scenario, Scenario, World};
use fedchain_core::hash::Digest;
use fedchain_gateway::{start_service, CallKind, GatewayError, ServiceHandle};
use futures::StreamExt;
use reqwest::{Client, Method, StatusCode};
use serde_json::{json, Value};

const HOUR: u64 = 3_600_000;
const ANY: &str = "127.0.0.1:0";

fn scenario(name: &str) -> Scenario {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name);
    load_scenario(&p).expect("bundled scenario loads")
}

/// The energy deployment with its script removed and a one-minute tick.
fn energy_api() -> Scenario {
    let mut s = scenario("energy.json");
    s.script.clear();
    s.delta_ms = 60_000;
    s
}

async fn start(s: Scenario) -> ServiceHandle {
    start_service(s, ANY.parse().unwrap())
        .await
        .expect("service starts")
}

struct Api {
    base: String,
    http: Client,
    mutations: usize,
}

impl Api {
    fn new(h: &ServiceHandle) -> Self {
        Self {
            base: h.base_url(),
            http: Client::new(),
            mutations: 0,
        }
    }

    async fn call(
        &mut self,
        method: Method,
        path: &str,
        token: Option<&str>,
        body: Option<Value>,
    ) -> (StatusCode, Value) {
        if method == Method::POST && path != "/api/anchors/verify" {
            self.mutations += 1;
        }
        let mut rq = self.http.request(method, format!("{}{path}", self.base));
        if let Some(t) = token {
            rq = rq.bearer_auth(t);
        }
        if let Some(b) = body {
            rq = rq.json(&b);
        }
        let resp = rq.send().await.expect("request sent");
        let status = resp.status();
        let text = resp.text().await.expect("body");
        (
            status,
            serde_json::from_str(&text).unwrap_or(Value::String(text)),
        )
    }

    async fn get(&mut self, path: &str, token: &str) -> (StatusCode, Value) {
        self.call(Method::GET, path, Some(token), None).await
    }

    async fn post(&mut self, path: &str, token: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, path, Some(token), Some(body)).await
    }

    async fn raw_post(&mut self, path: &str, token: &str, raw: &str) -> (StatusCode, Value) {
        self.mutations += 1;
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .bearer_auth(token)
            .header("content-type", "application/json")
            .body(raw.to_string())
            .send()
            .await
            .unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    /// Advances the simulated clock to at least `t`.
    async fn step_to(&mut self, now: u64, t: u64) -> u64 {
        let ticks = t.saturating_sub(now).div_ceil(60_000);
        let (st, v) = self
            .post("/api/sim/step", "dso-token", json!({ "ticks": ticks }))
            .await;
        assert_eq!(st, StatusCode::OK, "{v}");
        v["now"].as_u64().unwrap()
    }
}

fn chain_tx_ids(w: &World) -> BTreeSet<Digest> {
    w.net
        .ledgers()
        .flat_map(|l| {
            l.blocks()
                .iter()
                .flat_map(|b| b.transactions.iter().map(|s| s.tx.tx_id))
        })
        .collect()
}

fn request_body(start: u64) -> Value {
    json!({
        "scenario": "intraday",
        "energy_wh": 40000,
        "incentive_tokens": 40,
        "start": start,
        "end": start + HOUR,
        "lat": 42560000,
        "lon": 12646000,
        "radius_m": 1000
    })
}

#[tokio::test]
async fn requests_start_empty_and_reads_are_gated() {
    let h = start(energy_api()).await;
    let mut api = Api::new(&h);
    let (st, v) = api.get("/api/requests", "dso-token").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v, json!([]));

    let (st, _) = api.call(Method::GET, "/api/requests", None, None).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    let (st, _) = api.get("/api/requests", "nobody").await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);

    // the market ledger is restricted_read and the auditor is not a member
    let (st, v) = api.get("/api/requests", "auditor-token").await;
    assert_eq!(st, StatusCode::FORBIDDEN, "{v}");
    let (st, _) = api.get("/api/ledgers/MKT/blocks", "auditor-token").await;
    assert_eq!(st, StatusCode::FORBIDDEN);
    let (st, v) = api
        .get("/api/ledgers/PUB/blocks?from=0", "auditor-token")
        .await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v.as_array().unwrap()[0]["height"], 0);
    let (st, v) = api.get("/api/ledgers/MKT/blocks?from=1", "fm1-token").await;
    assert_eq!(st, StatusCode::OK);
    assert!(v
        .as_array()
        .unwrap()
        .iter()
        .all(|b| b["height"].as_u64().unwrap() >= 1));

    let (st, v) = api.get("/api/ledgers", "auditor-token").await;
    assert_eq!(st, StatusCode::OK);
    let ids: Vec<&str> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["MKT", "PAY", "PUB", "REW"]);

    let (st, v) = api.get("/api/requests/R0042", "dso-token").await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "UnknownRequest");
    let (st, _) = api.get("/api/ledgers/NOPE/blocks", "dso-token").await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn second_start_on_same_port_is_port_in_use() {
    let h = start(energy_api()).await;
    let err = start_service(energy_api(), h.addr)
        .await
        .err()
        .expect("second bind fails");
    assert!(
        matches!(err, GatewayError::PortInUse(a) if a == h.addr),
        "{err}"
    );
    h.shutdown().await.unwrap();
}

#[tokio::test]
async fn market_lifecycle_over_http_submits_one_tx_per_call() {
    let h = start(energy_api()).await;
    let setup = h.with_world(chain_tx_ids);
    let mut api = Api::new(&h);

    for (ev, token) in [
        ("EV-1", "fm2-token"),
        ("EV-2", "fm1-token"),
        ("EV-3", "fm2-token"),
    ] {
        let (st, v) = api
            .post(&format!("/api/fleet/{ev}/register"), token, json!({}))
            .await;
        assert_eq!(st, StatusCode::OK, "{ev}: {v}");
    }
    let (st, _) = api
        .post("/api/fleet/EV-1/register", "fm1-token", json!({}))
        .await;
    assert_eq!(st, StatusCode::FORBIDDEN);

    let (st, _) = api
        .post("/api/requests", "auditor-token", request_body(2 * HOUR))
        .await;
    assert_eq!(st, StatusCode::FORBIDDEN);
    let (st, _) = api
        .post("/api/requests", "user1-token", request_body(2 * HOUR))
        .await;
    assert_eq!(st, StatusCode::FORBIDDEN);
    let (st, v) = api
        .raw_post("/api/requests", "dso-token", "{\"energy_wh\": \"lots\"}")
        .await;
    assert_eq!(st, StatusCode::BAD_REQUEST, "{v}");
    let (st, v) = api.raw_post("/api/requests", "dso-token", "not json").await;
    assert_eq!(st, StatusCode::BAD_REQUEST, "{v}");

    let (st, v) = api
        .post("/api/requests", "dso-token", request_body(2 * HOUR))
        .await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    assert_eq!(v["id"], "R0000");
    assert_eq!(v["status"], "open");

    let (st, _) = api
        .post(
            "/api/requests/R0000/offers",
            "fm1-token",
            json!({"price_tokens": 35, "committed_wh": 40000}),
        )
        .await;
    assert_eq!(st, StatusCode::OK);
    let (st, _) = api
        .post(
            "/api/requests/R0000/offers",
            "fm2-token",
            json!({"price_tokens": 30, "committed_wh": 40000}),
        )
        .await;
    assert_eq!(st, StatusCode::OK);
    let (st, _) = api
        .post(
            "/api/requests/R0009/offers",
            "fm2-token",
            json!({"price_tokens": 30, "committed_wh": 40000}),
        )
        .await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, v) = api
        .post(
            "/api/requests/R0000/offers",
            "fm2-token",
            json!({"price_tokens": 30}),
        )
        .await;
    assert_eq!(st, StatusCode::BAD_REQUEST, "{v}");

    let (st, v) = api
        .post("/api/requests/R0000/close", "dso-token", json!({}))
        .await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(v["error"], "BiddingOpen");

    let now = api.step_to(0, 2 * HOUR - HOUR / 2).await;
    let (st, v) = api
        .post("/api/requests/R0000/close", "dso-token", json!({}))
        .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["winner"]["price_tokens"], 30);

    let (st, v) = api.get("/api/requests/R0000/candidates", "fm2-token").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["published"], false);
    assert_eq!(v["candidates"][0]["ev"], "EV-1");
    let (st, v) = api
        .post("/api/requests/R0000/candidates", "fm2-token", json!({}))
        .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let (_, v) = api
        .get("/api/requests/R0000/candidates", "user1-token")
        .await;
    assert_eq!(v["published"], true);
    assert_eq!(v["candidates"].as_array().unwrap().len(), 1);

    let (st, v) = api
        .post(
            "/api/assignments/R0000/accept",
            "user2-token",
            json!({"ev": "EV-1", "station": "CS-7"}),
        )
        .await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(v["error"], "NotACandidate");
    let (st, _) = api
        .post(
            "/api/assignments/R0000/accept",
            "user1-token",
            json!({"ev": "EV-1"}),
        )
        .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, v) = api
        .post(
            "/api/assignments/R0000/accept",
            "user1-token",
            json!({"ev": "EV-1", "station": "CS-7"}),
        )
        .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["status"], "assigned");

    let (st, v) = api
        .post("/api/requests/R0000/settle", "dso-token", json!({}))
        .await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(v["error"], "NotEnded");
    let now = api.step_to(now, 3 * HOUR).await;
    let (st, v) = api
        .post("/api/requests/R0000/settle", "dso-token", json!({}))
        .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["outcome"], "refunded");
    let (st, v) = api
        .post("/api/requests/R0000/settle", "dso-token", json!({}))
        .await;
    assert_eq!(st, StatusCode::CONFLICT, "{v}");
    api.step_to(now, 5 * HOUR).await;
    let (st, v) = api
        .post("/api/sim/seal", "dso-token", json!({"ledger": "PAY"}))
        .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let (st, _) = api
        .post("/api/sim/seal", "auditor-token", json!({"ledger": "PAY"}))
        .await;
    assert_eq!(st, StatusCode::FORBIDDEN);

    let (st, v) = api
        .post(
            "/api/anchors/verify",
            "auditor-token",
            json!({"source": "MKT"}),
        )
        .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["ok"], true);
    assert!(v["checked"].as_u64().unwrap() >= 1);
    let (_, v) = api.get("/api/anchors", "auditor-token").await;
    assert!(!v[0]["checkpoints"].as_array().unwrap().is_empty());

    // audit: chain contents beyond setup are exactly what the call log accounts for
    let log = h.audit_log();
    assert_eq!(
        log.iter()
            .filter(|c| c.kind != CallKind::Background)
            .count(),
        api.mutations
    );
    for c in log.iter().filter(|c| c.kind == CallKind::Api) {
        match c.status {
            200..=299 => assert_eq!(c.tx_ids.len(), 1, "{c:?}"),
            409 => assert_eq!(
                c.tx_ids.len(),
                1,
                "a rejected contract call is still recorded: {c:?}"
            ),
            _ => assert!(c.tx_ids.is_empty(), "{c:?}"),
        }
    }
    let logged: BTreeSet<Digest> = log.iter().flat_map(|c| c.tx_ids.iter().copied()).collect();
    let on_chain = h.with_world(chain_tx_ids);
    let new: BTreeSet<Digest> = on_chain.difference(&setup).copied().collect();
    assert_eq!(new, logged);
    let api_txs: usize = log
        .iter()
        .filter(|c| c.kind == CallKind::Api)
        .map(|c| c.tx_ids.len())
        .sum();
    assert!(api_txs >= 12);
    h.shutdown().await.unwrap();
}

/// Reads SSE frames until `n` envelopes arrive or the timeout passes.
async fn read_events(resp: reqwest::Response, n: usize, wait: Duration) -> Vec<Value> {
    let mut body = resp.bytes_stream();
    let mut buf = String::new();
    let mut out = Vec::new();
    let deadline = tokio::time::Instant::now() + wait;
    while out.len() < n {
        let chunk = match tokio::time::timeout_at(deadline, body.next()).await {
            Ok(Some(Ok(c))) => c,
            _ => break,
        };
        buf.push_str(&String::from_utf8_lossy(&chunk));
        while let Some(i) = buf.find("\n\n") {
            let frame: String = buf.drain(..i + 2).collect();
            for line in frame.lines() {
                if let Some(d) = line.strip_prefix("data:") {
                    out.push(serde_json::from_str(d.trim()).expect("envelope json"));
                }
            }
        }
    }
    out
}

async fn subscribe(base: &str, token: &str, since: Option<u64>) -> reqwest::Response {
    let q = since.map(|s| format!("?since={s}")).unwrap_or_default();
    let resp = Client::new()
        .get(format!("{base}/api/events{q}"))
        .bearer_auth(token)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    resp
}

#[tokio::test]
async fn event_stream_replays_from_since_and_orders_block_before_request() {
    let h = start(energy_api()).await;
    let mut api = Api::new(&h);
    let base = h.base_url();
    let live = subscribe(&base, "dso-token", None).await;

    let (st, _) = api
        .post("/api/requests", "dso-token", request_body(2 * HOUR))
        .await;
    assert_eq!(st, StatusCode::CREATED);
    // the market seal, possibly an anchoring seal, then the request
    let evs = read_events(live, 3, Duration::from_millis(500)).await;
    assert!(evs.len() >= 2, "{evs:?}");
    assert_eq!(evs[0]["kind"], "block");
    assert_eq!(evs[0]["payload"]["ledger"], "MKT");
    let last = evs.last().unwrap();
    assert_eq!(last["kind"], "request_updated");
    assert_eq!(last["payload"]["id"], "R0000");
    assert!(evs[..evs.len() - 1].iter().all(|e| e["kind"] == "block"));
    let seqs: Vec<u64> = evs.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, (1..=evs.len() as u64).collect::<Vec<_>>());

    api.post(
        "/api/requests/R0000/offers",
        "fm1-token",
        json!({"price_tokens": 35, "committed_wh": 40000}),
    )
    .await;
    let n = evs.len() + 2;
    let all = read_events(
        subscribe(&base, "dso-token", Some(0)).await,
        n,
        Duration::from_secs(5),
    )
    .await;
    let seqs: Vec<u64> = all.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, (1..=n as u64).collect::<Vec<_>>());
    assert_eq!(all[n - 2]["kind"], "block");
    assert_eq!(all[n - 1]["kind"], "request_updated");
    for e in &all {
        let keys: BTreeSet<&str> = e.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, BTreeSet::from(["seq", "kind", "payload"]));
    }

    let tail = read_events(
        subscribe(&base, "dso-token", Some(2)).await,
        n - 2,
        Duration::from_secs(5),
    )
    .await;
    assert_eq!(tail, all[2..]);

    // beyond the head: silent until the next event, which then arrives
    let ahead = subscribe(&base, "dso-token", Some(99)).await;
    let quiet = read_events(ahead, 1, Duration::from_millis(300)).await;
    assert!(quiet.is_empty());
    let ahead = subscribe(&base, "dso-token", Some(99)).await;
    api.post(
        "/api/requests/R0000/offers",
        "fm2-token",
        json!({"price_tokens": 30, "committed_wh": 40000}),
    )
    .await;
    let next = read_events(ahead, 1, Duration::from_secs(5)).await;
    assert_eq!(next[0]["seq"].as_u64(), Some(n as u64 + 1));

    // the auditor cannot read the market ledger, so its events are filtered
    let audit = read_events(
        subscribe(&base, "auditor-token", Some(0)).await,
        100,
        Duration::from_millis(300),
    )
    .await;
    assert!(!audit.is_empty());
    assert!(
        audit
            .iter()
            .all(|e| e["kind"] == "block" && e["payload"]["ledger"] == "PUB"),
        "{audit:?}"
    );
    let (st, _) = api.call(Method::GET, "/api/events", None, None).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    h.shutdown().await.unwrap();
}

fn percent_encode(s: &str) -> String {
    s.bytes()
        .map(|b| {
            if b.is_ascii_alphanumeric() || b == b'-' {
                (b as char).to_string()
            } else {
                format!("%{b:02X}")
            }
        })
        .collect()
}

#[tokio::test]
async fn trace_and_qr_after_scripted_run() {
    let s = scenario("foodchain.json");
    let mut s2 = s.clone();
    s2.tokens.insert(
        "op-token".into(),
        serde_json::from_value(json!({"actor": "op-SF", "role": "fleet_manager"})).unwrap(),
    );
    let last = s.script.iter().map(|st| st.at).max().unwrap();
    let h = start(s2).await;
    let mut api = Api::new(&h);
    let (st, _) = api
        .post("/api/sim/step", "auditor-token", json!({"ticks": 1}))
        .await;
    assert_eq!(st, StatusCode::FORBIDDEN);
    let ticks = last / s.delta_ms + 1;
    let (st, v) = api
        .post("/api/sim/step", "op-token", json!({"ticks": ticks}))
        .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["script_steps"].as_array().unwrap().len(), s.script.len());

    let (st, t) = api.get("/api/trace/LOT-001", "auditor-token").await;
    assert_eq!(st, StatusCode::OK, "{t}");
    assert_eq!(t["lot"], "LOT-001");
    assert_eq!(t["verdict"], "violations");
    let (_, ledgers) = api.get("/api/ledgers", "auditor-token").await;
    let tip = ledgers
        .as_array()
        .unwrap()
        .iter()
        .find(|l| l["id"] == "CONS")
        .unwrap()["tip"]
        .as_str()
        .unwrap()
        .to_string();
    let payload = format!("sofie://trace/LOT-001?tip={}", &tip[..16]);
    assert_eq!(t["qr"], payload.as_str());

    let (st, q) = api
        .get(
            &format!("/api/qr/{}", percent_encode(&payload)),
            "auditor-token",
        )
        .await;
    assert_eq!(st, StatusCode::OK, "{q}");
    assert_eq!(q["tip"]["status"], "current");
    assert_eq!(q["history_diverged"], false);
    let (st, _) = api
        .get(
            &format!("/api/qr/{}", percent_encode("sofie://trace/LOT-001")),
            "auditor-token",
        )
        .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let (st, _) = api.get("/api/trace/LOT-404", "auditor-token").await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let resp = Client::new()
        .get(format!("{}/api/trace/LOT-001?format=text", h.base_url()))
        .bearer_auth("auditor-token")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert!(resp.text().await.unwrap().starts_with("lot LOT-001"));
    let (st, _) = api.get("/api/requests", "auditor-token").await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    h.shutdown().await.unwrap();
}

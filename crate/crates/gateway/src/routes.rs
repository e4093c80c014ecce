use std::collections::VecDeque;
use std::convert::Infallible;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fedchain_core::energy::market as mkt;
use fedchain_core::energy::market::MarketDeployment;
use fedchain_core::energy::{match_candidates, RequestSpec};
use fedchain_core::foodchain::{generate_qr_payload, resolve_qr, trace_lot, TraceError};
use fedchain_core::harness::{ApiRole, StepError};
use fedchain_core::interledger::anchor::{checkpoints, verify_anchors, AnchorError};
use futures::stream::{self, Stream};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast;

use crate::error::ApiError;
use crate::state::{AppState, CallKind, Caller, Envelope, Inner};

type ApiResult<T = Json<Value>> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/ledgers", get(ledgers))
        .route("/api/ledgers/{id}/blocks", get(blocks))
        .route("/api/anchors", get(anchors))
        .route("/api/anchors/verify", post(verify))
        .route("/api/requests", get(list_requests).post(post_request))
        .route("/api/requests/{id}", get(get_request))
        .route("/api/requests/{id}/offers", post(post_offer))
        .route("/api/requests/{id}/close", post(close))
        .route(
            "/api/requests/{id}/candidates",
            get(candidates).post(propose),
        )
        .route("/api/requests/{id}/settle", post(settle))
        .route("/api/assignments/{id}/accept", post(accept))
        .route("/api/fleet/{ev}/register", post(register_ev))
        .route("/api/trace/{lot}", get(trace))
        .route("/api/qr/{*payload}", get(qr))
        .route("/api/sim/step", post(sim_step))
        .route("/api/sim/seal", post(sim_seal))
        .route("/api/events", get(events))
        .with_state(state)
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
}

fn caller(state: &AppState, headers: &HeaderMap) -> ApiResult<Caller> {
    let token = bearer(headers).ok_or_else(ApiError::unauthenticated)?;
    state.lock().caller(token)
}

fn require(c: &Caller, roles: &[ApiRole]) -> ApiResult<()> {
    if roles.contains(&c.role) {
        Ok(())
    } else {
        Err(ApiError::forbidden(
            "RoleForbidden",
            format!("{} may not do this as {:?}", c.actor, c.role),
        ))
    }
}

fn writer(c: &Caller) -> ApiResult<()> {
    require(c, &[ApiRole::Dso, ApiRole::FleetManager, ApiRole::EvUser])
}

/// Parses a JSON body; an empty body reads as `{}`.
fn body<T: DeserializeOwned>(bytes: &Bytes) -> ApiResult<T> {
    let raw: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) {
        b"{}"
    } else {
        bytes
    };
    serde_json::from_slice(raw).map_err(|e| ApiError::schema(e.to_string()))
}

fn to_json<T: serde::Serialize>(v: &T) -> Json<Value> {
    Json(serde_json::to_value(v).expect("serializable"))
}

fn market_err(e: mkt::MarketError) -> ApiError {
    StepError::from(e).into()
}

fn deployment(g: &Inner) -> ApiResult<MarketDeployment> {
    g.world
        .market
        .clone()
        .ok_or_else(|| ApiError::not_found("NoDeployment", "no market deployment"))
}

/// Deployment, after checking the caller may read the market ledger and the request exists.
fn market_request(g: &Inner, c: &Caller, id: &str) -> ApiResult<MarketDeployment> {
    let dep = deployment(g)?;
    g.check_read(c, &dep.market)?;
    mkt::request(&g.world.net, &dep, id).map_err(market_err)?;
    Ok(dep)
}

async fn ledgers(State(s): State<AppState>, h: HeaderMap) -> ApiResult {
    caller(&s, &h)?;
    let g = s.lock();
    let out: Vec<Value> = g
        .world
        .net
        .ledgers()
        .map(|l| {
            json!({
                "id": l.id(),
                "kind": l.kind(),
                "height": l.height(),
                "tip": l.tip_hash(),
                "restricted_read": l.config().restricted_read,
                "pending": l.pending().len(),
            })
        })
        .collect();
    Ok(Json(Value::Array(out)))
}

#[derive(Deserialize)]
struct FromQuery {
    from: Option<u64>,
}

async fn blocks(
    State(s): State<AppState>,
    h: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<FromQuery>,
) -> ApiResult {
    let c = caller(&s, &h)?;
    let g = s.lock();
    g.check_read(&c, &id)?;
    let l = g
        .world
        .net
        .ledger(&id)
        .map_err(|e| ApiError::not_found(e.code(), e.to_string()))?;
    let from = usize::try_from(q.from.unwrap_or(0))
        .unwrap_or(usize::MAX)
        .min(l.blocks().len());
    let out: Vec<Value> = l.blocks()[from..]
        .iter()
        .map(|b| {
            let mut v = serde_json::to_value(b).expect("block serializes");
            v["hash"] = json!(b.hash());
            v
        })
        .collect();
    Ok(Json(Value::Array(out)))
}

async fn anchors(State(s): State<AppState>, h: HeaderMap) -> ApiResult {
    caller(&s, &h)?;
    let g = s.lock();
    let mut out = Vec::new();
    for a in &g.world.scenario.anchoring {
        let Ok(public) = g.world.net.ledger(&a.public) else {
            continue;
        };
        out.push(json!({
            "source": a.source,
            "public": a.public,
            "every_k": a.every_k,
            "checkpoints": checkpoints(public, &a.source),
        }));
    }
    Ok(Json(Value::Array(out)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyBody {
    source: String,
    #[serde(default)]
    public: Option<String>,
}

async fn verify(State(s): State<AppState>, h: HeaderMap, b: Bytes) -> ApiResult {
    caller(&s, &h)?;
    let req: VerifyBody = body(&b)?;
    let g = s.lock();
    let public = match req.public {
        Some(p) => p,
        None => g
            .world
            .scenario
            .anchoring
            .iter()
            .find(|a| a.source == req.source)
            .map(|a| a.public.clone())
            .ok_or_else(|| {
                ApiError::not_found("UnknownLedger", format!("{} is not anchored", req.source))
            })?,
    };
    match verify_anchors(&g.world.net, &req.source, &public) {
        Ok(r) => Ok(to_json(&r)),
        Err(AnchorError::Ledger(e)) => Err(ApiError::not_found(e.code(), e.to_string())),
        Err(e) => Err(ApiError::conflict("AnchorError", e.to_string())),
    }
}

async fn list_requests(State(s): State<AppState>, h: HeaderMap) -> ApiResult {
    let c = caller(&s, &h)?;
    let g = s.lock();
    let dep = deployment(&g)?;
    g.check_read(&c, &dep.market)?;
    Ok(Json(Value::Array(
        g.request_snapshot().into_values().collect(),
    )))
}

async fn get_request(State(s): State<AppState>, h: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let c = caller(&s, &h)?;
    let g = s.lock();
    let dep = market_request(&g, &c, &id)?;
    Ok(to_json(
        mkt::request(&g.world.net, &dep, &id).map_err(market_err)?,
    ))
}

async fn post_request(
    State(s): State<AppState>,
    h: HeaderMap,
    b: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let c = caller(&s, &h)?;
    s.mutate(CallKind::Api, "POST /api/requests", &c, |g| {
        require(&c, &[ApiRole::Dso])?;
        let spec: RequestSpec = body(&b)?;
        let dep = deployment(g)?;
        let id = mkt::post_request(&mut g.world.net, &g.world.keys, &dep, &c.actor, &spec)
            .map_err(market_err)?;
        let r = mkt::request(&g.world.net, &dep, &id).map_err(market_err)?;
        Ok((StatusCode::CREATED, to_json(r)))
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OfferBody {
    price_tokens: u64,
    committed_wh: u64,
}

async fn post_offer(
    State(s): State<AppState>,
    h: HeaderMap,
    Path(id): Path<String>,
    b: Bytes,
) -> ApiResult {
    let c = caller(&s, &h)?;
    s.mutate(CallKind::Api, "POST /api/requests/{id}/offers", &c, |g| {
        require(&c, &[ApiRole::FleetManager])?;
        let o: OfferBody = body(&b)?;
        let dep = market_request(g, &c, &id)?;
        let index = mkt::post_offer(
            &mut g.world.net,
            &g.world.keys,
            &dep,
            &c.actor,
            &id,
            o.price_tokens,
            o.committed_wh,
        )
        .map_err(market_err)?;
        Ok(Json(json!({ "request": id, "offer": index })))
    })
}

async fn close(State(s): State<AppState>, h: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let c = caller(&s, &h)?;
    s.mutate(CallKind::Api, "POST /api/requests/{id}/close", &c, |g| {
        require(&c, &[ApiRole::Dso])?;
        let dep = market_request(g, &c, &id)?;
        let winner = mkt::close_auction(&mut g.world.net, &g.world.keys, &dep, &c.actor, &id)
            .map_err(market_err)?;
        let r = mkt::request(&g.world.net, &dep, &id).map_err(market_err)?;
        Ok(Json(
            json!({ "request": id, "status": r.status, "winner": winner }),
        ))
    })
}

/// The published candidate list, or a preview from the winner's fleet before publication.
async fn candidates(State(s): State<AppState>, h: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let c = caller(&s, &h)?;
    let g = s.lock();
    let dep = market_request(&g, &c, &id)?;
    let m = &g
        .world
        .net
        .ledger(&dep.market)
        .map_err(|e| ApiError::not_found(e.code(), e.to_string()))?
        .state()
        .market;
    let r = &m.requests[&id];
    let zone = mkt::request_zone(r);
    let published = !r.candidates.is_empty();
    let owned = |ev: &str| match (&r.winner, m.evs.get(ev)) {
        (Some(w), Some(x)) => x.fleet_manager == w.fleet_manager,
        _ => false,
    };
    let fleet: Vec<_> = g
        .world
        .fleet
        .iter()
        .filter(|e| owned(&e.ev))
        .cloned()
        .collect();
    let ranked = match_candidates(zone, &fleet);
    let list: Vec<Value> = if published {
        r.candidates
            .iter()
            .map(|ev| {
                let d = ranked.iter().find(|x| &x.ev == ev).map(|x| x.distance_m);
                json!({ "ev": ev, "distance_m": d })
            })
            .collect()
    } else {
        ranked
            .iter()
            .map(|x| json!({ "ev": x.ev, "distance_m": x.distance_m }))
            .collect()
    };
    Ok(Json(
        json!({ "request": id, "published": published, "candidates": list }),
    ))
}

async fn propose(State(s): State<AppState>, h: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let c = caller(&s, &h)?;
    s.mutate(
        CallKind::Api,
        "POST /api/requests/{id}/candidates",
        &c,
        |g| {
            require(&c, &[ApiRole::FleetManager])?;
            let dep = market_request(g, &c, &id)?;
            let fleet = g.world.fleet.clone();
            let ranked = mkt::propose_candidates(
                &mut g.world.net,
                &g.world.keys,
                &dep,
                &c.actor,
                &id,
                &fleet,
            )
            .map_err(market_err)?;
            Ok(Json(
                json!({ "request": id, "published": true, "candidates": ranked }),
            ))
        },
    )
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AcceptBody {
    ev: String,
    station: String,
}

async fn accept(
    State(s): State<AppState>,
    h: HeaderMap,
    Path(id): Path<String>,
    b: Bytes,
) -> ApiResult {
    let c = caller(&s, &h)?;
    s.mutate(
        CallKind::Api,
        "POST /api/assignments/{id}/accept",
        &c,
        |g| {
            require(&c, &[ApiRole::EvUser])?;
            let a: AcceptBody = body(&b)?;
            let dep = market_request(g, &c, &id)?;
            mkt::accept_assignment(
                &mut g.world.net,
                &g.world.keys,
                &dep,
                &c.actor,
                &id,
                &a.ev,
                &a.station,
            )
            .map_err(market_err)?;
            let r = mkt::request(&g.world.net, &dep, &id).map_err(market_err)?;
            Ok(Json(
                json!({ "request": id, "status": r.status, "assignment": r.assignment }),
            ))
        },
    )
}

async fn settle(State(s): State<AppState>, h: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let c = caller(&s, &h)?;
    s.mutate(CallKind::Api, "POST /api/requests/{id}/settle", &c, |g| {
        require(&c, &[ApiRole::Dso])?;
        let dep = market_request(g, &c, &id)?;
        let outcome = mkt::settle_request(&mut g.world.net, &g.world.keys, &dep, &c.actor, &id)
            .map_err(market_err)?;
        let r = mkt::request(&g.world.net, &dep, &id).map_err(market_err)?;
        Ok(Json(
            json!({ "request": id, "outcome": outcome, "settlement": r.settlement }),
        ))
    })
}

async fn register_ev(State(s): State<AppState>, h: HeaderMap, Path(ev): Path<String>) -> ApiResult {
    let c = caller(&s, &h)?;
    s.mutate(CallKind::Api, "POST /api/fleet/{ev}/register", &c, |g| {
        require(&c, &[ApiRole::FleetManager])?;
        let dep = deployment(g)?;
        let spec = g
            .world
            .scenario
            .market
            .as_ref()
            .and_then(|m| m.fleet.iter().find(|e| e.ev == ev))
            .cloned()
            .ok_or_else(|| ApiError::not_found("UnknownEv", ev.clone()))?;
        if spec.fleet_manager != c.actor {
            return Err(ApiError::forbidden(
                "Unauthorized",
                format!("{ev} belongs to {}", spec.fleet_manager),
            ));
        }
        let owner = g
            .world
            .keys
            .address_of(&spec.owner)
            .ok_or_else(|| ApiError::not_found("UnknownActor", spec.owner.clone()))?;
        mkt::register_ev(&mut g.world.net, &g.world.keys, &dep, &c.actor, &ev, owner)
            .map_err(market_err)?;
        Ok(Json(
            json!({ "ev": ev, "fleet_manager": c.actor, "owner": spec.owner }),
        ))
    })
}

fn trace_err(e: TraceError) -> ApiError {
    match e {
        TraceError::LotNotFound(l) => {
            ApiError::not_found("LotNotFound", format!("unknown lot {l}"))
        }
        TraceError::BadPayload(p) => ApiError::schema(format!("malformed QR payload: {p}")),
        TraceError::Ledger(l) => ApiError::not_found(l.code(), l.to_string()),
    }
}

#[derive(Deserialize)]
struct FormatQuery {
    format: Option<String>,
}

async fn trace(
    State(s): State<AppState>,
    h: HeaderMap,
    Path(lot): Path<String>,
    Query(q): Query<FormatQuery>,
) -> ApiResult<Response> {
    caller(&s, &h)?;
    let g = s.lock();
    let cfg = g
        .world
        .food
        .as_ref()
        .ok_or_else(|| ApiError::not_found("NoDeployment", "no foodchain deployment"))?;
    let report = trace_lot(&g.world.net, &g.world.keys, cfg, &lot, &g.world.conditions)
        .map_err(trace_err)?;
    match q.format.as_deref() {
        None | Some("json") => {
            let mut v = serde_json::to_value(&report).expect("report serializes");
            v["qr"] = json!(generate_qr_payload(&g.world.net, cfg, &lot).map_err(trace_err)?);
            Ok(Json(v).into_response())
        }
        Some("text") => Ok((
            [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
            report.to_text(),
        )
            .into_response()),
        Some(f) => Err(ApiError::schema(format!("unknown format {f}"))),
    }
}

async fn qr(State(s): State<AppState>, h: HeaderMap, Path(payload): Path<String>) -> ApiResult {
    caller(&s, &h)?;
    let g = s.lock();
    let cfg = g
        .world
        .food
        .as_ref()
        .ok_or_else(|| ApiError::not_found("NoDeployment", "no foodchain deployment"))?;
    let r = resolve_qr(
        &g.world.net,
        &g.world.keys,
        cfg,
        &payload,
        &g.world.conditions,
    )
    .map_err(trace_err)?;
    Ok(to_json(&r))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StepBody {
    ticks: u64,
}

async fn sim_step(State(s): State<AppState>, h: HeaderMap, b: Bytes) -> ApiResult {
    let c = caller(&s, &h)?;
    s.mutate(CallKind::Sim, "POST /api/sim/step", &c, |g| {
        writer(&c)?;
        let req: StepBody = body(&b)?;
        let ran = g.tick(req.ticks);
        Ok(Json(
            json!({ "now": g.world.net.now(), "script_steps": ran }),
        ))
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SealBody {
    ledger: String,
}

async fn sim_seal(State(s): State<AppState>, h: HeaderMap, b: Bytes) -> ApiResult {
    let c = caller(&s, &h)?;
    s.mutate(CallKind::Sim, "POST /api/sim/seal", &c, |g| {
        writer(&c)?;
        let req: SealBody = body(&b)?;
        let blk = g
            .world
            .net
            .seal(&req.ledger)
            .map_err(|e| ApiError::not_found(e.code(), e.to_string()))?;
        Ok(Json(
            json!({ "ledger": req.ledger, "height": blk.height, "txs": blk.transactions.len() }),
        ))
    })
}

#[derive(Deserialize)]
struct EventsQuery {
    since: Option<u64>,
    token: Option<String>,
}

struct Feed {
    state: AppState,
    rx: broadcast::Receiver<Envelope>,
    last: u64,
    queue: VecDeque<Envelope>,
    caller: Caller,
}

impl Feed {
    fn visible(&self, e: &Envelope) -> bool {
        e.ledger
            .as_deref()
            .is_none_or(|l| self.state.lock().can_read(&self.caller.address, l))
    }

    async fn next(mut self) -> Option<(Result<Event, Infallible>, Self)> {
        loop {
            while let Some(e) = self.queue.pop_front() {
                if e.seq <= self.last {
                    continue;
                }
                self.last = e.seq;
                if self.visible(&e) {
                    let ev = Event::default()
                        .id(e.seq.to_string())
                        .event(e.kind.clone())
                        .json_data(&e)
                        .expect("envelope serializes");
                    return Some((Ok(ev), self));
                }
            }
            match self.rx.recv().await {
                Ok(e) => self.queue.push_back(e),
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    let missed = self.state.lock().events_after(self.last);
                    self.queue.extend(missed);
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    }
}

/// Replays events after `since`, then streams new ones. A `since` at or past
/// the head yields nothing until the next event.
async fn events(
    State(s): State<AppState>,
    h: HeaderMap,
    Query(q): Query<EventsQuery>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let token = bearer(&h)
        .map(str::to_string)
        .or(q.token)
        .ok_or_else(ApiError::unauthenticated)?;
    let (caller, backlog, head, rx) = {
        let g = s.lock();
        let caller = g.caller(&token)?;
        let since = q.since.unwrap_or(0);
        (
            caller,
            g.events_after(since),
            since.min(g.head()),
            s.subscribe(),
        )
    };
    let last = head;
    let feed = Feed {
        state: s,
        rx,
        last,
        queue: backlog.into(),
        caller,
    };
    Ok(Sse::new(stream::unfold(feed, Feed::next)).keep_alive(KeepAlive::default()))
}

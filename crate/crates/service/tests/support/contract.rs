//! Endpoint contract checks shared by the service tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use axum::http::{Method, StatusCode};
use serde_json::Value;

use super::fixture::{call, json, Fixture, N_STOCKS, START_VISIBLE};

const RECORD_FIELDS: [&str; 7] = ["symbol", "predicted_return", "rank", "models", "ensemble", "as_of", "target_date"];

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().map(|o| o.keys().cloned().collect()).unwrap_or_default()
}

fn expect(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Checks one PredictionRecord's shape and returns the worst
/// |ensemble - mean(models)|.
fn check_record(r: &Value) -> Result<f64, String> {
    expect(keys(r) == RECORD_FIELDS.iter().map(|s| s.to_string()).collect(), || format!("record fields {:?}", keys(r)))?;
    let m = &r["models"];
    expect(keys(m) == ["gbt", "lstm", "transformer"].iter().map(|s| s.to_string()).collect(), || {
        format!("model fields {:?}", keys(m))
    })?;
    let vals: Vec<f64> = ["transformer", "lstm", "gbt"].iter().map(|k| m[k].as_f64().unwrap()).collect();
    let e = r["ensemble"].as_f64().ok_or("ensemble is not a number")?;
    expect(r["predicted_return"].as_f64() == Some(e), || "predicted_return differs from ensemble".into())?;
    Ok((e - vals.iter().sum::<f64>() / 3.0).abs())
}

/// Every record in a full rank response (k = n/2) is well formed, ranks are
/// 1..=n in descending ensemble order with symbol tie-breaks, and all share
/// one as_of/target_date. Returns (as_of, worst ensemble error).
pub fn check_full_ranking(body: &Value) -> Result<(String, f64), String> {
    let records: Vec<&Value> =
        body["top"].as_array().ok_or("no top")?.iter().chain(body["bottom"].as_array().ok_or("no bottom")?).collect();
    let as_of = records.first().ok_or("empty ranking")?["as_of"].as_str().unwrap().to_string();
    let target = body["target_date"].as_str().ok_or("no target_date")?;
    let mut worst = 0.0f64;
    for (i, r) in records.iter().enumerate() {
        worst = worst.max(check_record(r)?);
        expect(r["rank"].as_u64() == Some(i as u64 + 1), || format!("rank {} at position {i}", r["rank"]))?;
        expect(r["as_of"] == as_of.as_str() && r["target_date"] == target, || "mixed as_of/target_date".into())?;
    }
    for w in records.windows(2) {
        let (a, b) = (w[0]["ensemble"].as_f64().unwrap(), w[1]["ensemble"].as_f64().unwrap());
        let ordered = a > b || (a == b && w[0]["symbol"].as_str() < w[1]["symbol"].as_str());
        expect(ordered, || format!("{} before {}", w[0]["symbol"], w[1]["symbol"]))?;
    }
    Ok((as_of, worst))
}

/// Round-trips all four endpoints on a fresh fixture and returns the worst
/// ensemble-versus-mean error seen.
pub async fn round_trip(f: &Fixture) -> Result<f64, String> {
    let r = &f.router;
    let (s, body) = json(r, Method::GET, "/api/v1/rank?k=5").await;
    expect(s == StatusCode::CONFLICT && body["error"] == "refresh required", || format!("before refresh: {s} {body}"))?;

    let (s, body) = json(r, Method::POST, "/api/v1/refresh").await;
    expect(s == StatusCode::OK, || format!("refresh: {s} {body}"))?;
    expect(keys(&body) == ["as_of", "failed", "updated"].iter().map(|s| s.to_string()).collect(), || {
        format!("refresh fields {body}")
    })?;
    expect(body["updated"] == N_STOCKS && body["failed"].as_array().is_some_and(Vec::is_empty), || format!("{body}"))?;
    let as_of = f.source.date(START_VISIBLE - 1).to_string();
    expect(body["as_of"] == as_of.as_str(), || format!("as_of {}", body["as_of"]))?;

    let (s, full) = json(r, Method::GET, &format!("/api/v1/rank?k={}", N_STOCKS / 2)).await;
    expect(s == StatusCode::OK, || format!("rank: {s} {full}"))?;
    let typed: i2e_service::RankResponse = serde_json::from_value(full.clone()).map_err(|e| e.to_string())?;
    expect(serde_json::to_value(&typed).unwrap() == full, || "rank JSON does not round-trip".into())?;
    let (rank_as_of, worst) = check_full_ranking(&full)?;
    expect(rank_as_of == as_of, || format!("rank as_of {rank_as_of}"))?;

    // Top/bottom 5 against an independent sort of all records.
    let mut all: Vec<(f64, String)> = full["top"]
        .as_array()
        .unwrap()
        .iter()
        .chain(full["bottom"].as_array().unwrap())
        .map(|v| (v["ensemble"].as_f64().unwrap(), v["symbol"].as_str().unwrap().to_string()))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let (s, five) = json(r, Method::GET, "/api/v1/rank?k=5").await;
    expect(s == StatusCode::OK, || format!("rank k=5: {s}"))?;
    let syms = |v: &Value| v.as_array().unwrap().iter().map(|x| x["symbol"].as_str().unwrap().to_string()).collect::<Vec<_>>();
    let want_top: Vec<String> = all[..5].iter().map(|x| x.1.clone()).collect();
    let want_bottom: Vec<String> = all[all.len() - 5..].iter().map(|x| x.1.clone()).collect();
    expect(syms(&five["top"]) == want_top && syms(&five["bottom"]) == want_bottom, || {
        format!("k=5 selection {:?}/{:?}", syms(&five["top"]), syms(&five["bottom"]))
    })?;

    let sym = &want_top[0];
    let (s, t) = json(r, Method::GET, &format!("/api/v1/tickers/{sym}")).await;
    expect(s == StatusCode::OK && keys(&t) == ["bars", "indicators"].iter().map(|s| s.to_string()).collect(), || {
        format!("ticker: {s}")
    })?;
    let typed: i2e_service::TickerResponse = serde_json::from_value(t.clone()).map_err(|e| e.to_string())?;
    expect(serde_json::to_value(&typed).unwrap() == t, || "ticker JSON does not round-trip".into())?;
    expect(typed.bars.len() == START_VISIBLE && !typed.indicators.is_empty(), || {
        format!("{} bars, {} rows", typed.bars.len(), typed.indicators.len())
    })?;

    let (s, h) = json(r, Method::GET, "/api/v1/health").await;
    expect(s == StatusCode::OK && h["status"] == "ok" && h["data_as_of"] == as_of.as_str(), || format!("health {h}"))?;
    let typed: i2e_service::HealthResponse = serde_json::from_value(h.clone()).map_err(|e| e.to_string())?;
    expect(serde_json::to_value(&typed).unwrap() == h, || "health JSON does not round-trip".into())?;
    expect(typed.model_digests.len() == 4 && typed.model_digests.values().all(|d| d.len() == 64), || {
        format!("digests {:?}", typed.model_digests)
    })?;
    Ok(worst)
}

/// Readers hammer the rank, ticker and health endpoints while `rounds`
/// refreshes each reveal one more day. Every response must describe exactly
/// one snapshot, and a reader never sees data go backwards.
pub async fn no_torn_reads(f: &Fixture, rounds: usize, readers: usize) -> Result<usize, String> {
    let (s, _) = call(&f.router, Method::POST, "/api/v1/refresh").await;
    expect(s == StatusCode::OK, || "initial refresh failed".into())?;
    let done = std::sync::Arc::new(std::sync::atomic::AtomicBool::new(false));
    let mut handles = Vec::new();
    for _ in 0..readers {
        let router = f.router.clone();
        let done = done.clone();
        handles.push(tokio::spawn(async move {
            let mut last = String::new();
            let mut reads = 0usize;
            while !done.load(std::sync::atomic::Ordering::SeqCst) || reads == 0 {
                let (s, body) = json(&router, Method::GET, &format!("/api/v1/rank?k={}", N_STOCKS / 2)).await;
                if s != StatusCode::OK {
                    return Err(format!("rank during refresh: {s} {body}"));
                }
                let (as_of, worst) = check_full_ranking(&body)?;
                if worst > 1e-9 {
                    return Err(format!("ensemble error {worst}"));
                }
                if as_of < last {
                    return Err(format!("as_of went back from {last} to {as_of}"));
                }
                let (s, t) = json(&router, Method::GET, "/api/v1/tickers/S000").await;
                let bars = t["bars"].as_array().map_or(0, Vec::len);
                let rows = t["indicators"].as_array().map_or(0, Vec::len);
                if s != StatusCode::OK || bars == 0 || rows == 0 {
                    return Err(format!("ticker during refresh: {s}"));
                }
                let last_bar = t["bars"][bars - 1]["date"].as_str().unwrap().to_string();
                let last_row = t["indicators"][rows - 1]["date"].as_str().unwrap().to_string();
                if last_bar != last_row || last_bar < as_of {
                    return Err(format!("ticker bars end {last_bar}, rows end {last_row}, rank as_of {as_of}"));
                }
                last = as_of;
                reads += 1;
                tokio::task::yield_now().await;
            }
            Ok(reads)
        }));
    }
    for i in 0..rounds {
        f.source.reveal_all(f.source.date(START_VISIBLE + i));
        let (s, body) = json(&f.router, Method::POST, "/api/v1/refresh").await;
        expect(s == StatusCode::OK && body["updated"] == N_STOCKS, || format!("refresh {i}: {s} {body}"))?;
    }
    done.store(true, std::sync::atomic::Ordering::SeqCst);
    let mut total = 0;
    for h in handles {
        total += h.await.map_err(|e| e.to_string())??;
    }
    Ok(total)
}

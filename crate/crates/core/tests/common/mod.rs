//! Shared fixtures: a small trained model and a test-only HTTP server that
//! exposes it over the scoring protocol.

#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use memaudit_core::canary::{synthetic_background, BackgroundSpec};
use memaudit_core::ground_truth::Corpus;
use memaudit_core::lm::LanguageModel;
use memaudit_core::reference::{train, NgramModel, TrainingConfig};
use memaudit_core::remote::{
    ErrorResponse, ModelInfo, ModelsResponse, ScoreRequest, ScoreResponse, TopKRequest, TopKResponse, WireToken,
};

pub fn small_corpus() -> Corpus {
    synthetic_background(
        &BackgroundSpec {
            documents: 40,
            ..Default::default()
        },
        3,
    )
    .unwrap()
}

pub fn small_model(order: usize) -> NgramModel {
    train(&TrainingConfig::new(order, format!("order{order}")), &small_corpus()).unwrap()
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Replies with 200 and a body that is not the expected JSON.
    Malformed,
    /// Replies with candidates in ascending order.
    Unsorted,
}

pub struct TestServer {
    pub url: String,
    pub requests: Arc<AtomicUsize>,
    server: Arc<tiny_http::Server>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn reply(req: tiny_http::Request, status: u16, body: String) {
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
    let _ = req.respond(tiny_http::Response::from_string(body).with_status_code(status).with_header(header));
}

fn error(req: tiny_http::Request, status: u16, msg: &str) {
    let body = serde_json::to_string(&ErrorResponse { error: msg.into() }).unwrap();
    reply(req, status, body);
}

/// Serves `model` until dropped. With `token` set, requests must carry
/// `Authorization: Bearer <token>`.
pub fn serve(model: Arc<NgramModel>, token: Option<&str>, fault: Fault) -> TestServer {
    let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let requests = Arc::new(AtomicUsize::new(0));
    let (srv, count) = (server.clone(), requests.clone());
    let token = token.map(|t| format!("Bearer {t}"));
    let handle = thread::spawn(move || {
        for mut req in srv.incoming_requests() {
            count.fetch_add(1, Ordering::SeqCst);
            if let Some(t) = &token {
                let ok = req
                    .headers()
                    .iter()
                    .any(|h| h.field.equiv("Authorization") && h.value.as_str() == t);
                if !ok {
                    error(req, 401, "missing or bad token");
                    continue;
                }
            }
            if fault == Fault::Malformed {
                reply(req, 200, "{\"unexpected\": true}".into());
                continue;
            }
            let mut body = String::new();
            let _ = req.as_reader().read_to_string(&mut body);
            match (req.method().as_str(), req.url()) {
                ("GET", "/v1/models") => {
                    let r = ModelsResponse {
                        models: vec![ModelInfo {
                            id: model.model_id().into(),
                            vocab_size: model.vocab().size(),
                        }],
                    };
                    reply(req, 200, serde_json::to_string(&r).unwrap());
                }
                ("POST", "/v1/score") => {
                    let Ok(q) = serde_json::from_str::<ScoreRequest>(&body) else {
                        error(req, 400, "bad request body");
                        continue;
                    };
                    if q.model != model.model_id() {
                        error(req, 404, "unknown model");
                        continue;
                    }
                    match model.score_text(&q.text) {
                        Ok((toks, score)) => {
                            let tokens = toks
                                .iter()
                                .zip(score.token_logprobs())
                                .map(|(t, lp)| WireToken {
                                    text: t.text.to_string(),
                                    logprob: *lp,
                                })
                                .collect();
                            reply(req, 200, serde_json::to_string(&ScoreResponse { tokens }).unwrap());
                        }
                        Err(e) => error(req, 422, &e.to_string()),
                    }
                }
                ("POST", "/v1/topk") => {
                    let Ok(q) = serde_json::from_str::<TopKRequest>(&body) else {
                        error(req, 400, "bad request body");
                        continue;
                    };
                    match model.top_k_text(&q.prefix_text, q.k) {
                        Ok(d) => {
                            let mut candidates: Vec<WireToken> = d
                                .candidates
                                .iter()
                                .map(|c| WireToken {
                                    text: c.token.text.to_string(),
                                    logprob: c.logprob,
                                })
                                .collect();
                            if fault == Fault::Unsorted {
                                candidates.reverse();
                            }
                            reply(req, 200, serde_json::to_string(&TopKResponse { candidates }).unwrap());
                        }
                        Err(e) => error(req, 422, &e.to_string()),
                    }
                }
                _ => error(req, 404, "no such route"),
            }
        }
    });
    TestServer {
        url,
        requests,
        server,
        handle: Some(handle),
    }
}

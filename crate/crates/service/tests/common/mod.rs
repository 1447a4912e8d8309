#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use wbal_service::{router, AppState, ServiceConfig};

pub struct Client {
    app: Router,
}

pub struct Reply {
    pub status: StatusCode,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|_| panic!("not JSON: {}", self.text()))
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.bytes).into_owned()
    }
}

impl Client {
    pub fn new() -> Self {
        Self::with_config(ServiceConfig::default())
    }

    pub fn with_config(config: ServiceConfig) -> Self {
        Client {
            app: router(AppState::new(config)),
        }
    }

    pub async fn raw(&self, method: Method, uri: &str, content_type: &str, body: Vec<u8>) -> Reply {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", content_type)
            .body(Body::from(body))
            .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        Reply { status, bytes }
    }

    pub async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> Reply {
        let bytes = body.map(|b| serde_json::to_vec(&b).unwrap()).unwrap_or_default();
        self.raw(method, uri, "application/json", bytes).await
    }

    pub async fn new_session(&self) -> String {
        let r = self.call(Method::POST, "/v1/sessions", None).await;
        assert_eq!(r.status, StatusCode::CREATED);
        r.json()["id"].as_str().unwrap().to_string()
    }

    /// Polls until the sensitivity job leaves the running state.
    pub async fn wait_sensitivity(&self, id: &str) -> Value {
        loop {
            let r = self.call(Method::GET, &format!("/v1/sessions/{id}/sensitivity"), None).await;
            assert_eq!(r.status, StatusCode::OK, "{}", r.text());
            let v = r.json();
            if v["status"] != "running" {
                return v;
            }
            tokio::time::sleep(std::time::Duration::from_millis(20)).await;
        }
    }
}

pub fn example_spec() -> Value {
    json!({
        "treatment": "treat",
        "control_label": "0",
        "treatment_label": "1",
        "outcome": "ada_6",
        "numeric_confounders": ["tss_0", "sfs8p_0", "eps7p_0", "ias5p_0", "dss9_0", "satl_0",
                                "sp_sm_0", "gvs", "ers21_0", "ada_0", "recov_0"],
        "categorical_confounders": [
            {"name": "mhtrt_0_categorical", "reference": "0"},
            {"name": "subsgrps_n_categorical", "reference": "1"}
        ],
        "estimand": "ATT"
    })
}

pub fn fast_weights() -> Value {
    json!({ "engine": { "gbm": { "max_trees": 150, "eval_stride": 25 } } })
}

/// Loads example data, sets the spec and computes weights.
pub async fn weighted_session(c: &Client, seed: u64, n_per_group: usize) -> String {
    let id = c.new_session().await;
    let r = c
        .call(
            Method::POST,
            &format!("/v1/sessions/{id}/data/example"),
            Some(json!({ "seed": seed, "n_per_group": n_per_group })),
        )
        .await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    let r = c.call(Method::PUT, &format!("/v1/sessions/{id}/spec"), Some(example_spec())).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    let r = c.call(Method::POST, &format!("/v1/sessions/{id}/weights"), Some(fast_weights())).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    id
}

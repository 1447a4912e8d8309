mod common;

use axum::http::{Method, StatusCode};
use serde_json::json;
use wbal_core::report::fixed;
use wbal_service::ServiceConfig;

use common::{example_spec, fast_weights, weighted_session, Client};

#[tokio::test]
async fn happy_path_produces_report_and_exports() {
    let c = Client::new();
    let id = c.new_session().await;
    let base = format!("/v1/sessions/{id}");

    let r = c
        .call(Method::POST, &format!("{base}/data/example"), Some(json!({"seed": 4, "n_per_group": 150, "rows": 5})))
        .await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["n_rows"], 300);
    assert_eq!(v["head"].as_array().unwrap().len(), 5);
    assert_eq!(v["stage"], "DATA_LOADED");

    let r = c.call(Method::PUT, &format!("{base}/spec"), Some(example_spec())).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    let v = r.json();
    assert!(v["treatment_formula"].as_str().unwrap().starts_with("treat ~ tss_0 + "));
    assert!(v["outcome_formula"].as_str().unwrap().starts_with("ada_6 ~ (Intercept) + treat + "));

    let r = c.call(Method::GET, &format!("{base}/overlap?grid_size=64"), None).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["densities"].as_array().unwrap().len(), 2 * 15);

    let r = c
        .call(
            Method::PUT,
            &format!("{base}/trims"),
            Some(json!({"rules": [{"confounder": "satl_0", "upper_cut": 90.0}]})),
        )
        .await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    let v = r.json();
    assert_eq!(v["stage"], "TRIMMED");
    let removed = v["removed_by_trim"].as_u64().unwrap();
    assert_eq!(v["n_analysed"].as_u64().unwrap() + removed, 300);

    let r = c.call(Method::POST, &format!("{base}/weights"), Some(fast_weights())).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    assert_eq!(r.json()["computed"].as_array().unwrap().len(), 9);

    let r = c.call(Method::GET, &format!("{base}/balance"), None).await;
    let balance = r.json();
    assert_eq!(balance["columns"][0], "Unweighted");
    assert_eq!(balance["columns"].as_array().unwrap().len(), 10);

    let r = c.call(Method::POST, &format!("{base}/estimate"), Some(json!({"algorithm": "auto"}))).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    let effect = r.json();
    assert_eq!(effect["algorithm_used"], balance["recommended"]);
    let value = effect["effect"].as_f64().unwrap();

    let r = c.call(Method::GET, &format!("{base}/report"), None).await;
    assert_eq!(r.status, StatusCode::OK);
    let html = r.text();
    for heading in [
        "Absolute standardized mean differences",
        "Kolmogorov-Smirnov statistics",
        "Effective sample size",
        "<th>Term</th>",
    ] {
        assert!(html.contains(heading), "report lacks {heading}");
    }
    assert!(html.contains(&format!("Estimated treatment effect (ATT): {}", fixed(value, 3))));
    assert!(!html.contains("<svg"));
    let again = c.call(Method::GET, &format!("{base}/report"), None).await;
    assert_eq!(again.bytes, r.bytes);

    let csv = c.call(Method::GET, &format!("{base}/export?format=csv"), None).await.text();
    let tsv = c.call(Method::GET, &format!("{base}/export?format=tsv"), None).await.text();
    assert!(csv.lines().next().unwrap().ends_with(",EB3"));
    assert!(tsv.lines().next().unwrap().ends_with("\tEB3"));
    assert_eq!(csv.lines().count() as u64, 301 - removed);
    let bad = c.call(Method::GET, &format!("{base}/export?format=xlsx"), None).await;
    assert_eq!(bad.status, StatusCode::UNPROCESSABLE_ENTITY);

    let r = c
        .call(
            Method::POST,
            &format!("{base}/sensitivity"),
            Some(json!({"grid": {"es_min": -0.2, "es_max": 0.2, "es_points": 3,
                                 "rho_min": 0.0, "rho_max": 0.2, "rho_points": 2},
                        "draws": 4, "seed": 9})),
        )
        .await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.text());
    let done = c.wait_sensitivity(&id).await;
    assert_eq!(done["status"], "done", "{done}");
    assert_eq!(done["grid"]["effect_surface"].as_array().unwrap().len(), 6);
    let status = c.call(Method::GET, &base, None).await.json();
    assert_eq!(status["stage"], "SENSITIVITY_DONE");
    let html = c.call(Method::GET, &format!("{base}/report"), None).await.text();
    assert!(html.contains("<svg"));
}

#[tokio::test]
async fn steps_out_of_order_name_the_required_stage() {
    let c = Client::new();
    let id = c.new_session().await;
    let r = c.call(Method::POST, &format!("/v1/sessions/{id}/estimate"), Some(json!({}))).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.json()["required_stage"], "WEIGHTED");

    let r = c.call(Method::GET, &format!("/v1/sessions/{id}/balance"), None).await;
    assert_eq!(r.json()["required_stage"], "WEIGHTED");
    let r = c.call(Method::GET, &format!("/v1/sessions/{id}/report"), None).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.json()["required_stage"], "ESTIMATED");
    let r = c.call(Method::PUT, &format!("/v1/sessions/{id}/spec"), Some(example_spec())).await;
    assert_eq!(r.json()["required_stage"], "DATA_LOADED");

    let r = c.call(Method::GET, "/v1/sessions/nope", None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn invalid_spec_lists_field_errors() {
    let c = Client::new();
    let id = c.new_session().await;
    c.call(Method::POST, &format!("/v1/sessions/{id}/data/example"), Some(json!({"n_per_group": 60}))).await;

    let mut spec = example_spec();
    spec.as_object_mut().unwrap().remove("outcome");
    let r = c.call(Method::PUT, &format!("/v1/sessions/{id}/spec"), Some(spec)).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(r.json()["message"].as_str().unwrap().contains("outcome"), "{}", r.text());

    let mut spec = example_spec();
    spec["outcome"] = json!("nonexistent");
    let r = c.call(Method::PUT, &format!("/v1/sessions/{id}/spec"), Some(spec)).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let fields = r.json()["fields"].clone();
    assert!(fields.to_string().contains("outcome"), "{fields}");

    let r = c.call(Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(r.json()["stage"], "DATA_LOADED");
}

#[tokio::test]
async fn new_data_resets_later_steps() {
    let c = Client::new();
    let id = weighted_session(&c, 2, 80).await;
    let r = c.call(Method::POST, &format!("/v1/sessions/{id}/estimate"), Some(json!({"algorithm": "LR"}))).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    assert_eq!(r.json()["algorithm_used"], "LR");

    c.call(Method::POST, &format!("/v1/sessions/{id}/data/example"), Some(json!({"n_per_group": 60}))).await;
    let status = c.call(Method::GET, &format!("/v1/sessions/{id}"), None).await.json();
    assert_eq!(status["stage"], "DATA_LOADED");
    assert!(status["effect"].is_null());
    assert!(status["computed_algorithms"].as_array().unwrap().is_empty());
    let r = c.call(Method::GET, &format!("/v1/sessions/{id}/balance"), None).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn cancelling_sensitivity_leaves_estimate_without_grid() {
    let c = Client::new();
    let id = weighted_session(&c, 3, 100).await;
    c.call(Method::POST, &format!("/v1/sessions/{id}/estimate"), Some(json!({"algorithm": "LR"}))).await;
    let r = c
        .call(
            Method::POST,
            &format!("/v1/sessions/{id}/sensitivity"),
            Some(json!({"grid": {"es_points": 13, "rho_points": 13}, "draws": 500})),
        )
        .await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.text());
    let r = c.call(Method::DELETE, &format!("/v1/sessions/{id}/sensitivity"), None).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = c.wait_sensitivity(&id).await;
    assert_eq!(v["status"], "cancelled");
    tokio::time::sleep(std::time::Duration::from_millis(200)).await;
    let status = c.call(Method::GET, &format!("/v1/sessions/{id}"), None).await.json();
    assert_eq!(status["stage"], "ESTIMATED");
    assert_eq!(status["has_sensitivity"], false);
    let html = c.call(Method::GET, &format!("/v1/sessions/{id}/report"), None).await.text();
    assert!(!html.contains("<svg"));
}

#[tokio::test]
async fn csv_uploads_raw_and_multipart() {
    let c = Client::new();
    let id = c.new_session().await;
    let csv = "t;x;y\n0;1.5;2\n1;2.5;3\n0;0.5;1\n1;3.5;5\n";
    let r = c
        .raw(
            Method::POST,
            &format!("/v1/sessions/{id}/data?separator=semicolon&rows=2"),
            "text/csv",
            csv.as_bytes().to_vec(),
        )
        .await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    assert_eq!(r.json()["columns"], json!(["t", "x", "y"]));
    assert_eq!(r.json()["head"].as_array().unwrap().len(), 2);

    let boundary = "XYZBOUNDARY";
    let body = format!(
        "--{boundary}\r\nContent-Disposition: form-data; name=\"separator\"\r\n\r\ntab\r\n\
         --{boundary}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"d.tsv\"\r\nContent-Type: text/plain\r\n\r\n\
         a\tb\n1\t2\n3\t4\n\r\n--{boundary}--\r\n"
    );
    let r = c
        .raw(
            Method::POST,
            &format!("/v1/sessions/{id}/data"),
            &format!("multipart/form-data; boundary={boundary}"),
            body.into_bytes(),
        )
        .await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    assert_eq!(r.json()["n_rows"], 2);
    assert_eq!(r.json()["columns"], json!(["a", "b"]));

    let r = c
        .raw(Method::POST, &format!("/v1/sessions/{id}/data"), "text/csv", b"a,b\n1\n".to_vec())
        .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn uploads_above_the_cap_are_rejected() {
    let c = Client::with_config(ServiceConfig {
        upload_cap_bytes: 1024,
        snapshot_dir: None,
    });
    let id = c.new_session().await;
    let big = "x,y\n".to_string() + &"1,2\n".repeat(1000);
    let r = c.raw(Method::POST, &format!("/v1/sessions/{id}/data"), "text/csv", big.into_bytes()).await;
    assert_eq!(r.status, StatusCode::PAYLOAD_TOO_LARGE, "{}", r.text());
}

#[tokio::test]
async fn distinct_sessions_do_not_interfere() {
    let c = std::sync::Arc::new(Client::new());
    let mut tasks = Vec::new();
    for seed in [11u64, 12, 13] {
        let c = c.clone();
        tasks.push(tokio::spawn(async move {
            let id = weighted_session(&c, seed, 80).await;
            let r = c.call(Method::POST, &format!("/v1/sessions/{id}/estimate"), Some(json!({"algorithm": "LR"}))).await;
            r.json()["effect"].as_f64().unwrap()
        }));
    }
    let mut concurrent = Vec::new();
    for t in tasks {
        concurrent.push(t.await.unwrap());
    }
    for (seed, value) in [11u64, 12, 13].into_iter().zip(concurrent) {
        let id = weighted_session(&c, seed, 80).await;
        let r = c.call(Method::POST, &format!("/v1/sessions/{id}/estimate"), Some(json!({"algorithm": "LR"}))).await;
        assert_eq!(r.json()["effect"].as_f64().unwrap(), value);
    }
}

#[tokio::test]
async fn archive_round_trip_reproduces_estimate() {
    let c = Client::new();
    let id = weighted_session(&c, 21, 80).await;
    let effect = c
        .call(Method::POST, &format!("/v1/sessions/{id}/estimate"), Some(json!({"algorithm": "CBPS1"})))
        .await
        .json();
    let archive = c.call(Method::GET, &format!("/v1/sessions/{id}/archive"), None).await.json();
    let r = c.call(Method::POST, "/v1/sessions/import", Some(archive)).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text());
    let restored = r.json();
    assert_eq!(restored["stage"], "ESTIMATED");
    assert_eq!(restored["effect"], effect["effect"]);
}

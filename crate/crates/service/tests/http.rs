use std::path::Path;

use adhd_eeg::bundle::ModelBundle;
use adhd_eeg::classifier::{ModelConfig, ResNet};
use adhd_eeg::eeg_io::to_eegcsv;
use adhd_eeg::pipeline::PipelineConfig;
use adhd_eeg::synth::{synth_dataset, SynthConfig};
use adhd_screen_service::session::Thresholds;
use adhd_screen_service::{AppState, ServiceConfig};
use serde_json::{json, Value};

fn tiny_model(dir: &Path) {
    let cfg = ModelConfig::default().with_width_factor(0.125).with_input_hw(16, 100);
    let pipeline = PipelineConfig { n_scales: 16, ..PipelineConfig::default() };
    ModelBundle::new(ResNet::new(cfg, 0).unwrap(), pipeline).unwrap().save(dir).unwrap();
}

async fn start(cfg: &ServiceConfig) -> String {
    let state = AppState::open(cfg).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(adhd_screen_service::serve(listener, state));
    format!("http://{addr}")
}

async fn code_of(resp: reqwest::Response) -> (u16, String) {
    let status = resp.status().as_u16();
    let body: Value = resp.json().await.unwrap();
    (status, body["code"].as_str().unwrap().to_string())
}

fn eeg_csv(duration_s: f64) -> String {
    let cfg = SynthConfig { duration_s, ..SynthConfig::default().with_subjects(1) };
    to_eegcsv(&synth_dataset(&cfg).unwrap()[0])
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_session_and_errors() {
    let data = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig {
        data_dir: data.path().to_path_buf(),
        thresholds: Thresholds::default(),
        model_dir: None,
    };
    let base = start(&cfg).await;
    let http = reqwest::Client::new();

    let created: Value = http
        .post(format!("{base}/api/v1/sessions"))
        .json(&json!({"trials_per_test": 5, "seed": 7}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(created["total"], 15);
    let id = created["session_id"].as_str().unwrap().to_string();

    // the answer is withheld, so answer from the stimulus itself
    let mut expected_correct = [0usize; 3];
    for i in 0..15 {
        let next: Value = http.get(format!("{base}/api/v1/sessions/{id}/trials/next")).send().await.unwrap().json().await.unwrap();
        assert_eq!(next["answered"], i);
        let trial = &next["trial"];
        assert!(trial.get("correct_answer").is_none());
        let st = &trial["stimulus"];
        let right = match st["kind"].as_str().unwrap() {
            "color_pair" => json!(if st["left_color"] == st["right_color"] { "same" } else { "different" }),
            "line_orientation" => json!((st["angle_deg"].as_f64().unwrap() / 22.5) as u64 + 1),
            "image_word" => {
                let manifest: Value = http.get(format!("{base}/api/v1/assets")).send().await.unwrap().json().await.unwrap();
                let word = manifest.as_array().unwrap().iter().find(|a| a["image_id"] == st["image_id"]).unwrap()["word"].clone();
                json!(if word == st["word"] { "match" } else { "mismatch" })
            }
            other => panic!("{other}"),
        };
        // scripted: every third trial answered wrong
        let wrong = i % 3 == 2;
        let response = if !wrong {
            right.clone()
        } else {
            match right.as_str() {
                Some("same") => json!("different"),
                Some("different") => json!("same"),
                Some("match") => json!("mismatch"),
                Some("mismatch") => json!("match"),
                _ => json!((right.as_u64().unwrap() % 8) + 1),
            }
        };
        expected_correct[i / 5] += usize::from(!wrong);
        let rec: Value = http
            .post(format!("{base}/api/v1/sessions/{id}/responses"))
            .json(&json!({"trial_id": trial["trial_id"], "response": response, "stimulus_onset_ms": 1000.0, "response_ms": 1400.0 + i as f64}))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(rec["correct"], !wrong, "trial {i}: {rec}");
        if i == 0 {
            let dup = http
                .post(format!("{base}/api/v1/sessions/{id}/responses"))
                .json(&json!({"trial_id": trial["trial_id"], "response": response, "stimulus_onset_ms": 0.0, "response_ms": 5.0}))
                .send()
                .await
                .unwrap();
            assert_eq!(code_of(dup).await, (409, "duplicate_response".into()));
            let early = http.get(format!("{base}/api/v1/sessions/{id}/summary")).send().await.unwrap();
            assert_eq!(code_of(early).await, (409, "session_incomplete".into()));
        }
    }
    let next: Value = http.get(format!("{base}/api/v1/sessions/{id}/trials/next")).send().await.unwrap().json().await.unwrap();
    assert!(next["trial"].is_null());
    let summary: Value = http.get(format!("{base}/api/v1/sessions/{id}/summary")).send().await.unwrap().json().await.unwrap();
    for (t, correct) in summary["tests"].as_array().unwrap().iter().zip(expected_correct) {
        assert_eq!(t["correct"], correct);
        assert_eq!(t["accuracy"].as_f64().unwrap(), correct as f64 / 5.0);
    }
    assert_eq!(summary["flag"], "review_recommended");
    assert!(summary["disclaimer"].as_str().unwrap().contains("not a diagnosis"));

    // request errors
    let s2: Value = http.post(format!("{base}/api/v1/sessions")).json(&json!({"trials_per_test": 2, "seed": 1})).send().await.unwrap().json().await.unwrap();
    let id2 = s2["session_id"].as_str().unwrap();
    let cases = [
        (json!({"trial_id": "t003", "response": 9, "stimulus_onset_ms": 0.0, "response_ms": 500.0}), 422, "out_of_domain_response"),
        (json!({"trial_id": "t003", "response": 2, "stimulus_onset_ms": 500.0, "response_ms": 400.0}), 422, "non_positive_reaction_time"),
        (json!({"trial_id": "t003", "response": 2, "stimulus_onset_ms": 0.0, "response_ms": 90000.0}), 422, "implausible_reaction_time"),
        (json!({"trial_id": "t099", "response": 2, "stimulus_onset_ms": 0.0, "response_ms": 500.0}), 404, "unknown_trial"),
        (json!({"trial_id": "t003"}), 400, "bad_request"),
    ];
    for (body, status, code) in cases {
        let r = http.post(format!("{base}/api/v1/sessions/{id2}/responses")).json(&body).send().await.unwrap();
        assert_eq!(code_of(r).await, (status, code.to_string()), "{body}");
    }
    let r = http.get(format!("{base}/api/v1/sessions/nope/summary")).send().await.unwrap();
    assert_eq!(code_of(r).await, (404, "unknown_session".into()));
    let r = http.post(format!("{base}/api/v1/sessions")).json(&json!({"trials_per_test": 0})).send().await.unwrap();
    assert_eq!(code_of(r).await, (422, "bad_config".into()));
    let r = http.post(format!("{base}/api/v1/infer")).header("content-type", "text/plain").body(eeg_csv(10.0)).send().await.unwrap();
    assert_eq!(code_of(r).await, (503, "no_model_loaded".into()));

    // restart: the replayed store matches the live one
    let live = serde_json::to_vec(&AppState::open(&cfg).unwrap().store().snapshot(&id).unwrap()).unwrap();
    let fresh = AppState::open(&cfg).unwrap();
    assert_eq!(fresh.store().len(), 2);
    assert_eq!(serde_json::to_vec(&fresh.store().snapshot(&id).unwrap()).unwrap(), live);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn inference_assets_and_ui() {
    let data = tempfile::tempdir().unwrap();
    let model_dir = data.path().join("tiny-model");
    tiny_model(&model_dir);
    let base = start(&ServiceConfig {
        data_dir: data.path().join("state"),
        thresholds: Thresholds::default(),
        model_dir: Some(model_dir),
    })
    .await;
    let http = reqwest::Client::new();

    let r: Value = http
        .post(format!("{base}/api/v1/infer?model_id=tiny-model"))
        .header("content-type", "text/plain")
        .body(eeg_csv(10.0))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(r["n_segments"], 8);
    assert_eq!(r["votes"].as_array().unwrap().len(), 8);
    let (p0, p1) = (r["p_control"].as_f64().unwrap(), r["p_adhd"].as_f64().unwrap());
    assert!((p0 + p1 - 1.0).abs() < 1e-12);

    let short = http.post(format!("{base}/api/v1/infer")).header("content-type", "text/plain").body(eeg_csv(2.0)).send().await.unwrap();
    assert_eq!(code_of(short).await, (422, "insufficient_length".into()));
    let json_body = http.post(format!("{base}/api/v1/infer")).json(&json!({})).send().await.unwrap();
    assert_eq!(code_of(json_body).await, (415, "unsupported_media_type".into()));
    let garbage = http.post(format!("{base}/api/v1/infer")).header("content-type", "text/plain").body("hello").send().await.unwrap();
    assert_eq!(code_of(garbage).await, (400, "bad_recording".into()));
    let other = http
        .post(format!("{base}/api/v1/infer?model_id=other"))
        .header("content-type", "text/plain")
        .body(eeg_csv(4.0))
        .send()
        .await
        .unwrap();
    assert_eq!(code_of(other).await, (404, "unknown_model".into()));

    let manifest: Value = http.get(format!("{base}/api/v1/assets")).send().await.unwrap().json().await.unwrap();
    assert_eq!(manifest.as_array().unwrap().len(), 16);
    let svg = http.get(format!("{base}/api/v1/assets/img01")).send().await.unwrap();
    assert_eq!(svg.headers()["content-type"], "image/svg+xml");
    assert!(svg.text().await.unwrap().starts_with("<svg"));
    let missing = http.get(format!("{base}/api/v1/assets/img99")).send().await.unwrap();
    assert_eq!(code_of(missing).await, (404, "unknown_asset".into()));
    let page = http.get(format!("{base}/")).send().await.unwrap().text().await.unwrap();
    assert!(page.contains("/api/v1") && page.contains("/sessions"));
    let nowhere = http.get(format!("{base}/api/v2/x")).send().await.unwrap();
    assert_eq!(code_of(nowhere).await, (404, "not_found".into()));
}

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tower::ServiceExt;

use memeface_core::damsm::Damsm;
use memeface_core::imaging::{decode_png, encode_png, save_png, tensor_to_image};
use memeface_core::pipeline::{ClusterEntry, DatasetManifest};
use memeface_core::synth::template_image;
use memeface_core::text::{MixedTokenizer, Vocabulary};
use memeface_core::trainer::train::checkpoint_file_name;
use memeface_core::trainer::{save_checkpoint, TrainConfig, Trainer};
use memeface_core::ModelConfig;
use memeface_service::{router, GenerateResponse, Health, Service, ServiceConfig};

struct Fixture {
    _dir: tempfile::TempDir,
    config: ServiceConfig,
}

fn fixture(epochs: &[u64]) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let vocab = Vocabulary::build(["wow not bad", "panda face"], &MixedTokenizer);
    vocab.save(&root.join("vocab.txt")).unwrap();
    let model = ModelConfig::tiny(vocab.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let damsm = Damsm::new(&model, &mut rng);
    let trainer = Trainer::new(model, TrainConfig::default(), damsm).unwrap();
    std::fs::create_dir_all(root.join("ckpt")).unwrap();
    for &e in epochs {
        save_checkpoint(&trainer.checkpoint(e).unwrap(), &root.join("ckpt").join(checkpoint_file_name(e as usize))).unwrap();
    }
    let manifest_dir = root.join("data");
    std::fs::create_dir_all(manifest_dir.join("templates")).unwrap();
    for id in [0, 1] {
        save_png(&tensor_to_image(&template_image(id, 32)), &manifest_dir.join(format!("templates/cluster_{id:03}.png"))).unwrap();
    }
    DatasetManifest {
        samples: vec![],
        clusters: (0..2)
            .map(|id| ClusterEntry { cluster_id: id, template_path: format!("templates/cluster_{id:03}.png"), member_count: 0 })
            .collect(),
    }
    .write(&manifest_dir)
    .unwrap();
    let config = ServiceConfig {
        checkpoint_dir: root.join("ckpt"),
        vocab_path: root.join("vocab.txt"),
        manifest_dir,
        default_template: None,
        output_resolution: None,
        cache_size: 4,
    };
    Fixture { _dir: dir, config }
}

async fn call(service: Arc<Service>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(service).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn post(body: &str) -> Request<Body> {
    Request::post("/generate").header("content-type", "application/json").body(Body::from(body.to_string())).unwrap()
}

fn dir_digest(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), Sha256::digest(std::fs::read(e.path()).unwrap()).to_vec())
        })
        .collect();
    v.sort();
    v
}

#[tokio::test]
async fn generate_returns_one_frame_per_checkpoint() {
    let f = fixture(&[10, 5, 15]);
    let before = dir_digest(&f.config.checkpoint_dir);
    let s = Arc::new(Service::open(f.config.clone()));
    let (status, body) = call(s.clone(), post(r#"{"text":"Wow, not bad","seed":7}"#)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let resp: GenerateResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.frames.iter().map(|f| f.epoch).collect::<Vec<_>>(), vec![5, 10, 15]);
    assert_eq!(resp.resolution, 16);
    assert!(resp.log.iter().any(|l| l.contains("seed 7")));
    for frame in &resp.frames {
        let png = STANDARD.decode(&frame.image_b64).unwrap();
        let img = decode_png(&png).unwrap();
        assert_eq!((img.width(), img.height()), (16, 16));
        assert_eq!(STANDARD.encode(&png), frame.image_b64);
        assert_eq!(encode_png(&img).unwrap(), png);
    }
    let (_, again) = call(s.clone(), post(r#"{"text":"Wow, not bad","seed":7}"#)).await;
    let again: GenerateResponse = serde_json::from_slice(&again).unwrap();
    let images = |r: &GenerateResponse| r.frames.iter().map(|f| f.image_b64.clone()).collect::<Vec<_>>();
    assert_eq!(images(&resp), images(&again));
    assert_eq!(before, dir_digest(&f.config.checkpoint_dir));
}

#[tokio::test]
async fn upscaled_output() {
    let f = fixture(&[5]);
    let s = Arc::new(Service::open(ServiceConfig { output_resolution: Some(64), ..f.config.clone() }));
    let (status, body) = call(s, post(r#"{"text":"panda face","template_id":1,"seed":1}"#)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: GenerateResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.resolution, 64);
    let img = decode_png(&STANDARD.decode(&resp.frames[0].image_b64).unwrap()).unwrap();
    assert_eq!(img.width(), 64);
}

#[tokio::test]
async fn error_statuses() {
    let f = fixture(&[5]);
    let s = Arc::new(Service::open(f.config.clone()));
    let (status, _) = call(s.clone(), post(r#"{"text":"   "}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let long = format!(r#"{{"text":"{}"}}"#, "a".repeat(201));
    assert_eq!(call(s.clone(), post(&long)).await.0, StatusCode::BAD_REQUEST);
    let (status, body) = call(s.clone(), post(r#"{"text":"wow","template_id":9}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(err["valid_template_ids"], serde_json::json!([0, 1]));

    let empty = fixture(&[]);
    let s = Arc::new(Service::open(empty.config.clone()));
    assert_eq!(call(s, post(r#"{"text":"wow"}"#)).await.0, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn health_checkpoints_templates() {
    let f = fixture(&[5, 10, 15]);
    let s = Arc::new(Service::open(f.config.clone()));
    let get = |p: &str| Request::get(p).body(Body::empty()).unwrap();
    let (_, body) = call(s.clone(), get("/health")).await;
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h, Health { status: "ok".into(), loaded_vocab: true, n_checkpoints: 3 });
    let (_, body2) = call(s.clone(), get("/health")).await;
    assert_eq!(body, body2);
    let (_, body) = call(s.clone(), get("/checkpoints")).await;
    let list: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(list.as_array().unwrap().len(), 3);
    let (_, body) = call(s.clone(), get("/templates")).await;
    let t: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(t.as_array().unwrap().len(), 2);

    let degraded = Service::open(ServiceConfig { vocab_path: f.config.vocab_path.with_extension("missing"), ..f.config.clone() });
    assert_eq!(memeface_service::health(&degraded).status, "degraded");
}

#[tokio::test]
async fn streamed_frames_match_json() {
    let f = fixture(&[5, 10]);
    let s = Arc::new(Service::open(f.config.clone()));
    let req = Request::post("/generate")
        .header("content-type", "application/json")
        .header("accept", "text/event-stream")
        .body(Body::from(r#"{"text":"wow not bad","seed":3}"#))
        .unwrap();
    let (status, body) = call(s.clone(), req).await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(body).unwrap();
    let frames: Vec<memeface_service::Frame> = text
        .split("\n\n")
        .filter(|ev| ev.contains("event: frame"))
        .map(|ev| serde_json::from_str(ev.lines().find_map(|l| l.strip_prefix("data: ")).unwrap()).unwrap())
        .collect();
    assert_eq!(frames.len(), 2);
    assert!(text.contains("event: done"));
    let (_, body) = call(s, post(r#"{"text":"wow not bad","seed":3}"#)).await;
    let json: GenerateResponse = serde_json::from_slice(&body).unwrap();
    for (a, b) in frames.iter().zip(&json.frames) {
        assert_eq!((a.epoch, &a.image_b64), (b.epoch, &b.image_b64));
    }
}

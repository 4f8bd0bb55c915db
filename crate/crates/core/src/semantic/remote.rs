//! Network-backed toolkit: each capability is a small HTTP service.
//!
//! All three services speak JSON over POST. The chat service receives
//! `{"model", "messages": [{"role", "content": [{"type": "text", "text"} |
//! {"type": "image", "data": <base64 PNG>}]}]}` and answers `{"text"}`. The
//! detector receives `{"image", "phrase", "threshold"}` and answers
//! `{"detections": [{"box": [x0,y0,x1,y1], "score"}]}`. The segmenter
//! receives `{"image", "prompt"}` — prompt is `{"phrase"}`, `{"point":
//! [u,v]}` or `{"box": [x0,y0,x1,y1]}` — and answers `{"masks": [{"rle" |
//! "bitmap", "score"}]}`. Response payloads go through the same parsers the
//! replay backend uses, so a recorded log and a live service are
//! interchangeable.
//!
//! Failure mapping is uniform across capabilities: a request that exceeds
//! the configured deadline is [`SemanticError::Timeout`], a 5xx status is
//! the capability's `*Unavailable` error (the service exists but cannot
//! answer), any other non-2xx status is [`SemanticError::ProtocolError`],
//! and a syntactically bad payload is
//! [`SemanticError::MalformedToolOutput`].

use std::io::Cursor;
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde_json::{json, Value};

use crate::scene::{Scene, SceneError};

use super::{
    annotate_rgb, parse_detections_value, parse_masks_value, Chat, ChatImage, ChatPart, ChatRole,
    ChatTurn, Detection, Detector, SegmentMask, SegmentPrompt, Segmenter, SemanticError,
};

/// Environment variables read by [`RemoteConfig::from_env`].
pub const CHAT_URL_VAR: &str = "TAB_CHAT_URL";
pub const DETECTOR_URL_VAR: &str = "TAB_DETECTOR_URL";
pub const SEGMENTER_URL_VAR: &str = "TAB_SEGMENTER_URL";
pub const MODEL_VAR: &str = "TAB_MODEL";

const DEFAULT_MODEL: &str = "default";
const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

/// Where the three services live and how long to wait for them.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub chat_url: String,
    pub detector_url: String,
    pub segmenter_url: String,
    /// Model name forwarded with every chat request.
    pub model: String,
    /// Overall per-request deadline (connect + send + receive).
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn new(
        chat_url: impl Into<String>,
        detector_url: impl Into<String>,
        segmenter_url: impl Into<String>,
    ) -> Self {
        Self {
            chat_url: chat_url.into(),
            detector_url: detector_url.into(),
            segmenter_url: segmenter_url.into(),
            model: DEFAULT_MODEL.into(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    /// Reads the three endpoint variables (and, if set, the model name) from
    /// the environment. A missing endpoint is
    /// [`SemanticError::MissingEndpoint`] naming the variable.
    pub fn from_env() -> Result<Self, SemanticError> {
        let need = |var: &'static str| {
            std::env::var(var)
                .ok()
                .filter(|v| !v.trim().is_empty())
                .ok_or(SemanticError::MissingEndpoint { var })
        };
        let mut config =
            Self::new(need(CHAT_URL_VAR)?, need(DETECTOR_URL_VAR)?, need(SEGMENTER_URL_VAR)?);
        if let Ok(model) = std::env::var(MODEL_VAR) {
            if !model.trim().is_empty() {
                config.model = model;
            }
        }
        Ok(config)
    }
}

/// Shared HTTP plumbing: one pooled agent plus the request targets. Cloning
/// shares the agent's connection pool.
#[derive(Clone)]
pub struct Http {
    agent: ureq::Agent,
    chat_url: String,
    detector_url: String,
    segmenter_url: String,
    model: String,
}

/// What went wrong with one HTTP exchange, before capability-specific
/// error mapping.
enum HttpFailure {
    Timeout,
    Status(u16),
    Transport(String),
    /// 2xx reply whose body is not JSON.
    BadBody(String),
}

impl Http {
    pub fn new(config: &RemoteConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Self {
            agent,
            chat_url: config.chat_url.clone(),
            detector_url: config.detector_url.clone(),
            segmenter_url: config.segmenter_url.clone(),
            model: config.model.clone(),
        }
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, HttpFailure> {
        match self.agent.post(url).send_json(body) {
            Ok(response) => response
                .into_json::<Value>()
                .map_err(|e| HttpFailure::BadBody(format!("reply is not JSON: {e}"))),
            Err(ureq::Error::Status(status, _)) => Err(HttpFailure::Status(status)),
            Err(ureq::Error::Transport(t)) => {
                let text = t.to_string();
                let lower = text.to_lowercase();
                // ureq reports a blown deadline as an io transport error;
                // both its connect and read messages say "timed out".
                if lower.contains("timed out") || lower.contains("timeout") {
                    Err(HttpFailure::Timeout)
                } else {
                    Err(HttpFailure::Transport(text))
                }
            }
        }
    }
}

/// Maps an exchange failure onto the calling capability's error, routing
/// 5xx and transport faults through that capability's `*Unavailable`
/// constructor.
fn http_err(
    failure: HttpFailure,
    url: &str,
    unavailable: fn(String) -> SemanticError,
) -> SemanticError {
    match failure {
        HttpFailure::Timeout => SemanticError::Timeout { url: url.to_string() },
        HttpFailure::Status(status) if status >= 500 => unavailable(format!("HTTP {status}")),
        HttpFailure::Status(status) => {
            SemanticError::ProtocolError { status, url: url.to_string() }
        }
        HttpFailure::Transport(message) => unavailable(message),
        HttpFailure::BadBody(message) => SemanticError::MalformedToolOutput(message),
    }
}

/// Renders a [`ChatImage`] to its wire form: the frame's colour image with
/// annotations burned in, PNG-encoded, base64.
fn encode_image(scene: &Scene, image: &ChatImage) -> Result<String, SemanticError> {
    let rgb = scene.frame(image.frame_index).rgb()?;
    let annotated;
    let pixels = if image.annotations.is_empty() {
        rgb.as_ref()
    } else {
        annotated = annotate_rgb(&rgb, &image.annotations);
        &annotated
    };
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(pixels.clone())
        .write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| SemanticError::Scene(SceneError::Image(e)))?;
    Ok(BASE64.encode(&bytes))
}

pub struct RemoteChat {
    scene: Arc<Scene>,
    http: Http,
}

impl RemoteChat {
    pub fn new(scene: Arc<Scene>, http: Http) -> Self {
        Self { scene, http }
    }
}

impl Chat for RemoteChat {
    fn reply(&self, turns: &[ChatTurn]) -> Result<String, SemanticError> {
        let mut messages = Vec::with_capacity(turns.len());
        for turn in turns {
            let role = match turn.role {
                ChatRole::System => "system",
                ChatRole::User => "user",
                ChatRole::Assistant => "assistant",
            };
            let mut content = Vec::with_capacity(turn.parts.len());
            for part in &turn.parts {
                content.push(match part {
                    ChatPart::Text(text) => json!({"type": "text", "text": text}),
                    ChatPart::Image(img) => {
                        json!({"type": "image", "data": encode_image(&self.scene, img)?})
                    }
                });
            }
            messages.push(json!({"role": role, "content": content}));
        }
        let body = json!({"model": self.http.model, "messages": messages});
        let reply = self
            .http
            .post(&self.http.chat_url, &body)
            .map_err(|f| http_err(f, &self.http.chat_url, SemanticError::ChatUnavailable))?;
        reply
            .get("text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                SemanticError::MalformedToolOutput("chat reply needs a \"text\" string".into())
            })
    }
}

pub struct RemoteDetector {
    scene: Arc<Scene>,
    http: Http,
}

impl RemoteDetector {
    pub fn new(scene: Arc<Scene>, http: Http) -> Self {
        Self { scene, http }
    }
}

impl Detector for RemoteDetector {
    fn detect(
        &self,
        frame_index: usize,
        phrase: &str,
        threshold: f64,
    ) -> Result<Vec<Detection>, SemanticError> {
        let image = encode_image(&self.scene, &ChatImage::plain(frame_index))?;
        let body = json!({"image": image, "phrase": phrase, "threshold": threshold});
        let value = self
            .http
            .post(&self.http.detector_url, &body)
            .map_err(|f| http_err(f, &self.http.detector_url, SemanticError::DetectorUnavailable))?;
        parse_detections_value(&value, frame_index, phrase, &self.scene.intrinsics)
    }
}

pub struct RemoteSegmenter {
    scene: Arc<Scene>,
    http: Http,
}

impl RemoteSegmenter {
    pub fn new(scene: Arc<Scene>, http: Http) -> Self {
        Self { scene, http }
    }
}

impl Segmenter for RemoteSegmenter {
    fn segment(
        &self,
        frame_index: usize,
        prompt: &SegmentPrompt,
    ) -> Result<Vec<SegmentMask>, SemanticError> {
        let prompt_json = match prompt {
            SegmentPrompt::Phrase(p) => json!({"phrase": p}),
            SegmentPrompt::Point { u, v } => json!({"point": [u, v]}),
            SegmentPrompt::Box(rect) => json!({"box": rect.to_array()}),
        };
        let image = encode_image(&self.scene, &ChatImage::plain(frame_index))?;
        let body = json!({"image": image, "prompt": prompt_json});
        let value = self
            .http
            .post(&self.http.segmenter_url, &body)
            .map_err(|f| {
                http_err(f, &self.http.segmenter_url, SemanticError::SegmenterUnavailable)
            })?;
        parse_masks_value(&value, frame_index, &self.scene.intrinsics)
    }
}

#[cfg(test)]
mod tests {
    use std::io::{Read as _, Write as _};
    use std::net::TcpListener;
    use std::thread::JoinHandle;

    use super::super::Annotation;
    use super::*;
    use crate::scene::synthetic::{render_synthetic, BoxSpec, OrbitSpec, SyntheticSpec};
    use crate::semantic::PixelRect;

    fn tiny_scene() -> Arc<Scene> {
        let spec = SyntheticSpec {
            scene_id: "remote-test".into(),
            width: 32,
            height: 24,
            fov_deg: 60.0,
            frames: 2,
            orbit: OrbitSpec {
                center: [0.0, 0.0, 0.0],
                radius: 2.0,
                height: 1.0,
                start_deg: 0.0,
                sweep_deg: 360.0,
            },
            boxes: vec![BoxSpec {
                class: "box".into(),
                center: [0.0, 0.0, 0.0],
                extent: [0.5; 3],
                color: None,
            }],
        };
        Arc::new(render_synthetic(&spec).unwrap().0)
    }

    fn read_request(stream: &mut std::net::TcpStream) -> String {
        let mut raw = Vec::new();
        let mut buf = [0u8; 4096];
        let header_end = loop {
            let n = stream.read(&mut buf).unwrap();
            assert!(n > 0, "client hung up mid-request");
            raw.extend_from_slice(&buf[..n]);
            if let Some(pos) = raw.windows(4).position(|w| w == b"\r\n\r\n") {
                break pos + 4;
            }
        };
        let headers = String::from_utf8_lossy(&raw[..header_end]).to_lowercase();
        let length: usize = headers
            .lines()
            .find_map(|l| l.strip_prefix("content-length:"))
            .expect("request carries a content-length")
            .trim()
            .parse()
            .unwrap();
        while raw.len() < header_end + length {
            let n = stream.read(&mut buf).unwrap();
            assert!(n > 0, "client hung up mid-body");
            raw.extend_from_slice(&buf[..n]);
        }
        String::from_utf8(raw[header_end..header_end + length].to_vec()).unwrap()
    }

    fn respond(stream: &mut std::net::TcpStream, status: u16, body: &Value) {
        let body = body.to_string();
        let reason = match status {
            200 => "OK",
            413 => "Payload Too Large",
            500 => "Internal Server Error",
            503 => "Service Unavailable",
            _ => "Status",
        };
        write!(
            stream,
            "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
        stream.flush().unwrap();
    }

    /// One-shot-per-exchange loopback server. Serves the scripted
    /// status/body pairs in order and returns the request bodies it saw.
    fn serve(exchanges: Vec<(u16, Value)>) -> (String, JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in exchanges {
                let (mut stream, _) = listener.accept().unwrap();
                seen.push(read_request(&mut stream));
                respond(&mut stream, status, &body);
            }
            seen
        });
        (url, handle)
    }

    fn config_at(url: &str) -> RemoteConfig {
        let mut config = RemoteConfig::new(url, url, url);
        config.model = "test-model".into();
        config.timeout = Duration::from_secs(5);
        config
    }

    #[test]
    fn chat_round_trip_encodes_turns_and_images() {
        let scene = tiny_scene();
        let (url, server) = serve(vec![(200, json!({"text": "the reply"}))]);
        let chat = RemoteChat::new(scene, Http::new(&config_at(&url)));
        let turns = [
            ChatTurn::system("be brief"),
            ChatTurn::user(vec![
                ChatPart::Text("look at this".into()),
                ChatPart::Image(ChatImage {
                    frame_index: 1,
                    annotations: vec![Annotation {
                        rect: PixelRect::new(2.0, 2.0, 20.0, 18.0),
                        label: Some("0".into()),
                    }],
                }),
            ]),
        ];
        assert_eq!(chat.reply(&turns).unwrap(), "the reply");

        let seen = server.join().unwrap();
        let request: Value = serde_json::from_str(&seen[0]).unwrap();
        assert_eq!(request["model"], "test-model");
        let messages = request["messages"].as_array().unwrap();
        assert_eq!(messages.len(), 2);
        assert_eq!(messages[0]["role"], "system");
        assert_eq!(messages[0]["content"][0]["text"], "be brief");
        assert_eq!(messages[1]["role"], "user");
        assert_eq!(messages[1]["content"][0]["type"], "text");
        let image = &messages[1]["content"][1];
        assert_eq!(image["type"], "image");
        let png = BASE64.decode(image["data"].as_str().unwrap()).unwrap();
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n", "image data is a PNG");
    }

    #[test]
    fn detector_round_trip_parses_detections() {
        let scene = tiny_scene();
        let (url, server) = serve(vec![(
            200,
            json!({"detections": [{"box": [1.0, 2.0, 10.0, 12.0], "score": 0.75}]}),
        )]);
        let detector = RemoteDetector::new(scene, Http::new(&config_at(&url)));
        let hits = detector.detect(0, "a box", 0.5).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].frame_index, 0);
        assert_eq!(hits[0].phrase, "a box");
        assert_eq!(hits[0].score, 0.75);
        assert_eq!(hits[0].bbox, PixelRect::new(1.0, 2.0, 10.0, 12.0));

        let seen = server.join().unwrap();
        let request: Value = serde_json::from_str(&seen[0]).unwrap();
        assert_eq!(request["phrase"], "a box");
        assert_eq!(request["threshold"], 0.5);
        assert!(request["image"].is_string());
    }

    #[test]
    fn segmenter_sends_prompt_forms_and_parses_masks() {
        let scene = tiny_scene();
        let empty = vec![0u8; 32];
        let rows: Vec<Vec<u8>> = (0..24).map(|_| empty.clone()).collect();
        let masks = json!({"masks": [{"bitmap": rows, "score": 0.9}]});
        let (url, server) = serve(vec![(200, masks.clone()), (200, masks)]);
        let segmenter = RemoteSegmenter::new(scene, Http::new(&config_at(&url)));

        let got = segmenter.segment(0, &SegmentPrompt::Point { u: 5, v: 6 }).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].score, 0.9);
        assert!(got[0].bitmap.is_empty());

        segmenter
            .segment(1, &SegmentPrompt::Box(PixelRect::new(1.0, 1.0, 9.0, 9.0)))
            .unwrap();

        let seen = server.join().unwrap();
        let first: Value = serde_json::from_str(&seen[0]).unwrap();
        assert_eq!(first["prompt"], json!({"point": [5, 6]}));
        let second: Value = serde_json::from_str(&seen[1]).unwrap();
        assert_eq!(second["prompt"], json!({"box": [1.0, 1.0, 9.0, 9.0]}));
    }

    #[test]
    fn server_errors_map_to_unavailable_and_protocol() {
        let scene = tiny_scene();

        let (url, server) = serve(vec![(500, json!({"error": "down"}))]);
        let detector = RemoteDetector::new(scene.clone(), Http::new(&config_at(&url)));
        match detector.detect(0, "box", 0.5) {
            Err(SemanticError::DetectorUnavailable(msg)) => assert!(msg.contains("500")),
            other => panic!("expected DetectorUnavailable, got {other:?}"),
        }
        server.join().unwrap();

        let (url, server) = serve(vec![(413, json!({"error": "too large"}))]);
        let chat = RemoteChat::new(scene, Http::new(&config_at(&url)));
        match chat.reply(&[ChatTurn::user_text("hi")]) {
            Err(SemanticError::ProtocolError { status: 413, .. }) => {}
            other => panic!("expected ProtocolError 413, got {other:?}"),
        }
        server.join().unwrap();
    }

    #[test]
    fn slow_server_times_out() {
        let scene = tiny_scene();
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            read_request(&mut stream);
            // Never answer; the client's deadline expires first.
            std::thread::sleep(Duration::from_millis(600));
        });

        let mut config = config_at(&url);
        config.timeout = Duration::from_millis(150);
        let chat = RemoteChat::new(scene, Http::new(&config));
        match chat.reply(&[ChatTurn::user_text("hello?")]) {
            Err(SemanticError::Timeout { url: u }) => assert_eq!(u, url),
            other => panic!("expected Timeout, got {other:?}"),
        }
        server.join().unwrap();
    }

    #[test]
    fn non_json_success_body_is_malformed_output() {
        let scene = tiny_scene();
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            read_request(&mut stream);
            let body = "plain text";
            write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: text/plain\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        });

        let chat = RemoteChat::new(scene, Http::new(&config_at(&url)));
        match chat.reply(&[ChatTurn::user_text("hi")]) {
            Err(SemanticError::MalformedToolOutput(_)) => {}
            other => panic!("expected MalformedToolOutput, got {other:?}"),
        }
        server.join().unwrap();
    }

    #[test]
    fn from_env_requires_all_endpoints() {
        // Env mutation is process-global; run both halves in one test.
        let vars = [CHAT_URL_VAR, DETECTOR_URL_VAR, SEGMENTER_URL_VAR, MODEL_VAR];
        let saved: Vec<_> = vars.iter().map(|v| std::env::var(v).ok()).collect();

        for var in vars {
            std::env::remove_var(var);
        }
        std::env::set_var(CHAT_URL_VAR, "http://chat");
        std::env::set_var(DETECTOR_URL_VAR, "http://det");
        match RemoteConfig::from_env() {
            Err(SemanticError::MissingEndpoint { var }) => assert_eq!(var, SEGMENTER_URL_VAR),
            other => panic!("expected MissingEndpoint, got {other:?}"),
        }

        std::env::set_var(SEGMENTER_URL_VAR, "http://seg");
        let config = RemoteConfig::from_env().unwrap();
        assert_eq!(config.chat_url, "http://chat");
        assert_eq!(config.model, DEFAULT_MODEL);

        std::env::set_var(MODEL_VAR, "custom");
        assert_eq!(RemoteConfig::from_env().unwrap().model, "custom");

        for (var, value) in vars.iter().zip(saved) {
            match value {
                Some(v) => std::env::set_var(var, v),
                None => std::env::remove_var(var),
            }
        }
    }
}

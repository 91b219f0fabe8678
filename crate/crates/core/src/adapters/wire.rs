//! Newline-delimited JSON protocol for out-of-process detectors.
//!
//! Requests (one JSON object per line):
//!
//! ```text
//! {"op":"probe"}
//! {"op":"detect","image":"<base64 PNG>"}
//! {"op":"grad","image":"<base64 PNG>","upstream":1.0}
//! ```
//!
//! Replies:
//!
//! ```text
//! {"supports_gradients":false,"resolution":[640,480],"class_map":{"14":"stop"},...}
//! {"detections":[{"class_id":14,"confidence":0.93,"bbox":[cx,cy,w,h]}]}
//! {"gradient":[...]}            row-major interleaved RGB, same size as the image
//! {"error":"message"}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AdapterError, Capabilities, Detection, Detector};
use crate::camera::BBox;
use crate::raster::{decode_png, encode_png, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Probe,
    Detect { image: String },
    Grad { image: String, upstream: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub class_id: u32,
    pub confidence: f64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectReply {
    pub detections: Vec<WireDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReply {
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub error: String,
}

pub fn encode_image(image: &Image) -> Result<String, AdapterError> {
    Ok(BASE64.encode(encode_png(&image.to_rgb8()?)?))
}

pub fn decode_image(text: &str) -> Result<Image, AdapterError> {
    let bytes = BASE64
        .decode(text.trim())
        .map_err(|e| AdapterError::Protocol(format!("bad base64 image: {e}")))?;
    Ok(Image::from_rgb8(&decode_png(&bytes)?))
}

fn protocol<E: std::fmt::Display>(e: E) -> AdapterError {
    AdapterError::Protocol(e.to_string())
}

/// Parses a reply line, surfacing `{"error": ...}` replies as protocol errors.
fn reply_value(line: &str) -> Result<Value, AdapterError> {
    let v: Value = serde_json::from_str(line.trim()).map_err(protocol)?;
    if let Some(err) = v.get("error") {
        return Err(AdapterError::Protocol(format!("server error: {err}")));
    }
    if !v.is_object() {
        return Err(AdapterError::Protocol("reply is not a JSON object".into()));
    }
    Ok(v)
}

pub fn parse_probe_reply(line: &str) -> Result<Capabilities, AdapterError> {
    serde_json::from_value(reply_value(line)?).map_err(protocol)
}

pub fn parse_detect_reply(line: &str) -> Result<Vec<Detection>, AdapterError> {
    let reply: DetectReply = serde_json::from_value(reply_value(line)?).map_err(protocol)?;
    reply
        .detections
        .into_iter()
        .map(|d| {
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(AdapterError::Protocol(format!("confidence {} outside [0, 1]", d.confidence)));
            }
            let [cx, cy, w, h] = d.bbox;
            let bbox = BBox::new(d.class_id, cx, cy, w, h).map_err(protocol)?;
            Ok(Detection {
                bbox,
                class_id: d.class_id,
                confidence: d.confidence,
            })
        })
        .collect()
}

pub fn parse_grad_reply(line: &str, width: usize, height: usize) -> Result<Image, AdapterError> {
    let reply: GradReply = serde_json::from_value(reply_value(line)?).map_err(protocol)?;
    if reply.gradient.len() != width * height * 3 {
        return Err(AdapterError::Protocol(format!(
            "gradient has {} values, expected {}",
            reply.gradient.len(),
            width * height * 3
        )));
    }
    if reply.gradient.iter().any(|v| !v.is_finite()) {
        return Err(AdapterError::Protocol("non-finite gradient".into()));
    }
    Ok(Image::from_vec(width, height, 3, reply.gradient))
}

/// Serves a [`Detector`] over the wire protocol.
pub struct WireServer {
    detector: Box<dyn Detector>,
    expose_gradients: bool,
}

impl WireServer {
    /// Detection-only server; `grad` requests are refused.
    pub fn new(detector: Box<dyn Detector>) -> Self {
        Self {
            detector,
            expose_gradients: false,
        }
    }

    pub fn with_gradients(mut self) -> Self {
        self.expose_gradients = self.detector.supports_gradients();
        self
    }

    pub fn capabilities(&self) -> Capabilities {
        let mut caps = self.detector.capabilities();
        caps.supports_gradients = self.expose_gradients;
        caps
    }

    /// Answers one request line with one reply line (no trailing newline).
    pub fn handle(&self, line: &str) -> String {
        let reply = match serde_json::from_str::<Request>(line.trim()) {
            Err(e) => Err(format!("bad request: {e}")),
            Ok(Request::Probe) => serde_json::to_string(&self.capabilities()).map_err(|e| e.to_string()),
            Ok(Request::Detect { image }) => self.detect(&image),
            Ok(Request::Grad { image, upstream }) => self.grad(&image, upstream),
        };
        reply.unwrap_or_else(|error| serde_json::to_string(&ErrorReply { error }).expect("error serializes"))
    }

    fn detect(&self, image: &str) -> Result<String, String> {
        let img = decode_image(image).map_err(|e| e.to_string())?;
        let detections = self.detector.detect(&img).map_err(|e| e.to_string())?;
        let reply = DetectReply {
            detections: detections
                .into_iter()
                .map(|d| WireDetection {
                    class_id: d.class_id,
                    confidence: d.confidence,
                    bbox: [d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h],
                })
                .collect(),
        };
        serde_json::to_string(&reply).map_err(|e| e.to_string())
    }

    fn grad(&self, image: &str, upstream: f64) -> Result<String, String> {
        if !self.expose_gradients {
            return Err("gradients not supported".into());
        }
        let img = decode_image(image).map_err(|e| e.to_string())?;
        let g = self.detector.input_gradient(&img, upstream).map_err(|e| e.to_string())?;
        serde_json::to_string(&GradReply {
            gradient: g.into_vec(),
        })
        .map_err(|e| e.to_string())
    }

    /// Request/reply loop until EOF.
    pub fn serve(&self, reader: impl BufRead, mut writer: impl Write) -> std::io::Result<()> {
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            writeln!(writer, "{}", self.handle(&line))?;
            writer.flush()?;
        }
        Ok(())
    }
}

/// A line-oriented request/reply channel.
pub trait Transport: Send {
    fn exchange(&mut self, request: &str) -> Result<String, AdapterError>;
}

/// In-process transport that still goes through full serialization.
pub struct LoopbackTransport {
    server: WireServer,
}

impl LoopbackTransport {
    pub fn new(server: WireServer) -> Self {
        Self { server }
    }
}

impl Transport for LoopbackTransport {
    fn exchange(&mut self, request: &str) -> Result<String, AdapterError> {
        Ok(self.server.handle(request))
    }
}

/// Child process speaking the protocol on stdin/stdout.
pub struct SubprocessTransport {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl SubprocessTransport {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, AdapterError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| AdapterError::Unreachable(format!("cannot start `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout piped"));
        Ok(Self { child, stdin, stdout })
    }
}

impl Transport for SubprocessTransport {
    fn exchange(&mut self, request: &str) -> Result<String, AdapterError> {
        let unreachable = |e: std::io::Error| AdapterError::Unreachable(e.to_string());
        writeln!(self.stdin, "{request}").map_err(unreachable)?;
        self.stdin.flush().map_err(unreachable)?;
        let mut line = String::new();
        let n = self.stdout.read_line(&mut line).map_err(unreachable)?;
        if n == 0 {
            return Err(AdapterError::Unreachable("detector process closed its output".into()));
        }
        Ok(line)
    }
}

impl Drop for SubprocessTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Where an external detector lives.
pub enum Endpoint {
    /// Serve a detector in-process through the wire format.
    Loopback(WireServer),
    /// Spawn a program and talk over its stdio.
    Command { program: String, args: Vec<String> },
    Custom(Box<dyn Transport>),
}

impl Endpoint {
    /// Parses `program arg1 arg2 ...` (whitespace separated).
    pub fn command(spec: &str) -> Result<Self, AdapterError> {
        let mut parts = spec.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| AdapterError::Unreachable("empty detector command".into()))?;
        Ok(Endpoint::Command {
            program,
            args: parts.collect(),
        })
    }

    fn open(self) -> Result<Box<dyn Transport>, AdapterError> {
        Ok(match self {
            Endpoint::Loopback(server) => Box::new(LoopbackTransport::new(server)),
            Endpoint::Command { program, args } => Box::new(SubprocessTransport::spawn(&program, &args)?),
            Endpoint::Custom(t) => t,
        })
    }
}

/// Detector proxied over a [`Transport`]. Calls are serialized.
pub struct ExternalDetector {
    transport: Mutex<Box<dyn Transport>>,
    caps: Capabilities,
}

impl ExternalDetector {
    pub fn connect(endpoint: Endpoint) -> Result<Self, AdapterError> {
        let mut transport = endpoint.open()?;
        let request = serde_json::to_string(&Request::Probe).expect("request serializes");
        let mut caps = parse_probe_reply(&transport.exchange(&request)?)?;
        caps.reentrant = false;
        Ok(Self {
            transport: Mutex::new(transport),
            caps,
        })
    }

    fn call(&self, request: &Request) -> Result<String, AdapterError> {
        let line = serde_json::to_string(request).expect("request serializes");
        let mut t = self
            .transport
            .lock()
            .map_err(|_| AdapterError::Unreachable("transport poisoned".into()))?;
        t.exchange(&line)
    }
}

impl Detector for ExternalDetector {
    fn capabilities(&self) -> Capabilities {
        self.caps.clone()
    }

    fn detect(&self, image: &Image) -> Result<Vec<Detection>, AdapterError> {
        let reply = self.call(&Request::Detect {
            image: encode_image(image)?,
        })?;
        parse_detect_reply(&reply)
    }

    fn supports_gradients(&self) -> bool {
        self.caps.supports_gradients
    }

    fn input_gradient(&self, image: &Image, upstream: f64) -> Result<Image, AdapterError> {
        if !self.caps.supports_gradients {
            return Err(AdapterError::NoGradientSupport);
        }
        let reply = self.call(&Request::Grad {
            image: encode_image(image)?,
            upstream,
        })?;
        parse_grad_reply(&reply, image.width(), image.height())
    }
}

/// Connects to `endpoint` and returns its declared capabilities.
pub fn external_detector_probe(endpoint: Endpoint) -> Result<Capabilities, AdapterError> {
    Ok(ExternalDetector::connect(endpoint)?.capabilities())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{ToyDetector, STOP_CLASS_ID};

    struct Scripted(Vec<String>);

    impl Transport for Scripted {
        fn exchange(&mut self, _request: &str) -> Result<String, AdapterError> {
            if self.0.is_empty() {
                return Err(AdapterError::Unreachable("script exhausted".into()));
            }
            Ok(self.0.remove(0))
        }
    }

    fn toy() -> ToyDetector {
        ToyDetector::train_synthetic(48, 36, 4, 5).unwrap()
    }

    fn fixture_image() -> Image {
        // 8-bit-representable so PNG transport is lossless.
        Image::from_fn(48, 36, 3, |x, y, c| ((x * 5 + y * 3 + c * 70) % 256) as f64 / 255.0)
    }

    #[test]
    fn loopback_probe_reports_no_gradients_and_resolution() {
        let caps = external_detector_probe(Endpoint::Loopback(WireServer::new(Box::new(toy())))).unwrap();
        assert!(!caps.supports_gradients);
        assert_eq!(caps.resolution, Some([48, 36]));
        assert_eq!(caps.class_map.get(&STOP_CLASS_ID).map(String::as_str), Some("stop"));
    }

    #[test]
    fn loopback_detect_equals_direct() {
        let direct = toy();
        let img = fixture_image();
        let remote = ExternalDetector::connect(Endpoint::Loopback(WireServer::new(Box::new(toy())))).unwrap();
        assert_eq!(remote.detect(&img).unwrap(), direct.detect(&img).unwrap());
        assert_eq!(remote.stop_confidence(&img).unwrap(), direct.stop_confidence(&img).unwrap());
        assert!(matches!(
            remote.input_gradient(&img, 1.0),
            Err(AdapterError::NoGradientSupport)
        ));
    }

    #[test]
    fn loopback_gradients_when_exposed() {
        let direct = toy();
        let img = fixture_image();
        let server = WireServer::new(Box::new(toy())).with_gradients();
        let remote = ExternalDetector::connect(Endpoint::Loopback(server)).unwrap();
        assert!(remote.supports_gradients());
        assert_eq!(remote.input_gradient(&img, 0.5).unwrap(), direct.input_gradient(&img, 0.5).unwrap());
    }

    #[test]
    fn malformed_probe_reply_is_protocol_error() {
        let r = ExternalDetector::connect(Endpoint::Custom(Box::new(Scripted(vec!["{nope".into()]))));
        assert!(matches!(r, Err(AdapterError::Protocol(_))));
    }

    #[test]
    fn malformed_detect_replies() {
        for bad in [
            "not json",
            "[]",
            r#"{"detections":[{"class_id":14,"confidence":1.5,"bbox":[0.5,0.5,0.1,0.1]}]}"#,
            r#"{"detections":[{"class_id":14,"confidence":0.5,"bbox":[0.5,0.5,0.1]}]}"#,
            r#"{"error":"model crashed"}"#,
        ] {
            assert!(matches!(parse_detect_reply(bad), Err(AdapterError::Protocol(_))), "{bad}");
        }
        let ok = parse_detect_reply(r#"{"detections":[{"class_id":14,"confidence":0.25,"bbox":[0.5,0.5,0.2,0.1]}]}"#).unwrap();
        assert_eq!(ok[0].confidence, 0.25);
    }

    #[test]
    fn missing_program_is_unreachable() {
        let r = external_detector_probe(Endpoint::command("/nonexistent/detector-binary --x").unwrap());
        assert!(matches!(r, Err(AdapterError::Unreachable(_))));
    }

    #[test]
    fn server_rejects_bad_requests() {
        let server = WireServer::new(Box::new(toy()));
        let reply = server.handle(r#"{"op":"fly"}"#);
        assert!(reply.contains("error"));
        let reply = server.handle(r#"{"op":"detect","image":"!!!"}"#);
        assert!(reply.contains("error"));
        let reply = server.handle(&format!(
            r#"{{"op":"grad","image":"{}","upstream":1.0}}"#,
            encode_image(&fixture_image()).unwrap()
        ));
        assert!(reply.contains("not supported"));
    }

    #[test]
    fn serve_loop_answers_each_line() {
        let server = WireServer::new(Box::new(toy()));
        let input = format!(
            "{}\n\n{}\n",
            r#"{"op":"probe"}"#,
            serde_json::to_string(&Request::Detect {
                image: encode_image(&fixture_image()).unwrap()
            })
            .unwrap()
        );
        let mut out = Vec::new();
        server.serve(input.as_bytes(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        parse_probe_reply(lines[0]).unwrap();
        assert_eq!(parse_detect_reply(lines[1]).unwrap().len(), 1);
    }
}

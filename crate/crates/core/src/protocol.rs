//! Out-of-process adapters for generators and SUTs.
//!
//! Every message is one frame (integers little-endian):
//!
//! | size | content                                                   |
//! |------|-----------------------------------------------------------|
//! | 4    | header length `h` (u32)                                   |
//! | h    | UTF-8 JSON header, always carrying `"type"` and `"id"`    |
//! | 8    | payload length `p` (u64)                                  |
//! | p    | zero or more concatenated tensors (see [`crate::tensor_io`]) |
//!
//! A response echoes the request's `type` and `id`, or has type `ERROR`
//! with `code` and `message`. Requests and their payloads:
//!
//! | type         | header fields | request payload          | response                                    |
//! |--------------|---------------|--------------------------|---------------------------------------------|
//! | `TOPOLOGY`   | -             | -                        | header `topology`, `differentiable`         |
//! | `SAMPLE`     | `seed`        | -                        | flat raw style `[Σd]`                        |
//! | `SYNTH`      | -             | flat style `[Σd]`        | image `[H, W, C]`                           |
//! | `JVP`        | -             | style, cotangent `[H,W,C]` | flat style gradient `[Σd]` (vector-Jacobian product) |
//! | `CAPS`       | -             | -                        | header `capabilities`                       |
//! | `FORWARD`    | -             | image `[H, W, C]`        | logits `[K]`                                |
//! | `GRAD_INPUT` | `target`      | image `[H, W, C]`        | gradient `[H, W, C]`                        |
//!
//! Error codes: `NOT_DIFFERENTIABLE`, `UNSUPPORTED`, `BAD_REQUEST`, `BACKEND`.

use std::io::{BufReader, BufWriter, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::domain::{Colorspace, ImageTensor, LogitVector, StyleState};
use crate::error::{Error, Result};
use crate::genbackend::{Generator, GeneratorTopology};
use crate::sut::{Sut, SutCapabilities};
use crate::tensor_io::{decode_tensor_list, encode_tensor};

/// Upper bound on header size, guarding against garbage length prefixes.
const MAX_HEADER: u32 = 16 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FrameType {
    Topology,
    Sample,
    Synth,
    Jvp,
    Error,
    Caps,
    Forward,
    GradInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn flat(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn image(img: &ImageTensor) -> Self {
        Self {
            shape: img.shape().to_vec(),
            values: img.data().to_vec(),
        }
    }

    fn into_image(self) -> Result<ImageTensor> {
        let [h, w, c] = self.shape[..] else {
            return Err(Error::Protocol(format!("expected rank-3 image, got shape {:?}", self.shape)));
        };
        let cs = match c {
            1 => Colorspace::Grayscale,
            3 => Colorspace::Rgb,
            _ => return Err(Error::Protocol(format!("image with {c} channels"))),
        };
        ImageTensor::new(h, w, cs, self.values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: FrameType,
    pub id: u64,
    /// Extra header fields beyond `type` and `id`.
    pub fields: Map<String, Value>,
    pub tensors: Vec<Tensor>,
}

impl Frame {
    pub fn new(kind: FrameType, id: u64) -> Self {
        Self {
            kind,
            id,
            fields: Map::new(),
            tensors: Vec::new(),
        }
    }

    pub fn field(mut self, key: &str, value: Value) -> Self {
        self.fields.insert(key.to_string(), value);
        self
    }

    pub fn tensor(mut self, t: Tensor) -> Self {
        self.tensors.push(t);
        self
    }

    fn error(id: u64, code: &str, message: impl Into<String>) -> Self {
        Self::new(FrameType::Error, id)
            .field("code", json!(code))
            .field("message", json!(message.into()))
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    let mut header = frame.fields.clone();
    header.insert("type".into(), serde_json::to_value(frame.kind)?);
    header.insert("id".into(), json!(frame.id));
    let header = serde_json::to_vec(&Value::Object(header))?;
    let mut payload = Vec::new();
    for t in &frame.tensors {
        payload.extend(encode_tensor(&t.shape, &t.values)?);
    }
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream before a frame starts.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>> {
    let mut len4 = [0u8; 4];
    match r.read_exact(&mut len4) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let hlen = u32::from_le_bytes(len4);
    if hlen > MAX_HEADER {
        return Err(Error::Protocol(format!("header length {hlen} exceeds limit")));
    }
    let mut header = vec![0u8; hlen as usize];
    r.read_exact(&mut header)?;
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let plen = usize::try_from(u64::from_le_bytes(len8))
        .map_err(|_| Error::Protocol("payload length overflows usize".into()))?;
    let mut payload = Vec::new();
    r.by_ref().take(plen as u64).read_to_end(&mut payload)?;
    if payload.len() != plen {
        return Err(Error::Protocol("stream ended inside payload".into()));
    }

    let Value::Object(mut fields) = serde_json::from_slice(&header)? else {
        return Err(Error::Protocol("frame header is not a JSON object".into()));
    };
    let kind: FrameType = serde_json::from_value(
        fields
            .remove("type")
            .ok_or_else(|| Error::Protocol("frame header lacks \"type\"".into()))?,
    )?;
    let id = fields
        .remove("id")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Protocol("frame header lacks integer \"id\"".into()))?;
    let tensors = decode_tensor_list(&payload)?
        .into_iter()
        .map(|(shape, vals)| Tensor {
            shape,
            values: vals.into_iter().map(f64::from).collect(),
        })
        .collect();
    Ok(Some(Frame {
        kind,
        id,
        fields,
        tensors,
    }))
}

struct Channel {
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    next_id: u64,
}

/// A request/response connection to an adapter process or socket.
pub struct Connection {
    channel: Mutex<Channel>,
    child: Option<Mutex<Child>>,
}

impl Connection {
    pub fn from_streams(reader: impl Read + Send + 'static, writer: impl Write + Send + 'static) -> Self {
        Self {
            channel: Mutex::new(Channel {
                reader: Box::new(BufReader::new(reader)),
                writer: Box::new(BufWriter::new(writer)),
                next_id: 1,
            }),
            child: None,
        }
    }

    #[cfg(unix)]
    pub fn unix(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let stream = std::os::unix::net::UnixStream::connect(path)?;
        let reader = stream.try_clone()?;
        Ok(Self::from_streams(reader, stream))
    }

    /// Spawns `program args…` and talks to it over stdin/stdout.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start adapter {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut conn = Self::from_streams(stdout, stdin);
        conn.child = Some(Mutex::new(child));
        Ok(conn)
    }

    pub fn request(&self, mut frame: Frame) -> Result<Frame> {
        let mut ch = self.channel.lock().map_err(|_| Error::Protocol("connection poisoned".into()))?;
        frame.id = ch.next_id;
        ch.next_id += 1;
        write_frame(&mut ch.writer, &frame)?;
        let resp = read_frame(&mut ch.reader)?
            .ok_or_else(|| Error::Protocol("adapter closed the connection".into()))?;
        if resp.id != frame.id {
            return Err(Error::Protocol(format!(
                "response id {} does not match request id {}",
                resp.id, frame.id
            )));
        }
        if resp.kind == FrameType::Error {
            let code = resp.fields.get("code").and_then(Value::as_str).unwrap_or("BACKEND");
            let msg = resp
                .fields
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string();
            return Err(match code {
                "NOT_DIFFERENTIABLE" => Error::NotDifferentiable,
                "UNSUPPORTED" => Error::Unsupported(msg),
                _ => Error::Backend(format!("{code}: {msg}")),
            });
        }
        if resp.kind != frame.kind {
            return Err(Error::Protocol(format!(
                "expected {:?} response, got {:?}",
                frame.kind, resp.kind
            )));
        }
        Ok(resp)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            if let Ok(mut ch) = self.channel.lock() {
                // Replacing the writer closes the child's stdin so it can exit.
                ch.writer = Box::new(std::io::sink());
            }
            if let Ok(mut c) = child.lock() {
                let _ = c.wait();
            }
        }
    }
}

fn one_tensor(frame: Frame) -> Result<Tensor> {
    let mut ts = frame.tensors;
    if ts.len() != 1 {
        return Err(Error::Protocol(format!("expected one tensor, got {}", ts.len())));
    }
    Ok(ts.remove(0))
}

fn take_field<T: for<'de> Deserialize<'de>>(frame: &Frame, key: &str) -> Result<T> {
    let v = frame
        .fields
        .get(key)
        .ok_or_else(|| Error::Protocol(format!("{:?} frame lacks {key:?}", frame.kind)))?;
    Ok(serde_json::from_value(v.clone())?)
}

/// Generator living behind a [`Connection`]. The topology is fetched once on
/// construction.
pub struct ExternalGenerator {
    conn: Connection,
    topology: GeneratorTopology,
    differentiable: bool,
}

impl ExternalGenerator {
    pub fn connect(conn: Connection) -> Result<Self> {
        let resp = conn.request(Frame::new(FrameType::Topology, 0))?;
        let topology: GeneratorTopology = take_field(&resp, "topology")?;
        topology.validate()?;
        let differentiable = resp
            .fields
            .get("differentiable")
            .and_then(Value::as_bool)
            .unwrap_or(false);
        Ok(Self {
            conn,
            topology,
            differentiable,
        })
    }

    fn style_tensor(&self, state: &StyleState) -> Result<Tensor> {
        self.topology.check_state(state)?;
        Ok(Tensor::flat(state.flatten()))
    }
}

impl Generator for ExternalGenerator {
    fn topology(&self) -> &GeneratorTopology {
        &self.topology
    }

    fn sample_raw(&self, seed: u64) -> Result<Vec<Vec<f64>>> {
        let resp = self
            .conn
            .request(Frame::new(FrameType::Sample, 0).field("seed", json!(seed)))?;
        StyleState::unflatten(&one_tensor(resp)?.values, &self.topology.layer_widths)
    }

    fn synthesize(&self, state: &StyleState) -> Result<ImageTensor> {
        let req = Frame::new(FrameType::Synth, 0).tensor(self.style_tensor(state)?);
        let img = one_tensor(self.conn.request(req)?)?.into_image()?;
        let s = &self.topology.image_shape;
        if img.shape() != [s.height, s.width, s.channels] {
            return Err(Error::Protocol(format!("adapter returned image of shape {:?}", img.shape())));
        }
        Ok(img)
    }

    fn differentiable(&self) -> bool {
        self.differentiable
    }

    fn style_vjp(&self, state: &StyleState, cotangent: &[f64]) -> Result<Vec<Vec<f64>>> {
        if !self.differentiable {
            return Err(Error::NotDifferentiable);
        }
        let s = &self.topology.image_shape;
        let req = Frame::new(FrameType::Jvp, 0)
            .tensor(self.style_tensor(state)?)
            .tensor(Tensor {
                shape: vec![s.height, s.width, s.channels],
                values: cotangent.to_vec(),
            });
        StyleState::unflatten(&one_tensor(self.conn.request(req)?)?.values, &self.topology.layer_widths)
    }
}

/// SUT living behind a [`Connection`]. Calls are serialized on the connection.
pub struct ExternalSut {
    conn: Connection,
    caps: SutCapabilities,
}

impl ExternalSut {
    pub fn connect(conn: Connection) -> Result<Self> {
        let resp = conn.request(Frame::new(FrameType::Caps, 0))?;
        let mut caps: SutCapabilities = take_field(&resp, "capabilities")?;
        caps.validate()?;
        caps.concurrent = false;
        Ok(Self { conn, caps })
    }
}

impl Sut for ExternalSut {
    fn capabilities(&self) -> SutCapabilities {
        self.caps
    }

    fn forward(&self, image: &ImageTensor) -> Result<LogitVector> {
        let resp = self
            .conn
            .request(Frame::new(FrameType::Forward, 0).tensor(Tensor::image(image)))?;
        LogitVector::new(one_tensor(resp)?.values, self.caps.target_index())
    }

    fn input_gradient(&self, image: &ImageTensor, target: usize) -> Result<Vec<f64>> {
        if !self.caps.differentiable {
            return Err(Error::NotDifferentiable);
        }
        let req = Frame::new(FrameType::GradInput, 0)
            .field("target", json!(target))
            .tensor(Tensor::image(image));
        let g = one_tensor(self.conn.request(req)?)?;
        if g.values.len() != image.len() {
            return Err(Error::Protocol("input gradient has the wrong length".into()));
        }
        Ok(g.values)
    }
}

/// What a server exposes; either side may be absent.
pub struct Endpoint<'a> {
    pub generator: Option<&'a dyn Generator>,
    pub sut: Option<&'a dyn Sut>,
}

fn error_frame(id: u64, e: &Error) -> Frame {
    let code = match e {
        Error::NotDifferentiable => "NOT_DIFFERENTIABLE",
        Error::Unsupported(_) => "UNSUPPORTED",
        Error::Protocol(_) | Error::Topology { .. } | Error::Shape(_) | Error::Validation(_) => "BAD_REQUEST",
        _ => "BACKEND",
    };
    Frame::error(id, code, e.to_string())
}

fn state_from(g: &dyn Generator, t: Tensor) -> Result<StyleState> {
    let vectors = StyleState::unflatten(&t.values, &g.topology().layer_widths)?;
    StyleState::new(vectors, 0, 1.0)
}

fn handle(ep: &Endpoint<'_>, req: Frame) -> Result<Frame> {
    let id = req.id;
    let kind = req.kind;
    let need_gen = || ep.generator.ok_or_else(|| Error::Unsupported("no generator on this endpoint".into()));
    let need_sut = || ep.sut.ok_or_else(|| Error::Unsupported("no SUT on this endpoint".into()));
    let reply = Frame::new(kind, id);
    match kind {
        FrameType::Topology => {
            let g = need_gen()?;
            Ok(reply
                .field("topology", serde_json::to_value(g.topology())?)
                .field("differentiable", json!(g.differentiable())))
        }
        FrameType::Sample => {
            let g = need_gen()?;
            let seed: u64 = take_field(&req, "seed")?;
            let raw = g.sample_raw(seed)?;
            Ok(reply.tensor(Tensor::flat(raw.concat())))
        }
        FrameType::Synth => {
            let g = need_gen()?;
            let state = state_from(g, one_tensor(req)?)?;
            Ok(reply.tensor(Tensor::image(&g.synthesize(&state)?)))
        }
        FrameType::Jvp => {
            let g = need_gen()?;
            let mut ts = req.tensors;
            if ts.len() != 2 {
                return Err(Error::Protocol("JVP expects style and cotangent tensors".into()));
            }
            let cot = ts.pop().expect("two tensors");
            let state = state_from(g, ts.pop().expect("two tensors"))?;
            let grad = g.style_vjp(&state, &cot.values)?;
            Ok(reply.tensor(Tensor::flat(grad.concat())))
        }
        FrameType::Caps => Ok(reply.field("capabilities", serde_json::to_value(need_sut()?.capabilities())?)),
        FrameType::Forward => {
            let s = need_sut()?;
            let img = one_tensor(req)?.into_image()?;
            Ok(reply.tensor(Tensor::flat(s.forward(&img)?.values)))
        }
        FrameType::GradInput => {
            let s = need_sut()?;
            let target: usize = take_field(&req, "target")?;
            let img = one_tensor(req)?.into_image()?;
            let g = s.input_gradient(&img, target)?;
            Ok(reply.tensor(Tensor {
                shape: img.shape().to_vec(),
                values: g,
            }))
        }
        FrameType::Error => Err(Error::Protocol("ERROR is not a request type".into())),
    }
}

/// Answers requests until the peer closes the stream. Backend failures are
/// reported as ERROR frames; only transport failures end the loop with `Err`.
pub fn serve(ep: &Endpoint<'_>, reader: impl Read, writer: impl Write) -> Result<()> {
    let mut r = BufReader::new(reader);
    let mut w = BufWriter::new(writer);
    while let Some(req) = read_frame(&mut r)? {
        let id = req.id;
        let resp = handle(ep, req).unwrap_or_else(|e| error_frame(id, &e));
        write_frame(&mut w, &resp)?;
    }
    Ok(())
}

pub fn serve_generator(g: &dyn Generator, reader: impl Read, writer: impl Write) -> Result<()> {
    serve(
        &Endpoint {
            generator: Some(g),
            sut: None,
        },
        reader,
        writer,
    )
}

pub fn serve_sut(s: &dyn Sut, reader: impl Read, writer: impl Write) -> Result<()> {
    serve(
        &Endpoint {
            generator: None,
            sut: Some(s),
        },
        reader,
        writer,
    )
}

//! Framed JSON transport shared by agents, the target registry and the
//! manager.
//!
//! Wire format: 4-byte big-endian payload length, then a UTF-8 JSON object.
//! Requests carry `op` and a correlation `id`; responses echo `id` and carry
//! `ok`, plus `code` and `message` when `ok` is false.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde_json::{json, Map, Value};
use thiserror::Error;

/// Largest accepted payload: 16 MiB.
pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("FrameTooLarge: {0} bytes exceeds the {MAX_FRAME} byte limit")]
    FrameTooLarge(u64),
    #[error("connection closed")]
    Closed,
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode_frame(payload: &[u8]) -> Result<Vec<u8>, WireError> {
    if payload.len() > MAX_FRAME {
        return Err(WireError::FrameTooLarge(payload.len() as u64));
    }
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Decodes one frame from the front of `buf`. Returns the payload and the
/// number of bytes consumed, or `None` if `buf` holds less than a full frame.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(Vec<u8>, usize)>, WireError> {
    let Some(header) = buf.get(..4) else {
        return Ok(None);
    };
    let len = u32::from_be_bytes(header.try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME {
        return Err(WireError::FrameTooLarge(len as u64));
    }
    Ok(buf.get(4..4 + len).map(|p| (p.to_vec(), 4 + len)))
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> Result<(), WireError> {
    let frame = encode_frame(payload)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. A clean end of stream before any header byte is
/// `Ok(None)`; the length is checked before the payload is read.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>, WireError> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Closed),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        return Err(WireError::FrameTooLarge(len as u64));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Closed,
        _ => e.into(),
    })?;
    Ok(Some(payload))
}

pub fn write_json(w: &mut impl Write, value: &Value) -> Result<(), WireError> {
    let payload = serde_json::to_vec(value).map_err(|e| WireError::InvalidPayload(e.to_string()))?;
    write_frame(w, &payload)
}

pub fn read_json(r: &mut impl Read) -> Result<Option<Value>, WireError> {
    match read_frame(r)? {
        None => Ok(None),
        Some(payload) => serde_json::from_slice(&payload)
            .map(Some)
            .map_err(|e| WireError::InvalidPayload(e.to_string())),
    }
}

/// Success response correlated to `id`, with extra fields merged in.
pub fn ok_response(id: &Value, fields: Value) -> Value {
    let mut map = Map::new();
    map.insert("id".into(), id.clone());
    map.insert("ok".into(), Value::Bool(true));
    if let Value::Object(extra) = fields {
        map.extend(extra);
    }
    Value::Object(map)
}

pub fn error_response(id: &Value, code: &str, message: &str) -> Value {
    json!({ "id": id, "ok": false, "code": code, "message": message })
}

/// Failed request as reported by the remote side.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{code}: {message}")]
pub struct RemoteError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach {endpoint}: {source}")]
    Unreachable {
        endpoint: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("response id {got} does not match request id {expected}")]
    Uncorrelated { expected: String, got: Value },
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Blocking request/response connection.
#[derive(Debug)]
pub struct Client {
    stream: TcpStream,
    endpoint: String,
}

impl Client {
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Client, ClientError> {
        let unreachable = |source: io::Error| ClientError::Unreachable {
            endpoint: endpoint.to_string(),
            source,
        };
        let addrs: Vec<SocketAddr> = endpoint.to_socket_addrs().map_err(unreachable)?.collect();
        let mut last = io::Error::new(io::ErrorKind::NotFound, "no address");
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(stream) => {
                    stream.set_nodelay(true).ok();
                    stream.set_read_timeout(Some(timeout * 10)).map_err(unreachable)?;
                    stream.set_write_timeout(Some(timeout * 10)).map_err(unreachable)?;
                    return Ok(Client {
                        stream,
                        endpoint: endpoint.to_string(),
                    });
                }
                Err(e) => last = e,
            }
        }
        Err(unreachable(last))
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Sends `op` with `fields` and returns the correlated response body.
    /// `ok: false` responses become `ClientError::Remote`.
    pub fn call(&mut self, op: &str, fields: Value) -> Result<Value, ClientError> {
        let id = format!("r{}", NEXT_ID.fetch_add(1, Ordering::Relaxed));
        let mut request = Map::new();
        request.insert("op".into(), Value::String(op.into()));
        request.insert("id".into(), Value::String(id.clone()));
        if let Value::Object(extra) = fields {
            request.extend(extra);
        }
        write_json(&mut self.stream, &Value::Object(request))?;
        let response = read_json(&mut self.stream)?.ok_or(WireError::Closed)?;
        if response.get("id").and_then(Value::as_str) != Some(id.as_str()) {
            return Err(ClientError::Uncorrelated {
                expected: id,
                got: response.get("id").cloned().unwrap_or(Value::Null),
            });
        }
        if response.get("ok").and_then(Value::as_bool) == Some(true) {
            Ok(response)
        } else {
            let text = |k: &str| {
                response
                    .get(k)
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string()
            };
            Err(RemoteError {
                code: text("code"),
                message: text("message"),
            }
            .into())
        }
    }
}

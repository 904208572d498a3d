//! Client side of the broker: a framed transport connection for apps and
//! providers, and an HTTP client for the admin API.

use std::path::Path;

use bytes::{Bytes, BytesMut};
use futures::{SinkExt, StreamExt};
use pinpoint_core::admin::{AssignRequest, GroupView, PolicyView, ServiceView, VersionReply};
use pinpoint_core::transport::{ClientInfo, GetServiceReply, Reply, Request, MAX_FRAME_LEN};
use pinpoint_core::vservices::ProviderEvent;
use pinpoint_core::{BrokerEvent, LocalHandle, NamespaceId, PolicyRule, SecurityLabel};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::{TcpStream, UnixStream};
use tokio_util::codec::{Framed, LengthDelimitedCodec};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connection failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("connection closed by broker")]
    Closed,
    #[error("malformed message: {0}")]
    Protocol(String),
    /// The broker answered with a non-ok status.
    #[error("{status}: {message}")]
    Status { status: String, message: String },
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("admin api returned {status}: {message}")]
    Admin { status: u16, message: String },
}

impl ClientError {
    /// Wire status code for broker errors, if this is one.
    pub fn status(&self) -> Option<&str> {
        match self {
            ClientError::Status { status, .. } => Some(status),
            _ => None,
        }
    }
}

trait Io: AsyncRead + AsyncWrite + Unpin + Send {}
impl<T: AsyncRead + AsyncWrite + Unpin + Send> Io for T {}

fn frame_codec() -> LengthDelimitedCodec {
    LengthDelimitedCodec::builder()
        .big_endian()
        .length_field_type::<u32>()
        .max_frame_length(MAX_FRAME_LEN)
        .new_codec()
}

fn reply_error(reply: &Reply) -> ClientError {
    let message = reply
        .payload
        .get("error")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    ClientError::Status { status: reply.status.clone(), message }
}

fn decode<T: DeserializeOwned>(v: Value) -> Result<T, ClientError> {
    serde_json::from_value(v).map_err(|e| ClientError::Protocol(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Hello {
    pub session: u64,
    pub uid: u32,
    pub label: SecurityLabel,
}

/// One authenticated session with the broker.
pub struct BrokerClient {
    framed: Framed<Box<dyn Io>, LengthDelimitedCodec>,
    hello: Hello,
}

impl BrokerClient {
    /// Connects to `addr` (`host:port` or `unix:/path`) and authenticates
    /// with `token`.
    pub async fn connect(addr: &str, token: &str) -> Result<Self, ClientError> {
        let io: Box<dyn Io> = match addr.strip_prefix("unix:") {
            Some(path) => Box::new(UnixStream::connect(Path::new(path)).await?),
            None => Box::new(TcpStream::connect(addr).await?),
        };
        let mut framed = Framed::new(io, frame_codec());
        let request = Request {
            handle: LocalHandle::REGISTRY,
            method: "connect".into(),
            payload: json!({ "token": token }),
        };
        let reply = exchange(&mut framed, &request).await?;
        if !reply.is_ok() {
            return Err(reply_error(&reply));
        }
        let hello = decode(reply.payload)?;
        Ok(Self { framed, hello })
    }

    pub fn hello(&self) -> &Hello {
        &self.hello
    }

    /// Sends one request and returns the broker's reply as-is.
    pub async fn transact_raw(&mut self, handle: LocalHandle, method: &str, payload: Value) -> Result<Reply, ClientError> {
        let request = Request { handle, method: method.into(), payload };
        exchange(&mut self.framed, &request).await
    }

    /// Like [`transact_raw`](Self::transact_raw), mapping error statuses to
    /// [`ClientError::Status`].
    pub async fn transact(&mut self, handle: LocalHandle, method: &str, payload: Value) -> Result<Value, ClientError> {
        let reply = self.transact_raw(handle, method, payload).await?;
        if reply.is_ok() {
            Ok(reply.payload)
        } else {
            Err(reply_error(&reply))
        }
    }

    async fn registry<T: DeserializeOwned>(&mut self, method: &str, payload: Value) -> Result<T, ClientError> {
        let v = self.transact(LocalHandle::REGISTRY, method, payload).await?;
        decode(v)
    }

    pub async fn get_service(&mut self, name: &str) -> Result<GetServiceReply, ClientError> {
        self.registry("get_service", json!({ "name": name })).await
    }

    pub async fn list_services(&mut self) -> Result<Vec<(String, NamespaceId)>, ClientError> {
        self.registry("list_services", Value::Null).await
    }

    pub async fn transfer_handle(&mut self, recipient_uid: u32, handle: LocalHandle) -> Result<LocalHandle, ClientError> {
        let v: Value = self
            .registry("transfer_handle", json!({ "recipient_uid": recipient_uid, "handle": handle }))
            .await?;
        decode(v["handle"].clone())
    }

    /// Publishes an app-owned node and returns the caller's handle to it.
    pub async fn publish(&mut self) -> Result<LocalHandle, ClientError> {
        let v: Value = self.registry("publish", Value::Null).await?;
        decode(v["handle"].clone())
    }

    /// Feeds a provider event to every instance of the matching family.
    /// Returns how many instances received it.
    pub async fn inject(&mut self, event: &ProviderEvent) -> Result<usize, ClientError> {
        let payload = serde_json::to_value(event).map_err(|e| ClientError::Protocol(e.to_string()))?;
        let v: Value = self.registry("inject", payload).await?;
        decode(v["delivered"].clone())
    }
}

async fn exchange(framed: &mut Framed<Box<dyn Io>, LengthDelimitedCodec>, request: &Request) -> Result<Reply, ClientError> {
    let body = serde_json::to_vec(request).map_err(|e| ClientError::Protocol(e.to_string()))?;
    framed.send(Bytes::from(body)).await?;
    match framed.next().await {
        Some(Ok(frame)) => serde_json::from_slice(&frame).map_err(|e| ClientError::Protocol(e.to_string())),
        Some(Err(e)) => Err(e.into()),
        None => Err(ClientError::Closed),
    }
}

/// HTTP client for the admin API.
#[derive(Debug, Clone)]
pub struct AdminClient {
    base: String,
    token: Option<String>,
    http: reqwest::Client,
}

impl AdminClient {
    /// `base` is e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>, token: Option<String>) -> Self {
        let base = base.into().trim_end_matches('/').to_string();
        Self { base, token, http: reqwest::Client::new() }
    }

    fn request(&self, method: reqwest::Method, path: &str) -> reqwest::RequestBuilder {
        let rb = self.http.request(method, format!("{}{}", self.base, path));
        match &self.token {
            Some(t) => rb.bearer_auth(t),
            None => rb,
        }
    }

    async fn send<T: DeserializeOwned>(&self, rb: reqwest::RequestBuilder) -> Result<T, ClientError> {
        let resp = rb.send().await?;
        let status = resp.status();
        if !status.is_success() {
            let body: Value = resp.json().await.unwrap_or(Value::Null);
            let message = body.get("error").and_then(Value::as_str).unwrap_or_default().to_string();
            return Err(ClientError::Admin { status: status.as_u16(), message });
        }
        Ok(resp.json().await?)
    }

    pub async fn services(&self) -> Result<Vec<ServiceView>, ClientError> {
        self.send(self.request(reqwest::Method::GET, "/v1/services")).await
    }

    pub async fn clients(&self) -> Result<Vec<ClientInfo>, ClientError> {
        self.send(self.request(reqwest::Method::GET, "/v1/clients")).await
    }

    pub async fn policy(&self) -> Result<PolicyView, ClientError> {
        self.send(self.request(reqwest::Method::GET, "/v1/policy")).await
    }

    pub async fn groups(&self) -> Result<Vec<GroupView>, ClientError> {
        self.send(self.request(reqwest::Method::GET, "/v1/groups")).await
    }

    pub async fn set_rule(&self, rule: &PolicyRule) -> Result<u64, ClientError> {
        let r: VersionReply = self.send(self.request(reqwest::Method::PUT, "/v1/policy/rules").json(rule)).await?;
        Ok(r.version)
    }

    pub async fn remove_rule(&self, uid: u32, service: &str) -> Result<u64, ClientError> {
        let path = format!("/v1/policy/rules/{uid}/{service}");
        let r: VersionReply = self.send(self.request(reqwest::Method::DELETE, &path)).await?;
        Ok(r.version)
    }

    pub async fn assign(&self, uid: u32, group: &str) -> Result<u64, ClientError> {
        let body = AssignRequest { uid, group: group.to_string() };
        let r: VersionReply = self.send(self.request(reqwest::Method::POST, "/v1/policy/assign").json(&body)).await?;
        Ok(r.version)
    }

    /// Opens the event stream. The first event is always the current policy
    /// version.
    pub async fn events(&self) -> Result<EventStream, ClientError> {
        let resp = self.request(reqwest::Method::GET, "/v1/events").send().await?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ClientError::Admin { status: status.as_u16(), message: String::new() });
        }
        Ok(EventStream { resp, buf: BytesMut::new() })
    }
}

/// Server-sent broker events, decoded one at a time.
pub struct EventStream {
    resp: reqwest::Response,
    buf: BytesMut,
}

impl EventStream {
    /// Next event, or `None` when the server closes the stream.
    pub async fn next_event(&mut self) -> Result<Option<BrokerEvent>, ClientError> {
        loop {
            while let Some(end) = find_blank_line(&self.buf) {
                let block = self.buf.split_to(end.0);
                let _ = self.buf.split_to(end.1);
                if let Some(ev) = parse_sse_block(&block)? {
                    return Ok(Some(ev));
                }
            }
            match self.resp.chunk().await? {
                Some(chunk) => self.buf.extend_from_slice(&chunk),
                None => return Ok(None),
            }
        }
    }
}

/// Returns (block length, separator length) of the first complete SSE block.
fn find_blank_line(buf: &[u8]) -> Option<(usize, usize)> {
    let lf = buf.windows(2).position(|w| w == b"\n\n").map(|i| (i, 2));
    let crlf = buf.windows(4).position(|w| w == b"\r\n\r\n").map(|i| (i, 4));
    match (lf, crlf) {
        (Some(a), Some(b)) => Some(if a.0 <= b.0 { a } else { b }),
        (a, b) => a.or(b),
    }
}

fn parse_sse_block(block: &[u8]) -> Result<Option<BrokerEvent>, ClientError> {
    let text = std::str::from_utf8(block).map_err(|e| ClientError::Protocol(e.to_string()))?;
    let data: Vec<&str> = text
        .lines()
        .filter_map(|l| l.strip_prefix("data:"))
        .map(|d| d.strip_prefix(' ').unwrap_or(d))
        .collect();
    if data.is_empty() {
        // comment or keep-alive
        return Ok(None);
    }
    serde_json::from_str(&data.join("\n"))
        .map(Some)
        .map_err(|e| ClientError::Protocol(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use pinpoint_core::transport::encode_frame;
    use tokio_util::codec::Encoder;

    #[test]
    fn framing_matches_core() {
        let body = br#"{"handle":0,"method":"connect","payload":{"token":"t"}}"#;
        let mut buf = BytesMut::new();
        frame_codec().encode(Bytes::from_static(body), &mut buf).unwrap();
        assert_eq!(&buf[..], &encode_frame(body)[..]);
    }

    #[test]
    fn sse_blocks() {
        let block = b"event: policy_version\ndata: {\"event\":\"policy_version\",\"version\":3}";
        assert_eq!(
            parse_sse_block(block).unwrap(),
            Some(BrokerEvent::PolicyVersion { version: 3 })
        );
        assert_eq!(parse_sse_block(b":\n").unwrap(), None);
        assert_eq!(find_blank_line(b"a\n\nb"), Some((1, 2)));
        assert_eq!(find_blank_line(b"a\r\n\r\nb"), Some((1, 4)));
        assert_eq!(find_blank_line(b"a\n"), None);
    }
}

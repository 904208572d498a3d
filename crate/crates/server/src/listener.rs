use std::fmt;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use futures::{SinkExt, StreamExt};
use pinpoint_core::transport::{Broker, ClientSession, Reply, Request, TransportError, MAX_FRAME_LEN};
use pinpoint_core::LocalHandle;
use serde::Deserialize;
use serde_json::json;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::{TcpListener, UnixListener};
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tokio_util::codec::{Framed, LengthDelimitedCodec};
use tracing::{debug, warn};

use crate::ServerError;

/// `[u32 big-endian length][body]` framing shared with the client crate.
pub fn frame_codec() -> LengthDelimitedCodec {
    LengthDelimitedCodec::builder()
        .big_endian()
        .length_field_type::<u32>()
        .max_frame_length(MAX_FRAME_LEN)
        .new_codec()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ListenAddr {
    Tcp(SocketAddr),
    Unix(PathBuf),
}

impl ListenAddr {
    pub fn parse(s: &str) -> Result<Self, ServerError> {
        if let Some(path) = s.strip_prefix("unix:") {
            return Ok(ListenAddr::Unix(PathBuf::from(path)));
        }
        s.parse().map(ListenAddr::Tcp).map_err(|_| ServerError::BadAddress(s.to_string()))
    }
}

impl fmt::Display for ListenAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ListenAddr::Tcp(a) => a.fmt(f),
            ListenAddr::Unix(p) => write!(f, "unix:{}", p.display()),
        }
    }
}

pub(crate) async fn serve(
    broker: Arc<Broker>,
    listen: &str,
    shutdown: watch::Receiver<bool>,
) -> Result<(ListenAddr, JoinHandle<()>), ServerError> {
    let bind_err = |source| ServerError::Bind { addr: listen.to_string(), source };
    match ListenAddr::parse(listen)? {
        ListenAddr::Tcp(addr) => {
            let listener = TcpListener::bind(addr).await.map_err(bind_err)?;
            let local = listener.local_addr().map_err(bind_err)?;
            let task = tokio::spawn(accept_loop(listener, broker, shutdown));
            Ok((ListenAddr::Tcp(local), task))
        }
        ListenAddr::Unix(path) => {
            if path.exists() {
                let _ = std::fs::remove_file(&path);
            }
            let listener = UnixListener::bind(&path).map_err(bind_err)?;
            let task = tokio::spawn(accept_loop(listener, broker, shutdown));
            Ok((ListenAddr::Unix(path), task))
        }
    }
}

trait Accept: Send + 'static {
    type Stream: AsyncRead + AsyncWrite + Unpin + Send + 'static;
    fn accept_stream(&self) -> impl std::future::Future<Output = std::io::Result<Self::Stream>> + Send;
}

impl Accept for TcpListener {
    type Stream = tokio::net::TcpStream;
    async fn accept_stream(&self) -> std::io::Result<Self::Stream> {
        self.accept().await.map(|(s, _)| s)
    }
}

impl Accept for UnixListener {
    type Stream = tokio::net::UnixStream;
    async fn accept_stream(&self) -> std::io::Result<Self::Stream> {
        self.accept().await.map(|(s, _)| s)
    }
}

async fn accept_loop<L: Accept>(listener: L, broker: Arc<Broker>, shutdown: watch::Receiver<bool>) {
    let mut stop = shutdown.clone();
    loop {
        tokio::select! {
            _ = stop.wait_for(|stop| *stop) => break,
            accepted = listener.accept_stream() => match accepted {
                Ok(stream) => {
                    let broker = broker.clone();
                    let rx = shutdown.clone();
                    tokio::spawn(async move { serve_connection(broker, stream, rx).await });
                }
                Err(e) => warn!(error = %e, "accept failed"),
            }
        }
    }
}

#[derive(Deserialize)]
struct ConnectPayload {
    token: String,
}

fn decode_request(bytes: &[u8]) -> Result<Request, TransportError> {
    serde_json::from_slice(bytes).map_err(|e| TransportError::BadRequest(e.to_string()))
}

fn encode_reply(reply: &Reply) -> bytes::Bytes {
    serde_json::to_vec(reply).expect("reply serializes").into()
}

/// Handles one client connection. The first frame must be a `connect`
/// request on handle 0 carrying the client's token.
async fn serve_connection<S>(broker: Arc<Broker>, stream: S, mut shutdown: watch::Receiver<bool>)
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    let mut framed = Framed::new(stream, frame_codec());

    let session = match framed.next().await {
        Some(Ok(bytes)) => match handshake(&broker, &bytes) {
            Ok(session) => {
                let identity = session.identity();
                let hello = Reply::ok(json!({
                    "session": session.id(),
                    "uid": identity.uid,
                    "label": identity.label,
                }));
                if framed.send(encode_reply(&hello)).await.is_err() {
                    broker.disconnect(&session);
                    return;
                }
                session
            }
            Err(e) => {
                let _ = framed.send(encode_reply(&Reply::error(&e))).await;
                return;
            }
        },
        _ => return,
    };
    debug!(session = ?session.id(), uid = session.identity().uid, "client connected");

    loop {
        let frame = tokio::select! {
            _ = shutdown.wait_for(|stop| *stop) => break,
            frame = framed.next() => frame,
        };
        let Some(Ok(bytes)) = frame else { break };
        let reply = match decode_request(&bytes) {
            Ok(request) => broker.handle_request(&session, &request),
            Err(e) => Reply::error(&e),
        };
        if framed.send(encode_reply(&reply)).await.is_err() {
            break;
        }
    }
    broker.disconnect(&session);
    debug!(session = ?session.id(), "client disconnected");
}

fn handshake(broker: &Broker, bytes: &[u8]) -> Result<ClientSession, TransportError> {
    let request = decode_request(bytes)?;
    if request.handle != LocalHandle::REGISTRY || request.method != "connect" {
        return Err(TransportError::BadRequest("first frame must be `connect` on handle 0".into()));
    }
    let payload: ConnectPayload =
        serde_json::from_value(request.payload).map_err(|e| TransportError::BadRequest(e.to_string()))?;
    broker.connect(&payload.token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bytes::BytesMut;
    use pinpoint_core::transport::encode_frame;
    use tokio_util::codec::{Decoder, Encoder};

    #[test]
    fn codec_matches_core_framing() {
        let body = br#"{"handle":0,"method":"whoami"}"#;
        let mut buf = BytesMut::new();
        frame_codec().encode(bytes::Bytes::from_static(body), &mut buf).unwrap();
        assert_eq!(&buf[..], &encode_frame(body)[..]);
        let decoded = frame_codec().decode(&mut BytesMut::from(&encode_frame(body)[..])).unwrap().unwrap();
        assert_eq!(&decoded[..], body);
    }

    #[test]
    fn listen_addr_parse() {
        assert_eq!(
            ListenAddr::parse("unix:/tmp/x.sock").unwrap(),
            ListenAddr::Unix(PathBuf::from("/tmp/x.sock"))
        );
        assert!(matches!(ListenAddr::parse("127.0.0.1:0").unwrap(), ListenAddr::Tcp(_)));
        assert!(ListenAddr::parse("localhost").is_err());
    }
}

//! Networked deployment: wire format, STA coordinator, and org client.
//!
//! # Framing
//!
//! Every message is one length-prefixed frame over a reliable byte stream:
//!
//! ```text
//! +--------------------+---------------------------+
//! | length (4 bytes BE) | record payload            |
//! +--------------------+---------------------------+
//! ```
//!
//! The payload is a canonical key-value record: a field count followed by
//! `key, tagged value` pairs. Values are unsigned integers, UTF-8 strings,
//! byte strings, or lists. The encoding is deterministic (writers emit
//! fields in a fixed order), self-describing, and language-neutral, and it
//! streams large `S`/`E` sequences without escaping.
//!
//! # Messages
//!
//! `HELLO`, `KEY_OFFER` (org-to-org only), `UPLOAD`, `ROUND_STATUS`,
//! `CLUSTERS`, `BUFFERS`, `ERROR`. Every message carries the protocol
//! version and the round id. Upload bodies never contain the shared key or
//! any plaintext element encoding; the transcript tests enforce that.

use std::io::{Read, Write};

use thiserror::Error;

use crate::ingest::OrgId;
use crate::privacy::{PairBuffer, SharedKey, StaUpload, PRP_LEN};

mod org;
mod sta;

pub use org::{fetch_key, run_org, serve_key_offers, KeySource, OrgConfig, OrgOutcome};
pub use sta::{serve_sta, StaConfig, StaOutcome};

pub const PROTOCOL_VERSION: u64 = 1;
/// Frames above this size are rejected outright.
pub const MAX_FRAME: u32 = 64 << 20;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("connection closed by peer")]
    ConnectionClosed,
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(u32),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("protocol version mismatch: ours {ours}, theirs {theirs}")]
    VersionMismatch { ours: u64, theirs: u64 },
    #[error("unexpected message: {0}")]
    Unexpected(String),
    #[error("remote error [{code}]: {msg}")]
    Remote { code: String, msg: String },
    #[error("round aborted: {0}")]
    Aborted(String),
    #[error("bad address {0:?}")]
    BadAddress(String),
    #[error("retries exhausted: {0}")]
    RetriesExhausted(String),
    #[error(transparent)]
    Privacy(#[from] crate::privacy::PrivacyError),
    #[error(transparent)]
    Collab(#[from] crate::collab::CollabError),
}

// ---------------------------------------------------------------------------
// Values and records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireValue {
    U64(u64),
    Str(String),
    Bytes(Vec<u8>),
    List(Vec<WireValue>),
}

const TAG_U64: u8 = 1;
const TAG_STR: u8 = 2;
const TAG_BYTES: u8 = 3;
const TAG_LIST: u8 = 4;

impl WireValue {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            WireValue::U64(v) => {
                out.push(TAG_U64);
                out.extend_from_slice(&v.to_be_bytes());
            }
            WireValue::Str(s) => {
                out.push(TAG_STR);
                out.extend_from_slice(&(s.len() as u32).to_be_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            WireValue::Bytes(b) => {
                out.push(TAG_BYTES);
                out.extend_from_slice(&(b.len() as u32).to_be_bytes());
                out.extend_from_slice(b);
            }
            WireValue::List(items) => {
                out.push(TAG_LIST);
                out.extend_from_slice(&(items.len() as u32).to_be_bytes());
                for item in items {
                    item.encode_into(out);
                }
            }
        }
    }

    fn decode_from(buf: &[u8], at: &mut usize) -> Result<WireValue, NetError> {
        let tag = *buf.get(*at).ok_or_else(|| malformed("truncated value tag"))?;
        *at += 1;
        match tag {
            TAG_U64 => {
                let v = take(buf, at, 8)?;
                Ok(WireValue::U64(u64::from_be_bytes(v.try_into().unwrap())))
            }
            TAG_STR => {
                let len = take_len(buf, at)?;
                let raw = take(buf, at, len)?;
                Ok(WireValue::Str(
                    String::from_utf8(raw.to_vec()).map_err(|_| malformed("bad utf-8"))?,
                ))
            }
            TAG_BYTES => {
                let len = take_len(buf, at)?;
                Ok(WireValue::Bytes(take(buf, at, len)?.to_vec()))
            }
            TAG_LIST => {
                let count = take_len(buf, at)?;
                let mut items = Vec::with_capacity(count.min(1 << 16));
                for _ in 0..count {
                    items.push(WireValue::decode_from(buf, at)?);
                }
                Ok(WireValue::List(items))
            }
            other => Err(malformed(&format!("unknown value tag {other}"))),
        }
    }
}

fn malformed(msg: &str) -> NetError {
    NetError::Malformed(msg.to_string())
}

fn take<'a>(buf: &'a [u8], at: &mut usize, len: usize) -> Result<&'a [u8], NetError> {
    let end = at.checked_add(len).ok_or_else(|| malformed("length overflow"))?;
    if end > buf.len() {
        return Err(malformed("truncated payload"));
    }
    let slice = &buf[*at..end];
    *at = end;
    Ok(slice)
}

fn take_len(buf: &[u8], at: &mut usize) -> Result<usize, NetError> {
    let raw = take(buf, at, 4)?;
    Ok(u32::from_be_bytes(raw.try_into().unwrap()) as usize)
}

/// An ordered list of `(key, value)` fields.
pub type Record = Vec<(String, WireValue)>;

pub fn encode_record(record: &Record) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(record.len() as u32).to_be_bytes());
    for (key, value) in record {
        out.extend_from_slice(&(key.len() as u32).to_be_bytes());
        out.extend_from_slice(key.as_bytes());
        value.encode_into(&mut out);
    }
    out
}

pub fn decode_record(buf: &[u8]) -> Result<Record, NetError> {
    let mut at = 0;
    let count = take_len(buf, &mut at)?;
    let mut record = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let klen = take_len(buf, &mut at)?;
        let key = String::from_utf8(take(buf, &mut at, klen)?.to_vec())
            .map_err(|_| malformed("bad key utf-8"))?;
        let value = WireValue::decode_from(buf, &mut at)?;
        record.push((key, value));
    }
    if at != buf.len() {
        return Err(malformed("trailing bytes after record"));
    }
    Ok(record)
}

// ---------------------------------------------------------------------------
// Frames
// ---------------------------------------------------------------------------

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> Result<(), NetError> {
    if body.len() as u64 > u64::from(MAX_FRAME) {
        return Err(NetError::FrameTooLarge(body.len() as u32));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>, NetError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            return Err(NetError::ConnectionClosed)
        }
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME {
        return Err(NetError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(body)
}

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

/// A round phase as reported in `ROUND_STATUS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Collecting,
    Computing,
    Delivered,
    Aborted,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Collecting => "collecting",
            Phase::Computing => "computing",
            Phase::Delivered => "delivered",
            Phase::Aborted => "aborted",
        }
    }

    fn parse(s: &str) -> Result<Self, NetError> {
        match s {
            "collecting" => Ok(Phase::Collecting),
            "computing" => Ok(Phase::Computing),
            "delivered" => Ok(Phase::Delivered),
            "aborted" => Ok(Phase::Aborted),
            other => Err(malformed(&format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Hello {
        round: u64,
        org: OrgId,
    },
    KeyOffer {
        round: u64,
        key: SharedKey,
    },
    Upload {
        round: u64,
        upload: StaUpload,
    },
    RoundStatus {
        round: u64,
        phase: Phase,
        uploads: u64,
        detail: String,
    },
    Clusters {
        round: u64,
        peers: Vec<OrgId>,
        outlier: bool,
        cluster: String,
        mode: String,
    },
    Buffers {
        round: u64,
        buffers: Vec<PairBuffer>,
    },
    Error {
        round: u64,
        code: String,
        msg: String,
    },
}

fn field<'a>(record: &'a Record, key: &str) -> Result<&'a WireValue, NetError> {
    record
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| malformed(&format!("missing field {key:?}")))
}

fn field_u64(record: &Record, key: &str) -> Result<u64, NetError> {
    match field(record, key)? {
        WireValue::U64(v) => Ok(*v),
        _ => Err(malformed(&format!("field {key:?} is not an integer"))),
    }
}

fn field_str<'a>(record: &'a Record, key: &str) -> Result<&'a str, NetError> {
    match field(record, key)? {
        WireValue::Str(s) => Ok(s),
        _ => Err(malformed(&format!("field {key:?} is not a string"))),
    }
}

fn field_bytes<'a>(record: &'a Record, key: &str) -> Result<&'a [u8], NetError> {
    match field(record, key)? {
        WireValue::Bytes(b) => Ok(b),
        _ => Err(malformed(&format!("field {key:?} is not bytes"))),
    }
}

fn field_list<'a>(record: &'a Record, key: &str) -> Result<&'a [WireValue], NetError> {
    match field(record, key)? {
        WireValue::List(items) => Ok(items),
        _ => Err(malformed(&format!("field {key:?} is not a list"))),
    }
}

/// Buffer entries travel as `prp value (16) || u32 BE length || ciphertext`
/// repeated.
fn encode_buffer_entries(entries: &[([u8; PRP_LEN], Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (value, ct) in entries {
        out.extend_from_slice(value);
        out.extend_from_slice(&(ct.len() as u32).to_be_bytes());
        out.extend_from_slice(ct);
    }
    out
}

fn decode_buffer_entries(mut buf: &[u8]) -> Result<Vec<([u8; PRP_LEN], Vec<u8>)>, NetError> {
    let mut entries = Vec::new();
    while !buf.is_empty() {
        if buf.len() < PRP_LEN + 4 {
            return Err(malformed("truncated buffer entry"));
        }
        let mut value = [0u8; PRP_LEN];
        value.copy_from_slice(&buf[..PRP_LEN]);
        let len =
            u32::from_be_bytes(buf[PRP_LEN..PRP_LEN + 4].try_into().unwrap()) as usize;
        if buf.len() < PRP_LEN + 4 + len {
            return Err(malformed("truncated buffer ciphertext"));
        }
        entries.push((value, buf[PRP_LEN + 4..PRP_LEN + 4 + len].to_vec()));
        buf = &buf[PRP_LEN + 4 + len..];
    }
    Ok(entries)
}

impl WireMessage {
    pub fn round(&self) -> u64 {
        match self {
            WireMessage::Hello { round, .. }
            | WireMessage::KeyOffer { round, .. }
            | WireMessage::Upload { round, .. }
            | WireMessage::RoundStatus { round, .. }
            | WireMessage::Clusters { round, .. }
            | WireMessage::Buffers { round, .. }
            | WireMessage::Error { round, .. } => *round,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            WireMessage::Hello { .. } => "HELLO",
            WireMessage::KeyOffer { .. } => "KEY_OFFER",
            WireMessage::Upload { .. } => "UPLOAD",
            WireMessage::RoundStatus { .. } => "ROUND_STATUS",
            WireMessage::Clusters { .. } => "CLUSTERS",
            WireMessage::Buffers { .. } => "BUFFERS",
            WireMessage::Error { .. } => "ERROR",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut record: Record = vec![
            ("type".into(), WireValue::Str(self.type_name().into())),
            ("version".into(), WireValue::U64(PROTOCOL_VERSION)),
            ("round".into(), WireValue::U64(self.round())),
        ];
        match self {
            WireMessage::Hello { org, .. } => {
                record.push(("org".into(), WireValue::Str(org.to_string())));
            }
            WireMessage::KeyOffer { key, .. } => {
                record.push(("key".into(), WireValue::Bytes(key.as_bytes().to_vec())));
            }
            WireMessage::Upload { upload, .. } => {
                let mut s = Vec::with_capacity(upload.s.len() * PRP_LEN);
                for v in &upload.s {
                    s.extend_from_slice(v);
                }
                record.push(("org".into(), WireValue::Str(upload.org.to_string())));
                record.push(("s".into(), WireValue::Bytes(s)));
                record.push((
                    "e".into(),
                    WireValue::List(
                        upload.e.iter().map(|c| WireValue::Bytes(c.clone())).collect(),
                    ),
                ));
            }
            WireMessage::RoundStatus { phase, uploads, detail, .. } => {
                record.push(("phase".into(), WireValue::Str(phase.as_str().into())));
                record.push(("uploads".into(), WireValue::U64(*uploads)));
                record.push(("detail".into(), WireValue::Str(detail.clone())));
            }
            WireMessage::Clusters { peers, outlier, cluster, mode, .. } => {
                record.push((
                    "peers".into(),
                    WireValue::List(
                        peers.iter().map(|o| WireValue::Str(o.to_string())).collect(),
                    ),
                ));
                record.push(("outlier".into(), WireValue::U64(u64::from(*outlier))));
                record.push(("cluster".into(), WireValue::Str(cluster.clone())));
                record.push(("mode".into(), WireValue::Str(mode.clone())));
            }
            WireMessage::Buffers { buffers, .. } => {
                record.push((
                    "sources".into(),
                    WireValue::List(
                        buffers
                            .iter()
                            .map(|b| WireValue::Str(b.source.to_string()))
                            .collect(),
                    ),
                ));
                record.push((
                    "entries".into(),
                    WireValue::List(
                        buffers
                            .iter()
                            .map(|b| WireValue::Bytes(encode_buffer_entries(&b.entries)))
                            .collect(),
                    ),
                ));
            }
            WireMessage::Error { code, msg, .. } => {
                record.push(("code".into(), WireValue::Str(code.clone())));
                record.push(("msg".into(), WireValue::Str(msg.clone())));
            }
        }
        encode_record(&record)
    }

    /// Decodes a frame body. `receiver` is needed to rebuild `BUFFERS`
    /// (the wire format does not repeat the receiver in every entry).
    pub fn decode(body: &[u8], receiver: Option<&OrgId>) -> Result<WireMessage, NetError> {
        let record = decode_record(body)?;
        let version = field_u64(&record, "version")?;
        if version != PROTOCOL_VERSION {
            return Err(NetError::VersionMismatch { ours: PROTOCOL_VERSION, theirs: version });
        }
        let round = field_u64(&record, "round")?;
        match field_str(&record, "type")? {
            "HELLO" => Ok(WireMessage::Hello {
                round,
                org: OrgId::new(field_str(&record, "org")?),
            }),
            "KEY_OFFER" => {
                let raw = field_bytes(&record, "key")?;
                let key: [u8; 16] =
                    raw.try_into().map_err(|_| malformed("key must be 16 bytes"))?;
                Ok(WireMessage::KeyOffer { round, key: SharedKey::from_bytes(key) })
            }
            "UPLOAD" => {
                let org = OrgId::new(field_str(&record, "org")?);
                let raw = field_bytes(&record, "s")?;
                if raw.len() % PRP_LEN != 0 {
                    return Err(malformed("S length not a multiple of 16"));
                }
                let s: Vec<[u8; PRP_LEN]> =
                    raw.chunks_exact(PRP_LEN).map(|c| c.try_into().unwrap()).collect();
                let e: Vec<Vec<u8>> = field_list(&record, "e")?
                    .iter()
                    .map(|v| match v {
                        WireValue::Bytes(b) => Ok(b.clone()),
                        _ => Err(malformed("E entries must be bytes")),
                    })
                    .collect::<Result<_, _>>()?;
                Ok(WireMessage::Upload { round, upload: StaUpload { org, s, e } })
            }
            "ROUND_STATUS" => Ok(WireMessage::RoundStatus {
                round,
                phase: Phase::parse(field_str(&record, "phase")?)?,
                uploads: field_u64(&record, "uploads")?,
                detail: field_str(&record, "detail")?.to_string(),
            }),
            "CLUSTERS" => Ok(WireMessage::Clusters {
                round,
                peers: field_list(&record, "peers")?
                    .iter()
                    .map(|v| match v {
                        WireValue::Str(s) => Ok(OrgId::new(s)),
                        _ => Err(malformed("peer ids must be strings")),
                    })
                    .collect::<Result<_, _>>()?,
                outlier: field_u64(&record, "outlier")? != 0,
                cluster: field_str(&record, "cluster")?.to_string(),
                mode: field_str(&record, "mode")?.to_string(),
            }),
            "BUFFERS" => {
                let receiver = receiver
                    .ok_or_else(|| malformed("BUFFERS needs a receiving org context"))?;
                let sources = field_list(&record, "sources")?;
                let entries = field_list(&record, "entries")?;
                if sources.len() != entries.len() {
                    return Err(malformed("sources/entries length mismatch"));
                }
                let mut buffers = Vec::with_capacity(sources.len());
                for (src, ents) in sources.iter().zip(entries) {
                    let (WireValue::Str(source), WireValue::Bytes(raw)) = (src, ents) else {
                        return Err(malformed("bad BUFFERS payload"));
                    };
                    buffers.push(PairBuffer {
                        receiver: receiver.clone(),
                        source: OrgId::new(source),
                        entries: decode_buffer_entries(raw)?,
                    });
                }
                Ok(WireMessage::Buffers { round, buffers })
            }
            "ERROR" => Ok(WireMessage::Error {
                round,
                code: field_str(&record, "code")?.to_string(),
                msg: field_str(&record, "msg")?.to_string(),
            }),
            other => Err(NetError::Unexpected(other.to_string())),
        }
    }
}

/// Sends one message as a frame.
pub fn send<W: Write>(w: &mut W, msg: &WireMessage) -> Result<(), NetError> {
    write_frame(w, &msg.encode())
}

/// Receives one message. Returns the raw frame body too, for transcripts.
pub fn recv<R: Read>(
    r: &mut R,
    receiver: Option<&OrgId>,
) -> Result<(WireMessage, Vec<u8>), NetError> {
    let body = read_frame(r)?;
    let msg = WireMessage::decode(&body, receiver)?;
    Ok((msg, body))
}

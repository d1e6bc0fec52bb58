//! Wire format shared by every transport.
//!
//! Frame: `"FJL1"`, one kind byte, a big-endian `u32` payload length, then the
//! payload. Inside payloads integers and floats are little-endian; strings and
//! float vectors carry a `u32` element count. See `docs/protocol.md`.

use std::collections::BTreeMap;
use std::io::Read;

use super::aggregate::GradientUpdate;
use crate::{Error, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"FJL1";
pub const FRAME_HEADER_LEN: usize = 9;
/// Upper bound on a single payload, to reject garbage lengths early.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Register = 1,
    ModelBroadcast = 2,
    GradUpload = 3,
    RoundEnd = 4,
    Shutdown = 5,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            1 => MessageKind::Register,
            2 => MessageKind::ModelBroadcast,
            3 => MessageKind::GradUpload,
            4 => MessageKind::RoundEnd,
            5 => MessageKind::Shutdown,
            other => return Err(Error::Version(format!("unknown message kind {other}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientStats {
    pub local_loss: f64,
    pub n_samples: u64,
}

/// Coordinator summary of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u32,
    pub global_loss: f64,
    pub global_pck: f64,
    pub spearman_loss_metric: f64,
    pub per_client: BTreeMap<String, ClientStats>,
    pub wall_time: f64,
}

impl RoundReport {
    /// Bitwise equality of everything except the wall-clock time.
    pub fn same_outcome(&self, other: &RoundReport) -> bool {
        let bits = |r: &RoundReport| {
            (
                r.round,
                r.global_loss.to_bits(),
                r.global_pck.to_bits(),
                r.spearman_loss_metric.to_bits(),
                r.per_client
                    .iter()
                    .map(|(k, s)| (k.clone(), s.local_loss.to_bits(), s.n_samples))
                    .collect::<Vec<_>>(),
            )
        };
        bits(self) == bits(other)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Register {
        client_id: String,
    },
    /// Global parameters, plus last round's peer snapshots in personalized mode.
    ModelBroadcast {
        round: u32,
        layout_hash: u64,
        params: Vec<f64>,
        peers: Vec<Vec<f64>>,
    },
    GradUpload(GradientUpdate),
    RoundEnd(RoundReport),
    Shutdown,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Register { .. } => MessageKind::Register,
            Message::ModelBroadcast { .. } => MessageKind::ModelBroadcast,
            Message::GradUpload(_) => MessageKind::GradUpload,
            Message::RoundEnd(_) => MessageKind::RoundEnd,
            Message::Shutdown => MessageKind::Shutdown,
        }
    }

    pub fn round(&self) -> Option<u32> {
        match self {
            Message::ModelBroadcast { round, .. } => Some(*round),
            Message::GradUpload(u) => Some(u.round),
            Message::RoundEnd(r) => Some(r.round),
            Message::Register { .. } | Message::Shutdown => None,
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn vec(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Framing("truncated payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Protocol("string is not UTF-8".into()))
    }
    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Framing("vector too long".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn encode_payload(msg: &Message) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    match msg {
        Message::Register { client_id } => w.str(client_id),
        Message::ModelBroadcast {
            round,
            layout_hash,
            params,
            peers,
        } => {
            w.u32(*round);
            w.u64(*layout_hash);
            w.u32(1 + peers.len() as u32);
            w.vec(params);
            for p in peers {
                w.vec(p);
            }
        }
        Message::GradUpload(u) => {
            w.str(&u.client_id);
            w.u32(u.round);
            w.u64(u.n_samples);
            w.f64(u.local_loss);
            w.u64(u.layout_hash);
            w.vec(&u.delta);
        }
        Message::RoundEnd(r) => {
            w.u32(r.round);
            w.f64(r.global_loss);
            w.f64(r.global_pck);
            w.f64(r.spearman_loss_metric);
            w.f64(r.wall_time);
            w.u32(r.per_client.len() as u32);
            for (id, s) in &r.per_client {
                w.str(id);
                w.f64(s.local_loss);
                w.u64(s.n_samples);
            }
        }
        Message::Shutdown => {}
    }
    w.0
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    let payload = encode_payload(msg);
    let mut frame = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    frame.extend_from_slice(FRAME_MAGIC);
    frame.push(msg.kind() as u8);
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    frame
}

/// Validate a frame header, returning the kind and the declared payload length.
pub fn decode_header(header: &[u8]) -> Result<(MessageKind, usize)> {
    if header.len() < FRAME_HEADER_LEN {
        return Err(Error::Framing("truncated frame header".into()));
    }
    if &header[..4] != FRAME_MAGIC {
        return Err(Error::Protocol("bad magic".into()));
    }
    let kind = MessageKind::from_byte(header[4])?;
    let len = u32::from_be_bytes(header[5..9].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::Framing(format!("payload length {len} exceeds limit")));
    }
    Ok((kind, len))
}

pub fn decode_message(frame: &[u8]) -> Result<Message> {
    let (kind, len) = decode_header(frame)?;
    let body = &frame[FRAME_HEADER_LEN..];
    if body.len() < len {
        return Err(Error::Framing(format!(
            "truncated payload: expected {len} bytes, got {}",
            body.len()
        )));
    }
    if body.len() > len {
        return Err(Error::Framing(format!("{} bytes after payload", body.len() - len)));
    }
    let mut r = Reader { buf: body, pos: 0 };
    let msg = match kind {
        MessageKind::Register => Message::Register { client_id: r.str()? },
        MessageKind::ModelBroadcast => {
            let round = r.u32()?;
            let layout_hash = r.u64()?;
            let count = r.u32()? as usize;
            if count == 0 {
                return Err(Error::Protocol("broadcast without parameters".into()));
            }
            let params = r.vec()?;
            let peers = (1..count).map(|_| r.vec()).collect::<Result<_>>()?;
            Message::ModelBroadcast {
                round,
                layout_hash,
                params,
                peers,
            }
        }
        MessageKind::GradUpload => {
            let client_id = r.str()?;
            let round = r.u32()?;
            let n_samples = r.u64()?;
            let local_loss = r.f64()?;
            let layout_hash = r.u64()?;
            let delta = r.vec()?;
            Message::GradUpload(GradientUpdate {
                client_id,
                round,
                delta,
                n_samples,
                local_loss,
                layout_hash,
            })
        }
        MessageKind::RoundEnd => {
            let round = r.u32()?;
            let global_loss = r.f64()?;
            let global_pck = r.f64()?;
            let spearman_loss_metric = r.f64()?;
            let wall_time = r.f64()?;
            let n = r.u32()? as usize;
            let mut per_client = BTreeMap::new();
            for _ in 0..n {
                let id = r.str()?;
                let local_loss = r.f64()?;
                let n_samples = r.u64()?;
                per_client.insert(id, ClientStats { local_loss, n_samples });
            }
            Message::RoundEnd(RoundReport {
                round,
                global_loss,
                global_pck,
                spearman_loss_metric,
                per_client,
                wall_time,
            })
        }
        MessageKind::Shutdown => Message::Shutdown,
    };
    if r.pos != body.len() {
        return Err(Error::Framing(format!(
            "{} unparsed payload bytes",
            body.len() - r.pos
        )));
    }
    Ok(msg)
}

/// Read one complete frame from a byte stream.
pub fn read_frame(stream: &mut impl Read) -> Result<Vec<u8>> {
    let mut frame = vec![0u8; FRAME_HEADER_LEN];
    stream.read_exact(&mut frame)?;
    let (_, len) = decode_header(&frame)?;
    frame.resize(FRAME_HEADER_LEN + len, 0);
    stream.read_exact(&mut frame[FRAME_HEADER_LEN..])?;
    Ok(frame)
}

/// Check that a frame carries nothing but protocol scalars and
/// parameter-layout-shaped vectors of length `n_params`.
pub fn audit_frame(frame: &[u8], n_params: usize, layout_hash: u64) -> Result<()> {
    let check = |what: &str, len: usize| {
        if len == n_params {
            Ok(())
        } else {
            Err(Error::Protocol(format!(
                "{what} has {len} values, parameter layout has {n_params}"
            )))
        }
    };
    match decode_message(frame)? {
        Message::ModelBroadcast {
            params,
            peers,
            layout_hash: h,
            ..
        } => {
            if h != layout_hash {
                return Err(Error::Protocol("broadcast layout hash mismatch".into()));
            }
            check("broadcast parameters", params.len())?;
            for p in &peers {
                check("peer snapshot", p.len())?;
            }
        }
        Message::GradUpload(u) => {
            if u.layout_hash != layout_hash {
                return Err(Error::Protocol("update layout hash mismatch".into()));
            }
            check("update delta", u.delta.len())?;
        }
        Message::Register { .. } | Message::RoundEnd(_) | Message::Shutdown => {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_frame_is_nineteen_bytes() {
        let f = encode_message(&Message::Register {
            client_id: "robotA".into(),
        });
        assert_eq!(f.len(), 19);
        assert_eq!(&f[..4], b"FJL1");
        assert_eq!(f[4], 1);
        assert_eq!(&f[5..9], &[0, 0, 0, 10]);
    }

    #[test]
    fn bad_magic_truncation_and_unknown_kind() {
        let mut f = encode_message(&Message::Shutdown);
        assert!(decode_message(&f).is_ok());
        f[0] = b'X';
        let err = decode_message(&f).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)) && err.to_string().contains("bad magic"));

        let f = encode_message(&Message::Register { client_id: "abc".into() });
        assert!(matches!(decode_message(&f[..f.len() - 1]), Err(Error::Framing(_))));
        assert!(matches!(decode_message(&f[..5]), Err(Error::Framing(_))));

        let mut f = encode_message(&Message::Shutdown);
        f[4] = 9;
        assert!(matches!(decode_message(&f), Err(Error::Version(_))));
    }

    #[test]
    fn broadcast_round_trip_with_peers() {
        let m = Message::ModelBroadcast {
            round: 7,
            layout_hash: 0xdead_beef,
            params: vec![1.0, -2.5, 3.25],
            peers: vec![vec![0.0, 1.0, 2.0], vec![f64::MIN_POSITIVE, -0.0, 5.0]],
        };
        assert_eq!(decode_message(&encode_message(&m)).unwrap(), m);
    }

    #[test]
    fn audit_flags_off_layout_vectors() {
        let good = encode_message(&Message::GradUpload(GradientUpdate {
            client_id: "c".into(),
            round: 0,
            delta: vec![0.0; 4],
            n_samples: 1,
            local_loss: 0.5,
            layout_hash: 9,
        }));
        assert!(audit_frame(&good, 4, 9).is_ok());
        assert!(audit_frame(&good, 5, 9).is_err());
        assert!(audit_frame(&good, 4, 8).is_err());
    }
}

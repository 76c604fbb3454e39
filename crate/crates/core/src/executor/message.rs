use crate::error::{Error, Result};

/// Fixed bytes ahead of the payload: kind, source, step, group count.
pub const HEADER_BYTES: usize = 1 + 2 + 4 + 2;
/// Per-entry bytes ahead of the values: the group index.
pub const ENTRY_HEADER_BYTES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    ClsForward = 1,
    ClsGrad = 2,
    Control = 3,
}

impl TryFrom<u8> for MessageKind {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(MessageKind::ClsForward),
            2 => Ok(MessageKind::ClsGrad),
            3 => Ok(MessageKind::Control),
            other => Err(Error::Protocol(format!("unknown message kind {other}"))),
        }
    }
}

/// The only thing workers ever exchange.
///
/// Wire layout, little-endian: `u8 kind, u16 source, u32 step, u16 count`,
/// then `count` entries of `u16 group_index` followed by `dim` f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerMessage {
    pub kind: MessageKind,
    pub source: u16,
    pub step: u32,
    pub payload: Vec<(u16, Vec<f64>)>,
}

impl WorkerMessage {
    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES
            + self
                .payload
                .iter()
                .map(|(_, v)| ENTRY_HEADER_BYTES + 8 * v.len())
                .sum::<usize>()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.source.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u16).to_le_bytes());
        for (group, values) in &self.payload {
            out.extend_from_slice(&group.to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a message whose entries each carry `dim` values.
    pub fn decode(bytes: &[u8], dim: usize) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Protocol(format!(
                "message of {} bytes is truncated",
                bytes.len()
            )));
        }
        let kind = MessageKind::try_from(bytes[0])?;
        let source = u16::from_le_bytes([bytes[1], bytes[2]]);
        let step = u32::from_le_bytes([bytes[3], bytes[4], bytes[5], bytes[6]]);
        let count = u16::from_le_bytes([bytes[7], bytes[8]]) as usize;
        let entry = ENTRY_HEADER_BYTES + 8 * dim;
        if bytes.len() != HEADER_BYTES + count * entry {
            return Err(Error::Protocol(format!(
                "message declares {count} groups of dim {dim} but has {} bytes",
                bytes.len()
            )));
        }
        let payload = bytes[HEADER_BYTES..]
            .chunks_exact(entry)
            .map(|chunk| {
                let group = u16::from_le_bytes([chunk[0], chunk[1]]);
                let values = chunk[ENTRY_HEADER_BYTES..]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect();
                (group, values)
            })
            .collect();
        Ok(Self {
            kind,
            source,
            step,
            payload,
        })
    }
}

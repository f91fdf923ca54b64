//! Host side of the serial link to the rig microcontroller.
//!
//! Frame layout on the wire:
//!
//! ```text
//! 0xAA | msg_type | len | payload[len] | xor(msg_type, len, payload...)
//! ```
//!
//! Multi-byte sensor fields are big-endian.

use thiserror::Error;

pub const SYNC: u8 = 0xAA;

pub const DISPENSE: u8 = 0x01;
pub const SET_LIGHT: u8 = 0x02;
pub const SET_FANS: u8 = 0x03;
pub const QUERY_SENSORS: u8 = 0x04;
pub const BUTTON: u8 = 0x81;
pub const PIEZO_HIT: u8 = 0x82;
pub const SENSORS: u8 = 0x83;
pub const DISPENSE_DONE: u8 = 0x84;

pub const DEFAULT_CONFIRM_WINDOW_MS: u64 = 500;
pub const DEFAULT_MAX_RETRIES: u32 = 3;

/// A decoded command (host to rig) or event (rig to host).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Dispense { degrees: u8 },
    SetLight { on: bool },
    SetFans { on: bool },
    QuerySensors,
    Button { id: u8 },
    PiezoHit,
    Sensors { temp_centi_c: i16, photo: u16 },
    DispenseDone,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("payload of {0} bytes exceeds the 255-byte frame limit")]
    PayloadTooLong(usize),
    #[error("unknown message type 0x{0:02X}")]
    UnknownType(u8),
    #[error("payload for type 0x{msg_type:02X} does not match its schema ({len} bytes)")]
    BadPayload { msg_type: u8, len: usize },
}

impl WireMessage {
    pub fn msg_type(&self) -> u8 {
        match self {
            WireMessage::Dispense { .. } => DISPENSE,
            WireMessage::SetLight { .. } => SET_LIGHT,
            WireMessage::SetFans { .. } => SET_FANS,
            WireMessage::QuerySensors => QUERY_SENSORS,
            WireMessage::Button { .. } => BUTTON,
            WireMessage::PiezoHit => PIEZO_HIT,
            WireMessage::Sensors { .. } => SENSORS,
            WireMessage::DispenseDone => DISPENSE_DONE,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        match *self {
            WireMessage::Dispense { degrees } => vec![degrees],
            WireMessage::SetLight { on } | WireMessage::SetFans { on } => vec![on as u8],
            WireMessage::Button { id } => vec![id],
            WireMessage::Sensors { temp_centi_c, photo } => {
                let mut p = temp_centi_c.to_be_bytes().to_vec();
                p.extend_from_slice(&photo.to_be_bytes());
                p
            }
            WireMessage::QuerySensors | WireMessage::PiezoHit | WireMessage::DispenseDone => {
                Vec::new()
            }
        }
    }

    /// Interprets a checksum-valid frame body according to the per-type schema.
    pub fn from_parts(msg_type: u8, payload: &[u8]) -> Result<Self, WireError> {
        let bad = || WireError::BadPayload {
            msg_type,
            len: payload.len(),
        };
        let flag = |p: &[u8]| match p {
            [0] => Ok(false),
            [1] => Ok(true),
            _ => Err(bad()),
        };
        match msg_type {
            DISPENSE => match payload {
                [d] => Ok(WireMessage::Dispense { degrees: *d }),
                _ => Err(bad()),
            },
            SET_LIGHT => Ok(WireMessage::SetLight { on: flag(payload)? }),
            SET_FANS => Ok(WireMessage::SetFans { on: flag(payload)? }),
            QUERY_SENSORS | PIEZO_HIT | DISPENSE_DONE if !payload.is_empty() => Err(bad()),
            QUERY_SENSORS => Ok(WireMessage::QuerySensors),
            PIEZO_HIT => Ok(WireMessage::PiezoHit),
            DISPENSE_DONE => Ok(WireMessage::DispenseDone),
            BUTTON => match payload {
                [id] if *id <= 2 => Ok(WireMessage::Button { id: *id }),
                _ => Err(bad()),
            },
            SENSORS => match payload {
                [t0, t1, p0, p1] => Ok(WireMessage::Sensors {
                    temp_centi_c: i16::from_be_bytes([*t0, *t1]),
                    photo: u16::from_be_bytes([*p0, *p1]),
                }),
                _ => Err(bad()),
            },
            other => Err(WireError::UnknownType(other)),
        }
    }

    /// Checks invariants a typed value can still violate (button id range).
    pub fn validate(&self) -> Result<(), WireError> {
        match *self {
            WireMessage::Button { id } if id > 2 => Err(WireError::BadPayload {
                msg_type: BUTTON,
                len: 1,
            }),
            _ => Ok(()),
        }
    }
}

pub fn checksum(msg_type: u8, payload: &[u8]) -> u8 {
    payload
        .iter()
        .fold(msg_type ^ payload.len() as u8, |acc, b| acc ^ b)
}

/// Frames an arbitrary type byte and payload.
pub fn encode_frame(msg_type: u8, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    if payload.len() > 255 {
        return Err(WireError::PayloadTooLong(payload.len()));
    }
    let mut out = Vec::with_capacity(payload.len() + 4);
    out.push(SYNC);
    out.push(msg_type);
    out.push(payload.len() as u8);
    out.extend_from_slice(payload);
    out.push(checksum(msg_type, payload));
    Ok(out)
}

pub fn encode_msg(msg: &WireMessage) -> Result<Vec<u8>, WireError> {
    msg.validate()?;
    encode_frame(msg.msg_type(), &msg.payload())
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct DecoderDiagnostics {
    pub frames_ok: u64,
    pub bad_checksum: u64,
    /// Number of times garbage had to be skipped to find a sync byte.
    pub resync_count: u64,
    pub unknown_type: u64,
    pub bad_payload: u64,
}

/// Incremental frame parser. Accepts arbitrary chunk boundaries and never
/// fails on wire garbage; problems are reported through [`DecoderDiagnostics`].
#[derive(Debug, Default, Clone)]
pub struct Decoder {
    buf: Vec<u8>,
    diag: DecoderDiagnostics,
}

impl Decoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn diagnostics(&self) -> DecoderDiagnostics {
        self.diag
    }

    /// Bytes held back waiting for the rest of a frame.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    pub fn feed(&mut self, bytes: &[u8]) -> Vec<WireMessage> {
        self.buf.extend_from_slice(bytes);
        let mut out = Vec::new();
        let mut pos = 0;
        loop {
            match self.buf[pos..].iter().position(|&b| b == SYNC) {
                None => {
                    if pos < self.buf.len() {
                        self.diag.resync_count += 1;
                    }
                    pos = self.buf.len();
                    break;
                }
                Some(0) => {}
                Some(skip) => {
                    self.diag.resync_count += 1;
                    pos += skip;
                }
            }
            let rest = &self.buf[pos..];
            if rest.len() < 3 {
                break;
            }
            let msg_type = rest[1];
            let len = rest[2] as usize;
            if rest.len() < len + 4 {
                break;
            }
            let payload = &rest[3..3 + len];
            if checksum(msg_type, payload) != rest[3 + len] {
                self.diag.bad_checksum += 1;
                // rescan from the byte after this sync
                pos += 1;
                continue;
            }
            match WireMessage::from_parts(msg_type, payload) {
                Ok(m) => {
                    self.diag.frames_ok += 1;
                    out.push(m);
                }
                Err(WireError::UnknownType(_)) => self.diag.unknown_type += 1,
                Err(_) => self.diag.bad_payload += 1,
            }
            pos += len + 4;
        }
        self.buf.drain(..pos);
        out
    }
}

/// Convenience wrapper over a caller-held decoder state.
pub fn feed_decoder(
    state: &mut Decoder,
    bytes: &[u8],
) -> (Vec<WireMessage>, DecoderDiagnostics) {
    let msgs = state.feed(bytes);
    (msgs, state.diagnostics())
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LinkError {
    #[error("link closed after {attempts} dispense attempt(s)")]
    Closed { attempts: u32 },
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// A byte link to the rig driven in simulated time.
pub trait Link {
    fn now_ms(&self) -> u64;
    fn send(&mut self, msg: &WireMessage) -> Result<(), LinkError>;
    /// Returns the next message from the rig arriving no later than
    /// `deadline_ms`, advancing simulated time to its arrival. Returns `None`
    /// with the clock at `deadline_ms` when nothing arrives.
    fn recv_until(&mut self, deadline_ms: u64) -> Result<Option<(u64, WireMessage)>, LinkError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct DispenseOutcome {
    pub confirmed: bool,
    pub attempts: u32,
    pub t_confirm_ms: Option<u64>,
}

/// Sends DISPENSE and waits for the piezo confirmation, retrying on a miss.
///
/// Messages other than PIEZO_HIT that arrive during the wait are consumed by
/// the link as usual; this procedure only watches for the confirmation.
pub fn dispense_confirmed<L: Link + ?Sized>(
    link: &mut L,
    degrees: u8,
    max_retries: u32,
    confirm_window_ms: u64,
) -> Result<DispenseOutcome, LinkError> {
    let mut attempts = 0;
    while attempts <= max_retries {
        link.send(&WireMessage::Dispense { degrees })
            .map_err(|e| closed_with(e, attempts))?;
        attempts += 1;
        let deadline = link.now_ms() + confirm_window_ms;
        loop {
            match link
                .recv_until(deadline)
                .map_err(|e| closed_with(e, attempts))?
            {
                Some((t, WireMessage::PiezoHit)) => {
                    return Ok(DispenseOutcome {
                        confirmed: true,
                        attempts,
                        t_confirm_ms: Some(t),
                    })
                }
                Some(_) => continue,
                None => break,
            }
        }
    }
    Ok(DispenseOutcome {
        confirmed: false,
        attempts,
        t_confirm_ms: None,
    })
}

fn closed_with(e: LinkError, attempts: u32) -> LinkError {
    match e {
        LinkError::Closed { .. } => LinkError::Closed { attempts },
        other => other,
    }
}

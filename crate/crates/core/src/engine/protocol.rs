//! JSON messages exchanged with the game client. Every message is one JSON
//! object with `"v": 1` and a `"type"` tag.

use serde::{Deserialize, Serialize};

use super::{GameState, Phase};
use crate::dataset::{Key, KeyAction};

pub const PROTOCOL_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMsg {
    State {
        v: u8,
        t: f64,
        bar_x: f64,
        #[serde(rename = "box")]
        box_pos: [f64; 2],
        score: u32,
        streak: u32,
        phase: Phase,
        remaining_s: f64,
    },
    Phase {
        v: u8,
        name: Phase,
        duration_s: f64,
    },
    Quality {
        v: u8,
        railed: Vec<bool>,
    },
}

impl ServerMsg {
    pub fn state(s: &GameState, phase: Phase, remaining_s: f64) -> Self {
        ServerMsg::State {
            v: PROTOCOL_VERSION,
            t: s.t,
            bar_x: s.bar_x,
            box_pos: [s.box_x, s.box_y],
            score: s.score,
            streak: s.streak,
            phase,
            remaining_s,
        }
    }

    pub fn phase(name: Phase, duration_s: f64) -> Self {
        ServerMsg::Phase {
            v: PROTOCOL_VERSION,
            name,
            duration_s,
        }
    }

    pub fn quality(railed: Vec<bool>) -> Self {
        ServerMsg::Quality {
            v: PROTOCOL_VERSION,
            railed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ClientMsg {
    Key {
        v: u8,
        key: Key,
        action: KeyAction,
        /// Client clock; advisory only, the server stamps receipt time.
        #[serde(default)]
        t_client: Option<f64>,
    },
    Rating {
        v: u8,
        value: u8,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unsupported protocol version {0}")]
    Version(u8),
    #[error("rating {0} outside 1..=5")]
    RatingRange(u8),
}

impl ClientMsg {
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let msg: ClientMsg = serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        let v = match &msg {
            ClientMsg::Key { v, .. } | ClientMsg::Rating { v, .. } => *v,
        };
        if v != PROTOCOL_VERSION {
            return Err(ProtocolError::Version(v));
        }
        if let ClientMsg::Rating { value, .. } = msg {
            if !(1..=5).contains(&value) {
                return Err(ProtocolError::RatingRange(value));
            }
        }
        Ok(msg)
    }

    pub fn key(key: Key, action: KeyAction, t_client: Option<f64>) -> Self {
        ClientMsg::Key {
            v: PROTOCOL_VERSION,
            key,
            action,
            t_client,
        }
    }

    pub fn rating(value: u8) -> Self {
        ClientMsg::Rating {
            v: PROTOCOL_VERSION,
            value,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("client messages always serialize")
    }
}

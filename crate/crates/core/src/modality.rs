use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The four item modalities, in their canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Video,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Text, Modality::Image, Modality::Video, Modality::Audio];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Option<Modality> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Video => "video",
            Modality::Audio => "audio",
        }
    }

    /// One-letter tag used in subset names such as `TIVA`.
    pub fn letter(self) -> char {
        match self {
            Modality::Text => 'T',
            Modality::Image => 'I',
            Modality::Video => 'V',
            Modality::Audio => 'A',
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "t" => Ok(Modality::Text),
            "image" | "i" => Ok(Modality::Image),
            "video" | "v" => Ok(Modality::Video),
            "audio" | "a" => Ok(Modality::Audio),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Parse a subset tag like `TIV` or `text,image`.
pub fn parse_subset(s: &str) -> Result<Vec<Modality>, Error> {
    let mut out: Vec<Modality> = if s.contains(',') {
        s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>()?
    } else {
        s.chars().map(|c| c.to_string().parse()).collect::<Result<_, _>>()?
    };
    out.sort();
    out.dedup();
    Ok(out)
}

pub fn subset_tag(ms: &[Modality]) -> String {
    ms.iter().map(|m| m.letter()).collect()
}

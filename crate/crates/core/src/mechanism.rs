//! Cross-attention mechanism selection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Maximum look-ahead past the previous halting position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Lookahead {
    Bounded(usize),
    Unbounded,
}

impl Lookahead {
    /// Upper scan bound `min(t_prev + M, T)`.
    pub fn bound(self, t_prev: usize, frames: usize) -> usize {
        match self {
            Lookahead::Bounded(m) => t_prev.saturating_add(m).min(frames),
            Lookahead::Unbounded => frames,
        }
    }

    pub fn is_bounded(self) -> bool {
        matches!(self, Lookahead::Bounded(_))
    }
}

impl fmt::Display for Lookahead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lookahead::Bounded(m) => write!(f, "{m}"),
            Lookahead::Unbounded => f.write_str("inf"),
        }
    }
}

impl FromStr for Lookahead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim() {
            "inf" | "∞" => Ok(Lookahead::Unbounded),
            other => match other.parse::<usize>() {
                Ok(0) => Err(Error::Config("maximum look-ahead must be at least 1".into())),
                Ok(m) => Ok(Lookahead::Bounded(m)),
                Err(_) => Err(Error::Config(format!("maximum look-ahead `{other}` is neither a positive integer nor `inf`"))),
            },
        }
    }
}

impl Serialize for Lookahead {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Lookahead::Bounded(m) => s.serialize_u64(*m as u64),
            Lookahead::Unbounded => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Lookahead {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(m) => Lookahead::from_str(&m.to_string()),
            Raw::Str(s) => Lookahead::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Which attention the decoder's cross-attention sub-layers use.
///
/// `Offline` is ordinary full softmax attention; it is the cost-ratio
/// reference (every step inspects all frames).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MechanismConfig {
    Dacs { max_lookahead: Lookahead },
    Hma,
    Mocha { window: usize },
    Smocha { window: usize },
    Mta,
    Offline,
}

impl MechanismConfig {
    pub fn name(&self) -> &'static str {
        match self {
            MechanismConfig::Dacs { .. } => "dacs",
            MechanismConfig::Hma => "hma",
            MechanismConfig::Mocha { .. } => "mocha",
            MechanismConfig::Smocha { .. } => "smocha",
            MechanismConfig::Mta => "mta",
            MechanismConfig::Offline => "offline",
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        match *self {
            MechanismConfig::Mocha { window: 0 } | MechanismConfig::Smocha { window: 0 } => {
                Err(Error::Config("chunk window must be at least 1".into()))
            }
            MechanismConfig::Dacs { max_lookahead: Lookahead::Bounded(0) } => {
                Err(Error::Config("maximum look-ahead must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Builds a mechanism from its command-line name plus optional parameters.
    pub fn from_parts(name: &str, lookahead: Option<Lookahead>, window: Option<usize>) -> Result<Self, Error> {
        let mech = match name {
            "dacs" => MechanismConfig::Dacs { max_lookahead: lookahead.unwrap_or(Lookahead::Unbounded) },
            "hma" => MechanismConfig::Hma,
            "mocha" => MechanismConfig::Mocha { window: window.unwrap_or(2) },
            "smocha" => MechanismConfig::Smocha { window: window.unwrap_or(2) },
            "mta" => MechanismConfig::Mta,
            "offline" => MechanismConfig::Offline,
            other => return Err(Error::Config(format!("unknown mechanism `{other}`"))),
        };
        mech.validate()?;
        Ok(mech)
    }

    /// Replaces the look-ahead of a DACS mechanism; other mechanisms are returned unchanged.
    pub fn with_lookahead(self, m: Lookahead) -> Self {
        match self {
            MechanismConfig::Dacs { .. } => MechanismConfig::Dacs { max_lookahead: m },
            other => other,
        }
    }
}

impl fmt::Display for MechanismConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MechanismConfig::Dacs { max_lookahead } => write!(f, "dacs(M={max_lookahead})"),
            MechanismConfig::Mocha { window } => write!(f, "mocha(w={window})"),
            MechanismConfig::Smocha { window } => write!(f, "smocha(w={window})"),
            other => f.write_str(other.name()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookahead_parsing_and_bound() {
        assert_eq!("inf".parse::<Lookahead>().unwrap(), Lookahead::Unbounded);
        assert_eq!("8".parse::<Lookahead>().unwrap(), Lookahead::Bounded(8));
        assert!("0".parse::<Lookahead>().is_err());
        assert!("x".parse::<Lookahead>().is_err());
        assert_eq!(Lookahead::Bounded(4).bound(3, 20), 7);
        assert_eq!(Lookahead::Bounded(4).bound(18, 20), 20);
        assert_eq!(Lookahead::Unbounded.bound(3, 20), 20);
    }

    #[test]
    fn mechanism_serde_round_trip() {
        let m = MechanismConfig::Dacs { max_lookahead: Lookahead::Bounded(14) };
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"kind":"dacs","max_lookahead":14}"#);
        assert_eq!(serde_json::from_str::<MechanismConfig>(&s).unwrap(), m);
        let inf: MechanismConfig = serde_json::from_str(r#"{"kind":"dacs","max_lookahead":"inf"}"#).unwrap();
        assert_eq!(inf, MechanismConfig::Dacs { max_lookahead: Lookahead::Unbounded });
        assert!(serde_json::from_str::<MechanismConfig>(r#"{"kind":"dacs","max_lookahead":3,"window":3}"#).is_err());
        assert!(serde_json::from_str::<MechanismConfig>(r#"{"kind":"cif"}"#).is_err());
        assert!(MechanismConfig::from_parts("mocha", None, Some(0)).is_err());
    }
}

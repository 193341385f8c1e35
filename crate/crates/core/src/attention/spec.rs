use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One module of a multi-wise block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModuleKind {
    /// Time-wise self-attention.
    TimeSelf,
    /// Channel-wise self-attention.
    ChannelSelf,
    /// Cross-attention to the text context.
    Cross,
    /// Feed-forward network.
    FeedForward,
}

impl ModuleKind {
    pub fn token(self) -> &'static str {
        match self {
            ModuleKind::TimeSelf => "T",
            ModuleKind::ChannelSelf => "CS",
            ModuleKind::Cross => "CA",
            ModuleKind::FeedForward => "F",
        }
    }
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "T" => Ok(ModuleKind::TimeSelf),
            "CS" => Ok(ModuleKind::ChannelSelf),
            "CA" => Ok(ModuleKind::Cross),
            "F" => Ok(ModuleKind::FeedForward),
            other => Err(Error::Config(format!("unknown block module token {other:?}"))),
        }
    }
}

/// Slash-delimited module order, e.g. `CS/F/T/CA/F`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BlockOrder(pub Vec<ModuleKind>);

impl BlockOrder {
    pub const MWNET: &'static str = "CS/F/T/CA/F";

    /// The five orders compared in the module-design ablation.
    pub const ABLATION_GRID: [&'static str; 5] = ["T/CA/F", "T/CA/F/T/F", "T/F/T/CA/F", "T/CA/F/CS/F", "CS/F/T/CA/F"];

    pub fn modules(&self) -> &[ModuleKind] {
        &self.0
    }
}

impl Default for BlockOrder {
    fn default() -> Self {
        Self::MWNET.parse().expect("default order parses")
    }
}

impl FromStr for BlockOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Err(Error::Config("empty block order".into()));
        }
        s.split('/').map(str::parse).collect::<Result<Vec<_>>>().map(BlockOrder)
    }
}

impl fmt::Display for BlockOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tokens: Vec<_> = self.0.iter().map(|m| m.token()).collect();
        f.write_str(&tokens.join("/"))
    }
}

impl Serialize for BlockOrder {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BlockOrder {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where each module's layer norm sits relative to its residual merge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// `h + M(LN(h))`
    #[default]
    Pre,
    /// `LN(h + M(h))`
    Post,
}

/// Shape of an MWNet stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockSpec {
    pub order: BlockOrder,
    /// Model width C.
    pub width: usize,
    pub heads: usize,
    pub groups: usize,
    pub ffn_width: usize,
    pub layers: usize,
    /// Text context width.
    pub context_width: usize,
    pub norm: NormPlacement,
}

impl Default for BlockSpec {
    fn default() -> Self {
        BlockSpec {
            order: BlockOrder::default(),
            width: 64,
            heads: 4,
            groups: 4,
            ffn_width: 256,
            layers: 2,
            context_width: 32,
            norm: NormPlacement::Pre,
        }
    }
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.order.0.is_empty() {
            return Err(Error::Config("empty block order".into()));
        }
        if self.width == 0 || self.heads == 0 || self.groups == 0 || self.layers == 0 || self.ffn_width == 0 {
            return Err(Error::Config("block dimensions must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by heads {}", self.width, self.heads)));
        }
        if !self.width.is_multiple_of(self.groups) {
            return Err(Error::Config(format!("width {} not divisible by groups {}", self.width, self.groups)));
        }
        Ok(())
    }
}

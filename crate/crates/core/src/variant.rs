use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Pre-training variant: the plain contrastive baseline or one of the four
/// ways of feeding language identity into it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Contrastive baseline.
    Xlsr,
    /// Language adversarial: discriminator behind a gradient reversal layer.
    La,
    /// Additive language embedding with orthogonality penalty.
    Le,
    /// Per-language residual adapter.
    Lsa,
    /// Shared adapter with per-language low-rank adaptive weights.
    Lsaw,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Xlsr,
        Variant::La,
        Variant::Le,
        Variant::Lsa,
        Variant::Lsaw,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Xlsr => "xlsr",
            Variant::La => "la",
            Variant::Le => "le",
            Variant::Lsa => "lsa",
            Variant::Lsaw => "lsaw",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Xlsr => "XLSR",
            Variant::La => "LA",
            Variant::Le => "LE",
            Variant::Lsa => "LSA",
            Variant::Lsaw => "LSAW",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(alloc::format!(
                    "unknown variant `{s}` (xlsr|la|le|lsa|lsaw)"
                ))
            })
    }
}

//! Addressable parameter matrices of the denoiser.
//!
//! Every flattened concatenation in the pipeline (per-sample gradients,
//! joint clipping, adapter updates, checkpoints) follows the canonical
//! order defined by `Ord` on [`MatrixId`]: attention matrices first
//! (block ascending, self before cross, q < k < v), then the extension
//! roles (output projections, MLP layers, class-embedding table).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Attention site within a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AttnSite {
    /// Self-attention over the patch tokens (attn1).
    SelfAttn,
    /// Cross-attention against the class-embedding token (attn2).
    Cross,
}

/// Projection role within an attention site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Q,
    K,
    V,
}

/// MLP layer within a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MlpLayer {
    Fc1,
    Fc2,
}

/// Identifier of one weight matrix.
///
/// The `Attn` variants form the default selection pool; the remaining
/// variants only enter the pool in the all-parameter variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum MatrixId {
    Attn {
        block: usize,
        site: AttnSite,
        role: Role,
    },
    /// Per-block output projection applied to the self-attention output.
    Proj { block: usize },
    Mlp { block: usize, layer: MlpLayer },
    /// Class-embedding table (one row per class).
    ClassEmbed,
}

impl MatrixId {
    pub fn attn(block: usize, site: AttnSite, role: Role) -> Self {
        MatrixId::Attn { block, site, role }
    }

    /// True for q/k/v attention matrices (members of the default pool).
    pub fn is_attention(&self) -> bool {
        matches!(self, MatrixId::Attn { .. })
    }

    /// The attention layer this matrix belongs to, if any; layer-level
    /// selection groups matrices by this key.
    pub fn layer_key(&self) -> Option<(usize, AttnSite)> {
        match self {
            MatrixId::Attn { block, site, .. } => Some((*block, *site)),
            _ => None,
        }
    }
}

impl fmt::Display for MatrixId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixId::Attn { block, site, role } => {
                let s = match site {
                    AttnSite::SelfAttn => "self",
                    AttnSite::Cross => "cross",
                };
                let r = match role {
                    Role::Q => "q",
                    Role::K => "k",
                    Role::V => "v",
                };
                write!(f, "b{block}.{s}.{r}")
            }
            MatrixId::Proj { block } => write!(f, "b{block}.proj"),
            MatrixId::Mlp { block, layer } => {
                let l = match layer {
                    MlpLayer::Fc1 => "fc1",
                    MlpLayer::Fc2 => "fc2",
                };
                write!(f, "b{block}.mlp.{l}")
            }
            MatrixId::ClassEmbed => write!(f, "embed"),
        }
    }
}

impl FromStr for MatrixId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "embed" {
            return Ok(MatrixId::ClassEmbed);
        }
        let parts: Vec<&str> = s.split('.').collect();
        let block: usize = parts
            .first()
            .and_then(|p| p.strip_prefix('b'))
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| format!("bad matrix id `{s}`"))?;
        match parts.as_slice() {
            [_, "proj"] => Ok(MatrixId::Proj { block }),
            [_, "mlp", l] => {
                let layer = match *l {
                    "fc1" => MlpLayer::Fc1,
                    "fc2" => MlpLayer::Fc2,
                    _ => return Err(format!("bad mlp layer in `{s}`")),
                };
                Ok(MatrixId::Mlp { block, layer })
            }
            [_, site, role] => {
                let site = match *site {
                    "self" => AttnSite::SelfAttn,
                    "cross" => AttnSite::Cross,
                    _ => return Err(format!("bad attention site in `{s}`")),
                };
                let role = match *role {
                    "q" => Role::Q,
                    "k" => Role::K,
                    "v" => Role::V,
                    _ => return Err(format!("bad role in `{s}`")),
                };
                Ok(MatrixId::Attn { block, site, role })
            }
            _ => Err(format!("bad matrix id `{s}`")),
        }
    }
}

impl From<MatrixId> for String {
    fn from(id: MatrixId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for MatrixId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order_is_block_site_role_then_extensions() {
        let ids = vec![
            MatrixId::attn(0, AttnSite::SelfAttn, Role::Q),
            MatrixId::attn(0, AttnSite::SelfAttn, Role::K),
            MatrixId::attn(0, AttnSite::SelfAttn, Role::V),
            MatrixId::attn(0, AttnSite::Cross, Role::Q),
            MatrixId::attn(0, AttnSite::Cross, Role::K),
            MatrixId::attn(0, AttnSite::Cross, Role::V),
            MatrixId::attn(1, AttnSite::SelfAttn, Role::Q),
            MatrixId::Proj { block: 0 },
            MatrixId::Mlp {
                block: 0,
                layer: MlpLayer::Fc1,
            },
            MatrixId::ClassEmbed,
        ];
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn display_roundtrips() {
        for id in [
            MatrixId::attn(3, AttnSite::Cross, Role::V),
            MatrixId::Proj { block: 2 },
            MatrixId::Mlp {
                block: 1,
                layer: MlpLayer::Fc2,
            },
            MatrixId::ClassEmbed,
        ] {
            let s = id.to_string();
            assert_eq!(s.parse::<MatrixId>().unwrap(), id);
        }
    }
}

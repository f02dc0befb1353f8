use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{Result, UumError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    DomainSpecificEncoder,
    IbToken,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Base, Variant::DomainSpecificEncoder, Variant::IbToken];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::DomainSpecificEncoder => "domain_specific_encoder",
            Variant::IbToken => "ib_token",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = UumError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| UumError::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub latent_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Item-id embedding width per domain. Empty means `id_embedding_dim` for all.
    pub id_embedding_dims: Vec<usize>,
    pub id_embedding_dim: usize,
    pub categorical_dim: usize,
    pub domain_dim: usize,
    /// Hidden width of the event projection FFN.
    pub feature_hidden: usize,
    /// Hidden width of each transformer block's FFN; 0 means `2 × latent_dim`.
    pub block_hidden: usize,
    pub positional_capacity: usize,
    pub cross_layers: usize,
    pub target_hidden: usize,
    pub score_hidden: usize,
    /// Domain-specific variant: private blocks per domain (0 = max(1, layers / 2)).
    pub private_layers: usize,
    /// Domain-specific variant: shared blocks (0 = layers − private, at least 1).
    pub shared_layers: usize,
    /// IB variant: cross-domain exchange through the summed IB tokens.
    pub ib_exchange: bool,
    /// IB variant ablation: event tokens may not attend to IB tokens.
    pub ib_block_readout: bool,
    /// Restricts attention to earlier-or-equal positions.
    pub causal: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Base,
            latent_dim: 32,
            layers: 2,
            heads: 2,
            id_embedding_dims: Vec::new(),
            id_embedding_dim: 16,
            categorical_dim: 8,
            domain_dim: 8,
            feature_hidden: 64,
            block_hidden: 0,
            positional_capacity: 32,
            cross_layers: 2,
            target_hidden: 64,
            score_hidden: 32,
            private_layers: 0,
            shared_layers: 0,
            ib_exchange: true,
            ib_block_readout: false,
            causal: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let bad = |m: String| Err(UumError::Config(m));
        if self.latent_dim == 0 || self.heads == 0 || self.latent_dim % self.heads != 0 {
            return bad(format!("latent_dim {} must be a positive multiple of heads {}", self.latent_dim, self.heads));
        }
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if !self.id_embedding_dims.is_empty() && self.id_embedding_dims.len() != manifest.domain_count() {
            return bad(format!(
                "id_embedding_dims has {} entries for {} domains",
                self.id_embedding_dims.len(),
                manifest.domain_count()
            ));
        }
        let widths = [
            self.id_embedding_dim,
            self.categorical_dim,
            self.domain_dim,
            self.feature_hidden,
            self.target_hidden,
            self.score_hidden,
            self.positional_capacity,
        ];
        if widths.contains(&0) || self.id_embedding_dims.contains(&0) {
            return bad("embedding widths, hidden widths and positional capacity must be positive".into());
        }
        Ok(())
    }

    pub fn id_dim(&self, domain: usize) -> usize {
        self.id_embedding_dims.get(domain).copied().unwrap_or(self.id_embedding_dim)
    }

    pub fn block_hidden(&self) -> usize {
        if self.block_hidden == 0 { 2 * self.latent_dim } else { self.block_hidden }
    }

    pub fn private_layers(&self) -> usize {
        if self.private_layers == 0 { (self.layers / 2).max(1) } else { self.private_layers }
    }

    pub fn shared_layers(&self) -> usize {
        if self.shared_layers == 0 { self.layers.saturating_sub(self.private_layers()).max(1) } else { self.shared_layers }
    }

    /// Width of the concatenated event feature vector.
    pub fn feature_width(&self, manifest: &DatasetManifest) -> usize {
        let ids: usize = (0..manifest.domain_count()).map(|d| self.id_dim(d)).sum();
        ids + manifest.categorical_slots().len() * self.categorical_dim + self.domain_dim + 1
    }
}

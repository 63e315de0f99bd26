use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::{FormatCatalog, QFormat};

/// Architecture and number formats of a backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub name: String,
    pub n_blocks: usize,
    pub d: usize,
    pub mlp_dim: usize,
    pub n_heads: usize,
    /// When false every block is a ViT block and the MoE fields are unused.
    pub use_moe: bool,
    pub m_experts: usize,
    pub top_k: usize,
    pub h_moe: usize,
    pub patch_size: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub n_tasks: usize,
    pub scale_scores: bool,
    pub block_size: usize,
    pub formats: FormatCatalog,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            name: "m3vit".into(),
            n_blocks: 12,
            d: 192,
            mlp_dim: 768,
            n_heads: 3,
            use_moe: true,
            m_experts: 16,
            top_k: 2,
            h_moe: 384,
            patch_size: 16,
            image_h: 128,
            image_w: 256,
            n_tasks: 2,
            scale_scores: false,
            block_size: crate::unified_linear::DEFAULT_BLOCK_SIZE,
            formats: FormatCatalog::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Vit,
    Moe,
}

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 6] = ["vit-base", "vit-large", "vit-huge", "deit-small", "deit-base", "m3vit"];

pub fn preset(name: &str) -> Result<ModelConfig> {
    let dense = |n_blocks, d, mlp_dim, n_heads| ModelConfig {
        name: name.to_string(),
        n_blocks,
        d,
        mlp_dim,
        n_heads,
        use_moe: false,
        n_tasks: 1,
        ..ModelConfig::default()
    };
    Ok(match name.to_ascii_lowercase().as_str() {
        "vit-base" | "deit-base" => dense(12, 768, 3072, 12),
        "vit-large" => dense(24, 1024, 4096, 16),
        "vit-huge" => dense(32, 1280, 5120, 16),
        "deit-small" => dense(12, 384, 1536, 6),
        "m3vit" => ModelConfig::default(),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset {name:?}; expected one of {}",
                PRESET_NAMES.join(", ")
            )))
        }
    })
}

impl ModelConfig {
    pub fn n_tokens(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    /// Even blocks are ViT blocks, odd blocks carry the experts.
    pub fn block_kind(&self, block: usize) -> BlockKind {
        if self.use_moe && block % 2 == 1 {
            BlockKind::Moe
        } else {
            BlockKind::Vit
        }
    }

    pub fn n_moe_blocks(&self) -> usize {
        (0..self.n_blocks).filter(|&b| self.block_kind(b) == BlockKind::Moe).count()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_blocks", self.n_blocks),
            ("d", self.d),
            ("mlp_dim", self.mlp_dim),
            ("n_heads", self.n_heads),
            ("patch_size", self.patch_size),
            ("n_tasks", self.n_tasks),
            ("block_size", self.block_size),
        ];
        if let Some((field, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{field} must be ≥ 1")));
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!("d = {} not divisible by {} heads", self.d, self.n_heads)));
        }
        if self.image_h == 0 || self.image_w == 0 || !self.image_h.is_multiple_of(self.patch_size) || !self.image_w.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidArgument(format!(
                "image {}×{} is not a whole number of {}-pixel patches",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if self.use_moe && (self.m_experts == 0 || self.h_moe == 0 || self.top_k == 0 || self.top_k > self.m_experts) {
            return Err(Error::InvalidArgument(format!(
                "need 1 ≤ top_k ≤ m_experts and h_moe ≥ 1, got k = {}, m = {}, h = {}",
                self.top_k, self.m_experts, self.h_moe
            )));
        }
        let f = &self.formats;
        for q in [f.activation, f.weight, f.bias_attention, f.bias_mlp, f.bias_widened, f.gelu_lut_entry] {
            QFormat::new(q.width_bits, q.int_bits, q.signed)?;
        }
        if f.gelu_lut_entry != FormatCatalog::default().gelu_lut_entry {
            return Err(Error::InvalidFormat(format!("GELU table entries are fixed at {}", FormatCatalog::default().gelu_lut_entry)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

//! The BITA pipeline: frozen image encoder, Interactive Fourier Transformer,
//! linear bridge and frozen decoder-only language model.

mod decode;
mod forward;
mod mask;
mod params;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::spectral::MixerKind;
use crate::tensor::Tensor;

pub use decode::PrefixScorer;
pub use forward::Forward;
pub use mask::{build_prefix_causal_mask, PrefixCausalMask};
pub use params::{ParamGroup, ParamId, ParamStore};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ModelConfig {
    /// IFT width `d`.
    pub hidden_dim: usize,
    /// IFT depth `L`.
    pub num_layers: usize,
    pub num_heads: usize,
    /// Learnable visual prompts (32 in the reference setup).
    pub num_prompts: usize,
    /// Square input resolution of the frozen image encoder.
    pub image_size: usize,
    /// Patches per image; must be a perfect square dividing the grid.
    pub image_patches: usize,
    pub image_feat_dim: usize,
    pub image_layers: usize,
    pub image_heads: usize,
    pub lm_dim: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_ffn_dim: usize,
    /// Length of the frozen LM position table (prefix plus text).
    pub lm_max_positions: usize,
    pub vocab_size: usize,
    /// Padded length of the text branch input, `[CLS]` included.
    pub max_text_len: usize,
    pub mixer: MixerKind,
    /// Seed for trainable parameters.
    pub seed: u64,
    /// Seed for the frozen encoder and language model.
    pub frozen_seed: u64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_layers: 4,
            num_heads: 4,
            num_prompts: 32,
            image_size: 32,
            image_patches: 16,
            image_feat_dim: 64,
            image_layers: 2,
            image_heads: 4,
            lm_dim: 128,
            lm_layers: 2,
            lm_heads: 4,
            lm_ffn_dim: 256,
            lm_max_positions: 96,
            vocab_size: 64,
            max_text_len: 16,
            mixer: MixerKind::FourierMix,
            seed: 0,
            frozen_seed: 0xB17A,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("num_prompts", self.num_prompts),
            ("image_size", self.image_size),
            ("image_patches", self.image_patches),
            ("image_feat_dim", self.image_feat_dim),
            ("image_heads", self.image_heads),
            ("lm_dim", self.lm_dim),
            ("lm_heads", self.lm_heads),
            ("lm_ffn_dim", self.lm_ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, width, heads) in [
            ("hidden_dim", self.hidden_dim, self.num_heads),
            ("image_feat_dim", self.image_feat_dim, self.image_heads),
            ("lm_dim", self.lm_dim, self.lm_heads),
        ] {
            if width % heads != 0 {
                return Err(Error::Config(format!("{name} {width} not divisible by {heads} heads")));
            }
        }
        if self.hidden_dim < 2 || self.lm_dim < 2 || self.image_feat_dim < 2 {
            return Err(Error::Config("layer norm widths must be at least 2".into()));
        }
        if self.mixer == MixerKind::FourierMix {
            for (name, v) in [
                ("hidden_dim", self.hidden_dim),
                ("num_prompts", self.num_prompts),
                ("max_text_len", self.max_text_len),
            ] {
                if !v.is_power_of_two() {
                    return Err(Error::Config(format!(
                        "{name} = {v} must be a power of two for the Fourier mixer"
                    )));
                }
            }
        }
        let side = self.patch_grid();
        if side * side != self.image_patches || self.image_size % side != 0 {
            return Err(Error::Config(format!(
                "image_patches {} must be a square grid dividing image_size {}",
                self.image_patches, self.image_size
            )));
        }
        if self.max_text_len < 2 {
            return Err(Error::Config("max_text_len must hold [CLS] and one word".into()));
        }
        if self.lm_max_positions < self.num_prompts + 2 {
            return Err(Error::Config("lm_max_positions too small for the prefix".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn patch_grid(&self) -> usize {
        let mut s = 0;
        while (s + 1) * (s + 1) <= self.image_patches {
            s += 1;
        }
        s
    }

    pub fn patch_size(&self) -> usize {
        self.image_size / self.patch_grid()
    }

    /// Longest text the frozen LM can score after the prefix.
    pub fn lm_text_capacity(&self) -> usize {
        self.lm_max_positions - self.num_prompts
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIds {
    pub up: LinearIds,
    pub down: LinearIds,
}

/// One IFT block. `ln_mix`, `ffn` and `ln_ffn` (and `self_attn` when the
/// self-attention mixer is selected) are shared by the image and text
/// branches; the cross-attention sublayer is image-only.
#[derive(Debug, Clone, Copy)]
pub(crate) struct IftLayer {
    pub self_attn: Option<AttnIds>,
    pub ln_mix: NormIds,
    pub cross: AttnIds,
    pub ln_cross: NormIds,
    pub ffn: FfnIds,
    pub ln_ffn: NormIds,
}

/// Pre-norm transformer block used by the frozen stand-ins.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PreNormLayer {
    pub ln_attn: NormIds,
    pub attn: AttnIds,
    pub ln_ffn: NormIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderIds {
    pub patch: LinearIds,
    pub pos: ParamId,
    pub layers: Vec<PreNormLayer>,
}

#[derive(Debug, Clone)]
pub(crate) struct LmIds {
    pub tok: ParamId,
    pub pos: ParamId,
    pub layers: Vec<PreNormLayer>,
    pub ln_final: NormIds,
}

/// Parameters of the whole pipeline plus the handles used to address them.
#[derive(Debug, Clone)]
pub struct BitaModel {
    config: ModelConfig,
    params: ParamStore,
    pub(crate) prompts: ParamId,
    pub(crate) text_tok: ParamId,
    pub(crate) text_pos: ParamId,
    pub(crate) ift: Vec<IftLayer>,
    pub(crate) projection: LinearIds,
    pub(crate) encoder: EncoderIds,
    pub(crate) lm: LmIds,
}

/// Initializes parameters one at a time from a seed mixed with the
/// parameter name, so every tensor is independent of creation order.
struct Init<'s> {
    store: &'s mut ParamStore,
    seed: u64,
    group: ParamGroup,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(&name));
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut rng));
        self.store.add(name, self.group, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, self.group, Tensor::full(shape, value))
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        LinearIds {
            w: self.normal(format!("{prefix}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()),
            b: self.constant(format!("{prefix}.b"), &[fan_out], 0.0),
        }
    }

    fn norm(&mut self, prefix: &str, width: usize) -> NormIds {
        NormIds {
            gamma: self.constant(format!("{prefix}.gamma"), &[width], 1.0),
            beta: self.constant(format!("{prefix}.beta"), &[width], 0.0),
        }
    }

    fn attn(&mut self, prefix: &str, width: usize, kv_width: usize) -> AttnIds {
        AttnIds {
            q: self.linear(&format!("{prefix}.q"), width, width),
            k: self.linear(&format!("{prefix}.k"), kv_width, width),
            v: self.linear(&format!("{prefix}.v"), kv_width, width),
            o: self.linear(&format!("{prefix}.o"), width, width),
        }
    }

    fn ffn(&mut self, prefix: &str, width: usize, inner: usize) -> FfnIds {
        FfnIds {
            up: self.linear(&format!("{prefix}.up"), width, inner),
            down: self.linear(&format!("{prefix}.down"), inner, width),
        }
    }

    fn pre_norm(&mut self, prefix: &str, width: usize, inner: usize) -> PreNormLayer {
        PreNormLayer {
            ln_attn: self.norm(&format!("{prefix}.ln_attn"), width),
            attn: self.attn(&format!("{prefix}.attn"), width, width),
            ln_ffn: self.norm(&format!("{prefix}.ln_ffn"), width),
            ffn: self.ffn(&format!("{prefix}.ffn"), width, inner),
        }
    }
}

impl BitaModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::default();
        let (d, f) = (c.hidden_dim, c.image_feat_dim);

        let mut init = Init {
            store: &mut store,
            seed: c.frozen_seed,
            group: ParamGroup::ImageEncoder,
        };
        let patch_dim = c.patch_size() * c.patch_size() * 3;
        let encoder = EncoderIds {
            patch: init.linear("encoder.patch", patch_dim, f),
            pos: init.normal("encoder.pos".into(), &[c.image_patches, f], 0.5),
            layers: (0..c.image_layers)
                .map(|l| init.pre_norm(&format!("encoder.layer{l}"), f, 4 * f))
                .collect(),
        };

        init.group = ParamGroup::LanguageModel;
        let lm_std = 1.0 / (c.lm_dim as f64).sqrt();
        let lm = LmIds {
            tok: init.normal("lm.tok".into(), &[c.vocab_size, c.lm_dim], lm_std),
            pos: init.normal("lm.pos".into(), &[c.lm_max_positions, c.lm_dim], lm_std),
            layers: (0..c.lm_layers)
                .map(|l| init.pre_norm(&format!("lm.layer{l}"), c.lm_dim, c.lm_ffn_dim))
                .collect(),
            ln_final: init.norm("lm.ln_final", c.lm_dim),
        };

        init.seed = c.seed;
        init.group = ParamGroup::Prompts;
        let prompts = init.normal("prompts".into(), &[c.num_prompts, d], 1.0);

        init.group = ParamGroup::TextEmbedding;
        let text_tok = init.normal("text.tok".into(), &[c.vocab_size, d], 1.0);
        let text_pos = init.normal("text.pos".into(), &[c.max_text_len, d], 1.0);

        init.group = ParamGroup::Ift;
        let ift = (0..c.num_layers)
            .map(|l| {
                let p = format!("ift.layer{l}");
                IftLayer {
                    self_attn: (c.mixer == MixerKind::SelfAttention)
                        .then(|| init.attn(&format!("{p}.self_attn"), d, d)),
                    ln_mix: init.norm(&format!("{p}.ln_mix"), d),
                    cross: init.attn(&format!("{p}.cross"), d, f),
                    ln_cross: init.norm(&format!("{p}.ln_cross"), d),
                    ffn: init.ffn(&format!("{p}.ffn"), d, 4 * d),
                    ln_ffn: init.norm(&format!("{p}.ln_ffn"), d),
                }
            })
            .collect();

        init.group = ParamGroup::Projection;
        let projection = init.linear("proj", d, c.lm_dim);

        Ok(Self {
            config,
            params: store,
            prompts,
            text_tok,
            text_pos,
            ift,
            projection,
            encoder,
            lm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameter counts per group. Frozen groups are omitted when
    /// `trainable_only` is set.
    pub fn count_params(&self, trainable_only: bool) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for (_, group, t) in self.params.iter() {
            if trainable_only && group.is_frozen() {
                continue;
            }
            *counts.entry(group.name()).or_insert(0) += t.len();
        }
        counts
    }

    /// Sum of [`count_params`](Self::count_params).
    pub fn total_params(&self, trainable_only: bool) -> usize {
        self.count_params(trainable_only).values().sum()
    }

    /// Parameter handles of the FFN shared by both IFT branches in `layer`;
    /// the same ids are read by both branches.
    pub fn shared_ffn_ids(&self, layer: usize) -> [ParamId; 4] {
        let f = self.ift[layer].ffn;
        [f.up.w, f.up.b, f.down.w, f.down.b]
    }

    /// Mean L2 norm of a tensor's rows, a cheap health statistic for logs.
    pub fn mean_row_norm(t: &Tensor) -> f64 {
        let rows = t.rows();
        (0..rows).map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>()
            / rows as f64
    }
}

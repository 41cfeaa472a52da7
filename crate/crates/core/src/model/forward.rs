use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{AttentionSpec, Graph, Var};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::spectral::MixerKind;
use crate::tensor::Tensor;

use super::{AttnIds, BitaModel, FfnIds, IftLayer, LinearIds, NormIds, ParamGroup, ParamId, PreNormLayer, PrefixCausalMask};

/// A graph under construction together with lazily bound model parameters.
///
/// Parameters whose group is not listed as trainable are bound frozen and
/// never receive gradients.
pub struct Forward<'a> {
    pub graph: Graph<'a>,
    model: &'a BitaModel,
    bound: Vec<Option<Var>>,
    trainable: [bool; 6],
}

impl<'a> Forward<'a> {
    pub fn new(model: &'a BitaModel, trainable: &[ParamGroup]) -> Self {
        let mut flags = [false; 6];
        for g in trainable {
            if !g.is_frozen() {
                flags[g.index()] = true;
            }
        }
        Self {
            graph: Graph::new(),
            model,
            bound: vec![None; model.params().len()],
            trainable: flags,
        }
    }

    pub fn model(&self) -> &'a BitaModel {
        self.model
    }

    /// Graph node for a parameter, binding it on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.model.params();
        let grad = self.trainable[store.group(id).index()];
        let v = self.graph.param(store.get(id), grad);
        self.bound[id.0] = Some(v);
        v
    }

    /// `(id, var)` for every parameter bound so far.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    fn linear(&mut self, x: Var, ids: LinearIds) -> Result<Var> {
        let w = self.param(ids.w);
        let b = self.param(ids.b);
        self.graph.linear(x, w, b)
    }

    fn norm(&mut self, x: Var, ids: NormIds) -> Result<Var> {
        let g = self.param(ids.gamma);
        let b = self.param(ids.beta);
        let eps = self.model.config().layer_norm_eps;
        self.graph.layer_norm(x, g, b, eps)
    }

    fn ffn(&mut self, x: Var, ids: FfnIds) -> Result<Var> {
        let h = self.linear(x, ids.up)?;
        let h = self.graph.gelu(h);
        self.linear(h, ids.down)
    }

    /// Multi-head attention of `queries` over `keys_values` with output
    /// projection.
    fn mha(
        &mut self,
        queries: Var,
        keys_values: Var,
        ids: AttnIds,
        heads: usize,
        batch: usize,
        mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let q = self.linear(queries, ids.q)?;
        let k = self.linear(keys_values, ids.k)?;
        let v = self.linear(keys_values, ids.v)?;
        let spec = AttentionSpec {
            heads,
            batch,
            q_len: self.graph.value(q).rows() / batch,
            k_len: self.graph.value(k).rows() / batch,
            mask,
        };
        let a = self.graph.attention(q, k, v, spec)?;
        self.linear(a, ids.o)
    }

    fn pre_norm_block(
        &mut self,
        x: Var,
        layer: PreNormLayer,
        heads: usize,
        batch: usize,
        mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let h = self.norm(x, layer.ln_attn)?;
        let a = self.mha(h, h, layer.attn, heads, batch, mask)?;
        let x = self.graph.add(x, a)?;
        let h = self.norm(x, layer.ln_ffn)?;
        let f = self.ffn(h, layer.ffn)?;
        self.graph.add(x, f)
    }

    /// Token mixing sublayer of an IFT block over `[batch·seq × d]`.
    fn mix(&mut self, x: Var, layer: &IftLayer, seq: usize, batch: usize) -> Result<Var> {
        match (self.model.config().mixer, layer.self_attn) {
            (MixerKind::FourierMix, _) => self.graph.fourier_mix(x, seq),
            (MixerKind::SelfAttention, Some(attn)) => {
                let heads = self.model.config().num_heads;
                self.mha(x, x, attn, heads, batch, None)
            }
            (MixerKind::SelfAttention, None) => {
                Err(Error::contract("self-attention mixer without parameters"))
            }
        }
    }

    /// Frozen image features `[batch·image_patches × image_feat_dim]` as a
    /// constant node.
    pub fn image_features(&mut self, images: &[&Image]) -> Result<Var> {
        let feats = self.model.encode_images(images)?;
        Ok(self.graph.constant(feats))
    }

    /// Image branch: visual prompts cross-attending into frozen features.
    /// Returns `[batch·num_prompts × d]`.
    pub fn image_branch(&mut self, image_feats: Var, batch: usize) -> Result<Var> {
        let cfg = self.model.config();
        let (rows, cols) = (self.graph.value(image_feats).rows(), self.graph.value(image_feats).cols());
        if batch == 0 || rows % batch != 0 || cols != cfg.image_feat_dim {
            return Err(Error::shape(
                "ift_image_branch",
                self.graph.shape(image_feats),
                &[batch, cfg.image_feat_dim],
            ));
        }
        let p = self.param(self.model.prompts);
        let mut p = self.graph.tile_rows(p, batch)?;
        let seq = cfg.num_prompts;
        for layer in self.model.ift.clone() {
            let m = self.mix(p, &layer, seq, batch)?;
            let s = self.graph.add(p, m)?;
            let u = self.norm(s, layer.ln_mix)?;
            let c = self.mha(u, image_feats, layer.cross, cfg.num_heads, batch, None)?;
            let s = self.graph.add(u, c)?;
            let v = self.norm(s, layer.ln_cross)?;
            let f = self.ffn(v, layer.ffn)?;
            let s = self.graph.add(v, f)?;
            p = self.norm(s, layer.ln_ffn)?;
        }
        Ok(p)
    }

    /// Text branch over `batch` sequences of exactly `max_text_len` ids
    /// (`[CLS]` first, padded). Returns `[batch·max_text_len × d]`.
    pub fn text_branch(&mut self, token_ids: &[usize], batch: usize) -> Result<Var> {
        let cfg = self.model.config();
        let t = cfg.max_text_len;
        if batch == 0 || token_ids.len() != batch * t {
            return Err(Error::shape("ift_text_branch", &[token_ids.len()], &[batch, t]));
        }
        let tok = self.param(self.model.text_tok);
        let emb = self.graph.embedding(tok, token_ids)?;
        let pos = self.param(self.model.text_pos);
        let pos = self.graph.tile_rows(pos, batch)?;
        let mut x = self.graph.add(emb, pos)?;
        for layer in self.model.ift.clone() {
            let m = self.mix(x, &layer, t, batch)?;
            let s = self.graph.add(x, m)?;
            let u = self.norm(s, layer.ln_mix)?;
            let f = self.ffn(u, layer.ffn)?;
            let s = self.graph.add(u, f)?;
            x = self.norm(s, layer.ln_ffn)?;
        }
        Ok(x)
    }

    /// `[CLS]` rows of a text-branch output, `[batch × d]`.
    pub fn cls_rows(&mut self, text_out: Var, batch: usize) -> Result<Var> {
        self.graph.slice_blocks(text_out, batch, 0, 1)
    }

    /// Linear map from IFT width to LM width.
    pub fn project_to_lm(&mut self, z: Var) -> Result<Var> {
        let d = self.model.config().hidden_dim;
        if self.graph.value(z).cols() != d || self.graph.shape(z).len() != 2 {
            return Err(Error::shape("project_to_lm", self.graph.shape(z), &[d]));
        }
        self.linear(z, self.model.projection)
    }

    /// Frozen LM over `[prefix ; tokens]` per sequence. `prefix` is
    /// `[batch·P × lm_dim]`, `token_ids` holds `batch·T` ids. Returns logits
    /// for the text positions only, `[batch·T × vocab]`.
    pub fn lm_forward(
        &mut self,
        prefix: Option<Var>,
        token_ids: &[usize],
        batch: usize,
        mask: &PrefixCausalMask,
    ) -> Result<Var> {
        let cfg = self.model.config();
        let p = prefix.map_or(0, |v| self.graph.value(v).rows() / batch.max(1));
        let t = mask.text_len();
        if batch == 0 || token_ids.len() != batch * t || mask.prefix_len() != p || t == 0 {
            return Err(Error::shape(
                "lm_forward",
                &[p, token_ids.len()],
                &[mask.prefix_len(), batch * t],
            ));
        }
        if let Some(v) = prefix {
            if self.graph.value(v).cols() != cfg.lm_dim || self.graph.value(v).rows() != batch * p {
                return Err(Error::shape("lm_forward prefix", self.graph.shape(v), &[batch * p, cfg.lm_dim]));
            }
        }
        let tok = self.param(self.model.lm.tok);
        let emb = self.graph.embedding(tok, token_ids)?;
        let x = match prefix {
            Some(v) => self.graph.concat_blocks(&[v, emb], batch)?,
            None => emb,
        };
        self.lm_from_embeddings(x, batch, mask)
    }

    /// Frozen LM over already embedded sequences `[batch·(P+T) × lm_dim]`
    /// (position embeddings not yet added). Returns text-position logits.
    pub fn lm_from_embeddings(&mut self, x: Var, batch: usize, mask: &PrefixCausalMask) -> Result<Var> {
        let cfg = self.model.config();
        let (p, t) = (mask.prefix_len(), mask.text_len());
        let shape = self.graph.shape(x);
        if batch == 0 || shape.len() != 2 || shape[0] != batch * (p + t) || shape[1] != cfg.lm_dim {
            return Err(Error::shape("lm_forward", shape, &[batch * (p + t), cfg.lm_dim]));
        }
        if p + t > cfg.lm_max_positions {
            return Err(Error::contract("sequence longer than the LM position table"));
        }
        let lm = self.model.lm.clone();
        let pos = self.param(lm.pos);
        let pos = self.graph.slice_rows(pos, 0, p + t)?;
        let pos = self.graph.tile_rows(pos, batch)?;
        let mut x = self.graph.add(x, pos)?;
        for layer in lm.layers {
            x = self.pre_norm_block(x, layer, cfg.lm_heads, batch, Some(mask.as_slice().to_vec()))?;
        }
        let x = self.norm(x, lm.ln_final)?;
        let text = if p > 0 { self.graph.slice_blocks(x, batch, p, t)? } else { x };
        let tok = self.param(lm.tok);
        self.graph.matmul_nt(text, tok)
    }
}

impl BitaModel {
    /// Runs the frozen image encoder on a batch of images. Output rows are
    /// grouped per image: `[batch·image_patches × image_feat_dim]`.
    pub fn encode_images(&self, images: &[&Image]) -> Result<Tensor> {
        let cfg = self.config();
        let (size, ps, grid) = (cfg.image_size, cfg.patch_size(), cfg.patch_grid());
        if images.is_empty() {
            return Err(Error::contract("no images to encode"));
        }
        let patch_dim = ps * ps * 3;
        let mut patches = Vec::with_capacity(images.len() * cfg.image_patches * patch_dim);
        for img in images {
            if img.height() != size || img.width() != size {
                return Err(Error::shape("image_encode", &[img.height(), img.width(), 3], &[size, size, 3]));
            }
            for gy in 0..grid {
                for gx in 0..grid {
                    for y in gy * ps..(gy + 1) * ps {
                        for x in gx * ps..(gx + 1) * ps {
                            patches.extend_from_slice(img.pixel(y, x));
                        }
                    }
                }
            }
        }
        let batch = images.len();
        let mut f = Forward::new(self, &[]);
        let x = f.graph.constant(Tensor::from_parts(vec![batch * cfg.image_patches, patch_dim], patches));
        let mut x = f.linear(x, self.encoder.patch)?;
        let pos = f.param(self.encoder.pos);
        let pos = f.graph.tile_rows(pos, batch)?;
        x = f.graph.add(x, pos)?;
        for layer in self.encoder.layers.clone() {
            x = f.pre_norm_block(x, layer, cfg.image_heads, batch, None)?;
        }
        Ok(f.graph.value(x).clone())
    }
}

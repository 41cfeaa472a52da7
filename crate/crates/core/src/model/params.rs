use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Which part of the pipeline a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    /// Learnable visual prompt embeddings.
    Prompts,
    /// IFT blocks (mixers, cross-attention, shared FFN and norms).
    Ift,
    /// Token and position embeddings of the IFT text branch.
    TextEmbedding,
    /// Linear bridge from IFT width to LM width.
    Projection,
    ImageEncoder,
    LanguageModel,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Prompts,
        ParamGroup::Ift,
        ParamGroup::TextEmbedding,
        ParamGroup::Projection,
        ParamGroup::ImageEncoder,
        ParamGroup::LanguageModel,
    ];

    pub fn is_frozen(self) -> bool {
        matches!(self, ParamGroup::ImageEncoder | ParamGroup::LanguageModel)
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Prompts => "visual_prompts",
            ParamGroup::Ift => "ift",
            ParamGroup::TextEmbedding => "text_embedding",
            ParamGroup::Projection => "projection",
            ParamGroup::ImageEncoder => "image_encoder",
            ParamGroup::LanguageModel => "language_model",
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub(crate) fn add(&mut self, name: String, group: ParamGroup, tensor: Tensor) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.groups.push(group);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Mutable access for optimizers and checkpoint loading. The shape must
    /// not change.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamGroup, &Tensor)> {
        self.names
            .iter()
            .zip(&self.groups)
            .zip(&self.tensors)
            .map(|((n, g), t)| (n.as_str(), *g, t))
    }

    /// Ids of every parameter in one of `groups`.
    pub fn ids_in(&self, groups: &[ParamGroup]) -> Vec<ParamId> {
        self.ids().filter(|id| groups.contains(&self.group(*id))).collect()
    }
}

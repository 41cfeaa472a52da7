use alloc::vec::Vec;

/// Attention permissions over a visual prefix of `P` rows followed by `T`
/// text tokens.
///
/// Prefix rows see the whole prefix and nothing else; text row `i` sees the
/// whole prefix plus text rows up to and including itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixCausalMask {
    prefix: usize,
    text: usize,
    allowed: Vec<bool>,
}

impl PrefixCausalMask {
    pub fn new(prefix: usize, text: usize) -> Self {
        let n = prefix + text;
        let allowed = (0..n * n)
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                if i < prefix {
                    j < prefix
                } else {
                    j < prefix || j <= i
                }
            })
            .collect();
        Self {
            prefix,
            text,
            allowed,
        }
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix
    }

    pub fn text_len(&self) -> usize {
        self.text
    }

    /// Side length `P + T`.
    pub fn size(&self) -> usize {
        self.prefix + self.text
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size() + j]
    }

    /// Row-major `[(P+T) × (P+T)]` permission matrix.
    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

pub fn build_prefix_causal_mask(prefix: usize, text: usize) -> PrefixCausalMask {
    PrefixCausalMask::new(prefix, text)
}

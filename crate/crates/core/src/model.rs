use crate::pmf::{Logits, TokenId};

/// An autoregressive scorer that evaluates several candidate positions in one call.
///
/// `forward(context, candidates)` returns `candidates.len() + 1` rows; row `j`
/// is the next-token logits after `context ++ candidates[..j]`. One call counts as
/// one function evaluation regardless of how many rows it returns. Implementations
/// must be pure: identical inputs give identical rows.
pub trait TokenModel: Sync {
    fn vocab_size(&self) -> usize;

    fn forward(&self, context: &[TokenId], candidates: &[TokenId]) -> Vec<Logits>;
}

//! Writer conditioning: per-layer soft prompts, the single-vector adapter,
//! and token contexts appended to the input.

mod hard;
mod soft;

pub use hard::{
    build_dynamic_hard_prompt, build_static_hard_prompt, build_user_identifier, cosine, dynamic_context,
    extend_input, fill_context, plain_input, similarity_order, EncoderEmbedder, HardPromptMode,
    HardPromptPlan, PromptCache, TextEmbedder,
};
pub use soft::{SoftPromptStore, UserAdapterStore};

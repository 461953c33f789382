//! Prompt templates.
//!
//! The section markers ("Previous interest summary:", "Recent behaviors:",
//! "Target item:") are load-bearing: the mock backend recovers structure from
//! the rendered text alone, exactly the way a real model reads it. Changing a
//! marker is a contract change for the mock and its planted-signal tests.

use crate::behavior::{BehaviorChunk, Interaction};

use super::{GatewayError, PromptKind};

#[derive(Debug, Clone, Copy)]
pub struct PromptLimits {
    /// Max previous interest summaries referenced by a seq prompt.
    pub k_prev: usize,
    /// Hard character budget; rendering over it is an error, never truncation.
    pub max_chars: usize,
}

impl Default for PromptLimits {
    fn default() -> Self {
        PromptLimits { k_prev: 1, max_chars: 8000 }
    }
}

/// Everything a template might reference. Leave what a kind does not need
/// unset; rendering errors if a needed part is missing.
#[derive(Default)]
pub struct PromptContext<'a> {
    /// Oldest first; templates take the most recent entries.
    pub prev_interests: &'a [String],
    pub current_interest: Option<&'a str>,
    pub chunk: Option<&'a BehaviorChunk>,
    pub item: Option<&'a Interaction>,
}

fn behavior_line(it: &Interaction) -> String {
    let verdict = if it.label { "liked" } else { "disliked" };
    match it.attrs.get("category") {
        Some(cat) => format!("- [{verdict}] {} (category: {cat})", it.title),
        None => format!("- [{verdict}] {}", it.title),
    }
}

fn item_line(it: &Interaction) -> String {
    match it.attrs.get("category") {
        Some(cat) => format!("Target item: {} (category: {cat})", it.title),
        None => format!("Target item: {}", it.title),
    }
}

fn need<'x, T>(
    value: Option<&'x T>,
    kind: PromptKind,
    what: &'static str,
) -> Result<&'x T, GatewayError>
where
    T: ?Sized,
{
    value.ok_or(GatewayError::MissingContext { kind, what })
}

/// Renders one prompt. Deterministic; the output length grows linearly with
/// the referenced chunk.
pub fn render_prompt(
    kind: PromptKind,
    ctx: &PromptContext,
    limits: &PromptLimits,
) -> Result<String, GatewayError> {
    let mut out = String::new();
    match kind {
        PromptKind::Interest => {
            let chunk = need(ctx.chunk, kind, "a behavior chunk")?;
            out.push_str(
                "Task: summarize this user's current interests from the behaviors below. \
                 Name the dominant category tokens explicitly.\n",
            );
            out.push_str(&format!("Chunk index: {}\n", chunk.chunk_index));
            if let Some(prev) = ctx.prev_interests.last() {
                out.push_str("Previous interest summary:\n");
                out.push_str(prev);
                out.push('\n');
                out.push_str(
                    "Focus on what changed: call out categories that appear now but were absent before.\n",
                );
            }
            out.push_str("Recent behaviors:\n");
            for it in &chunk.items {
                out.push_str(&behavior_line(it));
                out.push('\n');
            }
            out.push_str("Write one short paragraph naming the user's dominant categories.");
        }
        PromptKind::Item => {
            let item = need(ctx.item, kind, "a target item")?;
            out.push_str(
                "Task: describe this item and who tends to enjoy it, naming its category token.\n",
            );
            out.push_str(&item_line(item));
            out.push('\n');
            out.push_str("Write one short knowledge sentence.");
        }
        PromptKind::Seq => {
            let item = need(ctx.item, kind, "a target item")?;
            out.push_str(
                "Task: decide whether the user will like the target item, given the user's \
                 interest summaries over time. Answer Yes or No.\n",
            );
            out.push_str("Interest history (most recent last):\n");
            let start = ctx.prev_interests.len().saturating_sub(limits.k_prev);
            let window = &ctx.prev_interests[start..];
            if window.is_empty() {
                out.push_str("(no interest summaries yet)\n");
            }
            for (i, text) in window.iter().enumerate() {
                out.push_str(&format!("{}. {text}\n", i + 1));
            }
            out.push_str(&item_line(item));
            out.push_str("\nAnswer:");
        }
        PromptKind::Point => {
            let item = need(ctx.item, kind, "a target item")?;
            let current = need(ctx.current_interest, kind, "the current interest summary")?;
            out.push_str(
                "Task: decide whether the user will like the target item, given the user's \
                 current interest summary. Answer Yes or No.\n",
            );
            out.push_str("Current interest summary:\n");
            out.push_str(current);
            out.push('\n');
            out.push_str(&item_line(item));
            out.push_str("\nAnswer:");
        }
        PromptKind::Hist => {
            let item = need(ctx.item, kind, "a target item")?;
            let chunk = need(ctx.chunk, kind, "a behavior chunk")?;
            out.push_str(
                "Task: decide whether the user will like the target item, given the user's \
                 recent behaviors. Answer Yes or No.\n",
            );
            out.push_str("Recent behaviors:\n");
            for it in &chunk.items {
                out.push_str(&behavior_line(it));
                out.push('\n');
            }
            out.push_str(&item_line(item));
            out.push_str("\nAnswer:");
        }
    }
    if out.len() > limits.max_chars {
        return Err(GatewayError::OverBudget { len: out.len(), max: limits.max_chars });
    }
    Ok(out)
}

//! Prompt templates for concept identification and counterfactual generation.
//!
//! The user message is the instruction, a newline, then the labeled input.
//! Both templates are sent byte-for-byte after placeholder substitution.

pub const SYSTEM_PROMPT: &str = "You are a concept analyst.";

pub const IDENTIFY_INSTRUCTION: &str = "Given the following text, identify a group of impactful \
tokens that defines the core sentiment or concept. The token should be a good candidate for a \
counterfactual analysis. Focus on adjectives, nouns, or verbs that, if changed, would \
fundamentally alter the meaning. Output the tokens, separate each token with ' ':";

pub const COUNTERFACTUAL_INSTRUCTION: &str = "In the context of the following sentence, what are \
the most meaningful counterfactuals for the following tokens? Output each pair that separates the \
original token and the counterfactual token with a '/' and separate each pair with a ' ':";

/// Stage 1 user message.
pub fn identify_prompt(text: &str) -> String {
    format!("{IDENTIFY_INSTRUCTION}\nText: {text}")
}

/// Stage 2 user message. The `Sentense:` spelling is part of the template.
pub fn counterfactual_prompt(text: &str, tokens: &[String]) -> String {
    format!(
        "{COUNTERFACTUAL_INSTRUCTION}\nSentense: {text} Tokens: {}",
        tokens.join(" ")
    )
}

//! Automated concept discovery.
//!
//! 1. Ask an LLM for the salient tokens of a base text.
//! 2. Ask it for counterfactual replacements, as `orig/cf` pairs.
//! 3. Build each counterfactual text, capture it, and analyze the pair.
//! 4. Assemble the concept tree and a short report.
//!
//! The analyzed model is never called from here: activations come from a
//! [`CaptureSource`], either the toy model or a pre-exported bundle.

pub mod client;
pub mod prompts;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::capture::CaptureBundle;
use crate::concept::{AnalysisParams, Analyzer, PairAnalysis};
use crate::error::{Error, Result};
use crate::toymodel::{fnv1a64, make_toy_bundle, ToyInput, ToyModel};
use crate::tree::{build_tree, ConceptPairSpec, ConceptTree};

pub use client::{
    ChatClient, ChatMessage, ChatRequest, HttpTransport, LlmEndpointConfig, MockTransport,
    Transport,
};
pub use prompts::{counterfactual_prompt, identify_prompt, SYSTEM_PROMPT};

pub const BASE_LABEL: &str = "base";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    /// Pipeline stage (1-4) that raised the warning.
    pub stage: u8,
    /// Set for stage-3 warnings about a pair listed in the report.
    pub pair: Option<String>,
    pub message: String,
}

impl Warning {
    fn stage(stage: u8, message: impl Into<String>) -> Self {
        Self {
            stage,
            pair: None,
            message: message.into(),
        }
    }

    fn pair(pair: &ConceptPairSpec, message: impl Into<String>) -> Self {
        Self {
            stage: 3,
            pair: Some(pair.label()),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub base_text: String,
    pub params: AnalysisParams,
    pub identified_tokens: Vec<String>,
    pub pairs: Vec<ConceptPairSpec>,
    pub analyses: Vec<PairAnalysis>,
    pub tree: ConceptTree,
    /// One line per pair, ordered by branching layer.
    pub summary: Vec<String>,
    pub warnings: Vec<Warning>,
}

impl PipelineReport {
    pub fn pair_warning_count(&self) -> usize {
        self.warnings
            .iter()
            .filter(|w| w.stage == 3 && w.pair.is_some())
            .count()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte offset of the first occurrence of `word` in `text` not flanked by
/// word characters. Case-sensitive.
pub fn find_whole_word(text: &str, word: &str) -> Option<usize> {
    if word.is_empty() {
        return None;
    }
    text.match_indices(word).map(|(i, _)| i).find(|&i| {
        let before = text[..i].chars().next_back();
        let after = text[i + word.len()..].chars().next();
        !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char)
    })
}

/// `text` with the first whole-word `word` replaced, plus the byte offset of the edit.
pub fn replace_whole_word(text: &str, word: &str, replacement: &str) -> Option<(String, usize)> {
    let at = find_whole_word(text, word)?;
    let mut out = String::with_capacity(text.len() + replacement.len());
    out.push_str(&text[..at]);
    out.push_str(replacement);
    out.push_str(&text[at + word.len()..]);
    Some((out, at))
}

/// Splits `text` into runs of word characters and single punctuation
/// characters, returning each piece with its byte offset.
pub fn word_pieces(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if is_word_char(c) {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            out.push((s, &text[s..i]));
        }
        if !c.is_whitespace() {
            out.push((i, &text[i..i + c.len_utf8()]));
        }
    }
    if let Some(s) = start {
        out.push((s, &text[s..]));
    }
    out
}

fn trim_item(s: &str) -> &str {
    s.trim_matches(|c: char| {
        matches!(
            c,
            ',' | ';' | '.' | '"' | '\'' | '`' | '(' | ')' | '[' | ']'
        )
    })
}

/// Parses a stage-1 reply into tokens that occur as whole words in `text`.
pub fn parse_identified(
    reply: &str,
    text: &str,
    warnings: &mut Vec<Warning>,
) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut seen = HashSet::new();
    for raw in reply.split_whitespace() {
        let tok = trim_item(raw);
        if tok.is_empty() {
            continue;
        }
        if find_whole_word(text, tok).is_none() {
            warnings.push(Warning::stage(
                1,
                format!("dropped token {tok:?}: not a whole word of the text"),
            ));
            continue;
        }
        if !seen.insert(tok.to_string()) {
            warnings.push(Warning::stage(
                1,
                format!("duplicate token {tok:?} ignored"),
            ));
            continue;
        }
        tokens.push(tok.to_string());
    }
    if tokens.is_empty() {
        return Err(Error::EmptyParse(format!(
            "no usable tokens in identification reply {reply:?}"
        )));
    }
    Ok(tokens)
}

/// Parses a stage-2 reply of space-separated `orig/cf` items, split on the
/// first `/`. Returns `(orig, cf)` token pairs.
pub fn parse_counterfactuals(
    reply: &str,
    requested: &[String],
    warnings: &mut Vec<Warning>,
) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for raw in reply.split_whitespace() {
        let item = trim_item(raw);
        if item.is_empty() {
            continue;
        }
        let Some((orig, cf)) = item.split_once('/') else {
            warnings.push(Warning::stage(
                2,
                format!("skipped {item:?}: no '/' separator"),
            ));
            continue;
        };
        if orig.is_empty() || cf.is_empty() {
            warnings.push(Warning::stage(2, format!("skipped {item:?}: empty side")));
            continue;
        }
        if !requested.iter().any(|t| t == orig) {
            warnings.push(Warning::stage(
                2,
                format!("dropped {item:?}: {orig:?} was not a requested token"),
            ));
            continue;
        }
        if orig == cf {
            warnings.push(Warning::stage(2, format!("dropped {item:?}: no change")));
            continue;
        }
        if !seen.insert((orig.to_string(), cf.to_string())) {
            warnings.push(Warning::stage(
                2,
                format!("duplicate pair {item:?} ignored"),
            ));
            continue;
        }
        pairs.push((orig.to_string(), cf.to_string()));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyParse(format!(
            "no usable pairs in counterfactual reply {reply:?}"
        )));
    }
    Ok(pairs)
}

/// Stage 1: salient tokens of `text`.
pub fn identify_concepts<T: Transport>(
    text: &str,
    client: &ChatClient<T>,
    warnings: &mut Vec<Warning>,
) -> Result<Vec<String>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput("base text is empty".into()));
    }
    let reply = client.complete(SYSTEM_PROMPT, &identify_prompt(text))?;
    parse_identified(&reply, text, warnings)
}

/// Stage 2: counterfactual pairs for `tokens`, bound to trace labels
/// `base` / `cf<i>` and the edited word position in the toy tokenization.
pub fn generate_counterfactuals<T: Transport>(
    text: &str,
    tokens: &[String],
    client: &ChatClient<T>,
    warnings: &mut Vec<Warning>,
) -> Result<Vec<ConceptPairSpec>> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput(
            "no tokens to generate counterfactuals for".into(),
        ));
    }
    let reply = client.complete(SYSTEM_PROMPT, &counterfactual_prompt(text, tokens))?;
    let raw = parse_counterfactuals(&reply, tokens, warnings)?;
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(i, (orig, cf))| {
            let edited_token_index = find_whole_word(text, &orig)
                .and_then(|at| word_pieces(text).iter().position(|&(start, _)| start == at));
            ConceptPairSpec {
                original_token: orig,
                counterfactual_token: cf,
                original_trace_label: BASE_LABEL.to_string(),
                counterfactual_trace_label: format!("cf{i}"),
                edited_token_index,
            }
        })
        .collect())
}

/// Maps words to toy-model token ids by hashing.
#[derive(Debug, Clone)]
pub struct ToyAdapter {
    pub model: ToyModel,
}

impl ToyAdapter {
    pub fn new(model: ToyModel) -> Self {
        Self { model }
    }

    pub fn token_ids(&self, text: &str) -> Vec<usize> {
        let vocab = self.model.config.vocab_size as u64;
        word_pieces(text)
            .into_iter()
            .map(|(_, w)| (fnv1a64(w) % vocab) as usize)
            .collect()
    }

    pub fn capture(&self, inputs: &[(String, String, Option<usize>)]) -> Result<CaptureBundle> {
        let toy_inputs: Vec<ToyInput> = inputs
            .iter()
            .map(|(label, text, edited)| {
                ToyInput::new(label.clone(), self.token_ids(text), *edited).with_text(text.clone())
            })
            .collect();
        make_toy_bundle(&self.model, &toy_inputs)
    }
}

pub enum CaptureSource {
    Toy(ToyAdapter),
    /// Pre-exported traces, matched to texts by exact trace text.
    Bundle(CaptureBundle),
}

/// Runs all four stages. Pairs that cannot be analyzed become stage-3
/// warnings; the run fails only when no pair survives.
pub fn run_pipeline<T: Transport>(
    text: &str,
    client: &ChatClient<T>,
    source: &CaptureSource,
    params: AnalysisParams,
    jobs: usize,
) -> Result<PipelineReport> {
    let mut warnings = Vec::new();
    let tokens = identify_concepts(text, client, &mut warnings)?;
    let mut pairs = generate_counterfactuals(text, &tokens, client, &mut warnings)?;

    let mut cf_texts = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let (cf_text, _) = replace_whole_word(text, &p.original_token, &p.counterfactual_token)
            .expect("stage 2 only keeps tokens found in the text");
        cf_texts.push(cf_text);
    }

    let owned;
    let bundle: &CaptureBundle = match source {
        CaptureSource::Toy(adapter) => {
            let mut inputs = vec![(BASE_LABEL.to_string(), text.to_string(), None)];
            for (p, cf_text) in pairs.iter().zip(&cf_texts) {
                inputs.push((
                    p.counterfactual_trace_label.clone(),
                    cf_text.clone(),
                    p.edited_token_index,
                ));
            }
            owned = adapter.capture(&inputs)?;
            &owned
        }
        CaptureSource::Bundle(b) => {
            let base = b.trace_by_text(text).ok_or_else(|| {
                Error::MissingTrace(format!("no trace in the bundle has the base text {text:?}"))
            })?;
            for p in pairs.iter_mut() {
                p.original_trace_label = base.label.clone();
            }
            b
        }
    };

    let mut runnable = Vec::new();
    for (p, cf_text) in pairs.iter_mut().zip(&cf_texts) {
        if let CaptureSource::Bundle(_) = source {
            match bundle.trace_by_text(cf_text) {
                Some(t) => p.counterfactual_trace_label = t.label.clone(),
                None => {
                    p.counterfactual_trace_label.clear();
                    warnings.push(Warning::pair(
                        p,
                        format!("no captured trace for counterfactual text {cf_text:?}"),
                    ));
                    continue;
                }
            }
        }
        runnable.push(p.clone());
    }

    let analyzer = Analyzer::new(bundle);
    let mut analyses = Vec::with_capacity(runnable.len());
    for (p, result) in runnable
        .iter()
        .zip(analyzer.analyze_many(&runnable, params, jobs))
    {
        match result {
            Ok(a) => analyses.push(a),
            Err(e) => warnings.push(Warning::pair(p, format!("analysis failed: {e}"))),
        }
    }
    if analyses.is_empty() {
        return Err(Error::NoUsablePairs);
    }

    let tree = build_tree(&analyses)?;
    let mut ordered: Vec<&PairAnalysis> = analyses.iter().collect();
    ordered.sort_by_key(|a| {
        (
            a.branching_layer.is_none(),
            a.branching_layer,
            a.pair_label.clone(),
        )
    });
    let summary = ordered
        .iter()
        .map(|a| match a.branching_layer {
            Some(l) => format!("{}: separates at layer {l}", a.pair_label),
            None => format!(
                "{}: inseparable (all scores >= {})",
                a.pair_label, params.tau
            ),
        })
        .collect();

    Ok(PipelineReport {
        base_text: text.to_string(),
        params,
        identified_tokens: tokens,
        pairs,
        analyses,
        tree,
        summary,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "The city mayor decided to make bus rides free for everyone. How will most \
                        people in the city probably feel happy about this decision?";

    #[test]
    fn whole_word_matching() {
        assert_eq!(find_whole_word("a cat concatenated", "cat"), Some(2));
        assert_eq!(find_whole_word("concatenate cat", "cat"), Some(12));
        assert_eq!(find_whole_word("category", "cat"), None);
        assert_eq!(find_whole_word("Happy happy", "happy"), Some(6));
        assert_eq!(find_whole_word("feel happy?", "happy"), Some(5));
        assert_eq!(find_whole_word("x", ""), None);
        let (s, at) = replace_whole_word(TEXT, "free", "expensive").unwrap();
        assert!(s.contains("bus rides expensive for everyone."));
        assert_eq!(&TEXT[at..at + 4], "free");
    }

    #[test]
    fn pieces() {
        let p: Vec<&str> = word_pieces("Hi, you're fine!")
            .into_iter()
            .map(|(_, w)| w)
            .collect();
        assert_eq!(p, vec!["Hi", ",", "you", "'", "re", "fine", "!"]);
    }

    #[test]
    fn parse_stage_one() {
        let mut w = Vec::new();
        let t = parse_identified("mayor free everyone happy", TEXT, &mut w).unwrap();
        assert_eq!(t, vec!["mayor", "free", "everyone", "happy"]);
        assert!(w.is_empty());

        let t = parse_identified("mayor, banana happy mayor", TEXT, &mut w).unwrap();
        assert_eq!(t, vec!["mayor", "happy"]);
        assert_eq!(w.len(), 2);
        assert!(w[0].message.contains("banana"));

        assert!(matches!(
            parse_identified("", TEXT, &mut w),
            Err(Error::EmptyParse(_))
        ));
        assert!(matches!(
            parse_identified("zebra", TEXT, &mut w),
            Err(Error::EmptyParse(_))
        ));
    }

    #[test]
    fn parse_stage_two() {
        let req: Vec<String> = ["mayor", "free", "everyone", "happy"]
            .map(String::from)
            .to_vec();
        let mut w = Vec::new();
        let p = parse_counterfactuals(
            "mayor/citizen free/expensive everyone/students happy/angry",
            &req,
            &mut w,
        )
        .unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p[1], ("free".to_string(), "expensive".to_string()));
        assert!(w.is_empty());

        let p = parse_counterfactuals(
            "happy-angry free/cheap free/cheap rides/walks happy/a/b free/free",
            &req,
            &mut w,
        )
        .unwrap();
        assert_eq!(
            p,
            vec![
                ("free".to_string(), "cheap".to_string()),
                ("happy".to_string(), "a/b".to_string())
            ]
        );
        assert_eq!(w.len(), 4);
        assert!(w.iter().all(|x| x.stage == 2 && x.pair.is_none()));
        assert!(parse_counterfactuals("nothing-here", &req, &mut w).is_err());
    }

    #[test]
    fn toy_adapter_is_stable() {
        let m = ToyModel::init_seeded(Default::default()).unwrap();
        let a = ToyAdapter::new(m);
        let ids = a.token_ids("the cat sat.");
        assert_eq!(ids.len(), 4);
        assert_eq!(ids, a.token_ids("the cat sat."));
        assert!(ids.iter().all(|&i| i < 64));
    }
}

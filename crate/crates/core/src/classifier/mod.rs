//! Relevance classification at sentence and page granularity.

mod baseline;
mod eval;
pub mod synthetic;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

pub use baseline::{
    featurize, train_baseline, BaselineModel, Features, TrainConfig, TrainOutcome, TrainedOn,
    DEFAULT_DIM, DEFAULT_ORDERS,
};
pub use eval::{evaluate, Confusion, EvalReport, LabelScores};

use crate::model::{Granularity, RelevanceVerdict};
use crate::remote::{RemoteClient, RemoteError};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("training corpus needs both relevant and non-relevant examples")]
    SingleLabel,
    #[error("model is untrained")]
    Untrained,
    #[error("predictions ({predictions}) and gold labels ({gold}) differ in length")]
    LengthMismatch { predictions: usize, gold: usize },
    #[error("invalid classifier configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("model file format: {0}")]
    Format(String),
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

impl ClassifierError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ClassifierError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Unicode word segmentation, lowercased.
pub fn tokenize(text: &str) -> Vec<String> {
    text.unicode_words().map(str::to_lowercase).collect()
}

/// Lowercased words that end a sentence-internal abbreviation.
const ABBREVIATIONS: [&str; 14] = [
    "e.g.", "i.e.", "etc.", "vs.", "mr.", "mrs.", "ms.", "dr.", "inc.", "ltd.", "no.", "fig.",
    "approx.", "cf.",
];

/// Splits at a run of `.`, `!` or `?` that is followed by whitespace and an
/// uppercase letter, or by the end of the text. Sentences are trimmed and
/// paired with their byte offset.
pub fn split_sentences(text: &str) -> Vec<(&str, usize)> {
    let mut out = Vec::new();
    let mut start = 0usize;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        if !matches!(chars[i].1, '.' | '!' | '?') {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < chars.len() && matches!(chars[j].1, '.' | '!' | '?') {
            j += 1;
        }
        let run_end = chars.get(j).map_or(text.len(), |c| c.0);
        let mut k = j;
        while k < chars.len() && chars[k].1.is_whitespace() {
            k += 1;
        }
        let at_end = k == chars.len();
        let boundary = at_end || (k > j && chars[k].1.is_uppercase());
        if boundary && !ends_with_abbreviation(&text[start..run_end]) {
            push_trimmed(text, start, run_end, &mut out);
            start = run_end;
        }
        i = j;
    }
    push_trimmed(text, start, text.len(), &mut out);
    out
}

fn ends_with_abbreviation(segment: &str) -> bool {
    let last = segment.rsplit(char::is_whitespace).next().unwrap_or("");
    let last = last.trim_start_matches(|c: char| !c.is_alphanumeric());
    let lower = last.to_lowercase();
    ABBREVIATIONS.contains(&lower.as_str())
}

fn push_trimmed<'a>(text: &'a str, start: usize, end: usize, out: &mut Vec<(&'a str, usize)>) {
    let seg = &text[start..end];
    let trimmed = seg.trim_start();
    let offset = start + (seg.len() - trimmed.len());
    let trimmed = trimmed.trim_end();
    if !trimmed.is_empty() {
        out.push((trimmed, offset));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingPolicy {
    pub window: usize,
    pub stride: usize,
    pub aggregation: Aggregation,
}

impl Default for ChunkingPolicy {
    fn default() -> Self {
        ChunkingPolicy {
            window: 512,
            stride: 256,
            aggregation: Aggregation::Max,
        }
    }
}

impl ChunkingPolicy {
    pub fn new(
        window: usize,
        stride: usize,
        aggregation: Aggregation,
    ) -> Result<Self, ClassifierError> {
        let p = ChunkingPolicy {
            window,
            stride,
            aggregation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.stride == 0 || self.stride > self.window {
            return Err(ClassifierError::Config(format!(
                "chunking needs 0 < stride <= window, got stride {} window {}",
                self.stride, self.window
            )));
        }
        Ok(())
    }

    /// Token ranges `[start, end)` over `n` tokens. Windows start every
    /// `stride` tokens until one reaches the end; the last may be short.
    pub fn windows(&self, n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        loop {
            let end = (start + self.window).min(n);
            out.push((start, end));
            if end >= n {
                return out;
            }
            start += self.stride;
        }
    }

    pub fn aggregate(&self, scores: &[f64]) -> f64 {
        match self.aggregation {
            Aggregation::Max => scores.iter().copied().fold(0.0, f64::max),
            Aggregation::Mean if scores.is_empty() => 0.0,
            Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        }
    }
}

pub fn score_page(
    model: &BaselineModel,
    text: &str,
    policy: &ChunkingPolicy,
    threshold: f64,
) -> Result<RelevanceVerdict, ClassifierError> {
    policy.validate()?;
    if !model.is_trained() {
        return Err(ClassifierError::Untrained);
    }
    let tokens = tokenize(text);
    let windows = policy.windows(tokens.len());
    let scores = crate::par::map(&windows, |&(s, e)| model.score_tokens(&tokens[s..e]))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RelevanceVerdict::new(
        policy.aggregate(&scores),
        threshold,
        Granularity::Page,
        model.model_id(),
    ))
}

/// Anything that turns text into a relevance verdict.
pub trait Scorer: Send + Sync {
    fn score(
        &self,
        text: &str,
        granularity: Granularity,
    ) -> Result<RelevanceVerdict, ClassifierError>;
    fn model_id(&self) -> String;
}

#[derive(Debug, Clone)]
pub struct BaselineScorer {
    model: Arc<BaselineModel>,
    policy: ChunkingPolicy,
    threshold: f64,
}

impl BaselineScorer {
    pub fn new(
        model: Arc<BaselineModel>,
        policy: ChunkingPolicy,
        threshold: f64,
    ) -> Result<Self, ClassifierError> {
        policy.validate()?;
        if !model.is_trained() {
            return Err(ClassifierError::Untrained);
        }
        Ok(BaselineScorer {
            model,
            policy,
            threshold,
        })
    }

    pub fn model(&self) -> &BaselineModel {
        &self.model
    }
}

impl Scorer for BaselineScorer {
    fn score(
        &self,
        text: &str,
        granularity: Granularity,
    ) -> Result<RelevanceVerdict, ClassifierError> {
        match granularity {
            Granularity::Sentence => Ok(RelevanceVerdict::new(
                self.model.score_text(text)?,
                self.threshold,
                Granularity::Sentence,
                self.model.model_id(),
            )),
            Granularity::Page => score_page(&self.model, text, &self.policy, self.threshold),
        }
    }

    fn model_id(&self) -> String {
        self.model.model_id().to_string()
    }
}

/// Client for `POST /v1/classify`.
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    client: RemoteClient,
    threshold: f64,
}

pub const CLASSIFY_PATH: &str = "/v1/classify";

impl RemoteScorer {
    pub fn new(client: RemoteClient, threshold: f64) -> Self {
        RemoteScorer { client, threshold }
    }
}

pub fn remote_score(
    client: &RemoteClient,
    text: &str,
    granularity: Granularity,
    threshold: f64,
) -> Result<RelevanceVerdict, ClassifierError> {
    let url = format!("{}{}", client.endpoint(), CLASSIFY_PATH);
    let body = json!({ "text": text, "granularity": granularity.as_str() });
    let resp = client.post_json(CLASSIFY_PATH, &body)?;
    let score = resp
        .get("score")
        .ok_or_else(|| RemoteError::missing_field(&url, "score"))?
        .as_f64()
        .ok_or_else(|| RemoteError::protocol(&url, "field `score` is not a number"))?;
    if !(0.0..=1.0).contains(&score) {
        return Err(
            RemoteError::protocol(&url, format!("field `score` = {score} outside [0, 1]")).into(),
        );
    }
    // model_id may be omitted by minimal servers; fall back to the endpoint.
    let model_id = match resp.get("model_id") {
        None | Some(serde_json::Value::Null) => format!("remote:{}", client.endpoint()),
        Some(v) => v
            .as_str()
            .ok_or_else(|| RemoteError::protocol(&url, "field `model_id` is not a string"))?
            .to_string(),
    };
    Ok(RelevanceVerdict::new(
        score,
        threshold,
        granularity,
        model_id,
    ))
}

impl Scorer for RemoteScorer {
    fn score(
        &self,
        text: &str,
        granularity: Granularity,
    ) -> Result<RelevanceVerdict, ClassifierError> {
        remote_score(&self.client, text, granularity, self.threshold)
    }

    fn model_id(&self) -> String {
        format!("remote:{}", self.client.endpoint())
    }
}

/// Tries `primary`; on a remote failure, logs and answers with `fallback`.
pub struct FallbackScorer {
    primary: Box<dyn Scorer>,
    fallback: Box<dyn Scorer>,
}

impl FallbackScorer {
    pub fn new(primary: Box<dyn Scorer>, fallback: Box<dyn Scorer>) -> Self {
        FallbackScorer { primary, fallback }
    }
}

impl Scorer for FallbackScorer {
    fn score(
        &self,
        text: &str,
        granularity: Granularity,
    ) -> Result<RelevanceVerdict, ClassifierError> {
        match self.primary.score(text, granularity) {
            Err(ClassifierError::Remote(e)) => {
                log::warn!(
                    "remote scorer failed, using {}: {e}",
                    self.fallback.model_id()
                );
                self.fallback.score(text, granularity)
            }
            other => other,
        }
    }

    fn model_id(&self) -> String {
        self.primary.model_id()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trained() -> BaselineModel {
        train_baseline(
            &synthetic::separable_corpus(120, 5),
            &TrainConfig {
                dim: 1 << 12,
                ..TrainConfig::default()
            },
        )
        .unwrap()
        .model
    }

    #[test]
    fn sentence_examples() {
        let t = "New C2 found. IP is 1.2.3.4.";
        assert_eq!(
            split_sentences(t),
            vec![("New C2 found.", 0), ("IP is 1.2.3.4.", 14)]
        );
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("   \n ").is_empty());
        assert_eq!(
            split_sentences("see http://a.b/c. done"),
            vec![("see http://a.b/c. done", 0)]
        );
    }

    #[test]
    fn sentence_abbreviations_and_runs() {
        assert_eq!(
            split_sentences("Tools, e.g. Mimikatz, were used. Then what?! Nothing"),
            vec![
                ("Tools, e.g. Mimikatz, were used.", 0),
                ("Then what?!", 33),
                ("Nothing", 45)
            ]
        );
        assert_eq!(
            split_sentences("Ask Dr. Smith."),
            vec![("Ask Dr. Smith.", 0)]
        );
        assert_eq!(
            split_sentences("version 2.0 Released"),
            vec![("version 2.0 Released", 0)]
        );
    }

    #[test]
    fn window_enumeration() {
        let p = ChunkingPolicy::default();
        assert_eq!(p.windows(1000), vec![(0, 512), (256, 768), (512, 1000)]);
        assert_eq!(p.windows(100), vec![(0, 100)]);
        assert_eq!(p.windows(0), vec![(0, 0)]);
        assert_eq!(p.windows(512), vec![(0, 512)]);
        assert_eq!(p.windows(513), vec![(0, 512), (256, 513)]);
    }

    #[test]
    fn policy_validation() {
        assert!(ChunkingPolicy::new(4, 0, Aggregation::Max).is_err());
        assert!(ChunkingPolicy::new(4, 5, Aggregation::Max).is_err());
        assert!(ChunkingPolicy::new(4, 4, Aggregation::Mean).is_ok());
    }

    #[test]
    fn aggregation_examples() {
        let max = ChunkingPolicy::default();
        assert_eq!(max.aggregate(&[0.2, 0.9, 0.4]), 0.9);
        let mean = ChunkingPolicy {
            aggregation: Aggregation::Mean,
            ..max
        };
        assert!((mean.aggregate(&[0.2, 0.9, 0.4]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn thousand_token_page_scores_three_windows() {
        let m = trained();
        let words: Vec<String> = (0..1000)
            .map(|i| {
                if i == 700 {
                    "ransomware".into()
                } else {
                    format!("w{i}")
                }
            })
            .collect();
        let text = words.join(" ");
        let p = ChunkingPolicy::default();
        let v = score_page(&m, &text, &p, 0.5).unwrap();
        let toks = tokenize(&text);
        assert_eq!(toks.len(), 1000);
        let by_hand = [
            m.score_tokens(&toks[0..512]).unwrap(),
            m.score_tokens(&toks[256..768]).unwrap(),
            m.score_tokens(&toks[512..1000]).unwrap(),
        ];
        assert_eq!(v.score, by_hand.iter().copied().fold(0.0, f64::max));
        assert_eq!(v.granularity, Granularity::Page);
    }

    #[test]
    fn short_page_equals_text_score() {
        let m = trained();
        let t = "new botnet payload seen today";
        let v = score_page(&m, t, &ChunkingPolicy::default(), 0.5).unwrap();
        assert_eq!(v.score, m.score_text(t).unwrap());
        assert_eq!(m.score_text(t).unwrap(), m.score_text(t).unwrap());
    }

    #[test]
    fn threshold_flips_exactly() {
        let m = trained();
        let t = "trojan beacon";
        let s = m.score_text(t).unwrap();
        let scorer =
            |th| BaselineScorer::new(Arc::new(m.clone()), ChunkingPolicy::default(), th).unwrap();
        assert!(
            scorer(s - 1e-6)
                .score(t, Granularity::Sentence)
                .unwrap()
                .relevant
        );
        assert!(scorer(s).score(t, Granularity::Sentence).unwrap().relevant);
        assert!(
            !scorer(s + 1e-6)
                .score(t, Granularity::Sentence)
                .unwrap()
                .relevant
        );
    }

    #[test]
    fn untrained_scorer_rejected() {
        assert!(score_page(
            &BaselineModel::default(),
            "x",
            &ChunkingPolicy::default(),
            0.5
        )
        .is_err());
        assert!(BaselineScorer::new(
            Arc::new(BaselineModel::default()),
            ChunkingPolicy::default(),
            0.5
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn sentences_cover_non_whitespace(text in "[A-Za-z0-9 .!?\n,:/]{0,120}") {
            let parts = split_sentences(&text);
            let mut joined = String::new();
            let mut last_end = 0;
            for (s, off) in &parts {
                prop_assert_eq!(&text[*off..*off + s.len()], *s);
                prop_assert!(*off >= last_end);
                prop_assert!(!s.is_empty() && s.trim() == *s);
                last_end = off + s.len();
                joined.push_str(s);
            }
            let strip = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
            prop_assert_eq!(strip(&joined), strip(&text));
        }

        #[test]
        fn wide_window_reduces_to_text_score(words in proptest::collection::vec("[a-z]{1,8}", 0..40)) {
            let m = trained();
            let text = words.join(" ");
            let p = ChunkingPolicy { window: 64, stride: 32, aggregation: Aggregation::Max };
            let v = score_page(&m, &text, &p, 0.5).unwrap();
            prop_assert_eq!(v.score, m.score_text(&text).unwrap());
        }

        #[test]
        fn max_aggregation_is_monotone(mut scores in proptest::collection::vec(0.0f64..=1.0, 1..20), extra in 0.0f64..=1.0) {
            let p = ChunkingPolicy::default();
            let before = p.aggregate(&scores);
            scores.push(extra);
            prop_assert!(p.aggregate(&scores) >= before);
        }
    }
}

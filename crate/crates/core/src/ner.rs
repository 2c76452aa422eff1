//! Entity tagging over the five-label scheme: IOB decoding, a deterministic
//! gazetteer+pattern tagger, and the remote `/v1/ner` client.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

use crate::extractor::Extractor;
use crate::model::{byte_to_char, char_slice, EntityLabel, EntitySpan, Indicator, IndicatorType};
use crate::remote::{RemoteClient, RemoteError};

#[derive(Debug, Error)]
pub enum NerError {
    #[error("{tokens} tokens but {tags} tags")]
    LengthMismatch { tokens: usize, tags: usize },
    #[error("unknown IOB tag `{0}`")]
    UnknownTag(String),
    #[error("token {index} has invalid offsets [{start}, {end})")]
    BadToken {
        index: usize,
        start: usize,
        end: usize,
    },
    #[error("gazetteer: {0}")]
    Gazetteer(String),
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IobTag {
    O,
    B(EntityLabel),
    I(EntityLabel),
}

impl FromStr for IobTag {
    type Err = NerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(IobTag::O);
        }
        let unknown = || NerError::UnknownTag(s.to_string());
        let (prefix, label) = s.split_once('-').ok_or_else(unknown)?;
        let label = EntityLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == label)
            .ok_or_else(unknown)?;
        match prefix {
            "B" => Ok(IobTag::B(label)),
            "I" => Ok(IobTag::I(label)),
            _ => Err(unknown()),
        }
    }
}

/// A token with char offsets into its host text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IobToken {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl IobToken {
    pub fn new(text: impl Into<String>, start: usize, end: usize) -> Self {
        IobToken {
            text: text.into(),
            start,
            end,
        }
    }
}

/// Whitespace tokenization with char offsets, handy for feeding `decode_iob`.
pub fn whitespace_tokens(text: &str) -> Vec<IobToken> {
    let mut out = Vec::new();
    let mut cur: Option<(usize, String)> = None;
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            if let Some((s, t)) = cur.take() {
                out.push(IobToken::new(t, s, i));
            }
        } else {
            cur.get_or_insert_with(|| (i, String::new())).1.push(c);
        }
    }
    if let Some((s, t)) = cur {
        let n = s + t.chars().count();
        out.push(IobToken::new(t, s, n));
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Decoded {
    pub spans: Vec<EntitySpan>,
    /// Orphan `I-` tags that were treated as `B-`.
    pub repairs: usize,
}

/// Groups a `B-` tag and the following `I-` tags of the same label into one
/// span. An `I-` that does not continue a run of its label opens a new span
/// and counts as a repair.
pub fn decode_iob(host: &str, tokens: &[IobToken], tags: &[&str]) -> Result<Decoded, NerError> {
    if tokens.len() != tags.len() {
        return Err(NerError::LengthMismatch {
            tokens: tokens.len(),
            tags: tags.len(),
        });
    }
    let tags: Vec<IobTag> = tags.iter().map(|t| t.parse()).collect::<Result<_, _>>()?;
    let host_len = host.chars().count();
    let mut prev_end = 0;
    for (index, t) in tokens.iter().enumerate() {
        if t.start >= t.end || t.end > host_len || t.start < prev_end {
            return Err(NerError::BadToken {
                index,
                start: t.start,
                end: t.end,
            });
        }
        prev_end = t.end;
    }

    let mut out = Decoded::default();
    let mut open: Option<(EntityLabel, usize, usize)> = None;
    let close = |open: &mut Option<(EntityLabel, usize, usize)>, spans: &mut Vec<EntitySpan>| {
        if let Some((label, s, e)) = open.take() {
            spans.push(
                EntitySpan::new(host, label, tokens[s].start, tokens[e].end)
                    .expect("token offsets checked"),
            );
        }
    };
    for (i, tag) in tags.iter().enumerate() {
        match *tag {
            IobTag::O => close(&mut open, &mut out.spans),
            IobTag::B(label) => {
                close(&mut open, &mut out.spans);
                open = Some((label, i, i));
            }
            IobTag::I(label) => match open.as_mut() {
                Some((l, _, e)) if *l == label => *e = i,
                _ => {
                    close(&mut open, &mut out.spans);
                    out.repairs += 1;
                    open = Some((label, i, i));
                }
            },
        }
    }
    close(&mut open, &mut out.spans);
    Ok(out)
}

/// Case-insensitive whole-word term list mapped to entity labels.
#[derive(Debug, Clone)]
pub struct Gazetteer {
    terms: HashMap<String, EntityLabel>,
    pattern: Option<Regex>,
}

const BUILTIN_GAZETTEER: &str = include_str!("../fixtures/gazetteer.json");

impl Default for Gazetteer {
    fn default() -> Self {
        Gazetteer::builtin()
    }
}

impl Gazetteer {
    pub fn empty() -> Self {
        Gazetteer {
            terms: HashMap::new(),
            pattern: None,
        }
    }

    pub fn builtin() -> Self {
        Gazetteer::from_json(BUILTIN_GAZETTEER).expect("bundled gazetteer is valid")
    }

    pub fn from_entries<'a, I>(entries: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, EntityLabel)>,
    {
        let mut terms = HashMap::new();
        for (term, label) in entries {
            let term = term.trim();
            if !term.is_empty() {
                terms.entry(term.to_lowercase()).or_insert(label);
            }
        }
        let mut keys: Vec<&String> = terms.keys().collect();
        // Longest first so alternation prefers "Cobalt Strike" over "Cobalt".
        keys.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        let pattern = (!keys.is_empty()).then(|| {
            let alt: Vec<String> = keys.iter().map(|k| regex::escape(k)).collect();
            Regex::new(&format!(r"(?i)\b(?:{})\b", alt.join("|"))).expect("escaped terms")
        });
        Gazetteer { terms, pattern }
    }

    /// `{"Malware": ["Emotet", ...], "System": [...], ...}`
    pub fn from_json(json: &str) -> Result<Self, NerError> {
        let raw: BTreeMap<String, Vec<String>> =
            serde_json::from_str(json).map_err(|e| NerError::Gazetteer(e.to_string()))?;
        let mut entries = Vec::new();
        for (label, terms) in &raw {
            let label = EntityLabel::from_str(label).map_err(NerError::Gazetteer)?;
            entries.extend(terms.iter().map(|t| (t.as_str(), label)));
        }
        Ok(Gazetteer::from_entries(entries))
    }

    pub fn load(path: &Path) -> Result<Self, NerError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| NerError::Gazetteer(format!("{}: {e}", path.display())))?;
        Gazetteer::from_json(&s)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Byte ranges of whole-word term hits, left to right.
    fn hits(&self, text: &str) -> Vec<(EntityLabel, usize, usize)> {
        let Some(re) = &self.pattern else {
            return Vec::new();
        };
        re.find_iter(text)
            .filter_map(|m| {
                self.terms
                    .get(&m.as_str().to_lowercase())
                    .map(|&l| (l, m.start(), m.end()))
            })
            .collect()
    }
}

/// Offline tagger: extractor patterns give `Indicator` spans (CVE ids give
/// `Vulnerability`), the gazetteer gives the rest. Pattern hits win overlaps.
#[derive(Debug, Clone, Default)]
pub struct FallbackTagger {
    extractor: Extractor,
    gazetteer: Gazetteer,
}

impl FallbackTagger {
    pub fn new(extractor: Extractor, gazetteer: Gazetteer) -> Self {
        FallbackTagger {
            extractor,
            gazetteer,
        }
    }

    pub fn tag(&self, text: &str) -> Vec<EntitySpan> {
        let epoch = chrono::DateTime::UNIX_EPOCH;
        let mut accepted: Vec<(EntityLabel, usize, usize)> = Vec::new();
        let overlaps = |acc: &[(EntityLabel, usize, usize)], s: usize, e: usize| {
            acc.iter().any(|&(_, a, b)| s < b && a < e)
        };
        for m in self.extractor.matches(text) {
            if Indicator::new(&m.value, m.kind, epoch).is_err() {
                continue;
            }
            let label = if m.kind == IndicatorType::Cve {
                EntityLabel::Vulnerability
            } else {
                EntityLabel::Indicator
            };
            if !overlaps(&accepted, m.start, m.end) {
                accepted.push((label, m.start, m.end));
            }
        }
        for (label, s, e) in self.gazetteer.hits(text) {
            if !overlaps(&accepted, s, e) {
                accepted.push((label, s, e));
            }
        }
        accepted.sort_by_key(|&(_, s, _)| s);
        accepted
            .into_iter()
            .map(|(label, s, e)| {
                EntitySpan::new(text, label, byte_to_char(text, s), byte_to_char(text, e))
                    .expect("byte ranges come from matches over text")
            })
            .collect()
    }
}

pub fn tag_fallback(text: &str) -> Vec<EntitySpan> {
    FallbackTagger::default().tag(text)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Tagged {
    pub spans: Vec<EntitySpan>,
    /// Spans received but rejected by offset validation.
    pub dropped: usize,
}

pub const NER_PATH: &str = "/v1/ner";

#[derive(Deserialize)]
struct WireSpan {
    label: String,
    start: usize,
    end: usize,
}

fn is_word_char(c: Option<char>) -> bool {
    c.is_some_and(char::is_alphanumeric)
}

/// Checks a remote span against the host text. A span must lie in range
/// and must not cut through a word at either edge.
fn accept_span(chars: &[char], host: &str, w: &WireSpan) -> Option<EntitySpan> {
    let label = EntityLabel::from_str(&w.label).ok()?;
    let span = EntitySpan::new(host, label, w.start, w.end).ok()?;
    let at = |i: usize| chars.get(i).copied();
    let cuts_start = w.start > 0 && is_word_char(at(w.start - 1)) && is_word_char(at(w.start));
    let cuts_end = is_word_char(at(w.end - 1)) && is_word_char(at(w.end));
    (!cuts_start && !cuts_end).then_some(span)
}

pub fn tag_remote(client: &RemoteClient, text: &str) -> Result<Tagged, NerError> {
    if text.is_empty() {
        return Ok(Tagged::default());
    }
    let url = format!("{}{}", client.endpoint(), NER_PATH);
    let resp = client.post_json(NER_PATH, &json!({ "text": text }))?;
    let spans = resp
        .get("spans")
        .ok_or_else(|| RemoteError::missing_field(&url, "spans"))?
        .as_array()
        .ok_or_else(|| RemoteError::protocol(&url, "field `spans` is not an array"))?;
    let chars: Vec<char> = text.chars().collect();
    let mut out = Tagged::default();
    let mut candidates = Vec::new();
    for raw in spans {
        match serde_json::from_value::<WireSpan>(raw.clone())
            .ok()
            .and_then(|w| accept_span(&chars, text, &w))
        {
            Some(s) => candidates.push(s),
            None => out.dropped += 1,
        }
    }
    candidates.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)));
    for s in candidates {
        if out
            .spans
            .last()
            .is_some_and(|p: &EntitySpan| p.overlaps(&s))
        {
            out.dropped += 1;
        } else {
            out.spans.push(s);
        }
    }
    if out.dropped > 0 {
        log::debug!("dropped {} invalid spans from {url}", out.dropped);
    }
    debug_assert!(out
        .spans
        .iter()
        .all(|s| char_slice(text, s.start, s.end) == s.text));
    Ok(out)
}

pub trait Tagger: Send + Sync {
    fn tag(&self, text: &str) -> Result<Tagged, NerError>;
}

impl Tagger for FallbackTagger {
    fn tag(&self, text: &str) -> Result<Tagged, NerError> {
        Ok(Tagged {
            spans: FallbackTagger::tag(self, text),
            dropped: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RemoteTagger {
    client: RemoteClient,
}

impl RemoteTagger {
    pub fn new(client: RemoteClient) -> Self {
        RemoteTagger { client }
    }
}

impl Tagger for RemoteTagger {
    fn tag(&self, text: &str) -> Result<Tagged, NerError> {
        tag_remote(&self.client, text)
    }
}

/// Remote tagging with the offline tagger answering when the remote fails.
pub struct RemoteWithFallback {
    remote: RemoteTagger,
    fallback: FallbackTagger,
}

impl RemoteWithFallback {
    pub fn new(remote: RemoteTagger, fallback: FallbackTagger) -> Self {
        RemoteWithFallback { remote, fallback }
    }
}

impl Tagger for RemoteWithFallback {
    fn tag(&self, text: &str) -> Result<Tagged, NerError> {
        match self.remote.tag(text) {
            Err(NerError::Remote(e)) => {
                log::warn!("remote tagger failed, using fallback: {e}");
                Tagger::tag(&self.fallback, text)
            }
            other => other,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tokens(host: &str) -> Vec<IobToken> {
        whitespace_tokens(host)
    }

    fn labels(spans: &[EntitySpan]) -> Vec<(EntityLabel, &str)> {
        spans.iter().map(|s| (s.label, s.text.as_str())).collect()
    }

    #[test]
    fn decode_examples() {
        let host = "Emotet infects Windows";
        let d = decode_iob(host, &tokens(host), &["B-Malware", "O", "B-System"]).unwrap();
        assert_eq!(
            labels(&d.spans),
            vec![
                (EntityLabel::Malware, "Emotet"),
                (EntityLabel::System, "Windows")
            ]
        );
        assert_eq!(d.repairs, 0);

        let d = decode_iob(host, &tokens(host), &["O", "O", "O"]).unwrap();
        assert!(d.spans.is_empty());

        let host = "Cobalt Strike";
        let d = decode_iob(host, &tokens(host), &["I-Malware", "I-Malware"]).unwrap();
        assert_eq!(
            labels(&d.spans),
            vec![(EntityLabel::Malware, "Cobalt Strike")]
        );
        assert_eq!(d.repairs, 1);
    }

    #[test]
    fn decode_errors() {
        let host = "a b";
        assert!(matches!(
            decode_iob(host, &tokens(host), &["O"]),
            Err(NerError::LengthMismatch { .. })
        ));
        assert!(matches!(
            decode_iob(host, &tokens(host), &["O", "B-Person"]),
            Err(NerError::UnknownTag(_))
        ));
        assert!(matches!(
            decode_iob(host, &tokens(host), &["O", "b-Malware"]),
            Err(NerError::UnknownTag(_))
        ));
        let bad = vec![IobToken::new("a", 0, 1), IobToken::new("zz", 2, 9)];
        assert!(matches!(
            decode_iob(host, &bad, &["O", "O"]),
            Err(NerError::BadToken { .. })
        ));
    }

    #[test]
    fn fallback_examples() {
        let g = Gazetteer::from_entries([
            ("Emotet", EntityLabel::Malware),
            ("Windows", EntityLabel::System),
        ]);
        let t = FallbackTagger::new(Extractor::default(), g);
        let spans = t.tag("Emotet hit Windows via CVE-2021-44228");
        assert_eq!(
            labels(&spans),
            vec![
                (EntityLabel::Malware, "Emotet"),
                (EntityLabel::System, "Windows"),
                (EntityLabel::Vulnerability, "CVE-2021-44228"),
            ]
        );
        let empty = FallbackTagger::new(Extractor::default(), Gazetteer::empty());
        assert!(empty.tag("nothing here").is_empty());
        let h = "d282e137db2d55ae8fd3a299136f277e";
        let spans = empty.tag(h);
        assert_eq!(labels(&spans), vec![(EntityLabel::Indicator, h)]);
        assert_eq!((spans[0].start, spans[0].end), (0, 32));
    }

    #[test]
    fn fallback_offsets_are_chars_and_defanged() {
        let text = "ünïcode → evil[.]example[.]com and Cobalt Strike";
        let spans = tag_fallback(text);
        assert_eq!(
            labels(&spans),
            vec![
                (EntityLabel::Indicator, "evil[.]example[.]com"),
                (EntityLabel::Malware, "Cobalt Strike"),
            ]
        );
        for s in &spans {
            assert_eq!(char_slice(text, s.start, s.end), s.text);
        }
    }

    #[test]
    fn builtin_gazetteer_size() {
        let g = Gazetteer::builtin();
        assert!((45..=60).contains(&g.len()), "{}", g.len());
    }

    #[test]
    fn remote_span_acceptance() {
        let host = "198.51.100.7 seen";
        let chars: Vec<char> = host.chars().collect();
        let w = |start, end| WireSpan {
            label: "Indicator".into(),
            start,
            end,
        };
        assert!(accept_span(&chars, host, &w(0, 9)).is_none());
        assert_eq!(
            accept_span(&chars, host, &w(0, 12)).unwrap().text,
            "198.51.100.7"
        );
        assert!(accept_span(&chars, host, &w(0, 40)).is_none());
        assert!(accept_span(&chars, host, &w(5, 5)).is_none());
        assert!(accept_span(&chars, host, &w(14, 17)).is_none());
        let bogus = WireSpan {
            label: "Person".into(),
            start: 0,
            end: 12,
        };
        assert!(accept_span(&chars, host, &bogus).is_none());
    }

    /// Oracle: assign each token a span id by scanning tags with the stated
    /// rule, then group consecutive equal ids.
    fn oracle(tags: &[IobTag]) -> (Vec<(EntityLabel, usize, usize)>, usize) {
        let mut ids: Vec<Option<(usize, EntityLabel)>> = Vec::new();
        let mut next = 0;
        let mut repairs = 0;
        for (i, t) in tags.iter().enumerate() {
            let prev = if i == 0 { None } else { ids[i - 1] };
            let id = match *t {
                IobTag::O => None,
                IobTag::B(l) => {
                    next += 1;
                    Some((next, l))
                }
                IobTag::I(l) => match prev {
                    Some((p, pl)) if pl == l => Some((p, l)),
                    _ => {
                        repairs += 1;
                        next += 1;
                        Some((next, l))
                    }
                },
            };
            ids.push(id);
        }
        let mut spans: Vec<(EntityLabel, usize, usize)> = Vec::new();
        let mut last_id = None;
        for (i, id) in ids.iter().enumerate() {
            if let Some((n, l)) = id {
                if last_id == Some(*n) {
                    spans.last_mut().unwrap().2 = i;
                } else {
                    spans.push((*l, i, i));
                }
                last_id = Some(*n);
            } else {
                last_id = None;
            }
        }
        (spans, repairs)
    }

    fn alphabet() -> Vec<String> {
        let mut a = vec!["O".to_string()];
        for l in EntityLabel::ALL {
            a.push(format!("B-{l}"));
            a.push(format!("I-{l}"));
        }
        a
    }

    #[test]
    fn exhaustive_short_sequences_match_oracle() {
        let alpha = alphabet();
        let host = "t0 t1 t2 t3";
        let all_tokens = whitespace_tokens(host);
        let mut checked = 0;
        for len in 0..=4usize {
            let total = alpha.len().pow(len as u32);
            for mut code in 0..total {
                let mut seq = Vec::with_capacity(len);
                for _ in 0..len {
                    seq.push(alpha[code % alpha.len()].as_str());
                    code /= alpha.len();
                }
                let toks = &all_tokens[..len];
                let d = decode_iob(host, toks, &seq).unwrap();
                let parsed: Vec<IobTag> = seq.iter().map(|s| s.parse().unwrap()).collect();
                let (want, repairs) = oracle(&parsed);
                let got: Vec<(EntityLabel, usize, usize)> = d
                    .spans
                    .iter()
                    .map(|s| {
                        let first = toks.iter().position(|t| t.start == s.start).unwrap();
                        let last = toks.iter().position(|t| t.end == s.end).unwrap();
                        (s.label, first, last)
                    })
                    .collect();
                assert_eq!(got, want, "{seq:?}");
                assert_eq!(d.repairs, repairs, "{seq:?}");
                checked += 1;
            }
        }
        assert_eq!(checked, 1 + 11 + 121 + 1331 + 14641);
    }

    proptest! {
        #[test]
        fn decode_is_total_and_ordered(idx in proptest::collection::vec(0usize..11, 0..30)) {
            let alpha = alphabet();
            let host: String = (0..idx.len()).map(|i| format!("w{i} ")).collect();
            let toks = whitespace_tokens(&host);
            let seq: Vec<&str> = idx.iter().map(|&i| alpha[i].as_str()).collect();
            let d = decode_iob(&host, &toks, &seq).unwrap();
            for pair in d.spans.windows(2) {
                prop_assert!(pair[0].end <= pair[1].start);
            }
            let orphans = seq.iter().filter(|s| s.starts_with("I-")).count();
            prop_assert!(d.repairs <= orphans);
        }

        #[test]
        fn fallback_spans_slice_host(text in "[ -~]{0,80}") {
            let spans = tag_fallback(&text);
            for s in &spans {
                prop_assert_eq!(char_slice(&text, s.start, s.end), s.text.as_str());
            }
            for pair in spans.windows(2) {
                prop_assert!(pair[0].end <= pair[1].start);
            }
        }
    }
}

//! Rule-based IOC extraction.
//!
//! Text is refanged first, then scanned with one pattern per indicator kind.
//! A candidate is kept only when it is a whole token: it must start at the
//! beginning of the text or right after a delimiter, and may only be followed
//! by trailing sentence punctuation (`.`, `:`, `!`, `?`) before the next
//! delimiter. URLs are the exception: they start at a word boundary and are
//! atomic, so nothing else is extracted from inside a URL-shaped substring.
//!
//! Delimiters are whitespace and `, ; " ' ( ) < > [ ] { } | \``.

use std::collections::HashSet;
use std::path::Path;
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use regex::{Regex, RegexBuilder};
use serde::Deserialize;
use thiserror::Error;

use crate::model::{
    validate_indicator, ContextTag, EntityLabel, EntitySpan, Indicator, IndicatorType,
};

/// Characters that end a token.
pub fn is_delimiter(c: char) -> bool {
    c.is_whitespace() || ",;\"'()<>[]{}|`".contains(c)
}

/// Punctuation that may trail a token without being part of it.
pub fn is_trailing_punct(c: char) -> bool {
    matches!(c, '.' | ':' | '!' | '?')
}

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("reading defang grammar {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing defang grammar: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("defang rule {index} has an empty pattern")]
    EmptyPattern { index: usize },
    #[error("defang rule {index} (`{pattern}`) does not shrink its match and could loop")]
    NonShrinking { index: usize, pattern: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DefangRule {
    pub pattern: String,
    pub replacement: String,
}

/// Ordered refang rewrite rules, matched ASCII case-insensitively.
///
/// Rewriting is repeated until the text stops changing, which makes `refang`
/// idempotent even when one rewrite exposes another token (`[[.]]`).
#[derive(Debug, Clone)]
pub struct DefangGrammar {
    rules: Vec<DefangRule>,
    matcher: Regex,
}

#[derive(Deserialize)]
struct GrammarFile {
    rules: Vec<(String, String)>,
}

const MAX_PASSES: usize = 64;

const DEFAULT_RULES: [(&str, &str); 9] = [
    ("[.]", "."),
    ("(.)", "."),
    ("[dot]", "."),
    ("(dot)", "."),
    ("hxxps", "https"),
    ("hxxp", "http"),
    ("[:]", ":"),
    ("[at]", "@"),
    ("(at)", "@"),
];

impl Default for DefangGrammar {
    fn default() -> Self {
        DefangGrammar::from_rules(
            DEFAULT_RULES
                .iter()
                .map(|(p, r)| (p.to_string(), r.to_string())),
        )
        .expect("default grammar is valid")
    }
}

impl DefangGrammar {
    pub fn from_rules(
        rules: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, GrammarError> {
        let rules: Vec<DefangRule> = rules
            .into_iter()
            .map(|(pattern, replacement)| DefangRule {
                pattern,
                replacement,
            })
            .collect();
        for (index, rule) in rules.iter().enumerate() {
            if rule.pattern.is_empty() {
                return Err(GrammarError::EmptyPattern { index });
            }
            // Same-length rewrites are allowed only when they remove the
            // pattern for good (hxxp -> http); growing rewrites never are.
            let grows = rule.replacement.len() > rule.pattern.len();
            let same_len_cycle = rule.replacement.len() == rule.pattern.len()
                && rule
                    .replacement
                    .to_ascii_lowercase()
                    .contains(&rule.pattern.to_ascii_lowercase());
            if grows || same_len_cycle {
                return Err(GrammarError::NonShrinking {
                    index,
                    pattern: rule.pattern.clone(),
                });
            }
        }
        let alternation = rules
            .iter()
            .map(|r| regex::escape(&r.pattern))
            .collect::<Vec<_>>()
            .join("|");
        let matcher = RegexBuilder::new(&alternation)
            .case_insensitive(true)
            .unicode(false)
            .build()
            .expect("escaped literals always compile");
        Ok(DefangGrammar { rules, matcher })
    }

    /// Loads an override grammar: a TOML file with
    /// `rules = [["[.]", "."], ["hxxp", "http"], ...]`, applied in order.
    pub fn load(path: &Path) -> Result<Self, GrammarError> {
        let text = std::fs::read_to_string(path).map_err(|source| GrammarError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: GrammarFile = toml::from_str(&text)?;
        DefangGrammar::from_rules(file.rules)
    }

    pub fn rules(&self) -> &[DefangRule] {
        &self.rules
    }

    pub fn refang(&self, text: &str) -> String {
        self.refang_mapped(text).text
    }

    /// Refangs and keeps a byte map back into the original text.
    pub fn refang_mapped(&self, text: &str) -> Refanged {
        let mut current = text.to_string();
        let mut origin: Vec<usize> = (0..=text.len()).collect();
        // Built-in and validated rules terminate on their own; the cap guards
        // override files whose rules rewrite into each other.
        for _ in 0..MAX_PASSES {
            if !self.matcher.is_match(&current) {
                break;
            }
            let mut next = String::with_capacity(current.len());
            let mut next_origin = Vec::with_capacity(current.len() + 1);
            let mut last = 0;
            for m in self.matcher.find_iter(&current) {
                next.push_str(&current[last..m.start()]);
                next_origin.extend_from_slice(&origin[last..m.start()]);
                let replacement = self.replacement_for(m.as_str());
                next.push_str(replacement);
                next_origin.extend(std::iter::repeat_n(origin[m.start()], replacement.len()));
                last = m.end();
            }
            next.push_str(&current[last..]);
            next_origin.extend_from_slice(&origin[last..]);
            current = next;
            origin = next_origin;
        }
        Refanged {
            text: current,
            origin,
        }
    }

    fn replacement_for<'a>(&'a self, matched: &'a str) -> &'a str {
        self.rules
            .iter()
            .find(|r| r.pattern.eq_ignore_ascii_case(matched))
            .map(|r| r.replacement.as_str())
            .unwrap_or(matched)
    }
}

/// Refanged text with `origin[i]` = byte offset in the original text of
/// refanged byte `i`; `origin[len]` is the original length.
#[derive(Debug, Clone)]
pub struct Refanged {
    pub text: String,
    origin: Vec<usize>,
}

impl Refanged {
    pub fn original_range(&self, start: usize, end: usize) -> (usize, usize) {
        (self.origin[start], self.origin[end])
    }
}

fn default_grammar() -> &'static DefangGrammar {
    static G: OnceLock<DefangGrammar> = OnceLock::new();
    G.get_or_init(DefangGrammar::default)
}

/// Rewrites defanged tokens (`[.]`, `hxxp`, `[at]`, ...) back to their
/// original form using the default grammar.
pub fn refang(text: &str) -> String {
    default_grammar().refang(text)
}

/// Returns the unique kind `token` is valid as, resolving overlaps by the
/// precedence url > email > ipv4 > ipv6 > cve > hash > domain.
pub fn classify_token(token: &str) -> Option<IndicatorType> {
    const ORDER: [IndicatorType; 6] = [
        IndicatorType::Url,
        IndicatorType::Email,
        IndicatorType::Ipv4,
        IndicatorType::Ipv6,
        IndicatorType::Cve,
        IndicatorType::Domain,
    ];
    let valid: Vec<IndicatorType> = ORDER
        .iter()
        .copied()
        .filter(|k| validate_indicator(token, *k).is_empty())
        .collect();
    if valid.len() > 1 {
        log::debug!("token `{token}` is valid as {valid:?}, taking {}", valid[0]);
    }
    let hash = IndicatorType::hash_for_len(token.len())
        .filter(|k| validate_indicator(token, *k).is_empty());
    match (valid.first().copied(), hash) {
        (Some(k), _) if k != IndicatorType::Domain => Some(k),
        (_, Some(h)) => Some(h),
        (first, None) => first,
    }
}

/// A rule-based hit, with offsets into the text that was scanned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleMatch {
    pub kind: IndicatorType,
    pub start: usize,
    pub end: usize,
    /// The refanged candidate text.
    pub value: String,
    /// The same span in the original (possibly defanged) text.
    pub original: String,
}

struct Patterns {
    url: Regex,
    email: Regex,
    ipv4: Regex,
    ipv6: Regex,
    cve: Regex,
    hex: Regex,
    domain: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        url: Regex::new(r#"(?i)\b(?:https?|ftp)://[^\s,;"'()<>\[\]{}|`\\^]+"#).unwrap(),
        email: Regex::new(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+").unwrap(),
        ipv4: Regex::new(r"[0-9]{1,3}(?:\.[0-9]{1,3}){3}").unwrap(),
        ipv6: Regex::new(r"[0-9A-Fa-f.]*:[0-9A-Fa-f.]*:[0-9A-Fa-f:.]*").unwrap(),
        cve: Regex::new(r"(?i)cve-[0-9]{4}-[0-9]+").unwrap(),
        hex: Regex::new(r"[0-9A-Fa-f]+").unwrap(),
        domain: Regex::new(r"[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)+").unwrap(),
    })
}

/// Rule-based extractor bound to one defang grammar.
#[derive(Debug, Clone, Default)]
pub struct Extractor {
    grammar: DefangGrammar,
}

impl Extractor {
    pub fn new(grammar: DefangGrammar) -> Self {
        Extractor { grammar }
    }

    pub fn grammar(&self) -> &DefangGrammar {
        &self.grammar
    }

    /// All rule hits in first-occurrence order, offsets into the original text.
    pub fn matches(&self, text: &str) -> Vec<RuleMatch> {
        let refanged = self.grammar.refang_mapped(text);
        scan(&refanged.text)
            .into_iter()
            .map(|(kind, start, end)| {
                let (os, oe) = refanged.original_range(start, end);
                RuleMatch {
                    kind,
                    start: os,
                    end: oe,
                    value: refanged.text[start..end].to_string(),
                    original: text[os..oe].to_string(),
                }
            })
            .collect()
    }

    /// Valid, deduplicated indicators in first-occurrence order.
    pub fn extract(&self, text: &str, seen_at: DateTime<Utc>) -> Vec<Indicator> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for m in self.matches(text) {
            let Ok(ind) = Indicator::new(&m.value, m.kind, seen_at) else {
                continue;
            };
            if seen.insert(ind.key()) {
                out.push(ind.with_defanged_form(&m.original));
            }
        }
        out
    }

    /// Extracts every text of a batch; runs on the rayon pool when enabled.
    pub fn extract_batch<S: AsRef<str> + Sync>(
        &self,
        texts: &[S],
        seen_at: DateTime<Utc>,
    ) -> Vec<Vec<Indicator>> {
        crate::par::map(texts, |t| self.extract(t.as_ref(), seen_at))
    }
}

type Pass<'a> = (&'a Regex, &'a dyn Fn(&str) -> Option<IndicatorType>);

fn default_extractor() -> &'static Extractor {
    static E: OnceLock<Extractor> = OnceLock::new();
    E.get_or_init(Extractor::default)
}

/// Refangs `text` and returns every valid indicator it contains, deduplicated
/// by key, in order of first occurrence.
pub fn extract_indicators(text: &str) -> Vec<Indicator> {
    default_extractor().extract(text, Utc::now())
}

pub fn extract_indicators_at(text: &str, seen_at: DateTime<Utc>) -> Vec<Indicator> {
    default_extractor().extract(text, seen_at)
}

/// Candidate is a whole token: starts after a delimiter and is followed only
/// by trailing punctuation up to the next delimiter.
fn token_aligned(text: &str, start: usize, end: usize) -> bool {
    let before_ok = text[..start].chars().next_back().is_none_or(is_delimiter);
    before_ok && rest_is_boundary(&text[end..])
}

fn rest_is_boundary(rest: &str) -> bool {
    rest.chars()
        .find(|c| !is_trailing_punct(*c))
        .is_none_or(is_delimiter)
}

fn trim_trailing(text: &str, start: usize, end: usize) -> usize {
    start + text[start..end].trim_end_matches(is_trailing_punct).len()
}

/// Scans refanged text. Returns `(kind, start, end)` byte ranges sorted by start.
fn scan(text: &str) -> Vec<(IndicatorType, usize, usize)> {
    let p = patterns();
    let mut consumed: Vec<(usize, usize)> = Vec::new();
    let mut hits = Vec::new();
    let overlaps =
        |c: &[(usize, usize)], s: usize, e: usize| c.iter().any(|&(a, b)| s < b && a < e);

    // URLs first. Invalid URL-shaped runs still claim their range.
    for m in p.url.find_iter(text) {
        let end = trim_trailing(text, m.start(), m.end());
        if end == m.start() {
            continue;
        }
        consumed.push((m.start(), m.end()));
        if validate_indicator(&text[m.start()..end], IndicatorType::Url).is_empty() {
            hits.push((IndicatorType::Url, m.start(), end));
        }
    }

    let passes: [Pass; 6] = [
        (&p.email, &|s| fixed(s, IndicatorType::Email)),
        (&p.ipv4, &|s| fixed(s, IndicatorType::Ipv4)),
        (&p.ipv6, &|s| fixed(s, IndicatorType::Ipv6)),
        (&p.cve, &|s| fixed(s, IndicatorType::Cve)),
        (&p.hex, &|s| {
            IndicatorType::hash_for_len(s.len()).filter(|k| validate_indicator(s, *k).is_empty())
        }),
        (&p.domain, &|s| fixed(s, IndicatorType::Domain)),
    ];
    for (re, accept) in passes {
        for m in re.find_iter(text) {
            let (s, e) = (m.start(), m.end());
            // Prefer the full candidate, then the one without trailing punctuation.
            let trimmed = trim_trailing(text, s, e);
            let pick = [e, trimmed]
                .into_iter()
                .filter(|&end| end > s)
                .find_map(|end| accept(&text[s..end]).map(|k| (k, end)));
            let Some((kind, end)) = pick else { continue };
            if !token_aligned(text, s, end) || overlaps(&consumed, s, end) {
                continue;
            }
            consumed.push((s, end));
            hits.push((kind, s, end));
        }
    }
    hits.sort_by_key(|&(_, s, _)| s);
    hits
}

fn fixed(s: &str, kind: IndicatorType) -> Option<IndicatorType> {
    validate_indicator(s, kind).is_empty().then_some(kind)
}

/// Result of combining rule-based output with entity spans.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Merged {
    pub indicators: Vec<Indicator>,
    pub tags: Vec<ContextTag>,
    /// Indicator-labeled spans that did not yield a valid indicator.
    pub dropped: usize,
}

/// Union of rule-based indicators and `Indicator`-labeled entity spans.
///
/// Rule output is kept verbatim and first. Each indicator span is refanged,
/// classified and appended unless its key is already present. Spans with any
/// other label become context tags.
pub fn merge_with_ner(
    rule_out: &[Indicator],
    spans: &[EntitySpan],
    text: &str,
    seen_at: DateTime<Utc>,
) -> Merged {
    let mut merged = Merged {
        indicators: rule_out.to_vec(),
        ..Merged::default()
    };
    let mut keys: HashSet<String> = rule_out.iter().map(Indicator::key).collect();
    let mut tag_seen = HashSet::new();
    for span in spans {
        if crate::model::char_slice(text, span.start, span.end) != span.text {
            merged.dropped += 1;
            continue;
        }
        if span.label != EntityLabel::Indicator {
            let tag = ContextTag {
                label: span.label,
                text: span.text.clone(),
            };
            if tag_seen.insert(tag.clone()) {
                merged.tags.push(tag);
            }
            continue;
        }
        let candidate = refang(span.text.trim());
        let candidate = candidate.trim_end_matches(is_trailing_punct);
        let Some(kind) = classify_token(candidate) else {
            merged.dropped += 1;
            continue;
        };
        match Indicator::new(candidate, kind, seen_at) {
            Ok(ind) => {
                if keys.insert(ind.key()) {
                    merged
                        .indicators
                        .push(ind.with_defanged_form(span.text.trim()));
                }
            }
            Err(_) => merged.dropped += 1,
        }
    }
    merged
}

//! Shared domain vocabulary: indicators, documents, entity spans and verdicts.
//!
//! Every value type here is immutable once built. Constructors validate, and
//! deserialization goes through the same constructors, so a value that exists
//! satisfies its invariants.

use std::collections::BTreeSet;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::net::Ipv6Addr;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::enrichment::VerificationStatus;

/// Closed set of atomic indicator kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndicatorType {
    Ipv4,
    Ipv6,
    Url,
    Domain,
    Email,
    Md5,
    Sha1,
    Sha256,
    Cve,
}

impl IndicatorType {
    pub const ALL: [IndicatorType; 9] = [
        IndicatorType::Ipv4,
        IndicatorType::Ipv6,
        IndicatorType::Url,
        IndicatorType::Domain,
        IndicatorType::Email,
        IndicatorType::Md5,
        IndicatorType::Sha1,
        IndicatorType::Sha256,
        IndicatorType::Cve,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IndicatorType::Ipv4 => "ipv4",
            IndicatorType::Ipv6 => "ipv6",
            IndicatorType::Url => "url",
            IndicatorType::Domain => "domain",
            IndicatorType::Email => "email",
            IndicatorType::Md5 => "md5",
            IndicatorType::Sha1 => "sha1",
            IndicatorType::Sha256 => "sha256",
            IndicatorType::Cve => "cve",
        }
    }

    pub fn is_hash(self) -> bool {
        matches!(
            self,
            IndicatorType::Md5 | IndicatorType::Sha1 | IndicatorType::Sha256
        )
    }

    /// Hex digest length for hash kinds.
    pub fn hex_len(self) -> Option<usize> {
        match self {
            IndicatorType::Md5 => Some(32),
            IndicatorType::Sha1 => Some(40),
            IndicatorType::Sha256 => Some(64),
            _ => None,
        }
    }

    pub fn hash_for_len(len: usize) -> Option<IndicatorType> {
        match len {
            32 => Some(IndicatorType::Md5),
            40 => Some(IndicatorType::Sha1),
            64 => Some(IndicatorType::Sha256),
            _ => None,
        }
    }
}

impl fmt::Display for IndicatorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IndicatorType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IndicatorType::ALL
            .iter()
            .copied()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown indicator type `{s}`"))
    }
}

/// The named crawl spiders. They differ only in seeds, scope and keywords.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spider {
    Ache,
    Sitemap,
    Ahmia,
    Wiki1,
    Wiki2,
}

impl Spider {
    pub const ALL: [Spider; 5] = [
        Spider::Ache,
        Spider::Sitemap,
        Spider::Ahmia,
        Spider::Wiki1,
        Spider::Wiki2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Spider::Ache => "ache",
            Spider::Sitemap => "sitemap",
            Spider::Ahmia => "ahmia",
            Spider::Wiki1 => "wiki1",
            Spider::Wiki2 => "wiki2",
        }
    }
}

impl fmt::Display for Spider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Spider {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Spider::ALL
            .iter()
            .copied()
            .find(|sp| sp.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown spider `{s}`"))
    }
}

/// Where a document came from. Web sources always carry the spider that found them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "channel", rename_all = "snake_case")]
pub enum SourceKind {
    Twitter,
    ClearWeb { spider: Spider },
    DarkWeb { spider: Spider },
}

/// `SourceKind` without the spider, used for per-source roll-ups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceChannel {
    Twitter,
    ClearWeb,
    DarkWeb,
}

impl SourceChannel {
    pub const ALL: [SourceChannel; 3] = [
        SourceChannel::Twitter,
        SourceChannel::ClearWeb,
        SourceChannel::DarkWeb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceChannel::Twitter => "twitter",
            SourceChannel::ClearWeb => "clear_web",
            SourceChannel::DarkWeb => "dark_web",
        }
    }
}

impl fmt::Display for SourceChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl SourceKind {
    pub fn channel(self) -> SourceChannel {
        match self {
            SourceKind::Twitter => SourceChannel::Twitter,
            SourceKind::ClearWeb { .. } => SourceChannel::ClearWeb,
            SourceKind::DarkWeb { .. } => SourceChannel::DarkWeb,
        }
    }

    pub fn spider(self) -> Option<Spider> {
        match self {
            SourceKind::Twitter => None,
            SourceKind::ClearWeb { spider } | SourceKind::DarkWeb { spider } => Some(spider),
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.spider() {
            Some(spider) => write!(f, "{}/{}", self.channel(), spider),
            None => f.write_str(self.channel().as_str()),
        }
    }
}

/// A single broken validity rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Empty,
    ContainsWhitespace,
    DefangToken(&'static str),
    NotHex,
    Length { expected: usize, actual: usize },
    OctetCount(usize),
    OctetNotNumeric(String),
    OctetOutOfRange(String),
    Ipv6Syntax,
    UrlSyntax(String),
    UrlScheme(String),
    UrlHost(String),
    DomainTooLong(usize),
    DomainSingleLabel,
    LabelLength(String),
    LabelChars(String),
    LabelHyphenEdge(String),
    TldNotAlphabetic(String),
    TldUnknown(String),
    EmailMissingAt,
    EmailLocalPart(String),
    EmailDomain(String),
    CveFormat,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => f.write_str("empty value"),
            Violation::ContainsWhitespace => f.write_str("contains whitespace"),
            Violation::DefangToken(t) => write!(f, "contains defang token `{t}`"),
            Violation::NotHex => f.write_str("non-hex character in digest"),
            Violation::Length { expected, actual } => {
                write!(f, "length {actual} != {expected}")
            }
            Violation::OctetCount(n) => write!(f, "expected 4 octets, found {n}"),
            Violation::OctetNotNumeric(o) => write!(f, "octet `{o}` is not 1-3 decimal digits"),
            Violation::OctetOutOfRange(o) => write!(f, "octet out of range: {o}"),
            Violation::Ipv6Syntax => f.write_str("not an IPv6 address"),
            Violation::UrlSyntax(e) => write!(f, "url does not parse: {e}"),
            Violation::UrlScheme(s) => write!(f, "unsupported url scheme `{s}`"),
            Violation::UrlHost(h) => write!(f, "url host `{h}` is not an ip or domain"),
            Violation::DomainTooLong(n) => write!(f, "domain length {n} exceeds 253"),
            Violation::DomainSingleLabel => f.write_str("domain needs at least one dot"),
            Violation::LabelLength(l) => write!(f, "label `{l}` not 1-63 chars"),
            Violation::LabelChars(l) => write!(f, "label `{l}` has invalid characters"),
            Violation::LabelHyphenEdge(l) => write!(f, "label `{l}` starts or ends with '-'"),
            Violation::TldNotAlphabetic(t) => {
                write!(f, "final label `{t}` is not >=2 alphabetic chars")
            }
            Violation::TldUnknown(t) => write!(f, "final label `{t}` is not a known suffix"),
            Violation::EmailMissingAt => f.write_str("email needs exactly one '@'"),
            Violation::EmailLocalPart(l) => write!(f, "invalid email local part `{l}`"),
            Violation::EmailDomain(d) => write!(f, "invalid email domain `{d}`"),
            Violation::CveFormat => f.write_str("does not match CVE-YYYY-NNNN+"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid {kind} `{value}`: {}", .violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ValidationError {
    pub kind: IndicatorType,
    pub value: String,
    pub violations: Vec<Violation>,
}

/// Tokens that mark a defanged value. Their presence makes a value invalid.
pub(crate) const DEFANG_MARKERS: [&str; 8] = [
    "[.]", "(.)", "[dot]", "(dot)", "hxxp", "[:]", "[at]", "(at)",
];

/// Final labels accepted for domains. Deliberately excludes suffixes that
/// collide with common file extensions (exe, zip, md, sh, py, ...).
const KNOWN_SUFFIXES: &[&str] = &[
    "com", "net", "org", "info", "biz", "io", "co", "xyz", "top", "site", "online", "club", "shop",
    "store", "app", "dev", "link", "live", "cloud", "tech", "space", "website", "pro", "icu",
    "buzz", "work", "fun", "vip", "win", "bid", "loan", "click", "cc", "tk", "ml", "ga", "cf",
    "gq", "pw", "ws", "me", "tv", "us", "uk", "ru", "su", "cn", "de", "fr", "nl", "it", "es", "pl",
    "br", "in", "jp", "kr", "ir", "ua", "tr", "ca", "au", "eu", "ch", "se", "no", "fi", "be", "at",
    "cz", "ro", "hu", "gr", "pt", "vn", "id", "th", "my", "sg", "hk", "tw", "za", "ng", "ar", "mx",
    "cl", "kz", "by", "lt", "lv", "ee", "gov", "edu", "mil", "int", "onion", "ly", "to", "is",
    "im", "gg",
];

pub fn is_known_suffix(label: &str) -> bool {
    KNOWN_SUFFIXES.iter().any(|s| s.eq_ignore_ascii_case(label))
}

/// Every rule `value` violates for `kind`. Empty means valid.
pub fn validate_indicator(value: &str, kind: IndicatorType) -> Vec<Violation> {
    let mut out = Vec::new();
    if value.is_empty() {
        out.push(Violation::Empty);
        return out;
    }
    if value.chars().any(char::is_whitespace) {
        out.push(Violation::ContainsWhitespace);
    }
    let lower = value.to_ascii_lowercase();
    for marker in DEFANG_MARKERS {
        if lower.contains(marker) {
            out.push(Violation::DefangToken(marker));
        }
    }
    match kind {
        IndicatorType::Md5 | IndicatorType::Sha1 | IndicatorType::Sha256 => {
            let expected = kind.hex_len().unwrap_or_default();
            if value.len() != expected {
                out.push(Violation::Length {
                    expected,
                    actual: value.len(),
                });
            }
            if !value.bytes().all(|b| b.is_ascii_hexdigit()) {
                out.push(Violation::NotHex);
            }
        }
        IndicatorType::Ipv4 => out.extend(ipv4_violations(value)),
        IndicatorType::Ipv6 => {
            if value.parse::<Ipv6Addr>().is_err() {
                out.push(Violation::Ipv6Syntax);
            }
        }
        IndicatorType::Domain => out.extend(domain_violations(value)),
        IndicatorType::Email => out.extend(email_violations(value)),
        IndicatorType::Url => out.extend(url_violations(value)),
        IndicatorType::Cve => {
            if !is_cve(value) {
                out.push(Violation::CveFormat);
            }
        }
    }
    out
}

fn ipv4_violations(value: &str) -> Vec<Violation> {
    let parts: Vec<&str> = value.split('.').collect();
    if parts.len() != 4 {
        return vec![Violation::OctetCount(parts.len())];
    }
    let mut out = Vec::new();
    for part in parts {
        if part.is_empty() || part.len() > 3 || !part.bytes().all(|b| b.is_ascii_digit()) {
            out.push(Violation::OctetNotNumeric(part.to_string()));
        } else if part.parse::<u16>().map_or(true, |n| n > 255) {
            out.push(Violation::OctetOutOfRange(part.to_string()));
        }
    }
    out
}

fn domain_violations(value: &str) -> Vec<Violation> {
    let mut out = Vec::new();
    if value.len() > 253 {
        out.push(Violation::DomainTooLong(value.len()));
    }
    let labels: Vec<&str> = value.split('.').collect();
    if labels.len() < 2 {
        out.push(Violation::DomainSingleLabel);
        return out;
    }
    for label in &labels {
        if label.is_empty() || label.len() > 63 {
            out.push(Violation::LabelLength(label.to_string()));
            continue;
        }
        if !label
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-')
        {
            out.push(Violation::LabelChars(label.to_string()));
        }
        if label.starts_with('-') || label.ends_with('-') {
            out.push(Violation::LabelHyphenEdge(label.to_string()));
        }
    }
    let tld = labels[labels.len() - 1];
    if tld.len() < 2 || !tld.bytes().all(|b| b.is_ascii_alphabetic()) {
        out.push(Violation::TldNotAlphabetic(tld.to_string()));
    } else if !is_known_suffix(tld) {
        out.push(Violation::TldUnknown(tld.to_string()));
    }
    out
}

fn email_violations(value: &str) -> Vec<Violation> {
    let mut parts = value.split('@');
    let (Some(local), Some(domain), None) = (parts.next(), parts.next(), parts.next()) else {
        return vec![Violation::EmailMissingAt];
    };
    let mut out = Vec::new();
    let local_ok = !local.is_empty()
        && local.len() <= 64
        && !local.starts_with('.')
        && !local.ends_with('.')
        && !local.contains("..")
        && local
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"._%+-".contains(&b));
    if !local_ok {
        out.push(Violation::EmailLocalPart(local.to_string()));
    }
    if !domain_violations(domain).is_empty() {
        out.push(Violation::EmailDomain(domain.to_string()));
    }
    out
}

pub(crate) const URL_SCHEMES: [&str; 3] = ["http", "https", "ftp"];

fn url_violations(value: &str) -> Vec<Violation> {
    let parsed = match url::Url::parse(value) {
        Ok(u) => u,
        Err(e) => return vec![Violation::UrlSyntax(e.to_string())],
    };
    let mut out = Vec::new();
    if !URL_SCHEMES.contains(&parsed.scheme()) {
        out.push(Violation::UrlScheme(parsed.scheme().to_string()));
    }
    // The generic parser is lenient about the authority; check the raw host
    // text so that "http://foo.exe/" is rejected like the bare domain is.
    let host = split_url(value).map(|p| p.host).unwrap_or_default();
    let host_ok = if host.starts_with('[') && host.ends_with(']') {
        host[1..host.len() - 1].parse::<Ipv6Addr>().is_ok()
    } else {
        ipv4_violations(host).is_empty() || domain_violations(host).is_empty()
    };
    if !host_ok {
        out.push(Violation::UrlHost(host.to_string()));
    }
    out
}

struct UrlParts<'a> {
    scheme: &'a str,
    userinfo: Option<&'a str>,
    host: &'a str,
    port: Option<&'a str>,
    rest: &'a str,
}

fn split_url(value: &str) -> Option<UrlParts<'_>> {
    let (scheme, after) = value.split_once("://")?;
    let auth_end = after.find(['/', '?', '#']).unwrap_or(after.len());
    let (authority, rest) = after.split_at(auth_end);
    let (userinfo, hostport) = match authority.rsplit_once('@') {
        Some((u, h)) => (Some(u), h),
        None => (None, authority),
    };
    let (host, port) = if hostport.starts_with('[') {
        match hostport.find(']') {
            Some(i) => {
                let (h, p) = hostport.split_at(i + 1);
                (h, p.strip_prefix(':'))
            }
            None => (hostport, None),
        }
    } else {
        match hostport.rsplit_once(':') {
            Some((h, p)) => (h, Some(p)),
            None => (hostport, None),
        }
    };
    Some(UrlParts {
        scheme,
        userinfo,
        host,
        port,
        rest,
    })
}

fn is_cve(value: &str) -> bool {
    let bytes = value.as_bytes();
    if bytes.len() < 13 || !bytes[..4].eq_ignore_ascii_case(b"cve-") {
        return false;
    }
    let rest = &value[4..];
    let Some((year, num)) = rest.split_once('-') else {
        return false;
    };
    year.len() == 4
        && year.bytes().all(|b| b.is_ascii_digit())
        && num.len() >= 4
        && num.bytes().all(|b| b.is_ascii_digit())
}

/// Canonical spelling of an already valid value.
fn canonicalize(value: &str, kind: IndicatorType) -> String {
    match kind {
        IndicatorType::Md5
        | IndicatorType::Sha1
        | IndicatorType::Sha256
        | IndicatorType::Domain
        | IndicatorType::Email => value.to_ascii_lowercase(),
        IndicatorType::Cve => value.to_ascii_uppercase(),
        IndicatorType::Ipv4 => value
            .split('.')
            .map(|o| o.parse::<u16>().map(|n| n.to_string()).unwrap_or_default())
            .collect::<Vec<_>>()
            .join("."),
        IndicatorType::Ipv6 => value
            .parse::<Ipv6Addr>()
            .map(|a| a.to_string())
            .unwrap_or_else(|_| value.to_ascii_lowercase()),
        IndicatorType::Url => match split_url(value) {
            Some(p) => {
                let mut out = p.scheme.to_ascii_lowercase();
                out.push_str("://");
                if let Some(u) = p.userinfo {
                    out.push_str(u);
                    out.push('@');
                }
                out.push_str(&p.host.to_ascii_lowercase());
                if let Some(port) = p.port {
                    out.push(':');
                    out.push_str(port);
                }
                out.push_str(p.rest);
                out
            }
            None => value.to_string(),
        },
    }
}

/// Validates and returns the canonical form of `value`.
pub fn canonical_value(value: &str, kind: IndicatorType) -> Result<String, ValidationError> {
    let violations = validate_indicator(value, kind);
    if !violations.is_empty() {
        return Err(ValidationError {
            kind,
            value: value.to_string(),
            violations,
        });
    }
    Ok(canonicalize(value, kind))
}

/// Deduplication key, `"<kind>:<canonical value>"`.
pub fn indicator_key(value: &str, kind: IndicatorType) -> Result<String, ValidationError> {
    canonical_value(value, kind).map(|v| format!("{kind}:{v}"))
}

/// True for RFC 1918, loopback, link-local, CGNAT and other reserved IPv4 space.
pub fn is_non_routable_ipv4(value: &str) -> bool {
    let Ok(addr) = value.parse::<std::net::Ipv4Addr>() else {
        return false;
    };
    let [a, b, _, _] = addr.octets();
    addr.is_private()
        || addr.is_loopback()
        || addr.is_link_local()
        || addr.is_broadcast()
        || addr.is_documentation()
        || addr.is_unspecified()
        || a == 0
        || a >= 224
        || (a == 100 && (64..128).contains(&b))
}

/// An atomic, canonical indicator of compromise.
///
/// Equality and hashing consider only `(kind, value)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "IndicatorRepr")]
pub struct Indicator {
    value: String,
    kind: IndicatorType,
    first_seen: DateTime<Utc>,
    sources: BTreeSet<SourceKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    defanged_form: Option<String>,
    verification: Vec<VerificationStatus>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    non_routable: bool,
}

#[derive(Deserialize)]
struct IndicatorRepr {
    value: String,
    kind: IndicatorType,
    first_seen: DateTime<Utc>,
    #[serde(default)]
    sources: BTreeSet<SourceKind>,
    #[serde(default)]
    defanged_form: Option<String>,
    #[serde(default)]
    verification: Vec<VerificationStatus>,
}

impl TryFrom<IndicatorRepr> for Indicator {
    type Error = ValidationError;

    fn try_from(r: IndicatorRepr) -> Result<Self, Self::Error> {
        let mut ind = Indicator::new(&r.value, r.kind, r.first_seen)?;
        ind.sources = r.sources;
        ind.defanged_form = r.defanged_form;
        ind.verification = r.verification;
        Ok(ind)
    }
}

impl Indicator {
    /// Builds an indicator from a refanged value.
    pub fn new(
        value: &str,
        kind: IndicatorType,
        first_seen: DateTime<Utc>,
    ) -> Result<Self, ValidationError> {
        let value = canonical_value(value, kind)?;
        let non_routable = kind == IndicatorType::Ipv4 && is_non_routable_ipv4(&value);
        Ok(Indicator {
            value,
            kind,
            first_seen,
            sources: BTreeSet::new(),
            defanged_form: None,
            verification: Vec::new(),
            non_routable,
        })
    }

    pub fn value(&self) -> &str {
        &self.value
    }

    pub fn kind(&self) -> IndicatorType {
        self.kind
    }

    pub fn first_seen(&self) -> DateTime<Utc> {
        self.first_seen
    }

    pub fn sources(&self) -> &BTreeSet<SourceKind> {
        &self.sources
    }

    pub fn defanged_form(&self) -> Option<&str> {
        self.defanged_form.as_deref()
    }

    pub fn verification(&self) -> &[VerificationStatus] {
        &self.verification
    }

    pub fn non_routable(&self) -> bool {
        self.non_routable
    }

    pub fn key(&self) -> String {
        format!("{}:{}", self.kind, self.value)
    }

    pub fn with_source(mut self, source: SourceKind) -> Self {
        self.sources.insert(source);
        self
    }

    /// Records the original text when it differed from the canonical value.
    pub fn with_defanged_form(mut self, original: &str) -> Self {
        if original != self.value {
            self.defanged_form = Some(original.to_string());
        }
        self
    }

    pub fn with_verification(mut self, statuses: Vec<VerificationStatus>) -> Self {
        self.verification = statuses;
        self
    }
}

impl PartialEq for Indicator {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.value == other.value
    }
}

impl Eq for Indicator {}

impl Hash for Indicator {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.kind.hash(state);
        self.value.hash(state);
    }
}

/// The five entity classes of the tagging scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityLabel {
    Malware,
    Indicator,
    System,
    Organization,
    Vulnerability,
}

impl EntityLabel {
    pub const ALL: [EntityLabel; 5] = [
        EntityLabel::Malware,
        EntityLabel::Indicator,
        EntityLabel::System,
        EntityLabel::Organization,
        EntityLabel::Vulnerability,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityLabel::Malware => "Malware",
            EntityLabel::Indicator => "Indicator",
            EntityLabel::System => "System",
            EntityLabel::Organization => "Organization",
            EntityLabel::Vulnerability => "Vulnerability",
        }
    }
}

impl fmt::Display for EntityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityLabel::ALL
            .iter()
            .copied()
            .find(|l| l.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown entity label `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpanError {
    #[error("span [{start}, {end}) out of bounds for text of {len} chars")]
    OutOfBounds {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("span [{start}, {end}) is empty or inverted")]
    Empty { start: usize, end: usize },
}

/// A labeled character span over a host text. Offsets count Unicode scalar
/// values; `end` is exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub label: EntityLabel,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl EntitySpan {
    pub fn new(
        host: &str,
        label: EntityLabel,
        start: usize,
        end: usize,
    ) -> Result<Self, SpanError> {
        if start >= end {
            return Err(SpanError::Empty { start, end });
        }
        let len = host.chars().count();
        if end > len {
            return Err(SpanError::OutOfBounds { start, end, len });
        }
        let text = char_slice(host, start, end).to_string();
        Ok(EntitySpan {
            label,
            start,
            end,
            text,
        })
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Slice of `text` between two char offsets. Offsets past the end clamp.
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let b0 = char_to_byte(text, start);
    let b1 = char_to_byte(text, end);
    &text[b0..b1.max(b0)]
}

pub fn char_to_byte(text: &str, char_idx: usize) -> usize {
    text.char_indices()
        .nth(char_idx)
        .map_or(text.len(), |(b, _)| b)
}

pub fn byte_to_char(text: &str, byte_idx: usize) -> usize {
    text[..byte_idx].chars().count()
}

/// Entity mention kept on a document when it is not itself an indicator.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextTag {
    pub label: EntityLabel,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Sentence,
    Page,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Sentence => "sentence",
            Granularity::Page => "page",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceVerdict {
    pub score: f64,
    pub relevant: bool,
    pub granularity: Granularity,
    pub model_id: String,
}

impl RelevanceVerdict {
    /// `relevant` is derived: `score >= threshold`.
    pub fn new(
        score: f64,
        threshold: f64,
        granularity: Granularity,
        model_id: impl Into<String>,
    ) -> Self {
        debug_assert!((0.0..=1.0).contains(&score), "score {score} outside [0,1]");
        RelevanceVerdict {
            score,
            relevant: score >= threshold,
            granularity,
            model_id: model_id.into(),
        }
    }
}

/// Content-hash identity of a document.
pub fn document_id(source: SourceKind, locator: &str, raw_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(source.to_string().as_bytes());
    h.update([0u8]);
    h.update(locator.as_bytes());
    h.update([0u8]);
    h.update(raw_text.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("document id {found} does not match content digest {expected}")]
pub struct DocumentIdMismatch {
    pub expected: String,
    pub found: String,
}

/// A unit of ingested content and its extraction state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DocumentRepr")]
pub struct Document {
    id: String,
    source: SourceKind,
    url_or_post_id: String,
    raw_text: String,
    fetched_at: DateTime<Utc>,
    relevance: Option<RelevanceVerdict>,
    indicators: Vec<Indicator>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    tags: Vec<ContextTag>,
}

#[derive(Deserialize)]
struct DocumentRepr {
    id: String,
    source: SourceKind,
    url_or_post_id: String,
    raw_text: String,
    fetched_at: DateTime<Utc>,
    #[serde(default)]
    relevance: Option<RelevanceVerdict>,
    #[serde(default)]
    indicators: Vec<Indicator>,
    #[serde(default)]
    tags: Vec<ContextTag>,
}

impl TryFrom<DocumentRepr> for Document {
    type Error = DocumentIdMismatch;

    fn try_from(r: DocumentRepr) -> Result<Self, Self::Error> {
        let expected = document_id(r.source, &r.url_or_post_id, &r.raw_text);
        if expected != r.id {
            return Err(DocumentIdMismatch {
                expected,
                found: r.id,
            });
        }
        Ok(Document {
            id: r.id,
            source: r.source,
            url_or_post_id: r.url_or_post_id,
            raw_text: r.raw_text,
            fetched_at: r.fetched_at,
            relevance: r.relevance,
            indicators: r.indicators,
            tags: r.tags,
        })
    }
}

impl Document {
    pub fn new(
        source: SourceKind,
        url_or_post_id: impl Into<String>,
        raw_text: impl Into<String>,
        fetched_at: DateTime<Utc>,
    ) -> Self {
        let url_or_post_id = url_or_post_id.into();
        let raw_text = raw_text.into();
        Document {
            id: document_id(source, &url_or_post_id, &raw_text),
            source,
            url_or_post_id,
            raw_text,
            fetched_at,
            relevance: None,
            indicators: Vec::new(),
            tags: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn source(&self) -> SourceKind {
        self.source
    }

    pub fn url_or_post_id(&self) -> &str {
        &self.url_or_post_id
    }

    pub fn raw_text(&self) -> &str {
        &self.raw_text
    }

    pub fn fetched_at(&self) -> DateTime<Utc> {
        self.fetched_at
    }

    pub fn relevance(&self) -> Option<&RelevanceVerdict> {
        self.relevance.as_ref()
    }

    pub fn is_relevant(&self) -> bool {
        self.relevance.as_ref().is_some_and(|v| v.relevant)
    }

    pub fn indicators(&self) -> &[Indicator] {
        &self.indicators
    }

    pub fn tags(&self) -> &[ContextTag] {
        &self.tags
    }

    pub fn with_relevance(mut self, verdict: RelevanceVerdict) -> Self {
        self.relevance = Some(verdict);
        self
    }

    pub fn with_extraction(mut self, indicators: Vec<Indicator>, tags: Vec<ContextTag>) -> Self {
        self.indicators = indicators;
        self.tags = tags;
        self
    }

    /// Same document with the text dropped, for indexing irrelevant pages as
    /// verdict-only stubs. The id still identifies the full content.
    pub fn stub(&self) -> DocumentStub {
        DocumentStub {
            id: self.id.clone(),
            source: self.source,
            url_or_post_id: self.url_or_post_id.clone(),
            fetched_at: self.fetched_at,
            relevance: self.relevance.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentStub {
    pub id: String,
    pub source: SourceKind,
    pub url_or_post_id: String,
    pub fetched_at: DateTime<Utc>,
    pub relevance: Option<RelevanceVerdict>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2023, 3, 1, 12, 0, 0).unwrap()
    }

    #[test]
    fn key_lowercases_hashes() {
        assert_eq!(
            indicator_key("D282E137DB2D55AE8FD3A299136F277E", IndicatorType::Md5).unwrap(),
            "md5:d282e137db2d55ae8fd3a299136f277e"
        );
    }

    #[test]
    fn key_keeps_url() {
        assert_eq!(
            indicator_key("http://193.38.55.43/", IndicatorType::Url).unwrap(),
            "url:http://193.38.55.43/"
        );
    }

    #[test]
    fn key_rejects_empty() {
        let err = indicator_key("", IndicatorType::Domain).unwrap_err();
        assert_eq!(err.violations, vec![Violation::Empty]);
    }

    #[test]
    fn ipv4_octet_out_of_range() {
        assert_eq!(
            validate_indicator("999.1.1.1", IndicatorType::Ipv4),
            vec![Violation::OctetOutOfRange("999".into())]
        );
    }

    #[test]
    fn sha256_sample_is_valid() {
        assert!(validate_indicator(
            "cd09bf437f46210521ad5c21891414f236e29aa6869906820c7c9dc2b565d8be",
            IndicatorType::Sha256
        )
        .is_empty());
    }

    #[test]
    fn short_md5_reports_length() {
        assert_eq!(
            validate_indicator("abcd", IndicatorType::Md5),
            vec![Violation::Length {
                expected: 32,
                actual: 4
            }]
        );
    }

    #[test]
    fn defanged_value_is_invalid() {
        let v = validate_indicator("evil[.]com", IndicatorType::Domain);
        assert!(v.contains(&Violation::DefangToken("[.]")));
    }

    #[test]
    fn url_case_rules() {
        assert_eq!(
            canonical_value("HTTPS://Evil.EXAMPLE.com/Path/X?Q=A", IndicatorType::Url).unwrap(),
            "https://evil.example.com/Path/X?Q=A"
        );
        // trailing slash is significant
        assert_ne!(
            indicator_key("http://a.com/", IndicatorType::Url).unwrap(),
            indicator_key("http://a.com", IndicatorType::Url).unwrap()
        );
    }

    #[test]
    fn domain_rules() {
        assert!(validate_indicator("expiredaccessreviewnow.com", IndicatorType::Domain).is_empty());
        assert!(validate_indicator(
            "bafybeicrq42t3uoi53hf2hhntwq74hfapj5rutrp6ejlidohaghypibnyy.ipfs.dweb.link",
            IndicatorType::Domain
        )
        .is_empty());
        assert!(!validate_indicator("setup.exe", IndicatorType::Domain).is_empty());
        assert!(!validate_indicator("localhost", IndicatorType::Domain).is_empty());
        assert!(!validate_indicator("1.2.3.4", IndicatorType::Domain).is_empty());
        assert!(!validate_indicator("-a.com", IndicatorType::Domain).is_empty());
    }

    #[test]
    fn url_host_must_be_ip_or_domain() {
        assert!(validate_indicator("http://157.90.132.182/", IndicatorType::Url).is_empty());
        assert!(validate_indicator("http://[2001:db8::1]/x", IndicatorType::Url).is_empty());
        assert!(!validate_indicator("http://setup.exe/", IndicatorType::Url).is_empty());
        assert!(!validate_indicator("mailto:a@b.com", IndicatorType::Url).is_empty());
    }

    #[test]
    fn cve_and_email() {
        assert_eq!(
            canonical_value("cve-2021-44228", IndicatorType::Cve).unwrap(),
            "CVE-2021-44228"
        );
        assert!(!validate_indicator("CVE-21-1", IndicatorType::Cve).is_empty());
        assert!(validate_indicator("Ops@Evil.ru", IndicatorType::Email).is_empty());
        assert!(!validate_indicator("a@@b.com", IndicatorType::Email).is_empty());
    }

    #[test]
    fn ipv4_leading_zeros_canonicalize() {
        assert_eq!(
            canonical_value("010.001.0.9", IndicatorType::Ipv4).unwrap(),
            "10.1.0.9"
        );
    }

    #[test]
    fn indicator_equality_is_kind_and_value() {
        let a = Indicator::new(
            "ABCD1234CDEF5678ABCD1234CDEF5678ABCD1234",
            IndicatorType::Sha1,
            t0(),
        )
        .unwrap();
        let b = Indicator::new(
            "abcd1234cdef5678abcd1234cdef5678abcd1234",
            IndicatorType::Sha1,
            Utc::now(),
        )
        .unwrap()
        .with_source(SourceKind::Twitter);
        assert_eq!(a, b);
    }

    #[test]
    fn private_ipv4_flagged() {
        let ind = Indicator::new("192.168.1.10", IndicatorType::Ipv4, t0()).unwrap();
        assert!(ind.non_routable());
        let ind = Indicator::new("157.90.132.182", IndicatorType::Ipv4, t0()).unwrap();
        assert!(!ind.non_routable());
    }

    #[test]
    fn indicator_json_roundtrip() {
        let ind = Indicator::new("http://88.119.169.53/", IndicatorType::Url, t0())
            .unwrap()
            .with_source(SourceKind::DarkWeb {
                spider: Spider::Ahmia,
            })
            .with_defanged_form("http://88[.]119[.]169[.]53/");
        let json = serde_json::to_string(&ind).unwrap();
        assert!(json.contains("\"first_seen\":\"2023-03-01T12:00:00Z\""));
        let back: Indicator = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ind);
        assert_eq!(back.defanged_form(), ind.defanged_form());
        assert_eq!(back.sources(), ind.sources());
    }

    #[test]
    fn invalid_indicator_json_rejected() {
        let json = r#"{"value":"abcd","kind":"md5","first_seen":"2023-03-01T12:00:00Z"}"#;
        assert!(serde_json::from_str::<Indicator>(json).is_err());
    }

    #[test]
    fn source_kind_json() {
        let s = SourceKind::ClearWeb {
            spider: Spider::Sitemap,
        };
        assert_eq!(
            serde_json::to_string(&s).unwrap(),
            r#"{"channel":"clear_web","spider":"sitemap"}"#
        );
        assert_eq!(
            serde_json::to_string(&SourceKind::Twitter).unwrap(),
            r#"{"channel":"twitter"}"#
        );
        assert!(serde_json::from_str::<SourceKind>(r#"{"channel":"clear_web"}"#).is_err());
    }

    #[test]
    fn entity_span_slices_by_chars() {
        let host = "Zé 198.51.100.7 seen";
        let span = EntitySpan::new(host, EntityLabel::Indicator, 3, 15).unwrap();
        assert_eq!(span.text, "198.51.100.7");
        assert!(EntitySpan::new(host, EntityLabel::Indicator, 3, 99).is_err());
        assert!(EntitySpan::new(host, EntityLabel::Indicator, 4, 4).is_err());
    }

    #[test]
    fn document_roundtrip_checks_id() {
        let doc = Document::new(SourceKind::Twitter, "1234", "New C2 at 1.2.3.4", t0());
        let json = serde_json::to_string(&doc).unwrap();
        let back: Document = serde_json::from_str(&json).unwrap();
        assert_eq!(back, doc);
        let tampered = json.replace("New C2", "Old C2");
        assert!(serde_json::from_str::<Document>(&tampered).is_err());
    }

    #[test]
    fn verdict_threshold() {
        assert!(RelevanceVerdict::new(0.5, 0.5, Granularity::Page, "m").relevant);
        assert!(!RelevanceVerdict::new(0.5 - 1e-6, 0.5, Granularity::Page, "m").relevant);
    }

    fn any_kind() -> impl Strategy<Value = IndicatorType> {
        prop::sample::select(IndicatorType::ALL.to_vec())
    }

    fn valid_value() -> impl Strategy<Value = (String, IndicatorType)> {
        prop_oneof![
            "[0-9a-fA-F]{32}".prop_map(|s| (s, IndicatorType::Md5)),
            "[0-9a-fA-F]{40}".prop_map(|s| (s, IndicatorType::Sha1)),
            "[0-9a-fA-F]{64}".prop_map(|s| (s, IndicatorType::Sha256)),
            (0u8..=255, 0u8..=255, 0u8..=255, 0u8..=255)
                .prop_map(|(a, b, c, d)| (format!("{a}.{b}.{c}.{d}"), IndicatorType::Ipv4)),
            (
                "[a-zA-Z][a-zA-Z0-9]{0,10}",
                prop::sample::select(vec!["com", "NET", "org", "onion"])
            )
                .prop_map(|(l, t)| (format!("{l}.{t}"), IndicatorType::Domain)),
            ("[a-zA-Z][a-z0-9]{0,8}", "[A-Za-z0-9/_.-]{0,12}")
                .prop_map(|(h, p)| (format!("HTTP://{h}.Com/{p}"), IndicatorType::Url)),
            (1990u32..2030, 1u32..99999)
                .prop_map(|(y, n)| (format!("cve-{y}-{n:04}"), IndicatorType::Cve)),
        ]
    }

    proptest! {
        #[test]
        fn canonical_values_stay_valid((value, kind) in valid_value()) {
            prop_assert!(validate_indicator(&value, kind).is_empty());
            let canon = canonical_value(&value, kind).unwrap();
            prop_assert!(validate_indicator(&canon, kind).is_empty());
        }

        #[test]
        fn key_is_idempotent((value, kind) in valid_value()) {
            let key = indicator_key(&value, kind).unwrap();
            let canon = key.split_once(':').unwrap().1;
            prop_assert_eq!(indicator_key(canon, kind).unwrap(), key);
        }

        #[test]
        fn validate_never_panics(value in ".{0,80}", kind in any_kind()) {
            let _ = validate_indicator(&value, kind);
        }

        #[test]
        fn document_id_is_pure(locator in ".{0,20}", text in ".{0,200}") {
            let a = Document::new(SourceKind::Twitter, locator.clone(), text.clone(), t0());
            let b = Document::new(SourceKind::Twitter, locator.clone(), text.clone(), Utc::now());
            prop_assert_eq!(a.id(), b.id());
            let c = Document::new(SourceKind::ClearWeb { spider: Spider::Ache }, locator, text, t0());
            prop_assert_ne!(a.id(), c.id());
        }
    }
}

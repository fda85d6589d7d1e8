//! Stage 2 transport and reply interpretation.
//!
//! A VLM is asked one single-turn question per call. Replies are free text;
//! [`ReplyParser`] reduces them to existence or state verdicts. Anything that
//! does not lead with a yes/no token (or name a state option) is ambiguous
//! and triggers one refined retry upstream.

use std::collections::HashMap;
use std::io::{BufRead, Cursor};
use std::time::{Duration, Instant};

use base64::Engine as _;
use image::{ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use crate::ontology::ImageRef;
use crate::transport::{
    classify_http_error, http_agent, read_image_bytes, BackendError, InFlightLimit, RetryPolicy, ScriptError,
    TokenBucket,
};

pub const DEFAULT_MAX_SIDE: u32 = 1024;
pub const DEFAULT_MOCK_REPLY: &str = "It is unclear";
pub const DEFAULT_AMBIGUITY_PHRASES: &[&str] = &["it is unclear", "it's unclear", "i cannot tell"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawReply {
    pub text: String,
    pub latency_ms: u64,
}

impl RawReply {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            latency_ms: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExistenceVerdict {
    Yes,
    No,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateVerdict {
    Label(String),
    Ambiguous,
}

impl StateVerdict {
    pub fn label(&self) -> Option<&str> {
        match self {
            StateVerdict::Label(l) => Some(l),
            StateVerdict::Ambiguous => None,
        }
    }
}

fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase().replace(['\u{2019}', '\u{2018}'], "'");
    let trimmed = lowered.trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation());
    trimmed.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte index of the first occurrence of `needle` in `haystack` bounded by
/// non-word characters on both sides.
fn find_word(haystack: &str, needle: &str) -> Option<usize> {
    if needle.is_empty() {
        return None;
    }
    haystack.match_indices(needle).map(|(i, _)| i).find(|&i| {
        let before_ok = haystack[..i].chars().next_back().is_none_or(|c| !is_word_char(c));
        let after_ok = haystack[i + needle.len()..].chars().next().is_none_or(|c| !is_word_char(c));
        before_ok && after_ok
    })
}

/// Reply classifier with a configurable list of ambiguity phrases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplyParser {
    ambiguity_phrases: Vec<String>,
}

impl Default for ReplyParser {
    fn default() -> Self {
        Self::with_phrases(DEFAULT_AMBIGUITY_PHRASES.iter().copied())
    }
}

impl ReplyParser {
    pub fn with_phrases<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            ambiguity_phrases: phrases
                .into_iter()
                .map(|p| normalize(p.as_ref()))
                .filter(|p| !p.is_empty())
                .collect(),
        }
    }

    pub fn existence(&self, reply: &RawReply) -> ExistenceVerdict {
        let text = normalize(&reply.text);
        if self.ambiguity_phrases.iter().any(|p| text.contains(p.as_str())) {
            return ExistenceVerdict::Ambiguous;
        }
        let first = text.split(|c: char| !c.is_alphanumeric()).find(|t| !t.is_empty());
        match first {
            Some("yes") => ExistenceVerdict::Yes,
            Some("no") => ExistenceVerdict::No,
            _ => ExistenceVerdict::Ambiguous,
        }
    }

    /// Returns the option that occurs earliest in the reply as a whole word.
    /// Ties and misses are ambiguous.
    pub fn state(&self, reply: &RawReply, options: &[String]) -> StateVerdict {
        let text = reply.text.to_lowercase();
        let mut best: Option<(usize, &String)> = None;
        let mut tied = false;
        for option in options {
            let needle = normalize(option);
            let Some(pos) = find_word(&text, &needle) else {
                continue;
            };
            match best {
                Some((b, _)) if pos == b => tied = true,
                Some((b, _)) if pos > b => {}
                _ => {
                    best = Some((pos, option));
                    tied = false;
                }
            }
        }
        match best {
            Some((_, option)) if !tied => StateVerdict::Label(option.clone()),
            _ => StateVerdict::Ambiguous,
        }
    }
}

/// Existence verdict using the default ambiguity phrases.
pub fn classify_existence(reply: &RawReply) -> ExistenceVerdict {
    ReplyParser::default().existence(reply)
}

/// State verdict over `options` using the default parser.
pub fn classify_state(reply: &RawReply, options: &[String]) -> StateVerdict {
    ReplyParser::default().state(reply, options)
}

/// Stage-2 backend. Implementations must tolerate concurrent calls.
pub trait Vlm: Send + Sync {
    /// Sends one single-turn query. The image is scaled so its longest side
    /// is at most `max_side` before transmission.
    fn ask(&self, image: &ImageRef, prompt: &str, max_side: u32) -> Result<RawReply, BackendError>;
}

impl<V: Vlm + ?Sized> Vlm for &V {
    fn ask(&self, image: &ImageRef, prompt: &str, max_side: u32) -> Result<RawReply, BackendError> {
        (**self).ask(image, prompt, max_side)
    }
}

impl<V: Vlm + ?Sized> Vlm for Box<V> {
    fn ask(&self, image: &ImageRef, prompt: &str, max_side: u32) -> Result<RawReply, BackendError> {
        (**self).ask(image, prompt, max_side)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmRule {
    pub image_id: String,
    pub prompt_contains: String,
    pub reply: String,
}

/// VLM replaying scripted replies. For each image the first rule whose
/// `prompt_contains` is a substring of the prompt wins; rules keep insertion
/// order.
#[derive(Debug, Clone)]
pub struct ScriptedVlm {
    rules: HashMap<String, Vec<(String, String)>>,
    default_reply: String,
}

impl Default for ScriptedVlm {
    fn default() -> Self {
        Self {
            rules: HashMap::new(),
            default_reply: DEFAULT_MOCK_REPLY.to_string(),
        }
    }
}

impl ScriptedVlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_default_reply(mut self, reply: impl Into<String>) -> Self {
        self.default_reply = reply.into();
        self
    }

    pub fn push(&mut self, rule: VlmRule) {
        self.rules
            .entry(rule.image_id)
            .or_default()
            .push((rule.prompt_contains, rule.reply));
    }

    pub fn rule(mut self, image_id: &str, prompt_contains: &str, reply: &str) -> Self {
        self.push(VlmRule {
            image_id: image_id.into(),
            prompt_contains: prompt_contains.into(),
            reply: reply.into(),
        });
        self
    }

    /// Loads a JSON Lines script of `{"image_id", "prompt_contains", "reply"}`.
    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, ScriptError> {
        let mut vlm = Self::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| ScriptError {
                line: n + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rule: VlmRule = serde_json::from_str(&line).map_err(|e| ScriptError {
                line: n + 1,
                message: e.to_string(),
            })?;
            vlm.push(rule);
        }
        Ok(vlm)
    }

    pub fn reply_for(&self, image_id: &str, prompt: &str) -> &str {
        self.rules
            .get(image_id)
            .and_then(|rules| rules.iter().find(|(needle, _)| prompt.contains(needle.as_str())))
            .map(|(_, reply)| reply.as_str())
            .unwrap_or(&self.default_reply)
    }
}

impl Vlm for ScriptedVlm {
    fn ask(&self, image: &ImageRef, prompt: &str, _max_side: u32) -> Result<RawReply, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::Protocol("empty prompt".into()));
        }
        Ok(RawReply::new(self.reply_for(&image.image_id, prompt)))
    }
}

/// Target dimensions with the longest side clamped to `max_side`, aspect
/// ratio preserved.
pub fn fit_within(width: u32, height: u32, max_side: u32) -> (u32, u32) {
    let longest = width.max(height);
    if longest <= max_side || longest == 0 {
        return (width, height);
    }
    let scale = f64::from(max_side) / f64::from(longest);
    let scaled = |v: u32| ((f64::from(v) * scale).round() as u32).clamp(1, max_side);
    if width >= height {
        (max_side, scaled(height))
    } else {
        (scaled(width), max_side)
    }
}

/// Downscales encoded image bytes to fit `max_side`. Images that already fit
/// are returned untouched.
pub fn prepare_image(bytes: &[u8], max_side: u32) -> Result<Vec<u8>, BackendError> {
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| BackendError::ImageUnreadable(e.to_string()))?;
    let format = reader.format();
    let img = reader
        .decode()
        .map_err(|e| BackendError::ImageUnreadable(e.to_string()))?;
    let (w, h) = fit_within(img.width(), img.height(), max_side);
    if (w, h) == (img.width(), img.height()) {
        return Ok(bytes.to_vec());
    }
    let resized = img.resize_exact(w, h, image::imageops::FilterType::Triangle);
    let mut out = Cursor::new(Vec::new());
    match format {
        Some(ImageFormat::Jpeg) => resized.to_rgb8().write_to(&mut out, ImageFormat::Jpeg),
        _ => resized.write_to(&mut out, ImageFormat::Png),
    }
    .map_err(|e| BackendError::ImageUnreadable(e.to_string()))?;
    Ok(out.into_inner())
}

#[derive(Debug, Clone)]
pub struct HttpVlmConfig {
    pub base_url: String,
    pub model: String,
    pub max_in_flight: usize,
    /// Requests per second; zero disables the limit.
    pub rate_per_sec: f64,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

impl HttpVlmConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: "qwen-vl-plus".into(),
            max_in_flight: 4,
            rate_per_sec: 0.0,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: [ChatContent<'a>; 2],
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum ChatContent<'a> {
    Image { data_b64: String },
    Text { text: &'a str },
}

#[derive(Deserialize)]
struct ChatResponse {
    text: String,
}

/// Client for a remote VLM speaking `POST /v1/chat`.
pub struct HttpVlm {
    url: String,
    model: String,
    agent: ureq::Agent,
    limit: InFlightLimit,
    bucket: TokenBucket,
    retry: RetryPolicy,
}

impl HttpVlm {
    pub fn new(config: HttpVlmConfig) -> Self {
        Self {
            url: format!("{}/v1/chat", config.base_url.trim_end_matches('/')),
            model: config.model,
            agent: http_agent(config.timeout),
            limit: InFlightLimit::new(config.max_in_flight),
            bucket: TokenBucket::new(config.rate_per_sec),
            retry: config.retry,
        }
    }
}

impl Vlm for HttpVlm {
    fn ask(&self, image: &ImageRef, prompt: &str, max_side: u32) -> Result<RawReply, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::Protocol("empty prompt".into()));
        }
        let bytes = prepare_image(&read_image_bytes(&image.uri)?, max_side)?;
        let request = ChatRequest {
            model: &self.model,
            messages: [ChatMessage {
                role: "user",
                content: [
                    ChatContent::Image {
                        data_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
                    },
                    ChatContent::Text { text: prompt },
                ],
            }],
        };
        let started = Instant::now();
        let response: ChatResponse = self.retry.run(|| {
            self.bucket.acquire();
            let _permit = self.limit.acquire();
            let mut resp = self.agent.post(&self.url).send_json(&request).map_err(classify_http_error)?;
            resp.body_mut().read_json().map_err(classify_http_error)
        })?;
        Ok(RawReply {
            text: response.text,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

//! Word-level tokenization, dual-view marker wrapping and instruction samples.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::KnowledgePair;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS_HR: &str = "[";
pub const EOS_HR: &str = "]";
pub const BOS_T: &str = "{";
pub const EOS_T: &str = "}";
/// Terminates instruction responses and generated text.
pub const END: &str = "</s>";

pub const SPECIALS: [&str; 7] = [PAD, UNK, BOS_HR, EOS_HR, BOS_T, EOS_T, END];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_HR_ID: u32 = 2;
pub const EOS_HR_ID: u32 = 3;
pub const BOS_T_ID: u32 = 4;
pub const EOS_T_ID: u32 = 5;
pub const END_ID: u32 = 6;

const MARKER_CHARS: [char; 4] = ['[', ']', '{', '}'];

/// Alpaca-style instruction layout.
pub mod template {
    pub const PREAMBLE: &str = "Below is an instruction that describes a task, paired with an \
        input that provides further context. Write a response that appropriately completes \
        the request.";
    pub const INSTRUCTION_HEADER: &str = "### Instruction:";
    pub const INPUT_HEADER: &str = "### Input:";
    pub const RESPONSE_HEADER: &str = "### Response:";
    /// Instruction used for triple-completion samples.
    pub const TRIPLE_COMPLETION: &str =
        "Given the head entity and relation, write a tail entity that completes the triple";

    pub fn prompt_prefix(instruction: &str) -> String {
        format!("{PREAMBLE}\n\n{INSTRUCTION_HEADER}\n{instruction}\n\n{INPUT_HEADER}\n")
    }

    pub fn prompt_suffix() -> String {
        format!("\n\n{RESPONSE_HEADER}\n")
    }

    /// Every fixed string the templates can emit, for vocabulary building.
    pub fn all_text() -> String {
        format!("{} {} {TRIPLE_COMPLETION}", prompt_prefix(""), prompt_suffix())
    }
}

/// Lowercased word/punctuation tokens. Marker characters become spaces.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        let c = if MARKER_CHARS.contains(&c) { ' ' } else { c };
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Canonical text form: tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Most frequent tokens of `corpus` (ties broken lexicographically), up
    /// to `max_size` entries including the reserved specials.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("vocabulary corpus is empty".into()));
        }
        if max_size < SPECIALS.len() {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size {max_size} is smaller than the {} reserved tokens",
                SPECIALS.len()
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .take(max_size)
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len()
            || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s)
        {
            return Err(Error::InvalidArgument(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// One token per line; the id of a token is its zero-based line number.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect()
    }

    /// Space-joined tokens, with padding and markers dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD_ID | BOS_HR_ID | EOS_HR_ID | BOS_T_ID | EOS_T_ID | END_ID))
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Fraction of tokens in `texts` that map to the unknown token.
    pub fn oov_rate<S: AsRef<str>>(&self, texts: &[S]) -> f64 {
        let (mut unk, mut total) = (0usize, 0usize);
        for t in texts {
            for id in self.encode(t.as_ref()) {
                total += 1;
                unk += usize::from(id == UNK_ID);
            }
        }
        if total == 0 {
            0.0
        } else {
            unk as f64 / total as f64
        }
    }

    /// SHA-256 over the newline-joined token list, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum View {
    HeadRelation,
    Tail,
}

impl View {
    pub fn bos(self) -> u32 {
        match self {
            View::HeadRelation => BOS_HR_ID,
            View::Tail => BOS_T_ID,
        }
    }

    pub fn eos(self) -> u32 {
        match self {
            View::HeadRelation => EOS_HR_ID,
            View::Tail => EOS_T_ID,
        }
    }
}

pub fn is_eos_marker(id: u32) -> bool {
    id == EOS_HR_ID || id == EOS_T_ID
}

/// Token ids of one sequence, without padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }
}

impl AsRef<[u32]> for TokenSeq {
    fn as_ref(&self) -> &[u32] {
        &self.0
    }
}

/// `bos ⊕ tokens(text)[..max_len-2] ⊕ eos`.
pub fn encode_view(text: &str, view: View, vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    if max_len < 3 {
        return Err(Error::InvalidArgument(format!("view max_len {max_len} < 3")));
    }
    let mut body = vocab.encode(text);
    body.truncate(max_len - 2);
    Ok(wrap(view, body))
}

fn wrap(view: View, body: Vec<u32>) -> TokenSeq {
    let mut ids = Vec::with_capacity(body.len() + 2);
    ids.push(view.bos());
    ids.extend(body);
    ids.push(view.eos());
    TokenSeq(ids)
}

fn truncated(vocab: &Vocab, text: &str, max_tokens: usize) -> Vec<u32> {
    let mut ids = vocab.encode(text);
    ids.truncate(max_tokens);
    ids
}

/// Length limits applied when turning pairs into token sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextLimits {
    /// Per-description token budget.
    pub max_description_length: usize,
    /// Budget for a whole instruction sample.
    pub max_lm_length: usize,
}

impl Default for TextLimits {
    fn default() -> Self {
        TextLimits {
            max_description_length: 50,
            max_lm_length: 256,
        }
    }
}

/// Encode both views of a pair. Head and relation descriptions are each
/// truncated to the description budget before concatenation.
pub fn encode_pair(pair: &KnowledgePair, vocab: &Vocab, limits: &TextLimits) -> (TokenSeq, TokenSeq) {
    let n = limits.max_description_length;
    let mut hr = truncated(vocab, &pair.head_text, n);
    hr.extend(truncated(vocab, &pair.relation_text, n));
    let t = truncated(vocab, &pair.t_text, n);
    (wrap(View::HeadRelation, hr), wrap(View::Tail, t))
}

/// Prompt + response tokens with a loss mask over the response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionSample {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    /// True exactly on response positions (including the terminal marker).
    pub mask: Vec<bool>,
}

impl InstructionSample {
    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.prompt_len]
    }

    pub fn target(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    pub fn target_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }
}

/// Prompt tokens for an instruction whose input is the concatenation of
/// `inputs`, each truncated to its token budget.
pub fn prompt_tokens(vocab: &Vocab, instruction: &str, inputs: &[(&str, usize)]) -> Vec<u32> {
    let mut ids = vocab.encode(&template::prompt_prefix(instruction));
    for (text, budget) in inputs {
        ids.extend(truncated(vocab, text, *budget));
    }
    ids.extend(vocab.encode(&template::prompt_suffix()));
    ids
}

/// Triple-completion sample: instruction and `D_hr` in the prompt, `D_t`
/// plus the terminal marker as the response.
pub fn render_instruction(
    pair: &KnowledgePair,
    vocab: &Vocab,
    limits: &TextLimits,
) -> Result<InstructionSample> {
    let n = limits.max_description_length;
    let prompt = prompt_tokens(
        vocab,
        template::TRIPLE_COMPLETION,
        &[(&pair.head_text, n), (&pair.relation_text, n)],
    );
    let mut target = truncated(vocab, &pair.t_text, n);
    let budget = limits.max_lm_length.saturating_sub(prompt.len() + 1);
    if budget == 0 {
        return Err(Error::InvalidArgument(format!(
            "prompt of {} tokens leaves no room within {} tokens",
            prompt.len(),
            limits.max_lm_length
        )));
    }
    target.truncate(budget);
    target.push(END_ID);
    let prompt_len = prompt.len();
    let mut tokens = prompt;
    let mask = (0..tokens.len() + target.len()).map(|i| i >= prompt_len).collect();
    tokens.extend(target);
    Ok(InstructionSample {
        tokens,
        prompt_len,
        mask,
    })
}

//! Corpus ingestion, vocabularies, continuous batching and BPTT windows.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::WindowBatch;

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VocabMode {
    Byte,
    Char,
    Word,
}

impl FromStr for VocabMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "byte" => Ok(Self::Byte),
            "char" => Ok(Self::Char),
            "word" => Ok(Self::Word),
            other => Err(Error::InvalidArgument(format!("unknown vocabulary mode `{other}` (byte, char, word)"))),
        }
    }
}

impl fmt::Display for VocabMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Byte => "byte",
            Self::Char => "char",
            Self::Word => "word",
        })
    }
}

/// Bijection between symbols and dense ids.
///
/// Byte symbols are stored as the Latin-1 character with the same code, so
/// every mode shares one string-keyed table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    mode: VocabMode,
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

fn utf8(text: &[u8]) -> Result<&str> {
    std::str::from_utf8(text).map_err(|e| Error::Data(format!("text is not valid UTF-8: {e}")))
}

/// Whitespace tokens of every line, each line closed by `<eos>`. A trailing
/// newline does not open an extra empty line.
fn word_tokens(text: &str) -> impl Iterator<Item = &str> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    body.split('\n').flat_map(|line| line.split_whitespace().chain(std::iter::once(EOS)))
}

impl Vocab {
    /// Builds a vocabulary from `text`. Ids follow sorted symbol order; in word
    /// mode `<unk>` and `<eos>` take ids 0 and 1.
    pub fn build(text: &[u8], mode: VocabMode) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from empty text".into()));
        }
        let symbols: Vec<String> = match mode {
            VocabMode::Byte => {
                let mut seen = [false; 256];
                for &b in text {
                    seen[b as usize] = true;
                }
                (0..=255u8).filter(|&b| seen[b as usize]).map(|b| char::from(b).to_string()).collect()
            }
            VocabMode::Char => {
                let mut chars: Vec<char> = utf8(text)?.chars().collect();
                chars.sort_unstable();
                chars.dedup();
                chars.into_iter().map(String::from).collect()
            }
            VocabMode::Word => {
                let mut words: Vec<&str> = word_tokens(utf8(text)?).filter(|w| *w != EOS && *w != UNK).collect();
                words.sort_unstable();
                words.dedup();
                [UNK, EOS].into_iter().chain(words).map(String::from).collect()
            }
        };
        Self::from_symbols(symbols, mode)
    }

    pub fn from_symbols(symbols: Vec<String>, mode: VocabMode) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Data("empty vocabulary".into()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (id, s) in symbols.iter().enumerate() {
            if mode == VocabMode::Byte && (s.chars().count() != 1 || s.chars().next().is_some_and(|c| c as u32 > 255)) {
                return Err(Error::Data(format!("`{}` is not a byte symbol", escape(s))));
            }
            if mode == VocabMode::Char && s.chars().count() != 1 {
                return Err(Error::Data(format!("`{}` is not a single character", escape(s))));
            }
            if index.insert(s.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate symbol `{}` at id {id}", escape(s))));
            }
        }
        if mode == VocabMode::Word && (index.get(UNK) != Some(&0) || index.get(EOS) != Some(&1)) {
            return Err(Error::Data(format!("word vocabulary must start with {UNK} and {EOS}")));
        }
        Ok(Self { mode, symbols, index })
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    fn lookup(&self, symbol: &str) -> Result<usize> {
        self.id(symbol).ok_or_else(|| Error::Data(format!("symbol `{}` is not in the vocabulary", escape(symbol))))
    }

    /// Byte and char modes reject symbols outside the vocabulary; word mode
    /// maps them to `<unk>`.
    pub fn encode(&self, text: &[u8]) -> Result<TokenStream> {
        let ids = match self.mode {
            VocabMode::Byte => {
                let mut table = [usize::MAX; 256];
                for (id, s) in self.symbols.iter().enumerate() {
                    table[s.chars().next().expect("byte symbol") as usize] = id;
                }
                text.iter()
                    .map(|&b| match table[b as usize] {
                        usize::MAX => Err(Error::Data(format!("byte 0x{b:02x} is not in the vocabulary"))),
                        id => Ok(id),
                    })
                    .collect::<Result<_>>()?
            }
            VocabMode::Char => {
                let mut buf = [0u8; 4];
                utf8(text)?.chars().map(|c| self.lookup(c.encode_utf8(&mut buf))).collect::<Result<_>>()?
            }
            VocabMode::Word => word_tokens(utf8(text)?).map(|w| self.id(w).unwrap_or(0)).collect(),
        };
        Ok(TokenStream { ids })
    }

    /// Inverse of `encode`. Word mode joins tokens with single spaces and
    /// renders `<eos>` as a newline.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let sym = |id: usize| {
            self.symbol(id).ok_or_else(|| Error::Data(format!("id {id} out of range for vocabulary of {}", self.len())))
        };
        let mut out = Vec::with_capacity(ids.len());
        match self.mode {
            VocabMode::Byte => {
                for &id in ids {
                    out.push(sym(id)?.chars().next().expect("byte symbol") as u8);
                }
            }
            VocabMode::Char => {
                for &id in ids {
                    out.extend_from_slice(sym(id)?.as_bytes());
                }
            }
            VocabMode::Word => {
                let mut line_start = true;
                for &id in ids {
                    let s = sym(id)?;
                    if s == EOS {
                        out.push(b'\n');
                        line_start = true;
                    } else {
                        if !line_start {
                            out.push(b' ');
                        }
                        out.extend_from_slice(s.as_bytes());
                        line_start = false;
                    }
                }
            }
        }
        Ok(out)
    }

    /// One escaped symbol per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for s in &self.symbols {
            out.push_str(&escape(s));
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(contents: &str, mode: VocabMode) -> Result<Self> {
        let symbols = contents
            .lines()
            .enumerate()
            .map(|(i, line)| unescape(line).map_err(|e| Error::Data(format!("vocabulary line {}: {e}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_symbols(symbols, mode)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path, mode: VocabMode) -> Result<Self> {
        Self::from_file_string(&std::fs::read_to_string(path)?, mode)
    }
}

/// Escapes backslash and control characters so that every symbol fits on one line.
pub fn escape(symbol: &str) -> String {
    let mut out = String::with_capacity(symbol.len());
    for c in symbol.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c.is_control() => out.push_str(&format!("\\u{{{:x}}}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(line: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            Some('u') => {
                if chars.next() != Some('{') {
                    return Err("expected `{` after \\u".into());
                }
                let hex: String = chars.by_ref().take_while(|&c| c != '}').collect();
                let code = u32::from_str_radix(&hex, 16).map_err(|_| format!("bad escape \\u{{{hex}}}"))?;
                out.push(char::from_u32(code).ok_or_else(|| format!("invalid scalar value {code:#x}"))?);
            }
            Some(other) => return Err(format!("unknown escape \\{other}")),
            None => return Err("dangling backslash".into()),
        }
    }
    if out.is_empty() {
        return Err("empty symbol".into());
    }
    Ok(out)
}

/// Contiguous id sequence of one split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<usize>,
}

impl TokenStream {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `rows` parallel substreams of equal length, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batched {
    rows: usize,
    len: usize,
    data: Vec<usize>,
}

impl Batched {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row_len(&self) -> usize {
        self.len
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.data[r * self.len..(r + 1) * self.len]
    }

    /// Number of target tokens covered by one pass of `windows`.
    pub fn num_targets(&self) -> usize {
        self.rows * self.len.saturating_sub(1)
    }

    pub fn windows(&self, steps: usize) -> Result<Windows<'_>> {
        windows(self, steps)
    }
}

/// Truncates to a multiple of `rows` and splits into consecutive rows.
pub fn batchify(stream: &TokenStream, rows: usize) -> Result<Batched> {
    if rows == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if stream.len() < rows {
        return Err(Error::Data(format!("stream of {} tokens is shorter than batch size {rows}", stream.len())));
    }
    let len = stream.len() / rows;
    Ok(Batched { rows, len, data: stream.ids[..len * rows].to_vec() })
}

/// Successive windows of at most `steps` input positions with targets
/// shifted by one; the last window may be shorter.
#[derive(Clone, Debug)]
pub struct Windows<'a> {
    batched: &'a Batched,
    steps: usize,
    pos: usize,
}

pub fn windows(batched: &Batched, steps: usize) -> Result<Windows<'_>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("window length must be at least 1".into()));
    }
    Ok(Windows { batched, steps, pos: 0 })
}

impl Windows<'_> {
    /// Number of windows still to be produced.
    pub fn remaining(&self) -> usize {
        let usable = self.batched.len.saturating_sub(1);
        usable.saturating_sub(self.pos).div_ceil(self.steps)
    }
}

impl Iterator for Windows<'_> {
    type Item = WindowBatch;

    fn next(&mut self) -> Option<WindowBatch> {
        let usable = self.batched.len.saturating_sub(1);
        if self.pos >= usable {
            return None;
        }
        let t = self.steps.min(usable - self.pos);
        let b = self.batched.rows;
        let mut inputs = Vec::with_capacity(b * t);
        let mut targets = Vec::with_capacity(b * t);
        for r in 0..b {
            let row = self.batched.row(r);
            inputs.extend_from_slice(&row[self.pos..self.pos + t]);
            targets.extend_from_slice(&row[self.pos + 1..self.pos + t + 1]);
        }
        self.pos += t;
        Some(WindowBatch::new(b, t, inputs, targets).expect("window shape"))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.remaining();
        (n, Some(n))
    }
}

impl ExactSizeIterator for Windows<'_> {}

/// Train, validation and test streams sharing one vocabulary.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: TokenStream,
    pub valid: TokenStream,
    pub test: TokenStream,
}

impl Corpus {
    /// Word vocabularies come from the training split alone; byte and char
    /// vocabularies cover all three splits so that encoding never fails.
    pub fn from_texts(train: &[u8], valid: &[u8], test: &[u8], mode: VocabMode) -> Result<Self> {
        let vocab = match mode {
            VocabMode::Word => Vocab::build(train, mode)?,
            _ => Vocab::build(&[train, valid, test].concat(), mode)?,
        };
        Self::with_vocab(vocab, train, valid, test)
    }

    pub fn with_vocab(vocab: Vocab, train: &[u8], valid: &[u8], test: &[u8]) -> Result<Self> {
        Ok(Self { train: vocab.encode(train)?, valid: vocab.encode(valid)?, test: vocab.encode(test)?, vocab })
    }

    pub fn load(train: &Path, valid: &Path, test: &Path, mode: VocabMode) -> Result<Self> {
        let read = |p: &Path| std::fs::read(p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())));
        Self::from_texts(&read(train)?, &read(valid)?, &read(test)?, mode)
    }
}

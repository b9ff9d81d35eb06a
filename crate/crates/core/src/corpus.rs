//! Prompt/response ingestion: chat templating, byte-level tokenization and
//! prompt/response index bookkeeping.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Reserved ids below the byte range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u32)]
pub enum Special {
    Pad = 0,
    Bos = 1,
    End = 2,
    User = 3,
    Assistant = 4,
}

impl Special {
    pub const COUNT: u32 = 5;

    pub fn id(self) -> TokenId {
        self as TokenId
    }
}

/// 256 byte values plus the special block.
pub const VOCAB_SIZE: usize = 256 + Special::COUNT as usize;

/// Byte-level encoding: every byte maps to `byte + Special::COUNT`.
pub fn tokenize(text: &str) -> Vec<TokenId> {
    text.bytes().map(|b| b as TokenId + Special::COUNT).collect()
}

/// Inverse of [`tokenize`]. Special ids are dropped; the byte run is decoded
/// lossily if it is not valid UTF-8.
pub fn detokenize(ids: &[TokenId]) -> String {
    String::from_utf8_lossy(&id_bytes(ids)).into_owned()
}

fn id_bytes(ids: &[TokenId]) -> Vec<u8> {
    ids.iter()
        .filter(|&&id| id >= Special::COUNT && id < VOCAB_SIZE as TokenId)
        .map(|&id| (id - Special::COUNT) as u8)
        .collect()
}

/// Printable form of a single token, used by reports and renderers.
pub fn token_display(id: TokenId) -> String {
    match id {
        0 => "<pad>".into(),
        1 => "<bos>".into(),
        2 => "<end>".into(),
        3 => "<user>".into(),
        4 => "<assistant>".into(),
        _ => {
            let b = (id - Special::COUNT) as u8;
            if b.is_ascii_graphic() || b == b' ' {
                (b as char).to_string()
            } else {
                format!("\\x{b:02x}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Special(Special),
    Text(String),
}

impl Segment {
    fn encode(&self, out: &mut Vec<TokenId>) {
        match self {
            Segment::Special(s) => out.push(s.id()),
            Segment::Text(t) => out.extend(tokenize(t)),
        }
    }
}

/// Chat template. The prompt segment is `user_tag + prompt + separator +
/// assistant_tag`; the response segment is `response + end_token`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub user_tag: Segment,
    pub separator: String,
    pub assistant_tag: Segment,
    pub end_token: Segment,
    pub max_seq_len: usize,
}

impl Default for TemplateSpec {
    fn default() -> Self {
        Self::with_max_len(256)
    }
}

impl TemplateSpec {
    pub fn with_max_len(max_seq_len: usize) -> Self {
        TemplateSpec {
            user_tag: Segment::Special(Special::User),
            separator: String::new(),
            assistant_tag: Segment::Special(Special::Assistant),
            end_token: Segment::Special(Special::End),
            max_seq_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub prompt: String,
    pub response: String,
}

/// A templated, tokenized prompt/response pair.
///
/// Positions `0..prompt_len` are the prompt, `prompt_len..len()` the response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSample {
    pub id: usize,
    pub ids: Vec<TokenId>,
    pub prompt_len: usize,
}

impl TokenizedSample {
    /// Builds a sample from raw ids, checking the partition invariants.
    pub fn new(id: usize, ids: Vec<TokenId>, prompt_len: usize) -> Result<Self> {
        if prompt_len == 0 {
            return Err(Error::Index("prompt_len must be at least 1".into()));
        }
        if prompt_len >= ids.len() {
            return Err(Error::EmptyResponse);
        }
        Ok(TokenizedSample {
            id,
            ids,
            prompt_len,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn resp_len(&self) -> usize {
        self.ids.len() - self.prompt_len
    }

    pub fn prompt_range(&self) -> Range<usize> {
        0..self.prompt_len
    }

    pub fn resp_range(&self) -> Range<usize> {
        self.prompt_len..self.ids.len()
    }

    pub fn response_ids(&self) -> &[TokenId] {
        &self.ids[self.prompt_len..]
    }
}

pub fn assemble_sample(id: usize, record: &RawRecord, template: &TemplateSpec) -> Result<TokenizedSample> {
    if record.response.trim().is_empty() {
        return Err(Error::EmptyResponse);
    }
    let mut ids = Vec::with_capacity(record.prompt.len() + record.response.len() + 4);
    template.user_tag.encode(&mut ids);
    ids.extend(tokenize(&record.prompt));
    ids.extend(tokenize(&template.separator));
    template.assistant_tag.encode(&mut ids);
    let prompt_len = ids.len();
    ids.extend(tokenize(&record.response));
    template.end_token.encode(&mut ids);

    if ids.len() > template.max_seq_len {
        return Err(Error::SampleTooLong {
            len: ids.len(),
            max: template.max_seq_len,
        });
    }
    TokenizedSample::new(id, ids, prompt_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub samples: Vec<TokenizedSample>,
    pub split: Split,
    pub rejected: Vec<Rejection>,
}

impl Corpus {
    pub fn skipped_count(&self) -> usize {
        self.rejected.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn response_tokens(&self) -> usize {
        self.samples.iter().map(|s| s.resp_len()).sum()
    }
}

/// Loads line-delimited `{"prompt", "response"}` records in file order.
///
/// Sample ids are the zero-based line numbers of the accepted records, so
/// sidecar files keyed by line stay aligned even when lines are rejected.
/// The seed is accepted for interface stability; ingestion itself does not
/// reorder anything.
pub fn load_corpus(path: &Path, template: &TemplateSpec, split: Split, _seed: u64) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    let mut candidate_lines = 0usize;
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        candidate_lines += 1;
        let parsed = serde_json::from_str::<RawRecord>(line)
            .map_err(|e| Error::Format(e.to_string()))
            .and_then(|rec| assemble_sample(line_no, &rec, template));
        match parsed {
            Ok(s) => samples.push(s),
            Err(e) => rejected.push(Rejection {
                line: line_no,
                reason: e.to_string(),
            }),
        }
    }
    if samples.is_empty() {
        return Err(Error::Format(format!(
            "{}: no parsable records ({candidate_lines} lines rejected)",
            path.display()
        )));
    }
    Ok(Corpus {
        samples,
        split,
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const S: u32 = Special::COUNT;

    #[test]
    fn tokenize_is_byte_offset() {
        assert_eq!(tokenize("Hi"), vec![b'H' as u32 + S, b'i' as u32 + S]);
        assert!(tokenize("").is_empty());
        assert_eq!(detokenize(&tokenize("héllo ✓")), "héllo ✓");
    }

    #[test]
    fn assemble_with_text_tags() {
        let template = TemplateSpec {
            user_tag: Segment::Text("<|User|>\n".into()),
            separator: String::new(),
            assistant_tag: Segment::Text("\n<|Assistant|>\n".into()),
            end_token: Segment::Special(Special::End),
            max_seq_len: 256,
        };
        let rec = RawRecord {
            prompt: "Q".into(),
            response: "A".into(),
        };
        let s = assemble_sample(0, &rec, &template).unwrap();
        // "<|User|>\n" = 9 bytes, "Q" = 1, "\n<|Assistant|>\n" = 15 bytes.
        assert_eq!(s.prompt_len, 9 + 1 + 15);
        assert_eq!(s.prompt_len, tokenize("<|User|>\nQ\n<|Assistant|>\n").len());
        assert_eq!(s.resp_len(), 2);
        assert_eq!(s.response_ids(), &[b'A' as u32 + S, Special::End.id()]);
    }

    #[test]
    fn assemble_with_special_tags() {
        let rec = RawRecord {
            prompt: "ab".into(),
            response: "cd".into(),
        };
        let s = assemble_sample(3, &rec, &TemplateSpec::default()).unwrap();
        assert_eq!(s.prompt_len, 4);
        assert_eq!(s.ids[0], Special::User.id());
        assert_eq!(s.ids[3], Special::Assistant.id());
        assert_eq!(s.len(), 7);
        assert_eq!(s.prompt_range().end, s.resp_range().start);
    }

    #[test]
    fn assemble_rejects_bad_records() {
        let empty = RawRecord {
            prompt: "Q".into(),
            response: "  \n".into(),
        };
        assert!(matches!(
            assemble_sample(0, &empty, &TemplateSpec::default()),
            Err(Error::EmptyResponse)
        ));
        let long = RawRecord {
            prompt: "Q".into(),
            response: "x".repeat(10_000),
        };
        assert!(matches!(
            assemble_sample(0, &long, &TemplateSpec::default()),
            Err(Error::SampleTooLong { .. })
        ));
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn load_counts_skipped_lines() {
        let f = write_lines(&[
            r#"{"prompt": "a", "response": "b"}"#,
            r#"{"prompt": "a", "response": "b"}"#,
            r#"{"prompt": "a", "response": "b"}"#,
        ]);
        let c = load_corpus(f.path(), &TemplateSpec::default(), Split::Train, 0).unwrap();
        assert_eq!((c.len(), c.skipped_count()), (3, 0));

        let f = write_lines(&[
            r#"{"prompt": "a", "response": "b"}"#,
            r#"{"prompt": 1}"#,
            r#"{"prompt": "c", "response": "d"}"#,
        ]);
        let c = load_corpus(f.path(), &TemplateSpec::default(), Split::Train, 0).unwrap();
        assert_eq!((c.len(), c.skipped_count()), (2, 1));
        assert_eq!(c.rejected[0].line, 1);
        assert_eq!(c.samples[1].id, 2);
    }

    #[test]
    fn load_errors() {
        let missing = Path::new("/nonexistent/corpus.jsonl");
        assert!(matches!(
            load_corpus(missing, &TemplateSpec::default(), Split::Train, 0),
            Err(Error::Io { .. })
        ));
        let f = write_lines(&["not json", "{}"]);
        assert!(matches!(
            load_corpus(f.path(), &TemplateSpec::default(), Split::Train, 0),
            Err(Error::Format(_))
        ));
    }
}

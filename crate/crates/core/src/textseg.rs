//! Tokenization with character offsets and BIO conversion between
//! character spans and token tags.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{EmotionLabel, LabeledSpan};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AteTag {
    B,
    I,
    O,
}

impl AteTag {
    pub const ALL: [AteTag; 3] = [AteTag::B, AteTag::I, AteTag::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

/// Emotion tag per token; `O` marks tokens outside every aspect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmoTag {
    #[serde(rename = "HAP")]
    Hap,
    #[serde(rename = "ANG")]
    Ang,
    #[serde(rename = "SAD")]
    Sad,
    #[serde(rename = "FEA")]
    Fea,
    #[serde(rename = "NONE")]
    None,
    O,
}

impl EmoTag {
    pub const ALL: [EmoTag; 6] = [
        EmoTag::Hap,
        EmoTag::Ang,
        EmoTag::Sad,
        EmoTag::Fea,
        EmoTag::None,
        EmoTag::O,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn emotion(self) -> Option<EmotionLabel> {
        EmotionLabel::from_index(self.index())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmoTag::Hap => "HAP",
            EmoTag::Ang => "ANG",
            EmoTag::Sad => "SAD",
            EmoTag::Fea => "FEA",
            EmoTag::None => "NONE",
            EmoTag::O => "O",
        }
    }
}

impl From<EmotionLabel> for EmoTag {
    fn from(e: EmotionLabel) -> Self {
        EmoTag::from_index(e.index())
    }
}

impl fmt::Display for AteTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AteTag::B => "B",
            AteTag::I => "I",
            AteTag::O => "O",
        })
    }
}

impl fmt::Display for EmoTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSequence {
    pub doc_id: String,
    pub tokens: Vec<Token>,
    pub ate_tags: Vec<AteTag>,
    pub emo_tags: Vec<EmoTag>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Space,
    Word,
    Symbol,
}

fn classify(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_alphanumeric() || c == '\'' || c == '\u{2019}' {
        CharClass::Word
    } else {
        CharClass::Symbol
    }
}

/// Splits on whitespace, then separates word runs (alphanumerics and
/// apostrophes) from punctuation/symbol runs. Offsets are in chars.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current: Option<(CharClass, usize, String)> = None;
    for (i, c) in text.chars().enumerate() {
        let class = classify(c);
        match &mut current {
            Some((cls, _, buf)) if *cls == class && class != CharClass::Space => buf.push(c),
            _ => {
                if let Some((cls, start, buf)) = current.take() {
                    if cls != CharClass::Space {
                        tokens.push(Token {
                            end: start + buf.chars().count(),
                            text: buf,
                            start,
                        });
                    }
                }
                current = Some((class, i, c.to_string()));
            }
        }
    }
    if let Some((cls, start, buf)) = current {
        if cls != CharClass::Space {
            tokens.push(Token {
                end: start + buf.chars().count(),
                text: buf,
                start,
            });
        }
    }
    tokens
}

fn check_non_overlapping(spans: &[LabeledSpan]) -> Result<Vec<LabeledSpan>> {
    let mut sorted = spans.to_vec();
    sorted.sort_by_key(|s| (s.start, s.end));
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(Error::OverlappingSpans {
                first: w[0].range(),
                second: w[1].range(),
            });
        }
    }
    Ok(sorted)
}

/// Tags tokens that share at least one character with a span. When two spans
/// touch the same token, the earlier span claims it.
pub fn encode_tags(doc_id: &str, text: &str, spans: &[LabeledSpan]) -> Result<TaggedSequence> {
    let spans = check_non_overlapping(spans)?;
    let tokens = tokenize(text);
    let mut ate_tags = vec![AteTag::O; tokens.len()];
    let mut emo_tags = vec![EmoTag::O; tokens.len()];
    for span in &spans {
        let mut first = true;
        for (i, tok) in tokens.iter().enumerate() {
            let overlaps = tok.start < span.end && span.start < tok.end;
            if !overlaps || ate_tags[i] != AteTag::O {
                continue;
            }
            ate_tags[i] = if first { AteTag::B } else { AteTag::I };
            emo_tags[i] = span.emotion.into();
            first = false;
        }
    }
    Ok(TaggedSequence {
        doc_id: doc_id.to_string(),
        tokens,
        ate_tags,
        emo_tags,
    })
}

/// Reconstructs character spans from tags. A stray `I` opens a new span. The
/// emotion is the majority non-`O` emotion tag over the run; ties go to the
/// label seen first in the run, and a run without emotion tags gets `None`.
pub fn decode_spans(tagged: &TaggedSequence) -> Vec<LabeledSpan> {
    decode_tags(&tagged.tokens, &tagged.ate_tags, &tagged.emo_tags)
}

pub fn decode_tags(tokens: &[Token], ate: &[AteTag], emo: &[EmoTag]) -> Vec<LabeledSpan> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (i, tag) in ate.iter().enumerate().take(tokens.len()) {
        match tag {
            AteTag::O => {}
            AteTag::B => runs.push((i, i)),
            AteTag::I => match runs.last_mut() {
                Some(run) if run.1 + 1 == i => run.1 = i,
                _ => runs.push((i, i)),
            },
        }
    }
    runs.into_iter()
        .map(|(a, b)| {
            let mut counts: BTreeMap<EmotionLabel, (usize, usize)> = BTreeMap::new();
            for (pos, tag) in emo[a..=b].iter().enumerate() {
                if let Some(e) = tag.emotion() {
                    let entry = counts.entry(e).or_insert((0, pos));
                    entry.0 += 1;
                }
            }
            let emotion = counts
                .into_iter()
                .max_by(|(_, (ca, pa)), (_, (cb, pb))| ca.cmp(cb).then(pb.cmp(pa)))
                .map_or(EmotionLabel::None, |(e, _)| e);
            LabeledSpan::new(tokens[a].start, tokens[b].end, emotion)
        })
        .collect()
}

/// Moves span boundaries onto token boundaries: the spans a tagger could
/// reproduce exactly.
pub fn snap_spans(text: &str, spans: &[LabeledSpan]) -> Result<Vec<LabeledSpan>> {
    Ok(decode_spans(&encode_tags("", text, spans)?))
}

/// One `token<TAB>ate<TAB>emo` line per token, a blank line after each document.
pub fn to_conll(sequences: &[TaggedSequence]) -> String {
    let mut out = String::new();
    for seq in sequences {
        for ((tok, ate), emo) in seq.tokens.iter().zip(&seq.ate_tags).zip(&seq.emo_tags) {
            out.push_str(&format!("{}\t{}\t{}\n", tok.text, ate, emo));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use EmotionLabel::*;

    fn spans_of(tokens: &[Token]) -> Vec<(&str, usize, usize)> {
        tokens.iter().map(|t| (t.text.as_str(), t.start, t.end)).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert!(tokenize("").is_empty());
        assert_eq!(
            spans_of(&tokenize("I love you.")),
            vec![("I", 0, 1), ("love", 2, 6), ("you", 7, 10), (".", 10, 11)]
        );
        assert_eq!(
            spans_of(&tokenize("thaaaaaat!!!")),
            vec![("thaaaaaat", 0, 9), ("!!!", 9, 12)]
        );
        assert_eq!(
            spans_of(&tokenize("  don't\t#fire…ok ")),
            vec![("don't", 2, 7), ("#", 8, 9), ("fire", 9, 13), ("…", 13, 14), ("ok", 14, 16)]
        );
        // Offsets are in chars, not bytes.
        assert_eq!(spans_of(&tokenize("café ☕")), vec![("café", 0, 4), ("☕", 5, 6)]);
    }

    #[test]
    fn encode_examples() {
        let t = encode_tags("d", "I love you.", &[LabeledSpan::new(7, 10, Happiness)]).unwrap();
        assert_eq!(t.ate_tags, vec![AteTag::O, AteTag::O, AteTag::B, AteTag::O]);
        assert_eq!(t.emo_tags, vec![EmoTag::O, EmoTag::O, EmoTag::Hap, EmoTag::O]);

        let t = encode_tags("d", "I love you.", &[]).unwrap();
        assert!(t.ate_tags.iter().all(|a| *a == AteTag::O));
        assert!(t.emo_tags.iter().all(|a| *a == EmoTag::O));

        let t = encode_tags("d", "Hyde Park is", &[LabeledSpan::new(0, 9, Happiness)]).unwrap();
        assert_eq!(t.ate_tags, vec![AteTag::B, AteTag::I, AteTag::O]);
        assert_eq!(t.emo_tags, vec![EmoTag::Hap, EmoTag::Hap, EmoTag::O]);

        let overlapping = [LabeledSpan::new(0, 4, Fear), LabeledSpan::new(3, 6, Fear)];
        assert!(encode_tags("d", "Hyde Park is", &overlapping).is_err());
    }

    #[test]
    fn partial_token_overlap_counts() {
        // Span clips "love" and "you": both tokens belong to it.
        let t = encode_tags("d", "I love you.", &[LabeledSpan::new(5, 8, Anger)]).unwrap();
        assert_eq!(t.ate_tags, vec![AteTag::O, AteTag::B, AteTag::I, AteTag::O]);
    }

    #[test]
    fn decode_examples() {
        let t = encode_tags("d", "I love you.", &[LabeledSpan::new(7, 10, Happiness)]).unwrap();
        assert_eq!(decode_spans(&t), vec![LabeledSpan::new(7, 10, Happiness)]);

        let tokens = tokenize("a b c");
        assert!(decode_tags(&tokens, &[AteTag::O; 3], &[EmoTag::O; 3]).is_empty());

        let got = decode_tags(
            &tokens,
            &[AteTag::O, AteTag::I, AteTag::I],
            &[EmoTag::O, EmoTag::Ang, EmoTag::Sad],
        );
        assert_eq!(got, vec![LabeledSpan::new(2, 5, Anger)]);
    }

    #[test]
    fn decode_majority_and_defaults() {
        let tokens = tokenize("a b c d");
        let got = decode_tags(
            &tokens,
            &[AteTag::B, AteTag::I, AteTag::I, AteTag::B],
            &[EmoTag::O, EmoTag::Sad, EmoTag::Sad, EmoTag::O],
        );
        assert_eq!(
            got,
            vec![LabeledSpan::new(0, 5, Sadness), LabeledSpan::new(6, 7, None)]
        );
        // Leading O emotion, then a tie: the label seen first in the run wins.
        let got = decode_tags(
            &tokens,
            &[AteTag::B, AteTag::I, AteTag::I, AteTag::O],
            &[EmoTag::O, EmoTag::Fea, EmoTag::Hap, EmoTag::O],
        );
        assert_eq!(got, vec![LabeledSpan::new(0, 5, Fear)]);
    }

    #[test]
    fn conll_layout() {
        let t = encode_tags("d", "I love you.", &[LabeledSpan::new(7, 10, Happiness)]).unwrap();
        assert_eq!(
            to_conll(&[t.clone(), t]),
            "I\tO\tO\nlove\tO\tO\nyou\tB\tHAP\n.\tO\tO\n\n".repeat(2)
        );
    }
}

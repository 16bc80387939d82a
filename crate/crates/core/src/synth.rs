//! Small templated corpora with one aspect per sentence.

use crate::corpus::{char_len, AnnotatedDocument, DocStatus, EmotionLabel, LabeledSpan};

pub const TEMPLATES: [(&str, &str, EmotionLabel); 4] = [
    ("I love ", ".", EmotionLabel::Happiness),
    ("I hate ", ".", EmotionLabel::Anger),
    ("I miss ", " so much.", EmotionLabel::Sadness),
    ("I am scared of ", ".", EmotionLabel::Fear),
];

pub const ASPECTS: [&str; 8] = [
    "you",
    "the park",
    "my dog",
    "this city",
    "the rain",
    "our teacher",
    "the music",
    "her smile",
];

/// Every template filled with every aspect: 32 documents.
pub fn templated_corpus() -> Vec<AnnotatedDocument> {
    let mut docs = Vec::new();
    for (t, (prefix, suffix, emotion)) in TEMPLATES.iter().enumerate() {
        for (a, aspect) in ASPECTS.iter().enumerate() {
            let start = char_len(prefix);
            let end = start + char_len(aspect);
            docs.push(AnnotatedDocument {
                doc_id: format!("synth-{t}-{a}"),
                text: format!("{prefix}{aspect}{suffix}"),
                spans: vec![LabeledSpan::new(start, end, *emotion)],
                status: DocStatus::Included,
            });
        }
    }
    docs
}

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::synthcorpus::{grammar_words, CaptionedVideo};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;

/// Noun prompt templates; `{}` is replaced by the noun phrase.
pub const TEMPLATES: [&str; 12] = [
    "A footage of a {}.",
    "A footage of the {}.",
    "A footage of one {}.",
    "A video of a {}.",
    "A video of the {}.",
    "A video of one {}.",
    "A portrait of a {}.",
    "A portrait of the {}.",
    "A portrait of one {}.",
    "A video footage of a {}.",
    "A video footage of the {}.",
    "A video footage of one {}.",
];

/// Lowercase words with everything but ASCII letters and digits removed.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(char::is_ascii_alphanumeric)
                .map(|c| c.to_ascii_lowercase())
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Fixed word-level vocabulary: `[PAD]`, `[CLS]`, `[UNK]`, then the caption
/// grammar and template words in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    max_len: usize,
}

impl Vocab {
    pub fn standard(max_len: usize) -> Self {
        let mut set: BTreeSet<String> = grammar_words().into_iter().map(str::to_owned).collect();
        for t in TEMPLATES {
            set.extend(normalize_words(&t.replace("{}", "")));
        }
        let mut words = vec!["[PAD]".to_owned(), "[CLS]".to_owned(), "[UNK]".to_owned()];
        words.extend(set);
        Self { words, max_len }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> usize {
        self.words[3..]
            .binary_search_by(|w| w.as_str().cmp(word))
            .map(|i| i + 3)
            .unwrap_or(UNK)
    }

    /// `[CLS]` followed by word ids, padded or truncated to `max_len`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![CLS];
        ids.extend(normalize_words(text).iter().map(|w| self.id(w)));
        ids.resize(self.max_len, PAD);
        ids
    }
}

/// Number of ids before the first `[PAD]`.
pub fn real_len(ids: &[usize]) -> usize {
    ids.iter().position(|&i| i == PAD).unwrap_or(ids.len())
}

/// The first `k` noun phrases of a caption, repeating the last when the
/// caption has fewer.
pub fn extract_nouns(item: &CaptionedVideo, k: usize) -> Result<Vec<String>> {
    let nouns = item.nouns();
    if k == 0 {
        return Ok(Vec::new());
    }
    let last = nouns
        .last()
        .ok_or_else(|| Error::arg(format!("caption {:?} has no noun phrases", item.caption)))?;
    Ok((0..k)
        .map(|i| nouns.get(i).unwrap_or(last).to_string())
        .collect())
}

pub fn prompt_noun<R: Rng + ?Sized>(noun: &str, rng: &mut R) -> String {
    fill_template(rng.gen_range(0..TEMPLATES.len()), noun)
}

pub fn fill_template(index: usize, noun: &str) -> String {
    TEMPLATES[index].replace("{}", noun)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn short_caption_is_padded() {
        let v = Vocab::standard(32);
        let ids = v.tokenize("a red circle");
        assert_eq!(ids.len(), 32);
        assert_eq!(&ids[..4], &[CLS, v.id("a"), v.id("red"), v.id("circle")]);
        assert!(ids[4..].iter().all(|&i| i == PAD));
        assert_eq!(real_len(&ids), 4);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::standard(32);
        let ids = v.tokenize("a purple circle");
        assert_eq!(ids[2], UNK);
        assert_ne!(ids[3], UNK);
    }

    #[test]
    fn empty_caption() {
        let v = Vocab::standard(32);
        let ids = v.tokenize("");
        assert_eq!(ids[0], CLS);
        assert!(ids[1..].iter().all(|&i| i == PAD));
    }

    #[test]
    fn long_caption_is_truncated() {
        let v = Vocab::standard(8);
        let ids = v.tokenize(&"red ".repeat(20));
        assert_eq!(ids.len(), 8);
        assert_eq!(real_len(&ids), 8);
    }

    #[test]
    fn prompts_are_in_vocabulary() {
        let v = Vocab::standard(32);
        for i in 0..TEMPLATES.len() {
            let ids = v.tokenize(&fill_template(i, "red circle"));
            assert!(!ids.contains(&UNK), "{}", TEMPLATES[i]);
        }
        assert_eq!(fill_template(3, "red circle"), "A video of a red circle.");
    }

    #[test]
    fn template_choice_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000usize;
        let mut counts = [0usize; 12];
        for _ in 0..n {
            let p = prompt_noun("x", &mut rng);
            let i = (0..12).find(|&i| fill_template(i, "x") == p).unwrap();
            counts[i] += 1;
        }
        let p = 1.0 / 12.0;
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 5.0 * sd, "{counts:?}");
        }
        let a = prompt_noun("x", &mut ChaCha8Rng::seed_from_u64(1));
        let b = prompt_noun("x", &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }
}

//! Text for desk-scale training runs.
//!
//! The bundled seed is a few public-domain documents (about 18 KB). The smoke
//! corpus is the seed followed by text sampled from an order-2 word Markov
//! chain fitted on it, grown to [`SMOKE_CORPUS_BYTES`]. Set
//! [`SMOKE_CORPUS_ENV`] to a file path to train on real text instead.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const SMOKE_CORPUS_ENV: &str = "SFFN_SMOKE_CORPUS";
pub const SMOKE_CORPUS_BYTES: usize = 1 << 20;
pub const SMOKE_CORPUS_SEED: u64 = 1859;

const SEED_TEXT: &str = include_str!("../data/seed.txt");
const PARAGRAPH: &str = "\n\n";

/// The bundled public-domain seed text.
pub fn seed_text() -> &'static str {
    SEED_TEXT
}

fn words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for (i, para) in text.split(PARAGRAPH).filter(|p| !p.trim().is_empty()).enumerate() {
        if i > 0 {
            out.push(PARAGRAPH);
        }
        out.extend(para.split_whitespace());
    }
    out
}

/// `text` followed by Markov-sampled continuation until the result holds at
/// least `target_bytes` bytes. Same inputs, same output.
pub fn expand_markov(text: &str, target_bytes: usize, seed: u64) -> Result<String> {
    let w = words(text);
    if w.len() < 3 {
        return Err(Error::Corpus("seed text needs at least three words".into()));
    }
    let mut next: HashMap<(&str, &str), Vec<&str>> = HashMap::new();
    for t in w.windows(3) {
        next.entry((t[0], t[1])).or_default().push(t[2]);
    }
    // restart points after a dead end: the first two words of each paragraph
    let starts: Vec<(&str, &str)> = std::iter::once((w[0], w[1]))
        .chain(w.windows(3).filter(|t| t[0] == PARAGRAPH).map(|t| (t[1], t[2])))
        .filter(|&(a, b)| a != PARAGRAPH && b != PARAGRAPH)
        .collect();
    let mut rng = RngStream::new(seed, "smoke-corpus", 0);
    let mut out = String::with_capacity(target_bytes + 64);
    out.push_str(text.trim_end());
    let mut state = starts[0];
    out.push_str(PARAGRAPH);
    out.push_str(state.0);
    out.push(' ');
    out.push_str(state.1);
    while out.len() < target_bytes {
        let word = match next.get(&state) {
            Some(choices) => choices[rng.below(choices.len())],
            None => {
                let s = starts[rng.below(starts.len())];
                out.push_str(PARAGRAPH);
                out.push_str(s.0);
                out.push(' ');
                out.push_str(s.1);
                state = s;
                continue;
            }
        };
        if word == PARAGRAPH {
            out.push_str(PARAGRAPH);
        } else {
            if !out.ends_with('\n') {
                out.push(' ');
            }
            out.push_str(word);
        }
        state = (state.1, word);
    }
    out.push('\n');
    Ok(out)
}

/// Reads a corpus file; an empty file is an error.
pub fn load_corpus(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(Error::Corpus(format!("{} is empty", path.display())));
    }
    Ok(bytes)
}

/// The file named by [`SMOKE_CORPUS_ENV`] if set, else the expanded seed.
pub fn smoke_corpus() -> Result<Vec<u8>> {
    match std::env::var_os(SMOKE_CORPUS_ENV) {
        Some(p) => load_corpus(Path::new(&p)),
        None => Ok(expand_markov(SEED_TEXT, SMOKE_CORPUS_BYTES, SMOKE_CORPUS_SEED)?.into_bytes()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_is_deterministic_and_sized() {
        let a = expand_markov(SEED_TEXT, 100_000, 1).unwrap();
        let b = expand_markov(SEED_TEXT, 100_000, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.len() >= 100_000 && a.len() < 100_200);
        assert!(a.starts_with("When in the Course"));
        assert_ne!(a, expand_markov(SEED_TEXT, 100_000, 2).unwrap());
    }

    #[test]
    fn continuation_only_uses_seen_trigrams() {
        let text = "a b c a b d\n\nb c e";
        let out = expand_markov(text, 400, 3).unwrap();
        let gen = &out[text.len()..];
        let w: Vec<&str> = gen.split_whitespace().collect();
        let seen = words(text);
        let trigrams: Vec<_> = seen.windows(3).map(|t| t.to_vec()).collect();
        let mut hits = 0;
        for t in w.windows(3) {
            if trigrams.iter().any(|s| s == t) {
                hits += 1;
            }
        }
        assert!(hits > 0);
        for word in w {
            assert!(seen.contains(&word), "{word}");
        }
    }

    #[test]
    fn seed_is_ascii_text() {
        assert!(SEED_TEXT.is_ascii());
        assert!(SEED_TEXT.len() > 10_000);
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_corpus(Path::new("/nonexistent/corpus.txt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/corpus.txt"));
    }
}

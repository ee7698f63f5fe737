//! Dictionary, greedy sub-word tokenizer, embedding matrix and registration of
//! segmentation categories as single (possibly merged) words.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::trunc_normal;
use crate::scalar::Scalar;

/// Task description that opens every prompt; category names follow, comma separated.
pub const PROMPT_PREFIX: &str = "what is the segmentation map of the image? object: ";

/// Entry 0 of every vocabulary. Emitted for characters with no entry; never matched
/// from text.
pub const UNK: &str = "<unk>";

/// Category names used when a run configures only a count.
pub const DEFAULT_CATEGORIES: &[&str] = &[
    "giraffe", "grass", "sky", "tree", "water", "road", "building", "person", "car", "dog", "cat", "bird", "mountain",
    "sand", "snow", "wall",
];

/// Built-in lexicon. Leading-space entries act as word-initial pieces. "giraffe" and
/// "mountain" are left out on purpose so they split into sub-words.
pub const DEFAULT_LEXICON: &[&str] = &[
    "what",
    " is",
    " the",
    " segmentation",
    " map",
    " of",
    " image",
    " object",
    "is",
    "the",
    "segmentation",
    "map",
    "of",
    "image",
    "object",
    "gir",
    " gir",
    "affe",
    "moun",
    "tain",
    "grass",
    " grass",
    "sky",
    " sky",
    "tree",
    " tree",
    "water",
    " water",
    "road",
    " road",
    "building",
    " building",
    "person",
    " person",
    "car",
    " car",
    "dog",
    " dog",
    "cat",
    " cat",
    "bird",
    " bird",
    "sand",
    " sand",
    "snow",
    " snow",
    "wall",
    " wall",
];

/// Lowercase, collapse whitespace runs to one space, trim.
pub fn normalize(text: &str) -> String {
    let lower = text.to_lowercase();
    lower.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn atoms() -> impl Iterator<Item = char> {
    ('a'..='z')
        .chain('0'..='9')
        .chain(std::iter::once(' '))
        .chain((0x21u8..=0x7e).map(char::from).filter(|c| c.is_ascii_punctuation()))
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    entries: Vec<String>,
    index: HashMap<String, u32>,
    max_chars: usize,
}

impl Vocabulary {
    /// Builds `[<unk>, atoms..., lexicon...]`. Lexicon words that are atoms are
    /// skipped; any other repeat is an error.
    pub fn new<S: AsRef<str>>(lexicon: &[S]) -> Result<Self> {
        let mut vocab = Vocabulary {
            entries: vec![UNK.to_string()],
            index: HashMap::new(),
            max_chars: 1,
        };
        for c in atoms() {
            vocab.push(c.to_string());
        }
        for word in lexicon {
            let word = word.as_ref();
            if word.is_empty() {
                return Err(Error::invalid("empty vocabulary entry"));
            }
            if word
                .chars()
                .any(|c| c.is_uppercase() || (c.is_whitespace() && c != ' '))
            {
                return Err(Error::invalid(format!("vocabulary entry {word:?} is not normalized")));
            }
            if vocab.index.contains_key(word) {
                if word.chars().count() == 1 {
                    continue;
                }
                return Err(Error::invalid(format!("duplicate vocabulary entry {word:?}")));
            }
            vocab.push(word.to_string());
        }
        Ok(vocab)
    }

    pub fn builtin() -> Self {
        Self::new(DEFAULT_LEXICON).expect("built-in lexicon is valid")
    }

    /// Parses a vocabulary file: one entry per line, `#` lines and blank lines
    /// skipped. Leading spaces are significant.
    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<&str> = text
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Self::new(&words)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn push(&mut self, word: String) {
        self.max_chars = self.max_chars.max(word.chars().count());
        self.index.insert(word.clone(), self.entries.len() as u32);
        self.entries.push(word);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn surface(&self, id: u32) -> &str {
        &self.entries[id as usize]
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    /// Greedy longest-match tokenization of the normalized text. Characters with
    /// no entry map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let chars: Vec<char> = normalize(text).chars().collect();
        let mut ids = Vec::new();
        let mut pos = 0;
        let mut buf = String::new();
        while pos < chars.len() {
            let longest = self.max_chars.min(chars.len() - pos);
            let hit = (1..=longest).rev().find_map(|len| {
                buf.clear();
                buf.extend(&chars[pos..pos + len]);
                self.index.get(buf.as_str()).map(|&id| (id, len))
            });
            match hit {
                Some((id, len)) => {
                    ids.push(id);
                    pos += len;
                }
                None => {
                    ids.push(0);
                    pos += 1;
                }
            }
        }
        ids
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.surface(id)).collect()
    }
}

/// Shared input/output word embedding. Rows past `base_count` are merged
/// category rows appended by [`register_categories`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix<T> {
    pub rows: Array2<T>,
    pub base_count: usize,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    pub fn new(rows: Array2<T>) -> Self {
        let base_count = rows.nrows();
        EmbeddingMatrix { rows, base_count }
    }

    /// Rows drawn from Normal(0, std²) truncated at ±2σ.
    pub fn init<R: Rng + ?Sized>(n: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let rows = Array2::from_shape_simple_fn((n, dim), || T::lit(trunc_normal(rng, std)));
        Self::new(rows)
    }

    pub fn zeros_like(&self) -> Self {
        EmbeddingMatrix {
            rows: Array2::zeros(self.rows.raw_dim()),
            base_count: self.base_count,
        }
    }

    pub fn total(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, id: u32) -> ArrayView1<'_, T> {
        self.rows.row(id as usize)
    }

    /// Gathers rows for `ids` into an `ids.len() × D` matrix.
    pub fn lookup(&self, ids: &[u32]) -> Result<Array2<T>> {
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.total()) {
            return Err(Error::invalid(format!(
                "embedding id {bad} out of range for {} rows",
                self.total()
            )));
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(self.rows.select(Axis(0), &idx))
    }

    fn append(&mut self, row: Array1<T>) -> u32 {
        let id = self.rows.nrows() as u32;
        self.rows.push_row(row.view()).expect("row width matches");
        id
    }
}

/// The M segmentation categories, each addressed by exactly one embedding row.
#[derive(Clone, Debug, PartialEq)]
pub struct SegCategorySet {
    pub names: Vec<String>,
    pub merged_ids: Vec<u32>,
    pub subtoken_ids: Vec<Vec<u32>>,
}

impl SegCategorySet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Restores a category set whose merged rows already live in `embedding`
    /// (e.g. from a checkpoint). Names are tokenized again and merged ids are
    /// assigned in the same order as [`register_categories`] would.
    pub fn reattach<S: AsRef<str>, T: Scalar>(
        names: &[S],
        vocab: &Vocabulary,
        embedding: &EmbeddingMatrix<T>,
    ) -> Result<Self> {
        let mut scratch = EmbeddingMatrix {
            rows: Array2::<T>::zeros((embedding.base_count, embedding.dim())),
            base_count: embedding.base_count,
        };
        let cats = register_categories(names, vocab, &mut scratch)?;
        if scratch.total() != embedding.total() {
            return Err(Error::shape(format!(
                "categories need {} embedding rows, checkpoint has {}",
                scratch.total(),
                embedding.total()
            )));
        }
        Ok(cats)
    }
}

/// Registers category words as single vocabulary entries. A category that
/// tokenizes to several pieces gets one new row, the mean of its pieces' rows.
pub fn register_categories<S: AsRef<str>, T: Scalar>(
    names: &[S],
    vocab: &Vocabulary,
    embedding: &mut EmbeddingMatrix<T>,
) -> Result<SegCategorySet> {
    if names.is_empty() {
        return Err(Error::invalid("no segmentation categories given"));
    }
    if embedding.base_count != vocab.len() {
        return Err(Error::shape(format!(
            "embedding has {} base rows, vocabulary has {} entries",
            embedding.base_count,
            vocab.len()
        )));
    }
    let mut out = SegCategorySet {
        names: Vec::with_capacity(names.len()),
        merged_ids: Vec::with_capacity(names.len()),
        subtoken_ids: Vec::with_capacity(names.len()),
    };
    let mut pending: Vec<Vec<u32>> = Vec::new();
    for raw in names {
        let name = normalize(raw.as_ref());
        if name.is_empty() {
            return Err(Error::invalid(format!("category {:?} is empty", raw.as_ref())));
        }
        if out.names.contains(&name) {
            return Err(Error::invalid(format!("duplicate category {name:?}")));
        }
        let pieces = vocab.tokenize(&name);
        out.names.push(name);
        out.subtoken_ids.push(pieces.clone());
        pending.push(pieces);
    }
    // Validate before touching the matrix so a rejected call leaves it unchanged.
    let singles: Vec<u32> = pending.iter().filter(|p| p.len() == 1).map(|p| p[0]).collect();
    for (i, &a) in singles.iter().enumerate() {
        if singles[..i].contains(&a) {
            return Err(Error::invalid(format!(
                "two categories map to the same token {:?}",
                vocab.surface(a)
            )));
        }
    }
    for pieces in pending {
        let id = if pieces.len() == 1 {
            pieces[0]
        } else {
            let mut sum = Array1::<T>::zeros(embedding.dim());
            for &p in &pieces {
                sum += &embedding.row(p);
            }
            let mean = sum / T::lit(pieces.len() as f64);
            embedding.append(mean)
        };
        out.merged_ids.push(id);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub ids: Vec<u32>,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Task description followed by the category names in registration order.
pub fn build_prompt(categories: &SegCategorySet, vocab: &Vocabulary) -> Result<Prompt> {
    if categories.is_empty() {
        return Err(Error::invalid("prompt needs at least one category"));
    }
    let text = normalize(&format!("{PROMPT_PREFIX}{}", categories.names.join(", ")));
    let ids = vocab.tokenize(&text);
    Ok(Prompt { text, ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;

    /// Reference greedy matcher over a plain word list, used as an oracle.
    fn greedy_oracle(words: &[&str], text: &str) -> Vec<String> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let mut best = 1;
            for w in words {
                let wc: Vec<char> = w.chars().collect();
                if wc.len() > best && chars[i..].starts_with(&wc) {
                    best = wc.len();
                }
            }
            out.push(chars[i..i + best].iter().collect());
            i += best;
        }
        out
    }

    #[test]
    fn direct_hit_and_empty() {
        let v = Vocabulary::builtin();
        assert_eq!(v.tokenize("grass"), vec![v.id("grass").unwrap()]);
        assert!(v.tokenize("").is_empty());
        assert!(v.tokenize("   ").is_empty());
    }

    #[test]
    fn giraffe_splits_greedily() {
        let v = Vocabulary::new(&["gir", "raf"]).unwrap();
        let pieces: Vec<&str> = v.tokenize("giraffe").iter().map(|&i| v.surface(i)).collect();
        let expected = greedy_oracle(&["gir", "raf"], "giraffe");
        assert_eq!(pieces, expected);
        assert_eq!(pieces, vec!["gir", "a", "f", "f", "e"]);
    }

    #[test]
    fn longest_match_wins() {
        let v = Vocabulary::new(&["gi", "gir", "giraf"]).unwrap();
        let pieces: Vec<&str> = v.tokenize("giraffe").iter().map(|&i| v.surface(i)).collect();
        assert_eq!(pieces, vec!["giraf", "f", "e"]);
    }

    #[test]
    fn normalization_and_unknowns() {
        let v = Vocabulary::builtin();
        assert_eq!(normalize("  What\tIS \n the  "), "what is the");
        assert_eq!(v.detokenize(&v.tokenize("Grass  and SKY")), "grass and sky");
        assert_eq!(v.tokenize("é"), vec![0]);
    }

    #[test]
    fn atoms_are_present() {
        let v = Vocabulary::new::<&str>(&[]).unwrap();
        assert!(v.len() >= 40);
        for c in ('a'..='z').chain('0'..='9').chain(",.:?!".chars()) {
            assert!(v.id(&c.to_string()).is_some(), "missing atom {c}");
        }
    }

    #[test]
    fn vocabulary_file_parsing() {
        let v = Vocabulary::parse("# comment\ngrass\n\n grass\nsky\r\n").unwrap();
        assert!(v.id("grass").is_some());
        assert!(v.id(" grass").is_some());
        assert!(v.id("sky").is_some());
        assert!(v.id("# comment").is_none());
        assert!(Vocabulary::parse("grass\ngrass\n").is_err());
        assert!(Vocabulary::parse("Grass\n").is_err());
    }

    #[test]
    fn register_single_and_merged() {
        let v = Vocabulary::builtin();
        let mut rng = seed_rng(3);
        let mut e = EmbeddingMatrix::<f64>::init(v.len(), 6, 0.02, &mut rng);
        let before = e.clone();
        let cats = register_categories(&["grass"], &v, &mut e).unwrap();
        assert_eq!(cats.merged_ids, vec![v.id("grass").unwrap()]);
        assert_eq!(e, before);

        let cats = register_categories(&["giraffe", "sky"], &v, &mut e).unwrap();
        assert_eq!(e.total(), v.len() + 1);
        let gir = v.id("gir").unwrap();
        let affe = v.id("affe").unwrap();
        assert_eq!(cats.subtoken_ids[0], vec![gir, affe]);
        let merged = e.row(cats.merged_ids[0]).to_owned();
        let expected = (&e.row(gir) + &e.row(affe)) / 2.0;
        for (a, b) in merged.iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn register_rejections() {
        let v = Vocabulary::builtin();
        let mut e = EmbeddingMatrix::<f32>::init(v.len(), 4, 0.02, &mut seed_rng(0));
        assert!(register_categories(&["cat", "cat"], &v, &mut e).is_err());
        assert!(register_categories(&["Cat", "cat "], &v, &mut e).is_err());
        assert!(register_categories(&["  "], &v, &mut e).is_err());
        assert!(register_categories::<&str, f32>(&[], &v, &mut e).is_err());
        assert_eq!(e.total(), v.len());
    }

    #[test]
    fn registration_is_reproducible() {
        let v = Vocabulary::builtin();
        let base = EmbeddingMatrix::<f32>::init(v.len(), 8, 0.02, &mut seed_rng(11));
        let names = ["giraffe", "mountain", "sky"];
        let mut a = base.clone();
        let mut b = base.clone();
        let ca = register_categories(&names, &v, &mut a).unwrap();
        let cb = register_categories(&names, &v, &mut b).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.rows, b.rows);
        let re = SegCategorySet::reattach(&names, &v, &a).unwrap();
        assert_eq!(re, ca);
    }

    #[test]
    fn prompt_text() {
        let v = Vocabulary::builtin();
        let mut e = EmbeddingMatrix::<f32>::init(v.len(), 4, 0.02, &mut seed_rng(0));
        let cats = register_categories(&["giraffe", "grass"], &v, &mut e).unwrap();
        let p = build_prompt(&cats, &v).unwrap();
        assert_eq!(
            p.text,
            "what is the segmentation map of the image? object: giraffe, grass"
        );
        assert_eq!(v.detokenize(&p.ids), p.text);
        let cats = register_categories(&["cat"], &v, &mut e).unwrap();
        assert!(build_prompt(&cats, &v).unwrap().text.ends_with("object: cat"));
        let empty = SegCategorySet {
            names: vec![],
            merged_ids: vec![],
            subtoken_ids: vec![],
        };
        assert!(build_prompt(&empty, &v).is_err());
    }
}

//! Caption preprocessing, vocabulary construction, dataset loading and
//! batching.
//!
//! Datasets are JSON Lines, one record per line:
//! `{"id": "...", "features": "...", "captions": ["..."], "split": "train"}`.
//! The vocabulary file is plain text, one token per line, where line i
//! (0-based) holds the token with id i + 4; ids 0–3 are reserved.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

const RESERVED_NAMES: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases, maps every character outside [a-z0-9] to a space, splits
/// on whitespace and drops empties. An unusable caption simply comes back
/// empty; callers decide whether to skip the record.
pub fn preprocess_caption(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_lowercase() || c.is_ascii_digit() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

// ── Vocabulary ──────────────────────────────────────────────────────────────

/// Token/id maps with the four reserved ids. Construction is a pure
/// function of (corpus, min_count): surviving tokens are ordered by
/// descending frequency with lexicographic tie-breaking, so rebuilds are
/// byte-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub min_count: usize,
}

impl Vocabulary {
    pub fn build(corpus: &[Vec<String>], min_count: usize) -> Result<Vocabulary> {
        if corpus.iter().all(|c| c.is_empty()) {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for caption in corpus {
            for token in caption {
                *freq.entry(token).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> =
            freq.into_iter().filter(|&(_, n)| n >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens: Vec<String> = kept.into_iter().map(|(t, _)| t.to_string()).collect();
        Ok(Self::from_tokens(tokens, min_count))
    }

    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Vocabulary {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + RESERVED))
            .collect();
        Vocabulary { tokens, index, min_count }
    }

    /// Total id count including the reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id for a token, UNK when absent.
    pub fn id_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token_of(&self, id: usize) -> &str {
        if id < RESERVED {
            RESERVED_NAMES[id]
        } else {
            &self.tokens[id - RESERVED]
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Loads a token-per-line file; `min_count` is not persisted and
    /// comes back as 0.
    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(Error::Format(format!("vocabulary file {path:?} is empty")));
        }
        Ok(Self::from_tokens(tokens, 0))
    }
}

/// BOS + token ids (UNK for out-of-vocabulary) + EOS, truncated to
/// `max_len` total while keeping EOS terminal. No padding here.
pub fn encode_tokens(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let body = max_len.saturating_sub(2).min(tokens.len());
    let mut ids = Vec::with_capacity(body + 2);
    ids.push(BOS);
    for t in &tokens[..body] {
        ids.push(vocab.id_of(t));
    }
    ids.push(EOS);
    ids
}

/// Token strings for the generated part of a sequence: BOS, EOS and PAD
/// are dropped, everything after the first EOS is ignored.
pub fn decode_ids(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    let mut out = Vec::new();
    for &id in ids {
        match id {
            BOS | PAD => continue,
            EOS => break,
            other => out.push(vocab.token_of(other).to_string()),
        }
    }
    out
}

// ── Dataset ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One image with its feature reference and reference captions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    /// Cache key, or a `synthetic:<seed>` reference for the toy backbone.
    pub features: String,
    pub captions: Vec<String>,
    pub split: Split,
}

/// Reads a JSONL dataset; malformed lines report their 1-based number.
pub fn load_dataset(path: &Path) -> Result<Vec<CaptionRecord>> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CaptionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if record.captions.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: format!("record {:?} has no captions", record.id) });
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Format(format!("dataset {path:?} contains no records")));
    }
    Ok(records)
}

pub fn save_dataset(records: &[CaptionRecord], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Preprocessed (image, caption) training pair.
#[derive(Debug, Clone)]
pub struct BatchSample {
    pub image_id: String,
    pub feature_ref: String,
    /// BOS…EOS, padded with PAD to the batch-wide length.
    pub tokens: Vec<usize>,
    /// Unpadded length.
    pub len: usize,
}

impl BatchSample {
    /// Decoder input: everything but the final position.
    pub fn input_ids(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Prediction targets: everything but BOS.
    pub fn target_ids(&self) -> &[usize] {
        &self.tokens[1..]
    }

    /// True where the target is a real token (not PAD).
    pub fn target_mask(&self) -> Vec<bool> {
        self.target_ids().iter().map(|&t| t != PAD).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<BatchSample>,
}

/// Expands records into (image, caption) pairs, shuffles them with the
/// seed, chunks into batches and pads each batch to its own longest
/// caption. Records whose caption preprocesses to nothing are skipped
/// with a warning on stderr.
pub fn make_batches(
    records: &[CaptionRecord],
    vocab: &Vocabulary,
    max_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut pairs = Vec::new();
    for r in records {
        for caption in &r.captions {
            let tokens = preprocess_caption(caption);
            if tokens.is_empty() {
                eprintln!("warning: skipping empty caption for record {:?}", r.id);
                continue;
            }
            let ids = encode_tokens(&tokens, vocab, max_len);
            pairs.push(BatchSample {
                image_id: r.id.clone(),
                feature_ref: r.features.clone(),
                len: ids.len(),
                tokens: ids,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::Config("no usable captions in the dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let mut batches = Vec::new();
    for chunk in pairs.chunks(batch_size) {
        let widest = chunk.iter().map(|s| s.len).max().unwrap();
        let samples = chunk
            .iter()
            .map(|s| {
                let mut padded = s.tokens.clone();
                padded.resize(widest, PAD);
                BatchSample { tokens: padded, ..s.clone() }
            })
            .collect();
        batches.push(Batch { samples });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn preprocess_strips_case_and_punctuation() {
        assert_eq!(preprocess_caption("A Man, running!"), toks(&["a", "man", "running"]));
    }

    #[test]
    fn preprocess_degenerate_caption_is_empty() {
        assert!(preprocess_caption("...").is_empty());
        assert!(preprocess_caption("").is_empty());
    }

    #[test]
    fn preprocess_splits_on_punctuation_boundaries() {
        assert_eq!(preprocess_caption("Dog's 2 dogs"), toks(&["dog", "s", "2", "dogs"]));
    }

    #[test]
    fn vocab_threshold_boundary_maps_to_unk() {
        let corpus: Vec<Vec<String>> = vec![
            toks(&["rare", "common"]),
            toks(&["rare", "common"]),
            toks(&["rare", "common"]),
            toks(&["rare", "common"]),
            toks(&["common"]),
        ];
        let v = Vocabulary::build(&corpus, 5).unwrap();
        assert!(v.contains("common"));
        assert!(!v.contains("rare"), "4 occurrences is below min_count 5");
        assert_eq!(v.id_of("rare"), UNK);
    }

    #[test]
    fn vocab_min_count_one_keeps_every_distinct_token() {
        let corpus = vec![toks(&["a", "b"]), toks(&["c"])];
        let v = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v.len(), 3 + RESERVED);
    }

    #[test]
    fn vocab_ties_break_lexicographically() {
        let corpus = vec![toks(&["zebra", "apple", "mango"])];
        let v = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v.id_of("apple"), RESERVED);
        assert_eq!(v.id_of("mango"), RESERVED + 1);
        assert_eq!(v.id_of("zebra"), RESERVED + 2);
        // Rebuilding gives the identical mapping.
        let v2 = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v, v2);
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        assert!(Vocabulary::build(&[], 1).is_err());
        assert!(Vocabulary::build(&[vec![]], 1).is_err());
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let corpus = vec![toks(&["sun", "moon", "sun"])];
        let v = Vocabulary::build(&corpus, 1).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.id_of("sun"), v.id_of("sun"));
        assert_eq!(loaded.id_of("moon"), v.id_of("moon"));
        // Line number = id − 4.
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(v.id_of(first), RESERVED);
    }

    #[test]
    fn encode_handles_oov_truncation_and_roundtrips() {
        let corpus = vec![toks(&["red", "box", "blue"])];
        let v = Vocabulary::build(&corpus, 1).unwrap();

        let ids = encode_tokens(&toks(&["red", "mystery", "box"]), &v, 10);
        assert_eq!(ids[0], BOS);
        assert_eq!(ids[2], UNK);
        assert_eq!(*ids.last().unwrap(), EOS);

        let ids = encode_tokens(&toks(&["red", "box", "blue", "red"]), &v, 4);
        assert_eq!(ids.len(), 4);
        assert_eq!(ids, vec![BOS, v.id_of("red"), v.id_of("box"), EOS]);

        let words = toks(&["blue", "box"]);
        let ids = encode_tokens(&words, &v, 10);
        assert_eq!(decode_ids(&ids, &v), words);
    }

    #[test]
    fn dataset_parse_error_carries_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"features\":\"a\",\"captions\":[\"ok\"],\"split\":\"train\"}\nnot json\n",
        )
        .unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_rejects_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn dataset_roundtrip_and_caption_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let records = vec![CaptionRecord {
            id: "img0".into(),
            features: "img0".into(),
            captions: vec!["a red box".into()],
            split: Split::Train,
        }];
        save_dataset(&records, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].id, "img0");

        std::fs::write(
            &path,
            "{\"id\":\"a\",\"features\":\"a\",\"captions\":[],\"split\":\"train\"}\n",
        )
        .unwrap();
        assert!(load_dataset(&path).is_err());
    }

    fn sample_records() -> Vec<CaptionRecord> {
        (0..5)
            .map(|i| CaptionRecord {
                id: format!("img{i}"),
                features: format!("img{i}"),
                captions: vec![format!("a number {i} thing"), "a short one".into()],
                split: Split::Train,
            })
            .collect()
    }

    #[test]
    fn batches_are_deterministic_under_a_seed() {
        let records = sample_records();
        let corpus: Vec<Vec<String>> = records
            .iter()
            .flat_map(|r| r.captions.iter().map(|c| preprocess_caption(c)))
            .collect();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let a = make_batches(&records, &vocab, 12, 3, 99).unwrap();
        let b = make_batches(&records, &vocab, 12, 3, 99).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            for (sx, sy) in x.samples.iter().zip(&y.samples) {
                assert_eq!(sx.image_id, sy.image_id);
                assert_eq!(sx.tokens, sy.tokens);
            }
        }
        let c = make_batches(&records, &vocab, 12, 3, 100).unwrap();
        let same = a
            .iter()
            .zip(&c)
            .all(|(x, y)| {
                x.samples.iter().zip(&y.samples).all(|(sx, sy)| sx.image_id == sy.image_id)
            });
        assert!(!same, "different seeds should reorder the pairs");
    }

    #[test]
    fn padding_mask_excludes_exactly_pad_positions() {
        let records = sample_records();
        let corpus: Vec<Vec<String>> = records
            .iter()
            .flat_map(|r| r.captions.iter().map(|c| preprocess_caption(c)))
            .collect();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let batches = make_batches(&records, &vocab, 12, 4, 7).unwrap();
        for batch in &batches {
            let widest = batch.samples.iter().map(|s| s.tokens.len()).max().unwrap();
            for s in &batch.samples {
                assert_eq!(s.tokens.len(), widest);
                let mask = s.target_mask();
                // Recompute the mask independently from the raw lengths.
                for (i, &target) in s.target_ids().iter().enumerate() {
                    let expected = i + 1 < s.len;
                    assert_eq!(mask[i], expected, "position {i}");
                    assert_eq!(target == PAD, !expected);
                }
            }
        }
    }
}

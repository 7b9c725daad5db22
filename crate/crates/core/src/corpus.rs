//! Interaction logs: loading, k-core filtering, leave-one-out splits and
//! padded batches.
//!
//! The on-disk format is one user per line: `user_id item_1 item_2 ...`,
//! whitespace separated, items in chronological order. Item tokens are
//! mapped to dense ids `1..=|I|` in first-seen order; id 0 is padding and
//! `|I| + 1` is the mask token used by augmentation.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type ItemId = u32;

pub const PAD_ID: ItemId = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemVocab {
    /// Raw token for each real item; `tokens[i - 1]` belongs to id `i`.
    tokens: Vec<String>,
}

impl ItemVocab {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        Self { tokens }
    }

    /// Vocabulary of `size` anonymous items named `"1"..="size"`.
    pub fn with_size(size: usize) -> Self {
        Self {
            tokens: (1..=size).map(|i| i.to_string()).collect(),
        }
    }

    /// Number of real items, |I|.
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn pad_id(&self) -> ItemId {
        PAD_ID
    }

    pub fn mask_id(&self) -> ItemId {
        self.tokens.len() as ItemId + 1
    }

    /// Rows in the item-embedding table: real items plus pad and mask.
    pub fn num_embeddings(&self) -> usize {
        self.tokens.len() + 2
    }

    pub fn is_real(&self, id: ItemId) -> bool {
        id >= 1 && (id as usize) <= self.tokens.len()
    }

    pub fn token(&self, id: ItemId) -> Option<&str> {
        if self.is_real(id) {
            Some(&self.tokens[id as usize - 1])
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user: String,
    pub items: Vec<ItemId>,
}

impl InteractionSequence {
    pub fn new(user: impl Into<String>, items: Vec<ItemId>) -> Self {
        Self {
            user: user.into(),
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub avg_length: f64,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<InteractionSequence>,
    pub vocab: ItemVocab,
}

impl Corpus {
    pub fn stats(&self) -> CorpusStats {
        stats_of(&self.sequences, self.vocab.size())
    }
}

pub fn stats_of(sequences: &[InteractionSequence], items: usize) -> CorpusStats {
    let users = sequences.len();
    let actions: usize = sequences.iter().map(InteractionSequence::len).sum();
    let avg_length = if users == 0 {
        0.0
    } else {
        actions as f64 / users as f64
    };
    let cells = (users * items) as f64;
    let sparsity = if cells == 0.0 {
        1.0
    } else {
        1.0 - actions as f64 / cells
    };
    CorpusStats {
        users,
        items,
        actions,
        avg_length,
        sparsity,
    }
}

/// Reads a corpus file and applies iterated `min_interactions`-core
/// filtering to users and items.
pub fn load_corpus(path: impl AsRef<Path>, min_interactions: usize) -> Result<Corpus> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(std::io::BufReader::new(file), path, min_interactions)
}

pub fn parse_corpus(reader: impl BufRead, origin: &Path, min_interactions: usize) -> Result<Corpus> {
    let mut raw: Vec<(String, Vec<String>)> = Vec::new();
    let mut seen_users = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        let mut tokens = line.split_whitespace();
        let Some(user) = tokens.next() else { continue };
        let items: Vec<String> = tokens.map(str::to_owned).collect();
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno + 1,
            message,
        };
        if items.is_empty() {
            return Err(parse_err(format!("user `{user}` has no items")));
        }
        if !seen_users.insert(user.to_owned()) {
            return Err(parse_err(format!("duplicate user `{user}`")));
        }
        raw.push((user.to_owned(), items));
    }

    let raw = core_filter(raw, min_interactions);
    if raw.is_empty() {
        return Err(Error::EmptyCorpus { min_interactions });
    }

    let mut ids: HashMap<String, ItemId> = HashMap::new();
    let mut tokens = Vec::new();
    let sequences = raw
        .into_iter()
        .map(|(user, items)| {
            let items = items
                .into_iter()
                .map(|tok| {
                    *ids.entry(tok).or_insert_with_key(|tok| {
                        tokens.push(tok.clone());
                        tokens.len() as ItemId
                    })
                })
                .collect();
            InteractionSequence { user, items }
        })
        .collect();
    Ok(Corpus {
        sequences,
        vocab: ItemVocab::from_tokens(tokens),
    })
}

/// Drops items and users with fewer than `k` interactions until nothing
/// changes.
fn core_filter(mut raw: Vec<(String, Vec<String>)>, k: usize) -> Vec<(String, Vec<String>)> {
    loop {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for (_, items) in &raw {
            for it in items {
                *counts.entry(it.as_str()).or_default() += 1;
            }
        }
        let rare: HashSet<String> = counts
            .into_iter()
            .filter(|&(_, c)| c < k)
            .map(|(it, _)| it.to_owned())
            .collect();
        let before: usize = raw.iter().map(|(_, s)| s.len()).sum::<usize>() + raw.len();
        for (_, items) in &mut raw {
            items.retain(|it| !rare.contains(it));
        }
        raw.retain(|(_, items)| items.len() >= k.max(1));
        let after: usize = raw.iter().map(|(_, s)| s.len()).sum::<usize>() + raw.len();
        if after == before {
            return raw;
        }
    }
}

/// Writes sequences back in the corpus file format using vocabulary tokens.
pub fn write_corpus(
    mut out: impl std::io::Write,
    sequences: &[InteractionSequence],
    vocab: &ItemVocab,
) -> std::io::Result<()> {
    for s in sequences {
        write!(out, "{}", s.user)?;
        for &id in &s.items {
            write!(out, " {}", vocab.token(id).unwrap_or("?"))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// An input prefix and the item that follows it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    /// Index of the user in the source sequence list.
    pub user: usize,
    pub input: Vec<ItemId>,
    pub target: ItemId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    /// Each user's sequence minus the last two items.
    pub train: Vec<InteractionSequence>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Valid,
    Test,
}

impl DatasetSplit {
    pub fn part(&self, part: SplitPart) -> &[Example] {
        match part {
            SplitPart::Valid => &self.valid,
            SplitPart::Test => &self.test,
        }
    }

    /// Next-item training rows from the training sequences. With
    /// `expand_prefixes`, every prefix `t[..k]` predicts `t[k]`; otherwise
    /// only the final item of each training sequence is a target.
    pub fn train_examples(&self, expand_prefixes: bool) -> Vec<Example> {
        let mut out = Vec::new();
        for (user, seq) in self.train.iter().enumerate() {
            let len = seq.items.len();
            let first = if expand_prefixes { 1 } else { len.max(1) - 1 };
            for k in first.max(1)..len {
                out.push(Example {
                    user,
                    input: seq.items[..k].to_vec(),
                    target: seq.items[k],
                });
            }
        }
        out
    }
}

/// Leave-one-out: last item tests, second-to-last validates, the rest trains.
pub fn split_leave_one_out(seqs: &[InteractionSequence]) -> Result<DatasetSplit> {
    let mut split = DatasetSplit {
        train: Vec::with_capacity(seqs.len()),
        valid: Vec::with_capacity(seqs.len()),
        test: Vec::with_capacity(seqs.len()),
    };
    for (user, s) in seqs.iter().enumerate() {
        let len = s.items.len();
        if len < 3 {
            return Err(Error::SequenceTooShort {
                user: s.user.clone(),
                len,
            });
        }
        split.train.push(InteractionSequence {
            user: s.user.clone(),
            items: s.items[..len - 2].to_vec(),
        });
        split.valid.push(Example {
            user,
            input: s.items[..len - 2].to_vec(),
            target: s.items[len - 2],
        });
        split.test.push(Example {
            user,
            input: s.items[..len - 1].to_vec(),
            target: s.items[len - 1],
        });
    }
    Ok(split)
}

/// Left-padded id matrix with true lengths and next-item targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    /// Row-major `[batch × n]`.
    pub ids: Vec<ItemId>,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
    pub targets: Vec<ItemId>,
    /// Source user index per row.
    pub users: Vec<usize>,
}

impl SequenceBatch {
    /// Builds a batch keeping the most recent `n` items of each row.
    pub fn from_rows<'a>(
        rows: impl IntoIterator<Item = (&'a [ItemId], ItemId, usize)>,
        n: usize,
    ) -> Self {
        let mut batch = SequenceBatch {
            ids: Vec::new(),
            seq_len: n,
            lengths: Vec::new(),
            targets: Vec::new(),
            users: Vec::new(),
        };
        for (items, target, user) in rows {
            batch.push_row(items, target, user);
        }
        batch
    }

    pub fn push_row(&mut self, items: &[ItemId], target: ItemId, user: usize) {
        let n = self.seq_len;
        let kept = &items[items.len().saturating_sub(n)..];
        self.ids
            .extend(std::iter::repeat_n(PAD_ID, n - kept.len()));
        self.ids.extend_from_slice(kept);
        self.lengths.push(kept.len());
        self.targets.push(target);
        self.users.push(user);
    }

    pub fn from_examples(examples: &[&Example], n: usize) -> Self {
        Self::from_rows(
            examples
                .iter()
                .map(|e| (e.input.as_slice(), e.target, e.user)),
            n,
        )
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn row(&self, b: usize) -> &[ItemId] {
        &self.ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// The non-pad suffix of row `b`.
    pub fn items(&self, b: usize) -> &[ItemId] {
        let row = self.row(b);
        &row[self.seq_len - self.lengths[b]..]
    }
}

/// Splits examples into batches of `batch_size`. With a seed the order is
/// a seeded shuffle; without one it is the input order. The final partial
/// batch is kept.
pub fn make_batches(
    examples: &[Example],
    batch_size: usize,
    n: usize,
    shuffle_seed: Option<u64>,
) -> impl Iterator<Item = SequenceBatch> + '_ {
    assert!(batch_size >= 1 && n >= 1, "batch_size and n must be positive");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng::stream(seed, &[rng::tag::SHUFFLE]));
    }
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |chunk| {
        let rows: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
        SequenceBatch::from_examples(&rows, n)
    })
}

/// Inclusive length range with an optional upper bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LengthRange {
    pub min: usize,
    pub max: Option<usize>,
}

impl LengthRange {
    pub fn exactly(len: usize) -> Self {
        Self {
            min: len,
            max: Some(len),
        }
    }

    pub fn between(min: usize, max: usize) -> Self {
        Self {
            min,
            max: Some(max),
        }
    }

    pub fn above(len: usize) -> Self {
        Self {
            min: len + 1,
            max: None,
        }
    }

    pub fn contains(&self, len: usize) -> bool {
        len >= self.min && self.max.is_none_or(|m| len <= m)
    }

    fn overlaps(&self, other: &LengthRange) -> bool {
        let hi = |r: &LengthRange| r.max.unwrap_or(usize::MAX);
        self.min <= hi(other) && other.min <= hi(self)
    }
}

impl fmt::Display for LengthRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.max {
            Some(m) if m == self.min => write!(f, "={m}"),
            Some(m) => write!(f, "{}-{m}", self.min),
            None => write!(f, ">{}", self.min - 1),
        }
    }
}

impl FromStr for LengthRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad length range `{s}` (use =5, 6-8 or >8)"));
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let s = s.trim();
        if let Some(rest) = s.strip_prefix('=') {
            Ok(Self::exactly(num(rest)?))
        } else if let Some(rest) = s.strip_prefix('>') {
            Ok(Self::above(num(rest)?))
        } else if let Some((lo, hi)) = s.split_once('-') {
            let (lo, hi) = (num(lo)?, num(hi)?);
            if lo > hi {
                return Err(bad());
            }
            Ok(Self::between(lo, hi))
        } else {
            Ok(Self::exactly(num(s)?))
        }
    }
}

/// Partitions sequences by length. Groups are returned in `bounds` order.
pub fn group_by_length(
    seqs: &[InteractionSequence],
    bounds: &[LengthRange],
) -> Result<Vec<(LengthRange, Vec<InteractionSequence>)>> {
    for (i, a) in bounds.iter().enumerate() {
        if let Some(b) = bounds[i + 1..].iter().find(|b| a.overlaps(b)) {
            return Err(Error::Config(format!("length ranges {a} and {b} overlap")));
        }
    }
    let mut groups: Vec<(LengthRange, Vec<InteractionSequence>)> =
        bounds.iter().map(|&r| (r, Vec::new())).collect();
    for s in seqs {
        let slot = groups
            .iter_mut()
            .find(|(r, _)| r.contains(s.len()))
            .ok_or(Error::UncoveredLength(s.len()))?;
        slot.1.push(s.clone());
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(text: &str, k: usize) -> Result<Corpus> {
        parse_corpus(Cursor::new(text), Path::new("mem"), k)
    }

    #[test]
    fn three_users_sharing_six_items_survive_five_core() {
        // Each user sees every item twice: users have 12 actions, items 6.
        let line = "a b c d e f a b c d e f";
        let text = format!("u1 {line}\nu2 {line}\nu3 {line}\n");
        let c = parse(&text, 5).unwrap();
        assert_eq!(c.sequences.len(), 3);
        assert_eq!(c.vocab.size(), 6);
        assert_eq!(c.vocab.mask_id(), 7);
        assert_eq!(c.sequences[0].items[..6], [1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn short_user_empties_the_corpus() {
        let err = parse("u1 a b c d\n", 5).unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus { min_interactions: 5 }));
    }

    #[test]
    fn filtering_cascades_to_a_fixpoint() {
        // Dropping `z` pushes u3 under the threshold, which leaves `y` rare,
        // which in turn pushes u4 under the threshold.
        let text = "u1 a a b b\nu2 a b a b\nu3 y z y\nu4 a b y\n";
        let c = parse(text, 3).unwrap();
        let users: Vec<_> = c.sequences.iter().map(|s| s.user.as_str()).collect();
        assert_eq!(users, ["u1", "u2"]);
        assert_eq!(c.vocab.size(), 2);

        // Re-filtering the output is a no-op.
        let mut buf = Vec::new();
        write_corpus(&mut buf, &c.sequences, &c.vocab).unwrap();
        let again = parse(std::str::from_utf8(&buf).unwrap(), 3).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn malformed_lines_name_their_line_number() {
        let err = parse("u1 a b\n\nu2\n", 1).unwrap_err();
        assert!(err.to_string().contains("mem:3"), "{err}");
        let err = parse("u1 a b\nu1 c\n", 1).unwrap_err();
        assert!(err.to_string().contains("mem:2"), "{err}");
    }

    #[test]
    fn leave_one_out_on_five_items() {
        let s = InteractionSequence::new("u", vec![1, 2, 3, 4, 5]);
        let split = split_leave_one_out(&[s]).unwrap();
        assert_eq!(split.train[0].items, vec![1, 2, 3]);
        assert_eq!(split.valid[0].input, vec![1, 2, 3]);
        assert_eq!(split.valid[0].target, 4);
        assert_eq!(split.test[0].input, vec![1, 2, 3, 4]);
        assert_eq!(split.test[0].target, 5);
    }

    #[test]
    fn leave_one_out_minimal_and_too_short() {
        let split = split_leave_one_out(&[InteractionSequence::new("u", vec![7, 8, 9])]).unwrap();
        assert_eq!(split.train[0].items, vec![7]);
        assert_eq!(split.valid[0].target, 8);
        assert_eq!(split.test[0].target, 9);
        assert!(split.train_examples(true).is_empty());

        let err = split_leave_one_out(&[InteractionSequence::new("shorty", vec![1, 2])]).unwrap_err();
        assert!(err.to_string().contains("shorty"));
    }

    #[test]
    fn train_examples_never_target_held_out_items() {
        let s = InteractionSequence::new("u", vec![1, 2, 3, 4, 5, 6]);
        let split = split_leave_one_out(&[s]).unwrap();
        let all = split.train_examples(true);
        assert_eq!(
            all.iter().map(|e| (e.input.len(), e.target)).collect::<Vec<_>>(),
            vec![(1, 2), (2, 3), (3, 4)]
        );
        let last = split.train_examples(false);
        assert_eq!(last.len(), 1);
        assert_eq!(last[0].input, vec![1, 2, 3]);
        assert_eq!(last[0].target, 4);
    }

    fn examples(count: usize) -> Vec<Example> {
        (0..count)
            .map(|u| Example {
                user: u,
                input: vec![1 + u as ItemId; 1 + u % 3],
                target: 1,
            })
            .collect()
    }

    #[test]
    fn batch_sizes_keep_partial_tail() {
        let ex = examples(10);
        let sizes: Vec<usize> = make_batches(&ex, 4, 5, Some(3)).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn long_rows_keep_most_recent_items() {
        let items: Vec<ItemId> = (1..=60).collect();
        let b = SequenceBatch::from_rows([(items.as_slice(), 61, 0)], 50);
        assert_eq!(b.row(0), &items[10..]);
        assert_eq!(b.lengths, vec![50]);

        let b = SequenceBatch::from_rows([(&[4u32, 5][..], 6, 0)], 4);
        assert_eq!(b.row(0), &[0, 0, 4, 5]);
        assert_eq!(b.items(0), &[4, 5]);
    }

    #[test]
    fn seeded_batching_is_deterministic() {
        let ex = examples(23);
        let a: Vec<_> = make_batches(&ex, 4, 3, Some(11)).collect();
        let b: Vec<_> = make_batches(&ex, 4, 3, Some(11)).collect();
        let c: Vec<_> = make_batches(&ex, 4, 3, Some(12)).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn length_groups() {
        let seqs: Vec<_> = [5usize, 6, 8, 9]
            .iter()
            .map(|&l| InteractionSequence::new("u", vec![1; l]))
            .collect();
        let bounds = [LengthRange::exactly(5), LengthRange::between(6, 8), LengthRange::above(8)];
        let groups = group_by_length(&seqs, &bounds).unwrap();
        let sizes: Vec<usize> = groups.iter().map(|g| g.1.len()).collect();
        assert_eq!(sizes, vec![1, 2, 1]);

        let one = group_by_length(&seqs[..1], &bounds).unwrap();
        assert_eq!(one[0].0.to_string(), "=5");
        assert_eq!(one[0].1.len(), 1);

        let err = group_by_length(&seqs, &bounds[..2]).unwrap_err();
        assert!(matches!(err, Error::UncoveredLength(9)));
        assert!(group_by_length(&seqs, &[LengthRange::between(1, 6), LengthRange::above(5)]).is_err());
    }

    #[test]
    fn length_range_round_trips_through_text() {
        for s in ["=5", "6-8", ">8"] {
            assert_eq!(s.parse::<LengthRange>().unwrap().to_string(), s);
        }
        assert!("8-6".parse::<LengthRange>().is_err());
    }

    #[test]
    fn stats_report_table_columns() {
        let c = Corpus {
            sequences: vec![
                InteractionSequence::new("a", vec![1, 2, 3]),
                InteractionSequence::new("b", vec![1, 2, 3, 4, 4]),
            ],
            vocab: ItemVocab::with_size(4),
        };
        let s = c.stats();
        assert_eq!((s.users, s.items, s.actions), (2, 4, 8));
        assert!((s.avg_length - 4.0).abs() < 1e-12);
        assert!((s.sparsity - 0.0).abs() < 1e-12);
    }
}

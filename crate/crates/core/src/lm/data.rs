use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Raw corpus bytes plus their SHA-256, recorded in run manifests.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub bytes: Vec<u8>,
    pub sha256: String,
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::data("corpus is empty"));
        }
        let sha256 = hex(&Sha256::digest(&bytes));
        Ok(Self { bytes, sha256 })
    }

    /// Byte-level token ids.
    pub fn ids(&self) -> Vec<usize> {
        self.bytes.iter().map(|&b| b as usize).collect()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads a plain-text (or any byte) file; every byte is one token.
pub fn ingest(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_bytes(bytes).map_err(|_| Error::data(format!("corpus {} is empty", path.display())))
}

/// Inverse of byte tokenization. Ids above 255 are a caller bug.
pub fn detokenize(ids: &[usize]) -> Vec<u8> {
    ids.iter().map(|&i| u8::try_from(i).expect("byte-level id")).collect()
}

/// `batch` sequences of `seq` tokens, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(tokens: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 {
            return Err(Error::data("empty batch"));
        }
        if tokens.len() != batch * seq {
            return Err(Error::config(format!("{} tokens for a {batch}x{seq} batch", tokens.len())));
        }
        Ok(Self { tokens, batch, seq })
    }

    pub fn from_windows(windows: &[Vec<usize>]) -> Result<Self> {
        let seq = windows.first().map_or(0, Vec::len);
        if windows.iter().any(|w| w.len() != seq) {
            return Err(Error::config("windows of unequal length in one batch"));
        }
        Self::new(windows.concat(), windows.len(), seq)
    }

    pub fn sequence(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.seq..(i + 1) * self.seq]
    }

    /// Single-sequence batches, in order.
    pub fn split_sequences(&self) -> Vec<TokenBatch> {
        (0..self.batch)
            .map(|i| TokenBatch {
                tokens: self.sequence(i).to_vec(),
                batch: 1,
                seq: self.seq,
            })
            .collect()
    }

    /// Next-token targets: position `t` predicts token `t + 1` of the same
    /// sequence; the last position of each sequence has no target.
    pub fn targets(&self) -> Vec<Option<usize>> {
        (0..self.tokens.len())
            .map(|i| if (i + 1) % self.seq == 0 { None } else { Some(self.tokens[i + 1]) })
            .collect()
    }

    /// Number of predicted positions.
    pub fn predicted(&self) -> usize {
        self.batch * (self.seq - 1)
    }
}

/// Which windows of the corpus to use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Split {
    All,
    /// Everything except the trailing `val_fraction` of windows.
    Train { val_fraction: f64 },
    /// The trailing `ceil(val_fraction * windows)` windows.
    Val { val_fraction: f64 },
}

/// Number of non-overlapping windows of `seq_len` tokens.
pub fn window_count(len: usize, seq_len: usize) -> usize {
    if seq_len == 0 {
        0
    } else {
        len / seq_len
    }
}

/// Contiguous non-overlapping windows belonging to `split`, in corpus order.
pub fn make_windows(ids: &[usize], seq_len: usize, split: Split) -> Result<Vec<Vec<usize>>> {
    if seq_len < 2 {
        return Err(Error::config(format!("sequence length must be at least 2, got {seq_len}")));
    }
    if seq_len >= ids.len() {
        return Err(Error::data(format!(
            "sequence length {seq_len} needs more than {} tokens",
            ids.len()
        )));
    }
    let n = window_count(ids.len(), seq_len);
    let (lo, hi) = match split {
        Split::All => (0, n),
        Split::Train { val_fraction } | Split::Val { val_fraction } => {
            if !(val_fraction > 0.0 && val_fraction < 1.0) {
                return Err(Error::config(format!("val_fraction must be in (0, 1), got {val_fraction}")));
            }
            let val = ((n as f64 * val_fraction).ceil() as usize).max(1);
            if val >= n {
                return Err(Error::data(format!("{n} windows are too few for a validation split")));
            }
            if matches!(split, Split::Train { .. }) {
                (0, n - val)
            } else {
                (n - val, n)
            }
        }
    };
    Ok((lo..hi).map(|w| ids[w * seq_len..(w + 1) * seq_len].to_vec()).collect())
}

/// Groups windows into batches of `batch_size` after a seeded shuffle. The
/// final batch may be smaller.
pub fn batch_windows(mut windows: Vec<Vec<usize>>, batch_size: usize, seed: u64) -> Result<Vec<TokenBatch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if windows.is_empty() {
        return Err(Error::data("no windows to batch"));
    }
    windows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    windows.chunks(batch_size).map(TokenBatch::from_windows).collect()
}

/// Windows of `split`, shuffled per `seed` and batched.
pub fn make_batches(ids: &[usize], seq_len: usize, batch_size: usize, split: Split, seed: u64) -> Result<Vec<TokenBatch>> {
    batch_windows(make_windows(ids, seq_len, split)?, batch_size, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_are_tokens() {
        let c = Corpus::from_bytes(b"AB".to_vec()).unwrap();
        assert_eq!(c.ids(), vec![65, 66]);
        assert_eq!(detokenize(&c.ids()), b"AB");
        assert!(Corpus::from_bytes(Vec::new()).is_err());
        // sha256("AB")
        assert_eq!(c.sha256, "38164fbd17603d73f696b8b4d72664d735bb6a7c88577687fd2ae33fd6964153");
    }

    #[test]
    fn targets_skip_sequence_ends() {
        let b = TokenBatch::new(vec![1, 2, 3, 4, 5, 6], 2, 3).unwrap();
        assert_eq!(b.targets(), vec![Some(2), Some(3), None, Some(5), Some(6), None]);
        assert_eq!(b.predicted(), 4);
    }

    #[test]
    fn windows_and_splits() {
        let ids: Vec<usize> = (0..10).collect();
        let w = make_windows(&ids, 4, Split::All).unwrap();
        assert_eq!(w, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
        assert!(make_windows(&ids, 10, Split::All).is_err());

        let ids: Vec<usize> = (0..100).collect();
        let tr = make_windows(&ids, 5, Split::Train { val_fraction: 0.1 }).unwrap();
        let va = make_windows(&ids, 5, Split::Val { val_fraction: 0.1 }).unwrap();
        assert_eq!((tr.len(), va.len()), (18, 2));
        assert!(tr.iter().all(|t| !va.contains(t)));
    }

    #[test]
    fn shuffle_is_seeded() {
        let ids: Vec<usize> = (0..200).map(|i| i % 256).collect();
        let a = make_batches(&ids, 8, 4, Split::All, 7).unwrap();
        let b = make_batches(&ids, 8, 4, Split::All, 7).unwrap();
        let c = make_batches(&ids, 8, 4, Split::All, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 7);
        assert_eq!(a[6].batch, 1);
    }
}

use super::model::Batch;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Byte-level tokens split into a training prefix and a held-out suffix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// One token per byte.
pub fn byte_tokens(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

impl TokenSplits {
    /// Holds out the last `val_fraction` of the tokens. Both parts must fit at
    /// least one window of `seq_len + 1` tokens.
    pub fn new(tokens: Vec<usize>, val_fraction: f64, seq_len: usize) -> Result<Self> {
        if !(0.0 < val_fraction && val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction {val_fraction} outside (0, 1)"
            )));
        }
        let n = tokens.len();
        let cut = n - ((n as f64) * val_fraction).round() as usize;
        let need = seq_len + 1;
        if cut < need || n - cut < need {
            return Err(Error::Corpus(format!(
                "{n} tokens cannot hold a {need}-token window in both splits"
            )));
        }
        let mut train = tokens;
        let val = train.split_off(cut);
        Ok(Self { train, val })
    }

    /// `batch_size` random training windows for `step`, drawn from the
    /// stream `(seed, "batch", step)`.
    pub fn train_batch(&self, batch_size: usize, seq_len: usize, seed: u64, step: u64) -> Result<Batch> {
        let mut rng = RngStream::new(seed, "batch", step);
        let starts = self.train.len() - seq_len;
        let windows: Vec<&[usize]> = (0..batch_size)
            .map(|_| {
                let s = rng.below(starts);
                &self.train[s..s + seq_len + 1]
            })
            .collect();
        Batch::from_windows(&windows)
    }

    /// `count` evenly spaced held-out windows, the same on every call.
    pub fn val_batch(&self, count: usize, seq_len: usize) -> Result<Batch> {
        if count == 0 {
            return Err(Error::InvalidArgument("no validation windows requested".into()));
        }
        let last = self.val.len() - seq_len - 1;
        let windows: Vec<&[usize]> = (0..count)
            .map(|i| {
                let s = if count == 1 { 0 } else { i * last / (count - 1) };
                &self.val[s..s + seq_len + 1]
            })
            .collect();
        Batch::from_windows(&windows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_and_windows() {
        let toks = byte_tokens(&(0..=255u8).cycle().take(1000).collect::<Vec<_>>());
        let s = TokenSplits::new(toks, 0.1, 16).unwrap();
        assert_eq!(s.train.len(), 900);
        assert_eq!(s.val.len(), 100);
        let b = s.train_batch(3, 16, 7, 0).unwrap();
        assert_eq!(b.inputs.len(), 48);
        assert_eq!(b, s.train_batch(3, 16, 7, 0).unwrap());
        assert_ne!(b, s.train_batch(3, 16, 7, 1).unwrap());
        for i in 0..48 {
            assert_eq!(b.targets[i], (b.inputs[i] + 1) % 256);
        }
        let v = s.val_batch(4, 16).unwrap();
        assert_eq!(v.num_sequences(), 4);
        assert_eq!(v.inputs[0], s.val[0]);
        assert_eq!(*v.targets.last().unwrap(), *s.val.last().unwrap());
    }

    #[test]
    fn tiny_corpus_rejected() {
        assert!(matches!(
            TokenSplits::new(vec![1; 20], 0.1, 16),
            Err(Error::Corpus(_))
        ));
    }
}

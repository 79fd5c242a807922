//! Mixed alternating sampling: `ratio_a` pure-text batches, then one
//! multimodal batch, repeated until one kind runs out.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Text batches per multimodal batch.
    pub ratio_a: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(ratio_a: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            ratio_a,
            batch_size,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Ratio from corpus sizes: `floor(n_text / n_multimodal)`, at least 1.
    pub fn from_counts(n_text: usize, n_multimodal: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n_multimodal == 0 {
            return Err(Error::Empty("multimodal corpus"));
        }
        Self::new((n_text / n_multimodal).max(1), batch_size, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio_a < 1 {
            return Err(Error::param("ratio_a", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::param(
                "batch_size",
                format!("must be at least 2, got {}", self.batch_size),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BatchKind {
    Text,
    Multimodal,
}

impl BatchKind {
    pub fn code(self) -> char {
        match self {
            BatchKind::Text => 'T',
            BatchKind::Multimodal => 'M',
        }
    }
}

/// Which batch of which corpus fills a schedule slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchDescriptor {
    pub kind: BatchKind,
    pub index: usize,
}

pub fn mixed_schedule(
    n_text_batches: usize,
    n_mm_batches: usize,
    config: &SamplerConfig,
) -> Result<Vec<BatchDescriptor>> {
    config.validate()?;
    if n_text_batches == 0 || n_mm_batches == 0 {
        return Err(Error::param(
            "batches",
            format!("need at least one batch of each kind, got {n_text_batches} text / {n_mm_batches} multimodal"),
        ));
    }
    let mut out = Vec::with_capacity(n_text_batches + n_mm_batches);
    let (mut t, mut m) = (0, 0);
    while m < n_mm_batches {
        let take = config.ratio_a.min(n_text_batches - t);
        out.extend((t..t + take).map(|index| BatchDescriptor {
            kind: BatchKind::Text,
            index,
        }));
        t += take;
        if take < config.ratio_a {
            break;
        }
        out.push(BatchDescriptor {
            kind: BatchKind::Multimodal,
            index: m,
        });
        m += 1;
    }
    out.extend((t..n_text_batches).map(|index| BatchDescriptor {
        kind: BatchKind::Text,
        index,
    }));
    out.extend((m..n_mm_batches).map(|index| BatchDescriptor {
        kind: BatchKind::Multimodal,
        index,
    }));
    Ok(out)
}

/// Shuffles `0..n_items` and cuts it into batches of `batch_size`. A short
/// final batch is kept when it has at least two rows.
pub fn epoch_batches(n_items: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n_items).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codes(s: &[BatchDescriptor]) -> String {
        s.iter().map(|b| b.kind.code()).collect()
    }

    #[test]
    fn alternation_examples() {
        let cfg = SamplerConfig::new(2, 4, 0).unwrap();
        assert_eq!(codes(&mixed_schedule(4, 2, &cfg).unwrap()), "TTMTTM");
        assert_eq!(codes(&mixed_schedule(5, 2, &cfg).unwrap()), "TTMTTMT");
        assert_eq!(codes(&mixed_schedule(3, 2, &cfg).unwrap()), "TTMTM");
        assert_eq!(codes(&mixed_schedule(1, 3, &cfg).unwrap()), "TMMM");
    }

    #[test]
    fn rejects_empty_kinds_and_bad_config() {
        let cfg = SamplerConfig::new(1, 4, 0).unwrap();
        assert!(mixed_schedule(0, 2, &cfg).is_err());
        assert!(mixed_schedule(2, 0, &cfg).is_err());
        assert!(SamplerConfig::new(0, 4, 0).is_err());
        assert!(SamplerConfig::new(1, 1, 0).is_err());
    }

    #[test]
    fn ratio_from_counts_floors() {
        assert_eq!(SamplerConfig::from_counts(10, 3, 8, 0).unwrap().ratio_a, 3);
        assert_eq!(SamplerConfig::from_counts(2, 3, 8, 0).unwrap().ratio_a, 1);
    }

    #[test]
    fn epoch_batches_cover_everything_once() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = epoch_batches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(epoch_batches(9, 4, &mut rng).len(), 2);
    }
}

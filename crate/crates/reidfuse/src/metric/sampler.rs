//! P x K identity-balanced batch sampling: P distinct identities, K instances
//! each, with replacement only when an identity has fewer than K images.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{ImageRecord, Manifest, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity.
    pub k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            p: 3,
            k: 4,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::Config("P must be >= 2".into()));
        }
        if self.k < 2 {
            return Err(Error::Config("K must be >= 2".into()));
        }
        Ok(())
    }
}

/// Samples one batch from records grouped by identity. Returned records are
/// ordered identity-major; the draw is a pure function of the RNG state.
pub fn pk_sample_from_groups<'a>(
    groups: &[(&str, Vec<&'a ImageRecord>)],
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<&'a ImageRecord>> {
    config.validate()?;
    if groups.len() < config.p {
        return Err(Error::Validation(format!(
            "need at least {} train identities, found {}",
            config.p,
            groups.len()
        )));
    }
    let chosen = index::sample(rng, groups.len(), config.p);
    let mut batch = Vec::with_capacity(config.batch_size());
    for gi in chosen.iter() {
        let records = &groups[gi].1;
        if records.len() >= config.k {
            for ri in index::sample(rng, records.len(), config.k).iter() {
                batch.push(records[ri]);
            }
        } else {
            for _ in 0..config.k {
                batch.push(records[rng.random_range(0..records.len())]);
            }
        }
    }
    Ok(batch)
}

/// Samples one P x K batch from a manifest's train split.
pub fn pk_sample_batch<'a>(
    manifest: &'a Manifest,
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<&'a ImageRecord>> {
    let groups = manifest.by_identity(Split::Train);
    pk_sample_from_groups(&groups, config, rng)
}

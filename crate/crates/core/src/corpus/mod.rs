//! Frame-feature corpora: a seeded synthetic generator, feature files,
//! 2-frame splicing and k-means cluster targets.

mod featfile;
mod generate;
mod kmeans;
mod splice;

pub use featfile::{
    decode_features, encode_features, load_features, load_manifest, read_manifest, write_features,
    FEATURE_MAGIC, FEATURE_VERSION,
};
pub use generate::{generate, GeneratorSpec, Utterance};
pub use kmeans::{assign, fit_codebook, kmeans_fit, stack_frames, Codebook, FeatureStats, KMeansFit};
pub use splice::splice2;

use crate::error::Result;

/// Fill `cluster_labels` of every utterance from `codebook`.
pub fn label_corpus(codebook: &Codebook, utts: &mut [Utterance]) -> Result<()> {
    for u in utts.iter_mut() {
        u.cluster_labels = Some(assign(codebook, u)?);
    }
    Ok(())
}

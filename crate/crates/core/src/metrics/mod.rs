//! Similarity metrics over a learned feature space: prompt score, identity
//! score and the knowledge preservation score (KPS).

mod encoder;
mod scores;

pub use encoder::{EncoderConfig, FeatureEncoder};
pub use scores::{
    aggregate, clamp_similarity, cosine_sim, harmonic_mean, identity_score, identity_score_features, kps, kps_features,
    prompt_score, prompt_score_features, EvalPair, MetricReport, PairRole, Scored, CLAMP_FLOOR,
};

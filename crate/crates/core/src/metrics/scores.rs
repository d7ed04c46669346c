use std::fmt::Write as _;

use super::encoder::FeatureEncoder;
use crate::error::{Error, Result};

/// Lower clamp applied to every similarity before aggregation, keeping the
/// harmonic mean defined when learned features point apart.
pub const CLAMP_FLOOR: f64 = 1e-6;

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape { node: "cosine_sim".into(), detail: format!("{} vs {}", a.len(), b.len()) });
    }
    let aa: f64 = a.iter().map(|v| v * v).sum();
    let bb: f64 = b.iter().map(|v| v * v).sum();
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    // sqrt(s·s) == s in IEEE arithmetic, so identical inputs give exactly 1
    Ok((d / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

pub fn clamp_similarity(s: f64) -> f64 {
    s.clamp(CLAMP_FLOOR, 1.0)
}

/// `n / Σ 1/xᵢ` over strictly positive values.
pub fn harmonic_mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::invalid("harmonic mean of an empty list"));
    }
    if let Some(bad) = xs.iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::invalid(format!("harmonic mean needs positive values, got {bad}")));
    }
    Ok(xs.len() as f64 / xs.iter().map(|x| 1.0 / x).sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairRole {
    Prompt,
    Identity,
    Preservation,
}

/// Two embeddings compared by one metric, with their pair index.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub role: PairRole,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub index: usize,
}

/// Aggregate of one metric: the harmonic mean of clamped similarities and
/// the raw (unclamped) per-pair values.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub score: f64,
    pub similarities: Vec<f64>,
}

pub fn aggregate(pairs: &[EvalPair]) -> Result<Scored> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to score"));
    }
    let similarities = pairs.iter().map(|p| cosine_sim(&p.a, &p.b)).collect::<Result<Vec<_>>>()?;
    let clamped: Vec<f64> = similarities.iter().map(|&s| clamp_similarity(s)).collect();
    Ok(Scored { score: harmonic_mean(&clamped)?, similarities })
}

fn count_check(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::invalid(format!("{what}: {a} vs {b} items")));
    }
    Ok(())
}

/// Prompt score over precomputed features: prompt `i` is the prototype of
/// class `prompts[i]`, compared with generation `i`.
pub fn prompt_score_features(prototypes: &[Vec<f64>], prompts: &[usize], gens: &[Vec<f64>]) -> Result<Scored> {
    count_check("prompt score prompts/generations", prompts.len(), gens.len())?;
    let pairs = prompts
        .iter()
        .zip(gens)
        .enumerate()
        .map(|(i, (&c, g))| {
            let proto = prototypes.get(c).ok_or_else(|| Error::invalid(format!("no prototype for class {c}")))?;
            Ok(EvalPair { role: PairRole::Prompt, a: proto.clone(), b: g.clone(), index: i })
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&pairs)
}

/// Identity score over features. Generation `i` pairs with original
/// `i mod originals.len()`, so ten generations can be scored against a
/// six-sample identity set.
pub fn identity_score_features(originals: &[Vec<f64>], gens: &[Vec<f64>]) -> Result<Scored> {
    if originals.is_empty() || gens.is_empty() {
        return Err(Error::invalid("identity score needs originals and generations"));
    }
    let pairs: Vec<EvalPair> = gens
        .iter()
        .enumerate()
        .map(|(i, g)| EvalPair {
            role: PairRole::Identity,
            a: originals[i % originals.len()].clone(),
            b: g.clone(),
            index: i,
        })
        .collect();
    aggregate(&pairs)
}

/// `1 − H(clamped similarity of with_i and without_i)`.
pub fn kps_features(with: &[Vec<f64>], without: &[Vec<f64>]) -> Result<Scored> {
    count_check("kps with/without generations", with.len(), without.len())?;
    let pairs: Vec<EvalPair> = with
        .iter()
        .zip(without)
        .enumerate()
        .map(|(i, (a, b))| EvalPair { role: PairRole::Preservation, a: a.clone(), b: b.clone(), index: i })
        .collect();
    let s = aggregate(&pairs)?;
    Ok(Scored { score: 1.0 - s.score, similarities: s.similarities })
}

pub fn prompt_score(encoder: &FeatureEncoder, prompts: &[usize], generations: &[Vec<f64>]) -> Result<f64> {
    prompt_score_features(encoder.prototypes(), prompts, &encoder.encode_all(generations)?).map(|s| s.score)
}

pub fn identity_score(encoder: &FeatureEncoder, originals: &[Vec<f64>], generations: &[Vec<f64>]) -> Result<f64> {
    identity_score_features(&encoder.encode_all(originals)?, &encoder.encode_all(generations)?).map(|s| s.score)
}

pub fn kps(encoder: &FeatureEncoder, with_token: &[Vec<f64>], without_token: &[Vec<f64>]) -> Result<f64> {
    kps_features(&encoder.encode_all(with_token)?, &encoder.encode_all(without_token)?).map(|s| s.score)
}

/// One row of `metrics.csv` plus the per-pair similarities behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub run_id: String,
    pub mode: String,
    pub alpha: f64,
    pub seed: u64,
    pub steps: usize,
    pub prompt: Scored,
    pub identity: Scored,
    pub kps: Scored,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "run_id,mode,alpha,seed,steps,prompt_score,identity_score,kps";

    pub fn prompt_score(&self) -> f64 {
        self.prompt.score
    }

    pub fn identity_score(&self) -> f64 {
        self.identity.score
    }

    pub fn kps(&self) -> f64 {
        self.kps.score
    }

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{:.6},{:.6},{:.6}",
            self.run_id,
            self.mode,
            self.alpha,
            self.seed,
            self.steps,
            self.prompt.score,
            self.identity.score,
            self.kps.score
        );
        s
    }
}

//! The conditional denoiser, its token-embedding table and low-rank adapters.

mod checkpoint;
mod condition;
mod denoiser;
mod lora;

pub use checkpoint::{params_digest, AdapterBundle, ArrayFile, BaseModel, MAGIC};
pub use condition::{ConditionTable, TokenKind, NULL_TOKEN};
pub use denoiser::{
    build_branch, denoise_forward, linear_layer, time_embedding, AdapterNodes, BaseNodes, Denoiser, DenoiserConfig,
    DenoiserParams, Linear,
};
pub use lora::{init_lora, merge_adapter, LoraAdapter, LoraFactors};

pub(crate) use denoiser::time_embeddings;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Feeds, Graph, Tensor};
    use crate::rng::{self, Rng};

    fn small_base(rng: &mut Rng) -> (DenoiserParams, ConditionTable) {
        let cfg = DenoiserConfig { data_dim: 6, time_dim: 4, cond_dim: 3, hidden: vec![10, 8] };
        (DenoiserParams::init(cfg, rng), ConditionTable::new(3, 2, rng))
    }

    fn random_inputs(rng: &mut Rng, batch: usize, dim: usize) -> (Tensor, Vec<usize>, Vec<usize>) {
        let z = Tensor::matrix(batch, dim, rng::normal_vec(rng, batch * dim));
        let ts = (0..batch).map(|i| 1 + (i * 37) % 200).collect();
        let toks = (0..batch).map(|i| i % 3).collect();
        (z, ts, toks)
    }

    fn perturb(adapter: &mut LoraAdapter, rng: &mut Rng) {
        for f in adapter.layers.iter_mut().flatten() {
            for v in f.up.data_mut() {
                *v = 0.3 * rng::normal(rng);
            }
        }
    }

    #[test]
    fn zero_init_adapter_matches_base_exactly() {
        let mut r = rng::seeded(1);
        let (base, table) = small_base(&mut r);
        let adapter = init_lora(&base, 2, 1.0, &mut r).unwrap();
        for l in 0..base.layers.len() {
            assert!(adapter.delta(l).unwrap().data().iter().all(|&v| v == 0.0));
        }
        let (z, ts, toks) = random_inputs(&mut r, 16, 6);
        let plain = denoise_forward(&base, None, &table, &z, &ts, &toks).unwrap();
        let adapted = denoise_forward(&base, Some(&adapter), &table, &z, &ts, &toks).unwrap();
        for (a, b) in plain.data().iter().zip(adapted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(plain, adapted);
    }

    #[test]
    fn two_by_two_layer_with_delta() {
        let mut g = Graph::new();
        let x = g.input("x", vec![1, 2]).unwrap();
        let w = g.param("w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]), false);
        let b = g.param("b", Tensor::zeros(vec![2]), false);
        let down = g.param("down", Tensor::matrix(1, 2, vec![0.0, 1.0]), false);
        let up = g.param("up", Tensor::matrix(2, 1, vec![1.0, 0.0]), false);
        let y = linear_layer(&mut g, x, w, b, Some((down, up, 1.0))).unwrap();
        g.forward(&Feeds::new().tensor("x", Tensor::matrix(1, 2, vec![0.0, 1.0]))).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0]);
    }

    #[test]
    fn rank_validation_and_param_count() {
        let mut r = rng::seeded(2);
        let (base, _) = small_base(&mut r);
        // smallest layer dim is 6 (output)
        assert!(init_lora(&base, 7, 1.0, &mut r).is_err());
        assert!(init_lora(&base, 0, 1.0, &mut r).is_err());
        let a = init_lora(&base, 3, 1.0, &mut r).unwrap();
        let expected: usize = base.config.layer_dims().iter().map(|(i, o)| 3 * (i + o)).sum();
        assert_eq!(a.param_count(), expected);
    }

    #[test]
    fn default_adapter_is_under_ten_percent_of_base() {
        let mut r = rng::seeded(3);
        let base = DenoiserParams::init(DenoiserConfig::new(256), &mut r);
        let a = init_lora(&base, 4, 1.0, &mut r).unwrap();
        assert!((a.param_count() as f64) < 0.1 * base.param_count() as f64);
    }

    #[test]
    fn merged_weights_match_runtime_adapter() {
        let mut r = rng::seeded(4);
        let (base, table) = small_base(&mut r);
        let mut adapter = init_lora(&base, 2, 0.7, &mut r).unwrap();
        let zero_merge = merge_adapter(&base, &adapter).unwrap();
        assert_eq!(zero_merge, base);

        perturb(&mut adapter, &mut r);
        let merged = merge_adapter(&base, &adapter).unwrap();
        let (z, ts, toks) = random_inputs(&mut r, 100, 6);
        let runtime = denoise_forward(&base, Some(&adapter), &table, &z, &ts, &toks).unwrap();
        let folded = denoise_forward(&merged, None, &table, &z, &ts, &toks).unwrap();
        for (a, b) in runtime.data().iter().zip(folded.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }

        let twice = merge_adapter(&merged, &adapter).unwrap();
        assert_ne!(twice, merged);
        // original base untouched by merging
        assert_ne!(merged, base);
    }

    #[test]
    fn topology_mismatch_rejected() {
        let mut r = rng::seeded(5);
        let (base, table) = small_base(&mut r);
        let other =
            DenoiserParams::init(DenoiserConfig { data_dim: 6, time_dim: 4, cond_dim: 3, hidden: vec![9, 8] }, &mut r);
        let adapter = init_lora(&other, 2, 1.0, &mut r).unwrap();
        assert!(merge_adapter(&base, &adapter).is_err());
        let (z, ts, toks) = random_inputs(&mut r, 2, 6);
        assert!(denoise_forward(&base, Some(&adapter), &table, &z, &ts, &toks).is_err());
        let bad_z = Tensor::matrix(2, 5, vec![0.0; 10]);
        assert!(denoise_forward(&base, None, &table, &bad_z, &ts, &toks).is_err());
        assert!(denoise_forward(&base, None, &table, &z, &ts, &[0, 42]).is_err());
    }

    #[test]
    fn nan_weights_rejected() {
        let mut r = rng::seeded(6);
        let (mut base, table) = small_base(&mut r);
        base.layers[1].weight.data_mut()[3] = f64::NAN;
        let (z, ts, toks) = random_inputs(&mut r, 2, 6);
        assert!(denoise_forward(&base, None, &table, &z, &ts, &toks).is_err());
    }

    #[test]
    fn time_embedding_shape_and_range() {
        let e = time_embedding(17, 16);
        assert_eq!(e.len(), 16);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(e[0], 17f64.sin());
        assert_eq!(e[8], 17f64.cos());
    }
}

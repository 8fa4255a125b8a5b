//! Response data sampled from planted `mirt_icl` parameters, for recovery
//! checks and demos.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::model::{sigmoid, IrtConfig, IrtParams, Layout, Variant};
use crate::data::{Query, ResponseRecord, ResponseSet, Setting, Task};
use crate::error::Result;
use crate::rng;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_models: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub embedding_dim: usize,
    /// Embeddings are a random linear mix of this many factors plus noise.
    pub embedding_rank: usize,
    pub embedding_noise: f64,
    /// Standard deviation of planted abilities.
    pub ability_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_models: 8,
            n_items: 500,
            latent_dim: 8,
            embedding_dim: 768,
            embedding_rank: 16,
            embedding_noise: 0.1,
            ability_scale: 2.0,
            seed: 0,
        }
    }
}

pub struct Synthetic {
    pub planted: IrtParams,
    pub responses: ResponseSet,
}

/// Samples planted parameters, Gaussian item embeddings and one DP and one
/// ICL Bernoulli label per (model, item).
pub fn generate(spec: &SyntheticSpec) -> Result<Synthetic> {
    let cfg = IrtConfig {
        variant: Variant::MirtIcl,
        latent_dim: spec.latent_dim,
        embedding_dim: spec.embedding_dim,
        seed: spec.seed,
        ..IrtConfig::default()
    };
    let layout = Layout::new(&cfg, spec.n_models, 0);
    let mut rng = rng::seeded(rng::derive_seed(spec.seed, "synthetic"));
    let std = Normal::new(0.0, 1.0).expect("valid normal");
    let mut values: Vec<f64> = (0..layout.len).map(|_| std.sample(&mut rng)).collect();
    let n_theta = spec.n_models * spec.latent_dim;
    for at in [layout.theta, layout.theta_icl.unwrap()] {
        for v in &mut values[at..at + n_theta] {
            *v *= spec.ability_scale;
        }
    }
    let w_scale = 1.0 / (spec.embedding_dim as f64).sqrt();
    for (w, b, rows, bias) in [
        (layout.w_d, layout.b_d, 1, 0.5),
        (layout.w_alpha, layout.b_alpha, spec.latent_dim, 0.5),
        (layout.w_alpha_icl, layout.b_alpha_icl, spec.latent_dim, 0.0),
    ] {
        let (w, b) = (w.unwrap(), b.unwrap());
        for v in &mut values[w..w + rows * spec.embedding_dim] {
            *v *= w_scale;
        }
        values[b..b + rows].fill(bias);
    }
    let planted = IrtParams {
        config: cfg,
        layout,
        values,
    };

    let mix_scale = 1.0 / (spec.embedding_rank as f64).sqrt();
    let mix: Vec<f64> = (0..spec.embedding_dim * spec.embedding_rank)
        .map(|_| std.sample(&mut rng) * mix_scale)
        .collect();
    let mut queries = BTreeMap::new();
    let mut records = Vec::new();
    for j in 0..spec.n_items {
        let id = format!("item{j:05}");
        let factors: Vec<f64> = (0..spec.embedding_rank).map(|_| std.sample(&mut rng)).collect();
        let e: Vec<f64> = (0..spec.embedding_dim)
            .map(|r| {
                let row = &mix[r * spec.embedding_rank..(r + 1) * spec.embedding_rank];
                row.iter().zip(&factors).map(|(a, f)| a * f).sum::<f64>() + spec.embedding_noise * std.sample(&mut rng)
            })
            .collect();
        let item = super::model::ItemRef {
            slot: j,
            embedding: Some(&e),
        };
        for m in 0..spec.n_models {
            let (base, icl) = planted.decompose(m, &item)?;
            for (setting, z) in [(Setting::Dp, base), (Setting::Icl, base + icl)] {
                records.push(ResponseRecord {
                    model_id: format!("model{m}"),
                    example_id: id.clone(),
                    setting,
                    prompt_text: String::new(),
                    raw_output: String::new(),
                    label: rng.random_bool(sigmoid(z)),
                    prompt_token_count: 0,
                });
            }
        }
        let mut q = Query::new(&id, Task::MathQa, format!("synthetic item {j}"), "0");
        q.embedding = Some(e.iter().map(|&x| x as f32).collect());
        queries.insert(id, q);
    }
    Ok(Synthetic {
        planted,
        responses: ResponseSet::new(queries, records)?,
    })
}

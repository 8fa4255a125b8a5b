use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zpd_core::irt::{init_params, IrtConfig, ItemMode, ItemRef, Observation, Variant};

const H: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-8;

/// Largest relative error between analytic and central-difference
/// gradients on one random 3-model x 4-item instance.
fn max_rel_error(variant: Variant, mode: ItemMode, seed: u64) -> f64 {
    let cfg = IrtConfig {
        variant,
        item_mode: mode,
        latent_dim: 4,
        embedding_dim: 6,
        seed,
        ..IrtConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(&cfg, 3, 4).unwrap();
    for v in &mut params.values {
        *v += rng.random_range(-0.5..0.5);
    }
    let embeddings: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut batch = Vec::new();
    for m in 0..3 {
        for (j, e) in embeddings.iter().enumerate() {
            for gate in [0u8, 1] {
                batch.push(Observation {
                    model: m,
                    item: ItemRef { slot: j, embedding: Some(e) },
                    gate,
                    label: rng.random_bool(0.5),
                });
            }
        }
    }
    let (_, grads) = params.loss_and_grads(&batch).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..params.values.len() {
        let x = params.values[i];
        params.values[i] = x + H;
        let up = params.loss(&batch).unwrap();
        params.values[i] = x - H;
        let down = params.loss(&batch).unwrap();
        params.values[i] = x;
        let numeric = (up - down) / (2.0 * H);
        let err = (numeric - grads[i]).abs() / numeric.abs().max(grads[i].abs()).max(DENOM_FLOOR);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn analytic_gradients_match_central_differences() {
    for (v, m) in [
        (Variant::OnePl, ItemMode::Classic),
        (Variant::TwoPl, ItemMode::Classic),
        (Variant::Mirt, ItemMode::Classic),
        (Variant::Mirt, ItemMode::Content),
        (Variant::MirtIcl, ItemMode::Content),
    ] {
        for seed in 0..5 {
            let err = max_rel_error(v, m, seed);
            assert!(err < 1e-4, "{v:?}/{m:?} seed {seed}: {err:e}");
        }
    }
}

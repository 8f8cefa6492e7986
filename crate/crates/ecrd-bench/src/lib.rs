//! Synthetic worlds for benchmarking the decoding pipeline at controlled
//! sizes: vocabulary width, pool depth, and chain length.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ecrd::engine::{DecodeConfig, DecodeMode, GlobalDescription};
use ecrd::{TabularModel, TokenDistribution, TokenId, Vocabulary};

/// A reproducible random distribution over `n` tokens.
pub fn synthetic_distribution(n: usize, seed: u64) -> TokenDistribution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    TokenDistribution::from_dense(&probs).unwrap()
}

/// A generation model that walks a `chain_len`-token loop with mildly
/// ambiguous steps, over a `vocab_size` vocabulary.
pub fn chain_model(vocab_size: usize, chain_len: usize) -> TabularModel {
    let vocab = Vocabulary::new((0..vocab_size).map(|i| format!("t{i}")).collect());
    let mut model = TabularModel::with_uniform_default(vocab).unwrap();
    for step in 0..chain_len {
        let current = TokenId((step % vocab_size) as u32);
        let next = TokenId(((step + 1) % vocab_size) as u32);
        let alt = TokenId(((step + 2) % vocab_size) as u32);
        model
            .add_entry(vec![current], vec![(next, 0.55), (alt, 0.40)])
            .unwrap();
    }
    model
}

/// A scoring model where every conditional is uniform; pool scoring cost
/// then depends only on candidate count and pool size.
pub fn flat_scoring_model(vocab_size: usize) -> TabularModel {
    let vocab = Vocabulary::new((0..vocab_size).map(|i| format!("t{i}")).collect());
    TabularModel::with_uniform_default(vocab).unwrap()
}

/// Evidence sentences of the given token lengths.
pub fn evidence_texts(lengths: &[usize]) -> Vec<String> {
    lengths
        .iter()
        .map(|&len| {
            (0..len)
                .map(|i| format!("t{i}"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Config for a supervised decode of `max_tokens` steps.
pub fn supervised_config(max_tokens: usize) -> DecodeConfig {
    DecodeConfig {
        mode: DecodeMode::SupervisorOnly,
        max_tokens,
        global_description: GlobalDescription::Provided {
            text: "t0 t1 t2".into(),
        },
        record_timings: false,
        ..DecodeConfig::default()
    }
}

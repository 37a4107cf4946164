use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DaeError, Result};

/// Partitions `0..n` by `fractions` after a seeded shuffle. Each part is
/// returned in ascending order, so a single fraction of 1 is the identity.
pub fn split(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(DaeError::invalid(
            "fractions must be non-empty and lie in [0, 1]",
        ));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DaeError::invalid(format!(
            "fractions sum to {total}, not 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(fractions.len());
    let (mut cum, mut start) = (0.0, 0);
    for (k, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if k + 1 == fractions.len() {
            n
        } else {
            ((cum * n as f64).round() as usize).min(n)
        };
        let mut part = order[start..end.max(start)].to_vec();
        part.sort_unstable();
        start = end.max(start);
        parts.push(part);
    }
    Ok(parts)
}

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Uniform sample of `count` distinct vertex indices out of `vertex_count`,
/// sorted ascending. Returns every index when `count >= vertex_count`.
pub fn sample_vertices(count: usize, vertex_count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_vertices_with(count, vertex_count, &mut rng)
}

pub fn sample_vertices_with<R: rand::Rng + ?Sized>(count: usize, vertex_count: usize, rng: &mut R) -> Vec<usize> {
    if count >= vertex_count {
        return (0..vertex_count).collect();
    }
    let mut picked = index::sample(rng, vertex_count, count).into_vec();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_count_returns_all() {
        assert_eq!(sample_vertices(10, 10, 1), (0..10).collect::<Vec<_>>());
        assert_eq!(sample_vertices(50, 10, 1), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_and_distinct() {
        let a = sample_vertices(5000, 10_000, 42);
        let b = sample_vertices(5000, 10_000, 42);
        assert_eq!(a, b);
        assert_eq!(a.len(), 5000);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, sample_vertices(5000, 10_000, 43));
    }
}

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::adjacency::GraphSpec;
use crate::error::{AdastiError, Result};

/// Training-time split of the observed mask into imputation targets and
/// conditioning context. At evaluation the targets are the truly missing
/// entries instead.
#[derive(Clone, Debug)]
pub struct MaskPair {
    pub m_ta: Array2<u8>,
    pub m_co: Array2<u8>,
}

impl MaskPair {
    pub fn target_count(&self) -> usize {
        self.m_ta.iter().filter(|&&v| v == 1).count()
    }
}

/// MCAR mask: each entry independently missing (0) with probability `rate`.
pub fn generate_random_mask(shape: (usize, usize), rate: f64, seed: u64) -> Result<Array2<u8>> {
    if !(0.0..1.0).contains(&rate) || rate == 0.0 {
        return Err(AdastiError::contract(format!("missing rate {rate} must lie in (0,1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Array2::from_shape_fn(shape, |_| if rng.gen::<f64>() < rate { 0 } else { 1 }))
}

/// Block missing pattern: repeatedly drop a seed node plus its strongest
/// neighbors over a run of consecutive timestamps until the missing fraction
/// reaches `rate`.
pub fn generate_block_mask(
    shape: (usize, usize),
    rate: f64,
    n_v: usize,
    n_t: usize,
    graph: &GraphSpec,
    seed: u64,
) -> Result<Array2<u8>> {
    let (n, l) = shape;
    if rate >= 1.0 || rate <= 0.0 {
        return Err(AdastiError::contract(format!("missing rate {rate} must lie in (0,1)")));
    }
    if n_v > n || n_v == 0 {
        return Err(AdastiError::contract("block node count must satisfy 0 < N_v <= N"));
    }
    if n_t > l || n_t == 0 {
        return Err(AdastiError::contract("block length must satisfy 0 < N_t <= L"));
    }
    if graph.n_nodes() != n {
        return Err(AdastiError::contract("graph node count must match mask shape"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Array2::<u8>::ones((n, l));
    let total = (n * l) as f64;
    let mut missing = 0usize;
    while (missing as f64) / total < rate {
        let seed_node = rng.gen_range(0..n);
        let t0 = rng.gen_range(0..=l - n_t);
        let mut nodes = vec![seed_node];
        nodes.extend(graph.strongest_neighbors(seed_node, n_v - 1));
        for &node in &nodes {
            for t in t0..t0 + n_t {
                if mask[[node, t]] == 1 {
                    mask[[node, t]] = 0;
                    missing += 1;
                }
            }
        }
    }
    Ok(mask)
}

/// Uniformly sample ceil(target_fraction * |M=1|) observed entries as targets;
/// the remaining observed entries become the condition mask.
pub fn split_target_condition(m: &Array2<u8>, target_fraction: f64, seed: u64) -> Result<MaskPair> {
    if !(0.0 < target_fraction && target_fraction < 1.0) {
        return Err(AdastiError::contract("target fraction must lie in (0,1)"));
    }
    let observed: Vec<(usize, usize)> = m
        .indexed_iter()
        .filter_map(|((i, j), &v)| if v == 1 { Some((i, j)) } else { None })
        .collect();
    if observed.is_empty() {
        return Err(AdastiError::contract("mask has no observed entries to split"));
    }
    let n_target = ((target_fraction * observed.len() as f64).ceil() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = observed.clone();
    shuffled.shuffle(&mut rng);
    let mut m_ta = Array2::<u8>::zeros(m.dim());
    for &(i, j) in shuffled.iter().take(n_target) {
        m_ta[[i, j]] = 1;
    }
    let mut m_co = m.clone();
    for ((i, j), v) in m_ta.indexed_iter() {
        if *v == 1 {
            m_co[[i, j]] = 0;
        }
    }
    Ok(MaskPair { m_ta, m_co })
}

/// Evaluation split: targets are the truly missing entries, conditions the
/// observed ones.
pub fn evaluation_mask_pair(m: &Array2<u8>) -> MaskPair {
    MaskPair { m_ta: m.mapv(|v| 1 - v), m_co: m.clone() }
}

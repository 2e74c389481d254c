//! Brute-force oracles shared by the integration suites.
#![allow(dead_code)]

use insightr_core::backbone::LatentVolume;
use insightr_core::metrics::DIVERSITY_THRESHOLD;
use insightr_core::prototype::PrototypeBank;
use insightr_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_volume(rng: &mut ChaCha8Rng, depth: usize, h: usize, w: usize) -> LatentVolume {
    LatentVolume {
        values: Tensor::new(vec![depth, h, w], (0..depth * h * w).map(|_| rng.random::<f64>()).collect()).unwrap(),
        sample_id: 0,
    }
}

pub fn random_bank(rng: &mut ChaCha8Rng, m: usize, depth: usize) -> PrototypeBank {
    let labels = (0..m).map(|j| 0.5 + j as f64).collect();
    PrototypeBank::new(
        Tensor::new(vec![m, depth], (0..m * depth).map(|_| rng.random::<f64>()).collect()).unwrap(),
        labels,
    )
    .unwrap()
}

/// Per-patch distances straight from the definition: maps, minima and
/// first argmin positions.
pub fn distance_oracle(z: &LatentVolume, bank: &PrototypeBank) -> (Vec<Vec<f64>>, Vec<f64>, Vec<(usize, usize)>) {
    let (h, w) = z.grid();
    let mut maps = Vec::new();
    let mut mins = Vec::new();
    let mut pos = Vec::new();
    for j in 0..bank.len() {
        let p = bank.vector(j);
        let mut map = Vec::new();
        let (mut best, mut at) = (f64::INFINITY, (0, 0));
        for r in 0..h {
            for c in 0..w {
                let d: f64 = z.patch(r, c).iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best {
                    best = d;
                    at = (r, c);
                }
                map.push(d);
            }
        }
        maps.push(map);
        mins.push(best);
        pos.push(at);
    }
    (maps, mins, pos)
}

/// Smallest subset size whose sum reaches 80% of the total, found by
/// trying every subset.
pub fn sparsity_exhaustive(w: &[f64]) -> usize {
    let total: f64 = w.iter().sum();
    let m = w.len();
    let mut best = m;
    for mask in 1u32..(1 << m) {
        let size = mask.count_ones() as usize;
        if size >= best {
            continue;
        }
        let sum: f64 = (0..m).filter(|j| mask >> j & 1 == 1).map(|j| w[j]).sum();
        if sum >= 0.8 * total {
            best = size;
        }
    }
    best
}

pub fn diversity_by_counting(sets: &[Vec<usize>], m: usize) -> usize {
    (0..m)
        .filter(|j| {
            let hits = sets.iter().filter(|s| s.contains(j)).count();
            hits as f64 >= DIVERSITY_THRESHOLD * sets.len() as f64
        })
        .count()
}

/// `n` rows of `m` integer-valued weights, never all zero, so subset sums
/// are exact.
pub fn integer_weights(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut row: Vec<f64> = (0..m).map(|_| rng.random_range(0..20) as f64).collect();
            if row.iter().all(|&v| v == 0.0) {
                row[0] = 1.0;
            }
            row
        })
        .collect()
}

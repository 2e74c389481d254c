//! Prototype layer: squared-L2 distance map, spatial min-pool, similarity.

use insightr_tensor::{argmin_first, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::LatentVolume;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    /// `1 / (d / d_max + eps)`
    Reciprocal,
    /// `ln((d + 1) / (d + eps))`
    Log,
}

impl SimilarityKind {
    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::Reciprocal => "reciprocal",
            SimilarityKind::Log => "log",
        }
    }
}

/// Training patch a prototype was projected onto.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample: usize,
    pub row: usize,
    pub col: usize,
}

/// The prototypes `P` (`m x c_z`) and their fixed labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub vectors: Tensor,
    labels: Vec<f64>,
    pub provenance: Vec<Option<Provenance>>,
    pub d_max: f64,
}

impl PrototypeBank {
    pub fn new(vectors: Tensor, labels: Vec<f64>) -> Result<Self> {
        let &[m, depth] = vectors.shape() else {
            return Err(Error::Dimension {
                what: "prototype matrix",
                expected: "m x c_z".into(),
                actual: format!("{:?}", vectors.shape()),
            });
        };
        if labels.len() != m {
            return Err(Error::Dimension {
                what: "prototype labels",
                expected: m.to_string(),
                actual: labels.len().to_string(),
            });
        }
        if labels.iter().any(|&l| l <= 0.0) {
            return Err(Error::Config("prototype labels must be positive".into()));
        }
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("prototype labels must be strictly increasing".into()));
        }
        Ok(PrototypeBank {
            vectors,
            labels,
            provenance: vec![None; m],
            d_max: compute_d_max(depth),
        })
    }

    /// Uniform initialization in `(lo, hi)^c_z` with evenly spaced labels.
    pub fn init_uniform(m: usize, depth: usize, labels: Vec<f64>, lo: f64, hi: f64, seed: u64) -> Result<Self> {
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("prototype init range ({lo}, {hi}) must lie in [0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..m * depth).map(|_| rng.random_range(lo..hi)).collect();
        Self::new(Tensor::new(vec![m, depth], data)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        let c = self.depth();
        &self.vectors.data()[j * c..(j + 1) * c]
    }

    pub fn is_projected(&self) -> bool {
        self.provenance.iter().all(Option::is_some)
    }
}

/// `l_j = lo + j (hi - lo) / (m - 1)` for `j = 0..m`.
pub fn assign_prototype_labels(m: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::Config(format!("need at least 2 prototypes, got {m}")));
    }
    if lo <= 0.0 {
        return Err(Error::Config(format!("lowest prototype label must be positive, got {lo}")));
    }
    if lo >= hi {
        return Err(Error::Config(format!("label range [{lo}, {hi}] is empty")));
    }
    let step = (hi - lo) / (m - 1) as f64;
    let mut labels: Vec<f64> = (0..m).map(|j| lo + j as f64 * step).collect();
    labels[m - 1] = hi;
    Ok(labels)
}

/// Supremum of the squared distance between two points of `(0,1)^c_z`.
pub fn compute_d_max(depth: usize) -> f64 {
    depth as f64
}

/// Entries `D[j, r, c]` for one sample, `m x h_z x w_z`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub values: Tensor,
}

impl DistanceMap {
    pub fn prototypes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    pub fn plane(&self, j: usize) -> &[f64] {
        let (h, w) = self.grid();
        &self.values.data()[j * h * w..(j + 1) * h * w]
    }
}

/// Squared-L2 distances between every patch of `z` and every prototype.
pub fn distance_map(z: &LatentVolume, bank: &PrototypeBank) -> Result<DistanceMap> {
    if z.depth() != bank.depth() {
        return Err(Error::Dimension {
            what: "prototype depth",
            expected: z.depth().to_string(),
            actual: bank.depth().to_string(),
        });
    }
    let (h, w) = z.grid();
    let mut tape = Tape::new();
    let zv = tape.constant(z.values.reshape(&[1, z.depth(), h, w])?);
    let pv = tape.constant(bank.vectors.clone());
    let d = tape.sq_l2_distance_map(zv, pv)?;
    Ok(DistanceMap {
        values: tape.value(d).reshape(&[bank.len(), h, w])?,
    })
}

/// Per-prototype minimum distance and its (row, col); ties go to the
/// earliest position in row-major order.
pub fn min_pool(map: &DistanceMap) -> (Vec<f64>, Vec<(usize, usize)>) {
    let (_, w) = map.grid();
    (0..map.prototypes())
        .map(|j| {
            let (i, v) = argmin_first(map.plane(j));
            (v, (i / w, i % w))
        })
        .unzip()
}

pub fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("similarity eps must be positive, got {eps}")))
    }
}

/// Scalar similarity for one distance.
pub fn similarity_value(d: f64, kind: SimilarityKind, eps: f64, d_max: f64) -> f64 {
    match kind {
        SimilarityKind::Reciprocal => 1.0 / (d / d_max + eps),
        SimilarityKind::Log => ((d + 1.0) / (d + eps)).ln(),
    }
}

pub fn similarity(d: &[f64], kind: SimilarityKind, eps: f64, d_max: f64) -> Result<Vec<f64>> {
    check_eps(eps)?;
    Ok(d.iter().map(|&v| similarity_value(v, kind, eps, d_max)).collect())
}

/// Differentiable similarity on a tape.
pub fn similarity_on_tape(tape: &mut Tape, d: Var, kind: SimilarityKind, eps: f64, d_max: f64) -> Result<Var> {
    check_eps(eps)?;
    Ok(match kind {
        SimilarityKind::Reciprocal => {
            let r = tape.scale(d, 1.0 / d_max);
            let r = tape.add_scalar(r, eps);
            tape.recip(r)?
        }
        SimilarityKind::Log => {
            let num = tape.add_scalar(d, 1.0);
            let num = tape.log(num)?;
            let den = tape.add_scalar(d, eps);
            let den = tape.log(den)?;
            tape.sub(num, den)?
        }
    })
}

/// Inverse of the reciprocal similarity.
pub fn reciprocal_distance(s: f64, eps: f64, d_max: f64) -> f64 {
    (1.0 / s - eps) * d_max
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(depth: usize, h: usize, w: usize, data: Vec<f64>) -> LatentVolume {
        LatentVolume {
            values: Tensor::new(vec![depth, h, w], data).unwrap(),
            sample_id: 0,
        }
    }

    #[test]
    fn identical_and_orthogonal() {
        // 1x2 grid, depth 2: patch (0,0) = e1, patch (0,1) = e2.
        let z = vol(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let bank = PrototypeBank::new(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), vec![1.0]).unwrap();
        let d = distance_map(&z, &bank).unwrap();
        assert_eq!(d.plane(0), &[0.0, 2.0]);
    }

    #[test]
    fn depth_mismatch() {
        let z = vol(3, 2, 2, vec![0.5; 12]);
        let bank = PrototypeBank::new(Tensor::zeros(&[1, 2]), vec![1.0]).unwrap();
        assert!(matches!(distance_map(&z, &bank), Err(Error::Dimension { .. })));
    }

    #[test]
    fn min_pool_examples() {
        let constant = DistanceMap {
            values: Tensor::full(&[1, 3, 3], 0.7),
        };
        assert_eq!(min_pool(&constant), (vec![0.7], vec![(0, 0)]));
        let mut t = Tensor::full(&[1, 2, 3], 0.9);
        t.set(&[0, 1, 2], 0.0).unwrap();
        assert_eq!(min_pool(&DistanceMap { values: t }), (vec![0.0], vec![(1, 2)]));
    }

    #[test]
    fn similarity_examples() {
        let s = similarity(&[0.0, 128.0], SimilarityKind::Reciprocal, 1e-4, 128.0).unwrap();
        assert!((s[0] - 1e4).abs() < 1e-8);
        assert!((s[1] - 1.0 / (1.0 + 1e-4)).abs() < 1e-15);
        let l = similarity(&[0.0], SimilarityKind::Log, 1e-4, 128.0).unwrap();
        assert!((l[0] - 9.210340371976184).abs() < 1e-12);
        assert!(similarity(&[0.0], SimilarityKind::Log, 0.0, 1.0).is_err());
        assert!(similarity(&[0.0], SimilarityKind::Reciprocal, -1.0, 1.0).is_err());
    }

    #[test]
    fn d_max_and_labels() {
        assert_eq!(compute_d_max(128), 128.0);
        assert_eq!(compute_d_max(1), 1.0);
        let l = assign_prototype_labels(50, 0.1, 5.9).unwrap();
        assert_eq!(l[0], 0.1);
        assert_eq!(l[49], 5.9);
        assert!((l[1] - l[0] - 5.8 / 49.0).abs() < 1e-12);
        assert!(l.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(assign_prototype_labels(2, 0.5, 2.0).unwrap(), vec![0.5, 2.0]);
        assert!(assign_prototype_labels(5, 0.0, 1.0).is_err());
        assert!(assign_prototype_labels(1, 0.1, 1.0).is_err());
    }

    #[test]
    fn bank_rejects_bad_labels() {
        assert!(PrototypeBank::new(Tensor::zeros(&[2, 3]), vec![1.0, 1.0]).is_err());
        assert!(PrototypeBank::new(Tensor::zeros(&[2, 3]), vec![-1.0, 1.0]).is_err());
        assert!(PrototypeBank::new(Tensor::zeros(&[2, 3]), vec![1.0]).is_err());
    }
}

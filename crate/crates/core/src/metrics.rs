//! Explanations and explanation-quality metrics.

use insightr_tensor::smallest_k;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{contribution_weights, importance};
use crate::model::ProtoModel;
use crate::prototype::{similarity_value, Provenance};
use crate::synth::{unshift_labels, SynthDataset, LABEL_OFFSET};
use crate::trainer::EVAL_BATCH;

/// Share of the total weight an explanation must cover.
pub const SPARSITY_FRACTION: f64 = 0.8;
/// Minimum share of samples a prototype must reach to count toward diversity.
pub const DIVERSITY_THRESHOLD: f64 = 0.01;
/// Size of the per-sample top contribution set.
pub const TOP_SET: usize = 5;

/// Indices ordered by descending value, ties by ascending index.
pub fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx = descending_order(values);
    idx.truncate(k);
    idx
}

/// Smallest number of largest weights whose sum reaches 80% of the total.
pub fn sparsity(w: &[f64]) -> Result<usize> {
    if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::Config("sparsity weights must be finite and non-negative".into()));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateHead("all contribution weights are zero".into()));
    }
    let target = SPARSITY_FRACTION * total;
    let mut acc = 0.0;
    for (count, j) in descending_order(w).into_iter().enumerate() {
        acc += w[j];
        if acc >= target {
            return Ok(count + 1);
        }
    }
    // Rounding in the running sum can leave it a hair below the target.
    Ok(w.len())
}

fn membership_counts(sets: &[Vec<usize>], m: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; m];
    for set in sets {
        let mut seen = vec![false; m];
        for &j in set {
            if j >= m {
                return Err(Error::Config(format!("prototype index {j} out of range for m = {m}")));
            }
            if seen[j] {
                return Err(Error::Config(format!("prototype {j} repeated in a top set")));
            }
            seen[j] = true;
            counts[j] += 1;
        }
    }
    Ok(counts)
}

/// Number of prototypes present in the top sets of at least
/// `threshold * n` samples.
pub fn diversity(sets: &[Vec<usize>], m: usize, threshold: f64) -> Result<usize> {
    if sets.is_empty() {
        return Err(Error::Empty("top contribution sets"));
    }
    let n = sets.len() as f64;
    let counts = membership_counts(sets, m)?;
    Ok(counts.iter().filter(|&&c| c as f64 / n >= threshold).count())
}

/// Share of all top-set memberships held by each prototype.
pub fn usage_histogram(sets: &[Vec<usize>], m: usize) -> Result<Vec<f64>> {
    let counts = membership_counts(sets, m)?;
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Ok(vec![0.0; m]);
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRecord {
    pub prototype: usize,
    pub label: f64,
    pub similarity: f64,
    pub importance: f64,
    pub weight: f64,
    pub fraction: f64,
    /// Latent position of the closest patch.
    pub patch_row: usize,
    pub patch_col: usize,
    /// Similarity of every latent patch, `h_z x w_z` row-major.
    pub activation: Vec<f64>,
    /// Activation bilinearly resized to the input resolution.
    #[serde(skip)]
    pub upsampled: Vec<f64>,
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub sample: usize,
    /// Reported scale.
    pub prediction: f64,
    pub label: f64,
    /// All prototypes, by descending weight then ascending index.
    pub records: Vec<PrototypeRecord>,
    pub top_k: usize,
    /// Combined weight fraction of the three leading prototypes.
    pub top3_fraction: f64,
    pub latent_grid: (usize, usize),
    pub input_grid: (usize, usize),
    /// Set when the prototypes have not been projected onto training patches.
    pub warning: Option<String>,
}

impl Explanation {
    pub fn top(&self) -> &[PrototypeRecord] {
        &self.records[..self.top_k.min(self.records.len())]
    }
}

/// Half-pixel-centered bilinear resize of an `h x w` map to `oh x ow`.
pub fn upsample_bilinear(map: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, oh, h);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, ow, w);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

pub fn explain(model: &ProtoModel, data: &SynthDataset, sample: usize, top_k: usize) -> Result<Explanation> {
    if sample >= data.len() {
        return Err(Error::Config(format!("sample {sample} out of range ({} samples)", data.len())));
    }
    let inf = model.infer(&data.batch(&[sample]))?;
    let m = model.bank.len();
    let [_, h, w] = model.backbone.latent_shape();
    let labels = model.labels();
    let sims = inf.sims.data();
    let r = importance(model.head.theta.data(), labels);
    let (weights, fractions) = contribution_weights(sims, &r)?;
    let dist = inf.distances.data();
    let mut records: Vec<PrototypeRecord> = (0..m)
        .map(|j| {
            let plane = &dist[j * h * w..(j + 1) * h * w];
            let activation: Vec<f64> = plane
                .iter()
                .map(|&d| similarity_value(d, model.similarity, model.eps, model.bank.d_max))
                .collect();
            let pos = inf.argmin[j];
            PrototypeRecord {
                prototype: j,
                label: labels[j],
                similarity: sims[j],
                importance: r[j],
                weight: weights[j],
                fraction: fractions[j],
                patch_row: pos / w,
                patch_col: pos % w,
                upsampled: upsample_bilinear(&activation, h, w, data.height, data.width),
                activation,
                provenance: model.bank.provenance[j],
            }
        })
        .collect();
    let order = descending_order(&weights);
    records = order.iter().map(|&j| records[j].clone()).collect();
    let top3_fraction = records.iter().take(3).map(|r| r.fraction).sum();
    Ok(Explanation {
        sample,
        prediction: inf.pred[0] - LABEL_OFFSET,
        label: data.labels[sample],
        records,
        top_k: top_k.min(m),
        top3_fraction,
        latent_grid: (h, w),
        input_grid: (data.height, data.width),
        warning: (!model.bank.is_projected())
            .then(|| "prototypes are not projected; provenance unavailable".to_string()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample: usize,
    pub label: f64,
    pub grade: f64,
    /// Reported scale, unclamped.
    pub prediction: f64,
    pub rounded: f64,
    pub sparsity: usize,
    pub top5: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub mae: f64,
    pub accuracy: f64,
    /// Mean over samples.
    pub sparsity: f64,
    pub diversity: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub samples: Vec<SampleRecord>,
}

impl Evaluation {
    pub const CSV_HEADER: &'static str = "sample,label,grade,prediction,rounded,sparsity,top5";

    pub fn samples_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for s in &self.samples {
            let top: Vec<String> = s.top5.iter().map(usize::to_string).collect();
            out.push_str(&format!(
                "{},{:e},{},{:e},{},{},{}\n",
                s.sample,
                s.label,
                s.grade,
                s.prediction,
                s.rounded,
                s.sparsity,
                top.join(" ")
            ));
        }
        out
    }
}

/// Rounded class after clamping into `[0, max_grade]`.
pub fn rounded_grade(prediction: f64, max_grade: f64) -> f64 {
    prediction.clamp(0.0, max_grade).round()
}

/// Metrics from reported-scale predictions and per-sample contribution weights.
pub fn metrics_from(
    predictions: &[f64],
    labels: &[f64],
    grades: &[f64],
    weights: &[Vec<f64>],
    m: usize,
) -> Result<Evaluation> {
    let n = predictions.len();
    if n == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    if labels.len() != n || grades.len() != n || weights.len() != n {
        return Err(Error::Dimension {
            what: "evaluation inputs",
            expected: n.to_string(),
            actual: format!("{} / {} / {}", labels.len(), grades.len(), weights.len()),
        });
    }
    let max_grade = grades.iter().copied().fold(0.0, f64::max);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        samples.push(SampleRecord {
            sample: i,
            label: labels[i],
            grade: grades[i],
            prediction: predictions[i],
            rounded: rounded_grade(predictions[i], max_grade),
            sparsity: sparsity(&weights[i])?,
            top5: top_k_indices(&weights[i], TOP_SET.min(m)),
        });
    }
    let nf = n as f64;
    let sets: Vec<Vec<usize>> = samples.iter().map(|s| s.top5.clone()).collect();
    let metrics = Metrics {
        n,
        mae: samples.iter().map(|s| (s.prediction - s.label).abs()).sum::<f64>() / nf,
        accuracy: samples.iter().filter(|s| s.rounded == s.grade).count() as f64 / nf,
        sparsity: samples.iter().map(|s| s.sparsity as f64).sum::<f64>() / nf,
        diversity: diversity(&sets, m, DIVERSITY_THRESHOLD)?,
    };
    Ok(Evaluation { metrics, samples })
}

/// Contribution weights `w = s * r` for every sample, plus the raw
/// predictions on the internal scale.
pub fn dataset_weights(model: &ProtoModel, data: &SynthDataset) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let m = model.bank.len();
    let r = importance(model.head.theta.data(), model.labels());
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut preds = Vec::with_capacity(data.len());
    let mut weights = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let inf = model.infer(&data.batch(chunk))?;
        preds.extend_from_slice(&inf.pred);
        for row in inf.sims.data().chunks(m) {
            weights.push(row.iter().zip(&r).map(|(s, r)| s * r).collect());
        }
    }
    Ok((preds, weights))
}

pub fn evaluate(model: &ProtoModel, data: &SynthDataset) -> Result<Evaluation> {
    let (raw, weights) = dataset_weights(model, data)?;
    let preds = unshift_labels(&raw, LABEL_OFFSET);
    metrics_from(&preds, &data.labels, &data.grades, &weights, model.bank.len())
}

/// Two leading principal axes of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Two unit axes, each of the input dimension.
    pub axes: [Vec<f64>; 2],
    /// Variance along each axis divided by the total variance.
    pub explained: [f64; 2],
    pub coords: Vec<[f64; 2]>,
}

impl Pca {
    pub fn project(&self, p: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (a, axis) in self.axes.iter().enumerate() {
            out[a] = p.iter().zip(&self.mean).zip(axis).map(|((x, mu), v)| (x - mu) * v).sum();
        }
        out
    }
}

/// PCA through the eigendecomposition of the covariance matrix. Each axis
/// is signed so that its largest-magnitude entry is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Pca> {
    let n = points.len();
    if n < 2 {
        return Err(Error::DegenerateSpread(format!("{n} points")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Config("points have differing dimensions".into()));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for p in points {
        for a in 0..d {
            let da = p[a] - mean[a];
            for b in 0..d {
                cov[(a, b)] += da * (p[b] - mean[b]);
            }
        }
    }
    cov /= (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let order = descending_order(eig.eigenvalues.as_slice());
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let lead = eig.eigenvalues[order[0]];
    if d < 2 || !(lead > 0.0) || eig.eigenvalues[order[1]] <= lead * 1e-12 {
        return Err(Error::DegenerateSpread("point cloud has rank < 2".into()));
    }
    let axis = |k: usize| -> Vec<f64> {
        let col: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let big = col
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > col[best].abs() { i } else { best });
        if col[big] < 0.0 {
            col.iter().map(|v| -v).collect()
        } else {
            col
        }
    };
    let mut pca = Pca {
        mean,
        axes: [axis(0), axis(1)],
        explained: [eig.eigenvalues[order[0]] / total, eig.eigenvalues[order[1]] / total],
        coords: Vec::new(),
    };
    pca.coords = points.iter().map(|p| pca.project(p)).collect();
    Ok(pca)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointKind {
    Sample,
    Prototype,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    /// Sample index or prototype index, depending on `kind`.
    pub id: usize,
    pub kind: PointKind,
    pub x: f64,
    pub y: f64,
    /// Reported scale for samples, prototype label for prototypes.
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub points: Vec<EmbeddingPoint>,
    pub explained_variance: [f64; 2],
    /// Share of top-5 memberships held by each prototype over `data`.
    pub usage: Vec<f64>,
}

impl EmbeddingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,kind,x,y,label\n");
        for p in &self.points {
            let kind = match p.kind {
                PointKind::Sample => "sample",
                PointKind::Prototype => "prototype",
            };
            out.push_str(&format!("{},{},{:e},{:e},{:e}\n", p.id, kind, p.x, p.y, p.label));
        }
        out
    }
}

/// Fits a 2-D PCA to the prototypes and, per sample, the `per_sample`
/// latent patches closest to any prototype.
pub fn pca_embed(model: &ProtoModel, data: &SynthDataset, per_sample: usize) -> Result<EmbeddingReport> {
    let [c, h, w] = model.backbone.latent_shape();
    let hw = h * w;
    let m = model.bank.len();
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut meta: Vec<(usize, PointKind, f64)> = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let inf = model.infer(&data.batch(chunk))?;
        let z = inf.latent.data();
        let dist = inf.distances.data();
        for (b, &sample) in chunk.iter().enumerate() {
            let nearest: Vec<f64> = (0..hw)
                .map(|q| (0..m).map(|j| dist[(b * m + j) * hw + q]).fold(f64::INFINITY, f64::min))
                .collect();
            for q in smallest_k(&nearest, per_sample) {
                points.push((0..c).map(|ch| z[(b * c + ch) * hw + q]).collect());
                meta.push((sample, PointKind::Sample, data.labels[sample]));
            }
        }
    }
    for j in 0..m {
        points.push(model.bank.vector(j).to_vec());
        meta.push((j, PointKind::Prototype, model.labels()[j]));
    }
    let pca = pca_2d(&points)?;
    let (_, weights) = dataset_weights(model, data)?;
    let sets: Vec<Vec<usize>> = weights.iter().map(|w| top_k_indices(w, TOP_SET.min(m))).collect();
    Ok(EmbeddingReport {
        points: meta
            .into_iter()
            .zip(&pca.coords)
            .map(|((id, kind, label), xy)| EmbeddingPoint {
                id,
                kind,
                x: xy[0],
                y: xy[1],
                label,
            })
            .collect(),
        explained_variance: pca.explained,
        usage: usage_histogram(&sets, m)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity(&[0.0, 3.0, 0.0]).unwrap(), 1);
        assert_eq!(sparsity(&[1.0; 50]).unwrap(), 40);
        assert_eq!(sparsity(&[0.5, 0.3, 0.1, 0.1]).unwrap(), 2);
        assert!(sparsity(&[0.0, 0.0]).is_err());
        assert!(sparsity(&[-1.0, 2.0]).is_err());
    }

    #[test]
    fn diversity_examples() {
        let shared = vec![vec![0, 1, 2, 3, 4]; 20];
        assert_eq!(diversity(&shared, 10, 0.01).unwrap(), 5);
        let mut sets = vec![vec![0, 1, 2, 3, 4]; 99];
        sets.push(vec![5, 1, 2, 3, 4]);
        assert_eq!(diversity(&sets, 10, 0.01).unwrap(), 6);
        assert!(diversity(&[], 10, 0.01).is_err());
        assert!(diversity(&[vec![0, 0]], 10, 0.01).is_err());
    }

    #[test]
    fn usage_examples() {
        let h = usage_histogram(&vec![vec![0, 1, 2, 3, 4]; 4], 8).unwrap();
        assert_eq!(&h[..5], &[0.2; 5]);
        assert_eq!(&h[5..], &[0.0; 3]);
        // Hand tally: prototype 0 in 3 sets, 1 in 2, 2 in 1 (6 memberships).
        let h = usage_histogram(&[vec![0, 1], vec![0, 2], vec![0, 1]], 3).unwrap();
        assert_eq!(h, vec![0.5, 2.0 / 6.0, 1.0 / 6.0]);
    }

    #[test]
    fn rounding_band() {
        assert_eq!(rounded_grade(2.4, 4.0), 2.0);
        assert_eq!(rounded_grade(-0.7, 4.0), 0.0);
        assert_eq!(rounded_grade(5.6, 4.0), 4.0);
        let w = vec![vec![1.0, 2.0]; 3];
        let e = metrics_from(&[0.4, 1.4, 2.4], &[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0], &w, 2).unwrap();
        assert!((e.metrics.mae - 0.4).abs() < 1e-12);
        assert_eq!(e.metrics.accuracy, 1.0);
        let perfect = metrics_from(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0], &w, 2).unwrap();
        assert_eq!((perfect.metrics.mae, perfect.metrics.accuracy), (0.0, 1.0));
    }

    #[test]
    fn upsample_constant_and_corners() {
        assert_eq!(upsample_bilinear(&[2.0; 4], 2, 2, 5, 5), vec![2.0; 25]);
        let up = upsample_bilinear(&[0.0, 1.0, 2.0, 3.0], 2, 2, 4, 4);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[15], 3.0);
        assert!(up.iter().all(|&v| (0.0..=3.0).contains(&v)));
    }
}

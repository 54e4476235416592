//! Quantitative analysis: PCA of embedding spaces via Jacobi
//! eigendecomposition, confusion matrices with adjacency metrics, CSV
//! exports for external plotting.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Top-2 principal directions of a set of embeddings.
#[derive(Clone, Debug)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Two orthonormal rows of length `dim`.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: [f64; 2],
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as rows, both
/// sorted by descending eigenvalue.
pub fn jacobi_eigh(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if a.len() != n * n {
        return Err(Error::DataLength { expected: n * n, got: a.len() });
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let eigvals: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let eigvecs: Vec<Vec<f64>> = order
        .iter()
        .map(|&col| (0..n).map(|row| v[row * n + col]).collect())
        .collect();
    Ok((eigvals, eigvecs))
}

fn fix_sign(vec: &mut [f64]) {
    for &x in vec.iter() {
        if x.abs() > 1e-12 {
            if x < 0.0 {
                for y in vec.iter_mut() {
                    *y = -*y;
                }
            }
            return;
        }
    }
}

/// Fit a top-2 PCA on mean-centered embeddings.
///
/// Deterministic sign convention: the first nonzero component of each
/// eigenvector is positive.
pub fn pca_fit(embeddings: &[Vec<f64>]) -> Result<PcaModel> {
    if embeddings.len() < 3 {
        return Err(Error::EmptyInput("pca needs at least 3 samples"));
    }
    let dim = embeddings[0].len();
    let n = embeddings.len();
    let mut mean = vec![0.0; dim];
    for z in embeddings {
        if z.len() != dim {
            return Err(Error::DataLength { expected: dim, got: z.len() });
        }
        for (m, &x) in mean.iter_mut().zip(z.iter()) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; dim * dim];
    for z in embeddings {
        let centered: Vec<f64> = z.iter().zip(&mean).map(|(&x, &m)| x - m).collect();
        for (i, &ci) in centered.iter().enumerate() {
            if ci == 0.0 {
                continue;
            }
            let row = &mut cov[i * dim..(i + 1) * dim];
            for (r, &cj) in row.iter_mut().zip(centered.iter()) {
                *r += ci * cj;
            }
        }
    }
    let denom = (n - 1) as f64;
    for c in cov.iter_mut() {
        *c /= denom;
    }
    let (eigvals, mut eigvecs) = jacobi_eigh(&cov, dim)?;
    let mut components = Vec::with_capacity(2);
    for vec in eigvecs.iter_mut().take(2) {
        fix_sign(vec);
        components.push(vec.clone());
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance: [eigvals[0].max(0.0), eigvals[1].max(0.0)],
    })
}

/// Project embeddings onto the two principal directions.
pub fn pca_project(model: &PcaModel, embeddings: &[Vec<f64>]) -> Vec<(f64, f64)> {
    embeddings
        .iter()
        .map(|z| {
            let mut out = [0.0; 2];
            for (o, comp) in out.iter_mut().zip(&model.components) {
                *o = z
                    .iter()
                    .zip(&model.mean)
                    .zip(comp.iter())
                    .map(|((&x, &m), &c)| (x - m) * c)
                    .sum();
            }
            (out[0], out[1])
        })
        .collect()
}

/// Counts with rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
    pub labels: Vec<String>,
}

/// Confusion counts plus the headline rates.
#[derive(Clone, Debug, Serialize)]
pub struct ConfusionStats {
    pub accuracy: f64,
    /// Off-by-one errors over all errors; 1.0 when there are no errors.
    pub adjacent_error_rate: f64,
    pub total: usize,
    pub errors: usize,
}

/// Tally a confusion matrix over parallel label slices.
pub fn confusion(
    truth: &[usize],
    pred: &[usize],
    k: usize,
    labels: &[&str],
) -> Result<(ConfusionMatrix, ConfusionStats)> {
    if truth.len() != pred.len() {
        return Err(Error::ShapeMismatch {
            context: "confusion labels",
            left: vec![truth.len()],
            right: vec![pred.len()],
        });
    }
    let mut counts = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(pred.iter()) {
        if t >= k {
            return Err(Error::LabelOutOfRange { label: t, classes: k });
        }
        if p >= k {
            return Err(Error::LabelOutOfRange { label: p, classes: k });
        }
        counts[t][p] += 1;
    }
    let total = truth.len();
    let hits: usize = (0..k).map(|i| counts[i][i]).sum();
    let errors = total - hits;
    let adjacent: usize = (0..k)
        .flat_map(|t| (0..k).map(move |p| (t, p)))
        .filter(|&(t, p)| t.abs_diff(p) == 1)
        .map(|(t, p)| counts[t][p])
        .sum();
    let stats = ConfusionStats {
        accuracy: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        adjacent_error_rate: if errors == 0 { 1.0 } else { adjacent as f64 / errors as f64 },
        total,
        errors,
    };
    let labels = labels.iter().map(|s| s.to_string()).collect();
    Ok((ConfusionMatrix { counts, labels }, stats))
}

/// Per-class centroids of embeddings; `None` for absent classes.
pub fn class_centroids(embeddings: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Option<Vec<f64>>> {
    let dim = embeddings.first().map(|z| z.len()).unwrap_or(0);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (z, &c) in embeddings.iter().zip(labels.iter()) {
        counts[c] += 1;
        for (s, &x) in sums[c].iter_mut().zip(z.iter()) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(mut s, c)| {
            if c == 0 {
                None
            } else {
                for x in s.iter_mut() {
                    *x /= c as f64;
                }
                Some(s)
            }
        })
        .collect()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One row of `pca_points.csv`.
#[derive(Clone, Debug)]
pub struct PcaPoint {
    pub x: f64,
    pub y: f64,
    pub class: usize,
    pub role: String,
    pub step: i64,
}

pub fn write_pca_points_csv(path: &Path, points: &[PcaPoint]) -> Result<()> {
    let mut text = String::from("x,y,class,role,step\n");
    for p in points {
        text.push_str(&format!("{},{},{},{},{}\n", p.x, p.y, p.class, p.role, p.step));
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_confusion_csv(path: &Path, matrix: &ConfusionMatrix) -> Result<()> {
    fs::write(path, confusion_to_csv(matrix)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn confusion_to_csv(matrix: &ConfusionMatrix) -> String {
    let mut text = String::new();
    for row in &matrix.counts {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    text
}

pub fn read_confusion_csv(path: &Path, labels: &[&str]) -> Result<ConfusionMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut counts = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<usize>, _> =
            line.split(',').map(|c| c.trim().parse::<usize>()).collect();
        counts.push(row.map_err(|e| Error::parse(path.display().to_string(), e))?);
    }
    Ok(ConfusionMatrix { counts, labels: labels.iter().map(|s| s.to_string()).collect() })
}

/// `metrics.csv`: one `name,value` row per metric.
pub fn write_metrics_csv(path: &Path, metrics: &[(String, f64)]) -> Result<()> {
    let mut text = String::from("metric,value\n");
    for (name, value) in metrics {
        text.push_str(&format!("{name},{value}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn components_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<Vec<f64>> =
            (0..40).map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let model = pca_fit(&data).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        assert!((dot(&model.components[0], &model.components[0]) - 1.0).abs() < 1e-9);
        assert!((dot(&model.components[1], &model.components[1]) - 1.0).abs() < 1e-9);
        assert!(dot(&model.components[0], &model.components[1]).abs() < 1e-9);
        assert!(model.explained_variance[0] >= model.explained_variance[1]);
        assert!(model.explained_variance[1] >= 0.0);
    }

    #[test]
    fn collinear_data_explained_by_first_component() {
        let dir: Vec<f64> = (0..8).map(|i| ((i + 1) as f64).sin()).collect();
        let data: Vec<Vec<f64>> =
            (0..20).map(|i| dir.iter().map(|&d| d * i as f64).collect()).collect();
        let model = pca_fit(&data).unwrap();
        let total = model.explained_variance[0] + model.explained_variance[1];
        assert!(model.explained_variance[0] / total > 0.999);
    }

    #[test]
    fn rank_two_data_projects_isometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let data: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let a: f64 = rng.gen_range(-2.0..2.0);
                let b: f64 = rng.gen_range(-2.0..2.0);
                u.iter().zip(&v).map(|(&x, &y)| a * x + b * y).collect()
            })
            .collect();
        let model = pca_fit(&data).unwrap();
        let proj = pca_project(&model, &data);
        for i in 0..data.len() {
            for j in i + 1..data.len() {
                let d_full = euclidean(&data[i], &data[j]);
                let d2 = ((proj[i].0 - proj[j].0).powi(2) + (proj[i].1 - proj[j].1).powi(2)).sqrt();
                assert!((d_full - d2).abs() < 1e-9, "pair ({i},{j}): {d_full} vs {d2}");
            }
        }
    }

    #[test]
    fn projecting_the_mean_gives_origin_and_projection_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<Vec<f64>> =
            (0..25).map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let model = pca_fit(&data).unwrap();
        let origin = pca_project(&model, &[model.mean.clone()])[0];
        assert!(origin.0.abs() < 1e-12 && origin.1.abs() < 1e-12);

        let a: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
        let b: Vec<f64> = (0..10).map(|i| (i as f64).cos()).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let zero = vec![0.0; 10];
        let p = pca_project(&model, &[a, b, sum, zero]);
        assert!((p[2].0 - (p[0].0 + p[1].0 - p[3].0)).abs() < 1e-9);
        assert!((p[2].1 - (p[0].1 + p[1].1 - p[3].1)).abs() < 1e-9);
    }

    #[test]
    fn fewer_than_three_samples_rejected() {
        assert!(pca_fit(&[vec![1.0], vec![2.0]]).is_err());
    }

    /// Power iteration with deflation: an independent eigensolver used as
    /// the oracle for the Jacobi path.
    fn power_iteration_top2(cov: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let matvec = |m: &[f64], x: &[f64]| -> Vec<f64> {
            (0..n)
                .map(|i| m[i * n..(i + 1) * n].iter().zip(x).map(|(&a, &b)| a * b).sum())
                .collect()
        };
        let mut deflated = cov.to_vec();
        let mut vals = Vec::new();
        let mut vecs = Vec::new();
        for _ in 0..2 {
            let mut x: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.7).sin()).collect();
            let mut lambda = 0.0;
            for _ in 0..20000 {
                let y = matvec(&deflated, &x);
                let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                x = y.iter().map(|v| v / norm).collect();
                lambda = norm;
            }
            for i in 0..n {
                for j in 0..n {
                    deflated[i * n + j] -= lambda * x[i] * x[j];
                }
            }
            vals.push(lambda);
            vecs.push(x);
        }
        (vals, vecs)
    }

    #[test]
    fn jacobi_matches_power_iteration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Rank-10 data in a 128-dim space.
        let basis: Vec<Vec<f64>> =
            (0..10).map(|_| (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let data: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let coef: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (0..128)
                    .map(|d| basis.iter().zip(&coef).map(|(b, &c)| b[d] * c).sum())
                    .collect()
            })
            .collect();
        let model = pca_fit(&data).unwrap();

        // Oracle covariance, identical construction.
        let n = 128;
        let mut mean = vec![0.0; n];
        for z in &data {
            for (m, &x) in mean.iter_mut().zip(z) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= data.len() as f64;
        }
        let mut cov = vec![0.0; n * n];
        for z in &data {
            let c: Vec<f64> = z.iter().zip(&mean).map(|(&x, &m)| x - m).collect();
            for i in 0..n {
                for j in 0..n {
                    cov[i * n + j] += c[i] * c[j];
                }
            }
        }
        for c in cov.iter_mut() {
            *c /= (data.len() - 1) as f64;
        }
        let (vals, vecs) = power_iteration_top2(&cov, n);
        for k in 0..2 {
            assert!(
                (model.explained_variance[k] - vals[k]).abs() < 1e-8 * vals[0],
                "eigenvalue {k}"
            );
            // Eigenvectors agree up to sign.
            let dot: f64 =
                model.components[k].iter().zip(&vecs[k]).map(|(a, b)| a * b).sum();
            let diff: f64 = model.components[k]
                .iter()
                .zip(&vecs[k])
                .map(|(a, b)| (a - b * dot.signum()).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(diff < 1e-8, "eigenvector {k} differs by {diff}");
        }
    }

    #[test]
    fn confusion_perfect_predictions() {
        let truth = vec![0, 1, 2, 3, 4, 2, 1];
        let (m, stats) = confusion(&truth, &truth, 5, &["a", "b", "c", "d", "e"]).unwrap();
        assert_eq!(stats.accuracy, 1.0);
        assert_eq!(stats.adjacent_error_rate, 1.0);
        for (i, row) in m.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                assert_eq!(c > 0, i == j && truth.contains(&i));
            }
        }
        let row_sums: Vec<usize> = m.counts.iter().map(|r| r.iter().sum()).collect();
        for (i, &s) in row_sums.iter().enumerate() {
            assert_eq!(s, truth.iter().filter(|&&t| t == i).count());
        }
    }

    #[test]
    fn all_off_by_one_errors_are_adjacent() {
        let truth = vec![0, 1, 2, 3];
        let pred = vec![1, 0, 3, 2];
        let (_, stats) = confusion(&truth, &pred, 4, &["a", "b", "c", "d"]).unwrap();
        assert_eq!(stats.accuracy, 0.0);
        assert_eq!(stats.adjacent_error_rate, 1.0);
        let far = vec![2, 3, 0, 1];
        let (_, stats) = confusion(&truth, &far, 4, &["a", "b", "c", "d"]).unwrap();
        assert_eq!(stats.adjacent_error_rate, 0.0);
    }

    #[test]
    fn out_of_range_label_rejected() {
        assert!(confusion(&[5], &[0], 5, &[]).is_err());
        assert!(confusion(&[0], &[5], 5, &[]).is_err());
    }

    #[test]
    fn confusion_csv_round_trips_bit_for_bit() {
        let truth = vec![0, 1, 2, 2, 1, 0, 2];
        let pred = vec![0, 2, 2, 1, 1, 1, 2];
        let (m, _) = confusion(&truth, &pred, 3, &["x", "y", "z"]).unwrap();
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("confusion.csv");
        write_confusion_csv(&path, &m).unwrap();
        let back = read_confusion_csv(&path, &["x", "y", "z"]).unwrap();
        assert_eq!(back, m);
        assert_eq!(confusion_to_csv(&back), fs::read_to_string(&path).unwrap());
    }
}

//! Grouping of similar images: handcrafted grid features, PCA down to a few
//! dimensions with rows scaled to unit length, then k-means.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::Dataset;
use crate::imgcore::Image;

pub const GRID: usize = 8;
pub const CELL_FEATURES: usize = 5;
pub const FEATURE_DIM: usize = GRID * GRID * CELL_FEATURES;
pub const EDGE_THRESHOLD: f32 = 0.1;
pub const DEFAULT_OUT_DIM: usize = 10;
pub const DEFAULT_K: usize = 30;
pub const DEFAULT_MAX_ITER: usize = 300;

/// Per cell of an 8x8 grid, row-major: mean R, mean G, mean B, luminance
/// standard deviation, and the fraction of pixels whose forward-difference
/// gradient magnitude exceeds [`EDGE_THRESHOLD`].
pub fn extract_features(img: &Image) -> Result<Vec<f64>> {
    let (w, h) = img.dims();
    if w == 0 || h == 0 {
        return Err(Error::invalid(
            "cannot extract features from an empty image",
        ));
    }
    let lum = img.luminance();
    let mut sums = [[0.0f64; 7]; GRID * GRID]; // r g b l l² edges count
    for y in 0..h {
        let cy = y * GRID / h;
        for x in 0..w {
            let cx = x * GRID / w;
            let l = lum[y * w + x];
            let gx = if x + 1 < w {
                lum[y * w + x + 1] - l
            } else {
                0.0
            };
            let gy = if y + 1 < h {
                lum[(y + 1) * w + x] - l
            } else {
                0.0
            };
            let edge = (gx * gx + gy * gy).sqrt() > EDGE_THRESHOLD;
            let px = img.pixel(x, y);
            let s = &mut sums[cy * GRID + cx];
            s[0] += px[0] as f64;
            s[1] += px[1] as f64;
            s[2] += px[2] as f64;
            s[3] += l as f64;
            s[4] += (l as f64) * (l as f64);
            s[5] += edge as u8 as f64;
            s[6] += 1.0;
        }
    }
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for s in &sums {
        let n = s[6];
        if n == 0.0 {
            out.extend([0.0; CELL_FEATURES]);
            continue;
        }
        let mean_l = s[3] / n;
        let var = (s[4] / n - mean_l * mean_l).max(0.0);
        out.extend([s[0] / n, s[1] / n, s[2] / n, var.sqrt(), s[5] / n]);
    }
    Ok(out)
}

/// One feature row per image, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub rows: DMatrix<f64>,
}

impl FeatureMatrix {
    pub fn new(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::invalid(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.len()
            )));
        }
        let d = rows.first().map_or(0, Vec::len);
        let mut seen = HashSet::new();
        for (id, r) in ids.iter().zip(&rows) {
            if r.len() != d {
                return Err(Error::invalid(format!(
                    "row `{id}` has {} features, expected {d}",
                    r.len()
                )));
            }
            if let Some(v) = r.iter().find(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "row `{id}` has non-finite feature {v}"
                )));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("duplicate image id `{id}`")));
            }
        }
        let rows = DMatrix::from_row_iterator(rows.len(), d, rows.into_iter().flatten());
        Ok(Self { ids, rows })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let rows = ds
            .samples
            .par_iter()
            .map(|s| extract_features(&s.image))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ds.ids().map(str::to_owned).collect(), rows)
    }

    /// Reads `image_id,f0,...,f{d-1}`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let d = header.len().saturating_sub(1);
        let expected = (0..d).map(|i| format!("f{i}"));
        if header.get(0) != Some("image_id") || !header.iter().skip(1).eq(expected) {
            return Err(Error::Format {
                kind: "features CSV",
                path: path.to_path_buf(),
                offset: 0,
                message: "header must be `image_id,f0,...,f{d-1}`".into(),
            });
        }
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let offset = rec.position().map_or(0, |p| p.byte());
            let bad = |message: String| Error::Format {
                kind: "features CSV",
                path: path.to_path_buf(),
                offset,
                message,
            };
            ids.push(rec.get(0).unwrap_or_default().to_owned());
            let row = rec
                .iter()
                .skip(1)
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| bad(format!("invalid number `{t}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::new(ids, rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["image_id".to_owned()];
        header.extend((0..self.dim()).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.rows.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Principal axes of a feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub mean: DVector<f64>,
    /// `d x out_dim`, columns by decreasing variance. Zero columns pad a
    /// rank-deficient input.
    pub components: DMatrix<f64>,
    pub explained_variance: Vec<f64>,
}

impl PcaBasis {
    pub fn fit(x: &DMatrix<f64>, out_dim: usize) -> Result<Self> {
        let (n, d) = x.shape();
        if n <= out_dim {
            return Err(Error::invalid(format!(
                "need more than {out_dim} rows, got {n}"
            )));
        }
        if out_dim == 0 || out_dim > d {
            return Err(Error::invalid(format!(
                "output dimension {out_dim} not in 1..={d}"
            )));
        }
        let mean = x.row_mean().transpose();
        let mut centred = x.clone();
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centred.transpose() * &centred / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });

        let top = eig.eigenvalues[order[0]].max(0.0);
        let tol = top * 1e-10 * d as f64;
        let mut components = DMatrix::zeros(d, out_dim);
        let mut explained_variance = Vec::with_capacity(out_dim);
        let mut rank = 0;
        for (j, &i) in order.iter().take(out_dim).enumerate() {
            let lambda = eig.eigenvalues[i];
            if lambda <= tol {
                explained_variance.push(0.0);
                continue;
            }
            rank += 1;
            let mut v = eig.eigenvectors.column(i).into_owned();
            // sign: largest-magnitude entry positive, earliest on ties
            let pivot =
                v.iter().enumerate().fold(
                    0,
                    |best, (k, e)| {
                        if e.abs() > v[best].abs() {
                            k
                        } else {
                            best
                        }
                    },
                );
            if v[pivot] < 0.0 {
                v.neg_mut();
            }
            components.set_column(j, &v);
            explained_variance.push(lambda);
        }
        if rank < out_dim {
            log::warn!("feature matrix has rank {rank} < {out_dim}; padding with zero directions");
        }
        Ok(Self {
            mean,
            components,
            explained_variance,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.components.ncols()
    }

    /// Scores of each row on the principal axes (not normalised).
    pub fn project(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centred = x.clone();
        for mut row in centred.row_iter_mut() {
            row -= self.mean.transpose();
        }
        centred * &self.components
    }

    pub fn reconstruct(&self, scores: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = scores * self.components.transpose();
        for mut row in x.row_iter_mut() {
            row += self.mean.transpose();
        }
        x
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.explained_variance.iter().sum();
        self.explained_variance
            .iter()
            .map(|v| if total > 0.0 { v / total } else { 0.0 })
            .collect()
    }
}

/// Scales every nonzero row to unit Euclidean norm.
pub fn normalize_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
}

/// PCA to `out_dim` columns followed by row normalisation.
pub fn reduce(features: &FeatureMatrix, out_dim: usize) -> Result<(PcaBasis, DMatrix<f64>)> {
    let basis = PcaBasis::fit(&features.rows, out_dim)?;
    let mut reduced = basis.project(&features.rows);
    normalize_rows(&mut reduced);
    Ok((basis, reduced))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Keep centroids on the unit sphere.
    pub cosine: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
            cosine: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centroids: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: nalgebra::DVectorView<'_, f64>, b: nalgebra::DVectorView<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per row (lowest index on ties) and the squared distance.
fn assign(x: &DMatrix<f64>, centroids: &DMatrix<f64>) -> Vec<(usize, f64)> {
    (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let row = x.row(i).transpose();
            let mut best = (0, f64::INFINITY);
            for c in 0..centroids.nrows() {
                let d = sq_dist(row.as_view(), centroids.row(c).transpose().as_view());
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect()
}

fn plus_plus_init(x: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = x.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| {
            sq_dist(
                x.row(i).transpose().as_view(),
                x.row(chosen[0]).transpose().as_view(),
            )
        })
        .collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every point coincides with a centre already
            Err(_) => (0..n).find(|i| !chosen.contains(i)).unwrap_or(0),
        };
        chosen.push(next);
        let c = x.row(next).transpose();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i).transpose().as_view(), c.as_view()));
        }
    }
    DMatrix::from_fn(k, x.ncols(), |r, c| x[(chosen[r], c)])
}

pub fn kmeans(x: &DMatrix<f64>, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let (n, d) = x.shape();
    if cfg.k == 0 || n < cfg.k {
        return Err(Error::invalid(format!(
            "cannot form {} clusters from {n} rows",
            cfg.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = plus_plus_init(x, cfg.k, &mut rng);
    if cfg.cosine {
        normalize_rows(&mut centroids);
    }
    let mut current = assign(x, &centroids);
    let mut history = vec![current.iter().map(|a| a.1).sum()];
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let mut sums = DMatrix::<f64>::zeros(cfg.k, d);
        let mut counts = vec![0usize; cfg.k];
        for (i, &(c, _)) in current.iter().enumerate() {
            let mut row = sums.row_mut(c);
            row += x.row(i);
            counts[c] += 1;
        }
        // empty clusters take over the points farthest from their centroids
        let mut by_distance: Vec<usize> = (0..n).collect();
        by_distance.sort_by(|&a, &b| current[b].1.total_cmp(&current[a].1).then(a.cmp(&b)));
        let mut donors = by_distance.into_iter();
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mut row = sums.row_mut(c);
                row /= count as f64;
            } else if let Some(p) = donors.next() {
                sums.set_row(c, &x.row(p));
            }
        }
        centroids = sums;
        if cfg.cosine {
            normalize_rows(&mut centroids);
        }
        let next = assign(x, &centroids);
        history.push(next.iter().map(|a| a.1).sum());
        let unchanged = next.iter().zip(&current).all(|(a, b)| a.0 == b.0);
        current = next;
        if unchanged {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        labels: current.iter().map(|a| a.0).collect(),
        inertia: *history.last().expect("at least one assignment"),
        inertia_history: history,
        iterations,
    })
}

/// Everything needed to place new images into the clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub basis: PcaBasis,
    pub kmeans: KMeansResult,
    pub ids: Vec<String>,
}

impl ClusterModel {
    pub fn fit(features: &FeatureMatrix, out_dim: usize, cfg: &KMeansConfig) -> Result<Self> {
        let (basis, reduced) = reduce(features, out_dim)?;
        let kmeans = kmeans(&reduced, cfg)?;
        Ok(Self {
            basis,
            kmeans,
            ids: features.ids.clone(),
        })
    }

    pub fn assignments(&self) -> impl Iterator<Item = (&str, usize)> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.kmeans.labels.iter().copied())
    }
}

/// Writes `image_id,cluster_id`.
pub fn write_assignments<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a str, usize)>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "cluster_id"])?;
    for (id, c) in rows {
        w.serialize((id, c))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_assignments(path: &Path) -> Result<Vec<(String, usize)>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != ["image_id", "cluster_id"] {
        return Err(Error::Format {
            kind: "assignment CSV",
            path: path.to_path_buf(),
            offset: 0,
            message: "header must be `image_id,cluster_id`".into(),
        });
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn f(v: &[f64], cell: usize, k: usize) -> f64 {
        v[cell * CELL_FEATURES + k]
    }

    #[test]
    fn constant_images() {
        let black = extract_features(&Image::filled(16, 16, [0.0; 3])).unwrap();
        assert_eq!(black.len(), 320);
        assert!(black.iter().all(|&v| v == 0.0));
        let white = extract_features(&Image::filled(16, 16, [1.0; 3])).unwrap();
        for c in 0..64 {
            assert_eq!(
                [f(&white, c, 0), f(&white, c, 1), f(&white, c, 2)],
                [1.0; 3]
            );
            assert_eq!(f(&white, c, 3), 0.0);
            assert_eq!(f(&white, c, 4), 0.0);
        }
    }

    #[test]
    fn vertical_split_edges_only_at_the_boundary_column() {
        let mut data = Vec::new();
        for _y in 0..16 {
            for x in 0..16 {
                let v = if x < 8 { 0.0 } else { 1.0 };
                data.extend([v; 3]);
            }
        }
        let v = extract_features(&Image::new(16, 16, data).unwrap()).unwrap();
        // forward difference fires at x = 7, which is in grid column 3;
        // one of the two columns in each such cell is an edge
        for cy in 0..8 {
            for cx in 0..8 {
                let e = f(&v, cy * 8 + cx, 4);
                if cx == 3 {
                    assert_eq!(e, 0.5);
                } else {
                    assert_eq!(e, 0.0);
                }
            }
        }
    }

    fn gaussian(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn plane_data_reconstructs_exactly() {
        let coeffs = gaussian(40, 2, 1);
        let dirs = gaussian(2, 12, 2);
        let offset = DMatrix::from_fn(40, 12, |_, c| c as f64);
        let x = &coeffs * &dirs + offset;
        let basis = PcaBasis::fit(&x, 2).unwrap();
        let back = basis.reconstruct(&basis.project(&x));
        assert!((back - &x).norm() / x.norm() < 1e-10);
    }

    #[test]
    fn isotropic_variance_is_spread_evenly() {
        let x = gaussian(2000, 10, 3);
        let basis = PcaBasis::fit(&x, 10).unwrap();
        for r in basis.explained_variance_ratio() {
            assert!((r - 0.1).abs() <= 0.02, "{r}");
        }
        let ev = &basis.explained_variance;
        assert!(ev.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rank_deficient_input_is_padded() {
        let coeffs = gaussian(30, 2, 4);
        let x = &coeffs * gaussian(2, 12, 5);
        let basis = PcaBasis::fit(&x, 4).unwrap();
        assert_eq!(basis.explained_variance[2..], [0.0, 0.0]);
        assert_eq!(basis.components.column(3).norm(), 0.0);
        assert!(PcaBasis::fit(&x, 30).is_err());
    }

    #[test]
    fn duplicated_rows_reduce_identically_and_are_unit_length() {
        let mut rows: Vec<Vec<f64>> = (0..15)
            .map(|i| (0..6).map(|j| ((i * 7 + j * 3) % 11) as f64).collect())
            .collect();
        rows.push(rows[3].clone());
        let ids = (0..16).map(|i| format!("i{i}")).collect();
        let fm = FeatureMatrix::new(ids, rows).unwrap();
        let (_, red) = reduce(&fm, 3).unwrap();
        assert_eq!(red.row(3), red.row(15));
        for r in red.row_iter() {
            assert!((r.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_blobs_are_recovered() {
        let noise = gaussian(100, 2, 6) * 0.1;
        let x = DMatrix::from_fn(100, 2, |r, c| {
            noise[(r, c)] + if r < 50 { 0.0 } else { 10.0 * (c as f64 + 1.0) }
        });
        let res = kmeans(
            &x,
            &KMeansConfig {
                k: 2,
                cosine: false,
                ..Default::default()
            },
        )
        .unwrap();
        let first = res.labels[0];
        assert!(res.labels[..50].iter().all(|&l| l == first));
        assert!(res.labels[50..].iter().all(|&l| l != first));
    }

    #[test]
    fn k_one_gives_the_mean_and_k_n_gives_zero_inertia() {
        let x = gaussian(12, 3, 7);
        let one = kmeans(
            &x,
            &KMeansConfig {
                k: 1,
                cosine: false,
                ..Default::default()
            },
        )
        .unwrap();
        let mean = x.row_mean();
        assert!((one.centroids.row(0) - mean).norm() < 1e-12);
        let all = kmeans(
            &x,
            &KMeansConfig {
                k: 12,
                cosine: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(all.inertia, 0.0);
        assert!(kmeans(
            &x,
            &KMeansConfig {
                k: 13,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn inertia_monotone_nearest_assignment_and_determinism() {
        let mut x = gaussian(300, 10, 8);
        normalize_rows(&mut x);
        for cosine in [false, true] {
            let cfg = KMeansConfig {
                k: 8,
                seed: 3,
                cosine,
                ..Default::default()
            };
            let res = kmeans(&x, &cfg).unwrap();
            assert!(
                res.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-12),
                "{:?}",
                res.inertia_history
            );
            let check = assign(&x, &res.centroids);
            assert_eq!(check.iter().map(|a| a.0).collect::<Vec<_>>(), res.labels);
            if cosine {
                for r in res.centroids.row_iter() {
                    assert!((r.norm() - 1.0).abs() < 1e-12);
                }
            }
            assert_eq!(res, kmeans(&x, &cfg).unwrap());
        }
    }

    #[test]
    fn csv_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let fm = FeatureMatrix::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.1, 2.0], vec![-3.5, 1e-9]],
        )
        .unwrap();
        let p = dir.path().join("f.csv");
        fm.write_csv(&p).unwrap();
        assert_eq!(FeatureMatrix::read_csv(&p).unwrap(), fm);
        std::fs::write(&p, "image_id,f0\na,1\nb,x\n").unwrap();
        assert!(matches!(
            FeatureMatrix::read_csv(&p),
            Err(Error::Format { offset: 16, .. })
        ));
        std::fs::write(&p, "id,f0\na,1\n").unwrap();
        assert!(FeatureMatrix::read_csv(&p).is_err());

        let a = dir.path().join("a.csv");
        write_assignments(&a, [("x", 2), ("y", 0)]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&a).unwrap(),
            "image_id,cluster_id\nx,2\ny,0\n"
        );
        assert_eq!(
            read_assignments(&a).unwrap(),
            vec![("x".to_owned(), 2), ("y".to_owned(), 0)]
        );
    }
}

//! Principal-component rendering of patch features.
//!
//! Features are mean-centred and the leading eigenvectors of the sample
//! covariance are taken as components. When there are fewer patches than
//! feature dimensions the smaller Gram matrix is diagonalized instead and its
//! eigenvectors mapped back. Each component is signed so that its entry of
//! largest magnitude is positive.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use crate::error::{Error, Result};
use crate::resample;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureProjection {
    /// `k × D`, orthonormal rows.
    pub components: Array2<f64>,
    /// `N × k` scores of the centred features.
    pub projected: Array2<f64>,
    /// Variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    /// Sum of variances over all feature dimensions.
    pub total_variance: f64,
}

impl FeatureProjection {
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with eigenvectors as columns.
pub fn symmetric_eigen(matrix: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = matrix.nrows();
    let mut a = matrix.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    (values, vectors)
}

/// Flip `v` so its largest-magnitude entry is positive.
fn canonical_sign(v: &mut Array1<f64>) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
}

/// Top-`k` principal components of the rows of `features` (`N × D`).
pub fn pca_project_features(features: ArrayView2<'_, f64>, k: usize) -> Result<FeatureProjection> {
    let (n, d) = features.dim();
    if n <= k {
        return Err(Error::Invalid(format!("PCA with {k} components needs more than {k} rows, got {n}")));
    }
    if k > d {
        return Err(Error::Invalid(format!("cannot take {k} components of {d}-dimensional features")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("patch features".into()));
    }
    let mean = features.mean_axis(Axis(0)).expect("non-empty");
    let centred = &features - &mean.view().insert_axis(Axis(0));
    let denom = (n - 1) as f64;
    let total_variance = centred.iter().map(|x| x * x).sum::<f64>() / denom;

    let mut components = Array2::zeros((k, d));
    let mut variances = Vec::with_capacity(k);
    if d <= n {
        let cov = centred.t().dot(&centred) / denom;
        let (vals, vecs) = symmetric_eigen(&cov);
        for i in 0..k {
            components.row_mut(i).assign(&vecs.column(i));
            variances.push(vals[i].max(0.0));
        }
    } else {
        let gram = centred.dot(&centred.t()) / denom;
        let (vals, vecs) = symmetric_eigen(&gram);
        for i in 0..k {
            let v = centred.t().dot(&vecs.column(i));
            components.row_mut(i).assign(&v);
            variances.push(vals[i].max(0.0));
        }
    }
    orthonormalize(&mut components);
    for mut row in components.rows_mut() {
        let mut v = row.to_owned();
        canonical_sign(&mut v);
        row.assign(&v);
    }
    let projected = centred.dot(&components.t());
    Ok(FeatureProjection {
        components,
        projected,
        explained_variance: variances,
        total_variance,
    })
}

/// Gram-Schmidt on the rows; degenerate rows (zero-variance directions) are
/// replaced by the first coordinate axis that keeps the set independent.
fn orthonormalize(rows: &mut Array2<f64>) {
    let (k, d) = rows.dim();
    let mut next_axis = 0;
    for i in 0..k {
        let mut v = rows.row(i).to_owned();
        loop {
            for j in 0..i {
                let u = rows.row(j).to_owned();
                let dot = v.dot(&u);
                v.scaled_add(-dot, &u);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-9 {
                v /= norm;
                break;
            }
            v = Array1::zeros(d);
            v[next_axis.min(d - 1)] = 1.0;
            next_axis += 1;
        }
        rows.row_mut(i).assign(&v);
    }
}

/// RGB map (`H × W × 3`) from the first three projected components: each
/// scaled to `[0, 255]` independently (constant ones become 128), laid out on
/// the patch grid and enlarged with nearest-neighbour sampling.
pub fn render_rgb_map(projection: &FeatureProjection, grid_shape: (usize, usize), output_size: (usize, usize)) -> Result<Array3<u8>> {
    let (rows, cols) = grid_shape;
    let (n, k) = projection.projected.dim();
    if n != rows * cols {
        return Err(Error::Invalid(format!("{n} projected patches do not fill a {rows}×{cols} grid")));
    }
    if k < 3 {
        return Err(Error::Invalid(format!("RGB rendering needs 3 components, got {k}")));
    }
    let mut grid = Array3::<u8>::zeros((rows, cols, 3));
    for ch in 0..3 {
        let col = projection.projected.column(ch);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (i, &v) in col.iter().enumerate() {
            let byte = if hi - lo <= 1e-12 * hi.abs().max(lo.abs()).max(1.0) {
                128
            } else {
                ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
            };
            grid[[i / cols, i % cols, ch]] = byte;
        }
    }
    let (oh, ow) = output_size;
    let ri = resample::nearest_indices(rows, oh);
    let ci = resample::nearest_indices(cols, ow);
    Ok(Array3::from_shape_fn((oh, ow, 3), |(i, j, c)| grid[[ri[i], ci[j], c]]))
}

/// Write an `H × W × 3` map as an 8-bit RGB PNG.
pub fn write_png(path: &Path, rgb: &Array3<u8>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (h, w, c) = rgb.dim();
    if c != 3 {
        return Err(Error::shape("RGB map", &[h, w, 3], rgb.shape()));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = encoder.write_header().map_err(to_err)?;
    let data: Vec<u8> = rgb.as_standard_layout().iter().copied().collect();
    writer.write_image_data(&data).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

/// Split an `N × rows × cols × D` tap into per-image `rows·cols × D` matrices.
pub fn patch_matrix(grid: ndarray::ArrayView3<'_, f64>) -> Array2<f64> {
    let (r, c, d) = grid.dim();
    grid.as_standard_layout()
        .into_owned()
        .into_shape_with_order((r * c, d))
        .expect("contiguous grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn jacobi_diagonalizes() {
        let m = array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 1.0]];
        let (vals, vecs) = symmetric_eigen(&m);
        let recon = vecs.dot(&Array2::from_diag(&Array1::from(vals.clone()))).dot(&vecs.t());
        for (a, b) in recon.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rank_one_explains_everything() {
        let base = array![1.0, -2.0, 0.5, 3.0];
        let f = Array2::from_shape_fn((10, 4), |(i, j)| (i as f64 - 4.5) * base[j]);
        let p = pca_project_features(f.view(), 3).unwrap();
        let ratio = p.explained_variance_ratio();
        assert!((ratio[0] - 1.0).abs() < 1e-12);
        let gram = p.components.dot(&p.components.t());
        for ((i, j), v) in gram.indexed_iter() {
            assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_too_few_rows() {
        let f = Array2::<f64>::zeros((3, 5));
        assert!(pca_project_features(f.view(), 3).is_err());
    }

    #[test]
    fn render_bounds_and_constant_gray() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Array2::from_shape_fn((16, 6), |_| rng.random_range(-1.0..1.0));
        let p = pca_project_features(f.view(), 3).unwrap();
        let rgb = render_rgb_map(&p, (4, 4), (56, 56)).unwrap();
        assert_eq!(rgb.dim(), (56, 56, 3));
        assert!(rgb.iter().any(|&v| v == 0) && rgb.iter().any(|&v| v == 255));
        let flat = FeatureProjection {
            components: Array2::eye(3),
            projected: Array2::from_elem((4, 3), 2.5),
            explained_variance: vec![0.0; 3],
            total_variance: 0.0,
        };
        let gray = render_rgb_map(&flat, (2, 2), (28, 28)).unwrap();
        assert!(gray.iter().all(|&v| v == 128));
        assert!(render_rgb_map(&flat, (3, 2), (28, 28)).is_err());
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.png");
        let rgb = Array3::from_shape_fn((3, 5, 3), |(i, j, c)| (i * 50 + j * 10 + c) as u8);
        write_png(&path, &rgb).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&path).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (5, 3));
        assert_eq!(&buf[..info.buffer_size()], rgb.as_slice().unwrap());
    }
}

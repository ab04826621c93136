//! 68-point face landmarks: normalisation, PCA shape model, rasterisation
//! and the JSON-lines landmark file format.
//!
//! Point indices follow the common 68-point annotation: jaw 0–16, brows
//! 17–26, nose 27–35, eyes 36–47, outer lips 48–59 and inner lips 60–67.

use std::io::{BufRead, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::GrayImage;

pub const NUM_LANDMARKS: usize = 68;
pub const LANDMARK_DIM: usize = NUM_LANDMARKS * 2;
pub const LIP_RANGE: Range<usize> = 48..68;
pub const NUM_LIP_POINTS: usize = 20;

/// Half-width, in normalised units, of the square canvas used by
/// [`rasterize`] and [`to_canvas`]: 1.5× the half-extent of a typical face.
pub const CANVAS_HALF_EXTENT: f64 = 2.4;

/// Polylines drawn by [`rasterize`]: `(first, last, closed)`.
pub const CONNECTIVITY: [(usize, usize, bool); 9] = [
    (0, 16, false),  // jaw
    (17, 21, false), // right brow
    (22, 26, false), // left brow
    (27, 30, false), // nose bridge
    (31, 35, false), // nostrils
    (36, 41, true),  // right eye
    (42, 47, true),  // left eye
    (48, 59, true),  // outer lips
    (60, 67, true),  // inner lips
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordSpace {
    Pixel,
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkFrame {
    points: Vec<[f64; 2]>,
    space: CoordSpace,
}

/// The 20 mouth points (48–67) of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LipSubset<'a> {
    pub points: &'a [[f64; 2]],
}

/// Similarity transform taking a pixel-space frame to normalised space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub centroid: [f64; 2],
    pub inter_ocular: f64,
}

impl Normalization {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.centroid[0]) / self.inter_ocular,
            (p[1] - self.centroid[1]) / self.inter_ocular,
        ]
    }

    pub fn invert(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0] * self.inter_ocular + self.centroid[0],
            p[1] * self.inter_ocular + self.centroid[1],
        ]
    }

    /// Maps a pixel-space frame into this transform's normalised space.
    pub fn normalize_frame(&self, f: &LandmarkFrame) -> LandmarkFrame {
        LandmarkFrame {
            points: f.points.iter().map(|&p| self.apply(p)).collect(),
            space: CoordSpace::Normalized,
        }
    }

    /// Maps a normalised frame back to this transform's pixel space.
    pub fn denormalize(&self, f: &LandmarkFrame) -> LandmarkFrame {
        LandmarkFrame {
            points: f.points.iter().map(|&p| self.invert(p)).collect(),
            space: CoordSpace::Pixel,
        }
    }
}

impl LandmarkFrame {
    pub fn new(points: Vec<[f64; 2]>, space: CoordSpace) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::shape(format!("{NUM_LANDMARKS} points"), points.len()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("landmark coordinates must be finite".into()));
        }
        Ok(Self { points, space })
    }

    /// Builds a frame from `[x0, y0, x1, y1, …]`.
    pub fn from_flat(flat: &[f64], space: CoordSpace) -> Result<Self> {
        if flat.len() != LANDMARK_DIM {
            return Err(Error::shape(LANDMARK_DIM, flat.len()));
        }
        Self::new(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(), space)
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn space(&self) -> CoordSpace {
        self.space
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn lips(&self) -> LipSubset<'_> {
        LipSubset {
            points: &self.points[LIP_RANGE],
        }
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.points.len() as f64;
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
        [sx / n, sy / n]
    }

    /// Distance between the midpoints of the two eyes' corner pairs
    /// (36/39 and 42/45).
    pub fn inter_ocular(&self) -> f64 {
        let mid = |a: usize, b: usize| {
            [
                0.5 * (self.points[a][0] + self.points[b][0]),
                0.5 * (self.points[a][1] + self.points[b][1]),
            ]
        };
        let (r, l) = (mid(36, 39), mid(42, 45));
        ((r[0] - l[0]).powi(2) + (r[1] - l[1]).powi(2)).sqrt()
    }

    pub fn normalization(&self) -> Result<Normalization> {
        let iod = self.inter_ocular();
        if !(iod > 1e-9) {
            return Err(Error::Degenerate(format!(
                "inter-ocular distance {iod} is too small to normalise"
            )));
        }
        Ok(Normalization {
            centroid: self.centroid(),
            inter_ocular: iod,
        })
    }

    /// Centres on the landmark centroid and scales the inter-ocular distance to 1.
    pub fn normalize(&self) -> Result<LandmarkFrame> {
        let t = self.normalization()?;
        Ok(LandmarkFrame {
            points: self.points.iter().map(|&p| t.apply(p)).collect(),
            space: CoordSpace::Normalized,
        })
    }

    pub fn mirrored_x(&self) -> LandmarkFrame {
        LandmarkFrame {
            points: self.points.iter().map(|p| [-p[0], p[1]]).collect(),
            space: self.space,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> LandmarkFrame {
        LandmarkFrame {
            points: self.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(),
            space: self.space,
        }
    }

    pub fn scaled(&self, s: f64) -> LandmarkFrame {
        LandmarkFrame {
            points: self.points.iter().map(|p| [p[0] * s, p[1] * s]).collect(),
            space: self.space,
        }
    }
}

/// Position of a normalised point on a `size × size` canvas.
pub fn to_canvas(p: [f64; 2], size: usize) -> [f64; 2] {
    let half = size as f64 / 2.0;
    let s = half / CANVAS_HALF_EXTENT;
    [half + p[0] * s, half + p[1] * s]
}

pub fn from_canvas(p: [f64; 2], size: usize) -> [f64; 2] {
    let half = size as f64 / 2.0;
    let s = half / CANVAS_HALF_EXTENT;
    [(p[0] - half) / s, (p[1] - half) / s]
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (ex * ex + ey * ey).sqrt()
}

/// Draws the fixed landmark connectivity as anti-aliased 1-px polylines on a
/// `size × size` canvas. Geometry outside the canvas is clipped.
pub fn rasterize(frame: &LandmarkFrame, size: usize) -> Result<GrayImage> {
    if frame.space != CoordSpace::Normalized {
        return Err(Error::InvalidInput("rasterize expects a normalised frame".into()));
    }
    if size < 32 {
        return Err(Error::InvalidInput(format!("canvas size {size} is below 32")));
    }
    let mut img = GrayImage::new(size, size);
    let half = size as f64 / 2.0;
    let scale = half / CANVAS_HALF_EXTENT;
    // Centre-relative coordinates keep the drawing exactly mirror-symmetric.
    let pts: Vec<[f64; 2]> = frame
        .points
        .iter()
        .map(|p| [p[0] * scale, p[1] * scale])
        .collect();
    let mut draw = |a: [f64; 2], b: [f64; 2]| {
        let x0 = ((a[0].min(b[0]) + half).floor() as i64 - 2).max(0);
        let x1 = ((a[0].max(b[0]) + half).ceil() as i64 + 2).min(size as i64 - 1);
        let y0 = ((a[1].min(b[1]) + half).floor() as i64 - 2).max(0);
        let y1 = ((a[1].max(b[1]) + half).ceil() as i64 + 2).min(size as i64 - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let c = [x as f64 + 0.5 - half, y as f64 + 0.5 - half];
                let v = (1.0 - segment_distance(c, a, b)).clamp(0.0, 1.0) as f32;
                let slot = &mut img.data[y as usize * size + x as usize];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    };
    for &(first, last, closed) in &CONNECTIVITY {
        for i in first..last {
            draw(pts[i], pts[i + 1]);
        }
        if closed {
            draw(pts[last], pts[first]);
        }
    }
    Ok(img)
}

/// Linear PCA shape model over flattened 136-d landmark vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `k × 136`, row-major, orthonormal rows.
    pub components: Vec<f64>,
    pub explained_variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaCoeffs(pub Vec<f64>);

impl PcaBasis {
    /// Fits the top-`k` eigenvectors of the (1/n) covariance of the corpus.
    /// Each component is signed so its largest-magnitude entry is positive.
    pub fn fit(corpus: &[LandmarkFrame], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidInput("PCA needs at least one component".into()));
        }
        if corpus.len() <= k {
            return Err(Error::InvalidInput(format!(
                "PCA with k={k} needs more than {k} frames, got {}",
                corpus.len()
            )));
        }
        if corpus.iter().any(|f| f.space != CoordSpace::Normalized) {
            return Err(Error::InvalidInput("PCA corpus must be normalised".into()));
        }
        let n = corpus.len();
        let d = LANDMARK_DIM;
        let data = DMatrix::from_fn(n, d, |r, c| corpus[r].points[c / 2][c % 2]);
        let mean: Vec<f64> = (0..d).map(|c| data.column(c).mean()).collect();
        let mut centred = data;
        for c in 0..d {
            let m = mean[c];
            centred.column_mut(c).add_scalar_mut(-m);
        }
        let cov = (centred.transpose() * &centred) / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let rank = order
            .iter()
            .filter(|&&i| eig.eigenvalues[i] > 1e-9 * top.max(1e-300))
            .count();
        if k > rank {
            return Err(Error::InvalidInput(format!(
                "k={k} exceeds the numerical rank {rank} of the corpus"
            )));
        }
        let mut components = Vec::with_capacity(k * d);
        let mut explained_variance = Vec::with_capacity(k);
        for &i in order.iter().take(k) {
            let v = eig.eigenvectors.column(i);
            let pivot = (0..d)
                .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
                .unwrap();
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            components.extend(v.iter().map(|x| x * sign));
            explained_variance.push(eig.eigenvalues[i]);
        }
        Ok(Self {
            mean,
            components,
            explained_variance,
        })
    }

    pub fn k(&self) -> usize {
        self.explained_variance.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * LANDMARK_DIM..(i + 1) * LANDMARK_DIM]
    }

    pub fn project(&self, frame: &LandmarkFrame) -> Result<PcaCoeffs> {
        self.project_flat(&frame.flatten())
    }

    pub fn project_flat(&self, flat: &[f64]) -> Result<PcaCoeffs> {
        if flat.len() != LANDMARK_DIM || self.mean.len() != LANDMARK_DIM {
            return Err(Error::shape(LANDMARK_DIM, flat.len()));
        }
        Ok(PcaCoeffs(
            (0..self.k())
                .map(|i| {
                    self.component(i)
                        .iter()
                        .zip(flat.iter().zip(&self.mean))
                        .map(|(c, (x, m))| c * (x - m))
                        .sum()
                })
                .collect(),
        ))
    }

    pub fn reconstruct(&self, coeffs: &PcaCoeffs) -> Result<LandmarkFrame> {
        if coeffs.0.len() != self.k() {
            return Err(Error::shape(self.k(), coeffs.0.len()));
        }
        let mut flat = self.mean.clone();
        for (i, &c) in coeffs.0.iter().enumerate() {
            for (x, b) in flat.iter_mut().zip(self.component(i)) {
                *x += c * b;
            }
        }
        LandmarkFrame::from_flat(&flat, CoordSpace::Normalized)
    }

    /// Returns the basis truncated to its first `k` components.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k() {
            return Err(Error::InvalidInput(format!("cannot truncate {} components to {k}", self.k())));
        }
        Ok(Self {
            mean: self.mean.clone(),
            components: self.components[..k * LANDMARK_DIM].to_vec(),
            explained_variance: self.explained_variance[..k].to_vec(),
        })
    }
}

/// One line of a landmark JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub frame: usize,
    pub w: u32,
    pub h: u32,
    pub pts: Vec<[f64; 2]>,
}

impl LandmarkRecord {
    pub fn from_frame(frame: usize, w: u32, h: u32, f: &LandmarkFrame) -> Self {
        Self {
            frame,
            w,
            h,
            pts: f.points.clone(),
        }
    }

    pub fn to_frame(&self) -> Result<LandmarkFrame> {
        LandmarkFrame::new(self.pts.clone(), CoordSpace::Pixel)
    }
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[LandmarkRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<LandmarkRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LandmarkRecord = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidInput(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        if rec.pts.len() != NUM_LANDMARKS {
            return Err(Error::InvalidInput(format!(
                "{}:{}: expected {NUM_LANDMARKS} points, found {}",
                path.display(),
                lineno + 1,
                rec.pts.len()
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A plausible pixel-space face: eyes level, everything else jittered.
    fn face(rng: &mut ChaCha8Rng) -> LandmarkFrame {
        let pts = (0..NUM_LANDMARKS)
            .map(|i| {
                let angle = i as f64 * 0.37;
                [
                    200.0 + 60.0 * angle.cos() + rng.random_range(-3.0..3.0),
                    150.0 + 70.0 * angle.sin() + rng.random_range(-3.0..3.0),
                ]
            })
            .collect();
        LandmarkFrame::new(pts, CoordSpace::Pixel).unwrap()
    }

    fn close(a: &LandmarkFrame, b: &LandmarkFrame, tol: f64) -> bool {
        a.flatten()
            .iter()
            .zip(b.flatten())
            .all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Cyclic Jacobi eigenvalue iteration, independent of nalgebra.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    fn random_corpus(n: usize, seed: u64) -> Vec<LandmarkFrame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| face(&mut rng).normalize().unwrap()).collect()
    }

    #[test]
    fn normalize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = face(&mut rng);
        let n = f.normalize().unwrap();
        assert_eq!(n.space(), CoordSpace::Normalized);
        let c = n.centroid();
        assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12);
        assert!((n.inter_ocular() - 1.0).abs() < 1e-12);
        assert!(close(&n.normalize().unwrap(), &n, 1e-12));
        assert!(close(&f.translated(37.0, -12.0).normalize().unwrap(), &n, 1e-12));
        assert!(close(&f.scaled(2.0).normalize().unwrap(), &n, 1e-12));
    }

    #[test]
    fn degenerate_eyes_fail() {
        let f = LandmarkFrame::new(vec![[3.0, 4.0]; 68], CoordSpace::Pixel).unwrap();
        assert!(matches!(f.normalize(), Err(Error::Degenerate(_))));
    }

    #[test]
    fn wrong_point_count_rejected() {
        assert!(LandmarkFrame::new(vec![[0.0, 0.0]; 67], CoordSpace::Pixel).is_err());
        assert!(LandmarkFrame::from_flat(&[0.0; 135], CoordSpace::Pixel).is_err());
    }

    #[test]
    fn lip_subset_is_points_48_to_67() {
        let pts: Vec<[f64; 2]> = (0..68).map(|i| [i as f64, -(i as f64)]).collect();
        let f = LandmarkFrame::new(pts, CoordSpace::Pixel).unwrap();
        let lips = f.lips();
        assert_eq!(lips.points.len(), NUM_LIP_POINTS);
        assert_eq!(lips.points[0], [48.0, -48.0]);
        assert_eq!(lips.points[19], [67.0, -67.0]);
    }

    #[test]
    fn pca_full_rank_reconstructs_corpus() {
        // Corpus spanning exactly 6 directions around a base shape.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = face(&mut rng).normalize().unwrap().flatten();
        let dirs: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..LANDMARK_DIM).map(|_| rng.random_range(-0.1..0.1)).collect())
            .collect();
        let corpus: Vec<LandmarkFrame> = (0..40)
            .map(|_| {
                let mut v = base.clone();
                for d in &dirs {
                    let c: f64 = rng.random_range(-1.0..1.0);
                    v.iter_mut().zip(d).for_each(|(x, y)| *x += c * y);
                }
                LandmarkFrame::from_flat(&v, CoordSpace::Normalized).unwrap()
            })
            .collect();
        let basis = PcaBasis::fit(&corpus, 6).unwrap();
        for f in &corpus {
            let r = basis.reconstruct(&basis.project(f).unwrap()).unwrap();
            assert!(close(&r, f, 1e-6));
        }
        assert!(PcaBasis::fit(&corpus, 7).is_err());
    }

    #[test]
    fn pca_mean_projects_to_zero_and_zero_reconstructs_mean() {
        let corpus = random_corpus(60, 2);
        let basis = PcaBasis::fit(&corpus, 10).unwrap();
        let mean = LandmarkFrame::from_flat(&basis.mean, CoordSpace::Normalized).unwrap();
        assert!(basis.project(&mean).unwrap().0.iter().all(|c| c.abs() < 1e-12));
        let r = basis.reconstruct(&PcaCoeffs(vec![0.0; 10])).unwrap();
        assert_eq!(r.flatten(), basis.mean);
    }

    #[test]
    fn pca_components_orthonormal_and_sorted() {
        let basis = PcaBasis::fit(&random_corpus(200, 3), 20).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let dot: f64 = basis
                    .component(i)
                    .iter()
                    .zip(basis.component(j))
                    .map(|(a, b)| a * b)
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6);
            }
            let c = basis.component(i);
            let pivot = c.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
            assert!(pivot > 0.0);
        }
        assert!(basis.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pca_variances_match_jacobi_oracle() {
        let corpus = random_corpus(200, 4);
        let basis = PcaBasis::fit(&corpus, 20).unwrap();
        let n = corpus.len() as f64;
        let rows: Vec<Vec<f64>> = corpus.iter().map(|f| f.flatten()).collect();
        let mean: Vec<f64> = (0..LANDMARK_DIM)
            .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n)
            .collect();
        let mut cov = vec![vec![0.0; LANDMARK_DIM]; LANDMARK_DIM];
        for r in &rows {
            for i in 0..LANDMARK_DIM {
                for j in 0..LANDMARK_DIM {
                    cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
                }
            }
        }
        let oracle = jacobi_eigenvalues(cov);
        for (got, want) in basis.explained_variance.iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }

        // Mean squared reconstruction error equals the discarded variance.
        let discarded: f64 = oracle[20..].iter().sum();
        let err: f64 = corpus
            .iter()
            .map(|f| {
                let r = basis.reconstruct(&basis.project(f).unwrap()).unwrap();
                r.flatten()
                    .iter()
                    .zip(f.flatten())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n;
        assert!((err - discarded).abs() < 1e-8, "{err} vs {discarded}");
    }

    #[test]
    fn pca_error_non_increasing_in_k() {
        let corpus = random_corpus(120, 9);
        let full = PcaBasis::fit(&corpus, 30).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..=30 {
            let b = full.truncated(k).unwrap();
            let err: f64 = corpus
                .iter()
                .map(|f| {
                    let r = b.reconstruct(&b.project(f).unwrap()).unwrap();
                    r.flatten().iter().zip(f.flatten()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })
                .sum();
            assert!(err <= prev + 1e-12);
            prev = err;
        }
    }

    #[test]
    fn project_reconstruct_identity_on_coefficients() {
        let basis = PcaBasis::fit(&random_corpus(80, 6), 12).unwrap();
        let c = PcaCoeffs((0..12).map(|i| (i as f64 - 5.0) * 0.03).collect());
        let back = basis.project(&basis.reconstruct(&c).unwrap()).unwrap();
        for (a, b) in c.0.iter().zip(&back.0) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(basis.reconstruct(&PcaCoeffs(vec![0.0; 3])).is_err());
        assert!(basis.project_flat(&[0.0; 10]).is_err());
    }

    #[test]
    fn rasterize_is_deterministic_and_mirror_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = face(&mut rng).normalize().unwrap();
        let a = rasterize(&f, 64).unwrap();
        assert_eq!(a, rasterize(&f, 64).unwrap());
        assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.nonzero_count() > 0);
        let m = rasterize(&f.mirrored_x(), 64).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(a.get(x, y), m.get(63 - x, y));
            }
        }
    }

    #[test]
    fn rasterize_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = face(&mut rng);
        assert!(rasterize(&f, 64).is_err());
        assert!(rasterize(&f.normalize().unwrap(), 16).is_err());
        // Far-away geometry is clipped rather than failing.
        let far = f.normalize().unwrap().translated(50.0, 0.0);
        assert_eq!(rasterize(&far, 32).unwrap().nonzero_count(), 0);
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.jsonl");
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let recs: Vec<LandmarkRecord> = (0..3)
            .map(|i| LandmarkRecord::from_frame(i, 128, 128, &face(&mut rng)))
            .collect();
        write_jsonl(&p, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("{\"frame\":0,\"w\":128,\"h\":128,\"pts\":[["));
        assert_eq!(read_jsonl(&p).unwrap(), recs);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn normalize_similarity_invariant(seed in 0u64..1000, dx in -100.0f64..100.0, dy in -100.0f64..100.0, s in 0.2f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = face(&mut rng);
            let a = f.normalize().unwrap();
            let b = f.scaled(s).translated(dx, dy).normalize().unwrap();
            prop_assert!(close(&a, &b, 1e-9));
        }

        #[test]
        fn lips_ignore_non_lip_points(seed in 0u64..1000, idx in 0usize..48, dx in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = face(&mut rng);
            let mut pts = f.points().to_vec();
            pts[idx][0] += dx;
            let g = LandmarkFrame::new(pts, CoordSpace::Pixel).unwrap();
            prop_assert_eq!(f.lips(), g.lips());
        }
    }
}

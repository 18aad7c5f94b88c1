//! Reference keypoints on the aligned moving image and the mean landmark
//! distance that drives the reward.
//!
//! Correspondence between a set and its warped copy is by construction (same
//! index), never by descriptor matching.

use crate::geometry::{Point2, SimilarityTransform};
use crate::raster::Image;
use thiserror::Error;

/// Harris determinant/trace weight.
const HARRIS_K: f64 = 0.04;
/// Corner responses at or below this are ignored.
const RESPONSE_THRESHOLD: f64 = 1e-6;
/// Gaussian sigma for structure-tensor smoothing.
const SMOOTHING_SIGMA: f64 = 1.0;
/// Accepted corners must be at least this far apart, in pixels.
const MIN_MUTUAL_DISTANCE: f64 = 5.0;
/// Candidates this close to the border are skipped; gradients and the
/// smoothing window are unreliable there.
const BORDER_INSET: usize = 2;

#[derive(Debug, Error)]
pub enum LandmarkError {
    #[error("landmark sets differ in size: {got} vs {expected}")]
    SizeMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandmarkSource {
    Detected,
    Grid,
}

/// Ordered keypoints in continuous pixel coordinates. Provider constructors
/// (`detect_landmarks`, `grid_landmarks`) return at least 4 points, all inside
/// the image they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<Point2>,
    pub source: LandmarkSource,
}

impl LandmarkSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The same set with every point mapped through `t` (correspondence by
    /// index is preserved).
    pub fn transformed(&self, t: &SimilarityTransform) -> LandmarkSet {
        LandmarkSet {
            points: self.points.iter().map(|p| t.apply_point(*p)).collect(),
            source: self.source,
        }
    }
}

/// Harris corner response at every pixel (row-major, `width*height` values).
///
/// Central-difference gradients and the sigma-1 Gaussian smoothing both use
/// replicate borders.
pub fn harris_response(img: &Image) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let at = |x: i64, y: i64| {
        img.get(x.clamp(0, w as i64 - 1) as usize, y.clamp(0, h as i64 - 1) as usize)
    };

    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let gx = 0.5 * (at(x as i64 + 1, y as i64) - at(x as i64 - 1, y as i64));
            let gy = 0.5 * (at(x as i64, y as i64 + 1) - at(x as i64, y as i64 - 1));
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }

    for plane in [&mut ixx, &mut iyy, &mut ixy] {
        gaussian_blur(plane, w, h, SMOOTHING_SIGMA);
    }

    (0..w * h)
        .map(|i| {
            let (a, b, c) = (ixx[i], iyy[i], ixy[i]);
            let det = a * b - c * c;
            let trace = a + b;
            det - HARRIS_K * trace * trace
        })
        .collect()
}

/// Separable Gaussian blur in place, replicate borders, radius `ceil(3*sigma)`.
fn gaussian_blur(plane: &mut [f64], w: usize, h: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let sx = (x as i64 + j as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += k * plane[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let sy = (y as i64 + j as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += k * tmp[sy * w + x];
            }
            plane[y * w + x] = acc;
        }
    }
}

/// Up to `k` Harris corner maxima, strongest first: 3x3 non-max suppression,
/// then greedy acceptance enforcing a minimum mutual distance of 5 px. Falls
/// back to a deterministic grid when fewer than 4 corners survive, so the
/// result always has at least 4 points.
pub fn detect_landmarks(img: &Image, k: usize) -> LandmarkSet {
    assert!(k >= 4, "landmark budget must be at least 4, got {k}");
    let (w, h) = (img.width(), img.height());
    let response = harris_response(img);

    // Local maxima above threshold, strictly greater than all 8 neighbours.
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for y in BORDER_INSET..h - BORDER_INSET {
        for x in BORDER_INSET..w - BORDER_INSET {
            let r = response[y * w + x];
            if r <= RESPONSE_THRESHOLD {
                continue;
            }
            let mut is_max = true;
            'scan: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = ((y as i64 + dy) as usize) * w + (x as i64 + dx) as usize;
                    if response[n] >= r {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                candidates.push((r, y, x));
            }
        }
    }

    // Strongest first; ties broken by position for determinism.
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut accepted: Vec<Point2> = Vec::new();
    for (_, y, x) in candidates {
        let p = Point2::new(x as f64, y as f64);
        if accepted.iter().all(|q| p.distance(q) >= MIN_MUTUAL_DISTANCE) {
            accepted.push(p);
            if accepted.len() == k {
                break;
            }
        }
    }

    if accepted.len() < 4 {
        // floor(sqrt(k)) keeps the fallback within the requested budget.
        let n = ((k as f64).sqrt().floor() as usize).max(2);
        return grid_landmarks(w, h, n);
    }
    LandmarkSet { points: accepted, source: LandmarkSource::Detected }
}

/// `n_per_side`^2 points on a uniform lattice spanning [0.1*dim, 0.9*dim] in
/// each axis (10% border margin), row-major order.
pub fn grid_landmarks(width: usize, height: usize, n_per_side: usize) -> LandmarkSet {
    assert!(n_per_side >= 2, "grid needs at least 2 points per side");
    let coord = |dim: usize, i: usize| {
        let lo = 0.1 * dim as f64;
        let hi = 0.9 * dim as f64;
        lo + (hi - lo) * i as f64 / (n_per_side as f64 - 1.0)
    };
    let mut points = Vec::with_capacity(n_per_side * n_per_side);
    for iy in 0..n_per_side {
        for ix in 0..n_per_side {
            points.push(Point2::new(coord(width, ix), coord(height, iy)));
        }
    }
    LandmarkSet { points, source: LandmarkSource::Grid }
}

/// Mean Euclidean distance between `p_g` and `t` applied to `p_w`:
/// `(1/n) * sum_i ||p_i - t(p~_i)||`. The reward is the negative of this.
pub fn mean_landmark_distance(
    p_g: &LandmarkSet,
    p_w: &LandmarkSet,
    t: &SimilarityTransform,
) -> Result<f64, LandmarkError> {
    if p_g.len() != p_w.len() {
        return Err(LandmarkError::SizeMismatch { got: p_w.len(), expected: p_g.len() });
    }
    let n = p_g.len() as f64;
    let total: f64 = p_g
        .points
        .iter()
        .zip(p_w.points.iter())
        .map(|(p, q)| p.distance(&t.apply_point(*q)))
        .sum();
    Ok(total / n)
}

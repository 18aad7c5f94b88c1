//! Similarity transforms (translation, rotation, isotropic scale), the discrete
//! action set that edits them, and image warping.
//!
//! `to_matrix`/`apply_point` act about the coordinate origin. Image-space
//! operations (warping, landmark distances, TRE) conjugate the transform about
//! the image center first via [`SimilarityTransform::about_pivot`]; pixel-grid
//! center is `((w-1)/2, (h-1)/2)`.

use crate::raster::Image;
use serde::{Deserialize, Serialize};

/// Lower clamp for the scale parameter during action walks.
pub const SCALE_MIN: f64 = 0.3;
/// Upper clamp for the scale parameter during action walks.
pub const SCALE_MAX: f64 = 3.0;
/// Translation step applied by one action, in pixels.
pub const TRANSLATION_STEP: f64 = 1.0;
/// Rotation step applied by one action, in degrees.
pub const ANGLE_STEP: f64 = 1.0;
/// Scale step applied by one action.
pub const SCALE_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Point2 {
        Point2 { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Row-major 2x3 affine matrix: `[m00 m01 m02; m10 m11 m12]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Matrix2x3(pub [f64; 6]);

impl Matrix2x3 {
    pub fn identity() -> Matrix2x3 {
        Matrix2x3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let m = &self.0;
        Point2 {
            x: m[0] * p.x + m[1] * p.y + m[2],
            y: m[3] * p.x + m[4] * p.y + m[5],
        }
    }

    /// Frobenius distance over the six entries.
    pub fn frobenius_distance(&self, other: &Matrix2x3) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// The eight discrete pose-editing actions, one unit step each.
///
/// Index order is fixed: +tx, -tx, +ty, -ty, +angle, -angle, +scale, -scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum ActionId {
    TxPlus = 0,
    TxMinus = 1,
    TyPlus = 2,
    TyMinus = 3,
    AnglePlus = 4,
    AngleMinus = 5,
    ScalePlus = 6,
    ScaleMinus = 7,
}

/// Number of discrete actions.
pub const ACTION_COUNT: usize = 8;

impl ActionId {
    pub const ALL: [ActionId; ACTION_COUNT] = [
        ActionId::TxPlus,
        ActionId::TxMinus,
        ActionId::TyPlus,
        ActionId::TyMinus,
        ActionId::AnglePlus,
        ActionId::AngleMinus,
        ActionId::ScalePlus,
        ActionId::ScaleMinus,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<ActionId> {
        Self::ALL.get(index).copied()
    }

    /// The action that undoes this one (when no clamp fires).
    pub fn opposite(self) -> ActionId {
        match self {
            ActionId::TxPlus => ActionId::TxMinus,
            ActionId::TxMinus => ActionId::TxPlus,
            ActionId::TyPlus => ActionId::TyMinus,
            ActionId::TyMinus => ActionId::TyPlus,
            ActionId::AnglePlus => ActionId::AngleMinus,
            ActionId::AngleMinus => ActionId::AnglePlus,
            ActionId::ScalePlus => ActionId::ScaleMinus,
            ActionId::ScaleMinus => ActionId::ScalePlus,
        }
    }
}

/// Wraps an angle in degrees into `(-180, 180]`.
pub fn normalize_angle_deg(angle: f64) -> f64 {
    let mut a = angle % 360.0;
    if a <= -180.0 {
        a += 360.0;
    } else if a > 180.0 {
        a -= 360.0;
    }
    a
}

/// Translation + rotation + isotropic scale.
///
/// `angle_deg` is kept normalized to `(-180, 180]` by every operation here;
/// radians appear only inside `to_matrix`. `scale` is clamped to
/// `[SCALE_MIN, SCALE_MAX]` by the action walk (`apply_action`) and by `new`;
/// the algebraic ops (`invert`, `compose`) are exact and never clamp, otherwise
/// they would stop being group operations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
    pub angle_deg: f64,
}

impl SimilarityTransform {
    pub fn identity() -> SimilarityTransform {
        SimilarityTransform { tx: 0.0, ty: 0.0, scale: 1.0, angle_deg: 0.0 }
    }

    pub fn new(tx: f64, ty: f64, scale: f64, angle_deg: f64) -> SimilarityTransform {
        SimilarityTransform {
            tx,
            ty,
            scale: scale.clamp(SCALE_MIN, SCALE_MAX),
            angle_deg: normalize_angle_deg(angle_deg),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// `[[s cos a, -s sin a, tx], [s sin a, s cos a, ty]]`.
    pub fn to_matrix(&self) -> Matrix2x3 {
        let r = self.angle_deg.to_radians();
        let (sin, cos) = r.sin_cos();
        let sc = self.scale * cos;
        let ss = self.scale * sin;
        Matrix2x3([sc, -ss, self.tx, ss, sc, self.ty])
    }

    /// Recovers parameters from a similarity matrix (projection if the matrix
    /// is not an exact similarity).
    pub fn from_matrix(m: &Matrix2x3) -> SimilarityTransform {
        let e = &m.0;
        SimilarityTransform {
            tx: e[2],
            ty: e[5],
            scale: e[3].hypot(e[0]),
            angle_deg: normalize_angle_deg(e[3].atan2(e[0]).to_degrees()),
        }
    }

    /// `to_matrix(self) * (p.x, p.y, 1)`.
    pub fn apply_point(&self, p: Point2) -> Point2 {
        self.to_matrix().apply(p)
    }

    /// One unit step of the given action. Exactly one parameter changes; the
    /// angle re-normalizes and the scale clamps to `[SCALE_MIN, SCALE_MAX]`.
    pub fn apply_action(&self, action: ActionId) -> SimilarityTransform {
        let mut t = *self;
        match action {
            ActionId::TxPlus => t.tx += TRANSLATION_STEP,
            ActionId::TxMinus => t.tx -= TRANSLATION_STEP,
            ActionId::TyPlus => t.ty += TRANSLATION_STEP,
            ActionId::TyMinus => t.ty -= TRANSLATION_STEP,
            ActionId::AnglePlus => t.angle_deg = normalize_angle_deg(t.angle_deg + ANGLE_STEP),
            ActionId::AngleMinus => t.angle_deg = normalize_angle_deg(t.angle_deg - ANGLE_STEP),
            ActionId::ScalePlus => t.scale = (t.scale + SCALE_STEP).clamp(SCALE_MIN, SCALE_MAX),
            ActionId::ScaleMinus => t.scale = (t.scale - SCALE_STEP).clamp(SCALE_MIN, SCALE_MAX),
        }
        t
    }

    /// Exact inverse: `to_matrix(invert(t))` is the homogeneous inverse of `to_matrix(t)`.
    pub fn invert(&self) -> SimilarityTransform {
        let inv_scale = 1.0 / self.scale;
        let r = (-self.angle_deg).to_radians();
        let (sin, cos) = r.sin_cos();
        SimilarityTransform {
            tx: -inv_scale * (cos * self.tx - sin * self.ty),
            ty: -inv_scale * (sin * self.tx + cos * self.ty),
            scale: inv_scale,
            angle_deg: normalize_angle_deg(-self.angle_deg),
        }
    }

    /// `compose(a, b)`: apply `b` first, then `a`; equals the homogeneous
    /// matrix product `to_matrix(a) * to_matrix(b)`.
    pub fn compose(&self, b: &SimilarityTransform) -> SimilarityTransform {
        let r = self.angle_deg.to_radians();
        let (sin, cos) = r.sin_cos();
        SimilarityTransform {
            tx: self.scale * (cos * b.tx - sin * b.ty) + self.tx,
            ty: self.scale * (sin * b.tx + cos * b.ty) + self.ty,
            scale: self.scale * b.scale,
            angle_deg: normalize_angle_deg(self.angle_deg + b.angle_deg),
        }
    }

    /// Conjugates the transform so rotation and scale pivot at `(cx, cy)`
    /// instead of the origin: returns `translate(c) . self . translate(-c)`.
    pub fn about_pivot(&self, cx: f64, cy: f64) -> SimilarityTransform {
        let r = self.angle_deg.to_radians();
        let (sin, cos) = r.sin_cos();
        SimilarityTransform {
            tx: self.tx + cx - self.scale * (cos * cx - sin * cy),
            ty: self.ty + cy - self.scale * (sin * cx + cos * cy),
            scale: self.scale,
            angle_deg: self.angle_deg,
        }
    }
}

/// Smallest lattice scale step count: `1 + 0.05 * (-14) = 0.3`.
pub const SCALE_STEPS_MIN: i64 = -14;
/// Largest lattice scale step count: `1 + 0.05 * 40 = 3.0`.
pub const SCALE_STEPS_MAX: i64 = 40;

/// A pose on the integer action lattice: `tx`/`ty` in pixels, `angle` in whole
/// degrees wrapped to `(-180, 180]`, and scale as step counts from 1.0 in
/// units of [`SCALE_STEP`].
///
/// Float accumulation makes `s + 0.05 - 0.05 != s` in general, so anything
/// that must detect exact pose equality (the environment's terminal check,
/// rollout bookkeeping) walks this lattice and converts to float on demand:
/// equal lattice poses always yield bit-identical transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticePose {
    pub tx: i64,
    pub ty: i64,
    pub angle: i64,
    pub scale: i64,
}

fn wrap_angle_steps(a: i64) -> i64 {
    (a + 179).rem_euclid(360) - 179
}

impl LatticePose {
    pub fn identity() -> LatticePose {
        LatticePose { tx: 0, ty: 0, angle: 0, scale: 0 }
    }

    /// Builds a lattice pose, wrapping the angle and clamping the scale steps.
    pub fn from_steps(tx: i64, ty: i64, angle: i64, scale: i64) -> LatticePose {
        LatticePose {
            tx,
            ty,
            angle: wrap_angle_steps(angle),
            scale: scale.clamp(SCALE_STEPS_MIN, SCALE_STEPS_MAX),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Exact integer counterpart of [`SimilarityTransform::apply_action`].
    pub fn apply_action(&self, action: ActionId) -> LatticePose {
        let mut p = *self;
        match action {
            ActionId::TxPlus => p.tx += 1,
            ActionId::TxMinus => p.tx -= 1,
            ActionId::TyPlus => p.ty += 1,
            ActionId::TyMinus => p.ty -= 1,
            ActionId::AnglePlus => p.angle = wrap_angle_steps(p.angle + 1),
            ActionId::AngleMinus => p.angle = wrap_angle_steps(p.angle - 1),
            ActionId::ScalePlus => p.scale = (p.scale + 1).min(SCALE_STEPS_MAX),
            ActionId::ScaleMinus => p.scale = (p.scale - 1).max(SCALE_STEPS_MIN),
        }
        p
    }

    pub fn to_transform(&self) -> SimilarityTransform {
        SimilarityTransform::new(
            self.tx as f64 * TRANSLATION_STEP,
            self.ty as f64 * TRANSLATION_STEP,
            1.0 + self.scale as f64 * SCALE_STEP,
            self.angle as f64 * ANGLE_STEP,
        )
    }
}

/// Pivot used for image-space application of a transform: the centroid of the
/// pixel grid, `((w-1)/2, (h-1)/2)`.
pub fn image_center(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

/// Warps an image by `t` about the image center with inverse-mapping bilinear
/// resampling. Content at `p` moves to `about_pivot(t, center).apply(p)`;
/// reads outside the source are 0.
pub fn warp_image(img: &Image, t: &SimilarityTransform) -> Image {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = image_center(w, h);
    let m = t.invert().about_pivot(cx, cy).to_matrix().0;
    let mut out = Image::new(w, h);
    let out_data = out.as_mut_slice();
    for y in 0..h {
        let fy = y as f64;
        // Source coordinates move by (m00, m10) per output column; start at column 0.
        let mut sx = m[1] * fy + m[2];
        let mut sy = m[4] * fy + m[5];
        let row = &mut out_data[y * w..(y + 1) * w];
        for pixel in row.iter_mut() {
            *pixel = img.sample_bilinear(sx, sy);
            sx += m[0];
            sy += m[3];
        }
    }
    out
}

//! Macenko stain normalization.
//!
//! Estimates the two dominant stain vectors of an H&E-stained image in
//! optical-density space (SVD plane + robust angle percentiles), unmixes
//! per-pixel concentrations, and remixes them against a reference profile.

use crate::error::{Error, Result};
use image::RgbImage;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub const DEFAULT_I0: f64 = 255.0;
pub const DEFAULT_BETA: f64 = 0.15;
pub const DEFAULT_ALPHA: f64 = 1.0;
const MIN_TISSUE_PIXELS: usize = 100;

/// Estimated stain basis: a 3x2 unit-column matrix (H then E; H is the
/// extreme with more red absorption) plus 99th-percentile concentrations
/// per stain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainProfile {
    /// `stain_matrix[channel][stain]`, unit Euclidean norm per column.
    pub stain_matrix: [[f64; 2]; 3],
    pub max_concentrations: [f64; 2],
}

impl StainProfile {
    pub fn new(h: [f64; 3], e: [f64; 3], max_concentrations: [f64; 2]) -> Result<StainProfile> {
        let h = unit(h)?;
        let e = unit(e)?;
        if max_concentrations.iter().any(|c| *c <= 0.0) {
            return Err(Error::DegenerateStains(
                "max concentrations must be strictly positive".into(),
            ));
        }
        Ok(StainProfile {
            stain_matrix: [[h[0], e[0]], [h[1], e[1]], [h[2], e[2]]],
            max_concentrations,
        })
    }

    pub fn column(&self, stain: usize) -> [f64; 3] {
        [
            self.stain_matrix[0][stain],
            self.stain_matrix[1][stain],
            self.stain_matrix[2][stain],
        ]
    }

    /// The built-in normalization target (standard H&E vectors).
    pub fn reference() -> StainProfile {
        StainProfile::new([0.65, 0.70, 0.29], [0.07, 0.99, 0.11], [1.0, 1.0])
            .expect("reference profile is valid")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn from_json(text: &str) -> Result<StainProfile> {
        let p: StainProfile =
            serde_json::from_str(text).map_err(|e| Error::DegenerateStains(e.to_string()))?;
        for s in 0..2 {
            let c = p.column(s);
            let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::DegenerateStains(format!(
                    "stain column {s} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(p)
    }
}

fn unit(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n <= 0.0 || !n.is_finite() {
        return Err(Error::DegenerateStains("zero-length stain vector".into()));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

/// Optical density of one 8-bit value: `-log10((v + 1) / i0)`. The +1
/// keeps the map total at 0.
pub fn od_from_u8(v: u8, i0: f64) -> f64 {
    -((v as f64 + 1.0) / i0).log10()
}

/// Inverse of [`od_from_u8`], rounded and clamped to 8 bits.
pub fn od_to_u8(od: f64, i0: f64) -> u8 {
    (i0 * 10f64.powf(-od) - 1.0).round().clamp(0.0, 255.0) as u8
}

/// Per-pixel OD 3-vectors in row-major pixel order.
pub fn rgb_to_od(image: &RgbImage, i0: f64) -> Vec<[f64; 3]> {
    image
        .pixels()
        .map(|p| [
            od_from_u8(p.0[0], i0),
            od_from_u8(p.0[1], i0),
            od_from_u8(p.0[2], i0),
        ])
        .collect()
}

/// Rebuild an 8-bit image from a row-major OD field.
pub fn od_to_rgb(od: &[[f64; 3]], width: u32, height: u32, i0: f64) -> RgbImage {
    assert_eq!(od.len(), (width * height) as usize, "od field size mismatch");
    let mut img = RgbImage::new(width, height);
    for (pixel, v) in img.pixels_mut().zip(od) {
        pixel.0 = [od_to_u8(v[0], i0), od_to_u8(v[1], i0), od_to_u8(v[2], i0)];
    }
    img
}

/// Nearest-rank percentile on a sorted slice. Invariant under element
/// duplication, which keeps profile estimation stable.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = (q / 100.0 * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Non-negative unmixing of one OD vector against a 3x2 stain matrix:
/// ordinary least squares via normal equations, clipped at zero.
fn unmix(profile: &StainProfile, od: [f64; 3]) -> [f64; 2] {
    let m = &profile.stain_matrix;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    let (mut r0, mut r1) = (0.0, 0.0);
    for ch in 0..3 {
        a += m[ch][0] * m[ch][0];
        b += m[ch][0] * m[ch][1];
        c += m[ch][1] * m[ch][1];
        r0 += m[ch][0] * od[ch];
        r1 += m[ch][1] * od[ch];
    }
    let det = a * c - b * b;
    if det.abs() < 1e-12 {
        return [0.0, 0.0];
    }
    let c0 = (c * r0 - b * r1) / det;
    let c1 = (a * r1 - b * r0) / det;
    [c0.max(0.0), c1.max(0.0)]
}

/// Estimate a [`StainProfile`] from a row-major OD field.
///
/// Pixels whose OD is below `beta` in every channel are discarded as
/// background; the retained pixels must number at least 100. `alpha` is
/// the robust angle percentile (alpha and 100-alpha extremes).
pub fn estimate_stain_profile(od: &[[f64; 3]], beta: f64, alpha: f64) -> Result<StainProfile> {
    let mut tissue: Vec<[f64; 3]> = od
        .iter()
        .filter(|v| v.iter().any(|c| *c > beta))
        .cloned()
        .collect();
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Err(Error::InsufficientTissue {
            found: tissue.len(),
            required: MIN_TISSUE_PIXELS,
        });
    }

    // Sort pixels and coalesce repeats into (value, count) groups. This
    // makes the statistics bitwise invariant to pixel order, and to
    // duplicating every pixel: duplication exactly doubles each count, so
    // every intermediate sum scales by a power of two and the final
    // divisions by n cancel exactly.
    tissue.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut groups: Vec<(Vector3<f64>, f64)> = Vec::new();
    for v in &tissue {
        let p = Vector3::new(v[0], v[1], v[2]);
        match groups.last_mut() {
            Some(last) if last.0 == p => last.1 += 1.0,
            _ => groups.push((p, 1.0)),
        }
    }

    let n = tissue.len() as f64;
    let mut mean = Vector3::zeros();
    for (p, w) in &groups {
        mean += p * *w;
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for (p, w) in &groups {
        let d = p - mean;
        cov += d * d.transpose() * *w;
    }
    cov /= n;

    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    if eig.eigenvalues[order[1]] <= 1e-12 {
        return Err(Error::DegenerateStains(format!(
            "OD covariance is effectively rank < 2 (eigenvalues {:?})",
            eig.eigenvalues.as_slice()
        )));
    }
    let mut e1: Vector3<f64> = eig.eigenvectors.column(order[0]).into();
    let mut e2: Vector3<f64> = eig.eigenvectors.column(order[1]).into();
    // orient the plane basis toward the data so extreme angles stay in
    // (-pi/2, pi/2) and stain vectors point into the positive cone
    if e1.dot(&mean) < 0.0 {
        e1 = -e1;
    }
    if e2.dot(&mean) < 0.0 {
        e2 = -e2;
    }

    let mut phis: Vec<f64> = tissue
        .iter()
        .map(|v| {
            let p = Vector3::new(v[0], v[1], v[2]);
            p.dot(&e2).atan2(p.dot(&e1))
        })
        .collect();
    phis.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let phi_min = percentile(&phis, alpha);
    let phi_max = percentile(&phis, 100.0 - alpha);

    let vec_at = |phi: f64| -> [f64; 3] {
        let v = e1 * phi.cos() + e2 * phi.sin();
        [v[0], v[1], v[2]]
    };
    // hematoxylin absorbs more red than eosin, so the extreme with the
    // larger red OD component is the H column
    let a = vec_at(phi_min);
    let b = vec_at(phi_max);
    let (h, e) = if a[0] >= b[0] { (a, b) } else { (b, a) };

    let mut profile = StainProfile::new(h, e, [1.0, 1.0])?;
    let mut c0: Vec<f64> = Vec::with_capacity(tissue.len());
    let mut c1: Vec<f64> = Vec::with_capacity(tissue.len());
    for v in &tissue {
        let c = unmix(&profile, *v);
        c0.push(c[0]);
        c1.push(c[1]);
    }
    c0.sort_by(|a, b| a.partial_cmp(b).unwrap());
    c1.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max = [percentile(&c0, 99.0), percentile(&c1, 99.0)];
    if max.iter().any(|m| *m <= 0.0) {
        return Err(Error::DegenerateStains(
            "99th-percentile stain concentration is not positive".into(),
        ));
    }
    profile.max_concentrations = max;
    Ok(profile)
}

/// Convenience wrapper: estimate a profile straight from an RGB image.
pub fn estimate_from_image(image: &RgbImage) -> Result<StainProfile> {
    let od = rgb_to_od(image, DEFAULT_I0);
    estimate_stain_profile(&od, DEFAULT_BETA, DEFAULT_ALPHA)
}

/// Remap an image from its source stain basis to a reference basis:
/// unmix concentrations, rescale per-stain maxima, remix, re-quantize.
/// The part of each pixel's OD the two-stain model cannot explain (the
/// unmixing residual, which includes the clipping error) is carried over
/// unchanged, so normalizing with source == reference is exactly the
/// identity before re-quantization.
pub fn normalize_stains(
    image: &RgbImage,
    source: &StainProfile,
    reference: &StainProfile,
) -> RgbImage {
    let scale = [
        reference.max_concentrations[0] / source.max_concentrations[0],
        reference.max_concentrations[1] / source.max_concentrations[1],
    ];
    let sm = &source.stain_matrix;
    let rm = &reference.stain_matrix;
    let mut out = RgbImage::new(image.width(), image.height());
    for (src, dst) in image.pixels().zip(out.pixels_mut()) {
        let od = [
            od_from_u8(src.0[0], DEFAULT_I0),
            od_from_u8(src.0[1], DEFAULT_I0),
            od_from_u8(src.0[2], DEFAULT_I0),
        ];
        let c = unmix(source, od);
        let cs = [c[0] * scale[0], c[1] * scale[1]];
        for ch in 0..3 {
            let residual = od[ch] - (sm[ch][0] * c[0] + sm[ch][1] * c[1]);
            let od_new = rm[ch][0] * cs[0] + rm[ch][1] * cs[1] + residual;
            dst.0[ch] = od_to_u8(od_new, DEFAULT_I0);
        }
    }
    out
}

//! Assembly of global and local feature maps into one descriptor per voxel.

use crate::error::{Error, Result};
use crate::grid::{normalize_in_place, trilinear_sample, FeatureMap, GridShape, Point3};

/// Linear resize of `map` onto `target`, aligning corner voxel centres:
/// target index `j` on an axis samples source coordinate
/// `j · (N_src − 1) / (N_dst − 1)`.
///
/// Vectors are left un-normalized.
pub fn resize_linear(map: &FeatureMap, target: &GridShape) -> Result<Vec<f64>> {
    let src = map.shape.dims;
    let dst = target.dims;
    let scale: [f64; 3] = std::array::from_fn(|a| {
        if dst[a] > 1 {
            (src[a] as f64 - 1.0) / (dst[a] as f64 - 1.0)
        } else {
            0.0
        }
    });
    let mut out = Vec::with_capacity(target.len() * map.channels());
    for i in 0..target.len() {
        let c = target.coord(i);
        let p: Point3 = std::array::from_fn(|a| c[a] as f64 * scale[a]);
        out.extend(trilinear_sample(map, p)?);
    }
    Ok(out)
}

/// Resizes `global` to the grid of `local`, normalizes each half per voxel,
/// concatenates `[global, local]` and normalizes the result to unit length.
///
/// When both halves are unit vectors the assembled vector is their
/// concatenation scaled by `1/√2`, so the cosine of two assembled vectors
/// is the mean of the half-wise cosines.
///
/// ```
/// use anatreg::{assemble_features, FeatureMap, GridShape};
///
/// let g = GridShape::new([1, 1, 1]).unwrap();
/// let global = FeatureMap::new(g, 1, vec![1.0]).unwrap();
/// let local = FeatureMap::new(g, 2, vec![0.0, 1.0]).unwrap();
/// let f = assemble_features(&global, &local).unwrap();
/// let h = 0.5f64.sqrt();
/// assert!((f.vector(0)[0] - h).abs() < 1e-15);
/// assert!((f.vector(0)[2] - h).abs() < 1e-15);
/// ```
pub fn assemble_features(global: &FeatureMap, local: &FeatureMap) -> Result<FeatureMap> {
    let shape = local.shape;
    let resized = resize_linear(global, &shape)?;
    let (cg, cl) = (global.channels(), local.channels());
    if resized.len() != shape.len() * cg {
        return Err(Error::ShapeMismatch("resized global map does not cover the local grid".into()));
    }
    let c = cg + cl;
    let mut data = Vec::with_capacity(shape.len() * c);
    for i in 0..shape.len() {
        let start = data.len();
        data.extend_from_slice(&resized[i * cg..(i + 1) * cg]);
        normalize_in_place(&mut data[start..]);
        let mid = data.len();
        data.extend_from_slice(local.vector(i));
        normalize_in_place(&mut data[mid..]);
    }
    FeatureMap::normalized(shape, c, data)
}

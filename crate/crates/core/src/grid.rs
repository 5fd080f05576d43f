//! Voxel grids, trilinear sampling and warping.
//!
//! All coordinates are continuous voxel coordinates ordered `(z, y, x)` with
//! the origin at the centre of voxel `(0, 0, 0)`. Physical spacing is carried
//! as metadata and only used when reporting distances.
//!
//! Sampling outside the grid replicates the border: every coordinate is
//! clamped to `[0, n - 1]` on its axis before the eight-neighbour blend.

use std::marker::PhantomData;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// A continuous point in voxel units, ordered `(z, y, x)`.
pub type Point3 = [f64; 3];

/// Norm below which an interpolated feature vector is treated as masked.
pub const MASK_NORM: f64 = 1e-8;

/// Tolerance on the unit-norm invariant of [`FeatureMap`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Extent and spacing of a 3D voxel grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridShape {
    /// Voxel counts `(D, H, W)`.
    pub dims: [usize; 3],
    /// Physical length per voxel along each axis.
    pub spacing: [f64; 3],
}

impl GridShape {
    /// A grid with unit spacing.
    pub fn new(dims: [usize; 3]) -> Result<Self> {
        Self::with_spacing(dims, [1.0; 3])
    }

    pub fn with_spacing(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!("dims {dims:?} must all be >= 1")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGrid(format!("spacing {spacing:?} must be positive")));
        }
        Ok(GridShape { dims, spacing })
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn coord(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[2];
        let rest = index / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], x]
    }

    #[inline]
    pub fn point(&self, index: usize) -> Point3 {
        let [z, y, x] = self.coord(index);
        [z as f64, y as f64, x as f64]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        p.iter().zip(self.dims).all(|(&c, d)| c < d)
    }

    /// Same voxel counts, ignoring spacing.
    pub fn same_dims(&self, other: &GridShape) -> bool {
        self.dims == other.dims
    }

    pub(crate) fn check_dims(&self, other: &GridShape, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }
}

/// One real intensity per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    pub shape: GridShape,
    pub values: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(shape: GridShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} voxels",
                values.len(),
                shape.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite intensity".into()));
        }
        Ok(ScalarVolume { shape, values })
    }

    pub fn filled(shape: GridShape, value: f64) -> Self {
        ScalarVolume {
            shape,
            values: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: GridShape, f: impl Fn([usize; 3]) -> f64) -> Self {
        let values = (0..shape.len()).map(|i| f(shape.coord(i))).collect();
        ScalarVolume { shape, values }
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.values[self.shape.index(z, y, x)]
    }
}

/// One non-negative integer label per voxel, 0 being background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub shape: GridShape,
    pub labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(shape: GridShape, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} voxels",
                labels.len(),
                shape.len()
            )));
        }
        Ok(LabelVolume { shape, labels })
    }

    pub fn from_fn(shape: GridShape, f: impl Fn([usize; 3]) -> u32) -> Self {
        let labels = (0..shape.len()).map(|i| f(shape.coord(i))).collect();
        LabelVolume { shape, labels }
    }
}

/// Dense per-voxel feature vectors, each of unit norm or exactly zero (masked).
///
/// Storage is voxel-major: the `channels` values of voxel `i` live at
/// `data[i * channels..(i + 1) * channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub shape: GridShape,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    /// Wraps vectors that already satisfy the unit-norm invariant.
    pub fn new(shape: GridShape, channels: usize, data: Vec<f64>) -> Result<Self> {
        let map = Self::unchecked(shape, channels, data)?;
        for (i, v) in map.data.chunks_exact(channels).enumerate() {
            let n = norm(v);
            let masked = v.iter().all(|&c| c == 0.0);
            if !n.is_finite() || (!masked && (n - 1.0).abs() > UNIT_NORM_TOL) {
                return Err(Error::InvalidGrid(format!(
                    "feature vector at voxel {:?} has norm {n}",
                    shape.coord(i)
                )));
            }
        }
        Ok(map)
    }

    /// Normalizes every vector to unit length; vectors with norm below
    /// [`MASK_NORM`] become the masked zero vector.
    pub fn normalized(shape: GridShape, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidGrid("feature maps need at least one channel".into()));
        }
        data.chunks_exact_mut(channels).for_each(normalize_in_place);
        Self::unchecked(shape, channels, data)
    }

    fn unchecked(shape: GridShape, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidGrid("feature maps need at least one channel".into()));
        }
        if data.len() != shape.len() * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {} voxels x {channels} channels",
                data.len(),
                shape.len()
            )));
        }
        Ok(FeatureMap {
            shape,
            channels,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn vector(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn vector_at(&self, p: [usize; 3]) -> &[f64] {
        self.vector(self.shape.index(p[0], p[1], p[2]))
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.vector(index).iter().all(|&c| c == 0.0)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

pub(crate) fn normalize_in_place(v: &mut [f64]) {
    let n = norm(v);
    if n < MASK_NORM || !n.is_finite() {
        v.fill(0.0);
    } else {
        v.iter_mut().for_each(|c| *c /= n);
    }
}

/// Marker for fields holding displacements (`phi^-1(x) = x + u(x)`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Displacement;

/// Marker for stationary velocity fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Velocity;

/// A 3-vector per voxel, in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<K> {
    pub shape: GridShape,
    pub data: Vec<[f64; 3]>,
    kind: PhantomData<K>,
}

pub type DisplacementField = VectorField<Displacement>;
pub type VelocityField = VectorField<Velocity>;

impl<K> VectorField<K> {
    pub fn new(shape: GridShape, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} vectors for {} voxels",
                data.len(),
                shape.len()
            )));
        }
        if data.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NumericalDivergence("non-finite field component".into()));
        }
        Ok(Self::from_vec(shape, data))
    }

    pub(crate) fn from_vec(shape: GridShape, data: Vec<[f64; 3]>) -> Self {
        VectorField {
            shape,
            data,
            kind: PhantomData,
        }
    }

    pub fn zeros(shape: GridShape) -> Self {
        Self::from_vec(shape, vec![[0.0; 3]; shape.len()])
    }

    pub fn constant(shape: GridShape, value: [f64; 3]) -> Self {
        Self::from_vec(shape, vec![value; shape.len()])
    }

    pub fn from_fn(shape: GridShape, f: impl Fn([usize; 3]) -> [f64; 3]) -> Self {
        Self::from_vec(shape, (0..shape.len()).map(|i| f(shape.coord(i))).collect())
    }

    /// Reinterprets the vectors under another field kind.
    pub fn cast<L>(self) -> VectorField<L> {
        VectorField::from_vec(self.shape, self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().flatten().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::from_vec(
            self.shape,
            self.data
                .iter()
                .map(|v| [v[0] * factor, v[1] * factor, v[2] * factor])
                .collect(),
        )
    }

    pub(crate) fn flat(&self) -> Vec<f64> {
        self.data.iter().flatten().copied().collect()
    }

    pub(crate) fn from_flat(shape: GridShape, flat: &[f64]) -> Self {
        Self::from_vec(
            shape,
            flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        )
    }
}

/// Eight-neighbour trilinear stencil at a (clamped) continuous point.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    /// Flat indices of the eight corners.
    pub index: [usize; 8],
    /// Blend weights; they sum to one.
    pub weight: [f64; 8],
    /// Derivative of each weight with respect to the point. Axes on which
    /// the point was clamped contribute zero.
    pub dweight: [[f64; 3]; 8],
}

impl Stencil {
    pub fn at(shape: &GridShape, p: Point3) -> Result<Stencil> {
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidCoordinate(p));
        }
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut t = [0.0; 3];
        let mut active = [0.0; 3];
        for a in 0..3 {
            let n = shape.dims[a];
            if n == 1 {
                continue;
            }
            let top = (n - 1) as f64;
            let c = p[a].clamp(0.0, top);
            let i0 = (c.floor() as usize).min(n - 2);
            lo[a] = i0;
            hi[a] = i0 + 1;
            t[a] = c - i0 as f64;
            if (0.0..=top).contains(&p[a]) {
                active[a] = 1.0;
            }
        }
        let mut st = Stencil {
            index: [0; 8],
            weight: [0.0; 8],
            dweight: [[0.0; 3]; 8],
        };
        for k in 0..8 {
            let bit = [(k >> 2) & 1, (k >> 1) & 1, k & 1];
            let mut idx = [0usize; 3];
            let mut f = [0.0; 3];
            let mut df = [0.0; 3];
            for a in 0..3 {
                if bit[a] == 1 {
                    idx[a] = hi[a];
                    f[a] = t[a];
                    df[a] = 1.0;
                } else {
                    idx[a] = lo[a];
                    f[a] = 1.0 - t[a];
                    df[a] = -1.0;
                }
            }
            st.index[k] = shape.index(idx[0], idx[1], idx[2]);
            st.weight[k] = f[0] * f[1] * f[2];
            st.dweight[k] = [
                active[0] * df[0] * f[1] * f[2],
                active[1] * f[0] * df[1] * f[2],
                active[2] * f[0] * f[1] * df[2],
            ];
        }
        Ok(st)
    }
}

/// Fields that can be sampled with a trilinear stencil.
pub trait Interpolate {
    type Value;
    fn grid(&self) -> &GridShape;
    fn blend(&self, stencil: &Stencil) -> Self::Value;
}

impl Interpolate for ScalarVolume {
    type Value = f64;

    fn grid(&self) -> &GridShape {
        &self.shape
    }

    fn blend(&self, st: &Stencil) -> f64 {
        (0..8).map(|k| st.weight[k] * self.values[st.index[k]]).sum()
    }
}

impl<K> Interpolate for VectorField<K> {
    type Value = [f64; 3];

    fn grid(&self) -> &GridShape {
        &self.shape
    }

    fn blend(&self, st: &Stencil) -> [f64; 3] {
        let mut out = [0.0; 3];
        for k in 0..8 {
            let v = self.data[st.index[k]];
            for c in 0..3 {
                out[c] += st.weight[k] * v[c];
            }
        }
        out
    }
}

/// Raw (not re-normalized) channel-wise blend.
impl Interpolate for FeatureMap {
    type Value = Vec<f64>;

    fn grid(&self) -> &GridShape {
        &self.shape
    }

    fn blend(&self, st: &Stencil) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        for k in 0..8 {
            let w = st.weight[k];
            if w != 0.0 {
                for (o, v) in out.iter_mut().zip(self.vector(st.index[k])) {
                    *o += w * v;
                }
            }
        }
        out
    }
}

/// Trilinear interpolation of `field` at `p`, replicating the border.
pub fn trilinear_sample<F: Interpolate>(field: &F, p: Point3) -> Result<F::Value> {
    let st = Stencil::at(field.grid(), p)?;
    Ok(field.blend(&st))
}

/// A continuous map from fixed-grid coordinates into the moving domain.
pub trait SpatialMap: Sync {
    fn apply(&self, x: Point3) -> Point3;

    /// The grid the map is materialized on, if any. Lazily evaluated maps
    /// return `None` and accept any target grid.
    fn domain(&self) -> Option<&GridShape> {
        None
    }
}

/// `x -> x`.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityMap;

impl SpatialMap for IdentityMap {
    fn apply(&self, x: Point3) -> Point3 {
        x
    }
}

/// A displacement field acts as the map `x -> x + u(x)`.
impl SpatialMap for DisplacementField {
    fn apply(&self, x: Point3) -> Point3 {
        let u = Stencil::at(&self.shape, x)
            .map(|st| self.blend(&st))
            .unwrap_or([0.0; 3]);
        add(x, u)
    }

    fn domain(&self) -> Option<&GridShape> {
        Some(&self.shape)
    }
}

impl<M: SpatialMap + ?Sized> SpatialMap for &M {
    fn apply(&self, x: Point3) -> Point3 {
        (**self).apply(x)
    }

    fn domain(&self) -> Option<&GridShape> {
        (**self).domain()
    }
}

impl<F: Fn(Point3) -> Point3 + Sync> SpatialMap for FnMap<F> {
    fn apply(&self, x: Point3) -> Point3 {
        (self.0)(x)
    }
}

/// Adapts a closure into a [`SpatialMap`].
pub struct FnMap<F>(pub F);

#[inline]
pub(crate) fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn check_map_domain<M: SpatialMap>(map: &M, target: &GridShape) -> Result<()> {
    match map.domain() {
        Some(d) => d.check_dims(target, "map domain vs fixed grid"),
        None => Ok(()),
    }
}

/// Evaluates `map` at every voxel of `target`.
pub fn map_points<M: SpatialMap>(map: &M, target: &GridShape) -> Vec<Point3> {
    (0..target.len())
        .into_par_iter()
        .map(|i| map.apply(target.point(i)))
        .collect()
}

/// Pulls `volume` back onto `target`: `out[x] = volume(map(x))`.
pub fn warp_scalar<M: SpatialMap>(
    volume: &ScalarVolume,
    map: &M,
    target: &GridShape,
) -> Result<ScalarVolume> {
    check_map_domain(map, target)?;
    let values = map_points(map, target)
        .into_par_iter()
        .map(|p| trilinear_sample(volume, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScalarVolume {
        shape: *target,
        values,
    })
}

/// Channel-wise pullback followed by per-voxel re-normalization.
///
/// Points landing exactly on a voxel centre copy that voxel's vector.
pub fn warp_features<M: SpatialMap>(
    features: &FeatureMap,
    map: &M,
    target: &GridShape,
) -> Result<FeatureMap> {
    check_map_domain(map, target)?;
    let vectors = map_points(map, target)
        .into_par_iter()
        .map(|p| {
            let st = Stencil::at(&features.shape, p)?;
            if let Some(k) = st.weight.iter().position(|&w| w == 1.0) {
                return Ok(features.vector(st.index[k]).to_vec());
            }
            let mut v = features.blend(&st);
            normalize_in_place(&mut v);
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureMap::unchecked(*target, features.channels, vectors.concat())
}

/// Nearest-neighbour pullback of labels (keeps them categorical).
pub fn warp_labels<M: SpatialMap>(
    labels: &LabelVolume,
    map: &M,
    target: &GridShape,
) -> Result<LabelVolume> {
    check_map_domain(map, target)?;
    let shape = labels.shape;
    let out = map_points(map, target)
        .into_iter()
        .map(|p| {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidCoordinate(p));
            }
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let top = (shape.dims[a] - 1) as f64;
                idx[a] = p[a].clamp(0.0, top).round() as usize;
            }
            Ok(labels.labels[shape.index(idx[0], idx[1], idx[2])])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelVolume {
        shape: *target,
        labels: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(shape: GridShape) -> ScalarVolume {
        ScalarVolume::from_fn(shape, |[z, y, x]| {
            (z * 100 + y * 10 + x) as f64 + 0.25 * ((z * y) as f64).sin()
        })
    }

    /// Brute-force trilinear value from the eight clamped corner weights.
    fn oracle_sample(vol: &ScalarVolume, p: Point3) -> f64 {
        let d = vol.shape.dims;
        let c: Vec<f64> = (0..3).map(|a| p[a].clamp(0.0, (d[a] - 1) as f64)).collect();
        let mut acc = 0.0;
        for z in 0..d[0] {
            for y in 0..d[1] {
                for x in 0..d[2] {
                    let w = [z, y, x]
                        .iter()
                        .zip(&c)
                        .map(|(&i, &ci)| (1.0 - (i as f64 - ci).abs()).max(0.0))
                        .product::<f64>();
                    acc += w * vol.at(z, y, x);
                }
            }
        }
        acc
    }

    #[test]
    fn exact_on_nodes() {
        let shape = GridShape::new([4, 4, 4]).unwrap();
        let vol = ramp(shape);
        assert_eq!(trilinear_sample(&vol, [1.0, 1.0, 1.0]).unwrap(), vol.at(1, 1, 1));
    }

    #[test]
    fn midpoint_between_nodes() {
        let shape = GridShape::new([2, 2, 2]).unwrap();
        let vol = ScalarVolume::from_fn(shape, |[_, _, x]| 2.0 * x as f64);
        assert_eq!(trilinear_sample(&vol, [0.0, 0.0, 0.5]).unwrap(), 1.0);
    }

    #[test]
    fn clamps_outside_grid() {
        let shape = GridShape::new([4, 4, 4]).unwrap();
        let vol = ramp(shape);
        let got = trilinear_sample(&vol, [-0.5, 0.0, 0.0]).unwrap();
        assert_eq!(got, vol.at(0, 0, 0));
        assert!((got - oracle_sample(&vol, [-0.5, 0.0, 0.0])).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_coordinates() {
        let shape = GridShape::new([2, 2, 2]).unwrap();
        let vol = ScalarVolume::filled(shape, 1.0);
        assert!(matches!(
            trilinear_sample(&vol, [f64::NAN, 0.0, 0.0]),
            Err(Error::InvalidCoordinate(_))
        ));
    }

    #[test]
    fn weight_derivatives_match_differences() {
        let shape = GridShape::new([5, 4, 6]).unwrap();
        let p = [1.3, 2.7, 0.4];
        let st = Stencil::at(&shape, p).unwrap();
        let h = 1e-6;
        for a in 0..3 {
            let mut q = p;
            q[a] += h;
            let s2 = Stencil::at(&shape, q).unwrap();
            for k in 0..8 {
                let fd = (s2.weight[k] - st.weight[k]) / h;
                assert!((fd - st.dweight[k][a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_warp_reproduces_volume() {
        let shape = GridShape::new([4, 5, 3]).unwrap();
        let vol = ramp(shape);
        assert_eq!(warp_scalar(&vol, &IdentityMap, &shape).unwrap(), vol);
    }

    #[test]
    fn integer_shift_replicates_border() {
        let shape = GridShape::new([3, 3, 4]).unwrap();
        let vol = ramp(shape);
        let shift = DisplacementField::constant(shape, [0.0, 0.0, 1.0]);
        let out = warp_scalar(&vol, &shift, &shape).unwrap();
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..4 {
                    let src = (x + 1).min(3);
                    assert_eq!(out.at(z, y, x), vol.at(z, y, src));
                }
            }
        }
    }

    #[test]
    fn constant_pullback() {
        let shape = GridShape::new([4, 4, 4]).unwrap();
        let vol = ramp(shape);
        let map = FnMap(|_| [2.0, 1.0, 3.0]);
        let out = warp_scalar(&vol, &map, &shape).unwrap();
        assert!(out.values.iter().all(|&v| v == vol.at(2, 1, 3)));
    }

    #[test]
    fn warp_rejects_mismatched_field() {
        let shape = GridShape::new([4, 4, 4]).unwrap();
        let other = GridShape::new([4, 4, 5]).unwrap();
        let vol = ScalarVolume::filled(shape, 0.0);
        let field = DisplacementField::zeros(other);
        assert!(matches!(
            warp_scalar(&vol, &field, &shape),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn feature_midpoint_of_orthogonal_vectors() {
        let shape = GridShape::new([1, 1, 2]).unwrap();
        let fm = FeatureMap::new(shape, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let target = GridShape::new([1, 1, 1]).unwrap();
        let out = warp_features(&fm, &FnMap(|_| [0.0, 0.0, 0.5]), &target).unwrap();
        let v = out.vector(0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((norm(v) - 1.0).abs() < 1e-15);
        assert!((v[0] - s).abs() < 1e-15 && (v[1] - s).abs() < 1e-15);
    }

    #[test]
    fn feature_warp_masks_cancelling_vectors() {
        let shape = GridShape::new([1, 1, 2]).unwrap();
        let fm = FeatureMap::new(shape, 1, vec![1.0, -1.0]).unwrap();
        let target = GridShape::new([1, 1, 1]).unwrap();
        let out = warp_features(&fm, &FnMap(|_| [0.0, 0.0, 0.5]), &target).unwrap();
        assert!(out.is_masked(0));
    }

    #[test]
    fn feature_map_rejects_non_unit_vectors() {
        let shape = GridShape::new([1, 1, 1]).unwrap();
        assert!(FeatureMap::new(shape, 2, vec![0.5, 0.5]).is_err());
        assert!(FeatureMap::new(shape, 2, vec![0.0, 0.0]).is_ok());
    }

    #[test]
    fn grid_rejects_zero_dims_and_bad_spacing() {
        assert!(GridShape::new([0, 1, 1]).is_err());
        assert!(GridShape::with_spacing([1, 1, 1], [1.0, 0.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force_oracle(z in -1.5f64..4.5, y in -1.5f64..4.5, x in -1.5f64..5.5) {
            let shape = GridShape::new([4, 4, 5]).unwrap();
            let vol = ramp(shape);
            let got = trilinear_sample(&vol, [z, y, x]).unwrap();
            prop_assert!((got - oracle_sample(&vol, [z, y, x])).abs() < 1e-10);
        }

        #[test]
        fn linear_between_nodes(z in 0usize..3, y in 0usize..3, x in 0usize..3, t in 0.0f64..1.0, axis in 0usize..3) {
            let shape = GridShape::new([4, 4, 4]).unwrap();
            let vol = ramp(shape);
            let a = [z as f64, y as f64, x as f64];
            let mut b = a;
            b[axis] += 1.0;
            let mut p = a;
            p[axis] += t;
            let va = trilinear_sample(&vol, a).unwrap();
            let vb = trilinear_sample(&vol, b).unwrap();
            let vp = trilinear_sample(&vol, p).unwrap();
            prop_assert!((vp - ((1.0 - t) * va + t * vb)).abs() < 1e-10);
        }

        #[test]
        fn clamped_equals_nearest_in_bounds(z in -10.0f64..10.0, y in -10.0f64..10.0, x in -10.0f64..10.0) {
            let shape = GridShape::new([3, 4, 5]).unwrap();
            let vol = ramp(shape);
            let q = [z.clamp(0.0, 2.0), y.clamp(0.0, 3.0), x.clamp(0.0, 4.0)];
            prop_assert_eq!(trilinear_sample(&vol, [z, y, x]).unwrap(), trilinear_sample(&vol, q).unwrap());
        }

        #[test]
        fn warped_features_are_unit_or_masked(seed in 0u64..1000, amp in 0.0f64..3.0) {
            let shape = GridShape::new([4, 4, 4]).unwrap();
            let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let mut next = move || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            };
            let raw: Vec<f64> = (0..shape.len() * 3).map(|_| next()).collect();
            let fm = FeatureMap::normalized(shape, 3, raw).unwrap();
            let field = DisplacementField::from_fn(shape, |[z, y, x]| {
                let s = (z + 2 * y + 3 * x) as f64;
                [amp * s.sin(), amp * s.cos(), -amp * (0.5 * s).sin()]
            });
            let out = warp_features(&fm, &field, &shape).unwrap();
            for i in 0..shape.len() {
                let n = norm(out.vector(i));
                prop_assert!(out.is_masked(i) || (n - 1.0).abs() < 1e-12);
            }
        }
    }
}

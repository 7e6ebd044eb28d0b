//! Sums of hyperrectangular basis functions over a bounded property box.
//!
//! Each dimension is covered by `tiles` intervals of equal length that
//! overlap by `overlap`; tiles at the ends extend past the box so that every
//! point lies in the same number of tiles. With `K = 1/(1 - overlap)` tiles
//! per point along a dimension, the stride is `L/(T - K + 1)` and tile `j`
//! spans `[lo + (j - K + 1)·stride, lo + (j + 1)·stride)`.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffmath::{ParamId, ParamStore, Tape, Var};
use crate::distributions::BoundedTransform;
use crate::error::{DpmsError, Result};

/// Fraction of a dataset allowed to fall outside the box before erroring.
pub const MAX_CLAMPED_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridLayout {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub tiles: Vec<usize>,
    pub overlap: Vec<f64>,
}

impl GridLayout {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, tiles: Vec<usize>, overlap: Vec<f64>) -> Result<Self> {
        let r = lo.len();
        if r == 0 || hi.len() != r || tiles.len() != r || overlap.len() != r {
            return Err(DpmsError::Invalid("grid layout needs equal-length, non-empty lo/hi/tiles/overlap".into()));
        }
        let layout = Self { lo, hi, tiles, overlap };
        for d in 0..r {
            if !(layout.lo[d].is_finite() && layout.hi[d].is_finite() && layout.hi[d] > layout.lo[d]) {
                return Err(DpmsError::Invalid(format!("dimension {d}: empty box [{}, {}]", layout.lo[d], layout.hi[d])));
            }
            let k = layout.per_dim_members(d)?;
            if layout.tiles[d] < k {
                return Err(DpmsError::Invalid(format!(
                    "dimension {d}: {} tiles cannot overlap {} deep",
                    layout.tiles[d], k
                )));
            }
        }
        Ok(layout)
    }

    /// Box `[lo, hi]` with the same tiling along every dimension.
    pub fn uniform(lo: &[f64], hi: &[f64], tiles: &[usize], overlap: f64) -> Result<Self> {
        Self::new(lo.to_vec(), hi.to_vec(), tiles.to_vec(), vec![overlap; lo.len()])
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    pub fn n_tiles(&self) -> usize {
        self.tiles.iter().product()
    }

    /// Tiles containing a point along dimension `d`.
    fn per_dim_members(&self, d: usize) -> Result<usize> {
        let f = self.overlap[d];
        if !(0.0..1.0).contains(&f) {
            return Err(DpmsError::Invalid(format!("overlap {f} outside [0, 1)")));
        }
        let k = 1.0 / (1.0 - f);
        let kr = k.round();
        if (k - kr).abs() > 1e-9 {
            return Err(DpmsError::Invalid(format!(
                "overlap {f} gives {k} tiles per point; constant membership needs 1/(1 - overlap) to be an integer"
            )));
        }
        Ok(kr as usize)
    }

    fn members(&self, d: usize) -> usize {
        self.per_dim_members(d).expect("validated layout")
    }

    /// Number of tiles every point belongs to.
    pub fn cardinality(&self) -> usize {
        (0..self.dims()).map(|d| self.members(d)).product()
    }

    pub fn stride(&self, d: usize) -> f64 {
        (self.hi[d] - self.lo[d]) / (self.tiles[d] - self.members(d) + 1) as f64
    }

    /// `[lead, trail)` of tile `j` along dimension `d`.
    pub fn tile_interval(&self, d: usize, j: usize) -> (f64, f64) {
        let s = self.stride(d);
        let k = self.members(d) as f64;
        let j = j as f64;
        (self.lo[d] + (j - k + 1.0) * s, self.lo[d] + (j + 1.0) * s)
    }

    /// Row-major flat tile index.
    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.tiles).fold(0, |acc, (&j, &t)| acc * t + j)
    }

    /// Appends the tile indices containing `point`; returns whether any
    /// coordinate had to be clamped into the box.
    fn push_membership(&self, point: &[f64], out: &mut Vec<usize>) -> Result<bool> {
        let r = self.dims();
        if point.len() != r {
            return Err(DpmsError::shape("property point", &[r], &[point.len()]));
        }
        let mut clamped = false;
        let mut first = vec![0usize; r];
        for d in 0..r {
            let x = point[d];
            if x.is_nan() {
                return Err(DpmsError::NonFinite(format!("property coordinate {d}")));
            }
            let xc = x.clamp(self.lo[d], self.hi[d]);
            clamped |= xc != x;
            let k = self.members(d);
            let q = ((xc - self.lo[d]) / self.stride(d)).floor();
            // the upper face belongs to the last interval
            first[d] = (q.max(0.0) as usize).min(self.tiles[d] - k);
        }
        let card = self.cardinality();
        let start = out.len();
        out.reserve(card);
        let mut offs = vec![0usize; r];
        for _ in 0..card {
            let idx = (0..r).fold(0, |acc, d| acc * self.tiles[d] + first[d] + offs[d]);
            out.push(idx);
            for d in (0..r).rev() {
                offs[d] += 1;
                if offs[d] < self.members(d) {
                    break;
                }
                offs[d] = 0;
            }
        }
        debug_assert_eq!(out.len() - start, card);
        Ok(clamped)
    }

    /// Tiles containing one point.
    pub fn membership(&self, point: &[f64]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        self.push_membership(point, &mut out)?;
        Ok(out)
    }

    /// Membership for every row of `points` (n×r). Fails if more than 1% of
    /// the rows needed clamping.
    pub fn memberships(&self, points: &Array2<f64>) -> Result<Membership> {
        let n = points.nrows();
        let mut indices = Vec::with_capacity(n * self.cardinality());
        let mut clamped = 0;
        let mut row = vec![0.0; self.dims()];
        for p in points.rows() {
            if p.len() != self.dims() {
                return Err(DpmsError::shape("property matrix columns", &[self.dims()], &[p.len()]));
            }
            row.iter_mut().zip(p.iter()).for_each(|(a, &b)| *a = b);
            if self.push_membership(&row, &mut indices)? {
                clamped += 1;
            }
        }
        if clamped > 0 {
            log::warn!("{clamped} of {n} property points clamped into the grid box");
        }
        if clamped as f64 > MAX_CLAMPED_FRACTION * n as f64 {
            return Err(DpmsError::OutOfBox { clamped, total: n });
        }
        Ok(Membership {
            indices: indices.into(),
            per_point: self.cardinality(),
            points: n,
            clamped,
        })
    }

    /// Regular `k^r` lattice of cell-centre points covering the box.
    pub fn lattice(&self, per_dim: usize) -> Array2<f64> {
        let r = self.dims();
        let total = per_dim.pow(r as u32);
        let mut out = Array2::zeros((total, r));
        for i in 0..total {
            let mut rem = i;
            for d in (0..r).rev() {
                let k = rem % per_dim;
                rem /= per_dim;
                out[[i, d]] = self.lo[d] + (k as f64 + 0.5) / per_dim as f64 * (self.hi[d] - self.lo[d]);
            }
        }
        out
    }
}

/// Precomputed tile membership for a fixed set of points.
#[derive(Clone, Debug)]
pub struct Membership {
    pub indices: Arc<[usize]>,
    pub per_point: usize,
    pub points: usize,
    pub clamped: usize,
}

/// Map from the raw SHBF sum to the field value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldTransform {
    Identity,
    /// `exp(x) + 1e-6`.
    Positive,
    Bounded { lo: f64, hi: f64 },
}

pub const POSITIVE_FLOOR: f64 = 1e-6;

impl FieldTransform {
    pub fn bounded(t: BoundedTransform) -> Self {
        FieldTransform::Bounded { lo: t.lo, hi: t.hi }
    }

    pub fn forward(&self, x: f64) -> f64 {
        match *self {
            FieldTransform::Identity => x,
            FieldTransform::Positive => x.exp() + POSITIVE_FLOOR,
            FieldTransform::Bounded { lo, hi } => BoundedTransform { lo, hi }.forward(x),
        }
    }

    pub fn inverse(&self, y: f64) -> Result<f64> {
        match *self {
            FieldTransform::Identity => Ok(y),
            FieldTransform::Positive => {
                if y <= POSITIVE_FLOOR {
                    return Err(DpmsError::Invalid(format!("positive field value {y} must exceed {POSITIVE_FLOOR}")));
                }
                Ok((y - POSITIVE_FLOOR).ln())
            }
            FieldTransform::Bounded { lo, hi } => BoundedTransform { lo, hi }.inverse(y),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        match *self {
            FieldTransform::Identity => x,
            FieldTransform::Positive => {
                let e = tape.exp(x);
                tape.shift(e, POSITIVE_FLOOR)
            }
            FieldTransform::Bounded { lo, hi } => BoundedTransform { lo, hi }.apply(tape, x),
        }
    }
}

/// An SHBF sum passed through a transform; coefficients live in a store block
/// of shape (tiles, 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShbfField {
    pub layout: GridLayout,
    pub coefficients: ParamId,
    pub transform: FieldTransform,
}

impl ShbfField {
    /// Registers a field whose value is `constant` everywhere.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layout: GridLayout,
        transform: FieldTransform,
        constant: f64,
    ) -> Result<Self> {
        let per = transform.inverse(constant)? / layout.cardinality() as f64;
        let coefficients = store.add(name, Array2::from_elem((layout.n_tiles(), 1), per))?;
        Ok(Self {
            layout,
            coefficients,
            transform,
        })
    }

    /// Sets every coefficient so the field is `constant` everywhere.
    pub fn set_constant(&self, store: &mut ParamStore, constant: f64) -> Result<()> {
        let per = self.transform.inverse(constant)? / self.layout.cardinality() as f64;
        store.values_mut(self.coefficients).fill(per);
        Ok(())
    }

    /// Records the field at precomputed memberships: n×1.
    pub fn record(&self, tape: &mut Tape, store: &ParamStore, membership: &Membership) -> Var {
        let c = tape.param(store, self.coefficients);
        let raw = tape.gather_sum(c, membership.indices.clone(), membership.per_point);
        self.transform.apply(tape, raw)
    }

    /// Field values at precomputed memberships (n×1).
    pub fn evaluate_membership(&self, store: &ParamStore, membership: &Membership) -> Array2<f64> {
        let c = store.values(self.coefficients).as_slice().expect("standard layout");
        let mut out = Array2::zeros((membership.points, 1));
        for (i, chunk) in membership.indices.chunks_exact(membership.per_point).enumerate() {
            let raw: f64 = chunk.iter().map(|&j| c[j]).sum();
            out[[i, 0]] = self.transform.forward(raw);
        }
        out
    }

    /// Field values at the rows of `points` (n×r) as an n×1 column.
    pub fn evaluate(&self, store: &ParamStore, points: &Array2<f64>) -> Result<Array2<f64>> {
        let m = self.layout.memberships(points)?;
        Ok(self.evaluate_membership(store, &m))
    }

    /// Gradient of `Σ_i upstream_i · field(points_i)` w.r.t. the coefficients.
    pub fn grad_coefficients(&self, store: &ParamStore, points: &Array2<f64>, upstream: &Array2<f64>) -> Result<Array2<f64>> {
        let m = self.layout.memberships(points)?;
        if upstream.dim() != (m.points, 1) {
            return Err(DpmsError::shape("upstream gradient", &[m.points, 1], &[upstream.nrows(), upstream.ncols()]));
        }
        let mut tape = Tape::new();
        let f = self.record(&mut tape, store, &m);
        let u = tape.constant(upstream.clone());
        let w = tape.mul(f, u);
        let out = tape.sum(w);
        let grads = tape.gradients(out)?;
        Ok(grads
            .get(self.coefficients)
            .cloned()
            .unwrap_or_else(|| Array2::zeros((self.layout.n_tiles(), 1))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn non_overlapping_two_by_two() {
        let layout = GridLayout::uniform(&[0.0, 0.0], &[1.0, 1.0], &[2, 2], 0.0).unwrap();
        let mut store = ParamStore::new();
        let f = ShbfField::new(&mut store, "f", layout, FieldTransform::Identity, 0.0).unwrap();
        store.set_values(f.coefficients, array![[1.0], [2.0], [3.0], [4.0]]).unwrap();
        let v = f.evaluate(&store, &array![[0.25, 0.25], [0.25, 0.75], [0.75, 0.25]]).unwrap();
        assert_eq!(v, array![[1.0], [2.0], [3.0]]);
    }

    #[test]
    fn overlap_membership_counts() {
        let one_d = GridLayout::uniform(&[0.0], &[1.0], &[10], 0.5).unwrap();
        assert_eq!(one_d.membership(&[0.37]).unwrap().len(), 2);
        let big = GridLayout::uniform(&[0.0; 3], &[1.0; 3], &[140, 50, 20], 0.0).unwrap();
        assert_eq!(big.membership(&[0.1, 0.9, 0.5]).unwrap().len(), 1);
    }

    #[test]
    fn rejects_non_integer_depth() {
        assert!(GridLayout::uniform(&[0.0], &[1.0], &[10], 0.3).is_err());
        assert!(GridLayout::uniform(&[0.0], &[1.0], &[10], 2.0 / 3.0).is_ok());
    }

    #[test]
    fn clamping_is_counted_and_bounded() {
        let layout = GridLayout::uniform(&[0.0], &[1.0], &[4], 0.0).unwrap();
        let mut pts = Array2::from_elem((200, 1), 0.5);
        pts[[0, 0]] = 1.5;
        pts[[1, 0]] = -0.5;
        let m = layout.memberships(&pts).unwrap();
        assert_eq!(m.clamped, 2);
        assert_eq!(&m.indices[..2], &[3, 0]);
        pts[[2, 0]] = 7.0;
        assert!(matches!(layout.memberships(&pts), Err(DpmsError::OutOfBox { clamped: 3, .. })));
    }

    #[test]
    fn positive_transform_gradient_is_exp() {
        let layout = GridLayout::uniform(&[0.0], &[1.0], &[3], 0.0).unwrap();
        let mut store = ParamStore::new();
        let f = ShbfField::new(&mut store, "s", layout, FieldTransform::Positive, 1.0).unwrap();
        store.set_values(f.coefficients, array![[0.3], [-0.2], [0.7]]).unwrap();
        let g = f.grad_coefficients(&store, &array![[0.5]], &array![[1.0]]).unwrap();
        assert_eq!(g, array![[0.0], [(-0.2f64).exp()], [0.0]]);
    }
}

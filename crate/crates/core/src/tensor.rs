//! Coordinate-indexed sparse tensors over 2D (pillar) and 3D (voxel) grids.
//!
//! Coordinates are ordered `(batch, y, x[, z])`; `z` is the vertical axis.
//! A [`Layout`] owns the active coordinate set and its hash index and is shared
//! (`Arc`) between every tensor living on the same sites. Row order is an
//! implementation detail: two tensors are equal when they hold the same
//! features at the same coordinates.

use std::collections::HashMap;
use std::fmt;
use std::hash::{BuildHasherDefault, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;

pub const MAX_BATCH: usize = 1 << 8;
pub const MAX_AXIS: usize = 1 << 16;

/// One grid site. `pos` is `[y, x, z]`; rank-2 tensors keep `z = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord {
    pub batch: u32,
    pub pos: [u32; 3],
}

impl Coord {
    pub const fn new2(batch: u32, y: u32, x: u32) -> Self {
        Self {
            batch,
            pos: [y, x, 0],
        }
    }

    pub const fn new3(batch: u32, y: u32, x: u32, z: u32) -> Self {
        Self {
            batch,
            pos: [y, x, z],
        }
    }

    #[inline]
    pub fn y(&self) -> u32 {
        self.pos[0]
    }

    #[inline]
    pub fn x(&self) -> u32 {
        self.pos[1]
    }

    #[inline]
    pub fn z(&self) -> u32 {
        self.pos[2]
    }

    /// Packed hash key: 8 bits batch, 16 bits each for y, x, z.
    #[inline]
    pub fn key(&self) -> u64 {
        ((self.batch as u64) << 48)
            | ((self.pos[0] as u64) << 32)
            | ((self.pos[1] as u64) << 16)
            | self.pos[2] as u64
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(b{}, {}, {}, {})",
            self.batch, self.pos[0], self.pos[1], self.pos[2]
        )
    }
}

/// Hasher for already-packed integer keys.
#[derive(Default)]
pub struct KeyHasher(u64);

impl Hasher for KeyHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0 ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = crate::rng::mix64(v);
    }
}

pub type KeyMap<V> = HashMap<u64, V, BuildHasherDefault<KeyHasher>>;

static NEXT_LAYOUT_ID: AtomicU64 = AtomicU64::new(1);

/// Active coordinate set of a sparse tensor together with its hash index.
#[derive(Debug)]
pub struct Layout {
    id: u64,
    rank: usize,
    spatial_shape: Vec<usize>,
    batch_size: usize,
    stride: usize,
    coords: Vec<Coord>,
    index: KeyMap<usize>,
}

impl Layout {
    /// Validated layout; rejects duplicates and out-of-bounds coordinates.
    pub fn new(
        coords: Vec<Coord>,
        spatial_shape: &[usize],
        batch_size: usize,
    ) -> Result<Self> {
        let rank = spatial_shape.len();
        if !(rank == 2 || rank == 3) {
            return Err(Error::ShapeMismatch(format!("rank {rank} is not 2 or 3")));
        }
        if batch_size == 0 || batch_size > MAX_BATCH {
            return Err(Error::ShapeMismatch(format!(
                "batch size {batch_size} outside 1..={MAX_BATCH}"
            )));
        }
        if spatial_shape.iter().any(|&s| s == 0 || s > MAX_AXIS) {
            return Err(Error::ShapeMismatch(format!(
                "spatial shape {spatial_shape:?} has an axis outside 1..={MAX_AXIS}"
            )));
        }
        let mut index = KeyMap::with_capacity_and_hasher(coords.len(), Default::default());
        for (row, c) in coords.iter().enumerate() {
            let in_bounds = (c.batch as usize) < batch_size
                && (0..rank).all(|a| (c.pos[a] as usize) < spatial_shape[a])
                && (rank == 3 || c.pos[2] == 0);
            if !in_bounds {
                return Err(Error::OutOfBounds {
                    coord: c.to_string(),
                    shape: spatial_shape.to_vec(),
                    batch_size,
                });
            }
            if index.insert(c.key(), row).is_some() {
                return Err(Error::DuplicateCoord(c.to_string()));
            }
        }
        Ok(Self {
            id: NEXT_LAYOUT_ID.fetch_add(1, Ordering::Relaxed),
            rank,
            spatial_shape: spatial_shape.to_vec(),
            batch_size,
            stride: 1,
            coords,
            index,
        })
    }

    /// Built from coordinates already known to be distinct and in bounds.
    pub(crate) fn from_trusted(
        coords: Vec<Coord>,
        index: KeyMap<usize>,
        spatial_shape: Vec<usize>,
        batch_size: usize,
        stride: usize,
    ) -> Self {
        debug_assert_eq!(coords.len(), index.len());
        Self {
            id: NEXT_LAYOUT_ID.fetch_add(1, Ordering::Relaxed),
            rank: spatial_shape.len(),
            spatial_shape,
            batch_size,
            stride,
            coords,
            index,
        }
    }

    pub fn empty(spatial_shape: &[usize], batch_size: usize) -> Result<Self> {
        Self::new(Vec::new(), spatial_shape, batch_size)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// Unique identity, used to key rulebook caches.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.spatial_shape
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Cumulative BEV downsampling factor relative to the input grid.
    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn in_bounds(&self, c: &Coord) -> bool {
        (c.batch as usize) < self.batch_size
            && (0..self.rank).all(|a| (c.pos[a] as usize) < self.spatial_shape[a])
            && (self.rank == 3 || c.pos[2] == 0)
    }

    /// Row of `c`, `None` when inactive. Errors when `c` is outside the grid.
    pub fn lookup(&self, c: &Coord) -> Result<Option<usize>> {
        if !self.in_bounds(c) {
            return Err(Error::OutOfBounds {
                coord: c.to_string(),
                shape: self.spatial_shape.clone(),
                batch_size: self.batch_size,
            });
        }
        Ok(self.index.get(&c.key()).copied())
    }

    /// Row lookup without bounds checking (the caller guarantees bounds).
    #[inline]
    pub fn row_of(&self, c: &Coord) -> Option<usize> {
        self.index.get(&c.key()).copied()
    }

    /// Row lookup for a signed candidate position; `None` when outside the grid or inactive.
    #[inline]
    pub fn row_at(&self, batch: u32, pos: [i64; 3]) -> Option<usize> {
        for a in 0..3 {
            let lim = if a < self.rank {
                self.spatial_shape[a] as i64
            } else {
                1
            };
            if pos[a] < 0 || pos[a] >= lim {
                return None;
            }
        }
        let c = Coord {
            batch,
            pos: [pos[0] as u32, pos[1] as u32, pos[2] as u32],
        };
        self.row_of(&c)
    }

    /// Number of grid cells over all batches.
    pub fn volume(&self) -> usize {
        self.batch_size * self.spatial_shape.iter().product::<usize>()
    }

    /// Same sites viewed as rank 2 after collapsing a unit `z` axis.
    pub fn squeeze_z(&self) -> Result<Self> {
        if self.rank != 3 || self.spatial_shape[2] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "cannot drop z from shape {:?}",
                self.spatial_shape
            )));
        }
        Ok(Self::from_trusted(
            self.coords.clone(),
            self.index.clone(),
            self.spatial_shape[..2].to_vec(),
            self.batch_size,
            self.stride,
        ))
    }
}

/// Feature matrix attached to a shared [`Layout`].
#[derive(Clone, Debug)]
pub struct SparseTensor<T> {
    layout: Arc<Layout>,
    features: Matrix<T>,
}

impl<T: Real> SparseTensor<T> {
    /// Validated construction from parallel coordinate and feature lists.
    pub fn new(
        coords: Vec<Coord>,
        features: Matrix<T>,
        spatial_shape: &[usize],
        batch_size: usize,
    ) -> Result<Self> {
        if coords.len() != features.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} coords but {} feature rows",
                coords.len(),
                features.rows()
            )));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite("features".into()));
        }
        let layout = Layout::new(coords, spatial_shape, batch_size)?;
        Ok(Self {
            layout: Arc::new(layout),
            features,
        })
    }

    /// Attach features to an existing layout.
    pub fn from_layout(layout: Arc<Layout>, features: Matrix<T>) -> Result<Self> {
        if layout.len() != features.rows() {
            return Err(Error::ShapeMismatch(format!(
                "layout has {} sites but {} feature rows",
                layout.len(),
                features.rows()
            )));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite("features".into()));
        }
        Ok(Self { layout, features })
    }

    pub fn empty(spatial_shape: &[usize], batch_size: usize, channels: usize) -> Result<Self> {
        Self::new(Vec::new(), Matrix::zeros(0, channels), spatial_shape, batch_size)
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn into_features(self) -> Matrix<T> {
        self.features
    }

    pub fn coords(&self) -> &[Coord] {
        self.layout.coords()
    }

    pub fn rank(&self) -> usize {
        self.layout.rank()
    }

    pub fn spatial_shape(&self) -> &[usize] {
        self.layout.spatial_shape()
    }

    pub fn batch_size(&self) -> usize {
        self.layout.batch_size()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn lookup(&self, c: &Coord) -> Result<Option<usize>> {
        self.layout.lookup(c)
    }

    /// Feature row at `c` if active.
    pub fn feature_at(&self, c: &Coord) -> Option<&[T]> {
        self.layout.row_of(c).map(|r| self.features.row(r))
    }

    /// Dense `[batch, C, spatial...]` image, zeros at inactive sites.
    pub fn to_dense(&self) -> DenseArray<T> {
        let mut shape = vec![self.batch_size(), self.channels()];
        shape.extend_from_slice(self.spatial_shape());
        let mut dense = DenseArray::filled(&shape, T::ZERO);
        let rank = self.rank();
        for (row, c) in self.coords().iter().enumerate() {
            for (ch, &v) in self.features.row(row).iter().enumerate() {
                let mut idx = [0usize; 5];
                idx[0] = c.batch as usize;
                idx[1] = ch;
                for a in 0..rank {
                    idx[2 + a] = c.pos[a] as usize;
                }
                *dense.at_mut(&idx[..2 + rank]) = v;
            }
        }
        dense
    }

    /// Inverse of [`to_dense`](Self::to_dense) over the sites selected by
    /// `mask` (`[batch, spatial...]`). Rows follow the mask's row-major order.
    pub fn from_dense(dense: &DenseArray<T>, mask: &DenseArray<bool>) -> Result<Self> {
        let ds = dense.shape();
        let ms = mask.shape();
        if ds.len() < 4 || ds.len() > 5 || ms.len() + 1 != ds.len() || ms[0] != ds[0] || ms[1..] != ds[2..] {
            return Err(Error::ShapeMismatch(format!(
                "dense {ds:?} vs mask {ms:?}"
            )));
        }
        let (batch, channels, spatial) = (ds[0], ds[1], &ds[2..]);
        let rank = spatial.len();
        let sites: usize = spatial.iter().product();
        let mut coords = Vec::new();
        let mut data = Vec::new();
        for b in 0..batch {
            for s in 0..sites {
                if !mask.as_slice()[b * sites + s] {
                    continue;
                }
                let mut pos = [0u32; 3];
                let mut rem = s;
                for a in (0..rank).rev() {
                    pos[a] = (rem % spatial[a]) as u32;
                    rem /= spatial[a];
                }
                coords.push(Coord {
                    batch: b as u32,
                    pos,
                });
                for ch in 0..channels {
                    data.push(dense.as_slice()[(b * channels + ch) * sites + s]);
                }
            }
        }
        let n = coords.len();
        Self::new(coords, Matrix::from_vec(n, channels, data)?, spatial, batch)
    }

    /// Active-site mask `[batch, spatial...]`.
    pub fn active_mask(&self) -> DenseArray<bool> {
        let mut shape = vec![self.batch_size()];
        shape.extend_from_slice(self.spatial_shape());
        let mut mask = DenseArray::filled(&shape, false);
        let rank = self.rank();
        for c in self.coords() {
            let mut idx = [0usize; 4];
            idx[0] = c.batch as usize;
            for a in 0..rank {
                idx[1 + a] = c.pos[a] as usize;
            }
            *mask.at_mut(&idx[..1 + rank]) = true;
        }
        mask
    }

    /// Equality up to row order: same shape, same coordinate set, same features.
    pub fn same_as(&self, other: &SparseTensor<T>) -> bool {
        if self.spatial_shape() != other.spatial_shape()
            || self.batch_size() != other.batch_size()
            || self.channels() != other.channels()
            || self.len() != other.len()
        {
            return false;
        }
        self.coords().iter().enumerate().all(|(row, c)| {
            other
                .feature_at(c)
                .is_some_and(|f| f == self.features.row(row))
        })
    }
}

/// Minimal row-major n-dimensional array used by the dense oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseArray<T> {
    shape: Vec<usize>,
    strides: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy> DenseArray<T> {
    pub fn filled(shape: &[usize], value: T) -> Self {
        let mut strides = vec![1; shape.len()];
        for a in (0..shape.len().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * shape[a + 1];
        }
        Self {
            shape: shape.to_vec(),
            strides,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self>
    where
        T: Default,
    {
        let mut arr = Self::filled(shape, T::default());
        if data.len() != arr.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        arr.data = data;
        Ok(arr)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    #[inline]
    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn at_mut(&mut self, idx: &[usize]) -> &mut T {
        let o = self.offset(idx);
        &mut self.data[o]
    }
}

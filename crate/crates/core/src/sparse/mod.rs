//! Hash-indexed sparse tensors over an integer voxel grid.
//!
//! Coordinates are kept in canonical lexicographic order so that every
//! downstream result is independent of the order points were supplied in.

mod conv;

use std::sync::Arc;

use rustc_hash::FxHashMap;

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub use conv::{
    conv, conv_backward, conv_forward, kernel_offsets, sparse_conv, sparse_conv_up, ConvLayer,
    KernelMap,
};

pub type Coord = [i32; 3];

/// Coordinate → row lookup.
#[derive(Clone, Debug, Default)]
pub struct CoordIndex {
    map: FxHashMap<Coord, u32>,
}

impl CoordIndex {
    #[inline]
    pub fn get(&self, c: &Coord) -> Option<usize> {
        self.map.get(c).map(|&r| r as usize)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Builds the row index of `coords`; duplicates are an error.
pub fn build_index(coords: &[Coord]) -> Result<CoordIndex> {
    let mut map = FxHashMap::default();
    map.reserve(coords.len());
    for (row, c) in coords.iter().enumerate() {
        if map.insert(*c, row as u32).is_some() {
            return Err(Error::DuplicateCoord(*c));
        }
    }
    Ok(CoordIndex { map })
}

/// Sorted, unique, stride-aligned coordinates with their hash index.
#[derive(Clone, Debug)]
pub struct CoordSet {
    coords: Vec<Coord>,
    stride: i32,
    index: CoordIndex,
}

impl CoordSet {
    /// Sorts `coords` lexicographically and indexes them.
    pub fn new(mut coords: Vec<Coord>, stride: i32) -> Result<Self> {
        if stride < 1 {
            return Err(Error::Invalid(format!(
                "stride must be positive, got {stride}"
            )));
        }
        if let Some(c) = coords
            .iter()
            .find(|c| c.iter().any(|v| v.rem_euclid(stride) != 0))
        {
            return Err(Error::Geometry(format!(
                "coordinate {c:?} is not a multiple of stride {stride}"
            )));
        }
        coords.sort_unstable();
        let index = build_index(&coords)?;
        Ok(CoordSet {
            coords,
            stride,
            index,
        })
    }

    #[inline]
    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    #[inline]
    pub fn stride(&self) -> i32 {
        self.stride
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn lookup(&self, c: &Coord) -> Option<usize> {
        self.index.get(c)
    }

    /// Next pyramid level: floor quotients by twice the stride.
    pub fn coarsen(&self) -> CoordSet {
        let stride = self.stride * 2;
        let coords = downsample_coords(&self.coords, stride);
        let index = build_index(&coords).expect("downsampled coordinates are unique");
        CoordSet {
            coords,
            stride,
            index,
        }
    }
}

/// Unique `⌊c / stride⌋ · stride`, sorted lexicographically.
pub fn downsample_coords(coords: &[Coord], stride: i32) -> Vec<Coord> {
    assert!(stride >= 1);
    let mut out: Vec<Coord> = coords
        .iter()
        .map(|c| c.map(|v| v.div_euclid(stride) * stride))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Occupied rows within the `w³` window (in units of the stride) around row `i`,
/// ascending by row, each with the offset `c_i − c_j` in voxel units.
pub fn window_neighbors(set: &CoordSet, i: usize, w: usize) -> Result<Vec<(usize, Coord)>> {
    if w % 2 == 0 {
        return Err(Error::Invalid(format!("window size must be odd, got {w}")));
    }
    if i >= set.len() {
        return Err(Error::RowOutOfRange {
            row: i,
            len: set.len(),
        });
    }
    let mut out = Vec::new();
    window_neighbors_into(set, i, w, &mut out);
    Ok(out)
}

pub(crate) fn window_neighbors_into(
    set: &CoordSet,
    i: usize,
    w: usize,
    out: &mut Vec<(usize, Coord)>,
) {
    out.clear();
    let r = (w / 2) as i32;
    let s = set.stride;
    let ci = set.coords[i];
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                let cj = [ci[0] + dx * s, ci[1] + dy * s, ci[2] + dz * s];
                if let Some(j) = set.lookup(&cj) {
                    out.push((j, [ci[0] - cj[0], ci[1] - cj[1], ci[2] - cj[2]]));
                }
            }
        }
    }
    out.sort_unstable_by_key(|&(j, _)| j);
}

/// Neighbor lists for every row in one flat structure.
#[derive(Clone, Debug)]
pub struct NeighborTable {
    /// Row `i`'s neighbors are `entries[starts[i]..starts[i + 1]]`.
    pub starts: Vec<usize>,
    /// `(neighbor row, offset slot)` where the slot indexes [`NeighborTable::offsets`].
    pub entries: Vec<(u32, u32)>,
    /// Distinct offsets `c_i − c_j` in voxel units, z-fastest lexicographic.
    pub offsets: Vec<Coord>,
    pub window: usize,
}

impl NeighborTable {
    pub fn build(set: &CoordSet, w: usize) -> Result<Self> {
        if w % 2 == 0 {
            return Err(Error::Invalid(format!("window size must be odd, got {w}")));
        }
        let r = (w / 2) as i32;
        let s = set.stride;
        // slot of offset (c_i − c_j)/s = (a, b, c), each in [-r, r]
        let slot = |o: Coord| -> u32 {
            let wi = w as i32;
            (((o[0] / s + r) * wi + (o[1] / s + r)) * wi + (o[2] / s + r)) as u32
        };
        let offsets = kernel_offsets(w)
            .into_iter()
            .map(|o| o.map(|v| v * s))
            .collect();
        let mut starts = Vec::with_capacity(set.len() + 1);
        let mut entries = Vec::new();
        let mut buf = Vec::new();
        starts.push(0);
        for i in 0..set.len() {
            window_neighbors_into(set, i, w, &mut buf);
            entries.extend(buf.iter().map(|&(j, o)| (j as u32, slot(o))));
            starts.push(entries.len());
        }
        Ok(NeighborTable {
            starts,
            entries,
            offsets,
            window: w,
        })
    }

    pub fn neighbors(&self, i: usize) -> &[(u32, u32)] {
        &self.entries[self.starts[i]..self.starts[i + 1]]
    }

    pub fn rows(&self) -> usize {
        self.starts.len() - 1
    }
}

/// Coordinate set plus an aligned feature matrix.
#[derive(Clone, Debug)]
pub struct SparseTensor {
    pub coords: Arc<CoordSet>,
    pub feats: Tensor,
}

impl SparseTensor {
    /// Builds a tensor from unordered rows; rows are reordered canonically.
    pub fn new(coords: Vec<Coord>, feats: Tensor, stride: i32) -> Result<Self> {
        if coords.len() != feats.rows() {
            return Err(Error::Shape(format!(
                "{} coordinates but {} feature rows",
                coords.len(),
                feats.rows()
            )));
        }
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_unstable_by_key(|&i| coords[i]);
        let sorted: Vec<Coord> = order.iter().map(|&i| coords[i]).collect();
        let set = CoordSet::new(sorted, stride)?;
        let mut f = Tensor::zeros(feats.rows(), feats.cols());
        for (dst, &src) in order.iter().enumerate() {
            f.row_mut(dst).copy_from_slice(feats.row(src));
        }
        Ok(SparseTensor {
            coords: Arc::new(set),
            feats: f,
        })
    }

    pub fn from_parts(coords: Arc<CoordSet>, feats: Tensor) -> Result<Self> {
        if coords.len() != feats.rows() {
            return Err(Error::Shape(format!(
                "{} coordinates but {} feature rows",
                coords.len(),
                feats.rows()
            )));
        }
        Ok(SparseTensor { coords, feats })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }

    pub fn stride(&self) -> i32 {
        self.coords.stride()
    }

    /// Feature row at `c`, if occupied.
    pub fn feature_at(&self, c: &Coord) -> Option<&[f32]> {
        self.coords.lookup(c).map(|r| self.feats.row(r))
    }
}

/// Level 0 is the full-resolution geometry; level ℓ has stride 2^ℓ.
#[derive(Clone, Debug)]
pub struct GeometryPyramid {
    levels: Vec<Arc<CoordSet>>,
}

impl GeometryPyramid {
    /// Builds levels `0..=depth` from unordered, unique coordinates.
    pub fn build(coords: Vec<Coord>, depth: usize) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Geometry("empty geometry".into()));
        }
        let mut levels = vec![Arc::new(CoordSet::new(coords, 1)?)];
        for _ in 0..depth {
            let next = levels.last().unwrap().coarsen();
            levels.push(Arc::new(next));
        }
        Ok(GeometryPyramid { levels })
    }

    pub fn level(&self, l: usize) -> Result<&Arc<CoordSet>> {
        self.levels.get(l).ok_or_else(|| {
            Error::Geometry(format!(
                "pyramid has {} levels, level {l} requested",
                self.levels.len()
            ))
        })
    }

    /// Number of levels including level 0.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn random_coords(n: usize, extent: i32, seed: u64) -> Vec<Coord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = BTreeSet::new();
        while set.len() < n {
            set.insert([
                rng.gen_range(-extent..extent),
                rng.gen_range(-extent..extent),
                rng.gen_range(-extent..extent),
            ]);
        }
        set.into_iter().collect()
    }

    #[test]
    fn index_single_and_empty() {
        let idx = build_index(&[[0, 0, 0]]).unwrap();
        assert_eq!(idx.get(&[0, 0, 0]), Some(0));
        assert_eq!(idx.get(&[1, 0, 0]), None);
        let empty = build_index(&[]).unwrap();
        assert_eq!(empty.get(&[0, 0, 0]), None);
    }

    #[test]
    fn index_rejects_duplicates() {
        assert!(matches!(
            build_index(&[[1, 2, 3], [0, 0, 0], [1, 2, 3]]),
            Err(Error::DuplicateCoord([1, 2, 3]))
        ));
    }

    #[test]
    fn index_matches_linear_scan() {
        let mut coords = random_coords(1000, 50, 7);
        // shuffle so rows are not sorted
        coords.reverse();
        let idx = build_index(&coords).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..3000 {
            let q = [
                rng.gen_range(-52..52),
                rng.gen_range(-52..52),
                rng.gen_range(-52..52),
            ];
            let scan = coords.iter().position(|c| *c == q);
            assert_eq!(idx.get(&q), scan);
        }
        for (row, c) in coords.iter().enumerate() {
            assert_eq!(idx.get(c), Some(row));
        }
    }

    #[test]
    fn window_small_examples() {
        let set = CoordSet::new(vec![[0, 0, 0], [1, 0, 0], [3, 0, 0]], 1).unwrap();
        let n = window_neighbors(&set, 0, 3).unwrap();
        assert_eq!(n, vec![(0, [0, 0, 0]), (1, [-1, 0, 0])]);

        let lone = CoordSet::new(vec![[5, 5, 5]], 1).unwrap();
        for w in [1, 3, 5, 9] {
            assert_eq!(window_neighbors(&lone, 0, w).unwrap(), vec![(0, [0, 0, 0])]);
        }
        assert!(matches!(
            window_neighbors(&lone, 1, 3),
            Err(Error::RowOutOfRange { .. })
        ));
        assert!(window_neighbors(&lone, 0, 4).is_err());
    }

    #[test]
    fn window_matches_chebyshev_scan() {
        for stride in [1, 2, 4] {
            let coords: Vec<Coord> = random_coords(500, 12, 3 + stride as u64)
                .into_iter()
                .map(|c| c.map(|v| v * stride))
                .collect();
            let set = CoordSet::new(coords, stride).unwrap();
            let w = 5;
            let r = stride * 2;
            for i in 0..set.len() {
                let ci = set.coords()[i];
                let expect: Vec<(usize, Coord)> = set
                    .coords()
                    .iter()
                    .enumerate()
                    .filter(|(_, cj)| (0..3).all(|a| (ci[a] - cj[a]).abs() <= r))
                    .map(|(j, cj)| (j, [ci[0] - cj[0], ci[1] - cj[1], ci[2] - cj[2]]))
                    .collect();
                assert_eq!(window_neighbors(&set, i, w).unwrap(), expect);
            }
        }
    }

    #[test]
    fn neighbor_table_agrees_with_window() {
        let set = CoordSet::new(random_coords(200, 6, 1), 1).unwrap();
        let table = NeighborTable::build(&set, 5).unwrap();
        for i in 0..set.len() {
            let direct = window_neighbors(&set, i, 5).unwrap();
            let via: Vec<(usize, Coord)> = table
                .neighbors(i)
                .iter()
                .map(|&(j, s)| (j as usize, table.offsets[s as usize]))
                .collect();
            assert_eq!(direct, via);
        }
    }

    #[test]
    fn downsample_examples() {
        assert_eq!(
            downsample_coords(&[[0, 0, 0], [1, 1, 1]], 2),
            vec![[0, 0, 0]]
        );
        assert_eq!(
            downsample_coords(&[[2, 0, 0], [3, 0, 1]], 2),
            vec![[2, 0, 0]]
        );
        assert_eq!(downsample_coords(&[[-1, 0, 0]], 2), vec![[-2, 0, 0]]);
    }

    #[test]
    fn downsample_matches_set_of_quotients() {
        let coords = random_coords(1000, 40, 11);
        let expect: BTreeSet<Coord> = coords
            .iter()
            .map(|c| {
                let q = |v: i32| (v as f64 / 2.0).floor() as i32 * 2;
                [q(c[0]), q(c[1]), q(c[2])]
            })
            .collect();
        let got = downsample_coords(&coords, 2);
        assert_eq!(got, expect.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn pyramid_levels_are_quotients() {
        let p = GeometryPyramid::build(random_coords(300, 30, 2), 3).unwrap();
        assert_eq!(p.depth(), 4);
        for l in 1..4 {
            let prev = p.level(l - 1).unwrap();
            let cur = p.level(l).unwrap();
            assert_eq!(cur.stride(), 1 << l);
            assert_eq!(
                cur.coords(),
                downsample_coords(prev.coords(), 1 << l).as_slice()
            );
            assert!(cur.len() <= prev.len());
        }
        assert!(p.level(4).is_err());
    }

    #[test]
    fn coordset_rejects_misaligned() {
        assert!(CoordSet::new(vec![[1, 0, 0]], 2).is_err());
        assert!(CoordSet::new(vec![[2, 0, 0], [2, 0, 0]], 2).is_err());
    }

    #[test]
    fn sparse_tensor_is_canonical_under_permutation() {
        let coords = vec![[3, 1, 0], [0, 0, 0], [1, 2, 3]];
        let feats = Tensor::from_rows(&[vec![3.0], vec![0.0], vec![1.0]]);
        let a = SparseTensor::new(coords.clone(), feats.clone(), 1).unwrap();
        let perm = [2, 0, 1];
        let pc: Vec<Coord> = perm.iter().map(|&i| coords[i]).collect();
        let pf = Tensor::from_rows(
            &perm
                .iter()
                .map(|&i| feats.row(i).to_vec())
                .collect::<Vec<_>>(),
        );
        let b = SparseTensor::new(pc, pf, 1).unwrap();
        assert_eq!(a.coords.coords(), b.coords.coords());
        assert_eq!(a.feats, b.feats);
        assert_eq!(a.feature_at(&[3, 1, 0]), Some(&[3.0f32][..]));
    }
}

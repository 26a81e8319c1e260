//! Symmetries of a square pixel grid (the dihedral group of order 8).
//!
//! An element is "rotate clockwise by `quarter_turns`, then optionally
//! transpose". The same maps act on image planes and on square conv kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dihedral {
    Identity,
    Transpose,
    Rot90,
    Rot90Transpose,
    Rot180,
    Rot180Transpose,
    Rot270,
    Rot270Transpose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Transpose,
        Dihedral::Rot90,
        Dihedral::Rot90Transpose,
        Dihedral::Rot180,
        Dihedral::Rot180Transpose,
        Dihedral::Rot270,
        Dihedral::Rot270Transpose,
    ];

    pub fn quarter_turns(self) -> usize {
        match self {
            Dihedral::Identity | Dihedral::Transpose => 0,
            Dihedral::Rot90 | Dihedral::Rot90Transpose => 1,
            Dihedral::Rot180 | Dihedral::Rot180Transpose => 2,
            Dihedral::Rot270 | Dihedral::Rot270Transpose => 3,
        }
    }

    pub fn transposed(self) -> bool {
        matches!(
            self,
            Dihedral::Transpose
                | Dihedral::Rot90Transpose
                | Dihedral::Rot180Transpose
                | Dihedral::Rot270Transpose
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Dihedral::Identity => "identity",
            Dihedral::Transpose => "transpose",
            Dihedral::Rot90 => "rot90",
            Dihedral::Rot90Transpose => "rot90_transpose",
            Dihedral::Rot180 => "rot180",
            Dihedral::Rot180Transpose => "rot180_transpose",
            Dihedral::Rot270 => "rot270",
            Dihedral::Rot270Transpose => "rot270_transpose",
        }
    }

    /// Source coordinate read by output coordinate `(y, x)` on an `n x n` grid.
    #[inline]
    pub fn source(self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let (y, x) = if self.transposed() { (x, y) } else { (y, x) };
        match self.quarter_turns() {
            0 => (y, x),
            1 => (n - 1 - x, y),
            2 => (n - 1 - y, n - 1 - x),
            _ => (x, n - 1 - y),
        }
    }

    /// Applies the symmetry to one row-major `n x n` plane.
    pub fn apply_plane<T: Copy>(self, plane: &[T], n: usize) -> Vec<T> {
        debug_assert_eq!(plane.len(), n * n);
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = self.source(y, x, n);
                out.push(plane[sy * n + sx]);
            }
        }
        out
    }

    /// Applies the symmetry to every `n x n` plane of a stack.
    pub fn apply_planes<T: Copy>(self, planes: &[T], n: usize) -> Result<Vec<T>> {
        if n == 0 || planes.len() % (n * n) != 0 {
            return Err(Error::Argument(format!(
                "{} values are not a stack of {n}x{n} planes",
                planes.len()
            )));
        }
        Ok(planes
            .chunks_exact(n * n)
            .flat_map(|p| self.apply_plane(p, n))
            .collect())
    }

    fn signature(self) -> Vec<usize> {
        let probe: Vec<usize> = (0..9).collect();
        self.apply_plane(&probe, 3)
    }

    fn from_signature(sig: &[usize]) -> Dihedral {
        *Self::ALL
            .iter()
            .find(|d| d.signature() == sig)
            .expect("dihedral group is closed")
    }

    /// `self.then(other)` applies `self` first, then `other`.
    pub fn then(self, other: Dihedral) -> Dihedral {
        let probe: Vec<usize> = (0..9).collect();
        Self::from_signature(&other.apply_plane(&self.apply_plane(&probe, 3), 3))
    }

    pub fn inverse(self) -> Dihedral {
        *Self::ALL
            .iter()
            .find(|&&d| self.then(d) == Dihedral::Identity)
            .expect("every element has an inverse")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_of_three_by_three() {
        let i = [1, 2, 3, 4, 5, 6, 7, 8, 9];
        assert_eq!(
            Dihedral::Transpose.apply_plane(&i, 3),
            vec![1, 4, 7, 2, 5, 8, 3, 6, 9]
        );
    }

    #[test]
    fn rotation_is_clockwise() {
        let i = [1, 2, 3, 4];
        // [[1,2],[3,4]] -> [[3,1],[4,2]]
        assert_eq!(Dihedral::Rot90.apply_plane(&i, 2), vec![3, 1, 4, 2]);
    }

    #[test]
    fn four_quarter_turns_and_double_transpose_are_identity() {
        let i: Vec<u32> = (0..25).collect();
        let mut r = i.clone();
        for _ in 0..4 {
            r = Dihedral::Rot90.apply_plane(&r, 5);
        }
        assert_eq!(r, i);
        let t = Dihedral::Transpose.apply_plane(&Dihedral::Transpose.apply_plane(&i, 5), 5);
        assert_eq!(t, i);
    }

    #[test]
    fn rotations_compose_as_expected() {
        assert_eq!(Dihedral::Rot90.then(Dihedral::Rot90), Dihedral::Rot180);
        assert_eq!(Dihedral::Rot180.then(Dihedral::Rot90), Dihedral::Rot270);
        assert_eq!(
            Dihedral::Rot90.then(Dihedral::Transpose),
            Dihedral::Rot90Transpose
        );
    }

    #[test]
    fn group_table_is_closed_associative_with_inverses() {
        let probe: Vec<u32> = (0..16).collect();
        for a in Dihedral::ALL {
            assert_eq!(a.then(a.inverse()), Dihedral::Identity);
            assert_eq!(a.inverse().then(a), Dihedral::Identity);
            for b in Dihedral::ALL {
                let ab = a.then(b);
                assert_eq!(
                    ab.apply_plane(&probe, 4),
                    b.apply_plane(&a.apply_plane(&probe, 4), 4)
                );
                for c in Dihedral::ALL {
                    assert_eq!(ab.then(c), a.then(b.then(c)));
                }
            }
        }
        let distinct: std::collections::BTreeSet<Vec<u32>> = Dihedral::ALL
            .iter()
            .map(|d| d.apply_plane(&probe, 4))
            .collect();
        assert_eq!(distinct.len(), 8);
    }
}

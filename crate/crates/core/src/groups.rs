//! Products of cyclic groups (rotations × polarities) and their flattened
//! group-operation table.
//!
//! Elements are indexed `i = R·t + r`, so indices `0..R` are the rotations of
//! the first polarity and `R..2R` the rotations of the second.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotation count `R` and polarity count `T ∈ {1, 2}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupSpec {
    rotations: usize,
    polarities: usize,
}

impl GroupSpec {
    pub fn new(rotations: usize, polarities: usize) -> Result<Self> {
        if rotations == 0 {
            return Err(Error::InvalidGroup("rotation count must be positive".into()));
        }
        if !(1..=2).contains(&polarities) {
            return Err(Error::InvalidGroup(format!(
                "polarity count must be 1 or 2, got {polarities}"
            )));
        }
        Ok(GroupSpec { rotations, polarities })
    }

    pub fn trivial() -> Self {
        GroupSpec {
            rotations: 1,
            polarities: 1,
        }
    }

    pub fn rotations(&self) -> usize {
        self.rotations
    }

    pub fn polarities(&self) -> usize {
        self.polarities
    }

    /// Group order `P = R·T`.
    pub fn order(&self) -> usize {
        self.rotations * self.polarities
    }

    pub fn is_trivial(&self) -> bool {
        self.order() == 1
    }

    pub fn element(&self, index: usize) -> Result<GroupElement> {
        let (rotation, polarity) = unflatten_index(index, self.rotations, self.polarities)?;
        Ok(GroupElement { rotation, polarity })
    }

    pub fn elements(&self) -> impl Iterator<Item = GroupElement> + '_ {
        (0..self.order()).map(move |i| GroupElement {
            rotation: i % self.rotations,
            polarity: i / self.rotations,
        })
    }

    /// Rotation angle of an element in degrees (counter-clockwise).
    pub fn angle_degrees(&self, element: GroupElement) -> f64 {
        360.0 * element.rotation as f64 / self.rotations as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupElement {
    pub rotation: usize,
    pub polarity: usize,
}

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement {
        rotation: 0,
        polarity: 0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Flattened index `R·t + r`.
pub fn flatten_index(rotation: usize, polarity: usize, rotations: usize, polarities: usize) -> Result<usize> {
    if rotation >= rotations {
        return Err(Error::IndexOutOfRange {
            what: "rotation",
            value: rotation,
            limit: rotations,
        });
    }
    if polarity >= polarities {
        return Err(Error::IndexOutOfRange {
            what: "polarity",
            value: polarity,
            limit: polarities,
        });
    }
    Ok(rotations * polarity + rotation)
}

/// Inverse of [`flatten_index`].
pub fn unflatten_index(index: usize, rotations: usize, polarities: usize) -> Result<(usize, usize)> {
    if rotations == 0 || index >= rotations * polarities {
        return Err(Error::IndexOutOfRange {
            what: "flat index",
            value: index,
            limit: rotations * polarities,
        });
    }
    Ok((index % rotations, index / rotations))
}

/// The `P×P` table `A(i, j)` of the group operation on flat indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermTable {
    order: usize,
    table: Vec<usize>,
    inverse: Vec<usize>,
}

impl PermTable {
    pub fn new(spec: &GroupSpec) -> Self {
        let (r, t) = (spec.rotations, spec.polarities);
        let p = spec.order();
        let mut table = Vec::with_capacity(p * p);
        for i in 0..p {
            let (ri, ti) = (i % r, i / r);
            for j in 0..p {
                let (rj, tj) = (j % r, j / r);
                table.push(r * ((ti + tj) % t) + (ri + rj) % r);
            }
        }
        let inverse = (0..p)
            .map(|i| (0..p).find(|&j| table[i * p + j] == 0).expect("group has inverses"))
            .collect();
        PermTable {
            order: p,
            table,
            inverse,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.table[i * self.order + j]
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.table[i * self.order..(i + 1) * self.order]
    }

    /// The element `j` with `A(i, j) = 0`.
    pub fn inverse(&self, i: usize) -> usize {
        self.inverse[i]
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        (0..self.order).map(|i| self.row(i).to_vec()).collect()
    }
}

pub fn permutation_table(spec: &GroupSpec) -> PermTable {
    PermTable::new(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flatten_examples() {
        assert_eq!(flatten_index(1, 1, 3, 2).unwrap(), 4);
        assert_eq!(flatten_index(0, 0, 7, 2).unwrap(), 0);
        assert_eq!(flatten_index(2, 1, 3, 2).unwrap(), 5);
        assert_eq!(unflatten_index(5, 3, 2).unwrap(), (2, 1));
        assert!(flatten_index(3, 0, 3, 2).is_err());
        assert!(flatten_index(0, 2, 3, 2).is_err());
        assert!(unflatten_index(6, 3, 2).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(GroupSpec::new(0, 1).is_err());
        assert!(GroupSpec::new(4, 3).is_err());
        assert!(GroupSpec::new(1, 1).unwrap().is_trivial());
        assert!(!GroupSpec::new(1, 2).unwrap().is_trivial());
    }

    #[test]
    fn table_r3_t2() {
        let table = permutation_table(&GroupSpec::new(3, 2).unwrap());
        let expected = vec![
            vec![0, 1, 2, 3, 4, 5],
            vec![1, 2, 0, 4, 5, 3],
            vec![2, 0, 1, 5, 3, 4],
            vec![3, 4, 5, 0, 1, 2],
            vec![4, 5, 3, 1, 2, 0],
            vec![5, 3, 4, 2, 0, 1],
        ];
        assert_eq!(table.rows(), expected);
    }

    #[test]
    fn trivial_and_cyclic_tables() {
        assert_eq!(permutation_table(&GroupSpec::trivial()).rows(), vec![vec![0]]);
        let t = permutation_table(&GroupSpec::new(4, 1).unwrap());
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(t.get(i, j), (i + j) % 4);
            }
        }
    }

    proptest! {
        #[test]
        fn table_is_a_latin_square_with_identity(r in 1usize..=16, t in 1usize..=2) {
            let spec = GroupSpec::new(r, t).unwrap();
            let table = permutation_table(&spec);
            let p = spec.order();
            prop_assert_eq!(table.row(0).to_vec(), (0..p).collect::<Vec<_>>());
            for i in 0..p {
                let mut row: Vec<_> = table.row(i).to_vec();
                row.sort_unstable();
                prop_assert_eq!(row, (0..p).collect::<Vec<_>>());
                let mut col: Vec<_> = (0..p).map(|j| table.get(j, i)).collect();
                col.sort_unstable();
                prop_assert_eq!(col, (0..p).collect::<Vec<_>>());
                for j in 0..p {
                    prop_assert_eq!(table.get(table.get(i, 0), j), table.get(i, j));
                }
            }
        }

        #[test]
        fn rows_are_closed_under_composition(r in 1usize..=16, t in 1usize..=2) {
            let spec = GroupSpec::new(r, t).unwrap();
            let table = permutation_table(&spec);
            let p = spec.order();
            let rows = table.rows();
            for i in 0..p {
                for k in 0..p {
                    // row_i ∘ row_k as permutations of {0..p}
                    let composed: Vec<usize> = (0..p).map(|j| rows[i][rows[k][j]]).collect();
                    prop_assert!(rows.contains(&composed));
                }
                let inv = table.inverse(i);
                let composed: Vec<usize> = (0..p).map(|j| rows[i][rows[inv][j]]).collect();
                prop_assert_eq!(composed, (0..p).collect::<Vec<_>>());
            }
        }
    }
}

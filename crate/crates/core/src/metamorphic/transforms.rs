use serde::{Deserialize, Serialize};

use crate::cnn::normalize_values;
use crate::dataset::{LabeledImageSet, LabeledVectorSet};
use crate::error::{Error, Result};
use crate::grid::Dihedral;
use crate::rng::SeededRng;

/// A permutation of `0..n`, resolved once `n` is known.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Permutation {
    /// `new[i] = old[(i + shift) mod n]`.
    Cycle {
        shift: usize,
    },
    /// Seeded uniform permutation repaired so that no index stays in place.
    Derangement {
        seed: u64,
    },
    Explicit {
        indices: Vec<usize>,
    },
}

impl Permutation {
    pub fn resolve(&self, n: usize) -> Result<Vec<usize>> {
        let p = match self {
            Permutation::Cycle { shift } => (0..n).map(|i| (i + shift) % n.max(1)).collect(),
            Permutation::Derangement { seed } => derangement(n, *seed),
            Permutation::Explicit { indices } => indices.clone(),
        };
        check_bijection(&p, n)?;
        Ok(p)
    }
}

fn derangement(n: usize, seed: u64) -> Vec<usize> {
    let mut p = SeededRng::new(seed).permutation(n);
    if n < 2 {
        return p;
    }
    // Swapping a fixed point with its successor moves both.
    for i in 0..n {
        if p[i] == i {
            let j = (i + 1) % n;
            p.swap(i, j);
        }
    }
    p
}

pub fn check_bijection(p: &[usize], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(Error::Argument(format!(
            "permutation has {} entries, expected {n}",
            p.len()
        )));
    }
    let mut seen = vec![false; n];
    for &i in p {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Argument(format!(
                "{p:?} is not a bijection on 0..{n}"
            )));
        }
    }
    Ok(())
}

pub fn inverse_permutation(p: &[usize]) -> Result<Vec<usize>> {
    check_bijection(p, p.len())?;
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    Ok(inv)
}

/// Rearranges every instance's features: `new[i] = old[p[i]]`.
pub fn permute_features(set: &LabeledVectorSet, p: &[usize]) -> Result<LabeledVectorSet> {
    check_bijection(p, set.n_features())?;
    let mut features = Vec::with_capacity(set.features().len());
    for row in set.rows() {
        features.extend(p.iter().map(|&j| row[j]));
    }
    Ok(LabeledVectorSet::from_parts_unchecked(
        set.n_features(),
        features,
        set.labels().to_vec(),
    ))
}

/// Reorders instances: row `i` of the output is row `p[i]` of the input.
pub fn shuffle_instances(set: &LabeledVectorSet, p: &[usize]) -> Result<LabeledVectorSet> {
    check_bijection(p, set.len())?;
    let mut features = Vec::with_capacity(set.features().len());
    for &i in p {
        features.extend_from_slice(set.row(i));
    }
    Ok(LabeledVectorSet::from_parts_unchecked(
        set.n_features(),
        features,
        p.iter().map(|&i| set.labels()[i]).collect(),
    ))
}

pub fn shift_features(set: &LabeledVectorSet, k: f64) -> LabeledVectorSet {
    set.map_features(|v| v + k)
}

pub fn scale_instance(x: &[f64], k: f64) -> Vec<f64> {
    x.iter().map(|v| v * k).collect()
}

pub fn scale_images(set: &LabeledImageSet, k: f32) -> Result<LabeledImageSet> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::Argument(format!(
            "image scale must be positive, got {k}"
        )));
    }
    set.map_images(set.height(), set.width(), |img| {
        img.iter().map(|v| v * k).collect()
    })
}

/// Order of the RGB planes: plane `c` of the output is plane `order[c]` of
/// the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelOrder(pub [usize; 3]);

impl ChannelOrder {
    pub const ALL: [ChannelOrder; 6] = [
        ChannelOrder([0, 1, 2]),
        ChannelOrder([0, 2, 1]),
        ChannelOrder([1, 0, 2]),
        ChannelOrder([1, 2, 0]),
        ChannelOrder([2, 0, 1]),
        ChannelOrder([2, 1, 0]),
    ];

    pub fn name(self) -> String {
        self.0.iter().map(|&c| ['r', 'g', 'b'][c]).collect()
    }

    pub fn validate(self) -> Result<()> {
        check_bijection(&self.0, 3)
    }

    pub fn inverse(self) -> ChannelOrder {
        let mut inv = [0; 3];
        for (i, &j) in self.0.iter().enumerate() {
            inv[j] = i;
        }
        ChannelOrder(inv)
    }
}

pub fn permute_channels(set: &LabeledImageSet, order: ChannelOrder) -> Result<LabeledImageSet> {
    order.validate()?;
    let plane = set.height() * set.width();
    set.map_images(set.height(), set.width(), |img| {
        order
            .0
            .iter()
            .flat_map(|&c| img[c * plane..(c + 1) * plane].iter().copied())
            .collect()
    })
}

pub fn dihedral_transform(set: &LabeledImageSet, d: Dihedral) -> Result<LabeledImageSet> {
    if set.height() != set.width() {
        return Err(Error::Argument(format!(
            "dihedral transforms need square images, got {}x{}",
            set.height(),
            set.width()
        )));
    }
    let n = set.height();
    set.map_images(n, n, |img| d.apply_planes(img, n).expect("square planes"))
}

/// Standardizes each image over all of its values.
pub fn normalize_images(set: &LabeledImageSet) -> Result<LabeledImageSet> {
    let mut err = None;
    let out = set.map_images(set.height(), set.width(), |img| {
        match normalize_values(img) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                img.to_vec()
            }
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Input transformation of one metamorphic variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    FeaturePermutation {
        order: Permutation,
    },
    InstanceShuffle {
        order: Permutation,
    },
    FeatureShift {
        k: f64,
    },
    /// Multiply every value by `k`.
    InstanceScale {
        k: f64,
    },
    /// Divide every value by `k`; exact inverse of `InstanceScale` whenever
    /// the scaled values are representable.
    InstanceUnscale {
        k: f64,
    },
    ChannelOrder {
        order: ChannelOrder,
    },
    Dihedral {
        variant: Dihedral,
    },
    Normalize,
}

impl TransformSpec {
    /// Short identifier used in reports and file names.
    pub fn variant_id(&self) -> String {
        match self {
            TransformSpec::FeaturePermutation { .. } => "permuted".into(),
            TransformSpec::InstanceShuffle { .. } => "shuffled".into(),
            TransformSpec::FeatureShift { k } => format!("shift_{k}"),
            TransformSpec::InstanceScale { k } => format!("scale_{k}"),
            TransformSpec::InstanceUnscale { k } => format!("unscale_{k}"),
            TransformSpec::ChannelOrder { order } => order.name(),
            TransformSpec::Dihedral { variant } => variant.name().into(),
            TransformSpec::Normalize => "normalized".into(),
        }
    }

    pub fn apply_vectors(&self, set: &LabeledVectorSet) -> Result<LabeledVectorSet> {
        match self {
            TransformSpec::FeaturePermutation { order } => {
                permute_features(set, &order.resolve(set.n_features())?)
            }
            TransformSpec::InstanceShuffle { order } => {
                shuffle_instances(set, &order.resolve(set.len())?)
            }
            TransformSpec::FeatureShift { k } => Ok(shift_features(set, *k)),
            TransformSpec::InstanceScale { k } => Ok(set.map_features(|v| v * k)),
            TransformSpec::InstanceUnscale { k } => Ok(set.map_features(|v| v / k)),
            other => Err(Error::Argument(format!(
                "{} does not apply to feature vectors",
                other.variant_id()
            ))),
        }
    }

    pub fn apply_images(&self, set: &LabeledImageSet) -> Result<LabeledImageSet> {
        match self {
            TransformSpec::InstanceScale { k } => scale_images(set, *k as f32),
            TransformSpec::InstanceUnscale { k } => {
                let k = *k as f32;
                set.map_images(set.height(), set.width(), |img| {
                    img.iter().map(|v| v / k).collect()
                })
            }
            TransformSpec::ChannelOrder { order } => permute_channels(set, *order),
            TransformSpec::Dihedral { variant } => dihedral_transform(set, *variant),
            TransformSpec::Normalize => normalize_images(set),
            other => Err(Error::Argument(format!(
                "{} does not apply to images",
                other.variant_id()
            ))),
        }
    }

    /// The transform undoing this one on inputs whose permuted axis has `n`
    /// entries (features or rows; ignored by other kinds). Normalization
    /// discards each instance's mean and spread, so it has none.
    pub fn inverse(&self, n: usize) -> Result<Option<TransformSpec>> {
        Ok(Some(match self {
            TransformSpec::FeaturePermutation { order } => TransformSpec::FeaturePermutation {
                order: Permutation::Explicit {
                    indices: inverse_permutation(&order.resolve(n)?)?,
                },
            },
            TransformSpec::InstanceShuffle { order } => TransformSpec::InstanceShuffle {
                order: Permutation::Explicit {
                    indices: inverse_permutation(&order.resolve(n)?)?,
                },
            },
            TransformSpec::FeatureShift { k } => TransformSpec::FeatureShift { k: -k },
            TransformSpec::InstanceScale { k } => TransformSpec::InstanceUnscale { k: *k },
            TransformSpec::InstanceUnscale { k } => TransformSpec::InstanceScale { k: *k },
            TransformSpec::ChannelOrder { order } => TransformSpec::ChannelOrder {
                order: order.inverse(),
            },
            TransformSpec::Dihedral { variant } => TransformSpec::Dihedral {
                variant: variant.inverse(),
            },
            TransformSpec::Normalize => return Ok(None),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vectors(rows: &[&[f64]], labels: &[u8]) -> LabeledVectorSet {
        LabeledVectorSet::from_rows(
            &rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            labels.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn cycle_moves_first_feature_to_the_end() {
        let s = vectors(&[&[1.0, 2.0, 3.0]], &[4]);
        let p = Permutation::Cycle { shift: 1 }.resolve(3).unwrap();
        let out = permute_features(&s, &p).unwrap();
        assert_eq!(out.row(0), &[2.0, 3.0, 1.0]);
        assert_eq!(out.labels(), &[4]);
        assert!(p.iter().enumerate().all(|(i, &j)| i != j));
    }

    #[test]
    fn identity_permutation_is_a_no_op() {
        let s = vectors(&[&[1.0, 2.0], &[3.0, 4.0]], &[0, 1]);
        assert_eq!(permute_features(&s, &[0, 1]).unwrap(), s);
        assert_eq!(shuffle_instances(&s, &[0, 1]).unwrap(), s);
        assert_eq!(shift_features(&s, 0.0), s);
    }

    #[test]
    fn reverse_order_of_three_rows() {
        let s = vectors(&[&[1.0], &[2.0], &[3.0]], &[1, 2, 3]);
        let out = shuffle_instances(&s, &[2, 1, 0]).unwrap();
        assert_eq!(out.features(), &[3.0, 2.0, 1.0]);
        assert_eq!(out.labels(), &[3, 2, 1]);
    }

    #[test]
    fn non_bijections_rejected() {
        let s = vectors(&[&[1.0, 2.0]], &[0]);
        assert!(permute_features(&s, &[0, 0]).is_err());
        assert!(permute_features(&s, &[0]).is_err());
        assert!(shuffle_instances(&s, &[1]).is_err());
    }

    #[test]
    fn shift_and_scale() {
        let s = vectors(&[&[1.0, 2.0]], &[0]);
        assert_eq!(shift_features(&s, 5.0).row(0), &[6.0, 7.0]);
        assert_eq!(scale_instance(&[1.0, 2.0, 3.0], 2.0), vec![2.0, 4.0, 6.0]);
        assert_eq!(scale_instance(&[1.0, 2.0], 1.0), vec![1.0, 2.0]);
    }

    fn image(planes: [f32; 3]) -> LabeledImageSet {
        let mut px = Vec::new();
        for v in planes {
            px.extend(std::iter::repeat(v).take(4));
        }
        LabeledImageSet::new(2, 2, px, vec![3]).unwrap()
    }

    #[test]
    fn bgr_swaps_outer_planes() {
        let out = permute_channels(&image([1.0, 2.0, 3.0]), ChannelOrder([2, 1, 0])).unwrap();
        assert_eq!(out.channel_plane(0, 0), &[3.0; 4]);
        assert_eq!(out.channel_plane(0, 2), &[1.0; 4]);
        assert_eq!(ChannelOrder::ALL.len(), 6);
        assert_eq!(ChannelOrder([2, 1, 0]).name(), "bgr");
    }

    #[test]
    fn transpose_of_figure_grid() {
        let px: Vec<f32> = (1..=9).map(|v| v as f32).cycle().take(27).collect();
        let set = LabeledImageSet::new(3, 3, px, vec![0]).unwrap();
        let t = dihedral_transform(&set, Dihedral::Transpose).unwrap();
        assert_eq!(
            t.channel_plane(0, 1),
            &[1.0, 4.0, 7.0, 2.0, 5.0, 8.0, 3.0, 6.0, 9.0]
        );
        let rect = LabeledImageSet::new(2, 3, vec![0.0; 18], vec![0]).unwrap();
        assert!(dihedral_transform(&rect, Dihedral::Rot90).is_err());
    }

    #[test]
    fn derangement_moves_everything() {
        for n in 2..40 {
            for seed in 0..5 {
                let p = Permutation::Derangement { seed }.resolve(n).unwrap();
                assert!(
                    p.iter().enumerate().all(|(i, &j)| i != j),
                    "n={n} seed={seed}"
                );
            }
        }
    }

    fn int_vectors() -> impl Strategy<Value = LabeledVectorSet> {
        (1usize..6, 1usize..8).prop_flat_map(|(m, n)| {
            (
                proptest::collection::vec(0i32..17, m * n),
                proptest::collection::vec(0u8..10, m),
            )
                .prop_map(move |(f, l)| {
                    LabeledVectorSet::new(n, f.into_iter().map(f64::from).collect(), l).unwrap()
                })
        })
    }

    fn int_images() -> impl Strategy<Value = LabeledImageSet> {
        (1usize..4, 1usize..5).prop_flat_map(|(m, side)| {
            (
                proptest::collection::vec(0u8..=255, m * 3 * side * side),
                proptest::collection::vec(0u8..10, m),
            )
                .prop_map(move |(p, l)| {
                    LabeledImageSet::new(side, side, p.into_iter().map(f32::from).collect(), l)
                        .unwrap()
                })
        })
    }

    fn vector_transforms() -> impl Strategy<Value = TransformSpec> {
        prop_oneof![
            (0usize..9).prop_map(|shift| TransformSpec::FeaturePermutation {
                order: Permutation::Cycle { shift }
            }),
            any::<u64>().prop_map(|seed| TransformSpec::InstanceShuffle {
                order: Permutation::Derangement { seed }
            }),
            (-20i32..20).prop_map(|k| TransformSpec::FeatureShift { k: k as f64 }),
            prop_oneof![Just(0.5), Just(2.0), Just(3.0), Just(29.0)]
                .prop_map(|k| TransformSpec::InstanceScale { k }),
        ]
    }

    fn image_transforms() -> impl Strategy<Value = TransformSpec> {
        prop_oneof![
            (0usize..6).prop_map(|i| TransformSpec::ChannelOrder {
                order: ChannelOrder::ALL[i]
            }),
            (0usize..8).prop_map(|i| TransformSpec::Dihedral {
                variant: Dihedral::ALL[i]
            }),
            prop_oneof![Just(0.5), Just(2.0), Just(29.0)]
                .prop_map(|k| TransformSpec::InstanceScale { k }),
        ]
    }

    proptest! {
        #[test]
        fn vector_transforms_invert_bitwise(set in int_vectors(), t in vector_transforms()) {
            let n = match t {
                TransformSpec::InstanceShuffle { .. } => set.len(),
                _ => set.n_features(),
            };
            let out = t.apply_vectors(&set).unwrap();
            prop_assert_eq!(out.labels().len(), set.labels().len());
            if !matches!(t, TransformSpec::InstanceShuffle { .. }) {
                prop_assert_eq!(out.labels(), set.labels());
            }
            let back = t.inverse(n).unwrap().unwrap().apply_vectors(&out).unwrap();
            prop_assert_eq!(back, set);
        }

        #[test]
        fn shuffles_keep_label_feature_pairs(set in int_vectors(), seed in any::<u64>()) {
            let p = Permutation::Derangement { seed }.resolve(set.len()).unwrap();
            let out = shuffle_instances(&set, &p).unwrap();
            for (i, &j) in p.iter().enumerate() {
                prop_assert_eq!(out.row(i), set.row(j));
                prop_assert_eq!(out.labels()[i], set.labels()[j]);
            }
        }

        #[test]
        fn image_transforms_invert_bitwise(set in int_images(), t in image_transforms()) {
            let out = t.apply_images(&set).unwrap();
            prop_assert_eq!(out.labels(), set.labels());
            let back = t.inverse(0).unwrap().unwrap().apply_images(&out).unwrap();
            prop_assert_eq!(back, set);
        }
    }

    #[test]
    fn normalize_has_no_inverse() {
        assert_eq!(TransformSpec::Normalize.inverse(3).unwrap(), None);
        let set = image([1.0, 2.0, 3.0]);
        let n = TransformSpec::Normalize.apply_images(&set).unwrap();
        assert_eq!(n.labels(), set.labels());
        assert!(TransformSpec::Normalize
            .apply_images(&image([5.0, 5.0, 5.0]))
            .is_err());
    }
}

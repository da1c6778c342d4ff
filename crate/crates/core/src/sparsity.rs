//! Magnitude pruning of cached activations and their value + bitmask storage.
//!
//! A pruned activation is stored as the flat list of its non-zero values plus one
//! index bit per original element. Memory is accounted exactly:
//!
//! | record      | bytes                          |
//! |-------------|--------------------------------|
//! | dense       | `BYTES * N`                    |
//! | sparse      | `BYTES * k + ceil(N / 8)`      |
//! | mask-only   | `ceil(N / 8)`                  |
//! | recompute   | 0                              |
//! | absent      | 0                              |
//!
//! with `BYTES = 4` for `f32`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Fixed-length bitset, least significant bit first within each 64-bit word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitset {
    len: usize,
    words: Vec<u64>,
}

impl Bitset {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut b = Self::new(len);
        for i in 0..len {
            if f(i) {
                b.set(i);
            }
        }
        b
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize) {
        debug_assert!(i < self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Storage cost at one bit per element.
    pub fn bytes(&self) -> usize {
        self.len.div_ceil(8)
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(w, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let tz = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(w * 64 + tz)
            })
        })
    }
}

/// Pruned activation in compact form: non-zero values in flat order plus a 1-bit index.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseActivation<T> {
    values: Vec<T>,
    index: Bitset,
    shape: Vec<usize>,
}

impl<T: Scalar> SparseActivation<T> {
    /// Assemble from raw parts, validating the popcount and length invariants.
    pub fn from_parts(values: Vec<T>, index: Bitset, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if index.len() != n {
            return Err(Error::CorruptSparse(format!(
                "index holds {} bits for shape {shape:?} ({n} elements)",
                index.len()
            )));
        }
        if index.count_ones() != values.len() {
            return Err(Error::CorruptSparse(format!(
                "index has {} set bits but {} values are stored",
                index.count_ones(),
                values.len()
            )));
        }
        Ok(Self {
            values,
            index,
            shape,
        })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn index(&self) -> &Bitset {
        &self.index
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bytes(&self) -> usize {
        T::BYTES * self.values.len() + self.index.bytes()
    }
}

/// Number of elements kept at pruning ratio `p`: `ceil((1 - p) * n)`.
///
/// Products within 1e-9 of an integer are snapped to it first, so that decimal
/// ratios such as 0.7 do not round up through representation error.
pub fn keep_count(p: f64, n: usize) -> usize {
    let exact = (1.0 - p) * n as f64;
    let nearest = exact.round();
    let k = if (exact - nearest).abs() <= 1e-9 * (n.max(1) as f64) {
        nearest
    } else {
        exact.ceil()
    };
    (k.max(0.0) as usize).min(n)
}

fn check_ratio(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(Error::InvalidRatio(p));
    }
    Ok(())
}

/// Indices of the `k` largest-magnitude elements; ties keep the lower flat index.
fn top_k_indices<T: Scalar>(data: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let order = |a: &usize, b: &usize| {
        let (x, y) = (data[*a].abs(), data[*b].abs());
        y.partial_cmp(&x)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, order);
    }
    idx.truncate(k);
    idx
}

/// Zero all but the `ceil((1 - p) * N)` largest-magnitude elements of `a`.
pub fn prune<T: Scalar>(a: &Tensor<T>, p: f64) -> Result<Tensor<T>> {
    check_ratio(p)?;
    let n = a.len();
    let k = keep_count(p, n);
    if k == n {
        return Ok(a.clone());
    }
    let mut out = vec![T::zero(); n];
    for i in top_k_indices(a.data(), k) {
        out[i] = a.data()[i];
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

/// Split a (pruned) tensor into its non-zero values and a 1-bit-per-element index.
pub fn decompose<T: Scalar>(pruned: &Tensor<T>) -> SparseActivation<T> {
    let data = pruned.data();
    let index = Bitset::from_fn(data.len(), |i| data[i] != T::zero());
    let values = data.iter().copied().filter(|&v| v != T::zero()).collect();
    SparseActivation {
        values,
        index,
        shape: pruned.shape().to_vec(),
    }
}

/// Scatter the stored values back into a dense tensor of the original shape.
pub fn reconstruct<T: Scalar>(s: &SparseActivation<T>) -> Result<Tensor<T>> {
    let n: usize = s.shape.iter().product();
    if s.index.len() != n || s.index.count_ones() != s.values.len() {
        return Err(Error::CorruptSparse(format!(
            "{} bits / {} set for {} values, shape {:?}",
            s.index.len(),
            s.index.count_ones(),
            s.values.len(),
            s.shape
        )));
    }
    let mut out = vec![T::zero(); n];
    for (pos, &v) in s.index.iter_ones().zip(&s.values) {
        out[pos] = v;
    }
    Tensor::new(s.shape.clone(), out)
}

/// What a tape node keeps for its backward step.
#[derive(Debug, Clone, PartialEq)]
pub enum ActivationRecord<T> {
    Dense(Tensor<T>),
    Sparse(SparseActivation<T>),
    /// Exact 1-bit mask (ReLU sign, pooling argmax positions).
    MaskOnly(Bitset),
    /// Discarded; rebuilt by re-running the forward from the node at `block_start`.
    Recompute { block_start: usize },
    Absent,
}

impl<T: Scalar> ActivationRecord<T> {
    /// Prune `a` at ratio `p` and store it in whichever of dense or sparse form is smaller.
    /// `p == 0` always stores dense.
    pub fn pruned(a: &Tensor<T>, p: f64) -> Result<Self> {
        check_ratio(p)?;
        if p == 0.0 {
            return Ok(Self::Dense(a.clone()));
        }
        let sparse = decompose(&prune(a, p)?);
        if sparse.bytes() < T::BYTES * a.len() {
            Ok(Self::Sparse(sparse))
        } else {
            Ok(Self::Dense(reconstruct(&sparse)?))
        }
    }

    /// The dense tensor this record stands for, if it holds values.
    pub fn materialize(&self) -> Result<Option<Tensor<T>>> {
        match self {
            Self::Dense(t) => Ok(Some(t.clone())),
            Self::Sparse(s) => reconstruct(s).map(Some),
            _ => Ok(None),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Dense(_) => "dense",
            Self::Sparse(_) => "sparse",
            Self::MaskOnly(_) => "mask",
            Self::Recompute { .. } => "recompute",
            Self::Absent => "absent",
        }
    }
}

/// Exact storage cost of a record in bytes.
pub fn cached_bytes<T: Scalar>(record: &ActivationRecord<T>) -> usize {
    match record {
        ActivationRecord::Dense(t) => T::BYTES * t.len(),
        ActivationRecord::Sparse(s) => s.bytes(),
        ActivationRecord::MaskOnly(m) => m.bytes(),
        ActivationRecord::Recompute { .. } | ActivationRecord::Absent => 0,
    }
}

/// Per-layer pruning ratios for one batch, one entry per adapted prunable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningSchedule {
    ratios: Vec<f32>,
}

impl PruningSchedule {
    pub fn new(ratios: Vec<f32>) -> Result<Self> {
        if let Some(&bad) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::InvalidRatio(bad as f64));
        }
        Ok(Self { ratios })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            ratios: vec![0.0; n],
        }
    }

    pub fn uniform(n: usize, p: f32) -> Result<Self> {
        Self::new(vec![p; n])
    }

    pub fn ratios(&self) -> &[f32] {
        &self.ratios
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(data.to_vec())
    }

    /// Brute force: sort all indices by (|x| desc, index asc) and keep the first k.
    fn prune_oracle(data: &[f32], p: f64) -> Vec<f32> {
        let k = keep_count(p, data.len());
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.sort_by(|&a, &b| {
            data[b]
                .abs()
                .partial_cmp(&data[a].abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut out = vec![0.0; data.len()];
        for &i in &idx[..k] {
            out[i] = data[i];
        }
        out
    }

    #[test]
    fn prune_examples() {
        let a = v(&[1.0, -5.0, 0.2, 3.0]);
        assert_eq!(prune(&a, 0.5).unwrap().data(), &[0.0, -5.0, 0.0, 3.0]);
        assert_eq!(prune(&a, 0.0).unwrap(), a);
        assert!(prune(&a, 1.0).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(matches!(prune(&a, 1.5), Err(Error::InvalidRatio(_))));
        assert!(matches!(prune(&a, -0.1), Err(Error::InvalidRatio(_))));
    }

    #[test]
    fn prune_ties_keep_lower_index() {
        let a = v(&[2.0, -2.0, 2.0, 1.0]);
        assert_eq!(prune(&a, 0.5).unwrap().data(), &[2.0, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn keep_count_rounding() {
        assert_eq!(keep_count(0.5, 4), 2);
        assert_eq!(keep_count(0.7, 10), 3);
        assert_eq!(keep_count(0.9, 10), 1);
        assert_eq!(keep_count(0.99, 10), 1);
        assert_eq!(keep_count(0.57, 100), 43);
        assert_eq!(keep_count(1.0, 10), 0);
        assert_eq!(keep_count(0.0, 10), 10);
    }

    #[test]
    fn decompose_examples() {
        let s = decompose(&v(&[0.0, -5.0, 0.0, 3.0]));
        assert_eq!(s.values(), &[-5.0, 3.0]);
        assert_eq!(s.index().iter_ones().collect::<Vec<_>>(), vec![1, 3]);

        let z = decompose(&Tensor::<f32>::zeros(&[3]));
        assert!(z.values().is_empty());
        assert_eq!(z.index().count_ones(), 0);

        let d = v(&[1.0, 2.0, 3.0]);
        let s = decompose(&d);
        assert_eq!(s.values(), d.data());
        assert_eq!(s.index().count_ones(), 3);
    }

    #[test]
    fn reconstruct_examples() {
        let mut bits = Bitset::new(4);
        bits.set(1);
        bits.set(3);
        let s = SparseActivation::from_parts(vec![-5.0f32, 3.0], bits, vec![4]).unwrap();
        assert_eq!(reconstruct(&s).unwrap().data(), &[0.0, -5.0, 0.0, 3.0]);

        let e = SparseActivation::<f32>::from_parts(vec![], Bitset::new(4), vec![2, 2]).unwrap();
        assert_eq!(reconstruct(&e).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn corrupt_sparse_rejected() {
        let mut bits = Bitset::new(4);
        bits.set(0);
        assert!(SparseActivation::from_parts(vec![1.0f32, 2.0], bits.clone(), vec![4]).is_err());
        assert!(SparseActivation::from_parts(vec![1.0f32], bits, vec![5]).is_err());
    }

    #[test]
    fn byte_formulas() {
        let dense = ActivationRecord::Dense(Tensor::<f32>::zeros(&[1000]));
        assert_eq!(cached_bytes(&dense), 4000);
        let data: Vec<f32> = (0..1000).map(|i| if i % 10 == 0 { 1.0 } else { 0.0 }).collect();
        let sparse = ActivationRecord::Sparse(decompose(&Tensor::from_vec(data)));
        assert_eq!(cached_bytes(&sparse), 400 + 125);
        assert_eq!(cached_bytes(&ActivationRecord::<f32>::Absent), 0);
        assert_eq!(
            cached_bytes(&ActivationRecord::<f32>::Recompute { block_start: 0 }),
            0
        );
        assert_eq!(
            cached_bytes(&ActivationRecord::<f32>::MaskOnly(Bitset::new(1001))),
            126
        );
    }

    #[test]
    fn pruned_record_never_inflates() {
        let a = Tensor::from_fn(&[100], |i| i as f32 + 1.0);
        let r = ActivationRecord::pruned(&a, 0.01).unwrap();
        assert!(matches!(r, ActivationRecord::Dense(_)));
        let r = ActivationRecord::pruned(&a, 0.5).unwrap();
        assert!(matches!(r, ActivationRecord::Sparse(_)));
        assert_eq!(cached_bytes(&r), 4 * 50 + 13);
        assert!(matches!(
            ActivationRecord::pruned(&a, 0.0).unwrap(),
            ActivationRecord::Dense(_)
        ));
    }

    fn tensor_strategy() -> impl Strategy<Value = Tensor<f32>> {
        prop::collection::vec(
            prop_oneof![3 => -10.0f32..10.0, 1 => Just(0.0f32), 1 => Just(1.5f32)],
            1..300,
        )
        .prop_map(Tensor::from_vec)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip_is_bit_exact(a in tensor_strategy()) {
            let s = decompose(&a);
            prop_assert_eq!(s.index().count_ones(), s.values().len());
            prop_assert_eq!(s.index().len(), a.len());
            let back = reconstruct(&s).unwrap();
            prop_assert_eq!(
                back.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                a.data().iter().map(|x| if *x == 0.0 { 0.0f32.to_bits() } else { x.to_bits() }).collect::<Vec<_>>()
            );
            prop_assert_eq!(decompose(&back), s);
        }

        #[test]
        fn prune_matches_sort_oracle(a in tensor_strategy(), p in 0.0f64..=1.0) {
            let got = prune(&a, p).unwrap();
            prop_assert_eq!(got.data(), &prune_oracle(a.data(), p)[..]);
        }

        #[test]
        fn prune_idempotent(a in tensor_strategy(), p in 0.0f64..=1.0) {
            let once = prune(&a, p).unwrap();
            prop_assert_eq!(prune(&once, p).unwrap(), once);
        }

        #[test]
        fn prune_support_monotone(a in tensor_strategy(), p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
            let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
            let keep_lo = prune(&a, lo).unwrap();
            let keep_hi = prune(&a, hi).unwrap();
            for (x, y) in keep_hi.data().iter().zip(keep_lo.data()) {
                if *x != 0.0 { prop_assert!(*y != 0.0); }
            }
            let bytes_lo = cached_bytes(&ActivationRecord::pruned(&a, lo).unwrap());
            let bytes_hi = cached_bytes(&ActivationRecord::pruned(&a, hi).unwrap());
            prop_assert!(bytes_hi <= bytes_lo);
        }

        #[test]
        fn sparse_bytes_formula(a in tensor_strategy(), p in 0.0f64..=1.0) {
            let s = decompose(&prune(&a, p).unwrap());
            let k = s.values().len();
            let n = a.len();
            prop_assert_eq!(cached_bytes(&ActivationRecord::Sparse(s)), 4 * k + n.div_ceil(8));
            prop_assert_eq!(cached_bytes(&ActivationRecord::Dense(a)), 4 * n);
        }
    }
}

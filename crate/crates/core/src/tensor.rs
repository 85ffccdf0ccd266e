//! Dense rank-4 tensors `(N, C, H, W)`, row-major with `W` fastest.

use std::fmt;
use std::sync::Arc;

use crate::element::Element;
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;

pub type Dims = [usize; 4];

/// Immutable dense tensor. Cloning is cheap (shared storage).
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Dims,
    data: Arc<[T]>,
}

/// Initial contents for [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Zeros,
    Ones,
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
}

pub fn numel(dims: Dims) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Size(format!("element count of {dims:?} overflows")))
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        let n = numel(dims)?;
        if data.len() != n {
            return Err(shape_err!(
                "data length {} does not match shape {dims:?} ({n} elements)",
                data.len()
            ));
        }
        Ok(Tensor {
            dims,
            data: data.into(),
        })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(Dims) -> T) -> Result<Self> {
        let n = numel(dims)?;
        let mut data = Vec::with_capacity(n);
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    for d in 0..dims[3] {
                        data.push(f([a, b, c, d]));
                    }
                }
            }
        }
        Ok(Tensor {
            dims,
            data: data.into(),
        })
    }

    pub fn full(dims: Dims, value: T) -> Result<Self> {
        let n = numel(dims)?;
        Ok(Tensor {
            dims,
            data: vec![value; n].into(),
        })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::full(dims, T::ZERO)
    }

    pub fn ones(dims: Dims) -> Result<Self> {
        Self::full(dims, T::ONE)
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            dims: [1, 1, 1, 1],
            data: vec![v].into(),
        }
    }

    pub fn uniform(dims: Dims, lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        Self::create(dims, Fill::Uniform { lo, hi }, Some(rng))
    }

    pub fn normal(dims: Dims, mean: f64, std: f64, rng: &mut Rng) -> Result<Self> {
        Self::create(dims, Fill::Normal { mean, std }, Some(rng))
    }

    /// Random fills draw in f64 and round, so an f32 and an f64 tensor built
    /// from the same seed agree to f32 precision.
    pub fn create(dims: Dims, fill: Fill, rng: Option<&mut Rng>) -> Result<Self> {
        let n = numel(dims)?;
        match fill {
            Fill::Zeros => Self::zeros(dims),
            Fill::Ones => Self::ones(dims),
            Fill::Uniform { lo, hi } => {
                if !(lo <= hi) {
                    return Err(Error::Contract(format!("uniform bounds {lo} > {hi}")));
                }
                let rng = rng.ok_or_else(|| Error::Contract("uniform fill needs an rng".into()))?;
                let data = (0..n).map(|_| T::from_f64(rng.uniform(lo, hi))).collect();
                Self::from_vec(dims, data)
            }
            Fill::Normal { mean, std } => {
                if !(std >= 0.0) {
                    return Err(Error::Contract(format!("normal std {std} < 0")));
                }
                let rng = rng.ok_or_else(|| Error::Contract("normal fill needs an rng".into()))?;
                let data = (0..n).map(|_| T::from_f64(rng.normal(mean, std))).collect();
                Self::from_vec(dims, data)
            }
        }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    #[inline]
    pub fn offset(&self, idx: Dims) -> usize {
        let [_, c, h, w] = self.dims;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: Dims) -> T {
        self.data[self.offset(idx)]
    }

    /// The single value of a `(1,1,1,1)` tensor.
    pub fn item(&self) -> Result<T> {
        if self.dims != [1, 1, 1, 1] {
            return Err(shape_err!("item() on non-scalar tensor {:?}", self.dims));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, dims: Dims) -> Result<Self> {
        if numel(dims)? != self.len() {
            return Err(shape_err!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        Ok(Tensor {
            dims,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.sum() / self.len() as f64
        }
    }

    pub fn min_max(&self) -> Option<(T, T)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.dims != other.dims {
            return Err(shape_err!("{:?} vs {:?}", self.dims, other.dims));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    /// Channel slice `[start, end)` as a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if start > end || end > c {
            return Err(shape_err!("channel slice {start}..{end} of {c}"));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (end - start) * plane);
        for b in 0..n {
            let base = b * c * plane;
            out.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Self::from_vec([n, end - start, h, w], out)
    }

    /// Batch element `i` as a `(1, C, H, W)` tensor.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if i >= n {
            return Err(shape_err!("batch index {i} out of {n}"));
        }
        let sz = c * h * w;
        Self::from_vec([1, c, h, w], self.data[i * sz..(i + 1) * sz].to_vec())
    }

    /// Concatenates along the batch axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| shape_err!("stack of zero tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let [tn, tc, th, tw] = t.dims;
            if (tc, th, tw) != (c, h, w) {
                return Err(shape_err!("stack of {:?} with {:?}", first.dims, t.dims));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Self::from_vec([n, c, h, w], data)
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", std::any::type_name::<T>(), self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

/// Broadcast layout of `b` against `a`: every axis of `b` is either equal to
/// `a`'s or 1.
pub(crate) fn broadcast_ok(a: Dims, b: Dims) -> bool {
    a.iter().zip(b.iter()).all(|(&x, &y)| x == y || y == 1)
}

/// Flat index into `b` for each flat index of `a` under broadcasting.
pub(crate) fn broadcast_index(b: Dims, idx: Dims) -> usize {
    let i = [
        if b[0] == 1 { 0 } else { idx[0] },
        if b[1] == 1 { 0 } else { idx[1] },
        if b[2] == 1 { 0 } else { idx[2] },
        if b[3] == 1 { 0 } else { idx[3] },
    ];
    ((i[0] * b[1] + i[1]) * b[2] + i[2]) * b[3] + i[3]
}

/// Applies `f(a_i, b_j)` with `b` broadcast over `a`.
pub(crate) fn zip_broadcast<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let (ad, bd) = (a.dims(), b.dims());
    if ad == bd {
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::from_vec(ad, data);
    }
    if !broadcast_ok(ad, bd) {
        return Err(shape_err!("cannot broadcast {bd:?} against {ad:?}"));
    }
    let (ad_, bd_) = (ad, bd);
    let mut data = Vec::with_capacity(a.len());
    let ad = a.data();
    let bdat = b.data();
    let mut k = 0;
    for n in 0..ad_[0] {
        for c in 0..ad_[1] {
            for h in 0..ad_[2] {
                for w in 0..ad_[3] {
                    let j = broadcast_index(bd_, [n, c, h, w]);
                    data.push(f(ad[k], bdat[j]));
                    k += 1;
                }
            }
        }
    }
    Tensor::from_vec(ad_, data)
}

/// Sums `g` (shaped like `a`) down to the broadcast shape `b`.
pub(crate) fn reduce_to<T: Element>(g: &Tensor<T>, b: Dims) -> Result<Tensor<T>> {
    let gd = g.dims();
    if gd == b {
        return Ok(g.clone());
    }
    let mut out = vec![T::ZERO; numel(b)?];
    let data = g.data();
    let mut k = 0;
    for n in 0..gd[0] {
        for c in 0..gd[1] {
            for h in 0..gd[2] {
                for w in 0..gd[3] {
                    out[broadcast_index(b, [n, c, h, w])] += data[k];
                    k += 1;
                }
            }
        }
    }
    Tensor::from_vec(b, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_ones() {
        let z = Tensor::<f32>::zeros([1, 1, 2, 2]).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let o = Tensor::<f64>::ones([1, 1, 1, 1]).unwrap();
        assert_eq!(o.item().unwrap(), 1.0);
    }

    #[test]
    fn seeded_fill_is_deterministic() {
        let a = Tensor::<f32>::uniform([2, 3, 4, 4], 0.0, 1.0, &mut Rng::new(7)).unwrap();
        let b = Tensor::<f32>::uniform([2, 3, 4, 4], 0.0, 1.0, &mut Rng::new(7)).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(a.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn overflow_is_size_error() {
        let r = Tensor::<f32>::zeros([usize::MAX, 2, 1, 1]);
        assert!(matches!(r, Err(Error::Size(_))));
    }

    #[test]
    fn bad_fill_parameters() {
        let mut rng = Rng::new(1);
        assert!(Tensor::<f32>::uniform([1, 1, 1, 1], 1.0, 0.0, &mut rng).is_err());
        assert!(Tensor::<f32>::normal([1, 1, 1, 1], 0.0, -1.0, &mut rng).is_err());
        assert!(Tensor::<f32>::create([1, 1, 1, 1], Fill::Normal { mean: 0.0, std: 1.0 }, None).is_err());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn broadcast_matches_tiling() {
        let mut rng = Rng::new(3);
        let a = Tensor::<f64>::normal([2, 3, 4, 5], 0.0, 1.0, &mut rng).unwrap();
        let b = Tensor::<f64>::normal([2, 3, 1, 1], 0.0, 1.0, &mut rng).unwrap();
        let out = zip_broadcast(&a, &b, |x, y| x + y).unwrap();
        let tiled = Tensor::from_fn([2, 3, 4, 5], |[n, c, _, _]| b.at([n, c, 0, 0])).unwrap();
        let oracle = zip_broadcast(&a, &tiled, |x, y| x + y).unwrap();
        assert!(out.bitwise_eq(&oracle));
        let back = reduce_to(&Tensor::<f64>::ones([2, 3, 4, 5]).unwrap(), [2, 3, 1, 1]).unwrap();
        assert!(back.data().iter().all(|&v| v == 20.0));
    }

    #[test]
    fn slice_and_stack() {
        let t = Tensor::<f32>::from_fn([2, 3, 1, 2], |[n, c, _, w]| (n * 100 + c * 10 + w) as f32).unwrap();
        let s = t.slice_channels(1, 3).unwrap();
        assert_eq!(s.dims(), [2, 2, 1, 2]);
        assert_eq!(s.data(), &[10.0, 11.0, 20.0, 21.0, 110.0, 111.0, 120.0, 121.0]);
        let parts = [t.batch_item(0).unwrap(), t.batch_item(1).unwrap()];
        assert!(Tensor::stack_batch(&parts).unwrap().bitwise_eq(&t));
    }
}

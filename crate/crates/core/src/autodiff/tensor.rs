use crate::scalar::Real;

use super::AutodiffError;

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::InvalidArgument(format!(
                "tensor of shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_slice(shape: &[usize], data: &[T]) -> Result<Self, AutodiffError> {
        Self::new(shape.to_vec(), data.to_vec())
    }

    /// 1-D tensor.
    pub fn vector(data: &[T]) -> Self {
        Self {
            shape: vec![data.len()],
            data: data.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }
}

/// Numpy-style broadcast of two shapes, aligned on trailing dimensions.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index into a tensor of shape
/// `src` broadcast to `out`.
pub(crate) fn broadcast_index(src: &[usize], out: &[usize]) -> BroadcastIndex {
    let numel_src: usize = src.iter().product();
    let numel_out: usize = out.iter().product();
    if src == out {
        return BroadcastIndex::Identity;
    }
    if numel_src == 1 {
        return BroadcastIndex::Constant;
    }
    // src equals a trailing suffix of out (bias-style broadcast)
    let trimmed: Vec<usize> = {
        let first = src.iter().position(|&d| d != 1).unwrap_or(src.len());
        src[first..].to_vec()
    };
    if out.len() >= trimmed.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
        return BroadcastIndex::Cycle(numel_src);
    }
    let rank = out.len();
    let offset = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let mut map = Vec::with_capacity(numel_out);
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..numel_out {
        map.push(idx);
        for d in (0..rank).rev() {
            counter[d] += 1;
            idx += strides[d];
            if counter[d] < out[d] {
                break;
            }
            idx -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    BroadcastIndex::Gather(map)
}

pub(crate) enum BroadcastIndex {
    Identity,
    Constant,
    Cycle(usize),
    Gather(Vec<usize>),
}

impl BroadcastIndex {
    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Self::Identity => i,
            Self::Constant => 0,
            Self::Cycle(n) => i % n,
            Self::Gather(map) => map[i],
        }
    }
}

/// Sums `grad` (shaped like the broadcast output) back down to `target`.
pub(crate) fn reduce_to<T: Real>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let index = broadcast_index(target, grad.shape());
    let mut out = Tensor::zeros(target);
    let dst = out.data_mut();
    for (i, &g) in grad.data().iter().enumerate() {
        dst[index.at(i)] += g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shapes(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shapes(&[4, 1], &[1, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shapes(&[2, 1, 3], &[4, 1]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shapes(&[2, 3], &[4]), None);
        assert_eq!(broadcast_shapes(&[], &[2, 2]), Some(vec![2, 2]));
    }

    #[test]
    fn gather_index_matches_manual() {
        // [2,1,3] -> [2,4,3]
        let idx = broadcast_index(&[2, 1, 3], &[2, 4, 3]);
        for a in 0..2 {
            for b in 0..4 {
                for c in 0..3 {
                    let flat = (a * 4 + b) * 3 + c;
                    assert_eq!(idx.at(flat), a * 3 + c);
                }
            }
        }
        // column broadcast [3,1] -> [3,2]
        let idx = broadcast_index(&[3, 1], &[3, 2]);
        let got: Vec<usize> = (0..6).map(|i| idx.at(i)).collect();
        assert_eq!(got, vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn reduce_sums_broadcast_axes() {
        let g = Tensor::<f64>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(reduce_to(&g, &[3]).data(), &[5., 7., 9.]);
        assert_eq!(reduce_to(&g, &[2, 1]).data(), &[6., 15.]);
        assert_eq!(reduce_to(&g, &[]).data(), &[21.]);
    }
}

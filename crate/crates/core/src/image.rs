//! Value types passed between the pipeline stages.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueDomain {
    UnitInterval,
    UnboundedFeature,
}

/// Dense `H × W × C` image or feature map, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane<T> {
    data: Tensor<T>,
    domain: ValueDomain,
}

impl<T: Scalar> ImagePlane<T> {
    pub fn new(data: Tensor<T>, domain: ValueDomain) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s.iter().any(|&d| d == 0) {
            return Err(invalid(format!("image plane must be H×W×C with positive sizes, got {s:?}")));
        }
        if domain == ValueDomain::UnitInterval
            && data.data().iter().any(|&v| !(v >= T::zero() && v <= T::one()))
        {
            return Err(invalid("unit-interval image has values outside [0, 1]"));
        }
        Ok(Self { data, domain })
    }

    /// A unit-interval image from `[H, W, C]` data.
    pub fn unit(data: Tensor<T>) -> Result<Self> {
        Self::new(data, ValueDomain::UnitInterval)
    }

    pub fn feature(data: Tensor<T>) -> Result<Self> {
        Self::new(data, ValueDomain::UnboundedFeature)
    }

    pub fn from_fn(h: usize, w: usize, c: usize, domain: ValueDomain, f: impl FnMut(usize) -> T) -> Result<Self> {
        Self::new(Tensor::from_fn(&[h, w, c], f), domain)
    }

    pub fn height(&self) -> usize {
        self.data.dim(0)
    }

    pub fn width(&self) -> usize {
        self.data.dim(1)
    }

    pub fn channels(&self) -> usize {
        self.data.dim(2)
    }

    pub fn domain(&self) -> ValueDomain {
        self.domain
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.data.data()[(y * self.width() + x) * self.channels() + c]
    }

    /// `[1, H, W, C]` view for batched operations.
    pub fn to_batch(&self) -> Tensor<T> {
        let s = self.data.shape();
        self.data
            .clone()
            .reshape(&[1, s[0], s[1], s[2]])
            .expect("same element count")
    }

    /// Splits a `[B, H, W, C]` batch into planes.
    pub fn unbatch(batch: &Tensor<T>, domain: ValueDomain) -> Result<Vec<Self>> {
        if batch.rank() != 4 {
            return Err(invalid(format!("expected [B,H,W,C], got {:?}", batch.shape())));
        }
        (0..batch.dim(0))
            .map(|i| Self::new(batch.index_first(i), domain))
            .collect()
    }

    /// Stacks same-sized planes into `[B, H, W, C]`.
    pub fn batch(items: &[Self]) -> Result<Tensor<T>> {
        let ts: Vec<Tensor<T>> = items.iter().map(|p| p.data.clone()).collect();
        Tensor::stack(&ts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    Prior,
    Condition,
    Denoised,
    Noisy,
}

/// Length-`Ĉ` degradation prior, diffusion condition or latent.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorVector<T> {
    data: Vec<T>,
    kind: PriorKind,
}

impl<T: Scalar> PriorVector<T> {
    pub fn new(data: Vec<T>, kind: PriorKind) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid("prior vector must be non-empty"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("prior vector has non-finite entries"));
        }
        Ok(Self { data, kind })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn kind(&self) -> PriorKind {
        self.kind
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn with_kind(mut self, kind: PriorKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_parts(vec![self.data.len()], self.data.clone())
    }

    /// Rows of a `[B, Ĉ]` tensor.
    pub fn unbatch(t: &Tensor<T>, kind: PriorKind) -> Result<Vec<Self>> {
        if t.rank() != 2 {
            return Err(invalid(format!("expected [B, Ĉ], got {:?}", t.shape())));
        }
        (0..t.dim(0))
            .map(|i| Self::new(t.index_first(i).into_data(), kind))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthProvenance {
    Stub,
    External,
}

/// Single-channel `H × W` depth in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRaster<T> {
    data: Tensor<T>,
    provenance: DepthProvenance,
}

impl<T: Scalar> DepthRaster<T> {
    pub fn new(data: Tensor<T>, provenance: DepthProvenance) -> Result<Self> {
        let s = data.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(invalid(format!("depth raster must be H×W, got {s:?}")));
        }
        if data.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(invalid("depth raster values must lie in [0, 1]"));
        }
        Ok(Self { data, provenance })
    }

    pub fn height(&self) -> usize {
        self.data.dim(0)
    }

    pub fn width(&self) -> usize {
        self.data.dim(1)
    }

    pub fn provenance(&self) -> DepthProvenance {
        self.provenance
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.data.data()[y * self.width() + x]
    }

    /// `[1, H, W, 1]` for batched operations.
    pub fn to_batch(&self) -> Tensor<T> {
        self.data
            .clone()
            .reshape(&[1, self.height(), self.width(), 1])
            .expect("same element count")
    }
}

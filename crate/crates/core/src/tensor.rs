//! Dense tensors and flat parameter-space vectors.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} implies {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&s| s == 1)
    }

    /// (rows, cols) view: vectors are one row, scalars 1x1.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One named parameter block inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, contiguous mapping of named blocks into a flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    dim: usize,
}

impl Layout {
    /// Build a layout by packing the blocks back to back in the given order.
    pub fn from_shapes<S: Into<String>>(blocks: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let segments = blocks
            .into_iter()
            .map(|(name, shape)| {
                let seg = Segment {
                    name: name.into(),
                    offset,
                    shape,
                };
                offset += seg.len();
                seg
            })
            .collect();
        Layout {
            segments,
            dim: offset,
        }
    }

    /// Single unnamed block of dimension `d`.
    pub fn flat(d: usize) -> Self {
        Layout::from_shapes([("theta", vec![d])])
    }

    /// Re-check contiguity, e.g. after deserializing.
    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for s in &self.segments {
            if s.offset != expected {
                return Err(Error::contract(format!(
                    "segment {} at offset {} (expected {expected})",
                    s.name, s.offset
                )));
            }
            expected += s.len();
        }
        if expected != self.dim {
            return Err(Error::contract(format!(
                "segments cover {expected} values, layout claims {}",
                self.dim
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Flat parameter vector θ with its block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::contract(format!(
                "layout has dimension {}, got {} values",
                layout.dim(),
                values.len()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let d = layout.dim();
        ParamVector {
            values: vec![0.0; d],
            layout,
        }
    }

    /// Flat vector with a single-block layout.
    pub fn flat(values: Vec<f64>) -> Self {
        let layout = Arc::new(Layout::flat(values.len()));
        ParamVector { values, layout }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.values.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.values).sqrt()
    }
}

/// Gaussian parameter-space perturbation δ ~ N(0, σ² I).
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Vec<f64>,
    pub sigma: f64,
    pub seed: u64,
}

impl Perturbation {
    pub fn dim(&self) -> usize {
        self.delta.len()
    }

    /// All-zero perturbation, for identity checks.
    pub fn zero(d: usize) -> Self {
        Perturbation {
            delta: vec![0.0; d],
            sigma: 0.0,
            seed: 0,
        }
    }
}

pub fn gaussian_perturbation(d: usize, sigma: f64, seed: u64) -> Result<Perturbation> {
    if d == 0 {
        return Err(Error::invalid("perturbation dimension must be at least 1"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let mut delta = vec![0.0; d];
    let mut rng = rng::stream(seed);
    rng::fill_standard_normal(&mut rng, &mut delta);
    for v in &mut delta {
        *v *= sigma;
    }
    Ok(Perturbation { delta, sigma, seed })
}

pub fn rademacher_probe(d: usize, seed: u64) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(Error::invalid("probe dimension must be at least 1"));
    }
    let mut v = vec![0.0; d];
    rng::fill_rademacher(&mut rng::stream(seed), &mut v);
    Ok(v)
}

/// θ + scale·δ, leaving θ untouched.
pub fn apply_perturbation(theta: &ParamVector, delta: &Perturbation, scale: f64) -> Result<ParamVector> {
    if theta.dim() != delta.dim() {
        return Err(Error::contract(format!(
            "perturbation dimension {} does not match parameters {}",
            delta.dim(),
            theta.dim()
        )));
    }
    let values = if scale == 0.0 {
        theta.values.clone()
    } else {
        theta
            .values
            .iter()
            .zip(&delta.delta)
            .map(|(t, d)| t + scale * d)
            .collect()
    };
    Ok(ParamVector {
        values,
        layout: theta.layout.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.dims2(), (2, 3));
    }

    #[test]
    fn layout_is_contiguous() {
        let l = Layout::from_shapes([("a", vec![2, 3]), ("b", vec![4]), ("c", vec![1, 1])]);
        assert_eq!(l.dim(), 11);
        assert_eq!(l.segment("b").unwrap().range(), 6..10);
        l.validate().unwrap();
    }

    #[test]
    fn gaussian_moments() {
        let d = 100_000;
        let sigma = 1e-5;
        let p = gaussian_perturbation(d, sigma, 42).unwrap();
        let mean = p.delta.iter().sum::<f64>() / d as f64;
        assert!(mean.abs() <= 4.0 * sigma / (d as f64).sqrt(), "mean {mean}");
        let var = p.delta.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d - 1) as f64;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn gaussian_is_deterministic() {
        let a = gaussian_perturbation(1000, 0.1, 9).unwrap();
        let b = gaussian_perturbation(1000, 0.1, 9).unwrap();
        assert_eq!(a, b);
        let c = gaussian_perturbation(1000, 0.1, 10).unwrap();
        assert_ne!(a.delta, c.delta);
    }

    #[test]
    fn gaussian_rejects_bad_sigma() {
        assert!(matches!(gaussian_perturbation(3, 0.0, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(gaussian_perturbation(3, -1.0, 1), Err(Error::InvalidArgument(_))));
        assert!(gaussian_perturbation(0, 1.0, 1).is_err());
    }

    #[test]
    fn rademacher_support_and_norm() {
        let d = 10_000;
        let v = rademacher_probe(d, 3).unwrap();
        assert!(v.iter().all(|&x| x == 1.0 || x == -1.0));
        let mean = v.iter().sum::<f64>() / d as f64;
        assert!(mean.abs() <= 0.04);
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        assert_eq!(vtv, d as f64);
        assert_eq!(v, rademacher_probe(d, 3).unwrap());
    }

    #[test]
    fn apply_perturbation_identities() {
        let theta = ParamVector::flat(vec![0.3, -1.7, 2.5e-3, 1e8]);
        let p = gaussian_perturbation(4, 0.5, 1).unwrap();
        let same = apply_perturbation(&theta, &p, 0.0).unwrap();
        assert_eq!(same.values(), theta.values());

        let zero = ParamVector::flat(vec![0.0; 4]);
        assert_eq!(apply_perturbation(&zero, &p, 1.0).unwrap().values(), &p.delta[..]);

        // parameter-scale θ with a small perturbation: the round trip is exact to 1 ulp
        let init = gaussian_perturbation(5000, 0.1, 2).unwrap();
        let theta_big = ParamVector::flat(init.delta.clone());
        let small = gaussian_perturbation(5000, 1e-5, 3).unwrap();
        let there = apply_perturbation(&theta_big, &small, 1.0).unwrap();
        let back = apply_perturbation(&there, &small, -1.0).unwrap();
        for (a, b) in back.values().iter().zip(theta_big.values()) {
            let ulp = f64::EPSILON * b.abs();
            assert!((a - b).abs() <= ulp, "{a} vs {b}");
        }
        assert_eq!(theta.values()[0], 0.3);
    }

    #[test]
    fn apply_perturbation_checks_dimension() {
        let theta = ParamVector::flat(vec![0.0; 3]);
        let p = Perturbation::zero(4);
        assert!(matches!(apply_perturbation(&theta, &p, 1.0), Err(Error::ContractViolation(_))));
    }
}

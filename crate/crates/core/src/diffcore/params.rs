use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::ModelSpec;
use crate::{Error, Result};

/// Named parameter segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    /// Feature generator Θ.
    Generator,
    /// Classifier θ.
    Classifier,
    /// Second classifier θ′, present only during adversarial local updates.
    ClassifierAlt,
}

/// Flat parameters laid out as `[generator | classifier | classifier_alt]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    generator_len: usize,
    classifier_len: usize,
    has_alt: bool,
}

impl ParamVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
            generator_len: spec.generator_len(),
            classifier_len: spec.classifier_len(),
            has_alt: false,
        }
    }

    /// Gaussian initialization: `N(0, 2/fan_in)` for generator weights,
    /// `N(0, 1/fan_in)` for the classifier, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Self {
        let mut p = Self::zeros(spec);
        for layer in spec.generator_layers() {
            fill_layer(&mut p.values[layer.offset..layer.offset + layer.len()], layer.inp, layer.out, 2.0, rng);
        }
        let c = spec.classifier_layer();
        fill_layer(&mut p.values[c.offset..c.offset + c.len()], c.inp, c.out, 1.0, rng);
        p
    }

    /// A fresh classifier block drawn like the one in [`Self::init`].
    pub fn init_classifier<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Vec<f64> {
        let c = spec.classifier_layer();
        let mut block = vec![0.0; c.len()];
        fill_layer(&mut block, c.inp, c.out, 1.0, rng);
        block
    }

    pub fn from_values(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        let g = spec.generator_len();
        let c = spec.classifier_len();
        let has_alt = if values.len() == g + c {
            false
        } else if values.len() == g + 2 * c {
            true
        } else {
            return Err(Error::Dimension {
                what: "parameter vector",
                expected: g + c,
                got: values.len(),
            });
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ParamVector::from_values"));
        }
        Ok(Self {
            values,
            generator_len: g,
            classifier_len: c,
            has_alt,
        })
    }

    /// Adds (or replaces) the alternative classifier.
    pub fn with_alt(mut self, alt: &[f64]) -> Result<Self> {
        if alt.len() != self.classifier_len {
            return Err(Error::Dimension {
                what: "alternative classifier",
                expected: self.classifier_len,
                got: alt.len(),
            });
        }
        self.values.truncate(self.generator_len + self.classifier_len);
        self.values.extend_from_slice(alt);
        self.has_alt = true;
        Ok(self)
    }

    pub fn without_alt(mut self) -> Self {
        self.values.truncate(self.generator_len + self.classifier_len);
        self.has_alt = false;
        self
    }

    pub fn has_alt(&self) -> bool {
        self.has_alt
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn range(&self, seg: Segment) -> Range<usize> {
        let g = self.generator_len;
        let c = self.classifier_len;
        match seg {
            Segment::Generator => 0..g,
            Segment::Classifier => g..g + c,
            Segment::ClassifierAlt if self.has_alt => g + c..g + 2 * c,
            Segment::ClassifierAlt => g + c..g + c,
        }
    }

    pub fn segment(&self, seg: Segment) -> &[f64] {
        &self.values[self.range(seg)]
    }

    pub fn segment_mut(&mut self, seg: Segment) -> &mut [f64] {
        let r = self.range(seg);
        &mut self.values[r]
    }

    pub fn generator(&self) -> &[f64] {
        self.segment(Segment::Generator)
    }

    pub fn classifier(&self) -> &[f64] {
        self.segment(Segment::Classifier)
    }

    pub fn classifier_alt(&self) -> &[f64] {
        self.segment(Segment::ClassifierAlt)
    }

    /// `[generator | classifier]`, the parameters one forward pass uses.
    pub fn model(&self) -> &[f64] {
        &self.values[..self.generator_len + self.classifier_len]
    }

    /// `[generator | classifier_alt]` as an owned vector.
    pub fn alt_model(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.generator_len + self.classifier_len);
        v.extend_from_slice(self.generator());
        v.extend_from_slice(self.classifier_alt());
        v
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.generator_len == other.generator_len
            && self.classifier_len == other.classifier_len
            && self.has_alt == other.has_alt
    }

    /// Copy with every value replaced; `values` must keep the layout.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len(), "layout change in with_values");
        Self {
            values,
            generator_len: self.generator_len,
            classifier_len: self.classifier_len,
            has_alt: self.has_alt,
        }
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.values.iter().map(|v| v * v).sum())
    }

    pub fn distance(&self, other: &Self) -> f64 {
        libm::sqrt(self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    pub(crate) fn ensure_finite(self, origin: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(origin))
        }
    }

    pub(crate) fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if self.generator_len != spec.generator_len() || self.classifier_len != spec.classifier_len() {
            return Err(Error::Dimension {
                what: "parameter vector for model spec",
                expected: spec.param_count(),
                got: self.generator_len + self.classifier_len,
            });
        }
        Ok(())
    }
}

fn fill_layer<R: Rng + ?Sized>(block: &mut [f64], inp: usize, out: usize, gain: f64, rng: &mut R) {
    let std = libm::sqrt(gain / inp as f64);
    for w in &mut block[..inp * out] {
        let z: f64 = StandardNormal.sample(rng);
        *w = z * std;
    }
}

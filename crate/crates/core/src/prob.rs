use serde::Serialize;

use crate::error::{Error, Result};

pub const SUM_TOLERANCE: f64 = 1e-5;

/// A class-probability vector: non-negative entries summing to one.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f32>);

impl ProbVector {
    pub fn new(probs: Vec<f32>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("probability vector is empty"));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::invalid(format!("probability entry {bad} is not a finite non-negative value")));
        }
        let sum: f64 = probs.iter().map(|&p| f64::from(p)).sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(ProbVector(probs))
    }

    pub fn uniform(class_count: usize) -> Self {
        ProbVector(vec![1.0 / class_count as f32; class_count])
    }

    /// Puts `mass` on `class` and spreads the rest evenly.
    pub fn peaked(class_count: usize, class: usize, mass: f32) -> Self {
        let rest = (1.0 - mass) / (class_count - 1) as f32;
        ProbVector((0..class_count).map(|c| if c == class { mass } else { rest }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> f32 {
        self.0[class]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    /// Highest-probability class; ties go to the lowest class id.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Class ids ordered by descending probability, ties by ascending id.
    pub fn ranked(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.0.len()).collect();
        ids.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        ids
    }

    /// Difference between the two largest entries (0 for a single class).
    pub fn margin(&self) -> f64 {
        let ranked = self.ranked();
        match ranked.as_slice() {
            [a, b, ..] => f64::from(self.0[*a]) - f64::from(self.0[*b]),
            _ => f64::from(self.0[0]),
        }
    }
}

//! Per-unit projection head: an affine map, optionally preceded by one
//! hidden layer, applied to every embedding before alignment.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::EmbeddingSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation `{other}`"
            ))),
        }
    }
}

/// `y = x W + b` with `W: d_in × d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub hidden: Option<Dense>,
    pub out: Dense,
}

/// Intermediate values kept for the backward pass.
pub struct HeadCache {
    pre: Option<Array2<f64>>,
    post: Option<Array2<f64>>,
}

impl Head {
    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden.iter().chain(std::iter::once(&self.out))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.hidden.iter_mut().chain(std::iter::once(&mut self.out))
    }

    pub fn forward(&self, x: &Array2<f64>, activation: Activation) -> (Array2<f64>, HeadCache) {
        match &self.hidden {
            None => (
                self.out.forward(x),
                HeadCache {
                    pre: None,
                    post: None,
                },
            ),
            Some(hidden) => {
                let pre = hidden.forward(x);
                let post = match activation {
                    Activation::Identity => pre.clone(),
                    Activation::Relu => pre.mapv(|v| v.max(0.0)),
                };
                let y = self.out.forward(&post);
                (
                    y,
                    HeadCache {
                        pre: Some(pre),
                        post: Some(post),
                    },
                )
            }
        }
    }

    /// Accumulates parameter gradients into `grad` given `dL/dy`.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        cache: &HeadCache,
        dy: &Array2<f64>,
        activation: Activation,
        grad: &mut Head,
    ) {
        let out_input = cache.post.as_ref().unwrap_or(x);
        grad.out.weight += &out_input.t().dot(dy);
        grad.out.bias += &dy.sum_axis(Axis(0));
        if let (Some(ghidden), Some(pre)) = (grad.hidden.as_mut(), cache.pre.as_ref()) {
            let mut dpre = dy.dot(&self.out.weight.t());
            if activation == Activation::Relu {
                dpre.zip_mut_with(pre, |d, &p| {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            ghidden.weight += &x.t().dot(&dpre);
            ghidden.bias += &dpre.sum_axis(Axis(0));
        }
    }
}

/// Shared or twin projection heads. With a single head both the anchor and
/// the positive branch use it; with two, head 0 projects anchors and head 1
/// projects clips/frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionModel {
    pub heads: Vec<Head>,
    pub activation: Activation,
    pub seed: u64,
}

impl ProjectionModel {
    /// Linear identity map; evaluating with it is evaluating the raw
    /// embeddings.
    pub fn identity(dim: usize) -> Self {
        let mut out = Dense::zeros(dim, dim);
        out.weight.diag_mut().fill(1.0);
        Self {
            heads: vec![Head { hidden: None, out }],
            activation: Activation::Identity,
            seed: 0,
        }
    }

    /// One hidden layer with He-style Gaussian init drawn from `seed`.
    pub fn with_hidden(
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if d_in == 0 || d_hidden == 0 || d_out == 0 {
            return Err(Error::InvalidArgument(
                "layer sizes must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |rows: usize, cols: usize| {
            let normal = Normal::new(0.0, (2.0 / rows as f64).sqrt()).expect("valid std");
            Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng))
        };
        let hidden = Dense {
            weight: init(d_in, d_hidden),
            bias: Array1::zeros(d_hidden),
        };
        let out = Dense {
            weight: init(d_hidden, d_out),
            bias: Array1::zeros(d_out),
        };
        Ok(Self {
            heads: vec![Head {
                hidden: Some(hidden),
                out,
            }],
            activation,
            seed,
        })
    }

    /// Splits the shared head into separate anchor and positive heads.
    pub fn into_twin(mut self) -> Self {
        if self.heads.len() == 1 {
            let copy = self.heads[0].clone();
            self.heads.push(copy);
        }
        self
    }

    pub fn is_twin(&self) -> bool {
        self.heads.len() == 2
    }

    pub fn input_dim(&self) -> usize {
        let h = &self.heads[0];
        h.hidden.as_ref().unwrap_or(&h.out).weight.nrows()
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        self.heads[0].hidden.as_ref().map(|h| h.weight.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.heads[0].out.weight.ncols()
    }

    pub fn anchor_head(&self) -> &Head {
        &self.heads[0]
    }

    pub fn positive_head(&self) -> &Head {
        self.heads.last().expect("at least one head")
    }

    pub fn positive_head_index(&self) -> usize {
        self.heads.len() - 1
    }

    fn project_with(&self, head: &Head, seq: &EmbeddingSequence) -> Result<EmbeddingSequence> {
        if seq.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: seq.dim(),
            });
        }
        let (y, _) = head.forward(seq.units(), self.activation);
        EmbeddingSequence::new(seq.id.clone(), y)
    }

    pub fn project_anchor(&self, seq: &EmbeddingSequence) -> Result<EmbeddingSequence> {
        self.project_with(self.anchor_head(), seq)
    }

    pub fn project_positive(&self, seq: &EmbeddingSequence) -> Result<EmbeddingSequence> {
        self.project_with(self.positive_head(), seq)
    }

    /// Same architecture, every parameter zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.scale(0.0);
        z
    }

    pub fn scale(&mut self, alpha: f64) {
        for head in &mut self.heads {
            for layer in head.layers_mut() {
                layer.weight *= alpha;
                layer.bias *= alpha;
            }
        }
    }

    pub fn add_assign(&mut self, other: &ProjectionModel) {
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            for (la, lb) in a.layers_mut().zip(b.layers()) {
                la.weight += &lb.weight;
                la.bias += &lb.bias;
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.heads
            .iter()
            .flat_map(|h| h.layers())
            .map(Dense::n_params)
            .sum()
    }

    /// Parameters in a fixed order: per head, hidden then output layer,
    /// weight (row-major) then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in self.heads.iter().flat_map(|h| h.layers()) {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                found: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for layer in self.heads.iter_mut().flat_map(|h| h.layers_mut()) {
            layer
                .weight
                .iter_mut()
                .for_each(|w| *w = it.next().unwrap());
            layer.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }

    /// Named parameter blocks (biases as `1 × n`), in flat order.
    pub fn named_blocks(&self) -> Vec<(String, Array2<f64>)> {
        let branch = |k: usize| match (self.heads.len(), k) {
            (1, _) => "shared",
            (_, 0) => "anchor",
            _ => "positive",
        };
        let mut out = Vec::new();
        for (k, head) in self.heads.iter().enumerate() {
            let prefix = branch(k);
            if let Some(h) = &head.hidden {
                out.push((format!("{prefix}.hidden.weight"), h.weight.clone()));
                out.push((
                    format!("{prefix}.hidden.bias"),
                    h.bias.clone().insert_axis(Axis(0)),
                ));
            }
            out.push((format!("{prefix}.out.weight"), head.out.weight.clone()));
            out.push((
                format!("{prefix}.out.bias"),
                head.out.bias.clone().insert_axis(Axis(0)),
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_projection_is_noop() {
        let m = ProjectionModel::identity(3);
        let s = EmbeddingSequence::from_rows("s", &[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]])
            .unwrap();
        assert_eq!(m.project_anchor(&s).unwrap(), s);
        assert_eq!(m.project_positive(&s).unwrap(), s);
        assert!(m
            .project_anchor(&EmbeddingSequence::from_rows("x", &[vec![1.0]]).unwrap())
            .is_err());
    }

    #[test]
    fn flat_round_trip() {
        let m = ProjectionModel::with_hidden(4, 3, 2, Activation::Relu, 5)
            .unwrap()
            .into_twin();
        let flat = m.to_flat();
        assert_eq!(flat.len(), 2 * (4 * 3 + 3 + 3 * 2 + 2));
        let mut z = m.zeros_like();
        z.set_flat(&flat).unwrap();
        assert_eq!(z, m);
        assert_eq!(m.named_blocks().len(), 8);
    }

    #[test]
    fn hidden_backward_matches_finite_differences() {
        let m = ProjectionModel::with_hidden(3, 4, 2, Activation::Relu, 1).unwrap();
        let x = ndarray::arr2(&[[0.3, -0.7, 1.1], [0.9, 0.2, -0.4]]);
        let w = ndarray::arr2(&[[0.5, -1.0], [2.0, 0.25]]);
        let f = |m: &ProjectionModel| (m.heads[0].forward(&x, m.activation).0 * &w).sum();
        let (_, cache) = m.heads[0].forward(&x, m.activation);
        let mut g = m.zeros_like();
        m.heads[0].backward(&x, &cache, &w, m.activation, &mut g.heads[0]);
        let base = m.to_flat();
        let grad = g.to_flat();
        let h = 1e-6;
        for k in 0..base.len() {
            let mut p = m.clone();
            let mut flat = base.clone();
            flat[k] += h;
            p.set_flat(&flat).unwrap();
            let mut q = m.clone();
            flat[k] -= 2.0 * h;
            q.set_flat(&flat).unwrap();
            assert_abs_diff_eq!(grad[k], (f(&p) - f(&q)) / (2.0 * h), epsilon = 1e-6);
        }
    }
}

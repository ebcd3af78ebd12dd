//! Prediction functions `g: X → ℝ^K` with exact reverse-mode gradients.
//!
//! Parameters live in one flat vector. Layout (row-major matrices):
//!
//! * linear: `W (K×d)`, `b (K)`
//! * mlp:    `W1 (h×d)`, `b1 (h)`, `W2 (K×h)`, `b2 (K)`, ReLU hidden layer
//!
//! Gradients of any objective are obtained by handing the model a
//! [`ScoreObjective`], which maps a batch of scores to a value and its
//! derivative with respect to those scores; the model back-propagates the rest.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp,
}

/// `(input d, hidden h, classes K)`; `hidden` is 0 for linear models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Dims {
    pub fn linear(input: usize, classes: usize) -> Self {
        Self {
            input,
            hidden: 0,
            classes,
        }
    }

    pub fn mlp(input: usize, hidden: usize, classes: usize) -> Self {
        Self { input, hidden, classes }
    }
}

/// Value of an objective on a batch of scores and its gradient with respect to them.
#[derive(Clone, Debug)]
pub struct ScoreEvaluation<T> {
    pub value: T,
    /// `∂value/∂scores`, same shape as the score matrix.
    pub grad: Array2<T>,
    /// Distance to the nearest point where the objective is not differentiable
    /// (ramp kinks, clamp boundaries); `+∞` for smooth objectives.
    pub kink: T,
    /// Class-decomposed risk terms, for objectives that have them.
    pub per_class: Option<Vec<T>>,
}

/// A scalar objective of the model's score matrix.
pub trait ScoreObjective<T: Scalar> {
    fn evaluate(&self, scores: ArrayView2<'_, T>) -> Result<ScoreEvaluation<T>>;
}

/// Objective value, parameter gradient and combined kink distance.
#[derive(Clone, Debug)]
pub struct Gradient<T> {
    pub evaluation: ScoreEvaluation<T>,
    pub grad: Vec<T>,
    /// `min(objective kink, smallest |hidden pre-activation|)`.
    pub kink: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    kind: ModelKind,
    dims: Dims,
    seed: u64,
    params: Vec<T>,
}

struct Forward<T> {
    scores: Array2<T>,
    hidden_pre: Option<Array2<T>>,
    hidden: Option<Array2<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn param_count(kind: ModelKind, dims: Dims) -> usize {
        match kind {
            ModelKind::Linear => (dims.input + 1) * dims.classes,
            ModelKind::Mlp => (dims.input + 1) * dims.hidden + (dims.hidden + 1) * dims.classes,
        }
    }

    fn validate(kind: ModelKind, dims: Dims) -> Result<()> {
        if dims.classes < 2 || dims.input == 0 {
            return Err(Error::Config(format!(
                "model needs d >= 1 and K >= 2, got d={} K={}",
                dims.input, dims.classes
            )));
        }
        match (kind, dims.hidden) {
            (ModelKind::Mlp, 0) => Err(Error::Config("mlp needs a hidden width >= 1".into())),
            (ModelKind::Linear, h) if h != 0 => {
                Err(Error::Config(format!("linear model cannot have hidden width {h}")))
            }
            _ => Ok(()),
        }
    }

    /// Weights ~ U(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`, biases 0.
    pub fn new(kind: ModelKind, dims: Dims, seed: u64) -> Result<Self> {
        Self::validate(kind, dims)?;
        let mut rng = seed::rng(seed, "model-init");
        let mut params = Vec::with_capacity(Self::param_count(kind, dims));
        let mut layer = |params: &mut Vec<T>, fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| T::lit(rng.random_range(-a..a))));
            params.extend(std::iter::repeat_n(T::zero(), fan_out));
        };
        match kind {
            ModelKind::Linear => layer(&mut params, dims.input, dims.classes),
            ModelKind::Mlp => {
                layer(&mut params, dims.input, dims.hidden);
                layer(&mut params, dims.hidden, dims.classes);
            }
        }
        Ok(Self {
            kind,
            dims,
            seed,
            params,
        })
    }

    pub fn from_params(kind: ModelKind, dims: Dims, seed: u64, params: Vec<T>) -> Result<Self> {
        Self::validate(kind, dims)?;
        let expected = Self::param_count(kind, dims);
        if params.len() != expected {
            return Err(Error::Dimension(format!(
                "{} parameters for a {kind:?} model that needs {expected}",
                params.len()
            )));
        }
        Ok(Self {
            kind,
            dims,
            seed,
            params,
        })
    }

    pub fn zeros(kind: ModelKind, dims: Dims) -> Result<Self> {
        Self::from_params(kind, dims, 0, vec![T::zero(); Self::param_count(kind, dims)])
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.dims.classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "{} parameters, expected {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// `true` for entries of weight matrices, `false` for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let Dims {
            input: d,
            hidden: h,
            classes: k,
        } = self.dims;
        let mut mask = Vec::with_capacity(self.params.len());
        let mut push = |w: usize, b: usize| {
            mask.extend(std::iter::repeat_n(true, w));
            mask.extend(std::iter::repeat_n(false, b));
        };
        match self.kind {
            ModelKind::Linear => push(k * d, k),
            ModelKind::Mlp => {
                push(h * d, h);
                push(k * h, k);
            }
        }
        mask
    }

    /// Offsets of `(W, b)` blocks for each layer.
    fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let Dims {
            input: d,
            hidden: h,
            classes: k,
        } = self.dims;
        match self.kind {
            ModelKind::Linear => vec![(0, k, d, k * d)],
            ModelKind::Mlp => {
                let second = h * d + h;
                vec![(0, h, d, h * d), (second, k, h, second + k * h)]
            }
        }
    }

    fn weight(&self, layer: (usize, usize, usize, usize)) -> ArrayView2<'_, T> {
        let (w, rows, cols, _) = layer;
        ArrayView2::from_shape((rows, cols), &self.params[w..w + rows * cols])
            .expect("layer shape matches parameter layout")
    }

    fn bias(&self, layer: (usize, usize, usize, usize)) -> ArrayView1<'_, T> {
        let (_, rows, _, b) = layer;
        ArrayView1::from(&self.params[b..b + rows])
    }

    fn check_input(&self, x: &ArrayView2<'_, T>) -> Result<()> {
        if x.ncols() != self.dims.input {
            return Err(Error::Dimension(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.dims.input
            )));
        }
        Ok(())
    }

    fn affine(&self, x: &ArrayView2<'_, T>, layer: (usize, usize, usize, usize)) -> Array2<T> {
        let mut out = Array2::zeros((x.nrows(), layer.1));
        out += &self.bias(layer);
        general_mat_mul(T::one(), x, &self.weight(layer).t(), T::one(), &mut out);
        out
    }

    fn run(&self, x: ArrayView2<'_, T>) -> Result<Forward<T>> {
        self.check_input(&x)?;
        let layers = self.layers();
        Ok(match self.kind {
            ModelKind::Linear => Forward {
                scores: self.affine(&x, layers[0]),
                hidden_pre: None,
                hidden: None,
            },
            ModelKind::Mlp => {
                let pre = self.affine(&x, layers[0]);
                let hidden = pre.mapv(|z| z.max(T::zero()));
                let scores = self.affine(&hidden.view(), layers[1]);
                Forward {
                    scores,
                    hidden_pre: Some(pre),
                    hidden: Some(hidden),
                }
            }
        })
    }

    /// Scores for a batch of inputs, one row per input.
    pub fn forward_batch(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        Ok(self.run(x)?.scores)
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input feature".into()));
        }
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(self.forward_batch(view)?.into_raw_vec_and_offset().0)
    }

    pub fn predict(&self, x: &[T]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    pub fn predict_batch(&self, x: ArrayView2<'_, T>) -> Result<Vec<usize>> {
        let scores = self.forward_batch(x)?;
        Ok(scores
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("standard layout")))
            .collect())
    }

    /// Objective value and its exact gradient with respect to the parameters.
    pub fn gradient<O: ScoreObjective<T> + ?Sized>(&self, x: ArrayView2<'_, T>, objective: &O) -> Result<Gradient<T>> {
        let fwd = self.run(x)?;
        let evaluation = objective.evaluate(fwd.scores.view())?;
        if !evaluation.value.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {}", evaluation.value)));
        }
        let dscores = &evaluation.grad;
        if dscores.dim() != fwd.scores.dim() {
            return Err(Error::Dimension("score gradient shape".into()));
        }
        let mut grad = vec![T::zero(); self.params.len()];
        let layers = self.layers();
        let mut kink = evaluation.kink;
        match self.kind {
            ModelKind::Linear => self.backprop_layer(&mut grad, layers[0], &x, dscores),
            ModelKind::Mlp => {
                let hidden = fwd.hidden.as_ref().expect("mlp caches hidden layer");
                let pre = fwd.hidden_pre.as_ref().expect("mlp caches pre-activations");
                self.backprop_layer(&mut grad, layers[1], &hidden.view(), dscores);
                let mut dhidden = dscores.dot(&self.weight(layers[1]));
                ndarray::Zip::from(&mut dhidden).and(pre).for_each(|g, &z| {
                    if z <= T::zero() {
                        *g = T::zero();
                    }
                });
                self.backprop_layer(&mut grad, layers[0], &x, &dhidden);
                kink = kink.min(pre.iter().fold(T::infinity(), |m, z| m.min(z.abs())));
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        Ok(Gradient { evaluation, grad, kink })
    }

    fn backprop_layer(
        &self,
        grad: &mut [T],
        layer: (usize, usize, usize, usize),
        input: &ArrayView2<'_, T>,
        dout: &Array2<T>,
    ) {
        let (w, rows, cols, b) = layer;
        let mut gw = ArrayViewMut2::from_shape((rows, cols), &mut grad[w..w + rows * cols]).expect("layer shape");
        general_mat_mul(T::one(), &dout.t(), input, T::zero(), &mut gw);
        let mut gb = ArrayViewMut1::from(&mut grad[b..b + rows]);
        gb.assign(&dout.sum_axis(Axis(0)));
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Wraps a closure as a [`ScoreObjective`].
pub struct FnObjective<F>(pub F);

impl<T: Scalar, F> ScoreObjective<T> for FnObjective<F>
where
    F: Fn(ArrayView2<'_, T>) -> Result<ScoreEvaluation<T>>,
{
    fn evaluate(&self, scores: ArrayView2<'_, T>) -> Result<ScoreEvaluation<T>> {
        (self.0)(scores)
    }
}

/// Mean ordinary loss `(1/n) Σ ℓ(y_i, g(x_i))` over labeled rows.
pub struct OrdinaryObjective<'a> {
    pub loss: crate::losses::Loss,
    pub labels: &'a [usize],
}

impl<T: Scalar> ScoreObjective<T> for OrdinaryObjective<'_> {
    fn evaluate(&self, scores: ArrayView2<'_, T>) -> Result<ScoreEvaluation<T>> {
        let n = scores.nrows();
        if n == 0 || n != self.labels.len() {
            return Err(Error::Dimension(format!(
                "{} score rows for {} labels",
                n,
                self.labels.len()
            )));
        }
        let inv_n = T::one() / T::from_usize_lossy(n);
        let k = scores.ncols();
        let mut grad = Array2::zeros((n, k));
        let mut value = T::zero();
        let mut kink = T::infinity();
        let mut w = vec![T::zero(); k];
        for (i, row) in scores.rows().into_iter().enumerate() {
            let s = row.as_slice().expect("standard layout");
            let y = self.labels[i];
            value += self.loss.value(y, s)?;
            w.iter_mut().for_each(|v| *v = T::zero());
            w[y] = inv_n;
            grad.row_mut(i)
                .assign(&Array1::from(self.loss.vector_jacobian_product(s, &w)));
            kink = kink.min(self.loss.kink_distance(s));
        }
        Ok(ScoreEvaluation {
            value: value * inv_n,
            grad,
            kink,
            per_class: None,
        })
    }
}

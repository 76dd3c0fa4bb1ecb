//! Parameter containers generic over their leaf type.
//!
//! Every parameter struct is written once as `Foo<T>`. `Foo<Tensor>` holds
//! weights, `Foo<Var>` the same weights bound into a [`Graph`], and
//! gradients come back as another `Foo<Tensor>`. Traversal order (and the
//! dotted names it reports) is fixed, which is what checkpoints rely on.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::numerics::{Gradients, Graph, Tensor, Var};

/// A tree of named parameter leaves.
pub trait Params<T> {
    type Mapped<U>;

    /// Rebuilds the same tree with every leaf transformed by `f`, visiting
    /// leaves in the fixed traversal order.
    fn map<'s, U>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> Self::Mapped<U>;

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T));

    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T)) {
        let _ = self.map(prefix, &mut |name, leaf| f(name, leaf));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Binds every leaf of `params` into `g` as a trainable node.
pub fn bind<'a, P: Params<Tensor>>(g: &mut Graph<'a>, params: &'a P) -> P::Mapped<Var> {
    params.map("", &mut |_, t| g.param(t))
}

/// Binds every leaf as a constant (no gradients tracked).
pub fn bind_frozen<'a, P: Params<Tensor>>(g: &mut Graph<'a>, params: &'a P) -> P::Mapped<Var> {
    params.map("", &mut |_, t| g.constant_ref(t))
}

/// Collects the gradient of every bound leaf, zeros where unreached.
pub fn gradients_of<P: Params<Var>>(vars: &P, grads: &Gradients) -> P::Mapped<Tensor> {
    vars.map("", &mut |_, v| grads.get_or_zeros(*v))
}

/// Flattened `(name, tensor)` list in traversal order.
pub fn named<P: Params<Tensor>>(params: &P) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    params.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// Tensor of shape `rows×cols` with entries drawn from `uniform(-bound, bound)`.
pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Tensor {
    if bound == 0.0 {
        return Tensor::zeros(rows, cols);
    }
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches data")
}

/// Weight and bias of an affine map `x·w + b` applied to row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = Tensor> {
    /// `in×out`
    pub w: T,
    /// `1×out`
    pub b: T,
}

impl Linear<Tensor> {
    /// Fan-in uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self { w: uniform(input, output, 1.0 / (input as f64).sqrt(), rng), b: Tensor::zeros(1, output) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { w: Tensor::zeros(input, output), b: Tensor::zeros(1, output) }
    }
}

impl<T> Params<T> for Linear<T> {
    type Mapped<U> = Linear<U>;

    fn map<'s, U>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> Linear<U> {
        Linear { w: f(&join(prefix, "w"), &self.w), b: f(&join(prefix, "b"), &self.b) }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// Dynamic-tanh normalizer parameters: scalar `alpha`, per-feature `gamma`
/// and `beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dyt<T = Tensor> {
    pub alpha: T,
    pub gamma: T,
    pub beta: T,
}

impl Dyt<Tensor> {
    pub fn init(dim: usize) -> Self {
        Self { alpha: Tensor::scalar(0.5), gamma: Tensor::filled(1, dim, 1.0), beta: Tensor::zeros(1, dim) }
    }
}

impl<T> Params<T> for Dyt<T> {
    type Mapped<U> = Dyt<U>;

    fn map<'s, U>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s T) -> U) -> Dyt<U> {
        Dyt {
            alpha: f(&join(prefix, "alpha"), &self.alpha),
            gamma: f(&join(prefix, "gamma"), &self.gamma),
            beta: f(&join(prefix, "beta"), &self.beta),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "alpha"), &mut self.alpha);
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

impl Dyt<Var> {
    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> crate::Result<Var> {
        g.dyt(x, self.alpha, self.gamma, self.beta)
    }
}

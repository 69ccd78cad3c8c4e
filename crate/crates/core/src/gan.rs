//! Residual 1-D convolutional generator and critic, and the adversarial
//! objectives: Wasserstein critic loss with gradient penalty, and the
//! generator's adversarial cost.
//!
//! Sequence batches are example-major `(m·T)×C` matrices: row `b·T + t`
//! holds time step `t` of example `b`. A width-`k` convolution shifts rows
//! within each example block, concatenates the `k` shifted copies along the
//! columns and applies one matrix product.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autoencoder::check_layout;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{glorot_limit, uniform, Bound, ParamSet};
use crate::seq::ProbSequence;
use crate::tensor::{Scalar, Tensor};

/// Shape shared by the generator and the critic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvNetShape {
    pub seq_len: usize,
    pub vocab_size: usize,
    pub channels: usize,
    pub res_blocks: usize,
    pub kernel_size: usize,
    pub residual_scale: f64,
}

impl ConvNetShape {
    fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.vocab_size == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument(
                "sequence length, vocabulary and channels must be positive".into(),
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

fn conv1d<S: Scalar>(g: &mut Graph<S>, x: Var, w: Var, b: Var, kernel: usize, seq_len: usize) -> Var {
    let cols = if kernel == 1 {
        x
    } else {
        let half = (kernel / 2) as isize;
        let parts: Vec<Var> = (-half..=half).map(|s| g.shift_rows(x, s, seq_len)).collect();
        g.concat_cols(&parts)
    };
    let y = g.matmul(cols, w);
    g.add_row(y, b)
}

fn residual_stack<S: Scalar>(g: &mut Graph<S>, p: &Bound, prefix: &str, mut x: Var, shape: &ConvNetShape) -> Var {
    let scale = S::of(shape.residual_scale);
    for i in 0..shape.res_blocks {
        let name = |part: &str| format!("{prefix}.block{i}.{part}");
        let h = g.relu(x);
        let h = conv1d(g, h, p.var(&name("conv1_w")), p.var(&name("conv1_b")), shape.kernel_size, shape.seq_len);
        let h = g.relu(h);
        let h = conv1d(g, h, p.var(&name("conv2_w")), p.var(&name("conv2_b")), shape.kernel_size, shape.seq_len);
        let h = g.scale(h, scale);
        x = g.add(x, h);
    }
    x
}

fn insert_blocks<S: Scalar, R: Rng + ?Sized>(params: &mut ParamSet<S>, prefix: &str, shape: &ConvNetShape, rng: &mut R) {
    let (c, k) = (shape.channels, shape.kernel_size);
    for i in 0..shape.res_blocks {
        for conv in ["conv1", "conv2"] {
            params.insert(
                format!("{prefix}.block{i}.{conv}_w"),
                uniform(rng, k * c, c, glorot_limit(k * c, k * c)),
            );
            params.insert(format!("{prefix}.block{i}.{conv}_b"), Tensor::zeros(1, c));
        }
    }
}

/// `G(z)`: linear projection to `T×C`, residual blocks, width-1 convolution
/// to `V` and a per-step softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<S> {
    pub params: ParamSet<S>,
    shape: ConvNetShape,
    noise_dim: usize,
}

impl<S: Scalar> Generator<S> {
    pub fn new<R: Rng + ?Sized>(shape: ConvNetShape, noise_dim: usize, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        if noise_dim == 0 {
            return Err(Error::InvalidArgument("noise dimension must be positive".into()));
        }
        let (t, c, v) = (shape.seq_len, shape.channels, shape.vocab_size);
        let mut params = ParamSet::new();
        params.insert("gen.proj_w", uniform(rng, noise_dim, t * c, glorot_limit(noise_dim, t * c)));
        params.insert("gen.proj_b", Tensor::zeros(1, t * c));
        insert_blocks(&mut params, "gen", &shape, rng);
        params.insert("gen.out_w", uniform(rng, c, v, glorot_limit(c, v)));
        params.insert("gen.out_b", Tensor::zeros(1, v));
        Ok(Generator {
            params,
            shape,
            noise_dim,
        })
    }

    pub fn from_params(params: ParamSet<S>, shape: ConvNetShape, noise_dim: usize) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = Self::new(shape, noise_dim, &mut rng)?;
        check_layout(&template.params, &params)?;
        Ok(Generator { params, ..template })
    }

    pub fn shape(&self) -> &ConvNetShape {
        &self.shape
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// `m×Z` noise in, `(m·T)×V` softmax rows out.
    pub fn forward_graph(&self, g: &mut Graph<S>, p: &Bound, z: Var) -> Var {
        let m = g.shape(z).0;
        let s = &self.shape;
        let h = g.matmul(z, p.var("gen.proj_w"));
        let h = g.add_row(h, p.var("gen.proj_b"));
        let h = g.reshape(h, m * s.seq_len, s.channels);
        let h = residual_stack(g, p, "gen", h, s);
        let logits = conv1d(g, h, p.var("gen.out_w"), p.var("gen.out_b"), 1, s.seq_len);
        g.softmax(logits)
    }

    pub fn generate_batch(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        if z.cols() != self.noise_dim || z.rows() == 0 {
            return Err(Error::Shape(format!(
                "noise must be m×{}, got {:?}",
                self.noise_dim,
                z.shape()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let zv = g.leaf(z.clone());
        let y = self.forward_graph(&mut g, &p, zv);
        Ok(g.value(y).clone())
    }

    pub fn generate(&self, z: &NoiseVector<S>) -> Result<ProbSequence<S>> {
        let m = self.generate_batch(&Tensor::from_vec(1, z.0.len(), z.0.clone()))?;
        Ok(ProbSequence::new_unchecked(m))
    }
}

/// `f_w`: width-1 convolution from `V` to `C`, residual blocks, flatten and a
/// linear head to one unbounded score per example.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic<S> {
    pub params: ParamSet<S>,
    shape: ConvNetShape,
}

impl<S: Scalar> Critic<S> {
    pub fn new<R: Rng + ?Sized>(shape: ConvNetShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let (t, c, v) = (shape.seq_len, shape.channels, shape.vocab_size);
        let mut params = ParamSet::new();
        params.insert("critic.in_w", uniform(rng, v, c, glorot_limit(v, c)));
        params.insert("critic.in_b", Tensor::zeros(1, c));
        insert_blocks(&mut params, "critic", &shape, rng);
        params.insert("critic.out_w", uniform(rng, t * c, 1, glorot_limit(t * c, 1)));
        params.insert("critic.out_b", Tensor::zeros(1, 1));
        Ok(Critic { params, shape })
    }

    pub fn from_params(params: ParamSet<S>, shape: ConvNetShape) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = Self::new(shape, &mut rng)?;
        check_layout(&template.params, &params)?;
        Ok(Critic { params, ..template })
    }

    pub fn shape(&self) -> &ConvNetShape {
        &self.shape
    }

    /// Zero the final linear head, making every score 0.
    pub fn zero_head(&mut self) {
        for name in ["critic.out_w", "critic.out_b"] {
            let t = self.params.get_mut(name).expect("head exists");
            t.data_mut().iter_mut().for_each(|x| *x = S::zero());
        }
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<S>) -> BoundCritic<'a, S> {
        BoundCritic {
            critic: self,
            params: self.params.bind(g),
        }
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let s = &self.shape;
        if x.cols() != s.vocab_size || x.rows() == 0 || !x.rows().is_multiple_of(s.seq_len) {
            return Err(Error::Shape(format!(
                "critic expects (m·{})×{} input, got {:?}",
                s.seq_len,
                s.vocab_size,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn score_batch(&self, x: &Tensor<S>) -> Result<Vec<S>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let f = self.bind(&mut g);
        let xv = g.leaf(x.clone());
        let s = f.scores(&mut g, xv);
        Ok(g.value(s).data().to_vec())
    }

    pub fn score(&self, x: &ProbSequence<S>) -> Result<S> {
        Ok(self.score_batch(x.matrix())?[0])
    }

    /// `∂f/∂x` for every entry of one input sequence.
    pub fn input_gradient(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let f = self.bind(&mut g);
        let xv = g.leaf(x.clone());
        let s = f.scores(&mut g, xv);
        let total = g.sum_all(s);
        let dx = g.grad(total, &[xv])[0];
        Ok(g.value(dx).clone())
    }
}

/// Anything that maps an example-major `(m·T)×V` batch to `m×1` scores.
pub trait ScoreFn<S: Scalar> {
    fn seq_len(&self) -> usize;
    fn scores(&self, g: &mut Graph<S>, x: Var) -> Var;
}

/// A [`Critic`] whose parameters have been placed in a graph.
pub struct BoundCritic<'a, S> {
    critic: &'a Critic<S>,
    pub params: Bound,
}

impl<S: Scalar> ScoreFn<S> for BoundCritic<'_, S> {
    fn seq_len(&self) -> usize {
        self.critic.shape.seq_len
    }

    fn scores(&self, g: &mut Graph<S>, x: Var) -> Var {
        let s = &self.critic.shape;
        let p = &self.params;
        let m = g.shape(x).0 / s.seq_len;
        let h = conv1d(g, x, p.var("critic.in_w"), p.var("critic.in_b"), 1, s.seq_len);
        let h = residual_stack(g, p, "critic", h, s);
        let flat = g.reshape(h, m, s.seq_len * s.channels);
        let out = g.matmul(flat, p.var("critic.out_w"));
        g.add_row(out, p.var("critic.out_b"))
    }
}

/// A single noise draw `z ∈ ℝᶻ`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector<S>(pub Vec<S>);

/// `m×Z` matrix of independent standard normal draws.
pub fn sample_noise<S: Scalar, R: Rng + ?Sized>(rng: &mut R, m: usize, noise_dim: usize) -> Tensor<S> {
    Tensor::from_fn(m, noise_dim, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        S::of(x)
    })
}

/// `α·x_real + (1−α)·x_gen` elementwise.
pub fn interpolate<S: Scalar>(real: &Tensor<S>, gen: &Tensor<S>, alpha: S) -> Result<Tensor<S>> {
    if real.shape() != gen.shape() {
        return Err(Error::Shape(format!(
            "cannot interpolate {:?} with {:?}",
            real.shape(),
            gen.shape()
        )));
    }
    if !(alpha >= S::zero() && alpha <= S::one()) {
        return Err(Error::Range(format!("interpolation weight {alpha} is outside [0, 1]")));
    }
    Ok(real.zip_map(gen, |r, g| alpha * r + (S::one() - alpha) * g))
}

/// Per-example interpolation of two example-major batches, one weight per example.
pub fn interpolate_batch<S: Scalar>(
    real: &Tensor<S>,
    gen: &Tensor<S>,
    alphas: &[S],
    seq_len: usize,
) -> Result<Tensor<S>> {
    if real.shape() != gen.shape() || real.rows() != alphas.len() * seq_len {
        return Err(Error::Shape(format!(
            "interpolation of {:?} and {:?} with {} weights at T={seq_len}",
            real.shape(),
            gen.shape(),
            alphas.len()
        )));
    }
    let block = seq_len * real.cols();
    let mut out = Vec::with_capacity(real.len());
    for (b, &a) in alphas.iter().enumerate() {
        if !(a >= S::zero() && a <= S::one()) {
            return Err(Error::Range(format!("interpolation weight {a} is outside [0, 1]")));
        }
        let r = &real.data()[b * block..(b + 1) * block];
        let g = &gen.data()[b * block..(b + 1) * block];
        out.extend(r.iter().zip(g).map(|(&r, &g)| a * r + (S::one() - a) * g));
    }
    Ok(Tensor::from_vec(real.rows(), real.cols(), out))
}

/// `λ·mean_b (‖∇ₓ f(x̂_b)‖₂ − 1)²`, with each example's `T×V` input treated
/// as one flattened vector. The result stays differentiable with respect to
/// the critic's parameters.
pub fn gradient_penalty_graph<S: Scalar>(
    g: &mut Graph<S>,
    f: &impl ScoreFn<S>,
    x_hat: Var,
    lambda: S,
) -> Var {
    let (rows, v) = g.shape(x_hat);
    let t = f.seq_len();
    let m = rows / t;
    let scores = f.scores(g, x_hat);
    let total = g.sum_all(scores);
    let dx = g.grad(total, &[x_hat])[0];
    let flat = g.reshape(dx, m, t * v);
    let sq = g.square(flat);
    let norm2 = g.sum_cols(sq);
    let norm = g.sqrt(norm2);
    let dev = g.add_scalar(norm, -S::one());
    let dev2 = g.square(dev);
    let mean = g.mean_all(dev2);
    g.scale(mean, lambda)
}

/// The three terms of the critic objective, as graph nodes.
pub struct CriticLossTerms {
    pub total: Var,
    pub real_mean: Var,
    pub gen_mean: Var,
    pub penalty: Var,
}

/// `−mean f(real) + mean f(gen) + λ·GP(x̂)`.
pub fn critic_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    f: &impl ScoreFn<S>,
    real: Var,
    gen: Var,
    x_hat: Var,
    lambda: S,
) -> CriticLossTerms {
    let sr = f.scores(g, real);
    let real_mean = g.mean_all(sr);
    let sg = f.scores(g, gen);
    let gen_mean = g.mean_all(sg);
    let penalty = gradient_penalty_graph(g, f, x_hat, lambda);
    let d = g.sub(gen_mean, real_mean);
    let total = g.add(d, penalty);
    CriticLossTerms {
        total,
        real_mean,
        gen_mean,
        penalty,
    }
}

fn check_batch_pair<S: Scalar>(real: &Tensor<S>, gen: &Tensor<S>, seq_len: usize) -> Result<usize> {
    if real.shape() != gen.shape() || real.rows() == 0 || !real.rows().is_multiple_of(seq_len) {
        return Err(Error::Shape(format!(
            "real {:?} and generated {:?} batches must match and hold whole sequences of T={seq_len}",
            real.shape(),
            gen.shape()
        )));
    }
    Ok(real.rows() / seq_len)
}

/// Gradient penalty of the score function built by `bind`, evaluated at `x_hat`.
pub fn gradient_penalty<S: Scalar, F: ScoreFn<S>>(
    bind: &dyn Fn(&mut Graph<S>) -> F,
    x_hat: &Tensor<S>,
    lambda: S,
) -> Result<S> {
    let mut g = Graph::new();
    let f = bind(&mut g);
    if x_hat.rows() == 0 || !x_hat.rows().is_multiple_of(f.seq_len()) {
        return Err(Error::Shape(format!("input {:?} is not whole sequences", x_hat.shape())));
    }
    let x = g.leaf(x_hat.clone());
    let gp = gradient_penalty_graph(&mut g, &f, x, lambda);
    let v = g.value(gp).item();
    if !v.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            term: "gradient penalty",
            value: v.as_f64(),
        });
    }
    Ok(v)
}

impl<S: Scalar, F: ScoreFn<S> + ?Sized> ScoreFn<S> for &F {
    fn seq_len(&self) -> usize {
        (**self).seq_len()
    }

    fn scores(&self, g: &mut Graph<S>, x: Var) -> Var {
        (**self).scores(g, x)
    }
}

impl<S: Scalar> Critic<S> {
    /// Critic objective and its gradients (in parameter order).
    pub fn loss_and_grads(
        &self,
        real: &Tensor<S>,
        gen: &Tensor<S>,
        alphas: &[S],
        lambda: S,
    ) -> Result<(S, Vec<Tensor<S>>)> {
        self.check_input(real)?;
        check_batch_pair(real, gen, self.shape.seq_len)?;
        let x_hat = interpolate_batch(real, gen, alphas, self.shape.seq_len)?;
        let mut g = Graph::new();
        let f = self.bind(&mut g);
        let rv = g.leaf(real.clone());
        let gv = g.leaf(gen.clone());
        let hv = g.leaf(x_hat);
        let terms = critic_loss_graph(&mut g, &f, rv, gv, hv, lambda);
        let grads = g.grad(terms.total, f.params.vars());
        Ok((
            g.value(terms.total).item(),
            grads.into_iter().map(|v| g.value(v).clone()).collect(),
        ))
    }

    pub fn loss(&self, real: &Tensor<S>, gen: &Tensor<S>, alphas: &[S], lambda: S) -> Result<S> {
        self.check_input(real)?;
        check_batch_pair(real, gen, self.shape.seq_len)?;
        let x_hat = interpolate_batch(real, gen, alphas, self.shape.seq_len)?;
        critic_loss(&|g: &mut Graph<S>| self.bind(g), real, gen, &x_hat, lambda)
    }

    /// One Adam step on the critic objective. Returns the pre-update loss.
    pub fn train_step(
        &mut self,
        real: &Tensor<S>,
        gen: &Tensor<S>,
        alphas: &[S],
        lambda: S,
        opt: &mut Adam<S>,
        iteration: u64,
    ) -> Result<S> {
        let (loss, grads) = self.loss_and_grads(real, gen, alphas, lambda)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration,
                term: "L_D",
                value: loss.as_f64(),
            });
        }
        opt.update(&mut self.params, &grads);
        Ok(loss)
    }
}

/// Critic objective for any score function built by `bind`.
pub fn critic_loss<S: Scalar, F: ScoreFn<S>>(
    bind: &dyn Fn(&mut Graph<S>) -> F,
    real: &Tensor<S>,
    gen: &Tensor<S>,
    x_hat: &Tensor<S>,
    lambda: S,
) -> Result<S> {
    let mut g = Graph::new();
    let f = bind(&mut g);
    check_batch_pair(real, gen, f.seq_len())?;
    let rv = g.leaf(real.clone());
    let gv = g.leaf(gen.clone());
    let hv = g.leaf(x_hat.clone());
    let terms = critic_loss_graph(&mut g, &f, rv, gv, hv, lambda);
    Ok(g.value(terms.total).item())
}

/// `−mean f(gen)` for a batch of generated sequences.
pub fn generator_loss<S: Scalar, F: ScoreFn<S>>(bind: &dyn Fn(&mut Graph<S>) -> F, gen: &Tensor<S>) -> Result<S> {
    let mut g = Graph::new();
    let f = bind(&mut g);
    if gen.rows() == 0 || !gen.rows().is_multiple_of(f.seq_len()) {
        return Err(Error::Shape(format!("generated batch {:?} is not whole sequences", gen.shape())));
    }
    let x = g.leaf(gen.clone());
    let s = f.scores(&mut g, x);
    let m = g.mean_all(s);
    Ok(-g.value(m).item())
}

impl<S: Scalar> Generator<S> {
    /// `L_Gen = −mean f_w(G(z))` and its gradients with respect to θ only.
    pub fn loss_and_grads(&self, critic: &Critic<S>, z: &Tensor<S>) -> Result<(S, Vec<Tensor<S>>)> {
        if z.cols() != self.noise_dim || z.rows() == 0 {
            return Err(Error::Shape(format!("noise must be m×{}, got {:?}", self.noise_dim, z.shape())));
        }
        if critic.shape.seq_len != self.shape.seq_len || critic.shape.vocab_size != self.shape.vocab_size {
            return Err(Error::Shape("generator and critic disagree on T or V".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let f = critic.bind(&mut g);
        let zv = g.leaf(z.clone());
        let x = self.forward_graph(&mut g, &p, zv);
        let s = f.scores(&mut g, x);
        let mean = g.mean_all(s);
        let loss = g.neg(mean);
        let grads = g.grad(loss, p.vars());
        Ok((
            g.value(loss).item(),
            grads.into_iter().map(|v| g.value(v).clone()).collect(),
        ))
    }

    /// One Adam step on θ; the critic is read but never modified.
    pub fn train_step(&mut self, critic: &Critic<S>, z: &Tensor<S>, opt: &mut Adam<S>, iteration: u64) -> Result<S> {
        let (loss, grads) = self.loss_and_grads(critic, z)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration,
                term: "L_G",
                value: loss.as_f64(),
            });
        }
        opt.update(&mut self.params, &grads);
        Ok(loss)
    }
}

/// Test and diagnostic critic: `f(x) = u · vec(x) + c` per example.
#[derive(Clone, Debug)]
pub struct LinearCritic<S> {
    pub seq_len: usize,
    pub weights: Tensor<S>,
    pub bias: S,
}

impl<S: Scalar> LinearCritic<S> {
    /// `f(x) = Σ x` over each example's entries.
    pub fn sum(seq_len: usize, vocab_size: usize) -> Self {
        LinearCritic {
            seq_len,
            weights: Tensor::filled(seq_len * vocab_size, 1, S::one()),
            bias: S::zero(),
        }
    }
}

impl<S: Scalar> ScoreFn<S> for LinearCritic<S> {
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn scores(&self, g: &mut Graph<S>, x: Var) -> Var {
        let (rows, v) = g.shape(x);
        let m = rows / self.seq_len;
        let flat = g.reshape(x, m, self.seq_len * v);
        let w = g.leaf(self.weights.clone());
        let s = g.matmul(flat, w);
        g.add_scalar(s, self.bias)
    }
}

//! The teacher: a single-layer LSTM sequence autoencoder whose per-step
//! softmax reconstruction stands in for one-hot real text.
//!
//! The encoder's final hidden state is the code `c`. The decoder runs free
//! for `T` steps; each step sees the previous greedy token (re-embedded as a
//! one-hot row, with the pad symbol as the start token) together with `c`.
//! The greedy feedback is a constant in the graph, so gradients reach the
//! parameters only through the softmax head and the recurrent state.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::corpus::OneHotSequence;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{uniform, Bound, ParamSet};
use crate::seq::ProbSequence;
use crate::tensor::{Scalar, Tensor};

/// Initial weights are drawn from `[-INIT_RANGE, INIT_RANGE]`.
pub const INIT_RANGE: f64 = 0.08;

/// The encoder's summary of a sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Code<S> {
    pub vector: Vec<S>,
}

impl<S: Scalar> Code<S> {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<S> {
    pub params: ParamSet<S>,
    vocab_size: usize,
    hidden: usize,
    start_id: usize,
    teacher_forcing: bool,
}

const ENC: [&str; 3] = ["enc.w_x", "enc.w_h", "enc.b"];
const DEC: [&str; 6] = [
    "dec.w_x", "dec.w_c", "dec.w_h", "dec.b", "dec.w_out", "dec.b_out",
];

impl<S: Scalar> Autoencoder<S> {
    /// Uniform weights in `[-0.08, 0.08]`, zero biases except the forget
    /// gate, which starts at 1.
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, hidden: usize, start_id: usize, rng: &mut R) -> Self {
        let (v, h) = (vocab_size, hidden);
        let mut params = ParamSet::new();
        params.insert(ENC[0], uniform(rng, v, 4 * h, INIT_RANGE));
        params.insert(ENC[1], uniform(rng, h, 4 * h, INIT_RANGE));
        params.insert(ENC[2], gate_bias(h));
        params.insert(DEC[0], uniform(rng, v, 4 * h, INIT_RANGE));
        params.insert(DEC[1], uniform(rng, h, 4 * h, INIT_RANGE));
        params.insert(DEC[2], uniform(rng, h, 4 * h, INIT_RANGE));
        params.insert(DEC[3], gate_bias(h));
        params.insert(DEC[4], uniform(rng, h, v, INIT_RANGE));
        params.insert(DEC[5], Tensor::zeros(1, v));
        Autoencoder {
            params,
            vocab_size,
            hidden,
            start_id,
            teacher_forcing: false,
        }
    }

    /// Same shapes as [`Autoencoder::new`], every entry zero.
    pub fn zeroed(vocab_size: usize, hidden: usize, start_id: usize) -> Self {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut ae = Self::new(vocab_size, hidden, start_id, &mut rng);
        for t in ae.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = S::zero());
        }
        ae
    }

    pub fn from_params(
        params: ParamSet<S>,
        vocab_size: usize,
        hidden: usize,
        start_id: usize,
    ) -> Result<Self> {
        let template = Self::zeroed(vocab_size, hidden, start_id);
        check_layout(&template.params, &params)?;
        Ok(Autoencoder {
            params,
            ..template
        })
    }

    /// Feed the true previous character instead of the greedy one while
    /// computing the training loss.
    pub fn set_teacher_forcing(&mut self, on: bool) {
        self.teacher_forcing = on;
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn start_id(&self) -> usize {
        self.start_id
    }

    fn lstm_step(&self, g: &mut Graph<S>, gates: Var, cell: Var) -> (Var, Var) {
        let h = self.hidden;
        let i = g.slice_cols(gates, 0, h);
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, h, h);
        let f = g.sigmoid(f);
        let u = g.slice_cols(gates, 2 * h, h);
        let u = g.tanh(u);
        let o = g.slice_cols(gates, 3 * h, h);
        let o = g.sigmoid(o);
        let keep = g.mul(f, cell);
        let write = g.mul(i, u);
        let cell = g.add(keep, write);
        let squashed = g.tanh(cell);
        (g.mul(o, squashed), cell)
    }

    /// Encoder over an example-major `(m·T)×V` input; returns the `m×H` codes.
    pub fn encode_graph(&self, g: &mut Graph<S>, p: &Bound, x: &Tensor<S>, seq_len: usize) -> Var {
        let m = x.rows() / seq_len;
        let x_tm = g.leaf(time_major(x, m, seq_len));
        let xw = g.matmul(x_tm, p.var(ENC[0]));
        let mut h = g.leaf(Tensor::zeros(m, self.hidden));
        let mut c = g.leaf(Tensor::zeros(m, self.hidden));
        for t in 0..seq_len {
            let xt = g.slice_rows(xw, t * m, m);
            let hw = g.matmul(h, p.var(ENC[1]));
            let z = g.add(xt, hw);
            let z = g.add_row(z, p.var(ENC[2]));
            (h, c) = self.lstm_step(g, z, c);
        }
        h
    }

    /// Free-running decoder. Returns one `m×V` softmax node per step.
    /// `targets` (example-major one-hot) is only consulted under teacher forcing.
    pub fn decode_graph(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        code: Var,
        seq_len: usize,
        targets: Option<&Tensor<S>>,
    ) -> Vec<Var> {
        let m = g.shape(code).0;
        let v = self.vocab_size;
        let cw = g.matmul(code, p.var(DEC[1]));
        let cw = g.add_row(cw, p.var(DEC[3]));
        let mut h = g.leaf(Tensor::zeros(m, self.hidden));
        let mut c = g.leaf(Tensor::zeros(m, self.hidden));
        let mut prev = vec![self.start_id; m];
        let mut outputs = Vec::with_capacity(seq_len);
        for t in 0..seq_len {
            let mut onehot = Tensor::zeros(m, v);
            for (b, &id) in prev.iter().enumerate() {
                onehot.set(b, id, S::one());
            }
            let inp = g.leaf(onehot);
            let xw = g.matmul(inp, p.var(DEC[0]));
            let hw = g.matmul(h, p.var(DEC[2]));
            let z = g.add(xw, hw);
            let z = g.add(z, cw);
            (h, c) = self.lstm_step(g, z, c);
            let logits = g.matmul(h, p.var(DEC[4]));
            let logits = g.add_row(logits, p.var(DEC[5]));
            let y = g.softmax(logits);
            outputs.push(y);
            prev = match (self.teacher_forcing, targets) {
                (true, Some(x)) => (0..m)
                    .map(|b| x.row(b * seq_len + t).iter().position(|&e| e > S::zero()).unwrap_or(0))
                    .collect(),
                _ => {
                    let ids = g.value(y).argmax_rows();
                    for &id in &ids {
                        g.record_decision(id as u64);
                    }
                    ids
                }
            };
        }
        outputs
    }

    /// `L_AE` node: squared error summed over `T·V`, averaged over the batch.
    pub fn loss_graph(&self, g: &mut Graph<S>, p: &Bound, x: &Tensor<S>, seq_len: usize) -> Var {
        let m = x.rows() / seq_len;
        let code = self.encode_graph(g, p, x, seq_len);
        let outputs = self.decode_graph(g, p, code, seq_len, Some(x));
        let x_tm = time_major(x, m, seq_len);
        let mut total: Option<Var> = None;
        for (t, y) in outputs.into_iter().enumerate() {
            let target = Tensor::from_vec(
                m,
                self.vocab_size,
                x_tm.data()[t * m * self.vocab_size..(t + 1) * m * self.vocab_size].to_vec(),
            );
            let target = g.leaf(target);
            let d = g.sub(y, target);
            let sq = g.square(d);
            let s = g.sum_all(sq);
            total = Some(match total {
                Some(acc) => g.add(acc, s),
                None => s,
            });
        }
        let total = total.expect("seq_len ≥ 1");
        g.scale(total, S::one() / S::of(m as f64))
    }

    fn check_batch(&self, x: &Tensor<S>, seq_len: usize) -> Result<()> {
        if seq_len == 0 || x.rows() == 0 || !x.rows().is_multiple_of(seq_len) || x.cols() != self.vocab_size {
            return Err(Error::Shape(format!(
                "autoencoder expects (m·{seq_len})×{} input, got {:?}",
                self.vocab_size,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &OneHotSequence) -> Result<Code<S>> {
        let m = x.to_matrix::<S>();
        let codes = self.encode_batch(&m, x.seq_len())?;
        Ok(Code {
            vector: codes.row(0).to_vec(),
        })
    }

    pub fn encode_batch(&self, x: &Tensor<S>, seq_len: usize) -> Result<Tensor<S>> {
        self.check_batch(x, seq_len)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let h = self.encode_graph(&mut g, &p, x, seq_len);
        Ok(g.value(h).clone())
    }

    pub fn decode(&self, code: &Code<S>, seq_len: usize) -> Result<ProbSequence<S>> {
        if code.dim() != self.hidden {
            return Err(Error::Shape(format!(
                "code has dimension {}, expected {}",
                code.dim(),
                self.hidden
            )));
        }
        if !code.is_finite() {
            return Err(Error::Range("code has non-finite entries".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let c = g.leaf(Tensor::from_vec(1, self.hidden, code.vector.clone()));
        let ys = self.decode_graph(&mut g, &p, c, seq_len, None);
        let mut out = Tensor::zeros(seq_len, self.vocab_size);
        for (t, y) in ys.into_iter().enumerate() {
            out.row_mut(t).copy_from_slice(g.value(y).row(0));
        }
        Ok(ProbSequence::new_unchecked(out))
    }

    /// Softened reconstruction `softmax(dec(enc(x)))` of an example-major batch.
    pub fn reconstruct(&self, x: &Tensor<S>, seq_len: usize) -> Result<Tensor<S>> {
        self.check_batch(x, seq_len)?;
        let m = x.rows() / seq_len;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let code = self.encode_graph(&mut g, &p, x, seq_len);
        let ys = self.decode_graph(&mut g, &p, code, seq_len, None);
        let mut out = Tensor::zeros(m * seq_len, self.vocab_size);
        for (t, y) in ys.into_iter().enumerate() {
            let yv = g.value(y);
            for b in 0..m {
                out.row_mut(b * seq_len + t).copy_from_slice(yv.row(b));
            }
        }
        Ok(out)
    }

    /// Loss and gradients (in parameter order) for one batch.
    pub fn loss_and_grads(&self, x: &Tensor<S>, seq_len: usize) -> Result<(S, Vec<Tensor<S>>)> {
        self.check_batch(x, seq_len)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let loss = self.loss_graph(&mut g, &p, x, seq_len);
        let grads = g.grad(loss, p.vars());
        Ok((
            g.value(loss).item(),
            grads.into_iter().map(|v| g.value(v).clone()).collect(),
        ))
    }

    /// One Adam step on `L_AE`. Returns the pre-update loss. A non-finite loss
    /// or gradient leaves the parameters untouched and reports divergence.
    pub fn train_step(
        &mut self,
        x: &Tensor<S>,
        seq_len: usize,
        opt: &mut Adam<S>,
        iteration: u64,
    ) -> Result<S> {
        let (loss, grads) = self.loss_and_grads(x, seq_len)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration,
                term: "L_AE",
                value: loss.as_f64(),
            });
        }
        opt.update(&mut self.params, &grads);
        Ok(loss)
    }
}

fn gate_bias<S: Scalar>(hidden: usize) -> Tensor<S> {
    Tensor::from_fn(1, 4 * hidden, |_, j| {
        if (hidden..2 * hidden).contains(&j) {
            S::one()
        } else {
            S::zero()
        }
    })
}

pub(crate) fn check_layout<S: Scalar>(want: &ParamSet<S>, got: &ParamSet<S>) -> Result<()> {
    if want.len() != got.len() {
        return Err(Error::Shape(format!(
            "expected {} parameter tensors, got {}",
            want.len(),
            got.len()
        )));
    }
    for ((wn, wt), (gn, gt)) in want.iter().zip(got.iter()) {
        if wn != gn || wt.shape() != gt.shape() {
            return Err(Error::Shape(format!(
                "parameter mismatch: expected {wn} {:?}, got {gn} {:?}",
                wt.shape(),
                gt.shape()
            )));
        }
    }
    Ok(())
}

/// Reorders an example-major `(m·T)×V` matrix to time-major `(T·m)×V`.
pub fn time_major<S: Scalar>(x: &Tensor<S>, m: usize, seq_len: usize) -> Tensor<S> {
    let v = x.cols();
    let mut out = Tensor::zeros(m * seq_len, v);
    for b in 0..m {
        for t in 0..seq_len {
            out.row_mut(t * m + b).copy_from_slice(x.row(b * seq_len + t));
        }
    }
    out
}

/// `‖x − x̃‖²` summed over all entries and averaged over the `m` examples of
/// an example-major batch.
pub fn reconstruction_loss<S: Scalar>(x: &Tensor<S>, recon: &Tensor<S>, seq_len: usize) -> Result<S> {
    if x.shape() != recon.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} does not match input {:?}",
            recon.shape(),
            x.shape()
        )));
    }
    if seq_len == 0 || !x.rows().is_multiple_of(seq_len) {
        return Err(Error::Shape(format!("{} rows is not a multiple of T={seq_len}", x.rows())));
    }
    let m = (x.rows() / seq_len).max(1);
    let total: S = x
        .data()
        .iter()
        .zip(recon.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(total / S::of(m as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{one_hot, EncodedSentence};
    use crate::optim::AdamConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(ids: &[usize], v: usize) -> OneHotSequence {
        one_hot(&EncodedSentence { ids: ids.to_vec() }, v).unwrap()
    }

    #[test]
    fn code_has_hidden_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ae = Autoencoder::<f32>::new(6, 512, 4, &mut rng);
        let c = ae.encode(&seq(&[0, 1, 2, 3], 6)).unwrap();
        assert_eq!(c.dim(), 512);
        assert!(c.is_finite());
    }

    #[test]
    fn zero_encoder_ignores_input() {
        let ae = Autoencoder::<f64>::zeroed(4, 8, 2);
        let a = ae.encode(&seq(&[0, 1, 3], 4)).unwrap();
        let b = ae.encode(&seq(&[3, 3, 0], 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_encoder_separates_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ae = Autoencoder::<f64>::new(5, 16, 3, &mut rng);
        let mut distinct = 0;
        for _ in 0..100 {
            let a: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
            let mut b = a.clone();
            let k = rng.random_range(0..6);
            b[k] = (b[k] + 1 + rng.random_range(0..4)) % 5;
            if ae.encode(&seq(&a, 5)).unwrap() != ae.encode(&seq(&b, 5)).unwrap() {
                distinct += 1;
            }
        }
        assert_eq!(distinct, 100);
    }

    #[test]
    fn decode_rows_are_distributions_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ae = Autoencoder::<f32>::new(7, 12, 5, &mut rng);
        let code = ae.encode(&seq(&[0, 1, 2], 7)).unwrap();
        let p = ae.decode(&code, 9).unwrap();
        assert_eq!((p.seq_len(), p.vocab_size()), (9, 7));
        crate::seq::check_rows(p.matrix()).unwrap();
        assert_eq!(p, ae.decode(&code, 9).unwrap());
    }

    #[test]
    fn saturated_head_gives_near_one_hot_rows() {
        let mut ae = Autoencoder::<f64>::zeroed(2, 3, 1);
        ae.params
            .replace("dec.b_out", Tensor::from_vec(1, 2, vec![10.0, -10.0]))
            .unwrap();
        let p = ae
            .decode(&Code { vector: vec![0.3, -0.2, 0.1] }, 4)
            .unwrap();
        for t in 0..4 {
            assert!(p.matrix().get(t, 0) > 1.0 - 1e-8);
        }
    }

    #[test]
    fn reconstruction_loss_examples() {
        let x = Tensor::<f64>::from_vec(1, 2, vec![1.0, 0.0]);
        assert_eq!(reconstruction_loss(&x, &x, 1).unwrap(), 0.0);
        let r = Tensor::from_vec(1, 2, vec![0.75, 0.25]);
        assert_eq!(reconstruction_loss(&x, &r, 1).unwrap(), 0.125);
        let bad = Tensor::from_vec(2, 1, vec![0.75, 0.25]);
        assert!(matches!(reconstruction_loss(&x, &bad, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_learning_rate_step_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ae = Autoencoder::<f32>::new(5, 8, 3, &mut rng);
        let before = ae.params.clone();
        let mut opt = Adam::new(AdamConfig::new(0.0, 0.9, 0.9), &ae.params);
        let x = seq(&[0, 1, 2, 3], 5).to_matrix();
        ae.train_step(&x, 4, &mut opt, 0).unwrap();
        assert_eq!(ae.params, before);
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ae = Autoencoder::<f64>::new(5, 6, 3, &mut rng);
        let x = crate::corpus::Batch::new(
            &[
                &EncodedSentence { ids: vec![0, 1, 2] },
                &EncodedSentence { ids: vec![2, 2, 3] },
            ],
            5,
        )
        .unwrap()
        .one_hot_matrix::<f64>();
        let recon = ae.reconstruct(&x, 3).unwrap();
        let direct = reconstruction_loss(&x, &recon, 3).unwrap();
        let (l, _) = ae.loss_and_grads(&x, 3).unwrap();
        assert!((l - direct).abs() < 1e-12);
    }

    #[test]
    fn short_training_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = 6;
        let mut ae = Autoencoder::<f32>::new(v, 32, 4, &mut rng);
        let sentences: Vec<EncodedSentence> = (0..10)
            .map(|i| EncodedSentence {
                ids: (0..8).map(|t| (i + t * (i % 3 + 1)) % 4).collect(),
            })
            .collect();
        let refs: Vec<&EncodedSentence> = sentences.iter().collect();
        let x = crate::corpus::Batch::new(&refs, v).unwrap().one_hot_matrix::<f32>();
        let mut opt = Adam::new(AdamConfig::new(1e-3, 0.9, 0.9), &ae.params);
        let first = ae.train_step(&x, 8, &mut opt, 0).unwrap();
        let mut last = first;
        for i in 1..500 {
            last = ae.train_step(&x, 8, &mut opt, i).unwrap();
        }
        assert!(last < first, "loss did not drop: {first} -> {last}");
    }
}

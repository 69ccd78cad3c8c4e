//! Validation instruments: a finite-difference gradient auditor for the three
//! training objectives, and the two-word separability experiment.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::Autoencoder;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::gan::{critic_loss_graph, interpolate_batch, sample_noise, ConvNetShape, Critic, Generator, ScoreFn};
use crate::optim::{Adam, AdamConfig};
use crate::params::{glorot_limit, uniform, ParamSet};
use crate::tensor::Tensor;

// ------------------------------------------------------------ gradient audit

/// Which objective to audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditTarget {
    Autoencoder,
    Critic,
    Generator,
}

impl AuditTarget {
    pub const ALL: [AuditTarget; 3] = [AuditTarget::Autoencoder, AuditTarget::Critic, AuditTarget::Generator];

    pub fn loss_name(self) -> &'static str {
        match self {
            AuditTarget::Autoencoder => "L_AE",
            AuditTarget::Critic => "L_D",
            AuditTarget::Generator => "L_G",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditConfig {
    pub seq_len: usize,
    pub vocab_size: usize,
    pub hidden: usize,
    pub channels: usize,
    pub noise_dim: usize,
    pub batch_size: usize,
    pub res_blocks: usize,
    pub kernel_size: usize,
    pub lambda: f64,
    pub eps: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub seed: u64,
    /// Multiply the analytic gradient entry of largest magnitude in this
    /// group by `1 + fault_scale`.
    pub fault: Option<(String, f64)>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            seq_len: 4,
            vocab_size: 5,
            hidden: 8,
            channels: 8,
            noise_dim: 8,
            batch_size: 4,
            res_blocks: 2,
            kernel_size: 5,
            lambda: 10.0,
            eps: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-8,
            seed: 0,
            fault: None,
        }
    }
}

/// Audit result for one named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupAudit {
    pub loss: &'static str,
    pub group: String,
    pub checked: usize,
    /// Entries whose finite-difference stencil crossed a ReLU or argmax kink.
    pub skipped: usize,
    /// Largest `|a − n| / max(|a|, |n|, abs_tol / rel_tol)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub groups: Vec<GroupAudit>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| !g.passed).map(|g| g.group.as_str()).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn skipped(&self) -> usize {
        self.groups.iter().map(|g| g.skipped).sum()
    }

    /// One `key=value` line per group, then a summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let _ = writeln!(
                s,
                "{}.{}=status:{} max_rel:{:.3e} max_abs:{:.3e} checked:{} skipped:{}",
                g.loss,
                g.group,
                if g.passed { "pass" } else { "FAIL" },
                g.max_rel_error,
                g.max_abs_error,
                g.checked,
                g.skipped
            );
        }
        let _ = writeln!(s, "max_rel_error={:.3e}", self.max_rel_error());
        let _ = writeln!(s, "skipped_entries={}", self.skipped());
        let _ = writeln!(s, "status={}", if self.passed() { "pass" } else { "fail" });
        s
    }
}

/// Compares `analytic` against central differences of `eval`, which returns
/// the loss and the branch signature of the evaluation.
pub fn audit_params(
    loss: &'static str,
    params: &ParamSet<f64>,
    analytic: &[Tensor<f64>],
    eval: impl Fn(&ParamSet<f64>) -> Result<(f64, u64)>,
    cfg: &AuditConfig,
) -> Result<Vec<GroupAudit>> {
    let (_, base_sig) = eval(params)?;
    let mut probe = params.clone();
    let mut out = Vec::new();
    for (gi, (name, tensor)) in params.iter().enumerate() {
        let mut a = analytic[gi].clone();
        if let Some((target, scale)) = &cfg.fault {
            if target == name {
                let (j, _) = a
                    .data()
                    .iter()
                    .enumerate()
                    .fold((0, 0.0), |best, (j, v)| if v.abs() > best.1 { (j, v.abs()) } else { best });
                a.data_mut()[j] *= 1.0 + scale;
            }
        }
        let mut report = GroupAudit {
            loss,
            group: name.to_owned(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            passed: true,
        };
        for j in 0..tensor.len() {
            let orig = tensor.data()[j];
            let mut at = |x: f64| -> Result<(f64, u64)> {
                probe.get_mut(name).expect("same layout").data_mut()[j] = x;
                eval(&probe)
            };
            let (lp, sp) = at(orig + cfg.eps)?;
            let (lm, sm) = at(orig - cfg.eps)?;
            at(orig)?;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let n = (lp - lm) / (2.0 * cfg.eps);
            let an = a.data()[j];
            let diff = (an - n).abs();
            let scale = an.abs().max(n.abs());
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(diff);
            report.max_rel_error = report
                .max_rel_error
                .max(diff / scale.max(cfg.abs_tol / cfg.rel_tol));
            if diff > cfg.abs_tol + cfg.rel_tol * scale || !diff.is_finite() {
                report.passed = false;
            }
        }
        out.push(report);
    }
    Ok(out)
}

fn random_one_hot(rng: &mut ChaCha8Rng, rows: usize, v: usize) -> Tensor<f64> {
    let ids: Vec<usize> = (0..rows).map(|_| rng.random_range(0..v)).collect();
    Tensor::from_fn(rows, v, |r, c| if ids[r] == c { 1.0 } else { 0.0 })
}

fn random_simplex_rows(rng: &mut ChaCha8Rng, rows: usize, v: usize) -> Tensor<f64> {
    let logits = Tensor::from_fn(rows, v, |_, _| rng.random_range(-2.0..2.0));
    crate::autograd::softmax_rows(&logits)
}

/// Audits the analytic gradients of the chosen objectives on a freshly
/// initialised downsized model in 64-bit arithmetic.
pub fn grad_audit(targets: &[AuditTarget], cfg: &AuditConfig) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (t, v, m) = (cfg.seq_len, cfg.vocab_size, cfg.batch_size);
    let shape = ConvNetShape {
        seq_len: t,
        vocab_size: v,
        channels: cfg.channels,
        res_blocks: cfg.res_blocks,
        kernel_size: cfg.kernel_size,
        residual_scale: 0.3,
    };
    let ae = Autoencoder::<f64>::new(v, cfg.hidden, v - 2, &mut rng);
    let gen = Generator::<f64>::new(shape, cfg.noise_dim, &mut rng)?;
    let critic = Critic::<f64>::new(shape, &mut rng)?;
    let x = random_one_hot(&mut rng, m * t, v);
    let soft_real = random_simplex_rows(&mut rng, m * t, v);
    let z = sample_noise::<f64, _>(&mut rng, m, cfg.noise_dim);
    let alphas: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
    let fake = gen.generate_batch(&z)?;

    let mut groups = Vec::new();
    for &target in targets {
        let loss = target.loss_name();
        let found = match target {
            AuditTarget::Autoencoder => {
                let (_, grads) = ae.loss_and_grads(&x, t)?;
                audit_params(
                    loss,
                    &ae.params,
                    &grads,
                    |p| {
                        let mut g = Graph::new();
                        let b = p.bind(&mut g);
                        let l = ae.loss_graph(&mut g, &b, &x, t);
                        Ok((g.value(l).item(), g.branch_signature()))
                    },
                    cfg,
                )?
            }
            AuditTarget::Critic => {
                let lambda = cfg.lambda;
                let (_, grads) = critic.loss_and_grads(&soft_real, &fake, &alphas, lambda)?;
                let x_hat = interpolate_batch(&soft_real, &fake, &alphas, t)?;
                audit_params(
                    loss,
                    &critic.params,
                    &grads,
                    |p| {
                        let probe = Critic::from_params(p.clone(), shape)?;
                        let mut g = Graph::new();
                        let f = probe.bind(&mut g);
                        let (rv, gv, hv) = (g.leaf(soft_real.clone()), g.leaf(fake.clone()), g.leaf(x_hat.clone()));
                        let terms = critic_loss_graph(&mut g, &f, rv, gv, hv, lambda);
                        Ok((g.value(terms.total).item(), g.branch_signature()))
                    },
                    cfg,
                )?
            }
            AuditTarget::Generator => {
                let (_, grads) = gen.loss_and_grads(&critic, &z)?;
                audit_params(
                    loss,
                    &gen.params,
                    &grads,
                    |p| {
                        let mut g = Graph::new();
                        let b = p.bind(&mut g);
                        let f = critic.bind(&mut g);
                        let zv = g.leaf(z.clone());
                        let xg = gen.forward_graph(&mut g, &b, zv);
                        let s = f.scores(&mut g, xg);
                        let mean = g.mean_all(s);
                        Ok((-g.value(mean).item(), g.branch_signature()))
                    },
                    cfg,
                )?
            }
        };
        groups.extend(found);
    }
    Ok(AuditReport { groups })
}

/// `f(x) = u · vec(x)` with `u` a graph variable, for auditing the critic
/// objective on a function whose gradients are known in closed form.
pub struct LinearScore {
    pub seq_len: usize,
    pub u: Var,
}

impl ScoreFn<f64> for LinearScore {
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn scores(&self, g: &mut Graph<f64>, x: Var) -> Var {
        let (rows, v) = g.shape(x);
        let flat = g.reshape(x, rows / self.seq_len, self.seq_len * v);
        g.matmul(flat, self.u)
    }
}

// ------------------------------------------------------ two-word experiment

/// Class geometry fed to the separability critic. A point of the two-word
/// simplex is `(p, 1 − p)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Geometry {
    /// Real: the two vertices. Generated: uniform on the open segment.
    OneHotVsSegment,
    /// Real: uniform on `[0, r] ∪ [1 − r, 1]`. Generated: uniform on `[0, 1]`.
    SoftenedVsSegment,
    /// Both classes uniform on `[0, 1]`.
    Identical,
}

impl Geometry {
    pub fn as_str(self) -> &'static str {
        match self {
            Geometry::OneHotVsSegment => "one_hot_vs_segment",
            Geometry::SoftenedVsSegment => "softened_vs_segment",
            Geometry::Identical => "identical",
        }
    }

    fn sample_real(self, rng: &mut ChaCha8Rng, radius: f64) -> f64 {
        match self {
            Geometry::OneHotVsSegment => f64::from(u8::from(rng.random::<bool>())),
            Geometry::SoftenedVsSegment => {
                let d = rng.random::<f64>() * radius;
                if rng.random::<bool>() {
                    d
                } else {
                    1.0 - d
                }
            }
            Geometry::Identical => rng.random::<f64>(),
        }
    }

    /// Densities `(real, generated)` at `p` (point masses count as infinite).
    fn densities(self, p: f64, radius: f64) -> (f64, f64) {
        let seg = if (0.0..=1.0).contains(&p) { 1.0 } else { 0.0 };
        match self {
            Geometry::OneHotVsSegment => (if p == 0.0 || p == 1.0 { f64::INFINITY } else { 0.0 }, seg),
            Geometry::SoftenedVsSegment => {
                let inside = p <= radius || p >= 1.0 - radius;
                (if inside && seg > 0.0 { 0.5 / radius } else { 0.0 }, seg)
            }
            Geometry::Identical => (seg, seg),
        }
    }
}

/// Best achievable accuracy with equal class priors, by midpoint integration
/// of `max(p_real, p_gen) / 2` over `[0, 1]` on `cells` cells.
pub fn bayes_accuracy(geometry: Geometry, radius: f64, cells: usize) -> f64 {
    if geometry == Geometry::OneHotVsSegment {
        // Vertices carry all real mass and none of the generated mass.
        return 1.0;
    }
    let h = 1.0 / cells as f64;
    (0..cells)
        .map(|i| {
            let (a, b) = geometry.densities((i as f64 + 0.5) * h, radius);
            0.5 * a.max(b) * h
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoWordConfig {
    /// Width of each softened neighbourhood along the segment.
    pub radius: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TwoWordConfig {
    fn default() -> Self {
        TwoWordConfig {
            radius: 0.2,
            train_per_class: 4000,
            test_per_class: 4000,
            hidden: 32,
            steps: 3000,
            batch_size: 256,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparabilityReport {
    pub geometry: Geometry,
    /// Held-out accuracy, real and generated classes equally weighted.
    pub accuracy: f64,
    pub bayes_accuracy: f64,
    pub iterations: usize,
    pub mean_score_real: f64,
    pub mean_score_generated: f64,
}

impl SeparabilityReport {
    pub fn margin(&self) -> f64 {
        self.mean_score_real - self.mean_score_generated
    }

    pub fn to_text(&self) -> String {
        format!(
            "mode={}\naccuracy={:.4}\nbayes_accuracy={:.4}\niterations={}\nmean_score_real={:.4}\nmean_score_generated={:.4}\nmargin={:.4}\n",
            self.geometry.as_str(),
            self.accuracy,
            self.bayes_accuracy,
            self.iterations,
            self.mean_score_real,
            self.mean_score_generated,
            self.margin()
        )
    }
}

fn mlp_params(rng: &mut ChaCha8Rng, hidden: usize) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.insert("w1", uniform(rng, 2, hidden, glorot_limit(2, hidden)));
    p.insert("b1", Tensor::zeros(1, hidden));
    p.insert("w2", uniform(rng, hidden, hidden, glorot_limit(hidden, hidden)));
    p.insert("b2", Tensor::zeros(1, hidden));
    p.insert("w3", uniform(rng, hidden, 1, glorot_limit(hidden, 1)));
    p.insert("b3", Tensor::zeros(1, 1));
    p
}

fn mlp_scores(g: &mut Graph<f64>, p: &crate::params::Bound, x: Var) -> Var {
    let mut h = x;
    for (w, b) in [("w1", "b1"), ("w2", "b2")] {
        let y = g.matmul(h, p.var(w));
        let y = g.add_row(y, p.var(b));
        h = g.relu(y);
    }
    let y = g.matmul(h, p.var("w3"));
    g.add_row(y, p.var("b3"))
}

fn points(ps: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(ps.len(), 2, |r, c| if c == 0 { ps[r] } else { 1.0 - ps[r] })
}

/// Trains a small ReLU critic with the logistic loss to tell real from
/// generated points under `geometry`, then measures held-out accuracy.
pub fn separability(geometry: Geometry, cfg: &TwoWordConfig) -> Result<SeparabilityReport> {
    if !(cfg.radius > 0.0 && cfg.radius < 0.5) {
        return Err(Error::Range(format!("softening radius {} is outside (0, 0.5)", cfg.radius)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = (0..n).map(|_| (geometry.sample_real(rng, cfg.radius), 1.0)).collect();
        v.extend((0..n).map(|_| (rng.random::<f64>(), -1.0)));
        v.shuffle(rng);
        v
    };
    let train = draw(&mut rng, cfg.train_per_class);
    let test = draw(&mut rng, cfg.test_per_class);

    let mut params = mlp_params(&mut rng, cfg.hidden);
    let mut opt = Adam::new(AdamConfig::new(cfg.lr, 0.9, 0.999), &params);
    let m = cfg.batch_size.min(train.len());
    for step in 0..cfg.steps {
        let batch: Vec<(f64, f64)> = (0..m).map(|_| train[rng.random_range(0..train.len())]).collect();
        let x = points(&batch.iter().map(|b| b.0).collect::<Vec<_>>());
        let y = Tensor::from_vec(m, 1, batch.iter().map(|b| -b.1).collect());
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let xv = g.leaf(x);
        let s = mlp_scores(&mut g, &p, xv);
        let yv = g.leaf(y);
        let margin = g.mul(s, yv);
        let l = g.softplus(margin);
        let loss = g.mean_all(l);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                iteration: step as u64,
                term: "separability loss",
                value,
            });
        }
        let grads: Vec<Tensor<f64>> = g.grad(loss, p.vars()).into_iter().map(|v| g.value(v).clone()).collect();
        opt.update(&mut params, &grads);
    }

    let x = points(&test.iter().map(|t| t.0).collect::<Vec<_>>());
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let xv = g.leaf(x);
    let s = mlp_scores(&mut g, &p, xv);
    let scores = g.value(s).data();
    let (mut correct, mut real_sum, mut gen_sum) = (0usize, 0.0, 0.0);
    for (&(_, label), &sc) in test.iter().zip(scores) {
        if (sc > 0.0) == (label > 0.0) {
            correct += 1;
        }
        if label > 0.0 {
            real_sum += sc;
        } else {
            gen_sum += sc;
        }
    }
    let n = cfg.test_per_class as f64;
    Ok(SeparabilityReport {
        geometry,
        accuracy: correct as f64 / test.len() as f64,
        bayes_accuracy: bayes_accuracy(geometry, cfg.radius, 1 << 16),
        iterations: cfg.steps,
        mean_score_real: real_sum / n,
        mean_score_generated: gen_sum / n,
    })
}

/// The two-word language experiment: hard one-hot vertices versus softened
/// vertex neighbourhoods, each against a generator spread over the whole
/// segment, plus an indistinguishable control.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoWordReport {
    pub one_hot: SeparabilityReport,
    pub softened: SeparabilityReport,
    pub control: SeparabilityReport,
}

pub fn two_word_experiment(cfg: &TwoWordConfig) -> Result<TwoWordReport> {
    Ok(TwoWordReport {
        one_hot: separability(Geometry::OneHotVsSegment, cfg)?,
        softened: separability(Geometry::SoftenedVsSegment, cfg)?,
        control: separability(Geometry::Identical, cfg)?,
    })
}

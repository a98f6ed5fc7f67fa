//! Training objectives evaluated on a tiny explicit autoregressive scorer.
//!
//! [`ToyModel`] maps the last `window` tokens of its context to logits with
//! one linear layer (one-hot token-at-offset features plus a bias) and a
//! softmax. It is small enough that every sequence of a short length can be
//! enumerated, which makes exact oracles possible for the SFT objective, the
//! DPO objective with RPO regularizer, and the gradient split between
//! chain training and independently trained stages.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Token = usize;

pub const MAX_VOCAB: usize = 8;
pub const MAX_WINDOW: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("vocab size must be within 2..={MAX_VOCAB}, got {0}")]
    VocabRange(usize),
    #[error("context window must be within 1..={MAX_WINDOW}, got {0}")]
    WindowRange(usize),
    #[error("expected {expected} parameters, got {found}")]
    ParamCount { expected: usize, found: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    OutOfVocab { token: Token, vocab: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    theta: Vec<f64>,
    vocab_size: usize,
    window: usize,
}

impl ToyModel {
    /// All-zero parameters, i.e. the uniform distribution in every state.
    pub fn new(vocab_size: usize, window: usize) -> Result<Self, LossError> {
        if !(2..=MAX_VOCAB).contains(&vocab_size) {
            return Err(LossError::VocabRange(vocab_size));
        }
        if !(1..=MAX_WINDOW).contains(&window) {
            return Err(LossError::WindowRange(window));
        }
        let theta = vec![0.0; vocab_size * (window * vocab_size + 1)];
        Ok(Self { theta, vocab_size, window })
    }

    pub fn with_params(vocab_size: usize, window: usize, theta: Vec<f64>) -> Result<Self, LossError> {
        let mut m = Self::new(vocab_size, window)?;
        m.set_params(&theta)?;
        Ok(m)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<(), LossError> {
        if theta.len() != self.theta.len() {
            return Err(LossError::ParamCount {
                expected: self.theta.len(),
                found: theta.len(),
            });
        }
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    fn feature_dim(&self) -> usize {
        self.window * self.vocab_size + 1
    }

    /// Indices of the active (value 1) features for a context.
    fn active_features(&self, context: &[Token]) -> Vec<usize> {
        let mut out: Vec<usize> = context
            .iter()
            .rev()
            .take(self.window)
            .enumerate()
            .map(|(offset, &tok)| offset * self.vocab_size + tok)
            .collect();
        out.push(self.window * self.vocab_size);
        out
    }

    fn logits(&self, features: &[usize]) -> Vec<f64> {
        let dim = self.feature_dim();
        (0..self.vocab_size)
            .map(|v| features.iter().map(|&f| self.theta[v * dim + f]).sum())
            .collect()
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<(), LossError> {
        match tokens.iter().find(|&&t| t >= self.vocab_size) {
            Some(&token) => Err(LossError::OutOfVocab { token, vocab: self.vocab_size }),
            None => Ok(()),
        }
    }

    /// Next-token distribution after `context`.
    pub fn next_distribution(&self, context: &[Token]) -> Result<Vec<f64>, LossError> {
        self.check_tokens(context)?;
        let logits = self.logits(&self.active_features(context));
        let lse = log_sum_exp(&logits);
        Ok(logits.iter().map(|l| libm::exp(l - lse)).collect())
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(xs.iter().map(|x| libm::exp(x - m)).sum::<f64>())
}

/// `log π(y | x)` with its per-token terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub logprob: f64,
    pub per_token: Vec<f64>,
}

pub fn sequence_logprob(model: &ToyModel, x: &[Token], y: &[Token]) -> Result<SequenceScore, LossError> {
    Ok(score_and_grad(model, x, y, false)?.0)
}

/// Gradient of `log π(y | x)` with respect to the model parameters.
pub fn sequence_logprob_grad(model: &ToyModel, x: &[Token], y: &[Token]) -> Result<Vec<f64>, LossError> {
    Ok(score_and_grad(model, x, y, true)?.1)
}

fn score_and_grad(
    model: &ToyModel,
    x: &[Token],
    y: &[Token],
    want_grad: bool,
) -> Result<(SequenceScore, Vec<f64>), LossError> {
    model.check_tokens(x)?;
    model.check_tokens(y)?;
    let dim = model.feature_dim();
    let mut grad = if want_grad { vec![0.0; model.param_count()] } else { Vec::new() };
    let mut context: Vec<Token> = x.to_vec();
    let mut per_token = Vec::with_capacity(y.len());
    for &tok in y {
        let features = model.active_features(&context);
        let logits = model.logits(&features);
        let lse = log_sum_exp(&logits);
        per_token.push(logits[tok] - lse);
        if want_grad {
            for v in 0..model.vocab_size {
                let p = libm::exp(logits[v] - lse);
                let coeff = if v == tok { 1.0 - p } else { -p };
                for &f in &features {
                    grad[v * dim + f] += coeff;
                }
            }
        }
        context.push(tok);
    }
    let logprob = per_token.iter().sum();
    Ok((SequenceScore { logprob, per_token }, grad))
}

/// Mean negative log-likelihood over a batch of sequence scores.
pub fn sft_loss(scores: &[SequenceScore]) -> Result<f64, LossError> {
    if scores.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    Ok(scores.iter().map(|s| -s.logprob).sum::<f64>() / scores.len() as f64)
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + libm::log1p(libm::exp(-libm::fabs(z)))
}

/// Logistic function, evaluated on the branch that cannot overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

fn check_dpo_args(logp_pos: f64, logp_neg: f64, beta: f64, alpha: f64) -> Result<(), LossError> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(LossError::InvalidArgument("beta must be > 0"));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(LossError::InvalidArgument("alpha must be >= 0"));
    }
    if !(logp_pos <= 0.0) || !(logp_neg <= 0.0) {
        return Err(LossError::InvalidArgument("log-probabilities must be <= 0"));
    }
    Ok(())
}

/// Preference loss with NLL regularizer on the chosen response:
/// `-ln σ(β (logp_pos - logp_neg)) + α (-logp_pos)`.
pub fn dpo_loss(logp_pos: f64, logp_neg: f64, beta: f64, alpha: f64) -> Result<f64, LossError> {
    check_dpo_args(logp_pos, logp_neg, beta, alpha)?;
    let margin = beta * (logp_pos - logp_neg);
    Ok(softplus(-margin) + alpha * -logp_pos)
}

/// Partial derivatives of [`dpo_loss`] with respect to `(logp_pos, logp_neg)`.
pub fn dpo_loss_partials(logp_pos: f64, logp_neg: f64, beta: f64, alpha: f64) -> Result<(f64, f64), LossError> {
    check_dpo_args(logp_pos, logp_neg, beta, alpha)?;
    let s = sigmoid(-beta * (logp_pos - logp_neg));
    Ok((-beta * s - alpha, beta * s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub context: Vec<Token>,
    pub target: Vec<Token>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
    pub weight: f64,
}

/// A loss function together with the batch it is evaluated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    /// `(1/n) Σ w_i · (-log π(y_i | x_i))`
    Sft(Vec<SftExample>),
    /// `(1/n) Σ w_i · dpo_loss(log π(y⁺|x), log π(y⁻|x), β, α)`
    Dpo {
        pairs: Vec<PreferencePair>,
        beta: f64,
        alpha: f64,
    },
}

impl Objective {
    pub fn loss(&self, model: &ToyModel) -> Result<f64, LossError> {
        match self {
            Objective::Sft(batch) => {
                if batch.is_empty() {
                    return Err(LossError::EmptyBatch);
                }
                let mut total = 0.0;
                for ex in batch {
                    total += ex.weight * -sequence_logprob(model, &ex.context, &ex.target)?.logprob;
                }
                Ok(total / batch.len() as f64)
            }
            Objective::Dpo { pairs, beta, alpha } => {
                if pairs.is_empty() {
                    return Err(LossError::EmptyBatch);
                }
                let mut total = 0.0;
                for p in pairs {
                    let pos = sequence_logprob(model, &p.context, &p.chosen)?.logprob;
                    let neg = sequence_logprob(model, &p.context, &p.rejected)?.logprob;
                    total += p.weight * dpo_loss(pos, neg, *beta, *alpha)?;
                }
                Ok(total / pairs.len() as f64)
            }
        }
    }
}

/// Analytic gradient of `objective` with respect to the model parameters.
pub fn grad(model: &ToyModel, objective: &Objective) -> Result<Vec<f64>, LossError> {
    let mut g = vec![0.0; model.param_count()];
    match objective {
        Objective::Sft(batch) => {
            if batch.is_empty() {
                return Err(LossError::EmptyBatch);
            }
            let scale = 1.0 / batch.len() as f64;
            for ex in batch {
                let gl = sequence_logprob_grad(model, &ex.context, &ex.target)?;
                axpy(&mut g, -ex.weight * scale, &gl);
            }
        }
        Objective::Dpo { pairs, beta, alpha } => {
            if pairs.is_empty() {
                return Err(LossError::EmptyBatch);
            }
            let scale = 1.0 / pairs.len() as f64;
            for p in pairs {
                let (pos, gpos) = score_and_grad(model, &p.context, &p.chosen, true)?;
                let (neg, gneg) = score_and_grad(model, &p.context, &p.rejected, true)?;
                let (dpos, dneg) = dpo_loss_partials(pos.logprob, neg.logprob, *beta, *alpha)?;
                axpy(&mut g, p.weight * scale * dpos, &gpos);
                axpy(&mut g, p.weight * scale * dneg, &gneg);
            }
        }
    }
    Ok(g)
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Central-difference gradient of `f` at `params`.
pub fn central_difference<F>(params: &[f64], eps: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + eps;
            let up = f(&work);
            work[i] = orig - eps;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute norm when both are below 1e-8.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(libm::fabs(*x)))
}

/// Gradients of the chain objective and of its two terms.
///
/// With one network producing both the intermediate output `s` and the
/// answer, `∇L_chain = ∇[-log P(s|x,d)] + Δ_g` where
/// `Δ_g = ∇[-log P(â|x,d,s)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDecomposition {
    /// `∇[-log P(s, â | x, d)]`, computed over the concatenated sequence.
    pub g_chain: Vec<f64>,
    /// `∇[-log P(s | x, d)]`
    pub g_indep: Vec<f64>,
    /// `∇[-log P(â | x, d, s)]`
    pub delta_g: Vec<f64>,
}

impl ChainDecomposition {
    pub fn compute(
        model: &ToyModel,
        x: &[Token],
        d: &[Token],
        s: &[Token],
        a_hat: &[Token],
    ) -> Result<Self, LossError> {
        let cond: Vec<Token> = x.iter().chain(d).copied().collect();
        let full: Vec<Token> = s.iter().chain(a_hat).copied().collect();
        let cond_s: Vec<Token> = cond.iter().chain(s).copied().collect();
        let neg = |g: Vec<f64>| g.into_iter().map(|v| -v).collect::<Vec<f64>>();
        Ok(Self {
            g_chain: neg(sequence_logprob_grad(model, &cond, &full)?),
            g_indep: neg(sequence_logprob_grad(model, &cond, s)?),
            delta_g: neg(sequence_logprob_grad(model, &cond_s, a_hat)?),
        })
    }

    /// Max-norm of `g_chain − g_indep − Δ_g`; with `include_delta = false`
    /// the `Δ_g` term is dropped.
    pub fn residual(&self, include_delta: bool) -> f64 {
        let r: Vec<f64> = self
            .g_chain
            .iter()
            .zip(&self.g_indep)
            .zip(&self.delta_g)
            .map(|((c, i), d)| c - i - if include_delta { *d } else { 0.0 })
            .collect();
        max_norm(&r)
    }
}

pub fn chain_decomposition_residual(
    model: &ToyModel,
    x: &[Token],
    d: &[Token],
    s: &[Token],
    a_hat: &[Token],
) -> Result<f64, LossError> {
    Ok(ChainDecomposition::compute(model, x, d, s, a_hat)?.residual(true))
}

/// Two separately parameterized stages: a preprocessor θ producing `s` from
/// `(x, d)` and an answerer φ producing `â` from `s` alone. Gradients are
/// laid out over the concatenated vector `[θ; φ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndependentStages {
    pub preprocessor: ToyModel,
    pub answerer: ToyModel,
}

impl IndependentStages {
    pub fn param_count(&self) -> usize {
        self.preprocessor.param_count() + self.answerer.param_count()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), LossError> {
        let n = self.preprocessor.param_count();
        if params.len() != self.param_count() {
            return Err(LossError::ParamCount {
                expected: self.param_count(),
                found: params.len(),
            });
        }
        self.preprocessor.set_params(&params[..n])?;
        self.answerer.set_params(&params[n..])
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.preprocessor.params().to_vec();
        p.extend_from_slice(self.answerer.params());
        p
    }

    /// `-log P_θ(s|x,d) - log P_φ(â|s)`
    pub fn loss(&self, x: &[Token], d: &[Token], s: &[Token], a_hat: &[Token]) -> Result<f64, LossError> {
        let cond: Vec<Token> = x.iter().chain(d).copied().collect();
        Ok(-sequence_logprob(&self.preprocessor, &cond, s)?.logprob
            - sequence_logprob(&self.answerer, s, a_hat)?.logprob)
    }

    /// Gradients of the preprocessing term and of the answer term over `[θ; φ]`.
    pub fn term_grads(
        &self,
        x: &[Token],
        d: &[Token],
        s: &[Token],
        a_hat: &[Token],
    ) -> Result<(Vec<f64>, Vec<f64>), LossError> {
        let cond: Vec<Token> = x.iter().chain(d).copied().collect();
        let n = self.preprocessor.param_count();
        let mut pre = vec![0.0; self.param_count()];
        let mut ans = vec![0.0; self.param_count()];
        axpy(&mut pre[..n], -1.0, &sequence_logprob_grad(&self.preprocessor, &cond, s)?);
        axpy(&mut ans[n..], -1.0, &sequence_logprob_grad(&self.answerer, s, a_hat)?);
        Ok((pre, ans))
    }
}

pub mod verify {
    //! Randomized self-checks of the objectives, run by `cocoa verify-losses`.

    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const FD_EPS: f64 = 1e-5;
    pub const FD_REL_TOL: f64 = 1e-4;
    pub const CHAIN_TOL: f64 = 1e-10;
    pub const DPO_REFERENCE: f64 = 0.713_015_252_399_952_6;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct CheckResult {
        pub name: String,
        pub passed: bool,
        pub samples: usize,
        pub max_error: f64,
        pub tolerance: f64,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct VerificationReport {
        pub seed: u64,
        pub passed: bool,
        pub checks: Vec<CheckResult>,
    }

    fn check(name: &str, samples: usize, max_error: f64, tolerance: f64) -> CheckResult {
        CheckResult {
            name: name.into(),
            passed: max_error <= tolerance,
            samples,
            max_error,
            tolerance,
        }
    }

    pub fn random_model(rng: &mut impl Rng) -> ToyModel {
        let vocab = rng.gen_range(2..=4);
        let window = rng.gen_range(1..=3);
        let mut m = ToyModel::new(vocab, window).expect("ranges are valid");
        let theta: Vec<f64> = (0..m.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        m.set_params(&theta).expect("length matches");
        m
    }

    pub fn random_tokens(rng: &mut impl Rng, vocab: usize, min: usize, max: usize) -> Vec<Token> {
        let len = rng.gen_range(min..=max);
        (0..len).map(|_| rng.gen_range(0..vocab)).collect()
    }

    pub fn random_sft(rng: &mut impl Rng, vocab: usize) -> Objective {
        let n = rng.gen_range(1..=3);
        Objective::Sft(
            (0..n)
                .map(|_| SftExample {
                    context: random_tokens(rng, vocab, 0, 3),
                    target: random_tokens(rng, vocab, 1, 3),
                    weight: rng.gen_range(0.5..2.0),
                })
                .collect(),
        )
    }

    pub fn random_dpo(rng: &mut impl Rng, vocab: usize) -> Objective {
        let n = rng.gen_range(1..=3);
        Objective::Dpo {
            pairs: (0..n)
                .map(|_| PreferencePair {
                    context: random_tokens(rng, vocab, 0, 3),
                    chosen: random_tokens(rng, vocab, 1, 3),
                    rejected: random_tokens(rng, vocab, 1, 3),
                    weight: rng.gen_range(0.5..2.0),
                })
                .collect(),
            beta: rng.gen_range(0.05..1.0),
            alpha: rng.gen_range(0.0..0.5),
        }
    }

    fn fd_error(model: &ToyModel, objective: &Objective) -> f64 {
        let analytic = grad(model, objective).expect("valid objective");
        let mut probe = model.clone();
        let numeric = central_difference(model.params(), FD_EPS, |p| {
            probe.set_params(p).expect("length matches");
            objective.loss(&probe).expect("valid objective")
        });
        relative_error(&analytic, &numeric)
    }

    pub fn run_suite(seed: u64) -> VerificationReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut checks = Vec::new();

        let ln2 = dpo_loss(-1.0, -1.0, 0.2, 0.0).expect("valid args");
        checks.push(check("dpo_equal_logprobs_is_ln2", 1, libm::fabs(ln2 - core::f64::consts::LN_2), 1e-12));
        let reference = dpo_loss(-1.0, -3.0, 0.2, 0.2).expect("valid args");
        checks.push(check("dpo_reference_value", 1, libm::fabs(reference - DPO_REFERENCE), 1e-6));

        let mut violations = 0usize;
        let mut shift_err: f64 = 0.0;
        for _ in 0..1000 {
            let pos = rng.gen_range(-10.0..-0.5);
            let neg = rng.gen_range(-10.0..-0.5);
            let beta = rng.gen_range(0.05..1.0);
            let alpha = rng.gen_range(0.0..0.5);
            let step = rng.gen_range(0.01..0.5);
            let base = dpo_loss(pos, neg, beta, alpha).unwrap();
            if dpo_loss(pos + step, neg, beta, alpha).unwrap() >= base {
                violations += 1;
            }
            if dpo_loss(pos, neg + step, beta, alpha).unwrap() <= base {
                violations += 1;
            }
            let c = rng.gen_range(-5.0..0.0);
            let plain = dpo_loss(pos, neg, beta, 0.0).unwrap();
            let shifted = dpo_loss(pos + c, neg + c, beta, 0.0).unwrap();
            shift_err = shift_err.max(libm::fabs(shifted - plain));
            let reg_shifted = dpo_loss(pos + c, neg + c, beta, alpha).unwrap();
            shift_err = shift_err.max(libm::fabs(reg_shifted - base - alpha * -c));
        }
        checks.push(check("dpo_monotonicity", 1000, violations as f64, 0.0));
        checks.push(check("dpo_shift_invariance", 1000, shift_err, 1e-9));

        let mut norm_err: f64 = 0.0;
        for _ in 0..20 {
            let m = random_model(&mut rng);
            let x = random_tokens(&mut rng, m.vocab_size(), 0, 2);
            let total: f64 = all_sequences(m.vocab_size(), 4)
                .iter()
                .map(|y| libm::exp(sequence_logprob(&m, &x, y).unwrap().logprob))
                .sum();
            norm_err = norm_err.max(libm::fabs(total - 1.0));
        }
        checks.push(check("sequence_probabilities_sum_to_one", 20, norm_err, 1e-12));

        let mut sft_err: f64 = 0.0;
        let mut dpo_err: f64 = 0.0;
        for _ in 0..50 {
            let m = random_model(&mut rng);
            sft_err = sft_err.max(fd_error(&m, &random_sft(&mut rng, m.vocab_size())));
            dpo_err = dpo_err.max(fd_error(&m, &random_dpo(&mut rng, m.vocab_size())));
        }
        checks.push(check("sft_gradient_finite_difference", 50, sft_err, FD_REL_TOL));
        checks.push(check("dpo_gradient_finite_difference", 50, dpo_err, FD_REL_TOL));

        let mut chain_err: f64 = 0.0;
        for _ in 0..100 {
            let m = random_model(&mut rng);
            let v = m.vocab_size();
            let x = random_tokens(&mut rng, v, 1, 2);
            let d = random_tokens(&mut rng, v, 0, 2);
            let s = random_tokens(&mut rng, v, 1, 3);
            let a = random_tokens(&mut rng, v, 1, 2);
            chain_err = chain_err.max(chain_decomposition_residual(&m, &x, &d, &s, &a).unwrap());
        }
        checks.push(check("chain_gradient_decomposition", 100, chain_err, CHAIN_TOL));

        let mut leak: f64 = 0.0;
        for _ in 0..20 {
            let pre = random_model(&mut rng);
            let mut ans = ToyModel::new(pre.vocab_size(), pre.window()).unwrap();
            let theta: Vec<f64> = (0..ans.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ans.set_params(&theta).unwrap();
            let stages = IndependentStages { preprocessor: pre, answerer: ans };
            let v = stages.preprocessor.vocab_size();
            let n = stages.preprocessor.param_count();
            let x = random_tokens(&mut rng, v, 1, 2);
            let s = random_tokens(&mut rng, v, 1, 3);
            let a = random_tokens(&mut rng, v, 1, 2);
            let (g_pre, g_ans) = stages.term_grads(&x, &[], &s, &a).unwrap();
            leak = leak.max(max_norm(&g_pre[n..])).max(max_norm(&g_ans[..n]));
        }
        checks.push(check("independent_stages_have_no_cross_gradient", 20, leak, 0.0));

        VerificationReport {
            seed,
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }

    /// Every token sequence of length `len`.
    pub fn all_sequences(vocab: usize, len: usize) -> Vec<Vec<Token>> {
        let mut out = vec![Vec::new()];
        for _ in 0..len {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..vocab).map(move |t| {
                        let mut p = prefix.clone();
                        p.push(t);
                        p
                    })
                })
                .collect();
        }
        out
    }

    impl VerificationReport {
        pub fn summary_lines(&self) -> Vec<String> {
            self.checks
                .iter()
                .map(|c| {
                    format!(
                        "{} {:<46} n={:<5} max_err={:.3e} tol={:.1e}",
                        if c.passed { "PASS" } else { "FAIL" },
                        c.name,
                        c.samples,
                        c.max_error,
                        c.tolerance
                    )
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::verify::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_model_logprob() {
        let m = ToyModel::new(2, 2).unwrap();
        let s = sequence_logprob(&m, &[0], &[1, 0, 1]).unwrap();
        assert!((s.logprob - 3.0 * libm::log(0.5)).abs() < 1e-12);
        assert!((s.logprob - -2.0794415416798357).abs() < 1e-12);
        assert_eq!(sequence_logprob(&m, &[0], &[]).unwrap().logprob, 0.0);
    }

    #[test]
    fn out_of_vocab_rejected() {
        let m = ToyModel::new(3, 1).unwrap();
        assert_eq!(
            sequence_logprob(&m, &[0], &[3]),
            Err(LossError::OutOfVocab { token: 3, vocab: 3 })
        );
        assert!(ToyModel::new(9, 1).is_err());
        assert!(ToyModel::new(2, 7).is_err());
    }

    /// Probabilities computed by explicit exponentiation and division,
    /// independent of the log-softmax path.
    fn brute_prob(m: &ToyModel, x: &[Token], y: &[Token]) -> f64 {
        let dim = m.window() * m.vocab_size() + 1;
        let mut ctx = x.to_vec();
        let mut prob = 1.0;
        for &t in y {
            let mut feats = vec![0.0; dim];
            for (off, &tok) in ctx.iter().rev().take(m.window()).enumerate() {
                feats[off * m.vocab_size() + tok] = 1.0;
            }
            feats[dim - 1] = 1.0;
            let weights: Vec<f64> = (0..m.vocab_size())
                .map(|v| {
                    let z: f64 = (0..dim).map(|f| m.params()[v * dim + f] * feats[f]).sum();
                    z.exp()
                })
                .collect();
            prob *= weights[t] / weights.iter().sum::<f64>();
            ctx.push(t);
        }
        prob
    }

    #[test]
    fn logprob_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = ToyModel::new(2, 3).unwrap();
        let theta: Vec<f64> = (0..m.param_count()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        m.set_params(&theta).unwrap();
        let x = [1, 0];
        let mut total = 0.0;
        for y in all_sequences(2, 4) {
            let p = brute_prob(&m, &x, &y);
            let s = sequence_logprob(&m, &x, &y).unwrap();
            assert!((s.logprob.exp() - p).abs() < 1e-13);
            assert!((s.logprob - s.per_token.iter().sum::<f64>()).abs() < 1e-12);
            assert!(s.logprob <= 0.0);
            total += p;
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distribution_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(&mut rng);
        let p = m.next_distribution(&[0, 1, 1]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sft_loss_examples() {
        let s = |lp: f64| SequenceScore { logprob: lp, per_token: vec![lp] };
        assert_eq!(sft_loss(&[s(-1.5)]).unwrap(), 1.5);
        assert_eq!(sft_loss(&[s(-1.0), s(-3.0)]).unwrap(), 2.0);
        assert_eq!(sft_loss(&[s(0.0), s(0.0)]).unwrap(), 0.0);
        assert_eq!(sft_loss(&[]), Err(LossError::EmptyBatch));
    }

    #[test]
    fn dpo_loss_examples() {
        assert!((dpo_loss(-2.0, -2.0, 0.2, 0.0).unwrap() - core::f64::consts::LN_2).abs() < 1e-12);
        assert!((dpo_loss(-1.0, -3.0, 0.2, 0.2).unwrap() - 0.713015).abs() < 1e-6);
        assert!(dpo_loss(-1.0, -1e6, 0.2, 0.0).unwrap() < 1e-300);
        assert_eq!(dpo_loss(-1.0, f64::NEG_INFINITY, 0.2, 0.0).unwrap(), 0.0);
        assert!(dpo_loss(-1.0, -1.0, 0.0, 0.0).is_err());
        assert!(dpo_loss(-1.0, -1.0, 0.2, -0.1).is_err());
        assert!(dpo_loss(0.5, -1.0, 0.2, 0.0).is_err());
        assert!(dpo_loss(f64::NAN, -1.0, 0.2, 0.0).is_err());
        // large margins stay finite
        assert!(dpo_loss(-1e6, 0.0, 10.0, 0.0).unwrap().is_finite());
    }

    #[test]
    fn uniform_symmetric_batch_gives_zero_bias_gradient() {
        let m = ToyModel::new(2, 1).unwrap();
        let batch = Objective::Sft(vec![
            SftExample { context: vec![], target: vec![0], weight: 1.0 },
            SftExample { context: vec![], target: vec![1], weight: 1.0 },
        ]);
        let g = grad(&m, &batch).unwrap();
        assert_eq!(g, vec![0.0; m.param_count()]);
    }

    #[test]
    fn gradient_scales_with_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_model(&mut rng);
        let obj = random_sft(&mut rng, m.vocab_size());
        let doubled = match &obj {
            Objective::Sft(b) => Objective::Sft(
                b.iter().map(|e| SftExample { weight: e.weight * 2.0, ..e.clone() }).collect(),
            ),
            _ => unreachable!(),
        };
        let g1 = grad(&m, &obj).unwrap();
        let g2 = grad(&m, &doubled).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let m = random_model(&mut rng);
            for obj in [random_sft(&mut rng, m.vocab_size()), random_dpo(&mut rng, m.vocab_size())] {
                let analytic = grad(&m, &obj).unwrap();
                let mut probe = m.clone();
                let numeric = central_difference(m.params(), FD_EPS, |p| {
                    probe.set_params(p).unwrap();
                    obj.loss(&probe).unwrap()
                });
                assert!(relative_error(&analytic, &numeric) <= FD_REL_TOL);
            }
        }
    }

    #[test]
    fn chain_residual_and_zeroed_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_model(&mut rng);
        let dec = ChainDecomposition::compute(&m, &[0], &[1], &[1, 0], &[0, 1]).unwrap();
        assert!(dec.residual(true) <= 1e-10);
        assert!((dec.residual(false) - max_norm(&dec.delta_g)).abs() <= 1e-10);
        assert!(max_norm(&dec.delta_g) > 0.0);
    }

    #[test]
    fn suite_passes() {
        let report = run_suite(42);
        for line in report.summary_lines() {
            std::println!("{line}");
        }
        assert!(report.passed);
        assert_eq!(report.checks.len(), 9);
    }
}

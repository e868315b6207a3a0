//! Gradient-descent training of the block parameters under the four
//! objectives: pretraining over a task prior, zero-shot fine-tuning of all
//! blocks, of the value blocks only, of the query-key blocks only, and
//! zero-shot fine-tuning with an annealed auxiliary few-shot loss.

use thiserror::Error;

use crate::attention::{AttentionParams, BlockMask};
use crate::linalg::{dot, EigenDecomp, Mat};
use crate::montecarlo::{mc_test_error, McEstimate};
use crate::taskgen::{
    sample_prompt, sample_task, Prompt, Stream, TaskPrior, TaskSpec, STREAM_NOISE,
    STREAM_PROMPTS, STREAM_TASKS,
};
use crate::theory;

/// Learning rates swept when none is pinned; best final loss wins.
pub const LR_SWEEP: [f64; 3] = [1e-2, 3e-3, 1e-3];

/// Loss threshold beyond which training aborts.
const DIVERGENCE_LIMIT: f64 = 1e6;

/// Errors raised by training and evaluation.
#[derive(Debug, Error)]
pub enum TrainError {
    /// A loss/gradient evaluation received no prompts.
    #[error("empty batch")]
    EmptyBatch,
    /// The loss exceeded the divergence limit.
    #[error("diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    /// w extraction requires a nonzero target task vector.
    #[error("target task vector is zero")]
    ZeroTheta,
    /// The configuration violates a regime invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Training regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Few-shot loss over the task prior, all blocks free.
    Pretrain,
    /// Zero-shot loss on the target task, all blocks free.
    FullZs,
    /// Zero-shot loss, value blocks only.
    ValueZs,
    /// Zero-shot loss plus annealed auxiliary few-shot loss, value blocks only.
    ValueZsFs,
    /// Zero-shot loss, query-key blocks only.
    QkZs,
}

impl Regime {
    /// The block mask each regime trains by default.
    pub fn default_mask(self) -> BlockMask {
        match self {
            Regime::Pretrain | Regime::FullZs => BlockMask::all(),
            Regime::ValueZs | Regime::ValueZsFs => BlockMask::value_only(),
            Regime::QkZs => BlockMask::qk_only(),
        }
    }
}

/// Parameter initialization.
#[derive(Debug, Clone)]
pub enum Init {
    /// All blocks zero.
    Zeros,
    /// Start from an existing snapshot (fine-tuning).
    Snapshot(AttentionParams),
    /// Independent Gaussian entries of the given scale on every block.
    SmallGaussian(f64),
}

/// Training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Blocks receiving updates; defaults to the regime's mask.
    pub mask: Option<BlockMask>,
    /// Context length: m for pretraining, n for the auxiliary few-shot loss.
    pub m_or_n: usize,
    pub steps: usize,
    pub batch: usize,
    pub step_size: f64,
    /// (initial few-shot weight omega0, linear-to-zero horizon in steps);
    /// present iff regime = ValueZsFs.
    pub anneal: Option<(f64, usize)>,
    pub seed: u64,
    pub init: Init,
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 || self.batch == 0 {
            return Err(TrainError::InvalidConfig("steps and batch must be positive".into()));
        }
        if self.step_size <= 0.0 {
            return Err(TrainError::InvalidConfig("step_size must be positive".into()));
        }
        match (self.regime, &self.anneal) {
            (Regime::ValueZsFs, None) => {
                Err(TrainError::InvalidConfig("value_zs_fs requires anneal".into()))
            }
            (Regime::ValueZsFs, Some(_)) => Ok(()),
            (_, Some(_)) => {
                Err(TrainError::InvalidConfig("anneal only applies to value_zs_fs".into()))
            }
            _ => Ok(()),
        }
    }
}

/// What the objective is evaluated on.
#[derive(Debug, Clone)]
pub enum TrainTarget {
    /// A fixed task (fine-tuning regimes).
    FixedTask(TaskSpec),
    /// Fresh standard-normal tasks each prompt (pretraining).
    Prior { sigma: EigenDecomp, noise_var: f64 },
}

/// Per-step history plus the final parameters.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    /// Batch loss at each step (length = steps).
    pub losses: Vec<f64>,
    /// Extracted w at each step (length = steps).
    pub ws: Vec<f64>,
    pub params: AttentionParams,
}

/// Loss flavor for a single evaluation.
#[derive(Debug, Clone, Copy)]
pub enum LossMode {
    /// Few-shot squared error using all context examples of each prompt.
    Fs,
    /// Zero-shot squared error on the bare query.
    Zs,
    /// Zs plus omega times Fs.
    Mixed { omega: f64 },
}

/// Gradient over the blocks that can influence predictions; the remaining
/// blocks (V11, v12, q12, q22) have identically zero gradient.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub v21: Vec<f64>,
    pub v22: f64,
    pub q: f64,
    pub q11: Mat,
    pub q21: Vec<f64>,
}

impl ParamGrad {
    fn zeros(d: usize) -> Self {
        ParamGrad { v21: vec![0.0; d], v22: 0.0, q: 0.0, q11: Mat::zeros(d, d), q21: vec![0.0; d] }
    }

    fn scale(&mut self, s: f64) {
        for v in &mut self.v21 {
            *v *= s;
        }
        self.v22 *= s;
        self.q *= s;
        self.q11 = self.q11.scale(s);
        for v in &mut self.q21 {
            *v *= s;
        }
    }

    fn add_assign(&mut self, other: &ParamGrad) {
        for (a, b) in self.v21.iter_mut().zip(&other.v21) {
            *a += b;
        }
        self.v22 += other.v22;
        self.q += other.q;
        self.q11 = self.q11.add(&other.q11);
        for (a, b) in self.q21.iter_mut().zip(&other.q21) {
            *a += b;
        }
    }
}

/// Scores and values of one prompt under the current parameters.
fn prompt_terms(params: &AttentionParams, p: &Prompt) -> (Vec<f64>, Vec<f64>, f64, f64) {
    let n = p.n();
    let mut a = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for i in 0..n {
        a.push(dot(&params.v21, &p.context_x[i]) + params.v22 * p.context_y[i]);
        s.push(
            params.q
                + dot(&p.context_x[i], &params.q11.mul_vec(&p.query_x))
                + p.context_y[i] * dot(&params.q21, &p.query_x),
        );
    }
    let a_q = dot(&params.v21, &p.query_x);
    let s_q = params.q + dot(&p.query_x, &params.q11.mul_vec(&p.query_x));
    (a, s, a_q, s_q)
}

/// Accumulate the gradient of one squared few-shot residual.
fn accumulate_fs(params: &AttentionParams, p: &Prompt, grad: &mut ParamGrad) -> f64 {
    let n = p.n();
    let (a, s, a_q, s_q) = prompt_terms(params, p);
    let scale = 1.0 / (n as f64 + 1.0);
    let mut pred = a_q * s_q;
    for i in 0..n {
        pred += a[i] * s[i];
    }
    pred *= scale;
    let resid = pred - p.query_y;
    let g = 2.0 * resid * scale;

    for i in 0..n {
        for k in 0..params.d {
            grad.v21[k] += g * s[i] * p.context_x[i][k];
        }
        grad.v22 += g * s[i] * p.context_y[i];
        grad.q += g * a[i];
        for k in 0..params.d {
            for l in 0..params.d {
                grad.q11[(k, l)] += g * a[i] * p.context_x[i][k] * p.query_x[l];
            }
            grad.q21[k] += g * a[i] * p.context_y[i] * p.query_x[k];
        }
    }
    for k in 0..params.d {
        grad.v21[k] += g * s_q * p.query_x[k];
        for l in 0..params.d {
            grad.q11[(k, l)] += g * a_q * p.query_x[k] * p.query_x[l];
        }
    }
    grad.q += g * a_q;
    resid * resid
}

/// Accumulate the gradient of one squared zero-shot residual.
fn accumulate_zs(params: &AttentionParams, p: &Prompt, grad: &mut ParamGrad) -> f64 {
    let a_q = dot(&params.v21, &p.query_x);
    let s_q = params.q + dot(&p.query_x, &params.q11.mul_vec(&p.query_x));
    let resid = a_q * s_q - p.query_y;
    let g = 2.0 * resid;
    for k in 0..params.d {
        grad.v21[k] += g * s_q * p.query_x[k];
        for l in 0..params.d {
            grad.q11[(k, l)] += g * a_q * p.query_x[k] * p.query_x[l];
        }
    }
    grad.q += g * a_q;
    resid * resid
}

/// Mean squared prediction error over a batch and its exact gradient over
/// the unmasked blocks (blocks not entering the prediction get zero).
pub fn loss_and_grad(
    params: &AttentionParams,
    batch: &[Prompt],
    mode: LossMode,
) -> Result<(f64, ParamGrad), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut grad = ParamGrad::zeros(params.d);
    let mut loss = 0.0;
    for p in batch {
        loss += match mode {
            LossMode::Fs => accumulate_fs(params, p, &mut grad),
            LossMode::Zs => accumulate_zs(params, p, &mut grad),
            LossMode::Mixed { omega } => {
                let zs = accumulate_zs(params, p, &mut grad);
                if omega != 0.0 {
                    let mut aux = ParamGrad::zeros(params.d);
                    let fs = accumulate_fs(params, p, &mut aux);
                    aux.scale(omega);
                    grad.add_assign(&aux);
                    zs + omega * fs
                } else {
                    zs
                }
            }
        };
    }
    let inv = 1.0 / batch.len() as f64;
    grad.scale(inv);
    Ok((loss * inv, grad))
}

fn apply_update(params: &mut AttentionParams, grad: &ParamGrad, mask: &BlockMask, lr: f64) {
    if mask.v21 {
        for (p, g) in params.v21.iter_mut().zip(&grad.v21) {
            *p -= lr * g;
        }
    }
    if mask.v22 {
        params.v22 -= lr * grad.v22;
    }
    if mask.q {
        params.q -= lr * grad.q;
    }
    if mask.q11 {
        params.q11 = params.q11.sub(&grad.q11.scale(lr));
    }
    if mask.q21 {
        for (p, g) in params.q21.iter_mut().zip(&grad.q21) {
            *p -= lr * g;
        }
    }
    // V11, v12, q12, q22 have zero gradient under every objective; masked or
    // not, they never move.
}

fn init_params(init: &Init, d: usize, seed: u64) -> AttentionParams {
    match init {
        Init::Zeros => AttentionParams::zeros(d),
        Init::Snapshot(p) => p.clone(),
        Init::SmallGaussian(scale) => {
            let mut stream = Stream::new(seed, STREAM_TASKS);
            let mut p = AttentionParams::zeros(d);
            let draw = |s: &mut Stream| scale * s.standard_normal();
            p.v11 = Mat::from_fn(d, d, |_, _| draw(&mut stream));
            p.v12 = (0..d).map(|_| draw(&mut stream)).collect();
            p.v21 = (0..d).map(|_| draw(&mut stream)).collect();
            p.v22 = draw(&mut stream);
            p.q = draw(&mut stream);
            p.q11 = Mat::from_fn(d, d, |_, _| draw(&mut stream));
            p.q12 = (0..d).map(|_| draw(&mut stream)).collect();
            p.q21 = (0..d).map(|_| draw(&mut stream)).collect();
            p.q22 = draw(&mut stream);
            p
        }
    }
}

fn target_dim(target: &TrainTarget) -> usize {
    match target {
        TrainTarget::FixedTask(t) => t.dim(),
        TrainTarget::Prior { sigma, .. } => sigma.dim(),
    }
}

/// Run plain gradient descent per the configuration. Batches are resampled
/// every step from counter-derived streams, so the trace is deterministic
/// given the seed.
pub fn train(config: &TrainConfig, target: &TrainTarget) -> Result<TrainTrace, TrainError> {
    config.validate()?;
    let d = target_dim(target);
    let mask = config.mask.unwrap_or_else(|| config.regime.default_mask());
    let mut params = init_params(&config.init, d, config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    let mut ws = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let step_seed = config.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut tasks = Stream::new(step_seed, STREAM_TASKS);
        let mut inputs = Stream::new(step_seed, STREAM_PROMPTS);
        let mut noise = Stream::new(step_seed, STREAM_NOISE);

        let context = match config.regime {
            Regime::Pretrain => config.m_or_n,
            Regime::ValueZsFs => config.m_or_n,
            _ => 0,
        };
        let batch: Vec<Prompt> = (0..config.batch)
            .map(|_| {
                let task = match target {
                    TrainTarget::FixedTask(t) => t.clone(),
                    TrainTarget::Prior { sigma, noise_var } => sample_task(
                        &TaskPrior::StandardNormal,
                        sigma,
                        *noise_var,
                        &mut tasks,
                    ),
                };
                sample_prompt(&task, context, &mut inputs, &mut noise)
            })
            .collect();

        let mode = match config.regime {
            Regime::Pretrain => LossMode::Fs,
            Regime::FullZs | Regime::ValueZs | Regime::QkZs => LossMode::Zs,
            Regime::ValueZsFs => {
                let (omega0, horizon) = config.anneal.expect("validated");
                let frac = 1.0 - step as f64 / horizon as f64;
                LossMode::Mixed { omega: omega0 * frac.max(0.0) }
            }
        };

        let (loss, grad) = loss_and_grad(&params, &batch, mode)?;
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged { step, loss });
        }
        apply_update(&mut params, &grad, &mask, config.step_size);
        losses.push(loss);
        let w = match target {
            TrainTarget::FixedTask(t) => {
                extract_w(&params, &t.theta, config.regime).unwrap_or(params.v22)
            }
            TrainTarget::Prior { .. } => params.v22,
        };
        ws.push(w);
    }
    Ok(TrainTrace { losses, ws, params })
}

/// Train once per learning rate in [`LR_SWEEP`] and keep the run with the
/// lowest final loss; divergent runs are skipped.
pub fn train_sweep(config: &TrainConfig, target: &TrainTarget) -> Result<TrainTrace, TrainError> {
    let mut best: Option<TrainTrace> = None;
    let mut last_err = None;
    for lr in LR_SWEEP {
        let mut c = config.clone();
        c.step_size = lr;
        match train(&c, target) {
            Ok(trace) => {
                let better = match &best {
                    Some(b) => trace.losses.last() < b.losses.last(),
                    None => true,
                };
                if better {
                    best = Some(trace);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(TrainError::InvalidConfig("empty sweep".into())))
}

/// Read the scalar w of the one-parameter families out of trained blocks:
/// v22 for the value regimes (and pretraining), the projection
/// v21' theta0 / theta0' theta0 for full fine-tuning.
pub fn extract_w(
    params: &AttentionParams,
    theta0: &[f64],
    regime: Regime,
) -> Result<f64, TrainError> {
    let norm2: f64 = theta0.iter().map(|t| t * t).sum();
    if norm2 == 0.0 {
        return Err(TrainError::ZeroTheta);
    }
    Ok(match regime {
        Regime::FullZs => dot(&params.v21, theta0) / norm2,
        _ => params.v22,
    })
}

/// One (n, closed-form error, sampled error) row.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ErrorRow {
    pub n: usize,
    pub theory: f64,
    pub mc: McEstimate,
}

/// Closed-form vs sampled test errors per context length.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ErrorReport {
    pub rows: Vec<ErrorRow>,
}

/// Pair the exact error with the sampling oracle at each context length
/// (n = 0 is the zero-shot error).
pub fn eval_trained(
    params: &AttentionParams,
    task: &TaskSpec,
    n_list: &[usize],
    n_samples: usize,
    seed: u64,
) -> ErrorReport {
    let rows = n_list
        .iter()
        .map(|&n| {
            let exact = if n == 0 {
                theory::zs_error(params, task)
            } else {
                theory::fs_error(params, task, n).expect("n >= 1")
            };
            ErrorRow { n, theory: exact, mc: mc_test_error(params, task, n, n_samples, seed) }
        })
        .collect();
    ErrorReport { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::identity_sigma;
    use approx::assert_abs_diff_eq;
    use rand::{Rng as _, SeedableRng};

    fn default_task() -> TaskSpec {
        TaskSpec::new(vec![1.0, 0.0, 0.0, 0.0, 0.0], identity_sigma(5), 0.1)
    }

    fn random_params(seed: u64, d: usize) -> AttentionParams {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = AttentionParams::zeros(d);
        p.v21 = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        p.v22 = rng.gen_range(-1.0..1.0);
        p.q = rng.gen_range(-1.0..1.0);
        p.q11 = Mat::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        p.q21 = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        p
    }

    fn random_batch(seed: u64, d: usize, n: usize, count: usize) -> Vec<Prompt> {
        let task = TaskSpec::new(vec![0.7; d], identity_sigma(d), 0.2);
        let mut inputs = Stream::new(seed, STREAM_PROMPTS);
        let mut noise = Stream::new(seed, STREAM_NOISE);
        (0..count).map(|_| sample_prompt(&task, n, &mut inputs, &mut noise)).collect()
    }

    /// Perturb one scalar coordinate of the prediction-relevant blocks.
    fn nudge(p: &AttentionParams, idx: usize, h: f64) -> AttentionParams {
        let d = p.d;
        let mut q = p.clone();
        if idx < d {
            q.v21[idx] += h;
        } else if idx == d {
            q.v22 += h;
        } else if idx == d + 1 {
            q.q += h;
        } else if idx < d + 2 + d * d {
            let k = idx - d - 2;
            q.q11[(k / d, k % d)] += h;
        } else {
            q.q21[idx - d - 2 - d * d] += h;
        }
        q
    }

    fn grad_coord(g: &ParamGrad, idx: usize, d: usize) -> f64 {
        if idx < d {
            g.v21[idx]
        } else if idx == d {
            g.v22
        } else if idx == d + 1 {
            g.q
        } else if idx < d + 2 + d * d {
            let k = idx - d - 2;
            g.q11[(k / d, k % d)]
        } else {
            g.q21[idx - d - 2 - d * d]
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let d = 3;
        let n_coords = 2 * d + 2 + d * d;
        let modes = [LossMode::Fs, LossMode::Zs, LossMode::Mixed { omega: 0.37 }];
        let mut checks = 0;
        for (i, mode) in modes.iter().enumerate() {
            for trial in 0..3 {
                let params = random_params(100 + trial, d);
                let batch = random_batch(200 + trial, d, 4, 5);
                let (_, grad) = loss_and_grad(&params, &batch, *mode).unwrap();
                for idx in 0..n_coords {
                    let h = 1e-5;
                    let (lp, _) =
                        loss_and_grad(&nudge(&params, idx, h), &batch, *mode).unwrap();
                    let (lm, _) =
                        loss_and_grad(&nudge(&params, idx, -h), &batch, *mode).unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    let an = grad_coord(&grad, idx, d);
                    let denom = fd.abs().max(an.abs()).max(1.0);
                    assert!(
                        (fd - an).abs() / denom < 1e-5,
                        "mode {i} trial {trial} coord {idx}: fd {fd} vs analytic {an}"
                    );
                    checks += 1;
                }
            }
        }
        assert!(checks >= 100);
    }

    #[test]
    fn zs_loss_with_zero_value_blocks() {
        let d = 4;
        let mut params = AttentionParams::zeros(d);
        params.q11 = Mat::identity(d);
        params.q = 0.5;
        let batch = random_batch(7, d, 0, 32);
        let (loss, grad) = loss_and_grad(&params, &batch, LossMode::Zs).unwrap();
        let mean_y2: f64 =
            batch.iter().map(|p| p.query_y * p.query_y).sum::<f64>() / batch.len() as f64;
        assert_abs_diff_eq!(loss, mean_y2, epsilon = 1e-12);
        assert_eq!(grad.v22, 0.0);
    }

    #[test]
    fn zs_loss_zero_at_noiseless_optimum() {
        let task = TaskSpec::new(vec![1.0, -0.5, 0.3], identity_sigma(3), 0.0);
        let params = theory::optimal_full_ft(&task.theta, 0.8).unwrap();
        let mut inputs = Stream::new(3, STREAM_PROMPTS);
        let mut noise = Stream::new(3, STREAM_NOISE);
        let batch: Vec<Prompt> =
            (0..16).map(|_| sample_prompt(&task, 0, &mut inputs, &mut noise)).collect();
        let (loss, grad) = loss_and_grad(&params, &batch, LossMode::Zs).unwrap();
        assert!(loss < 1e-24);
        assert!(grad.v21.iter().all(|g| g.abs() < 1e-10));
        assert!(grad.q.abs() < 1e-10);
    }

    #[test]
    fn empty_batch_rejected() {
        let params = AttentionParams::zeros(2);
        assert!(matches!(
            loss_and_grad(&params, &[], LossMode::Zs),
            Err(TrainError::EmptyBatch)
        ));
    }

    #[test]
    fn mask_fidelity() {
        let task = default_task();
        let snapshot = theory::optimal_pretrain(Some(20), &identity_sigma(5));
        let config = TrainConfig {
            regime: Regime::ValueZs,
            mask: None,
            m_or_n: 20,
            steps: 50,
            batch: 16,
            step_size: 1e-2,
            anneal: None,
            seed: 5,
            init: Init::Snapshot(snapshot.clone()),
        };
        let trace = train(&config, &TrainTarget::FixedTask(task)).unwrap();
        // Q-side blocks untouched bit for bit.
        assert_eq!(trace.params.q11, snapshot.q11);
        assert_eq!(trace.params.q, snapshot.q);
        assert_eq!(trace.params.q21, snapshot.q21);
        assert_eq!(trace.params.v11, snapshot.v11);
        assert_eq!(trace.params.v12, snapshot.v12);
        // Value blocks moved.
        assert_ne!(trace.params.v21, snapshot.v21);
        assert_eq!(trace.losses.len(), 50);
        assert_eq!(trace.ws.len(), 50);
    }

    #[test]
    fn fixed_batch_descent_never_increases() {
        let d = 5;
        let batch = random_batch(11, d, 0, 64);
        let mut params = random_params(12, d);
        let mask = BlockMask::all();
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let (loss, grad) = loss_and_grad(&params, &batch, LossMode::Zs).unwrap();
            assert!(loss <= prev + 1e-12, "loss {loss} rose above {prev}");
            apply_update(&mut params, &grad, &mask, 1e-3);
            prev = loss;
        }
    }

    #[test]
    fn anneal_endpoint_matches_pure_zs() {
        let d = 4;
        let params = random_params(21, d);
        let batch = random_batch(22, d, 6, 8);
        let (l_mixed, g_mixed) =
            loss_and_grad(&params, &batch, LossMode::Mixed { omega: 0.0 }).unwrap();
        let (l_zs, g_zs) = loss_and_grad(&params, &batch, LossMode::Zs).unwrap();
        assert_eq!(l_mixed.to_bits(), l_zs.to_bits());
        assert_eq!(g_mixed.q11, g_zs.q11);

        // In a value_zs_fs run past the horizon, omega is exactly 0.
        let (omega0, horizon) = (10.0_f64, 40usize);
        for step in [40usize, 41, 100] {
            let frac = 1.0 - step as f64 / horizon as f64;
            assert_eq!(omega0 * frac.max(0.0), 0.0);
        }
    }

    #[test]
    fn config_validation() {
        let base = TrainConfig {
            regime: Regime::ValueZs,
            mask: None,
            m_or_n: 20,
            steps: 10,
            batch: 4,
            step_size: 1e-2,
            anneal: Some((10.0, 5)),
            seed: 1,
            init: Init::Zeros,
        };
        assert!(matches!(
            train(&base, &TrainTarget::FixedTask(default_task())),
            Err(TrainError::InvalidConfig(_))
        ));
        let mut c = base.clone();
        c.regime = Regime::ValueZsFs;
        assert!(train(&c, &TrainTarget::FixedTask(default_task())).is_ok());
        c.anneal = None;
        assert!(matches!(
            train(&c, &TrainTarget::FixedTask(default_task())),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn divergence_detected() {
        let task = default_task();
        let config = TrainConfig {
            regime: Regime::FullZs,
            mask: None,
            m_or_n: 0,
            steps: 200,
            batch: 8,
            step_size: 50.0,
            anneal: None,
            seed: 9,
            init: Init::SmallGaussian(1.0),
        };
        assert!(matches!(
            train(&config, &TrainTarget::FixedTask(task)),
            Err(TrainError::Diverged { .. })
        ));
    }

    #[test]
    fn extract_w_round_trips() {
        let theta0 = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        let p = theory::optimal_value_ft(&theta0, 0.77, &identity_sigma(5)).unwrap();
        assert_abs_diff_eq!(extract_w(&p, &theta0, Regime::ValueZs).unwrap(), 0.77);
        let p = theory::optimal_full_ft(&theta0, 0.52).unwrap();
        assert_abs_diff_eq!(extract_w(&p, &theta0, Regime::FullZs).unwrap(), 0.52);
        assert!(matches!(
            extract_w(&p, &[0.0; 5], Regime::FullZs),
            Err(TrainError::ZeroTheta)
        ));
    }

    #[test]
    fn full_zs_fine_tune_reaches_noise_floor() {
        let task = default_task();
        let snapshot = theory::optimal_pretrain(Some(1000), &identity_sigma(5));
        let config = TrainConfig {
            regime: Regime::FullZs,
            mask: None,
            m_or_n: 0,
            steps: 4000,
            batch: 256,
            step_size: 1e-2,
            anneal: None,
            seed: 42,
            init: Init::Snapshot(snapshot),
        };
        let trace = train(&config, &TrainTarget::FixedTask(task.clone())).unwrap();
        let zs = theory::zs_error(&trace.params, &task);
        assert!((zs - 0.1).abs() < 1e-3, "zs error {zs}");
    }

    #[test]
    fn value_zs_fine_tune_reaches_its_minimum() {
        let task = default_task();
        let snapshot = theory::optimal_pretrain(Some(1000), &identity_sigma(5));
        let config = TrainConfig {
            regime: Regime::ValueZs,
            mask: None,
            m_or_n: 0,
            steps: 3000,
            batch: 256,
            step_size: 1e-2,
            anneal: None,
            seed: 43,
            init: Init::Snapshot(snapshot),
        };
        let trace = train(&config, &TrainTarget::FixedTask(task.clone())).unwrap();
        let zs = theory::zs_error(&trace.params, &task);
        let target = 0.1 + 2.0 / 9.0;
        assert!((zs - target).abs() / target < 0.02, "zs error {zs} vs {target}");
    }

    #[test]
    fn qk_zs_is_stationary_at_pretrained_snapshot() {
        // At the pretrained snapshot v21 = 0, so the zero-shot loss gradient
        // with respect to every Q-side block vanishes: training changes
        // nothing in expectation or in any single batch.
        let task = default_task();
        let snapshot = theory::optimal_pretrain(Some(1000), &identity_sigma(5));
        let config = TrainConfig {
            regime: Regime::QkZs,
            mask: None,
            m_or_n: 0,
            steps: 100,
            batch: 32,
            step_size: 1e-2,
            anneal: None,
            seed: 44,
            init: Init::Snapshot(snapshot.clone()),
        };
        let trace = train(&config, &TrainTarget::FixedTask(task)).unwrap();
        assert_eq!(trace.params.q11, snapshot.q11);
        assert_eq!(trace.params.q, snapshot.q);
        assert_eq!(trace.params.q21, snapshot.q21);
    }

    #[test]
    fn train_is_seed_deterministic() {
        let task = default_task();
        let config = TrainConfig {
            regime: Regime::ValueZs,
            mask: None,
            m_or_n: 0,
            steps: 30,
            batch: 8,
            step_size: 1e-2,
            anneal: None,
            seed: 77,
            init: Init::SmallGaussian(1e-2),
        };
        let a = train(&config, &TrainTarget::FixedTask(task.clone())).unwrap();
        let b = train(&config, &TrainTarget::FixedTask(task)).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params.v21, b.params.v21);
    }

    #[test]
    fn eval_trained_pairs_theory_and_sampling() {
        let task = default_task();
        let p = theory::optimal_pretrain(None, &identity_sigma(5));
        let report = eval_trained(&p, &task, &[0, 5, 20], 20_000, 55);
        assert_eq!(report.rows.len(), 3);
        assert_abs_diff_eq!(report.rows[0].theory, 1.1, epsilon = 1e-12);
        for row in &report.rows {
            assert!(
                (row.mc.mean - row.theory).abs() <= 5.0 * row.mc.std_error,
                "{row:?}"
            );
        }
    }
}

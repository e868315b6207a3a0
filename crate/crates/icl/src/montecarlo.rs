//! Sampling-based oracles: empirical test errors and empirical moment
//! estimates, each with standard errors from the same pass.
//!
//! Determinism contract: every sample owns a counter-derived random stream,
//! samples are grouped into fixed-size chunks, and chunk accumulators are
//! merged by a pairwise tree in counter order. Results are therefore
//! bit-identical for any worker count.

use rayon::prelude::*;
use thiserror::Error;

use crate::attention::{predict_fs, predict_netfs, predict_zs, AttentionParams};
use crate::linalg::{EigenDecomp, Mat, SymMatrix};
use crate::taskgen::{sample_prompt, Stream, TaskSpec, STREAM_NOISE, STREAM_PROMPTS};

/// Fixed chunk size of the deterministic reduction.
const CHUNK: u64 = 1024;

/// Errors raised by the sampling oracles.
#[derive(Debug, Error)]
pub enum McError {
    /// The moment-estimator kind string is not recognized.
    #[error("unknown moment kind: {0}")]
    UnknownKind(String),
    /// The chosen kind needs an input that was not supplied.
    #[error("moment kind {kind} requires input {input}")]
    MissingInput { kind: &'static str, input: &'static str },
}

/// A sample mean with its standard error and provenance.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// A named estimate, used when one estimator produces several tracks
/// (matrix entries, covariance components).
#[derive(Debug, Clone, serde::Serialize)]
pub struct LabeledEstimate {
    pub label: String,
    pub estimate: McEstimate,
}

/// Running mean/variance accumulator (Welford), mergeable across chunks.
#[derive(Debug, Clone, Copy)]
struct Welford {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn new() -> Self {
        Welford { count: 0, mean: 0.0, m2: 0.0 }
    }

    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(a: Welford, b: Welford) -> Welford {
        if a.count == 0 {
            return b;
        }
        if b.count == 0 {
            return a;
        }
        let count = a.count + b.count;
        let delta = b.mean - a.mean;
        let mean = a.mean + delta * b.count as f64 / count as f64;
        let m2 = a.m2 + b.m2 + delta * delta * a.count as f64 * b.count as f64 / count as f64;
        Welford { count, mean, m2 }
    }

    fn estimate(&self, seed: u64) -> McEstimate {
        let n = self.count as f64;
        let var = if self.count > 1 { self.m2 / (n - 1.0) } else { 0.0 };
        McEstimate {
            mean: self.mean,
            std_error: (var / n).sqrt(),
            n_samples: self.count as usize,
            seed,
        }
    }
}

/// Per-sample random streams: the sample counter is folded into the seed so
/// partitioning across workers cannot change any draw.
fn sample_streams(seed: u64, counter: u64) -> (Stream, Stream) {
    (
        Stream::new(seed ^ counter, STREAM_PROMPTS),
        Stream::new(seed ^ counter, STREAM_NOISE),
    )
}

/// Run `n_samples` evaluations of `f` (writing `width` tracks per sample)
/// under the deterministic chunked reduction.
fn run_chunked<F>(n_samples: usize, width: usize, f: F) -> Vec<Welford>
where
    F: Fn(u64, &mut [f64]) + Sync,
{
    let total = n_samples as u64;
    let n_chunks = total.div_ceil(CHUNK);
    let mut states: Vec<Vec<Welford>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![Welford::new(); width];
            let mut values = vec![0.0; width];
            let lo = chunk * CHUNK;
            let hi = (lo + CHUNK).min(total);
            for counter in lo..hi {
                f(counter, &mut values);
                for (a, &v) in acc.iter_mut().zip(values.iter()) {
                    a.push(v);
                }
            }
            acc
        })
        .collect();

    // Pairwise tree merge in chunk order.
    while states.len() > 1 {
        let mut next = Vec::with_capacity(states.len().div_ceil(2));
        let mut it = states.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(
                    a.into_iter().zip(b).map(|(x, y)| Welford::merge(x, y)).collect(),
                ),
                None => next.push(a),
            }
        }
        states = next;
    }
    states.pop().unwrap_or_else(|| vec![Welford::new(); width])
}

/// Empirical n-shot test error of a model on a task; n = 0 evaluates the
/// zero-shot prediction on a bare query.
pub fn mc_test_error(
    params: &AttentionParams,
    task: &TaskSpec,
    n: usize,
    n_samples: usize,
    seed: u64,
) -> McEstimate {
    let acc = run_chunked(n_samples, 1, |counter, out| {
        let (mut inputs, mut noise) = sample_streams(seed, counter);
        let err = if n == 0 {
            let x = task.sample_x(&mut inputs);
            let y = task.sample_y(&x, &mut noise);
            predict_zs(&x, params) - y
        } else {
            let prompt = sample_prompt(task, n, &mut inputs, &mut noise);
            predict_fs(&prompt, params).expect("n >= 1") - prompt.query_y
        };
        out[0] = err * err;
    });
    acc[0].estimate(seed)
}

/// Per-n application of [`mc_test_error`] over a grid of context lengths.
pub fn mc_sweep(
    params: &AttentionParams,
    task: &TaskSpec,
    n_list: &[usize],
    n_samples: usize,
    seed: u64,
) -> Vec<McEstimate> {
    n_list
        .iter()
        .map(|&n| mc_test_error(params, task, n, n_samples, seed))
        .collect()
}

/// Inputs of the moment estimators; only the fields used by the requested
/// kind need to be meaningful.
#[derive(Debug, Clone)]
pub struct MomentInputs {
    /// Input covariance (all kinds).
    pub sigma: EigenDecomp,
    /// Symmetric coefficient matrices (wishart_quad uses `a`; quartic uses
    /// `a`, `b`; sextic_scalar uses `a`, `b`, `c`; sextic_matrix uses the
    /// possibly-asymmetric `a_gen`, `b_gen`).
    pub a: Option<SymMatrix>,
    pub b: Option<SymMatrix>,
    pub c: Option<SymMatrix>,
    pub a_gen: Option<Mat>,
    pub b_gen: Option<Mat>,
    /// Wishart sample count / prompt context length.
    pub n: usize,
    /// Model and task for prediction_moments.
    pub params: Option<AttentionParams>,
    pub task: Option<TaskSpec>,
}

impl MomentInputs {
    /// Inputs with only the covariance set.
    pub fn with_sigma(sigma: EigenDecomp) -> Self {
        MomentInputs {
            sigma,
            a: None,
            b: None,
            c: None,
            a_gen: None,
            b_gen: None,
            n: 1,
            params: None,
            task: None,
        }
    }
}

fn require<T>(x: &Option<T>, kind: &'static str, input: &'static str) -> Result<T, McError>
where
    T: Clone,
{
    x.clone().ok_or(McError::MissingInput { kind, input })
}

fn sample_gaussian(sigma: &EigenDecomp, stream: &mut Stream) -> Vec<f64> {
    let d = sigma.dim();
    let z = stream.standard_normal_vec(d);
    let mut x = vec![0.0; d];
    for i in 0..d {
        for (k, lam) in sigma.eigenvalues.iter().enumerate() {
            x[i] += sigma.rotation[(i, k)] * lam.sqrt() * z[k];
        }
    }
    x
}

fn quad(x: &[f64], a: &Mat) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            acc += x[i] * a[(i, j)] * x[j];
        }
    }
    acc
}

/// Unbiased sample-mean estimators of the moment identities. Matrix-valued
/// kinds return one labeled estimate per entry (`e_i_j`); scalar kinds return
/// a single `mean` track; `prediction_moments` returns the six (co)variance
/// tracks of [`crate::theory::MomentReport`].
pub fn mc_moment(
    kind: &str,
    inputs: &MomentInputs,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<LabeledEstimate>, McError> {
    let sigma = &inputs.sigma;
    let d = sigma.dim();
    match kind {
        "wishart_quad" => {
            let a = require(&inputs.a, "wishart_quad", "a")?;
            let n = inputs.n;
            let acc = run_chunked(n_samples, d * d, |counter, out| {
                let (mut inp, _) = sample_streams(seed, counter);
                let mut s = Mat::zeros(d, d);
                for _ in 0..n {
                    let x = sample_gaussian(sigma, &mut inp);
                    for i in 0..d {
                        for j in 0..d {
                            s[(i, j)] += x[i] * x[j];
                        }
                    }
                }
                let sas = s.mul(a.as_mat()).mul(&s);
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] = sas[(i, j)];
                    }
                }
            });
            Ok(label_matrix(&acc, d, seed))
        }
        "quartic" => {
            let a = require(&inputs.a, "quartic", "a")?;
            let b = require(&inputs.b, "quartic", "b")?;
            let acc = run_chunked(n_samples, 1, |counter, out| {
                let (mut inp, _) = sample_streams(seed, counter);
                let x = sample_gaussian(sigma, &mut inp);
                out[0] = quad(&x, a.as_mat()) * quad(&x, b.as_mat());
            });
            Ok(vec![LabeledEstimate { label: "mean".into(), estimate: acc[0].estimate(seed) }])
        }
        "sextic_scalar" => {
            let a = require(&inputs.a, "sextic_scalar", "a")?;
            let b = require(&inputs.b, "sextic_scalar", "b")?;
            let c = require(&inputs.c, "sextic_scalar", "c")?;
            let acc = run_chunked(n_samples, 1, |counter, out| {
                let (mut inp, _) = sample_streams(seed, counter);
                let x = sample_gaussian(sigma, &mut inp);
                out[0] =
                    quad(&x, a.as_mat()) * quad(&x, b.as_mat()) * quad(&x, c.as_mat());
            });
            Ok(vec![LabeledEstimate { label: "mean".into(), estimate: acc[0].estimate(seed) }])
        }
        "sextic_matrix" => {
            let a = require(&inputs.a_gen, "sextic_matrix", "a_gen")?;
            let b = require(&inputs.b_gen, "sextic_matrix", "b_gen")?;
            let acc = run_chunked(n_samples, d * d, |counter, out| {
                let (mut inp, _) = sample_streams(seed, counter);
                let x = sample_gaussian(sigma, &mut inp);
                let xa = quad(&x, &a);
                let xb = quad(&x, &b);
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] = x[i] * xa * xb * x[j];
                    }
                }
            });
            Ok(label_matrix(&acc, d, seed))
        }
        "prediction_moments" => {
            let params = require(&inputs.params, "prediction_moments", "params")?;
            let task = require(&inputs.task, "prediction_moments", "task")?;
            let n = inputs.n;
            let acc = run_chunked(n_samples, 6, |counter, out| {
                let (mut inp, mut noise) = sample_streams(seed, counter);
                let prompt = sample_prompt(&task, n, &mut inp, &mut noise);
                let netfs = predict_netfs(&prompt, &params).expect("n >= 1");
                let zs = predict_zs(&prompt.query_x, &params);
                let y = prompt.query_y;
                out[0] = netfs * netfs;
                out[1] = zs * zs;
                out[2] = y * y;
                out[3] = netfs * zs;
                out[4] = netfs * y;
                out[5] = zs * y;
            });
            let labels =
                ["var_netfs", "var_zs", "var_y", "cov_netfs_zs", "cov_netfs_y", "cov_zs_y"];
            Ok(labels
                .iter()
                .zip(acc)
                .map(|(l, w)| LabeledEstimate { label: (*l).into(), estimate: w.estimate(seed) })
                .collect())
        }
        other => Err(McError::UnknownKind(other.to_string())),
    }
}

fn label_matrix(acc: &[Welford], d: usize, seed: u64) -> Vec<LabeledEstimate> {
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            out.push(LabeledEstimate {
                label: format!("e_{i}_{j}"),
                estimate: acc[i * d + j].estimate(seed),
            });
        }
    }
    out
}

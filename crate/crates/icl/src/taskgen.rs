//! Sampling of tasks, datasets, and prompt matrices.
//!
//! A task is a linear-regression problem: inputs x ~ N(0, Sigma), responses
//! y = theta^T x + e with e ~ N(0, sigma^2). Prompts stack n context pairs
//! plus one response-masked query column. All randomness flows through
//! counter-based streams so that parallel consumers cannot perturb results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{EigenDecomp, Mat};

/// Stream index reserved for drawing task vectors.
pub const STREAM_TASKS: u64 = 0;
/// Stream index reserved for drawing prompt inputs.
pub const STREAM_PROMPTS: u64 = 1;
/// Stream index reserved for drawing response noise.
pub const STREAM_NOISE: u64 = 2;

/// Counter-based random stream: identical `(seed, stream)` pairs always
/// produce identical draws, independent of how many other streams exist or
/// which thread advances them. Built on ChaCha, a counter-mode generator
/// with 2^64 independent streams per seed.
#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    /// Open the stream identified by `(seed, stream)`.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Stream { rng }
    }

    /// One standard-normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// A vector of iid standard-normal draws.
    pub fn standard_normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.standard_normal()).collect()
    }
}

/// Prior over task vectors.
#[derive(Debug, Clone)]
pub enum TaskPrior {
    /// theta ~ N(0, I_d), the pretraining prior.
    StandardNormal,
    /// A fixed target task vector, used for fine-tuning.
    Fixed(Vec<f64>),
}

/// A regression task: task vector, input covariance (held as an
/// eigendecomposition so per-eigenvalue formulas stay cheap), and noise
/// variance.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    /// Task vector theta.
    pub theta: Vec<f64>,
    /// Eigendecomposition of the input covariance Sigma.
    pub sigma: EigenDecomp,
    /// Response noise variance sigma^2.
    pub noise_var: f64,
}

impl TaskSpec {
    /// Construct, checking that Sigma is positive definite and the noise
    /// variance is non-negative.
    pub fn new(theta: Vec<f64>, sigma: EigenDecomp, noise_var: f64) -> Self {
        assert_eq!(theta.len(), sigma.dim(), "theta and Sigma dimension mismatch");
        assert!(
            sigma.eigenvalues.iter().all(|&l| l > 0.0),
            "Sigma must be positive definite"
        );
        assert!(noise_var >= 0.0, "noise variance must be non-negative");
        TaskSpec { theta, sigma, noise_var }
    }

    /// Input dimension d.
    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Materialize Sigma as a dense matrix.
    pub fn sigma_matrix(&self) -> Mat {
        self.sigma.reconstruct()
    }

    /// Same covariance and noise, different task vector.
    pub fn with_theta(&self, theta: Vec<f64>) -> TaskSpec {
        TaskSpec::new(theta, self.sigma.clone(), self.noise_var)
    }

    /// Draw one input x ~ N(0, Sigma) as U diag(sqrt(lambda)) z with z
    /// standard normal, reusing the stored eigendecomposition (no Cholesky).
    pub fn sample_x(&self, stream: &mut Stream) -> Vec<f64> {
        let d = self.dim();
        let z = stream.standard_normal_vec(d);
        let mut x = vec![0.0; d];
        for i in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += self.sigma.rotation[(i, k)] * self.sigma.eigenvalues[k].sqrt() * z[k];
            }
            x[i] = s;
        }
        x
    }

    /// Draw the response for input `x`: theta^T x + e with e ~ N(0, sigma^2).
    pub fn sample_y(&self, x: &[f64], noise: &mut Stream) -> f64 {
        let mean: f64 = self.theta.iter().zip(x).map(|(t, v)| t * v).sum();
        mean + self.noise_var.sqrt() * noise.standard_normal()
    }
}

/// n context pairs plus one masked query. The held-out query response is
/// stored so error evaluation never resamples, but the matrix view masks it.
#[derive(Debug, Clone)]
pub struct Prompt {
    /// Context inputs x_1..x_n.
    pub context_x: Vec<Vec<f64>>,
    /// Context responses y_1..y_n.
    pub context_y: Vec<f64>,
    /// Query input.
    pub query_x: Vec<f64>,
    /// Held-out query response (masked to 0 in the matrix view).
    pub query_y: f64,
}

impl Prompt {
    /// Number of context examples (0 encodes the zero-shot prompt).
    pub fn n(&self) -> usize {
        self.context_x.len()
    }

    /// Input dimension d.
    pub fn dim(&self) -> usize {
        self.query_x.len()
    }
}

/// Draw a task from the given prior.
pub fn sample_task(
    prior: &TaskPrior,
    sigma: &EigenDecomp,
    noise_var: f64,
    stream: &mut Stream,
) -> TaskSpec {
    let d = sigma.dim();
    let theta = match prior {
        TaskPrior::StandardNormal => stream.standard_normal_vec(d),
        TaskPrior::Fixed(theta0) => {
            assert_eq!(theta0.len(), d, "fixed task vector has wrong dimension");
            theta0.clone()
        }
    };
    TaskSpec::new(theta, sigma.clone(), noise_var)
}

/// Draw a prompt with `n` context pairs and one query from the task's data
/// distribution.
pub fn sample_prompt(task: &TaskSpec, n: usize, inputs: &mut Stream, noise: &mut Stream) -> Prompt {
    let mut context_x = Vec::with_capacity(n);
    let mut context_y = Vec::with_capacity(n);
    for _ in 0..n {
        let x = task.sample_x(inputs);
        let y = task.sample_y(&x, noise);
        context_x.push(x);
        context_y.push(y);
    }
    let query_x = task.sample_x(inputs);
    let query_y = task.sample_y(&query_x, noise);
    Prompt { context_x, context_y, query_x, query_y }
}

/// Assemble the (d+2) x (n+1) prompt matrix: row 0 all ones, rows 1..d the
/// inputs, row d+1 the responses with the query's response masked to zero.
pub fn prompt_matrix(p: &Prompt) -> Mat {
    let d = p.dim();
    let n = p.n();
    let mut z = Mat::zeros(d + 2, n + 1);
    for i in 0..n {
        z[(0, i)] = 1.0;
        for r in 0..d {
            z[(1 + r, i)] = p.context_x[i][r];
        }
        z[(d + 1, i)] = p.context_y[i];
    }
    z[(0, n)] = 1.0;
    for r in 0..d {
        z[(1 + r, n)] = p.query_x[r];
    }
    // Query response entry stays 0: masked by construction.
    z
}

/// Convenience: identity-covariance eigendecomposition in dimension d.
pub fn identity_sigma(d: usize) -> EigenDecomp {
    EigenDecomp { rotation: Mat::identity(d), eigenvalues: vec![1.0; d] }
}

/// Convenience: diagonal covariance eigendecomposition (values must be
/// positive; they are sorted descending as the invariant requires).
pub fn diagonal_sigma(lambdas: &[f64]) -> EigenDecomp {
    let d = lambdas.len();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| lambdas[j].partial_cmp(&lambdas[i]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&k| lambdas[k]).collect();
    let rotation = Mat::from_fn(d, d, |i, j| if order[j] == i { 1.0 } else { 0.0 });
    EigenDecomp { rotation, eigenvalues }
}

//! Closed-form results: Gaussian/Wishart moment identities, exact zero- and
//! few-shot test errors, optimal-parameter constructors, the ZS-vs-FS
//! condition, context-length thresholds, and the (alpha, beta, gamma)
//! gradient-dynamics analysis.

use thiserror::Error;

use crate::attention::AttentionParams;
use crate::linalg::{
    dot, quad_form, spd_inverse, trace_prod, EigenDecomp, LinalgError, Mat, SymMatrix,
};
use crate::taskgen::TaskSpec;

/// Errors raised by closed-form evaluations.
#[derive(Debug, Error)]
pub enum TheoryError {
    /// Propagated linear-algebra failure (dimension, convergence, SPD).
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    /// Operand shapes are incompatible.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// A few-shot quantity was requested with no context examples.
    #[error("few-shot quantities require n >= 1")]
    EmptyContext,
    /// The ZS-vs-FS condition applies only to v22 = 1, q21 = 0, and
    /// symmetric positive definite Q11.
    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),
    /// The full fine-tuning family requires w > 0.
    #[error("full fine-tuning parameters require w > 0")]
    NonPositiveW,
    /// The value fine-tuning family requires w != 0.
    #[error("value fine-tuning parameters require w != 0")]
    ZeroW,
    /// The context-length threshold is undefined when lambda_1 |theta|^2 = 0.
    #[error("threshold undefined: top eigenvalue times task norm is zero")]
    ZeroSignal,
}

fn check_same_dim(a: &SymMatrix, b: &SymMatrix) -> Result<(), TheoryError> {
    if a.dim() != b.dim() {
        return Err(TheoryError::DimensionMismatch(format!(
            "{} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Moments group
// ---------------------------------------------------------------------------

/// Mean of the quadratic form S A S for S = sum of n outer products x x^T
/// with x ~ N(0, Sigma): n tr(A Sigma) Sigma + n(n+1) Sigma A Sigma.
pub fn wishart_quadratic_mean(
    sigma: &SymMatrix,
    n: usize,
    a: &SymMatrix,
) -> Result<Mat, TheoryError> {
    check_same_dim(sigma, a)?;
    let s = sigma.as_mat();
    let t = trace_prod(a.as_mat(), s)?;
    let sas = s.mul(a.as_mat()).mul(s);
    let nf = n as f64;
    Ok(s.scale(nf * t).add(&sas.scale(nf * (nf + 1.0))))
}

/// E[(x^T A x)(x^T B x)] for x ~ N(0, Sigma) and symmetric A, B:
/// tr(A Sigma) tr(B Sigma) + 2 tr(A Sigma B Sigma).
pub fn gaussian_quartic_mean(
    sigma: &SymMatrix,
    a: &SymMatrix,
    b: &SymMatrix,
) -> Result<f64, TheoryError> {
    check_same_dim(sigma, a)?;
    check_same_dim(sigma, b)?;
    let s = sigma.as_mat();
    let as_ = a.as_mat().mul(s);
    let bs = b.as_mat().mul(s);
    Ok(as_.trace() * bs.trace() + 2.0 * trace_prod(&as_, &bs)?)
}

/// E[(x^T A x)(x^T B x)(x^T C x)] for x ~ N(0, Sigma), symmetric A, B, C.
pub fn gaussian_sextic_scalar(
    sigma: &SymMatrix,
    a: &SymMatrix,
    b: &SymMatrix,
    c: &SymMatrix,
) -> Result<f64, TheoryError> {
    check_same_dim(sigma, a)?;
    check_same_dim(sigma, b)?;
    check_same_dim(sigma, c)?;
    let s = sigma.as_mat();
    let as_ = a.as_mat().mul(s);
    let bs = b.as_mat().mul(s);
    let cs = c.as_mat().mul(s);
    let (ta, tb, tc) = (as_.trace(), bs.trace(), cs.trace());
    Ok(ta * tb * tc
        + 2.0 * ta * trace_prod(&bs, &cs)?
        + 2.0 * tb * trace_prod(&as_, &cs)?
        + 2.0 * tc * trace_prod(&as_, &bs)?
        + 8.0 * as_.mul(&bs).mul(&cs).trace())
}

/// E[x x^T A x x^T B x x^T] for x ~ N(0, Sigma) and arbitrary A, B:
/// the seven-term general expression.
pub fn gaussian_sextic_matrix(sigma: &SymMatrix, a: &Mat, b: &Mat) -> Result<Mat, TheoryError> {
    let d = sigma.dim();
    if a.rows() != d || a.cols() != d || b.rows() != d || b.cols() != d {
        return Err(TheoryError::DimensionMismatch(format!(
            "Sigma dim {} vs A {}x{}, B {}x{}",
            d,
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let s = sigma.as_mat();
    let ta = trace_prod(a, s)?;
    let tb = trace_prod(b, s)?;
    let asym = a.add(&a.transpose());
    let bsym = b.add(&b.transpose());
    let tab = a.mul(s).mul(b).mul(s).trace();
    let tabt = a.mul(s).mul(&b.transpose()).mul(s).trace();
    let s_bsym_s = s.mul(&bsym).mul(s);
    let s_asym_s = s.mul(&asym).mul(s);
    Ok(s
        .scale(ta * tb + tab + tabt)
        .add(&s_bsym_s.scale(ta))
        .add(&s_asym_s.scale(tb))
        .add(&s_asym_s.mul(&bsym).mul(s))
        .add(&s_bsym_s.mul(&asym).mul(s)))
}

/// The reduced five-term form of the sextic matrix mean for B = A^T.
pub fn gaussian_sextic_matrix_reduced(sigma: &SymMatrix, a: &Mat) -> Result<Mat, TheoryError> {
    let d = sigma.dim();
    if a.rows() != d || a.cols() != d {
        return Err(TheoryError::DimensionMismatch(format!(
            "Sigma dim {} vs A {}x{}",
            d,
            a.rows(),
            a.cols()
        )));
    }
    let s = sigma.as_mat();
    let ta = trace_prod(a, s)?;
    let taat = a.mul(s).mul(&a.transpose()).mul(s).trace();
    let taa = a.mul(s).mul(a).mul(s).trace();
    let asym = a.add(&a.transpose());
    let s_asym_s = s.mul(&asym).mul(s);
    Ok(s
        .scale(ta * ta + taat + taa)
        .add(&s_asym_s.scale(2.0 * ta))
        .add(&s_asym_s.mul(&asym).mul(s).scale(2.0)))
}

// ---------------------------------------------------------------------------
// Error group
// ---------------------------------------------------------------------------

/// Joint covariance of a data pair (x, y) under a task:
/// [[Sigma, Sigma theta], [theta^T Sigma, theta^T Sigma theta + sigma^2]].
#[derive(Debug, Clone)]
pub struct JointCov {
    /// The (d+1) x (d+1) covariance matrix.
    pub mat: Mat,
}

/// Assemble the joint (x, y) covariance of a task.
pub fn joint_cov(task: &TaskSpec) -> JointCov {
    let d = task.dim();
    let sig = task.sigma_matrix();
    let st = sig.mul_vec(&task.theta);
    let tst = dot(&task.theta, &st);
    let mut m = Mat::zeros(d + 1, d + 1);
    for i in 0..d {
        for j in 0..d {
            m[(i, j)] = sig[(i, j)];
        }
        m[(i, d)] = st[i];
        m[(d, i)] = st[i];
    }
    m[(d, d)] = tst + task.noise_var;
    JointCov { mat: m }
}

/// The six (co)variances of the context statistic, the zero-shot prediction,
/// and the response, for arbitrary blocks.
#[derive(Debug, Clone, Copy)]
pub struct MomentReport {
    pub var_netfs: f64,
    pub var_zs: f64,
    pub var_y: f64,
    pub cov_netfs_zs: f64,
    pub cov_netfs_y: f64,
    pub cov_zs_y: f64,
}

/// Variance of the zero-shot prediction and its covariance with y, for
/// arbitrary (possibly asymmetric) Q11 and nonzero q.
fn zs_var_and_cov(params: &AttentionParams, task: &TaskSpec) -> (f64, f64) {
    let sig = task.sigma_matrix();
    let sv = sig.mul_vec(&params.v21);
    let vsv = dot(&params.v21, &sv);
    let q11s = params.q11.mul(&sig);
    let q11ts = params.q11.transpose().mul(&sig);
    let t1 = q11s.trace();
    let t2 = trace_prod(&q11s, &q11s).expect("square");
    let t2t = trace_prod(&q11s, &q11ts).expect("square");
    let vsqsv = dot(&sv, &params.q11.mul_vec(&sv));
    let g = params.q11.add(&params.q11.transpose());
    let gv = g.mul_vec(&sv);
    let q = params.q;

    let var_zs = (t1 * t1 + t2t + t2) * vsv
        + 4.0 * t1 * vsqsv
        + 2.0 * dot(&gv, &sig.mul_vec(&gv))
        + 2.0 * q * t1 * vsv
        + 4.0 * q * vsqsv
        + q * q * vsv;

    let st = sig.mul_vec(&task.theta);
    let gst = g.mul_vec(&st);
    let cov_zs_y =
        dot(&params.v21, &sig.mul_vec(&gst)) + (t1 + q) * dot(&params.v21, &st);
    (var_zs, cov_zs_y)
}

/// Evaluate all six (co)variances for a prompt with n context examples.
pub fn prediction_moments(
    params: &AttentionParams,
    task: &TaskSpec,
    n: usize,
) -> Result<MomentReport, TheoryError> {
    if params.d != task.dim() {
        return Err(TheoryError::DimensionMismatch(format!(
            "params dim {} vs task dim {}",
            params.d,
            task.dim()
        )));
    }
    if n == 0 {
        return Err(TheoryError::EmptyContext);
    }
    let d = params.d;
    let nf = n as f64;
    let sig = task.sigma_matrix();
    let jc = joint_cov(task).mat;

    // M = [Q11; q21^T] is (d+1) x d; W = [v21; v22].
    let mut m_mat = Mat::zeros(d + 1, d);
    for i in 0..d {
        for j in 0..d {
            m_mat[(i, j)] = params.q11[(i, j)];
        }
        m_mat[(d, i)] = params.q21[i];
    }
    let mut w = params.v21.clone();
    w.push(params.v22);

    let mo = m_mat.mul(&sig).mul(&m_mat.transpose());
    let t_m = trace_prod(&mo, &jc)?;
    let jw = jc.mul_vec(&w);
    let wjw = dot(&w, &jw);
    let mid = dot(&jw, &mo.mul_vec(&jw));
    let var_netfs =
        t_m * wjw / nf + (nf + 1.0) / nf * mid + params.q * params.q / nf * wjw;

    let (var_zs, cov_zs_y) = zs_var_and_cov(params, task);
    let st = sig.mul_vec(&task.theta);
    let var_y = dot(&task.theta, &st) + task.noise_var;

    // r = M^T Sigma_joint W; covariance contractions reduce to dots with r.
    let r = m_mat.transpose().mul_vec(&jw);
    let t1 = params.q11.mul(&sig).trace();
    let g = params.q11.add(&params.q11.transpose());
    let sv = sig.mul_vec(&params.v21);
    let gsv = g.mul_vec(&sv);
    let mut inner = sig.mul_vec(&gsv);
    for (k, e) in inner.iter_mut().enumerate() {
        *e += (t1 + params.q) * sv[k];
    }
    let cov_netfs_zs = dot(&r, &inner);
    let cov_netfs_y = dot(&r, &st);

    Ok(MomentReport { var_netfs, var_zs, var_y, cov_netfs_zs, cov_netfs_y, cov_zs_y })
}

/// Exact E[(zero-shot prediction - y)^2] on a task, for arbitrary blocks.
pub fn zs_error(params: &AttentionParams, task: &TaskSpec) -> f64 {
    assert_eq!(params.d, task.dim(), "params/task dimension mismatch");
    let (var_zs, cov_zs_y) = zs_var_and_cov(params, task);
    let sig = task.sigma_matrix();
    let var_y = dot(&task.theta, &sig.mul_vec(&task.theta)) + task.noise_var;
    var_zs - 2.0 * cov_zs_y + var_y
}

/// Exact E[(few-shot prediction - y)^2] on a task with n context examples,
/// via the exact mixture of the context statistic and the zero-shot branch:
/// (n^2 E[(NetFS-y)^2] + 2n E[(NetFS-y)(ZS-y)] + E[(ZS-y)^2]) / (n+1)^2.
/// Valid for every v22, including 0.
pub fn fs_error(params: &AttentionParams, task: &TaskSpec, n: usize) -> Result<f64, TheoryError> {
    let m = prediction_moments(params, task, n)?;
    let netfs_err = m.var_netfs - 2.0 * m.cov_netfs_y + m.var_y;
    let zs_err = m.var_zs - 2.0 * m.cov_zs_y + m.var_y;
    let cross = m.cov_netfs_zs - m.cov_netfs_y - m.cov_zs_y + m.var_y;
    let nf = n as f64;
    Ok((nf * nf * netfs_err + 2.0 * nf * cross + zs_err) / ((nf + 1.0) * (nf + 1.0)))
}

/// Few-shot error for the fixed-Q family (Q11 = Sigma^{-1}, q = 0, q21 = 0)
/// with free v21 and v22, as an explicit polynomial in n and d.
pub fn fixq_fs_error(v21: &[f64], v22: f64, task: &TaskSpec, n: usize) -> f64 {
    let d = task.dim() as f64;
    let nf = n as f64;
    let sig = task.sigma_matrix();
    let sv = sig.mul_vec(v21);
    let vsv = dot(v21, &sv);
    let vst = dot(&task.theta, &sv);
    let tst = dot(&task.theta, &sig.mul_vec(&task.theta));
    let s2 = task.noise_var;
    (((d + 2.0) * (d + 4.0) + nf * (nf + 5.0 + 3.0 * d)) * vsv
        + 2.0 * (-(d + 2.0) + nf * (nf + 3.0 + 2.0 * d) * v22 - nf * (nf + 3.0 + d)) * vst
        + (nf * (nf + 1.0 + d) * v22 * v22 - 2.0 * nf * (nf + 1.0) * v22
            + (nf + 1.0) * (nf + 1.0))
            * tst
        + (nf * d * v22 * v22 + (nf + 1.0) * (nf + 1.0)) * s2)
        / ((nf + 1.0) * (nf + 1.0))
}

/// Zero-shot error for the fixed-Q family (Q11 = Sigma^{-1}, q = 0):
/// (d+2)(d+4) v21' Sigma v21 - 2(d+2) v21' Sigma theta + theta' Sigma theta
/// + sigma^2, independent of v22.
pub fn fixq_zs_error(v21: &[f64], task: &TaskSpec) -> f64 {
    let d = task.dim() as f64;
    let sig = task.sigma_matrix();
    let sv = sig.mul_vec(v21);
    (d + 2.0) * (d + 4.0) * dot(v21, &sv) - 2.0 * (d + 2.0) * dot(&task.theta, &sv)
        + dot(&task.theta, &sig.mul_vec(&task.theta))
        + task.noise_var
}

/// n -> infinity limit of the fixed-Q few-shot error:
/// (v21 + (v22-1) theta)' Sigma (v21 + (v22-1) theta) + sigma^2.
pub fn fs_error_limit(v21: &[f64], v22: f64, task: &TaskSpec) -> f64 {
    let u: Vec<f64> = v21
        .iter()
        .zip(&task.theta)
        .map(|(v, t)| v + (v22 - 1.0) * t)
        .collect();
    let sig = task.sigma_matrix();
    dot(&u, &sig.mul_vec(&u)) + task.noise_var
}

// ---------------------------------------------------------------------------
// Optimal-parameter group
// ---------------------------------------------------------------------------

/// Global minimizer of the pretraining loss over N(0, I) tasks with m
/// context examples: v22 = m/(m+1+d), Q11 applied per eigenvalue as
/// (m+1+d)/((m+1) lambda_i + tr Sigma). `m = None` gives the m -> infinity
/// limit v22 = 1, Q11 = Sigma^{-1}.
pub fn optimal_pretrain(m: Option<u64>, sigma: &EigenDecomp) -> AttentionParams {
    let d = sigma.dim();
    let mut p = AttentionParams::zeros(d);
    match m {
        Some(m) => {
            let mf = m as f64;
            let df = d as f64;
            let tr: f64 = sigma.eigenvalues.iter().sum();
            p.v22 = mf / (mf + 1.0 + df);
            p.q11 = sigma
                .map_eigenvalues(|l| (mf + 1.0 + df) / ((mf + 1.0) * l + tr))
                .to_mat();
        }
        None => {
            p.v22 = 1.0;
            p.q11 = sigma.map_eigenvalues(|l| 1.0 / l).to_mat();
        }
    }
    p
}

/// Zero-shot-optimal full fine-tuning family for target task theta0:
/// v21 = w theta0, v22 = 1, q = 1/w, all else zero. Requires w > 0.
pub fn optimal_full_ft(theta0: &[f64], w: f64) -> Result<AttentionParams, TheoryError> {
    if w <= 0.0 {
        return Err(TheoryError::NonPositiveW);
    }
    let mut p = AttentionParams::zeros(theta0.len());
    p.v21 = theta0.iter().map(|t| w * t).collect();
    p.v22 = 1.0;
    p.q = 1.0 / w;
    Ok(p)
}

/// Zero-shot-optimal value-only fine-tuning family for fixed Q11 = Sigma^{-1}:
/// v21 = theta0/(d+4), v22 = w. Requires w != 0.
pub fn optimal_value_ft(
    theta0: &[f64],
    w: f64,
    sigma: &EigenDecomp,
) -> Result<AttentionParams, TheoryError> {
    if w == 0.0 {
        return Err(TheoryError::ZeroW);
    }
    let d = theta0.len();
    if sigma.dim() != d {
        return Err(TheoryError::DimensionMismatch(format!(
            "theta0 len {} vs Sigma dim {}",
            d,
            sigma.dim()
        )));
    }
    let mut p = AttentionParams::zeros(d);
    p.v21 = theta0.iter().map(|t| t / (d as f64 + 4.0)).collect();
    p.v22 = w;
    p.q11 = sigma.map_eigenvalues(|l| 1.0 / l).to_mat();
    Ok(p)
}

/// Few-shot-optimal v22 on deployment task theta for the value family built
/// around target task theta0:
/// ((n+1) theta' S theta - (n+3+2d)/(d+4) theta0' S theta)
/// / ((n+1+d) theta' S theta + d sigma^2).
pub fn w_star_task(n: usize, theta: &[f64], theta0: &[f64], task: &TaskSpec) -> f64 {
    let d = task.dim() as f64;
    let nf = n as f64;
    let sig = task.sigma_matrix();
    let st = sig.mul_vec(theta);
    let tst = dot(theta, &st);
    let t0st = dot(theta0, &st);
    ((nf + 1.0) * tst - (nf + 3.0 + 2.0 * d) / (d + 4.0) * t0st)
        / ((nf + 1.0 + d) * tst + d * task.noise_var)
}

/// Few-shot-optimal v22 averaged over N(0, I) tasks:
/// (n+1) tr Sigma / ((n+1+d) tr Sigma + d sigma^2).
pub fn w_star_avg(n: usize, task: &TaskSpec) -> f64 {
    let d = task.dim() as f64;
    let nf = n as f64;
    let tr: f64 = task.sigma.eigenvalues.iter().sum();
    (nf + 1.0) * tr / ((nf + 1.0 + d) * tr + d * task.noise_var)
}

/// Few-shot penalty on task theta from deploying the w tuned for theta0:
/// n ((n+1+d) theta' S theta + d sigma^2)/(n+1)^2 * (w*(theta0) - w*(theta))^2.
pub fn excess_error(n: usize, theta: &[f64], theta0: &[f64], task: &TaskSpec) -> f64 {
    let d = task.dim() as f64;
    let nf = n as f64;
    let sig = task.sigma_matrix();
    let tst = dot(theta, &sig.mul_vec(theta));
    let w0 = w_star_task(n, theta0, theta0, task);
    let w = w_star_task(n, theta, theta0, task);
    nf * ((nf + 1.0 + d) * tst + d * task.noise_var) / ((nf + 1.0) * (nf + 1.0))
        * (w0 - w)
        * (w0 - w)
}

// ---------------------------------------------------------------------------
// Condition group
// ---------------------------------------------------------------------------

/// The quadratic-form data of the ZS-vs-FS comparison: the zero-shot error
/// is at most the few-shot error iff
/// (v21 - A^{-1} B theta)' A (v21 - A^{-1} B theta) <= c.
#[derive(Debug, Clone)]
pub struct ConditionTriple {
    pub a: SymMatrix,
    pub b: SymMatrix,
    pub c_mat: SymMatrix,
    pub c: f64,
}

/// Symmetric congruence K^T S K, built upper-triangle-first so the result is
/// exactly symmetric.
fn congruence(k: &Mat, s: &Mat) -> SymMatrix {
    let d = k.cols();
    SymMatrix::from_fn_upper(d, |i, j| {
        let mut acc = 0.0;
        for a in 0..k.rows() {
            for b in 0..s.cols() {
                acc += k[(a, i)] * s[(a, b)] * k[(b, j)];
            }
        }
        acc
    })
}

/// Evaluate the ZS-vs-FS comparison for parameters satisfying v22 = 1,
/// q21 = 0, and symmetric positive definite Q11. The boolean is true iff
/// the zero-shot error is at most the few-shot error at context length n.
pub fn zs_vs_fs_condition(
    params: &AttentionParams,
    task: &TaskSpec,
    n: usize,
) -> Result<(ConditionTriple, bool), TheoryError> {
    if n == 0 {
        return Err(TheoryError::EmptyContext);
    }
    if params.v22 != 1.0 {
        return Err(TheoryError::HypothesisViolated(format!(
            "v22 must be 1, got {}",
            params.v22
        )));
    }
    if params.q21.iter().any(|&x| x != 0.0) {
        return Err(TheoryError::HypothesisViolated("q21 must be zero".into()));
    }
    let q11 = SymMatrix::new(params.q11.clone())
        .map_err(|_| TheoryError::HypothesisViolated("Q11 must be symmetric".into()))?;
    // Positive definiteness is certified by inverting; spd_inverse raises on
    // eigenvalues at or below its floor.
    spd_inverse(&q11)
        .map_err(|_| TheoryError::HypothesisViolated("Q11 must be positive definite".into()))?;

    let nf = n as f64;
    let q = params.q;
    let sig_sym = task.sigma.map_eigenvalues(|l| l);
    let sig = sig_sym.as_mat();
    let p = congruence(sig, q11.as_mat()); // Sigma Q11 Sigma
    let q11s = q11.as_mat().mul(sig);
    let r = congruence(&q11s, sig); // Sigma Q11 Sigma Q11 Sigma
    let t1 = q11s.trace();
    let t2 = trace_prod(&q11s, &q11s)?;

    let a_mat = sig
        .scale((nf + 2.0) * t1 * t1 + (2.0 * nf + 3.0) * t2 + q * ((nf + 1.0) * q + 2.0 * (nf + 2.0) * t1))
        .add(&p.as_mat().scale((4.0 * nf + 6.0) * t1 + q * (4.0 * nf + 6.0)))
        .add(&r.as_mat().scale(7.0 * nf + 11.0));
    let b_mat = sig
        .scale(t2 + (nf + 1.0) * t1 + q * (q - 1.0))
        .add(&p.as_mat().scale(t1 + nf + 1.0 + q))
        .add(&r.as_mat().scale(nf + 3.0));
    let c_mat = sig
        .scale(t2 + q * q)
        .add(&p.as_mat().scale(-2.0 * (nf + 1.0)))
        .add(&r.as_mat().scale(nf + 1.0));

    let a = SymMatrix::new(a_mat).expect("sum of symmetric terms");
    let b = SymMatrix::new(b_mat).expect("sum of symmetric terms");
    let c_m = SymMatrix::new(c_mat).expect("sum of symmetric terms");

    let a_inv = spd_inverse(&a)?;
    let btheta = b.as_mat().mul_vec(&task.theta);
    let center = a_inv.as_mat().mul_vec(&btheta);
    let ctheta = c_m.as_mat().mul_vec(&task.theta);
    let c_scalar = dot(&btheta, &center)
        + dot(&task.theta, &ctheta)
        + (t2 + q * q) * task.noise_var;

    let diff: Vec<f64> = params.v21.iter().zip(&center).map(|(v, m)| v - m).collect();
    let lhs = quad_form(&diff, &a)?;
    Ok((ConditionTriple { a, b, c_mat: c_m, c: c_scalar }, lhs <= c_scalar))
}

/// Context length above which the pretrained model's few-shot error drops
/// below its zero-shot error on the given task:
/// sum_i a_i^2 (lambda_1 |theta|^2 + sigma^2) / (a_d (2 - a_d) lambda_1
/// |theta|^2) - 1, with a_i = m lambda_i / ((m+1) lambda_i + tr Sigma).
/// `m = None` gives the m -> infinity limit (all a_i = 1).
pub fn pretrain_threshold(m: Option<u64>, task: &TaskSpec) -> Result<f64, TheoryError> {
    let theta_norm2: f64 = task.theta.iter().map(|t| t * t).sum();
    let lambda1 = task.sigma.eigenvalues[0];
    let signal = lambda1 * theta_norm2;
    if signal == 0.0 {
        return Err(TheoryError::ZeroSignal);
    }
    let tr: f64 = task.sigma.eigenvalues.iter().sum();
    let a: Vec<f64> = match m {
        Some(m) => task
            .sigma
            .eigenvalues
            .iter()
            .map(|&l| m as f64 * l / ((m as f64 + 1.0) * l + tr))
            .collect(),
        None => vec![1.0; task.dim()],
    };
    let sum_sq: f64 = a.iter().map(|x| x * x).sum();
    let a_d = a[task.dim() - 1];
    Ok(sum_sq * (signal + task.noise_var) / (a_d * (2.0 - a_d) * signal) - 1.0)
}

/// Isotropic specialization of the threshold (Sigma = lambda I):
/// d a / (2 - a) * (1 + sigma^2 / (lambda |theta|^2)) - 1 with
/// a = m/(m+1+d); `m = None` gives a = 1.
pub fn pretrain_threshold_isotropic(
    m: Option<u64>,
    d: usize,
    lambda: f64,
    theta_norm2: f64,
    noise_var: f64,
) -> Result<f64, TheoryError> {
    if lambda * theta_norm2 == 0.0 {
        return Err(TheoryError::ZeroSignal);
    }
    let df = d as f64;
    let a = match m {
        Some(m) => m as f64 / (m as f64 + 1.0 + df),
        None => 1.0,
    };
    Ok(df * a / (2.0 - a) * (1.0 + noise_var / (lambda * theta_norm2)) - 1.0)
}

// ---------------------------------------------------------------------------
// Dynamics group
// ---------------------------------------------------------------------------

/// Zero-shot error of the (alpha, beta, gamma) family (Sigma = I):
/// parameters v21 = alpha theta0, q = beta, Q11 = gamma I.
pub fn abg_zs_error(
    alpha: f64,
    beta: f64,
    gamma: f64,
    theta_norm2: f64,
    noise_var: f64,
    d: usize,
) -> f64 {
    let df = d as f64;
    let s = (beta + (df + 2.0) * gamma) * alpha - 1.0;
    s * s * theta_norm2 + 2.0 * (df + 2.0) * gamma * gamma * alpha * alpha * theta_norm2
        + noise_var
}

/// The corresponding block parameters (v22 = 1).
pub fn abg_params(alpha: f64, beta: f64, gamma: f64, theta0: &[f64]) -> AttentionParams {
    let d = theta0.len();
    let mut p = AttentionParams::zeros(d);
    p.v21 = theta0.iter().map(|t| alpha * t).collect();
    p.v22 = 1.0;
    p.q = beta;
    p.q11 = Mat::identity(d).scale(gamma);
    p
}

/// One gradient step on the asymptotic few-shot loss
/// L = |theta0|^2 (gamma alpha + gamma - 1)^2 + sigma^2 (beta has zero
/// gradient) plus the resulting change of the zero-shot error.
#[derive(Debug, Clone, Copy)]
pub struct AbgStep {
    /// Asymptotic few-shot loss at the starting point.
    pub loss: f64,
    /// Gradient-descent update of alpha.
    pub d_alpha: f64,
    /// Gradient-descent update of gamma.
    pub d_gamma: f64,
    /// Zero-shot error after the step minus before.
    pub zs_delta: f64,
}

/// Evaluate the asymptotic few-shot loss, its gradient step of size eta, and
/// the induced zero-shot error change.
pub fn abg_fs_limit_and_step(
    alpha: f64,
    beta: f64,
    gamma: f64,
    eta: f64,
    theta_norm2: f64,
    noise_var: f64,
    d: usize,
) -> AbgStep {
    let resid = gamma * alpha + gamma - 1.0;
    let loss = theta_norm2 * resid * resid + noise_var;
    let d_alpha = -2.0 * eta * gamma * resid * theta_norm2;
    let d_gamma = -2.0 * eta * (alpha + 1.0) * resid * theta_norm2;
    let before = abg_zs_error(alpha, beta, gamma, theta_norm2, noise_var, d);
    let after =
        abg_zs_error(alpha + d_alpha, beta, gamma + d_gamma, theta_norm2, noise_var, d);
    AbgStep { loss, d_alpha, d_gamma, zs_delta: after - before }
}

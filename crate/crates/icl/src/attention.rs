//! Linear attention forward pass and prediction extractors.
//!
//! The model is f(Z; V, Q) = Z + (1/ncol(Z)) V Z Z^T Q Z on a (d+2) x (n+1)
//! prompt matrix. V has zero first row and first column; Q has a scalar q in
//! its (0,0) corner and zeros elsewhere in its first row and column. Storing
//! the blocks (not full matrices) makes those structural zeros
//! unrepresentable rather than merely untested.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, Mat};
use crate::taskgen::Prompt;

/// Errors raised by prediction extractors.
#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    /// A few-shot extractor was asked for a prediction from a zero-shot
    /// prompt; callers must use `predict_zs` instead.
    #[error("prompt has no context examples")]
    EmptyContext,
    /// Operand shapes are incompatible.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Block-structured parameters of the linear attention layer.
///
/// Both full matrices are (d+2) x (d+2). With index 0 the ones row, 1..=d
/// the input rows, and d+1 the response row:
///
/// ```text
/// V = [ 0  0    0   ]      Q = [ q  0    0   ]
///     [ 0  V11  v12 ]          [ 0  Q11  q12 ]
///     [ 0  v21' v22 ]          [ 0  q21' q22 ]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Snapshot", into = "Snapshot")]
pub struct AttentionParams {
    /// Input dimension d.
    pub d: usize,
    /// Value block acting on input rows (d x d).
    pub v11: Mat,
    /// Value column coupling responses into input rows (length d).
    pub v12: Vec<f64>,
    /// Value row producing the response output from inputs (length d).
    pub v21: Vec<f64>,
    /// Value scalar producing the response output from responses.
    pub v22: f64,
    /// Scalar in the (0,0) corner of Q, pairing against the ones row.
    pub q: f64,
    /// Query-key block on input rows (d x d).
    pub q11: Mat,
    /// Query-key column coupling the response row (length d).
    pub q12: Vec<f64>,
    /// Query-key row coupling the response row (length d).
    pub q21: Vec<f64>,
    /// Query-key scalar on the response row.
    pub q22: f64,
}

/// Flat serialized form: block name -> row-major number array. The key set
/// is exactly {d, V11, v12, v21, v22, q, Q11, q12, q21, q22}.
#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct Snapshot {
    d: usize,
    V11: Vec<f64>,
    v12: Vec<f64>,
    v21: Vec<f64>,
    v22: f64,
    q: f64,
    Q11: Vec<f64>,
    q12: Vec<f64>,
    q21: Vec<f64>,
    q22: f64,
}

impl From<AttentionParams> for Snapshot {
    fn from(p: AttentionParams) -> Snapshot {
        Snapshot {
            d: p.d,
            V11: p.v11.data().to_vec(),
            v12: p.v12,
            v21: p.v21,
            v22: p.v22,
            q: p.q,
            Q11: p.q11.data().to_vec(),
            q12: p.q12,
            q21: p.q21,
            q22: p.q22,
        }
    }
}

impl From<Snapshot> for AttentionParams {
    fn from(s: Snapshot) -> AttentionParams {
        let d = s.d;
        AttentionParams {
            d,
            v11: Mat::from_rows(d, d, &s.V11),
            v12: s.v12,
            v21: s.v21,
            v22: s.v22,
            q: s.q,
            q11: Mat::from_rows(d, d, &s.Q11),
            q12: s.q12,
            q21: s.q21,
            q22: s.q22,
        }
    }
}

impl AttentionParams {
    /// All-zero parameters in dimension d.
    pub fn zeros(d: usize) -> Self {
        AttentionParams {
            d,
            v11: Mat::zeros(d, d),
            v12: vec![0.0; d],
            v21: vec![0.0; d],
            v22: 0.0,
            q: 0.0,
            q11: Mat::zeros(d, d),
            q12: vec![0.0; d],
            q21: vec![0.0; d],
            q22: 0.0,
        }
    }

    /// Assemble the full (d+2) x (d+2) value matrix.
    pub fn full_v(&self) -> Mat {
        let d = self.d;
        let mut v = Mat::zeros(d + 2, d + 2);
        for i in 0..d {
            for j in 0..d {
                v[(1 + i, 1 + j)] = self.v11[(i, j)];
            }
            v[(1 + i, d + 1)] = self.v12[i];
            v[(d + 1, 1 + i)] = self.v21[i];
        }
        v[(d + 1, d + 1)] = self.v22;
        v
    }

    /// Assemble the full (d+2) x (d+2) merged query-key matrix.
    pub fn full_q(&self) -> Mat {
        let d = self.d;
        let mut q = Mat::zeros(d + 2, d + 2);
        q[(0, 0)] = self.q;
        for i in 0..d {
            for j in 0..d {
                q[(1 + i, 1 + j)] = self.q11[(i, j)];
            }
            q[(1 + i, d + 1)] = self.q12[i];
            q[(d + 1, 1 + i)] = self.q21[i];
        }
        q[(d + 1, d + 1)] = self.q22;
        q
    }

    /// Split full matrices back into blocks, checking the structural zeros.
    pub fn from_full(v: &Mat, q: &Mat) -> Result<Self, AttentionError> {
        if v.rows() != v.cols() || v.rows() < 2 || q.rows() != v.rows() || q.cols() != v.cols() {
            return Err(AttentionError::DimensionMismatch(format!(
                "expected matching square (d+2) matrices, got {}x{} and {}x{}",
                v.rows(),
                v.cols(),
                q.rows(),
                q.cols()
            )));
        }
        let d = v.rows() - 2;
        let mut p = AttentionParams::zeros(d);
        for i in 0..d {
            for j in 0..d {
                p.v11[(i, j)] = v[(1 + i, 1 + j)];
                p.q11[(i, j)] = q[(1 + i, 1 + j)];
            }
            p.v12[i] = v[(1 + i, d + 1)];
            p.v21[i] = v[(d + 1, 1 + i)];
            p.q12[i] = q[(1 + i, d + 1)];
            p.q21[i] = q[(d + 1, 1 + i)];
        }
        p.v22 = v[(d + 1, d + 1)];
        p.q = q[(0, 0)];
        p.q22 = q[(d + 1, d + 1)];
        p
            .check_structural_zeros(v, q)
            .map(|()| p)
    }

    fn check_structural_zeros(&self, v: &Mat, q: &Mat) -> Result<(), AttentionError> {
        let d = self.d;
        for k in 0..d + 2 {
            if v[(0, k)] != 0.0 || v[(k, 0)] != 0.0 {
                return Err(AttentionError::DimensionMismatch(
                    "value matrix has nonzero first row/column".into(),
                ));
            }
            if k != 0 && (q[(0, k)] != 0.0 || q[(k, 0)] != 0.0) {
                return Err(AttentionError::DimensionMismatch(
                    "query-key matrix has nonzero first row/column outside the corner".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Full forward pass: Z + (1/ncol(Z)) V Z Z^T Q Z.
pub fn forward(z: &Mat, params: &AttentionParams) -> Result<Mat, AttentionError> {
    if z.rows() != params.d + 2 || z.cols() == 0 {
        return Err(AttentionError::DimensionMismatch(format!(
            "prompt matrix is {}x{}, params expect {} rows and at least one column",
            z.rows(),
            z.cols(),
            params.d + 2
        )));
    }
    let k = z.cols() as f64;
    let v = params.full_v();
    let q = params.full_q();
    let vz = v.mul(z);
    let qz = q.mul(z);
    let ztqz = z.transpose().mul(&qz);
    Ok(z.add(&vz.mul(&ztqz).scale(1.0 / k)))
}

/// Attention score of context/query column `(x, y)` against the query input:
/// s = q + x^T Q11 x_query + y q21^T x_query.
fn score(params: &AttentionParams, x: &[f64], y: f64, query_x: &[f64]) -> f64 {
    let q11x: Vec<f64> = params.q11.mul_vec(query_x);
    params.q + dot(x, &q11x) + y * dot(&params.q21, query_x)
}

/// Value-row output of column `(x, y)`: a = v21^T x + v22 y.
fn value(params: &AttentionParams, x: &[f64], y: f64) -> f64 {
    dot(&params.v21, x) + params.v22 * y
}

/// Few-shot prediction: the response entry of the query column after one
/// forward pass, computed directly from the blocks.
pub fn predict_fs(prompt: &Prompt, params: &AttentionParams) -> Result<f64, AttentionError> {
    let n = prompt.n();
    if n == 0 {
        return Err(AttentionError::EmptyContext);
    }
    let mut s = 0.0;
    for i in 0..n {
        s += value(params, &prompt.context_x[i], prompt.context_y[i])
            * score(params, &prompt.context_x[i], prompt.context_y[i], &prompt.query_x);
    }
    s += value(params, &prompt.query_x, 0.0)
        * score(params, &prompt.query_x, 0.0, &prompt.query_x);
    Ok(s / (n as f64 + 1.0))
}

/// Zero-shot prediction from a bare query: v21^T x * x^T Q11 x + q * v21^T x.
pub fn predict_zs(x: &[f64], params: &AttentionParams) -> f64 {
    value(params, x, 0.0) * score(params, x, 0.0, x)
}

/// Context-only prediction statistic: the average of value * score over the
/// n context columns, so that
/// predict_fs = n/(n+1) * predict_netfs + 1/(n+1) * predict_zs.
pub fn predict_netfs(prompt: &Prompt, params: &AttentionParams) -> Result<f64, AttentionError> {
    let n = prompt.n();
    if n == 0 {
        return Err(AttentionError::EmptyContext);
    }
    let mut s = 0.0;
    for i in 0..n {
        s += value(params, &prompt.context_x[i], prompt.context_y[i])
            * score(params, &prompt.context_x[i], prompt.context_y[i], &prompt.query_x);
    }
    Ok(s / n as f64)
}

/// Per-block trainable flags for masked gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMask {
    pub v11: bool,
    pub v12: bool,
    pub v21: bool,
    pub v22: bool,
    pub q: bool,
    pub q11: bool,
    pub q12: bool,
    pub q21: bool,
    pub q22: bool,
}

impl BlockMask {
    /// All blocks trainable.
    pub fn all() -> Self {
        BlockMask {
            v11: true,
            v12: true,
            v21: true,
            v22: true,
            q: true,
            q11: true,
            q12: true,
            q21: true,
            q22: true,
        }
    }

    /// No blocks trainable (combine with field updates to build masks).
    pub fn none() -> Self {
        BlockMask {
            v11: false,
            v12: false,
            v21: false,
            v22: false,
            q: false,
            q11: false,
            q12: false,
            q21: false,
            q22: false,
        }
    }

    /// Only the value-matrix blocks trainable.
    pub fn value_only() -> Self {
        BlockMask { v11: true, v12: true, v21: true, v22: true, ..BlockMask::none() }
    }

    /// Only the query-key blocks trainable.
    pub fn qk_only() -> Self {
        BlockMask { q: true, q11: true, q12: true, q21: true, q22: true, ..BlockMask::none() }
    }

    /// Whether any block is trainable.
    pub fn any(&self) -> bool {
        self.v11
            || self.v12
            || self.v21
            || self.v22
            || self.q
            || self.q11
            || self.q12
            || self.q21
            || self.q22
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::prompt_matrix;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn random_params(seed: u64, d: usize) -> AttentionParams {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = AttentionParams::zeros(d);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| rng.gen_range(-1.0..1.0);
        p.v11 = Mat::from_fn(d, d, |_, _| draw(&mut rng));
        p.v12 = (0..d).map(|_| draw(&mut rng)).collect();
        p.v21 = (0..d).map(|_| draw(&mut rng)).collect();
        p.v22 = draw(&mut rng);
        p.q = draw(&mut rng);
        p.q11 = Mat::from_fn(d, d, |_, _| draw(&mut rng));
        p.q12 = (0..d).map(|_| draw(&mut rng)).collect();
        p.q21 = (0..d).map(|_| draw(&mut rng)).collect();
        p.q22 = draw(&mut rng);
        p
    }

    fn random_prompt(seed: u64, d: usize, n: usize) -> Prompt {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| rng.gen_range(-2.0..2.0);
        Prompt {
            context_x: (0..n).map(|_| (0..d).map(|_| draw(&mut rng)).collect()).collect(),
            context_y: (0..n).map(|_| draw(&mut rng)).collect(),
            query_x: (0..d).map(|_| draw(&mut rng)).collect(),
            query_y: draw(&mut rng),
        }
    }

    #[test]
    fn zero_value_matrix_is_identity_map() {
        let mut p = random_params(1, 3);
        p.v11 = Mat::zeros(3, 3);
        p.v12 = vec![0.0; 3];
        p.v21 = vec![0.0; 3];
        p.v22 = 0.0;
        let z = prompt_matrix(&random_prompt(2, 3, 4));
        let out = forward(&z, &p).unwrap();
        assert!(out.max_abs_diff(&z) == 0.0);
    }

    #[test]
    fn hand_computed_single_column_d1() {
        // Z = (1, x, 0)^T, v21 = a, v22 = b, q = e, Q11 = c:
        // response output = a*x*(e + c*x^2).
        let (a, b, c, e, x) = (0.7, -0.3, 1.1, 0.4, 1.9);
        let mut p = AttentionParams::zeros(1);
        p.v21 = vec![a];
        p.v22 = b;
        p.q = e;
        p.q11 = Mat::from_rows(1, 1, &[c]);
        let z = Mat::from_rows(3, 1, &[1.0, x, 0.0]);
        let out = forward(&z, &p).unwrap();
        let expected = a * x * (e + c * x * x);
        assert!((out[(2, 0)] - expected).abs() < 1e-14);
    }

    #[test]
    fn forward_matches_naive_triple_loop() {
        let d = 3;
        let p = random_params(5, d);
        let z = prompt_matrix(&random_prompt(6, d, 4));
        let out = forward(&z, &p).unwrap();

        // Naive oracle: form V, Q explicitly and contract index by index.
        let v = p.full_v();
        let q = p.full_q();
        let (rows, cols) = (z.rows(), z.cols());
        let mut naive = z.clone();
        for i in 0..rows {
            for j in 0..cols {
                let mut acc = 0.0;
                for a in 0..rows {
                    for b in 0..cols {
                        for c in 0..rows {
                            for e in 0..rows {
                                acc += v[(i, a)] * z[(a, b)] * z[(c, b)] * q[(c, e)] * z[(e, j)];
                            }
                        }
                    }
                }
                naive[(i, j)] += acc / cols as f64;
            }
        }
        assert!(out.max_abs_diff(&naive) < 1e-12);
    }

    #[test]
    fn predict_fs_zero_value_and_empty_context() {
        let d = 2;
        let mut p = random_params(7, d);
        p.v11 = Mat::zeros(d, d);
        p.v12 = vec![0.0; d];
        p.v21 = vec![0.0; d];
        p.v22 = 0.0;
        let prompt = random_prompt(8, d, 3);
        assert_eq!(predict_fs(&prompt, &p).unwrap(), 0.0);

        let zs_prompt = random_prompt(9, d, 0);
        assert_eq!(predict_fs(&zs_prompt, &p).unwrap_err(), AttentionError::EmptyContext);
        assert_eq!(predict_netfs(&zs_prompt, &p).unwrap_err(), AttentionError::EmptyContext);
    }

    #[test]
    fn predict_fs_pretrained_limit_one_shot() {
        // Q11 = I (Sigma = I), v22 = 1, rest zero, n = 1:
        // prediction = (1/2) * y1 * x1^T x.
        let d = 3;
        let mut p = AttentionParams::zeros(d);
        p.v22 = 1.0;
        p.q11 = Mat::identity(d);
        let prompt = random_prompt(10, d, 1);
        let expected = 0.5 * prompt.context_y[0] * dot(&prompt.context_x[0], &prompt.query_x);
        assert!((predict_fs(&prompt, &p).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn predict_zs_examples() {
        let d = 4;
        let mut p = random_params(11, d);
        p.v21 = vec![0.0; d];
        let x = vec![1.0, -2.0, 0.5, 3.0];
        assert_eq!(predict_zs(&x, &p), 0.0);

        // v21 = theta0, v22 = 1, q = 1, Q11 = 0 (w = 1): prediction = theta0^T x.
        let mut p = AttentionParams::zeros(d);
        p.v21 = vec![1.0, 0.0, 0.0, 0.0];
        p.v22 = 1.0;
        p.q = 1.0;
        let x = vec![2.0, 0.0, 0.0, 0.0];
        assert_eq!(predict_zs(&x, &p), 2.0);
    }

    #[test]
    fn block_predictions_match_forward() {
        for seed in 0..10u64 {
            let d = 3;
            let p = random_params(100 + seed, d);
            let prompt = random_prompt(200 + seed, d, 5);

            let z = prompt_matrix(&prompt);
            let full = forward(&z, &p).unwrap();
            let fs = predict_fs(&prompt, &p).unwrap();
            assert!((fs - full[(d + 1, prompt.n())]).abs() < 1e-12);

            let zs_prompt = Prompt {
                context_x: vec![],
                context_y: vec![],
                query_x: prompt.query_x.clone(),
                query_y: 0.0,
            };
            let z0 = prompt_matrix(&zs_prompt);
            let full0 = forward(&z0, &p).unwrap();
            let zs = predict_zs(&prompt.query_x, &p);
            assert!((zs - full0[(d + 1, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn netfs_direct_formula_without_corner_terms() {
        // With q = 0 and q21 = 0 the context statistic reduces to
        // [v21; v22]^T (1/n sum z_i z_i^T) [Q11; 0] x over the (x, y) blocks.
        let d = 2;
        let mut p = random_params(13, d);
        p.q = 0.0;
        p.q21 = vec![0.0; d];
        let prompt = random_prompt(14, d, 6);
        let n = prompt.n();

        let mut expected = 0.0;
        for i in 0..n {
            let w_z = dot(&p.v21, &prompt.context_x[i]) + p.v22 * prompt.context_y[i];
            let q11x = p.q11.mul_vec(&prompt.query_x);
            expected += w_z * dot(&prompt.context_x[i], &q11x);
        }
        expected /= n as f64;
        assert!((predict_netfs(&prompt, &p).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn full_assembly_roundtrip() {
        let p = random_params(15, 4);
        let back = AttentionParams::from_full(&p.full_v(), &p.full_q()).unwrap();
        assert_eq!(p, back);

        // Structural-zero violations are rejected.
        let mut v = p.full_v();
        v[(0, 1)] = 1.0;
        assert!(AttentionParams::from_full(&v, &p.full_q()).is_err());
    }

    #[test]
    fn snapshot_json_has_exact_key_set() {
        let p = random_params(16, 2);
        let json = serde_json::to_value(&p).unwrap();
        let obj = json.as_object().unwrap();
        let mut keys: Vec<&str> = obj.keys().map(|k| k.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            vec!["Q11", "V11", "d", "q", "q12", "q21", "q22", "v12", "v21", "v22"]
        );
        let back: AttentionParams = serde_json::from_value(json).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn mask_constructors() {
        assert!(BlockMask::all().any());
        assert!(!BlockMask::none().any());
        let value = BlockMask::value_only();
        assert!(value.v21 && value.v22 && !value.q11 && !value.q);
        let qk = BlockMask::qk_only();
        assert!(qk.q11 && qk.q && !qk.v21);
    }

    proptest! {
        #[test]
        fn decomposition_identity(seed in 0u64..50, n in 1usize..8) {
            let d = 3;
            let p = random_params(300 + seed, d);
            let prompt = random_prompt(400 + seed, d, n);
            let fs = predict_fs(&prompt, &p).unwrap();
            let netfs = predict_netfs(&prompt, &p).unwrap();
            let zs = predict_zs(&prompt.query_x, &p);
            let composed = (n as f64 / (n as f64 + 1.0)) * netfs + zs / (n as f64 + 1.0);
            prop_assert!((fs - composed).abs() < 1e-12 * (1.0 + fs.abs()));
        }

        #[test]
        fn prediction_scale_equivalence(seed in 0u64..50, c in prop::sample::select(vec![0.25f64, 0.5, 2.0, 5.0, -1.5])) {
            // Scaling the response value row by 1/c and the query-side blocks
            // (Q11, q21, q) by c leaves both predictions unchanged.
            let d = 3;
            let p = random_params(500 + seed, d);
            let prompt = random_prompt(600 + seed, d, 4);
            let mut r = p.clone();
            for k in 0..d {
                r.v21[k] /= c;
                r.q21[k] *= c;
            }
            r.v22 /= c;
            r.q11 = p.q11.scale(c);
            r.q = p.q * c;

            let fs = predict_fs(&prompt, &p).unwrap();
            let fs_r = predict_fs(&prompt, &r).unwrap();
            prop_assert!((fs - fs_r).abs() < 1e-10 * (1.0 + fs.abs()));

            let zs = predict_zs(&prompt.query_x, &p);
            let zs_r = predict_zs(&prompt.query_x, &r);
            prop_assert!((zs - zs_r).abs() < 1e-10 * (1.0 + zs.abs()));
        }

        #[test]
        fn residual_passivity(seed in 0u64..50) {
            // With only v21 and v22 nonzero, every output row except the
            // response row equals the input row.
            let d = 3;
            let mut p = random_params(700 + seed, d);
            p.v11 = Mat::zeros(d, d);
            p.v12 = vec![0.0; d];
            let prompt = random_prompt(800 + seed, d, 4);
            let z = prompt_matrix(&prompt);
            let out = forward(&z, &p).unwrap();
            for i in 0..d + 1 {
                for j in 0..z.cols() {
                    prop_assert!((out[(i, j)] - z[(i, j)]).abs() < 1e-14);
                }
            }
        }
    }
}

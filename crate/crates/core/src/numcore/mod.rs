//! Dense arrays with reverse-mode gradients for the primitive set the
//! encoder needs, plus a central-difference gradient checker.

mod tape;
mod tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use tape::{BoundParams, Gradients, Tape, Var};
pub use tensor::{ParamStore, Real, Tensor};

use crate::error::{Error, Result};

/// Numeric precision of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// 64-bit; used wherever finite differences or bit-reproducibility matter.
    Check,
    /// 32-bit.
    #[default]
    Fast,
}

/// `C = A B` for row-major `A: [m, k]`, `B: [k, n]`, `C: [m, n]`.
pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    use tensor::{gemm, Strides};
    gemm(m, k, n, T::one(), a, Strides::rows(k), b, Strides::rows(n), T::zero(), c, Strides::rows(n));
}

/// `y = x W + b` outside of any tape.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (x, w, b) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.linear(x, w, Some(b))?;
    Ok(tape.value(y).clone())
}

pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (x, g, b) = (
        tape.constant(x.clone()),
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
    );
    let y = tape.layer_norm(x, g, b, eps)?;
    Ok(tape.value(y).clone())
}

/// Loss and logit gradient of softmax cross-entropy for a single logit vector.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, target: usize) -> Result<(T, Tensor<T>)> {
    let mut tape = Tape::new();
    let row = logits.clone().reshape(vec![1, logits.numel()])?;
    let l = tape.leaf(row);
    let loss = tape.cross_entropy(l, &[target])?;
    let grads = tape.backward(loss)?;
    let g = grads
        .wrt(l)
        .expect("logits take a gradient")
        .reshape(logits.shape().to_vec())?;
    Ok((tape.value(loss).data()[0], g))
}

/// Mix a base seed with a path of integers into an independent stream seed
/// (splitmix64 finalizer per component).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base;
    for &p in std::iter::once(&0x9e37_79b9_7f4a_7c15).chain(parts) {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Stable 64-bit FNV-1a hash, for turning identifiers into seed components.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask<T: Real>(shape: &[usize], rate: f64, seed: u64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let numel: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..numel)
        .map(|_| {
            if rate > 0.0 && rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst single coordinate.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Worst parameter tensor by `|g - ĝ|₂ / max(|g|₂, |ĝ|₂, 1e-8)`; unlike the
    /// coordinate maximum it is not dominated by near-zero entries whose
    /// finite-difference estimate is pure round-off.
    pub max_tensor_rel_error: f64,
    pub worst_tensor: String,
}

/// Compare reverse-mode gradients of `loss_fn` against central differences
/// for every scalar parameter.
///
/// The relative error of one coordinate is `|g - ĝ| / max(|g|, |ĝ|, 1e-8)`;
/// the tensor-wise error uses Euclidean norms over each parameter.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &BoundParams) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Parameter(format!("finite-difference step {eps} must be positive")));
    }
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind(p);
        let loss = loss_fn(&mut tape, &bound)?;
        let v = tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let loss = loss_fn(&mut tape, &bound)?;
    if !tape.value(loss).data()[0].is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    let analytic = bound.gradients(params, &tape.backward(loss)?)?;

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        max_tensor_rel_error: 0.0,
        worst_tensor: String::new(),
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.get(name)?.numel();
        let (mut diff_sq, mut g_sq, mut num_sq) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let orig = params.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let g = analytic.get(name)?.data()[i];
            let denom = g.abs().max(numeric.abs()).max(1e-8);
            let rel = (g - numeric).abs() / denom;
            diff_sq += (g - numeric) * (g - numeric);
            g_sq += g * g;
            num_sq += numeric * numeric;
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = g;
                report.numeric = numeric;
            }
        }
        let tensor_rel = diff_sq.sqrt() / g_sq.sqrt().max(num_sq.sqrt()).max(1e-8);
        if tensor_rel > report.max_tensor_rel_error || report.worst_tensor.is_empty() {
            report.max_tensor_rel_error = tensor_rel;
            report.worst_tensor = name.clone();
        }
    }
    Ok(report)
}

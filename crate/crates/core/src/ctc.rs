//! Connectionist temporal classification: loss, exhaustive oracle, greedy
//! decoding, and a graph op wrapping the loss.
//!
//! Lattices are `time × classes` matrices of log-probabilities with the
//! blank at class 0. Targets hold class ids in `1..classes`.

use ctxasr_nn::{CustomOp, Real, Tensor};

use crate::error::{Error, Result};
use crate::vocab::BLANK;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtcLoss {
    /// Negative log-likelihood; `+∞` when no alignment exists.
    pub loss: f64,
    pub feasible: bool,
}

/// Fewest frames able to emit `target`: one per label plus a blank between
/// each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn extended(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &c in target {
        ext.push(c);
        ext.push(BLANK);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

fn check_target(classes: usize, target: &[usize]) -> Result<()> {
    match target.iter().find(|&&c| c == BLANK || c >= classes) {
        Some(&c) => Err(Error::InvalidInput(format!(
            "target label {c} is not a character class of a {classes}-class lattice"
        ))),
        None => Ok(()),
    }
}

/// Log-space forward variables, `alpha[t][s]`.
fn forward(lp: &[f64], classes: usize, frames: usize, ext: &[usize]) -> Vec<Vec<f64>> {
    let s_len = ext.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    alpha[0][0] = lp[ext[0]];
    if s_len > 1 {
        alpha[0][1] = lp[ext[1]];
    }
    for t in 1..frames {
        let row = &lp[t * classes..(t + 1) * classes];
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if can_skip(ext, s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + row[ext[s]];
        }
    }
    alpha
}

fn backward_vars(lp: &[f64], classes: usize, frames: usize, ext: &[usize]) -> Vec<Vec<f64>> {
    let s_len = ext.len();
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    let last = frames - 1;
    beta[last][s_len - 1] = lp[last * classes + ext[s_len - 1]];
    if s_len > 1 {
        beta[last][s_len - 2] = lp[last * classes + ext[s_len - 2]];
    }
    for t in (0..last).rev() {
        let row = &lp[t * classes..(t + 1) * classes];
        for s in 0..s_len {
            let mut b = beta[t + 1][s];
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && can_skip(ext, s + 2) {
                b = log_add(b, beta[t + 1][s + 2]);
            }
            beta[t][s] = b + row[ext[s]];
        }
    }
    beta
}

fn nll_from_alpha(alpha: &[Vec<f64>], ext: &[usize]) -> f64 {
    let last = alpha.last().expect("at least one frame");
    let s_len = ext.len();
    let mut ll = last[s_len - 1];
    if s_len > 1 {
        ll = log_add(ll, last[s_len - 2]);
    }
    -ll
}

/// Loss and, when feasible, its gradient with respect to every lattice entry.
pub fn ctc_loss_and_grad(lattice: &Tensor<f64>, target: &[usize]) -> Result<(CtcLoss, Option<Tensor<f64>>)> {
    let (frames, classes) = (lattice.rows(), lattice.cols());
    check_target(classes, target)?;
    if frames < min_frames(target) {
        let loss = CtcLoss {
            loss: f64::INFINITY,
            feasible: false,
        };
        return Ok((loss, None));
    }
    if frames == 0 {
        let loss = CtcLoss {
            loss: 0.0,
            feasible: true,
        };
        return Ok((loss, Some(Tensor::zeros(lattice.shape().to_vec()))));
    }
    let lp = lattice.data();
    let ext = extended(target);
    let alpha = forward(lp, classes, frames, &ext);
    let nll = nll_from_alpha(&alpha, &ext);
    let beta = backward_vars(lp, classes, frames, &ext);
    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        for (s, &k) in ext.iter().enumerate() {
            let g = alpha[t][s] + beta[t][s] - lp[t * classes + k] + nll;
            if g > f64::NEG_INFINITY {
                grad[t * classes + k] -= g.exp();
            }
        }
    }
    let loss = CtcLoss {
        loss: nll,
        feasible: true,
    };
    Ok((loss, Some(Tensor::matrix(frames, classes, grad)?)))
}

/// Negative log-likelihood of `target` summed over all alignments.
pub fn ctc_loss<F: Real>(lattice: &Tensor<F>, target: &[usize]) -> Result<CtcLoss> {
    let (frames, classes) = (lattice.rows(), lattice.cols());
    check_target(classes, target)?;
    if frames < min_frames(target) {
        return Ok(CtcLoss {
            loss: f64::INFINITY,
            feasible: false,
        });
    }
    if frames == 0 {
        return Ok(CtcLoss {
            loss: 0.0,
            feasible: true,
        });
    }
    let lp = lattice.to_f64_vec();
    let ext = extended(target);
    let alpha = forward(&lp, classes, frames, &ext);
    Ok(CtcLoss {
        loss: nll_from_alpha(&alpha, &ext),
        feasible: true,
    })
}

/// Merges repeats, then drops blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

pub const BRUTE_FORCE_MAX_FRAMES: usize = 8;
pub const BRUTE_FORCE_MAX_CLASSES: usize = 6;

/// Enumerates every label path; only for tiny lattices.
pub fn ctc_brute_force<F: Real>(lattice: &Tensor<F>, target: &[usize]) -> Result<f64> {
    let (frames, classes) = (lattice.rows(), lattice.cols());
    if frames > BRUTE_FORCE_MAX_FRAMES || classes > BRUTE_FORCE_MAX_CLASSES {
        return Err(Error::InvalidInput(format!(
            "enumeration is limited to {BRUTE_FORCE_MAX_FRAMES} frames and \
             {BRUTE_FORCE_MAX_CLASSES} classes, got {frames}x{classes}"
        )));
    }
    check_target(classes, target)?;
    let total: f64 = all_paths(frames, classes)
        .filter(|path| collapse(path) == target)
        .map(|path| path_prob(lattice, &path))
        .sum();
    Ok(-total.ln())
}

/// Every path over `classes` symbols of length `frames`, in lexicographic order.
pub fn all_paths(frames: usize, classes: usize) -> impl Iterator<Item = Vec<usize>> {
    let count = classes.pow(frames as u32);
    (0..count).map(move |mut n| {
        let mut path = vec![0; frames];
        for slot in path.iter_mut().rev() {
            *slot = n % classes;
            n /= classes;
        }
        path
    })
}

pub fn path_prob<F: Real>(lattice: &Tensor<F>, path: &[usize]) -> f64 {
    path.iter()
        .enumerate()
        .map(|(t, &k)| lattice.get(t, k).f64())
        .sum::<f64>()
        .exp()
}

/// Per-frame argmax (first index on ties), collapsed.
pub fn ctc_greedy_decode<F: Real>(lattice: &Tensor<F>) -> Vec<usize> {
    let path: Vec<usize> = (0..lattice.rows())
        .map(|t| {
            let row = lattice.row_slice(t);
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}

/// Graph op computing the CTC loss of a log-probability lattice.
///
/// The forward fails on infeasible targets; callers check feasibility first.
pub struct CtcLossOp {
    pub target: Vec<usize>,
}

impl<F: Real> CustomOp<F> for CtcLossOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn forward(&self, inputs: &[&Tensor<F>]) -> std::result::Result<(Tensor<F>, Vec<Tensor<F>>), String> {
        let [lattice] = inputs else {
            return Err(format!("expects one input, got {}", inputs.len()));
        };
        let lp: Tensor<f64> = lattice.cast();
        let (loss, grad) = ctc_loss_and_grad(&lp, &self.target).map_err(|e| e.to_string())?;
        let grad = grad.ok_or_else(|| {
            format!(
                "{} frames cannot emit {} labels",
                lattice.rows(),
                self.target.len()
            )
        })?;
        Ok((Tensor::scalar(F::of(loss.loss)), vec![grad.cast()]))
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        aux: &[Tensor<F>],
        grad: &Tensor<F>,
    ) -> Vec<Option<Tensor<F>>> {
        let mut g = aux[0].clone();
        g.scale_assign(grad.item());
        vec![Some(g)]
    }
}

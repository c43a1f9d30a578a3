//! Exact t-SNE over feature vectors.

use log::{info, warn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_stream, stream_key};

pub const MAX_POINTS: usize = 5000;
pub const PERPLEXITY_TOL: f64 = 1e-5;
const GAIN_STEP: f64 = 0.2;
const GAIN_DECAY: f64 = 0.8;
const MIN_GAIN: f64 = 0.01;
const BISECTION_STEPS: usize = 64;
const Q_FLOOR: f64 = 1e-12;
const DUPLICATE_JITTER: f64 = 1e-10;
const INIT_STD: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iteration at which momentum switches and exaggeration stops.
    pub switch_iteration: usize,
    pub early_exaggeration: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            switch_iteration: 250,
            early_exaggeration: 12.0,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("perplexity", self.perplexity),
            ("learning_rate", self.learning_rate),
            ("early_exaggeration", self.early_exaggeration),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidValue(format!("tsne.{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("initial_momentum", self.initial_momentum), ("final_momentum", self.final_momentum)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidValue(format!("tsne.{name} must lie in [0,1), got {v}")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::InvalidValue("tsne.iterations must be positive".into()));
        }
        Ok(())
    }

    fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        check_size(n)?;
        if self.perplexity >= n as f64 {
            return Err(Error::InvalidValue(format!(
                "perplexity {} must be below the number of points {n}",
                self.perplexity
            )));
        }
        Ok(())
    }
}

fn check_size(n: usize) -> Result<()> {
    if n < 4 {
        return Err(Error::Shape(format!("t-SNE needs at least 4 points, got {n}")));
    }
    if n > MAX_POINTS {
        return Err(Error::Shape(format!(
            "exact t-SNE is capped at {MAX_POINTS} points, got {n}"
        )));
    }
    Ok(())
}

/// Dense N x N matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("matrix rows must all have length N".into()));
        }
        Ok(SquareMatrix {
            n,
            data: rows.concat(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Symmetric joint probabilities: non-negative, zero diagonal, total 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix(SquareMatrix);

impl AffinityMatrix {
    pub fn matrix(&self) -> &SquareMatrix {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    /// Wraps a matrix after checking the invariants.
    pub fn new(m: SquareMatrix) -> Result<Self> {
        let n = m.n;
        for i in 0..n {
            if m.get(i, i) != 0.0 {
                return Err(Error::InvalidValue(format!("affinity diagonal at {i} is nonzero")));
            }
            for j in 0..n {
                let v = m.get(i, j);
                if v.is_nan() || v < 0.0 || (v - m.get(j, i)).abs() > 1e-15 {
                    return Err(Error::InvalidValue(format!(
                        "affinity ({i},{j}) is negative or asymmetric"
                    )));
                }
            }
        }
        if (m.sum() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidValue(format!("affinities sum to {}", m.sum())));
        }
        Ok(AffinityMatrix(m))
    }
}

fn check_rows(x: &[Vec<f64>]) -> Result<usize> {
    let dim = x.first().map_or(0, Vec::len);
    for (i, row) in x.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::Shape(format!("row {i} has {} values, expected {dim}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("row {i} contains a non-finite value")));
        }
    }
    if dim == 0 {
        return Err(Error::Shape("feature vectors are empty".into()));
    }
    Ok(dim)
}

/// Nudges exact duplicate rows apart so every bandwidth search has distinct
/// neighbors. The k-th repeat of a row moves by `k * 1e-10` along its first
/// coordinate.
pub fn jitter_duplicates(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = x.to_vec();
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| {
        x[a].iter()
            .zip(&x[b])
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut repeats = 0usize;
    let mut jittered = 0usize;
    for w in 1..order.len() {
        if x[order[w]] == x[order[w - 1]] {
            repeats += 1;
            out[order[w]][0] += repeats as f64 * DUPLICATE_JITTER;
            jittered += 1;
        } else {
            repeats = 0;
        }
    }
    if jittered > 0 {
        warn!("jittered {jittered} duplicate feature rows by multiples of {DUPLICATE_JITTER:e}");
    }
    out
}

fn squared_distances(x: &[Vec<f64>]) -> SquareMatrix {
    let n = x.len();
    let mut d = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    d
}

/// Row distribution for precision `beta` over shifted distances, and its
/// perplexity `exp(entropy in nats)`, which equals `2^(entropy in bits)`.
fn row_kernel(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (&d, o)) in dist.iter().zip(out.iter_mut()).enumerate() {
        if j == i {
            *o = 0.0;
            continue;
        }
        let e = (-beta * d).exp();
        *o = e;
        sum += e;
        weighted += e * d;
    }
    out.iter_mut().for_each(|v| *v /= sum);
    (sum.ln() + beta * weighted / sum).exp()
}

/// Perplexity of a probability row, computed from its entropy in bits.
pub fn row_perplexity(row: &[f64]) -> f64 {
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    2f64.powf(h)
}

/// Row-stochastic Gaussian affinities whose per-row perplexity matches
/// `perplexity`. The precision of each row is found by bisection on its
/// logarithm.
pub fn conditional_affinities(x: &[Vec<f64>], perplexity: f64) -> Result<SquareMatrix> {
    let n = x.len();
    check_size(n)?;
    check_rows(x)?;
    if perplexity.is_nan() || perplexity <= 0.0 || perplexity >= n as f64 {
        return Err(Error::InvalidValue(format!(
            "perplexity {perplexity} must lie in (0, {n})"
        )));
    }
    let d = squared_distances(x);
    let mut p = SquareMatrix::zeros(n);
    let mut shifted = vec![0.0; n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let di = d.row(i);
        let nearest = (0..n)
            .filter(|&j| j != i)
            .map(|j| di[j])
            .fold(f64::INFINITY, f64::min);
        let farthest = di.iter().copied().fold(0.0, f64::max);
        for (s, &v) in shifted.iter_mut().zip(di) {
            *s = v - nearest;
        }
        let spread = farthest - nearest;
        if spread == 0.0 {
            // All neighbors are equidistant: the kernel is uniform for every
            // bandwidth and its perplexity is N - 1.
            let uniform = 1.0 / (n - 1) as f64;
            if ((n - 1) as f64 - perplexity).abs() > PERPLEXITY_TOL {
                return Err(Error::Perplexity {
                    row: i,
                    perplexity,
                    message: format!("all {} neighbors are equidistant", n - 1),
                });
            }
            for j in (0..n).filter(|&j| j != i) {
                p.set(i, j, uniform);
            }
            continue;
        }
        // Bracket ln(beta) around the scale of the distance spread.
        let centre = -spread.ln();
        let (mut lo, mut hi) = (centre - 60.0, centre + 60.0);
        let mut achieved = f64::NAN;
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            achieved = row_kernel(&shifted, i, mid.exp(), &mut row);
            if (achieved - perplexity).abs() < PERPLEXITY_TOL {
                break;
            }
            // Perplexity falls as the precision grows.
            if achieved > perplexity {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if achieved.is_nan() || (achieved - perplexity).abs() >= PERPLEXITY_TOL {
            return Err(Error::Perplexity {
                row: i,
                perplexity,
                message: format!(
                    "bandwidth search ended at perplexity {achieved} after {BISECTION_STEPS} steps"
                ),
            });
        }
        for (j, &v) in row.iter().enumerate() {
            p.set(i, j, v);
        }
    }
    Ok(p)
}

/// `P = (P_cond + P_cond^T) / 2N`.
pub fn symmetrize(p_cond: &SquareMatrix) -> AffinityMatrix {
    let n = p_cond.n;
    let mut p = SquareMatrix::zeros(n);
    let scale = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p.set(i, j, (p_cond.get(i, j) + p_cond.get(j, i)) * scale);
            }
        }
    }
    AffinityMatrix(p)
}

fn kl_grad_scaled(p: &AffinityMatrix, y: &[[f64; 2]], exaggeration: f64) -> (f64, Vec<[f64; 2]>) {
    let n = y.len();
    let mut w = SquareMatrix::zeros(n);
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            w.set(i, j, v);
            w.set(j, i, v);
            z += 2.0 * v;
        }
    }
    let mut kl = 0.0;
    let mut grad = vec![[0.0; 2]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let wij = w.get(i, j);
            let q = wij / z;
            let pij = p.get(i, j);
            if pij > 0.0 {
                kl += pij * (pij / q.max(Q_FLOOR)).ln();
            }
            let f = 4.0 * (exaggeration * pij - q) * wij;
            grad[i][0] += f * (y[i][0] - y[j][0]);
            grad[i][1] += f * (y[i][1] - y[j][1]);
        }
    }
    (kl, grad)
}

/// KL(P || Q) for the Student-t embedding kernel and its gradient.
pub fn kl_and_gradient(p: &AffinityMatrix, y: &[[f64; 2]]) -> Result<(f64, Vec<[f64; 2]>)> {
    if y.len() != p.n() {
        return Err(Error::Shape(format!(
            "{} embedding points for a {}-point affinity matrix",
            y.len(),
            p.n()
        )));
    }
    Ok(kl_grad_scaled(p, y, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// KL divergence against the unexaggerated affinities, one per iteration,
    /// measured before that iteration's update.
    pub kl_trace: Vec<f64>,
}

fn center(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let mx = y.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = y.iter().map(|p| p[1]).sum::<f64>() / n;
    for p in y.iter_mut() {
        p[0] -= mx;
        p[1] -= my;
    }
}

pub fn tsne(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    cfg.validate_for(x.len())?;
    check_rows(x)?;
    let x = jitter_duplicates(x);
    let p = symmetrize(&conditional_affinities(&x, cfg.perplexity)?);
    let n = x.len();

    let mut rng = derive_stream(cfg.seed, stream_key("tsne/init", &[]));
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    center(&mut y);
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut kl_trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let early = it < cfg.switch_iteration;
        let exaggeration = if early { cfg.early_exaggeration } else { 1.0 };
        let momentum = if early { cfg.initial_momentum } else { cfg.final_momentum };
        let (kl, grad) = kl_grad_scaled(&p, &y, exaggeration);
        if !kl.is_finite() {
            return Err(Error::Training(format!("t-SNE KL became {kl} at iteration {it}")));
        }
        kl_trace.push(kl);
        for (((v, g), gain), pt) in velocity.iter_mut().zip(&grad).zip(gains.iter_mut()).zip(y.iter_mut()) {
            for d in 0..2 {
                // Per-coordinate step sizes grow while the gradient keeps
                // opposing the velocity and shrink once they agree.
                gain[d] = if (g[d] > 0.0) != (v[d] > 0.0) {
                    gain[d] + GAIN_STEP
                } else {
                    (gain[d] * GAIN_DECAY).max(MIN_GAIN)
                };
                v[d] = momentum * v[d] - cfg.learning_rate * gain[d] * g[d];
                pt[d] += v[d];
            }
        }
        center(&mut y);
    }
    info!(
        "t-SNE finished: {n} points, KL {:.4} -> {:.4}",
        kl_trace.first().copied().unwrap_or(f64::NAN),
        kl_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(TsneResult { coords: y, kl_trace })
}

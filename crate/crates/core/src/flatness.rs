//! Flatness measurement: the box-neighborhood sharpness metric over a random
//! projection subspace, and 2-D loss contour grids through three anchors.

use thiserror::Error;

use crate::model::ParamStore;
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Result as TensorResult, Tensor};

#[derive(Debug, Error)]
pub enum FlatnessError {
    #[error("non-finite loss during ascent at |z| = {z_norm}")]
    NonFiniteAscent { z_norm: f64 },
    #[error("projection basis is rank-deficient")]
    RankDeficient,
    #[error("anchors coincide (zero direction)")]
    DegenerateAnchors,
    #[error("anchors are collinear; the plane is undefined")]
    CollinearAnchors,
    #[error("anchor parameter registries do not match")]
    AnchorMismatch,
    #[error("grid resolution must be >= 2")]
    BadResolution,
    #[error("sharpness config invalid: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, FlatnessError>;

#[derive(Debug, Clone)]
pub struct SharpnessConfig {
    /// Neighborhood scale of the box half-widths.
    pub eps: f64,
    /// Target subspace dimension; capped at the parameter count.
    pub subspace: usize,
    pub projection_seed: u64,
    /// Ascent steps per restart.
    pub steps: usize,
    /// Restart count, always including the zero start.
    pub restarts: usize,
}

impl Default for SharpnessConfig {
    fn default() -> Self {
        SharpnessConfig { eps: 1e-3, subspace: 100, projection_seed: 0, steps: 30, restarts: 3 }
    }
}

impl SharpnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps <= 0.0 || !self.eps.is_finite() {
            return Err(FlatnessError::BadConfig("eps must be positive".into()));
        }
        if self.steps == 0 || self.restarts == 0 || self.subspace == 0 {
            return Err(FlatnessError::BadConfig(
                "steps, restarts and subspace must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Random n x p projection with normalized columns and a cached Gram factor
/// for least-squares application of the pseudo-inverse.
pub struct ProjectionBasis {
    n: usize,
    p: usize,
    /// Row-major n x p.
    a: Vec<f64>,
    /// Cholesky factor (lower) of A^T A, p x p row-major.
    chol: Vec<f64>,
}

impl ProjectionBasis {
    pub fn generate(n: usize, subspace: usize, seed: u64) -> Result<Self> {
        let p = subspace.min(n);
        let mut rng = Rng::new(derive_seed(seed, "projection-basis"));
        let mut a = vec![0.0; n * p];
        for v in a.iter_mut() {
            *v = rng.normal();
        }
        for j in 0..p {
            let norm = (0..n).map(|i| a[i * p + j] * a[i * p + j]).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(FlatnessError::RankDeficient);
            }
            for i in 0..n {
                a[i * p + j] /= norm;
            }
        }
        let gram = gram_matrix(&a, n, p);
        let chol = cholesky(&gram, p).ok_or(FlatnessError::RankDeficient)?;
        Ok(ProjectionBasis { n, p, a, chol })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// A z: project subspace coordinates up to parameter space.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.p);
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            let row = &self.a[i * self.p..(i + 1) * self.p];
            out[i] = row.iter().zip(z).map(|(&a, &b)| a * b).sum();
        }
        out
    }

    /// A^T g: pull a parameter-space gradient back to the subspace.
    pub fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.n);
        let mut out = vec![0.0; self.p];
        for i in 0..self.n {
            let row = &self.a[i * self.p..(i + 1) * self.p];
            for (o, &aij) in out.iter_mut().zip(row) {
                *o += aij * g[i];
            }
        }
        out
    }

    /// A+ w = (A^T A)^-1 A^T w via the cached Cholesky factor.
    pub fn pseudo_apply(&self, w: &[f64]) -> Vec<f64> {
        let rhs = self.apply_transpose(w);
        chol_solve(&self.chol, self.p, &rhs)
    }

    /// Max |(A+ A) - I| entry, for validating the factorization.
    pub fn pseudo_identity_error(&self) -> f64 {
        let gram = gram_matrix(&self.a, self.n, self.p);
        let mut worst = 0.0f64;
        for j in 0..self.p {
            let col: Vec<f64> = (0..self.p).map(|i| gram[i * self.p + j]).collect();
            let x = chol_solve(&self.chol, self.p, &col);
            for (i, &v) in x.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - expect).abs());
            }
        }
        worst
    }
}

fn gram_matrix(a: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut m = vec![0.0; p * p];
    for row in a.chunks(p).take(n) {
        for i in 0..p {
            let ai = row[i];
            if ai == 0.0 {
                continue;
            }
            for j in 0..p {
                m[i * p + j] += ai * row[j];
            }
        }
    }
    m
}

/// Dense Cholesky of an SPD matrix; None if not positive definite.
fn cholesky(m: &[f64], p: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut sum = m[i * p + j];
            for k in 0..j {
                sum -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * p + i] = sum.sqrt();
            } else {
                l[i * p + j] = sum / l[j * p + j];
            }
        }
    }
    Some(l)
}

fn chol_solve(l: &[f64], p: usize, b: &[f64]) -> Vec<f64> {
    // Forward substitution L y = b.
    let mut y = vec![0.0; p];
    for i in 0..p {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * p + k] * y[k];
        }
        y[i] = sum / l[i * p + i];
    }
    // Back substitution L^T x = y.
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let mut sum = y[i];
        for k in (i + 1)..p {
            sum -= l[k * p + i] * x[k];
        }
        x[i] = sum / l[i * p + i];
    }
    x
}

#[derive(Debug, Clone)]
pub struct SharpnessResult {
    /// 100 * (max loss - base loss) / (1 + base loss).
    pub phi: f64,
    pub base_loss: f64,
    pub max_loss: f64,
    /// Subspace point achieving the maximum.
    pub best_z: Vec<f64>,
}

/// Maximize the loss over the box neighborhood of the projected subspace by
/// coordinate-sign ascent with restarts, then normalize the rise.
///
/// The box half-width per coordinate is eps * (|(A+ w)_i| + 1); ascent steps
/// are one tenth of the half-width, clamped to the box. The zero start makes
/// the result nonnegative. `warm_start` seeds one extra restart.
pub fn sharpness_metric(
    w: &ParamStore,
    mut loss_and_grad: impl FnMut(&ParamStore) -> TensorResult<(f64, Vec<Tensor>)>,
    cfg: &SharpnessConfig,
    warm_start: Option<&[f64]>,
) -> Result<SharpnessResult> {
    cfg.validate()?;
    let flat = w.to_flat();
    let n = flat.len();
    let basis = ProjectionBasis::generate(n, cfg.subspace, cfg.projection_seed)?;
    let p = basis.p();
    let aw = basis.pseudo_apply(&flat);
    let half: Vec<f64> = aw.iter().map(|&v| cfg.eps * (v.abs() + 1.0)).collect();

    let mut probe = w.clone();
    let mut eval = |z: &[f64],
                    probe: &mut ParamStore|
     -> Result<(f64, Vec<f64>)> {
        let dz = basis.apply(z);
        let mut moved = flat.clone();
        for (m, d) in moved.iter_mut().zip(&dz) {
            *m += d;
        }
        probe.load_flat(&moved);
        let (loss, grads) = loss_and_grad(probe).map_err(|_| FlatnessError::NonFiniteAscent {
            z_norm: z.iter().map(|v| v * v).sum::<f64>().sqrt(),
        })?;
        let mut gflat = Vec::with_capacity(n);
        for g in &grads {
            gflat.extend_from_slice(g.data());
        }
        Ok((loss, basis.apply_transpose(&gflat)))
    };

    let zero = vec![0.0; p];
    let (base_loss, _) = eval(&zero, &mut probe)?;
    let mut best_loss = base_loss;
    let mut best_z = zero.clone();

    let mut starts: Vec<Vec<f64>> = vec![zero.clone()];
    if let Some(ws) = warm_start {
        let clamped: Vec<f64> =
            ws.iter().zip(&half).map(|(&z, &h)| z.clamp(-h, h)).collect();
        starts.push(clamped);
    }
    let mut rng = Rng::new(derive_seed(cfg.projection_seed, "ascent-restarts"));
    while starts.len() < cfg.restarts + usize::from(warm_start.is_some()) {
        starts.push(half.iter().map(|&h| rng.range(-h, h)).collect());
    }

    for start in starts {
        let mut z = start;
        for _ in 0..cfg.steps {
            let (loss, gz) = eval(&z, &mut probe)?;
            if loss > best_loss {
                best_loss = loss;
                best_z = z.clone();
            }
            for i in 0..p {
                let step = half[i] / 10.0;
                let dir = if gz[i] > 0.0 {
                    1.0
                } else if gz[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                z[i] = (z[i] + step * dir).clamp(-half[i], half[i]);
            }
        }
        let (loss, _) = eval(&z, &mut probe)?;
        if loss > best_loss {
            best_loss = loss;
            best_z = z.clone();
        }
    }

    let phi = 100.0 * (best_loss - base_loss) / (1.0 + base_loss);
    Ok(SharpnessResult { phi, base_loss, max_loss: best_loss, best_z })
}

/// Row of a sharpness summary table.
#[derive(Debug, Clone)]
pub struct SharpnessRow {
    pub eps: f64,
    pub optimizer: String,
    pub mean: f64,
    pub stddev: f64,
    pub n: usize,
}

/// Aggregate phi per (optimizer label, eps) over a set of checkpoints.
pub fn sharpness_table(
    entries: &[(String, ParamStore)],
    eps_grid: &[f64],
    base_cfg: &SharpnessConfig,
    mut loss_and_grad: impl FnMut(&ParamStore) -> TensorResult<(f64, Vec<Tensor>)>,
) -> Result<Vec<SharpnessRow>> {
    let mut labels: Vec<String> = entries.iter().map(|(l, _)| l.clone()).collect();
    labels.sort();
    labels.dedup();
    let mut rows = Vec::new();
    for &eps in eps_grid {
        for label in &labels {
            let mut phis = Vec::new();
            for (l, ps) in entries {
                if l != label {
                    continue;
                }
                let cfg = SharpnessConfig { eps, ..base_cfg.clone() };
                let r = sharpness_metric(ps, &mut loss_and_grad, &cfg, None)?;
                phis.push(r.phi);
            }
            let n = phis.len();
            let mean = phis.iter().sum::<f64>() / n.max(1) as f64;
            let var = if n > 1 {
                phis.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            rows.push(SharpnessRow {
                eps,
                optimizer: label.clone(),
                mean,
                stddev: var.sqrt(),
                n,
            });
        }
    }
    Ok(rows)
}

pub fn sharpness_table_csv(rows: &[SharpnessRow]) -> String {
    let mut out = String::from("eps,optimizer,mean,stddev,n\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.eps, r.optimizer, r.mean, r.stddev, r.n));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSource {
    A,
    B,
}

#[derive(Debug, Clone)]
pub struct ContourSpec {
    pub resolution: usize,
    /// Axis range in units of the first anchor direction.
    pub range: (f64, f64),
    pub head_source: HeadSource,
}

impl Default for ContourSpec {
    fn default() -> Self {
        ContourSpec { resolution: 21, range: (-0.5, 1.5), head_source: HeadSource::A }
    }
}

#[derive(Debug, Clone)]
pub struct ContourGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// losses[ib * alphas.len() + ia]
    pub losses: Vec<f64>,
    /// Coordinates of the second trained anchor in the plane.
    pub b_alpha: f64,
    pub b_beta: f64,
}

impl ContourGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,loss\n");
        for (ib, &b) in self.betas.iter().enumerate() {
            for (ia, &a) in self.alphas.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", a, b, self.losses[ib * self.alphas.len() + ia]));
            }
        }
        out
    }

    pub fn loss_at(&self, ia: usize, ib: usize) -> f64 {
        self.losses[ib * self.alphas.len() + ia]
    }

    /// Width (in alpha units) of the sublevel region around a grid anchor,
    /// scanning its row until the loss exceeds the threshold.
    pub fn basin_width_at(&self, ia: usize, ib: usize, threshold: f64) -> f64 {
        let res = self.alphas.len();
        let step = if res > 1 { self.alphas[1] - self.alphas[0] } else { 0.0 };
        let mut cells = 1usize;
        let mut j = ia;
        while j > 0 && self.loss_at(j - 1, ib) <= threshold {
            j -= 1;
            cells += 1;
        }
        let mut j = ia;
        while j + 1 < res && self.loss_at(j + 1, ib) <= threshold {
            j += 1;
            cells += 1;
        }
        cells as f64 * step
    }
}

fn head_coord_mask(ps: &ParamStore) -> Vec<bool> {
    let mut mask = Vec::with_capacity(ps.coord_count());
    for e in ps.entries() {
        let is_head = e.name.starts_with("head.");
        mask.extend(std::iter::repeat_n(is_head, e.tensor.numel()));
    }
    mask
}

/// Evaluate the loss over the plane spanned by two trained anchors relative
/// to an initialization, holding the classifier head fixed to one anchor's.
///
/// The first axis is u = a - init; the second is the component of b - init
/// orthogonal to u, rescaled to |u|. Grid points (0,0) and (1,0) reproduce
/// the init and first anchor exactly.
pub fn contour_grid(
    init: &ParamStore,
    anchor_a: &ParamStore,
    anchor_b: &ParamStore,
    spec: &ContourSpec,
    mut loss_fn: impl FnMut(&ParamStore) -> TensorResult<f64>,
) -> Result<ContourGrid> {
    if spec.resolution < 2 {
        return Err(FlatnessError::BadResolution);
    }
    let same_registry = |x: &ParamStore, y: &ParamStore| {
        x.len() == y.len()
            && x.entries()
                .iter()
                .zip(y.entries())
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape())
    };
    if !same_registry(init, anchor_a) || !same_registry(init, anchor_b) {
        return Err(FlatnessError::AnchorMismatch);
    }

    let head = head_coord_mask(init);
    let base = init.to_flat();
    let fa = anchor_a.to_flat();
    let fb = anchor_b.to_flat();
    let head_values: Vec<f64> = match spec.head_source {
        HeadSource::A => fa.clone(),
        HeadSource::B => fb.clone(),
    };

    let body = |v: &[f64]| -> Vec<f64> {
        v.iter().zip(&head).filter(|(_, &h)| !h).map(|(&x, _)| x).collect()
    };
    let u: Vec<f64> =
        body(&fa).iter().zip(body(&base)).map(|(&a, b)| a - b).collect();
    let unorm_sq: f64 = u.iter().map(|v| v * v).sum();
    if unorm_sq == 0.0 {
        return Err(FlatnessError::DegenerateAnchors);
    }
    let vraw: Vec<f64> =
        body(&fb).iter().zip(body(&base)).map(|(&a, b)| a - b).collect();
    let proj: f64 = vraw.iter().zip(&u).map(|(&a, &b)| a * b).sum::<f64>() / unorm_sq;
    let mut v: Vec<f64> = vraw.iter().zip(&u).map(|(&a, &b)| a - proj * b).collect();
    let vnorm_sq: f64 = v.iter().map(|x| x * x).sum();
    if vnorm_sq == 0.0 {
        return Err(FlatnessError::CollinearAnchors);
    }
    let rescale = (unorm_sq / vnorm_sq).sqrt();
    for x in v.iter_mut() {
        *x *= rescale;
    }
    let b_alpha = proj;
    let b_beta = (vnorm_sq.sqrt() * rescale) / unorm_sq.sqrt() / rescale;
    // beta coordinate of b: |v_perp| / |u| since v is scaled to |u|.
    let b_beta = if b_beta.is_finite() { (vnorm_sq).sqrt() / unorm_sq.sqrt() } else { 0.0 };

    let res = spec.resolution;
    let (lo, hi) = spec.range;
    let lin = |k: usize| lo + (hi - lo) * k as f64 / (res - 1) as f64;
    let alphas: Vec<f64> = (0..res).map(lin).collect();
    let betas: Vec<f64> = (0..res).map(lin).collect();

    let mut probe = init.clone();
    let mut losses = vec![0.0; res * res];
    let body_idx: Vec<usize> =
        (0..base.len()).filter(|&i| !head[i]).collect();
    let mut flat = base.clone();
    for (i, &h) in head.iter().enumerate() {
        if h {
            flat[i] = head_values[i];
        }
    }
    for (ib, &beta) in betas.iter().enumerate() {
        for (ia, &alpha) in alphas.iter().enumerate() {
            if alpha == 0.0 && beta == 0.0 {
                for (&bi, &bv) in body_idx.iter().zip(body(&base).iter()) {
                    flat[bi] = bv;
                }
            } else if alpha == 1.0 && beta == 0.0 {
                for (&bi, &bv) in body_idx.iter().zip(body(&fa).iter()) {
                    flat[bi] = bv;
                }
            } else {
                for (k, &bi) in body_idx.iter().enumerate() {
                    flat[bi] = base[bi] + alpha * u[k] + beta * v[k];
                }
            }
            probe.load_flat(&flat);
            losses[ib * res + ia] = loss_fn(&probe)?;
        }
    }
    Ok(ContourGrid { alphas, betas, losses, b_alpha, b_beta })
}

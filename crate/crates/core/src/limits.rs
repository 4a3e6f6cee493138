//! Limit objects: the deterministic fluid limit, the Galerkin mean and
//! covariance equations of the Gaussian fluctuation limit, and the
//! Euler–Maruyama Langevin approximation in the same sine basis.

use nalgebra::{DMatrix, DVector};

use crate::engine::RngStream;
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, solve_tridiagonal_const, sym_norm, symmetrize};
use crate::models::{JacobianBlocks, ModelSpec};
use crate::spatial::{laplace_eigenvalue, Grid};

const BLOW_UP: f64 = 1e6;
const PSD_TOL: f64 = 1e-8;
const SQRT_TOL: f64 = 1e-10;
/// RK4 stability radius on the negative real axis, with margin.
const RK4_RADIUS: f64 = 2.5;

/// Time series of the fluid limit `(u, p)` on the grid, linear in `t`
/// between stored steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicSolution {
    pub grid: Grid,
    pub times: Vec<f64>,
    /// Interior potential per step; empty vectors for the neural field.
    pub u: Vec<Vec<f64>>,
    /// Closed-grid activity per step.
    pub p: Vec<Vec<f64>>,
}

impl DeterministicSolution {
    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("solution has at least one step")
    }

    fn bracket(&self, t: f64) -> (usize, f64) {
        let n = self.times.len();
        if t <= self.times[0] || n == 1 {
            return (0, 0.0);
        }
        if t >= self.times[n - 1] {
            return (n - 2, 1.0);
        }
        let i = self.times.partition_point(|&s| s <= t) - 1;
        let w = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        (i, w)
    }

    /// `(u(t), p(t))` by linear interpolation.
    pub fn at(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let (i, w) = self.bracket(t);
        if self.times.len() == 1 {
            return (self.u[0].clone(), self.p[0].clone());
        }
        let lerp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect();
        (lerp(&self.u[i], &self.u[i + 1]), lerp(&self.p[i], &self.p[i + 1]))
    }
}

/// Solves the fluid-limit system to `horizon` with step `dt`.
///
/// Compartmental: IMEX for `u̇ = Δu + p(v̄ − u)`, Heun for `ṗ = F(u, p)`.
/// Neural field: Heun for `ṗ = −p + f(∫ w p)`.
pub fn solve_deterministic(spec: &ModelSpec, u0: &[f64], p0: &[f64], horizon: f64, dt: f64) -> Result<DeterministicSolution> {
    let grid = *spec.grid();
    let m = grid.m();
    if !(horizon > 0.0) || !(dt > 0.0) {
        return Err(Error::invalid("horizon and dt must be positive"));
    }
    if p0.len() != m + 2 {
        return Err(Error::invalid("initial activity must be a closed grid vector"));
    }
    let mut u = if spec.has_potential() {
        if u0.len() != m {
            return Err(Error::invalid("initial potential must be an interior grid vector"));
        }
        u0.to_vec()
    } else {
        Vec::new()
    };
    if let ModelSpec::Compartmental(_) = spec {
        if p0.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::invalid("initial activity must lie in [0, 1]"));
        }
    }
    let steps = (horizon / dt - 1e-9).ceil().max(1.0) as usize;
    let dt = horizon / steps as f64;
    let mut p = p0.to_vec();
    let mut out = DeterministicSolution {
        grid,
        times: Vec::with_capacity(steps + 1),
        u: Vec::with_capacity(steps + 1),
        p: Vec::with_capacity(steps + 1),
    };
    out.times.push(0.0);
    out.u.push(u.clone());
    out.p.push(p.clone());
    let mut scratch = vec![0.0; m];
    for n in 1..=steps {
        let k1 = spec.drift_f(&u, &p)?;
        let p_pred: Vec<f64> = p.iter().zip(&k1).map(|(a, b)| a + dt * b).collect();
        if let ModelSpec::Compartmental(s) = spec {
            let h = grid.spacing();
            let r = dt / (h * h);
            for j in 0..m {
                u[j] += dt * p[j + 1] * (s.v_bar - u[j]);
            }
            solve_tridiagonal_const(1.0 + 2.0 * r, -r, &mut u, &mut scratch)?;
            if u.iter().any(|x| x.abs() > BLOW_UP) {
                return Err(Error::Numerical(format!("potential blew up at t = {}", n as f64 * dt)));
            }
        }
        let k2 = spec.drift_f(&u, &p_pred)?;
        for j in 0..p.len() {
            p[j] += 0.5 * dt * (k1[j] + k2[j]);
        }
        if p.iter().any(|x| !x.is_finite() || x.abs() > BLOW_UP) {
            return Err(Error::Numerical(format!("activity blew up at t = {}", n as f64 * dt)));
        }
        out.times.push(if n == steps { horizon } else { n as f64 * dt });
        out.u.push(u.clone());
        out.p.push(p.clone());
    }
    Ok(out)
}

/// First `N` sine modes sampled on the interior grid, with the cached
/// kernel image for the neural field.
#[derive(Clone, Debug)]
pub struct Projector {
    n: usize,
    grid: Grid,
    /// `m × N`, column `i` is `φ_{i+1}` on interior nodes.
    modes: DMatrix<f64>,
    /// Neural field: `(K φ_j)` on interior nodes, `m × N`.
    kernel_modes: Option<DMatrix<f64>>,
    coupled: bool,
}

impl Projector {
    pub fn new(spec: &ModelSpec, n: usize) -> Result<Self> {
        let grid = *spec.grid();
        let m = grid.m();
        if n == 0 || n > m {
            return Err(Error::invalid(format!("basis size N = {n} must lie in 1..={m}")));
        }
        let modes = DMatrix::from_fn(m, n, |j, i| crate::spatial::sine_basis(i + 1, grid.node(j + 1), grid.length()));
        let kernel_modes = match spec {
            ModelSpec::NeuralField(s) => {
                let k = s.kernel_quadrature();
                Some(DMatrix::from_fn(m, n, |j, i| (0..m).map(|q| k[(j + 1, q + 1)] * modes[(q, i)]).sum()))
            }
            ModelSpec::Compartmental(_) => None,
        };
        Ok(Self { n, grid, modes, kernel_modes, coupled: spec.has_potential() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Dimension of the Galerkin state: `2N` (compartmental) or `N`.
    pub fn dim(&self) -> usize {
        if self.coupled { 2 * self.n } else { self.n }
    }

    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    /// `(φ_i, w φ_j)` in the discrete inner product for an interior weight `w`.
    fn weighted(&self, w: impl Fn(usize) -> f64) -> DMatrix<f64> {
        let h = self.grid.spacing();
        let m = self.grid.m();
        let mut scaled = self.modes.clone();
        for j in 0..m {
            let c = h * w(j);
            scaled.row_mut(j).scale_mut(c);
        }
        let mut out = self.modes.transpose() * scaled;
        symmetrize(&mut out);
        out
    }

    /// Sine coefficients of a grid vector by the discrete inner product.
    pub fn coefficients(&self, v: &[f64]) -> DVector<f64> {
        let h = self.grid.spacing();
        let m = self.grid.m();
        DVector::from_fn(self.n, |i, _| h * (0..m).map(|j| self.grid.node_value(v, j + 1) * self.modes[(j, i)]).sum::<f64>())
    }
}

/// Galerkin drift matrix `J` and projected covariance `G̃` at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedOperators {
    pub j: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

/// Projects the linearized drift and the noise covariance at `(u, p)`.
pub fn project_operators(spec: &ModelSpec, proj: &Projector, u: &[f64], p: &[f64]) -> Result<ProjectedOperators> {
    let n = proj.n;
    let l = proj.grid.length();
    let sigma = spec.variance_density(u, p)?;
    let g = proj.weighted(|j| sigma[j + 1]);
    let jac = spec.drift_jacobians(u, p)?;
    let j = match &jac {
        JacobianBlocks::Compartmental { uu, up, pu, pp, .. } => {
            let mut j = DMatrix::zeros(2 * n, 2 * n);
            let mut a = proj.weighted(|q| uu[q]);
            for i in 0..n {
                a[(i, i)] -= laplace_eigenvalue(i + 1, l);
            }
            j.view_mut((0, 0), (n, n)).copy_from(&a);
            j.view_mut((0, n), (n, n)).copy_from(&proj.weighted(|q| up[q]));
            j.view_mut((n, 0), (n, n)).copy_from(&proj.weighted(|q| pu[q + 1]));
            j.view_mut((n, n), (n, n)).copy_from(&proj.weighted(|q| pp[q + 1]));
            j
        }
        JacobianBlocks::NeuralField { slope, .. } => {
            let km = proj.kernel_modes.as_ref().expect("neural-field projector caches kernel modes");
            let h = proj.grid.spacing();
            let mut scaled = km.clone();
            for q in 0..proj.grid.m() {
                scaled.row_mut(q).scale_mut(h * slope[q + 1]);
            }
            let mut j = proj.modes.transpose() * scaled;
            for i in 0..n {
                j[(i, i)] -= 1.0;
            }
            j
        }
    };
    Ok(ProjectedOperators { j, g })
}

/// Projected operators along a deterministic solution at time `t`.
pub fn project_at(spec: &ModelSpec, proj: &Projector, sol: &DeterministicSolution, t: f64) -> Result<ProjectedOperators> {
    let (u, p) = sol.at(t);
    project_operators(spec, proj, &u, &p)
}

/// Embeds `G̃` into the noise block: `diag(0, G̃)` for the compartmental model.
fn noise_block(g: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let n = g.nrows();
    let mut out = DMatrix::zeros(dim, dim);
    out.view_mut((dim - n, dim - n), (n, n)).copy_from(g);
    out
}

/// Galerkin mean and covariance `(m(t), R(t))` at stored times.
#[derive(Clone, Debug, PartialEq)]
pub struct GalerkinGaussian {
    pub n: usize,
    pub coupled: bool,
    pub times: Vec<f64>,
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

impl GalerkinGaussian {
    fn index_at(&self, t: f64) -> (usize, f64) {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return (0, 0.0);
        }
        if t >= self.times[n - 1] {
            return (n - 2, 1.0);
        }
        let i = self.times.partition_point(|&s| s <= t) - 1;
        (i, (t - self.times[i]) / (self.times[i + 1] - self.times[i]))
    }

    /// `R(t)` by linear interpolation between stored steps.
    pub fn cov_at(&self, t: f64) -> DMatrix<f64> {
        if self.times.len() == 1 {
            return self.cov[0].clone();
        }
        let (i, w) = self.index_at(t);
        &self.cov[i] * (1.0 - w) + &self.cov[i + 1] * w
    }

    pub fn mean_at(&self, t: f64) -> DVector<f64> {
        if self.times.len() == 1 {
            return self.mean[0].clone();
        }
        let (i, w) = self.index_at(t);
        &self.mean[i] * (1.0 - w) + &self.mean[i + 1] * w
    }

    /// `⟨R(t) v, v⟩` for a coefficient vector `v`.
    pub fn variance_of(&self, t: f64, v: &DVector<f64>) -> f64 {
        (v.transpose() * self.cov_at(t) * v)[(0, 0)]
    }
}

/// Callback form of `t ↦ (J(t), G̃(t))`.
pub trait OperatorPath {
    fn dim(&self) -> usize;
    fn at(&self, t: f64) -> Result<ProjectedOperators>;
}

/// Operators along a deterministic solution.
pub struct SolutionPath<'a> {
    pub spec: &'a ModelSpec,
    pub projector: &'a Projector,
    pub solution: &'a DeterministicSolution,
}

impl OperatorPath for SolutionPath<'_> {
    fn dim(&self) -> usize {
        self.projector.dim()
    }

    fn at(&self, t: f64) -> Result<ProjectedOperators> {
        project_at(self.spec, self.projector, self.solution, t)
    }
}

/// Time-independent operators.
pub struct ConstantPath(pub ProjectedOperators);

impl OperatorPath for ConstantPath {
    fn dim(&self) -> usize {
        self.0.j.nrows()
    }

    fn at(&self, _t: f64) -> Result<ProjectedOperators> {
        Ok(self.0.clone())
    }
}

/// Gershgorin bound on the spectral radius.
fn gershgorin(j: &DMatrix<f64>) -> f64 {
    (0..j.nrows()).map(|i| j.row(i).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// RK4 for `ṁ = Jm`, `Ṙ = JR + RJᵀ + diag(0, G̃)`. `dt` is reduced when
/// the Gershgorin bound of `J` requires it for stability.
pub fn solve_mean_cov(
    path: &dyn OperatorPath,
    n: usize,
    coupled: bool,
    m0: &DVector<f64>,
    r0: &DMatrix<f64>,
    horizon: f64,
    dt: f64,
) -> Result<GalerkinGaussian> {
    let dim = path.dim();
    if m0.len() != dim || r0.nrows() != dim || r0.ncols() != dim {
        return Err(Error::invalid(format!("initial mean/covariance must have dimension {dim}")));
    }
    if !(horizon > 0.0 && dt > 0.0) {
        return Err(Error::invalid("horizon and dt must be positive"));
    }
    let r0_norm = sym_norm(r0);
    if min_eigenvalue(r0) < -PSD_TOL * r0_norm.max(f64::MIN_POSITIVE) {
        return Err(Error::invalid("initial covariance is not positive semidefinite"));
    }
    let start = path.at(0.0)?;
    let end = path.at(horizon)?;
    let rho = gershgorin(&start.j).max(gershgorin(&end.j));
    let stable = if rho > 0.0 { RK4_RADIUS / (2.0 * rho) } else { f64::INFINITY };
    let step = dt.min(stable);
    let steps = (horizon / step - 1e-9).ceil().max(1.0) as usize;
    let h = horizon / steps as f64;
    let scale = r0_norm.max(horizon * sym_norm(&start.g)).max(horizon * sym_norm(&end.g)).max(1e-300);

    let rhs = |ops: &ProjectedOperators, m: &DVector<f64>, r: &DMatrix<f64>| {
        let jr = &ops.j * r;
        let dr = &jr + jr.transpose() + noise_block(&ops.g, dim);
        (&ops.j * m, dr)
    };

    let mut m = m0.clone();
    let mut r = r0.clone();
    let mut out = GalerkinGaussian { n, coupled, times: vec![0.0], mean: vec![m.clone()], cov: vec![r.clone()] };
    let mut ops0 = start;
    for k in 0..steps {
        let t = k as f64 * h;
        let ops_mid = path.at(t + 0.5 * h)?;
        let ops1 = if k + 1 == steps { path.at(horizon)? } else { path.at(t + h)? };
        let (k1m, k1r) = rhs(&ops0, &m, &r);
        let (k2m, k2r) = rhs(&ops_mid, &(&m + &k1m * (0.5 * h)), &(&r + &k1r * (0.5 * h)));
        let (k3m, k3r) = rhs(&ops_mid, &(&m + &k2m * (0.5 * h)), &(&r + &k2r * (0.5 * h)));
        let (k4m, k4r) = rhs(&ops1, &(&m + &k3m * h), &(&r + &k3r * h));
        m += (k1m + k2m * 2.0 + k3m * 2.0 + k4m) * (h / 6.0);
        r += (k1r + k2r * 2.0 + k3r * 2.0 + k4r) * (h / 6.0);
        symmetrize(&mut r);
        let norm = sym_norm(&r);
        if !norm.is_finite() || norm > BLOW_UP * scale {
            return Err(Error::Numerical(format!(
                "covariance grew by more than 1e6 at t = {:.4}; reduce N or the step",
                t + h
            )));
        }
        let min = min_eigenvalue(&r);
        if min < -PSD_TOL * norm {
            return Err(Error::NotPsd { min_eig: min, norm });
        }
        out.times.push(if k + 1 == steps { horizon } else { t + h });
        out.mean.push(m.clone());
        out.cov.push(r.clone());
        ops0 = ops1;
    }
    Ok(out)
}

/// Symmetric square root `V diag(√λ) Vᵀ` of a PSD matrix; eigenvalues in
/// `[−10⁻¹⁰‖M‖, 0)` are clamped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid("sqrt_psd needs a square matrix"));
    }
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let norm = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if min < -SQRT_TOL * norm {
        return Err(Error::NotPsd { min_eig: min, norm });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&roots) * v.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// Precomputed Euler–Maruyama schedule: `J_k` and the noise factor
/// `[0; √G̃_k]` at every step, shared by all replicas.
#[derive(Clone, Debug)]
pub struct LangevinPlan {
    pub dt: f64,
    pub times: Vec<f64>,
    drift: Vec<DMatrix<f64>>,
    noise: Vec<DMatrix<f64>>,
    /// Step indices at which states are recorded.
    record_steps: Vec<usize>,
}

impl LangevinPlan {
    /// Builds the schedule along an operator path; `record` lists the output
    /// times, each snapped to the nearest step.
    pub fn new(path: &dyn OperatorPath, horizon: f64, dt: f64, record: &[f64]) -> Result<Self> {
        if !(horizon > 0.0 && dt > 0.0) {
            return Err(Error::invalid("horizon and dt must be positive"));
        }
        let dim = path.dim();
        let steps = (horizon / dt - 1e-9).ceil().max(1.0) as usize;
        let h = horizon / steps as f64;
        let mut drift = Vec::with_capacity(steps);
        let mut noise = Vec::with_capacity(steps);
        for k in 0..steps {
            let ops = path.at(k as f64 * h)?;
            let s = sqrt_psd(&ops.g)?;
            let nn = s.nrows();
            let mut b = DMatrix::zeros(dim, nn);
            b.view_mut((dim - nn, 0), (nn, nn)).copy_from(&s);
            drift.push(ops.j);
            noise.push(b);
        }
        let record_steps = record
            .iter()
            .map(|&t| ((t / h).round() as usize).min(steps))
            .collect();
        let times = (0..=steps).map(|k| if k == steps { horizon } else { k as f64 * h }).collect();
        Ok(Self { dt: h, times, drift, noise, record_steps })
    }

    pub fn dim(&self) -> usize {
        self.drift.first().map_or(0, |j| j.nrows())
    }

    pub fn steps(&self) -> usize {
        self.drift.len()
    }

    /// Times at which [`simulate_langevin`] records states.
    pub fn record_times(&self) -> Vec<f64> {
        self.record_steps.iter().map(|&k| self.times[k]).collect()
    }
}

/// Initial condition of a Langevin path.
#[derive(Clone, Debug, PartialEq)]
pub enum LangevinInit {
    Zero,
    Fixed(DVector<f64>),
    /// Sample from `N(mean, cov)`.
    Gaussian { mean: DVector<f64>, cov: DMatrix<f64> },
}

/// Galerkin coefficient states at the plan's record times.
#[derive(Clone, Debug, PartialEq)]
pub struct LangevinPath {
    pub seed: u64,
    pub stream: u64,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

/// Euler–Maruyama: `X⁺ = X + J X dt + [0; √G̃] √dt ξ`.
pub fn simulate_langevin(plan: &LangevinPlan, init: &LangevinInit, mut rng: RngStream) -> Result<LangevinPath> {
    let dim = plan.dim();
    let mut x = match init {
        LangevinInit::Zero => DVector::zeros(dim),
        LangevinInit::Fixed(v) => v.clone(),
        LangevinInit::Gaussian { mean, cov } => {
            let s = sqrt_psd(cov)?;
            let xi = DVector::from_fn(dim, |_, _| rng.normal());
            mean + s * xi
        }
    };
    if x.len() != dim {
        return Err(Error::invalid(format!("initial Langevin state must have dimension {dim}")));
    }
    let mut path = LangevinPath { seed: rng.seed(), stream: rng.stream(), times: Vec::new(), states: Vec::new() };
    let mut next = 0;
    let sq = plan.dt.sqrt();
    let record = |k: usize, x: &DVector<f64>, next: &mut usize, path: &mut LangevinPath| {
        while *next < plan.record_steps.len() && plan.record_steps[*next] == k {
            path.times.push(plan.times[k]);
            path.states.push(x.clone());
            *next += 1;
        }
    };
    record(0, &x, &mut next, &mut path);
    for k in 0..plan.steps() {
        let b = &plan.noise[k];
        let xi = DVector::from_fn(b.ncols(), |_, _| rng.normal());
        let dx = &plan.drift[k] * &x * plan.dt + b * xi * sq;
        x += dx;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("Langevin path became non-finite at step {k}")));
        }
        record(k + 1, &x, &mut next, &mut path);
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{CompartmentalSpec, Kernel, NeuralFieldSpec, ScalarFn};
    use crate::spatial::{build_partition, ChannelRule};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn comp(a: ScalarFn, b: ScalarFn, m: usize) -> ModelSpec {
        let part = build_partition(1.0, 2, &ChannelRule::Uniform(10), None).unwrap();
        ModelSpec::Compartmental(CompartmentalSpec::new(a, b, 1.0, part, Grid::new(1.0, m).unwrap()).unwrap())
    }

    fn nf(f: ScalarFn, w: Kernel, m: usize) -> ModelSpec {
        let part = build_partition(1.0, 2, &ChannelRule::Uniform(10), None).unwrap();
        ModelSpec::NeuralField(NeuralFieldSpec::new(f, w, part, Grid::new(1.0, m).unwrap()).unwrap())
    }

    #[test]
    fn neural_relaxation_closed_form() {
        let f = ScalarFn::logistic(1.0, 4.0, 0.5);
        let f0 = f.eval(0.0);
        let spec = nf(f, Kernel::Constant { value: 0.0 }, 31);
        let g = *spec.grid();
        let p0 = g.sample_closed(|x| 0.2 + 0.6 * x);
        let sol = solve_deterministic(&spec, &[], &p0, 1.0, 1e-3).unwrap();
        let mut err: f64 = 0.0;
        for (i, &t) in sol.times.iter().enumerate() {
            for j in 0..33 {
                let exact = f0 + (p0[j] - f0) * (-t).exp();
                err = err.max((sol.p[i][j] - exact).abs());
            }
        }
        assert!(err <= 1e-6, "err {err}");
    }

    #[test]
    fn gating_relaxation_closed_form() {
        let spec = comp(ScalarFn::constant(1.0), ScalarFn::constant(2.0), 31);
        let g = *spec.grid();
        let p0 = g.sample_closed(|x| x * x);
        let u0 = g.sine_mode(1);
        let sol = solve_deterministic(&spec, &u0, &p0, 1.0, 1e-3).unwrap();
        let mut err: f64 = 0.0;
        for (i, &t) in sol.times.iter().enumerate() {
            for j in 0..33 {
                let exact = 1.0 / 3.0 + (p0[j] - 1.0 / 3.0) * (-3.0 * t).exp();
                err = err.max((sol.p[i][j] - exact).abs());
            }
        }
        assert!(err <= 1e-6, "err {err}");
    }

    #[test]
    fn heun_is_second_order() {
        let spec = comp(ScalarFn::constant(1.0), ScalarFn::constant(2.0), 7);
        let p0 = vec![0.9; 9];
        let u0 = vec![0.0; 7];
        let err = |dt: f64| {
            let sol = solve_deterministic(&spec, &u0, &p0, 1.0, dt).unwrap();
            let exact = 1.0 / 3.0 + (0.9 - 1.0 / 3.0) * (-3.0f64).exp();
            (sol.p.last().unwrap()[4] - exact).abs()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((ratio - 4.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn interpolation_is_linear() {
        let spec = comp(ScalarFn::constant(1.0), ScalarFn::constant(2.0), 7);
        let sol = solve_deterministic(&spec, &vec![0.0; 7], &vec![0.0; 9], 0.1, 0.05).unwrap();
        let (_, p) = sol.at(0.025);
        assert_abs_diff_eq!(p[3], 0.5 * (sol.p[0][3] + sol.p[1][3]), epsilon = 1e-15);
    }

    #[test]
    fn projection_identities() {
        let spec = comp(ScalarFn::constant(1.0), ScalarFn::constant(2.0), 63);
        let proj = Projector::new(&spec, 6).unwrap();
        let ops = project_operators(&spec, &proj, &vec![0.3; 63], &vec![0.4; 65]).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let k = std::f64::consts::PI * (i + 1) as f64;
                let uu = if i == j { -k * k - 0.4 } else { 0.0 };
                assert_abs_diff_eq!(ops.j[(i, j)], uu, epsilon = 1e-12);
                let pp = if i == j { -3.0 } else { 0.0 };
                assert_abs_diff_eq!(ops.j[(6 + i, 6 + j)], pp, epsilon = 1e-12);
                // σ² = 1·0.6 + 2·0.4
                let g = if i == j { 1.4 } else { 0.0 };
                assert_abs_diff_eq!(ops.g[(i, j)], g, epsilon = 1e-12);
                assert_eq!(ops.g[(i, j)], ops.g[(j, i)]);
            }
        }
    }

    #[test]
    fn neural_projection_without_coupling() {
        let spec = nf(ScalarFn::logistic(1.0, 4.0, 0.5), Kernel::Constant { value: 0.0 }, 31);
        let proj = Projector::new(&spec, 4).unwrap();
        let ops = project_operators(&spec, &proj, &[], &vec![0.3; 33]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(ops.j[(i, j)], if i == j { -1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn linear_in_time_covariance() {
        let g0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let path = ConstantPath(ProjectedOperators { j: DMatrix::zeros(4, 4), g: g0.clone() });
        let r0 = DMatrix::identity(4, 4) * 0.1;
        let out = solve_mean_cov(&path, 2, true, &DVector::zeros(4), &r0, 1.0, 1e-2).unwrap();
        let expect = &r0 + noise_block(&g0, 4) * 1.0;
        assert!((out.cov.last().unwrap() - expect).abs().max() < 1e-12);
        assert!(out.mean.iter().all(|m| m.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn scalar_lyapunov_closed_form() {
        let g0 = 0.7;
        let path = ConstantPath(ProjectedOperators {
            j: DMatrix::from_element(1, 1, -1.0),
            g: DMatrix::from_element(1, 1, g0),
        });
        let r0 = 0.2;
        let out = solve_mean_cov(&path, 1, false, &DVector::from_element(1, 0.5), &DMatrix::from_element(1, 1, r0), 2.0, 1e-3).unwrap();
        for (i, &t) in out.times.iter().enumerate() {
            let exact = g0 / 2.0 + (r0 - g0 / 2.0) * (-2.0 * t).exp();
            assert!((out.cov[i][(0, 0)] - exact).abs() <= 1e-8);
            assert!((out.mean[i][0] - 0.5 * (-t).exp()).abs() <= 1e-8);
        }
    }

    #[test]
    fn sqrt_psd_examples() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert!((sqrt_psd(&i3).unwrap() - &i3).abs().max() < 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = sqrt_psd(&d).unwrap();
        assert_abs_diff_eq!(s[(0, 0)], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s[(1, 1)], 3.0, epsilon = 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = DMatrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let m = &a * a.transpose();
        let s = sqrt_psd(&m).unwrap();
        assert!((&s * &s - &m).norm() / m.norm() <= 1e-8);
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.1]));
        assert!(matches!(sqrt_psd(&bad), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn zero_noise_langevin_is_constant() {
        let path = ConstantPath(ProjectedOperators { j: DMatrix::zeros(2, 2), g: DMatrix::zeros(1, 1) });
        let plan = LangevinPlan::new(&path, 1.0, 0.01, &[0.5, 1.0]).unwrap();
        let x0 = DVector::from_vec(vec![0.3, -1.2]);
        let out = simulate_langevin(&plan, &LangevinInit::Fixed(x0.clone()), RngStream::new(1, 0)).unwrap();
        assert_eq!(out.states.len(), 2);
        assert!(out.states.iter().all(|s| s == &x0));
    }

    #[test]
    fn ou_variance_matches_closed_form() {
        let (lam, sigma, t) = (1.5, 0.8, 1.0);
        let path = ConstantPath(ProjectedOperators {
            j: DMatrix::from_element(1, 1, -lam),
            g: DMatrix::from_element(1, 1, sigma * sigma),
        });
        let plan = LangevinPlan::new(&path, t, 1e-3, &[t]).unwrap();
        let xs: Vec<f64> = (0..5000)
            .map(|r| simulate_langevin(&plan, &LangevinInit::Zero, RngStream::new(5, r)).unwrap().states[0][0])
            .collect();
        let m = crate::stats::Moments::of(&xs);
        let exact = sigma * sigma * (1.0 - (-2.0 * lam * t).exp()) / (2.0 * lam);
        assert!((m.variance - exact).abs() <= 3.0 * m.variance_se(), "{} vs {exact}", m.variance);
    }

    #[test]
    fn heat_decay_rate_is_second_order_in_h() {
        let pi2 = std::f64::consts::PI.powi(2);
        let errs: Vec<f64> = [15usize, 31, 63]
            .iter()
            .map(|&m| {
                let spec = comp(ScalarFn::constant(0.0), ScalarFn::constant(0.0), m);
                let g = *spec.grid();
                let h = g.spacing();
                let u0 = g.sine_mode(1);
                let sol = solve_deterministic(&spec, &u0, &vec![0.0; m + 2], 0.1, h * h / 20.0).unwrap();
                let ratio = sol.u.last().unwrap()[m / 2] / u0[m / 2];
                (-ratio.ln() / 0.1 - pi2).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let r = w[0] / w[1];
            assert!((r - 4.0).abs() <= 0.5, "ratio {r}");
        }
    }
}

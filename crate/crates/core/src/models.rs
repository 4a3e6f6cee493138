//! The two model families: the compartmental excitable membrane and the
//! stochastic neural field.
//!
//! Both share the coordinate map `z(θ) = Σ θ_k / l(k) 1_{D_k}` and a
//! birth–death reaction structure with one opening and one closing
//! reaction per compartment. Reaction `j < p` opens a channel in
//! compartment `j`; reaction `j >= p` closes one in compartment `j - p`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::engine::HybridState;
use crate::error::{Error, Result};
use crate::linalg::laplacian_apply;
use crate::spatial::{Alignment, Grid, Partition, PiecewiseConstantField};

/// Roundoff allowance for the variance density before it counts as negative.
const SIGMA_CLAMP: f64 = 1e-12;

/// Smooth scalar function with its derivative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarFn {
    Constant { value: f64 },
    /// `scale / (1 + exp(-gain (x - center)))`.
    Logistic { scale: f64, gain: f64, center: f64 },
}

impl ScalarFn {
    pub fn constant(value: f64) -> Self {
        ScalarFn::Constant { value }
    }

    pub fn logistic(scale: f64, gain: f64, center: f64) -> Self {
        ScalarFn::Logistic { scale, gain, center }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ScalarFn::Constant { value } => value,
            ScalarFn::Logistic { scale, gain, center } => scale / (1.0 + (-gain * (x - center)).exp()),
        }
    }

    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        match *self {
            ScalarFn::Constant { .. } => 0.0,
            ScalarFn::Logistic { scale, gain, center } => {
                let s = 1.0 / (1.0 + (-gain * (x - center)).exp());
                scale * gain * s * (1.0 - s)
            }
        }
    }

    /// Global bound on `|f|`.
    pub fn sup_abs(&self) -> f64 {
        match *self {
            ScalarFn::Constant { value } => value.abs(),
            ScalarFn::Logistic { scale, .. } => scale.abs(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, ScalarFn::Constant { .. })
    }

    pub(crate) fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            ScalarFn::Constant { value } => value.is_finite() && value >= 0.0,
            ScalarFn::Logistic { scale, gain, center } => {
                scale.is_finite() && scale >= 0.0 && gain.is_finite() && center.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Constraint(format!("{name}: function must be finite and nonnegative")))
        }
    }
}

/// Connectivity kernel `w(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    Constant { value: f64 },
    /// `amplitude · exp(-(x - y)² / (2 width²))`.
    Gaussian { amplitude: f64, width: f64 },
}

impl Kernel {
    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match *self {
            Kernel::Constant { value } => value,
            Kernel::Gaussian { amplitude, width } => {
                let d = x - y;
                amplitude * (-d * d / (2.0 * width * width)).exp()
            }
        }
    }

    pub fn sup_abs(&self) -> f64 {
        match *self {
            Kernel::Constant { value } => value.abs(),
            Kernel::Gaussian { amplitude, .. } => amplitude.abs(),
        }
    }
}

/// Which of the two directions a reaction moves `θ_k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Open,
    Close,
}

/// Index bookkeeping for the `2p` reactions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReactionSet {
    compartments: usize,
}

impl ReactionSet {
    pub fn new(compartments: usize) -> Self {
        Self { compartments }
    }

    pub fn len(&self) -> usize {
        2 * self.compartments
    }

    pub fn is_empty(&self) -> bool {
        self.compartments == 0
    }

    /// Compartment and direction of reaction `j`.
    pub fn reaction(&self, j: usize) -> (usize, Direction) {
        if j < self.compartments {
            (j, Direction::Open)
        } else {
            (j - self.compartments, Direction::Close)
        }
    }

    /// Change of `θ_k` caused by reaction `j` (always `±1`).
    pub fn stoichiometry(&self, j: usize) -> (usize, i64) {
        match self.reaction(j) {
            (k, Direction::Open) => (k, 1),
            (k, Direction::Close) => (k, -1),
        }
    }
}

/// Stochastic excitable membrane: `u̇ = Δu + z(θ)(v̄ − u)` between jumps,
/// channels open at rate `a(ū_k)` and close at rate `b(ū_k)`.
#[derive(Clone, Debug)]
pub struct CompartmentalSpec {
    pub opening: ScalarFn,
    pub closing: ScalarFn,
    pub v_bar: f64,
    partition: Partition,
    alignment: Alignment,
}

impl CompartmentalSpec {
    pub fn new(opening: ScalarFn, closing: ScalarFn, v_bar: f64, partition: Partition, grid: Grid) -> Result<Self> {
        opening.validate("opening rate")?;
        closing.validate("closing rate")?;
        if !v_bar.is_finite() {
            return Err(Error::Constraint("v_bar must be finite".into()));
        }
        let alignment = grid.align(&partition)?;
        Ok(Self { opening, closing, v_bar, partition, alignment })
    }

    /// `σ²(u, p) = a(u)(1 − p) + b(u)p`.
    #[inline]
    fn variance_density(&self, u: f64, p: f64) -> f64 {
        self.opening.eval(u) * (1.0 - p) + self.closing.eval(u) * p
    }
}

/// Stochastic neural field: neurons activate at rate
/// `l(k) f(Σ_j W̄_{kj} θ_j / l(j))` and deactivate at unit rate.
#[derive(Clone, Debug)]
pub struct NeuralFieldSpec {
    pub gain: ScalarFn,
    pub kernel: Kernel,
    partition: Partition,
    alignment: Alignment,
    wbar: DMatrix<f64>,
    nodal: DMatrix<f64>,
    kernel_quadrature: DMatrix<f64>,
}

impl NeuralFieldSpec {
    pub fn new(gain: ScalarFn, kernel: Kernel, partition: Partition, grid: Grid) -> Result<Self> {
        gain.validate("gain")?;
        let alignment = grid.align(&partition)?;
        let nodal = node_compartment_integrals(&kernel, &alignment);
        let wbar = compartment_kernel_averages(&nodal, &alignment, &partition);
        let n = grid.m() + 2;
        let h = grid.spacing();
        let kernel_quadrature = DMatrix::from_fn(n, n, |i, j| {
            let w = if j == 0 || j == n - 1 { 0.5 * h } else { h };
            w * kernel.eval(grid.node(i), grid.node(j))
        });
        Ok(Self { gain, kernel, partition, alignment, wbar, nodal, kernel_quadrature })
    }

    /// Compartment-averaged connectivity `W̄_{kj}`.
    pub fn wbar(&self) -> &DMatrix<f64> {
        &self.wbar
    }

    /// `∫_{D_j} w(x_i, y) dy` for every closed-grid node `x_i` and compartment `j`.
    pub fn node_compartment_integrals(&self) -> &DMatrix<f64> {
        &self.nodal
    }

    /// Trapezoid discretization of `h ↦ ∫ w(·, y) h(y) dy` on the closed grid.
    pub fn kernel_quadrature(&self) -> &DMatrix<f64> {
        &self.kernel_quadrature
    }

    /// `s(x) = ∫ w(x, y) p(y) dy` at every closed-grid node.
    pub fn synaptic_input(&self, p: &[f64]) -> Vec<f64> {
        let g = self.alignment.grid();
        let n = g.m() + 2;
        let pv: Vec<f64> = (0..n).map(|j| g.node_value(p, j)).collect();
        (0..n)
            .map(|i| (0..n).map(|j| self.kernel_quadrature[(i, j)] * pv[j]).sum())
            .collect()
    }
}

fn node_compartment_integrals(kernel: &Kernel, alignment: &Alignment) -> DMatrix<f64> {
    let g = alignment.grid();
    let h = g.spacing();
    let n = g.m() + 2;
    DMatrix::from_fn(n, alignment.compartments(), |i, k| {
        let (a, b) = alignment.node_range(k);
        let x = g.node(i);
        let mut s = 0.5 * (kernel.eval(x, g.node(a)) + kernel.eval(x, g.node(b)));
        for j in a + 1..b {
            s += kernel.eval(x, g.node(j));
        }
        h * s
    })
}

/// `W̄_{kj} = ν_k⁻¹ ∫_{D_k} ∫_{D_j} w(x, y) dy dx` by tensor trapezoid.
fn compartment_kernel_averages(nodal: &DMatrix<f64>, alignment: &Alignment, partition: &Partition) -> DMatrix<f64> {
    let p = partition.len();
    let h = alignment.grid().spacing();
    DMatrix::from_fn(p, p, |k, j| {
        let (a, b) = alignment.node_range(k);
        let mut s = 0.5 * (nodal[(a, j)] + nodal[(b, j)]);
        for i in a + 1..b {
            s += nodal[(i, j)];
        }
        h * s / partition.measure(k)
    })
}

/// One of the two model families with its discretization.
#[derive(Clone, Debug)]
pub enum ModelSpec {
    Compartmental(CompartmentalSpec),
    NeuralField(NeuralFieldSpec),
}

impl ModelSpec {
    pub fn partition(&self) -> &Partition {
        match self {
            ModelSpec::Compartmental(s) => &s.partition,
            ModelSpec::NeuralField(s) => &s.partition,
        }
    }

    pub fn alignment(&self) -> &Alignment {
        match self {
            ModelSpec::Compartmental(s) => &s.alignment,
            ModelSpec::NeuralField(s) => &s.alignment,
        }
    }

    pub fn grid(&self) -> &Grid {
        self.alignment().grid()
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Compartmental(_) => "compartmental",
            ModelSpec::NeuralField(_) => "neural_field",
        }
    }

    /// True when the process has a continuous (membrane potential) component.
    pub fn has_potential(&self) -> bool {
        matches!(self, ModelSpec::Compartmental(_))
    }

    pub fn reactions(&self) -> ReactionSet {
        ReactionSet::new(self.partition().len())
    }

    /// Checks that `θ` is admissible for this model.
    pub fn check_theta(&self, theta: &[u32]) -> Result<()> {
        let part = self.partition();
        if theta.len() != part.len() {
            return Err(Error::invalid(format!(
                "theta has {} entries for {} compartments",
                theta.len(),
                part.len()
            )));
        }
        if let ModelSpec::Compartmental(_) = self {
            if let Some(k) = (0..theta.len()).find(|&k| theta[k] > part.channels()[k]) {
                return Err(Error::invalid(format!(
                    "theta[{k}] = {} exceeds l({k}) = {}",
                    theta[k],
                    part.channels()[k]
                )));
            }
        }
        Ok(())
    }

    /// Rate vector `[up_0 … up_{p-1}, down_0 … down_{p-1}]` at a hybrid state.
    pub fn reaction_rates(&self, state: &HybridState) -> Result<Vec<f64>> {
        self.check_theta(&state.theta)?;
        let p = self.partition().len();
        let mut out = vec![0.0; 2 * p];
        match self {
            ModelSpec::Compartmental(_) => {
                self.grid().check_len(&state.u, "reaction_rates")?;
                let mut avg = vec![0.0; p];
                self.alignment().averages_into(&state.u, &mut avg);
                self.compartmental_rates(&avg, &state.theta, &mut out)?;
            }
            ModelSpec::NeuralField(_) => {
                let drive = self.neural_drive(&state.theta);
                self.neural_rates(&drive, &state.theta, &mut out)?;
            }
        }
        Ok(out)
    }

    /// Compartmental rates from compartment-averaged potentials.
    pub(crate) fn compartmental_rates(&self, avg: &[f64], theta: &[u32], out: &mut [f64]) -> Result<()> {
        let ModelSpec::Compartmental(s) = self else {
            unreachable!("compartmental_rates on a neural field")
        };
        let p = theta.len();
        let ch = s.partition.channels();
        for k in 0..p {
            let a = s.opening.eval(avg[k]);
            let b = s.closing.eval(avg[k]);
            let up = a * f64::from(ch[k] - theta[k]);
            let down = b * f64::from(theta[k]);
            if !(up >= 0.0 && down >= 0.0) {
                return Err(Error::Model(format!(
                    "negative or NaN rate in compartment {k}: up {up}, down {down}"
                )));
            }
            out[k] = up;
            out[p + k] = down;
        }
        Ok(())
    }

    /// Neural-field drive `Σ_j W̄_{kj} θ_j / l(j)` for every compartment.
    pub(crate) fn neural_drive(&self, theta: &[u32]) -> Vec<f64> {
        let ModelSpec::NeuralField(s) = self else {
            unreachable!("neural_drive on a compartmental model")
        };
        let ch = s.partition.channels();
        let p = theta.len();
        (0..p)
            .map(|k| (0..p).map(|j| s.wbar[(k, j)] * f64::from(theta[j]) / f64::from(ch[j])).sum())
            .collect()
    }

    pub(crate) fn neural_rates(&self, drive: &[f64], theta: &[u32], out: &mut [f64]) -> Result<()> {
        let ModelSpec::NeuralField(s) = self else {
            unreachable!("neural_rates on a compartmental model")
        };
        let ch = s.partition.channels();
        let p = theta.len();
        for k in 0..p {
            let up = f64::from(ch[k]) * s.gain.eval(drive[k]);
            if !(up >= 0.0) {
                return Err(Error::Model(format!("negative or NaN activation rate in compartment {k}: {up}")));
            }
            out[k] = up;
            out[p + k] = f64::from(theta[k]);
        }
        Ok(())
    }

    /// Generator applied to the coordinate function: `(up_k − down_k) / l(k)` on `D_k`.
    pub fn generator_drift(&self, state: &HybridState) -> Result<PiecewiseConstantField<'_>> {
        let rates = self.reaction_rates(state)?;
        let part = self.partition();
        let p = part.len();
        let values = (0..p)
            .map(|k| (rates[k] - rates[p + k]) / f64::from(part.channels()[k]))
            .collect();
        PiecewiseConstantField::new(values, part)
    }

    /// Pointwise fluid-limit drift `F` on the closed grid.
    ///
    /// Compartmental: `a(u)(1 − p) − b(u)p` with `u` an interior vector (zero
    /// at the boundary). Neural field: `−p + f(∫ w(x, y) p(y) dy)`; `u` is ignored.
    pub fn drift_f(&self, u: &[f64], p_field: &[f64]) -> Result<Vec<f64>> {
        let g = *self.grid();
        g.check_len(p_field, "drift_f")?;
        let n = g.m() + 2;
        match self {
            ModelSpec::Compartmental(s) => {
                g.check_len(u, "drift_f")?;
                Ok((0..n)
                    .map(|j| {
                        let uj = g.node_value(u, j);
                        let pj = g.node_value(p_field, j);
                        s.opening.eval(uj) * (1.0 - pj) - s.closing.eval(uj) * pj
                    })
                    .collect())
            }
            ModelSpec::NeuralField(s) => {
                let input = s.synaptic_input(p_field);
                Ok((0..n).map(|j| -g.node_value(p_field, j) + s.gain.eval(input[j])).collect())
            }
        }
    }

    /// Right-hand side of the deterministic limit system: `(Δu + p(v̄ − u), F(u, p))`.
    /// The first component is empty for the neural field.
    pub fn limit_drift(&self, u: &[f64], p_field: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let f = self.drift_f(u, p_field)?;
        match self {
            ModelSpec::Compartmental(s) => {
                let g = self.grid();
                let m = g.m();
                if u.len() != m {
                    return Err(Error::invalid("potential must be an interior grid vector"));
                }
                let mut du = vec![0.0; m];
                laplacian_apply(u, g.spacing(), &mut du);
                for j in 0..m {
                    du[j] += g.node_value(p_field, j + 1) * (s.v_bar - u[j]);
                }
                Ok((du, f))
            }
            ModelSpec::NeuralField(_) => Ok((Vec::new(), f)),
        }
    }

    /// Variance density `σ²` of the limiting noise on the closed grid.
    pub fn variance_density(&self, u: &[f64], p_field: &[f64]) -> Result<Vec<f64>> {
        let g = *self.grid();
        g.check_len(p_field, "variance_density")?;
        let n = g.m() + 2;
        let raw: Vec<f64> = match self {
            ModelSpec::Compartmental(s) => {
                g.check_len(u, "variance_density")?;
                (0..n)
                    .map(|j| s.variance_density(g.node_value(u, j), g.node_value(p_field, j)))
                    .collect()
            }
            ModelSpec::NeuralField(s) => {
                let input = s.synaptic_input(p_field);
                (0..n).map(|j| g.node_value(p_field, j) + s.gain.eval(input[j])).collect()
            }
        };
        raw.into_iter()
            .enumerate()
            .map(|(j, v)| {
                if v >= 0.0 {
                    Ok(v)
                } else if v >= -SIGMA_CLAMP {
                    Ok(0.0)
                } else {
                    Err(Error::Model(format!("negative variance density {v:e} at node {j}")))
                }
            })
            .collect()
    }

    /// Quadratic variation form `⟨G^n Φ, Ψ⟩` of the jump component.
    pub fn quad_var_form(&self, state: &HybridState, phi: &[f64], psi: &[f64]) -> Result<f64> {
        let g = self.grid();
        g.check_len(phi, "quad_var_form")?;
        g.check_len(psi, "quad_var_form")?;
        let rates = self.reaction_rates(state)?;
        let part = self.partition();
        let align = self.alignment();
        let p = part.len();
        let mut total = 0.0;
        for k in 0..p {
            let l = f64::from(part.channels()[k]);
            let a = align.integrate_over(phi, k) / l;
            let b = align.integrate_over(psi, k) / l;
            total += (rates[k] + rates[p + k]) * a * b;
        }
        Ok(total)
    }

    /// Limit covariance form `∫ σ²(x) Φ(x) Ψ(x) dx`.
    pub fn limit_covariance_form(&self, u: &[f64], p_field: &[f64], phi: &[f64], psi: &[f64]) -> Result<f64> {
        let g = *self.grid();
        g.check_len(phi, "limit_covariance_form")?;
        g.check_len(psi, "limit_covariance_form")?;
        let sigma = self.variance_density(u, p_field)?;
        let prod: Vec<f64> = (0..g.m() + 2)
            .map(|j| sigma[j] * g.node_value(phi, j) * g.node_value(psi, j))
            .collect();
        Ok(g.integrate(&prod))
    }

    /// Linearization of the limit drift at `(u, p)`.
    pub fn drift_jacobians(&self, u: &[f64], p_field: &[f64]) -> Result<JacobianBlocks<'_>> {
        let g = *self.grid();
        g.check_len(p_field, "drift_jacobians")?;
        let n = g.m() + 2;
        match self {
            ModelSpec::Compartmental(s) => {
                if u.len() != g.m() {
                    return Err(Error::invalid("potential must be an interior grid vector"));
                }
                let m = g.m();
                let uu = (1..=m).map(|j| -g.node_value(p_field, j)).collect();
                let up = u.iter().map(|&x| s.v_bar - x).collect();
                let mut pu = Vec::with_capacity(n);
                let mut pp = Vec::with_capacity(n);
                for j in 0..n {
                    let uj = g.node_value(u, j);
                    let pj = g.node_value(p_field, j);
                    pu.push(s.opening.deriv(uj) * (1.0 - pj) - s.closing.deriv(uj) * pj);
                    pp.push(-(s.opening.eval(uj) + s.closing.eval(uj)));
                }
                Ok(JacobianBlocks::Compartmental { spacing: g.spacing(), uu, up, pu, pp })
            }
            ModelSpec::NeuralField(s) => {
                let input = s.synaptic_input(p_field);
                let slope = input.iter().map(|&x| s.gain.deriv(x)).collect();
                Ok(JacobianBlocks::NeuralField { slope, kernel: &s.kernel_quadrature })
            }
        }
    }
}

/// Grid-level linear maps of the linearized drift.
///
/// Compartmental: `J_UU = Δ_h − diag(p)`, `J_UP = diag(v̄ − u)`,
/// `J_PU = diag(a′(u)(1 − p) − b′(u)p)`, `J_PP = −diag(a(u) + b(u))`.
/// Neural field: `J_PP h = −h + f′(s) ⊙ (K h)` with `K` the kernel quadrature.
#[derive(Clone, Debug)]
pub enum JacobianBlocks<'a> {
    Compartmental {
        spacing: f64,
        /// Interior diagonal of the multiplication part of `J_UU`.
        uu: Vec<f64>,
        /// Interior diagonal of `J_UP`.
        up: Vec<f64>,
        /// Closed-grid diagonal of `J_PU`.
        pu: Vec<f64>,
        /// Closed-grid diagonal of `J_PP`.
        pp: Vec<f64>,
    },
    NeuralField {
        slope: Vec<f64>,
        kernel: &'a DMatrix<f64>,
    },
}

impl JacobianBlocks<'_> {
    /// Applies the full Jacobian to a perturbation `(δu, δp)`.
    pub fn apply(&self, du: &[f64], dp: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self {
            JacobianBlocks::Compartmental { spacing, uu, up, pu, pp } => {
                let m = uu.len();
                let n = pp.len();
                let dpv = |j: usize| if dp.len() == n { dp[j] } else if j == 0 || j > m { 0.0 } else { dp[j - 1] };
                let mut ou = vec![0.0; m];
                laplacian_apply(du, *spacing, &mut ou);
                for j in 0..m {
                    ou[j] += uu[j] * du[j] + up[j] * dpv(j + 1);
                }
                let op = (0..n)
                    .map(|j| {
                        let duj = if j == 0 || j > m { 0.0 } else { du[j - 1] };
                        pu[j] * duj + pp[j] * dpv(j)
                    })
                    .collect();
                (ou, op)
            }
            JacobianBlocks::NeuralField { slope, kernel } => {
                let n = slope.len();
                let m = n - 2;
                let dpv: Vec<f64> = (0..n)
                    .map(|j| if dp.len() == n { dp[j] } else if j == 0 || j > m { 0.0 } else { dp[j - 1] })
                    .collect();
                let op = (0..n)
                    .map(|i| {
                        let conv: f64 = (0..n).map(|j| kernel[(i, j)] * dpv[j]).sum();
                        -dpv[i] + slope[i] * conv
                    })
                    .collect();
                (Vec::new(), op)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::discrete_laplace_eigenvalue;
    use crate::spatial::{build_partition, ChannelRule};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn compartmental(p: usize, l: u32, a: ScalarFn, b: ScalarFn, m: usize) -> ModelSpec {
        let part = build_partition(1.0, p, &ChannelRule::Uniform(l), None).unwrap();
        let grid = Grid::new(1.0, m).unwrap();
        ModelSpec::Compartmental(CompartmentalSpec::new(a, b, 1.0, part, grid).unwrap())
    }

    fn neural(p: usize, l: u32, f: ScalarFn, w: Kernel, m: usize) -> ModelSpec {
        let part = build_partition(1.0, p, &ChannelRule::Uniform(l), None).unwrap();
        let grid = Grid::new(1.0, m).unwrap();
        ModelSpec::NeuralField(NeuralFieldSpec::new(f, w, part, grid).unwrap())
    }

    fn state(theta: Vec<u32>, m: usize) -> HybridState {
        HybridState { t: 0.0, u: vec![0.0; m], theta }
    }

    fn default_comp(p: usize, l: u32, m: usize) -> ModelSpec {
        compartmental(p, l, ScalarFn::logistic(1.0, 2.0, 0.0), ScalarFn::logistic(1.0, -2.0, 0.0), m)
    }

    #[test]
    fn compartmental_plug_in_rates() {
        let spec = compartmental(1, 10, ScalarFn::constant(1.0), ScalarFn::constant(2.0), 7);
        let r = spec.reaction_rates(&state(vec![5], 7)).unwrap();
        assert_eq!(r, vec![5.0, 10.0]);
        let drift = spec.generator_drift(&state(vec![5], 7)).unwrap();
        assert_eq!(drift.values(), &[-0.5]);
    }

    #[test]
    fn saturated_compartments_cannot_open() {
        let spec = default_comp(4, 6, 15);
        let mut s = state(vec![6; 4], 15);
        s.u = (0..15).map(|j| (j as f64 * 0.37).sin()).collect();
        let r = spec.reaction_rates(&s).unwrap();
        assert!(r[..4].iter().all(|&x| x == 0.0));
        let r0 = spec.reaction_rates(&state(vec![0; 4], 15)).unwrap();
        assert!(r0[4..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn neural_field_plug_in() {
        let spec = neural(1, 10, ScalarFn::constant(0.4), Kernel::Constant { value: 0.0 }, 7);
        let r = spec.reaction_rates(&state(vec![3], 7)).unwrap();
        assert_abs_diff_eq!(r[0], 4.0, epsilon = 1e-12);
        assert_eq!(r[1], 3.0);
        let d = spec.generator_drift(&state(vec![4], 7)).unwrap();
        assert_abs_diff_eq!(d.values()[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn negative_rates_abort() {
        let spec = compartmental(1, 10, ScalarFn::constant(1.0), ScalarFn::constant(2.0), 7);
        let ModelSpec::Compartmental(mut s) = spec else { unreachable!() };
        s.closing = ScalarFn::Constant { value: -1.0 };
        let spec = ModelSpec::Compartmental(s);
        assert!(matches!(spec.reaction_rates(&state(vec![5], 7)), Err(Error::Model(_))));
    }

    #[test]
    fn generator_drift_matches_reaction_enumeration() {
        let spec = default_comp(4, 9, 31);
        let mut s = state(vec![1, 4, 9, 0], 31);
        s.u = spec.grid().sample_interior(|x| (3.0 * x).sin());
        let rates = spec.reaction_rates(&s).unwrap();
        let part = spec.partition();
        let set = spec.reactions();
        let mut brute = vec![0.0; 4];
        for j in 0..set.len() {
            let (k, d) = set.stoichiometry(j);
            brute[k] += rates[j] * d as f64 / f64::from(part.channels()[k]);
        }
        let drift = spec.generator_drift(&s).unwrap();
        for k in 0..4 {
            assert_abs_diff_eq!(drift.values()[k], brute[k], epsilon = 1e-14);
        }
    }

    #[test]
    fn drift_f_cases() {
        let spec = compartmental(2, 4, ScalarFn::constant(1.0), ScalarFn::constant(2.0), 15);
        let f = spec.drift_f(&vec![0.3; 15], &vec![1.0 / 3.0; 17]).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-15));

        let nf = neural(2, 4, ScalarFn::logistic(1.0, 4.0, 0.5), Kernel::Constant { value: 0.0 }, 15);
        let p: Vec<f64> = (0..17).map(|j| j as f64 / 16.0).collect();
        let f = nf.drift_f(&[], &p).unwrap();
        let f0 = 1.0 / (1.0 + 2f64.exp());
        for j in 0..17 {
            assert_abs_diff_eq!(f[j], -p[j] + f0, epsilon = 1e-15);
        }
    }

    #[test]
    fn neural_drift_matches_richardson_quadrature() {
        let gain = ScalarFn::logistic(1.0, 4.0, 0.5);
        let kernel = Kernel::Gaussian { amplitude: 2.0, width: 0.2 };
        let profile = |y: f64| 0.3 + 0.2 * (2.0 * y).cos();
        let m = 1023;
        let spec = neural(1, 10, gain.clone(), kernel.clone(), m);
        let grid = *spec.grid();
        let p = grid.sample_closed(profile);
        let f = spec.drift_f(&[], &p).unwrap();
        let trap = |x: f64, cells: usize| {
            let h = 1.0 / cells as f64;
            let mut s = 0.5 * (kernel.eval(x, 0.0) * profile(0.0) + kernel.eval(x, 1.0) * profile(1.0));
            for j in 1..cells {
                let y = j as f64 * h;
                s += kernel.eval(x, y) * profile(y);
            }
            s * h
        };
        for j in [0usize, 100, 512, 900, 1024] {
            let x = grid.node(j);
            let coarse = trap(x, 2048);
            let fine = trap(x, 4096);
            let integral = (4.0 * fine - coarse) / 3.0;
            let reference = -profile(x) + gain.eval(integral);
            assert!((f[j] - reference).abs() <= 1e-6, "node {j}: {} vs {}", f[j], reference);
        }
    }

    #[test]
    fn quad_var_form_cases() {
        let spec = compartmental(1, 10, ScalarFn::constant(1.0), ScalarFn::constant(2.0), 15);
        let s = state(vec![5], 15);
        let one = vec![1.0; 17];
        assert_abs_diff_eq!(spec.quad_var_form(&s, &one, &one).unwrap(), 0.15, epsilon = 1e-14);
        assert_eq!(spec.quad_var_form(&s, &vec![0.0; 17], &one).unwrap(), 0.0);
        let phi = spec.grid().sine_mode(1);
        let two: Vec<f64> = phi.iter().map(|x| 2.0 * x).collect();
        let q1 = spec.quad_var_form(&s, &phi, &phi).unwrap();
        let q2 = spec.quad_var_form(&s, &two, &two).unwrap();
        assert_abs_diff_eq!(q2, 4.0 * q1, epsilon = 1e-14);
    }

    #[test]
    fn quad_var_form_matches_brute_force_and_trace() {
        let spec = default_comp(4, 12, 31);
        let grid = *spec.grid();
        let mut s = state(vec![2, 7, 12, 5], 31);
        s.u = grid.sample_interior(|x| 0.8 * (std::f64::consts::PI * x).sin());
        let rates = spec.reaction_rates(&s).unwrap();
        let part = spec.partition();
        let set = spec.reactions();
        // jump of z under reaction j as a closed grid vector (no interface averaging)
        let jump_inner = |j: usize, f: &[f64]| -> f64 {
            let (k, d) = set.stoichiometry(j);
            let (a, b) = spec.alignment().node_range(k);
            let h = grid.spacing();
            let mut acc = 0.0;
            for n in a..=b {
                let w = if n == a || n == b { 0.5 * h } else { h };
                acc += w * grid.node_value(f, n);
            }
            d as f64 * acc / f64::from(part.channels()[k])
        };
        let phi = grid.sine_mode(1);
        let psi = grid.sample_closed(|x| x * x);
        let brute: f64 = (0..set.len()).map(|j| rates[j] * jump_inner(j, &phi) * jump_inner(j, &psi)).sum();
        assert_abs_diff_eq!(spec.quad_var_form(&s, &phi, &psi).unwrap(), brute, epsilon = 1e-13);

        // trace over the full discrete orthonormal sine basis equals Σ rate ‖Δz‖²
        // in the discrete inner product (interior nodes only, φ vanish at the ends)
        let m = grid.m();
        let trace: f64 = (1..=m)
            .map(|i| {
                let v = grid.sine_mode(i);
                spec.quad_var_form(&s, &v, &v).unwrap()
            })
            .sum();
        let mut direct = 0.0;
        for j in 0..set.len() {
            let (k, _) = set.stoichiometry(j);
            let (a, b) = spec.alignment().node_range(k);
            let l = f64::from(part.channels()[k]);
            // compartment-local trapezoid weights seen as a grid vector
            let mut v = vec![0.0; m];
            let h = grid.spacing();
            for n in a..=b {
                if n >= 1 && n <= m {
                    v[n - 1] += if n == a || n == b { 0.5 } else { 1.0 } / l;
                }
            }
            direct += rates[j] * h * v.iter().map(|x| x * x).sum::<f64>();
        }
        assert!((trace - direct).abs() <= 1e-10 * direct.abs());
    }

    #[test]
    fn limit_covariance_cases() {
        let spec = compartmental(1, 10, ScalarFn::constant(1.0), ScalarFn::constant(2.0), 15);
        let one = vec![1.0; 17];
        let v = spec.limit_covariance_form(&vec![0.0; 15], &vec![0.5; 17], &one, &one).unwrap();
        assert_abs_diff_eq!(v, 1.5, epsilon = 1e-14);
        let zero = compartmental(1, 10, ScalarFn::constant(0.0), ScalarFn::constant(0.0), 15);
        let v = zero.limit_covariance_form(&vec![0.0; 15], &vec![0.5; 17], &one, &one).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn jacobian_blocks_trivial_cases() {
        let spec = compartmental(1, 10, ScalarFn::constant(1.0), ScalarFn::constant(2.0), 15);
        let jac = spec.drift_jacobians(&vec![0.2; 15], &vec![0.4; 17]).unwrap();
        let JacobianBlocks::Compartmental { pu, pp, .. } = &jac else { panic!() };
        assert!(pu.iter().all(|&x| x == 0.0));
        assert!(pp.iter().all(|&x| x == -3.0));

        let nf = neural(1, 10, ScalarFn::logistic(1.0, 4.0, 0.5), Kernel::Constant { value: 0.0 }, 15);
        let jac = nf.drift_jacobians(&[], &vec![0.3; 17]).unwrap();
        let dp: Vec<f64> = (0..17).map(|j| (j as f64).cos()).collect();
        let (_, out) = jac.apply(&[], &dp);
        for j in 0..17 {
            assert_abs_diff_eq!(out[j], -dp[j], epsilon = 1e-15);
        }
    }

    #[test]
    fn discrete_laplacian_on_first_mode() {
        for m in [15usize, 31, 63] {
            let grid = Grid::new(1.0, m).unwrap();
            let phi = grid.sine_mode(1);
            let mut out = vec![0.0; m];
            laplacian_apply(&phi, grid.spacing(), &mut out);
            let lam = discrete_laplace_eigenvalue(1, grid.spacing(), 1.0);
            let pi2 = std::f64::consts::PI.powi(2);
            for j in 0..m {
                assert_abs_diff_eq!(out[j], lam * phi[j], epsilon = 1e-9);
            }
            // O(h²) gap to the continuum eigenvalue
            let h = grid.spacing();
            assert!((lam + pi2).abs() <= pi2 * pi2 * h * h / 12.0 * 1.01);
        }
    }

    fn fd_check(spec: &ModelSpec, seed: u64) {
        let grid = *spec.grid();
        let m = grid.m();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (u, udim) = if spec.has_potential() {
            ((0..m).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(), m)
        } else {
            (Vec::new(), 0)
        };
        let p: Vec<f64> = (0..m + 2).map(|_| rng.random_range(0.0..1.0)).collect();
        let jac = spec.drift_jacobians(&u, &p).unwrap();
        let eps = 1e-5;
        for _ in 0..20 {
            let du: Vec<f64> = (0..udim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dp: Vec<f64> = (0..m + 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let shift = |s: f64| {
                let uu: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a + s * b).collect();
                let pp: Vec<f64> = p.iter().zip(&dp).map(|(a, b)| a + s * b).collect();
                spec.limit_drift(&uu, &pp).unwrap()
            };
            let (fu_p, fp_p) = shift(eps);
            let (fu_m, fp_m) = shift(-eps);
            let (ju, jp) = jac.apply(&du, &dp);
            let fd_u: Vec<f64> = fu_p.iter().zip(&fu_m).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
            let fd_p: Vec<f64> = fp_p.iter().zip(&fp_m).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
            let err: f64 = fd_u.iter().zip(&ju).chain(fd_p.iter().zip(&jp)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = ju.iter().chain(&jp).map(|x| x * x).sum::<f64>().sqrt();
            assert!(err <= 1e-4 * norm, "relative FD error {}", err / norm);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        fd_check(&default_comp(4, 10, 31), 1);
        fd_check(&neural(4, 10, ScalarFn::logistic(1.0, 4.0, 0.5), Kernel::Gaussian { amplitude: 2.0, width: 0.2 }, 31), 2);
    }

    #[test]
    fn wbar_bound_and_symmetry() {
        let spec = neural(8, 10, ScalarFn::logistic(1.0, 4.0, 0.5), Kernel::Gaussian { amplitude: 2.0, width: 0.2 }, 63);
        let ModelSpec::NeuralField(s) = &spec else { unreachable!() };
        let part = spec.partition();
        for k in 0..8 {
            for j in 0..8 {
                assert!(s.wbar()[(k, j)].abs() <= 2.0 * part.measure(j) + 1e-15);
                // uniform partition: W̄ is symmetric
                assert_abs_diff_eq!(s.wbar()[(k, j)], s.wbar()[(j, k)], epsilon = 1e-14);
            }
        }
    }
}

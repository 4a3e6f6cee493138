//! Exact simulation of the hybrid jump process.
//!
//! Between jumps the potential follows an IMEX discretization of the
//! membrane equation. Jump times come from the integrated hazard: an
//! `Exp(1)` threshold is compared against `∫ Λ dt`, accumulated by the
//! trapezoid rule along the flow substeps. For the neural field the rates
//! are constant between jumps and the waiting time is exactly exponential.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::solve_tridiagonal_const;
use crate::models::ModelSpec;
use crate::spatial::PiecewiseConstantField;

pub const DEFAULT_MAX_JUMPS: u64 = 10_000_000;

/// Hybrid state `(t, U_t, Θ_t)`. `u` is empty for the neural field.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridState {
    pub t: f64,
    pub u: Vec<f64>,
    pub theta: Vec<u32>,
}

impl HybridState {
    /// Initial state from grid profiles: `θ_k = round(l(k) · avg_k p₀)`.
    pub fn from_profiles(spec: &ModelSpec, u0: &[f64], p0: &[f64]) -> Result<Self> {
        let grid = spec.grid();
        grid.check_len(p0, "initial p")?;
        let part = spec.partition();
        let align = spec.alignment();
        let theta = (0..part.len())
            .map(|k| {
                let avg = align.average(p0, k);
                let l = f64::from(part.channels()[k]);
                let v = (l * avg).round();
                if spec.has_potential() { v.clamp(0.0, l) } else { v.max(0.0) }
            })
            .map(|v| v as u32)
            .collect();
        let u = if spec.has_potential() {
            if u0.len() != grid.m() {
                return Err(Error::invalid("initial potential must be an interior grid vector"));
            }
            u0.to_vec()
        } else {
            Vec::new()
        };
        let state = Self { t: 0.0, u, theta };
        spec.check_theta(&state.theta)?;
        Ok(state)
    }

    /// Piecewise-constant coordinate field `z(θ)`.
    pub fn coordinate<'a>(&self, spec: &'a ModelSpec) -> Result<PiecewiseConstantField<'a>> {
        crate::spatial::coordinate_function(&self.theta, spec.partition())
    }
}

/// Counter-based random stream keyed by `(seed, stream id)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Stream for replica `replica` of refinement level `level`.
    pub fn for_replica(seed: u64, level: u32, replica: u32) -> Self {
        Self::new(seed, (u64::from(level) << 32) | u64::from(replica))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Position in the key stream, in 32-bit words.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn exp1(&mut self) -> f64 {
        self.rng.sample(Exp1)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

/// Derives an independent master seed for a named sub-computation.
pub fn derive_seed(seed: u64, domain: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// What a simulation keeps besides the sampled `θ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecordOptions {
    pub store_u: bool,
    pub log_jumps: bool,
    /// Integrate `‖𝒜z − F(U, z)‖²_{L²}` along the path.
    pub track_residual: bool,
}

impl Default for RecordOptions {
    fn default() -> Self {
        Self { store_u: true, log_jumps: true, track_residual: false }
    }
}

/// Cumulative per-compartment rate integrals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RateIntegrals {
    /// `∫ up_k dt`.
    pub up: Vec<f64>,
    /// `∫ down_k dt`.
    pub down: Vec<f64>,
    /// `∫ θ_k up_k dt`.
    pub theta_up: Vec<f64>,
    /// `∫ θ_k down_k dt`.
    pub theta_down: Vec<f64>,
    /// `∫ ‖𝒜z − F(U, z)‖² dt` when tracked.
    pub residual: f64,
}

impl RateIntegrals {
    fn zeros(p: usize) -> Self {
        Self {
            up: vec![0.0; p],
            down: vec![0.0; p],
            theta_up: vec![0.0; p],
            theta_down: vec![0.0; p],
            residual: 0.0,
        }
    }

    /// `∫ (up_k + down_k) dt`.
    pub fn activity(&self, k: usize) -> f64 {
        self.up[k] + self.down[k]
    }
}

/// Sampled path of one simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub channels: Vec<u32>,
    pub times: Vec<f64>,
    pub theta: Vec<Vec<u32>>,
    /// Potential snapshots; empty unless requested and the model has a potential.
    pub u: Vec<Vec<f64>>,
    /// `(time, reaction index)` of every jump when logged.
    pub jumps: Vec<(f64, u32)>,
    pub jump_count: u64,
    /// Cumulative rate integrals at each sample time.
    pub integrals: Vec<RateIntegrals>,
}

impl TrajectoryRecord {
    fn new(channels: Vec<u32>) -> Self {
        Self {
            channels,
            times: Vec::new(),
            theta: Vec::new(),
            u: Vec::new(),
            jumps: Vec::new(),
            jump_count: 0,
            integrals: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `z(θ)` at sample `i` as a compartment vector.
    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        self.theta[i]
            .iter()
            .zip(&self.channels)
            .map(|(&t, &l)| f64::from(t) / f64::from(l))
            .collect()
    }

    /// `∫₀ᵗ 𝒜z ds` at sample `i`, compartment-wise `(∫up − ∫down) / l(k)`.
    pub fn drift_integral(&self, i: usize) -> Vec<f64> {
        let r = &self.integrals[i];
        (0..self.channels.len())
            .map(|k| (r.up[k] - r.down[k]) / f64::from(self.channels[k]))
            .collect()
    }

    /// Martingale part `M(t) = z(θ_t) − z(θ_0) − ∫₀ᵗ 𝒜z ds` at every sample.
    pub fn martingale_part(&self) -> Vec<Vec<f64>> {
        if self.is_empty() {
            return Vec::new();
        }
        let z0 = self.coordinate(0);
        let a0 = self.drift_integral(0);
        (0..self.len())
            .map(|i| {
                let z = self.coordinate(i);
                let a = self.drift_integral(i);
                (0..z.len()).map(|k| (z[k] - z0[k]) - (a[k] - a0[k])).collect()
            })
            .collect()
    }

    /// Rebuilds `θ` at sample `i` from the initial value and the jump log.
    pub fn reconstruct_theta(&self, i: usize) -> Vec<u32> {
        let p = self.channels.len();
        let t = self.times[i];
        let mut theta: Vec<i64> = self.theta[0].iter().map(|&x| i64::from(x)).collect();
        for &(tj, j) in &self.jumps {
            if tj > t {
                break;
            }
            let j = j as usize;
            if j < p {
                theta[j] += 1;
            } else {
                theta[j - p] -= 1;
            }
        }
        theta.into_iter().map(|x| x as u32).collect()
    }
}

/// Test function `f(θ) = Σ c_k θ_k + Σ q_k θ_k²` for the Dynkin check.
#[derive(Clone, Debug, PartialEq)]
pub struct TestFunction {
    pub constant: f64,
    pub linear: Vec<f64>,
    pub quadratic: Vec<f64>,
}

impl TestFunction {
    pub fn eval(&self, theta: &[u32]) -> f64 {
        let mut s = self.constant;
        for (k, &t) in theta.iter().enumerate() {
            let t = f64::from(t);
            s += self.linear.get(k).copied().unwrap_or(0.0) * t;
            s += self.quadratic.get(k).copied().unwrap_or(0.0) * t * t;
        }
        s
    }

    /// `∫₀ᵗ 𝒜f ds` from the rate integrals, using `𝒜θ = up − down`
    /// and `𝒜θ² = up(2θ + 1) + down(1 − 2θ)`.
    pub fn generator_integral(&self, r: &RateIntegrals) -> f64 {
        let mut s = 0.0;
        for k in 0..r.up.len() {
            let c = self.linear.get(k).copied().unwrap_or(0.0);
            let q = self.quadratic.get(k).copied().unwrap_or(0.0);
            s += c * (r.up[k] - r.down[k]);
            s += q * (2.0 * r.theta_up[k] + r.up[k] + r.down[k] - 2.0 * r.theta_down[k]);
        }
        s
    }
}

/// Monte Carlo estimate of `𝔼 f(Y_T) − f(Y_0) − 𝔼∫𝒜f ds` at the last sample
/// of each record, with its standard error.
pub fn dynkin_residual(records: &[TrajectoryRecord], f: &TestFunction) -> (f64, f64) {
    let values: Vec<f64> = records
        .iter()
        .map(|r| {
            let last = r.len() - 1;
            let d = f.eval(&r.theta[last]) - f.eval(&r.theta[0]);
            d - (f.generator_integral(&r.integrals[last]) - f.generator_integral(&r.integrals[0]))
        })
        .collect();
    let (mean, var) = crate::stats::mean_var(&values);
    (mean, (var / values.len() as f64).sqrt())
}

/// Flow and jump-sampling settings shared by all replicas.
#[derive(Clone, Debug)]
pub struct Simulator<'a> {
    spec: &'a ModelSpec,
    dt: f64,
    max_jumps: u64,
    options: RecordOptions,
}

impl<'a> Simulator<'a> {
    /// `dt = None` selects `min(5h², 10⁻³)`.
    pub fn new(spec: &'a ModelSpec, dt: Option<f64>) -> Result<Self> {
        let h = spec.grid().spacing();
        let dt = dt.unwrap_or_else(|| default_flow_dt(h));
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("flow step dt must be positive"));
        }
        if spec.has_potential() && dt > 1.0 {
            return Err(Error::invalid("flow step dt must not exceed 1"));
        }
        Ok(Self { spec, dt, max_jumps: DEFAULT_MAX_JUMPS, options: RecordOptions::default() })
    }

    pub fn with_max_jumps(mut self, n: u64) -> Self {
        self.max_jumps = n;
        self
    }

    pub fn with_options(mut self, options: RecordOptions) -> Self {
        self.options = options;
        self
    }

    pub fn spec(&self) -> &'a ModelSpec {
        self.spec
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// One IMEX step of length `dt` for the potential; `θ` is untouched.
    pub fn flow_step(&self, state: &mut HybridState, dt: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::invalid("flow_step needs dt > 0"));
        }
        if !self.spec.has_potential() {
            state.t += dt;
            return Ok(());
        }
        let m = self.spec.grid().m();
        let mut z = vec![0.0; m];
        let field = state.coordinate(self.spec)?;
        self.spec.alignment().nodal_interior(field.values(), &mut z);
        let mut scratch = vec![0.0; m];
        imex_step(self.spec, &mut state.u, &z, dt, &mut scratch)?;
        state.t += dt;
        Ok(())
    }

    /// Starts a path at `initial` drawing from `rng`.
    pub fn start(&self, initial: HybridState, rng: RngStream) -> Result<Run<'_, 'a>> {
        Run::new(self, initial, rng)
    }

    /// Integrated-hazard draw of the next jump. Advances `state` along the
    /// flow to the jump time (without applying the jump) and returns the
    /// time and reaction index, or `None` if no jump occurs before `horizon`.
    pub fn next_jump(&self, state: &mut HybridState, rng: &mut RngStream, horizon: f64) -> Result<Option<(f64, usize)>> {
        let mut run = Run::new(self, state.clone(), rng.clone())?;
        run.apply_jumps = false;
        let out = run.advance(horizon, None, true)?;
        *state = run.state;
        *rng = run.rng;
        Ok(out)
    }

    /// Thinning sampler for the next jump, valid when the opening and closing
    /// rates are globally bounded. Used as an independent oracle.
    pub fn next_jump_thinning(&self, state: &mut HybridState, rng: &mut RngStream, horizon: f64) -> Result<Option<(f64, usize)>> {
        let bound = self.rate_bound()?;
        if bound == 0.0 {
            return Ok(None);
        }
        loop {
            let wait = rng.exp1() / bound;
            let target = state.t + wait;
            if target > horizon {
                return Ok(None);
            }
            while state.t < target {
                let step = self.dt.min(target - state.t);
                self.flow_step(state, step)?;
                if target - state.t < 1e-14 * target.max(1.0) {
                    state.t = target;
                }
            }
            let rates = self.spec.reaction_rates(state)?;
            let total: f64 = rates.iter().sum();
            let accept = rng.uniform() * bound;
            if accept < total {
                return Ok(Some((state.t, select(&rates, accept))));
            }
        }
    }

    fn rate_bound(&self) -> Result<f64> {
        let part = self.spec.partition();
        let total = part.total_channels() as f64;
        match self.spec {
            ModelSpec::Compartmental(s) => Ok(total * (s.opening.sup_abs() + s.closing.sup_abs())),
            ModelSpec::NeuralField(_) => Err(Error::invalid("thinning oracle covers the compartmental model")),
        }
    }

    /// Simulates to `horizon`, sampling every `dt_out` (the last sample is at `horizon`).
    pub fn simulate(&self, initial: HybridState, horizon: f64, dt_out: f64, rng: RngStream) -> Result<TrajectoryRecord> {
        let times = sample_times(initial.t, horizon, dt_out)?;
        let mut run = self.start(initial, rng)?;
        let mut record = TrajectoryRecord::new(self.spec.partition().channels().to_vec());
        run.sample(&mut record);
        for &t in &times[1..] {
            run.advance(t, Some(&mut record), false)?;
            run.sample(&mut record);
        }
        Ok(record)
    }
}

/// `min(5h², 10⁻³)`.
pub fn default_flow_dt(spacing: f64) -> f64 {
    (5.0 * spacing * spacing).min(1e-3)
}

/// Sample times `t0, t0 + dt_out, …, horizon`.
pub fn sample_times(t0: f64, horizon: f64, dt_out: f64) -> Result<Vec<f64>> {
    if !(horizon > t0) {
        return Err(Error::invalid("horizon must exceed the start time"));
    }
    if !(dt_out > 0.0) {
        return Err(Error::invalid("dt_out must be positive"));
    }
    let n = ((horizon - t0) / dt_out - 1e-9).ceil().max(1.0) as usize;
    let mut out: Vec<f64> = (0..n).map(|i| t0 + i as f64 * dt_out).collect();
    out.push(horizon);
    Ok(out)
}

fn select(rates: &[f64], target: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &r) in rates.iter().enumerate() {
        if r > 0.0 {
            last = j;
            acc += r;
            if target < acc {
                return j;
            }
        }
    }
    last
}

/// `(I − dt Δ_h) u⁺ = u + dt z (v̄ − u)`.
fn imex_step(spec: &ModelSpec, u: &mut [f64], z: &[f64], dt: f64, scratch: &mut [f64]) -> Result<()> {
    let ModelSpec::Compartmental(s) = spec else {
        return Ok(());
    };
    let h = spec.grid().spacing();
    let r = dt / (h * h);
    for j in 0..u.len() {
        u[j] += dt * z[j] * (s.v_bar - u[j]);
    }
    solve_tridiagonal_const(1.0 + 2.0 * r, -r, u, scratch)
}

/// Mutable state of one simulated path.
#[derive(Clone, Debug)]
pub struct Run<'s, 'a> {
    sim: &'s Simulator<'a>,
    state: HybridState,
    rng: RngStream,
    apply_jumps: bool,
    hazard: f64,
    threshold: f64,
    rates: Vec<f64>,
    total: f64,
    residual_density: f64,
    z_nodal: Vec<f64>,
    avg: Vec<f64>,
    drive: Vec<f64>,
    u_prev: Vec<f64>,
    scratch: Vec<f64>,
    rates_next: Vec<f64>,
    acc: RateIntegrals,
    jumps: u64,
}

impl<'s, 'a> Run<'s, 'a> {
    fn new(sim: &'s Simulator<'a>, state: HybridState, mut rng: RngStream) -> Result<Self> {
        let spec = sim.spec;
        spec.check_theta(&state.theta)?;
        let p = spec.partition().len();
        let m = spec.grid().m();
        if spec.has_potential() {
            if state.u.len() != m {
                return Err(Error::invalid("potential must be an interior grid vector"));
            }
            if state.u.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("initial potential is not finite"));
            }
        }
        let threshold = rng.exp1();
        let mut run = Self {
            sim,
            state,
            rng,
            apply_jumps: true,
            hazard: 0.0,
            threshold,
            rates: vec![0.0; 2 * p],
            total: 0.0,
            residual_density: 0.0,
            z_nodal: vec![0.0; if spec.has_potential() { m } else { 0 }],
            avg: vec![0.0; p],
            drive: Vec::new(),
            u_prev: vec![0.0; if spec.has_potential() { m } else { 0 }],
            scratch: vec![0.0; if spec.has_potential() { m } else { 0 }],
            rates_next: vec![0.0; 2 * p],
            acc: RateIntegrals::zeros(p),
            jumps: 0,
        };
        if spec.has_potential() {
            let z = run.state.coordinate(spec)?.into_values();
            spec.alignment().nodal_interior(&z, &mut run.z_nodal);
        } else {
            run.drive = spec.neural_drive(&run.state.theta);
        }
        let (total, res) = run.evaluate_current()?;
        run.commit_rates();
        run.total = total;
        run.residual_density = res;
        Ok(run)
    }

    pub fn state(&self) -> &HybridState {
        &self.state
    }

    pub fn integrals(&self) -> &RateIntegrals {
        &self.acc
    }

    pub fn jump_count(&self) -> u64 {
        self.jumps
    }

    /// Rates at the current state into `self.rates_next`; returns the total and
    /// the residual density.
    fn evaluate_current(&mut self) -> Result<(f64, f64)> {
        let spec = self.sim.spec;
        let mut out = std::mem::take(&mut self.rates_next);
        if spec.has_potential() {
            spec.alignment().averages_into(&self.state.u, &mut self.avg);
            spec.compartmental_rates(&self.avg, &self.state.theta, &mut out)?;
        } else {
            spec.neural_rates(&self.drive, &self.state.theta, &mut out)?;
        }
        let total = out.iter().sum();
        self.rates_next = out;
        let res = if self.sim.options.track_residual { self.residual_density() } else { 0.0 };
        Ok((total, res))
    }

    fn commit_rates(&mut self) {
        std::mem::swap(&mut self.rates, &mut self.rates_next);
    }

    /// `‖𝒜z − F(U, z)‖²_{L²}` at the current state.
    fn residual_density(&self) -> f64 {
        let spec = self.sim.spec;
        let part = spec.partition();
        let align = spec.alignment();
        let g = spec.grid();
        let h = g.spacing();
        let mut total = 0.0;
        match spec {
            ModelSpec::Compartmental(s) => {
                for k in 0..part.len() {
                    let z = f64::from(self.state.theta[k]) / f64::from(part.channels()[k]);
                    let ub = self.avg[k];
                    let (ab, bb) = (s.opening.eval(ub), s.closing.eval(ub));
                    let (a, b) = align.node_range(k);
                    let mut acc = 0.0;
                    for j in a..=b {
                        let uj = g.node_value(&self.state.u, j);
                        let e = (ab - s.opening.eval(uj)) * (1.0 - z) - (bb - s.closing.eval(uj)) * z;
                        let w = if j == a || j == b { 0.5 } else { 1.0 };
                        acc += w * e * e;
                    }
                    total += h * acc;
                }
            }
            ModelSpec::NeuralField(s) => {
                let ch = part.channels();
                let z: Vec<f64> = (0..part.len()).map(|k| f64::from(self.state.theta[k]) / f64::from(ch[k])).collect();
                let nodal = s.node_compartment_integrals();
                for k in 0..part.len() {
                    let fb = s.gain.eval(self.drive[k]);
                    let (a, b) = align.node_range(k);
                    let mut acc = 0.0;
                    for j in a..=b {
                        let input: f64 = (0..z.len()).map(|i| nodal[(j, i)] * z[i]).sum();
                        let e = fb - s.gain.eval(input);
                        let w = if j == a || j == b { 0.5 } else { 1.0 };
                        acc += w * e * e;
                    }
                    total += h * acc;
                }
            }
        }
        total
    }

    /// Adds the trapezoid contribution of `[t, t + s]` with the current rates
    /// at the left end and `rates_next` at the right end.
    fn accumulate(&mut self, s: f64, res_right: f64) {
        let p = self.acc.up.len();
        let half = 0.5 * s;
        for k in 0..p {
            let th = f64::from(self.state.theta[k]);
            let up = half * (self.rates[k] + self.rates_next[k]);
            let down = half * (self.rates[p + k] + self.rates_next[p + k]);
            self.acc.up[k] += up;
            self.acc.down[k] += down;
            self.acc.theta_up[k] += th * up;
            self.acc.theta_down[k] += th * down;
        }
        self.acc.residual += half * (self.residual_density + res_right);
    }

    fn sample(&mut self, record: &mut TrajectoryRecord) {
        if !self.sim.spec.has_potential() {
            // refresh the incrementally updated drive
            self.drive = self.sim.spec.neural_drive(&self.state.theta);
        }
        record.times.push(self.state.t);
        record.theta.push(self.state.theta.clone());
        if self.sim.options.store_u && self.sim.spec.has_potential() {
            record.u.push(self.state.u.clone());
        }
        record.integrals.push(self.acc.clone());
        record.jump_count = self.jumps;
    }

    /// Runs the path up to `t_end`. With `first_only`, returns at the first jump.
    pub fn advance(&mut self, t_end: f64, mut record: Option<&mut TrajectoryRecord>, first_only: bool) -> Result<Option<(f64, usize)>> {
        if self.sim.spec.has_potential() {
            self.advance_flow(t_end, &mut record, first_only)
        } else {
            self.advance_constant(t_end, &mut record, first_only)
        }
    }

    fn advance_constant(&mut self, t_end: f64, record: &mut Option<&mut TrajectoryRecord>, first_only: bool) -> Result<Option<(f64, usize)>> {
        while self.state.t < t_end {
            let remaining = t_end - self.state.t;
            let gap = self.threshold - self.hazard;
            let s = if self.total > 0.0 { gap / self.total } else { f64::INFINITY };
            if s >= remaining {
                self.rates_next.copy_from_slice(&self.rates);
                let res = self.residual_density;
                self.accumulate(remaining, res);
                self.hazard += self.total * remaining;
                self.state.t = t_end;
                break;
            }
            self.rates_next.copy_from_slice(&self.rates);
            let res = self.residual_density;
            self.accumulate(s, res);
            self.state.t += s;
            let j = select(&self.rates, self.rng.uniform() * self.total);
            if !self.apply_jumps {
                return Ok(Some((self.state.t, j)));
            }
            self.jump(j, record)?;
            if first_only {
                return Ok(Some((self.state.t, j)));
            }
        }
        Ok(None)
    }

    fn advance_flow(&mut self, t_end: f64, record: &mut Option<&mut TrajectoryRecord>, first_only: bool) -> Result<Option<(f64, usize)>> {
        let dt = self.sim.dt;
        while self.state.t < t_end {
            let t0 = self.state.t;
            let step = if t_end - t0 <= dt * (1.0 + 1e-9) { t_end - t0 } else { dt };
            self.u_prev.copy_from_slice(&self.state.u);
            self.flow_from_prev(step)?;
            let (l1, r1) = self.evaluate_current()?;
            let l0 = self.total;
            let inc = 0.5 * (l0 + l1) * step;
            if self.hazard + inc < self.threshold || l0 + l1 <= 0.0 {
                self.accumulate(step, r1);
                self.hazard += inc;
                self.state.t = if step == t_end - t0 { t_end } else { t0 + step };
                self.commit_rates();
                self.total = l1;
                self.residual_density = r1;
                continue;
            }
            // hazard crosses the threshold inside this substep
            let d = self.threshold - self.hazard;
            let a = (l1 - l0) / (2.0 * step);
            let disc = (l0 * l0 + 4.0 * a * d).max(0.0);
            let denom = l0 + disc.sqrt();
            let mut s = if denom > 0.0 { (2.0 * d / denom).clamp(0.0, step) } else { step };
            self.flow_from_prev(s)?;
            let (mut lt, mut rt) = self.evaluate_current()?;
            let gap = d - 0.5 * (l0 + lt) * s;
            if lt > 0.0 && gap.abs() > 1e-3 * step * lt {
                s = (s + gap / lt).clamp(0.0, step);
                self.flow_from_prev(s)?;
                (lt, rt) = self.evaluate_current()?;
            }
            self.accumulate(s, rt);
            self.state.t = t0 + s;
            self.commit_rates();
            self.total = lt;
            self.residual_density = rt;
            if lt <= 0.0 {
                // degenerate crossing with no active reaction; redraw
                self.hazard = 0.0;
                self.threshold = self.rng.exp1();
                continue;
            }
            let j = select(&self.rates, self.rng.uniform() * lt);
            if !self.apply_jumps {
                return Ok(Some((self.state.t, j)));
            }
            self.jump(j, record)?;
            if first_only {
                return Ok(Some((self.state.t, j)));
            }
        }
        Ok(None)
    }

    /// Restores `u` from `u_prev` and flows by `s`.
    fn flow_from_prev(&mut self, s: f64) -> Result<()> {
        self.state.u.copy_from_slice(&self.u_prev);
        if s > 0.0 {
            imex_step(self.sim.spec, &mut self.state.u, &self.z_nodal, s, &mut self.scratch)?;
        }
        Ok(())
    }

    fn jump(&mut self, j: usize, record: &mut Option<&mut TrajectoryRecord>) -> Result<()> {
        let spec = self.sim.spec;
        let p = self.state.theta.len();
        let (k, delta) = spec.reactions().stoichiometry(j);
        if delta > 0 {
            self.state.theta[k] += 1;
        } else {
            self.state.theta[k] -= 1;
        }
        self.jumps += 1;
        if self.jumps > self.sim.max_jumps {
            return Err(Error::TooManyJumps(self.sim.max_jumps));
        }
        if let Some(rec) = record.as_deref_mut() {
            if self.sim.options.log_jumps {
                rec.jumps.push((self.state.t, j as u32));
            }
        }
        let part = spec.partition();
        let lk = f64::from(part.channels()[k]);
        match spec {
            ModelSpec::Compartmental(_) => {
                let values: Vec<f64> = (0..p)
                    .map(|i| f64::from(self.state.theta[i]) / f64::from(part.channels()[i]))
                    .collect();
                spec.alignment().write_compartment_nodes(&values, k, &mut self.z_nodal);
            }
            ModelSpec::NeuralField(s) => {
                let sign = delta as f64;
                for i in 0..p {
                    self.drive[i] += s.wbar()[(i, k)] * sign / lk;
                }
            }
        }
        let (total, res) = self.evaluate_current()?;
        self.commit_rates();
        self.total = total;
        self.residual_density = res;
        self.hazard = 0.0;
        self.threshold = self.rng.exp1();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{CompartmentalSpec, Kernel, NeuralFieldSpec, ScalarFn};
    use crate::spatial::{build_partition, ChannelRule, Grid};

    fn comp(p: usize, l: u32, a: ScalarFn, b: ScalarFn, v_bar: f64, m: usize) -> ModelSpec {
        let part = build_partition(1.0, p, &ChannelRule::Uniform(l), None).unwrap();
        let grid = Grid::new(1.0, m).unwrap();
        ModelSpec::Compartmental(CompartmentalSpec::new(a, b, v_bar, part, grid).unwrap())
    }

    fn nf(p: usize, l: u32, f: ScalarFn, w: Kernel, m: usize) -> ModelSpec {
        let part = build_partition(1.0, p, &ChannelRule::Uniform(l), None).unwrap();
        let grid = Grid::new(1.0, m).unwrap();
        ModelSpec::NeuralField(NeuralFieldSpec::new(f, w, part, grid).unwrap())
    }

    #[test]
    fn heat_mode_decay_under_flow() {
        let spec = comp(1, 5, ScalarFn::constant(0.0), ScalarFn::constant(0.0), 1.0, 31);
        let g = *spec.grid();
        let sim = Simulator::new(&spec, Some(1e-4)).unwrap();
        let mut st = HybridState { t: 0.0, u: g.sine_mode(1), theta: vec![0] };
        for _ in 0..1000 {
            sim.flow_step(&mut st, 1e-4).unwrap();
        }
        let decay = (-std::f64::consts::PI.powi(2) * 0.1).exp();
        let err = st.u.iter().zip(g.sine_mode(1)).map(|(a, b)| (a - decay * b).abs()).fold(0.0, f64::max);
        let h = g.spacing();
        assert!(err <= 2.0 * (h * h + 1e-4), "err {err}");
    }

    #[test]
    fn zero_potential_is_fixed_point() {
        let spec = comp(2, 5, ScalarFn::constant(1.0), ScalarFn::constant(1.0), 0.0, 15);
        let sim = Simulator::new(&spec, None).unwrap();
        let mut st = HybridState { t: 0.0, u: vec![0.0; 15], theta: vec![3, 2] };
        for _ in 0..50 {
            sim.flow_step(&mut st, 1e-3).unwrap();
        }
        assert!(st.u.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn flow_time_error_is_first_order() {
        let spec = comp(1, 4, ScalarFn::constant(0.0), ScalarFn::constant(0.0), 1.0, 15);
        let g = *spec.grid();
        let sim = Simulator::new(&spec, None).unwrap();
        let u0 = g.sample_interior(|x| x * (1.0 - x));
        let run = |dt: f64| {
            let mut st = HybridState { t: 0.0, u: u0.clone(), theta: vec![2] };
            let n = (0.1 / dt).round() as usize;
            for _ in 0..n {
                sim.flow_step(&mut st, dt).unwrap();
            }
            st.u
        };
        let reference = run(1e-6 * 25.0 / 4.0);
        let err = |v: Vec<f64>| v.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let e1 = err(run(1e-3));
        let e2 = err(run(5e-4));
        let ratio = e1 / e2;
        assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn no_rates_no_jumps() {
        let spec = comp(2, 5, ScalarFn::constant(0.0), ScalarFn::constant(0.0), 1.0, 15);
        let sim = Simulator::new(&spec, None).unwrap();
        let st = HybridState { t: 0.0, u: vec![0.1; 15], theta: vec![2, 3] };
        let rec = sim.simulate(st.clone(), 1.0, 0.1, RngStream::new(1, 0)).unwrap();
        assert_eq!(rec.jump_count, 0);
        assert!(rec.theta.iter().all(|t| t == &vec![2, 3]));
        let mut s2 = st;
        assert!(sim.next_jump(&mut s2, &mut RngStream::new(1, 0), 5.0).unwrap().is_none());

        let spec = nf(4, 5, ScalarFn::constant(0.0), Kernel::Constant { value: 0.0 }, 15);
        let sim = Simulator::new(&spec, None).unwrap();
        let st = HybridState { t: 0.0, u: vec![], theta: vec![0, 0, 0, 0] };
        let rec = sim.simulate(st, 2.0, 0.5, RngStream::new(3, 0)).unwrap();
        assert_eq!(rec.jump_count, 0);
        assert!(rec.martingale_part().iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn snapshots_match_jump_log() {
        let spec = comp(4, 20, ScalarFn::logistic(1.0, 2.0, 0.0), ScalarFn::logistic(1.0, -2.0, 0.0), 1.0, 31);
        let g = *spec.grid();
        let sim = Simulator::new(&spec, None).unwrap();
        let st = HybridState::from_profiles(&spec, &g.sine_mode(1), &vec![0.25; 33]).unwrap();
        let rec = sim.simulate(st, 1.0, 0.05, RngStream::new(9, 4)).unwrap();
        assert!(rec.jump_count > 10);
        assert!(rec.jumps.windows(2).all(|w| w[0].0 < w[1].0));
        for i in 0..rec.len() {
            assert_eq!(rec.reconstruct_theta(i), rec.theta[i]);
        }
    }

    #[test]
    fn maximum_principle_holds() {
        let spec = comp(4, 10, ScalarFn::logistic(1.0, 2.0, 0.0), ScalarFn::logistic(1.0, -2.0, 0.0), 1.0, 31);
        let g = *spec.grid();
        let sim = Simulator::new(&spec, None).unwrap();
        let u0 = g.sample_interior(|x| 0.6 * (3.0 * std::f64::consts::PI * x).sin());
        let st = HybridState::from_profiles(&spec, &u0, &vec![0.5; 33]).unwrap();
        let rec = sim.simulate(st, 0.5, 0.01, RngStream::new(5, 0)).unwrap();
        let bound = 1.0f64.max(0.6);
        assert!(rec.u.iter().flatten().all(|x| x.abs() <= bound + 1e-12));
        assert!(rec.theta.iter().flatten().all(|&t| t <= 10));
    }

    #[test]
    fn identical_seed_identical_record() {
        let spec = nf(4, 20, ScalarFn::logistic(1.0, 4.0, 0.5), Kernel::Gaussian { amplitude: 2.0, width: 0.2 }, 31);
        let sim = Simulator::new(&spec, None).unwrap();
        let st = HybridState::from_profiles(&spec, &[], &vec![0.25; 33]).unwrap();
        let a = sim.simulate(st.clone(), 1.0, 0.1, RngStream::new(11, 2)).unwrap();
        let b = sim.simulate(st.clone(), 1.0, 0.1, RngStream::new(11, 2)).unwrap();
        let c = sim.simulate(st, 1.0, 0.1, RngStream::new(11, 3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.jumps, c.jumps);
    }

    #[test]
    fn drift_integral_exact_for_constant_rates() {
        // pure death process: down rate 2θ between jumps, so ∫down = 2∫θ
        let spec = comp(1, 8, ScalarFn::constant(0.0), ScalarFn::constant(2.0), 1.0, 3);
        let sim = Simulator::new(&spec, None).unwrap();
        let st = HybridState { t: 0.0, u: vec![0.0; 3], theta: vec![8] };
        let rec = sim.simulate(st, 3.0, 3.0, RngStream::new(2, 0)).unwrap();
        let mut expect = 0.0;
        let mut theta = 8.0;
        let mut last = 0.0;
        for &(t, _) in &rec.jumps {
            expect += 2.0 * theta * (t - last);
            theta -= 1.0;
            last = t;
        }
        expect += 2.0 * theta * (3.0 - last);
        let got = rec.integrals.last().unwrap().down[0];
        assert!((got - expect).abs() <= 1e-9 * expect.max(1.0), "{got} vs {expect}");
    }

    #[test]
    fn telescoping_martingale() {
        let spec = comp(2, 15, ScalarFn::logistic(1.0, 2.0, 0.0), ScalarFn::logistic(1.0, -2.0, 0.0), 1.0, 15);
        let g = *spec.grid();
        let sim = Simulator::new(&spec, None).unwrap();
        let st = HybridState::from_profiles(&spec, &g.sine_mode(1), &vec![0.25; 17]).unwrap();
        let mut run = sim.start(st, RngStream::new(21, 7)).unwrap();
        let mut full = TrajectoryRecord::new(spec.partition().channels().to_vec());
        run.sample(&mut full);
        run.advance(0.4, Some(&mut full), false).unwrap();
        run.sample(&mut full);
        let mut restarted = run.clone();
        run.advance(1.0, Some(&mut full), false).unwrap();
        run.sample(&mut full);

        let mut part = TrajectoryRecord::new(spec.partition().channels().to_vec());
        restarted.acc = RateIntegrals::zeros(2);
        restarted.sample(&mut part);
        restarted.advance(1.0, Some(&mut part), false).unwrap();
        restarted.sample(&mut part);

        let mf = full.martingale_part();
        let mp = part.martingale_part();
        for k in 0..2 {
            let a = mf[2][k] - mf[1][k];
            assert!((a - mp[1][k]).abs() < 1e-12, "{a} vs {}", mp[1][k]);
        }
    }

    #[test]
    fn jump_counts_are_extensive() {
        let counts: Vec<f64> = [10u32, 40, 160]
            .iter()
            .map(|&l| {
                let spec = comp(2, l, ScalarFn::logistic(1.0, 2.0, 0.0), ScalarFn::logistic(1.0, -2.0, 0.0), 1.0, 7);
                let sim = Simulator::new(&spec, None).unwrap().with_options(RecordOptions { store_u: false, log_jumps: false, track_residual: false });
                let g = *spec.grid();
                let mut total = 0u64;
                for r in 0..20 {
                    let st = HybridState::from_profiles(&spec, &g.sine_mode(1), &vec![0.25; 9]).unwrap();
                    total += sim.simulate(st, 1.0, 1.0, RngStream::new(8, r)).unwrap().jump_count;
                }
                total as f64
            })
            .collect();
        let xs: Vec<f64> = [10f64, 40.0, 160.0].iter().map(|x| x.ln()).collect();
        let ys: Vec<f64> = counts.iter().map(|x| x.ln()).collect();
        let fit = crate::stats::fit_slope(&xs, &ys);
        assert!((fit.slope - 1.0).abs() <= 0.1, "slope {}", fit.slope);
    }

    #[test]
    fn circuit_breaker_trips() {
        let spec = comp(1, 50, ScalarFn::constant(5.0), ScalarFn::constant(5.0), 1.0, 3);
        let sim = Simulator::new(&spec, None).unwrap().with_max_jumps(100);
        let st = HybridState { t: 0.0, u: vec![0.0; 3], theta: vec![25] };
        let err = sim.simulate(st, 10.0, 1.0, RngStream::new(1, 1)).unwrap_err();
        assert!(matches!(err, Error::TooManyJumps(100)));
    }

    #[test]
    fn derived_seeds_differ_by_domain() {
        assert_ne!(derive_seed(1, "lln"), derive_seed(1, "clt"));
        assert_eq!(derive_seed(1, "lln"), derive_seed(1, "lln"));
    }
}

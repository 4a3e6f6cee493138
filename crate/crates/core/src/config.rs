//! JSON run configuration with defaults, validation and round-trip.

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::models::{CompartmentalSpec, Kernel, ModelSpec, NeuralFieldSpec, ScalarFn};
use crate::spatial::{build_partition, ChannelRule, Grid, Partition};

/// Initial profile on `[0, l]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Constant { value: f64 },
    /// `amplitude · sin(π · mode · x / l)`.
    Sine { amplitude: f64, mode: u32 },
}

impl Profile {
    pub fn eval(&self, x: f64, length: f64) -> f64 {
        match *self {
            Profile::Constant { value } => value,
            Profile::Sine { amplitude, mode } => amplitude * (std::f64::consts::PI * f64::from(mode) * x / length).sin(),
        }
    }

    fn bounds(&self) -> (f64, f64) {
        match *self {
            Profile::Constant { value } => (value, value),
            Profile::Sine { amplitude, .. } => (-amplitude.abs(), amplitude.abs()),
        }
    }
}

fn logistic_up() -> ScalarFn {
    ScalarFn::logistic(1.0, 2.0, 0.0)
}
fn logistic_down() -> ScalarFn {
    ScalarFn::logistic(1.0, -2.0, 0.0)
}
fn one() -> f64 {
    1.0
}
fn sine_u0() -> Profile {
    Profile::Sine { amplitude: 1.0, mode: 1 }
}
fn quarter() -> Profile {
    Profile::Constant { value: 0.25 }
}
fn default_gain() -> ScalarFn {
    ScalarFn::logistic(1.0, 4.0, 0.5)
}
fn default_kernel() -> Kernel {
    Kernel::Gaussian { amplitude: 2.0, width: 0.2 }
}

/// Model family with its functions and initial data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Compartmental {
        #[serde(default = "logistic_up")]
        opening: ScalarFn,
        #[serde(default = "logistic_down")]
        closing: ScalarFn,
        #[serde(default = "one")]
        v_bar: f64,
        #[serde(default = "sine_u0")]
        u0: Profile,
        #[serde(default = "quarter")]
        p0: Profile,
    },
    NeuralField {
        #[serde(default = "default_gain")]
        gain: ScalarFn,
        #[serde(default = "default_kernel")]
        kernel: Kernel,
        #[serde(default = "quarter")]
        p0: Profile,
    },
}

impl ModelConfig {
    pub fn compartmental() -> Self {
        ModelConfig::Compartmental {
            opening: logistic_up(),
            closing: logistic_down(),
            v_bar: 1.0,
            u0: sine_u0(),
            p0: quarter(),
        }
    }

    pub fn neural_field() -> Self {
        ModelConfig::NeuralField { gain: default_gain(), kernel: default_kernel(), p0: quarter() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Compartmental { .. } => "compartmental",
            ModelConfig::NeuralField { .. } => "neural_field",
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::compartmental()
    }
}

/// Accepts either a bare family name or a full tagged object.
fn model_from_json<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<ModelConfig, D::Error> {
    use serde::de::Error as _;
    let v = serde_json::Value::deserialize(d)?;
    match v {
        serde_json::Value::String(s) => match s.as_str() {
            "compartmental" => Ok(ModelConfig::compartmental()),
            "neural_field" => Ok(ModelConfig::neural_field()),
            other => Err(D::Error::custom(format!(
                "model: unknown family `{other}`, expected `compartmental` or `neural_field`"
            ))),
        },
        obj => serde_json::from_value(obj).map_err(|e| D::Error::custom(format!("model: {e}"))),
    }
}

fn default_length() -> f64 {
    1.0
}
fn default_compartments() -> usize {
    8
}
fn default_channels() -> ChannelRule {
    ChannelRule::Uniform(64)
}
fn default_grid_nodes() -> usize {
    127
}

/// Domain, partition and grid of single-partition runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialConfig {
    #[serde(default = "default_length")]
    pub length: f64,
    #[serde(default = "default_compartments")]
    pub compartments: usize,
    #[serde(default)]
    pub boundaries: Option<Vec<f64>>,
    #[serde(default = "default_channels")]
    pub channels: ChannelRule,
    /// Interior grid node count `m`.
    #[serde(default = "default_grid_nodes")]
    pub grid_nodes: usize,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            length: 1.0,
            compartments: default_compartments(),
            boundaries: None,
            channels: default_channels(),
            grid_nodes: default_grid_nodes(),
        }
    }
}

/// One refinement level: `p` uniform compartments with `ℓ` channels each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Level {
    pub compartments: usize,
    pub channels: u32,
}

/// Whether a ladder violating `ℓ δ₊ → 0` is rejected or only flagged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisCheck {
    #[default]
    Enforce,
    Warn,
}

fn default_levels() -> Vec<Level> {
    vec![
        Level { compartments: 8, channels: 16 },
        Level { compartments: 32, channels: 32 },
        Level { compartments: 128, channels: 64 },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderConfig {
    #[serde(default = "default_levels")]
    pub levels: Vec<Level>,
    #[serde(default)]
    pub hypothesis_check: HypothesisCheck,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self { levels: default_levels(), hypothesis_check: HypothesisCheck::Enforce }
    }
}

/// Test function pair `(ψ, Φ)` given by sine coefficients; `ψ` acts on the
/// potential and is ignored for the neural field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunctionConfig {
    #[serde(default)]
    pub u: Vec<f64>,
    #[serde(default)]
    pub p: Vec<f64>,
}

fn default_test_functions() -> Vec<TestFunctionConfig> {
    vec![
        TestFunctionConfig { u: vec![1.0], p: vec![1.0] },
        TestFunctionConfig { u: vec![0.0, 1.0], p: vec![0.0, 1.0] },
    ]
}

fn default_residual_compartments() -> Vec<usize> {
    vec![4, 8, 16, 32]
}
fn default_residual_channels() -> u32 {
    64
}
fn default_jump_compartments() -> usize {
    8
}
fn default_jump_channels() -> Vec<u32> {
    vec![16, 64, 256]
}
fn default_residual_replicas() -> usize {
    50
}

/// Level sweeps of the residual-scaling experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualSweepConfig {
    /// Compartment counts at fixed `channels` for the fluid-limit residual.
    #[serde(default = "default_residual_compartments")]
    pub compartments: Vec<usize>,
    #[serde(default = "default_residual_channels")]
    pub channels: u32,
    /// Fixed compartment count for the jump second-moment sweep.
    #[serde(default = "default_jump_compartments")]
    pub jump_compartments: usize,
    #[serde(default = "default_jump_channels")]
    pub jump_channels: Vec<u32>,
    #[serde(default = "default_residual_replicas")]
    pub replicas: usize,
}

impl Default for ResidualSweepConfig {
    fn default() -> Self {
        Self {
            compartments: default_residual_compartments(),
            channels: default_residual_channels(),
            jump_compartments: default_jump_compartments(),
            jump_channels: default_jump_channels(),
            replicas: default_residual_replicas(),
        }
    }
}

fn default_replicas() -> usize {
    500
}
fn default_langevin_replicas() -> usize {
    4000
}
fn default_trace_modes() -> usize {
    8
}
fn default_batches() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "default_test_functions")]
    pub test_functions: Vec<TestFunctionConfig>,
    #[serde(default = "default_langevin_replicas")]
    pub langevin_replicas: usize,
    /// Basis size `N` of the trace-convergence experiment.
    #[serde(default = "default_trace_modes")]
    pub trace_modes: usize,
    #[serde(default = "default_batches")]
    pub batches: usize,
    #[serde(default)]
    pub residual: ResidualSweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            replicas: default_replicas(),
            horizon: 1.0,
            test_functions: default_test_functions(),
            langevin_replicas: default_langevin_replicas(),
            trace_modes: default_trace_modes(),
            batches: default_batches(),
            residual: ResidualSweepConfig::default(),
        }
    }
}

fn default_basis() -> usize {
    8
}
fn default_n_spec() -> usize {
    256
}
fn default_cov_dt() -> f64 {
    1e-3
}
fn default_langevin_dt() -> f64 {
    2e-4
}
fn default_max_jumps() -> u64 {
    crate::engine::DEFAULT_MAX_JUMPS
}

/// Step sizes and truncation parameters. `None` steps take grid-derived defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Flow and deterministic step; default `min(5h², 10⁻³)`.
    #[serde(default)]
    pub dt: Option<f64>,
    /// Output sampling step; default `T / 100`.
    #[serde(default)]
    pub dt_out: Option<f64>,
    /// Galerkin basis size `N`.
    #[serde(default = "default_basis")]
    pub basis_size: usize,
    /// Spectral truncation for dual norms.
    #[serde(default = "default_n_spec")]
    pub n_spec: usize,
    /// Hilbert-scale index `α`.
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "default_cov_dt")]
    pub cov_dt: f64,
    #[serde(default = "default_langevin_dt")]
    pub langevin_dt: f64,
    #[serde(default = "default_max_jumps")]
    pub max_jumps: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: None,
            dt_out: None,
            basis_size: default_basis(),
            n_spec: default_n_spec(),
            alpha: 1.0,
            cov_dt: default_cov_dt(),
            langevin_dt: default_langevin_dt(),
            max_jumps: default_max_jumps(),
        }
    }
}

fn default_seed() -> u64 {
    20240917
}
fn default_output() -> String {
    "out".into()
}

/// Complete, validated run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, deserialize_with = "model_from_json")]
    pub model: ModelConfig,
    #[serde(default)]
    pub spatial: SpatialConfig,
    #[serde(default)]
    pub ladder: LadderConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            spatial: SpatialConfig::default(),
            ladder: LadderConfig::default(),
            experiment: ExperimentConfig::default(),
            solver: SolverConfig::default(),
            seed: default_seed(),
            output: default_output(),
        }
    }
}

/// Parses and validates configuration text. Returns the config together
/// with non-fatal warnings.
pub fn parse_config(text: &str) -> Result<(RunConfig, Vec<String>)> {
    let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let warnings = config.validate()?;
    Ok((config, warnings))
}

/// Reads and parses a configuration file.
pub fn load_config(path: &std::path::Path) -> Result<(RunConfig, Vec<String>)> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Checks the standing hypotheses of the fluctuation limit along a ladder:
/// `ℓ` increasing, `δ₊` decreasing and `ℓ δ₊` decreasing.
pub fn ladder_hypothesis(levels: &[Level], length: f64) -> std::result::Result<(), String> {
    for (i, w) in levels.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let da = length / a.compartments as f64;
        let db = length / b.compartments as f64;
        if b.channels <= a.channels {
            return Err(format!("ladder levels {i} and {}: channel count ℓ must increase", i + 1));
        }
        if db >= da {
            return Err(format!("ladder levels {i} and {}: diameter δ₊ must decrease", i + 1));
        }
        if f64::from(b.channels) * db >= f64::from(a.channels) * da {
            return Err(format!(
                "ladder levels {i} and {}: ℓ·δ₊ increases from {} to {} (must tend to 0)",
                i + 1,
                f64::from(a.channels) * da,
                f64::from(b.channels) * db
            ));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.spatial.length, self.spatial.grid_nodes)
    }

    /// Flow step after defaults.
    pub fn flow_dt(&self) -> Result<f64> {
        Ok(match self.solver.dt {
            Some(dt) => dt,
            None => crate::engine::default_flow_dt(self.grid()?.spacing()),
        })
    }

    pub fn dt_out(&self) -> f64 {
        self.solver.dt_out.unwrap_or(self.experiment.horizon / 100.0)
    }

    /// Partition of the spatial block.
    pub fn partition(&self) -> Result<Partition> {
        let s = &self.spatial;
        build_partition(s.length, s.compartments, &s.channels, s.boundaries.as_deref())
    }

    /// Model on an explicit partition.
    pub fn model_on(&self, partition: Partition) -> Result<ModelSpec> {
        let grid = self.grid()?;
        match &self.model {
            ModelConfig::Compartmental { opening, closing, v_bar, .. } => Ok(ModelSpec::Compartmental(
                CompartmentalSpec::new(opening.clone(), closing.clone(), *v_bar, partition, grid)?,
            )),
            ModelConfig::NeuralField { gain, kernel, .. } => {
                Ok(ModelSpec::NeuralField(NeuralFieldSpec::new(gain.clone(), kernel.clone(), partition, grid)?))
            }
        }
    }

    /// Model on the spatial block's partition.
    pub fn model(&self) -> Result<ModelSpec> {
        self.model_on(self.partition()?)
    }

    /// Model on a uniform partition with `p` compartments of `ℓ` channels.
    pub fn model_at(&self, p: usize, channels: u32) -> Result<ModelSpec> {
        self.model_on(build_partition(self.spatial.length, p, &ChannelRule::Uniform(channels), None)?)
    }

    /// Initial potential (interior, empty for the neural field) and activity (closed grid).
    pub fn initial_profiles(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let g = self.grid()?;
        let l = g.length();
        match &self.model {
            ModelConfig::Compartmental { u0, p0, .. } => {
                Ok((g.sample_interior(|x| u0.eval(x, l)), g.sample_closed(|x| p0.eval(x, l))))
            }
            ModelConfig::NeuralField { p0, .. } => Ok((Vec::new(), g.sample_closed(|x| p0.eval(x, l)))),
        }
    }

    /// Cross-field validation; returns warnings for tolerated deviations.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        let s = &self.spatial;
        if !(s.length > 0.0 && s.length.is_finite()) {
            return Err(Error::invalid("spatial.length must be positive"));
        }
        let grid = self.grid()?;
        let part = self.partition()?;
        grid.align(&part)?;
        match &self.model {
            ModelConfig::Compartmental { opening, closing, v_bar, u0, p0 } => {
                opening.validate("model.opening")?;
                closing.validate("model.closing")?;
                if !v_bar.is_finite() {
                    return Err(Error::invalid("model.v_bar must be finite"));
                }
                let (lo, hi) = p0.bounds();
                if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
                    return Err(Error::invalid("model.p0 must take values in [0, 1]"));
                }
                if !u0.bounds().1.is_finite() {
                    return Err(Error::invalid("model.u0 must be finite"));
                }
            }
            ModelConfig::NeuralField { gain, kernel, p0 } => {
                gain.validate("model.gain")?;
                if let Kernel::Gaussian { width, .. } = kernel {
                    if !(*width > 0.0) {
                        return Err(Error::invalid("model.kernel.width must be positive"));
                    }
                }
                if p0.bounds().0 < 0.0 {
                    return Err(Error::invalid("model.p0 must be nonnegative"));
                }
            }
        }

        let lad = &self.ladder;
        if lad.levels.len() < 3 {
            return Err(Error::invalid("ladder.levels needs at least 3 levels"));
        }
        for (i, lv) in lad.levels.iter().enumerate() {
            if lv.channels == 0 || lv.compartments == 0 {
                return Err(Error::invalid(format!("ladder.levels[{i}]: zero compartments or channels")));
            }
            let p = build_partition(s.length, lv.compartments, &ChannelRule::Uniform(lv.channels), None)?;
            grid.align(&p).map_err(|e| Error::Invalid(format!("ladder.levels[{i}]: {e}")))?;
        }
        if let Err(msg) = ladder_hypothesis(&lad.levels, s.length) {
            match lad.hypothesis_check {
                HypothesisCheck::Enforce => return Err(Error::Constraint(msg)),
                HypothesisCheck::Warn => warnings.push(msg),
            }
        }

        let e = &self.experiment;
        if e.replicas < 2 || e.langevin_replicas < 2 {
            return Err(Error::invalid("experiment replicas must be at least 2"));
        }
        if !(e.horizon > 0.0 && e.horizon.is_finite()) {
            return Err(Error::invalid("experiment.horizon must be positive"));
        }
        if e.test_functions.is_empty() {
            return Err(Error::invalid("experiment.test_functions must not be empty"));
        }
        if e.batches < 2 {
            return Err(Error::invalid("experiment.batches must be at least 2"));
        }
        let n = self.solver.basis_size;
        let custom_tests = e.test_functions != default_test_functions();
        for (i, tf) in e.test_functions.iter().enumerate() {
            if tf.u.len() > n || tf.p.len() > n {
                return Err(Error::invalid(format!(
                    "experiment.test_functions[{i}] has more coefficients than solver.basis_size = {n}"
                )));
            }
            if tf.u.iter().chain(&tf.p).all(|&c| c == 0.0) {
                return Err(Error::invalid(format!("experiment.test_functions[{i}] is zero")));
            }
            if custom_tests && matches!(self.model, ModelConfig::NeuralField { .. }) && tf.u.iter().any(|&c| c != 0.0) {
                warnings.push(format!("experiment.test_functions[{i}].u ignored for the neural field"));
            }
        }
        if e.trace_modes == 0 || e.trace_modes > grid.m() {
            return Err(Error::invalid("experiment.trace_modes must lie in 1..=grid_nodes"));
        }
        let r = &e.residual;
        if r.compartments.len() < 2 || r.jump_channels.len() < 2 {
            return Err(Error::invalid("experiment.residual sweeps need at least 2 levels"));
        }
        if r.replicas < 2 {
            return Err(Error::invalid("experiment.residual.replicas must be at least 2"));
        }
        for &p in r.compartments.iter().chain(std::iter::once(&r.jump_compartments)) {
            let part = build_partition(s.length, p, &ChannelRule::Uniform(r.channels.max(1)), None)?;
            grid.align(&part).map_err(|e| Error::Invalid(format!("experiment.residual: {e}")))?;
        }

        let sv = &self.solver;
        if n == 0 || n > grid.m() {
            return Err(Error::invalid(format!("solver.basis_size must lie in 1..={}", grid.m())));
        }
        if sv.n_spec < n {
            return Err(Error::invalid("solver.n_spec must be at least solver.basis_size"));
        }
        for (name, v) in [("dt", sv.dt), ("dt_out", sv.dt_out)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::invalid(format!("solver.{name} must be positive")));
                }
            }
        }
        if sv.dt.is_some_and(|d| d > 1.0) {
            return Err(Error::invalid("solver.dt must not exceed 1"));
        }
        if self.dt_out() > e.horizon {
            return Err(Error::invalid("solver.dt_out exceeds the horizon"));
        }
        if !(sv.cov_dt > 0.0) || !(sv.langevin_dt > 0.0) {
            return Err(Error::invalid("solver.cov_dt and solver.langevin_dt must be positive"));
        }
        if !(sv.alpha > 0.5) {
            return Err(Error::Constraint("solver.alpha must exceed 1/2".into()));
        }
        if sv.max_jumps == 0 {
            return Err(Error::invalid("solver.max_jumps must be positive"));
        }
        Ok(warnings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_neural_field_config() {
        let (cfg, warnings) = parse_config(r#"{"model": "neural_field"}"#).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(cfg.model, ModelConfig::neural_field());
        assert_eq!(cfg.spatial.grid_nodes, 127);
        assert_eq!(cfg.solver.basis_size, 8);
        let echoed = cfg.to_json();
        assert!(echoed.contains("\"kind\": \"neural_field\""));
        assert!(echoed.contains("\"grid_nodes\": 127"));
    }

    #[test]
    fn decreasing_boundaries_rejected() {
        let err = parse_config(r#"{"spatial": {"compartments": 3, "boundaries": [0, 0.5, 0.4, 1]}}"#).unwrap_err();
        assert!(matches!(&err, Error::Invalid(m) if m.contains("boundaries not increasing")), "{err}");
    }

    #[test]
    fn ladder_hypothesis_enforced_or_warned() {
        let text = r#"{"ladder": {"levels": [
            {"compartments": 8, "channels": 16},
            {"compartments": 16, "channels": 64},
            {"compartments": 32, "channels": 256}]}}"#;
        assert!(matches!(parse_config(text), Err(Error::Constraint(_))));
        let warn = text.replace("]}}", "], \"hypothesis_check\": \"warn\"}}");
        let (_, w) = parse_config(&warn).unwrap();
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse_config(r#"{"solver": {"dtt": 0.1}}"#).unwrap_err();
        assert!(matches!(&err, Error::Schema(m) if m.contains("dtt")), "{err}");
        let err = parse_config(r#"{"model": {"kind": "compartmental", "gain": {"type": "constant", "value": 1}}}"#).unwrap_err();
        assert!(matches!(&err, Error::Schema(m) if m.contains("gain")), "{err}");
        let err = parse_config(r#"{"model": "hodgkin"}"#).unwrap_err();
        assert!(matches!(&err, Error::Schema(m) if m.contains("hodgkin")), "{err}");
    }

    #[test]
    fn misaligned_level_rejected() {
        let err = parse_config(r#"{"spatial": {"compartments": 3}}"#).unwrap_err();
        assert!(matches!(&err, Error::Invalid(m) if m.contains("grid not aligned")), "{err}");
    }

    #[test]
    fn default_round_trip() {
        let cfg = RunConfig::default();
        let (back, _) = parse_config(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}

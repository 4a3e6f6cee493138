//! Spatial domain `[0, l]`: compartment partitions, the uniform
//! finite-difference grid, piecewise-constant coordinate fields and
//! Hilbert-scale norms in the Dirichlet sine eigenbasis.
//!
//! Grid vectors come in two flavours. Fields with a Dirichlet condition
//! (the membrane potential) are stored on the `m` interior nodes; fields
//! without one (gating fractions, neural activity) are stored on all
//! `m + 2` nodes including `x = 0` and `x = l`. Every quadrature helper
//! accepts either length and treats a missing boundary value as zero.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when matching compartment boundaries to grid nodes.
const ALIGN_TOL: f64 = 1e-9;

/// How many channels (or neurons) each compartment holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelRule {
    /// Same count in every compartment.
    Uniform(u32),
    /// Explicit count per compartment.
    PerCompartment(Vec<u32>),
    /// Count proportional to compartment length, rounded, at least one.
    Density { density: f64 },
}

/// Decomposition of `[0, l]` into `p` compartments with channel counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    length: f64,
    boundaries: Vec<f64>,
    channels: Vec<u32>,
}

impl Partition {
    pub fn new(length: f64, boundaries: Vec<f64>, channels: Vec<u32>) -> Result<Self> {
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::invalid(format!("domain length must be positive, got {length}")));
        }
        if boundaries.len() < 2 {
            return Err(Error::invalid("a partition needs at least one compartment"));
        }
        if boundaries.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("boundaries not increasing"));
        }
        let first = boundaries[0];
        let last = *boundaries.last().unwrap();
        if first.abs() > ALIGN_TOL * length || (last - length).abs() > ALIGN_TOL * length {
            return Err(Error::invalid(format!(
                "boundaries must start at 0 and end at {length}, got [{first}, {last}]"
            )));
        }
        if channels.len() != boundaries.len() - 1 {
            return Err(Error::invalid(format!(
                "{} channel counts for {} compartments",
                channels.len(),
                boundaries.len() - 1
            )));
        }
        if channels.contains(&0) {
            return Err(Error::invalid("zero channel count"));
        }
        Ok(Self { length, boundaries, channels })
    }

    /// Uniform split of `[0, length]` into `p` compartments.
    pub fn uniform(length: f64, p: usize, channels: &ChannelRule) -> Result<Self> {
        build_partition(length, p, channels, None)
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Number of compartments `p`.
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn channels(&self) -> &[u32] {
        &self.channels
    }

    /// Lebesgue measure of compartment `k`.
    pub fn measure(&self, k: usize) -> f64 {
        self.boundaries[k + 1] - self.boundaries[k]
    }

    pub fn measures(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.measure(k)).collect()
    }

    pub fn nu_max(&self) -> f64 {
        (0..self.len()).map(|k| self.measure(k)).fold(f64::MIN, f64::max)
    }

    pub fn nu_min(&self) -> f64 {
        (0..self.len()).map(|k| self.measure(k)).fold(f64::MAX, f64::min)
    }

    /// Largest diameter; equals the largest measure on an interval.
    pub fn delta_max(&self) -> f64 {
        self.nu_max()
    }

    pub fn delta_min(&self) -> f64 {
        self.nu_min()
    }

    pub fn ell_max(&self) -> u32 {
        self.channels.iter().copied().max().unwrap_or(0)
    }

    pub fn ell_min(&self) -> u32 {
        self.channels.iter().copied().min().unwrap_or(0)
    }

    pub fn total_channels(&self) -> u64 {
        self.channels.iter().map(|&c| u64::from(c)).sum()
    }

    /// Fluctuation scaling `ℓ₋ / ν₊`.
    pub fn fluctuation_scale(&self) -> f64 {
        f64::from(self.ell_min()) / self.nu_max()
    }

    /// Heterogeneity ratio `ℓ₋ν₋ / (ℓ₊ν₊)`; one for uniform partitions.
    pub fn heterogeneity_ratio(&self) -> f64 {
        f64::from(self.ell_min()) * self.nu_min() / (f64::from(self.ell_max()) * self.nu_max())
    }

    /// Index of the compartment containing `x`; right-continuous, the last
    /// compartment is closed.
    pub fn locate(&self, x: f64) -> usize {
        let p = self.len();
        let idx = self.boundaries[1..p].partition_point(|&b| b <= x);
        idx.min(p - 1)
    }
}

/// Builds a partition of `[0, length]` with `p` compartments.
///
/// Boundaries are uniform unless given explicitly.
pub fn build_partition(
    length: f64,
    p: usize,
    channels: &ChannelRule,
    boundaries: Option<&[f64]>,
) -> Result<Partition> {
    if p == 0 {
        return Err(Error::invalid("partition needs p >= 1"));
    }
    let boundaries: Vec<f64> = match boundaries {
        Some(b) => {
            if b.len() != p + 1 {
                return Err(Error::invalid(format!(
                    "{} boundaries given for {p} compartments",
                    b.len()
                )));
            }
            b.to_vec()
        }
        None => (0..=p).map(|k| length * k as f64 / p as f64).collect(),
    };
    if boundaries.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("boundaries not increasing"));
    }
    let counts = match channels {
        ChannelRule::Uniform(c) => vec![*c; p],
        ChannelRule::PerCompartment(v) => v.clone(),
        ChannelRule::Density { density } => {
            if !(*density > 0.0) {
                return Err(Error::invalid("channel density must be positive"));
            }
            boundaries
                .windows(2)
                .map(|w| ((density * (w[1] - w[0])).round() as u32).max(1))
                .collect()
        }
    };
    Partition::new(length, boundaries, counts)
}

/// Uniform grid on `[0, l]` with `m` interior nodes and spacing `l / (m + 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    length: f64,
    interior: usize,
}

impl Grid {
    pub fn new(length: f64, interior: usize) -> Result<Self> {
        if interior == 0 {
            return Err(Error::invalid("grid needs m >= 1 interior nodes"));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::invalid("grid length must be positive"));
        }
        Ok(Self { length, interior })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Interior node count `m`.
    pub fn m(&self) -> usize {
        self.interior
    }

    /// Number of cells `m + 1`.
    pub fn cells(&self) -> usize {
        self.interior + 1
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.cells() as f64
    }

    /// Coordinate of node `j`, `0 <= j <= m + 1`.
    pub fn node(&self, j: usize) -> f64 {
        self.length * j as f64 / self.cells() as f64
    }

    /// Samples `f` on the interior nodes.
    pub fn sample_interior(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (1..=self.interior).map(|j| f(self.node(j))).collect()
    }

    /// Samples `f` on all nodes including both endpoints.
    pub fn sample_closed(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..=self.cells()).map(|j| f(self.node(j))).collect()
    }

    /// Value of a grid vector at closed-grid node `j`.
    #[inline]
    pub fn node_value(&self, v: &[f64], j: usize) -> f64 {
        if v.len() == self.interior + 2 {
            v[j]
        } else if j == 0 || j > self.interior {
            0.0
        } else {
            v[j - 1]
        }
    }

    pub(crate) fn check_len(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() == self.interior || v.len() == self.interior + 2 {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: grid vector of length {} on a grid with m = {}",
                v.len(),
                self.interior
            )))
        }
    }

    /// Composite trapezoid integral over `[0, l]`.
    pub fn integrate(&self, v: &[f64]) -> f64 {
        let h = self.spacing();
        let m = self.interior;
        let mut s = 0.5 * (self.node_value(v, 0) + self.node_value(v, m + 1));
        for j in 1..=m {
            s += self.node_value(v, j);
        }
        h * s
    }

    /// Trapezoid `L²` inner product.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        let h = self.spacing();
        let m = self.interior;
        let mut s = 0.5
            * (self.node_value(f, 0) * self.node_value(g, 0)
                + self.node_value(f, m + 1) * self.node_value(g, m + 1));
        for j in 1..=m {
            s += self.node_value(f, j) * self.node_value(g, j);
        }
        h * s
    }

    /// Interior samples of the normalized eigenfunction `φ_i`, `i >= 1`.
    pub fn sine_mode(&self, i: usize) -> Vec<f64> {
        let l = self.length;
        self.sample_interior(|x| sine_basis(i, x, l))
    }

    /// Checks that every compartment boundary sits on a grid node and
    /// returns the node ranges of each compartment.
    pub fn align(&self, partition: &Partition) -> Result<Alignment> {
        if (partition.length() - self.length).abs() > ALIGN_TOL * self.length {
            return Err(Error::invalid("grid and partition lengths differ"));
        }
        let cells = self.cells() as f64;
        let mut nodes = Vec::with_capacity(partition.len() + 1);
        for &b in partition.boundaries() {
            let pos = b / self.length * cells;
            let j = pos.round();
            if (pos - j).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "grid not aligned: boundary {b} falls between nodes (m + 1 = {})",
                    self.cells()
                )));
            }
            nodes.push(j as usize);
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("grid not aligned: a compartment holds no full grid cell"));
        }
        Ok(Alignment { nodes, grid: *self })
    }
}

/// Normalized Dirichlet eigenfunction `φ_i(x) = √(2/l) sin(π i x / l)`.
#[inline]
pub fn sine_basis(i: usize, x: f64, length: f64) -> f64 {
    (2.0 / length).sqrt() * (PI * i as f64 * x / length).sin()
}

/// Eigenvalue of `-Δ` for mode `i`: `π² i² / l²`.
#[inline]
pub fn laplace_eigenvalue(i: usize, length: f64) -> f64 {
    let k = PI * i as f64 / length;
    k * k
}

/// Grid node ranges of each compartment of an aligned partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    nodes: Vec<usize>,
    grid: Grid,
}

impl Alignment {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn compartments(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Closed-grid node indices `(first, last)` bounding compartment `k`.
    pub fn node_range(&self, k: usize) -> (usize, usize) {
        (self.nodes[k], self.nodes[k + 1])
    }

    /// Trapezoid integral of a grid vector over compartment `k`.
    pub fn integrate_over(&self, v: &[f64], k: usize) -> f64 {
        let (a, b) = self.node_range(k);
        let g = &self.grid;
        let mut s = 0.5 * (g.node_value(v, a) + g.node_value(v, b));
        for j in a + 1..b {
            s += g.node_value(v, j);
        }
        g.spacing() * s
    }

    /// Compartment average `|D_k|⁻¹ ∫_{D_k} u dx`.
    pub fn average(&self, v: &[f64], k: usize) -> f64 {
        let (a, b) = self.node_range(k);
        self.integrate_over(v, k) / (self.grid.spacing() * (b - a) as f64)
    }

    /// All compartment averages into `out`.
    pub fn averages_into(&self, v: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.average(v, k);
        }
    }

    /// Nodal values of a piecewise-constant field on the interior nodes;
    /// interface nodes take the mean of the two adjacent compartments.
    pub fn nodal_interior(&self, values: &[f64], out: &mut [f64]) {
        for k in 0..self.compartments() {
            self.write_compartment_nodes(values, k, out);
        }
    }

    /// Refreshes the interior nodal values touched by compartment `k`.
    pub fn write_compartment_nodes(&self, values: &[f64], k: usize, out: &mut [f64]) {
        let m = self.grid.m();
        let (a, b) = self.node_range(k);
        for j in a..=b {
            if j == 0 || j > m {
                continue;
            }
            let v = if j == a && k > 0 {
                0.5 * (values[k - 1] + values[k])
            } else if j == b && k + 1 < values.len() {
                0.5 * (values[k] + values[k + 1])
            } else {
                values[k]
            };
            out[j - 1] = v;
        }
    }

    /// `‖z − f‖²_{L²}` for piecewise-constant `z` and a grid vector `f`,
    /// integrating each compartment with its own constant.
    pub fn l2_dist_sq_piecewise(&self, values: &[f64], f: &[f64]) -> f64 {
        let g = &self.grid;
        let mut total = 0.0;
        for (k, &z) in values.iter().enumerate() {
            let (a, b) = self.node_range(k);
            let d = |j: usize| {
                let e = z - g.node_value(f, j);
                e * e
            };
            let mut s = 0.5 * (d(a) + d(b));
            for j in a + 1..b {
                s += d(j);
            }
            total += g.spacing() * s;
        }
        total
    }
}

/// Function that is constant on each compartment of a partition.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseConstantField<'a> {
    values: Vec<f64>,
    partition: &'a Partition,
}

impl<'a> PiecewiseConstantField<'a> {
    pub fn new(values: Vec<f64>, partition: &'a Partition) -> Result<Self> {
        if values.len() != partition.len() {
            return Err(Error::invalid(format!(
                "{} values for {} compartments",
                values.len(),
                partition.len()
            )));
        }
        Ok(Self { values, partition })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn partition(&self) -> &Partition {
        self.partition
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.values[self.partition.locate(x)]
    }

    /// Average over compartment `k`, which is the stored value itself.
    pub fn compartment_average(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(k, v)| v * v * self.partition.measure(k))
            .sum()
    }

    /// Sine coefficients from the exact antiderivative on each compartment.
    pub fn to_spectral(&self, n_spec: usize) -> SpectralField {
        piecewise_to_spectral(&self.values, self.partition, n_spec)
    }
}

/// Open fraction field `z(θ) = Σ_k θ_k / l(k) · 1_{D_k}`.
pub fn coordinate_function<'a>(
    theta: &[u32],
    partition: &'a Partition,
) -> Result<PiecewiseConstantField<'a>> {
    if theta.len() != partition.len() {
        return Err(Error::invalid(format!(
            "theta has {} entries for {} compartments",
            theta.len(),
            partition.len()
        )));
    }
    let values = theta
        .iter()
        .zip(partition.channels())
        .map(|(&t, &l)| f64::from(t) / f64::from(l))
        .collect();
    PiecewiseConstantField::new(values, partition)
}

/// Compartment average of a grid vector, trapezoid rule on the cells of `D_k`.
pub fn compartment_average(u: &[f64], k: usize, partition: &Partition, grid: &Grid) -> Result<f64> {
    grid.check_len(u, "compartment_average")?;
    if k >= partition.len() {
        return Err(Error::invalid(format!("compartment {k} out of range")));
    }
    let alignment = grid.align(partition)?;
    Ok(alignment.average(u, k))
}

/// Coefficients `c_i = (f, φ_i)`, `i = 1..=n`, of a function given in the sine basis.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    coeffs: Vec<f64>,
    length: f64,
}

impl SpectralField {
    pub fn new(coeffs: Vec<f64>, length: f64) -> Self {
        Self { coeffs, length }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Hilbert-scale norm `(Σ c_i² (1 + π² i² / l²)^α)^{1/2}`.
    pub fn scale_norm(&self, alpha: f64) -> f64 {
        scale_norm(self, alpha)
    }
}

/// Sine coefficients of a grid vector by trapezoid quadrature.
pub fn to_spectral(f: &[f64], grid: &Grid, n_spec: usize) -> Result<SpectralField> {
    grid.check_len(f, "to_spectral")?;
    if n_spec == 0 {
        return Err(Error::invalid("N_spec must be >= 1"));
    }
    let m = grid.m();
    let cells = grid.cells() as f64;
    let scale = (2.0 / grid.length()).sqrt() * grid.spacing();
    let coeffs = (1..=n_spec)
        .map(|i| {
            let w = PI * i as f64 / cells;
            // φ_i vanishes at both endpoints, so only interior nodes contribute
            (1..=m).map(|j| grid.node_value(f, j) * (w * j as f64).sin()).sum::<f64>() * scale
        })
        .collect();
    Ok(SpectralField::new(coeffs, grid.length()))
}

/// Exact sine coefficients of a piecewise-constant function.
pub fn piecewise_to_spectral(values: &[f64], partition: &Partition, n_spec: usize) -> SpectralField {
    let l = partition.length();
    let norm = (2.0 / l).sqrt();
    let b = partition.boundaries();
    let coeffs = (1..=n_spec)
        .map(|i| {
            let w = PI * i as f64 / l;
            let mut c = 0.0;
            for (k, &v) in values.iter().enumerate() {
                if v != 0.0 {
                    c += v * ((w * b[k]).cos() - (w * b[k + 1]).cos());
                }
            }
            c * norm / w
        })
        .collect();
    SpectralField::new(coeffs, l)
}

/// Hilbert-scale norm; negative `alpha` gives the dual norms `H_{-|α|}`.
pub fn scale_norm(f: &SpectralField, alpha: f64) -> f64 {
    f.coeffs
        .iter()
        .enumerate()
        .map(|(idx, c)| c * c * (1.0 + laplace_eigenvalue(idx + 1, f.length)).powf(alpha))
        .sum::<f64>()
        .sqrt()
}

/// Squared dual norm of the indicator of `[a, b] ⊂ [0, l]`, truncated at
/// `n_spec` modes, with a refinement self-check at `2 n_spec`.
pub fn indicator_dual_norm_sq(a: f64, b: f64, length: f64, alpha: f64, n_spec: usize) -> Result<f64> {
    let sum = |n: usize| -> f64 {
        let norm = 2.0 / length;
        (1..=n)
            .map(|i| {
                let w = PI * i as f64 / length;
                let c = ((w * a).cos() - (w * b).cos()) / w;
                norm * c * c * (1.0 + w * w).powf(-alpha)
            })
            .sum()
    };
    let coarse = sum(n_spec);
    let fine = sum(2 * n_spec);
    check_refinement(coarse, fine)?;
    Ok(fine)
}

/// Dual norm of a spectral source evaluated at `n` and `2n` modes; errors if
/// the two differ by more than `1e-3` relative.
pub fn dual_norm_checked(source: impl Fn(usize) -> SpectralField, alpha: f64, n_spec: usize) -> Result<f64> {
    let coarse = scale_norm(&source(n_spec), alpha);
    let fine = scale_norm(&source(2 * n_spec), alpha);
    check_refinement(coarse, fine)?;
    Ok(fine)
}

fn check_refinement(coarse: f64, fine: f64) -> Result<()> {
    let drift = (fine - coarse).abs() / fine.abs().max(f64::MIN_POSITIVE);
    if fine != 0.0 && drift > 1e-3 {
        return Err(Error::Numerical(format!(
            "spectral truncation not converged: relative drift {drift:e} when doubling N_spec"
        )));
    }
    Ok(())
}

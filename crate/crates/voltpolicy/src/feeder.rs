//! Feeder network model.
//!
//! A feeder is a set of buses connected by series-impedance lines, with the
//! substation fixed at bus 0. From the line list we assemble the complex bus
//! admittance matrix `Y` and, from it, one real symmetric matrix per
//! injection coordinate so that every active/reactive injection is a
//! quadratic form `s_i = ū' M_i ū` of the stacked rectangular voltage state
//! `ū = [Re(ṽ); Im(ṽ)]`. Those matrices drive both the Newton solver and the
//! analytic sensitivities in [`crate::powerflow`].

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum FeederError {
    #[error("failed to read feeder file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse feeder file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("base_mva and base_kv must be positive")]
    BadBases,
    #[error("bus ids must be exactly 0..=N with no duplicates")]
    BadBusIds,
    #[error("line ({0}, {1}) references an unknown bus")]
    UnknownBus(usize, usize),
    #[error("line ({0}, {1}) has zero impedance")]
    ZeroImpedance(usize, usize),
    #[error("line ({0}, {1}) has negative resistance")]
    NegativeResistance(usize, usize),
    #[error("line ({0}, {0}) is a self-loop")]
    SelfLoop(usize),
    #[error("feeder graph is not connected")]
    Disconnected,
    #[error("substation bus 0 must carry no load, solar, or inverter")]
    SubstationHasDevices,
    #[error("bus {0}: inverter-controlled bus is missing its apparent-power limit")]
    MissingApparentPowerLimit(usize),
    #[error("bus {0}: apparent-power limit must be positive")]
    NonPositiveApparentPowerLimit(usize),
    #[error("bus {0}: apparent-power limit given but the bus is not inverter-controlled")]
    UnexpectedApparentPowerLimit(usize),
    #[error("bus {0}: inverter-controlled bus must host solar generation")]
    ControlWithoutSolar(usize),
    #[error("bus {0}: voltage band must satisfy 0 < v_min < v_max")]
    BadVoltageBand(usize),
    #[error("admittance matrix must be square")]
    NonSquareAdmittance,
}

/// A single bus. Bus 0 is the substation with fixed voltage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    #[serde(default)]
    pub has_load: bool,
    #[serde(default)]
    pub has_solar: bool,
    #[serde(default)]
    pub has_inverter_control: bool,
    /// Apparent-power limit in p.u.; present iff the bus is inverter-controlled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_max: Option<f64>,
    pub v_min: f64,
    pub v_max: f64,
}

/// A series-impedance line between two buses, in p.u.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    #[serde(rename = "r_pu")]
    pub r: f64,
    #[serde(rename = "x_pu")]
    pub x: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeederFile {
    base_mva: f64,
    base_kv: f64,
    buses: Vec<Bus>,
    lines: Vec<Line>,
}

/// Validated feeder model with the admittance matrix and all injection
/// matrices prebuilt. Immutable after construction and safe to share across
/// threads.
#[derive(Debug, Clone)]
pub struct FeederModel {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    base_mva: f64,
    base_kv: f64,
    y: DMatrix<Complex64>,
    /// Injection matrices ordered `p_0..p_N, q_0..q_N`, each `(2N+2)x(2N+2)`.
    m: Vec<DMatrix<f64>>,
    /// Sum of the active-power matrices; `ū' m_loss ū` is the total ohmic loss.
    m_loss: DMatrix<f64>,
    controlled: Vec<usize>,
    solar: Vec<usize>,
}

impl FeederModel {
    /// Loads and validates a feeder from a JSON file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, FeederError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    /// Parses and validates a feeder from JSON text.
    pub fn from_json_str(text: &str) -> Result<Self, FeederError> {
        let file: FeederFile = serde_json::from_str(text)?;
        Self::from_parts(file.buses, file.lines, file.base_mva, file.base_kv)
    }

    /// Validates the bus/line lists and builds `Y` and the injection matrices.
    pub fn from_parts(
        mut buses: Vec<Bus>,
        lines: Vec<Line>,
        base_mva: f64,
        base_kv: f64,
    ) -> Result<Self, FeederError> {
        if !(base_mva > 0.0) || !(base_kv > 0.0) {
            return Err(FeederError::BadBases);
        }
        buses.sort_by_key(|b| b.id);
        let nb = buses.len();
        if nb < 2 || buses.iter().enumerate().any(|(i, b)| b.id != i) {
            return Err(FeederError::BadBusIds);
        }

        let sub = &buses[0];
        if sub.has_load || sub.has_solar || sub.has_inverter_control || sub.s_max.is_some() {
            return Err(FeederError::SubstationHasDevices);
        }
        for bus in &buses {
            if !(bus.v_min > 0.0 && bus.v_min < bus.v_max) {
                return Err(FeederError::BadVoltageBand(bus.id));
            }
            match (bus.has_inverter_control, bus.s_max) {
                (true, None) => return Err(FeederError::MissingApparentPowerLimit(bus.id)),
                (true, Some(s)) if s <= 0.0 => {
                    return Err(FeederError::NonPositiveApparentPowerLimit(bus.id))
                }
                (false, Some(_)) => return Err(FeederError::UnexpectedApparentPowerLimit(bus.id)),
                _ => {}
            }
            if bus.has_inverter_control && !bus.has_solar {
                return Err(FeederError::ControlWithoutSolar(bus.id));
            }
        }

        for line in &lines {
            if line.from >= nb || line.to >= nb {
                return Err(FeederError::UnknownBus(line.from, line.to));
            }
            if line.from == line.to {
                return Err(FeederError::SelfLoop(line.from));
            }
            if line.r < 0.0 {
                return Err(FeederError::NegativeResistance(line.from, line.to));
            }
            if line.r == 0.0 && line.x == 0.0 {
                return Err(FeederError::ZeroImpedance(line.from, line.to));
            }
        }

        // Connectivity from the substation.
        let mut seen = vec![false; nb];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut adj = vec![Vec::new(); nb];
        for line in &lines {
            adj[line.from].push(line.to);
            adj[line.to].push(line.from);
        }
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(FeederError::Disconnected);
        }

        let y = build_admittance(nb, &lines);
        let m = build_injection_matrices(&y)?;
        let mut m_loss = DMatrix::zeros(2 * nb, 2 * nb);
        for mp in &m[..nb] {
            m_loss += mp;
        }
        let controlled: Vec<usize> = buses
            .iter()
            .filter(|b| b.has_inverter_control)
            .map(|b| b.id)
            .collect();
        let solar: Vec<usize> = buses.iter().filter(|b| b.has_solar).map(|b| b.id).collect();

        Ok(Self {
            buses,
            lines,
            base_mva,
            base_kv,
            y,
            m,
            m_loss,
            controlled,
            solar,
        })
    }

    /// Number of non-substation buses.
    pub fn n(&self) -> usize {
        self.buses.len() - 1
    }

    /// Total number of buses including the substation.
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn base_kv(&self) -> f64 {
        self.base_kv
    }

    pub fn admittance(&self) -> &DMatrix<Complex64> {
        &self.y
    }

    /// All injection matrices, ordered `p_0..p_N, q_0..q_N`.
    pub fn injection_matrices(&self) -> &[DMatrix<f64>] {
        &self.m
    }

    /// Matrix of the active-power injection at `bus`.
    pub fn m_p(&self, bus: usize) -> &DMatrix<f64> {
        &self.m[bus]
    }

    /// Matrix of the reactive-power injection at `bus`.
    pub fn m_q(&self, bus: usize) -> &DMatrix<f64> {
        &self.m[self.buses.len() + bus]
    }

    /// Sum of all active-power matrices; its quadratic form is the ohmic loss.
    pub fn m_loss(&self) -> &DMatrix<f64> {
        &self.m_loss
    }

    /// Bus ids with inverter control, ascending.
    pub fn controlled_buses(&self) -> &[usize] {
        &self.controlled
    }

    /// Bus ids hosting solar generation, ascending.
    pub fn solar_buses(&self) -> &[usize] {
        &self.solar
    }

    /// Apparent-power limits of the controlled inverters, in controlled-bus order.
    pub fn s_max_controlled(&self) -> Vec<f64> {
        self.controlled
            .iter()
            .map(|&b| self.buses[b].s_max.expect("validated at construction"))
            .collect()
    }

    /// Lower voltage limits for buses `1..=N`.
    pub fn v_min(&self) -> Vec<f64> {
        self.buses[1..].iter().map(|b| b.v_min).collect()
    }

    /// Upper voltage limits for buses `1..=N`.
    pub fn v_max(&self) -> Vec<f64> {
        self.buses[1..].iter().map(|b| b.v_max).collect()
    }
}

/// Loads and validates a feeder model from a JSON file.
pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederModel, FeederError> {
    FeederModel::load(path)
}

/// Builds the bus admittance matrix from the line list. Off-diagonals are
/// `-1/(r+jx)` for each line; diagonals are the negated row sums (no shunts).
pub fn build_admittance(n_buses: usize, lines: &[Line]) -> DMatrix<Complex64> {
    let mut y = DMatrix::<Complex64>::zeros(n_buses, n_buses);
    for line in lines {
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(line.r, line.x);
        y[(line.from, line.to)] -= ys;
        y[(line.to, line.from)] -= ys;
        y[(line.from, line.from)] += ys;
        y[(line.to, line.to)] += ys;
    }
    y
}

/// Builds one real symmetric matrix per injection coordinate, ordered
/// `p_0..p_N, q_0..q_N`, such that `ū' M_i ū` reproduces the corresponding
/// active or reactive injection for any rectangular voltage state `ū`.
pub fn build_injection_matrices(
    y: &DMatrix<Complex64>,
) -> Result<Vec<DMatrix<f64>>, FeederError> {
    if y.nrows() != y.ncols() {
        return Err(FeederError::NonSquareAdmittance);
    }
    let nb = y.nrows();
    let mut out = Vec::with_capacity(2 * nb);
    let half = Complex64::new(0.5, 0.0);
    let j_half = Complex64::new(0.0, 0.5);
    for n in 0..nb {
        // Y_n carries row n of Y and zeros elsewhere; the complex injection is
        // conj(s_n) = ṽ^H Y_n ṽ, so p_n and q_n come from the Hermitian and
        // skew-Hermitian parts of Y_n.
        let mut yn = DMatrix::<Complex64>::zeros(nb, nb);
        yn.row_mut(n).copy_from(&y.row(n));
        let ynh = yn.adjoint();
        let h_p = (&yn + &ynh) * half;
        let h_q = (&yn - &ynh) * j_half;
        out.push(hermitian_to_real_form(&h_p));
        out.push(hermitian_to_real_form(&h_q));
    }
    // Reorder from interleaved (p_0, q_0, p_1, q_1, ...) to p-block then q-block.
    let mut ps = Vec::with_capacity(nb);
    let mut qs = Vec::with_capacity(nb);
    for (i, m) in out.into_iter().enumerate() {
        if i % 2 == 0 {
            ps.push(m);
        } else {
            qs.push(m);
        }
    }
    ps.extend(qs);
    Ok(ps)
}

/// Real symmetric representation of a Hermitian quadratic form: for Hermitian
/// `H`, `ṽ^H H ṽ = ū' M ū` with `ū = [Re ṽ; Im ṽ]` and
/// `M = [[Re H, -Im H], [Im H, Re H]]`.
fn hermitian_to_real_form(h: &DMatrix<Complex64>) -> DMatrix<f64> {
    let nb = h.nrows();
    let mut m = DMatrix::<f64>::zeros(2 * nb, 2 * nb);
    for i in 0..nb {
        for j in 0..nb {
            let re = h[(i, j)].re;
            let im = h[(i, j)].im;
            m[(i, j)] = re;
            m[(i + nb, j + nb)] = re;
            m[(i, j + nb)] = -im;
            m[(i + nb, j)] = im;
        }
    }
    m
}

//! Scenario configuration: physical constants of the standing maneuver,
//! uncertainty box, controller weights, sampling/seed settings, and the TOML
//! schema that overrides them.
//!
//! Angles are degrees in files and radians in memory. An empty file yields
//! the full default scenario; unknown keys are rejected; every filled-in
//! default is reported as a notice.

use crate::allocation::AllocationSpec;
use crate::grid::Grid;
use crate::lqr::WeightSet;
use crate::planning::ZVector;
use crate::reach::ParamBox;
use crate::robot::{output_map, ParamCoords, ParamVector, State};
use nalgebra::{Matrix4, Matrix6, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Validation(String),
}

/// Nominal link parameters.
///
/// Masses and inertias are the catalog values; the lengths and CoM offsets
/// are the minimal relative adjustment of (l1, l2, lc1, lc2) from their
/// rounded catalog values such that the seated posture `x0` places the CoM
/// exactly at the motion-plan anchor (0.309, 0.6678) m. The rounded values
/// (mid-link CoMs) put it 3 mm off, which the kinematic inversion would
/// propagate into every reference quantity.
pub fn nominal_params() -> ParamVector {
    ParamVector {
        m1: 9.68,
        m2: 12.59,
        m3: 44.57,
        i1: 1.16,
        i2: 0.52,
        i3: 2.56,
        l1: 0.533_257_817_786_123_5,
        l2: 0.405_576_462_884_694_84,
        l3: 0.52,
        lc1: 0.265_137_927_205_080_84,
        lc2: 0.204_687_613_123_840_62,
        lc3: 0.26,
    }
}

/// Parameter uncertainty box: ±5 % weight fluctuation propagated through the
/// anthropometric tables.
pub fn param_box_default() -> ParamBox {
    ParamBox::new(
        ParamCoords::from_column_slice(&[
            9.2, 11.2, 42.3, 1.10, 0.49, 2.40, 0.52, 0.39, 0.51, 0.23, 0.17, 0.24,
        ]),
        ParamCoords::from_column_slice(&[
            10.2, 13.2, 46.8, 1.21, 0.54, 2.65, 0.54, 0.42, 0.53, 0.30, 0.23, 0.28,
        ]),
    )
    .expect("default parameter box is valid")
}

/// Seated initial state `[90°; −90°; 90°; 0; 0; 0]` in radians.
pub fn x0_default() -> State {
    State::new(
        90.0_f64.to_radians(),
        (-90.0_f64).to_radians(),
        90.0_f64.to_radians(),
        0.0,
        0.0,
        0.0,
    )
}

/// Task-space start: seated thigh angle with the CoM anchor.
pub fn z_start_default() -> ZVector {
    ZVector::new((-90.0_f64).to_radians(), 0.309, 0.6678)
}

/// Task-space target: CoM above the ankles, thigh 5° below horizontal.
pub fn z_end_default() -> ZVector {
    ZVector::new((-5.0_f64).to_radians(), 0.0, 0.974)
}

/// Allocation weights `diag(1, 1, 10, 1)` with the crutch push-down
/// constraint `F_y ≥ 0`; all other inputs unconstrained.
pub fn allocation_spec() -> AllocationSpec {
    let mut spec = AllocationSpec::unconstrained([1.0, 1.0, 10.0, 1.0]);
    spec.lower[3] = Some(0.0);
    spec
}

/// Regulator weights of the standing controller.
pub fn weights_default() -> WeightSet {
    WeightSet {
        q: Matrix6::from_diagonal(&Vector6::new(
            3237.0, 5534.0, 6546.0, 7918.0, 4003.0, 8516.0,
        )),
        r: Matrix4::from_diagonal(&Vector4::new(0.3659, 0.0155, 0.1433, 0.1553)),
        s: Matrix6::from_diagonal(&Vector6::new(
            1068.0, 5396.0, 1324.0, 9467.0, 3975.0, 5819.0,
        )),
    }
}

/// Fully resolved scenario (radians, SI units).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub t0: f64,
    pub tf: f64,
    pub grid_hz: f64,
    #[serde(with = "serde_state")]
    pub x0: State,
    #[serde(with = "serde_params")]
    pub p_hat: ParamVector,
    pub param_box: ParamBox,
    /// Task-space start; `None` derives it from `x0` and `p_hat` so the
    /// joint-space reference starts exactly at `x0`.
    pub z_start: Option<SerdeZ>,
    pub z_end: SerdeZ,
    #[serde(with = "serde_allocation")]
    pub allocation: AllocationSpec,
    #[serde(with = "serde_weights")]
    pub weights: WeightSet,
    pub n_bounds: usize,
    pub n_validate: usize,
    pub seed_bounds: u64,
    pub seed_validate: u64,
    /// Falsification iteration budget per grid time (0 disables the pass).
    pub falsify_budget: usize,
    pub falsify_multistarts: usize,
    /// Worker threads for parallel stages (0 = one per core).
    pub workers: usize,
}

/// Serializable mirror of [`ZVector`] (radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SerdeZ {
    pub theta2: f64,
    pub x_com: f64,
    pub y_com: f64,
}

impl From<ZVector> for SerdeZ {
    fn from(z: ZVector) -> Self {
        Self {
            theta2: z.theta2,
            x_com: z.x_com,
            y_com: z.y_com,
        }
    }
}

impl From<SerdeZ> for ZVector {
    fn from(z: SerdeZ) -> Self {
        ZVector::new(z.theta2, z.x_com, z.y_com)
    }
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            t0: 0.0,
            tf: 3.5,
            grid_hz: 100.0,
            x0: x0_default(),
            p_hat: nominal_params(),
            param_box: param_box_default(),
            z_start: None,
            z_end: z_end_default().into(),
            allocation: allocation_spec(),
            weights: weights_default(),
            n_bounds: 500,
            n_validate: 500,
            seed_bounds: 2019,
            seed_validate: 2020,
            falsify_budget: 0,
            falsify_multistarts: 8,
            workers: 0,
        }
    }
}

impl Scenario {
    pub fn grid(&self) -> Result<Grid, ScenarioError> {
        Grid::from_span(self.t0, self.tf, self.grid_hz).map_err(ScenarioError::Validation)
    }

    /// Task-space start, derived from `x0` when not pinned explicitly.
    pub fn z_start(&self) -> ZVector {
        match self.z_start {
            Some(z) => z.into(),
            None => {
                let y = output_map(&self.x0, &self.p_hat);
                ZVector::new(self.x0[1], y[0], y[1])
            }
        }
    }

    pub fn z_end(&self) -> ZVector {
        self.z_end.into()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let err = |m: String| Err(ScenarioError::Validation(m));
        self.grid()?;
        if !self.x0.iter().all(|v| v.is_finite()) {
            return err("x0 has non-finite entries".into());
        }
        self.p_hat
            .validate()
            .map_err(|m| ScenarioError::Validation(format!("nominal: {m}")))?;
        self.param_box
            .validate()
            .map_err(|m| ScenarioError::Validation(format!("uncertainty: {m}")))?;
        self.allocation
            .validate()
            .map_err(|e| ScenarioError::Validation(format!("allocation: {e}")))?;
        self.weights
            .validate()
            .map_err(|m| ScenarioError::Validation(format!("lqr: {m}")))?;
        if self.n_bounds == 0 || self.n_validate == 0 {
            return err("sampling counts must be at least 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; changes iff the configuration or
    /// the seeds change.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("scenario serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// TOML file schema (everything optional; unknown keys rejected)

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    t0_s: Option<f64>,
    tf_s: Option<f64>,
    grid_hz: Option<f64>,
    /// Joint angles [deg] and rates [deg/s].
    x0_deg: Option<[f64; 6]>,
    workers: Option<usize>,
    nominal: Option<ParamsFile>,
    uncertainty: Option<BoxFile>,
    start: Option<ZFile>,
    target: Option<ZFile>,
    allocation: Option<AllocationFile>,
    lqr: Option<LqrFile>,
    sampling: Option<SamplingFile>,
    falsification: Option<FalsificationFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    masses_kg: [f64; 3],
    inertias_kgm2: [f64; 3],
    lengths_m: [f64; 3],
    com_offsets_m: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxFile {
    masses_kg: [[f64; 2]; 3],
    inertias_kgm2: [[f64; 2]; 3],
    lengths_m: [[f64; 2]; 3],
    com_offsets_m: [[f64; 2]; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ZFile {
    theta2_deg: f64,
    com_m: [f64; 2],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AllocationFile {
    weight_diag: [f64; 4],
    /// ±inf marks an absent bound.
    u_lo: Option<[f64; 4]>,
    u_hi: Option<[f64; 4]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LqrFile {
    q_diag: [f64; 6],
    r_diag: [f64; 4],
    s_diag: [f64; 6],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplingFile {
    n_bounds: Option<usize>,
    n_validate: Option<usize>,
    seed_bounds: Option<u64>,
    seed_validate: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FalsificationFile {
    budget: Option<usize>,
    multistarts: Option<usize>,
}

/// Parses a scenario file, filling every missing field from the defaults.
/// Returns the resolved scenario plus one notice per filled-in section.
pub fn load_scenario(path: &std::path::Path) -> Result<(Scenario, Vec<String>), ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    scenario_from_toml(&text)
}

pub fn scenario_from_toml(text: &str) -> Result<(Scenario, Vec<String>), ScenarioError> {
    let file: ScenarioFile = toml::from_str(text)?;
    let mut s = Scenario::default();
    let mut notices = Vec::new();
    let mut note = |field: &str| notices.push(format!("{field} not set, using default"));

    match file.t0_s {
        Some(v) => s.t0 = v,
        None => note("t0_s"),
    }
    match file.tf_s {
        Some(v) => s.tf = v,
        None => note("tf_s"),
    }
    match file.grid_hz {
        Some(v) => s.grid_hz = v,
        None => note("grid_hz"),
    }
    match file.x0_deg {
        Some(deg) => s.x0 = State::from_fn(|i, _| deg[i].to_radians()),
        None => note("x0_deg"),
    }
    match file.workers {
        Some(v) => s.workers = v,
        None => note("workers"),
    }
    match file.nominal {
        Some(p) => {
            s.p_hat = ParamVector {
                m1: p.masses_kg[0],
                m2: p.masses_kg[1],
                m3: p.masses_kg[2],
                i1: p.inertias_kgm2[0],
                i2: p.inertias_kgm2[1],
                i3: p.inertias_kgm2[2],
                l1: p.lengths_m[0],
                l2: p.lengths_m[1],
                l3: p.lengths_m[2],
                lc1: p.com_offsets_m[0],
                lc2: p.com_offsets_m[1],
                lc3: p.com_offsets_m[2],
            }
        }
        None => note("[nominal]"),
    }
    match file.uncertainty {
        Some(b) => {
            let mut lo = ParamCoords::zeros();
            let mut hi = ParamCoords::zeros();
            for (g, group) in [b.masses_kg, b.inertias_kgm2, b.lengths_m, b.com_offsets_m]
                .iter()
                .enumerate()
            {
                for i in 0..3 {
                    lo[3 * g + i] = group[i][0];
                    hi[3 * g + i] = group[i][1];
                }
            }
            s.param_box = ParamBox::new(lo, hi).map_err(ScenarioError::Validation)?;
        }
        None => note("[uncertainty]"),
    }
    match file.start {
        Some(z) => {
            s.z_start = Some(SerdeZ {
                theta2: z.theta2_deg.to_radians(),
                x_com: z.com_m[0],
                y_com: z.com_m[1],
            })
        }
        None => note("[start] (derived from x0 and nominal parameters)"),
    }
    match file.target {
        Some(z) => {
            s.z_end = SerdeZ {
                theta2: z.theta2_deg.to_radians(),
                x_com: z.com_m[0],
                y_com: z.com_m[1],
            }
        }
        None => note("[target]"),
    }
    match file.allocation {
        Some(a) => {
            let to_bound = |v: f64| if v.is_finite() { Some(v) } else { None };
            s.allocation = AllocationSpec {
                weights: Matrix4::from_diagonal(&Vector4::from(a.weight_diag)),
                lower: a.u_lo.map_or([None; 4], |b| b.map(to_bound)),
                upper: a.u_hi.map_or([None; 4], |b| b.map(to_bound)),
            };
        }
        None => note("[allocation]"),
    }
    match file.lqr {
        Some(w) => {
            s.weights = WeightSet {
                q: Matrix6::from_diagonal(&Vector6::from(w.q_diag)),
                r: Matrix4::from_diagonal(&Vector4::from(w.r_diag)),
                s: Matrix6::from_diagonal(&Vector6::from(w.s_diag)),
            }
        }
        None => note("[lqr]"),
    }
    match file.sampling {
        Some(sa) => {
            if let Some(v) = sa.n_bounds {
                s.n_bounds = v;
            }
            if let Some(v) = sa.n_validate {
                s.n_validate = v;
            }
            if let Some(v) = sa.seed_bounds {
                s.seed_bounds = v;
            }
            if let Some(v) = sa.seed_validate {
                s.seed_validate = v;
            }
        }
        None => note("[sampling]"),
    }
    match file.falsification {
        Some(f) => {
            if let Some(v) = f.budget {
                s.falsify_budget = v;
            }
            if let Some(v) = f.multistarts {
                s.falsify_multistarts = v;
            }
        }
        None => note("[falsification]"),
    }

    s.validate()?;
    Ok((s, notices))
}

// serde helpers for the nalgebra-backed fields
mod serde_state {
    use super::State;
    use serde::Serializer;

    pub fn serialize<S: Serializer>(x: &State, ser: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(x.as_slice(), ser)
    }
}

mod serde_params {
    use super::ParamVector;
    use serde::Serializer;

    pub fn serialize<S: Serializer>(p: &ParamVector, ser: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(p.to_coords().as_slice(), ser)
    }
}

mod serde_allocation {
    use super::AllocationSpec;
    use serde::{ser::SerializeStruct, Serializer};

    pub fn serialize<S: Serializer>(a: &AllocationSpec, ser: S) -> Result<S::Ok, S::Error> {
        let mut st = ser.serialize_struct("AllocationSpec", 3)?;
        st.serialize_field("weights", a.weights.as_slice())?;
        st.serialize_field("lower", &a.lower)?;
        st.serialize_field("upper", &a.upper)?;
        st.end()
    }
}

mod serde_weights {
    use super::WeightSet;
    use serde::{ser::SerializeStruct, Serializer};

    pub fn serialize<S: Serializer>(w: &WeightSet, ser: S) -> Result<S::Ok, S::Error> {
        let mut st = ser.serialize_struct("WeightSet", 3)?;
        st.serialize_field("q", w.q.as_slice())?;
        st.serialize_field("r", w.r.as_slice())?;
        st.serialize_field("s", w.s.as_slice())?;
        st.end()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn seated_com_matches_anchor() {
        let y = output_map(&x0_default(), &nominal_params());
        assert_abs_diff_eq!(y[0], 0.309, epsilon = 1e-12);
        assert_abs_diff_eq!(y[1], 0.6678, epsilon = 1e-12);
    }

    #[test]
    fn empty_file_is_full_default() {
        let (s, notices) = scenario_from_toml("").unwrap();
        assert_eq!(s, Scenario::default());
        assert!(!notices.is_empty());
        assert_eq!(s.grid().unwrap().len, 351);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = scenario_from_toml("unheard_of = 3\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse(_)));
    }

    #[test]
    fn inverted_box_names_coordinate() {
        let text = r#"
[uncertainty]
masses_kg = [[10.2, 9.2], [11.2, 13.2], [42.3, 46.8]]
inertias_kgm2 = [[1.10, 1.21], [0.49, 0.54], [2.40, 2.65]]
lengths_m = [[0.52, 0.54], [0.39, 0.42], [0.51, 0.53]]
com_offsets_m = [[0.23, 0.30], [0.17, 0.23], [0.24, 0.28]]
"#;
        let err = scenario_from_toml(text).unwrap_err();
        let msg = format!("{err}");
        assert!(
            msg.contains("m1"),
            "message should name the coordinate: {msg}"
        );
    }

    #[test]
    fn degrees_round_trip() {
        let text = "x0_deg = [90.0, -90.0, 90.0, 0.0, 0.0, 0.0]\n";
        let (s, _) = scenario_from_toml(text).unwrap();
        for (rad, deg) in s.x0.iter().zip([90.0, -90.0, 90.0, 0.0, 0.0, 0.0]) {
            assert_abs_diff_eq!(rad.to_degrees(), deg, epsilon = 1e-12);
        }
    }

    #[test]
    fn infinite_bounds_become_absent() {
        let text = r#"
[allocation]
weight_diag = [1.0, 1.0, 10.0, 1.0]
u_lo = [-inf, -inf, -inf, 0.0]
u_hi = [inf, inf, inf, inf]
"#;
        let (s, _) = scenario_from_toml(text).unwrap();
        assert_eq!(s.allocation.lower, [None, None, None, Some(0.0)]);
        assert_eq!(s.allocation.upper, [None; 4]);
    }

    #[test]
    fn hash_changes_with_config_and_seed() {
        let base = Scenario::default();
        let mut seeded = base.clone();
        seeded.seed_bounds += 1;
        let mut resampled = base.clone();
        resampled.n_bounds = 50;
        assert_eq!(base.config_hash(), Scenario::default().config_hash());
        assert_ne!(base.config_hash(), seeded.config_hash());
        assert_ne!(base.config_hash(), resampled.config_hash());
    }

    #[test]
    fn derived_start_matches_seated_com() {
        let s = Scenario::default();
        let z = s.z_start();
        assert_abs_diff_eq!(z.theta2, (-90.0_f64).to_radians(), epsilon = 1e-15);
        assert_abs_diff_eq!(z.x_com, 0.309, epsilon = 1e-12);
        assert_abs_diff_eq!(z.y_com, 0.6678, epsilon = 1e-12);
    }
}

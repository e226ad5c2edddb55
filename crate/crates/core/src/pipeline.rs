//! End-to-end orchestration: plan → LQR → reach → validate, with on-disk
//! artifacts for resume and reporting.
//!
//! Every stage persists its result (CSV for schedules and boxes, a compact
//! binary for sensitivity bundles) tagged by the scenario hash in
//! `state.json`. Re-running reuses any artifact whose file still exists
//! under the same hash, so deleting a stage's outputs recomputes exactly
//! that stage. Floats are written with 17 significant digits and parse back
//! bit-identically; two runs with the same configuration produce
//! byte-identical CSVs regardless of worker count.

use crate::exec;
use crate::grid::Grid;
use crate::lqr::{self, ClosedLoop, GainSchedule, RiccatiSolution};
use crate::planning::{self, ReferenceTrajectory, ZVector};
use crate::reach::{
    self, augmented_flow, containment_check, falsify_bounds, flow_only, input_bounds, input_value,
    output_bounds, output_value, over_approximate, required_vertices, state_bounds, BoundsSeries,
    ContainmentReport, ReachSeries, Space, TrajectoryBundle,
};
use crate::robot::{Input, ParamCoords, State};
use crate::scenario::Scenario;
use nalgebra::SVector;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;
use thiserror::Error;

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Plan,
    Lqr,
    ReachX,
    ReachY,
    ReachU,
    Validate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Plan,
        Stage::Lqr,
        Stage::ReachX,
        Stage::ReachY,
        Stage::ReachU,
        Stage::Validate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Plan => "plan",
            Stage::Lqr => "lqr",
            Stage::ReachX => "reach-x",
            Stage::ReachY => "reach-y",
            Stage::ReachU => "reach-u",
            Stage::Validate => "validate",
        }
    }

    /// Adds the prerequisites of every requested stage.
    pub fn closure(stages: &BTreeSet<Stage>) -> BTreeSet<Stage> {
        let mut out = stages.clone();
        if out.contains(&Stage::Validate) {
            out.extend([Stage::ReachX, Stage::ReachY, Stage::ReachU]);
        }
        if out
            .iter()
            .any(|s| matches!(s, Stage::ReachX | Stage::ReachY | Stage::ReachU))
        {
            out.insert(Stage::Lqr);
        }
        if out.contains(&Stage::Lqr) {
            out.insert(Stage::Plan);
        }
        out
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plan" => Ok(Stage::Plan),
            "lqr" => Ok(Stage::Lqr),
            "reach-x" => Ok(Stage::ReachX),
            "reach-y" => Ok(Stage::ReachY),
            "reach-u" => Ok(Stage::ReachU),
            "validate" => Ok(Stage::Validate),
            other => Err(format!(
                "unknown stage '{other}' (expected plan, lqr, reach-x, reach-y, reach-u, validate)"
            )),
        }
    }
}

/// A stage failure with its position in the pipeline attached.
#[derive(Debug, Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl StageError {
    fn new(stage: Stage, source: impl std::error::Error + Send + Sync + 'static) -> Self {
        Self {
            stage,
            source: Box::new(source),
        }
    }

    fn msg(stage: Stage, msg: String) -> Self {
        Self {
            stage,
            source: msg.into(),
        }
    }
}

/// Wall-clock accounting of one executed (or reused) stage.
#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
    pub cached: bool,
}

/// Per-space containment summary for the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct ContainmentSummary {
    pub space: Space,
    pub checked: usize,
    pub violations: usize,
    pub fraction: f64,
    pub worst_margin: f64,
}

impl ContainmentSummary {
    fn from_report(r: &ContainmentReport) -> Self {
        Self {
            space: r.space,
            checked: r.checked,
            violations: r.violations.len(),
            fraction: r.fraction(),
            worst_margin: r.violations.iter().map(|v| v.margin).fold(0.0, f64::max),
        }
    }
}

/// In-memory result of a pipeline run.
#[derive(Debug, Default)]
pub struct RunReport {
    pub timings: Vec<StageTiming>,
    pub reach_x: Option<ReachSeries<6>>,
    pub reach_y: Option<ReachSeries<4>>,
    pub reach_u: Option<ReachSeries<4>>,
    pub containment: Vec<ContainmentSummary>,
    pub bundle_substeps: usize,
    pub falsification: BTreeMap<String, FalsifySummary>,
    pub manifest_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FalsifySummary {
    pub evaluations: usize,
    pub expansions: usize,
    pub min_j_f: f64,
    pub times_exhausted: usize,
}

// ---------------------------------------------------------------------------
// artifact file layout

struct Paths {
    state: PathBuf,
    reference: PathBuf,
    riccati: PathBuf,
    gains: PathBuf,
    bundles: PathBuf,
    manifest: PathBuf,
}

impl Paths {
    fn new(dir: &Path) -> Self {
        Paths {
            state: dir.join("state.json"),
            reference: dir.join("reference.csv"),
            riccati: dir.join("riccati.csv"),
            gains: dir.join("gains.csv"),
            bundles: dir.join("bundles.bin"),
            manifest: dir.join("manifest.json"),
        }
    }

    fn bounds(&self, space: Space) -> PathBuf {
        self.manifest
            .with_file_name(format!("bounds_{}.csv", space.tag()))
    }

    fn reach(&self, space: Space) -> PathBuf {
        self.manifest
            .with_file_name(format!("reach_{}.csv", space.tag()))
    }

    fn validation(&self, space: Space) -> PathBuf {
        self.manifest
            .with_file_name(format!("validation_{}.csv", space.tag()))
    }

    fn containment(&self) -> PathBuf {
        self.manifest.with_file_name("containment.csv")
    }

    fn violations(&self) -> PathBuf {
        self.manifest.with_file_name("violations.csv")
    }
}

/// 17 significant digits: parses back to the identical f64.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv(
    path: &Path,
    header: &[String],
    rows: impl Iterator<Item = Vec<f64>>,
) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let line: Vec<String> = row.into_iter().map(fmt_f64).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()
}

fn read_csv(path: &Path) -> std::io::Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .map(|l| l.split(',').map(str::to_string).collect())
        .unwrap_or_default();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
        rows.push(row.map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?);
    }
    Ok((header, rows))
}

const STATE_COLS: [&str; 6] = [
    "th1_rad",
    "th2_rad",
    "th3_rad",
    "om1_radps",
    "om2_radps",
    "om3_radps",
];
const OUTPUT_COLS: [&str; 4] = ["xcom_m", "ycom_m", "vxcom_mps", "vycom_mps"];
const INPUT_COLS: [&str; 4] = ["tauh_nm", "taus_nm", "fx_n", "fy_n"];

fn space_cols(space: Space) -> &'static [&'static str] {
    match space {
        Space::State => &STATE_COLS,
        Space::Output => &OUTPUT_COLS,
        Space::Input => &INPUT_COLS,
    }
}

// ---------------------------------------------------------------------------
// the pipeline

/// Runs the requested stages (plus prerequisites) against `out_dir`,
/// reusing any artifact already on disk for the same configuration.
pub fn run(
    scenario: &Scenario,
    requested: &BTreeSet<Stage>,
    out_dir: &Path,
) -> Result<RunReport, StageError> {
    let stages = Stage::closure(requested);
    scenario
        .validate()
        .map_err(|e| StageError::new(*stages.first().unwrap_or(&Stage::Plan), e))?;
    fs::create_dir_all(out_dir).map_err(|e| StageError::new(Stage::Plan, e))?;
    let paths = Paths::new(out_dir);
    let hash = scenario.config_hash();
    let fresh = match fs::read_to_string(&paths.state) {
        Ok(text) => serde_json::from_str::<serde_json::Value>(&text)
            .ok()
            .and_then(|v| v["config_hash"].as_str().map(|h| h != hash))
            .unwrap_or(true),
        Err(_) => true,
    };
    if fresh {
        // stale or missing state: every artifact below this hash is invalid
        for p in [
            &paths.reference,
            &paths.riccati,
            &paths.gains,
            &paths.bundles,
        ] {
            let _ = fs::remove_file(p);
        }
        for space in [Space::State, Space::Output, Space::Input] {
            let _ = fs::remove_file(paths.bounds(space));
            let _ = fs::remove_file(paths.reach(space));
            let _ = fs::remove_file(paths.validation(space));
        }
        let _ = fs::remove_file(paths.containment());
        let _ = fs::remove_file(paths.violations());
    }
    fs::write(
        &paths.state,
        serde_json::to_string_pretty(&serde_json::json!({ "config_hash": hash }))
            .expect("state serializes"),
    )
    .map_err(|e| StageError::new(Stage::Plan, e))?;

    let grid = scenario
        .grid()
        .map_err(|e| StageError::new(Stage::Plan, e))?;
    let mut report = RunReport::default();

    exec::with_workers(scenario.workers, || {
        run_stages(scenario, &stages, &grid, &paths, &mut report)
    })?;

    export_manifest(scenario, &grid, &paths, &report)
        .map_err(|e| StageError::new(Stage::Validate, e))?;
    report.manifest_path = Some(paths.manifest.clone());
    Ok(report)
}

fn run_stages(
    scenario: &Scenario,
    stages: &BTreeSet<Stage>,
    grid: &Grid,
    paths: &Paths,
    report: &mut RunReport,
) -> Result<(), StageError> {
    // ---- plan
    let reference = if stages.contains(&Stage::Plan) {
        let t = Instant::now();
        let (reference, cached) = stage_plan(scenario, grid, paths)?;
        report.timings.push(StageTiming {
            stage: Stage::Plan.name().into(),
            seconds: t.elapsed().as_secs_f64(),
            cached,
        });
        Some(reference)
    } else {
        None
    };

    // ---- lqr
    let gains = if stages.contains(&Stage::Lqr) {
        let reference = reference
            .as_ref()
            .expect("closure guarantees plan before lqr");
        let t = Instant::now();
        let (gains, cached) = stage_lqr(scenario, reference, paths)?;
        report.timings.push(StageTiming {
            stage: Stage::Lqr.name().into(),
            seconds: t.elapsed().as_secs_f64(),
            cached,
        });
        Some(gains)
    } else {
        None
    };

    let reach_requested: Vec<Space> = [
        (Stage::ReachX, Space::State),
        (Stage::ReachY, Space::Output),
        (Stage::ReachU, Space::Input),
    ]
    .iter()
    .filter(|(st, _)| stages.contains(st))
    .map(|(_, sp)| *sp)
    .collect();

    if reach_requested.is_empty() && !stages.contains(&Stage::Validate) {
        return Ok(());
    }

    let reference = reference.expect("closure guarantees plan");
    let gains = gains.expect("closure guarantees lqr");
    let closed_loop = ClosedLoop::new(&reference, &gains);
    let schedules = lqr::linearize_schedule(&reference, &scenario.p_hat)
        .map_err(|e| StageError::new(Stage::Lqr, e))?;
    let substeps = closed_loop.stability_substeps(&schedules);
    report.bundle_substeps = substeps;

    // ---- sensitivity bundles (shared by all reach spaces)
    let bundles = {
        let t = Instant::now();
        let (bundles, cached) = stage_bundles(scenario, grid, &closed_loop, substeps, paths)?;
        report.timings.push(StageTiming {
            stage: "bundles".into(),
            seconds: t.elapsed().as_secs_f64(),
            cached,
        });
        bundles
    };

    let mut cache: HashMap<u16, Vec<State>> = HashMap::new();
    let start_substeps = report_substeps(&bundles);

    if stages.contains(&Stage::ReachX) {
        let t = Instant::now();
        let bounds = state_bounds(&bundles).map_err(|e| StageError::new(Stage::ReachX, e))?;
        let (series, cached) = finish_reach::<6>(
            scenario,
            grid,
            Space::State,
            &closed_loop,
            &mut cache,
            paths,
            report,
            bounds,
            &|b, k| b.sens[k],
            &|states, _p, k| states[k],
            start_substeps,
        )?;
        report.reach_x = Some(series);
        report.timings.push(StageTiming {
            stage: Stage::ReachX.name().into(),
            seconds: t.elapsed().as_secs_f64(),
            cached,
        });
    }
    if stages.contains(&Stage::ReachY) {
        let t = Instant::now();
        let bounds = output_bounds(&bundles).map_err(|e| StageError::new(Stage::ReachY, e))?;
        let (series, cached) = finish_reach::<4>(
            scenario,
            grid,
            Space::Output,
            &closed_loop,
            &mut cache,
            paths,
            report,
            bounds,
            &reach::output_sensitivity,
            &|states, p, k| output_value(states, p, k),
            start_substeps,
        )?;
        report.reach_y = Some(series);
        report.timings.push(StageTiming {
            stage: Stage::ReachY.name().into(),
            seconds: t.elapsed().as_secs_f64(),
            cached,
        });
    }
    if stages.contains(&Stage::ReachU) {
        let t = Instant::now();
        let bounds =
            input_bounds(&bundles, &closed_loop).map_err(|e| StageError::new(Stage::ReachU, e))?;
        let cl = &closed_loop;
        let (series, cached) = finish_reach::<4>(
            scenario,
            grid,
            Space::Input,
            &closed_loop,
            &mut cache,
            paths,
            report,
            bounds,
            &|b, k| -cl.effective_gain_at(k) * b.sens[k],
            &|states, _p, k| input_value(states, cl, k),
            start_substeps,
        )?;
        report.reach_u = Some(series);
        report.timings.push(StageTiming {
            stage: Stage::ReachU.name().into(),
            seconds: t.elapsed().as_secs_f64(),
            cached,
        });
    }

    // ---- validate
    if stages.contains(&Stage::Validate) {
        let t = Instant::now();
        stage_validate(scenario, grid, &closed_loop, substeps, paths, report)?;
        report.timings.push(StageTiming {
            stage: Stage::Validate.name().into(),
            seconds: t.elapsed().as_secs_f64(),
            cached: false,
        });
    }
    Ok(())
}

fn stage_plan(
    scenario: &Scenario,
    grid: &Grid,
    paths: &Paths,
) -> Result<(ReferenceTrajectory, bool), StageError> {
    if paths.reference.exists() {
        if let Ok(reference) = load_reference(&paths.reference, grid) {
            return Ok((reference, true));
        }
    }
    let reference = planning::build_reference(
        grid,
        &scenario.p_hat,
        &scenario.z_start(),
        &scenario.z_end(),
        &scenario.x0.fixed_rows::<3>(0).into_owned(),
        &scenario.allocation,
    )
    .map_err(|e| StageError::new(Stage::Plan, e))?;
    save_reference(&paths.reference, &reference).map_err(|e| StageError::new(Stage::Plan, e))?;
    Ok((reference, false))
}

fn save_reference(path: &Path, r: &ReferenceTrajectory) -> std::io::Result<()> {
    let mut header: Vec<String> = vec!["t_s".into()];
    header.extend(STATE_COLS.iter().map(|c| c.to_string()));
    header.extend(["aldd1_radps2", "aldd2_radps2", "aldd3_radps2"].map(String::from));
    for tag in ["z", "zd", "zdd"] {
        header.extend([
            format!("{tag}_th2"),
            format!("{tag}_xcom"),
            format!("{tag}_ycom"),
        ]);
    }
    header.extend(INPUT_COLS.iter().map(|c| format!("{c}_ref")));
    let rows = (0..r.grid.len).map(|k| {
        let mut row = vec![r.grid.time(k)];
        row.extend(r.x[k].iter());
        row.extend(r.thetaddot[k].iter());
        for z in [&r.z[k], &r.zdot[k], &r.zddot[k]] {
            row.extend([z.theta2, z.x_com, z.y_com]);
        }
        row.extend(r.u[k].iter());
        row
    });
    write_csv(path, &header, rows)
}

fn load_reference(path: &Path, grid: &Grid) -> std::io::Result<ReferenceTrajectory> {
    let (_, rows) = read_csv(path)?;
    if rows.len() != grid.len || rows.iter().any(|r| r.len() != 23) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "reference artifact shape mismatch",
        ));
    }
    let mut r = ReferenceTrajectory {
        grid: grid.clone(),
        x: Vec::with_capacity(grid.len),
        thetaddot: Vec::with_capacity(grid.len),
        z: Vec::with_capacity(grid.len),
        zdot: Vec::with_capacity(grid.len),
        zddot: Vec::with_capacity(grid.len),
        u: Vec::with_capacity(grid.len),
    };
    for row in rows {
        r.x.push(State::from_column_slice(&row[1..7]));
        r.thetaddot
            .push(nalgebra::Vector3::from_column_slice(&row[7..10]));
        r.z.push(ZVector::new(row[10], row[11], row[12]));
        r.zdot.push(ZVector::new(row[13], row[14], row[15]));
        r.zddot.push(ZVector::new(row[16], row[17], row[18]));
        r.u.push(Input::from_column_slice(&row[19..23]));
    }
    Ok(r)
}

fn stage_lqr(
    scenario: &Scenario,
    reference: &ReferenceTrajectory,
    paths: &Paths,
) -> Result<(GainSchedule, bool), StageError> {
    if paths.gains.exists() {
        if let Ok(gains) = load_gains(&paths.gains, &reference.grid) {
            return Ok((gains, true));
        }
    }
    let schedules = lqr::linearize_schedule(reference, &scenario.p_hat)
        .map_err(|e| StageError::new(Stage::Lqr, e))?;
    let riccati = lqr::solve_riccati(&schedules, &scenario.weights)
        .map_err(|e| StageError::new(Stage::Lqr, e))?;
    let gains = lqr::gain_schedule(&riccati, &schedules, &scenario.weights.r)
        .map_err(|e| StageError::new(Stage::Lqr, e))?;
    save_riccati(&paths.riccati, &riccati).map_err(|e| StageError::new(Stage::Lqr, e))?;
    save_gains(&paths.gains, &gains).map_err(|e| StageError::new(Stage::Lqr, e))?;
    Ok((gains, false))
}

fn save_riccati(path: &Path, r: &RiccatiSolution) -> std::io::Result<()> {
    let mut header = vec!["t_s".to_string()];
    for i in 0..6 {
        for j in 0..6 {
            header.push(format!("p{}{}", i + 1, j + 1));
        }
    }
    let rows = (0..r.grid.len).map(|k| {
        let mut row = vec![r.grid.time(k)];
        row.extend(r.p[k].transpose().iter()); // row-major
        row
    });
    write_csv(path, &header, rows)
}

fn save_gains(path: &Path, g: &GainSchedule) -> std::io::Result<()> {
    let mut header = vec!["t_s".to_string()];
    for i in 0..4 {
        for j in 0..6 {
            header.push(format!("k{}{}", i + 1, j + 1));
        }
    }
    let rows = (0..g.grid.len).map(|k| {
        let mut row = vec![g.grid.time(k)];
        row.extend(g.k[k].transpose().iter());
        row
    });
    write_csv(path, &header, rows)
}

fn load_gains(path: &Path, grid: &Grid) -> std::io::Result<GainSchedule> {
    let (_, rows) = read_csv(path)?;
    if rows.len() != grid.len || rows.iter().any(|r| r.len() != 25) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "gain artifact shape mismatch",
        ));
    }
    let k = rows
        .iter()
        .map(|row| nalgebra::SMatrix::<f64, 4, 6>::from_row_slice(&row[1..25]))
        .collect();
    Ok(GainSchedule {
        grid: grid.clone(),
        k,
    })
}

// ---- bundles ---------------------------------------------------------------

const BUNDLE_MAGIC: &[u8; 8] = b"STSBNDL1";

fn stage_bundles(
    scenario: &Scenario,
    grid: &Grid,
    closed_loop: &ClosedLoop,
    substeps: usize,
    paths: &Paths,
) -> Result<(Vec<TrajectoryBundle>, bool), StageError> {
    if paths.bundles.exists() {
        if let Ok(bundles) = load_bundles(&paths.bundles, grid) {
            if bundles.len() == scenario.n_bounds {
                return Ok((bundles, true));
            }
        }
    }
    let samples =
        reach::latin_hypercube(scenario.n_bounds, &scenario.param_box, scenario.seed_bounds);
    let results = exec::map_indexed(samples.len(), |i| {
        augmented_flow(&samples[i], &scenario.x0, grid, closed_loop, substeps)
    });
    let mut bundles = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        bundles.push(
            r.map_err(|e| StageError::msg(Stage::ReachX, format!("bundle {i} failed: {e}")))?,
        );
    }
    save_bundles(&paths.bundles, &bundles).map_err(|e| StageError::new(Stage::ReachX, e))?;
    Ok((bundles, false))
}

fn save_bundles(path: &Path, bundles: &[TrajectoryBundle]) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(BUNDLE_MAGIC)?;
    let grid = &bundles[0].grid;
    w.write_all(&(bundles.len() as u64).to_le_bytes())?;
    w.write_all(&(grid.len as u64).to_le_bytes())?;
    w.write_all(&grid.t0.to_le_bytes())?;
    w.write_all(&grid.dt.to_le_bytes())?;
    for b in bundles {
        w.write_all(&(b.substeps as u64).to_le_bytes())?;
        for v in b.p.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for x in &b.states {
            for v in x.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for s in &b.sens {
            for v in s.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()
}

fn load_bundles(path: &Path, grid: &Grid) -> std::io::Result<Vec<TrajectoryBundle>> {
    struct Cursor<'a> {
        data: &'a [u8],
        at: usize,
    }
    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> std::io::Result<&'a [u8]> {
            if self.at + n > self.data.len() {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    "truncated bundle file",
                ));
            }
            let s = &self.data[self.at..self.at + n];
            self.at += n;
            Ok(s)
        }
        fn u64(&mut self) -> std::io::Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        fn f64(&mut self) -> std::io::Result<f64> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        fn f64s(&mut self, count: usize) -> std::io::Result<Vec<f64>> {
            let raw = self.take(count * 8)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        }
    }

    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let data = fs::read(path)?;
    let mut c = Cursor { data: &data, at: 0 };
    if c.take(8)? != BUNDLE_MAGIC {
        return Err(bad("bad bundle magic"));
    }
    let n = c.u64()? as usize;
    let len = c.u64()? as usize;
    let t0 = c.f64()?;
    let dt = c.f64()?;
    if len != grid.len || (t0 - grid.t0).abs() > 1e-12 || (dt - grid.dt).abs() > 1e-15 {
        return Err(bad("bundle grid mismatch"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let substeps = c.u64()? as usize;
        let p = ParamCoords::from_column_slice(&c.f64s(12)?);
        let xs = c.f64s(len * 6)?;
        let ss = c.f64s(len * 72)?;
        out.push(TrajectoryBundle {
            p,
            grid: grid.clone(),
            states: xs.chunks_exact(6).map(State::from_column_slice).collect(),
            sens: ss
                .chunks_exact(72)
                .map(nalgebra::SMatrix::<f64, 6, 12>::from_column_slice)
                .collect(),
            substeps,
        });
    }
    Ok(out)
}

// ---- reach -----------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn finish_reach<const R: usize>(
    scenario: &Scenario,
    grid: &Grid,
    space: Space,
    closed_loop: &ClosedLoop,
    cache: &mut HashMap<u16, Vec<State>>,
    paths: &Paths,
    report: &mut RunReport,
    mut bounds: BoundsSeries<R>,
    bundle_sensitivity: &(dyn Fn(&TrajectoryBundle, usize) -> nalgebra::SMatrix<f64, R, 12> + Sync),
    map_states: &(dyn Fn(&[State], &ParamCoords, usize) -> SVector<f64, R> + Sync),
    start_substeps: usize,
) -> Result<(ReachSeries<R>, bool), StageError> {
    let stage = match space {
        Space::State => Stage::ReachX,
        Space::Output => Stage::ReachY,
        Space::Input => Stage::ReachU,
    };
    let reach_path = paths.reach(space);
    if reach_path.exists() {
        if let Ok(series) = load_reach::<R>(&reach_path, grid) {
            return Ok((series, true));
        }
    }

    if scenario.falsify_budget > 0 {
        let summary = falsify_pass(
            scenario,
            grid,
            closed_loop,
            &mut bounds,
            bundle_sensitivity,
            start_substeps,
        );
        report.falsification.insert(space.tag().into(), summary);
    }

    // vertex trajectories, one integration per distinct signature
    let needed = required_vertices(&bounds);
    let missing: Vec<u16> = needed
        .iter()
        .copied()
        .filter(|s| !cache.contains_key(s))
        .collect();
    let integrated = exec::map_indexed(missing.len(), |i| {
        let p = scenario.param_box.vertex(missing[i]);
        flow_only(&p, &scenario.x0, grid, closed_loop, start_substeps)
    });
    for (sig, result) in missing.iter().zip(integrated) {
        let traj = result.map_err(|e| StageError::msg(stage, format!("vertex {sig:#06x}: {e}")))?;
        cache.insert(*sig, traj);
    }

    let pbox = &scenario.param_box;
    let value =
        |sig: u16, k: usize| -> SVector<f64, R> { map_states(&cache[&sig], &pbox.vertex(sig), k) };
    let series = over_approximate(&bounds, pbox, &value);

    // nominal closed-loop trajectory for the report columns
    let nominal = flow_only(
        &scenario.p_hat.to_coords(),
        &scenario.x0,
        grid,
        closed_loop,
        start_substeps,
    )
    .map_err(|e| StageError::new(stage, e))?;
    let p_hat = scenario.p_hat.to_coords();

    save_bounds(&paths.bounds(space), space, &bounds).map_err(|e| StageError::new(stage, e))?;
    save_reach(&reach_path, space, &series, |k| {
        map_states(&nominal, &p_hat, k)
    })
    .map_err(|e| StageError::new(stage, e))?;
    Ok((series, false))
}

fn report_substeps(bundles: &[TrajectoryBundle]) -> usize {
    bundles.iter().map(|b| b.substeps).max().unwrap_or(1)
}

fn falsify_pass<const R: usize>(
    scenario: &Scenario,
    grid: &Grid,
    closed_loop: &ClosedLoop,
    bounds: &mut BoundsSeries<R>,
    bundle_sensitivity: &(dyn Fn(&TrajectoryBundle, usize) -> nalgebra::SMatrix<f64, R, 12> + Sync),
    start_substeps: usize,
) -> FalsifySummary {
    // each grid time is independent; the evaluator integrates the augmented
    // flow over the truncated horizon [t0, t_k]
    let evaluate = |t_idx: usize, p: &ParamCoords| -> Option<nalgebra::SMatrix<f64, R, 12>> {
        let sub = Grid {
            t0: grid.t0,
            dt: grid.dt,
            len: t_idx + 1,
        };
        let bundle = augmented_flow(p, &scenario.x0, &sub, closed_loop, start_substeps).ok()?;
        Some(bundle_sensitivity(&bundle, t_idx))
    };

    type PerT<const R: usize> = (
        nalgebra::SMatrix<f64, R, 12>,
        nalgebra::SMatrix<f64, R, 12>,
        reach::FalsifyReport,
    );
    let per_t: Vec<PerT<R>> = exec::map_indexed(grid.len, |k| {
        let mut local = BoundsSeries::<R> {
            grid: grid.clone(),
            lo: bounds.lo.clone(),
            hi: bounds.hi.clone(),
        };
        let rep = falsify_bounds(
            &mut local,
            k,
            &scenario.param_box,
            &|p| evaluate(k, p),
            scenario.falsify_budget,
            scenario.falsify_multistarts,
            scenario.seed_bounds,
        );
        (local.lo[k], local.hi[k], rep)
    });

    let mut summary = FalsifySummary {
        min_j_f: f64::INFINITY,
        ..Default::default()
    };
    for (k, (lo, hi, rep)) in per_t.into_iter().enumerate() {
        bounds.lo[k] = lo;
        bounds.hi[k] = hi;
        summary.evaluations += rep.evaluations;
        summary.expansions += rep.expansions;
        summary.min_j_f = summary.min_j_f.min(rep.j_f);
        summary.times_exhausted += rep.budget_exhausted as usize;
    }
    summary
}

fn save_bounds<const R: usize>(
    path: &Path,
    space: Space,
    bounds: &BoundsSeries<R>,
) -> std::io::Result<()> {
    let cols = space_cols(space);
    let mut header = vec!["t_s".to_string()];
    for edge in ["lo", "hi"] {
        for c in cols.iter() {
            for j in 1..=12 {
                header.push(format!("s_{c}_p{j}_{edge}"));
            }
        }
    }
    let rows = (0..bounds.grid.len).map(|k| {
        let mut row = vec![bounds.grid.time(k)];
        row.extend(bounds.lo[k].transpose().iter());
        row.extend(bounds.hi[k].transpose().iter());
        row
    });
    write_csv(path, &header, rows)
}

fn save_reach<const R: usize>(
    path: &Path,
    space: Space,
    series: &ReachSeries<R>,
    nominal: impl Fn(usize) -> SVector<f64, R>,
) -> std::io::Result<()> {
    let cols = space_cols(space);
    let mut header = vec!["t_s".to_string()];
    for edge in ["lo", "hi", "nom"] {
        header.extend(cols.iter().map(|c| format!("{c}_{edge}")));
    }
    let rows = (0..series.grid.len).map(|k| {
        let mut row = vec![series.grid.time(k)];
        row.extend(series.lo[k].iter());
        row.extend(series.hi[k].iter());
        row.extend(nominal(k).iter());
        row
    });
    write_csv(path, &header, rows)
}

fn load_reach<const R: usize>(path: &Path, grid: &Grid) -> std::io::Result<ReachSeries<R>> {
    let (_, rows) = read_csv(path)?;
    if rows.len() != grid.len || rows.iter().any(|r| r.len() != 1 + 3 * R) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "reach artifact shape mismatch",
        ));
    }
    let mut series = ReachSeries::<R> {
        grid: grid.clone(),
        lo: Vec::with_capacity(grid.len),
        hi: Vec::with_capacity(grid.len),
    };
    for row in rows {
        series.lo.push(SVector::from_column_slice(&row[1..1 + R]));
        series
            .hi
            .push(SVector::from_column_slice(&row[1 + R..1 + 2 * R]));
    }
    Ok(series)
}

// ---- validate --------------------------------------------------------------

fn stage_validate(
    scenario: &Scenario,
    grid: &Grid,
    closed_loop: &ClosedLoop,
    substeps: usize,
    paths: &Paths,
    report: &mut RunReport,
) -> Result<(), StageError> {
    let stage = Stage::Validate;
    let samples = reach::latin_hypercube(
        scenario.n_validate,
        &scenario.param_box,
        scenario.seed_validate,
    );
    let flows = exec::map_indexed(samples.len(), |i| {
        flow_only(&samples[i], &scenario.x0, grid, closed_loop, substeps)
    });
    let mut trajectories = Vec::with_capacity(flows.len());
    for (i, f) in flows.into_iter().enumerate() {
        trajectories
            .push(f.map_err(|e| StageError::msg(stage, format!("validation sample {i}: {e}")))?);
    }

    let mut reports: Vec<ContainmentReport> = Vec::new();

    // state space
    let reach_x = report
        .reach_x
        .as_ref()
        .ok_or_else(|| StageError::msg(stage, "state reach box missing".into()))?;
    let state_traj: Vec<Vec<SVector<f64, 6>>> = trajectories.clone();
    save_validation(
        &paths.validation(Space::State),
        Space::State,
        grid,
        &state_traj,
    )
    .map_err(|e| StageError::new(stage, e))?;
    reports.push(containment_check(Space::State, reach_x, &state_traj));

    // output space
    let reach_y = report
        .reach_y
        .as_ref()
        .ok_or_else(|| StageError::msg(stage, "output reach box missing".into()))?;
    let out_traj: Vec<Vec<SVector<f64, 4>>> = trajectories
        .iter()
        .zip(&samples)
        .map(|(tr, p)| (0..grid.len).map(|k| output_value(tr, p, k)).collect())
        .collect();
    save_validation(
        &paths.validation(Space::Output),
        Space::Output,
        grid,
        &out_traj,
    )
    .map_err(|e| StageError::new(stage, e))?;
    reports.push(containment_check(Space::Output, reach_y, &out_traj));

    // input space
    let reach_u = report
        .reach_u
        .as_ref()
        .ok_or_else(|| StageError::msg(stage, "input reach box missing".into()))?;
    let in_traj: Vec<Vec<SVector<f64, 4>>> = trajectories
        .iter()
        .map(|tr| {
            (0..grid.len)
                .map(|k| input_value(tr, closed_loop, k))
                .collect()
        })
        .collect();
    save_validation(
        &paths.validation(Space::Input),
        Space::Input,
        grid,
        &in_traj,
    )
    .map_err(|e| StageError::new(stage, e))?;
    reports.push(containment_check(Space::Input, reach_u, &in_traj));

    // summary + violation listing
    let mut w = BufWriter::new(
        fs::File::create(paths.containment()).map_err(|e| StageError::new(stage, e))?,
    );
    writeln!(w, "space,checked,violations,fraction,worst_margin")
        .map_err(|e| StageError::new(stage, e))?;
    for r in &reports {
        let s = ContainmentSummary::from_report(r);
        writeln!(
            w,
            "{},{},{},{},{}",
            r.space.tag(),
            s.checked,
            s.violations,
            fmt_f64(s.fraction),
            fmt_f64(s.worst_margin)
        )
        .map_err(|e| StageError::new(stage, e))?;
    }
    w.flush().map_err(|e| StageError::new(stage, e))?;

    let mut w = BufWriter::new(
        fs::File::create(paths.violations()).map_err(|e| StageError::new(stage, e))?,
    );
    writeln!(w, "space,sample,t_s,coord,value,lo,hi,margin")
        .map_err(|e| StageError::new(stage, e))?;
    for r in &reports {
        for v in &r.violations {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                v.space.tag(),
                v.sample,
                fmt_f64(grid.time(v.t_idx)),
                v.coord,
                fmt_f64(v.value),
                fmt_f64(v.lo),
                fmt_f64(v.hi),
                fmt_f64(v.margin)
            )
            .map_err(|e| StageError::new(stage, e))?;
        }
    }
    w.flush().map_err(|e| StageError::new(stage, e))?;

    report.containment = reports
        .iter()
        .map(ContainmentSummary::from_report)
        .collect();
    Ok(())
}

fn save_validation<const R: usize>(
    path: &Path,
    space: Space,
    grid: &Grid,
    trajectories: &[Vec<SVector<f64, R>>],
) -> std::io::Result<()> {
    let cols = space_cols(space);
    let mut header = vec!["sample".to_string(), "t_s".into()];
    header.extend(cols.iter().map(|c| c.to_string()));
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for (i, traj) in trajectories.iter().enumerate() {
        for (k, v) in traj.iter().enumerate() {
            let mut line = vec![i.to_string(), fmt_f64(grid.time(k))];
            line.extend(v.iter().map(|x| fmt_f64(*x)));
            writeln!(w, "{}", line.join(","))?;
        }
    }
    w.flush()
}

// ---- manifest ---------------------------------------------------------------

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: String,
    scenario: &'a Scenario,
    grid: &'a Grid,
    stages: &'a [StageTiming],
    bundle_substeps: usize,
    falsification: &'a BTreeMap<String, FalsifySummary>,
    containment: &'a [ContainmentSummary],
    artifacts: Vec<String>,
}

fn export_manifest(
    scenario: &Scenario,
    grid: &Grid,
    paths: &Paths,
    report: &RunReport,
) -> std::io::Result<()> {
    let dir = paths.manifest.parent().expect("manifest has a parent dir");
    let mut artifacts: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|name| name != "manifest.json")
        .collect();
    artifacts.sort();
    let manifest = Manifest {
        config_hash: scenario.config_hash(),
        scenario,
        grid,
        stages: &report.timings,
        bundle_substeps: report.bundle_substeps,
        falsification: &report.falsification,
        containment: &report.containment,
        artifacts,
    };
    fs::write(
        &paths.manifest,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
}

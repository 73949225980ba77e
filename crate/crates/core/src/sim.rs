//! Seeded simulator of the gearbox insertion program.
//!
//! One execution runs three phases at a fixed sampling period: a straight
//! approach onto the axle ending in an impact, an Archimedean spiral search
//! for the hole, and the insertion stroke. The contact and spiral models are
//! closed-form so tests can recompute every sample independently.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{ExecutionRecord, ParameterSpec, ParameterVector, ProgramTemplate, Sample, SkillKind, Trajectory};

pub const PROGRAM_ID: &str = "gearbox_insertion";

/// Samples over which the impact force decays to the contact-hold force.
pub const CONTACT_DECAY_SAMPLES: usize = 5;
pub const CONTACT_HOLD_FORCE: f64 = 1.0;
pub const INSERT_FORCE: f64 = 2.0;
/// Angular step of the spiral arc-length quadrature, in radians.
pub const SPIRAL_QUADRATURE_STEP: f64 = 1e-3;

const PHASE_EPS: f64 = 1e-9;

pub const APPROACH_VELOCITY: &str = "approach_velocity";
pub const SEARCH_VELOCITY: &str = "search_velocity";
pub const MAX_SPIRAL_RADIUS: &str = "max_spiral_radius";
pub const INSERT_VELOCITY: &str = "insert_velocity";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct SimConfig {
    /// Free approach travel before contact, mm.
    pub approach_distance: f64,
    /// Insertion depth, mm.
    pub insert_depth: f64,
    /// Impact force per unit approach velocity, N/(mm/s).
    pub stiffness: f64,
    /// Standard deviation of each hole offset coordinate, mm.
    pub hole_offset_sigma: f64,
    /// Impact force above which the part is damaged, N.
    pub break_force: f64,
    /// Radial growth of the search spiral per revolution, mm.
    pub spiral_pitch: f64,
    /// Half-width of the uniform impact force noise, N.
    pub noise_amp: f64,
    /// Sampling period, s.
    pub dt: f64,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            approach_distance: 40.0,
            insert_depth: 8.0,
            stiffness: 0.5,
            hole_offset_sigma: 1.5,
            break_force: 25.0,
            spiral_pitch: 0.5,
            noise_amp: 0.2,
            dt: 0.01,
            rng_seed: 0,
        }
    }
}

impl SimConfig {
    /// The default cell with hole offset and force noise switched off.
    pub fn noiseless() -> Self {
        SimConfig { hole_offset_sigma: 0.0, noise_amp: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("approach_distance", self.approach_distance),
            ("insert_depth", self.insert_depth),
            ("stiffness", self.stiffness),
            ("break_force", self.break_force),
            ("spiral_pitch", self.spiral_pitch),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(CoreError::validation_at(
                    "sim.config_invalid",
                    format!("{name} must be positive, got {v}"),
                    name,
                ));
            }
        }
        for (name, v) in [("hole_offset_sigma", self.hole_offset_sigma), ("noise_amp", self.noise_amp)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::validation_at(
                    "sim.config_invalid",
                    format!("{name} must be non-negative, got {v}"),
                    name,
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SimParameters {
    pub approach_velocity: f64,
    pub search_velocity: f64,
    pub max_spiral_radius: f64,
    pub insert_velocity: f64,
}

impl SimParameters {
    pub fn to_vector(&self) -> ParameterVector {
        ParameterVector::new()
            .with(APPROACH_VELOCITY, self.approach_velocity)
            .with(SEARCH_VELOCITY, self.search_velocity)
            .with(MAX_SPIRAL_RADIUS, self.max_spiral_radius)
            .with(INSERT_VELOCITY, self.insert_velocity)
    }

    pub fn from_vector(x: &ParameterVector) -> Result<Self> {
        gearbox_template().check(x)?;
        Ok(SimParameters {
            approach_velocity: x.0[APPROACH_VELOCITY],
            search_velocity: x.0[SEARCH_VELOCITY],
            max_spiral_radius: x.0[MAX_SPIRAL_RADIUS],
            insert_velocity: x.0[INSERT_VELOCITY],
        })
    }

    pub fn validate(&self) -> Result<()> {
        gearbox_template().check(&self.to_vector())
    }
}

/// The gearbox insertion program: approach, spiral search, insert.
pub fn gearbox_template() -> ProgramTemplate {
    let spec = |name: &str, unit: &str, lo: f64, hi: f64, skill| ParameterSpec {
        name: name.into(),
        unit: unit.into(),
        lower_bound: lo,
        upper_bound: hi,
        expert_only: false,
        skill,
    };
    ProgramTemplate {
        id: PROGRAM_ID.into(),
        skill_sequence: vec![SkillKind::Approach, SkillKind::SpiralSearch, SkillKind::Insert],
        parameter_specs: vec![
            spec(APPROACH_VELOCITY, "mm/s", 5.0, 100.0, SkillKind::Approach),
            spec(SEARCH_VELOCITY, "mm/s", 2.0, 50.0, SkillKind::SpiralSearch),
            spec(MAX_SPIRAL_RADIUS, "mm", 0.5, 8.0, SkillKind::SpiralSearch),
            spec(INSERT_VELOCITY, "mm/s", 1.0, 30.0, SkillKind::Insert),
        ],
    }
}

/// Cumulative arc length of the spiral `r = pitch * phi / 2pi`, tabulated by
/// trapezoidal quadrature on a uniform angular grid.
#[derive(Clone, Debug)]
pub struct SpiralTable {
    radial_rate: f64,
    step: f64,
    cumulative: Vec<f64>,
}

impl SpiralTable {
    /// Tabulates the spiral from the centre out to `radius`.
    pub fn new(pitch: f64, radius: f64) -> Self {
        let radial_rate = pitch / std::f64::consts::TAU;
        let phi_max = radius / radial_rate;
        let steps = (phi_max / SPIRAL_QUADRATURE_STEP).ceil().max(1.0) as usize;
        let step = phi_max / steps as f64;
        let speed = |phi: f64| radial_rate * (1.0 + phi * phi).sqrt();
        let mut cumulative = Vec::with_capacity(steps + 1);
        cumulative.push(0.0);
        let mut acc = 0.0;
        for k in 0..steps {
            let a = k as f64 * step;
            acc += 0.5 * step * (speed(a) + speed(a + step));
            cumulative.push(acc);
        }
        SpiralTable { radial_rate, step, cumulative }
    }

    pub fn total_length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn max_angle(&self) -> f64 {
        self.step * (self.cumulative.len() - 1) as f64
    }

    /// Angle reached after travelling `s` mm along the spiral.
    pub fn angle_at(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        if s >= self.total_length() {
            return self.max_angle();
        }
        let k = self.cumulative.partition_point(|&c| c <= s) - 1;
        let (c0, c1) = (self.cumulative[k], self.cumulative[k + 1]);
        let frac = if c1 > c0 { (s - c0) / (c1 - c0) } else { 0.0 };
        (k as f64 + frac) * self.step
    }

    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let phi = self.angle_at(s);
        let r = self.radial_rate * phi;
        [r * phi.cos(), r * phi.sin()]
    }
}

/// Arc length of the search spiral from the centre to `radius`.
pub fn spiral_arc_length(pitch: f64, radius: f64) -> f64 {
    if radius <= 0.0 {
        return 0.0;
    }
    SpiralTable::new(pitch, radius).total_length()
}

/// Latent quantities of one execution, exposed for verification.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SimOutcome {
    pub peak_force: f64,
    pub hole_offset: f64,
    pub search_time: f64,
    pub hole_found: bool,
    pub success: bool,
}

pub fn execute(params: &SimParameters, config: &SimConfig, seed: u64) -> Result<ExecutionRecord> {
    execute_detailed(params, config, seed).map(|(r, _)| r)
}

fn base_timestamp() -> DateTime<Utc> {
    DateTime::from_timestamp(1_709_280_000, 0).expect("valid epoch")
}

pub fn execute_detailed(
    params: &SimParameters,
    config: &SimConfig,
    seed: u64,
) -> Result<(ExecutionRecord, SimOutcome)> {
    params.validate()?;
    config.validate()?;
    Ok(run(params, config, seed, base_timestamp()))
}

fn run(params: &SimParameters, config: &SimConfig, seed: u64, ts: DateTime<Utc>) -> (ExecutionRecord, SimOutcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = if config.noise_amp > 0.0 {
        rng.random_range(-config.noise_amp..=config.noise_amp)
    } else {
        0.0
    };
    let ox: f64 = rng.sample::<f64, _>(StandardNormal) * config.hole_offset_sigma;
    let oy: f64 = rng.sample::<f64, _>(StandardNormal) * config.hole_offset_sigma;
    let hole_offset = ox.hypot(oy);

    let dt = config.dt;
    let mut samples = Vec::new();
    let mut skills = Vec::new();
    let mut push = |p: [f64; 3], f: f64, skill: SkillKind| {
        samples.push(Sample { p, f });
        skills.push(skill);
    };

    // Approach: straight descent onto the axle top at z = 0.
    let d_a = config.approach_distance;
    let v_a = params.approach_velocity;
    let approach_steps = (d_a / (v_a * dt) - PHASE_EPS).ceil().max(1.0) as usize;
    for k in 0..approach_steps {
        let z = d_a - v_a * k as f64 * dt;
        push([0.0, 0.0, z.max(0.0)], 0.0, SkillKind::Approach);
    }
    let peak_force = config.stiffness * v_a + noise;
    push([0.0, 0.0, 0.0], peak_force, SkillKind::Approach);
    for k in 1..=CONTACT_DECAY_SAMPLES {
        let f = peak_force + (CONTACT_HOLD_FORCE - peak_force) * k as f64 / CONTACT_DECAY_SAMPLES as f64;
        push([0.0, 0.0, 0.0], f, SkillKind::Approach);
    }

    // Spiral search until the spiral radius covers the hole offset.
    let hole_found = hole_offset <= params.max_spiral_radius;
    let target_radius = hole_offset.min(params.max_spiral_radius);
    let mut end_xy = [0.0, 0.0];
    let mut search_time = 0.0;
    if target_radius > 0.0 {
        let table = SpiralTable::new(config.spiral_pitch, target_radius);
        let length = table.total_length();
        let v_s = params.search_velocity;
        search_time = length / v_s;
        let steps = (search_time / dt - PHASE_EPS).ceil() as usize;
        for k in 1..=steps {
            let s = (v_s * k as f64 * dt).min(length);
            let xy = table.point_at(s);
            push([xy[0], xy[1], 0.0], CONTACT_HOLD_FORCE, SkillKind::SpiralSearch);
            end_xy = xy;
        }
    }

    // Insertion only once the hole is located.
    if hole_found {
        let d = config.insert_depth;
        let v_i = params.insert_velocity;
        let steps = (d / (v_i * dt) - PHASE_EPS).ceil() as usize;
        for k in 1..=steps {
            let z = -(v_i * k as f64 * dt).min(d);
            push([end_xy[0], end_xy[1], z], INSERT_FORCE, SkillKind::Insert);
        }
    }

    let success = hole_found && peak_force <= config.break_force;
    let mut tags = BTreeMap::new();
    tags.insert("serial".to_string(), format!("GX-{:016x}", seed));
    tags.insert("variant".to_string(), "standard".to_string());
    let trajectory = Trajectory {
        dt,
        samples,
        success,
        skill_annotations: skills,
        tags,
        timestamp: ts,
    };
    let record = ExecutionRecord {
        program_id: PROGRAM_ID.into(),
        parameters: params.to_vector(),
        trajectory,
    };
    let outcome = SimOutcome { peak_force, hole_offset, search_time, hole_found, success };
    (record, outcome)
}

/// How a batch chooses parameter vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampling {
    Fixed { parameters: SimParameters },
    UniformRandom,
    /// Evenly spaced levels per parameter over its range; parameters without
    /// an entry are held at the centre of their range.
    Grid { levels: BTreeMap<String, usize> },
}

/// Per-parameter sampling sub-ranges; missing names use the full bounds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(transparent)]
pub struct ParamRanges(pub IndexMap<String, [f64; 2]>);

impl ParamRanges {
    pub fn full() -> Self {
        Self::default()
    }

    fn resolve(&self, template: &ProgramTemplate) -> Result<Vec<(f64, f64)>> {
        if let Some(unknown) = self.0.keys().find(|k| template.spec(k).is_none()) {
            return Err(CoreError::validation_at(
                "sim.range_invalid",
                format!("unknown parameter `{unknown}` in sampling range"),
                unknown.clone(),
            ));
        }
        template
            .parameter_specs
            .iter()
            .map(|s| {
                let [lo, hi] = self.0.get(&s.name).copied().unwrap_or([s.lower_bound, s.upper_bound]);
                if !(lo <= hi && s.contains(lo) && s.contains(hi)) {
                    Err(CoreError::validation_at(
                        "sim.range_invalid",
                        format!(
                            "range [{lo}, {hi}] for `{}` is empty or outside [{}, {}]",
                            s.name, s.lower_bound, s.upper_bound
                        ),
                        s.name.clone(),
                    ))
                } else {
                    Ok((lo, hi))
                }
            })
            .collect()
    }
}

/// Mixes a batch seed with a record index into an independent stream seed.
pub fn derive_seed(batch_seed: u64, index: u64, domain: u64) -> u64 {
    let mut z = batch_seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(domain.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const PARAM_STREAM: u64 = 1;
const EXEC_STREAM: u64 = 2;

/// Runs `n` executions. Record `i` depends only on `(seed, i)`; a single
/// fixed-parameter record equals `execute(params, config, seed)`.
pub fn batch_execute(
    n: usize,
    sampling: &Sampling,
    ranges: &ParamRanges,
    config: &SimConfig,
    seed: u64,
) -> Result<Vec<ExecutionRecord>> {
    if n == 0 {
        return Err(CoreError::validation_at("sim.batch_invalid", "n must be at least 1", "n"));
    }
    config.validate()?;
    let template = gearbox_template();
    let bounds = ranges.resolve(&template)?;
    let grid = match sampling {
        Sampling::Grid { levels } => Some(grid_axes(&template, &bounds, levels)?),
        Sampling::Fixed { parameters } => {
            parameters.validate()?;
            None
        }
        Sampling::UniformRandom => None,
    };

    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let values: Vec<f64> = match sampling {
                Sampling::Fixed { parameters } => parameters.to_vector().values(),
                Sampling::UniformRandom => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, PARAM_STREAM));
                    bounds
                        .iter()
                        .map(|&(lo, hi)| if lo < hi { rng.random_range(lo..=hi) } else { lo })
                        .collect()
                }
                Sampling::Grid { .. } => grid_point(grid.as_ref().unwrap(), i),
            };
            let params = SimParameters::from_vector(&template.vector(&values))
                .expect("sampled parameters lie within bounds");
            let exec_seed = if n == 1 && matches!(sampling, Sampling::Fixed { .. }) {
                seed
            } else {
                derive_seed(seed, i as u64, EXEC_STREAM)
            };
            let ts = base_timestamp() + Duration::seconds(30 * i as i64);
            run(&params, config, exec_seed, ts).0
        })
        .collect();
    Ok(records)
}

fn grid_axes(
    template: &ProgramTemplate,
    bounds: &[(f64, f64)],
    levels: &BTreeMap<String, usize>,
) -> Result<Vec<Vec<f64>>> {
    if let Some(unknown) = levels.keys().find(|k| template.spec(k).is_none()) {
        return Err(CoreError::validation_at(
            "sim.range_invalid",
            format!("unknown grid parameter `{unknown}`"),
            unknown.clone(),
        ));
    }
    template
        .parameter_specs
        .iter()
        .zip(bounds)
        .map(|(s, &(lo, hi))| match levels.get(&s.name).copied() {
            Some(0) => Err(CoreError::validation_at(
                "sim.range_invalid",
                format!("grid for `{}` needs at least one level", s.name),
                s.name.clone(),
            )),
            Some(1) | None => Ok(vec![0.5 * (lo + hi)]),
            Some(l) => Ok((0..l).map(|j| lo + (hi - lo) * j as f64 / (l - 1) as f64).collect()),
        })
        .collect()
}

fn grid_point(axes: &[Vec<f64>], index: usize) -> Vec<f64> {
    let total: usize = axes.iter().map(|a| a.len()).product();
    let mut rem = index % total;
    let mut out = vec![0.0; axes.len()];
    for (k, axis) in axes.iter().enumerate().rev() {
        out[k] = axis[rem % axis.len()];
        rem /= axis.len();
    }
    out
}

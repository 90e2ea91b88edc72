//! Run configuration.
//!
//! Precedence, lowest first: built-in defaults, per-subcommand defaults, the
//! `--config` JSON file, command-line flags. Layers are merged as JSON objects
//! (nested objects key by key) and the result is validated once.

use std::path::{Path, PathBuf};

use collapse_core::sde::SimConfig;
use collapse_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Euler–Maruyama ensemble of the reduction equation.
    Sde,
    /// Closed-form solution driven by the scalar `W*` equation.
    GirsanovScalar,
    /// `Q`-measure sampling of `W*_t` reweighted by `Lambda*_t`.
    GirsanovWeighted,
    /// Eigenframe closed form of the dephasing master equation.
    LindbladClosed,
    /// RK4 integration of the master equation.
    LindbladOde,
    /// Full statistical suite.
    VerifyAll,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Sde => "sde",
            Mode::GirsanovScalar => "girsanov-scalar",
            Mode::GirsanovWeighted => "girsanov-weighted",
            Mode::LindbladClosed => "lindblad-closed",
            Mode::LindbladOde => "lindblad-ode",
            Mode::VerifyAll => "verify-all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.into()))
            .map_err(|_| Error::Configuration(format!("mode: unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Exact,
    Lindblad,
    VerifyAll,
    Compare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Exact => "exact",
            Command::Lindblad => "lindblad",
            Command::VerifyAll => "verify-all",
            Command::Compare => "compare",
        }
    }

    fn allowed(self) -> &'static [Mode] {
        match self {
            Command::Simulate => &[Mode::Sde],
            Command::Exact => &[Mode::GirsanovScalar, Mode::GirsanovWeighted],
            Command::Lindblad => &[Mode::LindbladClosed, Mode::LindbladOde],
            Command::VerifyAll => &[Mode::VerifyAll],
            Command::Compare => &[
                Mode::Sde,
                Mode::GirsanovScalar,
                Mode::GirsanovWeighted,
                Mode::LindbladClosed,
                Mode::LindbladOde,
            ],
        }
    }

    /// Defaults layered over the built-in ones.
    fn defaults(self) -> Value {
        match self {
            Command::Simulate => json!({ "mode": "sde" }),
            Command::Exact => json!({ "mode": "girsanov-scalar" }),
            Command::Lindblad => json!({ "mode": "lindblad-closed" }),
            // every trajectory must reach the collapse criterion; see README
            Command::VerifyAll => json!({
                "mode": "verify-all",
                "n_trajectories": 10000,
                "record_points": 400,
                "csv_trajectories": 100,
                "sim": { "horizon_tau": 150.0 },
            }),
            Command::Compare => json!({ "mode": "sde", "compare_with": "girsanov-scalar" }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in fixture name or path to a fixture JSON file.
    pub fixture: String,
    pub mode: Mode,
    /// Second mode for `compare`.
    pub compare_with: Option<Mode>,
    pub sim: SimConfig,
    pub n_trajectories: usize,
    /// Target number of recorded grid points; overrides `sim.record_stride`.
    /// `null` keeps the stride as given.
    pub record_points: Option<usize>,
    /// Trajectories written to `trajectories.csv` (`null` = all).
    pub csv_trajectories: Option<usize>,
    pub out: Option<PathBuf>,
    /// Subset of verify-all check groups; empty runs every applicable group.
    pub checks: Vec<String>,
    /// Levels for the Doob exceedance checks.
    pub lambdas: Vec<f64>,
    /// Worker threads; 0 uses every available core. Never affects output.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            fixture: "qubit".into(),
            mode: Mode::Sde,
            compare_with: None,
            sim: SimConfig::default(),
            n_trajectories: 1000,
            record_points: Some(200),
            csv_trajectories: None,
            out: None,
            checks: Vec::new(),
            lambdas: vec![1.5, 2.0, 3.0],
            workers: 0,
        }
    }
}

pub const CHECK_GROUPS: &[&str] = &[
    "born",
    "martingale",
    "variance",
    "doob",
    "conditional-variance",
    "luders",
    "mixed-luders",
    "lindblad",
    "girsanov",
    "quadratic-variation",
];

/// Command-line overrides; `None` leaves lower layers untouched.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub fixture: Option<String>,
    pub seed: Option<u64>,
    pub n_traj: Option<usize>,
    pub dt: Option<f64>,
    pub sigma: Option<f64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub modes: Vec<String>,
}

impl Overrides {
    fn to_json(&self) -> Result<Value> {
        let mut top = Map::new();
        let mut sim = Map::new();
        if let Some(f) = &self.fixture {
            top.insert("fixture".into(), json!(f));
        }
        if let Some(s) = self.seed {
            sim.insert("seed".into(), json!(s));
        }
        if let Some(d) = self.dt {
            sim.insert("dt".into(), json!(d));
        }
        if let Some(s) = self.sigma {
            sim.insert("sigma".into(), json!(s));
        }
        if let Some(n) = self.n_traj {
            top.insert("n_trajectories".into(), json!(n));
        }
        if let Some(o) = &self.out {
            top.insert("out".into(), json!(o));
        }
        if let Some(w) = self.workers {
            top.insert("workers".into(), json!(w));
        }
        match self.modes.as_slice() {
            [] => {}
            [a] => {
                top.insert("mode".into(), json!(Mode::parse(a)?));
            }
            [a, b] => {
                top.insert("mode".into(), json!(Mode::parse(a)?));
                top.insert("compare_with".into(), json!(Mode::parse(b)?));
            }
            _ => return Err(Error::Configuration("--mode: given more than twice".into())),
        }
        if !sim.is_empty() {
            top.insert("sim".into(), Value::Object(sim));
        }
        Ok(Value::Object(top))
    }
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Configuration(format!("{}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(Error::Configuration(format!(
            "{}: expected a JSON object",
            path.display()
        )));
    }
    Ok(value)
}

impl RunConfig {
    /// Resolves the effective configuration for `command`.
    pub fn resolve(command: Command, file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        merge(&mut value, command.defaults());
        if let Some(path) = file {
            merge(&mut value, read_config_file(path)?);
        }
        merge(&mut value, overrides.to_json()?);
        let config: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Configuration(format!("config: {e}")))?;
        config.validate(command)?;
        Ok(config)
    }

    pub fn validate(&self, command: Command) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Configuration(format!("{field}: {msg}")));
        if !command.allowed().contains(&self.mode) {
            return bad(
                "mode",
                format!(
                    "`{}` is not valid for `{}`",
                    self.mode.as_str(),
                    command.name()
                ),
            );
        }
        if command == Command::Compare {
            match self.compare_with {
                None => {
                    return bad(
                        "compare_with",
                        "compare needs two modes (--mode A --mode B)".into(),
                    )
                }
                Some(m) if !command.allowed().contains(&m) => {
                    return bad(
                        "compare_with",
                        format!("`{}` cannot be compared", m.as_str()),
                    )
                }
                Some(m) if m == self.mode => {
                    return bad("compare_with", "the two modes are identical".into())
                }
                _ => {}
            }
        }
        if self.n_trajectories == 0 {
            return bad("n_trajectories", "must be >= 1".into());
        }
        if self.record_points == Some(0) {
            return bad("record_points", "must be >= 1".into());
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return bad("lambdas", format!("{l} is not a positive finite number"));
        }
        if let Some(c) = self
            .checks
            .iter()
            .find(|c| !CHECK_GROUPS.contains(&c.as_str()))
        {
            return bad(
                "checks",
                format!("unknown group `{c}` (known: {})", CHECK_GROUPS.join(", ")),
            );
        }
        self.sim.validate()
    }

    pub fn wants(&self, group: &str) -> bool {
        self.checks.is_empty() || self.checks.iter().any(|c| c == group)
    }

    /// The configuration as hashed into the manifest: everything except
    /// the worker count and the output location.
    pub fn identity(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("workers");
            m.remove("out");
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"n_trajectories": 50, "sim": {"sigma": 2.0, "seed": 7}}"#,
        )
        .unwrap();
        let flags = Overrides {
            seed: Some(9),
            ..Overrides::default()
        };
        let c = RunConfig::resolve(Command::VerifyAll, Some(&path), &flags).unwrap();
        assert_eq!(c.n_trajectories, 50);
        assert_eq!(c.sim.sigma, 2.0);
        assert_eq!(c.sim.seed, 9);
        assert_eq!(c.sim.horizon_tau, 150.0);
        assert_eq!(c.record_points, Some(400));
    }

    #[test]
    fn unknown_fields_and_modes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"n_trajectorys": 50}"#).unwrap();
        let err =
            RunConfig::resolve(Command::Simulate, Some(&path), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("n_trajectorys"));
        let flags = Overrides {
            modes: vec!["lindblad-ode".into()],
            ..Overrides::default()
        };
        let err = RunConfig::resolve(Command::Simulate, None, &flags).unwrap_err();
        assert!(err.to_string().contains("mode"));
    }

    #[test]
    fn identity_excludes_workers_and_out() {
        let mut a = RunConfig::default();
        let mut b = RunConfig::default();
        a.workers = 1;
        b.workers = 8;
        b.out = Some("x".into());
        assert_eq!(a.identity(), b.identity());
    }
}

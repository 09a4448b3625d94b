//! Flat `key = value` configuration with dotted keys.
//!
//! `#` starts a comment. A `preset = italian | benchmark` line (anywhere in
//! the file) selects the base values; every other key overrides one field.
//! Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::McrcConfig;
use crate::synth::{CrownModel, ForestSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct RpcaSettings {
    /// `None` means `1 / sqrt(max(rows, cols))`.
    pub lambda: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    /// 1-based principal components kept as features.
    pub first_component: usize,
    pub last_component: usize,
}

impl Default for RpcaSettings {
    fn default() -> Self {
        Self {
            lambda: None,
            tol: 1e-7,
            max_iter: 1000,
            first_component: 2,
            last_component: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub preset: String,
    pub pipeline: McrcConfig,
    pub rpca: RpcaSettings,
    pub synth: ForestSpec,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            preset: "italian".into(),
            pipeline: McrcConfig::italian(),
            rpca: RpcaSettings::default(),
            synth: ForestSpec::default(),
        }
    }
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(v: &str, line: usize, key: &str) -> Result<T> {
    v.parse().map_err(|_| bad(line, format!("`{key}`: cannot parse `{v}`")))
}

fn flag(v: &str, line: usize, key: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(line, format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn optional(v: &str, line: usize, key: &str) -> Result<Option<f64>> {
    if v == "none" {
        Ok(None)
    } else {
        num(v, line, key).map(Some)
    }
}

fn pair(v: &str, line: usize, key: &str) -> Result<(f64, f64)> {
    let Some((a, b)) = v.split_once(',') else {
        return Err(bad(line, format!("`{key}`: expected `a, b`")));
    };
    Ok((num(a.trim(), line, key)?, num(b.trim(), line, key)?))
}

fn entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(bad(no + 1, format!("expected `key = value`, got `{line}`")));
        };
        out.push((no + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Config {
    pub fn preset(name: &str) -> Result<Self> {
        let pipeline = match name {
            "italian" => McrcConfig::italian(),
            "benchmark" => McrcConfig::benchmark(),
            _ => return Err(Error::Config(format!("unknown preset `{name}`"))),
        };
        Ok(Self {
            preset: name.into(),
            pipeline,
            ..Self::default()
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = entries(text)?;
        let mut cfg = match entries.iter().filter(|e| e.1 == "preset").last() {
            Some((_, _, v)) => Self::preset(v)?,
            None => Self::default(),
        };
        for (line, key, value) in &entries {
            if key != "preset" {
                cfg.set(key, value, *line)?;
            }
        }
        cfg.pipeline.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        let p = &mut self.pipeline;
        let s = &mut self.synth;
        let r = &mut self.rpca;
        match key {
            "terrain.cell_size" => p.terrain.cell_size = num(v, line, key)?,
            "terrain.max_window" => p.terrain.max_window = num(v, line, key)?,
            "terrain.slope_tolerance" => p.terrain.slope_tolerance = num(v, line, key)?,
            "terrain.elevation_threshold" => p.terrain.elevation_threshold = num(v, line, key)?,
            "reuse_labels" => p.reuse_labels = flag(v, line, key)?,
            "chm_smoothing_sigma" => p.chm_smoothing_sigma = num(v, line, key)?,
            "mwf_window" => p.mwf_window = num(v, line, key)?,
            "min_tree_height" => p.min_tree_height = num(v, line, key)?,
            "prior_radius" => p.prior_radius = num(v, line, key)?,
            "graph_mc.d" => p.graph_mc.d = num(v, line, key)?,
            "graph_mc.sigma_xy" => p.graph_mc.sigma_xy = num(v, line, key)?,
            "graph_mc.sigma_z" => p.graph_mc.sigma_z = num(v, line, key)?,
            "graph_mc.sigma_fts" => p.graph_mc.sigma_fts = optional(v, line, key)?,
            "graph_rc.d" => p.graph_rc.d = num(v, line, key)?,
            "graph_rc.sigma_xy" => p.graph_rc.sigma_xy = num(v, line, key)?,
            "graph_rc.sigma_z" => p.graph_rc.sigma_z = num(v, line, key)?,
            "graph_rc.sigma_fts" => p.graph_rc.sigma_fts = optional(v, line, key)?,
            "tau_ncut" => p.tau_ncut = num(v, line, key)?,
            "min_points" => p.min_points = num(v, line, key)?,
            "kappa" => p.kappa = num(v, line, key)?,
            "use_features" => p.use_features = flag(v, line, key)?,
            "eigen_tol" => p.eigen_tol = num(v, line, key)?,
            "seed" => p.seed = num(v, line, key)?,
            "rpca.lambda" => r.lambda = optional(v, line, key)?,
            "rpca.tol" => r.tol = num(v, line, key)?,
            "rpca.max_iter" => r.max_iter = num(v, line, key)?,
            "rpca.first_component" => r.first_component = num(v, line, key)?,
            "rpca.last_component" => r.last_component = num(v, line, key)?,
            "synth.extent" => s.extent = pair(v, line, key)?,
            "synth.n_canopy" => s.n_canopy = num(v, line, key)?,
            "synth.n_understory" => s.n_understory = num(v, line, key)?,
            "synth.crown_model" => s.crown_model = v.parse::<CrownModel>().map_err(|e| bad(line, e.to_string()))?,
            "synth.height_range" => s.height_range = pair(v, line, key)?,
            "synth.radius_range" => s.radius_range = pair(v, line, key)?,
            "synth.understory_radius_range" => s.understory_radius_range = pair(v, line, key)?,
            "synth.point_density" => s.point_density = num(v, line, key)?,
            "synth.ground_slope" => s.ground_slope = num(v, line, key)?,
            "synth.noise_sigma" => s.noise_sigma = num(v, line, key)?,
            "synth.overlap" => s.overlap = num(v, line, key)?,
            "synth.penetration" => s.penetration = num(v, line, key)?,
            "synth.feature_dim" => s.feature_dim = num(v, line, key)?,
            "synth.feature_noise" => s.feature_noise = num(v, line, key)?,
            "synth.seed" => s.seed = num(v, line, key)?,
            _ => return Err(bad(line, format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order; parses back to `self`.
    pub fn to_text(&self) -> String {
        let p = &self.pipeline;
        let s = &self.synth;
        let r = &self.rpca;
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let model = match s.crown_model {
            CrownModel::Cone => "cone",
            CrownModel::Hemisphere => "hemisphere",
        };
        let rows: Vec<(&str, String)> = vec![
            ("preset", self.preset.clone()),
            ("terrain.cell_size", p.terrain.cell_size.to_string()),
            ("terrain.max_window", p.terrain.max_window.to_string()),
            ("terrain.slope_tolerance", p.terrain.slope_tolerance.to_string()),
            ("terrain.elevation_threshold", p.terrain.elevation_threshold.to_string()),
            ("reuse_labels", p.reuse_labels.to_string()),
            ("chm_smoothing_sigma", p.chm_smoothing_sigma.to_string()),
            ("mwf_window", p.mwf_window.to_string()),
            ("min_tree_height", p.min_tree_height.to_string()),
            ("prior_radius", p.prior_radius.to_string()),
            ("graph_mc.d", p.graph_mc.d.to_string()),
            ("graph_mc.sigma_xy", p.graph_mc.sigma_xy.to_string()),
            ("graph_mc.sigma_z", p.graph_mc.sigma_z.to_string()),
            ("graph_mc.sigma_fts", opt(p.graph_mc.sigma_fts)),
            ("graph_rc.d", p.graph_rc.d.to_string()),
            ("graph_rc.sigma_xy", p.graph_rc.sigma_xy.to_string()),
            ("graph_rc.sigma_z", p.graph_rc.sigma_z.to_string()),
            ("graph_rc.sigma_fts", opt(p.graph_rc.sigma_fts)),
            ("tau_ncut", p.tau_ncut.to_string()),
            ("min_points", p.min_points.to_string()),
            ("kappa", p.kappa.to_string()),
            ("use_features", p.use_features.to_string()),
            ("eigen_tol", p.eigen_tol.to_string()),
            ("seed", p.seed.to_string()),
            ("rpca.lambda", opt(r.lambda)),
            ("rpca.tol", r.tol.to_string()),
            ("rpca.max_iter", r.max_iter.to_string()),
            ("rpca.first_component", r.first_component.to_string()),
            ("rpca.last_component", r.last_component.to_string()),
            ("synth.extent", format!("{}, {}", s.extent.0, s.extent.1)),
            ("synth.n_canopy", s.n_canopy.to_string()),
            ("synth.n_understory", s.n_understory.to_string()),
            ("synth.crown_model", model.to_string()),
            ("synth.height_range", format!("{}, {}", s.height_range.0, s.height_range.1)),
            ("synth.radius_range", format!("{}, {}", s.radius_range.0, s.radius_range.1)),
            (
                "synth.understory_radius_range",
                format!("{}, {}", s.understory_radius_range.0, s.understory_radius_range.1),
            ),
            ("synth.point_density", s.point_density.to_string()),
            ("synth.ground_slope", s.ground_slope.to_string()),
            ("synth.noise_sigma", s.noise_sigma.to_string()),
            ("synth.overlap", s.overlap.to_string()),
            ("synth.penetration", s.penetration.to_string()),
            ("synth.feature_dim", s.feature_dim.to_string()),
            ("synth.feature_noise", s.feature_noise.to_string()),
            ("synth.seed", s.seed.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

//! Experiment configuration, read from a sectioned TOML file.
//!
//! Unknown keys are rejected. Every section except `[geometry]` may be
//! omitted and falls back to the defaults below.
//!
//! ```toml
//! [geometry]
//! source_object_dist = 200.0
//! source_detector_dist = 400.0
//! det_rows = 64
//! det_cols = 64
//! det_pitch = 3.0
//! vol_shape = [64, 64, 64]
//! voxel_pitch = 1.0
//!
//! [selection]
//! candidates = 180
//! n_init = 5
//! budget = 35
//! checkpoints = [15, 25, 35]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{candidate_angles, make_geometry, AngleGrid, ConeBeamGeometry, GeometryParams};
use crate::recon::SirtParams;
use crate::scoring::SoftmaxParams;
use crate::selection::uniform_indices;
use crate::sim::{default_solids, EnergyBin, PhantomSpec, PoreSpec, Solid, SpectrumModel};
use crate::volume::Shape3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub seed: u64,
    pub pores: usize,
    /// pore radius range, voxels
    pub pore_radius_min: f64,
    pub pore_radius_max: f64,
    /// explicit part description; the default machined block when empty
    #[serde(default, rename = "solid", skip_serializing_if = "Vec::is_empty")]
    pub solids: Vec<Solid>,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            seed: 1,
            pores: 20,
            pore_radius_min: 1.0,
            pore_radius_max: 3.0,
            solids: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumSection {
    pub weights: Vec<f64>,
    pub scales: Vec<f64>,
    /// noise standard deviation relative to the largest noiseless value of
    /// the 0° projection
    pub noise_relative: f64,
    pub seed: u64,
    pub linearization_degree: usize,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        SpectrumSection {
            weights: vec![0.6, 0.4],
            scales: vec![1.0, 0.6],
            noise_relative: 0.005,
            seed: 2,
            linearization_degree: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    pub beta: f64,
    /// γ as a multiple of the median off-diagonal view distance
    pub gamma_scale: f64,
    pub canny_sigma: f64,
    pub canny_low_quantile: f64,
    pub canny_high_quantile: f64,
}

impl Default for ScoringSection {
    fn default() -> Self {
        ScoringSection {
            beta: 1.0,
            gamma_scale: 0.1,
            canny_sigma: 1.0,
            canny_low_quantile: 0.8,
            canny_high_quantile: 0.9,
        }
    }
}

impl ScoringSection {
    pub fn softmax(&self) -> Result<SoftmaxParams> {
        SoftmaxParams::new(self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub candidates: usize,
    pub n_init: usize,
    pub budget: usize,
    pub checkpoints: Vec<usize>,
    pub eavs_band_width: usize,
}

impl Default for SelectionSection {
    fn default() -> Self {
        SelectionSection {
            candidates: 200,
            n_init: 5,
            budget: 35,
            checkpoints: vec![15, 25, 35],
            eavs_band_width: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    /// SIRT iterations after each acquired view inside the selection loop
    pub iterations: usize,
    /// cold-start SIRT iterations for metric checkpoints
    pub eval_iterations: usize,
    pub relax: f64,
    pub nonneg: bool,
    /// ordered subsets per pass; 1 is plain SIRT
    pub subsets: usize,
}

impl Default for ReconSection {
    fn default() -> Self {
        ReconSection {
            iterations: 10,
            eval_iterations: 50,
            relax: 1.0,
            nonneg: true,
            subsets: 1,
        }
    }
}

impl ReconSection {
    pub fn sirt(&self) -> SirtParams {
        SirtParams {
            iterations: self.iterations,
            relax: self.relax,
            nonneg: self.nonneg,
            subsets: self.subsets,
        }
    }

    pub fn eval_sirt(&self) -> SirtParams {
        SirtParams {
            iterations: self.eval_iterations,
            ..self.sirt()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// write wall-clock columns; off gives byte-reproducible CSVs
    pub record_timing: bool,
    /// write reconstructions at every checkpoint
    pub snapshots: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
            record_timing: true,
            snapshots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub geometry: GeometryParams,
    #[serde(default)]
    pub phantom: PhantomSection,
    #[serde(default)]
    pub spectrum: SpectrumSection,
    #[serde(default)]
    pub scoring: ScoringSection,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default)]
    pub recon: ReconSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// A validation failure tied to `section.key`.
struct FieldError {
    section: &'static str,
    key: &'static str,
    message: String,
}

fn field(section: &'static str, key: &'static str, message: impl Into<String>) -> FieldError {
    FieldError {
        section,
        key,
        message: message.into(),
    }
}

impl Config {
    pub fn with_geometry(geometry: GeometryParams) -> Self {
        Config {
            geometry,
            phantom: Default::default(),
            spectrum: Default::default(),
            scoring: Default::default(),
            selection: Default::default(),
            recon: Default::default(),
            output: Default::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    /// Parses and validates; `path` is only used in messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string().trim_end().to_string(),
        })?;
        cfg.check().map_err(|f| Error::Config {
            path: path.to_path_buf(),
            message: match locate(text, f.section, f.key) {
                Some(line) => format!("line {line}: {}.{}: {}", f.section, f.key, f.message),
                None => format!("{}.{}: {}", f.section, f.key, f.message),
            },
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|f| Error::Config {
            path: PathBuf::from("<memory>"),
            message: format!("{}.{}: {}", f.section, f.key, f.message),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serialises")
    }

    /// Overrides every random seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.phantom.seed = seed;
        self.spectrum.seed = seed;
    }

    pub fn geometry(&self) -> Result<ConeBeamGeometry> {
        make_geometry(self.geometry)
    }

    pub fn grid(&self) -> Result<AngleGrid> {
        candidate_angles(self.selection.candidates)
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        let [nx, ny, nz] = self.geometry.vol_shape;
        let shape = Shape3::new(nx, ny, nz);
        let solids = if self.phantom.solids.is_empty() {
            default_solids(shape, self.geometry.voxel_pitch)
        } else {
            self.phantom.solids.clone()
        };
        PhantomSpec {
            vol_shape: shape,
            voxel_pitch: self.geometry.voxel_pitch,
            solids,
            pores: PoreSpec {
                count: self.phantom.pores,
                radius_min: self.phantom.pore_radius_min,
                radius_max: self.phantom.pore_radius_max,
                seed: self.phantom.seed,
            },
        }
    }

    /// Spectrum with a zero noise level; the absolute σ depends on the data.
    pub fn spectrum_model(&self) -> SpectrumModel {
        SpectrumModel {
            bins: self
                .spectrum
                .weights
                .iter()
                .zip(&self.spectrum.scales)
                .map(|(&weight, &scale)| EnergyBin { weight, scale })
                .collect(),
            noise_sigma: 0.0,
        }
    }

    fn check(&self) -> std::result::Result<(), FieldError> {
        if let Err(e) = make_geometry(self.geometry) {
            let key = geometry_key(&e.to_string());
            return Err(field("geometry", key, e.to_string()));
        }
        let p = &self.phantom;
        if p.pores > 0 && !(p.pore_radius_min > 0.0 && p.pore_radius_min <= p.pore_radius_max) {
            return Err(field("phantom", "pore_radius_min", "need 0 < pore_radius_min <= pore_radius_max"));
        }
        let s = &self.spectrum;
        if s.weights.len() != s.scales.len() {
            return Err(field(
                "spectrum",
                "scales",
                format!("{} scales for {} weights", s.scales.len(), s.weights.len()),
            ));
        }
        let mut model = self.spectrum_model();
        model.noise_sigma = 0.0;
        if let Err(e) = model.validate() {
            return Err(field("spectrum", "weights", e.to_string()));
        }
        if !(s.noise_relative >= 0.0 && s.noise_relative.is_finite()) {
            return Err(field("spectrum", "noise_relative", "must be finite and >= 0"));
        }
        if s.linearization_degree < 1 || s.linearization_degree > 8 {
            return Err(field("spectrum", "linearization_degree", "must be between 1 and 8"));
        }
        let sc = &self.scoring;
        if !(sc.beta >= 0.0 && sc.beta.is_finite()) {
            return Err(field("scoring", "beta", "must be finite and >= 0"));
        }
        if !(sc.gamma_scale > 0.0 && sc.gamma_scale.is_finite()) {
            return Err(field("scoring", "gamma_scale", "must be positive"));
        }
        if sc.canny_sigma.is_nan() || sc.canny_sigma <= 0.0 {
            return Err(field("scoring", "canny_sigma", "must be positive"));
        }
        if !(0.0 < sc.canny_low_quantile && sc.canny_low_quantile < sc.canny_high_quantile && sc.canny_high_quantile < 1.0) {
            return Err(field("scoring", "canny_low_quantile", "need 0 < low < high < 1"));
        }
        let sel = &self.selection;
        if sel.candidates < 2 {
            return Err(field("selection", "candidates", "need at least 2 candidate angles"));
        }
        if sel.n_init == 0 {
            return Err(field("selection", "n_init", "must be at least 1"));
        }
        if sel.budget > sel.candidates {
            return Err(field(
                "selection",
                "budget",
                format!("budget {} exceeds the {} candidate angles", sel.budget, sel.candidates),
            ));
        }
        if sel.budget < sel.n_init {
            return Err(field("selection", "budget", format!("budget {} is below n_init {}", sel.budget, sel.n_init)));
        }
        if uniform_indices(sel.candidates, sel.budget).is_err() {
            return Err(field("selection", "budget", "uniform spacing collides on this grid"));
        }
        if let Some(&c) = sel.checkpoints.iter().find(|&&c| c == 0 || c > sel.budget) {
            return Err(field("selection", "checkpoints", format!("checkpoint {c} outside 1..={}", sel.budget)));
        }
        if sel.eavs_band_width == 0 {
            return Err(field("selection", "eavs_band_width", "must be at least 1"));
        }
        if let Err(e) = self.recon.sirt().validate() {
            let key = if self.recon.iterations == 0 {
                "iterations"
            } else if self.recon.subsets == 0 {
                "subsets"
            } else {
                "relax"
            };
            return Err(field("recon", key, e.to_string()));
        }
        if self.recon.eval_iterations == 0 {
            return Err(field("recon", "eval_iterations", "must be at least 1"));
        }
        Ok(())
    }
}

fn geometry_key(message: &str) -> &'static str {
    for key in ["source_detector_dist", "source_object_dist", "det_pitch", "voxel_pitch", "det_rows", "det_cols", "vol_shape"] {
        if message.contains(key) {
            return key;
        }
    }
    if message.contains("detector") {
        "det_cols"
    } else {
        "vol_shape"
    }
}

/// 1-based line of `key = ...` inside `[section]`.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[geometry]
source_object_dist = 200.0
source_detector_dist = 400.0
det_rows = 64
det_cols = 64
det_pitch = 3.0
vol_shape = [64, 64, 64]
voxel_pitch = 1.0
"#;

    fn parse(text: &str) -> Result<Config> {
        Config::parse(text, Path::new("test.toml"))
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.selection, SelectionSection::default());
        assert_eq!(c.recon.sirt().iterations, 10);
        assert!(c.phantom.solids.is_empty());
        assert_eq!(c.phantom_spec().solids.len(), 4);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = parse(MINIMAL).unwrap();
        c.phantom.solids = vec![Solid::Sphere {
            center: [0.0; 3],
            radius: 10.0,
            attenuation: 0.02,
        }];
        let back = parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn budget_beyond_grid_names_the_field_and_line() {
        let text = format!("{MINIMAL}\n[selection]\ncandidates = 20\nn_init = 5\nbudget = 30\ncheckpoints = [10]\neavs_band_width = 3\n");
        let msg = parse(&text).unwrap_err().to_string();
        assert!(msg.contains("selection.budget"), "{msg}");
        assert!(msg.contains("line 14"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let text = format!("{MINIMAL}\n[recon]\niterations = 3\neval_iterations = 3\nrelax = 1.0\nnonneg = true\nspeed = 2\n");
        let msg = parse(&text).unwrap_err().to_string();
        assert!(msg.contains("speed"), "{msg}");
        assert!(msg.contains("line 16"), "{msg}");
    }

    #[test]
    fn truncating_geometry_is_rejected() {
        let text = MINIMAL.replace("det_cols = 64", "det_cols = 16");
        let msg = parse(&text).unwrap_err().to_string();
        assert!(msg.contains("geometry."), "{msg}");
    }

    #[test]
    fn bad_spectrum_is_rejected() {
        let text = format!("{MINIMAL}\n[spectrum]\nweights = [0.5, 0.4]\nscales = [1.0, 0.6]\nnoise_relative = 0.0\nseed = 1\nlinearization_degree = 3\n");
        assert!(parse(&text).unwrap_err().to_string().contains("spectrum.weights"));
    }

    #[test]
    fn seed_override_reaches_every_stream() {
        let mut c = parse(MINIMAL).unwrap();
        c.set_seed(99);
        assert_eq!(c.phantom.seed, 99);
        assert_eq!(c.spectrum.seed, 99);
        assert_eq!(c.phantom_spec().pores.seed, 99);
    }
}

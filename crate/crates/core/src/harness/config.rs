//! Experiment configuration files.
//!
//! ```toml
//! seed = 7
//! output = "out/compare"     # relative to the config file
//!
//! [grid]
//! ncx = 8
//! ncy = 8
//! nf = 16
//!
//! [field]
//! preset = "inclusions"      # or: raster = "kappa.txt"
//! contrast = 1e4
//!
//! [source]
//! kind = "corners"           # or: kind = "raster", path = "f.txt"
//!
//! [[method]]
//! kind = "uniform"
//! counts = [2, 3, 4]
//!
//! [[method]]
//! kind = "offline"
//! theta = 0.2
//! delta0 = 0.5
//! initial = 2
//!
//! [[method]]
//! kind = "online"
//! spectral = "sp1"
//! initial = 2
//! regions = "blocks2x2"
//! max_levels = 6
//!
//! [sweep]
//! contrasts = [1e-2, 1e-4]
//! initial = [1, 3]
//! ```

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use toml::Spanned;

use crate::adaptivity::{OfflineConfig, OnlineConfig, RegionStrategy, StopCriteria};
use crate::fields::FieldPreset;
use crate::mesh::GridSpec;
use crate::spectral::SpectralProblem;

/// A configuration problem, located by line when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    output: Spanned<String>,
    grid: RawGrid,
    field: RawField,
    #[serde(default)]
    source: Option<RawSource>,
    method: Spanned<Vec<RawMethod>>,
    #[serde(default)]
    sweep: Option<RawSweep>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    ncx: Spanned<usize>,
    ncy: Spanned<usize>,
    nf: Spanned<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawField {
    preset: Option<Spanned<FieldPreset>>,
    raster: Option<Spanned<String>>,
    contrast: Option<Spanned<f64>>,
    #[serde(default)]
    background: Option<Spanned<f64>>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSource {
    kind: Spanned<String>,
    path: Option<Spanned<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMethod {
    kind: Spanned<String>,
    name: Option<Spanned<String>>,
    spectral: Option<Spanned<SpectralProblem>>,
    counts: Option<Spanned<Vec<usize>>>,
    theta: Option<Spanned<f64>>,
    delta0: Option<Spanned<f64>>,
    initial: Option<Spanned<usize>>,
    regions: Option<Spanned<RegionStrategy>>,
    max_levels: Option<Spanned<usize>>,
    eta_rel_tol: Option<Spanned<f64>>,
    dof_fraction: Option<Spanned<f64>>,
    skip_tol: Option<Spanned<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    contrasts: Option<Spanned<Vec<f64>>>,
    initial: Option<Spanned<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldSource {
    Preset(FieldPreset),
    /// Raster whose non-background cells take the contrast value.
    Raster(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub source: FieldSource,
    pub background: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceConfig {
    /// `+1` on the top-left block, `-1` on the bottom-right block.
    Corners,
    Raster(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum MethodConfig {
    Uniform { spectral: SpectralProblem, counts: Vec<usize> },
    Offline(OfflineConfig),
    Online(OnlineConfig),
}

impl MethodConfig {
    /// Initial per-face count, used in file names.
    pub fn initial(&self) -> usize {
        match self {
            MethodConfig::Uniform { counts, .. } => counts[0],
            MethodConfig::Offline(c) => c.initial,
            MethodConfig::Online(c) => c.initial,
        }
    }

    fn with_initial(&self, l: usize) -> Self {
        match self {
            MethodConfig::Uniform { .. } => self.clone(),
            MethodConfig::Offline(c) => MethodConfig::Offline(OfflineConfig { initial: l, ..*c }),
            MethodConfig::Online(c) => MethodConfig::Online(OnlineConfig { initial: l, ..*c }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodEntry {
    pub name: String,
    pub config: MethodConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub grid: GridSpec,
    pub field: FieldConfig,
    pub source: SourceConfig,
    pub methods: Vec<MethodEntry>,
    pub contrasts: Vec<f64>,
    pub initial_sweep: Option<Vec<usize>>,
}

/// One independent run: a method at one contrast and initial count.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub name: String,
    pub method: MethodConfig,
    pub contrast: f64,
}

impl Job {
    pub fn file_name(&self) -> String {
        format!("{}_l{}_c{:e}.csv", self.name, self.method.initial(), self.contrast)
    }

    pub fn series(&self) -> String {
        self.file_name().trim_end_matches(".csv").to_string()
    }
}

impl ExperimentConfig {
    pub fn jobs(&self) -> Vec<Job> {
        let mut jobs = Vec::new();
        for &contrast in &self.contrasts {
            for m in &self.methods {
                match (&m.config, &self.initial_sweep) {
                    (MethodConfig::Uniform { .. }, _) | (_, None) => jobs.push(Job {
                        name: m.name.clone(),
                        method: m.config.clone(),
                        contrast,
                    }),
                    (_, Some(ls)) => jobs.extend(ls.iter().map(|&l| Job {
                        name: m.name.clone(),
                        method: m.config.with_initial(l),
                        contrast,
                    })),
                }
            }
        }
        jobs
    }

    /// Human-readable summary of the resolved parameters.
    pub fn describe(&self) -> String {
        let mut s = format!(
            "grid {}x{} coarse, {} fine per block\nfield {:?} background {} seed {}\nsource {:?}\noutput {}\n",
            self.grid.ncx,
            self.grid.ncy,
            self.grid.nf,
            self.field.source,
            self.field.background,
            self.field.seed,
            self.source,
            self.output.display()
        );
        for job in self.jobs() {
            s += &format!("job {} {:?}\n", job.file_name(), job.method);
        }
        s
    }
}

struct Checker<'a> {
    text: &'a str,
    errors: Vec<ConfigError>,
}

impl Checker<'_> {
    fn line_of(&self, span: Range<usize>) -> usize {
        self.text[..span.start.min(self.text.len())].matches('\n').count() + 1
    }

    fn fail(&mut self, span: Option<Range<usize>>, message: impl Into<String>) {
        let line = span.map(|s| self.line_of(s));
        self.errors.push(ConfigError {
            line,
            message: message.into(),
        });
    }

    fn open_unit<T: Copy + Into<f64>>(&mut self, v: &Spanned<T>, what: &str) -> f64 {
        let x: f64 = (*v.get_ref()).into();
        if !(x > 0.0 && x < 1.0) {
            self.fail(Some(v.span()), format!("{what} must lie in (0, 1), got {x}"));
        }
        x
    }

    fn positive(&mut self, v: &Spanned<f64>, what: &str) -> f64 {
        let x = *v.get_ref();
        if !(x > 0.0 && x.is_finite()) {
            self.fail(Some(v.span()), format!("{what} must be positive and finite, got {x}"));
        }
        x
    }

    fn at_least_one(&mut self, v: &Spanned<usize>, what: &str) -> usize {
        let x = *v.get_ref();
        if x == 0 {
            self.fail(Some(v.span()), format!("{what} must be >= 1"));
        }
        x
    }
}

fn resolve_path(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parse and fully validate a configuration. Relative paths are resolved
/// against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<ExperimentConfig, Vec<ConfigError>> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        vec![ConfigError {
            line,
            message: e.message().to_string(),
        }]
    })?;
    let mut ck = Checker {
        text,
        errors: Vec::new(),
    };

    let ncx = ck.at_least_one(&raw.grid.ncx, "grid.ncx");
    let ncy = ck.at_least_one(&raw.grid.ncy, "grid.ncy");
    let nf = ck.at_least_one(&raw.grid.nf, "grid.nf");
    if ncx * ncy < 2 && ncx > 0 && ncy > 0 {
        ck.fail(Some(raw.grid.ncx.span()), "the coarse grid needs at least two blocks");
    }
    let grid = GridSpec::new(ncx, ncy, nf);

    let field_source = match (&raw.field.preset, &raw.field.raster) {
        (Some(p), None) => FieldSource::Preset(*p.get_ref()),
        (None, Some(r)) => FieldSource::Raster(resolve_path(base, r.get_ref())),
        (Some(p), Some(_)) => {
            ck.fail(Some(p.span()), "field.preset and field.raster are mutually exclusive");
            FieldSource::Preset(*p.get_ref())
        }
        (None, None) => {
            ck.fail(None, "[field] needs either preset or raster");
            FieldSource::Preset(FieldPreset::Inclusions)
        }
    };
    let background = raw.field.background.as_ref().map_or(1.0, |b| ck.positive(b, "field.background"));
    let field = FieldConfig {
        source: field_source,
        background,
        seed: raw.field.seed.unwrap_or(raw.seed),
    };

    let contrasts = match raw.sweep.as_ref().and_then(|s| s.contrasts.as_ref()) {
        Some(cs) => {
            if cs.get_ref().is_empty() {
                ck.fail(Some(cs.span()), "sweep.contrasts is empty");
            }
            for &c in cs.get_ref() {
                if !(c > 0.0 && c.is_finite()) {
                    ck.fail(Some(cs.span()), format!("contrast must be positive and finite, got {c}"));
                }
            }
            if raw.field.contrast.is_some() {
                ck.fail(Some(cs.span()), "give either field.contrast or sweep.contrasts, not both");
            }
            cs.get_ref().clone()
        }
        None => match &raw.field.contrast {
            Some(c) => vec![ck.positive(c, "field.contrast")],
            None => {
                ck.fail(None, "no contrast: set field.contrast or sweep.contrasts");
                Vec::new()
            }
        },
    };
    let initial_sweep = raw.sweep.as_ref().and_then(|s| s.initial.as_ref()).map(|ls| {
        if ls.get_ref().is_empty() || ls.get_ref().contains(&0) {
            ck.fail(Some(ls.span()), "sweep.initial entries must be >= 1 and the list nonempty");
        }
        ls.get_ref().clone()
    });

    let source = match &raw.source {
        None => SourceConfig::Corners,
        Some(s) => match (s.kind.get_ref().as_str(), &s.path) {
            ("corners", None) => SourceConfig::Corners,
            ("raster", Some(p)) => SourceConfig::Raster(resolve_path(base, p.get_ref())),
            ("raster", None) => {
                ck.fail(Some(s.kind.span()), "source kind \"raster\" needs a path");
                SourceConfig::Corners
            }
            ("corners", Some(p)) => {
                ck.fail(Some(p.span()), "source kind \"corners\" takes no path");
                SourceConfig::Corners
            }
            (other, _) => {
                ck.fail(Some(s.kind.span()), format!("unknown source kind {other:?}, expected corners or raster"));
                SourceConfig::Corners
            }
        },
    };

    if raw.method.get_ref().is_empty() {
        ck.fail(Some(raw.method.span()), "at least one [[method]] is required");
    }
    let mut methods: Vec<MethodEntry> = Vec::new();
    for m in raw.method.get_ref() {
        if let Some(entry) = resolve_method(&mut ck, m, &grid) {
            if methods.iter().any(|e| e.name == entry.name) {
                let span = m.name.as_ref().map_or(m.kind.span(), |n| n.span());
                ck.fail(Some(span), format!("duplicate method name {:?}; set `name` to tell them apart", entry.name));
            }
            methods.push(entry);
        }
    }

    let output = raw.output.get_ref();
    if output.trim().is_empty() {
        ck.fail(Some(raw.output.span()), "output must not be empty");
    }

    if !ck.errors.is_empty() {
        return Err(ck.errors);
    }
    Ok(ExperimentConfig {
        seed: raw.seed,
        output: resolve_path(base, output),
        grid,
        field,
        source,
        methods,
        contrasts,
        initial_sweep,
    })
}

fn resolve_method(ck: &mut Checker<'_>, m: &RawMethod, grid: &GridSpec) -> Option<MethodEntry> {
    let kind = m.kind.get_ref().as_str();
    let spectral = m.spectral.as_ref().map(|s| *s.get_ref());
    let mut stop = StopCriteria::default();
    if let Some(v) = &m.max_levels {
        stop.max_levels = ck.at_least_one(v, "max_levels");
    }
    if let Some(v) = &m.eta_rel_tol {
        if v.get_ref().is_nan() || *v.get_ref() < 0.0 {
            ck.fail(Some(v.span()), "eta_rel_tol must be >= 0");
        }
        stop.eta_rel_tol = *v.get_ref();
    }
    if let Some(v) = &m.dof_fraction {
        stop.dof_fraction = ck.positive(v, "dof_fraction");
    }
    let reject = |ck: &mut Checker<'_>, present: Option<Range<usize>>, key: &str| {
        if let Some(span) = present {
            ck.fail(Some(span), format!("`{key}` does not apply to {kind} runs"));
        }
    };
    let config = match kind {
        "uniform" => {
            reject(ck, m.theta.as_ref().map(|v| v.span()), "theta");
            reject(ck, m.delta0.as_ref().map(|v| v.span()), "delta0");
            reject(ck, m.initial.as_ref().map(|v| v.span()), "initial");
            reject(ck, m.regions.as_ref().map(|v| v.span()), "regions");
            reject(ck, m.skip_tol.as_ref().map(|v| v.span()), "skip_tol");
            let counts = match &m.counts {
                Some(c) => {
                    if c.get_ref().is_empty() || c.get_ref().contains(&0) {
                        ck.fail(Some(c.span()), "counts must be a nonempty list of values >= 1");
                        return None;
                    }
                    c.get_ref().clone()
                }
                None => {
                    ck.fail(Some(m.kind.span()), "uniform runs need `counts`");
                    return None;
                }
            };
            MethodConfig::Uniform {
                spectral: spectral.unwrap_or(SpectralProblem::Sp1),
                counts,
            }
        }
        "offline" => {
            reject(ck, m.counts.as_ref().map(|v| v.span()), "counts");
            reject(ck, m.regions.as_ref().map(|v| v.span()), "regions");
            reject(ck, m.skip_tol.as_ref().map(|v| v.span()), "skip_tol");
            if let Some(s) = &m.spectral {
                if *s.get_ref() != SpectralProblem::Sp1 {
                    ck.fail(Some(s.span()), "offline enrichment uses spectral problem sp1 only");
                }
            }
            let theta = match &m.theta {
                Some(t) => ck.open_unit(t, "theta"),
                None => {
                    ck.fail(Some(m.kind.span()), "offline runs need `theta`");
                    0.5
                }
            };
            let delta0 = match &m.delta0 {
                Some(d) => ck.open_unit(d, "delta0"),
                None => {
                    ck.fail(Some(m.kind.span()), "offline runs need `delta0`");
                    0.5
                }
            };
            let initial = m.initial.as_ref().map_or(1, |v| ck.at_least_one(v, "initial"));
            MethodConfig::Offline(OfflineConfig {
                theta,
                delta0,
                initial,
                stop,
            })
        }
        "online" => {
            reject(ck, m.counts.as_ref().map(|v| v.span()), "counts");
            reject(ck, m.theta.as_ref().map(|v| v.span()), "theta");
            reject(ck, m.delta0.as_ref().map(|v| v.span()), "delta0");
            let initial = m.initial.as_ref().map_or(1, |v| ck.at_least_one(v, "initial"));
            let strategy = m.regions.as_ref().map_or(RegionStrategy::Neighborhood, |r| *r.get_ref());
            if strategy == RegionStrategy::Blocks2x2 && (grid.ncx % 2 != 0 || grid.ncy % 2 != 0) {
                let span = m.regions.as_ref().map(|r| r.span());
                ck.fail(
                    span,
                    format!("blocks2x2 regions need even coarse dimensions, grid is {}x{}", grid.ncx, grid.ncy),
                );
            }
            let mut cfg = OnlineConfig::new(spectral.unwrap_or(SpectralProblem::Sp1), initial, strategy);
            cfg.stop = stop;
            if let Some(s) = &m.skip_tol {
                if s.get_ref().is_nan() || *s.get_ref() < 0.0 {
                    ck.fail(Some(s.span()), "skip_tol must be >= 0");
                }
                cfg.skip_tol = *s.get_ref();
            }
            MethodConfig::Online(cfg)
        }
        other => {
            ck.fail(
                Some(m.kind.span()),
                format!("unknown method kind {other:?}, expected uniform, offline or online"),
            );
            return None;
        }
    };
    let name = match &m.name {
        Some(n) => {
            let s = n.get_ref();
            if s.is_empty() || !s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                ck.fail(Some(n.span()), "method names may use only letters, digits, '-' and '_'");
            }
            s.clone()
        }
        None => default_name(&config),
    };
    Some(MethodEntry { name, config })
}

fn default_name(config: &MethodConfig) -> String {
    let suffix = |p: SpectralProblem| if p == SpectralProblem::Sp2 { "-sp2" } else { "" };
    match config {
        MethodConfig::Uniform { spectral, .. } => format!("uniform{}", suffix(*spectral)),
        MethodConfig::Offline(_) => "offline".into(),
        MethodConfig::Online(c) => format!("online-{}{}", c.strategy, suffix(c.problem)),
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, Vec<ConfigError>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        vec![ConfigError {
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        }]
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
seed = 3
output = "out"

[grid]
ncx = 4
ncy = 4
nf = 4

[field]
preset = "inclusions"

[[method]]
kind = "uniform"
counts = [1, 2]

[[method]]
kind = "offline"
theta = 0.2
delta0 = 0.5
initial = 2

[[method]]
kind = "online"
initial = 2
regions = "blocks2x2"
max_levels = 4

[sweep]
contrasts = [1e-2, 1e4]
initial = [1, 3]
"#;

    fn errors(text: &str) -> Vec<ConfigError> {
        parse_config(text, Path::new("/base")).unwrap_err()
    }

    #[test]
    fn parses_and_expands_jobs() {
        let cfg = parse_config(GOOD, Path::new("/base")).unwrap();
        assert_eq!(cfg.output, PathBuf::from("/base/out"));
        assert_eq!(cfg.field.seed, 3);
        let jobs = cfg.jobs();
        // per contrast: one uniform, two offline, two online
        assert_eq!(jobs.len(), 10);
        let names: Vec<String> = jobs.iter().map(|j| j.file_name()).collect();
        assert!(names.contains(&"offline_l3_c1e4.csv".to_string()));
        assert!(names.contains(&"online-blocks2x2_l1_c1e-2.csv".to_string()));
        assert!(names.contains(&"uniform_l1_c1e-2.csv".to_string()));
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn rejects_offline_with_sp2() {
        let text = GOOD.replace("theta = 0.2", "theta = 0.2\nspectral = \"sp2\"");
        let e = errors(&text);
        assert_eq!(e.len(), 1);
        assert!(e[0].message.contains("sp1"));
        assert_eq!(e[0].line, Some(20));
    }

    #[test]
    fn rejects_theta_out_of_range_with_line() {
        let e = errors(&GOOD.replace("theta = 0.2", "theta = 1.2"));
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].line, Some(19));
        assert!(e[0].to_string().starts_with("line 19:"));
    }

    #[test]
    fn rejects_blocks_on_odd_grid() {
        let text = GOOD.replace("ncx = 4\nncy = 4", "ncx = 15\nncy = 15");
        let e = errors(&text);
        assert_eq!(e.len(), 1);
        assert!(e[0].message.contains("even"));
    }

    #[test]
    fn syntax_and_unknown_keys_report_lines() {
        let e = errors(&GOOD.replace("nf = 4", "nf = 4\nbogus = 1"));
        assert_eq!(e[0].line, Some(9));
        let e = errors(&GOOD.replace("nf = 4", "nf = = 4"));
        assert_eq!(e[0].line, Some(8));
    }

    #[test]
    fn collects_several_errors() {
        let text = GOOD.replace("delta0 = 0.5", "delta0 = 0.0").replace("counts = [1, 2]", "counts = []");
        assert_eq!(errors(&text).len(), 2);
    }

    #[test]
    fn contrast_sources_are_exclusive() {
        let text = GOOD.replace("preset = \"inclusions\"", "preset = \"inclusions\"\ncontrast = 10.0");
        assert!(errors(&text)[0].message.contains("not both"));
        let text = GOOD.replace("contrasts = [1e-2, 1e4]\n", "");
        assert!(errors(&text)[0].message.contains("no contrast"));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let text = GOOD.replace("regions = \"blocks2x2\"", "regions = \"blocks2x2\"\n\n[[method]]\nkind = \"online\"\nregions = \"blocks2x2\"");
        assert!(errors(&text)[0].message.contains("duplicate"));
    }
}

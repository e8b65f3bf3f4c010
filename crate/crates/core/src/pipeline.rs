//! End-to-end diagnosis: parse, match known faults, filter against
//! history, compare spatially and temporally, report.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drain::{parse_bundle, DrainConfig, DrainError, Masks, ParsedBundle, ParserConfig};
use crate::filter::{build_pool, CrossJobFilter, FilterError, FilterStats, DEFAULT_PRESENCE_FRACTION};
use crate::library::{FaultLibrary, LibraryError};
use crate::model::{read_job_bundle, IngestError, IngestOptions, JobBundle, LayoutSpec};
use crate::pattern::TemplatePattern;
use crate::report::{assemble, DiagnosisReport};
use crate::spatial::{self, IsolationForestParams, SpatialConfig, SpatialError, SpatialOutcome};
use crate::temporal::{self, default_iteration_marker, StageRules, TemporalConfig, TemporalError, TemporalOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("ingest: {0}")]
    Ingest(#[from] IngestError),
    #[error("parse: {0}")]
    Drain(#[from] DrainError),
    #[error("filter: {0}")]
    Filter(#[from] FilterError),
    #[error("spatial analysis: {0}")]
    Spatial(#[from] SpatialError),
    #[error("temporal analysis: {0}")]
    Temporal(#[from] TemporalError),
    #[error("fault library: {0}")]
    Library(#[from] LibraryError),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Text,
}

/// Every knob of a diagnosis run. Loadable from TOML; field names follow
/// the command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    pub failed: Option<PathBuf>,
    pub history: Vec<PathBuf>,
    pub library: Option<PathBuf>,
    pub layout: LayoutSpec,
    pub header: String,
    pub join_continuations: bool,
    pub drain_depth: usize,
    pub drain_threshold: f64,
    pub drain_max_children: usize,
    pub masks: Option<PathBuf>,
    pub presence_fraction: f64,
    pub iforest_trees: usize,
    pub iforest_subsample: Option<usize>,
    pub anomaly_threshold: f64,
    pub top_k_nodes: usize,
    /// Unset means 0.
    pub seed: Option<u64>,
    pub window: usize,
    pub stage_rules: Option<PathBuf>,
    pub iter_marker: Option<String>,
    pub out: Option<PathBuf>,
    pub format: OutputFormat,
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let drain = DrainConfig::default();
        let spatial = SpatialConfig::default();
        RunConfig {
            failed: None,
            history: Vec::new(),
            library: None,
            layout: LayoutSpec::default(),
            header: "iso".into(),
            join_continuations: false,
            drain_depth: drain.depth,
            drain_threshold: drain.similarity_threshold,
            drain_max_children: drain.max_children,
            masks: None,
            presence_fraction: DEFAULT_PRESENCE_FRACTION,
            iforest_trees: spatial.forest.trees,
            iforest_subsample: spatial.forest.subsample,
            anomaly_threshold: spatial.anomaly_threshold,
            top_k_nodes: spatial.top_k_nodes,
            seed: None,
            window: temporal::DEFAULT_WINDOW,
            stage_rules: None,
            iter_marker: None,
            out: None,
            format: OutputFormat::Json,
            jobs: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }
}

/// Resolved analysis settings, independent of where logs come from.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub ingest: IngestOptions,
    pub parser: ParserConfig,
    pub presence_fraction: f64,
    pub spatial: SpatialConfig,
    pub temporal: TemporalConfig,
    pub seed: u64,
}

impl Default for Pipeline {
    fn default() -> Self {
        Pipeline {
            ingest: IngestOptions::default(),
            parser: ParserConfig::default(),
            presence_fraction: DEFAULT_PRESENCE_FRACTION,
            spatial: SpatialConfig::default(),
            temporal: TemporalConfig::default(),
            seed: 0,
        }
    }
}

fn read_text(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|source| IngestError::Io { path: path.to_path_buf(), source }.into())
}

impl Pipeline {
    pub fn from_config(c: &RunConfig) -> Result<Self, PipelineError> {
        let drain =
            DrainConfig { depth: c.drain_depth, similarity_threshold: c.drain_threshold, max_children: c.drain_max_children };
        drain.validate()?;
        let masks = match &c.masks {
            Some(p) => Masks::parse(&read_text(p)?)?,
            None => Masks::standard(),
        };
        if !(c.presence_fraction > 0.0 && c.presence_fraction <= 1.0) {
            return Err(FilterError::BadFraction(c.presence_fraction).into());
        }
        if c.iforest_trees == 0 {
            return Err(SpatialError::BadParams("tree count must be positive".into()).into());
        }
        if c.iforest_subsample.is_some_and(|s| s < 2) {
            return Err(SpatialError::BadParams("subsample must be at least 2".into()).into());
        }
        if c.window == 0 {
            return Err(PipelineError::Config("window must be positive".into()));
        }
        let rules = match &c.stage_rules {
            Some(p) => StageRules::parse(&read_text(p)?)?,
            None => StageRules::default(),
        };
        let iteration_marker = match &c.iter_marker {
            Some(m) => m
                .parse::<TemplatePattern>()
                .map_err(|e| PipelineError::Config(format!("iteration marker: {e}")))?,
            None => default_iteration_marker(),
        };
        Ok(Pipeline {
            ingest: IngestOptions {
                layout: c.layout,
                header: c.header.parse()?,
                join_continuations: c.join_continuations,
            },
            parser: ParserConfig { drain, masks },
            presence_fraction: c.presence_fraction,
            spatial: SpatialConfig {
                forest: IsolationForestParams { trees: c.iforest_trees, subsample: c.iforest_subsample },
                anomaly_threshold: c.anomaly_threshold,
                top_k_nodes: c.top_k_nodes,
            },
            temporal: TemporalConfig { window: c.window, rules, iteration_marker },
            seed: c.seed.unwrap_or(0),
        })
    }

    pub fn load(&self, path: &Path) -> Result<JobBundle, PipelineError> {
        Ok(read_job_bundle(path, &self.ingest)?)
    }

    pub fn parse(&self, bundle: &JobBundle) -> ParsedBundle {
        parse_bundle(bundle, &self.parser)
    }

    /// Runs every phase on in-memory bundles.
    pub fn diagnose(
        &self,
        failed: &JobBundle,
        history: &[JobBundle],
        library: Option<&FaultLibrary>,
    ) -> Result<Diagnosis, PipelineError> {
        let (parsed, history): (ParsedBundle, Vec<ParsedBundle>) =
            rayon::join(|| self.parse(failed), || history.par_iter().map(|h| self.parse(h)).collect());
        self.diagnose_parsed(parsed, &history, library)
    }

    pub fn diagnose_parsed(
        &self,
        parsed: ParsedBundle,
        history: &[ParsedBundle],
        library: Option<&FaultLibrary>,
    ) -> Result<Diagnosis, PipelineError> {
        // matching sees the unfiltered job so filtering cannot hide a known fault
        let matches = library.map(|l| l.match_bundle(&parsed)).unwrap_or_default();
        let pool = if history.is_empty() { None } else { Some(build_pool(history)?) };
        let filter = CrossJobFilter::new(pool, self.presence_fraction)?;
        let (filtered, filter_stats) = filter.apply(&parsed);
        let normal = filter.normal_mask(&parsed);
        let (spatial, temporal) = rayon::join(
            || spatial::analyze(&filtered, &self.spatial, self.seed),
            || temporal::analyze(&parsed, &normal, &self.temporal),
        );
        let spatial = spatial?;
        let report = assemble(&parsed, matches, &spatial, &temporal, filter_stats);
        Ok(Diagnosis { report, parsed, filtered, filter_stats, spatial, temporal })
    }

    /// Reads the failed job, its history and the library named in `config`.
    pub fn run(&self, config: &RunConfig) -> Result<Diagnosis, PipelineError> {
        let failed_path = config.failed.as_deref().ok_or_else(|| PipelineError::Config("no failed job path".into()))?;
        let failed = self.load(failed_path)?;
        let history = config.history.par_iter().map(|h| self.load(h)).collect::<Result<Vec<_>, _>>()?;
        let library = config.library.as_deref().map(FaultLibrary::load_or_empty).transpose()?;
        self.diagnose(&failed, &history, library.as_ref())
    }
}

/// A report plus the intermediate products it was built from.
#[derive(Clone, Debug)]
pub struct Diagnosis {
    pub report: DiagnosisReport,
    pub parsed: ParsedBundle,
    pub filtered: ParsedBundle,
    pub filter_stats: FilterStats,
    pub spatial: SpatialOutcome,
    pub temporal: TemporalOutcome,
}

/// Convenience wrapper: resolve `config` and run it.
pub fn diagnose(config: &RunConfig) -> Result<Diagnosis, PipelineError> {
    Pipeline::from_config(config)?.run(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let c = RunConfig {
            history: vec!["a".into(), "b".into()],
            window: 12,
            iter_marker: Some("/step <\\*>/".into()),
            ..RunConfig::default()
        };
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
        let partial: RunConfig = toml::from_str("seed = 7\ntop-k-nodes = 5\n").unwrap();
        assert_eq!((partial.seed, partial.top_k_nodes, partial.window), (Some(7), 5, 10));
        assert!(toml::from_str::<RunConfig>("no-such-knob = 1\n").is_err());
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let bad = |f: fn(&mut RunConfig)| {
            let mut c = RunConfig::default();
            f(&mut c);
            Pipeline::from_config(&c).is_err()
        };
        assert!(bad(|c| c.drain_depth = 1));
        assert!(bad(|c| c.presence_fraction = 0.0));
        assert!(bad(|c| c.iforest_trees = 0));
        assert!(bad(|c| c.window = 0));
        assert!(bad(|c| c.iter_marker = Some("/(/".into())));
        assert!(!bad(|_| ()));
    }

    #[test]
    fn missing_job_is_an_io_error() {
        let c = RunConfig { failed: Some("/definitely/not/here".into()), ..RunConfig::default() };
        assert!(matches!(diagnose(&c), Err(PipelineError::Ingest(_))));
    }
}

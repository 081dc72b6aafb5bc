//! One function per subcommand. Each takes its parsed config and the output
//! directory and returns the effective config for the provenance record.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use oclb::data::{load_dataset, load_slots, make_splits, save_dataset, save_slots, SceneBatch, SlotBatch, SplitSizes};
use oclb::downstream::{
    baseline_constant, evaluate_probe, train_probe, BaselineMode, PredictorConfig, PredictorParams,
    ProbeScores, TrainConfig,
};
use oclb::matching::MatchingMode;
use oclb::metrics::{batch_metrics, mean_of, MetricName};
use oclb::report::{aggregate, correlate_keys, emit, format_sig9, read_records, to_csv, EvalReport, GroupKey, Record, ReportFormat, Split};
use oclb::shifts::{apply_shift, ShiftSpec};
use oclb::synth::{generate_scenes, mock_encode, MockEncoderConfig, SynthConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    write(path, &text)
}

fn effective<T: Serialize>(config: &T) -> Value {
    serde_json::to_value(config).expect("config serializes")
}

/// Scene indices of a named split, or every scene for `all`.
fn split_indices(batch: &SceneBatch, name: &str) -> Result<Vec<usize>, Failure> {
    if name == "all" {
        return Ok((0..batch.len()).collect());
    }
    let splits = batch
        .splits
        .as_ref()
        .ok_or_else(|| Failure::Invalid(format!("dataset {:?} has no splits; use split \"all\"", batch.name)))?;
    splits
        .get(name)
        .map(<[usize]>::to_vec)
        .ok_or_else(|| Failure::Invalid(format!("unknown split {name:?}")))
}

fn shift_name(batch: &SceneBatch) -> String {
    batch.shift.as_ref().map_or_else(|| "none".to_string(), |s| s.name.clone())
}

fn dataset_and_slots(dataset: &Path, slots: &Path) -> Result<(SceneBatch, SlotBatch), Failure> {
    let (batch, _) = load_dataset(dataset)?;
    let slots = load_slots(slots)?;
    if slots.len() != batch.len() {
        return Err(Failure::Invalid(format!(
            "{} scenes but {} slot entries",
            batch.len(),
            slots.len()
        )));
    }
    Ok((batch, slots))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSynthConfig {
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub splits: Option<SplitSizes>,
    /// Also write mock-encoder slots to `slots/`.
    pub encoder: Option<MockEncoderConfig>,
    /// Also write ground-truth slots to `gt_slots/`.
    pub gt_slots: bool,
}

impl Default for GenSynthConfig {
    fn default() -> Self {
        Self {
            seed: None,
            synth: SynthConfig::default(),
            splits: Some(SplitSizes {
                train: 600,
                val: 200,
                test: 200,
            }),
            encoder: None,
            gt_slots: false,
        }
    }
}

pub fn gen_synth(mut c: GenSynthConfig, out: &Path) -> Result<Value, Failure> {
    if let Some(seed) = c.seed {
        c.synth.seed = seed;
        if let Some(e) = c.encoder.as_mut() {
            e.seed = seed;
        }
    }
    let mut batch = generate_scenes(&c.synth)?;
    if let Some(sizes) = c.splits {
        batch.splits = Some(make_splits(batch.len(), sizes, c.synth.seed)?);
    }
    save_dataset(&batch, &out.join("dataset"))?;
    if let Some(e) = &c.encoder {
        save_slots(&mock_encode(&batch, e)?, &out.join("slots"))?;
    }
    if c.gt_slots {
        save_slots(&SlotBatch::from_gt_masks(&batch, batch.max_objects())?, &out.join("gt_slots"))?;
    }
    Ok(effective(&c))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplyShiftConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    pub dataset: PathBuf,
    pub shift: ShiftSpec,
}

pub fn apply_shift_cmd(mut c: ApplyShiftConfig, out: &Path) -> Result<Value, Failure> {
    if let Some(seed) = c.seed {
        c.shift.seed = seed;
    }
    let (batch, _) = load_dataset(&c.dataset)?;
    let shifted = apply_shift(&batch, &c.shift)?;
    save_dataset(&shifted, &out.join("dataset"))?;
    Ok(effective(&c))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSelection {
    pub selection: Vec<MetricName>,
}

impl Default for MetricSelection {
    fn default() -> Self {
        Self {
            selection: vec![MetricName::Ari, MetricName::Sc, MetricName::Msc],
        }
    }
}

fn default_split() -> String {
    "all".into()
}

fn default_tag() -> String {
    "model".into()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalMetricsConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    pub dataset: PathBuf,
    /// Slot directory; the ground-truth masks are scored when absent.
    #[serde(default)]
    pub slots: Option<PathBuf>,
    #[serde(default)]
    pub metrics: MetricSelection,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default = "default_tag")]
    pub model_tag: String,
}

pub fn eval_metrics(c: EvalMetricsConfig, out: &Path) -> Result<Value, Failure> {
    let (batch, _) = load_dataset(&c.dataset)?;
    let slots = match &c.slots {
        Some(dir) => load_slots(dir)?,
        None => SlotBatch::from_gt_masks(&batch, batch.max_objects())?,
    };
    if slots.len() != batch.len() {
        return Err(Failure::Invalid(format!("{} scenes but {} slot entries", batch.len(), slots.len())));
    }
    let indices = split_indices(&batch, &c.split)?;
    let selection: BTreeSet<MetricName> = c.metrics.selection.iter().copied().collect();
    let scenes = batch_metrics(&batch.select(&indices), &slots.select(&indices), &selection)?;

    let mut per_scene = String::from("scene_index,metric,value,skipped\n");
    for r in &scenes {
        per_scene.push_str(&format!(
            "{},{},{},{}\n",
            indices[r.scene_index],
            r.metric,
            format_sig9(r.value),
            r.skipped
        ));
    }
    write(&out.join("scenes.csv"), &per_scene)?;

    let records: Vec<Record> = selection
        .iter()
        .map(|&m| Record {
            dataset: batch.name.clone(),
            model_tag: c.model_tag.clone(),
            seed: c.seed.unwrap_or(0),
            shift: shift_name(&batch),
            split: Split::All,
            key: m.to_string(),
            value: mean_of(&scenes, m).map_or(f64::NAN, |(v, _)| v),
        })
        .collect();
    write(&out.join("records.csv"), &to_csv(&records)?)?;
    Ok(effective(&c))
}

fn default_hidden_layers() -> usize {
    1
}

fn default_hidden_width() -> usize {
    256
}

fn default_matching() -> MatchingMode {
    MatchingMode::Loss
}

/// Probe architecture; input and output widths come from the data.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    /// Number of output groups for distributed representations; defaults
    /// to the dataset's maximum object count.
    #[serde(default)]
    pub groups: Option<usize>,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            hidden_layers: default_hidden_layers(),
            hidden_width: default_hidden_width(),
            groups: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainProbeConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    pub dataset: PathBuf,
    pub slots: PathBuf,
    #[serde(default)]
    pub probe: ProbeSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_matching")]
    pub matching: MatchingMode,
}

pub fn train_probe_cmd(mut c: TrainProbeConfig, out: &Path) -> Result<Value, Failure> {
    if let Some(seed) = c.seed {
        c.train.seed = seed;
    }
    let (batch, slots) = dataset_and_slots(&c.dataset, &c.slots)?;
    let splits = batch
        .splits
        .clone()
        .ok_or_else(|| Failure::Invalid("training needs a dataset with splits".into()))?;
    let p = batch.schema.width();
    let mut config = if slots.distributed {
        let groups = c.probe.groups.unwrap_or_else(|| batch.max_objects());
        PredictorConfig::distributed(c.probe.hidden_layers, slots.slot_dim(), p, groups)
    } else {
        PredictorConfig::slot_wise(c.probe.hidden_layers, slots.slot_dim(), p)
    };
    config.hidden_width = c.probe.hidden_width;
    let (params, log) = train_probe(&slots, &batch, &config, &c.train, c.matching, &splits)?;
    params.save(&config, &out.join("probe"))?;
    write_json(&out.join("train_log.json"), &log)?;
    Ok(effective(&c))
}

/// Long-form records of every defined score.
fn score_records(scores: &ProbeScores, batch: &SceneBatch, model_tag: &str, seed: u64) -> Vec<Record> {
    let mut out = Vec::new();
    for p in &scores.properties {
        for (split, g) in [(Split::Id, &p.id), (Split::Ood, &p.ood), (Split::All, &p.all)] {
            if let Some(value) = g.value {
                out.push(Record {
                    dataset: batch.name.clone(),
                    model_tag: model_tag.to_string(),
                    seed,
                    shift: shift_name(batch),
                    split,
                    key: p.property.clone(),
                    value,
                });
            }
        }
    }
    out
}

fn default_test() -> String {
    "test".into()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProbeConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    pub dataset: PathBuf,
    pub slots: PathBuf,
    /// Directory written by `train-probe` (its `probe/` subdirectory).
    pub probe: PathBuf,
    #[serde(default = "default_matching")]
    pub matching: MatchingMode,
    #[serde(default = "default_test")]
    pub split: String,
    #[serde(default = "default_tag")]
    pub model_tag: String,
}

pub fn eval_probe_cmd(c: EvalProbeConfig, out: &Path) -> Result<Value, Failure> {
    let (batch, slots) = dataset_and_slots(&c.dataset, &c.slots)?;
    let (params, config) = PredictorParams::load(&c.probe)?;
    let indices = split_indices(&batch, &c.split)?;
    let scores = evaluate_probe(&params, &config, &slots, &batch, c.matching, &indices)?;
    write_json(&out.join("scores.json"), &scores)?;
    let records = score_records(&scores, &batch, &c.model_tag, c.seed.unwrap_or(0));
    write(&out.join("records.csv"), &to_csv(&records)?)?;
    Ok(effective(&c))
}

fn default_baseline_mode() -> BaselineMode {
    BaselineMode::AnalyticSlotwise
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_baseline_tag() -> String {
    "baseline".into()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Replaces `seeds` with this single seed.
    #[serde(default)]
    pub seed: Option<u64>,
    pub dataset: PathBuf,
    #[serde(default = "default_baseline_mode")]
    pub mode: BaselineMode,
    /// Output groups of the learned constant; defaults to the maximum object count.
    #[serde(default)]
    pub groups: Option<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_baseline_tag")]
    pub model_tag: String,
}

pub fn baseline_cmd(mut c: BaselineConfig, out: &Path) -> Result<Value, Failure> {
    if let Some(seed) = c.seed {
        c.seeds = vec![seed];
    }
    let (batch, _) = load_dataset(&c.dataset)?;
    let splits = batch
        .splits
        .clone()
        .ok_or_else(|| Failure::Invalid("baselines need a dataset with splits".into()))?;
    let groups = c.groups.unwrap_or_else(|| batch.max_objects());
    let scores = baseline_constant(&batch, c.mode, groups, &c.train, &splits, &c.seeds)?;
    let record_seeds: Vec<u64> = if c.mode == BaselineMode::AnalyticSlotwise {
        vec![0]
    } else {
        c.seeds.clone()
    };
    let records: Vec<Record> = scores
        .iter()
        .zip(&record_seeds)
        .flat_map(|(s, &seed)| score_records(s, &batch, &c.model_tag, seed))
        .collect();
    write_json(&out.join("scores.json"), &scores)?;
    write(&out.join("records.csv"), &to_csv(&records)?)?;
    Ok(effective(&c))
}

/// Accepts a single path where a list is expected.
fn one_or_many<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<PathBuf>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(PathBuf),
        Many(Vec<PathBuf>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(p) => vec![p],
        OneOrMany::Many(v) => v,
    })
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<Record>, Failure> {
    if paths.is_empty() {
        return Err(Failure::Invalid("no record files given".into()));
    }
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_records(p)?);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelateConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(deserialize_with = "one_or_many")]
    pub records: Vec<PathBuf>,
    /// Pairs of record keys, e.g. `["ARI", "shape"]`.
    pub pairs: Vec<[String; 2]>,
}

pub fn correlate(c: CorrelateConfig, out: &Path) -> Result<Value, Failure> {
    let records = read_all(&c.records)?;
    let mut correlations = Vec::new();
    let mut warnings = Vec::new();
    for [a, b] in &c.pairs {
        match correlate_keys(&records, a, b)? {
            Some(corr) => correlations.push(corr),
            None => warnings.push(format!("{a} vs {b}: constant input, correlation undefined")),
        }
    }
    let report = EvalReport {
        records: Vec::new(),
        aggregates: Vec::new(),
        correlations,
        warnings,
    };
    emit(&report, ReportFormat::Json, &out.join("correlations.json"))?;
    Ok(effective(&c))
}

fn default_group_by() -> Vec<GroupKey> {
    vec![GroupKey::Dataset, GroupKey::ModelTag, GroupKey::Shift, GroupKey::Split, GroupKey::Key]
}

fn default_format() -> ReportFormat {
    ReportFormat::Json
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Seed of the bootstrap confidence intervals.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(deserialize_with = "one_or_many")]
    pub records: Vec<PathBuf>,
    #[serde(default = "default_group_by")]
    pub group_by: Vec<GroupKey>,
    #[serde(default = "default_format")]
    pub format: ReportFormat,
    #[serde(default)]
    pub correlations: Vec<[String; 2]>,
}

pub fn report(c: ReportConfig, out: &Path) -> Result<Value, Failure> {
    let records = read_all(&c.records)?;
    let (aggregates, mut warnings) = aggregate(&records, &c.group_by, c.seed.unwrap_or(0));
    let mut correlations = Vec::new();
    for [a, b] in &c.correlations {
        match correlate_keys(&records, a, b)? {
            Some(corr) => correlations.push(corr),
            None => warnings.push(format!("{a} vs {b}: constant input, correlation undefined")),
        }
    }
    let report = EvalReport {
        records,
        aggregates,
        correlations,
        warnings,
    };
    let file = match c.format {
        ReportFormat::Csv => "report.csv",
        ReportFormat::Json => "report.json",
    };
    emit(&report, c.format, &out.join(file))?;
    Ok(effective(&c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_fields_are_rejected() {
        let v = serde_json::json!({"dataset": "d", "shift": {"kind": "crop"}, "extra": 1});
        assert!(serde_json::from_value::<ApplyShiftConfig>(v).is_err());
    }

    #[test]
    fn defaults_fill_in() {
        let c: EvalMetricsConfig = serde_json::from_value(serde_json::json!({"dataset": "d"})).unwrap();
        assert_eq!(c.split, "all");
        assert_eq!(c.metrics.selection.len(), 3);
        let c: GenSynthConfig = serde_json::from_value(serde_json::json!({})).unwrap();
        assert_eq!(c.splits.unwrap().total(), c.synth.num_scenes);
    }
}

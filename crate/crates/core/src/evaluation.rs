//! One-pass evaluation: per-frame overlap and center error, success and
//! precision curves, attribute slices, JSON reports, plots and comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data_io::SequenceRecord;
use crate::error::{Result, TsfError};
use crate::geometry::{center_error, iou, BBox};
use crate::model::TsfModel;
use crate::tracker::{run_sequence, FrameOutput, TrackConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Threshold at which precision is quoted, in pixels.
pub const PRECISION_PIXELS: usize = 20;

/// Overlap thresholds 0.00, 0.05, ..., 1.00.
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Center-error thresholds 0, 1, ..., 50 pixels.
pub fn precision_thresholds() -> Vec<f64> {
    (0..=50).map(|i| i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub auc: f64,
}

impl MetricCurve {
    fn from_values(thresholds: Vec<f64>, values: Vec<f64>) -> Self {
        let auc = values.iter().sum::<f64>() / values.len() as f64;
        MetricCurve { thresholds, values, auc }
    }

    pub fn value_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| t == threshold).map(|i| self.values[i])
    }
}

/// Per-frame scores of one sequence. Frames without valid ground truth are
/// excluded; `frames` keeps the full length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub id: String,
    pub frames: usize,
    pub overlaps: Vec<f64>,
    pub center_errors: Vec<f64>,
    pub attributes: Vec<String>,
}

impl SequenceResult {
    pub fn scored(&self) -> usize {
        self.overlaps.len()
    }
}

pub fn per_frame_metrics(id: &str, pred: &[BBox], gt: &[Option<BBox>]) -> Result<SequenceResult> {
    if pred.len() != gt.len() {
        return Err(TsfError::ShapeMismatch(format!(
            "sequence {id}: {} predictions for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let mut overlaps = Vec::with_capacity(pred.len());
    let mut center_errors = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let Some(g) = g.filter(|g| g.validate().is_ok()) else { continue };
        overlaps.push(iou(p, &g));
        center_errors.push(center_error(p, &g));
    }
    Ok(SequenceResult {
        id: id.to_string(),
        frames: pred.len(),
        overlaps,
        center_errors,
        attributes: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// All scored frames of all sequences count equally.
    #[default]
    Pooled,
    /// Curves are averaged over sequences.
    PerSequence,
}

impl std::str::FromStr for Aggregation {
    type Err = TsfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Aggregation::Pooled),
            "per_sequence" | "per-sequence" => Ok(Aggregation::PerSequence),
            _ => Err(TsfError::InvalidArgument(format!("unknown aggregation {s:?} (pooled, per_sequence)"))),
        }
    }
}

fn rate(values: &[f64], hit: impl Fn(f64) -> bool) -> f64 {
    values.iter().filter(|&&v| hit(v)).count() as f64 / values.len() as f64
}

fn curve(
    results: &[&SequenceResult],
    agg: Aggregation,
    thresholds: Vec<f64>,
    field: impl Fn(&SequenceResult) -> &[f64],
    hit: impl Fn(f64, f64) -> bool,
) -> Result<MetricCurve> {
    let pooled: Vec<f64> = results.iter().flat_map(|r| field(r).iter().copied()).collect();
    if pooled.is_empty() {
        return Err(TsfError::MissingData("no scored frames".into()));
    }
    let values = match agg {
        Aggregation::Pooled => thresholds.iter().map(|&th| rate(&pooled, |v| hit(v, th))).collect(),
        Aggregation::PerSequence => {
            let seqs: Vec<&[f64]> = results.iter().map(|r| field(r)).filter(|v| !v.is_empty()).collect();
            thresholds
                .iter()
                .map(|&th| seqs.iter().map(|v| rate(v, |x| hit(x, th))).sum::<f64>() / seqs.len() as f64)
                .collect()
        }
    };
    Ok(MetricCurve::from_values(thresholds, values))
}

/// Fraction of frames with overlap strictly above each threshold.
pub fn success_curve(results: &[&SequenceResult], agg: Aggregation) -> Result<MetricCurve> {
    curve(results, agg, success_thresholds(), |r| &r.overlaps, |v, th| v > th)
}

/// Fraction of frames with center error strictly below each threshold.
pub fn precision_curve(results: &[&SequenceResult], agg: Aggregation) -> Result<MetricCurve> {
    curve(results, agg, precision_thresholds(), |r| &r.center_errors, |v, th| v < th)
}

fn check_monotone(s: &MetricCurve, p: &MetricCurve) -> Result<()> {
    let ok = s.values.windows(2).all(|w| w[1] <= w[0]) && p.values.windows(2).all(|w| w[1] >= w[0]);
    if ok && (0.0..=1.0).contains(&s.auc) {
        Ok(())
    } else {
        Err(TsfError::ModelCorruption("metric curves are not monotone".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub success: MetricCurve,
    pub precision: MetricCurve,
}

impl Curves {
    pub fn compute(results: &[&SequenceResult], agg: Aggregation) -> Result<Self> {
        let c = Curves {
            success: success_curve(results, agg)?,
            precision: precision_curve(results, agg)?,
        };
        check_monotone(&c.success, &c.precision)?;
        Ok(c)
    }

    pub fn precision_at_20(&self) -> f64 {
        self.precision.value_at(PRECISION_PIXELS as f64).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub id: String,
    pub frames: usize,
    pub scored_frames: usize,
    pub auc: f64,
    pub precision_at_20: f64,
    pub fps: Option<f64>,
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSummary {
    pub sequences: Vec<String>,
    pub auc: f64,
    pub precision_at_20: f64,
    pub curves: Curves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsStats {
    pub frames: usize,
    pub seconds: f64,
    /// Total frames over total wall-clock seconds.
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub tracker: String,
    pub dataset: String,
    pub aggregation: Aggregation,
    pub curves: Curves,
    pub auc: f64,
    pub precision_at_20: f64,
    pub fps: Option<FpsStats>,
    pub per_sequence: Vec<SequenceSummary>,
    pub attributes: BTreeMap<String, SliceSummary>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(TsfError::InvalidArgument(format!(
                "report schema version {} (expected {REPORT_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

/// Tracker output for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedSequence {
    pub id: String,
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub seconds: Vec<f64>,
}

impl TrackedSequence {
    pub fn from_outputs(id: &str, out: &[FrameOutput]) -> Self {
        TrackedSequence {
            id: id.to_string(),
            boxes: out.iter().map(|o| o.bbox).collect(),
            scores: out.iter().map(|o| o.score).collect(),
            seconds: out.iter().map(|o| o.seconds).collect(),
        }
    }

    pub fn total_seconds(&self) -> f64 {
        self.seconds.iter().sum()
    }
}

/// Score tracker outputs against a dataset. Sequences without results are
/// reported as warnings; results for unknown sequences are ignored with a warning.
pub fn evaluate(tracker: &str, dataset: &str, records: &[SequenceRecord], tracked: &[TrackedSequence], agg: Aggregation) -> Result<Report> {
    let mut warnings = Vec::new();
    let by_id: BTreeMap<&str, &TrackedSequence> = tracked.iter().map(|t| (t.id.as_str(), t)).collect();
    for t in tracked {
        if !records.iter().any(|r| r.id == t.id) {
            warnings.push(format!("results for unknown sequence {}", t.id));
        }
    }
    let mut ordered: Vec<&SequenceRecord> = records.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let mut results = Vec::new();
    let mut timing: Vec<Option<(usize, f64)>> = Vec::new();
    for rec in ordered {
        let Some(t) = by_id.get(rec.id.as_str()) else {
            warnings.push(format!("no results for sequence {}", rec.id));
            continue;
        };
        if t.boxes.len() != rec.len() {
            warnings.push(format!("sequence {}: {} result lines for {} frames; skipped", rec.id, t.boxes.len(), rec.len()));
            continue;
        }
        let mut r = per_frame_metrics(&rec.id, &t.boxes, &rec.gt)?;
        r.attributes = rec.attributes.iter().cloned().collect();
        if r.scored() == 0 {
            warnings.push(format!("sequence {} has no valid ground truth; skipped", rec.id));
            continue;
        }
        let secs = t.total_seconds();
        timing.push((t.seconds.len() == t.boxes.len() && secs > 0.0).then_some((t.boxes.len(), secs)));
        results.push(r);
    }
    if results.is_empty() {
        return Err(TsfError::MissingData("no sequence could be scored".into()));
    }
    report_from_results(tracker, dataset, &results, &timing, agg, warnings)
}

fn report_from_results(
    tracker: &str,
    dataset: &str,
    results: &[SequenceResult],
    timing: &[Option<(usize, f64)>],
    agg: Aggregation,
    warnings: Vec<String>,
) -> Result<Report> {
    let all: Vec<&SequenceResult> = results.iter().collect();
    let curves = Curves::compute(&all, agg)?;
    let mut per_sequence = Vec::new();
    for (r, t) in results.iter().zip(timing) {
        let c = Curves::compute(&[r], Aggregation::Pooled)?;
        per_sequence.push(SequenceSummary {
            id: r.id.clone(),
            frames: r.frames,
            scored_frames: r.scored(),
            auc: c.success.auc,
            precision_at_20: c.precision_at_20(),
            fps: t.map(|(n, s)| n as f64 / s),
            attributes: r.attributes.clone(),
        });
    }
    let fps = if timing.iter().all(Option::is_some) {
        let (frames, seconds) = timing.iter().flatten().fold((0, 0.0), |(n, s), (fn_, fs)| (n + fn_, s + fs));
        Some(FpsStats {
            frames,
            seconds,
            fps: frames as f64 / seconds,
        })
    } else {
        None
    };
    let mut tags: Vec<&String> = results.iter().flat_map(|r| &r.attributes).collect();
    tags.sort();
    tags.dedup();
    let mut attributes = BTreeMap::new();
    for tag in tags {
        let slice = attribute_slice(results, tag);
        let c = Curves::compute(&slice, agg)?;
        attributes.insert(
            tag.clone(),
            SliceSummary {
                sequences: slice.iter().map(|r| r.id.clone()).collect(),
                auc: c.success.auc,
                precision_at_20: c.precision_at_20(),
                curves: c,
            },
        );
    }
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        tracker: tracker.to_string(),
        dataset: dataset.to_string(),
        aggregation: agg,
        auc: curves.success.auc,
        precision_at_20: curves.precision_at_20(),
        curves,
        fps,
        per_sequence,
        attributes,
        warnings,
    })
}

/// Sequences carrying `tag`.
pub fn attribute_slice<'a>(results: &'a [SequenceResult], tag: &str) -> Vec<&'a SequenceResult> {
    results.iter().filter(|r| r.attributes.iter().any(|a| a == tag)).collect()
}

/// Track every sequence on up to `workers` threads. Failed sequences become
/// warnings. Output order follows sorted sequence ids.
pub fn track_all(model: &TsfModel, records: &[SequenceRecord], cfg: &TrackConfig, workers: usize) -> (Vec<TrackedSequence>, Vec<String>) {
    let mut ordered: Vec<&SequenceRecord> = records.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let slots: Vec<Mutex<Option<std::result::Result<TrackedSequence, String>>>> = ordered.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    let track_one = |rec: &SequenceRecord| -> Result<TrackedSequence> {
        let out = run_sequence(rec.frame_iter(), &rec.init_box()?, model, cfg)?;
        Ok(TrackedSequence::from_outputs(&rec.id, &out))
    };
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, ordered.len().max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("work counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(rec) = ordered.get(i) else { break };
                let r = track_one(rec).map_err(|e| format!("sequence {}: {e}", rec.id));
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    let mut tracked = Vec::new();
    let mut warnings = Vec::new();
    for slot in slots {
        match slot.into_inner().expect("result slot").expect("every sequence visited") {
            Ok(t) => tracked.push(t),
            Err(e) => warnings.push(e),
        }
    }
    (tracked, warnings)
}

/// Track and score a dataset in one pass.
pub fn ope_run(
    tracker: &str,
    dataset: &str,
    model: &TsfModel,
    records: &[SequenceRecord],
    cfg: &TrackConfig,
    agg: Aggregation,
    workers: usize,
) -> Result<(Report, Vec<TrackedSequence>)> {
    let (tracked, warnings) = track_all(model, records, cfg, workers);
    let mut report = evaluate(tracker, dataset, records, &tracked, agg)?;
    report.warnings.splice(0..0, warnings);
    Ok((report, tracked))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveKind {
    Success,
    Precision,
}

/// Write an SVG line plot with one series per `(label, curve)`.
pub fn plot_curves(path: &Path, title: &str, kind: CurveKind, series: &[(&str, &MetricCurve)]) -> Result<()> {
    use plotters::prelude::*;
    let err = |e: &dyn std::fmt::Display| TsfError::Plot(e.to_string());
    let (x_max, x_label) = match kind {
        CurveKind::Success => (1.0, "overlap threshold"),
        CurveKind::Precision => (50.0, "location error threshold (px)"),
    };
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0.0..x_max, 0.0..1.0)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(match kind {
            CurveKind::Success => "success rate",
            CurveKind::Precision => "precision",
        })
        .draw()
        .map_err(|e| err(&e))?;
    for (i, (label, c)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let legend = match kind {
            CurveKind::Success => format!("{label} [{:.3}]", c.auc),
            CurveKind::Precision => format!(
                "{label} [{:.3}]",
                c.value_at(PRECISION_PIXELS as f64).unwrap_or(0.0)
            ),
        };
        chart
            .draw_series(LineSeries::new(c.thresholds.iter().copied().zip(c.values.iter().copied()), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(legend)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

/// Success and precision plots for a report (overall and per attribute) into `dir`.
pub fn plot_report(dir: &Path, report: &Report) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let mut emit = |stem: &str, title: &str, c: &Curves| -> Result<()> {
        for (kind, name, curve) in [(CurveKind::Success, "success", &c.success), (CurveKind::Precision, "precision", &c.precision)] {
            let p = dir.join(format!("{stem}_{name}.svg"));
            plot_curves(&p, &format!("{name} plot: {title}"), kind, &[(&report.tracker, curve)])?;
            out.push(p);
        }
        Ok(())
    };
    emit("overall", &report.dataset, &report.curves)?;
    for (tag, s) in &report.attributes {
        emit(&format!("attr_{tag}"), tag, &s.curves)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub tracker: String,
    pub dataset: String,
    pub auc: f64,
    pub precision_at_20: f64,
    pub fps: Option<f64>,
}

/// Rows sorted by AUC, best first; ties keep tracker-name order.
pub fn compare_report(reports: &[Report]) -> Result<Vec<ComparisonRow>> {
    if reports.is_empty() {
        return Err(TsfError::InvalidArgument("nothing to compare".into()));
    }
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            tracker: r.tracker.clone(),
            dataset: r.dataset.clone(),
            auc: r.auc,
            precision_at_20: r.precision_at_20,
            fps: r.fps.as_ref().map(|f| f.fps),
        })
        .collect();
    rows.sort_by(|a, b| b.auc.total_cmp(&a.auc).then_with(|| a.tracker.cmp(&b.tracker)));
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| TsfError::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits UTF-8"))
}

pub fn parse_comparison_csv(text: &str) -> Result<Vec<ComparisonRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.tracker.len()).max().unwrap_or(0).max(7);
    let mut s = format!("{:<width$}  {:>6}  {:>6}  {:>8}\n", "tracker", "AUC", "P@20", "FPS");
    for r in rows {
        let fps = r.fps.map_or("-".to_string(), |f| format!("{f:.1}"));
        let _ = writeln!(s, "{:<width$}  {:>6.3}  {:>6.3}  {:>8}", r.tracker, r.auc, r.precision_at_20, fps);
    }
    s
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use tsf_core::backbone::BackboneConfig;
use tsf_core::data_io::{
    format_results, generate_synthetic, load_dataset, parse_results, read_text, synthetic_suite, write_atomic, write_sequence,
    DatasetKind, ScoreSidecar, SequenceRecord, SuiteProfile,
};
use tsf_core::evaluation::{
    compare_report, comparison_csv, comparison_table, evaluate, plot_curves, plot_report, Aggregation, CurveKind, Report,
    TrackedSequence,
};
use tsf_core::model::{hex, TsfModel};
use tsf_core::template_update::MuWeights;
use tsf_core::tracker::{bank_checksums, run_sequence_with, TrackConfig};
use tsf_core::training::{harvest_mu_tuples, sample_pairs, train_stage1, train_stage2, write_log_csv, EpochLog};

use crate::config::{parse_with_defaults, RunConfig, SynthFile};
use crate::{CliError, CompareArgs, DatasetArgs, EvalArgs, SynthArgs, TrackArgs, TrainArgs};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub weight_checksum: Option<String>,
    pub input_sha256: Option<String>,
    pub started_unix: f64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: impl Serialize) -> Result<Self, CliError> {
        Ok(RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config).map_err(|e| CliError::Usage(e.to_string()))?,
            seed: None,
            weight_checksum: None,
            input_sha256: None,
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
            outputs: Vec::new(),
        })
    }

    /// Written once, atomically, before any result file.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| CliError::Data(e.to_string()))?;
        write_atomic(&dir.join(MANIFEST), &bytes)?;
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

pub fn dataset_kind(s: &str) -> Result<DatasetKind, CliError> {
    s.parse::<DatasetKind>().map_err(|e| CliError::Usage(e.to_string()))
}

pub fn load_records(args: &DatasetArgs) -> Result<Vec<SequenceRecord>, CliError> {
    let load = load_dataset(&args.dataset, dataset_kind(&args.kind)?)?;
    for w in &load.warnings {
        warn!("{w}");
    }
    Ok(load.records)
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let text = fs::read(&a.spec).map_err(|e| CliError::Data(format!("{}: {e}", a.spec.display())))?;
    let file: SynthFile = parse_with_defaults(&String::from_utf8_lossy(&text), &a.spec.display().to_string())?;
    let specs = file.specs();
    if specs.is_empty() {
        return Err(CliError::Usage(format!("{}: no [suite] and no [[sequence]] entries", a.spec.display())));
    }
    create_dir(&a.out)?;
    let mut m = RunManifest::new("synth", &file)?;
    m.input_sha256 = Some(sha256_hex(&text));
    m.outputs = specs.iter().map(|s| s.id.clone()).collect();
    m.write(&a.out)?;
    for spec in &specs {
        let rec = generate_synthetic(spec)?;
        write_sequence(&a.out, &rec)?;
        info!("wrote {} ({} frames)", rec.id, rec.len());
    }
    Ok(())
}

/// Training sequences: the configured dataset, or a generated suite.
fn training_records(cfg: &RunConfig) -> Result<Vec<SequenceRecord>, CliError> {
    match &cfg.data.root {
        Some(root) => {
            let load = load_dataset(root, cfg.data.kind)?;
            for w in &load.warnings {
                warn!("{w}");
            }
            Ok(load.records)
        }
        None => synthetic_suite(SuiteProfile::Train, cfg.data.synthetic_count, cfg.data.synthetic_length, cfg.data.synthetic_seed)
            .iter()
            .map(|s| generate_synthetic(s).map_err(CliError::from))
            .collect(),
    }
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    if a.stage != 1 && a.stage != 2 {
        return Err(CliError::Usage(format!("--stage must be 1 or 2, got {}", a.stage)));
    }
    let mut model = if a.stage == 2 {
        let ck = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::Usage("stage 2 needs --checkpoint pointing at a stage-1 model.ckpt".into()))?;
        if !ck.is_file() {
            return Err(CliError::Data(format!(
                "stage-1 checkpoint {} not found; run `tsf train --stage 1` first",
                ck.display()
            )));
        }
        TsfModel::load(ck)?
    } else {
        TsfModel::new(BackboneConfig::for_variant(cfg.variant), cfg.seed)?
    };
    let records = training_records(&cfg)?;
    if records.is_empty() {
        return Err(CliError::Data("no training sequences".into()));
    }
    create_dir(&a.out)?;
    let mut m = RunManifest::new(&format!("train --stage {}", a.stage), &cfg)?;
    m.seed = Some(cfg.seed);
    m.outputs = vec!["model.ckpt".into(), "loss.csv".into()];
    m.write(&a.out)?;
    let logs: Vec<EpochLog> = if a.stage == 1 {
        let pairs = sample_pairs(&records, cfg.data.pairs, &cfg.sampling, cfg.stage1.seed)?;
        info!("stage 1: {} pairs from {} sequences", pairs.len(), records.len());
        train_stage1(&mut model, &pairs, &cfg.stage1, |_| {})?
    } else {
        let k = cfg.data.stage2_sequences.min(records.len());
        let tuples = harvest_mu_tuples(&model, &records[records.len() - k..], &cfg.track)?;
        info!("stage 2: {} tuples from {k} sequences", tuples.len());
        let mut mu = MuWeights::training_init(model.channels(), &mut ChaCha8Rng::seed_from_u64(cfg.stage2.seed));
        let logs = train_stage2(&mut mu, &tuples, &cfg.stage2, |_| {})?;
        model.mu = mu;
        logs
    };
    write_log_csv(&a.out.join("loss.csv"), &logs)?;
    model.save(&a.out.join("model.ckpt"))?;
    info!("checkpoint {} (sha256 {})", a.out.join("model.ckpt").display(), model.checksum());
    Ok(())
}

/// Tracking configuration after ablation flags.
pub fn track_config(a: &TrackArgs) -> Result<TrackConfig, CliError> {
    let mut t = RunConfig::load(a.config.as_deref())?.track;
    if a.no_update {
        t.update_templates = false;
        t.twofold = false;
    } else if a.tsf_only {
        t.update_templates = false;
        t.twofold = true;
    } else if a.mu_only {
        t.update_templates = true;
        t.twofold = false;
    }
    t.validate()?;
    Ok(t)
}

/// `f` over `items` on up to `workers` scoped threads; results keep input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("counter");
                    *n += 1;
                    *n - 1
                };
                let Some(item) = items.get(i) else { break };
                *slots[i].lock().expect("slot") = Some(f(item));
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().expect("slot").expect("filled")).collect()
}

#[derive(Serialize)]
struct BankDump<'a> {
    frame: usize,
    z_in: &'a str,
    z_ac: &'a str,
    z_cu: &'a str,
}

pub fn track(a: &TrackArgs) -> Result<(), CliError> {
    let cfg = track_config(a)?;
    let model = TsfModel::load(&a.checkpoint)?;
    let mut records = load_records(&a.data)?;
    records.sort_by(|x, y| x.id.cmp(&y.id));
    create_dir(&a.out)?;
    if a.debug_dump {
        create_dir(&a.out.join("debug"))?;
    }
    let mut m = RunManifest::new("track", &cfg)?;
    m.weight_checksum = Some(model.checksum());
    m.outputs = records.iter().flat_map(|r| [format!("{}.txt", r.id), format!("{}.json", r.id)]).collect();
    m.write(&a.out)?;

    let outcomes = parallel_map(&records, a.workers, |rec| -> Result<(usize, f64), CliError> {
        let mut dump = String::new();
        let out = run_sequence_with(rec.frame_iter(), &rec.init_box()?, &model, &cfg, |s| {
            if a.debug_dump {
                let [z_in, z_ac, z_cu] = bank_checksums(&s.bank);
                let line = serde_json::to_string(&BankDump {
                    frame: s.frame_index,
                    z_in: &z_in,
                    z_ac: &z_ac,
                    z_cu: &z_cu,
                })
                .expect("plain struct");
                dump.push_str(&line);
                dump.push('\n');
            }
        })?;
        let t = TrackedSequence::from_outputs(&rec.id, &out);
        let secs = t.total_seconds();
        let sidecar = ScoreSidecar {
            sequence: rec.id.clone(),
            frames: t.boxes.len(),
            scores: t.scores.clone(),
            seconds: t.seconds.clone(),
            fps: t.boxes.len() as f64 / secs.max(f64::MIN_POSITIVE),
        };
        write_atomic(&a.out.join(format!("{}.txt", rec.id)), format_results(&t.boxes).as_bytes())?;
        let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| CliError::Data(e.to_string()))?;
        write_atomic(&a.out.join(format!("{}.json", rec.id)), &json)?;
        if a.debug_dump {
            write_atomic(&a.out.join("debug").join(format!("{}.jsonl", rec.id)), dump.as_bytes())?;
        }
        Ok((t.boxes.len(), secs))
    });
    let (mut frames, mut secs, mut failures) = (0, 0.0, Vec::new());
    for (rec, o) in records.iter().zip(outcomes) {
        match o {
            Ok((n, s)) => {
                frames += n;
                secs += s;
            }
            Err(e) => {
                warn!("sequence {}: {e}", rec.id);
                failures.push(e);
            }
        }
    }
    info!("tracked {frames} frames in {secs:.2}s ({:.1} fps)", frames as f64 / secs.max(f64::MIN_POSITIVE));
    match failures.into_iter().next() {
        // numerical failures abort; data problems in individual sequences are warnings
        Some(e @ CliError::Numerical(_)) => Err(e),
        _ if frames == 0 && !records.is_empty() => Err(CliError::Data("no sequence could be tracked".into())),
        _ => Ok(()),
    }
}

/// Result files in `dir`: `<id>.txt` boxes with optional `<id>.json` timing sidecars.
pub fn read_results(dir: &Path) -> Result<Vec<TrackedSequence>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("results directory {} does not exist", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let boxes = parse_results(&read_text(&p)?, &p.display().to_string())?;
        let side = p.with_extension("json");
        let (scores, seconds) = match fs::read_to_string(&side) {
            Ok(text) => {
                let s: ScoreSidecar = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", side.display())))?;
                (s.scores, s.seconds)
            }
            Err(_) => (Vec::new(), Vec::new()),
        };
        out.push(TrackedSequence { id, boxes, scores, seconds });
    }
    Ok(out)
}

fn dir_name(p: &Path) -> String {
    p.canonicalize()
        .ok()
        .and_then(|c| c.file_name().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| p.display().to_string())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let records = load_records(&a.data)?;
    let tracked = read_results(&a.results)?;
    let agg = if a.per_sequence { Aggregation::PerSequence } else { Aggregation::Pooled };
    let tracker = a.tracker.clone().unwrap_or_else(|| dir_name(&a.results));
    let report = evaluate(&tracker, &dir_name(&a.data.dataset), &records, &tracked, agg)?;
    for w in &report.warnings {
        warn!("{w}");
    }
    create_dir(&a.out)?;
    let mut m = RunManifest::new("eval", BTreeMap::from([("aggregation", format!("{agg:?}")), ("tracker", tracker.clone())]))?;
    m.outputs = vec!["report.json".into()];
    if a.plots {
        m.outputs.push("plots/".into());
    }
    m.write(&a.out)?;
    write_atomic(&a.out.join("report.json"), report.to_json()?.as_bytes())?;
    if a.plots {
        plot_report(&a.out.join("plots"), &report)?;
    }
    println!("{tracker}: AUC {:.4}  precision@20 {:.4}", report.auc, report.precision_at_20);
    Ok(())
}

pub fn compare(a: &CompareArgs) -> Result<(), CliError> {
    let reports = a
        .reports
        .iter()
        .map(|p| Report::from_json(&read_text(p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = compare_report(&reports)?;
    create_dir(&a.out)?;
    let mut m = RunManifest::new("compare", &a.reports)?;
    m.outputs = ["comparison.csv", "comparison.txt", "success.svg", "precision.svg"].map(String::from).to_vec();
    m.write(&a.out)?;
    write_atomic(&a.out.join("comparison.csv"), comparison_csv(&rows)?.as_bytes())?;
    let table = comparison_table(&rows);
    write_atomic(&a.out.join("comparison.txt"), table.as_bytes())?;
    let success: Vec<(&str, _)> = reports.iter().map(|r| (r.tracker.as_str(), &r.curves.success)).collect();
    let precision: Vec<(&str, _)> = reports.iter().map(|r| (r.tracker.as_str(), &r.curves.precision)).collect();
    plot_curves(&a.out.join("success.svg"), "success plot", CurveKind::Success, &success)?;
    plot_curves(&a.out.join("precision.svg"), "precision plot", CurveKind::Precision, &precision)?;
    print!("{table}");
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};
use trajspec::changepoint;
use trajspec::gram::{self, DotMatrix, DotSource};
use trajspec::rng;
use trajspec::sketch::{self, ProjectOutcome, SketchConfig};
use trajspec::spectral::{self, ObservableSeries};
use trajspec::store::{self, Store};
use trajspec::synth::{self, Trajectory};
use trajspec::timeseries::{self, MetricSeries};

use crate::config::{config_error, RunConfig};

/// Soft conditions a command ran into; they only affect the exit code.
#[derive(Debug, Default)]
pub struct Outcome {
    pub degenerate_windows: usize,
    pub no_detection: bool,
}

impl Outcome {
    fn merge(&mut self, other: Outcome) {
        self.degenerate_windows += other.degenerate_windows;
        self.no_detection |= other.no_detection;
    }
}

#[derive(Serialize)]
struct Envelope<'a> {
    command: &'a str,
    config: &'a RunConfig,
    results: &'a Value,
}

/// Writes `<run>/<command>.json` embedding the resolved configuration.
fn write_report(cfg: &RunConfig, command: &str, results: &Value) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!("{}.json", command.replace('-', "_")));
    let mut text = serde_json::to_string_pretty(&Envelope {
        command,
        config: cfg,
        results,
    })?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(path)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn open_store(cfg: &RunConfig) -> Result<Store> {
    Ok(Store::open(&cfg.store_dir()?)?)
}

fn sketch_config(cfg: &RunConfig) -> SketchConfig {
    SketchConfig::new(cfg.sketch_d(), cfg.sketch.seed)
}

fn primary_source(cfg: &RunConfig) -> DotSource {
    if cfg.sketch.enabled {
        DotSource::Sketched {
            fingerprint: sketch_config(cfg).fingerprint(),
        }
    } else {
        DotSource::Full
    }
}

fn primary_fingerprint(cfg: &RunConfig, store: &Store) -> String {
    let store_fp = store.manifest().fingerprint();
    if cfg.sketch.enabled {
        format!("{store_fp}:{}", sketch_config(cfg).fingerprint())
    } else {
        store_fp
    }
}

fn group_fingerprint(cfg: &RunConfig, store: &Store) -> String {
    let rules: Vec<String> = cfg
        .groups
        .iter()
        .map(|g| format!("{}={}", g.name, g.pattern))
        .collect();
    format!("{}:groups[{}]", store.manifest().fingerprint(), rules.join(";"))
}

fn group_rules(cfg: &RunConfig) -> Vec<(String, String)> {
    cfg.groups
        .iter()
        .map(|g| (g.name.clone(), g.pattern.clone()))
        .collect()
}

fn dots_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir().join("dots")
}

pub fn cmd_validate_store(cfg: &RunConfig) -> Result<(Value, Outcome)> {
    let store = open_store(cfg)?;
    let mut stream = store.delta_stream(gram::STREAM_CHUNK)?;
    let mut chunk = vec![Vec::new(); stream.n_deltas()];
    while stream.next_chunk(&mut chunk)?.is_some() {}
    let m = store.manifest();
    let results = json!({
        "param_count": m.param_count(),
        "checkpoints": m.steps.len(),
        "steps": m.step_indices(),
        "keys": m.key_order.len(),
        "fingerprint": m.fingerprint(),
        "checksums_verified": true,
    });
    write_report(cfg, "validate-store", &results)?;
    Ok((results, Outcome::default()))
}

fn ensure_sketches(cfg: &RunConfig, store: &Store, overwrite: bool) -> Result<ProjectOutcome> {
    let dir = cfg.run_dir().join("sketches");
    let started = Instant::now();
    let outcome = sketch::project_store(store, &sketch_config(cfg), &dir, overwrite)?;
    match &outcome {
        ProjectOutcome::Reused(_) => info!("sketch cache hit in {}", dir.display()),
        ProjectOutcome::Written(s) => info!(
            "projected {} deltas of p = {} to d = {} in {:.1?}",
            s.len(),
            store.param_count(),
            cfg.sketch_d(),
            started.elapsed()
        ),
    }
    Ok(outcome)
}

pub fn cmd_sketch(cfg: &RunConfig, overwrite: bool) -> Result<(Value, Outcome)> {
    let store = open_store(cfg)?;
    let outcome = ensure_sketches(cfg, &store, overwrite)?;
    let sc = sketch_config(cfg);
    let results = json!({
        "d": sc.d,
        "seed": sc.seed,
        "generator": sketch::GENERATOR_ID,
        "config_fingerprint": sc.fingerprint(),
        "source_fingerprint": store.manifest().fingerprint(),
        "sketches": outcome.sketches().len(),
    });
    write_report(cfg, "sketch", &results)?;
    Ok((results, Outcome::default()))
}

pub fn cmd_dots(cfg: &RunConfig, overwrite: bool) -> Result<(Value, Outcome)> {
    let store = open_store(cfg)?;
    let dir = dots_dir(cfg);
    let source = primary_source(cfg);
    let primary_fp = primary_fingerprint(cfg, &store);
    let group_fp = group_fingerprint(cfg, &store);

    let cached = |src: &DotSource, fp: &str| {
        DotMatrix::peek_header(&dir, src).is_some_and(|h| h.input_fingerprint == fp)
    };
    let (spans, warnings) = store::group_spans(store.manifest(), &group_rules(cfg))?;
    for w in &warnings {
        warn!("{w}");
    }
    let spans = if cfg.groups.is_empty() { Vec::new() } else { spans };
    let primary_hit = cached(&source, &primary_fp);
    let groups_hit = spans.iter().all(|s| {
        cached(
            &DotSource::Group {
                name: s.group_name.clone(),
            },
            &group_fp,
        )
    });
    if primary_hit && groups_hit {
        info!("dots cache hit in {}; nothing to do", dir.display());
    } else {
        let started = Instant::now();
        if cfg.sketch.enabled && !primary_hit {
            let sketches = ensure_sketches(cfg, &store, overwrite)?;
            sketch::sketch_dot_matrix(sketches.sketches())?.save(&dir, &primary_fp)?;
        }
        let need_full = !cfg.sketch.enabled && !primary_hit;
        let spans_needed = if groups_hit { Vec::new() } else { spans.clone() };
        if need_full || !spans_needed.is_empty() {
            let (full, groups) = gram::store_dot_matrices(&store, &spans_needed, need_full)?;
            if let Some(full) = full {
                full.save(&dir, &primary_fp)?;
            }
            for g in groups {
                g.save(&dir, &group_fp)?;
            }
        }
        info!(
            "dot matrices for N = {}, p = {} computed in {:.1?}",
            store.manifest().steps.len().saturating_sub(1),
            store.param_count(),
            started.elapsed()
        );
    }

    let mut matrices = Vec::new();
    let mut sources = vec![source];
    sources.extend(spans.iter().map(|s| DotSource::Group {
        name: s.group_name.clone(),
    }));
    for src in &sources {
        let (d, header) = DotMatrix::load(&dir, src)?;
        matrices.push(json!({
            "source": src.tag(),
            "n": d.n,
            "input_fingerprint": header.input_fingerprint,
            "payload_sha256": header.payload_sha256,
        }));
    }
    let results = json!({
        "n": store.manifest().steps.len().saturating_sub(1),
        "p": store.param_count(),
        "store_fingerprint": store.manifest().fingerprint(),
        "group_warnings": warnings,
        "matrices": matrices,
    });
    write_report(cfg, "dots", &results)?;
    Ok((results, Outcome::default()))
}

/// Persisted dot matrices of the run: the primary one and one per group.
struct Dots {
    primary: DotMatrix,
    groups: Vec<DotMatrix>,
    p: usize,
}

fn load_dots(cfg: &RunConfig) -> Result<Dots> {
    let store = open_store(cfg)?;
    let dir = dots_dir(cfg);
    let source = primary_source(cfg);
    let missing = |src: &DotSource| {
        anyhow!(
            "no `{}` dot matrix in {}; run `trajspec dots` with the same configuration first",
            src.tag(),
            dir.display()
        )
    };
    let load = |src: &DotSource, fp: &str| -> Result<DotMatrix> {
        let header = DotMatrix::peek_header(&dir, src).ok_or_else(|| missing(src))?;
        if header.input_fingerprint != fp {
            return Err(anyhow!(
                "the `{}` dot matrix in {} was computed from different inputs; rerun `trajspec dots`",
                src.tag(),
                dir.display()
            ));
        }
        Ok(DotMatrix::load(&dir, src)?.0)
    };
    let primary = load(&source, &primary_fingerprint(cfg, &store))?;
    let group_fp = group_fingerprint(cfg, &store);
    let groups = if cfg.groups.is_empty() {
        Vec::new()
    } else {
        let (spans, _) = store::group_spans(store.manifest(), &group_rules(cfg))?;
        spans
            .iter()
            .map(|s| {
                load(
                    &DotSource::Group {
                        name: s.group_name.clone(),
                    },
                    &group_fp,
                )
            })
            .collect::<Result<_>>()?
    };
    let p = if cfg.sketch.enabled {
        cfg.sketch_d()
    } else {
        store.param_count()
    };
    Ok(Dots { primary, groups, p })
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<(Value, Outcome)> {
    let dots = load_dots(cfg)?;
    let dir = cfg.run_dir();
    let mut outcome = Outcome::default();
    let mut per_window = Vec::new();
    for &w in &cfg.windows {
        let series = spectral::rolling_series(&dots.primary, w)?;
        let csv = dir.join(format!("series_W{w}.csv"));
        write_text(&csv, &series.to_csv())?;

        let p_null = dots.p.min(cfg.stats.null_max_p).max(w);
        let mp = spectral::mp_null(
            p_null,
            w,
            cfg.stats.null_trials,
            rng::derive_seed(cfg.stats.null_seed, w as u64),
        )?;
        let mut windows = Vec::new();
        let mut degenerate = 0;
        for t0 in 0..series.len() {
            let summary = spectral::window_summary(&dots.primary, t0, w)?;
            degenerate += summary.degenerate as usize;
            let bbp = spectral::bbp_excess(&summary, &mp)?;
            let split = if w % 2 == 0 && w >= 6 {
                Some(spectral::split_half(&dots.primary, t0, w)?)
            } else {
                None
            };
            windows.push(json!({
                "step": series.steps[t0],
                "summary": summary,
                "bbp": bbp,
                "split_half": split,
            }));
        }
        outcome.degenerate_windows += degenerate;

        let mut groups = Vec::new();
        for g in &dots.groups {
            let gs = spectral::rolling_series(g, w)?;
            let tag = g.source.tag();
            let file = format!("series_W{w}_{tag}.csv");
            write_text(&dir.join(&file), &gs.to_csv())?;
            groups.push(json!({
                "group": tag,
                "series_file": file,
                "degenerate_windows": gs.degenerate.iter().filter(|d| **d).count(),
                "mean_gap_ratio": mean_defined(&gs.gap_ratio),
            }));
        }
        per_window.push(json!({
            "w": w,
            "source": dots.primary.source.tag(),
            "series_file": format!("series_W{w}.csv"),
            "null": mp,
            "cv_null_at_p": mp.cv_null_at(dots.p),
            "degenerate_windows": degenerate,
            "windows": windows,
            "groups": groups,
        }));
    }
    let results = json!({ "p": dots.p, "per_window": per_window });
    write_report(cfg, "analyze", &results)?;
    Ok((results, outcome))
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| trajspec::stats::mean(&d))
}

/// A defined-only observable track as a step-indexed series.
fn track(name: &str, steps: &[u64], values: &[Option<f64>]) -> Result<MetricSeries> {
    let (s, v): (Vec<u64>, Vec<f64>) = steps
        .iter()
        .zip(values)
        .filter_map(|(s, v)| v.map(|v| (*s, v)))
        .unzip();
    Ok(MetricSeries::new(name, s, v)?)
}

fn gap_track(series: &ObservableSeries) -> Result<MetricSeries> {
    track("gap_ratio", &series.steps, &series.gap_ratio)
}

fn load_loss(cfg: &RunConfig) -> Result<MetricSeries> {
    Ok(MetricSeries::read_csv(&cfg.loss_csv()?, "loss")?)
}

fn series_for(dots: &Dots, w: usize) -> Result<ObservableSeries> {
    Ok(spectral::rolling_series(&dots.primary, w).with_context(|| format!("window {w}"))?)
}

pub fn cmd_correlate(cfg: &RunConfig) -> Result<(Value, Outcome)> {
    let dots = load_dots(cfg)?;
    let loss = load_loss(cfg)?;
    let mut out = Vec::new();
    for &w in &cfg.windows {
        let series = series_for(&dots, w)?;
        let joined = timeseries::align(&gap_track(&series)?, &loss)?;
        let x = timeseries::prepare(&joined.a)?;
        let y = timeseries::prepare(&joined.b)?;
        let max_lag = cfg
            .stats
            .max_lag
            .unwrap_or_else(|| timeseries::default_max_lag(x.len()));
        let scan = timeseries::xcorr_lagscan(&x, &y, max_lag)?;
        let sliding = timeseries::sliding_corr(&x, &y, cfg.stats.sliding_window)?;
        let ranking = timeseries::rank_ratios(&series, &loss, cfg.stats.max_lag)?;
        out.push(json!({
            "w": w,
            "n_points": x.len(),
            "steps": joined.steps,
            "gap_lagscan": scan,
            "sliding": sliding,
            "ranking": ranking,
        }));
    }
    let results = Value::Array(out);
    write_report(cfg, "correlate", &results)?;
    Ok((results, Outcome::default()))
}

/// Prepared (detrended, z-scored) observables and loss on common steps.
fn prepared_observables(series: &ObservableSeries, loss: &MetricSeries) -> Result<(Vec<(String, Vec<f64>)>, Vec<f64>)> {
    let k95: Vec<Option<f64>> = series.k95.iter().map(|k| Some(*k as f64)).collect();
    let drift: Vec<Option<f64>> = series.drift_speed.iter().map(|v| Some(*v)).collect();
    let total: Vec<Option<f64>> = series.total_variance.iter().map(|v| Some(*v)).collect();
    let tracks = [
        ("gap_ratio", &series.gap_ratio),
        ("edge_strength", &series.edge_strength),
        ("k95", &k95),
        ("drift_speed", &drift),
        ("total_variance", &total),
    ];
    let steps: Vec<u64> = loss
        .steps
        .iter()
        .copied()
        .filter(|s| {
            series
                .steps
                .iter()
                .position(|x| x == s)
                .is_some_and(|i| tracks.iter().all(|(_, t)| t[i].is_some()))
        })
        .collect();
    let pick = |t: &[Option<f64>]| -> Vec<f64> {
        steps
            .iter()
            .map(|s| {
                let i = series.steps.iter().position(|x| x == s).expect("step present");
                t[i].expect("defined")
            })
            .collect()
    };
    let obs = tracks
        .iter()
        .map(|(name, t)| Ok((name.to_string(), timeseries::prepare(&pick(t))?)))
        .collect::<Result<Vec<_>>>()?;
    let loss_vals: Vec<f64> = steps
        .iter()
        .map(|s| loss.values[loss.steps.binary_search(s).expect("loss step")])
        .collect();
    Ok((obs, timeseries::prepare(&loss_vals)?))
}

fn granger_or_error(r: trajspec::Result<timeseries::GrangerResult>) -> Value {
    match r {
        Ok(g) => serde_json::to_value(g).expect("serializable"),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

pub fn cmd_granger(cfg: &RunConfig) -> Result<(Value, Outcome)> {
    let dots = load_dots(cfg)?;
    let loss = load_loss(cfg)?;
    let lags = cfg.stats.granger_lags;
    let mut outcome = Outcome::default();
    let mut out = Vec::new();
    for &w in &cfg.windows {
        let series = series_for(&dots, w)?;
        let (obs, y) = prepared_observables(&series, &loss)?;
        let gap = &obs[0].1;
        let edge = &obs[1].1;
        let forward = timeseries::granger(gap, &y, lags).map(|g| g.named("gap_ratio", "loss"));
        let reverse = timeseries::granger(&y, gap, lags).map(|g| g.named("loss", "gap_ratio"));
        let resid = timeseries::residualized_granger(edge, &y, cfg.stats.resid_lags, lags)
            .map(|g| g.named("edge_strength|loss", "loss"));
        let multi = timeseries::granger_multivariate(&obs, &y, lags);
        for r in [&forward, &reverse, &resid, &multi] {
            if let Ok(g) = r {
                outcome.degenerate_windows += g.degenerate as usize;
            }
        }
        out.push(json!({
            "w": w,
            "n_points": y.len(),
            "lags": lags,
            "gap_to_loss": granger_or_error(forward),
            "loss_to_gap": granger_or_error(reverse),
            "residualized": granger_or_error(resid),
            "multivariate": granger_or_error(multi),
        }));
    }
    let results = Value::Array(out);
    write_report(cfg, "granger", &results)?;
    Ok((results, outcome))
}

pub fn cmd_segment(cfg: &RunConfig) -> Result<(Value, Outcome)> {
    let dots = load_dots(cfg)?;
    let loss = match cfg.loss_path() {
        Some(_) => Some(load_loss(cfg)?),
        None => None,
    };
    let mut out = Vec::new();
    for &w in &cfg.windows {
        let series = series_for(&dots, w)?;
        let gap = gap_track(&series)?;
        let (steps, raw, paired) = match &loss {
            Some(loss) => {
                let j = timeseries::align(&gap, loss)?;
                let x = timeseries::prepare(&j.a)?;
                let y = timeseries::prepare(&j.b)?;
                (j.steps, j.a, Some((x, y)))
            }
            None => (gap.steps.clone(), gap.values.clone(), None),
        };
        let mut methods = Vec::new();
        for &method in &cfg.stats.segmentation {
            let seg = timeseries::segment_phases(&raw, method)?;
            let corr = match &paired {
                Some((x, y)) => Some(timeseries::phase_corr(x, y, &seg)?),
                None => None,
            };
            methods.push(json!({
                "method": method.name(),
                "segmentation": seg,
                "collapse_onset_step": seg.collapse_onset.map(|i| steps[i]),
                "phase_correlation": corr,
            }));
        }
        out.push(json!({ "w": w, "steps": steps, "methods": methods }));
    }
    let results = Value::Array(out);
    write_report(cfg, "segment", &results)?;
    Ok((results, Outcome::default()))
}

pub fn cmd_detect_shift(cfg: &RunConfig) -> Result<(Value, Outcome)> {
    let dots = load_dots(cfg)?;
    let mut outcome = Outcome::default();
    let mut out = Vec::new();
    let mut any_detection = false;
    for &w in &cfg.windows {
        let series = series_for(&dots, w)?;
        let gap = gap_track(&series)?;
        let mut detections = Vec::new();
        for &method in &cfg.stats.shift {
            let det = changepoint::detect(&gap.values, &gap.steps, method);
            let entry = match det {
                Ok(det) => {
                    any_detection |= det.detected_step.is_some();
                    let error = cfg
                        .stats
                        .true_shift_step
                        .and_then(|s| changepoint::score_detection(&det, s));
                    json!({ "method": method.name(), "detection": det, "error_steps": error })
                }
                Err(e) => json!({ "method": method.name(), "error": e.to_string() }),
            };
            detections.push(entry);
        }
        out.push(json!({ "w": w, "detections": detections }));
    }
    outcome.no_detection = !any_detection;
    let results = Value::Array(out);
    write_report(cfg, "detect-shift", &results)?;
    Ok((results, outcome))
}

/// Full pipeline: dots, analysis, and with a loss series the coupling
/// battery and shift detection, gathered in one report.
pub fn cmd_report(cfg: &RunConfig, overwrite: bool) -> Result<(Value, Outcome)> {
    let mut outcome = Outcome::default();
    let mut sections = serde_json::Map::new();
    let mut run = |name: &str, r: Result<(Value, Outcome)>| -> Result<()> {
        let (v, o) = r?;
        outcome.merge(o);
        sections.insert(name.to_string(), v);
        Ok(())
    };
    run("dots", cmd_dots(cfg, overwrite))?;
    run("analyze", cmd_analyze(cfg))?;
    if cfg.loss_path().is_some() {
        run("correlate", cmd_correlate(cfg))?;
        run("granger", cmd_granger(cfg))?;
        run("segment", cmd_segment(cfg))?;
    }
    run("detect_shift", cmd_detect_shift(cfg))?;
    let results = Value::Object(sections);
    write_report(cfg, "report", &results)?;
    Ok((results, outcome))
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<(Value, Outcome)> {
    let settings = cfg
        .synth
        .as_ref()
        .ok_or_else(|| config_error("synth needs a [synth] section or --n/--p/--spikes flags"))?;
    let store_dir = cfg.store_path().expect("synth settings imply a store path");
    let started = Instant::now();
    let traj = Trajectory::new(&settings.plan, settings.n, settings.p, settings.seed)
        .map_err(|e| config_error(e.to_string()))?;
    let store = traj.write_store(&store_dir, settings.first_step, settings.stride, None)?;
    info!(
        "wrote N = {} deltas of p = {} to {} in {:.1?}",
        settings.n,
        settings.p,
        store_dir.display(),
        started.elapsed()
    );
    let mut truth = traj.ground_truth();
    let mut loss_file = None;
    if let Some(ls) = &settings.loss {
        let w = ls.window.unwrap_or(settings.plan.window);
        let (full, _) = gram::store_dot_matrices(&store, &[], true)?;
        let series = spectral::rolling_series(&full.expect("full matrix requested"), w)?;
        let (loss, coupling) =
            synth::gen_coupled_loss(&gap_track(&series)?, ls.lag, ls.sign, ls.noise_std, ls.seed)?;
        let path = cfg.loss_path().expect("loss settings imply a loss path");
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_text(&path, &loss.to_csv())?;
        truth.coupling = Some(coupling);
        loss_file = Some(path);
    }
    let truth_path = cfg.run_dir().join("ground_truth.json");
    let mut text = serde_json::to_string_pretty(&truth)?;
    text.push('\n');
    write_text(&truth_path, &text)?;
    let results = json!({
        "store_dir": store_dir,
        "store_fingerprint": store.manifest().fingerprint(),
        "loss_csv": loss_file,
        "shift_step": truth.shift_index.map(|i| settings.first_step + (i as u64 + 1) * settings.stride),
        "ground_truth": truth,
    });
    write_report(cfg, "synth", &results)?;
    Ok((results, Outcome::default()))
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use walkpilot_core::anchors::{read_anchors, write_anchors};
use walkpilot_core::pipeline::{
    self, anchor_baseline, evaluate, expand_samples, fit_anchors, is_holdout, recovery_split, rollout_config,
    rollout_many, summarize_rollouts, train_policy,
};
use walkpilot_core::policynet::PolicyNet;
use walkpilot_core::scenegen::{generate_scenario, read_bundle, write_bundle, ScenarioData};
use walkpilot_core::store::{provenance_counts, read_store, write_store};
use walkpilot_core::supervision::curve_to_text;

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ScenarioSplit {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    Regular,
    Recovery,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn bundle_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.txt").is_file())
        .collect();
    out.sort();
    if out.is_empty() {
        bail!("no scenario bundles under {}", dir.display());
    }
    Ok(out)
}

fn load_scenarios(dir: &Path, split: ScenarioSplit, holdout_every: usize) -> Result<Vec<ScenarioData>> {
    let dirs = bundle_dirs(dir)?;
    let mut out = Vec::new();
    for (i, d) in dirs.iter().enumerate() {
        let keep = match split {
            ScenarioSplit::All => true,
            ScenarioSplit::Test => is_holdout(i, holdout_every),
            ScenarioSplit::Train => !is_holdout(i, holdout_every),
        };
        if keep {
            out.push(read_bundle(d)?);
        }
    }
    Ok(out)
}

pub fn gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let n: usize = cfg.get("scenarios")?;
    let seed = cfg.seed()?;
    let difficulty: f64 = cfg.get("difficulty")?;
    let cam = cfg.camera()?.model();
    let expert = cfg.expert()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut summary = String::from("# scenario frames obstacles corridor_m\n");
    for i in 0..n {
        let data = generate_scenario(pipeline::scenario_seed(seed, i), difficulty, &cam, &expert)?;
        write_bundle(&data, &out.join(format!("scenario_{i:03}")))?;
        let w = &data.scenario.world;
        let _ = writeln!(
            summary,
            "{} {} {} {:.1}",
            data.id,
            data.frames.len(),
            w.obstacles.len(),
            w.corridor_length()
        );
        info!("scenario {}/{n} written", i + 1);
    }
    write(&out.join("scenarios.txt"), &summary)?;
    write(&out.join("config.txt"), &cfg.to_text())?;
    print!("{summary}");
    Ok(())
}

pub fn curate(cfg: &RunConfig, input: &Path, out: &Path, split: ScenarioSplit) -> Result<()> {
    let data = load_scenarios(input, split, cfg.get("holdout_every")?)?;
    let refs: Vec<&ScenarioData> = data.iter().collect();
    let (samples, report) = pipeline::curate_scenarios(&refs, &cfg.curation()?, cfg.seed()?)?;
    write_store(out, &samples)?;
    let table = report.to_table();
    write(&out.join("curation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn expand(cfg: &RunConfig, input: &Path, out: &Path, corrective: bool, relight: bool) -> Result<()> {
    let samples = read_store(input)?;
    let cc = cfg.corrective()?;
    let rc = cfg.relight()?;
    let (expanded, report) = expand_samples(
        &samples,
        corrective.then_some(&cc),
        relight.then_some(&rc),
        cfg.seed()?,
    )?;
    write_store(out, &expanded)?;
    println!(
        "originals {} corrective {} relit {} low_coverage {}",
        report.originals, report.corrective, report.relit, report.low_coverage
    );
    for (k, v) in provenance_counts(&expanded) {
        println!("provenance {k} {v}");
    }
    Ok(())
}

pub fn anchors(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let samples = read_store(input)?;
    let sets = fit_anchors(&samples, cfg.get("m")?, cfg.seed()?, cfg.get("kmeans_iters")?)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_anchors(&sets, out)?;
    for s in &sets {
        println!("horizon {} length {} anchors {}", s.horizon_index, s.horizon_len, s.m());
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, input: &Path, anchors: &Path, out: &Path) -> Result<()> {
    let samples = read_store(input)?;
    let Some(first) = samples.first() else {
        bail!("sample store {} is empty", input.display());
    };
    let sets = read_anchors(anchors)?;
    let mut policy = cfg.policy(first.frames[0].width)?;
    // The anchor file fixes the mode count.
    policy.m = sets[0].m();
    let (net, curve) = train_policy(&policy, &cfg.train()?, &samples, &sets)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    net.save(out)?;
    let text = curve_to_text(&curve);
    write(&out.with_extension("curve.txt"), &text)?;
    write(&out.with_extension("run.txt"), &cfg.to_text())?;
    print!("{text}");
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    anchors: &Path,
    input: &Path,
    split: EvalSplit,
    out: Option<&Path>,
    baseline: bool,
) -> Result<()> {
    let net = PolicyNet::load(checkpoint)?;
    let sets = read_anchors(anchors)?;
    let mut samples = read_store(input)?;
    if split == EvalSplit::Recovery {
        samples = recovery_split(&samples, &cfg.corrective()?, cfg.seed()?)?;
    }
    if samples.is_empty() {
        bail!("no samples to evaluate");
    }
    let ec = cfg.eval()?;
    let report = evaluate(&net, &sets, &samples, &ec)?;
    let split_name = match split {
        EvalSplit::Regular => "regular",
        EvalSplit::Recovery => "recovery",
    };
    let mut text = format!("split={split_name} samples={} {}\n", report.samples, report.to_line());
    if baseline {
        let b = anchor_baseline(&sets, &samples, &ec)?;
        let _ = writeln!(text, "split={split_name}-anchors samples={} {}", b.samples, b.to_line());
    }
    if let Some(p) = out {
        write(p, &text)?;
    }
    print!("{}", report.to_table());
    Ok(())
}

pub fn rollout(
    cfg: &RunConfig,
    checkpoint: &Path,
    anchors: &Path,
    input: &Path,
    split: ScenarioSplit,
    out: Option<&Path>,
) -> Result<()> {
    let net = PolicyNet::load(checkpoint)?;
    let sets = read_anchors(anchors)?;
    let data = load_scenarios(input, split, cfg.get("holdout_every")?)?;
    let refs: Vec<&ScenarioData> = data.iter().collect();
    let rc = cfg.rollout(rollout_config(&net.cfg))?;
    let stats = rollout_many(&net, &sets, &refs, &rc)?;
    let mut text = String::from("# scenario max_lateral mean_lateral goal_reached steps\n");
    for (d, s) in data.iter().zip(&stats) {
        let _ = writeln!(
            text,
            "{} {:.4} {:.4} {} {}",
            d.id, s.max_lateral, s.mean_lateral, s.goal_reached, s.steps
        );
    }
    let summary = summarize_rollouts(&stats);
    let line: Vec<String> = summary.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    let _ = writeln!(text, "# {}", line.join(" "));
    if let Some(p) = out {
        write(p, &text)?;
    }
    print!("{text}");
    Ok(())
}

/// Side-by-side table of `key=value` result lines from `eval` outputs.
pub fn report(files: &[PathBuf]) -> Result<()> {
    let mut columns: Vec<String> = Vec::new();
    let mut rows: Vec<(String, BTreeMap<String, String>)> = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        for line in text.lines().filter(|l| !l.starts_with('#') && l.contains('=')) {
            let mut row = BTreeMap::new();
            for (k, v) in line.split_whitespace().filter_map(|t| t.split_once('=')) {
                if !columns.iter().any(|c| c == k) {
                    columns.push(k.to_string());
                }
                row.insert(k.to_string(), v.to_string());
            }
            let name = f.file_stem().map_or_else(|| f.display().to_string(), |s| s.to_string_lossy().into_owned());
            rows.push((name, row));
        }
    }
    if rows.is_empty() {
        bail!("no result lines found");
    }
    let mut cells: Vec<Vec<String>> = vec![std::iter::once("run".to_string()).chain(columns.iter().cloned()).collect()];
    for (name, row) in &rows {
        cells.push(
            std::iter::once(name.clone())
                .chain(columns.iter().map(|c| row.get(c).cloned().unwrap_or_else(|| "-".into())))
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|j| cells.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    for r in &cells {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        println!("{}", line.join("  ").trim_end());
    }
    Ok(())
}

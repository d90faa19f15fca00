use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use icp2p_core::controller::{PamMlp, Scorer};
use icp2p_core::data::{InstitutionDataset, Split};
use icp2p_core::orchestrator::{run_method, CsvRow, RunConfig, RunReport, TransportKind};
use icp2p_core::ParamVector;
use serde_json::json;

use crate::config::{ExperimentConfig, ScorerChoice, TransportChoice};

pub fn datasets(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<InstitutionDataset>> {
    cfg.institutions
        .iter()
        .map(|p| {
            InstitutionDataset::generate(p.clone(), cfg.sizes, cfg.base_seed + seed)
                .with_context(|| format!("generating data for institution {}", p.institution))
        })
        .collect()
}

fn load_pam(path: &Path) -> Result<PamMlp> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let values: Vec<f32> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let params = ParamVector::new(values).context("PAM weights must be finite")?;
    Ok(PamMlp::from_params(&params)?)
}

pub fn run_config(cfg: &ExperimentConfig, seed: u64) -> Result<RunConfig> {
    let mut rc = RunConfig::new(cfg.train.clone(), cfg.arch);
    rc.train.seed = seed;
    rc.transport = match &cfg.transport {
        TransportChoice::InProcess => TransportKind::InProcess,
        TransportChoice::Socket(a) => TransportKind::Socket(a.clone()),
    };
    rc.scorer = match &cfg.scorer {
        ScorerChoice::Fallback => Scorer::Fallback,
        ScorerChoice::Pam(path) => Scorer::Pam(load_pam(path)?),
    };
    Ok(rc)
}

fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn output_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    Ok(&cfg.output_dir)
}

pub struct RunOutput {
    pub report: RunReport,
    pub json: PathBuf,
    pub csv: PathBuf,
}

/// Runs the configured method once per seed and writes
/// `<method>-seed<s>.json`, `.csv` and `.timing.json` to the output
/// directory.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<RunOutput>> {
    let dir = output_dir(cfg)?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let data = datasets(cfg, seed)?;
        let report = run_method(cfg.method, &run_config(cfg, seed)?, &data)
            .with_context(|| format!("{} with seed {seed}", cfg.method.name()))?;
        let stem = format!("{}-seed{seed}", report.method);
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, report.to_json()).with_context(|| format!("writing {}", json.display()))?;
        let csv = dir.join(format!("{stem}.csv"));
        write_csv(&csv, &report.csv_rows(&[Split::Test, Split::Characteristic]))?;
        let timing = json!({ "method": report.method, "seed": seed, "wall_clock_secs": report.wall_clock_secs });
        fs::write(
            dir.join(format!("{stem}.timing.json")),
            serde_json::to_string_pretty(&timing)?,
        )?;
        println!(
            "{} seed {seed}: {} cycles, mean test PSNR {:.2} dB, digest {}",
            report.method,
            report.cycles,
            report.mean_final_test_psnr().unwrap_or(f64::NAN),
            &report.final_digest[..12.min(report.final_digest.len())]
        );
        out.push(RunOutput { report, json, csv });
    }
    Ok(out)
}

/// Sample mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-institution mean±std of final test PSNR and SSIM, one row per method.
pub fn summary_table(reports: &[RunReport], institutions: &[u32]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut header = format!("{:<14}", "method");
    for k in institutions {
        header += &format!(" | {:<16} {:<16}", format!("inst {k} PSNR"), format!("inst {k} SSIM"));
    }
    let mut lines = vec![header.clone(), "-".repeat(header.len())];
    for m in methods {
        let mut line = format!("{m:<14}");
        for &k in institutions {
            let finals: Vec<_> = reports
                .iter()
                .filter(|r| r.method == m)
                .filter_map(|r| r.final_metrics(k, Split::Test))
                .collect();
            let (pm, ps) = mean_std(&finals.iter().map(|v| v.psnr).collect::<Vec<_>>());
            let (sm, ss) = mean_std(&finals.iter().map(|v| v.ssim).collect::<Vec<_>>());
            line += &format!(
                " | {:<16} {:<16}",
                format!("{pm:.2}±{ps:.2}"),
                format!("{sm:.4}±{ss:.4}")
            );
        }
        lines.push(line);
    }
    lines.join("\n") + "\n"
}

pub struct CompareOutput {
    pub reports: Vec<RunReport>,
    pub rows: usize,
    pub csv: PathBuf,
    pub summary: String,
}

/// Runs every method in `compare.methods` on every seed, writing the joint
/// test-split CSV to `compare.csv` and the summary table to `summary.txt`.
pub fn compare(cfg: &ExperimentConfig) -> Result<CompareOutput> {
    let dir = output_dir(cfg)?;
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let data = datasets(cfg, seed)?;
        let rc = run_config(cfg, seed)?;
        for &m in &cfg.compare_methods {
            let report = run_method(m, &rc, &data).with_context(|| format!("{} with seed {seed}", m.name()))?;
            eprintln!("{} seed {seed} done in {:.1} s", report.method, report.wall_clock_secs);
            reports.push(report);
        }
    }
    let rows: Vec<CsvRow> = reports.iter().flat_map(|r| r.csv_rows(&[Split::Test])).collect();
    let csv = dir.join("compare.csv");
    write_csv(&csv, &rows)?;
    let summary = summary_table(&reports, &cfg.institution_ids());
    fs::write(dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(CompareOutput {
        rows: rows.len(),
        reports,
        csv,
        summary,
    })
}

/// Writes each institution's splits as `inst<k>-<split>.bin` under
/// `data-seed<s>/`, plus a `manifest.json` describing them.
pub fn dump_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let dir = output_dir(cfg)?;
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let sub = dir.join(format!("data-seed{seed}"));
        fs::create_dir_all(&sub)?;
        let data = datasets(cfg, seed)?;
        let mut files = Vec::new();
        for d in &data {
            for split in Split::ALL {
                let name = format!("inst{}-{}.bin", d.id(), split.name());
                fs::write(sub.join(&name), d.encode_split(split))?;
                files.push(json!({
                    "institution": d.id(),
                    "split": split.name(),
                    "file": name,
                    "pairs": d.split(split).len(),
                }));
            }
        }
        let manifest = json!({
            "seed": seed,
            "data_seed": cfg.base_seed + seed,
            "image_size": cfg.sizes.image_size,
            "layout": "per pair: noisy then clean image, each a u64 count followed by little-endian f32 pixels",
            "protocols": cfg.institutions,
            "files": files,
        });
        let path = sub.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        written.push(sub);
    }
    Ok(written)
}

/// Reads back one dumped split.
pub fn load_split(path: &Path, institution: u32, image_size: usize) -> Result<Vec<icp2p_core::data::ImagePair>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let pairs = InstitutionDataset::decode_split(&bytes, institution, image_size)?;
    if pairs.is_empty() {
        bail!("{} holds no image pairs", path.display());
    }
    Ok(pairs)
}

//! `eval`: fidelity against ground truth and cross-scale consistency.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;

use cascade_sr::io::load_image;
use cascade_sr::metrics::{psnr_unit, self_ssim, ssim, ConsistencyMatrix};

use crate::{CmdResult, Failure};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of super-resolved PNGs.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Directory of ground-truth PNGs with matching file names.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Directory with one `x<scale>` subdirectory per scale, each holding
    /// outputs with the same file names; enables SelfSSIM.
    #[arg(long)]
    selfssim: Option<PathBuf>,
    /// Per-image PSNR/SSIM CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// SelfSSIM matrix CSV.
    #[arg(long)]
    matrix_csv: Option<PathBuf>,
}

fn png_names(dir: &Path) -> Result<BTreeMap<String, PathBuf>, Failure> {
    if !dir.is_dir() {
        return Err(Failure::usage(format!("{} is not a directory", dir.display())));
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

pub fn cmd_eval(args: EvalArgs) -> CmdResult {
    if args.selfssim.is_none() && (args.pred.is_none() || args.gt.is_none()) {
        return Err(Failure::usage("give --pred and --gt, or --selfssim"));
    }
    if let (Some(pred), Some(gt)) = (&args.pred, &args.gt) {
        fidelity(pred, gt, args.csv.as_deref())?;
    }
    if let Some(root) = &args.selfssim {
        consistency(root, args.matrix_csv.as_deref())?;
    }
    Ok(())
}

fn fidelity(pred: &Path, gt: &Path, csv_path: Option<&Path>) -> CmdResult {
    let preds = png_names(pred)?;
    let gts = png_names(gt)?;
    for name in preds.keys().filter(|n| !gts.contains_key(*n)) {
        log::warn!("{name}: no ground truth, skipped");
    }
    for name in gts.keys().filter(|n| !preds.contains_key(*n)) {
        log::warn!("{name}: no prediction, skipped");
    }
    let mut rows = Vec::new();
    for (name, p) in &preds {
        let Some(g) = gts.get(name) else { continue };
        let (a, b) = (load_image(p)?, load_image(g)?);
        if a.dims() != b.dims() {
            log::warn!("{name}: size {:?} vs {:?}, skipped", a.dims(), b.dims());
            continue;
        }
        rows.push((name.clone(), psnr_unit(&a, &b)?, ssim(&a, &b)?));
    }
    if rows.is_empty() {
        return Err(Failure::usage("no matching image pairs"));
    }
    println!("{:<32} {:>10} {:>8}", "image", "psnr", "ssim");
    for (name, p, s) in &rows {
        println!("{name:<32} {:>10} {s:>8.4}", fmt_psnr(*p));
    }
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.2).sum::<f64>() / n;
    println!("{:<32} {:>10} {mean_ssim:>8.4}", "mean", fmt_psnr(mean_psnr));
    if let Some(path) = csv_path {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image", "psnr", "ssim"])?;
        for (name, p, s) in &rows {
            w.write_record([name.clone(), fmt_psnr(*p), s.to_string()])?;
        }
        w.write_record(["mean".to_string(), fmt_psnr(mean_psnr), mean_ssim.to_string()])?;
        w.flush()?;
    }
    Ok(())
}

fn consistency(root: &Path, csv_path: Option<&Path>) -> CmdResult {
    let mut scales: Vec<(f64, BTreeMap<String, PathBuf>)> = Vec::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(s) = name.strip_prefix('x').and_then(|v| v.parse::<f64>().ok()) {
            if path.is_dir() {
                scales.push((s, png_names(&path)?));
            }
        }
    }
    scales.sort_by(|a, b| a.0.total_cmp(&b.0));
    if scales.len() < 2 {
        return Err(Failure::usage(format!("{} needs at least two x<scale> subdirectories", root.display())));
    }
    let names: Vec<String> = scales[0]
        .1
        .keys()
        .filter(|n| scales.iter().all(|(_, m)| m.contains_key(*n)))
        .cloned()
        .collect();
    for (s, m) in &scales {
        for name in m.keys().filter(|n| !names.contains(n)) {
            log::warn!("x{s}/{name}: missing at other scales, skipped");
        }
    }
    if names.is_empty() {
        return Err(Failure::usage("no image is present at every scale"));
    }
    let mut mats = Vec::new();
    for name in &names {
        let outputs = scales
            .iter()
            .map(|(s, m)| Ok((*s, load_image(&m[name])?)))
            .collect::<Result<Vec<_>, Failure>>()?;
        mats.push(self_ssim(&outputs)?);
    }
    let mean = ConsistencyMatrix::mean(&mats)?;
    print!("{}", mean.render());
    if let Some(path) = csv_path {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["scale_a", "scale_b", "selfssim"])?;
        for (i, a) in mean.scales.iter().enumerate() {
            for (j, b) in mean.scales.iter().enumerate() {
                w.write_record([a.to_string(), b.to_string(), mean.values[[i, j]].to_string()])?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

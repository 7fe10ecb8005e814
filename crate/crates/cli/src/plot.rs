//! `plot`: line plots from CSV files, rasterized straight into a PNG.
//!
//! There is no font rendering; the axis ranges are printed to stdout.

use std::path::PathBuf;

use clap::Args;
use image::{Rgb, RgbImage};

use crate::{CmdResult, Failure};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: f64 = 40.0;

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    csv: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// X column; defaults to `step` or `zeta` when present, else the first.
    #[arg(long)]
    x: Option<String>,
    /// Y column; defaults to `loss` when present, else the first non-x column.
    #[arg(long)]
    y: Option<String>,
    /// Plot log10 of the y values.
    #[arg(long)]
    log_y: bool,
}

fn pick(headers: &[String], wanted: Option<&str>, preferred: &[&str], skip: Option<usize>) -> Result<usize, Failure> {
    if let Some(name) = wanted {
        return headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Failure::usage(format!("no column named {name:?}")));
    }
    if let Some(i) = preferred.iter().find_map(|p| headers.iter().position(|h| h == p)) {
        return Ok(i);
    }
    (0..headers.len())
        .find(|&i| Some(i) != skip)
        .ok_or_else(|| Failure::usage("CSV needs at least two columns"))
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

pub fn cmd_plot(args: PlotArgs) -> CmdResult {
    let mut reader = csv::Reader::from_path(&args.csv)
        .map_err(|e| Failure::usage(format!("{}: {e}", args.csv.display())))?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let xi = pick(&headers, args.x.as_deref(), &["step", "zeta"], None)?;
    let yi = pick(&headers, args.y.as_deref(), &["loss"], Some(xi))?;
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record?;
        let value = |i: usize| {
            record
                .get(i)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Failure::usage(format!("non-numeric value in column {}", headers[i])))
        };
        let y = value(yi)?;
        let y = if args.log_y { y.log10() } else { y };
        if y.is_finite() {
            points.push((value(xi)?, y));
        }
    }
    if points.is_empty() {
        return Err(Failure::usage(format!("{} has no data rows", args.csv.display())));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (xmin, xmax) = points.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (ymin, ymax) = points.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = (WIDTH as f64, HEIGHT as f64);
    let to_px = |(x, y): (f64, f64)| {
        (
            MARGIN + (x - xmin) / span(xmin, xmax) * (w - 2.0 * MARGIN),
            h - MARGIN - (y - ymin) / span(ymin, ymax) * (h - 2.0 * MARGIN),
        )
    };
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let axis = Rgb([90, 90, 90]);
    draw_line(&mut img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), axis);
    draw_line(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), axis);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let x = MARGIN + f * (w - 2.0 * MARGIN);
        let y = h - MARGIN - f * (h - 2.0 * MARGIN);
        draw_line(&mut img, (x, h - MARGIN), (x, h - MARGIN + 5.0), axis);
        draw_line(&mut img, (MARGIN - 5.0, y), (MARGIN, y), axis);
    }
    let line = Rgb([31, 119, 180]);
    for pair in points.windows(2) {
        draw_line(&mut img, to_px(pair[0]), to_px(pair[1]), line);
    }
    if points.len() <= 50 {
        for &p in &points {
            let (x, y) = to_px(p);
            draw_line(&mut img, (x - 2.0, y), (x + 2.0, y), line);
            draw_line(&mut img, (x, y - 2.0), (x, y + 2.0), line);
        }
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save(&args.out).map_err(|e| Failure::from(cascade_sr::Error::from(e)))?;
    let ylabel = if args.log_y { format!("log10 {}", headers[yi]) } else { headers[yi].clone() };
    println!(
        "{}: {} in [{xmin}, {xmax}], {ylabel} in [{ymin}, {ymax}], {} points",
        args.out.display(),
        headers[xi],
        points.len()
    );
    Ok(())
}

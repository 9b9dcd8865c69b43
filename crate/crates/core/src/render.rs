// SPDX-License-Identifier: MIT OR Apache-2.0

//! Files derived from a report: CSV matrices, PNG heat-maps and boxplots,
//! and plain-text tables. Output depends only on the report, so re-rendering
//! the same records reproduces the same bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::experiment::{records_from_jsonl, Subset};
use crate::report::{build_report, ExperimentReport, GridResult, Measure, Normalization, STAGES};

pub const RECORDS_FILE: &str = "records.jsonl";

const CELL: u32 = 12;
const EMPTY: Rgb<u8> = Rgb([200, 200, 200]);

#[derive(Debug, Clone, Default)]
pub struct RenderOutput {
    pub files: Vec<PathBuf>,
    pub notices: Vec<String>,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, bytes: &[u8], out: &mut RenderOutput) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    out.files.push(path.to_path_buf());
    Ok(())
}

/// Read `records.jsonl` from `records_dir` and render everything into `out_dir`.
pub fn render_dir(records_dir: &Path, out_dir: &Path, norm: Normalization) -> Result<RenderOutput> {
    let path = records_dir.join(RECORDS_FILE);
    if !path.is_file() {
        return Err(Error::MissingRecords(vec![path]));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let records = records_from_jsonl(&path, &text)?;
    let report = build_report(&records)?;
    render_report(&report, out_dir, norm)
}

pub fn render_report(
    report: &ExperimentReport,
    out_dir: &Path,
    norm: Normalization,
) -> Result<RenderOutput> {
    let mut out = RenderOutput::default();
    let grids_dir = out_dir.join("grids");
    let fig_dir = out_dir.join("figures");
    ensure_dir(&grids_dir)?;
    ensure_dir(&fig_dir)?;

    write(
        &out_dir.join("report.json"),
        (serde_json::to_string_pretty(report)? + "\n").as_bytes(),
        &mut out,
    )?;
    write(&out_dir.join("tables.txt"), tables(report).as_bytes(), &mut out)?;

    for g in &report.grids {
        let stem = g.file_stem();
        write(&grids_dir.join(format!("{stem}.csv")), &grid_csv(g, norm)?, &mut out)?;
        if g.complete {
            write(&fig_dir.join(format!("{stem}.png")), &heat_map_png(g, norm)?, &mut out)?;
        } else {
            out.notices.push(format!(
                "{stem}: grid was scanned with early exit; heat-map skipped"
            ));
        }
    }

    write(&out_dir.join("stages.csv"), &stages_csv(report)?, &mut out)?;
    write(&out_dir.join("stage_quartiles.csv"), &quartiles_csv(report)?, &mut out)?;
    if report.stage_quartiles.is_empty() {
        out.notices
            .push("no stage fired for any query; boxplot skipped".to_owned());
    } else {
        write(
            &fig_dir.join("stages_boxplot.png"),
            &boxplot_png(report)?,
            &mut out,
        )?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

fn csv_bytes(rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Contract(format!("csv buffer: {e}")))
}

/// Rows are source layers, columns target layers.
pub fn grid_csv(g: &GridResult, norm: Normalization) -> Result<Vec<u8>> {
    let pct = g.percentages(norm);
    let mut rows = Vec::with_capacity(g.n_rows + 1);
    let mut header = vec!["source\\target".to_owned()];
    header.extend((0..g.n_cols).map(|t| t.to_string()));
    rows.push(header);
    for (s, row) in pct.iter().enumerate() {
        let mut r = vec![s.to_string()];
        r.extend(row.iter().map(|v| v.map_or(String::new(), |v| format!("{v:.4}"))));
        rows.push(r);
    }
    csv_bytes(rows)
}

fn opt(v: Option<usize>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn stages_csv(report: &ExperimentReport) -> Result<Vec<u8>> {
    let mut rows = vec![["query_id", "subset"]
        .iter()
        .chain(STAGES.iter())
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
    for r in &report.stages {
        let mut row = vec![r.query_id.clone(), r.subset.as_str().to_owned()];
        row.extend(STAGES.iter().map(|s| opt(r.stage(s))));
        rows.push(row);
    }
    csv_bytes(rows)
}

fn quartiles_csv(report: &ExperimentReport) -> Result<Vec<u8>> {
    let mut rows = vec![["subset", "stage", "n", "min", "q1", "median", "q3", "max"]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
    for q in &report.stage_quartiles {
        rows.push(vec![
            q.subset.as_str().to_owned(),
            q.stage.clone(),
            q.n.to_string(),
            format!("{:.2}", q.min),
            format!("{:.2}", q.q1),
            format!("{:.2}", q.median),
            format!("{:.2}", q.q3),
            format!("{:.2}", q.max),
        ]);
    }
    csv_bytes(rows)
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

fn png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// White to dark red.
fn heat(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    Rgb([lerp(255.0, 165.0), lerp(255.0, 15.0), lerp(255.0, 21.0)])
}

/// One square per cell; source layer grows upward, target layer rightward.
pub fn heat_map_png(g: &GridResult, norm: Normalization) -> Result<Vec<u8>> {
    let pct = g.percentages(norm);
    let max = pct.iter().flatten().flatten().copied().fold(0.0, f64::max);
    let (w, h) = (g.n_cols as u32 * CELL, g.n_rows as u32 * CELL);
    let mut img = RgbImage::from_pixel(w.max(1), h.max(1), EMPTY);
    for (s, row) in pct.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            let color = match v {
                None => EMPTY,
                Some(v) if max > 0.0 => heat(v / max),
                Some(_) => heat(0.0),
            };
            let y0 = h - (s as u32 + 1) * CELL;
            let x0 = t as u32 * CELL;
            for y in y0..y0 + CELL {
                for x in x0..x0 + CELL {
                    // one-pixel gutter between cells
                    let edge = x == x0 + CELL - 1 || y == y0 + CELL - 1;
                    img.put_pixel(x, y, if edge { Rgb([255, 255, 255]) } else { color });
                }
            }
        }
    }
    png(&img)
}

fn subset_color(s: Subset) -> Rgb<u8> {
    match s {
        Subset::Correct => Rgb([49, 130, 189]),
        Subset::Incorrect => Rgb([230, 85, 13]),
    }
}

/// Boxes per stage, one per subset, on a shared layer axis.
pub fn boxplot_png(report: &ExperimentReport) -> Result<Vec<u8>> {
    const SLOT: u32 = 18;
    const GAP: u32 = 14;
    const MARGIN: u32 = 8;
    let subsets = [Subset::Correct, Subset::Incorrect];
    let n_layers = report.run.n_layers as f64;
    let plot_h = (report.run.n_layers as u32 + 1) * CELL;
    let width = MARGIN * 2 + STAGES.len() as u32 * (SLOT * 2 + GAP);
    let height = plot_h + MARGIN * 2;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let y_of = |layer: f64| -> u32 {
        let frac = if n_layers > 0.0 { layer / n_layers } else { 0.0 };
        MARGIN + plot_h - 1 - (frac * (plot_h - 1) as f64).round() as u32
    };
    // faint horizontal grid at each layer
    for l in 0..=report.run.n_layers {
        let y = y_of(l as f64);
        for x in MARGIN..width - MARGIN {
            img.put_pixel(x, y, Rgb([235, 235, 235]));
        }
    }
    for (si, stage) in STAGES.iter().enumerate() {
        for (ki, &subset) in subsets.iter().enumerate() {
            let Some(q) = report
                .stage_quartiles
                .iter()
                .find(|q| q.subset == subset && q.stage == *stage)
            else {
                continue;
            };
            let x0 = MARGIN + si as u32 * (SLOT * 2 + GAP) + ki as u32 * SLOT + 2;
            let x1 = x0 + SLOT - 4;
            let xm = (x0 + x1) / 2;
            let color = subset_color(subset);
            for y in y_of(q.max)..=y_of(q.min) {
                img.put_pixel(xm, y, Rgb([60, 60, 60]));
            }
            for y in y_of(q.q3)..=y_of(q.q1) {
                for x in x0..=x1 {
                    img.put_pixel(x, y, color);
                }
            }
            for x in x0..=x1 {
                img.put_pixel(x, y_of(q.median), Rgb([0, 0, 0]));
                img.put_pixel(x, y_of(q.min), Rgb([60, 60, 60]));
                img.put_pixel(x, y_of(q.max), Rgb([60, 60, 60]));
            }
        }
    }
    png(&img)
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

fn cases(m: &Option<Measure>) -> String {
    m.as_ref()
        .map_or("-".to_owned(), |m| format!("{:.1}%", m.percent))
}

fn layer(m: &Option<Measure>) -> String {
    match m.as_ref().and_then(|m| m.mean_layer) {
        Some(l) => format!("{l:.2}"),
        None => "-".to_owned(),
    }
}

fn table(out: &mut String, title: &str, header: &[&str], rows: Vec<Vec<String>>) {
    let n = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in &rows {
        for (i, c) in r.iter().enumerate().take(n) {
            width[i] = width[i].max(c.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c:<w$}", w = width[i]))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_owned()
    };
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{}", line(header.to_vec()));
    let _ = writeln!(out, "{}", "-".repeat(width.iter().sum::<usize>() + 2 * (n - 1)));
    for r in &rows {
        let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
    }
    out.push('\n');
}

/// Five tables: cases, Patchscopes decoding, prediction promotion,
/// propagation detection and back-patching.
pub fn tables(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "model: {}  layers: {}  seed: {}  window: {}  config: {}\n",
        report.run.model,
        report.run.n_layers,
        report.run.settings.seed,
        report.run.settings.window_len,
        &report.run.config_hash[..12.min(report.run.config_hash.len())]
    );
    let subsets: Vec<_> = report.subsets.iter().collect();

    table(
        &mut out,
        "Cases tested",
        &["Subset", "Cases", "Failed"],
        subsets
            .iter()
            .map(|(s, v)| {
                vec![
                    s.as_str().to_owned(),
                    v.n_queries.to_string(),
                    v.n_failures.to_string(),
                ]
            })
            .collect(),
    );

    table(
        &mut out,
        "Patchscopes decoding (cases / mean first source layer)",
        &["Subset", "e2@t1", "Layer", "e2@t2", "Layer", "e3@t2", "Layer"],
        subsets
            .iter()
            .map(|(s, v)| {
                let p = &v.patchscopes;
                vec![
                    s.as_str().to_owned(),
                    cases(&p.e2_from_t1),
                    layer(&p.e2_from_t1),
                    cases(&p.e2_from_t2),
                    layer(&p.e2_from_t2),
                    cases(&p.e3_from_t2),
                    layer(&p.e3_from_t2),
                ]
            })
            .collect(),
    );

    table(
        &mut out,
        "Prediction promotion by sublayer updates at t2",
        &["Subset", "Attention", "Layer", "MLP", "Layer"],
        subsets
            .iter()
            .map(|(s, v)| {
                let a = v.promotion.as_ref().map(|p| p.attention.clone());
                let m = v.promotion.as_ref().map(|p| p.mlp.clone());
                vec![s.as_str().to_owned(), cases(&a), layer(&a), cases(&m), layer(&m)]
            })
            .collect(),
    );

    table(
        &mut out,
        "Propagation from t1 to t2 (minimum layer over firing methods)",
        &["Subset", "Detected", "Mean Layer", "Knockout", "Projection", "Patchscopes"],
        subsets
            .iter()
            .map(|(s, v)| {
                let p = v.propagation.as_ref();
                let d = p.map(|p| p.detected.clone());
                vec![
                    s.as_str().to_owned(),
                    cases(&d),
                    layer(&d),
                    cases(&p.map(|p| p.knockout.clone())),
                    cases(&p.map(|p| p.projection.clone())),
                    cases(&p.map(|p| p.patchscopes.clone())),
                ]
            })
            .collect(),
    );

    table(
        &mut out,
        "Back-patching success",
        &["Subset", "t1", "t2"],
        subsets
            .iter()
            .map(|(s, v)| {
                let b = v.backpatch.as_ref();
                vec![
                    s.as_str().to_owned(),
                    cases(&b.map(|b| b.t1.clone())),
                    cases(&b.map(|b| b.t2.clone())),
                ]
            })
            .collect(),
    );

    table(
        &mut out,
        "Stage ordering (e2@t1 no later than e3@t2)",
        &["Subset", "Both fired", "Ordered", "Rate"],
        subsets
            .iter()
            .map(|(s, v)| {
                let o = &v.stage_ordering;
                vec![
                    s.as_str().to_owned(),
                    o.both_fired.to_string(),
                    o.ordered.to_string(),
                    o.pass_rate.map_or("-".to_owned(), |r| format!("{r:.1}%")),
                ]
            })
            .collect(),
    );
    out
}

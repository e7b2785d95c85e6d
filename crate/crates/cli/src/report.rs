use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Result};

use crate::config::Loaded;
use crate::output::{read_csv, CsvFile};

/// Aligned text table; the first column is left-aligned.
fn render(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header) + "\n";
    out += &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ");
    out += "\n";
    for r in rows {
        out += &line(r);
        out += "\n";
    }
    out
}

/// Rows keyed by p (in file order), columns by label.
fn grid(cells: Vec<(String, String, String)>) -> String {
    let mut ps: Vec<String> = Vec::new();
    let mut cols: Vec<String> = Vec::new();
    let mut map = BTreeMap::new();
    for (p, col, v) in cells {
        if !ps.contains(&p) {
            ps.push(p.clone());
        }
        if !cols.contains(&col) {
            cols.push(col.clone());
        }
        map.insert((p, col), v);
    }
    let header: Vec<String> = std::iter::once("p".to_string()).chain(cols.iter().cloned()).collect();
    let rows: Vec<Vec<String>> = ps
        .iter()
        .map(|p| std::iter::once(p.clone()).chain(cols.iter().map(|c| map.get(&(p.clone(), c.clone())).cloned().unwrap_or_default())).collect())
        .collect();
    render(&header, &rows)
}

fn fmt_p(p: f64) -> String {
    format!("{p:.1}")
}

/// `100*mean (100*std)`, one decimal each.
fn cell(mean: f64, std: f64) -> String {
    // adding 0.0 turns a negative zero into a positive one
    format!("{:.1} ({:.1})", 100.0 * mean + 0.0, 100.0 * std + 0.0)
}

fn summary_table(f: &CsvFile) -> Result<String> {
    let mut cells = Vec::new();
    for r in &f.records {
        let col = format!("{}/{}", f.get(r, "strategy")?, f.get(r, "policy")?);
        cells.push((fmt_p(f.number(r, "p")?), col, cell(f.number(r, "adv_mean")?, f.number(r, "adv_std")?)));
    }
    Ok(grid(cells))
}

fn runs_table(f: &CsvFile) -> Result<String> {
    let mut groups: Vec<((String, String), Vec<f64>)> = Vec::new();
    for r in &f.records {
        let key = (fmt_p(f.number(r, "p")?), format!("{}/{}", f.get(r, "strategy")?, f.get(r, "policy")?));
        let adv = f.number(r, "adv")?;
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(adv),
            None => groups.push((key, vec![adv])),
        }
    }
    let cells = groups
        .into_iter()
        .map(|((p, col), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            (p, col, cell(mean, std))
        })
        .collect();
    Ok(grid(cells))
}

fn overhead_table(f: &CsvFile) -> Result<String> {
    let mut cells = Vec::new();
    for r in &f.records {
        cells.push((fmt_p(f.number(r, "p")?), f.get(r, "layer")?, format!("{:.2}", f.number(r, "factor")?)));
    }
    Ok(grid(cells))
}

fn cost_table(f: &CsvFile) -> Result<String> {
    let cols = ["preset", "plain_mult", "ciph_mult", "rescale", "relinearization", "provenance"];
    let rows = f
        .records
        .iter()
        .map(|r| {
            cols.iter()
                .map(|c| match f.number(r, c) {
                    Ok(v) if *c != "preset" => Ok(format!("{v:.2}")),
                    _ => f.get(r, c),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(render(&cols.map(String::from), &rows))
}

pub fn report(files: &[std::path::PathBuf], config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    if files.is_empty() {
        bail!("no CSV files given");
    }
    let expected = match config {
        Some(p) => Some(Loaded::from_path(Some(p), seed)?.config.hash()),
        None => None,
    };
    for path in files {
        let f = read_csv(path)?;
        if let Some(h) = &expected {
            if f.meta.get("config_sha256") != Some(h) {
                bail!("{}: config hash mismatch (file was produced under a different config)", path.display());
            }
        }
        let has = |c: &str| f.headers.iter().any(|h| h == c);
        let body = if has("adv_mean") {
            summary_table(&f)?
        } else if has("adv") {
            runs_table(&f)?
        } else if has("factor") {
            overhead_table(&f)?
        } else if has("relinearization") {
            cost_table(&f)?
        } else {
            bail!("{}: unrecognized CSV layout", path.display());
        };
        println!("{}\n{body}", path.display());
    }
    Ok(())
}

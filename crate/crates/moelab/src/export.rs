//! Figure data files for routing heatmaps and output histograms.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use moelab_core::metrics::{output_stats, OutputStats};
use moelab_core::moe::RoutingDecision;
use moelab_core::Tensor;

use crate::error::{Error, Result};

/// Tokens shown in the bar chart data.
pub const BAR_TOKENS: usize = 5;

/// `token,e0..e{E-1}` with one row per token. Floats use shortest
/// round-trip formatting, so parsing recovers the matrix exactly.
pub fn heatmap_csv(probs: &Tensor) -> String {
    let e = probs.cols();
    let mut out = String::from("token");
    for j in 0..e {
        let _ = write!(out, ",e{j}");
    }
    out.push('\n');
    for t in 0..probs.rows() {
        let _ = write!(out, "{t}");
        for p in probs.row(t) {
            let _ = write!(out, ",{p}");
        }
        out.push('\n');
    }
    out
}

/// Inverse of [`heatmap_csv`]; returns a `[tokens, E]` matrix.
pub fn parse_heatmap_csv(text: &str) -> Result<Tensor> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Invalid("empty heatmap CSV".into()))?;
    let e = header.split(',').count() - 1;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != e + 1 {
            return Err(Error::Invalid(format!(
                "heatmap CSV line {}: expected {} fields, found {}",
                i + 2,
                e + 1,
                fields.len()
            )));
        }
        for f in &fields[1..] {
            data.push(
                f.parse::<f64>()
                    .map_err(|err| Error::Invalid(format!("heatmap CSV line {}: {err}", i + 2)))?,
            );
        }
        rows += 1;
    }
    Ok(Tensor::matrix(rows, e, data)?)
}

/// Binary 8-bit PGM, one row per token and one column per expert. Pixel
/// value is `round(255 p)`.
pub fn heatmap_pgm(probs: &Tensor) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", probs.cols(), probs.rows()).into_bytes();
    out.extend(
        probs
            .data()
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Width, height and pixels of a binary PGM with maxval 255.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Invalid(format!("PGM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let pixels = bytes.get(pos + 1..).unwrap_or_default();
    if pixels.len() != w * h {
        return Err(bad(&format!(
            "expected {} pixels, found {}",
            w * h,
            pixels.len()
        )));
    }
    Ok((w, h, pixels.to_vec()))
}

/// `token,expert,probability,selected` for the first [`BAR_TOKENS`] tokens.
pub fn bars_csv(decision: &RoutingDecision) -> String {
    let probs = decision.probabilities();
    let mut out = String::from("token,expert,probability,selected\n");
    for t in 0..decision.tokens().min(BAR_TOKENS) {
        let chosen = decision.token_indices(t);
        for (e, p) in probs.row(t).iter().enumerate() {
            let _ = writeln!(out, "{t},{e},{p},{}", u8::from(chosen.contains(&e)));
        }
    }
    out
}

/// `bin_lo,bin_hi,count` rows of the output histogram.
pub fn histogram_csv(stats: &OutputStats) -> String {
    let h = &stats.histogram;
    let w = h.bin_width();
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{c}",
            h.lo + i as f64 * w,
            h.lo + (i + 1) as f64 * w
        );
    }
    out
}

/// Writes `<prefix>_heatmap.csv`, `<prefix>_bars.csv`,
/// `<prefix>_histogram.csv` and, when `pgm` is set, `<prefix>_heatmap.pgm`.
/// Returns the written paths.
pub fn export_figure_data(
    decision: &RoutingDecision,
    y: &Tensor,
    prefix: &Path,
    pgm: bool,
) -> Result<Vec<PathBuf>> {
    let probs = decision.probabilities();
    let with_suffix = |s: &str| {
        let mut name = prefix.as_os_str().to_owned();
        name.push(s);
        PathBuf::from(name)
    };
    let mut files: Vec<(PathBuf, Vec<u8>)> = vec![
        (with_suffix("_heatmap.csv"), heatmap_csv(probs).into_bytes()),
        (with_suffix("_bars.csv"), bars_csv(decision).into_bytes()),
        (
            with_suffix("_histogram.csv"),
            histogram_csv(&output_stats(y)?).into_bytes(),
        ),
    ];
    if pgm {
        files.push((with_suffix("_heatmap.pgm"), heatmap_pgm(probs)));
    }
    let mut written = Vec::with_capacity(files.len());
    for (path, bytes) in files {
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

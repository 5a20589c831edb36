//! Artifact emission: results tables as CSV (rounded plus full-precision
//! companion), grayscale PGM/SVG heatmaps, histogram CSVs, and run
//! manifests with config hashes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::analysis::SimMatrix;
use crate::error::{Error, Result};

/// Score table with one labelled row per configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

/// "Embeddings", "Layer 1", ..., "Layer L".
pub fn layer_columns(n_layers: usize) -> Vec<String> {
    let mut cols = vec!["Embeddings".to_string()];
    cols.extend((1..=n_layers).map(|l| format!("Layer {l}")));
    cols
}

fn companion_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}_full.{ext}"))
}

impl ResultsTable {
    pub fn new(columns: Vec<String>) -> Self {
        ResultsTable {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, label: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::InvalidArgument(format!(
                "row has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        self.rows.push((label.into(), values));
        Ok(())
    }

    /// Writes values rounded to 2 decimals at `path` and the exact values
    /// to a `*_full.csv` companion next to it.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::InvalidArgument("empty table".to_string()));
        }
        let header = format!("config,{}\n", self.columns.join(","));
        let mut rounded = header.clone();
        let mut full = header;
        for (label, values) in &self.rows {
            rounded.push_str(label);
            full.push_str(label);
            for v in values {
                rounded.push_str(&format!(",{v:.2}"));
                full.push_str(&format!(",{v}"));
            }
            rounded.push('\n');
            full.push('\n');
        }
        fs::write(path, rounded)?;
        fs::write(companion_path(path), full)?;
        Ok(())
    }

    /// Parses a full-precision companion file back into a table.
    pub fn read_full_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty table file".to_string()))?;
        let columns: Vec<String> = header
            .split(',')
            .skip(1)
            .map(|s| s.to_string())
            .collect();
        let mut table = ResultsTable::new(columns);
        for line in lines {
            let mut parts = line.split(',');
            let label = parts
                .next()
                .ok_or_else(|| Error::Format("missing row label".to_string()))?;
            let values = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|e| Error::Format(format!("bad number {p:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            table.push_row(label, values)?;
        }
        Ok(table)
    }
}

/// 8-bit binary PGM, min-max normalized per matrix, darker = higher.
/// A constant matrix renders as uniform mid-gray.
pub fn render_heatmap_pgm(c: &SimMatrix, path: &Path) -> Result<()> {
    let n = c.n();
    let (min, max) = c
        .values()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let mut out = Vec::with_capacity(n * n + 32);
    out.extend_from_slice(format!("P5\n{n} {n}\n255\n").as_bytes());
    for &v in c.values() {
        let pixel = if max > min {
            255 - ((v - min) / (max - min) * 255.0).round() as u8
        } else {
            128
        };
        out.push(pixel);
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reads back a P5 heatmap as (n, pixels); used by invariant tests.
pub fn read_pgm(path: &Path) -> Result<(usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| Error::Format("truncated PGM header".to_string()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("P5") {
        return Err(Error::Format("not a P5 PGM".to_string()));
    }
    let w: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad PGM width".to_string()))?;
    let h: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad PGM height".to_string()))?;
    if w != h {
        return Err(Error::Format("expected a square PGM".to_string()));
    }
    let pixels = bytes[header_end + 1..].to_vec();
    if pixels.len() != w * h {
        return Err(Error::Format("PGM pixel count mismatch".to_string()));
    }
    Ok((w, pixels))
}

/// SVG heatmap with the adjacency score annotated to 2 decimals.
pub fn render_heatmap_svg(c: &SimMatrix, score: f64, path: &Path) -> Result<()> {
    let n = c.n();
    let cell = 8usize;
    let side = n * cell;
    let (min, max) = c
        .values()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{side}\" height=\"{}\" \
         viewBox=\"0 0 {side} {}\">\n",
        side + 20,
        side + 20
    ));
    for i in 0..n {
        for j in 0..n {
            let v = c.get(i, j);
            let shade = if max > min {
                255 - ((v - min) / (max - min) * 255.0).round() as u8
            } else {
                128
            };
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"rgb({shade},{shade},{shade})\"/>\n",
                j * cell,
                i * cell
            ));
        }
    }
    svg.push_str(&format!(
        "<text x=\"2\" y=\"{}\" font-size=\"12\">({score:.2})</text>\n</svg>\n",
        side + 14
    ));
    fs::write(path, svg)?;
    Ok(())
}

/// Histogram over the observed value range with `bins` uniform bins;
/// rows are `bin_left,bin_right,count`.
pub fn write_histogram_csv(values: &[f64], bins: usize, path: &Path) -> Result<()> {
    if values.is_empty() || bins == 0 {
        return Err(Error::InvalidArgument(
            "need nonempty values and bins >= 1".to_string(),
        ));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let bin = (((v - lo) / width) as usize).min(bins - 1);
        counts[bin] += 1;
    }
    let mut out = String::from("bin_left,bin_right,count\n");
    for (i, count) in counts.iter().enumerate() {
        let left = lo + i as f64 * width;
        out.push_str(&format!("{left},{},{count}\n", left + width));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Histogram with fixed bin edges over [lo, hi] (score histograms use
/// [0, 1] with 20 bins).
pub fn write_fixed_histogram_csv(
    counts: &[usize],
    lo: f64,
    hi: f64,
    path: &Path,
) -> Result<()> {
    if counts.is_empty() || !(hi > lo) {
        return Err(Error::InvalidArgument("bad histogram bounds".to_string()));
    }
    let width = (hi - lo) / counts.len() as f64;
    let mut out = String::from("bin_left,bin_right,count\n");
    for (i, count) in counts.iter().enumerate() {
        let left = lo + i as f64 * width;
        out.push_str(&format!("{left},{},{count}\n", left + width));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_sim_matrix_csv(c: &SimMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..c.n() {
        let row: Vec<String> = c.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Ordered key=value record of a run: seeds, config hash, artifact list.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Manifest::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.push((key.into(), value.into()));
    }

    pub fn push_seeds(&mut self, seeds: &[u64]) {
        let list: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
        self.push("seeds", list.join(" "));
    }

    pub fn push_config_hash(&mut self, config_text: &str) {
        self.push("config_sha256", sha256_hex(config_text.as_bytes()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k}={v}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut manifest = Manifest::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
            manifest.push(k, v);
        }
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{synthetic_banded_matrix, BandProfile};

    #[test]
    fn table_round_trips_through_full_precision_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut table = ResultsTable::new(layer_columns(2));
        table
            .push_row("init", vec![0.4912345678, 0.97654321, 0.999999])
            .unwrap();
        table.push_row("trained", vec![0.5, 0.25, 1.0]).unwrap();
        let path = dir.path().join("table1.csv");
        table.write_csv(&path).unwrap();

        let rounded = fs::read_to_string(&path).unwrap();
        assert!(rounded.starts_with("config,Embeddings,Layer 1,Layer 2\n"));
        assert!(rounded.contains("init,0.49,0.98,1.00"));

        let full = ResultsTable::read_full_csv(&dir.path().join("table1_full.csv")).unwrap();
        assert_eq!(full, table);
    }

    #[test]
    fn table_rejects_ragged_rows() {
        let mut table = ResultsTable::new(layer_columns(2));
        assert!(table.push_row("x", vec![0.5]).is_err());
    }

    #[test]
    fn pgm_identity_matrix_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let n = 4;
        let mut values = vec![0.0f32; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        let c = SimMatrix::from_values(n, values).unwrap();
        let path = dir.path().join("id.pgm");
        render_heatmap_pgm(&c, &path).unwrap();
        let (w, pixels) = read_pgm(&path).unwrap();
        assert_eq!(w, n);
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 0 } else { 255 };
                assert_eq!(pixels[i * n + j], expect);
            }
        }
    }

    #[test]
    fn pgm_constant_matrix_is_mid_gray() {
        let dir = tempfile::tempdir().unwrap();
        let c = SimMatrix::from_values(3, vec![1.0; 9]).unwrap();
        let path = dir.path().join("flat.pgm");
        render_heatmap_pgm(&c, &path).unwrap();
        let (_, pixels) = read_pgm(&path).unwrap();
        assert!(pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn pgm_banded_matrix_darkens_toward_diagonal() {
        let dir = tempfile::tempdir().unwrap();
        let c = synthetic_banded_matrix(8, BandProfile::Band, 0).unwrap();
        let path = dir.path().join("band.pgm");
        render_heatmap_pgm(&c, &path).unwrap();
        let (n, pixels) = read_pgm(&path).unwrap();
        for i in 0..n {
            for j in 1..n - i {
                // moving right from the diagonal must get lighter
                assert!(pixels[i * n + (i + j)] >= pixels[i * n + (i + j - 1)]);
            }
        }
    }

    #[test]
    fn svg_contains_score_annotation() {
        let dir = tempfile::tempdir().unwrap();
        let c = synthetic_banded_matrix(4, BandProfile::Band, 0).unwrap();
        let path = dir.path().join("band.svg");
        render_heatmap_svg(&c, 0.987, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("(0.99)"));
        assert!(text.contains("<svg"));
        assert_eq!(text.matches("<rect").count(), 16);
    }

    #[test]
    fn histogram_csv_counts_sum() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f64> = (0..120).map(|i| i as f64 / 119.0).collect();
        let path = dir.path().join("hist.csv");
        write_histogram_csv(&values, 60, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut total = 0usize;
        for line in text.lines().skip(1) {
            total += line.split(',').nth(2).unwrap().parse::<usize>().unwrap();
        }
        assert_eq!(total, 120);
        assert_eq!(text.lines().count(), 61);
    }

    #[test]
    fn fixed_histogram_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixed.csv");
        write_fixed_histogram_csv(&[1, 2, 3, 4], 0.0, 1.0, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("0,0.25,1"));
        assert!(text.lines().nth(4).unwrap().starts_with("0.75,1,4"));
    }

    #[test]
    fn manifest_round_trip_and_hash_stability() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new();
        m.push_seeds(&[1, 2, 3]);
        m.push_config_hash("n_layers=4\nd_model=128\n");
        m.push("artifact", "table1.csv");
        let path = dir.path().join("manifest.txt");
        m.write(&path).unwrap();
        let back = Manifest::read(&path).unwrap();
        assert_eq!(back.get("seeds"), Some("1 2 3"));
        assert_eq!(back.get("artifact"), Some("table1.csv"));
        assert_eq!(
            back.get("config_sha256"),
            Some(sha256_hex("n_layers=4\nd_model=128\n".as_bytes()).as_str())
        );
    }
}

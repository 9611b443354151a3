//! Embedding tables: one row per sequence with its labels and code.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mdae::motion::{LimbSide, SampleMeta, Split, Technique};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub path: PathBuf,
    pub meta: SampleMeta,
    pub split: Split,
    pub z: Vec<f64>,
}

const FIXED: [&str; 6] = ["path", "participant", "technique", "grade_index", "limb_side", "split"];

fn side_name(s: LimbSide) -> &'static str {
    match s {
        LimbSide::Left => "left",
        LimbSide::Right => "right",
    }
}

fn split_name(s: Split) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn to_csv(rows: &[EmbeddingRow]) -> String {
    let d = rows.first().map_or(0, |r| r.z.len());
    let mut out = FIXED.join(",");
    for j in 0..d {
        let _ = write!(out, ",z{j}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.path.display(),
            r.meta.participant,
            r.meta.technique,
            r.meta.grade_index,
            side_name(r.meta.limb_side),
            split_name(r.split)
        );
        for v in &r.z {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn save(rows: &[EmbeddingRow], path: &Path) -> anyhow::Result<()> {
    std::fs::write(path, to_csv(rows)).with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> anyhow::Result<Vec<EmbeddingRow>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn parse(text: &str) -> anyhow::Result<Vec<EmbeddingRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        bail!("empty embedding table");
    };
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < FIXED.len() || cols[..FIXED.len()] != FIXED {
        bail!("header must start with {}", FIXED.join(","));
    }
    let d = cols.len() - FIXED.len();
    lines
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                bail!("line {}: expected {} fields, found {}", i + 1, cols.len(), f.len());
            }
            let technique: Technique = f[2].parse()?;
            let limb_side = match f[4] {
                "left" => LimbSide::Left,
                "right" => LimbSide::Right,
                other => bail!("line {}: unknown limb side `{other}`", i + 1),
            };
            let split: Split = f[5].parse()?;
            let z = f[FIXED.len()..]
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .with_context(|| format!("line {}: bad code value", i + 1))?;
            debug_assert_eq!(z.len(), d);
            Ok(EmbeddingRow {
                path: PathBuf::from(f[0]),
                meta: SampleMeta {
                    participant: f[1].to_string(),
                    technique,
                    grade_index: f[3].parse().with_context(|| format!("line {}: bad grade index", i + 1))?,
                    limb_side,
                },
                split,
                z,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let rows = vec![
            EmbeddingRow {
                path: "a/LRK_00_000.mdae".into(),
                meta: SampleMeta {
                    participant: "P01".into(),
                    technique: Technique::LRK,
                    grade_index: 0,
                    limb_side: LimbSide::Right,
                },
                split: Split::Train,
                z: vec![0.1, -2.5e-7, 3.0],
            },
            EmbeddingRow {
                path: "b.mdae".into(),
                meta: SampleMeta {
                    participant: "P02".into(),
                    technique: Technique::SBK,
                    grade_index: 12,
                    limb_side: LimbSide::Left,
                },
                split: Split::Test,
                z: vec![1.0 / 3.0, 0.0, -1.0],
            },
        ];
        assert_eq!(parse(&to_csv(&rows)).unwrap(), rows);
    }

    #[test]
    fn rejects_ragged_rows() {
        let text = "path,participant,technique,grade_index,limb_side,split,z0\na,p,RP,1,left,train\n";
        assert!(parse(text).is_err());
    }
}

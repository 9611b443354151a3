use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{load_sequence, validate_sequence, Format, MotionSequence, Units};
use crate::error::{Error, Result};

/// Highest grade index (4th dan); 9th kyu is 0.
pub const MAX_GRADE_INDEX: u8 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Technique {
    /// Reverse punch.
    RP,
    /// Front kick.
    FK,
    /// Low roundhouse kick.
    LRK,
    /// High roundhouse kick.
    HRK,
    /// Spinning back kick.
    SBK,
}

impl Technique {
    pub const ALL: [Technique; 5] = [
        Technique::RP,
        Technique::FK,
        Technique::LRK,
        Technique::HRK,
        Technique::SBK,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Technique> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Technique::RP => "RP",
            Technique::FK => "FK",
            Technique::LRK => "LRK",
            Technique::HRK => "HRK",
            Technique::SBK => "SBK",
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Technique::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown technique `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LimbSide {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub participant: String,
    pub technique: Technique,
    pub grade_index: u8,
    pub limb_side: LimbSide,
}

impl SampleMeta {
    /// Grade on the unit interval: index / 12.
    pub fn grade_value(&self) -> f64 {
        grade_value(self.grade_index)
    }
}

pub fn grade_value(index: u8) -> f64 {
    f64::from(index) / f64::from(MAX_GRADE_INDEX)
}

/// One manifest row. `rate_hz` and `units` are only consulted for CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub participant: String,
    pub technique: Technique,
    pub grade_index: u8,
    pub limb_side: LimbSide,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<Units>,
}

impl ManifestEntry {
    pub fn meta(&self) -> SampleMeta {
        SampleMeta {
            participant: self.participant.clone(),
            technique: self.technique,
            grade_index: self.grade_index,
            limb_side: self.limb_side,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative entry paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = DatasetManifest {
            entries,
            base_dir: PathBuf::new(),
        };
        m.check_entries()?;
        Ok(m)
    }

    fn check_entries(&self) -> Result<()> {
        for e in &self.entries {
            if e.grade_index > MAX_GRADE_INDEX {
                return Err(Error::InvalidConfig(format!(
                    "{}: grade index {} outside 0..={MAX_GRADE_INDEX}",
                    e.path.display(),
                    e.grade_index
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
        let m = DatasetManifest {
            entries,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        m.check_entries()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.entries)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<MotionSequence> {
        let path = self.resolve(entry);
        let format = Format::from_path(&path);
        load_sequence(
            &path,
            format,
            entry.rate_hz.unwrap_or(250.0),
            entry.units.unwrap_or_default(),
        )
    }

    /// Loads every sequence (in parallel), failing on the first invalid file.
    pub fn load_all(&self) -> Result<Vec<MotionSequence>> {
        use rayon::prelude::*;
        self.entries.par_iter().map(|e| self.load_entry(e)).collect()
    }

    /// Checks that every referenced file exists and validates.
    pub fn validate_files(&self) -> Result<()> {
        for seq in self.load_all()? {
            let report = validate_sequence(&seq);
            if !report.is_empty() {
                return Err(Error::InvalidSequence(report.findings[0].issue.clone()));
            }
        }
        Ok(())
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

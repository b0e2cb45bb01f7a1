//! On-disk layout of stage outputs and the readers and writers for them.
//! Every write goes to a temporary file in the target directory and is
//! renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};

use blcast_core::emd::ImfSet;
use blcast_core::error::Error as CoreError;
use blcast_core::ingest::DATE_FORMAT;
use blcast_core::maemd::AlignedImfGroups;
use blcast_core::tcn::TrainReport;
use blcast_core::Channel;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, InStage};

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn denoised(&self, ticker: &str) -> PathBuf {
        self.root.join("denoised").join(format!("{ticker}.csv"))
    }

    pub fn imf_channel(&self, ticker: &str, channel: Channel) -> PathBuf {
        self.root.join("imfs").join(ticker).join(format!("{}.csv", channel.name()))
    }

    pub fn normalization(&self, ticker: &str) -> PathBuf {
        self.root.join("imfs").join(ticker).join("normalization.json")
    }

    pub fn aligned(&self, ticker: &str) -> PathBuf {
        self.root.join("aligned").join(format!("{ticker}.json"))
    }

    pub fn model_manifest(&self, ticker: &str) -> PathBuf {
        self.root.join("models").join(ticker).join("manifest.json")
    }

    pub fn model(&self, ticker: &str, label: &str) -> PathBuf {
        self.root.join("models").join(ticker).join(format!("{label}.json"))
    }

    pub fn forecast_json(&self, ticker: &str) -> PathBuf {
        self.root.join("forecast").join(format!("{ticker}.json"))
    }

    pub fn forecast_csv(&self, ticker: &str) -> PathBuf {
        self.root.join("forecast").join(format!("{ticker}.csv"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn weights(&self, strategy: &str) -> PathBuf {
        self.root.join(format!("weights_{}.csv", strategy.to_ascii_lowercase()))
    }

    pub fn tally(&self) -> PathBuf {
        self.root.join("tally.csv")
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8], stage: &'static str) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::stage(stage, path.display().to_string(), CoreError::io(path, e));
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.flush().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T, stage: &'static str) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(CoreError::from)
        .in_stage(stage, &path.display().to_string())?;
    text.push('\n');
    write_atomic(path, text.as_bytes(), stage)
}

/// Reads an artifact produced by `stage`, reporting a missing file as
/// [`CliError::MissingArtifact`].
pub fn read_artifact(path: &Path, stage: &'static str, reader: &'static str) -> CliResult<String> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CliError::MissingArtifact {
            stage,
            path: path.to_path_buf(),
        }),
        Err(e) => Err(CliError::stage(reader, path.display().to_string(), CoreError::io(path, e))),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path, stage: &'static str, reader: &'static str) -> CliResult<T> {
    let text = read_artifact(path, stage, reader)?;
    serde_json::from_str(&text)
        .map_err(CoreError::from)
        .in_stage(reader, &path.display().to_string())
}

/// CSV text from a header and rows of cells.
pub fn csv_bytes<I, R>(header: &[String], rows: I) -> Vec<u8>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Plain decimal text that parses back to the same value.
pub fn num(x: f64) -> String {
    x.to_string()
}

pub fn date(d: chrono::NaiveDate) -> String {
    d.format(DATE_FORMAT).to_string()
}

/// One channel's IMFs as columns `imf_1..imf_n,residual`.
pub fn imf_csv(set: &ImfSet) -> Vec<u8> {
    let mut header: Vec<String> = (1..=set.imfs.len()).map(|i| format!("imf_{i}")).collect();
    header.push("residual".into());
    let rows = (0..set.residual.len()).map(|t| {
        set.imfs
            .iter()
            .map(move |imf| num(imf[t]))
            .chain(std::iter::once(num(set.residual[t])))
    });
    csv_bytes(&header, rows)
}

pub fn parse_imf_csv(text: &str, context: &str) -> CliResult<ImfSet> {
    let fail = |e: CoreError| CliError::stage("align", context, e);
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|_| fail(CoreError::UnparsableRow(1)))?.clone();
    let k = header.len();
    if k == 0 || &header[k - 1] != "residual" {
        return Err(fail(CoreError::MissingColumn("residual".into())));
    }
    for (i, h) in header.iter().take(k - 1).enumerate() {
        if h != format!("imf_{}", i + 1) {
            return Err(fail(CoreError::MissingColumn(format!("imf_{}", i + 1))));
        }
    }
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|_| fail(CoreError::UnparsableRow(line)))?;
        if rec.len() != k {
            return Err(fail(CoreError::UnparsableRow(line)));
        }
        for (col, cell) in cols.iter_mut().zip(rec.iter()) {
            col.push(cell.parse().map_err(|_| fail(CoreError::UnparsableRow(line)))?);
        }
    }
    let residual = cols.pop().unwrap_or_default();
    Ok(ImfSet { imfs: cols, residual })
}

/// Where one related-channel IMF went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSource {
    pub channel: Channel,
    pub imf_index: usize,
    pub kld: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestGroup {
    pub label: String,
    /// Close IMF heading the group; `None` for the residual group.
    pub target_imf: Option<usize>,
    pub sources: Vec<ManifestSource>,
}

/// Output of the align stage: a readable manifest plus the grouped series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedArtifact {
    pub ticker: String,
    pub manifest: Vec<ManifestGroup>,
    pub aligned: AlignedImfGroups,
}

impl AlignedArtifact {
    pub fn new(ticker: &str, aligned: AlignedImfGroups) -> Self {
        let mut manifest: Vec<ManifestGroup> = aligned
            .groups
            .iter()
            .enumerate()
            .map(|(g, group)| ManifestGroup {
                label: format!("imf_{}", g + 1),
                target_imf: Some(group.target_index),
                sources: group
                    .members
                    .iter()
                    .flat_map(|m| {
                        m.sources.iter().map(|a| ManifestSource {
                            channel: m.channel,
                            imf_index: a.imf_index,
                            kld: a.kld,
                        })
                    })
                    .collect(),
            })
            .collect();
        manifest.push(ManifestGroup {
            label: "residual".into(),
            target_imf: None,
            sources: Vec::new(),
        });
        AlignedArtifact {
            ticker: ticker.into(),
            manifest,
            aligned,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub label: String,
    /// Checkpoint file name next to the manifest, absent when training
    /// failed and the group falls back to persistence.
    pub checkpoint: Option<String>,
    pub warning: Option<String>,
    pub report: Option<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub ticker: String,
    pub groups: Vec<ModelEntry>,
}

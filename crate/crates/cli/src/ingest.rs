//! Dataset ingestion: IDX image/label files and match-result CSVs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};
use ububu::models::{Game, MultinomialRegression, PoissonSoccer};

use crate::error::{CliError, CliResult, CoreContext};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

/// Raw contents of an IDX image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major pixels, image after image.
    pub pixels: Vec<u8>,
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::data(path.display().to_string(), e.to_string()))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> CliResult<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| CliError::data(path.display().to_string(), "truncated header"))
}

pub fn read_idx_images(path: &Path) -> CliResult<IdxImages> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(CliError::data(
            path.display().to_string(),
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(CliError::data(
            path.display().to_string(),
            format!("truncated: header promises {need} pixel bytes, found {}", body.len()),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..need].to_vec(),
    })
}

pub fn read_idx_labels(path: &Path) -> CliResult<Vec<u8>> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(CliError::data(
            path.display().to_string(),
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(CliError::data(
            path.display().to_string(),
            format!("truncated: header promises {count} labels, found {}", body.len()),
        ));
    }
    Ok(body[..count].to_vec())
}

pub fn write_idx_images(path: &Path, images: &IdxImages) -> CliResult<()> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> CliResult<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out)?;
    Ok(())
}

/// Flattened, scaled images with 0-based class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistData {
    pub rows: usize,
    pub cols: usize,
    /// Pixels in `[0, 1]`, intercept not included.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl MnistData {
    /// Covariate dimension including the intercept.
    pub fn d0(&self) -> usize {
        self.rows * self.cols + 1
    }

    pub fn model(&self, sigma0_sq: f64) -> CliResult<MultinomialRegression> {
        MultinomialRegression::new(&self.features, self.labels.clone(), MNIST_CLASSES, sigma0_sq)
            .during("ingest_mnist")
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        for (f, l) in self.features.iter().zip(&self.labels) {
            h.update((*l as u64).to_le_bytes());
            for v in f {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes the dataset back as IDX files. Only possible when every pixel
    /// is a multiple of 1/255, i.e. without downscaling.
    pub fn write_idx(&self, images: &Path, labels: &Path) -> CliResult<()> {
        let mut pixels = Vec::with_capacity(self.features.len() * self.rows * self.cols);
        for f in &self.features {
            for &p in f {
                let b = (p * 255.0).round();
                if !(0.0..=255.0).contains(&b) || b / 255.0 != p {
                    return Err(CliError::data(
                        images.display().to_string(),
                        format!("pixel {p} is not representable as a byte"),
                    ));
                }
                pixels.push(b as u8);
            }
        }
        write_idx_images(
            images,
            &IdxImages {
                count: self.features.len(),
                rows: self.rows,
                cols: self.cols,
                pixels,
            },
        )?;
        let l: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        write_idx_labels(labels, &l)
    }
}

/// Reads the first `subsample` images (all, if fewer) and mean-pools
/// `downscale × downscale` blocks.
pub fn ingest_mnist(images: &Path, labels: &Path, subsample: usize, downscale: usize) -> CliResult<MnistData> {
    let img = read_idx_images(images)?;
    let lab = read_idx_labels(labels)?;
    if img.count != lab.len() {
        return Err(CliError::data(
            labels.display().to_string(),
            format!("{} labels for {} images", lab.len(), img.count),
        ));
    }
    if downscale == 0 || img.rows % downscale != 0 || img.cols % downscale != 0 {
        return Err(CliError::data(
            images.display().to_string(),
            format!("downscale {downscale} does not divide {}x{}", img.rows, img.cols),
        ));
    }
    let n = subsample.min(img.count);
    let (rows, cols) = (img.rows / downscale, img.cols / downscale);
    let area = (downscale * downscale) as f64;
    let mut features = Vec::with_capacity(n);
    let mut out_labels = Vec::with_capacity(n);
    for i in 0..n {
        let l = lab[i] as usize;
        if l >= MNIST_CLASSES {
            return Err(CliError::data(
                labels.display().to_string(),
                format!("label {l} of image {i} outside 0..{MNIST_CLASSES}"),
            ));
        }
        let base = &img.pixels[i * img.rows * img.cols..(i + 1) * img.rows * img.cols];
        let mut f = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let mut s = 0u32;
                for dr in 0..downscale {
                    for dc in 0..downscale {
                        s += u32::from(base[(r * downscale + dr) * img.cols + c * downscale + dc]);
                    }
                }
                f.push(if downscale == 1 { f64::from(s) / 255.0 } else { f64::from(s) / 255.0 / area });
            }
        }
        features.push(f);
        out_labels.push(l);
    }
    Ok(MnistData {
        rows,
        cols,
        features,
        labels: out_labels,
    })
}

/// Match results with team and round index maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchData {
    /// Team names, sorted; index = team id.
    pub teams: Vec<String>,
    /// Distinct round labels, sorted; index = round id.
    pub rounds: Vec<i64>,
    pub games: Vec<Game>,
}

const MATCH_COLUMNS: [&str; 5] = ["round", "home", "away", "hg", "ag"];

impl MatchData {
    /// Parameter dimension `2 · teams · rounds`.
    pub fn dim(&self) -> usize {
        2 * self.teams.len() * self.rounds.len()
    }

    pub fn model(&self, sigma_sq: f64, sigma0_sq: f64) -> CliResult<PoissonSoccer> {
        PoissonSoccer::new(self.teams.len(), self.rounds.len(), self.games.clone(), sigma_sq, sigma0_sq)
            .during("ingest_matches")
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.teams {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        for r in &self.rounds {
            h.update(r.to_le_bytes());
        }
        for g in &self.games {
            for v in [g.round as i64, g.home as i64, g.away as i64, g.home_goals, g.away_goals] {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn write_csv(&self, path: &Path) -> CliResult<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(MATCH_COLUMNS)?;
        for g in &self.games {
            w.write_record([
                self.rounds[g.round].to_string(),
                self.teams[g.home].clone(),
                self.teams[g.away].clone(),
                g.home_goals.to_string(),
                g.away_goals.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn ingest_matches(path: &Path) -> CliResult<MatchData> {
    let file = std::fs::File::open(path).map_err(|e| CliError::data(path.display().to_string(), e.to_string()))?;
    parse_matches(file, &path.display().to_string())
}

/// Parses a match CSV; `source` labels error messages.
pub fn parse_matches<R: Read>(reader: R, source: &str) -> CliResult<MatchData> {
    let err = |reason: String| CliError::data(source, reason);
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
    let mut col = [usize::MAX; 5];
    for (j, name) in header.iter().enumerate() {
        match MATCH_COLUMNS.iter().position(|c| *c == name) {
            Some(k) if col[k] == usize::MAX => col[k] = j,
            Some(_) => return Err(err(format!("duplicate column {name:?}"))),
            None => return Err(err(format!("unknown column {name:?}"))),
        }
    }
    if let Some(k) = col.iter().position(|c| *c == usize::MAX) {
        return Err(err(format!("missing column {:?}", MATCH_COLUMNS[k])));
    }

    struct Raw {
        round: i64,
        home: String,
        away: String,
        hg: i64,
        ag: i64,
    }
    let mut raw = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| err(format!("row {row}: {e}")))?;
        let field = |k: usize| rec.get(col[k]).unwrap_or("");
        let int = |k: usize| -> CliResult<i64> {
            field(k)
                .parse::<i64>()
                .map_err(|_| err(format!("row {row}: column {}: not an integer: {:?}", MATCH_COLUMNS[k], field(k))))
        };
        let r = Raw {
            round: int(0)?,
            home: field(1).to_string(),
            away: field(2).to_string(),
            hg: int(3)?,
            ag: int(4)?,
        };
        if r.home.is_empty() || r.away.is_empty() {
            return Err(err(format!("row {row}: empty team name")));
        }
        if r.home == r.away {
            return Err(err(format!("row {row}: {} plays itself", r.home)));
        }
        if r.hg < 0 || r.ag < 0 {
            return Err(err(format!("row {row}: negative goal count")));
        }
        raw.push(r);
    }
    if raw.is_empty() {
        return Err(err("no matches".into()));
    }
    let teams: BTreeSet<&str> = raw.iter().flat_map(|r| [r.home.as_str(), r.away.as_str()]).collect();
    let team_idx: BTreeMap<&str, usize> = teams.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let rounds: BTreeSet<i64> = raw.iter().map(|r| r.round).collect();
    let round_idx: BTreeMap<i64, usize> = rounds.iter().enumerate().map(|(i, r)| (*r, i)).collect();
    let games = raw
        .iter()
        .map(|r| Game {
            round: round_idx[&r.round],
            home: team_idx[r.home.as_str()],
            away: team_idx[r.away.as_str()],
            home_goals: r.hg,
            away_goals: r.ag,
        })
        .collect();
    Ok(MatchData {
        teams: teams.iter().map(|t| t.to_string()).collect(),
        rounds: rounds.into_iter().collect(),
        games,
    })
}

//! Random instance generation and the line-delimited dataset format.
//!
//! A dataset file is JSON Lines. The first line is a header object carrying
//! the format tag, version, record count, units and the generator config;
//! each following line holds one self-contained scenario:
//!
//! ```text
//! {"format":"uavgnn-dataset","version":1,"tool_version":"0.1.0","count":2,"units":{...},"meta":{...}}
//! {"id":0,"scenario":{"du_xy":[[x,y],...],"dt_xy":[...],"dr_xy":[...],"constants":{...}}}
//! {"id":1,"scenario":{...}}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{LinkFading, PhysConstants, PhysicsError, Point, Scenario};

pub const DATASET_FORMAT: &str = "uavgnn-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid generator config: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("header declares {expected} records but file holds {found}")]
    Truncated { expected: usize, found: usize },
    #[error("record {id}: {reason}")]
    Validation { id: usize, reason: String },
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

/// Parameters of the random deployment generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub n_uav: usize,
    pub n_du: usize,
    pub n_d2d: usize,
    /// Half-width of the square deployment area centred on the origin (m).
    pub area_half: f64,
    /// DT → DR separation range `[min, max]` (m).
    pub d2d_dist_range: [f64; 2],
    pub constants: PhysConstants,
    /// Draw unit-mean exponential power fading on the ground links.
    #[serde(default)]
    pub fading: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_uav: 4,
            n_du: 4,
            n_d2d: 6,
            area_half: 50.0,
            d2d_dist_range: [1.0, 5.0],
            constants: PhysConstants::default(),
            fading: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |field, reason: &str| {
            Err(DatasetError::Config {
                field,
                reason: reason.to_string(),
            })
        };
        if self.n_du == 0 {
            return bad("n_du", "at least one DU is required");
        }
        if self.n_uav == 0 {
            return bad("n_uav", "at least one UAV is required");
        }
        if !(self.area_half.is_finite() && self.area_half > 0.0) {
            return bad("area_half", "must be finite and positive");
        }
        let [lo, hi] = self.d2d_dist_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("d2d_dist_range", "need 0 < min <= max");
        }
        self.constants.validate()?;
        Ok(())
    }
}

/// An ordered list of scenarios sharing one generator config.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<Scenario>,
    pub meta: GenConfig,
}

fn sample_point(rng: &mut ChaCha8Rng, half: f64) -> Point {
    [rng.random_range(-half..=half), rng.random_range(-half..=half)]
}

fn unit_exponential(rng: &mut ChaCha8Rng) -> f64 {
    // 1 - U lies in (0, 1]
    -(1.0 - rng.random::<f64>()).ln()
}

/// Draws `count` scenarios. DUs and DTs are uniform over the square; each
/// DR sits at a uniform angle from its DT at a distance uniform in
/// `d2d_dist_range`.
pub fn generate(cfg: &GenConfig, count: usize) -> Result<Dataset, DatasetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [lo, hi] = cfg.d2d_dist_range;
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let du_xy: Vec<Point> = (0..cfg.n_du).map(|_| sample_point(&mut rng, cfg.area_half)).collect();
        let dt_xy: Vec<Point> = (0..cfg.n_d2d).map(|_| sample_point(&mut rng, cfg.area_half)).collect();
        let dr_xy: Vec<Point> = dt_xy
            .iter()
            .map(|t| {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let len = if lo == hi { lo } else { rng.random_range(lo..=hi) };
                [t[0] + len * angle.cos(), t[1] + len * angle.sin()]
            })
            .collect();
        let fading = cfg.fading.then(|| {
            let m = cfg.n_d2d;
            LinkFading {
                direct: (0..m).map(|_| unit_exponential(&mut rng)).collect(),
                to_du: (0..m)
                    .map(|_| (0..cfg.n_du).map(|_| unit_exponential(&mut rng)).collect())
                    .collect(),
                cross: (0..m)
                    .map(|_| (0..m).map(|_| unit_exponential(&mut rng)).collect())
                    .collect(),
            }
        });
        items.push(Scenario {
            du_xy,
            dt_xy,
            dr_xy,
            constants: cfg.constants,
            fading,
        });
    }
    Ok(Dataset {
        items,
        meta: cfg.clone(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    tool_version: String,
    count: usize,
    units: Units,
    meta: GenConfig,
}

#[derive(Serialize, Deserialize)]
struct Units {
    coordinates: String,
    powers: String,
    gains: String,
    rates: String,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            coordinates: "m".into(),
            powers: "W".into(),
            gains: "linear".into(),
            rates: "bit/s/Hz".into(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: usize,
    scenario: Scenario,
}

fn parse_line<T: serde::de::DeserializeOwned>(line: &str, lineno: usize) -> Result<T, DatasetError> {
    let de = &mut serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(de).map_err(|e| DatasetError::Parse {
        line: lineno,
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Every item must match the meta counts and constants.
    pub fn validate(&self) -> Result<(), DatasetError> {
        self.meta.validate()?;
        for (id, s) in self.items.iter().enumerate() {
            let fail = |reason: String| Err(DatasetError::Validation { id, reason });
            if s.n_du() != self.meta.n_du || s.n_d2d() != self.meta.n_d2d {
                return fail(format!(
                    "counts K={} M={} differ from dataset K={} M={}",
                    s.n_du(),
                    s.n_d2d(),
                    self.meta.n_du,
                    self.meta.n_d2d
                ));
            }
            if s.constants != self.meta.constants {
                return fail("physical constants differ from dataset".into());
            }
            if let Err(e) = s.validate() {
                return fail(e.to_string());
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), std::io::Error> {
        let header = Header {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            tool_version: crate::VERSION.into(),
            count: self.items.len(),
            units: Units::default(),
            meta: self.meta.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (id, s) in self.items.iter().enumerate() {
            let rec = Record {
                id,
                scenario: s.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Dataset, DatasetError> {
        let io = |source| DatasetError::Io {
            path: "<reader>".into(),
            source,
        };
        let mut lines = r.lines();
        let first = match lines.next() {
            Some(l) => l.map_err(io)?,
            None => {
                return Err(DatasetError::Parse {
                    line: 1,
                    field: "header".into(),
                    message: "empty file".into(),
                });
            }
        };
        let header: Header = parse_line(&first, 1)?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(DatasetError::Parse {
                line: 1,
                field: "format".into(),
                message: format!(
                    "expected {DATASET_FORMAT} v{DATASET_VERSION}, found {} v{}",
                    header.format, header.version
                ),
            });
        }
        let mut items = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = parse_line(&line, lineno)?;
            if rec.id != items.len() {
                return Err(DatasetError::Parse {
                    line: lineno,
                    field: "id".into(),
                    message: format!("expected id {}, found {}", items.len(), rec.id),
                });
            }
            items.push(rec.scenario);
        }
        if items.len() != header.count {
            return Err(DatasetError::Truncated {
                expected: header.count,
                found: items.len(),
            });
        }
        let ds = Dataset {
            items,
            meta: header.meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let io = |source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        };
        let f = File::create(path).map_err(io)?;
        self.write_to(BufWriter::new(f)).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
        let f = File::open(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Dataset::read_from(BufReader::new(f)).map_err(|e| match e {
            DatasetError::Io { source, .. } => DatasetError::Io {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }
}

//! Versioned binary dataset container.
//!
//! Layout (all integers little-endian u32 unless noted):
//!
//! ```text
//! magic    8 bytes "EADRODS1"
//! M, L, T  u32 × 3          service / event-type / slot counts
//! roster   M × (len u32, utf-8 bytes)
//! count    u32              number of samples
//! sample   repeated:
//!   window_index u32
//!   label_y      u32        0 or 1
//!   culprit      u32        service index, 0xFFFF_FFFF when absent
//!   log_intensity f32 × M·L
//!   kpi           f32 × M·7·T   (channel-major per service)
//!   latency       f32 × M·T
//! ```
//!
//! Loads reject bad magic, truncation and inconsistent labels; the round
//! trip is bit-exact on every numeric field.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::telemetry::{Sample, KPI_COUNT};

const MAGIC: &[u8; 8] = b"EADRODS1";
const NO_CULPRIT: u32 = u32::MAX;

/// A featurized dataset: the service roster, feature dimensions and the
/// time-ordered samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub services: Vec<String>,
    pub l: usize,
    pub t: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn m(&self) -> usize {
        self.services.len()
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        let m = self.m();
        if s.log_intensity.len() != m * self.l
            || s.kpi.len() != m * KPI_COUNT * self.t
            || s.latency.len() != m * self.t
        {
            return Err(Error::data(format!(
                "sample {} arrays do not match M={m} L={} T={}",
                s.window_index, self.l, self.t
            )));
        }
        if s.label_y != s.label_culprit.is_some() {
            return Err(Error::data(format!(
                "sample {}: culprit must be present iff abnormal",
                s.window_index
            )));
        }
        Ok(())
    }
}

pub fn persist_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    for s in &dataset.samples {
        dataset.check_sample(s)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        for d in [dataset.m(), dataset.l, dataset.t] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for s in &dataset.services {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        w.write_all(&(dataset.samples.len() as u32).to_le_bytes())?;
        for s in &dataset.samples {
            w.write_all(&s.window_index.to_le_bytes())?;
            w.write_all(&(s.label_y as u32).to_le_bytes())?;
            w.write_all(&s.label_culprit.unwrap_or(NO_CULPRIT).to_le_bytes())?;
            for arr in [&s.log_intensity, &s.kpi, &s.latency] {
                for v in arr.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::data("dataset magic mismatch"));
    }
    let m = read_u32(&mut r)? as usize;
    let l = read_u32(&mut r)? as usize;
    let t = read_u32(&mut r)? as usize;
    let mut services = Vec::with_capacity(m);
    for _ in 0..m {
        let len = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; len];
        read_exact(&mut r, &mut buf)?;
        services.push(
            String::from_utf8(buf).map_err(|_| Error::data("dataset service name not utf-8"))?,
        );
    }
    let count = read_u32(&mut r)? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let window_index = read_u32(&mut r)?;
        let label_y = match read_u32(&mut r)? {
            0 => false,
            1 => true,
            other => return Err(Error::data(format!("bad label_y value {other}"))),
        };
        let culprit = read_u32(&mut r)?;
        let label_culprit = if culprit == NO_CULPRIT {
            None
        } else {
            if culprit as usize >= m {
                return Err(Error::data(format!("culprit index {culprit} out of range")));
            }
            Some(culprit)
        };
        if label_y != label_culprit.is_some() {
            return Err(Error::data("culprit must be present iff abnormal"));
        }
        let log_intensity = read_f32s(&mut r, m * l)?;
        let kpi = read_f32s(&mut r, m * KPI_COUNT * t)?;
        let latency = read_f32s(&mut r, m * t)?;
        samples.push(Sample {
            window_index,
            log_intensity,
            kpi,
            latency,
            label_y,
            label_culprit,
        });
    }
    Ok(Dataset {
        services,
        l,
        t,
        samples,
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::data("dataset truncated"))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        read_exact(r, &mut buf)?;
        out.push(f32::from_le_bytes(buf));
    }
    Ok(out)
}

//! Multi-channel measurement series and its CSV form.
//!
//! CSV layout: header `t,ch_0,...,ch_{m-1}`, one row per sample, `t` the
//! integer sample index. Channel display labels live in the grid fixture,
//! not in the data file.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Per-channel time series of sensor readings.
#[derive(Debug, Clone)]
pub struct MeasurementSeries {
    /// data[c][t] is channel c at sample t; all channels equal length.
    pub data: Vec<Vec<f64>>,
    /// Sampling rate metadata; not serialized in CSV.
    pub sample_rate_hz: f64,
}

impl MeasurementSeries {
    pub fn new(data: Vec<Vec<f64>>, sample_rate_hz: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("series needs at least one channel".into()));
        }
        let len = data[0].len();
        if data.iter().any(|c| c.len() != len) {
            return Err(Error::Data("channels have unequal lengths".into()));
        }
        Ok(MeasurementSeries { data, sample_rate_hz })
    }

    pub fn channels(&self) -> usize {
        self.data.len()
    }

    pub fn len(&self) -> usize {
        self.data[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c]
    }

    /// Measurement vector across channels at one sample.
    pub fn sample(&self, t: usize) -> Vec<f64> {
        self.data.iter().map(|c| c[t]).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "t")?;
        for c in 0..self.channels() {
            write!(out, ",ch_{}", c)?;
        }
        writeln!(out)?;
        for t in 0..self.len() {
            write!(out, "{}", t)?;
            for c in 0..self.channels() {
                write!(out, ",{}", self.data[c][t])?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.len() < 2 || headers.get(0) != Some("t") {
            return Err(Error::Data(format!(
                "{}: expected header t,ch_0,...  got {:?}",
                path.display(),
                headers
            )));
        }
        let channels = headers.len() - 1;
        let mut data: Vec<Vec<f64>> = vec![Vec::new(); channels];
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != channels + 1 {
                return Err(Error::Data(format!(
                    "{}: row {} has {} fields, expected {}",
                    path.display(),
                    line,
                    record.len(),
                    channels + 1
                )));
            }
            for c in 0..channels {
                let field = &record[c + 1];
                let v: f64 = field.parse().map_err(|_| {
                    Error::Data(format!("{}: row {}: bad number {:?}", path.display(), line, field))
                })?;
                data[c].push(v);
            }
        }
        if data[0].is_empty() {
            return Err(Error::Data(format!("{}: no samples", path.display())));
        }
        MeasurementSeries::new(data, 50.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let s = MeasurementSeries::new(
            vec![vec![1.0, 2.5, -0.125], vec![0.0, -1.0, 3.0e-7]],
            50.0,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.csv");
        s.write_csv(&path).unwrap();
        let back = MeasurementSeries::read_csv(&path).unwrap();
        assert_eq!(back.channels(), 2);
        assert_eq!(back.data, s.data);
    }

    #[test]
    fn rejects_ragged_channels() {
        assert!(MeasurementSeries::new(vec![vec![1.0], vec![1.0, 2.0]], 50.0).is_err());
    }

    #[test]
    fn rejects_missing_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(MeasurementSeries::read_csv(&path).is_err());
    }
}

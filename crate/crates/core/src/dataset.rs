//! Windowed forecasting samples and their on-disk format.
//!
//! A dataset file is a magic line, one line of JSON header, then the payload:
//! for every sample its input window followed by its target window, each
//! row-major (time, vertex) as little-endian `f64`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::advection::{simulate_batch, SimulationConfig, VertexSeries};
use crate::error::{CoreError, Result};
use crate::topology::GraphSpec;

pub const INPUT_LEN: usize = 25;
pub const TARGET_LEN: usize = 24;

const MAGIC: &str = "GNCDE-DATASET 1";

/// Contiguous input and target windows of one series; rows are time steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSample {
    pub n_vertices: usize,
    /// `input_len x n_vertices`, row-major.
    pub input: Vec<f64>,
    /// `target_len x n_vertices`, row-major.
    pub target: Vec<f64>,
}

impl ForecastSample {
    pub fn input_len(&self) -> usize {
        self.input.len() / self.n_vertices
    }

    pub fn target_len(&self) -> usize {
        self.target.len() / self.n_vertices
    }

    pub fn input_at(&self, t: usize, v: usize) -> f64 {
        self.input[t * self.n_vertices + v]
    }

    pub fn target_at(&self, t: usize, v: usize) -> f64 {
        self.target[t * self.n_vertices + v]
    }
}

/// First `in_len` points become the input, the next `out_len` the target.
pub fn build_dataset(series: &[VertexSeries], in_len: usize, out_len: usize) -> Result<Vec<ForecastSample>> {
    series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.len() < in_len + out_len {
                return Err(CoreError::Dataset(format!(
                    "series {i} has {} points, need {} + {}",
                    s.len(),
                    in_len,
                    out_len
                )));
            }
            let v = s.n_vertices();
            Ok(ForecastSample {
                n_vertices: v,
                input: s.data()[..in_len * v].to_vec(),
                target: s.data()[in_len * v..(in_len + out_len) * v].to_vec(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub graph: GraphSpec,
    pub simulation: SimulationConfig,
    pub seed: u64,
    pub n_samples: usize,
    pub n_vertices: usize,
    pub input_len: usize,
    pub target_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<ForecastSample>,
}

impl Dataset {
    /// Simulates `n_series` series on `graph` and windows them.
    pub fn generate(graph: &GraphSpec, simulation: &SimulationConfig, n_series: usize) -> Result<Self> {
        let network = graph.network(simulation.segments_per_edge)?;
        let series = simulate_batch(&network, simulation, n_series)?;
        let samples = build_dataset(&series, INPUT_LEN, TARGET_LEN)?;
        Ok(Self {
            header: DatasetHeader {
                graph: graph.clone(),
                simulation: simulation.clone(),
                seed: simulation.seed,
                n_samples: samples.len(),
                n_vertices: network.n_vertices(),
                input_len: INPUT_LEN,
                target_len: TARGET_LEN,
            },
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_vertices(&self) -> usize {
        self.header.n_vertices
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let h = &self.header;
        if h.n_samples != self.samples.len() {
            return Err(CoreError::Dataset(format!(
                "header counts {} samples, dataset holds {}",
                h.n_samples,
                self.samples.len()
            )));
        }
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "{}", serde_json::to_string(h)?)?;
        let mut buf = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            if s.input.len() != h.input_len * h.n_vertices || s.target.len() != h.target_len * h.n_vertices {
                return Err(CoreError::Dataset(format!("sample {i} does not match header shapes")));
            }
            buf.clear();
            for x in s.input.iter().chain(&s.target) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(CoreError::Dataset(format!("bad magic line {:?}", line.trim_end())));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: DatasetHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| CoreError::Dataset(format!("malformed header: {e}")))?;
        if header.n_vertices != header.graph.n_vertices {
            return Err(CoreError::Dataset(format!(
                "header n_vertices {} disagrees with graph ({})",
                header.n_vertices, header.graph.n_vertices
            )));
        }
        let (vi, vt) = (
            header.input_len * header.n_vertices,
            header.target_len * header.n_vertices,
        );
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let expected = header.n_samples * (vi + vt) * 8;
        if payload.len() != expected {
            return Err(CoreError::Dataset(format!(
                "payload has {} bytes, header shapes require {expected}",
                payload.len()
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let samples = values
            .chunks_exact(vi + vt)
            .map(|chunk| ForecastSample {
                n_vertices: header.n_vertices,
                input: chunk[..vi].to_vec(),
                target: chunk[vi..].to_vec(),
            })
            .collect();
        Ok(Self { header, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }

    /// One row per (sample, time step) with the input and target windows
    /// concatenated in time: `sample,t,v1,...,vN`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["sample".to_string(), "t".to_string()];
        header.extend((1..=self.n_vertices()).map(|v| format!("v{v}")));
        out.write_record(&header)?;
        for (i, s) in self.samples.iter().enumerate() {
            let rows = s.input.chunks(s.n_vertices).chain(s.target.chunks(s.n_vertices));
            for (t, row) in rows.enumerate() {
                let mut rec = vec![i.to_string(), t.to_string()];
                rec.extend(row.iter().map(|v| v.to_string()));
                out.write_record(&rec)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

//! `VCK1` checkpoints: student and teacher weights, Adam state and schedule
//! position as a flat list of named f32 tensors.
//!
//! Layout (little-endian): magic `VCKP`, `u32` version (1), `u32` tensor
//! count, then per tensor `u16` name length, UTF-8 name, `u8` rank,
//! `rank` x `u32` dims, f32 data.

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{AdamConfig, NetConfig, NetParams, OptimizerState, ParamTensor};
use crate::vv1::Reader;

pub const MAGIC: &[u8; 4] = b"VCKP";
pub const VERSION: u32 = 1;

/// Largest counter stored exactly in an f32.
const MAX_EXACT_COUNT: u64 = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub student: NetParams<f32>,
    pub teacher: NetParams<f32>,
    pub optimizer: OptimizerState<f32>,
    /// Completed training iterations.
    pub iteration: u64,
    /// Scheduled total iterations of the run.
    pub total_iterations: u64,
}

#[derive(Clone, Debug, PartialEq)]
struct RawTensor {
    name: String,
    dims: Vec<u32>,
    data: Vec<f32>,
}

fn count_value(what: &str, n: u64) -> Result<f32> {
    if n > MAX_EXACT_COUNT {
        return Err(Error::invalid(format!("{what} {n} exceeds the checkpoint counter range")));
    }
    Ok(n as f32)
}

/// f32 that reads back as the shortest decimal of the stored value, so a rate
/// such as 0.15 survives the round trip exactly.
fn decimal(x: f32) -> f64 {
    x.to_string().parse().unwrap_or(x as f64)
}

fn as_count(what: &str, x: f32) -> Result<u64> {
    if !(x >= 0.0 && x.fract() == 0.0) {
        return Err(Error::format("VCK1 checkpoint", format!("{what} {x} is not a count")));
    }
    Ok(x as u64)
}

impl Checkpoint {
    pub fn new(student: NetParams<f32>, teacher: NetParams<f32>, optimizer: OptimizerState<f32>, iteration: u64, total_iterations: u64) -> Result<Self> {
        if student.config() != teacher.config() || !student.same_shape(&teacher) {
            return Err(Error::shape("student and teacher architectures differ"));
        }
        let sizes: Vec<usize> = student.tensors().iter().map(|t| t.data.len()).collect();
        let fits = |moments: &[Vec<f32>]| moments.len() == sizes.len() && moments.iter().zip(&sizes).all(|(m, &n)| m.len() == n);
        if !fits(&optimizer.m) || !fits(&optimizer.v) {
            return Err(Error::shape("optimizer moments do not match the student"));
        }
        Ok(Self { student, teacher, optimizer, iteration, total_iterations })
    }

    fn raw_tensors(&self) -> Result<Vec<RawTensor>> {
        let cfg = self.student.config();
        let h = self.optimizer.hyper;
        let mut out = vec![
            RawTensor {
                name: "config".into(),
                dims: vec![3],
                data: vec![count_value("levels", cfg.levels as u64)?, count_value("base filters", cfg.base_filters as u64)?, cfg.dropout_rate as f32],
            },
            RawTensor {
                name: "schedule".into(),
                dims: vec![2],
                data: vec![count_value("iteration", self.iteration)?, count_value("total iterations", self.total_iterations)?],
            },
            RawTensor {
                name: "adam_hyper".into(),
                dims: vec![4],
                data: vec![h.learning_rate as f32, h.beta1 as f32, h.beta2 as f32, h.eps as f32],
            },
            RawTensor {
                name: "adam_t".into(),
                dims: vec![1],
                data: vec![count_value("adam step", self.optimizer.t)?],
            },
        ];
        let dims_of = |t: &ParamTensor<f32>| t.shape.iter().map(|&d| d as u32).collect::<Vec<_>>();
        for (prefix, params) in [("student", &self.student), ("teacher", &self.teacher)] {
            out.extend(params.tensors().iter().map(|t| RawTensor {
                name: format!("{prefix}/{}", t.name),
                dims: dims_of(t),
                data: t.data.clone(),
            }));
        }
        for (prefix, moments) in [("adam_m", &self.optimizer.m), ("adam_v", &self.optimizer.v)] {
            out.extend(self.student.tensors().iter().zip(moments.iter()).map(|(t, m)| RawTensor {
                name: format!("{prefix}/{}", t.name),
                dims: dims_of(t),
                data: m.clone(),
            }));
        }
        Ok(out)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let tensors = self.raw_tensors()?;
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::format("VCK1 checkpoint", reason);
        let mut r = Reader { buf: bytes, pos: 0 };
        let short = || bad("truncated".into());
        if r.take(4).ok_or_else(short)? != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.u32().ok_or_else(short)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = r.u32().ok_or_else(short)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u16().ok_or_else(short)? as usize;
            let name = std::str::from_utf8(r.take(len).ok_or_else(short)?).map_err(|_| bad("tensor name is not UTF-8".into()))?.to_string();
            let rank = r.u8().ok_or_else(short)? as usize;
            let dims: Vec<u32> = (0..rank).map(|_| r.u32()).collect::<Option<_>>().ok_or_else(short)?;
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize)).ok_or_else(|| bad(format!("{name}: dims overflow")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| bad(format!("{name}: dims overflow")))?).ok_or_else(short)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(RawTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes".into()));
        }
        Self::from_raw(tensors)
    }

    fn from_raw(tensors: Vec<RawTensor>) -> Result<Self> {
        let bad = |reason: String| Error::format("VCK1 checkpoint", reason);
        let mut it = tensors.into_iter();
        let mut header = |name: &str, len: usize| -> Result<Vec<f32>> {
            let t = it.next().ok_or_else(|| bad(format!("missing {name}")))?;
            if t.name != name || t.data.len() != len {
                return Err(bad(format!("expected {name}[{len}], found {}[{}]", t.name, t.data.len())));
            }
            Ok(t.data)
        };
        let cfg = header("config", 3)?;
        let schedule = header("schedule", 2)?;
        let hyper = header("adam_hyper", 4)?;
        let adam_t = header("adam_t", 1)?;
        let config = NetConfig {
            levels: as_count("levels", cfg[0])? as usize,
            base_filters: as_count("base filters", cfg[1])? as usize,
            dropout_rate: decimal(cfg[2]),
        };
        config.validate().map_err(|e| bad(format!("invalid network config: {e}")))?;
        let template = NetParams::<f32>::zeros(config)?;
        let mut section = |prefix: &str| -> Result<Vec<ParamTensor<f32>>> {
            template
                .tensors()
                .iter()
                .map(|want| {
                    let t = it.next().ok_or_else(|| bad(format!("missing {prefix}/{}", want.name)))?;
                    let dims: Vec<usize> = t.dims.iter().map(|&d| d as usize).collect();
                    if t.name != format!("{prefix}/{}", want.name) || dims != want.shape {
                        return Err(bad(format!("expected {prefix}/{} {:?}, found {} {:?}", want.name, want.shape, t.name, dims)));
                    }
                    Ok(ParamTensor { name: want.name.clone(), shape: dims, data: t.data })
                })
                .collect()
        };
        let student = NetParams::from_tensors(config, section("student")?)?;
        let teacher = NetParams::from_tensors(config, section("teacher")?)?;
        let m = section("adam_m")?.into_iter().map(|t| t.data).collect();
        let v = section("adam_v")?.into_iter().map(|t| t.data).collect();
        if let Some(extra) = it.next() {
            return Err(bad(format!("unexpected tensor {}", extra.name)));
        }
        let optimizer = OptimizerState {
            hyper: AdamConfig {
                learning_rate: decimal(hyper[0]),
                beta1: decimal(hyper[1]),
                beta2: decimal(hyper[2]),
                eps: decimal(hyper[3]),
            },
            m,
            v,
            t: as_count("adam step", adam_t[0])?,
        };
        Self::new(student, teacher, optimizer, as_count("iteration", schedule[0])?, as_count("total iterations", schedule[1])?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(path.as_ref().display().to_string(), reason),
            other => other,
        })
    }
}

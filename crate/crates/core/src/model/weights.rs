//! Named weight tensors, the seeded random initializer and the binary weight file.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "EMOE"  u32 version  u32 config_len  config_len bytes of JSON ModelConfig
//! per tensor, in the order of `tensor_specs`:
//!   u16 name_len  name  u8 rank  u32 dims[rank]  u8 width  u8 int_bits  u8 flags
//!   raws as two's-complement words of 8, 16 or 32 bits
//! ```

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{BlockKind, ModelConfig};
use crate::error::{Error, Result};
use crate::fixedpoint::{FxTensor, QFormat, RunContext};

pub const MAGIC: &[u8; 4] = b"EMOE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    BiasAttention,
    BiasMlp,
    Gamma,
    Beta,
    PosEmbed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
}

/// Every tensor of a model, in file order.
pub fn tensor_specs(cfg: &ModelConfig) -> Vec<TensorSpec> {
    use TensorRole::*;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: &[usize], role| specs.push(TensorSpec { name, shape: shape.to_vec(), role });
    let linear = |push: &mut dyn FnMut(String, &[usize], TensorRole), prefix: String, out: usize, inp: usize, bias| {
        push(format!("{prefix}.weight"), &[out, inp], Weight);
        push(format!("{prefix}.bias"), &[out], bias);
    };
    let d = cfg.d;
    linear(&mut push, "patch_embed".into(), d, cfg.patch_dim(), BiasAttention);
    push("pos_embed".into(), &[cfg.n_tokens(), d], PosEmbed);
    for b in 0..cfg.n_blocks {
        let norm = |push: &mut dyn FnMut(String, &[usize], TensorRole), which: &str| {
            push(format!("blocks.{b}.{which}.gamma"), &[d], Gamma);
            push(format!("blocks.{b}.{which}.beta"), &[d], Beta);
        };
        norm(&mut push, "norm1");
        for proj in ["q", "k", "v", "o"] {
            linear(&mut push, format!("blocks.{b}.attn.{proj}"), d, d, BiasAttention);
        }
        norm(&mut push, "norm2");
        match cfg.block_kind(b) {
            BlockKind::Vit => {
                linear(&mut push, format!("blocks.{b}.mlp.fc1"), cfg.mlp_dim, d, BiasMlp);
                linear(&mut push, format!("blocks.{b}.mlp.fc2"), d, cfg.mlp_dim, BiasMlp);
            }
            BlockKind::Moe => {
                for t in 0..cfg.n_tasks {
                    linear(&mut push, format!("blocks.{b}.gates.{t}"), cfg.m_experts, d, BiasAttention);
                }
                for e in 0..cfg.m_experts {
                    linear(&mut push, format!("blocks.{b}.experts.{e}.fc1"), cfg.h_moe, d, BiasMlp);
                    linear(&mut push, format!("blocks.{b}.experts.{e}.fc2"), d, cfg.h_moe, BiasMlp);
                }
            }
        }
    }
    push("norm.gamma".into(), &[d], Gamma);
    push("norm.beta".into(), &[d], Beta);
    specs
}

/// A model's configuration and its tensors in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelWeights {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<FxTensor>,
    index: HashMap<String, usize>,
}

impl ModelWeights {
    pub fn new(config: ModelConfig, tensors: Vec<(String, FxTensor)>) -> Result<Self> {
        config.validate()?;
        let specs = tensor_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::WeightFile(format!("{} tensors given, config needs {}", tensors.len(), specs.len())));
        }
        for (spec, (name, t)) in specs.iter().zip(&tensors) {
            check_spec(spec, name, t.shape())?;
        }
        let (names, tensors): (Vec<_>, Vec<_>) = tensors.into_iter().unzip();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self { config, names, tensors, index })
    }

    /// Seed-reproducible random weights sized to keep activations well inside range.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tensors = RandomTensors::new(config, seed).collect::<Result<Vec<_>>>()?;
        Self::new(config.clone(), tensors)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&FxTensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::WeightFile(format!("no tensor named {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FxTensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(FxTensor::len).sum()
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        write_header(&mut out, &self.config)?;
        for (name, t) in self.iter() {
            write_tensor(&mut out, name, t)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(inp: R) -> Result<Self> {
        let mut inp = BufReader::new(inp);
        let mut magic = [0u8; 4];
        inp.read_exact(&mut magic).map_err(|_| Error::WeightFile("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::WeightFile(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut inp)?;
        if version != VERSION {
            return Err(Error::WeightFile(format!("unsupported version {version}")));
        }
        let len = read_u32(&mut inp)? as usize;
        let mut json = vec![0u8; len];
        read_exact(&mut inp, &mut json)?;
        let text = String::from_utf8(json).map_err(|_| Error::WeightFile("config is not UTF-8".into()))?;
        let config = ModelConfig::from_json(&text)?;
        let mut tensors = Vec::new();
        for spec in tensor_specs(&config) {
            let (name, t) = read_tensor(&mut inp)?;
            check_spec(&spec, &name, t.shape())?;
            tensors.push((name, t));
        }
        if inp.read(&mut [0u8])? != 0 {
            return Err(Error::WeightFile("trailing bytes after last tensor".into()));
        }
        Self::new(config, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Stream random weights straight to a file without holding the model in memory.
pub fn write_random_weights<W: Write>(config: &ModelConfig, seed: u64, out: W) -> Result<()> {
    config.validate()?;
    let mut out = BufWriter::new(out);
    write_header(&mut out, config)?;
    for entry in RandomTensors::new(config, seed) {
        let (name, t) = entry?;
        write_tensor(&mut out, &name, &t)?;
    }
    out.flush()?;
    Ok(())
}

fn check_spec(spec: &TensorSpec, name: &str, shape: &[usize]) -> Result<()> {
    if spec.name != name {
        return Err(Error::WeightFile(format!("expected tensor {:?}, found {name:?}", spec.name)));
    }
    if spec.shape != shape {
        return Err(Error::WeightFile(format!("{name}: shape {shape:?}, expected {:?}", spec.shape)));
    }
    Ok(())
}

struct RandomTensors<'a> {
    config: &'a ModelConfig,
    specs: std::vec::IntoIter<TensorSpec>,
    rng: ChaCha8Rng,
}

impl<'a> RandomTensors<'a> {
    fn new(config: &'a ModelConfig, seed: u64) -> Self {
        Self { config, specs: tensor_specs(config).into_iter(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Iterator for RandomTensors<'_> {
    type Item = Result<(String, FxTensor)>;

    fn next(&mut self) -> Option<Self::Item> {
        let spec = self.specs.next()?;
        let n: usize = spec.shape.iter().product();
        let (lo, hi) = match spec.role {
            TensorRole::Weight => {
                let r = 1.0 / (spec.shape[1] as f64).sqrt();
                (-r, r)
            }
            TensorRole::Gamma => (0.9, 1.1),
            TensorRole::BiasAttention | TensorRole::BiasMlp | TensorRole::Beta | TensorRole::PosEmbed => (-0.02, 0.02),
        };
        let values: Vec<f64> = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        let formats = &self.config.formats;
        let fmt = match spec.role {
            TensorRole::BiasAttention => Ok(formats.bias_attention),
            TensorRole::BiasMlp => Ok(formats.bias_mlp),
            _ => formats.weight_format_for(values.iter().fold(0.0, |m: f64, v| m.max(v.abs()))),
        };
        let mut ctx = RunContext::new();
        Some(fmt.and_then(|fmt| FxTensor::from_f64(&spec.shape, fmt, &values, &mut ctx)).map(|t| (spec.name, t)))
    }
}

fn word_bytes(fmt: QFormat) -> Result<usize> {
    match fmt.width_bits {
        1..=8 => Ok(1),
        9..=16 => Ok(2),
        17..=32 => Ok(4),
        w => Err(Error::WeightFile(format!("{w}-bit values do not fit a 32-bit word"))),
    }
}

fn write_header<W: Write>(out: &mut W, config: &ModelConfig) -> Result<()> {
    let json = serde_json::to_vec(config)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    Ok(())
}

fn write_tensor<W: Write>(out: &mut W, name: &str, t: &FxTensor) -> Result<()> {
    let fmt = t.fmt();
    let bytes = word_bytes(fmt)?;
    out.write_all(&(name.len() as u16).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&[t.shape().len() as u8])?;
    for &d in t.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    out.write_all(&[fmt.width_bits, fmt.int_bits, fmt.flags()])?;
    for &r in t.raw() {
        out.write_all(&r.to_le_bytes()[..bytes])?;
    }
    Ok(())
}

fn read_exact<R: Read>(inp: &mut R, buf: &mut [u8]) -> Result<()> {
    inp.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::WeightFile("unexpected end of file".into()),
        _ => Error::Io(e),
    })
}

fn read_u8<R: Read>(inp: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(inp, &mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(inp: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(inp, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_tensor<R: Read>(inp: &mut R) -> Result<(String, FxTensor)> {
    let mut b = [0u8; 2];
    read_exact(inp, &mut b)?;
    let mut name = vec![0u8; u16::from_le_bytes(b) as usize];
    read_exact(inp, &mut name)?;
    let name = String::from_utf8(name).map_err(|_| Error::WeightFile("tensor name is not UTF-8".into()))?;
    let rank = read_u8(inp)? as usize;
    let shape = (0..rank).map(|_| read_u32(inp).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let (width, int_bits, flags) = (read_u8(inp)?, read_u8(inp)?, read_u8(inp)?);
    let fmt = QFormat::from_descriptor(width, int_bits, flags)?;
    let bytes = word_bytes(fmt)?;
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * bytes];
    read_exact(inp, &mut buf)?;
    let raws = buf
        .chunks_exact(bytes)
        .map(|w| {
            let mut le = [0u8; 8];
            le[..bytes].copy_from_slice(w);
            let v = i64::from_le_bytes(le);
            let unused = 64 - 8 * bytes as u32;
            if fmt.signed {
                (v << unused) >> unused
            } else {
                v
            }
        })
        .collect();
    let t = FxTensor::from_raw(&shape, fmt, raws).map_err(|e| Error::WeightFile(format!("{name}: {e}")))?;
    Ok((name, t))
}

//! Flat binary checkpoint container.
//!
//! ```text
//! "SVDA" | version: u32 | parameter count: u64 |
//! repeated until EOF: name_len: u16 | name (utf-8) | count: u64 | count x f64
//! ```
//!
//! All integers and reals are little-endian. The parameter count is the total
//! number of scalars over parameter sections. Sections named `meta.*` carry
//! the model configuration and the training epoch and are excluded from it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::attention::{AttentionConfig, Mechanism};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVDA";
pub const CHECKPOINT_VERSION: u32 = 1;

const CONFIG_SECTION: &str = "meta.config";
const EPOCH_SECTION: &str = "meta.epoch";

/// A model snapshot plus the epoch it was taken at (1-based), if any.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub epoch: Option<usize>,
}

fn encode_config(c: &ModelConfig) -> Vec<f64> {
    let mech = match c.attention.mechanism {
        Mechanism::Svda => 0.0,
        Mechanism::Baseline => 1.0,
    };
    [
        c.image_h,
        c.image_w,
        c.channels,
        c.patch_size,
        c.d_model,
        c.num_layers,
        c.attention.num_heads,
        c.attention.d_k,
        c.mlp_hidden,
    ]
    .iter()
    .map(|&v| v as f64)
    .chain([mech, f64::from(u8::from(c.attention.capture_diagnostics))])
    .collect()
}

fn decode_config(v: &[f64]) -> Result<ModelConfig> {
    if v.len() != 11 {
        return Err(Error::Checkpoint(format!("config section has {} entries, expected 11", v.len())));
    }
    let int = |x: f64| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 && x < 1e15 {
            Ok(x as usize)
        } else {
            Err(Error::Checkpoint(format!("config entry {x} is not a non-negative integer")))
        }
    };
    let mechanism = match v[9] {
        m if m == 0.0 => Mechanism::Svda,
        m if m == 1.0 => Mechanism::Baseline,
        m => return Err(Error::Checkpoint(format!("unknown mechanism code {m}"))),
    };
    let config = ModelConfig {
        image_h: int(v[0])?,
        image_w: int(v[1])?,
        channels: int(v[2])?,
        patch_size: int(v[3])?,
        d_model: int(v[4])?,
        num_layers: int(v[5])?,
        attention: AttentionConfig {
            d_model: int(v[4])?,
            num_heads: int(v[6])?,
            d_k: int(v[7])?,
            mechanism,
            capture_diagnostics: v[10] != 0.0,
        },
        mlp_hidden: int(v[8])?,
        head: Default::default(),
    };
    config.validate()?;
    Ok(config)
}

fn write_section(w: &mut impl Write, name: &str, values: &[f64]) -> std::io::Result<()> {
    let len = u16::try_from(name.len()).expect("section name fits u16");
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, model: &Model, epoch: Option<usize>) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(model.param_count() as u64).to_le_bytes())?;
    write_section(w, CONFIG_SECTION, &encode_config(&model.config))?;
    if let Some(e) = epoch {
        write_section(w, EPOCH_SECTION, &[e as f64])?;
    }
    let mut result = Ok(());
    model.params.visit(&mut |name, t| {
        if result.is_ok() {
            result = write_section(w, &name, t.values());
        }
    });
    result
}

pub fn save_checkpoint(path: &Path, model: &Model, epoch: Option<usize>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, model, epoch).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn malformed(reason: impl Into<String>) -> Error {
        Error::MalformedHeader {
            context: "checkpoint".into(),
            reason: reason.into(),
        }
    }

    fn exact<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Self::malformed(format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    /// `None` on clean EOF at a section boundary.
    fn section(&mut self) -> Result<Option<(String, Vec<f64>)>> {
        let mut first = [0u8; 1];
        match self.inner.read(&mut first) {
            Ok(0) => return Ok(None),
            Ok(_) => {}
            Err(e) => return Err(Self::malformed(format!("read error: {e}"))),
        }
        let [second] = self.exact::<1>("section name length")?;
        let len = u16::from_le_bytes([first[0], second]) as usize;
        let mut name = vec![0u8; len];
        self.inner
            .read_exact(&mut name)
            .map_err(|_| Self::malformed("truncated section name"))?;
        let name = String::from_utf8(name).map_err(|_| Self::malformed("section name is not utf-8"))?;
        let count = u64::from_le_bytes(self.exact::<8>("element count")?) as usize;
        let mut values = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            values.push(f64::from_le_bytes(self.exact::<8>(&format!("section {name}"))?));
        }
        Ok(Some((name, values)))
    }
}

pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint> {
    let mut reader = Reader { inner: r };
    let magic = reader.exact::<4>("magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Reader::<&[u8]>::malformed(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(reader.exact::<4>("version")?);
    if version != CHECKPOINT_VERSION {
        return Err(Reader::<&[u8]>::malformed(format!("unsupported version {version}")));
    }
    let declared = u64::from_le_bytes(reader.exact::<8>("parameter count")?) as usize;

    let mut config = None;
    let mut epoch = None;
    let mut sections = std::collections::BTreeMap::new();
    while let Some((name, values)) = reader.section()? {
        match name.as_str() {
            CONFIG_SECTION => config = Some(decode_config(&values)?),
            EPOCH_SECTION => epoch = values.first().map(|&e| e as usize),
            _ => {
                if sections.insert(name.clone(), values).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate section {name}")));
                }
            }
        }
    }
    let config = config.ok_or_else(|| Error::Checkpoint("missing config section".into()))?;
    let mut model = Model::init(config, 0)?;
    let mut problem = None;
    model.params.visit_mut(&mut |name, t| {
        if problem.is_some() {
            return;
        }
        match sections.remove(&name) {
            Some(values) if values.len() == t.len() => t.values_mut().copy_from_slice(&values),
            Some(values) => {
                problem = Some(format!("section {name} has {} values, expected {}", values.len(), t.len()))
            }
            None => problem = Some(format!("missing section {name}")),
        }
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if let Some(extra) = sections.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected section {extra}")));
    }
    if declared != model.param_count() {
        return Err(Error::Checkpoint(format!(
            "header declares {declared} parameters, sections hold {}",
            model.param_count()
        )));
    }
    Ok(Checkpoint { model, epoch })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

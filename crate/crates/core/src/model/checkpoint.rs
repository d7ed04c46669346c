//! `CATCKPT1` container: magic bytes, a little-endian `u64` header length,
//! a UTF-8 header, then every array's values as little-endian `f64` in
//! header order.
//!
//! Header lines are tab-separated: `meta <key> <value>` or
//! `array <name> <d0,d1,...>`.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::condition::{ConditionTable, TokenKind};
use super::denoiser::{DenoiserConfig, DenoiserParams, Linear};
use super::lora::{LoraAdapter, LoraFactors};
use crate::autodiff::Tensor;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CATCKPT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrayFile {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Tensor)>,
}

impl ArrayFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) {
        self.arrays.push((name.to_string(), tensor));
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(|s| s.as_str()).ok_or_else(|| Error::Format(format!("missing meta '{key}'")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| Error::Format(format!("meta '{key}' = '{raw}' does not parse")))
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing array '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            if [k, v].iter().any(|s| s.contains(['\t', '\n'])) {
                return Err(Error::Format(format!("meta '{k}' contains a tab or newline")));
            }
            header.push_str(&format!("meta\t{k}\t{v}\n"));
        }
        for (name, t) in &self.arrays {
            if name.contains(['\t', '\n']) {
                return Err(Error::Format(format!("array name '{name}' contains a tab or newline")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("array\t{name}\t{}\n", dims.join(",")));
        }
        let total: usize = self.arrays.iter().map(|(_, t)| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(16 + header.len() + total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing CATCKPT1 magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("header length exceeds file".into()))?;
        let header =
            std::str::from_utf8(&bytes[16..header_end]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let mut file = ArrayFile::new();
        let mut shapes = Vec::new();
        for line in header.lines() {
            let parts: Vec<&str> = line.split('\t').collect();
            match parts.as_slice() {
                ["meta", k, v] => {
                    file.meta.insert(k.to_string(), v.to_string());
                }
                ["array", name, dims] => {
                    let shape = dims
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::Format(format!("bad shape '{dims}' for '{name}'")))?;
                    shapes.push((name.to_string(), shape));
                }
                _ => return Err(Error::Format(format!("bad header line '{line}'"))),
            }
        }
        let mut offset = header_end;
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > bytes.len() {
                return Err(Error::Format(format!("array '{name}' truncated")));
            }
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            file.arrays.push((name.clone(), Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// A pretrained backbone: denoiser weights, condition table and schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    pub params: DenoiserParams,
    pub conditions: ConditionTable,
    pub schedule: ScheduleConfig,
}

/// Output of one fine-tuning run: an adapter (absent in textual-embedding
/// mode) and the run's condition table with its trigger tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBundle {
    pub adapter: Option<LoraAdapter>,
    pub conditions: ConditionTable,
}

fn encode_kinds(kinds: &[TokenKind]) -> String {
    kinds
        .iter()
        .map(|k| match k {
            TokenKind::Null => "null".to_string(),
            TokenKind::Class(c) => format!("class:{c}"),
            TokenKind::Trigger { name, base_class } => format!("trigger:{base_class}:{name}"),
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn decode_kinds(raw: &str) -> Result<Vec<TokenKind>> {
    raw.split(';')
        .map(|item| {
            let bad = || Error::Format(format!("bad token kind '{item}'"));
            if item == "null" {
                Ok(TokenKind::Null)
            } else if let Some(c) = item.strip_prefix("class:") {
                Ok(TokenKind::Class(c.parse().map_err(|_| bad())?))
            } else if let Some(rest) = item.strip_prefix("trigger:") {
                let (base, name) = rest.split_once(':').ok_or_else(bad)?;
                Ok(TokenKind::Trigger { name: name.to_string(), base_class: base.parse().map_err(|_| bad())? })
            } else {
                Err(bad())
            }
        })
        .collect()
}

fn push_conditions(file: &mut ArrayFile, table: &ConditionTable) {
    file.set_meta("tokens", encode_kinds(table.kinds()));
    file.set_meta("cond_dim", table.dim());
    file.push("conditions", table.as_tensor());
}

fn read_conditions(file: &ArrayFile) -> Result<ConditionTable> {
    let kinds = decode_kinds(file.meta("tokens")?)?;
    let dim: usize = file.meta_parse("cond_dim")?;
    let t = file.array("conditions")?;
    if t.shape() != [kinds.len(), dim] {
        return Err(Error::Format(format!("conditions shape {:?}", t.shape())));
    }
    let rows = t.data().chunks(dim).map(|r| r.to_vec()).collect();
    ConditionTable::from_parts(dim, rows, kinds)
}

fn join_usize(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split_usize(raw: &str) -> Result<Vec<usize>> {
    if raw.is_empty() {
        return Ok(vec![]);
    }
    raw.split(',').map(|s| s.parse().map_err(|_| Error::Format(format!("bad list '{raw}'")))).collect()
}

impl BaseModel {
    pub fn to_array_file(&self) -> ArrayFile {
        let mut f = ArrayFile::new();
        let cfg = &self.params.config;
        f.set_meta("kind", "base");
        f.set_meta("data_dim", cfg.data_dim);
        f.set_meta("time_dim", cfg.time_dim);
        f.set_meta("hidden", join_usize(&cfg.hidden));
        f.set_meta("schedule_steps", self.schedule.steps);
        f.set_meta("beta_min", self.schedule.beta_min);
        f.set_meta("beta_max", self.schedule.beta_max);
        if let Some(c) = self.schedule.clip_x0 {
            f.set_meta("clip_x0", c);
        }
        push_conditions(&mut f, &self.conditions);
        for (l, layer) in self.params.layers.iter().enumerate() {
            f.push(&format!("layer.{l}.weight"), layer.weight.clone());
            f.push(&format!("layer.{l}.bias"), layer.bias.clone());
        }
        f.push("gate.weight", self.params.gate.weight.clone());
        f.push("gate.bias", self.params.gate.bias.clone());
        f
    }

    pub fn from_array_file(f: &ArrayFile) -> Result<Self> {
        if f.meta("kind")? != "base" {
            return Err(Error::Format(format!("expected a base checkpoint, got '{}'", f.meta("kind")?)));
        }
        let conditions = read_conditions(f)?;
        let config = DenoiserConfig {
            data_dim: f.meta_parse("data_dim")?,
            time_dim: f.meta_parse("time_dim")?,
            cond_dim: conditions.dim(),
            hidden: split_usize(f.meta("hidden")?)?,
        };
        let layers = (0..config.layer_dims().len())
            .map(|l| {
                Ok(Linear {
                    weight: f.array(&format!("layer.{l}.weight"))?.clone(),
                    bias: f.array(&format!("layer.{l}.bias"))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let gate = Linear { weight: f.array("gate.weight")?.clone(), bias: f.array("gate.bias")?.clone() };
        let params = DenoiserParams { config, layers, gate, frozen: true };
        params.validate()?;
        let schedule = ScheduleConfig {
            steps: f.meta_parse("schedule_steps")?,
            beta_min: f.meta_parse("beta_min")?,
            beta_max: f.meta_parse("beta_max")?,
            clip_x0: if f.meta.contains_key("clip_x0") { Some(f.meta_parse("clip_x0")?) } else { None },
        };
        Ok(BaseModel { params, conditions, schedule })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_array_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_array_file(&ArrayFile::load(path)?)
    }
}

impl AdapterBundle {
    pub fn to_array_file(&self) -> ArrayFile {
        let mut f = ArrayFile::new();
        f.set_meta("kind", "adapter");
        push_conditions(&mut f, &self.conditions);
        if let Some(a) = &self.adapter {
            f.set_meta("rank", a.rank);
            f.set_meta("scale", a.scale);
            f.set_meta("layer_slots", a.layers.len());
            let targeted: Vec<usize> = (0..a.layers.len()).filter(|&l| a.layers[l].is_some()).collect();
            f.set_meta("targets", join_usize(&targeted));
            for l in targeted {
                let fac = a.layers[l].as_ref().expect("targeted");
                f.push(&format!("lora.{l}.down"), fac.down.clone());
                f.push(&format!("lora.{l}.up"), fac.up.clone());
            }
        }
        f
    }

    pub fn from_array_file(f: &ArrayFile) -> Result<Self> {
        if f.meta("kind")? != "adapter" {
            return Err(Error::Format(format!("expected an adapter checkpoint, got '{}'", f.meta("kind")?)));
        }
        let conditions = read_conditions(f)?;
        let adapter = if f.meta.contains_key("rank") {
            let slots: usize = f.meta_parse("layer_slots")?;
            let mut layers = vec![None; slots];
            for l in split_usize(f.meta("targets")?)? {
                let slot = layers.get_mut(l).ok_or_else(|| Error::Format(format!("target {l} out of range")))?;
                *slot = Some(LoraFactors {
                    down: f.array(&format!("lora.{l}.down"))?.clone(),
                    up: f.array(&format!("lora.{l}.up"))?.clone(),
                });
            }
            Some(LoraAdapter { rank: f.meta_parse("rank")?, scale: f.meta_parse("scale")?, layers })
        } else {
            None
        };
        Ok(AdapterBundle { adapter, conditions })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_array_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_array_file(&ArrayFile::load(path)?)
    }
}

/// SHA-256 over every weight's bit pattern, in layer order.
pub fn params_digest(params: &DenoiserParams) -> String {
    let mut h = Sha256::new();
    for layer in &params.layers {
        for v in layer.weight.data().iter().chain(layer.bias.data()) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn container_round_trip_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
            cols in 1usize..5,
        ) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let data = values[..rows * cols].to_vec();
            let mut f = ArrayFile::new();
            f.set_meta("note", "x=1");
            f.push("a", Tensor::matrix(rows, cols, data.clone()));
            f.push("b", Tensor::scalar(-0.0));
            let back = ArrayFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(back.array("a").unwrap()), bits(f.array("a").unwrap()));
            prop_assert_eq!(back.array("b").unwrap().data()[0].to_bits(), (-0.0f64).to_bits());
            prop_assert_eq!(back.meta("note").unwrap(), "x=1");
        }
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(ArrayFile::from_bytes(b"NOTMAGIC\0\0\0\0\0\0\0\0").is_err());
        let mut f = ArrayFile::new();
        f.push("a", Tensor::vector(vec![1.0, 2.0]));
        let mut bytes = f.to_bytes().unwrap();
        bytes.pop();
        assert!(ArrayFile::from_bytes(&bytes).is_err());
    }

    #[test]
    fn base_and_adapter_round_trip() {
        let mut r = rng::seeded(5);
        let params =
            DenoiserParams::init(DenoiserConfig { data_dim: 3, time_dim: 4, cond_dim: 2, hidden: vec![6, 5] }, &mut r);
        let mut conditions = ConditionTable::new(2, 2, &mut r);
        conditions.register_trigger("tok:a", 1, 0.1, &mut r).unwrap();
        let base = BaseModel {
            params: DenoiserParams { frozen: true, ..params },
            conditions: conditions.clone(),
            schedule: ScheduleConfig::default(),
        };
        let back =
            BaseModel::from_array_file(&ArrayFile::from_bytes(&base.to_array_file().to_bytes().unwrap()).unwrap())
                .unwrap();
        assert_eq!(back, base);
        assert_eq!(params_digest(&back.params), params_digest(&base.params));

        let adapter = LoraAdapter::init_targets(&base.params, &[0, 2], 2, 0.5, &mut r).unwrap();
        let bundle = AdapterBundle { adapter: Some(adapter), conditions };
        let back = AdapterBundle::from_array_file(
            &ArrayFile::from_bytes(&bundle.to_array_file().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, bundle);
    }
}

//! Versioned text checkpoints: parameters, optional optimizer moments and
//! loop position, enough to resume a run bit-exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::CheckpointError;
use crate::model::{Model, ModelConfig, ParamStore};
use crate::tensor::Tensor;

pub const HEADER: &str = "iada-ckpt v1";

/// Adam moments in parameter order, plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let z: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }
}

/// Where the training loop stands.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoopState {
    pub step: u64,
    pub epoch: u64,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: u64,
    pub best_valid: Option<f64>,
    pub bad_epochs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    pub state: Option<LoopState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().clone(),
            optimizer: None,
            state: None,
        }
    }

    pub fn into_model(self) -> Result<Model, CheckpointError> {
        Model::with_params(self.config, self.params).map_err(|e| CheckpointError::Parse {
            line: 0,
            reason: e.to_string(),
        })
    }
}

fn write_tensor(out: &mut String, name: &str, t: &Tensor) {
    let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    let _ = write!(out, "{name}\t{}\t", shape.join(","));
    for (i, v) in t.data().iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        // Debug formatting is the shortest string that parses back exactly.
        let _ = write!(out, "{v:?}");
    }
    out.push('\n');
}

fn write_meta(out: &mut String, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(out, "meta.{key}\t-\t{value}");
}

pub fn to_string(ckpt: &Checkpoint) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    let c = &ckpt.config;
    write_meta(&mut out, "vocab_size", c.vocab_size);
    write_meta(&mut out, "d_model", c.d_model);
    write_meta(&mut out, "n_heads", c.n_heads);
    write_meta(&mut out, "n_layers", c.n_layers);
    write_meta(&mut out, "d_ffn", c.d_ffn);
    write_meta(&mut out, "max_len", c.max_len);
    write_meta(&mut out, "dropout_rate", format!("{:?}", c.dropout_rate));
    write_meta(&mut out, "seed", c.seed);
    if let Some(s) = &ckpt.state {
        write_meta(&mut out, "step", s.step);
        write_meta(&mut out, "epoch", s.epoch);
        write_meta(&mut out, "batch_in_epoch", s.batch_in_epoch);
        if let Some(b) = s.best_valid {
            write_meta(&mut out, "best_valid", format!("{b:?}"));
        }
        write_meta(&mut out, "bad_epochs", s.bad_epochs);
    }
    for (name, t) in ckpt.params.iter() {
        write_tensor(&mut out, name, t);
    }
    if let Some(opt) = &ckpt.optimizer {
        write_meta(&mut out, "adam_t", opt.t);
        for ((name, _), (m, v)) in ckpt.params.iter().zip(opt.m.iter().zip(&opt.v)) {
            write_tensor(&mut out, &format!("adam.m.{name}"), m);
            write_tensor(&mut out, &format!("adam.v.{name}"), v);
        }
    }
    out
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_string(ckpt))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    parse(&std::fs::read_to_string(path)?)
}

pub fn parse(text: &str) -> Result<Checkpoint, CheckpointError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        _ => return Err(CheckpointError::Header { expected: HEADER }),
    }
    let mut meta: HashMap<String, (usize, String)> = HashMap::new();
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| CheckpointError::Parse { line: line_no, reason };
        let mut parts = line.splitn(3, '\t');
        let (Some(name), Some(shape), Some(values)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err("expected name, shape and values separated by tabs".into()));
        };
        if let Some(key) = name.strip_prefix("meta.") {
            meta.insert(key.to_string(), (line_no, values.to_string()));
            continue;
        }
        let shape: Vec<usize> = if shape.is_empty() {
            Vec::new()
        } else {
            shape
                .split(',')
                .map(|s| s.parse().map_err(|e| err(format!("shape `{s}`: {e}"))))
                .collect::<Result<_, _>>()?
        };
        let data: Vec<f64> = values
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| err(format!("value `{s}`: {e}"))))
            .collect::<Result<_, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| err(e.to_string()))?;
        tensors.push((name.to_string(), t));
    }

    fn get<T: std::str::FromStr>(meta: &HashMap<String, (usize, String)>, key: &str) -> Result<Option<T>, CheckpointError>
    where
        T::Err: std::fmt::Display,
    {
        meta.get(key)
            .map(|(line, v)| {
                v.parse().map_err(|e: T::Err| CheckpointError::Parse {
                    line: *line,
                    reason: format!("meta.{key} `{v}`: {e}"),
                })
            })
            .transpose()
    }
    fn need<T: std::str::FromStr>(meta: &HashMap<String, (usize, String)>, key: &str) -> Result<T, CheckpointError>
    where
        T::Err: std::fmt::Display,
    {
        get(meta, key)?.ok_or_else(|| CheckpointError::Missing(format!("meta.{key}")))
    }

    let config = ModelConfig {
        vocab_size: need(&meta, "vocab_size")?,
        d_model: need(&meta, "d_model")?,
        n_heads: need(&meta, "n_heads")?,
        n_layers: need(&meta, "n_layers")?,
        d_ffn: need(&meta, "d_ffn")?,
        max_len: need(&meta, "max_len")?,
        dropout_rate: need(&meta, "dropout_rate")?,
        seed: need(&meta, "seed")?,
    };
    // The layout a fresh model of this config would have.
    let template = Model::new(config.clone()).map_err(|e| CheckpointError::Parse {
        line: 0,
        reason: e.to_string(),
    })?;
    let mut by_name: HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut take = |name: &str, expected: &[usize]| -> Result<Tensor, CheckpointError> {
        let t = by_name.remove(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if t.shape() != expected {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                got: t.shape().to_vec(),
                expected: expected.to_vec(),
            });
        }
        Ok(t)
    };
    let mut params = ParamStore::new();
    for (name, fresh) in template.params().iter() {
        params.push(name, take(name, fresh.shape())?);
    }
    let optimizer = match get::<u64>(&meta, "adam_t")? {
        None => None,
        Some(t) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (name, fresh) in template.params().iter() {
                m.push(take(&format!("adam.m.{name}"), fresh.shape())?);
                v.push(take(&format!("adam.v.{name}"), fresh.shape())?);
            }
            Some(AdamState { m, v, t })
        }
    };
    let state = match get::<u64>(&meta, "step")? {
        None => None,
        Some(step) => Some(LoopState {
            step,
            epoch: need(&meta, "epoch")?,
            batch_in_epoch: need(&meta, "batch_in_epoch")?,
            best_valid: get(&meta, "best_valid")?,
            bad_epochs: need(&meta, "bad_epochs")?,
        }),
    };
    if let Some(extra) = by_name.keys().min() {
        return Err(CheckpointError::Parse {
            line: 0,
            reason: format!("unexpected tensor `{extra}`"),
        });
    }
    Ok(Checkpoint {
        config,
        params,
        optimizer,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ffn: 16,
            max_len: 32,
            dropout_rate: 0.1,
            seed: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::new(tiny()).unwrap();
        let mut ckpt = Checkpoint::from_model(&model);
        let mut opt = AdamState::zeros_like(model.params());
        opt.m[0].data_mut()[0] = 1e-300;
        opt.v[0].data_mut()[1] = std::f64::consts::PI;
        opt.t = 17;
        ckpt.optimizer = Some(opt);
        ckpt.state = Some(LoopState {
            step: 17,
            epoch: 2,
            batch_in_epoch: 3,
            best_valid: Some(0.1 + 0.2),
            bad_epochs: 1,
        });
        let back = parse(&to_string(&ckpt)).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.params.checksum(), model.params().checksum());
    }

    #[test]
    fn missing_tensor_is_named() {
        let model = Model::new(tiny()).unwrap();
        let text = to_string(&Checkpoint::from_model(&model));
        let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("out.b\t")).collect();
        match parse(&kept.join("\n")) {
            Err(CheckpointError::Missing(name)) => assert_eq!(name, "out.b"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_shape_is_reported() {
        let model = Model::new(tiny()).unwrap();
        let text = to_string(&Checkpoint::from_model(&model));
        let bad = text.replace("out.b\t12\t", "out.b\t3,4\t");
        assert!(matches!(parse(&bad), Err(CheckpointError::Shape { .. })));
    }

    #[test]
    fn header_required() {
        assert!(matches!(parse("iada-ckpt v2\n"), Err(CheckpointError::Header { .. })));
    }
}

//! `.ten` tensor files and the network JSON format.
//!
//! A `.ten` file is the magic `TEN1`, a little-endian `u32` rank, one
//! little-endian `u64` per dimension, then the row-major `f64` payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::network::{DropoutMode, LayerSpec, Network, Node};
use crate::numerics::{DenseMatrix, Padding, Tensor};

const MAGIC: &[u8; 4] = b"TEN1";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 8 * t.ndim() + 8 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Decodes a `.ten` payload; `label` names the source in errors.
pub fn decode_tensor(bytes: &[u8], label: &str) -> Result<Tensor> {
    let bad = |msg: String| Error::format(label, msg);
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic: not a TEN1 tensor file".into()));
    }
    let ndim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = ndim
        .checked_mul(8)
        .and_then(|n| n.checked_add(8))
        .filter(|&n| n <= bytes.len())
        .ok_or_else(|| bad(format!("truncated header: rank {ndim} needs more than {} bytes", bytes.len())))?;
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad(format!("dimensions {shape:?} overflow")))?;
    let payload = &bytes[header..];
    if Some(payload.len()) != count.checked_mul(8) {
        return Err(bad(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            count.saturating_mul(8)
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    decode_tensor(&bytes, &path.display().to_string())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

/// Where [`network_to_json`] puts parameter tensors.
#[derive(Debug, Clone)]
pub enum TensorStorage {
    /// Nested JSON arrays.
    Inline,
    /// One `.ten` file per parameter in `dir`, referenced by file name.
    Files { dir: PathBuf },
}

pub fn parse_network(path: &Path) -> Result<Network> {
    let label = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::format(&label, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_network_str(&text, base, &label)
}

/// Parses network JSON; `{"file": ...}` references resolve against `base_dir`.
pub fn parse_network_str(text: &str, base_dir: &Path, label: &str) -> Result<Network> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::format(label, format!("invalid JSON: {e}")))?;
    let cx = Cx { label, base_dir };
    let obj = root
        .as_object()
        .ok_or_else(|| cx.err("", "top level must be an object"))?;
    let input_shape = cx.usize_list(field(obj, "input_shape").ok_or_else(|| cx.err("input_shape", "missing"))?, "input_shape")?;
    let output = field(obj, "output")
        .and_then(Value::as_str)
        .ok_or_else(|| cx.err("output", "missing or not a string"))?;
    let nodes_v = field(obj, "nodes")
        .and_then(Value::as_array)
        .ok_or_else(|| cx.err("nodes", "missing or not an array"))?;
    let mut nodes = Vec::with_capacity(nodes_v.len());
    for (k, nv) in nodes_v.iter().enumerate() {
        let path = format!("nodes[{k}]");
        let no = nv.as_object().ok_or_else(|| cx.err(&path, "node must be an object"))?;
        let id = field(no, "id")
            .and_then(Value::as_str)
            .ok_or_else(|| cx.err(&format!("{path}.id"), "missing or not a string"))?
            .to_string();
        let at = |f: &str| format!("{path}.{f} (node `{id}`)");
        let inputs = field(no, "inputs")
            .and_then(Value::as_array)
            .ok_or_else(|| cx.err(&at("inputs"), "missing or not an array"))?
            .iter()
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| cx.err(&at("inputs"), "entries must be strings")))
            .collect::<Result<Vec<_>>>()?;
        let layer_v = field(no, "layer").ok_or_else(|| cx.err(&at("layer"), "missing"))?;
        let layer = cx.layer(layer_v, &format!("{path}.layer"), &id)?;
        nodes.push(Node { id, layer, inputs });
    }
    Network::new(input_shape, nodes, output)
}

fn field<'v>(obj: &'v Map<String, Value>, name: &str) -> Option<&'v Value> {
    obj.get(name)
}

struct Cx<'a> {
    label: &'a str,
    base_dir: &'a Path,
}

impl Cx<'_> {
    fn err(&self, path: &str, msg: impl std::fmt::Display) -> Error {
        if path.is_empty() {
            Error::format(self.label, msg.to_string())
        } else {
            Error::format(self.label, format!("{path}: {msg}"))
        }
    }

    fn usize_list(&self, v: &Value, path: &str) -> Result<Vec<usize>> {
        v.as_array()
            .ok_or_else(|| self.err(path, "expected an array of non-negative integers"))?
            .iter()
            .map(|d| {
                d.as_u64()
                    .map(|d| d as usize)
                    .ok_or_else(|| self.err(path, "expected an array of non-negative integers"))
            })
            .collect()
    }

    fn number(&self, v: Option<&Value>, path: &str) -> Result<f64> {
        v.and_then(Value::as_f64).ok_or_else(|| self.err(path, "missing or not a number"))
    }

    fn count(&self, v: Option<&Value>, path: &str) -> Result<usize> {
        v.and_then(Value::as_u64)
            .map(|n| n as usize)
            .ok_or_else(|| self.err(path, "missing or not a non-negative integer"))
    }

    /// An integer `n` (meaning `(n, n)`) or a pair `[a, b]`.
    fn pair(&self, v: Option<&Value>, path: &str) -> Result<(usize, usize)> {
        match v {
            Some(Value::Number(n)) => {
                let n = n.as_u64().ok_or_else(|| self.err(path, "expected a non-negative integer"))? as usize;
                Ok((n, n))
            }
            Some(Value::Array(_)) => match self.usize_list(v.unwrap(), path)?[..] {
                [a, b] => Ok((a, b)),
                _ => Err(self.err(path, "expected two entries")),
            },
            _ => Err(self.err(path, "missing or not an integer pair")),
        }
    }

    fn padding(&self, v: Option<&Value>, path: &str) -> Result<Padding> {
        match v.and_then(Value::as_str) {
            Some("same") => Ok(Padding::Same),
            Some("valid") => Ok(Padding::Valid),
            Some(other) => Err(self.err(path, format!("unknown padding `{other}`"))),
            None => Err(self.err(path, "missing or not a string")),
        }
    }

    /// Nested arrays or a `{"file": ...}` reference.
    fn tensor(&self, v: Option<&Value>, path: &str) -> Result<Tensor> {
        let v = v.ok_or_else(|| self.err(path, "missing"))?;
        if let Some(obj) = v.as_object() {
            let rel = obj
                .get("file")
                .and_then(Value::as_str)
                .ok_or_else(|| self.err(path, "tensor object needs a string `file` field"))?;
            let full = self.base_dir.join(rel);
            return read_tensor(&full).map_err(|e| self.err(path, e));
        }
        let mut shape = Vec::new();
        let mut cur = v;
        while let Value::Array(items) = cur {
            shape.push(items.len());
            match items.first() {
                Some(first) => cur = first,
                None => break,
            }
        }
        if shape.is_empty() {
            return Err(self.err(path, "expected a nested array or {\"file\": ...}"));
        }
        let mut data = Vec::with_capacity(shape.iter().product());
        self.flatten(v, &shape, path, &mut data)?;
        Tensor::new(shape, data).map_err(|e| self.err(path, e))
    }

    fn flatten(&self, v: &Value, shape: &[usize], path: &str, out: &mut Vec<f64>) -> Result<()> {
        match (v, shape) {
            (Value::Array(items), [n, rest @ ..]) if items.len() == *n => {
                for item in items {
                    self.flatten(item, rest, path, out)?;
                }
                Ok(())
            }
            (Value::Number(x), []) => {
                out.push(x.as_f64().ok_or_else(|| self.err(path, "non-finite number"))?);
                Ok(())
            }
            _ => Err(self.err(path, "ragged or non-numeric nested array")),
        }
    }

    fn vector(&self, v: Option<&Value>, path: &str) -> Result<Vec<f64>> {
        let t = self.tensor(v, path)?;
        if t.ndim() != 1 {
            return Err(self.err(path, format!("expected a vector, got shape {:?}", t.shape())));
        }
        Ok(t.into_data())
    }

    fn matrix(&self, v: Option<&Value>, path: &str) -> Result<DenseMatrix> {
        let t = self.tensor(v, path)?;
        match *t.shape() {
            [r, c] => DenseMatrix::new(r, c, t.into_data()),
            _ => Err(self.err(path, format!("expected a matrix, got shape {:?}", t.shape()))),
        }
    }

    fn layer(&self, v: &Value, path: &str, id: &str) -> Result<LayerSpec> {
        let obj = v
            .as_object()
            .ok_or_else(|| self.err(path, format!("node `{id}`: layer must be an object")))?;
        let ty = obj
            .get("type")
            .and_then(Value::as_str)
            .ok_or_else(|| self.err(&format!("{path}.type"), format!("node `{id}`: missing or not a string")))?;
        let f = |name: &str| obj.get(name);
        let p = |name: &str| format!("{path}.{name} (node `{id}`)");
        Ok(match ty {
            "dense" => LayerSpec::Dense {
                weights: self.matrix(f("weights"), &p("weights"))?,
                bias: self.vector(f("bias"), &p("bias"))?,
            },
            "conv2d" => LayerSpec::Conv2D {
                filters: self.tensor(f("filters"), &p("filters"))?,
                bias: self.vector(f("bias"), &p("bias"))?,
                stride: self.pair(f("stride"), &p("stride"))?,
                padding: self.padding(f("padding"), &p("padding"))?,
            },
            "activation" => LayerSpec::Activation {
                leakiness: self.number(f("leakiness"), &p("leakiness"))?,
            },
            "maxpool" => LayerSpec::MaxPool {
                ksize: self.pair(f("ksize"), &p("ksize"))?,
                stride: self.pair(f("stride"), &p("stride"))?,
                padding: self.padding(f("padding"), &p("padding"))?,
            },
            "dropout" => {
                let rate = self.number(f("rate"), &p("rate"))?;
                let mode = match f("mode").and_then(Value::as_str) {
                    Some("inference") => DropoutMode::Inference,
                    Some("training") => DropoutMode::Training {
                        seed: f("seed")
                            .and_then(Value::as_u64)
                            .ok_or_else(|| self.err(&p("seed"), "training mode needs a non-negative integer seed"))?,
                    },
                    Some(other) => return Err(self.err(&p("mode"), format!("unknown dropout mode `{other}`"))),
                    None => return Err(self.err(&p("mode"), "missing or not a string")),
                };
                LayerSpec::Dropout { rate, mode }
            }
            "batchnorm_inf" => LayerSpec::BatchNormInference {
                gamma: self.vector(f("gamma"), &p("gamma"))?,
                beta: self.vector(f("beta"), &p("beta"))?,
                running_mean: self.vector(f("running_mean"), &p("running_mean"))?,
                running_var: self.vector(f("running_var"), &p("running_var"))?,
                epsilon: self.number(f("epsilon"), &p("epsilon"))?,
            },
            "flatten" => LayerSpec::Flatten,
            "add" => LayerSpec::Add,
            "concat" => LayerSpec::Concat {
                axis: self.count(f("axis"), &p("axis"))?,
            },
            "recurrent" => LayerSpec::Recurrent {
                w_hidden: self.matrix(f("w_hidden"), &p("w_hidden"))?,
                w_input: self.matrix(f("w_input"), &p("w_input"))?,
                bias: self.vector(f("bias"), &p("bias"))?,
                leakiness: self.number(f("leakiness"), &p("leakiness"))?,
                steps: self.count(f("steps"), &p("steps"))?,
            },
            other => return Err(self.err(&format!("{path}.type"), format!("node `{id}`: unknown layer type `{other}`"))),
        })
    }
}

fn nested(shape: &[usize], data: &[f64]) -> Result<Value> {
    match shape {
        [] => serde_json::Number::from_f64(data[0])
            .map(Value::Number)
            .ok_or_else(|| Error::InvalidTensor(format!("{} cannot be written as JSON", data[0]))),
        [n, rest @ ..] => {
            let step: usize = rest.iter().product();
            (0..*n)
                .map(|k| nested(rest, &data[k * step..(k + 1) * step]))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
    }
}

fn store(storage: &TensorStorage, node: &str, name: &str, t: &Tensor) -> Result<Value> {
    match storage {
        TensorStorage::Inline => nested(t.shape(), t.data()),
        TensorStorage::Files { dir } => {
            let file = format!("{node}.{name}.ten");
            write_tensor(&dir.join(&file), t)?;
            Ok(json!({ "file": file }))
        }
    }
}

fn padding_name(p: Padding) -> &'static str {
    match p {
        Padding::Same => "same",
        Padding::Valid => "valid",
    }
}

fn vec_tensor(v: &[f64]) -> Result<Tensor> {
    Tensor::from_vec(v.to_vec())
}

fn mat_tensor(m: &DenseMatrix) -> Result<Tensor> {
    Tensor::new(vec![m.rows(), m.cols()], m.data().to_vec())
}

fn layer_json(layer: &LayerSpec, id: &str, storage: &TensorStorage) -> Result<Value> {
    let s = |name: &str, t: Tensor| store(storage, id, name, &t);
    Ok(match layer {
        LayerSpec::Dense { weights, bias } => json!({
            "type": "dense",
            "weights": s("weights", mat_tensor(weights)?)?,
            "bias": s("bias", vec_tensor(bias)?)?,
        }),
        LayerSpec::Conv2D {
            filters,
            bias,
            stride,
            padding,
        } => json!({
            "type": "conv2d",
            "filters": s("filters", filters.clone())?,
            "bias": s("bias", vec_tensor(bias)?)?,
            "stride": [stride.0, stride.1],
            "padding": padding_name(*padding),
        }),
        LayerSpec::Activation { leakiness } => json!({ "type": "activation", "leakiness": leakiness }),
        LayerSpec::MaxPool {
            ksize,
            stride,
            padding,
        } => json!({
            "type": "maxpool",
            "ksize": [ksize.0, ksize.1],
            "stride": [stride.0, stride.1],
            "padding": padding_name(*padding),
        }),
        LayerSpec::Dropout { rate, mode } => match mode {
            DropoutMode::Inference => json!({ "type": "dropout", "rate": rate, "mode": "inference" }),
            DropoutMode::Training { seed } => {
                json!({ "type": "dropout", "rate": rate, "mode": "training", "seed": seed })
            }
        },
        LayerSpec::BatchNormInference {
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon,
        } => json!({
            "type": "batchnorm_inf",
            "gamma": s("gamma", vec_tensor(gamma)?)?,
            "beta": s("beta", vec_tensor(beta)?)?,
            "running_mean": s("running_mean", vec_tensor(running_mean)?)?,
            "running_var": s("running_var", vec_tensor(running_var)?)?,
            "epsilon": epsilon,
        }),
        LayerSpec::Flatten => json!({ "type": "flatten" }),
        LayerSpec::Add => json!({ "type": "add" }),
        LayerSpec::Concat { axis } => json!({ "type": "concat", "axis": axis }),
        LayerSpec::Recurrent {
            w_hidden,
            w_input,
            bias,
            leakiness,
            steps,
        } => json!({
            "type": "recurrent",
            "w_hidden": s("w_hidden", mat_tensor(w_hidden)?)?,
            "w_input": s("w_input", mat_tensor(w_input)?)?,
            "bias": s("bias", vec_tensor(bias)?)?,
            "leakiness": leakiness,
            "steps": steps,
        }),
    })
}

/// Serializes a network; with [`TensorStorage::Files`] the parameter files are written as a side effect.
pub fn network_to_json(net: &Network, storage: &TensorStorage) -> Result<Value> {
    let nodes = net
        .nodes()
        .iter()
        .map(|n| {
            Ok(json!({
                "id": n.id,
                "layer": layer_json(&n.layer, &n.id, storage)?,
                "inputs": n.inputs,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({
        "input_shape": net.input_shape(),
        "nodes": nodes,
        "output": net.output_id(),
    }))
}

/// Writes `path` and, for file storage, parameter files next to it.
pub fn write_network(path: &Path, net: &Network, inline: bool) -> Result<()> {
    let storage = if inline {
        TensorStorage::Inline
    } else {
        TensorStorage::Files {
            dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        }
    };
    let v = network_to_json(net, &storage)?;
    let mut text = serde_json::to_string_pretty(&v).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

//! Plain-text model checkpoints. Values are written with the shortest
//! round-trip decimal form, so loading restores every parameter bit for bit.
//!
//! ```text
//! oca-checkpoint
//! version 1
//! role new
//! mode oca
//! <config key> <value>
//! ...
//! history <epoch> <total> <ce_new> <ce_proto> <cos_align> <defect|->
//! tensor <name> <dims...>
//! <comma-separated values>
//! end
//! ```

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use crate::datagen::parse_f64_list;
use crate::error::{parse_at_line, Error, Result};
use crate::linalg::{Matrix, SkewParams};
use crate::losses::{LossBreakdown, Mode};
use crate::nn::{Backbone, Classifier, Dense, OrthoLayer};
use crate::trainer::{EpochRecord, ModelBundle, Role, TrainConfig};

const MAGIC: &str = "oca-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_tensor<W: Write>(w: &mut W, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
    write!(w, "tensor {name}")?;
    for d in shape {
        write!(w, " {d}")?;
    }
    writeln!(w)?;
    let mut first = true;
    for v in values {
        if !first {
            w.write_all(b",")?;
        }
        first = false;
        write!(w, "{v}")?;
    }
    writeln!(w)?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(bundle: &ModelBundle, mut w: W) -> Result<()> {
    let c = &bundle.config;
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "version {CHECKPOINT_VERSION}")?;
    writeln!(w, "role {}", bundle.role)?;
    writeln!(w, "mode {}", bundle.mode)?;
    writeln!(w, "seed {}", c.seed)?;
    writeln!(w, "epochs {}", c.epochs)?;
    writeln!(w, "batch_size {}", c.batch_size)?;
    writeln!(w, "lr {}", c.lr)?;
    writeln!(w, "d_old {}", c.d_old)?;
    writeln!(w, "d_extra {}", c.d_extra)?;
    writeln!(w, "lambda1 {}", c.lambda1)?;
    writeln!(w, "lambda2 {}", c.lambda2)?;
    writeln!(w, "lambda_bct {}", c.lambda_bct)?;
    writeln!(w, "config_mode {}", c.mode)?;
    let hidden: Vec<String> = c.hidden_dims.iter().map(|d| d.to_string()).collect();
    writeln!(w, "hidden_dims {}", hidden.join(","))?;
    writeln!(w, "beta1 {}", c.beta1)?;
    writeln!(w, "beta2 {}", c.beta2)?;
    writeln!(w, "eps {}", c.eps)?;
    writeln!(w, "ortho_init_scale {}", c.ortho_init_scale)?;
    writeln!(w, "warm_start {}", c.warm_start)?;
    let dims: Vec<String> = bundle
        .backbone
        .layer_dims()
        .iter()
        .map(|d| d.to_string())
        .collect();
    writeln!(w, "layer_dims {}", dims.join(","))?;
    for r in &bundle.history {
        let l = &r.loss;
        let defect = r
            .ortho_defect
            .map_or_else(|| "-".to_string(), |d| d.to_string());
        writeln!(
            w,
            "history {} {} {} {} {} {defect}",
            r.epoch, l.total, l.ce_new, l.ce_proto, l.cos_align
        )?;
    }
    for (i, layer) in bundle.backbone.layers().iter().enumerate() {
        write_tensor(
            &mut w,
            &format!("backbone.{i}.weight"),
            &[layer.out_dim(), layer.in_dim()],
            layer.weight.as_slice(),
        )?;
        write_tensor(
            &mut w,
            &format!("backbone.{i}.bias"),
            &[layer.out_dim()],
            &layer.bias,
        )?;
    }
    if let Some(o) = &bundle.ortho {
        write_tensor(&mut w, "ortho.skew", &[o.dim()], o.params().values())?;
    }
    let cw = bundle.classifier.weight();
    write_tensor(
        &mut w,
        "classifier.weight",
        &[cw.rows(), cw.cols()],
        cw.as_slice(),
    )?;
    writeln!(w, "end")?;
    w.flush()?;
    Ok(())
}

struct Tensor {
    line: usize,
    shape: Vec<usize>,
    values: Vec<f64>,
}

struct Parsed {
    fields: HashMap<String, (usize, String)>,
    history: Vec<EpochRecord>,
    tensors: HashMap<String, Tensor>,
}

impl Parsed {
    fn raw(&self, key: &str) -> Result<(usize, &str)> {
        self.fields
            .get(key)
            .map(|(l, v)| (*l, v.as_str()))
            .ok_or_else(|| Error::Parse {
                location: crate::error::Location::Line(0),
                message: format!("missing `{key}`"),
            })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let (line, v) = self.raw(key)?;
        v.parse()
            .map_err(|_| parse_at_line(line, format!("invalid value for `{key}`: `{v}`")))
    }

    fn dims(&self, key: &str) -> Result<Vec<usize>> {
        let (line, v) = self.raw(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|d| d.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_at_line(line, format!("invalid `{key}`")))
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let t = self.tensors.remove(name).ok_or_else(|| Error::Parse {
            location: crate::error::Location::Line(0),
            message: format!("missing tensor `{name}`"),
        })?;
        if t.shape != shape {
            return Err(parse_at_line(
                t.line,
                format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape
                ),
            ));
        }
        Ok(t.values)
    }
}

fn parse_lines(lines: &[String]) -> Result<Parsed> {
    if lines.first().map(|l| l.trim()) != Some(MAGIC) {
        return Err(parse_at_line(1, format!("expected `{MAGIC}` header")));
    }
    let mut parsed = Parsed {
        fields: HashMap::new(),
        history: Vec::new(),
        tensors: HashMap::new(),
    };
    let mut i = 1;
    let mut ended = false;
    while i < lines.len() {
        let lineno = i + 1;
        let line = lines[i].trim();
        i += 1;
        if line.is_empty() {
            continue;
        }
        if line == "end" {
            ended = true;
            break;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "history" => {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.len() != 6 {
                    return Err(parse_at_line(lineno, "history needs 6 fields"));
                }
                let nums = parse_f64_list(lineno, &f[1..5])?;
                let ortho_defect = match f[5] {
                    "-" => None,
                    d => Some(parse_f64_list(lineno, &[d])?[0]),
                };
                parsed.history.push(EpochRecord {
                    epoch: f[0]
                        .parse()
                        .map_err(|_| parse_at_line(lineno, "invalid epoch"))?,
                    loss: LossBreakdown {
                        total: nums[0],
                        ce_new: nums[1],
                        ce_proto: nums[2],
                        cos_align: nums[3],
                    },
                    ortho_defect,
                });
            }
            "tensor" => {
                let mut f = rest.split_whitespace();
                let name = f
                    .next()
                    .ok_or_else(|| parse_at_line(lineno, "tensor needs a name"))?
                    .to_string();
                let shape: Vec<usize> = f
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| parse_at_line(lineno, "invalid tensor shape"))?;
                let body = lines
                    .get(i)
                    .ok_or_else(|| parse_at_line(lineno + 1, "missing tensor values"))?;
                i += 1;
                let parts: Vec<&str> = if body.trim().is_empty() {
                    Vec::new()
                } else {
                    body.split(',').collect()
                };
                let values = parse_f64_list(lineno + 1, &parts)?;
                let expected = if name == "ortho.skew" {
                    shape.first().map_or(0, |&d| SkewParams::param_count(d))
                } else {
                    shape.iter().product()
                };
                if values.len() != expected {
                    return Err(parse_at_line(
                        lineno + 1,
                        format!(
                            "tensor `{name}` has {} values, expected {expected}",
                            values.len()
                        ),
                    ));
                }
                if parsed
                    .tensors
                    .insert(
                        name.clone(),
                        Tensor {
                            line: lineno,
                            shape,
                            values,
                        },
                    )
                    .is_some()
                {
                    return Err(parse_at_line(lineno, format!("duplicate tensor `{name}`")));
                }
            }
            _ => {
                if parsed
                    .fields
                    .insert(key.to_string(), (lineno, rest.trim().to_string()))
                    .is_some()
                {
                    return Err(parse_at_line(lineno, format!("duplicate key `{key}`")));
                }
            }
        }
    }
    if !ended {
        return Err(parse_at_line(
            lines.len() + 1,
            "truncated checkpoint: missing `end`",
        ));
    }
    Ok(parsed)
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<ModelBundle> {
    let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
    let mut p = parse_lines(&lines)?;
    let version: u32 = p.get("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let role: Role = p.get("role")?;
    let mode: Mode = p.get("mode")?;
    let config = TrainConfig {
        seed: p.get("seed")?,
        epochs: p.get("epochs")?,
        batch_size: p.get("batch_size")?,
        lr: p.get("lr")?,
        d_old: p.get("d_old")?,
        d_extra: p.get("d_extra")?,
        lambda1: p.get("lambda1")?,
        lambda2: p.get("lambda2")?,
        lambda_bct: p.get("lambda_bct")?,
        mode: p.get("config_mode")?,
        hidden_dims: p.dims("hidden_dims")?,
        beta1: p.get("beta1")?,
        beta2: p.get("beta2")?,
        eps: p.get("eps")?,
        ortho_init_scale: p.get("ortho_init_scale")?,
        warm_start: p.get("warm_start")?,
    };
    let dims = p.dims("layer_dims")?;
    if dims.len() < 2 {
        return Err(parse_at_line(0, "layer_dims needs at least two entries"));
    }
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (i, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weight = p.take(&format!("backbone.{i}.weight"), &[fan_out, fan_in])?;
        let bias = p.take(&format!("backbone.{i}.bias"), &[fan_out])?;
        layers.push(Dense {
            weight: Matrix::new(fan_out, fan_in, weight)?,
            bias,
        });
    }
    let backbone = Backbone::from_layers(layers)?;
    let emb = backbone.embedding_dim();
    let ortho = if p.tensors.contains_key("ortho.skew") {
        let values = p.take("ortho.skew", &[emb])?;
        Some(OrthoLayer::new(SkewParams::new(emb, values)?)?)
    } else {
        None
    };
    if ortho.is_some() != (role == Role::New && mode.uses_ortho()) {
        return Err(parse_at_line(
            0,
            format!("orthogonal layer presence does not match mode {mode}"),
        ));
    }
    let classes = p
        .tensors
        .get("classifier.weight")
        .and_then(|t| t.shape.first().copied())
        .unwrap_or(0);
    let cw = p.take("classifier.weight", &[classes, emb])?;
    let classifier = Classifier::from_matrix(Matrix::new(classes, emb, cw)?);
    if let Some(name) = p.tensors.keys().next() {
        return Err(parse_at_line(
            p.tensors[name].line,
            format!("unexpected tensor `{name}`"),
        ));
    }
    Ok(ModelBundle {
        role,
        mode,
        backbone,
        ortho,
        classifier,
        config,
        history: p.history,
    })
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(bundle, std::io::BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

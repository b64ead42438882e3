//! Network spec documents: JSON with `dims`, `blocks` and an optional `analysis` section.

use std::collections::BTreeSet;
use std::fmt;

use isometry_core::effective_kernel::ConvGeometry;
use isometry_core::{Block, ComponentSpec64, Error as CoreError, NetworkGraph64};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq)]
pub enum SpecError {
    /// Not valid JSON.
    Malformed { line: usize, column: usize, message: String },
    /// Valid JSON that does not follow the schema.
    Schema { path: String, message: String },
    /// Components that do not chain together.
    Dimension(String),
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Malformed { line, column, message } => write!(f, "malformed JSON at line {line}, column {column}: {message}"),
            Self::Schema { path, message } => write!(f, "schema error at `{path}`: {message}"),
            Self::Dimension(msg) => write!(f, "dimension error: {msg}"),
        }
    }
}

impl std::error::Error for SpecError {}

type Result<T> = std::result::Result<T, SpecError>;

fn schema(path: &str, message: impl Into<String>) -> SpecError {
    SpecError::Schema {
        path: path.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AnalysisSection {
    pub tol_phi: Option<f64>,
    pub tol_varphi: Option<f64>,
    pub alpha2_in: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub graph: NetworkGraph64,
    pub analysis: AnalysisSection,
}

fn object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| schema(path, "expected an object"))
}

fn array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| schema(path, "expected a list"))
}

fn reject_unknown(map: &Map<String, Value>, allowed: &[&str], path: &str) -> Result<()> {
    match map.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(schema(&join(path, k), format!("unknown key (expected one of: {})", allowed.join(", ")))),
        None => Ok(()),
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn real(v: &Value, path: &str) -> Result<f64> {
    match v.as_f64() {
        Some(x) if x.is_finite() => Ok(x),
        _ => Err(schema(path, "expected a finite number")),
    }
}

fn count(v: &Value, path: &str) -> Result<usize> {
    match v.as_u64() {
        Some(x) if x >= 1 => usize::try_from(x).map_err(|_| schema(path, "integer too large")),
        _ => Err(schema(path, "expected a positive integer")),
    }
}

/// Parameter reader that remembers which keys were consumed.
struct Params<'a> {
    map: Option<&'a Map<String, Value>>,
    path: String,
    used: BTreeSet<&'static str>,
}

impl<'a> Params<'a> {
    fn get(&mut self, name: &'static str) -> Option<(&'a Value, String)> {
        self.used.insert(name);
        self.map.and_then(|m| m.get(name)).map(|v| (v, join(&self.path, name)))
    }

    fn real(&mut self, name: &'static str) -> Result<f64> {
        match self.get(name) {
            Some((v, p)) => real(v, &p),
            None => Err(schema(&self.path, format!("missing parameter `{name}`"))),
        }
    }

    fn real_or(&mut self, name: &'static str, default: f64) -> Result<f64> {
        self.get(name).map_or(Ok(default), |(v, p)| real(v, &p))
    }

    fn count(&mut self, name: &'static str) -> Result<usize> {
        match self.get(name) {
            Some((v, p)) => count(v, &p),
            None => Err(schema(&self.path, format!("missing parameter `{name}`"))),
        }
    }

    fn count_or(&mut self, name: &'static str, default: usize) -> Result<usize> {
        self.get(name).map_or(Ok(default), |(v, p)| count(v, &p))
    }

    fn pad(&mut self, name: &'static str) -> Result<usize> {
        match self.get(name) {
            None => Ok(0),
            Some((v, p)) => v
                .as_u64()
                .and_then(|x| usize::try_from(x).ok())
                .ok_or_else(|| schema(&p, "expected a non-negative integer")),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(map) = self.map {
            if let Some(k) = map.keys().find(|k| !self.used.contains(k.as_str())) {
                let allowed: Vec<_> = self.used.iter().copied().collect();
                let hint = if allowed.is_empty() {
                    "this component takes no parameters".to_string()
                } else {
                    format!("expected one of: {}", allowed.join(", "))
                };
                return Err(schema(&join(&self.path, k), format!("unknown parameter ({hint})")));
            }
        }
        Ok(())
    }
}

/// Parses one component at input width `width`. Square components without
/// an explicit `m` take the width they are placed at.
fn component(v: &Value, path: &str, width: usize) -> Result<ComponentSpec64> {
    let obj = object(v, path)?;
    reject_unknown(obj, &["kind", "params"], path)?;
    let kind_path = join(path, "kind");
    let kind = obj
        .get("kind")
        .ok_or_else(|| schema(path, "missing `kind`"))?
        .as_str()
        .ok_or_else(|| schema(&kind_path, "expected a string"))?;
    let params_path = join(path, "params");
    let map = match obj.get("params") {
        Some(p) => Some(object(p, &params_path)?),
        None => None,
    };
    let mut p = Params {
        map,
        path: params_path.clone(),
        used: BTreeSet::new(),
    };
    let spec = match kind {
        "ReLU" => ComponentSpec64::ReLU { p: p.real_or("p", 0.5)? },
        "LeakyReLU" => {
            let gamma = p.real("gamma")?;
            if !(0.0..1.0).contains(&gamma) {
                return Err(schema(&join(&params_path, "gamma"), format!("{gamma} is outside [0, 1)")));
            }
            ComponentSpec64::LeakyReLU { p: p.real_or("p", 0.5)?, gamma }
        }
        "Tanh" => ComponentSpec64::Tanh,
        "SPReLU" => ComponentSpec64::SPReLU { alpha: p.real("alpha")? },
        "SeLU" => ComponentSpec64::SeLU {
            lambda: p.real("lambda")?,
            alpha: p.real("alpha")?,
            input_var: p.real_or("input_var", 1.0)?,
        },
        "DenseGaussian" => ComponentSpec64::DenseGaussian {
            m: p.count("m")?,
            n: p.count_or("n", width)?,
            mu: p.real_or("mu", 0.0)?,
            sigma2: p.real("sigma2")?,
        },
        "Conv2D" => {
            let c_out = p.count("c_out")?;
            let c_in = p.count("c_in")?;
            let k = [p.count("k_h")?, p.count("k_w")?];
            let s = [p.count_or("s_h", 1)?, p.count_or("s_w", 1)?];
            let pad = [p.pad("p_h")?, p.pad("p_w")?];
            let input = [p.count("h_in")?, p.count("w_in")?];
            let geometry = ConvGeometry::new(k, s, pad, input).map_err(|e| schema(&params_path, e.to_string()))?;
            ComponentSpec64::Conv2D {
                c_out,
                c_in,
                geometry,
                sigma2: p.real("sigma2")?,
            }
        }
        "Orthogonal" => ComponentSpec64::Orthogonal {
            beta: p.real_or("beta", 1.0)?,
            m: p.count("m")?,
            n: p.count_or("n", width)?,
        },
        "DataNorm" => ComponentSpec64::DataNorm {
            sigma_b2: p.real("sigma_B2")?,
            m: p.count_or("m", width)?,
        },
        "SMN" => ComponentSpec64::SMN {
            alpha2: p.real("alpha2")?,
            m: p.count_or("m", width)?,
        },
        "Identity" => ComponentSpec64::Identity { m: p.count_or("m", width)? },
        other => {
            return Err(schema(
                &kind_path,
                format!("unknown component kind `{other}` (expected ReLU, LeakyReLU, Tanh, SPReLU, SeLU, DenseGaussian, Conv2D, Orthogonal, DataNorm, SMN or Identity)"),
            ))
        }
    };
    p.finish()?;
    spec.validate().map_err(|e| match e {
        CoreError::InvalidParameter { name, value, reason } => {
            schema(&join(&params_path, name), format!("{value} is invalid: {reason}"))
        }
        other => schema(&params_path, other.to_string()),
    })?;
    Ok(spec)
}

fn chain(v: &Value, path: &str, width: usize) -> Result<(Vec<ComponentSpec64>, usize)> {
    let items = array(v, path)?;
    if items.is_empty() {
        return Err(schema(path, "a chain needs at least one component"));
    }
    let mut w = width;
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let p = format!("{path}[{i}]");
        let spec = component(item, &p, w)?;
        w = spec
            .out_width(w)
            .map_err(|e| SpecError::Dimension(format!("{p}: {e}")))?;
        out.push(spec);
    }
    Ok((out, w))
}

fn analysis(v: &Value) -> Result<AnalysisSection> {
    let obj = object(v, "analysis")?;
    reject_unknown(obj, &["tol_phi", "tol_varphi", "alpha2_in"], "analysis")?;
    let positive = |key: &str| -> Result<Option<f64>> {
        let p = join("analysis", key);
        obj.get(key)
            .map(|x| {
                let r = real(x, &p)?;
                if r > 0.0 {
                    Ok(r)
                } else {
                    Err(schema(&p, "must be positive"))
                }
            })
            .transpose()
    };
    Ok(AnalysisSection {
        tol_phi: positive("tol_phi")?,
        tol_varphi: positive("tol_varphi")?,
        alpha2_in: positive("alpha2_in")?,
    })
}

/// Parses and validates a spec document.
pub fn parse_network_spec(text: &str) -> Result<NetworkSpec> {
    let doc: Value = serde_json::from_str(text).map_err(|e| SpecError::Malformed {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let root = object(&doc, "")?;
    reject_unknown(root, &["dims", "blocks", "analysis"], "")?;
    let dims_v = array(root.get("dims").ok_or_else(|| schema("dims", "missing"))?, "dims")?;
    let dims = dims_v
        .iter()
        .enumerate()
        .map(|(i, d)| count(d, &format!("dims[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let blocks_v = array(root.get("blocks").ok_or_else(|| schema("blocks", "missing"))?, "blocks")?;
    if blocks_v.is_empty() {
        return Err(schema("blocks", "at least one block is required"));
    }
    if dims.len() != blocks_v.len() + 1 {
        return Err(SpecError::Dimension(format!(
            "`dims` has {} entries but {} blocks need {}",
            dims.len(),
            blocks_v.len(),
            blocks_v.len() + 1
        )));
    }
    let mut blocks = Vec::with_capacity(blocks_v.len());
    for (i, b) in blocks_v.iter().enumerate() {
        let path = format!("blocks[{i}]");
        let obj = object(b, &path)?;
        if obj.len() != 1 {
            return Err(schema(&path, "a block has exactly one key, `serial` or `parallel`"));
        }
        let (key, body) = obj.iter().next().unwrap();
        let inner = join(&path, key);
        let check_out = |w: usize, p: &str| {
            if w == dims[i + 1] {
                Ok(())
            } else {
                Err(SpecError::Dimension(format!("{p} ends at width {w} but dims[{}] = {}", i + 1, dims[i + 1])))
            }
        };
        let block = match key.as_str() {
            "serial" => {
                let (c, w) = chain(body, &inner, dims[i])?;
                check_out(w, &inner)?;
                Block::Serial(c)
            }
            "parallel" => {
                let branches = array(body, &inner)?;
                if branches.is_empty() {
                    return Err(schema(&inner, "a parallel block needs at least one branch"));
                }
                let mut out = Vec::with_capacity(branches.len());
                for (j, br) in branches.iter().enumerate() {
                    let p = format!("{inner}[{j}]");
                    let (c, w) = chain(br, &p, dims[i])?;
                    check_out(w, &p)?;
                    out.push(c);
                }
                Block::Parallel(out)
            }
            other => return Err(schema(&join(&path, other), "unknown key (expected one of: serial, parallel)")),
        };
        blocks.push(block);
    }
    let analysis = root.get("analysis").map(analysis).transpose()?.unwrap_or_default();
    let graph = NetworkGraph64::new(blocks, dims).map_err(|e| SpecError::Dimension(e.to_string()))?;
    Ok(NetworkSpec { graph, analysis })
}

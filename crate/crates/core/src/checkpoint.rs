//! Plain-text checkpoints: one file per tensor plus `manifest.json`.
//!
//! A tensor file starts with `#rows,cols,name` and then holds one
//! comma-separated row per line. Values are written in shortest
//! round-trip form, so a save/load cycle is exact.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::Layout;
use crate::error::{Error, Result};
use crate::model::{AttentionMode, EmbeddingMode, ModelParams, TensorId};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub num_topics: usize,
    pub words_per_topic: usize,
    pub embedding: EmbeddingMode,
    pub attention: AttentionMode,
    pub biases: bool,
    pub d: usize,
    pub d_attn: usize,
    /// Tensor name to file name.
    pub tensors: Vec<(String, String)>,
    pub frozen: Vec<String>,
    pub seed: Option<u64>,
    pub step: Option<usize>,
}

pub fn tensor_file_name(id: TensorId) -> String {
    format!("{}.csv", id.name())
}

pub fn write_tensor<W: Write>(out: &mut W, name: &str, m: &Array2<f64>) -> Result<()> {
    writeln!(out, "#{},{},{}", m.nrows(), m.ncols(), name)?;
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_tensor<R: BufRead>(input: R, source_name: &str) -> Result<(String, Array2<f64>)> {
    let perr = |line: usize, msg: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        msg,
    };
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| perr(1, "empty tensor file".into()))??;
    let fields: Vec<&str> = header.strip_prefix('#').ok_or_else(|| perr(1, "missing '#rows,cols,name' header".into()))?.splitn(3, ',').collect();
    if fields.len() != 3 {
        return Err(perr(1, format!("bad header {header:?}")));
    }
    let rows: usize = fields[0].trim().parse().map_err(|_| perr(1, format!("bad row count {:?}", fields[0])))?;
    let cols: usize = fields[1].trim().parse().map_err(|_| perr(1, format!("bad column count {:?}", fields[1])))?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = k + 2;
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| perr(lineno, format!("bad number {s:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() != cols {
            return Err(perr(lineno, format!("expected {cols} values, found {}", vals.len())));
        }
        data.extend(vals);
        seen += 1;
    }
    if seen != rows {
        return Err(perr(1, format!("header promises {rows} rows, found {seen}")));
    }
    let m = Array2::from_shape_vec((rows, cols), data).expect("shape checked");
    Ok((fields[2].trim().to_string(), m))
}

/// Writes every tensor and the manifest; returns the written paths.
pub fn save(params: &ModelParams, dir: &Path, seed: Option<u64>, step: Option<usize>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut tensors = Vec::new();
    for id in TensorId::ALL {
        let file = tensor_file_name(id);
        let path = dir.join(&file);
        let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
        write_tensor(&mut f, id.name(), params.get(id))?;
        f.flush()?;
        written.push(path);
        tensors.push((id.name().to_string(), file));
    }
    let manifest = CheckpointManifest {
        num_topics: params.layout.num_topics,
        words_per_topic: params.layout.words_per_topic,
        embedding: params.embedding,
        attention: params.attention,
        biases: params.biases,
        d: params.d(),
        d_attn: params.d_attn(),
        tensors,
        frozen: TensorId::ALL.iter().filter(|id| params.is_frozen(**id)).map(|id| id.name().to_string()).collect(),
        seed,
        step,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    written.push(path);
    Ok(written)
}

pub fn load(dir: &Path) -> Result<(ModelParams, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let layout = Layout::new(manifest.num_topics, manifest.words_per_topic)?;
    let mut tensors = Vec::with_capacity(8);
    for id in TensorId::ALL {
        let file = manifest
            .tensors
            .iter()
            .find(|(n, _)| n == id.name())
            .map(|(_, f)| f.clone())
            .unwrap_or_else(|| tensor_file_name(id));
        let path = dir.join(&file);
        let (name, m) = read_tensor(BufReader::new(fs::File::open(&path)?), &path.display().to_string())?;
        if name != id.name() {
            return Err(Error::Parse {
                source_name: path.display().to_string(),
                line: 1,
                msg: format!("expected tensor {}, found {name}", id.name()),
            });
        }
        tensors.push(m);
    }
    let mut frozen = [false; 8];
    for name in &manifest.frozen {
        let id = TensorId::from_name(name).ok_or_else(|| Error::Parse {
            source_name: MANIFEST.into(),
            line: 0,
            msg: format!("unknown tensor {name}"),
        })?;
        frozen[id.index()] = true;
    }
    let params = ModelParams::from_parts(layout, manifest.embedding, manifest.attention, manifest.biases, tensors, frozen)?;
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    #[test]
    fn round_trip_is_exact() {
        let layout = Layout::new(2, 3).unwrap();
        let mut spec = ModelSpec::new(layout);
        spec.embedding = EmbeddingMode::Trained;
        spec.d = Some(4);
        let mut p = ModelParams::init(&spec, 11).unwrap();
        p.set_frozen(TensorId::Key, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = save(&p, dir.path(), Some(11), Some(0)).unwrap();
        assert_eq!(files.len(), 9);
        let (q, m) = load(dir.path()).unwrap();
        assert_eq!(p, q);
        assert_eq!(m.seed, Some(11));
    }

    #[test]
    fn tensor_text_format() {
        let m = Array2::from_shape_vec((2, 2), vec![0.1, -2.0, 1e-20, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, "W_V", &m).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "#2,2,W_V\n0.1,-2\n0.00000000000000000001,3\n");
        let (name, back) = read_tensor(&buf[..], "mem").unwrap();
        assert_eq!(name, "W_V");
        assert_eq!(back, m);
        assert!(read_tensor(&b"#2,2,W\n1,2\n"[..], "mem").is_err());
        assert!(read_tensor(&b"2,2,W\n"[..], "mem").is_err());
    }
}

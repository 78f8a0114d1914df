//! Self-describing binary checkpoints: magic string, format version,
//! config record, then named parameter arrays with shape headers and
//! little-endian f64 payloads.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{DenseLayer, DualEncoderModel, Encoder, ModelConfig, PromptParams};

const MAGIC: &[u8; 8] = b"PROMPTMK";
const FORMAT_VERSION: u32 = 1;

struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn write_array(w: &mut impl Write, arr: &NamedArray) -> Result<()> {
    let name = arr.name.as_bytes();
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&(arr.shape.len() as u32).to_le_bytes())?;
    for &d in &arr.shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in &arr.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::CorruptFile("truncated checkpoint".into()))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().unwrap()))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8)?.try_into().unwrap()))
}

fn read_array(r: &mut impl Read) -> Result<NamedArray> {
    let name_len = read_u32(r)? as usize;
    if name_len > 1 << 16 {
        return Err(Error::CorruptFile("unreasonable array name length".into()));
    }
    let name = String::from_utf8(read_exact(r, name_len)?)
        .map_err(|_| Error::CorruptFile("array name is not utf8".into()))?;
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(Error::CorruptFile("unreasonable array rank".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let count: usize = shape.iter().product();
    if count > 1 << 28 {
        return Err(Error::CorruptFile("unreasonable array size".into()));
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(f64::from_le_bytes(read_exact(r, 8)?.try_into().unwrap()));
    }
    Ok(NamedArray { name, shape, data })
}

fn matrix_entry(name: &str, m: &Array2<f64>) -> NamedArray {
    NamedArray {
        name: name.to_string(),
        shape: vec![m.nrows(), m.ncols()],
        data: m.iter().cloned().collect(),
    }
}

fn vector_entry(name: &str, v: &Array1<f64>) -> NamedArray {
    NamedArray {
        name: name.to_string(),
        shape: vec![v.len()],
        data: v.to_vec(),
    }
}

pub fn save_checkpoint(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    path: &Path,
) -> Result<()> {
    let mut arrays = vec![
        matrix_entry("visual_prompt", &prompts.visual),
        matrix_entry("text_prompt", &prompts.text),
    ];
    for (i, layer) in model.encoder.layers.iter().enumerate() {
        arrays.push(matrix_entry(&format!("encoder.w{i}"), &layer.weight));
        arrays.push(vector_entry(&format!("encoder.b{i}"), &layer.bias));
    }

    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&model.config)?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for arr in &arrays {
        write_array(&mut w, arr)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DualEncoderModel, PromptParams)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let magic = read_exact(&mut r, 8)?;
    if magic != MAGIC {
        return Err(Error::CorruptFile("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let config_len = read_u64(&mut r)? as usize;
    if config_len > 1 << 20 {
        return Err(Error::CorruptFile("unreasonable config length".into()));
    }
    let config: ModelConfig = serde_json::from_slice(&read_exact(&mut r, config_len)?)
        .map_err(|e| Error::CorruptFile(format!("bad config record: {e}")))?;
    config.validate()?;

    let count = read_u32(&mut r)? as usize;
    let mut arrays = std::collections::HashMap::new();
    for _ in 0..count {
        let arr = read_array(&mut r)?;
        arrays.insert(arr.name.clone(), arr);
    }

    let take_matrix = |arrays: &std::collections::HashMap<String, NamedArray>,
                       name: &str|
     -> Result<Array2<f64>> {
        let arr = arrays
            .get(name)
            .ok_or_else(|| Error::CorruptFile(format!("missing array '{name}'")))?;
        if arr.shape.len() != 2 {
            return Err(Error::CorruptFile(format!("array '{name}' is not a matrix")));
        }
        Array2::from_shape_vec((arr.shape[0], arr.shape[1]), arr.data.clone())
            .map_err(|e| Error::CorruptFile(format!("array '{name}': {e}")))
    };
    let take_vector = |arrays: &std::collections::HashMap<String, NamedArray>,
                       name: &str|
     -> Result<Array1<f64>> {
        let arr = arrays
            .get(name)
            .ok_or_else(|| Error::CorruptFile(format!("missing array '{name}'")))?;
        if arr.shape.len() != 1 {
            return Err(Error::CorruptFile(format!("array '{name}' is not a vector")));
        }
        Ok(Array1::from_vec(arr.data.clone()))
    };

    let prompts = PromptParams {
        visual: take_matrix(&arrays, "visual_prompt")?,
        text: take_matrix(&arrays, "text_prompt")?,
    };
    let num_layers = config.hidden_dims.len() + 1;
    let mut layers = Vec::with_capacity(num_layers);
    for i in 0..num_layers {
        layers.push(DenseLayer {
            weight: take_matrix(&arrays, &format!("encoder.w{i}"))?,
            bias: take_vector(&arrays, &format!("encoder.b{i}"))?,
        });
    }
    let model = DualEncoderModel {
        config,
        encoder: Encoder { layers },
    };
    Ok((model, prompts))
}

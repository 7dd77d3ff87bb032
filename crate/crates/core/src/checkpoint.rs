//! `NMNCKPT1` checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "NMNCKPT1"
//! u64 layer count
//! per layer: u64 rows, u64 cols, rows*cols f64 weights (row-major), rows f64 biases
//! u8 noise-head flag (0 absent, 1 present)
//! if present: u8 mode (0 feature-independent, 1 feature-dependent),
//!             u64 classes, u64 feature dim,
//!             classes*4 f64 biases in (c, i, j) order,
//!             feature-dependent only: classes*4*dim f64 weights
//! ```
//!
//! Hidden layers are rectifier layers; the format does not record the
//! activation.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::classifier::{Activation, ClassifierState, Layer};
use crate::datagen::{read_f64, read_u64};
use crate::error::{Error, Result};
use crate::nmn::{NmnState, NoiseMode};

const MAGIC: &[u8; 8] = b"NMNCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub classifier: ClassifierState,
    pub nmn: Option<NmnState>,
}

fn put_u64<W: Write>(w: &mut W, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u64).to_le_bytes())
}

fn put_f64s<'a, W: Write>(w: &mut W, values: impl IntoIterator<Item = &'a f64>) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

fn get_u8<R: Read>(r: &mut R) -> std::io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

// Refuse absurd sizes before allocating.
const MAX_ELEMENTS: usize = 1 << 28;

fn bounded(n: u64, what: &str) -> Result<usize> {
    let n = n as usize;
    if n > MAX_ELEMENTS {
        return Err(Error::Format(format!("{what} {n} exceeds limit")));
    }
    Ok(n)
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.classifier.activation != Activation::Relu {
        return Err(Error::InvalidArgument("checkpoints store rectifier networks only".into()));
    }
    w.write_all(MAGIC)?;
    put_u64(w, ckpt.classifier.layers.len())?;
    for layer in &ckpt.classifier.layers {
        put_u64(w, layer.outputs())?;
        put_u64(w, layer.inputs())?;
        put_f64s(w, layer.weights.iter())?;
        put_f64s(w, layer.bias.iter())?;
    }
    match &ckpt.nmn {
        None => w.write_all(&[0])?,
        Some(head) => {
            w.write_all(&[1])?;
            let mode = match head.mode {
                NoiseMode::FeatureIndependent => 0u8,
                NoiseMode::FeatureDependent => 1u8,
            };
            w.write_all(&[mode])?;
            put_u64(w, head.num_classes)?;
            put_u64(w, head.feature_dim)?;
            put_f64s(w, head.b.iter().flatten().flatten())?;
            if head.mode == NoiseMode::FeatureDependent {
                put_f64s(w, head.u.iter())?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("missing NMNCKPT1 magic".into()));
    }
    let count = bounded(read_u64(r)?, "layer count")?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = bounded(read_u64(r)?, "rows")?;
        let cols = bounded(read_u64(r)?, "cols")?;
        let weights = Array2::from_shape_vec((rows, cols), get_f64s(r, bounded((rows * cols) as u64, "weights")?)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let bias = Array1::from(get_f64s(r, rows)?);
        layers.push(Layer { weights, bias });
    }
    let classifier = ClassifierState::from_layers(layers, Activation::Relu)?;
    let nmn = match get_u8(r)? {
        0 => None,
        1 => {
            let mode = match get_u8(r)? {
                0 => NoiseMode::FeatureIndependent,
                1 => NoiseMode::FeatureDependent,
                m => return Err(Error::Format(format!("unknown noise mode {m}"))),
            };
            let k = bounded(read_u64(r)?, "classes")?;
            let d = bounded(read_u64(r)?, "feature dim")?;
            let flat = get_f64s(r, 4 * k)?;
            let b = flat.chunks(4).map(|v| [[v[0], v[1]], [v[2], v[3]]]).collect();
            let u = match mode {
                NoiseMode::FeatureIndependent => Vec::new(),
                NoiseMode::FeatureDependent => get_f64s(r, bounded((4 * k * d) as u64, "noise weights")?)?,
            };
            Some(NmnState {
                mode,
                num_classes: k,
                feature_dim: d,
                u,
                b,
            })
        }
        f => return Err(Error::Format(format!("bad noise-head flag {f}"))),
    };
    Ok(Checkpoint { classifier, nmn })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut clf = ClassifierState::zeros(1, &[], 1, Activation::Relu);
        clf.layers[0].weights[[0, 0]] = 2.0;
        clf.layers[0].bias[0] = -1.0;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &Checkpoint { classifier: clf, nmn: None }).unwrap();
        let mut expected = b"NMNCKPT1".to_vec();
        expected.extend(1u64.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(2.0f64.to_le_bytes());
        expected.extend((-1.0f64).to_le_bytes());
        expected.push(0);
        assert_eq!(buf, expected);
    }

    #[test]
    fn round_trip_with_head() {
        for mode in [NoiseMode::FeatureIndependent, NoiseMode::FeatureDependent] {
            let clf = ClassifierState::new(3, &[5, 4], 2, Activation::Relu, 8);
            let mut head = NmnState::new(mode, 2, 4);
            let mut k = 0.0;
            head.for_each_param_mut(|p| {
                k += 0.1;
                *p = k;
            });
            let ckpt = Checkpoint { classifier: clf, nmn: Some(head) };
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &ckpt).unwrap();
            assert_eq!(read_checkpoint(&mut buf.as_slice()).unwrap(), ckpt);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint(&mut &b"NOTACKPT"[..]).is_err());
        let tanh = ClassifierState::zeros(2, &[2], 1, Activation::Tanh);
        assert!(write_checkpoint(&mut Vec::new(), &Checkpoint { classifier: tanh, nmn: None }).is_err());
    }
}

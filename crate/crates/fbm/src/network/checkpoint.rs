//! JSON serialization of trained stacks.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{FbmError, Result};
use crate::network::{Activation, Layer, LayerStack};

#[derive(Serialize, Deserialize)]
struct LayerData {
    out_dim: usize,
    in_dim: usize,
    activation: Activation,
    /// Row-major weights, length `out_dim * in_dim`.
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StackData {
    schema_version: u32,
    layers: Vec<LayerData>,
    readout: Option<LayerData>,
}

const SCHEMA_VERSION: u32 = 1;

fn pack(weights: &Array2<f64>, activation: Activation) -> LayerData {
    LayerData {
        out_dim: weights.nrows(),
        in_dim: weights.ncols(),
        activation,
        weights: weights.iter().cloned().collect(),
    }
}

fn unpack(data: LayerData) -> Result<(Array2<f64>, Activation)> {
    if data.weights.len() != data.out_dim * data.in_dim {
        return Err(FbmError::Format(format!(
            "layer claims {}x{} but carries {} weights",
            data.out_dim,
            data.in_dim,
            data.weights.len()
        )));
    }
    let w = Array2::from_shape_vec((data.out_dim, data.in_dim), data.weights)
        .map_err(|e| FbmError::Format(format!("bad weight shape: {e}")))?;
    Ok((w, data.activation))
}

/// Write a stack (and its readout, if any) to a JSON file.
pub fn save_stack(path: &Path, stack: &LayerStack) -> Result<()> {
    let data = StackData {
        schema_version: SCHEMA_VERSION,
        layers: stack
            .layers
            .iter()
            .map(|l| pack(&l.weights, l.activation))
            .collect(),
        readout: stack
            .readout
            .as_ref()
            .map(|r| pack(r, Activation::Tanh)),
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &data)?;
    Ok(())
}

/// Load a stack saved by [`save_stack`], validating shapes and chaining.
pub fn load_stack(path: &Path) -> Result<LayerStack> {
    let file = std::fs::File::open(path)?;
    let data: StackData = serde_json::from_reader(std::io::BufReader::new(file))?;
    if data.schema_version != SCHEMA_VERSION {
        return Err(FbmError::Format(format!(
            "checkpoint schema {} unsupported (expected {SCHEMA_VERSION})",
            data.schema_version
        )));
    }
    let mut layers = Vec::with_capacity(data.layers.len());
    let mut prev_out: Option<usize> = None;
    for ld in data.layers {
        let (weights, activation) = unpack(ld)?;
        if let Some(p) = prev_out {
            if weights.ncols() != p {
                return Err(FbmError::Dimension(format!(
                    "layer expects {} inputs but the previous layer yields {p}",
                    weights.ncols()
                )));
            }
        }
        prev_out = Some(weights.nrows());
        layers.push(Layer {
            weights,
            activation,
        });
    }
    let readout = match data.readout {
        Some(rd) => {
            let (w, _) = unpack(rd)?;
            if let Some(p) = prev_out {
                if w.ncols() != p {
                    return Err(FbmError::Dimension(format!(
                        "readout expects {} features but the stack yields {p}",
                        w.ncols()
                    )));
                }
            }
            Some(w)
        }
        None => None,
    };
    Ok(LayerStack { layers, readout })
}

//! Versioned JSON checkpoints. Masks are not stored; they are rebuilt from
//! the graph, widths and mask seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FlowError, MaskedLayer, ResidualBlock, ResidualFlow};
use crate::graph::parse_graph;
use crate::tensor::Tensor2;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub hidden_widths: Vec<usize>,
    pub mask_seed: u64,
    pub beta: f64,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub graph: String,
    pub conditioning: Vec<String>,
    pub conditioning_dim: usize,
    pub lip_bound: f64,
    pub steps: usize,
    pub blocks: Vec<BlockRecord>,
}

impl Checkpoint {
    pub fn from_flow(f: &ResidualFlow) -> Self {
        let blocks = f
            .blocks()
            .iter()
            .map(|b| BlockRecord {
                hidden_widths: b.hidden_widths().to_vec(),
                mask_seed: b.mask_seed(),
                beta: b.beta(),
                layers: b
                    .layers()
                    .iter()
                    .map(|l| LayerRecord {
                        weight: l.weight.to_rows(),
                        bias: l.bias.data().to_vec(),
                        u: l.u.clone(),
                    })
                    .collect(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            graph: f.graph().render(),
            conditioning: f.conditioning().to_vec(),
            conditioning_dim: f.cond_dim(),
            lip_bound: f.lip_bound(),
            steps: f.steps(),
            blocks,
        }
    }

    pub fn into_flow(self) -> Result<ResidualFlow, FlowError> {
        let bad = |m: String| FlowError::Checkpoint(m);
        if self.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", self.version)));
        }
        if self.blocks.len() != self.steps || self.steps == 0 {
            return Err(bad(format!(
                "{} blocks recorded for {} steps",
                self.blocks.len(),
                self.steps
            )));
        }
        if self.conditioning.len() != self.conditioning_dim {
            return Err(bad("conditioning names do not match conditioning_dim".into()));
        }
        let graph = parse_graph(&self.graph).map_err(|e| bad(format!("graph: {e}")))?;
        let d = graph.len();
        let mut blocks = Vec::with_capacity(self.steps);
        for (k, rec) in self.blocks.into_iter().enumerate() {
            let masks = ResidualBlock::masks_for(
                &graph,
                self.conditioning_dim,
                &rec.hidden_widths,
                rec.mask_seed,
            )?;
            if masks.masks.len() != rec.layers.len() {
                return Err(bad(format!("block {k}: layer count mismatch")));
            }
            let mut layers = Vec::with_capacity(rec.layers.len());
            for (l, (mask, lr)) in masks.masks.into_iter().zip(rec.layers).enumerate() {
                let weight = Tensor2::from_rows(&lr.weight);
                if weight.shape() != mask.shape()
                    || lr.bias.len() != mask.rows()
                    || lr.u.len() != mask.rows()
                {
                    return Err(bad(format!("block {k} layer {l}: shape mismatch")));
                }
                layers.push(MaskedLayer {
                    bias: Tensor2::row_vector(&lr.bias),
                    weight,
                    mask,
                    u: lr.u,
                });
            }
            blocks.push(ResidualBlock {
                layers,
                beta: rec.beta,
                lip_bound: self.lip_bound,
                dim: d,
                cond_dim: self.conditioning_dim,
                hidden_widths: rec.hidden_widths,
                mask_seed: rec.mask_seed,
            });
        }
        Ok(ResidualFlow::from_parts(graph, self.conditioning, blocks))
    }
}

pub fn to_json(f: &ResidualFlow) -> String {
    serde_json::to_string(&Checkpoint::from_flow(f)).expect("checkpoint serializes")
}

pub fn from_json(text: &str) -> Result<ResidualFlow, FlowError> {
    let ck: Checkpoint =
        serde_json::from_str(text).map_err(|e| FlowError::Checkpoint(e.to_string()))?;
    ck.into_flow()
}

pub fn save(f: &ResidualFlow, path: &Path) -> Result<(), FlowError> {
    std::fs::write(path, to_json(f))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ResidualFlow, FlowError> {
    from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::graph::tree_graph;

    #[test]
    fn round_trip_is_exact() {
        let f = ResidualFlow::new(tree_graph(false), vec![], &FlowConfig::new(2, 20, 9)).unwrap();
        let back = from_json(&to_json(&f)).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn rejects_future_version() {
        let f = ResidualFlow::new(tree_graph(false), vec![], &FlowConfig::new(1, 10, 1)).unwrap();
        let mut ck = Checkpoint::from_flow(&f);
        ck.version = 99;
        assert!(ck.into_flow().is_err());
    }
}

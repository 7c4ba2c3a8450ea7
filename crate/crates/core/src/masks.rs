//! Connectivity masks that confine each residual-block output to its
//! variable and that variable's parents.
//!
//! Every unit carries a set of variables. Inputs carry `{x_i}`, outputs
//! carry `{x_i} ∪ Pa(x_i)` and hidden units draw one of those sets at
//! random. A weight survives only when the receiving unit's set is a
//! superset of the sending unit's set, so any input-to-output path moves
//! from `{x_i}` to a family containing `x_i` and nothing else.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::DagGraph;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("hidden layer {layer} has width {width}, need at least {min} to cover every variable")]
    WidthTooSmall {
        layer: usize,
        width: usize,
        min: usize,
    },
}

/// Variable set attached to a network unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnitLabel {
    /// `{x_i}`
    Singleton(usize),
    /// `{x_i} ∪ Pa(x_i)`
    Family(usize),
    /// Conditioning input `k`; carries no flow variables and may feed any unit.
    Conditioning(usize),
}

impl UnitLabel {
    fn set(self, g: &DagGraph) -> VarSet {
        let mut s = VarSet::new(g.len());
        match self {
            UnitLabel::Singleton(i) => s.insert(i),
            UnitLabel::Family(i) => {
                s.insert(i);
                for &p in g.parents(i) {
                    s.insert(p);
                }
            }
            UnitLabel::Conditioning(_) => {}
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct VarSet(Vec<u64>);

impl VarSet {
    fn new(n: usize) -> Self {
        Self(vec![0; n.div_ceil(64).max(1)])
    }

    fn insert(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn is_superset(&self, other: &Self) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| b & !a == 0)
    }
}

/// Labels of every layer of one block: input, hidden layers, output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLabels {
    pub layers: Vec<Vec<UnitLabel>>,
    pub seed: u64,
}

impl LayerLabels {
    pub fn input(&self) -> &[UnitLabel] {
        &self.layers[0]
    }

    pub fn hidden(&self) -> &[Vec<UnitLabel>] {
        &self.layers[1..self.layers.len() - 1]
    }

    pub fn output(&self) -> &[UnitLabel] {
        self.layers.last().expect("at least input and output")
    }
}

/// Binary masks for one residual block, `masks[l]` shaped like the
/// `l`-th weight matrix (`out x in`).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<Tensor2>,
    pub labels: LayerLabels,
}

impl MaskSet {
    pub fn ones(&self) -> usize {
        self.masks
            .iter()
            .map(|m| m.data().iter().filter(|&&v| v != 0.0).count())
            .sum()
    }
}

/// Distinct candidate sets for hidden units: every singleton, plus the
/// family of each node that has parents (a root's family is its singleton).
fn candidates(g: &DagGraph) -> Vec<UnitLabel> {
    let mut c: Vec<UnitLabel> = (0..g.len()).map(UnitLabel::Singleton).collect();
    c.extend(
        (0..g.len())
            .filter(|&i| !g.parents(i).is_empty())
            .map(UnitLabel::Family),
    );
    c
}

/// Draws hidden labels uniformly from the candidate sets, then patches
/// each layer so every variable owns at least one singleton unit.
pub fn assign_labels(
    g: &DagGraph,
    hidden_widths: &[usize],
    seed: u64,
) -> Result<LayerLabels, MaskError> {
    assign_labels_conditional(g, 0, hidden_widths, seed)
}

/// As [`assign_labels`], with `cond_count` conditioning inputs appended
/// after the flow variables on the input layer.
pub fn assign_labels_conditional(
    g: &DagGraph,
    cond_count: usize,
    hidden_widths: &[usize],
    seed: u64,
) -> Result<LayerLabels, MaskError> {
    let d = g.len();
    for (layer, &width) in hidden_widths.iter().enumerate() {
        if width < d {
            return Err(MaskError::WidthTooSmall {
                layer,
                width,
                min: d,
            });
        }
    }
    let cands = candidates(g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut layers = Vec::with_capacity(hidden_widths.len() + 2);
    let mut input: Vec<UnitLabel> = (0..d).map(UnitLabel::Singleton).collect();
    input.extend((0..cond_count).map(UnitLabel::Conditioning));
    layers.push(input);

    for &width in hidden_widths {
        let mut units: Vec<UnitLabel> = (0..width)
            .map(|_| cands[rng.random_range(0..cands.len())])
            .collect();
        patch_coverage(&mut units, d);
        layers.push(units);
    }
    layers.push((0..d).map(UnitLabel::Family).collect());
    Ok(LayerLabels { layers, seed })
}

fn patch_coverage(units: &mut [UnitLabel], d: usize) {
    let mut count = vec![0usize; d];
    for u in units.iter() {
        if let UnitLabel::Singleton(i) = u {
            count[*i] += 1;
        }
    }
    let mut cursor = 0;
    for var in 0..d {
        if count[var] > 0 {
            continue;
        }
        // skip units that are the sole singleton of their variable
        loop {
            let slot = cursor % units.len();
            cursor += 1;
            let protected = matches!(units[slot], UnitLabel::Singleton(i) if count[i] == 1);
            if !protected {
                if let UnitLabel::Singleton(i) = units[slot] {
                    count[i] -= 1;
                }
                units[slot] = UnitLabel::Singleton(var);
                count[var] = 1;
                break;
            }
        }
    }
}

/// Applies the superset rule between consecutive layers.
pub fn build_masks(g: &DagGraph, labels: LayerLabels) -> MaskSet {
    let sets: Vec<Vec<VarSet>> = labels
        .layers
        .iter()
        .map(|layer| layer.iter().map(|l| l.set(g)).collect())
        .collect();
    let masks = sets
        .windows(2)
        .map(|pair| {
            let (prev, next) = (&pair[0], &pair[1]);
            let mut m = Tensor2::zeros(next.len(), prev.len());
            for (j, sj) in next.iter().enumerate() {
                for (i, si) in prev.iter().enumerate() {
                    if sj.is_superset(si) {
                        m.set(j, i, 1.0);
                    }
                }
            }
            m
        })
        .collect();
    MaskSet { masks, labels }
}

/// Masks for a conditional block over an inverted latent graph. The
/// conditioning columns are unmasked in every layer.
pub fn conditional_masks(g_inv: &DagGraph, obs_count: usize, labels: LayerLabels) -> MaskSet {
    debug_assert_eq!(labels.input().len(), g_inv.len() + obs_count);
    build_masks(g_inv, labels)
}

/// `reach[j][i]`: some path of 1-entries connects input unit `i` to output
/// unit `j`.
pub fn reachability(masks: &MaskSet) -> Vec<Vec<bool>> {
    let n_in = masks.masks[0].cols();
    // reach from each input to units of the current layer
    let mut cur: Vec<Vec<bool>> = (0..n_in)
        .map(|i| (0..n_in).map(|k| k == i).collect())
        .collect();
    for m in &masks.masks {
        cur = (0..n_in)
            .map(|i| {
                (0..m.rows())
                    .map(|j| (0..m.cols()).any(|k| cur[i][k] && m.get(j, k) != 0.0))
                    .collect()
            })
            .collect();
    }
    let n_out = masks.masks.last().map_or(0, Tensor2::rows);
    (0..n_out)
        .map(|j| (0..n_in).map(|i| cur[i][j]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{arithmetic_circuit_graph, parse_graph};

    #[test]
    fn single_root_gets_singletons() {
        let g = parse_graph("x0").unwrap();
        let l = assign_labels(&g, &[2], 0).unwrap();
        assert_eq!(l.hidden()[0], vec![UnitLabel::Singleton(0); 2]);
    }

    #[test]
    fn chain_covers_both_singletons() {
        let g = parse_graph("x0; x1; x0 -> x1").unwrap();
        for seed in 0..20 {
            let l = assign_labels(&g, &[4], seed).unwrap();
            let h = &l.hidden()[0];
            assert!(h.contains(&UnitLabel::Singleton(0)));
            assert!(h.contains(&UnitLabel::Singleton(1)));
        }
    }

    #[test]
    fn arithmetic_circuit_histogram_covers_all_singletons() {
        let g = arithmetic_circuit_graph(false);
        let l = assign_labels(&g, &[125], 42).unwrap();
        let mut hist = vec![0; g.len()];
        for u in &l.hidden()[0] {
            if let UnitLabel::Singleton(i) = u {
                hist[*i] += 1;
            }
        }
        assert!(hist.iter().all(|&c| c >= 1), "{hist:?}");
        assert_eq!(l.hidden()[0].len(), 125);
    }

    #[test]
    fn width_below_node_count_is_rejected() {
        let g = arithmetic_circuit_graph(false);
        assert_eq!(
            assign_labels(&g, &[16, 7], 0),
            Err(MaskError::WidthTooSmall {
                layer: 1,
                width: 7,
                min: 8
            })
        );
    }

    #[test]
    fn labels_are_deterministic_per_seed() {
        let g = arithmetic_circuit_graph(false);
        assert_eq!(
            assign_labels(&g, &[30, 20], 9).unwrap(),
            assign_labels(&g, &[30, 20], 9).unwrap()
        );
        assert_ne!(
            assign_labels(&g, &[30], 9).unwrap(),
            assign_labels(&g, &[30], 10).unwrap()
        );
    }

    #[test]
    fn edgeless_graph_gives_diagonal_reachability() {
        let g = parse_graph("a; b; c").unwrap();
        let m = build_masks(&g, assign_labels(&g, &[9], 1).unwrap());
        let r = reachability(&m);
        for (j, row) in r.iter().enumerate() {
            for (i, &reach) in row.iter().enumerate() {
                assert_eq!(reach, i == j);
            }
        }
    }

    #[test]
    fn four_variable_example_superset_rule() {
        // x0 -> x2, x1 -> x2, x2 -> x3
        let g = parse_graph("x0; x1; x2; x3; x0 -> x2; x1 -> x2; x2 -> x3").unwrap();
        let labels = LayerLabels {
            layers: vec![
                (0..4).map(UnitLabel::Singleton).collect(),
                vec![
                    UnitLabel::Singleton(0),
                    UnitLabel::Family(2),
                    UnitLabel::Singleton(1),
                    UnitLabel::Singleton(2),
                    UnitLabel::Family(3),
                    UnitLabel::Singleton(3),
                ],
                (0..4).map(UnitLabel::Family).collect(),
            ],
            seed: 0,
        };
        let m = build_masks(&g, labels);
        let w1 = [
            [1., 0., 0., 0.],
            [1., 1., 1., 0.],
            [0., 1., 0., 0.],
            [0., 0., 1., 0.],
            [0., 0., 1., 1.],
            [0., 0., 0., 1.],
        ];
        let w2 = [
            [1., 0., 0., 0., 0., 0.],
            [0., 0., 1., 0., 0., 0.],
            [1., 1., 1., 1., 0., 0.],
            [0., 0., 0., 1., 1., 1.],
        ];
        assert_eq!(m.masks[0], Tensor2::from_rows(&w1));
        assert_eq!(m.masks[1], Tensor2::from_rows(&w2));
    }

    #[test]
    fn conditional_columns_are_unmasked() {
        let g = parse_graph("z").unwrap();
        let labels = assign_labels_conditional(&g, 1, &[3], 0).unwrap();
        let m = conditional_masks(&g, 1, labels);
        let r = reachability(&m);
        assert_eq!(r, vec![vec![true, true]]);
        assert!((0..3).all(|k| m.masks[0].get(k, 1) == 1.0));
    }

    #[test]
    fn zero_conditioning_matches_plain_masks() {
        let g = arithmetic_circuit_graph(false);
        let a = build_masks(&g, assign_labels(&g, &[20], 3).unwrap());
        let labels = assign_labels_conditional(&g, 0, &[20], 3).unwrap();
        assert_eq!(conditional_masks(&g, 0, labels), a);
    }
}

use crate::flow::FlowConfig;

/// Architecture of a named model: number of residual blocks and the
/// width of their single hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub dataset: &'static str,
    pub steps: usize,
    pub width: usize,
    /// Parameter count listed for the architecture.
    pub listed_params: usize,
}

impl Preset {
    pub fn flow_config(&self, seed: u64) -> FlowConfig {
        FlowConfig::new(self.steps, self.width, seed)
    }

    /// Parameter budget of the size class.
    pub fn budget(&self) -> usize {
        if self.name.starts_with("grf-s") {
            5000
        } else {
            15000
        }
    }
}

pub const PRESETS: [Preset; 6] = [
    Preset {
        name: "grf-s-arith",
        dataset: "arithmetic-circuit",
        steps: 8,
        width: 125,
        listed_params: 4320,
    },
    Preset {
        name: "grf-l-arith",
        dataset: "arithmetic-circuit",
        steps: 17,
        width: 200,
        listed_params: 14569,
    },
    Preset {
        name: "grf-s-tree",
        dataset: "tree",
        steps: 8,
        width: 125,
        listed_params: 4616,
    },
    Preset {
        name: "grf-l-tree",
        dataset: "tree",
        steps: 21,
        width: 150,
        listed_params: 14490,
    },
    Preset {
        name: "grf-s-protein",
        dataset: "protein",
        steps: 9,
        width: 100,
        listed_params: 4779,
    },
    Preset {
        name: "grf-l-protein",
        dataset: "protein",
        steps: 22,
        width: 125,
        listed_params: 14586,
    },
];

pub fn preset(name: &str) -> Option<Preset> {
    PRESETS.iter().copied().find(|p| p.name == name)
}

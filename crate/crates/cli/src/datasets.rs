//! Dataset directories: `train.csv`, `test.csv` and `dataset.json`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use grflow::data::{
    self, ArithmeticCircuit, ConjugateGaussian, DatasetBundle, JointDensity, Split, Tree,
};
use grflow::graph::{parse_graph, protein_graph, DagGraph};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    #[value(alias = "arith")]
    ArithmeticCircuit,
    Tree,
    ConjugateGaussian,
    Protein,
}

impl DatasetName {
    pub fn generate(self, n_train: usize, n_test: usize, seed: u64) -> Result<DatasetBundle> {
        Ok(match self {
            DatasetName::ArithmeticCircuit => data::arithmetic_circuit(n_train, n_test, seed),
            DatasetName::Tree => data::tree(n_train, n_test, seed),
            DatasetName::ConjugateGaussian => data::conjugate_gaussian(n_train, n_test, seed),
            DatasetName::Protein => bail!("protein data is read from a CSV file (--csv)"),
        })
    }

    fn joint(self) -> Option<Arc<dyn JointDensity>> {
        match self {
            DatasetName::ArithmeticCircuit => Some(Arc::new(ArithmeticCircuit::new(true))),
            DatasetName::Tree => Some(Arc::new(Tree::new(true))),
            DatasetName::ConjugateGaussian => Some(Arc::new(ConjugateGaussian::default())),
            DatasetName::Protein => None,
        }
    }

    pub fn preset_suffix(self) -> &'static str {
        match self {
            DatasetName::ArithmeticCircuit => "arith",
            DatasetName::Tree => "tree",
            DatasetName::ConjugateGaussian => "conjugate",
            DatasetName::Protein => "protein",
        }
    }
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub dataset: DatasetName,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub graph: String,
}

pub const INFO_NAME: &str = "dataset.json";

pub fn write_dir(dir: &Path, name: DatasetName, seed: u64, b: &DatasetBundle) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let train = dir.join("train.csv");
    let test = dir.join("test.csv");
    data::write_matrix(&train, b.graph.nodes(), &b.train)?;
    data::write_matrix(&test, b.graph.nodes(), &b.test)?;
    let info = DatasetInfo {
        dataset: name,
        seed,
        n_train: b.train.rows(),
        n_test: b.test.rows(),
        graph: b.graph.render(),
    };
    let info_path = dir.join(INFO_NAME);
    std::fs::write(&info_path, serde_json::to_string_pretty(&info)?)?;
    Ok(vec![train, test, info_path])
}

/// Where a dataset comes from, as given on the command line.
#[derive(Debug, Clone)]
pub enum Source {
    Dir(PathBuf),
    Csv {
        path: PathBuf,
        graph: Option<PathBuf>,
        split: Split,
        standardize: bool,
    },
}

impl Source {
    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Source::Dir(d) => ["train.csv", "test.csv", INFO_NAME].iter().map(|f| d.join(f)).collect(),
            Source::Csv { path, graph, .. } => std::iter::once(path.clone()).chain(graph.clone()).collect(),
        }
    }

    pub fn load(&self) -> Result<(DatasetBundle, Option<DatasetName>)> {
        match self {
            Source::Dir(dir) => {
                let info_path = dir.join(INFO_NAME);
                let info: DatasetInfo = serde_json::from_str(
                    &std::fs::read_to_string(&info_path)
                        .with_context(|| format!("reading {}", info_path.display()))?,
                )
                .with_context(|| format!("parsing {}", info_path.display()))?;
                let graph = parse_graph(&info.graph).context("dataset graph")?;
                let train = data::read_matrix(&dir.join("train.csv"), &graph)?;
                let test = data::read_matrix(&dir.join("test.csv"), &graph)?;
                Ok((
                    DatasetBundle {
                        name: format!("{:?}", info.dataset).to_lowercase(),
                        graph,
                        train,
                        test,
                        joint: info.dataset.joint(),
                        standardization: None,
                        metadata: Default::default(),
                    },
                    Some(info.dataset),
                ))
            }
            Source::Csv {
                path,
                graph,
                split,
                standardize,
            } => {
                let g: DagGraph = match graph {
                    Some(p) => parse_graph(
                        &std::fs::read_to_string(p)
                            .with_context(|| format!("reading {}", p.display()))?,
                    )
                    .with_context(|| format!("graph {}", p.display()))?,
                    None => protein_graph(),
                };
                let b = data::load_csv(path, &g, *split, *standardize)?;
                Ok((b, graph.is_none().then_some(DatasetName::Protein)))
            }
        }
    }
}

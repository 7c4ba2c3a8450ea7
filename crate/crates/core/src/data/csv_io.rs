use std::collections::BTreeMap;
use std::path::Path;

use super::{DataError, DatasetBundle};
use crate::graph::DagGraph;
use crate::tensor::Tensor2;

/// Row counts of a train/test split taken in file order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Split {
    pub train: usize,
    /// `None` takes every remaining row.
    pub test: Option<usize>,
}

impl Default for Split {
    fn default() -> Self {
        Self {
            train: 5000,
            test: None,
        }
    }
}

/// Reads a headed CSV and returns its columns reordered to the graph's
/// node order. Extra columns are ignored.
pub fn read_matrix(path: &Path, graph: &DagGraph) -> Result<Tensor2, DataError> {
    let name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    let width = headers.len();
    let cols: Vec<usize> = graph
        .nodes()
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| DataError::MissingColumn {
                    path: name.clone(),
                    name: n.clone(),
                })
        })
        .collect::<Result<_, _>>()?;
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(DataError::RaggedRow {
                path: name,
                line,
                expected: width,
                found: rec.len(),
            });
        }
        for (&c, node) in cols.iter().zip(graph.nodes()) {
            let cell = &rec[c];
            let v: f64 = cell.parse().map_err(|_| DataError::NonNumeric {
                path: name.clone(),
                line,
                column: node.clone(),
                value: cell.to_string(),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Tensor2::from_vec(rows, graph.len(), data).map_err(|e| DataError::Invalid(e.to_string()))
}

/// Loads a single table and splits it in file order.
pub fn load_csv(
    path: &Path,
    graph: &DagGraph,
    split: Split,
    standardize: bool,
) -> Result<DatasetBundle, DataError> {
    let all = read_matrix(path, graph)?;
    let needed = split.train + split.test.unwrap_or(1);
    if all.rows() < needed {
        return Err(DataError::RowShortfall {
            path: path.display().to_string(),
            needed,
            found: all.rows(),
        });
    }
    let end = split.test.map_or(all.rows(), |t| split.train + t);
    let slice = |a, b| all.slice_rows(a, b).map_err(|e| DataError::Invalid(e.to_string()));
    let mut bundle = DatasetBundle {
        name: path
            .file_stem()
            .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned()),
        graph: graph.clone(),
        train: slice(0, split.train)?,
        test: slice(split.train, end)?,
        joint: None,
        standardization: None,
        metadata: BTreeMap::from([("source".to_string(), path.display().to_string())]),
    };
    if standardize {
        bundle.standardize()?;
    }
    Ok(bundle)
}

/// Writes a matrix with a header row. Values use the shortest
/// representation that round-trips.
pub fn write_matrix<S: AsRef<str>>(
    path: &Path,
    header: &[S],
    m: &Tensor2,
) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header.iter().map(AsRef::as_ref))?;
    for r in 0..m.rows() {
        w.write_record(m.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_graph;

    #[test]
    fn permuted_header_is_reordered() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "b,a\n2,1\n4,3\n6,5\n").unwrap();
        let g = parse_graph("a; b; a -> b").unwrap();
        let b = load_csv(&p, &g, Split { train: 2, test: None }, false).unwrap();
        assert_eq!(b.train.to_rows(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(b.test.to_rows(), vec![vec![5.0, 6.0]]);
    }

    #[test]
    fn errors_carry_locations() {
        let dir = tempfile::tempdir().unwrap();
        let g = parse_graph("a; b").unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "a,b\n1,2\n3,x\n").unwrap();
        let e = read_matrix(&p, &g).unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("`b`"), "{e}");

        std::fs::write(&p, "a,c\n1,2\n").unwrap();
        assert!(matches!(read_matrix(&p, &g), Err(DataError::MissingColumn { .. })));

        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        let e = load_csv(&p, &g, Split { train: 5, test: None }, false).unwrap_err();
        assert!(matches!(e, DataError::RowShortfall { needed: 6, found: 1, .. }));
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let g = parse_graph("a; b").unwrap();
        let m = Tensor2::from_rows(&[[0.1, 1.0 / 3.0], [-2.5e-300, 7.0]]);
        write_matrix(&p, g.nodes(), &m).unwrap();
        assert_eq!(read_matrix(&p, &g).unwrap(), m);
    }
}

//! Bayesian-network DAGs: parsing, topological ordering and inversion for
//! amortized inference.
//!
//! Graph files are a minimal edge-list language. Statements are separated
//! by `;` or newlines and `#` starts a comment:
//!
//! ```text
//! # arithmetic circuit
//! z0; z1; z2
//! z0 -> z2; z1 -> z2
//! latent z0, z1
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("line {line}: malformed statement `{text}`")]
    Malformed { line: usize, text: String },
    #[error("line {line}: duplicate node `{name}`")]
    DuplicateNode { line: usize, name: String },
    #[error("line {line}: unknown node `{name}`")]
    UnknownEndpoint { line: usize, name: String },
    #[error("line {line}: edge {from} -> {to} closes a cycle")]
    Cycle {
        line: usize,
        from: String,
        to: String,
    },
    #[error("graph has no latent nodes to infer")]
    NoLatent,
    #[error("node name must be non-empty")]
    EmptyName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Observed,
    Latent,
}

/// A validated DAG over named variables. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DagGraph {
    nodes: Vec<String>,
    edges: Vec<(usize, usize)>,
    roles: Vec<Role>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
}

/// A permutation of node indices in which every parent precedes its children.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopoOrder(pub Vec<usize>);

impl TopoOrder {
    /// Whether every edge of `g` goes forward in this order.
    pub fn respects(&self, g: &DagGraph) -> bool {
        if self.0.len() != g.len() {
            return false;
        }
        let mut pos = vec![usize::MAX; g.len()];
        for (i, &n) in self.0.iter().enumerate() {
            if n >= g.len() || pos[n] != usize::MAX {
                return false;
            }
            pos[n] = i;
        }
        g.edges().iter().all(|&(u, v)| pos[u] < pos[v])
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_alphanumeric() || c == '_' || c == '.' || c == '-')
        && !s.contains("->")
}

impl DagGraph {
    /// Builds a graph from names, edges and the set of latent node names.
    pub fn new<S: AsRef<str>>(
        nodes: &[S],
        edges: &[(S, S)],
        latent: &[S],
    ) -> Result<Self, GraphError> {
        let mut b = Builder::default();
        for n in nodes {
            b.declare(n.as_ref(), 0)?;
        }
        for (u, v) in edges {
            b.edge(u.as_ref(), v.as_ref(), 0)?;
        }
        for l in latent {
            b.mark_latent(l.as_ref(), 0)?;
        }
        Ok(b.finish())
    }

    pub(crate) fn from_indices(
        nodes: Vec<String>,
        edges: Vec<(usize, usize)>,
        roles: Vec<Role>,
    ) -> Self {
        let n = nodes.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for &(u, v) in &edges {
            parents[v].push(u);
            children[u].push(v);
        }
        for p in parents.iter_mut().chain(children.iter_mut()) {
            p.sort_unstable();
        }
        Self {
            nodes,
            edges,
            roles,
            parents,
            children,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn role(&self, i: usize) -> Role {
        self.roles[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.nodes[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == name)
    }

    /// Parents of node `i`, sorted by index.
    pub fn parents(&self, i: usize) -> &[usize] {
        &self.parents[i]
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn latent_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.roles[i] == Role::Latent)
            .collect()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.roles[i] == Role::Observed)
            .collect()
    }

    /// The same structure with every node marked observed.
    pub fn all_observed(&self) -> Self {
        let mut g = self.clone();
        g.roles.iter_mut().for_each(|r| *r = Role::Observed);
        g
    }

    /// `is_ancestor[i][j]` is true when `i` is `j` or an ancestor of `j`.
    pub fn ancestor_or_self(&self) -> Vec<Vec<bool>> {
        let n = self.len();
        let mut anc = vec![vec![false; n]; n];
        for j in self.topo_sort().0 {
            anc[j][j] = true;
            for &p in &self.parents[j] {
                for i in 0..n {
                    if anc[i][p] {
                        anc[i][j] = true;
                    }
                }
            }
        }
        anc
    }

    /// Kahn's algorithm, always emitting the ready node declared first.
    pub fn topo_sort(&self) -> TopoOrder {
        let n = self.len();
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(u) = ready.pop_first() {
            order.push(u);
            for &c in &self.children[u] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        debug_assert_eq!(order.len(), n, "graph invariant: acyclic");
        TopoOrder(order)
    }

    /// Undirected moral graph: parent-child links plus links between every
    /// pair of co-parents.
    pub fn moral_adjacency(&self) -> Vec<BTreeSet<usize>> {
        let n = self.len();
        let mut adj = vec![BTreeSet::new(); n];
        for &(u, v) in &self.edges {
            adj[u].insert(v);
            adj[v].insert(u);
        }
        for v in 0..n {
            let ps = &self.parents[v];
            for (a, &p) in ps.iter().enumerate() {
                for &q in &ps[a + 1..] {
                    adj[p].insert(q);
                    adj[q].insert(p);
                }
            }
        }
        adj
    }

    /// Builds the structure of an amortized posterior `q(z | x)` over the
    /// latent nodes.
    ///
    /// The graph is moralized, observed nodes are conditioned away, and the
    /// latents are eliminated in reverse topological order. Each eliminated
    /// latent takes its remaining moral neighbours as parents and those
    /// neighbours are connected (fill-in), so every parent set is a clique
    /// and the result is an I-map of the posterior. Because parents always
    /// precede their child in the original order, the output is acyclic.
    pub fn invert_for_inference(&self) -> Result<InvertedGraph, GraphError> {
        let latent = self.latent_indices();
        if latent.is_empty() {
            return Err(GraphError::NoLatent);
        }
        let order = self.topo_sort().0;
        let mut pos = vec![0; self.len()];
        for (i, &n) in order.iter().enumerate() {
            pos[n] = i;
        }

        // local index of each latent in declaration order
        let mut local = vec![usize::MAX; self.len()];
        for (k, &l) in latent.iter().enumerate() {
            local[l] = k;
        }

        let moral = self.moral_adjacency();
        let mut adj: Vec<BTreeSet<usize>> = latent
            .iter()
            .map(|&l| {
                moral[l]
                    .iter()
                    .filter(|&&m| self.roles[m] == Role::Latent)
                    .copied()
                    .collect()
            })
            .collect();

        let mut elim: Vec<usize> = latent.clone();
        elim.sort_by_key(|&l| std::cmp::Reverse(pos[l]));

        let mut eliminated = vec![false; self.len()];
        let mut edges = Vec::new();
        for &v in &elim {
            let nbrs: Vec<usize> = adj[local[v]]
                .iter()
                .copied()
                .filter(|&u| !eliminated[u])
                .collect();
            for &u in &nbrs {
                edges.push((local[u], local[v]));
            }
            for (a, &p) in nbrs.iter().enumerate() {
                for &q in &nbrs[a + 1..] {
                    adj[local[p]].insert(q);
                    adj[local[q]].insert(p);
                }
            }
            eliminated[v] = true;
        }
        edges.sort_unstable();

        let names = latent.iter().map(|&l| self.nodes[l].clone()).collect();
        let graph = DagGraph::from_indices(names, edges, vec![Role::Latent; latent.len()]);
        let observed = self.observed_indices();
        Ok(InvertedGraph {
            conditioning: observed.iter().map(|&o| self.nodes[o].clone()).collect(),
            latent_index: latent,
            observed_index: observed,
            graph,
        })
    }

    /// Serializes to the graph file format; `parse_graph(render())` is the
    /// identity.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let _ = writeln!(out, "{n}");
        }
        for &(u, v) in &self.edges {
            let _ = writeln!(out, "{} -> {}", self.nodes[u], self.nodes[v]);
        }
        let latent: Vec<&str> = self
            .latent_indices()
            .into_iter()
            .map(|i| self.nodes[i].as_str())
            .collect();
        if !latent.is_empty() {
            let _ = writeln!(out, "latent {}", latent.join(", "));
        }
        out
    }
}

/// Output of [`DagGraph::invert_for_inference`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvertedGraph {
    /// DAG over the latent nodes only, in original declaration order.
    pub graph: DagGraph,
    /// Observed node names, used as global conditioning inputs.
    pub conditioning: Vec<String>,
    /// Original index of each latent node.
    pub latent_index: Vec<usize>,
    /// Original index of each observed node.
    pub observed_index: Vec<usize>,
}

#[derive(Default)]
struct Builder {
    nodes: Vec<String>,
    edges: Vec<(usize, usize)>,
    roles: Vec<Role>,
    children: Vec<Vec<usize>>,
}

impl Builder {
    fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == name)
    }

    fn declare(&mut self, name: &str, line: usize) -> Result<(), GraphError> {
        if name.is_empty() {
            return Err(GraphError::EmptyName);
        }
        if !valid_name(name) {
            return Err(GraphError::Malformed {
                line,
                text: name.to_string(),
            });
        }
        if self.find(name).is_some() {
            return Err(GraphError::DuplicateNode {
                line,
                name: name.to_string(),
            });
        }
        self.nodes.push(name.to_string());
        self.roles.push(Role::Observed);
        self.children.push(Vec::new());
        Ok(())
    }

    fn lookup(&self, name: &str, line: usize) -> Result<usize, GraphError> {
        self.find(name).ok_or_else(|| GraphError::UnknownEndpoint {
            line,
            name: name.to_string(),
        })
    }

    fn reaches(&self, from: usize, to: usize) -> bool {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![from];
        while let Some(u) = stack.pop() {
            if u == to {
                return true;
            }
            if std::mem::replace(&mut seen[u], true) {
                continue;
            }
            stack.extend(&self.children[u]);
        }
        false
    }

    fn edge(&mut self, from: &str, to: &str, line: usize) -> Result<(), GraphError> {
        let u = self.lookup(from, line)?;
        let v = self.lookup(to, line)?;
        if self.edges.contains(&(u, v)) {
            return Ok(());
        }
        if self.reaches(v, u) {
            return Err(GraphError::Cycle {
                line,
                from: from.to_string(),
                to: to.to_string(),
            });
        }
        self.edges.push((u, v));
        self.children[u].push(v);
        Ok(())
    }

    fn mark_latent(&mut self, name: &str, line: usize) -> Result<(), GraphError> {
        let i = self.lookup(name, line)?;
        self.roles[i] = Role::Latent;
        Ok(())
    }

    fn finish(self) -> DagGraph {
        DagGraph::from_indices(self.nodes, self.edges, self.roles)
    }
}

enum Stmt<'a> {
    Node(&'a str),
    Edge(&'a str, &'a str),
    Latent(Vec<&'a str>),
}

fn parse_stmt(s: &str, line: usize) -> Result<Stmt<'_>, GraphError> {
    let malformed = || GraphError::Malformed {
        line,
        text: s.to_string(),
    };
    if let Some((a, b)) = s.split_once("->") {
        let (a, b) = (a.trim(), b.trim());
        if !valid_name(a) || !valid_name(b) {
            return Err(malformed());
        }
        return Ok(Stmt::Edge(a, b));
    }
    if let Some(rest) = s.strip_prefix("latent") {
        if rest.starts_with(char::is_whitespace) {
            let names: Vec<&str> = rest.split(',').map(str::trim).collect();
            if names.iter().any(|n| !valid_name(n)) {
                return Err(malformed());
            }
            return Ok(Stmt::Latent(names));
        }
    }
    if valid_name(s) {
        Ok(Stmt::Node(s))
    } else {
        Err(malformed())
    }
}

/// Parses the graph file format. Node declarations may appear anywhere in
/// the file; edges and `latent` statements are resolved after all
/// declarations are known.
pub fn parse_graph(text: &str) -> Result<DagGraph, GraphError> {
    let mut stmts = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        for part in content.split(';') {
            let s = part.trim();
            if !s.is_empty() {
                stmts.push((line, parse_stmt(s, line)?));
            }
        }
    }
    let mut b = Builder::default();
    for (line, s) in &stmts {
        if let Stmt::Node(n) = s {
            b.declare(n, *line)?;
        }
    }
    for (line, s) in &stmts {
        match s {
            Stmt::Edge(u, v) => b.edge(u, v, *line)?,
            Stmt::Latent(names) => {
                for n in names {
                    b.mark_latent(n, *line)?;
                }
            }
            Stmt::Node(_) => {}
        }
    }
    Ok(b.finish())
}

/// Structure of the arithmetic-circuit network; `z*` latent when
/// `with_latents` is set.
pub fn arithmetic_circuit_graph(with_latents: bool) -> DagGraph {
    let text = "z0; z1; z2; z3; z4; z5; x0; x1
        z0 -> z2; z0 -> z3; z1 -> z2; z1 -> z3
        z3 -> x0; z3 -> z5; z4 -> z5; z5 -> x1";
    let g = parse_graph(text).expect("builtin graph");
    if with_latents {
        with_latent_prefix(g, "z")
    } else {
        g
    }
}

/// Structure of the tree network; `z*` latent when `with_latents` is set.
pub fn tree_graph(with_latents: bool) -> DagGraph {
    let text = "z0; z1; z2; z3; z4; z5; x0
        z0 -> z1; z0 -> z4; z1 -> z4
        z2 -> z3; z2 -> z5; z3 -> z5
        z4 -> x0; z5 -> x0";
    let g = parse_graph(text).expect("builtin graph");
    if with_latents {
        with_latent_prefix(g, "z")
    } else {
        g
    }
}

/// Protein signalling network over 11 observed variables.
pub fn protein_graph() -> DagGraph {
    let text = "raf; mek; plcg; pip2; pip3; erk; akt; pka; pkc; p38; jnk
        pkc -> pka; pkc -> jnk; pkc -> p38; pkc -> raf; pkc -> mek
        pka -> jnk; pka -> akt; pka -> p38; pka -> erk; pka -> mek; pka -> raf
        raf -> mek; mek -> erk; erk -> akt
        plcg -> pip2; plcg -> pip3; plcg -> pkc
        pip3 -> pip2; pip3 -> akt; pip2 -> pkc";
    parse_graph(text).expect("builtin graph")
}

fn with_latent_prefix(mut g: DagGraph, prefix: &str) -> DagGraph {
    for (i, n) in g.nodes.iter().enumerate() {
        if n.starts_with(prefix) {
            g.roles[i] = Role::Latent;
        }
    }
    g
}

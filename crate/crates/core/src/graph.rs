//! Directed weighted graphs with in-neighbor access, plus the builders used
//! by the datasets: k-nearest-neighbor spatial graphs and DAGs oriented
//! from a Delaunay triangulation.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node id {id} out of range for a graph with {num_nodes} nodes")]
    NodeOutOfRange { id: usize, num_nodes: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("edge {src}->{dst} has invalid weight {weight}")]
    BadWeight { src: usize, dst: usize, weight: f64 },
    #[error("duplicate edge {src}->{dst}")]
    DuplicateEdge { src: usize, dst: usize },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate point set ({0}); resample the positions")]
    Degenerate(&'static str),
    #[error("node order is not a permutation of 0..{0}")]
    BadOrder(usize),
    #[error("graph contains a cycle")]
    Cyclic,
    #[error("edge list line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// Immutable directed graph. `in_neighbors(n)` lists `(m, e_mn)` for every
/// edge `m -> n`, in edge-list order.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTopology {
    num_nodes: usize,
    edges: Vec<Edge>,
    parents: Vec<Vec<(usize, f64)>>,
}

impl GraphTopology {
    pub fn new(num_nodes: usize, edges: Vec<Edge>) -> Result<Self, GraphError> {
        let mut seen = BTreeSet::new();
        let mut parents = vec![Vec::new(); num_nodes];
        for e in &edges {
            for id in [e.src, e.dst] {
                if id >= num_nodes {
                    return Err(GraphError::NodeOutOfRange { id, num_nodes });
                }
            }
            if e.src == e.dst {
                return Err(GraphError::SelfLoop(e.src));
            }
            if !e.weight.is_finite() || e.weight < 0.0 {
                return Err(GraphError::BadWeight {
                    src: e.src,
                    dst: e.dst,
                    weight: e.weight,
                });
            }
            if !seen.insert((e.src, e.dst)) {
                return Err(GraphError::DuplicateEdge {
                    src: e.src,
                    dst: e.dst,
                });
            }
            parents[e.dst].push((e.src, e.weight));
        }
        Ok(Self {
            num_nodes,
            edges,
            parents,
        })
    }

    pub fn empty(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            edges: Vec::new(),
            parents: vec![Vec::new(); num_nodes],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn in_neighbors(&self, n: usize) -> Result<&[(usize, f64)], GraphError> {
        self.parents
            .get(n)
            .map(Vec::as_slice)
            .ok_or(GraphError::NodeOutOfRange {
                id: n,
                num_nodes: self.num_nodes,
            })
    }

    pub fn in_degree(&self, n: usize) -> usize {
        self.parents[n].len()
    }

    /// Same nodes, no edges.
    pub fn without_edges(&self) -> Self {
        Self::empty(self.num_nodes)
    }

    /// Adds the reverse of every edge that lacks one, with the same weight.
    pub fn symmetrized(&self) -> Self {
        let present: BTreeSet<(usize, usize)> = self.edges.iter().map(|e| (e.src, e.dst)).collect();
        let mut edges = self.edges.clone();
        for e in &self.edges {
            if !present.contains(&(e.dst, e.src)) {
                edges.push(Edge {
                    src: e.dst,
                    dst: e.src,
                    weight: e.weight,
                });
            }
        }
        Self::new(self.num_nodes, edges).expect("reversed edges keep invariants")
    }

    /// Relabels node `n` as `perm[n]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, GraphError> {
        check_permutation(perm, self.num_nodes)?;
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                src: perm[e.src],
                dst: perm[e.dst],
                weight: e.weight,
            })
            .collect();
        Self::new(self.num_nodes, edges)
    }

    /// Kahn ordering; fails on cycles. Ties resolved by smallest node id.
    pub fn topological_order(&self) -> Result<Vec<usize>, GraphError> {
        let mut indeg: Vec<usize> = (0..self.num_nodes).map(|n| self.parents[n].len()).collect();
        let mut children = vec![Vec::new(); self.num_nodes];
        for e in &self.edges {
            children[e.src].push(e.dst);
        }
        let mut ready: BTreeSet<usize> = (0..self.num_nodes).filter(|&n| indeg[n] == 0).collect();
        let mut order = Vec::with_capacity(self.num_nodes);
        while let Some(n) = ready.pop_first() {
            order.push(n);
            for &c in &children[n] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() == self.num_nodes {
            Ok(order)
        } else {
            Err(GraphError::Cyclic)
        }
    }

    /// Keeps the largest weakly connected component, reindexing nodes in
    /// increasing original order. Returns the kept original ids.
    ///
    /// Dropping "nodes not connected to the rest of the graph" can be read
    /// as weak or strong connectivity; weak is used here because road
    /// graphs are directed and many sensors only have one direction.
    pub fn largest_weak_component(&self) -> (Self, Vec<usize>) {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for e in &self.edges {
            adj[e.src].push(e.dst);
            adj[e.dst].push(e.src);
        }
        let mut comp = vec![usize::MAX; self.num_nodes];
        let mut sizes = Vec::new();
        for start in 0..self.num_nodes {
            if comp[start] != usize::MAX {
                continue;
            }
            let id = sizes.len();
            let mut size = 0;
            let mut queue = VecDeque::from([start]);
            comp[start] = id;
            while let Some(n) = queue.pop_front() {
                size += 1;
                for &m in &adj[n] {
                    if comp[m] == usize::MAX {
                        comp[m] = id;
                        queue.push_back(m);
                    }
                }
            }
            sizes.push(size);
        }
        let Some(best) = (0..sizes.len()).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))) else {
            return (self.clone(), Vec::new());
        };
        let kept: Vec<usize> = (0..self.num_nodes).filter(|&n| comp[n] == best).collect();
        let new_id: HashMap<usize, usize> = kept.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let edges = self
            .edges
            .iter()
            .filter(|e| comp[e.src] == best)
            .map(|e| Edge {
                src: new_id[&e.src],
                dst: new_id[&e.dst],
                weight: e.weight,
            })
            .collect();
        (
            Self::new(kept.len(), edges).expect("subgraph keeps invariants"),
            kept,
        )
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), GraphError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["src", "dst", "weight"])
            .map_err(csv_io)?;
        for e in &self.edges {
            w.write_record([e.src.to_string(), e.dst.to_string(), e.weight.to_string()])
                .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses an edge list with header `src,dst,weight`. The node count is
    /// supplied by the caller since isolated nodes do not appear in edges.
    pub fn read_csv<R: Read>(input: R, num_nodes: usize) -> Result<Self, GraphError> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers().map_err(|e| parse_err(1, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["src", "dst", "weight"] {
            return Err(GraphError::Parse {
                line: 1,
                message: format!("expected header src,dst,weight, got {:?}", headers),
            });
        }
        let mut edges = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| parse_err(line, e))?;
            if rec.len() != 3 {
                return Err(GraphError::Parse {
                    line,
                    message: format!("expected 3 fields, got {}", rec.len()),
                });
            }
            let src = rec[0].trim().parse().map_err(|e| parse_err(line, e))?;
            let dst = rec[1].trim().parse().map_err(|e| parse_err(line, e))?;
            let weight = rec[2].trim().parse().map_err(|e| parse_err(line, e))?;
            edges.push(Edge { src, dst, weight });
        }
        Self::new(num_nodes, edges).map_err(|e| match e {
            GraphError::Parse { .. } => e,
            other => GraphError::Parse {
                line: 0,
                message: other.to_string(),
            },
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), GraphError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: &Path, num_nodes: usize) -> Result<Self, GraphError> {
        Self::read_csv(std::fs::File::open(path)?, num_nodes)
    }

    /// SHA-256 over the node count and canonical edge-list text.
    pub fn checksum(&self) -> String {
        let mut buf = format!("{}\n", self.num_nodes).into_bytes();
        self.write_csv(&mut buf).expect("writing to memory");
        hex::encode(Sha256::digest(&buf))
    }
}

fn csv_io(e: csv::Error) -> GraphError {
    GraphError::Io(std::io::Error::other(e))
}

fn parse_err(line: usize, e: impl std::fmt::Display) -> GraphError {
    GraphError::Parse {
        line,
        message: e.to_string(),
    }
}

fn check_permutation(perm: &[usize], n: usize) -> Result<(), GraphError> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(GraphError::BadOrder(n));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(GraphError::BadOrder(n));
        }
    }
    Ok(())
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Equirectangular projection of `(latitude, longitude)` pairs in degrees,
/// centered on the mean latitude, unit radius.
pub fn equirectangular(lat_lon: &[(f64, f64)]) -> Vec<[f64; 2]> {
    if lat_lon.is_empty() {
        return Vec::new();
    }
    let lat0 = lat_lon.iter().map(|p| p.0).sum::<f64>() / lat_lon.len() as f64;
    let cos0 = lat0.to_radians().cos();
    lat_lon
        .iter()
        .map(|&(lat, lon)| [lon.to_radians() * cos0, lat.to_radians()])
        .collect()
}

/// Connects every node to its `k` nearest neighbors (edges point into the
/// node) and weights each edge by `exp(-(d / (4 sigma))^2)`, where sigma is
/// the standard deviation of all edge distances. Equal-distance candidates
/// are taken in increasing node order.
pub fn build_knn_graph(positions: &[[f64; 2]], k: usize) -> Result<GraphTopology, GraphError> {
    let n = positions.len();
    if n < k + 1 {
        return Err(GraphError::TooFewPoints {
            needed: k + 1,
            got: n,
        });
    }
    let mut raw = Vec::with_capacity(n * k);
    for target in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&m| m != target)
            .map(|m| (distance(positions[m], positions[target]), m))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        raw.extend(cand.into_iter().take(k).map(|(d, m)| (m, target, d)));
    }
    let sigma = std_dev(raw.iter().map(|e| e.2));
    let edges = raw
        .into_iter()
        .map(|(src, dst, d)| Edge {
            src,
            dst,
            weight: distance_weight(d, sigma),
        })
        .collect();
    GraphTopology::new(n, edges)
}

/// `exp(-(d / (4 sigma))^2)`, defined as 1 when all distances coincide.
pub fn distance_weight(d: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        1.0
    } else {
        (-(d / (4.0 * sigma)).powi(2)).exp()
    }
}

fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    var.sqrt()
}

/// Positive when `a, b, c` turn counter-clockwise.
pub fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Positive when `d` lies strictly inside the circumcircle of the
/// counter-clockwise triangle `a, b, c`.
pub fn in_circle(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> f64 {
    let (adx, ady) = (a[0] - d[0], a[1] - d[1]);
    let (bdx, bdy) = (b[0] - d[0], b[1] - d[1]);
    let (cdx, cdy) = (c[0] - d[0], c[1] - d[1]);
    let ad = adx * adx + ady * ady;
    let bd = bdx * bdx + bdy * bdy;
    let cd = cdx * cdx + cdy * cdy;
    adx * (bdy * cd - bd * cdy) - ady * (bdx * cd - bd * cdx) + ad * (bdx * cdy - bdy * cdx)
}

/// Bowyer-Watson triangulation. Returns counter-clockwise index triples.
pub fn delaunay_triangles(points: &[[f64; 2]]) -> Result<Vec<[usize; 3]>, GraphError> {
    let n = points.len();
    if n < 3 {
        return Err(GraphError::TooFewPoints { needed: 3, got: n });
    }
    let unique: BTreeSet<(u64, u64)> = points
        .iter()
        .map(|p| (p[0].to_bits(), p[1].to_bits()))
        .collect();
    if unique.len() != n {
        return Err(GraphError::Degenerate("duplicate points"));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let extent = span.max(f64::MIN_POSITIVE);
    let scale = 1e-10 * extent * extent;
    if points
        .iter()
        .all(|&p| orient(points[0], points[1], p).abs() <= scale)
    {
        return Err(GraphError::Degenerate("all points collinear"));
    }

    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let big = 1e5 * extent;
    let mut all = points.to_vec();
    all.push([center[0] - big, center[1] - big]);
    all.push([center[0] + big, center[1] - big]);
    all.push([center[0], center[1] + big]);

    let mut tris: Vec<[usize; 3]> = vec![[n, n + 1, n + 2]];
    for (pi, &p) in points.iter().enumerate() {
        let (bad, keep): (Vec<[usize; 3]>, Vec<[usize; 3]>) = tris
            .into_iter()
            .partition(|t| in_circle(all[t[0]], all[t[1]], all[t[2]], p) > 0.0);
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &bad {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *edge_count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        tris = keep;
        for t in &bad {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                if edge_count[&(a.min(b), a.max(b))] == 1 {
                    // (a, b) keeps the orientation it had in a CCW triangle
                    // whose interior contained p, so (a, b, p) is CCW too.
                    tris.push([a, b, pi]);
                }
            }
        }
    }
    tris.retain(|t| t.iter().all(|&v| v < n));
    if tris.is_empty() {
        return Err(GraphError::Degenerate("no triangles"));
    }
    Ok(tris)
}

/// Undirected edges `(i, j)` with `i < j` of a triangulation.
pub fn triangle_edges(tris: &[[usize; 3]]) -> BTreeSet<(usize, usize)> {
    tris.iter()
        .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect()
}

/// Delaunay edges oriented from earlier to later node in `order`
/// (`order[k]` is the k-th node). All weights are 1.
pub fn build_delaunay_dag(
    positions: &[[f64; 2]],
    order: &[usize],
) -> Result<GraphTopology, GraphError> {
    check_permutation(order, positions.len())?;
    let mut rank = vec![0; positions.len()];
    for (k, &node) in order.iter().enumerate() {
        rank[node] = k;
    }
    let tris = delaunay_triangles(positions)?;
    let edges = triangle_edges(&tris)
        .into_iter()
        .map(|(a, b)| {
            let (src, dst) = if rank[a] < rank[b] { (a, b) } else { (b, a) };
            Edge {
                src,
                dst,
                weight: 1.0,
            }
        })
        .collect();
    GraphTopology::new(positions.len(), edges)
}

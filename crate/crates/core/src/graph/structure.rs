use super::Graph;
use crate::error::{Error, Result};

/// Distance stored for pairs with no connecting path.
pub const UNREACHABLE: i32 = -1;

/// Distance code stored between the virtual node and any real node.
/// Distinct from every real distance and from [`UNREACHABLE`], so the
/// spatial bias table can give it its own learnable scalar.
pub const VNODE_CODE: i32 = -2;

/// Dense row-major `n x n` shortest-path-distance matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpdMatrix {
    n: usize,
    data: Vec<i32>,
}

impl SpdMatrix {
    pub fn from_raw(n: usize, data: Vec<i32>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::InvalidGraph(format!("spd buffer of {} for n = {n}", data.len())));
        }
        Ok(Self { n, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> i32 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[i32] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[i32] {
        &self.data
    }
}

/// One canonical shortest path (as edge indices) per ordered node pair,
/// stored in CSR layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathEdges {
    n: usize,
    offsets: Vec<u32>,
    edges: Vec<u32>,
}

impl PathEdges {
    pub fn from_raw(n: usize, offsets: Vec<u32>, edges: Vec<u32>) -> Result<Self> {
        let ok = offsets.len() == n * n + 1
            && offsets.first() == Some(&0)
            && offsets.windows(2).all(|w| w[0] <= w[1])
            && offsets.last().map(|&o| o as usize) == Some(edges.len());
        if !ok {
            return Err(Error::InvalidGraph("malformed path-edge offsets".into()));
        }
        Ok(Self { n, offsets, edges })
    }

    pub fn get(&self, i: usize, j: usize) -> &[u32] {
        let k = i * self.n + j;
        &self.edges[self.offsets[k] as usize..self.offsets[k + 1] as usize]
    }

    pub fn offsets(&self) -> &[u32] {
        &self.offsets
    }

    pub fn edges(&self) -> &[u32] {
        &self.edges
    }
}

/// Per-graph structural precomputation consumed by the encodings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuralFeatures {
    pub spd: SpdMatrix,
    pub path_edges: PathEdges,
    pub indeg: Vec<usize>,
    pub outdeg: Vec<usize>,
    /// When set, the last node is the virtual node.
    pub has_vnode: bool,
    pub max_path_len: usize,
}

impl StructuralFeatures {
    pub fn compute(g: &Graph, max_path_len: usize) -> Self {
        let (indeg, outdeg) = compute_degrees(g);
        let (spd, path_edges) = bfs_all(g, max_path_len.max(1));
        Self { spd, path_edges, indeg, outdeg, has_vnode: false, max_path_len: max_path_len.max(1) }
    }

    pub fn num_nodes(&self) -> usize {
        self.spd.len()
    }

    pub fn is_vnode(&self, v: usize) -> bool {
        self.has_vnode && v + 1 == self.num_nodes()
    }
}

/// In- and out-degree of every node. Undirected graphs report the plain
/// degree in both vectors.
pub fn compute_degrees(g: &Graph) -> (Vec<usize>, Vec<usize>) {
    let n = g.num_nodes();
    let mut indeg = vec![0; n];
    let mut outdeg = vec![0; n];
    for &(s, d) in g.edges() {
        outdeg[s] += 1;
        indeg[d] += 1;
        if !g.is_directed() {
            outdeg[d] += 1;
            indeg[s] += 1;
        }
    }
    (indeg, outdeg)
}

/// All-pairs BFS distances; [`UNREACHABLE`] where no path exists.
pub fn shortest_path_distances(g: &Graph) -> SpdMatrix {
    bfs_all(g, 1).0
}

/// Canonical shortest path per ordered pair, truncated to `max_len` edges.
pub fn shortest_path_edges(g: &Graph, max_len: usize) -> PathEdges {
    bfs_all(g, max_len.max(1)).1
}

// Layer-synchronous BFS. Each frontier is expanded in ascending node order
// and neighbors are visited in ascending order, so the first discoverer of a
// node is its lowest-index predecessor on the previous layer.
fn bfs_all(g: &Graph, max_len: usize) -> (SpdMatrix, PathEdges) {
    let n = g.num_nodes();
    let adj = g.adjacency();
    let mut spd = vec![UNREACHABLE; n * n];
    let mut offsets = Vec::with_capacity(n * n + 1);
    offsets.push(0u32);
    let mut path_data = Vec::new();

    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut dist = vec![UNREACHABLE; n];
    let mut frontier = Vec::new();
    let mut next = Vec::new();
    let mut scratch = Vec::new();

    for src in 0..n {
        dist.fill(UNREACHABLE);
        parent.fill(None);
        dist[src] = 0;
        frontier.clear();
        frontier.push(src);
        let mut depth = 0;
        while !frontier.is_empty() {
            depth += 1;
            next.clear();
            for &u in &frontier {
                for &(v, e) in &adj[u] {
                    if dist[v] == UNREACHABLE {
                        dist[v] = depth;
                        parent[v] = Some((u, e));
                        next.push(v);
                    }
                }
            }
            next.sort_unstable();
            std::mem::swap(&mut frontier, &mut next);
        }
        spd[src * n..(src + 1) * n].copy_from_slice(&dist);

        for dst in 0..n {
            if dst != src && dist[dst] != UNREACHABLE {
                scratch.clear();
                let mut cur = dst;
                while let Some((p, e)) = parent[cur] {
                    scratch.push(e as u32);
                    cur = p;
                }
                scratch.reverse();
                path_data.extend(scratch.iter().take(max_len));
            }
            offsets.push(path_data.len() as u32);
        }
    }
    (
        SpdMatrix { n, data: spd },
        PathEdges { n, offsets, edges: path_data },
    )
}

/// Append the virtual node as node `n`. It gets no physical edges, an empty
/// feature list, [`VNODE_CODE`] distances to every other node and empty
/// paths. Its degree entries are zero; the centrality encoding routes it to
/// a reserved row via `has_vnode`.
pub fn attach_virtual_node(g: &Graph, sf: &StructuralFeatures) -> Result<(Graph, StructuralFeatures)> {
    if sf.has_vnode {
        return Err(Error::VirtualNodeAttached);
    }
    let n = g.num_nodes();
    if sf.num_nodes() != n {
        return Err(Error::InvalidGraph("structural features belong to another graph".into()));
    }
    let mut node_feats = g.node_feats().to_vec();
    node_feats.push(Vec::new());
    let mut aug = Graph::with_features(
        n + 1,
        g.is_directed(),
        g.edges().to_vec(),
        node_feats,
        g.edge_feats().to_vec(),
    )?;
    aug.target = g.target;

    let m = n + 1;
    let mut spd = vec![VNODE_CODE; m * m];
    for i in 0..n {
        spd[i * m..i * m + n].copy_from_slice(sf.spd.row(i));
    }
    spd[n * m + n] = 0;

    let mut offsets = Vec::with_capacity(m * m + 1);
    offsets.push(0u32);
    let mut edges = Vec::with_capacity(sf.path_edges.edges.len());
    for i in 0..m {
        for j in 0..m {
            if i < n && j < n {
                edges.extend_from_slice(sf.path_edges.get(i, j));
            }
            offsets.push(edges.len() as u32);
        }
    }

    let mut indeg = sf.indeg.clone();
    indeg.push(0);
    let mut outdeg = sf.outdeg.clone();
    outdeg.push(0);

    Ok((
        aug,
        StructuralFeatures {
            spd: SpdMatrix { n: m, data: spd },
            path_edges: PathEdges { n: m, offsets, edges },
            indeg,
            outdeg,
            has_vnode: true,
            max_path_len: sf.max_path_len,
        },
    ))
}

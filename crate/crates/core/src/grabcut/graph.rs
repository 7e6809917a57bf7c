//! 8-connected grid graph and an exact s-t minimum cut.

use std::collections::VecDeque;

use crate::mask::BinaryMask;

/// Forward neighbour offsets; each undirected pair is stored once, on the
/// pixel that comes first in row-major order.
pub const FORWARD_OFFSETS: [(i32, i32); 4] = [(1, 0), (0, 1), (1, 1), (-1, 1)];

/// Pixel graph with terminal links and symmetric neighbour links.
///
/// `source[p]` is paid when `p` ends on the sink (background) side and
/// `sink[p]` when it ends on the source (foreground) side.
#[derive(Debug, Clone)]
pub struct GridGraph {
    width: u32,
    height: u32,
    pub source: Vec<f64>,
    pub sink: Vec<f64>,
    /// Capacities towards the neighbours in [`FORWARD_OFFSETS`] order.
    pub neighbors: Vec<[f64; 4]>,
}

#[derive(Debug, Clone)]
pub struct Cut {
    /// Source-side (foreground) pixels.
    pub foreground: BinaryMask,
    pub value: f64,
    pub max_flow: f64,
}

impl GridGraph {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        GridGraph {
            width,
            height,
            source: vec![0.0; n],
            sink: vec![0.0; n],
            neighbors: vec![[0.0; 4]; n],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Index of the neighbour of `idx` in direction `dir`, if inside the grid.
    #[inline]
    pub fn neighbor(&self, idx: usize, dir: usize) -> Option<usize> {
        let (w, h) = (self.width as i64, self.height as i64);
        let (x, y) = (idx as i64 % w, idx as i64 / w);
        let (dx, dy) = FORWARD_OFFSETS[dir];
        let (nx, ny) = (x + dx as i64, y + dy as i64);
        (nx >= 0 && nx < w && ny < h).then(|| (ny * w + nx) as usize)
    }

    /// Cost of a labeling (true = foreground / source side).
    pub fn cut_value(&self, fg: &[bool]) -> f64 {
        let mut total = 0.0;
        for p in 0..self.len() {
            total += if fg[p] { self.sink[p] } else { self.source[p] };
            for dir in 0..4 {
                if let Some(q) = self.neighbor(p, dir) {
                    if fg[p] != fg[q] {
                        total += self.neighbors[p][dir];
                    }
                }
            }
        }
        total
    }

    fn validate(&self) {
        let ok = |c: &f64| c.is_finite() && *c >= 0.0;
        assert!(
            self.source.iter().all(ok)
                && self.sink.iter().all(ok)
                && self.neighbors.iter().flatten().all(ok),
            "grid graph capacities must be finite and non-negative"
        );
    }

    /// Exact minimum s-t cut via Dinic's blocking-flow algorithm.
    pub fn min_cut(&self) -> Cut {
        self.validate();
        let mut net = FlowNetwork::from_grid(self);
        let max_flow = net.max_flow();
        let side = net.source_side();
        let fg: Vec<bool> = side[..self.len()].to_vec();
        let value = self.cut_value(&fg);
        Cut {
            foreground: BinaryMask::from_bits(self.width, self.height, fg)
                .expect("grid dims are positive"),
            value,
            max_flow,
        }
    }
}

struct FlowNetwork {
    head: Vec<usize>,
    // arcs stored in pairs: arc ^ 1 is the reverse arc
    to: Vec<u32>,
    cap: Vec<f64>,
    next: Vec<usize>,
    s: usize,
    t: usize,
    eps: f64,
    flow: f64,
}

const NIL: usize = usize::MAX;

impl FlowNetwork {
    fn from_grid(g: &GridGraph) -> Self {
        let n = g.len();
        let mut net = FlowNetwork {
            head: vec![NIL; n + 2],
            to: Vec::with_capacity(n * 12),
            cap: Vec::with_capacity(n * 12),
            next: Vec::with_capacity(n * 12),
            s: n,
            t: n + 1,
            eps: 0.0,
            flow: 0.0,
        };
        let mut max_cap = 0.0f64;
        for p in 0..n {
            // route the shared part of the two terminal links directly
            let common = g.source[p].min(g.sink[p]);
            net.flow += common;
            let (cs, ct) = (g.source[p] - common, g.sink[p] - common);
            if cs > 0.0 {
                net.add_arc(net.s, p, cs, 0.0);
            }
            if ct > 0.0 {
                net.add_arc(p, net.t, ct, 0.0);
            }
            max_cap = max_cap.max(g.source[p]).max(g.sink[p]);
            for dir in 0..4 {
                let c = g.neighbors[p][dir];
                if c > 0.0 {
                    if let Some(q) = g.neighbor(p, dir) {
                        net.add_arc(p, q, c, c);
                        max_cap = max_cap.max(c);
                    }
                }
            }
        }
        net.eps = max_cap * 1e-12;
        net
    }

    fn add_arc(&mut self, u: usize, v: usize, cap: f64, rev_cap: f64) {
        for (a, b, c) in [(u, v, cap), (v, u, rev_cap)] {
            self.to.push(b as u32);
            self.cap.push(c);
            self.next.push(self.head[a]);
            self.head[a] = self.to.len() - 1;
        }
    }

    fn bfs(&self, level: &mut [i32]) -> bool {
        level.fill(-1);
        level[self.s] = 0;
        let mut queue = VecDeque::from([self.s]);
        while let Some(u) = queue.pop_front() {
            let mut e = self.head[u];
            while e != NIL {
                let v = self.to[e] as usize;
                if level[v] < 0 && self.cap[e] > self.eps {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
                e = self.next[e];
            }
        }
        level[self.t] >= 0
    }

    fn max_flow(&mut self) -> f64 {
        let n = self.head.len();
        let mut level = vec![-1i32; n];
        let mut current = vec![NIL; n];
        let mut path: Vec<usize> = Vec::new();
        let mut nodes: Vec<usize> = Vec::new();
        while self.bfs(&mut level) {
            current.copy_from_slice(&self.head);
            path.clear();
            nodes.clear();
            let mut u = self.s;
            loop {
                if u == self.t {
                    let bottleneck = path
                        .iter()
                        .map(|&e| self.cap[e])
                        .fold(f64::INFINITY, f64::min);
                    for &e in &path {
                        self.cap[e] -= bottleneck;
                        self.cap[e ^ 1] += bottleneck;
                    }
                    self.flow += bottleneck;
                    // retreat to the tail of the first saturated arc
                    let k = path
                        .iter()
                        .position(|&e| self.cap[e] <= self.eps)
                        .unwrap_or(0);
                    path.truncate(k);
                    nodes.truncate(k);
                    u = if k == 0 { self.s } else { self.to[path[k - 1]] as usize };
                    continue;
                }
                let mut e = current[u];
                while e != NIL {
                    let v = self.to[e] as usize;
                    if self.cap[e] > self.eps && level[v] == level[u] + 1 {
                        break;
                    }
                    e = self.next[e];
                }
                current[u] = e;
                if e != NIL {
                    path.push(e);
                    nodes.push(u);
                    u = self.to[e] as usize;
                } else {
                    level[u] = -1;
                    match (path.pop(), nodes.pop()) {
                        (Some(e), Some(tail)) => {
                            current[tail] = self.next[e];
                            u = tail;
                        }
                        _ => break,
                    }
                }
            }
        }
        self.flow
    }

    /// Nodes reachable from the source in the residual graph.
    fn source_side(&self) -> Vec<bool> {
        let mut seen = vec![false; self.head.len()];
        seen[self.s] = true;
        let mut stack = vec![self.s];
        while let Some(u) = stack.pop() {
            let mut e = self.head[u];
            while e != NIL {
                let v = self.to[e] as usize;
                if !seen[v] && self.cap[e] > self.eps {
                    seen[v] = true;
                    stack.push(v);
                }
                e = self.next[e];
            }
        }
        seen
    }
}

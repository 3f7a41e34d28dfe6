//! Spatial propagation over the learned structure.
//!
//! Node features are `[B, N, F]`. The hypergraph path mixes nodes with `Θ`;
//! the GSL path builds a top-K adjacency from cosine similarity of node
//! embeddings and applies symmetric-normalized GCN propagation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Floor on embedding norms before the cosine division.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GslConfig {
    pub embed_dim: usize,
    /// Neighbors per node; `None` means `min(3, N − 1)`.
    pub top_k: Option<usize>,
}

impl Default for GslConfig {
    fn default() -> Self {
        GslConfig {
            embed_dim: 16,
            top_k: None,
        }
    }
}

impl GslConfig {
    pub fn k_for(&self, n: usize) -> usize {
        self.top_k.unwrap_or(3.min(n.saturating_sub(1)).max(1))
    }
}

/// `X·W` applied to the last axis of `x: [B, N, F]`.
fn feature_transform(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, f) = match s[..] {
        [b, n, f] => (b, n, f),
        _ => return Err(Error::dim("graph conv", format!("features {s:?} are not [B, N, F]"))),
    };
    let ws = g.shape(w).to_vec();
    if ws.len() != 2 || ws[0] != f {
        return Err(Error::dim("graph conv", format!("weight {ws:?} for {f} features")));
    }
    let flat = g.reshape(x, &[b * n, f])?;
    let y = g.matmul(flat, w)?;
    g.reshape(y, &[b, n, ws[1]])
}

/// `ReLU(Θ · X · W)` with `Θ = I − L`.
pub fn hypergraph_conv(g: &mut Graph, x: Var, theta: Var, w: Var) -> Result<Var> {
    let mixed = g.node_mix(theta, x)?;
    let y = feature_transform(g, mixed, w)?;
    g.relu(y)
}

/// Cosine similarity of embedding rows.
pub fn residual_correlation(g: &mut Graph, e: Var) -> Result<Var> {
    let sq = g.mul(e, e)?;
    let norm2 = g.sum_axis(sq, 1)?;
    let norm2 = g.clamp_min(norm2, NORM_EPS * NORM_EPS)?;
    let inv = g.powf(norm2, -0.5)?;
    let unit = g.scale_rows(e, inv)?;
    let ut = g.transpose(unit)?;
    g.matmul(unit, ut)
}

/// Per node, the `k` largest off-diagonal entries of `c`; ties go to the
/// lower index. Neighbor lists are sorted by index.
pub fn topk_select(c: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = match c.shape() {
        [a, b] if a == b => *a,
        s => return Err(Error::dim("topk_select", format!("{s:?} is not square"))),
    };
    if k == 0 || k + 1 > n {
        return Err(Error::Parameter(format!("top-K needs 1 <= K <= N-1, got K={k}, N={n}")));
    }
    Ok((0..n)
        .map(|i| {
            let mut idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            idx.sort_by(|&a, &b| c.at(i, b).total_cmp(&c.at(i, a)).then(a.cmp(&b)));
            let mut keep = idx[..k].to_vec();
            keep.sort_unstable();
            keep
        })
        .collect())
}

/// 0/1 matrix with ones on the selected pairs.
pub fn selection_mask(neighbors: &[Vec<usize>]) -> Tensor {
    let n = neighbors.len();
    let mut m = Tensor::zeros(&[n, n]);
    for (i, row) in neighbors.iter().enumerate() {
        for &j in row {
            m.data_mut()[i * n + j] = 1.0;
        }
    }
    m
}

/// `A = ReLU(C) ⊙ mask + I`
pub fn build_adjacency(g: &mut Graph, c: Var, neighbors: &[Vec<usize>]) -> Result<Var> {
    let n = neighbors.len();
    if g.shape(c) != [n, n] {
        return Err(Error::dim("build_adjacency", format!("{:?} for {n} nodes", g.shape(c))));
    }
    if neighbors.iter().any(|r| r.is_empty()) {
        return Err(Error::Parameter("every node needs at least one neighbor".into()));
    }
    let mask = g.constant(selection_mask(neighbors));
    let pos = g.relu(c)?;
    let a = g.mul(pos, mask)?;
    let eye = g.constant(Tensor::eye(n));
    g.add(a, eye)
}

/// Binary adjacency with self-loops.
pub fn binary_adjacency(neighbors: &[Vec<usize>]) -> Tensor {
    let n = neighbors.len();
    let mut m = selection_mask(neighbors);
    for i in 0..n {
        m.data_mut()[i * n + i] = 1.0;
    }
    m
}

/// `D^{-1/2} A D^{-1/2}` with `D` the row sums of `A`.
pub fn normalize_adjacency(g: &mut Graph, a: Var) -> Result<Var> {
    let d = g.sum_axis(a, 1)?;
    if g.value(d).data().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Parameter("adjacency rows must have positive degree".into()));
    }
    let d = g.powf(d, -0.5)?;
    let r = g.scale_rows(a, d)?;
    g.scale_cols(r, d)
}

/// `ReLU(D^{-1/2} A D^{-1/2} · X · W)`
pub fn gcn_propagate(g: &mut Graph, x: Var, a: Var, w: Var) -> Result<Var> {
    let norm = normalize_adjacency(g, a)?;
    let mixed = g.node_mix(norm, x)?;
    let y = feature_transform(g, mixed, w)?;
    g.relu(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor, op: Tensor, w: Tensor, gcn: bool) -> Tensor {
        let mut g = Graph::new();
        let (x, op, w) = (g.constant(x), g.constant(op), g.constant(w));
        let y = if gcn {
            gcn_propagate(&mut g, x, op, w).unwrap()
        } else {
            hypergraph_conv(&mut g, x, op, w).unwrap()
        };
        g.value(y).clone()
    }

    #[test]
    fn hypergraph_conv_examples() {
        let x = Tensor::new(vec![1, 3, 2], vec![0.5, 1.0, 2.0, 0.0, 0.1, 3.0]).unwrap();
        assert_eq!(run(x.clone(), Tensor::eye(3), Tensor::eye(2), false), x);
        let theta = Tensor::matrix(&[&[0.75, 0.25], &[0.25, 0.75]]);
        let x = Tensor::new(vec![1, 2, 1], vec![1.0, 0.0]).unwrap();
        let y = run(x, theta.clone(), Tensor::matrix(&[&[1.0]]), false);
        assert_eq!(y.data(), &[0.75, 0.25]);
        let y = run(Tensor::zeros(&[1, 2, 1]), theta, Tensor::matrix(&[&[1.0]]), false);
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[2.0, 0.0], &[0.0, 3.0], &[-1.0, 0.0]]));
        let c = residual_correlation(&mut g, e).unwrap();
        let c = g.value(c);
        assert!((c.at(0, 1) - 1.0).abs() < 1e-15);
        assert!(c.at(0, 2).abs() < 1e-15);
        assert!((c.at(0, 3) + 1.0).abs() < 1e-15);
        for i in 0..4 {
            assert!((c.at(i, i) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn topk_examples() {
        let c = Tensor::matrix(&[
            &[1.0, 0.9, 0.1, 0.5],
            &[0.9, 1.0, 0.0, 0.0],
            &[0.1, 0.0, 1.0, 0.0],
            &[0.5, 0.0, 0.0, 1.0],
        ]);
        let nb = topk_select(&c, 2).unwrap();
        assert_eq!(nb[0], vec![1, 3]);
        // row 2: 0.1 at index 0, then a tie of zeros resolved to index 1
        assert_eq!(nb[2], vec![0, 1]);
        let all = topk_select(&c, 3).unwrap();
        assert_eq!(all[1], vec![0, 2, 3]);
        let flat = Tensor::full(&[3, 3], 0.2);
        assert_eq!(topk_select(&flat, 1).unwrap(), vec![vec![1], vec![0], vec![0]]);
        assert!(matches!(topk_select(&c, 0), Err(Error::Parameter(_))));
        assert!(matches!(topk_select(&c, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn adjacency_examples() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::matrix(&[&[1.0, -0.5], &[-0.5, 1.0]]));
        let a = build_adjacency(&mut g, c, &[vec![1], vec![0]]).unwrap();
        assert_eq!(g.value(a), &Tensor::eye(2));
        assert!(build_adjacency(&mut g, c, &[vec![], vec![0]]).is_err());
        let c = g.constant(Tensor::matrix(&[&[1.0, 0.4], &[0.4, 1.0]]));
        let a = build_adjacency(&mut g, c, &[vec![1], vec![0]]).unwrap();
        assert_eq!(g.value(a), &Tensor::matrix(&[&[1.0, 0.4], &[0.4, 1.0]]));
    }

    #[test]
    fn gcn_examples() {
        let x = Tensor::new(vec![1, 2, 1], vec![0.3, 2.0]).unwrap();
        assert_eq!(run(x, Tensor::eye(2), Tensor::matrix(&[&[1.0]]), true).data(), &[0.3, 2.0]);
        let complete = Tensor::ones(&[2, 2]);
        let x = Tensor::full(&[1, 2, 1], 0.7);
        let y = run(x, complete, Tensor::matrix(&[&[1.0]]), true);
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        let y = run(Tensor::zeros(&[1, 2, 1]), Tensor::ones(&[2, 2]), Tensor::matrix(&[&[1.0]]), true);
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn binary_adjacency_has_loops() {
        let a = binary_adjacency(&[vec![1], vec![2], vec![0]]);
        assert_eq!(a, Tensor::matrix(&[&[1.0, 1.0, 0.0], &[0.0, 1.0, 1.0], &[1.0, 0.0, 1.0]]));
    }
}

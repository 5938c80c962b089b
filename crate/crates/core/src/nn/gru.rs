//! Gated recurrent unit.
//!
//! Gate equations:
//!
//! ```text
//! R_t = sigma(X_t.w_xr + H_{t-1}.w_hr + b_r)
//! U_t = sigma(X_t.w_xz + H_{t-1}.w_hz + b_z)
//! C_t = tanh(X_t.w_xh + (R_t (.) H_{t-1}).w_hh + b_h)
//! H_t = U_t (.) H_{t-1} + (1 - U_t) (.) C_t
//! ```
//!
//! The update gate multiplies the *old* state; this blending convention is
//! part of the module contract and is pinned by the zero-weight closed form
//! `h_t = 0.5 * h_prev` in tests.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Weights and biases of one GRU cell.
#[derive(Clone, Debug)]
pub struct GruParams<S> {
    pub w_xr: Tensor<S>,
    pub w_hr: Tensor<S>,
    pub b_r: Tensor<S>,
    pub w_xz: Tensor<S>,
    pub w_hz: Tensor<S>,
    pub b_z: Tensor<S>,
    pub w_xh: Tensor<S>,
    pub w_hh: Tensor<S>,
    pub b_h: Tensor<S>,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl<S: Scalar> GruParams<S> {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        GruParams {
            w_xr: Tensor::zeros(&[input_dim, hidden_dim]),
            w_hr: Tensor::zeros(&[hidden_dim, hidden_dim]),
            b_r: Tensor::zeros(&[hidden_dim]),
            w_xz: Tensor::zeros(&[input_dim, hidden_dim]),
            w_hz: Tensor::zeros(&[hidden_dim, hidden_dim]),
            b_z: Tensor::zeros(&[hidden_dim]),
            w_xh: Tensor::zeros(&[input_dim, hidden_dim]),
            w_hh: Tensor::zeros(&[hidden_dim, hidden_dim]),
            b_h: Tensor::zeros(&[hidden_dim]),
            input_dim,
            hidden_dim,
        }
    }

    fn check(&self) -> Result<()> {
        let d = self.input_dim;
        let u = self.hidden_dim;
        let ok = self.w_xr.shape() == [d, u]
            && self.w_hr.shape() == [u, u]
            && self.b_r.shape() == [u]
            && self.w_xz.shape() == [d, u]
            && self.w_hz.shape() == [u, u]
            && self.b_z.shape() == [u]
            && self.w_xh.shape() == [d, u]
            && self.w_hh.shape() == [u, u]
            && self.b_h.shape() == [u];
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "GRU parameter shapes inconsistent with input_dim={}, hidden_dim={}",
                d, u
            )))
        }
    }
}

/// Node handles for GRU parameters already registered on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GruNodes {
    pub w_xr: NodeId,
    pub w_hr: NodeId,
    pub b_r: NodeId,
    pub w_xz: NodeId,
    pub w_hz: NodeId,
    pub b_z: NodeId,
    pub w_xh: NodeId,
    pub w_hh: NodeId,
    pub b_h: NodeId,
}

/// Register GRU parameters on a graph under `prefix.*` names.
pub fn register_gru<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &str,
    p: &GruParams<S>,
) -> Result<GruNodes> {
    p.check()?;
    Ok(GruNodes {
        w_xr: g.param(&format!("{prefix}.w_xr"), p.w_xr.clone()),
        w_hr: g.param(&format!("{prefix}.w_hr"), p.w_hr.clone()),
        b_r: g.param(&format!("{prefix}.b_r"), p.b_r.clone()),
        w_xz: g.param(&format!("{prefix}.w_xz"), p.w_xz.clone()),
        w_hz: g.param(&format!("{prefix}.w_hz"), p.w_hz.clone()),
        b_z: g.param(&format!("{prefix}.b_z"), p.b_z.clone()),
        w_xh: g.param(&format!("{prefix}.w_xh"), p.w_xh.clone()),
        w_hh: g.param(&format!("{prefix}.w_hh"), p.w_hh.clone()),
        b_h: g.param(&format!("{prefix}.b_h"), p.b_h.clone()),
    })
}

/// One GRU step on the graph: `x_t [N,D]`, `h_prev [N,U]` -> `h_t [N,U]`.
pub fn gru_cell_node<S: Scalar>(
    g: &mut Graph<S>,
    x_t: NodeId,
    h_prev: NodeId,
    p: &GruNodes,
) -> Result<NodeId> {
    let xr = g.matmul(x_t, p.w_xr)?;
    let hr = g.matmul(h_prev, p.w_hr)?;
    let r_pre = g.add(xr, hr)?;
    let r_pre = g.add_bias(r_pre, p.b_r)?;
    let r = g.sigmoid(r_pre);

    let xz = g.matmul(x_t, p.w_xz)?;
    let hz = g.matmul(h_prev, p.w_hz)?;
    let z_pre = g.add(xz, hz)?;
    let z_pre = g.add_bias(z_pre, p.b_z)?;
    let u = g.sigmoid(z_pre);

    let rh = g.mul(r, h_prev)?;
    let xh = g.matmul(x_t, p.w_xh)?;
    let hh = g.matmul(rh, p.w_hh)?;
    let c_pre = g.add(xh, hh)?;
    let c_pre = g.add_bias(c_pre, p.b_h)?;
    let c = g.tanh_op(c_pre);

    let keep = g.mul(u, h_prev)?;
    let gate_inv = g.one_minus(u);
    let update = g.mul(gate_inv, c)?;
    g.add(keep, update)
}

/// Left fold of the cell over `xs [N,T,D]`, returning the final state node.
pub fn gru_sequence_node<S: Scalar>(
    g: &mut Graph<S>,
    xs: NodeId,
    h0: NodeId,
    p: &GruNodes,
) -> Result<NodeId> {
    let shape = g.value(xs).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("gru_sequence input shape {:?}", shape)));
    }
    if shape[1] == 0 {
        return Err(Error::Argument("gru_sequence requires T >= 1".into()));
    }
    let mut h = h0;
    for t in 0..shape[1] {
        let x_t = g.slice_step(xs, t)?;
        h = gru_cell_node(g, x_t, h, p)?;
    }
    Ok(h)
}

/// Forward-only GRU step on plain tensors.
pub fn gru_cell<S: Scalar>(
    x_t: &Tensor<S>,
    h_prev: &Tensor<S>,
    p: &GruParams<S>,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let x = g.input(x_t.clone());
    let h = g.input(h_prev.clone());
    let nodes = register_gru(&mut g, "gru", p)?;
    let out = gru_cell_node(&mut g, x, h, &nodes)?;
    Ok(g.value(out).clone())
}

/// Forward-only fold over a sequence, returning the final hidden state.
pub fn gru_sequence<S: Scalar>(
    xs: &Tensor<S>,
    h0: &Tensor<S>,
    p: &GruParams<S>,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let x = g.input(xs.clone());
    let h = g.input(h0.clone());
    let nodes = register_gru(&mut g, "gru", p)?;
    let out = gru_sequence_node(&mut g, x, h, &nodes)?;
    Ok(g.value(out).clone())
}

//! Minimal tensor engine with reverse-mode differentiation and the layer
//! set the classifier needs: 1-D convolution, max pooling, batch norm,
//! bidirectional LSTM, dense layers, softmax, MSE, Adam.

mod graph;
pub mod init;
pub mod linalg;
pub mod ops;
pub mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use ops::{check_one_hot, pooled_len, BatchStats};
pub use optim::{reduce_lr_on_plateau, Adam, AdamConfig, PlateauScheduler};
pub use params::{BufferId, Param, ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Softmax,
}

/// Parameter handles of one LSTM direction.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

/// Both directions over `x: [b, l, f]`. Returns the per-step outputs
/// `[b, l, 2h]` and the final summary `[b, 2h]`: forward hidden at the last
/// step next to backward hidden at the first step.
pub fn bilstm<'a>(g: &mut Graph<'a>, store: &'a ParamStore, x: Var, p: &BiLstmParams) -> Result<(Var, Var)> {
    let len = g.shape(x)[1];
    let dir = |g: &mut Graph<'a>, lp: &LstmParams, reverse: bool| -> Result<Var> {
        let (wx, wh, b) = (g.param(store, lp.wx), g.param(store, lp.wh), g.param(store, lp.bias));
        g.lstm(x, wx, wh, b, reverse)
    };
    let fw = dir(g, &p.forward, false)?;
    let bw = dir(g, &p.backward, true)?;
    let outputs = g.concat_last(&[fw, bw])?;
    let fw_last = g.select_time(fw, len - 1)?;
    let bw_first = g.select_time(bw, 0)?;
    let last = g.concat_last(&[fw_last, bw_first])?;
    Ok((outputs, last))
}

/// Affine map followed by `act`.
pub fn dense<'a>(g: &mut Graph<'a>, store: &'a ParamStore, x: Var, w: ParamId, b: ParamId, act: Activation) -> Result<Var> {
    let (wv, bv) = (g.param(store, w), g.param(store, b));
    let y = g.linear(x, wv, bv)?;
    Ok(match act {
        Activation::None => y,
        Activation::Relu => g.relu(y),
        Activation::Softmax => g.softmax(y),
    })
}

use std::sync::Arc;

use crate::diffengine::{Bound, CornerIndex, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    None,
    Relu,
    Tanh,
    Sigmoid,
}

pub fn activate(tape: &mut Tape, x: Var, act: Act) -> Result<Var> {
    match act {
        Act::None => Ok(x),
        Act::Relu => tape.relu(x),
        Act::Tanh => tape.tanh(x),
        Act::Sigmoid => tape.sigmoid(x),
    }
}

/// `act(x·W + b)` with parameters `{name}.w`, `{name}.b`.
pub fn dense(tape: &mut Tape, p: &Bound, name: &str, x: Var, act: Act) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = tape.linear(x, w, Some(b))?;
    activate(tape, y, act)
}

/// Gathers each row's stencil neighbours into one `[rows, taps·C]` row
/// (missing neighbours are zero) and applies `{name}`.
pub fn stencil_conv(
    tape: &mut Tape,
    p: &Bound,
    name: &str,
    x: Var,
    stencil: &Arc<CornerIndex>,
    taps: usize,
    act: Act,
) -> Result<Var> {
    if stencil.k() != taps {
        return Err(Error::Shape(format!("stencil has {} taps, layer expects {taps}", stencil.k())));
    }
    let cols = tape.gather_cols(x, stencil.clone())?;
    dense(tape, p, name, cols, act)
}

/// 3×3 image stencil with clamp-to-edge borders, `[w·h, 9]`, pixel `v·w + u`.
pub fn image_stencil(width: usize, height: usize) -> Arc<CornerIndex> {
    let mut idx = Vec::with_capacity(width * height * 9);
    for v in 0..height as i64 {
        for u in 0..width as i64 {
            for dv in -1..=1 {
                for du in -1..=1 {
                    let uu = (u + du).clamp(0, width as i64 - 1);
                    let vv = (v + dv).clamp(0, height as i64 - 1);
                    idx.push((vv * width as i64 + uu) as u32);
                }
            }
        }
    }
    Arc::new(CornerIndex::new(width * height, 9, idx).expect("stencil size"))
}

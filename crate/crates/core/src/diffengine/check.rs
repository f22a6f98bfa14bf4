//! Central-difference gradient checking against parameter sets.

use super::params::{Bound, ParamSet};
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|a − n| / max(|a|, |n|, floor)`
    pub fn rel_err(&self, floor: f64) -> f64 {
        rel_err(self.analytic, self.numeric, floor)
    }
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `h`, at the given `(parameter, flat index)` coordinates.
pub fn check_param_gradients(
    params: &ParamSet,
    coords: &[(String, usize)],
    h: f64,
    f: &dyn Fn(&mut Tape, &Bound) -> Result<Var>,
) -> Result<Vec<GradCheck>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let names: Vec<&str> = {
        let mut v: Vec<&str> = coords.iter().map(|(n, _)| n.as_str()).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let vars = names.iter().map(|n| bound.get(n)).collect::<Result<Vec<_>>>()?;
    let grads = tape.gradient(out, &vars)?;
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let o = f(&mut t, &b)?;
        Ok(t.value(o).item())
    };
    let mut work = params.clone();
    coords
        .iter()
        .map(|(name, i)| {
            let k = names.binary_search(&name.as_str()).expect("name listed");
            let x0 = work.get(name)?.data()[*i];
            work.data_mut(name)?[*i] = x0 + h;
            let up = eval(&work)?;
            work.data_mut(name)?[*i] = x0 - h;
            let down = eval(&work)?;
            work.data_mut(name)?[*i] = x0;
            Ok(GradCheck {
                name: name.clone(),
                coord: *i,
                analytic: grads[k].data()[*i],
                numeric: (up - down) / (2.0 * h),
            })
        })
        .collect()
}

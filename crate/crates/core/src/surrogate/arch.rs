use crate::dfe::instance_norm;
use crate::error::{AefError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{ConditionVector, ForwardOutput, Paradigm, Surrogate, SurrogateSpec, WeightMode, NUM_ATTRIBUTES, STYLE_DIM};

pub(crate) const INIT_GAIN: f64 = 1.0;
const BOTTLENECK: usize = 8;

fn conv(name: &str, cout: usize, cin: usize) -> [(String, Vec<usize>); 2] {
    [
        (format!("{name}.w"), vec![cout, cin, 3, 3]),
        (format!("{name}.b"), vec![cout]),
    ]
}

fn linear(name: &str, out: usize, inp: usize) -> [(String, Vec<usize>); 2] {
    [(format!("{name}.w"), vec![out, inp]), (format!("{name}.b"), vec![out])]
}

/// Ordered parameter names and shapes for a spec.
pub(crate) fn weight_shapes(spec: &SurrogateSpec) -> Vec<(String, Vec<usize>)> {
    let c = spec.width;
    let layers: Vec<[(String, Vec<usize>); 2]> = match spec.paradigm {
        Paradigm::InputConcat => vec![
            conv("c1", c, 3 + NUM_ATTRIBUTES),
            conv("c2", c, c),
            conv("c3", c, c),
            conv("c4", 3, c),
        ],
        Paradigm::LatentInjection => vec![
            conv("e1", c, 3),
            conv("e2", BOTTLENECK, c),
            linear("inj", BOTTLENECK, BOTTLENECK + NUM_ATTRIBUTES),
            conv("d1", c, BOTTLENECK),
            conv("d2", c, c),
            conv("d3", 3, c),
        ],
        Paradigm::AttentionMask => vec![
            conv("t1", c, 3 + NUM_ATTRIBUTES),
            conv("t2", c, c),
            conv("ca", c, c),
            conv("cb", c, c),
            conv("cc", 3, c),
            conv("ma", c, c),
            conv("mb", 1, c),
        ],
        Paradigm::StyleInjection => vec![
            conv("e1", c, 3),
            conv("e2", c, c),
            linear("s1", c, STYLE_DIM),
            linear("sg", c, c),
            linear("sb", c, c),
            conv("d1", c, c),
            conv("d2", 3, c),
        ],
    };
    layers.into_iter().flatten().collect()
}

struct Params<'a, 't> {
    names: &'a [(String, Tensor)],
    vars: &'a [Var<'t>],
}

impl<'t> Params<'_, 't> {
    fn get(&self, name: &str) -> Var<'t> {
        let i = self
            .names
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.vars[i]
    }

    fn conv(&self, x: Var<'t>, name: &str) -> Result<Var<'t>> {
        x.conv2d(self.get(&format!("{name}.w")), Some(self.get(&format!("{name}.b"))))
    }

    /// conv, ReLU, instance norm.
    fn norm_block(&self, x: Var<'t>, name: &str) -> Result<Var<'t>> {
        instance_norm(self.conv(x, name)?.relu()?)
    }

    /// `x · Wᵀ + b` for x of shape N×in.
    fn linear(&self, x: Var<'t>, name: &str) -> Result<Var<'t>> {
        let w = self.get(&format!("{name}.w")).transpose()?;
        x.matmul(w)?.add(self.get(&format!("{name}.b")))
    }
}

pub(crate) fn bind<'t>(s: &Surrogate, tape: &'t Tape, mode: WeightMode) -> Result<Vec<Var<'t>>> {
    s.weights
        .iter()
        .map(|(_, t)| match mode {
            WeightMode::Frozen => tape.constant(t.clone()),
            WeightMode::Trainable => tape.leaf(t.clone()),
        })
        .collect()
}

fn condition_matrix(s: &Surrogate, conditions: &[ConditionVector]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = conditions
        .iter()
        .map(|c| c.for_paradigm(s.paradigm()).map(|c| c.values().to_vec()))
        .collect::<Result<_>>()?;
    let dim = rows[0].len();
    Tensor::new([rows.len(), dim], rows.concat())
}

/// Row-normalized Gaussian smoothing matrix of size n×n.
fn blur_matrix(n: usize, sigma: f64) -> Tensor {
    let mut m = Tensor::from_fn([n, n], |k| {
        let d = (k / n) as f64 - (k % n) as f64;
        (-d * d / (2.0 * sigma * sigma)).exp()
    });
    for row in m.data_mut().chunks_mut(n) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    m
}

/// Separable Gaussian blur of an N×C×H×W variable.
fn blur<'t>(tape: &'t Tape, x: Var<'t>, sigma: f64) -> Result<Var<'t>> {
    let shape = x.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let bw = tape.constant(blur_matrix(w, sigma))?.transpose()?;
    let bh = tape.constant(blur_matrix(h, sigma))?.transpose()?;
    let rows = x.reshape(&[n * c * h, w])?.matmul(bw)?;
    let cols = rows.reshape(&[n * c, h, w])?.transpose()?.reshape(&[n * c * w, h])?.matmul(bh)?;
    cols.reshape(&[n * c, w, h])?.transpose()?.reshape(&[n, c, h, w])
}

fn broadcast_planes<'t>(tape: &'t Tape, cond: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let cs = cond.shape();
    let ones = tape.constant(Tensor::ones([1, 1, h, w]))?;
    cond.reshape(&[cs[0], cs[1], 1, 1])?.mul(ones)
}

pub(crate) fn forward<'t>(
    s: &Surrogate,
    tape: &'t Tape,
    x: Var<'t>,
    conditions: &[ConditionVector],
    mode: WeightMode,
    features_only: bool,
) -> Result<ForwardOutput<'t>> {
    let vars = bind(s, tape, mode)?;
    forward_bound(s, tape, x, conditions, &vars, features_only)
}

pub(crate) fn forward_bound<'t>(
    s: &Surrogate,
    tape: &'t Tape,
    x: Var<'t>,
    conditions: &[ConditionVector],
    vars: &[Var<'t>],
    features_only: bool,
) -> Result<ForwardOutput<'t>> {
    let p = Params {
        names: &s.weights,
        vars,
    };
    let shape = x.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let x = if s.spec.resistance_blur > 0.0 {
        blur(tape, x, s.spec.resistance_blur)?
    } else {
        x
    };
    let cond = tape.constant(condition_matrix(s, conditions)?)?;
    let early = |f: Var<'t>| Ok(ForwardOutput { output: f, features: f });

    match s.spec.paradigm {
        Paradigm::InputConcat => {
            let planes = broadcast_planes(tape, cond, h, w)?;
            let inp = tape.concat(&[x, planes], 1)?;
            let h1 = p.norm_block(inp, "c1")?;
            let tap = p.norm_block(h1, "c2")?;
            if features_only {
                return early(tap);
            }
            let h3 = p.norm_block(tap, "c3")?;
            let out = p.conv(h3, "c4")?.tanh()?;
            Ok(ForwardOutput {
                output: out,
                features: tap,
            })
        }
        Paradigm::LatentInjection => {
            let h1 = p.norm_block(x, "e1")?.avg_pool2()?;
            let z = p.conv(h1, "e2")?.relu()?.avg_pool2()?;
            if features_only {
                return early(z);
            }
            let pooled = z.mean_axes(&[2, 3], false)?;
            let code = tape.concat(&[pooled, cond], 1)?;
            let inj = p.linear(code, "inj")?.reshape(&[n, BOTTLENECK, 1, 1])?;
            let zi = z.add(inj)?;
            let d1 = p.conv(zi, "d1")?.relu()?.upsample2()?;
            let d2 = p.norm_block(d1, "d2")?.upsample2()?;
            let out = p.conv(d2, "d3")?.tanh()?;
            Ok(ForwardOutput { output: out, features: z })
        }
        Paradigm::AttentionMask => {
            let planes = broadcast_planes(tape, cond, h, w)?;
            let inp = tape.concat(&[x, planes], 1)?;
            let trunk = p.norm_block(p.norm_block(inp, "t1")?, "t2")?;
            let ca = p.norm_block(trunk, "ca")?;
            let tap = p.conv(ca, "cb")?.relu()?;
            if features_only {
                return early(tap);
            }
            let edit = p.conv(tap, "cc")?.tanh()?;
            let mask = mask_branch(&p, trunk)?;
            let keep = mask.neg()?.add_scalar(1.0)?;
            let out = mask.mul(edit)?.add(keep.mul(x)?)?;
            Ok(ForwardOutput {
                output: out,
                features: tap,
            })
        }
        Paradigm::StyleInjection => {
            let h1 = p.norm_block(x, "e1")?;
            let tap = p.conv(h1, "e2")?.relu()?;
            if features_only {
                return early(tap);
            }
            let c = s.spec.width;
            let style = p.linear(cond, "s1")?.relu()?;
            let gamma = p.linear(style, "sg")?.add_scalar(1.0)?.reshape(&[n, c, 1, 1])?;
            let beta = p.linear(style, "sb")?.reshape(&[n, c, 1, 1])?;
            let mixed = instance_norm(tap)?.mul(gamma)?.add(beta)?.relu()?;
            let d1 = p.norm_block(mixed, "d1")?;
            let out = p.conv(d1, "d2")?.tanh()?;
            Ok(ForwardOutput {
                output: out,
                features: tap,
            })
        }
    }
}

fn mask_branch<'t>(p: &Params<'_, 't>, trunk: Var<'t>) -> Result<Var<'t>> {
    p.conv(p.conv(trunk, "ma")?.relu()?, "mb")?.sigmoid()
}

/// The spatial blending mask of an attention-mask generator, N×1×H×W.
pub fn attention_mask(s: &Surrogate, x: &Tensor, conditions: &[ConditionVector]) -> Result<Tensor> {
    if s.paradigm() != Paradigm::AttentionMask {
        return Err(AefError::InvalidArgument(format!("{} has no attention mask", s.paradigm())));
    }
    let tape = Tape::new();
    let vars = bind(s, &tape, WeightMode::Frozen)?;
    let p = Params {
        names: &s.weights,
        vars: &vars,
    };
    let xv = tape.constant(x.clone())?;
    let xv = if s.spec.resistance_blur > 0.0 {
        blur(&tape, xv, s.spec.resistance_blur)?
    } else {
        xv
    };
    let h = x.shape()[2];
    let w = x.shape()[3];
    let cond = tape.constant(condition_matrix(s, conditions)?)?;
    let planes = broadcast_planes(&tape, cond, h, w)?;
    let inp = tape.concat(&[xv, planes], 1)?;
    let trunk = p.norm_block(p.norm_block(inp, "t1")?, "t2")?;
    Ok(mask_branch(&p, trunk)?.value().as_ref().clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constants() {
        let m = blur_matrix(8, 1.5);
        for row in m.data().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

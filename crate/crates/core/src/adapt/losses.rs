use crate::autodiff::{contract, Graph, Result, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Lower clamp for probabilities inside the log of the cross-entropy.
pub const PROB_EPS: f64 = 1e-10;
/// Discriminator outputs are clamped to `[D_CLAMP, 1 − D_CLAMP]` before logs.
pub const D_CLAMP: f64 = 1e-7;

fn rows<T: Real>(g: &Graph<T>, v: Var, what: &str) -> Result<usize> {
    let shape = g.shape(v)?;
    match shape.first() {
        Some(&n) if n > 0 => Ok(n),
        _ => contract(format!(
            "{what} must be a non-empty batch, got shape {shape:?}"
        )),
    }
}

fn clamped_log<T: Real>(g: &mut Graph<T>, d: Var, complement: bool) -> Result<Var> {
    let c = g.clamp(d, T::c(D_CLAMP), T::c(1.0 - D_CLAMP))?;
    let arg = if complement {
        let neg = g.scale(c, -T::one())?;
        g.add_scalar(neg, T::one())?
    } else {
        c
    };
    g.log(arg)
}

/// Mean over the batch of `−Σ y·ln(max(p, 1e-10))`.
pub fn source_loss<T: Real>(g: &mut Graph<T>, probs: Var, labels: Var) -> Result<Var> {
    let (ps, ls) = (g.shape(probs)?.to_vec(), g.shape(labels)?.to_vec());
    if ps.len() != 2 || ps != ls {
        return contract(format!(
            "probabilities {ps:?} and one-hot labels {ls:?} must be equal 2-D shapes"
        ));
    }
    let n = rows(g, probs, "probabilities")?;
    let p = g.clamp(probs, T::c(PROB_EPS), T::max_value())?;
    let logp = g.log(p)?;
    let weighted = g.mul(labels, logp)?;
    let total = g.sum(weighted)?;
    g.scale(total, T::c(-1.0 / n as f64))
}

/// `−[mean ln d_source + mean ln(1 − d_target)]`.
pub fn discriminator_loss<T: Real>(g: &mut Graph<T>, d_source: Var, d_target: Var) -> Result<Var> {
    rows(g, d_source, "source discriminator outputs")?;
    rows(g, d_target, "target discriminator outputs")?;
    let ls = clamped_log(g, d_source, false)?;
    let ms = g.mean(ls)?;
    let lt = clamped_log(g, d_target, true)?;
    let mt = g.mean(lt)?;
    let both = g.add(ms, mt)?;
    g.scale(both, -T::one())
}

/// `−mean ln d_target` plus the cross-entropy of the classifier on mapped
/// source examples.
pub fn mapper_loss<T: Real>(
    g: &mut Graph<T>,
    d_target: Var,
    probs_source: Var,
    labels_source: Var,
) -> Result<Var> {
    rows(g, d_target, "target discriminator outputs")?;
    let lt = clamped_log(g, d_target, false)?;
    let mt = g.mean(lt)?;
    let adversarial = g.scale(mt, -T::one())?;
    let ce = source_loss(g, probs_source, labels_source)?;
    g.add(adversarial, ce)
}

fn evaluate<T: Real>(
    inputs: &[&Tensor<T>],
    f: impl FnOnce(&mut Graph<T>, &[Var]) -> Result<Var>,
) -> Result<T> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.constant((*t).clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    Ok(g.value(out)?.data()[0])
}

/// Value of [`source_loss`] on concrete tensors.
pub fn loss_source<T: Real>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<T> {
    evaluate(&[probs, labels], |g, v| source_loss(g, v[0], v[1]))
}

/// Value of [`discriminator_loss`] on concrete tensors.
pub fn loss_discriminator<T: Real>(d_source: &Tensor<T>, d_target: &Tensor<T>) -> Result<T> {
    evaluate(&[d_source, d_target], |g, v| {
        discriminator_loss(g, v[0], v[1])
    })
}

/// Value of [`mapper_loss`] on concrete tensors.
pub fn loss_mapper<T: Real>(
    d_target: &Tensor<T>,
    probs_source: &Tensor<T>,
    labels_source: &Tensor<T>,
) -> Result<T> {
    evaluate(&[d_target, probs_source, labels_source], |g, v| {
        mapper_loss(g, v[0], v[1], v[2])
    })
}

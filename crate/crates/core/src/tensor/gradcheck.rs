use super::{Gradients, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Per-parameter comparison of analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_error: f64,
}

impl GradCheckReport {
    /// Largest relative error over all checked parameters.
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)` with L2 norms over the whole tensor.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(1e-8);
    diff / scale
}

/// Checks the gradient of the scalar built by `scalar_fn` against central
/// differences with step `1e-3 * max(1, |x|)` for every parameter in
/// `params` (or only `only`, when given).
pub fn grad_check<F>(
    params: &mut ParamStore,
    only: Option<&[ParamId]>,
    mut scalar_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    let mut analytic = Gradients::zeros(params);
    {
        let mut g = Graph::new(params);
        let out = scalar_fn(&mut g)?;
        if g.numel(out) != 1 {
            return Err(Error::Usage(format!(
                "grad_check needs a scalar function, got shape {:?}",
                g.shape(out)
            )));
        }
        g.backward(out, &mut analytic)?;
    }
    let eval = |params: &ParamStore, f: &mut F| -> Result<f64> {
        let mut g = Graph::inference(params);
        let out = f(&mut g)?;
        g.scalar_value(out)
    };

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => params.ids().collect(),
    };
    let mut entries = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.tensor(id).numel();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x = params.tensor(id).data()[i];
            let h = 1e-3 * (x.abs() as f64).max(1.0);
            let plus = (x as f64 + h) as f32;
            let minus = (x as f64 - h) as f32;
            params.tensor_mut(id).data_mut()[i] = plus;
            let fp = eval(params, &mut scalar_fn)?;
            params.tensor_mut(id).data_mut()[i] = minus;
            let fm = eval(params, &mut scalar_fn)?;
            params.tensor_mut(id).data_mut()[i] = x;
            *slot = (fp - fm) / (plus as f64 - minus as f64);
        }
        let a = analytic.get(id).to_vec();
        entries.push(GradCheckEntry {
            name: params.name(id).to_string(),
            rel_error: relative_error(&a, &numeric),
            analytic: a,
            numeric,
        });
    }
    Ok(GradCheckReport { entries })
}

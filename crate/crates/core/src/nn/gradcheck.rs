use super::{Graph, NnError, NodeId, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Gradients below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Compares `backward` against central finite differences (step `eps`) on
/// every parameter entry. `loss` records a forward pass and returns the
/// scalar loss node.
pub fn gradient_check<F>(params: &ParamSet, eps: f64, loss: F) -> Result<GradCheckReport, NnError>
where
    F: Fn(&ParamSet) -> Result<(Graph, NodeId), NnError>,
{
    let (g, node) = loss(params)?;
    let analytic = g.backward(node, params)?;
    let eval = |p: &ParamSet| -> Result<f64, NnError> {
        let (g, node) = loss(p)?;
        Ok(g.value(node).data()[0])
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for i in 0..params.len() {
        for j in 0..params.tensor(i).len() {
            let orig = params.tensor(i).data()[j];
            work.tensor_mut(i).data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work.tensor_mut(i).data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work.tensor_mut(i).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.tensors[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((params.name(i).to_string(), j));
            }
        }
    }
    Ok(report)
}

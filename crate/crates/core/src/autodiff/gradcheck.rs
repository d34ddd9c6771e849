use super::{Bindings, Graph, ParamStore, Rng, Var};
use crate::parallel::{self, Exec};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub abs_floor: f64,
    /// Check at most this many seeded-random coordinates per tensor; `None` checks all.
    pub max_coords_per_group: Option<usize>,
    /// Use the five-point stencil, cancelling the `h^2` truncation term.
    /// Twice the evaluations; needed when third derivatives are large
    /// but `h` cannot shrink without roundoff swamping small gradients.
    pub fourth_order: bool,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-5,
            abs_floor: 1e-6,
            max_coords_per_group: None,
            fourth_order: false,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    pub fn worst(&self) -> Option<&GroupError> {
        self.groups.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn eval<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&Graph, &Bindings) -> Result<Var>,
{
    let g = Graph::new();
    let b = params.bind(&g);
    let loss = f(&g, &b)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::GradCheck(format!("loss must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(p + h) - f(p - h)) / 2h` (or the five-point stencil), reporting the maximum relative error per
/// parameter tensor.
///
/// `f` builds a scalar loss on a fresh graph from bound parameters and must
/// be deterministic: it is evaluated twice at the base point and any
/// difference is an error.
pub fn finite_diff_check<F>(f: F, params: &ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &Bindings) -> Result<Var> + Sync,
{
    let g = Graph::new();
    let b = params.bind(&g);
    let loss = f(&g, &b)?;
    let base = g.value(loss).item();
    g.backward(loss)?;
    let grads = b.grads(&g, params);
    drop(g);

    let again = eval(&f, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::GradCheck(format!(
            "loss is not deterministic: {base} then {again}"
        )));
    }

    let mut rng = Rng::new(opts.seed);
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, t) in params.iter() {
        let n = t.len();
        match opts.max_coords_per_group {
            Some(k) if k < n => {
                let mut picked: Vec<usize> = Vec::with_capacity(k);
                while picked.len() < k {
                    let i = rng.below(n);
                    if !picked.contains(&i) {
                        picked.push(i);
                    }
                }
                coords.extend(picked.into_iter().map(|i| (name.to_string(), i)));
            }
            _ => coords.extend((0..n).map(|i| (name.to_string(), i))),
        }
    }

    let h = opts.h;
    let numeric = parallel::try_map_indexed(opts.exec, coords.len(), |c| {
        let (name, i) = &coords[c];
        let shifted = |delta: f64| -> Result<f64> {
            let mut p = params.clone();
            p.get_mut(name).expect("name from params").data_mut()[*i] += delta;
            eval(&f, &p)
        };
        if opts.fourth_order {
            let near = shifted(h)? - shifted(-h)?;
            let far = shifted(2.0 * h)? - shifted(-2.0 * h)?;
            Ok::<f64, Error>((8.0 * near - far) / (12.0 * h))
        } else {
            Ok((shifted(h)? - shifted(-h)?) / (2.0 * h))
        }
    })?;

    let mut groups: Vec<GroupError> = Vec::new();
    for ((name, i), num) in coords.iter().zip(numeric) {
        let analytic = grads.get(name).expect("grad per param").data()[*i];
        let err = rel_err(analytic, num, opts.abs_floor);
        match groups.last_mut() {
            Some(gr) if gr.name == *name => {
                gr.checked += 1;
                gr.max_rel_err = gr.max_rel_err.max(err);
            }
            _ => groups.push(GroupError {
                name: name.clone(),
                checked: 1,
                max_rel_err: err,
            }),
        }
    }
    Ok(GradCheckReport { groups, tol: opts.tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn sum_of_squares_is_exact() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![0.3, -1.7, 2.5, 4.0]));
        let report = finite_diff_check(
            |g, b| {
                let x = b.get("x")?;
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-8, "{report:?}");
    }

    #[test]
    fn five_point_stencil_is_exact_on_cubics() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![0.5, -1.5, 2.0]));
        let cube = |g: &Graph, b: &Bindings| {
            let x = b.get("x")?;
            let sq = g.mul(x, x)?;
            g.sum(g.mul(sq, x)?)
        };
        let opts = |fourth_order| GradCheckOptions {
            h: 1e-2,
            fourth_order,
            ..Default::default()
        };
        // Central differences are off by h^2 here.
        let central = finite_diff_check(cube, &p, &opts(false)).unwrap();
        assert!(central.max_rel_err() > 1e-5, "{central:?}");
        let five = finite_diff_check(cube, &p, &opts(true)).unwrap();
        assert!(five.max_rel_err() < 1e-10, "{five:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![1.0, 2.0]));
        let report = finite_diff_check(
            |g, b| {
                let x = b.get("x")?;
                let z = g.scale(x, 0.0)?;
                let s = g.sum(z)?;
                g.add_scalar(s, 3.0)
            },
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_err(), 0.0);
        assert!(report.passed());
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![1.0]));
        let r = finite_diff_check(
            |g, b| {
                let n = calls.fetch_add(1, Ordering::SeqCst) as f64;
                let x = b.get("x")?;
                let s = g.sum(x)?;
                g.add_scalar(s, n)
            },
            &p,
            &GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::GradCheck(_))));
    }
}

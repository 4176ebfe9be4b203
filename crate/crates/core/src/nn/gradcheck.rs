//! Central finite-difference checks for tape gradients.

use rand::Rng;

use super::{Graph, ParamId, ParamSet, Var};

#[derive(Clone, Debug)]
pub struct GradProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<GradProbe>,
    pub max_rel_err: f64,
}

/// Relative error with an absolute floor so that gradients that are zero in
/// both routes do not blow up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares analytic parameter gradients of the scalar built by `build`
/// against central differences at `n_probes` uniformly drawn scalars.
pub fn check_param_grads<F, R>(ps: &ParamSet, build: F, n_probes: usize, eps: f64, rng: &mut R) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Var,
    R: Rng + ?Sized,
{
    let analytic = {
        let mut g = Graph::new(ps);
        let loss = build(&mut g);
        g.backward(loss).params
    };
    let total = ps.num_scalars();
    let offsets: Vec<usize> = ps
        .values()
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.len();
            Some(o)
        })
        .collect();
    let mut work = ps.clone();
    let eval = |p: &ParamSet| {
        let mut g = Graph::new(p);
        let loss = build(&mut g);
        g.value(loss).data()[0]
    };
    let mut probes = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let flat = rng.random_range(0..total);
        let pi = offsets.partition_point(|&o| o <= flat) - 1;
        let id = ParamId(pi);
        let idx = flat - offsets[pi];
        let orig = work.get(id).data()[idx];
        work.get_mut(id).data_mut()[idx] = orig + eps;
        let up = eval(&work);
        work.get_mut(id).data_mut()[idx] = orig - eps;
        let down = eval(&work);
        work.get_mut(id).data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.get(id)[idx];
        probes.push(GradProbe {
            param: ps.name(id).to_string(),
            index: idx,
            analytic: a,
            numeric,
            rel_err: rel_err(a, numeric),
        });
    }
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    GradCheckReport { probes, max_rel_err }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn elementary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::uniform(&[3, 4], 1.0, &mut rng));
        let b = ps.add("b", Tensor::uniform(&[4, 5], 1.0, &mut rng));
        let c = ps.add("c", Tensor::uniform(&[5], 1.0, &mut rng));
        let d = ps.add("d", Tensor::uniform(&[3], 1.0, &mut rng));
        let build = |g: &mut Graph| {
            let (a, b, c, d) = (g.param(a), g.param(b), g.param(c), g.param(d));
            let ab = g.matmul(a, b);
            let x = g.add_row(ab, c);
            let x = g.mul_col(x, d);
            let sm = g.softmax_rows(x);
            let ln = g.layer_norm_rows(x, 1e-5);
            let t = g.transpose(ln);
            let tt = g.matmul(sm, t);
            let u = g.matmul_t(sm, ln);
            let tt = g.add(tt, u);
            let e = g.exp(tt);
            let cl = g.clamp(e, 0.0, 1.5);
            let s1 = g.slice_cols(cl, 1, 2);
            let s2 = g.slice_rows(x, 0, 2);
            let s2t = g.transpose(s2);
            let cat = g.concat_rows(&[s1, s2t]);
            let m = g.mean_cols(cat);
            let ab = g.abs(m);
            g.sum(ab)
        };
        let r = check_param_grads(&ps, build, 30, 1e-6, &mut rng);
        assert!(r.max_rel_err < 1e-5, "{r:#?}");
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::uniform(&[2, 6, 5], 1.0, &mut rng));
        let w = ps.add("w", Tensor::uniform(&[3, 2 * 9], 0.5, &mut rng));
        let b = ps.add("b", Tensor::uniform(&[3], 0.5, &mut rng));
        let build = |g: &mut Graph| {
            let (x, w, b) = (g.param(x), g.param(w), g.param(b));
            let y = g.conv2d(x, w, b, 3, 2, 1);
            let y2 = g.mul(y, y);
            g.sum(y2)
        };
        let r = check_param_grads(&ps, build, 40, 1e-6, &mut rng);
        assert!(r.max_rel_err < 1e-6, "{r:#?}");
    }
}

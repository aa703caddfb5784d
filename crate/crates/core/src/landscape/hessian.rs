//! Hessian-vector products by central differences of gradients, and the
//! leading Hessian eigenvalues by deflated power iteration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::grid::{FieldEvaluator, FieldKind};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, normalize, scale};
use crate::mask::PruneMask;
use crate::nn::{Network, ParamVector};

/// Default displacement along the unit direction: `1e-3 · (1 + ‖θ‖)`.
pub fn default_step(theta: &[f64]) -> f64 {
    1e-3 * (1.0 + norm(theta))
}

/// `(∇L(θ + h·v̂) − ∇L(θ − h·v̂)) / 2h · ‖v‖` with `v̂ = v / ‖v‖`.
pub fn fd_hvp<G>(grad: G, theta: &[f64], vec: &[f64], h: f64) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    if theta.len() != vec.len() {
        return Err(Error::Layout("direction and parameters differ in length".into()));
    }
    let nv = norm(vec);
    if !(nv > 0.0) {
        return Err(Error::Config("Hessian-vector product needs a non-zero direction".into()));
    }
    let step = h / nv;
    let mut plus = theta.to_vec();
    axpy(step, vec, &mut plus);
    let mut minus = theta.to_vec();
    axpy(-step, vec, &mut minus);
    let (gp, gm) = rayon::join(|| grad(&plus), || grad(&minus));
    let (gp, gm) = (gp?, gm?);
    let c = nv / (2.0 * h);
    Ok(gp.iter().zip(&gm).map(|(p, m)| (p - m) * c).collect())
}

/// Loss Hessian of a network at fixed parameters over a fixed dataset, in `f64`.
///
/// With a support mask the operator acts on the kept coordinates only
/// (`P H P` with `P` the coordinate projection).
pub struct NetworkHessian<'a> {
    net: &'a Network,
    data: &'a LabeledDataset,
    theta: Vec<f64>,
    support: Option<Vec<bool>>,
    step: f64,
}

impl<'a> NetworkHessian<'a> {
    pub fn new(net: &'a Network, params: &[f32], data: &'a LabeledDataset) -> Result<Self> {
        if params.len() != net.num_params() {
            return Err(Error::Layout(format!(
                "{} parameters for a model with {}",
                params.len(),
                net.num_params()
            )));
        }
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let theta: Vec<f64> = params.iter().map(|&x| x as f64).collect();
        let step = default_step(&theta);
        Ok(NetworkHessian { net, data, theta, support: None, step })
    }

    pub fn restrict_to(mut self, mask: &PruneMask) -> Result<Self> {
        mask.check_len(self.theta.len())?;
        self.support = Some(mask.keep().to_vec());
        Ok(self)
    }

    pub fn with_step(mut self, h: f64) -> Self {
        self.step = h;
        self
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.net.dataset_loss_and_grad::<f64>(theta, self.data)?.1)
    }

    fn project(&self, x: &mut [f64]) {
        if let Some(s) = &self.support {
            for (v, &k) in x.iter_mut().zip(s) {
                if !k {
                    *v = 0.0;
                }
            }
        }
    }

    pub fn apply(&self, vec: &[f64]) -> Result<Vec<f64>> {
        let mut v = vec.to_vec();
        self.project(&mut v);
        if norm(&v) == 0.0 {
            return Ok(vec![0.0; v.len()]);
        }
        let mut out = fd_hvp(|t| self.gradient(t), &self.theta, &v, self.step)?;
        self.project(&mut out);
        Ok(out)
    }
}

/// Hessian of the mean loss over `data` at `params`, applied to `vec`.
pub fn hvp(
    net: &Network,
    params: &ParamVector<f32>,
    vec: &[f64],
    data: &LabeledDataset,
    h: Option<f64>,
) -> Result<ParamVector<f64>> {
    let mut op = NetworkHessian::new(net, params.values(), data)?;
    if let Some(h) = h {
        op = op.with_step(h);
    }
    let out = fd_hvp(|t| op.gradient(t), op.theta(), vec, op.step())?;
    ParamVector::new(params.layout().clone(), out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EigenConfig {
    pub k: usize,
    pub iters: usize,
    /// Convergence when `‖Hx − λx‖ < tol · max(1, |λ|)` for unit `x`.
    pub tol: f64,
    pub seed: u64,
}

impl Default for EigenConfig {
    fn default() -> Self {
        EigenConfig { k: 5, iters: 100, tol: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    #[serde(skip)]
    pub vector: Vec<f64>,
}

/// Leading eigenpairs of a symmetric operator by power iteration, projecting
/// every accepted eigenvector out of later iterates. Sorted by descending `|λ|`.
pub fn power_topk<O>(mut op: O, dim: usize, config: &EigenConfig) -> Result<Vec<EigenPair>>
where
    O: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if config.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if config.k > dim {
        return Err(Error::Config(format!("k = {} exceeds dimension {dim}", config.k)));
    }
    if config.iters == 0 {
        return Err(Error::Config("iters must be at least 1".into()));
    }
    let deflate = |found: &[EigenPair], x: &mut [f64]| {
        for q in found {
            let c = dot(&q.vector, x);
            axpy(-c, &q.vector, x);
        }
    };
    let mut found: Vec<EigenPair> = Vec::with_capacity(config.k);
    for idx in 0..config.k {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(idx as u64);
        let mut x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        deflate(&found, &mut x);
        normalize(&mut x);
        let mut pair = EigenPair { value: 0.0, converged: false, iterations: 0, residual: f64::INFINITY, vector: vec![] };
        for it in 1..=config.iters {
            let mut y = op(&x)?;
            if y.len() != dim {
                return Err(Error::Layout("operator changed dimension".into()));
            }
            deflate(&found, &mut y);
            let lambda = dot(&x, &y);
            let mut r = y.clone();
            axpy(-lambda, &x, &mut r);
            let res = norm(&r);
            pair.value = lambda;
            pair.iterations = it;
            pair.residual = res;
            if !lambda.is_finite() || !res.is_finite() {
                return Err(Error::NumericOverflow(format!("power iteration produced λ = {lambda}")));
            }
            if res < config.tol * lambda.abs().max(1.0) {
                pair.converged = true;
                break;
            }
            let ny = norm(&y);
            if ny == 0.0 {
                pair.converged = true;
                break;
            }
            scale(1.0 / ny, &mut y);
            x = y;
        }
        pair.vector = x;
        found.push(pair);
    }
    found.sort_by(|a, b| b.value.abs().total_cmp(&a.value.abs()));
    Ok(found)
}

/// Top-`k` Hessian eigenvalues of the network loss over `data` at `params`.
pub fn top_k_eigenvalues(
    net: &Network,
    params: &[f32],
    data: &LabeledDataset,
    config: &EigenConfig,
    restrict: Option<&PruneMask>,
) -> Result<Vec<EigenPair>> {
    let mut op = NetworkHessian::new(net, params, data)?;
    if let Some(m) = restrict {
        op = op.restrict_to(m)?;
    }
    power_topk(|v| op.apply(v), op.dim(), config)
}

/// Top-`k` eigenvalues as a grid field.
pub struct HessianField<'a> {
    pub net: &'a Network,
    pub data: &'a LabeledDataset,
    pub config: EigenConfig,
}

impl FieldEvaluator for HessianField<'_> {
    fn kind(&self) -> FieldKind {
        FieldKind::HessianTopk
    }

    fn width(&self) -> usize {
        self.config.k
    }

    fn evaluate(&self, params: &ParamVector<f32>) -> Result<Vec<f64>> {
        let pairs = top_k_eigenvalues(self.net, params.values(), self.data, &self.config, None)?;
        Ok(pairs.into_iter().map(|p| p.value).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ModelConfig, Shape};
    use crate::Split;

    fn diag_grad(d: &[f64]) -> impl Fn(&[f64]) -> Result<Vec<f64>> + Sync + '_ {
        move |t: &[f64]| Ok(t.iter().zip(d).map(|(x, di)| x * di).collect())
    }

    #[test]
    fn quadratic_hvp_is_exact() {
        let d = [3.0, 1.0];
        let r = fd_hvp(diag_grad(&d), &[0.3, -0.7], &[1.0, 0.0], 1e-3).unwrap();
        assert!((r[0] - 3.0).abs() < 1e-9 && r[1].abs() < 1e-12);
        let r = fd_hvp(diag_grad(&d), &[0.3, -0.7], &[0.0, 5.0], 1e-3).unwrap();
        assert!((r[1] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn step_and_direction_checks() {
        let d = [1.0];
        assert!(fd_hvp(diag_grad(&d), &[0.0], &[1.0], 0.0).is_err());
        assert!(fd_hvp(diag_grad(&d), &[0.0], &[1.0], -1.0).is_err());
        assert!(fd_hvp(diag_grad(&d), &[0.0], &[0.0], 1e-3).is_err());
    }

    #[test]
    fn known_spectrum() {
        let d = [1.0, 5.0, 2.0];
        let cfg = EigenConfig { k: 3, iters: 2000, tol: 1e-9, seed: 1 };
        let pairs = power_topk(|v| Ok(v.iter().zip(&d).map(|(x, di)| x * di).collect()), 3, &cfg).unwrap();
        let vals: Vec<f64> = pairs.iter().map(|p| p.value).collect();
        for (got, want) in vals.iter().zip([5.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-6, "{vals:?}");
        }
        assert!(pairs.iter().all(|p| p.converged));
    }

    #[test]
    fn negative_dominant_eigenvalue() {
        let d = [-4.0, 1.0, 0.5];
        let cfg = EigenConfig { k: 2, iters: 2000, tol: 1e-9, seed: 2 };
        let pairs = power_topk(|v| Ok(v.iter().zip(&d).map(|(x, di)| x * di).collect()), 3, &cfg).unwrap();
        assert!((pairs[0].value + 4.0).abs() < 1e-6);
        assert!((pairs[1].value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_convergence_is_flagged() {
        // equal-magnitude ±1 eigenvalues make the power iterate oscillate
        let cfg = EigenConfig { k: 1, iters: 5, tol: 1e-12, seed: 0 };
        let pairs = power_topk(|v| Ok(vec![v[0], -v[1]]), 2, &cfg).unwrap();
        assert!(!pairs[0].converged);
        assert_eq!(pairs[0].iterations, 5);
        assert!(power_topk(|v| Ok(v.to_vec()), 2, &EigenConfig { k: 0, ..cfg.clone() }).is_err());
        assert!(power_topk(|v| Ok(v.to_vec()), 2, &EigenConfig { k: 3, ..cfg }).is_err());
    }

    fn toy() -> (Network, LabeledDataset) {
        let net = Network::new(ModelConfig::mlp("h", 3, &[4], 3)).unwrap();
        let x = ndarray::Array2::from_shape_fn((30, 3), |(i, j)| ((i * 7 + j * 5) as f32 * 0.41).sin());
        let y = (0..30).map(|i| (i % 3) as u8).collect();
        (net, LabeledDataset::new(x, y, Shape::flat(3), Split::Train, 3).unwrap())
    }

    #[test]
    fn hvp_is_symmetric_and_linear() {
        let (net, data) = toy();
        let p = net.init_params(3);
        let n = p.len();
        let u: Vec<f64> = (0..n).map(|i| ((i * 13) as f64 * 0.7).sin()).collect();
        let v: Vec<f64> = (0..n).map(|i| ((i * 5) as f64 * 1.3).cos()).collect();
        let hu = hvp(&net, &p, &u, &data, None).unwrap();
        let hv = hvp(&net, &p, &v, &data, None).unwrap();
        let a = dot(&v, hu.values());
        let b = dot(&u, hv.values());
        assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()), "{a} {b}");
        let v3: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        let h3 = hvp(&net, &p, &v3, &data, None).unwrap();
        for (x, y) in h3.values().iter().zip(hv.values()) {
            assert!((x - 3.0 * y).abs() <= 1e-6 * (3.0 * y).abs().max(1e-9), "{x} {y}");
        }
    }

    #[test]
    fn output_bias_block_of_linear_model_is_zero() {
        // softmax-linear model: ∂²L/∂b² is non-zero but weights on a constant-zero
        // input column never move the loss, so their rows vanish
        let net = Network::new(ModelConfig::mlp("lin", 2, &[], 3)).unwrap();
        let x = ndarray::Array2::from_shape_fn((12, 2), |(i, j)| if j == 1 { 0.0 } else { i as f32 * 0.1 - 0.5 });
        let y = (0..12).map(|i| (i % 3) as u8).collect();
        let d = LabeledDataset::new(x, y, Shape::flat(2), Split::Train, 3).unwrap();
        let p = net.init_params(1);
        let e: Vec<f64> = (0..p.len()).map(|i| if i == 1 { 1.0 } else { 0.0 }).collect();
        let r = hvp(&net, &p, &e, &d, None).unwrap();
        assert!(r.values().iter().all(|v| v.abs() < 1e-10), "{:?}", r.values());
    }

    #[test]
    fn restricted_operator_stays_on_support() {
        let (net, data) = toy();
        let p = net.init_params(5);
        let mut keep = vec![true; p.len()];
        keep[..10].iter_mut().for_each(|k| *k = false);
        let mask = PruneMask::new(keep, crate::Provenance::Oneshot, None, 0.0);
        let cfg = EigenConfig { k: 2, iters: 50, tol: 1e-4, seed: 0 };
        let pairs = top_k_eigenvalues(&net, p.values(), &data, &cfg, Some(&mask)).unwrap();
        for pr in &pairs {
            assert!(pr.vector[..10].iter().all(|&v| v == 0.0));
        }
    }
}

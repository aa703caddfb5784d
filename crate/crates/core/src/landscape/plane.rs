use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, scale};
use crate::nn::ParamVector;

/// The affine plane `A + α·u + β·v` with `u = B − A` and `v ⊥ u`, `‖v‖ = ‖u‖`.
#[derive(Clone, Debug)]
pub struct PlaneSpec {
    a: ParamVector<f32>,
    b: ParamVector<f32>,
    u: Vec<f64>,
    v: Vec<f64>,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneMetadata {
    pub seed: u64,
    pub params: usize,
    pub norm_u: f64,
    pub norm_v: f64,
    pub u_dot_v: f64,
    pub anchor_a_sha256: String,
    pub anchor_b_sha256: String,
}

/// SHA-256 of the little-endian `f32` values.
pub fn values_digest(values: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn build_plane(a: &ParamVector<f32>, b: &ParamVector<f32>, seed: u64) -> Result<PlaneSpec> {
    if !a.same_layout(b.layout()) {
        return Err(Error::Layout("plane anchors come from different models".into()));
    }
    let u: Vec<f64> = a.values().iter().zip(b.values()).map(|(&x, &y)| y as f64 - x as f64).collect();
    let nu = norm(&u);
    if nu == 0.0 {
        return Err(Error::DegeneratePlane);
    }
    if !nu.is_finite() {
        return Err(Error::NumericOverflow("anchor difference is not finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..u.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let uu = dot(&u, &u);
    // two Gram–Schmidt passes keep |u·v| at rounding level
    for _ in 0..2 {
        let c = dot(&u, &v) / uu;
        axpy(-c, &u, &mut v);
    }
    let nv = norm(&v);
    if nv == 0.0 {
        return Err(Error::DegeneratePlane);
    }
    scale(nu / nv, &mut v);
    Ok(PlaneSpec { a: a.clone(), b: b.clone(), u, v, seed })
}

impl PlaneSpec {
    pub fn anchor_a(&self) -> &ParamVector<f32> {
        &self.a
    }

    pub fn anchor_b(&self) -> &ParamVector<f32> {
        &self.b
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `(1−α)·A + α·B + β·v`, which equals `A + α·u + β·v`.
    /// Terms with a zero coefficient are skipped, so both anchors come back bitwise.
    pub fn point_at_f64(&self, alpha: f64, beta: f64) -> Vec<f64> {
        let a = self.a.values();
        let b = self.b.values();
        let mut out = vec![0.0f64; a.len()];
        let wa = 1.0 - alpha;
        for i in 0..out.len() {
            // 1 − α = 0 exactly iff α = 1
            let mut x = if wa != 0.0 { wa * a[i] as f64 } else { b[i] as f64 };
            if wa != 0.0 && alpha != 0.0 {
                x += alpha * b[i] as f64;
            }
            if beta != 0.0 {
                x += beta * self.v[i];
            }
            out[i] = x;
        }
        out
    }

    pub fn point_at(&self, alpha: f64, beta: f64) -> ParamVector<f32> {
        let values = self.point_at_f64(alpha, beta).into_iter().map(|x| x as f32).collect();
        self.a.with_values(values).expect("point has the anchor length")
    }

    pub fn metadata(&self) -> PlaneMetadata {
        PlaneMetadata {
            seed: self.seed,
            params: self.u.len(),
            norm_u: norm(&self.u),
            norm_v: norm(&self.v),
            u_dot_v: dot(&self.u, &self.v),
            anchor_a_sha256: values_digest(self.a.values()),
            anchor_b_sha256: values_digest(self.b.values()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ModelConfig, Network};
    use proptest::prelude::*;

    fn toy3() -> Network {
        // 2 inputs → 1 output: 2 weights and 1 bias
        Network::new(ModelConfig::mlp("p", 2, &[], 1)).unwrap()
    }

    #[test]
    fn unit_axis_geometry() {
        let n = toy3();
        let a = ParamVector::<f32>::zeros(n.layout().clone());
        let b = a.with_values(vec![1.0, 0.0, 0.0]).unwrap();
        let p = build_plane(&a, &b, 5).unwrap();
        assert_eq!(p.u(), &[1.0, 0.0, 0.0]);
        assert!(p.v()[0].abs() < 1e-15);
        assert!((norm(p.v()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seeds_change_v_not_u() {
        let n = toy3();
        let a = n.init_params(1);
        let b = n.init_params(2);
        let p = build_plane(&a, &b, 1).unwrap();
        let q = build_plane(&a, &b, 2).unwrap();
        assert_eq!(p.u(), q.u());
        assert_ne!(p.v(), q.v());
    }

    #[test]
    fn identical_anchors_rejected() {
        let a = toy3().init_params(1);
        assert!(matches!(build_plane(&a, &a, 0), Err(Error::DegeneratePlane)));
    }

    #[test]
    fn midpoint_on_one_parameter() {
        let n = Network::new(ModelConfig::mlp("m", 1, &[], 1)).unwrap();
        let a = ParamVector::<f32>::new(n.layout().clone(), vec![1.0, 0.0]).unwrap();
        let b = a.with_values(vec![3.0, 0.0]).unwrap();
        let p = build_plane(&a, &b, 0).unwrap();
        assert_eq!(p.point_at(0.5, 0.0).values()[0], 2.0);
    }

    #[test]
    fn signed_zero_anchors_are_bitwise() {
        let n = toy3();
        let a = ParamVector::<f32>::new(n.layout().clone(), vec![-0.0, 1.0, 2.0]).unwrap();
        let b = a.with_values(vec![0.5, -0.0, 2.0]).unwrap();
        let p = build_plane(&a, &b, 3).unwrap();
        let bits = |x: &ParamVector<f32>| x.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.point_at(0.0, 0.0)), bits(&a));
        assert_eq!(bits(&p.point_at(1.0, 0.0)), bits(&b));
    }

    proptest! {
        #[test]
        fn plane_invariants(seed in any::<u64>(), s1 in 0u64..1000, s2 in 1000u64..2000) {
            let n = Network::new(ModelConfig::mlp("q", 6, &[5], 3)).unwrap();
            let a = n.init_params(s1);
            let b = n.init_params(s2);
            let p = build_plane(&a, &b, seed).unwrap();
            let uu = dot(p.u(), p.u());
            prop_assert!(dot(p.u(), p.v()).abs() / uu < 1e-10);
            prop_assert!((norm(p.v()) / norm(p.u()) - 1.0).abs() < 1e-12);
            prop_assert_eq!(p.point_at(0.0, 0.0), a);
            prop_assert_eq!(p.point_at(1.0, 0.0), b);
            let m = p.metadata();
            prop_assert_eq!(m.params, n.num_params());
        }
    }
}

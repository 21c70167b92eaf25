//! Seeded synthetic instances of the model `y = Xβ₀ + ε`, `ε ~ N(0, σ² Id)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blocks::{normalize_blocks, BlockPartition, BlockSupport, Design};
use crate::error::{Error, Result};
use crate::solver::Problem;

/// Smallest admissible singular value of a generated design.
const MIN_SINGULAR_VALUE: f64 = 1e-6;
const MAX_RETRIES: usize = 100;
/// ChaCha20 stream reserved for the design and `β₀`; observation streams are below it.
const GENERATION_STREAM: u64 = u64::MAX;

fn default_signal_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(rename = "Q")]
    pub q: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub block_sizes: Vec<usize>,
    pub k_active: usize,
    #[serde(default = "default_signal_scale")]
    pub signal_scale: f64,
    pub sigma: f64,
    pub seed: u64,
    /// Use `X = Id` (requires `Q = N`) instead of a random design.
    #[serde(default)]
    pub identity: bool,
}

impl ScenarioSpec {
    /// `n_blocks` blocks of size `block_size`, `N = n_blocks * block_size`.
    pub fn uniform(
        q: usize,
        n_blocks: usize,
        block_size: usize,
        k_active: usize,
        sigma: f64,
        seed: u64,
    ) -> Self {
        Self {
            q,
            n: n_blocks * block_size,
            block_sizes: vec![block_size; n_blocks],
            k_active,
            signal_scale: 1.0,
            sigma,
            seed,
            identity: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.block_sizes.iter().sum::<usize>() != self.n {
            return bad(format!("block sizes do not sum to N = {}", self.n));
        }
        if self.identity {
            if self.q != self.n {
                return bad(format!("identity design needs Q = N (got {} and {})", self.q, self.n));
            }
        } else if self.q <= self.n {
            return bad(format!("need Q > N (got Q = {}, N = {})", self.q, self.n));
        }
        if self.k_active > self.block_sizes.len() {
            return bad(format!(
                "k_active = {} exceeds the {} blocks",
                self.k_active,
                self.block_sizes.len()
            ));
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.signal_scale > 0.0) {
            return bad(format!("signal_scale must be positive, got {}", self.signal_scale));
        }
        Ok(())
    }
}

/// A generated instance with its ground truth.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub design: Arc<Design>,
    pub partition: Arc<BlockPartition>,
    pub beta0: DVector<f64>,
    pub mu0: DVector<f64>,
    pub sigma: f64,
    pub seed: u64,
}

impl Scenario {
    /// Noisy observations `μ₀ + σ·z` from a ChaCha20 stream keyed by `(seed, stream)`.
    pub fn observe(&self, seed: u64, stream: u64) -> DVector<f64> {
        assert!(stream < GENERATION_STREAM, "stream {stream} is reserved");
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let z = standard_normal_vector(&mut rng, self.mu0.len());
        &self.mu0 + z * self.sigma
    }

    pub fn problem(&self, y: DVector<f64>, lambda: f64) -> Result<Problem> {
        Problem::new(Arc::clone(&self.design), Arc::clone(&self.partition), y, lambda)
    }
}

pub fn standard_normal_vector<R: Rng>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

pub fn generate(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    rng.set_stream(GENERATION_STREAM);
    let partition = Arc::new(BlockPartition::contiguous(&spec.block_sizes)?);

    let design = if spec.identity {
        Design::identity(spec.n)
    } else {
        random_design(&mut rng, spec.q, spec.n)?
    };

    let mut beta0 = DVector::zeros(spec.n);
    let mut chosen = index::sample(&mut rng, partition.num_blocks(), spec.k_active).into_vec();
    chosen.sort_unstable();
    for b in chosen {
        let block = partition.block(b);
        let mut dir = standard_normal_vector(&mut rng, block.len());
        while dir.norm() == 0.0 {
            dir = standard_normal_vector(&mut rng, block.len());
        }
        dir *= spec.signal_scale / dir.norm();
        for (k, &i) in block.iter().enumerate() {
            beta0[i] = dir[k];
        }
    }
    let mu0 = design.matrix() * &beta0;
    Ok(Scenario {
        design: Arc::new(design),
        partition,
        beta0,
        mu0,
        sigma: spec.sigma,
        seed: spec.seed,
    })
}

/// I.i.d. `N(0, 1/Q)` entries, redrawn until the smallest singular value clears the floor.
fn random_design<R: Rng>(rng: &mut R, q: usize, n: usize) -> Result<Design> {
    let scale = 1.0 / (q as f64).sqrt();
    for _ in 0..MAX_RETRIES {
        let x = DMatrix::from_fn(q, n, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
        let smallest = x.clone().svd(false, false).singular_values.min();
        if smallest > MIN_SINGULAR_VALUE {
            if let Ok(design) = Design::new(x) {
                return Ok(design);
            }
        }
    }
    Err(Error::Generation(format!(
        "no full-rank {q}x{n} design after {MAX_RETRIES} draws"
    )))
}

/// Builds an observation on the transition set: `β` is the solution with
/// support `bs(β)`, and the inactive block `boundary_block` has its dual
/// constraint exactly tight, `‖X_b^T (y − Xβ)‖ = λ`, in direction `direction`.
///
/// The residual is the minimum-norm `r` with `X_I^T r = λ n(β_I)` and
/// `X_b^T r = λ u`. Fails when another inactive block would violate its
/// constraint, since `β` would then not be the solution.
pub fn transition_observation(
    design: &Design,
    partition: &Arc<BlockPartition>,
    beta: &DVector<f64>,
    boundary_block: usize,
    direction: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    let active: Vec<usize> = (0..partition.num_blocks())
        .filter(|&b| partition.block_norm(beta, b) > 0.0)
        .collect();
    if active.contains(&boundary_block) {
        return Err(Error::InvalidParameter(format!(
            "boundary block {boundary_block} is active"
        )));
    }
    if direction.len() != partition.block(boundary_block).len() || direction.norm() == 0.0 {
        return Err(Error::InvalidParameter("bad boundary direction".into()));
    }
    let support = BlockSupport::new(Arc::clone(partition), active.clone())?;
    let normalized = normalize_blocks(&support, &support.restrict(beta))?;

    let mut tight = active.clone();
    tight.push(boundary_block);
    let tight = BlockSupport::new(Arc::clone(partition), tight)?;
    let mut target = DVector::zeros(tight.active_dim());
    let unit = direction / direction.norm();
    for (b, range) in tight.compact_ranges() {
        let values = if b == boundary_block {
            unit.clone()
        } else {
            let (_, r) = support
                .compact_ranges()
                .into_iter()
                .find(|(a, _)| *a == b)
                .expect("active block has a range");
            normalized.rows_range(r).into_owned()
        };
        target.rows_range_mut(range).copy_from(&(values * lambda));
    }
    let x_j = tight.columns(design.matrix());
    let chol = x_j
        .tr_mul(&x_j)
        .cholesky()
        .ok_or_else(|| Error::Factorization("X_J^T X_J not positive definite".into()))?;
    let r = &x_j * chol.solve(&target);

    let corr = design.matrix().tr_mul(&r);
    for b in support.inactive().filter(|&b| b != boundary_block) {
        let norm = partition.block_norm(&corr, b);
        if norm > lambda {
            return Err(Error::Generation(format!(
                "block {b} would violate its dual constraint ({norm} > {lambda})"
            )));
        }
    }
    Ok(design.matrix() * beta + r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::block_support;
    use crate::blocks::Coefficients;

    #[test]
    fn zero_active_blocks_give_zero_signal() {
        let s = generate(&ScenarioSpec::uniform(20, 5, 2, 0, 0.5, 1)).unwrap();
        assert_eq!(s.beta0.amax(), 0.0);
        assert_eq!(s.mu0.amax(), 0.0);
    }

    #[test]
    fn identity_mode() {
        let spec = ScenarioSpec {
            identity: true,
            ..ScenarioSpec::uniform(6, 3, 2, 2, 0.5, 3)
        };
        let s = generate(&spec).unwrap();
        assert!(s.design.is_identity());
        assert_eq!(s.mu0, s.beta0);
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = ScenarioSpec::uniform(20, 5, 2, 2, 0.5, 42);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.design.matrix(), b.design.matrix());
        assert_eq!(a.beta0, b.beta0);
        assert_eq!(a.observe(7, 3), b.observe(7, 3));
        assert_ne!(a.observe(7, 3), a.observe(7, 4));
        // noise from the scenario's own seed is not a replay of the design draws
        let z = (a.observe(42, 0) - &a.mu0) / 0.5;
        let first_column = a.design.matrix().column(0) * 20f64.sqrt();
        assert!((z - first_column).amax() > 1e-3);
        let c = generate(&ScenarioSpec::uniform(20, 5, 2, 2, 0.5, 43)).unwrap();
        assert_ne!(a.design.matrix(), c.design.matrix());
    }

    #[test]
    fn active_blocks_and_scale() {
        for seed in 0..20 {
            let mut spec = ScenarioSpec::uniform(30, 6, 3, 3, 1.0, seed);
            spec.signal_scale = 2.5;
            let s = generate(&spec).unwrap();
            let coeffs = Coefficients::new(s.beta0.clone(), Arc::clone(&s.partition)).unwrap();
            let support = block_support(&coeffs, 0.0);
            assert_eq!(support.active().len(), 3);
            for &b in support.active() {
                assert!((coeffs.block_norm(b) - 2.5).abs() < 1e-12);
            }
            let min_sv = s.design.matrix().clone().svd(false, false).singular_values.min();
            assert!(min_sv > MIN_SINGULAR_VALUE);
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(generate(&ScenarioSpec::uniform(10, 5, 2, 0, 0.5, 1)).is_err());
        assert!(generate(&ScenarioSpec::uniform(20, 5, 2, 6, 0.5, 1)).is_err());
        assert!(generate(&ScenarioSpec::uniform(20, 5, 2, 1, 0.0, 1)).is_err());
        let mut spec = ScenarioSpec::uniform(20, 5, 2, 1, 0.5, 1);
        spec.n = 9;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn spec_json_uses_upper_case_dims() {
        let spec: ScenarioSpec = serde_json::from_str(
            r#"{"Q":20,"N":10,"block_sizes":[2,2,2,2,2],"k_active":2,"sigma":0.5,"seed":42}"#,
        )
        .unwrap();
        assert_eq!(spec, ScenarioSpec::uniform(20, 5, 2, 2, 0.5, 42));
    }
}

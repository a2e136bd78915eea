use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NodeId, ParamStore, Real, Tape, TensorError};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: Real,
    pub tolerance: Real,
    /// Denominator floor for the relative error, so that near-zero gradients
    /// are compared on an absolute scale.
    pub floor: Real,
    /// Probe at most this many entries per parameter (chosen with `seed`).
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            floor: 1e-2,
            max_probes: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: Real,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: Real,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> Real {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, Real::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

/// Compares reverse-mode gradients of the scalar produced by `build` with
/// central finite differences, parameter by parameter.
pub fn check_gradients<F>(params: &ParamStore, build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape) -> Result<NodeId, TensorError>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<Real, TensorError> {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for id in params.ids() {
        let n = params.get(id).len();
        let probes: Vec<usize> = match cfg.max_probes {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut worst: Real = 0.0;
        for &i in &probes {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + cfg.step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - cfg.step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let exact = analytic.get(id).data()[i];
            let denom = exact.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max((exact - numeric).abs() / denom);
        }
        report.push(ParamCheck {
            name: params.name(id).to_string(),
            probes: probes.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport {
        params: report,
        tolerance: cfg.tolerance,
    })
}

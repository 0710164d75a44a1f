//! Shared fixtures for the criterion benchmarks.

use std::sync::Arc;

use gpssm::benchmark::{benchmark_fic, benchmark_model_config, BenchmarkSpec};
use gpssm::fic::{select_inducing, InducingSet};
use gpssm::model::{Dataset, GpSsmModel, GpTransition};
use gpssm::pgas::PriorKind;

pub struct Fixture {
    pub model: GpSsmModel,
    pub data: Dataset,
    pub truth: Vec<Vec<f64>>,
    pub gp: Arc<GpTransition>,
    pub r: f64,
}

/// Benchmark system with `t` transitions, hyperparameters at prior medians.
pub fn fixture(t: usize) -> Fixture {
    let spec = BenchmarkSpec {
        t_train: t,
        t_test: 1,
        ..BenchmarkSpec::default()
    };
    let (data, _) = spec.simulate(7).expect("simulate");
    let model = GpSsmModel::from_config(&benchmark_model_config(&spec)).expect("model");
    let theta = model.priors.medians();
    let gp = Arc::new(model.transition(&theta));
    let r = GpSsmModel::measurement_noise(&theta);
    let truth = data.states.clone().expect("states");
    Fixture {
        model,
        data,
        truth,
        gp,
        r,
    }
}

impl Fixture {
    pub fn inducing(&self, m: usize) -> Arc<InducingSet> {
        let PriorKind::Fic { strategy, .. } = benchmark_fic(m) else {
            unreachable!()
        };
        let z: Vec<Vec<f64>> = self.truth[..self.truth.len() - 1]
            .iter()
            .zip(&self.data.inputs)
            .map(|(x, u)| GpTransition::gp_input(x, u))
            .collect();
        let u = select_inducing(&z, m, &strategy, 0).expect("inducing");
        Arc::new(InducingSet::new(self.gp.clone(), u).expect("inducing set"))
    }
}

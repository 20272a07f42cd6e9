//! Federated averaging over a set of clients, with the desk-scale learning
//! tasks it runs on.

mod fedavg;
mod params;
mod partition;
mod quadratic;
mod synthetic;

pub use fedavg::{
    aggregate, aggregated_gradient, gradient_deviation, local_train, sample_batch,
    LocalTrainConfig, RoundRecord,
};
pub use params::ParamVector;
pub use partition::{dirichlet_partition, DatasetPartition};
pub use quadratic::{QuadraticConfig, QuadraticSample, QuadraticTask};
pub use synthetic::{
    make_synthetic_task, ClassificationTask, Evaluation, LabeledData, ModelKind, SyntheticConfig,
    SyntheticTask,
};

/// A federated objective `F(w) = (1/N) sum_n F_n(w)` where each client
/// objective is the mean per-sample loss over its local dataset. Batches
/// are lists of positions within a client's local dataset.
pub trait LearningTask {
    fn dim(&self) -> usize;

    fn clients(&self) -> usize;

    fn client_size(&self, client: usize) -> usize;

    /// Mean loss over the given local samples.
    fn loss(&self, w: &ParamVector, client: usize, batch: &[usize]) -> f64;

    /// Mean per-sample gradient over the given local samples.
    fn stochastic_gradient(&self, w: &ParamVector, client: usize, batch: &[usize]) -> ParamVector;

    fn full_gradient_client(&self, w: &ParamVector, client: usize) -> ParamVector {
        let all: Vec<usize> = (0..self.client_size(client)).collect();
        self.stochastic_gradient(w, client, &all)
    }

    fn full_gradient_global(&self, w: &ParamVector) -> ParamVector {
        let grads: Vec<ParamVector> =
            (0..self.clients()).map(|n| self.full_gradient_client(w, n)).collect();
        ParamVector::mean(&grads, self.dim())
    }

    fn client_objective(&self, w: &ParamVector, client: usize) -> f64 {
        let all: Vec<usize> = (0..self.client_size(client)).collect();
        self.loss(w, client, &all)
    }

    fn global_objective(&self, w: &ParamVector) -> f64 {
        (0..self.clients())
            .map(|n| self.client_objective(w, n))
            .sum::<f64>()
            / self.clients() as f64
    }
}

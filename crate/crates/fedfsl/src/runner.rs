use fedfsl_core::federation::{ClientOutcome, ClientRunner};
use fedfsl_core::Result;
use rayon::prelude::*;

/// Runs the clients of a round on a rayon pool. Results are collected in
/// client order, so runs are identical to sequential execution.
#[derive(Debug)]
pub struct ParallelClients {
    pool: Option<rayon::ThreadPool>,
}

impl ParallelClients {
    /// `threads = 0` uses the global pool.
    pub fn new(threads: usize) -> anyhow::Result<Self> {
        let pool = if threads == 0 {
            None
        } else {
            Some(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
        };
        Ok(Self { pool })
    }
}

impl ClientRunner for ParallelClients {
    fn run(&self, clients: usize, job: &(dyn Fn(usize) -> Result<ClientOutcome> + Sync)) -> Vec<Result<ClientOutcome>> {
        let go = || (0..clients).into_par_iter().map(job).collect();
        match &self.pool {
            Some(p) => p.install(go),
            None => go(),
        }
    }
}

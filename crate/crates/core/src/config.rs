//! Settings shared by the data-preparation, preference and inference stages.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{truncate_context, Utterance, DEFAULT_WINDOW};
use crate::scorer::SamplingParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Most recent turns kept in every prompt.
    pub window: usize,
    /// Sampling settings for parser and clarification-model draws.
    pub sampling: SamplingParams,
    /// Clarifications sampled per instance (n).
    pub clarifications: usize,
    /// Parser predictions per voting round (o).
    pub trials: usize,
    /// Instances processed concurrently; 1 means sequential.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            window: DEFAULT_WINDOW,
            sampling: SamplingParams::default(),
            clarifications: 5,
            trials: 10,
            workers: 1,
        }
    }
}

impl PipelineConfig {
    pub fn window<'a>(&self, context: &'a [Utterance]) -> &'a [Utterance] {
        truncate_context(context, self.window)
    }

    /// Maps `f` over `items` in order, on a dedicated pool when `workers > 1`.
    pub(crate) fn map_ordered<I, R, F>(&self, items: &[I], f: F) -> Vec<R>
    where
        I: Sync,
        R: Send,
        F: Fn(&I) -> R + Sync + Send,
    {
        if self.workers <= 1 {
            return items.iter().map(f).collect();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(self.workers).build() {
            Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            Err(e) => {
                log::warn!("falling back to sequential processing: {e}");
                items.iter().map(f).collect()
            }
        }
    }
}

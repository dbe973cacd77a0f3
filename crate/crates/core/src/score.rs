use crate::error::Result;
use crate::model::{RewardModel, Token};

/// Anything that assigns a scalar reward to a (prompt, response) pair.
pub trait RewardScorer: Sync {
    fn score(&self, prompt: &[Token], response: &[Token]) -> Result<f64>;
}

impl RewardScorer for RewardModel {
    fn score(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        self.reward_score(prompt, response)
    }
}

impl<T: RewardScorer + ?Sized> RewardScorer for &T {
    fn score(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        (**self).score(prompt, response)
    }
}

impl<T: RewardScorer + ?Sized + Send> RewardScorer for Box<T> {
    fn score(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        (**self).score(prompt, response)
    }
}

/// Adapts a closure into a scorer.
pub struct FnScorer<F>(pub F);

impl<F> RewardScorer for FnScorer<F>
where
    F: Fn(&[Token], &[Token]) -> Result<f64> + Sync,
{
    fn score(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        (self.0)(prompt, response)
    }
}

use crate::runtime::Environment;

use super::PipelineError;

/// Destinations for the `sequence`-th message (1-based): production always,
/// staging on every `n`-th.
pub fn sample_split(sequence: u64, n: u64) -> Result<Vec<Environment>, PipelineError> {
    if n == 0 {
        return Err(PipelineError::InvalidN);
    }
    let mut out = vec![Environment::Production];
    if sequence.is_multiple_of(n) {
        out.push(Environment::Staging);
    }
    Ok(out)
}

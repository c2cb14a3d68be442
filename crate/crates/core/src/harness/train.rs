//! Offline retraining against a persisted store.

use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use crate::clock::{chrono_duration, SharedClock};
use crate::pipeline::serving::{build_training_set, retrain, ModelSlot, RetrainOutcome};
use crate::pipeline::PipelineSettings;
use crate::runtime::Environment;
use crate::store::{Store, TimeWindow};

use super::HarnessError;

/// Training window: all history or the trailing duration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowSpec {
    All,
    Last(Duration),
}

impl FromStr for WindowSpec {
    type Err = String;

    /// `all` or `<n><unit>` with unit `s`, `m`, `h` or `d`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(WindowSpec::All);
        }
        let bad = || format!("bad window {s:?}, expected all or <n>s|m|h|d");
        let unit = s.chars().last().ok_or_else(bad)?;
        let n: u64 = s[..s.len() - unit.len_utf8()].parse().map_err(|_| bad())?;
        let secs = match unit {
            's' => n,
            'm' => n * 60,
            'h' => n * 3600,
            'd' => n * 86_400,
            _ => return Err(bad()),
        };
        if secs == 0 {
            return Err(bad());
        }
        Ok(WindowSpec::Last(Duration::from_secs(secs)))
    }
}

impl WindowSpec {
    pub fn resolve(self, clock: &SharedClock) -> TimeWindow {
        match self {
            WindowSpec::All => TimeWindow::all(),
            WindowSpec::Last(d) => {
                let now = clock.now();
                TimeWindow::between(now - chrono_duration(d), now)
            }
        }
    }
}

/// Builds a training set from the production incidents in `store` and
/// retrains the persisted model.
pub fn train(
    store: &Store,
    settings: &PipelineSettings,
    window: WindowSpec,
) -> Result<RetrainOutcome, HarnessError> {
    let scoped = store.scoped(Environment::Production.namespace());
    let slot = ModelSlot::new();
    slot.load_if_empty(&scoped)?;
    let ticket = build_training_set(&scoped, &settings.featurizer, window.resolve(store.clock()))?;
    Ok(retrain(&scoped, &slot, &ticket, &settings.retrain, store.clock().now())?)
}

/// [`train`] on the store persisted under `data_dir`.
pub fn train_data_dir(
    data_dir: &Path,
    clock: SharedClock,
    settings: &PipelineSettings,
    window: WindowSpec,
) -> Result<RetrainOutcome, HarnessError> {
    let store = Store::open(clock, data_dir.join("store"))?;
    train(&store, settings, window)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_specs_parse() {
        assert_eq!("all".parse::<WindowSpec>().unwrap(), WindowSpec::All);
        assert_eq!("90s".parse::<WindowSpec>().unwrap(), WindowSpec::Last(Duration::from_secs(90)));
        assert_eq!("15m".parse::<WindowSpec>().unwrap(), WindowSpec::Last(Duration::from_secs(900)));
        assert_eq!("6h".parse::<WindowSpec>().unwrap(), WindowSpec::Last(Duration::from_secs(21_600)));
        assert_eq!("7d".parse::<WindowSpec>().unwrap(), WindowSpec::Last(Duration::from_secs(604_800)));
        for bad in ["", "h", "0h", "3w", "x3h", "-1d"] {
            assert!(bad.parse::<WindowSpec>().is_err(), "{bad}");
        }
    }
}

//! Forecast schedules: which past frames feed the model and which future
//! frame it predicts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame-index schedule for one forecasting horizon.
///
/// `input_indices` are strictly increasing with constant spacing `d`;
/// `target_index = last input + d_prime`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastSetting {
    pub name: String,
    pub input_indices: Vec<usize>,
    pub target_index: usize,
    pub d: usize,
    pub d_prime: usize,
}

impl ForecastSetting {
    pub fn new(
        name: impl Into<String>,
        input_indices: Vec<usize>,
        target_index: usize,
    ) -> Result<Self> {
        if input_indices.len() < 2 {
            return Err(Error::Config(
                "a forecast setting needs at least two input indices".into(),
            ));
        }
        let d = input_indices[1] - input_indices[0];
        if d == 0 || !input_indices.windows(2).all(|w| w[1] == w[0] + d) {
            return Err(Error::Config(format!(
                "input indices {input_indices:?} must be strictly increasing with constant spacing"
            )));
        }
        let last = *input_indices.last().unwrap();
        if target_index <= last {
            return Err(Error::Config(format!(
                "target index {target_index} must come after the last input index {last}"
            )));
        }
        Ok(ForecastSetting {
            name: name.into(),
            d,
            d_prime: target_index - last,
            input_indices,
            target_index,
        })
    }

    /// The most recent `n` input indices (used by the fewer-input-frames
    /// variants, which keep the suffix of the schedule).
    pub fn input_suffix(&self, n: usize) -> Result<&[usize]> {
        if n < 2 || n > self.input_indices.len() {
            return Err(Error::Config(format!(
                "cannot take {n} input frames from a schedule of {}",
                self.input_indices.len()
            )));
        }
        Ok(&self.input_indices[self.input_indices.len() - n..])
    }
}

/// One of the three built-in horizons: `short`, `mid`, or `long`.
pub fn builtin_setting(name: &str) -> Result<ForecastSetting> {
    match name {
        "short" => ForecastSetting::new("short", vec![15, 16, 17, 18], 19),
        "mid" => ForecastSetting::new("mid", vec![7, 10, 13, 16], 19),
        "long" => ForecastSetting::new("long", vec![1, 4, 7, 10], 19),
        other => Err(Error::Config(format!(
            "unknown forecast setting '{other}' (expected short, mid, or long)"
        ))),
    }
}

pub const BUILTIN_SETTINGS: [&str; 3] = ["short", "mid", "long"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_short() {
        let s = builtin_setting("short").unwrap();
        assert_eq!(s.input_indices, vec![15, 16, 17, 18]);
        assert_eq!(s.target_index, 19);
        assert_eq!((s.d, s.d_prime), (1, 1));
    }

    #[test]
    fn builtin_mid() {
        let s = builtin_setting("mid").unwrap();
        assert_eq!(s.input_indices, vec![7, 10, 13, 16]);
        assert_eq!(s.target_index, 19);
        assert_eq!((s.d, s.d_prime), (3, 3));
    }

    #[test]
    fn builtin_long() {
        let s = builtin_setting("long").unwrap();
        assert_eq!(s.input_indices, vec![1, 4, 7, 10]);
        assert_eq!(s.target_index, 19);
        assert_eq!((s.d, s.d_prime), (3, 9));
    }

    #[test]
    fn unknown_name_is_config_error() {
        assert!(matches!(builtin_setting("weekly"), Err(Error::Config(_))));
    }

    #[test]
    fn uneven_spacing_rejected() {
        assert!(ForecastSetting::new("x", vec![1, 2, 4], 5).is_err());
    }

    #[test]
    fn suffix_rule() {
        let s = builtin_setting("mid").unwrap();
        assert_eq!(s.input_suffix(2).unwrap(), &[13, 16]);
        assert_eq!(s.input_suffix(4).unwrap(), &[7, 10, 13, 16]);
        assert!(s.input_suffix(5).is_err());
        assert!(s.input_suffix(1).is_err());
    }
}

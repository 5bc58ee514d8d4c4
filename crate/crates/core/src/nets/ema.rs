use super::params::ParameterSet;
use crate::error::{Error, Result};

/// Exponential moving average of a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaShadow {
    pub shadow: ParameterSet,
    pub decay: f64,
}

impl EmaShadow {
    pub fn new(initial: &ParameterSet, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!(
                "EMA decay {decay} outside [0, 1]"
            )));
        }
        Ok(Self {
            shadow: initial.clone(),
            decay,
        })
    }

    /// `shadow ← d·shadow + (1 − d)·current`, elementwise.
    pub fn update(&mut self, current: &ParameterSet) -> Result<()> {
        ema_update(&mut self.shadow, current, self.decay)
    }
}

/// In-place EMA step on a bare parameter set.
pub fn ema_update(shadow: &mut ParameterSet, current: &ParameterSet, decay: f64) -> Result<()> {
    shadow.check_layout(current, "EMA update")?;
    for ((_, s), (_, c)) in shadow.iter_mut().zip(current.iter()) {
        s.zip_mut_with(c, |sv, &cv| *sv = decay * *sv + (1.0 - decay) * cv);
    }
    shadow.set_version(current.version());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use proptest::prelude::*;

    fn scalar(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", ArrayD::from_elem(IxDyn(&[1]), v)).unwrap();
        p
    }

    fn value(p: &ParameterSet) -> f64 {
        p.get("w").unwrap()[[0]]
    }

    #[test]
    fn closed_form_cases() {
        for (d, expected) in [(0.0, 3.0), (1.0, 5.0)] {
            let mut ema = EmaShadow::new(&scalar(5.0), d).unwrap();
            ema.update(&scalar(3.0)).unwrap();
            assert_eq!(value(&ema.shadow), expected);
        }
        let mut ema = EmaShadow::new(&scalar(1.0), 0.9).unwrap();
        ema.update(&scalar(0.0)).unwrap();
        assert!((value(&ema.shadow) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn mismatched_names_rejected() {
        let mut ema = EmaShadow::new(&scalar(1.0), 0.5).unwrap();
        let mut other = ParameterSet::new();
        other
            .insert("v", ArrayD::from_elem(IxDyn(&[1]), 0.0))
            .unwrap();
        assert!(ema.update(&other).is_err());
    }

    #[test]
    fn invalid_decay_rejected() {
        assert!(EmaShadow::new(&scalar(0.0), 1.5).is_err());
        assert!(EmaShadow::new(&scalar(0.0), -0.1).is_err());
    }

    #[test]
    fn matches_geometric_average_of_trajectory() {
        // shadow_T = d^T p0 + (1-d) Σ_t d^(T-t) p_t
        let d: f64 = 0.8;
        let trajectory = [0.5, -1.0, 2.0, 0.25, 3.0, -0.75];
        let mut ema = EmaShadow::new(&scalar(1.0), d).unwrap();
        for &p in &trajectory {
            ema.update(&scalar(p)).unwrap();
        }
        let t = trajectory.len() as i32;
        let mut expected = d.powi(t) * 1.0;
        for (i, &p) in trajectory.iter().enumerate() {
            expected += (1.0 - d) * d.powi(t - 1 - i as i32) * p;
        }
        assert!((value(&ema.shadow) - expected).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn update_is_elementwise_convex_combination(d in 0.0f64..=1.0, s in -10.0f64..10.0, c in -10.0f64..10.0) {
            let mut ema = EmaShadow::new(&scalar(s), d).unwrap();
            ema.update(&scalar(c)).unwrap();
            prop_assert_eq!(value(&ema.shadow), d * s + (1.0 - d) * c);
        }
    }
}

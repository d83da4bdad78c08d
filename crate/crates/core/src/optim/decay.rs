//! Weight decay, applied multiplicatively after the update:
//! `x <- x + update - lambda * x_pre`.
//!
//! Decay depends on parameter values, not only on gradients, so it behaves
//! differently depending on which parameters are trainable. The transformed
//! view decays the full weight; the adapter view decays only the adapter. The
//! matched modes reproduce the other view's behaviour exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "lambda", rename_all = "snake_case")]
pub enum DecayMode {
    #[default]
    None,
    /// Decay the full weight in the transformed-gradient trainer.
    TransformedView(f64),
    /// Decay only the adapter in the adapter trainer.
    AdapterView(f64),
    /// Adapter trainer that also decays the frozen base, matching
    /// `TransformedView`.
    AdapterMatched(f64),
    /// Transformed trainer that tracks the implied adapter as auxiliary state
    /// and decays only that component, matching `AdapterView`.
    TransformedMatched(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayView {
    Transformed,
    Adapter,
}

impl DecayView {
    fn name(self) -> &'static str {
        match self {
            DecayView::Transformed => "transformed",
            DecayView::Adapter => "adapter",
        }
    }
}

impl DecayMode {
    pub fn lambda(&self) -> f64 {
        match *self {
            DecayMode::None => 0.0,
            DecayMode::TransformedView(l)
            | DecayMode::AdapterView(l)
            | DecayMode::AdapterMatched(l)
            | DecayMode::TransformedMatched(l) => l,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecayMode::None => "none",
            DecayMode::TransformedView(_) => "transformed_view",
            DecayMode::AdapterView(_) => "adapter_view",
            DecayMode::AdapterMatched(_) => "adapter_matched",
            DecayMode::TransformedMatched(_) => "transformed_matched",
        }
    }

    /// The decay each trainer gets when left alone.
    pub fn natural(view: DecayView, lambda: f64) -> Self {
        match view {
            DecayView::Transformed => DecayMode::TransformedView(lambda),
            DecayView::Adapter => DecayMode::AdapterView(lambda),
        }
    }

    /// Checks that this mode is meaningful for a trainer of the given view.
    pub fn validate(&self, view: DecayView) -> Result<()> {
        if self.lambda() < 0.0 {
            return Err(Error::Config(format!("decay lambda must be >= 0, got {}", self.lambda())));
        }
        let ok = match (self, view) {
            (DecayMode::None, _) => true,
            (DecayMode::TransformedView(_) | DecayMode::TransformedMatched(_), DecayView::Transformed) => true,
            (DecayMode::AdapterView(_) | DecayMode::AdapterMatched(_), DecayView::Adapter) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::DecayView {
                mode: self.name(),
                view: view.name(),
            })
        }
    }

    pub fn needs_aux_state(&self) -> bool {
        matches!(self, DecayMode::TransformedMatched(_))
    }
}

/// One layer's worth of decay inputs, after the optimizer update has already
/// been added.
pub enum DecayTarget<'a> {
    Transformed {
        weight: &'a mut Matrix,
        /// Weight before this step's update.
        pre_update: &'a Matrix,
        /// `Sᵀ Λ_eff` before this step's update; required by
        /// `TransformedMatched`.
        aux_back: Option<&'a Matrix>,
    },
    Adapter {
        adapter: &'a mut Matrix,
        /// Adapter before this step's update.
        pre_update: &'a Matrix,
        /// Frozen base weight; required by `AdapterMatched`.
        base: Option<&'a mut Matrix>,
    },
}

pub fn apply_decay(mode: DecayMode, target: DecayTarget<'_>) -> Result<()> {
    let view = match target {
        DecayTarget::Transformed { .. } => DecayView::Transformed,
        DecayTarget::Adapter { .. } => DecayView::Adapter,
    };
    mode.validate(view)?;
    let lambda = mode.lambda();
    if lambda == 0.0 {
        return Ok(());
    }
    match (mode, target) {
        (
            DecayMode::TransformedView(_),
            DecayTarget::Transformed {
                weight, pre_update, ..
            },
        ) => weight.axpy(-lambda, pre_update),
        (DecayMode::TransformedMatched(_), DecayTarget::Transformed { weight, aux_back, .. }) => {
            let aux = aux_back.ok_or(Error::MissingDecayState("transformed_matched"))?;
            weight.axpy(-lambda, aux)
        }
        (
            DecayMode::AdapterView(_),
            DecayTarget::Adapter {
                adapter, pre_update, ..
            },
        ) => adapter.axpy(-lambda, pre_update),
        (
            DecayMode::AdapterMatched(_),
            DecayTarget::Adapter {
                adapter,
                pre_update,
                base,
            },
        ) => {
            let base = base.ok_or(Error::MissingDecayState("adapter_matched"))?;
            let decayed = base.scale(lambda);
            base.axpy(-1.0, &decayed)?;
            adapter.axpy(-lambda, pre_update)
        }
        _ => unreachable!("validated above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(v: f64) -> Matrix {
        Matrix::from_rows(&[&[v, 2.0 * v]])
    }

    #[test]
    fn zero_lambda_is_noop_for_every_mode() {
        for mode in [
            DecayMode::TransformedView(0.0),
            DecayMode::TransformedMatched(0.0),
        ] {
            let mut w = m(1.0);
            apply_decay(
                mode,
                DecayTarget::Transformed {
                    weight: &mut w,
                    pre_update: &m(5.0),
                    aux_back: None,
                },
            )
            .unwrap();
            assert_eq!(w, m(1.0));
        }
        for mode in [DecayMode::AdapterView(0.0), DecayMode::AdapterMatched(0.0)] {
            let mut a = m(1.0);
            let mut base = m(3.0);
            apply_decay(
                mode,
                DecayTarget::Adapter {
                    adapter: &mut a,
                    pre_update: &m(5.0),
                    base: Some(&mut base),
                },
            )
            .unwrap();
            assert_eq!(a, m(1.0));
            assert_eq!(base, m(3.0));
        }
    }

    #[test]
    fn wrong_view_is_rejected() {
        let mut w = m(1.0);
        let r = apply_decay(
            DecayMode::AdapterView(0.1),
            DecayTarget::Transformed {
                weight: &mut w,
                pre_update: &m(1.0),
                aux_back: None,
            },
        );
        assert!(matches!(r, Err(Error::DecayView { .. })));
    }

    #[test]
    fn matched_modes_need_their_state() {
        let mut w = m(1.0);
        let r = apply_decay(
            DecayMode::TransformedMatched(0.1),
            DecayTarget::Transformed {
                weight: &mut w,
                pre_update: &m(1.0),
                aux_back: None,
            },
        );
        assert!(matches!(r, Err(Error::MissingDecayState(_))));

        let mut a = m(1.0);
        let r = apply_decay(
            DecayMode::AdapterMatched(0.1),
            DecayTarget::Adapter {
                adapter: &mut a,
                pre_update: &m(1.0),
                base: None,
            },
        );
        assert!(matches!(r, Err(Error::MissingDecayState(_))));
    }

    #[test]
    fn adapter_matched_decays_base_and_adapter() {
        let mut a = m(1.0);
        let mut base = m(10.0);
        apply_decay(
            DecayMode::AdapterMatched(0.5),
            DecayTarget::Adapter {
                adapter: &mut a,
                pre_update: &m(2.0),
                base: Some(&mut base),
            },
        )
        .unwrap();
        assert_eq!(a, m(0.0));
        assert_eq!(base, m(5.0));
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(DecayMode::AdapterView(-0.1).validate(DecayView::Adapter).is_err());
    }
}

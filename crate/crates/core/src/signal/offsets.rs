use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::seeded_rng;

/// Per-packet timing offset (s) and carrier-frequency offset (Hz).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetTrace {
    pub timing_offset: Vec<f64>,
    pub cfo: Vec<f64>,
}

impl OffsetTrace {
    pub fn zero(packets: usize) -> Self {
        OffsetTrace {
            timing_offset: vec![0.0; packets],
            cfo: vec![0.0; packets],
        }
    }

    pub fn len(&self) -> usize {
        self.timing_offset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timing_offset.is_empty()
    }

    pub fn validate(&self, packets: usize) -> Result<()> {
        if self.timing_offset.len() != packets || self.cfo.len() != packets {
            return Err(invalid(format!(
                "offset trace lengths ({}, {}) must equal packet count {packets}",
                self.timing_offset.len(),
                self.cfo.len()
            )));
        }
        if self
            .timing_offset
            .iter()
            .chain(&self.cfo)
            .any(|v| !v.is_finite())
        {
            return Err(invalid("offset trace contains non-finite values"));
        }
        Ok(())
    }
}

/// Generative model for the unknown clock offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OffsetModel {
    Zero,
    /// Independent uniform draws per packet.
    IidUniform {
        timing: (f64, f64),
        cfo: (f64, f64),
    },
    /// Starts at zero; each packet adds a uniform step in `[-step, step]`.
    RandomWalk { timing_step: f64, cfo_step: f64 },
}

impl OffsetModel {
    /// Parses the model from a JSON object with a `kind` tag.
    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| Error::InvalidConfig(format!("offset model: {e}")))
    }

    fn validate(&self) -> Result<()> {
        match *self {
            OffsetModel::Zero => Ok(()),
            OffsetModel::IidUniform { timing, cfo } => {
                for (name, (lo, hi)) in [("timing", timing), ("cfo", cfo)] {
                    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                        return Err(invalid(format!("{name} bounds must satisfy lo <= hi")));
                    }
                }
                Ok(())
            }
            OffsetModel::RandomWalk {
                timing_step,
                cfo_step,
            } => {
                if !(timing_step >= 0.0 && cfo_step >= 0.0) {
                    return Err(invalid("random-walk steps must be non-negative"));
                }
                Ok(())
            }
        }
    }
}

pub fn generate_offsets(model: &OffsetModel, packets: usize, seed: u64) -> Result<OffsetTrace> {
    model.validate()?;
    let mut rng = seeded_rng(seed);
    let sample = |rng: &mut rand_chacha::ChaCha8Rng, (lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    };
    Ok(match *model {
        OffsetModel::Zero => OffsetTrace::zero(packets),
        OffsetModel::IidUniform { timing, cfo } => {
            let mut t = Vec::with_capacity(packets);
            let mut f = Vec::with_capacity(packets);
            for _ in 0..packets {
                t.push(sample(&mut rng, timing));
                f.push(sample(&mut rng, cfo));
            }
            OffsetTrace {
                timing_offset: t,
                cfo: f,
            }
        }
        OffsetModel::RandomWalk {
            timing_step,
            cfo_step,
        } => {
            let mut t = vec![0.0; packets];
            let mut f = vec![0.0; packets];
            for m in 1..packets {
                t[m] = t[m - 1] + sample(&mut rng, (-timing_step, timing_step));
                f[m] = f[m - 1] + sample(&mut rng, (-cfo_step, cfo_step));
            }
            OffsetTrace {
                timing_offset: t,
                cfo: f,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model() {
        let t = generate_offsets(&OffsetModel::Zero, 4, 0).unwrap();
        assert_eq!(t.timing_offset, vec![0.0; 4]);
        assert_eq!(t.cfo, vec![0.0; 4]);
    }

    #[test]
    fn iid_uniform_within_bounds() {
        let tc = 0.3e-6;
        let model = OffsetModel::IidUniform {
            timing: (0.0, tc),
            cfo: (-100.0, 100.0),
        };
        let t = generate_offsets(&model, 128, 1).unwrap();
        assert_eq!(t.len(), 128);
        assert!(t.timing_offset.iter().all(|&v| (0.0..=tc).contains(&v)));
        assert!(t.cfo.iter().all(|&v| (-100.0..=100.0).contains(&v)));
        // not degenerate
        assert!(t.cfo.iter().any(|&v| v.abs() > 10.0));
    }

    #[test]
    fn random_walk_steps_bounded() {
        let step = 1e-6 / 100.0;
        let model = OffsetModel::RandomWalk {
            timing_step: step,
            cfo_step: 5.0,
        };
        let t = generate_offsets(&model, 16, 7).unwrap();
        for w in t.timing_offset.windows(2) {
            assert!((w[1] - w[0]).abs() <= step);
        }
        for w in t.cfo.windows(2) {
            assert!((w[1] - w[0]).abs() <= 5.0);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let model = OffsetModel::IidUniform {
            timing: (0.0, 1e-7),
            cfo: (-10.0, 10.0),
        };
        assert_eq!(
            generate_offsets(&model, 32, 9).unwrap(),
            generate_offsets(&model, 32, 9).unwrap()
        );
    }

    #[test]
    fn unknown_model_name_rejected() {
        let err = OffsetModel::from_json(serde_json::json!({"kind": "brownian"})).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
        let ok = OffsetModel::from_json(serde_json::json!({"kind": "zero"})).unwrap();
        assert_eq!(ok, OffsetModel::Zero);
    }

    #[test]
    fn invalid_bounds_rejected() {
        let model = OffsetModel::IidUniform {
            timing: (1.0, 0.0),
            cfo: (0.0, 0.0),
        };
        assert!(generate_offsets(&model, 4, 0).is_err());
    }
}

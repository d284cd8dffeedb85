//! Multiscale permeability coefficients and forcing terms.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::GridField;

/// Closed forms available for the scalar coefficient κ (the tensor is κ·I).
#[derive(Debug, Clone, PartialEq)]
pub enum PermeabilityKind {
    Constant {
        value: f64,
    },
    /// `mean + amplitude * sin(2π x/ε)` in 1D.
    Sinusoid1d {
        mean: f64,
        amplitude: f64,
        epsilon: f64,
    },
    /// `mean + amplitude * sin(2π x/ε)` in 2D, independent of y.
    Layered2d {
        mean: f64,
        amplitude: f64,
        epsilon: f64,
    },
    /// `mean + amplitude * sin(2π x/ε) cos(2π y/ε)`.
    Checkerboard2d {
        mean: f64,
        amplitude: f64,
        epsilon: f64,
    },
    /// `offset + Σ_{m=0,1} sin(2πx/ε_{4m}) cos(2πy/ε_{4m+1}) / (2 + cos(2πx/ε_{4m+2}) sin(2πy/ε_{4m+3}))`.
    ///
    /// With `offset = 1` the coefficient dips to about −0.77 on the unit
    /// square and is rejected as non-elliptic.
    MultiScale2d {
        offset: f64,
        epsilons: [f64; 8],
    },
    /// Bilinear interpolation of nodal values; wrapped periodically when `periodic`.
    Tabulated {
        field: GridField,
        periodic: bool,
    },
}

/// A uniformly positive scalar coefficient with its recorded lower bound.
#[derive(Debug, Clone, PartialEq)]
pub struct PermeabilityField {
    kind: PermeabilityKind,
    dim: usize,
    c_min: f64,
    c_max: f64,
}

/// Lattice resolution used to bound coefficients without a closed-form minimum.
const BOUND_SAMPLES: usize = 1024;

impl PermeabilityField {
    pub fn new(kind: PermeabilityKind) -> Result<Self> {
        let (dim, c_min, c_max) = match &kind {
            PermeabilityKind::Constant { value } => (0, *value, *value),
            PermeabilityKind::Sinusoid1d {
                mean,
                amplitude,
                epsilon,
            } => {
                check_scale(*epsilon)?;
                (1, mean - amplitude.abs(), mean + amplitude.abs())
            }
            PermeabilityKind::Layered2d {
                mean,
                amplitude,
                epsilon,
            }
            | PermeabilityKind::Checkerboard2d {
                mean,
                amplitude,
                epsilon,
            } => {
                check_scale(*epsilon)?;
                (2, mean - amplitude.abs(), mean + amplitude.abs())
            }
            PermeabilityKind::MultiScale2d { epsilons, .. } => {
                for e in epsilons {
                    check_scale(*e)?;
                }
                let probe = PermeabilityField {
                    kind: kind.clone(),
                    dim: 2,
                    c_min: 0.0,
                    c_max: 0.0,
                };
                let (lo, hi, at) = probe.sampled_bounds();
                if lo <= 0.0 {
                    return Err(Error::Ellipticity {
                        position: at,
                        value: lo,
                    });
                }
                (2, lo, hi)
            }
            PermeabilityKind::Tabulated { field, .. } => {
                let v = field.values();
                let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (field.grid().dim(), lo, hi)
            }
        };
        if !(c_min > 0.0) || !c_max.is_finite() {
            return Err(Error::Ellipticity {
                position: vec![],
                value: c_min,
            });
        }
        Ok(PermeabilityField {
            kind,
            dim,
            c_min,
            c_max,
        })
    }

    pub fn constant(value: f64) -> Result<Self> {
        Self::new(PermeabilityKind::Constant { value })
    }

    /// `mean + amplitude sin(2π x/ε)` on an interval.
    pub fn sinusoid_1d(mean: f64, amplitude: f64, epsilon: f64) -> Result<Self> {
        Self::new(PermeabilityKind::Sinusoid1d {
            mean,
            amplitude,
            epsilon,
        })
    }

    pub fn layered_2d(mean: f64, amplitude: f64, epsilon: f64) -> Result<Self> {
        Self::new(PermeabilityKind::Layered2d {
            mean,
            amplitude,
            epsilon,
        })
    }

    pub fn checkerboard_2d(mean: f64, amplitude: f64, epsilon: f64) -> Result<Self> {
        Self::new(PermeabilityKind::Checkerboard2d {
            mean,
            amplitude,
            epsilon,
        })
    }

    pub fn multiscale_2d(offset: f64, epsilons: [f64; 8]) -> Result<Self> {
        Self::new(PermeabilityKind::MultiScale2d { offset, epsilons })
    }

    pub fn tabulated(field: GridField, periodic: bool) -> Result<Self> {
        Self::new(PermeabilityKind::Tabulated { field, periodic })
    }

    pub fn kind(&self) -> &PermeabilityKind {
        &self.kind
    }

    /// Spatial dimension, or 0 for a constant valid in any dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Recorded lower bound; sampled on a 1025² lattice for the multi-scale form.
    pub fn c_min(&self) -> f64 {
        self.c_min
    }

    pub fn c_max(&self) -> f64 {
        self.c_max
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let s = |t: f64| (2.0 * PI * t).sin();
        let c = |t: f64| (2.0 * PI * t).cos();
        match &self.kind {
            PermeabilityKind::Constant { value } => *value,
            PermeabilityKind::Sinusoid1d {
                mean,
                amplitude,
                epsilon,
            }
            | PermeabilityKind::Layered2d {
                mean,
                amplitude,
                epsilon,
            } => mean + amplitude * s(x[0] / epsilon),
            PermeabilityKind::Checkerboard2d {
                mean,
                amplitude,
                epsilon,
            } => mean + amplitude * s(x[0] / epsilon) * c(x[1] / epsilon),
            PermeabilityKind::MultiScale2d { offset, epsilons: e } => {
                let (x, y) = (x[0], x[1]);
                offset
                    + s(x / e[0]) * c(y / e[1]) / (2.0 + c(x / e[2]) * s(y / e[3]))
                    + s(x / e[4]) * c(y / e[5]) / (2.0 + c(x / e[6]) * s(y / e[7]))
            }
            PermeabilityKind::Tabulated { field, periodic } => {
                let g = field.grid();
                let mut p = [0.0; 2];
                for a in 0..g.dim() {
                    let v = x[a];
                    p[a] = if *periodic {
                        let len = g.hi(a) - g.lo(a);
                        g.lo(a) + (v - g.lo(a)).rem_euclid(len)
                    } else {
                        v.clamp(g.lo(a), g.hi(a))
                    };
                }
                field.interpolate_unchecked(&p)
            }
        }
    }

    /// The single fast-variable period ε, if the coefficient has one.
    pub fn epsilon(&self) -> Option<f64> {
        match &self.kind {
            PermeabilityKind::Sinusoid1d { epsilon, .. }
            | PermeabilityKind::Layered2d { epsilon, .. }
            | PermeabilityKind::Checkerboard2d { epsilon, .. } => Some(*epsilon),
            _ => None,
        }
    }

    /// Smallest oscillation scale present, if any.
    pub fn min_scale(&self) -> Option<f64> {
        match &self.kind {
            PermeabilityKind::MultiScale2d { epsilons, .. } => {
                Some(epsilons.iter().copied().fold(f64::INFINITY, f64::min))
            }
            _ => self.epsilon(),
        }
    }

    /// The coefficient as a function of the fast variable `y = x/ε` on the unit cell.
    ///
    /// `None` when there is no single period (multi-scale or non-periodic tables).
    pub fn cell_form(&self) -> Option<PermeabilityField> {
        let kind = match &self.kind {
            PermeabilityKind::Constant { .. } => self.kind.clone(),
            PermeabilityKind::Sinusoid1d {
                mean, amplitude, ..
            } => PermeabilityKind::Sinusoid1d {
                mean: *mean,
                amplitude: *amplitude,
                epsilon: 1.0,
            },
            PermeabilityKind::Layered2d {
                mean, amplitude, ..
            } => PermeabilityKind::Layered2d {
                mean: *mean,
                amplitude: *amplitude,
                epsilon: 1.0,
            },
            PermeabilityKind::Checkerboard2d {
                mean, amplitude, ..
            } => PermeabilityKind::Checkerboard2d {
                mean: *mean,
                amplitude: *amplitude,
                epsilon: 1.0,
            },
            PermeabilityKind::Tabulated { periodic: true, .. } => self.kind.clone(),
            _ => return None,
        };
        Some(PermeabilityField {
            kind,
            dim: self.dim,
            c_min: self.c_min,
            c_max: self.c_max,
        })
    }

    fn sampled_bounds(&self) -> (f64, f64, Vec<f64>) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut at = vec![0.0, 0.0];
        let n = BOUND_SAMPLES;
        for i in 0..=n {
            for j in 0..=n {
                let p = [i as f64 / n as f64, j as f64 / n as f64];
                let v = self.evaluate(&p);
                if v < lo {
                    lo = v;
                    at = p.to_vec();
                }
                hi = hi.max(v);
            }
        }
        (lo, hi, at)
    }
}

fn check_scale(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("scale parameter must be positive, got {eps}")))
    }
}

/// Right-hand side `f(x)` of the elliptic problem.
#[derive(Clone)]
pub struct Forcing {
    f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    label: String,
}

impl Forcing {
    pub fn constant(value: f64) -> Self {
        Forcing {
            f: Arc::new(move |_| value),
            label: format!("constant({value})"),
        }
    }

    /// `d π² Π sin(π x_i)`, whose solution with κ ≡ 1 is `Π sin(π x_i)`.
    pub fn manufactured_sine(dim: usize) -> Self {
        Forcing {
            f: Arc::new(move |x| dim as f64 * PI * PI * x.iter().map(|v| (PI * v).sin()).product::<f64>()),
            label: "manufactured-sine".into(),
        }
    }

    pub fn from_fn(label: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Forcing {
            f: Arc::new(f),
            label: label.into(),
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

impl fmt::Debug for Forcing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Forcing({})", self.label)
    }
}

/// `Π sin(π x_i)`, the exact solution for [`Forcing::manufactured_sine`].
pub fn manufactured_solution(x: &[f64]) -> f64 {
    x.iter().map(|v| (PI * v).sin()).product()
}

/// Scale parameters of the multiple-scale test coefficient.
pub const MULTISCALE_EPSILONS: [f64; 8] = [
    1.0 / 5.0,
    1.0 / 4.0,
    1.0 / 25.0,
    1.0 / 16.0,
    1.0 / 16.0,
    1.0 / 32.0,
    1.0 / 3.0,
    1.0 / 9.0,
];

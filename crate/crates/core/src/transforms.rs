//! Similarity-transform models acting on coordinates and, in closed form, on atoms.
//!
//! For `lambda` the forward map is `X = s R(theta) X' + t` and the coordinate map is its
//! inverse `a(lambda, X) = s^-1 R(theta)^-1 (X - t)`, with `theta = c_theta * theta_bar`
//! and `s = exp(c_s (s_bar - 1))`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::atoms::{Atom, AtomParams, Pattern};
use crate::error::{Error, Result};
use crate::linalg::{rotate, Affine2, Vec2};

/// Point of the parameter domain, in model order.
pub type ParamVector = Vec<f64>;

/// Default rotation gain: `theta_bar = 0.4` is a rotation by `0.04 pi`.
pub const DEFAULT_ROTATION_GAIN: f64 = 0.1 * PI;

/// Default scale gain; `s_bar in [0.4, 1.6]` maps to `s in [0.878, 1.140]`.
pub fn default_scale_gain() -> f64 {
    (1.13f64 / 0.87).ln() / 1.2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "translation2d", alias = "translation")]
    Translation2D,
    #[serde(rename = "trans_rot3d", alias = "rigid")]
    TransRot3D,
    #[serde(rename = "trans_rot_scale4d", alias = "similarity")]
    TransRotScale4D,
}

impl ModelKind {
    pub fn dim(self) -> usize {
        self.axes().len()
    }

    pub fn axes(self) -> &'static [Axis] {
        match self {
            ModelKind::Translation2D => &[Axis::Tx, Axis::Ty],
            ModelKind::TransRot3D => &[Axis::Theta, Axis::Tx, Axis::Ty],
            ModelKind::TransRotScale4D => &[Axis::Theta, Axis::Tx, Axis::Ty, Axis::Scale],
        }
    }

    pub fn has_scale(self) -> bool {
        self == ModelKind::TransRotScale4D
    }

    /// Parameter ranges used for random targets.
    pub fn target_ranges(self) -> Vec<[f64; 2]> {
        self.axes()
            .iter()
            .map(|a| match a {
                Axis::Scale => [0.4, 1.6],
                _ => [-0.4, 0.4],
            })
            .collect()
    }

    /// Default domain: the target ranges widened by half their radius about the identity.
    pub fn default_domain(self) -> Vec<[f64; 2]> {
        self.axes()
            .iter()
            .map(|a| match a {
                Axis::Scale => [0.1, 1.9],
                _ => [-0.6, 0.6],
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Theta,
    Tx,
    Ty,
    Scale,
}

impl Axis {
    pub fn identity_value(self) -> f64 {
        if self == Axis::Scale {
            1.0
        } else {
            0.0
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Theta => "theta",
            Axis::Tx => "tx",
            Axis::Ty => "ty",
            Axis::Scale => "scale",
        }
    }
}

/// Transformation model with gains and compact domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelConfig", into = "ModelConfig")]
pub struct TransformModel {
    kind: ModelKind,
    rotation_gain: f64,
    scale_gain: f64,
    domain: Vec<[f64; 2]>,
}

/// Serialized form of a model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default = "default_rotation_gain")]
    pub rotation_gain: f64,
    #[serde(default = "default_scale_gain")]
    pub scale_gain: f64,
    #[serde(default)]
    pub domain: Option<Vec<[f64; 2]>>,
}

fn default_rotation_gain() -> f64 {
    DEFAULT_ROTATION_GAIN
}

impl TryFrom<ModelConfig> for TransformModel {
    type Error = Error;
    fn try_from(c: ModelConfig) -> Result<Self> {
        let domain = c.domain.unwrap_or_else(|| c.kind.default_domain());
        TransformModel::new(c.kind, c.rotation_gain, c.scale_gain, domain)
    }
}

impl From<TransformModel> for ModelConfig {
    fn from(m: TransformModel) -> Self {
        ModelConfig { kind: m.kind, rotation_gain: m.rotation_gain, scale_gain: m.scale_gain, domain: Some(m.domain) }
    }
}

/// `X = s R(theta) X' + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub theta: f64,
    pub s: f64,
    pub t: Vec2,
}

impl Similarity {
    pub fn forward(&self, x: Vec2) -> Vec2 {
        let r = rotate(self.theta, x);
        [self.s * r[0] + self.t[0], self.s * r[1] + self.t[1]]
    }

    pub fn backward(&self, x: Vec2) -> Vec2 {
        let r = rotate(-self.theta, [x[0] - self.t[0], x[1] - self.t[1]]);
        [r[0] / self.s, r[1] / self.s]
    }

    pub fn inverse(&self) -> Similarity {
        let r = rotate(-self.theta, self.t);
        Similarity { theta: -self.theta, s: 1.0 / self.s, t: [-r[0] / self.s, -r[1] / self.s] }
    }

    /// Atoms of `X -> p(backward(X))`.
    pub fn apply(&self, p: &Pattern) -> Pattern {
        let atoms = p
            .atoms
            .iter()
            .map(|a| {
                let pa = &a.params;
                let [sx, sy] = pa.sigma();
                Atom {
                    c: a.c,
                    params: AtomParams::with_parts(
                        pa.psi() + self.theta,
                        self.forward(pa.tau()),
                        [self.s * sx, self.s * sy],
                    ),
                }
            })
            .collect();
        Pattern { atoms }
    }
}

impl TransformModel {
    pub fn new(kind: ModelKind, rotation_gain: f64, scale_gain: f64, domain: Vec<[f64; 2]>) -> Result<Self> {
        if !(rotation_gain.is_finite() && rotation_gain > 0.0 && scale_gain.is_finite() && scale_gain > 0.0) {
            return Err(Error::InvalidConfig("gains must be finite and > 0".into()));
        }
        if domain.len() != kind.dim() {
            return Err(Error::InvalidConfig(format!(
                "domain has {} axes, model {:?} needs {}",
                domain.len(),
                kind,
                kind.dim()
            )));
        }
        for (i, [lo, hi]) in domain.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidConfig(format!("domain axis {i}: [{lo}, {hi}] is not an interval")));
            }
        }
        Ok(TransformModel { kind, rotation_gain, scale_gain, domain })
    }

    /// Model with default gains and domain.
    pub fn standard(kind: ModelKind) -> Self {
        TransformModel::new(kind, DEFAULT_ROTATION_GAIN, default_scale_gain(), kind.default_domain())
            .expect("defaults are valid")
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }
    pub fn dim(&self) -> usize {
        self.kind.dim()
    }
    pub fn axes(&self) -> &'static [Axis] {
        self.kind.axes()
    }
    pub fn rotation_gain(&self) -> f64 {
        self.rotation_gain
    }
    pub fn scale_gain(&self) -> f64 {
        self.scale_gain
    }
    pub fn domain(&self) -> &[[f64; 2]] {
        &self.domain
    }

    pub fn with_gains(&self, rotation_gain: f64, scale_gain: f64) -> Result<Self> {
        TransformModel::new(self.kind, rotation_gain, scale_gain, self.domain.clone())
    }

    pub fn with_domain(&self, domain: Vec<[f64; 2]>) -> Result<Self> {
        TransformModel::new(self.kind, self.rotation_gain, self.scale_gain, domain)
    }

    pub fn identity(&self) -> ParamVector {
        self.axes().iter().map(|a| a.identity_value()).collect()
    }

    pub fn contains(&self, lam: &[f64]) -> bool {
        lam.iter().zip(&self.domain).all(|(v, [lo, hi])| *v >= *lo && *v <= *hi)
    }

    fn check_len(&self, lam: &[f64]) {
        assert_eq!(lam.len(), self.dim(), "parameter vector length must match the model");
    }

    pub fn similarity(&self, lam: &[f64]) -> Similarity {
        self.check_len(lam);
        let mut sim = Similarity { theta: 0.0, s: 1.0, t: [0.0, 0.0] };
        for (axis, v) in self.axes().iter().zip(lam) {
            match axis {
                Axis::Theta => sim.theta = self.rotation_gain * v,
                Axis::Tx => sim.t[0] = *v,
                Axis::Ty => sim.t[1] = *v,
                Axis::Scale => sim.s = (self.scale_gain * (v - 1.0)).exp(),
            }
        }
        sim
    }

    /// `a(lambda, X)`.
    pub fn coord_map(&self, lam: &[f64], x: Vec2) -> Vec2 {
        self.similarity(lam).backward(x)
    }

    /// Parameters of the inverse transformation within the same model.
    pub fn inverse_params(&self, lam: &[f64]) -> ParamVector {
        let inv = self.similarity(lam).inverse();
        self.axes()
            .iter()
            .zip(lam)
            .map(|(axis, v)| match axis {
                Axis::Theta => -v,
                Axis::Tx => inv.t[0],
                Axis::Ty => inv.t[1],
                Axis::Scale => 2.0 - v,
            })
            .collect()
    }

    /// `p_lambda = A_lambda(p)` in closed form.
    pub fn apply_to_pattern(&self, lam: &[f64], p: &Pattern) -> Pattern {
        self.similarity(lam).apply(p)
    }

    /// Linear operator `L_i` with `d/d lambda_i X' = L_i X'` for rotation and scale axes.
    fn axis_operator(&self, axis: Axis) -> Option<[[f64; 2]; 2]> {
        match axis {
            Axis::Theta => Some([[0.0, self.rotation_gain], [-self.rotation_gain, 0.0]]),
            Axis::Scale => Some([[-self.scale_gain, 0.0], [0.0, -self.scale_gain]]),
            _ => None,
        }
    }

    /// `d X' / d lambda_i` as affine fields of `X'`.
    pub fn coord_derivatives(&self, lam: &[f64]) -> Vec<Affine2> {
        let sim = self.similarity(lam);
        self.axes()
            .iter()
            .map(|axis| match axis {
                Axis::Tx | Axis::Ty => {
                    let e = if *axis == Axis::Tx { [1.0, 0.0] } else { [0.0, 1.0] };
                    let r = rotate(-sim.theta, e);
                    Affine2::constant([-r[0] / sim.s, -r[1] / sim.s])
                }
                _ => Affine2::linear(self.axis_operator(*axis).expect("rotation or scale"), 1.0),
            })
            .collect()
    }

    /// `d^2 X' / d lambda_i d lambda_j` as affine fields of `X'`, row-major `d x d`.
    pub fn coord_second_derivatives(&self, lam: &[f64]) -> Vec<Vec<Affine2>> {
        let first = self.coord_derivatives(lam);
        let axes = self.axes();
        (0..axes.len())
            .map(|i| {
                (0..axes.len())
                    .map(|j| {
                        if let Some(op) = self.axis_operator(axes[i]) {
                            first[j].premul(op)
                        } else if let Some(op) = self.axis_operator(axes[j]) {
                            first[i].premul(op)
                        } else {
                            Affine2::ZERO
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// `d s / d lambda_i / s`, nonzero only on the scale axis.
    pub fn log_scale_rate(&self, axis: Axis) -> f64 {
        if axis == Axis::Scale {
            self.scale_gain
        } else {
            0.0
        }
    }
}

/// Rescales rotation and scale gains so their tangents at the identity have the norm of
/// the `t_x` tangent. The tangent norms are linear in the gains there, so one ratio is exact.
pub fn calibrate_gains(m: &TransformModel, p: &Pattern) -> Result<TransformModel> {
    use crate::manifold::ManifoldGeometry;
    use crate::raster::QuadratureSpec;

    let unit = m.with_gains(1.0, 1.0)?;
    let g = ManifoldGeometry::new(unit, p.clone(), QuadratureSpec::fit(&[p], &QuadratureSpec::default()))
        .map_err(|e| Error::Calibration(e.to_string()))?;
    let norms = g.tangent_norms(&g.model().identity());
    let axes = m.axes();
    let tx = norms[axes.iter().position(|a| *a == Axis::Tx).expect("every model translates")];
    if !(tx > 0.0) {
        return Err(Error::Calibration("translation tangent vanishes".into()));
    }
    let mut rot = m.rotation_gain();
    let mut scale = m.scale_gain();
    for (axis, n) in axes.iter().zip(&norms) {
        if !(*n > 0.0) && *axis != Axis::Tx {
            return Err(Error::Calibration(format!("{} tangent vanishes", axis.name())));
        }
        match axis {
            Axis::Theta => rot = tx / n,
            Axis::Scale => scale = tx / n,
            _ => {}
        }
    }
    m.with_gains(rot, scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_translation() {
        let m = TransformModel::standard(ModelKind::TransRotScale4D);
        let x = [0.3, -1.7];
        assert_eq!(m.coord_map(&m.identity(), x), x);
        let t = TransformModel::standard(ModelKind::Translation2D);
        assert_eq!(t.coord_map(&[1.0, 2.0], [1.0, 2.0]), [0.0, 0.0]);
    }

    #[test]
    fn inverse_parameters_round_trip() {
        let m = TransformModel::standard(ModelKind::TransRotScale4D);
        let lam = vec![0.3, -0.2, 0.45, 1.4];
        let inv = m.inverse_params(&lam);
        let x = [1.25, -0.5];
        let y = m.coord_map(&inv, m.coord_map(&lam, x));
        assert!((y[0] - x[0]).abs() < 1e-12 && (y[1] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn second_derivatives_are_symmetric() {
        let m = TransformModel::standard(ModelKind::TransRotScale4D);
        let w = m.coord_second_derivatives(&[0.2, 0.1, -0.3, 1.2]);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(w[i][j], w[j][i]);
            }
        }
    }

    #[test]
    fn config_rejects_bad_domain() {
        let bad = r#"{"kind":"translation2d","domain":[[1,0],[0,1]]}"#;
        assert!(serde_json::from_str::<TransformModel>(bad).is_err());
    }
}

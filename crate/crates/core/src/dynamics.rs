//! Analytic Lagrangian dynamics of a planar n-link revolute manipulator.
//!
//! The chain lives in the x-y plane with gravity acting along -y. Every
//! quantity is generic over the scalar type, so the same assembly code yields
//! values (`f64`) and exact derivatives (`Dual`). The Coriolis matrix is built
//! from Christoffel symbols, which makes the skew-symmetry identity
//! `q̇ᵀ(Ḣ - 2C)q̇ = 0` hold to rounding error.

use crate::math::{cholesky_factor, cholesky_solve, Dual, Real};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model has {0} links but field `{1}` has {2} entries")]
    FieldLength(usize, &'static str, usize),
    #[error("link {0}: mass must be > 0 (got {1})")]
    NonPositiveMass(usize, f64),
    #[error("link {0}: length must be > 0 (got {1})")]
    NonPositiveLength(usize, f64),
    #[error("link {0}: com offset {1} outside [0, {2}]")]
    ComOutsideLink(usize, f64, f64),
    #[error("link {0}: inertia must be >= 0 (got {1})")]
    NegativeInertia(usize, f64),
    #[error("payload mass must be >= 0 (got {0})")]
    NegativePayloadMass(f64),
}

/// Planar manipulator parameters. `com_offsets` is the along-link COM
/// position; `com_lateral` (zero for ordinary links) captures the off-axis
/// COM shift that a payload attachment introduces on the last link.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManipulatorModel {
    pub n_links: usize,
    /// kg per link
    pub masses: Vec<f64>,
    /// m per link
    pub lengths: Vec<f64>,
    /// m along each link
    pub com_offsets: Vec<f64>,
    /// kg m^2 about each link COM
    pub link_inertias: Vec<f64>,
    /// m/s^2, acts along -y
    pub gravity: f64,
    /// N m s/rad per joint
    #[serde(default)]
    pub viscous_friction: Vec<f64>,
    /// m perpendicular to each link axis
    #[serde(default)]
    pub com_lateral: Vec<f64>,
}

/// One payload context: a point mass rigidly attached near the end effector.
/// The offset is expressed in the end-effector frame (x along the last link).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EnvironmentSpec {
    pub id: String,
    pub payload_mass: f64,
    pub payload_offset: [f64; 2],
}

impl EnvironmentSpec {
    pub fn unloaded(id: impl Into<String>) -> Self {
        EnvironmentSpec {
            id: id.into(),
            payload_mass: 0.0,
            payload_offset: [0.0, 0.0],
        }
    }
}

/// Joint-space state sample.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct JointState {
    pub q: Vec<f64>,
    pub dq: Vec<f64>,
    #[serde(default)]
    pub ddq: Option<Vec<f64>>,
}

impl ManipulatorModel {
    /// Desk-scale 3-link arm with Franka-like torque scales.
    pub fn desk_default() -> Self {
        let lengths = [0.5, 0.4, 0.3];
        let masses = [4.0, 3.0, 2.0];
        ManipulatorModel {
            n_links: 3,
            masses: masses.to_vec(),
            lengths: lengths.to_vec(),
            com_offsets: lengths.iter().map(|l| l / 2.0).collect(),
            link_inertias: masses
                .iter()
                .zip(lengths.iter())
                .map(|(m, l)| m * l * l / 12.0)
                .collect(),
            gravity: 9.81,
            viscous_friction: vec![0.0; 3],
            com_lateral: vec![0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.n_links;
        let check_len = |name: &'static str, len: usize| {
            if len != n {
                Err(ModelError::FieldLength(n, name, len))
            } else {
                Ok(())
            }
        };
        check_len("masses", self.masses.len())?;
        check_len("lengths", self.lengths.len())?;
        check_len("com_offsets", self.com_offsets.len())?;
        check_len("link_inertias", self.link_inertias.len())?;
        if !self.viscous_friction.is_empty() {
            check_len("viscous_friction", self.viscous_friction.len())?;
        }
        if !self.com_lateral.is_empty() {
            check_len("com_lateral", self.com_lateral.len())?;
        }
        for i in 0..n {
            if !(self.masses[i] > 0.0) {
                return Err(ModelError::NonPositiveMass(i, self.masses[i]));
            }
            if !(self.lengths[i] > 0.0) {
                return Err(ModelError::NonPositiveLength(i, self.lengths[i]));
            }
            if self.com_offsets[i] < 0.0 || self.com_offsets[i] > self.lengths[i] {
                return Err(ModelError::ComOutsideLink(
                    i,
                    self.com_offsets[i],
                    self.lengths[i],
                ));
            }
            if self.link_inertias[i] < 0.0 {
                return Err(ModelError::NegativeInertia(i, self.link_inertias[i]));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let mut m: ManipulatorModel = serde_json::from_str(text)?;
        if m.viscous_friction.is_empty() {
            m.viscous_friction = vec![0.0; m.n_links];
        }
        if m.com_lateral.is_empty() {
            m.com_lateral = vec![0.0; m.n_links];
        }
        Ok(m)
    }

    pub fn friction(&self, j: usize) -> f64 {
        self.viscous_friction.get(j).copied().unwrap_or(0.0)
    }

    fn lateral(&self, j: usize) -> f64 {
        self.com_lateral.get(j).copied().unwrap_or(0.0)
    }

    /// Total reach of the chain.
    pub fn reach(&self) -> f64 {
        self.lengths.iter().sum()
    }
}

/// Attach a point payload to the last link. The combined body keeps the
/// link frame; mass, COM and inertia follow the parallel-axis rule. The
/// input model is untouched.
pub fn apply_payload(model: &ManipulatorModel, env: &EnvironmentSpec) -> ManipulatorModel {
    assert!(env.payload_mass >= 0.0, "payload mass must be nonnegative");
    if env.payload_mass == 0.0 {
        return model.clone();
    }
    let mut out = model.clone();
    let last = model.n_links - 1;
    let m_link = model.masses[last];
    let m_pay = env.payload_mass;
    // payload position in the last link's frame
    let px = model.lengths[last] + env.payload_offset[0];
    let py = env.payload_offset[1];
    let cx = model.com_offsets[last];
    let cy = model.lateral(last);
    let m_tot = m_link + m_pay;
    let cx_new = (m_link * cx + m_pay * px) / m_tot;
    let cy_new = (m_link * cy + m_pay * py) / m_tot;
    let d2_link = (cx - cx_new).powi(2) + (cy - cy_new).powi(2);
    let d2_pay = (px - cx_new).powi(2) + (py - cy_new).powi(2);
    out.masses[last] = m_tot;
    out.com_offsets[last] = cx_new;
    if out.com_lateral.is_empty() {
        out.com_lateral = vec![0.0; out.n_links];
    }
    out.com_lateral[last] = cy_new;
    out.link_inertias[last] = model.link_inertias[last] + m_link * d2_link + m_pay * d2_pay;
    out
}

#[inline]
fn rot<T: Real>(angle_cos: T, angle_sin: T, v: [T; 2]) -> [T; 2] {
    [
        angle_cos * v[0] - angle_sin * v[1],
        angle_sin * v[0] + angle_cos * v[1],
    ]
}

/// 90-degree rotation: derivative of a point rigidly attached downstream of a
/// revolute joint with respect to that joint's angle.
#[inline]
fn perp<T: Real>(v: [T; 2]) -> [T; 2] {
    [-v[1], v[0]]
}

#[inline]
fn dot2<T: Real>(a: [T; 2], b: [T; 2]) -> T {
    a[0] * b[0] + a[1] * b[1]
}

/// Joint origins (n+1 points, last one is the tip), link COM positions and
/// absolute link angles for a configuration.
pub struct ChainKinematics<T: Real> {
    pub joints: Vec<[T; 2]>,
    pub coms: Vec<[T; 2]>,
    pub angles: Vec<T>,
}

pub fn chain_kinematics<T: Real>(model: &ManipulatorModel, q: &DVector<T>) -> ChainKinematics<T> {
    let n = model.n_links;
    assert_eq!(q.len(), n, "chain_kinematics: |q| != n_links");
    let mut joints = Vec::with_capacity(n + 1);
    let mut coms = Vec::with_capacity(n);
    let mut angles = Vec::with_capacity(n);
    let mut pos = [T::zero(), T::zero()];
    let mut angle = T::zero();
    joints.push(pos);
    for i in 0..n {
        angle += q[i];
        angles.push(angle);
        let (c, s) = (angle.cos(), angle.sin());
        let com_local = [
            T::from_f64(model.com_offsets[i]),
            T::from_f64(model.lateral(i)),
        ];
        let com_off = rot(c, s, com_local);
        coms.push([pos[0] + com_off[0], pos[1] + com_off[1]]);
        let l = T::from_f64(model.lengths[i]);
        pos = [pos[0] + l * c, pos[1] + l * s];
        joints.push(pos);
    }
    ChainKinematics {
        joints,
        coms,
        angles,
    }
}

/// Joint-space inertia matrix H(q). Symmetric positive definite.
pub fn mass_matrix<T: Real>(model: &ManipulatorModel, q: &DVector<T>) -> DMatrix<T> {
    let n = model.n_links;
    let kin = chain_kinematics(model, q);
    // jac[i][a] = d com_i / d q_a (zero for a > i)
    let mut h = DMatrix::<T>::zeros(n, n);
    for i in 0..n {
        let m = T::from_f64(model.masses[i]);
        let inertia = T::from_f64(model.link_inertias[i]);
        for a in 0..=i {
            let ja = perp([
                kin.coms[i][0] - kin.joints[a][0],
                kin.coms[i][1] - kin.joints[a][1],
            ]);
            for b in 0..=a {
                let jb = perp([
                    kin.coms[i][0] - kin.joints[b][0],
                    kin.coms[i][1] - kin.joints[b][1],
                ]);
                let term = m * dot2(ja, jb) + inertia;
                h[(a, b)] += term;
            }
        }
    }
    for a in 0..n {
        for b in (a + 1)..n {
            h[(a, b)] = h[(b, a)];
        }
    }
    h
}

/// Partial derivatives dH/dq_k, computed exactly by forward-mode lifting of
/// the mass-matrix assembly. Works for dual scalars too (nested duals).
pub fn mass_matrix_partials<T: Real>(
    model: &ManipulatorModel,
    q: &DVector<T>,
) -> Vec<DMatrix<T>> {
    let n = model.n_links;
    (0..n)
        .map(|k| {
            let qd = DVector::from_iterator(
                n,
                q.iter().enumerate().map(|(j, &v)| {
                    if j == k {
                        Dual::variable(v)
                    } else {
                        Dual::constant(v)
                    }
                }),
            );
            mass_matrix(model, &qd).map(|d| d.du)
        })
        .collect()
}

/// Coriolis matrix from Christoffel symbols of the first kind:
/// C_ab = sum_c 0.5 (dH_ab/dq_c + dH_ac/dq_b - dH_bc/dq_a) dq_c.
pub fn coriolis_matrix<T: Real>(
    model: &ManipulatorModel,
    q: &DVector<T>,
    dq: &DVector<T>,
) -> DMatrix<T> {
    let n = model.n_links;
    assert_eq!(dq.len(), n, "coriolis_matrix: |dq| != n_links");
    let dh = mass_matrix_partials(model, q);
    let half = T::from_f64(0.5);
    let mut c = DMatrix::<T>::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let mut acc = T::zero();
            for k in 0..n {
                acc += half * (dh[k][(a, b)] + dh[b][(a, k)] - dh[a][(b, k)]) * dq[k];
            }
            c[(a, b)] = acc;
        }
    }
    c
}

/// Gravity torque g(q) = dP/dq for P = g * sum_i m_i y_com_i.
pub fn gravity_vector<T: Real>(model: &ManipulatorModel, q: &DVector<T>) -> DVector<T> {
    let n = model.n_links;
    let kin = chain_kinematics(model, q);
    let g = T::from_f64(model.gravity);
    let mut out = DVector::<T>::zeros(n);
    for a in 0..n {
        let mut acc = T::zero();
        for i in a..n {
            let m = T::from_f64(model.masses[i]);
            acc += m * (kin.coms[i][0] - kin.joints[a][0]);
        }
        out[a] = g * acc;
    }
    out
}

/// Potential energy of the chain.
pub fn potential_energy<T: Real>(model: &ManipulatorModel, q: &DVector<T>) -> T {
    let kin = chain_kinematics(model, q);
    let mut p = T::zero();
    for i in 0..model.n_links {
        p += T::from_f64(model.masses[i]) * kin.coms[i][1];
    }
    T::from_f64(model.gravity) * p
}

/// Kinetic energy 0.5 q̇ᵀ H q̇ evaluated from link velocities directly.
pub fn kinetic_energy<T: Real>(model: &ManipulatorModel, q: &DVector<T>, dq: &DVector<T>) -> T {
    let n = model.n_links;
    let kin = chain_kinematics(model, q);
    let half = T::from_f64(0.5);
    let mut k = T::zero();
    let mut phidot = T::zero();
    for i in 0..n {
        phidot += dq[i];
        let mut v = [T::zero(), T::zero()];
        for a in 0..=i {
            let ja = perp([
                kin.coms[i][0] - kin.joints[a][0],
                kin.coms[i][1] - kin.joints[a][1],
            ]);
            v[0] += ja[0] * dq[a];
            v[1] += ja[1] * dq[a];
        }
        k += half * T::from_f64(model.masses[i]) * dot2(v, v);
        k += half * T::from_f64(model.link_inertias[i]) * phidot * phidot;
    }
    k
}

/// Inverse dynamics: tau = H(q) ddq + C(q, dq) dq + g(q) + b dq.
pub fn inverse_dynamics<T: Real>(
    model: &ManipulatorModel,
    q: &DVector<T>,
    dq: &DVector<T>,
    ddq: &DVector<T>,
) -> DVector<T> {
    let n = model.n_links;
    assert_eq!(ddq.len(), n, "inverse_dynamics: |ddq| != n_links");
    let h = mass_matrix(model, q);
    let c = coriolis_matrix(model, q, dq);
    let g = gravity_vector(model, q);
    let mut tau = &h * ddq + &c * dq + g;
    for j in 0..n {
        tau[j] += T::from_f64(model.friction(j)) * dq[j];
    }
    tau
}

/// Forward dynamics: ddq = H(q)^-1 (tau - C dq - g - b dq), solved through
/// the Cholesky factor of H.
///
/// Panics if H is not positive definite; a valid model cannot produce that.
pub fn forward_dynamics<T: Real>(
    model: &ManipulatorModel,
    q: &DVector<T>,
    dq: &DVector<T>,
    tau: &DVector<T>,
) -> DVector<T> {
    let n = model.n_links;
    assert_eq!(tau.len(), n, "forward_dynamics: |tau| != n_links");
    let h = mass_matrix(model, q);
    let c = coriolis_matrix(model, q, dq);
    let g = gravity_vector(model, q);
    let mut rhs = tau - &c * dq - g;
    for j in 0..n {
        rhs[j] -= T::from_f64(model.friction(j)) * dq[j];
    }
    let l = cholesky_factor(&h)
        .unwrap_or_else(|| panic!("mass matrix not positive definite at q = {q:?}"));
    cholesky_solve(&l, &rhs)
}

/// End-effector position and its 2xn Jacobian.
pub fn ee_kinematics<T: Real>(
    model: &ManipulatorModel,
    q: &DVector<T>,
) -> ([T; 2], DMatrix<T>) {
    let n = model.n_links;
    let kin = chain_kinematics(model, q);
    let tip = kin.joints[n];
    let mut jac = DMatrix::<T>::zeros(2, n);
    for a in 0..n {
        let col = perp([tip[0] - kin.joints[a][0], tip[1] - kin.joints[a][1]]);
        jac[(0, a)] = col[0];
        jac[(1, a)] = col[1];
    }
    (tip, jac)
}

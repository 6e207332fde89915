//! Factor graph over keyframe poses with batch Levenberg-Marquardt.
//!
//! Factors: odometry and loop-closure relative poses (loops carry a Huber
//! kernel by default), optional GPS positions, and unary pose priors.
//! Residual convention for relative factors:
//! `r = log(measurement^-1 * (pose_from^-1 * pose_to))` with
//! right-multiplied twist perturbations; Jacobians are analytic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use thiserror::Error;

use crate::geom::{se3_adjoint, se3_exp, se3_log, se3_right_jacobian_inv, PoseSE3, Twist};
use crate::scalar::{real, to_f64, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("node id {0} already exists")]
    DuplicateNode(usize),
    #[error("odometry factor endpoints must satisfy from < to, got {from} >= {to}")]
    BadEndpointOrder { from: usize, to: usize },
    #[error("information matrix is not symmetric positive-definite")]
    InvalidInformation,
    #[error("graph has a component without a fixed node, prior, or gps anchor")]
    Disconnected,
    #[error("relative measurement at rotation ~pi cannot be linearized")]
    MeasurementAtPi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Odometry,
    Loop,
    Gps,
    Prior,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustKernel {
    None,
    Huber(f64),
}

/// Factor payload; `Between` covers odometry and loop closures.
#[derive(Debug, Clone, PartialEq)]
pub enum FactorData<T: Real = f64> {
    Between {
        from: usize,
        to: usize,
        relative: PoseSE3<T>,
        information: Matrix6<T>,
    },
    Gps {
        node: usize,
        position: Vector3<T>,
        information: Matrix3<T>,
    },
    Prior {
        node: usize,
        pose: PoseSE3<T>,
        information: Matrix6<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factor<T: Real = f64> {
    pub kind: FactorKind,
    pub data: FactorData<T>,
    pub kernel: RobustKernel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode<T: Real = f64> {
    pub id: usize,
    pub pose: PoseSE3<T>,
    pub fixed: bool,
}

/// Optimization summary.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Keyframe nodes plus measurement factors.
#[derive(Debug, Clone, Default)]
pub struct PoseGraph<T: Real = f64> {
    nodes: BTreeMap<usize, GraphNode<T>>,
    factors: Vec<Factor<T>>,
}

fn symmetric_pd<T: Real, const N: usize>(
    m: &nalgebra::SMatrix<T, N, N>,
) -> Result<(), GraphError> {
    for i in 0..N {
        for j in 0..N {
            if (m[(i, j)] - m[(j, i)]).abs() > real(1e-9) {
                return Err(GraphError::InvalidInformation);
            }
        }
    }
    if m.cholesky().is_none() {
        return Err(GraphError::InvalidInformation);
    }
    Ok(())
}

impl<T: Real> PoseGraph<T> {
    pub fn new() -> Self {
        Self {
            nodes: BTreeMap::new(),
            factors: Vec::new(),
        }
    }

    pub fn add_node(&mut self, id: usize, pose: PoseSE3<T>, fixed: bool) -> Result<(), GraphError> {
        if self.nodes.contains_key(&id) {
            return Err(GraphError::DuplicateNode(id));
        }
        self.nodes.insert(id, GraphNode { id, pose, fixed });
        Ok(())
    }

    pub fn set_fixed(&mut self, id: usize, fixed: bool) -> Result<(), GraphError> {
        self.nodes
            .get_mut(&id)
            .map(|n| n.fixed = fixed)
            .ok_or(GraphError::UnknownNode(id))
    }

    pub fn node(&self, id: usize) -> Option<&GraphNode<T>> {
        self.nodes.get(&id)
    }

    pub fn set_pose(&mut self, id: usize, pose: PoseSE3<T>) -> Result<(), GraphError> {
        self.nodes
            .get_mut(&id)
            .map(|n| n.pose = pose)
            .ok_or(GraphError::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode<T>> {
        self.nodes.values()
    }

    pub fn factors(&self) -> &[Factor<T>] {
        &self.factors
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn factor_count_of(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind == kind).count()
    }

    fn check_node(&self, id: usize) -> Result<(), GraphError> {
        if self.nodes.contains_key(&id) {
            Ok(())
        } else {
            Err(GraphError::UnknownNode(id))
        }
    }

    pub fn add_odometry_factor(
        &mut self,
        from: usize,
        to: usize,
        relative: PoseSE3<T>,
        information: Matrix6<T>,
    ) -> Result<(), GraphError> {
        self.check_node(from)?;
        self.check_node(to)?;
        if from >= to {
            return Err(GraphError::BadEndpointOrder { from, to });
        }
        symmetric_pd(&information)?;
        self.factors.push(Factor {
            kind: FactorKind::Odometry,
            data: FactorData::Between {
                from,
                to,
                relative,
                information,
            },
            kernel: RobustKernel::None,
        });
        Ok(())
    }

    pub fn add_loop_factor(
        &mut self,
        from: usize,
        to: usize,
        relative: PoseSE3<T>,
        information: Matrix6<T>,
        kernel: RobustKernel,
    ) -> Result<(), GraphError> {
        self.check_node(from)?;
        self.check_node(to)?;
        if from >= to {
            return Err(GraphError::BadEndpointOrder { from, to });
        }
        symmetric_pd(&information)?;
        self.factors.push(Factor {
            kind: FactorKind::Loop,
            data: FactorData::Between {
                from,
                to,
                relative,
                information,
            },
            kernel,
        });
        Ok(())
    }

    pub fn add_gps_factor(
        &mut self,
        node: usize,
        position: Vector3<T>,
        information: Matrix3<T>,
    ) -> Result<(), GraphError> {
        self.check_node(node)?;
        symmetric_pd(&information)?;
        self.factors.push(Factor {
            kind: FactorKind::Gps,
            data: FactorData::Gps {
                node,
                position,
                information,
            },
            kernel: RobustKernel::None,
        });
        Ok(())
    }

    pub fn add_prior_factor(
        &mut self,
        node: usize,
        pose: PoseSE3<T>,
        information: Matrix6<T>,
    ) -> Result<(), GraphError> {
        self.check_node(node)?;
        symmetric_pd(&information)?;
        self.factors.push(Factor {
            kind: FactorKind::Prior,
            data: FactorData::Prior {
                node,
                pose,
                information,
            },
            kernel: RobustKernel::None,
        });
        Ok(())
    }

    /// Whitened residual of one factor at the current estimates.
    pub fn whitened_residual(&self, factor: &Factor<T>) -> Result<DVector<T>, GraphError> {
        match &factor.data {
            FactorData::Between {
                from,
                to,
                relative,
                information,
            } => {
                let pf = &self.nodes[from].pose;
                let pt = &self.nodes[to].pose;
                let err = relative.inverse().compose(&pf.between(pt));
                let twist = se3_log(&err).map_err(|_| GraphError::MeasurementAtPi)?;
                let r = twist_to_vec(&twist);
                let l = information.cholesky().ok_or(GraphError::InvalidInformation)?;
                Ok(DVector::from_column_slice((l.l().transpose() * r).as_slice()))
            }
            FactorData::Gps {
                node,
                position,
                information,
            } => {
                let r = self.nodes[node].pose.translation - position;
                let l = information.cholesky().ok_or(GraphError::InvalidInformation)?;
                Ok(DVector::from_column_slice((l.l().transpose() * r).as_slice()))
            }
            FactorData::Prior {
                node,
                pose,
                information,
            } => {
                let err = pose.inverse().compose(&self.nodes[node].pose);
                let twist = se3_log(&err).map_err(|_| GraphError::MeasurementAtPi)?;
                let r = twist_to_vec(&twist);
                let l = information.cholesky().ok_or(GraphError::InvalidInformation)?;
                Ok(DVector::from_column_slice((l.l().transpose() * r).as_slice()))
            }
        }
    }

    /// Whitened Jacobian blocks `(node id, d r / d twist)` of one factor.
    pub fn factor_jacobians(
        &self,
        factor: &Factor<T>,
    ) -> Result<Vec<(usize, DMatrix<T>)>, GraphError> {
        match &factor.data {
            FactorData::Between {
                from,
                to,
                relative,
                information,
            } => {
                let pf = &self.nodes[from].pose;
                let pt = &self.nodes[to].pose;
                let err = relative.inverse().compose(&pf.between(pt));
                let twist = se3_log(&err).map_err(|_| GraphError::MeasurementAtPi)?;
                let jr_inv = se3_right_jacobian_inv(&twist);
                let j_to = jr_inv;
                let j_from = -jr_inv * se3_adjoint(&pt.between(pf));
                let l = information.cholesky().ok_or(GraphError::InvalidInformation)?;
                let white = l.l().transpose();
                Ok(vec![
                    (*from, dmat(white * j_from)),
                    (*to, dmat(white * j_to)),
                ])
            }
            FactorData::Gps {
                node, information, ..
            } => {
                let rot = self.nodes[node].pose.rotation.to_rotation_matrix();
                let mut j = nalgebra::SMatrix::<T, 3, 6>::zeros();
                j.fixed_view_mut::<3, 3>(0, 3).copy_from(rot.matrix());
                let l = information.cholesky().ok_or(GraphError::InvalidInformation)?;
                Ok(vec![(*node, dmat(l.l().transpose() * j))])
            }
            FactorData::Prior {
                node,
                pose,
                information,
            } => {
                let err = pose.inverse().compose(&self.nodes[node].pose);
                let twist = se3_log(&err).map_err(|_| GraphError::MeasurementAtPi)?;
                let j = se3_right_jacobian_inv(&twist);
                let l = information.cholesky().ok_or(GraphError::InvalidInformation)?;
                Ok(vec![(*node, dmat(l.l().transpose() * j))])
            }
        }
    }

    fn kernel_weight(kernel: &RobustKernel, norm: f64) -> f64 {
        match kernel {
            RobustKernel::None => 1.0,
            RobustKernel::Huber(delta) => {
                if norm <= *delta {
                    1.0
                } else {
                    delta / norm
                }
            }
        }
    }

    fn kernel_cost(kernel: &RobustKernel, norm: f64) -> f64 {
        match kernel {
            RobustKernel::None => 0.5 * norm * norm,
            RobustKernel::Huber(delta) => {
                if norm <= *delta {
                    0.5 * norm * norm
                } else {
                    delta * norm - 0.5 * delta * delta
                }
            }
        }
    }

    /// Total robust cost at the current estimates.
    pub fn total_cost(&self) -> Result<f64, GraphError> {
        let mut cost = 0.0;
        for f in &self.factors {
            let r = self.whitened_residual(f)?;
            cost += Self::kernel_cost(&f.kernel, to_f64(r.norm()));
        }
        Ok(cost)
    }

    /// Every odometry-connected component must contain an anchor: a fixed
    /// node, a prior, or a GPS factor.
    fn check_structure(&self) -> Result<(), GraphError> {
        let ids: Vec<usize> = self.nodes.keys().copied().collect();
        let index: BTreeMap<usize, usize> =
            ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut parent: Vec<usize> = (0..ids.len()).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            if parent[i] != i {
                let root = find(parent, parent[i]);
                parent[i] = root;
            }
            parent[i]
        }
        for f in &self.factors {
            if let FactorData::Between { from, to, .. } = &f.data {
                if f.kind == FactorKind::Odometry {
                    let (a, b) = (index[from], index[to]);
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    parent[ra] = rb;
                }
            }
        }
        let mut anchored: std::collections::HashSet<usize> = Default::default();
        for n in self.nodes.values() {
            if n.fixed {
                anchored.insert(find(&mut parent, index[&n.id]));
            }
        }
        for f in &self.factors {
            match &f.data {
                FactorData::Gps { node, .. } | FactorData::Prior { node, .. } => {
                    anchored.insert(find(&mut parent, index[node]));
                }
                _ => {}
            }
        }
        for i in 0..ids.len() {
            if !anchored.contains(&find(&mut parent, i)) {
                return Err(GraphError::Disconnected);
            }
        }
        Ok(())
    }

    /// Batch Levenberg-Marquardt over the free node poses (updated in place).
    pub fn optimize(
        &mut self,
        max_iterations: usize,
        tolerance: f64,
    ) -> Result<OptimizeReport, GraphError> {
        self.check_structure()?;
        let free: Vec<usize> = self
            .nodes
            .values()
            .filter(|n| !n.fixed)
            .map(|n| n.id)
            .collect();
        let offset: BTreeMap<usize, usize> =
            free.iter().enumerate().map(|(i, id)| (*id, i * 6)).collect();
        let dim = free.len() * 6;
        let initial_cost = self.total_cost()?;
        if dim == 0 {
            return Ok(OptimizeReport {
                initial_cost,
                final_cost: initial_cost,
                iterations: 0,
                converged: true,
            });
        }

        let mut cost = initial_cost;
        let mut lambda = 1e-4;
        let mut iterations = 0;
        let mut converged = false;

        while iterations < max_iterations {
            iterations += 1;
            let mut h = DMatrix::<T>::zeros(dim, dim);
            let mut g = DVector::<T>::zeros(dim);
            for f in &self.factors {
                let r = self.whitened_residual(f)?;
                let w = Self::kernel_weight(&f.kernel, to_f64(r.norm()));
                let wt = real::<T>(w);
                let blocks = self.factor_jacobians(f)?;
                for (id_a, j_a) in &blocks {
                    let Some(&oa) = offset.get(id_a) else { continue };
                    let grad = j_a.transpose() * &r * wt;
                    for k in 0..6 {
                        g[oa + k] += grad[k];
                    }
                    for (id_b, j_b) in &blocks {
                        let Some(&ob) = offset.get(id_b) else { continue };
                        let block = j_a.transpose() * j_b * wt;
                        for rr in 0..6 {
                            for cc in 0..6 {
                                h[(oa + rr, ob + cc)] += block[(rr, cc)];
                            }
                        }
                    }
                }
            }

            // Damped normal equations; retry with a larger lambda on failure.
            let mut improved = false;
            for _ in 0..10 {
                let mut damped = h.clone();
                for i in 0..dim {
                    let d = damped[(i, i)];
                    damped[(i, i)] = d + real::<T>(lambda) * (T::one() + d);
                }
                let Some(chol) = damped.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let step = chol.solve(&(-&g));
                let saved: Vec<(usize, PoseSE3<T>)> =
                    free.iter().map(|id| (*id, self.nodes[id].pose)).collect();
                for id in &free {
                    let o = offset[id];
                    let twist = Twist::new(
                        Vector3::new(step[o], step[o + 1], step[o + 2]),
                        Vector3::new(step[o + 3], step[o + 4], step[o + 5]),
                    );
                    let node = self.nodes.get_mut(id).unwrap();
                    node.pose = node.pose.compose(&se3_exp(&twist));
                }
                let new_cost = self.total_cost()?;
                if new_cost <= cost {
                    let decrease = cost - new_cost;
                    cost = new_cost;
                    lambda = (lambda * 0.5).max(1e-12);
                    improved = true;
                    if decrease <= tolerance * (1.0 + cost) {
                        converged = true;
                    }
                    break;
                }
                for (id, pose) in saved {
                    self.nodes.get_mut(&id).unwrap().pose = pose;
                }
                lambda *= 10.0;
            }
            if converged || !improved {
                converged = converged || (!improved && cost <= initial_cost);
                break;
            }
        }

        Ok(OptimizeReport {
            initial_cost,
            final_cost: cost,
            iterations,
            converged,
        })
    }

    /// One-line-per-element debug dump.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for n in self.nodes.values() {
            let q = n.pose.rotation.as_ref();
            let t = n.pose.translation;
            let _ = write!(
                out,
                "NODE {} {} {} {} {} {} {} {}",
                n.id,
                to_f64(t.x),
                to_f64(t.y),
                to_f64(t.z),
                to_f64(q.w),
                to_f64(q.i),
                to_f64(q.j),
                to_f64(q.k)
            );
            if n.fixed {
                out.push_str(" FIXED");
            }
            out.push('\n');
        }
        for f in &self.factors {
            let kind = match f.kind {
                FactorKind::Odometry => "ODOMETRY",
                FactorKind::Loop => "LOOP",
                FactorKind::Gps => "GPS",
                FactorKind::Prior => "PRIOR",
            };
            match &f.data {
                FactorData::Between {
                    from,
                    to,
                    relative,
                    information,
                } => {
                    let q = relative.rotation.as_ref();
                    let t = relative.translation;
                    let _ = write!(
                        out,
                        "FACTOR {kind} {from} {to} {} {} {} {} {} {} {}",
                        to_f64(t.x),
                        to_f64(t.y),
                        to_f64(t.z),
                        to_f64(q.w),
                        to_f64(q.i),
                        to_f64(q.j),
                        to_f64(q.k)
                    );
                    for i in 0..6 {
                        for j in i..6 {
                            let _ = write!(out, " {}", to_f64(information[(i, j)]));
                        }
                    }
                }
                FactorData::Gps {
                    node,
                    position,
                    information,
                } => {
                    let _ = write!(
                        out,
                        "FACTOR {kind} {node} {} {} {}",
                        to_f64(position.x),
                        to_f64(position.y),
                        to_f64(position.z)
                    );
                    for i in 0..3 {
                        for j in i..3 {
                            let _ = write!(out, " {}", to_f64(information[(i, j)]));
                        }
                    }
                }
                FactorData::Prior {
                    node,
                    pose,
                    information,
                } => {
                    let q = pose.rotation.as_ref();
                    let t = pose.translation;
                    let _ = write!(
                        out,
                        "FACTOR {kind} {node} {} {} {} {} {} {} {}",
                        to_f64(t.x),
                        to_f64(t.y),
                        to_f64(t.z),
                        to_f64(q.w),
                        to_f64(q.i),
                        to_f64(q.j),
                        to_f64(q.k)
                    );
                    for i in 0..6 {
                        for j in i..6 {
                            let _ = write!(out, " {}", to_f64(information[(i, j)]));
                        }
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

fn dmat<T: Real, const R: usize, const C: usize>(m: nalgebra::SMatrix<T, R, C>) -> DMatrix<T> {
    DMatrix::from_fn(R, C, |i, j| m[(i, j)])
}

fn twist_to_vec<T: Real>(t: &Twist<T>) -> Vector6<T> {
    let mut v = Vector6::zeros();
    v.fixed_rows_mut::<3>(0).copy_from(&t.angular);
    v.fixed_rows_mut::<3>(3).copy_from(&t.linear);
    v
}

//! Combinatorial and sparse-recovery subroutines used by the attacker.

mod kmeans;
mod lsa;
mod omp;

pub use kmeans::{constrained_kmeans, constrained_kmeans_from, constrained_kmeans_restarts, ClusterLabels};
pub use lsa::{linear_sum_assignment, Assignment};
pub use omp::{omp_denoise, omp_steps, omp_steps_joint, StepFit};

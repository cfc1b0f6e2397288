use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::detect::DetectionReport;
use crate::scalar::Scalar;

/// Per-contract time, token and cost aggregates. Standard deviation is the
/// population form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overhead<T> {
    pub contracts: u64,
    pub runs: u64,
    pub mean_wall_seconds: T,
    pub std_wall_seconds: T,
    pub mean_tokens: T,
    pub mean_tokens_per_run: T,
    pub mean_cost: T,
    pub total_tokens: u64,
    pub total_cost: T,
}

/// `(mean, population std)`; zero for an empty sample.
pub fn mean_std<T: Scalar + Float>(xs: &[T]) -> (T, T) {
    if xs.is_empty() {
        return (T::zero(), T::zero());
    }
    let n = T::from_count(xs.len() as u64);
    let mean = xs.iter().fold(T::zero(), |a, x| a + *x) / n;
    let var = xs.iter().fold(T::zero(), |a, x| a + (*x - mean) * (*x - mean)) / n;
    (mean, var.sqrt())
}

pub fn aggregate_overhead<T: Scalar + Float>(reports: &[DetectionReport]) -> Overhead<T> {
    let cast = |x: f64| T::from_f64(x).unwrap_or_else(T::nan);
    let walls: Vec<T> = reports.iter().map(|r| cast(r.wall_seconds)).collect();
    let (mean_wall_seconds, std_wall_seconds) = mean_std(&walls);
    let total_tokens: u64 = reports.iter().map(|r| r.input_tokens + r.output_tokens).sum();
    let runs: u64 = reports.iter().map(|r| r.runs.len() as u64).sum();
    let total_cost = reports.iter().fold(T::zero(), |a, r| a + cast(r.cost));
    let per = |total: T, n: u64| if n == 0 { T::zero() } else { total / T::from_count(n) };
    let contracts = reports.len() as u64;
    Overhead {
        contracts,
        runs,
        mean_wall_seconds,
        std_wall_seconds,
        mean_tokens: per(T::from_count(total_tokens), contracts),
        mean_tokens_per_run: per(T::from_count(total_tokens), runs),
        mean_cost: per(total_cost, contracts),
        total_tokens,
        total_cost,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_population_std() {
        assert_eq!(mean_std(&[1.0f64, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[5.0f64]), (5.0, 0.0));
        assert_eq!(mean_std::<f32>(&[]), (0.0, 0.0));
    }
}

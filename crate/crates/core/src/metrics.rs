//! Evaluation quantities: accuracy, disentanglement error and activation edit
//! distances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arithmetic::{compose, TaskVector};
use crate::error::{ensure_len, Error, Result};
use crate::linearize::linear_forward_raw;
use crate::net::{argmax, forward_raw, Head, NetworkSpec, ParameterVector};
use crate::stats::Summary;
use crate::taskgen::Samples;

const CHUNK: usize = 64;

fn check_samples(spec: &NetworkSpec, samples: &Samples, what: &'static str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Empty(what));
    }
    ensure_len("input vector", spec.input_dim(), samples.dim)
}

/// Predicted class per sample, `argmax(head(f(x; θ)))`.
pub fn predictions(spec: &NetworkSpec, theta: &ParameterVector, head: &Head, samples: &Samples) -> Result<Vec<usize>> {
    theta.check(spec)?;
    ensure_len("head features", spec.feature_dim(), head.features())?;
    ensure_len("input vector", spec.input_dim(), samples.dim)?;
    Ok(predict_raw(spec, theta.values(), head, samples))
}

fn predict_raw(spec: &NetworkSpec, params: &[f64], head: &Head, samples: &Samples) -> Vec<usize> {
    samples
        .inputs
        .par_chunks(CHUNK * samples.dim)
        .flat_map_iter(|block| {
            block
                .chunks_exact(samples.dim)
                .map(|x| argmax(&head.logits(&forward_raw(spec, params, x))))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Fraction of samples whose predicted class equals the label.
pub fn accuracy(spec: &NetworkSpec, theta: &ParameterVector, head: &Head, samples: &Samples) -> Result<f64> {
    check_samples(spec, samples, "evaluation dataset")?;
    let preds = predictions(spec, theta, head, samples)?;
    let hits = preds.iter().zip(&samples.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Accuracy of the linearized model `head(f(x;θ0) + J τ)`.
pub fn linearized_accuracy(spec: &NetworkSpec, theta0: &ParameterVector, head: &Head, tau: &TaskVector, samples: &Samples) -> Result<f64> {
    check_samples(spec, samples, "evaluation dataset")?;
    tau.check_base(theta0)?;
    ensure_len("head features", spec.feature_dim(), head.features())?;
    let preds: Vec<usize> = samples
        .inputs
        .par_chunks(CHUNK * samples.dim)
        .flat_map_iter(|block| {
            block
                .chunks_exact(samples.dim)
                .map(|x| argmax(&head.logits(&linear_forward_raw(spec, theta0.values(), tau.values(), x, 1.0))))
                .collect::<Vec<_>>()
        })
        .collect();
    let hits = preds.iter().zip(&samples.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / samples.len() as f64)
}

fn mismatch_rate(a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
}

/// Summed prediction-mismatch rate between the merged model
/// `θ0 + α1 τ1 + α2 τ2` and each individual model `θ0 + α_t τ_t`, measured on
/// task `t`'s samples. Lies in `[0, 2]`.
#[allow(clippy::too_many_arguments)]
pub fn disentanglement_error(
    spec: &NetworkSpec,
    theta0: &ParameterVector,
    head: &Head,
    tau1: &TaskVector,
    tau2: &TaskVector,
    alpha1: f64,
    alpha2: f64,
    task1: &Samples,
    task2: &Samples,
) -> Result<f64> {
    check_samples(spec, task1, "first task dataset")?;
    check_samples(spec, task2, "second task dataset")?;
    let merged = compose(theta0, &[(alpha1, tau1), (alpha2, tau2)])?;
    let ind1 = compose(theta0, &[(alpha1, tau1)])?;
    let ind2 = compose(theta0, &[(alpha2, tau2)])?;
    let e1 = mismatch_rate(&predictions(spec, &merged, head, task1)?, &predictions(spec, &ind1, head, task1)?);
    let e2 = mismatch_rate(&predictions(spec, &merged, head, task2)?, &predictions(spec, &ind2, head, task2)?);
    Ok(e1 + e2)
}

/// Default heatmap axis `{0, 0.25, ..., 1.5}`.
pub fn heatmap_grid() -> Vec<f64> {
    (0..=6).map(|i| i as f64 * 0.25).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub grid1: Vec<f64>,
    pub grid2: Vec<f64>,
    /// `values[i][j]` is the error at `(grid1[i], grid2[j])`.
    pub values: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn mean(&self) -> f64 {
        let n = (self.grid1.len() * self.grid2.len()) as f64;
        self.values.iter().flatten().sum::<f64>() / n
    }

    /// Matrix CSV with the first row and column holding the grid values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha1\\alpha2");
        for a in &self.grid2 {
            out.push_str(&format!(",{a}"));
        }
        out.push('\n');
        for (a, row) in self.grid1.iter().zip(&self.values) {
            out.push_str(&a.to_string());
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Disentanglement error over the Cartesian product of two coefficient grids.
#[allow(clippy::too_many_arguments)]
pub fn disentanglement_heatmap(
    spec: &NetworkSpec,
    theta0: &ParameterVector,
    head: &Head,
    tau1: &TaskVector,
    tau2: &TaskVector,
    task1: &Samples,
    task2: &Samples,
    grid1: &[f64],
    grid2: &[f64],
) -> Result<Heatmap> {
    if grid1.is_empty() || grid2.is_empty() {
        return Err(Error::Empty("coefficient grid"));
    }
    check_samples(spec, task1, "first task dataset")?;
    check_samples(spec, task2, "second task dataset")?;
    tau1.check_base(theta0)?;
    tau2.check_base(theta0)?;
    ensure_len("head features", spec.feature_dim(), head.features())?;
    // Individual predictions depend on one coefficient only.
    let ind1: Vec<Vec<usize>> = grid1
        .iter()
        .map(|&a| Ok(predict_raw(spec, compose(theta0, &[(a, tau1)])?.values(), head, task1)))
        .collect::<Result<_>>()?;
    let ind2: Vec<Vec<usize>> = grid2
        .iter()
        .map(|&a| Ok(predict_raw(spec, compose(theta0, &[(a, tau2)])?.values(), head, task2)))
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = (0..grid1.len()).flat_map(|i| (0..grid2.len()).map(move |j| (i, j))).collect();
    let flat: Vec<f64> = cells
        .par_iter()
        .map(|&(i, j)| {
            let merged = compose(theta0, &[(grid1[i], tau1), (grid2[j], tau2)])?;
            let m1 = predict_raw(spec, merged.values(), head, task1);
            let m2 = predict_raw(spec, merged.values(), head, task2);
            Ok(mismatch_rate(&m1, &ind1[i]) + mismatch_rate(&m2, &ind2[j]))
        })
        .collect::<Result<_>>()?;
    let values = flat.chunks(grid2.len()).map(<[f64]>::to_vec).collect();
    Ok(Heatmap {
        grid1: grid1.to_vec(),
        grid2: grid2.to_vec(),
        values,
    })
}

/// `(1/d) ‖f(x; θ_t) − f(x; θ0)‖²` over the `d` output features.
pub fn edit_distance(spec: &NetworkSpec, theta0: &ParameterVector, theta_t: &ParameterVector, x: &[f64]) -> Result<f64> {
    theta0.check(spec)?;
    theta_t.check(spec)?;
    ensure_len("input vector", spec.input_dim(), x.len())?;
    Ok(edit_raw(spec, theta0.values(), theta_t.values(), x))
}

fn edit_raw(spec: &NetworkSpec, base: &[f64], tuned: &[f64], x: &[f64]) -> f64 {
    let a = forward_raw(spec, base, x);
    let b = forward_raw(spec, tuned, x);
    a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / a.len() as f64
}

fn edit_distances(spec: &NetworkSpec, base: &[f64], tuned: &[f64], samples: &Samples) -> Vec<f64> {
    samples
        .inputs
        .par_chunks(CHUNK * samples.dim)
        .flat_map_iter(|block| block.chunks_exact(samples.dim).map(|x| edit_raw(spec, base, tuned, x)).collect::<Vec<_>>())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDistances {
    pub values: Vec<f64>,
    pub summary: Summary,
}

impl DomainDistances {
    fn of(values: Vec<f64>) -> Option<Self> {
        let summary = Summary::of(&values)?;
        Some(Self { values, summary })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationCell {
    pub task: usize,
    pub in_domain: DomainDistances,
    /// Absent when there are no other tasks.
    pub out_of_domain: Option<DomainDistances>,
}

impl LocalizationCell {
    /// In-domain over out-of-domain median, when both exist.
    pub fn median_ratio(&self) -> Option<f64> {
        self.out_of_domain.as_ref().map(|o| self.in_domain.summary.median / o.summary.median)
    }
}

/// Per-task edit distances of `models[t]` on task `t` (in-domain) and on the
/// union of all other tasks (out-of-domain).
pub fn localization_profile(spec: &NetworkSpec, theta0: &ParameterVector, models: &[ParameterVector], tasks: &[Samples]) -> Result<Vec<LocalizationCell>> {
    ensure_len("fine-tuned models", tasks.len(), models.len())?;
    theta0.check(spec)?;
    for (m, t) in models.iter().zip(tasks) {
        m.check(spec)?;
        check_samples(spec, t, "task dataset")?;
    }
    let mut cells = Vec::with_capacity(tasks.len());
    for (t, model) in models.iter().enumerate() {
        let own = edit_distances(spec, theta0.values(), model.values(), &tasks[t]);
        let others: Vec<f64> = tasks
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != t)
            .flat_map(|(_, s)| edit_distances(spec, theta0.values(), model.values(), s))
            .collect();
        cells.push(LocalizationCell {
            task: t,
            in_domain: DomainDistances::of(own).expect("non-empty task"),
            out_of_domain: DomainDistances::of(others),
        });
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub alpha: f64,
    pub task_ids: Vec<String>,
    pub absolute: Vec<f64>,
    /// Percent of the individually fine-tuned accuracy; absent when that is 0.
    pub normalized: Vec<Option<f64>>,
    pub mean_absolute: f64,
    pub mean_normalized: Option<f64>,
}

impl EvalReport {
    pub fn new(method: impl Into<String>, alpha: f64, task_ids: Vec<String>, absolute: Vec<f64>, individual: Option<&[f64]>) -> Result<Self> {
        ensure_len("accuracies", task_ids.len(), absolute.len())?;
        if absolute.is_empty() {
            return Err(Error::Empty("accuracy list"));
        }
        let normalized: Vec<Option<f64>> = match individual {
            Some(ind) => {
                ensure_len("individual accuracies", absolute.len(), ind.len())?;
                absolute.iter().zip(ind).map(|(a, i)| (*i > 0.0).then(|| 100.0 * a / i)).collect()
            }
            None => vec![None; absolute.len()],
        };
        let mean_absolute = absolute.iter().sum::<f64>() / absolute.len() as f64;
        let mean_normalized = if normalized.iter().all(Option::is_some) {
            Some(normalized.iter().flatten().sum::<f64>() / normalized.len() as f64)
        } else {
            None
        };
        Ok(Self {
            method: method.into(),
            alpha,
            task_ids,
            absolute,
            normalized,
            mean_absolute,
            mean_normalized,
        })
    }

    /// Aligned-column text table, six significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!("method {}  alpha {}\n", self.method, sig6(self.alpha));
        out.push_str(&format!("{:<16}{:>14}{:>14}\n", "task", "accuracy", "normalized%"));
        for ((id, a), n) in self.task_ids.iter().zip(&self.absolute).zip(&self.normalized) {
            out.push_str(&format!("{:<16}{:>14}{:>14}\n", id, sig6(*a), n.map(sig6).unwrap_or_else(|| "-".into())));
        }
        out.push_str(&format!(
            "{:<16}{:>14}{:>14}\n",
            "mean",
            sig6(self.mean_absolute),
            self.mean_normalized.map(sig6).unwrap_or_else(|| "-".into())
        ));
        out
    }
}

/// Formats with six significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        let decimals = (5 - mag).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.5e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_setup(seed: u64) -> (NetworkSpec, ParameterVector, Head) {
        let spec = NetworkSpec::new(vec![4, 6, 3], Activation::Tanh, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = ParameterVector::new(&spec, (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let head = Head::new(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect(), vec![0.0; 3]).unwrap();
        (spec, theta, head)
    }

    fn random_samples(n: usize, dim: usize, seed: u64) -> Samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Samples {
            inputs: (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            labels: (0..n).map(|_| rng.random_range(0..3)).collect(),
            dim,
        }
    }

    fn random_tau(theta: &ParameterVector, seed: u64, scale: f64) -> TaskVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TaskVector::new(theta, (0..theta.len()).map(|_| rng.random_range(-scale..scale)).collect(), format!("t{seed}"), "test").unwrap()
    }

    #[test]
    fn accuracy_of_constructed_and_random_models() {
        // Identity net with identity head outputs the input; one-hot inputs are classified exactly.
        let spec = NetworkSpec::new(vec![3, 3], Activation::Identity, false).unwrap();
        let theta = ParameterVector::new(&spec, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let s = Samples {
            inputs: vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0],
            labels: vec![0, 2, 1],
            dim: 3,
        };
        assert_eq!(accuracy(&spec, &theta, &Head::identity(3), &s).unwrap(), 1.0);
        let one = Samples { inputs: vec![0.2, 0.9, 0.1], labels: vec![2], dim: 3 };
        assert_eq!(accuracy(&spec, &theta, &Head::identity(3), &one).unwrap(), 0.0);
        let empty = Samples { inputs: vec![], labels: vec![], dim: 3 };
        assert!(accuracy(&spec, &theta, &Head::identity(3), &empty).is_err());

        let (spec, theta, head) = random_setup(1);
        let s = random_samples(10_000, 4, 2);
        let acc = accuracy(&spec, &theta, &head, &s).unwrap();
        assert!((acc - 1.0 / 3.0).abs() <= 0.02, "{acc}");
    }

    #[test]
    fn linearized_accuracy_matches_exact_model_on_identity_nets() {
        let spec = NetworkSpec::new(vec![4, 3], Activation::Identity, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let theta = ParameterVector::new(&spec, (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let tau = random_tau(&theta, 31, 1.0);
        let s = random_samples(300, 4, 32);
        let head = Head::identity(3);
        let moved = compose(&theta, &[(1.0, &tau)]).unwrap();
        assert_eq!(
            linearized_accuracy(&spec, &theta, &head, &tau, &s).unwrap(),
            accuracy(&spec, &moved, &head, &s).unwrap()
        );
    }

    #[test]
    fn accuracy_invariant_to_head_rescaling() {
        let (spec, theta, head) = random_setup(3);
        let s = random_samples(500, 4, 4);
        let scaled = Head::new(3, 3, head.weights().iter().map(|w| w * 7.5).collect(), head.bias().to_vec()).unwrap();
        assert_eq!(accuracy(&spec, &theta, &head, &s).unwrap(), accuracy(&spec, &theta, &scaled, &s).unwrap());
    }

    #[test]
    fn disentanglement_properties() {
        let (spec, theta, head) = random_setup(5);
        let t1 = random_samples(200, 4, 6);
        let t2 = random_samples(200, 4, 7);
        let tau1 = random_tau(&theta, 8, 1.0);
        let tau2 = random_tau(&theta, 9, 1.0);
        let zero = TaskVector::zeros(&theta, "z", "test");
        assert_eq!(disentanglement_error(&spec, &theta, &head, &tau1, &tau2, 0.0, 0.0, &t1, &t2).unwrap(), 0.0);
        // With τ2 = 0 only the second term survives: merged vs. θ0 on task 2.
        for a in [0.3, 1.0, 1.5] {
            let e = disentanglement_error(&spec, &theta, &head, &tau1, &zero, a, 0.7, &t1, &t2).unwrap();
            let merged = compose(&theta, &[(a, &tau1)]).unwrap();
            let second = mismatch_rate(&predictions(&spec, &merged, &head, &t2).unwrap(), &predictions(&spec, &theta, &head, &t2).unwrap());
            assert_eq!(e, second);
        }
        let e12 = disentanglement_error(&spec, &theta, &head, &tau1, &tau2, 0.8, 1.2, &t1, &t2).unwrap();
        let e21 = disentanglement_error(&spec, &theta, &head, &tau2, &tau1, 1.2, 0.8, &t2, &t1).unwrap();
        assert_eq!(e12, e21);
        assert!((0.0..=2.0).contains(&e12));
        assert!(e12 > 0.0);
    }

    #[test]
    fn heatmap_matches_cells() {
        let (spec, theta, head) = random_setup(10);
        let t1 = random_samples(100, 4, 11);
        let t2 = random_samples(100, 4, 12);
        let tau1 = random_tau(&theta, 13, 0.8);
        let tau2 = random_tau(&theta, 14, 0.8);
        let h0 = disentanglement_heatmap(&spec, &theta, &head, &tau1, &tau2, &t1, &t2, &[0.0], &[0.0]).unwrap();
        assert_eq!(h0.values, vec![vec![0.0]]);
        let grid = heatmap_grid();
        assert_eq!(grid.len(), 7);
        let h = disentanglement_heatmap(&spec, &theta, &head, &tau1, &tau2, &t1, &t2, &grid, &grid[..3]).unwrap();
        let mut sum = 0.0;
        for (i, &a) in grid.iter().enumerate() {
            for (j, &b) in grid[..3].iter().enumerate() {
                let e = disentanglement_error(&spec, &theta, &head, &tau1, &tau2, a, b, &t1, &t2).unwrap();
                assert_eq!(h.values[i][j], e);
                sum += e;
            }
        }
        assert!((h.mean() - sum / 21.0).abs() <= 1e-15);
        let again = disentanglement_heatmap(&spec, &theta, &head, &tau1, &tau2, &t1, &t2, &grid, &grid[..3]).unwrap();
        assert_eq!(h, again);
        assert!(disentanglement_heatmap(&spec, &theta, &head, &tau1, &tau2, &t1, &t2, &[], &grid).is_err());
        assert_eq!(h.to_csv().lines().count(), 8);
    }

    #[test]
    fn edit_distance_examples() {
        let spec = NetworkSpec::new(vec![2, 2], Activation::Identity, false).unwrap();
        let base = ParameterVector::new(&spec, vec![0.5, -0.2, 0.3, 0.9]).unwrap();
        // ΔW = [[1, 0], [0, 1]] so ΔW x = (1, 1) for x = (1, 1).
        let tuned = ParameterVector::new(&spec, vec![1.5, -0.2, 0.3, 1.9]).unwrap();
        assert!((edit_distance(&spec, &base, &tuned, &[1.0, 1.0]).unwrap() - 1.0).abs() <= 1e-15);
        assert_eq!(edit_distance(&spec, &base, &base, &[3.0, -7.0]).unwrap(), 0.0);
        let other = NetworkSpec::new(vec![2, 3], Activation::Identity, false).unwrap();
        assert!(edit_distance(&other, &base, &tuned, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn localization_profile_conventions() {
        let (spec, theta, _) = random_setup(20);
        let tasks = vec![random_samples(50, 4, 21), random_samples(60, 4, 22)];
        let cells = localization_profile(&spec, &theta, &[theta.clone(), theta.clone()], &tasks).unwrap();
        for c in &cells {
            assert!(c.in_domain.values.iter().all(|&v| v == 0.0));
            assert!(c.out_of_domain.as_ref().unwrap().values.iter().all(|&v| v == 0.0));
        }
        assert_eq!(cells[0].out_of_domain.as_ref().unwrap().values.len(), 60);
        let single = localization_profile(&spec, &theta, std::slice::from_ref(&theta), &tasks[..1]).unwrap();
        assert!(single[0].out_of_domain.is_none());
        assert!(single[0].median_ratio().is_none());

        let moved = compose(&theta, &[(1.0, &random_tau(&theta, 23, 0.5))]).unwrap();
        let cells = localization_profile(&spec, &theta, &[moved.clone(), moved], &tasks).unwrap();
        let json = serde_json::to_string(&cells).unwrap();
        let back: Vec<LocalizationCell> = serde_json::from_str(&json).unwrap();
        for c in &back {
            assert_eq!(Summary::of(&c.in_domain.values).unwrap(), c.in_domain.summary);
        }
    }

    #[test]
    fn report_normalization() {
        let r = EvalReport::new("delta", 1.0, vec!["a".into(), "b".into()], vec![0.5, 0.9], Some(&[1.0, 0.9])).unwrap();
        assert_eq!(r.normalized, vec![Some(50.0), Some(100.0)]);
        assert_eq!(r.mean_normalized, Some(75.0));
        assert!((r.mean_absolute - 0.7).abs() < 1e-15);
        let r = EvalReport::new("x", 1.0, vec!["a".into()], vec![0.5], Some(&[0.0])).unwrap();
        assert_eq!(r.normalized, vec![None]);
        assert!(r.mean_normalized.is_none());
        assert!(r.to_text().contains("mean"));
        assert_eq!(sig6(0.123456789), "0.123457");
        assert_eq!(sig6(1234.56789), "1234.57");
        assert_eq!(sig6(1.0), "1.00000");
    }
}

//! Word-level attribution of answer correctness.
//!
//! A binary bag-of-words matrix over the prompt texts is fitted with an
//! L2-regularised logistic regression. For a linear model in margin space,
//! f(x) = w·x + b, the exact Shapley value of word j on instance i is
//! φ_ij = w_j (x_ij − mean_j), so Σ_j φ_ij = f(x_i) − mean f.
//!
//! The optimiser is a plain L-BFGS with Armijo backtracking, started at
//! zero, with fixed iteration cap and tolerance, so the same input always
//! yields the same weights bit for bit.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_range, ExecMode};
use crate::text::lower_words;

pub const DEFAULT_MIN_DF: usize = 5;
pub const DEFAULT_LAMBDA: f64 = 0.01;
const MAX_ITERATIONS: usize = 1000;
const GRADIENT_TOLERANCE: f64 = 1e-10;
const HISTORY: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapError {
    #[error("all records are {}", if *.0 { "correct" } else { "incorrect" })]
    DegenerateLabels(bool),
    #[error("{texts} texts but {labels} labels")]
    LengthMismatch { texts: usize, labels: usize },
    #[error("model vocabulary does not match the matrix")]
    VocabMismatch,
}

/// Binary word-presence matrix, stored as sorted column lists per row.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabMatrix {
    /// Ordered by document frequency (descending), then lexicographically.
    pub vocab: Vec<String>,
    /// Document frequency of each vocab word.
    pub df: Vec<usize>,
    pub rows: Vec<Vec<u32>>,
    pub y: Vec<bool>,
}

impl VocabMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.vocab.len()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.rows[row].binary_search(&(col as u32)).is_ok()
    }

    /// Fraction of rows containing each word.
    pub fn column_means(&self) -> Vec<f64> {
        let n = self.n_rows() as f64;
        self.df.iter().map(|&d| d as f64 / n).collect()
    }
}

/// Builds the matrix from texts and correctness labels. Words are
/// lowercased alphabetic tokens; stopwords are kept so that demographic
/// words remain candidates. Words in fewer than `min_df` texts are dropped.
pub fn build_vocab_matrix(texts: &[&str], correct: &[bool], min_df: usize) -> Result<VocabMatrix, ShapError> {
    if texts.len() != correct.len() {
        return Err(ShapError::LengthMismatch {
            texts: texts.len(),
            labels: correct.len(),
        });
    }
    if let Some(&first) = correct.first() {
        if correct.iter().all(|&c| c == first) {
            return Err(ShapError::DegenerateLabels(first));
        }
    } else {
        return Err(ShapError::DegenerateLabels(false));
    }
    let docs: Vec<BTreeSet<String>> = texts.iter().map(|t| lower_words(t).into_iter().collect()).collect();
    let mut df: HashMap<&str, usize> = HashMap::new();
    for d in &docs {
        for w in d {
            *df.entry(w.as_str()).or_insert(0) += 1;
        }
    }
    let mut vocab: Vec<(&str, usize)> = df.into_iter().filter(|&(_, c)| c >= min_df.max(1)).collect();
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let index: HashMap<&str, u32> = vocab.iter().enumerate().map(|(i, (w, _))| (*w, i as u32)).collect();
    let rows = docs
        .iter()
        .map(|d| {
            let mut cols: Vec<u32> = d.iter().filter_map(|w| index.get(w.as_str()).copied()).collect();
            cols.sort_unstable();
            cols
        })
        .collect();
    Ok(VocabMatrix {
        df: vocab.iter().map(|(_, c)| *c).collect(),
        vocab: vocab.into_iter().map(|(w, _)| w.to_string()).collect(),
        rows,
        y: correct.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub vocab: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    /// Objective value at the returned weights.
    pub loss: f64,
    pub iterations: usize,
    /// False when the iteration cap was reached first.
    pub converged: bool,
}

impl SurrogateModel {
    /// Margin (log-odds) for a row of `vm`.
    pub fn margin(&self, vm: &VocabMatrix, row: usize) -> f64 {
        self.intercept + vm.rows[row].iter().map(|&j| self.weights[j as usize]).sum::<f64>()
    }

    /// Mean margin over the rows of `vm`, i.e. the Shapley baseline.
    pub fn expected_margin(&self, vm: &VocabMatrix) -> f64 {
        self.intercept
            + self
                .weights
                .iter()
                .zip(vm.column_means())
                .map(|(w, m)| w * m)
                .sum::<f64>()
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Objective and gradient; `theta` holds the weights then the intercept.
fn objective(vm: &VocabMatrix, lambda: f64, theta: &[f64], grad: &mut [f64]) -> f64 {
    let p = vm.n_cols();
    let n = vm.n_rows() as f64;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for (row, &y) in vm.rows.iter().zip(&vm.y) {
        let z = theta[p] + row.iter().map(|&j| theta[j as usize]).sum::<f64>();
        let y = y as u8 as f64;
        loss += softplus(z) - y * z;
        let r = sigmoid(z) - y;
        for &j in row {
            grad[j as usize] += r;
        }
        grad[p] += r;
    }
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    let mut penalty = 0.0;
    for j in 0..p {
        penalty += theta[j] * theta[j];
        grad[j] += lambda * theta[j];
    }
    loss + 0.5 * lambda * penalty
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fits the surrogate with the default regularisation.
pub fn fit_surrogate(vm: &VocabMatrix) -> SurrogateModel {
    fit_surrogate_with(vm, DEFAULT_LAMBDA)
}

pub fn fit_surrogate_with(vm: &VocabMatrix, lambda: f64) -> SurrogateModel {
    let dim = vm.n_cols() + 1;
    let mut theta = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut loss = objective(vm, lambda, &theta, &mut grad);
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::with_capacity(HISTORY);
    let mut iterations = 0;
    let mut converged = inf_norm(&grad) < GRADIENT_TOLERANCE;

    while !converged && iterations < MAX_ITERATIONS {
        iterations += 1;
        // Two-loop recursion for the search direction.
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = history.last().map_or(1.0 / inf_norm(&grad).max(1.0), |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|qi| *qi *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut direction: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&grad, &direction);
        if slope >= 0.0 {
            // Not a descent direction: restart from steepest descent.
            history.clear();
            direction = grad.iter().map(|g| -g).collect();
            slope = dot(&grad, &direction);
        }

        // Armijo backtracking.
        let mut step = 1.0;
        let mut new_theta = vec![0.0; dim];
        let mut new_grad = vec![0.0; dim];
        let mut new_loss;
        let mut accepted = false;
        for _ in 0..60 {
            new_theta.iter_mut().zip(&theta).zip(&direction).for_each(|((n, t), d)| *n = t + step * d);
            new_loss = objective(vm, lambda, &new_theta, &mut new_grad);
            if new_loss <= loss + 1e-4 * step * slope {
                let s: Vec<f64> = new_theta.iter().zip(&theta).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-16 {
                    if history.len() == HISTORY {
                        history.remove(0);
                    }
                    history.push((s, y, 1.0 / sy));
                }
                std::mem::swap(&mut theta, &mut new_theta);
                std::mem::swap(&mut grad, &mut new_grad);
                loss = new_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No further decrease is representable; treat as converged.
            converged = inf_norm(&grad) < GRADIENT_TOLERANCE.sqrt();
            break;
        }
        converged = inf_norm(&grad) < GRADIENT_TOLERANCE;
    }
    if !converged {
        log::warn!(
            "surrogate fit stopped after {iterations} iterations (gradient {:.3e})",
            inf_norm(&grad)
        );
    }
    let intercept = theta.pop().expect("intercept slot");
    SurrogateModel {
        vocab: vm.vocab.clone(),
        weights: theta,
        intercept,
        lambda,
        loss,
        iterations,
        converged,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImpact {
    pub word: String,
    /// Mean Shapley value over the instances containing the word.
    pub impact: f64,
    /// 1-based rank by |impact|.
    pub rank: usize,
    pub n_present: usize,
}

fn check_vocab(model: &SurrogateModel, vm: &VocabMatrix) -> Result<(), ShapError> {
    if model.vocab != vm.vocab {
        return Err(ShapError::VocabMismatch);
    }
    Ok(())
}

/// Dense Shapley values of every word for one instance.
pub fn local_shap(model: &SurrogateModel, vm: &VocabMatrix, row: usize) -> Result<Vec<f64>, ShapError> {
    check_vocab(model, vm)?;
    let means = vm.column_means();
    let mut phi: Vec<f64> = model.weights.iter().zip(&means).map(|(w, m)| -w * m).collect();
    for &j in &vm.rows[row] {
        phi[j as usize] += model.weights[j as usize];
    }
    Ok(phi)
}

/// Local Shapley values for all instances.
pub fn all_local_shap(model: &SurrogateModel, vm: &VocabMatrix, mode: ExecMode) -> Result<Vec<Vec<f64>>, ShapError> {
    check_vocab(model, vm)?;
    Ok(map_range(mode, vm.n_rows(), |i| local_shap(model, vm, i).expect("vocab checked")))
}

/// Per-word impacts ranked by magnitude, ties broken by word.
pub fn shap_values(model: &SurrogateModel, vm: &VocabMatrix) -> Result<Vec<FeatureImpact>, ShapError> {
    check_vocab(model, vm)?;
    let means = vm.column_means();
    let mut impacts: Vec<FeatureImpact> = vm
        .vocab
        .iter()
        .enumerate()
        .map(|(j, word)| FeatureImpact {
            word: word.clone(),
            impact: model.weights[j] * (1.0 - means[j]),
            rank: 0,
            n_present: vm.df[j],
        })
        .collect();
    impacts.sort_by(|a, b| {
        b.impact
            .abs()
            .total_cmp(&a.impact.abs())
            .then_with(|| a.word.cmp(&b.word))
    });
    for (i, f) in impacts.iter_mut().enumerate() {
        f.rank = i + 1;
    }
    Ok(impacts)
}

/// Writes `word,impact,rank,n_present`.
pub fn write_impacts_csv<W: Write>(w: W, impacts: &[FeatureImpact]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["word", "impact", "rank", "n_present"])?;
    for f in impacts {
        out.write_record([
            f.word.clone(),
            format!("{:.6}", f.impact),
            f.rank.to_string(),
            f.n_present.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vm(texts: &[&str], y: &[bool], min_df: usize) -> VocabMatrix {
        build_vocab_matrix(texts, y, min_df).unwrap()
    }

    #[test]
    fn construction_and_thresholds() {
        let m = vm(&["the Black man", "the black woman", "a cat"], &[true, false, true], 1);
        assert_eq!(m.vocab[..2], ["black", "the"].map(String::from));
        let black = 0;
        assert!(m.contains(0, black) && m.contains(1, black) && !m.contains(2, black));
        let m2 = vm(&["the Black man", "the black woman", "a cat"], &[true, false, true], 2);
        assert_eq!(m2.vocab, ["black", "the"].map(String::from));
        assert!(m2.rows[2].is_empty());
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(build_vocab_matrix(&["a", "b"], &[true, true], 1), Err(ShapError::DegenerateLabels(true)));
        assert_eq!(build_vocab_matrix(&[], &[], 1), Err(ShapError::DegenerateLabels(false)));
        assert!(matches!(build_vocab_matrix(&["a"], &[true, false], 1), Err(ShapError::LengthMismatch { .. })));
    }

    #[test]
    fn no_signal_gives_zero_weights_and_base_rate_intercept() {
        let texts = ["same words here"; 10];
        let y = [true, true, true, false, false, false, false, false, false, false];
        let m = fit_surrogate(&vm(&texts, &y, 1));
        assert!(m.converged);
        assert!(m.weights.iter().all(|w| w.abs() < 1e-8), "{:?}", m.weights);
        assert!((m.intercept - (0.3f64 / 0.7).ln()).abs() < 1e-8);
    }

    #[test]
    fn separable_word_dominates_and_ranks_first() {
        let mut texts = Vec::new();
        let mut y = Vec::new();
        for i in 0..200 {
            let bad = i % 3 == 0;
            let filler = ["fever", "cough", "rash", "pain"][i % 4];
            texts.push(if bad { format!("patient black {filler} case") } else { format!("patient {filler} case") });
            y.push(!bad);
        }
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let v = vm(&refs, &y, 5);
        let model = fit_surrogate(&v);
        let black = v.vocab.iter().position(|w| w == "black").unwrap();
        let max_other = (0..v.n_cols()).filter(|&j| j != black).map(|j| model.weights[j].abs()).fold(0.0, f64::max);
        assert!(model.weights[black].abs() > max_other);
        let impacts = shap_values(&model, &v).unwrap();
        assert_eq!(impacts[0].word, "black");
        assert!(impacts[0].impact < 0.0);
        assert_eq!(impacts[0].rank, 1);
    }

    #[test]
    fn efficiency_and_symmetry() {
        let texts = ["a b x", "a c", "b c x", "a b", "c x", "a x", "b", "a b c x"];
        let y = [true, false, true, false, true, true, false, true];
        let v = vm(&texts, &y, 1);
        let model = fit_surrogate(&v);
        let base = model.expected_margin(&v);
        for (i, phi) in all_local_shap(&model, &v, ExecMode::default()).unwrap().iter().enumerate() {
            let total: f64 = phi.iter().sum();
            assert!((total - (model.margin(&v, i) - base)).abs() < 1e-9);
        }
        // Two identical columns get identical weights and impacts.
        let texts = ["p q a", "p q", "a", "b", "p q b", "a b"];
        let y = [true, true, false, false, true, false];
        let v = vm(&texts, &y, 1);
        let model = fit_surrogate(&v);
        let (p, q) = (v.vocab.iter().position(|w| w == "p").unwrap(), v.vocab.iter().position(|w| w == "q").unwrap());
        assert_eq!(model.weights[p], model.weights[q]);
    }

    #[test]
    fn duplicating_records_leaves_weights_unchanged() {
        let texts = ["a b x", "a c", "b c x", "a b", "c x", "a x"];
        let y = [true, false, true, false, true, false];
        let once = fit_surrogate(&vm(&texts, &y, 1));
        let texts2: Vec<&str> = texts.iter().chain(texts.iter()).copied().collect();
        let y2: Vec<bool> = y.iter().chain(y.iter()).copied().collect();
        let twice = fit_surrogate(&vm(&texts2, &y2, 1));
        for (a, b) in once.weights.iter().zip(&twice.weights) {
            assert!((a - b).abs() < 1e-7);
        }
        // And refitting is bit-stable.
        assert_eq!(once, fit_surrogate(&vm(&texts, &y, 1)));
    }

    #[test]
    fn zero_weight_means_zero_impact_and_vocab_is_checked() {
        let v = vm(&["a b", "a", "b", "a b"], &[true, false, true, false], 1);
        let mut model = fit_surrogate(&v);
        model.weights[0] = 0.0;
        let impacts = shap_values(&model, &v).unwrap();
        assert_eq!(impacts.iter().find(|f| f.word == v.vocab[0]).unwrap().impact, 0.0);
        model.vocab.push("extra".into());
        assert_eq!(shap_values(&model, &v), Err(ShapError::VocabMismatch));
    }

    #[test]
    fn impact_csv() {
        let impacts = vec![FeatureImpact {
            word: "black".into(),
            impact: -0.6,
            rank: 1,
            n_present: 12,
        }];
        let mut buf = Vec::new();
        write_impacts_csv(&mut buf, &impacts).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "word,impact,rank,n_present\nblack,-0.600000,1,12\n");
    }
}

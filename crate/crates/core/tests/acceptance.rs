//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Runs with `cargo test --test acceptance`.

mod support;

use std::time::{Duration, Instant};

use cpvaudit::cpv::build_cpv;
use cpvaudit::demographics::{BiasAttribute, Ethnicity, Gender, GroupKey};
use cpvaudit::embedbias::{
    compute_gender_direction, cosine, embed, sliding_window_embed, window_starts, window_texts, EmbeddingCache,
    EmbeddingSource, Orientation, SeededMock, DEFAULT_WINDOW_STEP, DEFAULT_WINDOW_TOKENS,
};
use cpvaudit::prompting::{extra, render, solution_text, PromptTemplate, TemplateKind};
use cpvaudit::statmetrics::{accuracy, accuracy_delta, coefficient_of_variation, equality_of_odds, skewsize, Z99};
use cpvaudit::wordshap::{build_vocab_matrix, fit_surrogate, local_shap, shap_values};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use support::*;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(value: f64, target: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure(
        (value - target).abs() <= tol,
        format!("{what} = {value:.4}, expected {target} ± {tol}"),
    )
}

/// Three group accuracies from the deltas against the neutral group and the
/// unweighted overall mean: A_N = overall − (Δ_F + Δ_M)/3.
fn from_deltas(overall: f64, delta_female: f64, delta_male: f64) -> [f64; 3] {
    let neutral = overall - (delta_female + delta_male) / 3.0;
    [neutral + delta_male, neutral + delta_female, neutral]
}

fn eo_cv_reproduction() -> Outcome {
    let accs = [39.92, 40.49, 40.57];
    let (eo, cv) = (equality_of_odds(&accs).unwrap(), coefficient_of_variation(&accs).unwrap());
    within(eo, 0.65, 0.01, "EO{39.92,40.49,40.57}")?;
    within(cv, 0.87, 0.01, "CV{39.92,40.49,40.57}")?;

    let gpt35 = from_deltas(42.30, 1.00, 0.00);
    let (eo35, cv35) = (equality_of_odds(&gpt35).unwrap(), coefficient_of_variation(&gpt35).unwrap());
    within(cv35, 1.37, 0.02, "CV(GPT-3.5)")?;
    ensure((eo35 - 1.00).abs() < 1e-9, format!("EO(GPT-3.5) = {eo35}, expected exactly 1.00"))?;

    let turbo = from_deltas(58.80, 0.00, -0.50);
    let (eot, cvt) = (equality_of_odds(&turbo).unwrap(), coefficient_of_variation(&turbo).unwrap());
    within(cvt, 0.49, 0.02, "CV(GPT-4 Turbo)")?;
    within(eot, 0.50, 1e-9, "EO(GPT-4 Turbo)")?;
    Ok(format!(
        "EO {eo:.4} CV {cv:.4}; GPT-3.5 EO {eo35:.2} CV {cv35:.4}; GPT-4 Turbo EO {eot:.2} CV {cvt:.4}"
    ))
}

fn cpv_cardinality() -> Outcome {
    let n = 1000;
    let cases = synthetic_corpus(n);
    let started = Instant::now();
    let gender_only = build_cpv(&cases, &Gender::ALL, &[None]);
    let gender_time = started.elapsed();
    let ethnicities = [Some(Ethnicity::White), Some(Ethnicity::Black), Some(Ethnicity::Asian)];
    let started = Instant::now();
    let gxe = build_cpv(&cases, &Gender::ALL, &ethnicities);
    let gxe_time = started.elapsed();
    ensure(gender_only.failures.is_empty() && gxe.failures.is_empty(), "unexpected CPV failures")?;
    ensure(gender_only.variants.len() == 3 * n, format!("gender-only: {} variants", gender_only.variants.len()))?;
    ensure(gxe.variants.len() == 10 * n, format!("gender×ethnicity: {} variants", gxe.variants.len()))?;
    let limit = Duration::from_secs(1);
    ensure(gender_time < limit && gxe_time < limit, format!("too slow: {gender_time:?} / {gxe_time:?}"))?;
    Ok(format!(
        "N={n}: {} ({gender_time:.0?}) and {} ({gxe_time:.0?}) variants",
        gender_only.variants.len(),
        gxe.variants.len()
    ))
}

/// Half-width of the 99% normal-approximation CI of a difference of two
/// proportions, in percentage points.
fn diff_ci(p1: f64, n1: usize, p2: f64, n2: usize) -> f64 {
    100.0 * Z99 * (p1 * (1.0 - p1) / n1 as f64 + p2 * (1.0 - p2) / n2 as f64).sqrt()
}

fn planted_bias() -> Outcome {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let n = 2000;
    let male = GroupKey::gender(Gender::Male);
    let female = GroupKey::gender(Gender::Female);
    let count = |rs: &[cpvaudit::statmetrics::OutcomeRecord], g: &GroupKey| rs.iter().filter(|r| r.in_group(g)).count();

    let cfg = mock_experiment(tmp.path(), "planted", n, &[("Male", 0.6), ("Female", 0.5), ("Neutral", 0.55)], 1);
    let rs = run_mock(&cfg);
    let (nm, nf) = (count(&rs, &male), count(&rs, &female));
    ensure(nm >= 2000 && nf >= 2000, format!("only {nm}/{nf} variants per group"))?;
    let delta = accuracy_delta(&male, &female, &rs).unwrap();
    let (am, af) = (accuracy(&rs, &male).unwrap() / 100.0, accuracy(&rs, &female).unwrap() / 100.0);
    let ci = diff_ci(am, nm, af, nf);
    ensure((delta - 10.0).abs() <= ci, format!("Δ(Male, Female) = {delta:.2}, outside 10 ± {ci:.2}"))?;

    let mut skews = Vec::new();
    let mut max_ratio: f64 = 0.0;
    for rep in 0..20u64 {
        let name = format!("equal{rep}");
        let cfg = mock_experiment(tmp.path(), &name, n, &[("Any", 0.55)], 100 + rep);
        let rs = run_mock(&cfg);
        let d = accuracy_delta(&male, &female, &rs).unwrap();
        let (am, af) = (accuracy(&rs, &male).unwrap() / 100.0, accuracy(&rs, &female).unwrap() / 100.0);
        let ci0 = diff_ci(am, count(&rs, &male), af, count(&rs, &female));
        ensure(d.abs() <= ci0, format!("repetition {rep}: |Δ| = {:.2} outside CI ±{ci0:.2}", d.abs()))?;
        max_ratio = max_ratio.max(d.abs() / ci0);
        skews.push(skewsize(&rs, BiasAttribute::Gender).unwrap());
        std::fs::remove_dir_all(tmp.path().join("runs").join(&name)).ok();
    }
    let mean_skew = skews.iter().sum::<f64>() / skews.len() as f64;
    ensure(
        (-0.5..=0.5).contains(&mean_skew),
        format!("mean SkewSize {mean_skew:.3} outside [-0.5, 0.5]"),
    )?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    let (lo, hi) = skews
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), s| (l.min(*s), h.max(*s)));
    Ok(format!(
        "Δ = {delta:.2} (CI ±{ci:.2}); equal: max |Δ|/CI {max_ratio:.2}, mean SkewSize {mean_skew:.3} \
         (range {lo:.2}..{hi:.2}) over 20 reps; {elapsed:.1?}"
    ))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn direction_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let std = Normal::new(0.0, 1.0).unwrap();
    let d = 64;
    let u: Vec<f64> = (0..d).map(|_| std.sample(&mut rng)).collect();
    let sigma = 0.05 * u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diffs: Vec<Vec<f64>> = (0..100)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            u.iter().map(|x| sign * x + sigma * std.sample(&mut rng)).collect()
        })
        .collect();
    let dir = compute_gender_direction(&diffs, Orientation::FirstPair, None).unwrap();
    let cos = cosine(&dir.g, &u).abs();
    ensure(cos >= 0.99, format!("|cos(g, u)| = {cos:.5}"))?;

    // Brute-force eigendecomposition oracles in five dimensions.
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let u: Vec<f64> = (0..5).map(|_| std.sample(&mut rng)).collect();
        let diffs: Vec<Vec<f64>> = (0..30)
            .map(|_| u.iter().map(|x| x + 0.5 * std.sample(&mut rng)).collect())
            .collect();
        let n = diffs.len() as f64;
        let m = DMatrix::from_fn(5, 5, |i, j| diffs.iter().map(|v| v[i] * v[j]).sum::<f64>() / n);
        let eig = SymmetricEigen::new(m.clone());
        let top = eig.eigenvalues.imax();
        let oracle: Vec<f64> = unit(eig.eigenvectors.column(top).as_slice());
        let ratio = eig.eigenvalues[top] / m.trace();
        let dir = compute_gender_direction(&diffs, Orientation::FirstPair, None).unwrap();
        let sign = if cosine(&dir.g, &oracle) < 0.0 { -1.0 } else { 1.0 };
        let err = dir
            .g
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - sign * b).abs())
            .fold(0.0, f64::max)
            .max((dir.explained_variance_ratio - ratio).abs());
        worst = worst.max(err);
    }
    ensure(worst <= 1e-8, format!("power iteration vs eigendecomposition: max error {worst:.2e}"))?;
    Ok(format!(
        "D=64 |cos| = {cos:.5} (explained variance {:.3}); D=5 oracles max error {worst:.1e}",
        dir.explained_variance_ratio
    ))
}

fn sliding_windows() -> Outcome {
    let (m, s) = (DEFAULT_WINDOW_TOKENS, DEFAULT_WINDOW_STEP);
    ensure((m, s) == (68, 32), "defaults are not M = 68, S = 32")?;
    let expected: [(usize, &[usize]); 4] = [(10, &[0]), (68, &[0]), (69, &[0, 32]), (100, &[0, 32, 64])];
    for (n, starts) in expected {
        let got = window_starts(n, m, s).unwrap();
        ensure(got == starts, format!("{n} tokens: starts {got:?}, expected {starts:?}"))?;
        let text: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let windows = window_texts(&text.join(" "), m, s).unwrap();
        ensure(windows.len() == starts.len(), format!("{n} tokens: {} windows", windows.len()))?;
    }
    let text = "The patient reported mild chest pain after exercise and shortness of breath";
    let mock = EmbeddingSource::SeededMock(SeededMock::new(32, 3));
    let windowed = sliding_window_embed(text, m, s, &mock).unwrap();
    let full = embed(&[text], &mock).unwrap().remove(0);
    ensure(windowed.values == full.values, "single window differs from full-text embedding (mock)")?;
    let mut cache = EmbeddingCache::new();
    cache
        .insert(cpvaudit::embedbias::text_id(text), vec![0.1, -0.2, 0.30000000000000004])
        .unwrap();
    let cached = EmbeddingSource::Cache(cache);
    let windowed = sliding_window_embed(text, m, s, &cached).unwrap();
    ensure(
        windowed.values == vec![0.1, -0.2, 0.30000000000000004],
        "single window differs from full-text embedding (cache)",
    )?;
    Ok("starts {0}/{0}/{0,32}/{0,32,64}; single window bit-exact".into())
}

/// 500 records of filler words plus a word present exactly when the label
/// is `planted_when`.
fn planted_corpus(seed: u64, planted: &str, planted_when: bool) -> (Vec<String>, Vec<bool>) {
    let filler: Vec<String> = (0..60).map(|i| format!("filler{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut texts = Vec::new();
    let mut y = Vec::new();
    for _ in 0..500 {
        let label = rng.random_bool(0.5);
        let mut words: Vec<&str> = (0..12).map(|_| filler[rng.random_range(0..filler.len())].as_str()).collect();
        if label == planted_when {
            words.insert(rng.random_range(0..words.len()), planted);
        }
        texts.push(words.join(" "));
        y.push(label);
    }
    (texts, y)
}

fn shapley_surrogate() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for (seed, word, when) in [(1, "zebra", true), (2, "yak", false)] {
        let (texts, y) = planted_corpus(seed, word, when);
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let vm = build_vocab_matrix(&refs, &y, 5).unwrap();
        let model = fit_surrogate(&vm);
        let base = model.expected_margin(&vm);
        for row in 0..vm.n_rows() {
            let phi: f64 = local_shap(&model, &vm, row).unwrap().iter().sum();
            worst = worst.max((phi - (model.margin(&vm, row) - base)).abs());
        }
        let impacts = shap_values(&model, &vm).unwrap();
        let top = &impacts[0];
        ensure(top.word == word, format!("rank 1 is `{}`, expected `{word}`", top.word))?;
        ensure(
            (top.impact > 0.0) == when,
            format!("`{word}` impact {:.3} has the wrong sign", top.impact),
        )?;
        details.push(format!("`{word}` rank 1 impact {:+.3}", top.impact));
    }
    ensure(worst <= 1e-9, format!("efficiency error {worst:.2e}"))?;
    Ok(format!("{}; max efficiency error {worst:.1e}", details.join(", ")))
}

fn invariants() -> Outcome {
    let c = PROPERTY_CASES;
    to_case_error(delta_antisymmetry(c)).map_err(|e| format!("Δ antisymmetry: {e}"))?;
    to_case_error(eo_cv_permutation_invariance(c)).map_err(|e| format!("EO/CV permutation: {e}"))?;
    to_case_error(cv_scale_invariance(c)).map_err(|e| format!("CV scale: {e}"))?;
    to_case_error(bias_score_signs(c)).map_err(|e| format!("bias score signs: {e}"))?;
    to_case_error(median_bias_identity(c)).map_err(|e| format!("MB identity: {e}"))?;
    Ok(format!("5 properties × {c} cases"))
}

fn prompt_fidelity() -> Outcome {
    let golden: [(TemplateKind, &str); 6] = [
        (TemplateKind::Q, include_str!("golden/q.txt")),
        (TemplateKind::QIF, include_str!("golden/qif.txt")),
        (TemplateKind::QIFCoT, include_str!("golden/qif_cot.txt")),
        (TemplateKind::FTMCQ, include_str!("golden/ft_mcq.txt")),
        (TemplateKind::FTXPL, include_str!("golden/ft_xpl.txt")),
        (TemplateKind::NoOptions, include_str!("golden/no_options.txt")),
    ];
    let case = &fixture_cases()[0];
    let variant = build_cpv(std::slice::from_ref(case), &[Gender::Male], &[None])
        .variants
        .into_iter()
        .find(|v| v.is_original)
        .unwrap();
    let tokens = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    for (kind, text) in golden {
        let extras = match kind {
            TemplateKind::FTXPL => extra(&[("SOLUTION", &solution_text(case))]),
            _ => Default::default(),
        };
        let p = render(PromptTemplate::builtin(kind), &variant, &extras).map_err(|e| e.to_string())?;
        let (sys, user) = text
            .strip_prefix("=== system ===\n")
            .and_then(|g| g.split_once("=== user ===\n"))
            .ok_or("golden layout")?;
        ensure(tokens(&p.system) == tokens(sys), format!("{kind:?} system prompt differs"))?;
        ensure(tokens(&p.user) == tokens(user), format!("{kind:?} user prompt differs"))?;
    }
    Ok("Q, QIF, QIFCoT, FTMCQ, FTXPL, NoOptions match token for token".into())
}

fn resume_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (straight, resumed, calls) = straight_and_resumed(tmp.path(), 47);
    ensure(!straight.is_empty(), "empty store")?;
    ensure(straight == resumed, "resumed store differs from the uninterrupted one")?;
    Ok(format!(
        "{} bytes identical; resume made {calls} calls",
        straight.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("EO/CV reproduction from reported tables", eo_cv_reproduction),
        ("CPV cardinality 3N / 10N", cpv_cardinality),
        ("planted-bias end-to-end", planted_bias),
        ("gender-direction recovery", direction_recovery),
        ("sliding-window contract", sliding_windows),
        ("Shapley surrogate properties", shapley_surrogate),
        ("metric invariants suite", invariants),
        ("prompt fidelity", prompt_fidelity),
        ("resume determinism", resume_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = started.elapsed();
        match result {
            Ok(detail) => println!("PASS [{}] {name}: {detail} [{elapsed:.2?}]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why} [{elapsed:.2?}]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

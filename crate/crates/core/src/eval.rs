//! Boxed-answer extraction, pass@k and majority voting, and the synthetic
//! arithmetic task family.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conversion::ChatRecord;
use crate::error::{invalid, Result};
use crate::tensor::SeededRng;

/// Appended to every question, in training and evaluation.
pub const BOXED_SUFFIX: &str = "Let's think step by step and output the final answer within \\boxed{}";

/// Trims, collapses runs of whitespace, strips leading zeros from integers
/// and reduces plain `a/b` fractions. Anything else passes through.
pub fn canonicalize(s: &str) -> String {
    let s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if let Some(i) = canon_int(&s) {
        return i;
    }
    if let Some((a, b)) = s.split_once('/') {
        if let (Some(n), Some(d)) = (canon_int(a.trim()), canon_int(b.trim())) {
            return canon_fraction(&n, &d).unwrap_or_else(|| format!("{n}/{d}"));
        }
    }
    s
}

fn canon_int(s: &str) -> Option<String> {
    let (neg, digits) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let body = digits.trim_start_matches('0');
    Some(match (body.is_empty(), neg) {
        (true, _) => "0".to_string(),
        (false, true) => format!("-{body}"),
        (false, false) => body.to_string(),
    })
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn canon_fraction(n: &str, d: &str) -> Option<String> {
    let (nn, dn) = (n.starts_with('-'), d.starts_with('-'));
    let a: u128 = n.trim_start_matches('-').parse().ok()?;
    let b: u128 = d.trim_start_matches('-').parse().ok()?;
    if b == 0 {
        return None;
    }
    let g = gcd(a, b).max(1);
    let (a, b) = (a / g, b / g);
    let sign = if nn != dn && a != 0 { "-" } else { "" };
    Some(if b == 1 { format!("{sign}{a}") } else { format!("{sign}{a}/{b}") })
}

/// Raw contents of the last `\boxed{…}` whose braces balance.
pub fn last_boxed(text: &str) -> Option<&str> {
    const OPEN: &str = "\\boxed{";
    let mut found = None;
    for (start, _) in text.match_indices(OPEN) {
        let body = start + OPEN.len();
        let mut depth = 1usize;
        for (i, ch) in text[body..].char_indices() {
            match ch {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        found = Some(&text[body..body + i]);
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    found
}

/// Canonical form of the last balanced boxed answer, if any.
pub fn extract_answer(text: &str) -> Option<String> {
    last_boxed(text).map(canonicalize)
}

/// 1 when the completion's boxed answer matches `gold`, else 0.
pub fn reward_boxed(completion: &str, gold: &str) -> f64 {
    match extract_answer(completion) {
        Some(a) if a == canonicalize(gold) => 1.0,
        _ => 0.0,
    }
}

/// Sampled answers for one problem.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemResult {
    pub id: String,
    /// Samples drawn.
    pub n: usize,
    /// Samples judged correct.
    pub correct: usize,
    /// Canonical extracted answer per sample (`None` when unboxed).
    pub answers: Vec<Option<String>>,
    pub gold: String,
}

impl ProblemResult {
    /// Scores `completions` against `gold`.
    pub fn score(id: impl Into<String>, gold: &str, completions: &[String]) -> Self {
        let g = canonicalize(gold);
        let answers: Vec<_> = completions.iter().map(|c| extract_answer(c)).collect();
        Self {
            id: id.into(),
            n: answers.len(),
            correct: answers.iter().filter(|a| a.as_deref() == Some(g.as_str())).count(),
            answers,
            gold: g,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.correct > self.n || self.answers.len() != self.n {
            return Err(invalid(format!(
                "problem {}: n={} correct={} answers={}",
                self.id,
                self.n,
                self.correct,
                self.answers.len()
            )));
        }
        Ok(())
    }
}

/// Unbiased pass@k for one problem, `1 - prod_{i<k} (n-c-i)/(n-i)`.
pub fn pass_at_k_single(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n || c > n {
        return Err(invalid(format!("pass@k needs 0 < k <= n and c <= n (n={n}, c={c}, k={k})")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut miss = 1.0;
    for i in 0..k {
        miss *= (n - c - i) as f64 / (n - i) as f64;
    }
    Ok(1.0 - miss)
}

/// Mean unbiased pass@k over problems.
pub fn pass_at_k(results: &[ProblemResult], k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(invalid("pass@k over zero problems"));
    }
    let mut sum = 0.0;
    for r in results {
        r.validate()?;
        sum += pass_at_k_single(r.n, r.correct, k)?;
    }
    Ok(sum / results.len() as f64)
}

/// Modal answer; ties go to the lexicographically smallest. Unboxed
/// samples do not vote.
pub fn majority<'a>(answers: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(a).or_default() += 1;
    }
    // BTreeMap iterates in key order, so the first maximum is the smallest
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|&(_, c)| c == best).map(|(a, _)| a)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MajAtK {
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
    /// Accuracy averaged over trials and problems.
    pub accuracy: f64,
    /// Sample standard deviation of the per-trial accuracies.
    pub trial_std: f64,
}

/// maj@k: each trial draws `k` of the `n` answers per problem without
/// replacement and scores the modal one.
pub fn maj_at_k(results: &[ProblemResult], k: usize, trials: usize, seed: u64) -> Result<MajAtK> {
    if results.is_empty() || trials == 0 {
        return Err(invalid("maj@k needs at least one problem and one trial"));
    }
    for r in results {
        r.validate()?;
        if k == 0 || k > r.n {
            return Err(invalid(format!("maj@k: k={k} out of range for problem {} with n={}", r.id, r.n)));
        }
    }
    let mut rng = SeededRng::new(seed, 0);
    let mut accs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut hits = 0usize;
        for r in results {
            let idx = rng.sample_indices(r.n, k);
            let vote = majority(idx.iter().filter_map(|&i| r.answers[i].as_deref()));
            hits += usize::from(vote == Some(r.gold.as_str()));
        }
        accs.push(hits as f64 / results.len() as f64);
    }
    let mean = accs.iter().sum::<f64>() / trials as f64;
    let trial_std = if trials > 1 {
        (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(MajAtK {
        k,
        trials,
        seed,
        accuracy: mean,
        trial_std,
    })
}

/// JSON report of pass@k and maj@k curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub problems: usize,
    #[serde(rename = "pass@k")]
    pub pass_at_k: BTreeMap<usize, f64>,
    #[serde(rename = "maj@k")]
    pub maj_at_k: BTreeMap<usize, f64>,
    pub trials: usize,
    pub seed: u64,
}

/// Evaluates every `k` that does not exceed the smallest sample count.
pub fn report(results: &[ProblemResult], ks: &[usize], trials: usize, seed: u64) -> Result<EvalReport> {
    let n_min = results.iter().map(|r| r.n).min().unwrap_or(0);
    let mut out = EvalReport {
        problems: results.len(),
        pass_at_k: BTreeMap::new(),
        maj_at_k: BTreeMap::new(),
        trials,
        seed,
    };
    for &k in ks {
        if k > n_min {
            return Err(invalid(format!("k={k} exceeds the smallest sample count {n_min}")));
        }
        out.pass_at_k.insert(k, pass_at_k(results, k)?);
        out.maj_at_k.insert(k, maj_at_k(results, k, trials, seed)?.accuracy);
    }
    Ok(out)
}

pub fn read_results(path: impl AsRef<std::path::Path>) -> Result<Vec<ProblemResult>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ProblemResult =
            serde_json::from_str(line).map_err(|e| invalid(format!("results line {}: {e}", i + 1)))?;
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

pub fn write_results(path: impl AsRef<std::path::Path>, results: &[ProblemResult]) -> Result<()> {
    let mut s = String::new();
    for r in results {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Which side of the fixed train/eval partition a task falls on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTask {
    /// `a + b - c` style expression.
    pub expression: String,
    /// Question with the boxed-answer suffix.
    pub prompt: String,
    pub gold: String,
    pub operands: usize,
    pub magnitude: i64,
}

impl ToyTask {
    fn new(terms: &[i64], magnitude: i64) -> Self {
        let mut expr = terms[0].to_string();
        for &t in &terms[1..] {
            expr.push_str(if t < 0 { " - " } else { " + " });
            expr.push_str(&t.abs().to_string());
        }
        let value: i64 = terms.iter().sum();
        Self {
            prompt: format!("Compute {expr}. {BOXED_SUFFIX}"),
            expression: expr,
            gold: value.to_string(),
            operands: terms.len(),
            magnitude,
        }
    }

    /// Partition by a fixed hash of the expression: about one task in four
    /// is held out.
    pub fn split(&self) -> Split {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.expression.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        if h % 4 == 0 {
            Split::Eval
        } else {
            Split::Train
        }
    }

    /// The reference response used for supervised warm-up.
    pub fn solution(&self) -> String {
        format!("\\boxed{{{}}}", self.gold)
    }
}

/// Operand count and magnitude bound for a difficulty level. Level 1 is a
/// sum of two operands in `[0, 20]`; higher levels add operands, widen
/// the range and allow subtraction.
pub fn difficulty_knobs(difficulty: u32) -> (usize, i64) {
    let d = difficulty.max(1);
    (d as usize + 1, 20 * d as i64)
}

/// `n` arithmetic tasks, deterministic in `seed`.
pub fn gen_toy_tasks(n: usize, difficulty: u32, seed: u64) -> Vec<ToyTask> {
    let (operands, mag) = difficulty_knobs(difficulty);
    let mut rng = SeededRng::new(seed, 7);
    (0..n)
        .map(|_| {
            let terms: Vec<i64> = (0..operands)
                .map(|i| {
                    let v = rng.int_in(0, mag);
                    if i > 0 && difficulty > 1 && rng.uniform() < 0.5 {
                        -v
                    } else {
                        v
                    }
                })
                .collect();
            ToyTask::new(&terms, mag)
        })
        .collect()
}

/// `n` tasks from one side of the partition. Errors if the side cannot
/// supply them (tiny task spaces).
pub fn gen_toy_split(n: usize, difficulty: u32, seed: u64, split: Split) -> Result<Vec<ToyTask>> {
    let mut out = Vec::with_capacity(n);
    let mut round = 0u64;
    while out.len() < n {
        if round > 64 {
            return Err(invalid(format!("cannot draw {n} {split:?} tasks at difficulty {difficulty}")));
        }
        let batch = gen_toy_tasks(n.max(16) * 2, difficulty, seed.wrapping_add(round.wrapping_mul(0x9E37_79B9)));
        out.extend(batch.into_iter().filter(|t| t.split() == split).take(n - out.len()));
        round += 1;
    }
    Ok(out)
}

/// Answer phrasings used by the toy chat corpus. Only [`Style::Boxed`]
/// earns reward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Boxed,
    Bare,
    Sentence,
    Equation,
}

impl Style {
    pub fn render(self, task: &ToyTask) -> String {
        match self {
            Style::Boxed => task.solution(),
            Style::Bare => task.gold.clone(),
            Style::Sentence => format!("The answer is {}.", task.gold),
            Style::Equation => format!("{} = {}", task.expression, task.gold),
        }
    }
}

/// `per_task` chat records per task. Each record is boxed with probability
/// `boxed_rate` and otherwise takes one of the unboxed styles uniformly.
pub fn toy_chat_corpus(tasks: &[ToyTask], per_task: usize, boxed_rate: f64, seed: u64) -> Vec<ChatRecord> {
    const PLAIN: [Style; 3] = [Style::Bare, Style::Sentence, Style::Equation];
    let mut rng = SeededRng::new(seed, 11);
    let mut out = Vec::with_capacity(tasks.len() * per_task);
    for t in tasks {
        for _ in 0..per_task {
            let style = if rng.uniform() < boxed_rate { Style::Boxed } else { PLAIN[rng.index(3)] };
            out.push(ChatRecord {
                prompt: t.prompt.clone(),
                response: style.render(t),
            });
        }
    }
    rng.shuffle(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_rules() {
        assert_eq!(extract_answer("a \\boxed{1} b \\boxed{2}").as_deref(), Some("2"));
        assert_eq!(extract_answer("x \\boxed{\\frac{1}{2}} y").as_deref(), Some("\\frac{1}{2}"));
        assert_eq!(extract_answer("nothing here"), None);
        assert_eq!(extract_answer("\\boxed{ 7 } \\boxed{unclosed").as_deref(), Some("7"));
        assert_eq!(reward_boxed("so \\boxed{42}", "42"), 1.0);
        assert_eq!(reward_boxed("\\boxed{042}", "42"), 1.0);
        assert_eq!(reward_boxed("42", "42"), 0.0);
    }

    #[test]
    fn canonical_forms() {
        assert_eq!(canonicalize("  -007 "), "-7");
        assert_eq!(canonicalize("-0"), "0");
        assert_eq!(canonicalize("+12"), "12");
        assert_eq!(canonicalize("4 / 8"), "1/2");
        assert_eq!(canonicalize("6/-3"), "-2");
        assert_eq!(canonicalize("x  =\t 3"), "x = 3");
        assert_eq!(canonicalize("000000000000000000000000000000000000000001"), "1");
    }

    #[test]
    fn pass_at_k_cases() {
        assert!((pass_at_k_single(5, 2, 2).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(pass_at_k_single(10_000, 1, 10_000).unwrap(), 1.0);
        assert_eq!(pass_at_k_single(8, 8, 3).unwrap(), 1.0);
        assert_eq!(pass_at_k_single(8, 0, 3).unwrap(), 0.0);
        assert!(pass_at_k_single(3, 1, 4).is_err());
    }

    #[test]
    fn majority_ties_and_full_sets() {
        let r = |answers: &[&str], gold: &str| ProblemResult::score("p", gold, &answers.iter().map(|a| format!("\\boxed{{{a}}}")).collect::<Vec<_>>());
        let m = maj_at_k(&[r(&["2", "2", "3"], "2")], 3, 10, 0).unwrap();
        assert_eq!(m.accuracy, 1.0);
        let m = maj_at_k(&[r(&["1", "2", "1", "2"], "1")], 4, 5, 0).unwrap();
        assert_eq!(m.accuracy, 1.0);
        let m = maj_at_k(&[r(&["1", "2", "3", "3", "1"], "3")], 5, 20, 3).unwrap();
        assert_eq!(m.trial_std, 0.0);
    }

    #[test]
    fn difficulty_one_is_small_sums() {
        let tasks = gen_toy_tasks(200, 1, 4);
        for t in &tasks {
            let (a, b) = t.expression.split_once(" + ").unwrap();
            let (a, b): (i64, i64) = (a.parse().unwrap(), b.parse().unwrap());
            assert!(a.abs() <= 20 && b.abs() <= 20);
            assert!(t.prompt.ends_with(BOXED_SUFFIX));
        }
        assert_eq!(tasks, gen_toy_tasks(200, 1, 4));
    }
}

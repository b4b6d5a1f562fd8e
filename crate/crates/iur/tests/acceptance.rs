//! The acceptance gate. Ten checks, each printing one `ACCEPTANCE <n>
//! PASS|FAIL|SKIP` line (run with `--nocapture` to see them), covering
//! round-trip completeness, oracle equivalence for the alignment and the
//! metrics, statistical laws of the perturbation and of random insertion
//! placement, end-to-end pipeline determinism, and a dataset-conditional
//! statistics check.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use iur::corpus::DialogueSample;
use iur::editscript::{
    apply, extract, lcs_align, parse, serialize, EditOp, EditScript, Layout, Policy, Strategy,
};
use iur::engine::{self, BackendSpec, RunOptions, Variant};
use iur::metrics::{self, Triple};
use iur::perturb::{perturb, PerturbConfig};
use iur::rng::{stream, unit_draw};
use iur::text::{tokenize, Markers, Token, TokenKind, TokenSeq, TokenizeMode};

fn report(criterion: u8, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {criterion} {verdict} {name}: {detail}");
    assert!(pass, "criterion {criterion} ({name}): {detail}");
}

fn ws(s: &str) -> TokenSeq {
    tokenize(s, TokenizeMode::Whitespace)
}

fn words(
    rng: &mut impl Rng,
    vocab: &[&str],
    len: std::ops::RangeInclusive<usize>,
) -> Vec<String> {
    (0..rng.random_range(len))
        .map(|_| vocab[rng.random_range(0..vocab.len())].to_string())
        .collect()
}

fn seq_of(words: &[String]) -> TokenSeq {
    words
        .iter()
        .map(|w| Token::new(w.as_str(), TokenKind::Word))
        .collect()
}

// --- 1. Round-trip completeness -----------------------------------------

#[test]
fn criterion_1_round_trip_completeness() {
    const VOCAB: [&str; 10] = [
        "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa",
    ];
    let mut rng = stream(0xAC01, "round-trip");
    let started = Instant::now();
    let total = 1_200usize;
    let mut ok = 0usize;
    for case in 0..total {
        let incomplete = seq_of(&words(&mut rng, &VOCAB, 0..=12));
        // Half the cases are independent random targets (arbitrary
        // transforms); half are explicit mutations of the source (the
        // realistic shape: most tokens survive).
        let rewritten = if case % 2 == 0 {
            seq_of(&words(&mut rng, &VOCAB, 0..=12))
        } else {
            let mut out: Vec<String> = Vec::new();
            for tok in incomplete.surfaces() {
                match rng.random_range(0..10) {
                    0 | 1 => {}
                    2 | 3 => out.extend(words(&mut rng, &VOCAB, 1..=2)),
                    _ => out.push(tok.to_string()),
                }
            }
            for _ in 0..rng.random_range(0..=2) {
                let gap = rng.random_range(0..=out.len());
                for (off, w) in words(&mut rng, &VOCAB, 1..=3)
                    .into_iter()
                    .enumerate()
                {
                    out.insert(gap + off, w);
                }
            }
            seq_of(&out)
        };
        let script = extract(&incomplete, &rewritten);
        let applied = apply(
            &incomplete,
            &script,
            Strategy::Anchored,
            &mut rng,
            Policy::Strict,
        )
        .unwrap_or_else(|e| panic!("case {case}: anchored apply failed: {e}"));
        if applied.utterance.same_surfaces(&rewritten) && applied.skipped == 0 {
            ok += 1;
        }
    }
    let elapsed = started.elapsed();
    report(
        1,
        "round-trip completeness",
        ok == total && elapsed < Duration::from_secs(5),
        &format!(
            "apply(extract(pair), anchored) reproduced the rewrite on {ok}/{total} synthetic \
             pairs in {elapsed:.2?} (budget 5s)"
        ),
    );
}

// --- 2. LCS oracle --------------------------------------------------------

/// Per-string exhaustive subsequence table: `subs[k]` is a bitset over all
/// base-3 codes of length-k sequences, with a bit set iff that sequence is
/// a subsequence of the string. Built by enumerating all `2^len` subsets.
fn subsequence_table(digits: &[u8]) -> Vec<Vec<u64>> {
    let len = digits.len();
    let mut subs: Vec<Vec<u64>> = (0..=len)
        .map(|k| vec![0u64; (3usize.pow(k as u32)).div_ceil(64)])
        .collect();
    for mask in 0u32..(1 << len) {
        let mut code = 0usize;
        let mut k = 0usize;
        for (pos, &digit) in digits.iter().enumerate() {
            if mask & (1 << pos) != 0 {
                code = code * 3 + digit as usize;
                k += 1;
            }
        }
        subs[k][code / 64] |= 1 << (code % 64);
    }
    subs
}

fn oracle_lcs_len(a: &[Vec<u64>], b: &[Vec<u64>]) -> usize {
    let kmax = (a.len() - 1).min(b.len() - 1);
    (1..=kmax)
        .rev()
        .find(|&k| a[k].iter().zip(&b[k]).any(|(x, y)| x & y != 0))
        .unwrap_or(0)
}

/// Flat index of the string with the given digits: all strings over
/// {0,1,2} ordered by length, then by base-3 code.
fn string_index(offsets: &[usize], digits: &[u8]) -> usize {
    let code = digits.iter().fold(0usize, |c, &d| c * 3 + d as usize);
    offsets[digits.len()] + code
}

#[test]
fn criterion_2_lcs_matches_exhaustive_enumeration() {
    const MAX_LEN: usize = 8;
    let started = Instant::now();

    let mut offsets = vec![0usize; MAX_LEN + 2];
    for len in 0..=MAX_LEN {
        offsets[len + 1] = offsets[len] + 3usize.pow(len as u32);
    }
    let n_strings = offsets[MAX_LEN + 1];

    let mut digits_of: Vec<Vec<u8>> = Vec::with_capacity(n_strings);
    for len in 0..=MAX_LEN {
        for code in 0..3usize.pow(len as u32) {
            let mut digits = vec![0u8; len];
            let mut c = code;
            for d in digits.iter_mut().rev() {
                *d = (c % 3) as u8;
                c /= 3;
            }
            digits_of.push(digits);
        }
    }
    let seqs: Vec<TokenSeq> = digits_of
        .iter()
        .map(|digits| {
            digits
                .iter()
                .map(|&d| Token::new(["a", "b", "c"][d as usize], TokenKind::Word))
                .collect()
        })
        .collect();
    let tables: Vec<Vec<Vec<u64>>> = digits_of.iter().map(|d| subsequence_table(d)).collect();

    // Every pair of strings is a relabeling of exactly one canonical pair
    // (symbols renamed to first-occurrence order over the concatenation),
    // and both lcs_align and the subsequence oracle only ever compare
    // tokens for equality, so checking the canonical pairs checks them
    // all. The class sizes are summed to prove the coverage is exact, and
    // label-obliviousness itself is spot-checked below.
    let mut canonical_pairs = 0u64;
    let mut covered = 0u64;
    let mut mismatches = 0u64;

    // Walks all canonical continuations of `prefix` given `used` distinct
    // symbols so far, invoking `leaf` on each complete string.
    fn walk(prefix: &mut Vec<u8>, target_len: usize, used: u8, leaf: &mut impl FnMut(&[u8], u8)) {
        if prefix.len() == target_len {
            leaf(prefix, used);
            return;
        }
        let top = (used + u8::from(used < 3)).max(1);
        for d in 0..top {
            prefix.push(d);
            walk(prefix, target_len, used.max(d + 1), leaf);
            prefix.pop();
        }
    }

    const CLASS_SIZE: [u64; 4] = [1, 3, 6, 6];
    for la in 0..=MAX_LEN {
        walk(&mut Vec::new(), la, 0, &mut |a_digits, a_used| {
            let a_id = string_index(&offsets, a_digits);
            for lb in 0..=MAX_LEN {
                let mut b = a_digits.to_vec();
                walk(&mut b, la + lb, a_used, &mut |ab_digits, used| {
                    let b_id = string_index(&offsets, &ab_digits[la..]);
                    let ours = lcs_align(&seqs[a_id], &seqs[b_id]).len();
                    let oracle = oracle_lcs_len(&tables[a_id], &tables[b_id]);
                    if ours != oracle {
                        mismatches += 1;
                    }
                    canonical_pairs += 1;
                    covered += CLASS_SIZE[used as usize];
                });
            }
        });
    }

    let all_pairs = (n_strings as u64) * (n_strings as u64);
    let coverage_exact = covered == all_pairs;

    // Label-obliviousness check: permuting the alphabet never changes the
    // aligned length, so the canonical sweep really does speak for every
    // pair.
    let mut rng = stream(0xAC02, "lcs-relabel");
    let mut relabel_ok = 0usize;
    const RELABEL_TRIALS: usize = 200_000;
    const PERMS: [[u8; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    for _ in 0..RELABEL_TRIALS {
        let a = &digits_of[rng.random_range(0..n_strings)];
        let b = &digits_of[rng.random_range(0..n_strings)];
        let perm = PERMS[rng.random_range(0..PERMS.len())];
        let relabeled = |digits: &[u8]| -> usize {
            string_index(
                &offsets,
                &digits.iter().map(|&d| perm[d as usize]).collect::<Vec<u8>>(),
            )
        };
        let base = lcs_align(&seqs[string_index(&offsets, a)], &seqs[string_index(&offsets, b)]);
        let renamed = lcs_align(&seqs[relabeled(a)], &seqs[relabeled(b)]);
        if base.len() == renamed.len() {
            relabel_ok += 1;
        }
    }

    let elapsed = started.elapsed();
    report(
        2,
        "LCS equals exhaustive subsequence oracle",
        mismatches == 0
            && coverage_exact
            && relabel_ok == RELABEL_TRIALS
            && elapsed < Duration::from_secs(60),
        &format!(
            "{canonical_pairs} canonical pairs checked exactly, covering all {all_pairs} pairs \
             of lengths <= 8 over 3 symbols ({mismatches} mismatches); relabeling invariance \
             held on {relabel_ok}/{RELABEL_TRIALS} sampled pairs; {elapsed:.2?} (budget 60s)"
        ),
    );
}

// --- 3. Serialization round-trip ------------------------------------------

const SPAN_VOCAB: [&str; 8] = ["red", "green", "blue", "cyan", "plum", "gold", "teal", "gray"];

fn random_span(rng: &mut impl Rng, max_len: usize) -> TokenSeq {
    seq_of(&words(rng, &SPAN_VOCAB, 1..=max_len))
}

fn random_script(rng: &mut impl Rng) -> EditScript {
    let markers = Markers::default();
    let ops = (0..rng.random_range(1..=6))
        .map(|_| match rng.random_range(0..4) {
            0 | 1 => EditOp::insertion(random_span(rng, 4)),
            2 => EditOp::replacement(random_span(rng, 3), random_span(rng, 3)),
            _ => EditOp::replacement(
                random_span(rng, 3),
                TokenSeq::new(vec![Token::new(markers.none.as_str(), TokenKind::Marker)]),
            ),
        })
        .collect();
    EditScript::new(ops)
}

#[test]
fn criterion_3_serialize_parse_round_trip_and_lenient_recovery() {
    let mut rng = stream(0xAC03, "serialize-round-trip");
    let mode = TokenizeMode::Whitespace;

    let scripts = 10_000usize;
    let mut round_trips = 0usize;
    for _ in 0..scripts {
        let script = random_script(&mut rng);
        let mut both = true;
        for layout in [Layout::Positional, Layout::Grouped] {
            let text = serialize(&script, layout).unwrap();
            let parsed = parse(&text, mode, Policy::Strict).unwrap();
            both &= parsed.diagnostics.is_empty() && parsed.script.same_ops(&script.in_layout(layout));
        }
        if both {
            round_trips += 1;
        }
    }

    let noise_strings = 10_000usize;
    let mut lenient_survived = 0usize;
    const NOISE_POOL: [&str; 14] = [
        "[I]", "[D]", "[R]", "[NONE]", "[SEP]", "[CLS]", "foo", "bar", "baz", ".", "?", "(", "]",
        "x1",
    ];
    for _ in 0..noise_strings {
        let text = words(&mut rng, &NOISE_POOL, 0..=12).join(" ");
        if parse(&text, mode, Policy::Lenient).is_ok() {
            lenient_survived += 1;
        }
    }

    // Faults are appended in an order (orphan [R], stray [SEP], empty [I],
    // dangling [D]) where each provably yields exactly one diagnostic: no
    // fault's tokens can complete a neighbouring construct.
    let fault_corpora = 2_000usize;
    let mut fault_counts_match = 0usize;
    let mut ops_survive = 0usize;
    for _ in 0..fault_corpora {
        let script = random_script(&mut rng);
        let mut text = serialize(&script, Layout::Positional).unwrap();
        let mut injected = 0usize;
        if rng.random_range(0..2) == 0 {
            text = format!("stray leading words {text}");
            injected += 1;
        }
        let mut faults: Vec<&str> = Vec::new();
        for _ in 0..rng.random_range(if injected == 0 { 1 } else { 0 }..=4) {
            faults.push(match rng.random_range(0..4) {
                0 => "[R] orphaned span",
                1 => "[SEP]",
                2 => "[I]",
                _ => "[D] dangling span",
            });
        }
        faults.sort_by_key(|f| match *f {
            "[R] orphaned span" => 0,
            "[SEP]" => 1,
            "[I]" => 2,
            _ => 3,
        });
        injected += faults.len();
        for fault in faults {
            text = format!("{text} {fault}");
        }
        let parsed = parse(&text, mode, Policy::Lenient).unwrap();
        if parsed.diagnostics.len() == injected {
            fault_counts_match += 1;
        }
        if parsed.script.same_ops(&script) {
            ops_survive += 1;
        }
        assert!(
            parse(&text, mode, Policy::Strict).is_err(),
            "a faulted script must not parse strictly: {text:?}"
        );
    }

    report(
        3,
        "serialization round-trip and lenient recovery",
        round_trips == scripts
            && lenient_survived == noise_strings
            && fault_counts_match == fault_corpora
            && ops_survive == fault_corpora,
        &format!(
            "{round_trips}/{scripts} scripts round-tripped in both layouts; lenient parse \
             survived {lenient_survived}/{noise_strings} noise strings; diagnostics matched the \
             injected fault count on {fault_counts_match}/{fault_corpora} seeded corpora \
             (intact ops recovered in {ops_survive})"
        ),
    );
}

// --- 4. Worked example ---------------------------------------------------

#[test]
fn criterion_4_worked_example_serializes_exactly() {
    let incomplete = ws("It is he who acted");
    let rewritten = ws("It is Ben Affleck who acted as Batman");
    let script = extract(&incomplete, &rewritten);
    let positional = serialize(&script, Layout::Positional).unwrap();
    let grouped = serialize(&script, Layout::Grouped).unwrap();
    report(
        4,
        "worked example",
        positional == "[D] he [R] Ben Affleck [I] as Batman"
            && grouped == "[I] as Batman [D] he [R] Ben Affleck",
        &format!("positional {positional:?}, grouped {grouped:?}"),
    );
}

// --- 5. Perturbation statistics -------------------------------------------

#[test]
fn criterion_5_perturbation_statistics() {
    let started = Instant::now();
    let history = ws("harbor haven hollow heath");
    let incomplete = ws("cliff coast cove");
    // Spans chosen so every outcome is identifiable: the original deleted
    // span can only survive from the original op, and the original
    // inserted span never comes out of the history.
    let original = EditScript::new(vec![EditOp::replacement(ws("quarry"), ws("zenith"))]);
    let trials = 10_000usize;

    let mut lines = Vec::new();
    let mut all_ok = true;
    for (prob_p, prob_r) in [(0.6, 0.5), (1.0, 1.0), (0.0, 0.3)] {
        let cfg = PerturbConfig {
            prob_p,
            prob_r,
            max_span_len: 3,
            seed: 0,
        };
        let mut drops = 0usize;
        let mut appends = 0usize;
        let mut byte_identical = 0usize;
        for trial in 0..trials {
            let mut rng = stream(0xAC05, &format!("{prob_p}-{prob_r}-{trial}"));
            let out = perturb(&original, &history, &incomplete, &cfg, &mut rng).unwrap();
            let original_survives = out
                .script
                .ops
                .iter()
                .any(|op| op.deleted().is_some_and(|d| d.same_surfaces(&ws("quarry"))));
            if !original_survives {
                drops += 1;
            }
            let appended = out
                .script
                .ops
                .iter()
                .filter(|op| !op.deleted().is_some_and(|d| d.same_surfaces(&ws("quarry"))))
                .count();
            appends += appended;
            if serialize(&out.script, Layout::Positional).unwrap()
                == serialize(&original, Layout::Positional).unwrap()
                && out.script == original
                && !out.fired
            {
                byte_identical += 1;
            }
        }
        let sigma = |q: f64| 3.0 * (q * (1.0 - q) / trials as f64).sqrt();
        let drop_law = prob_p * (1.0 - prob_r);
        let drop_rate = drops as f64 / trials as f64;
        let append_rate = appends as f64 / trials as f64;
        let drop_ok = (drop_rate - drop_law).abs() <= sigma(drop_law);
        let append_ok = (append_rate - prob_p).abs() <= sigma(prob_p);
        let identity_ok = prob_p > 0.0 || byte_identical == trials;
        all_ok &= drop_ok && append_ok && identity_ok;
        lines.push(format!(
            "(p={prob_p}, r={prob_r}): drop {drop_rate:.4} (law {drop_law:.4}), append \
             {append_rate:.4} (law {prob_p:.4}){}",
            if prob_p == 0.0 {
                format!(", byte-identical {byte_identical}/{trials}")
            } else {
                String::new()
            }
        ));
    }
    let elapsed = started.elapsed();
    report(
        5,
        "perturbation statistics",
        all_ok && elapsed < Duration::from_secs(10),
        &format!(
            "{} over {trials} seeded perturbations each, all within 3 binomial sigma; \
             {elapsed:.2?} (budget 10s)",
            lines.join("; ")
        ),
    );
}

// --- 6. Metric oracles ------------------------------------------------------

mod oracle {
    //! Brute-force n-gram scoring, written with index loops and BTreeMaps
    //! so it shares no code with the library implementation.

    use std::collections::{BTreeMap, BTreeSet};

    use iur::text::TokenSeq;

    pub fn toks(seq: &TokenSeq) -> Vec<String> {
        seq.surfaces().map(str::to_string).collect()
    }

    fn grams(tokens: &[String], n: usize) -> BTreeMap<Vec<String>, usize> {
        let mut out = BTreeMap::new();
        if tokens.len() >= n {
            for start in 0..=tokens.len() - n {
                *out.entry(tokens[start..start + n].to_vec()).or_insert(0) += 1;
            }
        }
        out
    }

    fn clipped(a: &BTreeMap<Vec<String>, usize>, b: &BTreeMap<Vec<String>, usize>) -> usize {
        a.iter()
            .map(|(g, c)| (*c).min(b.get(g).copied().unwrap_or(0)))
            .sum()
    }

    pub fn bleu(preds: &[Vec<String>], refs: &[Vec<String>], max_order: usize) -> f64 {
        let pred_len: usize = preds.iter().map(Vec::len).sum();
        let ref_len: usize = refs.iter().map(Vec::len).sum();
        if pred_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut live_orders = 0usize;
        for n in 1..=max_order {
            let mut matched = 0usize;
            let mut total = 0usize;
            for (p, r) in preds.iter().zip(refs) {
                let pg = grams(p, n);
                matched += clipped(&pg, &grams(r, n));
                total += pg.values().sum::<usize>();
            }
            if total == 0 {
                continue;
            }
            if matched == 0 {
                return 0.0;
            }
            live_orders += 1;
            log_sum += (matched as f64 / total as f64).ln();
        }
        let brevity = if pred_len < ref_len {
            (1.0 - ref_len as f64 / pred_len as f64).exp()
        } else {
            1.0
        };
        brevity * (log_sum / live_orders as f64).exp()
    }

    fn div(n: usize, d: usize) -> f64 {
        if d == 0 {
            0.0
        } else {
            n as f64 / d as f64
        }
    }

    fn harmonic(p: f64, r: f64) -> f64 {
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn rouge_n(preds: &[Vec<String>], refs: &[Vec<String>], n: usize) -> (f64, f64, f64) {
        let (mut matched, mut pred_total, mut ref_total) = (0usize, 0usize, 0usize);
        for (p, r) in preds.iter().zip(refs) {
            let pg = grams(p, n);
            let rg = grams(r, n);
            matched += clipped(&pg, &rg);
            pred_total += pg.values().sum::<usize>();
            ref_total += rg.values().sum::<usize>();
        }
        let p = div(matched, pred_total);
        let r = div(matched, ref_total);
        (p, r, harmonic(p, r))
    }

    /// Plain recursive LCS length with memoization; deliberately not the
    /// library's iterative table.
    fn lcs_len(a: &[String], b: &[String]) -> usize {
        fn go(
            a: &[String],
            b: &[String],
            i: usize,
            j: usize,
            memo: &mut BTreeMap<(usize, usize), usize>,
        ) -> usize {
            if i == 0 || j == 0 {
                return 0;
            }
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let v = if a[i - 1] == b[j - 1] {
                go(a, b, i - 1, j - 1, memo) + 1
            } else {
                go(a, b, i - 1, j, memo).max(go(a, b, i, j - 1, memo))
            };
            memo.insert((i, j), v);
            v
        }
        go(a, b, a.len(), b.len(), &mut BTreeMap::new())
    }

    /// Macro average of the per-sample LCS precision, recall and F1. The
    /// per-sample F1 satisfies f = 2pr/(p+r); the corpus triple averages
    /// those, so it intentionally does not.
    pub fn rouge_l(preds: &[Vec<String>], refs: &[Vec<String>]) -> (f64, f64, f64) {
        let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
        for (pred, rf) in preds.iter().zip(refs) {
            let l = lcs_len(pred, rf);
            let p = div(l, pred.len());
            let r = div(l, rf.len());
            sp += p;
            sr += r;
            sf += harmonic(p, r);
        }
        let n = preds.len() as f64;
        (sp / n, sr / n, sf / n)
    }

    pub fn restoration(
        incs: &[Vec<String>],
        preds: &[Vec<String>],
        refs: &[Vec<String>],
        n: usize,
    ) -> (f64, f64, f64) {
        let (mut matched, mut pred_total, mut ref_total) = (0usize, 0usize, 0usize);
        for ((inc, pred), rf) in incs.iter().zip(preds).zip(refs) {
            let known: BTreeSet<&String> = inc.iter().collect();
            let restored_grams = |utt: &[String]| -> BTreeMap<Vec<String>, usize> {
                let novel: BTreeSet<&String> =
                    utt.iter().filter(|t| !known.contains(t)).collect();
                grams(utt, n)
                    .into_iter()
                    .filter(|(g, _)| g.iter().any(|t| novel.contains(t)))
                    .collect()
            };
            let pg = restored_grams(pred);
            let rg = restored_grams(rf);
            matched += clipped(&pg, &rg);
            pred_total += pg.values().sum::<usize>();
            ref_total += rg.values().sum::<usize>();
        }
        let p = div(matched, pred_total);
        let r = div(matched, ref_total);
        (p, r, harmonic(p, r))
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn triple_close(t: Triple, (p, r, f): (f64, f64, f64)) -> bool {
    close(t.precision, p) && close(t.recall, r) && close(t.f1, f)
}

/// `f = 2pr/(p+r)` with a zero-denominator convention of 0.
fn identity_holds(t: Triple) -> bool {
    if t.precision + t.recall == 0.0 {
        t.f1 == 0.0
    } else {
        close(t.f1, 2.0 * t.precision * t.recall / (t.precision + t.recall))
    }
}

#[test]
fn criterion_6_metric_oracles() {
    const VOCAB: [&str; 6] = ["sun", "moon", "tide", "rain", "wind", "dusk"];
    let mut rng = stream(0xAC06, "metric-oracles");
    let corpora = 100usize;
    let mut agreements = 0usize;
    let mut identity_checks = 0usize;
    for _ in 0..corpora {
        let n_samples = rng.random_range(1..=20);
        let mut incs = Vec::new();
        let mut preds = Vec::new();
        let mut refs = Vec::new();
        for _ in 0..n_samples {
            incs.push(seq_of(&words(&mut rng, &VOCAB, 0..=10)));
            preds.push(seq_of(&words(&mut rng, &VOCAB, 0..=10)));
            refs.push(seq_of(&words(&mut rng, &VOCAB, 0..=10)));
        }
        let o_incs: Vec<Vec<String>> = incs.iter().map(oracle::toks).collect();
        let o_preds: Vec<Vec<String>> = preds.iter().map(oracle::toks).collect();
        let o_refs: Vec<Vec<String>> = refs.iter().map(oracle::toks).collect();

        let mut all = true;
        for n in 1..=4 {
            all &= close(
                metrics::bleu(&preds, &refs, n).unwrap(),
                oracle::bleu(&o_preds, &o_refs, n),
            );
        }
        for n in 1..=3 {
            let t = metrics::rouge_n(&preds, &refs, n).unwrap();
            all &= triple_close(t, oracle::rouge_n(&o_preds, &o_refs, n));
            all &= identity_holds(t);
            identity_checks += 1;
        }
        all &= triple_close(
            metrics::rouge_l(&preds, &refs).unwrap(),
            oracle::rouge_l(&o_preds, &o_refs),
        );
        for n in 1..=2 {
            let scored = metrics::restoration_fscore(&incs, &preds, &refs, n).unwrap();
            all &= triple_close(scored.score, oracle::restoration(&o_incs, &o_preds, &o_refs, n));
            all &= identity_holds(scored.score);
            identity_checks += 1;
        }
        if all {
            agreements += 1;
        }
    }

    let hand = metrics::restoration_fscore(
        &[ws("why")],
        &[ws("why duan highest")],
        &[ws("why duan yu highest")],
        1,
    )
    .unwrap()
    .score;
    let hand_ok = close(hand.precision, 1.0)
        && close(hand.recall, 2.0 / 3.0)
        && close(hand.f1, 0.8);

    report(
        6,
        "metric oracles",
        agreements == corpora && hand_ok,
        &format!(
            "BLEU 1-4, ROUGE 1-3, ROUGE-L and restoration F 1-2 agreed with brute force to \
             1e-12 on {agreements}/{corpora} micro-corpora; f=2pr/(p+r) held on all \
             {identity_checks} micro-averaged triples (ROUGE-L averages per-sample F1 by \
             definition); hand example gave (p,r,f)=({}, {:.6}, {})",
            hand.precision, hand.recall, hand.f1
        ),
    );
}

// --- 7. Stage-correlation fractions ----------------------------------------

#[test]
fn criterion_7_e2c_c2e() {
    let main = metrics::e2c_c2e(&[(false, true), (false, false), (true, true), (true, false)])
        .unwrap();
    let all_right = metrics::e2c_c2e(&[(true, true), (true, true)]).unwrap();
    let all_wrong = metrics::e2c_c2e(&[(false, false), (false, false)]).unwrap();
    let empty_is_error = metrics::e2c_c2e(&[]).is_err();
    report(
        7,
        "stage-correlation fractions",
        main == (Some(0.5), Some(0.5))
            && all_right == (None, Some(0.0))
            && all_wrong == (Some(0.0), None)
            && empty_is_error,
        &format!(
            "mixed pairs gave {main:?}; zero denominators gave {all_right:?} and \
             {all_wrong:?} without raising"
        ),
    );
}

// --- 8. End-to-end oracle runs ----------------------------------------------

fn sample(id: &str, history: &[&str], incomplete: &str, rewritten: &str) -> DialogueSample {
    DialogueSample {
        id: id.to_string(),
        history: history.iter().map(|s| s.to_string()).collect(),
        incomplete: incomplete.to_string(),
        rewritten: Some(rewritten.to_string()),
    }
}

fn em_of_run(run: &engine::RunResult, corpus: &[DialogueSample]) -> f64 {
    let refs: Vec<TokenSeq> = corpus
        .iter()
        .map(|s| ws(s.rewritten.as_deref().unwrap()))
        .collect();
    let preds: Vec<TokenSeq> = run.samples.iter().map(|s| s.prediction.clone()).collect();
    metrics::exact_match(&preds, &refs).unwrap()
}

fn options<'a>(
    markers: &'a Markers,
    stage1: &'a BackendSpec,
    stage2: &'a BackendSpec,
) -> RunOptions<'a> {
    RunOptions {
        stage1,
        stage2,
        mode: TokenizeMode::Whitespace,
        layout: Layout::Positional,
        markers,
        seed: 5,
        concurrency: 2,
    }
}

#[test]
fn criterion_8_end_to_end_oracle_runs() {
    let markers = Markers::default();
    let corpus = vec![
        sample("1", &["poster of Batman"], "it is he who acted", "it is Ben who acted"),
        sample("2", &["any plans"], "maybe later", "maybe later"),
        sample("3", &["the meal"], "she liked it", "she liked the meal a lot"),
        sample("4", &["weather talk"], "quite cold", "quite cold"),
        sample("5", &["trip report"], "we went north", "we flew north in May"),
    ];
    let gold = BackendSpec::gold();
    let identity = BackendSpec::identity();

    let gold_run =
        engine::run_two_stage(&corpus, Variant::GoldOps, &options(&markers, &identity, &gold))
            .unwrap();
    let gold_em = em_of_run(&gold_run, &corpus);

    let id_run =
        engine::run_two_stage(&corpus, Variant::TwoStage, &options(&markers, &identity, &identity))
            .unwrap();
    let id_em = em_of_run(&id_run, &corpus);
    let no_edit_fraction = 2.0 / 5.0;

    // Single-insertion corpus: four distinct tokens, the new token belongs
    // in one specific gap out of five, and the stage1-only variant draws
    // the gap uniformly per sample.
    let trials = 10_000usize;
    let stage1_corpus: Vec<DialogueSample> = (0..trials)
        .map(|i| {
            let gap = i % 5;
            let mut toks = vec!["w0", "w1", "w2", "w3"];
            toks.insert(gap, "new");
            sample(&i.to_string(), &["ctx"], "w0 w1 w2 w3", &toks.join(" "))
        })
        .collect();
    let s1_run = engine::run_two_stage(
        &stage1_corpus,
        Variant::Stage1Only,
        &options(&markers, &gold, &identity),
    )
    .unwrap();
    let s1_em = em_of_run(&s1_run, &stage1_corpus);
    let p = 1.0 / 5.0;
    let tolerance = 3.0 * (p * (1.0 - p) / trials as f64).sqrt();

    report(
        8,
        "end-to-end oracle runs",
        gold_em == 1.0
            && id_em == no_edit_fraction
            && (s1_em - p).abs() <= tolerance
            && gold_run.failed_count() == 0
            && id_run.failed_count() == 0
            && s1_run.failed_count() == 0,
        &format!(
            "gold ops + gold backend EM {gold_em}; identity backend EM {id_em} (no-edit \
             fraction {no_edit_fraction}); stage1-only random-gap EM {s1_em:.4} vs 1/(L+1) = \
             {p} +- {tolerance:.4} over {trials} seeded samples"
        ),
    );
}

// --- 9. Pipeline determinism -------------------------------------------------

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_iur")
}

fn run_cli(dir: &std::path::Path, args: &[&str]) {
    let output = Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env_remove("IUR_CONFIG")
        .env_remove("IUR_SEED")
        .env_remove("IUR_MODE")
        .env_remove("IUR_LAYOUT")
        .env_remove("IUR_OUTPUT_DIR")
        .output()
        .expect("spawn iur");
    assert!(
        output.status.success(),
        "iur {args:?} failed in {}: {}",
        dir.display(),
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn criterion_9_pipeline_determinism() {
    let corpus_lines = r#"{"id": "a", "history": ["I think Batman is very handsome.", "The poster looks a bit like Ben Affleck."], "incomplete": "It is he who acted.", "rewritten": "It is Ben Affleck who acted as Batman."}
{"id": "b", "history": ["lunch plans"], "incomplete": "same as before", "rewritten": "same as before"}
{"id": "c", "history": ["the long report arrived"], "incomplete": "she read most of it", "rewritten": "she read most of the long report"}
{"id": "d", "history": ["tickets for the late show"], "incomplete": "he bought two", "rewritten": "he bought two tickets"}
{"id": "e", "history": ["a noisy old printer"], "incomplete": "they finally replaced the noisy old printer", "rewritten": "they finally replaced it"}
"#;
    let config = format!(
        r#"mode = "whitespace"

[backends.stage1]
kind = "gold"

[backends.stage2]
kind = "command"
endpoint = "{} backend-echo"
"#,
        bin()
    );

    let root = tempfile::tempdir().unwrap();
    let mut digests: Vec<BTreeMap<String, Vec<u8>>> = Vec::new();
    for run in 0..2 {
        let dir = root.path().join(format!("run{run}"));
        std::fs::create_dir_all(dir.join("out")).unwrap();
        std::fs::write(dir.join("data.jsonl"), corpus_lines).unwrap();
        std::fs::write(dir.join("config.toml"), &config).unwrap();
        let base = ["--config", "config.toml", "--seed", "11"];
        let cli = |extra: &[&str]| {
            let mut args: Vec<&str> = base.to_vec();
            args.extend_from_slice(extra);
            run_cli(&dir, &args);
        };
        cli(&["extract", "--in", "data.jsonl"]);
        cli(&["prepare", "--stage", "1", "--in", "data.jsonl"]);
        cli(&["prepare", "--stage", "2", "--in", "data.jsonl"]);
        cli(&["apply", "--in", "data.jsonl", "--ops", "out/ops.jsonl", "--out", "out/applied.jsonl"]);
        cli(&["infer", "--in", "data.jsonl", "--ops-out", "out/infer_ops.jsonl"]);
        cli(&["eval", "--pred", "out/applied.jsonl", "--data", "data.jsonl", "--out", "out/report.json"]);
        cli(&[
            "analyze",
            "--stage1",
            "out/ops.jsonl",
            "--pred",
            "out/applied.jsonl",
            "--data",
            "data.jsonl",
            "--out",
            "out/analysis.json",
        ]);

        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(dir.join("out")).unwrap() {
            let path = entry.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().to_string();
            files.insert(name, std::fs::read(&path).unwrap());
        }
        digests.push(files);
    }

    let names: Vec<&String> = digests[0].keys().collect();
    let same_set = digests[0].keys().eq(digests[1].keys());
    let mut differing = Vec::new();
    for (name, content) in &digests[0] {
        if digests[1].get(name) != Some(content) {
            differing.push(name.clone());
        }
    }
    report(
        9,
        "pipeline determinism",
        same_set && differing.is_empty() && names.len() >= 7,
        &format!(
            "two identical config+seed runs produced byte-identical {names:?}; differing: \
             {differing:?}"
        ),
    );
}

// --- 10. Dataset-conditional statistics --------------------------------------

#[test]
fn criterion_10_rewrite_corpus_statistics() {
    let mut candidates: Vec<PathBuf> = Vec::new();
    if let Ok(path) = std::env::var("IUR_REWRITE_TRAIN") {
        candidates.push(PathBuf::from(path));
    }
    let workspace = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    candidates.push(workspace.join("data/rewrite/train.txt"));
    candidates.push(workspace.join("data/REWRITE/train.txt"));
    let Some(path) = candidates.iter().find(|p| p.is_file()) else {
        println!(
            "ACCEPTANCE 10 SKIP dataset statistics: no REWRITE training split found (set \
             IUR_REWRITE_TRAIN or place data/rewrite/train.txt); nothing to check"
        );
        return;
    };

    let samples = iur::corpus::load(path, iur::corpus::Format::Tsv).unwrap();
    let stats = iur::corpus::stats(&samples, TokenizeMode::Auto, &Markers::default()).unwrap();
    let within = |measured: usize, expected: f64| (measured as f64 - expected).abs() / expected;
    let ins_dev = within(stats.n_insertion, 14_070.0);
    let rep_dev = within(stats.n_replacement, 7_853.0);
    report(
        10,
        "dataset statistics",
        ins_dev <= 0.02 && rep_dev <= 0.02,
        &format!(
            "{}: insertions {} (expected 14070, deviation {:.2}%), replacements {} (expected \
             7853, deviation {:.2}%); tolerance 2% absorbs tokenization-convention differences",
            path.display(),
            stats.n_insertion,
            ins_dev * 100.0,
            stats.n_replacement,
            rep_dev * 100.0
        ),
    );
}

// The probability draws behind criteria 5 and 8 assume unit_draw spans
// (0, 1]; pin that here so a future rng change trips the gate loudly.
#[test]
fn unit_draw_convention_backs_the_statistical_criteria() {
    let mut rng = stream(0xAC00, "unit-draw");
    for _ in 0..10_000 {
        let v = unit_draw(&mut rng);
        assert!(v > 0.0 && v <= 1.0);
    }
}

//! Release gate: every shipping criterion as one test, so the harness
//! prints one pass/fail line per criterion.
//!
//! The reference answers here are deliberately independent of the library:
//! brute-force pairwise AUC, an exhaustive greedy walk over scripted score
//! tables, central finite differences, and scripted probability backends.
//! They re-derive the expected behavior from first principles and must stay
//! free of calls into the code paths they judge.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hitlbm_core::behavior::{chunk_history, BehaviorChunk, ChunkSequence, Interaction, UserHistory};
use hitlbm_core::ctr::{AblationReport, CtrSample, JointModel, UserFusion};
use hitlbm_core::encoder::{HashEncoder, TextEncoder};
use hitlbm_core::fusion::{
    masked_self_attention, masked_self_attention_backward, target_cross_attention,
    target_cross_attention_backward, CrossAttentionForm,
};
use hitlbm_core::gateway::{
    render_prompt, GenRequest, Gateway, GatewayError, LlmBackend, MockLlm, PromptContext,
    PromptKind, PromptLimits,
};
use hitlbm_core::nn::{
    affine, affine_backward, attention, attention_backward, bce_grad, bce_loss,
    finite_diff_check, Matrix,
};
use hitlbm_core::pipeline::{
    read_json, run_stage, PipelineConfig, Stage, StageContext, StageOutcome, ABLATION, FUSED,
    INTERESTS,
};
use hitlbm_core::rating::{
    build_eval_set, build_rating_datasets, mann_whitney_auc, train_rating_model,
    transition_aucs, transition_labels, CascadeStep, CascadeUser, ExampleKind, RaterKind,
    RatingError, RatingExample, TrainHyper, TransitionContext,
};
use hitlbm_core::synth::{generate_dataset, ground_truth_overlap, GroundTruthTrace, SynthConfig};
use hitlbm_core::tree::{greedy_oracle, run_search, EncodedRater, InterestRater, SearchConfig};

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn plain_item(user: &str, idx: usize, title: &str, label: bool) -> Interaction {
    Interaction {
        user_id: user.to_string(),
        item_id: format!("item_{idx:03}"),
        title: title.to_string(),
        attrs: BTreeMap::new(),
        rating: if label { 5.0 } else { 1.0 },
        ts: idx as i64,
        label,
    }
}

// --- criterion 1: rank-based AUC against the brute-force pairwise oracle ---

/// Frozen oracle: score every (positive, negative) pair directly.
fn pairwise_auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &pos) in labels.iter().enumerate() {
        if !pos {
            continue;
        }
        for (j, &other) in labels.iter().enumerate() {
            if other {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

#[test]
fn criterion_01_auc_matches_brute_force_pairwise_oracle() {
    let start = Instant::now();
    let mut rng = seeded(0x01c1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.random_range(2..=200);
        // A 25-level grid guarantees plenty of tied scores.
        let scores: Vec<f64> =
            (0..len).map(|_| (rng.random_range(0..25) as f64) * 0.125 - 1.0).collect();
        let mut labels: Vec<bool> = (0..len).map(|_| rng.random::<f64>() < 0.5).collect();
        labels[0] = true;
        labels[1] = false;
        let fast = mann_whitney_auc(&scores, &labels).unwrap();
        let slow = pairwise_auc_oracle(&scores, &labels);
        worst = worst.max((fast - slow).abs());
    }
    let elapsed = start.elapsed();
    assert!(worst <= 1e-12, "worst |auc - oracle| = {worst:e}");
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    println!("criterion 1 PASS: 1000 vectors, worst deviation {worst:e}, {elapsed:?}");
}

// --- criterion 2: the search walk against an exhaustive greedy oracle ---

/// Returns candidates named purely by position, so scripted score tables can
/// address them. The layer is recovered from the chunk index the interest
/// prompt always carries.
struct PositionalBackend;

impl LlmBackend for PositionalBackend {
    fn id(&self) -> String {
        "scripted:positional".to_string()
    }

    fn generate(&self, req: &GenRequest) -> Result<Vec<String>, GatewayError> {
        let layer = req
            .rendered
            .lines()
            .find_map(|l| l.strip_prefix("Chunk index: "))
            .and_then(|s| s.trim().parse::<usize>().ok())
            .expect("interest prompts carry a chunk index");
        Ok((0..req.n).map(|k| format!("L{layer}C{k}")).collect())
    }

    fn yes_probability(&self, _rendered: &str) -> Result<f64, GatewayError> {
        Err(GatewayError::MockParse("positional backend only generates".to_string()))
    }
}

/// Both raters read the same table, so the blended score equals the table
/// entry exactly (0.5 s + 0.5 s == s in floating point).
struct TableRater {
    scores: Vec<Vec<f64>>,
}

impl InterestRater for TableRater {
    fn rate(&self, _prev: &[String], current: &str) -> Result<f64, RatingError> {
        let (layer, child) = parse_positional(current);
        Ok(self.scores[layer - 1][child])
    }
}

fn parse_positional(text: &str) -> (usize, usize) {
    let rest = text.strip_prefix('L').expect("positional text");
    let (layer, child) = rest.split_once('C').expect("positional text");
    (layer.parse().unwrap(), child.parse().unwrap())
}

fn scripted_user(id: usize, depth: usize) -> ChunkSequence {
    let user_id = format!("tree_{id:03}");
    let chunks = (1..=depth)
        .map(|ci| BehaviorChunk {
            user_id: user_id.clone(),
            chunk_index: ci,
            items: vec![plain_item(&user_id, ci, &format!("thing {ci}"), true)],
        })
        .collect();
    ChunkSequence { user_id, chunks }
}

#[test]
fn criterion_02_search_path_matches_greedy_oracle_on_scripted_trees() {
    let start = Instant::now();
    let gateway = Gateway::from_backend(Box::new(PositionalBackend), None);
    let limits = PromptLimits::default();
    let mut rng = seeded(0x02c2);
    let mut argmax_ties = 0usize;
    for case in 0..500 {
        let depth = rng.random_range(1..=6);
        let branch = rng.random_range(1..=5);
        // Four score levels plant frequent exact ties, including at the top.
        let scores: Vec<Vec<f64>> = (0..depth)
            .map(|_| (0..branch).map(|_| (rng.random_range(0..4) as f64) * 0.25).collect())
            .collect();
        for layer in &scores {
            let top = layer.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if layer.iter().filter(|&&s| s == top).count() > 1 {
                argmax_ties += 1;
            }
        }
        let rater = TableRater { scores: scores.clone() };
        let cfg = SearchConfig { n_expand: branch, k_prev: 1, alpha: 0.5, seed: case as u64 };
        let user = scripted_user(case, depth);
        let outcome = run_search(&user, &cfg, &gateway, &rater, &rater, &limits).unwrap();
        let got: Vec<usize> = outcome
            .path
            .iter()
            .map(|id| id.split_once('C').unwrap().1.parse::<usize>().unwrap())
            .collect();
        let expected = greedy_oracle(&scores);
        assert_eq!(got, expected, "case {case}: scores {scores:?}");
    }
    let elapsed = start.elapsed();
    assert!(argmax_ties > 100, "only {argmax_ties} tied argmax layers; ties not exercised");
    assert!(elapsed < Duration::from_secs(2), "took {elapsed:?}");
    println!(
        "criterion 2 PASS: 500 trees agree with the oracle ({argmax_ties} tied argmax layers), {elapsed:?}"
    );
}

// --- criterion 3: finite-difference audits of every gradient path ---

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
    )
}

fn flat(parts: &[&Matrix]) -> Vec<f64> {
    parts.iter().flat_map(|m| m.data.iter().copied()).collect()
}

/// Rebuilds matrices with the given shapes from one flat slice.
fn unflat(params: &[f64], shapes: &[(usize, usize)]) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut at = 0;
    for &(r, c) in shapes {
        out.push(Matrix::from_vec(r, c, params[at..at + r * c].to_vec()));
        at += r * c;
    }
    assert_eq!(at, params.len());
    out
}

fn inner(a: &Matrix, b: &Matrix) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_SEEDS: u64 = 20;

fn check_affine(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let shapes = [(3, 4), (4, 5), (1, 5)];
    let x = random_matrix(3, 4, &mut rng);
    let w = random_matrix(4, 5, &mut rng);
    let b = random_matrix(1, 5, &mut rng);
    let g = random_matrix(3, 5, &mut rng);
    let (dx, dw, db) = affine_backward(&x, &w, &g).unwrap();
    let analytic = flat(&[&dx, &dw, &Matrix::from_vec(1, 5, db)]);
    let params = flat(&[&x, &w, &b]);
    finite_diff_check(
        |p| {
            let m = unflat(p, &shapes);
            inner(&affine(&m[0], &m[1], m[2].row(0)).unwrap(), &g)
        },
        &params,
        &analytic,
        FD_H,
    )
}

fn check_attention(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let shapes = [(3, 4), (5, 4), (5, 6)];
    let q = random_matrix(3, 4, &mut rng);
    let k = random_matrix(5, 4, &mut rng);
    let v = random_matrix(5, 6, &mut rng);
    let g = random_matrix(3, 6, &mut rng);
    let (_, cache) = attention(&q, &k, &v, None).unwrap();
    let (dq, dk, dv) = attention_backward(&q, &k, &v, &cache, &g).unwrap();
    let analytic = flat(&[&dq, &dk, &dv]);
    let params = flat(&[&q, &k, &v]);
    finite_diff_check(
        |p| {
            let m = unflat(p, &shapes);
            inner(&attention(&m[0], &m[1], &m[2], None).unwrap().0, &g)
        },
        &params,
        &analytic,
        FD_H,
    )
}

fn check_masked_self_attention(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let d = 5;
    let shapes = [(6, d), (d, d), (d, d), (d, d)];
    let r = random_matrix(6, d, &mut rng);
    let wq = random_matrix(d, d, &mut rng);
    let wk = random_matrix(d, d, &mut rng);
    let wv = random_matrix(d, d, &mut rng);
    let g = random_matrix(6, d, &mut rng);
    let (_, cache) = masked_self_attention(&r, &wq, &wk, &wv).unwrap();
    let (dr, dwq, dwk, dwv) =
        masked_self_attention_backward(&r, &wq, &wk, &wv, &cache, &g).unwrap();
    let analytic = flat(&[&dr, &dwq, &dwk, &dwv]);
    let params = flat(&[&r, &wq, &wk, &wv]);
    finite_diff_check(
        |p| {
            let m = unflat(p, &shapes);
            inner(&masked_self_attention(&m[0], &m[1], &m[2], &m[3]).unwrap().0, &g)
        },
        &params,
        &analytic,
        FD_H,
    )
}

fn check_cross_attention(seed: u64, form: CrossAttentionForm) -> f64 {
    let mut rng = seeded(seed);
    let d = 5;
    let shapes = [(4, d), (1, d), (d, d), (d, d), (d, d)];
    let r_star = random_matrix(4, d, &mut rng);
    let e_item = random_matrix(1, d, &mut rng);
    let wq = random_matrix(d, d, &mut rng);
    let wk = random_matrix(d, d, &mut rng);
    let wv = random_matrix(d, d, &mut rng);
    let g: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let (_, cache) =
        target_cross_attention(&r_star, e_item.row(0), &wq, &wk, &wv, form).unwrap();
    let (dr, de, dwq, dwk, dwv) =
        target_cross_attention_backward(&r_star, e_item.row(0), &wq, &wk, &wv, &cache, &g)
            .unwrap();
    let analytic = flat(&[&dr, &Matrix::from_vec(1, d, de), &dwq, &dwk, &dwv]);
    let params = flat(&[&r_star, &e_item, &wq, &wk, &wv]);
    finite_diff_check(
        |p| {
            let m = unflat(p, &shapes);
            let (e_user, _) =
                target_cross_attention(&m[0], m[1].row(0), &m[2], &m[3], &m[4], form).unwrap();
            e_user.iter().zip(&g).map(|(x, y)| x * y).sum()
        },
        &params,
        &analytic,
        FD_H,
    )
}

fn check_bce(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    // Predictions stay away from the {0, 1} poles where the loss blows up.
    let preds: Vec<f64> = (0..8).map(|_| 0.1 + 0.8 * rng.random::<f64>()).collect();
    let targets: Vec<f64> = (0..8).map(|_| f64::from(rng.random::<f64>() < 0.5)).collect();
    let analytic = bce_grad(&preds, &targets);
    finite_diff_check(|p| bce_loss(p, &targets).unwrap(), &preds, &analytic, FD_H)
}

/// The whole learned path at once: id embeddings, recent-item mean pooling,
/// causal self-attention, item-conditioned pooling, click head, BCE mean.
fn check_joint_composite(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let side = 5;
    let users: BTreeMap<String, usize> = [("ua".to_string(), 0), ("ub".to_string(), 1)].into();
    let items: BTreeMap<String, usize> =
        [("ia".to_string(), 0), ("ib".to_string(), 1), ("ic".to_string(), 2)].into();
    // A linear head keeps the composite smooth, so the central-difference
    // figure is trustworthy at h = 1e-5; kinked heads are audited separately
    // with margin guards in the unit tests.
    let mut model = JointModel::new(
        UserFusion::TemporalStack(CrossAttentionForm::ItemAsQuery),
        3,
        side,
        &[],
        users,
        items,
        seed,
    );
    let rows: BTreeMap<String, Matrix> = [
        ("ua".to_string(), random_matrix(3, side, &mut rng)),
        ("ub".to_string(), random_matrix(4, side, &mut rng)),
    ]
    .into();
    let vecs: BTreeMap<String, Vec<f64>> = [
        ("ia".to_string(), random_matrix(1, side, &mut rng).data),
        ("ib".to_string(), random_matrix(1, side, &mut rng).data),
        ("ic".to_string(), random_matrix(1, side, &mut rng).data),
    ]
    .into();
    let sample = |u: &str, i: &str, recent: &[&str], label: u8| CtrSample {
        user_id: u.to_string(),
        item_id: i.to_string(),
        recent_item_ids: recent.iter().map(|s| s.to_string()).collect(),
        label,
        e_user: None,
        e_item: None,
    };
    let samples = [
        sample("ua", "ia", &[], 1),
        sample("ua", "ib", &["ia"], 0),
        sample("ub", "ic", &["ia", "ib"], 1),
        sample("ub", "ia", &["ic"], 0),
    ];
    let n = samples.len() as f64;

    let loss_of = |model: &JointModel| -> f64 {
        let mut total = 0.0;
        for s in &samples {
            let (p, _) = model.forward_sample(s, 0, &rows[&s.user_id], &vecs[&s.item_id]).unwrap();
            let y = f64::from(s.label);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        total / n
    };

    model.store.zero_grads();
    for s in &samples {
        let (p, cache) =
            model.forward_sample(s, 0, &rows[&s.user_id], &vecs[&s.item_id]).unwrap();
        let dlogit = (p - f64::from(s.label)) / n;
        model.backward_sample(s, &cache, dlogit).unwrap();
    }
    let analytic = model.store.flatten_grads();
    let params = model.store.flatten_values();
    finite_diff_check(
        |p| {
            model.store.load_flat_values(p);
            loss_of(&model)
        },
        &params,
        &analytic,
        FD_H,
    )
}

#[test]
fn criterion_03_gradients_survive_finite_difference_audits() {
    let start = Instant::now();
    let mut report = Vec::new();
    let mut run = |name: &str, f: &dyn Fn(u64) -> f64| {
        let mut worst: f64 = 0.0;
        for seed in 0..FD_SEEDS {
            worst = worst.max(f(0x03c3 ^ (seed * 7919)));
        }
        assert!(worst < FD_TOL, "{name}: max relative error {worst:e} at tolerance {FD_TOL:e}");
        report.push(format!("{name} {worst:.2e}"));
    };
    run("affine", &check_affine);
    run("attention", &check_attention);
    run("masked-self-attention", &check_masked_self_attention);
    run("cross-attention/item-query", &|s| {
        check_cross_attention(s, CrossAttentionForm::ItemAsQuery)
    });
    run("cross-attention/rows-query", &|s| {
        check_cross_attention(s, CrossAttentionForm::RowsAsQueries)
    });
    run("bce", &check_bce);
    run("fuse+ctr composite", &check_joint_composite);
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    println!(
        "criterion 3 PASS: {} over {FD_SEEDS} seeds each, {elapsed:?}",
        report.join(", ")
    );
}

// --- criterion 4: the causal mask admits no future leakage at all ---

#[test]
fn criterion_04_perturbing_a_future_row_leaves_earlier_outputs_untouched() {
    let t = 8;
    let d = 16;
    let mut rng = seeded(0x04c4);
    let r = random_matrix(t, d, &mut rng);
    let wq = random_matrix(d, d, &mut rng);
    let wk = random_matrix(d, d, &mut rng);
    let wv = random_matrix(d, d, &mut rng);
    let (base, _) = masked_self_attention(&r, &wq, &wk, &wv).unwrap();
    let mut pairs = 0usize;
    for j_pert in 0..t {
        let mut r2 = r.clone();
        for (slot, delta) in r2.row_mut(j_pert).iter_mut().zip(0..d) {
            *slot += 0.37 + 0.01 * delta as f64;
        }
        let (out, _) = masked_self_attention(&r2, &wq, &wk, &wv).unwrap();
        for j in 0..j_pert {
            let diff = base
                .row(j)
                .iter()
                .zip(out.row(j))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            assert!(diff <= 1e-12, "row {j} moved {diff:e} after perturbing row {j_pert}");
            pairs += 1;
        }
        if j_pert + 1 < t {
            // Sanity: the perturbed row itself must react, or the check is vacuous.
            let moved = base
                .row(j_pert)
                .iter()
                .zip(out.row(j_pert))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            assert!(moved > 1e-6, "perturbing row {j_pert} changed nothing");
        }
    }
    assert_eq!(pairs, t * (t - 1) / 2);
    println!("criterion 4 PASS: all {pairs} (j, j') pairs untouched at T={t}");
}

// --- criterion 5: the transition label rule under scripted probabilities ---

/// Answers judgment prompts with scores scripted to hit an exact pairwise
/// AUC per prompt variant, over an eval set of 10 positives ("pos k ...")
/// and 10 negatives ("neg k ..."). An AUC of x places 10(1-x) positives
/// below every negative and the rest above every negative: the winning
/// pair count is 10x * 10, so the AUC is exactly x.
struct ExactAucBackend {
    point: f64,
    seq: f64,
    hist: f64,
}

impl ExactAucBackend {
    fn score(&self, target_auc: f64, title: &str) -> f64 {
        let mut parts = title.split_whitespace();
        let class = parts.next().expect("class prefix");
        let k: usize = parts.next().and_then(|s| s.parse().ok()).expect("item rank");
        match class {
            "neg" => 0.1 + 0.01 * k as f64,
            "pos" => {
                let losers = 10 - (target_auc * 10.0).round() as usize;
                if k < losers {
                    0.01 + 0.0001 * k as f64
                } else {
                    0.9 + 0.001 * k as f64
                }
            }
            other => panic!("unexpected eval item class {other:?}"),
        }
    }
}

impl LlmBackend for ExactAucBackend {
    fn id(&self) -> String {
        format!("scripted:auc:{}:{}:{}", self.point, self.seq, self.hist)
    }

    fn generate(&self, _req: &GenRequest) -> Result<Vec<String>, GatewayError> {
        Err(GatewayError::MockParse("auc backend only judges".to_string()))
    }

    fn yes_probability(&self, rendered: &str) -> Result<f64, GatewayError> {
        let target = if rendered.contains("Current interest summary:") {
            self.point
        } else if rendered.contains("Interest history (most recent last):") {
            self.seq
        } else if rendered.contains("Recent behaviors:") {
            self.hist
        } else {
            return Err(GatewayError::MockParse("unrecognized judgment prompt".to_string()));
        };
        let title = rendered
            .lines()
            .find_map(|l| l.strip_prefix("Target item: "))
            .ok_or_else(|| GatewayError::MockParse("no target item line".to_string()))?;
        Ok(self.score(target, title))
    }
}

fn scripted_transition(point: f64, seq: f64, hist: f64) -> (f64, f64, f64, bool, bool) {
    let user = "probe";
    let current_chunk = BehaviorChunk {
        user_id: user.to_string(),
        chunk_index: 1,
        items: vec![plain_item(user, 0, "warmup story", true)],
    };
    let successor = BehaviorChunk {
        user_id: user.to_string(),
        chunk_index: 2,
        items: (0..20)
            .map(|i| {
                let label = i < 10;
                let class = if label { "pos" } else { "neg" };
                plain_item(user, i + 1, &format!("{class} {} story", i % 10), label)
            })
            .collect(),
    };
    let eval = build_eval_set(&successor, 10, 0x05c5).expect("both classes present");
    assert_eq!(eval.class_counts(), (10, 10));
    let gateway =
        Gateway::from_backend(Box::new(ExactAucBackend { point, seq, hist }), None);
    let prev = vec!["the user used to enjoy quiet documentaries".to_string()];
    let ctx = TransitionContext {
        prev_texts: &prev,
        current_text: "the user now binges loud game shows",
        chunk: &current_chunk,
    };
    let aucs = transition_aucs(&gateway, &ctx, &eval, &PromptLimits::default()).unwrap();
    let (cont, eff) = transition_labels(&aucs);
    (aucs.point, aucs.seq, aucs.hist, cont, eff)
}

#[test]
fn criterion_05_transition_labels_follow_the_strict_auc_rule() {
    // Current interest beats both baselines: both flags set.
    let (p, s, h, cont, eff) = scripted_transition(0.9, 0.7, 0.8);
    assert!((p - 0.9).abs() <= 1e-12 && (s - 0.7).abs() <= 1e-12 && (h - 0.8).abs() <= 1e-12);
    assert_eq!((cont, eff), (true, true), "case (0.9, 0.7, 0.8)");

    // Current interest loses to both: neither flag.
    let (p, s, h, cont, eff) = scripted_transition(0.6, 0.7, 0.8);
    assert!((p - 0.6).abs() <= 1e-12 && (s - 0.7).abs() <= 1e-12 && (h - 0.8).abs() <= 1e-12);
    assert_eq!((cont, eff), (false, false), "case (0.6, 0.7, 0.8)");

    // Exact equality is no evidence of gain: neither flag.
    let (p, s, h, cont, eff) = scripted_transition(0.8, 0.8, 0.8);
    assert!(p == s && s == h, "scripted equality must survive the pipeline");
    assert_eq!((cont, eff), (false, false), "equal-AUC case");

    println!("criterion 5 PASS: strict-improvement rule exact on all three scripted cases");
}

// --- criteria 6 and 8 share one full-scale double run ---

struct FullScaleRuns {
    dir_a: tempfile::TempDir,
    #[allow(dead_code)]
    dir_b: tempfile::TempDir,
    /// (artifact name, bytes from run A, bytes from run B), snapshotted
    /// before any test mutates the run directories.
    snapshots: Vec<(&'static str, Vec<u8>, Vec<u8>)>,
    elapsed: Duration,
}

fn full_scale_config(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.run.out_dir = out.to_path_buf();
    // 200 users x 8 chunks x 25 events, chunk length scaled to match.
    cfg.synth.chunk_len = 25;
    cfg.chunk.l = 25;
    // Training lengths trimmed for wall-clock; every seed stays pinned.
    cfg.fusion.epochs = 12;
    cfg.ctr.epochs = 12;
    cfg.ctr.max_train_samples = 2000;
    cfg.validate().expect("full-scale config is valid");
    cfg
}

const STAGE_ORDER: [Stage; 10] = [
    Stage::Synth,
    Stage::Chunk,
    Stage::Cascade,
    Stage::BuildRatingData,
    Stage::TrainRating,
    Stage::Search,
    Stage::Fuse,
    Stage::TrainCtr,
    Stage::Evaluate,
    Stage::Ablate,
];

fn full_scale_runs() -> &'static FullScaleRuns {
    static RUNS: OnceLock<FullScaleRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let start = Instant::now();
        // Different worker counts on purpose: artifacts may not depend on them.
        for (dir, workers) in [(&dir_a, 4), (&dir_b, 2)] {
            let ctx = StageContext::new(full_scale_config(dir.path()), Some(workers), false);
            for stage in STAGE_ORDER {
                let outcome = run_stage(&ctx, stage)
                    .unwrap_or_else(|e| panic!("full-scale {stage} failed: {e}"));
                assert_eq!(outcome, StageOutcome::Ran);
            }
        }
        let elapsed = start.elapsed();
        let snapshots = [INTERESTS, FUSED, ABLATION]
            .into_iter()
            .map(|name| {
                let a = std::fs::read(dir_a.path().join(name)).unwrap();
                let b = std::fs::read(dir_b.path().join(name)).unwrap();
                (name, a, b)
            })
            .collect();
        FullScaleRuns { dir_a, dir_b, snapshots, elapsed }
    })
}

#[test]
fn criterion_06_full_pipeline_repeats_byte_identically() {
    let runs = full_scale_runs();
    for (name, a, b) in &runs.snapshots {
        assert!(!a.is_empty(), "{name} is empty");
        assert_eq!(a, b, "{name} differs between two identically seeded runs");
    }
    assert!(
        runs.elapsed < Duration::from_secs(600),
        "two full runs took {:?}",
        runs.elapsed
    );
    println!(
        "criterion 6 PASS: interests/fused/ablation byte-identical across 2 runs, {:?}",
        runs.elapsed
    );
}

// --- criterion 7: searched interests track planted drift better than chance ---

fn hash64(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for b in bytes {
        h = (h ^ u64::from(*b)).wrapping_mul(0x100000001b3);
    }
    h
}

/// Scores each candidate by a hash of its text: i.i.d. draws, so the argmax
/// is a uniformly random child. Colliding texts tie and fall to the lower
/// index, which selects the same words either way.
struct CoinFlipRater {
    seed: u64,
}

impl InterestRater for CoinFlipRater {
    fn rate(&self, prev: &[String], current: &str) -> Result<f64, RatingError> {
        let h = hash64(
            current.as_bytes(),
            hash64(prev.last().map(String::as_bytes).unwrap_or(b""), self.seed),
        );
        Ok(ChaCha8Rng::seed_from_u64(h).random::<f64>())
    }
}

fn chunked_users(interactions: &[Interaction], l: usize) -> Vec<ChunkSequence> {
    let mut by_user: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    for r in interactions {
        by_user.entry(r.user_id.clone()).or_default().push(r.clone());
    }
    by_user
        .into_iter()
        .map(|(user_id, mut items)| {
            items.sort_by(|a, b| (a.ts, &a.item_id).cmp(&(b.ts, &b.item_id)));
            chunk_history(&UserHistory { user_id, items }, l).unwrap()
        })
        .collect()
}

/// One plain pass: per chunk, draw uniformly from the same best-of-N pool
/// the search stage would open, conditioned on the previous drawn text.
fn cascade_pass(
    users: &[ChunkSequence],
    gateway: &Gateway,
    limits: &PromptLimits,
    n: usize,
    seed: u64,
) -> Vec<CascadeUser> {
    users
        .iter()
        .map(|user| {
            let user_seed = hash64(user.user_id.as_bytes(), seed);
            let mut prev: Vec<String> = Vec::new();
            let mut steps = Vec::with_capacity(user.chunks.len());
            for chunk in &user.chunks {
                let ctx = PromptContext {
                    prev_interests: &prev,
                    chunk: Some(chunk),
                    ..Default::default()
                };
                let rendered = render_prompt(PromptKind::Interest, &ctx, limits).unwrap();
                let req = GenRequest {
                    kind: PromptKind::Interest,
                    rendered,
                    n,
                    temperature: 1.0,
                    seed: user_seed
                        ^ (chunk.chunk_index as u64).wrapping_mul(0x9e3779b97f4a7c15),
                    max_tokens: 256,
                };
                let candidates = gateway.sample_candidates(&req).unwrap();
                let mut draw = ChaCha8Rng::seed_from_u64(req.seed ^ 0x5851f42d4c957f2d);
                let text = candidates[draw.random_range(0..candidates.len())].clone();
                steps.push(CascadeStep { chunk: chunk.clone(), interest_text: text.clone() });
                prev.push(text);
            }
            CascadeUser { user_id: user.user_id.clone(), steps }
        })
        .collect()
}

fn mean_overlap(
    users: &[ChunkSequence],
    traces: &BTreeMap<String, GroundTruthTrace>,
    cfg: &SearchConfig,
    gateway: &Gateway,
    srm: &dyn InterestRater,
    prm: &dyn InterestRater,
    limits: &PromptLimits,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for user in users {
        let outcome = run_search(user, cfg, gateway, srm, prm, limits).unwrap();
        let trace = &traces[&user.user_id];
        for (i, text) in outcome.interests.iter().enumerate() {
            total += ground_truth_overlap(text, trace, i + 1).unwrap();
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn criterion_07_searched_interests_beat_random_selection_on_planted_drift() {
    let start = Instant::now();
    let limits = PromptLimits::default();
    let encoder = HashEncoder::new(64, 7);
    let mut searched_means = Vec::new();
    let mut random_means = Vec::new();
    for rep in 0..5u64 {
        let synth = SynthConfig {
            n_users: 40,
            seed: 300 + 11 * rep,
            ..SynthConfig::default()
        };
        let dataset = generate_dataset(&synth).unwrap();
        let users = chunked_users(&dataset.interactions, synth.chunk_len);
        let traces: BTreeMap<String, GroundTruthTrace> =
            dataset.traces.iter().map(|t| (t.user_id.clone(), t.clone())).collect();
        // One faithful plus nine corrupted candidates per node.
        let gateway =
            Gateway::from_backend(Box::new(MockLlm::new(rep, 0.8, synth.n_categories)), None);

        let cascade = cascade_pass(&users, &gateway, &limits, 10, 0x07c7 + rep);
        let (cont, eff) =
            build_rating_datasets(&cascade, 6, 1, 600 + rep, &gateway, &limits, 4).unwrap();
        let hyper = TrainHyper { seed: 700 + rep, ..TrainHyper::default() };
        let (srm, _) = train_rating_model(RaterKind::Srm, &cont, &encoder, 1, &hyper).unwrap();
        let (prm, _) = train_rating_model(RaterKind::Prm, &eff, &encoder, 1, &hyper).unwrap();

        let cfg = SearchConfig { n_expand: 10, k_prev: 1, alpha: 0.5, seed: 800 + rep };
        let srm_rater = EncodedRater { model: &srm, encoder: &encoder };
        let prm_rater = EncodedRater { model: &prm, encoder: &encoder };
        searched_means.push(mean_overlap(
            &users, &traces, &cfg, &gateway, &srm_rater, &prm_rater, &limits,
        ));
        let coin_a = CoinFlipRater { seed: 0x5eed ^ rep };
        let coin_b = CoinFlipRater { seed: 0x5eed ^ rep };
        random_means.push(mean_overlap(
            &users, &traces, &cfg, &gateway, &coin_a, &coin_b, &limits,
        ));
    }
    let searched = searched_means.iter().sum::<f64>() / 5.0;
    let random = random_means.iter().sum::<f64>() / 5.0;
    let relative = (searched - random) / random;
    let elapsed = start.elapsed();
    assert!(
        relative >= 0.20,
        "searched {searched:.4} vs random {random:.4}: relative gain {relative:.3} < 0.20 \
         (per-seed searched {searched_means:?}, random {random_means:?})"
    );
    println!(
        "criterion 7 PASS: planted-drift overlap {searched:.4} vs random {random:.4} \
         (+{:.1}% relative) over 5 seeds, {elapsed:?}",
        relative * 100.0
    );
}

// --- criterion 8: the full ladder beats the base model across seeds ---

#[test]
fn criterion_08_full_ladder_beats_base_in_most_paired_seeds() {
    let runs = full_scale_runs();
    let start = Instant::now();
    let mut wins = 0usize;
    let mut pairs = Vec::new();
    for rep in 0..5u64 {
        let mut cfg = full_scale_config(runs.dir_a.path());
        // Same artifacts, same samples; only the model seed moves.
        cfg.ctr.ablation_seed = 1000 + 37 * rep;
        cfg.ctr.epochs = 10;
        cfg.ctr.max_train_samples = 1500;
        let ctx = StageContext::new(cfg, Some(4), true);
        run_stage(&ctx, Stage::Ablate).unwrap();
        let report: AblationReport =
            read_json(&runs.dir_a.path().join(ABLATION)).unwrap();
        let auc_of = |name: &str| -> f64 {
            report
                .rows
                .iter()
                .find(|r| r.name() == name)
                .and_then(|r| r.auc())
                .unwrap_or_else(|| panic!("ladder row {name} missing or skipped"))
        };
        let base = auc_of("base");
        let full = auc_of("+CUBE+TIF+HTS");
        if full > base {
            wins += 1;
        }
        pairs.push((base, full));
    }
    let elapsed = start.elapsed();
    assert!(wins >= 4, "full ladder beat base in only {wins}/5 paired seeds: {pairs:?}");
    println!("criterion 8 PASS: +CUBE+TIF+HTS > base in {wins}/5 paired seeds {pairs:?}, {elapsed:?}");
}

// --- criterion 9: the default config is pinned by a golden file ---

#[test]
fn criterion_09_default_config_echo_matches_the_golden_file() {
    let golden = include_str!("golden/default_config.toml");
    let echo = PipelineConfig::default().effective_toml();
    assert_eq!(echo, golden, "default config drifted from the golden file");
    for knob in ["l = 50", "n_eval = 6", "n_expand = 10", "k = 1", "alpha = 0.5"] {
        assert!(golden.contains(knob), "golden file lost {knob:?}");
    }
    let reparsed: PipelineConfig = toml::from_str(golden).unwrap();
    reparsed.validate().unwrap();
    assert_eq!(reparsed.effective_toml(), golden, "echo is not a fixpoint");
    println!("criterion 9 PASS: default config echo matches the golden file exactly");
}

// --- criterion 10: raters fit linearly separable embeddings ---

fn separable_examples(kind: ExampleKind, n: usize, encoder: &HashEncoder) -> Vec<RatingExample> {
    let mut rng = seeded(0x10ca);
    let w: Vec<f64> = (0..encoder.dim()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let text = format!(
            "tok{} tok{} tok{} tok{}",
            rng.random_range(0..5000),
            rng.random_range(0..5000),
            rng.random_range(0..5000),
            rng.random_range(0..5000),
        );
        let e = encoder.encode(&text);
        let margin: f64 = w.iter().zip(&e).map(|(a, b)| a * b).sum();
        // A separating hyperplane defines the labels; a margin floor keeps
        // the two classes cleanly apart.
        if margin.abs() < 0.05 {
            continue;
        }
        out.push(RatingExample {
            kind,
            user_id: "hyperplane".to_string(),
            chunk_index: out.len() + 1,
            prev_texts: Vec::new(),
            current_text: text,
            label: u8::from(margin > 0.0),
            auc_seq: 0.5,
            auc_point: if margin > 0.0 { 0.9 } else { 0.1 },
            auc_hist: 0.5,
        });
    }
    out
}

#[test]
fn criterion_10_raters_reach_near_perfect_auc_on_separable_embeddings() {
    let start = Instant::now();
    let encoder = HashEncoder::new(64, 7);
    let hyper = TrainHyper::default(); // 200 full-batch epochs
    assert_eq!((hyper.epochs, hyper.batch), (200, 0));
    for (kind, rater) in [(ExampleKind::Cont, RaterKind::Srm), (ExampleKind::Eff, RaterKind::Prm)]
    {
        let examples = separable_examples(kind, 500, &encoder);
        let positives = examples.iter().filter(|e| e.label == 1).count();
        assert!(positives > 100 && positives < 400, "degenerate draw: {positives} positives");
        let (model, losses) =
            train_rating_model(rater, &examples, &encoder, 1, &hyper).unwrap();
        let scores: Vec<f64> = examples
            .iter()
            .map(|e| model.score(&e.prev_texts, &e.current_text, &encoder).unwrap())
            .collect();
        let labels: Vec<bool> = examples.iter().map(|e| e.label == 1).collect();
        let auc = mann_whitney_auc(&scores, &labels).unwrap();
        assert!(
            auc >= 0.99,
            "{rater:?} reached only AUC {auc:.4} after {} epochs (final loss {:.4})",
            hyper.epochs,
            losses.last().unwrap()
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(20), "took {elapsed:?}");
    println!("criterion 10 PASS: both raters at AUC >= 0.99 on 500 separable examples, {elapsed:?}");
}

// Keep the helper imports honest: these are exercised above but the compiler
// cannot see through the dyn indirection in every cfg combination.
#[allow(dead_code)]
fn _assert_traits() {
    fn is_send_sync<T: Send + Sync>() {}
    is_send_sync::<Gateway>();
    is_send_sync::<HashEncoder>();
}

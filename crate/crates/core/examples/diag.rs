//! Scratch diagnostics; not part of the build.

use std::collections::BTreeMap;

use hitlbm_core::behavior::{chunk_history, ChunkSequence, Interaction, UserHistory};
use hitlbm_core::encoder::{HashEncoder, TextEncoder};
use hitlbm_core::gateway::{
    render_prompt, GenRequest, Gateway, MockLlm, PromptContext, PromptKind, PromptLimits,
};
use hitlbm_core::rating::{
    build_rating_datasets, mann_whitney_auc, train_rating_model, CascadeStep, CascadeUser,
    RaterKind, TrainHyper,
};
use hitlbm_core::synth::{generate_dataset, ground_truth_overlap, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hash64(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for b in bytes {
        h = (h ^ u64::from(*b)).wrapping_mul(0x100000001b3);
    }
    h
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

fn main() {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let rep = args.first().copied().unwrap_or(0);
    let n_users = args.get(1).copied().unwrap_or(40) as usize;
    let enc_dim = args.get(2).copied().unwrap_or(64) as usize;
    let n_eval = args.get(3).copied().unwrap_or(6) as usize;
    let alpha = args.get(4).copied().unwrap_or(50) as f64 / 100.0;
    let noise = args.get(5).copied().unwrap_or(20) as f64 / 100.0;
    let n_categories = args.get(6).copied().unwrap_or(8) as usize;
    let lr = args.get(7).copied().unwrap_or(100) as f64 / 100.0;
    let epochs = args.get(8).copied().unwrap_or(800) as usize;
    let batch = args.get(9).copied().unwrap_or(32) as usize;
    let limits = PromptLimits::default();
    let encoder = HashEncoder::new(enc_dim, 7);
    let synth = SynthConfig {
        n_users,
        noise,
        n_categories,
        seed: 300 + 11 * rep,
        ..SynthConfig::default()
    };
    let dataset = generate_dataset(&synth).unwrap();
    let users = chunked_users(&dataset.interactions, synth.chunk_len);
    let traces: BTreeMap<_, _> =
        dataset.traces.iter().map(|t| (t.user_id.clone(), t.clone())).collect();
    let gateway = Gateway::from_backend(Box::new(MockLlm::new(rep, 0.8, synth.n_categories)), None);

    // Cascade pass identical to the acceptance test.
    let mut cascade = Vec::new();
    for user in &users {
        let user_seed = hash64(user.user_id.as_bytes(), 0x07c7 + rep);
        let mut prev: Vec<String> = Vec::new();
        let mut steps = Vec::new();
        for chunk in &user.chunks {
            let ctx = PromptContext { prev_interests: &prev, chunk: Some(chunk), ..Default::default() };
            let rendered = render_prompt(PromptKind::Interest, &ctx, &limits).unwrap();
            let req = GenRequest {
                kind: PromptKind::Interest,
                rendered,
                n: 10,
                temperature: 1.0,
                seed: user_seed ^ (chunk.chunk_index as u64).wrapping_mul(0x9e3779b97f4a7c15),
                max_tokens: 256,
            };
            let candidates = gateway.sample_candidates(&req).unwrap();
            let mut draw = ChaCha8Rng::seed_from_u64(req.seed ^ 0x5851f42d4c957f2d);
            let text = candidates[draw.random_range(0..candidates.len())].clone();
            steps.push(CascadeStep { chunk: chunk.clone(), interest_text: text.clone() });
            prev.push(text);
        }
        cascade.push(CascadeUser { user_id: user.user_id.clone(), steps });
    }

    let (cont, eff) =
        build_rating_datasets(&cascade, n_eval, 1, 600 + rep, &gateway, &limits, 4).unwrap();
    let bal = |v: &[hitlbm_core::rating::RatingExample]| {
        let p = v.iter().filter(|e| e.label == 1).count();
        format!("{} examples, {} pos ({:.0}%)", v.len(), p, 100.0 * p as f64 / v.len() as f64)
    };
    println!("cont: {}", bal(&cont));
    println!("eff:  {}", bal(&eff));

    // Mean variant AUCs split by label, to see what drives the labels.
    for (name, data) in [("cont", &cont), ("eff", &eff)] {
        let mean = |sel: &dyn Fn(&hitlbm_core::rating::RatingExample) -> bool,
                    f: &dyn Fn(&hitlbm_core::rating::RatingExample) -> f64| {
            let xs: Vec<f64> = data.iter().filter(|e| sel(e)).map(|e| f(e)).collect();
            if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 }
        };
        println!(
            "{name}: label1 point {:.3} seq {:.3} hist {:.3} | label0 point {:.3} seq {:.3} hist {:.3}",
            mean(&|e| e.label == 1, &|e| e.auc_point),
            mean(&|e| e.label == 1, &|e| e.auc_seq),
            mean(&|e| e.label == 1, &|e| e.auc_hist),
            mean(&|e| e.label == 0, &|e| e.auc_point),
            mean(&|e| e.label == 0, &|e| e.auc_seq),
            mean(&|e| e.label == 0, &|e| e.auc_hist),
        );
    }

    let hyper = TrainHyper {
        lr: 1.0,
        epochs: 800,
        batch: 32,
        hidden: vec![64, 32],
        seed: 700 + rep,
    };
    let (srm, srm_losses) = train_rating_model(RaterKind::Srm, &cont, &encoder, 1, &hyper).unwrap();
    let (prm, prm_losses) = train_rating_model(RaterKind::Prm, &eff, &encoder, 1, &hyper).unwrap();
    for (name, model, data, losses) in
        [("srm", &srm, &cont, &srm_losses), ("prm", &prm, &eff, &prm_losses)]
    {
        let scores: Vec<f64> = data
            .iter()
            .map(|e| model.score(&e.prev_texts, &e.current_text, &encoder).unwrap())
            .collect();
        let labels: Vec<bool> = data.iter().map(|e| e.label == 1).collect();
        println!(
            "{name}: train auc {:.3}, loss {:.3} -> {:.3}",
            mann_whitney_auc(&scores, &labels).unwrap(),
            losses.first().unwrap(),
            losses.last().unwrap()
        );
    }

    // Probe: do the raters rank the faithful candidate (k = 0) above the
    // corrupted ones at fresh nodes?
    let mut srm_fav = 0usize;
    let mut prm_fav = 0usize;
    let mut probes = 0usize;
    let mut faithful_overlap = 0.0;
    let mut corrupted_overlap = 0.0;
    let mut corrupted_n = 0.0;
    for user in users.iter().take(15) {
        let trace = &traces[&user.user_id];
        let mut prev: Vec<String> = Vec::new();
        for chunk in &user.chunks {
            let ctx = PromptContext { prev_interests: &prev, chunk: Some(chunk), ..Default::default() };
            let rendered = render_prompt(PromptKind::Interest, &ctx, &limits).unwrap();
            let req = GenRequest {
                kind: PromptKind::Interest,
                rendered,
                n: 10,
                temperature: 1.0,
                seed: hash64(user.user_id.as_bytes(), 0xabc) ^ chunk.chunk_index as u64,
                max_tokens: 256,
            };
            let cands = gateway.sample_candidates(&req).unwrap();
            faithful_overlap += ground_truth_overlap(&cands[0], trace, chunk.chunk_index).unwrap();
            for c in &cands[1..] {
                corrupted_overlap += ground_truth_overlap(c, trace, chunk.chunk_index).unwrap();
                corrupted_n += 1.0;
            }
            let s: Vec<f64> =
                cands.iter().map(|c| srm.score(&prev, c, &encoder).unwrap()).collect();
            let p: Vec<f64> = cands.iter().map(|c| prm.score(&[], c, &encoder).unwrap()).collect();
            let argmax = |v: &[f64]| {
                v.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &x)| {
                    if x > acc.1 { (i, x) } else { acc }
                }).0
            };
            if argmax(&s) == 0 { srm_fav += 1; }
            if argmax(&p) == 0 { prm_fav += 1; }
            probes += 1;
            prev.push(cands[0].clone());
        }
    }
    println!("probes: {probes}, srm picks faithful {srm_fav}, prm picks faithful {prm_fav}");
    println!(
        "overlap faithful {:.3}, corrupted {:.3}",
        faithful_overlap / probes as f64,
        corrupted_overlap / corrupted_n
    );

    // The actual criterion quantity for this seed.
    use hitlbm_core::tree::{run_search, EncodedRater, InterestRater, SearchConfig};
    struct CoinFlipRater {
        seed: u64,
    }
    impl InterestRater for CoinFlipRater {
        fn rate(&self, prev: &[String], current: &str) -> Result<f64, hitlbm_core::rating::RatingError> {
            let h = hash64(
                current.as_bytes(),
                hash64(prev.last().map(String::as_bytes).unwrap_or(b""), self.seed),
            );
            Ok(ChaCha8Rng::seed_from_u64(h).random::<f64>())
        }
    }
    let mean_overlap = |srm_r: &dyn InterestRater, prm_r: &dyn InterestRater| -> (f64, Vec<f64>) {
        let cfg = SearchConfig { n_expand: 10, k_prev: 1, alpha, seed: 800 + rep };
        let mut total = 0.0;
        let mut count = 0usize;
        let mut faithful_picks = vec![0.0; 8];
        let mut layer_n = vec![0.0; 8];
        for user in &users {
            let outcome = run_search(user, &cfg, &gateway, srm_r, prm_r, &limits).unwrap();
            let trace = &traces[&user.user_id];
            for (i, text) in outcome.interests.iter().enumerate() {
                total += ground_truth_overlap(text, trace, i + 1).unwrap();
                count += 1;
            }
            for (i, id) in outcome.path.iter().enumerate() {
                let child: usize = id.split_once('C').unwrap().1.parse().unwrap();
                if child == 0 {
                    faithful_picks[i] += 1.0;
                }
                layer_n[i] += 1.0;
            }
        }
        let rates: Vec<f64> = faithful_picks
            .iter()
            .zip(&layer_n)
            .map(|(f, n): (&f64, &f64)| f / n.max(1.0))
            .collect();
        (total / count as f64, rates)
    };
    let (searched, s_rates) = mean_overlap(
        &EncodedRater { model: &srm, encoder: &encoder },
        &EncodedRater { model: &prm, encoder: &encoder },
    );
    let (random, _) = mean_overlap(
        &CoinFlipRater { seed: 0x5eed ^ rep },
        &CoinFlipRater { seed: 0x5eed ^ rep },
    );
    let pretty: Vec<String> = s_rates.iter().map(|r| format!("{r:.2}")).collect();
    println!("faithful pick rate by layer: [{}]", pretty.join(", "));
    println!(
        "searched {searched:.4} vs random {random:.4} -> relative {:+.3}",
        (searched - random) / random
    );
}

//! Deterministic mock backend with a planted-faithful generation policy.
//!
//! For interest prompts, candidate 0 reads the chunk honestly: it names the
//! top liked category tokens (the dominant one several times, which is what
//! texts that actually commit to a theme look like) and, when the prompt
//! carries a previous summary, appends a drift sentence naming categories
//! that are present now but were absent before. Candidates 1..n-1 take the
//! faithful text and corrupt each category-token occurrence with probability
//! `p_corrupt`, drawing replacements from outside the faithful token set so
//! that at p_corrupt = 1 exactly one candidate carries the true signal.
//!
//! yes_probability is monotone in interest fidelity: 0.1 + 0.8 * (fraction of
//! the target item's category tokens that appear in the prompt's evidence
//! section, disliked behavior lines excluded).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{fnv1a, tokenize};
use crate::synth::category_token;

use super::{GatewayError, GenRequest, LlmBackend, PromptKind};

pub struct MockLlm {
    seed: u64,
    p_corrupt: f64,
    vocab: usize,
}

impl MockLlm {
    pub fn new(seed: u64, p_corrupt: f64, vocab: usize) -> Self {
        assert!((2..=100).contains(&vocab), "mock vocab must be within 2..=100");
        assert!((0.0..=1.0).contains(&p_corrupt), "p_corrupt must be within [0, 1]");
        MockLlm { seed, p_corrupt, vocab }
    }

    fn candidate_rng(&self, rendered: &str, seed: u64, k: usize) -> ChaCha8Rng {
        let mut h = fnv1a(rendered.as_bytes(), self.seed ^ seed);
        h ^= (k as u64).wrapping_mul(0x9e3779b97f4a7c15);
        ChaCha8Rng::seed_from_u64(h)
    }

    /// Replaces each category-token occurrence with probability p_corrupt,
    /// drawing from categories outside `faithful_set` (never the original).
    fn corrupt(&self, faithful: &str, rng: &mut ChaCha8Rng) -> String {
        let faithful_set: Vec<String> =
            tokenize(faithful).into_iter().filter(|t| is_category_token(t)).collect();
        let pool: Vec<String> = (0..self.vocab)
            .map(category_token)
            .filter(|c| !faithful_set.contains(c))
            .collect();
        let mut out = String::with_capacity(faithful.len());
        let mut rest = faithful;
        while let Some(pos) = rest.find("cat_") {
            let (before, at) = rest.split_at(pos);
            out.push_str(before);
            let token_len = "cat_".len() + 2;
            if at.len() >= token_len && at[4..6].chars().all(|c| c.is_ascii_digit()) {
                let original = &at[..token_len];
                if rng.random::<f64>() < self.p_corrupt {
                    let replacement = if pool.is_empty() {
                        // Vocabulary exhausted by the faithful set; fall back
                        // to any category other than this occurrence.
                        loop {
                            let c = category_token(rng.random_range(0..self.vocab));
                            if c != original {
                                break c;
                            }
                        }
                    } else {
                        pool[rng.random_range(0..pool.len())].clone()
                    };
                    out.push_str(&replacement);
                } else {
                    out.push_str(original);
                }
                rest = &at[token_len..];
            } else {
                out.push_str("cat_");
                rest = &at[4..];
            }
        }
        out.push_str(rest);
        out
    }

    fn faithful_interest(&self, rendered: &str) -> String {
        let parsed = InterestPrompt::parse(rendered);
        let mut by_cat: Vec<(String, usize)> = {
            let mut counts = std::collections::BTreeMap::new();
            for c in &parsed.liked_cats {
                *counts.entry(c.clone()).or_insert(0usize) += 1;
            }
            counts.into_iter().collect()
        };
        by_cat.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        if by_cat.is_empty() {
            return "The user's current interests are unclear from this chunk.".to_string();
        }
        let top1 = by_cat[0].0.clone();
        let top2 = by_cat.get(1).map(|(c, _)| c.clone());
        let mut text = format!(
            "The user currently gravitates toward {top1} titles and keeps returning to {top1} content"
        );
        if let Some(t2) = &top2 {
            text.push_str(&format!(", with a secondary taste for {t2}"));
        }
        text.push_str(&format!(". Dominant category: {top1}."));
        if parsed.has_prev {
            let mut new_cats: Vec<&String> = Vec::new();
            if !parsed.prev_cats.contains(&top1) {
                new_cats.push(&top1);
            }
            if let Some(t2) = &top2 {
                if !parsed.prev_cats.contains(t2) {
                    new_cats.push(t2);
                }
            }
            if !new_cats.is_empty() {
                let listed =
                    new_cats.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
                text.push_str(&format!(" Newly emerging interests: {listed}."));
            }
        }
        text
    }

    fn faithful_item(&self, rendered: &str) -> String {
        let line = rendered
            .lines()
            .find_map(|l| l.strip_prefix("Target item: "))
            .unwrap_or("unknown item");
        let title = line.split(" (category:").next().unwrap_or(line).trim();
        let cat = tokenize(line).into_iter().find(|t| is_category_token(t));
        match cat {
            Some(cat) => {
                format!("A {cat} item: {title}. Typical fans of {cat} content will enjoy it.")
            }
            None => format!("An item called {title}. General audiences may enjoy it."),
        }
    }
}

pub(crate) fn is_category_token(tok: &str) -> bool {
    tok.strip_prefix("cat_")
        .is_some_and(|rest| rest.len() == 2 && rest.chars().all(|c| c.is_ascii_digit()))
}

struct InterestPrompt {
    liked_cats: Vec<String>,
    prev_cats: Vec<String>,
    has_prev: bool,
}

impl InterestPrompt {
    fn parse(rendered: &str) -> Self {
        let mut liked_cats = Vec::new();
        let mut prev_cats = Vec::new();
        let mut has_prev = false;
        let mut in_prev = false;
        for line in rendered.lines() {
            if line.starts_with("Previous interest summary:") {
                has_prev = true;
                in_prev = true;
                continue;
            }
            if line.starts_with("Focus on what changed") || line.starts_with("Recent behaviors:") {
                in_prev = false;
            }
            if in_prev {
                prev_cats.extend(tokenize(line).into_iter().filter(|t| is_category_token(t)));
            } else if line.starts_with("- [liked]") {
                liked_cats.extend(tokenize(line).into_iter().filter(|t| is_category_token(t)));
            }
        }
        InterestPrompt { liked_cats, prev_cats, has_prev }
    }
}

impl LlmBackend for MockLlm {
    fn id(&self) -> String {
        format!("mock:v1:{}:{}:{}", self.seed, self.p_corrupt, self.vocab)
    }

    fn generate(&self, req: &GenRequest) -> Result<Vec<String>, GatewayError> {
        if req.n == 0 {
            return Err(GatewayError::ZeroCandidates);
        }
        let faithful = match req.kind {
            PromptKind::Interest => self.faithful_interest(&req.rendered),
            PromptKind::Item => self.faithful_item(&req.rendered),
            // Judgment prompts are scored, not sampled; return the literal
            // answer shape so misuse is at least visible.
            PromptKind::Seq | PromptKind::Point | PromptKind::Hist => "Yes".to_string(),
        };
        let mut out = Vec::with_capacity(req.n);
        out.push(faithful.clone());
        for k in 1..req.n {
            let mut rng = self.candidate_rng(&req.rendered, req.seed, k);
            out.push(self.corrupt(&faithful, &mut rng));
        }
        Ok(out)
    }

    fn yes_probability(&self, rendered: &str) -> Result<f64, GatewayError> {
        let Some((evidence, item_part)) = rendered.split_once("\nTarget item: ") else {
            return Err(GatewayError::MockParse(
                "prompt has no 'Target item:' section".to_string(),
            ));
        };
        let item_cats: std::collections::BTreeSet<String> = tokenize(item_part)
            .into_iter()
            .filter(|t| is_category_token(t))
            .collect();
        let evidence_cats: std::collections::BTreeSet<String> = evidence
            .lines()
            .filter(|l| !l.starts_with("- [disliked]"))
            .flat_map(tokenize)
            .filter(|t| is_category_token(t))
            .collect();
        let frac = if item_cats.is_empty() {
            0.0
        } else {
            item_cats.intersection(&evidence_cats).count() as f64 / item_cats.len() as f64
        };
        Ok(0.1 + 0.8 * frac)
    }
}

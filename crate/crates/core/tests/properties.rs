mod common;

use std::sync::OnceLock;

use proptest::prelude::*;

use memaudit_core::dedup::{dedup_ranked, is_duplicate, trigram_multiset};
use memaudit_core::generation::{
    beam_extend, generate_sample, greedy, sample_range, tempered_logprobs, temperature_at, SamplerConfig, Strategy as Sampling,
};
use memaudit_core::ground_truth::{build_index, count_eidetic, Corpus, DEFAULT_PROXIMITY_FACTOR};
use memaudit_core::lm::LanguageModel;
use memaudit_core::metrics::{perplexity, window_min_perplexity};
use memaudit_core::pipeline::select::rank_schedule;
use memaudit_core::reference::NgramModel;

fn model() -> &'static NgramModel {
    static M: OnceLock<NgramModel> = OnceLock::new();
    M.get_or_init(|| common::small_model(4))
}

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(common::small_corpus)
}

/// Short texts over a small word list, so trigrams collide often.
fn wordy_text() -> impl Strategy<Value = String> {
    let words = prop::sample::select(vec!["red", "fox", "ran", "far", "and", "the", "dog", "sat", "a", "b"]);
    let seps = prop::sample::select(vec![" ", ", ", ". ", "\n", " - "]);
    prop::collection::vec((words, seps), 0..16).prop_map(|v| v.into_iter().map(|(w, s)| format!("{w}{s}")).collect())
}

fn model_text() -> impl Strategy<Value = String> {
    let alphabet: Vec<String> = model().vocab().entries().take(model().alphabet_size()).map(String::from).collect();
    prop::collection::vec(prop::sample::select(alphabet), 1..60).prop_map(|v| v.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_schedule_is_strict_and_ends_at_n(pick in 1usize..150, extra in 0usize..2000) {
        let n = pick + extra;
        let ranks = rank_schedule(n, pick).unwrap();
        prop_assert_eq!(ranks.len(), pick);
        prop_assert!(ranks[0] >= 1);
        prop_assert_eq!(*ranks.last().unwrap(), n);
        prop_assert!(ranks.windows(2).all(|w| w[0] < w[1]));
        if pick > 1 {
            prop_assert!(rank_schedule(pick - 1, pick).is_err());
        }
    }

    #[test]
    fn text_is_its_own_duplicate(s in wordy_text()) {
        prop_assert!(is_duplicate(&s, &s));
    }

    #[test]
    fn dedup_keeps_no_directed_duplicates(texts in prop::collection::vec(wordy_text(), 0..30)) {
        let items: Vec<(u64, &str)> = texts.iter().enumerate().map(|(i, t)| (i as u64, t.as_str())).collect();
        let out = dedup_ranked(items.iter().copied(), None);
        for (a, &i) in out.kept.iter().enumerate() {
            for &j in &out.kept[..a] {
                prop_assert!(!is_duplicate(&texts[i], &texts[j]), "{i} duplicates earlier kept {j}");
            }
        }
        prop_assert_eq!(out.kept.len() + out.log.len(), texts.len());
        for d in &out.log {
            let (dropped, kept) = (d.dropped_id as usize, d.kept_id_that_matched as usize);
            prop_assert!(kept < dropped && out.kept.contains(&kept));
            prop_assert!(is_duplicate(&texts[dropped], &texts[kept]));
        }
        let again: Vec<(u64, &str)> = out.kept.iter().map(|&i| items[i]).collect();
        prop_assert_eq!(dedup_ranked(again.iter().copied(), None).kept.len(), out.kept.len());
    }

    #[test]
    fn trigram_total_counts_windows(s in wordy_text()) {
        let n = memaudit_core::dedup::words(&s).count();
        prop_assert_eq!(trigram_multiset(&s).total() as usize, n.saturating_sub(2));
    }

    #[test]
    fn tempered_distribution_is_normalized(
        lps in prop::collection::vec(-30.0f64..0.0, 1..50),
        t in 1.0f64..10.0,
    ) {
        let out = tempered_logprobs(&lps, t);
        let mass: f64 = out.iter().map(|l| l.exp()).sum();
        prop_assert!((mass - 1.0).abs() < 1e-9);
        for i in 0..lps.len() {
            for j in 0..lps.len() {
                if lps[i] > lps[j] {
                    prop_assert!(out[i] >= out[j]);
                }
            }
        }
    }

    #[test]
    fn temperature_schedule_is_monotone(start in 1.0f64..20.0, drop in 0.0f64..1.0, decay in 1usize..50) {
        let cfg = SamplerConfig { temp_start: start, temp_end: 1.0 + (start - 1.0) * drop, decay_tokens: decay, ..Default::default() };
        prop_assert_eq!(temperature_at(&cfg, 0), cfg.temp_start);
        prop_assert!((temperature_at(&cfg, decay) - cfg.temp_end).abs() < 1e-12);
        prop_assert_eq!(temperature_at(&cfg, decay + 7), temperature_at(&cfg, decay));
        for p in 0..decay {
            prop_assert!(temperature_at(&cfg, p) >= temperature_at(&cfg, p + 1));
        }
    }

    #[test]
    fn full_top_k_sums_to_one(text in model_text()) {
        let m = model();
        let d = m.top_k_text(&text, m.vocab().size()).unwrap();
        let mass: f64 = d.candidates.iter().map(|c| c.logprob.exp()).sum();
        prop_assert!((mass - 1.0).abs() < 1e-9);
        prop_assert!(d.candidates.windows(2).all(|w| w[0].logprob >= w[1].logprob));
    }

    #[test]
    fn score_agrees_with_top_k(text in model_text()) {
        let m = model();
        let (toks, score) = m.score_text(&text).unwrap();
        let mut prefix = String::new();
        for (tok, lp) in toks.iter().zip(score.token_logprobs()) {
            let d = m.top_k_text(&prefix, m.vocab().size()).unwrap();
            let c = d.candidates.iter().find(|c| c.token.id == tok.id).unwrap();
            prop_assert_eq!(c.logprob, *lp);
            prefix.push_str(&tok.text);
        }
        let ppl = perplexity(&score).unwrap();
        let win = window_min_perplexity(&score, 50).unwrap();
        prop_assert!(win <= ppl * (1.0 + 1e-12) || score.len() < 50);
        prop_assert!(ppl >= 1.0);
    }

    #[test]
    fn model_bytes_round_trip(order in 1usize..6) {
        let m = common::small_model(order);
        let back = NgramModel::from_bytes(&m.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), m.to_bytes().unwrap());
        prop_assert_eq!(back.prob("the", 'n').unwrap(), m.prob("the", 'n').unwrap());
    }

    #[test]
    fn eidetic_count_matches_naive(doc in 0usize..40, start in 0usize..400, len in 1usize..30) {
        let c = corpus();
        let text = &c.documents()[doc].text;
        let chars: Vec<char> = text.chars().collect();
        let start = start % chars.len();
        let q: String = chars[start..(start + len).min(chars.len())].iter().collect();
        let naive = |hay: &str| (0..hay.len()).filter(|&i| hay.is_char_boundary(i) && hay[i..].starts_with(q.as_str())).count();
        let count = count_eidetic(c, &q).unwrap();
        let docs = c.documents().iter().filter(|d| naive(&d.text) > 0).count();
        let total: usize = c.documents().iter().map(|d| naive(&d.text)).sum();
        prop_assert_eq!((count.docs, count.total), (docs, total));
        prop_assert!(count.docs >= 1);
    }

    #[test]
    fn exact_substrings_always_verify(doc in 0usize..40, start in 0usize..60, len in 3usize..40) {
        static INDEX: OnceLock<memaudit_core::ground_truth::NgramIndex> = OnceLock::new();
        let index = INDEX.get_or_init(|| build_index(corpus()));
        let words: Vec<&str> = memaudit_core::dedup::words(&corpus().documents()[doc].text).collect();
        prop_assume!(words.len() >= 3);
        let start = start % (words.len() - 2);
        let end = (start + len).min(words.len());
        let candidate = words[start..end].join(" ");
        prop_assert!(index.fuzzy_3gram_verify(&candidate, DEFAULT_PROXIMITY_FACTOR).unwrap().is_confirmed());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn width_one_beam_is_greedy(prefix in model_text(), steps in 1usize..20) {
        prop_assert_eq!(beam_extend(model(), &prefix, 1, steps).unwrap(), greedy(model(), &prefix, steps).unwrap());
    }

    #[test]
    fn wider_beam_never_scores_worse_than_greedy(prefix in model_text(), steps in 1usize..12) {
        let g = greedy(model(), &prefix, steps).unwrap();
        let b = beam_extend(model(), &prefix, 5, steps).unwrap();
        prop_assert!(b.logprob >= g.logprob - 1e-12);
        prop_assert_eq!(b.tokens.len(), steps);
    }

    #[test]
    fn samples_depend_only_on_seed_and_id(seed in any::<u64>(), id in 0u64..1000, strategy in 0usize..2) {
        let cfg = SamplerConfig {
            strategy: [Sampling::TopN, Sampling::DecayedTemperature][strategy],
            master_seed: seed,
            max_tokens: 16,
            num_samples: 4,
            ..Default::default()
        };
        let alone = generate_sample(model(), &cfg, None, id).unwrap();
        let batch = sample_range(model(), &cfg, None, id).unwrap();
        prop_assert_eq!(&batch[0], &alone);
        prop_assert_eq!(alone.token_count(), 16);
        prop_assert_eq!(alone.tokens().collect::<String>(), alone.text.clone());
    }
}

#[test]
fn thread_count_does_not_change_samples() {
    let cfg = SamplerConfig {
        master_seed: 99,
        max_tokens: 24,
        num_samples: 64,
        ..Default::default()
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| sample_range(model(), &cfg, None, 0).unwrap())
    };
    assert_eq!(run(1), run(4));
}

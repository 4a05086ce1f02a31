//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use kalign_core::checkpoint::Checkpoint;
use kalign_core::config::TrainConfig;
use kalign_core::diagnostics::{
    alignment_metric, anisotropy, anisotropy_bound_check, anisotropy_report, asymptotic_gap,
    uniformity_metric, Sampling,
};
use kalign_core::kg::{make_pairs, Entity, EntityId, KnowledgeGraph, Relation, Split, Triple};
use kalign_core::kgc::{
    evaluate, evaluate_with_table, rank, EntityTable, EvalOptions, FilterIndex, RankingQuery, TiePolicy,
    Direction,
};
use kalign_core::kgqa::{self, QaTask};
use kalign_core::losses::{explicit_loss, implicit_loss, similarity_matrix};
use kalign_core::model::{Embedding, Encoder, ModelConfig};
use kalign_core::synth::{sentences, synthetic_kg, SynthConfig};
use kalign_core::text::{encode_pair, encode_view, InstructionSample, TokenSeq, View, Vocab};
use kalign_core::train::{batch_losses, build_vocab, toy_perplexity, Trainer};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1e-300) || a == b
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    Embedding::new(v)
}

// ---------------------------------------------------------------- oracles

fn oracle_lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn oracle_explicit(s: &[Vec<f64>], tau: f64, margin: f64) -> f64 {
    let n = s.len();
    let logit = |i: usize, j: usize| (s[i][j] - if i == j { margin } else { 0.0 }) / tau;
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| logit(i, j)).collect();
        let col: Vec<f64> = (0..n).map(|j| logit(j, i)).collect();
        total += 0.5 * ((oracle_lse(&row) - logit(i, i)) + (oracle_lse(&col) - logit(i, i)));
    }
    total / n as f64
}

fn oracle_implicit(logits: &[Vec<Vec<f64>>], samples: &[InstructionSample]) -> f64 {
    let mut total = 0.0;
    for (b, s) in samples.iter().enumerate() {
        let mut nll = 0.0;
        let mut count = 0.0;
        for p in 1..s.tokens.len() {
            if s.mask[p] {
                let row = &logits[b][p - 1];
                nll += oracle_lse(row) - row[s.tokens[p] as usize];
                count += 1.0;
            }
        }
        total += nll / count;
    }
    total / samples.len() as f64
}

fn oracle_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn oracle_anisotropy(e: &[Embedding]) -> f64 {
    let n = e.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += oracle_dot(e[i].as_slice(), e[j].as_slice());
            }
        }
    }
    s / (n * (n - 1)) as f64
}

fn oracle_dist2(a: &Embedding, b: &Embedding) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum()
}

fn oracle_alignment(pairs: &[(Embedding, Embedding)], alpha: f64) -> f64 {
    pairs.iter().map(|(a, b)| oracle_dist2(a, b).sqrt().powf(alpha)).sum::<f64>() / pairs.len() as f64
}

fn oracle_uniformity(e: &[Embedding], t: f64) -> f64 {
    let n = e.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += (-t * oracle_dist2(&e[i], &e[j])).exp();
            }
        }
    }
    (s / (n * (n - 1)) as f64).ln()
}

fn oracle_rank(scores: &[f64], gold: usize, filter: &HashSet<usize>) -> usize {
    let mut r = 1;
    for (i, &s) in scores.iter().enumerate() {
        if i != gold && !filter.contains(&i) && s > scores[gold] {
            r += 1;
        }
    }
    r
}

fn check_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    let dev = Device::Cpu;
    let instances = 100;
    let tol = 1e-6;
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut note = |name: &str, got: f64, want: f64, failures: &mut Vec<String>| {
        let err = (got - want).abs() / want.abs().max(1e-300);
        worst = worst.max(if got == want { 0.0 } else { err });
        if !rel_close(got, want, tol) {
            failures.push(format!("{name}: {got} vs {want}"));
        }
    };
    for _ in 0..instances {
        // explicit loss
        let n = rng.gen_range(1..=12);
        let d = rng.gen_range(2..=16);
        let a: Vec<Embedding> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
        let b: Vec<Embedding> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
        let sim = similarity_matrix(&a, &b).unwrap();
        let s_oracle: Vec<Vec<f64>> = a
            .iter()
            .map(|x| b.iter().map(|y| oracle_dot(x.as_slice(), y.as_slice())).collect())
            .collect();
        for i in 0..n {
            for j in 0..n {
                note("similarity", sim.get(i, j), s_oracle[i][j], &mut failures);
            }
        }
        let tau = [0.05, 0.1, 0.5, 1.0][rng.gen_range(0..4)];
        let margin = rng.gen_range(0.0..0.1);
        let got = explicit_loss(&sim.to_tensor().unwrap(), &Tensor::new(tau, &dev).unwrap(), margin)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let want = oracle_explicit(&s_oracle, tau, margin);
        if n == 1 {
            // single pair: both terms are exactly zero
            if got.abs() > 1e-12 {
                failures.push(format!("explicit n=1: {got}"));
            }
        } else {
            note("explicit", got, want, &mut failures);
        }

        // implicit loss
        let m = rng.gen_range(1..=4);
        let t = rng.gen_range(3..=10);
        let v = rng.gen_range(3..=12);
        let logits: Vec<Vec<Vec<f64>>> = (0..m)
            .map(|_| (0..t).map(|_| (0..v).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect())
            .collect();
        let samples: Vec<InstructionSample> = (0..m)
            .map(|_| {
                let len = rng.gen_range(2..=t + 1);
                let prompt_len = rng.gen_range(1..len);
                let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..v as u32)).collect();
                let mask = (0..len).map(|i| i >= prompt_len).collect();
                InstructionSample { tokens, prompt_len, mask }
            })
            .collect();
        let flat: Vec<f64> = logits.iter().flatten().flatten().copied().collect();
        let lt = Tensor::from_vec(flat, (m, t, v), &dev).unwrap();
        let refs: Vec<&InstructionSample> = samples.iter().collect();
        let got = implicit_loss(&lt, &refs).unwrap().to_scalar::<f64>().unwrap();
        note("implicit", got, oracle_implicit(&logits, &samples), &mut failures);

        // representation metrics
        let k = rng.gen_range(2..=20);
        let embs: Vec<Embedding> = (0..k).map(|_| random_unit(&mut rng, d)).collect();
        note("anisotropy", anisotropy(&embs).unwrap(), oracle_anisotropy(&embs), &mut failures);
        let pairs: Vec<(Embedding, Embedding)> = (0..k)
            .map(|_| (random_unit(&mut rng, d), random_unit(&mut rng, d)))
            .collect();
        let alpha = [1.0, 2.0, 0.5][rng.gen_range(0..3)];
        note("alignment", alignment_metric(&pairs, alpha).unwrap(), oracle_alignment(&pairs, alpha), &mut failures);
        let tt = [1.0, 2.0, 4.0][rng.gen_range(0..3)];
        note("uniformity", uniformity_metric(&embs, tt).unwrap(), oracle_uniformity(&embs, tt), &mut failures);

        // filtered rank
        let entities = rng.gen_range(2..=30);
        let table = EntityTable::new((0..entities).map(|_| random_unit(&mut rng, d)).collect());
        let query = random_unit(&mut rng, d);
        let gold = rng.gen_range(0..entities);
        let filter: HashSet<usize> = (0..entities).filter(|&i| i != gold && rng.gen_bool(0.3)).collect();
        let q = RankingQuery {
            direction: Direction::TailPrediction,
            query: query.clone(),
            gold: EntityId(gold as u32),
            filter: filter.iter().map(|&i| EntityId(i as u32)).collect(),
        };
        let scores: Vec<f64> = table.embeddings().iter().map(|e| oracle_dot(e.as_slice(), query.as_slice())).collect();
        let got = rank(&q, &table, TiePolicy::Optimistic).unwrap();
        let want = oracle_rank(&scores, gold, &filter);
        if got != want {
            failures.push(format!("rank: {got} vs {want}"));
        }
    }
    Outcome {
        name: "oracle_equivalence",
        pass: failures.is_empty(),
        detail: format!(
            "{instances} instances per function, worst relative error {worst:.2e}{}",
            failures.first().map(|f| format!("; first failure {f}")).unwrap_or_default()
        ),
    }
}

// ---------------------------------------------------------- gradient check

fn flat_values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn check_gradients() -> Outcome {
    let kg = synthetic_kg(&SynthConfig::default()).unwrap().augment_inverse().unwrap();
    let vocab = build_vocab(&kg, 8192).unwrap();
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: 128,
        vocab_size: vocab.len(),
        seed: 11,
    };
    let encoder = Encoder::new(cfg, DType::F64).unwrap();
    let limits = kalign_core::text::TextLimits { max_description_length: 12, max_lm_length: 128 };
    let kp = make_pairs(&kg.train()[..6], &kg);
    let pairs: Vec<(TokenSeq, TokenSeq)> = kp.iter().map(|p| encode_pair(p, &vocab, &limits)).collect();
    let pair_refs: Vec<(&TokenSeq, &TokenSeq)> = pairs.iter().map(|(a, b)| (a, b)).collect();
    let samples: Vec<InstructionSample> = kp[..2]
        .iter()
        .map(|p| kalign_core::text::render_instruction(p, &vocab, &limits).unwrap())
        .collect();
    let sample_refs: Vec<&InstructionSample> = samples.iter().collect();
    let log_tau = Var::new(0.05f64.ln(), &Device::Cpu).unwrap();
    let (lambda, margin) = (0.1, 0.02);
    let loss = || -> Tensor {
        let tau = log_tau.as_tensor().exp().unwrap();
        batch_losses(&encoder, &tau, margin, lambda, &pair_refs, &sample_refs, None)
            .unwrap()
            .joint
    };
    let grads = loss().backward().unwrap();
    let mut params: Vec<(String, Var)> = encoder
        .trainable_parameters()
        .into_iter()
        .map(|(n, v)| (n, v.clone()))
        .collect();
    params.push(("log_tau".into(), log_tau.clone()));
    let eps = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = (0.0f64, String::new());
    let mut failures = 0;
    for (name, var) in &params {
        let analytic = grads
            .get(var.as_tensor())
            .map(flat_values)
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let base = flat_values(var.as_tensor());
        let shape = var.shape().clone();
        let mut idx: Vec<usize> = (0..base.len()).collect();
        idx.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
        let mut picks: Vec<usize> = idx.iter().take(4).copied().collect();
        picks.extend((0..4).map(|_| rng.gen_range(0..base.len())));
        picks.sort_unstable();
        picks.dedup();
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &i in &picks {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
                loss().to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            var.set(&Tensor::from_vec(base.clone(), shape.clone(), &Device::Cpu).unwrap()).unwrap();
            diff2 += (analytic[i] - numeric).powi(2);
            a2 += analytic[i].powi(2);
            n2 += numeric.powi(2);
        }
        let scale = a2.sqrt().max(n2.sqrt());
        let rel = if scale < 1e-10 { 0.0 } else { diff2.sqrt() / scale };
        if rel >= 1e-3 {
            failures += 1;
        }
        if rel >= worst.0 {
            worst = (rel, name.clone());
        }
    }
    Outcome {
        name: "gradient_check",
        pass: failures == 0,
        detail: format!(
            "{} tensors, worst relative error {:.2e} ({}), {} above 1e-3",
            params.len(),
            worst.0,
            worst.1,
            failures
        ),
    }
}

// --------------------------------------------------------------- theorem 2

fn check_anisotropy_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut min_slack = f64::INFINITY;
    for k in 0..200 {
        let n = rng.gen_range(2..=128);
        let d = rng.gen_range(2..=32);
        let tau = [0.05, 0.5, 1.0][k % 3];
        // mix isotropic sets with clustered ones
        let center = random_unit(&mut rng, d);
        let spread = rng.gen_range(0.0..2.0);
        let embs: Vec<Embedding> = (0..n)
            .map(|_| {
                let v: Vec<f64> = center
                    .as_slice()
                    .iter()
                    .map(|c| c + spread * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) / (d as f64).sqrt())
                    .collect();
                Embedding::new(v)
            })
            .collect();
        min_slack = min_slack.min(anisotropy_bound_check(&embs, tau).unwrap().slack);
    }
    let mut equal_worst = 0.0f64;
    for &tau in &[0.05, 0.5, 1.0] {
        for &n in &[2usize, 17, 128] {
            let v = random_unit(&mut rng, 8);
            let embs = vec![v; n];
            equal_worst = equal_worst.max(anisotropy_bound_check(&embs, tau).unwrap().slack.abs());
        }
    }
    Outcome {
        name: "anisotropy_bound",
        pass: min_slack >= -1e-6 && equal_worst < 1e-9,
        detail: format!("min slack over 200 sets {min_slack:.3e}; identical-vector |slack| {equal_worst:.1e}"),
    }
}

// ---------------------------------------------------------- desk training

fn desk_config(seed: u64, epochs: usize, lambda: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        explicit_batch_size: 24,
        implicit_batch_size: 4,
        lambda,
        learning_rate: 1e-3,
        max_description_length: 50,
        max_lm_length: 128,
        model: ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
            vocab_size: 0,
            seed,
        },
        seed,
        eval_every_epoch: false,
        checkpoint_every_epoch: false,
        ..TrainConfig::default()
    }
}

struct Desk {
    kg: KnowledgeGraph,
    vocab: Vocab,
    untrained: Encoder,
    trained: Encoder,
    tau: f64,
    first_epoch_l_exp: f64,
    last_epoch_l_exp: f64,
    seconds: f64,
}

fn epoch_means(log: &kalign_core::train::MetricsLog) -> Vec<f64> {
    log.epochs().iter().map(|e| e["mean_l_exp"].as_f64().unwrap()).collect()
}

fn train_desk() -> Desk {
    let raw = synthetic_kg(&SynthConfig::default()).unwrap();
    let cfg = desk_config(0, 20, 0.1);
    let start = Instant::now();
    let mut t = Trainer::new(cfg.clone(), &raw).unwrap();
    let untrained = t.checkpoint().unwrap().encoder().unwrap();
    t.run().unwrap();
    let means = epoch_means(t.log());
    Desk {
        kg: t.graph().clone(),
        vocab: t.vocab().clone(),
        untrained,
        trained: t.checkpoint().unwrap().encoder().unwrap(),
        tau: t.tau().unwrap(),
        first_epoch_l_exp: means[0],
        last_epoch_l_exp: *means.last().unwrap(),
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn random_baseline_hits10(kg: &KnowledgeGraph) -> f64 {
    let mut total = 0.0;
    let draws = 5;
    for s in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + s);
        let table = EntityTable::new((0..kg.num_entities()).map(|_| random_unit(&mut rng, 64)).collect());
        let queries: Vec<Embedding> = kg.test().iter().map(|_| random_unit(&mut rng, 64)).collect();
        total += evaluate_with_table(kg, Split::Test, &queries, &table, &EvalOptions::default())
            .unwrap()
            .metrics
            .hits10;
    }
    total / draws as f64
}

fn probe_views(desk: &Desk) -> Vec<TokenSeq> {
    let originals: Vec<Triple> = desk.kg.test().iter().copied().filter(|t| !desk.kg.is_inverse(t.relation)).collect();
    sentences(&desk.kg, &originals)
        .iter()
        .map(|s| encode_view(s, View::Tail, &desk.vocab, 128).unwrap())
        .collect()
}

fn final_anisotropy(encoder: &Encoder, views: &[TokenSeq]) -> f64 {
    let refs: Vec<&[u32]> = views.iter().map(|v| v.ids()).collect();
    anisotropy_report(encoder, &refs, "probe", None).unwrap().final_layer()
}

fn similarity_gap(desk: &Desk, encoder: &Encoder) -> f64 {
    let limits = desk_config(0, 1, 0.1).limits();
    let originals: Vec<Triple> = desk.kg.test().iter().copied().filter(|t| !desk.kg.is_inverse(t.relation)).take(16).collect();
    let views: Vec<(TokenSeq, TokenSeq)> = make_pairs(&originals, &desk.kg)
        .iter()
        .map(|p| encode_pair(p, &desk.vocab, &limits))
        .collect();
    let hr: Vec<&[u32]> = views.iter().map(|v| v.0.ids()).collect();
    let t: Vec<&[u32]> = views.iter().map(|v| v.1.ids()).collect();
    let sim = similarity_matrix(&encoder.embed_batch(&hr).unwrap(), &encoder.embed_batch(&t).unwrap()).unwrap();
    sim.diagonal_gap()
}

fn kgqa_tail_accuracy(desk: &Desk, encoder: &Encoder) -> (f64, usize) {
    let mut triples = desk.kg.test().to_vec();
    triples.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    triples.truncate(200);
    let samples = kgqa::build_samples(QaTask::TailPrediction, &triples, &desk.kg, 0, 0).unwrap();
    let (scores, _) = kgqa::run(encoder, &desk.vocab, &samples, 16).unwrap();
    (scores[0].accuracy, scores[0].total)
}

fn check_desk(desk: &Desk) -> Outcome {
    let limits = desk_config(0, 1, 0.1).limits();
    let report = evaluate(&desk.kg, Split::Test, &desk.trained, &desk.vocab, &limits, &EvalOptions::default()).unwrap();
    let baseline = random_baseline_hits10(&desk.kg);
    let a = report.metrics.hits10 >= 5.0 * baseline;
    let probe = probe_views(desk);
    let an_before = final_anisotropy(&desk.untrained, &probe);
    let an_after = final_anisotropy(&desk.trained, &probe);
    let b = an_before - an_after >= 0.2;
    let gap = similarity_gap(desk, &desk.trained);
    let c = gap > 0.3;
    let (acc_trained, n) = kgqa_tail_accuracy(desk, &desk.trained);
    let (acc_untrained, _) = kgqa_tail_accuracy(desk, &desk.untrained);
    let d = acc_trained > acc_untrained;
    Outcome {
        name: "desk_training_end_to_end",
        pass: a && b && c && d,
        detail: format!(
            "(a) Hits@10 {:.3} vs random {:.3} [{}]; (b) anisotropy {:.3} -> {:.3} [{}]; \
             (c) similarity gap {:.3} [{}]; (d) KGQA tail accuracy {:.3} vs untrained {:.3} on {n} [{}]; \
             MRR {:.3}, MR {:.1}; trained in {:.0}s",
            report.metrics.hits10,
            baseline,
            ok(a),
            an_before,
            an_after,
            ok(b),
            gap,
            ok(c),
            acc_trained,
            acc_untrained,
            ok(d),
            report.metrics.mrr,
            report.metrics.mr,
            desk.seconds
        ),
    }
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "fail"
    }
}

fn check_loss_curve(desk: &Desk, ablation: &[(f64, f64, f64, f64)]) -> Outcome {
    let mut lines = vec![format!("seed 0: {:.3} -> {:.3}", desk.first_epoch_l_exp, desk.last_epoch_l_exp)];
    let mut pass = desk.last_epoch_l_exp < desk.first_epoch_l_exp;
    for (i, (first, last, _, _)) in ablation.iter().enumerate() {
        pass &= last < first;
        lines.push(format!("seed {}: {first:.3} -> {last:.3}", i + 1));
    }
    Outcome {
        name: "loss_curve_sanity",
        pass,
        detail: format!("mean L_exp first -> last epoch, {}", lines.join("; ")),
    }
}

// --------------------------------------------------------------- theorem 1

fn check_asymptotic_gap(desk: &Desk) -> Outcome {
    let limits = desk_config(0, 1, 0.1).limits();
    let kp = make_pairs(&desk.kg.train()[..512], &desk.kg);
    let views: Vec<(TokenSeq, TokenSeq)> = kp.iter().map(|p| encode_pair(p, &desk.vocab, &limits)).collect();
    let hr: Vec<&[u32]> = views.iter().map(|v| v.0.ids()).collect();
    let t: Vec<&[u32]> = views.iter().map(|v| v.1.ids()).collect();
    let e_hr = desk.trained.embed_batch(&hr).unwrap();
    let e_t = desk.trained.embed_batch(&t).unwrap();
    let pairs: Vec<(Embedding, Embedding)> = e_hr.into_iter().zip(e_t.iter().cloned()).collect();
    let mut e4 = Vec::new();
    let mut e256 = Vec::new();
    for seed in 0..3 {
        let series = asymptotic_gap(&pairs, &e_t, desk.tau, &[4, 256], 1, Sampling::WithReplacement, seed).unwrap();
        e4.push(series.points[0].error());
        e256.push(series.points[1].error());
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (m4, m256) = (median(&mut e4), median(&mut e256));
    Outcome {
        name: "asymptotic_gap_convergence",
        pass: m256 < 0.5 * m4,
        detail: format!("median |gap - limit|: N=4 {m4:.4}, N=256 {m256:.4} (ratio {:.3}, tau {:.3})", m256 / m4, desk.tau),
    }
}

// ---------------------------------------------------------- lambda ablation

/// Returns per seed: first and last epoch mean L_exp of the λ=0.1 run and
/// both perplexities.
fn run_ablation() -> Vec<(f64, f64, f64, f64)> {
    let raw = synthetic_kg(&SynthConfig::default()).unwrap();
    let mut out = Vec::new();
    for seed in 1..=3u64 {
        let mut res = Vec::new();
        for lambda in [0.1, 0.0] {
            let mut t = Trainer::new(desk_config(seed, 3, lambda), &raw).unwrap();
            t.run().unwrap();
            let held: Vec<Triple> = t.graph().test().to_vec();
            let text = sentences(t.graph(), &held);
            let ppl = toy_perplexity(t.encoder(), t.vocab(), &text).unwrap();
            res.push((epoch_means(t.log()), ppl));
        }
        let m = &res[0].0;
        out.push((m[0], *m.last().unwrap(), res[0].1, res[1].1));
    }
    out
}

fn check_ablation(runs: &[(f64, f64, f64, f64)]) -> Outcome {
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let with = median(runs.iter().map(|r| r.2).collect());
    let without = median(runs.iter().map(|r| r.3).collect());
    Outcome {
        name: "lambda_ablation_perplexity",
        pass: with <= without,
        detail: format!("median toy perplexity lambda=0.1 {with:.2} vs lambda=0 {without:.2} over 3 seeds"),
    }
}

// ------------------------------------------------------------ determinism

fn tiny_config(adapters: bool) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        explicit_batch_size: 8,
        implicit_batch_size: 2,
        learning_rate: 1e-3,
        max_description_length: 12,
        max_lm_length: 128,
        use_adapters: adapters,
        model: ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 128,
            vocab_size: 0,
            seed: 4,
        },
        seed: 4,
        eval_every_epoch: false,
        checkpoint_every_epoch: false,
        ..TrainConfig::default()
    }
}

fn toy_kg() -> KnowledgeGraph {
    let full = synthetic_kg(&SynthConfig { seed: 9, valid: 20, test: 20 }).unwrap();
    // a smaller graph keeps two epochs cheap
    KnowledgeGraph::new(
        full.entities().to_vec(),
        full.relations().to_vec(),
        full.train()[..160].to_vec(),
        full.valid().to_vec(),
        full.test().to_vec(),
    )
    .unwrap()
}

fn loss_bits(log: &kalign_core::train::MetricsLog) -> Vec<[u64; 3]> {
    log.steps().iter().map(|r| [r.l_exp.to_bits(), r.l_imp.to_bits(), r.l_joint.to_bits()]).collect()
}

fn check_determinism() -> Outcome {
    let kg = toy_kg();
    let run = || {
        let mut t = Trainer::new(tiny_config(true), &kg).unwrap();
        t.run().unwrap();
        loss_bits(t.log())
    };
    let (a, b) = (run(), run());
    let rerun = a == b && !a.is_empty();

    let k = 7;
    let mut full = Trainer::new(tiny_config(true), &kg).unwrap();
    let reference = full.run_steps(k + 10).unwrap();
    let mut first = Trainer::new(tiny_config(true), &kg).unwrap();
    first.run_steps(k).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    first.checkpoint().unwrap().save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    let mut resumed = Trainer::resume(&ckpt, tiny_config(true), &kg).unwrap();
    let continued = resumed.run_steps(10).unwrap();
    let bits = |r: &[kalign_core::train::StepRecord]| -> Vec<(u64, [u64; 3])> {
        r.iter().map(|s| (s.step, [s.l_exp.to_bits(), s.l_imp.to_bits(), s.l_joint.to_bits()])).collect()
    };
    let resume_ok = bits(&reference[k..]) == bits(&continued);
    Outcome {
        name: "determinism_and_resume",
        pass: rerun && resume_ok,
        detail: format!(
            "rerun of {} steps bitwise equal [{}]; resume at step {k} matches steps {k}..{} bitwise [{}]",
            a.len(),
            ok(rerun),
            k + 10,
            ok(resume_ok)
        ),
    }
}

// -------------------------------------------------------- filtered ranking

fn check_filtered_fixture() -> Outcome {
    let names = ["a", "b", "c", "d", "e"];
    let entities = names
        .iter()
        .map(|n| Entity { key: n.to_string(), name: n.to_string(), description: String::new() })
        .collect();
    let relations = vec![Relation { key: "r".into(), description: "r".into() }];
    // (a, r, b) and (a, r, c) are known; (a, r, d) is the test query
    let kg = KnowledgeGraph::new(
        entities,
        relations,
        vec![Triple::new(0, 0, 1), Triple::new(0, 0, 2)],
        vec![],
        vec![Triple::new(0, 0, 3), Triple::new(4, 0, 3)],
    )
    .unwrap()
    .augment_inverse()
    .unwrap();
    let filters = FilterIndex::new(&kg);
    let scores = [0.2, 0.9, 0.8, 0.7, 0.1];
    // hand-computed: unfiltered rank of d is 3 (b, c ahead); filtered is 1
    let mut results = Vec::new();
    let cases = [
        (Triple::new(0, 0, 3), 3usize, 1usize),
        (Triple::new(4, 0, 3), 3, 3),
        // head query (d, r_inv, ?) for gold a; the other known head e
        // scores below a, so filtering changes nothing
        (Triple::new(3, 1, 0), 4, 4),
    ];
    let mut pass = true;
    let mut improved = false;
    for (t, want_raw, want_filtered) in cases {
        let gold = t.tail;
        let raw = kalign_core::kgc::rank_scores(&scores, gold, &[], TiePolicy::Optimistic).unwrap();
        let filtered = kalign_core::kgc::rank_scores(&scores, gold, &filters.filter_for(&t), TiePolicy::Optimistic).unwrap();
        pass &= raw == want_raw && filtered == want_filtered;
        improved |= filtered < raw;
        results.push(format!("{raw}->{filtered}"));
    }
    Outcome {
        name: "filtered_ranking_fixture",
        pass: pass && improved,
        detail: format!("unfiltered->filtered ranks {}", results.join(", ")),
    }
}

fn check_scope_documented() -> Outcome {
    let readme = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = std::fs::read_to_string(&readme).unwrap_or_default().to_lowercase();
    let pass = text.contains("not reproducible") && text.contains("7b");
    Outcome {
        name: "paper_scale_scope_documented",
        pass,
        detail: "README states that large-model benchmark numbers are not reproduced".into(),
    }
}

fn main() {
    let only: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wants = |name: &str| only.as_deref().map_or(true, |o| name.contains(o));
    let mut outcomes = Vec::new();
    let mut report = |o: Outcome, secs: f64| {
        println!("{} {}: {} ({:.1}s)", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail, secs);
        outcomes.push(o.pass);
    };
    let timed = |f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (o, t.elapsed().as_secs_f64())
    };
    if wants("scope") {
        let (o, s) = timed(&check_scope_documented);
        report(o, s);
    }
    if wants("oracle") {
        let (o, s) = timed(&check_oracles);
        report(o, s);
    }
    if wants("gradient") {
        let (o, s) = timed(&check_gradients);
        report(o, s);
    }
    if wants("bound") {
        let (o, s) = timed(&check_anisotropy_bound);
        report(o, s);
    }
    if wants("filtered") {
        let (o, s) = timed(&check_filtered_fixture);
        report(o, s);
    }
    if wants("determinism") {
        let (o, s) = timed(&check_determinism);
        report(o, s);
    }
    if wants("desk") || wants("asymptotic") || wants("loss_curve") || wants("lambda") {
        let t = Instant::now();
        let desk = train_desk();
        let train_secs = t.elapsed().as_secs_f64();
        let (o, s) = timed(&|| check_desk(&desk));
        report(o, s + train_secs);
        let (o, s) = timed(&|| check_asymptotic_gap(&desk));
        report(o, s);
        let t = Instant::now();
        let runs = run_ablation();
        let ablation_secs = t.elapsed().as_secs_f64();
        let (o, s) = timed(&|| check_ablation(&runs));
        report(o, s + ablation_secs);
        let (o, s) = timed(&|| check_loss_curve(&desk, &runs));
        report(o, s);
    }
    let failed = outcomes.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

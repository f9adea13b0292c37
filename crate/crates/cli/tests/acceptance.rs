//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Every expected value here comes from an oracle written in this file
//! (closed forms, brute-force enumeration, hand counts) rather than from
//! the library under test.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use clarify_core::corpus::{load_corpus, truncate_context, Corpus, Dialogue, GoldRelation, InstanceId, RelationType};
use clarify_core::cpo::{
    batch_loss_and_grad, evaluate_pairs, mean_loss, pair_loss, train_cpo, CpoConfig, PairScores,
};
use clarify_core::dataprep::derive_ambiguous;
use clarify_core::inference::{gated_parse, GateDecision};
use clarify_core::metrics::{evaluate, Report};
use clarify_core::preference::{construct_pair, Candidate, PairConstruction, PreferencePair};
use clarify_core::protocol::{
    format_dcm_target, format_parse_output, parse_parse_output, render_dcm_prompt, render_dp_prompt,
    render_teacher_prompt, substitute_clarification, ClarificationRecord, ParseOutput, Prediction, TeacherRequest,
};
use clarify_core::scorer::{MockScorer, MockScript, Vocab};
use clarify_core::{PipelineConfig, Policy};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(label: &str, elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, format!("{label} took {elapsed:?}, limit {limit:?}"))
}

// Standard DPO from scratch: -ln(1 / (1 + e^-x)) with x the scaled margin.
fn dpo_oracle(s: &PairScores<f64>, eta: f64) -> f64 {
    let x = eta * ((s.lp_plus_trained - s.lp_plus_ref) - (s.lp_minus_trained - s.lp_minus_ref));
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn random_scores(rng: &mut ChaCha8Rng) -> PairScores<f64> {
    PairScores {
        lp_plus_trained: rng.random_range(-60.0..0.0),
        lp_plus_ref: rng.random_range(-60.0..0.0),
        lp_minus_trained: rng.random_range(-60.0..0.0),
        lp_minus_ref: rng.random_range(-60.0..0.0),
    }
}

fn toy_pair(prompt: &str, plus: &str, minus: &str, g: f64) -> PreferencePair {
    PreferencePair {
        dialogue_id: "toy".into(),
        k: 2,
        prompt: prompt.into(),
        u_plus: plus.into(),
        u_minus: minus.into(),
        e_plus: -1.0,
        e_minus: -1.0 - g,
        e_base: -1.0 - g / 2.0,
        g,
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = CpoConfig {
        weight_override: Some(1.0),
        ..CpoConfig::default()
    };
    let items: Vec<(PairScores<f64>, f64)> = (0..100)
        .map(|_| (random_scores(&mut rng), rng.random_range(0.01..20.0)))
        .collect();
    let ours = mean_loss(&items, &cfg).map_err(|e| e.to_string())?;
    let oracle = items.iter().map(|(s, _)| dpo_oracle(s, cfg.eta)).sum::<f64>() / items.len() as f64;
    let diff = (ours - oracle).abs();
    check(diff < 1e-12, format!("score-level difference {diff:e}"))?;

    // Same comparison through policies: the batch loss uses model scores.
    let vocab = Vocab::new(["yes", "no", "maybe", "wood", "clay", "sheep"]).unwrap();
    let policy = Policy::random(vocab.clone(), 4, 0.8, 2);
    let reference = Policy::random(vocab, 4, 0.8, 3);
    let words = ["yes", "no", "maybe", "wood", "clay", "sheep"];
    let pairs: Vec<PreferencePair> = (0..100)
        .map(|i| {
            let plus = format!("{} {}", words[i % 6], words[(i / 6) % 6]);
            let minus = words[(i * 5 + 1) % 6].to_string();
            toy_pair(&format!("prompt {}", i % 9), &plus, &minus, 0.5 + (i % 4) as f64)
        })
        .collect();
    let batch = batch_loss_and_grad(&policy, &reference, &pairs, &cfg).map_err(|e| e.to_string())?;
    let oracle: f64 = pairs
        .iter()
        .map(|p| {
            let s = PairScores {
                lp_plus_trained: policy.score(&p.prompt, &p.u_plus).unwrap(),
                lp_plus_ref: reference.score(&p.prompt, &p.u_plus).unwrap(),
                lp_minus_trained: policy.score(&p.prompt, &p.u_minus).unwrap(),
                lp_minus_ref: reference.score(&p.prompt, &p.u_minus).unwrap(),
            };
            dpo_oracle(&s, cfg.eta)
        })
        .sum::<f64>()
        / pairs.len() as f64;
    let diff2 = (batch.loss - oracle).abs();
    check(diff2 < 1e-12, format!("policy-level difference {diff2:e}"))?;
    let elapsed = start.elapsed();
    within("criterion 1", elapsed, Duration::from_secs(1))?;
    Ok(format!("max |diff| {:.1e} over 100 pairs in {elapsed:.2?}", diff.max(diff2)))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let vocab = Vocab::new(["good", "fine", "right", "bad", "wrong", "poor", "the", "a"]).unwrap();
    let policy = Policy::random(vocab.clone(), 4, 0.5, 11);
    let reference = Policy::random(vocab, 4, 0.5, 12);
    check(policy.num_params() >= 50, "toy policy too small")?;
    let pairs = vec![
        toy_pair("clarify the last one", "the good", "the bad", 1.0),
        toy_pair("what did you mean", "a fine right", "wrong", 2.5),
        toy_pair("please clarify", "right", "a poor bad", 0.3),
    ];
    let cfg = CpoConfig {
        eta: 0.5,
        ..CpoConfig::default()
    };
    let analytic = batch_loss_and_grad(&policy, &reference, &pairs, &cfg)
        .map_err(|e| e.to_string())?
        .grad;
    let h = 1e-5;
    let loss_at = |p: &Policy| evaluate_pairs(p, &reference, &pairs, &cfg).unwrap().loss;
    let mut worst: f64 = 0.0;
    for i in 0..policy.num_params() {
        let mut up = policy.clone();
        up.params_mut()[i] += h;
        let mut down = policy.clone();
        down.params_mut()[i] -= h;
        let fd = (loss_at(&up) - loss_at(&down)) / (2.0 * h);
        // Entries with an exact zero gradient only see rounding noise
        // (about 1e-11 here), so the denominator has a floor.
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    check(worst < 1e-4, format!("max relative error {worst:e}"))?;
    let elapsed = start.elapsed();
    within("criterion 2", elapsed, Duration::from_secs(10))?;
    Ok(format!(
        "max relative error {worst:.2e} over {} parameters in {elapsed:.2?}",
        policy.num_params()
    ))
}

fn criterion_3() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    for g in [0.0, 1.0, 10.0] {
        let v = pair_loss(0.0, g, 0.7);
        check((v - ln2).abs() < 1e-12, format!("pair_loss(0, {g}) = {v}"))?;
    }
    // w = 1/(1+e^-1.4); loss = -(w ln s(1) + (1-w) ln s(-1)), s(x) = 1/(1+e^-x)
    let w = 1.0 / (1.0 + (-1.4f64).exp());
    let s = |x: f64| 1.0 / (1.0 + (-x).exp());
    let oracle = -(w * s(1.0).ln() + (1.0 - w) * s(-1.0).ln());
    let v = pair_loss(1.0, 2.0, 0.7);
    check((v - oracle).abs() < 1e-6, format!("pair_loss(1, 2, 0.7) = {v}, oracle {oracle}"))?;
    check((v - 0.5111).abs() < 1e-4, format!("pair_loss(1, 2, 0.7) = {v}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let f = rng.random_range(-30.0f64..30.0);
        let g = rng.random_range(-30.0f64..30.0);
        worst = worst.max((pair_loss(f, g, 0.7) - pair_loss(-f, -g, 0.7)).abs());
    }
    check(worst < 1e-12, format!("symmetry gap {worst:e}"))?;
    Ok(format!("pair_loss(1,2,0.7) = {v:.6} (oracle {oracle:.6}); symmetry gap {worst:.1e}"))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let vocab_words = [
        "i", "mean", "the", "wood", "clay", "sheep", "ore", "for", "sorry", "about", "trade", "whatever", "no", "nope",
        "idk", "lol",
    ];
    let plus = [
        "i mean the wood",
        "sorry about the clay",
        "trade wood for clay",
        "i mean sheep for ore",
        "sorry about the trade",
    ];
    let minus = ["whatever", "no lol", "idk", "nope", "lol no"];
    let pairs: Vec<PreferencePair> = (0..60)
        .map(|i| {
            toy_pair(
                &format!("please clarify the last utterance {}", i % 11),
                plus[i % 5],
                minus[(i * 3) % 5],
                0.5 + (i % 4) as f64,
            )
        })
        .collect();
    let vocab = Vocab::from_texts(pairs.iter().flat_map(|p| [p.u_plus.as_str(), p.u_minus.as_str()]));
    check(vocab.len() <= 32, format!("vocabulary has {} tokens", vocab.len()))?;
    check(vocab.len() <= vocab_words.len() + 1, "unexpected tokens")?;
    let initial = Policy::uniform(vocab, 16);
    let cfg = CpoConfig {
        learning_rate: 0.5,
        track_full_loss: true,
        seed: 4,
        ..CpoConfig::default()
    };
    let out = train_cpo(initial.clone(), &initial, &pairs, &cfg).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = out.log.iter().map(|e| e.full_loss.unwrap_or(f64::NAN)).collect();
    check(losses.len() >= 20, format!("only {} steps", losses.len()))?;
    let mut prev = evaluate_pairs(&initial, &initial, &pairs, &cfg).unwrap().loss;
    for (i, &l) in losses.iter().take(20).enumerate() {
        check(l < prev, format!("loss rose at step {}: {prev} -> {l}", i + 1))?;
        prev = l;
    }
    let acc = evaluate_pairs(&out.policy, &initial, &pairs, &cfg).unwrap().accuracy;
    check(acc >= 0.9, format!("preference accuracy {acc}"))?;
    let elapsed = start.elapsed();
    within("criterion 4", elapsed, Duration::from_secs(60))?;
    Ok(format!(
        "accuracy {acc:.3}, loss {:.4} -> {:.4} over {} steps in {elapsed:.2?}",
        std::f64::consts::LN_2,
        losses.last().copied().unwrap_or(f64::NAN),
        losses.len()
    ))
}

fn metrics_fixture() -> (BTreeMap<InstanceId, Option<GoldRelation>>, Vec<(InstanceId, usize, ParseOutput)>) {
    use RelationType::*;
    // Two five-turn dialogues; turns 2..5 each have one gold arc.
    let gold_arcs = [
        ("a", 2, 1, QuestionAnswerPair),
        ("a", 3, 2, Acknowledgement),
        ("a", 4, 2, Comment),
        ("a", 5, 4, Elaboration),
        ("b", 2, 1, Comment),
        ("b", 3, 1, Contrast),
        ("b", 4, 3, Result),
        ("b", 5, 3, Continuation),
    ];
    let mut golds = BTreeMap::new();
    for d in ["a", "b"] {
        golds.insert(InstanceId::new(d, 1), None);
    }
    for (d, c, p, r) in gold_arcs {
        golds.insert(InstanceId::new(d, c), Some(GoldRelation::new(c, p, r).unwrap()));
    }
    let link = |c, p, r| ParseOutput::link(c, p, r).unwrap();
    let preds = vec![
        (InstanceId::new("a", 1), 1, ParseOutput::NoLink),
        (InstanceId::new("b", 1), 1, ParseOutput::NoLink),
        (InstanceId::new("a", 2), 2, link(2, 1, QuestionAnswerPair)), // exact
        (InstanceId::new("a", 3), 3, link(3, 2, Acknowledgement)),    // exact
        (InstanceId::new("a", 4), 4, link(4, 2, Elaboration)),        // link only
        (InstanceId::new("a", 5), 5, link(5, 3, Elaboration)),        // wrong parent
        (InstanceId::new("b", 2), 2, link(2, 1, Comment)),            // exact
        (InstanceId::new("b", 3), 3, link(3, 1, Contrast)),           // exact
        (InstanceId::new("b", 4), 4, link(4, 3, Narration)),          // link only
        (InstanceId::new("b", 5), 5, link(5, 4, Continuation)),       // wrong parent
    ];
    (golds, preds)
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let (golds, preds) = metrics_fixture();
    check(golds.len() == 10, "fixture must have 10 instances")?;
    let as_map = |ps: &[(InstanceId, usize, ParseOutput)]| -> BTreeMap<InstanceId, Prediction> {
        ps.iter().map(|(id, _, p)| (id.clone(), Prediction::Valid(*p))).collect()
    };
    let r = |n, d| Ratio::new(n, d);
    // Fixture A, by hand: 8 gold, 8 predicted, 6 attached right, 4 labelled right.
    let a: Report<Ratio<u64>> = evaluate(&as_map(&preds), &golds).map_err(|e| e.to_string())?;
    let want_a = [r(6, 8), r(6, 8), r(3, 4), r(4, 8), r(4, 8), r(1, 2)];
    let got_a = [a.link_precision, a.link_recall, a.link_f1, a.lr_precision, a.lr_recall, a.lr_f1];
    check(got_a == want_a, format!("fixture A: {got_a:?}"))?;
    // Fixture B: one exact arc dropped to Invalid, one link-only arc dropped to
    // none; 6 predicted, 4 attached right, 3 labelled right.
    let mut pb = as_map(&preds);
    pb.insert(InstanceId::new("a", 2), Prediction::Invalid);
    pb.insert(InstanceId::new("a", 4), Prediction::Valid(ParseOutput::NoLink));
    let b: Report<Ratio<u64>> = evaluate(&pb, &golds).map_err(|e| e.to_string())?;
    let want_b = [r(4, 6), r(4, 8), r(4, 7), r(3, 6), r(3, 8), r(3, 7)];
    let got_b = [b.link_precision, b.link_recall, b.link_f1, b.lr_precision, b.lr_recall, b.lr_f1];
    check(got_b == want_b, format!("fixture B: {got_b:?}"))?;
    for rep in [&a, &b] {
        check(
            rep.lr_f1 <= rep.link_f1 && rep.lr_precision <= rep.link_precision && rep.lr_recall <= rep.link_recall,
            "LR exceeds L",
        )?;
    }
    let elapsed = start.elapsed();
    within("criterion 5", elapsed, Duration::from_secs(1))?;
    Ok(format!("fixture A L F1 {} LR F1 {}; fixture B L F1 {} LR F1 {}", a.link_f1, a.lr_f1, b.link_f1, b.lr_f1))
}

// Brute force over all index pairs, following the discard rule literally.
fn pair_oracle(scores: &[f64], base: f64) -> Option<(usize, usize)> {
    let above: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > base).collect();
    let below: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] < base).collect();
    let mut best = None;
    for &i in &above {
        for &j in &below {
            let beats = |(bi, bj): (usize, usize)| {
                let key = |a: usize, b: usize| (scores[a], -scores[b]);
                let (new, old) = (key(i, j), key(bi, bj));
                new.0 > old.0 || (new.0 == old.0 && i < bi) || (i == bi && (new.1 > old.1 || (new.1 == old.1 && j < bj)))
            };
            if best.is_none_or(beats) {
                best = Some((i, j));
            }
        }
    }
    best
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut pairs = 0;
    for trial in 0..1000 {
        let n = rng.random_range(1..=8);
        // Coarse grid so ties and equality with the baseline occur often.
        let grid = |rng: &mut ChaCha8Rng| -(rng.random_range(0..=12) as f64) * 0.5;
        let scores: Vec<f64> = (0..n).map(|_| grid(&mut rng)).collect();
        let base = grid(&mut rng);
        let cands: Vec<Candidate> = scores
            .iter()
            .enumerate()
            .map(|(i, &e)| Candidate {
                text: format!("c{i}"),
                e,
            })
            .collect();
        let got = construct_pair(&cands, base);
        let want = pair_oracle(&scores, base);
        let agree = match (got, want) {
            (PairConstruction::Discarded, None) => true,
            (PairConstruction::Pair { plus, minus, gap }, Some((i, j))) => {
                pairs += 1;
                plus == i && minus == j && gap == scores[i] - scores[j] && gap > 0.0
            }
            _ => false,
        };
        check(agree, format!("trial {trial}: scores {scores:?} base {base}: {got:?} vs {want:?}"))?;
    }
    Ok(format!("1000 vectors agree ({pairs} pairs, {} discarded)", 1000 - pairs))
}

fn fig2_corpus() -> Corpus {
    let d = Dialogue::new(
        "fig2",
        [
            ("ztime", "random 7"),
            ("shawnus", "damn"),
            ("ztime", "doesn't happen like this in the real game does it...?"),
            ("somdechn", "wood for clay?"),
            ("shawnus", "two resources stolen!"),
            ("ztime", "sorry..."),
        ],
    )
    .unwrap();
    Corpus::from_dialogues("fig2", [(d, vec![GoldRelation::new(6, 5, RelationType::Comment).unwrap()])]).unwrap()
}

fn gating_scripts(agreeing: usize) -> (MockScorer, MockScorer) {
    let c = fig2_corpus();
    let ctx = c.instances()[5].context();
    let gold = "u6, u5 : comment".to_string();
    let other = "u6, u4 : question-answer pair".to_string();
    let mut parser = MockScript::default();
    let mut round1 = vec![gold.clone(); agreeing];
    round1.resize(10, other);
    parser.push_samples(&render_dp_prompt(ctx), round1);
    let clarified = "sorry about the two resources stolen!";
    let sub = substitute_clarification(ctx, clarified).unwrap();
    parser.push_samples(&render_dp_prompt(&sub), vec![gold; 10]);
    let mut dcm = MockScript::default();
    let rec = ClarificationRecord::new("omission", "comment on u5", clarified).unwrap();
    dcm.push_samples(&render_dcm_prompt(ctx), vec![format_dcm_target(&rec); 5]);
    (MockScorer::from_script(parser), MockScorer::from_script(dcm))
}

fn criterion_7() -> Outcome {
    let c = fig2_corpus();
    let inst = &c.instances()[5];
    let cfg = PipelineConfig::default();
    let (parser, dcm) = gating_scripts(6);
    let t6 = gated_parse(&parser, &dcm, inst, &cfg).map_err(|e| e.to_string())?;
    check(dcm.total_calls() == 0, format!("6/10: clarifier called {} times", dcm.total_calls()))?;
    check(t6.gate == GateDecision::Confident && t6.round2.is_none(), "6/10 should be confident")?;
    let (parser, dcm) = gating_scripts(5);
    let t5 = gated_parse(&parser, &dcm, inst, &cfg).map_err(|e| e.to_string())?;
    check(dcm.total_calls() >= 1, "5/10: clarifier not called")?;
    check(parser.sample_calls() == 2 && t5.round2.is_some(), "5/10: no second vote")?;
    check(t5.final_output == ParseOutput::link(6, 5, RelationType::Comment).unwrap(), "5/10: wrong final")?;
    let (parser2, dcm2) = gating_scripts(5);
    let again = gated_parse(&parser2, &dcm2, inst, &cfg).map_err(|e| e.to_string())?;
    let (a, b) = (serde_json::to_string(&t5).unwrap(), serde_json::to_string(&again).unwrap());
    check(a == b, "traces differ between identical runs")?;
    Ok(format!("6/10 -> 0 clarifier calls; 5/10 -> {} call(s), second vote count {}", dcm.total_calls(), t5.round2.as_ref().map_or(0, |r| r.count)))
}

fn criterion_8() -> Outcome {
    let c = fig2_corpus();
    let ctx = c.instances()[5].context();
    let golden = |name: &str| {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden").join(name);
        std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))
    };
    check(render_dp_prompt(ctx) == golden("fig2_parser_prompt.txt")?, "parser prompt differs from golden")?;
    let req = TeacherRequest::new(
        ctx,
        GoldRelation::new(6, 5, RelationType::Comment).unwrap(),
        ParseOutput::link(6, 4, RelationType::QuestionAnswerPair).unwrap(),
    )
    .map_err(|e| e.to_string())?;
    check(render_teacher_prompt(&req) == golden("fig2_teacher_prompt.txt")?, "teacher prompt differs from golden")?;
    check(render_dcm_prompt(ctx) == golden("fig2_clarifier_prompt.txt")?, "clarifier prompt differs from golden")?;
    let mut checked = 0;
    for rel in RelationType::ALL {
        for (child, parent) in [(2, 1), (6, 5), (37, 12)] {
            let out = ParseOutput::link(child, parent, rel).unwrap();
            let back = parse_parse_output(&format_parse_output(out), child);
            check(back == Prediction::Valid(out), format!("{out:?} did not round-trip"))?;
            checked += 1;
        }
    }
    check(
        parse_parse_output(&format_parse_output(ParseOutput::NoLink), 3) == Prediction::Valid(ParseOutput::NoLink),
        "none did not round-trip",
    )?;
    Ok(format!("3 goldens byte-stable; {checked} links + none round-trip"))
}

fn criterion_9() -> Outcome {
    let mut trials = 0;
    let d = Dialogue::new("x", [("a", "1"), ("b", "2"), ("c", "3"), ("a", "4")]).unwrap();
    for (ri, rel) in RelationType::ALL.into_iter().enumerate() {
        let gold = GoldRelation::new(4, 2, rel).unwrap();
        let corpus = Corpus::from_dialogues("x", [(d.clone(), vec![gold])]).unwrap();
        let inst = &corpus.instances()[3];
        let mut rng = ChaCha8Rng::seed_from_u64(900 + ri as u64);
        for t in 0..10_000 {
            // Mostly correct predictions (pseudo branch), some wrong ones.
            let pred = match t % 4 {
                3 => ParseOutput::link(4, 1 + t % 3, RelationType::ALL[(ri + 1 + t) % 16]).unwrap(),
                _ => gold.into(),
            };
            let amb = derive_ambiguous(inst, pred, &mut rng).map_err(|e| e.to_string())?;
            check(amb.output != ParseOutput::from(gold), format!("{rel}: returned the gold triple"))?;
            if pred == ParseOutput::from(gold) {
                check(amb.pseudo && amb.output.parent() == Some(2), format!("{rel}: parent changed"))?;
            } else {
                check(!amb.pseudo && amb.output == pred, format!("{rel}: wrong prediction not kept"))?;
            }
            trials += 1;
        }
    }
    Ok(format!("{trials} trials, gold never returned, parent always kept"))
}

// ---- criterion 10: end-to-end through the binary ----

const SPEAKERS: [&str; 3] = ["anna", "ben", "cara"];
const TEXTS: [&str; 8] = [
    "anyone got wood",
    "i have clay",
    "wood for clay?",
    "deal",
    "no thanks",
    "sheep for ore anyone",
    "sorry...",
    "damn",
];

fn synthetic_corpus() -> String {
    let mut lines = String::new();
    for d in 0..20 {
        let len = 4 + d % 3;
        let turns: Vec<String> = (0..len)
            .map(|i| {
                format!(
                    r#"{{"speaker":"{}","text":"{}"}}"#,
                    SPEAKERS[(d + i) % 3],
                    TEXTS[(d * 3 + i) % TEXTS.len()]
                )
            })
            .collect();
        let rels: Vec<String> = (2..=len)
            .map(|c| {
                let parent = if c % 3 == 0 { c - 2 } else { c - 1 };
                format!(
                    r#"{{"child":{c},"parent":{parent},"type":"{}"}}"#,
                    RelationType::ALL[(d + c) % 16].as_str()
                )
            })
            .collect();
        lines.push_str(&format!(
            r#"{{"id":"dlg{d:02}","turns":[{}],"relations":[{}]}}"#,
            turns.join(","),
            rels.join(",")
        ));
        lines.push('\n');
    }
    lines
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_clarify"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "clarify {} failed: {}",
            args.first().unwrap_or(&""),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

const GOOD: [&str; 3] = ["i mean wood for your clay", "sorry about the stolen sheep", "deal i will trade ore"];
const BAD: [&str; 2] = ["whatever", "no idea lol"];

fn pair_scripts(rest: &Corpus, window: usize) -> (MockScript, MockScript) {
    let mut dcm = MockScript::default();
    let mut parser = MockScript::default();
    for inst in rest.instances() {
        let Some(gold) = inst.gold() else { continue };
        let ctx = truncate_context(inst.context(), window);
        let y = format_parse_output(gold.into());
        let texts = [GOOD[inst.k() % 3], BAD[0], GOOD[(inst.k() + 1) % 3], BAD[1], "sorry..."];
        let targets: Vec<String> = texts
            .iter()
            .map(|t| format_dcm_target(&ClarificationRecord::new("omission", "keep the link", *t).unwrap()))
            .collect();
        dcm.push_samples(&render_dcm_prompt(ctx), targets);
        parser.set_prob(&render_dp_prompt(ctx), &y, 0.3);
        for t in texts {
            let p = if GOOD.contains(&t) { 0.7 } else if BAD.contains(&t) { 0.05 } else { 0.3 };
            let sub = substitute_clarification(inst.context(), t).unwrap();
            parser.set_prob(&render_dp_prompt(truncate_context(&sub, window)), &y, p);
        }
    }
    (dcm, parser)
}

fn infer_script(rest: &Corpus, window: usize) -> MockScript {
    let mut parser = MockScript::default();
    for (i, inst) in rest.instances().iter().enumerate() {
        let right = format_parse_output(inst.gold().into());
        let wrong = if inst.k() > 1 {
            format!("u{}, u1 : narration", inst.k())
        } else {
            "none".into()
        };
        let agreeing = if i % 2 == 0 { 7 } else { 5 };
        let mut samples = vec![right; agreeing];
        samples.resize(10, wrong);
        parser.push_samples(&render_dp_prompt(truncate_context(inst.context(), window)), samples);
    }
    // Second-round prompts depend on what the trained clarifier samples.
    parser.fallback = Some(clarify_core::scorer::ScriptEntry {
        samples: vec!["none".into()],
        scores: BTreeMap::new(),
    });
    parser
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| -> PathBuf { dir.path().join(name) };
    let s = |path: &PathBuf| path.display().to_string();
    std::fs::write(p("raw.jsonl"), synthetic_corpus()).map_err(|e| e.to_string())?;

    run_cli(&["ingest", "--input", &s(&p("raw.jsonl")), "--out", &s(&p("corpus.jsonl"))])?;
    run_cli(&["split", "--corpus", &s(&p("corpus.jsonl")), "--alpha", "0.1", "--seed", "5", "--out-dir", &s(&p("split"))])?;
    let rest_path = p("split/corpus.rest.jsonl");
    let rest = load_corpus(&rest_path).map_err(|e| e.to_string())?;
    let seed_set = load_corpus(&p("split/corpus.seed.jsonl")).map_err(|e| e.to_string())?;
    check(seed_set.dialogues().len() == 2 && rest.dialogues().len() == 18, "split sizes")?;

    let (dcm, parser) = pair_scripts(&rest, 20);
    dcm.save(&p("dcm_mock.json")).map_err(|e| e.to_string())?;
    parser.save(&p("parser_mock.json")).map_err(|e| e.to_string())?;
    run_cli(&[
        "build-pairs",
        "--corpus",
        &s(&rest_path),
        "--dcm",
        &format!("mock:{}", s(&p("dcm_mock.json"))),
        "--parser",
        &format!("mock:{}", s(&p("parser_mock.json"))),
        "--out",
        &s(&p("pairs.jsonl")),
    ])?;
    let pairs: Vec<PreferencePair> = clarify_core::jsonl::read_file(&p("pairs.jsonl")).map_err(|e| e.to_string())?;
    check(!pairs.is_empty(), "no preference pairs")?;

    run_cli(&[
        "train-cpo",
        "--pairs",
        &s(&p("pairs.jsonl")),
        "--mu",
        "0.7",
        "--learning-rate",
        "0.5",
        "--buckets",
        "16",
        "--out",
        &s(&p("checkpoint.json")),
        "--log",
        &s(&p("train_log.jsonl")),
    ])?;

    infer_script(&rest, 20).save(&p("infer_parser.json")).map_err(|e| e.to_string())?;
    let table = run_cli(&[
        "infer",
        "--corpus",
        &s(&rest_path),
        "--parser",
        &format!("mock:{}", s(&p("infer_parser.json"))),
        "--dcm",
        &format!("policy:{}", s(&p("checkpoint.json"))),
        "--out",
        &s(&p("predictions.jsonl")),
        "--traces",
        &s(&p("traces.jsonl")),
        "--stats",
        &s(&p("transitions.json")),
    ])?;
    let report = run_cli(&[
        "eval",
        "--pred",
        &s(&p("predictions.jsonl")),
        "--gold",
        &s(&rest_path),
        "--format",
        "full",
    ])?;
    let report: serde_json::Value = serde_json::from_str(&report).map_err(|e| e.to_string())?;
    check(report["counts"]["gold_arcs"].as_u64().unwrap_or(0) > 0, "empty report")?;
    check(report["link_f1"].is_number() && report["lr_f1"].is_number(), "report lacks F1")?;
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("transitions.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let total = stats["transitions"]["total"].as_u64().unwrap_or(0);
    check(total as usize == rest.len(), format!("transition table covers {total} of {}", rest.len()))?;
    check(stats["fractions"].as_object().is_some_and(|f| f.len() == 4), "transition table lacks four cells")?;
    check(table.contains("r1 incorrect"), "transition table not printed")?;
    let elapsed = start.elapsed();
    within("criterion 10", elapsed, Duration::from_secs(300))?;
    Ok(format!(
        "{} pairs, {} instances, L F1 {:.4} LR F1 {:.4}, clarified {} in {elapsed:.2?}",
        pairs.len(),
        total,
        report["link_f1"].as_f64().unwrap_or(f64::NAN),
        report["lr_f1"].as_f64().unwrap_or(f64::NAN),
        stats["transitions"]["clarified"]
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 CPO with unit weight equals DPO", criterion_1),
        ("2 gradient vs central differences", criterion_2),
        ("3 loss landmarks and symmetry", criterion_3),
        ("4 toy preference training", criterion_4),
        ("5 metrics against hand counts", criterion_5),
        ("6 pair construction vs brute force", criterion_6),
        ("7 vote gating boundary", criterion_7),
        ("8 prompt goldens and output round trip", criterion_8),
        ("9 ambiguity derivation", criterion_9),
        ("10 end-to-end pipeline", criterion_10),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        match result {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clarify_core::corpus::{load_corpus, split_seed, write_corpus_to, Corpus};
use clarify_core::cpo::{evaluate_pairs, max_gradient_error, train_cpo, CpoConfig};
use clarify_core::dataprep::{build_clarification_sft, derive_ambiguous};
use clarify_core::inference::batch_infer;
use clarify_core::jsonl;
use clarify_core::metrics::evaluate;
use clarify_core::preference::{build_preference_dataset, PreferencePair};
use clarify_core::protocol::{format_parse_output, parse_parse_output, render_dp_prompt, Prediction};
use clarify_core::scorer::{SamplingParams, Vocab};
use clarify_core::{EvalReport, InstanceId, ParseOutput, Policy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifacts::Run;
use crate::error::{CliError, ErrorKind};
use crate::scorers::{load_checkpoint, open_scorer, Checkpoint, Role, ScorerSpec};
use crate::settings::Settings;
use crate::{Command, ReportFormat};

pub struct Context {
    /// Settings as written, recorded in artifacts.
    pub recorded: Settings,
    /// Settings with environment references expanded, used to run.
    pub settings: Settings,
    pub force: bool,
}

impl Context {
    fn corpus_path(&self) -> Result<PathBuf, CliError> {
        self.settings
            .corpus
            .clone()
            .ok_or_else(|| CliError::config("--corpus (or `corpus` in the config file) is required"))
    }

    fn out(&self, given: Option<PathBuf>, default: &str) -> PathBuf {
        given.unwrap_or_else(|| self.settings.out_dir().join(default))
    }

    fn spec(&self, value: &Option<String>, flag: &str) -> Result<ScorerSpec, CliError> {
        let spec = value
            .as_deref()
            .ok_or_else(|| CliError::config(format!("--{flag} (or `{flag}` in the config file) is required")))?;
        ScorerSpec::parse(spec)
    }
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dialogue_id: String,
    pub k: usize,
    pub prediction: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AmbiguityRecord {
    dialogue_id: String,
    k: usize,
    intended: ParseOutput,
    predicted: ParseOutput,
    ambiguous: ParseOutput,
    pseudo: bool,
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

fn write_corpus_file(run: &mut Run, path: &Path, corpus: &Corpus) -> Result<(), CliError> {
    let summary = json!({
        "name": corpus.name,
        "dialogues": corpus.dialogues().len(),
        "instances": corpus.len(),
        "gold_arcs": corpus.gold_arcs(),
    });
    run.write_lines(path, corpus.dialogues().len(), summary, |w| write_corpus_to(corpus, w))
}

pub fn dispatch(ctx: &Context, command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest { input, out } => ingest(ctx, &input, out),
        Command::Split { seed_out, rest_out } => split(ctx, seed_out, rest_out),
        Command::DeriveAmbiguous { out } => derive(ctx, out),
        Command::BuildSft { out } => build_sft(ctx, out),
        Command::BuildPairs { out } => build_pairs(ctx, out),
        Command::TrainCpo { pairs, init, out, log } => train(ctx, &pairs, init, out, log),
        Command::Infer { out, traces, stats } => infer(ctx, out, traces, stats),
        Command::Eval {
            pred,
            gold,
            format,
            out,
        } => eval(ctx, &pred, &gold, format, out),
        Command::Gradcheck {
            checkpoint,
            pairs,
            step,
            tolerance,
        } => gradcheck(ctx, checkpoint, pairs, step, tolerance),
    }
}

fn ingest(ctx: &Context, input: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = ctx.out(out, "corpus.jsonl");
    let mut run = Run::start("ingest", &ctx.recorded, &[input], &[&out], ctx.force)?;
    let corpus = load_corpus(input)?;
    write_corpus_file(&mut run, &out, &corpus)?;
    print_json(&json!({
        "dialogues": corpus.dialogues().len(),
        "instances": corpus.len(),
        "gold_arcs": corpus.gold_arcs(),
        "out": out,
    }));
    run.finish()
}

fn split(ctx: &Context, seed_out: Option<PathBuf>, rest_out: Option<PathBuf>) -> Result<(), CliError> {
    let input = ctx.corpus_path()?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus").to_string();
    let seed_out = ctx.out(seed_out, &format!("{stem}.seed.jsonl"));
    let rest_out = ctx.out(rest_out, &format!("{stem}.rest.jsonl"));
    let mut run = Run::start("split", &ctx.recorded, &[&input], &[&seed_out, &rest_out], ctx.force)?;
    let corpus = load_corpus(&input)?;
    let alpha = ctx.settings.alpha.unwrap_or(0.1);
    let (seed, rest) = split_seed(&corpus, alpha, run.seed())?;
    write_corpus_file(&mut run, &seed_out, &seed)?;
    write_corpus_file(&mut run, &rest_out, &rest)?;
    print_json(&json!({
        "alpha": alpha,
        "seed_dialogues": seed.dialogues().len(),
        "rest_dialogues": rest.dialogues().len(),
        "seed_out": seed_out,
        "rest_out": rest_out,
    }));
    run.finish()
}

fn derive(ctx: &Context, out: Option<PathBuf>) -> Result<(), CliError> {
    let input = ctx.corpus_path()?;
    let parser_spec = ctx.spec(&ctx.settings.parser, "parser")?;
    let out = ctx.out(out, "ambiguous.jsonl");
    let inputs: Vec<&Path> = std::iter::once(input.as_path()).chain(parser_spec.input()).collect();
    let mut run = Run::start("derive-ambiguous", &ctx.recorded, &inputs, &[&out], ctx.force)?;
    let corpus = load_corpus(&input)?;
    let parser = open_scorer(&parser_spec, Role::Parser, &ctx.settings)?;
    let window = ctx.settings.pipeline()?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed());
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for inst in corpus.instances() {
        let Some(gold) = inst.gold() else { continue };
        let prompt = render_dp_prompt(window.window(inst.context()));
        let predicted = match parser.sample(&prompt, &SamplingParams::greedy()) {
            Ok(texts) => texts
                .first()
                .map(|t| parse_parse_output(t, inst.k()))
                .unwrap_or(Prediction::Invalid)
                .or_no_link(),
            Err(e) => {
                log::warn!("{}: {e}", inst.id());
                skipped.push(json!({"dialogue_id": inst.dialogue_id(), "k": inst.k(), "reason": e.to_string()}));
                continue;
            }
        };
        let amb = derive_ambiguous(inst, predicted, &mut rng).map_err(|e| CliError::invalid_input(e.to_string()))?;
        records.push(AmbiguityRecord {
            dialogue_id: inst.dialogue_id().to_string(),
            k: inst.k(),
            intended: gold.into(),
            predicted,
            ambiguous: amb.output,
            pseudo: amb.pseudo,
        });
    }
    let pseudo = records.iter().filter(|r| r.pseudo).count();
    let summary = json!({"records": records.len(), "pseudo": pseudo, "skipped": skipped});
    run.write_jsonl(&out, &records, summary.clone())?;
    print_json(&summary);
    run.finish()
}

fn build_sft(ctx: &Context, out: Option<PathBuf>) -> Result<(), CliError> {
    let input = ctx.corpus_path()?;
    let parser_spec = ctx.spec(&ctx.settings.parser, "parser")?;
    let teacher_spec = ctx.spec(&ctx.settings.teacher, "teacher")?;
    let out = ctx.out(out, "sft.jsonl");
    let inputs: Vec<&Path> = std::iter::once(input.as_path())
        .chain(parser_spec.input())
        .chain(teacher_spec.input())
        .collect();
    let mut run = Run::start("build-sft", &ctx.recorded, &inputs, &[&out], ctx.force)?;
    let corpus = load_corpus(&input)?;
    let parser = open_scorer(&parser_spec, Role::Parser, &ctx.settings)?;
    let teacher = open_scorer(&teacher_spec, Role::Teacher, &ctx.settings)?;
    let cfg = ctx.settings.pipeline()?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed());
    let data = build_clarification_sft(&corpus, parser.as_ref(), teacher.as_ref(), &mut rng, &cfg);
    if data.records.is_empty() {
        return Err(CliError::invalid_input(format!(
            "no SFT records produced; {} instances skipped",
            data.skipped.len()
        )));
    }
    let summary = json!({"records": data.records.len(), "skipped": data.skipped});
    run.write_jsonl(&out, &data.records, summary)?;
    print_json(&json!({"records": data.records.len(), "skipped": data.skipped.len(), "out": out}));
    run.finish()
}

fn build_pairs(ctx: &Context, out: Option<PathBuf>) -> Result<(), CliError> {
    let input = ctx.corpus_path()?;
    let dcm_spec = ctx.spec(&ctx.settings.dcm, "dcm")?;
    let parser_spec = ctx.spec(&ctx.settings.parser, "parser")?;
    let out = ctx.out(out, "pairs.jsonl");
    let inputs: Vec<&Path> = std::iter::once(input.as_path())
        .chain(dcm_spec.input())
        .chain(parser_spec.input())
        .collect();
    let mut run = Run::start("build-pairs", &ctx.recorded, &inputs, &[&out], ctx.force)?;
    let corpus = load_corpus(&input)?;
    let dcm = open_scorer(&dcm_spec, Role::Clarifier, &ctx.settings)?;
    let parser = open_scorer(&parser_spec, Role::Parser, &ctx.settings)?;
    let cfg = ctx.settings.pipeline()?;
    let data = build_preference_dataset(&corpus, dcm.as_ref(), parser.as_ref(), &cfg);
    let summary = serde_json::to_value(&data.stats).map_err(|e| CliError::io(e.to_string()))?;
    run.write_jsonl(&out, &data.pairs, summary.clone())?;
    print_json(&summary);
    run.finish()
}

fn fresh_policy(pairs: &[PreferencePair], settings: &Settings) -> Policy {
    let vocab = Vocab::from_texts(pairs.iter().flat_map(|p| [p.u_plus.as_str(), p.u_minus.as_str()]));
    let buckets = settings.buckets.unwrap_or(64).max(1);
    match settings.init_scale.unwrap_or(0.0) {
        s if s > 0.0 => Policy::random(vocab, buckets, s, settings.seed()),
        _ => Policy::uniform(vocab, buckets),
    }
}

fn train(
    ctx: &Context,
    pairs_path: &Path,
    init: Option<PathBuf>,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
) -> Result<(), CliError> {
    let out = ctx.out(out, "checkpoint.json");
    let log_path = ctx.out(log, "train_log.jsonl");
    let mut inputs = vec![pairs_path];
    inputs.extend(init.as_deref());
    let mut run = Run::start("train-cpo", &ctx.recorded, &inputs, &[&out, &log_path], ctx.force)?;
    let cfg = ctx.settings.cpo()?;
    let pairs: Vec<PreferencePair> = jsonl::read_file(pairs_path)?;
    if pairs.is_empty() {
        return Err(CliError::invalid_input(format!("{} holds no preference pairs", pairs_path.display())));
    }
    let initial = match &init {
        Some(p) => load_checkpoint(p)?.policy,
        None => fresh_policy(&pairs, &ctx.settings),
    };
    let before = evaluate_pairs(&initial, &initial, &pairs, &cfg)?;
    let outcome = train_cpo(initial.clone(), &initial, &pairs, &cfg)?;
    let after = evaluate_pairs(&outcome.policy, &initial, &pairs, &cfg)?;
    let summary = json!({
        "pairs": pairs.len(),
        "steps": outcome.log.len(),
        "parameters": outcome.policy.num_params(),
        "loss_before": before.loss,
        "loss_after": after.loss,
        "accuracy_after": after.accuracy,
    });
    run.write_json(
        &out,
        &Checkpoint {
            fingerprint: run.fingerprint().to_string(),
            seed: run.seed(),
            config: cfg,
            policy: outcome.policy,
        },
    )?;
    run.write_jsonl(&log_path, &outcome.log, summary.clone())?;
    print_json(&summary);
    run.finish()
}

fn infer(
    ctx: &Context,
    out: Option<PathBuf>,
    traces: Option<PathBuf>,
    stats: Option<PathBuf>,
) -> Result<(), CliError> {
    let input = ctx.corpus_path()?;
    let parser_spec = ctx.spec(&ctx.settings.parser, "parser")?;
    let dcm_spec = ctx.spec(&ctx.settings.dcm, "dcm")?;
    let out = ctx.out(out, "predictions.jsonl");
    let traces_path = ctx.out(traces, "traces.jsonl");
    let stats_path = ctx.out(stats, "transitions.json");
    let inputs: Vec<&Path> = std::iter::once(input.as_path())
        .chain(parser_spec.input())
        .chain(dcm_spec.input())
        .collect();
    let mut run = Run::start("infer", &ctx.recorded, &inputs, &[&out, &traces_path, &stats_path], ctx.force)?;
    let corpus = load_corpus(&input)?;
    let parser = open_scorer(&parser_spec, Role::Parser, &ctx.settings)?;
    let dcm = open_scorer(&dcm_spec, Role::Clarifier, &ctx.settings)?;
    let cfg = ctx.settings.pipeline()?;
    let result = batch_infer(&corpus, parser.as_ref(), dcm.as_ref(), &cfg);
    let preds: Vec<PredictionRecord> = result
        .predictions
        .iter()
        .map(|(id, p)| PredictionRecord {
            dialogue_id: id.dialogue_id.clone(),
            k: id.k,
            prediction: format_parse_output(*p),
        })
        .collect();
    let failures: Vec<_> = result
        .failures
        .iter()
        .map(|(id, e)| json!({"dialogue_id": id.dialogue_id, "k": id.k, "reason": e}))
        .collect();
    let t = result.transitions;
    let [cc, ci, ic, ii] = t.fractions();
    let table = json!({
        "transitions": t,
        "fractions": {
            "correct_to_correct": cc,
            "correct_to_incorrect": ci,
            "incorrect_to_correct": ic,
            "incorrect_to_incorrect": ii,
        },
        "failures": failures,
    });
    run.write_jsonl(&out, &preds, json!({"predictions": preds.len(), "failures": failures.len()}))?;
    run.write_jsonl(&traces_path, &result.traces, json!({"traces": result.traces.len()}))?;
    run.write_json(&stats_path, &table)?;
    println!("instances {}  clarified {}  failed {}", t.total, t.clarified, failures.len());
    println!("             final correct  final incorrect");
    println!("r1 correct   {cc:>13.4}  {ci:>15.4}");
    println!("r1 incorrect {ic:>13.4}  {ii:>15.4}");
    run.finish()
}

fn read_predictions(path: &Path) -> Result<BTreeMap<InstanceId, Prediction>, CliError> {
    let records: Vec<PredictionRecord> = jsonl::read_file(path)?;
    let mut map = BTreeMap::new();
    for r in records {
        let id = InstanceId::new(r.dialogue_id.clone(), r.k);
        let pred = parse_parse_output(&r.prediction, r.k);
        if map.insert(id.clone(), pred).is_some() {
            return Err(CliError::invalid_input(format!("duplicate prediction for {id}")));
        }
    }
    Ok(map)
}

fn eval(ctx: &Context, pred: &Path, gold: &Path, format: ReportFormat, out: Option<PathBuf>) -> Result<(), CliError> {
    let outputs: Vec<&Path> = out.as_deref().into_iter().collect();
    let mut run = Run::start("eval", &ctx.recorded, &[pred, gold], &outputs, ctx.force)?;
    let corpus = load_corpus(gold)?;
    let predictions = read_predictions(pred)?;
    let report: EvalReport =
        evaluate(&predictions, &corpus.golds()).map_err(|e| CliError::invalid_input(e.to_string()))?;
    match format {
        ReportFormat::Summary => {
            let c = &report.counts;
            println!("L   P {:.4}  R {:.4}  F1 {:.4}", report.link_precision, report.link_recall, report.link_f1);
            println!("LR  P {:.4}  R {:.4}  F1 {:.4}", report.lr_precision, report.lr_recall, report.lr_f1);
            println!("gold arcs {}  predicted arcs {}", c.gold_arcs, c.predicted_arcs);
        }
        ReportFormat::Full => print_json(&serde_json::to_value(&report).map_err(|e| CliError::io(e.to_string()))?),
    }
    if let Some(path) = &out {
        run.write_json(path, &report)?;
    }
    run.finish()
}

fn toy_gradcheck_setup(seed: u64) -> (Policy, Policy, Vec<PreferencePair>) {
    let vocab = Vocab::new(["good", "fine", "right", "bad", "wrong", "poor", "the", "a"]).expect("toy vocabulary");
    let policy = Policy::random(vocab.clone(), 4, 0.5, seed);
    let reference = Policy::random(vocab, 4, 0.5, seed.wrapping_add(1));
    let pair = |prompt: &str, plus: &str, minus: &str, g: f64| PreferencePair {
        dialogue_id: "toy".into(),
        k: 2,
        prompt: prompt.into(),
        u_plus: plus.into(),
        u_minus: minus.into(),
        e_plus: -1.0,
        e_minus: -1.0 - g,
        e_base: -1.0 - g / 2.0,
        g,
    };
    let pairs = vec![
        pair("clarify the last one", "the good", "the bad", 1.0),
        pair("what did you mean", "a fine right", "wrong", 2.5),
        pair("please clarify", "right", "a poor bad", 0.3),
    ];
    (policy, reference, pairs)
}

fn gradcheck(
    ctx: &Context,
    checkpoint: Option<PathBuf>,
    pairs: Option<PathBuf>,
    step: f64,
    tolerance: f64,
) -> Result<(), CliError> {
    let cfg: CpoConfig = ctx.settings.cpo()?;
    let (policy, reference, pairs) = match (checkpoint, pairs) {
        (Some(ck), Some(p)) => {
            let policy = load_checkpoint(&ck)?.policy;
            let pairs: Vec<PreferencePair> = jsonl::read_file(&p)?;
            (policy.clone(), policy, pairs)
        }
        (None, None) => toy_gradcheck_setup(ctx.settings.seed()),
        _ => return Err(CliError::config("--checkpoint and --pairs go together")),
    };
    let worst = max_gradient_error(&policy, &reference, &pairs, &cfg, step)?;
    print_json(&json!({
        "max_relative_error": worst,
        "parameters": policy.num_params(),
        "pairs": pairs.len(),
        "tolerance": tolerance,
    }));
    if !(worst < tolerance) {
        return Err(CliError::new(
            ErrorKind::Check,
            format!("max relative gradient error {worst:e} exceeds {tolerance:e}"),
        ));
    }
    Ok(())
}

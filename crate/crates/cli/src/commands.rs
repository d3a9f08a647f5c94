use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dialogue_metric::checkpoint::{checkpoint_hash, load_checkpoint, read_header};
use dialogue_metric::corpus::{load_corpus, save_corpus, split_corpus, Corpus, Speaker, Utterance};
use dialogue_metric::encoder::{CachedAdapter, Encoder, SubprocessAdapter, Vocab};
use dialogue_metric::eval::{correlate, evaluate_delta_table, load_human_logs, zero_shot_eval, EvalMode};
use dialogue_metric::probe::{probe_report, ProbeReport};
use dialogue_metric::sampling::{SynonymParaphraser, TemplateGenerator};
use dialogue_metric::scorer::{ModelKind, ScorerModel};
use dialogue_metric::synthetic::{generate_synthetic, shuffle_utterances, synthetic_synonyms};
use dialogue_metric::training::{train_full, write_run};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SNAPSHOT_FILE};
use crate::CliError;

type CmdResult = Result<(), CliError>;

struct Data {
    full: Corpus,
    train: Corpus,
    val: Corpus,
    test: Corpus,
    synthetic: bool,
}

fn load_data(cfg: &RunConfig) -> Result<Data, CliError> {
    let d = &cfg.data;
    if let (Some(tr), Some(va), Some(te)) = (&d.train, &d.val, &d.test) {
        let (train, val, test) = (load_corpus(tr)?, load_corpus(va)?, load_corpus(te)?);
        let mut all = train.dialogues.clone();
        all.extend(val.dialogues.iter().cloned());
        all.extend(test.dialogues.iter().cloned());
        let full = Corpus::new(train.name.clone(), all)?;
        return Ok(Data {
            full,
            train,
            val,
            test,
            synthetic: false,
        });
    }
    let (full, synthetic) = match &d.corpus {
        Some(p) => (load_corpus(p)?, false),
        None => (generate_synthetic(&cfg.synthetic)?, true),
    };
    let (train, val, test) = split_corpus(&full, d.split, cfg.split_seed())?;
    Ok(Data {
        full,
        train,
        val,
        test,
        synthetic,
    })
}

fn paraphraser(cfg: &RunConfig, synthetic: bool) -> Result<SynonymParaphraser, CliError> {
    let rate = cfg.data.paraphrase_rate;
    Ok(match &cfg.data.synonyms {
        Some(p) => SynonymParaphraser::from_tsv(p, rate)?,
        None if synthetic => SynonymParaphraser::new(synthetic_synonyms(&cfg.synthetic), rate),
        None => SynonymParaphraser::new(Vec::new(), rate),
    })
}

fn adapter(cfg: &RunConfig) -> Result<Option<Arc<CachedAdapter>>, CliError> {
    let Some(a) = &cfg.adapter else { return Ok(None) };
    let mut sub = SubprocessAdapter::new(a.command.clone(), a.args.clone(), a.dim)?;
    if let Some(p) = &a.pooling {
        sub = sub.with_pooling(p.clone());
    }
    Ok(Some(Arc::new(CachedAdapter::new(Arc::new(sub)))))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: PathBuf, text: &str) -> CmdResult {
    fs::write(&path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_snapshot(dir: &Path, cfg: &RunConfig) -> CmdResult {
    write_file(
        dir.join(SNAPSHOT_FILE),
        &(serde_json::to_string_pretty(&cfg.snapshot())? + "\n"),
    )
}

fn open_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(ScorerModel, String), CliError> {
    let header = read_header(path)?;
    let adapter = if header.kind == ModelKind::FlatExternal {
        adapter(cfg)?
    } else {
        None
    };
    Ok((load_checkpoint(path, adapter)?, checkpoint_hash(path)?))
}

pub fn train(cfg: &RunConfig) -> CmdResult {
    let data = load_data(cfg)?;
    let para = paraphraser(cfg, data.synthetic)?;
    let dir = out_dir(cfg)?;
    let model = ScorerModel::new(cfg.model.clone(), Vocab::build([&data.train]), adapter(cfg)?)?;
    log::info!(
        "training {} on {} train / {} val pairs",
        model.kind().name(),
        data.train.pair_count(),
        data.val.pair_count()
    );
    let out = train_full(model, &data.train, &data.val, &cfg.training, &cfg.sampling, &para)?;
    write_run(dir, &out)?;
    write_snapshot(dir, cfg)?;
    let h = &out.history;
    println!(
        "trained {} epochs; best epoch {} val loss {:.6} (initial {:.6}); artifacts in {}",
        h.epochs.len(),
        h.best_epoch,
        h.best_val_loss(),
        h.initial_val_loss,
        dir.display()
    );
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> CmdResult {
    let modes = cfg
        .eval
        .modes
        .iter()
        .map(|m| EvalMode::parse(m).map_err(|e| CliError::Usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    if modes.is_empty() {
        return Err(CliError::Usage("eval.modes is empty".into()));
    }
    let data = load_data(cfg)?;
    let para = paraphraser(cfg, data.synthetic)?;
    let (model, hash) = open_checkpoint(cfg, &cfg.checkpoint_path())?;
    let corpus = match &cfg.eval.corpus {
        Some(p) => load_corpus(p)?,
        None => data.test,
    };
    let gen = TemplateGenerator::from_corpus(&data.train)?;
    let mut report = evaluate_delta_table(&model, &corpus, &modes, &gen, &para, cfg.eval_seed())?;
    report.checkpoint_hash = Some(hash.clone());
    report.config = cfg.snapshot();
    let dir = out_dir(cfg)?;
    write_file(dir.join("delta_report.json"), &report.to_json()?)?;
    write_file(dir.join("delta_report.csv"), &report.to_csv())?;
    for row in &report.rows {
        println!("{:<16} mean Δ {:+.4} (n={})", row.mode.name(), row.mean_delta, row.n);
    }
    if let Some(p) = &cfg.eval.zero_shot_corpus {
        let other = load_corpus(p)?;
        let gen_other = TemplateGenerator::from_corpus(&other)?;
        let zs = zero_shot_eval(&model, &other, &data.full, &gen_other, &para, cfg.eval_seed())?;
        if !zs.zero_shot {
            log::warn!("{} overlaps the training corpus; report is not zero-shot", other.name);
        }
        let doc = serde_json::json!({ "checkpoint_hash": hash, "config": cfg.snapshot(), "report": zs });
        write_file(
            dir.join("zero_shot_report.json"),
            &(serde_json::to_string_pretty(&doc)? + "\n"),
        )?;
        println!("zero-shot on {}: Δ {:+.4}", other.name, zs.delta);
    }
    write_snapshot(dir, cfg)
}

pub fn correlate_cmd(cfg: &RunConfig) -> CmdResult {
    let logs_path = cfg.correlate.logs.as_ref().expect("checked at startup");
    let logs = load_human_logs(logs_path)?;
    let (model, hash) = open_checkpoint(cfg, &cfg.checkpoint_path())?;
    let mut report = correlate(&model, &logs)?;
    report.checkpoint_hash = Some(hash);
    report.config = cfg.snapshot();
    let dir = out_dir(cfg)?;
    write_file(dir.join("correlation_report.json"), &report.to_json()?)?;
    write_file(dir.join("correlation_report.csv"), &report.to_csv())?;
    write_snapshot(dir, cfg)?;
    for q in &report.questions {
        println!("{:<20} rho {:+.4} (n={})", q.question, q.rho, q.n);
    }
    if !report.skipped.is_empty() {
        return Err(CliError::Partial(format!(
            "{} question(s) skipped",
            report.skipped.len()
        )));
    }
    Ok(())
}

fn write_probe(dir: &Path, stem: &str, report: &ProbeReport, cfg: &RunConfig) -> CmdResult {
    write_file(dir.join(format!("{stem}.csv")), &report.to_csv())?;
    write_file(dir.join(format!("{stem}.svg")), &report.to_svg())?;
    let doc = serde_json::json!({ "checkpoint_hash": null, "config": cfg.snapshot(), "report": report });
    write_file(
        dir.join(format!("{stem}.json")),
        &(serde_json::to_string_pretty(&doc)? + "\n"),
    )?;
    println!(
        "{stem}: held-out accuracy {:.3} (chance {:.3}) over {} pairs",
        report.accuracy, report.chance, report.n_pairs
    );
    Ok(())
}

pub fn probe(cfg: &RunConfig) -> CmdResult {
    let corpus = match &cfg.probe.corpus {
        Some(p) => load_corpus(p)?,
        None => load_data(cfg)?.full,
    };
    let enc = Encoder::new(cfg.model.encoder.clone(), Vocab::build([&corpus]), adapter(cfg)?)?;
    let report = probe_report(&corpus, &enc, cfg.probe.bins, cfg.probe_seed())?;
    let dir = out_dir(cfg)?;
    write_probe(dir, "probe", &report, cfg)?;
    if cfg.probe.shuffled {
        let shuffled = shuffle_utterances(&corpus, cfg.probe_seed());
        let r = probe_report(&shuffled, &enc, cfg.probe.bins, cfg.probe_seed())?;
        write_probe(dir, "probe_shuffled", &r, cfg)?;
    }
    write_snapshot(dir, cfg)
}

pub fn gen_synthetic(cfg: &RunConfig) -> CmdResult {
    let corpus = generate_synthetic(&cfg.synthetic)?;
    let dir = out_dir(cfg)?;
    save_corpus(&corpus, dir.join("synthetic.jsonl"))?;
    let tsv: String = synthetic_synonyms(&cfg.synthetic)
        .iter()
        .map(|(a, b)| format!("{a}\t{b}\n"))
        .collect();
    write_file(dir.join("synonyms.tsv"), &tsv)?;
    write_snapshot(dir, cfg)?;
    println!(
        "wrote {} dialogues ({} pairs) to {}",
        corpus.len(),
        corpus.pair_count(),
        dir.display()
    );
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRequest {
    id: serde_json::Value,
    context: Vec<String>,
    response: String,
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    id: &'a serde_json::Value,
    score: f64,
}

/// Context speakers alternate so that the response comes from the other side.
fn request_turns(req: &ScoreRequest) -> (Vec<Utterance>, Utterance) {
    let n = req.context.len();
    let speaker = |i: usize| {
        if (n - i).is_multiple_of(2) {
            Speaker::A
        } else {
            Speaker::B
        }
    };
    let ctx = req
        .context
        .iter()
        .enumerate()
        .map(|(i, t)| Utterance::from_text(speaker(i), t))
        .collect();
    (ctx, Utterance::from_text(speaker(n), &req.response))
}

fn score_line(model: &ScorerModel, line: &str) -> Result<(serde_json::Value, f64), String> {
    let req: ScoreRequest = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if req.context.is_empty() {
        return Err("context is empty".into());
    }
    let (ctx, resp) = request_turns(&req);
    if resp.is_empty() || ctx.iter().any(Utterance::is_empty) {
        return Err("utterances must contain at least one token".into());
    }
    let s = model.score(&ctx, &resp).map_err(|e| e.to_string())?.value();
    Ok((req.id, s))
}

pub fn score(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: impl BufRead,
    mut out: impl Write,
    mut err: impl Write,
) -> CmdResult {
    let (model, _) = open_checkpoint(cfg, checkpoint)?;
    let mut failed = 0usize;
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| CliError::Data(format!("reading input: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        match score_line(&model, &line) {
            Ok((id, s)) => {
                let text = serde_json::to_string(&ScoreLine { id: &id, score: s })?;
                writeln!(out, "{text}").map_err(|e| CliError::Data(e.to_string()))?;
            }
            Err(e) => {
                failed += 1;
                let _ = writeln!(err, "line {}: {e}", i + 1);
            }
        }
    }
    out.flush().map_err(|e| CliError::Data(e.to_string()))?;
    if failed > 0 {
        return Err(CliError::Partial(format!("{failed} input line(s) failed")));
    }
    Ok(())
}

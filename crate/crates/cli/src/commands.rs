use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use eyephen::classifier::{TaskContext, TrainerRegistry, TrainerSettings};
use eyephen::corpus::synth::{generate_corpus, SynthConfig};
use eyephen::corpus::Corpus;
use eyephen::dataset::{build_instances, load_jsonl, save_jsonl, AnnotatedSpan, LabeledInstance};
use eyephen::encoder::{
    load_checkpoint, mlm_pretrain, save_checkpoint, sequences_from_texts, subset_corpus, EncoderState, MlmConfig,
    MlmHead, PretrainPreset, Vocabulary,
};
use eyephen::evaluation::{macro_f1, ResultTable};
use eyephen::experiment::{plan_folds, prepare_encoders, run_experiment, ExperimentConfig};
use eyephen::extraction::{ConceptSpan, ExtractionStats, PatternSet};
use eyephen::ontology::{Ontology, TaskId};
use eyephen::stratify::make_splits;
use eyephen::workbook::{emit_workbook, merge_annotations, Resolution, SpanAnnotation, Workbook, CONTEXT_CHARS};

use crate::manifest::RunManifest;
use crate::{Cli, Command, Format};

pub fn run(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let mut m = RunManifest::new(cli.command_name(), cli.seed, cli.config.as_deref())?;
    let ontology = Ontology::default_ontology();
    match &cli.command {
        Command::Synth { patients } => synth(cli, &mut m, &ontology, *patients)?,
        Command::Extract { corpus, patterns, stats } => extract(cli, &mut m, &ontology, corpus, patterns.as_deref(), *stats)?,
        Command::AnnotateGen { corpus, spans, limit } => annotate_gen(cli, &mut m, &ontology, corpus, spans, *limit)?,
        Command::AnnotateParse {
            corpus,
            workbooks,
            second,
            resolution,
        } => annotate_parse(cli, &mut m, &ontology, corpus, workbooks, second.as_deref(), resolution.as_deref())?,
        Command::Split { corpus, annotations, k } => split(cli, &mut m, &ontology, corpus, annotations, *k)?,
        Command::Pretrain { corpus, preset, d, init } => pretrain(cli, &mut m, corpus, preset, *d, init.as_deref())?,
        Command::Train {
            corpus,
            annotations,
            model,
            encoder,
            task,
            fold,
            k,
        } => train(
            cli,
            &mut m,
            &ontology,
            TrainArgs {
                corpus,
                annotations,
                model,
                encoder: encoder.as_deref(),
                task: task.as_deref(),
                fold: *fold,
                k: *k,
            },
        )?,
        Command::Evaluate { predictions } => evaluate(cli, &mut m, predictions)?,
        Command::Experiment { corpus, annotations } => experiment(cli, &mut m, &ontology, corpus, annotations)?,
        Command::Report { results, compare } => report(cli, &mut m, results, compare.as_deref())?,
    }
    m.write(&cli.out)
}

impl Cli {
    pub(crate) fn command_name(&self) -> &'static str {
        match &self.command {
            Command::Synth { .. } => "synth",
            Command::Extract { .. } => "extract",
            Command::AnnotateGen { .. } => "annotate-gen",
            Command::AnnotateParse { .. } => "annotate-parse",
            Command::Split { .. } => "split",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Experiment { .. } => "experiment",
            Command::Report { .. } => "report",
        }
    }

    fn load_config<T: for<'de> Deserialize<'de> + Default>(&self) -> Result<T> {
        match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
            None => Ok(T::default()),
        }
    }

    fn ext(&self) -> &'static str {
        match self.format {
            Format::Text => "txt",
            Format::Csv => "csv",
        }
    }
}

fn load_corpus(m: &mut RunManifest, path: &Path) -> Result<Corpus> {
    m.input(path)?;
    Corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn corpus_texts(corpus: &Corpus) -> Vec<String> {
    corpus.documents().map(|(_, e)| e.note.render().text).collect()
}

fn write_text(m: &mut RunManifest, out: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let p = out.join(name);
    fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
    m.output(out, &p)?;
    Ok(p)
}

fn synth(cli: &Cli, m: &mut RunManifest, o: &Ontology, patients: Option<usize>) -> Result<()> {
    let mut cfg: SynthConfig = cli.load_config()?;
    if let Some(n) = patients {
        cfg.n_patients = n;
    }
    cfg.seed = m.seed("synth");
    let (corpus, truth) = generate_corpus(&cfg, o)?;
    let out = &cli.out;
    corpus.save(out.join("corpus.txt"))?;
    m.output(out, &out.join("corpus.txt"))?;
    truth.save(out.join("ground_truth.json"))?;
    m.output(out, &out.join("ground_truth.json"))?;
    let spans: Vec<AnnotatedSpan> = truth.spans.iter().map(AnnotatedSpan::from).collect();
    save_jsonl(out.join("annotations.jsonl"), &spans)?;
    m.output(out, &out.join("annotations.jsonl"))?;
    println!(
        "{} patients, {} documents, {} spans",
        corpus.patients.len(),
        corpus.num_documents(),
        spans.len()
    );
    Ok(())
}

fn stats_table(stats: &ExtractionStats, o: &Ontology, format: Format) -> Result<String> {
    let rows = stats.rows(o);
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(ExtractionStats::HEADER)?;
            for (c, a, b, t) in rows {
                w.write_record([c, a.to_string(), b.to_string(), t.to_string()])?;
            }
            Ok(String::from_utf8(w.into_inner()?)?)
        }
        Format::Text => {
            let width = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0).max(16);
            let h = ExtractionStats::HEADER;
            let mut s = format!("{:<width$}  {:>8}  {:>8}  {:>8}\n", h[0], h[1], h[2], h[3]);
            for (c, a, b, t) in rows {
                s.push_str(&format!("{c:<width$}  {a:>8}  {b:>8}  {t:>8}\n"));
            }
            Ok(s)
        }
    }
}

fn extract(cli: &Cli, m: &mut RunManifest, o: &Ontology, corpus: &Path, patterns: Option<&Path>, stats: bool) -> Result<()> {
    let corpus = load_corpus(m, corpus)?;
    let set = match patterns {
        Some(p) => {
            m.input(p)?;
            PatternSet::load(p)?
        }
        None => PatternSet::default_set(),
    };
    let docs: Vec<_> = corpus.documents().collect();
    let spans: Vec<ConceptSpan> = {
        use rayon::prelude::*;
        docs.par_iter()
            .map(|(_, e)| set.extract_encounter(&e.note))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    };
    save_jsonl(cli.out.join("spans.jsonl"), &spans)?;
    m.output(&cli.out, &cli.out.join("spans.jsonl"))?;
    println!("{} spans from {} documents", spans.len(), docs.len());
    if stats {
        let table = stats_table(&set.extraction_stats(&corpus), o, cli.format)?;
        write_text(m, &cli.out, &format!("extraction_stats.{}", cli.ext()), &table)?;
        print!("{table}");
    }
    Ok(())
}

fn annotate_gen(cli: &Cli, m: &mut RunManifest, o: &Ontology, corpus: &Path, spans: &Path, limit: Option<usize>) -> Result<()> {
    let corpus = load_corpus(m, corpus)?;
    m.input(spans)?;
    let spans: Vec<ConceptSpan> = load_jsonl(spans)?;
    let mut by_doc: BTreeMap<&str, Vec<SpanAnnotation>> = BTreeMap::new();
    for s in &spans {
        by_doc.entry(s.doc_id.as_str()).or_default().push(SpanAnnotation::candidate(s));
    }
    let dir = cli.out.join("workbooks");
    fs::create_dir_all(&dir)?;
    let mut n = 0;
    for (_, enc) in corpus.documents() {
        if limit.is_some_and(|l| n >= l) {
            break;
        }
        let Some(candidates) = by_doc.get(enc.note.doc_id.as_str()) else {
            continue;
        };
        let wb = emit_workbook(&enc.note, candidates, o, CONTEXT_CHARS)?;
        let csv_path = dir.join(format!("{}.csv", wb.doc_id));
        wb.save(&csv_path)?;
        m.output(&cli.out, &csv_path)?;
        let side = dir.join(format!("{}.options.json", wb.doc_id));
        wb.sidecar(o).save(&side)?;
        m.output(&cli.out, &side)?;
        n += 1;
    }
    println!("{n} workbooks written to {}", dir.display());
    Ok(())
}

fn workbook_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            entries.retain(|e| e.extension().is_some_and(|x| x == "csv"));
            entries.sort();
            out.extend(entries);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn read_workbooks(m: &mut RunManifest, o: &Ontology, files: &[PathBuf]) -> Result<BTreeMap<String, Vec<SpanAnnotation>>> {
    let mut out = BTreeMap::new();
    for f in files {
        m.input(f)?;
        let wb = Workbook::load(f).with_context(|| format!("reading {}", f.display()))?;
        let ann = wb.annotations(o).with_context(|| format!("in {}", f.display()))?;
        out.insert(wb.doc_id, ann);
    }
    Ok(out)
}

fn annotate_parse(
    cli: &Cli,
    m: &mut RunManifest,
    o: &Ontology,
    corpus: &Path,
    workbooks: &[PathBuf],
    second: Option<&Path>,
    resolution: Option<&Path>,
) -> Result<()> {
    let corpus = load_corpus(m, corpus)?;
    let index = corpus.document_index();
    let first = read_workbooks(m, o, &workbook_files(workbooks)?)?;
    let merged = match second {
        None => first,
        Some(dir) => {
            let other = read_workbooks(m, o, &workbook_files(&[dir.to_path_buf()])?)?;
            let res = match resolution {
                Some(p) => {
                    m.input(p)?;
                    Resolution::read_csv(fs::File::open(p)?, o)?
                }
                None => Resolution::default(),
            };
            ensure!(
                first.keys().eq(other.keys()),
                "the two annotators' workbooks cover different documents"
            );
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["Document ID", "Start", "End", "Concept", "Column", "A", "B"])?;
            let mut out = BTreeMap::new();
            for (doc, a) in &first {
                let r = merge_annotations(a, &other[doc], &res, o).with_context(|| format!("document {doc}"))?;
                for d in &r.disagreements {
                    w.write_record([
                        doc.as_str(),
                        &d.start.to_string(),
                        &d.end.to_string(),
                        &o.concept(d.concept).display_name,
                        &d.column,
                        &d.a,
                        &d.b,
                    ])?;
                }
                out.insert(doc.clone(), r.resolved);
            }
            let text = String::from_utf8(w.into_inner()?)?;
            write_text(m, &cli.out, "disagreements.csv", &text)?;
            out
        }
    };
    let mut spans = Vec::new();
    for (doc, anns) in merged {
        let (patient, _) = index
            .get(doc.as_str())
            .with_context(|| format!("workbook document {doc} is not in the corpus"))?;
        spans.extend(anns.into_iter().map(|a| a.into_annotated(&doc, &patient.patient_id)));
    }
    save_jsonl(cli.out.join("annotations.jsonl"), &spans)?;
    m.output(&cli.out, &cli.out.join("annotations.jsonl"))?;
    println!("{} annotated spans", spans.len());
    Ok(())
}

fn load_instances(m: &mut RunManifest, o: &Ontology, corpus: &Corpus, annotations: &Path, max_window: usize) -> Result<Vec<LabeledInstance>> {
    m.input(annotations)?;
    let spans: Vec<AnnotatedSpan> = load_jsonl(annotations)?;
    Ok(build_instances(corpus, &spans, o, max_window)?)
}

fn split(cli: &Cli, m: &mut RunManifest, o: &Ontology, corpus: &Path, annotations: &Path, k: usize) -> Result<()> {
    let corpus = load_corpus(m, corpus)?;
    let cfg: ExperimentConfig = cli.load_config()?;
    let instances = load_instances(m, o, &corpus, annotations, cfg.encoder.max_window)?;
    // Recorded for the manifest; plan_folds derives the same stream.
    m.seed("folds");
    let plan = plan_folds(&instances, k, cli.seed)?;
    let p = cli.out.join("folds.tsv");
    plan.save(&p)?;
    m.output(&cli.out, &p)?;
    for f in 0..k {
        println!("fold {f}: {} patients", plan.groups_in(f).len());
    }
    Ok(())
}

fn pretrain(cli: &Cli, m: &mut RunManifest, corpus: &Path, preset: &str, d: usize, init: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(m, corpus)?;
    let cfg: MlmConfig = cli.load_config()?;
    let preset: PretrainPreset = preset.parse().map_err(|_| anyhow::anyhow!("unknown preset {preset:?}"))?;
    let texts = corpus_texts(&corpus);
    let (enc, head) = match init {
        Some(p) => {
            m.input(p)?;
            load_checkpoint(p)?
        }
        None => {
            let vocab = Vocabulary::build(&texts, 1, Some(5000))?;
            let n = vocab.len();
            (
                EncoderState::random(vocab, d, cfg.max_seq_len, m.seed("encoder-init")),
                MlmHead::random(n, d, m.seed("mlm-head")),
            )
        }
    };
    let n = preset.documents(texts.len());
    let p = cli.out.join("encoder.ckpt");
    if n == 0 {
        save_checkpoint(&p, &enc, &head)?;
        m.output(&cli.out, &p)?;
        println!("preset Zero: encoder written without pretraining");
        return Ok(());
    }
    let docs = subset_corpus(&texts, n, m.seed("pretrain-subset"))?;
    let seqs = sequences_from_texts(&enc.vocab, &docs, cfg.max_seq_len);
    let outcome = mlm_pretrain(enc, head, &seqs, &cfg, m.seed("pretrain"))?;
    save_checkpoint(&p, &outcome.encoder, &outcome.head)?;
    m.output(&cli.out, &p)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "lr", "train_loss", "eval_loss"])?;
    for r in &outcome.history {
        w.write_record([r.step.to_string(), format!("{:?}", r.lr), format!("{:?}", r.train_loss), format!("{:?}", r.eval_loss)])?;
    }
    write_text(m, &cli.out, "pretrain_history.csv", &String::from_utf8(w.into_inner()?)?)?;
    println!(
        "{} documents, {} steps{}",
        n,
        outcome.steps,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Prediction {
    model: String,
    task: TaskId,
    fold: usize,
    doc_id: String,
    start: usize,
    end: usize,
    gold: String,
    pred: String,
}

struct TrainArgs<'a> {
    corpus: &'a Path,
    annotations: &'a Path,
    model: &'a str,
    encoder: Option<&'a Path>,
    task: Option<&'a str>,
    fold: usize,
    k: usize,
}

fn train(cli: &Cli, m: &mut RunManifest, o: &Ontology, a: TrainArgs<'_>) -> Result<()> {
    let corpus = load_corpus(m, a.corpus)?;
    let cfg: ExperimentConfig = cli.load_config()?;
    ensure!(a.fold < a.k, "fold {} out of range for k = {}", a.fold, a.k);
    let instances = load_instances(m, o, &corpus, a.annotations, cfg.encoder.max_window)?;
    let registry = TrainerRegistry::default();
    let encoder = if a.model == "majority" {
        None
    } else if let Some(p) = a.encoder {
        m.input(p)?;
        Some(Arc::new(load_checkpoint(p)?.0))
    } else {
        let cfg = ExperimentConfig { pretrain: None, ..cfg.clone() };
        Some(prepare_encoders(&corpus_texts(&corpus), &cfg)?.remove(0).encoder)
    };
    if let Some(e) = &encoder {
        ensure!(
            e.max_len >= cfg.encoder.max_window,
            "encoder supports {} positions but windows are {} tokens",
            e.max_len,
            cfg.encoder.max_window
        );
    }
    let trainer = registry.create(
        a.model,
        &TrainerSettings {
            encoder,
            grid: cfg.grid.clone(),
            train: cfg.train.clone(),
            head: cfg.head,
        },
    )?;
    let tasks: Vec<TaskId> = match a.task {
        Some(t) => vec![t.parse().map_err(|_| anyhow::anyhow!("unknown task {t:?}"))?],
        None => TaskId::ALL.to_vec(),
    };
    let plan = plan_folds(&instances, a.k, cli.seed)?;
    let split = &make_splits(a.k)?[a.fold];
    let mut preds = Vec::new();
    for task in tasks {
        let of_task: Vec<&LabeledInstance> = instances.iter().filter(|i| i.task == task).collect();
        let part = |folds: &[usize]| -> Vec<&LabeledInstance> {
            of_task
                .iter()
                .copied()
                .filter(|i| folds.contains(&plan.fold_of(&i.patient_id).unwrap()))
                .collect()
        };
        let (train, dev, test) = (part(&split.train), part(&[split.dev]), part(&[split.test]));
        if train.is_empty() || test.is_empty() || dev.is_empty() {
            eprintln!("skipping {task}: empty partition");
            continue;
        }
        let classes = o.task(task).classes.clone();
        let ctx = TaskContext {
            task,
            classes: &classes,
            train: &train,
            dev: &dev,
            test: &test,
            seed: eyephen::seeds::derive(cli.seed, &format!("{task}/{}", a.fold)),
        };
        let out = trainer.fit_predict(&ctx)?;
        for (i, p) in test.iter().zip(out) {
            preds.push(Prediction {
                model: a.model.to_string(),
                task,
                fold: a.fold,
                doc_id: i.doc_id.clone(),
                start: i.start,
                end: i.end,
                gold: i.class.clone(),
                pred: p,
            });
        }
    }
    let p = cli.out.join("predictions.jsonl");
    save_jsonl(&p, &preds)?;
    m.output(&cli.out, &p)?;
    println!("{} predictions", preds.len());
    Ok(())
}

fn evaluate(cli: &Cli, m: &mut RunManifest, predictions: &Path) -> Result<()> {
    m.input(predictions)?;
    let preds: Vec<Prediction> = load_jsonl(predictions)?;
    ensure!(!preds.is_empty(), "no predictions in {}", predictions.display());
    let mut groups: BTreeMap<(String, TaskId, usize), (Vec<&str>, Vec<&str>)> = BTreeMap::new();
    for p in &preds {
        let g = groups.entry((p.model.clone(), p.task, p.fold)).or_default();
        g.0.push(&p.gold);
        g.1.push(&p.pred);
    }
    let mut table = ResultTable::default();
    let mut max_fold = 0;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "column", "fold", "macro_f1"])?;
    for ((model, task, fold), (g, p)) in &groups {
        let f1 = macro_f1(g, p)?;
        max_fold = max_fold.max(*fold);
        table.record(*task, model, *fold, f1);
        w.write_record([task.as_str(), model, &fold.to_string(), &format!("{f1:?}")])?;
    }
    table.k = max_fold + 1;
    let text = String::from_utf8(w.into_inner()?)?;
    write_text(m, &cli.out, "metrics.csv", &text)?;
    match table.render(cli.format.into()) {
        Ok(r) => {
            write_text(m, &cli.out, &format!("metrics_report.{}", cli.ext()), &r)?;
            print!("{r}");
        }
        Err(_) => print!("{text}"),
    }
    Ok(())
}

fn experiment(cli: &Cli, m: &mut RunManifest, o: &Ontology, corpus: &Path, annotations: &Path) -> Result<()> {
    let corpus = load_corpus(m, corpus)?;
    let mut cfg: ExperimentConfig = cli.load_config()?;
    cfg.seed = cli.seed;
    let instances = load_instances(m, o, &corpus, annotations, cfg.encoder.max_window)?;
    let variants = prepare_encoders(&corpus_texts(&corpus), &cfg)?;
    let out = run_experiment(&instances, o, &variants, &cfg, &TrainerRegistry::default())?;
    let plan_path = cli.out.join("folds.tsv");
    out.plan.save(&plan_path)?;
    m.output(&cli.out, &plan_path)?;
    let results = cli.out.join("results.csv");
    out.table.write_folds_csv(fs::File::create(&results)?)?;
    m.output(&cli.out, &results)?;
    let report = out.table.render(cli.format.into())?;
    write_text(m, &cli.out, &format!("report.{}", cli.ext()), &report)?;
    print!("{report}");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["a", "b", "t", "dof", "p"])?;
    let cols = &out.table.columns;
    for i in 0..cols.len() {
        for j in i + 1..cols.len() {
            let r = out.table.compare(&cols[j], &cols[i])?;
            w.write_record([&cols[j], &cols[i], &format!("{:?}", r.t), &r.dof.to_string(), &format!("{:?}", r.p)])?;
        }
    }
    write_text(m, &cli.out, "comparisons.csv", &String::from_utf8(w.into_inner()?)?)?;
    Ok(())
}

fn report(cli: &Cli, m: &mut RunManifest, results: &Path, compare: Option<&[String]>) -> Result<()> {
    m.input(results)?;
    let table = ResultTable::read_folds_csv(fs::File::open(results)?)?;
    let text = table.render(cli.format.into())?;
    write_text(m, &cli.out, &format!("report.{}", cli.ext()), &text)?;
    print!("{text}");
    if let Some(pair) = compare {
        let [a, b] = pair else { bail!("--compare takes two column names") };
        let r = table.compare(a, b)?;
        println!("{a} vs {b}: t({}) = {:.3}, p = {:.3}", r.dof, r.t, r.p);
    }
    Ok(())
}

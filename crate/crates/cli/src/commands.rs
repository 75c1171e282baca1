use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use fluentcap::captioner::{
    build_caption_vocab, caption_examples, train_captioner, Captioner, CaptionerConfig,
};
use fluentcap::corpus::{
    load_captions, load_features, load_splits, make_splits, pair_bilingual, save_captions,
    select_split, CaptionRecord, FluencyExample, FluencyLabel, Language, SplitName, SplitSpec,
    Splits,
};
use fluentcap::diagnostics::{captioner_gradcheck, fluency_gradcheck};
use fluentcap::fluency::{
    accuracy, classify, evaluate_pr, length_baseline, random_guess, score_records, train_ensemble,
    ClassifierConfig, FluencyEnsemble, PrecisionRecall,
};
use fluentcap::guidance::{rerank_grouped, RerankCandidate, Strategy};
use fluentcap::metrics::{build_instances, evaluate as evaluate_metrics};
use fluentcap::neuralnet::io::Metadata;
use fluentcap::neuralnet::{AdamConfig, GradCheckReport, SgdSchedule};
use fluentcap::synthgen::{generate, SynthConfig};
use fluentcap::text::{LexiconTagger, Tagger};
use fluentcap_annotate::eval::{EvalImage, EvalSet, SystemCaption};
use fluentcap_annotate::{Service, ServiceConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{
    write_manifest, CaptionArgs, Command, Ctx, EvaluateArgs, GradcheckArgs, RerankArgs, ScoreArgs,
    ServeArgs, SynthArgs, TrainCaptionerArgs, TrainClassifierArgs, MANIFEST,
};

pub(crate) fn dispatch(ctx: &Ctx, cmd: &Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(ctx, a, cmd),
        Command::TrainClassifier(a) => train_classifier(ctx, a, cmd),
        Command::Score(a) => score(ctx, a, cmd),
        Command::TrainCaptioner(a) => train_captioner_cmd(ctx, a, cmd),
        Command::Caption(a) => caption(ctx, a, cmd),
        Command::Rerank(a) => rerank(ctx, a, cmd),
        Command::Evaluate(a) => evaluate(ctx, a, cmd),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Serve(a) => serve(ctx, a),
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    write_file(path, out)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn write_file(path: &Path, text: String) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Manifest path for a single-file output: `<file>.run.json`.
fn file_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    out.with_file_name(name)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_tagger(ctx: &Ctx, lexicon: Option<&Path>) -> Result<Option<LexiconTagger>> {
    lexicon
        .map(|p| {
            let p = ctx.path(p);
            LexiconTagger::load(&p).with_context(|| format!("loading lexicon {}", p.display()))
        })
        .transpose()
}

fn fill_pos(records: &mut [CaptionRecord], tagger: Option<&LexiconTagger>) {
    if let Some(t) = tagger {
        for r in records.iter_mut().filter(|r| r.pos.is_none()) {
            r.pos = Some(t.tag(&r.tokens));
        }
    }
}

fn image_ids(records: &[CaptionRecord]) -> Vec<String> {
    let mut seen = HashSet::new();
    records
        .iter()
        .filter(|r| seen.insert(r.image_id.as_str()))
        .map(|r| r.image_id.clone())
        .collect()
}

fn splits_for(
    ctx: &Ctx,
    splits: Option<&Path>,
    records: &[CaptionRecord],
    seed: u64,
) -> Result<Splits> {
    match splits {
        Some(p) => {
            let p = ctx.path(p);
            load_splits(&p).with_context(|| format!("loading splits {}", p.display()))
        }
        None => Ok(make_splits(
            &image_ids(records),
            &SplitSpec::Ratios(0.8, 0.1, 0.1),
            seed,
        )?),
    }
}

fn meta(pairs: &[(&str, String)]) -> Metadata {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

fn synth(ctx: &Ctx, a: &SynthArgs, cmd: &Command) -> Result<()> {
    let cfg = SynthConfig {
        n_images: a.images,
        captions_per_image: a.captions_per_image,
        rho: a.rho,
        seed: a.seed,
        feature_dim: a.feature_dim,
        noise: a.noise,
        ..SynthConfig::default()
    };
    let corpus = generate(&cfg)?;
    let out = ctx.path(&a.out);
    corpus.write(&out)?;
    write_manifest(&out.join(MANIFEST), cmd)?;
    let targets: Vec<_> = corpus.target_records().collect();
    let corrupted = targets
        .iter()
        .filter(|r| r.label == Some(FluencyLabel::NotFluent))
        .count();
    println!(
        "wrote {} images, {} target sentences ({} not fluent) to {}",
        corpus.images.len(),
        targets.len(),
        corrupted,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ClassifierEvaluation {
    test_sentences: usize,
    fluent_share: f64,
    random_guess: PrecisionRecall,
    length_baseline: PrecisionRecall,
    views: BTreeMap<String, ViewEvaluation>,
    ensemble: ViewEvaluation,
}

#[derive(Serialize)]
struct ViewEvaluation {
    accuracy: f64,
    fluent: PrecisionRecall,
}

fn view_eval(pred: &[FluencyLabel], labels: &[FluencyLabel]) -> Result<ViewEvaluation> {
    Ok(ViewEvaluation {
        accuracy: accuracy(pred, labels),
        fluent: evaluate_pr(pred, labels)?,
    })
}

fn split_examples(
    examples: &[FluencyExample],
    splits: &Splits,
    name: SplitName,
) -> Vec<FluencyExample> {
    let ids: HashSet<&str> = splits
        .get(&name)
        .map(|s| s.items.iter().map(String::as_str).collect())
        .unwrap_or_default();
    examples
        .iter()
        .filter(|e| ids.contains(e.pair.image_id.as_str()))
        .cloned()
        .collect()
}

fn train_classifier(ctx: &Ctx, a: &TrainClassifierArgs, cmd: &Command) -> Result<()> {
    let path = ctx.path(&a.captions);
    let mut records = load_captions(&path)?;
    fill_pos(
        &mut records,
        load_tagger(ctx, a.lexicon.as_deref())?.as_ref(),
    );
    let splits = splits_for(ctx, a.splits.as_deref(), &records, a.seed)?;
    let labeled = fluentcap::corpus::labeled_examples(&pair_bilingual(&records)?);
    if labeled.is_empty() {
        bail!("{} has no target sentences with a label", path.display());
    }
    let train = split_examples(&labeled, &splits, SplitName::Train);
    let val = split_examples(&labeled, &splits, SplitName::Val);
    let test = split_examples(&labeled, &splits, SplitName::Test);
    let cfg = ClassifierConfig {
        embed_dim: a.embed_dim,
        hidden_dim: a.hidden_dim,
        dropout: a.dropout,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        batch_size: a.batch_size,
        epochs: a.epochs,
        patience: a.patience,
        ..ClassifierConfig::default()
    };
    let (ensemble, logs) = train_ensemble(&train, &val, &cfg, a.seed)?;
    let out = ctx.path(&a.out);
    create_dir(&out)?;
    ensemble.save(&out, &meta(&[("seed", a.seed.to_string())]))?;
    write_json(&out.join("train_log.json"), &logs)?;
    println!(
        "trained on {} sentences ({} validation); best epochs {}",
        train.len(),
        val.len(),
        logs.iter()
            .map(|l| format!("{}={}", l.view.name(), l.best_epoch))
            .collect::<Vec<_>>()
            .join(" ")
    );
    if !test.is_empty() {
        let labels: Vec<FluencyLabel> = test.iter().map(|e| e.label).collect();
        let mut views = BTreeMap::new();
        for v in ensemble.views() {
            let pred = test
                .iter()
                .map(|e| Ok(classify(v.score(&e.pair)?.fluent)))
                .collect::<Result<Vec<_>>>()?;
            views.insert(v.kind.name().to_string(), view_eval(&pred, &labels)?);
        }
        let pairs: Vec<_> = test.iter().map(|e| e.pair.clone()).collect();
        let ens: Vec<FluencyLabel> = ensemble
            .score_all(&pairs)?
            .into_iter()
            .map(classify)
            .collect();
        let fluent_lengths: Vec<usize> = train
            .iter()
            .filter(|e| e.label.is_fluent())
            .map(|e| e.pair.target.len())
            .collect();
        let lengths: Vec<usize> = test.iter().map(|e| e.pair.target.len()).collect();
        let report = ClassifierEvaluation {
            test_sentences: test.len(),
            fluent_share: labels.iter().filter(|l| l.is_fluent()).count() as f64
                / labels.len() as f64,
            random_guess: evaluate_pr(&random_guess(labels.len(), a.seed), &labels)?,
            length_baseline: evaluate_pr(&length_baseline(&lengths, &fluent_lengths)?, &labels)?,
            views,
            ensemble: view_eval(&ens, &labels)?,
        };
        write_json(&out.join("evaluation.json"), &report)?;
        println!(
            "test accuracy {:.4} on {} sentences (fluent recall {:.1}, precision {:.1})",
            report.ensemble.accuracy,
            report.test_sentences,
            report.ensemble.fluent.recall,
            report.ensemble.fluent.precision
        );
    }
    write_manifest(&out.join(MANIFEST), cmd)
}

fn score(ctx: &Ctx, a: &ScoreArgs, cmd: &Command) -> Result<()> {
    let mut records = load_captions(&ctx.path(&a.captions))?;
    fill_pos(
        &mut records,
        load_tagger(ctx, a.lexicon.as_deref())?.as_ref(),
    );
    let ensemble = FluencyEnsemble::load(&ctx.path(&a.classifier))?;
    score_records(&ensemble, &mut records)?;
    let out = ctx.path(&a.out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_captions(&out, &records)?;
    write_manifest(&file_manifest(&out), cmd)?;
    let scores: Vec<f64> = records.iter().filter_map(|r| r.fluency).collect();
    let fluent = scores.iter().filter(|&&f| classify(f).is_fluent()).count();
    println!(
        "scored {} sentences, {} above the fluency threshold",
        scores.len(),
        fluent
    );
    Ok(())
}

fn split_records(
    records: &[CaptionRecord],
    splits: &Splits,
    name: SplitName,
) -> Vec<CaptionRecord> {
    splits
        .get(&name)
        .map(|s| select_split(records, s))
        .unwrap_or_default()
        .into_iter()
        .filter(|r| r.language == Language::Target)
        .collect()
}

fn train_captioner_cmd(ctx: &Ctx, a: &TrainCaptionerArgs, cmd: &Command) -> Result<()> {
    let path = ctx.path(&a.captions);
    let records = load_captions(&path)?;
    let features = load_features(&ctx.path(&a.features))?;
    let splits = splits_for(ctx, a.splits.as_deref(), &records, a.seed)?;
    let train_r = split_records(&records, &splits, SplitName::Train);
    let val_r = split_records(&records, &splits, SplitName::Val);
    let vocab = build_caption_vocab(&train_r, a.min_count)?;
    let train = caption_examples(&train_r, &features, &vocab)?;
    let val = caption_examples(&val_r, &features, &vocab)?;
    let strategy = Strategy::new(a.strategy, a.seed);
    strategy.check(&train).with_context(|| {
        format!(
            "strategy {} needs a fluency score on every training sentence of {}; run `fluentcap score` first",
            a.strategy,
            path.display()
        )
    })?;
    let cfg = CaptionerConfig {
        embed_dim: a.embed_dim,
        hidden_dim: a.hidden_dim,
        batch_size: a.batch_size,
        epochs: a.epochs,
        sgd: SgdSchedule {
            base_lr: a.lr,
            ..SgdSchedule::default()
        },
        dropout: a.dropout,
        clip_norm: a.clip,
        min_count: a.min_count,
        ..CaptionerConfig::default()
    };
    let (model, log) = train_captioner(&train, &val, vocab, &strategy, &cfg, a.seed)?;
    let out = ctx.path(&a.out);
    create_dir(&out)?;
    model.save(
        &out,
        &meta(&[
            ("seed", a.seed.to_string()),
            ("strategy", a.strategy.to_string()),
        ]),
    )?;
    write_json(&out.join("train_log.json"), &log)?;
    write_manifest(&out.join(MANIFEST), cmd)?;
    println!(
        "{}: {} training sentences, vocabulary {}, best validation loss {:.4} after epoch {}",
        a.strategy,
        train.len(),
        model.vocab.len(),
        log.best_val_loss,
        log.best_epoch
    );
    Ok(())
}

fn caption(ctx: &Ctx, a: &CaptionArgs, cmd: &Command) -> Result<()> {
    let features = load_features(&ctx.path(&a.features))?;
    let model = Captioner::load(&ctx.path(&a.model))?;
    let ids: Vec<String> = match (&a.splits, &a.split) {
        (Some(p), Some(name)) => {
            let splits = load_splits(&ctx.path(p))?;
            let name = match name.as_str() {
                "train" => SplitName::Train,
                "val" => SplitName::Val,
                _ => SplitName::Test,
            };
            splits
                .get(&name)
                .map(|s| s.items.clone())
                .unwrap_or_default()
        }
        _ => features.features.keys().cloned().collect(),
    };
    let caps = model.caption_all(&features, &ids, a.beam, a.max_len, a.topk)?;
    let out = ctx.path(&a.out);
    write_jsonl(&out, &caps)?;
    write_manifest(&file_manifest(&out), cmd)?;
    println!("captioned {} images", ids.len());
    Ok(())
}

fn rerank(ctx: &Ctx, a: &RerankArgs, cmd: &Command) -> Result<()> {
    let cands: Vec<RerankCandidate> = read_jsonl(&ctx.path(&a.candidates))?;
    let ensemble = FluencyEnsemble::load(&ctx.path(&a.classifier))?;
    let tagger = load_tagger(ctx, Some(&a.lexicon))?.expect("lexicon is required");
    let out_items = rerank_grouped(&cands, &ensemble, &tagger)?;
    let out = ctx.path(&a.out);
    write_jsonl(&out, &out_items)?;
    write_manifest(&file_manifest(&out), cmd)?;
    let degraded = out_items.iter().filter(|c| c.degraded).count();
    println!(
        "reranked {} candidates ({} scored without a source sentence)",
        out_items.len(),
        degraded
    );
    Ok(())
}

#[derive(Deserialize)]
struct RankedCaption {
    image_id: String,
    #[serde(default = "first_rank")]
    rank: usize,
    tokens: Vec<String>,
}

fn first_rank() -> usize {
    1
}

/// The best-ranked caption per image, in order of first appearance.
fn top_ranked(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let all: Vec<RankedCaption> = read_jsonl(path)?;
    let mut order = Vec::new();
    let mut best: HashMap<String, RankedCaption> = HashMap::new();
    for c in all {
        match best.get(&c.image_id) {
            Some(b) if b.rank <= c.rank => {}
            Some(_) => {
                best.insert(c.image_id.clone(), c);
            }
            None => {
                order.push(c.image_id.clone());
                best.insert(c.image_id.clone(), c);
            }
        }
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let c = best.remove(&id).expect("present");
            (id, c.tokens)
        })
        .collect())
}

fn evaluate(ctx: &Ctx, a: &EvaluateArgs, cmd: &Command) -> Result<()> {
    let cand_path = ctx.path(&a.candidates);
    let candidates = top_ranked(&cand_path)?;
    let references = load_captions(&ctx.path(&a.references))?;
    let instances = build_instances(&candidates, &references)?;
    let report = evaluate_metrics(&instances, a.cider.into())?;
    let report_path = match &a.report {
        Some(p) => ctx.path(p),
        None => {
            let mut name = cand_path.file_name().unwrap_or_default().to_os_string();
            name.push(".eval.json");
            cand_path.with_file_name(name)
        }
    };
    write_json(&report_path, &report)?;
    write_manifest(&file_manifest(&report_path), cmd)?;
    println!("BLEU-4  {:.2}", report.bleu4);
    println!("ROUGE-L {:.2}", report.rouge_l);
    println!("CIDEr   {:.4}", report.cider);
    Ok(())
}

fn print_report(name: &str, r: &GradCheckReport) {
    println!(
        "{name}: max relative error {:.3e} (tolerance {:.0e}) {}",
        r.max_rel_error,
        r.tolerance,
        if r.passed() { "ok" } else { "FAILED" }
    );
    for t in &r.tensors {
        println!(
            "  {:<24} {:>6} entries  {:.3e}",
            t.name, t.entries, t.max_rel_error
        );
    }
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let f = fluency_gradcheck(a.embed_dim, a.hidden_dim, a.seed)?;
    print_report("fluency view", &f);
    let c = captioner_gradcheck(a.embed_dim, a.hidden_dim, a.seed)?;
    print_report("captioner", &c);
    if !(f.passed() && c.passed()) {
        bail!("gradient check failed");
    }
    Ok(())
}

#[derive(Deserialize)]
struct ImageDescription {
    image_id: String,
    description: String,
}

fn eval_set(ctx: &Ctx, systems: &[String], images: Option<&Path>) -> Result<EvalSet> {
    let descriptions: HashMap<String, String> = match images {
        Some(p) => read_jsonl::<ImageDescription>(&ctx.path(p))?
            .into_iter()
            .map(|d| (d.image_id, d.description))
            .collect(),
        None => HashMap::new(),
    };
    let mut order: Vec<String> = Vec::new();
    let mut by_image: HashMap<String, Vec<SystemCaption>> = HashMap::new();
    for spec in systems {
        let (name, file) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("--systems entry {spec:?} is not name=file"))?;
        for (image_id, tokens) in top_ranked(&ctx.path(Path::new(file)))? {
            let e = by_image.entry(image_id.clone()).or_insert_with(|| {
                order.push(image_id.clone());
                Vec::new()
            });
            e.push(SystemCaption {
                system_id: name.to_string(),
                tokens,
            });
        }
    }
    Ok(EvalSet {
        images: order
            .into_iter()
            .filter_map(|id| {
                let candidates = by_image.remove(&id)?;
                (candidates.len() >= 2).then(|| EvalImage {
                    description: descriptions.get(&id).cloned(),
                    image_id: id,
                    candidates,
                })
            })
            .collect(),
    })
}

fn serve(ctx: &Ctx, a: &ServeArgs) -> Result<()> {
    let items = match &a.captions {
        Some(p) => pair_bilingual(&load_captions(&ctx.path(p))?)?,
        None => Vec::new(),
    };
    let eval = eval_set(ctx, &a.systems, a.images.as_deref())?;
    let svc = Service::open(ServiceConfig {
        items,
        annotators: a.annotators.clone(),
        eval,
        raters: a.raters.clone(),
        seed: a.seed,
        data_dir: Some(ctx.path(&a.state_dir)),
        snapshot_every: fluentcap_annotate::store::DEFAULT_SNAPSHOT_EVERY,
    })?;
    let progress = svc.progress();
    let static_dir = a.static_dir.as_deref().map(|p| ctx.path(p));
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    println!(
        "serving {} sentences and {} evaluation images on http://{}",
        progress.grading.sentences, progress.eval.images, a.addr
    );
    runtime
        .block_on(fluentcap_annotate::http::serve(
            Arc::new(svc),
            static_dir,
            &a.addr,
        ))
        .with_context(|| format!("serving on {}", a.addr))
}

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use anyhow::{bail, Context};
use serde::Serialize;
use unitsem_core::corpus::{
    build_scored_pairs, ground_truth_similarity, read_corpus, read_features, read_pairs, write_corpus, write_pairs,
    Corpus, FeatureSequence, Split, Utterance,
};
use unitsem_core::distill::{self, FeatureDevSet, StudentConfig, StudentModel, STUDENT_KIND};
use unitsem_core::eval;
use unitsem_core::index::{EmbeddingIndex, Hit};
use unitsem_core::nn::Checkpoint;
use unitsem_core::quantizer::{self, Codebook, UnitSequence};
use unitsem_core::teachers::{
    self, MlmModel, SequenceEncoderConfig, Teacher, TeacherKind, TeacherModelConfig, TokenDevSet, MLM_KIND,
    TEACHER_KIND,
};
use unitsem_core::tokenizer::{self, BpeModel, N_SPECIALS};
use unitsem_core::training::curve_csv;
use unitsem_core::wavembed::{self, TargetMode, WavEmbedConfig, WavEmbedModel};
use unitsem_core::Error;

use crate::run::{sha256_bytes, sha256_file, Run};
use crate::{Common, Sequences};

/// Decoder or teacher sequences keyed by utterance id, wrapped in CLS/SEP.
struct LoadedSequences {
    order: Vec<String>,
    by_id: HashMap<String, Vec<u32>>,
    vocab_size: usize,
    mode: TargetMode,
}

impl LoadedSequences {
    fn ordered(&self) -> Vec<Vec<u32>> {
        self.order.iter().map(|id| self.by_id[id].clone()).collect()
    }
}

fn load_sequences(seqs: &Sequences) -> anyhow::Result<LoadedSequences> {
    let (rows, vocab_size, mode) = match (&seqs.units, &seqs.codebook, &seqs.tokens, &seqs.bpe) {
        (Some(units), Some(cb), None, _) => {
            let k = Codebook::load(cb)?.k();
            let rows = quantizer::read_unit_corpus(units)?;
            let rows: Vec<(String, Vec<u32>)> = rows
                .into_iter()
                .map(|s| {
                    if let Some(&u) = s.units.iter().find(|&&u| u as usize >= k) {
                        return Err(Error::validation("units", format!("{}: unit {u} is outside the codebook (k = {k})", s.source_id)));
                    }
                    Ok((s.source_id, wavembed::unit_target(&s.units)))
                })
                .collect::<Result<_, _>>()?;
            (rows, k + N_SPECIALS as usize, TargetMode::Units)
        }
        (None, _, Some(tokens), Some(bpe)) => {
            let vocab = BpeModel::load(bpe)?.vocab_size();
            let rows = quantizer::read_unit_corpus(tokens)?;
            for s in &rows {
                if let Some(&t) = s.units.iter().find(|&&t| t as usize >= vocab) {
                    return Err(Error::validation("tokens", format!("{}: token {t} is outside the vocabulary ({vocab})", s.source_id)).into());
                }
            }
            (rows.into_iter().map(|s| (s.source_id, s.units)).collect(), vocab, TargetMode::Tokens)
        }
        _ => return Err(Error::validation("sequences", "give --units with --codebook, or --tokens with --bpe").into()),
    };
    let order: Vec<String> = rows.iter().map(|(id, _)| id.clone()).collect();
    Ok(LoadedSequences { order, by_id: rows.into_iter().collect(), vocab_size, mode })
}

fn load_corpus(run: &Run, path: &Path) -> anyhow::Result<Corpus> {
    let corpus = read_corpus(path, run.cfg.corpus.max_frames)?;
    if corpus.is_empty() {
        return Err(Error::invalid(format!("corpus {} has no utterances", path.display())).into());
    }
    Ok(corpus)
}

/// Splits off the trailing `dev_size` items; the training side must stay non-empty.
fn split_dev<T>(items: &[T], dev_size: usize, what: &str) -> anyhow::Result<(usize, usize)> {
    if dev_size >= items.len() {
        return Err(Error::validation(
            &format!("{what}.dev_size"),
            format!("{dev_size} leaves no training data out of {}", items.len()),
        )
        .into());
    }
    Ok((items.len() - dev_size, dev_size))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn gen_corpus(common: &Common) -> anyhow::Result<()> {
    let mut run = Run::start("gen-corpus", common)?;
    let corpus = unitsem_core::corpus::generate_corpus(&run.cfg.corpus)?;
    let manifest = write_corpus(&run.out, &corpus)?;
    let seed = run.cfg.seed;
    let dev = build_scored_pairs(&corpus, run.cfg.pairs.n_dev, seed, Split::Dev)?;
    let test = build_scored_pairs(&corpus, run.cfg.pairs.n_test, seed, Split::Test)?;
    write_pairs(&run.path("pairs.dev.tsv"), &dev)?;
    write_pairs(&run.path("pairs.test.tsv"), &test)?;
    let frames: usize = corpus.utterances.iter().map(|u| u.features.n_frames()).sum();
    run.log(format!("manifest: {}", manifest.display()));
    run.log(format!("utterances: {} frames: {frames}", corpus.len()));
    run.log(format!("pairs: dev {} test {}", dev.len(), test.len()));
    run.finish()
}

#[derive(Serialize)]
struct QuantizeReport {
    k: usize,
    dim: usize,
    trained: bool,
    n_sequences: usize,
    mean_frames: f64,
    mean_units: f64,
    units_used: usize,
}

pub fn quantize(common: &Common, corpus: &Path, codebook: Option<&Path>) -> anyhow::Result<()> {
    let mut run = Run::start("quantize", common)?;
    let corpus = load_corpus(&run, corpus)?;
    let (cb, trained) = match codebook {
        Some(p) => (Codebook::load(p)?, false),
        None => (quantizer::train_corpus_codebook(&corpus, &run.cfg.quantizer.kmeans(run.cfg.seed))?, true),
    };
    let seqs = quantizer::quantize_corpus(&corpus, &cb)?;
    cb.save(&run.path("codebook.semk"))?;
    quantizer::write_unit_corpus(&run.path("units.tsv"), &seqs)?;
    let used: BTreeSet<u32> = seqs.iter().flat_map(|s| s.units.iter().copied()).collect();
    let report = QuantizeReport {
        k: cb.k(),
        dim: cb.dim(),
        trained,
        n_sequences: seqs.len(),
        mean_frames: mean(corpus.utterances.iter().map(|u| u.features.n_frames() as f64)),
        mean_units: mean(seqs.iter().map(|s| s.units.len() as f64)),
        units_used: used.len(),
    };
    run.write_json("report.json", &report)?;
    run.log(format!("k: {} trained: {trained} sequences: {}", cb.k(), seqs.len()));
    run.finish()
}

fn read_text_tsv(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || (i == 0 && line == "id\ttext") {
            continue;
        }
        let Some((id, t)) = line.split_once('\t') else {
            return Err(Error::Line { path: path.display().to_string(), line: i + 1, reason: "expected id<TAB>text".into() }.into());
        };
        if id.is_empty() || !seen.insert(id.to_string()) {
            return Err(Error::Line { path: path.display().to_string(), line: i + 1, reason: format!("empty or duplicate id {id:?}") }.into());
        }
        rows.push((id.to_string(), t.to_string()));
    }
    Ok(rows)
}

pub fn tokenize(common: &Common, units: Option<&Path>, text: Option<&Path>) -> anyhow::Result<()> {
    let mut run = Run::start("tokenize", common)?;
    let rows: Vec<(String, Vec<u32>)> = match (units, text) {
        (Some(u), _) => quantizer::read_unit_corpus(u)?.into_iter().map(|s| (s.source_id, s.units)).collect(),
        (None, Some(t)) => read_text_tsv(t)?.into_iter().map(|(id, s)| (id, tokenizer::text_symbols(&s))).collect(),
        (None, None) => bail!(Error::validation("tokenize", "give --units or --text")),
    };
    let symbols: Vec<Vec<u32>> = rows.iter().map(|(_, s)| s.clone()).collect();
    let bpe = tokenizer::train_bpe(&symbols, run.cfg.tokenizer.vocab_size)?;
    let encoded: Vec<UnitSequence> =
        rows.iter().map(|(id, s)| UnitSequence { source_id: id.clone(), units: bpe.encode(s) }).collect();
    bpe.save(&run.path("bpe.json"))?;
    quantizer::write_unit_corpus(&run.path("tokens.tsv"), &encoded)?;
    let raw: usize = symbols.iter().map(Vec::len).sum();
    let tok: usize = encoded.iter().map(|s| s.units.len().saturating_sub(2)).sum();
    run.log(format!("vocab: {} merges: {}", bpe.vocab_size(), bpe.merges().len()));
    run.log(format!("symbols: {raw} tokens: {tok}"));
    run.finish()
}

pub fn pretrain_mlm(common: &Common, seqs: &Sequences) -> anyhow::Result<()> {
    let mut run = Run::start("pretrain-mlm", common)?;
    let loaded = load_sequences(seqs)?;
    let cfg = &run.cfg.mlm;
    let sc = SequenceEncoderConfig { vocab_size: loaded.vocab_size, encoder: cfg.encoder, pooling: cfg.pooling };
    let mut model = MlmModel::new(sc, run.cfg.seed)?;
    let report = teachers::mlm_pretrain(&mut model, &loaded.ordered(), &cfg.train)?;
    model.to_checkpoint().save(&run.path("mlm.semm"))?;
    let mut csv = String::from("step,loss\n");
    for (s, l) in &report.curve {
        csv.push_str(&format!("{s},{l:.6}\n"));
    }
    run.write("curve.csv", csv)?;
    run.write_json("report.json", &report)?;
    for w in &report.warnings {
        run.log(format!("warning: {w}"));
    }
    if let Some((s, l)) = report.curve.last() {
        run.log(format!("final loss {l:.4} at step {s}"));
    }
    run.finish()
}

pub fn train_wavembed(common: &Common, corpus: &Path, seqs: &Sequences) -> anyhow::Result<()> {
    let mut run = Run::start("train-wavembed", common)?;
    let corpus = load_corpus(&run, corpus)?;
    let loaded = load_sequences(seqs)?;
    let sec = &run.cfg.wavembed;
    let mut cfg = WavEmbedConfig::new(corpus.feature_dim().unwrap_or(0), loaded.vocab_size);
    cfg.target_mode = loaded.mode;
    cfg.encoder = sec.encoder;
    cfg.decoder = sec.decoder;
    cfg.conditioning = sec.conditioning;
    cfg.max_target_len = sec.max_target_len;
    cfg.init_seed = run.cfg.seed;
    let mut model = WavEmbedModel::new(cfg)?;
    let exs = wavembed::examples(&corpus.utterances, &loaded.by_id)?;
    let (n_train, _) = split_dev(&exs, sec.dev_size, "wavembed")?;
    let (train, dev) = exs.split_at(n_train);
    let report = wavembed::train(&mut model, train, dev, &sec.run)?;
    model.to_checkpoint().save(&run.path("wavembed.semm"))?;
    run.write("curve.csv", curve_csv(&report.curve, "dev_loss"))?;
    run.write_json("report.json", &report)?;
    run.log(format!("train: {} dev: {}", train.len(), dev.len()));
    run.log(format!("dev loss {:.4} -> {:.4} (best at step {})", report.init_dev_loss, report.best_dev_loss, report.best_step));
    run.finish()
}

pub fn train_teacher(common: &Common, seqs: &Sequences, pairs: Option<&Path>, mlm: Option<&Path>) -> anyhow::Result<()> {
    let mut run = Run::start("train-teacher", common)?;
    let loaded = load_sequences(seqs)?;
    let sec = run.cfg.teacher.clone();
    let kind = sec.train.kind;
    let mc = TeacherModelConfig {
        kind,
        sequence: SequenceEncoderConfig { vocab_size: loaded.vocab_size, encoder: sec.encoder, pooling: sec.pooling },
        decoder: (kind == TeacherKind::Tsdae).then_some(sec.decoder),
        init_seed: run.cfg.seed,
    };
    let mut teacher = Teacher::new(mc)?;
    if let Some(p) = mlm {
        let ck = Checkpoint::load(p)?;
        ck.expect_kind(MLM_KIND)?;
        let copied = teacher.init_from_mlm(&MlmModel::from_checkpoint(&ck)?)?;
        run.log(format!("initialised {copied} tensors from {}", p.display()));
    }
    let dev_pairs = pairs.map(|p| read_pairs(p, Split::Dev)).transpose()?;
    let dev_set = dev_pairs.as_ref().map(|p| TokenDevSet { pairs: p, tokens: &loaded.by_id });
    let all = loaded.ordered();
    let (report, dev_column) = match kind {
        TeacherKind::Tsdae => {
            let (n_train, _) = split_dev(&all, sec.dev_size, "teacher")?;
            let (train, dev) = all.split_at(n_train);
            (teachers::train_tsdae(&mut teacher, train, dev, &sec.train, dev_set.as_ref())?, "dev_loss")
        }
        TeacherKind::Simcse => {
            let dev = dev_set.ok_or_else(|| Error::validation("pairs", "contrastive teachers need --pairs for dev Spearman"))?;
            (teachers::train_simcse(&mut teacher, &all, &sec.train, &dev)?, "dev_spearman")
        }
    };
    teacher.to_checkpoint().save(&run.path("teacher.semm"))?;
    run.write("curve.csv", curve_csv(&report.curve, dev_column))?;
    run.write_json("report.json", &report)?;
    run.log(format!("best {dev_column} {:.4} at step {} of {}", report.best, report.best_step, report.steps));
    if let Some(s) = report.dev_spearman {
        run.log(format!("dev spearman {s:.4}"));
    }
    run.finish()
}

#[derive(Serialize)]
struct DistillOutput<'a> {
    teacher_sha256_before: String,
    teacher_sha256_after: String,
    teacher_unchanged: bool,
    #[serde(flatten)]
    report: &'a distill::DistillReport,
}

pub fn distill(common: &Common, corpus: &Path, teacher: &Path, seqs: &Sequences, pairs: &Path) -> anyhow::Result<()> {
    let mut run = Run::start("distill", common)?;
    let corpus = load_corpus(&run, corpus)?;
    let ck = Checkpoint::load(teacher)?;
    ck.expect_kind(TEACHER_KIND)?;
    let teacher = Teacher::from_checkpoint(&ck)?;
    let before = sha256_bytes(&teacher.to_checkpoint().to_bytes());
    let loaded = load_sequences(seqs)?;
    if loaded.vocab_size != teacher.config.sequence.vocab_size {
        return Err(Error::DimMismatch { expected: teacher.config.sequence.vocab_size, got: loaded.vocab_size }.into());
    }
    let sec = &run.cfg.distill;
    let cfg = StudentConfig {
        feature_dim: corpus.feature_dim().unwrap_or(0),
        teacher_dim: teacher.dim(),
        encoder: sec.encoder,
        pooling: sec.pooling,
        init_seed: run.cfg.seed,
    };
    let mut student = StudentModel::new(cfg)?;
    let exs = wavembed::examples(&corpus.utterances, &loaded.by_id)?;
    let (n_train, _) = split_dev(&exs, sec.dev_size, "distill")?;
    let (train, held_out) = exs.split_at(n_train);
    let dev_pairs = read_pairs(pairs, Split::Dev)?;
    dev_pairs.check_ids(&corpus)?;
    let features: BTreeMap<String, &FeatureSequence> =
        corpus.utterances.iter().map(|u| (u.id.clone(), &u.features)).collect();
    let dev = FeatureDevSet { pairs: &dev_pairs, features: &features };
    let report = distill::distill_train(&mut student, &teacher, train, held_out, &dev, &sec.train)?;
    let after = sha256_bytes(&teacher.to_checkpoint().to_bytes());
    student.to_checkpoint().save(&run.path("student.semm"))?;
    run.write("curve.csv", curve_csv(&report.curve, "dev_spearman"))?;
    let out = DistillOutput { teacher_unchanged: before == after, teacher_sha256_before: before, teacher_sha256_after: after, report: &report };
    run.write_json("report.json", &out)?;
    run.log(format!("train: {} held out: {}", train.len(), held_out.len()));
    run.log(format!("best dev spearman {:.4} at step {}", report.best_dev_spearman, report.best_step));
    run.log(format!("teacher unchanged: {}", out.teacher_unchanged));
    run.finish()
}

/// Any model that maps an utterance to one vector.
enum Embedder {
    WavEmbed(WavEmbedModel),
    Student(StudentModel),
    Teacher(Teacher),
}

impl Embedder {
    fn load(path: &Path) -> anyhow::Result<Embedder> {
        let ck = Checkpoint::load(path)?;
        Ok(match ck.kind.as_str() {
            wavembed::CHECKPOINT_KIND => Embedder::WavEmbed(WavEmbedModel::from_checkpoint(&ck)?),
            STUDENT_KIND => Embedder::Student(StudentModel::from_checkpoint(&ck)?),
            TEACHER_KIND => Embedder::Teacher(Teacher::from_checkpoint(&ck)?),
            other => bail!(Error::Unsupported(format!("checkpoint kind {other:?} does not produce embeddings"))),
        })
    }

    fn kind(&self) -> &'static str {
        match self {
            Embedder::WavEmbed(_) => wavembed::CHECKPOINT_KIND,
            Embedder::Student(_) => STUDENT_KIND,
            Embedder::Teacher(_) => TEACHER_KIND,
        }
    }

    fn embed_features(&self, fs: &FeatureSequence) -> anyhow::Result<Vec<f64>> {
        Ok(match self {
            Embedder::WavEmbed(m) => m.embed(fs)?,
            Embedder::Student(m) => m.embed(fs)?,
            Embedder::Teacher(_) => bail!(Error::Unsupported("a sequence teacher cannot embed feature files".into())),
        })
    }

    fn embed(&self, u: &Utterance, tokens: Option<&HashMap<String, Vec<u32>>>) -> anyhow::Result<Vec<f64>> {
        match self {
            Embedder::Teacher(t) => {
                let tokens = tokens.ok_or_else(|| Error::validation("sequences", "teacher models need --units or --tokens"))?;
                let seq = tokens.get(&u.id).ok_or_else(|| Error::NotFound(format!("sequence for utterance {}", u.id)))?;
                Ok(t.embed(seq)?)
            }
            _ => self.embed_features(&u.features).with_context(|| format!("utterance {}", u.id)),
        }
    }
}

#[derive(Serialize)]
struct EvaluateOutput {
    #[serde(flatten)]
    report: eval::EvalReport,
    model_kind: &'static str,
    model_sha256: String,
    permutation: eval::PermutationTest,
    recall_queries: usize,
}

/// Recall setup: each pair-set id queries an index of every other corpus
/// utterance; its target is the indexed utterance with the highest
/// ground-truth similarity (lowest id on ties).
fn recall_targets(corpus: &Corpus, query_ids: &BTreeSet<&str>) -> anyhow::Result<Option<Vec<(String, String)>>> {
    if !corpus.has_ground_truth() {
        return Ok(None);
    }
    let pool: Vec<&Utterance> = corpus.utterances.iter().filter(|u| !query_ids.contains(u.id.as_str())).collect();
    if pool.is_empty() {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(query_ids.len());
    for &q in query_ids {
        let qu = corpus.get(q).ok_or_else(|| Error::NotFound(format!("pair id {q} is not in the corpus")))?;
        let mut best: Option<(f64, &str)> = None;
        for u in &pool {
            let s = ground_truth_similarity(qu, u)?;
            let better = match best {
                None => true,
                Some((b, id)) => s > b || (s == b && u.id.as_str() < id),
            };
            if better {
                best = Some((s, &u.id));
            }
        }
        out.push((q.to_string(), best.expect("pool is non-empty").1.to_string()));
    }
    Ok(Some(out))
}

pub fn evaluate(common: &Common, corpus: &Path, model: &Path, pairs: &Path, split: Split, seqs: &Sequences) -> anyhow::Result<()> {
    let mut run = Run::start("evaluate", common)?;
    let corpus = load_corpus(&run, corpus)?;
    let embedder = Embedder::load(model)?;
    let sha = sha256_file(model)?;
    let tokens = match embedder {
        Embedder::Teacher(_) => Some(load_sequences(seqs)?.by_id),
        _ => None,
    };
    let pairs = read_pairs(pairs, split)?;
    pairs.check_ids(&corpus)?;
    let mut embeddings: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for u in &corpus.utterances {
        embeddings.insert(u.id.clone(), embedder.embed(u, tokens.as_ref())?);
    }
    let renderings: BTreeMap<String, Vec<Vec<f64>>> =
        pairs.ids().into_iter().map(|id| (id.to_string(), vec![embeddings[id].clone()])).collect();
    let model_id = format!("{}:{}", embedder.kind(), &sha[..16]);
    let seed = run.cfg.seed;
    let mut evaluation = eval::evaluate(&renderings, &pairs, &model_id, seed)?;
    let predicted: Vec<f64> = evaluation.predictions.iter().map(|p| p.predicted).collect();
    let permutation = eval::permutation_test(&predicted, &pairs.scores(), run.cfg.eval.permutations, seed)?;

    let query_ids: BTreeSet<&str> = pairs.ids().into_iter().collect();
    let mut recall_queries = 0;
    if let Some(targets) = recall_targets(&corpus, &query_ids)? {
        let items: Vec<(String, Vec<f64>)> = corpus
            .utterances
            .iter()
            .filter(|u| !query_ids.contains(u.id.as_str()))
            .map(|u| (u.id.clone(), embeddings[&u.id].clone()))
            .collect();
        let index = EmbeddingIndex::build(items)?;
        let ks: Vec<usize> = run.cfg.eval.recall_ks.iter().copied().filter(|&k| k <= index.len()).collect();
        if !ks.is_empty() {
            let queries: Vec<Vec<f64>> = targets.iter().map(|(q, _)| embeddings[q].clone()).collect();
            let wanted: Vec<String> = targets.into_iter().map(|(_, t)| t).collect();
            evaluation.report.recall_at_k = eval::recall_at_k(&queries, &wanted, &index, &ks)?;
            recall_queries = queries.len();
        }
    }

    run.write("predictions.csv", eval::predictions_csv(&evaluation.predictions))?;
    run.write("plot.tsv", eval::plot_tsv(std::slice::from_ref(&evaluation.report)))?;
    run.log(format!("model: {model_id}"));
    run.log(format!("spearman {:.4} over {} pairs, permutation p {:.4}", evaluation.report.spearman, pairs.len(), permutation.p_value));
    let out = EvaluateOutput { report: evaluation.report, model_kind: embedder.kind(), model_sha256: sha, permutation, recall_queries };
    run.write_json("report.json", &out)?;
    run.finish()
}

#[derive(Serialize)]
struct IndexMeta {
    model_sha256: String,
    model_kind: &'static str,
    n: usize,
    dim: usize,
}

pub fn build_index(common: &Common, corpus: &Path, model: &Path) -> anyhow::Result<()> {
    let mut run = Run::start("build-index", common)?;
    let corpus = load_corpus(&run, corpus)?;
    let embedder = Embedder::load(model)?;
    if matches!(embedder, Embedder::Teacher(_)) {
        bail!(Error::Unsupported("indexes are built from feature models (wavembed or student)".into()));
    }
    let mut items = Vec::with_capacity(corpus.len());
    for u in &corpus.utterances {
        items.push((u.id.clone(), embedder.embed(u, None)?));
    }
    let index = EmbeddingIndex::build(items)?;
    let path = run.path("index.semi");
    index.save(&path)?;
    let meta = IndexMeta { model_sha256: sha256_file(model)?, model_kind: embedder.kind(), n: index.len(), dim: index.dim() };
    run.write_json("index.semi.meta.json", &meta)?;
    run.log(format!("indexed {} utterances, dim {}", index.len(), index.dim()));
    run.finish()
}

#[derive(Serialize)]
struct SearchHit {
    rank: usize,
    id: String,
    cosine: f64,
}

#[derive(Serialize)]
struct SearchOutput {
    query: String,
    k: usize,
    hits: Vec<SearchHit>,
}

pub fn search(
    common: &Common,
    index: &Path,
    query_id: Option<&str>,
    query_features: Option<&Path>,
    model: Option<&Path>,
    k: usize,
) -> anyhow::Result<()> {
    let mut run = Run::start("search", common)?;
    let idx = EmbeddingIndex::load(index)?;
    let (query, hits): (String, Vec<Hit>) = match (query_id, query_features, model) {
        (Some(id), _, _) => (id.to_string(), idx.search_id(id, k)?),
        (None, Some(f), Some(m)) => {
            let fs = read_features(f)?;
            let v = Embedder::load(m)?.embed_features(&fs)?;
            (f.display().to_string(), idx.search(&v, k)?)
        }
        _ => bail!(Error::validation("search", "give --query-id, or --query-features with --model")),
    };
    let out = SearchOutput {
        query,
        k,
        hits: hits.into_iter().enumerate().map(|(i, h)| SearchHit { rank: i + 1, id: h.id, cosine: h.cosine }).collect(),
    };
    run.write_json("search.json", &out)?;
    println!("{}", serde_json::to_string(&out)?);
    run.log(format!("query {} k {k}", out.query));
    run.finish()
}

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use selfret::corpus::{corpus_stats, ingest_corpus_file, CorpusStore};
use selfret::engine::{open_lm, AnswerResult};
use selfret::eval::{benchmark, evaluate, parse_answers, RunFile};
use selfret::index::TrieIndex;
use selfret::lm::NGramLm;
use selfret::qrels::Qrels;
use selfret::rank::{write_run, ScoredPassage};
use selfret::tokenization::Tokenizer;
use selfret::traindata::{
    build_stage2_mixture, gen_indexing_examples, gen_rag_examples, gen_reranking_examples,
    gen_retrieval_examples, write_jsonl, TrainingExample,
};
use selfret::{Config, Engine};
use selfret_service::ServiceConfig;

use crate::*;

pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.mixture.seed = seed;
    }
    match cli.command {
        Command::Ingest(a) => ingest(a, config),
        Command::BuildIndex(a) => build_index(a, config),
        Command::TrainLm(a) => train_lm(a, config),
        Command::Retrieve(a) => retrieve(a, config),
        Command::GenTrainData(a) => gen_train_data(a, config),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a, config),
        Command::Serve(a) => serve(a, config),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}")?;
    Ok(())
}

fn ingest(a: IngestArgs, mut config: Config) -> Result<()> {
    if let Some(n) = a.max_words {
        config.corpus.max_words = n;
    }
    let store = ingest_corpus_file(&a.input, config.corpus.max_words)?;
    store.save(&a.out)?;
    print_json(&corpus_stats(&store))
}

fn build_index(a: BuildIndexArgs, config: Config) -> Result<()> {
    let store = CorpusStore::load(&a.store)?;
    let mut texts = config.vocab_texts();
    for path in &a.extra_text {
        texts.push(std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?);
    }
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let tok = Tokenizer::build(&store, &refs);
    let index = TrieIndex::build(&store, &tok)?;
    index.save(&a.out)?;
    if let Some(path) = &a.vocab_out {
        tok.save(path)?;
    }
    print_json(&index.stats())
}

fn train_lm(a: TrainLmArgs, mut config: Config) -> Result<()> {
    if let Some(order) = a.order {
        config.lm.order = order;
    }
    if let Some(k) = a.k {
        config.lm.k = k;
    }
    let store = CorpusStore::load(&a.store)?;
    let index = TrieIndex::load(&a.index)?;
    let mut texts: Vec<String> = store.texts().into_iter().map(str::to_string).collect();
    if let Some(path) = &a.train_data {
        let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
        for line in BufReader::new(f).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: TrainingExample = serde_json::from_str(&line)
                .with_context(|| format!("bad training example in {}", path.display()))?;
            texts.push(format!("{} {}", ex.input, ex.target));
        }
    }
    let lm = NGramLm::train(&texts, index.tokenizer(), config.lm.order, config.lm.k)?;
    lm.save(&a.out)?;
    eprintln!(
        "trained order-{} model over {} texts, vocabulary {}",
        lm.order(),
        texts.len(),
        index.tokenizer().vocab_size()
    );
    Ok(())
}

/// Reads `query_id \t query [\t ...]` lines. Repeated ids keep their first
/// text, so qrels files can be used directly.
fn read_queries(path: &Path) -> Result<Vec<(String, String)>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut out: Vec<(String, String)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(id), Some(text)) = (fields.next(), fields.next()) else {
            return Err(selfret::Error::Parse {
                line: i + 1,
                message: "expected query_id \\t query".into(),
            })
            .with_context(|| format!("in {}", path.display()));
        };
        if seen.insert(id.to_string()) {
            out.push((id.to_string(), text.to_string()));
        }
    }
    Ok(out)
}

fn open_engine(m: &ModelArgs, config: Config) -> Result<Engine> {
    let index = TrieIndex::load(&m.index)?;
    let lm = open_lm(
        &m.lm,
        index.tokenizer().vocab_size(),
        Duration::from_millis(config.lm.timeout_ms),
    )?;
    Ok(Engine::new(Arc::new(index), lm, config)?)
}

/// Runs `f` over `items` on up to `threads` workers, keeping input order.
fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> selfret::Result<U> + Sync,
) -> selfret::Result<Vec<U>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let mut slots: Vec<Option<selfret::Result<U>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let f = &f;
        let workers: Vec<_> = (0..threads)
            .map(|w| {
                scope.spawn(move || {
                    (w..items.len())
                        .step_by(threads)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for w in workers {
            for (i, r) in w.join().expect("retrieval worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every query handled")).collect()
}

fn retrieve(a: RetrieveArgs, mut config: Config) -> Result<()> {
    let d = &mut config.decode;
    if let Some(n) = a.titles {
        d.title_beam = n;
    }
    if let Some(n) = a.passages {
        d.passage_beam = n;
    }
    if let Some(t) = a.tau {
        config.rank.tau = t;
    }
    if let Some(t) = a.delta {
        config.rank.delta = t;
    }
    config.validate()?;
    if a.k == Some(0) {
        return Err(Usage("--k must be >= 1".into()).into());
    }
    let queries = match (&a.query, &a.queries) {
        (Some(q), None) => vec![(a.query_id.clone(), q.clone())],
        (None, Some(path)) => read_queries(path)?,
        _ => return Err(Usage("give --query or --queries".into()).into()),
    };
    let engine = open_engine(&a.model, config)?;
    let want_answers = a.answers_out.is_some();
    let outcomes = parallel_map(&queries, a.threads, |(_, q)| {
        if want_answers {
            engine.answer(q).map(|r| (r.results.clone(), Some(r)))
        } else {
            engine.search(q).map(|r| (r, None))
        }
    })?;

    // Output is ordered by query id whatever the thread count.
    let mut by_id: BTreeMap<&str, (&str, Vec<ScoredPassage>, Option<AnswerResult>)> = BTreeMap::new();
    for ((id, q), (mut results, answer)) in queries.iter().zip(outcomes) {
        if let Some(k) = a.k {
            results.truncate(k);
        }
        by_id.insert(id, (q, results, answer));
    }

    let mut run: Box<dyn Write> = match &a.out {
        Some(path) => Box::new(create(path)?),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    for (id, (_, results, _)) in &by_id {
        write_run(&mut run, id, results, &a.tag)?;
    }
    run.flush()?;

    if let Some(path) = &a.json_out {
        let mut w = create(path)?;
        for (id, (q, results, _)) in &by_id {
            let line = serde_json::json!({"query_id": id, "query": q, "results": results});
            serde_json::to_writer(&mut w, &line)?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    if let Some(path) = &a.answers_out {
        let mut w = create(path)?;
        for (id, (_, _, answer)) in &by_id {
            let answer = answer.as_ref().expect("answers requested");
            writeln!(w, "{id}\t{}", answer.answer.answer)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn gen_train_data(a: GenTrainDataArgs, config: Config) -> Result<()> {
    let store = CorpusStore::load(&a.store)?;
    let qrels = match (&a.qrels, a.kind) {
        (Some(path), _) => Some(Qrels::load(path)?),
        (None, TrainKind::Indexing) => None,
        (None, _) => return Err(Usage("--qrels is required for this --kind".into()).into()),
    };
    let (prompts, rank, mix) = (&config.prompts, &config.rank, &config.mixture);
    let mut warnings = Vec::new();
    let mut collect = |g: selfret::traindata::Generated| {
        warnings.extend(g.warnings);
        g.examples
    };
    let examples = match (a.kind, &qrels) {
        (TrainKind::Indexing, _) => gen_indexing_examples(&store),
        (TrainKind::Retrieval, Some(q)) => collect(gen_retrieval_examples(q, &store, prompts)),
        (TrainKind::Reranking, Some(q)) => collect(gen_reranking_examples(q, &store, prompts, rank, mix)),
        (TrainKind::Rag, Some(q)) => collect(gen_rag_examples(q, &store, prompts, rank)),
        (TrainKind::Mixture, Some(q)) => {
            let retrieval = collect(gen_retrieval_examples(q, &store, prompts));
            let reranking = collect(gen_reranking_examples(q, &store, prompts, rank, mix));
            let rag = collect(gen_rag_examples(q, &store, prompts, rank));
            build_stage2_mixture(&gen_indexing_examples(&store), &retrieval, &reranking, &rag, mix)
        }
        (_, None) => unreachable!("qrels checked above"),
    };
    let mut seen = std::collections::HashSet::new();
    for w in warnings.iter().filter(|w| seen.insert(w.as_str())) {
        eprintln!("warning: {w}");
    }
    let mut w = create(&a.out)?;
    write_jsonl(&mut w, &examples)?;
    w.flush()?;
    eprintln!("wrote {} examples to {}", examples.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let run = if a.run.as_os_str() == "-" {
        RunFile::parse(std::io::stdin().lock())?
    } else {
        RunFile::load(&a.run)?
    };
    let qrels = Qrels::load(&a.qrels)?;
    let answers = match &a.answers {
        Some(path) => {
            let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
            Some(parse_answers(BufReader::new(f))?)
        }
        None => None,
    };
    let report = evaluate(&run, &qrels, a.level, answers.as_ref());
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(path) = &a.json_out {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &report)?;
        writeln!(w)?;
        w.flush()?;
    }
    match a.format {
        ReportFormat::Table => print!("{}", report.table()),
        ReportFormat::Json => print_json(&report)?,
    }
    Ok(())
}

fn bench(a: BenchArgs, config: Config) -> Result<()> {
    if a.beams.contains(&0) {
        return Err(Usage("beam sizes must be >= 1".into()).into());
    }
    let queries: Vec<String> = read_queries(&a.queries)?.into_iter().map(|(_, q)| q).collect();
    let engine = open_engine(&a.model, config)?;
    let c = &engine.config;
    let report = benchmark(&engine.index, &*engine.lm, &c.prompts, &c.decode, &queries, &a.beams, a.threads)?;
    match &a.out {
        Some(path) => {
            let mut w = create(path)?;
            serde_json::to_writer_pretty(&mut w, &report)?;
            writeln!(w)?;
            w.flush()?;
        }
        None => print_json(&report)?,
    }
    Ok(())
}

fn serve(a: ServeArgs, config: Config) -> Result<()> {
    // Fail fast on a missing index; everything else loads behind the socket.
    std::fs::metadata(&a.model.index).with_context(|| format!("cannot read {}", a.model.index.display()))?;
    let listen = a.listen.unwrap_or_else(|| config.service.listen.clone());
    let addr: std::net::SocketAddr = listen
        .parse()
        .map_err(|_| Usage(format!("bad listen address {listen:?}")))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on {}", listener.local_addr()?);
        let cfg = ServiceConfig {
            listen: addr,
            index_path: a.model.index,
            lm: a.model.lm,
            config,
        };
        selfret_service::serve_on(listener, cfg).await?;
        Ok(())
    })
}

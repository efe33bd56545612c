use std::path::Path;
use std::sync::Arc;

use vqlogits::bench::{report_csv, sweep_report, BenchGrid};
use vqlogits::data::{split_corpus, BatchStream, Split, Vocabulary};
use vqlogits::heads::{HeadSpec, VocabMapping};
use vqlogits::inspect::{cluster_members, cluster_stats, clusters_csv, clusters_text};
use vqlogits::model::LanguageModel;
use vqlogits::quantize::{
    convert_to_vq, init_mapping, init_with_strategy, kmeans_restarts, load_mapping, output_embeddings, save_mapping,
    MappingInputs, MappingStrategy,
};
use vqlogits::train::{
    apply_finetune_scope, evaluate_ppl, metrics_csv, train_loop, EvalResult, ModelCheckpoint, TrainOutputs,
};

use crate::config::{resolve_corpus, HeadChoice, InitChoice, RunConfig};
use crate::{BenchArgs, CliError, EvalArgs, InspectArgs, QuantizeArgs, TrainArgs};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn read_corpus(path: &Path) -> Result<String, CliError> {
    if !path.is_file() {
        return Err(usage(format!("corpus {} does not exist", path.display())));
    }
    std::fs::read_to_string(path)
        .map_err(|e| vqlogits::Error::Input(format!("cannot read corpus {}: {e}", path.display())).into())
}

fn split_ids(vocab: &Vocabulary, text: &str, split: Split) -> Arc<Vec<usize>> {
    Arc::new(vocab.encode(split_corpus(text, split)))
}

fn apply_overrides(cfg: &mut RunConfig, a: &TrainArgs) {
    macro_rules! set {
        ($($src:ident => $($dst:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$src.clone() { cfg.$($dst).+ = v; })*
        };
    }
    set!(
        head => head.kind,
        k => head.k,
        d_rank => head.rank,
        init => head.init,
        mapping => head.mapping,
        codebook_trainable => head.codebook_trainable,
        kmeans_iters => head.kmeans_iters,
        kmeans_restarts => head.kmeans_restarts,
        scope => train.finetune_scope,
        steps => train.total_steps,
        warmup => train.warmup_steps,
        lr => train.lr_peak,
        lr_min => train.lr_min,
        batch_size => train.batch_size,
        seq_len => train.seq_len,
        eval_interval => train.eval_interval,
        eval_batches => train.eval_batches,
        layers => model.n_layers,
        d_model => model.d_model,
        d_ffn => model.d_ffn,
        n_heads => model.n_heads,
        max_seq => model.max_seq,
        dropout => model.dropout,
        tie_mode => model.tie_mode,
        max_vocab => data.max_vocab,
        min_freq => data.min_freq,
    );
    if a.corpus.is_some() {
        cfg.data.corpus = a.corpus.clone();
    }
    if a.from_checkpoint.is_some() {
        cfg.head.from_checkpoint = a.from_checkpoint.clone();
    }
    if a.no_throughput {
        cfg.train.log_throughput = false;
    }
    if cfg.train.warmup_steps > cfg.train.total_steps {
        cfg.train.warmup_steps = cfg.train.total_steps;
    }
}

fn head_spec(cfg: &RunConfig, vocab_size: usize) -> HeadSpec {
    match cfg.head.kind {
        HeadChoice::Full => HeadSpec::Full,
        HeadChoice::Vq => HeadSpec::Vq {
            k: cfg.head.k,
            codebook_trainable: cfg.head.codebook_trainable,
        },
        HeadChoice::Lowrank => HeadSpec::Lowrank { rank: cfg.head.rank },
        HeadChoice::Adaptive => HeadSpec::default_adaptive(vocab_size),
    }
}

fn is_kmeans(m: MappingStrategy) -> bool {
    matches!(m, MappingStrategy::KmeansOutput | MappingStrategy::KmeansInput)
}

/// Quantizes `source` with the configured strategy. k-means on the output
/// embeddings honours the restart count.
fn quantized_from(
    source: &LanguageModel<f32>,
    strategy: MappingStrategy,
    k: usize,
    trainable: bool,
    iters: usize,
    restarts: usize,
    freqs: &[u64],
    seed: u64,
) -> Result<LanguageModel<f32>, CliError> {
    if strategy == MappingStrategy::KmeansOutput {
        let e_out = output_embeddings(source)?;
        let km = kmeans_restarts(e_out, k, iters, restarts.max(1), seed)?;
        log::info!(
            "k-means K={k}: distortion {:.6} after {} iterations",
            km.distortion(),
            km.iterations_run
        );
        let mapping = VocabMapping::new(km.assignments.clone(), k)?;
        return Ok(convert_to_vq(source, km.centroids.cast(), mapping, trainable)?);
    }
    Ok(init_with_strategy(source, strategy, k, Some(freqs), trainable, seed)?)
}

fn check_combinations(cfg: &RunConfig) -> Result<(), CliError> {
    let from_ckpt = cfg.head.from_checkpoint.is_some();
    if cfg.head.kind == HeadChoice::Vq {
        match cfg.head.init {
            InitChoice::OptionA if !from_ckpt => {
                return Err(usage(
                    "--init option_a clusters a trained model's output embeddings; pass --from-checkpoint with a full-head checkpoint, or use --init option_b",
                ))
            }
            InitChoice::OptionB if is_kmeans(cfg.head.mapping) => {
                return Err(usage(
                    "--init option_b trains from scratch and has no embeddings to cluster; use --mapping freq_binning, contiguous_blocks or random",
                ))
            }
            InitChoice::OptionB if from_ckpt => {
                return Err(usage("--init option_b trains from scratch; drop --from-checkpoint"));
            }
            _ => {}
        }
    }
    if cfg.train.seq_len > cfg.model.max_seq && !from_ckpt {
        return Err(usage(format!(
            "--seq-len {} exceeds the model's max_seq {}",
            cfg.train.seq_len, cfg.model.max_seq
        )));
    }
    Ok(())
}

pub fn train(mut cfg: RunConfig, a: &TrainArgs) -> Result<(), CliError> {
    apply_overrides(&mut cfg, a);
    cfg.train.seed = cfg.seed;
    let corpus_path = cfg.corpus_path()?;
    cfg.data.corpus = Some(corpus_path.clone());
    check_combinations(&cfg)?;
    let text = read_corpus(&corpus_path)?;

    let source = match &cfg.head.from_checkpoint {
        Some(p) => Some(ModelCheckpoint::load(p)?),
        None => None,
    };
    let vocab = match &source {
        Some(ck) => ck.vocab.clone().ok_or_else(|| {
            vqlogits::Error::Config("source checkpoint carries no vocabulary".into())
        })?,
        None => Vocabulary::build(split_corpus(&text, Split::Train), cfg.data.max_vocab, cfg.data.min_freq)?,
    };
    let mut model = match source {
        None => {
            cfg.model.vocab_size = vocab.len();
            let spec = head_spec(&cfg, vocab.len());
            let mapping = match spec {
                HeadSpec::Vq { k, .. } => Some(init_mapping::<f32>(
                    cfg.head.mapping,
                    &MappingInputs {
                        vocab_size: vocab.len(),
                        k,
                        freqs: Some(vocab.freqs()),
                        output_embeddings: None,
                        input_embeddings: None,
                        kmeans_iters: cfg.head.kmeans_iters,
                        seed: cfg.seed,
                    },
                )?),
                _ => None,
            };
            LanguageModel::<f32>::new(cfg.model.clone(), &spec, mapping, cfg.seed)?
        }
        Some(ck) => {
            let src = ck.model;
            let spec = head_spec(&cfg, vocab.len());
            let same_kind = src.head_spec().name() == spec.name();
            if same_kind {
                src
            } else if cfg.head.kind == HeadChoice::Vq {
                if src.head_spec() != HeadSpec::Full {
                    return Err(usage("--init option_a needs a full-head source checkpoint"));
                }
                quantized_from(
                    &src,
                    cfg.head.mapping,
                    cfg.head.k,
                    cfg.head.codebook_trainable,
                    cfg.head.kmeans_iters,
                    cfg.head.kmeans_restarts,
                    vocab.freqs(),
                    cfg.seed,
                )?
            } else {
                let mut fresh = LanguageModel::<f32>::new(src.config.clone(), &spec, None, cfg.seed)?;
                let copied = fresh.copy_matching_params(&src);
                log::info!("copied {copied} tensors from the source checkpoint");
                fresh
            }
        }
    };
    cfg.model = model.config.clone();
    if cfg.train.seq_len > cfg.model.max_seq {
        return Err(usage(format!(
            "--seq-len {} exceeds the model's max_seq {}",
            cfg.train.seq_len, cfg.model.max_seq
        )));
    }
    let trainable = apply_finetune_scope(&mut model, cfg.train.finetune_scope)?;
    log::info!(
        "{} head, {} parameters, {trainable} trainable",
        model.head_spec().name(),
        model.params.numel()
    );

    let out = &a.out;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.resolved"), cfg.to_toml())?;
    vocab.save(&out.join("vocab.txt"))?;

    let (b, s) = (cfg.train.batch_size, cfg.train.seq_len);
    let mut train_stream = BatchStream::new(split_ids(&vocab, &text, Split::Train), b, s, Some(cfg.seed))?;
    let mut valid_stream = BatchStream::new(split_ids(&vocab, &text, Split::Valid), b, s, None)?;
    let ckpt_path = out.join("model.ckpt");
    let outputs = TrainOutputs {
        checkpoint: Some(&ckpt_path),
        vocab: Some(&vocab),
    };
    let rows = train_loop(&mut model, &cfg.train, &mut train_stream, Some(&mut valid_stream), &outputs)?;
    ModelCheckpoint::from_model(&model, Some(vocab.clone())).save(&ckpt_path)?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(&rows))?;
    if let Some(map) = model.head.mapping() {
        save_mapping(map, &out.join("mapping.vqmap"))?;
    }
    let r = evaluate_ppl(&model, &mut valid_stream, cfg.train.eval_batches)?;
    println!("split=valid ppl={:.6} tokens={}", r.ppl, r.tokens);
    Ok(())
}

fn eval_checkpoint(
    ck: &ModelCheckpoint,
    text: &str,
    split: Split,
    batch: usize,
    seq: Option<usize>,
    max_batches: usize,
) -> Result<EvalResult, CliError> {
    let vocab = ck
        .vocab
        .as_ref()
        .ok_or_else(|| vqlogits::Error::Config("checkpoint carries no vocabulary".into()))?;
    check_vocab_matches(vocab, text)?;
    let seq = seq.unwrap_or(ck.model.config.max_seq);
    if seq > ck.model.config.max_seq {
        return Err(usage(format!("--seq-len {seq} exceeds the model's max_seq {}", ck.model.config.max_seq)));
    }
    let mut stream = BatchStream::new(split_ids(vocab, text, split), batch, seq, None)?;
    Ok(evaluate_ppl(&ck.model, &mut stream, max_batches)?)
}

/// The checkpoint's token counts must be those of this corpus's training
/// split; otherwise it was trained on a different corpus.
fn check_vocab_matches(vocab: &Vocabulary, text: &str) -> Result<(), CliError> {
    let mut counts = vec![0u64; vocab.len()];
    for id in vocab.encode(split_corpus(text, Split::Train)) {
        counts[id] += 1;
    }
    if counts != vocab.freqs() {
        return Err(vqlogits::Error::Config(
            "checkpoint vocabulary does not match this corpus (token counts differ)".into(),
        )
        .into());
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<(), CliError> {
    let ck = ModelCheckpoint::load(&a.checkpoint)?;
    let corpus = resolve_corpus(a.corpus.as_deref().or(cfg.data.corpus.as_deref()))?;
    let text = read_corpus(&corpus)?;
    let r = eval_checkpoint(&ck, &text, a.split, a.batch_size, a.seq_len, a.max_batches)?;
    println!("split={} ppl={:.6} tokens={}", split_name(a.split), r.ppl, r.tokens);
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

pub fn quantize(cfg: &RunConfig, a: &QuantizeArgs) -> Result<(), CliError> {
    let ck = ModelCheckpoint::load(&a.checkpoint)?;
    if ck.model.head_spec() != HeadSpec::Full {
        return Err(vqlogits::Error::Config(format!(
            "quantize needs a full-head checkpoint, found {}",
            ck.model.head_spec().name()
        ))
        .into());
    }
    let freqs = match &ck.vocab {
        Some(v) => v.freqs().to_vec(),
        None if a.mapping == MappingStrategy::FreqBinning => {
            return Err(vqlogits::Error::Config("frequency binning needs the checkpoint vocabulary".into()).into())
        }
        None => vec![0; ck.model.config.vocab_size],
    };
    let vq = quantized_from(
        &ck.model,
        a.mapping,
        a.k,
        a.codebook_trainable,
        a.kmeans_iters,
        a.kmeans_restarts,
        &freqs,
        cfg.seed,
    )?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    ModelCheckpoint::from_model(&vq, ck.vocab.clone()).save(&a.out)?;
    let mapping = vq.head.mapping().expect("quantized head has a mapping");
    if let Some(p) = &a.mapping_out {
        save_mapping(mapping, p)?;
    }
    println!(
        "K={} empty_codes={} checkpoint={}",
        mapping.num_codes(),
        mapping.empty_codes(),
        a.out.display()
    );
    Ok(())
}

fn same_row(a: &HeadSpec, b: &HeadSpec) -> bool {
    match (a, b) {
        (HeadSpec::Vq { k: x, .. }, HeadSpec::Vq { k: y, .. }) => x == y,
        (HeadSpec::Adaptive { .. }, HeadSpec::Adaptive { .. }) => true,
        _ => a == b,
    }
}

pub fn bench(cfg: &RunConfig, a: &BenchArgs) -> Result<(), CliError> {
    let mut grid: BenchGrid = a.grid.parse()?;
    if !a.grid.split(';').any(|p| p.trim().starts_with("seed")) {
        grid.seed = cfg.seed;
    }
    let measured = match &a.checkpoint {
        Some(p) => {
            let ck = ModelCheckpoint::load(p)?;
            let corpus = resolve_corpus(a.corpus.as_deref().or(cfg.data.corpus.as_deref()))?;
            let text = read_corpus(&corpus)?;
            let r = eval_checkpoint(&ck, &text, a.split, 16, None, 0)?;
            Some((ck.model.config.vocab_size, ck.model.head_spec(), r.ppl))
        }
        None => None,
    };
    let lookup = |v: usize, spec: &HeadSpec| match &measured {
        Some((mv, ms, ppl)) if *mv == v && same_row(ms, spec) => Some(*ppl),
        _ => None,
    };
    let rows = sweep_report(&grid, &lookup)?;
    if let Some((v, spec, _)) = &measured {
        if !rows.iter().any(|r| r.vocab == *v && same_row(&r.head, spec)) {
            log::warn!("no grid row matches the checkpoint ({} head, V={v}); ppl column left empty", spec.name());
        }
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let csv = report_csv(&rows);
    std::fs::write(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> Result<(), CliError> {
    let (mapping, vocab) = match (&a.checkpoint, &a.mapping, &a.vocab) {
        (Some(p), _, _) => {
            let ck = ModelCheckpoint::load(p)?;
            let map = ck.model.head.mapping().cloned().ok_or_else(|| {
                vqlogits::Error::Config(format!("{} has no quantized head", p.display()))
            })?;
            let vocab = ck
                .vocab
                .ok_or_else(|| vqlogits::Error::Config("checkpoint carries no vocabulary".into()))?;
            (map, vocab)
        }
        (None, Some(m), Some(v)) => (load_mapping(m)?, Vocabulary::load(v)?),
        _ => return Err(usage("pass --checkpoint, or --mapping together with --vocab")),
    };
    if a.stats {
        print!("{}", cluster_stats(&mapping, &vocab, a.largest)?.to_text());
    }
    if !a.code.is_empty() || !a.stats {
        let codes: Vec<usize> = if a.code.is_empty() {
            (0..mapping.num_codes()).collect()
        } else {
            a.code.clone()
        };
        let views = codes
            .iter()
            .map(|&j| cluster_members(&mapping, &vocab, j))
            .collect::<vqlogits::Result<Vec<_>>>()?;
        if a.csv {
            print!("{}", clusters_csv(&views, a.top)?);
        } else {
            print!("{}", clusters_text(&views, a.top));
        }
    }
    Ok(())
}

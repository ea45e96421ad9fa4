use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use svs_core::audio::Waveform;
use svs_core::codec::{train_codec, AcousticUnitSequence, Codec};
use svs_core::features::{
    ingest_corpus, select_by_caps, CorpusKind, IngestConfig, MixSampler, PhonemeVocab, UtteranceRecord,
};
use svs_core::fsutil::{sha256_hex, write_atomic};
use svs_core::metrics::{evaluate_batch, EvalConfig, EvalItem, GenderClassifier, SpectralGenderClassifier};
use svs_core::pipeline::{
    encoder_finetune_pairs, prepare_record, synthesize, train_transformer, PreparedUtterance, PromptCache,
    PromptSource,
};
use svs_core::pitch::F0Sequence;
use svs_core::prompt::{AttributeLabels, Gender, KeywordBank, TemplateBank, VocalRange, Volume};
use svs_core::prompt_encoder::{encode_prompt, PromptBackend, ToyEncoder};
use svs_core::toy::{generate_corpus, generate_eval_set, write_corpus, ToyConfig};
use svs_core::transformer::MultiScaleTransformer;
use svs_core::{Error, Result};

use crate::config::RunConfig;

/// Environment variable naming a directory for cached codec units.
pub const CACHE_ENV: &str = "SVS_CACHE_DIR";

pub struct Ctx {
    pub config: RunConfig,
    pub argv: Vec<String>,
    pub version: String,
    pub command: &'static str,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    argv: &'a [String],
    version: &'a str,
    seed: Option<u64>,
    config_sha256: String,
}

impl Ctx {
    pub fn run_dir(&self) -> &Path {
        &self.config.paths.run_dir
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.run_dir().join(name)
    }

    /// Resolved config, seed, version and command line, plus a log with
    /// the command's outcome.
    pub fn write_run_record(&self, outcome: &str) -> Result<()> {
        let logs = self.artifact("logs");
        let toml = self.config.to_toml()?;
        let record = RunRecord {
            command: self.command,
            argv: &self.argv,
            version: &self.version,
            seed: self.config.seed,
            config_sha256: sha256_hex(toml.as_bytes()),
        };
        write_atomic(&logs.join(format!("{}.config.toml", self.command)), toml.as_bytes())?;
        write_atomic(&logs.join(format!("{}.run.json", self.command)), &to_json(&record)?)?;
        let log = format!(
            "command: {}\nversion: {}\nseed: {}\nargv: {}\n\n[resolved config]\n{toml}\n[outcome]\n{outcome}\n",
            self.command,
            self.version,
            self.config.seed.map_or("none".into(), |s| s.to_string()),
            self.argv.join(" "),
        );
        write_atomic(&logs.join(format!("{}.log", self.command)), log.as_bytes())
    }

    fn keywords(&self) -> Result<KeywordBank> {
        match &self.config.paths.keywords {
            Some(p) => KeywordBank::load(p),
            None => Ok(KeywordBank::builtin()),
        }
    }

    fn templates(&self) -> Result<TemplateBank> {
        match &self.config.paths.templates {
            Some(p) => TemplateBank::load(p),
            None => Ok(TemplateBank::builtin()),
        }
    }

    fn eval_templates(&self) -> Result<TemplateBank> {
        match &self.config.paths.eval_templates {
            Some(p) => TemplateBank::load(p),
            None => Ok(TemplateBank::builtin_eval()),
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| Error::invalid(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::config(format!("{} not found; run `{hint}` first", path.display())))
    }
}

const PREPARED_DIR: &str = "data";
const PHONEMES: &str = "phonemes.json";
const CODEC: &str = "codec.json";
const GENDER: &str = "gender.json";
const ENCODER: &str = "encoder.json";
const MODEL: &str = "model.ckpt";

/// Writes the toy training corpus and evaluation requests.
pub fn toy_corpus(out: &Path, toy: &ToyConfig) -> Result<String> {
    let corpus = generate_corpus(toy)?;
    let manifest = write_corpus(out, &corpus)?;
    let eval_dir = out.join("eval");
    std::fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
    let mut requests = String::new();
    for item in generate_eval_set(toy)? {
        let f0 = eval_dir.join(format!("{}.f0", item.id));
        let phn = eval_dir.join(format!("{}.phn", item.id));
        svs_core::features::write_f0_sidecar(&f0, item.f0.values())?;
        write_atomic(&phn, format_lyrics(&item.phonemes, &item.durations).as_bytes())?;
        requests.push_str(&format!(
            "{}\t{}\n",
            item.id,
            item.intended
        ));
    }
    write_atomic(&eval_dir.join("requests.tsv"), requests.as_bytes())?;
    Ok(format!("wrote {} utterances to {}", corpus.len(), manifest.display()))
}

pub fn format_lyrics(phonemes: &[String], durations: &[f64]) -> String {
    phonemes
        .iter()
        .zip(durations)
        .map(|(p, d)| format!("{p} {d}\n"))
        .collect()
}

/// Lyrics file: one `phoneme duration_seconds` pair per line.
pub fn read_lyrics(path: &Path) -> Result<(Vec<String>, Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut phonemes = Vec::new();
    let mut durations = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(p), Some(d), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::data(format!("{} line {}: expected `phoneme seconds`", path.display(), i + 1)));
        };
        let d: f64 = d
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| Error::data(format!("{} line {}: bad duration {d:?}", path.display(), i + 1)))?;
        phonemes.push(p.to_string());
        durations.push(d);
    }
    Ok((phonemes, durations))
}

fn prepared_path(ctx: &Ctx, kind: CorpusKind) -> PathBuf {
    ctx.artifact(PREPARED_DIR).join(format!("{kind}.jsonl"))
}

fn load_prepared(ctx: &Ctx) -> Result<Vec<UtteranceRecord>> {
    let mut out = Vec::new();
    for kind in [CorpusKind::Singing, CorpusKind::Speech] {
        let path = prepared_path(ctx, kind);
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            out.push(serde_json::from_str(line).map_err(|e| Error::data(format!("{}: {e}", path.display())))?);
        }
    }
    if out.is_empty() {
        return Err(Error::config(format!(
            "no prepared data under {}; run `svs prepare-data` first",
            ctx.artifact(PREPARED_DIR).display()
        )));
    }
    Ok(out)
}

fn load_vocab(ctx: &Ctx) -> Result<PhonemeVocab> {
    let path = ctx.artifact(PHONEMES);
    require(&path, "svs prepare-data")?;
    Ok(read_json::<PhonemeVocab>(&path)?.reindexed())
}

fn load_codec(ctx: &Ctx) -> Result<Codec> {
    let path = ctx.artifact(CODEC);
    require(&path, "svs train-codec")?;
    Codec::load(&path)
}

fn load_encoder(ctx: &Ctx) -> Result<ToyEncoder> {
    let path = ctx.artifact(ENCODER);
    require(&path, "svs train-model")?;
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    ToyEncoder::from_json(&bytes)
}

fn ingest_config(ctx: &Ctx) -> IngestConfig {
    IngestConfig {
        sample_rate: ctx.config.codec.sample_rate,
        hop: ctx.config.codec.hop,
        ..IngestConfig::default()
    }
}

pub fn prepare_data(ctx: &Ctx, manifest: Option<&Path>, kind: Option<CorpusKind>) -> Result<String> {
    let jobs: Vec<(PathBuf, CorpusKind)> = match manifest {
        Some(m) => vec![(m.to_path_buf(), kind.unwrap_or(CorpusKind::Singing))],
        None => {
            let p = &ctx.config.paths;
            let mut v = Vec::new();
            if let Some(m) = &p.singing_manifest {
                v.push((m.clone(), CorpusKind::Singing));
            }
            if let Some(m) = &p.speech_manifest {
                v.push((m.clone(), CorpusKind::Speech));
            }
            v
        }
    };
    if jobs.is_empty() {
        return Err(Error::config("no manifest given: pass --manifest or set paths.singing_manifest"));
    }
    let mut lines = Vec::new();
    for (path, kind) in jobs {
        if !path.exists() {
            return Err(Error::config(format!("manifest {} does not exist", path.display())));
        }
        let report = ingest_corpus(&path, kind, &ingest_config(ctx))?;
        if report.records.is_empty() {
            return Err(Error::data(format!(
                "{}: every row was rejected ({} rows)",
                path.display(),
                report.rejected.len()
            )));
        }
        // A manifest may carry rows of either kind; each goes to its own file.
        for k in [CorpusKind::Singing, CorpusKind::Speech] {
            let rows: Vec<&UtteranceRecord> = report.records.iter().filter(|r| r.kind() == k).collect();
            if rows.is_empty() {
                continue;
            }
            let mut text = String::new();
            for r in &rows {
                text.push_str(&serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?);
                text.push('\n');
            }
            write_atomic(&prepared_path(ctx, k), text.as_bytes())?;
        }
        write_atomic(
            &ctx.artifact(PREPARED_DIR).join(format!("{kind}.rejected.json")),
            &to_json(&report.rejected.iter().map(|r| (&r.id, &r.reason)).collect::<BTreeMap<_, _>>())?,
        )?;
        lines.push(format!(
            "{}: {} accepted, {} rejected",
            path.display(),
            report.records.len(),
            report.rejected.len()
        ));
    }
    let all = load_prepared(ctx)?;
    let vocab = PhonemeVocab::from_symbols(all.iter().flat_map(|r| r.phonemes.iter().cloned()));
    write_atomic(&ctx.artifact(PHONEMES), &to_json(&vocab)?)?;
    lines.push(format!("phoneme inventory: {} symbols", vocab.len()));
    Ok(lines.join("\n"))
}

pub fn train_codec_cmd(ctx: &Ctx) -> Result<String> {
    let seed = ctx.config.require_seed()?;
    let records = load_prepared(ctx)?;
    let waves = records
        .iter()
        .map(|r| Waveform::read_wav(&r.audio))
        .collect::<Result<Vec<_>>>()?;
    let (codec, report) = train_codec(&waves, &ctx.config.codec, seed)?;
    write_atomic(&ctx.artifact(CODEC), &codec.to_json()?)?;
    write_atomic(&ctx.artifact("codec_report.json"), &to_json(&report)?)?;
    let mut msg = format!(
        "codec: {} train / {} held-out utterances, held-out loss {:.4} -> {:.4}, utilization {:.2}",
        report.train_utterances,
        report.heldout_utterances,
        report.initial_loss(),
        report.final_loss(),
        report.utilization
    );
    let labelled: Vec<(Waveform, Gender)> = records
        .iter()
        .zip(waves)
        .filter_map(|(r, w)| r.gender.map(|g| (w, g)))
        .collect();
    match SpectralGenderClassifier::train(
        codec.config.analysis,
        codec.config.hop,
        &labelled,
        ctx.config.eval.gender_epochs,
        seed,
    ) {
        Ok(clf) => {
            write_atomic(&ctx.artifact(GENDER), &to_json(&clf)?)?;
            msg.push_str(&format!("\ngender classifier: trained on {} utterances", labelled.len()));
        }
        Err(Error::Config(reason)) => {
            tracing::warn!(%reason, "gender classifier not trained");
            msg.push_str(&format!("\ngender classifier: skipped ({reason})"));
        }
        Err(e) => return Err(e),
    }
    Ok(msg)
}

pub fn encode_cmd(ctx: &Ctx, audio: &Path, out: &Path) -> Result<String> {
    let codec = load_codec(ctx)?;
    let units = codec.encode(&Waveform::read_wav(audio)?)?;
    units.write(out)?;
    Ok(format!("{} frames x {} codebooks -> {}", units.len(), units.n_q(), out.display()))
}

pub fn decode_cmd(ctx: &Ctx, units: &Path, out: &Path) -> Result<String> {
    let codec = load_codec(ctx)?;
    let units = AcousticUnitSequence::read(units)?;
    let wav = codec.decode(&units)?;
    write_wav_atomic(&wav, out)?;
    Ok(format!("{:.2} s of audio -> {}", wav.duration_secs(), out.display()))
}

fn write_wav_atomic(wav: &Waveform, out: &Path) -> Result<()> {
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let dir = tempfile::tempdir_in(parent).map_err(|e| Error::io(out, e))?;
    let tmp = dir.path().join("out.wav");
    wav.write_wav(&tmp)?;
    std::fs::rename(&tmp, out).map_err(|e| Error::io(out, e))
}

/// Codec units for a record, through the on-disk cache when one is set.
fn prepare_cached(
    rec: &UtteranceRecord,
    codec: &Codec,
    codec_hash: &str,
    vocab: &PhonemeVocab,
    ctx: &Ctx,
) -> Result<PreparedUtterance> {
    let labels = &ctx.config.prompt.labels;
    let Some(dir) = std::env::var_os(CACHE_ENV).map(PathBuf::from) else {
        return prepare_record(rec, None, codec, vocab, labels);
    };
    let wav = std::fs::read(&rec.audio).map_err(|e| Error::io(&rec.audio, e))?;
    let key = sha256_hex(&[codec_hash.as_bytes(), &wav].concat());
    let path = dir.join("units").join(format!("{key}.units"));
    if path.exists() {
        return prepare_record(rec, Some(AcousticUnitSequence::read(&path)?), codec, vocab, labels);
    }
    let item = prepare_record(rec, None, codec, vocab, labels)?;
    item.units.write(&path)?;
    Ok(item)
}

#[derive(Serialize)]
struct ModelTrainSummary {
    selected_singing: usize,
    selected_speech: usize,
    selected_singing_hours: f64,
    selected_speech_hours: f64,
    singing_share: f64,
    encoder_train_accuracy: f64,
    encoder_heldout_accuracy: f64,
    report: svs_core::pipeline::TrainReport,
}

pub fn train_model(ctx: &Ctx) -> Result<String> {
    let seed = ctx.config.require_seed()?;
    let records = load_prepared(ctx)?;
    let vocab = load_vocab(ctx)?;
    let codec = load_codec(ctx)?;
    let mut mc = ctx.config.model.clone();
    mc.seed = seed;
    if vocab.len() > mc.phonemes {
        return Err(Error::config(format!(
            "model.phonemes = {} but the corpus has {} phoneme symbols",
            mc.phonemes,
            vocab.len()
        )));
    }
    if (mc.n_q, mc.codebook_size) != (codec.config.n_q, codec.config.codebook_size) {
        return Err(Error::config(format!(
            "model expects {}x{} units but the codec emits {}x{}",
            mc.n_q, mc.codebook_size, codec.config.n_q, codec.config.codebook_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let selected = select_by_caps(&records, &ctx.config.data_mix, &mut rng);
    let chosen: Vec<UtteranceRecord> = selected.iter().map(|&i| records[i].clone()).collect();
    let hours = |k: CorpusKind| chosen.iter().filter(|r| r.kind() == k).map(|r| r.duration_secs()).sum::<f64>() / 3600.0;
    let count = |k: CorpusKind| chosen.iter().filter(|r| r.kind() == k).count();
    tracing::info!(
        singing = count(CorpusKind::Singing),
        speech = count(CorpusKind::Speech),
        singing_hours = hours(CorpusKind::Singing),
        speech_hours = hours(CorpusKind::Speech),
        "data mix selected"
    );
    let all_idx: Vec<usize> = (0..chosen.len()).collect();
    let sampler = MixSampler::new(&chosen, &all_idx, &ctx.config.data_mix);

    let codec_hash = sha256_hex(&codec.to_json()?);
    let items = chosen
        .iter()
        .map(|r| prepare_cached(r, &codec, &codec_hash, &vocab, ctx))
        .collect::<Result<Vec<_>>>()?;

    let keywords = ctx.keywords()?;
    let templates = ctx.templates()?;
    let eval_templates = ctx.eval_templates()?;
    let ps = &ctx.config.prompt;
    let train_pairs = encoder_finetune_pairs(ps.finetune_pairs, &keywords, &templates, &mut rng)?;
    let heldout_pairs = encoder_finetune_pairs(ps.finetune_pairs / 10, &keywords, &eval_templates, &mut rng)?;
    let mut encoder = ToyEncoder::with_keywords(ps.encoder, &keywords);
    let ft = encoder.finetune_multilabel(&train_pairs, &heldout_pairs, &ps.finetune)?;
    write_atomic(&ctx.artifact(ENCODER), &encoder.to_json()?)?;

    let mut model = MultiScaleTransformer::new(mc)?;
    let prompts = PromptSource {
        keywords,
        templates,
        drop: ps.drop,
    };
    let mut cache = PromptCache::new(&encoder as &dyn PromptBackend, ps.pooled);
    let report = train_transformer(&mut model, &items, Some(&sampler), &prompts, &mut cache, &ctx.config.train, &mut rng)?;
    model.save(&ctx.artifact(MODEL), Some(&rng))?;
    let summary = ModelTrainSummary {
        selected_singing: count(CorpusKind::Singing),
        selected_speech: count(CorpusKind::Speech),
        selected_singing_hours: hours(CorpusKind::Singing),
        selected_speech_hours: hours(CorpusKind::Speech),
        singing_share: sampler.singing_share(),
        encoder_train_accuracy: ft.train_accuracy,
        encoder_heldout_accuracy: ft.heldout_accuracy,
        report,
    };
    write_atomic(&ctx.artifact("train_report.json"), &to_json(&summary)?)?;
    Ok(format!(
        "trained {} steps on {} singing + {} speech utterances; final loss {:.4}",
        summary.report.steps,
        summary.selected_singing,
        summary.selected_speech,
        summary.report.epoch_losses.last().copied().unwrap_or(f32::NAN)
    ))
}

/// Sidecar written next to every synthesized waveform; `evaluate` reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub id: String,
    /// Paths relative to this record's directory.
    pub audio: PathBuf,
    pub units: PathBuf,
    pub prompt: String,
    pub intended: AttributeLabels,
    pub labels_source: String,
    pub range_factor_hz: Option<u32>,
    pub frames: usize,
    pub seed: u64,
    pub reference_f0: Vec<f64>,
}

pub fn parse_labels(s: &str) -> Result<AttributeLabels> {
    let mut l = AttributeLabels::default();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::config(format!("label {part:?} is not attribute=category")))?;
        if v == "-" {
            continue;
        }
        let bad = || Error::config(format!("unknown category {v:?} for {k}"));
        match k {
            "gender" => l.gender = Some(Gender::ALL.into_iter().find(|g| g.name() == v).ok_or_else(bad)?),
            "volume" => l.volume = Some(Volume::ALL.into_iter().find(|g| g.name() == v).ok_or_else(bad)?),
            "range" | "pitch" => {
                l.vocal_range = Some(VocalRange::ALL.into_iter().find(|g| g.name() == v).ok_or_else(bad)?)
            }
            _ => return Err(Error::config(format!("unknown attribute {k:?}"))),
        }
    }
    l.validate().map_err(|e| Error::config(e.to_string()))?;
    Ok(l)
}

pub struct SynthArgs<'a> {
    pub prompt: &'a str,
    pub melody: &'a Path,
    pub lyrics: &'a Path,
    pub out: &'a Path,
    pub labels: Option<&'a str>,
}

pub fn synthesize_cmd(ctx: &Ctx, a: &SynthArgs<'_>) -> Result<String> {
    let seed = ctx.config.require_seed()?;
    let intended_flag = a.labels.map(parse_labels).transpose()?;
    for (p, what) in [(a.melody, "melody"), (a.lyrics, "lyrics")] {
        if !p.exists() {
            return Err(Error::config(format!("{what} file {} does not exist", p.display())));
        }
    }
    let model_path = ctx.artifact(MODEL);
    require(&model_path, "svs train-model")?;
    let (model, _) = MultiScaleTransformer::load(&model_path)?;
    let codec = load_codec(ctx)?;
    let vocab = load_vocab(ctx)?;
    let encoder = load_encoder(ctx)?;
    let f0 = F0Sequence::new(svs_core::features::read_f0_sidecar(a.melody)?)?;
    let (phonemes, durations) = read_lyrics(a.lyrics)?;
    let prompt = encode_prompt(a.prompt, &encoder, ctx.config.prompt.pooled)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = synthesize(&model, &codec, &vocab, &prompt, &phonemes, &durations, &f0, &ctx.config.sampling, &mut rng)?;

    let (intended, labels_source) = match intended_flag {
        Some(l) => (l, "flag"),
        None => (encoder.predict_labels(a.prompt)?, "prompt-encoder"),
    };
    let stem = a
        .out
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::config(format!("output path {} has no file name", a.out.display())))?
        .to_string();
    let units_path = a.out.with_extension("units");
    let json_path = a.out.with_extension("json");
    write_wav_atomic(&out.audio, a.out)?;
    write_atomic(&units_path, &out.generation.units.to_bytes())?;
    let record = SynthesisRecord {
        id: stem.clone(),
        audio: PathBuf::from(a.out.file_name().expect("has stem")),
        units: PathBuf::from(units_path.file_name().expect("has stem")),
        prompt: a.prompt.to_string(),
        intended,
        labels_source: labels_source.into(),
        range_factor_hz: out.generation.range_factor,
        frames: out.generation.units.len(),
        seed,
        reference_f0: f0.values().to_vec(),
    };
    write_atomic(&json_path, &to_json(&record)?)?;
    Ok(format!(
        "{}: {} frames ({:.2} s), range factor {}, intended [{}]",
        a.out.display(),
        record.frames,
        out.audio.duration_secs(),
        record.range_factor_hz.map_or("-".into(), |h| format!("{h} Hz")),
        intended
    ))
}

/// Synthesis records given directly or found in directories.
fn collect_records(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json") && f.with_extension("wav").exists())
                .collect();
            found.sort();
            out.extend(found);
        } else if p.exists() {
            out.push(p.clone());
        } else {
            return Err(Error::config(format!("{} does not exist", p.display())));
        }
    }
    if out.is_empty() {
        return Err(Error::config("no synthesis records to evaluate"));
    }
    Ok(out)
}

pub fn evaluate_cmd(ctx: &Ctx, inputs: &[PathBuf], report_path: &Path) -> Result<String> {
    let codec = load_codec(ctx)?;
    let classifier: Option<SpectralGenderClassifier> = {
        let p = ctx.artifact(GENDER);
        if p.exists() {
            Some(read_json(&p)?)
        } else {
            None
        }
    };
    let mut items = Vec::new();
    for path in collect_records(inputs)? {
        let rec: SynthesisRecord = read_json(&path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        items.push(EvalItem {
            id: rec.id,
            audio: Waveform::read_wav(&base.join(&rec.audio))?,
            intended: rec.intended,
            reference_f0: Some(F0Sequence::new(rec.reference_f0)?),
        });
    }
    let cfg = EvalConfig {
        volume_bands: ctx.config.prompt.labels.volume_bands,
        range_thresholds: ctx.config.prompt.labels.range_thresholds,
        analysis: codec.config.analysis,
        hop: codec.config.hop,
    };
    let report = evaluate_batch(&items, classifier.as_ref().map(|c| c as &dyn GenderClassifier), &cfg)?;
    write_atomic(report_path, &to_json(&report)?)?;
    Ok(format!("{} items\n{}", items.len(), report.summary()))
}

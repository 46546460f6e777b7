use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use tokenrank::aggregation::{
    instance_tokens, kmeans_per_image, AggregationConfig, InstanceTokenSet, KMeansVariant, Provenance,
};
use tokenrank::codebook::{sample_tokens, train_codebook, vlad_encode, vlad_raw_sv, VladMode, VladOutput};
use tokenrank::engine::{
    build_flat_index, quantize_store, read_run_tsv, write_run_tsv, FlatIndex, MultiVectorStore, RunRanking,
    Searcher, TimingSummary,
};
use tokenrank::eval::emit_report;
use tokenrank::manifest::load_manifest;
use tokenrank::pca::fit_pca;
use tokenrank::pooling::{pool_with, GemMode, GlobalDescriptor, PoolConfig, PoolMethod};
use tokenrank::store::{open_store, read_store_mmap, write_store, StoreWriter};
use tokenrank::synth::{generate, SynthSpec};
use tokenrank::{par, Error, RelevanceManifest, TokenSet};

use crate::args::*;
use crate::error::{CliError, Context, Result};
use crate::lock::{lock_path, read_lock};

/// Records aggregated per parallel batch while streaming a store.
const STREAM_BATCH: usize = 1024;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).context(|| format!("writing {}", path.display()))
}

fn read_tokens(path: &Path) -> Result<Vec<TokenSet>> {
    read_store_mmap(path).context(|| format!("reading {}", path.display()))
}

fn manifest(path: &Path) -> Result<RelevanceManifest> {
    load_manifest(path).context(|| format!("reading {}", path.display()))
}

fn by_id(sets: &[TokenSet]) -> HashMap<&str, &TokenSet> {
    sets.iter().map(|t| (t.image_id.as_str(), t)).collect()
}

/// Stream `store` in batches, map each record in parallel and write the
/// results to `out` in input order. Errors name the failing record.
fn stream_map<F>(store: &Path, out: &Path, f: F) -> Result<usize>
where
    F: Fn(&TokenSet) -> tokenrank::Result<TokenSet> + Sync + Send,
{
    let mut reader = open_store(store).context(|| format!("reading {}", store.display()))?;
    let header = reader.header();
    let file = File::create(out).context(|| format!("creating {}", out.display()))?;
    let mut writer: Option<StoreWriter<BufWriter<File>>> = None;
    let mut pending = Some(BufWriter::new(file));
    let mut index = 0usize;
    let mut batch: Vec<TokenSet> = Vec::with_capacity(STREAM_BATCH);
    let ctx = |i: usize, id: &str| format!("{}: record {i} ({id})", store.display());

    let mut flush = |batch: &mut Vec<TokenSet>, writer: &mut Option<StoreWriter<_>>, index: &mut usize| -> Result<()> {
        let mapped = par::map(batch, |ts| f(ts));
        for (ts, r) in batch.iter().zip(mapped) {
            let z = r.context(|| ctx(*index, &ts.image_id))?;
            if writer.is_none() {
                let w = StoreWriter::new(
                    pending.take().expect("writer created once"),
                    z.dim(),
                    z.attention().is_some(),
                    z.cls().is_some(),
                    header.image_count,
                )?;
                *writer = Some(w);
            }
            writer.as_mut().unwrap().push(&z).context(|| ctx(*index, &ts.image_id))?;
            *index += 1;
        }
        batch.clear();
        Ok(())
    };

    for rec in reader.by_ref() {
        batch.push(rec.context(|| format!("reading {}", store.display()))?);
        if batch.len() == STREAM_BATCH {
            flush(&mut batch, &mut writer, &mut index)?;
        }
    }
    flush(&mut batch, &mut writer, &mut index)?;
    match writer {
        Some(w) => w.finish()?,
        None => StoreWriter::new(pending.take().unwrap(), 0, false, false, 0)?.finish()?,
    };
    Ok(index)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        identities: a.identities,
        gallery_views: a.gallery_views,
        query_views: a.query_views,
        sigma_deg: a.sigma_deg,
        distractors: a.distractors,
        n_tokens: a.n_tokens,
        dim: a.dim,
        instance_tokens: a.instance_tokens,
        families: a.families,
        background_modes: a.background_modes,
        vocab: a.vocab,
        occlusion: a.occlusion,
        seed: a.seed,
    };
    let data = generate(&spec)?;
    create_dir(&a.out)?;
    write_store(&data.token_sets, a.out.join("tokens.cbtk"))?;
    let mut w = BufWriter::new(File::create(a.out.join("manifest.jsonl"))?);
    data.manifest.write_jsonl(&mut w)?;
    let (g, q) = data.split();
    eprintln!(
        "synth: {} gallery + {} query images ({} tokens x {} dims)",
        g.len(),
        q.len(),
        a.n_tokens,
        a.dim
    );
    Ok(())
}

#[derive(Serialize)]
struct AggregateSummary {
    provenance: Provenance,
    images: usize,
    seed_similarity_evals: u64,
    assign_similarity_evals: u64,
    similarity_evals_per_image: f64,
}

pub fn aggregate(a: &AggregateArgs) -> Result<()> {
    if a.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    create_dir(&a.out)?;
    let cfg = AggregationConfig {
        strategy: a.seeds,
        mode: a.assign,
        k: a.k,
        tau: a.tau,
        rng_seed: a.seed,
    };
    let variant = match a.method {
        AggregateMethod::Instance => None,
        AggregateMethod::Kmeans => Some(KMeansVariant::Centroid),
        AggregateMethod::Medoid => Some(KMeansVariant::Medoid),
    };
    let seed_evals = AtomicU64::new(0);
    let assign_evals = AtomicU64::new(0);
    let provenance = OnceLock::new();
    let t = Instant::now();
    let n = stream_map(&a.store, &a.out.join("instance.cbtk"), |ts| {
        let z: InstanceTokenSet = match variant {
            None => {
                let (z, st) = instance_tokens(ts, &cfg)?;
                seed_evals.fetch_add(st.seed_similarity_evals, Ordering::Relaxed);
                assign_evals.fetch_add(st.assign_similarity_evals, Ordering::Relaxed);
                z
            }
            Some(v) => kmeans_per_image(ts, a.k, a.iters, a.seed, v)?,
        };
        provenance.get_or_init(|| z.provenance.clone());
        z.to_token_set()
    })?;
    let secs = t.elapsed().as_secs_f64();
    let provenance = provenance.into_inner().unwrap_or_else(|| cfg.provenance());
    let (se, ae) = (seed_evals.into_inner(), assign_evals.into_inner());
    write_json(
        &a.out.join("provenance.json"),
        &AggregateSummary {
            provenance,
            images: n,
            seed_similarity_evals: se,
            assign_similarity_evals: ae,
            similarity_evals_per_image: if n > 0 { (se + ae) as f64 / n as f64 } else { 0.0 },
        },
    )?;
    eprintln!(
        "aggregate: {n} images in {secs:.2} s ({:.0} images/s), {} similarity evals",
        n as f64 / secs.max(1e-9),
        se + ae
    );
    Ok(())
}

fn pool_config(a: &PoolArgs) -> PoolConfig {
    PoolConfig {
        method: a.pool,
        gem_p: a.gem_p,
        gem_mode: match a.gem_mode {
            GemModeArg::Clamp => GemMode::Clamp,
            GemModeArg::Signed => GemMode::Signed,
        },
    }
}

pub fn pool(a: &PoolArgs) -> Result<()> {
    create_dir(&a.out)?;
    let cfg = pool_config(a);
    let n = stream_map(&a.store, &a.out.join("descriptors.cbtk"), |ts| {
        pool_with(ts, &cfg)?.to_token_set()
    })?;
    write_json(&a.out.join("descriptors.json"), &cfg)?;
    eprintln!("pool: {n} descriptors ({})", a.pool);
    Ok(())
}

#[derive(Serialize)]
struct VladSummary {
    method: &'static str,
    codebook_k: usize,
    soft_alpha: Option<f32>,
    images: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pca_dim: Option<usize>,
}

pub fn codebook(a: &CodebookArgs) -> Result<()> {
    let m = manifest(&a.manifest)?;
    let sets = read_tokens(&a.store)?;
    let gallery: Vec<&TokenSet> = sets
        .iter()
        .filter(|t| m.role(&t.image_id) == Some(tokenrank::Role::Gallery))
        .collect();
    if gallery.is_empty() {
        return Err(CliError::Usage("no gallery images of the manifest are in the store".into()));
    }
    create_dir(&a.out)?;
    let seed = tokenrank::rng::stage_seed(a.seed, "codebook-sample");
    let (dim, sample) = sample_tokens(&gallery, a.sample_budget, seed)?;
    let cb = train_codebook(&sample, dim, a.k, a.iters, a.seed)?;
    cb.save(a.out.join("codebook.bin"))?;

    let out = a.out.join("vlad.cbtk");
    let mut pca_dim = None;
    let records: Vec<TokenSet> = match a.encode {
        EncodeArg::Mv => {
            let enc = par::try_map(&sets, |ts| match vlad_encode(ts, &cb, VladMode::Mv, a.soft_alpha, None)? {
                VladOutput::Multi(z) => z.to_token_set(),
                VladOutput::Single(_) => unreachable!("mv encoding yields token sets"),
            });
            enc?
        }
        EncodeArg::Sv => {
            let raws = par::try_map(&gallery, |ts| vlad_raw_sv(ts, &cb, a.soft_alpha))?;
            let pca = fit_pca(&raws.concat(), a.k * dim, a.pca_dim)?;
            pca.save(a.out.join("pca.bin"))?;
            pca_dim = Some(a.pca_dim);
            par::try_map(&sets, |ts| match vlad_encode(ts, &cb, VladMode::Sv, a.soft_alpha, Some(&pca))? {
                VladOutput::Single(d) => d.to_token_set(),
                VladOutput::Multi(_) => unreachable!("sv encoding yields one vector"),
            })?
        }
    };
    write_store(&records, &out)?;
    write_json(
        &a.out.join("vlad.json"),
        &VladSummary {
            method: match a.encode {
                EncodeArg::Sv => "vlad_sv",
                EncodeArg::Mv => "vlad_mv",
            },
            codebook_k: a.k,
            soft_alpha: a.soft_alpha,
            images: records.len(),
            pca_dim,
        },
    )?;
    eprintln!("codebook: K={} trained on {} tokens, {} images encoded", a.k, cb.meta.sample_size, records.len());
    Ok(())
}

/// Pooling method recorded next to a descriptor store by `pool`.
fn descriptor_method(path: &Path) -> PoolMethod {
    fs::read_to_string(path.with_extension("json"))
        .ok()
        .and_then(|s| serde_json::from_str::<PoolConfig>(&s).ok())
        .map_or(PoolMethod::Mean, |c| c.method)
}

fn read_descriptors(path: &Path) -> Result<Vec<GlobalDescriptor>> {
    let method = descriptor_method(path);
    let sets = read_tokens(path)?;
    sets.iter()
        .map(|t| GlobalDescriptor::from_token_set(t, method).context(|| format!("reading {}", path.display())))
        .collect()
}

fn gallery_only<T, F: Fn(&T) -> &str>(items: Vec<T>, m: Option<&RelevanceManifest>, id: F) -> Vec<T> {
    match m {
        None => items,
        Some(m) => items
            .into_iter()
            .filter(|x| m.role(id(x)) == Some(tokenrank::Role::Gallery))
            .collect(),
    }
}

pub fn index(a: &IndexArgs) -> Result<()> {
    let m = a.manifest.as_deref().map(manifest).transpose()?;
    let descs = gallery_only(read_descriptors(&a.descriptors)?, m.as_ref(), |d| &d.image_id);
    let idx = build_flat_index(&descs)?;
    create_dir(&a.out)?;
    idx.save(a.out.join("index.bin"))?;
    eprintln!("index: {} vectors of dim {}", idx.len(), idx.dim());
    Ok(())
}

fn build_store(
    sets: Vec<TokenSet>,
    m: Option<&RelevanceManifest>,
    codec: tokenrank::engine::Codec,
    seed: u64,
) -> Result<MultiVectorStore> {
    let sets = gallery_only(sets, m, |t| &t.image_id);
    let dim = sets.first().map_or(0, |t| t.dim());
    let entries = sets.into_iter().map(|t| (t.image_id.clone(), t.tokens().to_vec())).collect();
    let raw = MultiVectorStore::from_f32(dim, entries)?;
    Ok(quantize_store(&raw, codec, None, seed)?)
}

pub fn quantize(a: &QuantizeArgs) -> Result<()> {
    let m = a.manifest.as_deref().map(manifest).transpose()?;
    let store = build_store(read_tokens(&a.tokens)?, m.as_ref(), a.codec, a.seed)?;
    create_dir(&a.out)?;
    store.save(a.out.join("store.bin"))?;
    eprintln!(
        "quantize: {} images, {} tokens, {} bytes/token ({})",
        store.len(),
        store.total_tokens(),
        a.codec.bytes_per_token(store.dim()),
        a.codec
    );
    Ok(())
}

fn check_ids(what: &str, got: &[String], want: &BTreeSet<&str>) -> Result<()> {
    let got: BTreeSet<&str> = got.iter().map(String::as_str).collect();
    if &got != want {
        let missing = want.difference(&got).next();
        let extra = got.difference(want).next();
        return Err(CliError::Core(Error::InvalidInput(format!(
            "{what} ids do not match the manifest gallery (first missing: {missing:?}, first extra: {extra:?})"
        ))));
    }
    Ok(())
}

fn write_runs(dir: &Path, tag: &str, runs: &[RunRanking], s: usize, k: usize) -> Result<()> {
    let path = dir.join(format!("run_{tag}.tsv"));
    let file = File::create(&path).context(|| format!("creating {}", path.display()))?;
    write_run_tsv(runs, BufWriter::new(file))?;
    write_json(&dir.join(format!("timing_{tag}.json")), &TimingSummary::from_runs(runs, s, k))
}

pub fn search(a: &SearchArgs) -> Result<()> {
    if a.shortlist.iter().any(|&s| s == 0) {
        return Err(CliError::Usage("shortlist sizes must be at least 1".into()));
    }
    let m = manifest(&a.manifest)?;
    let gallery_ids: BTreeSet<&str> = m.gallery().collect();
    let descs = read_descriptors(&a.descriptors)?;
    let tokens = read_tokens(&a.tokens)?;

    let index: FlatIndex = match &a.index {
        Some(p) => FlatIndex::load(p).context(|| format!("reading {}", p.display()))?,
        None => {
            let g: Vec<GlobalDescriptor> = descs
                .iter()
                .filter(|d| gallery_ids.contains(d.image_id.as_str()))
                .cloned()
                .collect();
            build_flat_index(&g)?
        }
    };
    check_ids("index", index.ids(), &gallery_ids)?;
    let store = match &a.mvstore {
        Some(p) => MultiVectorStore::load(p).context(|| format!("reading {}", p.display()))?,
        None => {
            let g: Vec<TokenSet> = tokens
                .iter()
                .filter(|t| gallery_ids.contains(t.image_id.as_str()))
                .cloned()
                .collect();
            build_store(g, None, a.codec, a.seed)?
        }
    };
    check_ids("multi-vector store", store.ids(), &gallery_ids)?;
    let searcher = Searcher::new(&index, &store)?;

    let desc_by_id: HashMap<&str, &GlobalDescriptor> = descs.iter().map(|d| (d.image_id.as_str(), d)).collect();
    let tok_by_id = by_id(&tokens);
    let mut queries = Vec::new();
    for q in m.queries() {
        let d = desc_by_id
            .get(q)
            .ok_or_else(|| Error::InvalidInput(format!("query {q} has no descriptor")))?;
        let t = tok_by_id
            .get(q)
            .ok_or_else(|| Error::InvalidInput(format!("query {q} has no tokens")))?;
        queries.push((q, d.vector.as_slice(), t.tokens(), t.n_tokens()));
    }
    if queries.is_empty() {
        return Err(Error::Protocol("manifest has no queries".into()).into());
    }
    let k = queries[0].3;

    create_dir(&a.out)?;
    for &s in &a.shortlist {
        let mut runs = Vec::with_capacity(queries.len());
        for &(q, d, t, _) in &queries {
            runs.push(if a.stage1_only {
                searcher.stage1(q, d, s)?
            } else {
                searcher.two_stage(q, d, t, s)?
            });
        }
        write_runs(&a.out, &format!("S{s}"), &runs, s, k)?;
        let t: TimingSummary = TimingSummary::from_runs(&runs, s, k);
        eprintln!(
            "search S={s}: {} queries, stage1 {:.3} ms + stage2 {:.3} ms per query",
            runs.len(),
            t.stage1_ms_mean,
            t.stage2_ms_mean
        );
    }
    if a.exhaustive {
        let mut runs = Vec::with_capacity(queries.len());
        for &(q, d, t, _) in &queries {
            runs.push(searcher.exhaustive(q, d, t)?);
        }
        write_runs(&a.out, "full", &runs, index.len(), k)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct LockedArgs {
    #[serde(default)]
    args: BTreeMap<String, serde_json::Value>,
}

/// Echo of the search parameters that produced a run, from its config.lock.
fn run_config(run: &Path) -> BTreeMap<String, String> {
    let mut cfg = BTreeMap::new();
    cfg.insert(
        "run".to_string(),
        run.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
    );
    let Some(dir) = run.parent() else {
        return cfg;
    };
    let lock = lock_path(dir);
    if read_lock(&lock).is_ok() {
        if let Ok(l) = serde_json::from_str::<LockedArgs>(&fs::read_to_string(&lock).unwrap_or_default()) {
            for key in ["codec", "descriptors", "tokens", "seed"] {
                if let Some(v) = l.args.get(key) {
                    let v = v.as_str().map_or_else(|| v.to_string(), str::to_string);
                    cfg.insert(key.to_string(), v);
                }
            }
        }
    }
    cfg
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let m = manifest(&a.manifest)?;
    create_dir(&a.out)?;
    let mut stems = BTreeSet::new();
    for path in &a.runs {
        let file = File::open(path).context(|| format!("reading {}", path.display()))?;
        let runs = read_run_tsv(BufReader::new(file)).context(|| format!("reading {}", path.display()))?;
        let shortlist = a.shortlist.or_else(|| uniform_len(&runs));
        let mut cfg = run_config(path);
        if let Some(stage) = runs.first().and_then(|r| r.items.first()).map(|i| i.stage) {
            cfg.insert("stage".into(), stage.to_string());
        }
        if let Some(s) = shortlist {
            cfg.insert("S".into(), s.to_string());
        }
        let report = emit_report(&runs, &m, &a.recall_at, shortlist.as_slice(), cfg)
            .context(|| format!("evaluating {}", path.display()))?;

        let stem = report_stem(path, &mut stems);
        fs::write(a.out.join(format!("{stem}.report.json")), report.to_json()? + "\n")?;
        let text = report.to_text();
        fs::write(a.out.join(format!("{stem}.report.txt")), &text)?;
        print!("{text}");
    }
    Ok(())
}

fn uniform_len(runs: &[RunRanking]) -> Option<usize> {
    let n = runs.first()?.items.len();
    runs.iter().all(|r| r.items.len() == n).then_some(n)
}

/// Unique report name for a run file: its stem, prefixed by the parent
/// directory name when two runs share a stem.
fn report_stem(path: &Path, seen: &mut BTreeSet<String>) -> String {
    let stem = path.file_stem().map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned());
    if seen.insert(stem.clone()) {
        return stem;
    }
    let parent = path
        .parent()
        .and_then(Path::file_name)
        .map_or_else(String::new, |p| p.to_string_lossy().into_owned());
    let mut candidate = format!("{parent}_{stem}");
    let mut i = 2;
    while !seen.insert(candidate.clone()) {
        candidate = format!("{parent}_{stem}_{i}");
        i += 1;
    }
    candidate
}

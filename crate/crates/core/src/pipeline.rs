//! Stage orchestration over an [`ArtifactStore`], parameter sweeps and
//! run comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::artifacts::ArtifactStore;
use crate::collab::{bpr_train, build_graph};
use crate::config::{DataSource, RunConfig};
use crate::dataset::{
    compute_stats, filter_core, generate_synthetic, leave_one_out_split, load_interactions, read_id_list,
    write_id_list, DatasetStats, IdRegistry, ItemCatalog, ModalityRows, SplitDataset,
};
use crate::decoder::{recommend, CatalogTrie, RecommendationList};
use crate::evaluation::{evaluate, popularity_ranking, popularity_recommend, random_hit_rate, ColdStartSlice, EvalReport};
use crate::fusion::{mean_attention, normalize_mean_norm, FusionParams, JointFusion, ModalityInputs, ModalityReducers};
use crate::generator::{train_generator, Generator, IdTable, VocabSpec};
use crate::rqvae::{
    assign_ids, check_bijection, level_perplexities, read_semantic_ids, train_rqvae, write_semantic_ids, RqVae,
    SemanticId,
};
use crate::{emb, Error, Result};

pub const STAGES: [&str; 7] = [
    "prepare",
    "train-collab",
    "fuse",
    "train-tokenizer",
    "assign-ids",
    "train-generator",
    "evaluate",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

struct StageSpec {
    inputs: Vec<String>,
    outputs: Vec<String>,
    sections: &'static [&'static str],
}

fn owned(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn external(path: &str) -> String {
    fs::canonicalize(path)
        .map(|p| p.to_string_lossy().into_owned())
        .unwrap_or_else(|_| {
            std::env::current_dir()
                .map(|d| d.join(path).to_string_lossy().into_owned())
                .unwrap_or_else(|_| path.to_string())
        })
}

fn stage_spec(cfg: &RunConfig, stage: &str) -> Result<StageSpec> {
    let s = match stage {
        "prepare" => StageSpec {
            inputs: match cfg.data.source {
                DataSource::Synth => Vec::new(),
                DataSource::Files => [
                    &cfg.data.interactions,
                    &cfg.data.visual,
                    &cfg.data.visual_ids,
                    &cfg.data.text,
                    &cfg.data.text_ids,
                ]
                .iter()
                .map(|p| external(p))
                .collect(),
            },
            outputs: owned(&["data"]),
            sections: &["seed", "data", "synth"],
        },
        "train-collab" => StageSpec {
            inputs: owned(&["data/split.json"]),
            outputs: owned(&["collab"]),
            sections: &["seed", "d", "collab"],
        },
        "fuse" => StageSpec {
            inputs: owned(&["data", "collab/item_emb.emb"]),
            outputs: owned(&["fusion"]),
            sections: &["seed", "d", "fusion", "ablation"],
        },
        "train-tokenizer" => StageSpec {
            inputs: owned(&["fusion"]),
            outputs: owned(&["tokenizer"]),
            sections: &["seed", "fusion", "ablation", "rqvae"],
        },
        "assign-ids" => StageSpec {
            inputs: owned(&["tokenizer"]),
            outputs: owned(&["ids"]),
            sections: &[],
        },
        "train-generator" => StageSpec {
            inputs: owned(&["data/split.json", "ids/semantic_ids.csv", "tokenizer/rqvae.json"]),
            outputs: owned(&["generator"]),
            sections: &["seed", "generator"],
        },
        "evaluate" => StageSpec {
            inputs: owned(&["data/split.json", "ids", "tokenizer/summary.json", "generator"]),
            outputs: owned(&["metrics.json"]),
            sections: &["eval", "decode"],
        },
        other => return Err(Error::config(format!("unknown stage `{other}`"))),
    };
    Ok(s)
}

/// Run one stage unless its manifest shows identical inputs and config.
pub fn run_stage(cfg: &RunConfig, store: &ArtifactStore, stage: &str, force: bool) -> Result<StageStatus> {
    let spec = stage_spec(cfg, stage)?;
    let hash = cfg.section_hash(spec.sections);
    if !force && store.is_fresh(stage, &spec.inputs, &spec.outputs, &hash)? {
        info!("{stage}: up to date");
        store.log_timing(stage, "skipped", 0.0)?;
        return Ok(StageStatus::Skipped);
    }
    store.invalidate(stage)?;
    let t0 = Instant::now();
    info!("{stage}: running");
    let res = match stage {
        "prepare" => prepare(cfg, store),
        "train-collab" => train_collab(cfg, store),
        "fuse" => fuse(cfg, store),
        "train-tokenizer" => train_tokenizer(cfg, store),
        "assign-ids" => assign(cfg, store),
        "train-generator" => train_gen(cfg, store),
        "evaluate" => evaluate_stage(cfg, store).map(|_| ()),
        _ => unreachable!("stage_spec rejects unknown stages"),
    };
    let secs = t0.elapsed().as_secs_f64();
    if let Err(e) = res {
        store.log_timing(stage, "failed", secs)?;
        return Err(Error::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        });
    }
    store.write_manifest(stage, &spec.inputs, &spec.outputs, &hash)?;
    store.log_timing(stage, "ran", secs)?;
    info!("{stage}: done in {secs:.1}s");
    Ok(StageStatus::Ran)
}

/// Every stage in order; writes the config snapshot first.
pub fn run_pipeline(cfg: &RunConfig, store: &ArtifactStore, force: bool) -> Result<Metrics> {
    cfg.validate()?;
    cfg.save(&store.config_path())?;
    for stage in STAGES {
        run_stage(cfg, store, stage, force)?;
    }
    store.read_json("metrics.json")
}

fn load_raw_modality(emb_path: &str, ids_path: &str) -> Result<ModalityRows> {
    Ok(ModalityRows {
        ids: read_id_list(Path::new(ids_path))?,
        values: emb::read(Path::new(emb_path))?,
    })
}

/// Write a synthetic dataset as raw files usable with `data.source = files`.
pub fn write_synthetic(cfg: &RunConfig, dir: &Path) -> Result<DatasetStats> {
    let (log, catalog) = generate_synthetic(&cfg.synth)?;
    fs::create_dir_all(dir)?;
    log.write_tsv(&dir.join("interactions.tsv"))?;
    let ids = catalog.item_ids.raw_ids().to_vec();
    emb::write(&dir.join("visual.emb"), catalog.visual.view())?;
    emb::write(&dir.join("text.emb"), catalog.text.view())?;
    write_id_list(&dir.join("visual_ids.txt"), &ids)?;
    write_id_list(&dir.join("text_ids.txt"), &ids)?;
    compute_stats(&log)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Presence {
    visual: Vec<bool>,
    text: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PrepareStats {
    raw: DatasetStats,
    filtered: DatasetStats,
}

fn prepare(cfg: &RunConfig, store: &ArtifactStore) -> Result<()> {
    let (log, visual, text) = match cfg.data.source {
        DataSource::Synth => {
            let (log, catalog) = generate_synthetic(&cfg.synth)?;
            let ids = catalog.item_ids.raw_ids().to_vec();
            let v = ModalityRows { ids: ids.clone(), values: catalog.visual };
            let t = ModalityRows { ids, values: catalog.text };
            (log, v, t)
        }
        DataSource::Files => {
            let log = load_interactions(Path::new(&cfg.data.interactions), cfg.data.delimiter_char()?)?;
            let v = load_raw_modality(&cfg.data.visual, &cfg.data.visual_ids)?;
            let t = load_raw_modality(&cfg.data.text, &cfg.data.text_ids)?;
            (log, v, t)
        }
    };
    let raw = compute_stats(&log)?;
    let filtered = filter_core(&log, cfg.data.k_core)?;
    let split = leave_one_out_split(&filtered)?;
    let catalog = ItemCatalog::from_modalities(&filtered.items, &visual, &text)?;
    store.reset_dir("data")?;
    filtered.write_tsv(&store.path("data/interactions.tsv"))?;
    write_id_list(&store.path("data/items.txt"), filtered.items.raw_ids())?;
    write_id_list(&store.path("data/users.txt"), filtered.users.raw_ids())?;
    store.write_json("data/split.json", &split)?;
    emb::write(&store.path("data/visual.emb"), catalog.visual.view())?;
    emb::write(&store.path("data/text.emb"), catalog.text.view())?;
    store.write_json(
        "data/presence.json",
        &Presence { visual: catalog.visual_present.clone(), text: catalog.text_present.clone() },
    )?;
    let stats = PrepareStats { raw, filtered: compute_stats(&filtered)? };
    store.write_json("data/stats.json", &stats)?;
    info!(
        "prepared {} users, {} items, {} interactions (sparsity {:.4})",
        stats.filtered.n_users, stats.filtered.n_items, stats.filtered.n_interactions, stats.filtered.sparsity
    );
    Ok(())
}

pub fn load_split(store: &ArtifactStore) -> Result<SplitDataset> {
    store.read_json("data/split.json")
}

pub fn load_items(store: &ArtifactStore) -> Result<IdRegistry> {
    Ok(IdRegistry::from_raw(read_id_list(&store.path("data/items.txt"))?))
}

pub fn load_users(store: &ArtifactStore) -> Result<IdRegistry> {
    Ok(IdRegistry::from_raw(read_id_list(&store.path("data/users.txt"))?))
}

pub fn load_catalog(store: &ArtifactStore) -> Result<ItemCatalog> {
    let presence: Presence = store.read_json("data/presence.json")?;
    Ok(ItemCatalog {
        item_ids: load_items(store)?,
        visual: emb::read(&store.path("data/visual.emb"))?,
        text: emb::read(&store.path("data/text.emb"))?,
        visual_present: presence.visual,
        text_present: presence.text,
    })
}

fn train_collab(cfg: &RunConfig, store: &ArtifactStore) -> Result<()> {
    let split = load_split(store)?;
    let graph = build_graph(&split)?;
    let out = bpr_train::<f32>(&graph, &cfg.bpr())?;
    if !out.embeddings.is_finite() {
        return Err(Error::NonFinite {
            stage: "collaborative training".into(),
            detail: "propagated embeddings".into(),
        });
    }
    store.reset_dir("collab")?;
    emb::write(&store.path("collab/item_emb.emb"), out.embeddings.item_emb.view())?;
    emb::write(&store.path("collab/user_emb.emb"), out.embeddings.user_emb.view())?;
    store.write_json("collab/losses.json", &out.epoch_losses)?;
    Ok(())
}

fn fuse(cfg: &RunConfig, store: &ArtifactStore) -> Result<()> {
    let catalog = load_catalog(store)?;
    let mut collab = emb::read(&store.path("collab/item_emb.emb"))?;
    if collab.nrows() != catalog.n_items() {
        return Err(Error::mismatch("collaborative embedding rows", catalog.n_items(), collab.nrows()));
    }
    if collab.ncols() != cfg.d {
        return Err(Error::mismatch("collaborative embedding width", cfg.d, collab.ncols()));
    }
    normalize_mean_norm(&mut collab);
    let reducers = ModalityReducers::<f32>::fit(&catalog, cfg.d)?;
    let (v, t) = reducers.project(&catalog)?;
    let inputs = ModalityInputs::new(collab, v, t, cfg.ablation)?;
    let params = FusionParams::<f32>::init(cfg.d, cfg.fusion.init_noise, cfg.seed);
    let dir = store.reset_dir("fusion")?;
    emb::write(&dir.join("collab.emb"), inputs.collab.view())?;
    emb::write(&dir.join("visual.emb"), inputs.visual.view())?;
    emb::write(&dir.join("text.emb"), inputs.text.view())?;
    emb::save_params(&dir, "init_", &params)?;
    emb::write(&dir.join("fused_init.emb"), inputs.fuse_all(&params).view())?;
    Ok(())
}

fn load_fusion_inputs(cfg: &RunConfig, store: &ArtifactStore) -> Result<ModalityInputs<f32>> {
    ModalityInputs::new(
        emb::read(&store.path("fusion/collab.emb"))?,
        emb::read(&store.path("fusion/visual.emb"))?,
        emb::read(&store.path("fusion/text.emb"))?,
        cfg.ablation,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub alpha_v: f64,
    pub alpha_t: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenizerSummary {
    final_loss: f64,
    attention: AttentionSummary,
}

fn train_tokenizer(cfg: &RunConfig, store: &ArtifactStore) -> Result<()> {
    let inputs = load_fusion_inputs(cfg, store)?;
    let mut params = FusionParams::<f32>::identity(inputs.dim());
    emb::load_params(&store.path("fusion"), "init_", &mut params)?;
    let mut joint = JointFusion::new(inputs, params, cfg.fusion.lr);
    let out = train_rqvae(&mut joint, &cfg.rqvae)?;
    if let Some(msg) = out.aborted {
        return Err(Error::NonFinite {
            stage: "tokenizer training".into(),
            detail: msg,
        });
    }
    let dir = store.reset_dir("tokenizer")?;
    out.model.save(&dir, cfg.seed)?;
    emb::save_params(&dir, "fusion_", &joint.params)?;
    emb::write(&dir.join("fused.emb"), joint.fused().view())?;
    store.write_json("tokenizer/history.json", &out.history)?;
    let all: Vec<usize> = (0..joint.inputs.n_items()).collect();
    let (_, weights) = joint.inputs.fuse_rows(&all, &joint.params);
    let (alpha_v, alpha_t) = mean_attention(&weights);
    let summary = TokenizerSummary {
        final_loss: out.history.last().map_or(f64::NAN, |h| h.loss.total),
        attention: AttentionSummary { alpha_v, alpha_t },
    };
    store.write_json("tokenizer/summary.json", &summary)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdStats {
    pub n_items: usize,
    /// Items whose final id differs from their nearest-code path.
    pub reassigned: usize,
    /// Per-level perplexity of the nearest-code assignments.
    pub perplexity: Vec<f64>,
    pub mean_perplexity: f64,
}

fn assign(_cfg: &RunConfig, store: &ArtifactStore) -> Result<()> {
    let model = RqVae::<f32>::load(&store.path("tokenizer"))?;
    let fused = emb::read(&store.path("tokenizer/fused.emb"))?;
    let raw = model.codes(fused.view());
    let ids = assign_ids(fused.view(), &model)?;
    check_bijection(&ids)?;
    let perplexity = level_perplexities(&raw, model.n_levels(), model.codebook_size());
    let stats = IdStats {
        n_items: ids.len(),
        reassigned: ids.iter().zip(&raw).filter(|(a, b)| &a.tokens != *b).count(),
        mean_perplexity: perplexity.iter().sum::<f64>() / perplexity.len().max(1) as f64,
        perplexity,
    };
    store.reset_dir("ids")?;
    write_semantic_ids(&store.path("ids/semantic_ids.csv"), &ids)?;
    store.write_json("ids/stats.json", &stats)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenizerSide {
    #[serde(rename = "n_levels")]
    m: usize,
    #[serde(rename = "codebook_size")]
    k: usize,
}

fn vocab_of(store: &ArtifactStore) -> Result<VocabSpec> {
    let side: TokenizerSide = store.read_json("tokenizer/rqvae.json")?;
    Ok(VocabSpec::new(side.m as u32, side.k as u32))
}

fn train_gen(cfg: &RunConfig, store: &ArtifactStore) -> Result<()> {
    let split = load_split(store)?;
    let ids = read_semantic_ids(&store.path("ids/semantic_ids.csv"))?;
    let vocab = vocab_of(store)?;
    let out = train_generator::<f32>(&split, &ids, vocab, &cfg.generator)?;
    if !out.best_val_loss.is_finite() {
        return Err(Error::NonFinite {
            stage: "generator training".into(),
            detail: out.aborted.unwrap_or_else(|| "no finite validation loss".into()),
        });
    }
    if let Some(msg) = &out.aborted {
        warn!("{msg}; keeping the best checkpoint");
    }
    let dir = store.reset_dir("generator")?;
    out.model.save(&dir, cfg.seed, out.best_epoch, out.best_val_loss)?;
    store.write_json("generator/history.json", &out.history)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    pub hr: BTreeMap<String, f64>,
    pub ndcg: BTreeMap<String, f64>,
}

/// Expected metrics of a uniformly random ranking of `n` items.
pub fn random_baseline(ks: &[usize], n: usize) -> RandomBaseline {
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        hr.insert(k.to_string(), random_hit_rate(k, n));
        let g: f64 = (1..=k.min(n)).map(|r| 1.0 / ((r + 1) as f64).log2()).sum();
        ndcg.insert(k.to_string(), if n == 0 { 0.0 } else { g / n as f64 });
    }
    RandomBaseline { hr, ndcg }
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub model: EvalReport,
    pub popularity: EvalReport,
    pub random: RandomBaseline,
    pub n_items: usize,
    pub n_decodes: u64,
    pub invalid_decodes: u64,
    pub perplexity: Vec<f64>,
    pub mean_perplexity: f64,
    pub attention: AttentionSummary,
}

/// Model, trie and id table of a finished run.
pub struct Recommender {
    pub model: Generator<f32>,
    pub trie: CatalogTrie,
    pub table: IdTable,
    pub ids: Vec<SemanticId>,
}

impl Recommender {
    pub fn load(store: &ArtifactStore) -> Result<Self> {
        let ids = read_semantic_ids(&store.path("ids/semantic_ids.csv"))?;
        let model = Generator::<f32>::load(&store.path("generator"))?;
        let trie = CatalogTrie::build(&ids)?;
        let table = IdTable::new(&ids, model.vocab)?;
        Ok(Self { model, trie, table, ids })
    }

    pub fn recommend(&self, history: &[u32], k: usize, cfg: &crate::decoder::DecodeConfig) -> Result<RecommendationList> {
        recommend(&self.model, &self.trie, &self.table, history, k, cfg)
    }
}

fn evaluate_stage(cfg: &RunConfig, store: &ArtifactStore) -> Result<Metrics> {
    let split = load_split(store)?;
    let rec = Recommender::load(store)?;
    let mode = cfg.eval.mode;
    let ks = &cfg.eval.ks;
    let cold = ColdStartSlice::new(&split, cfg.eval.cold_threshold, mode);
    let mut subset = split.clone();
    if cfg.eval.max_users > 0 {
        subset.users.truncate(cfg.eval.max_users);
    }
    let in_subset: BTreeSet<u32> = subset.users.iter().map(|u| u.user).collect();
    let cold = if cold.users.iter().any(|u| in_subset.contains(u)) {
        Some(cold)
    } else {
        warn!("cold-start slice (threshold {}) has no evaluated users; skipping it", cfg.eval.cold_threshold);
        None
    };
    let mut n_decodes = 0u64;
    let mut invalid = 0u64;
    let model = evaluate(&subset, mode, ks, cold.as_ref(), |_, history, k| {
        let list = rec.recommend(history, k, &cfg.decode)?;
        for r in &list.items {
            n_decodes += 1;
            invalid += u64::from(rec.trie.item(&r.codes) != Some(r.item));
        }
        Ok((list.item_ids(), list.shortfall))
    })?;
    let order = popularity_ranking(&split);
    let popularity = evaluate(&subset, mode, ks, cold.as_ref(), |_, history, k| {
        Ok(popularity_recommend(&order, history, k, cfg.decode.exclude_seen))
    })?;
    let ids: IdStats = store.read_json("ids/stats.json")?;
    let tok: TokenizerSummary = store.read_json("tokenizer/summary.json")?;
    let metrics = Metrics {
        model,
        popularity,
        random: random_baseline(ks, split.n_items),
        n_items: split.n_items,
        n_decodes,
        invalid_decodes: invalid,
        perplexity: ids.perplexity,
        mean_perplexity: ids.mean_perplexity,
        attention: tok.attention,
    };
    store.write_json("metrics.json", &metrics)?;
    Ok(metrics)
}

/// Map a sweep parameter name to its config key.
pub fn sweep_key(param: &str) -> Result<&'static str> {
    match param {
        "M" | "rqvae.M" => Ok("rqvae.M"),
        "K" | "rqvae.K" => Ok("rqvae.K"),
        "lambda_q" | "λq" | "rqvae.lambda_q" => Ok("rqvae.lambda_q"),
        "lambda_d" | "λd" | "rqvae.lambda_d" => Ok("rqvae.lambda_d"),
        other => Err(Error::config(format!("cannot sweep `{other}`; choose one of M, K, lambda_q, lambda_d"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub hr: Option<f64>,
    pub ndcg: Option<f64>,
    pub perplexity: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub param: String,
    pub k: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = format!("param,value,hr@{0},ndcg@{0},perplexity\n", self.k);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.param, r.value, cell(r.hr), cell(r.ndcg), cell(r.perplexity));
        }
        s
    }

    /// Column-oriented form for plotting.
    pub fn to_plot_json(&self) -> serde_json::Value {
        serde_json::json!({
            "param": self.param,
            "k": self.k,
            "values": self.rows.iter().map(|r| r.value.clone()).collect::<Vec<_>>(),
            "hr": self.rows.iter().map(|r| r.hr).collect::<Vec<_>>(),
            "ndcg": self.rows.iter().map(|r| r.ndcg).collect::<Vec<_>>(),
            "perplexity": self.rows.iter().map(|r| r.perplexity).collect::<Vec<_>>(),
            "errors": self.rows.iter().map(|r| r.error.clone()).collect::<Vec<_>>(),
        })
    }
}

/// Run the pipeline once per value under `<root>/sweep/<param>=<value>`.
/// Failing values are recorded and the sweep moves on.
pub fn run_sweep(cfg: &RunConfig, store: &ArtifactStore, param: &str, values: &[String], force: bool) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let key = sweep_key(param)?;
    let short = key.trim_start_matches("rqvae.");
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut c = cfg.clone();
        c.apply_assignments([format!("{key}={v}").as_str()])?;
        configs.push(c);
    }
    let k = if cfg.eval.ks.contains(&10) { 10 } else { cfg.eval.ks.iter().copied().min().unwrap_or(10) };
    let mut rows = Vec::with_capacity(values.len());
    for (v, c) in values.iter().zip(configs) {
        let dir = store.path(&format!("sweep/{short}={v}"));
        let outcome = c.validate().and_then(|_| ArtifactStore::open(&dir)).and_then(|s| run_pipeline(&c, &s, force));
        let row = match outcome {
            Ok(m) => SweepRow {
                param: short.to_string(),
                value: v.clone(),
                hr: m.model.all.hr_at(k),
                ndcg: m.model.all.ndcg_at(k),
                perplexity: Some(m.mean_perplexity),
                error: None,
            },
            Err(e) => {
                warn!("sweep {short}={v} failed: {e}");
                SweepRow {
                    param: short.to_string(),
                    value: v.clone(),
                    hr: None,
                    ndcg: None,
                    perplexity: None,
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    let result = SweepResult { param: short.to_string(), k, rows };
    fs::write(store.path(&format!("sweep_{short}.csv")), result.to_csv())?;
    store.write_json(&format!("sweep_{short}.json"), &result.to_plot_json())?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub present: bool,
    pub hr: BTreeMap<String, f64>,
    pub ndcg: BTreeMap<String, f64>,
    pub delta_hr: Option<BTreeMap<String, f64>>,
    pub delta_ndcg: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub ks: Vec<usize>,
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

fn read_metrics(dir: &Path) -> Option<Metrics> {
    let text = fs::read_to_string(dir.join("metrics.json")).ok()?;
    serde_json::from_str(&text).ok()
}

/// Compare runs on their shared cutoffs; deltas are against the first run.
pub fn build_report(dirs: &[PathBuf]) -> Result<Report> {
    if dirs.is_empty() {
        return Err(Error::config("report needs at least one run directory"));
    }
    let metrics: Vec<Option<Metrics>> = dirs.iter().map(|d| read_metrics(d)).collect();
    let mut warnings = Vec::new();
    let mut shared: Option<BTreeSet<usize>> = None;
    for (d, m) in dirs.iter().zip(&metrics) {
        match m {
            None => warnings.push(format!("{}: no readable metrics.json", d.display())),
            Some(m) => {
                let ks: BTreeSet<usize> = m.model.all.hr.keys().filter_map(|k| k.parse().ok()).collect();
                shared = Some(match shared {
                    None => ks,
                    Some(s) => {
                        if s != ks {
                            warnings.push(format!(
                                "{}: cutoffs {ks:?} differ from earlier runs; reporting the intersection",
                                d.display()
                            ));
                        }
                        s.intersection(&ks).copied().collect()
                    }
                });
            }
        }
    }
    let ks: Vec<usize> = shared.unwrap_or_default().into_iter().collect();
    let pick = |m: &BTreeMap<String, f64>| -> BTreeMap<String, f64> {
        ks.iter().filter_map(|k| m.get(&k.to_string()).map(|v| (k.to_string(), *v))).collect()
    };
    let base = metrics[0].as_ref().map(|m| (pick(&m.model.all.hr), pick(&m.model.all.ndcg)));
    if base.is_none() && dirs.len() > 1 {
        warnings.push("baseline run has no metrics; deltas omitted".into());
    }
    let diff = |a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>| -> BTreeMap<String, f64> {
        a.iter().map(|(k, v)| (k.clone(), v - b[k])).collect()
    };
    let rows = dirs
        .iter()
        .zip(&metrics)
        .enumerate()
        .map(|(i, (d, m))| {
            let run = d.display().to_string();
            match m {
                None => ReportRow {
                    run,
                    present: false,
                    hr: BTreeMap::new(),
                    ndcg: BTreeMap::new(),
                    delta_hr: None,
                    delta_ndcg: None,
                },
                Some(m) => {
                    let hr = pick(&m.model.all.hr);
                    let ndcg = pick(&m.model.all.ndcg);
                    let (delta_hr, delta_ndcg) = match (&base, i) {
                        (Some((bh, bn)), i) if i > 0 => (Some(diff(&hr, bh)), Some(diff(&ndcg, bn))),
                        _ => (None, None),
                    };
                    ReportRow { run, present: true, hr, ndcg, delta_hr, delta_ndcg }
                }
            }
        })
        .collect();
    Ok(Report { ks, rows, warnings })
}

impl Report {
    /// Aligned text table.
    pub fn render(&self) -> String {
        let mut header = vec!["run".to_string()];
        for k in &self.ks {
            header.push(format!("HR@{k}"));
            header.push(format!("NDCG@{k}"));
        }
        for k in &self.ks {
            header.push(format!("ΔHR@{k}"));
            header.push(format!("ΔNDCG@{k}"));
        }
        let mut table = vec![header];
        for r in &self.rows {
            let mut line = vec![r.run.clone()];
            if !r.present {
                line.push("absent".into());
                table.push(line);
                continue;
            }
            for k in &self.ks {
                let k = k.to_string();
                line.push(format!("{:.4}", r.hr[&k]));
                line.push(format!("{:.4}", r.ndcg[&k]));
            }
            if let (Some(dh), Some(dn)) = (&r.delta_hr, &r.delta_ndcg) {
                for k in &self.ks {
                    let k = k.to_string();
                    line.push(format!("{:+.4}", dh[&k]));
                    line.push(format!("{:+.4}", dn[&k]));
                }
            }
            table.push(line);
        }
        let cols = table.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..cols)
            .map(|c| table.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}

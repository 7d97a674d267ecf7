//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero when any of them fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use semrec::artifacts::ArtifactStore;
use semrec::collab::{propagate, BipartiteGraph, CollabEmbeddings};
use semrec::config::RunConfig;
use semrec::decoder::{beam_search, exhaustive_ranking, CatalogTrie, DecodeConfig};
use semrec::evaluation::{aggregate, ndcg};
use semrec::fusion::{FusionParams, ModalityInputs, ModalityMask};
use semrec::generator::{ntp_loss, ntp_loss_and_grad, Generator, GeneratorConfig, Sequence, VocabSpec};
use semrec::optim::{gaussian_matrix, rng_from_seed, Parameters};
use semrec::pipeline::{self, IdStats, Metrics, Recommender};
use semrec::rqvae::{check_bijection, init_codebooks, quantize, Codebook, FixedInputs, RqVae, RqVaeConfig};
use semrec::Result;

const SEEDS: [u64; 3] = [1, 2, 3];

/// Four content groups over eight clusters, two visual by two textual, so
/// no single signal pins down an item's neighbourhood.
const ABLATION_SET: &[&str] = &[
    "synth.content_groups=4",
    "synth.visual_groups=2",
    "synth.popularity_skew=1.0",
    "synth.n_users=400",
    "synth.locality=0.1",
];

/// Content follows the cluster; a heavy popularity tail and a 2-core
/// filter leave many items with a handful of interactions.
const COLD_SET: &[&str] = &[
    "synth.popularity_skew=2.0",
    "synth.n_users=1500",
    "synth.n_items=400",
    "synth.n_clusters=16",
    "synth.locality=0.1",
    "synth.noise=0.5",
    "data.k_core=2",
    "rqvae.K=16",
];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

fn desk(seed: u64, sets: &[&str]) -> Result<RunConfig> {
    let mut cfg = RunConfig::desk();
    let seed = format!("seed={seed}");
    cfg.apply_assignments(std::iter::once(seed.as_str()).chain(sets.iter().copied()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cfg: &RunConfig, dir: &Path) -> Result<(ArtifactStore, Metrics)> {
    let store = ArtifactStore::open(dir)?;
    let m = pipeline::run_pipeline(cfg, &store, false)?;
    Ok((store, m))
}

fn hr10(m: &Metrics) -> f64 {
    m.model.all.hr_at(10).unwrap_or(f64::NAN)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

/// The seed-42 desk run shared by several criteria.
struct Reference {
    _dir: tempfile::TempDir,
    store: ArtifactStore,
    metrics: Metrics,
    cfg: RunConfig,
}

fn reference() -> Result<Reference> {
    let dir = tempfile::tempdir()?;
    let cfg = desk(42, &[])?;
    let (store, metrics) = run(&cfg, dir.path())?;
    Ok(Reference { _dir: dir, store, metrics, cfg })
}

fn c1(r: &Reference) -> Result<Verdict> {
    let s = &r.cfg.synth;
    let shape_ok = (s.seed, s.n_users, s.n_items, s.n_clusters, r.cfg.rqvae.n_levels, r.cfg.rqvae.codebook_size)
        == (42, 1000, 200, 8, 4, 32);
    let hr = hr10(&r.metrics);
    let pop = r.metrics.popularity.all.hr_at(10).unwrap_or(f64::NAN);
    let rnd = 10.0 / 200.0;
    verdict(
        shape_ok && hr >= 2.0 * pop && hr >= 5.0 * rnd,
        format!("HR@10 {hr:.4}, popularity {pop:.4} (x{:.1}), random {rnd:.4} (x{:.1})", hr / pop, hr / rnd),
    )
}

fn c2() -> Result<Verdict> {
    let variants = [
        ("w/o Collab", "ablation.use_collab=false"),
        ("w/o Image", "ablation.use_image=false"),
        ("w/o Text", "ablation.use_text=false"),
    ];
    let mut wins = [0usize; 3];
    let mut rows = Vec::new();
    for seed in SEEDS {
        let dir = tempfile::tempdir()?;
        let (_, full) = run(&desk(seed, ABLATION_SET)?, &dir.path().join("full"))?;
        let mut row = format!("s{seed}: full {:.3}", hr10(&full));
        for (v, (name, set)) in variants.iter().enumerate() {
            let sets: Vec<&str> = ABLATION_SET.iter().copied().chain([*set]).collect();
            let (_, m) = run(&desk(seed, &sets)?, &dir.path().join(format!("v{v}")))?;
            if hr10(&full) > hr10(&m) {
                wins[v] += 1;
            }
            row.push_str(&format!(", {name} {:.3}", hr10(&m)));
        }
        rows.push(row);
    }
    let pass = wins.iter().all(|&w| 2 * w > SEEDS.len());
    verdict(pass, format!("wins per ablation {wins:?}/3; {}", rows.join("; ")))
}

fn c3(r: &Reference) -> Result<Verdict> {
    let split = pipeline::load_split(&r.store)?;
    let rec = Recommender::load(&r.store)?;
    let decode = DecodeConfig { beam: r.cfg.decode.beam, exclude_seen: false };
    let (mut total, mut invalid) = (0u64, 0u64);
    for u in split.users.iter().take(1000) {
        for item in rec.recommend(&u.test_history(), 10, &decode)?.items {
            total += 1;
            let known = rec.ids.get(item.item as usize).is_some_and(|id| id.tokens == item.codes);
            if !known || rec.trie.item(&item.codes) != Some(item.item) {
                invalid += 1;
            }
        }
    }
    let m = &r.metrics;
    verdict(
        total >= 1000 && invalid == 0 && m.n_decodes >= 1000 && m.invalid_decodes == 0,
        format!("{total} direct decodes, {invalid} invalid; evaluation {} decodes, {} invalid", m.n_decodes, m.invalid_decodes),
    )
}

fn c4(r: &Reference) -> Result<Verdict> {
    let split = pipeline::load_split(&r.store)?;
    let rec = Recommender::load(&r.store)?;
    let n = rec.ids.len();
    let mut checked = 0;
    let mut equal = true;
    for u in split.users.iter().step_by(97).take(8) {
        let prompt = rec.table.prompt(&u.test_history(), rec.model.max_len() + 1 - rec.trie.depth())?;
        let beam = beam_search(&rec.model, &prompt, &rec.trie, n)?;
        let all = exhaustive_ranking(&rec.model, &prompt, &rec.trie)?;
        equal &= beam.len() == n && beam == all;
        checked += 1;
    }
    verdict(equal && n <= 200, format!("{checked} prompts, N = {n}, beam width N"))
}

fn c5() -> Result<Verdict> {
    let h = 1e-6;

    // fusion attention
    let mut rng = rng_from_seed(21);
    let d = 4;
    let inputs = ModalityInputs::<f64>::new(
        gaussian_matrix(&mut rng, 3, d, 1.0),
        gaussian_matrix(&mut rng, 3, d, 1.0),
        gaussian_matrix(&mut rng, 3, d, 1.0),
        ModalityMask::default(),
    )?;
    let p = FusionParams::<f64>::init(d, 0.3, 4);
    let items = [0usize, 1, 2];
    let loss = |q: &FusionParams<f64>| -> f64 { inputs.fuse_rows(&items, q).0.iter().map(|v| v * v).sum() };
    let (x, _) = inputs.fuse_rows(&items, &p);
    let mut grads = p.zeros_like();
    inputs.backward_rows(&items, &p, (&x * 2.0).view(), &mut grads);
    let (mut ana, mut num) = (Vec::new(), Vec::new());
    for t in 0..2 {
        for j in 0..d * d {
            let mut plus = p.clone();
            plus.tensors_mut()[t][j] += h;
            let mut minus = p.clone();
            minus.tensors_mut()[t][j] -= h;
            num.push((loss(&plus) - loss(&minus)) / (2.0 * h));
            ana.push(grads.tensors()[t][j]);
        }
    }
    let e_fusion = rel_err(&ana, &num);

    // RQ-VAE encoder
    let cfg = RqVaeConfig {
        n_levels: 2,
        codebook_size: 4,
        hidden: 5,
        latent: 3,
        lambda_d: 0.5,
        seed: 7,
        ..RqVaeConfig::default()
    };
    let mut model = RqVae::<f64>::new(6, &cfg)?;
    let mut x: Array2<f64> = gaussian_matrix(&mut rng, 3, 6, 0.1);
    let centers: Array2<f64> = gaussian_matrix(&mut rng, 3, 6, 1.0);
    x += &centers;
    init_codebooks(&mut model, &FixedInputs(x.view()), &cfg);
    for cb in model.codebooks.iter_mut() {
        cb.vectors += &gaussian_matrix::<f64, _>(&mut rng, 4, 3, 0.5);
    }
    let frozen = model.freeze(x.view());
    let mut g = model.zeros_like();
    model.loss_and_grad(x.view(), &mut g);
    let (mut ana, mut num) = (Vec::new(), Vec::new());
    for (t, (name, _)) in model.tensor_specs().iter().enumerate() {
        if !name.starts_with("enc_") {
            continue;
        }
        for j in 0..g.tensors()[t].len() {
            let mut plus = model.clone();
            plus.tensors_mut()[t][j] += h;
            let mut minus = model.clone();
            minus.tensors_mut()[t][j] -= h;
            num.push((plus.surrogate_loss(x.view(), &frozen).total - minus.surrogate_loss(x.view(), &frozen).total) / (2.0 * h));
            ana.push(g.tensors()[t][j]);
        }
    }
    let e_rqvae = rel_err(&ana, &num);

    // generator token embeddings
    let gcfg = GeneratorConfig {
        n_layers: 2,
        n_heads: 2,
        width: 8,
        ffn_mult: 2,
        max_len: 16,
        seed: 5,
        init_std: 0.3,
        ..GeneratorConfig::default()
    };
    let m = Generator::<f64>::new(VocabSpec::new(2, 3), &gcfg)?;
    let batch = vec![
        Sequence::full(vec![1, 2, 6, 4, 7, 3]),
        Sequence { tokens: vec![1, 4, 5, 2, 6], loss_from: 3 },
    ];
    let mut g = m.zeros_like();
    ntp_loss_and_grad(&m, &batch, &mut g)?;
    let t = m.tensor_specs().iter().position(|(n, _)| n == "tok_emb").expect("tok_emb tensor");
    let ana = g.tensors()[t].to_vec();
    let mut num = Vec::with_capacity(ana.len());
    for j in 0..ana.len() {
        let mut plus = m.clone();
        plus.tensors_mut()[t][j] += h;
        let mut minus = m.clone();
        minus.tensors_mut()[t][j] -= h;
        num.push((ntp_loss(&plus, &batch)? - ntp_loss(&minus, &batch)?) / (2.0 * h));
    }
    let e_gen = rel_err(&ana, &num);

    verdict(
        e_fusion < 1e-4 && e_rqvae < 1e-4 && e_gen < 1e-3,
        format!("relative error fusion {e_fusion:.2e}, rq-vae encoder {e_rqvae:.2e}, generator tok_emb {e_gen:.2e}"),
    )
}

fn c6() -> Result<Verdict> {
    // Single-precision values, double arithmetic: every sum and difference
    // below is exact, so evaluation order cannot matter.
    let mut rng = rng_from_seed(3);
    let books: Vec<Codebook<f64>> = (0..4)
        .map(|m| {
            let v: Array2<f32> = gaussian_matrix(&mut rng, 16, 8, 1.0 / (m + 1) as f64);
            Codebook::new(m + 1, v.mapv(f64::from))
        })
        .collect();
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let z: Array1<f64> = (0..8).map(|_| f64::from(rng.random_range(-2.0f32..2.0))).collect();
        let q = quantize(z.view(), &books);
        let mut sum = Array1::<f64>::zeros(8);
        for (level, &c) in q.codes.iter().enumerate() {
            sum += &books[level].vectors.row(c as usize);
        }
        let lhs = &z - &sum;
        mismatches += lhs.iter().zip(q.residual.iter()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    }
    verdict(mismatches == 0, format!("1000 latents, {mismatches} non-identical coordinates"))
}

fn c7() -> Result<Verdict> {
    let mut rows = Vec::new();
    let mut all = true;
    for seed in SEEDS {
        let dir = tempfile::tempdir()?;
        let mut ppl = Vec::new();
        for ld in ["rqvae.lambda_d=0", "rqvae.lambda_d=0.01"] {
            let cfg = desk(seed, &[ld])?;
            let store = ArtifactStore::open(dir.path().join(ld))?;
            for stage in ["prepare", "train-collab", "fuse", "train-tokenizer", "assign-ids"] {
                pipeline::run_stage(&cfg, &store, stage, false)?;
            }
            let stats: IdStats = store.read_json("ids/stats.json")?;
            ppl.push(stats.mean_perplexity);
        }
        all &= ppl[1] > ppl[0];
        rows.push(format!("s{seed}: {:.2} -> {:.2}", ppl[0], ppl[1]));
    }
    verdict(all, format!("mean perplexity lambda_d 0 -> 0.01: {}", rows.join(", ")))
}

fn c8(r: &Reference) -> Result<Verdict> {
    let n = pipeline::load_items(&r.store)?.len();
    let rec = Recommender::load(&r.store)?;
    let tuples: BTreeSet<Vec<u32>> = rec.ids.iter().map(|s| s.tokens.clone()).collect();
    let items: BTreeSet<u32> = rec.ids.iter().map(|s| s.item_id).collect();
    let rebuilt = CatalogTrie::build(&rec.ids)?;
    let ok = check_bijection(&rec.ids).is_ok()
        && rec.ids.len() == n
        && tuples.len() == n
        && items.len() == n
        && rebuilt.n_leaves() == n
        && rebuilt.count_leaves() == n;
    verdict(ok, format!("N = {n}, distinct ids {}, trie leaves {}", tuples.len(), rebuilt.count_leaves()))
}

fn c9() -> Result<Verdict> {
    // targets at ranks 1, 3, 7, absent and 2
    let fixture: Vec<(Vec<u32>, u32)> = vec![
        (vec![5, 1, 2, 3, 4, 6, 7, 8, 9, 10], 5),
        (vec![1, 2, 5, 3, 4, 6, 7, 8, 9, 10], 5),
        (vec![1, 2, 3, 4, 6, 7, 5, 8, 9, 10], 5),
        (vec![1, 2, 3, 4, 6, 7, 8, 9, 10, 11], 5),
        (vec![1, 5, 2, 3, 4, 6, 7, 8, 9, 10], 5),
    ];
    let r = aggregate("all", &fixture, &[1, 5, 10])?;
    let third = 1.0 / 3.0f64.log2();
    let want = [
        (1, 0.2, 0.2),
        (5, 0.6, (1.0 + 0.5 + 0.0 + 0.0 + third) / 5.0),
        (10, 0.8, (1.0 + 0.5 + 1.0 / 3.0 + 0.0 + third) / 5.0),
    ];
    let mut ok = ndcg(&fixture[1].0, 5, 10) == 0.5 && r.n_users == 5;
    for (k, hr, nd) in want {
        ok &= r.hr_at(k) == Some(hr) && r.ndcg_at(k) == Some(nd);
    }
    verdict(ok, format!("HR {:?}, NDCG {:?}, rank-3 NDCG {}", r.hr, r.ndcg, ndcg(&fixture[1].0, 5, 10)))
}

fn c10() -> Result<Verdict> {
    let edges = vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 0), (2, 3), (3, 4), (3, 2), (2, 4)];
    let g = BipartiteGraph::from_edges(4, 5, edges)?;
    let n = g.n_users + g.n_items;
    let mut a = Array2::<f64>::zeros((n, n));
    for &(u, i) in &g.edges {
        let w = 1.0 / ((g.deg_u[u as usize] * g.deg_i[i as usize]) as f64).sqrt();
        a[[u as usize, g.n_users + i as usize]] = w;
        a[[g.n_users + i as usize, u as usize]] = w;
    }
    let mut rng = rng_from_seed(9);
    let mut worst = 0.0f64;
    for layers in 1..=3u32 {
        let e = CollabEmbeddings {
            user_emb: gaussian_matrix(&mut rng, g.n_users, 3, 1.0),
            item_emb: gaussian_matrix(&mut rng, g.n_items, 3, 1.0),
            n_layers: layers,
        };
        let out = propagate(&g, &e);
        let e0 = ndarray::concatenate(Axis(0), &[e.user_emb.view(), e.item_emb.view()]).expect("same width");
        let mut acc = e0.clone();
        let mut cur = e0;
        for _ in 0..layers {
            cur = a.dot(&cur);
            acc += &cur;
        }
        acc /= layers as f64 + 1.0;
        let got = ndarray::concatenate(Axis(0), &[out.user_emb.view(), out.item_emb.view()]).expect("same width");
        for (x, y) in got.iter().zip(acc.iter()) {
            worst = worst.max((x - y).abs());
        }
    }
    verdict(worst < 1e-6, format!("{n} nodes, layers 1..=3, max abs diff {worst:.2e}"))
}

fn c11() -> Result<Verdict> {
    let text = RunConfig::default().to_flat();
    let c = RunConfig::from_flat(&text)?;
    let lines: BTreeSet<&str> = text.lines().collect();
    let ok = c.d == 768
        && c.rqvae.n_levels == 4
        && c.rqvae.codebook_size == 512
        && c.rqvae.lambda_q == 0.25
        && c.rqvae.lambda_d == 0.01
        && c.rqvae.lr == 1e-4
        && c.generator.lr == 1e-4
        && ["d = 768", "rqvae.M = 4", "rqvae.K = 512", "rqvae.lambda_q = 0.25", "rqvae.lambda_d = 0.01"]
            .iter()
            .all(|l| lines.contains(l));
    verdict(
        ok,
        format!(
            "d={} M={} K={} lambda_q={} lambda_d={} lr={} (generator lr={})",
            c.d, c.rqvae.n_levels, c.rqvae.codebook_size, c.rqvae.lambda_q, c.rqvae.lambda_d, c.rqvae.lr, c.generator.lr
        ),
    )
}

fn c12() -> Result<Verdict> {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let dir = tempfile::tempdir()?;
        let (_, full) = run(&desk(seed, COLD_SET)?, &dir.path().join("full"))?;
        let sets: Vec<&str> =
            COLD_SET.iter().copied().chain(["ablation.use_image=false", "ablation.use_text=false"]).collect();
        let (_, free) = run(&desk(seed, &sets)?, &dir.path().join("free"))?;
        let cold = |m: &Metrics| m.model.cold.as_ref().and_then(|c| c.hr_at(10).map(|h| (h, c.n_users)));
        match (cold(&full), cold(&free)) {
            (Some((a, n)), Some((b, _))) => {
                if a > b {
                    wins += 1;
                }
                rows.push(format!("s{seed}: full {a:.3} vs content-free {b:.3} ({n} users)"));
            }
            _ => rows.push(format!("s{seed}: empty cold slice")),
        }
    }
    verdict(2 * wins > SEEDS.len(), format!("{wins}/3 seeds; {}", rows.join("; ")))
}

fn c13(r: &Reference) -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let (store, _) = run(&r.cfg, dir.path())?;
    let a = std::fs::read(r.store.metrics_path())?;
    let b = std::fs::read(store.metrics_path())?;
    verdict(a == b, format!("{} bytes, identical: {}", a.len(), a == b))
}

fn main() {
    let mut failed = 0;
    let mut report = |id: &str, name: &str, f: &mut dyn FnMut() -> Result<Verdict>| {
        let t = Instant::now();
        let (pass, detail) = match f() {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {id} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    };
    let t0 = Instant::now();
    let shared = reference();
    let with_ref = |f: fn(&Reference) -> Result<Verdict>| {
        let shared = &shared;
        move || match shared {
            Ok(r) => f(r),
            Err(e) => Err(semrec::Error::InvalidInput(format!("reference run failed: {e}"))),
        }
    };
    println!("reference run: {:.1}s", t0.elapsed().as_secs_f64());
    report("C1", "end-to-end signal", &mut with_ref(c1));
    report("C2", "ablation ordering", &mut c2);
    report("C3", "decoding validity", &mut with_ref(c3));
    report("C4", "beam equals exhaustive", &mut with_ref(c4));
    report("C5", "gradient checks", &mut c5);
    report("C6", "telescoping identity", &mut c6);
    report("C7", "diversity loss raises perplexity", &mut c7);
    report("C8", "semantic-id bijection", &mut with_ref(c8));
    report("C9", "metric oracle", &mut c9);
    report("C10", "graph oracle", &mut c10);
    report("C11", "default config", &mut c11);
    report("C12", "cold-start slice", &mut c12);
    report("C13", "determinism", &mut with_ref(c13));
    println!("{} of 13 criteria passed in {:.1}s", 13 - failed, t0.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}

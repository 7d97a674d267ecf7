//! Interaction logs, item feature catalogs, k-core filtering, leave-one-out
//! splitting and the synthetic clustered dataset.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::optim::{derive_seed, rng_from_seed};
use crate::{Error, Result};

/// Dense id assignment for raw string identifiers, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdRegistry {
    raw: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_raw<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut reg = Self::new();
        for id in ids {
            reg.intern(id.as_ref());
        }
        reg
    }

    pub fn intern(&mut self, raw: &str) -> u32 {
        if let Some(&id) = self.index.get(raw) {
            return id;
        }
        let id = self.raw.len() as u32;
        self.raw.push(raw.to_owned());
        self.index.insert(raw.to_owned(), id);
        id
    }

    pub fn get(&self, raw: &str) -> Option<u32> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, id: u32) -> &str {
        &self.raw[id as usize]
    }

    pub fn raw_ids(&self) -> &[String] {
        &self.raw
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
}

/// Chronological user→item events with dense ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionLog {
    pub events: Vec<Event>,
    pub users: IdRegistry,
    pub items: IdRegistry,
    /// Item sequence per dense user id, sorted by timestamp (stable on ties).
    pub per_user: Vec<Vec<u32>>,
}

impl InteractionLog {
    /// Build a log from raw `(user, item, timestamp)` triples, assigning
    /// dense ids in order of first appearance.
    pub fn from_raw<'a, I>(raw: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str, i64)>,
    {
        let mut users = IdRegistry::new();
        let mut items = IdRegistry::new();
        let events = raw
            .into_iter()
            .map(|(u, i, t)| Event {
                user: users.intern(u),
                item: items.intern(i),
                timestamp: t,
            })
            .collect();
        Self::assemble(events, users, items)
    }

    fn assemble(events: Vec<Event>, users: IdRegistry, items: IdRegistry) -> Self {
        let mut buckets: Vec<Vec<(i64, u32)>> = vec![Vec::new(); users.len()];
        for e in &events {
            buckets[e.user as usize].push((e.timestamp, e.item));
        }
        let per_user = buckets
            .into_iter()
            .map(|mut seq| {
                // stable: ties keep input order
                seq.sort_by_key(|&(t, _)| t);
                seq.into_iter().map(|(_, i)| i).collect()
            })
            .collect();
        Self {
            events,
            users,
            items,
            per_user,
        }
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Write as `user<TAB>item<TAB>timestamp` lines using raw ids.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for e in &self.events {
            writeln!(
                out,
                "{}\t{}\t{}",
                self.users.raw(e.user),
                self.items.raw(e.item),
                e.timestamp
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn load_interactions(path: &Path, delimiter: char) -> Result<InteractionLog> {
    let file = fs::File::open(path)?;
    parse_interactions(file, &path.display().to_string(), delimiter)
}

/// Parse `user<delim>item<delim>timestamp` lines. Blank lines are skipped.
pub fn parse_interactions<R: Read>(
    reader: R,
    origin: &str,
    delimiter: char,
) -> Result<InteractionLog> {
    let mut triples: Vec<(String, String, i64)> = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: origin.to_owned(),
            line: idx + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(delimiter).collect();
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 fields separated by {delimiter:?}, found {}",
                fields.len()
            )));
        }
        let (user, item) = (fields[0].trim(), fields[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        let ts: i64 = fields[2]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad timestamp {:?}: {e}", fields[2])))?;
        triples.push((user.to_owned(), item.to_owned(), ts));
    }
    if triples.is_empty() {
        return Err(Error::EmptyDataset(format!("{origin} has no events")));
    }
    Ok(InteractionLog::from_raw(
        triples.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)),
    ))
}

/// Iteratively drop users and items with fewer than `k` events until no
/// such node remains. Duplicate events count towards degree.
pub fn filter_core(log: &InteractionLog, k: u32) -> Result<InteractionLog> {
    if k == 0 {
        return Err(Error::config("k-core threshold must be at least 1"));
    }
    let k = k as usize;
    let mut alive = vec![true; log.events.len()];
    loop {
        let mut du = vec![0usize; log.n_users()];
        let mut di = vec![0usize; log.n_items()];
        for (e, _) in log.events.iter().zip(&alive).filter(|(_, &a)| a) {
            du[e.user as usize] += 1;
            di[e.item as usize] += 1;
        }
        let mut changed = false;
        for (e, a) in log.events.iter().zip(alive.iter_mut()) {
            if *a && (du[e.user as usize] < k || di[e.item as usize] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let kept = log
        .events
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(e, _)| (log.users.raw(e.user), log.items.raw(e.item), e.timestamp));
    let out = InteractionLog::from_raw(kept);
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{k}-core filtering removed every interaction"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user: u32,
    pub train: Vec<u32>,
    pub valid: u32,
    pub test: u32,
}

impl UserSplit {
    /// History used when predicting the test target (train + valid).
    pub fn test_history(&self) -> Vec<u32> {
        let mut h = self.train.clone();
        h.push(self.valid);
        h
    }
}

/// Leave-one-out split: last item is the test target, the one before it the
/// validation target, everything earlier is training history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
    pub n_users: usize,
    pub n_items: usize,
    pub min_len: u32,
}

impl SplitDataset {
    pub fn n_train_interactions(&self) -> usize {
        self.users.iter().map(|u| u.train.len()).sum()
    }

    /// Number of training-prefix occurrences of every item.
    pub fn train_item_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.n_items];
        for u in &self.users {
            for &i in &u.train {
                counts[i as usize] += 1;
            }
        }
        counts
    }
}

pub fn leave_one_out_split(log: &InteractionLog) -> Result<SplitDataset> {
    let users: Vec<UserSplit> = log
        .per_user
        .iter()
        .enumerate()
        .filter(|(_, seq)| seq.len() >= 3)
        .map(|(u, seq)| {
            let n = seq.len();
            UserSplit {
                user: u as u32,
                train: seq[..n - 2].to_vec(),
                valid: seq[n - 2],
                test: seq[n - 1],
            }
        })
        .collect();
    if users.is_empty() {
        return Err(Error::EmptyDataset(
            "no user has the three interactions a leave-one-out split needs".into(),
        ));
    }
    Ok(SplitDataset {
        users,
        n_users: log.n_users(),
        n_items: log.n_items(),
        min_len: 3,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: u64,
    pub n_items: u64,
    pub n_interactions: u64,
    pub avg_len: f64,
    pub sparsity: f64,
}

impl DatasetStats {
    pub fn from_counts(n_users: u64, n_items: u64, n_interactions: u64) -> Self {
        let cells = n_users as f64 * n_items as f64;
        Self {
            n_users,
            n_items,
            n_interactions,
            avg_len: n_interactions as f64 / n_users as f64,
            sparsity: 1.0 - n_interactions as f64 / cells,
        }
    }
}

pub fn compute_stats(log: &InteractionLog) -> Result<DatasetStats> {
    if log.is_empty() {
        return Err(Error::EmptyDataset("cannot compute statistics".into()));
    }
    Ok(DatasetStats::from_counts(
        log.n_users() as u64,
        log.n_items() as u64,
        log.n_interactions() as u64,
    ))
}

/// Feature rows for one modality keyed by raw item id.
#[derive(Debug, Clone)]
pub struct ModalityRows {
    pub ids: Vec<String>,
    pub values: Array2<f32>,
}

/// Per-item visual and textual feature matrices aligned with an item registry.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemCatalog {
    pub item_ids: IdRegistry,
    pub visual: Array2<f32>,
    pub text: Array2<f32>,
    pub visual_present: Vec<bool>,
    pub text_present: Vec<bool>,
}

impl ItemCatalog {
    /// Align modality rows with `items`. Items without a row receive the
    /// column mean of the rows that are present and a `false` presence flag.
    pub fn from_modalities(
        items: &IdRegistry,
        visual: &ModalityRows,
        text: &ModalityRows,
    ) -> Result<Self> {
        let (v, vp) = align_modality(items, visual, "visual")?;
        let (t, tp) = align_modality(items, text, "text")?;
        Ok(Self {
            item_ids: items.clone(),
            visual: v,
            text: t,
            visual_present: vp,
            text_present: tp,
        })
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Re-align to another registry (e.g. after k-core filtering).
    pub fn reindex(&self, items: &IdRegistry) -> Result<Self> {
        let pick = |m: &Array2<f32>, present: &[bool]| -> ModalityRows {
            let rows: Vec<usize> = (0..self.n_items()).filter(|&i| present[i]).collect();
            ModalityRows {
                ids: rows
                    .iter()
                    .map(|&i| self.item_ids.raw(i as u32).to_owned())
                    .collect(),
                values: m.select(Axis(0), &rows),
            }
        };
        Self::from_modalities(
            items,
            &pick(&self.visual, &self.visual_present),
            &pick(&self.text, &self.text_present),
        )
    }
}

fn align_modality(
    items: &IdRegistry,
    rows: &ModalityRows,
    name: &str,
) -> Result<(Array2<f32>, Vec<bool>)> {
    if rows.ids.len() != rows.values.nrows() {
        return Err(Error::mismatch(
            format!("{name} feature rows vs ids"),
            rows.ids.len(),
            rows.values.nrows(),
        ));
    }
    if let Some(bad) = rows.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: format!("loading {name} features"),
            detail: format!("entry {bad} is not finite"),
        });
    }
    let dim = rows.values.ncols();
    let mut out = Array2::<f32>::zeros((items.len(), dim));
    let mut present = vec![false; items.len()];
    for (r, raw) in rows.ids.iter().enumerate() {
        if let Some(i) = items.get(raw) {
            out.row_mut(i as usize).assign(&rows.values.row(r));
            present[i as usize] = true;
        }
    }
    let n_present = present.iter().filter(|&&p| p).count();
    if n_present < items.len() {
        let mut mean = Array1::<f64>::zeros(dim);
        for (i, _) in present.iter().enumerate().filter(|(_, &p)| p) {
            mean += &out.row(i).mapv(|v| v as f64);
        }
        if n_present > 0 {
            mean /= n_present as f64;
        }
        let mean = mean.mapv(|v| v as f32);
        for (i, _) in present.iter().enumerate().filter(|(_, &p)| !p) {
            out.row_mut(i).assign(&mean);
        }
    }
    Ok((out, present))
}

pub fn write_id_list(path: &Path, ids: &[String]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut s = String::new();
    for id in ids {
        s.push_str(id);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

/// Parameters of the clustered synthetic dataset.
///
/// Items belong to latent clusters and carry a 2-D position inside their
/// cluster. The visual modality encodes the first position coordinate and the
/// textual modality the second, on top of a per-cluster center. Clusters
/// sharing a content group share their centers, so content alone cannot
/// always tell them apart. Users pick a home cluster and walk through it,
/// preferring items close to the last in-cluster item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: u32,
    pub n_items: u32,
    pub n_clusters: u32,
    pub d_v: u32,
    pub d_t: u32,
    /// Probability an event falls inside the user's home cluster.
    pub p_in: f64,
    /// Scale of every item's deviation from its cluster center.
    pub noise: f64,
    /// Share of the deviation that is isotropic rather than positional.
    pub jitter: f64,
    /// Bandwidth of the within-cluster walk; `0` samples uniformly.
    pub locality: f64,
    /// Log-normal spread of item popularity; `0` is uniform.
    pub popularity_skew: f64,
    /// Number of distinct content centers; `0` means one per cluster.
    pub content_groups: u32,
    /// When positive, content group `g` takes visual center `g % visual_groups`
    /// and text center `g / visual_groups`, so each modality alone sees a
    /// coarser grouping. `0` gives both modalities center `g`.
    pub visual_groups: u32,
    pub min_len: u32,
    pub max_len: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_users: 1000,
            n_items: 200,
            n_clusters: 8,
            d_v: 64,
            d_t: 48,
            p_in: 0.8,
            noise: 1.0,
            jitter: 0.3,
            locality: 0.2,
            popularity_skew: 0.0,
            content_groups: 0,
            visual_groups: 0,
            min_len: 6,
            max_len: 16,
        }
    }
}

/// Deterministic clustered dataset; also returns each item's cluster.
pub fn generate_synthetic_with_clusters(
    cfg: &SynthConfig,
) -> Result<(InteractionLog, ItemCatalog, Vec<u32>)> {
    if cfg.n_clusters == 0 || cfg.n_clusters > cfg.n_items {
        return Err(Error::config(format!(
            "need 1 <= n_clusters <= n_items (got {} clusters, {} items)",
            cfg.n_clusters, cfg.n_items
        )));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::config("need 1 <= min_len <= max_len"));
    }
    if !(0.0..=1.0).contains(&cfg.p_in) {
        return Err(Error::config("p_in must lie in [0, 1]"));
    }
    let n_items = cfg.n_items as usize;
    let n_clusters = cfg.n_clusters as usize;
    let groups = if cfg.content_groups == 0 {
        n_clusters
    } else {
        (cfg.content_groups as usize).min(n_clusters)
    };

    let mut rng = rng_from_seed(derive_seed(cfg.seed, "synth/items"));
    // round-robin cluster assignment keeps cluster sizes balanced
    let cluster: Vec<u32> = (0..n_items).map(|i| (i % n_clusters) as u32).collect();
    let pos: Vec<[f64; 2]> = (0..n_items)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    let popularity: Vec<f64> = (0..n_items)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (cfg.popularity_skew * z).exp()
        })
        .collect();

    let (n_visual, n_text) = match cfg.visual_groups as usize {
        0 => (groups, groups),
        v => (v.min(groups), groups.div_ceil(v.min(groups))),
    };
    let center_of = |g: usize, coord: usize| -> usize {
        match (cfg.visual_groups, coord) {
            (0, _) => g,
            (_, 0) => g % n_visual,
            _ => g / n_visual,
        }
    };
    let modality = |rng: &mut crate::optim::SeededRng, d: usize, coord: usize| -> Array2<f32> {
        let sd = 1.0 / (d as f64).sqrt();
        let n_centers = if coord == 0 { n_visual } else { n_text };
        let centers: Vec<Vec<f64>> = (0..n_centers)
            .map(|_| {
                (0..d)
                    .map(|_| { let z: f64 = StandardNormal.sample(&mut *rng); sd * z })
                    .collect()
            })
            .collect();
        let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        dir.iter_mut().for_each(|v| *v /= norm);
        let mut m = Array2::<f32>::zeros((n_items, d));
        for i in 0..n_items {
            let c = &centers[center_of(cluster[i] as usize % groups, coord)];
            let offset = 2.0 * pos[i][coord] - 1.0;
            for j in 0..d {
                let eps: f64 = StandardNormal.sample(&mut *rng);
                let dev = (1.0 - cfg.jitter) * offset * dir[j] + cfg.jitter * sd * eps;
                m[[i, j]] = (c[j] + cfg.noise * dev) as f32;
            }
        }
        m
    };
    let visual = modality(&mut rng, cfg.d_v as usize, 0);
    let text = modality(&mut rng, cfg.d_t as usize, 1);

    let members: Vec<Vec<usize>> = (0..n_clusters)
        .map(|c| (0..n_items).filter(|&i| cluster[i] as usize == c).collect())
        .collect();
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "synth/users"));
    let mut raw_events: Vec<(String, String, i64)> = Vec::new();
    for u in 0..cfg.n_users as usize {
        let home = rng.random_range(0..n_clusters);
        let len = rng.random_range(cfg.min_len..=cfg.max_len) as usize;
        let mut seen = vec![false; n_items];
        let mut current: Option<usize> = None;
        let t0 = 1_600_000_000i64 + (u as i64) * 97;
        for step in 0..len {
            let inside = n_clusters == 1 || rng.random::<f64>() < cfg.p_in;
            let weights: Vec<(usize, f64)> = if inside {
                members[home]
                    .iter()
                    .filter(|&&j| !seen[j])
                    .map(|&j| {
                        let near = match (current, cfg.locality > 0.0) {
                            (Some(c), true) => {
                                let dx = pos[j][0] - pos[c][0];
                                let dy = pos[j][1] - pos[c][1];
                                (-(dx * dx + dy * dy)
                                    / (2.0 * cfg.locality * cfg.locality))
                                    .exp()
                            }
                            _ => 1.0,
                        };
                        (j, popularity[j] * near + 1e-300)
                    })
                    .collect()
            } else {
                (0..n_items)
                    .filter(|&j| !seen[j] && cluster[j] as usize != home)
                    .map(|j| (j, popularity[j]))
                    .collect()
            };
            let Some(pick) = weighted_pick(&mut rng, &weights) else {
                break;
            };
            seen[pick] = true;
            if inside {
                current = Some(pick);
            }
            raw_events.push((format!("u{u}"), format!("i{pick}"), t0 + 3600 * step as i64));
        }
    }
    let log = InteractionLog::from_raw(
        raw_events
            .iter()
            .map(|(u, i, t)| (u.as_str(), i.as_str(), *t)),
    );
    let raw_item_ids: Vec<String> = (0..n_items).map(|i| format!("i{i}")).collect();
    let catalog = ItemCatalog::from_modalities(
        &log.items,
        &ModalityRows {
            ids: raw_item_ids.clone(),
            values: visual,
        },
        &ModalityRows {
            ids: raw_item_ids,
            values: text,
        },
    )?;
    let item_cluster = log
        .items
        .raw_ids()
        .iter()
        .map(|raw| cluster[raw[1..].parse::<usize>().expect("synthetic id")])
        .collect();
    Ok((log, catalog, item_cluster))
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(InteractionLog, ItemCatalog)> {
    generate_synthetic_with_clusters(cfg).map(|(l, c, _)| (l, c))
}

fn weighted_pick<R: Rng + ?Sized>(rng: &mut R, weights: &[(usize, f64)]) -> Option<usize> {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    if weights.is_empty() || total <= 0.0 {
        return None;
    }
    let mut x = rng.random::<f64>() * total;
    for &(j, w) in weights {
        if x < w {
            return Some(j);
        }
        x -= w;
    }
    weights.last().map(|w| w.0)
}

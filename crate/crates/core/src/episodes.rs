//! Episodic task sampling over the seen-class pool.
//!
//! A task has a support set and a query set, each `N`-way `K`-shot. Under the
//! `disjoint` split the two class sets never intersect, so every query asks
//! the model about classes it did not adapt on. The `standard` split draws
//! query classes from the support classes instead.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{ClassId, DatasetBundle};
use crate::error::{Error, Result};
use crate::neural::{Matrix, Rng};

/// Examples per seen class kept for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shots {
    Count(usize),
    All,
}

impl std::str::FromStr for Shots {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Shots::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Shots::Count(n)),
            _ => Err(Error::Config(format!("shots must be a positive count or `all`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolClass {
    pub id: ClassId,
    /// Rows available for support examples.
    pub indices: Vec<usize>,
    /// Rows available for query examples; equals `indices` unless the pool
    /// was widened with [`ClassPool::with_full_query_rows`].
    pub query_indices: Vec<usize>,
    pub attributes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPool {
    pub classes: Vec<PoolClass>,
}

impl ClassPool {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn total_examples(&self) -> usize {
        self.classes.iter().map(|c| c.indices.len()).sum()
    }

    /// Draws query examples from every training row of the class rather than
    /// only the few-shot selection.
    pub fn with_full_query_rows(mut self, bundle: &DatasetBundle) -> Self {
        let full: BTreeMap<ClassId, Vec<usize>> = bundle.seen_train_rows().into_iter().collect();
        for c in &mut self.classes {
            if let Some(rows) = full.get(&c.id) {
                c.query_indices = rows.clone();
            }
        }
        self
    }

    /// Writes the selection as `class_id: i0 i1 ...` lines.
    pub fn save_selection(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for c in &self.classes {
            let _ = write!(out, "{}:", c.id);
            for i in &c.indices {
                let _ = write!(out, " {i}");
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds a pool from a selection file written by [`save_selection`](Self::save_selection).
    pub fn load_selection(bundle: &DatasetBundle, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut classes = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let perr = |m: String| Error::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {m}", n + 1),
            };
            let (id, rest) = line.split_once(':').ok_or_else(|| perr("missing `:`".into()))?;
            let id = ClassId::new(id.trim());
            let attributes = bundle
                .attribute(&id)
                .ok_or_else(|| Error::UnknownClass {
                    class: id.0.clone(),
                    context: "few-shot selection".into(),
                })?
                .to_vec();
            let indices = rest
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|e| perr(format!("`{t}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            for &i in &indices {
                if bundle.labels.get(i) != Some(&id) {
                    return Err(perr(format!("row {i} is not an example of `{id}`")));
                }
            }
            if indices.is_empty() {
                return Err(perr(format!("class `{id}` has no examples")));
            }
            classes.push(PoolClass {
                id,
                query_indices: indices.clone(),
                indices,
                attributes,
            });
        }
        Ok(Self { classes })
    }
}

/// Keeps `shots` training rows per seen class, drawn without replacement.
pub fn subsample_fewshot(bundle: &DatasetBundle, shots: Shots, seed: u64) -> Result<ClassPool> {
    let mut rng = Rng::derive(seed, crate::neural::streams::FEWSHOT);
    let mut classes = Vec::new();
    for (id, rows) in bundle.seen_train_rows() {
        let indices = match shots {
            Shots::All => rows,
            Shots::Count(k) => {
                if rows.len() < k {
                    return Err(Error::Data(format!(
                        "class `{id}` has {} training examples, {k} shots requested",
                        rows.len()
                    )));
                }
                let mut picked = rng.choose_distinct(&rows, k);
                picked.sort_unstable();
                picked
            }
        };
        if indices.is_empty() {
            return Err(Error::Data(format!("class `{id}` has no training examples")));
        }
        let attributes = bundle.attribute(&id).expect("validated bundle").to_vec();
        classes.push(PoolClass {
            id,
            query_indices: indices.clone(),
            indices,
            attributes,
        });
    }
    Ok(ClassPool { classes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub n_way_tr: usize,
    pub k_shot_tr: usize,
    pub n_way_v: usize,
    pub k_shot_v: usize,
}

impl Default for EpisodeConfig {
    /// 10-way 5-shot support, 10-way 3-shot query.
    fn default() -> Self {
        Self {
            n_way_tr: 10,
            k_shot_tr: 5,
            n_way_v: 10,
            k_shot_v: 3,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way_tr == 0 || self.n_way_v == 0 || self.k_shot_tr == 0 || self.k_shot_v == 0 {
            return Err(Error::Config("episode ways and shots must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRow {
    pub index: usize,
    pub class: ClassId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub support: Vec<TaskRow>,
    pub query: Vec<TaskRow>,
    /// Some class had fewer distinct rows than requested and was sampled
    /// with replacement.
    pub with_replacement: bool,
    /// Some query row also appears in the support set.
    pub example_overlap: bool,
}

/// Feature and attribute matrices for a set of task rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub x: Matrix,
    pub a: Matrix,
}

impl TaskData {
    pub fn rows(&self) -> usize {
        self.x.rows()
    }
}

impl Task {
    pub fn support_classes(&self) -> BTreeSet<&ClassId> {
        self.support.iter().map(|r| &r.class).collect()
    }

    pub fn query_classes(&self) -> BTreeSet<&ClassId> {
        self.query.iter().map(|r| &r.class).collect()
    }

    fn materialize(rows: &[TaskRow], bundle: &DatasetBundle) -> Result<TaskData> {
        let idx: Vec<usize> = rows.iter().map(|r| r.index).collect();
        let labels: Vec<ClassId> = rows.iter().map(|r| r.class.clone()).collect();
        Ok(TaskData {
            x: bundle.features.select_rows(&idx),
            a: bundle.attribute_rows(&labels)?,
        })
    }

    pub fn support_data(&self, bundle: &DatasetBundle) -> Result<TaskData> {
        Self::materialize(&self.support, bundle)
    }

    pub fn query_data(&self, bundle: &DatasetBundle) -> Result<TaskData> {
        Self::materialize(&self.query, bundle)
    }
}

/// `k` rows of one class: without replacement when possible.
fn draw_rows(rng: &mut Rng, class: &ClassId, pool: &[usize], k: usize, replaced: &mut bool) -> Vec<TaskRow> {
    let picks: Vec<usize> = if pool.len() >= k {
        rng.choose_distinct(pool, k)
    } else {
        *replaced = true;
        (0..k).map(|_| pool[rng.below(pool.len())]).collect()
    };
    picks
        .into_iter()
        .map(|index| TaskRow {
            index,
            class: class.clone(),
        })
        .collect()
}

/// A way of splitting sampled classes into support and query sets.
pub trait SplitStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn sample(&self, pool: &ClassPool, cfg: &EpisodeConfig, rng: &mut Rng) -> Result<Task>;
}

/// Support and query classes are disjoint.
pub struct DisjointSplit;

impl SplitStrategy for DisjointSplit {
    fn name(&self) -> &'static str {
        "disjoint"
    }

    fn sample(&self, pool: &ClassPool, cfg: &EpisodeConfig, rng: &mut Rng) -> Result<Task> {
        cfg.validate()?;
        let need = cfg.n_way_tr + cfg.n_way_v;
        if pool.len() < need {
            return Err(Error::Config(format!(
                "disjoint {}-way + {}-way tasks need {need} classes, pool has {}",
                cfg.n_way_tr,
                cfg.n_way_v,
                pool.len()
            )));
        }
        let positions: Vec<usize> = (0..pool.len()).collect();
        let chosen = rng.choose_distinct(&positions, need);
        let mut replaced = false;
        let mut support = Vec::with_capacity(cfg.n_way_tr * cfg.k_shot_tr);
        for &p in &chosen[..cfg.n_way_tr] {
            let c = &pool.classes[p];
            support.extend(draw_rows(rng, &c.id, &c.indices, cfg.k_shot_tr, &mut replaced));
        }
        let mut query = Vec::with_capacity(cfg.n_way_v * cfg.k_shot_v);
        for &p in &chosen[cfg.n_way_tr..] {
            let c = &pool.classes[p];
            query.extend(draw_rows(rng, &c.id, &c.query_indices, cfg.k_shot_v, &mut replaced));
        }
        Ok(Task {
            support,
            query,
            with_replacement: replaced,
            example_overlap: false,
        })
    }
}

/// Query classes are a subset of the support classes; query examples avoid
/// support examples where the class has enough rows.
pub struct StandardSplit;

impl SplitStrategy for StandardSplit {
    fn name(&self) -> &'static str {
        "standard"
    }

    fn sample(&self, pool: &ClassPool, cfg: &EpisodeConfig, rng: &mut Rng) -> Result<Task> {
        cfg.validate()?;
        if pool.len() < cfg.n_way_tr {
            return Err(Error::Config(format!(
                "{}-way tasks need {} classes, pool has {}",
                cfg.n_way_tr,
                cfg.n_way_tr,
                pool.len()
            )));
        }
        if cfg.n_way_v > cfg.n_way_tr {
            return Err(Error::Config(format!(
                "standard split needs n_way_v <= n_way_tr, got {} > {}",
                cfg.n_way_v, cfg.n_way_tr
            )));
        }
        let positions: Vec<usize> = (0..pool.len()).collect();
        let chosen = rng.choose_distinct(&positions, cfg.n_way_tr);
        let mut replaced = false;
        let mut overlap = false;
        let mut support = Vec::with_capacity(cfg.n_way_tr * cfg.k_shot_tr);
        let mut used: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for &p in &chosen {
            let c = &pool.classes[p];
            let rows = draw_rows(rng, &c.id, &c.indices, cfg.k_shot_tr, &mut replaced);
            used.insert(p, rows.iter().map(|r| r.index).collect());
            support.extend(rows);
        }
        let query_classes = rng.choose_distinct(&chosen, cfg.n_way_v);
        let mut query = Vec::with_capacity(cfg.n_way_v * cfg.k_shot_v);
        for p in query_classes {
            let c = &pool.classes[p];
            let taken = &used[&p];
            let fresh: Vec<usize> = c.query_indices.iter().copied().filter(|i| !taken.contains(i)).collect();
            if fresh.len() >= cfg.k_shot_v {
                query.extend(draw_rows(rng, &c.id, &fresh, cfg.k_shot_v, &mut replaced));
            } else {
                overlap = true;
                let mut rows: Vec<TaskRow> = fresh
                    .iter()
                    .map(|&index| TaskRow {
                        index,
                        class: c.id.clone(),
                    })
                    .collect();
                let rest: Vec<usize> = c.query_indices.iter().copied().filter(|i| taken.contains(i)).collect();
                let need = cfg.k_shot_v - rows.len();
                let fill_from = if rest.is_empty() { &c.query_indices } else { &rest };
                rows.extend(draw_rows(rng, &c.id, fill_from, need, &mut replaced));
                query.extend(rows);
            }
        }
        Ok(Task {
            support,
            query,
            with_replacement: replaced,
            example_overlap: overlap,
        })
    }
}

pub type SplitFactory = fn() -> Box<dyn SplitStrategy>;

/// Split strategies selectable by name.
pub struct SplitRegistry {
    factories: BTreeMap<&'static str, SplitFactory>,
}

impl SplitRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: SplitFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().map(|k| k.to_string()).collect()
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn SplitStrategy>> {
        self.factories
            .get(name)
            .map(|f| f())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "split strategy",
                name: name.to_string(),
                available: self.names(),
            })
    }
}

impl Default for SplitRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("disjoint", || Box::new(DisjointSplit));
        r.register("standard", || Box::new(StandardSplit));
        r
    }
}

pub fn sample_task(pool: &ClassPool, cfg: &EpisodeConfig, rng: &mut Rng, split: &dyn SplitStrategy) -> Result<Task> {
    split.sample(pool, cfg, rng)
}

pub fn sample_task_batch(
    pool: &ClassPool,
    cfg: &EpisodeConfig,
    rng: &mut Rng,
    split: &dyn SplitStrategy,
    batch_size: usize,
) -> Result<Vec<Task>> {
    if batch_size == 0 {
        return Err(Error::Config("task batch size must be >= 1".into()));
    }
    (0..batch_size).map(|_| split.sample(pool, cfg, rng)).collect()
}

/// Appends `step<TAB>task<TAB>support classes<TAB>query classes` lines.
pub fn format_episode_log(step: usize, tasks: &[Task]) -> String {
    let mut out = String::new();
    for (t, task) in tasks.iter().enumerate() {
        let join = |s: BTreeSet<&ClassId>| s.into_iter().map(|c| c.as_str()).collect::<Vec<_>>().join(",");
        let _ = writeln!(
            out,
            "{step}\t{t}\t{}\t{}",
            join(task.support_classes()),
            join(task.query_classes())
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_synthetic, SyntheticBenchSpec};

    fn bundle(n_seen: usize) -> DatasetBundle {
        make_synthetic(&SyntheticBenchSpec {
            n_seen,
            n_unseen: 2,
            feature_dim: 4,
            attr_dim: 3,
            examples_per_class: 10,
            latent_rank: 2,
            min_separation: 0.1,
            ..Default::default()
        })
        .unwrap()
        .0
    }

    #[test]
    fn full_shots_keep_everything() {
        let b = bundle(4);
        let pool = subsample_fewshot(&b, Shots::All, 1).unwrap();
        assert_eq!(pool.total_examples(), 4 * 8);
        let pool = subsample_fewshot(&b, Shots::Count(8), 1).unwrap();
        assert_eq!(pool.total_examples(), 4 * 8);
    }

    #[test]
    fn too_many_shots_names_the_class() {
        let b = bundle(3);
        let err = subsample_fewshot(&b, Shots::Count(9), 1).unwrap_err();
        assert!(err.to_string().contains("`c0`"), "{err}");
    }

    #[test]
    fn fewshot_is_seeded() {
        let b = bundle(5);
        let p1 = subsample_fewshot(&b, Shots::Count(5), 3).unwrap();
        let p2 = subsample_fewshot(&b, Shots::Count(5), 3).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.total_examples(), 25);
    }

    #[test]
    fn twenty_classes_ten_and_ten_cover_all() {
        let b = bundle(20);
        let pool = subsample_fewshot(&b, Shots::Count(5), 0).unwrap();
        let task = DisjointSplit
            .sample(&pool, &EpisodeConfig::default(), &mut Rng::new(2))
            .unwrap();
        let s = task.support_classes();
        let q = task.query_classes();
        assert!(s.is_disjoint(&q));
        assert_eq!(s.len() + q.len(), 20);
        assert_eq!(task.support.len(), 50);
        assert_eq!(task.query.len(), 30);
        assert!(!task.with_replacement);
    }

    #[test]
    fn standard_query_within_support() {
        let b = bundle(12);
        let pool = subsample_fewshot(&b, Shots::Count(5), 0).unwrap();
        let task = StandardSplit
            .sample(&pool, &EpisodeConfig::default(), &mut Rng::new(5))
            .unwrap();
        assert!(task.query_classes().is_subset(&task.support_classes()));
        // five-shot pool, five support shots: every query row repeats a support row
        assert!(task.example_overlap);
        assert_eq!(task.query.len(), 30);
    }

    #[test]
    fn standard_prefers_unused_rows() {
        let b = bundle(4);
        let pool = subsample_fewshot(&b, Shots::All, 0).unwrap();
        let cfg = EpisodeConfig {
            n_way_tr: 3,
            k_shot_tr: 4,
            n_way_v: 2,
            k_shot_v: 3,
        };
        let task = StandardSplit.sample(&pool, &cfg, &mut Rng::new(1)).unwrap();
        assert!(!task.example_overlap);
        let support: BTreeSet<usize> = task.support.iter().map(|r| r.index).collect();
        assert!(task.query.iter().all(|r| !support.contains(&r.index)));
    }

    #[test]
    fn insufficient_pool_is_config_error() {
        let b = bundle(5);
        let pool = subsample_fewshot(&b, Shots::Count(5), 0).unwrap();
        assert!(matches!(
            DisjointSplit.sample(&pool, &EpisodeConfig::default(), &mut Rng::new(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn replacement_is_flagged() {
        let b = bundle(4);
        let pool = subsample_fewshot(&b, Shots::Count(2), 0).unwrap();
        let cfg = EpisodeConfig {
            n_way_tr: 2,
            k_shot_tr: 3,
            n_way_v: 2,
            k_shot_v: 1,
        };
        let task = DisjointSplit.sample(&pool, &cfg, &mut Rng::new(1)).unwrap();
        assert!(task.with_replacement);
        assert_eq!(task.support.len(), 6);
    }

    #[test]
    fn batch_of_one_equals_single_draw() {
        let b = bundle(6);
        let pool = subsample_fewshot(&b, Shots::Count(5), 0).unwrap();
        let cfg = EpisodeConfig {
            n_way_tr: 3,
            k_shot_tr: 2,
            n_way_v: 3,
            k_shot_v: 2,
        };
        let single = sample_task(&pool, &cfg, &mut Rng::new(4), &DisjointSplit).unwrap();
        let batch = sample_task_batch(&pool, &cfg, &mut Rng::new(4), &DisjointSplit, 1).unwrap();
        assert_eq!(batch, vec![single]);
        assert!(sample_task_batch(&pool, &cfg, &mut Rng::new(4), &DisjointSplit, 0).is_err());
    }

    #[test]
    fn selection_file_roundtrip() {
        let b = bundle(4);
        let pool = subsample_fewshot(&b, Shots::Count(5), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fewshot.txt");
        pool.save_selection(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("c0:"));
        let back = ClassPool::load_selection(&b, &path).unwrap();
        assert_eq!(back, pool);
    }

    #[test]
    fn registry_names() {
        let reg = SplitRegistry::default();
        assert_eq!(reg.names(), vec!["disjoint", "standard"]);
        assert_eq!(reg.create("standard").unwrap().name(), "standard");
        assert!(reg.create("random").is_err());
    }

    #[test]
    fn shots_parse() {
        assert_eq!("5".parse::<Shots>().unwrap(), Shots::Count(5));
        assert_eq!("all".parse::<Shots>().unwrap(), Shots::All);
        assert!("0".parse::<Shots>().is_err());
    }
}

//! Episode construction: synthetic class pools, the synchronous-label and
//! delayed-label protocols, random per-episode relabeling, sequential
//! multi-task streams with segment trimming, and a binary feature-file
//! loader so externally extracted features can stand in for synthetic pools.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Real, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Synchronous,
    Delayed,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Synchronous => "synchronous",
            Protocol::Delayed => "delayed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synchronous" | "sync" => Ok(Protocol::Synchronous),
            "delayed" => Ok(Protocol::Delayed),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub noise_std: Real,
    pub prototype_scale: Real,
    pub task_id: u32,
}

/// A pool of classes to draw episode samples from: either synthetic
/// prototypes with fresh Gaussian noise per draw, or a fixed set of feature
/// vectors loaded from a file.
#[derive(Debug, Clone)]
pub enum ClassPool {
    Synthetic { cfg: SyntheticTaskConfig, prototypes: Vec<Vec<Real>> },
    Fixed { task_id: u32, dim: usize, classes: Vec<FixedClass> },
}

#[derive(Debug, Clone)]
pub struct FixedClass {
    pub class_id: u32,
    pub samples: Vec<Vec<Real>>,
}

impl ClassPool {
    pub fn num_classes(&self) -> usize {
        match self {
            ClassPool::Synthetic { prototypes, .. } => prototypes.len(),
            ClassPool::Fixed { classes, .. } => classes.len(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            ClassPool::Synthetic { cfg, .. } => cfg.feature_dim,
            ClassPool::Fixed { dim, .. } => *dim,
        }
    }

    pub fn task_id(&self) -> u32 {
        match self {
            ClassPool::Synthetic { cfg, .. } => cfg.task_id,
            ClassPool::Fixed { task_id, .. } => *task_id,
        }
    }
}

/// C unit-norm prototypes scaled by `prototype_scale`; samples are
/// prototype + Normal(0, noise_std²) noise drawn fresh per request.
pub fn gen_synthetic_classes(cfg: &SyntheticTaskConfig, rng: &mut Rng) -> Result<ClassPool> {
    if cfg.num_classes < 2 {
        return Err(Error::Config("synthetic pool needs at least 2 classes".into()));
    }
    if cfg.feature_dim < 2 {
        return Err(Error::Config("synthetic feature_dim must be at least 2".into()));
    }
    if cfg.noise_std < 0.0 {
        return Err(Error::Config("noise_std must be non-negative".into()));
    }
    let prototypes = (0..cfg.num_classes)
        .map(|_| {
            let mut p = rng.normal_vec(cfg.feature_dim, 1.0);
            let norm = p.iter().map(|v| v * v).sum::<Real>().sqrt().max(1e-12);
            for v in &mut p {
                *v = *v / norm * cfg.prototype_scale;
            }
            p
        })
        .collect();
    Ok(ClassPool::Synthetic { cfg: cfg.clone(), prototypes })
}

/// One token of an episode stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub feature: Vec<Real>,
    pub label_in: Option<usize>,
    pub target: Option<usize>,
    pub loss_mask: bool,
    pub task_id: u32,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub protocol: Protocol,
    pub n_ways: usize,
    pub tokens: Vec<Token>,
    /// Start index of every segment; single-task episodes have just [0].
    /// Recorded for metrics only; the model receives no boundary signal.
    pub segment_starts: Vec<usize>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Segment index has already been stamped on each token.
    pub fn segment_of(&self, t: usize) -> usize {
        self.tokens[t].segment
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub n_ways: usize,
    pub k_shots: usize,
    pub protocol: Protocol,
    pub max_instances_per_class: usize,
}

impl EpisodeSpec {
    pub fn validate(&self, pool: &ClassPool) -> Result<()> {
        if self.n_ways < 2 {
            return Err(Error::Config("n_ways must be at least 2".into()));
        }
        if self.n_ways > pool.num_classes() {
            return Err(Error::Config(format!(
                "n_ways {} exceeds pool classes {}",
                self.n_ways,
                pool.num_classes()
            )));
        }
        if self.k_shots < 1 {
            return Err(Error::Config("k_shots must be at least 1".into()));
        }
        if self.protocol == Protocol::Delayed && self.max_instances_per_class < 1 {
            return Err(Error::Config("delayed episodes need max_instances_per_class >= 1".into()));
        }
        Ok(())
    }
}

/// Draws `count` features of one pool class; fixed pools sample without
/// replacement so a query can be guaranteed absent from the support set.
fn draw_features(
    pool: &ClassPool,
    class: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<Real>>> {
    match pool {
        ClassPool::Synthetic { cfg, prototypes } => Ok((0..count)
            .map(|_| {
                let noise = rng.normal_vec(cfg.feature_dim, cfg.noise_std);
                prototypes[class].iter().zip(noise.iter()).map(|(p, n)| p + n).collect()
            })
            .collect()),
        ClassPool::Fixed { classes, .. } => {
            let samples = &classes[class].samples;
            if samples.len() < count {
                return Err(Error::Config(format!(
                    "pool class {} has {} samples, episode needs {count}",
                    classes[class].class_id,
                    samples.len()
                )));
            }
            let idx = rng.choose_distinct(samples.len(), count);
            Ok(idx.into_iter().map(|i| samples[i].clone()).collect())
        }
    }
}

/// N distinct classes, re-labelled by a uniform random permutation.
fn draw_classes_and_labels(pool: &ClassPool, n: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let classes = rng.choose_distinct(pool.num_classes(), n);
    let mut labels: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut labels);
    (classes, labels)
}

pub fn sample_episode(spec: &EpisodeSpec, pool: &ClassPool, rng: &mut Rng) -> Result<Episode> {
    spec.validate(pool)?;
    match spec.protocol {
        Protocol::Synchronous => sample_synchronous(spec, pool, rng),
        Protocol::Delayed => {
            let tokens = delayed_segment_tokens(spec, pool, spec.max_instances_per_class, rng, 0)?;
            let mut episode = Episode {
                protocol: Protocol::Delayed,
                n_ways: spec.n_ways,
                tokens,
                segment_starts: vec![0],
            };
            shift_labels(&mut episode);
            Ok(episode)
        }
    }
}

fn sample_synchronous(spec: &EpisodeSpec, pool: &ClassPool, rng: &mut Rng) -> Result<Episode> {
    let n = spec.n_ways;
    let k = spec.k_shots;
    let (classes, labels) = draw_classes_and_labels(pool, n, rng);
    let query_slot = rng.gen_range(n);

    // Per slot, draw K support samples plus one extra for the query class;
    // the extra is a fresh draw, so the query is never in the support set.
    let mut support: Vec<(usize, Vec<Real>)> = Vec::with_capacity(n * k);
    let mut query_feature = None;
    for slot in 0..n {
        let count = if slot == query_slot { k + 1 } else { k };
        let mut feats = draw_features(pool, classes[slot], count, rng)?;
        if slot == query_slot {
            query_feature = feats.pop();
        }
        for f in feats {
            support.push((labels[slot], f));
        }
    }
    rng.shuffle(&mut support);

    let task_id = pool.task_id();
    let mut tokens: Vec<Token> = support
        .into_iter()
        .map(|(label, feature)| Token {
            feature,
            label_in: Some(label),
            target: Some(label),
            loss_mask: false,
            task_id,
            segment: 0,
        })
        .collect();
    tokens.push(Token {
        feature: query_feature.expect("query draw"),
        label_in: None,
        target: Some(labels[query_slot]),
        loss_mask: true,
        task_id,
        segment: 0,
    });
    Ok(Episode {
        protocol: Protocol::Synchronous,
        n_ways: n,
        tokens,
        segment_starts: vec![0],
    })
}

/// Delayed-protocol segment before label shifting: every token carries its
/// own target as label_in; `shift_labels` turns that into the one-step delay.
fn delayed_segment_tokens(
    spec: &EpisodeSpec,
    pool: &ClassPool,
    instances_per_class: usize,
    rng: &mut Rng,
    segment: usize,
) -> Result<Vec<Token>> {
    let n = spec.n_ways;
    let (classes, labels) = draw_classes_and_labels(pool, n, rng);
    let mut slots: Vec<usize> = (0..n).flat_map(|s| std::iter::repeat(s).take(instances_per_class)).collect();
    rng.shuffle(&mut slots);
    let mut per_slot_features: Vec<Vec<Vec<Real>>> = Vec::with_capacity(n);
    for slot in 0..n {
        per_slot_features.push(draw_features(pool, classes[slot], instances_per_class, rng)?);
    }
    let task_id = pool.task_id();
    let mut counters = vec![0usize; n];
    Ok(slots
        .into_iter()
        .map(|slot| {
            let feature = per_slot_features[slot][counters[slot]].clone();
            counters[slot] += 1;
            Token {
                feature,
                label_in: Some(labels[slot]),
                target: Some(labels[slot]),
                loss_mask: true,
                task_id,
                segment,
            }
        })
        .collect())
}

/// Rewrites label_in so that token t carries the target of token t-1; the
/// first token carries the explicit no-label marker.
fn shift_labels(episode: &mut Episode) {
    let mut prev: Option<usize> = None;
    for tok in &mut episode.tokens {
        let own = tok.target;
        tok.label_in = prev;
        prev = own;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentSpec {
    pub pool_index: usize,
    pub max_instances_per_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskStreamConfig {
    pub segments: Vec<SegmentSpec>,
    pub trim_lo: usize,
    pub trim_hi: usize,
    /// Reverse the segment order on odd batch indices.
    pub alternate_per_batch: bool,
}

impl MultiTaskStreamConfig {
    pub fn validate(&self, spec: &EpisodeSpec) -> Result<()> {
        if self.segments.len() < 2 {
            return Err(Error::Config("multi-task stream needs at least 2 segments".into()));
        }
        if self.trim_hi < self.trim_lo {
            return Err(Error::Config(format!(
                "trim range [{}, {}] is inverted",
                self.trim_lo, self.trim_hi
            )));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            let len = spec.n_ways * seg.max_instances_per_class;
            if self.trim_hi >= len {
                return Err(Error::Config(format!(
                    "trim_hi {} would remove entire segment {i} of length {len}",
                    self.trim_hi
                )));
            }
        }
        Ok(())
    }
}

/// Concatenated delayed-protocol segments; classes and label permutations
/// are re-drawn per segment, non-final segments are trimmed from the end by
/// a uniform draw from [trim_lo, trim_hi], and the label delay runs across
/// the whole stream.
pub fn sample_multitask_stream(
    cfg: &MultiTaskStreamConfig,
    pools: &[ClassPool],
    spec: &EpisodeSpec,
    rng: &mut Rng,
    batch_idx: u64,
) -> Result<Episode> {
    cfg.validate(spec)?;
    for seg in &cfg.segments {
        if seg.pool_index >= pools.len() {
            return Err(Error::Config(format!(
                "segment pool index {} out of range ({} pools)",
                seg.pool_index,
                pools.len()
            )));
        }
    }
    let mut order: Vec<usize> = (0..cfg.segments.len()).collect();
    if cfg.alternate_per_batch && batch_idx % 2 == 1 {
        order.reverse();
    }

    let mut tokens: Vec<Token> = Vec::new();
    let mut segment_starts = Vec::with_capacity(cfg.segments.len());
    for (seg_pos, seg_idx) in order.iter().enumerate() {
        let seg = &cfg.segments[*seg_idx];
        let pool = &pools[seg.pool_index];
        spec.validate(pool)?;
        segment_starts.push(tokens.len());
        let mut seg_tokens =
            delayed_segment_tokens(spec, pool, seg.max_instances_per_class, rng, seg_pos)?;
        let is_final = seg_pos == cfg.segments.len() - 1;
        if !is_final && cfg.trim_hi > 0 {
            let trim = cfg.trim_lo + rng.gen_range(cfg.trim_hi - cfg.trim_lo + 1);
            seg_tokens.truncate(seg_tokens.len() - trim);
        }
        tokens.extend(seg_tokens);
    }
    let mut episode =
        Episode { protocol: Protocol::Delayed, n_ways: spec.n_ways, tokens, segment_starts };
    shift_labels(&mut episode);
    Ok(episode)
}

/// Per-token instance counters: token t gets m = (prior occurrences of its
/// target class within its segment) + 1. Delayed protocol only.
pub fn instance_index_annotate(episode: &Episode) -> Result<Vec<usize>> {
    if episode.protocol != Protocol::Delayed {
        return Err(Error::Config(
            "instance-level annotation is defined for the delayed protocol".into(),
        ));
    }
    let mut out = Vec::with_capacity(episode.tokens.len());
    let mut counts: Vec<Vec<usize>> = Vec::new();
    for tok in &episode.tokens {
        while counts.len() <= tok.segment {
            counts.push(vec![0; episode.n_ways]);
        }
        let target = tok.target.expect("delayed tokens always carry a target");
        counts[tok.segment][target] += 1;
        out.push(counts[tok.segment][target]);
    }
    Ok(out)
}

// ── Feature files ────────────────────────────────────────────────────

pub const FEATURE_MAGIC: &[u8; 8] = b"FWPFEAT1";

/// Binary layout: magic | u32 class_count | u32 dim | per class:
/// u32 class_id, u32 n_samples, n_samples×dim little-endian f32 values.
pub fn write_feature_file(path: &Path, pool: &ClassPool) -> Result<()> {
    let (dim, classes) = match pool {
        ClassPool::Fixed { dim, classes, .. } => (*dim, classes),
        ClassPool::Synthetic { .. } => {
            return Err(Error::Config("only fixed pools can be written to feature files".into()))
        }
    };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(classes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for class in classes {
        buf.extend_from_slice(&class.class_id.to_le_bytes());
        buf.extend_from_slice(&(class.samples.len() as u32).to_le_bytes());
        for sample in &class.samples {
            for v in sample {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_feature_file(path: &Path) -> Result<ClassPool> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;

    let take = |at: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(Error::Truncated { what: format!("{what} at offset {}", *at) });
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };

    let magic = take(&mut at, 8, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic { expected: "FWPFEAT1", found: magic.to_vec() });
    }
    let read_u32 = |at: &mut usize, what: &str| -> Result<u32> {
        let b = take(at, 4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let class_count = read_u32(&mut at, "class count")?;
    let dim = read_u32(&mut at, "dim")? as usize;
    if class_count == 0 {
        return Err(Error::FormatInconsistent("feature file has an empty class list".into()));
    }
    if dim == 0 {
        return Err(Error::FormatInconsistent("feature dimension is zero".into()));
    }
    let mut classes = Vec::with_capacity(class_count as usize);
    for _ in 0..class_count {
        let class_id = read_u32(&mut at, "class id")?;
        let n_samples = read_u32(&mut at, "sample count")? as usize;
        if n_samples == 0 {
            return Err(Error::FormatInconsistent(format!(
                "class {class_id} has zero samples"
            )));
        }
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let raw = take(&mut at, 4 * dim, "sample payload")?;
            let sample: Vec<Real> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
                .collect();
            samples.push(sample);
        }
        classes.push(FixedClass { class_id, samples });
    }
    if at != bytes.len() {
        return Err(Error::FormatInconsistent(format!(
            "{} trailing bytes after payload",
            bytes.len() - at
        )));
    }
    Ok(ClassPool::Fixed { task_id: 0, dim, classes })
}

// ── Episode dumps ────────────────────────────────────────────────────

/// Newline-delimited dump, one token per line:
/// `task_id,instance_idx,label_in,target,loss_mask,f0,f1,...`
/// with -1 encoding a missing label or target.
pub fn dump_episode(episode: &Episode) -> String {
    let mut counts: Vec<Vec<usize>> = Vec::new();
    let mut out = String::new();
    for tok in &episode.tokens {
        while counts.len() <= tok.segment {
            counts.push(vec![0; episode.n_ways]);
        }
        let instance = match tok.target {
            Some(t) => {
                counts[tok.segment][t] += 1;
                counts[tok.segment][t]
            }
            None => 0,
        };
        let label_in = tok.label_in.map_or(-1, |l| l as i64);
        let target = tok.target.map_or(-1, |t| t as i64);
        out.push_str(&format!(
            "{},{},{},{},{}",
            tok.task_id,
            instance,
            label_in,
            target,
            if tok.loss_mask { 1 } else { 0 }
        ));
        for f in &tok.feature {
            out.push_str(&format!(",{f}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool_cfg(c: usize, dim: usize, noise: Real) -> SyntheticTaskConfig {
        SyntheticTaskConfig {
            num_classes: c,
            feature_dim: dim,
            noise_std: noise,
            prototype_scale: 1.0,
            task_id: 0,
        }
    }

    #[test]
    fn zero_noise_samples_equal_prototypes() {
        let cfg = pool_cfg(4, 8, 0.0);
        let mut rng = Rng::new(1, 0);
        let pool = gen_synthetic_classes(&cfg, &mut rng).unwrap();
        let protos = match &pool {
            ClassPool::Synthetic { prototypes, .. } => prototypes.clone(),
            _ => unreachable!(),
        };
        let feats = draw_features(&pool, 2, 3, &mut rng).unwrap();
        for f in feats {
            assert_eq!(f, protos[2]);
        }
    }

    #[test]
    fn same_seed_identical_pool() {
        let cfg = pool_cfg(6, 5, 0.2);
        let a = gen_synthetic_classes(&cfg, &mut Rng::new(9, 3)).unwrap();
        let b = gen_synthetic_classes(&cfg, &mut Rng::new(9, 3)).unwrap();
        match (&a, &b) {
            (
                ClassPool::Synthetic { prototypes: pa, .. },
                ClassPool::Synthetic { prototypes: pb, .. },
            ) => assert_eq!(pa, pb),
            _ => unreachable!(),
        }
    }

    #[test]
    fn nearest_prototype_oracle_accuracy() {
        let cfg = pool_cfg(5, 16, 0.1);
        let mut rng = Rng::new(42, 0);
        let pool = gen_synthetic_classes(&cfg, &mut rng).unwrap();
        let protos = match &pool {
            ClassPool::Synthetic { prototypes, .. } => prototypes.clone(),
            _ => unreachable!(),
        };
        let mut correct = 0usize;
        let total = 10_000;
        for i in 0..total {
            let class = i % 5;
            let feat = draw_features(&pool, class, 1, &mut rng).unwrap().pop().unwrap();
            let mut best = 0;
            let mut best_d = Real::INFINITY;
            for (c, p) in protos.iter().enumerate() {
                let d: Real = p.iter().zip(feat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if best == class {
                correct += 1;
            }
        }
        let acc = correct as Real / total as Real;
        assert!(acc >= 0.999, "nearest-prototype accuracy {acc}");
    }

    #[test]
    fn synchronous_episode_shape() {
        let cfg = pool_cfg(20, 8, 0.1);
        let mut rng = Rng::new(7, 0);
        let pool = gen_synthetic_classes(&cfg, &mut rng).unwrap();
        let spec = EpisodeSpec {
            n_ways: 5,
            k_shots: 1,
            protocol: Protocol::Synchronous,
            max_instances_per_class: 0,
        };
        let ep = sample_episode(&spec, &pool, &mut rng).unwrap();
        assert_eq!(ep.len(), 6);
        let masks: Vec<bool> = ep.tokens.iter().map(|t| t.loss_mask).collect();
        assert_eq!(masks, vec![false, false, false, false, false, true]);
        assert!(ep.tokens[5].label_in.is_none());
        for t in &ep.tokens[..5] {
            assert!(t.label_in.is_some());
            assert_eq!(t.label_in, t.target);
        }
    }

    #[test]
    fn synchronous_query_not_in_support() {
        let cfg = pool_cfg(8, 6, 0.05);
        let mut rng = Rng::new(11, 0);
        let pool = gen_synthetic_classes(&cfg, &mut rng).unwrap();
        let spec = EpisodeSpec {
            n_ways: 3,
            k_shots: 2,
            protocol: Protocol::Synchronous,
            max_instances_per_class: 0,
        };
        for _ in 0..50 {
            let ep = sample_episode(&spec, &pool, &mut rng).unwrap();
            let query = &ep.tokens.last().unwrap().feature;
            for t in &ep.tokens[..ep.len() - 1] {
                assert_ne!(&t.feature, query);
            }
        }
    }

    #[test]
    fn delayed_episode_shift_identity() {
        let cfg = pool_cfg(4, 6, 0.1);
        let mut rng = Rng::new(13, 0);
        let pool = gen_synthetic_classes(&cfg, &mut rng).unwrap();
        let spec = EpisodeSpec {
            n_ways: 2,
            k_shots: 1,
            protocol: Protocol::Delayed,
            max_instances_per_class: 3,
        };
        let ep = sample_episode(&spec, &pool, &mut rng).unwrap();
        assert_eq!(ep.len(), 6);
        assert!(ep.tokens[0].label_in.is_none());
        for t in 1..ep.len() {
            assert_eq!(ep.tokens[t].label_in, ep.tokens[t - 1].target);
        }
        assert!(ep.tokens.iter().all(|t| t.loss_mask));
    }

    #[test]
    fn query_class_frequency_is_uniform() {
        let cfg = pool_cfg(20, 4, 0.1);
        let mut rng = Rng::new(17, 0);
        let pool = gen_synthetic_classes(&cfg, &mut rng).unwrap();
        let spec = EpisodeSpec {
            n_ways: 5,
            k_shots: 1,
            protocol: Protocol::Synchronous,
            max_instances_per_class: 0,
        };
        let mut counts = vec![0usize; 5];
        let total = 10_000;
        for _ in 0..total {
            let ep = sample_episode(&spec, &pool, &mut rng).unwrap();
            counts[ep.tokens.last().unwrap().target.unwrap()] += 1;
        }
        for c in counts {
            let freq = c as Real / total as Real;
            assert!((freq - 0.2).abs() < 0.02, "query label frequency {freq}");
        }
    }

    #[test]
    fn label_permutation_uniform_chi_squared() {
        // Fixed underlying class (always drawn since n_ways == pool size);
        // its assigned label must be uniform over 0..N-1. Zero noise makes
        // features equal their prototypes, so the class is identifiable.
        let cfg = pool_cfg(5, 4, 0.0);
        let mut rng = Rng::new(19, 0);
        let pool = gen_synthetic_classes(&cfg, &mut rng).unwrap();
        let proto0 = match &pool {
            ClassPool::Synthetic { prototypes, .. } => prototypes[0].clone(),
            _ => unreachable!(),
        };
        let spec = EpisodeSpec {
            n_ways: 5,
            k_shots: 1,
            protocol: Protocol::Delayed,
            max_instances_per_class: 1,
        };
        let mut counts = vec![0usize; 5];
        let total = 10_000;
        for _ in 0..total {
            let ep = sample_episode(&spec, &pool, &mut rng).unwrap();
            let label = ep
                .tokens
                .iter()
                .find(|t| t.feature == proto0)
                .and_then(|t| t.target)
                .expect("class 0 appears in every 5-way episode over 5 classes");
            counts[label] += 1;
        }
        let expected = total as Real / 5.0;
        let chi2: Real =
            counts.iter().map(|c| (*c as Real - expected).powi(2) / expected).sum();
        // 0.99 quantile of chi-squared with 4 degrees of freedom.
        assert!(chi2 < 13.2767, "chi^2 = {chi2}, counts {counts:?}");
    }

    fn two_pools() -> Vec<ClassPool> {
        let mut rng = Rng::new(23, 0);
        vec![
            gen_synthetic_classes(&pool_cfg(10, 6, 0.1), &mut rng).unwrap(),
            gen_synthetic_classes(
                &SyntheticTaskConfig {
                    num_classes: 10,
                    feature_dim: 6,
                    noise_std: 0.05,
                    prototype_scale: 1.5,
                    task_id: 1,
                },
                &mut rng,
            )
            .unwrap(),
        ]
    }

    fn multitask_cfg(trim_lo: usize, trim_hi: usize) -> (MultiTaskStreamConfig, EpisodeSpec) {
        let cfg = MultiTaskStreamConfig {
            segments: vec![
                SegmentSpec { pool_index: 0, max_instances_per_class: 15 },
                SegmentSpec { pool_index: 1, max_instances_per_class: 15 },
            ],
            trim_lo,
            trim_hi,
            alternate_per_batch: true,
        };
        let spec = EpisodeSpec {
            n_ways: 5,
            k_shots: 1,
            protocol: Protocol::Delayed,
            max_instances_per_class: 15,
        };
        (cfg, spec)
    }

    #[test]
    fn multitask_untrimmed_length() {
        let pools = two_pools();
        let (cfg, spec) = multitask_cfg(0, 0);
        let mut rng = Rng::new(29, 0);
        let ep = sample_multitask_stream(&cfg, &pools, &spec, &mut rng, 0).unwrap();
        assert_eq!(ep.len(), 150);
        assert_eq!(ep.segment_starts, vec![0, 75]);
        assert!(ep.tokens[0].label_in.is_none());
        for t in 1..150 {
            assert_eq!(ep.tokens[t].label_in, ep.tokens[t - 1].target);
        }
    }

    #[test]
    fn multitask_trim_draws_within_bounds() {
        let pools = two_pools();
        let (cfg, spec) = multitask_cfg(1, 60);
        let mut rng = Rng::new(31, 0);
        for i in 0..2_000u64 {
            let ep = sample_multitask_stream(&cfg, &pools, &spec, &mut rng, i).unwrap();
            let first_len = ep.segment_starts[1];
            let trimmed = 75 - first_len;
            assert!((1..=60).contains(&trimmed), "trim {trimmed}");
            assert_eq!(ep.len() - first_len, 75, "final segment must stay untrimmed");
        }
    }

    #[test]
    fn multitask_alternates_segment_order_per_batch() {
        let pools = two_pools();
        let (cfg, spec) = multitask_cfg(0, 0);
        let mut rng = Rng::new(37, 0);
        let even = sample_multitask_stream(&cfg, &pools, &spec, &mut rng, 0).unwrap();
        let odd = sample_multitask_stream(&cfg, &pools, &spec, &mut rng, 1).unwrap();
        assert_eq!(even.tokens[0].task_id, 0);
        assert_eq!(odd.tokens[0].task_id, 1);
        assert_eq!(even.tokens.last().unwrap().task_id, 1);
        assert_eq!(odd.tokens.last().unwrap().task_id, 0);
    }

    #[test]
    fn instance_annotation_fixture() {
        // Stream [A, B, A, A, B] with A -> label 0, B -> label 1.
        let mk = |target: usize, segment: usize| Token {
            feature: vec![0.0; 2],
            label_in: None,
            target: Some(target),
            loss_mask: true,
            task_id: 0,
            segment,
        };
        let ep = Episode {
            protocol: Protocol::Delayed,
            n_ways: 2,
            tokens: vec![mk(0, 0), mk(1, 0), mk(0, 0), mk(0, 0), mk(1, 0)],
            segment_starts: vec![0],
        };
        assert_eq!(instance_index_annotate(&ep).unwrap(), vec![1, 1, 2, 3, 2]);
    }

    #[test]
    fn instance_annotation_resets_at_segment_boundary() {
        let mk = |target: usize, segment: usize| Token {
            feature: vec![0.0; 2],
            label_in: None,
            target: Some(target),
            loss_mask: true,
            task_id: segment as u32,
            segment,
        };
        let ep = Episode {
            protocol: Protocol::Delayed,
            n_ways: 2,
            tokens: vec![mk(0, 0), mk(0, 0), mk(0, 1), mk(1, 1)],
            segment_starts: vec![0, 2],
        };
        assert_eq!(instance_index_annotate(&ep).unwrap(), vec![1, 2, 1, 1]);
    }

    #[test]
    fn instance_annotation_matches_naive_recount() {
        let pools = two_pools();
        let (cfg, spec) = multitask_cfg(1, 20);
        let mut rng = Rng::new(41, 0);
        for i in 0..50u64 {
            let ep = sample_multitask_stream(&cfg, &pools, &spec, &mut rng, i).unwrap();
            let fast = instance_index_annotate(&ep).unwrap();
            for (t, m) in fast.iter().enumerate() {
                let naive = ep.tokens[..=t]
                    .iter()
                    .filter(|tok| {
                        tok.segment == ep.tokens[t].segment && tok.target == ep.tokens[t].target
                    })
                    .count();
                assert_eq!(*m, naive, "token {t}");
            }
        }
    }

    #[test]
    fn instance_annotation_rejects_synchronous() {
        let cfg = pool_cfg(6, 4, 0.1);
        let mut rng = Rng::new(43, 0);
        let pool = gen_synthetic_classes(&cfg, &mut rng).unwrap();
        let spec = EpisodeSpec {
            n_ways: 3,
            k_shots: 1,
            protocol: Protocol::Synchronous,
            max_instances_per_class: 0,
        };
        let ep = sample_episode(&spec, &pool, &mut rng).unwrap();
        assert!(instance_index_annotate(&ep).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = std::env::temp_dir().join("srwm_feature_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.feat");
        let mut rng = Rng::new(47, 0);
        let classes: Vec<FixedClass> = (0..3)
            .map(|c| FixedClass {
                class_id: c * 10,
                samples: (0..4).map(|_| rng.normal_vec(8, 1.0).iter().map(|v| *v as f32 as Real).collect()).collect(),
            })
            .collect();
        let pool = ClassPool::Fixed { task_id: 0, dim: 8, classes };
        write_feature_file(&path, &pool).unwrap();
        let loaded = load_feature_file(&path).unwrap();
        match (&pool, &loaded) {
            (
                ClassPool::Fixed { classes: a, .. },
                ClassPool::Fixed { classes: b, dim, .. },
            ) => {
                assert_eq!(*dim, 8);
                assert_eq!(a.len(), b.len());
                for (ca, cb) in a.iter().zip(b.iter()) {
                    assert_eq!(ca.class_id, cb.class_id);
                    assert_eq!(ca.samples, cb.samples);
                }
            }
            _ => unreachable!(),
        }
        assert_eq!(loaded.num_classes(), 3);
        assert_eq!(loaded.feature_dim(), 8);
    }

    #[test]
    fn feature_file_errors_are_distinct() {
        let dir = std::env::temp_dir().join("srwm_feature_test");
        std::fs::create_dir_all(&dir).unwrap();

        let bad_magic = dir.join("bad_magic.feat");
        std::fs::write(&bad_magic, b"NOTMAGIC\x01\x00\x00\x00\x02\x00\x00\x00").unwrap();
        assert!(matches!(load_feature_file(&bad_magic), Err(Error::BadMagic { .. })));

        let empty = dir.join("empty_classes.feat");
        let mut buf = FEATURE_MAGIC.to_vec();
        buf.extend_from_slice(&0u32.to_le_bytes());
        buf.extend_from_slice(&4u32.to_le_bytes());
        std::fs::write(&empty, &buf).unwrap();
        assert!(matches!(load_feature_file(&empty), Err(Error::FormatInconsistent(_))));

        let truncated = dir.join("truncated.feat");
        let mut buf = FEATURE_MAGIC.to_vec();
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&4u32.to_le_bytes());
        buf.extend_from_slice(&7u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&[0u8; 4]);
        std::fs::write(&truncated, &buf).unwrap();
        assert!(matches!(load_feature_file(&truncated), Err(Error::Truncated { .. })));
    }

    #[test]
    fn dump_format_sync_episode() {
        let cfg = pool_cfg(8, 3, 0.1);
        let mut rng = Rng::new(53, 0);
        let pool = gen_synthetic_classes(&cfg, &mut rng).unwrap();
        let spec = EpisodeSpec {
            n_ways: 5,
            k_shots: 1,
            protocol: Protocol::Synchronous,
            max_instances_per_class: 0,
        };
        let ep = sample_episode(&spec, &pool, &mut rng).unwrap();
        let dump = dump_episode(&ep);
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 6);
        let last: Vec<&str> = lines[5].split(',').collect();
        assert_eq!(last[2], "-1"); // query token carries no label
        assert_eq!(last[4], "1"); // and is the only loss-masked token
        assert_eq!(last.len(), 5 + 3);
    }

    #[test]
    fn pool_too_small_is_an_error() {
        let cfg = pool_cfg(3, 4, 0.1);
        let mut rng = Rng::new(61, 0);
        let pool = gen_synthetic_classes(&cfg, &mut rng).unwrap();
        let spec = EpisodeSpec {
            n_ways: 5,
            k_shots: 1,
            protocol: Protocol::Synchronous,
            max_instances_per_class: 0,
        };
        assert!(sample_episode(&spec, &pool, &mut rng).is_err());
    }

    #[test]
    fn fixed_pool_sampling_is_without_replacement() {
        let mut rng = Rng::new(67, 0);
        let classes: Vec<FixedClass> = (0..4)
            .map(|c| FixedClass {
                class_id: c,
                samples: (0..3).map(|_| rng.normal_vec(4, 1.0)).collect(),
            })
            .collect();
        let pool = ClassPool::Fixed { task_id: 0, dim: 4, classes };
        let spec = EpisodeSpec {
            n_ways: 3,
            k_shots: 2,
            protocol: Protocol::Synchronous,
            max_instances_per_class: 0,
        };
        for _ in 0..30 {
            let ep = sample_episode(&spec, &pool, &mut rng).unwrap();
            // K = 2 shots plus the query never repeat a sample vector.
            let query = &ep.tokens.last().unwrap().feature;
            for t in &ep.tokens[..ep.len() - 1] {
                assert_ne!(&t.feature, query);
            }
        }
        // Asking for more samples than a class holds is an error.
        let spec = EpisodeSpec {
            n_ways: 3,
            k_shots: 4,
            protocol: Protocol::Synchronous,
            max_instances_per_class: 0,
        };
        assert!(sample_episode(&spec, &pool, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_deterministic_under_fixed_seed() {
        let cfg = pool_cfg(12, 5, 0.1);
        let pool = gen_synthetic_classes(&cfg, &mut Rng::new(59, 0)).unwrap();
        let spec = EpisodeSpec {
            n_ways: 4,
            k_shots: 2,
            protocol: Protocol::Delayed,
            max_instances_per_class: 5,
        };
        let a = sample_episode(&spec, &pool, &mut Rng::new(60, 1)).unwrap();
        let b = sample_episode(&spec, &pool, &mut Rng::new(60, 1)).unwrap();
        assert_eq!(a, b);
    }
}

//! Sparse-observation data model for irregularly sampled multivariate time
//! series: instances as (channel, time, value) triples, JSONL ingestion,
//! per-channel normalization, and stratified splitting.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed measurement: channel index, timestamp, value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub channel: usize,
    pub time: f64,
    pub value: f64,
}

/// Supervision attached to an instance: a class label, or a set of
/// (channel, time, value) query triples for interpolation/forecasting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Label(usize),
    Queries(Vec<Observation>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Interpolation,
    Forecasting,
}

/// One irregularly sampled multivariate series with its supervision.
///
/// Observations are kept sorted by (channel, time), so per-channel runs are
/// contiguous and construction is invariant to input ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsmtsInstance {
    observations: Vec<Observation>,
    pub span: (f64, f64),
    pub target: Target,
}

impl IsmtsInstance {
    /// Validates and sorts; rejects duplicate (channel, time) pairs,
    /// out-of-span times, and non-finite values.
    pub fn new(
        mut observations: Vec<Observation>,
        span: (f64, f64),
        target: Target,
        channels: usize,
    ) -> Result<Self> {
        observations.sort_by(|a, b| {
            (a.channel, a.time)
                .partial_cmp(&(b.channel, b.time))
                .expect("finite times")
        });
        for obs in &observations {
            if obs.channel >= channels {
                return Err(Error::ChannelRange {
                    channel: obs.channel,
                    c: channels,
                });
            }
            if !obs.value.is_finite() || !obs.time.is_finite() {
                return Err(Error::NonFinite { op: "observation" });
            }
            if obs.time < span.0 || obs.time > span.1 {
                return Err(Error::TimeOutOfSpan {
                    time: obs.time,
                    t_min: span.0,
                    t_max: span.1,
                });
            }
        }
        for w in observations.windows(2) {
            if w[0].channel == w[1].channel && w[0].time == w[1].time {
                return Err(Error::DuplicateObservation {
                    channel: w[0].channel,
                    time: w[0].time,
                });
            }
        }
        if let Target::Queries(queries) = &target {
            for q in queries {
                if q.channel >= channels {
                    return Err(Error::ChannelRange {
                        channel: q.channel,
                        c: channels,
                    });
                }
                if !q.value.is_finite() || !q.time.is_finite() {
                    return Err(Error::NonFinite { op: "query" });
                }
            }
        }
        Ok(Self {
            observations,
            span,
            target,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn num_observations(&self) -> usize {
        self.observations.len()
    }

    /// Contiguous run of observations on one channel, sorted by time.
    pub fn channel_observations(&self, channel: usize) -> &[Observation] {
        let start = self
            .observations
            .partition_point(|o| o.channel < channel);
        let end = self.observations.partition_point(|o| o.channel <= channel);
        &self.observations[start..end]
    }

    pub fn label(&self) -> Option<usize> {
        match &self.target {
            Target::Label(y) => Some(*y),
            Target::Queries(_) => None,
        }
    }

    pub fn queries(&self) -> &[Observation] {
        match &self.target {
            Target::Label(_) => &[],
            Target::Queries(q) => q,
        }
    }

    /// Maps a raw timestamp into [0, 1] over the declared span (forecasting
    /// queries past the span map above 1).
    pub fn unit_time(&self, t: f64) -> f64 {
        let width = (self.span.1 - self.span.0).max(f64::MIN_POSITIVE);
        (t - self.span.0) / width
    }
}

/// Per-channel standardization statistics, computed on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// A collection of instances sharing channel count and task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub instances: Vec<IsmtsInstance>,
    pub channels: usize,
    pub task: Task,
    pub horizon: Option<f64>,
    /// Present once `normalize` has been applied; holds the stats used.
    pub norm_stats: Option<Vec<ChannelStats>>,
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    meta: Meta,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    #[serde(rename = "C")]
    c: usize,
    task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    horizon: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    span: (f64, f64),
    obs: Vec<(usize, f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    queries: Option<Vec<(usize, f64, f64)>>,
}

impl Dataset {
    pub fn new(
        instances: Vec<IsmtsInstance>,
        channels: usize,
        task: Task,
        horizon: Option<f64>,
    ) -> Result<Self> {
        let ds = Self {
            instances,
            channels,
            task,
            horizon,
            norm_stats: None,
        };
        ds.validate_targets()?;
        Ok(ds)
    }

    fn validate_targets(&self) -> Result<()> {
        for inst in &self.instances {
            match (&inst.target, self.task) {
                (Target::Label(_), Task::Classification) => {}
                (Target::Queries(queries), Task::Interpolation) => {
                    for q in queries {
                        if q.time < inst.span.0 || q.time > inst.span.1 {
                            return Err(Error::TimeOutOfSpan {
                                time: q.time,
                                t_min: inst.span.0,
                                t_max: inst.span.1,
                            });
                        }
                    }
                }
                (Target::Queries(queries), Task::Forecasting) => {
                    for q in queries {
                        if q.time <= inst.span.1 {
                            return Err(Error::Config(format!(
                                "forecasting query at {} does not exceed the observation window cutoff {}",
                                q.time, inst.span.1
                            )));
                        }
                    }
                }
                (target, task) => {
                    return Err(Error::Config(format!(
                        "target {target:?} does not match task {task:?}"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Number of distinct classes implied by the labels (max label + 1).
    pub fn num_classes(&self) -> usize {
        self.instances
            .iter()
            .filter_map(|i| i.label())
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Reads the JSONL dataset format: a header line with the metadata
    /// object, then one instance object per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        let mut lines = BufReader::new(file).lines().enumerate();

        let Some((_, first)) = lines.next() else {
            log::warn!(
                "{}: empty dataset file, loading 0 instances",
                path.as_ref().display()
            );
            return Dataset::new(Vec::new(), 0, Task::Classification, None);
        };
        let header: HeaderRecord =
            serde_json::from_str(&first?).map_err(|e| Error::Parse {
                line: 1,
                msg: format!("bad header: {e}"),
            })?;
        let meta = header.meta;

        let mut instances = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let record: InstanceRecord =
                serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: lineno,
                    msg: e.to_string(),
                })?;
            instances.push(record_to_instance(record, meta.task, meta.c)?);
        }
        if instances.is_empty() {
            log::warn!(
                "{}: dataset has a header but 0 instances",
                path.as_ref().display()
            );
        }
        Dataset::new(instances, meta.c, meta.task, meta.horizon)
    }

    /// Writes the JSONL format read by [`Dataset::load`].
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let header = HeaderRecord {
            meta: Meta {
                c: self.channels,
                task: self.task,
                horizon: self.horizon,
            },
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for inst in &self.instances {
            let record = InstanceRecord {
                span: inst.span,
                obs: inst
                    .observations
                    .iter()
                    .map(|o| (o.channel, o.time, o.value))
                    .collect(),
                label: inst.label(),
                queries: match &inst.target {
                    Target::Label(_) => None,
                    Target::Queries(q) => {
                        Some(q.iter().map(|o| (o.channel, o.time, o.value)).collect())
                    }
                },
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Computes per-channel standardization stats over this dataset's
    /// observed values (meant for the training split).
    pub fn compute_stats(&self) -> Vec<ChannelStats> {
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); self.channels];
        for inst in &self.instances {
            for obs in &inst.observations {
                let (s, s2, n) = &mut sums[obs.channel];
                *s += obs.value;
                *s2 += obs.value * obs.value;
                *n += 1;
            }
        }
        sums.into_iter()
            .map(|(s, s2, n)| {
                if n == 0 {
                    ChannelStats { mean: 0.0, std: 1.0 }
                } else {
                    let mean = s / n as f64;
                    let var = (s2 / n as f64 - mean * mean).max(0.0);
                    ChannelStats {
                        mean,
                        std: var.sqrt().max(1e-8),
                    }
                }
            })
            .collect()
    }

    /// Standardizes values per channel and rescales timestamps to [0, 1]
    /// over each instance's span. When `stats` is `None`, the stats are
    /// computed from this dataset (which must then be a training split).
    pub fn normalize(&self, stats: Option<&[ChannelStats]>) -> Dataset {
        let stats: Vec<ChannelStats> = match stats {
            Some(s) => s.to_vec(),
            None => self.compute_stats(),
        };
        let map_obs = |inst: &IsmtsInstance, o: &Observation| Observation {
            channel: o.channel,
            time: inst.unit_time(o.time),
            value: (o.value - stats[o.channel].mean) / stats[o.channel].std,
        };
        let instances = self
            .instances
            .iter()
            .map(|inst| IsmtsInstance {
                observations: inst.observations.iter().map(|o| map_obs(inst, o)).collect(),
                span: inst.span,
                target: match &inst.target {
                    Target::Label(y) => Target::Label(*y),
                    Target::Queries(qs) => {
                        Target::Queries(qs.iter().map(|q| map_obs(inst, q)).collect())
                    }
                },
            })
            .collect();
        Dataset {
            instances,
            channels: self.channels,
            task: self.task,
            horizon: self.horizon,
            norm_stats: Some(stats),
        }
    }

    /// Inverse of [`Dataset::normalize`] given the stats it stored.
    pub fn denormalize(&self) -> Dataset {
        let Some(stats) = &self.norm_stats else {
            return self.clone();
        };
        let unmap = |inst: &IsmtsInstance, o: &Observation| Observation {
            channel: o.channel,
            time: inst.span.0 + o.time * (inst.span.1 - inst.span.0),
            value: o.value * stats[o.channel].std + stats[o.channel].mean,
        };
        let instances = self
            .instances
            .iter()
            .map(|inst| IsmtsInstance {
                observations: inst.observations.iter().map(|o| unmap(inst, o)).collect(),
                span: inst.span,
                target: match &inst.target {
                    Target::Label(y) => Target::Label(*y),
                    Target::Queries(qs) => {
                        Target::Queries(qs.iter().map(|q| unmap(inst, q)).collect())
                    }
                },
            })
            .collect();
        Dataset {
            instances,
            channels: self.channels,
            task: self.task,
            horizon: self.horizon,
            norm_stats: None,
        }
    }

    /// Deterministic (train, validation, test) partition. Classification
    /// datasets are stratified by label.
    pub fn split(&self, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
        let r = [ratios.0, ratios.1, ratios.2];
        if r.iter().any(|&x| x <= 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must be positive and sum to 1, got {r:?}"
            )));
        }
        let n = self.instances.len();
        let targets = largest_remainder(n, &r);

        // Group indices by label (single group for regression tasks).
        let mut groups: Vec<Vec<usize>> = Vec::new();
        if self.task == Task::Classification {
            let classes = self.num_classes().max(1);
            groups.resize(classes, Vec::new());
            for (i, inst) in self.instances.iter().enumerate() {
                groups[inst.label().unwrap_or(0)].push(i);
            }
        } else {
            groups.push((0..n).collect());
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut assigned = [0usize; 3];
        let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for group in &mut groups {
            group.shuffle(&mut rng);
            let g = group.len();
            let mut counts = [0usize; 3];
            let mut used = 0;
            for s in 0..3 {
                counts[s] = (((g as f64) * r[s]).floor() as usize)
                    .min(targets[s].saturating_sub(assigned[s]));
                used += counts[s];
            }
            // Hand out the remainder to the splits furthest (relative to
            // their ratio) from their global target.
            while used < g {
                let pick = (0..3)
                    .filter(|&s| assigned[s] + counts[s] < targets[s])
                    .max_by(|&a, &b| {
                        let da = (targets[a] - assigned[a] - counts[a]) as f64 / r[a];
                        let db = (targets[b] - assigned[b] - counts[b]) as f64 / r[b];
                        da.partial_cmp(&db).expect("finite ratios")
                    });
                match pick {
                    Some(s) => counts[s] += 1,
                    None => break,
                }
                used += 1;
            }
            let mut offset = 0;
            for s in 0..3 {
                parts[s].extend(&group[offset..offset + counts[s]]);
                offset += counts[s];
                assigned[s] += counts[s];
            }
        }

        for (s, part) in parts.iter().enumerate() {
            if part.is_empty() {
                return Err(Error::Config(format!(
                    "split {} would receive 0 instances (n={n}, ratios {r:?})",
                    ["train", "val", "test"][s]
                )));
            }
        }

        let build = |idx: &Vec<usize>| Dataset {
            instances: idx.iter().map(|&i| self.instances[i].clone()).collect(),
            channels: self.channels,
            task: self.task,
            horizon: self.horizon,
            norm_stats: self.norm_stats.clone(),
        };
        Ok((build(&parts[0]), build(&parts[1]), build(&parts[2])))
    }
}

fn record_to_instance(record: InstanceRecord, task: Task, channels: usize) -> Result<IsmtsInstance> {
    let observations = record
        .obs
        .iter()
        .map(|&(channel, time, value)| Observation {
            channel,
            time,
            value,
        })
        .collect();
    let target = match (task, record.label, record.queries) {
        (Task::Classification, Some(label), None) => Target::Label(label),
        (Task::Interpolation | Task::Forecasting, None, Some(queries)) => Target::Queries(
            queries
                .iter()
                .map(|&(channel, time, value)| Observation {
                    channel,
                    time,
                    value,
                })
                .collect(),
        ),
        _ => {
            return Err(Error::Config(format!(
                "instance supervision does not match task {task:?}"
            )))
        }
    };
    IsmtsInstance::new(observations, record.span, target, channels)
}

/// Integer apportionment of `n` by `ratios` (largest remainder).
fn largest_remainder(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    let mut used = 0;
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
        used += *c;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).expect("finite ratios")
    });
    for &s in order.iter().cycle().take(n - used) {
        counts[s] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_file(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_transcribes_a_classification_line() {
        let f = write_file(
            "{\"meta\":{\"C\":2,\"task\":\"classification\"}}\n\
             {\"span\":[0,48],\"obs\":[[0,1.5,0.7]],\"label\":1}\n",
        );
        let ds = Dataset::load(f.path()).unwrap();
        assert_eq!(ds.channels, 2);
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.instances[0].num_observations(), 1);
        assert_eq!(ds.instances[0].label(), Some(1));
    }

    #[test]
    fn load_empty_file_gives_empty_dataset() {
        let f = write_file("");
        let ds = Dataset::load(f.path()).unwrap();
        assert_eq!(ds.len(), 0);
    }

    #[test]
    fn load_rejects_out_of_range_channel() {
        let f = write_file(
            "{\"meta\":{\"C\":2,\"task\":\"classification\"}}\n\
             {\"span\":[0,48],\"obs\":[[5,1.0,0.3]],\"label\":0}\n",
        );
        let err = Dataset::load(f.path()).unwrap_err();
        assert!(err.to_string().contains("channel 5"), "{err}");
    }

    #[test]
    fn load_rejects_duplicate_observation() {
        let f = write_file(
            "{\"meta\":{\"C\":2,\"task\":\"classification\"}}\n\
             {\"span\":[0,48],\"obs\":[[0,1.0,0.3],[0,1.0,0.4]],\"label\":0}\n",
        );
        let err = Dataset::load(f.path()).unwrap_err();
        assert!(matches!(err, Error::DuplicateObservation { .. }));
    }

    #[test]
    fn load_reports_line_number_for_malformed_lines() {
        let f = write_file(
            "{\"meta\":{\"C\":2,\"task\":\"classification\"}}\n\
             {\"span\":[0,48],\"obs\":[[0,1.0,0.3]],\"label\":0}\n\
             not json\n",
        );
        let err = Dataset::load(f.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn normalize_standardizes_per_channel() {
        let inst = IsmtsInstance::new(
            vec![
                Observation { channel: 0, time: 0.0, value: 2.0 },
                Observation { channel: 0, time: 13.5, value: 4.0 },
            ],
            (0.0, 48.0),
            Target::Label(0),
            2,
        )
        .unwrap();
        let ds = Dataset::new(vec![inst], 2, Task::Classification, None).unwrap();
        let norm = ds.normalize(None);
        let obs = norm.instances[0].observations();
        assert!((obs[0].value + 1.0).abs() < 1e-12);
        assert!((obs[1].value - 1.0).abs() < 1e-12);
        assert!((obs[1].time - 0.28125).abs() < 1e-12);
        // Channel 1 saw no data: identity stats.
        let stats = norm.norm_stats.as_ref().unwrap();
        assert_eq!(stats[1], ChannelStats { mean: 0.0, std: 1.0 });
    }

    #[test]
    fn normalize_then_denormalize_round_trips() {
        let inst = IsmtsInstance::new(
            vec![
                Observation { channel: 0, time: 1.0, value: 5.0 },
                Observation { channel: 1, time: 7.25, value: -3.5 },
                Observation { channel: 0, time: 20.0, value: 9.0 },
            ],
            (0.0, 48.0),
            Target::Label(1),
            2,
        )
        .unwrap();
        let ds = Dataset::new(vec![inst], 2, Task::Classification, None).unwrap();
        let back = ds.normalize(None).denormalize();
        for (a, b) in ds.instances[0]
            .observations()
            .iter()
            .zip(back.instances[0].observations())
        {
            assert!((a.value - b.value).abs() < 1e-9);
            assert!((a.time - b.time).abs() < 1e-9);
        }
    }

    #[test]
    fn split_sizes_follow_ratios() {
        let instances = (0..10)
            .map(|i| {
                IsmtsInstance::new(
                    vec![Observation { channel: 0, time: i as f64, value: 1.0 }],
                    (0.0, 10.0),
                    Target::Label(i % 2),
                    1,
                )
                .unwrap()
            })
            .collect();
        let ds = Dataset::new(instances, 1, Task::Classification, None).unwrap();
        let (train, val, test) = ds.split((0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let instances: Vec<_> = (0..23)
            .map(|i| {
                IsmtsInstance::new(
                    vec![Observation { channel: 0, time: i as f64, value: 1.0 }],
                    (0.0, 23.0),
                    Target::Label(i % 3),
                    1,
                )
                .unwrap()
            })
            .collect();
        let ds = Dataset::new(instances, 1, Task::Classification, None).unwrap();
        let (a1, b1, c1) = ds.split((0.6, 0.2, 0.2), 9).unwrap();
        let (a2, b2, c2) = ds.split((0.6, 0.2, 0.2), 9).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(c1, c2);
        let mut all: Vec<f64> = a1
            .instances
            .iter()
            .chain(&b1.instances)
            .chain(&c1.instances)
            .map(|i| i.observations()[0].time)
            .collect();
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(all, (0..23).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn split_stratifies_balanced_labels() {
        let instances: Vec<_> = (0..10)
            .map(|i| {
                IsmtsInstance::new(
                    vec![Observation { channel: 0, time: i as f64, value: 1.0 }],
                    (0.0, 10.0),
                    Target::Label(i % 2),
                    1,
                )
                .unwrap()
            })
            .collect();
        let ds = Dataset::new(instances, 1, Task::Classification, None).unwrap();
        for seed in 0..5 {
            let (train, val, test) = ds.split((0.8, 0.1, 0.1), seed).unwrap();
            for part in [&train, &val, &test] {
                let ones = part.instances.iter().filter(|i| i.label() == Some(1)).count();
                let zeros = part.len() - ones;
                assert!(
                    ones.abs_diff(zeros) <= 1,
                    "seed {seed}: {zeros} vs {ones} in a split of {}",
                    part.len()
                );
            }
        }
    }

    #[test]
    fn split_rejects_empty_split() {
        let instances: Vec<_> = (0..3)
            .map(|i| {
                IsmtsInstance::new(vec![], (0.0, 1.0), Target::Label(i % 2), 1).unwrap()
            })
            .collect();
        let ds = Dataset::new(instances, 1, Task::Classification, None).unwrap();
        assert!(ds.split((0.8, 0.1, 0.1), 0).is_err());
    }

    #[test]
    fn save_then_load_is_identity() {
        let instances = vec![
            IsmtsInstance::new(
                vec![
                    Observation { channel: 1, time: 3.0, value: 0.25 },
                    Observation { channel: 0, time: 1.0, value: -1.5 },
                ],
                (0.0, 10.0),
                Target::Label(1),
                3,
            )
            .unwrap(),
            IsmtsInstance::new(vec![], (0.0, 10.0), Target::Label(0), 3).unwrap(),
        ];
        let ds = Dataset::new(instances, 3, Task::Classification, None).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        ds.save(f.path()).unwrap();
        let loaded = Dataset::load(f.path()).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn channel_observations_are_contiguous_sorted_runs() {
        let inst = IsmtsInstance::new(
            vec![
                Observation { channel: 1, time: 5.0, value: 1.0 },
                Observation { channel: 0, time: 9.0, value: 2.0 },
                Observation { channel: 1, time: 2.0, value: 3.0 },
            ],
            (0.0, 10.0),
            Target::Label(0),
            2,
        )
        .unwrap();
        assert_eq!(inst.channel_observations(0).len(), 1);
        let ch1 = inst.channel_observations(1);
        assert_eq!(ch1.len(), 2);
        assert!(ch1[0].time < ch1[1].time);
    }

    #[test]
    fn forecasting_queries_must_exceed_cutoff() {
        let inst = IsmtsInstance::new(
            vec![Observation { channel: 0, time: 1.0, value: 0.5 }],
            (0.0, 10.0),
            Target::Queries(vec![Observation { channel: 0, time: 5.0, value: 0.1 }]),
            1,
        )
        .unwrap();
        assert!(Dataset::new(vec![inst], 1, Task::Forecasting, None).is_err());
    }
}

//! Episodes built on the fly from the stream, with sparse replay queries.
//!
//! An episode takes `m` stream batches as its support set and the next
//! stream batch as its query. Every `R_F`-th episode instead draws its query
//! of `⌊r·R_I⌋` examples from memory, where
//!
//! ```text
//! R_F = ⌈(R_I/b + 1) / (m + 1)⌉
//! ```
//!
//! is the smallest episode count for which at least `R_I` stream examples
//! separate two replays: `b·[(R_F − 1)(m + 1) + m] ≥ R_I`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::EpisodicMemory;
use crate::stream::{Example, StreamBatch};

/// Slack added before flooring `r·R_I`, so that e.g. 0.29 × 100 gives 29.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplaySchedule {
    /// Mini-batch size `b`.
    pub batch_size: usize,
    /// Support batches per episode, `m`.
    pub support_batches: usize,
    /// Stream examples between two replays, `R_I`.
    pub replay_interval: usize,
    /// Fraction of `R_I` drawn from memory at each replay, `r`.
    pub replay_rate: f64,
}

/// `⌈(R_I/b + 1)/(m + 1)⌉`, computed in integers as `⌈(R_I + b)/(b(m + 1))⌉`.
pub fn replay_frequency(replay_interval: usize, batch_size: usize, support_batches: usize) -> Result<usize> {
    if replay_interval == 0 || batch_size == 0 || support_batches == 0 {
        return Err(Error::input("R_I, b and m must all be positive"));
    }
    if replay_interval < batch_size {
        return Err(Error::input(format!(
            "replay interval {replay_interval} is shorter than one batch of {batch_size}"
        )));
    }
    Ok((replay_interval + batch_size).div_ceil(batch_size * (support_batches + 1)))
}

/// Optimizer steps between replays for learners that step once per batch.
pub fn baseline_frequency(replay_interval: usize, batch_size: usize) -> Result<usize> {
    if replay_interval == 0 || batch_size == 0 {
        return Err(Error::input("R_I and b must be positive"));
    }
    Ok(replay_interval.div_ceil(batch_size))
}

/// `⌊r·R_I⌋`.
pub fn replay_size(replay_rate: f64, replay_interval: usize) -> usize {
    (replay_rate * replay_interval as f64 + FLOOR_SLACK).floor() as usize
}

impl ReplaySchedule {
    pub fn new(batch_size: usize, support_batches: usize, replay_interval: usize, replay_rate: f64) -> Result<Self> {
        let s = Self {
            batch_size,
            support_batches,
            replay_interval,
            replay_rate,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        replay_frequency(self.replay_interval, self.batch_size, self.support_batches)?;
        if !(0.0..=1.0).contains(&self.replay_rate) {
            return Err(Error::input(format!(
                "replay rate must be in [0, 1], got {}",
                self.replay_rate
            )));
        }
        if self.replay_size() == 0 {
            return Err(Error::input(format!(
                "replay batch ⌊{} × {}⌋ is empty",
                self.replay_rate, self.replay_interval
            )));
        }
        Ok(())
    }

    pub fn replay_frequency(&self) -> usize {
        replay_frequency(self.replay_interval, self.batch_size, self.support_batches)
            .expect("validated")
    }

    pub fn baseline_frequency(&self) -> usize {
        baseline_frequency(self.replay_interval, self.batch_size).expect("validated")
    }

    pub fn replay_size(&self) -> usize {
        replay_size(self.replay_rate, self.replay_interval)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    Stream,
    Memory,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Stream(StreamBatch),
    Memory(Vec<Example>),
    /// The stream ended with a lone support batch; there is no outer update.
    Absent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// 1-based.
    pub index: usize,
    pub support: Vec<StreamBatch>,
    pub query: Query,
}

impl Episode {
    pub fn query_source(&self) -> Option<QuerySource> {
        match self.query {
            Query::Stream(_) => Some(QuerySource::Stream),
            Query::Memory(_) => Some(QuerySource::Memory),
            Query::Absent => None,
        }
    }

    pub fn query_examples(&self) -> Option<&[Example]> {
        match &self.query {
            Query::Stream(b) => Some(b.examples()),
            Query::Memory(v) => Some(v),
            Query::Absent => None,
        }
    }

    pub fn support_examples(&self) -> impl Iterator<Item = &[Example]> {
        self.support.iter().map(StreamBatch::examples)
    }

    pub fn stream_batches(&self) -> impl Iterator<Item = &StreamBatch> {
        let q = match &self.query {
            Query::Stream(b) => Some(b),
            _ => None,
        };
        self.support.iter().chain(q)
    }

    pub fn trace(&self) -> EpisodeTrace {
        EpisodeTrace {
            index: self.index,
            query_source: self.query_source(),
            support_size: self.support.iter().map(StreamBatch::len).sum(),
            query_size: self.query_examples().map_or(0, <[Example]>::len),
        }
    }
}

/// One line of the episode debug trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub index: usize,
    pub query_source: Option<QuerySource>,
    pub support_size: usize,
    pub query_size: usize,
}

/// Cuts a batch stream into episodes.
pub struct EpisodeGenerator<I> {
    stream: I,
    schedule: ReplaySchedule,
    replay: bool,
    next_index: usize,
    skipped_replays: usize,
}

impl<I: Iterator<Item = StreamBatch>> EpisodeGenerator<I> {
    /// With `replay` false every query comes from the stream.
    pub fn new(stream: I, schedule: ReplaySchedule, replay: bool) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            stream,
            schedule,
            replay,
            next_index: 1,
            skipped_replays: 0,
        })
    }

    /// Replay episodes that fell back to a stream query because memory was
    /// empty.
    pub fn skipped_replays(&self) -> usize {
        self.skipped_replays
    }

    /// The next episode, or `None` once the stream is exhausted.
    ///
    /// A replay query is sampled before the caller writes anything from
    /// this episode to memory. At the end of the stream a short support set
    /// is used as-is; a stream query is then taken from the last support
    /// batch, unless that would leave no support, in which case the episode
    /// has no query.
    pub fn next_episode(&mut self, memory: &mut EpisodicMemory) -> Result<Option<Episode>> {
        let m = self.schedule.support_batches;
        let mut support: Vec<StreamBatch> = Vec::with_capacity(m);
        while support.len() < m {
            match self.stream.next() {
                Some(b) => support.push(b),
                None => break,
            }
        }
        if support.is_empty() {
            return Ok(None);
        }
        let index = self.next_index;
        self.next_index += 1;

        let replay_due = self.replay && index % self.schedule.replay_frequency() == 0;
        let query = if replay_due && !memory.is_empty() {
            Query::Memory(memory.sample(self.schedule.replay_size())?)
        } else {
            if replay_due {
                self.skipped_replays += 1;
            }
            match self.stream.next() {
                Some(b) => Query::Stream(b),
                None if support.len() >= 2 => Query::Stream(support.pop().expect("len >= 2")),
                None => Query::Absent,
            }
        };
        Ok(Some(Episode {
            index,
            support,
            query,
        }))
    }
}

/// Support drawn from memory and the full test set as query.
#[derive(Debug, Clone)]
pub struct MetaTestEpisode<'a> {
    pub support: Vec<Vec<Example>>,
    pub query: &'a [Example],
}

/// Samples `m·b` memory items regrouped into batches of `b`. With
/// `fine_tune` false the support is empty and memory is not touched.
pub fn meta_test_episode<'a>(
    memory: &mut EpisodicMemory,
    test_set: &'a [Example],
    support_batches: usize,
    batch_size: usize,
    fine_tune: bool,
) -> Result<MetaTestEpisode<'a>> {
    if !fine_tune {
        return Ok(MetaTestEpisode {
            support: Vec::new(),
            query: test_set,
        });
    }
    let sample = memory.sample(support_batches * batch_size)?;
    Ok(MetaTestEpisode {
        support: sample.chunks(batch_size.max(1)).map(<[Example]>::to_vec).collect(),
        query: test_set,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{build_stream, StreamConfig, TaskSpec};
    use proptest::prelude::*;

    #[test]
    fn replay_frequency_values() {
        assert_eq!(replay_frequency(9600, 16, 5).unwrap(), 101);
        assert_eq!(replay_frequency(1600, 4, 5).unwrap(), 67);
        assert_eq!(baseline_frequency(9600, 16).unwrap(), 600);
        assert_eq!(replay_size(0.01, 9600), 96);
        assert_eq!(replay_size(0.01, 1600), 16);
        assert_eq!(replay_size(0.29, 100), 29);
        assert!(replay_frequency(0, 16, 5).is_err());
        assert!(replay_frequency(8, 16, 5).is_err());
        assert!(ReplaySchedule::new(16, 5, 50, 0.01).is_err());
    }

    proptest! {
        #[test]
        fn replay_never_precedes_the_interval(b in 1usize..64, m in 1usize..12, extra in 0usize..5000) {
            let r_i = b + extra;
            let r_f = replay_frequency(r_i, b, m).unwrap();
            prop_assert!(b * ((r_f - 1) * (m + 1) + m) >= r_i);
            // and one episode fewer would replay too early
            if r_f > 1 {
                prop_assert!(b * ((r_f - 2) * (m + 1) + m) < r_i);
            }
        }
    }

    fn tasks(sizes: &[usize]) -> Vec<TaskSpec> {
        sizes
            .iter()
            .enumerate()
            .map(|(id, &n)| TaskSpec {
                id,
                name: String::new(),
                train: (0..n).map(|i| Example::new(vec![i as f64], id)).collect(),
                test: vec![],
            })
            .collect()
    }

    fn run_all(
        sizes: &[usize],
        schedule: ReplaySchedule,
        replay: bool,
    ) -> (Vec<Episode>, EpisodicMemory) {
        let tasks = tasks(sizes);
        let stream = build_stream(&tasks, &StreamConfig::in_order(sizes.len(), schedule.batch_size, 1)).unwrap();
        let mut gen = EpisodeGenerator::new(stream, schedule, replay).unwrap();
        let mut memory = EpisodicMemory::new(1.0, 2).unwrap();
        let mut out = Vec::new();
        while let Some(ep) = gen.next_episode(&mut memory).unwrap() {
            if let Query::Stream(q) = &ep.query {
                memory.write(q);
            }
            for s in &ep.support {
                memory.write(s);
            }
            out.push(ep);
        }
        (out, memory)
    }

    #[test]
    fn replay_lands_on_every_r_f_th_episode() {
        let schedule = ReplaySchedule::new(16, 5, 9600, 0.01).unwrap();
        let (eps, _) = run_all(&[16 * 700], schedule, true);
        for ep in &eps[..100] {
            assert_eq!(ep.query_source(), Some(QuerySource::Stream));
        }
        assert_eq!(eps[100].index, 101);
        assert_eq!(eps[100].query_source(), Some(QuerySource::Memory));
        assert_eq!(eps[100].query_examples().unwrap().len(), 96);
        assert_eq!(eps[100].support.len(), 5);
    }

    #[test]
    fn stream_tail_becomes_a_short_episode() {
        // 8 batches, m = 5: one full episode (6 batches) then 2 support + ... no:
        // the tail of 2 batches gives 1 support + 1 query.
        let schedule = ReplaySchedule::new(4, 5, 400, 0.01).unwrap();
        let (eps, _) = run_all(&[4 * 9], schedule, false);
        // 9 batches: 6 + 3 → tail episode has 2 support batches and 1 query
        assert_eq!(eps.len(), 2);
        assert_eq!(eps[1].support.len(), 2);
        assert_eq!(eps[1].query_source(), Some(QuerySource::Stream));

        let (eps, _) = run_all(&[4 * 7], schedule, false);
        assert_eq!(eps.len(), 2);
        assert_eq!(eps[1].support.len(), 1);
        assert_eq!(eps[1].query, Query::Absent);
    }

    #[test]
    fn no_replay_counts_full_and_partial_episodes() {
        let schedule = ReplaySchedule::new(16, 5, 1920, 0.01).unwrap();
        let (eps, _) = run_all(&[2000; 5], schedule, false);
        // 625 batches = 104 × 6 + 1
        assert_eq!(eps.len(), 105);
        assert!(eps[..104].iter().all(|e| e.support.len() == 5));
        assert_eq!(eps[104].query, Query::Absent);
    }

    #[test]
    fn every_stream_batch_is_used_once() {
        let schedule = ReplaySchedule::new(8, 3, 200, 0.05).unwrap();
        let sizes = [123, 77, 301];
        let (eps, memory) = run_all(&sizes, schedule, true);
        let used: usize = eps.iter().flat_map(|e| e.stream_batches()).map(StreamBatch::len).sum();
        assert_eq!(used, sizes.iter().sum::<usize>());
        assert_eq!(memory.len(), used);
        let memory_queries = eps
            .iter()
            .filter(|e| e.query_source() == Some(QuerySource::Memory))
            .count();
        assert_eq!(memory_queries, eps.len() / schedule.replay_frequency());
    }

    #[test]
    fn empty_memory_falls_back_to_stream() {
        let schedule = ReplaySchedule::new(4, 1, 4, 0.5).unwrap();
        assert_eq!(schedule.replay_frequency(), 1);
        let tasks = tasks(&[40]);
        let stream = build_stream(&tasks, &StreamConfig::in_order(1, 4, 0)).unwrap();
        let mut gen = EpisodeGenerator::new(stream, schedule, true).unwrap();
        let mut memory = EpisodicMemory::new(0.0, 0).unwrap();
        let ep = gen.next_episode(&mut memory).unwrap().unwrap();
        assert_eq!(ep.query_source(), Some(QuerySource::Stream));
        assert_eq!(gen.skipped_replays(), 1);
    }

    #[test]
    fn meta_test_support_shape() {
        let tasks = tasks(&[500]);
        let mut memory = EpisodicMemory::new(1.0, 0).unwrap();
        for b in build_stream(&tasks, &StreamConfig::in_order(1, 16, 0)).unwrap() {
            memory.write(&b);
        }
        let test = vec![Example::new(vec![0.0], 0); 7];
        let ep = meta_test_episode(&mut memory, &test, 5, 16, true).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert!(ep.support.iter().all(|b| b.len() == 16));
        assert_eq!(ep.query.len(), 7);
        let plain = meta_test_episode(&mut memory, &test, 5, 16, false).unwrap();
        assert!(plain.support.is_empty());

        let mut empty = EpisodicMemory::new(1.0, 0).unwrap();
        assert!(meta_test_episode(&mut empty, &test, 5, 16, true).is_err());
        assert!(meta_test_episode(&mut empty, &test, 5, 16, false).is_ok());
    }
}

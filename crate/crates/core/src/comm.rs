//! Sampled, intermittent, delayed and lossy links.
//!
//! Every edge `j -> i` may transmit at the instants `k T`. Each transmission
//! is either lost (delay = ∞) or delivered after a finite delay. A receiver
//! keeps, per in-edge, only the delivered message with the largest sequence
//! number, which is how it resolves the most recent information of `j` even
//! when packets arrive out of order.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack used when comparing times built from sums of grid multiples.
pub const TIME_EPS: f64 = 1e-9;
/// Drop probabilities are capped just below one so the draw stays meaningful.
const MAX_DROP_PROB: f64 = 1.0 - 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum CommError {
    #[error("sampling period T must be positive and finite, got {0}")]
    BadPeriod(f64),
    #[error("blackout bound T* = {t_star} must be at least the sampling period T = {period}")]
    BlackoutBelowPeriod { t_star: f64, period: f64 },
    #[error("drop probability {0} is outside [0, 1]")]
    BadDropProb(f64),
    #[error("maximum delay {delay_max} must be nonnegative and below T* = {t_star}")]
    BadDelayMax { delay_max: f64, t_star: f64 },
    #[error("delay quantum {0} must be nonnegative and finite")]
    BadQuantum(f64),
    #[error("no payload available for agent {agent} at sample {seq}")]
    MissingPayload { agent: usize, seq: u64 },
    #[error("interval ({from}, {to}] runs backwards")]
    BackwardsInterval { from: f64, to: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommConfig {
    /// Common sampling period T in seconds.
    pub period: f64,
    /// Bound T* on blackout intervals in seconds.
    pub t_star: f64,
    pub drop_prob: f64,
    /// Largest finite delay in seconds.
    pub delay_max: f64,
    pub seed: u64,
}

impl CommConfig {
    pub fn validate(&self) -> Result<(), CommError> {
        if !(self.period.is_finite() && self.period > 0.0) {
            return Err(CommError::BadPeriod(self.period));
        }
        if !(self.t_star.is_finite() && self.t_star + TIME_EPS >= self.period) {
            return Err(CommError::BlackoutBelowPeriod {
                t_star: self.t_star,
                period: self.period,
            });
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(CommError::BadDropProb(self.drop_prob));
        }
        if !(self.delay_max.is_finite() && self.delay_max >= 0.0 && self.delay_max < self.t_star) {
            return Err(CommError::BadDelayMax {
                delay_max: self.delay_max,
                t_star: self.t_star,
            });
        }
        Ok(())
    }
}

/// Directed edge `from -> to`: `to` receives what `from` sends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

impl Edge {
    pub fn new(from: usize, to: usize) -> Self {
        Self { from, to }
    }

    fn stream_id(self) -> u64 {
        ((self.from as u64) << 32) | self.to as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkEvent {
    pub seq: u64,
    pub send_time: f64,
    /// `None` marks a lost transmission.
    pub delay: Option<f64>,
}

impl LinkEvent {
    pub fn arrival(&self) -> Option<f64> {
        self.delay.map(|d| self.send_time + d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkSchedule {
    pub edge: Edge,
    /// Ordered by strictly increasing `seq`.
    pub events: Vec<LinkEvent>,
    /// End of the time window the schedule is meant to cover.
    pub horizon: f64,
}

impl LinkSchedule {
    /// Schedule from explicit `(send_time, delay)` pairs with consecutive
    /// sequence numbers; the horizon is the last send time.
    pub fn from_sends(edge: Edge, sends: &[(f64, Option<f64>)]) -> Self {
        let events: Vec<LinkEvent> = sends
            .iter()
            .enumerate()
            .map(|(k, &(send_time, delay))| LinkEvent {
                seq: k as u64,
                send_time,
                delay,
            })
            .collect();
        let horizon = events.last().map_or(0.0, |e| e.send_time);
        Self { edge, events, horizon }
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn delivered(&self) -> impl Iterator<Item = &LinkEvent> {
        self.events.iter().filter(|e| e.delay.is_some())
    }
}

fn floor_to_quantum(x: f64, quantum: f64) -> f64 {
    if quantum > 0.0 {
        (x / quantum + TIME_EPS).floor() * quantum
    } else {
        x
    }
}

fn round_to_quantum(x: f64, quantum: f64) -> f64 {
    if quantum > 0.0 {
        (x / quantum).round() * quantum
    } else {
        x
    }
}

/// Next element of the blackout-bound chain after `anchor` (the send time of
/// the current chain element, or `None` before the first one). Among the
/// delivered events that qualify, the one with the latest send time is
/// chosen: the chain state is just the anchor and a later anchor relaxes every
/// future constraint, so this greedy choice never loses a feasible chain.
fn next_chain_element(events: &[LinkEvent], anchor: Option<f64>, t_star: f64) -> Option<usize> {
    let bound = anchor.unwrap_or(0.0) + t_star;
    let mut best = None;
    for (idx, e) in events.iter().enumerate() {
        if let Some(a) = anchor {
            if e.send_time <= a + TIME_EPS {
                continue;
            }
        }
        if e.send_time > bound + TIME_EPS {
            break;
        }
        if let Some(arrival) = e.arrival() {
            if arrival <= bound + TIME_EPS {
                best = Some(idx);
            }
        }
    }
    best
}

/// Draws a schedule on the grid `k T <= t_end`: each transmission is lost with
/// probability `drop_prob`, otherwise delayed uniformly in `[0, delay_max]`
/// and rounded to `quantum`. A repair pass then forces deliveries wherever a
/// blackout would exceed `T*`. The stream is keyed by `(seed, from, to)`.
pub fn generate_schedule(edge: Edge, cfg: &CommConfig, t_end: f64, quantum: f64) -> Result<LinkSchedule, CommError> {
    cfg.validate()?;
    if !(quantum.is_finite() && quantum >= 0.0) {
        return Err(CommError::BadQuantum(quantum));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(edge.stream_id());

    let drop_prob = cfg.drop_prob.min(MAX_DROP_PROB);
    let delay_cap = floor_to_quantum(cfg.delay_max, quantum);
    let count = (t_end / cfg.period + TIME_EPS).floor().max(0.0) as u64 + 1;
    let mut events = Vec::with_capacity(count as usize);
    for k in 0..count {
        let lost = rng.random::<f64>() < drop_prob;
        let raw = rng.random::<f64>() * cfg.delay_max;
        let delay = round_to_quantum(raw, quantum).min(delay_cap);
        events.push(LinkEvent {
            seq: k,
            send_time: k as f64 * cfg.period,
            delay: if lost { None } else { Some(delay) },
        });
    }

    let mut anchor: Option<f64> = None;
    loop {
        if let Some(idx) = next_chain_element(&events, anchor, cfg.t_star) {
            anchor = Some(events[idx].send_time);
            continue;
        }
        let base = anchor.unwrap_or(0.0);
        if anchor.is_some() && base + cfg.t_star + TIME_EPS >= t_end {
            break;
        }
        let bound = base + cfg.t_star;
        let candidates: Vec<usize> = events
            .iter()
            .enumerate()
            .filter(|(_, e)| anchor.is_none_or(|a| e.send_time > a + TIME_EPS))
            .filter(|(_, e)| e.send_time <= bound + TIME_EPS)
            .map(|(idx, _)| idx)
            .collect();
        let Some(&first) = candidates.first() else {
            break;
        };
        // latest transmission that still lands in time at the maximum delay,
        // otherwise the earliest one with whatever delay still fits
        match candidates
            .iter()
            .rev()
            .find(|&&idx| events[idx].send_time + delay_cap <= bound + TIME_EPS)
        {
            Some(&idx) => events[idx].delay = Some(delay_cap),
            None => {
                let slack = floor_to_quantum(bound - events[first].send_time, quantum).max(0.0);
                events[first].delay = Some(slack);
            }
        }
    }

    Ok(LinkSchedule {
        edge,
        events,
        horizon: t_end,
    })
}

/// True iff a delivered subsequence exists whose consecutive
/// arrival-to-previous-send gaps are all at most `t_star`, starting within
/// `t_star` of time zero and reaching to within `t_star` of the horizon.
pub fn verify_blackout_bound(sched: &LinkSchedule, t_star: f64) -> bool {
    let mut anchor = None;
    while let Some(idx) = next_chain_element(&sched.events, anchor, t_star) {
        anchor = Some(sched.events[idx].send_time);
    }
    match anchor {
        Some(last) => last + t_star + TIME_EPS >= sched.horizon,
        None => false,
    }
}

/// The delivered event with the largest sequence number among arrivals at or
/// before `t`.
pub fn latest_delivered(sched: &LinkSchedule, t: f64) -> Option<&LinkEvent> {
    sched
        .events
        .iter()
        .filter(|e| e.arrival().is_some_and(|a| a <= t + TIME_EPS))
        .max_by_key(|e| e.seq)
}

/// A delivered transmission: the sender's state captured at `send_time`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Message {
    pub seq: u64,
    pub send_time: f64,
    pub payload: Vec<f64>,
}

/// Latest delivered message on one in-edge.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mailbox {
    latest: Option<Message>,
}

impl Mailbox {
    pub fn latest(&self) -> Option<&Message> {
        self.latest.as_ref()
    }

    pub fn latest_seq(&self) -> Option<u64> {
        self.latest.as_ref().map(|m| m.seq)
    }

    /// Keeps the message iff its sequence number beats the stored one.
    pub fn offer(&mut self, msg: Message) -> bool {
        if self.latest.as_ref().is_some_and(|cur| cur.seq >= msg.seq) {
            return false;
        }
        self.latest = Some(msg);
        true
    }
}

/// One applied (or rejected as stale) arrival.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Delivery {
    pub edge: Edge,
    pub seq: u64,
    pub send_time: f64,
    pub arrival_time: f64,
    pub accepted: bool,
}

/// Mailboxes for a fixed list of edges, indexed like that list.
#[derive(Debug, Clone, PartialEq)]
pub struct Mailboxes {
    edges: Vec<Edge>,
    boxes: Vec<Mailbox>,
}

impl Mailboxes {
    pub fn new(edges: Vec<Edge>) -> Self {
        let boxes = vec![Mailbox::default(); edges.len()];
        Self { edges, boxes }
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn index_of(&self, edge: Edge) -> Option<usize> {
        self.edges.iter().position(|&e| e == edge)
    }

    pub fn get(&self, idx: usize) -> &Mailbox {
        &self.boxes[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Mailbox {
        &mut self.boxes[idx]
    }

    pub fn latest_message(&self, edge: Edge) -> Option<&Message> {
        self.index_of(edge).and_then(|idx| self.boxes[idx].latest())
    }

    pub fn latest_seqs(&self) -> Vec<Option<u64>> {
        self.boxes.iter().map(Mailbox::latest_seq).collect()
    }
}

/// Applies every scheduled arrival in `(from_t, to_t]`, in arrival order,
/// fetching payloads from `payload_source(agent, seq, send_time)`.
pub fn advance_mailboxes<F>(
    mailboxes: &mut Mailboxes,
    schedules: &[LinkSchedule],
    from_t: f64,
    to_t: f64,
    mut payload_source: F,
) -> Result<Vec<Delivery>, CommError>
where
    F: FnMut(usize, u64, f64) -> Option<Vec<f64>>,
{
    if to_t < from_t {
        return Err(CommError::BackwardsInterval { from: from_t, to: to_t });
    }
    let mut pending: Vec<(f64, usize, LinkEvent)> = Vec::new();
    for sched in schedules {
        let Some(idx) = mailboxes.index_of(sched.edge) else {
            continue;
        };
        for e in &sched.events {
            if let Some(arrival) = e.arrival() {
                if arrival > from_t + TIME_EPS && arrival <= to_t + TIME_EPS {
                    pending.push((arrival, idx, *e));
                }
            }
        }
    }
    pending.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.seq.cmp(&b.2.seq)));

    let mut log = Vec::with_capacity(pending.len());
    for (arrival, idx, e) in pending {
        let edge = mailboxes.edges[idx];
        let payload = payload_source(edge.from, e.seq, e.send_time).ok_or(CommError::MissingPayload {
            agent: edge.from,
            seq: e.seq,
        })?;
        let accepted = mailboxes.boxes[idx].offer(Message {
            seq: e.seq,
            send_time: e.send_time,
            payload,
        });
        log.push(Delivery {
            edge,
            seq: e.seq,
            send_time: e.send_time,
            arrival_time: arrival,
            accepted,
        });
    }
    Ok(log)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "inf".to_string(), |v| format!("{v}"))
}

/// CSV audit of schedules with 1-based agent ids; lost events carry `inf`.
pub fn schedules_to_csv(schedules: &[LinkSchedule]) -> String {
    let mut out = String::from("edge,seq,send_time,delay,arrival_time\n");
    for s in schedules {
        for e in &s.events {
            let _ = writeln!(
                out,
                "{}->{},{},{},{},{}",
                s.edge.from + 1,
                s.edge.to + 1,
                e.seq,
                e.send_time,
                fmt_opt(e.delay),
                fmt_opt(e.arrival())
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(period: f64, t_star: f64, drop_prob: f64, delay_max: f64) -> CommConfig {
        CommConfig {
            period,
            t_star,
            drop_prob,
            delay_max,
            seed: 7,
        }
    }

    #[test]
    fn lossless_zero_delay_schedule_is_the_grid() {
        let s = generate_schedule(Edge::new(1, 0), &cfg(1.0, 1.5, 0.0, 0.0), 5.0, 0.0).unwrap();
        assert_eq!(s.events.len(), 6);
        for (k, e) in s.events.iter().enumerate() {
            assert_eq!(e.seq, k as u64);
            assert_eq!(e.send_time, k as f64);
            assert_eq!(e.delay, Some(0.0));
        }
    }

    #[test]
    fn total_loss_is_repaired_in_every_window() {
        let c = cfg(0.5, 1.5, 1.0, 0.0);
        let s = generate_schedule(Edge::new(3, 1), &c, 20.0, 0.0).unwrap();
        assert!(verify_blackout_bound(&s, 1.5));
        // window-scan oracle: every window [a, a + 1.5] within the horizon
        // holds at least one arrival
        let arrivals: Vec<f64> = s.delivered().filter_map(LinkEvent::arrival).collect();
        let mut a = 0.0;
        while a + 1.5 <= 20.0 {
            assert!(
                arrivals.iter().any(|&t| t >= a - TIME_EPS && t <= a + 1.5 + TIME_EPS),
                "no arrival in [{a}, {}]",
                a + 1.5
            );
            a += 0.05;
        }
    }

    #[test]
    fn blackout_examples() {
        let e = Edge::new(1, 0);
        let s = LinkSchedule::from_sends(e, &[(0.0, Some(0.0)), (1.0, Some(0.0)), (2.0, Some(0.0))]);
        assert!(verify_blackout_bound(&s, 1.5));

        let s = LinkSchedule::from_sends(e, &[(0.0, None)]).with_horizon(10.0);
        assert!(!verify_blackout_bound(&s, 1.5));

        let s = LinkSchedule::from_sends(e, &[(0.0, Some(0.2)), (0.5, None), (1.0, Some(0.3))]);
        assert!(verify_blackout_bound(&s, 1.4));
        // a chain through send 1.0 needs its arrival (1.3) within T* of send 0
        assert!(!verify_blackout_bound(&s.clone().with_horizon(5.0), 1.4));
    }

    #[test]
    fn latest_message_examples() {
        let e = Edge::new(1, 0);
        let s = LinkSchedule::from_sends(e, &[(0.0, Some(0.2)), (0.5, None), (1.0, Some(0.3))]);
        assert_eq!(latest_delivered(&s, 1.4).map(|e| e.seq), Some(2));
        assert_eq!(latest_delivered(&s, 0.9).map(|e| e.seq), Some(0));
        assert_eq!(latest_delivered(&s, 0.1), None);

        // out of order: k=1 arrives at 2.0, k=2 at 1.6
        let s = LinkSchedule::from_sends(e, &[(0.0, None), (0.5, Some(1.5)), (1.0, Some(0.6))]);
        assert_eq!(latest_delivered(&s, 1.8).map(|e| e.seq), Some(2));
        assert_eq!(latest_delivered(&s, 2.1).map(|e| e.seq), Some(2));
    }

    fn payload(agent: usize, seq: u64, _send: f64) -> Option<Vec<f64>> {
        Some(vec![agent as f64, seq as f64])
    }

    #[test]
    fn advance_applies_interval_and_keeps_max_seq() {
        let e = Edge::new(1, 0);
        let s = LinkSchedule::from_sends(
            e,
            &[
                (0.0, None),
                (0.5, None),
                (1.0, None),
                (1.5, Some(0.5)),
                (2.0, Some(1.5)),
                (2.5, Some(0.2)),
            ],
        );
        let mut mb = Mailboxes::new(vec![e]);
        let log = advance_mailboxes(&mut mb, std::slice::from_ref(&s), 1.0, 1.0, payload).unwrap();
        assert!(log.is_empty());
        assert_eq!(mb.get(0).latest_seq(), None);

        // seq 3 arrives at 2.0, seq 5 at 2.7, seq 4 at 3.5
        advance_mailboxes(&mut mb, std::slice::from_ref(&s), 1.0, 3.0, payload).unwrap();
        assert_eq!(mb.get(0).latest_seq(), Some(5));
        let log = advance_mailboxes(&mut mb, std::slice::from_ref(&s), 3.0, 4.0, payload).unwrap();
        assert_eq!(log.len(), 1);
        assert!(!log[0].accepted);
        assert_eq!(mb.latest_message(e).unwrap().seq, 5);
        assert_eq!(mb.latest_message(e).unwrap().payload, vec![1.0, 5.0]);
    }

    #[test]
    fn missing_payload_is_reported() {
        let e = Edge::new(2, 0);
        let s = LinkSchedule::from_sends(e, &[(0.0, Some(0.0))]);
        let mut mb = Mailboxes::new(vec![e]);
        let err = advance_mailboxes(&mut mb, &[s], -1.0, 0.0, |_, _, _| None).unwrap_err();
        assert_eq!(err, CommError::MissingPayload { agent: 2, seq: 0 });
    }

    #[test]
    fn config_invariants() {
        assert!(cfg(0.1, 1.5, 0.2, 1.0).validate().is_ok());
        assert!(matches!(
            cfg(1.0, 0.5, 0.0, 0.0).validate(),
            Err(CommError::BlackoutBelowPeriod { .. })
        ));
        assert!(matches!(cfg(0.1, 1.0, 0.0, 1.0).validate(), Err(CommError::BadDelayMax { .. })));
        assert!(matches!(cfg(0.1, 1.0, 1.5, 0.0).validate(), Err(CommError::BadDropProb(_))));
        assert!(matches!(cfg(0.0, 1.0, 0.0, 0.0).validate(), Err(CommError::BadPeriod(_))));
    }

    #[test]
    fn delays_are_quantized_and_bounded() {
        let c = cfg(0.1, 1.5, 0.2, 1.0);
        let s = generate_schedule(Edge::new(8, 2), &c, 30.0, 0.01).unwrap();
        for e in &s.events {
            if let Some(d) = e.delay {
                assert!(d <= 1.0 + TIME_EPS);
                assert!(((d / 0.01) - (d / 0.01).round()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn csv_export_marks_losses() {
        let s = LinkSchedule::from_sends(Edge::new(6, 0), &[(0.0, Some(0.25)), (0.5, None)]);
        let csv = schedules_to_csv(&[s]);
        assert_eq!(
            csv,
            "edge,seq,send_time,delay,arrival_time\n7->1,0,0,0.25,0.25\n7->1,1,0.5,inf,inf\n"
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn schedules_respect_blackout_and_quantum(
                seed in any::<u64>(),
                t_star_periods in 1.0f64..15.0,
                drop_prob in 0.0f64..=1.0,
                delay_frac in 0.0f64..0.95,
            ) {
                let period = 0.1;
                let t_star = period * t_star_periods;
                let c = CommConfig { period, t_star, drop_prob, delay_max: delay_frac * t_star, seed };
                let s = generate_schedule(Edge::new(2, 0), &c, 20.0, 0.01).unwrap();
                prop_assert!(verify_blackout_bound(&s, t_star));
                for (k, e) in s.events.iter().enumerate() {
                    prop_assert_eq!(e.seq, k as u64);
                    if let Some(d) = e.delay {
                        prop_assert!(d <= c.delay_max + TIME_EPS);
                        prop_assert!(((d / 0.01) - (d / 0.01).round()).abs() < 1e-6);
                    }
                }
            }

            #[test]
            fn mailbox_keeps_the_largest_sequence(seqs in proptest::collection::vec(0u64..50, 1..40)) {
                let mut mb = Mailbox::default();
                for &seq in &seqs {
                    mb.offer(Message { seq, send_time: seq as f64, payload: vec![seq as f64] });
                }
                prop_assert_eq!(mb.latest_seq(), seqs.iter().copied().max());
                prop_assert_eq!(mb.latest().unwrap().payload[0], *seqs.iter().max().unwrap() as f64);
            }
        }
    }
}

//! Two-robot map merging. Each robot runs an agent that exchanges keyframe
//! summaries, point clouds and verified loops with its peer over a message
//! channel, then builds, filters and optimizes the joint graph locally.

use crate::eval::CategoryCounts;
use crate::frontend::KeyFrame;
use crate::geom::{Mat6, PointCloud, Pose3, Vec6};
use crate::graphcore::{optimize, Edge, EdgeCategory, GraphError, NodeKey, OptimizeConfig, PoseGraph};
use crate::placerec::{match_keyframes, LoopCandidate, MatchConfig, PlaceError, ScanContext};
use crate::registration::{register_prepared, FeatureCloud, RegistrationConfig, RegistrationResult};
use crate::robustsel::{pcm_filter, OdometryChain, RobustError, DEFAULT_GAMMA};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("robot {0} has no keyframes")]
    NoKeyframes(u32),
    #[error("channel closed with robot {0} still waiting for its peer")]
    ChannelClosed(u32),
    #[error("transcript does not describe a session of robots {0} and {1}")]
    BadTranscript(u32, u32),
    #[error(transparent)]
    Place(#[from] PlaceError),
    #[error(transparent)]
    Robust(#[from] RobustError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn diag6(v: [f64; 6]) -> Mat6 {
    Mat6::from_diagonal(&Vec6::from_row_slice(&v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeConfig {
    pub use_filter: bool,
    pub use_pcm: bool,
    /// Both agents match and verify, instead of only the lower robot id.
    pub symmetric: bool,
    pub matching: MatchConfig,
    pub registration: RegistrationConfig,
    pub gamma: f64,
    pub optimize: OptimizeConfig,
    /// Information of a one-keyframe odometry step, g2o order, diagonal.
    pub odometry_information: [f64; 6],
    /// Information of a loop at fitness 1, scaled by the fitness.
    pub loop_information: [f64; 6],
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            use_filter: false,
            use_pcm: true,
            symmetric: false,
            matching: MatchConfig::default(),
            registration: RegistrationConfig::default(),
            gamma: DEFAULT_GAMMA,
            optimize: OptimizeConfig::default(),
            odometry_information: [2500.0, 2500.0, 2500.0, 40000.0, 40000.0, 40000.0],
            loop_information: [100.0, 100.0, 100.0, 400.0, 400.0, 400.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    DescriptorBatch,
    CloudRequest,
    CloudResponse,
    LoopAnnounce,
}

/// Keyframe summary sent to the peer: enough to match against it and to
/// rebuild its odometry chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorEntry {
    pub index: u32,
    pub stamp: f64,
    pub pose: Pose3,
    pub informative: bool,
    pub descriptor: ScanContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    DescriptorBatch { entries: Vec<DescriptorEntry> },
    CloudRequest { indices: Vec<u32> },
    CloudResponse { clouds: Vec<(u32, PointCloud)> },
    /// Verified loops, always oriented from the lower robot id.
    LoopAnnounce { loops: Vec<Edge> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeMessage {
    pub sender: u32,
    pub receiver: u32,
    /// Counts messages per (sender, kind), from zero.
    pub sequence: u64,
    pub payload: Payload,
}

impl MergeMessage {
    pub fn kind(&self) -> MessageKind {
        match self.payload {
            Payload::DescriptorBatch { .. } => MessageKind::DescriptorBatch,
            Payload::CloudRequest { .. } => MessageKind::CloudRequest,
            Payload::CloudResponse { .. } => MessageKind::CloudResponse,
            Payload::LoopAnnounce { .. } => MessageKind::LoopAnnounce,
        }
    }
}

/// Fault injection for the in-process channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryPolicy {
    #[default]
    Reliable,
    /// Silently drops every n-th message.
    DropEvery(usize),
}

/// In-process message queue: per-receiver FIFO, which preserves each
/// sender's order. Every delivered message is appended to the transcript.
#[derive(Debug, Default)]
pub struct Channel {
    queues: BTreeMap<u32, VecDeque<MergeMessage>>,
    policy: DeliveryPolicy,
    sent: usize,
    transcript: Vec<MergeMessage>,
}

impl Channel {
    pub fn new(policy: DeliveryPolicy) -> Self {
        Self { policy, ..Self::default() }
    }

    pub fn send(&mut self, msg: MergeMessage) {
        self.sent += 1;
        if let DeliveryPolicy::DropEvery(n) = self.policy {
            if n > 0 && self.sent % n == 0 {
                return;
            }
        }
        self.transcript.push(msg.clone());
        self.queues.entry(msg.receiver).or_default().push_back(msg);
    }

    pub fn recv(&mut self, robot: u32) -> Option<MergeMessage> {
        self.queues.get_mut(&robot)?.pop_front()
    }

    pub fn transcript(&self) -> &[MergeMessage] {
        &self.transcript
    }

    pub fn into_transcript(self) -> Vec<MergeMessage> {
        self.transcript
    }
}

/// Shared registration cache. Results depend only on the two clouds and the
/// config, so sessions over the same robot pair can reuse them.
pub struct Verifier {
    cfg: RegistrationConfig,
    features: Mutex<HashMap<NodeKey, Arc<Option<FeatureCloud>>>>,
    results: Mutex<HashMap<(NodeKey, NodeKey), Option<RegistrationResult>>>,
}

impl Verifier {
    pub fn new(cfg: RegistrationConfig) -> Self {
        Self { cfg, features: Mutex::new(HashMap::new()), results: Mutex::new(HashMap::new()) }
    }

    pub fn config(&self) -> &RegistrationConfig {
        &self.cfg
    }

    fn features(&self, key: NodeKey, cloud: &PointCloud) -> Arc<Option<FeatureCloud>> {
        if let Some(f) = self.features.lock().unwrap().get(&key) {
            return f.clone();
        }
        let f = Arc::new(FeatureCloud::prepare(cloud, &self.cfg).ok());
        self.features.lock().unwrap().entry(key).or_insert(f).clone()
    }

    /// Registers B's cloud onto A's: the result maps B coordinates into A's
    /// keyframe frame. `None` when registration cannot run at all.
    pub fn verify(&self, a: NodeKey, cloud_a: &PointCloud, b: NodeKey, cloud_b: &PointCloud) -> Option<RegistrationResult> {
        if let Some(r) = self.results.lock().unwrap().get(&(a, b)) {
            return *r;
        }
        let fa = self.features(a, cloud_a);
        let fb = self.features(b, cloud_b);
        let r = match (fa.as_ref(), fb.as_ref()) {
            (Some(fa), Some(fb)) => register_prepared(fb, fa, &self.cfg).ok().map(|t| t.result),
            _ => None,
        };
        self.results.lock().unwrap().insert((a, b), r);
        r
    }
}

/// One robot's side of a session.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub robot: u32,
    pub peer: u32,
    pub keyframes: Vec<KeyFrame>,
    pub local_graph: PoseGraph,
    pub peer_descriptors: Vec<DescriptorEntry>,
    pub pending_verifications: VecDeque<LoopCandidate>,
    leader: bool,
    candidates: Vec<LoopCandidate>,
    own_loops: Vec<Edge>,
    peer_loops: Vec<Edge>,
    verification_failures: usize,
    sequence: BTreeMap<MessageKind, u64>,
    sent_announce: bool,
    got_announce: bool,
}

/// Keyframes kept in the graph: all, or only informative ones.
fn graph_keyframes(kfs: &[KeyFrame], use_filter: bool) -> impl Iterator<Item = &KeyFrame> {
    kfs.iter().filter(move |k| !use_filter || k.informative)
}

/// Odometry graph over `(index, pose)` entries of one robot. An edge
/// skipping `g` keyframes carries `1 / g` of the one-step information.
fn chain_graph(robot: u32, entries: &[(u32, Pose3)], step_info: &Mat6) -> Result<PoseGraph, GraphError> {
    let mut g = PoseGraph::new();
    for (i, &(idx, pose)) in entries.iter().enumerate() {
        g.add_node(NodeKey::new(robot, idx), pose)?;
        if i > 0 {
            let (pidx, ppose) = entries[i - 1];
            let gap = f64::from(idx - pidx);
            g.add_edge(Edge::odometry(NodeKey::new(robot, pidx), NodeKey::new(robot, idx), ppose.between(&pose), step_info / gap))?;
        }
    }
    Ok(g)
}

impl AgentState {
    pub fn new(robot: u32, peer: u32, keyframes: Vec<KeyFrame>, cfg: &MergeConfig) -> Result<Self, MergeError> {
        if keyframes.is_empty() {
            return Err(MergeError::NoKeyframes(robot));
        }
        let entries: Vec<(u32, Pose3)> = graph_keyframes(&keyframes, cfg.use_filter).map(|k| (k.index, k.pose)).collect();
        let local_graph = chain_graph(robot, &entries, &diag6(cfg.odometry_information))?;
        Ok(Self {
            robot,
            peer,
            keyframes,
            local_graph,
            peer_descriptors: Vec::new(),
            pending_verifications: VecDeque::new(),
            leader: cfg.symmetric || robot < peer,
            candidates: Vec::new(),
            own_loops: Vec::new(),
            peer_loops: Vec::new(),
            verification_failures: 0,
            sequence: BTreeMap::new(),
            sent_announce: false,
            got_announce: false,
        })
    }

    fn message(&mut self, payload: Payload) -> MergeMessage {
        let mut m = MergeMessage { sender: self.robot, receiver: self.peer, sequence: 0, payload };
        let seq = self.sequence.entry(m.kind()).or_insert(0);
        m.sequence = *seq;
        *seq += 1;
        m
    }

    fn keyframe(&self, index: u32) -> Option<&KeyFrame> {
        self.keyframes.iter().find(|k| k.index == index)
    }

    /// Opening message: this robot's keyframe summaries.
    pub fn start(&mut self) -> Result<Vec<MergeMessage>, MergeError> {
        let entries = self
            .keyframes
            .iter()
            .map(|k| {
                let descriptor = k.descriptor.clone().ok_or(PlaceError::MissingDescriptor { robot: k.robot, index: k.index })?;
                Ok(DescriptorEntry { index: k.index, stamp: k.stamp, pose: k.pose, informative: k.informative, descriptor })
            })
            .collect::<Result<Vec<_>, PlaceError>>()?;
        Ok(vec![self.message(Payload::DescriptorBatch { entries })])
    }

    pub fn finished(&self) -> bool {
        self.sent_announce && self.got_announce
    }

    /// Processes one incoming message and returns the replies.
    pub fn handle(&mut self, msg: MergeMessage, cfg: &MergeConfig, verifier: &Verifier) -> Result<Vec<MergeMessage>, MergeError> {
        match msg.payload {
            Payload::DescriptorBatch { entries } => {
                self.peer_descriptors = entries;
                if !self.leader {
                    self.sent_announce = true;
                    return Ok(vec![self.message(Payload::LoopAnnounce { loops: Vec::new() })]);
                }
                let peer_kfs: Vec<KeyFrame> = self
                    .peer_descriptors
                    .iter()
                    .map(|d| KeyFrame {
                        robot: self.peer,
                        index: d.index,
                        stamp: d.stamp,
                        pose: d.pose,
                        cloud: PointCloud::empty(),
                        informative: d.informative,
                        descriptor: Some(d.descriptor.clone()),
                    })
                    .collect();
                let mcfg = MatchConfig { use_filter: cfg.use_filter, ..cfg.matching.clone() };
                self.candidates = match_keyframes(&self.keyframes, &peer_kfs, &mcfg)?;
                self.pending_verifications = self.candidates.iter().cloned().collect();
                if self.candidates.is_empty() {
                    self.sent_announce = true;
                    return Ok(vec![self.message(Payload::LoopAnnounce { loops: Vec::new() })]);
                }
                let indices: BTreeSet<u32> = self.candidates.iter().map(|c| c.kf_b.index).collect();
                Ok(vec![self.message(Payload::CloudRequest { indices: indices.into_iter().collect() })])
            }
            Payload::CloudRequest { indices } => {
                let clouds = indices.iter().filter_map(|&i| self.keyframe(i).map(|k| (i, k.cloud.clone()))).collect();
                Ok(vec![self.message(Payload::CloudResponse { clouds })])
            }
            Payload::CloudResponse { clouds } => {
                let peer_clouds: BTreeMap<u32, PointCloud> = clouds.into_iter().collect();
                let jobs: Vec<LoopCandidate> = self.pending_verifications.drain(..).collect();
                let loop_info = diag6(cfg.loop_information);
                let me = &*self;
                let results: Vec<Option<Edge>> = jobs
                    .par_iter()
                    .map(|c| {
                        let own = me.keyframe(c.kf_a.index)?;
                        let peer = peer_clouds.get(&c.kf_b.index)?;
                        // canonical direction: lower robot id first
                        let (ka, ca, kb, cb) = if me.robot < me.peer {
                            (c.kf_a, &own.cloud, c.kf_b, peer)
                        } else {
                            (c.kf_b, peer, c.kf_a, &own.cloud)
                        };
                        let r = verifier.verify(ka, ca, kb, cb)?;
                        r.converged.then(|| Edge::inter_robot(ka, kb, r.pose, loop_info * r.fitness))
                    })
                    .collect();
                self.verification_failures = results.iter().filter(|r| r.is_none()).count();
                self.own_loops = results.into_iter().flatten().collect();
                self.sent_announce = true;
                let loops = self.own_loops.clone();
                Ok(vec![self.message(Payload::LoopAnnounce { loops })])
            }
            Payload::LoopAnnounce { loops } => {
                self.peer_loops = loops;
                self.got_announce = true;
                Ok(Vec::new())
            }
        }
    }

    /// Own and announced loops, deduplicated and sorted by endpoints.
    pub fn loop_set(&self) -> Vec<Edge> {
        let mut by_key: BTreeMap<(NodeKey, NodeKey), Edge> = BTreeMap::new();
        for e in self.own_loops.iter().chain(&self.peer_loops) {
            by_key.entry((e.from, e.to)).or_insert_with(|| e.clone());
        }
        by_key.into_values().collect()
    }

    fn peer_chain(&self, cfg: &MergeConfig) -> Result<PoseGraph, GraphError> {
        let entries: Vec<(u32, Pose3)> =
            self.peer_descriptors.iter().filter(|d| !cfg.use_filter || d.informative).map(|d| (d.index, d.pose)).collect();
        chain_graph(self.peer, &entries, &diag6(cfg.odometry_information))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub from: NodeKey,
    pub to: NodeKey,
    pub category: EdgeCategory,
    pub information_scale: f64,
    pub kept_by_pcm: bool,
    pub gnc_weight: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub candidates: usize,
    pub verified: usize,
    pub verification_failures: usize,
    pub post_pcm: usize,
}

/// Session report. Timing is left out so reports stay byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub robot_a: u32,
    pub robot_b: u32,
    pub use_filter: bool,
    pub use_pcm: bool,
    pub keyframes: [usize; 2],
    pub informative_keyframes: [usize; 2],
    pub stages: StageCounts,
    pub no_loops: bool,
    pub categories_pre_pcm: CategoryCounts,
    pub categories_post_pcm: CategoryCounts,
    pub loops: Vec<LoopRecord>,
    pub gnc_outer_steps: usize,
    pub final_chi2: Option<f64>,
    /// Optimized pose of B's first node in the frame of A's first node,
    /// as `[x, y, z, qw, qx, qy, qz]`.
    pub relative_pose: Option<[f64; 7]>,
    pub messages: BTreeMap<MessageKind, usize>,
    pub payload_bytes: BTreeMap<MessageKind, usize>,
}

/// Graphs at the three recorded stages plus the report.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub initial: PoseGraph,
    pub post_pcm: PoseGraph,
    pub optimized: PoseGraph,
    pub report: MergeReport,
}

impl MergeOutcome {
    /// The final graph of the session.
    pub fn graph(&self) -> &PoseGraph {
        &self.optimized
    }
}

pub type Labeler<'a> = &'a (dyn Fn(&Edge) -> EdgeCategory + Sync);

/// Joint graph of two chains and a loop set, with B's chain moved into A's
/// frame through the highest-fitness loop (earliest on ties).
fn joint_graph(a: &PoseGraph, b: &PoseGraph, loops: &[Edge]) -> Result<PoseGraph, GraphError> {
    let mut g = a.clone();
    let mut best: Option<&Edge> = None;
    for e in loops {
        if best.is_none_or(|b| e.information[(0, 0)] > b.information[(0, 0)]) {
            best = Some(e);
        }
    }
    let shift = match best {
        Some(e) => a.nodes()[&e.from].compose(&e.measurement).compose(&b.nodes()[&e.to].inverse()),
        None => Pose3::identity(),
    };
    for (k, p) in b.nodes() {
        g.add_node(*k, shift.compose(p))?;
    }
    for e in b.edges() {
        g.add_edge(e.clone())?;
    }
    for e in loops {
        g.add_edge(e.clone())?;
    }
    Ok(g)
}

fn first_node(g: &PoseGraph, robot: u32) -> Option<(NodeKey, Pose3)> {
    g.nodes().range(NodeKey::new(robot, 0)..=NodeKey::new(robot, u32::MAX)).next().map(|(k, p)| (*k, *p))
}

/// Builds, filters and optimizes the joint graph from an agent's view.
pub fn finalize(agent: &AgentState, cfg: &MergeConfig, labeler: Option<Labeler>) -> Result<MergeOutcome, MergeError> {
    let own = agent.local_graph.clone();
    let peer = agent.peer_chain(cfg)?;
    let (ga, gb) = if agent.robot < agent.peer { (own, peer) } else { (peer, own) };
    let (ra, rb) = (agent.robot.min(agent.peer), agent.robot.max(agent.peer));
    let mut loops = agent.loop_set();
    for e in &mut loops {
        e.category = labeler.map(|l| l(e)).unwrap_or(EdgeCategory::Unknown);
    }
    let initial = joint_graph(&ga, &gb, &loops)?;
    let kept = if cfg.use_pcm && !loops.is_empty() {
        let chain_a = OdometryChain::from_graph(&ga, ra)?;
        let chain_b = OdometryChain::from_graph(&gb, rb)?;
        pcm_filter(&loops, &chain_a, &chain_b, cfg.gamma)?
    } else {
        loops.clone()
    };
    let post_pcm = joint_graph(&ga, &gb, &kept)?;
    let (optimized, result) = if kept.is_empty() {
        (post_pcm.clone(), None)
    } else {
        let r = optimize(&post_pcm, &cfg.optimize)?;
        (r.apply_to(&post_pcm), Some(r))
    };
    let kept_keys: BTreeSet<(NodeKey, NodeKey)> = kept.iter().map(|e| (e.from, e.to)).collect();
    let weights: BTreeMap<(NodeKey, NodeKey), f64> = optimized.inter_robot_edges().map(|e| ((e.from, e.to), e.gnc_weight)).collect();
    let fitness_scale = cfg.loop_information[0];
    let records = loops
        .iter()
        .map(|e| LoopRecord {
            from: e.from,
            to: e.to,
            category: e.category,
            information_scale: e.information[(0, 0)] / fitness_scale,
            kept_by_pcm: kept_keys.contains(&(e.from, e.to)),
            gnc_weight: result.as_ref().and_then(|_| weights.get(&(e.from, e.to)).copied()),
        })
        .collect();
    let relative_pose = match (result.is_some(), first_node(&optimized, ra), first_node(&optimized, rb)) {
        (true, Some((_, pa)), Some((_, pb))) => {
            let rel = pa.between(&pb);
            let t = rel.translation();
            let [w, x, y, z] = rel.wxyz();
            Some([t.x, t.y, t.z, w, x, y, z])
        }
        _ => None,
    };
    let count_informative = |kfs: &[KeyFrame]| kfs.iter().filter(|k| k.informative).count();
    let own_counts = (agent.keyframes.len(), count_informative(&agent.keyframes));
    let peer_counts = (agent.peer_descriptors.len(), agent.peer_descriptors.iter().filter(|d| d.informative).count());
    let (ca, cb) = if agent.robot < agent.peer { (own_counts, peer_counts) } else { (peer_counts, own_counts) };
    let report = MergeReport {
        robot_a: ra,
        robot_b: rb,
        use_filter: cfg.use_filter,
        use_pcm: cfg.use_pcm,
        keyframes: [ca.0, cb.0],
        informative_keyframes: [ca.1, cb.1],
        stages: StageCounts {
            candidates: agent.candidates.len(),
            verified: loops.len(),
            verification_failures: agent.verification_failures,
            post_pcm: kept.len(),
        },
        no_loops: loops.is_empty(),
        categories_pre_pcm: CategoryCounts::from_edges(&loops),
        categories_post_pcm: CategoryCounts::from_edges(&kept),
        loops: records,
        gnc_outer_steps: result.as_ref().map_or(0, |r| r.gnc_trace.len()),
        final_chi2: result.as_ref().map(|r| r.final_chi2),
        relative_pose,
        messages: BTreeMap::new(),
        payload_bytes: BTreeMap::new(),
    };
    Ok(MergeOutcome { initial, post_pcm, optimized, report })
}

/// Both agents of a session after the exchange has run to completion.
#[derive(Debug)]
pub struct Session {
    pub agent_a: AgentState,
    pub agent_b: AgentState,
    pub transcript: Vec<MergeMessage>,
}

/// Runs the message exchange with a deterministic interleaving: the lower
/// robot id drains its inbox first, then the other, until both are idle.
pub fn exchange(
    kfs_a: Vec<KeyFrame>,
    kfs_b: Vec<KeyFrame>,
    cfg: &MergeConfig,
    verifier: &Verifier,
    policy: DeliveryPolicy,
) -> Result<Session, MergeError> {
    let ra = kfs_a.first().map(|k| k.robot).ok_or(MergeError::NoKeyframes(0))?;
    let rb = kfs_b.first().map(|k| k.robot).ok_or(MergeError::NoKeyframes(1))?;
    let mut agents = [AgentState::new(ra, rb, kfs_a, cfg)?, AgentState::new(rb, ra, kfs_b, cfg)?];
    agents.sort_by_key(|a| a.robot);
    let mut ch = Channel::new(policy);
    for a in agents.iter_mut() {
        for m in a.start()? {
            ch.send(m);
        }
    }
    loop {
        let mut progressed = false;
        for a in agents.iter_mut() {
            while let Some(m) = ch.recv(a.robot) {
                progressed = true;
                for out in a.handle(m, cfg, verifier)? {
                    ch.send(out);
                }
            }
        }
        if !progressed {
            break;
        }
    }
    for a in &agents {
        if !a.finished() {
            return Err(MergeError::ChannelClosed(a.robot));
        }
    }
    let [agent_a, agent_b] = agents;
    Ok(Session { agent_a, agent_b, transcript: ch.into_transcript() })
}

fn message_stats(transcript: &[MergeMessage]) -> (BTreeMap<MessageKind, usize>, BTreeMap<MessageKind, usize>) {
    let mut count = BTreeMap::new();
    let mut bytes = BTreeMap::new();
    for m in transcript {
        *count.entry(m.kind()).or_insert(0) += 1;
        *bytes.entry(m.kind()).or_insert(0) += serde_json::to_vec(&m.payload).map(|v| v.len()).unwrap_or(0);
    }
    (count, bytes)
}

/// Full session: exchange, then the lower robot's agent builds the result.
pub fn run_merge_session(
    kfs_a: Vec<KeyFrame>,
    kfs_b: Vec<KeyFrame>,
    cfg: &MergeConfig,
    verifier: &Verifier,
    labeler: Option<Labeler>,
) -> Result<(MergeOutcome, Vec<MergeMessage>), MergeError> {
    let session = exchange(kfs_a, kfs_b, cfg, verifier, DeliveryPolicy::Reliable)?;
    let mut outcome = finalize(&session.agent_a, cfg, labeler)?;
    let (count, bytes) = message_stats(&session.transcript);
    outcome.report.messages = count;
    outcome.report.payload_bytes = bytes;
    Ok((outcome, session.transcript))
}

/// Re-runs one agent against the peer messages recorded in a transcript.
pub fn replay(
    transcript: &[MergeMessage],
    own: Vec<KeyFrame>,
    cfg: &MergeConfig,
    verifier: &Verifier,
    labeler: Option<Labeler>,
) -> Result<MergeOutcome, MergeError> {
    let robot = own.first().map(|k| k.robot).ok_or(MergeError::NoKeyframes(0))?;
    let peer = transcript.iter().find(|m| m.receiver == robot).map(|m| m.sender).ok_or(MergeError::BadTranscript(robot, robot))?;
    let mut agent = AgentState::new(robot, peer, own, cfg)?;
    agent.start()?;
    for m in transcript.iter().filter(|m| m.sender == peer && m.receiver == robot) {
        agent.handle(m.clone(), cfg, verifier)?;
    }
    if !agent.finished() {
        return Err(MergeError::BadTranscript(robot, peer));
    }
    let mut outcome = finalize(&agent, cfg, labeler)?;
    let (count, bytes) = message_stats(transcript);
    outcome.report.messages = count;
    outcome.report.payload_bytes = bytes;
    Ok(outcome)
}

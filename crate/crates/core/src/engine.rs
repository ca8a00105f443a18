//! The per-request speculation state machine.
//!
//! A request cycles through `k` sparse draft steps followed by one full
//! verification. Verification accepts the longest prefix of drafts that
//! matches the target's greedy choice, emits one bonus token, keeps the
//! full-attention KV entries of the accepted tokens, and selects the critical
//! set for the next stride from its own attention scores.
//!
//! The pending token (last committed) never has a KV entry in the committed
//! cache: it is the first query of the next draft or verification.

use serde::Serialize;

use crate::error::{config_err, contract_err, Error, Result};
use crate::numerics::{greedy_token, KvCache, Token, ToyModel};
use crate::pillar::{identify, CriticalTokenSet};

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: u64,
    pub prompt: Vec<Token>,
    pub max_output: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecParams {
    /// Draft steps per round; also the critical-set refresh stride.
    pub k: usize,
    pub sparsity: f64,
    /// Emitting this token ends the request.
    pub eos: Option<Token>,
}

impl SpecParams {
    pub fn new(k: usize, sparsity: f64) -> Self {
        Self { k, sparsity, eos: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(config_err("k must be at least 1"));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(config_err(format!("sparsity {} outside (0, 1]", self.sparsity)));
        }
        Ok(())
    }
}

/// Model invocations made on behalf of one request.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ForwardCounts {
    pub full: usize,
    pub sparse: usize,
}

#[derive(Debug, Clone)]
pub struct RequestState {
    request_id: u64,
    prompt: Vec<Token>,
    committed: Vec<Token>,
    drafted: Vec<Token>,
    phase: usize,
    entry_phase: usize,
    critical: Option<CriticalTokenSet>,
    max_output: usize,
    done: bool,
    kv: KvCache,
    fresh: KvCache,
    steps_on_critical: usize,
    calls: ForwardCounts,
}

impl RequestState {
    pub fn request_id(&self) -> u64 {
        self.request_id
    }

    pub fn prompt(&self) -> &[Token] {
        &self.prompt
    }

    pub fn committed(&self) -> &[Token] {
        &self.committed
    }

    pub fn drafted(&self) -> &[Token] {
        &self.drafted
    }

    /// `0..k` while drafting, `k` once the round awaits verification.
    pub fn phase(&self) -> usize {
        self.phase
    }

    /// Phase at which the current round started; non-zero only for a
    /// shortened first round.
    pub fn entry_phase(&self) -> usize {
        self.entry_phase
    }

    pub fn critical(&self) -> Option<&CriticalTokenSet> {
        self.critical.as_ref()
    }

    pub fn max_output(&self) -> usize {
        self.max_output
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Logical sequence length: prompt, committed and drafted tokens.
    pub fn kv_len(&self) -> usize {
        self.prompt.len() + self.committed.len() + self.drafted.len()
    }

    /// Entries in the committed (full-attention) cache.
    pub fn committed_kv_len(&self) -> usize {
        self.kv.len()
    }

    pub fn forward_calls(&self) -> ForwardCounts {
        self.calls
    }

    /// Draft steps taken with the current critical set.
    pub fn steps_on_critical(&self) -> usize {
        self.steps_on_critical
    }

    fn pending_token(&self) -> Token {
        *self.drafted.last().unwrap_or_else(|| self.committed.last().expect("prefilled"))
    }

    /// Checks the structural invariants of the state.
    pub fn check(&self, k: usize) -> Result<()> {
        let ok = self.phase <= k
            && self.entry_phase <= self.phase
            && self.drafted.len() == self.phase - self.entry_phase
            && (!self.done || self.drafted.is_empty())
            && self.kv.len() + 1 == self.prompt.len() + self.committed.len()
            && self.fresh.len() == self.drafted.len()
            && self.steps_on_critical <= k;
        if ok {
            Ok(())
        } else {
            Err(Error::Invariant(format!(
                "request {} state inconsistent: phase {} entry {} drafted {} kv {}",
                self.request_id,
                self.phase,
                self.entry_phase,
                self.drafted.len(),
                self.kv.len()
            )))
        }
    }
}

/// Result of one verification.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub accepted_count: usize,
    pub drafted: usize,
    pub bonus_token: Token,
    /// Tokens appended to `committed`, after end-token and length truncation.
    pub emitted: Vec<Token>,
    pub new_critical: CriticalTokenSet,
    /// Logical sequence length at verification time.
    pub kv_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RoundRecord {
    pub round_index: usize,
    pub accepted_count: usize,
    pub kv_len: usize,
    pub budget: usize,
}

/// Per-request speculation statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundStats {
    pub rounds: Vec<RoundRecord>,
    /// `histogram[a]` counts rounds that accepted `a` drafts.
    pub histogram: Vec<usize>,
    pub drafted_total: usize,
    pub accepted_total: usize,
    pub calls: ForwardCounts,
}

impl RoundStats {
    fn new(k: usize) -> Self {
        Self {
            histogram: vec![0; k + 1],
            ..Self::default()
        }
    }

    pub fn record(&mut self, outcome: &RoundOutcome) {
        self.rounds.push(RoundRecord {
            round_index: self.rounds.len(),
            accepted_count: outcome.accepted_count,
            kv_len: outcome.kv_len,
            budget: outcome.new_critical.budget(),
        });
        if self.histogram.len() <= outcome.accepted_count {
            self.histogram.resize(outcome.accepted_count + 1, 0);
        }
        self.histogram[outcome.accepted_count] += 1;
        self.drafted_total += outcome.drafted;
        self.accepted_total += outcome.accepted_count;
    }

    /// Accepted drafts over drafted tokens; 1.0 when nothing was drafted.
    pub fn realized_alpha(&self) -> f64 {
        if self.drafted_total == 0 {
            1.0
        } else {
            self.accepted_total as f64 / self.drafted_total as f64
        }
    }

    /// Writes `round_index,accepted_count,kv_len,budget` rows.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.rounds.is_empty() {
            w.write_record(["round_index", "accepted_count", "kv_len", "budget"])?;
        }
        for r in &self.rounds {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub tokens: Vec<Token>,
    pub stats: RoundStats,
}

/// Drives [`RequestState`]s against one shared model.
#[derive(Debug, Clone)]
pub struct SpecEngine<'m> {
    model: &'m ToyModel,
    params: SpecParams,
    group_map: Vec<usize>,
}

impl<'m> SpecEngine<'m> {
    pub fn new(model: &'m ToyModel, params: SpecParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            model,
            group_map: model.group_map(),
            params,
        })
    }

    pub fn params(&self) -> &SpecParams {
        &self.params
    }

    pub fn model(&self) -> &ToyModel {
        self.model
    }

    pub fn prefill(&self, request: &Request) -> Result<RequestState> {
        if request.prompt.is_empty() {
            return Err(contract_err("prompt must not be empty"));
        }
        if request.max_output == 0 {
            return Err(contract_err("max_output must be at least 1"));
        }
        let out = self.model.forward_full(&self.model.empty_cache(), &request.prompt)?;
        let mut kv = self.model.empty_cache();
        for e in &out.entries {
            kv.push(e)?;
        }
        let first = greedy_token(out.logits.last().expect("non-empty prompt"));
        let critical = identify(&out.scores, &self.group_map, kv.len(), self.params.sparsity)?;
        let done = request.max_output <= 1 || Some(first) == self.params.eos;
        Ok(RequestState {
            request_id: request.id,
            prompt: request.prompt.clone(),
            committed: vec![first],
            drafted: Vec::new(),
            phase: 0,
            entry_phase: 0,
            critical: Some(critical),
            max_output: request.max_output,
            done,
            kv,
            fresh: self.model.empty_cache(),
            steps_on_critical: 0,
            calls: ForwardCounts { full: 1, sparse: 0 },
        })
    }

    /// Shortens the upcoming round to `k - phase` drafts so its verification
    /// lands in the phase bucket chosen by the scheduler.
    pub fn enter_at_phase(&self, state: &mut RequestState, phase: usize) -> Result<()> {
        if phase > self.params.k {
            return Err(contract_err(format!("phase {phase} exceeds k = {}", self.params.k)));
        }
        if state.phase != 0 || !state.drafted.is_empty() {
            return Err(Error::State("can only realign a request at a round boundary".into()));
        }
        state.phase = phase;
        state.entry_phase = phase;
        Ok(())
    }

    pub fn draft_step(&self, state: &mut RequestState) -> Result<Token> {
        if state.done {
            return Err(Error::State(format!("request {} is finished", state.request_id)));
        }
        if state.phase >= self.params.k {
            return Err(Error::State(format!(
                "request {} awaits verification; cannot draft",
                state.request_id
            )));
        }
        let critical = state
            .critical
            .as_ref()
            .ok_or_else(|| Error::State("no critical set before first verification".into()))?;
        if state.steps_on_critical >= self.params.k {
            return Err(Error::Invariant("critical set used past its stride".into()));
        }
        let (logits, entry) =
            self.model
                .forward_sparse(&state.kv, critical, &state.fresh, state.pending_token())?;
        let token = greedy_token(&logits);
        state.fresh.push(&entry)?;
        state.drafted.push(token);
        state.phase += 1;
        state.steps_on_critical += 1;
        state.calls.sparse += 1;
        Ok(token)
    }

    pub fn verify_round(&self, state: &mut RequestState) -> Result<RoundOutcome> {
        if state.done {
            return Err(Error::State(format!("request {} is finished", state.request_id)));
        }
        if state.phase != self.params.k {
            return Err(Error::State(format!(
                "request {} is at phase {} of {}; cannot verify",
                state.request_id, state.phase, self.params.k
            )));
        }
        let kv_len = state.kv_len();
        let mut queries = Vec::with_capacity(state.drafted.len() + 1);
        queries.push(*state.committed.last().expect("prefilled"));
        queries.extend_from_slice(&state.drafted);

        let out = self.model.forward_full(&state.kv, &queries)?;
        state.calls.full += 1;

        let targets: Vec<Token> = out.logits.iter().map(greedy_token).collect();
        let accepted = state
            .drafted
            .iter()
            .zip(&targets)
            .take_while(|(d, t)| d == t)
            .count();
        let bonus = targets[accepted];

        // full-attention entries for the pending token and accepted drafts
        for e in &out.entries[..=accepted] {
            state.kv.push(e)?;
        }
        state.fresh.clear();

        let mut emitted: Vec<Token> = state.drafted[..accepted].to_vec();
        emitted.push(bonus);
        if let Some(eos) = self.params.eos {
            if let Some(i) = emitted.iter().position(|&t| t == eos) {
                emitted.truncate(i + 1);
                state.done = true;
            }
        }
        let room = state.max_output - state.committed.len();
        if emitted.len() >= room {
            emitted.truncate(room);
            state.done = true;
        }
        state.committed.extend_from_slice(&emitted);

        let critical = identify(&out.scores, &self.group_map, state.kv.len(), self.params.sparsity)?;
        let drafted = state.drafted.len();
        state.drafted.clear();
        state.phase = 0;
        state.entry_phase = 0;
        state.steps_on_critical = 0;
        state.critical = Some(critical.clone());

        Ok(RoundOutcome {
            accepted_count: accepted,
            drafted,
            bonus_token: bonus,
            emitted,
            new_critical: critical,
            kv_len,
        })
    }

    /// Runs draft/verify rounds until the request finishes.
    pub fn decode(&self, request: &Request) -> Result<Decoded> {
        let mut state = self.prefill(request)?;
        let mut stats = RoundStats::new(self.params.k);
        while !state.done {
            while state.phase < self.params.k {
                self.draft_step(&mut state)?;
            }
            let outcome = self.verify_round(&mut state)?;
            stats.record(&outcome);
        }
        stats.calls = state.calls;
        Ok(Decoded {
            tokens: state.committed,
            stats,
        })
    }
}

/// Speculative decoding of one request with `k` drafts per round and draft
/// sparsity `sparsity`.
pub fn decode_to_completion(
    model: &ToyModel,
    request: &Request,
    k: usize,
    sparsity: f64,
) -> Result<Decoded> {
    SpecEngine::new(model, SpecParams::new(k, sparsity))?.decode(request)
}

/// Plain autoregressive greedy decoding with full attention.
pub fn greedy_decode(
    model: &ToyModel,
    prompt: &[Token],
    max_output: usize,
    eos: Option<Token>,
) -> Result<Vec<Token>> {
    if prompt.is_empty() {
        return Err(contract_err("prompt must not be empty"));
    }
    let mut cache = model.empty_cache();
    let out = model.forward_full(&cache, prompt)?;
    for e in &out.entries {
        cache.push(e)?;
    }
    let mut tokens = Vec::with_capacity(max_output);
    let mut next = greedy_token(out.logits.last().expect("non-empty prompt"));
    while tokens.len() < max_output {
        tokens.push(next);
        if Some(next) == eos || tokens.len() == max_output {
            break;
        }
        let step = model.forward_full(&cache, &[next])?;
        cache.push(&step.entries[0])?;
        next = greedy_token(&step.logits[0]);
    }
    Ok(tokens)
}

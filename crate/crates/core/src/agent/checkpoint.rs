//! Checkpoint files.
//!
//! Layout: `b"OBCK"`, `u32` version, `u64` length `n`, `n` bytes of JSON
//! (configuration, its hash, counters, every network and optimiser state,
//! RNG states, environment state, the log so far), then the replay buffer
//! snapshot. Integers are little-endian. Floats are written with
//! round-trip precision, so a loaded agent continues bit-for-bit.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Accumulator, Agent, AgentConfig, AgentError, GateAudit, Learners, Streams, TickStats, TAG_NOISE};
use crate::envs::make_noisy_env;
use crate::harness::RunLog;
use crate::replay::ReplayBuffer;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"OBCK";

#[derive(Serialize, Deserialize)]
struct Snapshot {
    config: AgentConfig,
    config_hash: String,
    env_step: u64,
    grad_steps: u64,
    episode: u64,
    obs: Vec<f64>,
    env_state: serde_json::Value,
    nets: Learners,
    rngs: Streams,
    log: RunLog,
    acc: Accumulator,
    last_tick: Option<TickStats>,
    audit: GateAudit,
    wall_ms: u64,
}

pub fn checkpoint_save(agent: &Agent, path: &Path) -> Result<(), AgentError> {
    let snap = Snapshot {
        config: agent.config.clone(),
        config_hash: agent.config.hash(),
        env_step: agent.env_step,
        grad_steps: agent.grad_steps,
        episode: agent.episode,
        obs: agent.obs.clone(),
        env_state: agent.env.save_state(),
        nets: agent.nets.clone(),
        rngs: agent.rngs.clone(),
        log: agent.log.clone(),
        acc: agent.acc.clone(),
        last_tick: agent.last_tick.clone(),
        audit: agent.audit.clone(),
        wall_ms: agent.wall_ms(),
    };
    let json = serde_json::to_vec(&snap).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    agent.buffer.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint. With `expected`, the stored configuration must hash
/// identically (the step budget is not part of the hash and is taken from
/// `expected`).
pub fn checkpoint_load(path: &Path, expected: Option<&AgentConfig>) -> Result<Agent, AgentError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AgentError::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(AgentError::Checkpoint(format!("version {version}, this build reads {CHECKPOINT_VERSION}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let snap: Snapshot = serde_json::from_slice(&json).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
    let stored = snap.config.hash();
    if stored != snap.config_hash {
        return Err(AgentError::Checkpoint("stored configuration does not match its hash".into()));
    }
    let mut config = snap.config;
    if let Some(exp) = expected {
        if exp.hash() != stored {
            return Err(AgentError::Checkpoint(format!(
                "configuration hash {} differs from checkpoint {}{}",
                &exp.hash()[..12],
                &stored[..12],
                differing_fields(exp, &config)
            )));
        }
        config.total_steps = exp.total_steps;
    }
    let buffer = ReplayBuffer::read_from(&mut r)?;
    let mut env = make_noisy_env(&config.env, config.action_noise, super::derive_seed(config.seed, TAG_NOISE, 0))?;
    env.load_state(snap.env_state)?;
    Ok(Agent {
        spec: env.spec().clone(),
        config,
        env,
        buffer,
        nets: snap.nets,
        rngs: snap.rngs,
        env_step: snap.env_step,
        grad_steps: snap.grad_steps,
        episode: snap.episode,
        obs: snap.obs,
        log: snap.log,
        acc: snap.acc,
        last_tick: snap.last_tick,
        audit: snap.audit,
        wall_ms_before: snap.wall_ms,
        started: Instant::now(),
    })
}

fn differing_fields(a: &AgentConfig, b: &AgentConfig) -> String {
    let (Ok(serde_json::Value::Object(x)), Ok(serde_json::Value::Object(y))) =
        (serde_json::to_value(a), serde_json::to_value(b))
    else {
        return String::new();
    };
    let keys: Vec<String> =
        x.iter().filter(|(k, v)| k.as_str() != "total_steps" && y.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect();
    if keys.is_empty() {
        String::new()
    } else {
        format!(" (differs in: {})", keys.join(", "))
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::*;

    #[test]
    fn round_trip_then_identical_continuation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut c = tiny("pointmass-dense");
        c.action_noise = 0.05;
        let mut a = Agent::new(c.clone()).unwrap();
        a.run_until(120).unwrap();
        checkpoint_save(&a, &path).unwrap();
        let mut b = checkpoint_load(&path, Some(&c)).unwrap();
        assert_eq!(a.nets, b.nets);
        assert_eq!(a.buffer, b.buffer);
        a.run_until(300).unwrap();
        b.run_until(300).unwrap();
        assert_eq!(a.nets, b.nets);
        let strip = |l: &RunLog| l.rows.iter().map(|r| (r.env_step, r.eval_return_mean, r.loss_q_pi)).collect::<Vec<_>>();
        assert_eq!(strip(&a.log), strip(&b.log));
    }

    #[test]
    fn mismatched_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = tiny("pendulum");
        checkpoint_save(&Agent::new(c.clone()).unwrap(), &path).unwrap();
        let mut other = c.clone();
        other.env = "pointmass-dense".into();
        match checkpoint_load(&path, Some(&other)) {
            Err(AgentError::Checkpoint(msg)) => assert!(msg.contains("env"), "{msg}"),
            Err(e) => panic!("{e}"),
            Ok(_) => panic!("accepted"),
        }
        let mut longer = c;
        longer.total_steps = 1_000_000;
        assert!(checkpoint_load(&path, Some(&longer)).is_ok());
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(checkpoint_load(&path, None), Err(AgentError::Checkpoint(_))));
        let mut bytes = MAGIC.to_vec();
        bytes.extend(99u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        match checkpoint_load(&path, None) {
            Err(AgentError::Checkpoint(msg)) => assert!(msg.contains("99")),
            _ => panic!(),
        }
    }
}

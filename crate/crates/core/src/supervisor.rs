//! Three-layer recovery ladder: respawn on exit, forced exit of processes
//! that stop producing output, and a hardware watchdog that resets the whole
//! computer when the software stops petting it.
//!
//! Default budgets compose so each layer fires strictly before the next:
//! respawn 1 s, heartbeat timeout 2 s, watchdog expiry 10 s, boot 45 s.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SupervisorError {
    #[error("unknown or not running process {0:?}")]
    UnknownProcess(String),
    #[error("process {0:?} already registered")]
    DuplicateProcess(String),
    #[error("watchdog expiry must exceed the pet interval")]
    BadWatchdogTiming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ProcState {
    Running,
    Crashed,
    Hung,
    Restarting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SupCause {
    Crash,
    HeartbeatTimeout,
    ForcedExit,
    Respawn,
    Started,
    HeartbeatResumed,
    SystemReset,
    Boot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcessConfig {
    pub respawn_delay_ns: u64,
    pub heartbeat_timeout_ns: u64,
    /// Modeled time from spawn to first output.
    pub start_duration_ns: u64,
}

impl Default for ProcessConfig {
    fn default() -> Self {
        ProcessConfig {
            respawn_delay_ns: 1_000_000_000,
            heartbeat_timeout_ns: 2_000_000_000,
            start_duration_ns: 500_000_000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ManagedProcess {
    pub name: String,
    pub state: ProcState,
    pub restart_count: u64,
    pub last_heartbeat_ns: u64,
    pub state_since_ns: u64,
    /// Simulation only: the process is alive but produces no output.
    pub stuck: bool,
    #[serde(skip)]
    pub config: ProcessConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProcTransition {
    pub time_ns: u64,
    pub process: String,
    pub from: ProcState,
    pub to: ProcState,
    pub cause: SupCause,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SystemReset {
    pub time_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SystemWatchdog {
    pub pet_interval_ns: u64,
    pub expiry_ns: u64,
    pub boot_duration_ns: u64,
    pub armed: bool,
    pub reset_in_progress: bool,
    pub last_pet_ns: u64,
    pub reset_at_ns: Option<u64>,
}

impl SystemWatchdog {
    pub fn new(pet_interval_ns: u64, expiry_ns: u64, boot_duration_ns: u64) -> Result<Self, SupervisorError> {
        if expiry_ns <= pet_interval_ns {
            return Err(SupervisorError::BadWatchdogTiming);
        }
        Ok(SystemWatchdog {
            pet_interval_ns,
            expiry_ns,
            boot_duration_ns,
            armed: true,
            reset_in_progress: false,
            last_pet_ns: 0,
            reset_at_ns: None,
        })
    }

    pub fn pet(&mut self, now_ns: u64) {
        self.last_pet_ns = self.last_pet_ns.max(now_ns);
    }

    /// Fires once when the watchdog has not been petted for `expiry_ns`.
    pub fn tick(&mut self, now_ns: u64) -> Option<SystemReset> {
        if !self.armed || self.reset_in_progress {
            return None;
        }
        if now_ns.saturating_sub(self.last_pet_ns) >= self.expiry_ns {
            self.reset_in_progress = true;
            self.reset_at_ns = Some(now_ns);
            return Some(SystemReset { time_ns: now_ns });
        }
        None
    }
}

impl Default for SystemWatchdog {
    fn default() -> Self {
        SystemWatchdog::new(1_000_000_000, 10_000_000_000, 45_000_000_000).expect("valid defaults")
    }
}

pub struct Supervisor {
    procs: BTreeMap<String, ManagedProcess>,
    log: Vec<ProcTransition>,
    watchdog: SystemWatchdog,
    system_hung: bool,
}

impl Supervisor {
    pub fn new(watchdog: SystemWatchdog) -> Self {
        Supervisor {
            procs: BTreeMap::new(),
            log: Vec::new(),
            watchdog,
            system_hung: false,
        }
    }

    pub fn register(&mut self, name: &str, config: ProcessConfig, now_ns: u64) -> Result<(), SupervisorError> {
        if self.procs.contains_key(name) {
            return Err(SupervisorError::DuplicateProcess(name.to_string()));
        }
        self.procs.insert(
            name.to_string(),
            ManagedProcess {
                name: name.to_string(),
                state: ProcState::Running,
                restart_count: 0,
                last_heartbeat_ns: now_ns,
                state_since_ns: now_ns,
                stuck: false,
                config,
            },
        );
        Ok(())
    }

    pub fn process(&self, name: &str) -> Option<&ManagedProcess> {
        self.procs.get(name)
    }

    pub fn processes(&self) -> impl Iterator<Item = &ManagedProcess> {
        self.procs.values()
    }

    pub fn log(&self) -> &[ProcTransition] {
        &self.log
    }

    pub fn watchdog(&self) -> &SystemWatchdog {
        &self.watchdog
    }

    pub fn system_hung(&self) -> bool {
        self.system_hung
    }

    pub fn all_running(&self) -> bool {
        !self.watchdog.reset_in_progress && self.procs.values().all(|p| p.state == ProcState::Running)
    }

    fn transition(&mut self, name: &str, to: ProcState, cause: SupCause, now_ns: u64) -> ProcTransition {
        let p = self.procs.get_mut(name).expect("registered");
        let t = ProcTransition {
            time_ns: now_ns,
            process: name.to_string(),
            from: p.state,
            to,
            cause,
        };
        p.state = to;
        p.state_since_ns = now_ns;
        self.log.push(t.clone());
        t
    }

    /// Liveness signal. Only a live (Running or pending-Hung) process can
    /// heartbeat; a pending Hung verdict is cleared.
    pub fn heartbeat(&mut self, name: &str, now_ns: u64) -> Result<(), SupervisorError> {
        let state = match self.procs.get_mut(name) {
            Some(p) if matches!(p.state, ProcState::Running | ProcState::Hung) => {
                p.last_heartbeat_ns = now_ns;
                p.state
            }
            _ => return Err(SupervisorError::UnknownProcess(name.to_string())),
        };
        if state == ProcState::Hung {
            self.transition(name, ProcState::Running, SupCause::HeartbeatResumed, now_ns);
        }
        Ok(())
    }

    /// Simulated fault: the process exits.
    pub fn inject_crash(&mut self, name: &str, now_ns: u64) -> Result<Option<ProcTransition>, SupervisorError> {
        let p = self
            .procs
            .get(name)
            .ok_or_else(|| SupervisorError::UnknownProcess(name.to_string()))?;
        if matches!(p.state, ProcState::Crashed) {
            return Ok(None);
        }
        Ok(Some(self.transition(name, ProcState::Crashed, SupCause::Crash, now_ns)))
    }

    /// Simulated fault: the process stays alive but stops producing output.
    pub fn inject_hang(&mut self, name: &str) -> Result<(), SupervisorError> {
        let p = self
            .procs
            .get_mut(name)
            .ok_or_else(|| SupervisorError::UnknownProcess(name.to_string()))?;
        p.stuck = true;
        Ok(())
    }

    /// Simulated fault: the whole computer freezes. Nothing runs until the
    /// hardware watchdog resets it.
    pub fn inject_system_hang(&mut self) {
        self.system_hung = true;
    }

    /// Software side of the model: healthy processes heartbeat and the
    /// watchdog gets petted, unless the system is hung.
    pub fn auto_heartbeat(&mut self, now_ns: u64) {
        if self.system_hung || self.watchdog.reset_in_progress {
            return;
        }
        let live: Vec<String> = self
            .procs
            .values()
            .filter(|p| p.state == ProcState::Running && !p.stuck)
            .map(|p| p.name.clone())
            .collect();
        for name in live {
            self.heartbeat(&name, now_ns).expect("live process");
        }
        if now_ns.saturating_sub(self.watchdog.last_pet_ns) >= self.watchdog.pet_interval_ns {
            self.watchdog.pet(now_ns);
        }
    }

    pub fn pet_watchdog(&mut self, now_ns: u64) {
        if !self.system_hung {
            self.watchdog.pet(now_ns);
        }
    }

    /// Respawn and stuck-process handling. Does nothing while the system is
    /// hung or rebooting.
    pub fn supervise_tick(&mut self, now_ns: u64) -> Vec<ProcTransition> {
        if self.system_hung || self.watchdog.reset_in_progress {
            return Vec::new();
        }
        let mut out = Vec::new();
        let names: Vec<String> = self.procs.keys().cloned().collect();
        for name in names {
            let p = &self.procs[&name];
            let since = now_ns.saturating_sub(p.state_since_ns);
            let cfg = p.config;
            match p.state {
                ProcState::Running => {
                    if now_ns.saturating_sub(p.last_heartbeat_ns) > cfg.heartbeat_timeout_ns {
                        out.push(self.transition(&name, ProcState::Hung, SupCause::HeartbeatTimeout, now_ns));
                    }
                }
                ProcState::Hung => {
                    out.push(self.transition(&name, ProcState::Crashed, SupCause::ForcedExit, now_ns));
                }
                ProcState::Crashed => {
                    if since >= cfg.respawn_delay_ns {
                        out.push(self.transition(&name, ProcState::Restarting, SupCause::Respawn, now_ns));
                    }
                }
                ProcState::Restarting => {
                    if since >= cfg.start_duration_ns {
                        let p = self.procs.get_mut(&name).expect("registered");
                        p.restart_count += 1;
                        p.stuck = false;
                        p.last_heartbeat_ns = now_ns;
                        out.push(self.transition(&name, ProcState::Running, SupCause::Started, now_ns));
                    }
                }
            }
        }
        out
    }

    /// Hardware watchdog: on expiry every process goes to Restarting; after
    /// the boot duration the software auto-starts and everything runs again.
    pub fn system_watchdog_tick(&mut self, now_ns: u64) -> (Option<SystemReset>, Vec<ProcTransition>) {
        let mut out = Vec::new();
        if self.watchdog.reset_in_progress {
            let reset_at = self.watchdog.reset_at_ns.unwrap_or(now_ns);
            if now_ns.saturating_sub(reset_at) >= self.watchdog.boot_duration_ns {
                let names: Vec<String> = self.procs.keys().cloned().collect();
                for name in names {
                    let p = self.procs.get_mut(&name).expect("registered");
                    p.restart_count += 1;
                    p.stuck = false;
                    p.last_heartbeat_ns = now_ns;
                    out.push(self.transition(&name, ProcState::Running, SupCause::Boot, now_ns));
                }
                self.watchdog.reset_in_progress = false;
                self.watchdog.last_pet_ns = now_ns;
            }
            return (None, out);
        }
        let reset = self.watchdog.tick(now_ns);
        if reset.is_some() {
            self.system_hung = false;
            let names: Vec<String> = self.procs.keys().cloned().collect();
            for name in names {
                out.push(self.transition(&name, ProcState::Restarting, SupCause::SystemReset, now_ns));
            }
        }
        (reset, out)
    }

    /// Both supervisor layers plus the software heartbeat model, in order.
    pub fn tick(&mut self, now_ns: u64) -> (Option<SystemReset>, Vec<ProcTransition>) {
        self.auto_heartbeat(now_ns);
        let mut out = self.supervise_tick(now_ns);
        let (reset, more) = self.system_watchdog_tick(now_ns);
        out.extend(more);
        (reset, out)
    }
}

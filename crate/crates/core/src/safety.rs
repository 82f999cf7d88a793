//! E-stop semantics and the arm disable / auto-recovery state machine.
//!
//! ```text
//!              gap > threshold, collision, E-stop
//! Operational ─────────────────────────────────────► SoftStop
//!      ▲                                                │ observer: E-stop off,
//!      │ fade done                                      │ force < threshold
//!   Fading ◄──────────── restart done ──── Restarting ◄─┘
//! ```
//!
//! HardStop behaves like SoftStop for recovery but is only entered through
//! a severe collision or an explicit hard-stop fault. While the E-stop is
//! engaged nothing ever enters Restarting.

use serde::Serialize;

pub const JOINTS: usize = 7;
pub type JointPose = [f64; JOINTS];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyConfig {
    pub command_gap_threshold_s: f64,
    /// External force at or above this blocks recovery.
    pub recovery_force_threshold: f64,
    pub collision_threshold: f64,
    pub hard_collision_threshold: f64,
    pub restart_duration_ns: u64,
    pub fade_duration_ns: u64,
    pub estop_heartbeat_timeout_ns: u64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        SafetyConfig {
            command_gap_threshold_s: 0.1,
            recovery_force_threshold: 0.2,
            collision_threshold: 0.8,
            hard_collision_threshold: 1.5,
            restart_duration_ns: 3_000_000_000,
            fade_duration_ns: 2_000_000_000,
            estop_heartbeat_timeout_ns: 500_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ArmId {
    Left,
    Right,
}

impl ArmId {
    pub const BOTH: [ArmId; 2] = [ArmId::Left, ArmId::Right];

    pub fn name(self) -> &'static str {
        match self {
            ArmId::Left => "left",
            ArmId::Right => "right",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for ArmId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "left" => Ok(ArmId::Left),
            "right" => Ok(ArmId::Right),
            other => Err(format!("unknown arm {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ArmMode {
    Operational,
    SoftStop,
    HardStop,
    Restarting,
    Fading,
}

impl ArmMode {
    pub const ALL: [ArmMode; 5] = [
        ArmMode::Operational,
        ArmMode::SoftStop,
        ArmMode::HardStop,
        ArmMode::Restarting,
        ArmMode::Fading,
    ];

    pub fn is_stopped(self) -> bool {
        matches!(self, ArmMode::SoftStop | ArmMode::HardStop)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Cause {
    CommandGap,
    Collision,
    EStop,
    HardStopFault,
    Recovery,
    RestartComplete,
    FadeComplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Transition {
    pub time_ns: u64,
    pub arm: ArmId,
    pub from: ArmMode,
    pub to: ArmMode,
    pub cause: Cause,
}

/// Shape of the pose fade. Maps progress in [0, 1] to a blend weight in [0, 1].
pub trait FadeCurve: Send + Sync {
    fn weight(&self, progress: f64) -> f64;
}

pub struct LinearFade;

impl FadeCurve for LinearFade {
    fn weight(&self, progress: f64) -> f64 {
        progress.clamp(0.0, 1.0)
    }
}

pub fn lerp_pose(from: &JointPose, to: &JointPose, w: f64) -> JointPose {
    std::array::from_fn(|i| from[i] + (to[i] - from[i]) * w)
}

/// Wireless E-stop. Losing its heartbeat counts as engaged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EStopState {
    pub engaged: bool,
    pub last_heartbeat_ns: u64,
    pub heartbeat_timeout_ns: u64,
}

impl EStopState {
    pub fn new(now_ns: u64, heartbeat_timeout_ns: u64) -> Self {
        EStopState {
            engaged: false,
            last_heartbeat_ns: now_ns,
            heartbeat_timeout_ns,
        }
    }

    pub fn heartbeat(&mut self, now_ns: u64) {
        self.last_heartbeat_ns = self.last_heartbeat_ns.max(now_ns);
    }

    /// True when the heartbeat has been silent longer than the timeout.
    pub fn heartbeat_lost(&self, now_ns: u64) -> bool {
        now_ns.saturating_sub(self.last_heartbeat_ns) > self.heartbeat_timeout_ns
    }
}

/// Inputs to the arm state machine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArmEvent {
    EStopEngaged,
    EStopReleased,
    CommandGap { gap_s: f64 },
    Collision { force: f64 },
    HardStopFault,
    /// One pass of the recovery observer.
    ObserverTick { estop_engaged: bool },
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmState {
    pub id: ArmId,
    pub mode: ArmMode,
    pub external_force: f64,
    pub fade_progress: f64,
    pub operator_pose: JointPose,
    pub arm_pose: JointPose,
    pub stop_pose: JointPose,
    pub mode_since_ns: u64,
}

impl ArmState {
    pub fn new(id: ArmId) -> Self {
        ArmState {
            id,
            mode: ArmMode::Operational,
            external_force: 0.0,
            fade_progress: 0.0,
            operator_pose: [0.0; JOINTS],
            arm_pose: [0.0; JOINTS],
            stop_pose: [0.0; JOINTS],
            mode_since_ns: 0,
        }
    }

    fn enter(&mut self, to: ArmMode, cause: Cause, now_ns: u64) -> Transition {
        let t = Transition {
            time_ns: now_ns,
            arm: self.id,
            from: self.mode,
            to,
            cause,
        };
        match to {
            ArmMode::Fading => {
                self.stop_pose = self.arm_pose;
                self.fade_progress = 0.0;
            }
            ArmMode::Operational => {
                self.fade_progress = 1.0;
                self.arm_pose = self.operator_pose;
            }
            _ => self.fade_progress = 0.0,
        }
        self.mode = to;
        self.mode_since_ns = now_ns;
        t
    }

    /// Advances the machine by one event. Returns the transition taken, if
    /// any. Every (mode, event) pair has a defined outcome.
    pub fn apply(&mut self, event: ArmEvent, now_ns: u64, cfg: &SafetyConfig, fade: &dyn FadeCurve) -> Option<Transition> {
        use ArmMode::*;
        match (self.mode, event) {
            (HardStop, ArmEvent::EStopEngaged) => None,
            (SoftStop, ArmEvent::EStopEngaged) => None,
            (_, ArmEvent::EStopEngaged) => Some(self.enter(SoftStop, Cause::EStop, now_ns)),

            // release only makes arms eligible; the observer restarts them
            (_, ArmEvent::EStopReleased) => None,

            (Operational, ArmEvent::CommandGap { gap_s }) if gap_s > cfg.command_gap_threshold_s => {
                Some(self.enter(SoftStop, Cause::CommandGap, now_ns))
            }
            (_, ArmEvent::CommandGap { .. }) => None,

            (mode, ArmEvent::Collision { force }) => {
                self.external_force = self.external_force.max(force);
                let moving = matches!(mode, Operational | Fading | Restarting);
                if force >= cfg.hard_collision_threshold && mode != HardStop {
                    Some(self.enter(HardStop, Cause::Collision, now_ns))
                } else if force >= cfg.collision_threshold && moving {
                    Some(self.enter(SoftStop, Cause::Collision, now_ns))
                } else {
                    None
                }
            }

            (HardStop, ArmEvent::HardStopFault) => None,
            (_, ArmEvent::HardStopFault) => Some(self.enter(HardStop, Cause::HardStopFault, now_ns)),

            (SoftStop | HardStop, ArmEvent::ObserverTick { estop_engaged }) => {
                if !estop_engaged && self.external_force < cfg.recovery_force_threshold {
                    Some(self.enter(Restarting, Cause::Recovery, now_ns))
                } else {
                    None
                }
            }
            (Restarting, ArmEvent::ObserverTick { estop_engaged }) => {
                if estop_engaged {
                    Some(self.enter(SoftStop, Cause::EStop, now_ns))
                } else if now_ns.saturating_sub(self.mode_since_ns) >= cfg.restart_duration_ns {
                    Some(self.enter(Fading, Cause::RestartComplete, now_ns))
                } else {
                    None
                }
            }
            (Fading, ArmEvent::ObserverTick { estop_engaged }) => {
                if estop_engaged {
                    return Some(self.enter(SoftStop, Cause::EStop, now_ns));
                }
                let elapsed = now_ns.saturating_sub(self.mode_since_ns) as f64;
                self.fade_progress = if cfg.fade_duration_ns == 0 {
                    1.0
                } else {
                    (elapsed / cfg.fade_duration_ns as f64).min(1.0)
                };
                self.arm_pose = lerp_pose(&self.stop_pose, &self.operator_pose, fade.weight(self.fade_progress));
                if self.fade_progress >= 1.0 {
                    Some(self.enter(Operational, Cause::FadeComplete, now_ns))
                } else {
                    None
                }
            }
            (Operational, ArmEvent::ObserverTick { .. }) => {
                self.arm_pose = self.operator_pose;
                None
            }
        }
    }
}

/// What an E-stop press did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SafetyEvents {
    pub base_depowered: bool,
    pub transitions: Vec<Transition>,
}

/// Owns the E-stop and both arms. E-stop handling runs before anything else
/// in a tick.
pub struct SafetyController {
    pub config: SafetyConfig,
    estop: EStopState,
    arms: [ArmState; 2],
    fade: Box<dyn FadeCurve>,
    log: Vec<Transition>,
    /// Set once the first command arrives; until then the watchdog is idle.
    commands_seen: bool,
}

impl SafetyController {
    pub fn new(config: SafetyConfig, now_ns: u64) -> Self {
        SafetyController {
            estop: EStopState::new(now_ns, config.estop_heartbeat_timeout_ns),
            config,
            arms: [ArmState::new(ArmId::Left), ArmState::new(ArmId::Right)],
            fade: Box::new(LinearFade),
            log: Vec::new(),
            commands_seen: false,
        }
    }

    pub fn with_fade(mut self, fade: Box<dyn FadeCurve>) -> Self {
        self.fade = fade;
        self
    }

    pub fn estop(&self) -> &EStopState {
        &self.estop
    }

    pub fn arm(&self, id: ArmId) -> &ArmState {
        &self.arms[id.index()]
    }

    pub fn arms(&self) -> &[ArmState; 2] {
        &self.arms
    }

    pub fn log(&self) -> &[Transition] {
        &self.log
    }

    fn apply(&mut self, id: ArmId, event: ArmEvent, now_ns: u64) -> Option<Transition> {
        let t = self.arms[id.index()].apply(event, now_ns, &self.config, self.fade.as_ref());
        if let Some(t) = t {
            self.log.push(t);
        }
        t
    }

    pub fn estop_engage(&mut self, now_ns: u64) -> SafetyEvents {
        self.estop.engaged = true;
        let transitions = ArmId::BOTH
            .into_iter()
            .filter_map(|id| self.apply(id, ArmEvent::EStopEngaged, now_ns))
            .collect();
        SafetyEvents {
            base_depowered: true,
            transitions,
        }
    }

    pub fn estop_release(&mut self, now_ns: u64) -> SafetyEvents {
        self.estop.engaged = false;
        self.estop.heartbeat(now_ns);
        for id in ArmId::BOTH {
            self.apply(id, ArmEvent::EStopReleased, now_ns);
        }
        SafetyEvents::default()
    }

    pub fn estop_heartbeat(&mut self, now_ns: u64) {
        self.estop.heartbeat(now_ns);
    }

    /// Base velocity actually commanded: zero (coasting) while engaged.
    pub fn base_output(&self, requested: f64) -> f64 {
        if self.estop.engaged {
            0.0
        } else {
            requested
        }
    }

    pub fn arm_command_watchdog(&mut self, id: ArmId, gap_s: f64, now_ns: u64) -> Option<Transition> {
        self.apply(id, ArmEvent::CommandGap { gap_s }, now_ns)
    }

    pub fn recovery_observer_tick(&mut self, id: ArmId, now_ns: u64) -> Option<Transition> {
        let estop_engaged = self.estop.engaged;
        self.apply(id, ArmEvent::ObserverTick { estop_engaged }, now_ns)
    }

    pub fn collision_event(&mut self, id: ArmId, force: f64, now_ns: u64) -> Option<Transition> {
        self.apply(id, ArmEvent::Collision { force: force.max(0.0) }, now_ns)
    }

    pub fn hard_stop(&mut self, id: ArmId, now_ns: u64) -> Option<Transition> {
        self.apply(id, ArmEvent::HardStopFault, now_ns)
    }

    /// Sustained external force on the arm (e.g. pressing against an object).
    pub fn set_external_force(&mut self, id: ArmId, force: f64) {
        self.arms[id.index()].external_force = force.max(0.0);
    }

    pub fn set_operator_pose(&mut self, id: ArmId, pose: JointPose) {
        self.arms[id.index()].operator_pose = pose;
    }

    /// One control tick: E-stop heartbeat check, command watchdog, then the
    /// recovery observer, for both arms. `command_gap_s` is infinite until
    /// the first command has ever been received.
    pub fn tick(&mut self, now_ns: u64, command_gap_s: Option<f64>) -> Vec<Transition> {
        let mut out = Vec::new();
        if !self.estop.engaged && self.estop.heartbeat_lost(now_ns) {
            out.extend(self.estop_engage(now_ns).transitions);
        }
        if let Some(gap) = command_gap_s {
            if gap.is_finite() {
                self.commands_seen = true;
            }
            if self.commands_seen {
                for id in ArmId::BOTH {
                    out.extend(self.arm_command_watchdog(id, gap, now_ns));
                }
            }
        }
        for id in ArmId::BOTH {
            out.extend(self.recovery_observer_tick(id, now_ns));
        }
        out
    }
}

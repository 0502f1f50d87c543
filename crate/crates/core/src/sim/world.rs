use serde::{Deserialize, Serialize};

use crate::demos::{wrap_angle, Pose2, WorldState};

pub const GRASP_RADIUS: f64 = 0.1;
const MOTION_STEP: f64 = 0.02;
const ANGLE_STEP: f64 = 0.05;

/// Axis-aligned box in some host object's frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Region {
    pub fn contains(&self, p: &Pose2) -> bool {
        (self.x[0]..=self.x[1]).contains(&p.x) && (self.y[0]..=self.y[1]).contains(&p.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Bounds {
    pub fn contains(&self, p: &Pose2) -> bool {
        (self.x[0]..=self.x[1]).contains(&p.x) && (self.y[0]..=self.y[1]).contains(&p.y)
    }
}

/// Tilting a held `container` while the end effector is inside a receptacle's
/// `region` moves `content` into that receptacle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PourRule {
    pub container: String,
    pub content: String,
    pub receptacles: Vec<String>,
    pub region: Region,
    pub tilt_min: f64,
    /// Objects that stop the pour while mounted on the container.
    pub blockers: Vec<String>,
    /// Receptacles holding one of these are contaminated by the pour.
    pub stains: Vec<String>,
}

/// Holding `tool` level inside `source`'s region picks up `content`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillRule {
    pub tool: String,
    pub content: String,
    pub source: String,
    pub region: Region,
    pub tilt_max: f64,
    pub blockers: Vec<String>,
}

/// Sweeping the end effector level through `surface`'s region clears `stain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WipeRule {
    pub surface: String,
    pub stain: String,
    pub region: Region,
    pub tilt_max: f64,
    /// Where a wiped stain ends up.
    pub discard: Pose2,
}

/// Releasing `object` within `radius` of one of `hosts` seats it there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MountRule {
    pub object: String,
    pub hosts: Vec<String>,
    pub radius: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rules {
    #[serde(default)]
    pub pours: Vec<PourRule>,
    #[serde(default)]
    pub fills: Vec<FillRule>,
    #[serde(default)]
    pub wipes: Vec<WipeRule>,
    #[serde(default)]
    pub mounts: Vec<MountRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mount {
    pub host: String,
    pub offset: Pose2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub id: String,
    pub kind: String,
    pub pose: Pose2,
    pub graspable: bool,
    pub mount: Option<Mount>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub spilled: bool,
    pub contaminated: bool,
    pub transferred: bool,
    pub filled: bool,
    pub wiped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Spilled,
    Contaminated,
    Transferred,
    Filled,
    Wiped,
}

impl Flags {
    pub fn get(&self, f: Flag) -> bool {
        match f {
            Flag::Spilled => self.spilled,
            Flag::Contaminated => self.contaminated,
            Flag::Transferred => self.transferred,
            Flag::Filled => self.filled,
            Flag::Wiped => self.wiped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SimEvent {
    Grasped { object: String },
    Released { object: String },
    Mounted { object: String, host: String },
    Transferred { content: String, to: String },
    Blocked { container: String },
    Spilled { content: String },
    Filled { content: String, tool: String },
    Wiped { stain: String, surface: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fault", rename_all = "snake_case")]
pub enum Fault {
    Unreachable { x: f64, y: f64 },
}

impl std::fmt::Display for Fault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Fault::Unreachable { x, y } => write!(f, "target ({x:.3}, {y:.3}) is outside the workspace"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Held {
    pub object: String,
    pub offset: Pose2,
}

/// A 2D tabletop with a point end effector. Worlds are plain values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub objects: Vec<SimObject>,
    pub ee: Pose2,
    pub gripper: f64,
    pub held: Option<Held>,
    pub flags: Flags,
    pub bounds: Bounds,
    pub rules: Rules,
}

impl World {
    pub fn layout(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.id.clone()).collect()
    }

    pub fn capture(&self) -> WorldState {
        let poses: Vec<Pose2> = self.objects.iter().map(|o| o.pose).collect();
        WorldState::capture(&self.layout(), &poses, self.ee, self.gripper)
    }

    pub fn object(&self, id: &str) -> Option<&SimObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    fn index(&self, id: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }

    pub fn pose(&self, id: &str) -> Option<Pose2> {
        self.object(id).map(|o| o.pose)
    }

    pub fn host_of(&self, id: &str) -> Option<&str> {
        self.object(id)?.mount.as_ref().map(|m| m.host.as_str())
    }

    pub fn is_held(&self, id: &str) -> bool {
        self.held.as_ref().is_some_and(|h| h.object == id)
    }

    /// Whether any of `ids` is seated on `host`.
    pub fn any_mounted_on(&self, ids: &[String], host: &str) -> bool {
        ids.iter().any(|i| self.host_of(i) == Some(host))
    }

    pub fn mount(&mut self, object: &str, host: &str, offset: Pose2) {
        if let Some(i) = self.index(object) {
            self.objects[i].mount = Some(Mount {
                host: host.to_string(),
                offset,
            });
        }
        self.propagate();
    }

    /// Recomputes poses of held and mounted objects from their carriers.
    pub fn propagate(&mut self) {
        if let Some(h) = &self.held {
            let pose = self.ee.compose(&h.offset);
            if let Some(i) = self.index(&h.object) {
                self.objects[i].pose = pose;
            }
        }
        // Mount chains are shallow; one pass per object reaches a fixpoint.
        for _ in 0..self.objects.len() {
            let mut changed = false;
            for i in 0..self.objects.len() {
                let Some(m) = &self.objects[i].mount else { continue };
                let Some(host) = self.pose(&m.host) else { continue };
                let pose = host.compose(&m.offset);
                if pose != self.objects[i].pose {
                    self.objects[i].pose = pose;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }

    fn local(&self, host: &str, p: &Pose2) -> Option<Pose2> {
        Some(self.pose(host)?.relative(p))
    }

    /// Moves the end effector in a straight line to `target` while ramping
    /// the gripper, then applies the rule table.
    pub fn step_to(&mut self, target: Pose2, gripper: f64) -> Result<Vec<SimEvent>, Fault> {
        if !self.bounds.contains(&target) {
            return Err(Fault::Unreachable { x: target.x, y: target.y });
        }
        let gripper = gripper.clamp(0.0, 1.0);
        let start = self.ee;
        let g0 = self.gripper;
        let dtheta = wrap_angle(target.theta - start.theta);
        let dist = ((target.x - start.x).powi(2) + (target.y - start.y).powi(2)).sqrt();
        let n = ((dist / MOTION_STEP).ceil() as usize)
            .max((dtheta.abs() / ANGLE_STEP).ceil() as usize)
            .max(1);
        let mut events = Vec::new();
        for k in 1..=n {
            let t = k as f64 / n as f64;
            self.ee = Pose2::new(
                start.x + t * (target.x - start.x),
                start.y + t * (target.y - start.y),
                start.theta + t * dtheta,
            );
            self.propagate();
            self.apply_wipes(&mut events);
        }
        self.ee = target;
        self.gripper = gripper;
        self.propagate();
        if g0 < 0.5 && gripper >= 0.5 {
            self.grasp(&mut events);
        } else if g0 >= 0.5 && gripper < 0.5 {
            self.release(&mut events);
        }
        self.apply_fills(&mut events);
        self.apply_pours(&mut events);
        Ok(events)
    }

    fn grasp(&mut self, events: &mut Vec<SimEvent>) {
        if self.held.is_some() {
            return;
        }
        let ee = self.ee;
        let best = self
            .objects
            .iter()
            .filter(|o| o.graspable)
            .map(|o| (ee.distance(&o.pose), o.id.clone()))
            .filter(|(d, _)| *d <= GRASP_RADIUS)
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        if let Some((_, id)) = best {
            let i = self.index(&id).expect("candidate exists");
            self.objects[i].mount = None;
            self.held = Some(Held {
                offset: ee.relative(&self.objects[i].pose),
                object: id.clone(),
            });
            events.push(SimEvent::Grasped { object: id });
        }
    }

    fn release(&mut self, events: &mut Vec<SimEvent>) {
        let Some(h) = self.held.take() else { return };
        events.push(SimEvent::Released { object: h.object.clone() });
        let Some(pose) = self.pose(&h.object) else { return };
        let rules = self.rules.mounts.clone();
        for rule in rules.iter().filter(|r| r.object == h.object) {
            let seat = rule
                .hosts
                .iter()
                .filter_map(|host| Some((self.pose(host)?.distance(&pose), host)))
                .filter(|(d, _)| *d <= rule.radius)
                .min_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((_, host)) = seat {
                let offset = self.local(host, &pose).expect("host exists");
                self.mount(&h.object, host, offset);
                events.push(SimEvent::Mounted {
                    object: h.object.clone(),
                    host: host.clone(),
                });
                return;
            }
        }
    }

    fn apply_wipes(&mut self, events: &mut Vec<SimEvent>) {
        for rule in self.rules.wipes.clone() {
            if self.host_of(&rule.stain) != Some(rule.surface.as_str()) {
                continue;
            }
            let Some(local) = self.local(&rule.surface, &self.ee) else { continue };
            if rule.region.contains(&local) && local.theta.abs() < rule.tilt_max {
                let i = self.index(&rule.stain).expect("stain exists");
                self.objects[i].mount = None;
                self.objects[i].pose = rule.discard;
                self.flags.wiped = true;
                events.push(SimEvent::Wiped {
                    stain: rule.stain.clone(),
                    surface: rule.surface.clone(),
                });
            }
        }
    }

    fn apply_fills(&mut self, events: &mut Vec<SimEvent>) {
        for rule in self.rules.fills.clone() {
            if !self.is_held(&rule.tool)
                || self.host_of(&rule.content) != Some(rule.source.as_str())
                || self.any_mounted_on(&rule.blockers, &rule.source)
            {
                continue;
            }
            let Some(local) = self.local(&rule.source, &self.ee) else { continue };
            if rule.region.contains(&local) && local.theta.abs() < rule.tilt_max {
                self.mount(&rule.content, &rule.tool, Pose2::origin());
                self.flags.filled = true;
                events.push(SimEvent::Filled {
                    content: rule.content.clone(),
                    tool: rule.tool.clone(),
                });
            }
        }
    }

    fn apply_pours(&mut self, events: &mut Vec<SimEvent>) {
        for rule in self.rules.pours.clone() {
            if !self.is_held(&rule.container)
                || self.host_of(&rule.content) != Some(rule.container.as_str())
                || self.ee.theta.abs() < rule.tilt_min
            {
                continue;
            }
            if self.any_mounted_on(&rule.blockers, &rule.container) {
                events.push(SimEvent::Blocked {
                    container: rule.container.clone(),
                });
                continue;
            }
            let target = rule.receptacles.iter().find(|r| {
                self.local(r, &self.ee)
                    .is_some_and(|l| rule.region.contains(&l))
            });
            match target {
                Some(r) => {
                    if self.any_mounted_on(&rule.stains, r) {
                        self.flags.contaminated = true;
                    }
                    self.mount(&rule.content, r, Pose2::origin());
                    self.flags.transferred = true;
                    events.push(SimEvent::Transferred {
                        content: rule.content.clone(),
                        to: r.clone(),
                    });
                }
                None => {
                    let i = self.index(&rule.content).expect("content exists");
                    self.objects[i].mount = None;
                    self.objects[i].pose = Pose2::new(self.ee.x, self.ee.y, 0.0);
                    self.flags.spilled = true;
                    events.push(SimEvent::Spilled {
                        content: rule.content.clone(),
                    });
                }
            }
        }
    }
}

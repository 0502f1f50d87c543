use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::world::{Bounds, Flag, FillRule, Flags, MountRule, PourRule, Region, Rules, SimObject, WipeRule, World};
use crate::demos::{check_version, Pose2};
use crate::error::{Error, Result};
use crate::situ::EditKind;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;
pub const BASE_VARIANT: &str = "base";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: String,
    pub kind: String,
    /// Workspace pose, or offset in the host's frame when `on` is set.
    pub pose: Pose2,
    #[serde(default)]
    pub graspable: bool,
    #[serde(default)]
    pub on: Option<String>,
}

/// Keyframes of one segment, each `[dx, dy, dtheta, gripper]` in the reference object's frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTemplate {
    pub reference: String,
    pub keyframes: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    /// The edit a base-taught model needs to handle this variant.
    pub edit_kind: Option<EditKind>,
    /// Object specs replacing the scenario's by id.
    #[serde(default)]
    pub changes: Vec<ObjectSpec>,
    /// Full demonstration solving this variant.
    pub script: Vec<SegmentTemplate>,
    /// Base-model segments that still apply; the corrective demo is `script[attach_after..]`.
    #[serde(default)]
    pub attach_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum GoalCheck {
    ContentIn { content: String, container: String },
    FlagClear { flag: Flag },
    Near { object: String, target: String, radius: f64 },
    NotHeld { object: String },
}

impl GoalCheck {
    pub fn holds(&self, w: &World) -> bool {
        match self {
            GoalCheck::ContentIn { content, container } => w.host_of(content) == Some(container.as_str()),
            GoalCheck::FlagClear { flag } => !w.flags.get(*flag),
            GoalCheck::Near { object, target, radius } => match (w.pose(object), w.pose(target)) {
                (Some(a), Some(b)) => a.distance(&b) <= *radius,
                _ => false,
            },
            GoalCheck::NotHeld { object } => !w.is_held(object),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub bounds: Bounds,
    pub ee_start: Pose2,
    pub objects: Vec<ObjectSpec>,
    pub rules: Rules,
    pub goal: Vec<GoalCheck>,
    pub variants: Vec<Variant>,
}

impl Scenario {
    pub fn builtin(name: &str) -> Option<Scenario> {
        match name {
            "pour" => Some(pour()),
            "scoop" => Some(scoop()),
            _ => None,
        }
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["pour", "scoop"]
    }

    /// A builtin name, or else a path to a scenario file.
    pub fn resolve(name_or_path: &str) -> Result<Scenario> {
        match Scenario::builtin(name_or_path) {
            Some(s) => Ok(s),
            None if Path::new(name_or_path).exists() => Scenario::load(name_or_path),
            None => Err(Error::invalid(format!(
                "unknown scenario `{name_or_path}` (builtins: {})",
                Scenario::builtin_names().join(", ")
            ))),
        }
    }

    pub fn layout(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.id.clone()).collect()
    }

    pub fn variant(&self, name: &str) -> Result<&Variant> {
        self.variants
            .iter()
            .find(|v| v.name == name)
            .ok_or_else(|| Error::invalid(format!("scenario `{}` has no variant `{name}`", self.name)))
    }

    pub fn variant_for(&self, kind: EditKind) -> Option<&Variant> {
        self.variants.iter().find(|v| v.edit_kind == Some(kind))
    }

    /// Initial world of a variant. Free objects are jittered by `noise` (per axis, seeded).
    pub fn initial_world(&self, variant: &str, noise: f64, seed: u64) -> Result<World> {
        let v = self.variant(variant)?;
        let mut specs = self.objects.clone();
        for c in &v.changes {
            let slot = specs
                .iter_mut()
                .find(|s| s.id == c.id)
                .ok_or_else(|| Error::invalid(format!("variant `{}` changes unknown object `{}`", v.name, c.id)))?;
            *slot = c.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
        let objects: Vec<SimObject> = specs
            .iter()
            .map(|s| {
                let mut pose = s.pose;
                if s.on.is_none() && noise > 0.0 {
                    pose = Pose2::new(pose.x + normal.sample(&mut rng), pose.y + normal.sample(&mut rng), pose.theta);
                }
                SimObject {
                    id: s.id.clone(),
                    kind: s.kind.clone(),
                    pose,
                    graspable: s.graspable,
                    mount: s.on.as_ref().map(|host| super::world::Mount {
                        host: host.clone(),
                        offset: s.pose,
                    }),
                }
            })
            .collect();
        for o in &objects {
            if let Some(m) = &o.mount {
                if !specs.iter().any(|s| s.id == m.host) {
                    return Err(Error::invalid(format!("object `{}` sits on unknown `{}`", o.id, m.host)));
                }
            }
        }
        let mut world = World {
            objects,
            ee: self.ee_start,
            gripper: 0.0,
            held: None,
            flags: Flags::default(),
            bounds: self.bounds,
            rules: self.rules.clone(),
        };
        world.propagate();
        Ok(world)
    }

    pub fn goal_met(&self, w: &World) -> bool {
        self.goal.iter().all(|g| g.holds(w))
    }

    pub fn failed_checks(&self, w: &World) -> Vec<&GoalCheck> {
        self.goal.iter().filter(|g| !g.holds(w)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(Error::Version {
                found: self.schema_version,
                expected: SCENARIO_SCHEMA_VERSION,
            });
        }
        self.variant(BASE_VARIANT)?;
        let layout = self.layout();
        for v in &self.variants {
            if v.attach_after > v.script.len() {
                return Err(Error::invalid(format!("variant `{}` attaches past its script", v.name)));
            }
            for seg in &v.script {
                if !layout.contains(&seg.reference) {
                    return Err(Error::invalid(format!(
                        "variant `{}` references unknown object `{}`",
                        v.name, seg.reference
                    )));
                }
                if seg.keyframes.is_empty() {
                    return Err(Error::invalid(format!("variant `{}` has an empty segment", v.name)));
                }
            }
            self.initial_world(&v.name, 0.0, 0)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::parse("scenario", e))?;
        check_version(&value, SCENARIO_SCHEMA_VERSION)?;
        let s: Scenario = serde_json::from_str(text).map_err(|e| Error::parse("scenario", e))?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Scenario::from_text(&std::fs::read_to_string(path)?)
    }
}

fn obj(id: &str, kind: &str, x: f64, y: f64) -> ObjectSpec {
    ObjectSpec {
        id: id.into(),
        kind: kind.into(),
        pose: Pose2::new(x, y, 0.0),
        graspable: false,
        on: None,
    }
}

fn graspable(mut o: ObjectSpec) -> ObjectSpec {
    o.graspable = true;
    o
}

fn on(mut o: ObjectSpec, host: &str) -> ObjectSpec {
    o.on = Some(host.into());
    o
}

fn seg(reference: &str, keyframes: &[[f64; 4]]) -> SegmentTemplate {
    SegmentTemplate {
        reference: reference.into(),
        keyframes: keyframes.to_vec(),
    }
}

fn variant(name: &str, kind: Option<EditKind>, changes: Vec<ObjectSpec>, script: Vec<SegmentTemplate>, attach_after: usize) -> Variant {
    Variant {
        name: name.into(),
        edit_kind: kind,
        changes,
        script,
        attach_after,
    }
}

const BOUNDS: Bounds = Bounds {
    x: [-1.5, 1.5],
    y: [-1.2, 1.5],
};
const MOUTH: Region = Region {
    x: [-0.15, 0.15],
    y: [0.1, 0.4],
};
const RIM: Region = Region {
    x: [-0.2, 0.2],
    y: [-0.05, 0.12],
};
const DISCARD: Pose2 = Pose2 {
    x: 1.4,
    y: -1.1,
    theta: 0.0,
};

fn wipe() -> SegmentTemplate {
    seg(
        "bowl",
        &[
            [-0.3375, 0.05, 0.0, 1.0],
            [-0.1125, 0.05, 0.0, 1.0],
            [0.1125, 0.05, 0.0, 1.0],
            [0.3375, 0.05, 0.0, 1.0],
            [0.3375, 0.275, 0.0, 1.0],
            [0.3375, 0.6, 0.0, 1.0],
            [0.3375, 0.6, 0.0, 1.0],
            [0.3375, 0.6, 0.0, 1.0],
        ],
    )
}

fn tip(reference: &str, tilt: f64) -> SegmentTemplate {
    seg(
        reference,
        &[
            [0.0, 0.475, 0.0, 1.0],
            [0.0, 0.25, 0.0, 1.0],
            [0.0, 0.25, 0.0, 1.0],
            [0.0, 0.25, tilt, 1.0],
            [0.0, 0.25, tilt, 1.0],
            [0.0, 0.25, tilt, 1.0],
            [0.0, 0.25, 0.0, 1.0],
            [0.0, 0.25, 0.0, 1.0],
            [0.0, 0.25, 0.0, 1.0],
        ],
    )
}

/// Approach from `(ax, ay)` to the reference origin, then ramp the gripper from `from` to `to` and hold it.
/// Repeated keyframes mark where the demonstrator paused. Leg lengths sit halfway
/// between interpolation steps so noise does not change how many points a leg yields.
fn gripper_change(reference: &str, ax: f64, ay: f64, from: f64, to: f64) -> SegmentTemplate {
    seg(
        reference,
        &[
            [ax, ay, 0.0, from],
            [ax * 5.0 / 12.0, ay * 5.0 / 12.0, 0.0, from],
            [0.0, 0.0, 0.0, from],
            [0.0, 0.0, 0.0, from],
            [0.0, 0.0, 0.0, to],
            [0.0, 0.0, 0.0, to],
            [0.0, 0.0, 0.0, to],
        ],
    )
}

fn common_rules(container: &str, content: &str, blockers: Vec<String>) -> Rules {
    Rules {
        pours: vec![PourRule {
            container: container.into(),
            content: content.into(),
            receptacles: vec!["bowl".into()],
            region: MOUTH,
            tilt_min: 1.0,
            blockers,
            stains: vec!["stain".into()],
        }],
        fills: vec![],
        wipes: vec![WipeRule {
            surface: "bowl".into(),
            stain: "stain".into(),
            region: RIM,
            tilt_max: 0.5,
            discard: DISCARD,
        }],
        mounts: vec![],
    }
}

fn goal(content: &str, tool: &str, rest: &str) -> Vec<GoalCheck> {
    vec![
        GoalCheck::ContentIn {
            content: content.into(),
            container: "bowl".into(),
        },
        GoalCheck::FlagClear { flag: Flag::Spilled },
        GoalCheck::FlagClear { flag: Flag::Contaminated },
        GoalCheck::Near {
            object: tool.into(),
            target: rest.into(),
            radius: 0.1,
        },
        GoalCheck::NotHeld { object: tool.into() },
    ]
}

/// Grasp a pitcher, pour into the bowl on the mat, wipe the rim, set the pitcher on its coaster.
pub fn pour() -> Scenario {
    let grasp = gripper_change("pitcher", -0.3, 0.0, 0.0, 1.0);
    let place = gripper_change("coaster", 0.0, 0.3, 1.0, 0.0);
    let take_lid = gripper_change("lid", 0.0, 0.3, 0.0, 1.0);
    let stow_lid = gripper_change("tray", 0.3, 0.0, 1.0, 0.0);
    let mut rules = common_rules("pitcher", "water", vec!["lid".into()]);
    rules.mounts.push(MountRule {
        object: "lid".into(),
        hosts: vec!["pitcher".into(), "tray".into()],
        radius: 0.1,
    });
    let lid_on = on(graspable(obj("lid", "lid", 0.0, 0.12)), "pitcher");
    let stained = on(obj("stain", "stain", 0.0, 0.02), "bowl");
    let moved = obj("bowl", "bowl", 0.6, -0.2);
    let trivet = obj("trivet", "mat", 0.6, -0.2);
    Scenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: "pour".into(),
        bounds: BOUNDS,
        ee_start: Pose2::new(0.0, -0.9, 0.0),
        objects: vec![
            graspable(obj("pitcher", "pitcher", -0.6, 0.0)),
            on(obj("water", "contents", 0.0, 0.0), "pitcher"),
            on(graspable(obj("lid", "lid", 0.0, 0.0)), "tray"),
            obj("tray", "tray", 1.0, 0.9),
            obj("mat", "mat", 0.3, 0.4),
            obj("bowl", "bowl", 0.3, 0.4),
            obj("stain", "stain", DISCARD.x, DISCARD.y),
            obj("coaster", "coaster", -0.4, -0.6),
            trivet,
        ],
        rules,
        goal: goal("water", "pitcher", "coaster"),
        variants: vec![
            variant(
                BASE_VARIANT,
                None,
                vec![],
                vec![grasp.clone(), tip("mat", 1.825), wipe(), place.clone()],
                0,
            ),
            variant(
                "lid_on",
                Some(EditKind::NodeAddition),
                vec![lid_on],
                vec![take_lid, stow_lid, grasp.clone(), tip("mat", 1.825), wipe(), place.clone()],
                0,
            ),
            variant(
                "stained_bowl",
                Some(EditKind::EdgeAddition),
                vec![stained],
                vec![grasp.clone(), wipe(), tip("mat", 1.825), wipe(), place.clone()],
                1,
            ),
            variant(
                "bowl_moved",
                Some(EditKind::NodeModification),
                vec![moved],
                vec![grasp, tip("trivet", 1.825), wipe(), place],
                1,
            ),
        ],
    }
}

/// Grasp a spoon, scoop beans from a covered-or-open source bowl, dump them into
/// the bowl on the mat, wipe its rim, and rest the spoon on the rack.
pub fn scoop() -> Scenario {
    let grasp = gripper_change("spoon", 0.0, -0.3, 0.0, 1.0);
    let fill = seg(
        "source",
        &[
            [0.0, 0.3, 0.0, 1.0],
            [0.0, 0.175, 0.0, 1.0],
            [0.0, 0.05, 0.0, 1.0],
            [0.0, 0.05, 0.0, 1.0],
            [0.0, 0.05, 0.0, 1.0],
            [0.0, 0.175, 0.0, 1.0],
            [0.0, 0.3, 0.0, 1.0],
            [0.0, 0.3, 0.0, 1.0],
        ],
    );
    let rest = gripper_change("rack", -0.3, 0.0, 1.0, 0.0);
    let take_lid = gripper_change("lid", 0.3, 0.0, 0.0, 1.0);
    let stow_lid = gripper_change("tray", 0.0, 0.3, 1.0, 0.0);
    let mut rules = common_rules("spoon", "beans", vec![]);
    rules.fills.push(FillRule {
        tool: "spoon".into(),
        content: "beans".into(),
        source: "source".into(),
        region: Region {
            x: [-0.15, 0.15],
            y: [-0.1, 0.15],
        },
        tilt_max: 0.5,
        blockers: vec!["lid".into()],
    });
    rules.mounts.push(MountRule {
        object: "lid".into(),
        hosts: vec!["source".into(), "tray".into()],
        radius: 0.1,
    });
    let lid_on = on(graspable(obj("lid", "lid", 0.0, 0.0)), "source");
    let stained = on(obj("stain", "stain", 0.0, 0.02), "bowl");
    let moved = obj("bowl", "bowl", 0.7, -0.3);
    let trivet = obj("trivet", "mat", 0.7, -0.3);
    Scenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: "scoop".into(),
        bounds: BOUNDS,
        ee_start: Pose2::new(0.0, -0.9, 0.0),
        objects: vec![
            graspable(obj("spoon", "spoon", -0.7, -0.2)),
            obj("source", "bowl", -0.5, 0.6),
            on(obj("beans", "contents", 0.0, 0.0), "source"),
            on(graspable(obj("lid", "lid", 0.0, 0.0)), "tray"),
            obj("tray", "tray", 1.0, 0.9),
            obj("mat", "mat", 0.4, 0.3),
            obj("bowl", "bowl", 0.4, 0.3),
            obj("stain", "stain", DISCARD.x, DISCARD.y),
            obj("rack", "rack", -0.2, -0.7),
            trivet,
        ],
        rules,
        goal: goal("beans", "spoon", "rack"),
        variants: vec![
            variant(
                BASE_VARIANT,
                None,
                vec![],
                vec![grasp.clone(), fill.clone(), tip("mat", -1.825), wipe(), rest.clone()],
                0,
            ),
            variant(
                "lid_on",
                Some(EditKind::NodeAddition),
                vec![lid_on],
                vec![take_lid, stow_lid, grasp.clone(), fill.clone(), tip("mat", -1.825), wipe(), rest.clone()],
                0,
            ),
            variant(
                "stained_bowl",
                Some(EditKind::EdgeAddition),
                vec![stained],
                vec![grasp.clone(), fill.clone(), wipe(), tip("mat", -1.825), wipe(), rest.clone()],
                2,
            ),
            variant(
                "bowl_moved",
                Some(EditKind::NodeModification),
                vec![moved],
                vec![grasp, fill, tip("trivet", -1.825), wipe(), rest],
                2,
            ),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::DemoKind;
    use crate::sim::exec::perform;

    fn play(s: &Scenario, variant: &str, script: &[SegmentTemplate]) -> World {
        let mut w = s.initial_world(variant, 0.0, 0).unwrap();
        perform(&mut w, script, 0.0, 0, "t", DemoKind::Full).unwrap();
        w
    }

    #[test]
    fn scripts_solve_their_variants() {
        for name in Scenario::builtin_names() {
            let s = Scenario::builtin(name).unwrap();
            s.validate().unwrap();
            for v in &s.variants {
                let w = play(&s, &v.name, &v.script);
                assert!(s.goal_met(&w), "{name}/{}: {:?}", v.name, s.failed_checks(&w));
            }
        }
    }

    #[test]
    fn base_script_fails_every_other_variant() {
        for name in Scenario::builtin_names() {
            let s = Scenario::builtin(name).unwrap();
            let base = &s.variant(BASE_VARIANT).unwrap().script;
            for v in s.variants.iter().filter(|v| v.name != BASE_VARIANT) {
                assert!(v.edit_kind.is_some());
                assert!(!s.goal_met(&play(&s, &v.name, base)), "{name}/{}", v.name);
            }
        }
    }

    #[test]
    fn text_round_trip_and_version_check() {
        let s = Scenario::builtin("pour").unwrap();
        assert_eq!(Scenario::from_text(&s.to_text()).unwrap(), s);
        let mut old = s.clone();
        old.schema_version = 0;
        assert!(matches!(Scenario::from_text(&old.to_text()), Err(Error::Version { found: 0, .. })));
    }

    #[test]
    fn jitter_is_seeded_and_spares_mounted_objects() {
        let s = Scenario::builtin("scoop").unwrap();
        let a = s.initial_world("lid_on", 0.01, 7).unwrap();
        assert_eq!(a, s.initial_world("lid_on", 0.01, 7).unwrap());
        assert_ne!(a, s.initial_world("lid_on", 0.01, 8).unwrap());
        let lid = a.object("lid").unwrap();
        let host = a.pose(&lid.mount.as_ref().unwrap().host).unwrap();
        assert_eq!(lid.pose, host.compose(&lid.mount.as_ref().unwrap().offset));
    }

    #[test]
    fn unknown_reference_rejected() {
        let mut s = Scenario::builtin("pour").unwrap();
        s.variants[0].script[0].reference = "ghost".into();
        assert!(s.validate().is_err());
    }
}

//! Intersection geometry: fixed vehicle paths, their pairwise conflict points,
//! and seeded initial conditions.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

/// Two waypoints closer than this are treated as the same point.
const POINT_EPS: f64 = 1e-9;
/// Tolerance on segment parameters when testing for a crossing.
const PARAM_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("path {0} needs at least two waypoints")]
    TooFewWaypoints(usize),
    #[error("path {path}: waypoints {index} and {next} coincide", next = index + 1)]
    DuplicateWaypoint { path: usize, index: usize },
    #[error("path {path}: stop line at {stop_line_s} m is outside (0, {total_length})")]
    StopLineOutOfRange { path: usize, stop_line_s: f64, total_length: f64 },
    #[error("cannot place {requested} vehicles with {headway} m headway: {reason}")]
    Placement { requested: usize, headway: f64, reason: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    fn lerp(self, other: Point2, t: f64) -> Point2 {
        Point2::new(self.x + (other.x - self.x) * t, self.y + (other.y - self.y) * t)
    }
}

pub type PathId = usize;

/// A fixed route through the intersection, as a polyline.
///
/// `approach` and `departure` name the entrance and exit lanes; paths that
/// share one of them drive on the same physical lane for part of their length.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathGeometry {
    pub id: PathId,
    pub waypoints: Vec<Point2>,
    pub stop_line_s: f64,
    pub total_length: f64,
    pub approach: usize,
    pub departure: usize,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

impl PathGeometry {
    pub fn new(
        id: PathId,
        waypoints: Vec<Point2>,
        stop_line_s: f64,
        approach: usize,
        departure: usize,
    ) -> Result<Self, ScenarioError> {
        if waypoints.len() < 2 {
            return Err(ScenarioError::TooFewWaypoints(id));
        }
        let mut cumulative = Vec::with_capacity(waypoints.len());
        cumulative.push(0.0);
        for (index, pair) in waypoints.windows(2).enumerate() {
            let len = pair[0].distance(pair[1]);
            if len <= POINT_EPS {
                return Err(ScenarioError::DuplicateWaypoint { path: id, index });
            }
            cumulative.push(cumulative[index] + len);
        }
        let total_length = *cumulative.last().expect("non-empty");
        if !(stop_line_s > 0.0 && stop_line_s < total_length) {
            return Err(ScenarioError::StopLineOutOfRange {
                path: id,
                stop_line_s,
                total_length,
            });
        }
        Ok(Self {
            id,
            waypoints,
            stop_line_s,
            total_length,
            approach,
            departure,
            cumulative,
        })
    }

    fn segment_at(&self, s: f64) -> usize {
        // index of the segment whose start arclength is the last one <= s
        let idx = self.cumulative.partition_point(|&c| c <= s);
        idx.saturating_sub(1).min(self.waypoints.len() - 2)
    }

    /// Point at arclength `s`; beyond either end the last segment is
    /// extended in a straight line (vehicles keep moving after the path ends).
    pub fn locate(&self, s: f64) -> Point2 {
        let seg = self.segment_at(s);
        let a = self.waypoints[seg];
        let b = self.waypoints[seg + 1];
        let len = self.cumulative[seg + 1] - self.cumulative[seg];
        a.lerp(b, (s - self.cumulative[seg]) / len)
    }

    /// Unit tangent (direction of travel) at arclength `s`.
    pub fn tangent(&self, s: f64) -> (f64, f64) {
        let seg = self.segment_at(s);
        let a = self.waypoints[seg];
        let b = self.waypoints[seg + 1];
        let len = self.cumulative[seg + 1] - self.cumulative[seg];
        ((b.x - a.x) / len, (b.y - a.y) / len)
    }

    /// Projects `p` onto the polyline: returns the arclength of the closest
    /// point and the distance from `p` to it.
    pub fn project(&self, p: Point2) -> (f64, f64) {
        self.project_with(p, false)
    }

    /// As [`project`](Self::project), with the first and last segments
    /// extended to rays, so points before the start or past the end get
    /// arclengths below 0 or above the total length.
    pub fn project_extended(&self, p: Point2) -> (f64, f64) {
        self.project_with(p, true)
    }

    fn project_with(&self, p: Point2, extend: bool) -> (f64, f64) {
        let last = self.waypoints.len() - 2;
        let mut best = (0.0, f64::INFINITY);
        for (seg, pair) in self.waypoints.windows(2).enumerate() {
            let (a, b) = (pair[0], pair[1]);
            let dx = b.x - a.x;
            let dy = b.y - a.y;
            let len2 = dx * dx + dy * dy;
            let lo = if extend && seg == 0 { f64::NEG_INFINITY } else { 0.0 };
            let hi = if extend && seg == last { f64::INFINITY } else { 1.0 };
            let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(lo, hi);
            let q = a.lerp(b, t);
            let d = q.distance(p);
            if d < best.1 {
                best = (self.cumulative[seg] + t * len2.sqrt(), d);
            }
        }
        best
    }
}

/// Linear interpolation along the polyline, clamped to its endpoints.
pub fn position_on_path(path: &PathGeometry, s: f64) -> Point2 {
    if !(0.0..=path.total_length).contains(&s) {
        log::debug!(
            "position_on_path: s = {s} outside [0, {}] on path {}, clamping",
            path.total_length,
            path.id
        );
    }
    path.locate(s.clamp(0.0, path.total_length))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictPoint {
    pub path_a: PathId,
    pub path_b: PathId,
    pub s_a: f64,
    pub s_b: f64,
    pub zone_radius: f64,
}

fn segment_intersection(p: Point2, p2: Point2, q: Point2, q2: Point2) -> Option<(f64, f64)> {
    let r = (p2.x - p.x, p2.y - p.y);
    let s = (q2.x - q.x, q2.y - q.y);
    let denom = r.0 * s.1 - r.1 * s.0;
    let scale = (r.0.hypot(r.1)) * (s.0.hypot(s.1));
    if denom.abs() <= 1e-12 * scale {
        // parallel or collinear: shared lane sections are not crossings
        return None;
    }
    let qp = (q.x - p.x, q.y - p.y);
    let t = (qp.0 * s.1 - qp.1 * s.0) / denom;
    let u = (qp.0 * r.1 - qp.1 * r.0) / denom;
    let range = -PARAM_EPS..=1.0 + PARAM_EPS;
    (range.contains(&t) && range.contains(&u)).then(|| (t.clamp(0.0, 1.0), u.clamp(0.0, 1.0)))
}

/// First point (by arclength on `path_a`) where the two polylines cross or
/// merge. Points where the paths diverge after sharing a lane are not
/// conflicts.
pub fn conflict_point(
    path_a: &PathGeometry,
    path_b: &PathGeometry,
    zone_radius: f64,
) -> Option<ConflictPoint> {
    let mut candidates = Vec::new();
    for (ia, a) in path_a.waypoints.windows(2).enumerate() {
        for (ib, b) in path_b.waypoints.windows(2).enumerate() {
            if let Some((t, u)) = segment_intersection(a[0], a[1], b[0], b[1]) {
                let s_a = path_a.cumulative[ia] + t * (path_a.cumulative[ia + 1] - path_a.cumulative[ia]);
                let s_b = path_b.cumulative[ib] + u * (path_b.cumulative[ib + 1] - path_b.cumulative[ib]);
                candidates.push((s_a, s_b));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    candidates
        .into_iter()
        .find(|&(s_a, s_b)| !is_divergence(path_a, path_b, s_a, s_b))
        .map(|(s_a, s_b)| ConflictPoint {
            path_a: path_a.id,
            path_b: path_b.id,
            s_a,
            s_b,
            zone_radius,
        })
}

fn is_divergence(a: &PathGeometry, b: &PathGeometry, s_a: f64, s_b: f64) -> bool {
    // the paths coincide just before the touching point: they shared a lane
    const BACK: f64 = 0.5;
    if s_a < BACK || s_b < BACK {
        return s_a < POINT_EPS && s_b < POINT_EPS;
    }
    a.locate(s_a - BACK).distance(b.locate(s_b - BACK)) < 0.01
}

/// Intersection layout parameters for the default four-arm geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub lane_width: f64,
    /// Half-extent of the square conflict box; stop lines sit on its edges.
    pub box_half_size: f64,
    pub approach_length: f64,
    pub exit_length: f64,
    pub arc_segments: usize,
    pub zone_radius: f64,
    pub coop_radius: f64,
    /// Two paths interact where they come closer than this; collision
    /// constraints only apply there.
    pub interaction_distance: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            lane_width: 3.5,
            box_half_size: 10.0,
            approach_length: 60.0,
            exit_length: 30.0,
            arc_segments: 24,
            zone_radius: 2.0,
            coop_radius: 80.0,
            interaction_distance: DEFAULT_INTERACTION_DISTANCE,
        }
    }
}

/// Below the spacing of opposing lanes, above the centre distance at which
/// perpendicular footprints can touch.
pub const DEFAULT_INTERACTION_DISTANCE: f64 = 3.25;

/// Length over which the interaction weight fades out.
pub const INTERACTION_RAMP: f64 = 2.0;
const INTERACTION_SAMPLE: f64 = 0.25;

/// Arclength intervals of `a` that lie within `distance` of `b`.
fn proximity_intervals(a: &PathGeometry, b: &PathGeometry, distance: f64) -> Vec<(f64, f64)> {
    let steps = (a.total_length / INTERACTION_SAMPLE).ceil() as usize;
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut open: Option<f64> = None;
    for k in 0..=steps {
        let s = (k as f64 * INTERACTION_SAMPLE).min(a.total_length);
        let near = b.project(a.locate(s)).1 < distance;
        match (near, open) {
            (true, None) => open = Some((s - INTERACTION_SAMPLE).max(0.0)),
            (false, Some(start)) => {
                out.push((start, s));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(start) = open {
        out.push((start, a.total_length));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Movement {
    Left,
    Through,
    Right,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scenario {
    pub paths: Vec<PathGeometry>,
    pub conflicts: Vec<ConflictPoint>,
    pub center: Point2,
    pub coop_radius: f64,
    pub zone_radius: f64,
    #[serde(skip)]
    conflict_index: Vec<Option<usize>>,
    /// Row-major over ordered path pairs.
    #[serde(skip)]
    proximity: Vec<Vec<(f64, f64)>>,
}

impl Scenario {
    /// Builds a scenario from arbitrary paths, computing every pairwise conflict.
    pub fn from_paths(paths: Vec<PathGeometry>, center: Point2, coop_radius: f64, zone_radius: f64) -> Self {
        let n = paths.len();
        let mut conflicts = Vec::new();
        let mut conflict_index = vec![None; n * n];
        for a in 0..n {
            for b in a + 1..n {
                if paths[a].approach == paths[b].approach {
                    continue;
                }
                if let Some(cp) = conflict_point(&paths[a], &paths[b], zone_radius) {
                    conflict_index[a * n + b] = Some(conflicts.len());
                    conflict_index[b * n + a] = Some(conflicts.len());
                    conflicts.push(cp);
                }
            }
        }
        let mut scenario = Self {
            paths,
            conflicts,
            center,
            coop_radius,
            zone_radius,
            conflict_index,
            proximity: Vec::new(),
        };
        scenario.set_interaction_distance(DEFAULT_INTERACTION_DISTANCE);
        scenario
    }

    /// Recomputes where each pair of paths interacts.
    pub fn set_interaction_distance(&mut self, distance: f64) {
        let n = self.paths.len();
        self.proximity = (0..n * n)
            .map(|k| {
                let (a, b) = (k / n, k % n);
                if a == b {
                    vec![(0.0, self.paths[a].total_length)]
                } else {
                    proximity_intervals(&self.paths[a], &self.paths[b], distance)
                }
            })
            .collect();
    }

    /// Arclength intervals of path `a` lying near path `b`.
    pub fn proximity(&self, a: PathId, b: PathId) -> &[(f64, f64)] {
        &self.proximity[a * self.paths.len() + b]
    }

    /// Whether a vehicle at `s_a` on `a` and one at `s_b` on `b` are both in
    /// the region where the two paths run close to each other, or within the
    /// ramp around it.
    pub fn interacts(&self, a: PathId, s_a: f64, b: PathId, s_b: f64) -> bool {
        self.interaction_weight(a, s_a, b, s_b) > 0.0
    }

    /// 1 inside the proximity region of both vehicles, falling linearly to 0
    /// over `INTERACTION_RAMP` metres outside it.
    pub fn interaction_weight(&self, a: PathId, s_a: f64, b: PathId, s_b: f64) -> f64 {
        let inside = |p: PathId, q: PathId, s: f64| {
            let s = s.clamp(0.0, self.paths[p].total_length);
            self.proximity(p, q)
                .iter()
                .map(|&(lo, hi)| {
                    let outside = (lo - s).max(s - hi).max(0.0);
                    (1.0 - outside / INTERACTION_RAMP).max(0.0)
                })
                .fold(0.0, f64::max)
        };
        let w = inside(a, b, s_a);
        if w == 0.0 {
            return 0.0;
        }
        w.min(inside(b, a, s_b))
    }

    /// The four-arm, single-lane-per-direction unsignalized intersection with
    /// left, through and right movements from every arm (right-hand traffic).
    pub fn four_arm(geo: &GeometryConfig) -> Self {
        let h = geo.box_half_size;
        let off = geo.lane_width / 2.0;
        let mut paths = Vec::new();
        // arm k: unit vector pointing from the center out along the arm
        let arms = [(0.0, -1.0), (1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)]; // S, E, N, W
        for (k, &(ox, oy)) in arms.iter().enumerate() {
            // inbound direction of travel
            let (dx, dy) = (-ox, -oy);
            // right-hand normal of the inbound direction
            let (rx, ry) = (dy, -dx);
            let entry_far = Point2::new(ox * (h + geo.approach_length) + rx * off, oy * (h + geo.approach_length) + ry * off);
            let stop = Point2::new(ox * h + rx * off, oy * h + ry * off);
            for movement in [Movement::Left, Movement::Through, Movement::Right] {
                let exit_arm = match movement {
                    Movement::Through => (k + 2) % 4,
                    // travelling north from the south arm, a left turn leaves by the west arm
                    Movement::Left => (k + 3) % 4,
                    Movement::Right => (k + 1) % 4,
                };
                let (ex, ey) = arms[exit_arm];
                // outbound lane: right-hand side of the outbound direction (ex, ey)
                let (erx, ery) = (ey, -ex);
                let exit_near = Point2::new(ex * h + erx * off, ey * h + ery * off);
                let exit_far = Point2::new(ex * (h + geo.exit_length) + erx * off, ey * (h + geo.exit_length) + ery * off);
                let mut pts = vec![entry_far, stop];
                match movement {
                    Movement::Through => pts.push(exit_near),
                    Movement::Left | Movement::Right => {
                        // quarter circle centred on the box corner shared by both legs
                        let corner = Point2::new(ox * h + ex * h, oy * h + ey * h);
                        let radius = stop.distance(corner);
                        let a0 = (stop.y - corner.y).atan2(stop.x - corner.x);
                        let sweep = if movement == Movement::Left { -FRAC_PI_2 } else { FRAC_PI_2 };
                        // left turns sweep clockwise about the far corner, right turns
                        // counter-clockwise about the near corner; pick the sign that
                        // actually lands on exit_near
                        let end_ccw = a0 + sweep;
                        let lands = (corner.x + radius * end_ccw.cos() - exit_near.x).abs() < 1e-6
                            && (corner.y + radius * end_ccw.sin() - exit_near.y).abs() < 1e-6;
                        let sweep = if lands { sweep } else { -sweep };
                        for i in 1..geo.arc_segments {
                            let ang = a0 + sweep * i as f64 / geo.arc_segments as f64;
                            pts.push(Point2::new(corner.x + radius * ang.cos(), corner.y + radius * ang.sin()));
                        }
                        pts.push(exit_near);
                    }
                }
                pts.push(exit_far);
                let id = paths.len();
                let path = PathGeometry::new(id, pts, geo.approach_length, k, exit_arm)
                    .expect("default geometry is valid");
                paths.push(path);
            }
        }
        let mut scenario = Self::from_paths(paths, Point2::new(0.0, 0.0), geo.coop_radius, geo.zone_radius);
        if geo.interaction_distance != DEFAULT_INTERACTION_DISTANCE {
            scenario.set_interaction_distance(geo.interaction_distance);
        }
        scenario
    }

    pub fn path(&self, id: PathId) -> &PathGeometry {
        &self.paths[id]
    }

    pub fn conflict_between(&self, a: PathId, b: PathId) -> Option<&ConflictPoint> {
        let n = self.paths.len();
        self.conflict_index
            .get(a * n + b)
            .copied()
            .flatten()
            .map(|k| &self.conflicts[k])
    }

    /// Conflict arclengths ordered as (on `a`, on `b`).
    pub fn conflict_arclengths(&self, a: PathId, b: PathId) -> Option<(f64, f64)> {
        self.conflict_between(a, b).map(|cp| if cp.path_a == a { (cp.s_a, cp.s_b) } else { (cp.s_b, cp.s_a) })
    }

    /// Whether the two paths drive on a common lane somewhere (same path,
    /// same entrance lane or same exit lane).
    pub fn shares_lane(&self, a: PathId, b: PathId) -> bool {
        let (pa, pb) = (&self.paths[a], &self.paths[b]);
        a == b || pa.approach == pb.approach || pa.departure == pb.departure
    }

    pub fn export_geometry(&self) -> GeometryExport {
        GeometryExport {
            center: self.center,
            coop_radius: self.coop_radius,
            paths: self
                .paths
                .iter()
                .map(|p| PathExport {
                    id: p.id,
                    waypoints: p.waypoints.iter().map(|w| [w.x, w.y]).collect(),
                    stop_line_s: p.stop_line_s,
                    total_length: p.total_length,
                })
                .collect(),
            conflicts: self.conflicts.clone(),
        }
    }
}

/// Plot-friendly geometry document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeometryExport {
    pub center: Point2,
    pub coop_radius: f64,
    pub paths: Vec<PathExport>,
    pub conflicts: Vec<ConflictPoint>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathExport {
    pub id: PathId,
    pub waypoints: Vec<[f64; 2]>,
    pub stop_line_s: f64,
    pub total_length: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleKind {
    Cav,
    Hdv,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: usize,
    pub path: PathId,
    pub s: f64,
    pub v: f64,
    pub a: f64,
    pub kind: VehicleKind,
    pub length: f64,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpawnConfig {
    pub upstream_min: f64,
    pub upstream_max: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub min_headway: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        Self {
            upstream_min: 30.0,
            upstream_max: 50.0,
            speed_min: 6.0,
            speed_max: 10.0,
            min_headway: 10.0,
            vehicle_length: 4.5,
            vehicle_width: 2.0,
        }
    }
}

/// Number of CAVs for `n` vehicles at penetration rate `p`.
pub fn cav_count(n: usize, p: f64) -> usize {
    ((p * n as f64).round() as usize).min(n)
}

/// Places `n` vehicles upstream of their stop lines. Vehicles sharing an
/// entrance lane keep at least `min_headway` between them.
pub fn spawn_vehicles<R: Rng>(
    scenario: &Scenario,
    n: usize,
    penetration: f64,
    cfg: &SpawnConfig,
    rng: &mut R,
) -> Result<Vec<VehicleState>, ScenarioError> {
    let placement_err = |reason: String| ScenarioError::Placement {
        requested: n,
        headway: cfg.min_headway,
        reason,
    };
    let mut approaches: Vec<usize> = scenario.paths.iter().map(|p| p.approach).collect();
    approaches.sort_unstable();
    approaches.dedup();
    let per_lane = ((cfg.upstream_max - cfg.upstream_min) / cfg.min_headway).floor() as usize + 1;
    if n > per_lane * approaches.len() {
        return Err(placement_err(format!(
            "at most {per_lane} vehicles fit on each of {} entrance lanes",
            approaches.len()
        )));
    }

    let mut vehicles: Vec<VehicleState> = Vec::with_capacity(n);
    for id in 0..n {
        let mut placed = None;
        'paths: for _ in 0..200 {
            let path = &scenario.paths[rng.random_range(0..scenario.paths.len())];
            for _ in 0..20 {
                let upstream = rng.random_range(cfg.upstream_min..=cfg.upstream_max);
                let s = path.stop_line_s - upstream;
                let clear = vehicles.iter().all(|o| {
                    let op = scenario.path(o.path);
                    op.approach != path.approach || ((op.stop_line_s - o.s) - upstream).abs() >= cfg.min_headway
                });
                if clear {
                    placed = Some((path.id, s));
                    break 'paths;
                }
            }
        }
        let (path, s) = placed.ok_or_else(|| placement_err("random placement did not find free space".into()))?;
        let v = rng.random_range(cfg.speed_min..=cfg.speed_max);
        vehicles.push(VehicleState {
            id,
            path,
            s,
            v,
            a: 0.0,
            kind: VehicleKind::Hdv,
            length: cfg.vehicle_length,
            width: cfg.vehicle_width,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for &i in order.iter().take(cav_count(n, penetration)) {
        vehicles[i].kind = VehicleKind::Cav;
    }
    Ok(vehicles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn straight(id: usize, from: Point2, to: Point2, approach: usize, departure: usize) -> PathGeometry {
        let len = from.distance(to);
        PathGeometry::new(id, vec![from, to], len / 2.0, approach, departure).unwrap()
    }

    #[test]
    fn perpendicular_paths_cross_at_origin() {
        let a = straight(0, Point2::new(-40.0, 0.0), Point2::new(60.0, 0.0), 0, 0);
        let b = straight(1, Point2::new(0.0, -25.0), Point2::new(0.0, 25.0), 1, 1);
        let cp = conflict_point(&a, &b, 2.0).unwrap();
        assert!((cp.s_a - 40.0).abs() < 1e-12);
        assert!((cp.s_b - 25.0).abs() < 1e-12);
    }

    #[test]
    fn parallel_paths_do_not_conflict() {
        let a = straight(0, Point2::new(-50.0, 0.0), Point2::new(50.0, 0.0), 0, 0);
        let b = straight(1, Point2::new(-50.0, 3.5), Point2::new(50.0, 3.5), 1, 1);
        assert!(conflict_point(&a, &b, 2.0).is_none());
    }

    #[test]
    fn invalid_paths_are_rejected() {
        let p = Point2::new(0.0, 0.0);
        assert_eq!(
            PathGeometry::new(3, vec![p], 1.0, 0, 0).unwrap_err(),
            ScenarioError::TooFewWaypoints(3)
        );
        assert!(matches!(
            PathGeometry::new(0, vec![p, p, Point2::new(1.0, 0.0)], 0.5, 0, 0),
            Err(ScenarioError::DuplicateWaypoint { index: 0, .. })
        ));
        assert!(matches!(
            PathGeometry::new(0, vec![p, Point2::new(1.0, 0.0)], 1.0, 0, 0),
            Err(ScenarioError::StopLineOutOfRange { .. })
        ));
    }

    #[test]
    fn position_interpolates_and_clamps() {
        let path = straight(0, Point2::new(0.0, 0.0), Point2::new(100.0, 0.0), 0, 0);
        assert_eq!(position_on_path(&path, 0.0), Point2::new(0.0, 0.0));
        assert_eq!(position_on_path(&path, 100.0), Point2::new(100.0, 0.0));
        assert_eq!(position_on_path(&path, 25.0), Point2::new(25.0, 0.0));
        assert_eq!(position_on_path(&path, -3.0), Point2::new(0.0, 0.0));
        assert_eq!(position_on_path(&path, 130.0), Point2::new(100.0, 0.0));
        assert!(path.locate(110.0).distance(Point2::new(110.0, 0.0)) < 1e-9);
    }

    #[test]
    fn four_arm_layout() {
        let sc = Scenario::four_arm(&GeometryConfig::default());
        assert_eq!(sc.paths.len(), 12);
        for p in &sc.paths {
            assert!((p.stop_line_s - 60.0).abs() < 1e-9);
            let start = p.waypoints[0];
            assert!(start.distance(sc.center) > 60.0);
        }
        // same-entrance paths never conflict; everything is symmetric under rotation
        for cp in &sc.conflicts {
            assert_ne!(sc.paths[cp.path_a].approach, sc.paths[cp.path_b].approach);
            let pa = position_on_path(sc.path(cp.path_a), cp.s_a);
            let pb = position_on_path(sc.path(cp.path_b), cp.s_b);
            assert!(pa.distance(pb) < 0.01);
        }
        // through movements from opposite arms are parallel lanes
        let s_through = 1;
        let n_through = 7;
        assert!(sc.conflict_between(s_through, n_through).is_none());
        // south-left crosses north-through
        assert!(sc.conflict_between(0, n_through).is_some());
        assert_eq!(sc.conflicts.len() % 4, 0);
    }

    #[test]
    fn proximity_regions() {
        let sc = Scenario::four_arm(&GeometryConfig::default());
        // opposing through lanes run 3.5 m apart and never interact
        assert!(sc.proximity(1, 7).is_empty());
        assert!(!sc.interacts(1, 100.0, 7, 30.0));
        // same entrance lane: the whole approach is shared
        let shared = sc.proximity(1, 2);
        assert!(shared[0].0 == 0.0 && shared[0].1 >= 60.0);
        assert!(sc.interacts(1, 20.0, 2, 30.0));
        // a crossing only interacts around the crossing point
        let (ca, cb) = sc.conflict_arclengths(0, 7).unwrap();
        assert!(sc.interacts(0, ca, 7, cb));
        // past the shared exit end, a leader still projects onto the lane
        let (left, right) = (sc.path(0), sc.path(8));
        assert_eq!(left.departure, right.departure);
        let ahead = right.locate(right.total_length + 4.0);
        let (s, lateral) = left.project_extended(ahead);
        assert!(lateral < 1e-9 && (s - left.total_length - 4.0).abs() < 1e-9);
        assert!((left.project(ahead).0 - left.total_length).abs() < 1e-9);
        assert!(!sc.interacts(0, ca - 15.0, 7, cb));
        assert!(!sc.interacts(0, 5.0, 7, 105.0));
    }

    #[test]
    fn left_turn_conflict_matches_dense_sampling() {
        // brute-force oracle: sample both paths every 1 cm and find the closest pair
        let sc = Scenario::four_arm(&GeometryConfig::default());
        let (left, opposing_through) = (0usize, 7usize);
        let cp = sc.conflict_between(left, opposing_through).unwrap();
        let a = sc.path(left);
        let b = sc.path(opposing_through);
        let region = |p: &PathGeometry| {
            let n = ((p.total_length) / 0.01) as usize;
            (0..=n).map(|k| (k as f64 * 0.01, p.locate(k as f64 * 0.01))).collect::<Vec<_>>()
        };
        let pa = region(a);
        let pb: Vec<_> = region(b)
            .into_iter()
            .filter(|(_, p)| p.x.abs() < 12.0 && p.y.abs() < 12.0)
            .collect();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for (sa, qa) in pa.iter().filter(|(_, p)| p.x.abs() < 12.0 && p.y.abs() < 12.0) {
            for (sb, qb) in &pb {
                let d = qa.distance(*qb);
                if d < best.0 {
                    best = (d, *sa, *sb);
                }
            }
        }
        let (sa, sb) = sc.conflict_arclengths(left, opposing_through).unwrap();
        assert!(best.0 < 0.01);
        assert!((sa - best.1).abs() < 0.02, "{sa} vs {}", best.1);
        assert!((sb - best.2).abs() < 0.02, "{sb} vs {}", best.2);
        assert!(cp.zone_radius == 2.0);
    }

    #[test]
    fn spawn_counts_and_determinism() {
        let sc = Scenario::four_arm(&GeometryConfig::default());
        let cfg = SpawnConfig::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let a = spawn_vehicles(&sc, 8, 0.375, &cfg, &mut r1).unwrap();
        let b = spawn_vehicles(&sc, 8, 0.375, &cfg, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|v| v.kind == VehicleKind::Cav).count(), 3);
        let full = spawn_vehicles(&sc, 8, 1.0, &cfg, &mut r1).unwrap();
        assert!(full.iter().all(|v| v.kind == VehicleKind::Cav));
    }

    #[test]
    fn spawn_rejects_overfull_config() {
        let sc = Scenario::four_arm(&GeometryConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = spawn_vehicles(&sc, 13, 1.0, &SpawnConfig::default(), &mut rng).unwrap_err();
        assert!(matches!(err, ScenarioError::Placement { requested: 13, .. }));
    }
}

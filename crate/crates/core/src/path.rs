//! Reference paths: arc-length parameterized center-line samples, the
//! double-lane-change generator, and Cartesian/curvilinear conversions.
//!
//! Headings are stored unwrapped so that interpolation between samples never
//! crosses the ±π seam; everything handed back to callers is normalized to
//! (−π, π].

use std::f64::consts::PI;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PathError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("arc length {s} outside [0, {total}]")]
    OutOfRange { s: f64, total: f64 },
    #[error("need at least 3 waypoints, got {0}")]
    TooFewPoints(usize),
    #[error("duplicate consecutive waypoints at index {0}")]
    DuplicatePoint(usize),
    #[error("pose is {distance:.3} m from the center-line (corridor {corridor:.3} m)")]
    OutOfCorridor { distance: f64, corridor: f64 },
    #[error("projection ambiguous between s={0:.3} and s={1:.3}")]
    AmbiguousProjection(f64, f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Wraps an angle to (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let x = a.rem_euclid(2.0 * PI);
    if x > PI {
        x - 2.0 * PI
    } else {
        x
    }
}

/// One center-line sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub s: f64,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub kappa: f64,
    pub w_left: f64,
    pub w_right: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartesianPose {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl CartesianPose {
    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        Self {
            x,
            y,
            psi: normalize_angle(psi),
        }
    }
}

/// Pose relative to the center-line. `w` is positive to the left, `theta`
/// is positive counter-clockwise from the path tangent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvilinearPose {
    pub s: f64,
    pub w: f64,
    pub theta: f64,
}

/// Immutable reference path. Projection warm-start state lives in
/// [`Projector`], never here.
#[derive(Debug, Clone)]
pub struct ReferencePath {
    points: Vec<PathPoint>,
    v_ref: Vec<f64>,
}

impl ReferencePath {
    pub fn new(mut points: Vec<PathPoint>, v_ref: Vec<f64>) -> Result<Self, PathError> {
        if points.is_empty() {
            return Err(PathError::InvalidPath("no points".into()));
        }
        if v_ref.len() != points.len() {
            return Err(PathError::InvalidPath(format!(
                "{} speed samples for {} points",
                v_ref.len(),
                points.len()
            )));
        }
        for (i, p) in points.iter().enumerate() {
            let finite = [p.s, p.x, p.y, p.psi, p.kappa, p.w_left, p.w_right]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return Err(PathError::InvalidPath(format!("non-finite value at {i}")));
            }
            if p.w_left <= 0.0 || p.w_right <= 0.0 {
                return Err(PathError::InvalidPath(format!("non-positive width at {i}")));
            }
            if !(v_ref[i] > 0.0) || !v_ref[i].is_finite() {
                return Err(PathError::InvalidPath(format!("non-positive v_ref at {i}")));
            }
        }
        for i in 1..points.len() {
            if points[i].s <= points[i - 1].s {
                return Err(PathError::InvalidPath(format!(
                    "arc length not strictly increasing at {i}"
                )));
            }
            let prev = points[i - 1].psi;
            points[i].psi = prev + normalize_angle(points[i].psi - prev);
        }
        Ok(Self { points, v_ref })
    }

    pub fn points(&self) -> &[PathPoint] {
        &self.points
    }

    pub fn v_ref_samples(&self) -> &[f64] {
        &self.v_ref
    }

    pub fn start_s(&self) -> f64 {
        self.points[0].s
    }

    pub fn total_length(&self) -> f64 {
        self.points[self.points.len() - 1].s
    }

    fn check_range(&self, s: f64) -> Result<(), PathError> {
        let tol = 1e-9 * (1.0 + self.total_length().abs());
        if !s.is_finite() || s < self.start_s() - tol || s > self.total_length() + tol {
            return Err(PathError::OutOfRange {
                s,
                total: self.total_length(),
            });
        }
        Ok(())
    }

    /// Segment index and local parameter in [0, 1] for an in-range `s`.
    fn locate(&self, s: f64) -> (usize, f64) {
        let n = self.points.len();
        if n == 1 {
            return (0, 0.0);
        }
        let idx = self
            .points
            .partition_point(|p| p.s <= s)
            .saturating_sub(1)
            .min(n - 2);
        let a = &self.points[idx];
        let b = &self.points[idx + 1];
        let t = ((s - a.s) / (b.s - a.s)).clamp(0.0, 1.0);
        (idx, t)
    }

    fn interpolate(&self, idx: usize, t: f64) -> PathPoint {
        let a = &self.points[idx];
        if self.points.len() == 1 {
            return *a;
        }
        let b = &self.points[idx + 1];
        let lerp = |u: f64, v: f64| u + t * (v - u);
        PathPoint {
            s: lerp(a.s, b.s),
            x: lerp(a.x, b.x),
            y: lerp(a.y, b.y),
            psi: lerp(a.psi, b.psi),
            kappa: lerp(a.kappa, b.kappa),
            w_left: lerp(a.w_left, b.w_left),
            w_right: lerp(a.w_right, b.w_right),
        }
    }

    /// Interpolated sample at arc length `s`; heading is renormalized.
    pub fn query(&self, s: f64) -> Result<PathPoint, PathError> {
        self.check_range(s)?;
        let (idx, t) = self.locate(s);
        let mut p = self.interpolate(idx, t);
        p.psi = normalize_angle(p.psi);
        Ok(p)
    }

    pub fn v_ref_at(&self, s: f64) -> Result<f64, PathError> {
        self.check_range(s)?;
        let (idx, t) = self.locate(s);
        if self.v_ref.len() == 1 {
            return Ok(self.v_ref[0]);
        }
        Ok(self.v_ref[idx] + t * (self.v_ref[idx + 1] - self.v_ref[idx]))
    }

    /// Curvature with `s` clamped into the path; callers that need strict
    /// range checking use [`query`](Self::query).
    pub fn kappa_clamped(&self, s: f64) -> f64 {
        let s = s.clamp(self.start_s(), self.total_length());
        let (idx, t) = self.locate(s);
        self.interpolate(idx, t).kappa
    }

    /// Interpolated sample with `s` clamped into the path (heading unwrapped).
    pub fn point_clamped(&self, s: f64) -> PathPoint {
        self.interpolate_at(s)
    }

    pub fn v_ref_clamped(&self, s: f64) -> f64 {
        let s = s.clamp(self.start_s(), self.total_length());
        self.v_ref_at(s).unwrap_or(self.v_ref[0])
    }

    pub fn to_cartesian(&self, curv: &CurvilinearPose) -> Result<CartesianPose, PathError> {
        curvilinear_to_cart(curv, self)
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), PathError> {
        let mut wtr = csv::Writer::from_writer(writer);
        for (p, v) in self.points.iter().zip(&self.v_ref) {
            wtr.serialize(CsvRow {
                s: p.s,
                x_c: p.x,
                y_c: p.y,
                psi_c: normalize_angle(p.psi),
                kappa_c: p.kappa,
                w_l: p.w_left,
                w_r: p.w_right,
                v_ref: *v,
            })?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(reader: R) -> Result<Self, PathError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut points = Vec::new();
        let mut v_ref = Vec::new();
        for row in rdr.deserialize() {
            let row: CsvRow = row?;
            points.push(PathPoint {
                s: row.s,
                x: row.x_c,
                y: row.y_c,
                psi: row.psi_c,
                kappa: row.kappa_c,
                w_left: row.w_l,
                w_right: row.w_r,
            });
            v_ref.push(row.v_ref);
        }
        Self::new(points, v_ref)
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    s: f64,
    #[serde(rename = "X_c")]
    x_c: f64,
    #[serde(rename = "Y_c")]
    y_c: f64,
    psi_c: f64,
    kappa_c: f64,
    w_l: f64,
    w_r: f64,
    v_ref: f64,
}

/// Projects Cartesian poses onto a path, remembering the last arc length so
/// that successive control steps only search a few neighbouring segments.
#[derive(Debug, Clone)]
pub struct Projector {
    pub corridor: f64,
    last_s: Option<f64>,
}

/// Segments searched on either side of the warm-start segment.
const LOCAL_WINDOW: usize = 16;

impl Projector {
    pub fn new(corridor: f64) -> Self {
        Self {
            corridor,
            last_s: None,
        }
    }

    pub fn with_hint(corridor: f64, s: f64) -> Self {
        Self {
            corridor,
            last_s: Some(s),
        }
    }

    pub fn last_s(&self) -> Option<f64> {
        self.last_s
    }

    pub fn reset(&mut self) {
        self.last_s = None;
    }

    pub fn project(
        &mut self,
        path: &ReferencePath,
        pose: &CartesianPose,
    ) -> Result<CurvilinearPose, PathError> {
        let pts = path.points();
        if pts.len() < 2 {
            return Err(PathError::InvalidPath("projection needs two points".into()));
        }
        let nseg = pts.len() - 1;

        let mut best = None;
        if let Some(hint) = self.last_s {
            let (seg, _) = path.locate(hint.clamp(path.start_s(), path.total_length()));
            let lo = seg.saturating_sub(LOCAL_WINDOW);
            let hi = (seg + LOCAL_WINDOW).min(nseg - 1);
            let (b, _) = nearest_segment(pts, pose, lo, hi);
            // A minimum on the window edge may continue outside it.
            if (b > lo || lo == 0) && (b < hi || hi == nseg - 1) {
                best = Some(b);
            }
        }
        let seg = match best {
            Some(b) => b,
            None => {
                let (b, d) = nearest_segment(pts, pose, 0, nseg - 1);
                check_ambiguity(pts, pose, b, d, self.corridor)?;
                b
            }
        };

        let s = refine_foot_point(path, pose, seg);
        let c = path.interpolate_at(s);
        let (sin_c, cos_c) = c.psi.sin_cos();
        let dx = pose.x - c.x;
        let dy = pose.y - c.y;
        let distance = dx.hypot(dy);
        if distance > self.corridor {
            return Err(PathError::OutOfCorridor {
                distance,
                corridor: self.corridor,
            });
        }
        self.last_s = Some(s);
        Ok(CurvilinearPose {
            s,
            w: dy * cos_c - dx * sin_c,
            theta: normalize_angle(pose.psi - c.psi),
        })
    }
}

impl ReferencePath {
    /// Interpolated point with unwrapped heading for an in-range `s`.
    fn interpolate_at(&self, s: f64) -> PathPoint {
        let (idx, t) = self.locate(s.clamp(self.start_s(), self.total_length()));
        self.interpolate(idx, t)
    }
}

fn chord_distance(a: &PathPoint, b: &PathPoint, pose: &CartesianPose) -> f64 {
    let ex = b.x - a.x;
    let ey = b.y - a.y;
    let len2 = ex * ex + ey * ey;
    let t = if len2 > 0.0 {
        (((pose.x - a.x) * ex + (pose.y - a.y) * ey) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (pose.x - a.x - t * ex).hypot(pose.y - a.y - t * ey)
}

fn nearest_segment(pts: &[PathPoint], pose: &CartesianPose, lo: usize, hi: usize) -> (usize, f64) {
    let mut best = (lo, f64::INFINITY);
    for i in lo..=hi {
        let d = chord_distance(&pts[i], &pts[i + 1], pose);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn check_ambiguity(
    pts: &[PathPoint],
    pose: &CartesianPose,
    best: usize,
    best_d: f64,
    corridor: f64,
) -> Result<(), PathError> {
    let s_best = pts[best].s;
    for i in 0..pts.len() - 1 {
        if (pts[i].s - s_best).abs() <= 2.0 * corridor + (pts[i + 1].s - pts[i].s) {
            continue;
        }
        let d = chord_distance(&pts[i], &pts[i + 1], pose);
        if (d - best_d).abs() <= 1e-9 * (1.0 + best_d) {
            return Err(PathError::AmbiguousProjection(s_best, pts[i].s));
        }
    }
    Ok(())
}

/// Finds the arc length whose interpolated normal passes through the pose, so
/// that the inverse map reproduces the pose exactly.
fn refine_foot_point(path: &ReferencePath, pose: &CartesianPose, seg: usize) -> f64 {
    let pts = path.points();
    let g = |s: f64| {
        let c = path.interpolate_at(s);
        let (sin_c, cos_c) = c.psi.sin_cos();
        (pose.x - c.x) * cos_c + (pose.y - c.y) * sin_c
    };
    // g decreases along the path near the foot point; look for a + → − bracket
    // on this segment or a neighbour.
    let first = seg.saturating_sub(1);
    let last = (seg + 1).min(pts.len() - 2);
    let mut bracket = None;
    let mut best_gap = f64::INFINITY;
    for i in first..=last {
        let (a, b) = (pts[i].s, pts[i + 1].s);
        let (ga, gb) = (g(a), g(b));
        if ga >= 0.0 && gb <= 0.0 {
            let gap = (i as f64 - seg as f64).abs();
            if gap < best_gap {
                best_gap = gap;
                bracket = Some((a, b, ga));
            }
        }
    }
    match bracket {
        Some((mut a, mut b, mut ga)) => {
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                let gm = g(m);
                if gm == 0.0 {
                    return m;
                }
                if (gm > 0.0) == (ga > 0.0) {
                    a = m;
                    ga = gm;
                } else {
                    b = m;
                }
                if b - a <= 1e-13 * (1.0 + b.abs()) {
                    break;
                }
            }
            0.5 * (a + b)
        }
        None => {
            // Pose beyond an end of the path: fall back to the chord foot.
            let (a, b) = (&pts[seg], &pts[seg + 1]);
            let ex = b.x - a.x;
            let ey = b.y - a.y;
            let t =
                (((pose.x - a.x) * ex + (pose.y - a.y) * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
            a.s + t * (b.s - a.s)
        }
    }
}

/// One-shot projection without warm start.
pub fn cart_to_curvilinear(
    pose: &CartesianPose,
    path: &ReferencePath,
    corridor: f64,
) -> Result<CurvilinearPose, PathError> {
    Projector::new(corridor).project(path, pose)
}

pub fn curvilinear_to_cart(
    curv: &CurvilinearPose,
    path: &ReferencePath,
) -> Result<CartesianPose, PathError> {
    path.check_range(curv.s)?;
    let c = path.interpolate_at(curv.s);
    let (sin_c, cos_c) = c.psi.sin_cos();
    Ok(CartesianPose {
        x: c.x - curv.w * sin_c,
        y: c.y + curv.w * cos_c,
        psi: normalize_angle(curv.theta + c.psi),
    })
}

/// Derivative at `t` of the quadratic through three samples.
fn lagrange_slope(s: [f64; 3], f: [f64; 3], t: f64) -> f64 {
    f[0] * (2.0 * t - s[1] - s[2]) / ((s[0] - s[1]) * (s[0] - s[2]))
        + f[1] * (2.0 * t - s[0] - s[2]) / ((s[1] - s[0]) * (s[1] - s[2]))
        + f[2] * (2.0 * t - s[0] - s[1]) / ((s[2] - s[0]) * (s[2] - s[1]))
}

fn stencil(i: usize, n: usize) -> usize {
    if i == 0 {
        0
    } else if i == n - 1 {
        n - 3
    } else {
        i - 1
    }
}

/// Heading and signed curvature of a polyline, using three-point derivatives
/// over chord-length arc length (one-sided at the ends).
pub fn curvature_from_waypoints(xy: &[(f64, f64)]) -> Result<(Vec<f64>, Vec<f64>), PathError> {
    let n = xy.len();
    if n < 3 {
        return Err(PathError::TooFewPoints(n));
    }
    let mut s = vec![0.0; n];
    for i in 1..n {
        let d = (xy[i].0 - xy[i - 1].0).hypot(xy[i].1 - xy[i - 1].1);
        if d <= 0.0 {
            return Err(PathError::DuplicatePoint(i));
        }
        s[i] = s[i - 1] + d;
    }

    let mut psi = vec![0.0; n];
    for i in 0..n {
        let k = stencil(i, n);
        let ss = [s[k], s[k + 1], s[k + 2]];
        let dx = lagrange_slope(ss, [xy[k].0, xy[k + 1].0, xy[k + 2].0], s[i]);
        let dy = lagrange_slope(ss, [xy[k].1, xy[k + 1].1, xy[k + 2].1], s[i]);
        psi[i] = dy.atan2(dx);
        if i > 0 {
            psi[i] = psi[i - 1] + normalize_angle(psi[i] - psi[i - 1]);
        }
    }

    let kappa = (0..n)
        .map(|i| {
            let k = stencil(i, n);
            lagrange_slope(
                [s[k], s[k + 1], s[k + 2]],
                [psi[k], psi[k + 1], psi[k + 2]],
                s[i],
            )
        })
        .collect();
    Ok((psi.into_iter().map(normalize_angle).collect(), kappa))
}

/// Double-lane-change layout. Section order per maneuver: approach, shift
/// into the side lane, side lane, shift back, exit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DlcGeometry {
    pub section_lengths: [f64; 5],
    pub lane_offset: f64,
    pub entry_speed: f64,
    pub repeats: usize,
    pub half_width_left: f64,
    pub half_width_right: f64,
}

fn default_half_width() -> f64 {
    2.0
}

impl Default for DlcGeometry {
    fn default() -> Self {
        Self {
            section_lengths: [50.0, 50.0, 25.0, 50.0, 75.0],
            lane_offset: 3.5,
            entry_speed: 80.0 / 3.6,
            repeats: 4,
            half_width_left: default_half_width(),
            half_width_right: default_half_width(),
        }
    }
}

impl DlcGeometry {
    pub fn maneuver_length(&self) -> f64 {
        self.section_lengths.iter().sum()
    }
}

#[derive(Debug, Clone, Copy)]
enum Piece {
    Straight,
    /// Heading `a·(1 − cos(2πσ/L))`, curvature continuous and zero at both ends.
    Shift {
        amplitude: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct Section {
    start: f64,
    length: f64,
    piece: Piece,
}

impl Section {
    fn heading(&self, s: f64) -> (f64, f64) {
        match self.piece {
            Piece::Straight => (0.0, 0.0),
            Piece::Shift { amplitude } => {
                let omega = 2.0 * PI / self.length;
                let u = omega * (s - self.start);
                (amplitude * (1.0 - u.cos()), amplitude * omega * u.sin())
            }
        }
    }
}

/// Lateral displacement of a shift section per unit length, as a function of
/// the heading amplitude. The integrand is periodic, so the trapezoid rule
/// converges spectrally.
fn shift_offset_ratio(amplitude: f64) -> f64 {
    const M: usize = 512;
    (0..M)
        .map(|k| {
            let u = 2.0 * PI * k as f64 / M as f64;
            (amplitude * (1.0 - u.cos())).sin()
        })
        .sum::<f64>()
        / M as f64
}

fn shift_amplitude(offset: f64, length: f64) -> Result<f64, PathError> {
    let target = offset.abs() / length;
    let max_amp = PI / 4.0;
    if target >= shift_offset_ratio(max_amp) {
        return Err(PathError::InvalidGeometry(format!(
            "lane offset {offset} too large for a {length} m transition"
        )));
    }
    let (mut lo, mut hi) = (0.0, max_amp);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if shift_offset_ratio(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(offset.signum() * 0.5 * (lo + hi))
}

/// Builds `repeats` successive double lane changes at constant reference speed.
pub fn build_dlc_path(geom: &DlcGeometry, sample_spacing: f64) -> Result<ReferencePath, PathError> {
    if geom
        .section_lengths
        .iter()
        .any(|l| !(*l > 0.0) || !l.is_finite())
    {
        return Err(PathError::InvalidGeometry(
            "section lengths must be positive".into(),
        ));
    }
    if geom.repeats == 0 {
        return Err(PathError::InvalidGeometry(
            "repeats must be at least 1".into(),
        ));
    }
    if !(geom.entry_speed > 0.0) || !geom.lane_offset.is_finite() {
        return Err(PathError::InvalidGeometry(
            "bad speed or lane offset".into(),
        ));
    }
    if !(geom.half_width_left > 0.0 && geom.half_width_right > 0.0) {
        return Err(PathError::InvalidGeometry(
            "track half-widths must be positive".into(),
        ));
    }
    let min_len = geom
        .section_lengths
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !(sample_spacing > 0.0) || sample_spacing > 0.5 * min_len {
        return Err(PathError::InvalidGeometry(format!(
            "sample spacing {sample_spacing} must be positive and well below {min_len}"
        )));
    }

    let [l1, l2, l3, l4, l5] = geom.section_lengths;
    let amp_in = if geom.lane_offset == 0.0 {
        0.0
    } else {
        shift_amplitude(geom.lane_offset, l2)?
    };
    let amp_out = if geom.lane_offset == 0.0 {
        0.0
    } else {
        shift_amplitude(-geom.lane_offset, l4)?
    };

    let mut sections = Vec::with_capacity(5 * geom.repeats);
    let mut start = 0.0;
    for _ in 0..geom.repeats {
        for (length, piece) in [
            (l1, Piece::Straight),
            (l2, Piece::Shift { amplitude: amp_in }),
            (l3, Piece::Straight),
            (l4, Piece::Shift { amplitude: amp_out }),
            (l5, Piece::Straight),
        ] {
            sections.push(Section {
                start,
                length,
                piece,
            });
            start += length;
        }
    }
    let total = start;

    let heading_at = |s: f64| -> (f64, f64) {
        let idx = sections
            .partition_point(|sec| sec.start <= s)
            .saturating_sub(1)
            .min(sections.len() - 1);
        sections[idx].heading(s)
    };

    let mut stations: Vec<f64> = Vec::new();
    let mut k = 0usize;
    loop {
        let s = k as f64 * sample_spacing;
        if s >= total - 1e-9 * sample_spacing {
            break;
        }
        stations.push(s);
        k += 1;
    }
    stations.push(total);

    // Integrate position piecewise, splitting at section boundaries where the
    // heading has a kink in its second derivative.
    let boundaries: Vec<f64> = sections.iter().map(|s| s.start).chain([total]).collect();
    let integrate = |a: f64, b: f64| -> (f64, f64) {
        let mut knots = vec![a];
        knots.extend(boundaries.iter().cloned().filter(|&x| x > a && x < b));
        knots.push(b);
        let mut acc = (0.0, 0.0);
        for w in knots.windows(2) {
            const M: usize = 16;
            let h = (w[1] - w[0]) / M as f64;
            for j in 0..=M {
                let coef = if j == 0 || j == M {
                    1.0
                } else if j % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                let (psi, _) = heading_at(w[0] + j as f64 * h);
                acc.0 += coef * h / 3.0 * psi.cos();
                acc.1 += coef * h / 3.0 * psi.sin();
            }
        }
        acc
    };

    let mut points = Vec::with_capacity(stations.len());
    let (mut x, mut y) = (0.0, 0.0);
    for (i, &s) in stations.iter().enumerate() {
        if i > 0 {
            let (dx, dy) = integrate(stations[i - 1], s);
            x += dx;
            y += dy;
        }
        let (psi, kappa) = heading_at(s);
        points.push(PathPoint {
            s,
            x,
            y,
            psi,
            kappa,
            w_left: geom.half_width_left,
            w_right: geom.half_width_right,
        });
    }
    let v_ref = vec![geom.entry_speed; points.len()];
    ReferencePath::new(points, v_ref)
}

/// Straight path along +X, used by tests and benchmarks.
pub fn straight_path(length: f64, spacing: f64, speed: f64, half_width: f64) -> ReferencePath {
    let n = (length / spacing).round().max(1.0) as usize;
    let points = (0..=n)
        .map(|i| {
            let s = length * i as f64 / n as f64;
            PathPoint {
                s,
                x: s,
                y: 0.0,
                psi: 0.0,
                kappa: 0.0,
                w_left: half_width,
                w_right: half_width,
            }
        })
        .collect::<Vec<_>>();
    let v = vec![speed; points.len()];
    ReferencePath::new(points, v).expect("straight path is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn circle_xy(radius: f64, spacing: f64, n: usize, ccw: bool) -> Vec<(f64, f64)> {
        let dphi = spacing / radius;
        (0..n)
            .map(|i| {
                let phi = i as f64 * dphi;
                if ccw {
                    (radius * phi.sin(), radius * (1.0 - phi.cos()))
                } else {
                    (radius * phi.sin(), -radius * (1.0 - phi.cos()))
                }
            })
            .collect()
    }

    fn circle_path(radius: f64, spacing: f64, n: usize) -> ReferencePath {
        let xy = circle_xy(radius, spacing, n, true);
        let points = xy
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| PathPoint {
                s: i as f64 * spacing,
                x,
                y,
                psi: i as f64 * spacing / radius,
                kappa: 1.0 / radius,
                w_left: 3.0,
                w_right: 3.0,
            })
            .collect::<Vec<_>>();
        let v = vec![10.0; points.len()];
        ReferencePath::new(points, v).unwrap()
    }

    #[test]
    fn normalize_angle_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn straight_waypoints_have_zero_curvature() {
        let xy: Vec<_> = (0..20)
            .map(|i| (i as f64 * 0.7, 2.0 + i as f64 * 0.3))
            .collect();
        let (_, kappa) = curvature_from_waypoints(&xy).unwrap();
        assert!(kappa.iter().all(|k| k.abs() < 1e-12));
    }

    #[test]
    fn circle_curvature_sign_follows_direction() {
        let (_, k) = curvature_from_waypoints(&circle_xy(50.0, 0.5, 200, true)).unwrap();
        assert!(k.iter().all(|k| (k - 0.02).abs() < 1e-4), "{:?}", &k[..3]);
        let (_, k) = curvature_from_waypoints(&circle_xy(50.0, 0.5, 200, false)).unwrap();
        assert!(k.iter().all(|k| (k + 0.02).abs() < 1e-4));
    }

    #[test]
    fn waypoint_errors() {
        assert!(matches!(
            curvature_from_waypoints(&[(0.0, 0.0), (1.0, 0.0)]),
            Err(PathError::TooFewPoints(2))
        ));
        assert!(matches!(
            curvature_from_waypoints(&[(0.0, 0.0), (1.0, 0.0), (1.0, 0.0)]),
            Err(PathError::DuplicatePoint(2))
        ));
    }

    #[test]
    fn query_endpoints_and_midpoint() {
        let path = straight_path(10.0, 1.0, 5.0, 2.0);
        assert_eq!(path.query(0.0).unwrap(), path.points()[0]);
        assert_eq!(path.query(10.0).unwrap(), *path.points().last().unwrap());
        let mid = path.query(3.5).unwrap();
        assert!((mid.x - 3.5).abs() < 1e-12 && mid.y == 0.0);
        assert!(matches!(
            path.query(10.5),
            Err(PathError::OutOfRange { .. })
        ));
        assert!(path.query(-0.1).is_err());
    }

    #[test]
    fn straight_projection_example() {
        let path = straight_path(20.0, 0.5, 5.0, 2.0);
        let c = cart_to_curvilinear(&CartesianPose::new(5.0, 1.0, 0.0), &path, 3.0).unwrap();
        assert!((c.s - 5.0).abs() < 1e-12);
        assert!((c.w - 1.0).abs() < 1e-12);
        assert_eq!(c.theta, 0.0);
        let start = curvilinear_to_cart(
            &CurvilinearPose {
                s: 0.0,
                w: 0.0,
                theta: 0.0,
            },
            &path,
        )
        .unwrap();
        assert_eq!((start.x, start.y, start.psi), (0.0, 0.0, 0.0));
    }

    #[test]
    fn circle_offsets_follow_left_positive_convention() {
        let path = circle_path(50.0, 0.5, 300);
        let p = path.query(60.0).unwrap();
        // Counter-clockwise circle: the centre, and "inward", lies to the left.
        for (d, expected) in [(1.0, 1.0), (-1.0, -1.0)] {
            let pose = CartesianPose::new(p.x - d * p.psi.sin(), p.y + d * p.psi.cos(), p.psi);
            let c = cart_to_curvilinear(&pose, &path, 3.0).unwrap();
            assert!((c.w - expected).abs() < 1e-3, "w = {}", c.w);
            assert!((c.s - 60.0).abs() < 1e-2);
        }
    }

    #[test]
    fn out_of_corridor_is_rejected() {
        let path = straight_path(20.0, 0.5, 5.0, 2.0);
        let err = cart_to_curvilinear(&CartesianPose::new(5.0, 4.0, 0.0), &path, 3.0);
        assert!(matches!(err, Err(PathError::OutOfCorridor { .. })));
    }

    #[test]
    fn ambiguous_projection_is_flagged() {
        // U-turn: two parallel legs 10 m apart, pose exactly between them.
        let mut xy = Vec::new();
        for i in 0..=40 {
            xy.push((i as f64, 0.0));
        }
        for k in 1..=31 {
            let phi = -PI / 2.0 + PI * k as f64 / 32.0;
            xy.push((40.0 + 5.0 * phi.cos(), 5.0 + 5.0 * phi.sin()));
        }
        for i in 0..=40 {
            xy.push((40.0 - i as f64, 10.0));
        }
        let (psi, kappa) = curvature_from_waypoints(&xy).unwrap();
        let mut s = 0.0;
        let points = xy
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                if i > 0 {
                    s += (x - xy[i - 1].0).hypot(y - xy[i - 1].1);
                }
                PathPoint {
                    s,
                    x,
                    y,
                    psi: psi[i],
                    kappa: kappa[i],
                    w_left: 6.0,
                    w_right: 6.0,
                }
            })
            .collect::<Vec<_>>();
        let v = vec![1.0; points.len()];
        let path = ReferencePath::new(points, v).unwrap();
        let err = cart_to_curvilinear(&CartesianPose::new(10.0, 5.0, 0.0), &path, 6.0);
        assert!(
            matches!(err, Err(PathError::AmbiguousProjection(..))),
            "{err:?}"
        );
    }

    #[test]
    fn dlc_speed_and_length() {
        let geom = DlcGeometry {
            entry_speed: 22.22,
            ..DlcGeometry::default()
        };
        let path = build_dlc_path(&geom, 0.5).unwrap();
        assert!(path.v_ref_samples().iter().all(|v| *v == 22.22));

        let geom2 = DlcGeometry {
            repeats: 2,
            ..DlcGeometry::default()
        };
        let expected: f64 = 2.0 * geom2.section_lengths.iter().sum::<f64>();
        let path2 = build_dlc_path(&geom2, 0.3).unwrap();
        assert!((path2.total_length() - expected).abs() <= 0.3);
    }

    #[test]
    fn dlc_reaches_lane_offset() {
        let geom = DlcGeometry::default();
        let path = build_dlc_path(&geom, 0.25).unwrap();
        let [l1, l2, l3, ..] = geom.section_lengths;
        let side = path.query(l1 + l2 + 0.5 * l3).unwrap();
        assert!((side.y - geom.lane_offset).abs() < 1e-6, "y = {}", side.y);
        let end = path.query(geom.maneuver_length()).unwrap();
        assert!(end.y.abs() < 1e-6 && end.psi.abs() < 1e-12);
    }

    #[test]
    fn zero_offset_is_straight() {
        let geom = DlcGeometry {
            lane_offset: 0.0,
            ..DlcGeometry::default()
        };
        let path = build_dlc_path(&geom, 0.5).unwrap();
        assert!(path.points().iter().all(|p| p.kappa == 0.0 && p.y == 0.0));
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut geom = DlcGeometry::default();
        geom.section_lengths[2] = 0.0;
        assert!(matches!(
            build_dlc_path(&geom, 0.5),
            Err(PathError::InvalidGeometry(_))
        ));
        let geom = DlcGeometry {
            repeats: 0,
            ..DlcGeometry::default()
        };
        assert!(build_dlc_path(&geom, 0.5).is_err());
        assert!(build_dlc_path(&DlcGeometry::default(), -1.0).is_err());
        let geom = DlcGeometry {
            lane_offset: 40.0,
            ..DlcGeometry::default()
        };
        assert!(build_dlc_path(&geom, 0.5).is_err());
    }

    #[test]
    fn curvature_integrates_to_heading() {
        let geom = DlcGeometry::default();
        let path = build_dlc_path(&geom, 0.25).unwrap();
        let pts = path.points();
        let mut bounds = vec![0.0];
        let mut acc = 0.0;
        for _ in 0..geom.repeats {
            for l in geom.section_lengths {
                acc += l;
                bounds.push(acc);
            }
        }
        for w in bounds.windows(2) {
            let seg: Vec<_> = pts
                .iter()
                .filter(|p| p.s >= w[0] - 1e-9 && p.s <= w[1] + 1e-9)
                .collect();
            let integral: f64 = seg
                .windows(2)
                .map(|p| 0.5 * (p[0].kappa + p[1].kappa) * (p[1].s - p[0].s))
                .sum();
            let dpsi = seg.last().unwrap().psi - seg[0].psi;
            assert!((integral - dpsi).abs() < 1e-3, "{integral} vs {dpsi}");
        }
    }

    #[test]
    fn dlc_curvature_matches_samples() {
        let path = build_dlc_path(&DlcGeometry::default(), 0.25).unwrap();
        let xy: Vec<_> = path.points().iter().map(|p| (p.x, p.y)).collect();
        let (psi, kappa) = curvature_from_waypoints(&xy).unwrap();
        for ((p, h), k) in path.points().iter().zip(&psi).zip(&kappa) {
            assert!(normalize_angle(p.psi - h).abs() < 1e-4);
            assert!((p.kappa - k).abs() < 1e-4);
        }
    }

    #[test]
    fn csv_round_trip() {
        let path = build_dlc_path(
            &DlcGeometry {
                repeats: 1,
                ..Default::default()
            },
            1.0,
        )
        .unwrap();
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let header = std::str::from_utf8(&buf)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string();
        assert_eq!(header, "s,X_c,Y_c,psi_c,kappa_c,w_l,w_r,v_ref");
        let back = ReferencePath::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.points().len(), path.points().len());
        for (a, b) in back.points().iter().zip(path.points()) {
            assert_eq!((a.s, a.x, a.y, a.kappa), (b.s, b.x, b.y, b.kappa));
            assert!(normalize_angle(a.psi - b.psi).abs() < 1e-15);
        }
    }

    #[test]
    fn warm_started_projection_matches_global() {
        let path = build_dlc_path(&DlcGeometry::default(), 0.5).unwrap();
        let mut proj = Projector::new(5.0);
        for i in 0..400 {
            let s = i as f64 * 2.3;
            let p = path.query(s).unwrap();
            let pose = CartesianPose::new(p.x - 0.4 * p.psi.sin(), p.y + 0.4 * p.psi.cos(), p.psi);
            let warm = proj.project(&path, &pose).unwrap();
            let cold = cart_to_curvilinear(&pose, &path, 5.0).unwrap();
            assert!((warm.s - cold.s).abs() < 1e-9 && (warm.w - 0.4).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn dlc_round_trip(s in 0.0f64..990.0, w in -1.8f64..1.8, theta in -1.0f64..1.0) {
            let path = dlc_quarter_metre();
            let curv = CurvilinearPose { s, w, theta };
            let cart = curvilinear_to_cart(&curv, path).unwrap();
            let back = cart_to_curvilinear(&cart, path, 5.0).unwrap();
            let again = curvilinear_to_cart(&back, path).unwrap();
            prop_assert!((again.x - cart.x).hypot(again.y - cart.y) < 1e-3);
            prop_assert!((back.w - w).abs() < 1e-3);
        }

        #[test]
        fn on_path_poses_have_zero_offset(s in 0.0f64..1000.0) {
            let path = dlc_quarter_metre();
            let p = path.query(s).unwrap();
            let c = cart_to_curvilinear(&CartesianPose::new(p.x, p.y, p.psi), path, 5.0).unwrap();
            prop_assert!(c.w.abs() < 1e-9 && c.theta.abs() < 1e-9);
        }

        #[test]
        fn straight_round_trip_is_exact(x in 0.0f64..50.0, y in -2.0f64..2.0, psi in -3.0f64..3.0) {
            let path = straight_path(50.0, 0.5, 10.0, 3.0);
            let c = cart_to_curvilinear(&CartesianPose::new(x, y, psi), &path, 3.0).unwrap();
            let back = curvilinear_to_cart(&c, &path).unwrap();
            prop_assert!((back.x - x).abs() < 1e-6 && (back.y - y).abs() < 1e-6);
            prop_assert!(normalize_angle(back.psi - psi).abs() < 1e-12);
        }
    }

    fn dlc_quarter_metre() -> &'static ReferencePath {
        use std::sync::OnceLock;
        static PATH: OnceLock<ReferencePath> = OnceLock::new();
        PATH.get_or_init(|| build_dlc_path(&DlcGeometry::default(), 0.25).unwrap())
    }
}

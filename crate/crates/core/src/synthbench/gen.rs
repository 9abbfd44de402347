//! Seeded generators for the three synthetic domains.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3, Vector4};
use rand::Rng;

use crate::distill::{Frames, Sample};
use crate::pcdata::{Domain, PointCloud, NORMAL_BIT};
use crate::rng::{normal, rng_for, PfRng};

const OBJECT_STREAM: u64 = 0x0b1;
const INDOOR_STREAM: u64 = 0x1d0;
const OUTDOOR_STREAM: u64 = 0x0d0;

/// Object part kinds; the label of a point is its part's kind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Box { center: [f64; 3], half: [f64; 3] },
    /// Axis along z.
    Cylinder { center: [f64; 3], radius: f64, half_height: f64 },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Primitive {
    pub fn label(&self) -> i32 {
        match self {
            Primitive::Box { .. } => 0,
            Primitive::Cylinder { .. } => 1,
            Primitive::Sphere { .. } => 2,
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Box { half: h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Primitive::Cylinder { radius: r, half_height: h, .. } => 2.0 * PI * r * (2.0 * h) + 2.0 * PI * r * r,
            Primitive::Sphere { radius: r, .. } => 4.0 * PI * r * r,
        }
    }

    /// A uniform surface point and its outward normal.
    pub fn sample_surface(&self, rng: &mut PfRng) -> ([f64; 3], [f64; 3]) {
        match *self {
            Primitive::Box { center: c, half: h } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total: f64 = areas.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut axis = 2;
                for (a, w) in areas.iter().enumerate() {
                    if u < *w {
                        axis = a;
                        break;
                    }
                    u -= w;
                }
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                let mut n = [0.0; 3];
                for a in 0..3 {
                    p[a] = c[a] + if a == axis { sign * h[a] } else { rng.random_range(-h[a]..=h[a]) };
                }
                n[axis] = sign;
                (p, n)
            }
            Primitive::Cylinder { center: c, radius: r, half_height: h } => {
                let side = 4.0 * PI * r * h;
                let caps = 2.0 * PI * r * r;
                if rng.random::<f64>() * (side + caps) < side {
                    let t = rng.random_range(0.0..2.0 * PI);
                    let (s, co) = t.sin_cos();
                    ([c[0] + r * co, c[1] + r * s, c[2] + rng.random_range(-h..=h)], [co, s, 0.0])
                } else {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let rho = r * rng.random::<f64>().sqrt();
                    let t = rng.random_range(0.0..2.0 * PI);
                    ([c[0] + rho * t.cos(), c[1] + rho * t.sin(), c[2] + sign * h], [0.0, 0.0, sign])
                }
            }
            Primitive::Sphere { center: c, radius: r } => {
                let d = unit_vector(rng);
                ([c[0] + r * d[0], c[1] + r * d[1], c[2] + r * d[2]], d)
            }
        }
    }
}

fn unit_vector(rng: &mut PfRng) -> [f64; 3] {
    loop {
        let v = [normal(rng), normal(rng), normal(rng)];
        let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if l > 1e-9 {
            return v.map(|c| c / l);
        }
    }
}

/// Uniformly distributed rotation.
pub fn random_rotation(rng: &mut PfRng) -> Matrix3<f64> {
    let q = Vector4::new(normal(rng), normal(rng), normal(rng), normal(rng));
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from_vector(q));
    q.to_rotation_matrix().into_inner()
}

fn mul(m: &Matrix3<f64>, v: [f64; 3]) -> [f64; 3] {
    let r = m * Vector3::from(v);
    [r[0], r[1], r[2]]
}

/// Rounds every channel to f32 so native files reproduce the cloud exactly.
fn to_f32(pc: &mut PointCloud) {
    for rows in [&mut pc.coords, &mut pc.colors, &mut pc.normals] {
        for row in rows.iter_mut() {
            *row = row.map(|v| v as f32 as f64);
        }
    }
}

fn jitter_color(base: [f64; 3], rng: &mut PfRng) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0))
}

const PART_COLORS: [[f64; 3]; 3] = [[0.8, 0.3, 0.2], [0.2, 0.6, 0.8], [0.3, 0.8, 0.3]];

/// Surface samples of `parts` with `n` points in total, allocated by area.
/// Coordinates are left in the parts' frame.
pub fn sample_parts(parts: &[Primitive], n: usize, colored: bool, rng: &mut PfRng) -> PointCloud {
    let areas: Vec<f64> = parts.iter().map(|p| p.area()).collect();
    let total: f64 = areas.iter().sum();
    let mut coords = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = rng.random::<f64>() * total;
        let mut k = parts.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if u < *a {
                k = i;
                break;
            }
            u -= a;
        }
        let (p, nrm) = parts[k].sample_surface(rng);
        coords.push(p);
        normals.push(nrm);
        labels.push(parts[k].label());
        colors.push(jitter_color(PART_COLORS[parts[k].label() as usize], rng));
    }
    let pc = PointCloud::new(coords, Domain::Object, Domain::Object.default_native_grid())
        .with_normals(normals)
        .with_labels(labels);
    if colored {
        pc.with_colors(colors)
    } else {
        pc
    }
}

/// Object before its random pose, together with that pose.
pub struct PreposeObject {
    pub parts: Vec<Primitive>,
    pub cloud: PointCloud,
    pub rotation: Matrix3<f64>,
}

fn random_part(rng: &mut PfRng) -> Primitive {
    let center = [0; 3].map(|_| rng.random_range(-0.5..0.5));
    match rng.random_range(0..3) {
        0 => Primitive::Box {
            center,
            half: [0; 3].map(|_| rng.random_range(0.08..0.35)),
        },
        1 => Primitive::Cylinder {
            center,
            radius: rng.random_range(0.06..0.25),
            half_height: rng.random_range(0.1..0.4),
        },
        _ => Primitive::Sphere {
            center,
            radius: rng.random_range(0.1..0.3),
        },
    }
}

/// Parts, unit-ball normalized samples and the pose of object `seed`.
pub fn gen_object_prepose(seed: u64) -> PreposeObject {
    let mut rng = rng_for(&[OBJECT_STREAM, seed]);
    let parts: Vec<Primitive> = (0..rng.random_range(2..=5)).map(|_| random_part(&mut rng)).collect();
    let n = rng.random_range(1000..=4000);
    let colored = rng.random::<f64>() < 0.5;
    let rotation = random_rotation(&mut rng);
    let mut cloud = sample_parts(&parts, n, colored, &mut rng);
    normalize_unit_ball(&mut cloud);
    PreposeObject { parts, cloud, rotation }
}

/// Centers on the centroid and scales the farthest point to radius 1.
pub fn normalize_unit_ball(pc: &mut PointCloud) {
    let c = pc.centroid();
    let r = pc
        .coords
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    let s = if r > 0.0 { 1.0 / r } else { 1.0 };
    for p in &mut pc.coords {
        *p = [(p[0] - c[0]) * s, (p[1] - c[1]) * s, (p[2] - c[2]) * s];
    }
}

/// Object-centric cloud: 2–5 primitive parts, 1–4k surface points inside
/// the unit ball, a random rotation, colors on half of the objects.
pub fn gen_object(seed: u64) -> PointCloud {
    let obj = gen_object_prepose(seed);
    let mut pc = obj.cloud;
    for (p, n) in pc.coords.iter_mut().zip(pc.normals.iter_mut()) {
        *p = mul(&obj.rotation, *p);
        *n = mul(&obj.rotation, *n);
    }
    to_f32(&mut pc);
    pc
}

pub const FLOOR: i32 = 0;
pub const WALL: i32 = 1;
pub const FURNITURE: i32 = 2;

/// Room cloud in world coordinates and the frames that cover it.
#[derive(Clone, Debug, PartialEq)]
pub struct IndoorScene {
    pub cloud: PointCloud,
    pub frames: Frames,
}

impl IndoorScene {
    pub fn into_sample(self) -> Sample {
        Sample::with_frames(self.cloud, self.frames)
    }
}

struct Patch {
    /// Corner, two edge vectors and the normal.
    origin: [f64; 3],
    u: [f64; 3],
    v: [f64; 3],
    normal: [f64; 3],
    label: i32,
    color: [f64; 3],
}

impl Patch {
    fn area(&self) -> f64 {
        let c = Vector3::from(self.u).cross(&Vector3::from(self.v));
        c.norm()
    }
}

fn box_patches(center: [f64; 2], half: [f64; 3], yaw: f64, color: [f64; 3], out: &mut Vec<Patch>) {
    let (s, c) = yaw.sin_cos();
    let ex = [c, s, 0.0];
    let ey = [-s, c, 0.0];
    let base = [center[0], center[1], 0.0];
    let at = |a: f64, b: f64, z: f64| [base[0] + a * ex[0] + b * ey[0], base[1] + a * ex[1] + b * ey[1], z];
    let h = 2.0 * half[2];
    let sx = ex.map(|v| v * 2.0 * half[0]);
    let sy = ey.map(|v| v * 2.0 * half[1]);
    let up = [0.0, 0.0, h];
    let neg = |v: [f64; 3]| v.map(|c| -c);
    let faces = [
        (at(-half[0], -half[1], h), sx, sy, [0.0, 0.0, 1.0]),
        (at(half[0], -half[1], 0.0), sy, up, ex),
        (at(-half[0], -half[1], 0.0), sy, up, neg(ex)),
        (at(-half[0], half[1], 0.0), sx, up, ey),
        (at(-half[0], -half[1], 0.0), sx, up, neg(ey)),
    ];
    for (origin, u, v, normal) in faces {
        out.push(Patch {
            origin,
            u,
            v,
            normal,
            label: FURNITURE,
            color,
        });
    }
}

/// Room with floor, four walls and 3–8 boxes, 5–10 m across, z up.
/// The whole room is also split into 2–4 overlapping frames, each stored in
/// its own coordinates with a rigid pose back to the room.
pub fn gen_indoor(seed: u64) -> IndoorScene {
    let mut rng = rng_for(&[INDOOR_STREAM, seed]);
    let lx = rng.random_range(5.0..10.0);
    let ly = rng.random_range(5.0..10.0);
    let height = rng.random_range(2.5..3.0);
    let floor_c = [0.55, 0.4, 0.25];
    let wall_c = [0.85, 0.85, 0.8];
    let mut patches = vec![
        Patch {
            origin: [0.0, 0.0, 0.0],
            u: [lx, 0.0, 0.0],
            v: [0.0, ly, 0.0],
            normal: [0.0, 0.0, 1.0],
            label: FLOOR,
            color: floor_c,
        },
        Patch {
            origin: [0.0, 0.0, 0.0],
            u: [lx, 0.0, 0.0],
            v: [0.0, 0.0, height],
            normal: [0.0, 1.0, 0.0],
            label: WALL,
            color: wall_c,
        },
        Patch {
            origin: [0.0, ly, 0.0],
            u: [lx, 0.0, 0.0],
            v: [0.0, 0.0, height],
            normal: [0.0, -1.0, 0.0],
            label: WALL,
            color: wall_c,
        },
        Patch {
            origin: [0.0, 0.0, 0.0],
            u: [0.0, ly, 0.0],
            v: [0.0, 0.0, height],
            normal: [1.0, 0.0, 0.0],
            label: WALL,
            color: wall_c,
        },
        Patch {
            origin: [lx, 0.0, 0.0],
            u: [0.0, ly, 0.0],
            v: [0.0, 0.0, height],
            normal: [-1.0, 0.0, 0.0],
            label: WALL,
            color: wall_c,
        },
    ];
    let palette = [[0.7, 0.2, 0.2], [0.2, 0.3, 0.7], [0.9, 0.7, 0.2], [0.3, 0.6, 0.3]];
    for _ in 0..rng.random_range(3..=8) {
        let half: [f64; 3] = [rng.random_range(0.2..0.75), rng.random_range(0.2..0.75), rng.random_range(0.2..0.6)];
        let m = half[0].max(half[1]) * 1.5;
        let center = [rng.random_range(m..lx - m), rng.random_range(m..ly - m)];
        let yaw = rng.random_range(0.0..PI);
        let color = palette[rng.random_range(0..palette.len())];
        box_patches(center, half, yaw, color, &mut patches);
    }
    let n = rng.random_range(5000..=8000);
    let areas: Vec<f64> = patches.iter().map(|p| p.area()).collect();
    let total: f64 = areas.iter().sum();
    let mut coords = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = rng.random::<f64>() * total;
        let mut k = patches.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if u < *a {
                k = i;
                break;
            }
            u -= a;
        }
        let p = &patches[k];
        let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
        coords.push([0, 1, 2].map(|i| p.origin[i] + a * p.u[i] + b * p.v[i]));
        normals.push(p.normal);
        colors.push(jitter_color(p.color, &mut rng));
        labels.push(p.label);
    }
    let mut cloud = PointCloud::new(coords, Domain::Indoor, Domain::Indoor.default_native_grid())
        .with_colors(colors)
        .with_normals(normals)
        .with_labels(labels);
    to_f32(&mut cloud);

    let k = rng.random_range(2..=4);
    let (axis, length) = if lx >= ly { (0, lx) } else { (1, ly) };
    let width = length / k as f64;
    let overlap = 0.5;
    let mut clouds = Vec::with_capacity(k);
    let mut poses = Vec::with_capacity(k);
    for j in 0..k {
        let lo = j as f64 * width - overlap;
        let hi = (j + 1) as f64 * width + overlap;
        let idx: Vec<usize> = (0..cloud.len())
            .filter(|&i| (lo..=hi).contains(&cloud.coords[i][axis]))
            .collect();
        let mut t = [lx / 2.0, ly / 2.0, 0.0];
        t[axis] = (j as f64 + 0.5) * width;
        let yaw = rng.random_range(-PI..PI);
        let r = crate::harmonize::euler_rotation(0.0, 0.0, yaw);
        let rt = r.transpose();
        let mut frame = cloud.select(&idx);
        for p in &mut frame.coords {
            *p = mul(&rt, [p[0] - t[0], p[1] - t[1], p[2] - t[2]]);
        }
        for nrm in &mut frame.normals {
            *nrm = mul(&rt, *nrm);
        }
        to_f32(&mut frame);
        let mut pose = Matrix4::identity();
        pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        pose[(0, 3)] = t[0];
        pose[(1, 3)] = t[1];
        clouds.push(frame);
        poses.push(pose);
    }
    IndoorScene {
        cloud,
        frames: Frames { clouds, poses },
    }
}

pub const GROUND: i32 = 0;
pub const VEHICLE: i32 = 1;

pub const RING_COUNT: usize = 64;
/// Azimuth step of the scan, degrees.
pub const AZIMUTH_STEP_DEG: f64 = 0.35;
/// Sensor height above the ground, meters.
pub const SENSOR_HEIGHT: f64 = 1.8;
const FIRST_RING: f64 = 3.0;

/// Ground radii of the rings for a scan reaching `extent` meters.
pub fn ring_radii(extent: f64) -> Vec<f64> {
    (0..RING_COUNT)
        .map(|i| FIRST_RING * (extent / FIRST_RING).powf(i as f64 / (RING_COUNT - 1) as f64))
        .collect()
}

struct Vehicle {
    center: [f64; 2],
    yaw: f64,
    half: [f64; 2],
    height: f64,
}

impl Vehicle {
    /// First hit of a beam along azimuth `dir` that descends from the sensor
    /// to the ground at distance `reach`: distance, height and normal.
    fn hit(&self, dir: [f64; 2], reach: f64) -> Option<(f64, f64, [f64; 3])> {
        let (s, c) = self.yaw.sin_cos();
        // Beam in the box frame: origin o, direction d.
        let o = [-(self.center[0]) * c - (self.center[1]) * s, self.center[0] * s - self.center[1] * c];
        let d = [dir[0] * c + dir[1] * s, -dir[0] * s + dir[1] * c];
        let mut t_in = f64::NEG_INFINITY;
        let mut t_out = f64::INFINITY;
        let mut face = 0;
        for a in 0..2 {
            if d[a].abs() < 1e-12 {
                if o[a].abs() > self.half[a] {
                    return None;
                }
                continue;
            }
            let t1 = (-self.half[a] - o[a]) / d[a];
            let t2 = (self.half[a] - o[a]) / d[a];
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if lo > t_in {
                t_in = lo;
                face = a;
            }
            t_out = t_out.min(hi);
        }
        if t_in > t_out || t_in <= 0.0 || t_in >= reach {
            return None;
        }
        let z_at = |t: f64| SENSOR_HEIGHT * (1.0 - t / reach);
        let z_in = z_at(t_in);
        if z_in <= self.height {
            let sign = -d[face].signum();
            let local = if face == 0 { [sign, 0.0] } else { [0.0, sign] };
            let n = [local[0] * c - local[1] * s, local[0] * s + local[1] * c, 0.0];
            return Some((t_in, z_in, n));
        }
        let t_roof = reach * (1.0 - self.height / SENSOR_HEIGHT);
        (t_roof <= t_out && t_roof >= t_in).then_some((t_roof, self.height, [0.0, 0.0, 1.0]))
    }
}

/// LiDAR-like sweep over a ground plane with 2–6 box vehicles: 64 rings of
/// increasing radius, one beam every 0.35° of azimuth, no colors, normals
/// estimated from neighboring beams.
pub fn gen_outdoor(seed: u64) -> PointCloud {
    let mut rng = rng_for(&[OUTDOOR_STREAM, seed]);
    let extent = rng.random_range(50.0..100.0);
    let vehicles: Vec<Vehicle> = (0..rng.random_range(2..=6))
        .map(|_| {
            let r = rng.random_range(5.0..0.6 * extent);
            let a = rng.random_range(0.0..2.0 * PI);
            Vehicle {
                center: [r * a.cos(), r * a.sin()],
                yaw: rng.random_range(0.0..PI),
                half: [rng.random_range(1.8..2.5), rng.random_range(0.8..1.0)],
                height: rng.random_range(1.4..1.7),
            }
        })
        .collect();
    let radii = ring_radii(extent);
    let n_az = (360.0 / AZIMUTH_STEP_DEG).floor() as usize;
    let mut coords = Vec::with_capacity(RING_COUNT * n_az);
    let mut labels = Vec::with_capacity(RING_COUNT * n_az);
    for &reach in &radii {
        for j in 0..n_az {
            let phi = (j as f64 * AZIMUTH_STEP_DEG).to_radians();
            let dir = [phi.cos(), phi.sin()];
            let best = vehicles
                .iter()
                .filter_map(|v| v.hit(dir, reach))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            let (t, z, label) = match best {
                Some((t, z, _)) => (t, z, VEHICLE),
                None => (reach, 0.0, GROUND),
            };
            coords.push([t * dir[0], t * dir[1], z]);
            labels.push(label);
        }
    }
    let normals = estimate_ring_normals(&coords, RING_COUNT, n_az);
    let mut cloud = PointCloud::new(coords, Domain::Outdoor, Domain::Outdoor.default_native_grid()).with_labels(labels);
    for (i, n) in normals.into_iter().enumerate() {
        if let Some(n) = n {
            cloud.normals[i] = n;
            cloud.mask[i] |= NORMAL_BIT;
        }
    }
    to_f32(&mut cloud);
    cloud
}

/// Normal of every beam from the cross product of its along-ring and
/// across-ring differences, oriented toward the sensor. Degenerate
/// neighborhoods give `None`.
pub fn estimate_ring_normals(coords: &[[f64; 3]], rings: usize, per_ring: usize) -> Vec<Option<[f64; 3]>> {
    let at = |i: usize, j: usize| Vector3::from(coords[i * per_ring + j % per_ring]);
    let mut out = Vec::with_capacity(coords.len());
    for i in 0..rings {
        for j in 0..per_ring {
            let along = at(i, j + 1) - at(i, j + per_ring - 1);
            let across = at((i + 1).min(rings - 1), j) - at(i.saturating_sub(1), j);
            let n = along.cross(&across);
            let len = n.norm();
            if !(len > 1e-12) {
                out.push(None);
                continue;
            }
            let mut n = n / len;
            let to_sensor = Vector3::new(0.0, 0.0, SENSOR_HEIGHT) - at(i, j);
            if n.dot(&to_sensor) < 0.0 {
                n = -n;
            }
            out.push(Some([n[0], n[1], n[2]]));
        }
    }
    out
}

/// A training sample of `domain`; indoor samples carry their frames.
pub fn gen_sample(domain: Domain, seed: u64) -> Sample {
    match domain {
        Domain::Object => Sample::new(gen_object(seed)),
        Domain::Indoor => gen_indoor(seed).into_sample(),
        Domain::Outdoor => Sample::new(gen_outdoor(seed)),
    }
}

/// The labeled cloud of `domain` for `seed`.
pub fn gen_cloud(domain: Domain, seed: u64) -> PointCloud {
    match domain {
        Domain::Object => gen_object(seed),
        Domain::Indoor => gen_indoor(seed).cloud,
        Domain::Outdoor => gen_outdoor(seed),
    }
}

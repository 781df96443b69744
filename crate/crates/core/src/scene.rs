//! Shoebox image-source simulation of reference Ambisonics and array RIRs.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::{distance, ArrayGeometry, SPEED_OF_SOUND};
use crate::dsp::convolve_many;
use crate::error::{Error, Result};
use crate::sh::{channel_count, sh_eval, Direction, Normalization};

/// Sabine constant 24·ln(10)/c for c = 343 m/s.
const SABINE: f64 = 0.161;

/// Shoebox room; `dims` are (width x, depth y, height z) in meters and
/// `absorption` holds energy absorption for walls x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub dims: [f64; 3],
    pub absorption: [f64; 6],
}

impl Room {
    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }

    /// Uniform absorption reaching `t60` by Sabine's formula.
    pub fn with_sabine_t60(dims: [f64; 3], t60: f64) -> Self {
        let mut room = Self {
            dims,
            absorption: [0.0; 6],
        };
        let alpha = (SABINE * room.volume() / (room.surface() * t60)).clamp(1e-6, 1.0);
        room.absorption = [alpha; 6];
        room
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= 0.0 && p[k] <= self.dims[k])
    }

    pub fn wall_distance(&self, p: &[f64; 3]) -> f64 {
        (0..3)
            .map(|k| p[k].min(self.dims[k] - p[k]))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acoustic {
    Dry,
    Room(Room),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub acoustic: Acoustic,
    pub sources: Vec<[f64; 3]>,
    pub array_center: [f64; 3],
    pub t60_target: Option<f64>,
}

impl Scene {
    pub fn is_dry(&self) -> bool {
        matches!(self.acoustic, Acoustic::Dry)
    }

    /// The same placement rendered without room acoustics.
    pub fn to_dry(&self) -> Scene {
        Scene {
            acoustic: Acoustic::Dry,
            sources: self.sources.clone(),
            array_center: self.array_center,
            t60_target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// (min, max) height in meters.
    pub height: (f64, f64),
    pub width: (f64, f64),
    pub depth: (f64, f64),
    pub t60: (f64, f64),
    pub array_wall_clearance: f64,
    pub source_wall_clearance: f64,
    pub min_source_distance: f64,
    pub source_count: usize,
    pub dry: bool,
    /// Tune wall absorption so the simulated decay meets the T60 target;
    /// otherwise Sabine's formula sets it.
    pub calibrate_t60: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: (3.0, 8.0),
            width: (3.0, 12.0),
            depth: (3.0, 20.0),
            t60: (0.4, 0.5),
            array_wall_clearance: 1.0,
            source_wall_clearance: 0.5,
            min_source_distance: 2.0,
            source_count: 1,
            dry: false,
            calibrate_t60: true,
        }
    }
}

const PLACEMENT_BUDGET: usize = 10_000;

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.gen_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Draws a random room with array and source placement satisfying the
/// clearance constraints of `cfg`.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> Result<Scene> {
    for (name, r) in [
        ("height", cfg.height),
        ("width", cfg.width),
        ("depth", cfg.depth),
        ("t60", cfg.t60),
    ] {
        if !(r.0 > 0.0 && r.1 >= r.0) {
            return Err(Error::Config(format!("empty {name} range {r:?}")));
        }
    }
    if cfg.source_count == 0 {
        return Err(Error::Config("a scene needs at least one source".into()));
    }
    for _ in 0..PLACEMENT_BUDGET {
        let height = uniform(rng, cfg.height);
        let width = uniform(rng, cfg.width);
        let depth = uniform(rng, cfg.depth);
        let t60 = uniform(rng, cfg.t60);
        let dims = [width, depth, height];
        let room = Room::with_sabine_t60(dims, t60);

        let clear = cfg.array_wall_clearance;
        if dims.iter().any(|&d| d <= 2.0 * clear) {
            continue;
        }
        let center = [
            rng.gen_range(clear..dims[0] - clear),
            rng.gen_range(clear..dims[1] - clear),
            rng.gen_range(clear..dims[2] - clear),
        ];
        let sc = cfg.source_wall_clearance;
        let mut sources = Vec::with_capacity(cfg.source_count);
        for _ in 0..200 {
            let p = [
                rng.gen_range(sc..dims[0] - sc),
                rng.gen_range(sc..dims[1] - sc),
                rng.gen_range(sc..dims[2] - sc),
            ];
            if distance(&p, &center) >= cfg.min_source_distance {
                sources.push(p);
                if sources.len() == cfg.source_count {
                    break;
                }
            }
        }
        if sources.len() < cfg.source_count {
            continue;
        }
        let mut scene = Scene {
            acoustic: Acoustic::Room(room),
            sources,
            array_center: center,
            t60_target: Some(t60),
        };
        if cfg.calibrate_t60 && !cfg.dry {
            let alpha = Simulator::default().calibrate_absorption(&scene)?;
            if let Acoustic::Room(room) = &mut scene.acoustic {
                room.absorption = [alpha; 6];
            }
        }
        return Ok(if cfg.dry { scene.to_dry() } else { scene });
    }
    Err(Error::Sampling(format!(
        "no feasible placement after {PLACEMENT_BUDGET} rooms"
    )))
}

/// Multichannel impulse responses laid out `[channel][source][tap]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponseSet {
    pub sample_rate: u32,
    pub responses: Vec<Vec<Vec<f64>>>,
}

impl ImpulseResponseSet {
    pub fn channels(&self) -> usize {
        self.responses.len()
    }

    pub fn taps(&self) -> usize {
        self.responses
            .iter()
            .flat_map(|c| c.iter().map(|s| s.len()))
            .max()
            .unwrap_or(0)
    }
}

/// One propagation path from an (image) source to a receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    /// Image source position.
    pub position: [f64; 3],
    pub distance: f64,
    pub gain: f64,
    pub order: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Simulator {
    pub sample_rate: u32,
    pub speed_of_sound: f64,
    /// Length of the windowed-sinc fractional delay kernel (odd).
    pub fd_taps: usize,
    /// RIR duration as a multiple of the scene's T60 target.
    pub decay_factor: f64,
}

impl Default for Simulator {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            speed_of_sound: SPEED_OF_SOUND,
            fd_taps: 81,
            decay_factor: 1.5,
        }
    }
}

impl Simulator {
    fn duration(&self, scene: &Scene) -> f64 {
        match (&scene.acoustic, scene.t60_target) {
            (Acoustic::Room(_), Some(t60)) => self.decay_factor * t60,
            (Acoustic::Room(room), None) => {
                // fall back to Sabine from the absorption
                let a: f64 = room.absorption.iter().sum::<f64>() / 6.0;
                self.decay_factor * SABINE * room.volume() / (room.surface() * a.max(1e-6))
            }
            (Acoustic::Dry, _) => 0.0,
        }
    }

    fn check_receiver(&self, scene: &Scene, receiver: &[f64; 3]) -> Result<()> {
        if let Acoustic::Room(room) = &scene.acoustic {
            if !room.contains(receiver) {
                return Err(Error::Geometry(format!(
                    "receiver {receiver:?} lies outside the {:?} m room",
                    room.dims
                )));
            }
        }
        Ok(())
    }

    /// Enumerates image sources up to `max_order` reflections (all orders
    /// within the decay window when `None`), ordered deterministically.
    pub fn arrivals(
        &self,
        scene: &Scene,
        source_index: usize,
        receiver: &[f64; 3],
        max_order: Option<usize>,
    ) -> Result<Vec<Arrival>> {
        let src = *scene.sources.get(source_index).ok_or_else(|| {
            Error::Input(format!(
                "source index {source_index} out of range for {} sources",
                scene.sources.len()
            ))
        })?;
        self.check_receiver(scene, receiver)?;
        let direct = |pos: [f64; 3]| {
            let d = distance(&pos, receiver).max(1e-3);
            Arrival {
                position: pos,
                distance: d,
                gain: 1.0 / (4.0 * PI * d),
                order: 0,
            }
        };
        let room = match &scene.acoustic {
            Acoustic::Dry => return Ok(vec![direct(src)]),
            Acoustic::Room(room) => room,
        };
        let reflection: Vec<f64> = room
            .absorption
            .iter()
            .map(|a| (1.0 - a).max(0.0).sqrt())
            .collect();
        let max_dist = self.duration(scene) * self.speed_of_sound;
        let limit = max_order.unwrap_or(usize::MAX);
        Ok(images(room.dims, src, receiver, max_dist, limit)
            .into_iter()
            .map(|img| {
                let gain: f64 = (0..6)
                    .map(|w| reflection[w].powi(img.wall_hits[w] as i32))
                    .product();
                Arrival {
                    position: img.position,
                    distance: img.distance,
                    gain: gain / (4.0 * PI * img.distance),
                    order: img.order,
                }
            })
            .collect())
    }

    /// Uniform wall absorption for which the image-source energy decay of
    /// `scene` (first source, at the array centre) has a T30-based T60 equal
    /// to the scene's target. Sabine's estimate seeds the search.
    pub fn calibrate_absorption(&self, scene: &Scene) -> Result<f64> {
        let (Acoustic::Room(room), Some(target)) = (&scene.acoustic, scene.t60_target) else {
            return Err(Error::Input("only reverberant scenes with a T60 target can be calibrated".into()));
        };
        let src = *scene
            .sources
            .first()
            .ok_or_else(|| Error::Input("scene has no sources".into()))?;
        self.check_receiver(scene, &scene.array_center)?;
        let max_dist = self.decay_factor * target * self.speed_of_sound;
        let imgs = images(room.dims, src, &scene.array_center, max_dist, usize::MAX);
        let fs = self.sample_rate as f64;
        let len = (max_dist / self.speed_of_sound * fs).ceil() as usize + 2;
        // Arrivals add coherently, so pressure is accumulated per sample
        // before squaring, as in the rendered response.
        let measure = |alpha: f64| -> Option<f64> {
            let keep = (1.0 - alpha).sqrt();
            let mut pressure = vec![0.0; len];
            for img in &imgs {
                let bin = (img.distance / self.speed_of_sound * fs).round() as usize;
                if bin < len {
                    pressure[bin] += keep.powi(img.order as i32) / img.distance;
                }
            }
            let energy: Vec<f64> = pressure.iter().map(|p| p * p).collect();
            t60_from_energy(&energy, self.sample_rate)
        };
        let sabine = Room::with_sabine_t60(room.dims, target).absorption[0];
        // T60 falls monotonically with absorption; bisect in log space
        let (mut lo, mut hi) = (1e-4f64, 0.999f64);
        let mut best = sabine;
        if let Some(t) = measure(sabine) {
            if t > target {
                lo = sabine;
            } else {
                hi = sabine;
            }
        }
        for _ in 0..40 {
            let mid = (lo * hi).sqrt();
            best = mid;
            match measure(mid) {
                Some(t) if t > target => lo = mid,
                Some(_) => hi = mid,
                // decay too fast to span 30 dB inside the window
                None => hi = mid,
            }
            if hi / lo < 1.0 + 1e-4 {
                break;
            }
        }
        Ok(best)
    }

    fn length_for(&self, scene: &Scene, arrivals: &[Arrival]) -> usize {
        let fs = self.sample_rate as f64;
        let half = self.fd_taps / 2;
        let last = arrivals
            .iter()
            .map(|a| a.distance / self.speed_of_sound * fs)
            .fold(0.0, f64::max);
        let decay = (self.duration(scene) * fs).ceil();
        (last.max(decay).ceil() as usize) + half + 2
    }

    /// Adds a fractionally delayed impulse using a Hann-windowed sinc.
    fn add_tap(&self, out: &mut [f64], delay: f64, amp: f64) {
        let half = (self.fd_taps / 2) as isize;
        let width = half as f64 + 1.0;
        let start = delay.round() as isize - half;
        let x0 = start as f64 - delay;
        // sin(π(x0 + k)) = (−1)^k sin(π x0); the window cosine is rotated
        let s0 = (PI * x0).sin();
        let (step_sin, step_cos) = (PI / width).sin_cos();
        let (mut ws, mut wc) = (PI * x0 / width).sin_cos();
        let mut sign = 1.0;
        for k in 0..=2 * half {
            let n = start + k;
            if n >= 0 && (n as usize) < out.len() {
                let x = x0 + k as f64;
                let s = if x.abs() < 1e-12 { 1.0 } else { sign * s0 / (PI * x) };
                out[n as usize] += amp * s * 0.5 * (1.0 + wc);
            }
            sign = -sign;
            let c = wc * step_cos - ws * step_sin;
            ws = ws * step_cos + wc * step_sin;
            wc = c;
        }
    }

    fn taps_from(&self, arrivals: &[Arrival], len: usize, gains: impl Fn(&Arrival) -> f64) -> Vec<f64> {
        let fs = self.sample_rate as f64;
        let mut out = vec![0.0; len];
        for a in arrivals {
            let g = gains(a);
            if g != 0.0 {
                self.add_tap(&mut out, a.distance / self.speed_of_sound * fs, a.gain * g);
            }
        }
        out
    }

    /// Pressure impulse response from one source to `receiver`.
    pub fn ism_rir(
        &self,
        scene: &Scene,
        source_index: usize,
        receiver: &[f64; 3],
        max_order: Option<usize>,
    ) -> Result<Vec<f64>> {
        let arrivals = self.arrivals(scene, source_index, receiver, max_order)?;
        let len = self.length_for(scene, &arrivals);
        Ok(self.taps_from(&arrivals, len, |_| 1.0))
    }

    /// Ideal SN3D Ambisonic impulse responses at the array centre.
    pub fn reference_ambisonic_rirs(&self, scene: &Scene, order: usize) -> Result<ImpulseResponseSet> {
        let n_ch = channel_count(order);
        let mut responses = vec![Vec::with_capacity(scene.sources.len()); n_ch];
        let center = scene.array_center;
        for s in 0..scene.sources.len() {
            let arrivals = self.arrivals(scene, s, &center, None)?;
            let len = self.length_for(scene, &arrivals);
            let gains = arrivals
                .iter()
                .map(|a| {
                    let v = [
                        a.position[0] - center[0],
                        a.position[1] - center[1],
                        a.position[2] - center[2],
                    ];
                    sh_eval(Direction::from_vector(v), order, Normalization::Sn3d).map(|y| y.values)
                })
                .collect::<Result<Vec<_>>>()?;
            for (c, channel) in responses.iter_mut().enumerate() {
                let fs = self.sample_rate as f64;
                let mut out = vec![0.0; len];
                for (a, y) in arrivals.iter().zip(&gains) {
                    if y[c] != 0.0 {
                        self.add_tap(&mut out, a.distance / self.speed_of_sound * fs, a.gain * y[c]);
                    }
                }
                channel.push(out);
            }
        }
        Ok(ImpulseResponseSet {
            sample_rate: self.sample_rate,
            responses,
        })
    }

    /// Pressure RIRs at each microphone of `g` placed around the array centre.
    pub fn array_rirs(&self, scene: &Scene, g: &ArrayGeometry) -> Result<ImpulseResponseSet> {
        let c = scene.array_center;
        let responses = g
            .coords
            .iter()
            .map(|r| {
                let mic = [c[0] + r[0], c[1] + r[1], c[2] + r[2]];
                (0..scene.sources.len())
                    .map(|s| self.ism_rir(scene, s, &mic, None))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ImpulseResponseSet {
            sample_rate: self.sample_rate,
            responses,
        })
    }

    /// Convolves every source with its responses and sums over sources.
    /// Output length equals the longest source; the reverberant tail past
    /// the end of the sources is dropped.
    pub fn render(
        &self,
        irs: &ImpulseResponseSet,
        sources: &[Vec<f64>],
        source_rate: u32,
    ) -> Result<Vec<Vec<f64>>> {
        if source_rate != irs.sample_rate {
            return Err(Error::Format(format!(
                "source signals at {source_rate} Hz, responses at {} Hz",
                irs.sample_rate
            )));
        }
        let n_src = irs.responses.first().map_or(0, |c| c.len());
        if sources.len() != n_src {
            return Err(Error::Format(format!(
                "{} source signals for {n_src} simulated sources",
                sources.len()
            )));
        }
        let len = sources.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut out = vec![vec![0.0; len]; irs.channels()];
        for (s, signal) in sources.iter().enumerate() {
            if signal.is_empty() {
                continue;
            }
            for (c, channel) in irs.responses.iter().enumerate() {
                let y = convolve_many(&[signal.as_slice()], &channel[s]).pop().unwrap_or_default();
                for (o, v) in out[c].iter_mut().zip(y) {
                    *o += v;
                }
            }
        }
        Ok(out)
    }

    /// Renders `(array signals, reference Ambisonics)` for one scene and array.
    pub fn render_scene(
        &self,
        scene: &Scene,
        g: &ArrayGeometry,
        order: usize,
        sources: &[Vec<f64>],
        source_rate: u32,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let array = self.array_rirs(scene, g)?;
        let reference = self.reference_ambisonic_rirs(scene, order)?;
        Ok((
            self.render(&array, sources, source_rate)?,
            self.render(&reference, sources, source_rate)?,
        ))
    }
}

struct Image {
    position: [f64; 3],
    /// Reflection counts on walls x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.
    wall_hits: [usize; 6],
    order: usize,
    distance: f64,
}

/// Image sources of a shoebox with at most `limit` reflections and, apart
/// from the direct path, within `max_dist` of the receiver.
fn images(dims: [f64; 3], src: [f64; 3], receiver: &[f64; 3], max_dist: f64, limit: usize) -> Vec<Image> {
    let reach: Vec<i64> = (0..3)
        .map(|k| (max_dist / (2.0 * dims[k])).ceil() as i64 + 1)
        .collect();
    let mut out = Vec::new();
    for nx in -reach[0]..=reach[0] {
        for ny in -reach[1]..=reach[1] {
            for nz in -reach[2]..=reach[2] {
                for parity in 0..8u8 {
                    let n = [nx, ny, nz];
                    let mut position = [0.0; 3];
                    let mut wall_hits = [0usize; 6];
                    for k in 0..3 {
                        let p = ((parity >> k) & 1) as i64;
                        position[k] = (1 - 2 * p) as f64 * src[k] + 2.0 * n[k] as f64 * dims[k];
                        wall_hits[2 * k] = (n[k] - p).unsigned_abs() as usize;
                        wall_hits[2 * k + 1] = n[k].unsigned_abs() as usize;
                    }
                    let order: usize = wall_hits.iter().sum();
                    if order > limit {
                        continue;
                    }
                    let d = distance(&position, receiver).max(1e-3);
                    if order > 0 && d > max_dist {
                        continue;
                    }
                    out.push(Image {
                        position,
                        wall_hits,
                        order,
                        distance: d,
                    });
                }
            }
        }
    }
    out
}

/// Schroeder-integrated T60 from a linear fit of the −5..−35 dB decay range.
pub fn schroeder_t60(rir: &[f64], sample_rate: u32) -> Option<f64> {
    let energy: Vec<f64> = rir.iter().map(|v| v * v).collect();
    t60_from_energy(&energy, sample_rate)
}

fn t60_from_energy(energy: &[f64], sample_rate: u32) -> Option<f64> {
    let mut edc = vec![0.0; energy.len()];
    let mut acc = 0.0;
    for i in (0..energy.len()).rev() {
        acc += energy[i];
        edc[i] = acc;
    }
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / total).max(1e-30).log10()).collect();
    let start = db.iter().position(|&d| d <= -5.0)?;
    let end = db.iter().position(|&d| d <= -35.0)?;
    if end <= start + 1 {
        return None;
    }
    let fs = sample_rate as f64;
    let n = (end - start) as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (i, &y) in db.iter().enumerate().take(end).skip(start) {
        let x = i as f64 / fs;
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (slope < 0.0).then(|| -60.0 / slope)
}

/// Serialized scene metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub seed: u64,
    pub dims: [f64; 3],
    pub absorption: [f64; 6],
    pub t60: f64,
    pub sources: Vec<[f64; 3]>,
    pub array_center: [f64; 3],
}

impl SceneRecord {
    /// Records a reverberant scene; its dry twin is recovered with [`Scene::to_dry`].
    pub fn from_scene(id: String, seed: u64, scene: &Scene) -> Result<Self> {
        let Acoustic::Room(room) = &scene.acoustic else {
            return Err(Error::Input("scene records describe the reverberant variant".into()));
        };
        Ok(Self {
            id,
            seed,
            dims: room.dims,
            absorption: room.absorption,
            t60: scene.t60_target.unwrap_or_default(),
            sources: scene.sources.clone(),
            array_center: scene.array_center,
        })
    }

    pub fn scene(&self) -> Scene {
        Scene {
            acoustic: Acoustic::Room(Room {
                dims: self.dims,
                absorption: self.absorption,
            }),
            sources: self.sources.clone(),
            array_center: self.array_center,
            t60_target: Some(self.t60),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dry_scene(source: [f64; 3]) -> Scene {
        Scene {
            acoustic: Acoustic::Dry,
            sources: vec![source],
            array_center: [0.0; 3],
            t60_target: None,
        }
    }

    #[test]
    fn sampled_scene_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SceneConfig {
            source_count: 2,
            ..SceneConfig::default()
        };
        for _ in 0..50 {
            let s = sample_scene(&mut rng, &cfg).unwrap();
            let Acoustic::Room(room) = &s.acoustic else { panic!() };
            let [w, d, h] = room.dims;
            assert!((3.0..=12.0).contains(&w) && (3.0..=20.0).contains(&d) && (3.0..=8.0).contains(&h));
            assert!(room.wall_distance(&s.array_center) >= 1.0);
            for src in &s.sources {
                assert!(distance(src, &s.array_center) >= 2.0);
                assert!(room.contains(src));
            }
            let t60 = s.t60_target.unwrap();
            assert!((0.4..=0.5).contains(&t60));
        }
    }

    #[test]
    fn dry_config_drops_room() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = SceneConfig {
            dry: true,
            ..SceneConfig::default()
        };
        let s = sample_scene(&mut rng, &cfg).unwrap();
        assert_eq!(s.acoustic, Acoustic::Dry);
        assert_eq!(s.t60_target, None);
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = sample_scene(&mut ChaCha8Rng::seed_from_u64(9), &cfg).unwrap();
        let b = sample_scene(&mut ChaCha8Rng::seed_from_u64(9), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SceneConfig {
            height: (2.0, 2.0),
            ..SceneConfig::default()
        };
        assert!(matches!(sample_scene(&mut rng, &cfg), Err(Error::Sampling(_))));
        let cfg = SceneConfig {
            width: (5.0, 4.0),
            ..SceneConfig::default()
        };
        assert!(matches!(sample_scene(&mut rng, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn dry_direct_path() {
        let sim = Simulator::default();
        let rir = sim.ism_rir(&dry_scene([3.0, 0.0, 0.0]), 0, &[0.0; 3], None).unwrap();
        let delay: f64 = 3.0 / 343.0 * 24000.0;
        let peak = (0..rir.len()).max_by(|&a, &b| rir[a].abs().total_cmp(&rir[b].abs())).unwrap();
        assert_eq!(peak, delay.round() as usize);
        // the band-limited impulse sums to the path gain
        let sum: f64 = rir.iter().sum();
        assert!((sum - 1.0 / (4.0 * PI * 3.0)).abs() < 1e-3 / (4.0 * PI * 3.0));
    }

    #[test]
    fn first_order_arrivals() {
        let sim = Simulator::default();
        let scene = Scene {
            acoustic: Acoustic::Room(Room::with_sabine_t60([5.0, 6.0, 4.0], 0.45)),
            sources: vec![[1.0, 2.0, 1.5]],
            array_center: [3.0, 3.5, 2.0],
            t60_target: Some(0.45),
        };
        let arr = sim.arrivals(&scene, 0, &scene.array_center, Some(1)).unwrap();
        assert_eq!(arr.len(), 7);
        assert_eq!(arr.iter().filter(|a| a.order == 0).count(), 1);
    }

    #[test]
    fn receiver_outside_room() {
        let sim = Simulator::default();
        let scene = Scene {
            acoustic: Acoustic::Room(Room::with_sabine_t60([5.0, 6.0, 4.0], 0.45)),
            sources: vec![[1.0, 2.0, 1.5]],
            array_center: [3.0, 3.5, 2.0],
            t60_target: Some(0.45),
        };
        assert!(matches!(
            sim.ism_rir(&scene, 0, &[6.0, 1.0, 1.0], Some(0)),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn dipole_nulls_for_zenith_source() {
        let sim = Simulator::default();
        let refs = sim.reference_ambisonic_rirs(&dry_scene([0.0, 0.0, 2.5]), 1).unwrap();
        for c in [1, 3] {
            assert!(refs.responses[c][0].iter().all(|v| v.abs() < 1e-15));
        }
        assert!(refs.responses[2][0].iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn sample_rate_mismatch() {
        let sim = Simulator::default();
        let irs = sim.reference_ambisonic_rirs(&dry_scene([2.0, 0.0, 0.0]), 0).unwrap();
        assert!(matches!(sim.render(&irs, &[vec![1.0]], 48000), Err(Error::Format(_))));
    }

    #[test]
    fn record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scene = sample_scene(&mut rng, &SceneConfig::default()).unwrap();
        let rec = SceneRecord::from_scene("s0".into(), 4, &scene).unwrap();
        assert_eq!(rec.scene(), scene);
        assert!(SceneRecord::from_scene("d".into(), 4, &scene.to_dry()).is_err());
    }
}

//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls the code it checks.

#![allow(dead_code)]

use geodiff::geometry::{
    build_field, mask_algebra, splat, transform_mask, AxisAngle, CameraIntrinsics, DepthSource, EditField, EditKind, EditTransform, Pivot, TransformParams,
};
use geodiff::autodiff::{Graph, Var};
use geodiff::diffnet::{attention, attention_map, attention_var, AttentionKind};
use geodiff::guidance::ref_guidance;
use geodiff::losses::{total_loss, BlockLossInputs, LossWeights, RemoveLossOptions};
use geodiff::{Matrix, Raster};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- geometry

/// One randomized geometry instance.
#[derive(Clone, Debug)]
pub struct GeoCase {
    pub h: usize,
    pub w: usize,
    pub transform: EditTransform,
    pub depth: Option<Raster>,
    pub intrinsics: CameraIntrinsics,
    pub object: Raster,
    pub signal: Raster,
}

fn dyadic(r: &mut ChaCha8Rng, lo: i32, hi: i32) -> f64 {
    f64::from(r.random_range(lo * 4..=hi * 4)) / 4.0
}

impl GeoCase {
    /// Grids up to 16×16. 2D parameters are multiples of 1/4 so targets are
    /// exact in floating point.
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let h = r.random_range(1..=16);
        let w = r.random_range(1..=16);
        let kind = r.random_range(0..6);
        let f = r.random_range(4.0..24.0);
        let intrinsics = CameraIntrinsics::new(f, f * r.random_range(0.8..1.2), (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap();
        let point2 = |r: &mut ChaCha8Rng| vec![f64::from(r.random_range(0..w as i32)), f64::from(r.random_range(0..h as i32))];
        let transform = match kind {
            0 => EditTransform::translate2d(dyadic(&mut r, -8, 8), dyadic(&mut r, -8, 8)),
            1 => {
                let s = [r.random_range(1..=12) as f64 / 4.0, r.random_range(1..=12) as f64 / 4.0];
                let pivot = if r.random_bool(0.5) { Pivot::Origin } else { Pivot::Point(point2(&mut r)) };
                EditTransform::scale2d(s[0], s[1], pivot)
            }
            2 | 3 => {
                let axis = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(0.1..1.0)];
                EditTransform {
                    kind: EditKind::Rigid3d,
                    params: TransformParams {
                    axis_angle: Some(AxisAngle {
                        axis,
                        degrees: r.random_range(-40.0..40.0),
                    }),
                    translation: Some([r.random_range(-0.2..0.2), r.random_range(-0.2..0.2), r.random_range(-0.2..0.2)]),
                    pivot: Some(if r.random_bool(0.5) {
                        Pivot::Origin
                    } else {
                        Pivot::Point(vec![r.random_range(-0.3..0.3), r.random_range(-0.3..0.3), r.random_range(0.5..1.5)])
                    }),
                        ..Default::default()
                    },
                    depth_source: DepthSource::File,
                }
            }
            4 => EditTransform::scale3d(
                [r.random_range(0.5..1.5), r.random_range(0.5..1.5), r.random_range(0.5..1.5)],
                Pivot::Point(vec![0.0, 0.0, r.random_range(0.5..1.5)]),
            ),
            _ => {
                if r.random_bool(0.5) {
                    EditTransform::identity()
                } else {
                    EditTransform::remove()
                }
            }
        };
        let depth = transform.kind.is_3d().then(|| {
            let d: Vec<f64> = (0..h * w).map(|_| r.random_range(0.3..2.0)).collect();
            Raster::new(h, w, 1, d).unwrap()
        });
        let transform = transform.with_depth_source(DepthSource::File);
        let object = Raster::new(h, w, 1, (0..h * w).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect()).unwrap();
        let signal = Raster::new(h, w, 2, (0..h * w * 2).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        Self {
            h,
            w,
            transform,
            depth,
            intrinsics,
            object,
            signal,
        }
    }
}

/// Per-pixel targets, validity and (for 3D) camera depth, recomputed from
/// first principles with homogeneous matrices. Ambiguous pixels (rounding
/// exactly between two destinations, or depth ties) are flagged.
pub struct FieldOracle {
    pub target: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
    pub ambiguous: Vec<bool>,
}

fn affine2(c: &GeoCase) -> Matrix3<f64> {
    let p = &c.transform.params;
    match c.transform.kind {
        EditKind::Translate2d => {
            let o = p.offset.unwrap();
            Matrix3::new(1.0, 0.0, o[0], 0.0, 1.0, o[1], 0.0, 0.0, 1.0)
        }
        EditKind::Scale2d => {
            let s = p.scale.as_ref().unwrap();
            let piv = match &p.pivot {
                Some(Pivot::Point(v)) => [v[0], v[1]],
                _ => [0.0, 0.0],
            };
            let to = Matrix3::new(1.0, 0.0, piv[0], 0.0, 1.0, piv[1], 0.0, 0.0, 1.0);
            let from = Matrix3::new(1.0, 0.0, -piv[0], 0.0, 1.0, -piv[1], 0.0, 0.0, 1.0);
            to * Matrix3::new(s[0], 0.0, 0.0, 0.0, s[1], 0.0, 0.0, 0.0, 1.0) * from
        }
        _ => Matrix3::identity(),
    }
}

fn rotation(aa: &AxisAngle) -> Matrix3<f64> {
    let axis = nalgebra::Unit::new_normalize(Vector3::from(aa.axis));
    *nalgebra::Rotation3::from_axis_angle(&axis, aa.degrees.to_radians()).matrix()
}

fn near_half(v: f64) -> bool {
    (v - v.floor() - 0.5).abs() < 1e-7
}

pub fn field_oracle(c: &GeoCase) -> FieldOracle {
    let (h, w) = (c.h, c.w);
    let n = h * w;
    let obj = c.object.to_bools();
    let in_bounds = |t: [f64; 2]| t[0] >= 0.0 && t[1] >= 0.0 && t[0] <= (w - 1) as f64 && t[1] <= (h - 1) as f64;
    let mut target = vec![[0.0; 2]; n];
    let mut valid = vec![false; n];
    let mut ambiguous = vec![false; n];
    let mut z = vec![f64::INFINITY; n];
    match c.transform.kind {
        EditKind::Identity => {
            for i in 0..n {
                target[i] = [(i % w) as f64, (i / w) as f64];
                valid[i] = obj[i];
            }
        }
        EditKind::Remove => {
            for i in 0..n {
                target[i] = [(i % w) as f64, (i / w) as f64];
            }
        }
        EditKind::Translate2d | EditKind::Scale2d => {
            let a = affine2(c);
            for i in 0..n {
                let u = a * Vector3::new((i % w) as f64, (i / w) as f64, 1.0);
                target[i] = [u.x, u.y];
                valid[i] = obj[i] && in_bounds(target[i]);
            }
        }
        EditKind::Rigid3d | EditKind::Scale3d => {
            let k = &c.intrinsics;
            let km = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
            let kinv = km.try_inverse().unwrap();
            let p = &c.transform.params;
            let pivot = match &p.pivot {
                Some(Pivot::Point(v)) => Vector3::new(v[0], v[1], v[2]),
                _ => Vector3::zeros(),
            };
            let (lin, t) = if c.transform.kind == EditKind::Rigid3d {
                (rotation(p.axis_angle.as_ref().unwrap()), Vector3::from(p.translation.unwrap_or([0.0; 3])))
            } else {
                let s = p.scale.as_ref().unwrap();
                (Matrix3::from_diagonal(&Vector3::new(s[0], s[1], s[2])), Vector3::zeros())
            };
            let depth = c.depth.as_ref().unwrap();
            for i in 0..n {
                let x = kinv * Vector3::new((i % w) as f64, (i / w) as f64, 1.0) * depth.data()[i];
                let q = lin * (x - pivot) + pivot + t;
                z[i] = q.z;
                if q.z <= 1e-9 {
                    target[i] = [f64::NAN, f64::NAN];
                    continue;
                }
                let u = km * (q / q.z);
                target[i] = [u.x, u.y];
                valid[i] = obj[i] && in_bounds(target[i]);
                if (q.z - 1e-9).abs() < 1e-7 || near_half(u.x) || near_half(u.y) {
                    ambiguous[i] = true;
                }
                for b in [0.0, (w - 1) as f64] {
                    if (u.x - b).abs() < 1e-7 {
                        ambiguous[i] = true;
                    }
                }
                for b in [0.0, (h - 1) as f64] {
                    if (u.y - b).abs() < 1e-7 {
                        ambiguous[i] = true;
                    }
                }
            }
            // Brute-force z-buffer: for every destination, scan all sources.
            for d in 0..n {
                let hits: Vec<usize> = (0..n).filter(|&s| valid[s] && dest(target[s], w) == Some(d)).collect();
                if hits.len() < 2 {
                    continue;
                }
                let zmin = hits.iter().map(|&s| z[s]).fold(f64::INFINITY, f64::min);
                let winner = *hits.iter().filter(|&&s| z[s] == zmin).last().unwrap();
                let near_tie = hits.iter().filter(|&&s| (z[s] - zmin).abs() < 1e-9).count() > 1;
                for &s in &hits {
                    if s != winner {
                        valid[s] = false;
                    }
                    if near_tie {
                        ambiguous[s] = true;
                    }
                }
            }
        }
    }
    FieldOracle {
        target,
        valid,
        ambiguous,
    }
}

fn dest(t: [f64; 2], w: usize) -> Option<usize> {
    let (x, y) = (t[0].round(), t[1].round());
    (x >= 0.0 && y >= 0.0).then(|| y as usize * w + x as usize)
}

/// Brute-force nearest splat: every destination takes the last valid source
/// in row-major order that rounds onto it, or the nearest one when depths
/// are given.
pub fn splat_oracle(signal: &Raster, target: &[[f64; 2]], valid: &[bool], depth: Option<&[f64]>) -> Raster {
    let (h, w) = signal.dims();
    let mut out = Raster::zeros(h, w, signal.channels());
    for d in 0..h * w {
        let mut best: Option<usize> = None;
        for s in 0..h * w {
            if !valid[s] || dest(target[s], w) != Some(d) {
                continue;
            }
            best = match (best, depth) {
                (Some(b), Some(z)) if z[s] > z[b] => Some(b),
                _ => Some(s),
            };
        }
        if let Some(s) = best {
            out.pixel_mut(d).copy_from_slice(signal.pixel(s));
        }
    }
    out
}

/// Compares the library's field, splat, transformed mask and mask algebra
/// with the oracles. Returns whether the case was checked in full (cases with
/// rounding or depth ties only have their unambiguous pixels checked), or a
/// description of the first disagreement.
pub fn check_geometry(c: &GeoCase) -> Result<bool, String> {
    let field = build_field(&c.transform, c.h, c.w, c.depth.as_ref(), Some(&c.intrinsics), Some(&c.object))
        .map_err(|e| format!("build_field failed: {e}"))?;
    let o = field_oracle(c);
    let mut clean = true;
    for i in 0..c.h * c.w {
        if o.ambiguous[i] {
            clean = false;
            continue;
        }
        if field.is_valid(i) != o.valid[i] {
            return Err(format!("pixel {i}: valid {} vs oracle {}", field.is_valid(i), o.valid[i]));
        }
        if o.valid[i] {
            let (a, b) = (field.target(i), o.target[i]);
            let tol = if c.transform.kind.is_3d() { 1e-9 } else { 0.0 };
            if (a[0] - b[0]).abs() > tol || (a[1] - b[1]).abs() > tol {
                return Err(format!("pixel {i}: target {a:?} vs oracle {b:?}"));
            }
        }
    }
    if !clean {
        return Ok(false);
    }
    let got = splat(&c.signal, &field).map_err(|e| e.to_string())?;
    let want = splat_oracle(&c.signal, &o.target, &o.valid, field.depth());
    if got != want {
        return Err("nearest splat differs from oracle".into());
    }
    let tm = transform_mask(&c.object, &field).map_err(|e| e.to_string())?;
    let splat_mask = splat_oracle(&c.object, &o.target, &o.valid, field.depth());
    let covered: Vec<bool> = {
        let ones = Raster::filled(c.h, c.w, 1, 1.0);
        splat_oracle(&ones, &o.target, &o.valid, field.depth()).to_bools()
    };
    let closed = close_oracle(&splat_mask.to_bools(), c.h, c.w);
    for p in 0..c.h * c.w {
        let on = tm.binary.data()[p] > 0.5;
        if covered[p] && on != (splat_mask.data()[p] > 0.5) {
            return Err(format!("transformed mask differs from splat at covered pixel {p}"));
        }
        if !covered[p] && on && !closed[p] {
            return Err(format!("uncovered pixel {p} filled outside the closing"));
        }
    }
    let translation = match c.transform.kind {
        EditKind::Translate2d => c.transform.params.offset.unwrap().iter().all(|o| o.fract() == 0.0),
        EditKind::Identity | EditKind::Remove => true,
        _ => false,
    };
    if translation {
        let want = splat_mask.to_bools();
        if tm.binary.to_bools() != want {
            return Err("translated mask is not the shifted mask".into());
        }
    }
    let m = mask_algebra(&c.object, &field).map_err(|e| e.to_string())?;
    let obj = c.object.to_bools();
    let t = tm.binary.to_bools();
    for p in 0..c.h * c.w {
        let checks = [
            (m.m_disocc.data()[p] > 0.5, obj[p] && !t[p]),
            (m.m_ne.data()[p] > 0.5, !obj[p] && !t[p]),
            (m.m_bg.data()[p] > 0.5, !obj[p]),
            (m.m_obj_t.data()[p] > 0.5, t[p]),
        ];
        if checks.iter().any(|(a, b)| a != b) {
            return Err(format!("mask algebra differs at pixel {p}"));
        }
    }
    Ok(true)
}

/// Dilate then erode with a 3×3 window; off-grid counts as set for erosion.
pub fn close_oracle(bits: &[bool], h: usize, w: usize) -> Vec<bool> {
    let get = |b: &[bool], x: i64, y: i64, outside: bool| {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            outside
        } else {
            b[y as usize * w + x as usize]
        }
    };
    let mut dil = vec![false; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut any = false;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    any |= get(bits, x + dx, y + dy, false);
                }
            }
            dil[y as usize * w + x as usize] = any;
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut all = true;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    all &= get(&dil, x + dx, y + dy, true);
                }
            }
            out[y as usize * w + x as usize] = all;
        }
    }
    out
}

pub fn field_of(c: &GeoCase) -> EditField {
    build_field(&c.transform, c.h, c.w, c.depth.as_ref(), Some(&c.intrinsics), Some(&c.object)).unwrap()
}

// --------------------------------------------------------------- attention

/// Softmax(q·kᵀ/√d) evaluated with explicit loops.
pub fn attention_map_oracle(q: &[Vec<f64>], k: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn attention_oracle(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let a = attention_map_oracle(q, k);
    a.iter()
        .map(|row| (0..v[0].len()).map(|c| row.iter().zip(v).map(|(p, vj)| p * vj[c]).sum()).collect())
        .collect()
}

// ------------------------------------------------------------------ losses

/// Direct transliteration of the foreground-to-background correlation loss:
/// explicit loops, no matrix library.
#[allow(clippy::too_many_arguments)]
pub fn remove_loss_oracle(
    a_edit: &[Vec<f64>],
    a_ref: &[Vec<f64>],
    rows: &[bool],
    obj: &[bool],
    bg: &[bool],
    grid: (usize, usize),
    literal: bool,
    cosine: bool,
) -> f64 {
    let (h, w) = grid;
    let n = h * w;
    let norm = |r: &Vec<f64>| -> Vec<f64> {
        if !cosine {
            return r.clone();
        }
        let l = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter().map(|v| v / l).collect()
    };
    let ae: Vec<Vec<f64>> = a_edit.iter().map(norm).collect();
    let ar: Vec<Vec<f64>> = a_ref.iter().map(norm).collect();
    let diag = (((h - 1).pow(2) + (w - 1).pow(2)) as f64).sqrt();
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..n {
        if !rows[i] {
            continue;
        }
        let mut c = vec![0.0; n];
        for (j, cj) in c.iter_mut().enumerate() {
            for k in 0..ae[i].len() {
                *cj += if literal { ae[i][k] * ar[k][j] } else { ae[i][k] * ar[j][k] };
            }
        }
        let (mut rho_ob, mut u_bg) = (f64::NEG_INFINITY, 0);
        let mut rho_oo = f64::NEG_INFINITY;
        for j in 0..n {
            if bg[j] && c[j] > rho_ob {
                rho_ob = c[j];
                u_bg = j;
            }
            if obj[j] && c[j] > rho_oo {
                rho_oo = c[j];
            }
        }
        let (xi, yi) = ((i % w) as f64, (i / w) as f64);
        let (xu, yu) = ((u_bg % w) as f64, (u_bg / w) as f64);
        let dist = ((xi - xu).powi(2) + (yi - yu).powi(2)).sqrt();
        let d = if diag > 0.0 { dist / diag } else { 0.0 };
        total += (-d).exp() * (rho_oo.max(1e-12).ln() - rho_ob.max(1e-12).ln());
        count += 1.0;
    }
    total / count
}

/// Row-stochastic random matrix.
pub fn random_attention(r: &mut ChaCha8Rng, rows: usize, cols: usize, sharp: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let e: Vec<f64> = (0..cols).map(|_| (sharp * r.random_range(-1.0..1.0f64)).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn to_matrix(rows: &[Vec<f64>]) -> geodiff::Matrix {
    geodiff::Matrix::from_vec(rows.len(), rows[0].len(), rows.iter().flatten().copied().collect()).unwrap()
}

pub fn to_rows(m: &geodiff::Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

// ------------------------------------------------------------------ scenes

/// Midpoint luminance between the object and background of a scene.
pub fn object_threshold(image: &Raster, mask: &Raster) -> f64 {
    let (mut fg, mut bg, mut nf, mut nb) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..image.pixel_count() {
        let l = geodiff::pipeline::luminance(image.pixel(i));
        if mask.data()[i] > 0.5 {
            fg += l;
            nf += 1.0;
        } else {
            bg += l;
            nb += 1.0;
        }
    }
    0.5 * (fg / nf + bg / nb)
}

/// Pixels brighter than `thr`.
pub fn detect_object(image: &Raster, thr: f64) -> Raster {
    let (h, w) = image.dims();
    let bits: Vec<bool> = (0..h * w).map(|i| geodiff::pipeline::luminance(image.pixel(i)) > thr).collect();
    Raster::from_bools(h, w, &bits)
}

// --------------------------------------------------------------- gradients

/// A self and a cross attention layer on one small token grid, with the
/// edit branch's latent tokens and text embedding as free inputs.
pub struct BlockScene {
    pub grid: (usize, usize),
    pub z: Matrix,
    pub text: Matrix,
    z_ref: Matrix,
    text_ref: Matrix,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wkt: Matrix,
    wvt: Matrix,
    field: EditField,
    masks: [Vec<f64>; 6],
}

fn normal(r: &mut ChaCha8Rng, rows: usize, cols: usize, s: f64) -> Matrix {
    use rand_distr::{Distribution, StandardNormal};
    let v = (0..rows * cols).map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, r)).collect::<Vec<f64>>();
    Matrix::from_vec(rows, cols, v).unwrap()
}

impl BlockScene {
    /// At most 16 tokens; the object is a random rectangle moved by one
    /// token so that every mask is non-empty.
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        loop {
            let h = r.random_range(2..=4);
            let w = r.random_range(3..=4);
            let (x0, y0) = (r.random_range(0..w - 1), r.random_range(0..h));
            let (x1, y1) = (r.random_range(x0 + 1..w), r.random_range(y0 + 1..=h));
            let obj = Raster::rect_mask(h, w, x0, y0, x1, y1);
            let dx = if x1 < w { 1.0 } else { -1.0 };
            let field = build_field(&EditTransform::translate2d(dx, 0.0), h, w, None, None, Some(&obj)).unwrap();
            let m = mask_algebra(&obj, &field).unwrap();
            let v = |r: &Raster| r.data().to_vec();
            let masks = [v(&m.m_obj_t), v(&m.m_disocc), v(&m.m_ne), v(&m.m_bg), v(&m.m_obj), v(&m.m_obj_t_soft)];
            if masks[..5].iter().any(|m| !m.iter().any(|&x| x > 0.5)) {
                continue;
            }
            let (c, d, m_len, ct) = (4, 4, 3, 4);
            return Self {
                grid: (h, w),
                z: normal(&mut r, h * w, c, 1.0),
                text: normal(&mut r, m_len, ct, 1.0),
                z_ref: normal(&mut r, h * w, c, 1.0),
                text_ref: normal(&mut r, m_len, ct, 1.0),
                wq: normal(&mut r, c, d, 0.8),
                wk: normal(&mut r, c, d, 0.8),
                wv: normal(&mut r, c, d, 1.0),
                wkt: normal(&mut r, ct, d, 0.8),
                wvt: normal(&mut r, ct, d, 1.0),
                field,
                masks,
            };
        }
    }

    /// Builds the total loss at `(z, text)`. Returns the graph, the loss and
    /// the two input variables.
    pub fn loss(
        &self,
        z: &Matrix,
        text: &Matrix,
        weights: &LossWeights,
        w_remove: f64,
        removal: bool,
        opts: RemoveLossOptions,
    ) -> (Graph, Var, Var, Var) {
        let mut g = Graph::new();
        let zv = g.param(z.clone());
        let tv = g.param(text.clone());
        let wq = g.constant(self.wq.clone());
        let wkt = g.constant(self.wkt.clone());
        let q_e = g.matmul(zv, wq).unwrap();
        let k_e = g.matmul(tv, wkt).unwrap();

        let q_r = self.z_ref.matmul(&self.wq).unwrap();
        let k_r = self.z_ref.matmul(&self.wk).unwrap();
        let v_r = self.z_ref.matmul(&self.wv).unwrap();
        let k_rc = self.text_ref.matmul(&self.wkt).unwrap();
        let v_rc = self.text_ref.matmul(&self.wvt).unwrap();

        let kr = g.constant(k_r.clone());
        let vr = g.constant(v_r.clone());
        let (ys, a_s) = attention_var(&mut g, q_e, kr, vr).unwrap();
        let vrc = g.constant(v_rc.clone());
        let (yc, a_c) = attention_var(&mut g, q_e, k_e, vrc).unwrap();

        let y_ref_s = attention(&q_r, &k_r, &v_r).unwrap();
        let y_ref_c = attention(&q_r, &k_rc, &v_rc).unwrap();
        let y_ref_g_s = ref_guidance(&q_r, &k_r, &v_r, &self.field).unwrap();
        let y_ref_g_c = ref_guidance(&q_r, &k_rc, &v_rc, &self.field).unwrap();
        let a_ref_s = attention_map(&q_r, &k_r, q_r.cols()).unwrap();
        let a_ref_c = attention_map(&q_r, &k_rc, q_r.cols()).unwrap();
        let [m_obj_t, m_disocc, m_ne, m_bg, m_obj, _] = &self.masks;
        let block = |kind, y_edit_g, y_ref, y_ref_g, a_edit, a_ref| BlockLossInputs {
            grid: self.grid,
            kind,
            y_edit_g,
            y_ref,
            y_ref_g,
            a_edit,
            a_ref,
            m_obj_t,
            m_disocc,
            m_ne,
            m_bg,
            m_obj,
        };
        let blocks = [
            block(AttentionKind::SelfAttention, ys, &y_ref_s, &y_ref_g_s, a_s, &a_ref_s),
            block(AttentionKind::Cross, yc, &y_ref_c, &y_ref_g_c, a_c, &a_ref_c),
        ];
        let total = total_loss(&mut g, &blocks, weights, w_remove, removal, opts).unwrap().total;
        (g, total, zv, tv)
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Copy, Debug)]
pub struct FdReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the latent
    /// tokens.
    pub latent: f64,
    /// The same over the text embedding.
    pub text: f64,
    /// Coordinates left out because a max switches within one step.
    pub kinks: usize,
    pub coords: usize,
}

/// Compares the tape gradients with central differences of step `h` with
/// respect to the latent tokens and the text embedding. A coordinate where
/// the step-`h` and step-`h/10` quotients disagree straddles a switch of a
/// max and is excluded.
pub fn fd_check(
    s: &BlockScene,
    weights: &LossWeights,
    w_remove: f64,
    removal: bool,
    opts: RemoveLossOptions,
    h: f64,
) -> FdReport {
    let (g, loss, zv, tv) = s.loss(&s.z, &s.text, weights, w_remove, removal, opts);
    let grads = g.backward(loss).unwrap();
    let mut gz = grads.get_or_zeros(zv, s.z.shape()).0;
    let mut gt = grads.get_or_zeros(tv, s.text.shape()).0;
    let eval = |z: &Matrix, t: &Matrix| {
        let (g, l, _, _) = s.loss(z, t, weights, w_remove, removal, opts);
        g.value(l).item()
    };
    let quotient = |base: &Matrix, i: usize, is_z: bool, h: f64| {
        let mut p = base.clone();
        p.data_mut()[i] += h;
        let mut m = base.clone();
        m.data_mut()[i] -= h;
        let (fp, fm) = if is_z { (eval(&p, &s.text), eval(&m, &s.text)) } else { (eval(&s.z, &p), eval(&s.z, &m)) };
        (fp - fm) / (2.0 * h)
    };
    let inf = |m: &Matrix| m.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let scale = inf(&gz).max(inf(&gt)).max(1e-12);
    let mut kinks = 0;
    let mut numeric = |base: &Matrix, analytic: &mut Matrix, is_z: bool| -> Matrix {
        let mut out = Matrix::zeros(base.rows(), base.cols());
        for i in 0..base.data().len() {
            let coarse = quotient(base, i, is_z, h);
            let fine = quotient(base, i, is_z, h / 10.0);
            if (coarse - fine).abs() > 1e-4 * scale {
                kinks += 1;
                analytic.data_mut()[i] = 0.0;
                continue;
            }
            out.data_mut()[i] = coarse;
        }
        out
    };
    let nz = numeric(&s.z, &mut gz, true);
    let nt = numeric(&s.text, &mut gt, false);
    let rel = |a: &Matrix, n: &Matrix| {
        let norm = |m: &Matrix| m.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = norm(&a.zip_map(n, |x, y| x - y));
        let scale = norm(a).max(norm(n));
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    };
    FdReport {
        latent: rel(&gz, &nz),
        text: rel(&gt, &nt),
        kinks,
        coords: s.z.data().len() + s.text.data().len(),
    }
}

/// Weight sets that isolate each loss term, then all of them together.
pub fn weight_sets() -> Vec<(&'static str, LossWeights, f64)> {
    let only = |bg, obj, smooth| LossWeights {
        w_bg: bg,
        w_obj: obj,
        w_smooth: smooth,
        ..LossWeights::default()
    };
    vec![
        ("bg", only(1.0, 0.0, 0.0), 0.0),
        ("obj", only(0.0, 1.0, 0.0), 0.0),
        ("smooth", only(0.0, 0.0, 1.0), 0.0),
        ("remove", only(0.0, 0.0, 0.0), 1.0),
        ("total", only(1.0, 1.0, 0.1), 0.5),
    ]
}

// ------------------------------------------------------------- toy model

pub const TOY_CHECKPOINT: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/toy16.gdck");

/// Square position for the end-to-end runs, aligned to the 4-pixel latent grid.
pub const TOY_SQUARE: (usize, usize, usize) = (12, 24, 16);

pub fn toy_model() -> geodiff::diffnet::Denoiser {
    geodiff::diffnet::Denoiser::load(TOY_CHECKPOINT).expect("toy checkpoint")
}

/// Edit settings tuned for the toy checkpoint: strong background and object
/// terms, a slow text update, and a higher removal-weight ceiling.
pub fn toy_edit_config(transform: EditTransform) -> geodiff::pipeline::EditConfig {
    let mut cfg = geodiff::pipeline::EditConfig::new(transform);
    cfg.text_lr_scale = 1e-3;
    cfg.weights.w_bg = 300.0;
    cfg.weights.w_obj = 2000.0;
    cfg.weights.w_remove = 40.0;
    cfg.weights.adaptive.w_max = 40.0;
    cfg
}

pub fn toy_scene(seed: u64) -> geodiff::train::ToyScene {
    let (x0, y0, side) = TOY_SQUARE;
    geodiff::train::toy_scene_at(&mut rng(seed), 64, x0, y0, side)
}

/// One +8 px translation on the toy checkpoint, judged by the centroid of the
/// bright region in the output and by warp error against the unedited input.
#[derive(Debug)]
pub struct ToyTranslation {
    pub expected: (f64, f64),
    pub centroid: Option<(f64, f64)>,
    pub warp_error: f64,
    pub warp_error_input: f64,
}

impl ToyTranslation {
    pub fn centroid_ok(&self) -> bool {
        self.centroid
            .is_some_and(|(x, y)| (x - self.expected.0).abs() <= 1.0 && (y - self.expected.1).abs() <= 1.0)
    }

    pub fn passed(&self) -> bool {
        self.centroid_ok() && self.warp_error < self.warp_error_input
    }
}

pub fn toy_translation(model: &geodiff::diffnet::Denoiser, seed: u64) -> ToyTranslation {
    let scene = toy_scene(seed);
    let cfg = toy_edit_config(EditTransform::translate2d(8.0, 0.0));
    let out = geodiff::pipeline::run_edit(model, &scene.image, &scene.mask, None, &cfg, None, &mut |_| {}).unwrap();
    let (x0, y0, side) = TOY_SQUARE;
    let half = (side as f64 - 1.0) / 2.0;
    let thr = object_threshold(&scene.image, &scene.mask);
    ToyTranslation {
        expected: (x0 as f64 + half + 8.0, y0 as f64 + half),
        centroid: detect_object(&out.edited, thr).centroid(),
        warp_error: out.warp_error.unwrap(),
        warp_error_input: geodiff::pipeline::warp_error(&scene.image, &scene.image, &scene.mask, &out.geometry.field)
            .unwrap()
            .unwrap(),
    }
}

/// Round-trip PSNR of plain DDIM inversion then sampling, in image space.
pub fn toy_inversion_psnr(model: &geodiff::diffnet::Denoiser, seed: u64) -> f64 {
    use geodiff::pipeline::{psnr, LatentCodec};
    let scene = toy_scene(seed);
    let codec = LatentCodec::default();
    let z0 = codec.encode(&scene.image).unwrap();
    let traj = geodiff::sampler::invert(model, &z0, model.null_text(), 50).unwrap();
    let z = geodiff::sampler::denoise(model, &traj, traj.noise_latent(), model.null_text()).unwrap();
    psnr(&codec.decode(&z0, (16, 16)).unwrap(), &codec.decode(&z, (16, 16)).unwrap()).unwrap()
}

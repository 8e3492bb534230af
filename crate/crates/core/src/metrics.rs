//! Motion scoring against synthetic ground truth.
//!
//! Displacements are recovered by exhaustive integer-shift search maximizing
//! zero-mean normalized cross-correlation, which is exact on the integer-
//! shift clips the generator produces. Fidelity is the Pearson correlation
//! between the reference truth track and the estimated track of a generated
//! clip; temporal consistency is the mean NCC at the estimated shifts.

use crate::error::{Error, Result};
use crate::synth::{MotionKind, MotionTruth};
use crate::tensor::Tensor;

/// Result of registering one consecutive frame pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftEstimate {
    pub dx: i32,
    pub dy: i32,
    pub ncc: f32,
    /// False when a frame was constant and the shift defaulted to zero.
    pub confident: bool,
}

/// Zero-mean NCC between `a` and `b` shifted by `(dx, dy)`, over the overlap
/// region. Returns `None` if either patch is constant.
fn ncc_at(a: &[f32], b: &[f32], h: usize, w: usize, dx: i32, dy: i32) -> Option<f64> {
    let x0 = dx.max(0) as usize;
    let x1 = (w as i32 + dx.min(0)) as usize;
    let y0 = dy.max(0) as usize;
    let y1 = (h as i32 + dy.min(0)) as usize;
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    let count = ((x1 - x0) * (y1 - y0)) as f64;
    let mut sa = 0.0f64;
    let mut sb = 0.0f64;
    for y in y0..y1 {
        for x in x0..x1 {
            // content displaced by (dx, dy): b(x, y) aligns with a(x - dx, y - dy)
            sa += a[((y as i32 - dy) as usize) * w + (x as i32 - dx) as usize] as f64;
            sb += b[y * w + x] as f64;
        }
    }
    let (ma, mb) = (sa / count, sb / count);
    let mut cov = 0.0f64;
    let mut va = 0.0f64;
    let mut vb = 0.0f64;
    for y in y0..y1 {
        for x in x0..x1 {
            let av = a[((y as i32 - dy) as usize) * w + (x as i32 - dx) as usize] as f64 - ma;
            let bv = b[y * w + x] as f64 - mb;
            cov += av * bv;
            va += av * av;
            vb += bv * bv;
        }
    }
    if va < 1e-12 || vb < 1e-12 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Best shift of content from `a` to `b` within `+-max_shift`, maximizing
/// NCC. Ties break toward the smallest magnitude, then lexicographically on
/// `(dx, dy)`. Constant frames yield a low-confidence zero shift.
pub fn best_shift(a: &[f32], b: &[f32], h: usize, w: usize, max_shift: usize) -> ShiftEstimate {
    let m = max_shift as i32;
    let mut shifts: Vec<(i32, i32)> = (-m..=m)
        .flat_map(|dx| (-m..=m).map(move |dy| (dx, dy)))
        .collect();
    shifts.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dx, dy));
    let mut best: Option<(f64, i32, i32)> = None;
    for (dx, dy) in shifts {
        if let Some(r) = ncc_at(a, b, h, w, dx, dy) {
            if best.map_or(true, |(br, _, _)| r > br) {
                best = Some((r, dx, dy));
            }
        }
    }
    match best {
        Some((r, dx, dy)) => ShiftEstimate { dx, dy, ncc: r as f32, confident: true },
        None => ShiftEstimate { dx: 0, dy: 0, ncc: 1.0, confident: false },
    }
}

fn expect_clip(op: &'static str, clip: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let d = clip.dims();
    if d.len() != 4 || d[0] < 2 {
        return Err(Error::Shape {
            op,
            detail: format!("expected (f>=2, ch, h, w), got {d:?}"),
        });
    }
    Ok((d[0], d[1], d[2], d[3]))
}

fn frame<'c>(clip: &'c Tensor, t: usize) -> &'c [f32] {
    let d = clip.dims();
    let (ch, h, w) = (d[1], d[2], d[3]);
    &clip.data()[t * ch * h * w..t * ch * h * w + h * w]
}

/// Global per-frame displacement estimates (channel 0), one per consecutive
/// pair. The search window is `+-h/4`.
pub fn estimate_displacements(clip: &Tensor) -> Result<Vec<ShiftEstimate>> {
    let (f, _, h, w) = expect_clip("estimate_displacements", clip)?;
    let max_shift = h / 4;
    Ok((1..f)
        .map(|t| best_shift(frame(clip, t - 1), frame(clip, t), h, w, max_shift))
        .collect())
}

/// Displacement estimates restricted to a window around a known object
/// track: the patch of half-size `half` centered on `centers[t-1]` in frame
/// t-1 is searched for in frame t.
pub fn estimate_displacements_windowed(
    clip: &Tensor,
    centers: &[(f32, f32)],
    half: usize,
) -> Result<Vec<ShiftEstimate>> {
    let (f, _, h, w) = expect_clip("estimate_displacements_windowed", clip)?;
    if centers.len() != f {
        return Err(Error::Shape {
            op: "estimate_displacements_windowed",
            detail: format!("{} centers for {f} frames", centers.len()),
        });
    }
    let max_shift = (h / 4) as i32;
    let mut out = Vec::with_capacity(f - 1);
    for t in 1..f {
        let (cx, cy) = centers[t - 1];
        // clamp the template box into the frame
        let bx0 = (cx.round() as i32 - half as i32).clamp(0, w as i32 - 1) as usize;
        let by0 = (cy.round() as i32 - half as i32).clamp(0, h as i32 - 1) as usize;
        let bx1 = (cx.round() as i32 + half as i32 + 1).clamp(1, w as i32) as usize;
        let by1 = (cy.round() as i32 + half as i32 + 1).clamp(1, h as i32) as usize;
        let (tw, th) = (bx1 - bx0, by1 - by0);
        let prev = frame(clip, t - 1);
        let next = frame(clip, t);
        let tpl: Vec<f32> = (by0..by1)
            .flat_map(|y| prev[y * w + bx0..y * w + bx1].iter().copied())
            .collect::<Vec<_>>();
        let mut best: Option<(f64, i32, i32)> = None;
        let mut shifts: Vec<(i32, i32)> = (-max_shift..=max_shift)
            .flat_map(|dx| (-max_shift..=max_shift).map(move |dy| (dx, dy)))
            .collect();
        shifts.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dx, dy));
        for (dx, dy) in shifts {
            let nx0 = bx0 as i32 + dx;
            let ny0 = by0 as i32 + dy;
            if nx0 < 0 || ny0 < 0 || nx0 as usize + tw > w || ny0 as usize + th > h {
                continue;
            }
            let patch: Vec<f32> = (0..th)
                .flat_map(|y| {
                    next[(ny0 as usize + y) * w + nx0 as usize
                        ..(ny0 as usize + y) * w + nx0 as usize + tw]
                        .iter()
                        .copied()
                })
                .collect::<Vec<_>>();
            if let Some(r) = ncc_at(&tpl, &patch, th, tw, 0, 0) {
                if best.map_or(true, |(br, _, _)| r > br) {
                    best = Some((r, dx, dy));
                }
            }
        }
        out.push(match best {
            Some((r, dx, dy)) => ShiftEstimate { dx, dy, ncc: r as f32, confident: true },
            None => ShiftEstimate { dx: 0, dy: 0, ncc: 1.0, confident: false },
        });
    }
    Ok(out)
}

/// Correlation-based motion score of a generated clip against reference
/// ground truth.
#[derive(Clone, Debug)]
pub struct MotionScore {
    /// Pearson correlation between reference and estimated displacement
    /// sequences (x and y concatenated), in `[-1, 1]`.
    pub correlation: f32,
    /// Mean Euclidean displacement error in pixels.
    pub mean_abs_err: f32,
    /// Estimated per-frame track of the generated clip.
    pub track: Vec<(i32, i32)>,
    pub low_confidence: bool,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va < 1e-12 || vb < 1e-12 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Scores how well `generated` reproduces the reference motion. Object
/// motion (translate) is registered inside a window that follows the
/// reference track; global motion uses whole-frame registration. Errors on a
/// zero-variance reference track.
pub fn motion_fidelity(truth: &MotionTruth, generated: &Tensor) -> Result<MotionScore> {
    let (f, _, _, _) = expect_clip("motion_fidelity", generated)?;
    if truth.disp.len() != f {
        return Err(Error::Shape {
            op: "motion_fidelity",
            detail: format!("truth has {} frames, clip has {f}", truth.disp.len()),
        });
    }
    let ref_seq: Vec<f64> = truth.disp[1..]
        .iter()
        .map(|d| d.0 as f64)
        .chain(truth.disp[1..].iter().map(|d| d.1 as f64))
        .collect();
    // constant concatenated track (static, or uniform motion with dx == dy)
    // has no variance to correlate against
    if ref_seq.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::StaticReference);
    }

    let est = match (&truth.kind, &truth.centroid) {
        (MotionKind::Translate, Some(track)) => {
            let half = truth.object_size.map_or(7, |os| os / 2 + 2);
            estimate_displacements_windowed(generated, track, half)?
        }
        _ => estimate_displacements(generated)?,
    };
    let est_seq: Vec<f64> = est
        .iter()
        .map(|e| e.dx as f64)
        .chain(est.iter().map(|e| e.dy as f64))
        .collect();

    // reference varies but the estimate may not (e.g. a static generation);
    // that is simply zero correlation, not an error
    let correlation = pearson(&ref_seq, &est_seq).map_or(0.0, |r| r as f32);
    let mean_abs_err = truth.disp[1..]
        .iter()
        .zip(&est)
        .map(|(r, e)| {
            let (ex, ey) = ((e.dx - r.0) as f64, (e.dy - r.1) as f64);
            (ex * ex + ey * ey).sqrt()
        })
        .sum::<f64>() as f32
        / (f - 1) as f32;
    Ok(MotionScore {
        correlation,
        mean_abs_err,
        track: est.iter().map(|e| (e.dx, e.dy)).collect(),
        low_confidence: est.iter().any(|e| !e.confident),
    })
}

/// Mean NCC between consecutive frames at their estimated shifts. Constant
/// frame pairs count as 1.0; independent noise scores near zero.
pub fn temporal_consistency(clip: &Tensor) -> Result<f32> {
    let (f, _, h, w) = expect_clip("temporal_consistency", clip)?;
    let max_shift = h / 4;
    let mut acc = 0.0f64;
    for t in 1..f {
        let est = best_shift(frame(clip, t - 1), frame(clip, t), h, w, max_shift);
        acc += est.ncc as f64;
    }
    Ok((acc / (f - 1) as f64) as f32)
}

//! Scalar reference forms of the training losses. The tape versions used for
//! backpropagation live in [`crate::tensor::Tape`].

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

fn check(logits: &[f32], target: &[u8]) -> Result<()> {
    if logits.len() != target.len() {
        return Err(Error::Shape(format!("{} logits vs {} targets", logits.len(), target.len())));
    }
    if let Some(v) = target.iter().find(|v| **v > 1) {
        return Err(Error::InvalidParams(format!("target value {v} is not binary")));
    }
    Ok(())
}

/// Mean binary cross-entropy over all voxels, in the stable logit form.
pub fn bce_loss(logits: &[f32], target: &[u8]) -> Result<f64> {
    check(logits, target)?;
    let sum: f64 = logits
        .iter()
        .zip(target)
        .map(|(z, y)| {
            let (z, y) = (*z as f64, *y as f64);
            z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
        })
        .sum();
    Ok(sum / logits.len().max(1) as f64)
}

/// Soft Dice loss per clip (`clips` equal contiguous chunks), averaged.
pub fn dice_loss(logits: &[f32], target: &[u8], clips: usize, smooth: f64) -> Result<f64> {
    check(logits, target)?;
    if clips == 0 || !logits.len().is_multiple_of(clips) {
        return Err(Error::Shape(format!("{} voxels do not split into {clips} clips", logits.len())));
    }
    let per = logits.len() / clips;
    let mut total = 0.0;
    for (z, y) in logits.chunks(per).zip(target.chunks(per)) {
        let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
        for (z, y) in z.iter().zip(y) {
            let p = 1.0 / (1.0 + (-(*z as f64)).exp());
            inter += p * *y as f64;
            ps += p;
            ys += *y as f64;
        }
        total += 1.0 - (2.0 * inter + smooth) / (ps + ys + smooth);
    }
    Ok(total / clips as f64)
}

pub fn check_weights(w_bce: f64, w_dice: f64) -> Result<()> {
    if !(w_bce >= 0.0 && w_dice >= 0.0 && w_bce + w_dice > 0.0) {
        return Err(Error::Config(format!("loss weights ({w_bce}, {w_dice}) must be >= 0 and not both zero")));
    }
    Ok(())
}

pub fn combined_loss(logits: &[f32], target: &[u8], clips: usize, w_bce: f64, w_dice: f64, smooth: f64) -> Result<f64> {
    check_weights(w_bce, w_dice)?;
    let mut loss = 0.0;
    if w_bce != 0.0 {
        loss += w_bce * bce_loss(logits, target)?;
    }
    if w_dice != 0.0 {
        loss += w_dice * dice_loss(logits, target, clips, smooth)?;
    }
    Ok(loss)
}

/// Records `w_bce * bce + w_dice * dice` on the tape; terms with zero weight are left out.
pub fn combined_loss_var<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    target: &[T],
    clips: usize,
    w_bce: f64,
    w_dice: f64,
    smooth: f64,
) -> Var {
    let bce = (w_bce != 0.0).then(|| {
        let l = tape.bce_with_logits(logits, target);
        tape.scale(l, T::of(w_bce))
    });
    let dice = (w_dice != 0.0).then(|| {
        let l = tape.soft_dice(logits, target, clips, T::of(smooth));
        tape.scale(l, T::of(w_dice))
    });
    match (bce, dice) {
        (Some(a), Some(b)) => tape.add(a, b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => panic!("loss weights must not both be zero"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_logits_give_ln2() {
        let l = bce_loss(&[0.0; 6], &[0, 1, 1, 0, 0, 1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_tiny_loss() {
        let y = [1u8, 0, 1, 1];
        let z: Vec<f32> = y.iter().map(|v| if *v == 1 { 50.0 } else { -50.0 }).collect();
        assert!(bce_loss(&z, &y).unwrap() < 1e-9);
        assert!(dice_loss(&z, &y, 1, 1.0).unwrap() < 1e-9);
    }

    #[test]
    fn bce_matches_plain_formula() {
        let z = [0.3f32, -1.7, 2.2, -0.05];
        let y = [1u8, 0, 0, 1];
        let direct: f64 = z
            .iter()
            .zip(&y)
            .map(|(z, y)| {
                let p = 1.0 / (1.0 + (-(*z as f64)).exp());
                let y = *y as f64;
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((bce_loss(&z, &y).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn dice_conventions() {
        // all-zero target with predictions near zero: (0 + 1) / (~0 + 0 + 1)
        assert!(dice_loss(&[-60.0; 4], &[0; 4], 1, 1.0).unwrap() < 1e-12);
        let z = [0.4f32, -0.2, 1.1, -2.0, 0.0, 0.7];
        let y = [1u8, 0, 1, 0, 0, 1];
        let sig = |v: f32| 1.0 / (1.0 + (-(v as f64)).exp());
        let per = |r: std::ops::Range<usize>| {
            let inter: f64 = r.clone().map(|i| sig(z[i]) * y[i] as f64).sum();
            let ps: f64 = r.clone().map(|i| sig(z[i])).sum();
            let ys: f64 = r.map(|i| y[i] as f64).sum();
            1.0 - (2.0 * inter + 1.0) / (ps + ys + 1.0)
        };
        let want = (per(0..3) + per(3..6)) / 2.0;
        assert!((dice_loss(&z, &y, 2, 1.0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn combined_weights() {
        let z = [0.4f32, -0.2, 1.1, -2.0];
        let y = [1u8, 0, 1, 1];
        let bce = bce_loss(&z, &y).unwrap();
        let dice = dice_loss(&z, &y, 1, 1.0).unwrap();
        assert_eq!(combined_loss(&z, &y, 1, 1.0, 0.0, 1.0).unwrap(), bce);
        assert_eq!(combined_loss(&z, &y, 1, 0.0, 1.0, 1.0).unwrap(), dice);
        assert!((combined_loss(&z, &y, 1, 0.5, 0.5, 1.0).unwrap() - 0.5 * (bce + dice)).abs() < 1e-12);
        assert!(combined_loss(&z, &y, 1, 0.0, 0.0, 1.0).is_err());
        assert!(bce_loss(&z, &[1, 0, 2, 1]).is_err());
    }

    #[test]
    fn tape_loss_agrees_with_scalar_form() {
        let z = [0.4f64, -0.2, 1.1, -2.0, 0.3, 0.9];
        let y = [1u8, 0, 1, 1, 0, 0];
        let mut tape = Tape::<f64>::new();
        let zv = tape.constant(Tensor::new(vec![6], z.to_vec()));
        let yt: Vec<f64> = y.iter().map(|v| *v as f64).collect();
        let l = combined_loss_var(&mut tape, zv, &yt, 2, 0.5, 0.5, 1.0);
        let zf: Vec<f32> = z.iter().map(|v| *v as f32).collect();
        let want = combined_loss(&zf, &y, 2, 0.5, 0.5, 1.0).unwrap();
        assert!((tape.value(l).data()[0] - want).abs() < 1e-6);
    }
}

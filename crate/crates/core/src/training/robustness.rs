//! Input perturbations: one-step sign-gradient attacks and centre occlusion.

use num_traits::Zero;

use crate::error::{Error, Result};
use crate::model::Vit;
use crate::numerics::{Graph, Tensor};
use crate::scalar::Scalar;

/// Gradient of the mean cross-entropy with respect to `images` `[B,H,W,C]`.
pub fn input_gradient<T: Scalar>(vit: &Vit<T>, images: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let x = images.clone().with_requires_grad(true);
    let f = vit.forward(&mut g, &x, None)?;
    let loss = g.cross_entropy(f.logits, labels, T::zero())?;
    g.backward(loss)?;
    Ok(g.grad(f.input).expect("input requires grad").to_vec())
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `clip(x + ε · sign(∂loss/∂x), 0, 1)` on pixels in `[0, 1]`.
pub fn fgsm_attack<T: Scalar>(vit: &Vit<T>, images: &Tensor<T>, labels: &[usize], epsilon: T) -> Result<Tensor<T>> {
    if !(epsilon >= T::zero()) {
        return Err(Error::invalid("fgsm_attack", "epsilon must be non-negative"));
    }
    if epsilon == T::zero() {
        return Ok(images.clone());
    }
    let grad = input_gradient(vit, images, labels)?;
    let data = images
        .data()
        .iter()
        .zip(&grad)
        .map(|(&x, &g)| (x + epsilon * sign(g)).max(T::zero()).min(T::one()))
        .collect();
    Tensor::new(images.shape().to_vec(), data)
}

/// The same attack on 8-bit pixels with `ε = steps / 255`, so the
/// perturbation is exactly `steps` levels wherever it is not clipped.
pub fn fgsm_attack_u8<T: Scalar>(vit: &Vit<T>, pixels: &[u8], shape: [usize; 4], labels: &[usize], steps: u8) -> Result<Vec<u8>> {
    let numel: usize = shape.iter().product();
    if pixels.len() != numel {
        return Err(Error::shape("fgsm_attack_u8", format!("{} pixels for {shape:?}", pixels.len())));
    }
    if steps == 0 {
        return Ok(pixels.to_vec());
    }
    let scale = T::of(1.0 / 255.0);
    let images = Tensor::new(shape.to_vec(), pixels.iter().map(|&p| T::of(p as f64) * scale).collect())?;
    let grad = input_gradient(vit, &images, labels)?;
    Ok(pixels
        .iter()
        .zip(&grad)
        .map(|(&p, &g)| {
            if g > T::zero() {
                p.saturating_add(steps)
            } else if g < T::zero() {
                p.saturating_sub(steps)
            } else {
                p
            }
        })
        .collect())
}

/// Rows and columns `[start, end)` of the centred square covering
/// `⌊fraction · side⌋` pixels per side.
pub fn occlusion_box(height: usize, width: usize, fraction: f64) -> Result<((usize, usize), (usize, usize))> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("center_occlusion", format!("fraction {fraction} outside [0, 1]")));
    }
    let span = |side: usize| {
        let len = (fraction * side as f64).floor() as usize;
        let start = (side - len) / 2;
        (start, start + len)
    };
    Ok((span(height), span(width)))
}

/// Zeroes the centred square of an `[.., H, W, C]` image buffer.
pub fn center_occlusion<P: Copy + Zero>(pixels: &[P], height: usize, width: usize, channels: usize, fraction: f64) -> Result<Vec<P>> {
    let per = height * width * channels;
    if per == 0 || pixels.len() % per != 0 {
        return Err(Error::shape("center_occlusion", format!("{} values for {height}×{width}×{channels}", pixels.len())));
    }
    let ((r0, r1), (c0, c1)) = occlusion_box(height, width, fraction)?;
    let mut out = pixels.to_vec();
    for image in out.chunks_mut(per) {
        for r in r0..r1 {
            for c in c0..c1 {
                let at = (r * width + c) * channels;
                image[at..at + channels].iter_mut().for_each(|v| *v = P::zero());
            }
        }
    }
    Ok(out)
}

/// [`center_occlusion`] on a `[B, H, W, C]` tensor.
pub fn center_occlusion_tensor<T: Scalar>(images: &Tensor<T>, fraction: f64) -> Result<Tensor<T>> {
    let [_, h, w, c] = images.shape() else {
        return Err(Error::shape("center_occlusion", format!("expected [B,H,W,C], got {:?}", images.shape())));
    };
    let data = center_occlusion(images.data(), *h, *w, *c, fraction)?;
    Tensor::new(images.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn occlusion_extremes() {
        let img: Vec<u8> = (0..4 * 4 * 2).map(|v| v as u8 + 1).collect();
        assert_eq!(center_occlusion(&img, 4, 4, 2, 0.0).unwrap(), img);
        assert!(center_occlusion(&img, 4, 4, 2, 1.0).unwrap().iter().all(|&v| v == 0));
        assert!(center_occlusion(&img, 4, 4, 2, 1.5).is_err());
    }

    #[test]
    fn occlusion_of_224_at_half_is_112_block() {
        let ((r0, r1), (c0, c1)) = occlusion_box(224, 224, 0.5).unwrap();
        assert_eq!((r1 - r0, c1 - c0), (112, 112));
        assert_eq!((r0, c0), (56, 56));
    }
}
